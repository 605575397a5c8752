"""Encoder-only transformer classifier over embedded clinical tokens.

Layout: a learned classification token is prepended at ``t = 0``; a pre-norm
encoder stack runs over the sequence; the final normalised classification
token passes through two hidden layers (point estimates, or radial layers for
the Bayesian variant) and a linear layer producing two logits.

The last encoder layer only computes the classification-token query, since
no other position reaches the head.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .bayes import KlTermInputs, RadialLinear, kl_term, elbo_loss
from .checkpoint import load_checkpoint, save_checkpoint
from .data import ConceptVocabulary
from .embedding import Batch, EmbeddingLayer, EncodedEpisode, make_batch, time_embedding
from .metrics import MetricError, auc_roc

MASK_VALUE = -1e9
HEAD_KINDS = ("deterministic", "bayesian")


class ConfigError(ValueError):
    pass


class TrainingDivergence(RuntimeError):
    """Loss or activations became non-finite during training."""


@dataclass
class ModelConfig:
    d_model: int = 32
    heads: int = 2
    layers: int = 1
    ff_width: int | None = None
    dropout: float = 0.1
    head_kind: str = "deterministic"
    max_len: int = 512
    dtype: str = "float64"
    radial_bias: bool = True
    prior_sigma: float = 1.0
    radial_init_std: float = 0.05

    def __post_init__(self):
        if self.ff_width is None:
            self.ff_width = 2 * self.d_model
        self.validate()

    def validate(self) -> None:
        if self.d_model <= 0 or self.d_model % 2:
            raise ConfigError("d_model must be a positive even number")
        if self.heads <= 0 or self.d_model % self.heads:
            raise ConfigError(f"d_model={self.d_model} is not divisible by heads={self.heads}")
        if self.layers < 1:
            raise ConfigError("need at least one encoder layer")
        if self.head_kind not in HEAD_KINDS:
            raise ConfigError(f"head_kind must be one of {HEAD_KINDS}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")
        if self.max_len < 2:
            raise ConfigError("max_len must allow the classification token plus one token")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64")

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64

    def to_dict(self) -> dict:
        return asdict(self)


class Linear:
    def __init__(self, w: ad.Tensor, b: ad.Tensor):
        self.w, self.b = w, b

    @classmethod
    def init(cls, fan_in, fan_out, rng, dtype, name, gain=1.0):
        w = rng.normal(0.0, gain / math.sqrt(fan_in), size=(fan_in, fan_out))
        return cls(ad.parameter(w, dtype=dtype, name=f"{name}.w"),
                   ad.parameter(np.zeros(fan_out), dtype=dtype, name=f"{name}.b"))

    def __call__(self, x: ad.Tensor) -> ad.Tensor:
        return x @ self.w + self.b

    def named_parameters(self, prefix):
        return {f"{prefix}.w": self.w, f"{prefix}.b": self.b}


class EncoderLayer:
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, name: str):
        d, dt = cfg.d_model, cfg.np_dtype
        self.cfg = cfg
        self.ln1_g = ad.parameter(np.ones(d), dtype=dt)
        self.ln1_b = ad.parameter(np.zeros(d), dtype=dt)
        self.ln2_g = ad.parameter(np.ones(d), dtype=dt)
        self.ln2_b = ad.parameter(np.zeros(d), dtype=dt)
        self.q = Linear.init(d, d, rng, dt, f"{name}.q")
        self.k = Linear.init(d, d, rng, dt, f"{name}.k")
        self.v = Linear.init(d, d, rng, dt, f"{name}.v")
        self.o = Linear.init(d, d, rng, dt, f"{name}.o")
        self.ff1 = Linear.init(d, cfg.ff_width, rng, dt, f"{name}.ff1", gain=math.sqrt(2.0))
        self.ff2 = Linear.init(cfg.ff_width, d, rng, dt, f"{name}.ff2")

    def named_parameters(self, prefix):
        out = {f"{prefix}.ln1_g": self.ln1_g, f"{prefix}.ln1_b": self.ln1_b,
               f"{prefix}.ln2_g": self.ln2_g, f"{prefix}.ln2_b": self.ln2_b}
        for nm in ("q", "k", "v", "o", "ff1", "ff2"):
            out.update(getattr(self, nm).named_parameters(f"{prefix}.{nm}"))
        return out

    def _split(self, x: ad.Tensor, n: int, length: int) -> ad.Tensor:
        h = self.cfg.heads
        return ad.transpose(ad.reshape(x, (n, length, h, self.cfg.d_model // h)), (0, 2, 1, 3))

    def __call__(self, x: ad.Tensor, mask_add: np.ndarray, query_cls_only: bool, training: bool,
                 rng: np.random.Generator | None, keep_attention: list | None = None) -> ad.Tensor:
        cfg = self.cfg
        n, length, d = x.shape
        hx = ad.layer_norm(x, self.ln1_g, self.ln1_b)
        hq = hx[:, :1, :] if query_cls_only else hx
        lq = hq.shape[1]
        q = self._split(self.q(hq), n, lq)
        k = self._split(self.k(hx), n, length)
        v = self._split(self.v(hx), n, length)
        scores = ad.scale(q @ ad.swapaxes(k, -1, -2), 1.0 / math.sqrt(d // cfg.heads)) + mask_add
        att = ad.softmax(scores, axis=-1)
        if keep_attention is not None:
            keep_attention.append(att.data)
        att = ad.dropout(att, cfg.dropout, rng, training)
        ctx = ad.reshape(ad.transpose(att @ v, (0, 2, 1, 3)), (n, lq, d))
        resid = x[:, :1, :] if query_cls_only else x
        h = resid + self.o(ctx)
        f = self.ff2(ad.relu(self.ff1(ad.layer_norm(h, self.ln2_g, self.ln2_b))))
        f = ad.dropout(f, cfg.dropout, rng, training)
        return h + f


class TransformerClassifier:
    """Two-class transformer over token batches from :func:`make_batch`."""

    def __init__(self, config: ModelConfig, vocab: ConceptVocabulary, rng: np.random.Generator):
        cfg = config
        dt = cfg.np_dtype
        d = cfg.d_model
        self.config = cfg
        self.vocab = vocab
        self.embedding = EmbeddingLayer.init(vocab, d, rng, dtype=dt)
        self.cls = ad.parameter(rng.normal(0.0, 1.0 / math.sqrt(d), size=(1, 1, d)), dtype=dt)
        self.encoder = [EncoderLayer(cfg, rng, f"enc{i}") for i in range(cfg.layers)]
        self.lnf_g = ad.parameter(np.ones(d), dtype=dt)
        self.lnf_b = ad.parameter(np.zeros(d), dtype=dt)
        if cfg.head_kind == "bayesian":
            kw = dict(radial_bias=cfg.radial_bias, init_std=cfg.radial_init_std,
                      prior_sigma=cfg.prior_sigma, dtype=dt)
            self.hidden = [RadialLinear.init(d, d, rng, name="radial1", **kw),
                           RadialLinear.init(d, d, rng, name="radial2", **kw)]
        else:
            self.hidden = [Linear.init(d, d, rng, dt, "hidden1", gain=math.sqrt(2.0)),
                           Linear.init(d, d, rng, dt, "hidden2", gain=math.sqrt(2.0))]
        self.out = Linear.init(d, 2, rng, dt, "out", gain=0.1)

    @property
    def is_bayesian(self) -> bool:
        return self.config.head_kind == "bayesian"

    # -------------------------------------------------------------- parameters

    def named_parameters(self) -> dict[str, ad.Tensor]:
        out = {"embedding": self.embedding.weight, "cls": self.cls,
               "lnf_g": self.lnf_g, "lnf_b": self.lnf_b}
        for i, layer in enumerate(self.encoder):
            out.update(layer.named_parameters(f"enc{i}"))
        names = ("radial1", "radial2") if self.is_bayesian else ("hidden1", "hidden2")
        for nm, layer in zip(names, self.hidden):
            out.update(layer.named_parameters(nm))
        out.update(self.out.named_parameters("out"))
        return out

    def parameters(self) -> list[ad.Tensor]:
        return list(self.named_parameters().values())

    def n_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_parameters().items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        if set(params) != set(state):
            raise ConfigError(f"state mismatch: {sorted(set(params) ^ set(state))}")
        for k, p in params.items():
            if p.shape != state[k].shape:
                raise ConfigError(f"{k}: shape {state[k].shape} != {p.shape}")
            p.data = np.array(state[k], dtype=p.dtype)

    # -------------------------------------------------------------- forward

    def features(self, batch: Batch, training: bool = False, rng: np.random.Generator | None = None,
                 attention: list | None = None) -> ad.Tensor:
        """Normalised classification-token representation, shape ``(n, D)``."""
        dt = self.config.np_dtype
        n, length = batch.concept_idx.shape
        d = self.config.d_model
        tok = self.embedding(batch.concept_idx, batch.values.astype(dt), batch.slots)
        t_emb = time_embedding(np.concatenate([np.zeros((n, 1)), batch.times], axis=1), d).astype(dt)
        cls = ad.add(self.cls, np.zeros((n, 1, d), dtype=dt))
        x = ad.concat([cls, tok], axis=1) + t_emb
        keep = np.concatenate([np.ones((n, 1), dtype=bool), batch.mask], axis=1)
        mask_add = np.where(keep, 0.0, MASK_VALUE).astype(dt)[:, None, None, :]
        for i, layer in enumerate(self.encoder):
            last = i == len(self.encoder) - 1
            x = layer(x, mask_add, query_cls_only=last, training=training, rng=rng,
                      keep_attention=attention)
        return ad.layer_norm(ad.reshape(x, (n, d)), self.lnf_g, self.lnf_b)

    def draw_head_noise(self, rng: np.random.Generator) -> tuple:
        if not self.is_bayesian:
            return (None, None)
        return tuple(layer.draw_noise(rng) for layer in self.hidden)

    def head(self, feats: ad.Tensor, noises: Sequence = (None, None)) -> ad.Tensor:
        h = feats
        for layer, noise in zip(self.hidden, noises):
            h = ad.relu(layer(h, noise) if self.is_bayesian else layer(h))
        return self.out(h)

    def forward(self, batch: Batch, training: bool = False, rng: np.random.Generator | None = None,
                noises: Sequence = (None, None)) -> ad.Tensor:
        return self.head(self.features(batch, training, rng), noises)

    def kl(self, inputs: KlTermInputs | None = None) -> ad.Tensor | None:
        if not self.is_bayesian:
            return None
        inputs = inputs or KlTermInputs(prior_sigma=self.config.prior_sigma)
        terms = [kl_term(layer, inputs) for layer in self.hidden]
        return terms[0] + terms[1]

    # -------------------------------------------------------------- inference

    def predict_logits(self, items: Sequence[EncodedEpisode], batch_size: int = 128) -> np.ndarray:
        """Logits with posterior means (no sampling), shape ``(n, 2)``."""
        out = []
        for i in range(0, len(items), batch_size):
            out.append(self.forward(make_batch(list(items[i:i + batch_size]))).data)
        return np.concatenate(out, axis=0) if out else np.zeros((0, 2))

    def predict_features(self, items: Sequence[EncodedEpisode], batch_size: int = 128) -> np.ndarray:
        out = []
        for i in range(0, len(items), batch_size):
            out.append(self.features(make_batch(list(items[i:i + batch_size]))).data)
        return np.concatenate(out, axis=0)

    # -------------------------------------------------------------- persistence

    def save(self, directory: Path, extra_meta: dict | None = None) -> Path:
        flags = {}
        if self.is_bayesian:
            for name in self.named_parameters():
                if name.startswith("radial"):
                    flags[name] = {"radial": True}
        meta = {"config": self.config.to_dict(), "vocab": self.vocab.to_dict()}
        meta.update(extra_meta or {})
        return save_checkpoint(directory, self.state_dict(), meta=meta, flags=flags)

    @classmethod
    def load(cls, directory: Path) -> tuple["TransformerClassifier", dict]:
        tensors, meta, _ = load_checkpoint(directory)
        cfg = ModelConfig(**meta["config"])
        vocab = ConceptVocabulary.from_dict(meta["vocab"])
        model = cls(cfg, vocab, np.random.default_rng(0))
        model.load_state_dict(tensors)
        return model, meta


# ------------------------------------------------------------------ training


@dataclass
class TrainSettings:
    lr: float = 1e-3
    batch_size: int = 32
    max_epochs: int = 100
    patience: int = 10
    c_kl: float | None = None  # None -> 1 / number of training episodes
    class_weighting: bool = False
    kl_moment_samples: int = 100_000

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainResult:
    best_epoch: int
    best_eval_auc: float | None
    log: list[dict] = field(default_factory=list)


def batch_loss(model: TransformerClassifier, batch: Batch, rng: np.random.Generator, c_kl: float,
               class_weights: np.ndarray | None = None, training: bool = True,
               kl_inputs: KlTermInputs | None = None):
    """Training objective on one batch; returns ``(loss, nll, kl)`` tensors."""
    noises = model.draw_head_noise(rng)
    logits = model.forward(batch, training=training, rng=rng, noises=noises)
    if class_weights is None:
        nll = ad.cross_entropy(logits, batch.labels)
    else:
        w = class_weights[batch.labels]
        logp = ad.log_softmax(logits)
        picked = logp[np.arange(len(batch)), batch.labels]
        nll = -ad.sum_(picked * (w / w.sum()).astype(logits.dtype))
    kl = model.kl(kl_inputs)
    loss = elbo_loss(nll, kl, c_kl) if kl is not None else nll
    return loss, nll, kl


def evaluate_auc(model: TransformerClassifier, items: Sequence[EncodedEpisode]) -> float | None:
    logits = model.predict_logits(items)
    labels = np.array([it.label for it in items])
    try:
        return auc_roc(logits[:, 1] - logits[:, 0], labels)
    except MetricError:
        return None


def train(model: TransformerClassifier, train_items: Sequence[EncodedEpisode],
          eval_items: Sequence[EncodedEpisode], settings: TrainSettings, rng: np.random.Generator,
          log_path: Path | None = None) -> TrainResult:
    """Adam on cross-entropy (plus scaled KL for radial heads) with early stopping.

    The parameters left in ``model`` are those of the epoch with the best
    evaluation AUC ROC.  Each log line holds epoch, losses and eval AUC.
    """
    if not train_items:
        raise ValueError("empty training set")
    n = len(train_items)
    c_kl = settings.c_kl if settings.c_kl is not None else 1.0 / n
    kl_inputs = KlTermInputs(prior_sigma=model.config.prior_sigma, mc_samples=settings.kl_moment_samples)
    class_weights = None
    if settings.class_weighting:
        labels = np.array([it.label for it in train_items])
        counts = np.bincount(labels, minlength=2).astype(float)
        class_weights = np.where(counts > 0, counts.sum() / (2.0 * np.maximum(counts, 1)), 0.0)
    opt = ad.Adam(model.parameters(), lr=settings.lr)
    best_state = model.state_dict()
    best_auc, best_epoch, stale = None, 0, 0
    log: list[dict] = []
    fh = open(log_path, "w") if log_path is not None else None
    try:
        for epoch in range(1, settings.max_epochs + 1):
            order = rng.permutation(n)
            tot_loss = tot_nll = tot_kl = 0.0
            steps = 0
            for start in range(0, n, settings.batch_size):
                batch = make_batch([train_items[i] for i in order[start:start + settings.batch_size]])
                try:
                    with ad.Tape() as tape:
                        loss, nll, kl = batch_loss(model, batch, rng, c_kl, class_weights,
                                                   kl_inputs=kl_inputs)
                        grads = tape.backward(loss)
                except ad.NonFiniteError as exc:
                    raise TrainingDivergence(
                        f"non-finite value at epoch {epoch}, step {steps}: {exc}") from exc
                opt.step(grads)
                tot_loss += float(loss.data)
                tot_nll += float(nll.data)
                tot_kl += float(kl.data) if kl is not None else 0.0
                steps += 1
            eval_auc = evaluate_auc(model, eval_items) if eval_items else None
            entry = {"epoch": epoch, "train_loss": tot_loss / steps, "train_nll": tot_nll / steps,
                     "kl": tot_kl / steps if model.is_bayesian else None, "eval_auc": eval_auc}
            log.append(entry)
            if fh:
                fh.write(json.dumps(entry) + "\n")
                fh.flush()
            score = eval_auc if eval_auc is not None else -entry["train_loss"]
            if best_auc is None or score > best_auc:
                best_auc, best_epoch, stale = score, epoch, 0
                best_state = model.state_dict()
            else:
                stale += 1
                if stale >= settings.patience:
                    break
    finally:
        if fh:
            fh.close()
    model.load_state_dict(best_state)
    return TrainResult(best_epoch, best_auc if eval_items else None, log)
