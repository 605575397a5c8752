"""Token encoding and embedding.

A token is encoded as the concatenation of a one-hot concept vector of
length ``B + V`` and a value vector of length ``V`` that is zero except at
the slot of a value concept.  A linear map ``R^(B+2V) -> R^D`` embeds it and a
sinusoidal encoding of the timestamp is added.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .data import ConceptVocabulary, Episode, MedicalToken

TIME_BASE = 10000.0


@dataclass
class EncodedToken:
    c: np.ndarray
    v: np.ndarray
    t: float

    @property
    def input_vector(self) -> np.ndarray:
        return np.concatenate([self.c, self.v])


def encode_concept(token: MedicalToken, vocab: ConceptVocabulary, normalize: bool = False) -> EncodedToken:
    """One-hot concept part plus value part for a single token.

    Value concepts carry their value (z-scored when ``normalize``) in their
    slot; a value of exactly zero still leaves the concept bit set.
    """
    idx = vocab.index(token.concept)
    c = np.zeros(vocab.n_concepts)
    c[idx] = 1.0
    v = np.zeros(vocab.n_value)
    slot = vocab.value_slot(token.concept)
    if slot is not None:
        if token.v is None:
            raise ValueError(f"value concept {token.concept!r} without a value")
        v[slot] = vocab.normalize(token.concept, token.v) if normalize else token.v
    elif token.v is not None:
        raise ValueError(f"boolean concept {token.concept!r} carries a value")
    return EncodedToken(c, v, token.t)


def time_embedding(t, d_model: int) -> np.ndarray:
    """Sinusoidal timestamp encoding; component ``j`` uses ``t / 10000**(2j/D)``.

    Even components are sines, odd ones cosines.  ``t`` may be an array; the
    result then has a trailing axis of size ``d_model``.
    """
    if d_model % 2:
        raise ValueError("embedding size must be even")
    t = np.asarray(t, dtype=np.float64)
    j = np.arange(d_model)
    angle = t[..., None] / TIME_BASE ** (2.0 * j / d_model)
    return np.where(j % 2 == 0, np.sin(angle), np.cos(angle))


class EmbeddingLayer:
    """The linear map EL with weight of shape ``(B + 2V, D)``."""

    def __init__(self, weight: ad.Tensor, vocab: ConceptVocabulary):
        if weight.shape[0] != vocab.input_width:
            raise ValueError(f"embedding weight has {weight.shape[0]} rows, "
                             f"vocabulary needs {vocab.input_width}")
        self.weight = weight
        self.vocab = vocab

    @property
    def d_model(self) -> int:
        return self.weight.shape[1]

    @classmethod
    def init(cls, vocab: ConceptVocabulary, d_model: int, rng: np.random.Generator,
             dtype=np.float64) -> "EmbeddingLayer":
        w = rng.normal(0.0, 1.0, size=(vocab.input_width, d_model))
        return cls(ad.parameter(w, dtype=dtype, name="embedding"), vocab)

    def __call__(self, concept_idx: np.ndarray, values: np.ndarray, slots: np.ndarray) -> ad.Tensor:
        """Batched ``EL(c || v)`` from integer concept indices and value slots.

        ``values`` is zero for boolean tokens, so the slot row picked for them
        contributes nothing.
        """
        out = ad.take_rows(self.weight, concept_idx)
        if self.vocab.n_value:
            rows = ad.take_rows(self.weight, self.vocab.n_concepts + slots)
            out = out + rows * values[..., None].astype(self.weight.dtype)
        return out


def embed(token: MedicalToken, layer: EmbeddingLayer, vocab: ConceptVocabulary,
          normalize: bool = False) -> np.ndarray:
    enc = encode_concept(token, vocab, normalize=normalize)
    return enc.input_vector @ layer.weight.data + time_embedding(token.t, layer.d_model)


# ------------------------------------------------------------------ sequences


@dataclass
class EncodedEpisode:
    """Index form of one episode, without the classification token."""

    concept_idx: np.ndarray
    values: np.ndarray
    slots: np.ndarray
    times: np.ndarray
    label: int
    patient_id: str


def select_tokens(values: np.ndarray, limit: int) -> np.ndarray:
    """Indices (sorted) of at most ``limit`` tokens.

    Boolean tokens (NaN value) are all kept; value tokens are thinned at
    evenly spaced positions.  If booleans alone exceed the limit they are
    thinned the same way.
    """
    n = len(values)
    if n <= limit:
        return np.arange(n)
    is_val = ~np.isnan(values)
    boolean = np.flatnonzero(~is_val)
    value = np.flatnonzero(is_val)
    if len(boolean) >= limit:
        keep = boolean[np.linspace(0, len(boolean) - 1, limit).round().astype(int)]
        return np.sort(keep)
    k = limit - len(boolean)
    picked = value[np.linspace(0, len(value) - 1, k).round().astype(int)]
    return np.sort(np.concatenate([boolean, picked]))


def encode_episode(ep: Episode, vocab: ConceptVocabulary, max_len: int = 512) -> EncodedEpisode:
    """Vectorise an episode for batching; keeps ``max_len - 1`` tokens at most."""
    keep = select_tokens(ep.values, max_len - 1)
    concepts = ep.concepts[keep]
    values = ep.values[keep]
    idx = np.empty(len(keep), dtype=np.intp)
    slots = np.zeros(len(keep), dtype=np.intp)
    vals = np.zeros(len(keep))
    index, slot_of = vocab._index, vocab._value_slot
    for i, (c, v) in enumerate(zip(concepts, values)):
        try:
            idx[i] = index[c]
        except KeyError:
            raise KeyError(f"unknown concept {c!r} in episode {ep.patient_id}") from None
        s = slot_of.get(c)
        if s is not None:
            slots[i] = s
            vals[i] = vocab.normalize(c, v)
    return EncodedEpisode(idx, vals, slots, ep.times[keep].copy(), ep.label, ep.patient_id)


@dataclass
class Batch:
    concept_idx: np.ndarray   # (n, L)
    values: np.ndarray        # (n, L)
    slots: np.ndarray         # (n, L)
    times: np.ndarray         # (n, L)
    mask: np.ndarray          # (n, L) True for real tokens
    labels: np.ndarray        # (n,)

    def __len__(self) -> int:
        return len(self.labels)


def make_batch(items: list[EncodedEpisode]) -> Batch:
    n = len(items)
    length = max(len(it.concept_idx) for it in items)
    ci = np.zeros((n, length), dtype=np.intp)
    vals = np.zeros((n, length))
    slots = np.zeros((n, length), dtype=np.intp)
    times = np.zeros((n, length))
    mask = np.zeros((n, length), dtype=bool)
    for i, it in enumerate(items):
        k = len(it.concept_idx)
        ci[i, :k] = it.concept_idx
        vals[i, :k] = it.values
        slots[i, :k] = it.slots
        times[i, :k] = it.times
        mask[i, :k] = True
    labels = np.array([it.label for it in items], dtype=np.intp)
    return Batch(ci, vals, slots, times, mask, labels)
