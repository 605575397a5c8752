"""Radial mean-field variational layers.

A radial layer draws its whole parameter vector (weights and bias jointly)
as ``mu + sigma * (eps / ||eps||) * r`` with ``eps ~ N(0, I)`` and a scalar
``r ~ N(0, 1)``.  The KL term against a Gaussian prior is evaluated with the
two directional moments ``E[(eps_i/||eps||) r]`` and ``E[((eps_i/||eps||) r)^2]``,
which are estimated once per layer size, so the loss graph does not grow with
the number of posterior samples.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import autodiff as ad
from .rng import counter_rng

DEFAULT_MOMENT_SAMPLES = 100_000


@dataclass
class KlTermInputs:
    prior_sigma: float = 1.0
    prior_mu: float = 0.0
    mc_samples: int = DEFAULT_MOMENT_SAMPLES

    def __post_init__(self):
        if not self.prior_sigma > 0:
            raise ValueError("prior_sigma must be positive")


def _inverse_softplus(y: float) -> float:
    return y + math.log(-math.expm1(-y))


class RadialLinear:
    """Affine layer ``x @ W + b`` with a radial variational posterior.

    ``sigma = softplus(rho)``.  With ``radial_bias=False`` the bias is an
    ordinary point-estimate parameter and only ``W`` is sampled.
    """

    def __init__(self, mu_w: ad.Tensor, rho_w: ad.Tensor, mu_b: ad.Tensor, rho_b: ad.Tensor | None,
                 prior_sigma: float = 1.0):
        self.mu_w, self.rho_w, self.mu_b, self.rho_b = mu_w, rho_w, mu_b, rho_b
        self.prior_sigma = prior_sigma

    @classmethod
    def init(cls, fan_in: int, fan_out: int, rng: np.random.Generator, *, radial_bias: bool = True,
             init_std: float = 0.05, prior_sigma: float = 1.0, dtype=np.float64,
             name: str = "radial") -> "RadialLinear":
        """``init_std`` is the initial marginal std of each sampled weight."""
        d = fan_in * fan_out + (fan_out if radial_bias else 0)
        rho0 = _inverse_softplus(init_std * math.sqrt(d))
        mu_w = rng.normal(0.0, math.sqrt(2.0 / fan_in), size=(fan_in, fan_out))
        p = lambda a, n: ad.parameter(a, dtype=dtype, name=f"{name}.{n}")
        return cls(p(mu_w, "mu_w"), p(np.full((fan_in, fan_out), rho0), "rho_w"),
                   p(np.zeros(fan_out), "mu_b"),
                   p(np.full(fan_out, rho0), "rho_b") if radial_bias else None,
                   prior_sigma=prior_sigma)

    @property
    def radial_bias(self) -> bool:
        return self.rho_b is not None

    @property
    def n_sampled(self) -> int:
        return self.mu_w.size + (self.mu_b.size if self.radial_bias else 0)

    def parameters(self) -> list[ad.Tensor]:
        ps = [self.mu_w, self.rho_w, self.mu_b]
        if self.rho_b is not None:
            ps.append(self.rho_b)
        return ps

    def named_parameters(self, prefix: str) -> dict[str, ad.Tensor]:
        out = {f"{prefix}.mu_w": self.mu_w, f"{prefix}.rho_w": self.rho_w, f"{prefix}.mu_b": self.mu_b}
        if self.rho_b is not None:
            out[f"{prefix}.rho_b"] = self.rho_b
        return out

    def draw_noise(self, rng: np.random.Generator) -> np.ndarray:
        """The flattened direction-times-radius vector ``(eps/||eps||) r``."""
        eps = rng.standard_normal(self.n_sampled)
        r = rng.standard_normal()
        return eps / np.linalg.norm(eps) * r

    def sample(self, noise: np.ndarray | None) -> tuple[ad.Tensor, ad.Tensor]:
        """Reparameterised ``(W, b)``; ``noise=None`` returns the means."""
        if noise is None:
            return self.mu_w, self.mu_b
        nw = self.mu_w.size
        dt = self.mu_w.dtype
        w = self.mu_w + ad.softplus(self.rho_w) * noise[:nw].reshape(self.mu_w.shape).astype(dt)
        b = self.mu_b
        if self.radial_bias:
            b = b + ad.softplus(self.rho_b) * noise[nw:].astype(dt)
        return w, b

    def __call__(self, x: ad.Tensor, noise: np.ndarray | None) -> ad.Tensor:
        w, b = self.sample(noise)
        return x @ w + b


def sample_weights(layer: RadialLinear, seed: int, index: int = 0) -> tuple[ad.Tensor, ad.Tensor]:
    """Posterior draw number ``index`` for ``seed``; differentiable in mu and rho."""
    return layer.sample(layer.draw_noise(counter_rng(seed, "sample", index)))


@lru_cache(maxsize=64)
def directional_moments(d: int, n_samples: int = DEFAULT_MOMENT_SAMPLES, seed: int = 0) -> tuple[float, float]:
    """Monte-Carlo ``(E[x_i], E[x_i^2])`` for ``x = (eps/||eps||) r`` in ``d`` dimensions.

    Draws come in antithetic pairs ``(eps, r)``, ``(eps, -r)``, so the first
    moment is exactly zero, matching the symmetry of ``r``.
    """
    if d < 1 or n_samples < 2:
        raise ValueError("need d >= 1 and at least two samples")
    rng = counter_rng(seed, "directional-moments", d)
    half = n_samples // 2
    total1 = 0.0
    total2 = 0.0
    chunk = max(1, min(half, 2_000_000 // d))
    done = 0
    while done < half:
        m = min(chunk, half - done)
        eps = rng.standard_normal((m, d))
        r = rng.standard_normal(m)
        x = eps / np.linalg.norm(eps, axis=1, keepdims=True) * r[:, None]
        total1 += x.sum() + (-x).sum()
        total2 += 2.0 * np.square(x).sum()
        done += m
    count = 2 * half * d
    return total1 / count, total2 / count


def kl_term(layer: RadialLinear, inputs: KlTermInputs | None = None) -> ad.Tensor:
    """KL(q || p) up to the additive constant of the radial entropy.

    ``-sum(log sigma) - sum(E_q[log p(w)])`` where the prior cross-entropy is
    expanded with the directional moments.
    """
    inputs = inputs or KlTermInputs(prior_sigma=layer.prior_sigma)
    m1, m2 = directional_moments(layer.n_sampled, inputs.mc_samples)
    sp2 = inputs.prior_sigma ** 2
    parts = [(layer.mu_w, layer.rho_w)]
    if layer.radial_bias:
        parts.append((layer.mu_b, layer.rho_b))
    total = None
    for mu, rho in parts:
        sigma = ad.softplus(rho)
        dmu = mu - inputs.prior_mu if inputs.prior_mu else mu
        quad = ad.square(dmu) + 2.0 * m1 * dmu * sigma + m2 * ad.square(sigma)
        log_prior = ad.sum_(quad) * (-0.5 / sp2) - 0.5 * math.log(2 * math.pi * sp2) * mu.size
        part = -ad.sum_(ad.log(sigma)) - log_prior
        total = part if total is None else total + part
    if not layer.radial_bias:
        # point-estimate bias: Gaussian prior penalty only
        total = total + ad.sum_(ad.square(layer.mu_b)) * (0.5 / sp2)
    return total


def elbo_loss(nll: ad.Tensor, kl: ad.Tensor, c_kl: float) -> ad.Tensor:
    if c_kl < 0:
        raise ValueError("c_kl must be non-negative")
    if c_kl == 0:
        return nll
    return nll + kl * c_kl


def predict_sampled(model, batch, n_samples: int, seed: int) -> np.ndarray:
    """Logit samples of shape ``(len(batch), n_samples, 2)``.

    The deterministic encoder runs once; each draw ``n`` uses the stream
    ``(seed, "sample", n)`` so draws can be evaluated in any order.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    feats = model.features(batch)
    out = []
    for n in range(n_samples):
        noises = model.draw_head_noise(counter_rng(seed, "sample", n))
        out.append(model.head(feats, noises).data)
    return np.stack(out, axis=1)
