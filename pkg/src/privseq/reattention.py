"""Attention debiasing under DP noise.

DP noise on the parameters makes attention keys random. For a fixed query
``q`` and a key ``K ~ N(k, s^2 I)`` the score ``<q, K>`` has variance
``<q, q> s^2``, so ``E[exp<q, K>] = exp<q, k> * exp(<q, q> s^2 / 2)``: noisy
keys soak up attention. This module estimates ``s^2`` per key position by
pushing per-parameter noise levels (effective errors) through the encoder
with closed-form Gaussian moment rules, and divides each attention
probability by its inflation factor.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Union

import numpy as np
from scipy.special import ndtr

from .numkit import Rng, stable_softmax
from .transformer import (
    ModelParams,
    ReattentionHook,
    _heads,
    _merge,
    attention_mask,
    layernorm,
    masked_softmax,
)

MAX_EXPONENT = 30.0
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


class ReattentionClampWarning(RuntimeWarning):
    pass


@dataclass
class EffectiveError:
    token: np.ndarray  # per-token std, length M (index t-1 for token t)
    weight: float  # std for every non-embedding parameter


@dataclass
class GaussianMoments:
    """Elementwise mean with an isotropic variance.

    ``var`` is a scalar, or an array matching ``mean.shape[:-1]`` for one
    variance per row (e.g. per sequence position).
    """

    mean: np.ndarray
    var: Union[float, np.ndarray]

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.var = np.asarray(self.var, dtype=np.float64)
        if np.any(self.var < 0):
            raise ValueError("variance must be non-negative")

    @property
    def row_var(self) -> np.ndarray:
        """Variance broadcastable against ``mean``."""
        if self.var.ndim == 0 or self.mean.ndim == 0:
            return self.var
        return self.var[..., None]


def effective_errors(sigma_dp: float, B: float, frequencies) -> EffectiveError:
    """Noise std per token embedding row (``sigma / (B p_i)``) and per weight (``sigma / B``)."""
    p = np.asarray(frequencies, dtype=np.float64)
    if B < 1:
        raise ValueError("batch size must be >= 1")
    if np.any(p <= 0) or np.any(p > 1):
        raise ValueError("token frequencies must lie in (0, 1]; filter unseen tokens first")
    return EffectiveError(token=sigma_dp / (B * p), weight=sigma_dp / B)


def _product_var(vx, mx, vw, mw):
    return vx * vw + mx * mx * vw + mw * mw * vx


def propagate_linear(x: GaussianMoments, W: GaussianMoments) -> GaussianMoments:
    """Moments of ``X W`` with independent ``X`` and ``W``.

    Scalars (or same-shaped arrays) multiply elementwise:
    ``Var = Vx Vw + E[x]^2 Vw + E[w]^2 Vx``. For a matrix product the per-term
    variances add over the contracted axis and are averaged over output
    coordinates, giving one variance per input row.
    """
    if x.mean.ndim == 0 or W.mean.ndim == 0 or x.mean.shape == W.mean.shape:
        var = _product_var(x.row_var, x.mean, W.var, W.mean)
        mean = x.mean * W.mean
        if mean.ndim:
            var = np.broadcast_to(var, mean.shape).mean(-1)
        return GaussianMoments(mean, var)
    if x.mean.shape[-1] != W.mean.shape[0] or W.mean.ndim != 2:
        raise ValueError(f"cannot compose {x.mean.shape} with {W.mean.shape}")
    if W.var.ndim:
        raise ValueError("weight variance must be a scalar")
    d_in, d_out = W.mean.shape
    vw = float(W.var)
    ms_x = (x.mean * x.mean).sum(-1)
    ms_w = float((W.mean * W.mean).sum()) / d_out
    var = d_in * x.var * vw + ms_x * vw + ms_w * x.var
    return GaussianMoments(x.mean @ W.mean, var)


def _relu_moments(mu, var):
    s = np.sqrt(var)
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(s > 0, mu / np.where(s > 0, s, 1.0), 0.0)
    cdf = ndtr(z)
    pdf = _INV_SQRT2PI * np.exp(-0.5 * z * z)
    m1 = mu * cdf + s * pdf
    m2 = (mu * mu + var) * cdf + mu * s * pdf
    v = np.maximum(m2 - m1 * m1, 0.0)
    det = s == 0
    m1 = np.where(det, np.maximum(mu, 0.0), m1)
    v = np.where(det, 0.0, v)
    return m1, v


def propagate_relu(x: GaussianMoments) -> GaussianMoments:
    """Moments of ``max(X, 0)`` for Gaussian ``X`` (max of ``X`` and the constant 0).

    ``E[Z] = mu Phi(mu/s) + s phi(mu/s)``, ``E[Z^2] = (mu^2 + s^2) Phi(mu/s) + mu s phi(mu/s)``.
    """
    var = np.broadcast_to(x.row_var, x.mean.shape) if x.mean.ndim else x.var
    m1, v = _relu_moments(x.mean, var)
    if x.mean.ndim and x.var.ndim < x.mean.ndim:
        return GaussianMoments(m1, v.mean(-1) if x.var.ndim else float(v.mean()))
    return GaussianMoments(m1, v)


# GELU shares the ReLU rule: both are forward-similar and only the variance matters here.
propagate_gelu = propagate_relu


def propagate_residual(a: GaussianMoments, b: GaussianMoments) -> GaussianMoments:
    """Sum of independent branches: means add, variances add."""
    if a.mean.shape != b.mean.shape:
        raise ValueError(f"residual shapes differ: {a.mean.shape} vs {b.mean.shape}")
    return GaussianMoments(a.mean + b.mean, a.var + b.var)


def propagate_layernorm(x: GaussianMoments, xhat: np.ndarray, rstd: np.ndarray, gain: np.ndarray, vw: float) -> GaussianMoments:
    """First-order layernorm: scale the variance by ``1/std^2`` of the mean path, then the gain/bias product."""
    v_hat = x.var * rstd[..., 0] ** 2
    var = (_product_var(v_hat[..., None], xhat, vw, gain)).mean(-1) + vw
    return GaussianMoments(xhat * gain, var)


def key_variances(params: ModelParams, errors: EffectiveError, token_ids: np.ndarray, renormalize: bool = True) -> np.ndarray:
    """Per-block, per-position key variance (``n_blocks x B x L``).

    Runs the eval-mode mean path alongside the variance. Blocks after the
    first see attention rows already corrected with the earlier blocks'
    variances, matching what the corrected forward computes.
    """
    c = params.config
    a = params.arrays
    tok = np.asarray(token_ids, dtype=np.int64)
    B, L = tok.shape
    H = c.n_heads
    valid = tok > 0
    idx = np.maximum(tok - 1, 0)
    vw = errors.weight**2
    x = (np.where(valid[..., None], a["E"][idx], 0.0) + a["P"][None]) * valid[..., None]
    v0 = np.where(valid, errors.token[idx] ** 2 + vw, 0.0)
    state = GaussianMoments(x, v0)
    amask = attention_mask(tok)[:, None]
    out = np.zeros((c.n_blocks, B, L))
    scale = 1.0 / math.sqrt(c.d_head)

    def W(name):
        return GaussianMoments(a[name], vw)

    for k in range(c.n_blocks):
        p = f"blocks.{k}."
        h_mean, (xhat, rstd) = layernorm(state.mean, a[p + "ln1.g"], a[p + "ln1.b"])
        h = propagate_layernorm(state, xhat, rstd, a[p + "ln1.g"], vw)
        kk = propagate_linear(h, W(p + "W_K"))
        vv = propagate_linear(h, W(p + "W_V"))
        out[k] = np.where(valid, kk.var, 0.0)
        q = _heads(h.mean @ a[p + "W_Q"], H) * scale
        S = q @ _heads(kk.mean, H).transpose(0, 1, 3, 2)
        hook = ReattentionHook(out, renormalize)
        corr = hook.log_factor(k, q)
        A = masked_softmax(S + corr, amask) if renormalize else masked_softmax(S, amask) * np.exp(corr)
        O_mean = _merge(A @ _heads(vv.mean, H))
        O_var = np.einsum("bhij,bj->bi", A * A, vv.var) / H
        o = propagate_linear(GaussianMoments(O_mean, O_var), W(p + "W_O"))
        state = propagate_residual(state, o)
        _, (xhat2, rstd2) = layernorm(state.mean, a[p + "ln2.g"], a[p + "ln2.b"])
        h2 = propagate_layernorm(state, xhat2, rstd2, a[p + "ln2.g"], vw)
        u = propagate_linear(h2, W(p + "W_1"))
        u = GaussianMoments(u.mean + a[p + "b_1"], u.var + vw)
        act = propagate_relu(u)
        f = propagate_linear(act, W(p + "W_2"))
        f = GaussianMoments(f.mean + a[p + "b_2"], f.var + vw)
        state = propagate_residual(state, f)
    return out


def make_hook(params: ModelParams, errors: EffectiveError, token_ids: np.ndarray, renormalize: bool = True) -> ReattentionHook:
    return ReattentionHook(key_variances(params, errors, token_ids, renormalize), renormalize, MAX_EXPONENT)


def reattend(scores, q, sigma_sq, mask=None, renormalize: bool = True) -> np.ndarray:
    """Divide each attention probability by ``exp(<q, q> sigma_i^2 / 2)``, then renormalise.

    ``scores`` is a probability row (or a stack of rows sharing ``q``) over
    ``L`` keys; masked keys stay at zero. Exponents above 30 are clamped with
    a :class:`ReattentionClampWarning`.
    """
    S = np.asarray(scores, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    sig = np.asarray(sigma_sq, dtype=np.float64)
    if np.any(sig < 0):
        raise ValueError("key variances must be non-negative")
    expo = 0.5 * float(q @ q) * sig
    if np.any(expo > MAX_EXPONENT):
        warnings.warn(f"attention correction exponent clamped at {MAX_EXPONENT}", ReattentionClampWarning, stacklevel=2)
        expo = np.minimum(expo, MAX_EXPONENT)
    out = S * np.exp(-expo)
    if mask is not None:
        out = np.where(mask, out, 0.0)
    if renormalize:
        out = out / out.sum(-1, keepdims=True)
    return out


def distraction_monte_carlo(q, key_means, key_variances, n_samples: int, rng: Rng, chunk: int = 100_000):
    """Average softmax row over keys ``K_i ~ N(k_i, s_i^2 I)`` with ``q`` fixed.

    Returns ``(mean_scores, standard_errors)``. Scores are raw inner products
    (no 1/sqrt(d) factor), so the inflation of key ``i`` is
    ``exp(<q, q> s_i^2 / 2)``.
    """
    if n_samples < 10_000:
        raise ValueError("use at least 10^4 samples")
    q = np.asarray(q, dtype=np.float64)
    km = np.asarray(key_means, dtype=np.float64)
    sd = np.sqrt(np.asarray(key_variances, dtype=np.float64))
    L, d = km.shape
    base = km @ q
    # <q, K_i> = <q, k_i> + s_i <q, z_i>, and <q, z_i> ~ N(0, <q, q>)
    qn = math.sqrt(float(q @ q))
    total = np.zeros(L)
    total_sq = np.zeros(L)
    done = 0
    while done < n_samples:
        n = min(chunk, n_samples - done)
        z = rng.normal((n, L))
        s = base[None, :] + (sd * qn)[None, :] * z
        p = stable_softmax(s, axis=-1)
        total += p.sum(0)
        total_sq += (p * p).sum(0)
        done += n
    mean = total / n_samples
    var = np.maximum(total_sq / n_samples - mean**2, 0.0)
    return mean, np.sqrt(var / n_samples)


def distraction_setup(d: int = 8, tail_variance: float = 0.5, seed: int = 0, L: int = 4):
    """One query and ``L`` keys: the first and last are weak and noisy, the rest relevant and precise.

    Returns ``(q, key_means, key_variances)`` with ``<q, q> = 2``.
    """
    if L < 3:
        raise ValueError("need at least 3 keys")
    rng = Rng(seed, "distraction")
    q = rng.normal(d)
    q *= math.sqrt(2.0) / np.linalg.norm(q)
    u = q / np.linalg.norm(q)
    ortho = rng.normal((L, d))
    ortho -= np.outer(ortho @ u, u)
    ortho *= 0.3 / np.linalg.norm(ortho, axis=1, keepdims=True)
    target_scores = np.concatenate([[-2.0], np.linspace(2.0, 1.6, L - 2), [-2.4]])  # <q, k_i>
    keys = ortho + np.outer(target_scores / math.sqrt(2.0), u)
    var = np.zeros(L)
    var[[0, -1]] = tail_variance
    return q, keys, var


def distraction_table(
    d: int = 8, sigma_grid=(0.0, 0.1, 0.2, 0.3, 0.4, 0.5), n_samples: int = 200_000, seed: int = 0, L: int = 4
) -> list[dict]:
    """Noiseless vs. Monte-Carlo (noisy keys) vs. corrected scores for each tail variance."""
    rows = []
    for s2 in sigma_grid:
        q, keys, var = distraction_setup(d, s2, seed, L)
        clean = stable_softmax(keys @ q)
        noisy, se = distraction_monte_carlo(q, keys, var, n_samples, Rng(seed, f"mc/{s2}"))
        fixed = reattend(noisy, q, var)
        rows.append(
            {
                "tail_variance": s2,
                "noiseless": clean.tolist(),
                "distracted": noisy.tolist(),
                "distracted_se": se.tolist(),
                "reattended": fixed.tolist(),
                "predicted_inflation": math.exp(float(q @ q) * s2 / 2),
            }
        )
    return rows
