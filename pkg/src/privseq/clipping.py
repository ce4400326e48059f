"""Per-sample gradient norms without per-sample gradients, and clipped-gradient assembly.

Linear layers use the Gram identity ``||a^T g||_F^2 = <a a^T, g g^T>``.
The token embedding, when it doubles as the output matrix, gets two
backprop branches (input lookup and output logits); its squared norm is

    <G_s, ge_s ge_s^T> + ||ge_c||^2 + 2 <ge_s, gather(ge_c, tokens)>

where ``G_s[i, j] = [token_i == token_j]`` comes straight from the token ids.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .numkit import Rng, check_finite
from .seqdata import SequenceBatch
from .transformer import (
    ForwardCache,
    GradTape,
    ModelConfig,
    ModelParams,
    ReattentionHook,
    backward,
    block_names,
    forward,
    init_params,
    loss_next_token,
)

NORMALIZE_GUARD = 1e-6
CLIP_MODES = ("clip", "normalize")


class FloatCounter:
    """Tracks live and peak float64-equivalent buffer sizes (``nbytes / 8``)."""

    def __init__(self):
        self.live = 0.0
        self.peak = 0.0
        self.log: list[tuple[str, float]] = []

    def alloc(self, name: str, arr: np.ndarray) -> np.ndarray:
        n = arr.nbytes / 8
        self.live += n
        self.peak = max(self.peak, self.live)
        self.log.append((name, n))
        return arr

    def free(self, arr: np.ndarray) -> None:
        self.live -= arr.nbytes / 8


def ghost_norm_linear(a: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Squared Frobenius norms of ``a_i^T g_i`` for a: B x T x d_in, g: B x T x d_out."""
    a = np.asarray(a, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    if a.ndim != 3 or g.ndim != 3 or a.shape[:2] != g.shape[:2]:
        raise ValueError(f"ghost norm shape mismatch: {a.shape} vs {g.shape}")
    aa = a @ a.transpose(0, 2, 1)
    gg = g @ g.transpose(0, 2, 1)
    return (aa * gg).sum(axis=(1, 2))


def phantom_norm_embedding(
    a_s: np.ndarray,
    grad_e_s: np.ndarray,
    grad_e_c: Optional[np.ndarray],
    vocab_size: Optional[int] = None,
    counter: Optional[FloatCounter] = None,
) -> np.ndarray:
    """Squared per-sample gradient norms of an embedding used for lookup and output.

    ``a_s`` holds 0-based row indices (B x L), -1 marks padding. ``grad_e_c``
    may be ``None`` when the embedding is not reused as the output matrix.
    """
    a_s = np.asarray(a_s)
    B, L = a_s.shape
    if grad_e_s.shape[:2] != (B, L):
        raise ValueError(f"grad_e_s shape {grad_e_s.shape} does not match indices {a_s.shape}")
    M = vocab_size if vocab_size is not None else (grad_e_c.shape[1] if grad_e_c is not None else None)
    if grad_e_c is not None and (grad_e_c.shape[0] != B or grad_e_c.shape[2] != grad_e_s.shape[2]):
        raise ValueError(f"grad_e_c shape {grad_e_c.shape} incompatible with {grad_e_s.shape}")
    if a_s.min(initial=0) < -1 or (M is not None and a_s.max(initial=-1) >= M):
        raise IndexError(f"embedding index out of range [0, {M})")
    if counter is not None:
        counter.alloc("grad_e_s", grad_e_s)
        if grad_e_c is not None:
            counter.alloc("grad_e_c", grad_e_c)

    valid = a_s >= 0
    same = (a_s[:, :, None] == a_s[:, None, :]) & valid[:, :, None] & valid[:, None, :]
    gram = grad_e_s @ grad_e_s.transpose(0, 2, 1)
    if counter is not None:
        counter.alloc("token_gram_mask", same)
        counter.alloc("grad_gram", gram)
    gram *= same
    out = gram.sum(axis=(1, 2))
    if counter is not None:
        counter.free(gram)
        counter.free(same)
    if grad_e_c is not None:
        out += np.einsum("bmd,bmd->b", grad_e_c, grad_e_c)
        for b in range(B):
            rows = grad_e_c[b, np.maximum(a_s[b], 0)]  # L x d gather, one sample at a time
            if counter is not None:
                counter.alloc("gather", rows)
            out[b] += 2.0 * np.einsum("ld,ld->", grad_e_s[b] * valid[b][:, None], rows)
            if counter is not None:
                counter.free(rows)
    return out


@dataclass
class PerSampleNorms:
    groups: list[str]
    squared: np.ndarray  # B x G
    total: np.ndarray = field(init=False)
    per_sample_grads: Optional[list[dict[str, np.ndarray]]] = None
    loss: Optional[float] = None
    factors: Optional[np.ndarray] = None
    cache: Optional[ForwardCache] = field(default=None, repr=False)

    def __post_init__(self):
        sq = np.maximum(self.squared, 0.0)
        self.squared = sq
        self.total = np.sqrt(sq.sum(axis=1))

    def group(self, name: str) -> np.ndarray:
        return np.sqrt(self.squared[:, self.groups.index(name)])


def norm_groups(config: ModelConfig) -> list[str]:
    names = ["E"] + ([] if config.sharing else ["E_out"]) + ["P"]
    for k in range(config.n_blocks):
        names += block_names(k)
    return names + ["ln_f.g", "ln_f.b"]


def fast_per_sample_norms(tape: GradTape, vocab_size: Optional[int] = None, counter: Optional[FloatCounter] = None) -> PerSampleNorms:
    """Combine embedding, linear-layer and small-vector norms via the Pythagorean split."""
    if tape is None:
        raise ValueError("missing tape")
    groups = ["E"]
    cols = [phantom_norm_embedding(tape.emb_index, tape.grad_e_s, tape.grad_e_c, vocab_size, counter)]
    for name, (a, g) in tape.linear.items():
        groups.append(name)
        cols.append(ghost_norm_linear(a, g))
    for name, v in tape.direct.items():
        groups.append(name)
        cols.append((v.reshape(v.shape[0], -1) ** 2).sum(1))
    if not tape.sharing and "E_out" not in tape.linear:
        raise ValueError("tape lacks the output-matrix entry")
    n_blocks = 1 + max((int(g.split(".")[1]) for g in groups if g.startswith("blocks.")), default=-1)
    canon = ["E", "E_out", "P"] + [n for k in range(n_blocks) for n in block_names(k)] + ["ln_f.g", "ln_f.b"]
    order = sorted(range(len(groups)), key=lambda j: canon.index(groups[j]))
    return PerSampleNorms([groups[j] for j in order], np.stack([cols[j] for j in order], axis=1))


def clip_factors(norms, C: float, mode: str = "clip") -> np.ndarray:
    norms = np.asarray(norms, dtype=np.float64)
    if not C > 0:
        raise ValueError(f"clipping norm must be positive, got {C}")
    if np.any(norms < 0):
        raise ValueError("norms must be non-negative")
    if mode not in CLIP_MODES:
        raise ValueError(f"unknown clip mode {mode!r}")
    if math.isinf(C):
        # an infinite bound disables clipping in either mode
        return np.ones_like(norms)
    if mode == "clip":
        with np.errstate(divide="ignore"):
            return np.minimum(np.where(norms > 0, C / np.where(norms > 0, norms, 1.0), 1.0), 1.0)
    if mode == "normalize":
        return C / (norms + NORMALIZE_GUARD)
    raise ValueError(f"unknown clip mode {mode!r}")


def _flatten(grads: dict[str, np.ndarray]) -> np.ndarray:
    return np.concatenate([g.ravel() for g in grads.values()])


def naive_per_sample_norms(
    params: ModelParams,
    batch: SequenceBatch,
    mode: str = "eval",
    cache: Optional[ForwardCache] = None,
    hook: Optional[ReattentionHook] = None,
) -> PerSampleNorms:
    """Oracle: B separate batch-size-1 backward passes with every gradient instantiated.

    When ``cache`` comes from a train-mode batch forward, each sample replays
    its own dropout masks so the oracle differentiates the same function.
    """
    c = params.config
    groups = norm_groups(c)
    sq = np.zeros((batch.sample_count, len(groups)))
    per = []
    for b in range(batch.sample_count):
        masks = cache.sample_masks(b) if cache is not None else None
        h = hook.select([b]) if hook is not None else None
        logits, cb = forward(params, batch.token_ids[b : b + 1], mode, h, masks=masks)
        if batch.targets[b].any():
            _, _, dl = loss_next_token(logits, batch.targets[b : b + 1])
        else:
            dl = np.zeros_like(logits)
        g, _ = backward(params, cb, dl, build_tape=False)
        per.append(g)
        for j, name in enumerate(groups):
            sq[b, j] = float(np.vdot(g[name], g[name]))
    return PerSampleNorms(groups, sq, per_sample_grads=per)


def clipped_batch_gradient(
    params: ModelParams,
    batch: SequenceBatch,
    C: float,
    mode: str,
    rng: Optional[Rng],
    hook: Optional[ReattentionHook] = None,
    train: bool = True,
):
    """Two backward passes: norms from the tape, then a loss-reweighted backward.

    Returns ``(sum_i factor_i * g_i, norms)``; ``norms.loss`` is the batch mean
    loss. Both passes share one forward cache, so dropout masks match.
    """
    fmode = "train" if train else "eval"
    logits, cache = forward(params, batch.token_ids, fmode, hook, rng)
    loss, _, dl = loss_next_token(logits, batch.targets)
    _, tape = backward(params, cache, dl)
    norms = fast_per_sample_norms(tape, params.config.vocab_size)
    norms.loss = loss
    factors = clip_factors(norms.total, C, mode)
    grads, _ = backward(params, cache, dl, weights=factors, build_tape=False)
    for name, g in grads.items():
        check_finite(g, f"clipped gradient {name}")
    norms.factors = factors
    norms.cache = cache
    return grads, norms


# --------------------------------------------------------------------------
# memory accounting


@dataclass
class MemoryReport:
    method: str
    B: int
    L: int
    M: int
    d: int
    items: dict[str, int]

    @property
    def auxiliary_float_count(self) -> int:
        return int(sum(self.items.values()))

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "B": self.B,
            "L": self.L,
            "M": self.M,
            "d": self.d,
            "items": dict(self.items),
            "auxiliary_float_count": self.auxiliary_float_count,
        }


def aux_memory_report(B: int, L: int, M: int, d: int, method: str) -> MemoryReport:
    """Analytic extra-float counts for the token-embedding norm, itemised by buffer."""
    if min(B, L, M, d) < 1:
        raise ValueError("dimensions must be positive")
    if method == "phantom":
        items = {"token_gram B*L^2": B * L * L, "grad_e_s B*L*d": B * L * d, "grad_e_c B*M*d": B * M * d}
    elif method == "ghost":
        items = {
            "input_gram_a B*L^2": B * L * L,
            "input_gram_g B*L^2": B * L * L,
            "candidate_gram_a B*M^2": B * M * M,
            "candidate_gram_g B*M^2": B * M * M,
            "grad_e_s B*L*d": B * L * d,
            "grad_e_c B*M*d": B * M * d,
        }
    elif method == "naive":
        items = {"per_sample_grad_E B*M*d": B * M * d, "grad_e_s B*L*d": B * L * d, "grad_e_c B*M*d": B * M * d}
    else:
        raise ValueError(f"unknown method {method!r}")
    return MemoryReport(method, B, L, M, d, items)


def ghost_embedding_norms(a_s: np.ndarray, grad_e_s: np.ndarray, grad_e_c: np.ndarray) -> np.ndarray:
    """Ghost-style norms of two *separate* embedding layers, output one fed the identity one-hots.

    Forms the M x M candidate Grams explicitly, one sample at a time; this is
    the cost profile that sharing-unaware clipping pays on the output layer.
    """
    B, L = a_s.shape
    M = grad_e_c.shape[1]
    valid = a_s >= 0
    same = (a_s[:, :, None] == a_s[:, None, :]) & valid[:, :, None] & valid[:, None, :]
    out = np.einsum("bij,bij->b", same * 1.0, np.einsum("bid,bjd->bij", grad_e_s, grad_e_s))
    eye = np.eye(M)
    for b in range(B):
        out[b] += np.einsum("ij,ij->", eye, grad_e_c[b] @ grad_e_c[b].T)
    return out


def bench_clip(B: int, L: int, M: int, d: int, method: str, repeats: int = 3, seed: int = 0) -> dict:
    """Time per-sample norm computation on a random one-block model."""
    cfg = ModelConfig(vocab_size=M, max_len=L, d=d, n_blocks=1, dropout=0.0, sharing=True)
    params = init_params(cfg, Rng(seed, "init"))
    rng = Rng(seed, "data")
    tok = rng.integers(1, M + 1, size=(B, L))
    tgt = rng.integers(1, M + 1, size=(B, L))
    batch = SequenceBatch(tok, tgt, np.arange(B))
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        if method == "naive":
            naive_per_sample_norms(params, batch)
        else:
            logits, cache = forward(params, tok, "eval")
            _, _, dl = loss_next_token(logits, tgt)
            _, tape = backward(params, cache, dl)
            if method == "phantom":
                fast_per_sample_norms(tape, M)
            elif method == "ghost":
                ghost_embedding_norms(tape.emb_index, tape.grad_e_s, tape.grad_e_c)
            else:
                raise ValueError(f"unknown method {method!r}")
        times.append(time.perf_counter() - t0)
    rep = aux_memory_report(B, L, M, d, method).to_dict()
    rep.update(repeats=repeats, seconds_per_step=float(np.median(times)), seconds_all=[float(t) for t in times])
    return rep
