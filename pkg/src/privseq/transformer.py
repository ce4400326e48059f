"""Pre-LN causal Transformer encoder for next-token prediction, numpy only.

``forward`` returns logits and a :class:`ForwardCache`; ``backward`` returns
the (optionally per-sample weighted) summed gradient plus a :class:`GradTape`
holding, per layer, what norm-only clipping needs: layer inputs and output
gradients for every matrix, the two embedding branches for the token
embedding, and directly instantiated per-sample gradients for the small
vectors (gains, biases, positional table).

Parameter names::

    E                     token embedding, M x d (row t-1 is token t)
    E_out                 output matrix, M x d (only when sharing is off)
    P                     learned positions, L x d
    blocks.{k}.ln1.g/.b   pre-attention layernorm
    blocks.{k}.W_Q/W_K/W_V/W_O
    blocks.{k}.ln2.g/.b   pre-FFN layernorm
    blocks.{k}.W_1, b_1, W_2, b_2
    ln_f.g, ln_f.b        final layernorm
"""

from __future__ import annotations

import io
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
from scipy.special import erf

from .numkit import Rng, check_finite

LN_EPS = 1e-5
CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    vocab_size: int
    max_len: int = 50
    d: int = 64
    n_blocks: int = 2
    n_heads: int = 1
    d_ff: Optional[int] = None
    dropout: float = 0.2
    sharing: bool = True
    activation: str = "relu"

    def __post_init__(self):
        if self.d_ff is None:
            self.d_ff = self.d
        if self.vocab_size < 1 or self.max_len < 1 or self.d < 1 or self.n_blocks < 1:
            raise ValueError(f"invalid model dimensions: {self}")
        if self.n_heads < 1 or self.d % self.n_heads:
            raise ValueError(f"n_heads={self.n_heads} must divide d={self.d}")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must be in [0, 1)")
        if self.activation not in ("relu", "gelu"):
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def d_head(self) -> int:
        return self.d // self.n_heads


@dataclass
class ModelParams:
    config: ModelConfig
    arrays: dict[str, np.ndarray]

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[name]

    def names(self) -> list[str]:
        return list(self.arrays)

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: v.copy() for k, v in self.arrays.items()})

    def n_params(self) -> int:
        return sum(v.size for v in self.arrays.values())


def block_names(k: int) -> list[str]:
    p = f"blocks.{k}."
    return [p + n for n in ("ln1.g", "ln1.b", "W_Q", "W_K", "W_V", "W_O", "ln2.g", "ln2.b", "W_1", "b_1", "W_2", "b_2")]


def init_params(config: ModelConfig, rng: Rng) -> ModelParams:
    """Uniform(-1/sqrt(d), 1/sqrt(d)) weights; layernorm gains 1, biases 0; FFN biases 0."""
    c = config
    s = 1.0 / math.sqrt(c.d)

    def u(*shape):
        return rng.uniform(-s, s, shape)

    a: dict[str, np.ndarray] = {"E": u(c.vocab_size, c.d), "P": u(c.max_len, c.d)}
    if not c.sharing:
        a["E_out"] = u(c.vocab_size, c.d)
    for k in range(c.n_blocks):
        p = f"blocks.{k}."
        a[p + "ln1.g"] = np.ones(c.d)
        a[p + "ln1.b"] = np.zeros(c.d)
        for w in ("W_Q", "W_K", "W_V", "W_O"):
            a[p + w] = u(c.d, c.d)
        a[p + "ln2.g"] = np.ones(c.d)
        a[p + "ln2.b"] = np.zeros(c.d)
        a[p + "W_1"] = u(c.d, c.d_ff)
        a[p + "b_1"] = np.zeros(c.d_ff)
        a[p + "W_2"] = rng.uniform(-1 / math.sqrt(c.d_ff), 1 / math.sqrt(c.d_ff), (c.d_ff, c.d))
        a[p + "b_2"] = np.zeros(c.d)
    a["ln_f.g"] = np.ones(c.d)
    a["ln_f.b"] = np.zeros(c.d)
    return ModelParams(config, a)


# --------------------------------------------------------------------------
# pieces


def layernorm(x, g, b):
    mu = x.mean(-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * rstd
    return xhat * g + b, (xhat, rstd)


def layernorm_backward(dy, g, cache):
    xhat, rstd = cache
    dxhat = dy * g
    dx = rstd * (dxhat - dxhat.mean(-1, keepdims=True) - xhat * (dxhat * xhat).mean(-1, keepdims=True))
    # per-sample gain/bias grads: sum over positions, keep batch axis
    dg = (dy * xhat).sum(axis=1)
    db = dy.sum(axis=1)
    return dx, dg, db


_SQRT2 = math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def activation(u, kind):
    if kind == "relu":
        return np.maximum(u, 0.0)
    return 0.5 * u * (1.0 + erf(u / _SQRT2))


def activation_grad(u, kind):
    if kind == "relu":
        return (u > 0).astype(u.dtype)
    return 0.5 * (1.0 + erf(u / _SQRT2)) + u * _INV_SQRT2PI * np.exp(-0.5 * u * u)


def attention_mask(token_ids: np.ndarray) -> np.ndarray:
    """B x L x L boolean: query i may attend key j iff j <= i and key j is a real token."""
    L = token_ids.shape[1]
    causal = np.tril(np.ones((L, L), dtype=bool))
    return causal[None, :, :] & (token_ids > 0)[:, None, :]


def masked_softmax(s, mask):
    """Softmax over the last axis restricted to ``mask``; fully masked rows give zeros."""
    s = np.where(mask, s, -np.inf)
    m = np.max(s, axis=-1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.where(mask, np.exp(s - m), 0.0)
    z = e.sum(-1, keepdims=True)
    return e / np.where(z > 0, z, 1.0)


# --------------------------------------------------------------------------
# forward / backward


@dataclass
class ReattentionHook:
    """Per-block key variances (``n_blocks x B x L``) used to debias attention rows.

    With ``renormalize`` the corrected row is rescaled to sum to one (equivalent
    to subtracting ``C * sigma^2 / 2`` from the pre-softmax score); without it
    the probabilities are only divided by the correction factor.
    """

    key_variances: np.ndarray
    renormalize: bool = True
    max_exponent: float = 30.0
    clamped: int = 0

    def select(self, rows) -> "ReattentionHook":
        return ReattentionHook(self.key_variances[:, rows], self.renormalize, self.max_exponent)

    def log_factor(self, k: int, q: np.ndarray) -> np.ndarray:
        """Return ``-C sigma_j^2 / 2`` as B x H x L x L for block ``k``.

        ``q`` is B x H x L x d_head, already divided by sqrt(d_head), so that
        ``C = <q, q>`` is the variance scale of the actual score.
        """
        C = np.einsum("bhid,bhid->bhi", q, q)
        sig = self.key_variances[k]
        expo = 0.5 * C[..., :, None] * sig[:, None, None, :]
        over = expo > self.max_exponent
        if over.any():
            self.clamped += int(over.sum())
            expo = np.minimum(expo, self.max_exponent)
        return -expo


@dataclass
class ForwardCache:
    token_ids: np.ndarray
    mode: str
    masks: dict[str, np.ndarray]
    tensors: dict[str, object] = field(default_factory=dict)
    hook: Optional[ReattentionHook] = None

    def sample_masks(self, b: int) -> dict[str, np.ndarray]:
        return {k: v[b : b + 1] for k, v in self.masks.items()}


def _heads(x, H):
    B, L, d = x.shape
    return x.reshape(B, L, H, d // H).transpose(0, 2, 1, 3)


def _merge(x):
    B, H, L, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(B, L, H * dh)


def _dropout_mask(shape, p, rng):
    if rng is None:
        raise ValueError("train mode needs an rng (or preset masks) for dropout")
    return (rng.random(shape) >= p) / (1.0 - p)


def forward(
    params: ModelParams,
    token_ids: np.ndarray,
    mode: str = "eval",
    reattention: Optional[ReattentionHook] = None,
    rng: Optional[Rng] = None,
    masks: Optional[dict[str, np.ndarray]] = None,
):
    """Return ``(logits B x L x M, cache)``.

    In train mode dropout masks are drawn from ``rng`` unless ``masks`` (e.g.
    from an earlier cache) are given, in which case they are replayed exactly.
    """
    c = params.config
    a = params.arrays
    tok = np.asarray(token_ids, dtype=np.int64)
    if tok.ndim != 2 or tok.shape[1] != c.max_len:
        raise ValueError(f"token_ids must be B x {c.max_len}, got {tok.shape}")
    if tok.min(initial=0) < 0 or tok.max(initial=0) > c.vocab_size:
        raise ValueError(f"token id out of range [0, {c.vocab_size}]")
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be train or eval, got {mode!r}")
    B, L = tok.shape
    H = c.n_heads
    dh = c.d_head
    train = mode == "train" and c.dropout > 0
    use_masks: dict[str, np.ndarray] = {} if masks is None else masks
    drawn: dict[str, np.ndarray] = {}

    def drop(name, shape):
        if not train:
            return None
        m = use_masks.get(name)
        if m is None:
            m = _dropout_mask(shape, c.dropout, rng)
        drawn[name] = m
        return m

    valid = tok > 0
    idx = tok - 1
    emb = np.where(valid[..., None], a["E"][np.maximum(idx, 0)], 0.0)
    x = (emb + a["P"][None]) * valid[..., None]
    T: dict[str, object] = {"valid": valid, "idx": idx}
    amask = attention_mask(tok)[:, None]  # B x 1 x L x L
    T["amask"] = amask
    scale = 1.0 / math.sqrt(dh)

    for k in range(c.n_blocks):
        p = f"blocks.{k}."
        h, ln1 = layernorm(x, a[p + "ln1.g"], a[p + "ln1.b"])
        Q = h @ a[p + "W_Q"]
        K = h @ a[p + "W_K"]
        V = h @ a[p + "W_V"]
        q = _heads(Q, H) * scale
        kk = _heads(K, H)
        v = _heads(V, H)
        S = q @ kk.transpose(0, 1, 3, 2)
        corr = None
        if reattention is not None:
            corr = reattention.log_factor(k, q)
            if reattention.renormalize:
                A = masked_softmax(S + corr, amask)
            else:
                A = masked_softmax(S, amask) * np.exp(corr)
        else:
            A = masked_softmax(S, amask)
        dm = drop(p + "attn", A.shape)
        Ad = A if dm is None else A * dm
        O = _merge(Ad @ v)
        x = x + O @ a[p + "W_O"]
        h2, ln2 = layernorm(x, a[p + "ln2.g"], a[p + "ln2.b"])
        u = h2 @ a[p + "W_1"] + a[p + "b_1"]
        act = activation(u, c.activation)
        fm = drop(p + "ffn", act.shape)
        actd = act if fm is None else act * fm
        x = x + actd @ a[p + "W_2"] + a[p + "b_2"]
        T[p] = dict(ln1=ln1, h=h, q=q, k=kk, v=v, A=A, corr=corr, Ad=Ad, O=O, ln2=ln2, h2=h2, u=u, actd=actd)

    hf, lnf = layernorm(x, a["ln_f.g"], a["ln_f.b"])
    out = a["E"] if c.sharing else a["E_out"]
    logits = hf @ out.T
    T["hf"] = hf
    T["lnf"] = lnf
    check_finite(logits, "logits")
    cache = ForwardCache(tok, mode, drawn, T, reattention)
    return logits, cache


def loss_next_token(logits: np.ndarray, targets: np.ndarray):
    """Cross-entropy at every labelled position.

    Returns ``(mean_loss, per_sample, dlogits)``: the per-sample loss is the
    mean over that sample's labelled positions, ``mean_loss`` averages the
    per-sample losses, and ``dlogits`` is the gradient of their *sum*
    (so that ``backward`` yields summed per-sample gradients).
    """
    B, L, M = logits.shape
    targets = np.asarray(targets)
    if targets.shape != (B, L):
        raise ValueError(f"targets shape {targets.shape} != {(B, L)}")
    lab = targets > 0
    if not lab.any():
        raise ValueError("every position is padded; nothing to score")
    n = lab.sum(1)
    z = logits - logits.max(-1, keepdims=True)
    lse = np.log(np.exp(z).sum(-1))
    tgt = np.maximum(targets - 1, 0)
    picked = np.take_along_axis(z, tgt[..., None], -1)[..., 0]
    nll = np.where(lab, lse - picked, 0.0)
    per = np.where(n > 0, nll.sum(1) / np.maximum(n, 1), 0.0)
    probs = np.exp(z - lse[..., None])
    grad = probs.copy()
    np.put_along_axis(grad, tgt[..., None], np.take_along_axis(grad, tgt[..., None], -1) - 1.0, -1)
    w = np.where(lab, 1.0 / np.maximum(n, 1)[:, None], 0.0)
    grad *= w[..., None]
    return float(per.mean()), per, grad


@dataclass
class GradTape:
    """Per-sample ingredients for gradient norms, never the per-sample gradients of matrices.

    ``emb_index`` holds 0-based embedding rows of the input tokens (-1 for
    padding). ``grad_e_s`` is dL_i/d(looked-up rows), B x L x d. ``grad_e_c``
    is dL_i/d(E used as output matrix), B x M x d, or ``None`` when the
    output matrix is a separate parameter. ``linear[name] = (a, g)`` with the
    per-sample gradient being ``a_i^T g_i``. ``direct[name]`` holds per-sample
    gradients of small parameters, B x (shape of parameter).
    """

    emb_index: np.ndarray
    grad_e_s: np.ndarray
    grad_e_c: Optional[np.ndarray]
    linear: dict[str, tuple[np.ndarray, np.ndarray]]
    direct: dict[str, np.ndarray]
    sharing: bool

    @property
    def batch_size(self) -> int:
        return self.emb_index.shape[0]

    def per_sample_gradient(self, name: str, b: int, vocab_size: int) -> np.ndarray:
        """Instantiate sample ``b``'s gradient for one parameter (oracle use only)."""
        if name == "E":
            g = np.zeros((vocab_size, self.grad_e_s.shape[-1]))
            idx = self.emb_index[b]
            keep = idx >= 0
            np.add.at(g, idx[keep], self.grad_e_s[b][keep])
            if self.grad_e_c is not None:
                g += self.grad_e_c[b]
            return g
        if name in self.linear:
            a, g = self.linear[name]
            out = a[b].T @ g[b]
            return out.T if name == "E_out" else out
        return self.direct[name][b]


def backward(
    params: ModelParams,
    cache: ForwardCache,
    loss_grad: np.ndarray,
    weights: Optional[np.ndarray] = None,
    build_tape: bool = True,
):
    """Backprop ``loss_grad`` (B x L x M). Returns ``(grads, tape)``.

    With ``weights`` sample ``i``'s upstream gradient is multiplied by
    ``weights[i]``, so ``grads`` equals ``sum_i weights[i] * g_i``. The
    attention-score correction is treated as a constant.
    """
    c = params.config
    a = params.arrays
    T = cache.tensors
    B, L = cache.token_ids.shape
    if loss_grad.shape != (B, L, c.vocab_size):
        raise ValueError(f"loss_grad shape {loss_grad.shape} != {(B, L, c.vocab_size)}")
    dlog = loss_grad
    if weights is not None:
        weights = np.asarray(weights, dtype=np.float64)
        if weights.shape != (B,):
            raise ValueError(f"weights must have shape ({B},)")
        dlog = loss_grad * weights[:, None, None]
    H = c.n_heads
    scale = 1.0 / math.sqrt(c.d_head)
    grads: dict[str, np.ndarray] = {}
    linear: dict[str, tuple[np.ndarray, np.ndarray]] = {}
    direct: dict[str, np.ndarray] = {}

    def lin(name, x, g):
        if build_tape:
            linear[name] = (x, g)
        grads[name] = x.reshape(-1, x.shape[-1]).T @ g.reshape(-1, g.shape[-1])

    def vec(name, per_sample):
        if build_tape:
            direct[name] = per_sample
        grads[name] = per_sample.sum(0)

    hf = T["hf"]
    if c.sharing:
        W_out = a["E"]
        grad_e_c = dlog.transpose(0, 2, 1) @ hf
        grads["E"] = grad_e_c.sum(0)
    else:
        W_out = a["E_out"]
        grad_e_c = None
        # logits = hf @ E_out^T: a linear map with weight E_out^T
        if build_tape:
            linear["E_out"] = (hf, dlog)
        grads["E_out"] = dlog.reshape(-1, dlog.shape[-1]).T @ hf.reshape(-1, hf.shape[-1])
    dhf = dlog @ W_out
    dx, dg, db = layernorm_backward(dhf, a["ln_f.g"], T["lnf"])
    vec("ln_f.g", dg)
    vec("ln_f.b", db)

    for k in reversed(range(c.n_blocks)):
        p = f"blocks.{k}."
        t = T[p]
        # FFN
        vec(p + "b_2", dx.sum(1))
        lin(p + "W_2", t["actd"], dx)
        dact = dx @ a[p + "W_2"].T
        fm = cache.masks.get(p + "ffn")
        if fm is not None:
            dact = dact * fm
        du = dact * activation_grad(t["u"], c.activation)
        vec(p + "b_1", du.sum(1))
        lin(p + "W_1", t["h2"], du)
        dh2 = du @ a[p + "W_1"].T
        dxl, dg, db = layernorm_backward(dh2, a[p + "ln2.g"], t["ln2"])
        vec(p + "ln2.g", dg)
        vec(p + "ln2.b", db)
        dx = dx + dxl
        # attention
        lin(p + "W_O", t["O"], dx)
        dO = _heads(dx @ a[p + "W_O"].T, H)
        dAd = dO @ t["v"].transpose(0, 1, 3, 2)
        dv = t["Ad"].transpose(0, 1, 3, 2) @ dO
        am = cache.masks.get(p + "attn")
        dA = dAd if am is None else dAd * am
        A = t["A"]
        hook = cache.hook
        if hook is not None and not hook.renormalize:
            # A = softmax(S) * f
            f = np.exp(t["corr"])
            dA = dA * f
            A = A / np.where(f > 0, f, 1.0)
        dS = A * (dA - (dA * A).sum(-1, keepdims=True))
        dq = (dS @ t["k"]) * scale
        dk = dS.transpose(0, 1, 3, 2) @ t["q"]
        dQ = _merge(dq)
        dK = _merge(dk)
        dV = _merge(dv)
        h = t["h"]
        lin(p + "W_Q", h, dQ)
        lin(p + "W_K", h, dK)
        lin(p + "W_V", h, dV)
        dh = dQ @ a[p + "W_Q"].T + dK @ a[p + "W_K"].T + dV @ a[p + "W_V"].T
        dxl, dg, db = layernorm_backward(dh, a[p + "ln1.g"], t["ln1"])
        vec(p + "ln1.g", dg)
        vec(p + "ln1.b", db)
        dx = dx + dxl

    valid = T["valid"]
    dx0 = dx * valid[..., None]
    vec("P", dx0)
    idx = T["idx"]
    gE_in = np.zeros_like(a["E"])
    np.add.at(gE_in, idx[valid], dx0[valid])
    grads["E"] = grads.get("E", 0.0) + gE_in
    tape = None
    if build_tape:
        tape = GradTape(
            emb_index=np.where(valid, idx, -1),
            grad_e_s=dx0,
            grad_e_c=grad_e_c,
            linear=linear,
            direct=direct,
            sharing=c.sharing,
        )
    ordered = {name: grads[name] for name in params.arrays}
    return ordered, tape


# --------------------------------------------------------------------------
# gradient check


def _total_loss(params, batch_tokens, targets):
    logits, _ = forward(params, batch_tokens, "eval")
    _, per, _ = loss_next_token(logits, targets)
    return float(per.sum())


def finite_difference_check(
    params: ModelParams,
    token_ids: np.ndarray,
    targets: np.ndarray,
    rng: Rng,
    epsilon: float = 1e-5,
    n_coords: int = 200,
    grads: Optional[dict[str, np.ndarray]] = None,
    return_details: bool = False,
):
    """Central-difference check of ``backward`` on the summed per-sample loss (eval mode).

    Every parameter group gets at least one coordinate; the rest are spread
    uniformly over all parameters. Returns the max of
    ``|analytic - numeric| / (|numeric| + 1e-8)``.
    """
    if grads is None:
        logits, cache = forward(params, token_ids, "eval")
        _, _, dl = loss_next_token(logits, targets)
        grads, _ = backward(params, cache, dl, build_tape=False)
    names = params.names()
    sizes = np.array([params[n].size for n in names])
    picks = [(n, int(rng.integers(0, params[n].size))) for n in names]
    extra = max(0, n_coords - len(picks))
    # remaining coordinates uniform over all parameters, so groups are hit in proportion to size
    owner = np.searchsorted(np.cumsum(sizes), rng.integers(0, sizes.sum(), extra), side="right")
    for o in owner:
        n = names[int(o)]
        picks.append((n, int(rng.integers(0, params[n].size))))
    work = params.copy()
    worst = 0.0
    details = []
    for name, flat in picks:
        arr = work.arrays[name].reshape(-1)
        old = arr[flat]
        arr[flat] = old + epsilon
        fp = _total_loss(work, token_ids, targets)
        arr[flat] = old - epsilon
        fm = _total_loss(work, token_ids, targets)
        arr[flat] = old
        num = (fp - fm) / (2 * epsilon)
        ana = float(grads[name].reshape(-1)[flat])
        rel = abs(ana - num) / (abs(num) + 1e-8)
        details.append((name, flat, ana, num, rel))
        worst = max(worst, rel)
    if return_details:
        return worst, details
    return worst


# --------------------------------------------------------------------------
# checkpoints


def save_checkpoint(params: ModelParams, path_or_file) -> None:
    """npz archive: every parameter array plus a JSON header with the config and version."""
    header = json.dumps({"version": CHECKPOINT_VERSION, "config": asdict(params.config), "names": params.names()})
    np.savez(path_or_file, __header__=np.frombuffer(header.encode("utf-8"), dtype=np.uint8), **params.arrays)


def load_checkpoint(path_or_file) -> ModelParams:
    with np.load(path_or_file, allow_pickle=False) as z:
        header = json.loads(bytes(z["__header__"]).decode("utf-8"))
        if header.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {header.get('version')}")
        arrays = {n: z[n].copy() for n in header["names"]}
    return ModelParams(ModelConfig(**header["config"]), arrays)


def checkpoint_bytes(params: ModelParams) -> bytes:
    buf = io.BytesIO()
    save_checkpoint(params, buf)
    return buf.getvalue()
