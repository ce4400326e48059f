"""DP training loop, ranking evaluation and experiment grids."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Optional

import numpy as np

from .clipping import CLIP_MODES, clipped_batch_gradient
from .numkit import Rng
from .privacy import PrivacyLedger, calibrate_sigma, default_delta, dp_step
from .reattention import effective_errors, make_hook
from .seqdata import SequenceDataset, dataset_summary, eval_inputs, sample_minibatch
from .transformer import ModelConfig, ModelParams, forward, init_params

log = logging.getLogger(__name__)

REPORT_VERSION = 1


class PrivacyBudgetExceeded(RuntimeError):
    def __init__(self, message, report):
        super().__init__(message)
        self.report = report


@dataclass
class TrainConfig:
    epsilon: Optional[float] = None
    sigma_dp: Optional[float] = None
    delta: Optional[float] = None
    epochs: int = 100
    warmup_fraction: float = 0.2
    batch_size: Optional[int] = None
    q: Optional[float] = None
    sampling: str = "poisson"
    learning_rate: float = 1e-3
    weight_decay: float = 1e-5
    C: float = 1.0
    clip_mode: str = "normalize"
    d: int = 64
    n_blocks: int = 2
    n_heads: int = 1
    d_ff: Optional[int] = None
    dropout: float = 0.2
    activation: str = "relu"
    reattention: bool = False
    renormalize: bool = True
    sharing: bool = True
    seed: int = 0
    eval_every: int = 5
    K: int = 10
    exclude_seen: bool = False
    sampled_negatives: int = 0
    record_runtime: bool = False

    def __post_init__(self):
        if (self.epsilon is None) == (self.sigma_dp is None):
            raise ValueError("set exactly one of epsilon and sigma_dp")
        if not 0 <= self.warmup_fraction < 1:
            raise ValueError("warmup_fraction must be in [0, 1)")
        if (self.batch_size is None) == (self.q is None):
            raise ValueError("set exactly one of batch_size and q")
        if self.sampling not in ("poisson", "uniform"):
            raise ValueError(f"unknown sampling mode {self.sampling!r}")
        if self.clip_mode not in CLIP_MODES:
            raise ValueError(f"unknown clip mode {self.clip_mode!r}")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")

    def model_config(self, ds: SequenceDataset) -> ModelConfig:
        return ModelConfig(
            vocab_size=ds.vocab_size,
            max_len=ds.max_len,
            d=self.d,
            n_blocks=self.n_blocks,
            n_heads=self.n_heads,
            d_ff=self.d_ff,
            dropout=self.dropout,
            sharing=self.sharing,
            activation=self.activation,
        )

    def to_dict(self) -> dict:
        return asdict(self)


def lr_schedule(step: float, total_steps: float, base_lr: float, warmup_fraction: float = 0.2) -> float:
    """Linear warm-up from 0 to ``base_lr``, then linear decay to 0 at ``total_steps``."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if total_steps == 0:
        return 0.0
    warm = warmup_fraction * total_steps
    if warm > 0 and step < warm:
        return base_lr * step / warm
    return base_lr * (total_steps - step) / (total_steps - warm)


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_update(
    params: ModelParams,
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
    weight_decay: float = 1e-5,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """In-place Adam step with decoupled weight decay (``p -= lr * wd * p``)."""
    state.t += 1
    b1c = 1 - beta1**state.t
    b2c = 1 - beta2**state.t
    for name, p in params.arrays.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name}")
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        p -= lr * ((m / b1c) / (np.sqrt(v / b2c) + eps) + weight_decay * p)


def target_ranks(scores: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """1-based rank of each target column; ties go to the lower token id."""
    t = targets - 1
    ts = scores[np.arange(len(t)), t][:, None]
    ids = np.arange(scores.shape[1])[None, :]
    higher = (scores > ts) | ((scores == ts) & (ids < t[:, None]))
    return 1 + higher.sum(1)


def evaluate(
    params: ModelParams,
    ds: SequenceDataset,
    K: int = 10,
    batch: int = 512,
    exclude_seen: bool = False,
    sampled_negatives: int = 0,
    rng: Optional[Rng] = None,
) -> tuple[float, float]:
    """NDCG@K and HIT@K in percent, ranking every token by the last-position logit."""
    N = ds.n_users
    ranks = np.empty(N, dtype=np.int64)
    for s in range(0, N, batch):
        users = np.arange(s, min(N, s + batch))
        logits, _ = forward(params, eval_inputs(ds, users), "eval")
        scores = logits[:, -1, :].copy()
        tgt = ds.test_targets[users]
        if exclude_seen:
            for r, u in enumerate(users):
                seen = np.unique(ds.sequences[u]) - 1
                seen = seen[seen != tgt[r] - 1]
                scores[r, seen] = -np.inf
        if sampled_negatives:
            if rng is None:
                raise ValueError("sampled negatives need an rng")
            ranks[users] = _sampled_ranks(scores, tgt, sampled_negatives, rng)
        else:
            ranks[users] = target_ranks(scores, tgt)
    hit = ranks <= K
    ndcg = np.where(hit, 1.0 / np.log2(ranks + 1.0), 0.0)
    return float(100 * ndcg.mean()), float(100 * hit.mean())


def _sampled_ranks(scores, targets, n_neg, rng):
    M = scores.shape[1]
    out = np.empty(len(targets), dtype=np.int64)
    for r, t in enumerate(targets):
        pool = np.delete(np.arange(1, M + 1), t - 1)
        neg = pool[rng.choice(len(pool), min(n_neg, len(pool)), replace=False)]
        cand = np.concatenate([[t], neg])
        s = scores[r, cand - 1]
        out[r] = 1 + int(np.sum((s > s[0]) | ((s == s[0]) & (cand < t))))
    return out


def _nominal_batch(cfg: TrainConfig, N: int) -> tuple[float, float]:
    if cfg.q is not None:
        q = float(cfg.q)
    else:
        if not 1 <= cfg.batch_size <= N:
            raise ValueError(f"batch size must be in [1, {N}]")
        q = cfg.batch_size / N
    return q, q * N


def train(cfg: TrainConfig, ds: SequenceDataset):
    """Run DP training; returns ``(params, report)``.

    Steps per epoch are ``ceil(N / B)``. Evaluation runs every
    ``eval_every`` epochs and after the last one.
    """
    t_start = time.perf_counter()
    N = ds.n_users
    q, B_nom = _nominal_batch(cfg, N)
    steps_per_epoch = math.ceil(N / B_nom)
    total_steps = cfg.epochs * steps_per_epoch
    delta = cfg.delta if cfg.delta is not None else default_delta(N)
    if cfg.epsilon is not None:
        sigma = calibrate_sigma(cfg.epsilon, delta, q, max(total_steps, 1))
    else:
        sigma = float(cfg.sigma_dp)
    ledger = PrivacyLedger(sigma, q, delta, uniform_sampling=cfg.sampling == "uniform") if sigma > 0 else None

    init_rng = Rng(cfg.seed, "init")
    data_rng = Rng(cfg.seed, "data")
    noise_rng = Rng(cfg.seed, "noise")
    drop_rng = Rng(cfg.seed, "dropout")
    eval_rng = Rng(cfg.seed, "eval")
    params = init_params(cfg.model_config(ds), init_rng)
    state = AdamState()
    freq = ds.frequencies.occurrence
    history = []
    clamped = 0
    report = {
        "version": REPORT_VERSION,
        "config": cfg.to_dict(),
        "dataset": dataset_summary(ds),
        "sigma_dp": sigma,
        "sampling_rate": q,
        "nominal_batch": B_nom,
        "steps_per_epoch": steps_per_epoch,
        "total_steps": total_steps,
        "delta": delta,
        "history": history,
    }

    def finish(status):
        report["status"] = status
        report["ledger"] = ledger.to_dict() if ledger is not None else {"sigma_dp": 0.0, "epsilon": None, "steps_taken": step}
        report["final_epsilon"] = report["ledger"]["epsilon"]
        report["reattention_clamped"] = clamped
        if cfg.record_runtime:
            report["runtime_seconds"] = time.perf_counter() - t_start
        return report

    step = 0
    for epoch in range(1, cfg.epochs + 1):
        losses = []
        for _ in range(steps_per_epoch):
            if cfg.sampling == "poisson":
                batch = sample_minibatch(ds, "poisson", data_rng, q=q)
            else:
                batch = sample_minibatch(ds, "uniform", data_rng, B=int(round(B_nom)))
            hook = None
            if cfg.reattention:
                err = effective_errors(sigma, B_nom, freq)
                hook = make_hook(params, err, batch.token_ids, cfg.renormalize)
            grads, norms = clipped_batch_gradient(params, batch, cfg.C, cfg.clip_mode, drop_rng, hook)
            if hook is not None:
                clamped += hook.clamped
            noisy = dp_step(grads, cfg.C, sigma, B_nom, noise_rng)
            lr = lr_schedule(step, total_steps, cfg.learning_rate, cfg.warmup_fraction)
            adam_update(params, noisy, state, lr, cfg.weight_decay)
            step += 1
            losses.append(norms.loss)
            if ledger is not None:
                ledger.advance()
                if cfg.epsilon is not None and ledger.epsilon() > cfg.epsilon:
                    raise PrivacyBudgetExceeded(
                        f"privacy budget exceeded at step {step}", finish("aborted: privacy budget exceeded")
                    )
        entry = {"epoch": epoch, "train_loss": float(np.mean(losses))}
        if epoch % cfg.eval_every == 0 or epoch == cfg.epochs:
            ndcg, hit = evaluate(params, ds, cfg.K, exclude_seen=cfg.exclude_seen,
                                 sampled_negatives=cfg.sampled_negatives, rng=eval_rng)
            entry.update(ndcg=ndcg, hit=hit)
            log.info("epoch %d loss %.4f NDCG@%d %.3f HIT@%d %.3f", epoch, entry["train_loss"], cfg.K, ndcg, cfg.K, hit)
        history.append(entry)
    return params, finish("completed")


def final_metrics(report: dict) -> tuple[Optional[float], Optional[float]]:
    for e in reversed(report["history"]):
        if "ndcg" in e:
            return e["ndcg"], e["hit"]
    return None, None


def report_json(report: dict) -> str:
    return json.dumps(report, sort_keys=True, indent=2, allow_nan=False)


def run_experiment_grid(base: TrainConfig, ds: SequenceDataset, learning_rates, batch_sizes, seeds=(0,)) -> dict:
    """Mean and sample std of final NDCG/HIT over seeds for each (batch, lr) cell."""
    cells = []
    for B in batch_sizes:
        for lr in learning_rates:
            ndcgs, hits, errors = [], [], []
            for s in seeds:
                cfg = replace(base, batch_size=B, q=None, learning_rate=lr, seed=s)
                try:
                    _, rep = train(cfg, ds)
                    n, h = final_metrics(rep)
                    ndcgs.append(n)
                    hits.append(h)
                except Exception as exc:  # noqa: BLE001 - a failed cell is recorded, the grid goes on
                    errors.append(f"{type(exc).__name__}: {exc}")
            cells.append(
                {
                    "batch_size": B,
                    "learning_rate": lr,
                    "seeds": list(seeds),
                    "ndcg": ndcgs,
                    "hit": hits,
                    "ndcg_mean": float(np.mean(ndcgs)) if ndcgs else None,
                    "ndcg_std": float(np.std(ndcgs, ddof=1)) if len(ndcgs) > 1 else 0.0 if ndcgs else None,
                    "hit_mean": float(np.mean(hits)) if hits else None,
                    "hit_std": float(np.std(hits, ddof=1)) if len(hits) > 1 else 0.0 if hits else None,
                    "failed": errors,
                }
            )
    return {"cells": cells, "csv": grid_csv(cells, learning_rates, batch_sizes)}


def grid_csv(cells, learning_rates, batch_sizes) -> str:
    """batch x lr matrix of ``mean±std`` NDCG; failed cells read ``FAILED``."""
    lookup = {(c["batch_size"], c["learning_rate"]): c for c in cells}
    lines = ["batch\\lr," + ",".join(f"{lr:g}" for lr in learning_rates)]
    for B in batch_sizes:
        row = [str(B)]
        for lr in learning_rates:
            c = lookup[(B, lr)]
            row.append("FAILED" if c["ndcg_mean"] is None else f"{c['ndcg_mean']:.3f}±{c['ndcg_std']:.3f}")
        lines.append(",".join(row))
    return "\n".join(lines) + "\n"
