"""Interaction logs -> long-tailed token-sequence datasets and minibatches.

Token ids are contiguous ``1..M`` ordered by frequency rank (1 = most
frequent); ``0`` is padding. Each user owns exactly one sequence, which makes
the privacy unit the user.
"""

from __future__ import annotations

import io
import logging
import math
import os
from dataclasses import dataclass, field
from typing import BinaryIO, Iterable, Union

import numpy as np

from .numkit import Rng

log = logging.getLogger(__name__)

FORMATS = ("tsv", "movielens-dat")


class DatasetError(ValueError):
    pass


@dataclass
class InteractionLog:
    """Rows of ``(user, item, timestamp)`` as an ``(n, 3)`` int64 array."""

    records: np.ndarray
    malformed: int = 0

    def __post_init__(self):
        r = np.asarray(self.records, dtype=np.int64).reshape(-1, 3)
        if len(r):
            r = np.unique(r, axis=0)
        self.records = r

    def __len__(self) -> int:
        return len(self.records)

    @classmethod
    def from_records(cls, rows: Iterable[tuple[int, int, int]]) -> "InteractionLog":
        return cls(np.array(list(rows), dtype=np.int64).reshape(-1, 3))


@dataclass
class FrequencyTable:
    """Training-token statistics.

    ``p`` is the share of training token occurrences (``counts / total``).
    ``occurrence`` is the fraction of training sequences that contain the
    token at least once, i.e. the chance that a uniformly drawn batch element
    touches that token's embedding row.
    """

    counts: np.ndarray
    p: np.ndarray
    occurrence: np.ndarray

    @property
    def total(self) -> int:
        return int(self.counts.sum())


@dataclass
class SequenceDataset:
    sequences: list[np.ndarray]
    test_targets: np.ndarray
    vocab_size: int
    max_len: int
    user_ids: np.ndarray
    item_ids: np.ndarray  # item_ids[t - 1] is the raw item for token t
    frequencies: FrequencyTable
    log: InteractionLog = field(repr=False)
    min_count: int = 5

    @property
    def n_users(self) -> int:
        return len(self.sequences)


@dataclass
class SequenceBatch:
    token_ids: np.ndarray  # B x L, left padded with 0
    targets: np.ndarray  # B x L, 0 where no label
    users: np.ndarray  # dataset row index of each batch element

    @property
    def sample_count(self) -> int:
        return int(self.token_ids.shape[0])

    def select(self, rows) -> "SequenceBatch":
        rows = np.atleast_1d(rows)
        return SequenceBatch(self.token_ids[rows], self.targets[rows], self.users[rows])


def _read_source(source: Union[str, os.PathLike, bytes, BinaryIO]) -> str:
    if isinstance(source, (bytes, bytearray)):
        return bytes(source).decode("utf-8")
    if isinstance(source, (str, os.PathLike)):
        try:
            with open(source, "rb") as fh:
                return fh.read().decode("utf-8")
        except OSError as exc:
            raise DatasetError(f"cannot read {source}: {exc}") from exc
    try:
        data = source.read()
    except (OSError, AttributeError) as exc:
        raise DatasetError(f"unreadable source: {exc}") from exc
    return data.decode("utf-8") if isinstance(data, bytes) else data


def ingest_interactions(source, format: str = "tsv", strict: bool = False) -> InteractionLog:
    """Parse ``user<TAB>item<TAB>timestamp`` or ``user::item::rating::timestamp`` lines."""
    if format not in FORMATS:
        raise DatasetError(f"unknown format {format!r}; expected one of {FORMATS}")
    text = _read_source(source)
    rows = []
    bad = 0
    for line in text.splitlines():
        if not line.strip():
            continue
        parts = line.split("\t") if format == "tsv" else line.split("::")
        want = 3 if format == "tsv" else 4
        try:
            if len(parts) != want:
                raise ValueError(line)
            if format == "tsv":
                u, i, t = (int(p) for p in parts)
            else:
                u, i, _, t = int(parts[0]), int(parts[1]), parts[2], int(parts[3])
        except ValueError:
            bad += 1
            continue
        rows.append((u, i, t))
    if bad:
        if strict:
            raise DatasetError(f"{bad} malformed lines")
        log.warning("skipped %d malformed lines", bad)
    if not rows:
        log.warning("no interactions parsed")
    out = InteractionLog.from_records(rows)
    out.malformed = bad
    return out


def filter_interactions(log_: InteractionLog, min_count: int = 5) -> InteractionLog:
    """Drop users and items with fewer than ``min_count`` actions, until nothing changes."""
    r = log_.records
    while len(r):
        users, ucount = np.unique(r[:, 0], return_counts=True)
        items, icount = np.unique(r[:, 1], return_counts=True)
        keep = np.isin(r[:, 0], users[ucount >= min_count]) & np.isin(
            r[:, 1], items[icount >= min_count]
        )
        if keep.all():
            break
        r = r[keep]
    return InteractionLog(r)


def _split(records: np.ndarray, max_len: int):
    # sort by user, then timestamp, then item id (tie-break)
    order = np.lexsort((records[:, 1], records[:, 2], records[:, 0]))
    r = records[order]
    users, starts = np.unique(r[:, 0], return_index=True)
    bounds = list(starts[1:]) + [len(r)]
    train, targets = [], []
    for s, e in zip(starts, bounds):
        items = r[s:e, 1]
        targets.append(items[-1])
        train.append(items[:-1][-max_len:])
    return users, train, np.array(targets, dtype=np.int64)


def build_dataset(log_: InteractionLog, min_count: int = 5, max_len: int = 50) -> SequenceDataset:
    """Filter, order, remap and split a log into per-user training sequences.

    The last item of each user is held out as the test target; the preceding
    items (most recent ``max_len``) form the training sequence. Items whose
    every retained occurrence falls outside the training windows are removed
    and filtering is repeated, so every token has a positive training count.
    """
    if len(log_) == 0:
        raise DatasetError("empty interaction log")
    if max_len < 2:
        raise DatasetError("max_len must be >= 2")
    r = log_.records
    while True:
        r = filter_interactions(InteractionLog(r), min_count).records
        if len(r) == 0:
            raise DatasetError(f"no user survives filtering with min_count={min_count}")
        users, train, targets = _split(r, max_len)
        seen = np.unique(np.concatenate(train))
        unseen = np.setdiff1d(np.unique(r[:, 1]), seen)
        if unseen.size == 0:
            break
        r = r[~np.isin(r[:, 1], unseen)]

    items, counts = np.unique(r[:, 1], return_counts=True)
    rank = np.lexsort((items, -counts))
    item_ids = items[rank]
    lookup = {int(it): k + 1 for k, it in enumerate(item_ids)}
    remap = np.vectorize(lambda x: lookup[int(x)], otypes=[np.int64])
    sequences = [remap(s) for s in train]
    test_targets = remap(targets)
    M = len(item_ids)
    ds = SequenceDataset(
        sequences=sequences,
        test_targets=test_targets,
        vocab_size=M,
        max_len=max_len,
        user_ids=users,
        item_ids=item_ids,
        frequencies=None,  # type: ignore[arg-type]
        log=InteractionLog(r),
        min_count=min_count,
    )
    ds.frequencies = token_frequencies(ds)
    return ds


def token_frequencies(ds: SequenceDataset) -> FrequencyTable:
    M = ds.vocab_size
    counts = np.zeros(M, dtype=np.int64)
    occ = np.zeros(M, dtype=np.int64)
    for s in ds.sequences:
        np.add.at(counts, s - 1, 1)
        occ[np.unique(s) - 1] += 1
    total = counts.sum()
    if total == 0:
        raise DatasetError("no training tokens")
    return FrequencyTable(counts=counts, p=counts / total, occurrence=occ / len(ds.sequences))


def _rows(ds: SequenceDataset, users: np.ndarray) -> SequenceBatch:
    L = ds.max_len
    B = len(users)
    tok = np.zeros((B, L), dtype=np.int64)
    tgt = np.zeros((B, L), dtype=np.int64)
    for b, u in enumerate(users):
        s = ds.sequences[u]
        n = len(s) - 1
        if n > 0:
            tok[b, L - n :] = s[:-1]
            tgt[b, L - n :] = s[1:]
    return SequenceBatch(tok, tgt, np.asarray(users, dtype=np.int64))


def batch_for_users(ds: SequenceDataset, users) -> SequenceBatch:
    """Training rows (inputs ``s[:-1]``, labels ``s[1:]``) for the given users."""
    return _rows(ds, np.asarray(users, dtype=np.int64))


def eval_inputs(ds: SequenceDataset, users) -> np.ndarray:
    """Left-padded full training sequences; the last column predicts the test target."""
    users = np.asarray(users, dtype=np.int64)
    L = ds.max_len
    tok = np.zeros((len(users), L), dtype=np.int64)
    for b, u in enumerate(users):
        s = ds.sequences[u][-L:]
        tok[b, L - len(s) :] = s
    return tok


def sample_minibatch(ds: SequenceDataset, mode: str, rng: Rng, q: float = None, B: int = None) -> SequenceBatch:
    """Poisson (each user w.p. ``q``; empty draws are redrawn) or uniform ``B`` without replacement."""
    N = ds.n_users
    if mode == "poisson":
        if q is None or not 0 < q <= 1:
            raise ValueError(f"poisson sampling needs q in (0, 1], got {q}")
        while True:
            users = np.flatnonzero(rng.random(N) < q)
            if users.size:
                break
    elif mode == "uniform":
        if B is None or not 1 <= B <= N:
            raise ValueError(f"uniform sampling needs 1 <= B <= {N}, got {B}")
        users = np.sort(rng.choice(N, B, replace=False))
    else:
        raise ValueError(f"unknown sampling mode {mode!r}")
    return _rows(ds, users)


def dataset_summary(ds: SequenceDataset, head_fraction: float = 0.2) -> dict:
    counts = np.bincount(_all_tokens(ds), minlength=ds.vocab_size + 1)[1:]
    n_inter = len(ds.log)
    head = top_mass(counts, head_fraction)
    return {
        "vocab_size": ds.vocab_size,
        "users": ds.n_users,
        "interactions": n_inter,
        "density": n_inter / (ds.n_users * ds.vocab_size),
        "max_len": ds.max_len,
        "head_fraction": head_fraction,
        "head_mass": head,
        "tail_mass": 1.0 - head,
    }


def _all_tokens(ds: SequenceDataset) -> np.ndarray:
    lookup = {int(it): k + 1 for k, it in enumerate(ds.item_ids)}
    return np.array([lookup[int(i)] for i in ds.log.records[:, 1]], dtype=np.int64)


def top_mass(counts: np.ndarray, fraction: float) -> float:
    c = np.sort(np.asarray(counts))[::-1]
    k = max(1, int(math.ceil(fraction * len(c))))
    return float(c[:k].sum() / c.sum())


def zipf_probs(n: int, exponent: float) -> np.ndarray:
    w = np.arange(1, n + 1, dtype=np.float64) ** -exponent
    return w / w.sum()


STRUCTURES = ("successor", "cluster")


def synthetic_zipf_log(
    n_users: int,
    n_items: int,
    rng: Rng,
    exponent: float = 1.1,
    min_len: int = 8,
    max_len: int = 30,
    coherence: float = 0.6,
    structure: str = "successor",
    n_clusters: int = 20,
) -> InteractionLog:
    """Long-tailed sequential log with learnable structure.

    Item popularity follows Zipf(``exponent``). With probability
    ``coherence`` the next item depends on the current one, otherwise it is a
    fresh Zipf draw. ``structure`` picks the dependency:

    - ``"successor"``: every item has one fixed successor (drawn from the Zipf law);
    - ``"cluster"``: items are split at random into ``n_clusters`` topics and
      the next item is a Zipf-weighted draw from the current item's topic.

    Timestamps are 1, 2, ... per user.
    """
    if structure not in STRUCTURES:
        raise ValueError(f"unknown structure {structure!r}")
    p = zipf_probs(n_items, exponent)
    cdf = np.cumsum(p)
    cdf[-1] = 1.0

    def draw(k):
        return np.searchsorted(cdf, rng.random(k), side="right")

    if structure == "successor":
        succ = draw(n_items)

        def follow_up(item, u):
            return succ[item]
    else:
        topic = rng.integers(0, n_clusters, size=n_items)
        members = [np.flatnonzero(topic == c) for c in range(n_clusters)]
        topic_cdf = []
        for m in members:
            c = np.cumsum(p[m]) if m.size else np.ones(1)
            topic_cdf.append(c / c[-1])

        def follow_up(item, u):
            c = topic[item]
            return members[c][np.searchsorted(topic_cdf[c], u, side="right")]

    rows = []
    lengths = rng.integers(min_len, max_len + 1, size=n_users)
    for u in range(n_users):
        n = int(lengths[u])
        fresh = draw(n)
        follow = rng.random(n) < coherence
        pick = rng.random(n)
        seq = np.empty(n, dtype=np.int64)
        seq[0] = fresh[0]
        for t in range(1, n):
            seq[t] = follow_up(seq[t - 1], pick[t]) if follow[t] else fresh[t]
        for t in range(n):
            rows.append((u + 1, int(seq[t]) + 1, t + 1))
    return InteractionLog.from_records(rows)


def write_tsv(log_: InteractionLog) -> bytes:
    buf = io.StringIO()
    for u, i, t in log_.records:
        buf.write(f"{u}\t{i}\t{t}\n")
    return buf.getvalue().encode("utf-8")
