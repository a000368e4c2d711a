"""Interaction logs: parsing, k-core filtering, holdout splits, statistics.

The protocol baked in here: dense ids assigned in first-appearance order,
iterative k-core filtering to a fixpoint, then a per-user random holdout
where floor(80%) of a user's interactions (at least one) go to train and the
held-out rest is divided into validation (ceil of half) and test. Splits are
random, not temporal; the timestamp column only arbitrates duplicates.
"""

from __future__ import annotations

import json
import os
from collections import Counter, defaultdict
from dataclasses import dataclass, field

import numpy as np


class InteractionFormatError(ValueError):
    """Malformed interaction line; message names the offending line number."""


@dataclass
class InteractionLog:
    """Raw deduplicated interactions with string ids."""

    records: list  # (user_id, item_id, rating, timestamp)

    def __len__(self):
        return len(self.records)


@dataclass
class Dataset:
    """Dense-indexed interactions after preprocessing."""

    user_ids: list
    item_ids: list
    interactions: np.ndarray  # (n, 2) int64 dense (user, item) pairs
    ratings: np.ndarray
    timestamps: np.ndarray

    @property
    def n_users(self):
        return len(self.user_ids)

    @property
    def n_items(self):
        return len(self.item_ids)

    @property
    def n_interactions(self):
        return int(self.interactions.shape[0])


@dataclass
class Split:
    """Disjoint train/validation/test interaction sets over one Dataset."""

    dataset: Dataset
    train: np.ndarray  # (n, 2) int64
    validation: np.ndarray
    test: np.ndarray
    seed: int
    train_ratio: float = 0.8

    def user_positives(self, part="train"):
        pairs = getattr(self, part)
        pos = defaultdict(set)
        for u, i in pairs:
            pos[int(u)].add(int(i))
        return pos


@dataclass
class DatasetStats:
    n_users: int
    n_items: int
    n_interactions: int
    sparsity_percent: float
    min_user_degree: int
    min_item_degree: int


def parse_interactions(path_or_lines, has_header=False) -> InteractionLog:
    """Read tab-separated `user item [rating [timestamp]]` records.

    Duplicate (user, item) pairs collapse to the record with the latest
    timestamp (missing timestamps count as 0; on a tie the later line wins).
    Malformed lines raise with their 1-based line number.
    """
    if isinstance(path_or_lines, (str, os.PathLike)):
        with open(path_or_lines, "r", encoding="utf-8") as fh:
            lines = fh.readlines()
    else:
        lines = list(path_or_lines)
    best = {}
    order = {}
    start = 1 if has_header else 0
    for lineno, line in enumerate(lines[start:], start=start + 1):
        line = line.rstrip("\n").rstrip("\r")
        if not line:
            continue
        parts = line.split("\t")
        if len(parts) < 2 or len(parts) > 4 or not parts[0] or not parts[1]:
            raise InteractionFormatError(
                f"line {lineno}: expected 2-4 tab-separated fields, got {len(parts)}"
            )
        user, item = parts[0], parts[1]
        try:
            rating = float(parts[2]) if len(parts) >= 3 and parts[2] != "" else 1.0
            ts = int(parts[3]) if len(parts) >= 4 and parts[3] != "" else 0
        except ValueError as exc:
            raise InteractionFormatError(f"line {lineno}: {exc}") from None
        key = (user, item)
        if key not in best or ts >= best[key][3]:
            if key not in order:
                order[key] = len(order)
            best[key] = (user, item, rating, ts)
    records = [best[k] for k in sorted(order, key=order.get)]
    return InteractionLog(records)


def index_log(log: InteractionLog) -> Dataset:
    """Assign dense ids in first-appearance order."""
    users, items = {}, {}
    rows = np.empty((len(log.records), 2), dtype=np.int64)
    ratings = np.empty(len(log.records), dtype=np.float32)
    stamps = np.empty(len(log.records), dtype=np.int64)
    for n, (u, i, r, t) in enumerate(log.records):
        rows[n, 0] = users.setdefault(u, len(users))
        rows[n, 1] = items.setdefault(i, len(items))
        ratings[n] = r
        stamps[n] = t
    return Dataset(list(users), list(items), rows, ratings, stamps)


def k_core_filter(ds: Dataset, k: int = 5) -> Dataset:
    """Drop users and items with fewer than k interactions until stable.

    Ids are re-densified in first-appearance order of the survivors. k <= 0
    is rejected; a dataset that empties out entirely is an error.
    """
    if k <= 0:
        raise ValueError(f"k-core needs k >= 1, got {k}")
    keep = np.ones(ds.n_interactions, dtype=bool)
    while True:
        pairs = ds.interactions[keep]
        ucnt = Counter(pairs[:, 0].tolist())
        icnt = Counter(pairs[:, 1].tolist())
        bad_u = {u for u, c in ucnt.items() if c < k}
        bad_i = {i for i, c in icnt.items() if c < k}
        if not bad_u and not bad_i:
            break
        for n in np.flatnonzero(keep):
            u, i = ds.interactions[n]
            if int(u) in bad_u or int(i) in bad_i:
                keep[n] = False
        if not keep.any():
            raise ValueError(f"{k}-core filtering removed every interaction")
    idx = np.flatnonzero(keep)
    users, items = {}, {}
    rows = np.empty((idx.size, 2), dtype=np.int64)
    for n, j in enumerate(idx):
        u, i = ds.interactions[j]
        rows[n, 0] = users.setdefault(ds.user_ids[u], len(users))
        rows[n, 1] = items.setdefault(ds.item_ids[i], len(items))
    return Dataset(list(users), list(items), rows, ds.ratings[idx], ds.timestamps[idx])


def holdout_split(ds: Dataset, seed: int, train_ratio: float = 0.8) -> Split:
    """Per-user random holdout.

    For a user with n interactions: floor(train_ratio * n) of them (minimum 1)
    are drawn for train by seeded uniform sampling without replacement; of the
    remainder, ceil(half) goes to validation and the rest to test. Users with
    a single interaction contribute to train only.
    """
    if not 0.0 < train_ratio < 1.0:
        raise ValueError(f"train_ratio must be in (0, 1), got {train_ratio}")
    by_user = defaultdict(list)
    for n, (u, _) in enumerate(ds.interactions):
        by_user[int(u)].append(n)
    rng = np.random.default_rng(seed)
    train_idx, val_idx, test_idx = [], [], []
    for u in sorted(by_user):
        rows = np.array(by_user[u])
        perm = rng.permutation(rows.size)
        n_train = max(1, int(np.floor(train_ratio * rows.size)))
        held = rows.size - n_train
        n_val = int(np.ceil(held / 2))
        shuffled = rows[perm]
        train_idx.extend(shuffled[:n_train].tolist())
        val_idx.extend(shuffled[n_train:n_train + n_val].tolist())
        test_idx.extend(shuffled[n_train + n_val:].tolist())

    def take(idx):
        idx = np.array(sorted(idx), dtype=np.int64)
        return ds.interactions[idx] if idx.size else np.empty((0, 2), dtype=np.int64)

    return Split(ds, take(train_idx), take(val_idx), take(test_idx),
                 seed=seed, train_ratio=train_ratio)


def sparsity_percent(n_users: int, n_items: int, n_interactions: int) -> float:
    """(1 - |R| / (|U| * |I|)) * 100."""
    if n_users <= 0 or n_items <= 0:
        raise ValueError("sparsity needs at least one user and one item")
    return (1.0 - n_interactions / (n_users * n_items)) * 100.0


def stats(ds: Dataset) -> DatasetStats:
    ucnt = Counter(ds.interactions[:, 0].tolist())
    icnt = Counter(ds.interactions[:, 1].tolist())
    return DatasetStats(
        n_users=ds.n_users,
        n_items=ds.n_items,
        n_interactions=ds.n_interactions,
        sparsity_percent=sparsity_percent(ds.n_users, ds.n_items, ds.n_interactions),
        min_user_degree=min(ucnt.values()) if ucnt else 0,
        min_item_degree=min(icnt.values()) if icnt else 0,
    )


@dataclass
class SyntheticData:
    """Output bundle of generate_synthetic."""

    dataset: Dataset
    features: dict  # modality name -> (n_items, dim) float32, the true factors
    user_preferences: dict  # modality name -> (n_users, dim) float32
    affinity: np.ndarray  # (n_users, n_items) noiseless scores
    density: float


def generate_synthetic(n_users: int, n_items: int, density: float, seed: int,
                       modalities=("visual", "textual"), dims=None,
                       noise: float = 0.0) -> SyntheticData:
    """Latent-preference interaction generator.

    Each modality gets item feature vectors and user preference vectors; the
    score of (u, i) is the mean over modalities of the dot product, plus
    gaussian noise. Interactions are the entries above the global quantile
    that matches the target density, so with noise=0 every positive item of a
    user scores strictly above every negative one under the true affinity.
    Byte-identical output for identical arguments.
    """
    if n_users <= 0 or n_items <= 0:
        raise ValueError("need at least one user and one item")
    if not 0.0 < density < 1.0:
        raise ValueError(f"density must be in (0, 1), got {density}")
    if round(density * n_users * n_items) < 1:
        raise ValueError(f"density {density} yields no interactions at "
                         f"{n_users}x{n_items}")
    if dims is None:
        dims = {m: 16 for m in modalities}
    rng = np.random.default_rng(seed)
    feats, prefs = {}, {}
    affinity = np.zeros((n_users, n_items), dtype=np.float64)
    for m in modalities:
        d = dims[m]
        f = rng.standard_normal((n_items, d))
        f /= np.linalg.norm(f, axis=1, keepdims=True)
        p = rng.standard_normal((n_users, d))
        feats[m] = f.astype(np.float32)
        prefs[m] = p.astype(np.float32)
        affinity += p @ f.T
    affinity /= len(modalities)
    scores = affinity + (noise * rng.standard_normal(affinity.shape) if noise else 0.0)
    threshold = np.quantile(scores, 1.0 - density)
    uu, ii = np.nonzero(scores > threshold)
    if uu.size == 0:
        raise ValueError("density target infeasible: no scores above threshold")
    pairs = np.stack([uu, ii], axis=1).astype(np.int64)
    ds = Dataset(
        user_ids=[f"u{u}" for u in range(n_users)],
        item_ids=[f"i{i}" for i in range(n_items)],
        interactions=pairs,
        ratings=np.ones(uu.size, dtype=np.float32),
        timestamps=np.zeros(uu.size, dtype=np.int64),
    )
    return SyntheticData(ds, feats, prefs, affinity, density)


def write_interactions_tsv(ds: Dataset, path):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for n in range(ds.n_interactions):
            u, i = ds.interactions[n]
            fh.write(f"{ds.user_ids[u]}\t{ds.item_ids[i]}\t"
                     f"{ds.ratings[n]:g}\t{ds.timestamps[n]}\n")


def write_split(split: Split, out_dir):
    """Three TSVs plus a JSON sidecar with seed, ratio and counts."""
    os.makedirs(out_dir, exist_ok=True)
    ds = split.dataset
    for name in ("train", "validation", "test"):
        pairs = getattr(split, name)
        with open(os.path.join(out_dir, f"{name}.tsv"), "w", encoding="utf-8",
                  newline="\n") as fh:
            for u, i in pairs:
                fh.write(f"{ds.user_ids[u]}\t{ds.item_ids[i]}\n")
    sidecar = {
        "seed": split.seed,
        "train_ratio": split.train_ratio,
        "validation_fraction_of_holdout": 0.5,
        "n_users": ds.n_users,
        "n_items": ds.n_items,
        "n_train": int(split.train.shape[0]),
        "n_validation": int(split.validation.shape[0]),
        "n_test": int(split.test.shape[0]),
    }
    with open(os.path.join(out_dir, "split.json"), "w", encoding="utf-8",
              newline="\n") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)
        fh.write("\n")
