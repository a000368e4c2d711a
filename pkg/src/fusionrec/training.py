"""Pairwise ranking loss, triple sampling, optimizers, grid search.

The training objective everywhere is BPR: -ln sigmoid(y_pos - y_neg),
implemented as softplus(y_neg - y_pos), plus an l2 penalty on every trainable
tensor weighted by the regularization coefficient (applied through the loss,
never as decay on the update).
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field, replace

import numpy as np

from .tensor import NonFiniteError, Tape, Tensor

OPTIMIZERS = ("sgd", "adam")


class TrainingDivergedError(RuntimeError):
    """Loss, gradient or parameter became non-finite during training."""


@dataclass
class TripleBatch:
    users: np.ndarray
    pos: np.ndarray
    neg: np.ndarray

    def __len__(self):
        return int(self.users.size)


@dataclass
class TrainData:
    """Sampling view of a train split."""

    n_users: int
    n_items: int
    pairs: np.ndarray  # (n, 2) int64
    user_pos: dict = field(default_factory=dict)  # user -> sorted id list
    user_pos_sets: dict = field(default_factory=dict)
    eligible: np.ndarray = None  # users with >=1 positive and >=1 negative

    @classmethod
    def from_pairs(cls, n_users, n_items, pairs):
        pos = defaultdict(set)
        for u, i in pairs:
            pos[int(u)].add(int(i))
        user_pos = {u: sorted(s) for u, s in pos.items()}
        eligible = np.array(
            sorted(u for u, s in pos.items() if 0 < len(s) < n_items),
            dtype=np.int64,
        )
        if eligible.size == 0:
            raise ValueError("no user has both a positive and a negative item")
        return cls(n_users, n_items, np.asarray(pairs, dtype=np.int64),
                   user_pos, {u: set(s) for u, s in user_pos.items()}, eligible)

    @classmethod
    def from_split(cls, split):
        return cls.from_pairs(split.dataset.n_users, split.dataset.n_items,
                              split.train)


@dataclass
class TrainerConfig:
    epochs: int = 200
    batch_size: int = 1024
    lr: float = 1e-3
    reg: float = 1e-5
    optimizer: str = "adam"
    seed: int = 0
    eval_every: int = 10

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if self.reg < 0:
            raise ValueError(f"reg must be nonnegative, got {self.reg}")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer {self.optimizer!r} not in {OPTIMIZERS}")


def sample_triples(data: TrainData, batch_size: int, rng) -> TripleBatch:
    """Draw (user, positive, negative) triples.

    Users come uniformly from those with at least one positive and one
    non-interacted item; the positive is uniform over the user's train items;
    the negative is drawn uniformly over the catalog with rejection against
    the user's train set.
    """
    users = data.eligible[rng.integers(0, data.eligible.size, size=batch_size)]
    pos = np.empty(batch_size, dtype=np.int64)
    neg = np.empty(batch_size, dtype=np.int64)
    for k, u in enumerate(users):
        items = data.user_pos[int(u)]
        pos[k] = items[rng.integers(0, len(items))]
        taken = data.user_pos_sets[int(u)]
        while True:
            j = int(rng.integers(0, data.n_items))
            if j not in taken:
                neg[k] = j
                break
    return TripleBatch(users, pos, neg)


def bpr_loss(tape: Tape, pos_scores: Tensor, neg_scores: Tensor) -> Tensor:
    """Mean over the batch of softplus(y_neg - y_pos) = -ln sigmoid(y_pos - y_neg)."""
    return tape.mean(tape.softplus(tape.sub(neg_scores, pos_scores)))


def l2_penalty(tape: Tape, params) -> Tensor:
    """Sum of squared entries over every trainable tensor."""
    tensors = params.tensors() if hasattr(params, "tensors") else list(params)
    total = None
    for t in tensors:
        sq = tape.sum(tape.mul(t, t))
        total = sq if total is None else tape.add(total, sq)
    if total is None:
        raise ValueError("no parameters to regularize")
    return total


def total_loss(tape: Tape, model, batch, rng, reg: float) -> Tensor:
    """Model task loss plus reg * l2 over its parameter set."""
    loss = model.loss(tape, batch, rng)
    if reg > 0:
        loss = tape.add(loss, tape.scale(l2_penalty(tape, model.params()), reg))
    return loss


class SGD:
    def __init__(self, params, lr):
        self.params = list(params.tensors())
        self.lr = float(lr)

    def step(self):
        for p in self.params:
            if p.grad is None:
                continue
            p.data -= p.data.dtype.type(self.lr) * p.grad
            if not np.isfinite(p.data).all():
                raise TrainingDivergedError("parameter became non-finite after SGD step")
            p.zero_grad()


class Adam:
    """Adam with bias correction; beta1=0.9, beta2=0.999, eps=1e-8."""

    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params.tensors())
        self.lr = float(lr)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for k, p in enumerate(self.params):
            if p.grad is None:
                continue
            g = p.grad
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * (g * g)
            m_hat = self.m[k] / (1 - b1 ** self.t)
            v_hat = self.v[k] / (1 - b2 ** self.t)
            p.data -= (self.lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(p.data.dtype)
            if not np.isfinite(p.data).all():
                raise TrainingDivergedError("parameter became non-finite after Adam step")
            p.zero_grad()


def make_optimizer(trainer: TrainerConfig, params):
    if trainer.optimizer == "sgd":
        return SGD(params, trainer.lr)
    return Adam(params, trainer.lr)


DEFAULT_GRID_LRS = (1e-4, 5e-4, 1e-3, 5e-3, 1e-2)
DEFAULT_GRID_REGS = (1e-5, 1e-2)
MAX_GRID_POINTS = 10


@dataclass(frozen=True)
class GridSpec:
    """Hyperparameter grid over learning rate and regularization weight.

    Hard-capped at 10 explored configurations; an 11-point grid is rejected
    when the spec is built, before any training happens.
    """

    lrs: tuple = DEFAULT_GRID_LRS
    regs: tuple = DEFAULT_GRID_REGS

    def __post_init__(self):
        n = len(self.lrs) * len(self.regs)
        if n < 1:
            raise ValueError("grid is empty")
        if n > MAX_GRID_POINTS:
            raise ValueError(
                f"grid has {n} points, the exploration budget is {MAX_GRID_POINTS}"
            )
        if any(lr <= 0 for lr in self.lrs) or any(r < 0 for r in self.regs):
            raise ValueError("grid values out of range")

    def points(self):
        return [(lr, reg) for lr in self.lrs for reg in self.regs]


@dataclass
class GridResult:
    lr: float
    reg: float
    config_index: int
    best_epoch: int
    best_value: float
    table: list  # (config_index, lr, reg, epoch, value)


def grid_search(model_factory, grid: GridSpec, data: TrainData,
                trainer: TrainerConfig, eval_fn, pipeline_spec=None) -> GridResult:
    """Train every grid point, select by the evaluation metric.

    eval_fn(model) is called every trainer.eval_every epochs (and at the final
    epoch); the winner is the highest value, ties broken by lower config index
    and then earlier epoch. Each config trains a freshly seeded model.
    """
    from .schema import train_loop

    best = None  # (value, idx, epoch, lr, reg)
    table = []
    for idx, (lr, reg) in enumerate(grid.points()):
        cfg = replace(trainer, lr=lr, reg=reg)
        model = model_factory(seed=cfg.seed)
        spec = pipeline_spec if pipeline_spec is not None else model.pipeline
        result = train_loop(spec, model, data, cfg, eval_fn=eval_fn)
        for epoch, value in result.evals:
            table.append((idx, lr, reg, epoch, value))
            if best is None or value > best[0]:
                best = (value, idx, epoch, lr, reg)
    value, idx, epoch, lr, reg = best
    return GridResult(lr=lr, reg=reg, config_index=idx, best_epoch=epoch,
                      best_value=value, table=table)
