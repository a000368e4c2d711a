"""Shared model plumbing: configs, graph builders, census, checkpoints.

Every recommender here is a pair of representation maps (users, items) ->
R^d scored by an inner product, trained on sampled triples. Subclasses
declare their pipeline classification, allocate parameters into the
four-group census, and implement _representations(); scoring and the
default BPR loss live on the base class.
"""

import json
import os
from dataclasses import dataclass, asdict

import numpy as np

from ..tensor import SparseMatrix, Tape, Tensor, parameter, sym_normalize
from ..schema import ParameterSet, PipelineSpec, validate
from .. import training as tr

MODEL_TAGS = ("vbpr", "mmgcn", "grcn", "lattice", "bm3", "freedom")
ACTIVATIONS = ("leaky_relu", "linear")


@dataclass
class ModelConfig:
    """Hyperparameters for any of the six recommenders.

    Defaults are fixed, documented choices, not tuned values; every field
    is overridable and the learning rate / regularization knobs live in
    TrainerConfig instead.
    """

    tag: str
    embedding_dim: int = 64
    layers: int = 2              # user-item propagation rounds
    item_graph_layers: int = 1   # item-item propagation rounds
    knn_k: int = 10
    blend: float = 0.5           # lambda between initial and learned graph
    dropout_p: float = 0.5
    prune_ratio: float = 0.8     # fraction of user-item edges dropped per epoch
    mm_weight: float = 0.1       # weight of the modality score loss branch
    inter_weight: float = 1.0
    intra_weight: float = 1.0
    modality_weights: tuple = None  # fixed merge weights; None = uniform
    use_id_embeddings: bool = True
    with_bias: bool = False
    activation: str = "leaky_relu"
    leaky_slope: float = 0.2

    def __post_init__(self):
        if self.tag not in MODEL_TAGS:
            raise ValueError(f"unknown tag {self.tag!r}, expected {MODEL_TAGS}")
        if self.embedding_dim < 1:
            raise ValueError(f"embedding_dim must be >= 1, got {self.embedding_dim}")
        if self.layers < 0:
            raise ValueError(f"layers must be >= 0, got {self.layers}")
        if self.item_graph_layers < 0:
            raise ValueError("item_graph_layers must be >= 0")
        if self.knn_k < 1:
            raise ValueError(f"knn_k must be >= 1, got {self.knn_k}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError(f"dropout_p must be in [0, 1), got {self.dropout_p}")
        if not 0.0 <= self.blend <= 1.0:
            raise ValueError(f"blend must be in [0, 1], got {self.blend}")
        if not 0.0 <= self.prune_ratio <= 1.0:
            raise ValueError(f"prune_ratio must be in [0, 1], got {self.prune_ratio}")
        if self.mm_weight < 0 or self.inter_weight < 0 or self.intra_weight < 0:
            raise ValueError("loss weights must be nonnegative")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation {self.activation!r} not in {ACTIVATIONS}")
        if self.modality_weights is not None:
            w = tuple(float(x) for x in self.modality_weights)
            if any(x < 0 for x in w) or sum(w) <= 0:
                raise ValueError("modality_weights must be nonnegative, sum > 0")
            self.modality_weights = w


@dataclass
class ModelData:
    """Everything a model consumes: the train graph plus item features."""

    n_users: int
    n_items: int
    pairs: np.ndarray          # (n, 2) int64 train interactions
    features: dict             # modality -> (n_items, dim) float matrix

    def __post_init__(self):
        self.pairs = np.asarray(self.pairs, dtype=np.int64)
        if self.pairs.ndim != 2 or self.pairs.shape[1] != 2:
            raise ValueError(f"pairs must be (n, 2), got {self.pairs.shape}")
        if self.pairs.size:
            if self.pairs[:, 0].min() < 0 or self.pairs[:, 0].max() >= self.n_users:
                raise ValueError("pair user id out of range")
            if self.pairs[:, 1].min() < 0 or self.pairs[:, 1].max() >= self.n_items:
                raise ValueError("pair item id out of range")
        if not self.features:
            raise ValueError("at least one modality feature matrix required")
        for m, f in self.features.items():
            f = np.asarray(f)
            if f.shape[0] != self.n_items:
                raise ValueError(
                    f"{m}: feature rows {f.shape[0]} != n_items {self.n_items}"
                )
            if not np.isfinite(f).all():
                raise ValueError(f"{m}: non-finite feature values")
            self.features[m] = f

    @property
    def modalities(self):
        return tuple(sorted(self.features))

    @classmethod
    def from_split(cls, split, store):
        feats = {m: store.matrix(m) for m in store.modalities}
        return cls(split.dataset.n_users, split.dataset.n_items,
                   split.train, feats)


# ------------------------------------------------------------ graph builders

def bipartite_adjacency(n_users, n_items, pairs, dtype=np.float32) -> SparseMatrix:
    """Symmetrically normalized user-item adjacency over n_users+n_items nodes."""
    pairs = np.asarray(pairs, dtype=np.int64)
    if pairs.shape[0] == 0:
        raise ValueError("cannot build adjacency from zero interactions")
    n = n_users + n_items
    rows = np.concatenate([pairs[:, 0], pairs[:, 1] + n_users])
    cols = np.concatenate([pairs[:, 1] + n_users, pairs[:, 0]])
    ones = np.ones(rows.size, dtype=dtype)
    return sym_normalize(SparseMatrix((n, n), rows, cols, ones, dtype=dtype))


def bipartite_structure(n_users, n_items, pairs, dtype=np.float32):
    """Edge structure for per-edge reweighting.

    Returns (structure, entry_pair, base) where structure holds both
    directions of every train edge, entry_pair maps each stored entry back
    to its source pair index, and base carries the sym-normalized values
    as an (nnz, 1) column.
    """
    pairs = np.asarray(pairs, dtype=np.int64)
    m = pairs.shape[0]
    if m == 0:
        raise ValueError("cannot build structure from zero interactions")
    n = n_users + n_items
    rows = np.concatenate([pairs[:, 0], pairs[:, 1] + n_users])
    cols = np.concatenate([pairs[:, 1] + n_users, pairs[:, 0]])
    entry_pair = np.concatenate([np.arange(m), np.arange(m)])
    order = np.lexsort((cols, rows))
    structure = SparseMatrix((n, n), rows[order], cols[order],
                             np.ones(2 * m, dtype=dtype), dtype=dtype)
    base = sym_normalize(structure).vals.astype(dtype)[:, None]
    return structure, entry_pair[order], base


def knn_graph(feats: np.ndarray, k: int) -> np.ndarray:
    """Top-k cosine neighbor graph, self excluded, kept values row-normalized.

    Ties in similarity pick the lower item id. Negative kept similarities
    are clamped to zero before normalization; a row whose kept values are
    all nonpositive stays all-zero.
    """
    feats = np.asarray(feats, dtype=np.float64)
    n = feats.shape[0]
    if k >= n:
        raise ValueError(f"knn_k={k} must be < n_items={n}")
    norms = np.linalg.norm(feats, axis=1, keepdims=True)
    unit = np.divide(feats, norms, out=np.zeros_like(feats), where=norms > 0)
    sim = unit @ unit.T
    np.fill_diagonal(sim, -np.inf)
    ids = np.arange(n)
    graph = np.zeros((n, n), dtype=np.float64)
    for r in range(n):
        keep = np.lexsort((ids, -sim[r]))[:k]
        graph[r, keep] = sim[r, keep]
    np.maximum(graph, 0.0, out=graph)
    sums = graph.sum(axis=1, keepdims=True)
    np.divide(graph, sums, out=graph, where=sums > 0)
    return graph


@dataclass(frozen=True)
class ItemItemGraph:
    """Per-modality row-stochastic item neighbor graphs plus merge recipe."""

    matrices: dict            # modality -> (n, n) ndarray, row-stochastic
    k: int
    blend: float              # share of the initial graph in the final blend
    weights: dict = None      # fixed merge weights; None = learned downstream
    frozen: bool = True

    def merged(self) -> np.ndarray:
        """Weighted sum across modalities using the fixed weights."""
        mods = sorted(self.matrices)
        if self.weights is None:
            w = {m: 1.0 / len(mods) for m in mods}
        else:
            total = sum(self.weights[m] for m in mods)
            w = {m: self.weights[m] / total for m in mods}
        out = np.zeros_like(self.matrices[mods[0]])
        for m in mods:
            out += w[m] * self.matrices[m]
        return out


# ------------------------------------------------------- tape-level helpers

def lightgcn_propagate(tape: Tape, adj: SparseMatrix, h0: Tensor, layers: int) -> Tensor:
    """Mean of h0..hL under repeated normalized neighborhood averaging."""
    if layers == 0:
        return h0
    acc, h = h0, h0
    for _ in range(layers):
        h = tape.spmm(adj, h)
        acc = tape.add(acc, h)
    return tape.scale(acc, 1.0 / (layers + 1))


def lightgcn_propagate_weighted(tape, structure, vals, h0, layers):
    """lightgcn_propagate with edge values supplied as an (nnz, 1) tensor."""
    if layers == 0:
        return h0
    acc, h = h0, h0
    for _ in range(layers):
        h = tape.spmm_weighted(structure, vals, h)
        acc = tape.add(acc, h)
    return tape.scale(acc, 1.0 / (layers + 1))


def gather_pair_scores(tape: Tape, users_rep: Tensor, items_rep: Tensor,
                       users, items) -> Tensor:
    """Inner products of matched (user, item) representation rows."""
    u = tape.row_gather(users_rep, users)
    v = tape.row_gather(items_rep, items)
    return tape.rowsum(tape.mul(u, v))


# ------------------------------------------------------------- model base

class RecommenderModel:
    """Common census, loss, and scoring scaffolding.

    Subclasses set `tag`, return their classification from _pipeline_spec(),
    allocate parameters in _build(), and produce full user/item
    representation tensors from _representations(tape, train).
    """

    tag = None

    def __init__(self, config: ModelConfig, data: ModelData, seed=0,
                 dtype=np.float32):
        if config.tag != self.tag:
            raise ValueError(f"config tag {config.tag!r} does not match {self.tag!r}")
        self.config = config
        self.data = data
        self.dtype = dtype
        self._params = ParameterSet()
        self.spec = validate(self._pipeline_spec())
        self.pipeline = self.spec
        self._build(np.random.default_rng(seed))

    # -- subclass hooks

    def _pipeline_spec(self) -> PipelineSpec:
        raise NotImplementedError

    def _build(self, rng):
        raise NotImplementedError

    def _representations(self, tape: Tape, train: bool):
        """Return (users (n_u, d'), items (n_i, d')) tensors on the tape."""
        raise NotImplementedError

    # -- shared plumbing

    def _param(self, group, name, rng, shape, scale=0.1):
        t = parameter(rng.normal(0.0, scale, size=shape), dtype=self.dtype)
        return self._params.add(group, name, t)

    def params(self) -> ParameterSet:
        return self._params

    def tensors(self):
        return self._params.tensors()

    def zero_grads(self):
        self._params.zero_grads()

    def loss(self, tape: Tape, batch, rng) -> Tensor:
        users_rep, items_rep = self._representations(tape, train=True)
        pos = gather_pair_scores(tape, users_rep, items_rep,
                                 batch.users, batch.pos)
        neg = gather_pair_scores(tape, users_rep, items_rep,
                                 batch.users, batch.neg)
        return tr.bpr_loss(tape, pos, neg)

    def score_users(self, users) -> np.ndarray:
        """Dense score block (len(users), n_items), gradient-free."""
        tape = Tape()
        users_rep, items_rep = self._representations(tape, train=False)
        u = users_rep.data[np.asarray(users, dtype=np.int64)]
        return u @ items_rep.data.T


# ------------------------------------------------------------- checkpoints

def save_checkpoint(model: RecommenderModel, out_dir):
    """JSON manifest (config + group shapes) plus one raw f32 blob per tensor."""
    os.makedirs(out_dir, exist_ok=True)
    named = model.params().named()
    census = model.params().census()
    manifest = {
        "tag": model.tag,
        "config": asdict(model.config),
        "groups": {
            g: {name: list(named[name].shape) for name in names}
            for g, names in census.items()
        },
    }
    with open(os.path.join(out_dir, "checkpoint.json"), "w",
              encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    for name, t in named.items():
        blob = t.data.astype("<f4").tobytes()
        with open(os.path.join(out_dir, f"{name}.bin"), "wb") as fh:
            fh.write(blob)


def load_checkpoint(model: RecommenderModel, out_dir):
    """Restore parameter values written by save_checkpoint, verifying shapes."""
    with open(os.path.join(out_dir, "checkpoint.json"), encoding="utf-8") as fh:
        manifest = json.load(fh)
    if manifest["tag"] != model.tag:
        raise ValueError(f"checkpoint tag {manifest['tag']!r} != model {model.tag!r}")
    named = model.params().named()
    stored = {name: tuple(shape)
              for shapes in manifest["groups"].values()
              for name, shape in shapes.items()}
    if set(stored) != set(named):
        missing = sorted(set(named) ^ set(stored))
        raise ValueError(f"checkpoint parameter names differ: {missing}")
    for name, t in named.items():
        if stored[name] != t.shape:
            raise ValueError(
                f"{name}: checkpoint shape {stored[name]} != model {t.shape}"
            )
        raw = np.fromfile(os.path.join(out_dir, f"{name}.bin"), dtype="<f4")
        if raw.size != t.data.size:
            raise ValueError(f"{name}: blob has {raw.size} values, "
                             f"expected {t.data.size}")
        t.data[...] = raw.reshape(t.shape).astype(t.data.dtype)
    return model
