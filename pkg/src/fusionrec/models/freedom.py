"""Frozen item-item graph plus degree-sensitive edge pruning.

The multimodal item graph is built once from raw features (kNN graphs
merged with fixed weights, uniform unless configured) and never
trained. Each epoch the user-item graph is resampled: an edge (u, i)
is kept with probability proportional to (deg_u * deg_i)^(-1/2) and
the pruned graph is re-normalized; evaluation always uses the full
graph. Item representations add the item-graph propagation of the id
embeddings onto the user-item propagation output.

The loss is two BPR terms (Coordinate representation, Late fusion):
the usual one over full representations plus, weighted by mm_weight,
the mean over modalities of BPR on scores of the user representation
against projected item features. The projections receive gradient only
through that second branch.
"""

import numpy as np

from ..schema import Coordinate, Late, PipelineSpec
from ..tensor import SparseMatrix, constant
from .. import training as tr
from .base import (
    RecommenderModel,
    bipartite_adjacency,
    gather_pair_scores,
    lightgcn_propagate,
)
from .lattice import lattice_build


def edge_keep_probabilities(pairs, n_users, n_items) -> np.ndarray:
    """Normalized keep probabilities, inverse sqrt of endpoint degrees."""
    pairs = np.asarray(pairs, dtype=np.int64)
    deg_u = np.bincount(pairs[:, 0], minlength=n_users).astype(np.float64)
    deg_i = np.bincount(pairs[:, 1], minlength=n_items).astype(np.float64)
    w = 1.0 / np.sqrt(deg_u[pairs[:, 0]] * deg_i[pairs[:, 1]])
    return w / w.sum()


class FREEDOM(RecommenderModel):
    tag = "freedom"

    def _pipeline_spec(self):
        return PipelineSpec(
            representation=Coordinate(out_dim=self.config.embedding_dim),
            fusion=Late("sum"),
            modalities=self.data.modalities,
        )

    def _build(self, rng):
        cfg = self.config
        if cfg.prune_ratio >= 1.0:
            raise ValueError("prune_ratio=1 would drop every train edge")
        if cfg.knn_k >= self.data.n_items:
            raise ValueError(
                f"knn_k={cfg.knn_k} must be < n_items={self.data.n_items}"
            )
        d = cfg.embedding_dim
        n_u, n_i = self.data.n_users, self.data.n_items
        self.user_emb = self._param("rho", "user_emb", rng, (n_u, d))
        self.item_emb = self._param("rho", "item_emb", rng, (n_i, d))
        self.proj = {}
        self.feats = {}
        for m in self.data.modalities:
            dim = self.data.features[m].shape[1]
            self.proj[m] = self._param("mu", f"proj_{m}", rng, (dim, d))
            self.feats[m] = constant(self.data.features[m], dtype=self.dtype)
        weights = None
        if cfg.modality_weights is not None:
            if len(cfg.modality_weights) != len(self.data.modalities):
                raise ValueError(
                    f"{len(cfg.modality_weights)} modality_weights for "
                    f"{len(self.data.modalities)} modalities"
                )
            weights = dict(zip(self.data.modalities, cfg.modality_weights))
        self.graph = lattice_build(self.data.features, cfg.knn_k, blend=1.0,
                                   weights=weights)
        self.item_graph = SparseMatrix.from_dense(self.graph.merged(),
                                                  dtype=self.dtype)
        self.full_adj = bipartite_adjacency(n_u, n_i, self.data.pairs,
                                            dtype=self.dtype)
        self.keep_probs = edge_keep_probabilities(self.data.pairs, n_u, n_i)
        self._train_adj = None

    def on_epoch_start(self, rng, epoch):
        """Resample the pruned user-item graph for this epoch's batches."""
        m = self.data.pairs.shape[0]
        if self.config.prune_ratio == 0.0:
            self._train_adj = self.full_adj
            return
        keep_n = max(1, int(round((1.0 - self.config.prune_ratio) * m)))
        kept = rng.choice(m, size=keep_n, replace=False, p=self.keep_probs)
        self._train_adj = bipartite_adjacency(
            self.data.n_users, self.data.n_items,
            self.data.pairs[np.sort(kept)], dtype=self.dtype,
        )

    def _representations(self, tape, train):
        adj = self._train_adj if train and self._train_adj is not None \
            else self.full_adj
        n_u, n_i = self.data.n_users, self.data.n_items
        h0 = tape.row_concat([self.user_emb, self.item_emb])
        z = lightgcn_propagate(tape, adj, h0, self.config.layers)
        users = tape.row_gather(z, np.arange(n_u))
        z_items = tape.row_gather(z, n_u + np.arange(n_i))
        h = self.item_emb
        for _ in range(self.config.item_graph_layers):
            h = tape.spmm(self.item_graph, h)
        items = tape.add(z_items, h)
        return users, items

    def loss(self, tape, batch, rng):
        users_rep, items_rep = self._representations(tape, train=True)
        pos = gather_pair_scores(tape, users_rep, items_rep,
                                 batch.users, batch.pos)
        neg = gather_pair_scores(tape, users_rep, items_rep,
                                 batch.users, batch.neg)
        total = tr.bpr_loss(tape, pos, neg)
        if self.config.mm_weight == 0.0:
            return total
        u_rows = tape.row_gather(users_rep, batch.users)
        mm = None
        for m in self.data.modalities:
            item_mm = tape.matmul(self.feats[m], self.proj[m])
            pos_mm = tape.rowsum(tape.mul(
                u_rows, tape.row_gather(item_mm, batch.pos)))
            neg_mm = tape.rowsum(tape.mul(
                u_rows, tape.row_gather(item_mm, batch.neg)))
            term = tr.bpr_loss(tape, pos_mm, neg_mm)
            mm = term if mm is None else tape.add(mm, term)
        scale = self.config.mm_weight / len(self.data.modalities)
        return tape.add(total, tape.scale(mm, scale))
