"""Self-supervised alignment of dropout views, no negative sampling.

The backbone is plain normalized propagation of id embeddings over the
user-item graph. For each sampled (user, positive) pair the loss builds
an online view (tape dropout, gradients flow) and a target view (dropout
applied outside the tape, gradient-stopped) and aligns them:

    reconstruction: user online view vs item target view
    inter-modality: each projected modality view vs the item target view
    intra-modality: a modality's online view vs its own target view

Alignment of two views a, b is mean over the batch of
0.5 * ||normalize(a) - normalize(b)||^2, which equals 1 - cos(a, b) and
is exactly zero for bitwise-identical views. Negative items in the batch
are ignored (Coordinate representation, Late fusion at the loss level).
"""

import numpy as np

from ..schema import Coordinate, Late, PipelineSpec
from ..tensor import Tape, constant
from .base import RecommenderModel, bipartite_adjacency, lightgcn_propagate


class BM3(RecommenderModel):
    tag = "bm3"

    def _pipeline_spec(self):
        return PipelineSpec(
            representation=Coordinate(out_dim=self.config.embedding_dim),
            fusion=Late("sum"),
            modalities=self.data.modalities,
        )

    def _build(self, rng):
        d = self.config.embedding_dim
        n_u, n_i = self.data.n_users, self.data.n_items
        self.adj = bipartite_adjacency(n_u, n_i, self.data.pairs,
                                       dtype=self.dtype)
        self.user_emb = self._param("rho", "user_emb", rng, (n_u, d))
        self.item_emb = self._param("rho", "item_emb", rng, (n_i, d))
        self.proj = {}
        self.feats = {}
        for m in self.data.modalities:
            dim = self.data.features[m].shape[1]
            self.proj[m] = self._param("mu", f"proj_{m}", rng, (dim, d))
            self.feats[m] = constant(self.data.features[m], dtype=self.dtype)
        self.frozen_views = None

    def _representations(self, tape, train):
        h0 = tape.row_concat([self.user_emb, self.item_emb])
        h = lightgcn_propagate(tape, self.adj, h0, self.config.layers)
        n_u = self.data.n_users
        users = tape.row_gather(h, np.arange(n_u))
        items = tape.row_gather(h, n_u + np.arange(self.data.n_items))
        return users, items

    def _np_mask(self, shape, rng):
        p = self.config.dropout_p
        if p == 0.0:
            return np.ones(shape, dtype=np.float64)
        return (rng.random(shape) >= p).astype(np.float64) / (1.0 - p)

    def _online(self, tape, rows, key, rng):
        if self.frozen_views is not None:
            return tape.mul(rows, constant(self.frozen_views[key + "_mask"],
                                           dtype=self.dtype))
        return tape.dropout(rows, self.config.dropout_p, rng)

    def _target(self, rows_data, key, rng):
        if self.frozen_views is not None:
            return constant(self.frozen_views[key + "_target"],
                            dtype=self.dtype)
        mask = self._np_mask(rows_data.shape, rng)
        return constant(rows_data * mask, dtype=self.dtype)

    @staticmethod
    def _align(tape, a, b):
        """Mean over rows of half the squared distance of normalized views."""
        diff = tape.sub(tape.l2_normalize(a), tape.l2_normalize(b))
        return tape.scale(tape.mean(tape.rowsum(tape.mul(diff, diff))), 0.5)

    def make_frozen_views(self, batch, rng):
        """Pin every dropout mask and target so the loss is a fixed function.

        Gradient checks by finite differences need loss() to be
        deterministic and the stop-gradient targets to stay constant while
        parameters move; training never calls this.
        """
        tape = Tape()
        users_rep, items_rep = self._representations(tape, train=True)
        u_rows = users_rep.data[batch.users]
        i_rows = items_rep.data[batch.pos]
        fv = {
            "user_mask": self._np_mask(u_rows.shape, rng),
            "item_target": i_rows * self._np_mask(i_rows.shape, rng),
        }
        for m in self.data.modalities:
            h = self.data.features[m][batch.pos] @ self.proj[m].data
            fv[f"{m}_mask"] = self._np_mask(h.shape, rng)
            fv[f"{m}_target"] = h * self._np_mask(h.shape, rng)
        self.frozen_views = fv
        return fv

    def loss_terms(self, tape, batch, rng):
        """(reconstruction, inter_align, intra_align) scalar tensors."""
        users_rep, items_rep = self._representations(tape, train=True)
        u_rows = tape.row_gather(users_rep, batch.users)
        i_rows = tape.row_gather(items_rep, batch.pos)
        u_online = self._online(tape, u_rows, "user", rng)
        i_target = self._target(i_rows.data, "item", rng)
        rec = self._align(tape, u_online, i_target)
        inter, intra = None, None
        for m in self.data.modalities:
            f_rows = constant(self.data.features[m][batch.pos],
                              dtype=self.dtype)
            h = tape.matmul(f_rows, self.proj[m])
            m_online = self._online(tape, h, m, rng)
            m_target = self._target(h.data, m, rng)
            inter_m = self._align(tape, m_online, i_target)
            intra_m = self._align(tape, m_online, m_target)
            inter = inter_m if inter is None else tape.add(inter, inter_m)
            intra = intra_m if intra is None else tape.add(intra, intra_m)
        return rec, inter, intra

    def loss(self, tape, batch, rng):
        rec, inter, intra = self.loss_terms(tape, batch, rng)
        return tape.add(rec, tape.add(
            tape.scale(inter, self.config.inter_weight),
            tape.scale(intra, self.config.intra_weight),
        ))
