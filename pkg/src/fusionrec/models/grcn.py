"""Graph refinement by content-aware edge gating.

Every train edge (u, i) gets a gate in [0, 1]: the cosine affinity
between the user's modality preference vector and the item's projected
modality feature, clamped at zero, maximized over modalities. An edge
survives if any modality supports it. The sym-normalized adjacency
values are multiplied by the gate and three channels propagate over the
refined graph: the id embeddings plus one channel per modality seeded
with (preference, projected feature) blocks. Channel outputs are
concatenated (Coordinate representation, Early(concat) fusion).

A user whose incident gates are all zero keeps only the layer-zero term
of the propagation mean, i.e. falls back to the id embedding; this is
logged as a warning since it usually signals degenerate features.
"""

import logging

import numpy as np

from ..schema import Coordinate, Early, PipelineSpec
from ..tensor import constant
from .base import (
    RecommenderModel,
    bipartite_structure,
    lightgcn_propagate_weighted,
)

log = logging.getLogger(__name__)


class GRCN(RecommenderModel):
    tag = "grcn"

    def _pipeline_spec(self):
        return PipelineSpec(
            representation=Coordinate(out_dim=self.config.embedding_dim),
            fusion=Early("concat"),
            modalities=self.data.modalities,
        )

    def _build(self, rng):
        d = self.config.embedding_dim
        n_u, n_i = self.data.n_users, self.data.n_items
        self.structure, self.entry_pair, base = bipartite_structure(
            n_u, n_i, self.data.pairs, dtype=self.dtype
        )
        self.base_vals = constant(base, dtype=self.dtype)
        self.id_emb = self._param("rho", "id_emb", rng, (n_u + n_i, d))
        self.pref = {}
        self.proj = {}
        self.feats = {}
        for m in self.data.modalities:
            dim = self.data.features[m].shape[1]
            self.pref[m] = self._param("rho", f"pref_{m}", rng, (n_u, d))
            self.proj[m] = self._param("mu", f"proj_{m}", rng, (dim, d))
            self.feats[m] = constant(self.data.features[m], dtype=self.dtype)

    def _edge_gate(self, tape):
        """Per train pair, max over modalities of relu(cosine affinity)."""
        pairs = self.data.pairs
        gate = None
        for m in self.data.modalities:
            item_proj = tape.matmul(self.feats[m], self.proj[m])
            q = tape.row_gather(self.pref[m], pairs[:, 0])
            f = tape.row_gather(item_proj, pairs[:, 1])
            g = tape.relu(tape.cosine_similarity(q, f))
            gate = g if gate is None else tape.maximum(gate, g)
        return gate

    def refined_edge_values(self, tape):
        """Gated sym-normalized edge values, one per stored structure entry."""
        gate = self._edge_gate(tape)
        self._warn_fully_pruned(gate.data)
        per_entry = tape.row_gather(gate, self.entry_pair)
        return tape.mul(per_entry, self.base_vals)

    def _warn_fully_pruned(self, gate_data):
        users = self.data.pairs[:, 0]
        peak = np.zeros(self.data.n_users)
        np.maximum.at(peak, users, gate_data[:, 0])
        dead = int((peak[np.unique(users)] == 0.0).sum())
        if dead:
            log.warning(
                "%d users have all incident edges gated to zero; their "
                "representations fall back to the id embedding", dead
            )

    def _representations(self, tape, train):
        vals = self.refined_edge_values(tape)
        layers = self.config.layers
        n_u, n_i = self.data.n_users, self.data.n_items
        outs = [lightgcn_propagate_weighted(tape, self.structure, vals,
                                            self.id_emb, layers)]
        for m in self.data.modalities:
            h0 = tape.row_concat([
                self.pref[m], tape.matmul(self.feats[m], self.proj[m])
            ])
            outs.append(lightgcn_propagate_weighted(tape, self.structure,
                                                    vals, h0, layers))
        final = outs[0] if len(outs) == 1 else tape.concat(outs)
        users = tape.row_gather(final, np.arange(n_u))
        items = tape.row_gather(final, n_u + np.arange(n_i))
        return users, items
