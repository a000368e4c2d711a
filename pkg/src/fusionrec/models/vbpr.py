"""Matrix factorization with per-modality feature branches.

Score is the id-embedding inner product plus, per modality, the inner
product of a modality-specific user embedding with the projected item
feature. Modality scores are summed after the per-modality products, so
the pipeline reads Coordinate representation with Late(sum) fusion. An
optional item bias can be enabled; it is off by default since a
user-constant shift never changes that user's top-k order.
"""

import numpy as np

from ..schema import Coordinate, Late, PipelineSpec
from ..tensor import constant
from .base import RecommenderModel


class VBPR(RecommenderModel):
    tag = "vbpr"

    def _pipeline_spec(self):
        return PipelineSpec(
            representation=Coordinate(out_dim=self.config.embedding_dim),
            fusion=Late("sum"),
            modalities=self.data.modalities,
        )

    def _build(self, rng):
        d = self.config.embedding_dim
        n_u, n_i = self.data.n_users, self.data.n_items
        self.user_emb = self._param("rho", "user_emb", rng, (n_u, d))
        self.item_emb = self._param("rho", "item_emb", rng, (n_i, d))
        self.mod_user = {}
        self.proj = {}
        self.feats = {}
        for m in self.data.modalities:
            dim = self.data.features[m].shape[1]
            self.mod_user[m] = self._param("rho", f"user_{m}", rng, (n_u, d))
            self.proj[m] = self._param("mu", f"proj_{m}", rng, (dim, d))
            self.feats[m] = constant(self.data.features[m], dtype=self.dtype)
        if self.config.with_bias:
            self.item_bias = self._param("rho", "item_bias", rng, (n_i, 1),
                                         scale=0.0)

    def _representations(self, tape, train):
        u_parts = [self.user_emb]
        i_parts = [self.item_emb]
        for m in self.data.modalities:
            u_parts.append(self.mod_user[m])
            i_parts.append(tape.matmul(self.feats[m], self.proj[m]))
        if self.config.with_bias:
            ones = constant(np.ones((self.data.n_users, 1)), dtype=self.dtype)
            u_parts.append(ones)
            i_parts.append(self.item_bias)
        if len(u_parts) == 1:
            return u_parts[0], i_parts[0]
        return tape.concat(u_parts), tape.concat(i_parts)
