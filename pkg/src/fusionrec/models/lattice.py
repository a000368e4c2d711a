"""Item-item structure learning blended with frozen feature graphs.

Per modality, a cosine kNN graph over raw item features (built once)
and a second graph learned from projected features per forward pass are
blended A = blend * initial + (1 - blend) * learned. Modality graphs
are then merged by a softmax-weighted sum with learned logits
(Coordinate representation, Early(weighted_sum) fusion at graph level).
Item id embeddings are propagated over the merged graph and the
normalized result is added back onto the id embedding; users keep plain
id embeddings.

The top-k neighbor selection inside the learned graph is a hard,
non-differentiable choice; `frozen_masks` pins it to a fixed support so
gradient checks differentiate a fixed function.
"""

import numpy as np

from ..schema import Coordinate, Early, PipelineSpec, early_fuse
from ..tensor import constant
from .base import ItemItemGraph, RecommenderModel, knn_graph

ROW_SUM_FLOOR = 1e-12


def lattice_build(features: dict, k: int, blend: float,
                  weights: dict = None) -> ItemItemGraph:
    """Frozen per-modality kNN graphs plus the merge recipe.

    Cosine similarity is scale-invariant, so unit-normalizing rows inside
    knn_graph covers the standardization the initial graphs assume.
    """
    if not features:
        raise ValueError("lattice_build needs at least one modality")
    matrices = {m: knn_graph(f, k) for m, f in sorted(features.items())}
    return ItemItemGraph(matrices=matrices, k=k, blend=blend,
                         weights=weights, frozen=True)


class LATTICE(RecommenderModel):
    tag = "lattice"

    def _pipeline_spec(self):
        return PipelineSpec(
            representation=Coordinate(out_dim=self.config.embedding_dim),
            fusion=Early("weighted_sum"),
            modalities=self.data.modalities,
        )

    def _build(self, rng):
        cfg = self.config
        if cfg.knn_k >= self.data.n_items:
            raise ValueError(
                f"knn_k={cfg.knn_k} must be < n_items={self.data.n_items}"
            )
        d = cfg.embedding_dim
        self.user_emb = self._param("rho", "user_emb", rng,
                                    (self.data.n_users, d))
        self.item_emb = self._param("rho", "item_emb", rng,
                                    (self.data.n_items, d))
        self.merge_logits = self._param(
            "gamma", "merge_logits", rng, (1, len(self.data.modalities)),
            scale=0.0,
        )
        self.graph = lattice_build(self.data.features, cfg.knn_k, cfg.blend)
        self.initial = {
            m: constant(g, dtype=self.dtype)
            for m, g in self.graph.matrices.items()
        }
        self.proj = {}
        self.feats = {}
        for m in self.data.modalities:
            dim = self.data.features[m].shape[1]
            self.proj[m] = self._param("mu", f"proj_{m}", rng, (dim, d))
            self.feats[m] = constant(self.data.features[m], dtype=self.dtype)
        self.frozen_masks = None

    def _topk_mask(self, sims: np.ndarray) -> np.ndarray:
        """0/1 support of the k best off-diagonal entries per row."""
        n = sims.shape[0]
        scored = sims.copy()
        np.fill_diagonal(scored, -np.inf)
        ids = np.arange(n)
        mask = np.zeros_like(scored)
        for r in range(n):
            keep = np.lexsort((ids, -scored[r]))[:self.config.knn_k]
            mask[r, keep] = 1.0
        return mask

    def _learned_graph(self, tape, m):
        unit = tape.l2_normalize(tape.matmul(self.feats[m], self.proj[m]))
        sims = tape.matmul_nt(unit, unit)
        if self.frozen_masks is not None:
            mask = self.frozen_masks[m]
        else:
            mask = self._topk_mask(sims.data)
        kept = tape.relu(tape.mul(sims, constant(mask, dtype=self.dtype)))
        sums = tape.rowsum(kept)
        floor = constant(np.full((self.data.n_items, 1), ROW_SUM_FLOOR),
                         dtype=self.dtype)
        return tape.div(kept, tape.maximum(sums, floor))

    def merged_graph(self, tape):
        """Blend initial/learned per modality, then softmax-weighted merge."""
        parts = []
        for m in self.data.modalities:
            if self.config.blend >= 1.0:
                parts.append(self.initial[m])
                continue
            learned = self._learned_graph(tape, m)
            if self.config.blend <= 0.0:
                parts.append(learned)
            else:
                parts.append(tape.add(
                    tape.scale(self.initial[m], self.config.blend),
                    tape.scale(learned, 1.0 - self.config.blend),
                ))
        return early_fuse(tape, parts, "weighted_sum", self.merge_logits)

    def _representations(self, tape, train):
        merged = self.merged_graph(tape)
        h = self.item_emb
        for _ in range(self.config.item_graph_layers):
            h = tape.matmul(merged, h)
        items = tape.add(self.item_emb, tape.l2_normalize(h))
        return self.user_emb, items
