"""Model tests: hand-computed cases, structural collapses, gradient checks."""

import logging

import numpy as np
import pytest

import fusionrec.tensor as T
import fusionrec.training as tr
from fusionrec.models import (
    BM3,
    FREEDOM,
    GRCN,
    LATTICE,
    MMGCN,
    VBPR,
    ItemItemGraph,
    ModelConfig,
    ModelData,
    bipartite_adjacency,
    build_model,
    knn_graph,
    lattice_build,
    load_checkpoint,
    save_checkpoint,
)
from fusionrec.models.freedom import edge_keep_probabilities
from fusionrec.schema import Coordinate, Early, Late
from fdcheck import assert_gradients_match
from oracles import knn_bruteforce


def small_data(n_users=5, n_items=8, seed=0, mods=("textual", "visual")):
    rng = np.random.default_rng(seed)
    pairs = []
    for u in range(n_users):
        for i in rng.choice(n_items, size=3, replace=False):
            pairs.append((u, int(i)))
    feats = {}
    dims = {"visual": 3, "textual": 2, "audio": 4}
    for m in mods:
        feats[m] = rng.normal(size=(n_items, dims[m]))
    return ModelData(n_users, n_items, np.array(pairs), feats)


def fixed_batch(data, size=6, seed=3):
    tdata = tr.TrainData.from_pairs(data.n_users, data.n_items, data.pairs)
    return tr.sample_triples(tdata, size, np.random.default_rng(seed))


# ------------------------------------------------------------------- config

def test_config_rejects_bad_fields():
    for kwargs in (
        {"tag": "nope"},
        {"tag": "vbpr", "embedding_dim": 0},
        {"tag": "mmgcn", "layers": -1},
        {"tag": "lattice", "knn_k": 0},
        {"tag": "bm3", "dropout_p": 1.0},
        {"tag": "lattice", "blend": 1.5},
        {"tag": "freedom", "prune_ratio": -0.1},
        {"tag": "mmgcn", "activation": "tanh"},
        {"tag": "freedom", "modality_weights": (-1.0, 2.0)},
    ):
        with pytest.raises(ValueError):
            ModelConfig(**kwargs)


def test_config_tag_must_match_class():
    data = small_data()
    with pytest.raises(ValueError, match="tag"):
        VBPR(ModelConfig(tag="bm3"), data)


def test_model_data_validation():
    feats = {"visual": np.zeros((4, 2))}
    with pytest.raises(ValueError, match="out of range"):
        ModelData(2, 4, np.array([[0, 5]]), dict(feats))
    with pytest.raises(ValueError, match="rows"):
        ModelData(2, 5, np.array([[0, 1]]), dict(feats))
    with pytest.raises(ValueError, match="non-finite"):
        ModelData(2, 4, np.array([[0, 1]]), {"visual": np.full((4, 2), np.nan)})
    with pytest.raises(ValueError, match="modality"):
        ModelData(2, 4, np.array([[0, 1]]), {})


def test_build_model_rejects_unknown_tag():
    with pytest.raises(ValueError, match="unknown model tag"):
        cfg = ModelConfig(tag="vbpr")
        cfg.tag = "unknown"
        build_model(cfg, small_data())


# ----------------------------------------------------------- classification

CLASSIFICATION = {
    "vbpr": (Coordinate, Late, "sum"),
    "mmgcn": (Coordinate, Early, "sum"),
    "grcn": (Coordinate, Early, "concat"),
    "lattice": (Coordinate, Early, "weighted_sum"),
    "bm3": (Coordinate, Late, "sum"),
    "freedom": (Coordinate, Late, "sum"),
}


def test_pipeline_classification_table():
    data = small_data()
    for tag, (rep_cls, fus_cls, op) in CLASSIFICATION.items():
        model = build_model(ModelConfig(tag=tag, embedding_dim=4, knn_k=2),
                            data, seed=1)
        assert isinstance(model.spec.representation, rep_cls), tag
        assert isinstance(model.spec.fusion, fus_cls), tag
        assert model.spec.fusion.op == op, tag
        assert model.spec.modalities == data.modalities


def test_census_covers_every_tensor_once():
    data = small_data()
    for tag in CLASSIFICATION:
        model = build_model(ModelConfig(tag=tag, embedding_dim=4, knn_k=2),
                            data, seed=1)
        census = model.params().census()
        names = [n for g in census.values() for n in g]
        assert len(names) == len(set(names)) == len(model.tensors())


# ---------------------------------------------------------------------- vbpr

def test_vbpr_hand_score():
    data = ModelData(1, 1, np.array([[0, 0]]), {"visual": np.array([[4.0]])})
    model = VBPR(ModelConfig(tag="vbpr", embedding_dim=1), data, seed=0)
    model.user_emb.data[:] = 2.0
    model.item_emb.data[:] = 3.0
    model.mod_user["visual"].data[:] = 1.0
    model.proj["visual"].data[:] = 1.0  # E_m f = 1 * 4 = 4
    assert model.score_users([0])[0, 0] == pytest.approx(10.0)


def test_vbpr_zeroed_modalities_equal_mf():
    data = small_data()
    model = VBPR(ModelConfig(tag="vbpr", embedding_dim=4), data, seed=2)
    for m in data.modalities:
        model.mod_user[m].data[:] = 0.0
        model.proj[m].data[:] = 0.0
    got = model.score_users(range(data.n_users))
    want = model.user_emb.data @ model.item_emb.data.T
    np.testing.assert_array_equal(got, want)


def test_vbpr_scaling_one_modality_removes_its_term():
    data = small_data()
    model = VBPR(ModelConfig(tag="vbpr", embedding_dim=4), data, seed=2)
    full = model.score_users(range(data.n_users))
    proj = model.data.features["textual"] @ model.proj["textual"].data
    term = model.mod_user["textual"].data @ proj.T
    model.mod_user["textual"].data[:] = 0.0
    reduced = model.score_users(range(data.n_users))
    np.testing.assert_allclose(full - reduced, term, rtol=1e-5, atol=1e-6)


def test_vbpr_bias_flag():
    data = small_data()
    model = VBPR(ModelConfig(tag="vbpr", embedding_dim=4, with_bias=True),
                 data, seed=2, dtype=np.float64)
    assert "item_bias" in model.params().census()["rho"]
    base = model.score_users([0])
    model.item_bias.data[:, 0] += 1.0
    np.testing.assert_allclose(model.score_users([0]), base + 1.0, rtol=1e-12)


# --------------------------------------------------------------------- mmgcn

def test_mmgcn_single_edge_hand_propagation():
    data = ModelData(1, 1, np.array([[0, 0]]),
                     {"visual": np.array([[1.0, 0.0]])})
    cfg = ModelConfig(tag="mmgcn", embedding_dim=2, layers=1,
                      activation="linear")
    model = MMGCN(cfg, data, seed=0, dtype=np.float64)
    model.user_emb["visual"].data[:] = [[1.0, 2.0]]
    model.id_emb["visual"].data[:] = [[5.0, 6.0], [7.0, 8.0]]
    model.proj["visual"].data[:] = np.eye(2)
    model.w1["visual"][0].data[:] = np.eye(2)
    model.w2["visual"][0].data[:] = np.eye(2)
    tape = T.Tape()
    users, items = model._representations(tape, train=False)
    # aggregate for the item node is its single neighbor's h0 with weight 1
    np.testing.assert_allclose(items.data, [[1 + 7 + 1, 2 + 8 + 0]])
    np.testing.assert_allclose(users.data, [[1 + 5 + 1, 0 + 6 + 2]])


def test_mmgcn_layers_zero_is_summed_per_modality_mf():
    data = small_data()
    model = MMGCN(ModelConfig(tag="mmgcn", embedding_dim=4, layers=0),
                  data, seed=3, dtype=np.float64)
    got = model.score_users(range(data.n_users))
    # Early(sum) fusion: representations are summed across modalities first,
    # so the collapse is an MF over the summed embeddings
    users = np.zeros((data.n_users, 4))
    items = np.zeros((data.n_items, 4))
    for m in data.modalities:
        users += model.user_emb[m].data
        items += data.features[m] @ model.proj[m].data
    np.testing.assert_allclose(got, users @ items.T, rtol=1e-10)


def test_mmgcn_layers_zero_without_id_embeddings_errors():
    with pytest.raises(ValueError, match="use_id_embeddings"):
        MMGCN(ModelConfig(tag="mmgcn", layers=0, use_id_embeddings=False),
              small_data())


def test_mmgcn_dropping_modality_drops_census_entries():
    both = MMGCN(ModelConfig(tag="mmgcn", embedding_dim=4),
                 small_data(mods=("textual", "visual")), seed=0)
    one = MMGCN(ModelConfig(tag="mmgcn", embedding_dim=4),
                small_data(mods=("textual",)), seed=0)
    names_both = set(both.params().named())
    names_one = set(one.params().named())
    assert names_one < names_both
    assert all("visual" in n for n in names_both - names_one)


# ---------------------------------------------------------------------- grcn

def grcn_hand_model():
    feats = {"visual": np.array([[1.0, 0.0], [0.0, 1.0]])}
    data = ModelData(2, 2, np.array([[0, 0], [1, 1]]), feats)
    cfg = ModelConfig(tag="grcn", embedding_dim=2, layers=1)
    model = GRCN(cfg, data, seed=0, dtype=np.float64)
    model.proj["visual"].data[:] = np.eye(2)
    model.pref["visual"].data[:] = [[2.0, 0.0], [-3.0, 0.0]]
    return model


def test_grcn_hand_refined_adjacency(caplog):
    model = grcn_hand_model()
    # degrees are all 1, so base values are 1; gates are cos clamped at 0:
    # edge (u0, i0) aligns perfectly (gate 1), edge (u1, i1) is orthogonal
    # after clamping (gate 0)
    tape = T.Tape()
    with caplog.at_level(logging.WARNING):
        vals = model.refined_edge_values(tape)
    refined = dict(zip(zip(model.structure.rows.tolist(),
                           model.structure.cols.tolist()),
                       vals.data[:, 0].tolist()))
    assert refined[(0, 2)] == pytest.approx(1.0)
    assert refined[(2, 0)] == pytest.approx(1.0)
    assert refined[(1, 3)] == pytest.approx(0.0)
    assert refined[(3, 1)] == pytest.approx(0.0)
    assert "gated to zero" in caplog.text


def test_grcn_gate_of_one_matches_unrefined_propagation():
    data = small_data()
    cfg = ModelConfig(tag="grcn", embedding_dim=4, layers=2)
    model = GRCN(cfg, data, seed=4, dtype=np.float64)
    n_pairs = data.pairs.shape[0]
    model._edge_gate = lambda tape: T.constant(
        np.ones((n_pairs, 1)), dtype=np.float64)
    got = model.score_users(range(data.n_users))

    adj = bipartite_adjacency(data.n_users, data.n_items, data.pairs,
                              dtype=np.float64).to_dense()

    def propagate(h0):
        acc, h = h0.copy(), h0
        for _ in range(cfg.layers):
            h = adj @ h
            acc += h
        return acc / (cfg.layers + 1)

    blocks = [propagate(model.id_emb.data)]
    for m in data.modalities:
        h0 = np.vstack([model.pref[m].data,
                        data.features[m] @ model.proj[m].data])
        blocks.append(propagate(h0))
    final = np.hstack(blocks)
    want = final[:data.n_users] @ final[data.n_users:].T
    np.testing.assert_allclose(got, want, rtol=1e-9)


# ------------------------------------------------------------------- lattice

def test_knn_graph_three_points_on_a_line():
    feats = np.array([[1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])
    graph = knn_graph(feats, k=1)
    # endpoints both pick the middle point; the middle point's two
    # similarities tie and resolve to the lower id
    np.testing.assert_allclose(
        graph, [[0, 1, 0], [1, 0, 0], [0, 1, 0]], atol=1e-12)


def test_knn_graph_matches_bruteforce():
    rng = np.random.default_rng(11)
    for n, k in ((5, 1), (17, 4), (40, 10), (64, 7)):
        feats = rng.normal(size=(n, 5))
        graph = knn_graph(feats, k)
        oracle = knn_bruteforce([list(r) for r in feats], k)
        want = np.zeros((n, n))
        for i, neighbors in oracle.items():
            for j, cos in neighbors:
                want[i, j] = max(cos, 0.0)
        sums = want.sum(axis=1, keepdims=True)
        np.divide(want, sums, out=want, where=sums > 0)
        np.testing.assert_allclose(graph, want, atol=1e-9)


def test_knn_graph_rejects_large_k():
    with pytest.raises(ValueError, match="knn_k"):
        knn_graph(np.ones((3, 2)), k=3)


def test_lattice_rejects_large_k():
    with pytest.raises(ValueError, match="knn_k"):
        LATTICE(ModelConfig(tag="lattice", knn_k=8), small_data(n_items=8))


def test_lattice_degenerate_merge_weights_pick_one_graph():
    data = small_data()
    cfg = ModelConfig(tag="lattice", embedding_dim=4, knn_k=2, blend=1.0)
    model = LATTICE(cfg, data, seed=5, dtype=np.float64)
    # logits (0, 800): exp(-800) underflows to exactly 0 in float64, so the
    # softmax weights are exactly (0, 1), picking the second sorted modality
    model.merge_logits.data[:] = [[0.0, 800.0]]
    tape = T.Tape()
    merged = model.merged_graph(tape)
    np.testing.assert_array_equal(merged.data, model.initial["visual"].data)


def test_lattice_blend_one_freezes_graph():
    data = small_data()
    cfg = ModelConfig(tag="lattice", embedding_dim=4, knn_k=2, blend=1.0)
    model = LATTICE(cfg, data, seed=5, dtype=np.float64)
    batch = fixed_batch(data)
    tape = T.Tape()
    loss = model.loss(tape, batch, np.random.default_rng(0))
    model.zero_grads()
    tape.backward(loss)
    for m in data.modalities:
        assert model.proj[m].grad is None  # learned graph never entered
    assert model.merge_logits.grad is not None


def test_item_item_graph_merged_uniform_and_weighted():
    a = np.array([[0.0, 1.0], [1.0, 0.0]])
    b = np.array([[0.0, 1.0], [0.0, 0.0]])
    graph = ItemItemGraph({"t": a, "v": b}, k=1, blend=1.0)
    np.testing.assert_allclose(graph.merged(), 0.5 * a + 0.5 * b)
    graph = ItemItemGraph({"t": a, "v": b}, k=1, blend=1.0,
                          weights={"t": 3.0, "v": 1.0})
    np.testing.assert_allclose(graph.merged(), 0.75 * a + 0.25 * b)


# ----------------------------------------------------------------------- bm3

def test_bm3_zero_dropout_intra_loss_exactly_zero():
    data = small_data()
    cfg = ModelConfig(tag="bm3", embedding_dim=4, dropout_p=0.0)
    model = BM3(cfg, data, seed=6, dtype=np.float64)
    batch = fixed_batch(data)
    tape = T.Tape()
    rec, inter, intra = model.loss_terms(tape, batch, np.random.default_rng(0))
    assert intra.item() == 0.0
    assert rec.item() > 0.0


def test_bm3_identical_views_minimize_reconstruction():
    data = ModelData(1, 2, np.array([[0, 0]]),
                     {"visual": np.array([[1.0], [2.0]])})
    cfg = ModelConfig(tag="bm3", embedding_dim=3, layers=0, dropout_p=0.0)
    model = BM3(cfg, data, seed=0, dtype=np.float64)
    model.user_emb.data[:] = [[1.0, 2.0, 3.0]]
    model.item_emb.data[0] = [1.0, 2.0, 3.0]
    batch = tr.TripleBatch(users=np.array([0]), pos=np.array([0]),
                           neg=np.array([1]))
    tape = T.Tape()
    rec, _, _ = model.loss_terms(tape, batch, np.random.default_rng(0))
    assert rec.item() == 0.0


def test_bm3_loss_ignores_negative_items():
    data = small_data()
    cfg = ModelConfig(tag="bm3", embedding_dim=4, dropout_p=0.3)
    model = BM3(cfg, data, seed=6, dtype=np.float64)
    batch = fixed_batch(data)
    model.make_frozen_views(batch, np.random.default_rng(9))
    tape = T.Tape()
    a = model.loss(tape, batch, np.random.default_rng(0)).item()
    flipped = tr.TripleBatch(users=batch.users, pos=batch.pos,
                             neg=(batch.neg + 1) % data.n_items)
    tape = T.Tape()
    b = model.loss(tape, flipped, np.random.default_rng(0)).item()
    assert a == b


# ------------------------------------------------------------------- freedom

def test_freedom_keep_probabilities_uniform_degrees():
    pairs = np.array([[0, 0], [1, 1], [2, 2]])
    probs = edge_keep_probabilities(pairs, 3, 3)
    np.testing.assert_allclose(probs, [1 / 3] * 3, rtol=1e-12)


def test_freedom_keep_probabilities_favor_low_degree():
    pairs = np.array([[0, 0], [0, 1], [0, 2], [1, 3]])
    probs = edge_keep_probabilities(pairs, 2, 4)
    assert probs[3] == max(probs)
    assert probs.sum() == pytest.approx(1.0)


def test_freedom_no_pruning_keeps_full_graph():
    data = small_data()
    cfg = ModelConfig(tag="freedom", embedding_dim=4, knn_k=2,
                      prune_ratio=0.0)
    model = FREEDOM(cfg, data, seed=7)
    model.on_epoch_start(np.random.default_rng(0), 1)
    assert model._train_adj is model.full_adj


def test_freedom_pruning_drops_edges():
    data = small_data()
    cfg = ModelConfig(tag="freedom", embedding_dim=4, knn_k=2,
                      prune_ratio=0.5)
    model = FREEDOM(cfg, data, seed=7)
    model.on_epoch_start(np.random.default_rng(0), 1)
    kept = model._train_adj.nnz // 2
    assert kept == round(0.5 * data.pairs.shape[0])


def test_freedom_prune_ratio_one_rejected():
    with pytest.raises(ValueError, match="prune_ratio"):
        FREEDOM(ModelConfig(tag="freedom", knn_k=2, prune_ratio=1.0),
                small_data())


def test_freedom_mm_weight_zero_leaves_projections_without_gradient():
    data = small_data()
    cfg = ModelConfig(tag="freedom", embedding_dim=4, knn_k=2, mm_weight=0.0)
    model = FREEDOM(cfg, data, seed=7, dtype=np.float64)
    model.on_epoch_start(np.random.default_rng(0), 1)
    batch = fixed_batch(data)
    tape = T.Tape()
    loss = model.loss(tape, batch, np.random.default_rng(0))
    model.zero_grads()
    tape.backward(loss)
    for m in data.modalities:
        assert model.proj[m].grad is None
    assert model.user_emb.grad is not None


def test_freedom_item_graph_is_frozen_row_stochastic():
    data = small_data()
    graph = lattice_build(data.features, k=2, blend=1.0)
    assert graph.frozen and graph.blend == 1.0
    merged = graph.merged()
    sums = merged.sum(axis=1)
    assert ((np.abs(sums - 1.0) < 1e-9) | (sums == 0.0)).all()


# ---------------------------------------------------------- gradient checks

def model_fd_case(tag, **cfg_kwargs):
    data = small_data(n_users=5, n_items=8, seed=13)
    defaults = dict(embedding_dim=3, layers=1, knn_k=2, item_graph_layers=1)
    defaults.update(cfg_kwargs)
    model = build_model(ModelConfig(tag=tag, **defaults), data, seed=21,
                        dtype=np.float64)
    batch = fixed_batch(data, size=6, seed=31)
    return model, batch


@pytest.mark.parametrize("tag", ["vbpr", "mmgcn", "grcn", "lattice",
                                 "bm3", "freedom"])
def test_model_loss_gradient_matches_fd(tag):
    kwargs = {}
    if tag == "bm3":
        kwargs["dropout_p"] = 0.25
    if tag == "lattice":
        kwargs["blend"] = 0.5
    model, batch = model_fd_case(tag, **kwargs)
    if tag == "bm3":
        model.make_frozen_views(batch, np.random.default_rng(41))
    if tag == "lattice":
        masks = {}
        for m in model.data.modalities:
            h = model.data.features[m] @ model.proj[m].data
            unit = h / np.linalg.norm(h, axis=1, keepdims=True)
            masks[m] = model._topk_mask(unit @ unit.T)
        model.frozen_masks = masks
    if tag == "freedom":
        model.on_epoch_start(np.random.default_rng(51), 1)

    def build_loss():
        tape = T.Tape()
        return tr.total_loss(tape, model, batch, np.random.default_rng(0),
                             reg=1e-3)

    assert_gradients_match(build_loss, model.tensors())


# ------------------------------------------------------------- checkpoints

def test_checkpoint_round_trip(tmp_path):
    data = small_data()
    cfg = ModelConfig(tag="vbpr", embedding_dim=4)
    model = VBPR(cfg, data, seed=8)
    want = model.score_users(range(data.n_users))
    save_checkpoint(model, tmp_path / "ckpt")

    fresh = VBPR(cfg, data, seed=99)
    assert not np.array_equal(fresh.score_users(range(data.n_users)), want)
    load_checkpoint(fresh, tmp_path / "ckpt")
    np.testing.assert_array_equal(fresh.score_users(range(data.n_users)), want)


def test_checkpoint_shape_mismatch_rejected(tmp_path):
    data = small_data()
    model = VBPR(ModelConfig(tag="vbpr", embedding_dim=4), data, seed=8)
    save_checkpoint(model, tmp_path / "ckpt")
    other = VBPR(ModelConfig(tag="vbpr", embedding_dim=5), data, seed=8)
    with pytest.raises(ValueError, match="shape"):
        load_checkpoint(other, tmp_path / "ckpt")
    bm3 = BM3(ModelConfig(tag="bm3", embedding_dim=4), data, seed=8)
    with pytest.raises(ValueError, match="tag"):
        load_checkpoint(bm3, tmp_path / "ckpt")


# ------------------------------------------------------------ training smoke

def test_models_survive_short_training():
    from fusionrec.schema import train_loop

    data = small_data(n_users=6, n_items=10, seed=17)
    tdata = tr.TrainData.from_pairs(data.n_users, data.n_items, data.pairs)
    trainer = tr.TrainerConfig(epochs=3, batch_size=8, lr=0.01, reg=1e-4,
                               optimizer="adam", seed=0, eval_every=0)
    for tag in CLASSIFICATION:
        model = build_model(ModelConfig(tag=tag, embedding_dim=4, knn_k=2),
                            data, seed=9)
        result = train_loop(model.spec, model, tdata, trainer)
        assert len(result.trace) == 3
        assert np.isfinite(result.trace[-1].loss)
        scores = model.score_users(range(data.n_users))
        assert np.isfinite(scores).all()
