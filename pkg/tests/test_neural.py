import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from wmnav import neural as nn
from wmnav import topomem as tm

import oracles


def random_view(n, d, rng, p_edge=0.3, include_global=True, forgotten=()):
    g = tm.TopoGraph(d)
    for i in range(n):
        tm.update_map(g, rng.standard_normal(d), None)
    for i in range(n):
        for j in range(i + 1, n):
            if rng.random() < p_edge:
                g.edges.add((i, j))
    g.global_feature = rng.standard_normal(d)
    g.exempt_last = False
    g.forgotten = set(forgotten)
    return g, tm.active_view(g, include_global)


def sample_batch(params, rng, n_samples=3, max_nodes=5):
    d = nn.dims(params)[0]
    batch = []
    for _ in range(n_samples):
        _, view = random_view(int(rng.integers(1, max_nodes + 1)), d, rng)
        batch.append(nn.StepSample(view, rng.standard_normal(d), rng.standard_normal(d), int(rng.integers(4))))
    return batch


# ---------------------------------------------------------------------------
# parameters


def test_param_shapes_and_init():
    p = nn.init_params(16, seed=1)
    assert nn.dims(p) == (16, 4, 3)
    bound = 1 / math.sqrt(16)
    assert all(np.abs(v).max() <= bound for v in p.values())
    q = nn.init_params(16, seed=1)
    assert all(np.array_equal(p[k], q[k]) for k in p)
    assert np.all(nn.init_params(16, uniform_policy=True)["policy.W"] == 0)


def test_heads_must_divide_d():
    with pytest.raises(nn.ShapeError):
        nn.param_shapes(10, 4)


def test_weights_roundtrip_bit_exact(tmp_path):
    p = nn.init_params(8, seed=3)
    nn.save_params(p, tmp_path / "w.json")
    q = nn.load_params(tmp_path / "w.json")
    assert set(p) == set(q)
    assert all(np.array_equal(p[k], q[k]) and p[k].dtype == q[k].dtype for k in p)


def test_load_rejects_mismatched_header(tmp_path):
    import json

    p = nn.init_params(8)
    nn.save_params(p, tmp_path / "w.json")
    payload = json.loads((tmp_path / "w.json").read_text())
    payload["d"] = 16
    (tmp_path / "bad.json").write_text(json.dumps(payload))
    with pytest.raises(ValueError):
        nn.load_params(tmp_path / "bad.json")


# ---------------------------------------------------------------------------
# fusion


def test_fuse_zero_and_identity(rng):
    d = 6
    F = rng.standard_normal((3, d))
    t = rng.standard_normal(d)
    assert np.all(nn.fuse_goal(F, t, np.zeros((d, 2 * d)), np.zeros(d)) == 0)
    W = np.zeros((d, 2 * d))
    W[:, :d] = np.eye(d)
    assert np.array_equal(nn.fuse_goal(F, t, W, np.zeros(d)), F)


def test_fuse_matches_matmul_oracle(rng):
    d = 5
    F = rng.standard_normal((3, d))
    t = rng.standard_normal(d)
    W = rng.standard_normal((d, 2 * d))
    b = rng.standard_normal(d)
    ref = np.array([W @ np.concatenate([f, t]) + b for f in F])
    assert np.allclose(nn.fuse_goal(F, t, W, b), ref, atol=1e-12, rtol=0)


def test_fuse_dimension_mismatch(rng):
    with pytest.raises(nn.ShapeError):
        nn.fuse_goal(rng.standard_normal((2, 4)), rng.standard_normal(5), np.zeros((4, 8)), np.zeros(4))


# ---------------------------------------------------------------------------
# GATv2


def test_identical_nodes_attend_uniformly(rng):
    d = 4
    h = rng.standard_normal(d)
    H = np.stack([h, h])
    src = np.array([0, 1, 0, 1])
    dst = np.array([0, 0, 1, 1])
    _, cache = nn.gatv2_layer(H, src, dst, rng.standard_normal((d, 2 * d)), rng.standard_normal(d))
    assert np.allclose(cache.alpha, 0.5)


def test_zero_attention_vector_gives_mean(rng):
    d = 4
    H = rng.standard_normal((2, d))
    W = np.hstack([np.zeros((d, d)), 2 * np.eye(d)])
    out, cache = nn.gatv2_layer(H, np.array([0, 1, 0, 1]), np.array([0, 0, 1, 1]), W, np.zeros(d))
    mean = (2 * H).mean(axis=0)
    elu = np.where(mean > 0, mean, np.expm1(mean))
    assert np.allclose(out, elu[None, :], atol=1e-14)


def test_missing_self_loop_rejected(rng):
    H = rng.standard_normal((2, 4))
    with pytest.raises(nn.ShapeError):
        nn.gatv2_layer(H, np.array([1]), np.array([0]), np.zeros((4, 8)), np.zeros(4))


@pytest.mark.parametrize("activate", [True, False])
def test_gat_matches_dense_reference(rng, activate):
    d = 5
    _, view = random_view(6, d, rng, p_edge=0.4)
    W = rng.standard_normal((d, 2 * d))
    a = rng.standard_normal(d)
    out, cache = nn.gatv2_layer(view.features, view.src, view.dst, W, a, activate)
    ref, att = oracles.dense_gatv2(view.features, view.adjacency(), W, a, activate)
    assert np.abs(out - ref).max() < 1e-10
    assert np.abs(nn.edge_attention_matrix(cache, view.n_rows) - att).max() < 1e-10


@given(st.integers(1, 8), st.integers(0, 2**31))
def test_gat_permutation_equivariant(n, seed):
    rng = np.random.default_rng(seed)
    d = 4
    H = rng.standard_normal((n, d))
    A = (rng.random((n, n)) < 0.4).astype(float)
    A = np.maximum(A, A.T)
    np.fill_diagonal(A, 1)
    W = rng.standard_normal((d, 2 * d))
    a = rng.standard_normal(d)
    perm = rng.permutation(n)

    def run(Hm, Am):
        dst, src = np.nonzero(Am)
        return nn.gatv2_layer(Hm, src, dst, W, a)[0]

    out = run(H, A)
    out_p = run(H[perm], A[np.ix_(perm, perm)])
    assert np.allclose(out[perm], out_p, atol=1e-12)


def test_encode_composes_layers(rng):
    d = 8
    params = nn.init_params(d, seed=2)
    _, view = random_view(5, d, rng)
    t = rng.standard_normal(d)
    M, _ = nn.encode_memory(params, view, t)
    assert M.shape == (6, d)
    ref = oracles.dense_encode(params, view.features, view.adjacency(), t)
    assert np.abs(M - ref).max() < 1e-10


def test_encode_zero_weights_gives_zeros(rng):
    _, view = random_view(3, 8, rng)
    M, _ = nn.encode_memory(nn.zero_params(8), view, rng.standard_normal(8))
    assert np.all(M == 0)


def test_single_node_memory_has_two_rows(rng):
    _, view = random_view(1, 8, rng)
    M, _ = nn.encode_memory(nn.init_params(8), view, rng.standard_normal(8))
    assert M.shape[0] == 2


# ---------------------------------------------------------------------------
# decoders


def test_single_key_gets_full_weight(rng):
    p = nn.init_params(8, seed=1)
    _, rep, _ = nn.mha_decode(rng.standard_normal(8), rng.standard_normal((1, 8)), p, "dec_cur", 1, False)
    assert np.allclose(rep.per_head, 1.0)


def test_identical_keys_split_evenly(rng):
    p = nn.init_params(8, seed=1)
    k = rng.standard_normal(8)
    _, rep, _ = nn.mha_decode(rng.standard_normal(8), np.stack([k, k]), p, "dec_cur", 2, False)
    assert np.allclose(rep.per_head, 0.5)


def test_decoder_matches_reference(rng):
    d = 8
    p = nn.init_params(d, seed=5)
    q = rng.standard_normal(d)
    keys = rng.standard_normal((4, d))
    f, rep, _ = nn.mha_decode(q, keys, p, "dec_target", 3, True)
    ref_f, ref_w = oracles.reference_attention(q, keys, *(p[f"dec_target.{n}"] for n in ("Wq", "Wk", "Wv", "Wo", "bo")))
    assert np.abs(f - ref_f).max() < 1e-10
    assert np.abs(rep.per_head - ref_w).max() < 1e-10
    assert rep.global_score == pytest.approx(ref_w.mean(axis=0)[3])


def test_decoder_without_global_key(rng):
    p = nn.init_params(8)
    keys = rng.standard_normal((4, 8))
    _, rep, _ = nn.mha_decode(rng.standard_normal(8), keys, p, "dec_cur", 3, use_global_key=False)
    assert rep.per_head.shape == (4, 3) and rep.global_score is None


def test_decoder_dimension_mismatch(rng):
    with pytest.raises(nn.ShapeError):
        nn.mha_decode(rng.standard_normal(5), rng.standard_normal((2, 8)), nn.init_params(8), "dec_cur", 1)


def test_forgetting_scores_projection():
    rep = nn.AttentionReport(np.tile([0.2, 0.3, 0.1, 0.4], (4, 1)), 3, True)
    assert np.allclose(nn.extract_forgetting_scores(rep, 3), [0.2, 0.3, 0.1])  # not renormalized
    with pytest.raises(nn.StaleReportError):
        nn.extract_forgetting_scores(rep, 4)


def test_forgetting_scores_rank_like_head_mean(rng):
    per_head = rng.dirichlet(np.ones(6), size=4)
    rep = nn.AttentionReport(per_head, 5, True)
    scores = nn.extract_forgetting_scores(rep, 5)
    assert list(np.argsort(scores, kind="stable")) == list(np.argsort(per_head.mean(axis=0)[:5], kind="stable"))
    assert np.allclose(nn.extract_forgetting_scores(rep, 5, "max"), per_head[:, :5].max(axis=0))


@given(st.integers(1, 10), st.integers(0, 2**31))
def test_softmax_rows_sum_to_one(n, seed):
    rng = np.random.default_rng(seed)
    d = 8
    params = nn.init_params(d, seed=seed % 100)
    for k in params:
        params[k] = params[k] * 4
    _, view = random_view(n, d, rng)
    out = nn.forward_step(params, view, rng.standard_normal(d), rng.standard_normal(d))
    for c in out.caches["gat"]:
        assert np.allclose(np.add.reduceat(c.alpha, c.starts), 1.0, atol=1e-9)
    for rep in (out.report_cur, out.report_target):
        assert np.allclose(rep.per_head.sum(axis=1), 1.0, atol=1e-9)
    assert out.probs.sum() == pytest.approx(1.0, abs=1e-12)


# ---------------------------------------------------------------------------
# policy head and loss


def test_zero_policy_is_uniform(rng):
    d = 8
    _, probs = nn.policy_distribution(*(rng.standard_normal(d) for _ in range(3)), np.zeros((4, 24)), np.zeros(4))
    assert np.allclose(probs, 0.25)


def test_logits_match_matmul(rng):
    d = 4
    a, b, c = (rng.standard_normal(d) for _ in range(3))
    W = rng.standard_normal((4, 3 * d))
    bias = rng.standard_normal(4)
    logits, _ = nn.policy_distribution(a, b, c, W, bias)
    assert np.allclose(logits, W @ np.concatenate([a, b, c]) + bias, atol=1e-12)


def test_uniform_head_nll_is_ln4(rng):
    params = nn.init_params(8, uniform_policy=True)
    batch = sample_batch(params, rng)
    assert nn.batch_loss(params, batch) == pytest.approx(math.log(4), abs=1e-12)


def test_saturated_softmax_has_finite_nll(rng):
    params = nn.init_params(8, uniform_policy=True)
    params["policy.b"][:] = [800.0, 0, 0, 0]
    loss = nn.batch_loss(params, [nn.StepSample(random_view(2, 8, rng)[1], rng.standard_normal(8), rng.standard_normal(8), 1)])
    assert loss == pytest.approx(800.0)


# ---------------------------------------------------------------------------
# gradients


def test_gradient_check_small_net(rng):
    params = nn.init_params(8, seed=7)
    res = nn.grad_check(params, sample_batch(params, rng), n_coords=60)
    assert res.max_rel_error <= 1e-4
    assert {name for name, _ in res.coords} == set(params)


def test_gradient_with_ablation_options(rng):
    params = nn.init_params(8, seed=8)
    batch = sample_batch(params, rng)
    batch = [
        nn.StepSample(s.view, s.e_target, s.e_cur, s.action, nn.StepOptions(use_global_key=False)) for s in batch[:2]
    ] + [nn.StepSample(batch[2].view, batch[2].e_target, batch[2].e_cur, batch[2].action, nn.StepOptions(replace_global_with=0))]
    assert nn.grad_check(params, batch, n_coords=40, seed=1).max_rel_error <= 1e-4


def test_zero_net_plateau_has_zero_gradient(rng):
    params = nn.zero_params(8)
    batch = sample_batch(params, rng)
    loss, grads = nn.batch_loss_and_grad(params, batch)
    assert loss == pytest.approx(math.log(4))
    assert all(np.all(grads[k] == 0) for k in grads if not k.startswith("policy"))
    # decoded features are zero, so their head columns are flat too
    assert np.all(grads["policy.W"][:, :16] == 0)
    for name, idx in [("gat2.a", (1,)), ("dec_cur.Wo", (0, 0)), ("policy.W", (2, 3))]:
        assert nn.finite_difference(params, batch, name, idx, 1e-5) == 0.0


def test_central_difference_is_second_order(rng):
    params = nn.init_params(8, seed=9)
    batch = sample_batch(params, rng)
    _, grads = nn.batch_loss_and_grad(params, batch)
    name, idx = "gat1.a", (3,)
    e1 = abs(nn.finite_difference(params, batch, name, idx, 1e-3) - grads[name][idx])
    e2 = abs(nn.finite_difference(params, batch, name, idx, 2e-3) - grads[name][idx])
    # truncation error grows like eps^2: doubling eps multiplies it by about 4
    assert 2.5 < e2 / e1 < 5.5


def test_nonfinite_loss_raises(rng):
    params = nn.init_params(8)
    params["policy.b"][0] = np.nan
    with pytest.raises(nn.NumericalError):
        nn.batch_loss(params, sample_batch(params, rng, n_samples=1))
