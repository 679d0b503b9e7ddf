import logging
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dba import attention as att
from dba.attention import AttentionConfig, DbaParams, FixedParams, VanillaParams
from dba.autodiff import Tape, backward, finite_diff_grad, relative_discrepancy
from dba.bench import count_flops
from dba.errors import ContractError, DimensionError, ParameterError
from dba.numeric import make_rng, softmax_rows


# --- scalar oracles ----------------------------------------------------------

def mm(a, b):
    n, k = len(a), len(b)
    m = len(b[0])
    return [[sum(a[i][t] * b[t][j] for t in range(k)) for j in range(m)] for i in range(n)]


def tr(a):
    return [list(r) for r in zip(*a)]


def softmax_loop(rows):
    out = []
    for row in rows:
        top = max(row)
        e = [math.exp(v - top) for v in row]
        s = sum(e)
        out.append([v / s for v in e])
    return out


def vanilla_loops(q, k, v):
    n, d = len(q), len(q[0])
    out = []
    for i in range(n):
        scores = [sum(q[i][t] * k[j][t] for t in range(d)) / math.sqrt(d) for j in range(n)]
        top = max(scores)
        w = [math.exp(s - top) for s in scores]
        total = sum(w)
        out.append([sum(w[j] / total * v[j][c] for j in range(n)) for c in range(len(v[0]))])
    return out


def run(fn, *arrays):
    t = Tape()
    return fn(t, *(t.const(a) for a in arrays)).value


# --- vanilla -----------------------------------------------------------------

def test_vanilla_single_token_returns_v(rng):
    q, k, v = (rng.standard_normal((1, 3)) for _ in range(3))
    assert np.array_equal(run(att.vanilla_attention, q, k, v), v)


def test_vanilla_identical_keys_average_values(rng):
    q, v = rng.standard_normal((4, 3)), rng.standard_normal((4, 3))
    k = np.tile(rng.standard_normal((1, 3)), (4, 1))
    out = run(att.vanilla_attention, q, k, v)
    assert np.allclose(out, np.tile(v.mean(axis=0), (4, 1)), atol=1e-15)


def test_vanilla_matches_three_loop_oracle():
    rng = make_rng(11)
    q, k, v = (rng.standard_normal((4, 3)) for _ in range(3))
    ref = np.array(vanilla_loops(q.tolist(), k.tolist(), v.tolist()))
    assert np.max(np.abs(run(att.vanilla_attention, q, k, v) - ref)) < 1e-12


def test_vanilla_shape_mismatch(rng):
    with pytest.raises(DimensionError):
        run(att.vanilla_attention, np.ones((4, 3)), np.ones((4, 2)), np.ones((4, 3)))


# --- projections -------------------------------------------------------------

def test_zero_z_gives_uniform_projection(rng):
    q, k = rng.standard_normal((5, 4)), rng.standard_normal((5, 4))
    t = Tape()
    w_r, w_c = att.dynamic_projections(t, t.const(np.zeros((3, 4))), t.const(q), t.const(k))
    assert np.allclose(w_r.value, 0.2, atol=1e-16) and np.allclose(w_c.value, 0.2, atol=1e-16)


def test_projection_permutation_invariance(rng):
    z, q, k = rng.standard_normal((3, 4)), rng.standard_normal((6, 4)), rng.standard_normal((6, 4))
    perm = rng.permutation(6)
    t = Tape()
    w_r, _ = att.dynamic_projections(t, t.const(z), t.const(q), t.const(k))
    w_rp, _ = att.dynamic_projections(t, t.const(z), t.const(q[perm]), t.const(k[perm]))
    assert np.allclose(w_rp.value, w_r.value[:, perm], atol=1e-15)
    assert np.allclose(w_rp.value @ q[perm], w_r.value @ q, atol=1e-13)


def test_projection_matches_compositional_oracle():
    z = np.array([[1.0, -2.0], [0.5, 0.25]])
    q = np.array([[1.0, 0.0], [0.0, 1.0], [2.0, -1.0]])
    t = Tape()
    w_r, _ = att.dynamic_projections(t, t.const(z), t.const(q), t.const(q))
    assert np.array_equal(w_r.value, softmax_rows(z @ q.T))
    assert w_r.shape == (2, 3)


def test_projection_width_mismatch():
    t = Tape()
    with pytest.raises(DimensionError):
        att.dynamic_projections(t, t.const(np.ones((2, 3))), t.const(np.ones((4, 4))),
                                t.const(np.ones((4, 4))))


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10 ** 6), st.floats(1.0, 500.0))
def test_projection_rows_normalized_under_extreme_logits(seed, scale):
    rng = make_rng(seed)
    z = rng.choice([-1.0, 1.0], size=(4, 6)) * scale
    q = rng.choice([-1.0, 1.0], size=(9, 6))
    t = Tape()
    w_r, w_c = att.dynamic_projections(t, t.const(z), t.const(q), t.const(-q))
    for w in (w_r.value, w_c.value):
        assert np.all(w >= 0)
        assert np.allclose(w.sum(axis=-1), 1.0, atol=1e-10, rtol=0)


def test_reconstruction_maps(rng):
    x = rng.standard_normal((5, 4))
    a = rng.standard_normal((4, 2))
    t = Tape()
    w_r, w_c = att.reconstruction_maps(t, t.const(x), t.const(np.zeros((4, 2))), t.const(a))
    assert np.array_equal(w_r.value, np.zeros((5, 2)))
    assert np.max(np.abs(w_c.value - x @ a)) < 1e-12
    w2, _ = att.reconstruction_maps(t, t.const(np.vstack([x, x])), t.const(a), t.const(a))
    assert np.array_equal(w2.value, np.vstack([x @ a, x @ a]))
    with pytest.raises(DimensionError):
        att.reconstruction_maps(t, t.const(x), t.const(np.ones((3, 2))), t.const(a))


def test_projection_set_shapes(rng):
    cfg = AttentionConfig(n=10, d=8, d_p=3, d_in=4, heads=2)
    p = DbaParams.init(cfg, rng)
    ps = att.projections(rng.standard_normal((10, 8)), p, cfg)
    assert ps.w_r.shape == (2, 3, 10) and ps.w_r_rec.shape == (10, 3)
    assert np.allclose(ps.w_r.sum(-1), 1.0, atol=1e-12)


# --- DBA self-attention ------------------------------------------------------

def test_reduction_to_vanilla_with_identities():
    n = d = 8
    cfg = AttentionConfig(n=n, d=d, d_p=n, d_in=d, heads=1,
                          mechanism="dba_no_seq_compress+dba_no_dim_compress")
    eye = np.eye(d)
    p = DbaParams(z=np.zeros((n, d)), r=eye, a_r=eye, a_c=eye, wq=eye, wk=eye, wv=eye, wo=eye)
    x = np.eye(n)
    out = att.forward(x, p, cfg)
    ref = run(att.vanilla_attention, x, x, x)
    assert np.max(np.abs(out - ref)) <= 1e-10


def test_reduction_random_weights_many_seeds():
    from dba.oracles import reduction_identity_gap
    assert max(reduction_identity_gap(16, 16, s) for s in range(20)) <= 1e-10


@pytest.mark.parametrize("heads", [1, 2])
def test_permutation_equivariance(heads):
    for seed in range(10):
        rng = make_rng(seed)
        cfg = AttentionConfig(n=32, d=16, d_p=6, d_in=8, heads=heads)
        p = DbaParams.init(cfg, rng)
        x = rng.standard_normal((32, 16))
        perm = rng.permutation(32)
        out = att.forward(x, p, cfg)
        assert np.max(np.abs(att.forward(x[perm], p, cfg) - out[perm])) <= 1e-9


def test_shape_contract_and_no_quadratic_flops(rng):
    cfg = AttentionConfig(n=48, d=32, d_p=8, d_in=12, heads=4)
    p = DbaParams.init(cfg, rng)
    assert att.forward(rng.standard_normal((48, 32)), p, cfg).shape == (48, 32)
    f = [count_flops(cfg.replace(n=n)) for n in (48, 96, 144)]
    assert f[2] - 2 * f[1] + f[0] == 0


def test_no_n_squared_allocation(monkeypatch, rng):
    sizes = []
    orig = Tape._push

    def spy(self, value, *a, **k):
        sizes.append(np.asarray(value).nbytes)
        return orig(self, value, *a, **k)

    monkeypatch.setattr(Tape, "_push", spy)
    for n in (64, 256):
        cfg = AttentionConfig(n=n, d=32, d_p=8, d_in=12, heads=2)
        p = DbaParams.init(cfg, rng)
        sizes.clear()
        att.forward(rng.standard_normal((n, 32)), p, cfg)
        assert max(sizes) < n * n * 8
        sizes.clear()
        vcfg = cfg.replace(mechanism="vanilla")
        att.forward(rng.standard_normal((n, 32)), VanillaParams.init(vcfg, rng), vcfg)
        assert max(sizes) >= n * n * 8  # the baseline does materialize the map


def test_variable_length_same_params(rng):
    cfg = AttentionConfig(n=48, d=16, d_p=6, d_in=8, heads=2)
    p = DbaParams.init(cfg, rng)
    before = {k: v.copy() for k, v in p.named().items()}
    for n in (7, 48, 300):
        assert att.forward(rng.standard_normal((n, 16)), p, cfg).shape == (n, 16)
    assert all(np.array_equal(before[k], v) for k, v in p.named().items())


def test_batched_forward_matches_per_sample(rng):
    cfg = AttentionConfig(n=10, d=8, d_p=3, d_in=4, heads=2)
    p = DbaParams.init(cfg, rng)
    xb = rng.standard_normal((3, 10, 8))
    out = att.forward(xb, p, cfg)
    for i in range(3):
        assert np.allclose(out[i], att.forward(xb[i], p, cfg), atol=1e-13)


def test_config_validation(caplog):
    with pytest.raises(ParameterError):
        AttentionConfig(n=8, d=10, heads=3)
    with pytest.raises(ParameterError):
        AttentionConfig(n=4, d=8, d_p=5)
    with pytest.raises(ParameterError):
        AttentionConfig(n=8, d=8, d_p=2, d_in=9)
    with pytest.raises(ParameterError):
        AttentionConfig(n=8, d=8, mechanism="sparse")
    with caplog.at_level(logging.WARNING):
        AttentionConfig(n=20, d=8, d_p=12, d_in=4)
    assert "redundant" in caplog.text


def test_params_mismatch_is_dimension_error(rng):
    cfg = AttentionConfig(n=8, d=8, d_p=3, d_in=4)
    p = DbaParams.init(cfg.replace(d_in=5), rng)
    with pytest.raises(DimensionError):
        att.forward(rng.standard_normal((8, 8)), p, cfg)


def test_r_initial_variance():
    cfg = AttentionConfig(n=64, d=256, d_p=8, d_in=200, heads=4)
    p = DbaParams.init(cfg, make_rng(0))
    assert abs(p.r.var() - 4 / 256) < 0.05 * 4 / 256


# --- cross-attention ---------------------------------------------------------

def cross_loops(x1, x2, p1, p2, d_in):
    """Scalar re-implementation of single-head DBA cross-attention."""
    L = lambda a: a.tolist()
    c2 = mm(softmax_loop(mm(L(p2.z), tr(L(x2)))), L(x2))
    z1 = mm(c2, L(p1.lin))
    q1 = mm(L(x1), L(p1.wq))
    w_r1 = softmax_loop(mm(z1, tr(q1)))
    q_dba = mm(mm(w_r1, q1), L(p1.r))
    k_dba = mm(mm(c2, L(p2.wk)), L(p1.r))
    v2 = mm(c2, L(p2.wv))
    scores = [[s / math.sqrt(d_in) for s in row] for row in mm(q_dba, tr(k_dba))]
    block = mm(softmax_loop(scores), v2)
    return np.array(mm(mm(mm(L(x1), L(p1.a_r)), block), L(p1.wo)))


def _cross_setup(seed, n1, n2, d=6, d_p=3, d_in=4, heads=1):
    rng = make_rng(seed)
    cfg = AttentionConfig(n=max(n1, d_p), d=d, d_p=d_p, d_in=d_in, heads=heads)
    p1 = DbaParams.init(cfg, rng, cross=True)
    p2 = DbaParams.init(cfg, rng)
    return cfg, p1, p2, rng.standard_normal((n1, d)), rng.standard_normal((n2, d))


def _cross(x1, x2, p1, p2, cfg, **kw):
    t = Tape()
    b1 = DbaParams(**{k: t.const(v) for k, v in p1.named().items()})
    b2 = DbaParams(**{k: t.const(v) for k, v in p2.named().items()})
    return att.dba_cross_attention(t, t.const(x1), t.const(x2), b1, b2, cfg, **kw).value


def test_cross_single_query_matches_scalar_oracle():
    cfg, p1, p2, x1, x2 = _cross_setup(4, 1, 5)
    out = _cross(x1, x2, p1, p2, cfg)
    assert out.shape == (1, 6)
    assert np.max(np.abs(out - cross_loops(x1, x2, p1, p2, cfg.d_in))) < 1e-12


def test_cross_general_matches_scalar_oracle():
    cfg, p1, p2, x1, x2 = _cross_setup(5, 7, 4)
    assert np.max(np.abs(_cross(x1, x2, p1, p2, cfg)
                         - cross_loops(x1, x2, p1, p2, cfg.d_in))) < 1e-12


def test_cross_independent_lengths():
    for n1, n2 in [(3, 11), (9, 2), (1, 1)]:
        cfg, p1, p2, x1, x2 = _cross_setup(0, n1, n2, heads=2)
        assert _cross(x1, x2, p1, p2, cfg).shape == (n1, 6)


def test_cross_identical_keys_give_uniform_weights():
    cfg, p1, p2, x1, _ = _cross_setup(1, 5, 4)
    x2 = np.tile(make_rng(9).standard_normal((1, 6)), (4, 1))
    t = Tape()
    c2 = att.compress_sequence(t, t.const(x2), t.const(p2.z)).value
    assert np.allclose(c2, c2[0], atol=1e-15)
    q_dba = softmax_rows((c2 @ p1.lin) @ (x1 @ p1.wq).T) @ (x1 @ p1.wq) @ p1.r
    k_dba = c2 @ p2.wk @ p1.r
    weights = softmax_rows(q_dba @ k_dba.T / math.sqrt(cfg.d_in))
    assert np.allclose(weights, 1.0 / cfg.d_p, atol=1e-10)


def test_cross_gradient_flows_through_both_paths():
    cfg, p1, p2, x1, x2 = _cross_setup(2, 5, 4)

    def grad_x2(detach):
        t = Tape()
        b1 = DbaParams(**{k: t.const(v) for k, v in p1.named().items()})
        b2 = DbaParams(**{k: t.const(v) for k, v in p2.named().items()})
        x2n = t.param(x2)
        y = att.dba_cross_attention(t, t.const(x1), x2n, b1, b2, cfg, detach=detach)
        return backward(t, t.scale(t.sum(t.mul(y, y)), 0.5))[x2n.id]

    full, via_kv, via_query = grad_x2(None), grad_x2("query"), grad_x2("kv")
    assert np.linalg.norm(via_kv) > 1e-6 and np.linalg.norm(via_query) > 1e-6
    assert not np.allclose(full, via_kv) and not np.allclose(full, via_query)
    assert np.allclose(full, via_kv + via_query, atol=1e-12)

    # Finite differences on each path with the other path frozen at x2.
    def path_loss(x2_query, x2_kv):
        t = Tape()
        b1 = DbaParams(**{k: t.const(v) for k, v in p1.named().items()})
        b2 = DbaParams(**{k: t.const(v) for k, v in p2.named().items()})
        cq = att.compress_sequence(t, t.const(x2_query), b2.z)
        ckv = att.compress_sequence(t, t.const(x2_kv), b2.z)
        y = att.cross_attention_from_compressed(t, t.const(x1), cq, ckv, b1, b2, cfg).value
        return 0.5 * float(np.sum(y * y))

    fd_query = finite_diff_grad(lambda v: path_loss(v, x2), x2)
    fd_kv = finite_diff_grad(lambda v: path_loss(x2, v), x2)
    assert relative_discrepancy(via_query, fd_query) < 1e-6
    assert relative_discrepancy(via_kv, fd_kv) < 1e-6


def test_cross_rejects_bad_detach_and_missing_lin():
    cfg, p1, p2, x1, x2 = _cross_setup(0, 4, 4)
    with pytest.raises(ParameterError):
        _cross(x1, x2, p1, p2, cfg, detach="both")
    with pytest.raises(DimensionError):
        _cross(x1, x2, p2, p2, cfg)
    with pytest.raises(DimensionError):
        _cross(x1, np.ones((4, 5)), p1, p2, cfg)


# --- fixed low-rank baseline -------------------------------------------------

def test_fixed_uniform_projection_is_sequence_mean(rng):
    n, d = 6, 4
    x = rng.standard_normal((n, d))
    e = np.full((2, n), 1.0 / n)
    assert np.allclose(e @ x, np.tile(x.mean(axis=0), (2, 1)), atol=1e-15)
    cfg = AttentionConfig(n=n, d=d, d_p=2, d_in=3, mechanism="fixed_lowrank_baseline")
    p = FixedParams.init(cfg, rng)
    p.e = e
    p.f = e
    # Every compressed query is the mean token, so all score rows are equal.
    q_dba = (e @ x @ p.wq) @ p.r
    assert np.allclose(q_dba[0], q_dba[1])
    assert att.forward(x, p, cfg).shape == (n, d)


def test_fixed_projection_is_input_invariant(rng):
    cfg = AttentionConfig(n=8, d=4, d_p=2, d_in=3, mechanism="fixed_lowrank_baseline")
    p = FixedParams.init(cfg, rng)
    e_before = p.e.copy()
    att.forward(rng.standard_normal((8, 4)), p, cfg)
    att.forward(rng.standard_normal((8, 4)), p, cfg)
    assert np.array_equal(p.e, e_before)


def test_fixed_rejects_other_lengths(rng):
    cfg = AttentionConfig(n=8, d=4, d_p=2, d_in=3, mechanism="fixed_lowrank_baseline")
    p = FixedParams.init(cfg, rng)
    assert att.forward(rng.standard_normal((8, 4)), p, cfg).shape == (8, 4)
    with pytest.raises(ContractError):
        att.forward(rng.standard_normal((9, 4)), p, cfg)


def test_dispatch_rejects_non_dba_mechanism(rng):
    cfg = AttentionConfig(n=4, d=4, d_p=2, d_in=2, mechanism="vanilla")
    t = Tape()
    with pytest.raises(ContractError):
        att.dba_self_attention(t, t.const(np.ones((4, 4))), DbaParams.init(cfg, rng), cfg)
