import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given
from hypothesis import strategies as st
from scipy.spatial import Delaunay
from shapely.geometry import box

from icebhm.matern import MaternParams
from icebhm.mesh import TriMesh, assemble_fem
from icebhm.processes import (
    AR1,
    SPATIAL_ONLY,
    TREND,
    ProcessSpec,
    ar1_precision,
    build_block,
    fixed_effects_prior,
    process_marginal_variance,
    stack,
    trend_variance_from_speed,
)


@pytest.fixture(scope="module")
def ten_vertex_mesh():
    x, y = np.meshgrid(np.arange(5.0) * 0.25, np.arange(2.0) * 0.25)
    v = np.column_stack([x.ravel(), y.ravel()])
    tri = Delaunay(v).simplices
    p0, p1, p2 = v[tri[:, 0]], v[tri[:, 1]], v[tri[:, 2]]
    cw = (p1[:, 0] - p0[:, 0]) * (p2[:, 1] - p0[:, 1]) - (p1[:, 1] - p0[:, 1]) * (p2[:, 0] - p0[:, 0]) < 0
    tri[cw] = tri[cw][:, [0, 2, 1]]
    dom = box(0, 0, 1, 0.25)
    m = TriMesh(v, tri, np.ones(10, bool), dom, dom)
    m.validate()
    return m


def test_scalar_ar1_stationary_moments():
    Qw = sp.csc_matrix([[1.0]])
    S = np.linalg.inv(ar1_precision(Qw, 0.5, 3).toarray())
    np.testing.assert_allclose(np.diag(S), 4 / 3, atol=1e-12)
    np.testing.assert_allclose(np.diag(S, 1), 2 / 3, atol=1e-12)
    np.testing.assert_allclose(S[0, 2], 1 / 3, atol=1e-12)


@given(st.floats(-0.95, 0.95), st.integers(2, 8))
def test_scalar_ar1_property(a, T):
    S = np.linalg.inv(ar1_precision(sp.csc_matrix([[1.0]]), a, T).toarray())
    lags = np.abs(np.subtract.outer(np.arange(T), np.arange(T)))
    np.testing.assert_allclose(S, a**lags / (1 - a * a), rtol=1e-9, atol=1e-10)


def test_ar1_zero_coefficient_is_block_diagonal(ten_vertex_mesh):
    spec = ProcessSpec("s", AR1, ten_vertex_mesh, MaternParams(1.0, 0.5), 4, ar_coefficient=0.0)
    Q = build_block(spec).Q.toarray()
    n = 10
    for t in range(4):
        for u in range(4):
            if t != u:
                assert not Q[t * n : (t + 1) * n, u * n : (u + 1) * n].any()


def test_varying_ar1_matches_simulation(ten_vertex_mesh):
    m = ten_vertex_mesh
    a = np.linspace(-0.3, 0.8, 10)
    T = 3
    spec = ProcessSpec("s", AR1, m, MaternParams(1.0, 0.5), T, ar_coefficient=a)
    block = build_block(spec)
    S = np.linalg.inv(block.Q.toarray())
    # brute-force recursion, independent of the precision assembly
    from icebhm.matern import build_precision

    Sw = np.linalg.inv(build_precision(assemble_fem(m), MaternParams(1.0, 0.5)).Q.toarray())
    Lw = np.linalg.cholesky(Sw)
    rng = np.random.default_rng(99)
    n_draws = 1_000_000
    xs = []
    x = (Lw @ rng.standard_normal((10, n_draws))) / np.sqrt(1 - a * a)[:, None]
    xs.append(x)
    for _ in range(1, T):
        x = a[:, None] * x + Lw @ rng.standard_normal((10, n_draws))
        xs.append(x)
    X = np.vstack(xs)
    idx = [(0, 0), (3, 3), (9, 9), (0, 10), (5, 15), (9, 29), (2, 27), (14, 24), (7, 8)]
    for i, j in idx:
        prod = X[i] * X[j]
        se = prod.std() / np.sqrt(n_draws)
        assert abs(prod.mean() - S[i, j]) < 3 * se, (i, j)


def test_spatial_only_is_time_invariant(small_mesh):
    spec = ProcessSpec("gia", SPATIAL_ONLY, small_mesh, MaternParams(1.0, 0.5), 5)
    b = build_block(spec)
    assert b.components == (("field", None, small_mesh.n_vertices),)
    prior = stack([b])
    assert len(prior.segments) == 1
    assert {tuple(prior.epoch_map("gia", t)) for t in range(5)} == {((0, 1.0),)}
    assert not prior.mean.any()


def test_spatial_only_interior_variance():
    from icebhm.mesh import build_mesh

    m = build_mesh(box(0, 0, 1, 1), 0.05, 1.0, 0.3)
    spec = ProcessSpec("g", SPATIAL_ONLY, m, MaternParams(0.7, 0.3))
    var = process_marginal_variance(build_block(spec), 0)
    inner = m.interior_vertices(0.2)
    np.testing.assert_array_less(np.abs(var[inner] / 0.49 - 1), 0.15)


def test_trend_zero_slope_variance(small_mesh):
    spec = ProcessSpec("ice", TREND, small_mesh, MaternParams(1.0, 0.5), 3, weight_variances=(1.0, 0.0), white_noise_var=0.1)
    b = build_block(spec)
    assert [c for c, _, _ in b.components] == ["beta0", "w", "w", "w"]
    for t in range(3):
        assert [c for c, _, _ in b.epoch_terms[t]] == ["beta0", "w"]


def test_trend_variance_grows_quadratically(small_mesh):
    spec = ProcessSpec("ice", TREND, small_mesh, MaternParams(1.0, 0.5), 5, weight_variances=(0.5, 0.2), white_noise_var=0.1)
    b = build_block(spec)
    var = np.array([process_marginal_variance(b, t) for t in range(5)])
    # var_t = c0 + t^2 c1: second differences in t^2 are constant
    t2 = np.arange(5.0) ** 2
    slope = (var[1:] - var[:-1]) / np.diff(t2)[:, None]
    np.testing.assert_allclose(slope, slope[0][None, :].repeat(4, 0), rtol=1e-10)
    assert np.all(slope > 0)


@given(st.lists(st.floats(0.0, 100.0), min_size=2, max_size=30), st.floats(1e-3, 1.0), st.floats(0.0, 2.0))
def test_trend_variance_monotone_in_speed(speeds, base, gain):
    s = np.sort(np.array(speeds))
    v = trend_variance_from_speed(s, base, gain)
    assert np.all(np.diff(v) >= 0)
    assert np.all(v >= base)


def _dense_marginal(block, t):
    S = np.linalg.inv(block.Q.toarray())
    prior = stack([block])
    M = prior.process_field_matrix(block.name, t).toarray()
    return np.einsum("ij,jk,ik->i", M, S, M)


@pytest.mark.parametrize("kind", [SPATIAL_ONLY, AR1, TREND, "ar1-varying"])
def test_marginal_variance_against_dense(ten_vertex_mesh, kind):
    m = ten_vertex_mesh
    if kind == "ar1-varying":
        spec = ProcessSpec("p", AR1, m, MaternParams(0.8, 0.4), 3, ar_coefficient=np.linspace(0, 0.7, 10))
    else:
        spec = ProcessSpec(
            "p", kind, m, MaternParams(0.8, 0.4), 3, ar_coefficient=0.6,
            weight_variances=(0.7, np.linspace(0.1, 1.0, 10)), white_noise_var=0.05,
        )
    b = build_block(spec)
    for t in range(3):
        np.testing.assert_allclose(process_marginal_variance(b, t), _dense_marginal(b, t), rtol=1e-10)


def test_stack_layout_and_density(ten_vertex_mesh):
    m = ten_vertex_mesh
    g = build_block(ProcessSpec("gia", SPATIAL_ONLY, m, MaternParams(1.0, 0.5), 2))
    s = build_block(ProcessSpec("smb", AR1, m, MaternParams(0.5, 0.3), 2, ar_coefficient=0.4))
    fe = fixed_effects_prior("beta", {"intercept": 1e-6, "elevation": 0.1})
    prior = stack([g, s, fe])
    assert prior.size == 10 + 20 + 2
    for i in range(prior.size):
        assert prior.index(*prior.lookup(i)) == i
    assert prior.dense_indices == (30, 31)
    x = np.random.default_rng(0).standard_normal(prior.size)
    parts = [stack([b]).log_density(x[sl]) for b, sl in ((g, slice(0, 10)), (s, slice(10, 30)), (fe, slice(30, 32)))]
    assert prior.log_density(x) == pytest.approx(sum(parts), rel=1e-12)
    with pytest.raises(ValueError):
        stack([g, g])


def test_stack_order_permutation(ten_vertex_mesh):
    m = ten_vertex_mesh
    g = build_block(ProcessSpec("gia", SPATIAL_ONLY, m, MaternParams(1.0, 0.5), 2))
    s = build_block(ProcessSpec("smb", AR1, m, MaternParams(0.5, 0.3), 2, ar_coefficient=0.4))
    A, B = stack([g, s]), stack([s, g])
    P = np.zeros((30, 30))
    for i in range(30):
        proc, comp, t, off = A.lookup(i)
        P[B.index(proc, comp, t, off), i] = 1.0
    np.testing.assert_allclose(P.T @ B.Q.toarray() @ P, A.Q.toarray(), atol=0)


def test_spec_validation(ten_vertex_mesh):
    m = ten_vertex_mesh
    with pytest.raises(ValueError):
        ProcessSpec("x", "quadratic", m, MaternParams(1, 1))
    with pytest.raises(ValueError):
        ProcessSpec("x", AR1, m, MaternParams(1, 1), 2, ar_coefficient=1.0)
    with pytest.raises(ValueError):
        ProcessSpec("x", TREND, m, MaternParams(1, 1), 2, weight_variances=(-1.0, 1.0))
    with pytest.raises(ValueError):
        fixed_effects_prior("b", {"a": 0.0})
