import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_rotation
from fullvel import kernels

backends = kernels.available_backends()
needs_two = pytest.mark.skipif(len(backends) < 2, reason="compiled backend not built")
seeds = st.integers(0, 2**32 - 1)


def test_use_backend_round_trip():
    prev = kernels.use_backend("python")
    assert kernels.BACKEND == "python"
    assert kernels.use_backend(prev) == "python"
    with pytest.raises(ValueError):
        kernels.use_backend("fortran")


def _solve_args(rng, n=32):
    R = random_rotation(rng)
    uv_q = rng.uniform(-0.6, 0.6, size=(n, 2))
    depth = rng.uniform(-5, 60, size=n)
    uv_p = uv_q + rng.normal(scale=0.05, size=(n, 2))
    uv_p[rng.random(n) < 0.05] = np.nan
    return (R, rng.normal(size=3), rng.normal(scale=0.5, size=3), rng.normal(size=3), uv_q, depth, uv_p,
            rng.normal(size=n) * 5, rng.random(n) < 0.5, rng.choice([-0.1, 0.05, 0.1]), 1e8)


@needs_two
@settings(max_examples=100, deadline=None)
@given(seeds)
def test_solve_batch_backends_agree(seed):
    args = _solve_args(np.random.default_rng(seed))
    a = backends["python"].solve_batch(*args)
    b = backends["cython"].solve_batch(*args)
    np.testing.assert_array_equal(a[5], b[5])
    ok = a[5] == kernels.STATUS_OK
    np.testing.assert_allclose(a[0][ok], b[0][ok], rtol=1e-9, atol=1e-9)
    np.testing.assert_allclose(a[1][ok], b[1][ok], rtol=1e-6)
    np.testing.assert_allclose(a[2][ok], b[2][ok], rtol=1e-9, atol=1e-9)
    np.testing.assert_allclose(a[3][ok], b[3][ok], atol=1e-15)
    np.testing.assert_allclose(a[4][ok], b[4][ok], atol=1e-12)
    assert np.isnan(a[0][~ok]).all() and np.isnan(b[0][~ok]).all()


@needs_two
@settings(max_examples=100, deadline=None)
@given(seeds)
def test_bilinear_flow_backends_agree(seed):
    rng = np.random.default_rng(seed)
    h, w = rng.integers(1, 12, size=2)
    vec = rng.normal(size=(h, w, 2))
    valid = rng.random((h, w)) > 0.1
    px = np.column_stack([rng.uniform(-1, w, 50), rng.uniform(-1, h, 50)])
    px[:5] = np.column_stack([rng.integers(0, w, 5), rng.integers(0, h, 5)])
    fa, sa = backends["python"].bilinear_flow(vec, valid, px)
    fb, sb = backends["cython"].bilinear_flow(vec, valid, px)
    np.testing.assert_array_equal(sa, sb)
    np.testing.assert_allclose(fa, fb, atol=1e-14, equal_nan=True)


def _boxes(rng, nb):
    rots = np.array([random_rotation(rng) for _ in range(nb)])
    centers = np.column_stack([rng.uniform(-4, 4, nb), rng.uniform(-2, 2, nb), rng.uniform(-2, 30, nb)])
    half = rng.uniform(0.2, 2.0, size=(nb, 3))
    return rots, centers, half


@needs_two
@settings(max_examples=30, deadline=None)
@given(seeds)
def test_raycast_backends_agree(seed):
    rng = np.random.default_rng(seed)
    rots, centers, half = _boxes(rng, 3)
    cam = (50.0, 50.0, 20.0, 15.0, 40, 30)
    a = backends["python"].raycast_boxes(*cam, rots, centers, half)
    b = backends["cython"].raycast_boxes(*cam, rots, centers, half)
    np.testing.assert_array_equal(np.isinf(a), np.isinf(b))
    fin = np.isfinite(a)
    np.testing.assert_allclose(a[fin], b[fin], rtol=1e-12)


def test_raycast_axis_aligned_box(backend):
    impl = backends[backend]
    # unit-half-extent cube 10 m ahead: front face at z = 9 on the optical axis
    d = impl.raycast_boxes(10.0, 10.0, 2.0, 2.0, 5, 5, [np.eye(3)], [[0, 0, 10]], [[1, 1, 1]])
    assert d.shape == (1, 5, 5)
    assert d[0, 2, 2] == pytest.approx(9.0)
    assert np.isinf(d[0, 0, 0])
    # camera inside the box sees nothing of it
    inside = impl.raycast_boxes(10.0, 10.0, 2.0, 2.0, 5, 5, [np.eye(3)], [[0, 0, 0]], [[1, 1, 1]])
    assert np.isinf(inside).all()


@needs_two
@settings(max_examples=30, deadline=None)
@given(seeds)
def test_synthesize_flow_backends_agree(seed):
    rng = np.random.default_rng(seed)
    h, w = 12, 16
    ids = rng.integers(-2, 3, size=(h, w))
    depth = rng.uniform(1, 40, size=(h, w))
    vel = rng.normal(size=(3, 3)) * 5
    Ra, Rb = random_rotation(rng), random_rotation(rng)
    args = (20.0, 20.0, 8.0, 6.0, w, h, ids, depth, vel, Ra, rng.normal(size=3), Rb, rng.normal(size=3), 0.1)
    a = backends["python"].synthesize_flow(*args)
    b = backends["cython"].synthesize_flow(*args)
    np.testing.assert_array_equal(np.isnan(a), np.isnan(b))
    np.testing.assert_allclose(a, b, rtol=1e-9, atol=1e-9, equal_nan=True)


def test_synthesize_flow_static_identity(backend):
    impl = backends[backend]
    ids = np.full((4, 5), -1)
    flow = impl.synthesize_flow(5.0, 5.0, 2.0, 1.5, 5, 4, ids, np.full((4, 5), 7.0), np.zeros((0, 3)),
                                np.eye(3), np.zeros(3), np.eye(3), np.zeros(3), 0.1)
    np.testing.assert_allclose(flow, 0, atol=1e-12)


def test_benchmark_script_runs(capsys):
    import importlib.util
    from pathlib import Path

    path = Path(__file__).resolve().parents[1] / "benchmarks" / "bench_kernels.py"
    spec = importlib.util.spec_from_file_location("bench_kernels", path)
    mod = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(mod)
    before = kernels.BACKEND
    mod.main(["--repeat", "1", "--points", "5"])
    assert kernels.BACKEND == before
    out = capsys.readouterr().out
    assert "solve_batch" in out and "render_frame" in out
