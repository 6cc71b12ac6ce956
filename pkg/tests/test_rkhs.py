import numpy as np
import pandas as pd
import pytest

from exceptions import GridError, KernelError
from rkhs import (DenseGram, KernelSpec, ObservationSet, SpaceTimeGram, build_observation_matrix, gaussian_time,
                  optimal_recovery_row, periodic_gaussian, rkhs_norm_sq, spacetime_gram, spatial_gram, torus_matern)
from torus_grid import TorusGrid


@pytest.mark.parametrize("kernel", [
    lambda X, Y: periodic_gaussian(X, Y, 0.3),
    lambda X, Y: torus_matern(X, Y, 0.3, 1.5),
], ids=["gaussian", "matern"])
def test_kernels_are_periodic_and_symmetric(kernel, rng):
    X = rng.uniform(size=(7, 2))
    Y = rng.uniform(size=(5, 2))
    K = kernel(X, Y)
    np.testing.assert_allclose(kernel(X + np.array([1.0, -2.0]), Y), K, rtol=1e-12)
    np.testing.assert_allclose(kernel(Y, X), K.T, rtol=1e-12)
    np.testing.assert_allclose(np.diag(kernel(X, X)), np.diag(kernel(X, X))[0])


def test_periodic_gaussian_value():
    # wrapped distance 1/4: exp(-2 sin^2(pi / 4) / l^2) = exp(-1 / l^2)
    K = periodic_gaussian(np.array([0.0]), np.array([0.75]), 0.5)
    assert K[0, 0] == pytest.approx(np.exp(-4.0))


@pytest.mark.parametrize("smoothness", [0.5, 1.5, 2.5])
def test_matern_gram_is_positive_definite(smoothness):
    grid = TorusGrid(1, 12)
    K = torus_matern(grid.nodes(), grid.nodes(), 0.2, smoothness)
    assert np.min(np.linalg.eigvalsh(K)) > 0.0


def test_gram_reconstruct_interpolates_nodes(grid_2d, rng):
    gram = spatial_gram(KernelSpec(lengthscale=0.3), grid_2d)
    Z = rng.normal(size=grid_2d.node_count)
    np.testing.assert_allclose(gram.reconstruct(Z, grid_2d.nodes()), Z, atol=1e-6)
    point = np.array([0.37, 0.81])
    assert optimal_recovery_row(point, gram) @ Z == pytest.approx(gram.reconstruct(Z, point[None, :])[0])


def test_precision_factors(grid_1d, rng):
    gram = spatial_gram(KernelSpec(kind="torus_matern", lengthscale=0.25, jitter=1e-6), grid_1d)
    theta = rng.normal(size=grid_1d.node_count)
    np.testing.assert_allclose(gram.sqrt_precision_transpose(gram.sqrt_precision_apply(theta)),
                               gram.precision_apply(theta), rtol=1e-8)
    v = rng.normal(size=grid_1d.node_count)
    assert rkhs_norm_sq(gram.kernel_apply(v), gram) == pytest.approx(v @ gram.kernel_apply(v), rel=1e-8)


def test_gram_without_jitter_on_degenerate_kernel_raises():
    with pytest.raises(KernelError):
        DenseGram(np.linspace(0, 1, 4), lambda X, Y: np.zeros((len(X), len(Y))), jitter=0.0)


@pytest.fixture
def st_gram(grid_1d):
    return spacetime_gram(KernelSpec(kind="spacetime_product", lengthscale=0.3, jitter=1e-6), grid_1d,
                          horizon=1.0, n_time=4)


def _dense_kron(st_gram):
    Kt = st_gram.time.kernel(st_gram.time.points, st_gram.time.points) + st_gram.time.jitter * np.eye(5)
    Kx = st_gram.space.kernel(st_gram.space.points, st_gram.space.points) + st_gram.space.jitter * np.eye(8)
    return np.kron(Kt, Kx)


def test_spacetime_gram_matches_dense_kronecker(st_gram, rng):
    assert st_gram.n_nodes == 40
    K = _dense_kron(st_gram)
    b = rng.normal(size=40)
    np.testing.assert_allclose(st_gram.solve(b), np.linalg.solve(K, b), rtol=1e-6, atol=1e-8)
    assert st_gram.norm_sq(b) == pytest.approx(b @ np.linalg.solve(K, b), rel=1e-6)


def test_spacetime_rows_match_dense_recovery(st_gram, rng):
    targets = np.column_stack([rng.uniform(size=6), rng.uniform(0, 1.0, size=6)])
    kt = st_gram.time.kernel(targets[:, -1:], st_gram.time.points)
    kx = st_gram.space.kernel(targets[:, :-1], st_gram.space.points)
    cross = np.einsum("nt,nx->ntx", kt, kx).reshape(6, -1)
    expected = np.linalg.solve(_dense_kron(st_gram), cross.T).T
    np.testing.assert_allclose(st_gram.rows(targets), expected, rtol=1e-6, atol=1e-8)
    Z = rng.normal(size=40)
    np.testing.assert_allclose(st_gram.reconstruct(Z, targets), expected @ Z, rtol=1e-6, atol=1e-8)


def test_time_kernel_lengthscale_scales_with_horizon():
    spec = KernelSpec(time_lengthscale=0.5)
    t = np.array([0.0, 1.0])
    np.testing.assert_allclose(spec.temporal_kernel(2.0)(t, t), gaussian_time(t, t, 1.0))


def test_kernel_spec_validation():
    with pytest.raises(KernelError):
        KernelSpec(kind="laplace")
    with pytest.raises(KernelError):
        KernelSpec(smoothness=1.0)
    with pytest.raises(KernelError):
        KernelSpec(lengthscale=0.0)
    with pytest.raises(KernelError):
        KernelSpec(spatial_kind="spacetime_product")
    spec = KernelSpec(kind="spacetime_product", spatial_kind="torus_matern")
    assert spec.for_space().kind == "torus_matern"


def test_observation_set_wraps_and_round_trips():
    obs = ObservationSet("m", np.array([[1.25, -0.5, 0.3], [0.1, 0.2, 0.9]]), [1.0, 2.0], sigma=1e-3, has_time=True)
    np.testing.assert_allclose(obs.targets[0], [0.25, 0.5, 0.3])
    assert obs.spatial_dim == 2
    frame = obs.to_frame()
    assert list(frame.columns) == ["x", "y", "t", "value", "sigma"]
    back = ObservationSet.from_frame(frame, "m")
    np.testing.assert_allclose(back.targets, obs.targets)
    np.testing.assert_allclose(back.values, obs.values)
    assert back.has_time and back.sigma == 1e-3
    with pytest.raises(GridError):
        ObservationSet("m", np.zeros((3, 1)), np.zeros(2))
    with pytest.raises(GridError):
        ObservationSet.from_frame(pd.DataFrame({"x": [0.1]}), "m")


def test_spatial_observation_map(grid_2d, rng):
    gram = spatial_gram(KernelSpec(lengthscale=0.3), grid_2d)
    obs = ObservationSet("V", rng.uniform(size=(5, 2)), np.zeros(5))
    W = build_observation_matrix(obs, gram)
    v = rng.normal(size=grid_2d.node_count)
    w = rng.normal(size=5)
    assert W.linear(v) @ w == pytest.approx(v @ W.linear_transpose(w))
    np.testing.assert_allclose(W.apply(v), gram.reconstruct(v, obs.targets), rtol=1e-8, atol=1e-10)


def test_spacetime_observation_map_folds_initial_slice(st_gram, rng):
    targets = np.column_stack([rng.uniform(size=7), rng.uniform(0.0, 1.0, size=7)])
    targets[0, -1] = 1.1
    obs = ObservationSet("m", targets, np.zeros(7), has_time=True)
    original = obs.targets.copy()
    m0 = rng.uniform(0.5, 1.5, size=8)
    W = build_observation_matrix(obs, st_gram, initial_slice=m0, horizon=1.0)
    np.testing.assert_array_equal(obs.targets, original)
    clamped = obs.clamped_targets(1.0)
    assert clamped[0, -1] == 1.0
    assert (W.n_obs, W.n_unknowns) == (7, 32)
    interior = rng.normal(size=32)
    full = np.concatenate([m0, interior])
    np.testing.assert_allclose(W.apply(interior), W.apply_full(full), rtol=1e-10, atol=1e-12)
    np.testing.assert_allclose(W.apply_full(full), st_gram.reconstruct(full, clamped), rtol=1e-8, atol=1e-10)
    np.testing.assert_allclose(W.to_dense() @ interior, W.linear(interior), rtol=1e-12, atol=1e-12)
    w = rng.normal(size=7)
    assert W.linear(interior) @ w == pytest.approx(interior @ W.linear_transpose(w))


def test_build_observation_matrix_errors(grid_1d, st_gram):
    spatial = spatial_gram(KernelSpec(), grid_1d)
    timed = ObservationSet("m", np.array([[0.1, 0.5]]), [1.0], has_time=True)
    untimed = ObservationSet("m", np.array([[0.1]]), [1.0])
    with pytest.raises(GridError):
        build_observation_matrix(timed, spatial)
    with pytest.raises(GridError):
        build_observation_matrix(untimed, st_gram, initial_slice=np.ones(8))
    with pytest.raises(GridError):
        build_observation_matrix(timed, st_gram)
    assert isinstance(st_gram, SpaceTimeGram)
