import numpy as np
import pytest

from poegibbs import analysis, factors, gaussian_sampler, glm, linops, topologies


def dense_cov(model):
    mean, cov = gaussian_sampler.cond_gaussian_params_dense(model)
    return cov


def test_factor_and_product_layouts():
    f = factors.Laplace(1.0)
    case = topologies.build_baseline("factor", f)
    assert linops.to_dense(case.model.operator).tolist() == [[1.0]]
    assert case.labels == ("state",)
    assert case.spec("state").law == "factor"

    case = topologies.build_baseline("product", f)
    K = linops.to_dense(case.model.operator)
    assert K.shape == (5, 1)
    assert np.all(K == 1.0)
    assert case.spec("state").law == "product"
    assert case.probe_matrix().tolist() == [[1.0]]


def test_loop_layout_and_completion():
    f = factors.Normal(0.0, 1.0)
    case = topologies.build_baseline("loop", f)
    K = linops.to_dense(case.model.operator)
    assert K.shape == (5, 4)
    want = np.array(
        [
            [-1.0, 1.0, 0.0, 0.0],
            [-1.0, 0.0, 1.0, 0.0],
            [0.0, -1.0, 0.0, 1.0],
            [0.0, 0.0, -1.0, 1.0],
            [0.25, 0.25, 0.25, 0.25],
        ]
    )
    assert np.array_equal(K, want)
    assert linops.has_full_column_rank(case.model.operator)
    # edge rows alone lose the constant direction
    assert np.linalg.matrix_rank(want[:4]) == 3
    assert case.labels == ("edge",)
    assert np.array_equal(case.probe_matrix(), want[:4])


def test_grid_layout():
    f = factors.Normal(0.0, 1.0)
    case = topologies.build_baseline("grid", f)
    K = linops.to_dense(case.model.operator)
    assert K.shape == (8, 6)
    assert linops.has_full_column_rank(case.model.operator)
    assert case.labels == ("inner-edge", "outer-edge")
    sl = case.probe_slices()
    assert sl["inner-edge"] == slice(0, 1)
    assert sl["outer-edge"] == slice(1, 7)
    inner = case.spec("inner-edge").probes
    assert inner.shape == (1, 6)
    assert inner[0, 1] == -1.0 and inner[0, 4] == 1.0
    assert case.spec("inner-edge").law == "grid-inner"
    assert case.spec("outer-edge").law == "grid-outer"


def test_pin_completion_row():
    f = factors.Laplace(1.0)
    case = topologies.build_baseline("loop", f, completion="pin")
    K = linops.to_dense(case.model.operator)
    assert np.array_equal(K[4], np.array([1.0, 0.0, 0.0, 0.0]))
    assert linops.has_full_column_rank(case.model.operator)
    assert case.model.blocks[1].factor.kind == "normal"


def test_completions_agree_on_projections():
    # Gaussian case is exact: the probe covariance must not depend on the
    # completion row, while the full state covariance does.
    f = factors.Normal(0.0, 1.0)
    mean_case = topologies.build_baseline("loop", f, completion="mean")
    pin_case = topologies.build_baseline("loop", f, completion="pin")
    P = mean_case.probe_matrix()
    cov_mean = dense_cov(mean_case.model)
    cov_pin = dense_cov(pin_case.model)
    assert not np.allclose(cov_mean, cov_pin)
    np.testing.assert_allclose(P @ cov_mean @ P.T, P @ cov_pin @ P.T, rtol=1e-12)


def test_edge_symmetry_normal_case():
    f = factors.Normal(0.0, 1.0)
    loop = topologies.build_baseline("loop", f)
    P = loop.probe_matrix()
    var = np.diag(P @ dense_cov(loop.model) @ P.T)
    np.testing.assert_allclose(var, 0.75, rtol=1e-12)

    grid = topologies.build_baseline("grid", f)
    P = grid.probe_matrix()
    var = np.diag(P @ dense_cov(grid.model) @ P.T)
    sl = grid.probe_slices()
    np.testing.assert_allclose(var[sl["inner-edge"]], 0.6, rtol=1e-12)
    np.testing.assert_allclose(var[sl["outer-edge"]], 11.0 / 15.0, rtol=1e-12)


def test_ground_truth_dispatch():
    f = factors.Normal(0.0, 1.0)
    case = topologies.build_baseline("loop", f)
    gt = case.ground_truth("edge")
    m1 = np.trapezoid(gt.x * gt.values, gt.x)
    m2 = np.trapezoid(gt.x**2 * gt.values, gt.x)
    assert abs(m1) < 1e-12
    assert abs(m2 - 0.75) < 1e-9


def test_recorder_and_pooling():
    f = factors.Laplace(1.0)
    case = topologies.build_baseline("grid", f)
    rec = case.recorder()
    x = np.arange(18, dtype=float).reshape(3, 6)
    rec.observe(1, x)
    rec.observe(2, x + 1.0)
    traj = rec.trajectory()
    assert traj.shape == (2, 3, 7)
    pooled = topologies.pooled_marginal(traj, case.probe_slices()["outer-edge"])
    assert pooled.shape == (2, 18)
    # constant shift cancels in differences
    np.testing.assert_allclose(traj[0], traj[1])


def test_scaled_ones():
    x = topologies.scaled_ones(4, 15.0)
    assert np.allclose(np.linalg.norm(x), 15.0)
    assert np.ptp(x) == 0.0
    with pytest.raises(ValueError, match="invalid-argument"):
        topologies.scaled_ones(4, -1.0)


def test_invalid_names_raise():
    f = factors.Laplace(1.0)
    with pytest.raises(ValueError, match="invalid-argument"):
        topologies.build_baseline("ring", f)
    with pytest.raises(ValueError, match="invalid-argument"):
        topologies.build_baseline("loop", f, completion="corner")
    with pytest.raises(ValueError, match="invalid-argument"):
        topologies.build_baseline("loop", f).spec("state")


def test_mixture_factor_cases_build():
    gsm = factors.gsm_discretize_laplace(1.0, 64)
    case = topologies.build_baseline("loop", gsm)
    assert case.model.m == 5
    gt = case.ground_truth("edge")
    assert abs(np.trapezoid(gt.values, gt.x) - 1.0) < 1e-8
