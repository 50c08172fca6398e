"""MALA proposal, acceptance rule, runner plumbing, and step-size warmup."""
import numpy as np
import pytest

from poegibbs import baselines, factors, glm, linops
import oracles


def scalar_model(factor):
    return glm.GlmModel(
        linops.DenseSmall(np.array([[1.0]])),
        [glm.FactorBlock(factor, [[0]])],
    )


class _ShiftedLogDensity:
    """Same target with a constant added to the log-density."""

    def __init__(self, base, shift):
        self._base = base
        self._shift = shift

    def __getattr__(self, name):
        return getattr(self._base, name)

    def log_density(self, x):
        return self._base.log_density(x) + self._shift


def test_grad_logpdf_closed_forms():
    rng = np.random.default_rng(0)
    model = glm.extend_improper(glm.build_image_prior(2, 3, factors.Normal(0.0, 1.0)))
    K = linops.to_dense(model.operator)
    x = rng.normal(size=6)
    assert np.allclose(baselines.grad_logpdf(model, x), -K.T @ (K @ x))

    lap = glm.GlmModel(
        linops.DenseSmall(np.array([[2.0, 1.0], [0.5, 3.0]])),
        [glm.FactorBlock(factors.Laplace(0.7), np.arange(2))],
    )
    x_pos = np.array([1.0, 1.0])  # both projections positive
    Kl = np.array([[2.0, 1.0], [0.5, 3.0]])
    assert np.allclose(
        baselines.grad_logpdf(lap, x_pos), -(1 / 0.7) * Kl.T @ np.ones(2)
    )


def test_grad_logpdf_matches_finite_differences():
    rng = np.random.default_rng(1)
    model = scalar_model(factors.Gmm([0.4, 0.6], [-1.0, 0.8], [0.3, 0.5]))
    for x0 in rng.normal(size=5):
        x = np.array([x0])
        g = baselines.grad_logpdf(model, x)
        eps = 1e-6
        want = (
            baselines.logpdf_unnorm(model, x + eps)
            - baselines.logpdf_unnorm(model, x - eps)
        ) / (2 * eps)
        assert abs(g[0] - want) < 1e-5 * max(1.0, abs(want))


def test_mala_standard_normal_moments_and_acceptance():
    model = scalar_model(factors.Normal(0.0, 1.0))
    cfg = baselines.MalaConfig(step_size=0.5, record_accept_rate=True)
    res = baselines.run_mala(model, 0.0, iterations=500, chains=200, cfg=cfg,
                             seed=2, recorder=glm.MarginalRecorder(np.ones((1, 1))))
    rate = res.accept_rate.mean()
    assert 0.5 < rate < 1.0
    traj = res.recorder.trajectory()[100:]  # drop burn-in sweeps
    pooled = traj.ravel()
    assert abs(pooled.var() - 1.0) < 0.02
    assert abs(pooled.mean()) < 0.02


def test_mala_tiny_step_accepts_everything():
    model = scalar_model(factors.StudentT(3.0))
    cfg = baselines.MalaConfig(step_size=1e-6, record_accept_rate=True)
    res = baselines.run_mala(model, 0.5, iterations=200, chains=100, cfg=cfg, seed=3)
    assert res.accept_rate.mean() > 0.999


def test_mala_acceptance_invariant_to_logpdf_constant():
    model = scalar_model(factors.Laplace(1.0))
    shifted = _ShiftedLogDensity(model, 7.3)
    rngs_a = [np.random.default_rng(s) for s in np.random.SeedSequence(4).spawn(8)]
    rngs_b = [np.random.default_rng(s) for s in np.random.SeedSequence(4).spawn(8)]
    x = np.linspace(-2, 2, 8)[:, None]
    cfg = baselines.MalaConfig(step_size=0.4)
    xa, acc_a = baselines.mala_step(model, x, cfg, rngs_a)
    xb, acc_b = baselines.mala_step(shifted, x, cfg, rngs_b)
    assert np.array_equal(acc_a, acc_b)
    assert np.array_equal(xa, xb)


def test_mala_gmm_long_run_matches_analytic_law():
    f = factors.Gmm([0.5, 0.5], [-1.0, 1.0], [0.25, 0.25])
    model = scalar_model(f)
    tau = baselines.tune_step_size(model, 0.0, iterations=200, chains=32, seed=5)
    cfg = baselines.MalaConfig(step_size=tau, record_accept_rate=True)
    rec = glm.MarginalRecorder(np.ones((1, 1)))
    res = baselines.run_mala(model, 0.0, iterations=2000, chains=100, cfg=cfg,
                             seed=6, recorder=rec)
    assert 0.3 < res.accept_rate.mean() < 0.8
    pooled = rec.trajectory()[1000:].ravel()
    grid = np.linspace(-6.0, 6.0, 8001)
    assert oracles.w1_empirical_vs_grid(pooled, grid, f.pdf(grid)) < 0.01


def test_run_mala_determinism_and_chain_zero_invariance():
    model = glm.extend_improper(glm.build_image_prior(2, 2, factors.StudentT(3.0)))
    cfg = baselines.MalaConfig(step_size=0.1)
    a = baselines.run_mala(model, 0.0, iterations=20, chains=3, cfg=cfg, seed=7)
    b = baselines.run_mala(model, 0.0, iterations=20, chains=3, cfg=cfg, seed=7)
    assert np.array_equal(a.state.x, b.state.x)
    solo = baselines.run_mala(model, 0.0, iterations=20, chains=1, cfg=cfg, seed=7)
    assert np.array_equal(solo.state.x[0], a.state.x[0])
    assert a.accept_rate is None  # flag off by default


def test_tuned_step_lands_in_acceptance_window():
    model = scalar_model(factors.Normal(0.0, 1.0))
    tau = baselines.tune_step_size(model, 0.0, iterations=300, chains=32, seed=8)
    assert tau > 0
    cfg = baselines.MalaConfig(step_size=tau, record_accept_rate=True)
    res = baselines.run_mala(model, 0.0, iterations=400, chains=64, cfg=cfg, seed=9)
    assert 0.3 < res.accept_rate.mean() < 0.8


def test_mala_config_validation():
    with pytest.raises(ValueError, match="invalid-argument"):
        baselines.MalaConfig(step_size=0.0)
