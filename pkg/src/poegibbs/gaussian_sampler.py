"""Matrix-free sampling of the Gaussian conditional X | Z.

Given latent-dependent factor means mu0(z) and variances var0(z), the
conditional is N(mu(z), Sigma(z)) with Sigma(z) = (K^T Sigma0^{-1} K)^{-1}
and mu(z) = Sigma(z) K^T Sigma0^{-1} mu0(z). A draw is produced by
perturbing the factor targets, Y ~ N(mu0, Sigma0), and solving the normal
equations K^T Sigma0^{-1} K X = K^T Sigma0^{-1} Y with diagonally
preconditioned conjugate gradients; the solver tolerance is the only
approximation and no accept/reject correction is applied.

Model-facing entry points take a GlmModel and a latent state; the CG core
``cg_normal_eq`` is exposed separately and works on raw operators. All
routines are batched: leading axes are independent systems (chains), and the
CG loop freezes systems as they converge.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import linops


class ConvergenceError(RuntimeError):
    """CG failed to reach the residual tolerance (convergence-failure)."""


@dataclass
class CgConfig:
    """Conjugate-gradient settings.

    tolerance: absolute residual 2-norm target (> 0).
    max_iterations: iteration cap; defaults to 10 n when left None.
    preconditioner: "normal-eq-diagonal" uses diag(K^T Sigma0^{-1} K)
        (falling back to identity where the operator cannot provide it),
        "identity" disables preconditioning.
    """

    tolerance: float = 1e-8
    max_iterations: int | None = None
    preconditioner: str = "normal-eq-diagonal"

    def __post_init__(self):
        if self.tolerance <= 0:
            raise ValueError("invalid-argument: tolerance must be positive")
        if self.max_iterations is not None and self.max_iterations < 1:
            raise ValueError("invalid-argument: max_iterations must be at least 1")
        if self.preconditioner not in ("identity", "normal-eq-diagonal"):
            raise ValueError("invalid-argument: unknown preconditioner")


def normal_matvec(op, weights, x):
    """K^T diag(weights) K x, the normal-equation matvec."""
    return op.apply_adjoint(weights * op.apply(x))


def cg_normal_eq(op, weights, rhs, x0=None, config=None, diag=None,
                 return_info=False, keep_solutions=False):
    """Solve K^T diag(weights) K x = rhs with preconditioned CG.

    weights: (..., m) positive row weights (1 / var0 when sampling).
    rhs: (..., n); leading axes are independent systems.
    diag: optional preconditioner diagonal, (..., n); None derives it from
        the operator per the config (identity when unsupported).

    Returns x, or (x, info) when return_info is set; info carries the
    iteration count, per-iteration max residual norms, and, with
    keep_solutions, the iterate history.
    """
    config = config or CgConfig()
    weights = np.asarray(weights, dtype=float)
    rhs = np.asarray(rhs, dtype=float)
    if diag is None:
        if config.preconditioner == "identity":
            diag = np.ones(op.n)
        else:
            try:
                d = op.sq_adjoint_diag(weights)
                diag = np.where(d > 0, d, 1.0)
            except linops.UnsupportedOperatorError:
                diag = np.ones(op.n)
    else:
        diag = np.asarray(diag, dtype=float)
    max_iter = config.max_iterations if config.max_iterations is not None else 10 * op.n

    x = (
        np.zeros_like(rhs)
        if x0 is None
        else np.array(np.broadcast_to(x0, rhs.shape), dtype=float)
    )
    r = rhs - normal_matvec(op, weights, x)
    z = r / diag
    p = z.copy()
    rz = np.sum(r * z, axis=-1)
    resnorm = np.linalg.norm(r, axis=-1)
    history = [float(np.max(resnorm))]
    solutions = [x.copy()] if keep_solutions else None
    iterations = 0
    for _ in range(max_iter):
        active = resnorm > config.tolerance
        if not np.any(active):
            break
        iterations += 1
        Ap = normal_matvec(op, weights, p)
        pAp = np.sum(p * Ap, axis=-1)
        safe = active & (pAp > 0)
        alpha = np.where(safe, rz / np.where(safe, pAp, 1.0), 0.0)
        x = x + alpha[..., None] * p
        r = r - alpha[..., None] * Ap
        z = r / diag
        rz_new = np.sum(r * z, axis=-1)
        beta = np.where(rz > 0, rz_new / np.where(rz > 0, rz, 1.0), 0.0)
        p = z + beta[..., None] * p
        rz = rz_new
        resnorm = np.linalg.norm(r, axis=-1)
        history.append(float(np.max(resnorm)))
        if keep_solutions:
            solutions.append(x.copy())
    if np.any(resnorm > config.tolerance):
        bad = np.argwhere(np.atleast_1d(resnorm > config.tolerance)).ravel()
        raise ConvergenceError(
            "convergence-failure: CG stopped after "
            f"{iterations} iterations with max residual {float(np.max(resnorm)):.3e} "
            f"(target {config.tolerance:.3e}) on {bad.size} system(s), "
            f"first indices {bad[:5].tolist()}"
        )
    if return_info:
        info = {"iterations": iterations, "residual_norms": np.array(history)}
        if keep_solutions:
            info["solutions"] = np.array(solutions)
        return x, info
    return x


def perturb_targets(rng, mu0, var0):
    """Draw Y ~ N(mu0, diag(var0)) from given row means/variances.

    rng may be one Generator or a per-chain sequence; with a sequence, the
    leading axis of mu0/var0 indexes chains and each chain uses its own
    stream.
    """
    mu0 = np.asarray(mu0, dtype=float)
    var0 = np.asarray(var0, dtype=float)
    sd = np.sqrt(var0)
    if isinstance(rng, (list, tuple)):
        shape = np.broadcast_shapes((len(rng), 1), mu0.shape, sd.shape)
        mu0b = np.broadcast_to(mu0, shape)
        sdb = np.broadcast_to(sd, shape)
        out = np.empty(shape)
        for c, r in enumerate(rng):
            out[c] = mu0b[c] + sdb[c] * r.normal(size=shape[1:])
        return out
    shape = np.broadcast_shapes(mu0.shape, sd.shape)
    return mu0 + sd * rng.normal(size=shape)


def perturb(model, z, rng):
    """Y ~ N(mu0(z), Sigma0(z)): independent per-row Gaussian targets."""
    mu0, var0 = model.mu_var_from_latents(z)
    return perturb_targets(rng, mu0, var0)


def solve_normal_eq(model, z, y, x0=None, cfg=None, return_info=False):
    """Solve K^T Sigma0(z)^{-1} K x = K^T Sigma0(z)^{-1} y for the model."""
    cfg = cfg or CgConfig()
    _, var0 = model.mu_var_from_latents(z)
    w = 1.0 / var0
    rhs = model.operator.apply_adjoint(np.asarray(y, dtype=float) * w)
    diag = model.precond_diag(w, cfg)
    return cg_normal_eq(
        model.operator, w, rhs, x0=x0, config=cfg, diag=diag, return_info=return_info
    )


def sample_x_given_z(model, z, rng, warm_start=None, cfg=None):
    """One draw from X | Z = z via perturbation and a normal-equation solve."""
    y = perturb(model, z, rng)
    return solve_normal_eq(model, z, y, x0=warm_start, cfg=cfg)


def cond_gaussian_params_dense(model, z=None):
    """Exact mean and covariance of X | Z by dense assembly; small n only."""
    op = model.operator
    if op.n > 64:
        raise ValueError("invalid-argument: dense conditional is limited to n <= 64")
    mu0, var0 = model.mu_var_from_latents(z)
    K = linops.to_dense(op)
    mu0 = np.broadcast_to(np.asarray(mu0, dtype=float), (op.m,))
    var0 = np.broadcast_to(np.asarray(var0, dtype=float), (op.m,))
    prec = K.T @ (K / var0[:, None])
    cov = np.linalg.inv(prec)
    mean = cov @ (K.T @ (mu0 / var0))
    return mean, cov
