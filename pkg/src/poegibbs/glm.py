"""Gaussian latent models for products of experts and their Gibbs sampler.

A product of experts f_X(x) propto prod_i phi_i((Kx)_i) is lifted to a
Gaussian latent model: rows of K are partitioned into groups, each group
carries a factor whose latent value Z_g makes the group conditionally
Gaussian, t | z ~ N(mu(z), var(z)). The two-block Gibbs sweep alternates
z ~ f_{Z|X} (independent univariate draws per group) and
x ~ f_{X|Z} = N(mu(z), Sigma(z)) via the matrix-free perturbation sampler.

Models are built either directly from an operator plus factor blocks, or
through the image-prior and posterior constructors below. Latent states are
lists parallel to the model's factor blocks (None for Gaussian blocks);
chains are batched along a leading axis with one RNG stream per chain.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import factors, gaussian_sampler, linops


@dataclass
class FactorBlock:
    """A factor shared by a batch of same-shaped row groups.

    rows has shape (groups, group_size); each row of it lists the operator
    rows forming one group (one latent slot). Singleton groups use the
    signed projection value; larger groups use its Euclidean norm
    (isotropic coupling), which requires a scale-mixture factor.
    """

    factor: object
    rows: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rows, dtype=np.int64)
        if r.ndim != 2:
            # flat input means one singleton group per listed row
            r = r.reshape(-1, 1)
        self.rows = r

    @property
    def group_size(self):
        return self.rows.shape[1]

    def group_values(self, t):
        """Per-group conditioning value from row projections t = Kx."""
        if self.group_size == 1:
            return t[..., self.rows[:, 0]]
        return np.sqrt(np.sum(t[..., self.rows] ** 2, axis=-1))


class GlmModel:
    """Operator K plus a factor-block partition of its rows."""

    def __init__(self, operator, blocks, image_shape=None):
        self.operator = operator
        self.blocks = list(blocks)
        self.image_shape = image_shape
        self._probe_cache = {}
        covered = np.concatenate([b.rows.ravel() for b in self.blocks])
        covered.sort()
        if covered.size != operator.m or not np.array_equal(
            covered, np.arange(operator.m)
        ):
            raise ValueError(
                "invalid-argument: blocks must partition the operator rows"
            )
        for b in self.blocks:
            if b.group_size > 1:
                f = b.factor
                zero_normal = f.kind == "normal" and not np.any(f.mean)
                if not ((f.has_latent and f.kind != "gmm") or zero_normal):
                    raise ValueError(
                        "invalid-argument: grouped rows need a scale-mixture factor"
                    )

    @property
    def n(self):
        return self.operator.n

    @property
    def m(self):
        return self.operator.m

    @property
    def groups(self):
        """Row indices per latent slot, flattened across blocks."""
        return [tuple(r) for b in self.blocks for r in b.rows]

    @property
    def row_factors(self):
        """The factor attached to each latent slot, aligned with groups."""
        return [b.factor for b in self.blocks for _ in range(len(b.rows))]

    def mu_var_from_latents(self, z=None):
        """Row means mu0 and variances var0 of the lifted Gaussian given z.

        z is a list parallel to blocks (entries None for Gaussian blocks);
        batched entries of shape (..., groups) yield (..., m) outputs.
        """
        batch = ()
        if z is not None:
            for zb in z:
                if zb is not None:
                    batch = np.broadcast_shapes(batch, np.shape(zb)[:-1])
        mu0 = np.zeros(batch + (self.m,))
        var0 = np.empty(batch + (self.m,))
        for k, b in enumerate(self.blocks):
            zb = z[k] if z is not None else None
            if b.factor.has_latent:
                if zb is None:
                    raise ValueError(
                        "invalid-argument: missing latent values for a "
                        f"{b.factor.kind} block"
                    )
                mu, var = b.factor.latent_mean_var(zb)
            else:
                mu, var = b.factor.latent_mean_var()
            mu = np.asarray(mu, dtype=float)
            var = np.asarray(var, dtype=float)
            # one latent per group, shared by every row of the group
            mu0[..., b.rows] = mu[..., None] if mu.ndim else mu
            var0[..., b.rows] = var[..., None] if var.ndim else var
        return mu0, var0

    def precond_diag(self, weights, cfg):
        """Preconditioner diagonal for the normal equations, per config.

        Analytic diag(K^T W K) where the operator supports it; stacked
        blocks without support (spectral rows) fall back to a probed
        unit-weight diagonal scaled by the block's mean weight, cached on
        first use. Oversized unsupported operators degrade to identity.
        """
        if cfg.preconditioner == "identity":
            return np.ones(self.n)
        op = self.operator
        weights = np.asarray(weights, dtype=float)
        try:
            d = op.sq_adjoint_diag(weights)
            return np.where(d > 0, d, 1.0)
        except linops.UnsupportedOperatorError:
            pass
        parts = op.blocks if isinstance(op, linops.Stacked) else [op]
        offsets = np.concatenate([[0], np.cumsum([p.m for p in parts])])
        d = np.zeros(weights.shape[:-1] + (self.n,))
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            w = weights[..., lo:hi]
            try:
                d = d + p.sq_adjoint_diag(w)
                continue
            except linops.UnsupportedOperatorError:
                if self.n > 16384:
                    return np.ones(self.n)
            unit = self._probe_cache.get(id(p))
            if unit is None:
                # columns of K via basis vectors; diag_j = sum_i K_ij^2 w_i
                unit = np.sum(p.apply(np.eye(self.n)) ** 2, axis=-1)
                self._probe_cache[id(p)] = unit
            d = d + w.mean(axis=-1)[..., None] * unit
        return np.where(d > 0, d, 1.0)

    def log_density(self, x):
        """Unnormalized log f_X(x): sum of factor log-densities at Kx."""
        t = self.operator.apply(np.asarray(x, dtype=float))
        out = 0.0
        for b in self.blocks:
            out = out + b.factor.logpdf(b.group_values(t)).sum(axis=-1)
        return out

    def grad_log_density(self, x):
        """Gradient K^T [phi'_i/phi_i](Kx) of the unnormalized log-density."""
        t = self.operator.apply(np.asarray(x, dtype=float))
        g = np.zeros_like(t)
        for b in self.blocks:
            vals = b.group_values(t)
            if b.group_size == 1:
                g[..., b.rows[:, 0]] = b.factor.dlogpdf(vals)
            else:
                s = np.maximum(vals, 1e-12)
                coef = b.factor.dlogpdf(s) / s
                g[..., b.rows] = coef[..., None] * t[..., b.rows]
        return self.operator.apply_adjoint(g)


@dataclass
class ChainState:
    """Batched Gibbs chain state: x is (chains, n), z the latent list."""

    x: np.ndarray
    z: list | None
    rngs: list
    warm_start: np.ndarray | None = None


@dataclass
class MarginalRecorder:
    """Collects scalar probe marginals <v, x> per iteration per chain.

    probes is (P, n); observe stores an (chains, P) array per iteration and
    forwards it to the optional callback(iteration, values). trajectory()
    returns the stacked (iterations, chains, P) array.
    """

    probes: np.ndarray
    callback: object = None
    store: bool = True
    iterations: list = field(default_factory=list)
    values: list = field(default_factory=list)

    def __post_init__(self):
        self.probes = np.atleast_2d(np.asarray(self.probes, dtype=float))

    def observe(self, iteration, x):
        vals = x @ self.probes.T
        self.iterations.append(iteration)
        if self.store:
            self.values.append(vals)
        if self.callback is not None:
            self.callback(iteration, vals)

    def trajectory(self):
        return np.array(self.values)


@dataclass
class RunResult:
    state: ChainState
    recorder: MarginalRecorder | None


def sample_z_given_x(model, x, rng):
    """Draw all group latents given x; one list entry per factor block.

    rng is a single Generator, or a per-chain sequence matching the leading
    axis of x (each chain then consumes only its own stream).
    """
    t = model.operator.apply(np.asarray(x, dtype=float))
    rng_list = rng if isinstance(rng, (list, tuple)) else None
    z = []
    for b in model.blocks:
        f = b.factor
        if not f.has_latent:
            z.append(None)
            continue
        vals = b.group_values(t)
        if rng_list is None:
            z.append(f.sample_conditional_latent(vals, rng))
        elif f.kind == "gmm":
            z.append(_gmm_latents_per_chain(f, vals, rng_list))
        else:
            out = np.empty(vals.shape)
            for c, r in enumerate(rng_list):
                out[c] = f.sample_conditional_latent(vals[c], r)
            z.append(out)
    return z


def _gmm_latents_per_chain(f, vals, rngs):
    # responsibilities batched across chain chunks, draw per chain stream
    count, groups = vals.shape
    chunk = max(1, int(4e6) // max(groups * f.w.size, 1))
    out = np.empty((count, groups), dtype=np.int64)
    for lo in range(0, count, chunk):
        resp = f.responsibilities(vals[lo : lo + chunk])
        for c in range(resp.shape[0]):
            out[lo + c] = factors.sample_categorical(rngs[lo + c], resp[c])
    return out


def gibbs_step(model, state, cfg=None):
    """One two-block sweep: z from f_{Z|X}, then x from f_{X|Z}."""
    cfg = cfg or gaussian_sampler.CgConfig()
    z = sample_z_given_x(model, state.x, state.rngs)
    mu0, var0 = model.mu_var_from_latents(z)
    y = gaussian_sampler.perturb_targets(state.rngs, mu0, var0)
    w = 1.0 / var0
    rhs = model.operator.apply_adjoint(y * w)
    warm = state.warm_start if state.warm_start is not None else state.x
    x = gaussian_sampler.cg_normal_eq(
        model.operator, w, rhs, x0=warm, config=cfg,
        diag=model.precond_diag(w, cfg),
    )
    return ChainState(x=x, z=z, rngs=state.rngs, warm_start=x)


def run_chains(model, x0, iterations, chains, cfg=None, seed=0, recorder=None):
    """Run independent Gibbs chains from a common start.

    Every chain starts at x0 with its own stream spawned from seed; the
    chain-0 trajectory does not depend on the chain count. The recorder, if
    given, observes each post-sweep state. Returns the final state and the
    recorder.
    """
    cfg = cfg or gaussian_sampler.CgConfig()
    x0 = np.asarray(x0, dtype=float)
    if x0.ndim == 0:
        x0 = np.full(model.n, float(x0))
    x = np.array(np.broadcast_to(x0, (chains, model.n)))
    rngs = [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(chains)]
    state = ChainState(x=x, z=None, rngs=rngs, warm_start=x)
    for it in range(1, iterations + 1):
        try:
            state = gibbs_step(model, state, cfg)
        except gaussian_sampler.ConvergenceError as e:
            raise gaussian_sampler.ConvergenceError(
                f"convergence-failure at sweep {it}: {e}"
            ) from e
        if recorder is not None:
            recorder.observe(it, state.x)
    return RunResult(state=state, recorder=recorder)


def build_image_prior(height, width, factor, lam=1.0, isotropic=False):
    """Periodic finite-difference image prior with factor phi on each edge.

    The operator is lam times the circular 2-D gradient (horizontal rows
    first). Anisotropic models treat every row as its own group; isotropic
    models pair each pixel's horizontal and vertical rows, which requires a
    symmetric scale-mixture factor.
    """
    if height < 1 or width < 1:
        raise ValueError("invalid-argument: image must be at least 1x1")
    if lam <= 0:
        raise ValueError("invalid-argument: lam must be positive")
    base = linops.Grad2dCirc(height, width)
    op = base if lam == 1.0 else linops.Scaled(base, lam)
    npix = height * width
    if isotropic:
        if factor.kind == "gmm":
            raise ValueError(
                "invalid-argument: isotropic grouping needs a scale-mixture factor"
            )
        rows = np.stack([np.arange(npix), npix + np.arange(npix)], axis=1)
        blocks = [FactorBlock(factor, rows)]
    else:
        blocks = [FactorBlock(factor, np.arange(2 * npix)[:, None])]
    return GlmModel(op, blocks, image_shape=(height, width))


def extend_improper(model, phi0=None):
    """Append a mean-row factor so rank-deficient difference priors integrate.

    phi0 pins the distribution of the sample mean; it defaults to a standard
    Gaussian. Projections onto the operator's row space are invariant to the
    choice.
    """
    phi0 = phi0 if phi0 is not None else factors.Normal(0.0, 1.0)
    op = linops.Stacked([model.operator, linops.MeanRow(model.n)])
    blocks = model.blocks + [FactorBlock(phi0, np.array([[model.m]]))]
    return GlmModel(op, blocks, image_shape=model.image_shape)


def build_posterior_denoising(prior, y, noise_var):
    """Posterior for y = x + noise: identity observation rows ahead of the prior."""
    y = np.ravel(np.asarray(y, dtype=float))
    if y.size != prior.n:
        raise ValueError("invalid-argument: observation length must equal n")
    if noise_var <= 0:
        raise ValueError("invalid-argument: noise_var must be positive")
    op = linops.Stacked([linops.Identity(prior.n), prior.operator])
    like = FactorBlock(factors.Normal(y, noise_var), np.arange(prior.n)[:, None])
    shifted = [FactorBlock(b.factor, b.rows + prior.n) for b in prior.blocks]
    return GlmModel(op, [like] + shifted, image_shape=prior.image_shape)


def build_posterior_dct_inpaint(prior, y, mask, noise_var):
    """Posterior for partial DCT measurements y = M D x + noise."""
    if prior.image_shape is None:
        raise ValueError("invalid-argument: prior lacks an image shape")
    if noise_var <= 0:
        raise ValueError("invalid-argument: noise_var must be positive")
    mask = np.asarray(mask)
    rows = np.flatnonzero(mask) if mask.dtype == bool else mask.astype(np.int64)
    if rows.size == 0:
        raise ValueError("invalid-argument: empty measurement mask")
    y = np.ravel(np.asarray(y, dtype=float))
    if y.size != rows.size:
        raise ValueError("invalid-argument: one observation per kept coefficient")
    h, w = prior.image_shape
    sel = linops.RowSelection(linops.Dct2d(h, w), rows)
    op = linops.Stacked([sel, prior.operator])
    like = FactorBlock(factors.Normal(y, noise_var), np.arange(rows.size)[:, None])
    shifted = [FactorBlock(b.factor, b.rows + rows.size) for b in prior.blocks]
    return GlmModel(op, [like] + shifted, image_shape=prior.image_shape)


def zero_fill_dct(image_shape, mask, y):
    """Adjoint reconstruction D^T M^T y: unmeasured coefficients set to zero."""
    h, w = image_shape
    mask = np.asarray(mask)
    rows = np.flatnonzero(mask) if mask.dtype == bool else mask.astype(np.int64)
    sel = linops.RowSelection(linops.Dct2d(h, w), rows)
    return sel.apply_adjoint(np.asarray(y, dtype=float))
