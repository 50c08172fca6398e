"""Factor catalog: experts and their Gaussian latent-variable lifts.

Each factor phi(t) is a density on the real line. Non-Gaussian factors are
represented as Gaussian mixtures with a scalar latent z so that
phi(t) = integral N(t; mu(z), var(z)) f(z) dz:

* Laplace(b): z ~ Exponential(rate 1/(2 b^2)), var(z) = z; conditional
  z | t is GIG(1/b^2, t^2, 1/2).
* StudentT(nu): z ~ Gamma(nu/2, nu/2), var(z) = 1/z; conditional
  z | t is Gamma((nu+1)/2, (nu+t^2)/2).
* SymGamma(alpha, beta): z ~ Gamma(alpha, beta), var(z) = z; conditional
  z | t is GIG(2 beta, t^2, alpha - 1/2).
* Gmm(w, mu, var): z is the component index with prior w; conditional
  weights are w_j N(t; mu_j, var_j) with the signed value t.
* Normal(mean, var): no latent.

Squared projections inside the GIG conditionals are floored at 1e-7 to keep
the samplers away from the degenerate boundary.
"""
from __future__ import annotations

import numpy as np
from scipy.special import erf, erfc, gammaln, kve, ndtri, stdtr, stdtrit

EPS_SQ = 1e-7

_LOG_2PI = np.log(2.0 * np.pi)


def _std_norm_sf(x):
    # P(N(0,1) > x), accurate deep into the tail
    return 0.5 * erfc(np.asarray(x, dtype=float) / np.sqrt(2.0))


def _log_norm_pdf(t, mean, var):
    return -0.5 * (_LOG_2PI + np.log(var)) - (t - mean) ** 2 / (2.0 * var)


# ---------------------------------------------------------------------------
# sampling primitives


def sample_gamma(rng, shape, rate, size=None):
    """Gamma draws parameterized by shape and rate."""
    shape = np.asarray(shape, dtype=float)
    rate = np.asarray(rate, dtype=float)
    return rng.gamma(shape, 1.0 / rate, size=size)


def sample_categorical(rng, weights):
    """Index draws from (possibly unnormalized) weights along the last axis."""
    w = np.asarray(weights, dtype=float)
    c = np.cumsum(w, axis=-1)
    total = c[..., -1]
    if np.any(total <= 0) or not np.all(np.isfinite(total)):
        raise ValueError("invalid-argument: categorical weights must sum to a positive finite value")
    u = rng.random(w.shape[:-1]) * total
    idx = np.sum(c < u[..., None], axis=-1)
    return np.minimum(idx, w.shape[-1] - 1)


def _sample_invgauss(rng, mu, lam):
    # Michael/Schucany/Haas transform with the cancellation-free root
    nu = rng.normal(size=mu.shape)
    c = mu * nu * nu / (2.0 * lam)
    x = mu / (1.0 + c + np.sqrt(c * (c + 2.0)))
    u = rng.random(mu.shape)
    return np.where(u <= mu / (mu + x), x, mu * mu / x)


def _gig_half(rng, a, b):
    # GIG(a, b, +1/2) is the reciprocal of an inverse Gaussian
    y = _sample_invgauss(rng, np.sqrt(a / b), a)
    return 1.0 / y


def _gig_log_target(t, p, omega, cosh_star):
    # log density of T = log W up to the mode value, W ~ GIG(omega, omega, p)
    tc = np.clip(t, -700.0, 700.0)
    tstar = np.arcsinh(p / omega)
    return p * (t - tstar) - omega * (np.cosh(tc) - cosh_star)


def _gig_general(rng, a, b, p):
    # three-piece rejection in log space; the log density of T = log W is
    # concave, so tangent tails at the two drop-by-one points dominate it
    omega = np.sqrt(a * b)
    sgn = np.where(p < 0.0, -1.0, 1.0)
    pp = np.abs(p)
    tstar = np.arcsinh(pp / omega)
    cosh_star = np.sqrt(1.0 + (pp / omega) ** 2)

    def q(t):
        return _gig_log_target(t, pp, omega, cosh_star)

    def solve_drop(side):
        # bisection for q(t) = -1 on the requested side of the mode
        step = np.sqrt(2.0 / (omega * cosh_star))
        lo = tstar.copy()
        hi = tstar + side * step
        for _ in range(90):
            bad = q(hi) > -1.0
            if not np.any(bad):
                break
            lo = np.where(bad, hi, lo)
            step = np.where(bad, 2.0 * step, step)
            hi = np.where(bad, tstar + side * step, hi)
        for _ in range(40):
            mid = 0.5 * (lo + hi)
            high = q(mid) > -1.0
            lo = np.where(high, mid, lo)
            hi = np.where(high, mid, hi)
        return 0.5 * (lo + hi)

    t_r = solve_drop(+1.0)
    t_l = solve_drop(-1.0)
    q_r = q(t_r)
    q_l = q(t_l)
    g_r = pp - omega * np.sinh(t_r)  # < 0
    g_l = pp - omega * np.sinh(t_l)  # > 0
    mass_c = t_r - t_l
    mass_r = np.exp(q_r) / (-g_r)
    mass_l = np.exp(q_l) / g_l
    total = mass_c + mass_r + mass_l

    out = np.empty(omega.shape)
    todo = np.ones(omega.shape, dtype=bool)
    for _ in range(1000):
        k = int(todo.sum())
        if k == 0:
            break
        u = rng.random(k) * total[todo]
        v = rng.random(k)
        w = rng.random(k)
        mc, mr = mass_c[todo], mass_r[todo]
        tl, tr = t_l[todo], t_r[todo]
        gl, gr = g_l[todo], g_r[todo]
        ql, qr = q_l[todo], q_r[todo]
        in_c = u < mc
        in_r = (~in_c) & (u < mc + mr)
        t = tl + v * (tr - tl)
        t = np.where(in_r, tr - np.log(v) / (-gr), t)
        in_l = ~(in_c | in_r)
        t = np.where(in_l, tl + np.log(v) / gl, t)
        log_env = np.zeros(k)
        log_env = np.where(in_r, qr + gr * (t - tr), log_env)
        log_env = np.where(in_l, ql + gl * (t - tl), log_env)
        qt = _gig_log_target(t, pp[todo], omega[todo], cosh_star[todo])
        ok = np.log(w) <= qt - log_env
        idx = np.flatnonzero(todo.ravel())[ok]
        out.ravel()[idx] = t[ok]
        todo.ravel()[idx] = False
    else:
        raise RuntimeError("generalized inverse Gaussian rejection failed to terminate")
    return np.sqrt(b / a) * np.exp(sgn * out)


def sample_gig(rng, a, b, p, size=None):
    """Generalized-inverse-Gaussian draws, density ~ x^(p-1) exp(-(a x + b / x) / 2).

    p = +-1/2 uses the closed-form inverse-Gaussian route; other orders use a
    log-concave rejection sampler. Parameters broadcast; ``size`` must be
    broadcast-compatible with them.
    """
    a, b, p = np.broadcast_arrays(
        np.asarray(a, dtype=float), np.asarray(b, dtype=float), np.asarray(p, dtype=float)
    )
    if size is not None:
        a, b, p = (np.broadcast_to(v, size) for v in (a, b, p))
    scalar = a.ndim == 0
    a, b, p = np.atleast_1d(a), np.atleast_1d(b), np.atleast_1d(p)
    if np.any(a <= 0) or np.any(b <= 0):
        raise ValueError("invalid-argument: GIG requires a > 0 and b > 0")
    out = np.empty(a.shape)
    plus = p == 0.5
    minus = p == -0.5
    rest = ~(plus | minus)
    # draw in a fixed order so the stream layout is reproducible
    if np.any(plus):
        out[plus] = _gig_half(rng, a[plus], b[plus])
    if np.any(minus):
        # reciprocal identity: 1/X ~ GIG(b, a, +1/2)
        out[minus] = 1.0 / _gig_half(rng, b[minus], a[minus])
    if np.any(rest):
        out[rest] = _gig_general(rng, a[rest], b[rest], p[rest])
    return out[0] if scalar else out


# ---------------------------------------------------------------------------
# factors


class Normal:
    """Gaussian expert; the mean may be an array for observation rows."""

    kind = "normal"
    has_latent = False

    def __init__(self, mean=0.0, var=1.0):
        if np.any(np.asarray(var) <= 0):
            raise ValueError("invalid-argument: var must be positive")
        self.mean = np.asarray(mean, dtype=float)
        self.var = float(var)

    def logpdf(self, t):
        return _log_norm_pdf(np.asarray(t, dtype=float), self.mean, self.var)

    def pdf(self, t):
        return np.exp(self.logpdf(t))

    def dlogpdf(self, t):
        return -(np.asarray(t, dtype=float) - self.mean) / self.var

    def sample(self, rng, size=None):
        return rng.normal(self.mean, np.sqrt(self.var), size=size)

    def latent_mean_var(self, z=None):
        return self.mean, self.var

    def variance(self):
        return self.var

    def tail_mass(self, lo, hi):
        s = np.sqrt(self.var)
        m = float(np.max(np.abs(self.mean))) if self.mean.ndim else float(self.mean)
        return float(_std_norm_sf((m - lo) / s) + _std_norm_sf((hi - m) / s))

    def interval(self, eps):
        s = np.sqrt(self.var)
        m = float(np.mean(self.mean))
        half = s * ndtri(1.0 - eps / 2.0)
        return m - half, m + half


class Laplace:
    """Laplace expert with scale b; Gaussian mixture over an exponential latent."""

    kind = "laplace"
    has_latent = True

    def __init__(self, b):
        if b <= 0:
            raise ValueError("invalid-argument: b must be positive")
        self.b = float(b)

    def logpdf(self, t):
        t = np.asarray(t, dtype=float)
        return -np.log(2.0 * self.b) - np.abs(t) / self.b

    def pdf(self, t):
        return np.exp(self.logpdf(t))

    def dlogpdf(self, t):
        return -np.sign(np.asarray(t, dtype=float)) / self.b

    def sample(self, rng, size=None):
        return rng.laplace(0.0, self.b, size=size)

    def sample_conditional_latent(self, t, rng):
        t = np.asarray(t, dtype=float)
        s2 = np.maximum(t * t, EPS_SQ)
        return sample_gig(rng, 1.0 / self.b**2, s2, 0.5)

    def latent_mean_var(self, z):
        return 0.0, np.asarray(z, dtype=float)

    def variance(self):
        return 2.0 * self.b**2

    def tail_mass(self, lo, hi):
        low = 0.5 * np.exp(min(lo, 0.0) / self.b) if lo < 0 else 1.0 - 0.5 * np.exp(-lo / self.b)
        high = 0.5 * np.exp(-max(hi, 0.0) / self.b) if hi > 0 else 1.0 - 0.5 * np.exp(hi / self.b)
        return float(low + high)

    def interval(self, eps):
        half = self.b * np.log(1.0 / eps)
        return -half, half


class StudentT:
    """Student-t expert with nu degrees of freedom; latent is its precision."""

    kind = "student-t"
    has_latent = True

    def __init__(self, nu):
        if nu <= 0:
            raise ValueError("invalid-argument: nu must be positive")
        self.nu = float(nu)

    def logpdf(self, t):
        t = np.asarray(t, dtype=float)
        nu = self.nu
        const = gammaln((nu + 1.0) / 2.0) - gammaln(nu / 2.0) - 0.5 * np.log(nu * np.pi)
        return const - (nu + 1.0) / 2.0 * np.log1p(t * t / nu)

    def pdf(self, t):
        return np.exp(self.logpdf(t))

    def dlogpdf(self, t):
        t = np.asarray(t, dtype=float)
        return -(self.nu + 1.0) * t / (self.nu + t * t)

    def sample(self, rng, size=None):
        return rng.standard_t(self.nu, size=size)

    def sample_conditional_latent(self, t, rng):
        t = np.asarray(t, dtype=float)
        return sample_gamma(rng, (self.nu + 1.0) / 2.0, (self.nu + t * t) / 2.0)

    def latent_mean_var(self, z):
        return 0.0, 1.0 / np.asarray(z, dtype=float)

    def variance(self):
        return self.nu / (self.nu - 2.0) if self.nu > 2.0 else np.inf

    def tail_mass(self, lo, hi):
        # symmetric forms keep precision in deep tails
        low = stdtr(self.nu, lo) if lo <= 0 else 1.0 - stdtr(self.nu, -lo)
        high = stdtr(self.nu, -hi) if hi >= 0 else 1.0 - stdtr(self.nu, hi)
        return float(low + high)

    def interval(self, eps):
        half = float(stdtrit(self.nu, 1.0 - eps / 2.0))
        return -half, half

    def central_iqr(self):
        q = float(stdtrit(self.nu, 0.75))
        return 2.0 * q


class SymGamma:
    """Symmetric expert whose squared-latent scale has a Gamma(alpha, beta) prior.

    The marginal is t mapped through a normal with a Gamma-distributed
    variance, giving a Bessel-type density with a cusp (or spike) at zero.
    """

    kind = "sym-gamma"
    has_latent = True

    def __init__(self, alpha, beta):
        if alpha <= 0 or beta <= 0:
            raise ValueError("invalid-argument: alpha and beta must be positive")
        self.alpha = float(alpha)
        self.beta = float(beta)

    def logpdf(self, t):
        t = np.asarray(t, dtype=float)
        a, b = self.alpha, self.beta
        p = a - 0.5

        def body(at):
            x = np.sqrt(2.0 * b) * at
            return (
                a * np.log(b) - 0.5 * _LOG_2PI - gammaln(a) + np.log(2.0)
                + p * (np.log(at) - 0.5 * np.log(2.0 * b))
                + np.log(kve(p, x)) - x
            )

        at = np.atleast_1d(np.abs(t))
        tiny = at < 1e-12
        out = body(np.where(tiny, 1e-12, at))
        if np.any(tiny) and a > 0.5:
            # finite density at zero; for a <= 0.5 it diverges and the clamped
            # evaluation above reports a large finite value instead
            out[tiny] = 0.5 * np.log(b / (2.0 * np.pi)) + gammaln(a - 0.5) - gammaln(a)
        return out.reshape(np.shape(t))

    def pdf(self, t):
        return np.exp(self.logpdf(t))

    def dlogpdf(self, t):
        t = np.asarray(t, dtype=float)
        p = self.alpha - 0.5
        at = np.maximum(np.abs(t), 1e-8)  # clamp at the cusp
        x = np.sqrt(2.0 * self.beta) * at
        # K_p'(x) = -(K_{p-1}(x) + K_{p+1}(x)) / 2; scaled ratios cancel
        ratio = -(kve(p - 1.0, x) + kve(p + 1.0, x)) / (2.0 * kve(p, x))
        return np.sign(t) * (p / at + np.sqrt(2.0 * self.beta) * ratio)

    def sample(self, rng, size=None):
        v = rng.gamma(self.alpha, 1.0 / self.beta, size=size)
        return rng.normal(0.0, np.sqrt(v))

    def sample_conditional_latent(self, t, rng):
        t = np.asarray(t, dtype=float)
        s2 = np.maximum(t * t, EPS_SQ)
        return sample_gig(rng, 2.0 * self.beta, s2, self.alpha - 0.5)

    def latent_mean_var(self, z):
        return 0.0, np.asarray(z, dtype=float)

    def variance(self):
        return self.alpha / self.beta

    def _laguerre(self):
        if not hasattr(self, "_lag_nodes"):
            x, w = np.polynomial.laguerre.laggauss(180)
            self._lag_nodes = x
            self._lag_w = w * np.exp(
                (self.alpha - 1.0) * np.log(x) - gammaln(self.alpha)
            )
        return self._lag_nodes, self._lag_w

    def tail_mass(self, lo, hi):
        x, w = self._laguerre()
        v = x / self.beta
        up = np.sum(w * _std_norm_sf(max(hi, 0.0) / np.sqrt(v))) if hi > 0 else 0.5
        low = np.sum(w * _std_norm_sf(-min(lo, 0.0) / np.sqrt(v))) if lo < 0 else 0.5
        return float(up + low)

    def interval(self, eps):
        hi = np.sqrt(self.variance())
        while self.tail_mass(-hi, hi) > eps:
            hi *= 2.0
        lo = hi / 2.0
        for _ in range(60):
            mid = 0.5 * (lo + hi)
            if self.tail_mass(-mid, mid) > eps:
                lo = mid
            else:
                hi = mid
        return -hi, hi


class Gmm:
    """Finite Gaussian mixture expert; the latent is the component index."""

    kind = "gmm"
    has_latent = True

    def __init__(self, w, mu, var):
        self.w = np.asarray(w, dtype=float)
        self.mu = np.asarray(mu, dtype=float)
        self.var = np.asarray(var, dtype=float)
        if not (self.w.shape == self.mu.shape == self.var.shape) or self.w.ndim != 1:
            raise ValueError("invalid-argument: w, mu, var must be equal-length vectors")
        if np.any(self.w < 0) or self.w.sum() <= 0 or np.any(self.var <= 0):
            raise ValueError("invalid-argument: weights nonnegative, variances positive")
        self.w = self.w / self.w.sum()
        self._logw = np.log(np.maximum(self.w, 1e-300))

    def _chunked(self, t, fn):
        t = np.asarray(t, dtype=float)
        flat = t.reshape(-1)
        out = np.empty(flat.shape)
        step = max(1, int(4e6) // self.w.size)
        for i in range(0, flat.size, step):
            out[i : i + step] = fn(flat[i : i + step])
        return out.reshape(t.shape)

    def _log_joint(self, t):
        return self._logw + _log_norm_pdf(t[:, None], self.mu, self.var)

    def logpdf(self, t):
        def fn(ts):
            lg = self._log_joint(ts)
            m = lg.max(axis=-1)
            return m + np.log(np.exp(lg - m[:, None]).sum(axis=-1))

        return self._chunked(t, fn)

    def pdf(self, t):
        return np.exp(self.logpdf(t))

    def dlogpdf(self, t):
        def fn(ts):
            lg = self._log_joint(ts)
            m = lg.max(axis=-1, keepdims=True)
            r = np.exp(lg - m)
            r /= r.sum(axis=-1, keepdims=True)
            return np.sum(r * (-(ts[:, None] - self.mu) / self.var), axis=-1)

        return self._chunked(t, fn)

    def responsibilities(self, t):
        """Posterior component weights given the signed projection value."""
        t = np.asarray(t, dtype=float)
        lg = self._logw + _log_norm_pdf(t[..., None], self.mu, self.var)
        lg -= lg.max(axis=-1, keepdims=True)
        r = np.exp(lg)
        r /= r.sum(axis=-1, keepdims=True)
        return r

    def sample(self, rng, size=None):
        shape = () if size is None else (size if isinstance(size, tuple) else (size,))
        idx = sample_categorical(rng, np.broadcast_to(self.w, shape + self.w.shape))
        return rng.normal(self.mu[idx], np.sqrt(self.var[idx]))

    def sample_conditional_latent(self, t, rng):
        # signed projection enters the component posterior
        return sample_categorical(rng, self.responsibilities(t))

    def latent_mean_var(self, z):
        z = np.asarray(z, dtype=int)
        return self.mu[z], self.var[z]

    def variance(self):
        m = np.sum(self.w * self.mu)
        return float(np.sum(self.w * (self.var + self.mu**2)) - m * m)

    def tail_mass(self, lo, hi):
        s = np.sqrt(self.var)
        return float(
            np.sum(self.w * _std_norm_sf((self.mu - lo) / s))
            + np.sum(self.w * _std_norm_sf((hi - self.mu) / s))
        )

    def interval(self, eps):
        hi = float(np.max(np.abs(self.mu) + np.sqrt(self.var)))
        while self.tail_mass(-hi, hi) > eps:
            hi *= 2.0
        lo = hi / 2.0
        for _ in range(60):
            mid = 0.5 * (lo + hi)
            if self.tail_mass(-mid, mid) > eps:
                lo = mid
            else:
                hi = mid
        return -hi, hi


def sample_factor(rng, factor, size=None):
    """Draw directly from the factor density (used by the direct samplers)."""
    return factor.sample(rng, size=size)


def gsm_discretize_laplace(b, n_components):
    """Zero-mean mixture matching Laplace(b) by discretizing its exponential
    variance mixing density over equal-probability strata.

    Each component gets weight 1/L; its variance preserves the stratum's mean
    inverse root scale E[V^(-1/2)], which pins the mixture density at zero to
    the Laplace peak and keeps the sup-norm error small near the cusp.
    """
    L = int(n_components)
    if L < 1:
        raise ValueError("invalid-argument: need at least one component")
    lam = 1.0 / (2.0 * b * b)
    edges = np.empty(L + 1)
    edges[:-1] = -np.log1p(-np.arange(L) / L) / lam
    edges[-1] = np.inf
    mass = np.exp(-lam * edges[:-1]) - np.exp(-lam * edges[1:])  # = 1/L each
    gain = erf(np.sqrt(lam * edges[1:])) - erf(np.sqrt(lam * edges[:-1]))
    inv_root = np.sqrt(np.pi * lam) * gain / mass
    var = inv_root**-2
    w = np.full(L, 1.0 / L)
    return Gmm(w, np.zeros(L), var)


def uniform_means_gmm(b, n_components):
    """Mixture with means evenly spaced on [-0.5, 0.5], common variance
    1/(n_components - 1), and weights proportional to exp(-|mu|/b)."""
    if n_components < 2:
        raise ValueError("invalid-argument: need at least two components")
    mu = np.linspace(-0.5, 0.5, n_components)
    var = np.full(n_components, 1.0 / (n_components - 1))
    w = np.exp(-np.abs(mu) / b)
    return Gmm(w / w.sum(), mu, var)


_FACTOR_TYPES = {}


def factor_from_spec(spec):
    """Build a factor from a config mapping like {"type": "laplace", "b": 1.0}."""
    d = dict(spec)
    kind = d.pop("type")
    try:
        builder = _FACTOR_TYPES[kind]
    except KeyError:
        raise ValueError(f"invalid-argument: unknown factor type {kind!r}") from None
    return builder(**d)


_FACTOR_TYPES.update(
    {
        "normal": lambda mean=0.0, var=1.0: Normal(mean, var),
        "laplace": lambda b: Laplace(b),
        "student-t": lambda nu: StudentT(nu),
        "sym-gamma": lambda alpha, beta: SymGamma(alpha, beta),
        "gmm": lambda w, mu, var: Gmm(w, mu, var),
        "gsm-laplace": lambda b, components: gsm_discretize_laplace(b, components),
        "uniform-gmm": lambda b, components: uniform_means_gmm(b, components),
    }
)
