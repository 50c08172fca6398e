"""Evaluation metrics and analytic ground-truth marginals.

Chains are scored by the Wasserstein-1 distance between the across-chain
sample at each iteration and an analytic marginal held as a grid density;
mixing is scored by per-chain autocorrelation and the derived sampling
efficiency gamma = 1/(1 + 2 sum rho_k). Ground-truth marginals for the
small benchmark graphs come from one-dimensional products and convolutions
of the factor density, using that symmetric factors make edge differences
exchangeable with sums.
"""
from __future__ import annotations

import numpy as np
from scipy.signal import fftconvolve


class UndefinedVarianceError(ValueError):
    """Autocorrelation of a constant sequence (undefined-variance)."""


class GridTooNarrowError(ValueError):
    """Factor tail mass outside the grid exceeds the coverage budget."""


class GridDensity:
    """Normalized density on a uniform grid with its trapezoid CDF."""

    def __init__(self, x, values):
        x = np.asarray(x, dtype=float)
        values = np.asarray(values, dtype=float)
        if x.ndim != 1 or x.size < 3 or x.shape != values.shape:
            raise ValueError("invalid-argument: need matching 1-D grid and values")
        steps = np.diff(x)
        if not np.allclose(steps, steps[0], rtol=1e-9):
            raise ValueError("invalid-argument: grid must be uniform")
        if np.any(values < -1e-12):
            raise ValueError("invalid-argument: density values must be nonnegative")
        values = np.maximum(values, 0.0)
        mass = np.trapezoid(values, x)
        if not mass > 0:
            raise ValueError("invalid-argument: density integrates to zero")
        self.x = x
        self.values = values / mass
        inner = 0.5 * (self.values[1:] + self.values[:-1]) * steps
        cdf = np.concatenate([[0.0], np.cumsum(inner)])
        self.cdf = cdf / cdf[-1]

    @property
    def lo(self):
        return float(self.x[0])

    @property
    def hi(self):
        return float(self.x[-1])

    @property
    def points(self):
        return self.x.size

    def sample(self, rng, size):
        """Inverse-CDF draws from the grid density."""
        return np.interp(rng.random(size), self.cdf, self.x)


def _w1_samples_samples(a, b):
    sa = np.sort(a)
    sb = np.sort(b)
    if sa.size == sb.size:
        return float(np.mean(np.abs(sa - sb)))
    pts = np.sort(np.concatenate([sa, sb]))
    fa = np.searchsorted(sa, pts[:-1], side="right") / sa.size
    fb = np.searchsorted(sb, pts[:-1], side="right") / sb.size
    return float(np.sum(np.abs(fa - fb) * np.diff(pts)))


def _w1_samples_grid(a, grid):
    s = np.sort(a)
    pts = np.sort(np.concatenate([s, grid.x]))
    h = np.diff(pts)
    keep = h > 0
    emp = np.searchsorted(s, pts[:-1], side="right") / s.size
    g0 = np.interp(pts[:-1], grid.x, grid.cdf)
    g1 = np.interp(pts[1:], grid.x, grid.cdf)
    d0 = g0 - emp
    d1 = g1 - emp
    same = d0 * d1 >= 0
    straight = 0.5 * (np.abs(d0) + np.abs(d1)) * h
    denom = np.abs(d0) + np.abs(d1)
    crossing = np.where(denom > 0, (d0**2 + d1**2) / (2 * np.maximum(denom, 1e-300)) * h, 0.0)
    return float(np.sum(np.where(same, straight, crossing)[keep]))


def wasserstein1(a, b):
    """Integral of |F_a - F_b|; b may be a sample set or a GridDensity."""
    a = np.ravel(np.asarray(a, dtype=float))
    if a.size == 0:
        raise ValueError("invalid-argument: empty sample set")
    if isinstance(b, GridDensity):
        return _w1_samples_grid(a, b)
    b = np.ravel(np.asarray(b, dtype=float))
    if b.size == 0:
        raise ValueError("invalid-argument: empty sample set")
    return _w1_samples_samples(a, b)


def acf(chain, max_lag):
    """Autocorrelations rho_1..rho_max_lag with the full-variance denominator."""
    chain = np.ravel(np.asarray(chain, dtype=float))
    if chain.size <= 2 * max_lag:
        raise ValueError("invalid-argument: sequence shorter than 2 * max_lag")
    return acf_batch(chain[None, :], max_lag)[0]


def acf_batch(chains, max_lag):
    """acf over the last axis for a (chains, length) array, FFT-based."""
    x = np.asarray(chains, dtype=float)
    t = x.shape[-1]
    if t <= 2 * max_lag:
        raise ValueError("invalid-argument: sequence shorter than 2 * max_lag")
    c = x - x.mean(axis=-1, keepdims=True)
    denom = np.sum(c**2, axis=-1)
    if np.any(denom == 0):
        raise UndefinedVarianceError(
            "undefined-variance: constant sequence has no autocorrelation"
        )
    size = 1
    while size < 2 * t:
        size *= 2
    spec = np.fft.rfft(c, n=size, axis=-1)
    cov = np.fft.irfft(spec * np.conj(spec), n=size, axis=-1)[..., 1 : max_lag + 1]
    return cov / denom[..., None]


def sampling_efficiency(acf_values, threshold=0.05):
    """gamma = 1/(1 + 2 sum rho_k) summed up to the first lag below threshold."""
    rho = np.ravel(np.asarray(acf_values, dtype=float))
    below = np.nonzero(rho < threshold)[0]
    head = rho[: below[0]] if below.size else rho
    gamma = 1.0 / (1.0 + 2.0 * head.sum())
    return float(min(gamma, 1.0))


def efficiency_across_chains(values, threshold=0.05, max_lag=None):
    """Per-chain gamma for an (iterations, chains) trajectory block.

    The caller is expected to pass the kept (post-burn-in) iterations.
    Returns (mean, std, per-chain vector).
    """
    values = np.asarray(values, dtype=float)
    t = values.shape[0]
    if max_lag is None:
        max_lag = (t - 1) // 2
    rho = acf_batch(values.T, max_lag)
    gammas = np.array([sampling_efficiency(r, threshold) for r in rho])
    return float(gammas.mean()), float(gammas.std()), gammas


def w1_trajectory(values, gt):
    """Per-iteration W1 of the across-chain ensemble against a grid density.

    values is (iterations, chains); returns a length-iterations curve.
    """
    values = np.asarray(values, dtype=float)
    return np.array([_w1_samples_grid(np.sort(row), gt) for row in values])


def noise_floor(gt, n, rng, reps=4):
    """Finite-sample W1 level: independent same-size draws from the truth."""
    vals = [
        wasserstein1(gt.sample(rng, n), gt.sample(rng, n)) for _ in range(reps)
    ]
    return float(np.mean(vals))


def iterations_to_reach(curve, level):
    """First 1-based iteration at which the curve is at or below level."""
    curve = np.asarray(curve, dtype=float)
    hit = np.nonzero(curve <= level)[0]
    return int(hit[0]) + 1 if hit.size else None


def default_grid(factor):
    """Symmetric odd grid sized from the factor's scale and far quantiles."""
    var = factor.variance()
    if np.isfinite(var) and var > 0:
        sigma = float(np.sqrt(var))
    else:
        # heavy tails without a variance: use the central quartile spread
        sigma = float(factor.central_iqr() / 1.349)
    lo, hi = factor.interval(2e-9)
    half = max(12.0 * sigma, abs(lo), abs(hi))
    points = 2**14 + 1
    while (2 * half) / (points - 1) > sigma / 100 and points < 2**20 + 1:
        points = 2 * (points - 1) + 1
    return np.linspace(-half, half, points)


_TOPOLOGIES = ("factor", "product", "loop", "grid-inner", "grid-outer")


def ground_truth_marginal(topology, factor, grid=None):
    """Analytic marginal for the benchmark graphs as a GridDensity.

    factor: the shared edge/node factor phi. grid: optional (lo, hi, points)
    with lo = -hi and odd points; defaults to a width from the factor scale.
    Convolution identities for the graphs (phi symmetric): product is phi^5
    renormalized; loop is (phi*phi*phi) . phi; the inner grid edge picks up a
    second three-path factor; the outer grid edge convolves the loop result
    with two more steps before the final pointwise factor.
    """
    if topology not in _TOPOLOGIES:
        raise ValueError(f"invalid-argument: unknown topology {topology!r}")
    if grid is None:
        x = default_grid(factor)
    else:
        lo, hi, points = grid
        if not (lo == -hi and hi > 0 and points % 2 == 1 and points >= 3):
            raise ValueError(
                "invalid-argument: grid must be symmetric with an odd point count"
            )
        x = np.linspace(lo, hi, int(points))
    if factor.tail_mass(x[0], x[-1]) > 1e-8:
        raise GridTooNarrowError(
            "grid-too-narrow: factor tail mass outside the grid exceeds 1e-8"
        )
    dx = x[1] - x[0]
    phi = factor.pdf(x)

    def conv(a, b):
        return fftconvolve(a, b, mode="same") * dx

    if topology == "factor":
        vals = phi
    elif topology == "product":
        vals = phi**5
    else:
        three_path = conv(conv(phi, phi), phi)
        if topology == "loop":
            vals = three_path * phi
        elif topology == "grid-inner":
            vals = three_path * phi * three_path
        else:  # grid-outer
            loop_edge = three_path * phi
            vals = conv(conv(loop_edge, phi), phi) * phi
    return GridDensity(x, vals)


def psnr(x, ref, peak=1.0):
    """10 log10(peak^2 / MSE) in dB; identical images give +inf."""
    x = np.asarray(x, dtype=float)
    ref = np.asarray(ref, dtype=float)
    if x.shape != ref.shape:
        raise ValueError("invalid-argument: images must share a shape")
    mse = float(np.mean((x - ref) ** 2))
    if mse == 0:
        return float("inf")
    return float(10.0 * np.log10(peak**2 / mse))
