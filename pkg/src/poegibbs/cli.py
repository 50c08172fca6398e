"""Batch experiment driver and ``poegibbs`` command line.

Runs the sampling protocols at desk scale and writes deterministic
artifacts: CSV tables (Wasserstein-1 curves, autocorrelations, sampling
efficiencies, posterior statistics), 16-bit PGM images for posterior
experiments, and a JSON manifest recording the resolved configuration, its
hash, timings, and library versions.  Identical configuration and seed give
byte-identical CSV files; the manifest carries the wall-clock numbers and is
excluded from that guarantee.

Experiment kinds
  baseline-topology    benchmark graph + factor, Gibbs or MALA, W1 vs the
                       analytic marginal per iteration, ACF and efficiency
                       on the second half
  init-sensitivity     baseline rerun from shifted starts c*1 per norm
  gmm-parametrization  baseline with a discretized mixture factor, measured
                       against the mixture's own analytic marginal
  image-prior          periodic difference prior; W1 of central edge
                       marginals against the final iteration
  posterior-denoise    synthetic image + noise, posterior mean/std images,
                       PSNR and edge/flat std statistics
  posterior-dct        partial noisy DCT coefficients, same outputs plus the
                       zero-fill baseline
  tree-direct          direct tree sampling, per-edge W1 against the factor

CSV columns per kind are documented in the runner docstrings below.
"""

import hashlib
import json
import platform
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import click
import numpy as np
import scipy

try:
    import tomllib
except ModuleNotFoundError:  # 3.10
    import tomli as tomllib

from . import __version__, analysis, baselines, direct, factors, gaussian_sampler
from . import glm, linops, topologies

EXPERIMENT_KINDS = (
    "baseline-topology",
    "image-prior",
    "init-sensitivity",
    "gmm-parametrization",
    "posterior-denoise",
    "posterior-dct",
    "tree-direct",
)

_KIND_SAMPLERS = {
    "baseline-topology": ("gibbs", "mala"),
    "init-sensitivity": ("gibbs", "mala"),
    "gmm-parametrization": ("gibbs", "mala"),
    "image-prior": ("gibbs", "mala"),
    "posterior-denoise": ("gibbs",),
    "posterior-dct": ("gibbs",),
    "tree-direct": ("direct",),
}

_ERROR_EXIT_CODES = {
    "invalid-argument": 2,
    "convergence-failure": 3,
    "determinism-mismatch": 4,
    "grid-too-narrow": 5,
    "unsupported-operator": 6,
    "io-error": 7,
    "internal": 1,
}


# ---------------------------------------------------------------------------
# artifacts: PGM images and CSV tables


def emit_pgm(image, path, mode="minmax"):
    """Write a 2-D array as a 16-bit big-endian binary PGM.

    mode "minmax" maps [min, max] affinely onto the full range (a constant
    image comes out constant); mode "unit" clips to [0, 1] first, for
    reconstructions whose scale is meaningful.
    """
    img = np.asarray(image, dtype=float)
    if img.ndim != 2:
        raise ValueError("invalid-argument: PGM image must be 2-D")
    if not np.all(np.isfinite(img)):
        raise ValueError("invalid-argument: PGM image must be finite")
    if mode == "unit":
        scaled = np.clip(img, 0.0, 1.0)
    elif mode == "minmax":
        lo, hi = img.min(), img.max()
        scaled = np.zeros_like(img) if hi == lo else (img - lo) / (hi - lo)
    else:
        raise ValueError(f"invalid-argument: unknown PGM mode {mode!r}")
    data = np.round(scaled * 65535.0).astype(">u2")
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n65535\n".encode("ascii"))
        fh.write(data.tobytes())


def read_pgm(path):
    """Read back a binary PGM written by emit_pgm; returns the uint16 grid."""
    with open(path, "rb") as fh:
        raw = fh.read()
    fields = []
    pos = 0
    while len(fields) < 4:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        fields.append(raw[start:pos])
    pos += 1  # single whitespace after maxval
    if fields[0] != b"P5":
        raise ValueError("invalid-argument: not a binary PGM")
    w, h, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    dtype = ">u2" if maxval > 255 else np.uint8
    return np.frombuffer(raw[pos:], dtype=dtype).reshape(h, w).astype(np.uint16)


def _fmt_cell(v):
    if v is None:
        return ""
    if isinstance(v, str):
        return v
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def write_csv(path, header, rows):
    """Write rows with shortest round-trip float formatting; deterministic."""
    with open(path, "w", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_fmt_cell(v) for v in row) + "\n")


# ---------------------------------------------------------------------------
# synthetic ground truth for posterior experiments


def synthetic_image(height=24, width=24):
    """Piecewise-constant test image: flat 0.2 background, a bright 0.8
    square, and a horizontal ramp band rising 0.2 -> 0.7."""
    img = np.full((height, width), 0.2)
    bh, bw = height // 3, width // 3
    img[height // 8 : height // 8 + bh, width // 8 : width // 8 + bw] = 0.8
    band = slice(2 * height // 3, 2 * height // 3 + height // 6)
    img[band] = np.linspace(0.2, 0.7, width)[None, :]
    return img


def edge_mask(image, threshold=0.05):
    """Pixels adjacent to a jump in the clean image exceeding threshold."""
    img = np.asarray(image, dtype=float)
    mask = np.zeros(img.shape, dtype=bool)
    dh = np.abs(np.diff(img, axis=1)) > threshold
    mask[:, :-1] |= dh
    mask[:, 1:] |= dh
    dv = np.abs(np.diff(img, axis=0)) > threshold
    mask[:-1] |= dv
    mask[1:] |= dv
    return mask


# ---------------------------------------------------------------------------
# configuration


@dataclass
class ExperimentConfig:
    """Resolved experiment description; see module docstring for kinds."""

    kind: str
    sampler: str
    chains: int
    iterations: int
    seed: int
    out: str | None
    model: dict = field(default_factory=dict)
    observation: dict = field(default_factory=dict)
    mala: dict = field(default_factory=dict)
    recorder: dict = field(default_factory=dict)
    evaluation: dict = field(default_factory=dict)
    norms: list = field(default_factory=list)

    def __post_init__(self):
        if self.kind not in EXPERIMENT_KINDS:
            raise ValueError(f"invalid-argument: unknown experiment kind {self.kind!r}")
        if self.sampler not in _KIND_SAMPLERS[self.kind]:
            raise ValueError(
                f"invalid-argument: sampler {self.sampler!r} not available for {self.kind}"
            )
        if self.chains < 1 or self.iterations < 1:
            raise ValueError("invalid-argument: chains and iterations must be positive")
        if self.seed < 0:
            raise ValueError("invalid-argument: seed must be nonnegative")
        if not self.model:
            raise ValueError("invalid-argument: missing [model] section")
        if self.kind == "init-sensitivity":
            if not self.norms:
                self.norms = [1.0, 5.0, 10.0, 15.0]
            if any(c < 0 for c in self.norms):
                raise ValueError("invalid-argument: norms must be nonnegative")

    def to_mapping(self):
        out = {
            "experiment": {
                "kind": self.kind,
                "sampler": self.sampler,
                "chains": self.chains,
                "iterations": self.iterations,
                "seed": self.seed,
            },
            "model": self.model,
            "observation": self.observation,
            "mala": self.mala,
            "recorder": self.recorder,
            "evaluation": self.evaluation,
        }
        if self.kind == "init-sensitivity":
            out["experiment"]["norms"] = list(self.norms)
        return out

    def config_hash(self):
        blob = json.dumps(self.to_mapping(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def config_from_mapping(mapping, overrides=None):
    """Build a config from a parsed TOML mapping plus CLI flag overrides."""
    if not isinstance(mapping, dict) or "experiment" not in mapping:
        raise ValueError("invalid-argument: config needs an [experiment] section")
    exp = dict(mapping["experiment"])
    overrides = {k: v for k, v in (overrides or {}).items() if v is not None}
    exp.update(overrides)
    kind = exp.get("kind")
    if not isinstance(kind, str):
        raise ValueError("invalid-argument: experiment.kind must be a string")
    sampler = exp.get("sampler", "direct" if kind == "tree-direct" else "gibbs")
    try:
        return ExperimentConfig(
            kind=kind,
            sampler=sampler,
            chains=int(exp.get("chains", 1000)),
            iterations=int(exp.get("iterations", 100)),
            seed=int(exp.get("seed", 0)),
            out=exp.get("out"),
            model=dict(mapping.get("model", {})),
            observation=dict(mapping.get("observation", {})),
            mala=dict(mapping.get("mala", {})),
            recorder=dict(mapping.get("recorder", {})),
            evaluation=dict(mapping.get("evaluation", {})),
            norms=list(exp.get("norms", [])),
        )
    except (TypeError, ValueError) as e:
        msg = str(e)
        if msg.startswith("invalid-argument"):
            raise
        raise ValueError(f"invalid-argument: {msg}") from e


def load_config(path, overrides=None):
    try:
        with open(path, "rb") as fh:
            mapping = tomllib.load(fh)
    except tomllib.TOMLDecodeError as e:
        raise ValueError(f"invalid-argument: bad TOML in {path}: {e}") from e
    return config_from_mapping(mapping, overrides)


def _derive_seeds(seed):
    """Fixed-purpose child seeds so observation noise, masks, and floor
    calibration draws stay independent of the sampling streams."""
    state = np.random.SeedSequence(seed).generate_state(4)
    return {
        "sample": int(state[0]),
        "observation": int(state[1]),
        "mask": int(state[2]),
        "floor": int(state[3]),
    }


def _check_budget(cfg, probes):
    budget_mb = float(cfg.evaluation.get("memory_budget_mb", 1024))
    need = cfg.chains * cfg.iterations * max(probes, 1) * 8 / 2**20
    if need > budget_mb:
        raise ValueError(
            f"invalid-argument: recorded scalars need {need:.0f} MiB, "
            f"budget is {budget_mb:.0f} MiB"
        )


def _build_factor(spec):
    if not spec:
        raise ValueError("invalid-argument: missing [model.factor] section")
    try:
        return factors.factor_from_spec(spec)
    except TypeError as e:
        raise ValueError(f"invalid-argument: bad factor spec: {e}") from e


class _Phases:
    """Per-phase wall-clock accounting for the manifest."""

    def __init__(self):
        self.timings = {}
        self._t0 = time.perf_counter()

    def run(self, name, fn):
        start = time.perf_counter()
        try:
            return fn()
        finally:
            self.timings[name] = self.timings.get(name, 0.0) + time.perf_counter() - start

    def total(self):
        return time.perf_counter() - self._t0


# ---------------------------------------------------------------------------
# shared sampling + evaluation helpers


def _sample_marginals(cfg, model, probes, x0, seeds, extras, tag=""):
    """Run the configured sampler, recording probe marginals per iteration.

    Returns the (iterations, chains, P) trajectory.  MALA tunes its constant
    step by dual averaging when the config gives none, then freezes it; the
    tuned step is reused across the starts of one experiment so reruns from
    shifted initial points stay comparable.
    """
    rec = glm.MarginalRecorder(probes)
    if cfg.sampler == "gibbs":
        glm.run_chains(
            model, x0, cfg.iterations, cfg.chains, seed=seeds["sample"], recorder=rec
        )
    else:
        info = extras.setdefault("mala", {})
        step = float(cfg.mala.get("step_size", 0.0))
        if step <= 0.0:
            step = info.get("step_size") or baselines.tune_step_size(
                model,
                x0,
                iterations=int(cfg.mala.get("tune_iterations", 300)),
                chains=int(cfg.mala.get("tune_chains", 32)),
                seed=seeds["sample"] ^ 0x5EED,
            )
        res = baselines.run_mala(
            model,
            x0,
            cfg.iterations,
            cfg.chains,
            baselines.MalaConfig(step_size=step, record_accept_rate=True),
            seed=seeds["sample"],
            recorder=rec,
        )
        info["step_size"] = step
        info.setdefault("accept_rate", {})[tag or "run"] = float(np.mean(res.accept_rate))
    return rec.trajectory()


def _acf_and_efficiency(traj_label, max_lag):
    """Second-half ACF mean/std per lag plus per-chain sampling efficiency.

    Runs shorter than four retained iterations cannot support lagged
    statistics; they report an empty ACF and no efficiency.  A chain that
    never moved in the window has no autocorrelation; it contributes one
    effective sample (gamma = 1/T) and is left out of the ACF rows.
    """
    half = traj_label[traj_label.shape[0] // 2 :]
    series = half.T  # (chains, T)
    count, length = series.shape
    if length < 4:
        return np.zeros((count, 0)), None, None
    lag = min(max_lag, (length - 1) // 2)
    live = series.std(axis=1) > 0
    gammas = np.full(count, 1.0 / length)
    rho = np.zeros((0, lag))
    if live.any():
        rho = analysis.acf_batch(series[live], lag)
        gammas[live] = [analysis.sampling_efficiency(r) for r in rho]
    return rho, float(gammas.mean()), float(gammas.std())


def _write_samples_csv(path, labels, slices, traj):
    rows = []
    for label in labels:
        vals = traj[..., slices[label]]
        for it in range(vals.shape[0]):
            flat = vals[it].reshape(-1)
            for chain, v in enumerate(flat):
                rows.append((it + 1, chain, label, v))
    write_csv(path, ("iteration", "chain", "label", "value"), rows)


def _marginal_case(cfg):
    factor = _build_factor(cfg.model.get("factor"))
    if cfg.kind == "gmm-parametrization" and factor.kind != "gmm":
        raise ValueError(
            "invalid-argument: gmm-parametrization needs a mixture factor"
        )
    name = cfg.model.get("topology", "loop")
    completion = cfg.model.get("completion", "mean")
    return topologies.build_baseline(name, factor, completion=completion)


def _run_marginal_benchmark(cfg, out, phases, extras, x0_list=None, tags=None):
    """Common pipeline for the three benchmark kinds.

    CSVs: w1_<sampler>[_<tag>].csv with columns iteration,<label...>;
    acf_<sampler>.csv with label,lag,mean,std; efficiency_<sampler>.csv with
    label,gamma_mean,gamma_std,chains_pooled; floor.csv with
    label,floor,samples; summary_<sampler>.csv with one row per (tag,)label.
    """
    case = phases.run("build", lambda: _marginal_case(cfg))
    probes = case.probe_matrix()
    slices = case.probe_slices()
    _check_budget(cfg, probes.shape[0])

    grids = {}
    floors = {}
    floor_rng = np.random.default_rng(_derive_seeds(cfg.seed)["floor"])
    reps = int(cfg.evaluation.get("floor_reps", 4))

    def calibrate():
        for spec in case.marginals:
            gt = case.ground_truth(spec.label)
            pooled = cfg.chains * spec.probes.shape[0]
            grids[spec.label] = gt
            floors[spec.label] = analysis.noise_floor(gt, pooled, floor_rng, reps=reps)

    phases.run("evaluate", calibrate)
    artifacts = ["floor.csv"]
    write_csv(
        out / "floor.csv",
        ("label", "floor", "samples"),
        [
            (label, floors[label], cfg.chains * case.spec(label).probes.shape[0])
            for label in case.labels
        ],
    )

    seeds = _derive_seeds(cfg.seed)
    max_lag = int(cfg.recorder.get("max_lag", 50))
    starts = x0_list if x0_list is not None else [np.zeros(case.model.n)]
    tags = tags if tags is not None else [""] * len(starts)
    summary_rows = []
    acf_done = False

    for x0, tag in zip(starts, tags):
        traj = phases.run(
            "sample",
            lambda x0=x0, tag=tag: _sample_marginals(
                cfg, case.model, probes, x0, seeds, extras, tag=tag
            ),
        )

        def evaluate(traj=traj, tag=tag):
            suffix = f"_{tag}" if tag else ""
            w1_cols = {}
            for label in case.labels:
                pooled = topologies.pooled_marginal(traj, slices[label])
                w1_cols[label] = analysis.w1_trajectory(pooled, grids[label])
            name = f"w1_{cfg.sampler}{suffix}.csv"
            write_csv(
                out / name,
                ("iteration",) + case.labels,
                [
                    (it + 1,) + tuple(w1_cols[label][it] for label in case.labels)
                    for it in range(traj.shape[0])
                ],
            )
            artifacts.append(name)
            for label in case.labels:
                curve = w1_cols[label]
                reached = analysis.iterations_to_reach(curve, 2.0 * floors[label])
                pooled = topologies.pooled_marginal(traj, slices[label])
                rho, g_mean, g_std = _acf_and_efficiency(pooled, max_lag)
                summary_rows.append(
                    (tag or None, label, floors[label], reached, curve[-1], g_mean, g_std)
                )
                if not acf_done:
                    acf_rows.extend(
                        (label, k + 1, rho[:, k].mean(), rho[:, k].std())
                        for k in range(rho.shape[1])
                    )
                    eff_rows.append((label, g_mean, g_std, pooled.shape[1]))
            if bool(cfg.recorder.get("dump_samples", False)):
                name = f"samples_{cfg.sampler}{suffix}.csv"
                _write_samples_csv(out / name, case.labels, slices, traj)
                artifacts.append(name)

        acf_rows, eff_rows = [], []
        phases.run("evaluate", evaluate)
        if not acf_done:
            write_csv(out / f"acf_{cfg.sampler}.csv", ("label", "lag", "mean", "std"), acf_rows)
            write_csv(
                out / f"efficiency_{cfg.sampler}.csv",
                ("label", "gamma_mean", "gamma_std", "chains_pooled"),
                eff_rows,
            )
            artifacts += [f"acf_{cfg.sampler}.csv", f"efficiency_{cfg.sampler}.csv"]
            acf_done = True

    name = f"summary_{cfg.sampler}.csv"
    write_csv(
        out / name,
        ("tag", "label", "floor", "reached_2x_floor_at", "final_w1", "gamma_mean", "gamma_std"),
        summary_rows,
    )
    artifacts.append(name)
    extras["noise_floor"] = {k: float(v) for k, v in floors.items()}
    return artifacts


def run_baseline_topology(cfg, out, phases, extras):
    return _run_marginal_benchmark(cfg, out, phases, extras)


def run_gmm_parametrization(cfg, out, phases, extras):
    return _run_marginal_benchmark(cfg, out, phases, extras)


def run_init_sensitivity(cfg, out, phases, extras):
    case = _marginal_case(cfg)
    starts = [topologies.scaled_ones(case.model.n, c) for c in cfg.norms]
    tags = [f"norm{c:g}".replace(".", "p") for c in cfg.norms]
    return _run_marginal_benchmark(cfg, out, phases, extras, x0_list=starts, tags=tags)


def _center_edge_probes(height, width):
    n = height * width
    r, c = height // 2, width // 2
    flat = r * width + c
    right = r * width + (c + 1) % width
    down = ((r + 1) % height) * width + c
    probes = np.zeros((2, n))
    probes[0, flat], probes[0, right] = -1.0, 1.0
    probes[1, flat], probes[1, down] = -1.0, 1.0
    return probes


def _build_prior(cfg):
    spec = cfg.model
    factor = _build_factor(spec.get("factor"))
    return glm.build_image_prior(
        int(spec.get("height", 12)),
        int(spec.get("width", 12)),
        factor,
        lam=float(spec.get("lam", 1.0)),
        isotropic=bool(spec.get("isotropic", False)),
    )


def run_image_prior(cfg, out, phases, extras):
    """Difference prior on an image grid, extended to a proper model.

    CSVs: w1_<sampler>.csv (iteration,h-edge,v-edge) against the final
    iteration's pooled samples; acf/efficiency as in the benchmarks;
    summary_<sampler>.csv with label,floor,final_w1,gamma columns.
    """
    prior = phases.run("build", lambda: glm.extend_improper(_build_prior(cfg)))
    h = int(cfg.model.get("height", 12))
    w = int(cfg.model.get("width", 12))
    probes = _center_edge_probes(h, w)
    labels = ("h-edge", "v-edge")
    _check_budget(cfg, probes.shape[0])
    seeds = _derive_seeds(cfg.seed)
    traj = phases.run(
        "sample",
        lambda: _sample_marginals(cfg, prior, probes, np.zeros(prior.n), seeds, extras),
    )

    artifacts = []
    max_lag = int(cfg.recorder.get("max_lag", 50))
    floor_rng = np.random.default_rng(seeds["floor"])
    reps = int(cfg.evaluation.get("floor_reps", 4))

    def evaluate():
        w1_cols, summary = {}, []
        for k, label in enumerate(labels):
            series = traj[:, :, k]
            ref = series[-1]
            w1_cols[label] = np.array(
                [analysis.wasserstein1(series[i], ref) for i in range(series.shape[0])]
            )
            # floor: split the converged pool in independent halves
            half = series.shape[1] // 2
            floor = float(
                np.mean(
                    [
                        analysis.wasserstein1(perm[:half], perm[half : 2 * half])
                        for perm in (
                            ref[floor_rng.permutation(series.shape[1])] for _ in range(reps)
                        )
                    ]
                )
            )
            rho, g_mean, g_std = _acf_and_efficiency(series, max_lag)
            summary.append((label, floor, w1_cols[label][-2], g_mean, g_std))
            acf_rows.extend(
                (label, k2 + 1, rho[:, k2].mean(), rho[:, k2].std())
                for k2 in range(rho.shape[1])
            )
            eff_rows.append((label, g_mean, g_std, series.shape[1]))
        write_csv(
            out / f"w1_{cfg.sampler}.csv",
            ("iteration",) + labels,
            [
                (i + 1,) + tuple(w1_cols[label][i] for label in labels)
                for i in range(traj.shape[0])
            ],
        )
        write_csv(out / f"acf_{cfg.sampler}.csv", ("label", "lag", "mean", "std"), acf_rows)
        write_csv(
            out / f"efficiency_{cfg.sampler}.csv",
            ("label", "gamma_mean", "gamma_std", "chains_pooled"),
            eff_rows,
        )
        write_csv(
            out / f"summary_{cfg.sampler}.csv",
            ("label", "floor", "w1_before_final", "gamma_mean", "gamma_std"),
            summary,
        )

    acf_rows, eff_rows = [], []
    phases.run("evaluate", evaluate)
    artifacts += [
        f"w1_{cfg.sampler}.csv",
        f"acf_{cfg.sampler}.csv",
        f"efficiency_{cfg.sampler}.csv",
        f"summary_{cfg.sampler}.csv",
    ]
    if bool(cfg.recorder.get("dump_samples", False)):
        name = f"samples_{cfg.sampler}.csv"
        _write_samples_csv(out / name, labels, {"h-edge": slice(0, 1), "v-edge": slice(1, 2)}, traj)
        artifacts.append(name)
    return artifacts


def _posterior_images(out, truth, mean_img, std_img, extras, artifacts):
    emit_pgm(truth, out / "truth.pgm", mode="unit")
    emit_pgm(mean_img, out / "mean.pgm", mode="unit")
    emit_pgm(std_img * 100.0, out / "std.pgm", mode="unit")
    extras["std_image"] = {"scale": 100.0, "max": float(std_img.max())}
    artifacts += ["truth.pgm", "mean.pgm", "std.pgm"]


def run_posterior_denoise(cfg, out, phases, extras):
    """Denoise the synthetic image under a difference prior.

    stats.csv columns: psnr_noisy,psnr_mean,psnr_boost,edge_std,flat_std.
    Images: truth/noisy/mean/std PGMs (std scaled by 100 before clipping).
    """
    h = int(cfg.model.get("height", 24))
    w = int(cfg.model.get("width", 24))
    sigma = float(cfg.observation.get("noise_sigma", 0.1))
    if sigma <= 0:
        raise ValueError("invalid-argument: noise_sigma must be positive")
    seeds = _derive_seeds(cfg.seed)
    truth = synthetic_image(h, w)
    noise_rng = np.random.default_rng(seeds["observation"])
    y = truth.reshape(-1) + sigma * noise_rng.standard_normal(h * w)

    posterior = phases.run(
        "build", lambda: glm.build_posterior_denoising(_build_prior(cfg), y, sigma**2)
    )
    result = phases.run(
        "sample",
        lambda: glm.run_chains(posterior, y, cfg.iterations, cfg.chains, seed=seeds["sample"]),
    )

    artifacts = []

    def evaluate():
        x = result.state.x
        mean_img = x.mean(axis=0).reshape(h, w)
        std_img = x.std(axis=0).reshape(h, w)
        mask = edge_mask(truth)
        noisy_img = y.reshape(h, w)
        rows = [
            (
                analysis.psnr(noisy_img, truth),
                analysis.psnr(mean_img, truth),
                analysis.psnr(mean_img, truth) - analysis.psnr(noisy_img, truth),
                std_img[mask].mean(),
                std_img[~mask].mean(),
            )
        ]
        write_csv(
            out / "stats.csv",
            ("psnr_noisy", "psnr_mean", "psnr_boost", "edge_std", "flat_std"),
            rows,
        )
        emit_pgm(noisy_img, out / "noisy.pgm", mode="unit")
        _posterior_images(out, truth, mean_img, std_img, extras, artifacts)

    phases.run("evaluate", evaluate)
    artifacts += ["stats.csv", "noisy.pgm"]
    return artifacts


def dct_mask_indices(height, width, keep_fraction, rng):
    """Observed DCT coefficients: the low-frequency corner block plus a
    random fraction of the remaining coefficients."""
    bh, bw = -(-height // 3), -(-width // 3)
    coords = np.arange(height * width)
    u, v = coords // width, coords % width
    block = (u < bh) & (v < bw)
    rest = coords[~block]
    kept = rng.permutation(rest)[: int(round(keep_fraction * rest.size))]
    return np.sort(np.concatenate([coords[block], kept]))


def run_posterior_dct(cfg, out, phases, extras):
    """Recover the synthetic image from partial noisy DCT coefficients.

    stats.csv columns: psnr_zero_fill,psnr_mean,psnr_boost,kept_coefficients.
    Images: truth/zero_fill/mean/std PGMs.
    """
    h = int(cfg.model.get("height", 24))
    w = int(cfg.model.get("width", 24))
    sigma = float(cfg.observation.get("noise_sigma", 0.02))
    keep = float(cfg.observation.get("keep_fraction", 0.75))
    if not 0.0 <= keep <= 1.0:
        raise ValueError("invalid-argument: keep_fraction must be in [0, 1]")
    seeds = _derive_seeds(cfg.seed)
    truth = synthetic_image(h, w)
    mask = dct_mask_indices(h, w, keep, np.random.default_rng(seeds["mask"]))
    dct = linops.Dct2d(h, w)
    coeffs = dct.apply(truth.reshape(-1))
    noise_rng = np.random.default_rng(seeds["observation"])
    y = coeffs[mask] + sigma * noise_rng.standard_normal(mask.size)

    posterior = phases.run(
        "build", lambda: glm.build_posterior_dct_inpaint(_build_prior(cfg), y, mask, sigma**2)
    )
    zero_fill = glm.zero_fill_dct((h, w), mask, y).reshape(h, w)
    result = phases.run(
        "sample",
        lambda: glm.run_chains(
            posterior, zero_fill.reshape(-1), cfg.iterations, cfg.chains, seed=seeds["sample"]
        ),
    )

    artifacts = []

    def evaluate():
        x = result.state.x
        mean_img = x.mean(axis=0).reshape(h, w)
        std_img = x.std(axis=0).reshape(h, w)
        rows = [
            (
                analysis.psnr(zero_fill, truth),
                analysis.psnr(mean_img, truth),
                analysis.psnr(mean_img, truth) - analysis.psnr(zero_fill, truth),
                mask.size,
            )
        ]
        write_csv(
            out / "stats.csv",
            ("psnr_zero_fill", "psnr_mean", "psnr_boost", "kept_coefficients"),
            rows,
        )
        emit_pgm(zero_fill, out / "zero_fill.pgm", mode="unit")
        _posterior_images(out, truth, mean_img, std_img, extras, artifacts)

    phases.run("evaluate", evaluate)
    artifacts += ["stats.csv", "zero_fill.pgm"]
    extras["dct"] = {"kept": int(mask.size), "total": h * w}
    return artifacts


def run_tree_direct(cfg, out, phases, extras):
    """Direct tree sampling; chains counts draws and iterations must be 1.

    edge_w1.csv columns: edge,parent,child,w1 (W1 of the sampled edge
    difference against the factor's analytic law).
    """
    if cfg.iterations != 1:
        raise ValueError("invalid-argument: tree-direct is exact; iterations must be 1")
    spec = cfg.model
    parents = spec.get("parents", "chain")
    if parents == "chain":
        nodes = int(spec.get("nodes", 7))
        parents = [-1] + list(range(nodes - 1))
    factor = _build_factor(spec.get("factor"))
    phi0 = (
        _build_factor(spec["root_factor"])
        if spec.get("root_factor")
        else factors.Normal(0.0, 1.0)
    )
    tree = phases.run("build", lambda: direct.DirectedTree(parents))
    seeds = _derive_seeds(cfg.seed)
    rng = np.random.default_rng(seeds["sample"])
    x = phases.run(
        "sample", lambda: direct.sample_tree_prior(tree, phi0, factor, rng, size=cfg.chains)
    )

    artifacts = []

    def evaluate():
        gt = analysis.ground_truth_marginal("factor", factor)
        rows = []
        for k, (parent, child) in enumerate(tree.edges):
            vals = x[:, child] - x[:, parent]
            rows.append((k, parent, child, analysis.wasserstein1(vals, gt)))
        write_csv(out / "edge_w1.csv", ("edge", "parent", "child", "w1"), rows)
        if rows:
            extras["max_edge_w1"] = float(max(r[3] for r in rows))

    phases.run("evaluate", evaluate)
    artifacts.append("edge_w1.csv")
    return artifacts


_RUNNERS = {
    "baseline-topology": run_baseline_topology,
    "init-sensitivity": run_init_sensitivity,
    "gmm-parametrization": run_gmm_parametrization,
    "image-prior": run_image_prior,
    "posterior-denoise": run_posterior_denoise,
    "posterior-dct": run_posterior_dct,
    "tree-direct": run_tree_direct,
}


def run_experiment(cfg):
    """Execute one experiment; returns the manifest mapping.

    Artifacts land in cfg.out; manifest.json is written last and flags
    partially written runs, with the error category, when a phase fails.
    """
    if not cfg.out:
        raise ValueError("invalid-argument: no output directory configured")
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    phases = _Phases()
    extras = {}
    manifest = {
        "kind": cfg.kind,
        "sampler": cfg.sampler,
        "config": cfg.to_mapping(),
        "config_hash": cfg.config_hash(),
        "versions": {
            "python": platform.python_version(),
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "poegibbs": __version__,
        },
        "artifacts": [],
        "partial": False,
        "error": None,
    }
    try:
        manifest["artifacts"] = _RUNNERS[cfg.kind](cfg, out, phases, extras)
    except Exception as e:
        manifest["partial"] = True
        manifest["error"] = {"category": _error_category(e), "message": str(e)}
        raise
    finally:
        manifest["extras"] = extras
        manifest["timings"] = dict(phases.timings, total=phases.total())
        with open(out / "manifest.json", "w") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
            fh.write("\n")
    return manifest


# ---------------------------------------------------------------------------
# metrics / replay


def load_samples_csv(path):
    """Read a long-format samples CSV into {label: (iterations, chains)}."""
    with open(path, "r", newline="") as fh:
        header = fh.readline().strip().split(",")
        if header != ["iteration", "chain", "label", "value"]:
            raise ValueError("invalid-argument: expected iteration,chain,label,value columns")
        table = {}
        for line in fh:
            it, chain, label, value = line.rstrip("\n").split(",")
            table.setdefault(label, {}).setdefault(int(it), {})[int(chain)] = float(value)
    out = {}
    for label, by_iter in table.items():
        iters = sorted(by_iter)
        chains = sorted(by_iter[iters[0]])
        grid = np.empty((len(iters), len(chains)))
        for i, it in enumerate(iters):
            row = by_iter[it]
            if sorted(row) != chains:
                raise ValueError("invalid-argument: ragged samples table")
            grid[i] = [row[c] for c in chains]
        out[label] = grid
    if not out:
        raise ValueError("invalid-argument: empty samples table")
    return out


def run_metrics(samples_path, out, max_lag=50):
    """Recompute ACF and sampling efficiency from a dumped samples CSV."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    acf_rows, eff_rows = [], []
    for label, series in load_samples_csv(samples_path).items():
        rho, g_mean, g_std = _acf_and_efficiency(series, max_lag)
        acf_rows.extend(
            (label, k + 1, rho[:, k].mean(), rho[:, k].std()) for k in range(rho.shape[1])
        )
        eff_rows.append((label, g_mean, g_std, series.shape[1]))
    write_csv(out / "acf.csv", ("label", "lag", "mean", "std"), acf_rows)
    write_csv(out / "efficiency.csv", ("label", "gamma_mean", "gamma_std", "chains_pooled"), eff_rows)
    return out


def run_replay(manifest_path, out):
    """Re-run a finished experiment and byte-compare its CSV artifacts."""
    manifest_path = Path(manifest_path)
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    if manifest.get("partial"):
        raise ValueError("invalid-argument: cannot replay a partial run")
    cfg = config_from_mapping(manifest["config"], {"out": str(out)})
    run_experiment(cfg)
    src = manifest_path.parent
    mismatches = []
    for name in manifest["artifacts"]:
        if not name.endswith(".csv"):
            continue
        if (src / name).read_bytes() != (Path(out) / name).read_bytes():
            mismatches.append(name)
    if mismatches:
        raise RuntimeError(f"determinism-mismatch: {', '.join(mismatches)}")
    return [n for n in manifest["artifacts"] if n.endswith(".csv")]


# ---------------------------------------------------------------------------
# command line


def _error_category(exc):
    msg = str(exc)
    head = msg.split(":", 1)[0].strip()
    if head in _ERROR_EXIT_CODES:
        return head
    if isinstance(exc, gaussian_sampler.ConvergenceError):
        return "convergence-failure"
    if isinstance(exc, analysis.GridTooNarrowError):
        return "grid-too-narrow"
    if isinstance(exc, linops.UnsupportedOperatorError):
        return "unsupported-operator"
    if isinstance(exc, OSError):
        return "io-error"
    if isinstance(exc, (ValueError, KeyError, TypeError)):
        return "invalid-argument"
    return "internal"


def _fail(exc):
    category = _error_category(exc)
    click.echo(f"error-category: {category}", err=True)
    click.echo(str(exc), err=True)
    sys.exit(_ERROR_EXIT_CODES[category])


def _common_options(fn):
    for opt in (
        click.option("--iters", type=int, default=None, help="Override iteration count."),
        click.option("--chains", type=int, default=None, help="Override chain count."),
        click.option("--out", type=click.Path(file_okay=False), default=None),
        click.option("--seed", type=int, default=None, help="Override the seed."),
        click.option(
            "--config",
            "config_path",
            required=True,
            type=click.Path(exists=True, dir_okay=False),
        ),
    ):
        fn = opt(fn)
    return fn


def _run_kinds(config_path, seed, out, chains, iters, allowed):
    try:
        cfg = load_config(
            config_path,
            {"seed": seed, "out": out, "chains": chains, "iterations": iters},
        )
        if cfg.kind not in allowed:
            raise ValueError(
                f"invalid-argument: kind {cfg.kind!r} does not belong to this command"
            )
        manifest = run_experiment(cfg)
    except Exception as e:  # noqa: BLE001 - single exit path with categories
        _fail(e)
    click.echo(f"wrote {len(manifest['artifacts'])} artifacts to {cfg.out}")


@click.group()
@click.version_option(version=__version__, prog_name="poegibbs")
def main():
    """Sampling experiments for product-of-experts models."""


@main.command("baseline")
@_common_options
def baseline_cmd(config_path, seed, out, chains, iters):
    """Benchmark graphs: baseline-topology, init-sensitivity, gmm-parametrization."""
    _run_kinds(
        config_path,
        seed,
        out,
        chains,
        iters,
        ("baseline-topology", "init-sensitivity", "gmm-parametrization"),
    )


@main.command("sample-prior")
@_common_options
def sample_prior_cmd(config_path, seed, out, chains, iters):
    """Image difference priors (kind image-prior)."""
    _run_kinds(config_path, seed, out, chains, iters, ("image-prior",))


@main.command("sample-posterior")
@_common_options
def sample_posterior_cmd(config_path, seed, out, chains, iters):
    """Posterior experiments (kinds posterior-denoise, posterior-dct)."""
    _run_kinds(config_path, seed, out, chains, iters, ("posterior-denoise", "posterior-dct"))


@main.command("direct-tree")
@_common_options
def direct_tree_cmd(config_path, seed, out, chains, iters):
    """Direct tree-prior sampling (kind tree-direct)."""
    _run_kinds(config_path, seed, out, chains, iters, ("tree-direct",))


@main.command("metrics")
@click.option("--samples", "samples_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--out", required=True, type=click.Path(file_okay=False))
@click.option("--max-lag", type=int, default=50)
def metrics_cmd(samples_path, out, max_lag):
    """Recompute ACF/efficiency tables from a dumped samples CSV."""
    try:
        run_metrics(samples_path, out, max_lag=max_lag)
    except Exception as e:  # noqa: BLE001
        _fail(e)
    click.echo(f"wrote metrics to {out}")


@main.command("replay")
@click.option(
    "--manifest",
    "manifest_path",
    required=True,
    type=click.Path(exists=True, dir_okay=False),
)
@click.option("--out", required=True, type=click.Path(file_okay=False))
def replay_cmd(manifest_path, out):
    """Re-run a manifest and verify the CSV artifacts are byte-identical."""
    try:
        names = run_replay(manifest_path, out)
    except Exception as e:  # noqa: BLE001
        _fail(e)
    click.echo(f"replayed {len(names)} CSV artifacts byte-identically")


if __name__ == "__main__":
    main()
