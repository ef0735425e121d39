"""Experiment orchestration: design selection, replicate posteriors and result files.

Output layout of ``run_experiment``::

    outdir/config.json              resolved configuration
    outdir/utility_curve.csv        evaluated designs (grid curve or BO evaluations)
    outdir/bo_trace.csv             BO runs only
    outdir/posterior_samples_{r}.csv
    outdir/density_grid.csv         replicate-averaged densities with +-1 sd bands
    outdir/summary.json
    outdir/manifest.json            sha256 of every file above
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .bayesopt import (BOTrace, OrderedSimplexTransform, optimize_utility_bo, optimize_utility_grid,
                       write_trace_csv)
from .core import (DesignPoint, DesignSpace, InvalidArgument, TruncatedNormalPrior, UniformBoxPrior,
                   equidistant_design, prior_from_dict, substream)
from .lfire import Regularization
from .posterior import (DegenerateWeights, WeightedPrior, average_densities, compute_weights,
                        default_death_grid, exact_death_posterior, grid_summary, kde_fit,
                        likelihood_weights, resample, summarize, trapezoid_normalise)
from .simulators import DeathConfig, DeathModel, SIRConfig, SIRModel
from .utility import (LfireConfig, UtilityEstimate, UtilityObjective, evaluate, fit_ratios, fmt,
                      write_curve_csv)

log = logging.getLogger(__name__)

MODELS = ("death", "sir")
METHODS = ("grid", "bo", "random", "equidistant")
ESTIMATORS = ("lfire", "analytic")
FEATURE_KINDS = ("raw", "standardized-poly2")
DEFAULT_TRUTH = {"death": [1.5], "sir": [0.15, 0.05]}
DEFAULT_UPPER = {"death": 4.0, "sir": 3.0}


class ConfigError(ValueError):
    def __init__(self, errors: list[str]):
        self.errors = errors
        super().__init__("invalid experiment configuration:\n  " + "\n  ".join(errors))


class MissingArtifacts(RuntimeError):
    pass


@dataclass
class ExperimentConfig:
    model: str = "death"
    method: str = "grid"
    estimator: str = "lfire"
    dims: int = 1
    lower: float = 0.0
    upper: float | None = None
    grid_step: float = 0.1
    prior: dict | None = None
    n_prior: int = 1000
    n_lfire: int = 1000
    feature_kind: str = "standardized-poly2"
    penalty: float | None = None
    budget: int = 30
    init_count: int | None = None
    replicates: int = 50
    posterior_samples: int = 10000
    true_params: list[float] | None = None
    population: int = 50
    dt: float = 0.01
    seed: int = 0
    outdir: str = "results"
    workers: int = 1
    xi: float = 0.01
    density_points: int = 512

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ExperimentConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - names)
        if unknown:
            raise ConfigError([f"unknown field {k!r}" for k in unknown])
        cfg = cls(**d)
        cfg.validate()
        return cfg

    @classmethod
    def from_json(cls, path: str | Path) -> "ExperimentConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def errors(self) -> list[str]:
        errs = []
        if self.model not in MODELS:
            errs.append(f"model must be one of {MODELS}, got {self.model!r}")
        if self.method not in METHODS:
            errs.append(f"method must be one of {METHODS}, got {self.method!r}")
        if self.estimator not in ESTIMATORS:
            errs.append(f"estimator must be one of {ESTIMATORS}, got {self.estimator!r}")
        if self.estimator == "analytic" and self.model != "death":
            errs.append("the analytic estimator is only available for the death model")
        if self.feature_kind not in FEATURE_KINDS:
            errs.append(f"feature_kind must be one of {FEATURE_KINDS}, got {self.feature_kind!r}")
        if not isinstance(self.dims, int) or self.dims < 1:
            errs.append(f"dims must be a positive integer, got {self.dims!r}")
        elif self.method == "grid" and self.dims != 1:
            errs.append("grid search requires dims = 1")
        for name in ("n_prior", "n_lfire", "budget", "posterior_samples", "population", "workers",
                     "density_points"):
            value = getattr(self, name)
            if not isinstance(value, int) or value < 1:
                errs.append(f"{name} must be a positive integer, got {value!r}")
        if isinstance(self.n_lfire, int) and self.n_lfire < 2:
            errs.append("n_lfire must be at least 2")
        if not isinstance(self.replicates, int) or self.replicates < 0:
            errs.append(f"replicates must be a non-negative integer, got {self.replicates!r}")
        if self.init_count is not None:
            if not isinstance(self.init_count, int) or self.init_count < 2:
                errs.append(f"init_count must be an integer >= 2, got {self.init_count!r}")
            elif isinstance(self.budget, int) and self.budget < self.init_count:
                errs.append("budget must be at least init_count")
        elif self.method == "bo" and isinstance(self.budget, int) and isinstance(self.dims, int) \
                and self.dims >= 1 and self.budget < (5 if self.dims == 1 else max(5, self.dims + 2)):
            errs.append("budget is smaller than the default initial design size")
        upper = self.upper if self.upper is not None else DEFAULT_UPPER.get(self.model, 1.0)
        if not self.lower < upper:
            errs.append(f"need lower < upper, got ({self.lower}, {upper}]")
        if self.grid_step is None or not self.grid_step > 0:
            errs.append(f"grid_step must be positive, got {self.grid_step!r}")
        if not self.dt > 0:
            errs.append(f"dt must be positive, got {self.dt!r}")
        if self.penalty is not None and not self.penalty > 0:
            errs.append(f"penalty must be positive, got {self.penalty!r}")
        if not isinstance(self.seed, int) or self.seed < 0:
            errs.append(f"seed must be a non-negative integer, got {self.seed!r}")
        if self.xi < 0:
            errs.append(f"xi must be non-negative, got {self.xi}")
        if self.prior is not None:
            try:
                prior_from_dict(self.prior)
            except (InvalidArgument, KeyError, TypeError) as exc:
                errs.append(f"invalid prior: {exc}")
        truth = self.true_params
        want = 1 if self.model == "death" else 2
        if truth is not None and len(truth) != want:
            errs.append(f"true_params must have {want} entries for model {self.model!r}")
        return errs

    def validate(self) -> "ExperimentConfig":
        errs = self.errors()
        if errs:
            raise ConfigError(errs)
        return self

    # resolved components

    def space(self) -> DesignSpace:
        upper = self.upper if self.upper is not None else DEFAULT_UPPER[self.model]
        return DesignSpace(self.dims, self.lower, upper, self.grid_step)

    def prior_spec(self):
        if self.prior is not None:
            return prior_from_dict(self.prior)
        return TruncatedNormalPrior(1.0, 1.0, 0.0) if self.model == "death" else UniformBoxPrior((0.0, 0.0), (0.5, 0.5))

    def simulator(self):
        if self.model == "death":
            return DeathModel(DeathConfig(self.population, self.dt))
        return SIRModel(SIRConfig(self.population, self.dt))

    def truth(self) -> np.ndarray:
        return np.asarray(self.true_params if self.true_params is not None else DEFAULT_TRUTH[self.model])

    def objective(self) -> UtilityObjective:
        lfire = LfireConfig(M=self.n_lfire, kind=self.feature_kind, reg=Regularization(penalty=self.penalty))
        return UtilityObjective(self.simulator(), self.prior_spec(), self.n_prior, lfire, self.seed, self.workers)


@dataclass
class RunReport:
    design: DesignPoint
    utility: UtilityEstimate
    outdir: Path
    files: dict[str, str] = field(default_factory=dict)
    summary: dict[str, Any] = field(default_factory=dict)
    trace: BOTrace | None = field(default=None, repr=False)
    curve: list[UtilityEstimate] | None = field(default=None, repr=False)

    def verify(self) -> list[str]:
        return verify_manifest(self.outdir)


def sha256(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_json(path: Path, obj: Any) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_manifest(outdir: Path, names: list[str]) -> dict[str, str]:
    files = {name: sha256(outdir / name) for name in sorted(names)}
    write_json(outdir / "manifest.json", {"files": files})
    return files


def verify_manifest(outdir: str | Path) -> list[str]:
    """Problems with the manifest in ``outdir``; an empty list means every file verifies."""
    outdir = Path(outdir)
    path = outdir / "manifest.json"
    if not path.exists():
        return ["manifest.json is missing"]
    files = json.loads(path.read_text())["files"]
    problems = []
    for name, digest in files.items():
        target = outdir / name
        if not target.exists():
            problems.append(f"missing: {name}")
        elif sha256(target) != digest:
            problems.append(f"hash mismatch: {name}")
    return problems


def random_design(space: DesignSpace, rng: np.random.Generator) -> DesignPoint:
    """Uniform draw over the ordered design region."""
    if space.dim == 1:
        return DesignPoint((space.upper - (space.upper - space.lower) * rng.random(),))
    return OrderedSimplexTransform.for_space(space).to_design(rng.random(space.dim))


def _density_axes(config: ExperimentConfig, prior) -> list[np.ndarray]:
    if config.model == "death":
        return [default_death_grid(config.density_points)]
    box = prior.bounds()
    side = max(21, int(round(np.sqrt(config.density_points * 20))))
    return [np.linspace(lo, hi, side) for lo, hi in box]


def _marginals(axes: list[np.ndarray], density: np.ndarray) -> list[np.ndarray]:
    if len(axes) == 1:
        return [density]
    return [np.trapezoid(density, axes[1], axis=1), np.trapezoid(density, axes[0], axis=0)]


@dataclass
class ReplicateResult:
    index: int
    design: DesignPoint
    observation: np.ndarray
    samples: Any
    density: np.ndarray
    summary: list
    ess: float
    exact_density: np.ndarray | None = None


def posterior_replicates(config: ExperimentConfig, objective: UtilityObjective, design: DesignPoint,
                         count: int, key: str = "observation", designs: list[DesignPoint] | None = None,
                         ) -> tuple[list[ReplicateResult], list[dict]]:
    """Observe at the true parameters, weight the prior bank, resample and smooth, per replicate.

    With ``designs`` each replicate uses its own design (random baseline).
    Replicates whose weights degenerate are skipped and reported.
    """
    prior = objective.prior
    axes = _density_axes(config, prior)
    truth = config.truth()
    bank = objective.thetas
    model = objective.model
    ratios = {}
    results, skipped = [], []
    for r in range(count):
        d = designs[r] if designs is not None else design
        y = model.simulate(truth, d, 1, substream(config.seed, key, r))[0]
        try:
            if config.estimator == "analytic":
                wp: WeightedPrior = likelihood_weights(y, d, bank, model.cfg)
            else:
                if d not in ratios:
                    # one LFIRE fit per design, reused by every replicate observed there
                    ratios = {d: fit_ratios(objective, d, stream=0)}
                wp = compute_weights(ratios[d].models, y, bank, objective.lfire.clip)
        except DegenerateWeights as exc:
            log.warning("replicate %d skipped: %s", r, exc)
            skipped.append({"replicate": r, "reason": str(exc)})
            continue
        ps = resample(wp, config.posterior_samples, substream(config.seed, key + "-resample", r), d, y)
        kde = kde_fit(ps, prior_range=prior.bounds())
        dens = kde.on_grid(axes)
        exact = None
        if config.model == "death":
            exact = exact_death_posterior(y, d, prior, model.cfg, axes[0])[1]
        results.append(ReplicateResult(r, d, y, ps, dens, summarize(ps), wp.ess, exact))
    return results, skipped


def _write_samples(path: Path, names: tuple[str, ...], draws: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(names)
        for row in np.asarray(draws).reshape(len(draws), -1):
            w.writerow([fmt(v) for v in row])


def _write_density_grid(path: Path, names: tuple[str, ...], axes: list[np.ndarray],
                        columns: dict[str, np.ndarray]) -> None:
    mesh = np.meshgrid(*axes, indexing="ij")
    coords = [m.reshape(-1) for m in mesh]
    flat = {k: np.asarray(v).reshape(-1) for k, v in columns.items()}
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(names) + list(flat))
        for i in range(coords[0].size):
            w.writerow([fmt(c[i]) for c in coords] + [fmt(v[i]) for v in flat.values()])


def _band_columns(prefix: str, densities: list[np.ndarray]) -> dict[str, np.ndarray]:
    mean, sd = average_densities(densities)
    return {f"{prefix}mean": mean, f"{prefix}lower": mean - sd, f"{prefix}upper": mean + sd}


def averaged_summary(axes: list[np.ndarray], densities: list[np.ndarray], names: tuple[str, ...]) -> dict:
    """Median and 95% interval of the replicate-averaged density, per parameter."""
    mean, _ = average_densities(densities)
    out = {}
    for name, axis, marg in zip(names, axes, _marginals(axes, mean)):
        out[name] = grid_summary(axis, trapezoid_normalise(axis, marg)).to_dict()
    return out


def select_design(config: ExperimentConfig, objective: UtilityObjective):
    space = config.space()
    trace = curve = None
    if config.method == "grid":
        design, est, curve = optimize_utility_grid(objective, space, config.estimator)
    elif config.method == "bo":
        trace = optimize_utility_bo(objective, space, config.budget, config.init_count, config.estimator, config.xi)
        design = trace.incumbent
        est = next(s.estimate for s in trace.steps if s.design == design)
        curve = sorted((s.estimate for s in trace.steps), key=lambda e: e.design.times)
    else:
        if config.method == "random":
            design = random_design(space, substream(config.seed, "random-design"))
        else:
            design = equidistant_design(space)
        est = evaluate(objective, design, config.estimator)
        curve = [est]
    return design, est, trace, curve


def run_experiment(config: ExperimentConfig) -> RunReport:
    """Select a design, run the replicate posterior pipeline and write every artifact."""
    config.validate()
    outdir = Path(config.outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    objective = config.objective()
    names = ["config.json"]
    write_json(outdir / "config.json", config.to_dict())

    design, est, trace, curve = select_design(config, objective)
    write_curve_csv(outdir / "utility_curve.csv", curve)
    names.append("utility_curve.csv")
    if trace is not None:
        write_trace_csv(outdir / "bo_trace.csv", trace)
        names.append("bo_trace.csv")

    summary: dict[str, Any] = {
        "model": config.model, "method": config.method, "estimator": config.estimator,
        "design": list(design.times), "utility": est.value, "utility_std_error": est.std_error,
        "prior_bank_fingerprint": objective.bank.fingerprint,
    }
    if trace is not None:
        summary["bo_failures"] = [{"design": list(d.times), "error": e} for d, e in trace.failures]

    if config.replicates > 0:
        param_names = objective.model.param_names
        axes = _density_axes(config, objective.prior)
        reps, skipped = posterior_replicates(config, objective, design, config.replicates)
        for rep in reps:
            fname = f"posterior_samples_{rep.index}.csv"
            _write_samples(outdir / fname, param_names, rep.samples.draws)
            names.append(fname)
        summary["skipped_replicates"] = skipped
        summary["replicates"] = [{"replicate": r.index, "observation": r.observation.tolist(),
                                  "ess": r.ess, "posterior": {n: s.to_dict() for n, s in zip(param_names, r.summary)}}
                                 for r in reps]
        if reps:
            columns = _band_columns("", [r.density for r in reps])
            summary["posterior_mean_density"] = averaged_summary(axes, [r.density for r in reps], param_names)
            if config.model == "death":
                exact = [r.exact_density for r in reps]
                columns.update(_band_columns("exact_", exact))
                summary["exact_mean_density"] = averaged_summary(axes, exact, param_names)
            _write_density_grid(outdir / "density_grid.csv", param_names, axes, columns)
            names.append("density_grid.csv")

    write_json(outdir / "summary.json", summary)
    names.append("summary.json")
    files = write_manifest(outdir, names)
    return RunReport(design, est, outdir, files, summary, trace, curve)


def random_baseline(config: ExperimentConfig) -> list[dict]:
    """Posterior families from uniformly drawn designs, one design per replicate.

    Writes ``baseline_density_{r}.csv`` for each successful replicate and
    ``baseline_summary.json``; degenerate replicates are skipped and listed.
    """
    config.validate()
    outdir = Path(config.outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    objective = config.objective()
    space = config.space()
    designs = [random_design(space, substream(config.seed, "baseline-design", r)) for r in range(config.replicates)]
    reps, skipped = posterior_replicates(config, objective, designs[0] if designs else None,
                                         config.replicates, key="baseline-observation", designs=designs)
    axes = _density_axes(config, objective.prior)
    names = objective.model.param_names
    out, files = [], []
    for rep in reps:
        fname = f"baseline_density_{rep.index}.csv"
        _write_density_grid(outdir / fname, names, axes, {"density": rep.density})
        files.append(fname)
        out.append({"replicate": rep.index, "design": list(rep.design.times),
                    "observation": rep.observation.tolist(),
                    "posterior": {n: s.to_dict() for n, s in zip(names, rep.summary)}})
    write_json(outdir / "baseline_summary.json", {"replicates": out, "skipped": skipped})
    files.append("baseline_summary.json")
    write_manifest(outdir, files)
    return out


def equidistant_comparison(config: ExperimentConfig, optimum: DesignPoint | None = None,
                           stream: int = 2) -> dict[str, Any]:
    """U at the equidistant design versus U at the BO incumbent.

    Both are re-estimated on a fresh evaluation stream so the incumbent's
    selection noise does not favour it.
    """
    config.validate()
    if config.dims < 2:
        raise ConfigError(["the equidistant comparison needs dims >= 2"])
    objective = config.objective()
    space = config.space()
    trace = None
    if optimum is None:
        trace = optimize_utility_bo(objective, space, config.budget, config.init_count, config.estimator, config.xi)
        optimum = trace.incumbent
    d_eq = equidistant_design(space)
    u_eq = evaluate(objective, d_eq, config.estimator, stream)
    u_star = evaluate(objective, optimum, config.estimator, stream)
    result = {
        "equidistant_design": list(d_eq.times), "optimal_design": list(optimum.times),
        "U_eq": u_eq.value, "U_eq_std_error": u_eq.std_error,
        "U_star": u_star.value, "U_star_std_error": u_star.std_error,
        "difference": u_star.value - u_eq.value,
    }
    if trace is not None:
        result["bo_cumulative_best"] = trace.best_curve.tolist()
    return result


def _read_csv(path: Path) -> tuple[list[str], np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], np.array([[float(x) for x in r] for r in rows[1:]]).reshape(len(rows) - 1, len(rows[0]))


def export_plot_data(outdir: str | Path) -> list[Path]:
    """Plot-ready files under ``outdir/plots`` from a finished run.

    Utility curves are min-max normalised to [0, 1]; the convergence file is
    the BO cumulative best; density bands are (mean, mean - sd, mean + sd).
    """
    outdir = Path(outdir)
    problems = verify_manifest(outdir)
    if problems:
        raise MissingArtifacts("run directory does not match its manifest: " + "; ".join(problems))
    files = json.loads((outdir / "manifest.json").read_text())["files"]
    plots = outdir / "plots"
    plots.mkdir(exist_ok=True)
    written = []

    if "utility_curve.csv" in files:
        header, data = _read_csv(outdir / "utility_curve.csv")
        k = header.index("value")
        v = data[:, k]
        finite = np.isfinite(v)
        span = v[finite].max() - v[finite].min() if finite.any() else 0.0
        norm = (v - v[finite].min()) / span if span > 0 else np.zeros_like(v)
        path = plots / "utility_curve_normalised.csv"
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header[:k] + ["value", "normalised"])
            for row, n in zip(data, norm):
                w.writerow([fmt(x) for x in row[:k]] + [fmt(row[k]), fmt(n)])
        written.append(path)

    if "bo_trace.csv" in files:
        header, data = _read_csv(outdir / "bo_trace.csv")
        path = plots / "convergence.csv"
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["evaluation", "cumulative_best"])
            for i, row in enumerate(data, start=1):
                w.writerow([i, fmt(row[header.index("cumulative_best")])])
        written.append(path)

    if "density_grid.csv" in files:
        header, data = _read_csv(outdir / "density_grid.csv")
        n_coords = header.index("mean")
        prefixes = [h[:-4] for h in header if h.endswith("mean")]
        for prefix in prefixes:
            label = prefix.rstrip("_") or "posterior"
            path = plots / f"density_bands_{label}.csv"
            cols = [header.index(prefix + s) for s in ("mean", "lower", "upper")]
            with open(path, "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(header[:n_coords] + ["mean", "mean_minus_sd", "mean_plus_sd"])
                for row in data:
                    w.writerow([fmt(x) for x in row[:n_coords]] + [fmt(row[c]) for c in cols])
            written.append(path)
    return written
