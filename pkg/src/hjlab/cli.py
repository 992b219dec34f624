"""Experiment driver: declarative configs, presets, and run manifests.

A config is one YAML mapping: grid, problem (component catalog entries),
and an ordered pipeline of stages.  Stages communicate through a context
(forward trajectory, adjoint density, ergodic solution, ...) and each
writes CSV tables plus two-column plot data with a gnuplot stub.  All
numeric outputs are deterministic: rerunning a config reproduces them
byte for byte, so recorded wall times live only in the manifest and the
wall-time column of CSV tables emitted by the driver is zeroed.

Exit codes: 0 success, 1 validation/config error, 2 stage failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import yaml

from hjlab.adjoint import linearize, solve_adjoint, solve_system_adjoint
from hjlab.analysis import (
    closeness_check,
    coupling_estimate,
    energy_trace,
    key_estimates,
    large_time_convergence,
    rate_sweep,
    representation_check,
)
from hjlab.ergodic import (
    ErgodicOptions,
    SweepRow,
    SweepTable,
    solve_ergodic,
    solve_system_ergodic,
    viscosity_sweep,
)
from hjlab.forward import (
    SolverOptions,
    manufacture_grid_exact,
    piecewise_linear_profile,
    solve_cauchy,
    solve_system_cauchy,
)
from hjlab.grid import make_grid
from hjlab.problem import (
    CouplingMatrix,
    ProblemSpec,
    diffusion_from_config,
    hamiltonian_from_config,
    trig_from_config,
    validate_coupling,
    validate_pair,
)

HAMILTONIAN_FAMILIES = ("quadratic", "shifted_quadratic", "manufactured", "manufactured_exact")
DIFFUSION_FAMILIES = ("zero", "constant", "sin_squared", "rank_one_2d")

PRESET_NAMES = ("rate-scalar", "rate-system", "energy-audit",
                "ergodic-sweep", "coupling-audit", "longtime")


class ConfigError(ValueError):
    """Schema violation; the message starts with the offending field."""

    def __init__(self, field_path: str, message: str):
        super().__init__(f"{field_path}: {message}")
        self.field = field_path


def _require(cond: bool, field_path: str, message: str) -> None:
    if not cond:
        raise ConfigError(field_path, message)


def _is_number(x) -> bool:
    return isinstance(x, (int, float)) and not isinstance(x, bool)


# stage kind -> context keys it consumes / provides
REQUIRES = {
    "forward": frozenset(),
    "ergodic": frozenset(),
    "ergodic-sweep": frozenset(),
    "adjoint": frozenset({"forward"}),
    "energy": frozenset({"forward", "adjoint"}),
    "representation": frozenset({"forward", "adjoint"}),
    "estimates": frozenset({"forward", "ergodic", "adjoint"}),
    "coupling": frozenset({"forward", "ergodic", "adjoint"}),
    "rate": frozenset(),
    "longtime": frozenset({"ergodic"}),
    "closeness": frozenset(),
}
PRODUCES = {
    "forward": frozenset({"forward"}),
    "ergodic": frozenset({"ergodic"}),
    "ergodic-sweep": frozenset({"sweep"}),
    "adjoint": frozenset({"adjoint"}),
    "rate": frozenset({"rate"}),
}


def _validate_eps_list(field_path: str, values, minimum: int) -> None:
    _require(isinstance(values, list) and len(values) >= minimum, field_path,
             f"needs a list of at least {minimum} epsilon values")
    _require(all(_is_number(e) and e > 0 for e in values), field_path,
             "epsilon values must be positive numbers")
    _require(sorted(values, reverse=True) == list(values), field_path,
             "epsilon values must be sorted descending")


def _validate_component(field_path: str, cfg, dim: int) -> None:
    _require(isinstance(cfg, dict), field_path, "must be a mapping")
    family = cfg.get("family")
    _require(family in HAMILTONIAN_FAMILIES, f"{field_path}.family",
             f"unknown hamiltonian family {family!r} "
             f"(catalog: {', '.join(HAMILTONIAN_FAMILIES)})")
    if family in ("quadratic", "shifted_quadratic"):
        _require("potential" in cfg, f"{field_path}.potential", "missing")
    if family == "shifted_quadratic":
        drift = cfg.get("drift")
        _require(isinstance(drift, list) and len(drift) == dim,
                 f"{field_path}.drift", f"needs {dim} component(s)")
    if family in ("manufactured", "manufactured_exact"):
        _require("target" in cfg, f"{field_path}.target", "missing")


def _validate_diffusion(field_path: str, cfg, dim: int) -> None:
    _require(isinstance(cfg, dict), field_path, "must be a mapping")
    family = cfg.get("family")
    _require(family in DIFFUSION_FAMILIES, f"{field_path}.family",
             f"unknown diffusion family {family!r} "
             f"(catalog: {', '.join(DIFFUSION_FAMILIES)})")
    if family == "rank_one_2d":
        _require(dim == 2, f"{field_path}.family", "rank_one_2d requires grid.dim = 2")


def validate_config(data) -> dict:
    """Schema check; raises ConfigError naming the offending field."""
    _require(isinstance(data, dict), "<root>", "config must be a mapping")
    for key in ("experiment", "grid", "problem", "pipeline"):
        _require(key in data, key, "missing required section")
    _require(isinstance(data["experiment"], str) and data["experiment"],
             "experiment", "must be a non-empty string")

    grid = data["grid"]
    _require(isinstance(grid, dict), "grid", "must be a mapping")
    dim = grid.get("dim")
    _require(dim in (1, 2), "grid.dim", "must be 1 or 2")
    n = grid.get("n")
    _require(isinstance(n, int) and n >= 8, "grid.n", "must be an integer >= 8")

    prob = data["problem"]
    _require(isinstance(prob, dict), "problem", "must be a mapping")
    eps = prob.get("epsilon")
    _require(_is_number(eps) and eps > 0, "problem.epsilon", "must be a positive number")
    if "eta" in prob and prob["eta"] is not None:
        _require(_is_number(prob["eta"]) and prob["eta"] >= 0,
                 "problem.eta", "must be a nonnegative number")

    coupling = prob.get("coupling")
    hams = prob.get("hamiltonian")
    _require(hams is not None, "problem.hamiltonian", "missing required section")
    diffs = prob.get("diffusion", {"family": "zero"})
    if coupling is not None:
        _require(isinstance(coupling, list) and len(coupling) >= 2,
                 "problem.coupling", "must be a matrix with at least 2 rows")
        m = len(coupling)
        for i, row in enumerate(coupling):
            _require(isinstance(row, list) and len(row) == m
                     and all(_is_number(v) for v in row),
                     f"problem.coupling[{i}]", f"must be a numeric row of length {m}")
        _require(isinstance(hams, list) and len(hams) == m,
                 "problem.hamiltonian", f"coupled problems need a list of {m} entries")
        _require(isinstance(diffs, list) and len(diffs) == m,
                 "problem.diffusion", f"coupled problems need a list of {m} entries")
        for i, cfg in enumerate(hams):
            _validate_component(f"problem.hamiltonian[{i}]", cfg, dim)
        for i, cfg in enumerate(diffs):
            _validate_diffusion(f"problem.diffusion[{i}]", cfg, dim)
    else:
        _require(isinstance(hams, dict), "problem.hamiltonian",
                 "must be a mapping (a list needs problem.coupling)")
        _validate_component("problem.hamiltonian", hams, dim)
        _require(isinstance(diffs, dict), "problem.diffusion", "must be a mapping")
        _validate_diffusion("problem.diffusion", diffs, dim)

    pipeline = data["pipeline"]
    _require(isinstance(pipeline, list) and pipeline, "pipeline",
             "must be a non-empty list of stages")
    produced: set = set()
    for i, st in enumerate(pipeline):
        where = f"pipeline[{i}]"
        _require(isinstance(st, dict), where, "must be a mapping")
        kind = st.get("stage")
        _require(kind in REQUIRES, f"{where}.stage",
                 f"unknown stage {kind!r} (known: {', '.join(sorted(REQUIRES))})")
        missing = sorted(REQUIRES[kind] - produced)
        _require(not missing, where,
                 f"stage {kind!r} requires producer stage(s) {missing} earlier in the pipeline")
        if kind == "rate":
            _validate_eps_list(f"{where}.eps_list", st.get("eps_list"), 4)
        if kind == "ergodic-sweep":
            _validate_eps_list(f"{where}.eps_list", st.get("eps_list"), 1)
        if kind == "closeness" and "eps_list" in st:
            _validate_eps_list(f"{where}.eps_list", st["eps_list"], 1)
        produced |= PRODUCES.get(kind, frozenset())

    if "output" in data:
        _require(isinstance(data["output"], str) and data["output"],
                 "output", "must be a non-empty path string")
    return data


def build_problem(data: dict) -> ProblemSpec:
    """Instantiate the validated config's problem."""
    grid = make_grid(data["grid"]["dim"], data["grid"]["n"])
    prob = data["problem"]
    coupling = prob.get("coupling")
    ham_cfgs = prob["hamiltonian"] if coupling is not None else [prob["hamiltonian"]]
    diff_cfgs = prob.get("diffusion", {"family": "zero"})
    if coupling is None:
        diff_cfgs = [diff_cfgs]
    diffusions = [diffusion_from_config(grid.dim, cfg) for cfg in diff_cfgs]
    hamiltonians = []
    for cfg, dspec in zip(ham_cfgs, diffusions):
        if cfg["family"] == "manufactured_exact":
            made = manufacture_grid_exact(
                grid,
                trig_from_config(grid.dim, cfg["target"]),
                dspec,
                p_box=float(cfg.get("p_box", 4.0)),
            )
            hamiltonians.append(made.hamiltonian)
        else:
            hamiltonians.append(hamiltonian_from_config(grid.dim, cfg, diffusion=dspec))
    coupling_obj = CouplingMatrix(np.array(coupling, dtype=float)) if coupling else None
    eta = prob.get("eta")
    return ProblemSpec(
        grid=grid,
        hamiltonians=tuple(hamiltonians),
        diffusions=tuple(diffusions),
        epsilon=float(prob["epsilon"]),
        eta=None if eta is None else float(eta),
        coupling=coupling_obj,
    )


def _initial_values(problem: ProblemSpec, spec) -> np.ndarray:
    """Initial data from config: zero, trig, or piecewise hat profile.

    Returns grid-shaped data for scalar problems, (m,) + shape for
    systems (one entry per component)."""
    grid = problem.grid

    def one(cfg):
        if cfg is None or cfg.get("kind", "zero") == "zero":
            return np.zeros(grid.shape)
        kind = cfg["kind"]
        if kind == "trig":
            return trig_from_config(grid.dim, cfg["terms"]).value(grid.coordinates())
        if kind == "piecewise":
            return piecewise_linear_profile(
                grid, center=float(cfg.get("center", 0.5)),
                height=float(cfg.get("height", 0.5)),
            )
        raise ConfigError("initial.kind", f"unknown initial data kind {kind!r}")

    if not problem.is_system:
        if isinstance(spec, list):
            raise ConfigError("initial", "scalar problems take a single mapping")
        return one(spec)
    if spec is None:
        return np.zeros((problem.m,) + grid.shape)
    if isinstance(spec, dict):
        raise ConfigError("initial", f"systems need a list of {problem.m} entries")
    if len(spec) != problem.m:
        raise ConfigError("initial", f"expected {problem.m} entries, got {len(spec)}")
    return np.stack([one(cfg) for cfg in spec])


# ---------------------------------------------------------------------------
# output helpers
# ---------------------------------------------------------------------------


def _write_xy(outdir: Path, stem: str, x, y, outputs: list,
              logscale: bool = False, title: str | None = None) -> None:
    dat = outdir / f"{stem}.dat"
    lines = ["%.17g %.17g" % (float(a), float(b)) for a, b in zip(x, y)]
    dat.write_text("\n".join(lines) + "\n")
    outputs.append(dat)
    gp = outdir / f"{stem}.gp"
    gp.write_text(
        "set terminal pngcairo\n"
        f"set output '{stem}.png'\n"
        + ("set logscale xy\n" if logscale else "")
        + f"plot '{stem}.dat' using 1:2 with linespoints title '{title or stem}'\n"
    )
    outputs.append(gp)


def _x0_from_params(problem: ProblemSpec, params: dict):
    x0 = params.get("x0", 0 if problem.grid.dim == 1 else [0, 0])
    if problem.grid.dim == 2:
        return (int(x0[0]), int(x0[1])) if isinstance(x0, (list, tuple)) else (int(x0), int(x0))
    return int(x0)


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------


def _stage_forward(problem, params, ctx, outdir: Path, outputs: list) -> dict:
    stored = params.get("stored_every", 1)
    opts = SolverOptions(
        dt=float(params["dt"]) if params.get("dt") is not None else None,
        p_box=float(params["p_box"]) if params.get("p_box") is not None else None,
        stored_every=None if stored in (0, None) else int(stored),
    )
    u0 = _initial_values(problem, params.get("initial"))
    solver = solve_system_cauchy if problem.is_system else solve_cauchy
    traj, report = solver(problem, u0, float(params.get("t_final", 1.0)), options=opts)
    ctx["forward"] = traj
    if problem.grid.dim == 1:
        _write_xy(outdir, "forward_final", problem.grid.coordinates()[0],
                  traj.final[0], outputs, title="w(x, T)")
    return {
        "n_steps": int(report.n_steps),
        "dt": float(report.dt),
        "max_gradient": float(report.max_gradient),
        "max_time_derivative": float(report.max_time_derivative),
        "newton_iterations": int(np.sum(report.newton_iterations)),
        "flags": ",".join(report.flags) if report.flags else "ok",
    }


def _stage_adjoint(problem, params, ctx, outdir: Path, outputs: list) -> dict:
    traj = ctx["forward"]
    x0 = _x0_from_params(problem, params)
    component = int(params.get("component", 0))
    seq = linearize(problem, traj, mode=params.get("mode", "secant"))
    if problem.is_system:
        density = solve_system_adjoint(seq, x0, component)
    else:
        density = solve_adjoint(seq, x0)
    ctx["adjoint"] = density
    t = density.dt * np.arange(len(density.masses))
    _write_xy(outdir, "adjoint_mass", t, density.masses, outputs, title="mass(t)")
    return {
        "mass_drift": float(density.mass_drift()),
        "min_density": float(np.min(density.min_values)),
    }


def _stage_energy(problem, params, ctx, outdir: Path, outputs: list) -> dict:
    trace = energy_trace(problem, ctx["forward"], ctx["adjoint"])
    csv = outdir / "energy_trace.csv"
    trace.to_csv(csv)
    outputs.append(csv)
    _write_xy(outdir, "energy_trace", trace.times, trace.values, outputs, title="E(t)")
    return {"drift": float(trace.drift), "initial_energy": float(trace.values[0])}


def _stage_representation(problem, params, ctx, outdir: Path, outputs: list) -> dict:
    density = ctx["adjoint"]
    rep = representation_check(problem, ctx["forward"], density.x0,
                               density=density, component=density.component)
    return {"lhs": rep.lhs, "rhs": rep.rhs, "gap": rep.gap}


def _ergodic_options(params) -> ErgodicOptions:
    return ErgodicOptions(
        march_dt=float(params.get("march_dt", 0.05)),
        window=float(params.get("window", 5.0)),
        max_time=float(params.get("max_time", 400.0)),
        polish=bool(params.get("polish", True)),
        p_box=float(params["p_box"]) if params.get("p_box") is not None else None,
    )


def _stage_ergodic(problem, params, ctx, outdir: Path, outputs: list) -> dict:
    tol = float(params.get("tol", 1e-8))
    solver = solve_system_ergodic if problem.is_system else solve_ergodic
    sol = solver(problem, tol, options=_ergodic_options(params))
    ctx["ergodic"] = sol
    row = SweepRow(problem.epsilon, sol.eta, sol.ergodic_constant,
                   sol.gradient_norm(), sol.residual, 0.0)
    table = SweepTable([row], [sol], None, None)
    csv = outdir / "ergodic_table.csv"
    table.to_csv(csv)
    outputs.append(csv)
    if problem.grid.dim == 1:
        _write_xy(outdir, "corrector", problem.grid.coordinates()[0],
                  sol.corrector[0], outputs, title="v(x)")
    return {
        "ergodic_constant": float(sol.ergodic_constant),
        "residual": float(sol.residual),
        "oscillation": float(sol.oscillation),
        "gradient_norm": float(sol.gradient_norm()),
        "method": sol.method,
    }


def _stage_ergodic_sweep(problem, params, ctx, outdir: Path, outputs: list) -> dict:
    table = viscosity_sweep(problem, params["eps_list"],
                            tol=float(params.get("tol", 1e-8)),
                            options=_ergodic_options(params))
    ctx["sweep"] = table
    deterministic = SweepTable(
        [replace(r, wall_time=0.0) for r in table.rows],
        table.solutions, table.reference_constant, table.slope,
    )
    csv = outdir / "sweep_table.csv"
    deterministic.to_csv(csv)
    outputs.append(csv)
    eps = [r.epsilon for r in table.rows]
    hbars = [abs(r.Hbar) for r in table.rows]
    _write_xy(outdir, "sweep_decay", eps, hbars, outputs, logscale=True,
              title="|Hbar(eps)|")
    metrics = {
        "n_rows": len(table.rows),
        "reference_constant": table.reference_constant,
        "slope": table.slope,
        "grad_norm_spread": (max(r.grad_norm for r in table.rows)
                             / max(min(r.grad_norm for r in table.rows), 1e-300)) - 1.0,
    }
    try:
        metrics["slope_about_zero"] = table.slope_about(0.0)
    except ValueError:
        metrics["slope_about_zero"] = None
    return metrics


def _stage_estimates(problem, params, ctx, outdir: Path, outputs: list) -> dict:
    report = key_estimates(problem, ctx["forward"], ctx["ergodic"], ctx["adjoint"])
    csv = outdir / "estimates.csv"
    report.to_csv(csv)
    outputs.append(csv)
    return {k: float(v) for k, v in report.entries.items()}


def _stage_coupling(problem, params, ctx, outdir: Path, outputs: list) -> dict:
    report = coupling_estimate(problem, ctx["forward"], ctx["ergodic"], ctx["adjoint"])
    csv = outdir / "coupling.csv"
    report.to_csv(csv)
    outputs.append(csv)
    metrics = {k: float(v) for k, v in report.entries.items()}
    metrics["weighted_difference_over_eps"] = metrics["weighted_difference"] / problem.epsilon
    return metrics


def _stage_rate(problem, params, ctx, outdir: Path, outputs: list) -> dict:
    denom = float(params.get("dt_denominator", 256))
    opts = SolverOptions(
        p_box=float(params["p_box"]) if params.get("p_box") is not None else None,
    )
    fit = rate_sweep(
        problem, params["eps_list"], _initial_values(problem, params.get("initial")),
        exponent=params.get("exponent"),
        dt_rule=lambda e: e / denom,
        solver_options=opts,
    )
    ctx["rate"] = fit
    csv = outdir / "rate.csv"
    fit.to_csv(csv)
    outputs.append(csv)
    _write_xy(outdir, "rate_decay", fit.epsilons, fit.values, outputs,
              logscale=True, title="eps * sup |w_t(., 1)|")
    return {
        "slope": float(fit.slope),
        "exponent": float(fit.exponent),
        "envelope_constant": float(fit.envelope_constant),
    }


def _stage_longtime(problem, params, ctx, outdir: Path, outputs: list) -> dict:
    diag = large_time_convergence(
        problem,
        _initial_values(problem, params.get("initial")),
        float(params.get("t_final", 100.0)),
        ctx["ergodic"],
        dt=float(params.get("dt", 0.05)),
    )
    csv = outdir / "longtime.csv"
    diag.to_csv(csv)
    outputs.append(csv)
    _write_xy(outdir, "longtime_distance", diag.times, diag.distances, outputs,
              title="d(t)")
    return {
        "final_distance": float(diag.final_distance),
        "all_monotone": bool(diag.all_monotone),
        "ergodic_constant": float(ctx["ergodic"].ergodic_constant),
    }


def _stage_closeness(problem, params, ctx, outdir: Path, outputs: list) -> dict:
    eps_list = params.get("eps_list", [problem.epsilon])
    u0 = _initial_values(problem, params.get("initial"))
    dt = params.get("dt")
    rows = []
    for eps in eps_list:
        prob = replace(problem, epsilon=float(eps), eta=None)
        d = closeness_check(prob, u0, dt=float(dt) if dt is not None else None)
        rows.append((float(eps), d))
    csv = outdir / "closeness.csv"
    csv.write_text("epsilon,distance\n" + "".join(
        "%.17g,%.17g\n" % row for row in rows
    ))
    outputs.append(csv)
    return {"max_ratio": max(d / e for e, d in rows)}


STAGE_FUNCS = {
    "forward": _stage_forward,
    "adjoint": _stage_adjoint,
    "energy": _stage_energy,
    "representation": _stage_representation,
    "ergodic": _stage_ergodic,
    "ergodic-sweep": _stage_ergodic_sweep,
    "estimates": _stage_estimates,
    "coupling": _stage_coupling,
    "rate": _stage_rate,
    "longtime": _stage_longtime,
    "closeness": _stage_closeness,
}


# ---------------------------------------------------------------------------
# manifest and runner
# ---------------------------------------------------------------------------


def _package_version() -> str:
    try:
        from importlib.metadata import version
        return version("hjlab")
    except Exception:
        return "unknown"


def config_hash(data: dict) -> str:
    blob = json.dumps(data, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()


@dataclass
class StageRecord:
    name: str
    kind: str
    status: str  # passed | failed | skipped
    wall_time: float
    outputs: list
    detail: str = ""


@dataclass
class RunManifest:
    experiment: str
    config_hash: str
    package_version: str
    catalog: dict
    output_dir: str
    stages: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return all(s.status == "passed" for s in self.stages)

    def to_dict(self) -> dict:
        return {
            "experiment": self.experiment,
            "config_hash": self.config_hash,
            "package_version": self.package_version,
            "catalog": self.catalog,
            "output_dir": self.output_dir,
            "stages": [
                {
                    "name": s.name,
                    "kind": s.kind,
                    "status": s.status,
                    "wall_time": s.wall_time,
                    "outputs": s.outputs,
                    "detail": s.detail,
                }
                for s in self.stages
            ],
        }

    def write(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def _jsonable(value):
    if isinstance(value, dict):
        return {k: _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, np.generic):
        return value.item()
    return value


def run_experiment(config: dict, output_dir=None) -> RunManifest:
    """Validate, build, and execute the pipeline; write outputs and the
    manifest.  Stage failures are recorded, their dependents skipped."""
    data = validate_config(config)
    outdir = Path(output_dir or data.get("output") or f"out/{data['experiment']}")
    outdir.mkdir(parents=True, exist_ok=True)
    problem = build_problem(data)

    ctx: dict = {}
    failed_producers: dict = {}
    records: list[StageRecord] = []
    summary_stages: list[dict] = []
    seen: dict = {}
    for st in data["pipeline"]:
        kind = st["stage"]
        seen[kind] = seen.get(kind, 0) + 1
        name = st.get("name") or (kind if seen[kind] == 1 else f"{kind}-{seen[kind]}")
        missing = sorted(k for k in REQUIRES[kind] if k not in ctx)
        if missing:
            blame = "; ".join(
                f"{k} (producer stage {failed_producers[k]!r} failed)"
                if k in failed_producers else k
                for k in missing
            )
            records.append(StageRecord(name, kind, "skipped", 0.0, [],
                                       f"missing dependency: {blame}"))
            summary_stages.append({"name": name, "status": "skipped",
                                   "metrics": {"missing_dependency": blame}})
            continue
        outputs: list = []
        t0 = time.perf_counter()
        try:
            metrics = STAGE_FUNCS[kind](problem, st, ctx, outdir, outputs)
            status, detail = "passed", ""
        except Exception as exc:
            status = "failed"
            detail = f"{type(exc).__name__}: {exc}"
            metrics = {"error": detail}
            for key in PRODUCES.get(kind, frozenset()):
                failed_producers[key] = name
        wall = time.perf_counter() - t0
        records.append(StageRecord(name, kind, status, wall,
                                   [str(p) for p in outputs], detail))
        summary_stages.append({"name": name, "status": status,
                               "metrics": _jsonable(metrics)})

    summary = {"experiment": data["experiment"], "stages": summary_stages}
    with open(outdir / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")

    manifest = RunManifest(
        experiment=data["experiment"],
        config_hash=config_hash(data),
        package_version=_package_version(),
        catalog={
            "hamiltonian_families": list(HAMILTONIAN_FAMILIES),
            "diffusion_families": list(DIFFUSION_FAMILIES),
        },
        output_dir=str(outdir),
        stages=records,
    )
    manifest.write(outdir / "manifest.json")
    return manifest


# ---------------------------------------------------------------------------
# presets
# ---------------------------------------------------------------------------


def _preset_rate_scalar() -> dict:
    return {
        "experiment": "rate-scalar",
        "grid": {"dim": 1, "n": 128},
        "problem": {
            "epsilon": 0.25,
            "hamiltonian": {"family": "manufactured_exact", "p_box": 4.0,
                            "target": [{"k": 1, "sin": 0.1}]},
            "diffusion": {"family": "sin_squared", "amplitude": 1.0},
        },
        "pipeline": [
            {"stage": "rate",
             "eps_list": [0.25, 0.125, 0.0625, 0.03125],
             "dt_denominator": 256,
             "p_box": 4.0,
             "initial": {"kind": "trig",
                         "terms": [{"k": 1, "cos": 0.2}, {"k": 2, "sin": 0.1}]}},
        ],
        "output": "out/rate-scalar",
    }


def _preset_rate_system() -> dict:
    target = [{"k": 1, "sin": 0.1}]
    return {
        "experiment": "rate-system",
        "grid": {"dim": 1, "n": 128},
        "problem": {
            "epsilon": 0.25,
            "coupling": [[1.0, -1.0], [-1.0, 1.0]],
            "hamiltonian": [
                {"family": "manufactured_exact", "p_box": 4.0, "target": target},
                {"family": "manufactured_exact", "p_box": 4.0, "target": target},
            ],
            "diffusion": [
                {"family": "sin_squared", "amplitude": 1.0},
                {"family": "zero"},
            ],
        },
        "pipeline": [
            {"stage": "rate",
             "eps_list": [0.25, 0.125, 0.0625, 0.03125],
             "dt_denominator": 256,
             "p_box": 4.0,
             "initial": [
                 {"kind": "trig", "terms": [{"k": 1, "cos": 0.2}]},
                 {"kind": "zero"},
             ]},
        ],
        "output": "out/rate-system",
    }


def _preset_energy_audit() -> dict:
    return {
        "experiment": "energy-audit",
        "grid": {"dim": 1, "n": 256},
        "problem": {
            "epsilon": 0.125,
            "hamiltonian": {"family": "quadratic",
                            "potential": [{"k": 1, "cos": 0.3}]},
            "diffusion": {"family": "sin_squared", "amplitude": 1.0},
        },
        "pipeline": [
            {"stage": "forward", "t_final": 1.0, "dt": 0.0078125,
             "stored_every": 1,
             "initial": {"kind": "trig", "terms": [{"k": 1, "sin": 0.25}]}},
            {"stage": "adjoint", "x0": 0},
            {"stage": "energy"},
            {"stage": "representation"},
        ],
        "output": "out/energy-audit",
    }


def _preset_ergodic_sweep() -> dict:
    return {
        "experiment": "ergodic-sweep",
        "grid": {"dim": 1, "n": 256},
        "problem": {
            "epsilon": 0.25,
            "hamiltonian": {"family": "manufactured_exact", "p_box": 4.0,
                            "target": [{"k": 1, "sin": 0.1}]},
            "diffusion": {"family": "sin_squared", "amplitude": 1.0},
        },
        "pipeline": [
            {"stage": "ergodic-sweep",
             "eps_list": [0.25, 0.125, 0.0625, 0.03125, 0.015625],
             "tol": 1.0e-8,
             "p_box": 4.0},
        ],
        "output": "out/ergodic-sweep",
    }


def _preset_coupling_audit() -> dict:
    return {
        "experiment": "coupling-audit",
        "grid": {"dim": 1, "n": 64},
        "problem": {
            "epsilon": 0.125,
            "coupling": [[1.0, -1.0], [-1.0, 1.0]],
            "hamiltonian": [
                {"family": "quadratic", "potential": [{"k": 1, "cos": 0.3}]},
                {"family": "quadratic", "potential": [{"k": 1, "cos": 0.2},
                                                      {"k": 2, "sin": 0.1}]},
            ],
            "diffusion": [
                {"family": "sin_squared", "amplitude": 1.0},
                {"family": "constant", "value": 0.02},
            ],
        },
        "pipeline": [
            {"stage": "forward", "t_final": 1.0, "dt": 0.0078125,
             "stored_every": 1,
             "initial": [
                 {"kind": "trig", "terms": [{"k": 1, "sin": 0.25}]},
                 {"kind": "trig", "terms": [{"k": 1, "cos": 0.15}]},
             ]},
            {"stage": "adjoint", "x0": 0, "component": 0},
            {"stage": "energy"},
            {"stage": "ergodic", "tol": 1.0e-8},
            {"stage": "coupling"},
        ],
        "output": "out/coupling-audit",
    }


def _preset_longtime() -> dict:
    return {
        "experiment": "longtime",
        "grid": {"dim": 1, "n": 512},
        "problem": {
            "epsilon": 1.0,
            "eta": 1.0e-6,
            "hamiltonian": {"family": "quadratic",
                            "potential": [{"k": 1, "cos": 1.0}]},
            "diffusion": {"family": "zero"},
        },
        "pipeline": [
            {"stage": "ergodic", "tol": 1.0e-8},
            {"stage": "longtime", "t_final": 100.0, "dt": 0.05,
             "initial": {"kind": "zero"}},
        ],
        "output": "out/longtime",
    }


_PRESETS = {
    "rate-scalar": _preset_rate_scalar,
    "rate-system": _preset_rate_system,
    "energy-audit": _preset_energy_audit,
    "ergodic-sweep": _preset_ergodic_sweep,
    "coupling-audit": _preset_coupling_audit,
    "longtime": _preset_longtime,
}


def preset(name: str) -> dict:
    """One of the six shipped experiment configs, by name."""
    if name not in _PRESETS:
        raise ConfigError("preset", f"unknown preset {name!r} "
                          f"(known: {', '.join(PRESET_NAMES)})")
    return _PRESETS[name]()


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def _load_config(path: str) -> dict:
    try:
        with open(path) as fh:
            data = yaml.safe_load(fh)
    except OSError as exc:
        raise ConfigError("config", f"cannot read {path!r}: {exc}")
    except yaml.YAMLError as exc:
        raise ConfigError("config", f"cannot parse {path!r}: {exc}")
    if not isinstance(data, dict):
        raise ConfigError("config", f"{path!r} does not contain a mapping")
    return data


def _report_run(manifest: RunManifest) -> int:
    for s in manifest.stages:
        line = f"stage {s.name}: {s.status} ({s.wall_time:.2f}s)"
        if s.detail:
            line += f" -- {s.detail}"
        print(line)
    print(f"manifest: {manifest.output_dir}/manifest.json")
    return 0 if manifest.ok else 2


def _run_validators(data: dict) -> int:
    problem = build_problem(data)
    failures = 0
    for i, (ham, diff) in enumerate(zip(problem.hamiltonians, problem.diffusions)):
        report = validate_pair(ham, diff)
        tag = f"component {i}" if problem.is_system else "problem"
        print(f"{tag}: {report.summary()}")
        failures += 0 if report.passed else 1
    if problem.coupling is not None:
        report = validate_coupling(problem.coupling.values)
        print(f"coupling: {report.summary()}")
        failures += 0 if report.passed else 1
    return 0 if failures == 0 else 1


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="hjlab",
        description="Numerical experiments for degenerate viscous "
                    "Hamilton-Jacobi equations on the torus.",
    )
    sub = parser.add_subparsers(dest="verb", required=True)
    p_run = sub.add_parser("run", help="execute a config file's pipeline")
    p_run.add_argument("config")
    p_run.add_argument("--output", help="override the config's output directory")
    p_preset = sub.add_parser("preset", help="run (or print) a shipped preset")
    p_preset.add_argument("name")
    p_preset.add_argument("--emit-config", action="store_true",
                          help="print the preset config as YAML instead of running")
    p_preset.add_argument("--output")
    p_val = sub.add_parser("validate",
                           help="check a config's schema and the problem's "
                                "structural hypotheses without running")
    p_val.add_argument("config")
    args = parser.parse_args(argv)

    try:
        if args.verb == "run":
            data = _load_config(args.config)
            return _report_run(run_experiment(data, args.output))
        if args.verb == "preset":
            cfg = preset(args.name)
            if args.emit_config:
                print(yaml.safe_dump(cfg, sort_keys=False), end="")
                return 0
            return _report_run(run_experiment(cfg, args.output))
        if args.verb == "validate":
            data = _load_config(args.config)
            validate_config(data)
            print("schema: ok")
            return _run_validators(data)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    return 1


if __name__ == "__main__":
    sys.exit(main())
