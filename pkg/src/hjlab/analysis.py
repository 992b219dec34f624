"""Integral identities and estimates evaluated on solver outputs.

Everything here is quadrature over states the solvers produced: the
energy integrand E(t) = <Hhat(w) + C w - tr((A + eta I) D^2_h w), sigma(t)>,
the representation of eps w_t(x0, 1) as -int_0^1 E dt, weighted Sobolev
integrals of w - v against the backward density, coupling differences for
systems, decay-rate fits in epsilon, and large-time convergence
diagnostics.  Spatial derivatives reuse the solver's stencils throughout:
the quantities are statements about the discrete solution, so mixing in
a second discretization would inject spurious residuals.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable, NamedTuple

import numpy as np

from hjlab.adjoint import AdjointDensity, LinearizedSequence, dirac_values, linearize, solve_adjoint, solve_system_adjoint
from hjlab.ergodic import ErgodicSolution
from hjlab.forward import Discretization, SolverOptions, Trajectory, solve_cauchy, solve_system_cauchy, time_derivative
from hjlab.grid import gradient_values, hessian_values
from hjlab.problem import ProblemSpec


def _check_aligned(trajectory: Trajectory, density: AdjointDensity) -> None:
    if trajectory.dt != density.dt or trajectory.n_steps != density.n_steps:
        raise ValueError("forward and adjoint time grids do not match")
    if not np.array_equal(trajectory.stored_steps, density._stored_steps):
        raise ValueError("forward and adjoint storage strides do not match")


@dataclass
class EnergyTrace:
    """E(t) per stored time and its drift = max |E(t) - E(0)|."""

    times: np.ndarray
    values: np.ndarray
    drift: float

    def to_csv(self, path) -> None:
        lines = ["time,energy"]
        lines += ["%.17g,%.17g" % (t, e) for t, e in zip(self.times, self.values)]
        with open(path, "w") as fh:
            fh.write("\n".join(lines) + "\n")


def energy_trace(problem: ProblemSpec, trajectory: Trajectory,
                 density: AdjointDensity) -> EnergyTrace:
    """Pair the stationary part of the equation with the density.

    The trace is constant in exact arithmetic: the backward march is the
    exact transpose of the (secant) linearized forward step, so any drift
    measures solver error, not discretization error.
    """
    _check_aligned(trajectory, density)
    disc = Discretization(problem, trajectory.p_box, trajectory.alpha)
    cell = problem.grid.h ** problem.grid.dim
    steps = trajectory.stored_steps
    values = np.empty(len(steps))
    for slot, n in enumerate(steps):
        g = disc.coupled_g(trajectory.state(n))
        values[slot] = cell * float(np.sum(g * density.density(n)))
    drift = float(np.max(np.abs(values - values[0])))
    return EnergyTrace(times=trajectory.times.copy(), values=values, drift=drift)


class RepresentationCheck(NamedTuple):
    lhs: float
    rhs: float
    gap: float


def representation_check(problem: ProblemSpec, trajectory: Trajectory, x0,
                         density: AdjointDensity | None = None,
                         component: int = 0) -> RepresentationCheck:
    """Check eps w_t(x0, 1) against -int_0^1 E(t) dt.

    lhs is the residual-form time derivative of the final state at x0;
    rhs is minus the trapezoid of the energy trace whose density starts
    from a terminal Dirac at x0 (component k for systems).
    """
    if density is None:
        seq = linearize(problem, trajectory)
        if problem.is_system:
            density = solve_system_adjoint(seq, x0, component)
        else:
            density = solve_adjoint(seq, x0)
    trace = energy_trace(problem, trajectory, density)
    rhs = -float(np.trapezoid(trace.values, trace.times))
    dwdt = time_derivative(problem, trajectory.final, p_box=trajectory.p_box,
                           alpha=trajectory.alpha)
    comp = dwdt[component]
    node = comp[x0] if problem.grid.dim == 1 else comp[tuple(x0)]
    lhs = problem.epsilon * float(node)
    return RepresentationCheck(lhs=lhs, rhs=rhs, gap=abs(lhs - rhs))


@dataclass
class EstimateReport:
    """Named nonnegative integrals at one epsilon."""

    epsilon: float
    entries: dict

    def to_csv(self, path) -> None:
        lines = ["quantity,epsilon,value"]
        lines += [
            "%s,%.17g,%.17g" % (k, self.epsilon, v) for k, v in self.entries.items()
        ]
        with open(path, "w") as fh:
            fh.write("\n".join(lines) + "\n")


def _time_integral(trajectory: Trajectory, density: AdjointDensity,
                   integrand: Callable[[np.ndarray, np.ndarray], float]) -> float:
    """Trapezoid over stored times of a spatial functional of (w, sigma)."""
    steps = trajectory.stored_steps
    vals = np.empty(len(steps))
    for slot, n in enumerate(steps):
        vals[slot] = integrand(trajectory.state(n), density.density(n))
    return float(np.trapezoid(vals, trajectory.times))


def key_estimates(problem: ProblemSpec, trajectory: Trajectory,
                  ergodic: ErgodicSolution, density: AdjointDensity) -> EstimateReport:
    """Weighted integrals of w - v against the backward density.

    Entries: I1 = (1/eps) int int |D(w-v)|^2 sigma,
    I2 = eps^7 int int |D^2(w-v)|^2 sigma, and for scalar diffusions
    II = int int a^2 |D^2(w-v)|^2 sigma plus the precursor
    esti1 = int int (a+eta) |D^2 w|^2 sigma; matrix diffusions instead get
    general1 = int int (a^ij w_xixk w_xjxk + eta |D^2 w|^2) sigma and
    general2, the a^ij quadratic form of v - w weighted by tr(A).
    """
    if ergodic.eta != problem.eta:
        raise ValueError("ergodic solution computed at a different eta")
    _check_aligned(trajectory, density)
    grid = problem.grid
    h = grid.h
    cell = h ** grid.dim
    eps = problem.epsilon
    m = problem.m
    v = ergodic.corrector
    x = grid.coordinates()

    dv = [gradient_values(v[i], h, scheme="central") for i in range(m)]
    d2v = [hessian_values(v[i], h) for i in range(m)]
    scalar_a = all(d.scalar for d in problem.diffusions)
    if scalar_a:
        a_vals = [problem.diffusions[i].scalar_values(x) for i in range(m)]
    else:
        a_mats = [problem.diffusions[i].matrix_values(x) for i in range(m)]

    def grad_sq(states, sigma):
        total = 0.0
        for i in range(m):
            g = gradient_values(states[i], h, scheme="central") - dv[i]
            total += float(np.sum(np.sum(g * g, axis=0) * sigma[i]))
        return cell * total

    def hess_sq(states, sigma):
        total = 0.0
        for i in range(m):
            d2 = hessian_values(states[i], h) - d2v[i]
            total += float(np.sum(np.sum(d2 * d2, axis=(0, 1)) * sigma[i]))
        return cell * total

    entries = {}
    entries["I1"] = _time_integral(trajectory, density, grad_sq) / eps
    entries["I2"] = eps**7 * _time_integral(trajectory, density, hess_sq)

    if scalar_a:
        def weighted_hess_sq(states, sigma):
            total = 0.0
            for i in range(m):
                d2 = hessian_values(states[i], h) - d2v[i]
                total += float(np.sum(
                    a_vals[i] ** 2 * np.sum(d2 * d2, axis=(0, 1)) * sigma[i]
                ))
            return cell * total

        def precursor(states, sigma):
            total = 0.0
            for i in range(m):
                d2 = hessian_values(states[i], h)
                total += float(np.sum(
                    (a_vals[i] + problem.eta) * np.sum(d2 * d2, axis=(0, 1)) * sigma[i]
                ))
            return cell * total

        entries["II"] = _time_integral(trajectory, density, weighted_hess_sq)
        entries["esti1"] = _time_integral(trajectory, density, precursor)
    else:
        def general1(states, sigma):
            total = 0.0
            for i in range(m):
                d2 = hessian_values(states[i], h)
                quad = np.einsum("ij...,ik...,jk...->...", a_mats[i], d2, d2)
                quad = quad + problem.eta * np.sum(d2 * d2, axis=(0, 1))
                total += float(np.sum(quad * sigma[i]))
            return cell * total

        def general2(states, sigma):
            total = 0.0
            for i in range(m):
                d2 = hessian_values(states[i], h) - d2v[i]
                tr_a = np.einsum("ii...->...", a_mats[i])
                quad = np.einsum("ij...,ik...,jk...->...", a_mats[i], d2, d2)
                total += float(np.sum(tr_a * quad * sigma[i]))
            return cell * total

        entries["general1"] = _time_integral(trajectory, density, general1)
        entries["general2"] = _time_integral(trajectory, density, general2)

    return EstimateReport(epsilon=eps, entries=entries)


def coupling_estimate(problem: ProblemSpec, trajectory: Trajectory,
                      ergodic: ErgodicSolution, density: AdjointDensity) -> EstimateReport:
    """Coupling differences for weakly coupled systems.

    For m = 2 the entry pair_difference is
    int int [(w1-v1) - (w2-v2)]^2 (sigma1 + sigma2); weighted_difference is
    the general-m quantity sum_i sum_j |c_ij| [(wj-vj) - (wi-vi)]^2 sigma_i.
    """
    if not problem.is_system:
        raise ValueError("coupling estimate needs a coupled system")
    if ergodic.eta != problem.eta:
        raise ValueError("ergodic solution computed at a different eta")
    _check_aligned(trajectory, density)
    cell = problem.grid.h ** problem.grid.dim
    m = problem.m
    v = ergodic.corrector
    cmat = problem.coupling.values

    def weighted(states, sigma):
        diff = states - v
        total = 0.0
        for i in range(m):
            for j in range(m):
                if i == j:
                    continue
                total += abs(cmat[i, j]) * float(
                    np.sum((diff[j] - diff[i]) ** 2 * sigma[i])
                )
        return cell * total

    entries = {"weighted_difference": _time_integral(trajectory, density, weighted)}
    if m == 2:
        def pair(states, sigma):
            diff = states - v
            gap = diff[0] - diff[1]
            return cell * float(np.sum(gap * gap * (sigma[0] + sigma[1])))

        entries["pair_difference"] = _time_integral(trajectory, density, pair)
    return EstimateReport(epsilon=problem.epsilon, entries=entries)


@dataclass
class RateFit:
    """Log-log decay fit of a quantity over an epsilon sweep, plus the
    smallest envelope constant with value <= C eps^exponent."""

    epsilons: np.ndarray
    values: np.ndarray
    slope: float
    intercept: float
    fit_residual: float
    exponent: float
    envelope_constant: float

    def to_csv(self, path) -> None:
        lines = ["epsilon,value"]
        lines += ["%.17g,%.17g" % (e, v) for e, v in zip(self.epsilons, self.values)]
        with open(path, "w") as fh:
            fh.write("\n".join(lines) + "\n")


def fit_rate(epsilons, values, exponent: float) -> RateFit:
    eps = np.asarray(epsilons, dtype=float)
    vals = np.asarray(values, dtype=float)
    if len(eps) < 3:
        raise ValueError("rate fit needs at least 3 points")
    if np.any(vals <= 0):
        raise ValueError("rate fit needs positive values")
    coef, residuals, *_ = np.polyfit(np.log(eps), np.log(vals), 1, full=True)
    resid = float(residuals[0]) if len(residuals) else 0.0
    envelope = float(np.max(vals / eps**exponent))
    return RateFit(
        epsilons=eps,
        values=vals,
        slope=float(coef[0]),
        intercept=float(coef[1]),
        fit_residual=resid,
        exponent=exponent,
        envelope_constant=envelope,
    )


def rate_sweep(base_problem: ProblemSpec, eps_list, u0,
               exponent: float | None = None,
               dt_rule: Callable[[float], float] | None = None,
               solver_options: SolverOptions | None = None) -> RateFit:
    """Decay of eps ||w_t(., 1)||_inf over an epsilon sweep.

    Each row marches the rescaled problem to t = 1 from the shared u0 and
    measures the sup-node residual-form time derivative of the final
    state.  The envelope exponent defaults to 1/4 for scalar problems and
    1/2 for systems.
    """
    eps_arr = [float(e) for e in eps_list]
    if len(eps_arr) < 4:
        raise ValueError("rate sweep needs at least 4 epsilon values")
    if sorted(eps_arr, reverse=True) != eps_arr or min(eps_arr) <= 0:
        raise ValueError("epsilon list must be positive, sorted descending")
    if exponent is None:
        exponent = 0.5 if base_problem.is_system else 0.25
    values = []
    for eps in eps_arr:
        prob = replace(base_problem, epsilon=eps, eta=None)
        opts = solver_options if solver_options is not None else SolverOptions()
        opts = replace(opts, stored_every=None,
                       dt=dt_rule(eps) if dt_rule is not None else opts.dt)
        if prob.is_system:
            traj, _ = solve_system_cauchy(prob, u0, 1.0, options=opts)
        else:
            traj, _ = solve_cauchy(prob, u0, 1.0, options=opts)
        dwdt = time_derivative(prob, traj.final, p_box=traj.p_box, alpha=traj.alpha)
        values.append(eps * float(np.max(np.abs(dwdt))))
    return fit_rate(eps_arr, values, exponent)


@dataclass
class LongTimeDiagnostics:
    """Distance to the drifting ergodic profile along a long run.

    distances are constant-adjusted (half the oscillation of
    u + Hbar t - v, since the limit corrector is only determined up to a
    constant); raw_norms and monotone flags track ||u(., t) - (v - Hbar t)||
    at the stored times.
    """

    times: np.ndarray
    distances: np.ndarray
    raw_norms: np.ndarray
    monotone_flags: np.ndarray

    @property
    def final_distance(self) -> float:
        return float(self.distances[-1])

    @property
    def all_monotone(self) -> bool:
        return bool(np.all(self.monotone_flags))

    def to_csv(self, path) -> None:
        lines = ["time,distance,raw_norm"]
        lines += [
            "%.17g,%.17g,%.17g" % (t, d, r)
            for t, d, r in zip(self.times, self.distances, self.raw_norms)
        ]
        with open(path, "w") as fh:
            fh.write("\n".join(lines) + "\n")


def large_time_convergence(problem: ProblemSpec, u0, t_final: float,
                           ergodic_ref: ErgodicSolution,
                           dt: float = 0.05) -> LongTimeDiagnostics:
    """March to t_final and compare against v - Hbar t at unit times.

    The forward march reuses the reference solution's flux-dissipation
    box, so its steady drift states coincide with the reference corrector
    exactly and the reported distance measures convergence only.
    """
    if problem.epsilon != 1.0:
        raise ValueError("large-time diagnostics expect the unscaled problem (eps = 1)")
    stride = max(1, int(round(1.0 / dt)))
    opts = SolverOptions(dt=dt, stored_every=stride, p_box=ergodic_ref.p_box,
                         alpha=ergodic_ref.alpha)
    u0 = np.asarray(u0, dtype=float)
    if problem.is_system:
        traj, _ = solve_system_cauchy(problem, u0, t_final, options=opts)
    else:
        if u0.shape != problem.grid.shape:
            u0 = u0[0]
        traj, _ = solve_cauchy(problem, u0, t_final, options=opts)
    v = ergodic_ref.corrector
    hbar = ergodic_ref.ergodic_constant
    times = traj.times
    dists = np.empty(len(times))
    raws = np.empty(len(times))
    for slot, n in enumerate(traj.stored_steps):
        f = traj.state(n) + hbar * times[slot] - v
        dists[slot] = 0.5 * float(np.max(f) - np.min(f))
        raws[slot] = float(np.max(np.abs(f)))
    flags = np.ones(len(times), dtype=bool)
    flags[1:] = raws[1:] <= raws[:-1] + 1e-12
    return LongTimeDiagnostics(times=times, distances=dists, raw_norms=raws,
                               monotone_flags=flags)


def closeness_check(problem: ProblemSpec, u0, t_final: float = 1.0,
                    dt: float | None = None,
                    solver_options: SolverOptions | None = None) -> float:
    """Sup-node distance at t_final between the eta-regularized run and
    the eta = 0 run from the same data.  With eta already zero the two
    runs are identical and the distance is exactly zero."""
    opts = solver_options if solver_options is not None else SolverOptions()
    if dt is not None:
        opts = replace(opts, dt=dt)
    opts = replace(opts, stored_every=None)
    bare = replace(problem, eta=0.0)
    solver = solve_system_cauchy if problem.is_system else solve_cauchy
    traj_reg, _ = solver(problem, u0, t_final, options=opts)
    traj_bare, _ = solver(bare, u0, t_final,
                          options=replace(opts, p_box=traj_reg.p_box, alpha=traj_reg.alpha))
    return float(np.max(np.abs(traj_reg.final - traj_bare.final)))


def tolerance_study(problem: ProblemSpec, trajectory: Trajectory, x0,
                    rtols) -> list[tuple[float, float]]:
    """Energy drift as the backward linear solves are loosened.

    Replaces the exact transpose solves with an iterative solver at each
    relative tolerance and reports (rtol, drift).  Drift grows roughly
    linearly with rtol, which confirms the exact-solve path's drift is
    solver noise rather than discretization error.
    """
    from hjlab._linalg import solve_transpose_iterative

    if problem.is_system:
        raise ValueError("tolerance study covers scalar problems")
    seq = linearize(problem, trajectory)
    disc = seq.disc
    grid = problem.grid
    cell = grid.h ** grid.dim
    out = []
    terminal = dirac_values(grid, x0)[np.newaxis]
    for rtol in rtols:
        flat = disc.flatten(terminal)
        energies = [None] * (len(seq) + 1)
        g_last = disc.coupled_g(trajectory.state(len(seq)))
        energies[len(seq)] = cell * float(np.sum(disc.flatten(g_last) * flat))
        for n in range(len(seq) - 1, -1, -1):
            flat = solve_transpose_iterative(seq.step(n).operator, flat, rtol=rtol)
            g = disc.coupled_g(trajectory.state(n))
            energies[n] = cell * float(np.sum(disc.flatten(g) * flat))
        energies = np.array(energies)
        out.append((float(rtol), float(np.max(np.abs(energies - energies[0])))))
    return out
