"""Backward Euler solver for the rescaled problems.

Each time step solves

    z + (dt/eps) (Hhat(z) + C z + L z) = w^n

by Newton iteration, where Hhat is a monotone (local Lax-Friedrichs)
discretization of H(x, Dw), L is minus the implicit diffusion stencil
tr((A + eta I) D^2_h), and C is the optional weak coupling.  The fully
implicit step keeps the update operator an M-matrix with unit row sums
for any dt, which is what makes the adjoint marches downstream conserve
mass exactly and keep densities nonnegative.

Systems are interleaved node-major (flat index = node * m + component),
so 1-D systems stay banded with bandwidth m.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from hjlab._linalg import PeriodicBandedOperator, SparseOperator
from hjlab.grid import gradient_values
from hjlab.problem import ProblemSpec

_EPS = np.finfo(float).eps


class SolveError(RuntimeError):
    """Newton breakdown or runaway solution norm."""


@dataclass
class SolverOptions:
    """Knobs for the implicit march.

    dt = None picks 0.5 * eps * h / max alpha, an accuracy heuristic (the
    scheme is stable for any dt).  p_box sizes the gradient box used for
    the flux dissipation; runs whose gradients leave the box are flagged
    in the report.  stored_every subsamples the kept states (linearization
    requires 1); stored_every = None keeps only the two endpoint states,
    enough for residual-based diagnostics.  alpha, when given, replaces
    the box-derived dissipation with an explicit per-component list of
    per-axis fields; use it to rerun the exact operator of an ergodic
    solution that carries one.
    """

    dt: float | None = None
    p_box: float | None = None
    newton_maxiter: int = 40
    newton_atol: float | None = None
    stored_every: int | None = 1
    alpha: object = None


def default_p_box(states: np.ndarray, h: float) -> float:
    """Gradient box from initial data: generous margin over |D u0|."""
    gmax = 0.0
    for comp in states:
        g = gradient_values(comp, h, scheme="central")
        gmax = max(gmax, float(np.max(np.abs(g))))
    return max(4.0, 2.0 * gmax + 1.0)


class Discretization:
    """Frozen spatial pieces shared by forward, ergodic and adjoint code.

    Holds the flux dissipation alpha (per component and axis, sized by
    p_box) and the implicit diffusion stencil coefficients, and provides
    the numerical Hamiltonian, its secant stencil, and assembly of the
    implicit step operator.  Offsets follow row semantics: a coefficient
    array d_o satisfies (L w)_k = sum_o d_o[k] w_{k+o}.
    """

    def __init__(self, problem: ProblemSpec, p_box: float, alpha=None):
        self.problem = problem
        self.grid = problem.grid
        self.p_box = float(p_box)
        self.alpha_override = alpha
        self.x = self.grid.coordinates()
        self.dim = self.grid.dim
        self.m = problem.m
        h = self.grid.h
        self.alphas = []
        self.diff_coefs: list[dict] = []
        for i, (ham, dif) in enumerate(zip(problem.hamiltonians, problem.diffusions)):
            if alpha is not None:
                # explicit dissipation field; it must dominate the central
                # gradients the run will see for the step operator to keep
                # its sign structure
                self.alphas.append([np.asarray(alpha[i][ax]) for ax in range(self.dim)])
            else:
                self.alphas.append(ham.momentum_bound(self.x, self.p_box))
            self.diff_coefs.append(self._diffusion_stencil(dif, problem.eta, h))
        self.coupling = None if problem.coupling is None else problem.coupling.values

    def _diffusion_stencil(self, dif, eta: float, h: float) -> dict:
        coefs: dict[tuple, np.ndarray] = {}
        shape = self.grid.shape
        amat = dif.matrix_values(self.x)
        inv_h2 = 1.0 / (h * h)
        center = tuple(0 for _ in range(self.dim))
        for axis in range(self.dim):
            w = -(amat[axis, axis] + eta) * inv_h2
            coefs[center] = coefs.get(center, np.zeros(shape)) - 2.0 * w
            for sign in (1, -1):
                off = tuple(sign if ax == axis else 0 for ax in range(self.dim))
                coefs[off] = coefs.get(off, np.zeros(shape)) + w
        if self.dim == 2:
            cross = amat[0, 1]
            if np.any(cross != 0.0):
                half = 0.5 * cross * inv_h2
                coefs[(1, 1)] = coefs.get((1, 1), np.zeros(shape)) - half
                coefs[(-1, -1)] = coefs.get((-1, -1), np.zeros(shape)) - half
                coefs[(1, -1)] = coefs.get((1, -1), np.zeros(shape)) + half
                coefs[(-1, 1)] = coefs.get((-1, 1), np.zeros(shape)) + half
        return coefs

    @staticmethod
    def apply_stencil(coefs: dict, w: np.ndarray) -> np.ndarray:
        out = np.zeros_like(w)
        axes = tuple(range(w.ndim))
        for off, coef in coefs.items():
            if isinstance(off, tuple):
                shift = tuple(-o for o in off)
                out += coef * np.roll(w, shift, axis=axes)
            else:
                out += coef * np.roll(w, -off)
        return out

    def hamiltonian_values(self, i: int, w: np.ndarray) -> np.ndarray:
        """Monotone flux: H at the central gradient minus alpha-weighted
        second differences (local Lax-Friedrichs)."""
        h = self.grid.h
        grad = gradient_values(w, h, scheme="central")
        out = self.problem.hamiltonians[i].evaluate(self.x, grad)
        alpha = self.alphas[i]
        for axis in range(self.dim):
            plus = np.roll(w, -1, axis=axis)
            minus = np.roll(w, 1, axis=axis)
            out -= alpha[axis] * (plus - 2.0 * w + minus) / (2.0 * h)
        return out

    def flux_stencil(self, i: int, grad: np.ndarray) -> dict:
        """Stencil of the flux derivative at a given gradient field.

        At the arrival gradient this is the Jacobian of the numerical
        Hamiltonian; at the midpoint gradient it is the exact secant for
        the quadratic catalog.  Only off-diagonal offsets are returned;
        diagonals are rebalanced at assembly.
        """
        h = self.grid.h
        dp = self.problem.hamiltonians[i].gradient_p(self.x, grad)
        alpha = self.alphas[i]
        coefs: dict[tuple, np.ndarray] = {}
        for axis in range(self.dim):
            for sign in (1, -1):
                off = tuple(sign if ax == axis else 0 for ax in range(self.dim))
                coefs[off] = (sign * dp[axis] - alpha[axis]) / (2.0 * h)
        return coefs

    def g1(self, i: int, w: np.ndarray) -> np.ndarray:
        """Hhat(w) - tr((A + eta I) D^2_h w), the stationary part of the
        equation and the energy integrand."""
        return self.hamiltonian_values(i, w) + self.apply_stencil(self.diff_coefs[i], w)

    def coupled_g(self, states: np.ndarray) -> np.ndarray:
        """G(w) = Hhat(w) + C w + L w per component, shape (m,) + grid."""
        out = np.stack([self.g1(i, states[i]) for i in range(self.m)])
        if self.coupling is not None:
            out += np.einsum("ij,j...->i...", self.coupling, states)
        return out

    def residual(self, states: np.ndarray) -> np.ndarray:
        """The time derivative the equation assigns to a state: -G(w)/eps."""
        return -self.coupled_g(states) / self.problem.epsilon

    # -- assembly ----------------------------------------------------------

    def step_operator(self, c: float, grads: list[np.ndarray]):
        """I + c (DHhat + C + L) with the flux part evaluated at the given
        gradient fields.  Diagonal entries are set to 1 minus the row's
        off-diagonal sum, pinning row sums to 1 up to summation-order
        rounding (a few ulps); constants then pass through solves without
        accumulating drift.
        """
        per_comp = []
        for i in range(self.m):
            coefs = {}
            for off, arr in self.flux_stencil(i, grads[i]).items():
                coefs[off] = c * arr
            for off, arr in self.diff_coefs[i].items():
                coefs[off] = coefs.get(off, 0.0) + c * arr
            per_comp.append(coefs)
        if self.dim == 1:
            return self._assemble_banded(c, per_comp)
        if self.m != 1:
            raise NotImplementedError("2-D systems are not supported")
        return self._assemble_sparse(c, per_comp[0])

    def _assemble_banded(self, c: float, per_comp: list[dict]) -> PeriodicBandedOperator:
        n = self.grid.n
        m = self.m
        total = n * m
        diagonals: dict[int, np.ndarray] = {}
        row_off = np.zeros(total)
        for i, coefs in enumerate(per_comp):
            for off, arr in coefs.items():
                o = off[0] if isinstance(off, tuple) else off
                if o == 0:
                    # rebalanced below: the diagonal is 1 minus the
                    # off-diagonal row sum, so constants survive a solve
                    continue
                flat = o * m
                d = diagonals.setdefault(flat, np.zeros(total))
                d[i::m] += arr
                row_off[i::m] += arr
        if self.coupling is not None:
            for i in range(m):
                for j in range(m):
                    if i == j:
                        continue
                    val = c * self.coupling[i, j]
                    if val == 0.0:
                        continue
                    d = diagonals.setdefault(j - i, np.zeros(total))
                    d[i::m] += val
                    row_off[i::m] += val
        diagonals[0] = 1.0 - row_off
        return PeriodicBandedOperator(diagonals)

    def _assemble_sparse(self, c: float, coefs: dict) -> SparseOperator:
        from scipy import sparse

        size = self.grid.size
        idx = np.arange(size).reshape(self.grid.shape)
        rows = [np.arange(size)]
        cols = [np.arange(size)]
        row_off = np.zeros(self.grid.shape)
        vals = [None]  # diagonal filled last
        for off, arr in coefs.items():
            if all(o == 0 for o in off):
                continue
            shift = tuple(-o for o in off)
            col = np.roll(idx, shift, axis=(0, 1)).ravel()
            rows.append(np.arange(size))
            cols.append(col)
            vals.append(np.asarray(arr).ravel())
            row_off += arr
        vals[0] = (1.0 - row_off).ravel()
        mat = sparse.coo_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(size, size),
        )
        return SparseOperator(mat.tocsr())

    # -- flattening --------------------------------------------------------

    def flatten(self, states: np.ndarray) -> np.ndarray:
        return np.moveaxis(states, 0, -1).reshape(-1)

    def unflatten(self, flat: np.ndarray) -> np.ndarray:
        arr = flat.reshape(self.grid.shape + (self.m,))
        return np.ascontiguousarray(np.moveaxis(arr, -1, 0))


@dataclass
class SolveReport:
    """Diagnostics from one march: Newton behavior, gradient and
    time-derivative monitors, and any flags raised (gradient box
    exceeded, stalled Newton)."""

    n_steps: int
    dt: float
    newton_iterations: np.ndarray
    newton_residuals: np.ndarray
    max_gradient: float
    max_time_derivative: float
    p_box: float
    wall_time: float
    flags: list[str] = field(default_factory=list)


@dataclass
class Trajectory:
    """Stored states of one forward march.

    states has shape (n_slots, m) + grid.shape.  stored_every is the
    stride between kept time levels (1 = every step, required for
    linearization); stored_every = n_steps means endpoints only.  The
    endpoints are always kept, and a trailing partial stride is allowed
    for the last slot.
    """

    problem: ProblemSpec
    times: np.ndarray
    states: np.ndarray
    dt: float
    stored_every: int
    p_box: float
    alpha: object = None

    @property
    def n_steps(self) -> int:
        return self._n_steps

    @property
    def stored_steps(self) -> np.ndarray:
        return self._stored_steps

    def __post_init__(self):
        self._n_steps = int(round(self.times[-1] / self.dt)) if len(self.times) > 1 else 0
        steps = list(range(0, self._n_steps + 1, self.stored_every))
        if steps[-1] != self._n_steps:
            steps.append(self._n_steps)
        self._stored_steps = np.array(steps, dtype=int)

    def slot_of(self, step: int) -> int:
        idx = np.searchsorted(self._stored_steps, step)
        if idx >= len(self._stored_steps) or self._stored_steps[idx] != step:
            raise IndexError(f"step {step} not stored (stride {self.stored_every})")
        return int(idx)

    def state(self, step: int) -> np.ndarray:
        return self.states[self.slot_of(step)]

    def scalar_state(self, step: int) -> np.ndarray:
        if self.problem.m != 1:
            raise ValueError("scalar access on a system trajectory")
        return self.state(step)[0]

    @property
    def final(self) -> np.ndarray:
        return self.states[-1]


def _resolve_steps(t_final: float, dt: float) -> tuple[int, float]:
    if dt <= 0 or t_final <= 0:
        raise ValueError("need positive dt and t_final")
    n = max(1, int(round(t_final / dt)))
    if abs(n * dt - t_final) <= 1e-12 * max(1.0, t_final):
        return n, dt
    return n, t_final / n


def _newton_step(disc: Discretization, c: float, rhs_flat: np.ndarray,
                 z_states: np.ndarray, options: SolverOptions):
    """Solve z + c G(z) = rhs starting from z_states.

    Damped Newton with backtracking; near the solution the full step is
    always accepted, so converged results do not depend on the damping.
    Returns the state, its G values, iteration count, final residual norm
    and a stall flag.
    """
    h = disc.grid.h
    z = np.array(z_states, copy=True)
    g = disc.coupled_g(z)
    scale = max(1.0, float(np.max(np.abs(rhs_flat))), c * float(np.max(np.abs(g))))
    atol = options.newton_atol if options.newton_atol is not None else 64.0 * _EPS * scale
    rho = disc.flatten(z) + c * disc.flatten(g) - rhs_flat
    rnorm = float(np.max(np.abs(rho)))
    # The factored step operator is reused across iterations while it keeps
    # making progress; factorization dominates the 2-D cost.  The reuse
    # policy depends only on this step's own iterates, so replays stay
    # bit-for-bit.
    op = None
    fresh = False
    for it in range(options.newton_maxiter):
        if rnorm <= atol:
            return z, g, it, rnorm, False
        if op is None:
            grads = [gradient_values(z[i], h, scheme="central") for i in range(disc.m)]
            op = disc.step_operator(c, grads)
            fresh = True
        delta = disc.unflatten(op.solve(rho))
        step = 1.0
        accepted = False
        for _ in range(9):
            z_try = z - step * delta
            g_try = disc.coupled_g(z_try)
            rho_try = disc.flatten(z_try) + c * disc.flatten(g_try) - rhs_flat
            rnorm_try = float(np.max(np.abs(rho_try)))
            if rnorm_try <= atol or rnorm_try < rnorm * (1.0 - 1e-4 * step):
                # rebuild on weak decrease, except near the rounding floor
                # where a fresh Jacobian cannot help either
                weak = ((step < 1.0 or rnorm_try > 0.6 * rnorm)
                        and rnorm_try > 4096.0 * atol)
                z, g, rho, rnorm = z_try, g_try, rho_try, rnorm_try
                accepted = True
                if weak:
                    op = None
                else:
                    fresh = False
                break
            step *= 0.5
        if not accepted:
            if not fresh:
                # retry the same iterate with a freshly linearized operator
                op = None
                continue
            # Stalling within a small multiple of the rounding floor is
            # normal termination; only larger plateaus are reportable.
            if rnorm <= 4096.0 * atol:
                return z, g, it, rnorm, False
            if rnorm <= 1e-9 * scale:
                return z, g, it, rnorm, True
            raise SolveError(
                f"Newton stalled at residual {rnorm:.3e} (scale {scale:.3e})"
            )
    if rnorm <= 4096.0 * atol:
        return z, g, options.newton_maxiter, rnorm, False
    if rnorm <= 1e-9 * scale:
        return z, g, options.newton_maxiter, rnorm, True
    raise SolveError(f"Newton did not converge in {options.newton_maxiter} iterations")


def _march(problem: ProblemSpec, u0: np.ndarray, t_final: float,
           options: SolverOptions) -> tuple[Trajectory, SolveReport]:
    grid = problem.grid
    h = grid.h
    u0 = np.asarray(u0, dtype=float)
    if u0.shape != (problem.m,) + grid.shape:
        raise ValueError(f"initial data must have shape {(problem.m,) + grid.shape}")
    p_box = options.p_box if options.p_box is not None else default_p_box(u0, h)
    disc = Discretization(problem, p_box, options.alpha)

    if options.dt is None:
        amax = max(float(np.max(a)) for a in disc.alphas)
        dt = 0.5 * problem.epsilon * h / max(amax, 1e-12)
    else:
        dt = options.dt
    n_steps, dt = _resolve_steps(t_final, dt)
    c = dt / problem.epsilon

    stride = options.stored_every if options.stored_every is not None else n_steps
    stride = max(1, min(stride, n_steps))
    kept = list(range(0, n_steps + 1, stride))
    if kept[-1] != n_steps:
        kept.append(n_steps)
    slot_of = {step: i for i, step in enumerate(kept)}
    states = np.empty((len(kept),) + u0.shape)
    states[0] = u0

    iters = np.zeros(n_steps, dtype=int)
    resids = np.zeros(n_steps)
    flags: list[str] = []
    max_grad = max(
        float(np.max(np.abs(gradient_values(u0[i], h, scheme="central"))))
        for i in range(problem.m)
    )
    max_dwdt = 0.0
    prev_norm = float(np.max(np.abs(u0)))

    t0 = time.perf_counter()
    current = u0
    for n in range(n_steps):
        rhs = disc.flatten(current)
        nxt, g, it, rnorm, stalled = _newton_step(disc, c, rhs, current, options)
        iters[n] = it
        resids[n] = rnorm
        if stalled and "newton_stalled" not in flags:
            flags.append("newton_stalled")
        gmax = max(
            float(np.max(np.abs(gradient_values(nxt[i], h, scheme="central"))))
            for i in range(problem.m)
        )
        max_grad = max(max_grad, gmax)
        max_dwdt = max(max_dwdt, float(np.max(np.abs(g))) / problem.epsilon)
        norm = float(np.max(np.abs(nxt)))
        if norm > 2.0 * prev_norm + 1.0:
            raise SolveError(
                f"instability: norm grew {prev_norm:.3e} -> {norm:.3e} at step {n + 1}"
            )
        prev_norm = norm
        slot = slot_of.get(n + 1)
        if slot is not None:
            states[slot] = nxt
        current = nxt
    wall = time.perf_counter() - t0

    if max_grad > p_box and "gradient_box_exceeded" not in flags:
        flags.append("gradient_box_exceeded")

    times = dt * np.array(kept, dtype=float)
    traj = Trajectory(problem, times, states, dt, stride, p_box, options.alpha)
    report = SolveReport(
        n_steps=n_steps,
        dt=dt,
        newton_iterations=iters,
        newton_residuals=resids,
        max_gradient=max_grad,
        max_time_derivative=max_dwdt,
        p_box=p_box,
        wall_time=wall,
        flags=flags,
    )
    return traj, report


def solve_cauchy(problem: ProblemSpec, u0, t_final: float,
                 dt: float | None = None,
                 options: SolverOptions | None = None) -> tuple[Trajectory, SolveReport]:
    """March a scalar problem to t_final from nodal initial data u0."""
    if problem.is_system:
        raise ValueError("use solve_system_cauchy for coupled systems")
    options = _with_dt(options, dt)
    u0 = np.asarray(u0, dtype=float)
    return _march(problem, u0[np.newaxis], t_final, options)


def solve_system_cauchy(problem: ProblemSpec, u0, t_final: float,
                        dt: float | None = None,
                        options: SolverOptions | None = None) -> tuple[Trajectory, SolveReport]:
    """March a weakly coupled system; u0 has shape (m,) + grid.shape."""
    if not problem.is_system:
        raise ValueError("problem has a single component")
    options = _with_dt(options, dt)
    return _march(problem, np.asarray(u0, dtype=float), t_final, options)


def _with_dt(options: SolverOptions | None, dt: float | None) -> SolverOptions:
    import dataclasses

    if options is None:
        options = SolverOptions()
    if dt is not None:
        options = dataclasses.replace(options, dt=dt)
    return options


def piecewise_linear_profile(grid, center: float = 0.5, height: float = 0.5) -> np.ndarray:
    """Periodic hat profile: Lipschitz but not smooth, peak at center."""
    x = grid.coordinates()
    dist = np.abs(x[0] - center)
    dist = np.minimum(dist, 1.0 - dist)
    out = height * (1.0 - 4.0 * dist)
    if grid.dim == 2:
        disty = np.abs(x[1] - center)
        disty = np.minimum(disty, 1.0 - disty)
        out = height * (1.0 - 2.0 * (dist + disty))
    return out


def time_derivative(problem: ProblemSpec, states, p_box: float | None = None,
                    alpha=None) -> np.ndarray:
    """dw/dt assigned by the equation to a state, in residual form.

    states may be grid-shaped (scalar problems) or (m,) + grid.shape.
    Pass the p_box (and alpha, if any) of the trajectory the state came
    from so the flux dissipation matches the solve.
    """
    states = np.asarray(states, dtype=float)
    scalar_in = states.shape == problem.grid.shape
    if scalar_in:
        states = states[np.newaxis]
    if p_box is None:
        p_box = default_p_box(states, problem.grid.h)
    disc = Discretization(problem, p_box, alpha)
    out = disc.residual(states)
    return out[0] if scalar_in else out


@dataclass(frozen=True)
class GridManufacturedProblem:
    """Hamiltonian whose tabulated potential makes a chosen profile the
    exact discrete corrector with constant zero at eta = 0."""

    hamiltonian: object
    diffusion: object
    corrector: np.ndarray
    p_box: float

    def problem(self, grid, epsilon: float, eta: float | None = None) -> ProblemSpec:
        from hjlab.problem import scalar_problem
        return scalar_problem(grid, self.hamiltonian, self.diffusion, epsilon, eta)


def manufacture_grid_exact(grid, v_target, diffusion,
                           p_box: float = 4.0) -> GridManufacturedProblem:
    """Invert the solver's stationary operator to tabulate a potential.

    Sets f := -(Hhat_0(v) + L v) nodewise, where Hhat_0 is the kinetic
    part of the numerical Hamiltonian (including its flux dissipation at
    the given p_box) and L the diffusion stencil at eta = 0, so that
    H = |p|^2/2 + f has G(v) = 0 exactly on this grid.  Closed-form
    manufacture cannot achieve this: the flux dissipation contributes an
    O(h) viscosity that would otherwise bias the computed constant by
    more than the eta = eps^4 signals a vanishing-viscosity sweep is
    trying to resolve.  Solver runs must reuse the same p_box.
    """
    from hjlab.problem import QuadraticHamiltonian, GridPotential, constant_poly, scalar_problem

    if hasattr(v_target, "value"):
        v = np.asarray(v_target.value(grid.coordinates()), dtype=float)
    else:
        v = np.array(v_target, dtype=float, copy=True)
    if v.shape != grid.shape:
        raise ValueError("target profile does not match the grid")
    kinetic = QuadraticHamiltonian(dim=grid.dim, potential=constant_poly(grid.dim, 0.0))
    base = scalar_problem(grid, kinetic, diffusion, epsilon=1.0, eta=0.0)
    disc = Discretization(base, p_box)
    f = -disc.g1(0, v)
    ham = QuadraticHamiltonian(dim=grid.dim, potential=GridPotential(grid.h, f))
    return GridManufacturedProblem(
        hamiltonian=ham,
        diffusion=diffusion,
        corrector=v - v.flat[0],
        p_box=p_box,
    )
