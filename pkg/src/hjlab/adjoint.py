"""Discrete linearization of the forward march and backward densities.

One forward step solves F(w_next) = w with F = I + c (Hhat + C + L),
c = dt / eps.  A perturbation f therefore propagates through the inverse
of A_n = I + c B_n, where B_n is the flux/diffusion/coupling stencil
evaluated along the stored states, and a density pulls back through the
inverse transpose:

    f(t_{n+1}) = A_n^{-1} f(t_n),     sigma(t_n) = A_n^{-T} sigma(t_{n+1}).

Both directions reuse the same factorization, so the pairing
<f(t), sigma(t)> under grid quadrature is conserved to rounding.

Two linearization points are offered.  "secant" evaluates the flux
stencil at the midpoint gradient of the step pair; for the quadratic
catalog this is the exact secant of the nonlinear step, which makes mass
conservation, positivity and the energy identity exact discrete facts.
"jacobian" evaluates at the arrival state and is the true Frechet
derivative of the step map (what a finite-difference directional test
converges to).  The two coincide as dt -> 0.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from hjlab.forward import Discretization, Trajectory
from hjlab.grid import gradient_values
from hjlab.problem import ProblemSpec


class AdjointError(RuntimeError):
    """Conservation failure: mass drift or negativity beyond thresholds,
    which signals a scheme or transpose bug rather than bad data."""


@dataclass
class LinearizedStep:
    """Implicit matrix A_n of one step, with exact-transpose actions.

    apply maps a perturbation at t_n to t_{n+1} (solves with A_n);
    apply_transpose pulls a density from t_{n+1} back to t_n (solves with
    A_n^T using the same factorization).
    """

    index: int
    operator: object
    mode: str

    def apply(self, f_flat: np.ndarray) -> np.ndarray:
        return self.operator.solve(f_flat)

    def apply_transpose(self, g_flat: np.ndarray) -> np.ndarray:
        return self.operator.solve_transpose(g_flat)

    def matvec(self, f_flat: np.ndarray) -> np.ndarray:
        return self.operator.matvec(f_flat)

    def matvec_transpose(self, g_flat: np.ndarray) -> np.ndarray:
        return self.operator.matvec_transpose(g_flat)

    def to_csr(self):
        return self.operator.to_csr()

    def row_sum_defect(self) -> float:
        """Max |A_n 1 - 1|: zero means the spatial part annihilates
        constants, the discrete source of mass conservation."""
        ones = np.ones(self.to_csr().shape[0])
        return float(np.max(np.abs(self.matvec(ones) - 1.0)))


class LinearizedSequence:
    """Lazy per-step linearizations of a fully stored trajectory.

    Operators are assembled on demand and not retained, so backward
    marches run in O(1) operator memory.
    """

    def __init__(self, problem: ProblemSpec, trajectory: Trajectory, mode: str = "secant"):
        if mode not in ("secant", "jacobian"):
            raise ValueError(f"unknown linearization mode {mode!r}")
        if trajectory.stored_every != 1:
            raise ValueError("linearization requires a trajectory with every step stored")
        tp = trajectory.problem
        if (problem.epsilon != tp.epsilon or problem.eta != tp.eta
                or problem.m != tp.m or problem.grid != tp.grid):
            raise ValueError("problem does not match the trajectory's problem")
        self.problem = problem
        self.trajectory = trajectory
        self.mode = mode
        self.disc = Discretization(problem, trajectory.p_box, trajectory.alpha)
        self.c = trajectory.dt / problem.epsilon

    def __len__(self) -> int:
        return self.trajectory.n_steps

    def step(self, n: int) -> LinearizedStep:
        if not 0 <= n < len(self):
            raise IndexError(f"step {n} outside 0..{len(self) - 1}")
        h = self.problem.grid.h
        w0 = self.trajectory.state(n)
        w1 = self.trajectory.state(n + 1)
        base = 0.5 * (w0 + w1) if self.mode == "secant" else w1
        grads = [gradient_values(base[i], h, scheme="central") for i in range(self.disc.m)]
        op = self.disc.step_operator(self.c, grads)
        return LinearizedStep(index=n, operator=op, mode=self.mode)

    def __iter__(self):
        return (self.step(n) for n in range(len(self)))


def linearize(problem: ProblemSpec, trajectory: Trajectory,
              mode: str = "secant") -> LinearizedSequence:
    """Per-step linearized updates along a stored trajectory."""
    return LinearizedSequence(problem, trajectory, mode)


@dataclass
class AdjointDensity:
    """Backward density from a terminal Dirac.

    densities holds stored slots (ascending time, same stride convention
    as Trajectory); masses and min_values are recorded at every step
    regardless of the storage stride.
    """

    problem: ProblemSpec
    times: np.ndarray
    densities: np.ndarray  # (n_slots, m) + grid.shape
    x0: object
    component: int
    masses: np.ndarray
    min_values: np.ndarray
    stored_every: int
    dt: float

    @property
    def n_steps(self) -> int:
        return len(self.masses) - 1

    def __post_init__(self):
        steps = list(range(0, self.n_steps + 1, self.stored_every))
        if steps[-1] != self.n_steps:
            steps.append(self.n_steps)
        self._stored_steps = np.array(steps, dtype=int)

    def slot_of(self, step: int) -> int:
        idx = np.searchsorted(self._stored_steps, step)
        if idx >= len(self._stored_steps) or self._stored_steps[idx] != step:
            raise IndexError(f"step {step} not stored (stride {self.stored_every})")
        return int(idx)

    def density(self, step: int) -> np.ndarray:
        return self.densities[self.slot_of(step)]

    def mass_drift(self) -> float:
        return float(np.max(np.abs(self.masses - 1.0)))

    def min_value(self) -> float:
        return float(np.min(self.min_values))


def dirac_values(grid, x0) -> np.ndarray:
    """Single-node density of unit mass: 1/h^dim at x0, zero elsewhere."""
    values = np.zeros(grid.shape)
    if grid.dim == 1:
        if not isinstance(x0, (int, np.integer)):
            raise TypeError("x0 must be a node index")
        values[int(x0) % grid.n] = grid.n
    else:
        i, j = x0
        values[int(i) % grid.n, int(j) % grid.n] = float(grid.n) ** 2
    return values


def _march_backward(steps: LinearizedSequence, terminal: np.ndarray, x0, component: int,
                    stored_every: int) -> AdjointDensity:
    disc = steps.disc
    grid = disc.grid
    cell = grid.h ** grid.dim
    n_steps = len(steps)
    stride = max(1, min(stored_every, n_steps))
    kept = list(range(0, n_steps + 1, stride))
    if kept[-1] != n_steps:
        kept.append(n_steps)
    slot_of = {s: i for i, s in enumerate(kept)}
    densities = np.empty((len(kept), disc.m) + grid.shape)

    masses = np.empty(n_steps + 1)
    mins = np.empty(n_steps + 1)
    sigma = terminal
    masses[n_steps] = cell * float(np.sum(sigma))
    mins[n_steps] = float(np.min(sigma))
    densities[slot_of[n_steps]] = sigma
    flat = disc.flatten(sigma)
    for n in range(n_steps - 1, -1, -1):
        flat = steps.step(n).apply_transpose(flat)
        sigma = disc.unflatten(flat)
        mass = cell * float(np.sum(flat))
        low = float(np.min(flat))
        masses[n] = mass
        mins[n] = low
        if abs(mass - 1.0) > 1e-8:
            raise AdjointError(
                f"conservation failure: mass {mass!r} at step {n} "
                "(transpose or row-sum bug)"
            )
        if low < -1e-8:
            raise AdjointError(
                f"conservation failure: negative density {low:.3e} at step {n} "
                "(monotonicity bug)"
            )
        slot = slot_of.get(n)
        if slot is not None:
            densities[slot] = sigma
    times = steps.trajectory.dt * np.array(kept, dtype=float)
    return AdjointDensity(
        problem=steps.problem,
        times=times,
        densities=densities,
        x0=x0,
        component=component,
        masses=masses,
        min_values=mins,
        stored_every=stride,
        dt=steps.trajectory.dt,
    )


def solve_adjoint(steps: LinearizedSequence, x0, epsilon: float | None = None,
                  stored_every: int = 1) -> AdjointDensity:
    """Backward density for a scalar problem, terminal Dirac at node x0."""
    if epsilon is not None and epsilon != steps.problem.epsilon:
        raise ValueError("epsilon does not match the linearized problem")
    if steps.problem.is_system:
        raise ValueError("use solve_system_adjoint for coupled systems")
    terminal = dirac_values(steps.problem.grid, x0)[np.newaxis]
    return _march_backward(steps, terminal, x0, 0, stored_every)


def solve_system_adjoint(steps: LinearizedSequence, x0, component: int,
                         epsilon: float | None = None,
                         stored_every: int = 1) -> AdjointDensity:
    """Backward system density: Dirac at x0 placed in one component; all
    other components start at zero, and only the total mass is conserved."""
    if epsilon is not None and epsilon != steps.problem.epsilon:
        raise ValueError("epsilon does not match the linearized problem")
    m = steps.problem.m
    if not 0 <= component < m:
        raise ValueError(f"component {component} outside 0..{m - 1}")
    terminal = np.zeros((m,) + steps.problem.grid.shape)
    terminal[component] = dirac_values(steps.problem.grid, x0)
    return _march_backward(steps, terminal, x0, component, stored_every)
