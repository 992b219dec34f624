"""Problem specifications: Hamiltonians, diffusions, couplings, validators.

The solvers only ever see callable bundles, so any smooth convex
Hamiltonian can be plugged in, but the shipped catalog is deliberately
small and closed-form:

* H(x, p) = |p|^2 / 2 + V(x)            (mechanical)
* H(x, p) = |p - b(x)|^2 / 2 + V(x)     (drifted mechanical)
* manufactured H = |p|^2 / 2 + f(x)     with f chosen so a prescribed
  corrector solves the cell problem with constant exactly zero

with V, b and the diffusion coefficients given by trigonometric
polynomials.  Closed forms matter: the structural hypotheses (uniform
convexity in p, quadratic growth of D_x H, the gradient bound
|Da|^2 <= C a for scalar diffusions and its matrix analogues) are
checked by sampling exact derivatives, not finite differences.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.stats import qmc

from hjlab.grid import PeriodicGrid

_TWO_PI = 2.0 * np.pi


class TrigPoly:
    """Real trigonometric polynomial with exact derivatives of any order.

    Terms are (wave_vector, cos_amplitude, sin_amplitude) triples; the
    polynomial is sum_k A_k cos(2 pi k.x) + B_k sin(2 pi k.x).  Points are
    passed with the component axis first, shape (dim,) + S.
    """

    def __init__(self, dim: int, terms: Sequence[tuple[Sequence[int], float, float]]):
        self.dim = dim
        norm: list[tuple[tuple[int, ...], float, float]] = []
        for k, a, b in terms:
            kt = tuple(int(ki) for ki in k)
            if len(kt) != dim:
                raise ValueError(f"wave vector {kt} does not match dim {dim}")
            norm.append((kt, float(a), float(b)))
        self.terms = tuple(norm)

    def _phases(self, x: np.ndarray):
        for k, a, b in self.terms:
            phase = np.zeros(x.shape[1:])
            for axis, ki in enumerate(k):
                if ki:
                    phase = phase + (_TWO_PI * ki) * x[axis]
            yield k, a, b, phase

    def value(self, x: np.ndarray) -> np.ndarray:
        out = np.zeros(x.shape[1:])
        for _, a, b, phase in self._phases(x):
            out += a * np.cos(phase) + b * np.sin(phase)
        return out

    def grad(self, x: np.ndarray) -> np.ndarray:
        out = np.zeros(x.shape)
        for k, a, b, phase in self._phases(x):
            dcos = -np.sin(phase)
            dsin = np.cos(phase)
            for axis, ki in enumerate(k):
                if ki:
                    out[axis] += (_TWO_PI * ki) * (a * dcos + b * dsin)
        return out

    def hess(self, x: np.ndarray) -> np.ndarray:
        out = np.zeros((self.dim,) + x.shape)
        for k, a, b, phase in self._phases(x):
            d2cos = -np.cos(phase)
            d2sin = -np.sin(phase)
            for i, ki in enumerate(k):
                if not ki:
                    continue
                for j, kj in enumerate(k):
                    if kj:
                        out[i, j] += (_TWO_PI * ki) * (_TWO_PI * kj) * (
                            a * d2cos + b * d2sin
                        )
        return out

    def third(self, x: np.ndarray) -> np.ndarray:
        out = np.zeros((self.dim, self.dim) + x.shape)
        for k, a, b, phase in self._phases(x):
            d3cos = np.sin(phase)
            d3sin = -np.cos(phase)
            for i, ki in enumerate(k):
                if not ki:
                    continue
                for j, kj in enumerate(k):
                    if not kj:
                        continue
                    for l, kl in enumerate(k):
                        if kl:
                            out[i, j, l] += (
                                (_TWO_PI * ki) * (_TWO_PI * kj) * (_TWO_PI * kl)
                            ) * (a * d3cos + b * d3sin)
        return out

    def laplacian(self, x: np.ndarray) -> np.ndarray:
        h = self.hess(x)
        out = h[0, 0].copy()
        for axis in range(1, self.dim):
            out += h[axis, axis]
        return out

    def sup_norm_bound(self) -> float:
        """Sum of amplitude magnitudes, an exact upper bound for |value|."""
        return float(sum(abs(a) + abs(b) for _, a, b in self.terms))


def constant_poly(dim: int, c: float) -> TrigPoly:
    return TrigPoly(dim, [((0,) * dim, c, 0.0)])


class GridPotential:
    """Node-tabulated potential; evaluation snaps to the nearest node.

    Carries the potentials that are defined by the solver's own stencils
    and have no closed form.  The grid whose nodes produced the table must
    be the one the solver runs on; off-node queries (validators, growth
    estimation) read the nearest node.
    """

    def __init__(self, h: float, values: np.ndarray):
        self.h = float(h)
        self.values = np.array(values, dtype=float, copy=True)
        self.values.setflags(write=False)
        self.dim = self.values.ndim
        from hjlab.grid import gradient_values
        self._grad = gradient_values(self.values, self.h, scheme="central")
        self._grad.setflags(write=False)

    def _indices(self, x: np.ndarray):
        x = np.asarray(x, dtype=float)
        return tuple(
            np.rint(x[a] / self.h).astype(int) % self.values.shape[a]
            for a in range(self.dim)
        )

    def value(self, x):
        return self.values[self._indices(x)]

    def grad(self, x):
        idx = self._indices(x)
        return np.stack([self._grad[a][idx] for a in range(self.dim)])

    def sup_norm_bound(self) -> float:
        return float(np.max(np.abs(self.values)))


class _ComposedPotential:
    """Potential f = sum_ij a_ij d_ij v - |Dv|^2 / 2 with exact gradient.

    Built by ``manufacture_ergodic``; only value and gradient are needed
    downstream (the Hamiltonian stays quadratic in p).
    """

    def __init__(self, dim: int, entries: dict, v: TrigPoly):
        self.dim = dim
        self.entries = entries
        self.v = v

    def value(self, x: np.ndarray) -> np.ndarray:
        hv = self.v.hess(x)
        gv = self.v.grad(x)
        out = -0.5 * np.sum(gv * gv, axis=0)
        for (i, j), a_ij in self.entries.items():
            out += a_ij.value(x) * hv[i, j]
        return out

    def grad(self, x: np.ndarray) -> np.ndarray:
        hv = self.v.hess(x)
        tv = self.v.third(x)
        gv = self.v.grad(x)
        out = -np.einsum("i...,ik...->k...", gv, hv)
        for (i, j), a_ij in self.entries.items():
            out += a_ij.grad(x) * hv[i, j] + a_ij.value(x) * tv[i, j]
        return out

    def sup_norm_bound(self) -> float:
        gmax = sum(
            _TWO_PI * max(abs(ki) for ki in k) * (abs(a) + abs(b))
            for k, a, b in self.v.terms
        )
        hmax = sum(
            (_TWO_PI * max(abs(ki) for ki in k)) ** 2 * (abs(a) + abs(b))
            for k, a, b in self.v.terms
        )
        amax = max(e.sup_norm_bound() for e in self.entries.values())
        return self.dim**2 * amax * hmax + 0.5 * self.dim * gmax**2


class HamiltonianSpec:
    """Callable bundle H, D_p H, D_x H, D^2_pp H plus structure metadata.

    Subclasses provide vectorized evaluations; ``theta`` is the declared
    uniform convexity constant (D^2_pp H >= 2 theta I) and
    ``growth_constant`` the declared constant in |D_x H| <= C (1 + |p|^2).
    """

    dim: int
    theta: float
    growth_constant: float

    def evaluate(self, x: np.ndarray, p: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def gradient_p(self, x: np.ndarray, p: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def gradient_x(self, x: np.ndarray, p: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def hessian_pp(self, x: np.ndarray, p: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def momentum_bound(self, x: np.ndarray, p_box: float) -> np.ndarray:
        """Per-axis bound for |dH/dp_a| over the box |p|_inf <= p_box.

        Used to size the monotone flux dissipation.  The default samples
        the box corners and p = 0 and adds 10 percent headroom; quadratic
        families override with the exact value.
        """
        shape = (self.dim,) + x.shape[1:]
        best = np.zeros(shape)
        corners = np.array(
            np.meshgrid(*([[-p_box, 0.0, p_box]] * self.dim), indexing="ij")
        ).reshape(self.dim, -1)
        for c in corners.T:
            p = np.broadcast_to(c.reshape((self.dim,) + (1,) * (x.ndim - 1)), shape)
            best = np.maximum(best, np.abs(self.gradient_p(x, np.ascontiguousarray(p))))
        return 1.1 * best


@dataclass
class QuadraticHamiltonian(HamiltonianSpec):
    """H(x, p) = |p - b(x)|^2 / 2 + V(x); the whole shipped catalog.

    D^2_pp H is the identity, so theta = 1/2 exactly.  The growth
    constant is computed from the closed forms at construction.
    """

    dim: int
    potential: object
    drift: tuple | None = None
    theta: float = field(init=False, default=0.5)
    growth_constant: float = field(init=False, default=0.0)

    def __post_init__(self):
        for attr in ("value", "grad"):
            if not hasattr(self.potential, attr):
                raise TypeError("potential must expose closed-form value/grad")
        if self.drift is not None and len(self.drift) != self.dim:
            raise ValueError("drift needs one component per axis")
        self.growth_constant = self._estimate_growth()

    def _estimate_growth(self) -> float:
        # |D_x H| <= |DV| + |Db| |p - b|; crude closed-form-based bound
        bound = getattr(self.potential, "sup_norm_bound", None)
        c = 0.0
        xs = np.linspace(0.0, 1.0, 257)[:-1]
        pts = np.stack(
            np.meshgrid(*([xs] * self.dim), indexing="ij")
        ) if self.dim > 1 else xs[np.newaxis, :]
        c = float(np.max(np.linalg.norm(self.potential.grad(pts), axis=0)))
        if self.drift is not None:
            for comp in self.drift:
                c += float(np.max(np.abs(comp.grad(pts)))) * (
                    1.0 + sum(d.sup_norm_bound() for d in self.drift)
                )
        return max(c, 1e-12)

    def _drift_values(self, x: np.ndarray) -> np.ndarray | None:
        if self.drift is None:
            return None
        return np.stack([comp.value(x) for comp in self.drift])

    def evaluate(self, x, p):
        q = p if self.drift is None else p - self._drift_values(x)
        return 0.5 * np.sum(q * q, axis=0) + self.potential.value(x)

    def gradient_p(self, x, p):
        if self.drift is None:
            return np.array(p, dtype=float, copy=True)
        return p - self._drift_values(x)

    def gradient_x(self, x, p):
        out = self.potential.grad(x)
        if self.drift is not None:
            q = p - self._drift_values(x)
            jac = np.stack([comp.grad(x) for comp in self.drift])  # (comp, axis)+S
            out = out - np.einsum("i...,ik...->k...", q, jac)
        return out

    def hessian_pp(self, x, p):
        shape = p.shape[1:]
        eye = np.eye(self.dim).reshape(self.dim, self.dim, *([1] * len(shape)))
        return np.broadcast_to(eye, (self.dim, self.dim) + shape).copy()

    def momentum_bound(self, x, p_box):
        out = np.full((self.dim,) + x.shape[1:], float(p_box))
        if self.drift is not None:
            out = out + np.abs(self._drift_values(x))
        return out


@dataclass
class DiffusionSpec:
    """Closed-form diffusion matrix A(x) >= 0 with exact first derivatives.

    ``entries`` maps (i, j) with i <= j to a closed-form scalar; missing
    entries are zero.  The scalar case is dim-by-dim identity times a(x),
    stored as the single entry (0, 0) with ``scalar=True``.
    """

    dim: int
    entries: dict
    scalar: bool = True

    def __post_init__(self):
        for (i, j) in self.entries:
            if not (0 <= i <= j < self.dim):
                raise ValueError(f"bad entry index {(i, j)}")
        if self.scalar and list(self.entries) != [(0, 0)]:
            raise ValueError("scalar diffusion stores the single entry (0, 0)")

    def is_zero(self) -> bool:
        return all(e.sup_norm_bound() == 0.0 for e in self.entries.values())

    def matrix_values(self, x: np.ndarray) -> np.ndarray:
        """A(x) with shape (dim, dim) + S."""
        shape = (self.dim, self.dim) + x.shape[1:]
        out = np.zeros(shape)
        if self.scalar:
            a = self.entries[(0, 0)].value(x)
            for i in range(self.dim):
                out[i, i] = a
            return out
        for (i, j), e in self.entries.items():
            out[i, j] = e.value(x)
            if i != j:
                out[j, i] = out[i, j]
        return out

    def entry_gradients(self, x: np.ndarray) -> dict:
        return {key: e.grad(x) for key, e in self.entries.items()}

    def scalar_values(self, x: np.ndarray) -> np.ndarray:
        if not self.scalar:
            raise ValueError("matrix diffusion has no scalar profile")
        return self.entries[(0, 0)].value(x)


def diffusion_zero(dim: int) -> DiffusionSpec:
    return DiffusionSpec(dim, {(0, 0): constant_poly(dim, 0.0)}, scalar=True)


def diffusion_constant(dim: int, a0: float) -> DiffusionSpec:
    if a0 < 0:
        raise ValueError("diffusion must be nonnegative")
    return DiffusionSpec(dim, {(0, 0): constant_poly(dim, a0)}, scalar=True)


def diffusion_sin_squared(dim: int, amplitude: float = 1.0, axis: int = 0) -> DiffusionSpec:
    """a(x) = amplitude * sin^2(pi x_axis): degenerate at x_axis = 0.

    sin^2(pi x) = 1/2 - cos(2 pi x) / 2 exactly, so the profile is a
    trigonometric polynomial and |Da|^2 <= 2 ||D^2 a|| a holds with
    equality, the tight case of the gradient bound.
    """
    if amplitude < 0:
        raise ValueError("diffusion must be nonnegative")
    k = tuple(1 if ax == axis else 0 for ax in range(dim))
    prof = TrigPoly(dim, [((0,) * dim, 0.5 * amplitude, 0.0), (k, -0.5 * amplitude, 0.0)])
    return DiffusionSpec(dim, {(0, 0): prof}, scalar=True)


def diffusion_rank_one_2d(amplitude: float = 1.0) -> DiffusionSpec:
    """A = s s^T with s = (sqrt(amplitude) sin(pi x_1), 0): rank one, degenerate."""
    prof = TrigPoly(2, [((0, 0), 0.5 * amplitude, 0.0), ((1, 0), -0.5 * amplitude, 0.0)])
    return DiffusionSpec(2, {(0, 0): prof}, scalar=False)


@dataclass(frozen=True)
class CouplingMatrix:
    """Weak coupling c_ij: positive diagonal, nonpositive off-diagonal,
    zero row sums (validated on construction)."""

    values: np.ndarray

    def __post_init__(self):
        c = np.array(self.values, dtype=float)
        if c.ndim != 2 or c.shape[0] != c.shape[1]:
            raise ValueError("coupling matrix must be square")
        m = c.shape[0]
        if m < 2:
            raise ValueError("coupling needs at least two components")
        if np.any(np.diag(c) <= 0):
            raise ValueError("diagonal coupling entries must be positive")
        off = c - np.diag(np.diag(c))
        if np.any(off > 0):
            raise ValueError("off-diagonal coupling entries must be nonpositive")
        if np.max(np.abs(c.sum(axis=1))) > 1e-13:
            raise ValueError("coupling row sums must vanish")
        c.setflags(write=False)
        object.__setattr__(self, "values", c)

    @property
    def m(self) -> int:
        return self.values.shape[0]


@dataclass
class ProblemSpec:
    """One rescaled Cauchy problem: grid, components, epsilon, eta.

    For scalar problems pass single specs; for weakly coupled systems pass
    per-component tuples plus the coupling matrix.  eta defaults to
    epsilon^4, the vanishing regularization that keeps the implicit
    operator nonsingular.
    """

    grid: PeriodicGrid
    hamiltonians: tuple
    diffusions: tuple
    epsilon: float
    eta: float | None = None
    coupling: CouplingMatrix | None = None

    def __post_init__(self):
        if isinstance(self.hamiltonians, HamiltonianSpec):
            self.hamiltonians = (self.hamiltonians,)
        else:
            self.hamiltonians = tuple(self.hamiltonians)
        if isinstance(self.diffusions, DiffusionSpec):
            self.diffusions = (self.diffusions,)
        else:
            self.diffusions = tuple(self.diffusions)
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.eta is None:
            self.eta = self.epsilon**4
        if self.eta < 0:
            raise ValueError("eta must be nonnegative")
        m = len(self.hamiltonians)
        if len(self.diffusions) != m:
            raise ValueError("need one diffusion per Hamiltonian")
        if self.coupling is not None and self.coupling.m != m:
            raise ValueError("coupling size does not match component count")
        if self.coupling is None and m != 1:
            raise ValueError("multi-component problems need a coupling matrix")
        for ham in self.hamiltonians:
            if ham.dim != self.grid.dim:
                raise ValueError("Hamiltonian dimension does not match grid")
        for dif in self.diffusions:
            if dif.dim != self.grid.dim:
                raise ValueError("diffusion dimension does not match grid")

    @property
    def m(self) -> int:
        return len(self.hamiltonians)

    @property
    def is_system(self) -> bool:
        return self.m > 1


def scalar_problem(grid, hamiltonian, diffusion, epsilon, eta=None) -> ProblemSpec:
    return ProblemSpec(grid, (hamiltonian,), (diffusion,), epsilon, eta)


# ---------------------------------------------------------------------------
# manufactured cell problem
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ManufacturedProblem:
    hamiltonian: QuadraticHamiltonian
    diffusion: DiffusionSpec
    corrector: TrigPoly
    constant: float  # exactly zero by construction


def manufacture_ergodic(v_target: TrigPoly, diffusion: DiffusionSpec) -> ManufacturedProblem:
    """Build H = |p|^2/2 + f with f = tr(A D^2 v) - |Dv|^2/2.

    Then H(x, Dv) - tr(A D^2 v) = 0 pointwise, so (v_target, 0) solves the
    cell problem exactly (with eta = 0) and every discrete ergodic solve
    can be tested against a known constant.
    """
    for attr in ("grad", "hess", "third"):
        if not hasattr(v_target, attr):
            raise TypeError(
                "v_target must provide closed-form grad/hess/third derivatives"
            )
    dim = diffusion.dim
    entries = {}
    if diffusion.scalar:
        prof = diffusion.entries[(0, 0)]
        for i in range(dim):
            entries[(i, i)] = prof
    else:
        for (i, j), e in diffusion.entries.items():
            entries[(i, j)] = e
            if i != j:
                entries[(j, i)] = e
    f = _ComposedPotential(dim, entries, v_target)
    ham = QuadraticHamiltonian(dim=dim, potential=f)
    return ManufacturedProblem(ham, diffusion, v_target, 0.0)


def manufactured_residual(problem: ManufacturedProblem, grid: PeriodicGrid) -> float:
    """Max nodal residual of the cell problem using closed forms only."""
    x = grid.coordinates()
    dv = problem.corrector.grad(x)
    hv = problem.corrector.hess(x)
    amat = problem.diffusion.matrix_values(x)
    resid = problem.hamiltonian.evaluate(x, dv) - np.einsum("ij...,ij...->...", amat, hv)
    return float(np.max(np.abs(resid - problem.constant)))


# ---------------------------------------------------------------------------
# validators
# ---------------------------------------------------------------------------


@dataclass
class ValidationReport:
    passed: bool
    theta_emp: float
    growth_emp: float
    c_a: float | None
    c_sv1: float | None
    c_sv2: float | None
    n_samples: int
    violations: list[str]

    def summary(self) -> str:
        status = "pass" if self.passed else "FAIL"
        parts = [f"structure check: {status} ({self.n_samples} samples)"]
        parts.append(f"  theta_emp={self.theta_emp:.6g} growth_emp={self.growth_emp:.6g}")
        if self.c_a is not None:
            parts.append(f"  C_a={self.c_a:.6g}")
        if self.c_sv1 is not None:
            parts.append(f"  C_sv1={self.c_sv1:.6g} C_sv2={self.c_sv2:.6g}")
        parts.extend("  violated: " + v for v in self.violations)
        return "\n".join(parts)


def _sample_points(dim: int, n_samples: int, p_box: float, seed: int):
    sob = qmc.Sobol(d=2 * dim, scramble=True, seed=seed)
    m = int(np.ceil(np.log2(max(n_samples, 4))))
    pts = sob.random_base2(m)[:n_samples]
    x = pts[:, :dim].T.copy()
    p = (2.0 * pts[:, dim:] - 1.0).T * p_box
    # deterministic probes: p = 0 (convexity edge cases) and near-degenerate x
    probes_x = []
    for t in (1e-2, 1e-3, 1e-4, 1e-5, 1e-6):
        for v in (t, 1.0 - t):
            probes_x.append([v] * dim)
    px = np.array(probes_x).T
    x = np.concatenate([x, px], axis=1)
    p = np.concatenate([p, np.zeros((dim, px.shape[1]))], axis=1)
    return x, p


def validate_pair(
    hamiltonian: HamiltonianSpec,
    diffusion: DiffusionSpec,
    n_samples: int = 1024,
    p_box: float = 10.0,
    seed: int = 20260825,
    c_a_cap: float = 1e3,
    c_sv_cap: float = 1e3,
) -> ValidationReport:
    """Sample the structural hypotheses and report empirical constants.

    Checks, on quasirandom (x, p) with |p|_inf <= p_box plus deterministic
    probes near potential degeneracies:

    * uniform convexity: min eig D^2_pp H >= 2 theta_declared (within 1e-9)
    * growth: |D_x H| <= C (1 + |p|^2) with C the declared constant (x2)
    * scalar diffusion: |Da|^2 <= C_a a with C_a below ``c_a_cap``
    * matrix diffusion: |D a_ij| <= C (sqrt(a_ii) + sqrt(a_jj)) and
      (tr(A_xk S))^2 <= C tr(S A S) for random symmetric S, ||S|| <= 1

    The caps are desk-scale heuristics: smooth catalog members sit two
    orders of magnitude below them, while profiles with gradient kinks at
    a degeneracy (for example |sin|) blow past them.
    """
    dim = hamiltonian.dim
    x, p = _sample_points(dim, n_samples, p_box, seed)
    violations: list[str] = []

    hess = hamiltonian.hessian_pp(x, p)
    if dim == 1:
        min_eig = hess[0, 0]
    else:
        tr_half = 0.5 * (hess[0, 0] + hess[1, 1])
        disc = np.sqrt((0.5 * (hess[0, 0] - hess[1, 1])) ** 2 + hess[0, 1] ** 2)
        min_eig = tr_half - disc
    theta_emp = 0.5 * float(min_eig.min())
    if theta_emp < hamiltonian.theta - 1e-9:
        i = int(np.argmin(min_eig))
        violations.append(
            f"convexity: min eig {2 * theta_emp:.3g} < 2 theta = "
            f"{2 * hamiltonian.theta:.3g} at x={x[:, i]}, p={p[:, i]}"
        )

    gx = hamiltonian.gradient_x(x, p)
    ratio = np.linalg.norm(gx, axis=0) / (1.0 + np.sum(p * p, axis=0))
    growth_emp = float(ratio.max())
    if growth_emp > 2.0 * hamiltonian.growth_constant + 1e-9:
        i = int(np.argmax(ratio))
        violations.append(
            f"growth: |D_x H|/(1+|p|^2) = {growth_emp:.3g} exceeds declared "
            f"{hamiltonian.growth_constant:.3g} at x={x[:, i]}"
        )

    c_a = c_sv1 = c_sv2 = None
    if diffusion.scalar:
        prof = diffusion.entries[(0, 0)]
        a_vals = prof.value(x)
        da = prof.grad(x)
        if np.any(a_vals < -1e-12):
            violations.append("diffusion: negative values sampled")
        num = np.sum(da * da, axis=0)
        c_a = float(np.max(num / np.maximum(a_vals, 1e-30)))
        if not diffusion.is_zero() and c_a > c_a_cap:
            i = int(np.argmax(num / np.maximum(a_vals, 1e-30)))
            violations.append(
                f"gradient bound: |Da|^2/a = {c_a:.3g} exceeds cap {c_a_cap:.3g} "
                f"at x={x[:, i]} (a={a_vals[i]:.3g})"
            )
    else:
        amat = diffusion.matrix_values(x)
        grads = diffusion.entry_gradients(x)
        diag_sqrt = np.sqrt(np.maximum(np.stack([amat[i, i] for i in range(dim)]), 0.0))
        worst = 0.0
        for (i, j), g in grads.items():
            denom = diag_sqrt[i] + diag_sqrt[j]
            worst = max(worst, float(np.max(np.abs(g) / np.maximum(denom, 1e-30))))
        c_sv1 = worst
        if c_sv1 > c_sv_cap:
            violations.append(
                f"entry gradients: |Da_ij|/(sqrt(a_ii)+sqrt(a_jj)) = {c_sv1:.3g} "
                f"exceeds cap {c_sv_cap:.3g}"
            )
        rng = np.random.default_rng(seed)
        nx = x.shape[1]
        s_raw = rng.standard_normal((nx, dim, dim))
        s_sym = 0.5 * (s_raw + np.swapaxes(s_raw, 1, 2))
        norms = np.linalg.norm(s_sym, ord=2, axis=(1, 2))
        s_sym /= np.maximum(norms, 1e-30)[:, None, None]
        s = np.moveaxis(s_sym, 0, -1)  # (dim, dim, nx)
        dA = np.zeros((dim, dim, dim, nx))  # axis k, entry (i, j)
        for (i, j), g in grads.items():
            for k in range(dim):
                dA[k, i, j] = g[k]
                dA[k, j, i] = g[k]
        tr_dAS = np.einsum("kij...,ji...->k...", dA, s)
        tr_SAS = np.einsum("ij...,jk...,ki...->...", s, amat, s)
        ratio2 = np.max(tr_dAS**2, axis=0) / np.maximum(tr_SAS, 1e-30)
        # guard: where tr(SAS) is essentially zero the numerator must be too
        tiny = tr_SAS < 1e-24
        bad_tiny = tiny & (np.max(tr_dAS**2, axis=0) > 1e-18)
        c_sv2 = float(np.max(np.where(tiny, 0.0, ratio2)))
        if np.any(bad_tiny):
            c_sv2 = np.inf
            violations.append(
                "second-order bound: tr(A_xk S)^2 > 0 where tr(S A S) vanishes"
            )
        elif c_sv2 > c_sv_cap:
            violations.append(
                f"second-order bound: ratio {c_sv2:.3g} exceeds cap {c_sv_cap:.3g}"
            )

    return ValidationReport(
        passed=not violations,
        theta_emp=theta_emp,
        growth_emp=growth_emp,
        c_a=c_a,
        c_sv1=c_sv1,
        c_sv2=c_sv2,
        n_samples=x.shape[1],
        violations=violations,
    )


def validate_coupling(values) -> ValidationReport:
    """Check the weak-coupling sign and row-sum structure.

    Returns a ValidationReport with the coupling slots reused: theta_emp
    holds the smallest diagonal entry, growth_emp the largest row-sum
    magnitude.
    """
    c = np.array(values, dtype=float)
    violations = []
    if c.ndim != 2 or c.shape[0] != c.shape[1]:
        violations.append("coupling matrix must be square")
        return ValidationReport(False, np.nan, np.nan, None, None, None, 0, violations)
    min_diag = float(np.min(np.diag(c)))
    if min_diag <= 0:
        violations.append(f"diagonal entries must be positive (min {min_diag:.3g})")
    off = c - np.diag(np.diag(c))
    if np.any(off > 0):
        violations.append("off-diagonal entries must be nonpositive")
    row = float(np.max(np.abs(c.sum(axis=1))))
    if row > 1e-13:
        violations.append(f"row sums must vanish (max |sum| = {row:.3g})")
    return ValidationReport(
        passed=not violations,
        theta_emp=min_diag,
        growth_emp=row,
        c_a=None,
        c_sv1=None,
        c_sv2=None,
        n_samples=c.size,
        violations=violations,
    )


# ---------------------------------------------------------------------------
# config-driven catalog
# ---------------------------------------------------------------------------


def trig_from_config(dim: int, spec) -> TrigPoly:
    """Build a TrigPoly from [{k: [...], cos: A, sin: B}, ...] or a number."""
    if isinstance(spec, (int, float)):
        return constant_poly(dim, float(spec))
    terms = []
    for item in spec:
        k = item["k"]
        if isinstance(k, int):
            k = [k]
        terms.append((k, float(item.get("cos", 0.0)), float(item.get("sin", 0.0))))
    return TrigPoly(dim, terms)


def hamiltonian_from_config(dim: int, cfg: dict, diffusion: DiffusionSpec | None = None):
    family = cfg.get("family")
    if family == "quadratic":
        return QuadraticHamiltonian(dim=dim, potential=trig_from_config(dim, cfg["potential"]))
    if family == "shifted_quadratic":
        drift = tuple(trig_from_config(dim, c) for c in cfg["drift"])
        return QuadraticHamiltonian(
            dim=dim, potential=trig_from_config(dim, cfg["potential"]), drift=drift
        )
    if family == "manufactured":
        if diffusion is None:
            raise ValueError("manufactured Hamiltonian needs the diffusion spec")
        target = trig_from_config(dim, cfg["target"])
        return manufacture_ergodic(target, diffusion).hamiltonian
    raise ValueError(f"unknown Hamiltonian family {family!r}")


def diffusion_from_config(dim: int, cfg: dict) -> DiffusionSpec:
    family = cfg.get("family")
    if family == "zero":
        return diffusion_zero(dim)
    if family == "constant":
        return diffusion_constant(dim, float(cfg.get("value", 1.0)))
    if family == "sin_squared":
        return diffusion_sin_squared(
            dim, float(cfg.get("amplitude", 1.0)), int(cfg.get("axis", 0))
        )
    if family == "rank_one_2d":
        if dim != 2:
            raise ValueError("rank_one_2d diffusion requires dim = 2")
        return diffusion_rank_one_2d(float(cfg.get("amplitude", 1.0)))
    raise ValueError(f"unknown diffusion family {family!r}")
