"""Forward Cauchy marches: structural invariants and an ODE oracle.

The coupled-constants test uses scipy's matrix exponential as an
independent oracle; everything else checks order relations, exact
identities of the implicit step, and reproducibility.
"""

import dataclasses

import numpy as np
import pytest
import scipy.linalg

from hjlab.grid import make_grid
from hjlab.problem import (
    CouplingMatrix,
    ProblemSpec,
    QuadraticHamiltonian,
    TrigPoly,
    constant_poly,
    diffusion_sin_squared,
    diffusion_zero,
    scalar_problem,
)
from hjlab.forward import (
    SolverOptions,
    default_p_box,
    manufacture_grid_exact,
    piecewise_linear_profile,
    solve_cauchy,
    solve_system_cauchy,
    time_derivative,
)


def _grid():
    return make_grid(1, 32)


def _cos_potential():
    return TrigPoly(1, [((1,), 1.0, 0.0)])


def _scalar_problem(grid, epsilon=0.25, eta=1e-4):
    H = QuadraticHamiltonian(dim=1, potential=_cos_potential())
    return scalar_problem(grid, H, diffusion_sin_squared(1), epsilon, eta)


def _u0(grid):
    x = grid.coordinates()[0]
    return 0.2 * np.cos(2 * np.pi * x) + 0.1 * np.sin(4 * np.pi * x)


def test_replay_is_bit_for_bit():
    g = _grid()
    prob = _scalar_problem(g)
    a, ra = solve_cauchy(prob, _u0(g), 0.5, dt=1 / 64)
    b, rb = solve_cauchy(prob, _u0(g), 0.5, dt=1 / 64)
    assert np.array_equal(a.states, b.states)
    assert np.array_equal(ra.newton_residuals, rb.newton_residuals)


def test_constant_shift_equivariance():
    # the step operator kills constants exactly (unit row sums); the full
    # Newton path reintroduces only last-bit rounding
    g = _grid()
    prob = _scalar_problem(g)
    base, _ = solve_cauchy(prob, _u0(g), 0.5, dt=1 / 64, options=SolverOptions(p_box=4.0))
    shifted, _ = solve_cauchy(
        prob, _u0(g) + 0.3, 0.5, dt=1 / 64, options=SolverOptions(p_box=4.0)
    )
    assert np.max(np.abs(shifted.states - (base.states + 0.3))) <= 1e-13


def test_step_operator_row_sums_pinned_to_one():
    # diagonal rebalancing: row sums stay at 1 up to summation-order
    # rounding, so constants pass through implicit solves without drift
    g = _grid()
    prob = _scalar_problem(g)
    from hjlab.forward import Discretization
    from hjlab.grid import gradient_values

    disc = Discretization(prob, 4.0)
    grads = [gradient_values(_u0(g), g.h, scheme="central")]
    op = disc.step_operator(0.1, grads)
    ones = np.ones(g.n)
    assert np.max(np.abs(op.matvec(ones) - ones)) <= 1e-13
    assert np.max(np.abs(op.to_csr().toarray().sum(axis=1) - 1.0)) <= 1e-13


def test_contraction_between_two_solutions():
    # comparison principle: sup distance between any two solutions is
    # non-increasing in time
    g = _grid()
    prob = _scalar_problem(g)
    x = g.coordinates()[0]
    u0 = 0.2 * np.cos(2 * np.pi * x)
    v0 = 0.1 * np.sin(4 * np.pi * x) - 0.15 * np.cos(2 * np.pi * x)
    tu, _ = solve_cauchy(prob, u0, 1.0, dt=1 / 128)
    tv, _ = solve_cauchy(prob, v0, 1.0, dt=1 / 128)
    dist = np.max(np.abs(tu.states - tv.states), axis=(1, 2))
    assert np.all(np.diff(dist) <= 1e-14)
    assert dist[-1] < dist[0]


def test_rescaling_identity_is_exact():
    # w(x, t) solving the epsilon-problem equals u(x, t / eps) for the
    # eps = 1 problem; with matched dt/eps and eta the discrete marches
    # take identical Newton paths, so the states agree bitwise
    g = _grid()
    eps0 = 0.25
    pa = _scalar_problem(g, epsilon=eps0, eta=1e-4)
    pb = _scalar_problem(g, epsilon=1.0, eta=1e-4)
    ta, _ = solve_cauchy(pa, _u0(g), 1.0, dt=1 / 64, options=SolverOptions(p_box=4.0))
    tb, _ = solve_cauchy(pb, _u0(g), 1.0 / eps0, dt=(1 / 64) / eps0,
                         options=SolverOptions(p_box=4.0))
    assert np.array_equal(ta.states, tb.states)


def test_manufactured_corrector_is_stationary():
    g = _grid()
    target = TrigPoly(1, [((1,), 0.0, 0.1)])
    man = manufacture_grid_exact(g, target, diffusion_sin_squared(1), p_box=4.0)
    prob = man.problem(g, epsilon=0.5, eta=0.0)
    traj, report = solve_cauchy(
        prob, man.corrector, 1.0, dt=1 / 32, options=SolverOptions(p_box=4.0)
    )
    assert np.max(np.abs(traj.final[0] - man.corrector)) == 0.0
    assert report.max_time_derivative <= 1e-12
    td = time_derivative(prob, man.corrector, p_box=4.0)
    assert np.max(np.abs(td)) <= 1e-14


def test_coupled_constants_match_matrix_exponential():
    # constant-in-x data on a zero-diffusion system reduces the march to
    # the linear ODE eps w' = -k - C w; the oracle is the augmented
    # matrix exponential, an implementation with nothing in common with
    # the solver
    g = _grid()
    C = np.array([[1.0, -1.0, 0.0], [-1.0, 2.0, -1.0], [0.0, -1.0, 1.0]])
    k = np.array([0.3, -0.1, 0.2])
    eps = 0.5
    prob = ProblemSpec(
        g,
        tuple(QuadraticHamiltonian(dim=1, potential=constant_poly(1, ki)) for ki in k),
        tuple(diffusion_zero(1) for _ in k),
        eps,
        eta=0.0,
        coupling=CouplingMatrix(C),
    )
    w0 = np.array([0.4, 0.0, -0.2])
    u0 = np.stack([np.full(g.shape, wi) for wi in w0])
    aug = np.zeros((4, 4))
    aug[:3, :3] = -C / eps
    aug[:3, 3] = -k / eps
    oracle = (scipy.linalg.expm(1.0 * aug) @ np.array([*w0, 1.0]))[:3]
    assert oracle == pytest.approx([-0.24134252, -0.12258026, -0.23607722], abs=1e-8)

    dt = 1 / 512
    traj, _ = solve_system_cauchy(
        prob, u0, 1.0, dt=dt, options=SolverOptions(p_box=1.0, stored_every=None)
    )
    got = traj.final[:, 0]
    # solution stays constant in x
    assert np.max(np.abs(traj.final - got[:, np.newaxis])) <= 1e-13
    # first-order march; measured error 1.9e-4 at this dt
    assert np.max(np.abs(got - oracle)) <= 4e-4

    # the march must also reproduce the backward Euler recurrence exactly
    n = int(round(1.0 / dt))
    c = dt / eps
    step = np.linalg.inv(np.eye(3) + c * C)
    w = w0.copy()
    for _ in range(n):
        w = step @ (w - c * k)
    assert np.max(np.abs(w - got)) <= 1e-12


def test_system_comparison_preserves_ordering():
    # componentwise-ordered initial data produce ordered solutions (the
    # off-diagonal coupling signs make the system quasi-monotone)
    g = _grid()
    x = g.coordinates()[0]
    C = CouplingMatrix([[1.0, -1.0, 0.0], [-1.0, 2.0, -1.0], [0.0, -1.0, 1.0]])
    H = QuadraticHamiltonian(dim=1, potential=_cos_potential())
    prob = ProblemSpec(
        g,
        (H, H, H),
        (diffusion_sin_squared(1), diffusion_zero(1), diffusion_sin_squared(1, 0.5)),
        0.5,
        eta=1e-4,
        coupling=C,
    )
    lo = np.stack(
        [0.2 * np.cos(2 * np.pi * x), -0.1 * np.sin(2 * np.pi * x), 0.15 * np.cos(4 * np.pi * x)]
    )
    hi = lo + np.stack(
        [
            0.1 + 0.05 * np.sin(2 * np.pi * x) ** 2,
            np.full(g.shape, 0.2),
            0.3 * np.abs(np.sin(np.pi * x)),
        ]
    )
    tl, _ = solve_system_cauchy(prob, lo, 1.0, dt=1 / 128)
    th, _ = solve_system_cauchy(prob, hi, 1.0, dt=1 / 128)
    assert np.max(tl.states - th.states) <= 1e-14


def test_time_derivative_matches_centered_difference():
    g = _grid()
    prob = _scalar_problem(g)
    errs = []
    for dt in (1 / 256, 1 / 512):
        traj, _ = solve_cauchy(prob, _u0(g), 0.5, dt=dt, options=SolverOptions(p_box=4.0))
        n = traj.n_steps // 2
        centered = (traj.scalar_state(n + 1) - traj.scalar_state(n - 1)) / (2 * traj.dt)
        td = time_derivative(prob, traj.scalar_state(n), p_box=traj.p_box)
        errs.append(float(np.max(np.abs(centered - td))))
        # measured 0.34 dt^2 and 0.40 dt^2; keep a 2.5x margin
        assert errs[-1] <= traj.dt**2
    assert errs[1] < errs[0]


def test_backward_difference_identity():
    # backward Euler: (w^{n+1} - w^n)/dt equals the residual-form time
    # derivative at w^{n+1}, up to the Newton tolerance over dt
    g = _grid()
    prob = _scalar_problem(g)
    traj, _ = solve_cauchy(prob, _u0(g), 0.5, dt=1 / 256, options=SolverOptions(p_box=4.0))
    n = traj.n_steps // 2
    back = (traj.scalar_state(n + 1) - traj.scalar_state(n)) / traj.dt
    td = time_derivative(prob, traj.scalar_state(n + 1), p_box=traj.p_box)
    assert np.max(np.abs(back - td)) <= 1e-10


def test_storage_stride_and_endpoints():
    g = _grid()
    prob = _scalar_problem(g)
    traj, _ = solve_cauchy(prob, _u0(g), 0.5, dt=1 / 100, options=SolverOptions(stored_every=8))
    assert traj.n_steps == 50
    assert traj.stored_steps[0] == 0
    assert traj.stored_steps[-1] == 50  # endpoint kept despite partial stride
    assert np.array_equal(traj.stored_steps[:-1], np.arange(0, 50, 8))
    assert traj.state(48).shape == (1,) + g.shape
    with pytest.raises(IndexError):
        traj.state(7)
    endpoints, _ = solve_cauchy(prob, _u0(g), 0.5, dt=1 / 100,
                                options=SolverOptions(stored_every=None))
    assert endpoints.states.shape[0] == 2
    assert np.array_equal(endpoints.states[0, 0], _u0(g))


def test_default_p_box_and_gradient_flag():
    g = _grid()
    assert default_p_box(np.zeros((1,) + g.shape), g.h) == 4.0
    prob = _scalar_problem(g)
    # a box far below the actual gradients must be flagged, not fatal
    _, report = solve_cauchy(prob, _u0(g), 0.2, dt=1 / 64, options=SolverOptions(p_box=0.05))
    assert "gradient_box_exceeded" in report.flags
    _, clean = solve_cauchy(prob, _u0(g), 0.2, dt=1 / 64, options=SolverOptions(p_box=4.0))
    assert "gradient_box_exceeded" not in clean.flags


def test_input_validation():
    g = _grid()
    prob = _scalar_problem(g)
    with pytest.raises(ValueError):
        solve_cauchy(prob, np.zeros(g.n + 1), 0.5, dt=1 / 64)
    with pytest.raises(ValueError):
        solve_cauchy(prob, _u0(g), -1.0, dt=1 / 64)
    with pytest.raises(ValueError):
        solve_cauchy(prob, _u0(g), 0.5, dt=-1e-3)
    sys_prob = ProblemSpec(
        g,
        (prob.hamiltonians[0],) * 2,
        (prob.diffusions[0],) * 2,
        0.5,
        coupling=CouplingMatrix([[1.0, -1.0], [-1.0, 1.0]]),
    )
    with pytest.raises(ValueError):
        solve_cauchy(sys_prob, _u0(g), 0.5, dt=1 / 64)
    with pytest.raises(ValueError):
        solve_system_cauchy(prob, _u0(g)[np.newaxis], 0.5, dt=1 / 64)


def test_piecewise_linear_profile():
    g = make_grid(1, 64)
    hat = piecewise_linear_profile(g)
    assert hat.max() == 0.5
    assert hat[np.argmax(hat)] == hat[32]
    # slope is exactly 4 * height between nodes
    slopes = np.diff(hat) / g.h
    assert np.allclose(np.abs(slopes), 2.0, atol=1e-12)
    g2 = make_grid(2, 16)
    hat2 = piecewise_linear_profile(g2, center=0.25, height=1.0)
    assert hat2.shape == g2.shape
    assert hat2.max() == pytest.approx(1.0)


def test_dt_rounding_to_final_time():
    g = _grid()
    prob = _scalar_problem(g)
    traj, report = solve_cauchy(prob, _u0(g), 0.5, dt=0.5 / 7.3)
    assert traj.n_steps == 7
    assert traj.times[-1] == pytest.approx(0.5, abs=1e-14)
    assert report.dt == pytest.approx(0.5 / 7, abs=1e-14)
