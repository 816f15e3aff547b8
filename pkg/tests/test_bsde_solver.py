"""Backward induction: implicit step, martingale identity, stopped values,
stability bound and growth check."""

import numpy as np
import pytest
from conftest import (
    max_node_error,
    random_lattice,
    random_model,
    random_plain_driver,
    random_terminal,
)

from mfrbsde import (
    SolverError,
    ValidationError,
    backward_step,
    build_lattice,
    conditional_expectation,
    constant_terminal,
    count_terminal,
    custom_driver,
    discount_driver,
    exp_growth_check,
    g_expectation,
    jump_exp_driver,
    linear_driver,
    make_model,
    poisson_model,
    solve_bsde,
    solve_lattice,
    zero_driver,
)
from mfrbsde.bsde_solver import apriori_gap_check


class TestClosedForms:
    def test_counting_payoff_zero_driver(self):
        """f = 0, xi = N_T: Y0 is the expected count sum_i phi_i dA_i."""
        comp = poisson_model(0.8, 1.0, 6)
        lattice = build_lattice(comp)
        sol = solve_bsde(lattice, zero_driver(), count_terminal())
        expected = float(np.sum(comp.jump_probs()))
        assert abs(sol.y0() - expected) <= 1e-12
        assert expected == pytest.approx(0.8)

    def test_discount_product_formula(self):
        """f = -beta y: each implicit step divides by (1 + beta dA)."""
        beta, x = 0.8, 1.5
        comp = make_model(("a",), 1.0, 5, 0.6, clock="power", clock_power=1.5)
        lattice = build_lattice(comp)
        sol = solve_bsde(lattice, discount_driver(beta), constant_terminal(x))
        expected = x / np.prod(1.0 + beta * comp.dA)
        assert abs(sol.y0() - expected) <= 1e-12

    def test_zero_everything(self):
        lattice = build_lattice(poisson_model(0.5, 1.0, 3))
        sol = solve_bsde(lattice, zero_driver(), constant_terminal(0.0))
        for i in range(4):
            np.testing.assert_array_equal(sol.y[i], 0.0)


class TestSolverStructure:
    def test_martingale_identity(self):
        rng = np.random.default_rng(17)
        for _ in range(15):
            comp = random_model(rng)
            lattice = build_lattice(comp)
            sol = solve_bsde(
                lattice, random_plain_driver(rng, comp), random_terminal(rng, lattice)
            )
            assert sol.martingale_residual() <= 1e-12

    def test_pruned_branches_carry_no_u(self):
        comp = make_model(("a", "b"), 1.0, 4, [0.5, 0.0])
        lattice = build_lattice(comp)
        rng = np.random.default_rng(23)
        sol = solve_bsde(
            lattice, random_plain_driver(rng, comp), random_terminal(rng, lattice)
        )
        for i in range(lattice.n_steps):
            np.testing.assert_array_equal(sol.u[i][:, 1], 0.0)

    def test_linearity_in_terminal(self):
        """A linear homogeneous driver makes the solution map linear."""
        rng = np.random.default_rng(29)
        lattice = random_lattice(rng)
        driver = linear_driver(0.3)
        xi1 = random_terminal(rng, lattice)
        xi2 = random_terminal(rng, lattice)
        s1 = solve_bsde(lattice, driver, xi1)
        s2 = solve_bsde(lattice, driver, xi2)
        s12 = solve_bsde(lattice, driver, 2.0 * xi1 - 0.5 * xi2)
        combo = [2.0 * a - 0.5 * b for a, b in zip(s1.y, s2.y)]
        assert max_node_error(s12.y, combo) <= 5e-13

    def test_backward_step_matches_full_solve(self):
        rng = np.random.default_rng(31)
        comp = random_model(rng)
        lattice = build_lattice(comp)
        driver = random_plain_driver(rng, comp)
        xi = random_terminal(rng, lattice)
        sol = solve_bsde(lattice, driver, xi)
        vals = xi
        for i in range(lattice.n_steps - 1, -1, -1):
            y_i, u_i = backward_step(lattice, i, vals, driver)
            assert float(np.max(np.abs(y_i - sol.y[i]))) <= 1e-13
            assert float(np.max(np.abs(u_i - sol.u[i]))) <= 1e-13
            vals = sol.y[i]

    def test_window_stitching_is_exact(self):
        """Solving [k, n) then [0, k) replays the same kernel arithmetic."""
        rng = np.random.default_rng(37)
        for _ in range(5):
            comp = random_model(rng, max_steps=6)
            lattice = build_lattice(comp)
            driver = random_plain_driver(rng, comp)
            xi = random_terminal(rng, lattice)
            y_full, u_full, _, _ = solve_lattice(lattice, driver, xi)
            k = lattice.n_steps // 2
            y_hi, _, _, _ = solve_lattice(lattice, driver, xi, step_lo=k)
            y_lo, _, _, _ = solve_lattice(
                lattice, driver, y_hi[k], step_lo=0, step_hi=k
            )
            for i in range(k):
                np.testing.assert_array_equal(y_lo[i], y_full[i])
            for i in range(k, lattice.n_steps + 1):
                np.testing.assert_array_equal(y_hi[i], y_full[i])

    def test_bad_window_rejected(self):
        lattice = build_lattice(poisson_model(0.5, 1.0, 3))
        with pytest.raises(ValidationError, match="window"):
            solve_lattice(lattice, zero_driver(), np.zeros(8), step_lo=2, step_hi=2)

    def test_step_size_precondition(self):
        comp = make_model(("a",), 1.0, 2, 0.1)
        lattice = build_lattice(comp)
        with pytest.raises(SolverError, match="refine the grid"):
            solve_bsde(lattice, linear_driver(1.5), constant_terminal(1.0))

    @pytest.mark.filterwarnings("ignore:overflow encountered")
    def test_divergent_custom_driver_reported(self):
        comp = make_model(("a",), 1.0, 2, 0.1)
        lattice = build_lattice(comp)
        runaway = custom_driver(
            lambda s, y, u, mu: 10.0 * y, lip_y_mu=10.0, lip_full=None,
            regime="quadratic",
        )
        with pytest.raises(SolverError, match="did not converge"):
            solve_bsde(lattice, runaway, constant_terminal(1.0))

    def test_generic_path_agrees_with_kernel(self):
        """A custom callable wrapping the parametric formula reproduces it."""
        rng = np.random.default_rng(41)
        comp = random_model(rng)
        lattice = build_lattice(comp)
        spec = random_plain_driver(rng, comp)

        def mirror(step, y, u, mu, _s=spec, _c=comp):
            phi = _c.phi[step]
            return (
                _s.const
                + _s.coef_y * y
                + _s.coef_sin_y * np.sin(y)
                + _s.coef_u * float(np.sum(u * phi))
                + _s.coef_alpha * _s.alpha_at(step)
            )

        wrapped = custom_driver(mirror, spec.lip_y_mu, spec.lip_full)
        xi = random_terminal(rng, lattice)
        fast = solve_bsde(lattice, spec, xi)
        slow = solve_bsde(lattice, wrapped, xi)
        assert max_node_error(fast.y, slow.y) <= 1e-12


class TestConditionalExpectation:
    def test_matches_path_enumeration(self):
        rng = np.random.default_rng(43)
        lattice = random_lattice(rng, max_steps=6)
        xi = random_terminal(rng, lattice)
        nested = conditional_expectation(lattice, xi)
        nodes, probs = lattice.enumerate_paths()
        assert nested[0][0] == pytest.approx(float(np.sum(probs * xi)), abs=1e-13)
        # push the check to an interior step as well
        i = lattice.n_steps // 2
        acc = np.zeros(lattice.n_nodes[i])
        np.add.at(acc, nodes[:, i], probs * xi)
        reach = lattice.reach[i]
        manual = np.where(reach > 0, acc / np.where(reach > 0, reach, 1.0), 0.0)
        assert float(np.max(np.abs(manual - nested[i]))) <= 1e-13


class TestGExpectation:
    def _setup(self):
        lattice = build_lattice(poisson_model(0.6, 1.0, 3))
        driver = linear_driver(0.2)
        payoff = [np.full(c, 1.0) for c in lattice.n_nodes]
        return lattice, driver, payoff

    def test_terminal_stop_reduces_to_plain(self):
        rng = np.random.default_rng(47)
        lattice = random_lattice(rng, max_steps=6)
        driver = random_plain_driver(rng, lattice.comp)
        xi = random_terminal(rng, lattice)
        mask = [np.zeros(c, dtype=bool) for c in lattice.n_nodes]
        mask[lattice.n_steps][:] = True
        payoff = [np.zeros(c) for c in lattice.n_nodes]
        payoff[lattice.n_steps] = xi
        vals = g_expectation(lattice, driver, mask, payoff)
        sol = solve_bsde(lattice, driver, xi)
        assert float(np.max(np.abs(vals - sol.y[0]))) <= 1e-13

    def test_immediate_stop_returns_payoff(self):
        lattice, driver, payoff = self._setup()
        mask = [np.zeros(c, dtype=bool) for c in lattice.n_nodes]
        mask[1][:] = True
        vals = g_expectation(lattice, driver, mask, payoff, from_step=1)
        np.testing.assert_array_equal(vals, payoff[1])

    def test_double_stop_rejected(self):
        lattice, driver, payoff = self._setup()
        mask = [np.zeros(c, dtype=bool) for c in lattice.n_nodes]
        mask[1][:] = True
        mask[2][0] = True
        with pytest.raises(ValidationError, match="stops again"):
            g_expectation(lattice, driver, mask, payoff)

    def test_never_stopping_rejected(self):
        lattice, driver, payoff = self._setup()
        mask = [np.zeros(c, dtype=bool) for c in lattice.n_nodes]
        mask[3][1:] = True
        with pytest.raises(ValidationError, match="never stops"):
            g_expectation(lattice, driver, mask, payoff)

    def test_stop_before_start_rejected(self):
        lattice, driver, payoff = self._setup()
        mask = [np.zeros(c, dtype=bool) for c in lattice.n_nodes]
        mask[0][:] = True
        mask[3][:] = True
        with pytest.raises(ValidationError, match="before the start"):
            g_expectation(lattice, driver, mask, payoff, from_step=1)


class TestAprioriGap:
    def _pair(self, rng):
        comp = random_model(rng)
        lattice = build_lattice(comp)
        d1 = random_plain_driver(rng, comp)
        d2 = random_plain_driver(rng, comp)
        s1 = solve_bsde(lattice, d1, random_terminal(rng, lattice))
        s2 = solve_bsde(lattice, d2, random_terminal(rng, lattice))
        c_lip = max(d1.lip_full, d2.lip_full)
        eta = 0.9 / c_lip**2 if c_lip > 0 else 4.0
        beta = 1.0 / eta + c_lip + 0.01
        return s1, s2, eta, beta, c_lip

    def test_bound_holds_on_random_pairs(self):
        rng = np.random.default_rng(53)
        for _ in range(10):
            s1, s2, eta, beta, _ = self._pair(rng)
            report = apriori_gap_check(s1, s2, eta, beta)
            assert report.ok, (report.worst_slack, report.witness)
            assert report.worst_slack >= -1e-10
            assert report.checked > 0

    def test_identical_solutions_edge(self):
        rng = np.random.default_rng(59)
        s1, _, eta, beta, _ = self._pair(rng)
        report = apriori_gap_check(s1, s1, eta, beta)
        assert report.ok
        # both sides vanish at the terminal, so the worst slack is exactly 0
        assert report.worst_slack == pytest.approx(0.0, abs=1e-15)

    def test_eta_above_limit_rejected(self):
        rng = np.random.default_rng(61)
        s1, s2, _, _, c_lip = self._pair(rng)
        bad_eta = 2.0 / c_lip**2
        with pytest.raises(ValidationError, match="exceeds 1/C\\^2"):
            apriori_gap_check(s1, s2, bad_eta, 1e6)

    def test_small_beta_rejected(self):
        rng = np.random.default_rng(67)
        s1, s2, eta, _, _ = self._pair(rng)
        with pytest.raises(ValidationError, match="clock weight too small"):
            apriori_gap_check(s1, s2, eta, 0.0)

    def test_needs_lipschitz_drivers(self):
        lattice = build_lattice(poisson_model(0.5, 1.0, 3))
        quad = jump_exp_driver(1.0, 0.5)
        sq = solve_bsde(lattice, quad, constant_terminal(0.2))
        with pytest.raises(ValidationError, match="Lipschitz"):
            apriori_gap_check(sq, sq, 1.0, 10.0)


class TestGrowthCheck:
    def test_quadratic_driver_inside_bound(self):
        lattice = build_lattice(poisson_model(0.6, 1.0, 5))
        driver = jump_exp_driver(1.0, 0.5, alpha=0.2, coef_alpha=1.0)
        sol = solve_bsde(lattice, driver, count_terminal(0.3, 0.1))
        report = exp_growth_check(sol)
        assert report["ok"], report
        assert report["lhs"] <= report["rhs"] * (1.0 + report["allowance"])

    def test_overflow_guard(self):
        lattice = build_lattice(poisson_model(0.6, 1.0, 3))
        driver = jump_exp_driver(1.0, 0.5)
        sol = solve_bsde(lattice, driver, constant_terminal(0.5))
        with pytest.raises(SolverError, match="overflow"):
            exp_growth_check(sol, p=5000.0)
