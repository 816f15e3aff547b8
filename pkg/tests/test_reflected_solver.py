"""Reflection, the pushing process K, and the brute-force stopping oracle."""

import numpy as np
import pytest
from conftest import (
    max_node_error,
    random_model,
    random_obstacle_rows,
    random_plain_driver,
    random_terminal,
)

from mfrbsde import (
    GuardError,
    ValidationError,
    build_lattice,
    constant_terminal,
    count_stopping_rules,
    flat_off_residual,
    linear_driver,
    make_model,
    poisson_model,
    snell_value_bruteforce,
    solve_bsde,
    solve_reflected,
    zero_driver,
)


def _random_reflected(rng, **model_kw):
    comp = random_model(rng, **model_kw)
    lattice = build_lattice(comp)
    driver = random_plain_driver(rng, comp)
    obs = random_obstacle_rows(rng, lattice)
    xi = random_terminal(rng, lattice)
    return lattice, driver, obs, xi


class TestReflection:
    def test_dominates_barrier_and_plain(self):
        rng = np.random.default_rng(71)
        for _ in range(10):
            lattice, driver, obs, xi = _random_reflected(rng)
            refl = solve_reflected(lattice, driver, obs, xi)
            plain = solve_bsde(lattice, driver, xi)
            for i in range(lattice.n_steps):
                assert np.all(refl.y[i] >= obs[i] - 1e-15)
                assert np.all(refl.y[i] >= plain.y[i] - 1e-12)
                assert np.all(refl.dk[i] >= 0.0)

    def test_flat_off_identity_exact(self):
        """dk is nonzero only where y sits exactly on the barrier."""
        rng = np.random.default_rng(73)
        for _ in range(10):
            lattice, driver, obs, xi = _random_reflected(rng)
            refl = solve_reflected(lattice, driver, obs, xi)
            assert flat_off_residual(refl) == 0.0
            for i in range(lattice.n_steps):
                pushed = refl.dk[i] > 0.0
                np.testing.assert_array_equal(refl.y[i][pushed], obs[i][pushed])

    def test_k_starts_at_zero_and_accumulates(self):
        rng = np.random.default_rng(79)
        lattice, driver, obs, xi = _random_reflected(rng)
        refl = solve_reflected(lattice, driver, obs, xi)
        np.testing.assert_array_equal(refl.k[0], 0.0)
        for i in range(lattice.n_steps):
            par = lattice.parent[i + 1]
            np.testing.assert_array_equal(
                refl.k[i + 1], refl.k[i][par] + refl.dk[i][par]
            )
            assert np.all(refl.k[i + 1] >= refl.k[i][par])

    def test_all_none_rows_reduce_to_plain(self):
        rng = np.random.default_rng(83)
        lattice, driver, _, xi = _random_reflected(rng)
        refl = solve_reflected(lattice, driver, [None] * lattice.n_steps, xi)
        plain = solve_bsde(lattice, driver, xi)
        for i in range(lattice.n_steps + 1):
            np.testing.assert_array_equal(refl.y[i], plain.y[i])
        for i in range(lattice.n_steps):
            np.testing.assert_array_equal(refl.dk[i], 0.0)

    def test_missing_obstacle_rejected(self):
        lattice = build_lattice(poisson_model(0.5, 1.0, 2))
        with pytest.raises(ValidationError, match="solve_bsde"):
            solve_reflected(lattice, zero_driver(), None, constant_terminal(0.0))

    def test_wrong_row_shape_rejected(self):
        lattice = build_lattice(poisson_model(0.5, 1.0, 2))
        rows = [np.zeros(1), np.zeros(5)]
        with pytest.raises(ValidationError, match="step 1"):
            solve_reflected(lattice, zero_driver(), rows, constant_terminal(0.0))

    def test_terminal_row_conflict_rejected(self):
        lattice = build_lattice(poisson_model(0.5, 1.0, 2))
        rows = [np.zeros(1), np.zeros(2), np.full(4, 0.5)]
        with pytest.raises(ValidationError, match="violate the barrier"):
            solve_reflected(lattice, zero_driver(), rows, constant_terminal(0.0))

    def test_binding_barrier_pushes(self):
        # each jump costs 0.9, so continuation dips below the barrier
        lattice = build_lattice(poisson_model(0.5, 1.0, 3))
        rows = [np.full(lattice.n_nodes[i], 0.9) for i in range(3)]
        xi = 1.0 - 0.9 * lattice.jump_count[3].astype(float)
        refl = solve_reflected(lattice, zero_driver(), rows, xi)
        total_push = sum(float(np.sum(refl.dk[i])) for i in range(3))
        assert total_push > 0.0
        assert np.all(refl.y[0] >= 0.9)


class TestRuleCounting:
    def test_single_path_chain(self):
        lattice = build_lattice(make_model(("a",), 1.0, 5, 0.0))
        # along a chain each node adds one more place to stop
        assert count_stopping_rules(lattice) == 6

    def test_binary_tower(self):
        values = {1: 2, 2: 5, 3: 26, 4: 677}
        for steps, expected in values.items():
            lattice = build_lattice(poisson_model(0.5, 1.0, steps))
            assert count_stopping_rules(lattice) == expected

    def test_ternary_three_steps(self):
        comp = make_model(("a", "b"), 1.0, 3, [0.4, 0.3])
        assert count_stopping_rules(build_lattice(comp)) == 730


class TestSnellBruteForce:
    def test_matches_reflected_small_instances(self):
        rng = np.random.default_rng(89)
        for marks, steps in [(1, 2), (1, 3), (1, 4), (2, 2), (2, 3)]:
            comp = random_model(
                rng, max_steps=steps, max_marks=marks, allow_flat=False
            )
            while comp.n_steps != steps or comp.n_marks != marks:
                comp = random_model(
                    rng, max_steps=steps, max_marks=marks, allow_flat=False
                )
            lattice = build_lattice(comp)
            driver = random_plain_driver(rng, comp)
            obs = random_obstacle_rows(rng, lattice)
            xi = random_terminal(rng, lattice)
            best = snell_value_bruteforce(lattice, driver, obs, xi)
            refl = solve_reflected(lattice, driver, obs, xi)
            assert max_node_error(best, refl.y) <= 1e-10

    def test_monotone_in_obstacle(self):
        rng = np.random.default_rng(97)
        comp = poisson_model(0.6, 1.0, 3)
        lattice = build_lattice(comp)
        driver = random_plain_driver(rng, comp)
        obs = random_obstacle_rows(rng, lattice)
        xi = random_terminal(rng, lattice)
        lifted = [row + 0.3 for row in obs]
        low = snell_value_bruteforce(lattice, driver, obs, xi)
        high = snell_value_bruteforce(lattice, driver, lifted, xi)
        for a, b in zip(high, low):
            assert np.all(a >= b - 1e-12)

    def test_step_guard(self):
        lattice = build_lattice(make_model(("a",), 1.0, 10, 0.0))
        rows = [np.zeros(1)] * 10
        with pytest.raises(GuardError, match="10 steps"):
            snell_value_bruteforce(lattice, zero_driver(), rows, constant_terminal(1.0))

    def test_rule_cap_guard(self):
        # 6 binary steps hold about 2e11 rules, far beyond the cap
        lattice = build_lattice(poisson_model(0.5, 1.0, 6))
        rows = [np.zeros(lattice.n_nodes[i]) for i in range(6)]
        with pytest.raises(GuardError, match="exceed the cap"):
            snell_value_bruteforce(lattice, zero_driver(), rows, constant_terminal(1.0))

    def test_needs_every_barrier_row(self):
        lattice = build_lattice(poisson_model(0.5, 1.0, 2))
        rows = [np.zeros(1), None]
        with pytest.raises(ValidationError, match="missing at step 1"):
            snell_value_bruteforce(lattice, zero_driver(), rows, constant_terminal(1.0))

    def test_trivial_stopping_prefers_barrier(self):
        # barrier 2 with terminal 1 and no discounting: stop immediately
        lattice = build_lattice(poisson_model(0.5, 1.0, 2))
        rows = [np.full(lattice.n_nodes[i], 2.0) for i in range(2)]
        best = snell_value_bruteforce(lattice, zero_driver(), rows, constant_terminal(1.0))
        assert best[0][0] == pytest.approx(2.0)
