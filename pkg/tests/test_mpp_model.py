"""Compensator models, lattices, simulation and compensated integrals."""

import numpy as np
import pytest
from conftest import random_model

from mfrbsde import (
    CompensatorModel,
    MarkSpace,
    ModelError,
    build_lattice,
    compensated_integral,
    compensator_residual,
    lattice_compensated_expectation,
    lattice_from_text,
    lattice_to_text,
    make_model,
    patterns_from_text,
    patterns_to_text,
    poisson_model,
    simulate_patterns,
)
from mfrbsde.mpp_model import MarkedPointPattern, simulate_branch_matrix


class TestModelValidation:
    def test_mark_space_rules(self):
        with pytest.raises(ModelError):
            MarkSpace(())
        with pytest.raises(ModelError):
            MarkSpace(("a", "a"))
        with pytest.raises(ModelError):
            MarkSpace(("a b",))

    def test_grid_must_increase(self):
        with pytest.raises(ModelError, match="strictly increasing"):
            CompensatorModel(
                MarkSpace(("a",)),
                np.array([0.0, 0.5, 0.5]),
                np.array([0.0, 0.5, 1.0]),
                np.full((2, 1), 0.1),
            )

    def test_clock_must_not_decrease(self):
        with pytest.raises(ModelError, match="nondecreasing"):
            CompensatorModel(
                MarkSpace(("a",)),
                np.array([0.0, 0.5, 1.0]),
                np.array([0.0, 0.6, 0.5]),
                np.full((2, 1), 0.1),
            )

    def test_infeasible_step_named(self):
        with pytest.raises(ModelError, match="step 1 infeasible"):
            make_model(("a",), 1.0, 2, [[0.5], [2.5]])

    def test_arrays_frozen_and_copied(self):
        phi = np.full((2, 1), 0.3)
        comp = CompensatorModel(
            MarkSpace(("a",)),
            np.array([0.0, 0.5, 1.0]),
            np.array([0.0, 0.5, 1.0]),
            phi,
        )
        phi[0, 0] = 99.0
        assert comp.phi[0, 0] == 0.3
        with pytest.raises(ValueError):
            comp.phi[0, 0] = 1.0

    def test_make_model_clock_kinds(self):
        lin = make_model(("a",), 2.0, 4, 0.2, clock="linear", clock_scale=0.5)
        np.testing.assert_allclose(lin.clock, 0.5 * lin.grid)
        pow2 = make_model(("a",), 2.0, 4, 0.2, clock="power", clock_power=2.0)
        np.testing.assert_allclose(pow2.clock, 2.0 * (pow2.grid / 2.0) ** 2)
        with pytest.raises(ModelError):
            make_model(("a",), 1.0, 2, 0.2, clock="wavelet")
        with pytest.raises(ModelError):
            make_model(("a",), 1.0, 2, 0.2, clock="explicit")

    def test_probabilities_partition(self):
        rng = np.random.default_rng(0)
        for _ in range(10):
            comp = random_model(rng)
            total = comp.jump_probs().sum(axis=1) + comp.stay_probs()
            np.testing.assert_allclose(total, 1.0, atol=1e-12)


class TestLattice:
    def test_counts_without_pruning(self):
        lattice = build_lattice(poisson_model(0.5, 1.0, 4))
        assert lattice.n_nodes == [2**i for i in range(5)]
        assert lattice.total_nodes == 31

    def test_zero_probability_branches_pruned(self):
        comp = make_model(("a", "b"), 1.0, 3, [0.4, 0.0])
        lattice = build_lattice(comp)
        # mark b never fires, so the tree is binary, not ternary
        assert lattice.n_nodes == [1, 2, 4, 8]
        assert np.all(lattice.child_jump[0][:, 1] == -1)

    def test_single_path_when_phi_zero(self):
        lattice = build_lattice(make_model(("a",), 1.0, 5, 0.0))
        assert lattice.n_nodes == [1] * 6

    def test_node_cap(self):
        with pytest.raises(ModelError, match="raise max_nodes"):
            build_lattice(poisson_model(0.3, 1.0, 8), max_nodes=50)

    def test_reach_sums_to_one(self):
        rng = np.random.default_rng(1)
        for _ in range(10):
            lattice = build_lattice(random_model(rng))
            for i in range(lattice.n_steps + 1):
                assert float(np.sum(lattice.reach[i])) == pytest.approx(1.0, abs=1e-12)

    def test_enumerate_paths_bijection(self):
        lattice = build_lattice(poisson_model(0.6, 1.0, 3))
        nodes, probs = lattice.enumerate_paths()
        assert nodes.shape == (8, 4)
        assert sorted(nodes[:, 3]) == list(range(8))
        assert float(probs.sum()) == pytest.approx(1.0, abs=1e-12)
        np.testing.assert_array_equal(nodes[:, 0], 0)

    def test_path_labels_round_trip(self):
        rng = np.random.default_rng(3)
        lattice = build_lattice(random_model(rng, max_steps=5))
        n = lattice.n_steps
        for node in range(lattice.n_nodes[n]):
            labels = lattice.path_labels(n, node)
            # walk forward through the children and land on the same node
            k = 0
            for i, lab in enumerate(labels):
                if lab < 0:
                    k = lattice.child_stay[i][k]
                else:
                    k = lattice.child_jump[i][k, lab]
            assert k == node

    def test_jump_count_matches_labels(self):
        lattice = build_lattice(poisson_model(0.5, 1.0, 4))
        n = lattice.n_steps
        for node in range(lattice.n_nodes[n]):
            labels = lattice.path_labels(n, node)
            assert lattice.jump_count[n][node] == int(np.sum(labels >= 0))


class TestSerialization:
    def test_lattice_round_trip_exact(self):
        rng = np.random.default_rng(4)
        for _ in range(5):
            lattice = build_lattice(random_model(rng, max_steps=5))
            text = lattice_to_text(lattice)
            back = lattice_from_text(text)
            assert back.n_nodes == lattice.n_nodes
            np.testing.assert_array_equal(back.comp.grid, lattice.comp.grid)
            np.testing.assert_array_equal(back.comp.clock, lattice.comp.clock)
            np.testing.assert_array_equal(back.comp.phi, lattice.comp.phi)
            for i in range(lattice.n_steps + 1):
                np.testing.assert_array_equal(back.parent[i], lattice.parent[i])
                np.testing.assert_array_equal(back.branch[i], lattice.branch[i])
                np.testing.assert_array_equal(back.reach[i], lattice.reach[i])

    def test_lattice_text_is_stable(self):
        lattice = build_lattice(poisson_model(0.7, 1.0, 3))
        assert lattice_to_text(lattice) == lattice_to_text(lattice)
        assert lattice_to_text(lattice).startswith("mfrbsde-lattice 1")

    def test_pattern_round_trip(self):
        comp = poisson_model(0.8, 1.0, 6)
        patterns = simulate_patterns(comp, 40, seed=9)
        text = patterns_to_text(patterns, comp.mark_space)
        back, space = patterns_from_text(text)
        assert space.marks == comp.mark_space.marks
        assert len(back) == len(patterns)
        for a, b in zip(back, patterns):
            np.testing.assert_array_equal(a.times, b.times)
            np.testing.assert_array_equal(a.step_indices, b.step_indices)
            assert a.marks == b.marks


class TestSimulation:
    def test_reproducible(self):
        comp = poisson_model(0.7, 1.0, 5)
        a = simulate_branch_matrix(comp, 5000, seed=42)
        b = simulate_branch_matrix(comp, 5000, seed=42)
        np.testing.assert_array_equal(a, b)
        c = simulate_branch_matrix(comp, 5000, seed=43)
        assert np.any(a != c)

    def test_chunking_invisible(self):
        """A shorter run is a prefix of a longer one with the same seed."""
        comp = poisson_model(0.7, 1.0, 5)
        small = simulate_branch_matrix(comp, 4100, seed=7)
        large = simulate_branch_matrix(comp, 9000, seed=7)
        np.testing.assert_array_equal(small, large[:4100])

    def test_branch_frequencies(self):
        comp = make_model(("a", "b"), 1.0, 4, [0.5, 0.3])
        n_paths = 40000
        branches = simulate_branch_matrix(comp, n_paths, seed=11)
        pj = comp.jump_probs()
        for i in range(comp.n_steps):
            for e in range(comp.n_marks):
                freq = float(np.mean(branches[:, i] == e))
                se = np.sqrt(pj[i, e] * (1 - pj[i, e]) / n_paths)
                assert abs(freq - pj[i, e]) <= 5 * se

    def test_pattern_times_on_grid(self):
        comp = poisson_model(0.9, 1.0, 4)
        for pattern in simulate_patterns(comp, 50, seed=13):
            for t, i in zip(pattern.times, pattern.step_indices):
                assert t == pytest.approx(comp.grid[i + 1])

    def test_pattern_rejects_decreasing_times(self):
        with pytest.raises(ModelError):
            MarkedPointPattern(
                times=np.array([0.5, 0.25]),
                marks=("a", "a"),
                step_indices=np.array([1, 0]),
            )


class TestCompensatedIntegrals:
    def test_hand_value(self):
        comp = poisson_model(0.5, 1.0, 2)
        # one event in step 0 with C = 1: gain 1, compensator mass 2 * 0.25
        pattern = MarkedPointPattern(
            times=np.array([0.5]), marks=("a",), step_indices=np.array([0])
        )
        val = compensated_integral(pattern, comp, 1.0)
        assert val == pytest.approx(1.0 - 0.5)

    def test_callable_integrand(self):
        comp = make_model(("a", "b"), 1.0, 2, [0.4, 0.2])
        mat_val = compensated_integral(
            MarkedPointPattern(np.array([1.0]), ("b",), np.array([1])),
            comp,
            lambda step, mark: 2.0 if mark == "b" else 0.0,
        )
        expected_mass = 2.0 * 0.2 * 0.5 * 2
        assert mat_val == pytest.approx(2.0 - expected_mass)

    def test_integrand_shape_rejected(self):
        comp = poisson_model(0.5, 1.0, 2)
        pattern = MarkedPointPattern(np.array([]), (), np.array([]))
        with pytest.raises(ModelError):
            compensated_integral(pattern, comp, np.zeros((3, 2)))

    def test_exhaustive_expectation_vanishes(self):
        rng = np.random.default_rng(6)
        for _ in range(10):
            comp = random_model(rng, max_steps=6)
            lattice = build_lattice(comp)
            mat = rng.normal(size=(comp.n_steps, comp.n_marks))
            assert abs(lattice_compensated_expectation(lattice, mat)) <= 1e-12

    def test_monte_carlo_residual_centred(self):
        comp = poisson_model(0.8, 1.0, 6)
        mean, stderr = compensator_residual(comp, 1.0, paths=20000, seed=3)
        assert stderr > 0
        assert abs(mean) <= 4 * stderr

    def test_residual_needs_paths(self):
        with pytest.raises(ModelError):
            compensator_residual(poisson_model(0.5, 1.0, 2), 1.0, paths=1, seed=0)
