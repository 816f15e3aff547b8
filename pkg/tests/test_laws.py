"""Empirical laws and the exact quantile-coupling Wasserstein distance."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import linprog

from mfrbsde import EmpiricalLaw, ValidationError, dirac, node_law, wasserstein
from mfrbsde.mpp_model import build_lattice, poisson_model


def lp_wasserstein(mu, nu, p):
    """Independent oracle: solve the transport LP over the full coupling."""
    na, nb = mu.size, nu.size
    cost = (np.abs(mu.values[:, None] - nu.values[None, :]) ** p).ravel()
    a_eq = np.zeros((na + nb, na * nb))
    for i in range(na):
        a_eq[i, i * nb : (i + 1) * nb] = 1.0
    for j in range(nb):
        a_eq[na + j, j::nb] = 1.0
    b_eq = np.concatenate([mu.weights, nu.weights])
    res = linprog(cost, A_eq=a_eq, b_eq=b_eq, bounds=(0, None), method="highs")
    assert res.success, res.message
    return res.fun ** (1.0 / p)


def _law(values, weights):
    return EmpiricalLaw(np.asarray(values, float), np.asarray(weights, float))


atoms = st.lists(
    st.floats(-50, 50, allow_nan=False, allow_infinity=False),
    min_size=1,
    max_size=6,
)


def _normalise(raw):
    w = np.asarray(raw, float) + 1e-3
    return w / w.sum()


law_strategy = atoms.flatmap(
    lambda vals: st.lists(
        st.floats(0.0, 1.0), min_size=len(vals), max_size=len(vals)
    ).map(lambda raw: _law(vals, _normalise(raw)))
)


class TestEmpiricalLaw:
    def test_rejects_bad_weights(self):
        with pytest.raises(ValidationError):
            _law([0.0, 1.0], [0.5, 0.6])
        with pytest.raises(ValidationError):
            _law([0.0, 1.0], [1.5, -0.5])

    def test_rejects_nonfinite_values(self):
        with pytest.raises(ValidationError):
            _law([np.inf], [1.0])

    def test_rejects_shape_mismatch(self):
        with pytest.raises(ValidationError):
            _law([0.0, 1.0], [1.0])

    def test_arrays_are_frozen(self):
        mu = _law([1.0, 2.0], [0.3, 0.7])
        with pytest.raises(ValueError):
            mu.values[0] = 9.0

    def test_mean_and_moment(self):
        mu = _law([-2.0, 3.0], [0.25, 0.75])
        assert mu.mean() == pytest.approx(-0.5 + 2.25)
        assert mu.abs_moment_root(2.0) == pytest.approx(np.sqrt(0.25 * 4 + 0.75 * 9))

    def test_canonical_merges_equal_atoms(self):
        mu = _law([1.0, 1.0, 2.0], [0.2, 0.3, 0.5]).canonical()
        assert mu.size == 2
        np.testing.assert_allclose(mu.values, [1.0, 2.0])
        np.testing.assert_allclose(mu.weights, [0.5, 0.5])


class TestWassersteinExact:
    def test_dirac_pair(self):
        assert wasserstein(dirac(1.0), dirac(-2.0), 1.0) == pytest.approx(3.0)
        assert wasserstein(dirac(1.0), dirac(-2.0), 2.0) == pytest.approx(3.0)

    def test_translation(self):
        mu = _law([0.0, 1.0], [0.5, 0.5])
        nu = _law([2.0, 3.0], [0.5, 0.5])
        # quantiles shift rigidly, so every order gives the shift itself
        for p in (1.0, 2.0, 3.5):
            assert wasserstein(mu, nu, p) == pytest.approx(2.0)

    def test_two_atom_hand_value(self):
        # optimal coupling sends mass 0.5 over distance 0 and 0.5 over 1
        mu = _law([0.0], [1.0])
        nu = _law([0.0, 1.0], [0.5, 0.5])
        assert wasserstein(mu, nu, 1.0) == pytest.approx(0.5)
        assert wasserstein(mu, nu, 2.0) == pytest.approx(np.sqrt(0.5))

    def test_order_below_one_rejected(self):
        with pytest.raises(ValidationError):
            wasserstein(dirac(0.0), dirac(1.0), 0.5)

    def test_distance_to_dirac_is_moment(self):
        rng = np.random.default_rng(5)
        vals = rng.normal(size=5)
        w = _normalise(rng.random(5))
        mu = _law(vals, w)
        for p in (1.0, 2.0, 4.0):
            assert wasserstein(mu, dirac(0.0), p) == pytest.approx(
                mu.abs_moment_root(p), abs=1e-14
            )

    @pytest.mark.parametrize("p", [1.0, 2.0, 3.0])
    def test_matches_transport_lp(self, p):
        """Quantile coupling equals the LP optimum on small random laws."""
        rng = np.random.default_rng(11)
        for _ in range(25):
            na, nb = rng.integers(1, 7, size=2)
            mu = _law(rng.uniform(-5, 5, na), _normalise(rng.random(na)))
            nu = _law(rng.uniform(-5, 5, nb), _normalise(rng.random(nb)))
            direct = wasserstein(mu, nu, p)
            via_lp = lp_wasserstein(mu, nu, p)
            assert abs(direct - via_lp) <= 1e-10 * max(1.0, via_lp)


@given(law_strategy, law_strategy)
@settings(max_examples=60, deadline=None)
def test_symmetry(mu, nu):
    assert wasserstein(mu, nu, 2.0) == pytest.approx(wasserstein(nu, mu, 2.0), abs=1e-12)


@given(law_strategy)
@settings(max_examples=60, deadline=None)
def test_self_distance_zero(mu):
    assert wasserstein(mu, mu, 1.0) <= 1e-12


@given(law_strategy, law_strategy, law_strategy)
@settings(max_examples=40, deadline=None)
def test_triangle_inequality(mu, nu, rho):
    d_direct = wasserstein(mu, rho, 2.0)
    d_via = wasserstein(mu, nu, 2.0) + wasserstein(nu, rho, 2.0)
    assert d_direct <= d_via + 1e-9 * max(1.0, d_via)


@given(law_strategy, law_strategy, st.floats(1.0, 6.0))
@settings(max_examples=40, deadline=None)
def test_order_monotonicity(mu, nu, p):
    """W_1 <= W_p by Jensen on the coupling."""
    w1 = wasserstein(mu, nu, 1.0)
    wp = wasserstein(mu, nu, p)
    assert w1 <= wp + 1e-9 * max(1.0, wp)


class TestNodeLaw:
    def test_reach_weighting_hand_check(self):
        lattice = build_lattice(poisson_model(0.5, 1.0, 1))
        # one step: stay with weight 0.5, jump with weight 0.5
        mu = node_law(lattice, np.array([3.0, -1.0]), 1)
        assert mu.mean() == pytest.approx(0.5 * 3.0 + 0.5 * (-1.0))

    def test_equal_values_merge(self):
        lattice = build_lattice(poisson_model(0.4, 1.0, 2))
        mu = node_law(lattice, np.full(lattice.n_nodes[2], 2.0), 2)
        assert mu.size == 1
        assert mu.values[0] == 2.0
        assert mu.weights[0] == pytest.approx(1.0)

    def test_shape_mismatch_rejected(self):
        lattice = build_lattice(poisson_model(0.4, 1.0, 2))
        with pytest.raises(ValidationError):
            node_law(lattice, np.zeros(3), 2)

    def test_weights_sum_to_one(self):
        rng = np.random.default_rng(2)
        lattice = build_lattice(poisson_model(0.6, 1.0, 4))
        for step in range(5):
            mu = node_law(lattice, rng.normal(size=lattice.n_nodes[step]), step)
            assert float(np.sum(mu.weights)) == pytest.approx(1.0, abs=1e-12)
