"""Sparse quadrature training: the weight LP and the rules it produces.

The LP itself is checked against brute-force vertex enumeration on problems
small enough to enumerate, and against closed-form optima where one exists.
Rules trained on a real archetype are re-verified by scanning the full
constraint family, which never trusts the working set the LP happened to
build.
"""

import itertools

import numpy as np
import pytest
from numpy.testing import assert_allclose

from finrom.components import build_archetype, compute_port_basis, split_bubble_port
from finrom.eqp import (
    BACKOFF_CAP,
    VOLUME,
    EqpProblem,
    EqpTrainer,
    _solve_weight_lp,
    _WorkingSet,
    train_output_rules,
    verify_output_rule,
)
from finrom.reduced import ReducedBasis, build_reduced_archetype, component_operator
from finrom.training import TrainingConfig, train_archetypes


def full_bubble_archetype(kind):
    comp = build_archetype(kind)
    pb = compute_port_basis(comp)
    nb = comp.n_bubble
    modes = np.zeros((comp.n_nodes, nb))
    modes[comp.bubble_nodes, np.arange(nb)] = 1.0
    return build_reduced_archetype(comp, pb, ReducedBasis(modes, np.ones(nb)))


def constant_state(ra, temp):
    comp = ra.comp
    coeffs = np.full(comp.n_nodes, float(temp))
    split = split_bubble_port(comp, coeffs, ra.port_basis)
    return np.concatenate([split.bubble[comp.bubble_nodes], *split.port_coords])


@pytest.fixture(scope="module")
def rod_trained():
    cfg = TrainingConfig(n_sample=3, seed=5150)
    ta = train_archetypes(cfg, kinds=("rod",))["rod"]
    tr = EqpTrainer(ta.ra, ta.snapshots.rb, ta.snapshots.rb_mus)
    return ta, tr


@pytest.fixture(scope="module")
def rod_rules(rod_trained):
    _, tr = rod_trained
    deltas = (1e2, 1.0, 1e-2)
    return deltas, tr.train(deltas=deltas)


class TestEqpProblem:
    def test_row_count(self):
        # Q positivity bounds, then two-sided volume, residual (one per
        # state and test function) and Jacobian (one per state and matrix
        # entry) constraints
        p = EqpProblem(n_quad=100, n_sample=3, n_loc=5, delta=1.0)
        assert p.n_rows == 100 + 2 * (1 + 15 + 75)

    def test_trainer_dimensions(self, rod_trained):
        _, tr = rod_trained
        nl = tr.ra.n_loc
        p = tr.problem(0.5)
        assert p.n_sample == 3
        assert p.n_rows == tr.n_quad + 2 * (1 + 3 * nl + 3 * nl * nl)


def brute_force_min(rows, rhs, bound):
    """Minimum weight sum over all vertices of {x >= 0, |rows x - rhs| <=
    bound}; exponential, for tiny problems only."""
    m, q = rows.shape
    a_full = np.vstack([rows, -rows, -np.eye(q)])
    b_full = np.concatenate([rhs + bound, bound - rhs, np.zeros(q)])
    best = np.inf
    for active in itertools.combinations(range(len(a_full)), q):
        sub = a_full[list(active)]
        if abs(np.linalg.det(sub)) < 1e-12:
            continue
        x = np.linalg.solve(sub, b_full[list(active)])
        if (a_full @ x <= b_full + 1e-8).all():
            best = min(best, x.sum())
    return best


class TestWeightLp:
    def test_volume_row_only(self):
        # min sum(x) with sum(x) >= V - d is exactly V - d
        rows = np.ones((1, 30))
        rho, obj, _ = _solve_weight_lp(
            rows, np.array([12.0]), np.array([0.25]), 30, np.arange(4)
        )
        assert_allclose(obj, 11.75, rtol=1e-12)
        assert_allclose(rho.sum(), 11.75, rtol=1e-12)
        assert rho.min() >= 0.0

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_matches_vertex_enumeration(self, seed):
        rng = np.random.default_rng(seed)
        rows = rng.standard_normal((4, 6))
        wbar = rng.uniform(0.5, 1.5, 6)
        rhs = rows @ wbar
        bound = np.full(4, 0.4)
        # start from a deliberately poor column set so pricing has to work
        rho, obj, _ = _solve_weight_lp(rows, rhs, bound, 6, np.arange(2))
        assert rho.min() >= 0.0
        assert np.abs(rows @ rho - rhs).max() <= bound.max() + 1e-8
        assert_allclose(obj, brute_force_min(rows, rhs, bound), rtol=1e-7)

    def test_never_beats_truth_weights(self, rod_trained):
        _, tr = rod_trained
        mat = tr.residual_matrix(0)
        rows = np.vstack([np.ones(tr.n_quad), mat.T])
        rhs = rows @ tr.wbar
        _, obj, _ = _solve_weight_lp(
            rows, rhs, np.full(len(rhs), 1e-3), tr.n_quad, np.arange(0, tr.n_quad, 8)
        )
        assert obj <= tr.wbar.sum() + 1e-9


class TestBatchThinning:
    def test_parallel_rows_collapse(self):
        e1 = np.array([1.0, 0.0, 0.0, 0.0])
        e2 = np.array([0.0, 1.0, 0.0, 0.0])
        fresh = [("a", 2 * e1, 2.0), ("b", e1, 1.0), ("c", e2, 1.0)]
        kept = EqpTrainer._thin(fresh)
        assert [spec for spec, _ in kept] == ["a", "c"]

    def test_tighter_parallel_row_survives(self):
        # a later sibling with clearly larger norm is a tighter constraint
        # in scaled units and must not be thinned away
        e1 = np.array([1.0, 0.0, 0.0, 0.0])
        fresh = [("a", e1, 1.0), ("b", 3 * e1, 3.0)]
        kept = EqpTrainer._thin(fresh)
        assert [spec for spec, _ in kept] == ["a", "b"]

    def test_empty_and_single(self):
        assert EqpTrainer._thin([]) == []
        vec = np.ones(3)
        assert EqpTrainer._thin([("a", vec, np.sqrt(3.0))]) == [("a", vec)]


class TestWorkingSet:
    def test_starts_with_volume_row(self):
        work = _WorkingSet(5, 3.0)
        assert len(work) == 1
        assert work.specs[0][0] == VOLUME
        assert_allclose(work.rows[0], np.ones(5))
        assert work.rhs[0] == 3.0

    def test_widen_reaches_cap_in_three_steps(self):
        work = _WorkingSet(5, 3.0)
        spec = work.specs[0]
        widened = 0
        while work.widen(spec):
            widened += 1
        # 1e-2 -> 4e-2 -> 0.16 -> capped at 0.5
        assert widened == 3
        assert work.backoff[0] == BACKOFF_CAP

    def test_bounds_scale_with_delta(self):
        work = _WorkingSet(5, 3.0)
        assert_allclose(work.bounds(10.0), [10.0 * (1.0 - 1e-2)])


class TestRowConsistency:
    """The trainer's cached constraint rows must agree with the online
    operator evaluated at the same state: same integrand, same weights."""

    def test_residual_rows_match_operator(self, rod_trained):
        _, tr = rod_trained
        for n in range(tr.n_sample):
            op = component_operator(tr.ra, tr.mus[n])
            expected = op.residual(tr.states[:, n])
            got = tr.residual_matrix(n).T @ tr.wbar
            assert_allclose(got, expected, rtol=1e-9, atol=1e-8)

    def test_jacobian_rows_match_operator(self, rod_trained):
        _, tr = rod_trained
        op = component_operator(tr.ra, tr.mus[1])
        jac = op.jacobian(tr.states[:, 1])
        for i, j in [(0, 0), (1, 3), (5, 2), (2, 2)]:
            got = tr.jacobian_row(1, i, j) @ tr.wbar
            assert_allclose(got, jac[i, j], rtol=1e-9, atol=1e-8)

    def test_jacobian_diff_matches_rows(self, rod_trained):
        _, tr = rod_trained
        rng = np.random.default_rng(3)
        d = rng.standard_normal(tr.n_quad)
        jd = tr.jacobian_diff(0, d)
        for i in range(4):
            for j in range(4):
                assert_allclose(jd[i, j], tr.jacobian_row(0, i, j) @ d,
                                rtol=1e-9, atol=1e-10)

    def test_volume_row_vector(self, rod_trained):
        _, tr = rod_trained
        assert_allclose(tr.row_vector((VOLUME, 0, 0, 0)), np.ones(tr.n_quad))


class TestTrainedRules:
    def test_deltas_recorded(self, rod_rules):
        deltas, rules = rod_rules
        assert set(rules) == set(deltas)
        for d in deltas:
            assert rules[d].delta == d
            assert rules[d].kind == "residual"

    def test_full_family_violation_within_delta(self, rod_trained, rod_rules):
        _, tr = rod_trained
        deltas, rules = rod_rules
        for d in deltas:
            assert tr.verify(rules[d]) <= d + 1e-9

    def test_sizes_nondecreasing_as_delta_tightens(self, rod_rules):
        deltas, rules = rod_rules
        sizes = [rules[d].n_points for d in sorted(deltas, reverse=True)]
        assert sizes == sorted(sizes)

    def test_objective_monotone_and_bounded(self, rod_trained, rod_rules):
        _, tr = rod_trained
        deltas, rules = rod_rules
        objs = [rules[d].objective for d in sorted(deltas, reverse=True)]
        assert all(a <= b + 1e-9 for a, b in zip(objs, objs[1:]))
        assert objs[-1] <= tr.wbar.sum() + 1e-9

    def test_points_sorted_weights_positive(self, rod_rules):
        _, rules = rod_rules
        for rule in rules.values():
            assert np.all(np.diff(rule.point_idx) > 0)
            assert rule.weights.min() > 0.0

    def test_far_fewer_points_than_truth(self, rod_trained, rod_rules):
        _, tr = rod_trained
        deltas, rules = rod_rules
        assert rules[max(deltas)].n_points < tr.n_quad / 3


class TestOutputRules:
    def test_constant_state_collapses_to_volume(self):
        # with a constant field the output row is proportional to the
        # volume row, so a single point carries the whole rule
        ra = full_bubble_archetype("rod")
        states = constant_state(ra, 2.0)[:, None]
        mus = np.array([[4.0, 0.8, 0.0]])
        rules = train_output_rules(ra, states, mus, deltas=(1.0, 1e-3))
        for d, rule in rules.items():
            assert rule.n_points <= 2
            assert rule.n_lp_rows == 2
            assert verify_output_rule(ra, states, mus, rule) <= d + 1e-9

    def test_trained_states(self, rod_trained):
        ta, tr = rod_trained
        rules = train_output_rules(
            ta.ra, tr.states, tr.mus, deltas=(1e-1, 1e-4)
        )
        for d, rule in rules.items():
            assert rule.n_lp_rows == 1 + tr.n_sample
            assert np.all(np.diff(rule.point_idx) > 0)
            assert rule.weights.min() > 0.0
            assert verify_output_rule(ta.ra, tr.states, tr.mus, rule) <= d + 1e-9
        loose, tight = rules[1e-1], rules[1e-4]
        assert loose.n_points <= tight.n_points
