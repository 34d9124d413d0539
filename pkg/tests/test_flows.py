import json

import numpy as np
import pytest

from conftest import merit_rule_on_grid, snapped_discretization
from verialloc.envelope import LABEL_ALLO, LABEL_AUD
from verialloc.flows import (
    DiscreteInstance,
    audit_threshold_report,
    border_lhs,
    border_rhs,
    brute_force_verdict,
    check_feasible,
    check_interim_allocation,
    check_interim_audit,
    construct_expost,
    discretize_rules,
    make_check_set,
    upper_set_report,
)
from verialloc.interim import merit_with_guarantee


@pytest.fixture(scope="module")
def footnote():
    """Two agents, two iid 50/50 types; objects per profile:
    (lo,lo)->0, (lo,hi)->1, (hi,lo)->2, (hi,hi)->0."""
    return DiscreteInstance(
        grids=((0.0, 1.0), (0.0, 1.0)),
        masses=((0.5, 0.5), (0.5, 0.5)),
        capacity_default=0,
        capacity={(0, 1): 1, (1, 0): 2},
    )


FOOTNOTE_P = [[0.25, 0.25], [0.25, 0.5]]


class TestBorderSums:
    def test_footnote_rhs(self, footnote):
        E = make_check_set(footnote, [[0], [1]])
        assert border_rhs(footnote, E) == pytest.approx(0.25, abs=1e-12)

    def test_empty_set(self, footnote):
        E = make_check_set(footnote, [[], []])
        assert border_rhs(footnote, E) == 0.0

    def test_full_grid_supply_bound(self):
        inst = DiscreteInstance.symmetric(3, (0.2, 0.8), (0.5, 0.5), capacity=2)
        E = make_check_set(inst, [[0, 1]] * 3)
        # h = m everywhere and everyone eligible: E[min(n, m)] = m
        assert border_rhs(inst, E) == pytest.approx(2.0, abs=1e-12)

    def test_lhs(self, footnote):
        E = make_check_set(footnote, [[0], [1]])
        assert border_lhs(footnote, FOOTNOTE_P, E) == pytest.approx(0.375, abs=1e-12)

    def test_profile_cap(self):
        inst = DiscreteInstance.symmetric(3, tuple(np.linspace(0, 1, 8)),
                                          (0.125,) * 8, capacity=2)
        with pytest.raises(ValueError, match="profiles"):
            border_rhs(inst, make_check_set(inst, [[0]] * 3), max_profiles=100)


class TestFootnoteCounterexample:
    def test_infeasible_with_exact_witness(self, footnote):
        verdict = check_feasible(footnote, FOOTNOTE_P)
        assert not verdict.feasible
        v = verdict.violating_set
        assert v.check_set == (frozenset({0}), frozenset({1}))
        assert v.lhs == pytest.approx(0.375, abs=1e-12)
        assert v.rhs == pytest.approx(0.25, abs=1e-12)

    def test_upper_sets_all_hold(self, footnote):
        rep = upper_set_report(footnote, FOOTNOTE_P)
        assert rep["all_hold"]
        assert rep["slack"] >= 0.0

    def test_reduced_rule_feasible_with_exact_marginals(self, footnote):
        P = [[0.25, 0.25], [0.25, 0.25]]
        verdict = check_feasible(footnote, P)
        assert verdict.feasible
        marg = verdict.expost.marginals()
        for row, target in zip(marg, P):
            assert np.max(np.abs(row - np.array(target))) <= 1e-9
        assert verdict.expost.max_violation() <= 1e-12

    def test_zero_rule(self, footnote):
        verdict = check_feasible(footnote, [[0.0, 0.0], [0.0, 0.0]])
        assert verdict.feasible
        assert float(verdict.expost.alloc.sum()) == 0.0

    def test_json_round_trip(self, footnote, tmp_path):
        path = tmp_path / "instance.json"
        footnote.save(path)
        loaded = DiscreteInstance.load(path)
        assert loaded.grids == footnote.grids
        assert loaded.capacity == footnote.capacity
        v = check_feasible(loaded, FOOTNOTE_P)
        assert not v.feasible


def random_discrete_instance(rng):
    """Small random instance with <= 12 total grid points."""
    n = int(rng.integers(2, 4))
    sizes = [int(rng.integers(2, 4)) for _ in range(n)]
    while sum(sizes) > 12:
        sizes[int(rng.integers(0, n))] = 2
    grids, masses = [], []
    for s in sizes:
        grids.append(tuple(np.linspace(0, 1, s)))
        w = rng.integers(1, 5, size=s)
        masses.append(tuple(w / w.sum()))
    capacity = {}
    eligible = {}
    import itertools

    for prof in itertools.product(*(range(s) for s in sizes)):
        if rng.random() < 0.4:
            capacity[prof] = int(rng.integers(0, n))
        if rng.random() < 0.3:
            keep = [i for i in range(n) if rng.random() < 0.7]
            eligible[prof] = frozenset(keep)
    return DiscreteInstance(
        grids=tuple(grids), masses=tuple(masses),
        capacity_default=int(rng.integers(1, n + 1)),
        capacity=capacity, eligible=eligible,
    )


class TestFlowAgainstBruteForce:
    def test_agreement_on_random_instances(self):
        rng = np.random.default_rng(404)
        checked = 0
        infeasible_seen = 0
        while checked < 25:
            inst = random_discrete_instance(rng)
            P = [
                [float(np.round(rng.random() * rng.uniform(0.3, 1.0), 3))
                 for _ in range(s)]
                for s in inst.sizes
            ]
            flow = check_feasible(inst, P, want_expost=True)
            brute = brute_force_verdict(inst, P)
            assert flow.feasible == brute.feasible, (inst.to_json_dict(), P)
            if flow.feasible:
                marg = flow.expost.marginals()
                for row, target in zip(marg, P):
                    assert np.max(np.abs(row - np.array(target))) <= 1e-9
                assert flow.expost.max_violation() <= 1e-12
            else:
                infeasible_seen += 1
                v = flow.violating_set
                # recompute the witness independently
                lhs = border_lhs(inst, P, v.check_set)
                rhs = border_rhs(inst, v.check_set)
                assert lhs > rhs - 1e-9
                assert v.lhs == pytest.approx(lhs, abs=2e-9)
                assert v.rhs == pytest.approx(rhs, abs=2e-9)
            checked += 1
        assert infeasible_seen >= 5  # the family must exercise both verdicts


class TestSymmetricAllocation:
    def test_monotone_shortcut_matches_flow(self, ex_inst, ex_solved):
        rules = merit_with_guarantee(ex_solved.phi_star, ex_inst,
                                     ex_solved.partition)
        disc, p_avg = discretize_rules(ex_inst, rules, 10)
        fast = check_interim_allocation(disc, p_avg)
        general = check_feasible(disc, [p_avg] * 3)
        assert fast.feasible and general.feasible
        for a, b in zip(fast.expost.marginals(), general.expost.marginals()):
            assert np.max(np.abs(a - b)) <= 1e-9

    def test_oversized_rule_infeasible_at_full_set(self):
        inst = DiscreteInstance.symmetric(3, (0.25, 0.75), (0.5, 0.5), capacity=2)
        verdict = check_interim_allocation(inst, [1.0, 1.0], construct=False)
        assert not verdict.feasible
        v = verdict.violating_set
        assert v.check_set == tuple(frozenset({0, 1}) for _ in range(3))
        assert v.lhs == pytest.approx(3.0, abs=1e-9)
        assert v.rhs == pytest.approx(2.0, abs=1e-9)

    def test_first_best_binds_every_upper_set(self, ex_inst):
        from verialloc.interim import InterimRules, efficient_rule

        part_rules = merit_with_guarantee(0.4, ex_inst)
        eff = InterimRules(P=lambda t: efficient_rule(t, ex_inst),
                           A=lambda t: 0.0, phi=0.0,
                           partition=part_rules.partition)
        disc, p_avg = discretize_rules(ex_inst, eff, 12)
        verdict = check_interim_allocation(disc, p_avg)
        assert verdict.feasible
        rep = upper_set_report(disc, [p_avg] * 3)
        # the efficient rule exhausts supply on every upper tail
        assert rep["all_hold"]
        assert abs(rep["slack"]) <= 1e-7

    def test_non_monotone_delegates(self):
        inst = DiscreteInstance.symmetric(2, (0.2, 0.8), (0.5, 0.5), capacity=1)
        verdict = check_interim_allocation(inst, [0.6, 0.2])
        assert verdict.feasible  # total demand 0.4 per agent, within supply

    def test_single_agent_constant(self):
        inst = DiscreteInstance(
            grids=((0.1, 0.6, 0.9),),
            masses=((0.3, 0.4, 0.3),),
            capacity_default=1,
        )
        rule = construct_expost(inst, [[0.5, 0.5, 0.5]])
        assert np.allclose(rule.alloc, 0.5, atol=1e-9)


class TestConstructExpost:
    def test_infeasible_raises_with_witness(self, footnote):
        with pytest.raises(ValueError, match="infeasible"):
            construct_expost(footnote, FOOTNOTE_P)

    def test_example_discretization_realizes_interim_rule(self, ex_inst, ex_solved):
        rules = merit_with_guarantee(ex_solved.phi_star, ex_inst,
                                     ex_solved.partition)
        disc, p_avg = discretize_rules(ex_inst, rules, 16)
        rule = construct_expost(disc, [p_avg] * 3)
        for row in rule.marginals():
            assert np.max(np.abs(row - np.array(p_avg))) <= 1e-9
        assert rule.max_violation() <= 1e-12


@pytest.fixture(scope="module")
def audit_setup(ex_inst, ex_solved):
    part = ex_solved.partition
    disc, labels = snapped_discretization(ex_inst, part, 16)
    p_merit = merit_rule_on_grid(disc, labels, ex_inst.m, ex_inst.k)
    # exact discrete interim of the merit stage
    mass = np.array(disc.masses[0])
    interim = np.zeros((3, len(mass)))
    for pid, prof in enumerate(disc.profiles()):
        w = float(np.prod(mass[list(prof)]))
        for i in range(3):
            if p_merit[pid, i]:
                interim[i, prof[i]] += w
    interim /= mass[None, :]
    phi = ex_solved.phi_star
    A = [
        [max(interim[i, t] - (phi if labels[t] == LABEL_ALLO else 0.0), 0.0)
         for t in range(len(mass))]
        for i in range(3)
    ]
    return disc, labels, p_merit, A


class TestAuditFeasibility:
    def test_damped_audit_demand_feasible(self, audit_setup, ex_inst):
        disc, labels, p_merit, A = audit_setup
        # the audit demand of the two-stage mechanism sits exactly on the
        # feasibility boundary (its binding constraint is an equality in
        # the continuum); any epsilon of slack makes the grid version
        # implementable
        A_damped = [[x * (1 - 1e-6) for x in row] for row in A]
        verdict = check_interim_audit(disc, p_merit, A_damped, ex_inst.k)
        assert verdict.feasible
        for row, target in zip(verdict.expost.marginals(), A_damped):
            # 2e-9: demand quantization plus the irrational snapped masses
            assert np.max(np.abs(row - np.array(target))) <= 2e-9

    def test_exact_audit_demand_is_knife_edge(self, audit_setup, ex_inst):
        disc, labels, p_merit, A = audit_setup
        verdict = check_interim_audit(disc, p_merit, A, ex_inst.k,
                                      want_expost=False)
        if not verdict.feasible:
            v = verdict.violating_set
            # any violation is pure discretization noise, not a real breach
            assert v.lhs - v.rhs < 1e-9

    def test_inflated_audit_demand_infeasible(self, audit_setup, ex_inst):
        disc, labels, p_merit, A = audit_setup
        A_over = [list(row) for row in A]
        t_allo = max(t for t in range(len(labels)) if labels[t] == LABEL_ALLO)
        for row in A_over:
            row[t_allo] = min(1.0, row[t_allo] + 0.05)
        verdict = check_interim_audit(disc, p_merit, A_over, ex_inst.k,
                                      want_expost=False)
        assert not verdict.feasible
        v = verdict.violating_set
        assert v.lhs > v.rhs

    def test_audit_capacity_never_binding(self):
        # k = n with everyone always allocated: audit everyone at will
        inst = DiscreteInstance.symmetric(2, (0.3, 0.7), (0.5, 0.5), capacity=2)
        p_merit = np.ones((4, 2), dtype=bool)
        verdict = check_interim_audit(inst, p_merit, [[1.0, 1.0]] * 2, 2)
        assert verdict.feasible

    def test_threshold_family_matches_flow_worst_set(self, audit_setup, ex_inst):
        disc, labels, p_merit, A = audit_setup
        aud_lo = labels.index(LABEL_AUD)
        aud_hi = next(t for t in range(aud_lo, len(labels))
                      if labels[t] == LABEL_ALLO)
        A_stressed = [[min(1.0, x + 0.02) for x in row] for row in A]
        rep = audit_threshold_report(disc, p_merit, A_stressed, ex_inst.k,
                                     aud_lo, aud_hi)
        verdict = check_interim_audit(disc, p_merit, A_stressed, ex_inst.k,
                                      want_expost=False)
        assert not rep["all_hold"] and not verdict.feasible
        v = verdict.violating_set
        from verialloc.flows import _Scaled

        # the worst threshold-form set must achieve the same violation as
        # the min-cut set found by the general flow check
        sc = _Scaled(
            DiscreteInstance(grids=disc.grids, masses=disc.masses,
                             capacity_default=ex_inst.k,
                             eligible={
                                 tuple(prof): frozenset(
                                     np.flatnonzero(p_merit[pid]).tolist())
                                 for pid, prof in enumerate(disc.profiles())
                             }),
            A_stressed, 10**9,
        )
        flow_gap = sc.lhs_units(v.check_set) - sc.rhs_units(v.check_set)
        family_gap = round((rep["lhs"] - rep["rhs"]) * sc.common)
        assert family_gap == pytest.approx(flow_gap, rel=1e-9)


def test_grid_refinement_documents_convergence(ex_inst, ex_solved):
    """Interim rules of the grid merit stage approach their continuum
    counterparts as the grid refines (halving widths shrinks the error)."""
    part = ex_solved.partition
    phi = ex_solved.phi_star
    from verialloc.interim import allocation_branch

    errors = []
    for bins in (8, 16, 32):
        disc, labels = snapped_discretization(ex_inst, part, bins)
        p_merit = merit_rule_on_grid(disc, labels, ex_inst.m, ex_inst.k)
        mass = np.array(disc.masses[0])
        interim = np.zeros(len(mass))
        for pid, prof in enumerate(disc.profiles()):
            w = float(np.prod(mass[list(prof)]))
            if p_merit[pid, 0]:
                interim[prof[0]] += w
        interim /= mass

        def continuum_merit(t):
            label = part.region_of(t)
            if label == LABEL_ALLO:
                return allocation_branch(label, t, phi, ex_inst)
            if label == LABEL_AUD:
                return allocation_branch(label, t, phi, ex_inst) - phi
            return 0.0

        mids = np.array([g for g in disc.grids[0]])
        err = float(np.max(np.abs(interim - np.array(
            [continuum_merit(float(t)) for t in mids]
        ))))
        errors.append(err)
    print(f"grid refinement errors (8/16/32 bins): {errors}")
    assert errors[2] < errors[0]
    assert errors[2] < 0.05
