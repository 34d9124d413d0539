"""Acceptance suite: one test per release criterion, each printing a
PASS/FAIL line.  Run with ``pytest tests/test_acceptance.py -v -s``.
"""

import time

import numpy as np
import pytest

from conftest import merit_rule_on_grid, random_instance
from verialloc.distributions import make_power, make_uniform
from verialloc.envelope import (
    ProblemInstance,
    c_allo,
    c_aud,
    c_ic,
    d_c_allo,
    d_c_aud,
    d_c_ic,
    envelope_value,
)
from verialloc.flows import (
    DiscreteInstance,
    border_lhs,
    border_rhs,
    brute_force_verdict,
    check_feasible,
    check_interim_allocation,
    discretize_rules,
    upper_set_report,
)
from verialloc.interim import bic_slack, interim_integral, merit_with_guarantee
from verialloc.optimizer import solve
from verialloc.simulation import epic_counterexample, simulate


def _report(num: int, ok: bool, detail: str) -> None:
    print(f"[{'PASS' if ok else 'FAIL'}] criterion {num}: {detail}")
    assert ok, detail


def test_criterion_1_example_reproduction():
    inst = ProblemInstance(3, 2, 1, make_uniform())
    start = time.perf_counter()
    rep = solve(inst)
    elapsed = time.perf_counter() - start
    ok = (
        abs(rep.phi_star - 0.34764) <= 1e-4
        and abs(rep.payoff - 1.223) <= 1e-3
        and abs(rep.baselines["first_best"] - 1.25) <= 1e-9
        and abs(rep.baselines["random_lottery"] - 1.0) <= 1e-12
        and elapsed < 1.0
    )
    _report(1, ok,
            f"phi*={rep.phi_star:.6f} payoff={rep.payoff:.5f} "
            f"first_best={rep.baselines['first_best']:.10f} "
            f"random={rep.baselines['random_lottery']:.13f} "
            f"runtime={elapsed:.2f}s")


def test_criterion_2_closed_form_consistency():
    inst = ProblemInstance(3, 2, 1, make_uniform())
    phi = 0.34764
    qs = np.linspace(0.0, 1.0, 1000)
    err_allo = max(abs(c_allo(float(q), inst) - (q**3 - 3 * q**2 + 2)) for q in qs)
    err_aud = max(
        abs(c_aud(float(q), phi, inst) - (-(q**3) - 3 * phi * q + 1 + 3 * phi))
        for q in qs
    )
    ok = err_allo <= 1e-12 and err_aud <= 1e-12
    _report(2, ok, f"max|c_allo-poly|={err_allo:.2e} max|c_aud-poly|={err_aud:.2e}")


def test_criterion_3_derivative_correctness():
    rng = np.random.default_rng(2718)
    h = 1e-5
    qs = np.arange(0.01, 0.9901, 0.01)
    worst = 0.0
    for _ in range(20):
        inst = random_instance(rng, n_max=50)
        phi = float(rng.uniform(0.0, inst.phi_max))
        for q in qs:
            q = float(q)
            fd = (c_allo(q + h, inst) - c_allo(q - h, inst)) / (2 * h)
            worst = max(worst, abs(d_c_allo(q, inst) - fd))
            fd = (c_aud(q + h, phi, inst) - c_aud(q - h, phi, inst)) / (2 * h)
            worst = max(worst, abs(d_c_aud(q, phi, inst) - fd))
            fd = (c_ic(q + h, phi, inst) - c_ic(q - h, phi, inst)) / (2 * h)
            worst = max(worst, abs(d_c_ic(phi, inst) - fd))
    ok = worst <= 1e-6
    _report(3, ok, f"max finite-difference error {worst:.2e} over 20 instances")


def test_criterion_4_interim_identity():
    rng = np.random.default_rng(314)
    instances = [ProblemInstance(3, 2, 1, make_uniform())]
    while len(instances) < 6:
        instances.append(random_instance(rng, n_max=8))
    worst = 0.0
    for inst in instances:
        rep = solve(inst)
        rules = merit_with_guarantee(rep.phi_star, inst, rep.partition)
        for t in np.linspace(0.0, 1.0, 101):
            t = float(t)
            lhs = interim_integral(rules, inst, t)
            rhs, _ = envelope_value(float(inst.dist.cdf(t)), rep.phi_star, inst)
            worst = max(worst, abs(lhs - rhs))
    ok = worst <= 1e-7
    _report(4, ok,
            f"max |n*int P dF - envelope| = {worst:.2e} over 6 instances x 101 points")


def test_criterion_5_bic_and_structure():
    rng = np.random.default_rng(999)
    cases = [
        (ProblemInstance(3, 2, 1, make_uniform()), None),
        (ProblemInstance(3, 2, 1, make_uniform()), 0.5),
        (ProblemInstance(3, 2, 1, make_power(2.0)), None),
    ]
    for _ in range(3):
        cases.append((random_instance(rng, n_max=10), None))
    worst_slack = 0.0
    structure_ok = True
    for inst, phi in cases:
        if phi is None:
            rep = solve(inst)
            phi = rep.phi_star
            structure_ok &= rep.partition.gamma2 < rep.partition.gamma3
            structure_ok &= rep.phi_star >= inst.phi_floor - 1e-12
            rules = merit_with_guarantee(phi, inst, rep.partition)
        else:
            rules = merit_with_guarantee(phi, inst)
        slack = bic_slack(rules)
        ts = np.linspace(0.0, 1.0, 501)
        worst_slack = max(worst_slack, max(abs(slack(float(t))) for t in ts))
        vals = np.array([rules.P(float(t)) for t in ts])
        structure_ok &= bool(np.all(np.diff(vals) >= -1e-12))
        structure_ok &= bool(np.all(vals >= phi - 1e-9))
    ok = worst_slack <= 1e-9 and structure_ok
    _report(5, ok,
            f"max |bic slack| = {worst_slack:.2e}; monotone, floored, "
            f"nonempty audit region at optima: {structure_ok}")


def test_criterion_6_simulation_fidelity():
    inst = ProblemInstance(3, 2, 1, make_uniform())
    rep = solve(inst)
    start = time.perf_counter()
    sim = simulate(inst, rep.phi_star, 1_000_000, seed=20240817)
    elapsed = time.perf_counter() - start
    ok = (
        sim.capacity_violations == 0
        and abs(sim.payoff_total - 1.223) <= 0.01
        and sim.bins_within_3se_p >= 62
        and sim.bins_within_3se_a >= 62
        and elapsed < 60.0
    )
    _report(6, ok,
            f"violations={sim.capacity_violations} payoff={sim.payoff_total:.4f} "
            f"bins3se P:{sim.bins_within_3se_p}/64 A:{sim.bins_within_3se_a}/64 "
            f"runtime={elapsed:.1f}s")


def test_criterion_7_discrete_feasibility_ground_truth():
    footnote = DiscreteInstance(
        grids=((0.0, 1.0), (0.0, 1.0)),
        masses=((0.5, 0.5), (0.5, 0.5)),
        capacity_default=0,
        capacity={(0, 1): 1, (1, 0): 2},
    )
    P = [[0.25, 0.25], [0.25, 0.5]]
    verdict = check_feasible(footnote, P)
    v = verdict.violating_set
    witness_ok = (
        not verdict.feasible
        and v.check_set == (frozenset({0}), frozenset({1}))
        and abs(v.lhs - 0.375) <= 1e-12
        and abs(v.rhs - 0.25) <= 1e-12
    )
    upper_ok = upper_set_report(footnote, P)["all_hold"]

    rng = np.random.default_rng(777)
    agree = 0
    infeasible_seen = 0
    from test_flows import random_discrete_instance

    for _ in range(20):
        inst = random_discrete_instance(rng)
        rule = [[float(np.round(rng.random(), 3)) for _ in range(s)]
                for s in inst.sizes]
        flow = check_feasible(inst, rule, want_expost=False)
        brute = brute_force_verdict(inst, rule)
        agree += flow.feasible == brute.feasible
        infeasible_seen += not flow.feasible
    ok = witness_ok and upper_ok and agree == 20 and infeasible_seen >= 3
    _report(7, ok,
            f"witness=(lo_1, hi_2) lhs=0.375 rhs=0.25: {witness_ok}; "
            f"upper sets pass: {upper_ok}; flow/brute agreement 20/20 "
            f"({infeasible_seen} infeasible)")


def test_criterion_8_constructive_realization():
    inst = ProblemInstance(3, 2, 1, make_uniform())
    rep = solve(inst)
    rules = merit_with_guarantee(rep.phi_star, inst, rep.partition)
    disc, p_avg = discretize_rules(inst, rules, 64)
    verdict = check_interim_allocation(disc, p_avg)
    assert verdict.feasible
    expost = verdict.expost
    err = max(
        float(np.max(np.abs(row - np.array(p_avg)))) for row in expost.marginals()
    )
    ok = err <= 1e-9 and expost.max_violation() <= 1e-12
    _report(8, ok,
            f"64-bin ex-post rule marginal error {err:.2e}, "
            f"per-profile violation {expost.max_violation():.1e}")


def test_criterion_9_expost_ic_failure():
    inst = ProblemInstance(3, 2, 1, make_uniform())
    rep = solve(inst)
    w = epic_counterexample(inst, rep.phi_star)
    bound = (inst.m - inst.k) / inst.m
    ok = (
        w.escape_probability_bound >= bound
        and w.truthful_allocation_prob == 0.0
        and w.agent in w.merit_winners_deviating
        and w.agent not in w.merit_winners_truthful
    )
    _report(9, ok,
            f"witness escape probability >= {w.escape_probability_bound} "
            f"(target {bound}); truthful allocation 0 at the profile")


def test_criterion_10_comparative_statics_in_k():
    payoffs = []
    for k in (1, 2, 3):
        inst = ProblemInstance(6, 4, k, make_uniform())
        payoffs.append(solve(inst).payoff)
    ok = all(b >= a - 1e-9 for a, b in zip(payoffs, payoffs[1:]))
    _report(10, ok,
            "payoff non-decreasing in k for n=6, m=4: "
            + " <= ".join(f"{p:.5f}" for p in payoffs))
