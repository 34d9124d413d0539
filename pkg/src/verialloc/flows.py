"""Exact feasibility of interim rules with profile-dependent capacities.

A finite-type instance specifies, for every profile of types t, how many
objects h(t) are available and which agents J(t) may receive one.  An
interim rule P = (P_i) is implementable by an ex-post rule iff for every
collection E = (E_1, ..., E_n) of per-agent type sets

    sum_i  sum_{tau in E_i} P_i(tau) mass_i(tau)
        <=  E[ min(|J(t) cap I(t, E)|, h(t)) ]

where I(t, E) is the set of agents whose type lies in their E_i.  The
check runs as a max-flow problem on the network

    source --(prob(t) h(t))--> profile t --(prob(t))--> (agent i, type tau)
           --(P_i(tau) mass_i(tau))--> sink          for i in J(t), tau = t_i

with all capacities scaled to exact integers, so verdicts are exact for
the quantized data: the rule is feasible iff the max flow saturates every
demand arc.  On success the flow decomposes into per-profile allocation
probabilities; on failure the source side of a min cut yields a violated
set E.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Optional, Sequence

import numpy as np

from ._maxflow import MaxFlow

DEFAULT_SCALE = 10**9
DEFAULT_MAX_PROFILES = 1_000_000
_QUANT_NUDGE = 1e-6  # absorbs float representation error before flooring


@dataclass(frozen=True, eq=False)
class DiscreteInstance:
    """Finite-type universe: per-agent grids with masses, h(t) and J(t).

    ``capacity`` and ``eligible`` are sparse overrides keyed by tuples of
    type indices; profiles not listed use ``capacity_default`` objects and
    allow every agent.
    """

    grids: tuple[tuple[float, ...], ...]
    masses: tuple[tuple[float, ...], ...]
    capacity_default: int
    capacity: dict = field(default_factory=dict)
    eligible: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.grids) != len(self.masses):
            raise ValueError("grids and masses must have one row per agent")
        if len(self.grids) < 1:
            raise ValueError("need at least one agent")
        for g, w in zip(self.grids, self.masses):
            if len(g) != len(w) or len(g) == 0:
                raise ValueError("each grid needs a matching nonempty mass row")
            if any(b <= a for a, b in zip(g, g[1:])):
                raise ValueError("grids must be strictly increasing")
            if any(x <= 0 for x in w):
                raise ValueError("masses must be positive")
            if abs(sum(w) - 1.0) > 1e-12:
                raise ValueError(f"masses must sum to 1, got {sum(w)}")
        if self.capacity_default < 0 or int(self.capacity_default) != self.capacity_default:
            raise ValueError("capacity must be a nonnegative integer")
        n = len(self.grids)
        for prof, h in self.capacity.items():
            self._check_profile_key(prof)
            if h < 0 or int(h) != h:
                raise ValueError(f"capacity override {h!r} at {prof} is not a nonnegative integer")
        for prof, agents in self.eligible.items():
            self._check_profile_key(prof)
            if not set(agents) <= set(range(n)):
                raise ValueError(f"eligibility override {agents!r} at {prof} names unknown agents")

    def _check_profile_key(self, prof) -> None:
        if len(prof) != len(self.grids):
            raise ValueError(f"profile key {prof} has wrong length")
        for j, idx in enumerate(prof):
            if not (0 <= idx < len(self.grids[j])):
                raise ValueError(f"profile key {prof} out of range for agent {j}")

    @property
    def n_agents(self) -> int:
        return len(self.grids)

    @property
    def sizes(self) -> tuple[int, ...]:
        return tuple(len(g) for g in self.grids)

    @property
    def n_profiles(self) -> int:
        return math.prod(self.sizes)

    def h(self, prof: tuple[int, ...]) -> int:
        return int(self.capacity.get(tuple(prof), self.capacity_default))

    def J(self, prof: tuple[int, ...]) -> tuple[int, ...]:
        agents = self.eligible.get(tuple(prof))
        if agents is None:
            return tuple(range(self.n_agents))
        return tuple(sorted(agents))

    def profiles(self):
        return itertools.product(*(range(s) for s in self.sizes))

    def is_symmetric(self) -> bool:
        return all(g == self.grids[0] for g in self.grids) and all(
            w == self.masses[0] for w in self.masses
        )

    @classmethod
    def symmetric(cls, n: int, grid: Sequence[float], masses: Sequence[float],
                  capacity: int, **kw) -> "DiscreteInstance":
        return cls(
            grids=tuple(tuple(float(x) for x in grid) for _ in range(n)),
            masses=tuple(tuple(float(x) for x in masses) for _ in range(n)),
            capacity_default=capacity,
            **kw,
        )

    def to_json_dict(self) -> dict:
        return {
            "grids": [list(g) for g in self.grids],
            "masses": [list(w) for w in self.masses],
            "capacity": {
                "default": self.capacity_default,
                "entries": [
                    {"profile": list(prof), "h": int(h)}
                    for prof, h in sorted(self.capacity.items())
                ],
            },
            "eligible": {
                "default": "all",
                "entries": [
                    {"profile": list(prof), "agents": sorted(agents)}
                    for prof, agents in sorted(self.eligible.items())
                ],
            },
        }

    @classmethod
    def from_json_dict(cls, data: dict) -> "DiscreteInstance":
        cap = data.get("capacity", {})
        elig = data.get("eligible", {})
        return cls(
            grids=tuple(tuple(float(x) for x in g) for g in data["grids"]),
            masses=tuple(tuple(float(x) for x in w) for w in data["masses"]),
            capacity_default=int(cap.get("default", 0)),
            capacity={
                tuple(e["profile"]): int(e["h"]) for e in cap.get("entries", [])
            },
            eligible={
                tuple(e["profile"]): frozenset(e["agents"])
                for e in elig.get("entries", [])
            },
        )

    @classmethod
    def load(cls, path) -> "DiscreteInstance":
        with open(path) as fh:
            return cls.from_json_dict(json.load(fh))

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json_dict(), fh, indent=2, sort_keys=True)


CheckSet = tuple  # tuple[frozenset[int], ...]: per-agent sets of type indices


def make_check_set(inst: DiscreteInstance, sets: Sequence[Sequence[int]]) -> CheckSet:
    if len(sets) != inst.n_agents:
        raise ValueError("need one type set per agent")
    out = []
    for j, s in enumerate(sets):
        s = frozenset(int(x) for x in s)
        if not all(0 <= x < inst.sizes[j] for x in s):
            raise ValueError(f"set {sorted(s)} out of range for agent {j}")
        out.append(s)
    return tuple(out)


@dataclass(frozen=True)
class ViolatingSet:
    check_set: CheckSet
    lhs: float
    rhs: float


@dataclass(frozen=True, eq=False)
class ExPostRule:
    """Per-profile allocation probabilities realizing an interim rule."""

    inst: DiscreteInstance
    alloc: np.ndarray  # shape (n_profiles, n_agents), row order = inst.profiles()

    def profile_index(self, prof: tuple[int, ...]) -> int:
        idx = 0
        for j, s in zip(prof, self.inst.sizes):
            idx = idx * s + j
        return idx

    def prob(self, prof: tuple[int, ...], agent: int) -> float:
        return float(self.alloc[self.profile_index(prof), agent])

    def marginals(self) -> list[np.ndarray]:
        """Interim rule induced by the ex-post rule, one array per agent."""
        inst = self.inst
        sizes = inst.sizes
        n = inst.n_agents
        mass_rows = [np.asarray(w) for w in inst.masses]
        prob = mass_rows[0]
        for w in mass_rows[1:]:
            prob = np.multiply.outer(prob, w)
        out = []
        for i in range(n):
            weighted = prob * self.alloc[:, i].reshape(sizes)
            axes = tuple(j for j in range(n) if j != i)
            out.append(weighted.sum(axis=axes) / mass_rows[i])
        return out

    def max_violation(self) -> float:
        """Largest breach of the per-profile constraints (0 for a valid rule)."""
        inst = self.inst
        worst = max(float(self.alloc.max(initial=0.0)) - 1.0,
                    -float(self.alloc.min(initial=0.0)))
        row_sums = self.alloc.sum(axis=1)
        caps = np.full(inst.n_profiles, float(inst.capacity_default))
        if inst.capacity or inst.eligible:
            for pid, prof in enumerate(inst.profiles()):
                caps[pid] = inst.h(prof)
                allowed = set(inst.J(prof))
                for i in range(inst.n_agents):
                    if i not in allowed and self.alloc[pid, i] > 0:
                        worst = max(worst, float(self.alloc[pid, i]))
        worst = max(worst, float((row_sums - caps).max(initial=0.0)))
        return worst


@dataclass(frozen=True)
class FeasibilityVerdict:
    feasible: bool
    violating_set: Optional[ViolatingSet] = None
    expost: Optional[ExPostRule] = None


# ---------------------------------------------------------------------------
# exact integer scaling
# ---------------------------------------------------------------------------

def _mass_units(mass_row: Sequence[float], scale: int) -> tuple[list[int], int]:
    units = [round(w * scale) for w in mass_row]
    if any(u <= 0 for u in units):
        raise ValueError("a mass is too small for the chosen scale")
    g = 0
    for u in units:
        g = math.gcd(g, u)
    units = [u // g for u in units]
    return units, sum(units)


def _quantize_p(value: float, scale: int) -> int:
    """Round a probability down onto the integer grid of step 1/scale.

    Flooring keeps quantized demands at or below the requested rule, so a
    rule that is exactly feasible stays feasible after quantization; the
    nudge protects values that are integers up to float representation.
    """
    if value < -1e-9 or value > 1.0 + 1e-9:
        raise ValueError(f"interim probability {value} outside [0, 1]")
    return max(0, min(scale, math.floor(value * scale + _QUANT_NUDGE)))


class _Scaled:
    """Exact integer view of an instance plus interim rule.

    All capacities share the common denominator scale * prod_j D_j.
    """

    def __init__(self, inst: DiscreteInstance, P: Sequence[Sequence[float]],
                 scale: int):
        if len(P) != inst.n_agents:
            raise ValueError("need one interim rule row per agent")
        for row, size in zip(P, inst.sizes):
            if len(row) != size:
                raise ValueError("interim rule row length must match the grid")
        self.inst = inst
        self.scale = scale
        self.units = []
        self.denoms = []
        for row in inst.masses:
            u, d = _mass_units(row, scale)
            self.units.append(u)
            self.denoms.append(d)
        self.denom_prod = math.prod(self.denoms)
        self.common = scale * self.denom_prod
        self.p_units = [[_quantize_p(p, scale) for p in row] for row in P]
        # demand for (i, tau) in common-denominator units
        self.demand = [
            [
                self.p_units[i][t] * self.units[i][t] * (self.denom_prod // self.denoms[i])
                for t in range(inst.sizes[i])
            ]
            for i in range(inst.n_agents)
        ]
        self.total_demand = sum(map(sum, self.demand))

    def weight(self, prof: tuple[int, ...]) -> int:
        w = 1
        for j, t in enumerate(prof):
            w *= self.units[j][t]
        return w

    def lhs_units(self, E: CheckSet) -> int:
        return sum(
            self.demand[i][t] for i, Ei in enumerate(E) for t in Ei
        )

    def profile_cache(self) -> list:
        """(profile, weight, h, J) rows, built once for repeated set checks."""
        cache = getattr(self, "_profile_cache", None)
        if cache is None:
            cache = [
                (prof, self.weight(prof), self.inst.h(prof), self.inst.J(prof))
                for prof in self.inst.profiles()
            ]
            self._profile_cache = cache
        return cache

    def rhs_units(self, E: CheckSet) -> int:
        total = 0
        for prof, w, cap, J in self.profile_cache():
            if not cap:
                continue
            hit = sum(1 for i in J if prof[i] in E[i])
            if hit:
                total += w * min(hit, cap)
        return total * self.scale

    def to_float(self, units: int) -> float:
        return units / self.common


def _require_enumerable(inst: DiscreteInstance, max_profiles: int) -> None:
    if inst.n_profiles > max_profiles:
        raise ValueError(
            f"instance has {inst.n_profiles} profiles, above the cap of "
            f"{max_profiles}; shrink the grids or raise max_profiles"
        )


# ---------------------------------------------------------------------------
# public checks
# ---------------------------------------------------------------------------

def border_lhs(inst: DiscreteInstance, P: Sequence[Sequence[float]],
               E: CheckSet) -> float:
    """Demand side: sum_i sum_{tau in E_i} P_i(tau) mass_i(tau)."""
    total = 0.0
    for i, Ei in enumerate(E):
        for t in Ei:
            total += float(P[i][t]) * inst.masses[i][t]
    return total


def border_rhs(inst: DiscreteInstance, E: CheckSet, *,
               max_profiles: int = DEFAULT_MAX_PROFILES) -> float:
    """Supply side: E[min(|J(t) cap I(t, E)|, h(t))] by profile enumeration."""
    _require_enumerable(inst, max_profiles)
    E = make_check_set(inst, E)
    num = 0
    units = []
    denoms = []
    for row in inst.masses:
        u, d = _mass_units(row, DEFAULT_SCALE)
        units.append(u)
        denoms.append(d)
    for prof in inst.profiles():
        hit = sum(1 for i in inst.J(prof) if prof[i] in E[i])
        cap = inst.h(prof)
        if hit and cap:
            w = 1
            for j, t in enumerate(prof):
                w *= units[j][t]
            num += w * min(hit, cap)
    return num / math.prod(denoms)


def check_feasible(inst: DiscreteInstance, P: Sequence[Sequence[float]], *,
                   scale: int = DEFAULT_SCALE,
                   max_profiles: int = DEFAULT_MAX_PROFILES,
                   want_expost: bool = True) -> FeasibilityVerdict:
    """Decide whether the interim rule P is implementable; construct or refute.

    Feasible: returns the flow decomposition as an ex-post rule whose
    marginals reproduce the quantized P exactly.  Infeasible: returns a
    violated check set extracted from a minimum cut.
    """
    _require_enumerable(inst, max_profiles)
    sc = _Scaled(inst, P, scale)
    n = inst.n_agents
    sizes = inst.sizes
    n_profiles = inst.n_profiles

    type_offset = [0] * n
    for i in range(1, n):
        type_offset[i] = type_offset[i - 1] + sizes[i - 1]
    total_types = type_offset[-1] + sizes[-1]

    source = 0
    first_profile = 1
    first_type = first_profile + n_profiles
    sink = first_type + total_types
    mf = MaxFlow(sink + 1)

    # demand arcs first: deterministic ids 2 * (type_offset[i] + tau)
    for i in range(n):
        for t in range(sizes[i]):
            mf.add_edge(first_type + type_offset[i] + t, sink, sc.demand[i][t])

    scale_int = sc.scale
    for pid, prof in enumerate(inst.profiles()):
        w = sc.weight(prof)
        h = inst.h(prof)
        mf.add_edge(source, first_profile + pid, w * h * scale_int)
        for i in inst.J(prof):
            mf.add_edge(
                first_profile + pid,
                first_type + type_offset[i] + prof[i],
                w * scale_int,
            )

    flow = mf.max_flow(source, sink)
    if flow == sc.total_demand:
        expost = None
        if want_expost:
            alloc = np.zeros((n_profiles, n))
            cursor = 2 * total_types
            for pid, prof in enumerate(inst.profiles()):
                w = sc.weight(prof)
                cursor += 2  # skip the source arc
                for i in inst.J(prof):
                    f = mf.flow_on(cursor)
                    if f:
                        alloc[pid, i] = float(Fraction(f, w * scale_int))
                    cursor += 2
            expost = ExPostRule(inst=inst, alloc=alloc)
        return FeasibilityVerdict(feasible=True, expost=expost)

    reachable = mf.reachable_from(source)
    E = tuple(
        frozenset(
            t for t in range(sizes[i])
            if not reachable[first_type + type_offset[i] + t]
        )
        for i in range(n)
    )
    lhs_units = sc.lhs_units(E)
    rhs_units = sc.rhs_units(E)
    if lhs_units <= rhs_units:
        raise RuntimeError(
            "min-cut extraction produced a non-violating set; "
            "this indicates a flow construction bug"
        )
    return FeasibilityVerdict(
        feasible=False,
        violating_set=ViolatingSet(
            check_set=E, lhs=sc.to_float(lhs_units), rhs=sc.to_float(rhs_units)
        ),
    )


def brute_force_verdict(inst: DiscreteInstance, P: Sequence[Sequence[float]], *,
                        scale: int = DEFAULT_SCALE) -> FeasibilityVerdict:
    """Exhaustive check over all 2^(sum of grid sizes) check sets.

    Exponential; intended as an oracle for desk-size instances.  Uses the
    same quantization as check_feasible so the two verdicts are comparable
    at knife-edge inputs.
    """
    if sum(inst.sizes) > 14:
        raise ValueError("brute force limited to 14 total grid points")
    sc = _Scaled(inst, P, scale)
    subsets_per_agent = [
        [frozenset(c) for r in range(s + 1) for c in itertools.combinations(range(s), r)]
        for s in inst.sizes
    ]
    worst: Optional[ViolatingSet] = None
    worst_gap = 0
    for E in itertools.product(*subsets_per_agent):
        lhs = sc.lhs_units(E)
        rhs = sc.rhs_units(E)
        if lhs > rhs and lhs - rhs > worst_gap:
            worst_gap = lhs - rhs
            worst = ViolatingSet(check_set=E, lhs=sc.to_float(lhs), rhs=sc.to_float(rhs))
    if worst is not None:
        return FeasibilityVerdict(feasible=False, violating_set=worst)
    return FeasibilityVerdict(feasible=True)


def upper_set_report(inst: DiscreteInstance, P: Sequence[Sequence[float]], *,
                     scale: int = DEFAULT_SCALE,
                     max_profiles: int = DEFAULT_MAX_PROFILES) -> dict:
    """Check only per-agent upper sets E_i = {tau : tau >= threshold_i}.

    Necessary but not sufficient when capacities depend on the profile;
    the returned record carries the tightest set so callers can show how
    close the family comes to detecting infeasibility.
    """
    _require_enumerable(inst, max_profiles)
    combos = math.prod(s + 1 for s in inst.sizes)
    if combos > 200_000:
        raise ValueError(f"{combos} upper-set combinations is above the cap")
    sc = _Scaled(inst, P, scale)
    ok = True
    worst = None  # (slack_units, ViolatingSet-like record)
    for thresholds in itertools.product(*(range(s + 1) for s in inst.sizes)):
        E = tuple(
            frozenset(range(th, s)) for th, s in zip(thresholds, inst.sizes)
        )
        lhs = sc.lhs_units(E)
        rhs = sc.rhs_units(E)
        slack = rhs - lhs
        if worst is None or slack < worst[0]:
            worst = (slack, E, lhs, rhs)
        if slack < 0:
            ok = False
    slack, E, lhs, rhs = worst
    return {
        "all_hold": ok,
        "tightest_set": E,
        "lhs": sc.to_float(lhs),
        "rhs": sc.to_float(rhs),
        "slack": sc.to_float(slack),
    }


def check_interim_allocation(inst: DiscreteInstance, P: Sequence[float], *,
                             scale: int = DEFAULT_SCALE,
                             max_profiles: int = DEFAULT_MAX_PROFILES,
                             construct: bool = True) -> FeasibilityVerdict:
    """Feasibility of a symmetric interim allocation rule under h(t) = m.

    For non-decreasing P on a symmetric instance with constant capacity and
    universal eligibility, checking threshold sets E = {tau >= e} suffices;
    the thresholds are screened exactly via a binomial count expansion and
    the flow runs only to build the ex-post rule.  Non-monotone P delegates
    to the general check.
    """
    if not inst.is_symmetric():
        raise ValueError("check_interim_allocation expects a symmetric instance")
    if inst.capacity or inst.eligible:
        raise ValueError("check_interim_allocation expects constant capacity and full eligibility")
    n = inst.n_agents
    size = inst.sizes[0]
    if len(P) > 0 and hasattr(P[0], "__len__"):
        if len(P) != n:
            raise ValueError("need one interim rule row per agent")
        rows = [list(map(float, row)) for row in P]
        if any(rows[0] != r for r in rows[1:]):
            raise ValueError("per-agent rows must agree for the symmetric check")
        p_row = rows[0]
    else:
        p_row = [float(x) for x in P]
    if len(p_row) != size:
        raise ValueError("interim rule length must match the grid")
    per_agent = [p_row] * n

    monotone = all(a <= b + 1e-12 for a, b in zip(p_row, p_row[1:]))
    if not monotone:
        return check_feasible(inst, per_agent, scale=scale,
                              max_profiles=max_profiles, want_expost=construct)

    units, denom = _mass_units(inst.masses[0], scale)
    p_units = [_quantize_p(p, scale) for p in p_row]
    m = inst.capacity_default
    # exact binomial screen over thresholds: common denominator scale * denom**n
    for e in range(size + 1):
        above = sum(units[e:])
        below = denom - above
        lhs = n * sum(p_units[t] * units[t] for t in range(e, size)) * denom ** (n - 1)
        rhs = 0
        for x in range(n + 1):
            if min(x, m) == 0:
                continue
            rhs += math.comb(n, x) * above**x * below ** (n - x) * min(x, m)
        rhs *= scale
        if lhs > rhs:
            common = scale * denom**n
            E = tuple(frozenset(range(e, size)) for _ in range(n))
            return FeasibilityVerdict(
                feasible=False,
                violating_set=ViolatingSet(
                    check_set=E, lhs=lhs / common, rhs=rhs / common
                ),
            )
    if not construct:
        return FeasibilityVerdict(feasible=True)
    verdict = _symmetric_flow_verdict(inst, p_row, scale=scale, want_expost=True)
    if not verdict.feasible:
        raise RuntimeError(
            "threshold screen passed but the flow found a violation; "
            "the monotone shortcut does not apply to this instance"
        )
    return verdict


def _symmetric_flow_verdict(inst: DiscreteInstance, p_row: Sequence[float], *,
                            scale: int, want_expost: bool) -> FeasibilityVerdict:
    """Flow check for symmetric instances on the multiset-collapsed network.

    A symmetric instance with a symmetric rule admits a symmetric ex-post
    rule (average any witness over agent permutations), so profiles that
    are permutations of each other can be merged into one node.  This cuts
    the profile count from size^n to C(size+n-1, n) and is what makes
    fine grids tractable; the expanded per-profile rule and its exact
    marginals are recovered from the collapsed flow.
    """
    n = inst.n_agents
    size = inst.sizes[0]
    units, denom = _mass_units(inst.masses[0], scale)
    p_units = [_quantize_p(p, scale) for p in p_row]
    h = inst.capacity_default

    multisets = list(itertools.combinations_with_replacement(range(size), n))
    fact = [math.factorial(i) for i in range(n + 1)]

    def weight_of(ms: tuple[int, ...]) -> int:
        # multinomial count times the product of mass numerators
        w = fact[n]
        prev = None
        run = 0
        for t in ms:
            if t == prev:
                run += 1
            else:
                w //= fact[run]
                prev, run = t, 1
            w *= units[t]
        w //= fact[run]
        return w

    source = 0
    first_ms = 1
    first_type = 1 + len(multisets)
    sink = first_type + size
    mf = MaxFlow(sink + 1)

    demand = [p_units[t] * units[t] * n * denom ** (n - 1) for t in range(size)]
    for t in range(size):
        mf.add_edge(first_type + t, sink, demand[t])

    ms_weights = []
    for mid, ms in enumerate(multisets):
        w = weight_of(ms)
        ms_weights.append(w)
        mf.add_edge(source, first_ms + mid, w * h * scale)
        for t, cnt in _run_lengths(ms):
            mf.add_edge(first_ms + mid, first_type + t, w * cnt * scale)

    flow = mf.max_flow(source, sink)
    if flow != sum(demand):
        reachable = mf.reachable_from(source)
        Ei = frozenset(t for t in range(size) if not reachable[first_type + t])
        E = tuple(Ei for _ in range(n))
        sc = _Scaled(inst, [p_row] * n, scale)
        lhs, rhs = sc.lhs_units(E), sc.rhs_units(E)
        if lhs <= rhs:
            raise RuntimeError("symmetric min-cut produced a non-violating set")
        return FeasibilityVerdict(
            feasible=False,
            violating_set=ViolatingSet(check_set=E, lhs=sc.to_float(lhs),
                                       rhs=sc.to_float(rhs)),
        )
    if not want_expost:
        return FeasibilityVerdict(feasible=True)

    # per-agent share g(type, multiset) from the collapsed flow
    share: dict[tuple[int, ...], dict[int, float]] = {}
    cursor = 2 * size
    for mid, ms in enumerate(multisets):
        w = ms_weights[mid]
        cursor += 2  # source arc
        g: dict[int, float] = {}
        for t, cnt in _run_lengths(ms):
            f = mf.flow_on(cursor)
            if f:
                g[t] = float(Fraction(f, w * cnt * scale))
            cursor += 2
        share[ms] = g

    alloc = np.zeros((inst.n_profiles, n))
    for pid, prof in enumerate(inst.profiles()):
        g = share[tuple(sorted(prof))]
        if g:
            for i, t in enumerate(prof):
                v = g.get(t)
                if v:
                    alloc[pid, i] = v
    return FeasibilityVerdict(feasible=True, expost=ExPostRule(inst=inst, alloc=alloc))


def _run_lengths(ms: tuple[int, ...]):
    prev = None
    cnt = 0
    for t in ms:
        if t == prev:
            cnt += 1
        else:
            if prev is not None:
                yield prev, cnt
            prev, cnt = t, 1
    if prev is not None:
        yield prev, cnt


def construct_expost(inst: DiscreteInstance, P: Sequence[Sequence[float]], *,
                     scale: int = DEFAULT_SCALE,
                     max_profiles: int = DEFAULT_MAX_PROFILES) -> ExPostRule:
    """Build an ex-post rule realizing P; raises if P is infeasible."""
    verdict = check_feasible(inst, P, scale=scale, max_profiles=max_profiles,
                             want_expost=True)
    if not verdict.feasible:
        v = verdict.violating_set
        raise ValueError(
            f"interim rule is infeasible: set {tuple(sorted(s) for s in v.check_set)} "
            f"demands {v.lhs:.6g} but at most {v.rhs:.6g} is deliverable"
        )
    return verdict.expost


def check_interim_audit(inst: DiscreteInstance, p_merit: np.ndarray,
                        A: Sequence[Sequence[float]], k: int, *,
                        scale: int = DEFAULT_SCALE,
                        max_profiles: int = DEFAULT_MAX_PROFILES,
                        want_expost: bool = True) -> FeasibilityVerdict:
    """Feasibility of an interim audit rule given a deterministic allocation.

    Only agents holding an object can be audited and at most k audits run
    per profile, so the audit problem is the allocation problem with
    capacity k and eligibility J(t) = {i : p_merit_i(t) = 1}.
    """
    _require_enumerable(inst, max_profiles)
    p_merit = np.asarray(p_merit, dtype=bool)
    if p_merit.shape != (inst.n_profiles, inst.n_agents):
        raise ValueError(
            f"p_merit must have shape {(inst.n_profiles, inst.n_agents)}, "
            f"got {p_merit.shape}"
        )
    eligible = {}
    for pid, prof in enumerate(inst.profiles()):
        winners = frozenset(np.flatnonzero(p_merit[pid]).tolist())
        if len(winners) < inst.n_agents:
            eligible[tuple(prof)] = winners
    derived = DiscreteInstance(
        grids=inst.grids,
        masses=inst.masses,
        capacity_default=int(k),
        eligible=eligible,
    )
    return check_feasible(derived, A, scale=scale, max_profiles=max_profiles,
                          want_expost=want_expost)


def discretize_rules(cont_inst, rules, bins: int, *,
                     offsets: bool = False) -> tuple[DiscreteInstance, list[float]]:
    """Project a continuum instance and interim rule onto a finite grid.

    Types are binned into ``bins`` equal-width cells; each cell carries its
    probability mass and is represented by its midpoint.  The discrete
    interim value on a cell is the conditional average of P over the cell
    (the cell's demand then integrates exactly), not the midpoint sample:
    midpoint sampling overstates demand wherever P is concave and falsely
    breaks feasibility at binding thresholds.

    With ``offsets`` each agent's midpoints are nudged by a distinct tiny
    amount so no two agents can ever report equal values; rank-based
    allocation rules on the grid then never see ties.
    """
    from scipy.integrate import quad as _quad

    dist = cont_inst.dist
    edges = np.linspace(0.0, 1.0, bins + 1)
    mids = 0.5 * (edges[:-1] + edges[1:])
    masses = []
    p_avg = []
    breakpoints = (
        [iv.lo for iv in rules.partition.intervals]
        if rules.partition is not None else []
    )
    for lo, hi in zip(edges[:-1], edges[1:]):
        mass = float(dist.cdf(hi)) - float(dist.cdf(lo))
        pts = sorted({lo, hi, *(b for b in breakpoints if lo < b < hi)})
        num = 0.0
        for a, b in zip(pts[:-1], pts[1:]):
            piece, _ = _quad(lambda t: rules.P(t) * dist.pdf(t), a, b,
                             epsabs=1e-13, limit=200)
            num += piece
        masses.append(mass)
        p_avg.append(num / mass)
    total = sum(masses)
    masses = [w / total for w in masses]

    n = cont_inst.n
    width = edges[1] - edges[0]
    if offsets:
        grids = tuple(
            tuple(float(t + (i + 1) * width * 1e-4) for t in mids) for i in range(n)
        )
    else:
        grids = tuple(tuple(float(t) for t in mids) for _ in range(n))
    disc = DiscreteInstance(
        grids=grids,
        masses=tuple(tuple(masses) for _ in range(n)),
        capacity_default=cont_inst.m,
    )
    return disc, p_avg


def audit_threshold_report(inst: DiscreteInstance, p_merit: np.ndarray,
                           A: Sequence[Sequence[float]], k: int,
                           aud_lo: int, aud_hi: int, *,
                           scale: int = DEFAULT_SCALE) -> dict:
    """Check audit feasibility on threshold-form sets only.

    For merit-stage allocations the binding sets have the form
    E = [g, aud_hi) union [g', size) with g at or below the audit region's
    start and g' at or past its end; this screens that family exactly and
    reports the tightest member.  The general flow check remains the
    oracle.
    """
    p_merit = np.asarray(p_merit, dtype=bool)
    sc = _Scaled(inst, A, scale)
    size_max = max(inst.sizes)
    worst = None
    for g in range(0, aud_lo + 1):
        for g_hi in range(aud_hi, size_max + 1):
            E = tuple(
                frozenset(
                    [t for t in range(g, min(aud_hi, s))]
                    + [t for t in range(g_hi, s)]
                )
                for s in inst.sizes
            )
            lhs = sc.lhs_units(E)
            rhs = 0
            for pid, prof in enumerate(inst.profiles()):
                hit = sum(
                    1 for i in range(inst.n_agents)
                    if p_merit[pid, i] and prof[i] in E[i]
                )
                if hit:
                    rhs += sc.weight(prof) * min(hit, k)
            rhs *= scale
            slack = rhs - lhs
            if worst is None or slack < worst[0]:
                worst = (slack, E, lhs, rhs)
    slack, E, lhs, rhs = worst
    return {
        "all_hold": slack >= 0,
        "tightest_set": E,
        "lhs": sc.to_float(lhs),
        "rhs": sc.to_float(rhs),
        "slack": sc.to_float(slack),
    }
