"""Ex-post simulation of the two-stage mechanism on sampled type profiles.

Stage one (merit) is deterministic: with all reports distinct, an agent
wins an object if her type is in the supply region and among the m highest
reports, or in the audit region and among the k highest; exact ties
allocate nothing.  Stage two is a weighted lottery over agents from the
audit and incentive regions who hold no object yet; stage three audits
merit winners, always including audit-region winners and filling the
remaining capacity from supply-region winners by weighted selection.

The lottery and audit-selection weights are piecewise-constant over type
bins and are calibrated by damped stochastic fixed point so the simulated
interim probabilities hit their targets: every audit/incentive-region type
wins the lottery with probability phi, and every supply-region type is
audited with probability P(t) - phi.  Weighted draws without replacement
use Gumbel-perturbed log-weights (successive-draws semantics).

All randomness flows through counter-based Philox streams keyed by
(seed, stage, round), so a report is a pure function of its seed.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.integrate import quad

from .envelope import (
    LABEL_ALLO,
    LABEL_AUD,
    LABEL_IC,
    ProblemInstance,
    RegionPartition,
    partition,
)
from .interim import InterimRules, allocation_branch, merit_with_guarantee

_REGION_CODE = {LABEL_IC: 0, LABEL_AUD: 1, LABEL_ALLO: 2}
_CHUNK = 250_000


class CalibrationError(RuntimeError):
    """Raised when the weight fixed point fails to reach its target band."""


@dataclass(frozen=True)
class BinWeights:
    """Piecewise-constant positive weights over type bins."""

    edges: np.ndarray
    values: np.ndarray

    @classmethod
    def uniform(cls, bins: int) -> "BinWeights":
        return cls(edges=np.linspace(0.0, 1.0, bins + 1), values=np.ones(bins))

    def lookup(self, t: np.ndarray) -> np.ndarray:
        idx = np.clip(
            np.searchsorted(self.edges, t, side="right") - 1, 0, len(self.values) - 1
        )
        return self.values[idx]


@dataclass(frozen=True)
class ProfileOutcome:
    """Realized mechanism outcome at one profile of reports."""

    profile: tuple
    seed_draw: object  # randomization identity that produced this outcome
    allocated: frozenset
    audited: frozenset
    stage: tuple  # per-agent: "merit" | "lottery" | "none"


@dataclass(frozen=True, eq=False)
class SimReport:
    """Binned empirical interim rules versus their targets."""

    trials: int
    seed: int
    phi: float
    bin_edges: np.ndarray
    draws: np.ndarray
    p_target: np.ndarray
    p_hat: np.ndarray
    a_target: np.ndarray
    a_hat: np.ndarray
    merit_target: np.ndarray
    merit_hat: np.ndarray
    stderr_p: np.ndarray
    stderr_a: np.ndarray
    max_dev_p: float
    max_dev_a: float
    bins_within_3se_p: int
    bins_within_3se_a: int
    capacity_violations: int
    payoff_total: float

    @property
    def bins(self) -> int:
        return len(self.draws)

    def empirical_P(self, t: float) -> float:
        idx = min(int(np.searchsorted(self.bin_edges, t, side="right")) - 1, self.bins - 1)
        return float(self.p_hat[max(idx, 0)])

    def empirical_A(self, t: float) -> float:
        idx = min(int(np.searchsorted(self.bin_edges, t, side="right")) - 1, self.bins - 1)
        return float(self.a_hat[max(idx, 0)])

    def to_record(self) -> dict:
        return {
            "trials": self.trials,
            "seed": self.seed,
            "phi": self.phi,
            "bins": self.bins,
            "capacity_violations": self.capacity_violations,
            "payoff_total": self.payoff_total,
            "max_dev_p": self.max_dev_p,
            "max_dev_a": self.max_dev_a,
            "bins_within_3se_p": self.bins_within_3se_p,
            "bins_within_3se_a": self.bins_within_3se_a,
        }

    def to_csv(self, path) -> None:
        mids = 0.5 * (self.bin_edges[:-1] + self.bin_edges[1:])
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(
                ["t_mid", "draws", "P_target", "P_hat", "A_target", "A_hat",
                 "stderr_P", "stderr_A"]
            )
            for row in zip(mids, self.draws, self.p_target, self.p_hat,
                           self.a_target, self.a_hat, self.stderr_p, self.stderr_a):
                writer.writerow([f"{x:.12g}" for x in row])


def _philox(seed: int, stage: int, round_id: int) -> np.random.Generator:
    return np.random.Generator(
        np.random.Philox(np.random.SeedSequence([seed, stage, round_id]))
    )


def _codes_and_bounds(part: RegionPartition) -> tuple[np.ndarray, np.ndarray]:
    bounds = np.array([iv.lo for iv in part.intervals[1:]])
    codes = np.array([_REGION_CODE[iv.label] for iv in part.intervals])
    return bounds, codes


def _rank_desc(values: np.ndarray) -> np.ndarray:
    """0-based rank of each column entry when its row is sorted descending."""
    order = np.argsort(-values, axis=1, kind="stable")
    ranks = np.empty_like(order)
    width = np.arange(values.shape[1])
    np.put_along_axis(ranks, order, np.broadcast_to(width, order.shape), axis=1)
    return ranks


def _mechanism_batch(types: np.ndarray, part: RegionPartition,
                     inst: ProblemInstance, lottery_w: BinWeights,
                     audit_w: BinWeights, rng: np.random.Generator,
                     *, run_lottery: bool = True, run_audit: bool = True):
    """One vectorized pass of merit, lottery and audit over sampled profiles.

    Returns (region codes, merit, lottery, allocated, audited, tie) masks.
    """
    n_rows, n = types.shape
    m, k = inst.m, inst.k
    bounds, codes = _codes_and_bounds(part)
    reg = codes[np.searchsorted(bounds, types.ravel(), side="right")].reshape(n_rows, n)

    ranks = _rank_desc(types)
    sorted_vals = np.take_along_axis(types, np.argsort(-types, axis=1, kind="stable"), axis=1)
    tie = (np.diff(sorted_vals, axis=1) == 0).any(axis=1)

    merit = (~tie)[:, None] & (((reg == 2) & (ranks < m)) | ((reg == 1) & (ranks < k)))

    if run_lottery:
        eligible = (~tie)[:, None] & (reg <= 1) & ~merit
        take = np.minimum(m - merit.sum(axis=1), eligible.sum(axis=1))
        keys = np.where(
            eligible,
            np.log(lottery_w.lookup(types)) + rng.gumbel(size=types.shape),
            -np.inf,
        )
        lottery = eligible & (_rank_desc(keys) < take[:, None])
    else:
        lottery = np.zeros_like(merit)
    allocated = merit | lottery

    if run_audit:
        forced = merit & (reg == 1)
        n_merit = merit.sum(axis=1)
        allo_winners = merit & (reg == 2)
        akeys = np.where(
            allo_winners,
            np.log(audit_w.lookup(types)) + rng.gumbel(size=types.shape),
            -np.inf,
        )
        quota = k - forced.sum(axis=1)
        selected = allo_winners & (_rank_desc(akeys) < quota[:, None])
        audited = np.where((n_merit <= k)[:, None], merit, forced | selected)
    else:
        audited = np.zeros_like(merit)

    return reg, merit, lottery, allocated, audited, tie


# ---------------------------------------------------------------------------
# scalar operations (single profile)
# ---------------------------------------------------------------------------

def merit_allocate(profile, part: RegionPartition, inst: ProblemInstance) -> frozenset:
    """Winners of the deterministic merit stage at one profile of reports.

    An agent wins iff all reports are distinct and her report is either in
    the supply region and among the m highest, or in the audit region and
    among the k highest.  Any exact tie allocates nothing.
    """
    types = np.asarray(profile, dtype=float)[None, :]
    _, merit, _, _, _, _ = _mechanism_batch(
        types, part, inst, BinWeights.uniform(1), BinWeights.uniform(1),
        _philox(0, 3, 0), run_lottery=False, run_audit=False,
    )
    return frozenset(np.flatnonzero(merit[0]).tolist())


def lottery_allocate(profile, merit_winners, weights: BinWeights,
                     rng: np.random.Generator, part: RegionPartition,
                     inst: ProblemInstance) -> frozenset:
    """Second-stage winners: a weighted draw without replacement of the
    remaining objects among audit/incentive-region agents not yet holding
    an object.  Supply-region losers never enter."""
    types = np.asarray(profile, dtype=float)
    n = len(types)
    m = inst.m
    bounds, codes = _codes_and_bounds(part)
    reg = codes[np.searchsorted(bounds, types, side="right")]
    merit_mask = np.zeros(n, dtype=bool)
    merit_mask[list(merit_winners)] = True
    eligible = (reg <= 1) & ~merit_mask
    remaining = min(m - int(merit_mask.sum()), int(eligible.sum()))
    if remaining <= 0:
        return frozenset()
    keys = np.where(eligible, np.log(weights.lookup(types)) + rng.gumbel(size=n), -np.inf)
    winners = np.argsort(-keys, kind="stable")[:remaining]
    return frozenset(int(w) for w in winners)


def audit_select(profile, allocated, stage_labels, rng: np.random.Generator,
                 part: RegionPartition, inst: ProblemInstance,
                 weights: Optional[BinWeights] = None) -> frozenset:
    """Choose whom to verify among this profile's merit winners.

    All merit winners are audited when they fit the capacity k; otherwise
    every audit-region winner is audited (they are among the k highest, so
    any excess is in the supply region) and the remaining slots go to
    supply-region winners by weighted draw.  Lottery winners are never
    audited: their truthfulness has no allocation consequence.
    """
    if weights is None:
        weights = BinWeights.uniform(1)
    types = np.asarray(profile, dtype=float)
    n = len(types)
    k = inst.k
    merit_mask = np.zeros(n, dtype=bool)
    for i in range(n):
        if stage_labels[i] == "merit":
            merit_mask[i] = True
    if not merit_mask.any():
        return frozenset()
    bounds, codes = _codes_and_bounds(part)
    reg = codes[np.searchsorted(bounds, types, side="right")]
    if merit_mask.sum() <= k:
        return frozenset(np.flatnonzero(merit_mask).tolist())
    forced = merit_mask & (reg == 1)
    pool = merit_mask & (reg == 2)
    quota = k - int(forced.sum())
    keys = np.where(pool, np.log(weights.lookup(types)) + rng.gumbel(size=n), -np.inf)
    chosen = np.argsort(-keys, kind="stable")[:quota] if quota > 0 else []
    out = set(np.flatnonzero(forced).tolist())
    out.update(int(c) for c in chosen)
    return frozenset(out)


def run_profile(profile, part: RegionPartition, inst: ProblemInstance,
                lottery_w: BinWeights, audit_w: BinWeights,
                rng: np.random.Generator,
                seed_draw: object = None) -> ProfileOutcome:
    """Full mechanism pass at a single profile."""
    types = np.asarray(profile, dtype=float)[None, :]
    _, merit, lottery, allocated, audited, _ = _mechanism_batch(
        types, part, inst, lottery_w, audit_w, rng
    )
    stage = tuple(
        "merit" if merit[0, i] else ("lottery" if lottery[0, i] else "none")
        for i in range(types.shape[1])
    )
    return ProfileOutcome(
        profile=tuple(float(t) for t in profile),
        seed_draw=seed_draw,
        allocated=frozenset(np.flatnonzero(allocated[0]).tolist()),
        audited=frozenset(np.flatnonzero(audited[0]).tolist()),
        stage=stage,
    )


# ---------------------------------------------------------------------------
# targets
# ---------------------------------------------------------------------------

def _bin_average(f, inst: ProblemInstance, edges: np.ndarray,
                 breakpoints) -> np.ndarray:
    """Per-bin conditional mean of f under the type distribution."""
    dist = inst.dist
    out = np.empty(len(edges) - 1)
    brk = sorted(b for b in breakpoints if 0.0 < b < 1.0)
    for j, (lo, hi) in enumerate(zip(edges[:-1], edges[1:])):
        mass = float(dist.cdf(hi)) - float(dist.cdf(lo))
        pts = sorted({lo, hi, *(b for b in brk if lo < b < hi)})
        num = 0.0
        for a, b in zip(pts[:-1], pts[1:]):
            piece, _ = quad(lambda t: f(t) * dist.pdf(t), a, b, epsabs=1e-12, limit=200)
            num += piece
        out[j] = num / mass if mass > 0 else np.nan
    return out


def bin_targets(inst: ProblemInstance, rules: InterimRules,
                edges: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Bin-averaged targets for P, A and the merit stage alone.

    Bin averages (not midpoint samples) are the correct comparison for
    binned empirical frequencies.
    """
    part = rules.partition
    breakpoints = [iv.lo for iv in part.intervals]
    p_t = _bin_average(rules.P, inst, edges, breakpoints)
    a_t = p_t - rules.phi

    def merit_interim(t: float) -> float:
        label = part.region_of(t)
        if label == LABEL_IC:
            return 0.0
        p = allocation_branch(label, t, part.phi, inst)
        return p - part.phi if label == LABEL_AUD else p

    m_t = _bin_average(merit_interim, inst, edges, breakpoints)
    return p_t, a_t, m_t


# ---------------------------------------------------------------------------
# calibration
# ---------------------------------------------------------------------------

def _sample_types(inst: ProblemInstance, rows: int, rng: np.random.Generator) -> np.ndarray:
    u = rng.random((rows, inst.n))
    return np.asarray(inst.dist.quantile(u), dtype=float)


def _bin_index(types: np.ndarray, bins: int) -> np.ndarray:
    return np.minimum((types * bins).astype(np.int64), bins - 1)


def calibrate_lottery(inst: ProblemInstance, part: RegionPartition, *,
                      trials: int = 200_000, seed: int = 0, bins: int = 64,
                      max_rounds: int = 100, damping: float = 0.5,
                      polish_trials: Optional[int] = None,
                      polish_rounds: int = 3) -> BinWeights:
    """Fit lottery weights so each audit/incentive-region type wins with
    probability phi.

    Damped multiplicative fixed point: w <- w * (phi / empirical)^damping
    per bin, iterated until every bin deviation is under two standard
    errors, then polished with lower damping at a larger sample and the
    log-weights of the polish rounds averaged.  When the audit region is
    empty every eligible type survives the merit stage with the same
    probability, so the uniform start is already a fixed point and the
    first round converges.
    """
    if trials < 1:
        raise ValueError("calibration needs at least one trial")
    phi = part.phi
    edges = np.linspace(0.0, 1.0, bins + 1)
    w = np.ones(bins)
    audit_w = BinWeights.uniform(bins)

    def measure(weights: np.ndarray, rows: int, rng) -> tuple[np.ndarray, np.ndarray]:
        wins = np.zeros(bins)
        draws = np.zeros(bins)
        done = 0
        while done < rows:
            block = min(_CHUNK, rows - done)
            types = _sample_types(inst, block, rng)
            reg, _, lottery, _, _, _ = _mechanism_batch(
                types, part, inst, BinWeights(edges, weights), audit_w, rng,
                run_audit=False,
            )
            idx = _bin_index(types, bins).ravel()
            in_pool = (reg <= 1).ravel()
            wins += np.bincount(idx[lottery.ravel()], minlength=bins)
            draws += np.bincount(idx[in_pool], minlength=bins)
            done += block
        return wins, draws

    def deviations(wins, draws):
        with np.errstate(invalid="ignore", divide="ignore"):
            emp = wins / draws
            se = np.sqrt(phi * (1.0 - phi) / draws)
            dev = np.abs(emp - phi) / se
        return emp, dev

    converged = False
    for rnd in range(max_rounds):
        rng = _philox(seed, 0, rnd)
        wins, draws = measure(w, trials, rng)
        active = draws > 0
        emp, dev = deviations(wins, draws)
        if np.nanmax(np.where(active, dev, 0.0)) < 2.0:
            converged = True
            break
        ratio = np.where(active & (wins > 0), phi / np.where(wins > 0, emp, 1.0), 1.0)
        w = w * np.clip(ratio, 0.25, 4.0) ** damping
        w = np.clip(w / np.exp(np.mean(np.log(w[active]))), 1e-6, 1e6)
    if not converged:
        raise CalibrationError(
            f"lottery calibration did not reach the 2-standard-error band in "
            f"{max_rounds} rounds (worst deviation {np.nanmax(dev):.2f} se)"
        )

    if polish_trials and polish_rounds:
        logs = []
        for rnd in range(polish_rounds):
            rng = _philox(seed, 0, max_rounds + rnd)
            wins, draws = measure(w, polish_trials, rng)
            active = draws > 0
            emp, _ = deviations(wins, draws)
            ratio = np.where(active & (wins > 0), phi / np.where(wins > 0, emp, 1.0), 1.0)
            w = w * np.clip(ratio, 0.5, 2.0) ** 0.3
            logs.append(np.log(w))
        w = np.exp(np.mean(logs, axis=0))
    return BinWeights(edges=edges, values=w)


def calibrate_audit(inst: ProblemInstance, part: RegionPartition,
                    rules: InterimRules, *,
                    trials: int = 200_000, seed: int = 0, bins: int = 64,
                    max_rounds: int = 100, damping: float = 0.5,
                    polish_trials: Optional[int] = None,
                    polish_rounds: int = 3) -> BinWeights:
    """Fit audit-selection weights so every supply-region type is audited
    with probability P(t) - phi.

    Audit-region winners are audited unconditionally, which already matches
    their target; the weights only steer the choice among supply-region
    winners when more than k agents won the merit stage.
    """
    if trials < 1:
        raise ValueError("calibration needs at least one trial")
    edges = np.linspace(0.0, 1.0, bins + 1)
    breakpoints = [iv.lo for iv in part.intervals]

    def allo_target(t: float) -> float:
        if part.region_of(t) == LABEL_ALLO:
            return allocation_branch(LABEL_ALLO, t, part.phi, inst) - part.phi
        return 0.0

    # conditional target: audited probability given an allo-region draw
    num = _bin_average(allo_target, inst, edges, breakpoints)
    ind = _bin_average(lambda t: 1.0 if part.region_of(t) == LABEL_ALLO else 0.0,
                       inst, edges, breakpoints)
    with np.errstate(invalid="ignore", divide="ignore"):
        target = np.where(ind > 0, num / np.where(ind > 0, ind, 1.0), np.nan)

    v = np.ones(bins)
    lottery_w = BinWeights.uniform(bins)

    def measure(weights: np.ndarray, rows: int, rng):
        audits = np.zeros(bins)
        draws = np.zeros(bins)
        done = 0
        while done < rows:
            block = min(_CHUNK, rows - done)
            types = _sample_types(inst, block, rng)
            reg, _, _, _, audited, _ = _mechanism_batch(
                types, part, inst, lottery_w, BinWeights(edges, weights), rng,
                run_lottery=False,
            )
            idx = _bin_index(types, bins).ravel()
            in_allo = (reg == 2).ravel()
            audits += np.bincount(idx[(audited & (reg == 2)).ravel()], minlength=bins)
            draws += np.bincount(idx[in_allo], minlength=bins)
            done += block
        return audits, draws

    def deviations(audits, draws):
        with np.errstate(invalid="ignore", divide="ignore"):
            emp = audits / draws
            se = np.sqrt(np.clip(target * (1.0 - target), 1e-12, None) / draws)
            dev = np.abs(emp - target) / se
        return emp, dev

    converged = False
    for rnd in range(max_rounds):
        rng = _philox(seed, 1, rnd)
        audits, draws = measure(v, trials, rng)
        active = (draws > 0) & np.isfinite(target)
        emp, dev = deviations(audits, draws)
        if not active.any() or np.nanmax(np.where(active, dev, 0.0)) < 2.0:
            converged = True
            break
        with np.errstate(invalid="ignore", divide="ignore"):
            ratio = np.where(active & (audits > 0), target / np.where(audits > 0, emp, 1.0), 1.0)
        v = v * np.clip(np.nan_to_num(ratio, nan=1.0), 0.25, 4.0) ** damping
        v = np.clip(v / np.exp(np.mean(np.log(v[active]))) if active.any() else v, 1e-6, 1e6)
    if not converged:
        raise CalibrationError(
            f"audit calibration did not reach the 2-standard-error band in "
            f"{max_rounds} rounds (worst deviation {np.nanmax(dev):.2f} se); "
            "check that the target is above the forced-audit floor"
        )

    if polish_trials and polish_rounds and np.isfinite(target).any():
        logs = []
        for rnd in range(polish_rounds):
            rng = _philox(seed, 1, max_rounds + rnd)
            audits, draws = measure(v, polish_trials, rng)
            active = (draws > 0) & np.isfinite(target)
            emp, _ = deviations(audits, draws)
            with np.errstate(invalid="ignore", divide="ignore"):
                ratio = np.where(active & (audits > 0), target / np.where(audits > 0, emp, 1.0), 1.0)
            v = v * np.clip(np.nan_to_num(ratio, nan=1.0), 0.5, 2.0) ** 0.3
            logs.append(np.log(v))
        v = np.exp(np.mean(logs, axis=0))
    return BinWeights(edges=edges, values=v)


# ---------------------------------------------------------------------------
# main entry points
# ---------------------------------------------------------------------------

def simulate(inst: ProblemInstance, phi: float, trials: int, seed: int, *,
             bins: int = 64,
             lottery_weights: Optional[BinWeights] = None,
             audit_weights: Optional[BinWeights] = None,
             calibration_trials: Optional[int] = None) -> SimReport:
    """Run the full mechanism on ``trials`` iid profiles and compare the
    binned empirical interim rules against their targets.

    Weights not supplied are calibrated first (reproducibly from the same
    seed).  Identical (inst, phi, trials, seed, bins) inputs give a
    bit-identical report.
    """
    if trials < 0:
        raise ValueError("trials must be nonnegative")
    part = partition(phi, inst)
    rules = merit_with_guarantee(phi, inst, part)
    edges = np.linspace(0.0, 1.0, bins + 1)
    p_target, a_target, m_target = bin_targets(inst, rules, edges)

    if trials == 0:
        zeros = np.zeros(bins)
        return SimReport(
            trials=0, seed=seed, phi=part.phi, bin_edges=edges,
            draws=zeros, p_target=p_target, p_hat=zeros.copy(),
            a_target=a_target, a_hat=zeros.copy(),
            merit_target=m_target, merit_hat=zeros.copy(),
            stderr_p=np.full(bins, np.nan), stderr_a=np.full(bins, np.nan),
            max_dev_p=0.0, max_dev_a=0.0,
            bins_within_3se_p=bins, bins_within_3se_a=bins,
            capacity_violations=0, payoff_total=0.0,
        )

    cal_rows = calibration_trials or max(100_000, trials // 5)
    polish = max(cal_rows, trials // 2)
    if lottery_weights is None:
        lottery_weights = calibrate_lottery(
            inst, part, trials=cal_rows, seed=seed, bins=bins,
            polish_trials=polish,
        )
    if audit_weights is None:
        audit_weights = calibrate_audit(
            inst, part, rules, trials=cal_rows, seed=seed, bins=bins,
            polish_trials=polish,
        )

    draws = np.zeros(bins)
    alloc_hits = np.zeros(bins)
    audit_hits = np.zeros(bins)
    merit_hits = np.zeros(bins)
    violations = 0
    payoff_sum = 0.0

    done = 0
    chunk_id = 0
    while done < trials:
        block = min(_CHUNK, trials - done)
        rng = _philox(seed, 2, chunk_id)
        types = _sample_types(inst, block, rng)
        reg, merit, lottery, allocated, audited, tie = _mechanism_batch(
            types, part, inst, lottery_weights, audit_weights, rng
        )
        idx = _bin_index(types, bins).ravel()
        draws += np.bincount(idx, minlength=bins)
        alloc_hits += np.bincount(idx[allocated.ravel()], minlength=bins)
        audit_hits += np.bincount(idx[audited.ravel()], minlength=bins)
        merit_hits += np.bincount(idx[merit.ravel()], minlength=bins)
        payoff_sum += float((types * allocated).sum())
        over_alloc = allocated.sum(axis=1) > inst.m
        over_audit = audited.sum(axis=1) > inst.k
        orphan = (audited & ~allocated).any(axis=1)
        violations += int((over_alloc | over_audit | orphan).sum())
        done += block
        chunk_id += 1

    with np.errstate(invalid="ignore", divide="ignore"):
        p_hat = np.where(draws > 0, alloc_hits / draws, 0.0)
        a_hat = np.where(draws > 0, audit_hits / draws, 0.0)
        merit_hat = np.where(draws > 0, merit_hits / draws, 0.0)
        stderr_p = np.sqrt(np.clip(p_target * (1 - p_target), 1e-12, None) / draws)
        stderr_a = np.sqrt(np.clip(a_target * (1 - a_target), 1e-12, None) / draws)
        dev_p = np.abs(p_hat - p_target) / stderr_p
        dev_a = np.abs(a_hat - a_target) / stderr_a
    dev_p = np.where(draws > 0, dev_p, 0.0)
    dev_a = np.where(draws > 0, dev_a, 0.0)

    return SimReport(
        trials=trials, seed=seed, phi=part.phi, bin_edges=edges,
        draws=draws, p_target=p_target, p_hat=p_hat,
        a_target=a_target, a_hat=a_hat,
        merit_target=m_target, merit_hat=merit_hat,
        stderr_p=stderr_p, stderr_a=stderr_a,
        max_dev_p=float(np.max(dev_p)), max_dev_a=float(np.max(dev_a)),
        bins_within_3se_p=int(np.sum(dev_p <= 3.0)),
        bins_within_3se_a=int(np.sum(dev_a <= 3.0)),
        capacity_violations=violations,
        payoff_total=payoff_sum / trials,
    )


@dataclass(frozen=True)
class EpicWitness:
    """A profile showing that truthfulness fails ex post.

    At ``profile`` the deviator gets nothing by reporting truthfully (all
    objects go to higher supply-region reports and none remain for the
    lottery), while reporting ``deviation_report`` joins the merit winners;
    with at most k of the m winners audited, the lie escapes detection with
    probability at least (m-k)/m under any size-k selection drawn evenly
    over winners.
    """

    profile: tuple
    agent: int
    truthful_report: float
    deviation_report: float
    truthful_allocation_prob: float
    merit_winners_truthful: frozenset
    merit_winners_deviating: frozenset
    escape_probability_bound: float
    gain_bound: float


def epic_counterexample(inst: ProblemInstance, phi: float) -> EpicWitness:
    """Construct an explicit failure of ex-post incentive compatibility."""
    if inst.n < inst.m + 1:
        raise ValueError("witness construction needs at least m+1 agents")
    part = partition(phi, inst)
    allo_intervals = [iv for iv in part.intervals if iv.label == LABEL_ALLO
                      and iv.hi - iv.lo > 1e-6]
    if not allo_intervals:
        raise ValueError(
            f"no supply region with interior at phi={phi}; "
            "the witness needs room for m distinct high reports"
        )
    top = allo_intervals[-1]
    n, m = inst.n, inst.m

    others = [top.lo + (top.hi - top.lo) * (j + 1) / (m + 1) for j in range(m)]
    low_cap = part.intervals[0].hi
    low_slots = [low_cap * (j + 1) / (n - m + 1) for j in range(n - m)]
    deviator_type = low_slots[-1]
    fillers = low_slots[:-1]

    profile = [deviator_type] + others + fillers
    winners = merit_allocate(profile, part, inst)
    if winners != frozenset(range(1, m + 1)):
        raise RuntimeError(f"witness construction failed: winners {sorted(winners)}")

    deviation = max(others) + (top.hi - max(others)) / 2.0
    deviated = [deviation] + others + fillers
    winners_dev = merit_allocate(deviated, part, inst)
    if 0 not in winners_dev or len(winners_dev) != m:
        raise RuntimeError("deviation did not join the merit winners as expected")

    escape = (m - inst.k) / m
    return EpicWitness(
        profile=tuple(profile),
        agent=0,
        truthful_report=deviator_type,
        deviation_report=deviation,
        truthful_allocation_prob=0.0,
        merit_winners_truthful=winners,
        merit_winners_deviating=winners_dev,
        escape_probability_bound=escape,
        gain_bound=escape,
    )
