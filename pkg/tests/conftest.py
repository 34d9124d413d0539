import numpy as np
import pytest

from verialloc.distributions import make_uniform
from verialloc.envelope import (
    LABEL_ALLO,
    LABEL_AUD,
    ProblemInstance,
    RegionPartition,
)
from verialloc.flows import DiscreteInstance

# the three-agent, two-object, one-audit instance with uniform types used
# throughout; its constraint curves have closed polynomial forms
PHI_REF = 0.34764          # reference optimum, quoted to 5 decimals
PAYOFF_REF = 1.223
FIRST_BEST_REF = 1.25
RANDOM_REF = 1.0


@pytest.fixture(scope="session")
def uniform():
    return make_uniform()


@pytest.fixture(scope="session")
def ex_inst(uniform):
    return ProblemInstance(3, 2, 1, uniform)


@pytest.fixture(scope="session")
def ex_solved(ex_inst):
    from verialloc.optimizer import solve

    return solve(ex_inst)


def gamma1_closed(phi: float) -> float:
    """ic/aud crossing for the reference instance: (3 phi - 1)^(1/3)."""
    return (3 * phi - 1) ** (1 / 3)


def gamma3_closed(phi: float) -> float:
    """Interior allo/aud crossing: (1 + sqrt(9 - 24 phi)) / 4."""
    return (1 + np.sqrt(9 - 24 * phi)) / 4


def random_instance(rng: np.random.Generator, n_max: int = 50) -> ProblemInstance:
    n = int(rng.integers(3, n_max + 1))
    m = int(rng.integers(2, n))
    k = int(rng.integers(1, m))
    return ProblemInstance(n, m, k, make_uniform())


def merit_rule_on_grid(disc: DiscreteInstance, labels, m: int, k: int) -> np.ndarray:
    """Deterministic merit allocation on every grid profile.

    ``labels`` gives each base bin's region; grids must be tie-free (use
    per-agent offsets).  Winners: supply-region types among the m highest
    reports, audit-region types among the k highest.
    """
    n = disc.n_agents
    p_merit = np.zeros((disc.n_profiles, n), dtype=bool)
    for pid, prof in enumerate(disc.profiles()):
        vals = [disc.grids[i][prof[i]] for i in range(n)]
        assert len(set(vals)) == n, "grids must be tie-free"
        order = sorted(range(n), key=lambda i: -vals[i])
        rank = {i: r for r, i in enumerate(order)}
        for i in range(n):
            lab = labels[prof[i]]
            if lab == LABEL_ALLO and rank[i] < m:
                p_merit[pid, i] = True
            elif lab == LABEL_AUD and rank[i] < k:
                p_merit[pid, i] = True
    return p_merit


def snapped_discretization(inst: ProblemInstance, part: RegionPartition,
                           bins: int) -> tuple[DiscreteInstance, list]:
    """Uniform-width bins with edges snapped onto the region cutoffs.

    Region boundaries then coincide with bin edges, so every bin lies in
    exactly one region; per-agent offsets keep profiles tie-free.
    """
    cuts = [part.gamma1, part.gamma3]
    width = 1.0 / bins
    edges = [e for e in np.linspace(0.0, 1.0, bins + 1)
             if all(abs(e - c) > 0.45 * width for c in cuts)]
    edges = np.array(sorted(set(edges) | {c for c in cuts if 0 < c < 1}))
    mids = 0.5 * (edges[:-1] + edges[1:])
    masses = [float(inst.dist.cdf(b)) - float(inst.dist.cdf(a))
              for a, b in zip(edges[:-1], edges[1:])]
    total = sum(masses)
    masses = [w / total for w in masses]
    labels = [part.region_of(float(t)) for t in mids]
    grids = tuple(
        tuple(float(t + (i + 1) * 1e-7) for t in mids) for i in range(inst.n)
    )
    disc = DiscreteInstance(
        grids=grids,
        masses=tuple(tuple(masses) for _ in range(inst.n)),
        capacity_default=inst.m,
    )
    return disc, labels
