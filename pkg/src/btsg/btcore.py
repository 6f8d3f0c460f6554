"""State-space behavior-tree engine.

A tree is the tuple {f, r, dt}: a state-update map, a status map partitioning
the state space into Running/Success/Failure regions, and a tick period.
Composition via Sequence and Fallback rewrites which child's (f, r) applies
at each state, so a composite is again a plain {f, r, dt} tuple; execution is
an ordinary difference equation driven by tick().

The engine is generic over the state type. Leaf memory (latches, reference
angles) must live inside the state object itself, keeping f and r pure and
rollouts replayable.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np


class Status(enum.Enum):
    RUNNING = "Running"
    SUCCESS = "Success"
    FAILURE = "Failure"

    def __str__(self):
        return self.value


class MismatchedTick(ValueError):
    """Children of a composition must share the tick period."""


@dataclass(frozen=True)
class BehaviorTree:
    """Tuple {f, r, dt} plus a name and a resolver for the active leaf."""

    update: Callable[[Any], Any]
    status: Callable[[Any], Status]
    dt: float
    name: str = "bt"
    leaf_of: Callable[[Any], str] | None = None

    def active_leaf(self, s) -> str:
        if self.leaf_of is None:
            return self.name
        return self.leaf_of(s)


def action(name: str, update, status, dt: float) -> BehaviorTree:
    """Leaf that executes: applies ``update`` and reports ``status``."""
    return BehaviorTree(update=update, status=status, dt=dt, name=name)


def condition(name: str, predicate, dt: float) -> BehaviorTree:
    """Leaf that only checks: state passes through unchanged, status is
    Success/Failure per the predicate (conditions never return Running)."""
    return BehaviorTree(
        update=lambda s: s,
        status=lambda s: Status.SUCCESS if predicate(s) else Status.FAILURE,
        dt=dt,
        name=name,
    )


def _compose2(t1: BehaviorTree, t2: BehaviorTree, gate: Status, kind: str) -> BehaviorTree:
    if t1.dt != t2.dt:
        raise MismatchedTick(f"{kind}: tick periods differ ({t1.dt} vs {t2.dt})")

    def status(s):
        return t2.status(s) if t1.status(s) == gate else t1.status(s)

    def update(s):
        return t2.update(s) if t1.status(s) == gate else t1.update(s)

    def leaf_of(s):
        return t2.active_leaf(s) if t1.status(s) == gate else t1.active_leaf(s)

    return BehaviorTree(
        update=update,
        status=status,
        dt=t1.dt,
        name=f"{kind}({t1.name},{t2.name})",
        leaf_of=leaf_of,
    )


def sequence(*trees: BehaviorTree) -> BehaviorTree:
    """Sequence composition: child 2 acts exactly on child 1's Success region.

    The n-ary form right-folds into binary nodes, matching the identity
    Sequence(T1, Sequence(T2, T3)) = Sequence(T1, T2, T3).
    """
    if not trees:
        raise ValueError("sequence needs at least one child")
    out = trees[-1]
    for t in reversed(trees[:-1]):
        out = _compose2(t, out, Status.SUCCESS, "seq")
    return out


def fallback(*trees: BehaviorTree) -> BehaviorTree:
    """Fallback composition: child 2 acts exactly on child 1's Failure region."""
    if not trees:
        raise ValueError("fallback needs at least one child")
    out = trees[-1]
    for t in reversed(trees[:-1]):
        out = _compose2(t, out, Status.FAILURE, "fb")
    return out


def tick(tree: BehaviorTree, s):
    """One tick: returns (f(s), r(s)), status evaluated before the update."""
    st = tree.status(s)
    return tree.update(s), st


@dataclass
class ExecutionTrace:
    """Per-tick record of a rollout: state, status, active leaf at tick k.

    ``states[k]`` is the state the tree was ticked in at time ``k * dt``; the
    control that produced it is whatever the state object carries from the
    preceding transition.
    """

    dt: float
    states: list = field(default_factory=list)
    statuses: list = field(default_factory=list)
    leaves: list = field(default_factory=list)

    def append(self, s, status: Status, leaf: str):
        self.states.append(s)
        self.statuses.append(status)
        self.leaves.append(leaf)

    def __len__(self):
        return len(self.states)

    @property
    def tau(self) -> np.ndarray:
        return np.arange(len(self.states)) * self.dt

    def to_csv(self, path):
        """Write `tick,tau,<state columns>,status,active_leaf,<aux...>` rows.

        State objects must provide row_header() and as_row(); aux_header()
        and aux_row() are appended when present (the pendulum system state
        exposes its leaf memory that way).
        """
        if not self.states:
            raise ValueError("empty trace")
        first = self.states[0]
        head = list(first.row_header())
        aux = hasattr(first, "aux_header")
        aux_head = list(first.aux_header()) if aux else []
        with open(path, "w") as fh:
            fh.write("tick,tau," + ",".join(head) + ",status,active_leaf")
            if aux_head:
                fh.write("," + ",".join(aux_head))
            fh.write("\n")
            for k, (s, st, leaf) in enumerate(zip(self.states, self.statuses, self.leaves)):
                cells = ",".join(f"{v:.17g}" for v in s.as_row())
                fh.write(f"{k},{k * self.dt:.17g},{cells},{st},{leaf}")
                if aux_head:
                    fh.write("," + ",".join(f"{v:.17g}" for v in s.aux_row()))
                fh.write("\n")


class TickBudgetExhausted(RuntimeError):
    """Raised when run_to_status hits max_ticks; carries the partial trace."""

    def __init__(self, trace: ExecutionTrace):
        super().__init__(f"tick budget exhausted after {len(trace)} ticks")
        self.trace = trace


def run_to_status(tree: BehaviorTree, s0, max_ticks: int, stop) -> ExecutionTrace:
    """Tick until the root status lands in ``stop`` or the budget runs out."""
    if max_ticks <= 0:
        raise ValueError("max_ticks must be positive")
    stop = set(stop)
    trace = ExecutionTrace(dt=tree.dt)
    s = s0
    for _ in range(max_ticks):
        st = tree.status(s)
        trace.append(s, st, tree.active_leaf(s))
        if st in stop:
            return trace
        s = tree.update(s)
    raise TickBudgetExhausted(trace)


def run(tree: BehaviorTree, s0, n_ticks: int) -> ExecutionTrace:
    """Roll out a fixed number of ticks; the trace includes the final state."""
    trace = ExecutionTrace(dt=tree.dt)
    s = s0
    for _ in range(n_ticks):
        trace.append(s, tree.status(s), tree.active_leaf(s))
        s = tree.update(s)
    trace.append(s, tree.status(s), tree.active_leaf(s))
    return trace


# ---------------------------------------------------------------------------
# Monte-Carlo property checks
# ---------------------------------------------------------------------------


@dataclass
class Violation:
    sample_index: int
    tick: int
    reason: str
    trace: ExecutionTrace


@dataclass
class MonteCarloReport:
    kind: str
    n_samples: int
    violations: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.violations

    def summary(self) -> str:
        verdict = "PASS" if self.passed else f"FAIL ({len(self.violations)} violations)"
        if self.n_samples == 0:
            verdict += " [vacuous: no samples]"
        return f"{self.kind}: {self.n_samples} rollouts, {verdict}"

    def write(self, path_prefix):
        """Summary line plus one trace file per violation."""
        with open(f"{path_prefix}.txt", "w") as fh:
            fh.write(self.summary() + "\n")
            for v in self.violations:
                fh.write(f"  sample {v.sample_index} tick {v.tick}: {v.reason}\n")
        for v in self.violations:
            v.trace.to_csv(f"{path_prefix}.violation{v.sample_index}.csv")


def _sample_rollouts(tree, sampler, n_samples, rng_seed, max_ticks, until):
    """Yield (index, trace, stop_tick) rollouts with per-sample derived seeds.

    ``until(s)`` ends a rollout early (stop_tick is its tick); otherwise the
    rollout runs the full budget and stop_tick is None.
    """
    for i in range(n_samples):
        rng = np.random.default_rng((rng_seed, i))
        s = sampler(rng)
        trace = ExecutionTrace(dt=tree.dt)
        stop_tick = None
        for k in range(max_ticks + 1):
            trace.append(s, tree.status(s), tree.active_leaf(s))
            if until is not None and until(s):
                stop_tick = k
                break
            if k < max_ticks:
                s = tree.update(s)
        yield i, trace, stop_tick


def check_fts(
    tree: BehaviorTree,
    region_sampler,
    success,
    tau_bound: float,
    n_samples: int,
    rng_seed: int,
    region_contains=None,
) -> MonteCarloReport:
    """Finite-time-success falsification: every sampled start must reach the
    success set within tau_bound without leaving the region of attraction.

    Violations are data, not errors; the report carries full traces.
    """
    max_ticks = int(np.ceil(tau_bound / tree.dt))
    report = MonteCarloReport(kind="FTS", n_samples=n_samples)
    for i, trace, stop_tick in _sample_rollouts(
        tree, region_sampler, n_samples, rng_seed, max_ticks, until=success
    ):
        if region_contains is not None:
            for k, s in enumerate(trace.states):
                if not success(s) and not region_contains(s):
                    report.violations.append(
                        Violation(i, k, "left the region of attraction", trace)
                    )
                    break
            else:
                if stop_tick is None:
                    report.violations.append(
                        Violation(i, len(trace) - 1, f"no success within tau={tau_bound}", trace)
                    )
            continue
        if stop_tick is None:
            report.violations.append(
                Violation(i, len(trace) - 1, f"no success within tau={tau_bound}", trace)
            )
    return report


def check_safety(
    tree: BehaviorTree,
    init_sampler,
    obstacle,
    tau_bound: float,
    n_samples: int,
    rng_seed: int,
) -> MonteCarloReport:
    """Safety falsification: the obstacle predicate must stay false along
    every rollout from the sampled initialization set."""
    max_ticks = int(np.ceil(tau_bound / tree.dt))
    report = MonteCarloReport(kind="safety", n_samples=n_samples)
    for i, trace, stop_tick in _sample_rollouts(
        tree, init_sampler, n_samples, rng_seed, max_ticks, until=obstacle
    ):
        if stop_tick is not None:
            report.violations.append(
                Violation(i, stop_tick, "entered the obstacle region", trace)
            )
    return report
