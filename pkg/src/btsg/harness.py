"""Command-line entry point: database generation, policy training, scenario
simulation, the four-controller benchmark, and certification runs.

Subcommands: gen-db, train, simulate, bench, certify. Exit status 0 on
success, 1 on domain errors, 2 on usage errors. Every command is
deterministic given its configuration and seed.
"""

from __future__ import annotations

import argparse
import hashlib
import sys
from dataclasses import dataclass, replace

import numpy as np

from . import assembly, btcore, mlp, trajopt
from .assembly import Bt123Config, ConfigInvalid, SystemState, initial_state, load_config
from .btcore import ExecutionTrace, Status, action
from .controllers import goal_distance, model_based_rollout, model_based_tick, nn_control
from .dynamics import step_euler

CONTROLLER_CHOICES = ("optimal-replay", "nn", "model-based", "bt123")


@dataclass
class Scenario:
    s0: np.ndarray
    controller: str
    ticks: int

    def __post_init__(self):
        if self.ticks <= 0:
            raise ValueError("tick budget must be positive")
        if self.controller not in CONTROLLER_CHOICES:
            raise ValueError(f"unknown controller {self.controller!r}")
        self.s0 = np.asarray(self.s0, dtype=float).reshape(4)


# ---------------------------------------------------------------------------
# Metrics. Both are recomputable from a written trace file alone.
# ---------------------------------------------------------------------------


def trace_impulse(controls, dt) -> float:
    """Sum |u_k| dt over the applied controls of a trace (NaN entries are the
    initial placeholder and are skipped)."""
    u = np.asarray(controls, dtype=float)
    return float(np.nansum(np.abs(u)) * dt)


def convergence_time(tau, states, eps) -> float | None:
    """First time at which the state enters the goal box and never leaves it
    again within the trace; None if the trace never settles."""
    dist = goal_distance(np.asarray(states, dtype=float))
    outside = np.nonzero(dist >= eps)[0]
    if len(outside) == 0:
        return float(tau[0])
    if outside[-1] == len(dist) - 1:
        return None
    return float(tau[outside[-1] + 1])


def trace_arrays(trace: ExecutionTrace):
    """(tau, states, controls) arrays from a SystemState trace."""
    states = np.stack([st.s for st in trace.states])
    controls = np.array([st.u for st in trace.states])
    return trace.tau, states, controls


# ---------------------------------------------------------------------------
# Single-controller trees (so every simulation goes through the same engine
# and produces the same trace format).
# ---------------------------------------------------------------------------


def policy_tree(cfg: Bt123Config, policy) -> btcore.BehaviorTree:
    def update(st: SystemState) -> SystemState:
        u, _ = nn_control(st.s, policy, cfg.u_max)
        return replace(st, s=step_euler(st.s, u, cfg.dt), tau=st.tau + cfg.dt, u=u)

    return action("nn_policy", update, lambda st: Status.RUNNING, cfg.dt)


def model_based_tree(cfg: Bt123Config) -> btcore.BehaviorTree:
    def update(st: SystemState) -> SystemState:
        u, mem = model_based_tick(st.s, st.mb, cfg.gains, cfg.u_max)
        return replace(st, s=step_euler(st.s, u, cfg.dt), tau=st.tau + cfg.dt, mb=mem, u=u)

    return action("model_based", update, lambda st: Status.RUNNING, cfg.dt)


def run_until_goal(tree, s0_state: SystemState, max_ticks: int, eps: float):
    """Tick until the goal box is entered or the budget runs out.

    Returns (trace, reached). The trace always contains the terminal state.
    """
    trace = ExecutionTrace(dt=tree.dt)
    s = s0_state
    reached = False
    for _ in range(max_ticks):
        trace.append(s, tree.status(s), tree.active_leaf(s))
        if goal_distance(s.s) < eps:
            reached = True
            break
        s = tree.update(s)
    else:
        trace.append(s, tree.status(s), tree.active_leaf(s))
    return trace, reached


def replay_trace(nominal: trajopt.OptimalTrajectory, cfg: Bt123Config, max_ticks=None) -> ExecutionTrace:
    """Resample the stored optimal solution onto the tick grid as a trace."""
    stride = cfg.dt / (nominal.tau[1] - nominal.tau[0])
    stride_i = int(round(stride))
    if abs(stride - stride_i) > 1e-9 or stride_i < 1:
        raise ValueError("tick period must be an integer multiple of the solver substep")
    sel = np.arange(0, nominal.n_samples, stride_i)
    trace = ExecutionTrace(dt=cfg.dt)
    for j, i in enumerate(sel):
        if max_ticks is not None and j > max_ticks:
            break
        u_in = float(nominal.controls[sel[j - 1]]) if j > 0 else float("nan")
        st = SystemState(s=nominal.states[i].copy(), tau=float(nominal.tau[i]), u=u_in)
        trace.append(st, Status.RUNNING, "optimal_replay")
    return trace


def simulate_scenario(scenario: Scenario, cfg: Bt123Config, policy=None, nominal=None):
    """Roll out one scenario; returns (trace, reached_goal)."""
    if scenario.controller == "optimal-replay":
        if nominal is None:
            raise ValueError("optimal-replay needs the solved nominal trajectory")
        trace = replay_trace(nominal, cfg, max_ticks=scenario.ticks)
        return trace, goal_distance(trace.states[-1].s) < cfg.eps_goal
    if scenario.controller == "nn":
        tree = policy_tree(cfg, policy)
    elif scenario.controller == "model-based":
        tree = model_based_tree(cfg)
    else:
        tree = assembly.build_bt123(cfg, policy)
    return run_until_goal(tree, initial_state(scenario.s0), scenario.ticks, cfg.eps_goal)


def write_plot_data(trace: ExecutionTrace, path):
    """States over time plus cart/pole-tip positions for external plotting."""
    with open(path, "w") as fh:
        fh.write("tau,x,v,theta,omega,u,cart_x,cart_y,tip_x,tip_y\n")
        for k, st in enumerate(trace.states):
            x, v, th, om = st.s
            fh.write(
                f"{k * trace.dt:.17g},{x:.17g},{v:.17g},{th:.17g},{om:.17g},{st.u:.17g},"
                f"{x:.17g},0,{x + np.sin(th):.17g},{np.cos(th):.17g}\n"
            )


# ---------------------------------------------------------------------------
# Benchmark
# ---------------------------------------------------------------------------

BENCH_BUDGETS = {"optimal-replay": None, "nn": 1200, "bt123": 3000, "model-based": 120_000}


@dataclass
class BenchmarkRow:
    label: str
    convergence_times: list
    impulses: list

    @property
    def avg_convergence_time(self) -> float:
        return float(np.mean(self.convergence_times))

    @property
    def avg_impulse(self) -> float:
        return float(np.mean(self.impulses))


def _jitter(rng, scale=0.01):
    return rng.uniform(-scale, scale, size=4)


def run_benchmark(cfg: Bt123Config, policy, nominal, n_runs: int, seed: int, jitter=0.01):
    """Swing-up performance of the four controllers from the nominal start.

    Each run jitters the start uniformly by +-jitter per component (seeded);
    run index -1 is the unjittered nominal start, reported separately and not
    averaged.
    """
    s0_nom = np.array([0.0, 0.0, np.pi, 0.0])
    rows = []
    for row_idx, label in enumerate(CONTROLLER_CHOICES):
        cts, imps = [], []
        runs = []
        for run in range(-1, n_runs):
            if run < 0:
                s0 = s0_nom.copy()
            else:
                rng = np.random.default_rng((seed, row_idx, run))
                s0 = s0_nom + _jitter(rng, jitter)
            runs.append(s0)
        if label == "model-based":
            starts = np.stack(runs)
            budget = BENCH_BUDGETS[label]
            _, _, _, impulse, stay = model_based_rollout(
                starts, cfg.gains, cfg.u_max, cfg.dt, budget,
                eps_goal=cfg.eps_goal, collect_metrics=True,
            )
            ct_list = [None if np.isnan(t) else float(t) for t in stay]
            imp_list = [float(v) for v in impulse]
        else:
            ct_list, imp_list = [], []
            for s0 in runs:
                if label == "optimal-replay":
                    # replay is of the unperturbed solution; jitter only
                    # shifts the initial sample, consistent with open loop
                    trace = replay_trace(nominal, cfg)
                    if not np.allclose(s0, s0_nom):
                        first = trace.states[0]
                        trace.states[0] = replace(first, s=s0.copy())
                    tau, states, controls = trace_arrays(trace)
                else:
                    scenario = Scenario(s0=s0, controller=label, ticks=BENCH_BUDGETS[label])
                    trace, _ = simulate_scenario(scenario, cfg, policy=policy, nominal=nominal)
                    tau, states, controls = trace_arrays(trace)
                ct_list.append(convergence_time(tau, states, cfg.eps_goal))
                imp_list.append(trace_impulse(controls, cfg.dt))
        rows.append((label, ct_list, imp_list))

    out = []
    for label, ct_list, imp_list in rows:
        out.append(
            BenchmarkRow(
                label=label,
                convergence_times=ct_list[1:],
                impulses=imp_list[1:],
            )
        )
        out[-1].nominal_ct = ct_list[0]
        out[-1].nominal_impulse = imp_list[0]
    return out


def write_benchmark_csv(rows, path, n_runs):
    with open(path, "w") as fh:
        fh.write("controller,run,convergence_time,impulse\n")
        for row in rows:
            fh.write(
                f"{row.label},nominal,{_fmt_ct(row.nominal_ct)},{row.nominal_impulse:.17g}\n"
            )
            for i, (ct, imp) in enumerate(zip(row.convergence_times, row.impulses)):
                fh.write(f"{row.label},{i},{_fmt_ct(ct)},{imp:.17g}\n")
        fh.write("controller,average_convergence_time,average_impulse,n_runs\n")
        for row in rows:
            cts = [c for c in row.convergence_times]
            if any(c is None for c in cts):
                avg_ct = "unconverged"
            else:
                avg_ct = f"{np.mean(cts):.17g}"
            fh.write(f"{row.label},{avg_ct},{np.mean(row.impulses):.17g},{n_runs}\n")


def _fmt_ct(ct):
    return "unconverged" if ct is None else f"{ct:.17g}"


# ---------------------------------------------------------------------------
# CLI commands
# ---------------------------------------------------------------------------


def _load_cfg(args) -> Bt123Config:
    cfg = load_config(args.config) if args.config else Bt123Config()
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    return cfg


def _load_policy(cfg: Bt123Config, args=None):
    path = getattr(args, "weights", None) or cfg.weights_path
    if path is None:
        raise ConfigInvalid("no policy weights: set weights_path in the config or pass --weights")
    return mlp.load_weights(path)


def cmd_gen_db(args) -> int:
    cfg = _load_cfg(args)
    nominal = trajopt.solve_nominal(seed=cfg.seed)
    db = trajopt.random_walk_database(
        nominal,
        n_walks=args.walks,
        perturb_scale=args.perturb,
        rng_seed=cfg.seed,
        u_max=cfg.u_max,
    )
    if str(args.out).endswith(".bin"):
        db.save_binary(args.out)
    else:
        db.save_text(args.out)
    print(
        f"nominal: tauf={nominal.tauf:.6g} impulse={nominal.impulse:.6g} "
        f"cost={nominal.cost:.6g}"
    )
    assert np.abs(nominal.controls).max() <= cfg.u_max, "nominal exceeds the control bound"
    print(f"database: {db.n_records} records, solver success rate {db.success_rate:.3f}")
    print(f"wrote {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_cfg(args)
    if str(args.db).endswith(".bin"):
        db = trajopt.TrajectoryDatabase.load_binary(args.db)
    else:
        db = trajopt.TrajectoryDatabase.load_text(args.db)
    with open(args.db, "rb") as fh:
        fingerprint = hashlib.sha256(fh.read()).digest()
    tcfg = mlp.TrainConfig(rng_seed=cfg.seed, epochs=args.epochs)
    policy, report = mlp.train(db, tcfg)
    policy.fingerprint = fingerprint
    mlp.save_weights(policy, args.out)
    with open(str(args.out) + ".report.txt", "w") as fh:
        fh.write(report.to_text())
    print(f"trained on {db.n_records} records: final val MSE {report.final_val_loss:.3e} "
          f"(lr {report.learning_rate}, halvings {report.halvings})")
    print(f"wrote {args.out}")
    return 0


def cmd_simulate(args) -> int:
    cfg = _load_cfg(args)
    s0 = np.array([float(part) for part in args.s0.split(",")])
    scenario = Scenario(s0=s0, controller=args.controller, ticks=args.ticks)
    policy = None
    nominal = None
    if scenario.controller in ("nn", "bt123"):
        policy = _load_policy(cfg, args)
    if scenario.controller == "optimal-replay":
        nominal = trajopt.solve_nominal(seed=cfg.seed)
    trace, reached = simulate_scenario(scenario, cfg, policy=policy, nominal=nominal)
    trace.to_csv(args.out)
    write_plot_data(trace, str(args.out) + ".plot.csv")
    tau, states, controls = trace_arrays(trace)
    ct = convergence_time(tau, states, cfg.eps_goal)
    print(f"ticks: {len(trace) - 1}, reached goal: {reached}")
    print(f"impulse: {trace_impulse(controls, cfg.dt):.6g}")
    print(f"convergence time: {_fmt_ct(ct)}")
    print(f"wrote {args.out}")
    if not reached:
        print("tick budget exhausted before reaching the goal", file=sys.stderr)
        return 1
    return 0


def cmd_bench(args) -> int:
    cfg = _load_cfg(args)
    policy = _load_policy(cfg, args)
    nominal = trajopt.solve_nominal(seed=cfg.seed)
    rows = run_benchmark(cfg, policy, nominal, n_runs=args.runs, seed=cfg.seed)
    write_benchmark_csv(rows, args.out, args.runs)
    print(f"{'controller':16s} {'avg ct':>12s} {'avg impulse':>12s}")
    for row in rows:
        cts = row.convergence_times
        ct_txt = "unconverged" if any(c is None for c in cts) else f"{np.mean(cts):12.4f}"
        print(f"{row.label:16s} {ct_txt:>12s} {row.avg_impulse:12.4f}")
    print(f"wrote {args.out}")
    return 0


def cmd_certify(args) -> int:
    cfg = _load_cfg(args)
    if cfg.dsafe_mode != "certified":
        print("certify requires a certified-mode configuration", file=sys.stderr)
        return 1
    policy = _load_policy(cfg, args)
    report = assembly.certify(cfg, policy, n_samples=args.samples, rng_seed=cfg.seed)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(report.to_text())
        print(f"wrote {args.out}")
    print(report.summary())
    return 0 if report.passed else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="btsg", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_required=True):
        p.add_argument("--config", default=None, help="run configuration file")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--out", required=out_required, help="output path")

    p = sub.add_parser("gen-db", help="solve the nominal arc and grow the trajectory database")
    common(p)
    p.add_argument("--walks", type=int, default=500)
    p.add_argument("--perturb", type=float, default=0.05)
    p.set_defaults(func=cmd_gen_db)

    p = sub.add_parser("train", help="fit the control regressor on a database")
    common(p)
    p.add_argument("--db", required=True)
    p.add_argument("--epochs", type=int, default=40)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("simulate", help="roll out one scenario and write its trace")
    common(p)
    p.add_argument("--controller", choices=CONTROLLER_CHOICES, default="bt123")
    p.add_argument("--s0", default="0,0,3.141592653589793,0")
    p.add_argument("--ticks", type=int, default=3000)
    p.add_argument("--weights", default=None)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("bench", help="four-controller swing-up benchmark")
    common(p)
    p.add_argument("--runs", type=int, default=20)
    p.add_argument("--weights", default=None)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("certify", help="Monte-Carlo safety and convergence certificate")
    common(p, out_required=False)
    p.add_argument("--samples", type=int, default=200)
    p.add_argument("--weights", default=None)
    p.set_defaults(func=cmd_certify)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (
        ConfigInvalid,
        trajopt.NoConvergence,
        trajopt.Diverged,
        mlp.BadMagic,
        mlp.ShapeMismatch,
        mlp.Degenerate,
        FileNotFoundError,
        ValueError,
    ) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
