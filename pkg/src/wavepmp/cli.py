"""Command-line front end: ``wavepmp {train,control,verify,compare}``.

Exit codes: 0 success, 1 validation error, 2 divergence, 3 verification failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .control import (controls_of, control_hessians, euler_layerize, lqr_riccati_oracle, make_problem,
                      scaled_residuals)
from .grid import field_to_nodes
from .harness import async_run
from .io import (CheckpointError, ConfigError, MetricsWriter, load_checkpoint, load_config, make_grid,
                 make_train_config, save_checkpoint)
from .models import dataset_linreg, dataset_xor, make_mlp, minibatches
from .pmp import NonFiniteError, forward_rollout
from .trainer import InstabilityError, WaveState, gradient_alignment, sgd_baseline, train
from .verify import SUITES, run_suite

EXIT_OK, EXIT_INVALID, EXIT_DIVERGED, EXIT_VERIFY = 0, 1, 2, 3
DATASETS = ("xor", "linreg")


def build_dataset(cfg):
    d = cfg["data"]
    if d["name"] == "xor":
        X, Y = dataset_xor()
    elif d["name"] == "linreg":
        out_dim = int(cfg["model"]["widths"][-1])
        X, Y, _, _ = dataset_linreg(int(d["n"]), int(d["dim"]), out_dim, float(d["noise"]), int(d["seed"]))
    else:
        raise ConfigError(f"unknown dataset {d['name']!r}; choose from {list(DATASETS)}")
    try:
        return minibatches(X, Y, d["batch_size"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def build_network(cfg, batches):
    m = cfg["model"]
    if m["kind"] != "mlp":
        raise ConfigError(f"unknown model kind {m['kind']!r}; only 'mlp' is built in")
    widths = [int(w) for w in m["widths"]]
    X, Y = batches[0]
    if widths[0] != X.shape[0] or widths[-1] != Y.shape[0]:
        raise ConfigError(f"model widths {widths} do not fit data with {X.shape[0]} inputs "
                          f"and {Y.shape[0]} outputs")
    batch = X.shape[1] if m["metric"] == "matched" else None
    try:
        return make_mlp(widths, m["activation"], int(m["seed"]), m["loss"], m["output_activation"],
                        batch_size=batch)
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"invalid model: {exc}") from exc


def _setup_training(path):
    cfg = load_config(path)
    batches = build_dataset(cfg)
    net = build_network(cfg, batches)
    grid = make_grid(cfg, net.depth + 1)
    try:
        config = make_train_config(cfg, grid)
        config.make_port(net)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg, batches, net, config


def _resume(net, config, path):
    field, params, step, _ = load_checkpoint(path)
    try:
        field.check_widths(net.widths)
    except ValueError as exc:
        raise CheckpointError(f"{path}: checkpoint does not match the model ({exc})") from exc
    if [p.shape for p in params] != [p.shape for p in net.get_params()]:
        raise CheckpointError(f"{path}: parameter shapes do not match the model")
    net.set_params(params)
    return WaveState(field, [p.copy() for p in params], config.make_port(net), step)


def cmd_train(args) -> int:
    cfg, batches, net, config = _setup_training(args.config)
    state = _resume(net, config, args.resume) if args.resume else None
    out = cfg["output"]
    with MetricsWriter(out["metrics"]) as writer:
        if config.scheduler == "lockstep":
            # lockstep is bit-identical to the synchronous loop, so use it directly
            state, rows = train(net, batches, config, state, callback=lambda s, row: writer.write(row))
        else:
            if len(batches) != 1:
                raise ConfigError(f"scheduler {config.scheduler!r} runs a single batch; unset data.batch_size")
            state, rows = async_run(net, batches[0], config, state)
            rows = [r for r in rows if r.step % config.log_every == 0 or r is rows[-1]]
            writer.write_all(rows)
            net.set_params(state.params)
    if out["checkpoint"]:
        save_checkpoint(out["checkpoint"], state, {"config": cfg})
    X, Y = batches[0]
    final = net.objective(X, Y)
    print(f"step {state.n}: loss {final:.6g}; metrics -> {out['metrics']}")
    return EXIT_OK


def _dump_solution(path, problem, net, state, extra):
    nodes = field_to_nodes(state.field, net.thetas)
    xs = forward_rollout(net, np.asarray(problem.x0, dtype=float), state.params)
    payload = {
        "problem": problem.name, "T": problem.T, "N": problem.N, "steps": state.n,
        "controls": controls_of(state.params).tolist(),
        "states": [np.ravel(x).tolist() for x in xs],
        "wave_states": [np.ravel(x).tolist() for x in nodes.x],
        "wave_costates": [np.ravel(v).tolist() for v in nodes.lam],
        "cost": float(net.objective(np.asarray(problem.x0, dtype=float), np.zeros(1), state.params)),
        **extra,
    }
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(payload, indent=1))


def cmd_control(args) -> int:
    cfg = load_config(args.config)
    p = cfg["problem"]
    if not p["name"]:
        raise ConfigError("problem.name is required for 'control'")
    kwargs = {k: p[k] for k in ("T", "N", "x0") if p[k] is not None}
    try:
        problem = make_problem(p["name"], **kwargs)
    except KeyError as exc:
        raise ConfigError(exc.args[0]) from exc
    net = euler_layerize(problem)
    grid = make_grid(cfg, problem.N + 1)
    try:
        config = make_train_config(cfg, grid, hessians=control_hessians(problem, net),
                                   default_kind="curvature")
        config.make_port(net)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    out = cfg["output"]
    x0 = np.asarray(problem.x0, dtype=float)
    with MetricsWriter(out["metrics"]) as writer:
        state, rows = train(net, [(x0, np.zeros(1))], config, callback=lambda s, row: writer.write(row))
    if out["checkpoint"]:
        save_checkpoint(out["checkpoint"], state, {"config": cfg})
    nodes = field_to_nodes(state.field, net.thetas)
    E_x, E_lam = scaled_residuals([x[:, 0] for x in nodes.x], [v[:, 0] for v in nodes.lam],
                                  list(state.params), problem)
    res = max(float(np.abs(np.concatenate(E_x + E_lam)).max()), rows[-1].max_rtheta / problem.dt)
    extra = {"max_scaled_residual": res}
    code = EXIT_OK
    print(f"{problem.name}: {state.n} steps, max scaled residual {res:.3e}")
    if problem.linear is not None:
        lin = problem.linear
        sol = lqr_riccati_oracle(lin["A"], lin["B"], lin["Q"], lin["R"], lin["Q_T"], problem.T,
                                 problem.N, problem.x0)
        err = float(np.abs(controls_of(state.params) - np.array(sol.u)).max())
        extra.update(riccati_control_error=err, riccati_cost=sol.cost)
        ok = err <= float(p["oracle_tol"])
        print(f"control error vs Riccati (inf-norm): {err:.3e} (tol {p['oracle_tol']:g}) "
              f"{'PASS' if ok else 'FAIL'}")
        code = EXIT_OK if ok else EXIT_VERIFY
    if out["solution"]:
        _dump_solution(out["solution"], problem, net, state, extra)
    return code


def cmd_verify(args) -> int:
    if args.suite not in SUITES:
        print(f"error: unknown suite {args.suite!r}; available: {', '.join(sorted(SUITES))}", file=sys.stderr)
        return EXIT_INVALID
    results = run_suite(args.suite)
    for r in results:
        print(r.line())
    failed = sum(not r.passed for r in results)
    print(f"{len(results) - failed}/{len(results)} passed")
    return EXIT_OK if failed == 0 else EXIT_VERIFY


def cmd_compare(args) -> int:
    """Wave relaxation vs backprop SGD at equal parameter-update counts."""
    cfg, batches, net, config = _setup_training(args.config)
    N = net.depth
    updates = config.budget // config.update_every
    sgd_every = max(1, config.batch_every // config.update_every)
    _, sgd_losses = sgd_baseline(net, batches, config.eta, updates, sgd_every)
    X, Y = batches[0]
    initial = net.objective(X, Y)
    table = []

    def record(state, row):
        u = state.n // config.update_every
        batch = batches[((state.n - 1) // config.batch_every) % len(batches)]
        table.append((row.step, u, row.rollout_loss, sgd_losses[u - 1] if u else initial,
                      gradient_alignment(net, state, batch)))

    train(net, batches, config, callback=record)
    print(f"{'step':>7} {'updates':>7} {'wave_loss':>12} {'sgd_loss':>12} {'grad_cos':>9}")
    for step, u, wl, sl, cos in table:
        print(f"{step:>7d} {u:>7d} {wl:>12.5e} {sl:>12.5e} {cos:>9.5f}")
    # sequential depth: each wave step is one nearest-neighbour exchange, each SGD update
    # needs a full forward and backward sweep
    print(f"sequential depth: wave {config.budget} steps (1 hop each) vs sgd {updates} updates "
          f"x {2 * N} hops = {2 * N * updates}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="wavepmp", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("train", help="train a network from a config file")
    p.add_argument("config")
    p.add_argument("--resume", metavar="CHECKPOINT", help="continue from a saved checkpoint")
    p.set_defaults(func=cmd_train)
    p = sub.add_parser("control", help="relax a discretized optimal-control problem")
    p.add_argument("config")
    p.set_defaults(func=cmd_control)
    p = sub.add_parser("verify", help="run a verification suite")
    p.add_argument("suite", nargs="?", default="all", help=f"one of: {', '.join(sorted(SUITES))}")
    p.set_defaults(func=cmd_verify)
    p = sub.add_parser("compare", help="wave relaxation vs backprop SGD")
    p.add_argument("config")
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (InstabilityError, NonFiniteError) as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ConfigError, CheckpointError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
