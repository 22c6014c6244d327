"""Command-line entry point: simulate, learn, evaluate and summarize runs.

Exit codes: 0 on success, 1 for usage or configuration errors, 2 when the
inference engine aborts on a numerical condition.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import _fmt
from .channel import ConfigError
from .config import ExperimentConfig, default_config_text, load_config, parse_config
from .decpomdp import collect_trajectories, save_trajectories
from .fsc import BehaviorPolicy, load_fsc, save_fsc, uniform_fsc
from .inference import InferenceAbort
from .learning import TRACE_FILES, TraceFormatError, batch_jain, learn, read_trace

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2
EVAL_STREAM = 1_000_000


class UsageError(Exception):
    pass


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="coexist", description=__doc__.splitlines()[0])
    p.add_argument("--mode", required=True, choices=["simulate", "learn", "evaluate", "summarize"])
    p.add_argument("--config", help="YAML experiment file (default: the shipped scenario)")
    p.add_argument("--seed", type=int)
    p.add_argument("--iters", type=int, help="outer learning iterations")
    p.add_argument("--episodes", type=int, help="episodes per batch (K)")
    p.add_argument("--horizon", type=int, help="decisions per episode minus one (T)")
    p.add_argument("--out", help="output directory")
    p.add_argument("--workers", type=int, help="processes for episode collection")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _load(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else parse_config(default_config_text(), "<default>")
    for name in ("iters", "episodes", "horizon", "workers"):
        value = getattr(args, name)
        if value is not None and value < (0 if name in ("iters", "horizon") else 1):
            raise ConfigError(f"--{name} is out of range: {value}")
    return cfg.with_overrides(seed=args.seed, iters=args.iters, episodes=args.episodes,
                              horizon=args.horizon, output_dir=args.out, workers=args.workers)


def _trajectory_summary(trajs, gamma: float) -> dict:
    th = np.concatenate([tr.payload_bits / tr.duration_us for tr in trajs])
    return {
        "episodes": len(trajs),
        "discounted_return": float(np.mean([tr.discounted_return(gamma) for tr in trajs])),
        "throughput_mbps": [float(x) for x in th.mean(axis=0)],
        "jain": batch_jain(trajs),
    }


def run_simulate(cfg: ExperimentConfig) -> int:
    lc = cfg.learning
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    explore = [BehaviorPolicy(uniform_fsc(cfg.num_actions, lc.num_observations), 1.0)] * cfg.sim.num_agents
    trajs = collect_trajectories(cfg.sim, explore, lc.episodes, lc.horizon, cfg.seed,
                                 bin_edges=lc.bin_edges, workers=lc.workers)
    save_trajectories(trajs, out / "trajectories.jsonl")
    print(f"wrote {len(trajs)} episodes to {out / 'trajectories.jsonl'}")
    return EXIT_OK


def run_learn(cfg: ExperimentConfig) -> int:
    out = Path(cfg.output_dir)
    traj_dir = out / "trajectories"
    traj_dir.mkdir(parents=True, exist_ok=True)

    def sink(round_, trajs):
        save_trajectories(trajs, traj_dir / f"round_{round_:03d}.jsonl")

    result = learn(cfg, on_batch=sink)
    result.trace.write_csvs(out)
    pol_dir = out / "policies"
    pol_dir.mkdir(exist_ok=True)
    for n, (pol, state) in enumerate(zip(result.policies, result.states)):
        save_fsc(pol, pol_dir / f"agent_{n}.json")
        _save_state(state, pol_dir / f"agent_{n}_posterior.json")
    rows = len(result.trace)
    nodes = result.trace.rows[-1].nodes if rows else tuple(s.num_nodes for s in result.states)
    print(f"{rows} iterations{' (ELBO settled)' if result.stopped_early else ''}; "
          f"final node counts {list(nodes)}; outputs in {out}")
    return EXIT_OK


def _save_state(state, path: Path) -> None:
    fields = ("delta", "mu", "phi", "sigma", "lam", "a", "b")
    parts = [f'  "header": {json.dumps({"format": "coexist-posterior", "version": 1, "num_nodes": state.num_nodes})}',
             f'  "g": {_fmt.num(state.g)}', f'  "h": {_fmt.num(state.h)}']
    parts += [f'  "{name}": {_fmt.nested(getattr(state, name))}' for name in fields]
    path.write_text("{\n" + ",\n".join(parts) + "\n}\n")


def run_evaluate(cfg: ExperimentConfig) -> int:
    out = Path(cfg.output_dir)
    paths = [out / "policies" / f"agent_{n}.json" for n in range(cfg.sim.num_agents)]
    missing = [str(p) for p in paths if not p.is_file()]
    if missing:
        raise UsageError("missing policy file(s): " + ", ".join(missing))
    try:
        policies = [load_fsc(p) for p in paths]
    except (ValueError, KeyError) as exc:
        raise UsageError(f"unreadable policy file: {exc}") from None
    lc = cfg.learning
    for p in policies:
        if p.num_actions != cfg.num_actions or p.num_observations != lc.num_observations:
            raise UsageError("policy dimensions do not match the configured action/observation sets")
    # on-policy rollouts without exploration, so the discounted return is the policy value
    trajs = collect_trajectories(cfg.sim, policies, lc.episodes, lc.horizon, cfg.seed,
                                 bin_edges=lc.bin_edges, stream=(EVAL_STREAM,), workers=lc.workers)
    report = _trajectory_summary(trajs, cfg.sim.gamma)
    text = json.dumps(report, indent=2)
    (out / "evaluation.json").write_text(text + "\n")
    print(text)
    return EXIT_OK


def run_summarize(out_dir) -> int:
    out = Path(out_dir)
    missing = [name for name in TRACE_FILES if not (out / name).is_file()]
    if missing:
        raise UsageError(f"{out}: missing " + ", ".join(missing))
    trace = read_trace(out)
    if not len(trace):
        raise UsageError(f"{out}: trace files hold no iterations")
    print(summarize_trace(trace))
    return EXIT_OK


def summarize_trace(trace) -> str:
    last = trace.rows[-1]
    elbo = trace.elbo
    if len(elbo) > 1:
        trend = "rising" if elbo[-1] > elbo[0] else "falling" if elbo[-1] < elbo[0] else "flat"
    else:
        trend = "single iteration"
    lines = [
        f"iterations:        {len(trace)}",
        f"final ELBO:        {last.elbo:.6f} ({trend})",
        f"final node counts: {list(last.nodes)}",
        f"one-node policies: {'yes' if all(n == 1 for n in last.nodes) else 'no'}",
        f"final value:       {last.empirical_value:.6f}",
        f"final return:      {last.discounted_return:.6f}",
        f"final Jain index:  {last.jain:.6f}",
    ]
    return "\n".join(lines)


def main(argv=None) -> int:
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.mode == "summarize":
            if not args.out:
                raise UsageError("summarize needs --out pointing at a run directory")
            return run_summarize(args.out)
        cfg = _load(args)
        return {"simulate": run_simulate, "learn": run_learn, "evaluate": run_evaluate}[args.mode](cfg)
    except (ConfigError, UsageError, TraceFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except InferenceAbort as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
