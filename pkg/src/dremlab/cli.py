"""Command-line entry point.  Exit codes: 0 success, 1 configuration error, 2 runtime error."""
from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys

from . import formats, harness, nn, plots, reward, sac, sampler, scripted, sim

log = logging.getLogger("dremlab")


def _config(args):
    cfg = harness.load_config(args.config) if args.config else harness.ExperimentConfig()
    over = {}
    if getattr(args, "condition", None):
        over["condition"] = args.condition
    if getattr(args, "steps", None) is not None:
        over["total_steps"] = args.steps
    if getattr(args, "seed", None) is not None:
        over["seeds"] = (args.seed,)
    if getattr(args, "out", None):
        over["output_dir"] = args.out
    return harness.ExperimentConfig.from_dict({**cfg.to_dict(), "experiment": {**cfg.to_dict()["experiment"], **over}})


def cmd_demo_gen(args, cfg):
    seed = cfg.seeds[0]
    expert = scripted.generate_expert(cfg.env, seed)
    out = os.path.join(cfg.output_dir, "demo")
    with formats.TrajectoryWriter(out, cfg.env, {"seed": seed, "kind": "expert"}) as w:
        for s, o in zip(expert.states, expert.observations):
            w.write(s, o, None, cfg.env)
    print(f"expert demonstration: {len(expert)} states -> {out}")


def cmd_tree_build(args, cfg):
    seed = cfg.seeds[0]
    expert = scripted.generate_expert(cfg.env, seed)
    tree = sampler.build_tree(cfg.env, expert, dataclasses.replace(cfg.sampler, rng_seed=seed))
    out = os.path.join(cfg.output_dir, "tree")
    sampler.save_tree(tree, out)
    ds = sampler.sample_pairs(tree, cfg.triplet.epsilon, cfg.pair_count, seed)
    sampler.save_pairs(ds, os.path.join(out, "pairs.csv"))
    print(f"tree: {len(tree.nodes)} nodes, depth {tree.terminal_depth}, truncated={tree.truncated} -> {out}")


def cmd_reward_train(args, cfg):
    seed = cfg.seeds[0]
    out = os.path.join(cfg.output_dir, "reward")
    os.makedirs(out, exist_ok=True)

    def progress(it, row):
        if it % 500 == 0:
            log.info("iter %d triplet %.4f recon %.4f", it, row[1], row[2])

    model, tree = harness.build_reward_model(cfg, seed, out, progress)
    print(f"reward model (tree depth {tree.terminal_depth}) -> {out}/reward_model.tnck")


def cmd_scripted_eval(args, cfg):
    if not args.model:
        raise sim.ConfigError("scripted-eval needs --model")
    model = reward.load_reward_model(args.model)
    out = os.path.join(cfg.output_dir, "scripted")
    os.makedirs(out, exist_ok=True)
    traces = {}
    for kind in harness.ScriptedPolicyKind:
        rows, info = harness.run_scripted(kind, model, cfg.env, cfg.seeds[0], os.path.join(out, f"trace_{kind.value}.csv"))
        traces[kind.value] = rows
        print(f"{kind.value}: {len(rows)} steps, final reward {rows[-1][1]:.3f}, {info}")
    plots.plot_traces(traces, os.path.join(out, "reward_traces.svg"))


def cmd_policy_train(args, cfg):
    seed = cfg.seeds[0]
    out = os.path.join(cfg.output_dir, "policy", cfg.condition, str(seed))
    os.makedirs(out, exist_ok=True)
    model = None
    if cfg.condition in harness.LEARNED:
        if args.model:
            model = reward.load_reward_model(args.model)
        else:
            model, _ = harness.build_reward_model(cfg, seed, out)
    res = sac.train_policy(cfg.env, harness.make_reward_fn(cfg, model), harness.policy_sac_config(cfg), cfg.total_steps, seed)
    sac.write_curve(res.curve, os.path.join(out, "curve.csv"))
    sac.save_policy(res.agent, os.path.join(out, "policy.tnck"))
    final = res.curve[-1].eval_success_rate if res.curve else float("nan")
    print(f"{cfg.condition} seed {seed}: final success rate {final:.2f} -> {out}")


def cmd_experiment(args, cfg):
    cfg = dataclasses.replace(cfg, name=args.name or f"{cfg.name}_{cfg.condition}")
    manifest = harness.run_experiment(cfg)
    root = os.path.join(cfg.output_dir, cfg.name)
    agg_path = os.path.join(root, "aggregate.csv")
    if os.path.exists(agg_path):
        plots.plot_success({cfg.condition: harness.read_aggregate(agg_path)}, os.path.join(root, "success_rate.svg"))
    failed = [e for e in manifest["seeds"] if e["status"] != "ok"]
    print(f"{cfg.name}: {len(manifest['seeds']) - len(failed)} ok, {len(failed)} failed -> {root}")
    if failed:
        raise RuntimeError(f"{len(failed)} seed(s) failed; see manifest.json")


def cmd_plot(args, cfg):
    if not args.bundles:
        raise sim.ConfigError("plot needs at least one bundle directory")
    out = args.out or "plots"
    for path in plots.emit_plots(args.bundles, out):
        print(path)


COMMANDS = {
    "demo-gen": cmd_demo_gen,
    "tree-build": cmd_tree_build,
    "reward-train": cmd_reward_train,
    "scripted-eval": cmd_scripted_eval,
    "policy-train": cmd_policy_train,
    "experiment": cmd_experiment,
    "plot": cmd_plot,
}


class _Parser(argparse.ArgumentParser):
    # bad flags count as configuration errors
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser():
    p = _Parser(prog="dremlab", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="key-value config file")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--condition", choices=harness.CONDITIONS)
        sp.add_argument("--steps", type=int, help="SAC environment steps")
        if name in ("scripted-eval", "policy-train"):
            sp.add_argument("--model", help="trained reward model checkpoint")
        if name == "experiment":
            sp.add_argument("--name", help="experiment directory name")
        if name == "plot":
            sp.add_argument("bundles", nargs="*", help="directories holding trace or aggregate CSVs")
    return p


CONFIG_ERRORS = (sim.ConfigError, FileNotFoundError)
RUNTIME_ERRORS = (
    RuntimeError,
    reward.DivergenceError,
    sac.DivergenceError,
    sampler.InputError,
    sampler.DatasetError,
    nn.CheckpointError,
    plots.PlotInputError,
    OSError,
    ValueError,
)


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config(args) if args.command != "plot" else None
    except CONFIG_ERRORS as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 1
    try:
        COMMANDS[args.command](args, cfg)
    except sim.ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 1
    except RUNTIME_ERRORS as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
