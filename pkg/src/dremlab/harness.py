"""Experiment orchestration: configs, reward conditions, scripted traces, multi-seed runs."""
from __future__ import annotations

import ast
import configparser
import csv
import dataclasses
import hashlib
import json
import logging
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import __version__, models, reward, sac, sampler, scripted, sim
from .scripted import ScriptedPolicyKind, generate_expert  # noqa: F401  (re-exported)

log = logging.getLogger(__name__)

CONDITIONS = ("drem", "image_only", "sparse", "engineered")
LEARNED = ("drem", "image_only")
TRACE_FIELDS = ["step", "reward", "contact_flag", "Fy"]
AGGREGATE_FIELDS = ["step", "mean", "min", "max", "n_seeds"]


@dataclass(frozen=True)
class ExperimentConfig:
    env: sim.EnvConfig = field(default_factory=sim.EnvConfig)
    sampler: sampler.SamplerConfig = field(default_factory=sampler.SamplerConfig)
    triplet: models.TripletConfig = field(default_factory=models.TripletConfig)
    arch: models.ArchConfig = field(default_factory=models.ArchConfig)
    sac: sac.SacConfig = field(default_factory=sac.SacConfig)
    condition: str = "drem"
    seeds: tuple = (0, 1, 2)
    output_dir: str = "out"
    name: str = "experiment"
    iters: int = 20000
    total_steps: int = 30000
    pair_count: int = 20000
    batch_size: int = 32
    lr: float = 2e-4
    learned_reward_offset: float = -1.0  # added to the learned reward before it reaches SAC
    reward_seed: int | None = 0  # one shared reward model; None trains one per policy seed

    def __post_init__(self):
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        if not self.seeds:
            raise sim.ConfigError("seeds must be nonempty")
        if len(set(self.seeds)) != len(self.seeds):
            raise sim.ConfigError("seeds must be distinct")
        if self.condition not in CONDITIONS:
            raise sim.ConfigError(f"unknown condition {self.condition!r}; expected one of {CONDITIONS}")
        if self.iters < 1 or self.total_steps < 1 or self.pair_count < 2:
            raise sim.ConfigError("iters, total_steps must be >= 1 and pair_count >= 2")
        self.env.validate()

    def with_condition(self, condition):
        return dataclasses.replace(self, condition=condition)

    def to_dict(self):
        return {
            "env": self.env.to_dict(),
            "sampler": self.sampler.to_dict(),
            "triplet": self.triplet.to_dict(),
            "arch": self.arch.to_dict(),
            "sac": self.sac.to_dict(),
            "experiment": {
                k: getattr(self, k)
                for k in (
                    "condition",
                    "seeds",
                    "output_dir",
                    "name",
                    "iters",
                    "total_steps",
                    "pair_count",
                    "batch_size",
                    "lr",
                    "learned_reward_offset",
                    "reward_seed",
                )
            },
        }

    @classmethod
    def from_dict(cls, d):
        exp = dict(d.get("experiment", {}))
        try:
            return cls(
                env=sim.EnvConfig.from_dict(d.get("env", {})),
                sampler=sampler.SamplerConfig(**d.get("sampler", {})),
                triplet=models.TripletConfig(**d.get("triplet", {})),
                arch=models.ArchConfig(**d.get("arch", {})),
                sac=sac.SacConfig(**d.get("sac", {})),
                **exp,
            )
        except (TypeError, ValueError) as exc:
            if isinstance(exc, sim.ConfigError):
                raise
            raise sim.ConfigError(str(exc)) from exc


# -- key-value config files ----------------------------------------------------------
def _literal(text):
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        return text


def load_config(path):
    """Read an INI-style file; values are Python literals (numbers, tuples, strings, True/False, None)."""
    parser = configparser.ConfigParser()
    parser.optionxform = str
    if not parser.read(path):
        raise sim.ConfigError(f"cannot read config file {path}")
    known = {"env", "sampler", "triplet", "arch", "sac", "experiment"}
    unknown = set(parser.sections()) - known
    if unknown:
        raise sim.ConfigError(f"unknown config sections {sorted(unknown)}")
    return ExperimentConfig.from_dict({s: {k: _literal(v) for k, v in parser[s].items()} for s in parser.sections()})


def dump_config(config, path):
    parser = configparser.ConfigParser()
    parser.optionxform = str
    for section, values in config.to_dict().items():
        parser[section] = {k: repr(tuple(v) if isinstance(v, list) else v) for k, v in values.items()}
    with open(path, "w") as fh:
        parser.write(fh)


# -- reward conditions -----------------------------------------------------------------
class LearnedReward:
    """Dense learned reward plus a constant offset, evaluated on observations only."""

    def __init__(self, model, offset=0.0):
        self.model = model
        self.offset = offset

    def __call__(self, state, obs):
        return reward.dense_reward(self.model, obs) + self.offset


class SparseReward:
    def __init__(self, env_config):
        self.env_config = env_config

    def __call__(self, state, obs):
        return reward.sparse_reward(state, self.env_config)


class EngineeredReward:
    def __init__(self, env_config, **kw):
        self.cfg = reward.EngineeredRewardConfig.for_env(env_config, **kw)

    def __call__(self, state, obs):
        return reward.engineered_reward(state, self.cfg)


def policy_sac_config(config):
    """Policy inputs follow the condition: F/T only for the full learned-reward condition."""
    return dataclasses.replace(config.sac, use_ft=config.condition == "drem")


# -- pipeline stages -------------------------------------------------------------------
def build_reward_model(config, seed, out_dir=None, progress=None):
    """Demonstration -> tree -> pairs -> embedding for one seed."""
    env = config.env
    expert = generate_expert(env, seed)
    sconf = dataclasses.replace(config.sampler, rng_seed=seed)
    tree = sampler.build_tree(env, expert, sconf)
    if tree.truncated:
        log.warning("tree hit max_depth=%d before reaching the start region", sconf.max_depth)
    dataset = sampler.sample_pairs(tree, config.triplet.epsilon, config.pair_count, seed)
    arch = dataclasses.replace(config.arch, use_ft=config.condition != "image_only")
    model = reward.train_embedding(
        dataset,
        expert.observations[-1],
        expert.observations[0],
        cfg=config.triplet,
        iters=config.iters,
        seed=seed,
        arch=arch,
        batch_size=config.batch_size,
        lr=config.lr,
        progress=progress,
    )
    if out_dir is not None:
        reward.save_reward_model(model, os.path.join(out_dir, "reward_model.tnck"))
        reward.write_loss_log(model.loss_log, os.path.join(out_dir, "loss_log.csv"))
    return model, tree


def make_reward_fn(config, model=None):
    if config.condition in LEARNED:
        if model is None:
            raise ValueError("learned conditions need a reward model")
        return LearnedReward(model, config.learned_reward_offset)
    if config.condition == "sparse":
        return SparseReward(config.env)
    return EngineeredReward(config.env)


def scripted_trace(kind, model, env_config, seed, max_steps=80):
    """Run a scripted policy and score each observation; returns (rows, info)."""
    states, observations, info = scripted.run_policy(kind, env_config, seed, max_steps)
    rewards = reward.dense_rewards(model, observations)
    rows = [
        (i, float(r), int(bool(s.contact_points)), float(o.ft_history[-1][1]))
        for i, (s, o, r) in enumerate(zip(states, observations, rewards))
    ]
    return rows, info


def write_trace(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRACE_FIELDS)
        for step, r, c, fy in rows:
            w.writerow([step, repr(r), c, repr(fy)])


def read_trace(path):
    with open(path) as fh:
        return [(int(r["step"]), float(r["reward"]), int(r["contact_flag"]), float(r["Fy"])) for r in csv.DictReader(fh)]


def run_scripted(kind, model, env_config, seed, path=None):
    rows, info = scripted_trace(kind, model, env_config, seed)
    if path is not None:
        write_trace(rows, path)
    return rows, info


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def run_seed(config, seed, seed_dir, progress=None, model=None):
    """One seed of an experiment; returns the learning curve.

    Learned conditions train their own reward model unless ``model`` is given.
    """
    os.makedirs(seed_dir, exist_ok=True)
    if config.condition in LEARNED and model is None:
        model, _ = build_reward_model(config, seed, seed_dir)
    result = sac.train_policy(config.env, make_reward_fn(config, model), policy_sac_config(config), config.total_steps, seed, progress)
    sac.write_curve(result.curve, os.path.join(seed_dir, "curve.csv"))
    sac.save_policy(result.agent, os.path.join(seed_dir, "policy.tnck"))
    return result.curve


def aggregate_curves(curves):
    """Mean/min/max success rate per step across seeds (steps must agree)."""
    if not curves:
        return []
    steps = [p.step for p in curves[0]]
    for c in curves[1:]:
        if [p.step for p in c] != steps:
            raise ValueError("curves have different step grids")
    rates = np.array([[p.eval_success_rate for p in c] for c in curves])
    return [
        (s, float(rates[:, i].mean()), float(rates[:, i].min()), float(rates[:, i].max()), len(curves)) for i, s in enumerate(steps)
    ]


def write_aggregate(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(AGGREGATE_FIELDS)
        for s, m, lo, hi, n in rows:
            w.writerow([s, repr(m), repr(lo), repr(hi), n])


def read_aggregate(path):
    with open(path) as fh:
        return [(int(r["step"]), float(r["mean"]), float(r["min"]), float(r["max"]), int(r["n_seeds"])) for r in csv.DictReader(fh)]


def run_experiment(config, progress=None):
    """All seeds of one condition under ``output_dir/name``; a failing seed is recorded and skipped."""
    root = os.path.join(config.output_dir, config.name)
    os.makedirs(root, exist_ok=True)
    dump_config(config, os.path.join(root, "config.ini"))
    entries, curves, timings = [], [], {}
    shared, shared_entry = None, None
    if config.condition in LEARNED and config.reward_seed is not None:
        reward_dir = os.path.join(root, "reward")
        os.makedirs(reward_dir, exist_ok=True)
        t0 = time.time()
        shared, _ = build_reward_model(config, config.reward_seed, reward_dir)
        timings["reward"] = round(time.time() - t0, 3)
        shared_entry = {
            "seed": config.reward_seed,
            "dir": "reward",
            "files": {f: _sha256(os.path.join(reward_dir, f)) for f in sorted(os.listdir(reward_dir))},
        }
    for seed in config.seeds:
        seed_dir = os.path.join(root, str(seed))
        t0 = time.time()
        entry = {"seed": seed, "dir": str(seed)}
        try:
            curve = run_seed(config, seed, seed_dir, progress, shared)
            curves.append(curve)
            entry["status"] = "ok"
        except Exception as exc:  # recorded in the manifest; other seeds still run
            log.exception("seed %d failed", seed)
            entry["status"] = "failed"
            entry["error"] = f"{type(exc).__name__}: {exc}"
        timings[str(seed)] = round(time.time() - t0, 3)
        if os.path.isdir(seed_dir):
            entry["files"] = {f: _sha256(os.path.join(seed_dir, f)) for f in sorted(os.listdir(seed_dir))}
        entries.append(entry)
    agg = aggregate_curves(curves)
    if agg:
        write_aggregate(agg, os.path.join(root, "aggregate.csv"))
    manifest = {
        "format": "experiment-manifest",
        "version": 1,
        "code_version": __version__,
        "name": config.name,
        "condition": config.condition,
        "config": config.to_dict(),
        "seeds": entries,
        "reward_model": shared_entry,
        "aggregate": "aggregate.csv" if agg else None,
    }
    if agg:
        manifest["aggregate_sha256"] = _sha256(os.path.join(root, "aggregate.csv"))
    with open(os.path.join(root, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    # wall-clock times live apart from the manifest so reruns stay byte-identical
    with open(os.path.join(root, "timings.json"), "w") as fh:
        json.dump(timings, fh, indent=2, sort_keys=True)
    return manifest
