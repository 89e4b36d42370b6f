"""Backward sampling of a task progress tree and balanced pair datasets."""
from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from . import formats, sim


class InputError(ValueError):
    pass


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class SamplerConfig:
    M: int = 500
    N: int = 1
    delta: float = 0.5
    max_depth: int = 200
    action_sampler_scale: float = 1.0  # fraction of the env action limits
    retract_prob: float = 0.5  # probability that a sampled action moves upward
    theta_weight: float | None = None  # pose-distance weight on rotation
    perturb_colors: bool = True
    rng_seed: int = 0

    def __post_init__(self):
        if self.M < 1 or self.N < 1:
            raise sim.ConfigError("M and N must be >= 1")
        if not 0.0 < self.delta < 1.0:
            raise sim.ConfigError("delta must lie in (0, 1)")
        if self.max_depth < 1:
            raise sim.ConfigError("max_depth must be >= 1")
        if not 0.0 <= self.retract_prob <= 1.0:
            raise sim.ConfigError("retract_prob must lie in [0, 1]")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def default_theta_weight(env_config):
    return 0.1 * env_config.workspace_diagonal / math.pi


def pose_distance(a, b, theta_weight=1.0):
    dx = a[0] - b[0]
    dy = a[1] - b[1]
    dth = sim.wrap_angle(a[2] - b[2])
    return math.sqrt(dx * dx + dy * dy + (theta_weight * dth) ** 2)


def progress_measure(candidate, reference, theta_weight=1.0):
    """Weighted end-effector pose difference; lower means closer to the reference."""
    return pose_distance(candidate.pose, reference.pose, theta_weight)


@dataclass
class ExpertTrajectory:
    states: list
    observations: list | None = None

    def validate(self, env_config):
        if len(self.states) < 2:
            raise InputError("expert trajectory needs at least two states")
        if not sim.is_goal(self.states[-1], env_config):
            raise InputError("expert trajectory does not end in the goal")
        if not sim.is_start_region(self.states[0], env_config):
            raise InputError("expert trajectory does not start in the start region")

    def __len__(self):
        return len(self.states)


@dataclass
class ProgressNode:
    node_id: int
    parent_id: int | None
    depth: int
    sim_state: sim.SimState
    observation: sim.Observation


@dataclass
class TaskProgressTree:
    nodes: list
    terminal_depth: int
    truncated: bool = False
    seeds: list = field(default_factory=list)  # selected node ids per depth
    env_config: sim.EnvConfig | None = None
    sampler_config: SamplerConfig | None = None

    @property
    def horizon(self):
        return self.terminal_depth

    @property
    def root(self):
        return self.nodes[0]

    def temporal_positions(self):
        return np.array([self.terminal_depth - n.depth for n in self.nodes])

    def children(self, node_id):
        return [n.node_id for n in self.nodes if n.parent_id == node_id]

    def depth_nodes(self, depth):
        return [n for n in self.nodes if n.depth == depth]


def temporal_position(node, tree):
    return tree.terminal_depth - node.depth


def _sample_actions(rng, count, env_config, sampler):
    lim = np.asarray(env_config.action_limits) * sampler.action_sampler_scale
    acts = rng.uniform(-1.0, 1.0, size=(count, 3)) * lim
    up = rng.random(count) < sampler.retract_prob
    acts[up, 1] = np.abs(acts[up, 1])
    return acts


def build_tree(env_config, expert, sampler, measure=None):
    """Grow the tree from the goal state, steering each depth toward the reversed expert.

    ``measure(candidate, reference, theta_weight)`` replaces the pose-difference
    progress measure (lower is better); other task-agnostic measures plug in here.
    """
    measure = measure or progress_measure
    expert.validate(env_config)
    rng = np.random.default_rng(sampler.rng_seed)
    w_th = sampler.theta_weight if sampler.theta_weight is not None else default_theta_weight(env_config)
    n_e = len(expert.states)
    root_state = expert.states[-1]
    root_obs = expert.observations[-1] if expert.observations else sim.observe(root_state, env_config)
    nodes = [ProgressNode(0, None, 0, root_state, root_obs)]
    seeds = [[0]]
    need = math.ceil(sampler.N * sampler.delta)
    depth = 0
    truncated = False
    while True:
        in_start = sum(sim.is_start_region(nodes[i].sim_state, env_config) for i in seeds[-1])
        if depth > 0 and in_start >= need:
            break
        if depth >= sampler.max_depth:
            truncated = True
            break
        ref = expert.states[n_e - 1 - min(depth + 1, n_e - 1)]
        scored = []
        for sid in seeds[-1]:
            parent = nodes[sid]
            actions = _sample_actions(rng, sampler.M, env_config, sampler)
            for a in actions:
                st = sim.step(parent.sim_state, sim.Action(tuple(a)), env_config)
                if sampler.perturb_colors:
                    st = sim.SimState(st.pose, st.twist, st.contact_points, sim.sample_colors(env_config, rng), st.step_count)
                obs = sim.observe(st, env_config, parent.observation)
                node = ProgressNode(len(nodes), sid, depth + 1, st, obs)
                nodes.append(node)
                scored.append((measure(st, ref, w_th), node.node_id))
        # stable sort keeps the lowest child index first among ties
        scored.sort(key=lambda t: t[0])
        seeds.append([nid for _, nid in scored[: sampler.N]])
        depth += 1
    return TaskProgressTree(nodes, depth, truncated, seeds, env_config, sampler)


# -- pair datasets --------------------------------------------------------------------
@dataclass(frozen=True)
class TrainingPair:
    obs_a: sim.Observation
    obs_b: sim.Observation
    t_a: int
    t_b: int
    neighboring: bool
    goal_obs: sim.Observation | None = None
    node_a: int | None = None
    node_b: int | None = None


@dataclass
class PairDataset:
    pairs: list
    epsilon: int
    goal_obs: sim.Observation

    def __len__(self):
        return len(self.pairs)

    def __getitem__(self, i):
        return self.pairs[i]

    def __iter__(self):
        return iter(self.pairs)

    def class_indices(self):
        neigh = np.array([i for i, p in enumerate(self.pairs) if p.neighboring], dtype=np.int64)
        far = np.array([i for i, p in enumerate(self.pairs) if not p.neighboring], dtype=np.int64)
        return neigh, far


def _level_pairs(levels, counts, neighboring, epsilon):
    """Unordered level pairs (ta <= tb) of a class and their node-pair weights."""
    out, weights = [], []
    for i, ta in enumerate(levels):
        for j in range(i, len(levels)):
            tb = levels[j]
            if (tb - ta <= epsilon) != neighboring:
                continue
            w = counts[i] * (counts[i] - 1) / 2 if i == j else counts[i] * counts[j]
            if w > 0:
                out.append((i, j))
                weights.append(w)
    return out, np.asarray(weights, dtype=float)


def sample_pairs(tree, epsilon, count, rng_seed):
    """Exactly ``count // 2`` neighboring and ``count // 2`` non-neighboring pairs.

    Pairs are uniform over unordered node pairs within each class.
    """
    if count <= 0 or count % 2:
        raise DatasetError("pair count must be a positive even number")
    t = tree.temporal_positions()
    levels, inverse = np.unique(t, return_inverse=True)
    if len(levels) < 2:
        raise DatasetError("tree needs nodes at two or more temporal positions")
    members = [np.flatnonzero(inverse == k) for k in range(len(levels))]
    counts = [len(m) for m in members]
    rng = np.random.default_rng(rng_seed)
    goal_obs = tree.root.observation
    half = count // 2
    pairs = []
    for neighboring in (True, False):
        lp, w = _level_pairs(levels, counts, neighboring, epsilon)
        if not lp:
            name = "neighboring" if neighboring else "non-neighboring"
            raise DatasetError(f"no {name} pairs exist for epsilon={epsilon}")
        picks = rng.choice(len(lp), size=half, p=w / w.sum())
        for k in picks:
            i, j = lp[k]
            if i == j:
                a, b = rng.choice(members[i], size=2, replace=False)
            else:
                a, b = rng.choice(members[i]), rng.choice(members[j])
            na, nb = tree.nodes[a], tree.nodes[b]
            ta, tb = int(t[a]), int(t[b])
            pairs.append(TrainingPair(na.observation, nb.observation, ta, tb, neighboring, goal_obs, int(a), int(b)))
    order = rng.permutation(len(pairs))
    return PairDataset([pairs[i] for i in order], epsilon, goal_obs)


# -- persistence ---------------------------------------------------------------------------
def _state_to_json(s):
    return {
        "pose": list(s.pose),
        "twist": list(s.twist),
        "colors": {k: list(v) for k, v in s.object_colors.items()},
        "step_count": s.step_count,
    }


def _state_from_json(d, env_config):
    pose = tuple(d["pose"])
    return sim.SimState(
        pose,
        tuple(d["twist"]),
        tuple(sim.find_contacts(pose, env_config)),
        {k: tuple(v) for k, v in d["colors"].items()},
        d["step_count"],
    )


def save_tree(tree, directory):
    os.makedirs(directory, exist_ok=True)
    offsets = []
    with open(os.path.join(directory, "observations.bin"), "wb") as fh:
        for node in tree.nodes:
            offsets.append(fh.tell())
            formats.write_observation(fh, node.observation)
    doc = {
        "format": "task-progress-tree",
        "version": 1,
        "terminal_depth": tree.terminal_depth,
        "truncated": tree.truncated,
        "seeds": tree.seeds,
        "env_config": tree.env_config.to_dict() if tree.env_config else None,
        "sampler_config": tree.sampler_config.to_dict() if tree.sampler_config else None,
        "nodes": [
            {"id": n.node_id, "parent": n.parent_id, "depth": n.depth, "state": _state_to_json(n.sim_state), "obs_offset": off}
            for n, off in zip(tree.nodes, offsets)
        ],
    }
    with open(os.path.join(directory, "tree.json"), "w") as fh:
        json.dump(doc, fh)


def load_tree(directory):
    with open(os.path.join(directory, "tree.json")) as fh:
        doc = json.load(fh)
    env_config = sim.EnvConfig.from_dict(doc["env_config"])
    sampler = SamplerConfig.from_dict(doc["sampler_config"]) if doc["sampler_config"] else None
    nodes = []
    with open(os.path.join(directory, "observations.bin"), "rb") as fh:
        for nd in doc["nodes"]:
            fh.seek(nd["obs_offset"])
            obs = formats.read_observation(fh)
            nodes.append(ProgressNode(nd["id"], nd["parent"], nd["depth"], _state_from_json(nd["state"], env_config), obs))
    return TaskProgressTree(nodes, doc["terminal_depth"], doc["truncated"], doc["seeds"], env_config, sampler)


def save_pairs(dataset, path):
    """Index file: one row per pair referencing tree node ids."""
    with open(path, "w") as fh:
        fh.write("# pair-index v1 epsilon=%d\n" % dataset.epsilon)
        fh.write("node_a,node_b,t_a,t_b,neighboring\n")
        for p in dataset.pairs:
            fh.write(f"{p.node_a},{p.node_b},{p.t_a},{p.t_b},{int(p.neighboring)}\n")


def load_pairs(path, tree):
    with open(path) as fh:
        head = fh.readline()
        epsilon = int(head.split("epsilon=")[1])
        fh.readline()
        pairs = []
        goal = tree.root.observation
        for line in fh:
            a, b, ta, tb, nb = (int(v) for v in line.strip().split(","))
            pairs.append(TrainingPair(tree.nodes[a].observation, tree.nodes[b].observation, ta, tb, bool(nb), goal, a, b))
    return PairDataset(pairs, epsilon, goal)
