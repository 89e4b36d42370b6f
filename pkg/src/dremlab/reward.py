"""Dense reward from a trained embedding, plus the sparse and engineered baselines."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import models, nn, sim
from . import tensor as T
from .sampler import DatasetError, pose_distance

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    pass


class ModelIntegrityError(RuntimeError):
    pass


@dataclass
class RewardModel:
    encoder: models.Encoder
    latent_goal: np.ndarray
    latent_start: np.ndarray
    denom: float
    clamp_output: bool = True
    triplet: models.TripletConfig = field(default_factory=models.TripletConfig)
    loss_log: list = field(default_factory=list)
    decoder: models.Decoder | None = None

    @classmethod
    def from_encoder(cls, encoder, goal_obs, start_obs, **kw):
        hg = models.encode(goal_obs, encoder)
        hs = models.encode(start_obs, encoder)
        return cls(encoder, hg, hs, models.latent_distance(hs, hg), **kw)

    def check(self):
        if not (np.isfinite(self.denom) and self.denom > 1e-12):
            raise ModelIntegrityError(f"degenerate start/goal latent distance {self.denom!r}")

    def __call__(self, obs):
        return dense_reward(self, obs)


def _progress(model, h):
    model.check()
    hg = model.latent_goal
    nh = np.linalg.norm(h, axis=-1)
    cos = (h @ hg) / (nh * np.linalg.norm(hg) + 1e-300)
    return 1.0 - (1.0 - cos) / model.denom


def dense_reward(model, obs, return_raw=False):
    """``1 - dist(h(obs), h_goal) / dist(h_start, h_goal)``, clamped to [0, 1] by default."""
    raw = float(_progress(model, models.encode(obs, model.encoder)))
    val = min(max(raw, 0.0), 1.0) if model.clamp_output else raw
    return (val, raw) if return_raw else val


def dense_rewards(model, observations, return_raw=False):
    raw = _progress(model, models.encode_batch(observations, model.encoder))
    val = np.clip(raw, 0.0, 1.0) if model.clamp_output else raw
    return (val, raw) if return_raw else val


def sparse_reward(state, config, at_episode_end=True):
    """1 at the goal at the end of an episode, 0 otherwise."""
    return 1.0 if at_episode_end and sim.is_goal(state, config) else 0.0


@dataclass(frozen=True)
class EngineeredRewardConfig:
    kappa: float
    goal_pose: tuple
    theta_weight: float = 1.0
    decaying: bool = False  # alternate exp(-kappa d) form; off by default

    def __post_init__(self):
        if not self.kappa > 0:
            raise ValueError("kappa must be positive")

    @classmethod
    def for_env(cls, env_config, **kw):
        from .sampler import default_theta_weight

        kw.setdefault("kappa", 2.0 / env_config.workspace_diagonal)
        kw.setdefault("goal_pose", sim.goal_pose(env_config))
        kw.setdefault("theta_weight", default_theta_weight(env_config))
        return cls(**kw)


def engineered_reward(state, cfg):
    d = pose_distance(state.pose, cfg.goal_pose, cfg.theta_weight)
    if cfg.decaying:
        return math.exp(-cfg.kappa * d)
    return -math.exp(cfg.kappa * d)


# -- training ---------------------------------------------------------------------------------
def train_embedding(
    dataset,
    goal_obs,
    start_obs,
    cfg=None,
    iters=20000,
    seed=0,
    arch=None,
    batch_size=32,
    lr=2e-4,
    progress=None,
):
    """Fit encoder/decoder on balanced mini-batches and package the reward model."""
    cfg = cfg or models.TripletConfig()
    arch = arch or models.ArchConfig()
    neigh, far = dataset.class_indices()
    if len(neigh) == 0 or len(far) == 0:
        raise DatasetError("dataset is missing the " + ("neighboring" if len(neigh) == 0 else "non-neighboring") + " class")
    rng = np.random.default_rng(seed)
    encoder = models.Encoder(arch, rng)
    decoder = models.Decoder(arch, rng)
    opt = nn.Adam(encoder.parameters() + decoder.parameters(), lr=lr)
    half = batch_size // 2
    history = []
    pairs = dataset.pairs
    for it in range(1, iters + 1):
        chosen = np.concatenate(
            [rng.choice(neigh, size=half, replace=len(neigh) < half), rng.choice(far, size=half, replace=len(far) < half)]
        )
        batch = [pairs[i] for i in chosen]
        rows = [goal_obs]
        keys = {}
        ia, ib = [], []
        for p in batch:
            for obs, node, dest in ((p.obs_a, p.node_a, ia), (p.obs_b, p.node_b, ib)):
                key = node if node is not None else ("obj", id(obs))
                if key not in keys:
                    keys[key] = len(rows)
                    rows.append(obs)
                dest.append(keys[key])
        fixed, wrist, ft = models.stack_observations(rows, encoder.dtype)
        t_a = np.array([p.t_a for p in batch])
        t_b = np.array([p.t_b for p in batch])
        opt.zero_grad()
        total, trip, recon = models.batch_loss(encoder, decoder, fixed, wrist, ft, np.array(ia), np.array(ib), t_a, t_b, cfg)
        value = float(total.data)
        if not math.isfinite(value):
            raise DivergenceError(f"non-finite loss at iteration {it}")
        total.backward()
        opt.step()
        history.append((it, float(trip.data), float(recon.data) if recon is not None else 0.0, value))
        if progress is not None:
            progress(it, history[-1])
    model = RewardModel.from_encoder(encoder, goal_obs, start_obs, triplet=cfg, loss_log=history)
    model.decoder = decoder
    return model


def smoothed(values, window=100):
    values = np.asarray(values, dtype=float)
    if len(values) == 0:
        return values
    c = np.cumsum(np.insert(values, 0, 0.0))
    out = np.empty(len(values))
    for i in range(len(values)):
        lo = max(0, i + 1 - window)
        out[i] = (c[i + 1] - c[lo]) / (i + 1 - lo)
    return out


def write_loss_log(history, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "triplet", "reconstruction", "total"])
        for row in history:
            w.writerow([row[0], repr(row[1]), repr(row[2]), repr(row[3])])


# -- persistence ----------------------------------------------------------------------------
def save_reward_model(model, path):
    tensors = {f"encoder.{k}": v for k, v in model.encoder.state_dict().items()}
    tensors["anchor.goal"] = np.asarray(model.latent_goal, dtype=np.float64)
    tensors["anchor.start"] = np.asarray(model.latent_start, dtype=np.float64)
    header = {
        "kind": "reward-model",
        "arch": model.encoder.arch.to_dict(),
        "triplet": model.triplet.to_dict(),
        "denom": model.denom,
        "clamp_output": model.clamp_output,
        "dtype": np.dtype(model.encoder.dtype).name,
    }
    nn.save_checkpoint(path, tensors, header)


def load_reward_model(path):
    header, tensors = nn.load_checkpoint(path)
    if header.get("kind") != "reward-model":
        raise nn.CheckpointError("checkpoint does not hold a reward model")
    arch = models.ArchConfig.from_dict(header["arch"])
    encoder = models.Encoder(arch, np.random.default_rng(0), dtype=np.dtype(header["dtype"]).type)
    encoder.load_state_dict({k[len("encoder.") :]: v for k, v in tensors.items() if k.startswith("encoder.")})
    return RewardModel(
        encoder,
        tensors["anchor.goal"],
        tensors["anchor.start"],
        float(header["denom"]),
        header["clamp_output"],
        models.TripletConfig(**header["triplet"]),
    )
