"""Pixel-based Soft Actor-Critic for the insertion environment.

The critic owns a convolutional encoder; the actor reads the critic features
with gradients stopped.  Actions live in [-1, 1]^3 inside the learner and are
scaled to the environment limits only when stepped.
"""
from __future__ import annotations

import csv
import dataclasses
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import models, nn, sim
from . import tensor as T
from .tensor import Tensor

log = logging.getLogger(__name__)

LOG_STD_MIN = -5.0
LOG_STD_MAX = 2.0
_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


class DivergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class SacConfig:
    gamma: float = 0.99
    tau: float = 0.005
    entropy_target: float | None = None  # None -> -action_dim
    actor_lr: float = 3e-4
    critic_lr: float = 3e-4
    alpha_lr: float = 3e-4
    init_alpha: float = 0.1
    learn_alpha: bool = True
    batch_size: int = 64
    buffer_capacity: int = 100_000
    initial_random_steps: int = 1000
    update_every: int = 1  # env steps per gradient update
    episode_limit: int = 100
    eval_interval: int = 2000
    eval_episodes: int = 10
    action_limits: tuple | None = None  # None -> env action limits
    policy_image_size: int = 16
    use_ft: bool = True
    channels: tuple = (16, 32, 32, 32)
    image_feat: int = 32
    ft_feat: int = 16
    feature_dim: int = 50
    hidden: int = 128

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(self.channels))
        if self.action_limits is not None:
            object.__setattr__(self, "action_limits", tuple(self.action_limits))
        if not 0.0 < self.gamma < 1.0:
            raise sim.ConfigError("gamma must lie in (0, 1)")
        if not 0.0 < self.tau <= 1.0:
            raise sim.ConfigError("tau must lie in (0, 1]")
        if self.batch_size < 1 or self.episode_limit < 1 or self.eval_interval < 1 or self.update_every < 1:
            raise sim.ConfigError("batch_size, episode_limit, eval_interval and update_every must be >= 1")
        if self.buffer_capacity < self.batch_size:
            raise sim.ConfigError("buffer_capacity must be >= batch_size")

    @property
    def target_entropy(self):
        return -3.0 if self.entropy_target is None else self.entropy_target

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


# -- observations at policy resolution -------------------------------------------------
@dataclass
class PolicyObs:
    """uint8 images at policy resolution plus the scaled F/T window."""

    fixed: np.ndarray
    wrist: np.ndarray
    ft: np.ndarray


def _pool(img, size):
    n = img.shape[0]
    if n == size:
        return img
    k = n // size
    return img.reshape(size, k, size, k, img.shape[2]).mean(axis=(1, 3))


def to_policy_obs(obs, cfg):
    q = lambda img: np.round(_pool(np.asarray(img, dtype=np.float32), cfg.policy_image_size) * 255.0).astype(np.uint8)
    ft = (np.asarray(obs.ft_history) / np.asarray(models.FT_SCALE)).astype(np.float32)
    return PolicyObs(q(obs.fixed_image), q(obs.wrist_image), ft)


@dataclass
class Transition:
    obs: PolicyObs
    action: np.ndarray  # normalized to [-1, 1]
    reward: float
    next_obs: PolicyObs
    done: bool  # goal reached or step limit hit
    timeout: bool = False  # done because of the step limit only; still bootstraps

    def __post_init__(self):
        if not math.isfinite(self.reward):
            raise ValueError("transition reward must be finite")


class ReplayBuffer:
    """Ring buffer with uniform sampling over stored transitions."""

    def __init__(self, capacity, image_size, ft_len, ft_channels=3):
        self.capacity = int(capacity)
        img = (self.capacity, image_size, image_size, 3)
        self.fixed = np.zeros(img, np.uint8)
        self.wrist = np.zeros(img, np.uint8)
        self.ft = np.zeros((self.capacity, ft_len, ft_channels), np.float32)
        self.next_fixed = np.zeros(img, np.uint8)
        self.next_wrist = np.zeros(img, np.uint8)
        self.next_ft = np.zeros((self.capacity, ft_len, ft_channels), np.float32)
        self.action = np.zeros((self.capacity, 3), np.float32)
        self.reward = np.zeros(self.capacity, np.float64)
        self.terminal = np.zeros(self.capacity, np.float64)
        self.inserted = 0

    def __len__(self):
        return min(self.inserted, self.capacity)

    def add(self, tr):
        i = self.inserted % self.capacity
        self.fixed[i], self.wrist[i], self.ft[i] = tr.obs.fixed, tr.obs.wrist, tr.obs.ft
        self.next_fixed[i], self.next_wrist[i], self.next_ft[i] = tr.next_obs.fixed, tr.next_obs.wrist, tr.next_obs.ft
        self.action[i] = tr.action
        self.reward[i] = tr.reward
        self.terminal[i] = float(tr.done and not tr.timeout)
        self.inserted += 1

    def sample(self, batch_size, rng):
        idx = rng.integers(0, len(self), size=batch_size)
        return self.batch(idx)

    def batch(self, idx):
        f = lambda a: a[idx].astype(np.float32) / 255.0
        return {
            "fixed": f(self.fixed),
            "wrist": f(self.wrist),
            "ft": self.ft[idx],
            "next_fixed": f(self.next_fixed),
            "next_wrist": f(self.next_wrist),
            "next_ft": self.next_ft[idx],
            "action": self.action[idx],
            "reward": self.reward[idx],
            "terminal": self.terminal[idx],
        }


# -- networks --------------------------------------------------------------------------
def _arch(cfg, ft_len):
    return models.ArchConfig(
        image_size=cfg.policy_image_size,
        ft_len=ft_len,
        use_ft=cfg.use_ft,
        image_feat=cfg.image_feat,
        ft_feat=cfg.ft_feat,
        channels=cfg.channels + (cfg.channels[-1],) * 6,
        ft_conv_channels=8,
        ft_conv_layers=max(1, int(math.ceil(math.log2(ft_len)))),
    )


class PixelEncoder(nn.Module):
    """Reduced-width copy of the reward encoder, ending in a tanh feature."""

    def __init__(self, cfg, ft_len, rng):
        arch = _arch(cfg, ft_len)
        self.fixed = models.ImageEncoder(arch, rng)
        self.wrist = models.ImageEncoder(arch, rng)
        self.ft = models.FTEncoder(arch, rng) if cfg.use_ft else None
        fused = 2 * cfg.image_feat + (cfg.ft_feat if cfg.use_ft else 0)
        self.fc = nn.Linear(fused, cfg.feature_dim, rng)

    def forward(self, fixed, wrist, ft):
        parts = [T.relu(self.fixed(Tensor(fixed))), T.relu(self.wrist(Tensor(wrist)))]
        if self.ft is not None:
            parts.append(T.relu(self.ft(Tensor(ft))))
        return T.tanh(self.fc(T.concat(parts, axis=-1)))


class QHead(nn.Module):
    def __init__(self, cfg, rng):
        self.l1 = nn.Linear(cfg.feature_dim + 3, cfg.hidden, rng)
        self.l2 = nn.Linear(cfg.hidden, cfg.hidden, rng)
        self.l3 = nn.Linear(cfg.hidden, 1, rng)

    def forward(self, feat, action):
        x = T.concat([feat, action], axis=-1)
        return self.l3(T.relu(self.l2(T.relu(self.l1(x))))).reshape(-1)


class Critic(nn.Module):
    def __init__(self, cfg, ft_len, rng):
        self.encoder = PixelEncoder(cfg, ft_len, rng)
        self.q1 = QHead(cfg, rng)
        self.q2 = QHead(cfg, rng)


class Actor(nn.Module):
    def __init__(self, cfg, rng):
        self.l1 = nn.Linear(cfg.feature_dim, cfg.hidden, rng)
        self.l2 = nn.Linear(cfg.hidden, cfg.hidden, rng)
        self.mu = nn.Linear(cfg.hidden, 3, rng)
        self.log_std = nn.Linear(cfg.hidden, 3, rng)

    def forward(self, feat):
        x = T.relu(self.l2(T.relu(self.l1(feat))))
        # squash log-std into [LOG_STD_MIN, LOG_STD_MAX]
        ls = T.tanh(self.log_std(x))
        ls = ls * (0.5 * (LOG_STD_MAX - LOG_STD_MIN)) + 0.5 * (LOG_STD_MAX + LOG_STD_MIN)
        return self.mu(x), ls


def squashed_sample(mu, log_std, noise):
    """tanh-Gaussian sample and its log density (per row)."""
    u = mu + T.exp(log_std) * noise
    a = T.tanh(u)
    gauss = -0.5 * noise * noise - log_std - _HALF_LOG_2PI
    # log(1 - tanh(u)^2) = 2 (log 2 - u - softplus(-2u))
    jac = (math.log(2.0) - u - T.softplus(u * -2.0)) * 2.0
    return a, T.tsum(gauss - jac, axis=-1)


@dataclass
class SacAgent:
    cfg: SacConfig
    critic: Critic
    critic_target: Critic
    actor: Actor
    log_alpha: Tensor
    critic_opt: nn.Adam
    actor_opt: nn.Adam
    alpha_opt: nn.Adam
    ft_len: int
    updates: int = 0

    @classmethod
    def create(cls, cfg, ft_len, rng):
        critic = Critic(cfg, ft_len, rng)
        target = Critic(cfg, ft_len, rng)
        target.copy_from(critic, 1.0)
        actor = Actor(cfg, rng)
        log_alpha = nn.parameter(np.array(math.log(cfg.init_alpha), dtype=np.float64))
        return cls(
            cfg,
            critic,
            target,
            actor,
            log_alpha,
            nn.Adam(critic.parameters(), lr=cfg.critic_lr),
            nn.Adam(actor.parameters(), lr=cfg.actor_lr),
            nn.Adam([log_alpha], lr=cfg.alpha_lr),
            ft_len,
        )

    @property
    def alpha(self):
        return float(np.exp(self.log_alpha.data))

    def state_dict(self):
        out = {f"actor.{k}": v for k, v in self.actor.state_dict().items()}
        out.update({f"critic.{k}": v for k, v in self.critic.state_dict().items()})
        out.update({f"critic_target.{k}": v for k, v in self.critic_target.state_dict().items()})
        out["log_alpha"] = np.asarray(self.log_alpha.data, dtype=np.float64).reshape(1)
        return out

    def load_state_dict(self, state):
        for name, mod in (("actor", self.actor), ("critic", self.critic), ("critic_target", self.critic_target)):
            mod.load_state_dict({k[len(name) + 1 :]: v for k, v in state.items() if k.startswith(name + ".")})
        self.log_alpha.data = np.asarray(state["log_alpha"], dtype=np.float64).reshape(())


def policy_act(obs, agent, stochastic, rng=None):
    """Action in environment units for one observation (``sim.Observation`` or ``PolicyObs``)."""
    norm = policy_act_normalized(obs, agent, stochastic, rng)
    return tuple(float(v) for v in norm * np.asarray(_limits(agent.cfg)))


def policy_act_normalized(obs, agent, stochastic, rng=None):
    cfg = agent.cfg
    if isinstance(obs, sim.Observation):
        obs = to_policy_obs(obs, cfg)
    with T.no_grad():
        feat = agent.critic.encoder(
            obs.fixed[None].astype(np.float32) / 255.0, obs.wrist[None].astype(np.float32) / 255.0, obs.ft[None]
        )
        mu, log_std = agent.actor(feat)
        if not stochastic:
            return np.tanh(mu.data[0]).astype(np.float64)
        if rng is None:
            raise ValueError("stochastic actions need an rng")
        noise = rng.standard_normal(3).astype(np.float32)
        return np.tanh(mu.data[0] + np.exp(log_std.data[0]) * noise).astype(np.float64)


def _limits(cfg, env_config=None):
    if cfg.action_limits is not None:
        return cfg.action_limits
    return (env_config or sim.EnvConfig()).action_limits


@dataclass
class LossReport:
    critic_loss: float
    actor_loss: float
    alpha_loss: float
    alpha: float
    entropy: float
    target_mean: float
    target_max: float


def critic_targets(agent, batch, noise):
    """Soft Bellman targets; terminal rows reduce to the reward."""
    cfg = agent.cfg
    with T.no_grad():
        feat = agent.critic_target.encoder(batch["next_fixed"], batch["next_wrist"], batch["next_ft"])
        mu, log_std = agent.actor(feat)
        a, logp = squashed_sample(mu, log_std, Tensor(noise))
        q = np.minimum(agent.critic_target.q1(feat, a).data, agent.critic_target.q2(feat, a).data)
        soft = q.astype(np.float64) - agent.alpha * logp.data.astype(np.float64)
    return batch["reward"] + cfg.gamma * (1.0 - batch["terminal"]) * soft


def sac_update(agent, batch, rng):
    """One step for the critics, actor and temperature, then a Polyak target update."""
    cfg = agent.cfg
    n = len(batch["reward"])
    y = critic_targets(agent, batch, rng.standard_normal((n, 3)).astype(np.float32))
    yt = Tensor(y.astype(np.float32))

    agent.critic_opt.zero_grad()
    feat = agent.critic.encoder(batch["fixed"], batch["wrist"], batch["ft"])
    act = Tensor(batch["action"])
    d1 = agent.critic.q1(feat, act) - yt
    d2 = agent.critic.q2(feat, act) - yt
    critic_loss = T.mean(d1 * d1) + T.mean(d2 * d2)
    c_val = float(critic_loss.data)
    if not math.isfinite(c_val):
        raise DivergenceError(f"non-finite critic loss at update {agent.updates}")
    critic_loss.backward()
    agent.critic_opt.step()

    # actor on detached features; critic grads from this pass are discarded
    fd = Tensor(feat.data)
    agent.actor_opt.zero_grad()
    mu, log_std = agent.actor(fd)
    a, logp = squashed_sample(mu, log_std, Tensor(rng.standard_normal((n, 3)).astype(np.float32)))
    q = T.minimum(agent.critic.q1(fd, a), agent.critic.q2(fd, a))
    actor_loss = T.mean(logp * agent.alpha - q)
    a_val = float(actor_loss.data)
    if not math.isfinite(a_val):
        raise DivergenceError(f"non-finite actor loss at update {agent.updates}")
    actor_loss.backward()
    agent.actor_opt.step()
    for p in agent.critic.parameters():
        p.grad = None

    logp_np = logp.data.astype(np.float64)
    alpha_loss = 0.0
    if cfg.learn_alpha:
        agent.alpha_opt.zero_grad()
        slack = float(np.mean(logp_np + cfg.target_entropy))
        alpha_loss = -float(agent.log_alpha.data) * slack
        agent.alpha_opt.step([np.asarray(-slack, dtype=np.float64)])

    agent.critic_target.copy_from(agent.critic, cfg.tau)
    agent.updates += 1
    return LossReport(c_val, a_val, alpha_loss, agent.alpha, float(-np.mean(logp_np)), float(np.mean(y)), float(np.max(y)))


# -- training loop ---------------------------------------------------------------------
@dataclass
class CurvePoint:
    step: int
    eval_success_rate: float
    mean_eval_return: float
    critic_loss: float
    actor_loss: float
    alpha: float
    entropy: float


@dataclass
class TrainResult:
    curve: list
    agent: SacAgent
    episodes: int = 0
    train_successes: int = 0
    timings: dict = field(default_factory=dict)


def evaluate(agent, env_config, reward_fn, episodes, seed):
    """Deterministic episodes from fixed resets; returns (success rate, mean return)."""
    successes, returns = 0, []
    lim = _limits(agent.cfg, env_config)
    for k in range(episodes):
        state = sim.reset(env_config, 1_000_000 + 1000 * seed + k)
        obs = sim.observe(state, env_config)
        ret = 0.0
        for _ in range(agent.cfg.episode_limit):
            a = policy_act_normalized(obs, agent, stochastic=False) * np.asarray(lim)
            state = sim.step(state, sim.Action.clamped(tuple(a), env_config), env_config)
            obs = sim.observe(state, env_config, obs)
            ret += reward_fn(state, obs)
            if sim.is_goal(state, env_config):
                successes += 1
                break
        returns.append(ret)
    return successes / episodes, float(np.mean(returns))


def train_policy(env_config, reward_fn, sac_cfg, total_steps, seed, progress=None):
    """Alternate rollouts and updates; evaluate every ``eval_interval`` env steps.

    ``reward_fn(state, obs) -> float`` supplies every stored reward.
    """
    cfg = sac_cfg
    if cfg.action_limits is None:
        cfg = dataclasses.replace(cfg, action_limits=tuple(env_config.action_limits))
    rng = np.random.default_rng(seed)
    ft_len = env_config.ft_history_len
    agent = SacAgent.create(cfg, ft_len, rng)
    buffer = ReplayBuffer(min(cfg.buffer_capacity, max(total_steps, cfg.batch_size)), cfg.policy_image_size, ft_len)
    lim = np.asarray(_limits(cfg, env_config))
    curve = []
    report = None
    episode, ep_len, successes = 0, 0, 0
    state = sim.reset(env_config, seed * 100_003 + episode)
    obs = sim.observe(state, env_config)
    pobs = to_policy_obs(obs, cfg)
    for step in range(1, total_steps + 1):
        if step <= cfg.initial_random_steps:
            a = rng.uniform(-1.0, 1.0, size=3)
        else:
            a = policy_act_normalized(pobs, agent, stochastic=True, rng=rng)
        state = sim.step(state, sim.Action.clamped(tuple(a * lim), env_config), env_config)
        obs = sim.observe(state, env_config, obs)
        next_pobs = to_policy_obs(obs, cfg)
        r = float(reward_fn(state, obs))
        ep_len += 1
        goal = sim.is_goal(state, env_config)
        timeout = ep_len >= cfg.episode_limit and not goal
        buffer.add(Transition(pobs, a.astype(np.float32), r, next_pobs, goal or timeout, timeout))
        pobs = next_pobs
        if goal or timeout:
            successes += int(goal)
            episode += 1
            ep_len = 0
            state = sim.reset(env_config, seed * 100_003 + episode)
            obs = sim.observe(state, env_config)
            pobs = to_policy_obs(obs, cfg)
        if step > cfg.initial_random_steps and len(buffer) >= cfg.batch_size and step % cfg.update_every == 0:
            report = sac_update(agent, buffer.sample(cfg.batch_size, rng), rng)
        if step % cfg.eval_interval == 0:
            sr, ret = evaluate(agent, env_config, reward_fn, cfg.eval_episodes, seed)
            nan = float("nan")
            curve.append(
                CurvePoint(
                    step,
                    sr,
                    ret,
                    report.critic_loss if report else nan,
                    report.actor_loss if report else nan,
                    agent.alpha,
                    report.entropy if report else nan,
                )
            )
            log.info("step %d success %.2f return %.3f", step, sr, ret)
            if progress is not None:
                progress(curve[-1])
    return TrainResult(curve, agent, episode, successes)


CURVE_FIELDS = ["step", "eval_success_rate", "mean_eval_return", "critic_loss", "actor_loss", "alpha", "entropy"]


def write_curve(curve, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CURVE_FIELDS)
        for p in curve:
            w.writerow([p.step] + [repr(float(getattr(p, k))) for k in CURVE_FIELDS[1:]])


def read_curve(path):
    with open(path) as fh:
        rows = list(csv.DictReader(fh))
    return [CurvePoint(int(r["step"]), *(float(r[k]) for k in CURVE_FIELDS[1:])) for r in rows]


def save_policy(agent, path):
    nn.save_checkpoint(path, agent.state_dict(), {"kind": "sac-policy", "sac": agent.cfg.to_dict(), "ft_len": agent.ft_len})


def load_policy(path):
    header, tensors = nn.load_checkpoint(path)
    if header.get("kind") != "sac-policy":
        raise nn.CheckpointError("checkpoint does not hold a policy")
    cfg = SacConfig.from_dict(header["sac"])
    agent = SacAgent.create(cfg, header["ft_len"], np.random.default_rng(0))
    agent.load_state_dict(tensors)
    return agent
