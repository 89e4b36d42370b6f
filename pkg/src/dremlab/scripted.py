"""Privileged scripted controllers: the expert demonstrator and the four probe policies."""
from __future__ import annotations

import enum

import numpy as np

from . import sim
from .sampler import ExpertTrajectory


class GenerationError(RuntimeError):
    pass


class ScriptedPolicyKind(str, enum.Enum):
    DIRECT_SUCCESS = "direct_success"
    ALIGN_SUCCESS = "align_success"
    SEARCH_FAIL = "search_fail"
    RANDOM = "random"


HOVER = 3.0  # height above the fixture top where the expert aligns before inserting
GAIN_X = 4.0
GAIN_TH = 4.0


def _clip(cmd, config):
    return tuple(float(np.clip(c, -l, l)) for c, l in zip(cmd, config.action_limits))


def expert_command(state, config):
    """Approach above the hole, align laterally and in angle, then insert."""
    cx, top = config.hole_center
    x, y, th = state.pose
    vmax = config.action_limits[1]
    vx = GAIN_X * (cx - x)
    w = -GAIN_TH * sim.wrap_angle(th)
    height = y - top
    aligned = abs(x - cx) < 0.25 * config.clearance and abs(th) < 0.5 * config.angle_tolerance
    if height > HOVER + 0.5 or aligned:
        vy = -vmax
    else:
        vy = GAIN_X * (HOVER - height)
    return _clip((vx, vy, w), config)


def rollout(config, seed, controller, max_steps, stop=None, record_actions=False):
    """Run ``controller(state, t) -> cmd`` from ``reset(config, seed)``.

    Returns (states, observations, actions).  ``stop(state, t)`` ends the run
    after the state it accepts has been recorded.
    """
    state = sim.reset(config, seed)
    obs = sim.observe(state, config)
    states, observations, actions = [state], [obs], []
    for t in range(max_steps):
        cmd = controller(state, t)
        state = sim.step(state, sim.Action.clamped(cmd, config), config)
        obs = sim.observe(state, config, obs)
        states.append(state)
        observations.append(obs)
        actions.append(cmd)
        if stop is not None and stop(state, t):
            break
    return states, observations, actions


def generate_expert(config, seed, max_steps=150):
    """Observation-only expert demonstration ending at the first goal state."""
    states, observations, _ = rollout(
        config, seed, lambda s, t: expert_command(s, config), max_steps, stop=lambda s, t: sim.is_goal(s, config)
    )
    if not sim.is_goal(states[-1], config):
        raise GenerationError(f"scripted expert failed to reach the goal within {max_steps} steps (seed {seed})")
    traj = ExpertTrajectory(states, observations)
    traj.validate(config)
    return traj


class _ContactPolicy:
    """Approach with a lateral offset until contact, then either align or slide away."""

    def __init__(self, config, align, offset=None, press=2.0, slide_speed=None, steps_after_loss=8):
        self.config = config
        self.align = align
        self.offset = 1.5 * config.clearance if offset is None else offset
        self.press = press
        self.slide_speed = slide_speed if slide_speed is not None else 0.8 * config.action_limits[0]
        self.steps_after_loss = steps_after_loss
        self.phase = "approach"
        self.loss_step = None
        self.contact_step = None
        self._free_steps = 0

    def __call__(self, state, t):
        cfg = self.config
        cx, top = cfg.hole_center
        x, y, th = state.pose
        vmax = cfg.action_limits[1]
        w = -GAIN_TH * sim.wrap_angle(th)
        in_contact = bool(state.contact_points)
        if self.phase == "approach":
            if in_contact:
                self.phase = "align" if self.align else "slide"
                self.contact_step = t
            else:
                return _clip((GAIN_X * (cx + self.offset - x), -vmax, w), cfg)
        if self.phase == "align":
            if y - top < -1.0:
                self.phase = "insert"
            else:
                return _clip((GAIN_X * (cx - x), -self.press, w), cfg)
        if self.phase == "insert":
            return _clip((GAIN_X * (cx - x), -vmax, w), cfg)
        if self.phase == "slide":
            # a single contact-free step is a bounce; two in a row past the rim is a loss
            self._free_steps = 0 if in_contact else self._free_steps + 1
            off_rim = x - cfg.peg_half_width > cx + cfg.hole_half_width + cfg.rim_width
            if self._free_steps >= 2 and off_rim:
                self.phase = "lost"
                self.loss_step = t - 1
            else:
                return _clip((self.slide_speed, -self.press, w), cfg)
        return _clip((self.slide_speed, 0.0, w), cfg)

    def done(self, state, t):
        if self.phase == "lost":
            return t - self.loss_step >= self.steps_after_loss
        return self.phase == "insert" and sim.is_goal(state, self.config)


def run_policy(kind, config, seed, max_steps=80):
    """Execute a probe policy; returns (states, observations, info)."""
    kind = ScriptedPolicyKind(kind)
    info = {"kind": kind.value}
    if kind is ScriptedPolicyKind.DIRECT_SUCCESS:
        states, obs, _ = rollout(
            config, seed, lambda s, t: expert_command(s, config), max_steps, stop=lambda s, t: sim.is_goal(s, config)
        )
    elif kind is ScriptedPolicyKind.RANDOM:
        rng = np.random.default_rng(seed)
        lim = np.asarray(config.action_limits)
        states, obs, _ = rollout(config, seed, lambda s, t: tuple(rng.uniform(-lim, lim)), max_steps)
    else:
        policy = _ContactPolicy(config, align=kind is ScriptedPolicyKind.ALIGN_SUCCESS)
        states, obs, _ = rollout(config, seed, policy, max_steps, stop=policy.done)
        info["contact_step"] = policy.contact_step
        info["loss_step"] = policy.loss_step
    return states, obs, info
