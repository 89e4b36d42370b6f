"""Planar peg/slot insertion simulator.

The held object is a rectangle whose body frame sits at the peg tip (bottom
centre) and extends along its local +y axis.  It is driven by an
operational-space damped velocity controller

    f = -K_D (twist - twist_cmd) + f_contact

with penalty contacts against an axis-aligned fixture (two side walls around
a hole on top of a base block).  The controller term is integrated exactly
over each inner step; contact forces are held constant over the step and the
position is updated from the new velocity profile (semi-implicit).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

TASK_DEFAULTS = {
    "peg_hole": dict(clearance=2.4, peg_half_width=5.0, peg_length=30.0, hole_depth=20.0),
    "slot": dict(clearance=1.0, peg_half_width=3.0, peg_length=24.0, hole_depth=14.0),
}

BASE_COLORS = {
    "peg_hole": {"background": (0.92, 0.92, 0.90), "fixture": (0.30, 0.42, 0.72), "peg": (0.86, 0.38, 0.18)},
    "slot": {"background": (0.90, 0.92, 0.92), "fixture": (0.25, 0.25, 0.28), "peg": (0.78, 0.78, 0.80)},
}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class EnvConfig:
    task_kind: str = "peg_hole"
    clearance: float | None = None
    hole_center: tuple = (0.0, 0.0)  # (hole axis x, fixture top surface y)
    peg_half_width: float | None = None
    peg_length: float | None = None
    hole_depth: float | None = None
    rim_width: float = 10.0
    base_thickness: float = 4.0
    workspace_bounds: tuple = ((-24.0, 24.0), (-24.0, 24.0))  # ((x_lo, x_hi), (y_lo, y_hi)) around hole_center
    start_height_threshold: float = 10.0
    start_height_range: float = 6.0
    start_x_range: float = 8.0
    theta_init_range: float = 0.05
    dt_control: float = 0.01
    substeps_per_action: int = 20
    gain_matrix_KD: tuple = (80.0, 80.0, 25000.0)
    mass: float = 4.0
    inertia: float = 1250.0
    contact_stiffness: float = 1.0e4
    contact_damping: float = 50.0
    friction_coeff: float = 0.3
    friction_viscosity: float = 1.0e3
    max_penetration: float = 0.5
    action_limits: tuple = (10.0, 10.0, 0.1)
    insertion_depth: float | None = None
    angle_tolerance: float = 0.1
    image_size: int = 32
    supersample: int = 2
    wrist_view_size: float = 16.0
    ft_history_len: int = 8
    color_jitter: float = 0.1

    def __post_init__(self):
        if self.task_kind not in TASK_DEFAULTS:
            raise ConfigError(f"unknown task_kind {self.task_kind!r}")
        for key, value in TASK_DEFAULTS[self.task_kind].items():
            if getattr(self, key) is None:
                object.__setattr__(self, key, value)
        if self.insertion_depth is None:
            object.__setattr__(self, "insertion_depth", 0.75 * self.hole_depth)
        object.__setattr__(self, "hole_center", tuple(float(v) for v in self.hole_center))
        object.__setattr__(self, "gain_matrix_KD", tuple(float(v) for v in self.gain_matrix_KD))
        object.__setattr__(self, "action_limits", tuple(float(v) for v in self.action_limits))
        object.__setattr__(self, "workspace_bounds", tuple(tuple(float(v) for v in b) for b in self.workspace_bounds))
        self.validate()

    def validate(self):
        if not self.clearance > 0:
            raise ConfigError("clearance must be positive")
        if self.substeps_per_action < 1:
            raise ConfigError("substeps_per_action must be >= 1")
        if len(self.gain_matrix_KD) != 3 or min(self.gain_matrix_KD) <= 0:
            raise ConfigError("gain_matrix_KD needs three positive diagonal entries")
        if self.image_size < 8:
            raise ConfigError("image_size must be >= 8")
        if self.ft_history_len < 1:
            raise ConfigError("ft_history_len must be >= 1")
        if self.dt_control <= 0 or self.mass <= 0 or self.inertia <= 0:
            raise ConfigError("dt_control, mass and inertia must be positive")
        if self.supersample < 1:
            raise ConfigError("supersample must be >= 1")
        if min(self.action_limits) <= 0:
            raise ConfigError("action limits must be positive")
        (xl, xh), (yl, yh) = self.workspace_bounds
        if not (xl < xh and yl < yh):
            raise ConfigError("empty workspace")
        if not yl < self.start_height_threshold <= self.start_height_threshold + self.start_height_range <= yh:
            raise ConfigError("start region must lie inside the workspace")

    @property
    def hole_half_width(self):
        return self.peg_half_width + 0.5 * self.clearance

    @property
    def workspace_diagonal(self):
        (xl, xh), (yl, yh) = self.workspace_bounds
        return math.hypot(xh - xl, yh - yl)

    def to_dict(self):
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for key in ("hole_center", "gain_matrix_KD", "action_limits"):
            if key in d:
                d[key] = tuple(d[key])
        if "workspace_bounds" in d:
            d["workspace_bounds"] = tuple(tuple(b) for b in d["workspace_bounds"])
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown env config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class Contact:
    position: tuple
    normal: tuple  # unit direction of the normal force on the held object
    depth: float


@dataclass(frozen=True)
class SimState:
    pose: tuple  # (x, y, theta) of the peg tip frame
    twist: tuple = (0.0, 0.0, 0.0)
    contact_points: tuple = ()
    object_colors: dict = field(default_factory=dict, compare=False)
    step_count: int = 0

    def colors_array(self):
        return np.array([self.object_colors[k] for k in ("background", "fixture", "peg")])

    def __eq__(self, other):
        if not isinstance(other, SimState):
            return NotImplemented
        return (
            self.pose == other.pose
            and self.twist == other.twist
            and self.contact_points == other.contact_points
            and self.step_count == other.step_count
            and {k: tuple(v) for k, v in self.object_colors.items()} == {k: tuple(v) for k, v in other.object_colors.items()}
        )

    __hash__ = None


@dataclass(frozen=True)
class Action:
    twist_cmd: tuple

    @classmethod
    def clamped(cls, cmd, config):
        return cls(tuple(float(min(max(c, -lim), lim)) for c, lim in zip(cmd, config.action_limits)))


@dataclass(frozen=True)
class Observation:
    fixed_image: np.ndarray  # (S, S, 3) in [0, 1]
    wrist_image: np.ndarray  # (S, S, 3) in [0, 1]
    ft_history: np.ndarray  # (ft_history_len, 3); row 0 is the oldest reading


def wrap_angle(a):
    """Wrap to (-pi, pi]."""
    w = math.fmod(a + math.pi, 2.0 * math.pi)
    if w <= 0.0:
        w += 2.0 * math.pi
    return w - math.pi


# -- geometry ---------------------------------------------------------------
def fixture_rects(config):
    """Fixture blocks as (x0, y0, x1, y1, exposed_faces) in world coordinates."""
    cx, top = config.hole_center
    hw = config.hole_half_width
    fw = hw + config.rim_width
    bottom = top - config.hole_depth
    base = bottom - config.base_thickness
    return (
        (cx - fw, bottom, cx - hw, top, ("left", "right", "top")),
        (cx + hw, bottom, cx + fw, top, ("left", "right", "top")),
        (cx - fw, base, cx + fw, bottom, ("left", "right", "top", "bottom")),
    )


def fixture_corners(config):
    cx, top = config.hole_center
    hw = config.hole_half_width
    fw = hw + config.rim_width
    base = top - config.hole_depth - config.base_thickness
    return ((cx - hw, top), (cx + hw, top), (cx - fw, top), (cx + fw, top), (cx - fw, base), (cx + fw, base))


def peg_corners(pose, config):
    x, y, th = pose
    c, s = math.cos(th), math.sin(th)
    pw, length = config.peg_half_width, config.peg_length
    return [(x + c * u - s * v, y + s * u + c * v) for u, v in ((-pw, 0.0), (pw, 0.0), (pw, length), (-pw, length))]


_FACE_NORMALS = {"left": (-1.0, 0.0), "right": (1.0, 0.0), "bottom": (0.0, -1.0), "top": (0.0, 1.0)}


def find_contacts(pose, config):
    """Penetrating point contacts between the peg and the fixture."""
    out = []
    rects = fixture_rects(config)
    for px, py in peg_corners(pose, config):
        for x0, y0, x1, y1, faces in rects:
            if x0 < px < x1 and y0 < py < y1:
                dists = {"left": px - x0, "right": x1 - px, "bottom": py - y0, "top": y1 - py}
                face = min(faces, key=lambda f: dists[f])
                out.append(Contact((px, py), _FACE_NORMALS[face], dists[face]))
    x, y, th = pose
    c, s = math.cos(th), math.sin(th)
    pw, length = config.peg_half_width, config.peg_length
    for qx, qy in fixture_corners(config):
        dx, dy = qx - x, qy - y
        u = c * dx + s * dy
        v = -s * dx + c * dy
        if -pw < u < pw and 0.0 < v < length:
            cand = ((u + pw, (-1.0, 0.0)), (pw - u, (1.0, 0.0)), (v, (0.0, -1.0)), (length - v, (0.0, 1.0)))
            depth, (nu, nv) = min(cand, key=lambda t: t[0])
            # push the peg away from the corner: minus the peg face normal
            out.append(Contact((qx, qy), (-(c * nu - s * nv), -(s * nu + c * nv)), depth))
    return out


def contact_wrench(pose, twist, contacts, config):
    """Total (Fx, Fy, tau) on the peg about its tip, in world axes."""
    x, y, _ = pose
    vx, vy, w = twist
    k, cd = config.contact_stiffness, config.contact_damping
    mu, cv = config.friction_coeff, config.friction_viscosity
    fx = fy = tau = 0.0
    for ct in contacts:
        (cx, cy), (nx, ny), depth = ct.position, ct.normal, ct.depth
        rx, ry = cx - x, cy - y
        pvx, pvy = vx - w * ry, vy + w * rx
        vn = pvx * nx + pvy * ny
        fn = k * depth - cd * vn
        if fn <= 0.0:
            continue
        tx, ty = -ny, nx
        vt = pvx * tx + pvy * ty
        cap = mu * fn
        ft = -min(max(cv * vt, -cap), cap)
        cfx = fn * nx + ft * tx
        cfy = fn * ny + ft * ty
        fx += cfx
        fy += cfy
        tau += rx * cfy - ry * cfx
    return fx, fy, tau


# -- public operations ----------------------------------------------------------
def sample_colors(config, rng):
    base = BASE_COLORS[config.task_kind]
    j = config.color_jitter
    return {k: tuple(float(v) for v in np.clip(np.asarray(c) + rng.uniform(-j, j, 3), 0.0, 1.0)) for k, c in base.items()}


def reset(config, seed):
    """Sample a start-region state with perturbed object colors."""
    if not isinstance(config, EnvConfig):
        raise ConfigError("reset expects an EnvConfig")
    config.validate()
    rng = np.random.default_rng(seed)
    cx, top = config.hole_center
    x = cx + rng.uniform(-config.start_x_range, config.start_x_range)
    y = top + config.start_height_threshold + rng.uniform(0.0, config.start_height_range)
    th = rng.uniform(-config.theta_init_range, config.theta_init_range)
    (xl, xh), _ = config.workspace_bounds
    x = min(max(x, cx + xl), cx + xh)
    colors = sample_colors(config, rng)
    pose = (float(x), float(y), float(th))
    return SimState(pose, (0.0, 0.0, 0.0), tuple(find_contacts(pose, config)), colors, 0)


def goal_pose(config):
    """Canonical goal: upright, centred, tip resting on the hole bottom."""
    cx, top = config.hole_center
    return (cx, top - config.hole_depth, 0.0)


def make_state(pose, config, twist=(0.0, 0.0, 0.0), colors=None, step_count=0):
    if colors is None:
        colors = {k: tuple(v) for k, v in BASE_COLORS[config.task_kind].items()}
    pose = tuple(float(v) for v in pose)
    return SimState(pose, tuple(float(v) for v in twist), tuple(find_contacts(pose, config)), colors, step_count)


def _project(pose, twist, config):
    cap = config.max_penetration
    x, y, th = pose
    vx, vy, w = twist
    for _ in range(4):
        contacts = find_contacts((x, y, th), config)
        if not contacts:
            break
        deepest = max(contacts, key=lambda c: c.depth)
        excess = deepest.depth - cap
        if excess <= 0.0:
            break
        nx, ny = deepest.normal
        x += nx * excess
        y += ny * excess
        vn = vx * nx + vy * ny
        if vn < 0.0:
            vx -= vn * nx
            vy -= vn * ny
    return (x, y, th), (vx, vy, w)


def _saturate(pose, twist, config):
    cx, cy = config.hole_center
    (xl, xh), (yl, yh) = config.workspace_bounds
    x, y, th = pose
    vx, vy, w = twist
    if x < cx + xl:
        x, vx = cx + xl, max(vx, 0.0)
    elif x > cx + xh:
        x, vx = cx + xh, min(vx, 0.0)
    if y < cy + yl:
        y, vy = cy + yl, max(vy, 0.0)
    elif y > cy + yh:
        y, vy = cy + yh, min(vy, 0.0)
    return (x, y, th), (vx, vy, w)


def step(state, action, config):
    """Advance one control period (``substeps_per_action`` inner steps)."""
    cmd = action.twist_cmd if isinstance(action, Action) else tuple(action)
    cmd = tuple(min(max(float(c), -lim), lim) for c, lim in zip(cmd, config.action_limits))
    dt = config.dt_control
    masses = (config.mass, config.mass, config.inertia)
    gains = config.gain_matrix_KD
    decay = tuple(math.exp(-k / m * dt) for k, m in zip(gains, masses))
    rate = tuple(k / m for k, m in zip(gains, masses))
    pose, twist = state.pose, state.twist
    for _ in range(config.substeps_per_action):
        contacts = find_contacts(pose, config)
        wrench = contact_wrench(pose, twist, contacts, config) if contacts else (0.0, 0.0, 0.0)
        new_pose, new_twist = [], []
        for i in range(3):
            v_ss = cmd[i] + wrench[i] / gains[i]
            dv = twist[i] - v_ss
            new_twist.append(v_ss + dv * decay[i])
            new_pose.append(pose[i] + v_ss * dt + dv * (1.0 - decay[i]) / rate[i])
        pose, twist = _project(tuple(new_pose), tuple(new_twist), config)
        pose, twist = _saturate(pose, twist, config)
    return SimState(pose, twist, tuple(find_contacts(pose, config)), state.object_colors, state.step_count + 1)


def ft_reading(state, config):
    """Contact wrench on the held object in the wrist (peg) frame: (Fx, Fy, tau_z)."""
    contacts = state.contact_points
    if not contacts:
        return np.zeros(3)
    fx, fy, tau = contact_wrench(state.pose, state.twist, contacts, config)
    c, s = math.cos(state.pose[2]), math.sin(state.pose[2])
    return np.array([c * fx + s * fy, -s * fx + c * fy, tau])


def is_goal(state, config):
    cx, top = config.hole_center
    x, y, th = state.pose
    return (
        top - y > config.insertion_depth
        and abs(x - cx) < 0.5 * config.clearance
        and abs(wrap_angle(th)) < config.angle_tolerance
    )


def is_start_region(state, config):
    return state.pose[1] - config.hole_center[1] >= config.start_height_threshold


# -- rendering ----------------------------------------------------------------
_GRID_CACHE = {}


def _unit_grid(n, ss):
    """Sub-pixel sample offsets in [0, 1]: (n*ss, n*ss) arrays for columns and rows."""
    key = (n, ss)
    if key not in _GRID_CACHE:
        t = (np.arange(n * ss) + 0.5) / (n * ss)
        _GRID_CACHE[key] = np.meshgrid(t, t)
    return _GRID_CACHE[key]


def _rasterize(px, py, state, config):
    """Paint the scene at world sample points (px, py); returns (..., 3)."""
    colors = state.colors_array()
    img = np.empty(px.shape + (3,))
    img[...] = colors[0]
    fixture = np.zeros(px.shape, dtype=bool)
    for x0, y0, x1, y1, _ in fixture_rects(config):
        fixture |= (px >= x0) & (px < x1) & (py >= y0) & (py < y1)
    img[fixture] = colors[1]
    x, y, th = state.pose
    c, s = math.cos(th), math.sin(th)
    dx, dy = px - x, py - y
    u = c * dx + s * dy
    v = -s * dx + c * dy
    peg = (np.abs(u) < config.peg_half_width) & (v >= 0.0) & (v < config.peg_length)
    img[peg] = colors[2]
    return img


def _downsample(img, n, ss):
    if ss > 1:
        img = img.reshape(n, ss, n, ss, 3).mean(axis=(1, 3))
    return (np.round(img * 255.0) / 255.0).astype(np.float32)


def render_fixed(state, config):
    """Whole-workspace view; row 0 is the top of the image."""
    n, ss = config.image_size, config.supersample
    gu, gv = _unit_grid(n, ss)
    cx, cy = config.hole_center
    (xl, xh), (yl, yh) = config.workspace_bounds
    px = cx + xl + gu * (xh - xl)
    py = cy + yh - gv * (yh - yl)
    return _downsample(_rasterize(px, py, state, config), n, ss)


def render_wrist(state, config):
    """Zoomed view centred on the peg tip, rotated with the peg."""
    n, ss = config.image_size, config.supersample
    gu, gv = _unit_grid(n, ss)
    half = 0.5 * config.wrist_view_size
    u = -half + gu * config.wrist_view_size
    v = half - gv * config.wrist_view_size
    x, y, th = state.pose
    c, s = math.cos(th), math.sin(th)
    px = x + c * u - s * v
    py = y + s * u + c * v
    return _downsample(_rasterize(px, py, state, config), n, ss)


def observe(state, config, prev_obs=None):
    reading = ft_reading(state, config)
    n = config.ft_history_len
    hist = np.zeros((n, 3))
    if prev_obs is not None:
        hist[:-1] = prev_obs.ft_history[1:]
    hist[-1] = reading
    return Observation(render_fixed(state, config), render_wrist(state, config), hist)


class InsertionEnv:
    """Stateful wrapper used by rollouts: tracks state, observation and time."""

    def __init__(self, config, max_steps=100):
        self.config = config
        self.max_steps = max_steps
        self.state = None
        self.obs = None

    def reset(self, seed):
        self.state = reset(self.config, seed)
        self.obs = observe(self.state, self.config)
        return self.obs

    def step(self, cmd):
        self.state = step(self.state, Action.clamped(cmd, self.config), self.config)
        self.obs = observe(self.state, self.config, self.obs)
        success = is_goal(self.state, self.config)
        done = success or self.state.step_count >= self.max_steps
        return self.obs, success, done


def with_overrides(config, **kw):
    return replace(config, **kw)
