"""Deterministic synthetic driving world.

A scenario is a procedurally generated road (chained straights and arcs), an
ego vehicle that tracks the centreline with pure pursuit under a scripted
speed profile, a stop line that is visible until it clears, and replayed
constant-speed background agents. Everything derives from ``(seed, cfg)``.

Poses are (x, y, heading) rows in the map frame, logged at ``cfg.hz``.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import geometry

PROFILES = ("cruise", "stop", "launch")

# uint8 shades of the raster
SHADE_OFFROAD = (40, 90, 40)
SHADE_ROAD = (110, 110, 110)
SHADE_AGENT = (220, 60, 40)
SHADE_STOPLINE = (240, 240, 240)


class SimError(ValueError):
    pass


@dataclass(frozen=True)
class SimConfig:
    hz: float = 10.0
    substeps: int = 10
    duration: float = 6.5
    wheelbase: float = 2.7
    max_steer: float = 0.6
    ego_length: float = 4.5
    ego_width: float = 2.0
    road_half_width: float = 3.0
    curvature_min: float = 1 / 60
    curvature_max: float = 1 / 30
    p_arc: float = 0.35
    straight_only: bool = False
    speed_min: float = 4.0
    speed_max: float = 10.0
    accel: float = 2.0
    decel: float = 2.5
    reaction: float = 0.5
    stop_gap: float = 2.0  # logged ego stops this far (front bumper to line centre) before a stop line
    profile_weights: tuple[float, float, float] = (0.3, 0.4, 0.3)
    max_agents: int = 4
    agent_length: float = 4.5
    agent_width: float = 2.0
    # raster
    height: int = 32
    width: int = 32
    meters_per_pixel: float = 1.5
    anchor_row: int = 26

    def validate(self) -> None:
        r_min = self.wheelbase / math.tan(self.max_steer)
        if not self.straight_only and 1.0 / self.curvature_max < r_min:
            raise SimError(f"min road radius {1 / self.curvature_max:.2f} m below vehicle turning radius {r_min:.2f} m")
        if self.curvature_min > self.curvature_max:
            raise SimError("curvature_min exceeds curvature_max")
        if self.speed_min <= 0 or self.speed_max < self.speed_min:
            raise SimError("speed bounds must satisfy 0 < speed_min <= speed_max")
        if self.accel <= 0 or self.decel <= 0:
            raise SimError("accel and decel must be positive")
        if self.stop_gap <= 0.75:
            raise SimError("stop_gap must clear the painted line (half thickness 0.75 m)")
        if self.hz <= 0 or self.substeps < 1 or self.duration <= 0:
            raise SimError("hz, substeps and duration must be positive")
        if len(self.profile_weights) != len(PROFILES) or sum(self.profile_weights) <= 0:
            raise SimError("profile_weights needs one non-negative weight per profile")
        if self.width % 2:
            raise SimError("raster width must be even so the ego sits on the mirror axis")

    @property
    def n_ticks(self) -> int:
        return int(round(self.duration * self.hz)) + 1

    def to_dict(self) -> dict:
        d = asdict(self)
        d["profile_weights"] = list(self.profile_weights)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SimConfig":
        d = dict(d)
        if "profile_weights" in d:
            d["profile_weights"] = tuple(d["profile_weights"])
        return cls(**d)


class Path2:
    """Dense centreline polyline with arc length, tangent heading and projection."""

    def __init__(self, points: np.ndarray):
        self.points = np.asarray(points, dtype=np.float64)
        seg = np.diff(self.points, axis=0)
        self.seg_len = np.hypot(seg[:, 0], seg[:, 1])
        self.s = np.concatenate([[0.0], np.cumsum(self.seg_len)])
        self.heading = np.arctan2(seg[:, 1], seg[:, 0])

    @property
    def length(self) -> float:
        return float(self.s[-1])

    def at(self, s: float) -> tuple[float, float, float]:
        """(x, y, tangent heading) at arc length ``s`` (clamped to the path)."""
        s = min(max(s, 0.0), self.length)
        i = int(np.searchsorted(self.s, s, side="right") - 1)
        i = min(max(i, 0), len(self.seg_len) - 1)
        u = (s - self.s[i]) / self.seg_len[i]
        p = self.points[i] + u * (self.points[i + 1] - self.points[i])
        return float(p[0]), float(p[1]), float(self.heading[i])

    def project(self, pts: np.ndarray, window: tuple[float, float] | None = None):
        """Nearest-point arc length, unsigned distance and signed lateral offset (left positive).

        ``pts`` is (N, 2). ``window`` restricts the search to an arc-length interval.
        """
        pts = np.atleast_2d(np.asarray(pts, dtype=np.float64))
        lo, hi = 0, len(self.seg_len)
        if window is not None:
            lo = max(int(np.searchsorted(self.s, window[0])) - 1, 0)
            hi = min(int(np.searchsorted(self.s, window[1])) + 1, len(self.seg_len))
        a = self.points[lo:hi]
        d = self.points[lo + 1:hi + 1] - a
        inv_L2 = 1.0 / self.seg_len[lo:hi] ** 2
        # component-wise to avoid (N, K, 2) temporaries; this is the rendering hot spot
        rx = pts[:, 0, None] - a[None, :, 0]
        ry = pts[:, 1, None] - a[None, :, 1]
        u = (rx * d[:, 0] + ry * d[:, 1]) * inv_L2
        np.clip(u, 0.0, 1.0, out=u)
        ex = rx - u * d[:, 0]
        ey = ry - u * d[:, 1]
        dist2 = ex * ex + ey * ey
        j = np.argmin(dist2, axis=1)
        rows = np.arange(len(pts))
        dist = np.sqrt(dist2[rows, j])
        s = self.s[lo + j] + u[rows, j] * self.seg_len[lo + j]
        cross = d[j, 0] * ry[rows, j] - d[j, 1] * rx[rows, j]
        return s, dist, np.where(cross >= 0, dist, -dist)


def build_centerline(segments: list[tuple[float, float]], start=(0.0, 0.0, 0.0), ds: float = 0.5) -> np.ndarray:
    """Sample a chain of (length, curvature) segments at spacing ``ds`` with exact arc chords."""
    x, y, th = start
    pts = [(x, y)]
    for length, kappa in segments:
        n = max(1, int(math.ceil(length / ds)))
        step = length / n
        for _ in range(n):
            half = 0.5 * kappa * step
            chord = step * (math.sin(half) / half if half != 0.0 else 1.0)
            x += chord * math.cos(th + half)
            y += chord * math.sin(th + half)
            th += kappa * step
            pts.append((x, y))
    return np.array(pts)


@dataclass
class Agent:
    s0: float
    speed: float
    offset: float
    length: float
    width: float
    poses: np.ndarray = field(default=None, repr=False)  # (n_ticks, 3)


@dataclass
class Scenario:
    seed: int
    hz: float
    road_half_width: float
    centerline: np.ndarray
    ego: np.ndarray  # (n_ticks, 3) map-frame poses
    ego_speed: np.ndarray  # (n_ticks,)
    ego_length: float
    ego_width: float
    agents: list[Agent]
    profile: str
    stop_line_s: float | None = None
    green_time: float | None = None
    segments: list[tuple[float, float]] = field(default_factory=list)
    _path: Path2 | None = field(default=None, repr=False, compare=False)

    @property
    def path(self) -> Path2:
        if self._path is None:
            self._path = Path2(self.centerline)
        return self._path

    @property
    def n_ticks(self) -> int:
        return len(self.ego)

    def state(self, tick: int) -> "WorldState":
        return WorldState(tick, self.ego[tick].copy(), float(self.ego_speed[tick]),
                          [a.poses[tick].copy() for a in self.agents])

    def stop_line_visible(self, tick: int) -> bool:
        return self.stop_line_s is not None and self.green_time is not None and tick / self.hz < self.green_time

    def to_dict(self) -> dict:
        return {
            "format": "drivelm-scenario/1",
            "seed": self.seed, "hz": self.hz, "road_half_width": self.road_half_width,
            "centerline": self.centerline.tolist(), "ego": self.ego.tolist(),
            "ego_speed": self.ego_speed.tolist(), "ego_length": self.ego_length, "ego_width": self.ego_width,
            "agents": [{"s0": a.s0, "speed": a.speed, "offset": a.offset, "length": a.length,
                        "width": a.width, "poses": a.poses.tolist()} for a in self.agents],
            "profile": self.profile, "stop_line_s": self.stop_line_s, "green_time": self.green_time,
            "segments": [list(s) for s in self.segments],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Scenario":
        if d.get("format") != "drivelm-scenario/1":
            raise SimError(f"unsupported scenario format {d.get('format')!r}")
        agents = [Agent(a["s0"], a["speed"], a["offset"], a["length"], a["width"], np.array(a["poses"]))
                  for a in d["agents"]]
        return cls(d["seed"], d["hz"], d["road_half_width"], np.array(d["centerline"]), np.array(d["ego"]),
                   np.array(d["ego_speed"]), d["ego_length"], d["ego_width"], agents, d["profile"],
                   d["stop_line_s"], d["green_time"], [tuple(s) for s in d["segments"]])

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path: str | Path) -> "Scenario":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class WorldState:
    tick: int
    ego: np.ndarray  # (x, y, heading)
    speed: float
    agents: list[np.ndarray]


def speed_profile(kind: str, v_cruise: float, cfg: SimConfig, t_brake: float = 0.0, t_green: float = 0.0):
    """Piecewise-linear speed as a function of time, plus the time the ego starts moving again."""
    a, b = cfg.accel, cfg.decel
    if kind == "cruise":
        return (lambda t: v_cruise), None
    if kind == "stop":
        t_stopped = t_brake + v_cruise / b
        t_go = max(t_green, t_stopped) + cfg.reaction

        def v(t):
            if t < t_brake:
                return v_cruise
            if t < t_stopped:
                return v_cruise - b * (t - t_brake)
            if t < t_go:
                return 0.0
            return min(v_cruise, a * (t - t_go))
        return v, t_go
    if kind == "launch":
        t_go = t_green + cfg.reaction
        return (lambda t: 0.0 if t < t_go else min(v_cruise, a * (t - t_go))), t_go
    raise SimError(f"unknown speed profile {kind!r}")


def _pure_pursuit_run(path: Path2, s_start: float, vfun, cfg: SimConfig):
    """Integrate the kinematic bicycle along ``path``; returns ego poses and speeds per tick."""
    x, y, th = path.at(s_start)
    dt = 1.0 / (cfg.hz * cfg.substeps)
    n = cfg.n_ticks
    poses = np.empty((n, 3))
    speeds = np.empty(n)
    s_hint = s_start
    for tick in range(n):
        poses[tick] = (x, y, th)
        speeds[tick] = vfun(tick / cfg.hz)
        if tick == n - 1:
            break
        for sub in range(cfg.substeps):
            t = (tick * cfg.substeps + sub) * dt
            v = vfun(t)
            if v <= 0.0:
                continue
            s_proj, _, _ = path.project(np.array([[x, y]]), (s_hint - 5.0, s_hint + 20.0))
            s_hint = float(s_proj[0])
            ld = max(4.0, 0.8 * v)
            gx, gy, _ = path.at(s_hint + ld)
            dxg, dyg = gx - x, gy - y
            alpha = math.atan2(dyg, dxg) - th
            dist = math.hypot(dxg, dyg)
            delta = math.atan2(2.0 * cfg.wheelbase * math.sin(alpha), dist)
            delta = min(max(delta, -cfg.max_steer), cfg.max_steer)
            x += v * math.cos(th) * dt
            y += v * math.sin(th) * dt
            th += v / cfg.wheelbase * math.tan(delta) * dt
    return poses, speeds


def _agent_poses(path: Path2, s0: float, speed: float, offset: float, n: int, hz: float) -> np.ndarray:
    out = np.empty((n, 3))
    for k in range(n):
        px, py, h = path.at(s0 + speed * k / hz)
        out[k] = (px - offset * math.sin(h), py + offset * math.cos(h), h)
    return out


def gen_scenario(seed: int, cfg: SimConfig = SimConfig(), profile: str | None = None) -> Scenario:
    """Generate a scenario from ``seed``; ``profile`` forces the speed profile family."""
    cfg.validate()
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x5CE]))
    v_c = float(rng.uniform(cfg.speed_min, cfg.speed_max))
    kind = profile or PROFILES[int(rng.choice(len(PROFILES), p=np.array(cfg.profile_weights) / sum(cfg.profile_weights)))]
    if kind not in PROFILES:
        raise SimError(f"unknown speed profile {kind!r}")
    t_brake = float(rng.uniform(0.0, 3.0))
    t_green = float(rng.uniform(0.0, 4.0))
    if kind == "stop":
        t_green = t_brake + v_c / cfg.decel + float(rng.uniform(0.0, 3.0))
    vfun, t_go = speed_profile(kind, v_c, cfg, t_brake, t_green)

    # road long enough for the drive, the lookahead and the raster footprint
    behind = 40.0
    need = behind + cfg.speed_max * cfg.duration + 120.0
    segments: list[tuple[float, float]] = [(behind + float(rng.uniform(0.0, 15.0)), 0.0)]
    total = segments[0][0]
    while total < need:
        if not cfg.straight_only and rng.random() < cfg.p_arc:
            kappa_cap = min(cfg.curvature_max, 3.0 / v_c ** 2)
            kappa = float(rng.uniform(min(cfg.curvature_min, kappa_cap), kappa_cap)) * (1 if rng.random() < 0.5 else -1)
            length = float(rng.uniform(15.0, 40.0))
        else:
            kappa, length = 0.0, float(rng.uniform(10.0, 40.0))
        segments.append((length, kappa))
        total += length
    start = (0.0, 0.0, float(rng.uniform(-math.pi, math.pi)))
    centerline = build_centerline(segments, start)
    path = Path2(centerline)
    ego, speed = _pure_pursuit_run(path, behind, vfun, cfg)

    stop_line_s = None
    if kind in ("stop", "launch"):
        stopped = int(math.ceil((t_go - cfg.reaction) * cfg.hz)) if kind == "launch" else \
            int(math.ceil((t_brake + v_c / cfg.decel) * cfg.hz))
        stopped = min(max(stopped, 0), len(ego) - 1)
        s_stop = float(path.project(ego[stopped, None, :2])[0][0])
        stop_line_s = s_stop + cfg.ego_length / 2 + cfg.stop_gap

    sc = Scenario(int(seed), cfg.hz, cfg.road_half_width, centerline, ego, speed, cfg.ego_length,
                  cfg.ego_width, [], kind, stop_line_s, t_green if stop_line_s is not None else None,
                  segments, path)

    s_ego0 = behind
    n_agents = int(rng.integers(0, cfg.max_agents + 1))
    for _ in range(n_agents):
        if rng.random() < 0.5:
            ag = Agent(s_ego0 + float(rng.uniform(25.0, 60.0)), float(v_c + rng.uniform(1.0, 4.0)), 0.0,
                       cfg.agent_length, cfg.agent_width)
        else:
            side = 1.0 if rng.random() < 0.5 else -1.0
            ag = Agent(s_ego0 + float(rng.uniform(0.0, 70.0)), 0.0,
                       side * (cfg.road_half_width + 0.5 + cfg.agent_width / 2), cfg.agent_length, cfg.agent_width)
        ag.poses = _agent_poses(path, ag.s0, ag.speed, ag.offset, len(ego), cfg.hz)
        sc.agents.append(ag)
    sc.agents = [a for a in sc.agents if _agent_is_safe(sc, a)]
    return sc


def _agent_is_safe(sc: Scenario, ag: Agent) -> bool:
    """Keep an agent only if the logged ego never touches it or comes within the TTC horizon."""
    from .evaluator import projected_collision, boxes_overlap
    for k in range(sc.n_ticks):
        e, a = sc.ego[k], ag.poses[k]
        if boxes_overlap(e, sc.ego_length + 1.0, sc.ego_width + 1.0, a, ag.length, ag.width):
            return False
    ego_v = _log_velocity(sc.ego, sc.hz)
    ag_v = _log_velocity(ag.poses, sc.hz)
    for k in range(sc.n_ticks):
        if projected_collision(sc.ego[k], ego_v[k], sc.ego_length + 1.0, sc.ego_width + 0.5,
                               ag.poses[k], ag_v[k], ag.length, ag.width, horizon=1.5):
            return False
    return True


def _log_velocity(poses: np.ndarray, hz: float) -> np.ndarray:
    v = np.zeros((len(poses), 2))
    if len(poses) > 1:
        d = np.diff(poses[:, :2], axis=0) * hz
        v[:-1] = d
        v[-1] = d[-1]
    return v


# ---------------------------------------------------------------- raster

def _pixel_offsets(cfg: SimConfig) -> np.ndarray:
    """(H*W, 2) ego-frame (forward, left) coordinates of pixel centres."""
    r = np.arange(cfg.height) + 0.5
    c = np.arange(cfg.width) + 0.5
    fwd = (cfg.anchor_row - r) * cfg.meters_per_pixel
    left = (cfg.width / 2 - c) * cfg.meters_per_pixel
    F, L = np.meshgrid(fwd, left, indexing="ij")
    return np.stack([F.ravel(), L.ravel()], axis=1)


def _in_box(pts: np.ndarray, pose: np.ndarray, length: float, width: float) -> np.ndarray:
    c, s = math.cos(pose[2]), math.sin(pose[2])
    rel = pts - pose[:2]
    lon = rel[:, 0] * c + rel[:, 1] * s
    lat = -rel[:, 0] * s + rel[:, 1] * c
    return (np.abs(lon) <= length / 2) & (np.abs(lat) <= width / 2)


def render(state: WorldState, scenario: Scenario, cfg: SimConfig = SimConfig()) -> np.ndarray:
    """Ego-centric top-down raster (H, W, 3) uint8; ego at ``anchor_row`` facing up, not drawn."""
    off = _pixel_offsets(cfg)
    x, y, th = state.ego
    c, s = math.cos(th), math.sin(th)
    pts = np.empty_like(off)
    pts[:, 0] = x + off[:, 0] * c - off[:, 1] * s
    pts[:, 1] = y + off[:, 0] * s + off[:, 1] * c
    path = scenario.path
    s_ego = float(path.project(np.array([[x, y]]))[0][0])
    reach = cfg.meters_per_pixel * max(cfg.height, cfg.width) * 1.5
    s_pix, dist, _ = path.project(pts, (s_ego - reach, s_ego + reach))
    img = np.empty((len(pts), 3), dtype=np.uint8)
    img[:] = SHADE_OFFROAD
    on_road = dist <= scenario.road_half_width
    img[on_road] = SHADE_ROAD
    if scenario.stop_line_visible(state.tick):
        img[on_road & (np.abs(s_pix - scenario.stop_line_s) <= 0.75)] = SHADE_STOPLINE
    for ag, pose in zip(scenario.agents, state.agents):
        img[_in_box(pts, pose, ag.length, ag.width)] = SHADE_AGENT
    return img.reshape(cfg.height, cfg.width, 3)


def to_float(img: np.ndarray) -> np.ndarray:
    return np.asarray(img, dtype=np.float32) / 255.0


# ---------------------------------------------------------------- datasets

@dataclass
class RawDataset:
    """Rendered frames, relative actions and ego poses for a batch of scenarios."""
    images: np.ndarray  # (n, T, H, W, 3) uint8
    actions: np.ndarray  # (n, T, 3) float64, action t moves frame t -> t+1
    poses: np.ndarray  # (n, T+1, 3) map-frame ego poses at frame ticks
    seeds: list[int]
    frame_hz: float
    scenarios: list[Scenario] = field(default_factory=list, repr=False)


def frame_stride(cfg: SimConfig, frame_hz: float) -> int:
    stride = cfg.hz / frame_hz
    if abs(stride - round(stride)) > 1e-9 or stride < 1:
        raise SimError(f"frame rate {frame_hz} Hz must divide the simulator rate {cfg.hz} Hz")
    return int(round(stride))


def scenario_frames(sc: Scenario, cfg: SimConfig, frames: int, frame_hz: float, start_tick: int = 0):
    """Images, relative actions and poses of ``frames`` frames sampled at ``frame_hz``."""
    stride = frame_stride(cfg, frame_hz)
    ticks = start_tick + stride * np.arange(frames + 1)
    if ticks[-1] >= sc.n_ticks:
        raise SimError(f"scenario has {sc.n_ticks} ticks, need {ticks[-1] + 1}")
    imgs = np.stack([render(sc.state(int(k)), sc, cfg) for k in ticks[:-1]])
    poses = sc.ego[ticks]
    actions = geometry.relativize_xyt(poses)
    return imgs, actions, poses


def build_dataset(n_seq: int, frames_per_seq: int, frame_hz: float, cfg: SimConfig = SimConfig(),
                  seed: int = 0, profile: str | None = None, keep_scenarios: bool = False) -> RawDataset:
    if n_seq < 1:
        raise SimError("n_seq must be >= 1")
    stride = frame_stride(cfg, frame_hz)
    need = frames_per_seq * stride + 1
    if need > cfg.n_ticks:
        cfg = replace(cfg, duration=(need - 1) / cfg.hz)
    imgs, acts, poses, seeds, scen = [], [], [], [], []
    for i in range(n_seq):
        s = scenario_seed(seed, i)
        sc = gen_scenario(s, cfg, profile)
        im, a, p = scenario_frames(sc, cfg, frames_per_seq, frame_hz)
        imgs.append(im)
        acts.append(a)
        poses.append(p)
        seeds.append(s)
        if keep_scenarios:
            scen.append(sc)
    return RawDataset(np.stack(imgs), np.stack(acts), np.stack(poses), seeds, frame_hz, scen)


def scenario_seed(base: int, index: int) -> int:
    return int(np.random.SeedSequence([int(base), int(index)]).generate_state(1)[0])
