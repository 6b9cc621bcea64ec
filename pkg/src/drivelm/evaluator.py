"""Planning evaluation: non-reactive rollout, subscores, PDMS and baselines.

Subscores are binary except ego progress:

* NC   - no overlap between the ego footprint and any agent at any tick
* DAC  - every ego footprint corner stays within the road half-width
* TTC  - no projected constant-velocity overlap within ``ttc_horizon`` seconds
* Comf - longitudinal/lateral acceleration and yaw rate within limits
* EP   - centreline progress relative to the logged future, clamped to [0, 1]

``PDMS = NC * DAC * (w_ttc*TTC + w_comf*Comf + w_ep*EP) / (w_ttc + w_comf + w_ep)``.
Every collision counts, so NC is stricter than an at-fault rule.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import geometry
from .world_sim import Scenario, SimConfig, frame_stride, render

log = logging.getLogger(__name__)

STOP_LINE_HALF = 0.75  # half thickness of the painted line, as rendered

METRICS = ("nc", "dac", "ttc", "comf", "ep", "pdms")


@dataclass(frozen=True)
class EvalConfig:
    frame_hz: float = 2.0
    history: int = 4
    horizon: int = 8
    duration: float = 4.0
    ttc_horizon: float = 1.0
    ttc_step: float = 0.1
    stopped_speed: float = 5e-3
    max_lon_accel: float = 4.0
    max_lat_accel: float = 4.0
    max_yaw_rate: float = 1.0
    min_progress: float = 0.1
    w_ttc: float = 5.0
    w_comf: float = 2.0
    w_ep: float = 5.0
    stop_line_dac: bool = True  # a shown stop line closes the lane for DAC


@dataclass
class PlanRequest:
    """What a planner sees: past frames and past actions, no ego speed or acceleration."""
    scenario: Scenario
    images: np.ndarray  # (history, H, W, 3) uint8
    actions: np.ndarray  # (history - 1, 3) relative actions between history frames
    horizon: int
    frame_hz: float
    anchor_tick: int

    def future_actions(self, cfg: EvalConfig = EvalConfig()) -> np.ndarray:
        """Logged future relative actions (only for reference planners and scoring)."""
        stride = int(round(self.scenario.hz / self.frame_hz))
        ticks = self.anchor_tick + stride * np.arange(self.horizon + 1)
        return geometry.relativize_xyt(self.scenario.ego[ticks])


Planner = Callable[[PlanRequest], Sequence[np.ndarray]]


def make_request(sc: Scenario, sim: SimConfig = SimConfig(), cfg: EvalConfig = EvalConfig()) -> PlanRequest:
    stride = frame_stride(sim, cfg.frame_hz)
    ticks = stride * np.arange(cfg.history)
    anchor = int(ticks[-1])
    if anchor + int(round(cfg.duration * sc.hz)) >= sc.n_ticks:
        raise ValueError(f"scenario {sc.seed} too short for history {cfg.history} + {cfg.duration}s rollout")
    images = np.stack([render(sc.state(int(k)), sc, sim) for k in ticks])
    actions = geometry.relativize_xyt(sc.ego[ticks]) if cfg.history > 1 else np.zeros((0, 3))
    return PlanRequest(sc, images, actions, cfg.horizon, cfg.frame_hz, anchor)


# ---------------------------------------------------------------- collision primitives

def box_corners(pose, length: float, width: float) -> np.ndarray:
    x, y, th = pose
    c, s = math.cos(th), math.sin(th)
    hl, hw = length / 2, width / 2
    local = np.array([[hl, hw], [hl, -hw], [-hl, -hw], [-hl, hw]])
    return np.array([x, y]) + local @ np.array([[c, s], [-s, c]])


def boxes_overlap(pa, la: float, wa: float, pb, lb: float, wb: float) -> bool:
    """Separating-axis test for two oriented rectangles (touching counts as overlap)."""
    ca, cb = box_corners(pa, la, wa), box_corners(pb, lb, wb)
    for th in (pa[2], pb[2]):
        for axis in (np.array([math.cos(th), math.sin(th)]), np.array([-math.sin(th), math.cos(th)])):
            pa_ = ca @ axis
            pb_ = cb @ axis
            if pa_.max() < pb_.min() or pb_.max() < pa_.min():
                return False
    return True


def projected_collision(pa, va, la, wa, pb, vb, lb, wb, horizon: float = 1.0, step: float = 0.1) -> bool:
    """Constant-velocity projection of both boxes; True on any overlap in (0, horizon]."""
    n = int(round(horizon / step))
    for i in range(1, n + 1):
        t = i * step
        qa = (pa[0] + va[0] * t, pa[1] + va[1] * t, pa[2])
        qb = (pb[0] + vb[0] * t, pb[1] + vb[1] * t, pb[2])
        if boxes_overlap(qa, la, wa, qb, lb, wb):
            return True
    return False


# ---------------------------------------------------------------- rollout

def trajectory_xyt(traj) -> np.ndarray:
    """(N, 3) rows of (x, y, unwrapped heading) from a list of 3x3 poses or an (N, 3) array."""
    if isinstance(traj, np.ndarray) and traj.ndim == 2 and traj.shape[1] == 3:
        return traj.astype(np.float64)
    rows = [geometry.pose_to_xyt(T) for T in traj]
    out = np.array(rows, dtype=np.float64).reshape(-1, 3)
    if len(out):
        out[:, 2] = np.unwrap(np.concatenate([[0.0], out[:, 2]]))[1:]
    return out


def rollout_nonreactive(traj, sc: Scenario, anchor_tick: int, plan_dt: float, duration: float = 4.0) -> np.ndarray:
    """Map-frame ego poses at simulator ticks 0..duration*hz after the anchor.

    ``traj`` holds poses relative to the anchor ego pose at times plan_dt, 2*plan_dt, ...
    and is linearly resampled (position and unwrapped heading) onto simulator ticks.
    """
    rel = trajectory_xyt(traj)
    if len(rel) * plan_dt < duration - 1e-9:
        raise ValueError(f"trajectory covers {len(rel) * plan_dt:.2f}s, need {duration}s")
    n = int(round(duration * sc.hz))
    if anchor_tick + n >= sc.n_ticks:
        raise ValueError("rollout runs past the end of the scenario log")
    ax, ay, ah = sc.ego[anchor_tick]
    c, s = math.cos(ah), math.sin(ah)
    knots = np.vstack([[0.0, 0.0, 0.0], rel])
    mx = ax + c * knots[:, 0] - s * knots[:, 1]
    my = ay + s * knots[:, 0] + c * knots[:, 1]
    mh = ah + knots[:, 2]
    kt = plan_dt * np.arange(len(knots))
    t = np.arange(n + 1) / sc.hz
    return np.stack([np.interp(t, kt, mx), np.interp(t, kt, my), np.interp(t, kt, mh)], axis=1)


# ---------------------------------------------------------------- subscores

def _velocities(timeline: np.ndarray, hz: float) -> np.ndarray:
    v = np.zeros((len(timeline), 2))
    d = np.diff(timeline[:, :2], axis=0) * hz
    v[:-1] = d
    v[-1] = d[-1]
    return v


def score_nc(timeline: np.ndarray, sc: Scenario, anchor_tick: int) -> float:
    for k, pose in enumerate(timeline):
        for ag in sc.agents:
            if boxes_overlap(pose, sc.ego_length, sc.ego_width, ag.poses[anchor_tick + k], ag.length, ag.width):
                return 0.0
    return 1.0


def score_dac(timeline: np.ndarray, sc: Scenario, anchor_tick: int = 0, stop_line: bool = True) -> float:
    """Every corner stays on the road, and (with ``stop_line``) no corner reaches a stop line while it is shown."""
    corners = np.concatenate([box_corners(p, sc.ego_length, sc.ego_width) for p in timeline])
    s, dist, _ = sc.path.project(corners)
    if not np.all(dist <= sc.road_half_width):
        return 0.0
    if stop_line and sc.stop_line_s is not None:
        front = s.reshape(len(timeline), 4).max(axis=1)
        for k in range(len(timeline)):
            if sc.stop_line_visible(anchor_tick + k) and front[k] >= sc.stop_line_s - STOP_LINE_HALF:
                return 0.0
    return 1.0


def score_ttc(timeline: np.ndarray, sc: Scenario, anchor_tick: int, cfg: EvalConfig = EvalConfig()) -> float:
    ev = _velocities(timeline, sc.hz)
    for k, pose in enumerate(timeline):
        if math.hypot(*ev[k]) < cfg.stopped_speed:
            continue
        for ag in sc.agents:
            idx = anchor_tick + k
            nxt = min(idx + 1, sc.n_ticks - 1)
            av = (ag.poses[nxt, :2] - ag.poses[nxt - 1, :2]) * sc.hz
            if projected_collision(pose, ev[k], sc.ego_length, sc.ego_width, ag.poses[idx], av,
                                   ag.length, ag.width, cfg.ttc_horizon, cfg.ttc_step):
                return 0.0
    return 1.0


def comfort_signals(timeline: np.ndarray, hz: float, window: int) -> dict[str, np.ndarray]:
    """Longitudinal/lateral acceleration and yaw rate along the timeline.

    Accelerations difference velocities ``window`` ticks apart, i.e. one plan
    interval, so the kinks of the piecewise-linear resampling are not read as
    impulses.
    """
    v = np.diff(timeline[:, :2], axis=0) * hz
    h = timeline[:-1, 2]
    speed = v[:, 0] * np.cos(h) + v[:, 1] * np.sin(h)
    yaw_rate = np.diff(timeline[:, 2]) * hz
    lon = (speed[window:] - speed[:-window]) * hz / window if len(speed) > window else np.zeros(0)
    return {"lon_accel": lon, "lat_accel": speed * yaw_rate, "yaw_rate": yaw_rate}


def score_comf(timeline: np.ndarray, sc: Scenario, anchor_tick: int = 0, cfg: EvalConfig = EvalConfig()) -> float:
    window = max(1, int(round(sc.hz / cfg.frame_hz)))
    sig = comfort_signals(timeline, sc.hz, window)
    ok = (np.all(np.abs(sig["lon_accel"]) <= cfg.max_lon_accel)
          and np.all(np.abs(sig["lat_accel"]) <= cfg.max_lat_accel)
          and np.all(np.abs(sig["yaw_rate"]) <= cfg.max_yaw_rate))
    return 1.0 if ok else 0.0


def score_ep(timeline: np.ndarray, sc: Scenario, anchor_tick: int, cfg: EvalConfig = EvalConfig()) -> float:
    n = len(timeline) - 1
    s_anchor = sc.path.project(sc.ego[anchor_tick, None, :2])[0][0]
    s_gt = sc.path.project(sc.ego[anchor_tick + n, None, :2])[0][0]
    s_plan = sc.path.project(timeline[-1, None, :2])[0][0]
    gt = s_gt - s_anchor
    if gt < cfg.min_progress or s_plan - s_anchor >= gt - 1e-9:
        return 1.0
    return float(min(max((s_plan - s_anchor) / gt, 0.0), 1.0))


def pdms(sub: dict[str, float], cfg: EvalConfig = EvalConfig()) -> float:
    weighted = (cfg.w_ttc * sub["ttc"] + cfg.w_comf * sub["comf"] + cfg.w_ep * sub["ep"]) / (
        cfg.w_ttc + cfg.w_comf + cfg.w_ep)
    return float(sub["nc"] * sub["dac"] * weighted)


def score_timeline(timeline: np.ndarray, sc: Scenario, anchor_tick: int, cfg: EvalConfig = EvalConfig()) -> dict[str, float]:
    sub = {
        "nc": score_nc(timeline, sc, anchor_tick),
        "dac": score_dac(timeline, sc, anchor_tick, cfg.stop_line_dac),
        "ttc": score_ttc(timeline, sc, anchor_tick, cfg),
        "comf": score_comf(timeline, sc, anchor_tick, cfg),
        "ep": score_ep(timeline, sc, anchor_tick, cfg),
    }
    sub["pdms"] = pdms(sub, cfg)
    return sub


def score_plan(traj, req: PlanRequest, cfg: EvalConfig = EvalConfig()) -> dict[str, float]:
    timeline = rollout_nonreactive(traj, req.scenario, req.anchor_tick, 1.0 / req.frame_hz, cfg.duration)
    return score_timeline(timeline, req.scenario, req.anchor_tick, cfg)


# ---------------------------------------------------------------- planners and baselines

def _actions_array(actions) -> np.ndarray:
    if isinstance(actions, np.ndarray):
        return actions.astype(np.float64).reshape(-1, 3)
    return np.array([a.as_array() if isinstance(a, geometry.RelativeAction) else a for a in actions],
                    dtype=np.float64).reshape(-1, 3)


def integrate_actions(actions) -> list[np.ndarray]:
    return geometry.integrate([geometry.RelativeAction.from_array(a) for a in _actions_array(actions)])


def baseline_constant_velocity(history_actions, horizon: int = 8) -> list[np.ndarray]:
    """Repeat the last observed speed straight ahead."""
    h = _actions_array(history_actions)
    if len(h) == 0:
        raise ValueError("constant velocity needs at least one history action")
    d = math.hypot(h[-1, 0], h[-1, 1])
    return integrate_actions(np.tile([d, 0.0, 0.0], (horizon, 1)))


COPY_COMPONENTS = {"x": (0,), "y": (1,), "theta": (2,), "all": (0, 1, 2)}


def ablate_copy(component: str, predicted, history_actions) -> list[np.ndarray]:
    """Overwrite one action component of every predicted step with the last history value."""
    if component not in COPY_COMPONENTS:
        raise ValueError(f"component must be one of {sorted(COPY_COMPONENTS)}")
    pred = _actions_array(predicted).copy()
    hist = _actions_array(history_actions)
    if len(hist) == 0:
        raise ValueError("copy ablation needs at least one history action")
    for c in COPY_COMPONENTS[component]:
        pred[:, c] = hist[-1, c]
    return integrate_actions(pred)


def ground_truth_planner(req: PlanRequest) -> list[np.ndarray]:
    return integrate_actions(req.future_actions())


def constant_velocity_planner(req: PlanRequest) -> list[np.ndarray]:
    return baseline_constant_velocity(req.actions, req.horizon)


# ---------------------------------------------------------------- reports

@dataclass
class EvalReport:
    nc: float
    dac: float
    ttc: float
    comf: float
    ep: float
    pdms: float
    per_scenario: list[dict] = field(default_factory=list)

    @classmethod
    def from_rows(cls, rows: list[dict]) -> "EvalReport":
        if not rows:
            return cls(0.0, 0.0, 0.0, 0.0, 0.0, 0.0, [])
        means = {m: float(np.mean([r[m] for r in rows])) for m in METRICS}
        return cls(**means, per_scenario=rows)

    def summary(self) -> dict[str, float]:
        return {m: getattr(self, m) for m in METRICS}

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json())


ZERO_ROW = {m: 0.0 for m in METRICS}


def evaluate_requests(planner: Planner, requests: Sequence[PlanRequest], cfg: EvalConfig = EvalConfig()) -> EvalReport:
    rows = []
    for req in sorted(requests, key=lambda r: r.scenario.seed):
        try:
            row = score_plan(planner(req), req, cfg)
        except Exception as exc:  # a failing planner scores zero on that scenario
            log.error("planner failed on scenario %s: %s", req.scenario.seed, exc)
            row = dict(ZERO_ROW, error=str(exc))
        rows.append({"seed": req.scenario.seed, "profile": req.scenario.profile, **row})
    return EvalReport.from_rows(rows)


def evaluate_planner(planner: Planner, scenarios: Sequence[Scenario], sim: SimConfig = SimConfig(),
                     cfg: EvalConfig = EvalConfig()) -> EvalReport:
    return evaluate_requests(planner, [make_request(sc, sim, cfg) for sc in scenarios], cfg)


def format_table(rows: dict[str, EvalReport | dict]) -> str:
    """Fixed-column table (percentages) in the order NC, DAC, TTC, Comf, EP, PDMS."""
    name_w = max([len("Method")] + [len(n) for n in rows])
    head = f"{'Method':<{name_w}} | {'NC':>6} {'DAC':>6} | {'TTC':>6} {'Comf':>6} {'EP':>6} | {'PDMS':>6}"
    lines = [head, "-" * len(head)]
    for name, rep in rows.items():
        s = rep.summary() if isinstance(rep, EvalReport) else rep
        lines.append(f"{name:<{name_w}} | {100 * s['nc']:6.1f} {100 * s['dac']:6.1f} | {100 * s['ttc']:6.1f} "
                     f"{100 * s['comf']:6.1f} {100 * s['ep']:6.1f} | {100 * s['pdms']:6.1f}")
    return "\n".join(lines)
