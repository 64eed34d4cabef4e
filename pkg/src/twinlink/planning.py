"""Joint-space motion planning over box obstacles.

Collision geometry is deliberately coarse: each arm link is a capsule around
the segment between consecutive chain points, tested against oriented boxes
by sampling points along the segment. Sampling density adapts to the safety
margin so a contact deeper than the margin cannot slip between samples.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import (
    Pose3D,
    quat_conjugate,
    quat_from_matrix,
    quat_multiply,
    quat_to_matrix,
    rotation_vector,
)
from .kinematics import (
    ArmModel,
    JointState,
    _fk_frames,
    _jacobian_from_frames,
    chain_points,
    chain_points_many,
)

DEFAULT_STEP = 0.1
DEFAULT_CONNECT = 0.1
DEFAULT_GOAL_BIAS = 0.1
DEFAULT_MAX_ITERS = 20000

# Joint-limit repulsion activates inside this band (radians).
LIMIT_BAND = 0.1


class PlanningFailure(Exception):
    """Sampling budget exhausted without connecting to the goal."""


class InvalidEndpoint(Exception):
    """Start or goal configuration is out of limits or in collision."""


@dataclass(frozen=True)
class ObstacleBox:
    """Oriented box obstacle given by a center pose and full extents."""

    pose: Pose3D
    size: np.ndarray

    def __post_init__(self):
        size = np.asarray(self.size, dtype=float).reshape(3)
        if np.any(size <= 0):
            raise ValueError(f"box extents must be positive, got {size}")
        object.__setattr__(self, "size", size)


class CollisionWorld:
    """Obstacle set plus the arm's capsule proxy.

    ``link_radii`` holds one capsule radius per arm link, base link first.
    ``skip_links`` exempts that many leading links from checks; the base
    column stands on the table and would otherwise always be in contact.
    """

    def __init__(self, obstacles, link_radii, safety_margin: float = 0.01,
                 skip_links: int = 1):
        if safety_margin <= 0:
            raise ValueError("safety_margin must be positive")
        self.obstacles = list(obstacles)
        self.link_radii = np.asarray(link_radii, dtype=float)
        if np.any(self.link_radii < 0):
            raise ValueError("link radii must be non-negative")
        self.safety_margin = float(safety_margin)
        self.skip_links = int(skip_links)
        self._centers = np.array([b.pose.position for b in self.obstacles]
                                 ).reshape(-1, 3)
        self._rots = np.array([quat_to_matrix(b.pose.quat) for b in self.obstacles]
                              ).reshape(-1, 3, 3)
        self._half = np.array([0.5 * b.size for b in self.obstacles]).reshape(-1, 3)
        self._samplers: dict[int, tuple] = {}

    def _sampler(self, arm: ArmModel):
        """Per-arm cached sample layout: link index, fraction, radius per point."""
        key = id(arm)
        cached = self._samplers.get(key)
        if cached is not None:
            return cached
        n_links = arm.joint_count
        if self.link_radii.shape != (n_links,):
            raise ValueError(
                f"world has {self.link_radii.size} link radii, arm has {n_links} links")
        seg_idx, fracs, radii = [], [], []
        for i in range(self.skip_links, n_links):
            length = float(np.linalg.norm(arm._offset_pos[i]))
            # keep sample spacing under the margin so deep contacts cannot hide
            count = max(8, int(np.ceil(length / self.safety_margin)) + 1)
            f = np.linspace(0.0, 1.0, count)
            seg_idx.extend([i] * count)
            fracs.extend(f)
            radii.extend([self.link_radii[i]] * count)
        layout = (np.array(seg_idx, dtype=int), np.array(fracs), np.array(radii))
        self._samplers[key] = layout
        return layout

    def link_points(self, arm: ArmModel, points: np.ndarray):
        """Sample points along the checked links plus their radii."""
        seg_idx, fracs, radii = self._sampler(arm)
        starts = points[seg_idx]
        ends = points[seg_idx + 1]
        return starts + fracs[:, None] * (ends - starts), radii


def check_collision(world: CollisionWorld, arm: ArmModel, angles) -> bool:
    """True when any sampled link point lies within margin of any obstacle."""
    if not world.obstacles:
        return False
    pts, radii = world.link_points(arm, chain_points(arm, angles))
    thresh = radii + world.safety_margin
    for c, rot, half in zip(world._centers, world._rots, world._half):
        local = (pts - c) @ rot  # rot columns are box axes
        d = local - np.clip(local, -half, half)
        if np.any(np.einsum("ij,ij->i", d, d) <= thresh * thresh):
            return True
    return False


def _any_collision(world: CollisionWorld, arm: ArmModel,
                   configs: np.ndarray) -> bool:
    """check_collision over a batch of configurations, any-of."""
    if not world.obstacles or configs.shape[0] == 0:
        return False
    pts = chain_points_many(arm, configs)
    seg_idx, fracs, radii = world._sampler(arm)
    starts = pts[:, seg_idx]
    ends = pts[:, seg_idx + 1]
    samples = (starts + fracs[None, :, None] * (ends - starts)).reshape(-1, 3)
    thresh = radii + world.safety_margin
    thresh2 = np.tile(thresh * thresh, configs.shape[0])
    for c, rot, half in zip(world._centers, world._rots, world._half):
        local = (samples - c) @ rot
        d = local - np.clip(local, -half, half)
        if np.any(np.einsum("ij,ij->i", d, d) <= thresh2):
            return True
    return False


def _edge_free(world: CollisionWorld, arm: ArmModel, qa, qb,
               resolution: float) -> bool:
    """Densified straight-line check, endpoints excluded at qa, included at qb."""
    dist = float(np.linalg.norm(qb - qa))
    n = max(1, int(np.ceil(dist / resolution)))
    steps = (np.arange(1, n + 1) / n)[:, None]
    return not _any_collision(world, arm, qa + steps * (qb - qa))


@dataclass(frozen=True)
class JointPath:
    """Waypoint polyline in joint space; first row start, last row goal."""

    waypoints: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.waypoints, dtype=float)
        if w.ndim != 2 or w.shape[0] < 1:
            raise ValueError("a path needs at least one waypoint row")
        object.__setattr__(self, "waypoints", w)

    def length(self) -> float:
        return float(np.sum(np.linalg.norm(np.diff(self.waypoints, axis=0), axis=1)))


@dataclass
class RrtTree:
    """Growable node store with parent links for path extraction."""

    dim: int
    step: float
    connect_threshold: float
    nodes: np.ndarray = field(init=False)
    parents: list[int] = field(init=False)
    count: int = field(init=False, default=0)

    def __post_init__(self):
        self.nodes = np.empty((256, self.dim))
        self.parents = []

    def add(self, q: np.ndarray, parent: int) -> int:
        if self.count == self.nodes.shape[0]:
            self.nodes = np.vstack([self.nodes, np.empty_like(self.nodes)])
        self.nodes[self.count] = q
        self.parents.append(parent)
        self.count += 1
        return self.count - 1

    def nearest(self, q: np.ndarray) -> int:
        diff = self.nodes[:self.count] - q
        return int(np.argmin(np.einsum("ij,ij->i", diff, diff)))

    def extract(self, leaf: int) -> np.ndarray:
        chain = [leaf]
        while self.parents[chain[-1]] >= 0:
            chain.append(self.parents[chain[-1]])
        return self.nodes[chain[::-1]].copy()


@dataclass(frozen=True)
class RrtParams:
    step: float = DEFAULT_STEP
    connect_threshold: float = DEFAULT_CONNECT
    goal_bias: float = DEFAULT_GOAL_BIAS
    max_iters: int = DEFAULT_MAX_ITERS
    rng_seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.goal_bias <= 1.0:
            raise ValueError("goal_bias must lie in [0, 1]")
        if self.step <= 0 or self.connect_threshold <= 0:
            raise ValueError("step and connect_threshold must be positive")


def rrt_plan(world: CollisionWorld, arm: ArmModel, q_start, q_goal,
             params: RrtParams = RrtParams()) -> JointPath:
    """Goal-biased single-tree RRT in joint space.

    Edges are validated at a tenth of the extension step, the same grid a
    densified path recheck walks, so accepted paths re-verify cleanly. A free
    straight line start-to-goal short-circuits the search before any sampling,
    which keeps the common uncluttered case cheap and consumes no randomness.
    """
    q_start = np.asarray(q_start, dtype=float)
    q_goal = np.asarray(q_goal, dtype=float)
    for name, q in (("start", q_start), ("goal", q_goal)):
        try:
            arm.check_limits(q)
        except ValueError as exc:
            raise InvalidEndpoint(f"{name} configuration out of limits: {exc}")
        if check_collision(world, arm, q):
            raise InvalidEndpoint(f"{name} configuration is in collision")

    resolution = params.step / 10.0
    if np.linalg.norm(q_goal - q_start) < 1e-12:
        return JointPath(q_start[None, :].copy())
    if _edge_free(world, arm, q_start, q_goal, resolution):
        return JointPath(np.vstack([q_start, q_goal]))

    rng = np.random.default_rng(params.rng_seed)
    tree = RrtTree(dim=q_start.size, step=params.step,
                   connect_threshold=params.connect_threshold)
    tree.add(q_start, parent=-1)
    lo, hi = arm.limits_lo, arm.limits_hi
    for _ in range(params.max_iters):
        if rng.uniform() < params.goal_bias:
            sample = q_goal
        else:
            sample = rng.uniform(lo, hi)
        ni = tree.nearest(sample)
        q_near = tree.nodes[ni]
        delta = sample - q_near
        dist = float(np.linalg.norm(delta))
        if dist < 1e-12:
            continue
        q_new = sample if dist <= params.step else q_near + (params.step / dist) * delta
        if not _edge_free(world, arm, q_near, q_new, resolution):
            continue
        idx = tree.add(q_new, parent=ni)
        if (np.linalg.norm(q_goal - q_new) <= params.connect_threshold
                and _edge_free(world, arm, q_new, q_goal, resolution)):
            leaf = tree.add(q_goal, parent=idx)
            return JointPath(tree.extract(leaf))
    raise PlanningFailure(
        f"no path after {params.max_iters} iterations ({tree.count} nodes)")


def shortcut_path(world: CollisionWorld, arm: ArmModel, path: JointPath,
                  attempts: int = 60, rng_seed: int = 0,
                  resolution: float = DEFAULT_STEP / 10.0) -> JointPath:
    """Random shortcutting; never lengthens the path, keeps endpoints fixed."""
    waypoints = [row for row in path.waypoints]
    rng = np.random.default_rng(rng_seed)
    for _ in range(attempts):
        m = len(waypoints)
        if m < 3:
            break
        i = int(rng.integers(0, m - 2))
        j = int(rng.integers(i + 2, m))
        if _edge_free(world, arm, waypoints[i], waypoints[j], resolution):
            del waypoints[i + 1:j]
    return JointPath(np.array(waypoints))


@dataclass(frozen=True)
class RmpGains:
    attract: float = 1.5
    repulse: float = 0.8
    damping: float = 0.1


def _point_jacobian(arm: ArmModel, points, entries, link: int,
                    point: np.ndarray) -> np.ndarray:
    """Positional Jacobian of a point rigidly attached to the given link."""
    jac = np.zeros((3, arm.joint_count))
    for i in range(link + 1):
        axis_world = entries[i] @ arm.axes[i]
        jac[:, i] = np.cross(axis_world, point - points[i])
    return jac


def rmp_step(arm: ArmModel, state: JointState, target: Pose3D,
             world: CollisionWorld, gains: RmpGains = RmpGains(),
             qdot_now: np.ndarray | None = None) -> np.ndarray:
    """One reactive velocity command toward an end-effector target.

    Combines a pseudoinverse-Jacobian attractor with joint-limit and obstacle
    repulsors and a damping term, clipped to per-joint velocity limits. With
    the arm at the target and no repulsor active the command is exactly zero.
    """
    arm.check_limits(state.angles)
    points, entries, rot = _fk_frames(arm, state.angles)
    jac = _jacobian_from_frames(arm, points, entries)

    q_err = quat_multiply(target.quat, quat_conjugate(quat_from_matrix(rot)))
    twist = gains.attract * np.concatenate([target.position - points[-1],
                                            rotation_vector(q_err)])
    qdot = np.linalg.pinv(jac, rcond=1e-6) @ twist

    # joint-limit repulsor, active inside the band next to either limit
    lo_gap = state.angles - arm.limits_lo
    hi_gap = arm.limits_hi - state.angles
    qdot += gains.repulse * np.where(lo_gap < LIMIT_BAND,
                                     (LIMIT_BAND - lo_gap) / LIMIT_BAND, 0.0)
    qdot -= gains.repulse * np.where(hi_gap < LIMIT_BAND,
                                     (LIMIT_BAND - hi_gap) / LIMIT_BAND, 0.0)

    # obstacle repulsor on the closest sampled link point
    if world.obstacles:
        pts, radii = world.link_points(arm, points)
        seg_idx = world._sampler(arm)[0]
        active = 2.0 * world.safety_margin
        best = None  # (clearance, point index, away direction)
        for c, rot_b, half in zip(world._centers, world._rots, world._half):
            local = (pts - c) @ rot_b
            clamped = np.clip(local, -half, half)
            d = local - clamped
            dist = np.sqrt(np.einsum("ij,ij->i", d, d)) - radii
            k = int(np.argmin(dist))
            if dist[k] < active and (best is None or dist[k] < best[0]):
                away = rot_b @ d[k]
                norm = np.linalg.norm(away)
                if norm > 1e-12:
                    best = (float(dist[k]), k, away / norm)
        if best is not None:
            clearance, k, away = best
            mag = gains.repulse * (active - clearance) / active
            pj = _point_jacobian(arm, points, entries, int(seg_idx[k]), pts[k])
            qdot += pj.T @ (mag * away)

    if qdot_now is not None:
        qdot = qdot - gains.damping * np.asarray(qdot_now, dtype=float)
    return np.clip(qdot, -arm.max_velocities, arm.max_velocities)


@dataclass(frozen=True)
class Trajectory:
    """Uniformly sampled joint trajectory with a constant gripper channel."""

    dt: float
    times: np.ndarray
    angles: np.ndarray
    grippers: np.ndarray

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float).reshape(-1)
        angles = np.asarray(self.angles, dtype=float)
        grippers = np.asarray(self.grippers, dtype=float).reshape(-1)
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if angles.ndim != 2 or angles.shape[0] != times.size:
            raise ValueError("angles must be (n_samples, n_joints)")
        if grippers.size != times.size:
            raise ValueError("gripper channel length mismatch")
        if times.size > 1:
            gaps = np.diff(times)
            if np.any(gaps <= 0):
                raise ValueError("sample times must be strictly increasing")
            if np.any(np.abs(gaps - self.dt) > 1e-9):
                raise ValueError("sample times must be uniform at dt")
        if np.any(grippers < 0) or np.any(grippers > 1):
            raise ValueError("gripper values must lie in [0, 1]")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "angles", angles)
        object.__setattr__(self, "grippers", grippers)

    @property
    def n_samples(self) -> int:
        return self.times.size

    @property
    def duration(self) -> float:
        return float(self.times[-1] - self.times[0])

    def last_state(self) -> JointState:
        return JointState(self.angles[-1].copy(), float(self.grippers[-1]))

    def slice(self, a: int, b: int) -> "Trajectory":
        return Trajectory(self.dt, self.times[a:b], self.angles[a:b],
                          self.grippers[a:b])

    def velocity_ok(self, arm: ArmModel, tol: float = 1e-9) -> bool:
        if self.n_samples < 2:
            return True
        speed = np.abs(np.diff(self.angles, axis=0)) / self.dt
        return bool(np.all(speed <= arm.max_velocities + tol))


def time_parameterize(path: JointPath, arm: ArmModel, dt: float,
                      gripper: float = 1.0) -> Trajectory:
    """Sample a waypoint path at period dt, pacing each leg by its slowest joint.

    A leg's duration is the largest per-joint travel time |dq|/v_max, rounded
    up to a whole number of samples, so per-step speed never exceeds the limit
    and reaches it exactly when the duration divides evenly.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    w = path.waypoints
    rows = [w[0]]
    for k in range(w.shape[0] - 1):
        delta = w[k + 1] - w[k]
        travel = np.abs(delta) / arm.max_velocities
        duration = float(np.max(travel))
        if duration < 1e-12:
            continue
        steps = max(1, int(np.ceil(duration / dt - 1e-9)))
        for s in range(1, steps + 1):
            rows.append(w[k] + (s / steps) * delta)
    angles = np.array(rows)
    n = angles.shape[0]
    times = np.arange(n) * dt
    return Trajectory(dt, times, angles, np.full(n, float(gripper)))
