"""Serial-arm kinematics: forward chain, geometric Jacobian, damped IK.

A joint descriptor rotates about its axis first and then applies a fixed
link offset, so the chain for angles q is

    T = base o R(axis_1, q_1) o offset_1 o ... o R(axis_n, q_n) o offset_n

and the end effector frame is the frame after the last offset. Joint i's
rotation origin is therefore the chain point produced by offset i-1.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import (
    Pose3D,
    quat_from_matrix,
    quat_to_matrix,
    rotation_vector,
    quat_multiply,
    quat_conjugate,
)

_LIMIT_TOL = 1e-9

# Damped-least-squares constants. The damping keeps steps bounded near
# singular stretches; the half step trades speed for monotone convergence.
IK_DAMPING = 1e-2
IK_STEP_SCALE = 0.5


class IkFailure(Exception):
    """Iteration budget exhausted before reaching the target tolerances."""

    def __init__(self, pos_err: float, rot_err: float):
        self.pos_err = pos_err
        self.rot_err = rot_err
        super().__init__(
            f"IK did not converge: residual {pos_err:.3e} m / {rot_err:.3e} rad")


@dataclass(frozen=True)
class JointSpec:
    """One revolute joint: rotation axis, trailing link offset, limits."""

    axis: np.ndarray
    offset: Pose3D
    limit_lo: float
    limit_hi: float
    max_velocity: float

    def __post_init__(self):
        axis = np.asarray(self.axis, dtype=float).reshape(3)
        n = np.linalg.norm(axis)
        if n < 1e-9:
            raise ValueError("joint axis must be nonzero")
        object.__setattr__(self, "axis", axis / n)
        if not self.limit_lo < self.limit_hi:
            raise ValueError(f"empty joint range [{self.limit_lo}, {self.limit_hi}]")
        if self.max_velocity <= 0:
            raise ValueError("max_velocity must be positive")


@dataclass(frozen=True)
class ArmModel:
    joints: tuple[JointSpec, ...]
    base_pose: Pose3D = field(default_factory=Pose3D.identity)

    # cached arrays, derived in __post_init__
    axes: np.ndarray = field(init=False, repr=False, compare=False)
    limits_lo: np.ndarray = field(init=False, repr=False, compare=False)
    limits_hi: np.ndarray = field(init=False, repr=False, compare=False)
    max_velocities: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        joints = tuple(self.joints)
        if len(joints) < 2:
            raise ValueError("an arm needs at least two joints")
        object.__setattr__(self, "joints", joints)
        object.__setattr__(self, "axes", np.array([j.axis for j in joints]))
        object.__setattr__(self, "limits_lo", np.array([j.limit_lo for j in joints]))
        object.__setattr__(self, "limits_hi", np.array([j.limit_hi for j in joints]))
        object.__setattr__(self, "max_velocities",
                           np.array([j.max_velocity for j in joints]))
        # per-joint rotation generators for Rodrigues' formula
        skews = np.zeros((len(joints), 3, 3))
        outers = np.zeros((len(joints), 3, 3))
        for i, j in enumerate(joints):
            x, y, z = j.axis
            skews[i] = [[0, -z, y], [z, 0, -x], [-y, x, 0]]
            outers[i] = np.outer(j.axis, j.axis)
        object.__setattr__(self, "_skews", skews)
        object.__setattr__(self, "_outers", outers)
        object.__setattr__(self, "_offset_rots",
                           np.array([quat_to_matrix(j.offset.quat) for j in joints]))
        object.__setattr__(self, "_offset_pos",
                           np.array([j.offset.position for j in joints]))
        object.__setattr__(self, "_base_rot", quat_to_matrix(self.base_pose.quat))

    @property
    def joint_count(self) -> int:
        return len(self.joints)

    def check_limits(self, angles: np.ndarray) -> None:
        angles = np.asarray(angles, dtype=float)
        if angles.shape != (self.joint_count,):
            raise ValueError(
                f"expected {self.joint_count} joint angles, got shape {angles.shape}")
        low = angles < self.limits_lo - _LIMIT_TOL
        high = angles > self.limits_hi + _LIMIT_TOL
        if low.any() or high.any():
            bad = int(np.argmax(low | high))
            raise ValueError(
                f"joint {bad} angle {angles[bad]:.6g} outside "
                f"[{self.limits_lo[bad]:.6g}, {self.limits_hi[bad]:.6g}]")

    def clamp(self, angles: np.ndarray) -> np.ndarray:
        return np.clip(angles, self.limits_lo, self.limits_hi)

    def midpoint(self) -> np.ndarray:
        return 0.5 * (self.limits_lo + self.limits_hi)


@dataclass(frozen=True)
class JointState:
    """Arm configuration plus a normalized gripper opening (0 closed, 1 open)."""

    angles: np.ndarray
    gripper: float = 1.0

    def __post_init__(self):
        angles = np.asarray(self.angles, dtype=float).reshape(-1)
        object.__setattr__(self, "angles", angles)
        if not 0.0 <= self.gripper <= 1.0:
            raise ValueError(f"gripper opening {self.gripper} outside [0, 1]")


def _joint_rotation(arm: ArmModel, i: int, angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return c * np.eye(3) + s * arm._skews[i] + (1.0 - c) * arm._outers[i]


def _fk_frames(arm: ArmModel, angles: np.ndarray):
    """Chain points (n+1, 3), per-joint entry rotations, and the final rotation.

    Entry rotation i is the accumulated world rotation before joint i turns,
    which is what the Jacobian needs to express axis i in world coordinates.
    """
    n = arm.joint_count
    points = np.empty((n + 1, 3))
    entries = np.empty((n, 3, 3))
    rot = arm._base_rot
    pos = arm.base_pose.position
    points[0] = pos
    for i in range(n):
        entries[i] = rot
        rot = rot @ _joint_rotation(arm, i, angles[i])
        pos = pos + rot @ arm._offset_pos[i]
        rot = rot @ arm._offset_rots[i]
        points[i + 1] = pos
    return points, entries, rot


def chain_points(arm: ArmModel, angles: np.ndarray) -> np.ndarray:
    """World positions of the base and each link end, shape (n+1, 3)."""
    points, _, _ = _fk_frames(arm, np.asarray(angles, dtype=float))
    return points


def chain_points_many(arm: ArmModel, configs: np.ndarray) -> np.ndarray:
    """chain_points over a batch of configurations, shape (m, n+1, 3).

    Row k equals chain_points(arm, configs[k]); batching the per-joint
    Rodrigues rotations keeps edge collision checks off the Python loop.
    """
    q = np.asarray(configs, dtype=float)
    if q.ndim != 2 or q.shape[1] != arm.joint_count:
        raise ValueError(f"configs must be (m, {arm.joint_count})")
    m, n = q.shape
    eye = np.eye(3)
    pts = np.empty((m, n + 1, 3))
    rot = np.broadcast_to(arm._base_rot, (m, 3, 3))
    pos = np.broadcast_to(arm.base_pose.position, (m, 3))
    pts[:, 0] = pos
    for i in range(n):
        c = np.cos(q[:, i])[:, None, None]
        s = np.sin(q[:, i])[:, None, None]
        joint_rot = c * eye + s * arm._skews[i] + (1.0 - c) * arm._outers[i]
        rot = rot @ joint_rot
        pos = pos + np.einsum("mij,j->mi", rot, arm._offset_pos[i])
        rot = rot @ arm._offset_rots[i]
        pts[:, i + 1] = pos
    return pts


def forward_kinematics(arm: ArmModel, state: JointState) -> Pose3D:
    """End-effector pose for a configuration within joint limits."""
    arm.check_limits(state.angles)
    points, _, rot = _fk_frames(arm, state.angles)
    return Pose3D(points[-1], quat_from_matrix(rot))


def _jacobian_from_frames(arm: ArmModel, points: np.ndarray,
                          entries: np.ndarray) -> np.ndarray:
    axes_world = np.einsum("nij,nj->ni", entries, arm.axes)
    lever = points[-1] - points[:-1]
    jac = np.empty((6, arm.joint_count))
    jac[:3] = np.cross(axes_world, lever).T
    jac[3:] = axes_world.T
    return jac


def jacobian(arm: ArmModel, state: JointState) -> np.ndarray:
    """Geometric Jacobian, 6 x n: linear rows on top, angular rows below."""
    arm.check_limits(state.angles)
    points, entries, _ = _fk_frames(arm, state.angles)
    return _jacobian_from_frames(arm, points, entries)


def _pose_error(target: Pose3D, pos: np.ndarray, rot: np.ndarray) -> np.ndarray:
    """6-vector twist taking the current frame to the target frame."""
    q_cur = quat_from_matrix(rot)
    q_err = quat_multiply(target.quat, quat_conjugate(q_cur))
    return np.concatenate([target.position - pos, rotation_vector(q_err)])


def _solve_from(arm: ArmModel, target: Pose3D, q0: np.ndarray,
                tol_pos: float, tol_rot: float, max_iters: int):
    q = arm.clamp(np.asarray(q0, dtype=float).copy())
    best = (np.inf, np.inf, q)
    lam2 = IK_DAMPING ** 2
    eye = np.eye(arm.joint_count)
    mid = arm.midpoint()
    stall = 0
    escapes = 2
    for _ in range(max_iters + 1):
        points, entries, rot = _fk_frames(arm, q)
        err = _pose_error(target, points[-1], rot)
        pos_err = float(np.linalg.norm(err[:3]))
        rot_err = float(np.linalg.norm(err[3:]))
        if pos_err <= tol_pos and rot_err <= tol_rot:
            return q, None
        if pos_err + 0.1 * rot_err < best[0] + 0.1 * best[1] - 1e-12:
            best = (pos_err, rot_err, q.copy())
            stall = 0
        else:
            stall += 1
            if stall == 20 and escapes > 0:
                # a joint clamped at its limit can wedge the whole descent;
                # re-center pinned joints once and keep iterating
                pinned = ((q >= arm.limits_hi - 1e-6)
                          | (q <= arm.limits_lo + 1e-6))
                if pinned.any():
                    q = q.copy()
                    q[pinned] = mid[pinned]
                    escapes -= 1
                    stall = 0
                    continue
            if stall > 30:  # plateaued, hand control to the next restart
                break
        jac = _jacobian_from_frames(arm, points, entries)
        dq = np.linalg.solve(jac.T @ jac + lam2 * eye, jac.T @ err)
        q = arm.clamp(q + IK_STEP_SCALE * dq)
    return best[2], (best[0], best[1])


# Deterministic restart offsets applied around the limit midpoint when the
# caller's seed stalls in a poor basin. Frozen table, no runtime randomness.
_RESTART_JITTER = np.array([
    [0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [0.0, -0.4, 0.4, 0.0, -0.5, 0.0],
    [0.0, 0.5, -0.4, 0.0, 0.6, 0.0],
    [0.0, 0.8, 0.8, 1.2, 0.8, -1.2],
    [0.0, -0.7, 1.1, -1.2, -0.8, 1.2],
    [0.0, 1.0, -0.2, 2.4, 1.2, -2.4],
    [0.0, -1.0, 0.3, -2.4, -1.2, 2.4],
])


def inverse_kinematics(arm: ArmModel, target: Pose3D, q_init: JointState,
                       tol_pos: float = 1e-4, tol_rot: float = 1e-3,
                       max_iters: int = 300) -> JointState:
    """Damped-least-squares IK with joint-limit clamping at every step.

    Deterministic: the caller's seed is tried first, then a frozen table of
    restart configurations around the limit midpoint, each also tried with
    the first joint aimed at the target's bearing. Raises IkFailure with the
    best residual when no attempt converges.
    """
    n = arm.joint_count
    mid = arm.midpoint()
    to_target = target.position - arm.base_pose.position
    yaw = float(np.arctan2(to_target[1], to_target[0]))
    seeds = [np.asarray(q_init.angles, dtype=float)]
    for jitter in _RESTART_JITTER:
        j = jitter[:n] if n <= jitter.size else np.resize(jitter, n)
        for base_yaw in (yaw, yaw - np.pi, 0.0):
            seed = mid + j
            seed[0] = base_yaw
            seeds.append(arm.clamp(seed))
    best_residual = (np.inf, np.inf)
    for seed in seeds:
        q, residual = _solve_from(arm, target, seed, tol_pos, tol_rot, max_iters)
        if residual is None:
            return JointState(q, q_init.gripper)
        if residual < best_residual:
            best_residual = residual
    raise IkFailure(*best_residual)
