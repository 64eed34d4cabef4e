"""Reality proxy: the ground-truth side of the wire.

Holds the true scene, executes commanded trajectories with actuation noise,
applies kinematic grasp rules, and feeds the synthetic detector. Everything
here is reachable only through protocol messages; the twin never imports
this module's state.

Noise is regenerated from a per-call seed derived from (world seed, purpose,
call ordinal), so a world replayed against the same inbound messages follows
bit-identical trajectories.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .geometry import CameraModel, Pose3D
from .kinematics import ArmModel, JointState, forward_kinematics
from .perception import DetectorNoise, SceneLayout, detect
from .protocol import (
    ExecuteAck,
    ExecuteCommand,
    GripperAction,
    Halt,
    KIND_EXECUTE_ACK,
    KIND_EXECUTE_COMMAND,
    KIND_HALT,
    KIND_PERCEPTION_REPLY,
    KIND_PERCEPTION_REQUEST,
    KIND_STATE_REPLY,
    KIND_STATE_REQUEST,
    KIND_VERIFY_REPLY,
    KIND_VERIFY_REQUEST,
    PerceptionReply,
    StateReply,
    VerifyReply,
)
from .validation import GeometricVerifier

GRASP_RANGE = 0.02  # meters from ee to an object's grasp point
PRESS_RANGE = 0.01  # meters from ee to the button
PRESS_DWELL = 1.0   # seconds the ee must stay on the button
RECEPTACLE_CAPTURE = 0.02  # release-into-receptacle capture margin

_EXEC_SALT = 1
_DETECT_SALT = 2
_DROP_SALT = 3


@dataclass(frozen=True)
class NoiseModel:
    joint_exec_sigma: float = 0.002  # radians per executed sample
    detector_px: float = 1.0
    drop_prob: float = 0.02
    joint_bias: Optional[np.ndarray] = None  # constant actuation offset

    def __post_init__(self):
        if self.joint_exec_sigma < 0.0 or self.detector_px < 0.0:
            raise ValueError("noise magnitudes must be >= 0")
        if not 0.0 <= self.drop_prob <= 1.0:
            raise ValueError("drop probability must lie in [0, 1]")
        if self.joint_bias is not None:
            object.__setattr__(self, "joint_bias",
                               np.asarray(self.joint_bias, dtype=float))

    @classmethod
    def quiet(cls) -> "NoiseModel":
        return cls(joint_exec_sigma=0.0, detector_px=0.0, drop_prob=0.0)


class RealityWorld:
    """Single-owner mutable ground truth, driven strictly by messages."""

    def __init__(self, truth: SceneLayout, arm: ArmModel, home: JointState,
                 camera: CameraModel, noise: NoiseModel, seed: int,
                 press_point: Optional[np.ndarray] = None):
        arm.check_limits(home.angles)
        self.truth = truth.copy()
        self.arm = arm
        self.q = home
        self.camera = camera
        self.noise = noise
        self.seed = int(seed)
        self.held: Optional[str] = None
        self.grasp_offset: Optional[Pose3D] = None
        self.sim_time = 0.0
        self.press_point = None if press_point is None else np.asarray(
            press_point, dtype=float)
        self.pressed = False
        self._press_dwell = 0.0
        self._exec_calls = 0
        self._sense_calls = 0

    def _rng(self, salt: int, ordinal: int) -> np.random.Generator:
        return np.random.default_rng(
            np.random.SeedSequence([self.seed, salt, ordinal]))

    def ee_pose(self) -> Pose3D:
        return forward_kinematics(self.arm, self.q)

    # -- execution ----------------------------------------------------------

    def execute(self, cmd: ExecuteCommand):
        """Run one trajectory segment; returns (reply kind, payload)."""
        seg = cmd.segment
        if seg.angles.shape[1] != self.arm.joint_count:
            return KIND_HALT, Halt("limit violation: wrong joint count")
        lo, hi = self.arm.limits_lo, self.arm.limits_hi
        if np.any(seg.angles < lo - 1e-9) or np.any(seg.angles > hi + 1e-9):
            return KIND_HALT, Halt("limit violation: commanded state out of limits")
        if not seg.velocity_ok(self.arm):
            return KIND_HALT, Halt("limit violation: commanded velocity too high")

        self._exec_calls += 1
        rng = self._rng(_EXEC_SALT, self._exec_calls)
        sigma = self.noise.joint_exec_sigma
        bias = self.noise.joint_bias
        for i in range(seg.n_samples):
            q = seg.angles[i]
            if bias is not None:
                q = q + bias
            if sigma > 0.0:
                q = q + sigma * rng.standard_normal(self.arm.joint_count)
            q = self.arm.clamp(q)
            self.q = JointState(q, float(seg.grippers[i]))
            self.sim_time += seg.dt
            if self.press_point is not None:
                ee = forward_kinematics(self.arm, self.q)
                if np.linalg.norm(ee.position - self.press_point) <= PRESS_RANGE:
                    self._press_dwell += seg.dt
                    if self._press_dwell >= PRESS_DWELL - 1e-9:
                        self.pressed = True
                else:
                    self._press_dwell = 0.0

        if self.held is not None:
            self.truth.set_pose(self.held,
                                self.ee_pose().compose(self.grasp_offset))
        if cmd.gripper_action is GripperAction.CLOSE:
            self._try_grasp()
        elif cmd.gripper_action is GripperAction.OPEN:
            self._release()
        return KIND_EXECUTE_ACK, ExecuteAck(state=self.q, steps=seg.n_samples)

    def _try_grasp(self) -> None:
        if self.held is not None:
            return
        ee = self.ee_pose()
        best, best_dist = None, GRASP_RANGE
        for label in self.truth.movable_labels():
            grasp_point = self.truth[label].top_center()
            dist = float(np.linalg.norm(ee.position - grasp_point))
            if dist <= best_dist:
                best, best_dist = label, dist
        if best is not None:
            self.held = best
            self.grasp_offset = ee.inverse().compose(self.truth[best].pose)

    def _release(self) -> None:
        if self.held is None:
            return
        label, obj = self.held, self.truth[self.held]
        self.held = None
        self.grasp_offset = None
        p = obj.pose.position
        rest_top = self._support_height(label, p)
        pose = Pose3D(np.array([p[0], p[1], rest_top + 0.5 * obj.size[2]]),
                      obj.pose.quat)
        self.truth.set_pose(label, pose)

    def _support_height(self, label: str, position: np.ndarray) -> float:
        """Top surface the released object settles on: receptacle or table."""
        for other in sorted(self.truth.objects):
            if other == label or not self.truth[other].receptacle:
                continue
            lo, hi = self.truth[other].aabb()
            if (np.all(position >= lo - RECEPTACLE_CAPTURE)
                    and np.all(position <= hi + RECEPTACLE_CAPTURE)):
                return hi[2]
        table_lo, table_hi = self.truth["table"].aabb()
        return table_hi[2]

    # -- sensing -------------------------------------------------------------

    def sense_state(self) -> StateReply:
        return StateReply(state=self.q, timestamp=self.sim_time)

    def sense_scene(self) -> PerceptionReply:
        self._sense_calls += 1
        det_seed = np.random.SeedSequence(
            [self.seed, _DETECT_SALT, self._sense_calls]).generate_state(1)[0]
        detections = detect(self.truth, self.camera,
                            DetectorNoise(px=self.noise.detector_px),
                            int(det_seed))
        drop_rng = self._rng(_DROP_SALT, self._sense_calls)
        kept = tuple(d for d in detections
                     if drop_rng.uniform() >= self.noise.drop_prob)
        return PerceptionReply(detections=kept, camera=self.camera)


class RealityEndpoint:
    """Protocol handler exposing a RealityWorld over a session."""

    def __init__(self, world: RealityWorld, verifier=None):
        self.world = world
        if verifier is None:
            verifier = GeometricVerifier(
                lambda: self.world.truth,
                lambda: (self.world.q, self.world.held))
        self.verifier = verifier

    def handle(self, kind: str, payload):
        if kind == KIND_PERCEPTION_REQUEST:
            return KIND_PERCEPTION_REPLY, self.world.sense_scene()
        if kind == KIND_STATE_REQUEST:
            return KIND_STATE_REPLY, self.world.sense_state()
        if kind == KIND_EXECUTE_COMMAND:
            return self.world.execute(payload)
        if kind == KIND_VERIFY_REQUEST:
            answer = self.verifier.answer(payload.goal, payload.prompt)
            return KIND_VERIFY_REPLY, VerifyReply(answer=answer)
        raise ValueError(f"reality endpoint cannot handle {kind!r}")
