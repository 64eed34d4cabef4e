"""Execution validation: deviation checks, goal verification, answer parsing.

Two verifier backends ship. The geometric one checks goal conditions against
a ground-truth layout and is what acceptance runs use; the scripted one maps
canned answers through the same keyword contract so the protocol path can be
tested without any geometry.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from enum import Enum
from typing import Optional

import numpy as np

from .geometry import Pose3D
from .kinematics import JointState
from .perception import SceneLayout

# A gripper command below this reads as "closed".
GRIPPER_CLOSED_BELOW = 0.5


class Verdict(Enum):
    OK = "ok"
    HALT = "halt"


class Answer(Enum):
    YES = "yes"
    NO = "no"
    UNKNOWN = "unknown"


class GoalKind(Enum):
    OBJECT_AT_POSE = "object_at_pose"
    OBJECT_GRASPED = "object_grasped"
    OBJECT_IN_RECEPTACLE = "object_in_receptacle"


@dataclass(frozen=True)
class DeviationThresholds:
    joint: float = 0.05  # radians
    gripper: float = 0.2

    def __post_init__(self):
        if self.joint <= 0.0 or self.gripper <= 0.0:
            raise ValueError("thresholds must be positive")


@dataclass(frozen=True)
class DeviationReport:
    joint_errors: np.ndarray
    gripper_error: float
    max_error: float
    verdict: Verdict

    @property
    def halted(self) -> bool:
        return self.verdict is Verdict.HALT


@dataclass(frozen=True)
class SubtaskGoal:
    kind: GoalKind
    object_id: str
    target_pose: Optional[Pose3D] = None
    receptacle_id: Optional[str] = None
    tolerance: float = 0.01

    def __post_init__(self):
        if self.tolerance <= 0.0:
            raise ValueError("tolerance must be positive")
        if self.kind is GoalKind.OBJECT_AT_POSE and self.target_pose is None:
            raise ValueError("object_at_pose goal needs a target pose")
        if self.kind is GoalKind.OBJECT_IN_RECEPTACLE and not self.receptacle_id:
            raise ValueError("object_in_receptacle goal needs a receptacle id")


def check_configuration(actual: JointState, planned: JointState,
                        thresholds: DeviationThresholds) -> DeviationReport:
    """Compare reality's joint state against the twin's planned one."""
    if actual.angles.shape != planned.angles.shape:
        raise ValueError(
            f"joint count mismatch: {actual.angles.shape} vs {planned.angles.shape}")
    joint_errors = np.abs(actual.angles - planned.angles)
    gripper_error = abs(actual.gripper - planned.gripper)
    max_error = float(joint_errors.max()) if joint_errors.size else 0.0
    halt = max_error > thresholds.joint or gripper_error > thresholds.gripper
    return DeviationReport(joint_errors=joint_errors,
                           gripper_error=gripper_error,
                           max_error=max_error,
                           verdict=Verdict.HALT if halt else Verdict.OK)


def verify_geometric(goal: SubtaskGoal, truth: SceneLayout,
                     gripper: JointState, held: Optional[str]) -> Answer:
    """Decide a goal condition directly against ground truth."""
    if goal.object_id not in truth:
        raise KeyError(f"goal object {goal.object_id} not in layout")
    obj = truth[goal.object_id]
    if goal.kind is GoalKind.OBJECT_GRASPED:
        ok = held == goal.object_id and gripper.gripper < GRIPPER_CLOSED_BELOW
        return Answer.YES if ok else Answer.NO
    if goal.kind is GoalKind.OBJECT_AT_POSE:
        err = float(np.linalg.norm(obj.pose.position - goal.target_pose.position))
        return Answer.YES if err <= goal.tolerance else Answer.NO
    if goal.receptacle_id not in truth:
        raise KeyError(f"receptacle {goal.receptacle_id} not in layout")
    lo, hi = truth[goal.receptacle_id].aabb()
    p = obj.pose.position
    inside = np.all(p >= lo - goal.tolerance) and np.all(p <= hi + goal.tolerance)
    return Answer.YES if inside else Answer.NO


_YES_NO = re.compile(r"\b(yes|no)\b", re.IGNORECASE)


def parse_answer(answer: str) -> Answer:
    """Keyword check on a free-text answer; the first yes/no wins."""
    m = _YES_NO.search(answer)
    if m is None:
        return Answer.UNKNOWN
    return Answer.YES if m.group(1).lower() == "yes" else Answer.NO


class GeometricVerifier:
    """Answers verification queries from a live ground-truth layout.

    The callable returns free text so the asking side still exercises the
    keyword parse; the decision itself is exact geometry.
    """

    def __init__(self, truth_fn, state_fn):
        # truth_fn() -> SceneLayout, state_fn() -> (JointState, held id or None)
        self._truth_fn = truth_fn
        self._state_fn = state_fn

    def answer(self, goal: SubtaskGoal, prompt: str) -> str:
        state, held = self._state_fn()
        verdict = verify_geometric(goal, self._truth_fn(), state, held)
        if verdict is Answer.YES:
            return f"Yes, the {goal.object_id} satisfies the goal."
        return f"No, the {goal.object_id} does not satisfy the goal."


class ScriptedVerifier:
    """Replays a fixed list of answer strings, for protocol-level tests."""

    def __init__(self, answers: list[str]):
        self._answers = list(answers)
        self._next = 0

    def answer(self, goal: SubtaskGoal, prompt: str) -> str:
        if self._next >= len(self._answers):
            return "The image is unclear."
        text = self._answers[self._next]
        self._next += 1
        return text
