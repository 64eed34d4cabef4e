"""Trial orchestration: plan against the believed layout, drive the remote
endpoint over the message protocol, check reality against plan after every
executed segment, and tally success rates across layout-randomization modes.

The twin side never touches ground truth: everything it knows arrives in
reply payloads through a Requester. Ground truth lives only in the builder
functions that assemble the serving endpoint.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

import numpy as np

from .geometry import Pose3D
from .kinematics import IkFailure, JointState, inverse_kinematics
from .perception import (PerceptionError, SceneLayout, SceneObject,
                         understand_scene)
from .planning import (CollisionWorld, InvalidEndpoint, JointPath, ObstacleBox,
                       PlanningFailure, RrtParams, Trajectory, rrt_plan,
                       shortcut_path, time_parameterize)
from .protocol import (KIND_HALT, KIND_EXECUTE_COMMAND, KIND_PERCEPTION_REQUEST,
                       KIND_STATE_REQUEST, KIND_VERIFY_REQUEST,
                       ExecuteCommand, GripperAction, PerceptionRequest,
                       SessionState, StateRequest, VerifyRequest,
                       canonical_json, quantize_float)
from .reality import NoiseModel, RealityEndpoint, RealityWorld
from .scenefile import SceneConfig, SubtaskSpec
from .transport import FrameServer, MemoryTransport, Requester, Transcript
from .validation import (Answer, GoalKind, SubtaskGoal, check_configuration,
                         parse_answer)

# Tool-down orientation for all desk grasps: ee z-axis along world -z,
# reached by pure wrist pitch so the roll joints stay near zero.
TOP_DOWN_QUAT = np.array([0.0, 0.0, 1.0, 0.0])
IDENTITY_QUAT = np.array([1.0, 0.0, 0.0, 0.0])

GRIPPER_OPEN = 1.0
GRIPPER_CLOSED = 0.0
GRIPPER_RAMP_SAMPLES = 5

# Seed-stream salts; reality reserves 1..3 for its own draws.
_PLACEMENT_SALT = 11
_RRT_SALT = 21
_SHORTCUT_SALT = 22


class PipelineError(Exception):
    pass


class PlacementError(PipelineError):
    """Randomized layout could not satisfy the clearance rule."""


class Outcome(Enum):
    SUCCESS = "success"
    PERCEIVE_FAIL = "perceive_fail"
    PLAN_FAIL = "plan_fail"
    HALT_DEVIATION = "halt_deviation"
    VERIFY_FAIL = "verify_fail"


class LayoutMode(Enum):
    FIXED = "fixed"
    RANDOM_CUP = "random-cup"
    RANDOM_CAPSULE = "random-capsule"
    RANDOM_BOTH = "random-both"


_MODE_LABELS = {
    LayoutMode.FIXED: (),
    LayoutMode.RANDOM_CUP: ("cup",),
    LayoutMode.RANDOM_CAPSULE: ("capsule",),
    LayoutMode.RANDOM_BOTH: ("cup", "capsule"),
}

ALL_MODES = tuple(LayoutMode)


def _derived_seed(*entropy) -> int:
    return int(np.random.SeedSequence(list(entropy)).generate_state(1)[0])


# --------------------------------------------------------------------------
# wire-exact planning artifacts

def _quantize_array(a: np.ndarray) -> np.ndarray:
    flat = np.asarray(a, dtype=float).ravel()
    return np.array([quantize_float(x) for x in flat]).reshape(np.shape(a))


def quantize_trajectory(traj: Trajectory) -> Trajectory:
    """Round a trajectory to the wire's float grid.

    The result encodes to itself, so it doubles as the local reference for
    what the other endpoint decoded and executed.
    """
    return Trajectory(quantize_float(traj.dt), _quantize_array(traj.times),
                      _quantize_array(traj.angles),
                      _quantize_array(traj.grippers))


def _hold_trajectory(angles: np.ndarray, dt: float, n: int,
                     grippers) -> Trajectory:
    times = np.arange(n) * dt
    tiled = np.tile(np.asarray(angles, dtype=float), (n, 1))
    g = np.asarray(grippers, dtype=float)
    if g.ndim == 0:
        g = np.full(n, float(g))
    return Trajectory(dt, times, tiled, g)


# --------------------------------------------------------------------------
# twin-side state

@dataclass
class TwinRun:
    """Mutable twin-side belief across one trial."""

    config: SceneConfig
    requester: Requester
    trial_seed: int
    planned: JointState
    held: Optional[str] = None
    layout: Optional[SceneLayout] = None
    checks: int = 0
    halt_check: Optional[int] = None
    halt_reason: Optional[str] = None
    max_deviation: float = 0.0
    sim_time: float = 0.0
    results: list = field(default_factory=list)


def _required_labels(config: SceneConfig, spec: SubtaskSpec) -> tuple:
    """Labels the subtask cannot proceed without: the pick target plus every
    feature anchor referenced by the motion target or the goal."""
    req = set()
    if spec.action == "pick":
        req.add(spec.object_id)
    features = [spec.feature] if spec.feature else []
    if spec.action == "press" and len(spec.goal) == 3:
        features.append(spec.goal[2])
    for name in features:
        anchor = config.features[name].relative_to
        if anchor:
            req.add(anchor)
    return tuple(sorted(req))


def _subtask_goal(config: SceneConfig, spec: SubtaskSpec,
                  layout: SceneLayout) -> SubtaskGoal:
    if spec.action == "pick":
        return SubtaskGoal(kind=GoalKind.OBJECT_GRASPED,
                           object_id=spec.object_id, tolerance=spec.tolerance)
    if spec.action == "place":
        if spec.goal and spec.goal[0] == "in":
            return SubtaskGoal(kind=GoalKind.OBJECT_IN_RECEPTACLE,
                               object_id=spec.object_id,
                               receptacle_id=spec.goal[1],
                               tolerance=spec.tolerance)
        point = config.feature_point(spec.feature, layout)
        return SubtaskGoal(kind=GoalKind.OBJECT_AT_POSE,
                           object_id=spec.object_id,
                           target_pose=Pose3D(point, IDENTITY_QUAT),
                           tolerance=spec.tolerance)
    obj, _, feat = spec.goal  # press: "<object> at <feature>"
    point = config.feature_point(feat, layout)
    return SubtaskGoal(kind=GoalKind.OBJECT_AT_POSE, object_id=obj,
                       target_pose=Pose3D(point, IDENTITY_QUAT),
                       tolerance=spec.tolerance)


def _verify_prompt(goal: SubtaskGoal) -> str:
    if goal.kind is GoalKind.OBJECT_GRASPED:
        return f"Is the {goal.object_id} held in the gripper? Answer yes or no."
    if goal.kind is GoalKind.OBJECT_IN_RECEPTACLE:
        return (f"Is the {goal.object_id} inside the {goal.receptacle_id}? "
                "Answer yes or no.")
    return f"Is the {goal.object_id} at the requested spot? Answer yes or no."


def _collision_world(config: SceneConfig, layout: SceneLayout,
                     exclude: set) -> CollisionWorld:
    skip = exclude | {"robot", "camera"}
    boxes = [ObstacleBox(obj.pose, obj.size)
             for label, obj in sorted(layout.objects.items())
             if label not in skip]
    return CollisionWorld(boxes, config.link_radii,
                          safety_margin=config.planner.safety_margin,
                          skip_links=config.planner.skip_links)


def _plan_move(twin: TwinRun, world: CollisionWorld, q_from: np.ndarray,
               q_to: np.ndarray, subtask_index: int) -> JointPath:
    """Plan the transit leg, retreating through the home posture when the
    direct hop is blocked; a full-budget direct search is the last resort."""
    config = twin.config
    pl = config.planner
    arm = config.arm

    def params(attempt: int, iters: int) -> RrtParams:
        return RrtParams(step=pl.step, connect_threshold=pl.connect_threshold,
                         goal_bias=pl.goal_bias, max_iters=iters,
                         rng_seed=_derived_seed(twin.trial_seed, _RRT_SALT,
                                                subtask_index, attempt))

    quick = min(pl.max_iters, 2000)
    try:
        return rrt_plan(world, arm, q_from, q_to, params(0, quick))
    except PlanningFailure:
        pass
    home = twin.config.home.angles
    try:
        leg1 = rrt_plan(world, arm, q_from, home, params(1, quick))
        leg2 = rrt_plan(world, arm, home, q_to, params(2, quick))
        return JointPath(np.vstack([leg1.waypoints, leg2.waypoints[1:]]))
    except (InvalidEndpoint, PlanningFailure):
        pass
    return rrt_plan(world, arm, q_from, q_to, params(3, pl.max_iters))


def _plan_phases(twin: TwinRun, spec: SubtaskSpec, layout: SceneLayout,
                 subtask_index: int):
    """IK + RRT for one subtask; returns [(trajectory, gripper action)].

    Raises IkFailure, InvalidEndpoint, or PlanningFailure when the believed
    layout admits no motion plan.
    """
    config = twin.config
    pl = config.planner
    arm = config.arm
    if spec.action == "pick":
        ee_goal = layout[spec.object_id].top_center()
        exclude = {spec.object_id}
    else:
        point = config.feature_point(spec.feature, layout)
        if spec.action == "place":
            carried_h = float(config.priors.sizes[spec.object_id][2])
            ee_goal = point + np.array([0.0, 0.0, 0.5 * carried_h])
        else:
            ee_goal = point
        exclude = set()
    approach = ee_goal + np.array([0.0, 0.0, pl.approach_height])

    q_now = twin.planned
    q_approach = inverse_kinematics(arm, Pose3D(approach, TOP_DOWN_QUAT), q_now)
    q_goal = inverse_kinematics(arm, Pose3D(ee_goal, TOP_DOWN_QUAT), q_approach)

    world = _collision_world(config, layout, exclude)
    path = _plan_move(twin, world, q_now.angles, q_approach.angles,
                      subtask_index)
    path = shortcut_path(world, arm, path, attempts=pl.shortcut_attempts,
                         rng_seed=_derived_seed(twin.trial_seed,
                                                _SHORTCUT_SALT, subtask_index),
                         resolution=pl.step / 10.0)

    g0 = float(q_now.gripper)
    down = JointPath(np.vstack([q_approach.angles, q_goal.angles]))
    up = JointPath(np.vstack([q_goal.angles, q_approach.angles]))
    phases = [(time_parameterize(path, arm, pl.dt, gripper=g0), None),
              (time_parameterize(down, arm, pl.dt, gripper=g0), None)]
    if spec.action == "pick":
        ramp = _hold_trajectory(q_goal.angles, pl.dt, GRIPPER_RAMP_SAMPLES,
                                np.linspace(g0, GRIPPER_CLOSED,
                                            GRIPPER_RAMP_SAMPLES))
        phases.append((ramp, GripperAction.CLOSE))
        g1 = GRIPPER_CLOSED
    elif spec.action == "place":
        ramp = _hold_trajectory(q_goal.angles, pl.dt, GRIPPER_RAMP_SAMPLES,
                                np.linspace(g0, GRIPPER_OPEN,
                                            GRIPPER_RAMP_SAMPLES))
        phases.append((ramp, GripperAction.OPEN))
        g1 = GRIPPER_OPEN
    else:
        n = max(2, int(np.ceil(spec.dwell / pl.dt - 1e-9)) + 1)
        phases.append((_hold_trajectory(q_goal.angles, pl.dt, n, g0), None))
        g1 = g0
    phases.append((time_parameterize(up, arm, pl.dt, gripper=g1), None))
    return phases


def _execute_segment(twin: TwinRun, segment: Trajectory,
                     action: GripperAction) -> Optional[Outcome]:
    """Send one wire-exact segment, then compare reported state to plan."""
    reply = twin.requester.request(
        KIND_EXECUTE_COMMAND, ExecuteCommand(segment=segment,
                                             gripper_action=action))
    if reply.kind == KIND_HALT:
        twin.halt_reason = reply.payload.reason
        twin.halt_check = twin.checks + 1
        return Outcome.HALT_DEVIATION
    state_env = twin.requester.request(KIND_STATE_REQUEST, StateRequest())
    if state_env.kind == KIND_HALT:
        twin.halt_reason = state_env.payload.reason
        twin.halt_check = twin.checks + 1
        return Outcome.HALT_DEVIATION
    twin.sim_time = state_env.payload.timestamp
    twin.checks += 1
    report = check_configuration(state_env.payload.state,
                                 segment.last_state(),
                                 twin.config.thresholds)
    twin.max_deviation = max(twin.max_deviation, report.max_error)
    if report.halted:
        twin.halt_check = twin.checks
        twin.halt_reason = (f"deviation {report.max_error:.6g} over threshold "
                            f"at check {twin.checks}")
        twin.requester.send_halt(twin.halt_reason)
        return Outcome.HALT_DEVIATION
    twin.planned = segment.last_state()
    return None


def _stream_phase(twin: TwinRun, traj: Trajectory,
                  action: Optional[GripperAction]) -> Optional[Outcome]:
    k = twin.config.planner.segment_samples
    wire = quantize_trajectory(traj)
    cuts = list(range(0, wire.n_samples, k))
    for i, a in enumerate(cuts):
        seg = wire.slice(a, min(a + k, wire.n_samples))
        act = action if (action is not None and i == len(cuts) - 1) \
            else GripperAction.NONE
        status = _execute_segment(twin, seg, act)
        if status is not None:
            return status
    return None


def _verify(twin: TwinRun, goal: SubtaskGoal) -> Outcome:
    attempts = 1 + twin.config.verify_retries
    for _ in range(attempts):
        env = twin.requester.request(
            KIND_VERIFY_REQUEST,
            VerifyRequest(goal=goal, prompt=_verify_prompt(goal)))
        if env.kind == KIND_HALT:
            twin.halt_reason = env.payload.reason
            return Outcome.HALT_DEVIATION
        answer = parse_answer(env.payload.answer)
        if answer is Answer.YES:
            return Outcome.SUCCESS
        if answer is Answer.NO:
            return Outcome.VERIFY_FAIL
    return Outcome.VERIFY_FAIL


def run_subtask(twin: TwinRun, spec: SubtaskSpec,
                subtask_index: int) -> Outcome:
    """Observe, plan, stream, verify. First failure wins."""
    reply = twin.requester.request(KIND_PERCEPTION_REQUEST, PerceptionRequest())
    if reply.kind == KIND_HALT:
        twin.halt_reason = reply.payload.reason
        return Outcome.HALT_DEVIATION
    detections = tuple(d for d in reply.payload.detections
                       if d.label in spec.observe and d.label != twin.held)
    try:
        layout = understand_scene(detections, twin.config.priors,
                                  reply.payload.camera,
                                  required=_required_labels(twin.config, spec))
    except PerceptionError:
        return Outcome.PERCEIVE_FAIL
    twin.layout = layout

    try:
        phases = _plan_phases(twin, spec, layout, subtask_index)
    except (IkFailure, InvalidEndpoint, PlanningFailure):
        return Outcome.PLAN_FAIL

    goal = _subtask_goal(twin.config, spec, layout)
    for traj, action in phases:
        status = _stream_phase(twin, traj, action)
        if status is not None:
            return status
        if action is GripperAction.CLOSE:
            twin.held = spec.object_id
        elif action is GripperAction.OPEN:
            twin.held = None
    return _verify(twin, goal)


# --------------------------------------------------------------------------
# reality-side construction (the only place ground truth is assembled)

def _aabb_of(pose: Pose3D, size: np.ndarray):
    half = 0.5 * np.abs(pose.rotation_matrix()) @ np.asarray(size, float)
    return pose.position - half, pose.position + half


def _separation(lo_a, hi_a, lo_b, hi_b) -> float:
    return float(np.max(np.maximum(lo_a - hi_b, lo_b - hi_a)))


def build_truth_layout(config: SceneConfig, mode: LayoutMode,
                       seed: int) -> SceneLayout:
    """Ground-truth layout for one trial, with mode-dependent randomization.

    Each randomized label draws from its own seed stream, so a label's
    placement matches across modes at equal trial seeds and the combined
    mode fails whenever either single-label mode would.
    """
    priors = config.priors
    table_top = priors.table_height()
    poses = dict(config.truth_poses)
    placed = {label: _aabb_of(pose, priors.sizes[label])
              for label, pose in poses.items()}
    for label, pose in priors.fixed_poses.items():
        placed[label] = _aabb_of(pose, priors.sizes[label])

    rect = config.workspace
    order = sorted(config.truth_poses)
    for label in _MODE_LABELS[mode]:
        if label not in poses:
            raise PipelineError(f"mode randomizes unknown object {label!r}")
        size = priors.sizes[label]
        rng = np.random.default_rng(np.random.SeedSequence(
            [seed, _PLACEMENT_SALT, order.index(label)]))
        others = {k: v for k, v in placed.items() if k != label}
        for _ in range(100):
            x = float(rng.uniform(rect.x_lo, rect.x_hi))
            y = float(rng.uniform(rect.y_lo, rect.y_hi))
            pose = Pose3D.from_xyz(x, y, table_top + 0.5 * float(size[2]))
            lo, hi = _aabb_of(pose, size)
            if all(_separation(lo, hi, *box) >= rect.clearance
                   for other, box in others.items() if other != "table"):
                poses[label] = pose
                placed[label] = (lo, hi)
                break
        else:
            raise PlacementError(
                f"no clear spot for {label} after 100 draws (seed {seed})")

    objects = {}
    for label, pose in priors.fixed_poses.items():
        objects[label] = SceneObject(pose=pose, size=priors.sizes[label],
                                     movable=False,
                                     receptacle=label in priors.receptacles)
    for label, pose in poses.items():
        objects[label] = SceneObject(pose=pose, size=priors.sizes[label],
                                     movable=True,
                                     receptacle=label in priors.receptacles)
    return SceneLayout(objects)


def build_reality(config: SceneConfig, mode: LayoutMode, seed: int,
                  noise: NoiseModel) -> RealityEndpoint:
    truth = build_truth_layout(config, mode, seed)
    press_point = None
    for spec in config.subtasks:
        if spec.action == "press":
            press_point = config.features[spec.feature].resolve(truth)
            break
    world = RealityWorld(truth=truth, arm=config.arm, home=config.home,
                         camera=config.camera, noise=noise, seed=seed,
                         press_point=press_point)
    return RealityEndpoint(world)


# --------------------------------------------------------------------------
# trials and experiments

@dataclass
class TrialRecord:
    mode: str
    seed: int
    outcome: str
    subtask_outcomes: list
    checks: int
    halt_check: Optional[int]
    halt_reason: Optional[str]
    max_deviation: float
    sim_seconds: float
    wall_seconds: float

    @property
    def success(self) -> bool:
        return self.outcome == Outcome.SUCCESS.value

    def to_wire(self) -> dict:
        return {"mode": self.mode, "seed": self.seed, "outcome": self.outcome,
                "subtask_outcomes": [list(pair) for pair in
                                     self.subtask_outcomes],
                "checks": self.checks, "halt_check": self.halt_check,
                "halt_reason": self.halt_reason,
                "max_deviation": self.max_deviation,
                "sim_seconds": self.sim_seconds,
                "wall_seconds": self.wall_seconds}


def run_task(config: SceneConfig, requester: Requester,
             trial_seed: int) -> TwinRun:
    """Drive every subtask in order through an already-connected requester."""
    twin = TwinRun(config=config, requester=requester, trial_seed=trial_seed,
                   planned=config.home)
    for index, spec in enumerate(config.subtasks):
        outcome = run_subtask(twin, spec, index)
        twin.results.append((spec.name, outcome))
        if outcome is not Outcome.SUCCESS:
            break
    return twin


def _resolve_noise(config: SceneConfig, noise) -> NoiseModel:
    if isinstance(noise, NoiseModel):
        return noise
    return config.noise(noise)


def run_trial(config: SceneConfig, mode: LayoutMode, seed: int,
              noise="default", transcript: Optional[Transcript] = None,
              transport_factory=None) -> TrialRecord:
    """One full task attempt against a freshly built reality endpoint."""
    started = time.monotonic()
    endpoint = build_reality(config, mode, seed, _resolve_noise(config, noise))
    if transport_factory is None:
        transport = MemoryTransport(FrameServer(endpoint.handle))
    else:
        transport = transport_factory(endpoint.handle)
    requester = Requester(transport, transcript)
    try:
        twin = run_task(config, requester, seed)
        if requester.session.state is not SessionState.HALTED:
            requester.send_halt("trial complete")
    finally:
        requester.close()
    results = twin.results
    outcome = results[-1][1] if results else Outcome.SUCCESS
    return TrialRecord(
        mode=mode.value, seed=seed, outcome=outcome.value,
        subtask_outcomes=[(name, oc.value) for name, oc in results],
        checks=twin.checks, halt_check=twin.halt_check,
        halt_reason=twin.halt_reason, max_deviation=twin.max_deviation,
        sim_seconds=twin.sim_time,
        wall_seconds=time.monotonic() - started)


@dataclass
class ModeStats:
    trials: int
    successes: int
    failures: dict

    @property
    def rate(self) -> float:
        return self.successes / self.trials if self.trials else 0.0

    def to_wire(self) -> dict:
        return {"trials": self.trials, "successes": self.successes,
                "rate": self.rate, "failures": dict(sorted(self.failures.items()))}


@dataclass
class ExperimentReport:
    scene: str
    noise_preset: str
    trials_per_mode: int
    base_seed: int
    modes: dict  # mode value -> ModeStats

    def to_wire(self) -> dict:
        return {"scene": self.scene, "noise_preset": self.noise_preset,
                "trials_per_mode": self.trials_per_mode,
                "base_seed": self.base_seed,
                "modes": {k: v.to_wire() for k, v in sorted(self.modes.items())}}

    def to_bytes(self) -> bytes:
        return canonical_json(self.to_wire()) + b"\n"


def summarize(records, trials_per_mode: int, base_seed: int, scene: str,
              noise_preset: str) -> ExperimentReport:
    modes = {}
    for rec in records:
        stats = modes.setdefault(rec.mode, ModeStats(0, 0, {}))
        stats.trials += 1
        if rec.success:
            stats.successes += 1
        else:
            stats.failures[rec.outcome] = stats.failures.get(rec.outcome, 0) + 1
    return ExperimentReport(scene=scene, noise_preset=noise_preset,
                            trials_per_mode=trials_per_mode,
                            base_seed=base_seed, modes=modes)


def run_experiment(config: SceneConfig, trials: int, base_seed: int,
                   noise_preset: str = "default", modes=ALL_MODES,
                   scene: str = "scene") -> tuple:
    """Mode grid study; seeds base..base+trials-1 are shared across modes."""
    if trials < 1:
        raise PipelineError("need at least one trial per mode")
    noise = _resolve_noise(config, noise_preset)
    records = []
    for mode in modes:
        for i in range(trials):
            records.append(run_trial(config, mode, base_seed + i, noise))
    report = summarize(records, trials, base_seed, scene, noise_preset)
    return report, records


def write_report(report: ExperimentReport, path) -> None:
    with open(path, "wb") as fh:
        fh.write(report.to_bytes())


def write_trial_records(records, path) -> None:
    """Per-trial details, wall-clock times included; not reproducible."""
    with open(path, "w", encoding="utf-8") as fh:
        json.dump([rec.to_wire() for rec in records], fh, indent=1)
        fh.write("\n")


# --------------------------------------------------------------------------
# rate-comparison helpers for study assertions

def wilson_interval(successes: int, trials: int, z: float = 1.959964):
    """Two-sided 95% score interval for a binomial proportion."""
    if trials <= 0:
        raise ValueError("trials must be positive")
    p = successes / trials
    denom = 1.0 + z * z / trials
    center = (p + z * z / (2 * trials)) / denom
    half = (z / denom) * np.sqrt(p * (1 - p) / trials
                                 + z * z / (4 * trials * trials))
    return max(0.0, center - half), min(1.0, center + half)


def ordering_holds(hi_successes: int, hi_trials: int, lo_successes: int,
                   lo_trials: int) -> bool:
    """True unless the supposedly-lower rate significantly exceeds the higher.

    The claim "rate A >= rate B" survives at 95% confidence as long as the
    two score intervals are not disjoint in the reversed direction.
    """
    hi_lo, hi_hi = wilson_interval(hi_successes, hi_trials)
    lo_lo, lo_hi = wilson_interval(lo_successes, lo_trials)
    return hi_hi >= lo_lo
