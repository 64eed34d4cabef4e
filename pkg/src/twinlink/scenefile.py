"""Scene file parsing: one plain-text document describes a whole experiment.

Format: `[section]` headers followed by whitespace-separated key/value token
lines; `#` starts a comment. Sections may carry a qualifier, as in
`[noise default]` and `[subtask pick_cup]`; subtask order in the file is the
execution order. See the shipped coffee scene for a complete example.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .geometry import CameraModel, Pose3D, look_at
from .kinematics import ArmModel, JointSpec, JointState
from .perception import PriorKnowledge
from .reality import NoiseModel
from .validation import DeviationThresholds


class SceneFileError(ValueError):
    pass


@dataclass(frozen=True)
class WorkspaceRect:
    x_lo: float
    x_hi: float
    y_lo: float
    y_hi: float
    clearance: float = 0.05

    def __post_init__(self):
        if self.x_lo >= self.x_hi or self.y_lo >= self.y_hi:
            raise SceneFileError("workspace rectangle is empty")
        if self.clearance < 0.0:
            raise SceneFileError("clearance must be >= 0")


@dataclass(frozen=True)
class PlannerConfig:
    step: float = 0.1
    connect_threshold: float = 0.1
    goal_bias: float = 0.1
    max_iters: int = 20000
    shortcut_attempts: int = 60
    dt: float = 0.05
    segment_samples: int = 10
    safety_margin: float = 0.01
    skip_links: int = 1
    approach_height: float = 0.08

    def __post_init__(self):
        if self.dt <= 0.0 or self.segment_samples < 1:
            raise SceneFileError("planner timing must be positive")
        if self.approach_height <= 0.0:
            raise SceneFileError("approach height must be positive")


@dataclass(frozen=True)
class WorldFeature:
    """A named task point, absolute or anchored to an object's pose."""

    name: str
    offset: np.ndarray
    relative_to: Optional[str] = None

    def resolve(self, layout) -> np.ndarray:
        if self.relative_to is None:
            return self.offset.copy()
        return layout[self.relative_to].pose.transform_point(self.offset)


@dataclass(frozen=True)
class SubtaskSpec:
    name: str
    action: str  # pick | place | press
    object_id: Optional[str] = None
    feature: Optional[str] = None
    goal: tuple = ()  # raw goal tokens, resolved by the pipeline
    observe: tuple = ()
    tolerance: float = 0.02
    dwell: float = 1.2

    def __post_init__(self):
        if self.action not in ("pick", "place", "press"):
            raise SceneFileError(f"unknown action {self.action!r}")
        if self.action in ("pick", "place") and not self.object_id:
            raise SceneFileError(f"subtask {self.name}: action needs an object")
        if self.action in ("place", "press") and not self.feature:
            raise SceneFileError(f"subtask {self.name}: action needs a feature")
        if self.tolerance <= 0.0:
            raise SceneFileError(f"subtask {self.name}: tolerance must be > 0")


@dataclass
class SceneConfig:
    camera: CameraModel
    arm: ArmModel
    home: JointState
    link_radii: tuple
    priors: PriorKnowledge
    truth_poses: dict  # movable label -> ground-truth Pose3D
    workspace: WorkspaceRect
    noise_presets: dict
    planner: PlannerConfig
    thresholds: DeviationThresholds
    verify_retries: int
    features: dict
    subtasks: list

    def noise(self, preset: str) -> NoiseModel:
        if preset not in self.noise_presets:
            raise SceneFileError(
                f"no noise preset {preset!r}; have {sorted(self.noise_presets)}")
        return self.noise_presets[preset]

    def feature_point(self, name: str, layout) -> np.ndarray:
        if name not in self.features:
            raise SceneFileError(f"unknown feature {name!r}")
        return self.features[name].resolve(layout)


def _tokenize(text: str):
    """Yield (section tokens, [line tokens...]) blocks in file order."""
    section = None
    lines: list[list[str]] = []
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            if not line.endswith("]"):
                raise SceneFileError(f"unterminated section header: {raw!r}")
            if section is not None:
                yield section, lines
            section = tuple(line[1:-1].split())
            lines = []
            continue
        if section is None:
            raise SceneFileError(f"content before first section: {raw!r}")
        lines.append(line.split())
    if section is not None:
        yield section, lines


def _floats(tokens, n, context):
    if len(tokens) != n:
        raise SceneFileError(f"{context}: expected {n} numbers, got {tokens}")
    try:
        return [float(t) for t in tokens]
    except ValueError as exc:
        raise SceneFileError(f"{context}: {exc}") from exc


def _kv(lines, context):
    out = {}
    for tokens in lines:
        if tokens[0] in out:
            raise SceneFileError(f"{context}: duplicate key {tokens[0]!r}")
        out[tokens[0]] = tokens[1:]
    return out


def _parse_camera(lines) -> CameraModel:
    kv = _kv(lines, "camera")
    position = np.array(_floats(kv.pop("position"), 3, "camera position"))
    target = np.array(_floats(kv.pop("look_at"), 3, "camera look_at"))
    fx, = _floats(kv.pop("fx"), 1, "camera fx")
    fy, = _floats(kv.pop("fy"), 1, "camera fy")
    cx, = _floats(kv.pop("cx"), 1, "camera cx")
    cy, = _floats(kv.pop("cy"), 1, "camera cy")
    width = int(kv.pop("width")[0])
    height = int(kv.pop("height")[0])
    if kv:
        raise SceneFileError(f"camera: unknown keys {sorted(kv)}")
    return CameraModel(fx=fx, fy=fy, cx=cx, cy=cy, width=width, height=height,
                       pose=look_at(position, target))


def _parse_arm(lines):
    base = None
    home = None
    radii = None
    joints = []
    for tokens in lines:
        key, rest = tokens[0], tokens[1:]
        if key == "base_position":
            base = np.array(_floats(rest, 3, "arm base_position"))
        elif key == "home":
            home = np.array([float(t) for t in rest])
        elif key == "link_radii":
            radii = tuple(float(t) for t in rest)
        elif key == "joint":
            vals = _floats(rest, 9, "arm joint")
            joints.append(JointSpec(
                axis=np.array(vals[0:3]),
                offset=Pose3D.from_xyz(vals[3], vals[4], vals[5]),
                limit_lo=vals[6], limit_hi=vals[7], max_velocity=vals[8]))
        else:
            raise SceneFileError(f"arm: unknown key {key!r}")
    if base is None or home is None or radii is None or not joints:
        raise SceneFileError("arm needs base_position, home, link_radii, joints")
    arm = ArmModel(joints=tuple(joints),
                   base_pose=Pose3D(base, np.array([1.0, 0.0, 0.0, 0.0])))
    if len(radii) != arm.joint_count:
        raise SceneFileError("link_radii must list one radius per joint")
    if home.shape != (arm.joint_count,):
        raise SceneFileError("home must list one angle per joint")
    return arm, JointState(home), radii


def _parse_priors(lines, camera: CameraModel) -> PriorKnowledge:
    sizes = {}
    fixed = {"camera": camera.pose}
    receptacles = []
    for tokens in lines:
        key, rest = tokens[0], tokens[1:]
        if key == "size":
            sizes[rest[0]] = np.array(_floats(rest[1:], 3, f"size {rest[0]}"))
        elif key == "fixed":
            fixed[rest[0]] = Pose3D.from_xyz(
                *_floats(rest[1:], 3, f"fixed {rest[0]}"))
        elif key == "receptacle":
            receptacles.extend(rest)
        else:
            raise SceneFileError(f"priors: unknown key {key!r}")
    return PriorKnowledge(sizes=sizes, fixed_poses=fixed,
                          receptacles=tuple(receptacles))


def _parse_noise(lines, context) -> NoiseModel:
    kv = _kv(lines, context)
    kwargs = {}
    for key in ("joint_exec_sigma", "detector_px", "drop_prob"):
        if key in kv:
            kwargs[key], = _floats(kv.pop(key), 1, f"{context} {key}")
    if "joint_bias" in kv:
        kwargs["joint_bias"] = np.array([float(t) for t in kv.pop("joint_bias")])
    if kv:
        raise SceneFileError(f"{context}: unknown keys {sorted(kv)}")
    return NoiseModel(**kwargs)


def _parse_subtask(name, lines) -> SubtaskSpec:
    kv = _kv(lines, f"subtask {name}")
    fields = {"name": name, "action": kv.pop("action", [""])[0]}
    if "object" in kv:
        fields["object_id"] = kv.pop("object")[0]
    if "feature" in kv:
        fields["feature"] = kv.pop("feature")[0]
    if "goal" in kv:
        fields["goal"] = tuple(kv.pop("goal"))
    if "observe" in kv:
        fields["observe"] = tuple(kv.pop("observe"))
    if "tolerance" in kv:
        fields["tolerance"], = _floats(kv.pop("tolerance"), 1, "tolerance")
    if "dwell" in kv:
        fields["dwell"], = _floats(kv.pop("dwell"), 1, "dwell")
    if kv:
        raise SceneFileError(f"subtask {name}: unknown keys {sorted(kv)}")
    return SubtaskSpec(**fields)


def parse_scene_text(text: str) -> SceneConfig:
    sections = list(_tokenize(text))
    seen = [s for s, _ in sections]
    camera = arm = home = radii = priors = workspace = None
    truth_poses: dict = {}
    noise_presets = {"zero": NoiseModel.quiet()}
    planner = PlannerConfig()
    thresholds = DeviationThresholds()
    verify_retries = 1
    features: dict = {}
    subtasks: list = []

    for header, lines in sections:
        kind = header[0]
        if kind == "camera":
            camera = _parse_camera(lines)
        elif kind == "arm":
            arm, home, radii = _parse_arm(lines)
        elif kind == "priors":
            if camera is None:
                raise SceneFileError("[priors] must follow [camera]")
            priors = _parse_priors(lines, camera)
        elif kind == "objects":
            for tokens in lines:
                if tokens[0] != "object":
                    raise SceneFileError(f"objects: unknown key {tokens[0]!r}")
                truth_poses[tokens[1]] = Pose3D.from_xyz(
                    *_floats(tokens[2:], 3, f"object {tokens[1]}"))
        elif kind == "workspace":
            kv = _kv(lines, "workspace")
            rect = _floats(kv.pop("rect"), 4, "workspace rect")
            clearance = 0.05
            if "clearance" in kv:
                clearance, = _floats(kv.pop("clearance"), 1, "clearance")
            if kv:
                raise SceneFileError(f"workspace: unknown keys {sorted(kv)}")
            workspace = WorkspaceRect(rect[0], rect[1], rect[2], rect[3],
                                      clearance)
        elif kind == "noise":
            if len(header) != 2:
                raise SceneFileError("noise sections need a preset name")
            noise_presets[header[1]] = _parse_noise(lines, f"noise {header[1]}")
        elif kind == "planner":
            kv = _kv(lines, "planner")
            kwargs = {}
            for key in ("step", "connect_threshold", "goal_bias", "dt",
                        "safety_margin", "approach_height"):
                if key in kv:
                    kwargs[key], = _floats(kv.pop(key), 1, key)
            for key in ("max_iters", "shortcut_attempts", "segment_samples",
                        "skip_links"):
                if key in kv:
                    kwargs[key] = int(kv.pop(key)[0])
            if kv:
                raise SceneFileError(f"planner: unknown keys {sorted(kv)}")
            planner = PlannerConfig(**kwargs)
        elif kind == "validation":
            kv = _kv(lines, "validation")
            joint = float(kv.pop("joint_threshold", [0.05])[0])
            gripper = float(kv.pop("gripper_threshold", [0.2])[0])
            verify_retries = int(kv.pop("verify_retries", [1])[0])
            if kv:
                raise SceneFileError(f"validation: unknown keys {sorted(kv)}")
            thresholds = DeviationThresholds(joint=joint, gripper=gripper)
        elif kind == "task":
            for tokens in lines:
                if tokens[0] != "feature":
                    raise SceneFileError(f"task: unknown key {tokens[0]!r}")
                name, mode = tokens[1], tokens[2]
                if mode == "rel":
                    features[name] = WorldFeature(
                        name=name, relative_to=tokens[3],
                        offset=np.array(_floats(tokens[4:], 3, f"feature {name}")))
                elif mode == "abs":
                    features[name] = WorldFeature(
                        name=name,
                        offset=np.array(_floats(tokens[3:], 3, f"feature {name}")))
                else:
                    raise SceneFileError(f"feature {name}: mode must be rel|abs")
        elif kind == "subtask":
            if len(header) != 2:
                raise SceneFileError("subtask sections need a name")
            subtasks.append(_parse_subtask(header[1], lines))
        else:
            raise SceneFileError(f"unknown section {header!r}")

    for required, value in (("camera", camera), ("arm", arm),
                            ("priors", priors), ("workspace", workspace)):
        if value is None:
            raise SceneFileError(f"missing [{required}] section")
    if not truth_poses:
        raise SceneFileError("missing [objects] section")
    if not subtasks:
        raise SceneFileError("scene declares no subtasks")
    if "default" not in noise_presets:
        noise_presets["default"] = NoiseModel()

    for label in truth_poses:
        if label not in priors.sizes:
            raise SceneFileError(f"object {label} has no size prior")
    for spec in subtasks:
        for label in spec.observe:
            if label not in priors.sizes:
                raise SceneFileError(
                    f"subtask {spec.name} observes unknown label {label!r}")
        if spec.object_id and spec.object_id not in priors.sizes:
            raise SceneFileError(
                f"subtask {spec.name} references unknown object "
                f"{spec.object_id!r}")
        if spec.feature and spec.feature not in features:
            raise SceneFileError(
                f"subtask {spec.name} references unknown feature "
                f"{spec.feature!r}")
        anchor = spec.feature and features[spec.feature].relative_to
        if anchor and anchor not in priors.sizes:
            raise SceneFileError(
                f"feature {spec.feature} anchored to unknown label {anchor!r}")

    return SceneConfig(camera=camera, arm=arm, home=home, link_radii=radii,
                       priors=priors, truth_poses=truth_poses,
                       workspace=workspace, noise_presets=noise_presets,
                       planner=planner, thresholds=thresholds,
                       verify_retries=verify_retries, features=features,
                       subtasks=subtasks)


def load_scene(path) -> SceneConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_scene_text(fh.read())
