"""Scene understanding: fuse prior knowledge with detector output.

The shipped detector is synthetic. It projects ground-truth geometry through
the camera and perturbs the result, standing in for a learned detector while
keeping the rest of the stack identical. Everything downstream consumes plain
``Detection`` records, so a real detector can be swapped in behind the same
interface.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import BehindCamera, CameraModel, Pose3D, infer_object_position, project

# Two resting boxes may touch; they may not overlap deeper than this.
OVERLAP_TOLERANCE = 1e-6

FIXED_LABELS = ("table", "camera", "robot")


class PerceptionError(Exception):
    """Base class for scene-understanding failures."""


class UnknownObject(PerceptionError):
    """A detection carries a label with no size prior."""


class MissingObject(PerceptionError):
    """A label the task needs was not detected."""


class LayoutOverlap(PerceptionError):
    """Two objects in a layout interpenetrate beyond tolerance."""


@dataclass(frozen=True)
class SceneObject:
    pose: Pose3D
    size: np.ndarray  # full extents, meters
    movable: bool = True
    receptacle: bool = False

    def __post_init__(self):
        size = np.asarray(self.size, dtype=float)
        if size.shape != (3,) or np.any(size <= 0.0):
            raise ValueError(f"size must be 3 positive extents, got {size}")
        object.__setattr__(self, "size", size)

    def aabb(self) -> tuple[np.ndarray, np.ndarray]:
        """World-frame axis-aligned bounds (lo, hi) of the oriented box."""
        half = np.abs(self.pose.rotation_matrix()) @ (0.5 * self.size)
        return self.pose.position - half, self.pose.position + half

    def top_center(self) -> np.ndarray:
        lo, hi = self.aabb()
        return np.array([self.pose.position[0], self.pose.position[1], hi[2]])


def _pair_overlap(a: SceneObject, b: SceneObject) -> float:
    """Interpenetration depth of two AABBs; <= 0 means separated or touching."""
    alo, ahi = a.aabb()
    blo, bhi = b.aabb()
    gaps = np.minimum(ahi, bhi) - np.maximum(alo, blo)
    return float(gaps.min())


class SceneLayout:
    """Named boxes making up one consistent snapshot of the workspace.

    Construction validates that no two boxes interpenetrate deeper than
    OVERLAP_TOLERANCE. Holders that mutate the layout afterwards (the reality
    proxy moving objects around) own that consistency themselves.
    """

    def __init__(self, objects: dict[str, SceneObject]):
        self.objects = dict(objects)
        names = sorted(self.objects)
        for i, a in enumerate(names):
            for b in names[i + 1:]:
                depth = _pair_overlap(self.objects[a], self.objects[b])
                if depth > OVERLAP_TOLERANCE:
                    raise LayoutOverlap(
                        f"{a} and {b} interpenetrate by {depth:.3e} m")

    def __contains__(self, label: str) -> bool:
        return label in self.objects

    def __getitem__(self, label: str) -> SceneObject:
        return self.objects[label]

    def copy(self) -> "SceneLayout":
        out = SceneLayout.__new__(SceneLayout)
        out.objects = dict(self.objects)
        return out

    def set_pose(self, label: str, pose: Pose3D) -> None:
        old = self.objects[label]
        self.objects[label] = SceneObject(pose, old.size, old.movable,
                                          old.receptacle)

    def movable_labels(self) -> list[str]:
        return sorted(k for k, v in self.objects.items() if v.movable)


@dataclass(frozen=True)
class PriorKnowledge:
    """What the twin knows before looking: object extents and fixed mounts."""

    sizes: dict[str, np.ndarray]
    fixed_poses: dict[str, Pose3D]
    receptacles: tuple[str, ...] = ()

    def __post_init__(self):
        sizes = {k: np.asarray(v, dtype=float) for k, v in self.sizes.items()}
        for label, size in sizes.items():
            if size.shape != (3,) or np.any(size <= 0.0):
                raise ValueError(f"size prior for {label} must be positive")
        object.__setattr__(self, "sizes", sizes)
        for label in FIXED_LABELS:
            if label not in self.fixed_poses:
                raise ValueError(f"fixed pose prior for {label} is required")

    def table_height(self) -> float:
        """Height of the table's top surface."""
        pose = self.fixed_poses["table"]
        return float(pose.position[2] + 0.5 * self.sizes["table"][2])


@dataclass(frozen=True)
class DetectorNoise:
    px: float = 0.0  # uniform half-width applied to the whole bbox, pixels

    def __post_init__(self):
        if self.px < 0.0:
            raise ValueError("pixel noise half-width must be >= 0")


@dataclass(frozen=True)
class Detection:
    label: str
    bbox: np.ndarray  # (u_min, v_min, u_max, v_max)
    confidence: float = 1.0

    def __post_init__(self):
        bbox = np.asarray(self.bbox, dtype=float)
        if bbox.shape != (4,):
            raise ValueError("bbox must be (u_min, v_min, u_max, v_max)")
        if not (bbox[0] < bbox[2] and bbox[1] < bbox[3]):
            raise ValueError(f"degenerate bbox {bbox}")
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError("confidence must lie in [0, 1]")
        object.__setattr__(self, "bbox", bbox)

    def center(self) -> np.ndarray:
        return np.array([0.5 * (self.bbox[0] + self.bbox[2]),
                         0.5 * (self.bbox[1] + self.bbox[3])])


_CORNER_SIGNS = np.array([[sx, sy, sz]
                          for sx in (-0.5, 0.5)
                          for sy in (-0.5, 0.5)
                          for sz in (-0.5, 0.5)])


def detect(scene_truth: SceneLayout, cam: CameraModel, noise: DetectorNoise,
           rng_seed: int) -> list[Detection]:
    """Synthetic detector: one box per visible movable object.

    The bbox is centered on the projected centroid with the extent of the
    projected box corners; the entire bbox is then shifted by a single uniform
    draw in [-px, px] per axis. Objects whose centroid falls outside the image
    (or behind the camera) are silently omitted, like a missed detection.
    Iteration is in sorted label order so a seed fully determines the output.
    """
    rng = np.random.default_rng(rng_seed)
    out = []
    for label in sorted(scene_truth.objects):
        obj = scene_truth.objects[label]
        if not obj.movable:
            continue
        offset = rng.uniform(-noise.px, noise.px, size=2)
        try:
            center = project(cam, obj.pose.position)
        except BehindCamera:
            continue
        if not cam.contains_pixel(center):
            continue
        corners = obj.pose.position + _CORNER_SIGNS * obj.size @ obj.pose.rotation_matrix().T
        try:
            pix = np.array([project(cam, c) for c in corners])
        except BehindCamera:
            continue
        half = 0.5 * (pix.max(axis=0) - pix.min(axis=0))
        lo = center + offset - half
        hi = center + offset + half
        lo = np.clip(lo, 0.0, [cam.width - 1.0, cam.height - 1.0])
        hi = np.clip(hi, 0.0, [cam.width - 1.0, cam.height - 1.0])
        if not (lo[0] < hi[0] and lo[1] < hi[1]):
            continue
        out.append(Detection(label, np.array([lo[0], lo[1], hi[0], hi[1]])))
    return out


def understand_scene(detections: list[Detection], priors: PriorKnowledge,
                     cam: CameraModel, required: tuple[str, ...] = ()) -> SceneLayout:
    """Build the twin's layout: fixed objects from priors, the rest from vision.

    Duplicate labels resolve to the highest-confidence detection. A label with
    no size prior raises UnknownObject; a required label with no surviving
    detection raises MissingObject.
    """
    objects: dict[str, SceneObject] = {}
    for label, pose in priors.fixed_poses.items():
        if label not in priors.sizes:
            raise UnknownObject(f"fixed object {label} has no size prior")
        objects[label] = SceneObject(pose, priors.sizes[label], movable=False)

    best: dict[str, Detection] = {}
    for det in detections:
        if det.label not in priors.sizes:
            raise UnknownObject(f"no size prior for detected label {det.label}")
        held = best.get(det.label)
        if held is None or det.confidence > held.confidence:
            best[det.label] = det

    table_z = priors.table_height()
    for label in sorted(best):
        det = best[label]
        pose = infer_object_position(cam, det.center(), priors.sizes[label],
                                     table_z)
        objects[label] = SceneObject(pose, priors.sizes[label], movable=True,
                                     receptacle=label in priors.receptacles)

    for label in required:
        if label not in objects:
            raise MissingObject(f"required object {label} was not detected")
    return SceneLayout(objects)
