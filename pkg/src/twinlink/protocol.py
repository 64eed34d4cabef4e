"""Framed message protocol linking the twin endpoint to the reality endpoint.

One frame is a 4-byte big-endian length followed by that many bytes of UTF-8
JSON. Serialization is canonical: keys sorted, no whitespace, every float
rounded to 12 significant digits before writing. Encoding an envelope twice,
or encoding a decoded envelope, yields identical bytes, which is what makes
transcripts replayable bit-for-bit.

The two endpoints never share memory. Everything the twin learns about
reality crosses this boundary as a frame, so the session layer below is the
entire trust surface: versions must match, sequence numbers must not skip,
and each request owes exactly one reply.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Optional

import numpy as np

from .geometry import CameraModel, Pose3D
from .kinematics import JointState
from .perception import Detection
from .planning import Trajectory
from .validation import GoalKind, SubtaskGoal

PROTOCOL_VERSION = 1

HEADER_BYTES = 4
MAX_FRAME_BYTES = 1 << 24


class ProtocolError(Exception):
    """Base class for protocol failures."""


class EncodeError(ProtocolError):
    pass


class DecodeError(ProtocolError):
    pass


class NeedMoreData(ProtocolError):
    """The buffer ends mid-frame; feed more bytes and retry."""


class VersionMismatch(ProtocolError):
    pass


class UnknownKind(ProtocolError):
    pass


class ProtocolViolation(ProtocolError):
    """The peer broke the request/reply discipline."""


def quantize_float(x: float) -> float:
    """Round to 12 significant digits; idempotent."""
    return float(f"{x:.12g}")


def _canon(value):
    if isinstance(value, (bool, str)) or value is None:
        return value
    if isinstance(value, (int, np.integer)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        return quantize_float(float(value))
    if isinstance(value, np.ndarray):
        return [_canon(v) for v in value.tolist()]
    if isinstance(value, (list, tuple)):
        return [_canon(v) for v in value]
    if isinstance(value, dict):
        return {str(k): _canon(v) for k, v in value.items()}
    raise EncodeError(f"cannot serialize {type(value).__name__}")


def canonical_json(value) -> bytes:
    """Stable byte serialization used for frames and report files."""
    return json.dumps(_canon(value), sort_keys=True, separators=(",", ":"),
                      allow_nan=False).encode("utf-8")


class GripperAction(Enum):
    OPEN = "open"
    CLOSE = "close"
    NONE = "none"


# ---------------------------------------------------------------------------
# payload types


@dataclass(frozen=True)
class PerceptionRequest:
    pass


@dataclass(frozen=True, eq=False)
class PerceptionReply:
    detections: tuple
    camera: CameraModel


@dataclass(frozen=True)
class StateRequest:
    pass


@dataclass(frozen=True, eq=False)
class StateReply:
    state: JointState
    timestamp: float


@dataclass(frozen=True, eq=False)
class ExecuteCommand:
    segment: Trajectory
    gripper_action: GripperAction = GripperAction.NONE


@dataclass(frozen=True, eq=False)
class ExecuteAck:
    state: JointState
    steps: int


@dataclass(frozen=True, eq=False)
class VerifyRequest:
    goal: SubtaskGoal
    prompt: str


@dataclass(frozen=True)
class VerifyReply:
    answer: str


@dataclass(frozen=True)
class Halt:
    reason: str


@dataclass(frozen=True, eq=False)
class Envelope:
    version: int
    seq: int
    kind: str
    payload: object


KIND_PERCEPTION_REQUEST = "perception_request"
KIND_PERCEPTION_REPLY = "perception_reply"
KIND_STATE_REQUEST = "state_request"
KIND_STATE_REPLY = "state_reply"
KIND_EXECUTE_COMMAND = "execute_command"
KIND_EXECUTE_ACK = "execute_ack"
KIND_VERIFY_REQUEST = "verify_request"
KIND_VERIFY_REPLY = "verify_reply"
KIND_HALT = "halt"

REQUEST_REPLY = {
    KIND_PERCEPTION_REQUEST: KIND_PERCEPTION_REPLY,
    KIND_STATE_REQUEST: KIND_STATE_REPLY,
    KIND_EXECUTE_COMMAND: KIND_EXECUTE_ACK,
    KIND_VERIFY_REQUEST: KIND_VERIFY_REPLY,
}

_PAYLOAD_TYPES = {
    KIND_PERCEPTION_REQUEST: PerceptionRequest,
    KIND_PERCEPTION_REPLY: PerceptionReply,
    KIND_STATE_REQUEST: StateRequest,
    KIND_STATE_REPLY: StateReply,
    KIND_EXECUTE_COMMAND: ExecuteCommand,
    KIND_EXECUTE_ACK: ExecuteAck,
    KIND_VERIFY_REQUEST: VerifyRequest,
    KIND_VERIFY_REPLY: VerifyReply,
    KIND_HALT: Halt,
}


def is_request(kind: str) -> bool:
    return kind in REQUEST_REPLY


def is_reply(kind: str) -> bool:
    return kind in set(REQUEST_REPLY.values())


# ---------------------------------------------------------------------------
# wire schemas


def _pose_to_wire(pose: Pose3D) -> dict:
    return {"position": pose.position, "quat": pose.quat}


def _pose_from_wire(d: dict) -> Pose3D:
    _expect_keys(d, {"position", "quat"})
    return Pose3D(np.asarray(d["position"], dtype=float),
                  np.asarray(d["quat"], dtype=float))


def _camera_to_wire(cam: CameraModel) -> dict:
    return {"fx": cam.fx, "fy": cam.fy, "cx": cam.cx, "cy": cam.cy,
            "width": cam.width, "height": cam.height,
            "pose": _pose_to_wire(cam.pose)}


def _camera_from_wire(d: dict) -> CameraModel:
    _expect_keys(d, {"fx", "fy", "cx", "cy", "width", "height", "pose"})
    return CameraModel(fx=float(d["fx"]), fy=float(d["fy"]),
                       cx=float(d["cx"]), cy=float(d["cy"]),
                       width=int(d["width"]), height=int(d["height"]),
                       pose=_pose_from_wire(d["pose"]))


def _detection_to_wire(det: Detection) -> dict:
    return {"label": det.label, "bbox": det.bbox, "confidence": det.confidence}


def _detection_from_wire(d: dict) -> Detection:
    _expect_keys(d, {"label", "bbox", "confidence"})
    return Detection(label=str(d["label"]), bbox=np.asarray(d["bbox"], dtype=float),
                     confidence=float(d["confidence"]))


def _state_to_wire(state: JointState) -> dict:
    return {"angles": state.angles, "gripper": state.gripper}


def _state_from_wire(d: dict) -> JointState:
    _expect_keys(d, {"angles", "gripper"})
    return JointState(np.asarray(d["angles"], dtype=float), float(d["gripper"]))


def _trajectory_to_wire(traj: Trajectory) -> dict:
    return {"dt": traj.dt, "times": traj.times, "angles": traj.angles,
            "grippers": traj.grippers}


def _trajectory_from_wire(d: dict) -> Trajectory:
    _expect_keys(d, {"dt", "times", "angles", "grippers"})
    angles = np.asarray(d["angles"], dtype=float)
    if angles.ndim != 2:
        raise ValueError("trajectory angles must be a 2-d array")
    return Trajectory(dt=float(d["dt"]), times=np.asarray(d["times"], dtype=float),
                      angles=angles, grippers=np.asarray(d["grippers"], dtype=float))


def _goal_to_wire(goal: SubtaskGoal) -> dict:
    return {"kind": goal.kind.value, "object": goal.object_id,
            "target": None if goal.target_pose is None else _pose_to_wire(goal.target_pose),
            "receptacle": goal.receptacle_id, "tolerance": goal.tolerance}


def _goal_from_wire(d: dict) -> SubtaskGoal:
    _expect_keys(d, {"kind", "object", "target", "receptacle", "tolerance"})
    target = None if d["target"] is None else _pose_from_wire(d["target"])
    receptacle = d["receptacle"]
    return SubtaskGoal(kind=GoalKind(d["kind"]), object_id=str(d["object"]),
                       target_pose=target,
                       receptacle_id=None if receptacle is None else str(receptacle),
                       tolerance=float(d["tolerance"]))


def _expect_keys(d: dict, keys: set):
    if not isinstance(d, dict) or set(d) != keys:
        got = sorted(d) if isinstance(d, dict) else type(d).__name__
        raise ValueError(f"expected fields {sorted(keys)}, got {got}")


def _payload_to_wire(kind: str, payload) -> dict:
    if kind == KIND_PERCEPTION_REQUEST or kind == KIND_STATE_REQUEST:
        return {}
    if kind == KIND_PERCEPTION_REPLY:
        return {"detections": [_detection_to_wire(d) for d in payload.detections],
                "camera": _camera_to_wire(payload.camera)}
    if kind == KIND_STATE_REPLY:
        return {"state": _state_to_wire(payload.state),
                "timestamp": payload.timestamp}
    if kind == KIND_EXECUTE_COMMAND:
        return {"segment": _trajectory_to_wire(payload.segment),
                "gripper_action": payload.gripper_action.value}
    if kind == KIND_EXECUTE_ACK:
        return {"state": _state_to_wire(payload.state), "steps": payload.steps}
    if kind == KIND_VERIFY_REQUEST:
        return {"goal": _goal_to_wire(payload.goal), "prompt": payload.prompt}
    if kind == KIND_VERIFY_REPLY:
        return {"answer": payload.answer}
    return {"reason": payload.reason}


def _payload_from_wire(kind: str, d: dict):
    if kind == KIND_PERCEPTION_REQUEST:
        _expect_keys(d, set())
        return PerceptionRequest()
    if kind == KIND_STATE_REQUEST:
        _expect_keys(d, set())
        return StateRequest()
    if kind == KIND_PERCEPTION_REPLY:
        _expect_keys(d, {"detections", "camera"})
        return PerceptionReply(
            detections=tuple(_detection_from_wire(x) for x in d["detections"]),
            camera=_camera_from_wire(d["camera"]))
    if kind == KIND_STATE_REPLY:
        _expect_keys(d, {"state", "timestamp"})
        return StateReply(state=_state_from_wire(d["state"]),
                          timestamp=float(d["timestamp"]))
    if kind == KIND_EXECUTE_COMMAND:
        _expect_keys(d, {"segment", "gripper_action"})
        return ExecuteCommand(segment=_trajectory_from_wire(d["segment"]),
                              gripper_action=GripperAction(d["gripper_action"]))
    if kind == KIND_EXECUTE_ACK:
        _expect_keys(d, {"state", "steps"})
        return ExecuteAck(state=_state_from_wire(d["state"]), steps=int(d["steps"]))
    if kind == KIND_VERIFY_REQUEST:
        _expect_keys(d, {"goal", "prompt"})
        return VerifyRequest(goal=_goal_from_wire(d["goal"]), prompt=str(d["prompt"]))
    if kind == KIND_VERIFY_REPLY:
        _expect_keys(d, {"answer"})
        return VerifyReply(answer=str(d["answer"]))
    _expect_keys(d, {"reason"})
    return Halt(reason=str(d["reason"]))


# ---------------------------------------------------------------------------
# framing


def encode(env: Envelope) -> bytes:
    """Envelope -> one complete frame."""
    if env.version != PROTOCOL_VERSION:
        raise EncodeError(f"cannot encode version {env.version}")
    if env.kind not in _PAYLOAD_TYPES:
        raise EncodeError(f"unknown kind {env.kind!r}")
    if not isinstance(env.payload, _PAYLOAD_TYPES[env.kind]):
        raise EncodeError(
            f"{env.kind} payload must be {_PAYLOAD_TYPES[env.kind].__name__}, "
            f"got {type(env.payload).__name__}")
    if not isinstance(env.seq, (int, np.integer)) or env.seq < 1:
        raise EncodeError(f"seq must be a positive integer, got {env.seq!r}")
    try:
        body = canonical_json({"version": env.version, "seq": int(env.seq),
                               "kind": env.kind,
                               "payload": _payload_to_wire(env.kind, env.payload)})
    except (TypeError, ValueError) as exc:
        raise EncodeError(str(exc)) from exc
    if len(body) > MAX_FRAME_BYTES:
        raise EncodeError(f"frame body of {len(body)} bytes exceeds limit")
    return len(body).to_bytes(HEADER_BYTES, "big") + body


def decode(data: bytes, offset: int = 0) -> tuple[Envelope, int]:
    """Decode one frame starting at offset; returns (envelope, next offset).

    Raises NeedMoreData when the buffer ends before the frame does; that is
    a retryable condition, not corruption.
    """
    if len(data) - offset < HEADER_BYTES:
        raise NeedMoreData("incomplete frame header")
    n = int.from_bytes(data[offset:offset + HEADER_BYTES], "big")
    if n > MAX_FRAME_BYTES:
        raise DecodeError(f"declared frame length {n} exceeds limit")
    start = offset + HEADER_BYTES
    if len(data) - start < n:
        raise NeedMoreData(f"frame wants {n} bytes, have {len(data) - start}")
    try:
        body = json.loads(data[start:start + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DecodeError(f"malformed frame body: {exc}") from exc
    if not isinstance(body, dict) or set(body) != {"version", "seq", "kind", "payload"}:
        raise DecodeError("frame body must carry version, seq, kind, payload")
    version = body["version"]
    if version != PROTOCOL_VERSION:
        raise VersionMismatch(f"peer speaks version {version!r}, need {PROTOCOL_VERSION}")
    kind = body["kind"]
    if kind not in _PAYLOAD_TYPES:
        raise UnknownKind(f"unknown message kind {kind!r}")
    seq = body["seq"]
    if not isinstance(seq, int) or isinstance(seq, bool) or seq < 1:
        raise DecodeError(f"seq must be a positive integer, got {seq!r}")
    try:
        payload = _payload_from_wire(kind, body["payload"])
    except (KeyError, TypeError, ValueError) as exc:
        raise DecodeError(f"bad {kind} payload: {exc}") from exc
    return Envelope(PROTOCOL_VERSION, seq, kind, payload), start + n


class StreamDecoder:
    """Reassembles frames from arbitrarily split byte chunks."""

    def __init__(self):
        self._buf = bytearray()

    def feed(self, chunk: bytes) -> list[Envelope]:
        self._buf.extend(chunk)
        out = []
        offset = 0
        while True:
            try:
                env, offset = decode(bytes(self._buf), offset)
            except NeedMoreData:
                break
            out.append(env)
        del self._buf[:offset]
        return out

    @property
    def pending_bytes(self) -> int:
        return len(self._buf)


# ---------------------------------------------------------------------------
# session state machine


class SessionState(Enum):
    IDLE = "idle"
    AWAITING_REPLY = "awaiting_reply"
    HALTED = "halted"


Handler = Callable[[str, object], tuple[str, object]]


class Session:
    """Request/reply discipline over one connection.

    With a handler the session answers inbound requests synchronously (the
    reality side). Without one it exposes AwaitingReply after an inbound
    request and the owner supplies the reply via send() (useful in tests and
    for the twin side, which only ever originates requests).

    A sequence gap, a halt sent, or a halt received all land in the terminal
    HALTED state; after that the session emits nothing and send() refuses.
    """

    def __init__(self, handler: Optional[Handler] = None):
        self._handler = handler
        self._next_seq = 1
        self._last_peer_seq = 0
        self._sent_request: Optional[str] = None
        self._owed_reply_to: Optional[str] = None
        self._halted = False
        self.halt_reason: Optional[str] = None

    @property
    def state(self) -> SessionState:
        if self._halted:
            return SessionState.HALTED
        if self._sent_request or self._owed_reply_to:
            return SessionState.AWAITING_REPLY
        return SessionState.IDLE

    def _make(self, kind: str, payload) -> Envelope:
        env = Envelope(PROTOCOL_VERSION, self._next_seq, kind, payload)
        self._next_seq += 1
        return env

    def send(self, kind: str, payload) -> Envelope:
        if self._halted:
            raise ProtocolViolation("session is halted")
        if kind == KIND_HALT:
            self._halted = True
            self.halt_reason = payload.reason
            return self._make(kind, payload)
        if is_request(kind):
            if self._sent_request or self._owed_reply_to:
                raise ProtocolViolation("cannot send a request while one is open")
            env = self._make(kind, payload)
            self._sent_request = kind
            return env
        if not is_reply(kind):
            raise ProtocolViolation(f"cannot send kind {kind!r}")
        if self._owed_reply_to is None:
            raise ProtocolViolation("no pending request to reply to")
        if REQUEST_REPLY[self._owed_reply_to] != kind:
            raise ProtocolViolation(
                f"pending {self._owed_reply_to} wants "
                f"{REQUEST_REPLY[self._owed_reply_to]}, not {kind}")
        env = self._make(kind, payload)
        self._owed_reply_to = None
        return env

    def receive(self, env: Envelope) -> list[Envelope]:
        """Process one inbound envelope; returns envelopes to transmit."""
        if self._halted:
            return []
        expected = self._last_peer_seq + 1
        if env.seq != expected:
            reason = f"sequence gap: expected {expected}, got {env.seq}"
            halt = self._make(KIND_HALT, Halt(reason))
            self._halted = True
            self.halt_reason = reason
            return [halt]
        self._last_peer_seq = env.seq
        if env.kind == KIND_HALT:
            self._halted = True
            self.halt_reason = env.payload.reason
            return []
        if is_request(env.kind):
            if self._sent_request or self._owed_reply_to:
                raise ProtocolViolation(
                    f"peer sent {env.kind} while an exchange is open")
            self._owed_reply_to = env.kind
            if self._handler is None:
                return []
            reply_kind, reply_payload = self._handler(env.kind, env.payload)
            if reply_kind == KIND_HALT:
                self._owed_reply_to = None
            return [self.send(reply_kind, reply_payload)]
        # reply kinds land here
        if self._sent_request is None:
            raise ProtocolViolation(f"{env.kind} received while idle")
        if REQUEST_REPLY[self._sent_request] != env.kind:
            raise ProtocolViolation(
                f"request {self._sent_request} answered by {env.kind}")
        self._sent_request = None
        return []


def session_step(session: Session, inbound: Envelope) -> tuple[list[Envelope], Session]:
    """Feed one envelope through a session; returns (outbound, session)."""
    return session.receive(inbound), session
