"""Byte transports and transcripts for the twin <-> reality connection.

The default transport is an in-memory frame queue serving requests
synchronously in one process. A localhost socket transport is available so
the two endpoints can genuinely live in different processes; both move the
same frames, so transcripts are interchangeable.
"""

from __future__ import annotations

import socket
import threading
from collections import deque
from typing import Optional

from .protocol import (
    HEADER_BYTES,
    Envelope,
    Halt,
    KIND_HALT,
    ProtocolError,
    Session,
    decode,
    encode,
)

# transcript record markers: client-to-server and server-to-client
TO_SERVER = b">"
TO_CLIENT = b"<"


class TransportError(Exception):
    pass


class Transcript:
    """Verbatim interleaved frame log of one connection."""

    def __init__(self):
        self.records: list[tuple[bytes, bytes]] = []

    def add(self, direction: bytes, frame: bytes) -> None:
        if direction not in (TO_SERVER, TO_CLIENT):
            raise ValueError(f"bad transcript direction {direction!r}")
        self.records.append((direction, bytes(frame)))

    def __len__(self) -> int:
        return len(self.records)

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            for direction, frame in self.records:
                fh.write(direction)
                fh.write(frame)

    @classmethod
    def load(cls, path) -> "Transcript":
        out = cls()
        with open(path, "rb") as fh:
            data = fh.read()
        pos = 0
        while pos < len(data):
            direction = data[pos:pos + 1]
            if direction not in (TO_SERVER, TO_CLIENT):
                raise TransportError(f"corrupt transcript marker at byte {pos}")
            pos += 1
            if len(data) - pos < HEADER_BYTES:
                raise TransportError("transcript ends mid-frame header")
            n = int.from_bytes(data[pos:pos + HEADER_BYTES], "big")
            end = pos + HEADER_BYTES + n
            if end > len(data):
                raise TransportError("transcript ends mid-frame body")
            out.records.append((direction, data[pos:end]))
            pos = end
        return out


class FrameServer:
    """One server-side session: a frame in, zero or more reply frames out."""

    def __init__(self, handler):
        self.session = Session(handler)

    def serve(self, frame: bytes) -> list[bytes]:
        env, used = decode(frame)
        if used != len(frame):
            raise TransportError("frame carries trailing bytes")
        return [encode(out) for out in self.session.receive(env)]


class MemoryTransport:
    """Synchronous in-process link to a FrameServer."""

    def __init__(self, server: FrameServer):
        self._server = server
        self._inbox: deque[bytes] = deque()

    def send_frame(self, frame: bytes) -> None:
        self._inbox.extend(self._server.serve(frame))

    def recv_frame(self) -> bytes:
        if not self._inbox:
            raise TransportError("no frame available")
        return self._inbox.popleft()

    def close(self) -> None:
        pass


class SocketTransport:
    """Client side of a stream socket speaking length-prefixed frames."""

    def __init__(self, sock: socket.socket):
        self._sock = sock

    @classmethod
    def connect(cls, host: str, port: int) -> "SocketTransport":
        return cls(socket.create_connection((host, port)))

    def send_frame(self, frame: bytes) -> None:
        self._sock.sendall(frame)

    def _read_exact(self, n: int) -> bytes:
        chunks = []
        remaining = n
        while remaining:
            chunk = self._sock.recv(remaining)
            if not chunk:
                raise TransportError("connection closed mid-frame")
            chunks.append(chunk)
            remaining -= len(chunk)
        return b"".join(chunks)

    def recv_frame(self) -> bytes:
        header = self._read_exact(HEADER_BYTES)
        n = int.from_bytes(header, "big")
        return header + self._read_exact(n)

    def close(self) -> None:
        try:
            self._sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self._sock.close()


def serve_socket_once(handler, host: str = "127.0.0.1") -> tuple[threading.Thread, int]:
    """Serve a single connection on an ephemeral port in a daemon thread."""
    listener = socket.create_server((host, 0))
    port = listener.getsockname()[1]

    def run():
        conn, _ = listener.accept()
        listener.close()
        server = FrameServer(handler)
        transport = SocketTransport(conn)
        try:
            while True:
                frame = transport.recv_frame()
                for reply in server.serve(frame):
                    transport.send_frame(reply)
                if server.session.state.value == "halted":
                    break
        except (TransportError, OSError):
            pass
        finally:
            conn.close()

    thread = threading.Thread(target=run, daemon=True)
    thread.start()
    return thread, port


class Requester:
    """Client-side connection: owns the session, frames, and transcript."""

    def __init__(self, transport, transcript: Optional[Transcript] = None):
        self.session = Session()
        self.transport = transport
        self.transcript = transcript

    def _transmit(self, env: Envelope) -> None:
        frame = encode(env)
        if self.transcript is not None:
            self.transcript.add(TO_SERVER, frame)
        self.transport.send_frame(frame)

    def request(self, kind: str, payload) -> Envelope:
        """Send one request and return the peer's reply envelope.

        The reply may be a halt; callers must check the kind.
        """
        self._transmit(self.session.send(kind, payload))
        frame = self.transport.recv_frame()
        if self.transcript is not None:
            self.transcript.add(TO_CLIENT, frame)
        reply, _ = decode(frame)
        for out in self.session.receive(reply):
            self._transmit(out)
        return reply

    def send_halt(self, reason: str) -> None:
        self._transmit(self.session.send(KIND_HALT, Halt(reason)))

    def close(self) -> None:
        self.transport.close()


def replay_transcript(transcript: Transcript, handler) -> list[bytes]:
    """Re-run the server side of a transcript; returns the produced frames.

    Feeds every client-to-server frame, in order, to a fresh server built
    around `handler` and collects its reply frames. Bit-identical equality
    with the recorded server-to-client frames is the caller's assertion;
    use replay_matches for the common case.
    """
    server = FrameServer(handler)
    produced = []
    for direction, frame in transcript.records:
        if direction == TO_SERVER:
            produced.extend(server.serve(frame))
    return produced


def replay_matches(transcript: Transcript, handler) -> bool:
    recorded = [frame for direction, frame in transcript.records
                if direction == TO_CLIENT]
    try:
        produced = replay_transcript(transcript, handler)
    except (ProtocolError, TransportError):
        return False
    return produced == recorded
