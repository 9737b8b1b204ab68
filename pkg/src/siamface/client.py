"""Camera-side client: motion-gated frame bursts and user registration."""

import logging
import socket
import threading
import time
import uuid
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import protocol
from .errors import FrameError, RegisterRejected
from .pgm import decode_pgm, encode_pgm, read_pgm

log = logging.getLogger(__name__)


def _as_unit(frame):
    arr = np.asarray(frame)
    if arr.dtype == np.uint8:
        return arr.astype(np.float32) / 255.0
    return arr.astype(np.float32, copy=False)


def motion_score(prev, curr):
    """Mean absolute per-pixel difference of two frames, in [0, 1]."""
    a, b = _as_unit(prev), _as_unit(curr)
    if a.shape != b.shape:
        raise FrameError(f"frame size changed from {a.shape} to {b.shape}")
    return float(np.mean(np.abs(a - b)))


@dataclass
class FrameSource:
    """An ordered sequence of same-sized grayscale frames."""

    frames: list
    period: float = 1 / 25

    def __post_init__(self):
        shapes = {np.asarray(f).shape for f in self.frames}
        if len(shapes) > 1:
            raise FrameError(f"frames differ in size: {sorted(shapes)}")

    @classmethod
    def from_directory(cls, path, period=1 / 25):
        files = sorted(Path(path).glob("*.pgm"), key=lambda p: p.name)
        return cls([read_pgm(f) for f in files], period)

    def __iter__(self):
        return iter(self.frames)

    def __len__(self):
        return len(self.frames)


class MotionGate:
    """Frame-differencing trigger.

    A consecutive-frame motion score above ``threshold`` opens a burst made
    of the next ``burst_size`` frames; triggers are ignored while a burst is
    being collected. :meth:`push` returns the finished burst or None.
    """

    def __init__(self, threshold=0.02, burst_size=5):
        if threshold <= 0 or burst_size < 1:
            raise ValueError("threshold must be > 0 and burst_size >= 1")
        self.threshold = threshold
        self.burst_size = burst_size
        self._prev = None
        self._burst = None

    def push(self, frame):
        prev, self._prev = self._prev, frame
        if self._burst is not None:
            self._burst.append(frame)
            if len(self._burst) == self.burst_size:
                done, self._burst = self._burst, None
                return done
            return None
        if prev is not None and motion_score(prev, frame) > self.threshold:
            self._burst = []
        return None


@dataclass
class ClientConfig:
    server: tuple = ("127.0.0.1", 7070)
    motion_threshold: float = 0.02
    burst_size: int = 5
    request_prefix: str = None
    retries: int = 3
    backoff: float = 0.1
    timeout: float = 30.0

    def __post_init__(self):
        if self.motion_threshold <= 0:
            raise ValueError("motion_threshold must be positive")
        if self.burst_size < 1:
            raise ValueError("burst_size must be at least 1")
        if self.request_prefix is None:
            self.request_prefix = uuid.uuid4().hex[:8]


class Connection:
    """Blocking line-oriented connection to the recognition server."""

    def __init__(self, address, retries=3, backoff=0.1, timeout=30.0):
        last = None
        for attempt in range(retries + 1):
            try:
                self.sock = socket.create_connection(tuple(address), timeout=timeout)
                break
            except OSError as exc:
                last = exc
                if attempt < retries:
                    time.sleep(backoff * 2 ** attempt)
        else:
            raise ConnectionError(
                f"cannot reach server at {address[0]}:{address[1]} after {retries + 1} attempts: {last}")
        self._reader = self.sock.makefile("rb")
        self._send_lock = threading.Lock()
        self.bytes_sent = 0

    def send(self, msg):
        data = protocol.encode(msg)
        with self._send_lock:
            self.sock.sendall(data)
            self.bytes_sent += len(data)

    def recv(self):
        line = self._reader.readline()
        if not line:
            raise ConnectionError("server closed the connection")
        return protocol.decode(line)

    def request(self, msg):
        self.send(msg)
        return self.recv()

    def close(self):
        # shutdown first: it wakes a reader thread blocked in readline,
        # which otherwise holds the buffer lock that close() needs
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        try:
            self._reader.close()
            self.sock.close()
        except OSError:
            pass

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


@dataclass
class CaptureResult:
    sent: list = field(default_factory=list)
    results: list = field(default_factory=list)
    bytes_sent: int = 0


def run_capture_loop(src, cfg, on_result=None):
    """Replay ``src`` through the motion gate, sending one recognize request
    per completed burst; returns the requests sent and results received
    (results in arrival order)."""
    gate = MotionGate(cfg.motion_threshold, cfg.burst_size)
    out = CaptureResult()
    conn = Connection(cfg.server, cfg.retries, cfg.backoff, cfg.timeout)
    answered = set()
    done = threading.Condition()
    failure = []

    def reader():
        try:
            while True:
                msg = conn.recv()
                with done:
                    if isinstance(msg, protocol.MatchResult):
                        out.results.append(msg)
                        answered.add(msg.request_id)
                    elif isinstance(msg, protocol.ErrorReply):
                        failure.append(msg.message)
                    done.notify_all()
                if on_result is not None and isinstance(msg, protocol.MatchResult):
                    on_result(msg)
        except (ConnectionError, OSError, ValueError):
            with done:
                failure.append("connection closed")
                done.notify_all()

    listener = threading.Thread(target=reader, daemon=True)
    listener.start()
    try:
        for frame in src:
            burst = gate.push(frame)
            if burst is None:
                continue
            req = protocol.RecognizeRequest(f"{cfg.request_prefix}-{len(out.sent) + 1}",
                                            [encode_pgm(f) for f in burst])
            conn.send(req)
            out.sent.append(req)
        wanted = {r.request_id for r in out.sent}
        deadline = time.monotonic() + cfg.timeout
        with done:
            while not wanted <= answered and not failure:
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    raise TimeoutError(f"{len(wanted - answered)} request(s) unanswered")
                done.wait(remaining)
            if failure and not wanted <= answered:
                raise ConnectionError(f"recognition failed: {failure[0]}")
        out.bytes_sent = conn.bytes_sent
    finally:
        conn.close()
    return out


def register_user(image_path, user_id, server, retries=3, backoff=0.1, timeout=30.0):
    """Send one enrolment image; returns the server's Registered ack."""
    data = Path(image_path).read_bytes()
    decode_pgm(data, image_path)
    with Connection(server, retries, backoff, timeout) as conn:
        reply = conn.request(protocol.RegisterRequest(user_id, data))
    if isinstance(reply, protocol.ErrorReply):
        raise RegisterRejected(reply.message)
    return reply
