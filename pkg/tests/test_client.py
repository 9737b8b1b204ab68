import socket

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from siamface import FaceDb, IdentityRecord
from siamface.client import (ClientConfig, FrameSource, MotionGate, motion_score, register_user,
                             run_capture_loop)
from siamface.errors import RegisterRejected
from siamface.pgm import write_pgm
from siamface.service import RecognitionPipeline, ServerThread, SyntheticEmbedder


def _scene(seed, shape=(64, 64)):
    return np.random.default_rng(seed).random(shape).astype(np.float32)


def scene_change_stream(changes, gap, n_before=3, shape=(64, 64)):
    """Static frames with ``changes`` abrupt scene cuts ``gap`` frames apart."""
    frames = [_scene(0, shape)] * n_before
    for c in range(1, changes + 1):
        frames += [_scene(c, shape)] * gap
    return frames


# -- motion score -----------------------------------------------------------

def test_motion_score_examples():
    black = np.zeros((10, 10), np.float32)
    white = np.ones((10, 10), np.float32)
    assert motion_score(black, black) == 0.0
    assert motion_score(black, white) == 1.0
    half = black.copy()
    half[:, :5] = 1.0
    assert motion_score(black, half) == 0.5


def test_motion_score_uint8_frames():
    assert motion_score(np.zeros((4, 4), np.uint8), np.full((4, 4), 255, np.uint8)) == 1.0


@settings(max_examples=50)
@given(st.integers(0, 2**31 - 1))
def test_motion_score_symmetric(seed):
    r = np.random.default_rng(seed)
    a, b = r.random((8, 9)), r.random((8, 9))
    assert motion_score(a, b) == motion_score(b, a)


# -- gate -------------------------------------------------------------------

def _bursts(frames, n=5, threshold=0.02):
    gate = MotionGate(threshold, n)
    return [b for b in (gate.push(f) for f in frames) if b is not None]


def test_static_stream_sends_nothing():
    assert _bursts([_scene(0)] * 100) == []


def test_one_scene_change():
    frames = scene_change_stream(1, gap=20)
    bursts = _bursts(frames)
    assert len(bursts) == 1 and len(bursts[0]) == 5
    # the burst is the frames after the trigger
    assert all(f is frames[3] for f in bursts[0])


def test_two_separated_scene_changes():
    bursts = _bursts(scene_change_stream(2, gap=12))
    assert len(bursts) == 2 and all(len(b) == 5 for b in bursts)


def test_trigger_inside_burst_is_ignored():
    frames = scene_change_stream(2, gap=2) + [_scene(2)] * 10
    bursts = _bursts(frames, n=5)
    assert len(bursts) == 1


def test_incomplete_burst_dropped():
    frames = [_scene(0)] * 3 + [_scene(1)] * 3
    assert _bursts(frames, n=5) == []


@settings(max_examples=30)
@given(st.lists(st.integers(0, 3), min_size=0, max_size=60), st.integers(1, 6))
def test_every_burst_has_n_frames(seq, n):
    frames = [_scene(s, (8, 8)) for s in seq]
    assert all(len(b) == n for b in _bursts(frames, n=n))


def test_frame_source_from_directory(tmp_path):
    for name, value in [("b.pgm", 128), ("a.pgm", 0), ("c.pgm", 255)]:
        write_pgm(tmp_path / name, np.full((40, 40), value, np.uint8))
    src = FrameSource.from_directory(tmp_path)
    assert [round(float(f[0, 0]) * 255) for f in src] == [0, 128, 255]


# -- against a server -------------------------------------------------------

@pytest.fixture
def server():
    pipe = RecognitionPipeline(SyntheticEmbedder(0), FaceDb([IdentityRecord(1, np.zeros(5))]))
    with ServerThread(pipe) as srv:
        yield srv


def test_capture_loop_static_source_sends_zero_bytes(server):
    out = run_capture_loop(FrameSource([_scene(0)] * 50), ClientConfig(server=server.address))
    assert out.sent == [] and out.bytes_sent == 0


def test_capture_loop_two_bursts(server):
    cfg = ClientConfig(server=server.address, burst_size=5, request_prefix="cam")
    seen = []
    out = run_capture_loop(FrameSource(scene_change_stream(2, gap=12)), cfg, on_result=seen.append)
    assert [r.request_id for r in out.sent] == ["cam-1", "cam-2"]
    assert all(len(r.frames) == 5 for r in out.sent)
    assert sorted(r.request_id for r in out.results) == ["cam-1", "cam-2"]
    assert len(seen) == 2 and out.bytes_sent > 0


def test_request_ids_unique_across_session(server):
    cfg = ClientConfig(server=server.address, burst_size=2)
    out = run_capture_loop(FrameSource(scene_change_stream(6, gap=4)), cfg)
    ids = [r.request_id for r in out.sent]
    assert len(ids) == 6 and len(set(ids)) == 6


def test_register_user(server, small_tree):
    ack = register_user(sorted((small_tree / "s1").glob("*.pgm"))[0], 7, server.address)
    assert ack.user_id == 7 and len(ack.vector) == 5


def test_register_uniform_image_relayed(server, tmp_path):
    path = tmp_path / "flat.pgm"
    write_pgm(path, np.full((112, 92), 0.4))
    with pytest.raises(RegisterRejected, match="no face"):
        register_user(path, 7, server.address)


def test_unreachable_server():
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        port = s.getsockname()[1]
    with pytest.raises(ConnectionError, match="after 3 attempts"):
        run_capture_loop(FrameSource([_scene(0)]), ClientConfig(server=("127.0.0.1", port),
                                                                retries=2, backoff=0.01))
