import json
import struct

import numpy as np
import pytest

from oracles import central_difference, conv_chain_shapes, relative_error, siamese_param_count
from siamface import FaceImage, forward_once, forward_pair, load_checkpoint, new_siamese, save_checkpoint
from siamface.errors import CheckpointFormatError, DimensionError, UnsupportedVersionError
from siamface.training import load_orl


@pytest.fixture(scope="module")
def net():
    return new_siamese(3)


def _image(rng):
    return FaceImage(rng.random((100, 100), dtype=np.float32))


def test_parameter_count_matches_oracle(net):
    assert net.parameter_count() == siamese_param_count() == 40_254_465


def test_shape_chain(net):
    trace = []
    net.forward(np.zeros((1, 1, 100, 100), np.float32), trace=trace)
    spatial = conv_chain_shapes(100, 100, 3)
    expected = [(1, 100, 100)] + [(c, *hw) for c, hw in zip([4, 8, 8], spatial)]
    expected += [(80000,), (500,), (500,), (5,)]
    assert trace == expected


def test_bn_running_stats_at_init(net):
    for layer in net.conv_stack:
        state = getattr(layer, "state", None)
        if state is not None:
            np.testing.assert_array_equal(state.running_mean, 0)
            np.testing.assert_array_equal(state.running_var, 1)


def test_seed_determinism():
    a, b = new_siamese(42), new_siamese(42)
    for pa, pb in zip(a.parameters(), b.parameters()):
        assert pa.name == pb.name
        np.testing.assert_array_equal(pa.value, pb.value)


def test_forward_once_deterministic_and_pure(net, rng):
    img = _image(rng)
    before = net.snapshot()
    e1, e2 = forward_once(net, img), forward_once(net, img)
    assert e1.shape == (5,)
    np.testing.assert_array_equal(e1, e2)
    for name, value in net.snapshot().items():
        np.testing.assert_array_equal(value, before[name])


def test_forward_pair_shared_weights(net, rng):
    a, b = _image(rng), _image(rng)
    ea, eb = forward_pair(net, a, a)
    np.testing.assert_array_equal(ea, eb)
    ea, eb = forward_pair(net, a, b)
    ba, bb = forward_pair(net, b, a)
    assert np.linalg.norm(ea - eb) == pytest.approx(np.linalg.norm(ba - bb), rel=1e-6)
    np.testing.assert_allclose(ea, forward_once(net, a), rtol=1e-5, atol=1e-6)
    np.testing.assert_allclose(eb, forward_once(net, b), rtol=1e-5, atol=1e-6)


@pytest.mark.parametrize("fill", ["zeros", "ones", "random"])
def test_embeddings_finite(net, rng, fill):
    x = {"zeros": np.zeros, "ones": np.ones}.get(fill, lambda s: rng.random(s))((2, 1, 100, 100))
    assert np.isfinite(net.forward(x)).all()


def test_train_mode_pair_is_finite(net, rng):
    work = new_siamese(3)
    ea, eb = forward_pair(work, _image(rng), _image(rng), mode="train")
    assert np.isfinite(ea).all() and np.isfinite(eb).all()


def test_rejects_wrong_resolution(net):
    with pytest.raises(DimensionError):
        net.forward(np.zeros((1, 1, 92, 112), np.float32))
    with pytest.raises(ValueError):
        FaceImage(np.zeros((112, 92), np.float32))


def test_checkpoint_round_trip(tmp_path, net):
    net.conv_stack[3].state.running_mean[:] = [0.1, 0.2, 0.3, 0.4]
    path = tmp_path / "m.ckpt"
    save_checkpoint(net, path)
    assert path.read_bytes()[:8] == b"SIAMNET1"
    loaded = load_checkpoint(path)
    for pa, pb in zip(net.parameters(), loaded.parameters()):
        assert pa.name == pb.name
        assert pa.value.tobytes() == pb.value.tobytes()
    net.conv_stack[3].state.running_mean[:] = 0


def test_checkpoint_truncated(tmp_path, net):
    path = tmp_path / "m.ckpt"
    save_checkpoint(net, path)
    data = path.read_bytes()
    path.write_bytes(data[: len(data) // 2])
    with pytest.raises(CheckpointFormatError):
        load_checkpoint(path)


def _rewrite_header(path, edit):
    data = path.read_bytes()
    (hlen,) = struct.unpack("<Q", data[8:16])
    header = json.loads(data[16:16 + hlen])
    edit(header)
    raw = json.dumps(header).encode()
    path.write_bytes(data[:8] + struct.pack("<Q", len(raw)) + raw + data[16 + hlen:])


def test_checkpoint_version_99(tmp_path, net):
    path = tmp_path / "m.ckpt"
    save_checkpoint(net, path)
    _rewrite_header(path, lambda h: h.update(version=99))
    with pytest.raises(UnsupportedVersionError) as info:
        load_checkpoint(path)
    assert info.value.field == "version"


def test_checkpoint_bad_magic_and_shape(tmp_path, net):
    path = tmp_path / "m.ckpt"
    path.write_bytes(b"NOTAMODEL" + bytes(20))
    with pytest.raises(CheckpointFormatError):
        load_checkpoint(path)
    save_checkpoint(net, path)
    _rewrite_header(path, lambda h: h["tensors"][0].update(shape=[4, 1, 5, 5]))
    with pytest.raises(CheckpointFormatError) as info:
        load_checkpoint(path)
    assert info.value.field == "conv1.weight"


def test_end_to_end_gradients(small_tree):
    """loss = sum of embeddings over four subjects; fc3 and conv1 weight
    gradients against central differences.

    A conv1 weight touches every activation of its channel, so a step of
    1e-3 flips many ReLUs; the step here is small enough to stay on one
    linear piece (float64 keeps the difference quotient accurate)."""
    ds = load_orl(small_tree, max_subjects=4)
    x = np.stack([imgs[0].pixels for imgs in ds.subjects.values()])[:, None].astype(np.float64)
    net = new_siamese(5).astype(np.float64)
    out = net.forward(x, training=True)
    net.backward(np.ones_like(out))
    params = {p.name: p for p in net.parameters()}
    rng = np.random.default_rng(0)

    def loss(_w):
        return float(net.forward(x, training=True).sum())

    for name in ("fc3.weight", "conv1.weight"):
        p = params[name]
        analytic = p.grad.copy()
        for _ in range(10):
            pos = tuple(int(rng.integers(s)) for s in p.value.shape)
            numeric = central_difference(loss, [p.value], (0, *pos), h=1e-6)
            assert relative_error(float(analytic[pos]), numeric) < 1e-2, (name, pos)
