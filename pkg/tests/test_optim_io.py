import numpy as np
import pytest

from moe_route import autodiff as ad
from moe_route.autodiff import Tensor
from moe_route.optim import Adam
from moe_route.tensor_io import (MAGIC, VERSION, load_tensors, params_digest,
                                 save_tensors, tensor_bytes)


def test_zero_gradient_leaves_parameters_unchanged():
    p = Tensor(np.array([1.0, -2.0, 3.0]), name="p")
    opt = Adam({"p": p}, lr=0.1)
    before = p.data.copy()
    opt.step({"p": np.zeros(3)})
    assert np.array_equal(p.data, before)


def test_quadratic_converges():
    p = Tensor(np.array(1.0), name="p")
    opt = Adam({"p": p}, lr=0.1)
    for _ in range(200):
        opt.step({"p": p.data.copy()})  # d/dp of p^2/2
    assert abs(float(p.data)) < 1e-3


def test_step_counter_increments():
    p = Tensor(np.zeros(2), name="p")
    opt = Adam({"p": p})
    for _ in range(5):
        opt.step({"p": np.ones(2)})
    assert opt.step_count == 5
    opt.step({"p": np.ones(2)})
    assert opt.step_count == 6


def test_nonfinite_gradient_rejected_with_name():
    p = Tensor(np.zeros(2), name="p")
    opt = Adam({"p": p})
    with pytest.raises(ValueError, match="'p'"):
        opt.step({"p": np.array([1.0, np.nan])})


def test_shape_mismatch_rejected():
    p = Tensor(np.zeros(2), name="p")
    opt = Adam({"p": p})
    with pytest.raises(ValueError, match="p"):
        opt.step({"p": np.zeros(3)})


def test_sparse_updates_only_touch_named_parameters():
    a = Tensor(np.ones(2), name="a")
    b = Tensor(np.ones(2), name="b")
    opt = Adam({"a": a, "b": b}, lr=0.1)
    opt.step({"a": np.ones(2)})
    assert not np.array_equal(a.data, np.ones(2))
    assert np.array_equal(b.data, np.ones(2))


def test_checkpoint_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    named = {"w": rng.standard_normal((3, 4)), "b": rng.standard_normal(4),
             "scalar": np.array(2.5)}
    path = tmp_path / "ckpt.bin"
    save_tensors(path, named)
    loaded = load_tensors(path)
    assert set(loaded) == set(named)
    for k in named:
        assert np.array_equal(loaded[k], named[k])
        assert loaded[k].shape == named[k].shape


def test_checkpoint_rejects_bad_magic(tmp_path):
    path = tmp_path / "bad.bin"
    path.write_bytes(b"NOPE!" + b"\x00" * 16)
    with pytest.raises(ValueError, match="not a MOER1"):
        load_tensors(path)


def test_checkpoint_rejects_unknown_version(tmp_path):
    raw = bytearray(tensor_bytes({"x": np.zeros(2)}))
    raw[len(MAGIC)] = VERSION + 1
    path = tmp_path / "v2.bin"
    path.write_bytes(bytes(raw))
    with pytest.raises(ValueError, match="version"):
        load_tensors(path)


def test_checkpoint_rejects_truncation(tmp_path):
    raw = tensor_bytes({"x": np.arange(8.0)})
    path = tmp_path / "cut.bin"
    path.write_bytes(raw[:-4])
    with pytest.raises(ValueError, match="truncated"):
        load_tensors(path)


def test_params_digest_tracks_content():
    a = {"w": np.ones((2, 2))}
    b = {"w": np.ones((2, 2))}
    assert params_digest(a) == params_digest(b)
    b["w"] = b["w"].copy()
    b["w"][0, 0] = 2.0
    assert params_digest(a) != params_digest(b)
