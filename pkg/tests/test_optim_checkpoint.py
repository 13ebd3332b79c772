import os
import struct
import tempfile

import numpy as np
import pytest

from gaflow import checkpoint
from gaflow.errors import ContractError, FormatError
from gaflow.optim import Adam
from gaflow.tensor import Tape, Tensor, backward, square, tsum


@pytest.fixture
def setup_tmpdir():
    with tempfile.TemporaryDirectory() as tmpdirname:
        yield tmpdirname


def test_adam_first_step_is_lr_sized():
    p = Tensor(np.array([1.0, -1.0]), requires_grad=True, dtype=np.float64)
    opt = Adam(dict(p=p), lr=0.1)
    opt.zero_grad()
    with Tape():
        backward(tsum(p * np.array([3.0, -0.5])))
    opt.step()
    # bias-corrected first step moves every entry by lr * sign(g)
    assert np.allclose(p.data, [0.9, -0.9], atol=1e-6)
    assert opt.t == 1


def test_adam_zero_gradient_leaves_parameters():
    p = Tensor(np.array([0.5, -2.0, 3.0]), requires_grad=True, dtype=np.float64)
    before = p.data.copy()
    opt = Adam(dict(p=p), lr=0.1)
    opt.zero_grad()
    opt.step()
    assert np.array_equal(p.data, before)
    assert opt.t == 1


def test_adam_minimises_quadratic():
    p = Tensor(np.array([2.0, -3.0]), requires_grad=True, dtype=np.float64)
    opt = Adam(dict(p=p), lr=0.05)
    for _ in range(400):
        opt.zero_grad()
        with Tape() as tape:
            backward(tsum(square(p)))
            tape.clear()
        opt.step()
    assert np.all(np.abs(p.data) < 0.1)


def test_adam_requires_gradients():
    p = Tensor(np.zeros(2), requires_grad=True)
    with pytest.raises(ContractError):
        Adam(dict(p=p)).step()


def test_adam_state_roundtrip():
    p = Tensor(np.ones(3), requires_grad=True)
    opt = Adam(dict(p=p))
    p.grad = np.full(3, 0.5, dtype=np.float32)
    opt.step()
    other = Adam(dict(p=Tensor(np.ones(3), requires_grad=True)))
    other.load_state_dict(opt.state_dict())
    assert other.t == 1
    assert np.allclose(other.m1["p"], opt.m1["p"])


def test_checkpoint_file(setup_tmpdir):
    path = os.path.join(setup_tmpdir, "sub", "model.zflw")
    tensors = {"a.weight": np.arange(6, dtype=np.float32).reshape(2, 3), "adam.step": np.asarray(4.0)}
    checkpoint.save_checkpoint(path, tensors)
    with open(path, "rb") as fp:
        assert fp.read(4) == b"ZFLW"
    loaded = checkpoint.load_checkpoint(path)
    assert list(loaded) == list(tensors)
    assert np.array_equal(loaded["a.weight"], tensors["a.weight"])
    assert loaded["adam.step"].shape == ()


def test_checkpoint_bad_magic():
    with pytest.raises(FormatError) as e:
        checkpoint.decode_checkpoint(b"NOPE" + struct.pack("<II", 1, 0))
    assert e.value.offset == 0


def test_checkpoint_truncated():
    buffer = checkpoint.encode_checkpoint({"w": np.ones((4, 4), dtype=np.float32)})
    with pytest.raises(FormatError) as e:
        checkpoint.decode_checkpoint(buffer[:-3])
    assert "truncated" in str(e.value)


def test_checkpoint_trailing_bytes():
    buffer = checkpoint.encode_checkpoint({"w": np.ones(2, dtype=np.float32)})
    with pytest.raises(FormatError):
        checkpoint.decode_checkpoint(buffer + b"\0")
