import numpy as np
import pytest

from pointinst3d.autodiff import Tensor
from pointinst3d.checkpoint import CheckpointError, load_checkpoint, save_checkpoint


def test_round_trip_bit_identical(tmp_path):
    rng = np.random.default_rng(0)
    params = {
        "enc.w": Tensor(rng.normal(size=(4, 7))),
        "enc.b": Tensor(rng.normal(size=(7,))),
        "scalar": Tensor(rng.normal()),
        "cube": Tensor(rng.normal(size=(2, 3, 4))),
    }
    first = tmp_path / "a.bin"
    second = tmp_path / "b.bin"
    save_checkpoint(first, params)
    loaded = load_checkpoint(first)
    save_checkpoint(second, loaded)
    assert first.read_bytes() == second.read_bytes()
    for name in params:
        assert loaded[name].values.tobytes() == params[name].values.tobytes()
        assert loaded[name].shape == params[name].shape


def test_loaded_params_require_grad_by_default(tmp_path):
    path = tmp_path / "p.bin"
    save_checkpoint(path, {"w": Tensor([1.0, 2.0])})
    assert load_checkpoint(path)["w"].requires_grad
    assert not load_checkpoint(path, requires_grad=False)["w"].requires_grad


def test_bad_magic_rejected(tmp_path):
    path = tmp_path / "junk.bin"
    path.write_bytes(b"NOTMAGIC" + b"\x00" * 16)
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(path)


def test_trailing_bytes_rejected(tmp_path):
    path = tmp_path / "p.bin"
    save_checkpoint(path, {"w": Tensor([1.0])})
    path.write_bytes(path.read_bytes() + b"x")
    with pytest.raises(CheckpointError, match="trailing"):
        load_checkpoint(path)
