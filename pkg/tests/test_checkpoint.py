import numpy as np
import pytest

from smap import autodiff as ad
from smap.autodiff import Tensor
from smap.checkpoint import MAGIC, load_into, load_params, save_params


def _params(dtype):
    rng = np.random.default_rng(0)
    return {
        "layer.w": Tensor(rng.standard_normal((3, 4)), dtype=dtype, requires_grad=True),
        "layer.b": Tensor(rng.standard_normal(4), dtype=dtype, requires_grad=True),
        "scalar": Tensor(rng.standard_normal(()), dtype=dtype, requires_grad=True),
    }


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_roundtrip_bit_exact(tmp_path, dtype):
    params = _params(dtype)
    path = tmp_path / "ck.smap"
    save_params(path, params)
    loaded = load_params(path)
    for name, t in params.items():
        assert loaded[name].dtype == t.data.dtype
        assert np.array_equal(loaded[name], t.data)
        assert loaded[name].tobytes() == t.data.tobytes()


def test_magic_prefix(tmp_path):
    path = tmp_path / "ck.smap"
    save_params(path, _params(np.float32))
    assert path.read_bytes()[:5] == MAGIC


def test_load_into_restores(tmp_path):
    params = _params(np.float32)
    path = tmp_path / "ck.smap"
    save_params(path, params)
    fresh = _params(np.float32)
    for t in fresh.values():
        t.data = np.zeros_like(t.data)
    load_into(path, fresh)
    for name in params:
        assert np.array_equal(fresh[name].data, params[name].data)


def test_bad_magic_rejected(tmp_path):
    path = tmp_path / "junk.smap"
    path.write_bytes(b"NOPE!" + b"\x00" * 16)
    with pytest.raises(ValueError, match="magic"):
        load_params(path)


def test_name_mismatch_rejected(tmp_path):
    params = _params(np.float32)
    path = tmp_path / "ck.smap"
    save_params(path, params)
    wrong = {"other": Tensor(np.zeros(3))}
    with pytest.raises(ValueError, match="mismatch"):
        load_into(path, wrong)
