import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from icdlab.checkpoint import load_params, save_params
from icdlab.errors import ParseError, ValidationError


def test_round_trip_is_byte_exact(tmp_path):
    rng = np.random.default_rng(0)
    params = {
        "emb": rng.normal(size=(5, 3)),
        "w": rng.normal(size=(3, 2)),
        "b": rng.normal(size=2),
        "scalar": np.asarray(3.5),
    }
    p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    save_params(p1, params)
    loaded = load_params(p1)
    assert list(loaded) == list(params)  # header preserves order
    for k in params:
        assert loaded[k].shape == np.asarray(params[k]).shape
        assert loaded[k].tobytes() == np.asarray(params[k], dtype="<f8").tobytes()
    save_params(p2, loaded)
    assert p1.read_bytes() == p2.read_bytes()


def test_header_is_readable_text(tmp_path):
    path = tmp_path / "m.ckpt"
    save_params(path, {"layer/w": np.zeros((2, 4))})
    head = path.read_bytes().split(b"END")[0].decode("ascii")
    assert "layer/w 2 4" in head


def test_negative_zero_and_specials_preserved(tmp_path):
    path = tmp_path / "m.ckpt"
    vals = np.array([-0.0, 1e-308, np.pi, 1e308])
    save_params(path, {"v": vals})
    back = load_params(path)["v"]
    assert back.tobytes() == vals.tobytes()
    assert np.signbit(back[0])


def test_truncated_file_rejected(tmp_path):
    path = tmp_path / "m.ckpt"
    save_params(path, {"v": np.arange(4.0)})
    path.write_bytes(path.read_bytes()[:-8])
    with pytest.raises(ParseError):
        load_params(path)


def test_trailing_garbage_rejected(tmp_path):
    path = tmp_path / "m.ckpt"
    save_params(path, {"v": np.arange(4.0)})
    path.write_bytes(path.read_bytes() + b"xx")
    with pytest.raises(ParseError):
        load_params(path)


def test_bad_parameter_name_rejected(tmp_path):
    with pytest.raises(ValidationError):
        save_params(tmp_path / "m.ckpt", {"has space": np.zeros(1)})


def test_missing_magic_rejected(tmp_path):
    path = tmp_path / "m.ckpt"
    path.write_bytes(b"w 2\nEND\n" + b"\x00" * 16)
    with pytest.raises(ParseError):
        load_params(path)


@given(st.integers(0, 2**32 - 1), st.integers(1, 4))
@settings(max_examples=25, deadline=None)
def test_round_trip_random_shapes(tmp_path_factory, seed, nparams):
    rng = np.random.default_rng(seed)
    params = {}
    for i in range(nparams):
        ndim = int(rng.integers(0, 3))
        shape = tuple(int(rng.integers(1, 5)) for _ in range(ndim))
        params[f"p{i}"] = rng.normal(size=shape)
    path = tmp_path_factory.mktemp("ck") / "m.ckpt"
    save_params(path, params)
    loaded = load_params(path)
    for k, v in params.items():
        assert loaded[k].tobytes() == v.tobytes()
        assert loaded[k].shape == v.shape
