import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from posebridge import checkpoint, config
from posebridge.errors import CheckpointError, ConfigError

# --- checkpoint container -----------------------------------------------------------------


def test_layout_of_a_single_tensor():
    data = checkpoint.encode({"ab": np.array([[1.0, 2.0]], dtype=np.float32)})
    expected = (b"PBCK" + struct.pack("<II", 1, 1) + struct.pack("<H", 2) + b"ab" + bytes([0, 2])
                + struct.pack("<II", 1, 2) + struct.pack("<2f", 1.0, 2.0))
    assert data == expected


def test_scalar_tensor_has_rank_zero():
    data = checkpoint.encode({"s": np.array(3.5)})
    assert data[14:17] == b"s" + bytes([1, 0])
    assert checkpoint.decode(data)["s"].shape == ()


names = st.text(st.characters(min_codepoint=33, max_codepoint=0x2FFF), min_size=1, max_size=12)
arrays = hnp.arrays(st.sampled_from([np.float32, np.float64]), hnp.array_shapes(min_dims=0, max_dims=3, max_side=4),
                    elements=st.floats(-1e6, 1e6, width=32))


@given(st.dictionaries(names, arrays, max_size=5))
def test_round_trip_is_byte_identical(entries):
    data = checkpoint.encode(entries)
    back = checkpoint.decode(data)
    assert list(back) == list(entries)
    for k, v in entries.items():
        assert back[k].dtype == v.dtype and back[k].shape == v.shape
        assert back[k].tobytes() == np.ascontiguousarray(v).tobytes()
    assert checkpoint.encode(back) == data


def test_save_load_file(tmp_path):
    arrs = {"a/b": np.arange(6.0).reshape(2, 3), "c": np.float32([1, 2])}
    path = tmp_path / "deep" / "x.pbck"
    checkpoint.save(path, arrs)
    first = path.read_bytes()
    checkpoint.save(path, checkpoint.load(path))
    assert path.read_bytes() == first


def test_wrong_magic_is_rejected():
    data = b"NOPE" + checkpoint.encode({"a": np.ones(2)})[4:]
    with pytest.raises(CheckpointError, match="magic"):
        checkpoint.decode(data)


def test_wrong_version_is_rejected():
    data = bytearray(checkpoint.encode({"a": np.ones(2)}))
    data[4:8] = struct.pack("<I", 9)
    with pytest.raises(CheckpointError, match="version"):
        checkpoint.decode(bytes(data))


def test_truncation_and_trailing_bytes_are_rejected():
    data = checkpoint.encode({"a": np.ones(4)})
    with pytest.raises(CheckpointError):
        checkpoint.decode(data[:-3])
    with pytest.raises(CheckpointError):
        checkpoint.decode(data + b"\0")


def test_duplicate_names_are_rejected():
    one = checkpoint.encode({"a": np.ones(1)})
    body = one[12:]
    data = b"PBCK" + struct.pack("<II", 1, 2) + body + body
    with pytest.raises(CheckpointError, match="duplicate"):
        checkpoint.decode(data)


def test_unknown_dtype_code():
    data = bytearray(checkpoint.encode({"a": np.ones(1)}))
    data[15] = 7
    with pytest.raises(CheckpointError, match="dtype"):
        checkpoint.decode(bytes(data))


def test_missing_file_is_an_os_error(tmp_path):
    with pytest.raises(OSError):
        checkpoint.load(tmp_path / "absent.pbck")


# --- config -------------------------------------------------------------------------------


def test_defaults_cover_every_section():
    sections = {k.split(".")[0] for k in config.keys()}
    assert {"synth", "hpe", "model", "bridge", "loss", "train", "proto", "eval", "run"} <= sections


def test_parse_values_and_comments():
    cfg = config.parse("# comment\ntrain.lr = 0.01  # inline\nproto.pa = off\n\nbridge.heads = 2\n")
    assert cfg["train.lr"] == 0.01 and cfg["proto.pa"] is False and cfg["bridge.heads"] == 2
    assert cfg["proto.rho"] == config.DEFAULTS["proto.rho"]


def test_unknown_key_is_named():
    with pytest.raises(ConfigError, match="train.lrr"):
        config.parse("train.lrr = 0.1\n")
    with pytest.raises(ConfigError, match="nope"):
        config.Config()["nope"]


@pytest.mark.parametrize("text", ["train.epochs = 2.5", "proto.pa = maybe", "hpe.mode = magic",
                                  "train.lr = fast", "train.lr 0.1", "train.lr = 1\ntrain.lr = 2"])
def test_invalid_documents_raise(text):
    with pytest.raises(ConfigError):
        config.parse(text)


def test_dumps_round_trips():
    cfg = config.Config().override({"eval.kappa_grid": (0.0, 0.5), "train.epochs": 3, "hpe.bp": False})
    assert config.parse(cfg.dumps()).values == cfg.values


def test_load_none_gives_defaults(tmp_path):
    assert config.load(None).values == config.DEFAULTS
    p = tmp_path / "c.cfg"
    p.write_text("run.seed = 4\n", encoding="utf-8")
    assert config.load(p)["run.seed"] == 4


def test_section_strips_prefix():
    sec = config.Config().section("proto")
    assert sec["rho"] == 0.2 and sec["k"] == 5
