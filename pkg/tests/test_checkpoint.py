import struct

import numpy as np
import pytest

from crisis_hmc import encoder as enc
from crisis_hmc.checkpoint import MAGIC, Checkpoint, dump_tensors, parse_tensors
from crisis_hmc.exceptions import ValidationError
from crisis_hmc.heads import init_head_params


def make_ckpt(ontology):
    cfg = enc.EncoderConfig(30, 1, 2, 8, 16, 6, 0.0)
    return Checkpoint(cfg.to_dict(), enc.init_params(cfg, 1), "lcpn", init_head_params("lcpn", 8, ontology), 7,
                      "dev_macro_f1_lower", 0.25, {"threshold": 0.5})


def test_layout_by_hand():
    data = dump_tensors({"a": 1}, {"w": np.array([[1.0, 2.0]], dtype=np.float32)})
    assert data[:5] == MAGIC
    (hlen,) = struct.unpack("<I", data[5:9])
    assert data[9 : 9 + hlen] == b'{"a":1}'
    rest = data[9 + hlen :]
    assert struct.unpack("<I", rest[:4]) == (1,) and rest[4:5] == b"w"
    assert struct.unpack("<3I", rest[5:17]) == (2, 1, 2)
    assert np.frombuffer(rest[17:], "<f4").tolist() == [1.0, 2.0]


def test_roundtrip(tmp_path, ontology):
    ck = make_ckpt(ontology)
    path = ck.save(tmp_path / "m.ckpt")
    back = Checkpoint.load(path)
    assert back.head_kind == "lcpn" and back.step == 7 and back.metric_value == 0.25
    assert back.encoder_config == ck.encoder_config and back.extra == {"threshold": 0.5}
    assert set(back.head_params) == set(ck.head_params)
    for k, v in ck.encoder_params.items():
        assert np.array_equal(back.encoder_params[k], v)
    assert back.to_bytes() == ck.to_bytes()


def test_head_tensors_prefixed(ontology):
    _, tensors = parse_tensors(make_ckpt(ontology).to_bytes())
    assert "head.child0_w" in tensors and "tok_emb" in tensors


def test_scalar_tensor_roundtrip():
    _, tensors = parse_tensors(dump_tensors({}, {"s": np.float32(3.5)}))
    assert tensors["s"].shape == () and float(tensors["s"]) == 3.5


def test_bad_magic_and_truncation(ontology):
    data = make_ckpt(ontology).to_bytes()
    with pytest.raises(ValidationError):
        Checkpoint.from_bytes(b"XXXXX" + data[5:])
    with pytest.raises(ValidationError):
        Checkpoint.from_bytes(data[:-3])
