import json
import struct

import numpy as np
import pytest
import torch

from sigstyle.backbone import ToyBackbone
from sigstyle.checkpoint import (
    FORMAT_VERSION,
    MAGIC,
    PROMPT_TEMPLATES,
    StyleCheckpoint,
    identity_checkpoint,
    load_checkpoint,
    save_checkpoint,
)
from sigstyle.errors import (
    CheckpointParseError,
    ConfigurationError,
    DimensionError,
    IncompatibleCheckpointError,
)


@pytest.fixture
def ckpt(toy):
    c = identity_checkpoint(toy, seed=3)
    rng = np.random.default_rng(0)
    c.predictor_state = {k: rng.standard_normal(v.shape).astype(np.float32) for k, v in c.predictor_state.items()}
    return c


class TestRoundTrip:
    def test_bitwise(self, ckpt, tmp_path):
        path = tmp_path / "s.sigstyle"
        save_checkpoint(ckpt, path)
        back = load_checkpoint(path)
        assert back.same_content(ckpt, ignore=())
        assert back.created_at == ckpt.created_at

    def test_same_bytes_for_same_content(self, ckpt, tmp_path):
        save_checkpoint(ckpt, tmp_path / "a.sigstyle")
        save_checkpoint(ckpt, tmp_path / "b.sigstyle")
        assert (tmp_path / "a.sigstyle").read_bytes() == (tmp_path / "b.sigstyle").read_bytes()

    def test_direct_deltas_persist(self, ckpt, tmp_path):
        ckpt.direct_deltas = {ckpt.targets[0].key: np.ones(ckpt.targets[0].shape, np.float32)}
        save_checkpoint(ckpt, tmp_path / "d.sigstyle")
        back = load_checkpoint(tmp_path / "d.sigstyle")
        np.testing.assert_array_equal(back.direct_deltas[ckpt.targets[0].key], 1.0)

    def test_predictor_rebuild(self, ckpt, toy):
        pred = ckpt.predictor()
        a = ckpt.targets[0]
        gate = ckpt.predictor_state[f"{a.key}/gate"]
        assert float(pred.group(a).gate.detach()) == float(gate)

    def test_source_date_epoch(self, toy, monkeypatch):
        monkeypatch.setenv("SOURCE_DATE_EPOCH", "0")
        assert identity_checkpoint(toy).created_at == "1970-01-01T00:00:00+00:00"


class TestCorruption:
    def test_bad_magic(self, tmp_path):
        p = tmp_path / "x.sigstyle"
        p.write_bytes(b"NOTSTYLE" + b"\0" * 16)
        with pytest.raises(CheckpointParseError):
            load_checkpoint(p)

    def test_truncated(self, ckpt, tmp_path):
        p = tmp_path / "t.sigstyle"
        save_checkpoint(ckpt, p)
        p.write_bytes(p.read_bytes()[:-7])
        with pytest.raises(CheckpointParseError):
            load_checkpoint(p)

    def test_flipped_data_byte(self, ckpt, tmp_path):
        p = tmp_path / "f.sigstyle"
        save_checkpoint(ckpt, p)
        blob = bytearray(p.read_bytes())
        blob[-3] ^= 0xFF
        p.write_bytes(bytes(blob))
        with pytest.raises(CheckpointParseError):
            load_checkpoint(p)

    def test_future_version(self, ckpt, tmp_path):
        p = tmp_path / "v.sigstyle"
        save_checkpoint(ckpt, p)
        blob = p.read_bytes()
        (hlen,) = struct.unpack("<Q", blob[8:16])
        header = json.loads(blob[16 : 16 + hlen])
        header["version"] = FORMAT_VERSION + 1
        hb = json.dumps(header).encode()
        p.write_bytes(MAGIC + struct.pack("<Q", len(hb)) + hb + blob[16 + hlen :])
        with pytest.raises(IncompatibleCheckpointError):
            load_checkpoint(p)


class TestCompatibility:
    def test_width_mismatch(self, ckpt):
        ckpt.token_embedding = np.zeros(7, np.float32)
        with pytest.raises(DimensionError):
            ckpt.check_compatible(ToyBackbone(0))
        with pytest.raises(DimensionError):
            ckpt.token(ToyBackbone(0))

    def test_other_base_model_warns(self, ckpt):
        with pytest.warns(UserWarning, match="trained on"):
            ckpt.check_compatible(ToyBackbone(1))

    def test_rejects_bad_mode_and_encoder_targets(self, toy):
        c = identity_checkpoint(toy)
        with pytest.raises(ConfigurationError):
            StyleCheckpoint(c.token_embedding, c.predictor_state, c.targets, c.base_model_id, mode="sketch")
        with pytest.raises(ConfigurationError):
            StyleCheckpoint(c.token_embedding, {}, [toy.address("encoder.0.self.query")], c.base_model_id)

    def test_appearance_template(self, toy):
        c = identity_checkpoint(toy, mode="appearance")
        assert c.prompt_template == "a photo in the appearance of *"
        assert PROMPT_TEMPLATES["style"] == "a photo in the style of *"

    def test_token_is_model_dtype(self, ckpt, toy):
        assert ckpt.token(toy).dtype == torch.float64
