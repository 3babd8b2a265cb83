import struct

import numpy as np
import pytest
import torch

from incdet.checkpoint import (
    CheckpointError,
    checkpoint_bytes,
    checkpoint_from_bytes,
    load_checkpoint,
    params_digest,
    save_checkpoint,
)
from incdet.detector import Detector, DetectorConfig, detect

from micro import MICRO


@pytest.fixture
def det():
    return Detector(DetectorConfig((0, 3), seed=5))


def test_bytes_round_trip(det, tmp_path):
    blob = checkpoint_bytes(det, {"step": 1})
    again, extra = checkpoint_from_bytes(blob)
    assert extra == {"step": 1}
    assert checkpoint_bytes(again, {"step": 1}) == blob
    assert params_digest(again) == params_digest(det)
    save_checkpoint(det, tmp_path / "sub" / "m.ckpt")
    assert checkpoint_bytes(load_checkpoint(tmp_path / "sub" / "m.ckpt")) == checkpoint_bytes(det)


def test_float64_round_trip():
    det = Detector(DetectorConfig((1,), seed=2, **MICRO))
    again, _ = checkpoint_from_bytes(checkpoint_bytes(det))
    assert again.config.dtype == "float64"
    assert torch.equal(again.flat_params(), det.flat_params())


def test_detections_survive_round_trip(det, toy_data):
    img = toy_data["test"].load_image(toy_data["test"].images[0])
    again, _ = checkpoint_from_bytes(checkpoint_bytes(det))
    assert detect(img, det, 0.01) == detect(img, again, 0.01)


def test_corruption_is_reported(det, tmp_path):
    blob = checkpoint_bytes(det)
    with pytest.raises(CheckpointError, match="magic"):
        checkpoint_from_bytes(b"NOTACKPT" + blob[8:])
    with pytest.raises(CheckpointError, match="parameter block"):
        checkpoint_from_bytes(blob[:-4])
    with pytest.raises(CheckpointError, match="version"):
        checkpoint_from_bytes(blob[:8] + struct.pack("<I", 99) + blob[12:])
    with pytest.raises(CheckpointError, match="header"):
        checkpoint_from_bytes(blob[:16] + b"X" + blob[17:])
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "missing.ckpt")


def test_digest_tracks_parameters(det):
    d0 = params_digest(det)
    theta = det.flat_params()
    theta[0] += 1.0
    det.set_flat_params(theta)
    assert params_digest(det) != d0
    assert len(d0) == 64 and all(c in "0123456789abcdef" for c in d0)


def test_little_endian_payload(det):
    blob = checkpoint_bytes(det)
    (n_header,) = struct.unpack("<I", blob[12:16])
    body = np.frombuffer(blob[16 + n_header :], dtype="<f4")
    assert np.array_equal(body, det.flat_params().numpy())
