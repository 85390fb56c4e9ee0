import numpy as np
import pytest

from htlprune import checkpoint, pruning
from htlprune.checkpoint import CheckpointError
from htlprune.unet import ArchConfig, build_classifier, build_unet


@pytest.fixture
def model():
    return build_unet(ArchConfig(depth=1, base_channels=3, input_size=8), seed=11)


def test_round_trip_is_bit_exact(tmp_path, model):
    checkpoint.save_checkpoint(model, tmp_path / "ck", meta={"seed": 11})
    back, mask, meta = checkpoint.load_checkpoint(tmp_path / "ck")
    assert mask is None and meta == {"seed": "11"}
    assert back.config == model.config
    for k in model.params:
        assert back.params[k].data.tobytes() == model.params[k].data.tobytes()


def test_mask_section_round_trip(tmp_path, model):
    mask = pruning.make_mask(model, "random", 0.37, seed=5)
    checkpoint.save_checkpoint(model, tmp_path / "ck", mask=mask)
    _, back, _ = checkpoint.load_checkpoint(tmp_path / "ck")
    assert (back.method, back.ratio, back.seed) == ("random", 0.37, 5)
    for k in mask.masks:
        np.testing.assert_array_equal(mask.masks[k], back.masks[k])


def test_saves_dense_weights_while_masked(tmp_path, model):
    dense = model.state_dict()
    mask = pruning.make_mask(model, "unstructured-magnitude", 0.8)
    with pruning.masked(model, mask):
        checkpoint.save_checkpoint(model, tmp_path / "ck", mask=mask)
    back, _, _ = checkpoint.load_checkpoint(tmp_path / "ck")
    for k in dense:
        np.testing.assert_array_equal(back.params[k].data, dense[k])


def test_manifest_layout(tmp_path, model):
    checkpoint.save_checkpoint(model, tmp_path / "ck")
    man = checkpoint.read_manifest(tmp_path / "ck")
    assert man["version"] == "1" and man["dtype"] == "<f8"
    blob = (tmp_path / "ck" / "weights.bin").read_bytes()
    entry = man["param.head.weight"]
    parts = dict(p.split("=") for p in entry.split())
    off, nbytes = int(parts["offset"]), int(parts["nbytes"])
    arr = np.frombuffer(blob[off:off + nbytes], dtype="<f8").reshape(model.params["head.weight"].data.shape)
    np.testing.assert_array_equal(arr, model.params["head.weight"].data)


def test_classifier_round_trip(tmp_path):
    m = build_classifier(ArchConfig(depth=1, base_channels=2, input_size=8, num_cls_classes=3), seed=1)
    checkpoint.save_checkpoint(m, tmp_path / "ck")
    back, _, _ = checkpoint.load_checkpoint(tmp_path / "ck")
    assert back.kind == "classification" and back.config.num_cls_classes == 3


def test_corrupted_blob_detected(tmp_path, model):
    checkpoint.save_checkpoint(model, tmp_path / "ck")
    blob = bytearray((tmp_path / "ck" / "weights.bin").read_bytes())
    blob[3] ^= 0xFF
    (tmp_path / "ck" / "weights.bin").write_bytes(bytes(blob))
    with pytest.raises(CheckpointError, match="checksum"):
        checkpoint.load_checkpoint(tmp_path / "ck")


def test_missing_version_rejected(tmp_path, model):
    checkpoint.save_checkpoint(model, tmp_path / "ck")
    man = tmp_path / "ck" / "manifest.txt"
    man.write_text("\n".join(l for l in man.read_text().splitlines() if not l.startswith("version")) + "\n")
    with pytest.raises(CheckpointError, match="version"):
        checkpoint.load_checkpoint(tmp_path / "ck")


def test_missing_directory_is_io_error(tmp_path):
    with pytest.raises(OSError):
        checkpoint.load_checkpoint(tmp_path / "nope")
