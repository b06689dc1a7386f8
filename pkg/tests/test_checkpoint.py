import json
import zipfile

import numpy as np
import pytest

from necho.tensor.checkpoint import (CheckpointError, check_compatible, load_checkpoint, read_manifest,
                                     save_checkpoint)


def _params():
    rng = np.random.default_rng(0)
    return {"a.weight": rng.normal(size=(3, 4)), "a.bias": np.zeros(4), "beta": np.array(0.25),
            "tiny": np.array([np.nextafter(0.0, 1.0), -0.0, 1e308])}


def test_round_trip_is_bit_identical(tmp_path):
    params = _params()
    path = save_checkpoint(tmp_path / "c.ckpt", params, {"epoch": 3})
    loaded, meta = load_checkpoint(path)
    assert meta == {"epoch": 3}
    assert list(loaded) == list(params)
    for name, arr in params.items():
        assert loaded[name].shape == arr.shape
        assert loaded[name].tobytes() == np.asarray(arr, dtype=np.float64).tobytes()


def test_manifest_layout_and_little_endian_payload(tmp_path):
    params = _params()
    path = save_checkpoint(tmp_path / "c.ckpt", params)
    manifest = read_manifest(path)
    assert manifest["dtype"] == "<f8"
    offsets = [e["offset"] for e in manifest["params"]]
    sizes = [int(np.prod(e["shape"])) * 8 for e in manifest["params"]]
    assert offsets == list(np.cumsum([0] + sizes[:-1]))
    with zipfile.ZipFile(path) as zf:
        blob = zf.read("params.bin")
    entry = manifest["params"][0]
    first = np.frombuffer(blob, dtype="<f8", count=12, offset=entry["offset"]).reshape(entry["shape"])
    np.testing.assert_array_equal(first, params["a.weight"])


def test_saving_twice_gives_identical_bytes(tmp_path):
    a = save_checkpoint(tmp_path / "a.ckpt", _params(), {"x": 1}).read_bytes()
    b = save_checkpoint(tmp_path / "b.ckpt", _params(), {"x": 1}).read_bytes()
    assert a == b


def test_corrupt_archives_are_rejected(tmp_path):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"not a zip")
    with pytest.raises(CheckpointError):
        load_checkpoint(bad)
    path = save_checkpoint(tmp_path / "c.ckpt", _params())
    with zipfile.ZipFile(path) as zf:
        manifest = json.loads(zf.read("manifest.json"))
    manifest["total_bytes"] += 8
    with zipfile.ZipFile(tmp_path / "d.ckpt", "w") as zf:
        zf.writestr("manifest.json", json.dumps(manifest))
        zf.writestr("params.bin", b"\0" * 8)
    with pytest.raises(CheckpointError, match="bytes"):
        load_checkpoint(tmp_path / "d.ckpt")


def test_compatibility_lists_every_offender():
    with pytest.raises(CheckpointError) as info:
        check_compatible({"w": (2, 3), "extra": (1,)}, {"w": (3, 2), "b": (2,)})
    msg = str(info.value)
    assert "w:" in msg and "b:" in msg and "extra:" in msg
    check_compatible({"w": (2, 3)}, {"w": (2, 3)})
