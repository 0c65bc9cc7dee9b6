import json

import numpy as np
import pytest

from switchcnn.formats import load_density_map, load_tensors, save_density_map, save_tensors


def test_density_map_round_trip_is_bit_exact(tmp_path):
    dm = np.random.default_rng(0).random((13, 7)).astype(np.float32)
    dm[0, 0] = np.float32(1e-38)
    sidecar, payload = save_density_map(tmp_path / "a", dm)
    meta = json.loads(sidecar.read_text())
    assert meta == {"height": 13, "width": 7, "dtype": "f32",
                    "byte_order": "little-endian", "layout": "row-major"}
    assert payload.stat().st_size == 13 * 7 * 4
    back = load_density_map(tmp_path / "a.json")
    assert back.tobytes() == dm.tobytes()


def test_payload_is_little_endian_row_major(tmp_path):
    dm = np.array([[1.0, 2.0], [3.0, 4.0]], dtype=np.float32)
    _, payload = save_density_map(tmp_path / "b", dm)
    assert payload.read_bytes() == np.array([1, 2, 3, 4], dtype="<f4").tobytes()


def test_density_map_rejects_truncated_payload(tmp_path):
    _, payload = save_density_map(tmp_path / "c", np.ones((3, 3)))
    payload.write_bytes(payload.read_bytes()[:-4])
    with pytest.raises(ValueError, match="bytes"):
        load_density_map(tmp_path / "c")


def test_density_map_requires_2d(tmp_path):
    with pytest.raises(ValueError):
        save_density_map(tmp_path / "d", np.ones(4))


def test_tensor_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    tensors = {"param/convs.0.weight": rng.standard_normal((4, 1, 3, 3)).astype(np.float32),
               "param/head.bias": rng.standard_normal(1).astype(np.float32)}
    save_tensors(tmp_path / "ck", tensors, {"kind": "test", "epoch": 3})
    back, meta = load_tensors(tmp_path / "ck")
    assert meta == {"kind": "test", "epoch": 3}
    assert set(back) == set(tensors)
    for k in tensors:
        assert back[k].tobytes() == tensors[k].tobytes() and back[k].shape == tensors[k].shape


def test_missing_checkpoint(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_tensors(tmp_path / "nope")
