"""
Tests for the RNTENSOR container
"""

import struct

import numpy as np
import pytest

from app.services.autodiff import ParamStore
from app.utils.container import MAGIC, file_sha256, load_params, load_tensor, save_params, save_tensor
from app.utils.exceptions import CheckpointNotFoundException, ContainerFormatException, DependencyException


def test_tensor_round_trip(tmp_path):
    array = np.arange(12, dtype=np.float64).reshape(3, 4) / 7.0
    save_tensor(tmp_path / "a" / "x.rnt", array, {"item": "train-0001"})
    loaded, meta = load_tensor(tmp_path / "a" / "x.rnt")
    assert loaded.dtype == np.float32
    np.testing.assert_array_equal(loaded, array.astype(np.float32))
    assert meta == {"item": "train-0001"}


def test_tensor_layout_on_disk(tmp_path):
    save_tensor(tmp_path / "x.rnt", np.array([1.0, 2.0]))
    raw = (tmp_path / "x.rnt").read_bytes()
    assert raw[:8] == MAGIC
    (header_len,) = struct.unpack("<Q", raw[8:16])
    assert raw[16 + header_len :] == np.array([1.0, 2.0], dtype="<f4").tobytes()


def test_params_round_trip(tmp_path):
    store = ParamStore()
    store.add("b.bias", np.zeros(3))
    store.add("a.weight", np.arange(6, dtype=np.float32).reshape(2, 3))
    save_params(tmp_path / "p.rnt", store, {"kind": "pinv"})
    loaded, meta = load_params(tmp_path / "p.rnt")
    assert loaded.names() == store.names()
    for name in store.names():
        np.testing.assert_array_equal(loaded.value(name), store.value(name))
    assert meta == {"kind": "pinv"}


def test_missing_files(tmp_path):
    with pytest.raises(DependencyException) as exc:
        load_tensor(tmp_path / "absent.rnt")
    assert exc.value.error_code == "INPUT_NOT_FOUND"
    with pytest.raises(CheckpointNotFoundException) as exc:
        load_params(tmp_path / "absent.rnt")
    assert exc.value.error_code == "CHECKPOINT_NOT_FOUND"


def test_rejects_foreign_file(tmp_path):
    path = tmp_path / "x.rnt"
    path.write_bytes(b"NOTATENSOR-AT-ALL")
    with pytest.raises(ContainerFormatException) as exc:
        load_tensor(path)
    assert exc.value.error_code == "CONTAINER_MAGIC"


def test_rejects_truncated_payload(tmp_path):
    path = tmp_path / "x.rnt"
    save_tensor(path, np.ones((4, 4)))
    path.write_bytes(path.read_bytes()[:-5])
    with pytest.raises(ContainerFormatException) as exc:
        load_tensor(path)
    assert exc.value.error_code == "CONTAINER_TRUNCATED"


def test_rejects_corrupt_header(tmp_path):
    path = tmp_path / "x.rnt"
    header = b"{not json"
    path.write_bytes(MAGIC + struct.pack("<Q", len(header)) + header)
    with pytest.raises(ContainerFormatException) as exc:
        load_tensor(path)
    assert exc.value.error_code == "CONTAINER_HEADER"


def test_kind_mismatch(tmp_path):
    store = ParamStore()
    store.add("w", np.ones(2))
    save_params(tmp_path / "p.rnt", store)
    save_tensor(tmp_path / "t.rnt", np.ones(2))
    with pytest.raises(ContainerFormatException) as exc:
        load_tensor(tmp_path / "p.rnt")
    assert exc.value.error_code == "CONTAINER_KIND"
    with pytest.raises(ContainerFormatException) as exc:
        load_params(tmp_path / "t.rnt")
    assert exc.value.error_code == "CONTAINER_KIND"


def test_file_sha256_tracks_content(tmp_path):
    save_tensor(tmp_path / "a.rnt", np.ones(3))
    save_tensor(tmp_path / "b.rnt", np.ones(3))
    save_tensor(tmp_path / "c.rnt", np.zeros(3))
    assert file_sha256(tmp_path / "a.rnt") == file_sha256(tmp_path / "b.rnt")
    assert file_sha256(tmp_path / "a.rnt") != file_sha256(tmp_path / "c.rnt")
    assert len(file_sha256(tmp_path / "a.rnt")) == 64
