"""Binary blob container: deterministic layout, shape/dtype fidelity, corruption handling."""

import numpy as np
import pytest

from ecgtext.checkpoint import MAGIC, CheckpointError, load_blobs, save_blobs


def sample_blobs(rng):
    return {
        "weights": rng.normal(size=(3, 4)).astype(np.float32),
        "bias": rng.normal(size=4).astype(np.float32),
        "step": np.array(17, dtype=np.int64),  # 0-d: scalar state must survive
        "flags": np.array([True, False, True]),
        "bytes": np.arange(6, dtype=np.uint8).reshape(2, 3),
    }


class TestRoundTrip:
    def test_values_shapes_dtypes_and_meta(self, rng, tmp_path):
        blobs = sample_blobs(rng)
        meta = {"epoch": 3, "history": [1.5, 1.2], "name": "run"}
        save_blobs(tmp_path / "ck.bin", blobs, meta)
        loaded, got_meta = load_blobs(tmp_path / "ck.bin")
        assert got_meta == meta
        assert set(loaded) == set(blobs)
        for name, arr in blobs.items():
            assert loaded[name].shape == arr.shape, name
            assert np.array_equal(loaded[name], np.asarray(arr, dtype=loaded[name].dtype)), name

    def test_scalar_blob_stays_zero_dimensional(self, tmp_path):
        save_blobs(tmp_path / "ck.bin", {"step": np.array(5, dtype=np.int64)}, {})
        loaded, _ = load_blobs(tmp_path / "ck.bin")
        assert loaded["step"].shape == ()
        assert int(loaded["step"]) == 5

    def test_save_twice_is_byte_identical(self, rng, tmp_path):
        blobs = sample_blobs(rng)
        save_blobs(tmp_path / "a.bin", blobs, {"k": 1})
        save_blobs(tmp_path / "b.bin", blobs, {"k": 1})
        assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()

    def test_insertion_order_does_not_change_bytes(self, rng, tmp_path):
        blobs = sample_blobs(rng)
        reordered = dict(reversed(list(blobs.items())))
        save_blobs(tmp_path / "a.bin", blobs, {})
        save_blobs(tmp_path / "b.bin", reordered, {})
        assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()

    def test_loaded_arrays_are_writable(self, rng, tmp_path):
        save_blobs(tmp_path / "ck.bin", {"w": np.zeros(3, dtype=np.float32)}, {})
        loaded, _ = load_blobs(tmp_path / "ck.bin")
        loaded["w"][0] = 1.0  # must not raise


class TestCorruption:
    def test_bad_magic(self, tmp_path):
        bad = tmp_path / "bad.bin"
        bad.write_bytes(b"XXXXXXXX" + b"\x00" * 32)
        with pytest.raises(CheckpointError, match="magic"):
            load_blobs(bad)

    def test_truncated_header(self, rng, tmp_path):
        path = tmp_path / "ck.bin"
        save_blobs(path, sample_blobs(rng), {})
        path.write_bytes(path.read_bytes()[: len(MAGIC) + 10])
        with pytest.raises(CheckpointError, match="truncated header"):
            load_blobs(path)

    def test_truncated_payload(self, rng, tmp_path):
        path = tmp_path / "ck.bin"
        save_blobs(path, sample_blobs(rng), {})
        path.write_bytes(path.read_bytes()[:-4])
        with pytest.raises(CheckpointError, match="truncated payload"):
            load_blobs(path)

    def test_unsupported_dtype_rejected_at_save(self, tmp_path):
        with pytest.raises(CheckpointError, match="unsupported dtype"):
            save_blobs(tmp_path / "ck.bin", {"c": np.zeros(2, dtype=np.complex64)}, {})
