import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ssae import io
from ssae.errors import DataError, ParameterError


def nifti_bytes(voxels, datatype, slope=0.0, inter=0.0, order="<", vox_offset=352, magic=b"n+1\x00"):
    """Build a single-file NIfTI-1 image field by field from the 348-byte header layout."""
    codes = {2: ("u1", 8), 4: ("i2", 16), 16: ("f4", 32)}
    dt, bitpix = codes.get(datatype, ("u1", 8))
    hdr = bytearray(348)
    struct.pack_into(order + "i", hdr, 0, 348)
    dims = [voxels.ndim, *voxels.shape] + [1] * (7 - voxels.ndim)
    struct.pack_into(order + "8h", hdr, 40, *dims)
    struct.pack_into(order + "2h", hdr, 70, datatype, bitpix)
    struct.pack_into(order + "8f", hdr, 76, 1.0, *([1.0] * 7))
    struct.pack_into(order + "3f", hdr, 108, float(vox_offset), slope, inter)
    hdr[344:348] = magic
    pad = bytes(vox_offset - 348)
    body = np.asarray(voxels).astype(order + dt).tobytes(order="F")
    return bytes(hdr) + pad + body


VOX = np.arange(24).reshape(2, 3, 4)


class TestNifti:
    @pytest.mark.parametrize("order", ["<", ">"])
    def test_int16_with_scaling(self, tmp_path, order):
        p = tmp_path / "a.nii"
        p.write_bytes(nifti_bytes(VOX - 5, 4, slope=0.5, inter=2.0, order=order))
        data, hdr = io.read_nifti(p)
        assert data.shape == (2, 3, 4) and hdr["byteorder"] == order
        np.testing.assert_array_equal(data, (VOX - 5) * 0.5 + 2.0)

    def test_uint8_zero_slope_means_raw(self, tmp_path):
        p = tmp_path / "b.nii"
        p.write_bytes(nifti_bytes(VOX, 2, slope=0.0, inter=7.0))
        np.testing.assert_array_equal(io.read_nifti(p)[0], VOX)

    def test_float32(self, tmp_path):
        v = np.array([[0.25, -1.5], [3.0, 1e-3]], dtype=np.float32)
        p = tmp_path / "c.nii"
        p.write_bytes(nifti_bytes(v, 16))
        np.testing.assert_array_equal(io.read_nifti(p)[0], v.astype(np.float64))

    def test_fortran_order(self, tmp_path):
        p = tmp_path / "d.nii"
        p.write_bytes(nifti_bytes(VOX, 2))
        raw = p.read_bytes()[352:]
        # first two bytes on disk are voxels (0,0,0) and (1,0,0)
        assert raw[0] == VOX[0, 0, 0] and raw[1] == VOX[1, 0, 0]
        assert io.read_nifti(p)[0][1, 0, 0] == VOX[1, 0, 0]

    @pytest.mark.parametrize(
        "kwargs",
        [{"datatype": 64}, {"datatype": 2, "magic": b"ni1\x00"}],
    )
    def test_rejects(self, tmp_path, kwargs):
        p = tmp_path / "e.nii"
        p.write_bytes(nifti_bytes(VOX, **kwargs))
        with pytest.raises(DataError):
            io.read_nifti(p)

    def test_truncated(self, tmp_path):
        p = tmp_path / "f.nii"
        p.write_bytes(nifti_bytes(VOX, 4)[:-3])
        with pytest.raises(DataError):
            io.read_nifti(p)
        p.write_bytes(b"\0" * 100)
        with pytest.raises(DataError):
            io.read_nifti(p)


class TestRaw:
    @settings(max_examples=30, deadline=None)
    @given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 7)), elements=st.floats(allow_nan=True, allow_infinity=True)))
    def test_bitwise_roundtrip(self, tmp_path_factory, arr):
        p = tmp_path_factory.mktemp("raw") / "x.raw"
        io.save_raw(p, arr, provenance="level0", threshold=0.5)
        back, meta = io.load_raw(p)
        assert back.tobytes() == arr.astype("<f8").tobytes()
        assert meta["dims"] == list(arr.shape) and meta["provenance"] == "level0" and meta["threshold"] == 0.5

    def test_size_mismatch(self, tmp_path):
        p = io.save_raw(tmp_path / "y.raw", np.zeros((3, 3)))
        p.write_bytes(p.read_bytes()[:-8])
        with pytest.raises(DataError):
            io.load_raw(p)

    def test_missing_sidecar(self, tmp_path):
        p = tmp_path / "z.raw"
        p.write_bytes(b"\0" * 8)
        with pytest.raises(DataError):
            io.load_raw(p)


class TestPGM:
    def test_16bit_quantization_bound(self, tmp_path, rng):
        img = rng.random((17, 23))
        back = io.load_pgm(io.save_pgm(tmp_path / "a.pgm", img, bits=16, vmax=1.0))
        assert back.shape == img.shape
        assert np.max(np.abs(back - img)) <= 1 / (2 * 65535) + 1e-15

    def test_8bit_quantization_bound(self, tmp_path, rng):
        img = rng.random((5, 4)) * 3
        back = io.load_pgm(io.save_pgm(tmp_path / "b.pgm", img, bits=8))
        assert np.max(np.abs(back - img)) <= img.max() / (2 * 255) + 1e-12

    def test_header_layout(self, tmp_path):
        raw = io.save_pgm(tmp_path / "c.pgm", np.ones((2, 3)), bits=8).read_bytes()
        assert raw.startswith(b"P5\n") and raw.endswith(b"\xff" * 6)
        assert b"3 2\n255\n" in raw

    def test_foreign_file_without_comment(self, tmp_path):
        p = tmp_path / "d.pgm"
        p.write_bytes(b"P5 2 1 255\n" + bytes([0, 255]))
        np.testing.assert_array_equal(io.load_pgm(p), [[0.0, 1.0]])

    def test_bad_bits(self, tmp_path):
        with pytest.raises(ParameterError):
            io.save_pgm(tmp_path / "e.pgm", np.zeros((2, 2)), bits=12)

    def test_not_pgm(self, tmp_path):
        p = tmp_path / "f.pgm"
        p.write_bytes(b"P2\n1 1\n255\n0")
        with pytest.raises(DataError):
            io.load_pgm(p)


class TestManifest:
    def test_roundtrip(self, tmp_path):
        samples = [{"path": "a.raw", "seed": 1, "kind": "none"}, {"path": "b.raw", "gt_path": "b_gt.raw", "seed": 2, "kind": "small-multifocal"}]
        doc = io.read_manifest(io.write_manifest(tmp_path / "m.json", samples, seed=1))
        assert doc["samples"] == samples and doc["seed"] == 1

    def test_missing_fields(self, tmp_path):
        with pytest.raises(ParameterError):
            io.write_manifest(tmp_path / "m.json", [{"path": "a.raw"}])

    def test_malformed(self, tmp_path):
        p = tmp_path / "m.json"
        p.write_text(json.dumps({"samples": 3}))
        with pytest.raises(DataError):
            io.read_manifest(p)
