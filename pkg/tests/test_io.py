import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from deformtomo import io
from deformtomo.deformation import sample_random_deformations
from deformtomo.metrics import FSCCurve, MetricsReport
from deformtomo.reconstruct import ModelConfig, init_state


def _f32(a):
    return np.asarray(a, dtype=np.float32).astype(np.float64)


def test_roundtrip_volume(tmp_path):
    v = np.random.default_rng(0).normal(size=(6, 6, 6))
    io.write_mrc(v, tmp_path / "v.mrc")
    back = io.read_mrc(tmp_path / "v.mrc")
    assert back.shape == v.shape
    assert np.array_equal(back, _f32(v))


def test_header_stamps_and_statistics(tmp_path):
    v = np.random.default_rng(1).uniform(-2, 3, size=(3, 5, 4))
    io.write_mrc(v, tmp_path / "s.mrc", is_stack=True)
    raw = (tmp_path / "s.mrc").read_bytes()
    assert raw[208:212] == b"MAP "
    assert raw[212:214] == b"\x44\x44"
    nx, ny, nz, mode = struct.unpack_from("<4i", raw, 0)
    assert (nx, ny, nz, mode) == (4, 5, 3, 2)
    dmin, dmax, dmean = struct.unpack_from("<3f", raw, 76)
    payload = np.frombuffer(raw, "<f4", offset=1024).astype(np.float64)
    assert dmin == np.float32(payload.min()) and dmax == np.float32(payload.max())
    assert dmean == pytest.approx(payload.mean(), rel=1e-6)
    assert len(raw) == 1024 + 4 * 60


def test_stack_uses_nz_equal_m(tmp_path):
    io.write_mrc(np.ones((7, 4, 4)), tmp_path / "st.mrc", is_stack=True)
    _, hdr = io.read_mrc(tmp_path / "st.mrc", with_header=True)
    assert hdr["nz"] == 7


def test_truncated_file(tmp_path):
    io.write_mrc(np.ones((4, 4, 4)), tmp_path / "t.mrc")
    raw = (tmp_path / "t.mrc").read_bytes()
    (tmp_path / "t.mrc").write_bytes(raw[:-10])
    with pytest.raises(io.MrcTruncatedError, match=r"expected 1280 bytes, found 1270"):
        io.read_mrc(tmp_path / "t.mrc")


def test_mode_one_rejected(tmp_path):
    io.write_mrc(np.ones((2, 2, 2)), tmp_path / "m.mrc")
    raw = bytearray((tmp_path / "m.mrc").read_bytes())
    struct.pack_into("<i", raw, 12, 1)
    (tmp_path / "m.mrc").write_bytes(bytes(raw))
    with pytest.raises(io.MrcModeError):
        io.read_mrc(tmp_path / "m.mrc")


def test_bad_map_stamp(tmp_path):
    io.write_mrc(np.ones((2, 2, 2)), tmp_path / "b.mrc")
    raw = bytearray((tmp_path / "b.mrc").read_bytes())
    raw[208:212] = b"XXXX"
    (tmp_path / "b.mrc").write_bytes(bytes(raw))
    with pytest.raises(io.MrcFormatError):
        io.read_mrc(tmp_path / "b.mrc")


def _big_endian_fixture(path, data):
    """Built by hand, independently of write_mrc: big-endian header words and payload."""
    nz, ny, nx = data.shape
    h = bytearray(1024)
    struct.pack_into(">4i", h, 0, nx, ny, nz, 2)
    struct.pack_into(">3f", h, 76, data.min(), data.max(), data.mean())
    h[208:212] = b"MAP "
    h[212:216] = b"\x11\x11\x00\x00"
    path.write_bytes(bytes(h) + data.astype(">f4").tobytes())


def test_foreign_endian_fixture(tmp_path):
    data = np.random.default_rng(2).normal(size=(3, 4, 5))
    _big_endian_fixture(tmp_path / "be.mrc", data)
    back, hdr = io.read_mrc(tmp_path / "be.mrc", with_header=True)
    assert hdr["byteorder"] == ">"
    assert np.array_equal(back, _f32(data))


def test_write_rejects_non_finite(tmp_path):
    with pytest.raises(ValueError):
        io.write_mrc(np.array([[[np.nan]]]), tmp_path / "x.mrc")


def test_unwritable_path(tmp_path):
    (tmp_path / "file").write_text("x")
    with pytest.raises(OSError):
        io.write_mrc(np.ones((2, 2, 2)), tmp_path / "file" / "v.mrc")


@settings(max_examples=25, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 5), st.integers(1, 5)),
              elements=st.floats(-1e6, 1e6, width=32)))
def test_roundtrip_property(tmp_path_factory, data):
    path = tmp_path_factory.mktemp("mrc") / "p.mrc"
    io.write_mrc(data, path, is_stack=True)
    back = io.read_mrc(path)
    assert back.shape == data.shape and np.array_equal(back, _f32(data))


def test_ground_truth_dump_roundtrip(tmp_path):
    gt = sample_random_deformations(3, 8, seed=1)
    io.write_ground_truth(tmp_path / "gt.bin", gt)
    back = io.read_ground_truth(tmp_path / "gt.bin")
    assert np.array_equal(back.alpha_deg, gt.alpha_deg) and np.array_equal(back.tau, gt.tau)
    assert np.array_equal(back.fields, gt.fields)


def test_deformation_checkpoint_roundtrip(tmp_path):
    d = init_state(3, ModelConfig(ff_k=4, width=4, depth=2, warp_k=3, warp_width=5), seed=2).deform
    d = d.with_globals([1.0, -2.0, 3.5], [[0.1, 0.0], [0.0, -0.2], [0.05, 0.05]])
    io.save_deformations(tmp_path / "d.ckpt", d)
    back = io.load_deformations(tmp_path / "d.ckpt")
    assert np.array_equal(back.tau_array, d.tau_array)
    assert np.array_equal(back.alpha_deg, d.alpha_deg)
    xy = np.random.default_rng(0).uniform(-1, 1, size=(5, 2))
    assert np.array_equal(back.local_displacement(2, xy), d.local_displacement(2, xy))
    assert back.spec.anchor_grid == d.spec.anchor_grid


def test_report_files(tmp_path):
    reports = [MetricsReport("EST", 1.0, 2.0, 3.0, 4.0, 5.0), MetricsReport("FBP", 1.5, 2.5, 3.5, 4.5, 0.5)]
    curve = FSCCurve(np.arange(4) / 2.0, np.linspace(1, 0, 4), np.ones(4, dtype=int))
    img = np.linspace(-3, 7, 20).reshape(4, 5)
    io.write_report(tmp_path, reports, {"EST": curve, "FBP": curve}, slices={"true": img}, panels={"clean": img})
    lines = (tmp_path / "table1.csv").read_text().splitlines()
    assert lines[0] == "method,shift_px,rot_deg,local_px,warp_px,proj_snr_db"
    assert len(lines) == 3 and lines[1].startswith("EST,1.000000")
    assert len(io.read_csv(tmp_path / "fsc.csv")) == 4 * 2

    from PIL import Image

    png = np.asarray(Image.open(tmp_path / "slice_true.png"))
    assert png.dtype == np.uint8 and png.shape == img.shape
    assert png[0, 0] == 0 and png[-1, -1] == 255
    assert png.flat[np.argmin(img)] == 0 and png.flat[np.argmax(img)] == 255
    assert (tmp_path / "panel_clean.png").exists()


def test_uint8_constant_image():
    assert np.all(io.to_uint8(np.full((3, 3), 4.0)) == 0)


def test_atomic_write_leaves_no_temp_files(tmp_path):
    io.atomic_write_bytes(tmp_path / "a.bin", b"abc")
    io.atomic_write_bytes(tmp_path / "a.bin", b"xyz")
    assert (tmp_path / "a.bin").read_bytes() == b"xyz"
    assert [p.name for p in tmp_path.iterdir()] == ["a.bin"]
