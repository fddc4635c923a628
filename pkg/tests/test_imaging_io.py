import logging

import numpy as np
import pytest

from dilatedseg import imaging_io as io
from dilatedseg.errors import ConfigError, FormatError
from dilatedseg.volume import Volume

EXAMPLE_HEADER = """NDims = 3
DimSize = 2 2 2
ElementType = MET_FLOAT
ElementSpacing = 0.65 0.65 0.65
ElementDataFile = v.raw
"""


def test_read_example(tmp_path):
    (tmp_path / "v.mhd").write_text(EXAMPLE_HEADER)
    vals = np.arange(8, dtype="<f4")
    (tmp_path / "v.raw").write_bytes(vals.tobytes())
    v = io.read_volume(tmp_path / "v.mhd")
    assert v.dims == (2, 2, 2) and v.spacing == (0.65, 0.65, 0.65)
    # x fastest: the second stored value is at x=1
    assert v.data[0, 0, 1] == 1.0 and v.data[1, 0, 0] == 4.0


def test_one_byte_short(tmp_path):
    (tmp_path / "v.mhd").write_text(EXAMPLE_HEADER)
    (tmp_path / "v.raw").write_bytes(bytes(31))
    with pytest.raises(FormatError, match="size mismatch"):
        io.read_volume(tmp_path / "v.mhd")


@pytest.mark.parametrize("key", ["DimSize", "ElementType", "ElementDataFile"])
def test_missing_mandatory_key(tmp_path, key):
    text = "".join(l + "\n" for l in EXAMPLE_HEADER.splitlines() if not l.startswith(key))
    (tmp_path / "v.mhd").write_text(text)
    (tmp_path / "v.raw").write_bytes(bytes(32))
    with pytest.raises(FormatError, match=key):
        io.read_volume(tmp_path / "v.mhd")


def test_unknown_key_warns(tmp_path, caplog):
    (tmp_path / "v.mhd").write_text("Flavour = strange\n" + EXAMPLE_HEADER)
    (tmp_path / "v.raw").write_bytes(bytes(32))
    with caplog.at_level(logging.WARNING):
        io.read_volume(tmp_path / "v.mhd")
    assert "Flavour" in caplog.text


def test_crlf_spaces_blank_lines_default_spacing(tmp_path):
    text = "NDims=3\r\nDimSize   =   2 1 1\r\nElementType= MET_SHORT\r\nElementDataFile =v.raw\r\n\r\n\r\n"
    (tmp_path / "v.mhd").write_bytes(text.encode())
    (tmp_path / "v.raw").write_bytes(np.array([-3, 7], "<i2").tobytes())
    v = io.read_volume(tmp_path / "v.mhd")
    assert v.spacing == (1.0, 1.0, 1.0) and v.data.ravel().tolist() == [-3, 7]


def test_local_and_msb(tmp_path):
    head = ("ObjectType = Image\nNDims = 3\nDimSize = 3 1 1\nElementType = MET_USHORT\n"
            "ElementByteOrderMSB = True\nElementDataFile = LOCAL\n")
    (tmp_path / "v.mhd").write_bytes(head.encode() + np.array([1, 256, 65535], ">u2").tobytes())
    v = io.read_volume(tmp_path / "v.mhd")
    assert v.data.ravel().tolist() == [1, 256, 65535]


@pytest.mark.parametrize("etype,dtype", [("MET_UCHAR", np.uint8), ("MET_SHORT", np.int16),
                                         ("MET_USHORT", np.uint16), ("MET_FLOAT", np.float32)])
def test_roundtrip_all_types(tmp_path, etype, dtype):
    rng = np.random.default_rng(0)
    info = np.iinfo(dtype) if np.dtype(dtype).kind in "iu" else None
    data = (rng.integers(info.min, info.max, (5, 4, 3), endpoint=True).astype(dtype) if info
            else rng.standard_normal((5, 4, 3)).astype(dtype))
    v = Volume(data, (0.123456789012, 1.0 / 3.0, 2.5), "label" if etype == "MET_UCHAR" else "intensity")
    mhd, raw = io.write_volume(v, tmp_path / "out.mhd", etype)
    assert raw.name == "out.raw"
    back = io.read_volume(mhd)
    assert back.data.dtype == dtype
    assert back.data.tobytes() == data.tobytes()
    assert back.dims == (3, 4, 5) and back.spacing == v.spacing


def test_header_layout(tmp_path):
    v = Volume(np.zeros((5, 4, 3), np.uint8), (0.65, 0.65, 0.65), "label")
    mhd, _ = io.write_volume(v, tmp_path / "lab.mhd")
    lines = mhd.read_text().splitlines()
    assert [l.split(" = ")[0] for l in lines] == list(io.HEADER_ORDER)
    assert "ElementType = MET_UCHAR" in lines
    assert "DimSize = 3 4 5" in lines
    assert "ElementByteOrderMSB = False" in lines


def test_write_unwritable(tmp_path):
    v = Volume(np.zeros((2, 2, 2), np.float32))
    with pytest.raises(FormatError):
        io.write_volume(v, tmp_path / "missing" / "dir" / "v.mhd")


# -- pixmaps ----------------------------------------------------------------

def test_constant_slice_mid_gray(tmp_path):
    v = Volume(np.full((3, 4, 5), 9.0, np.float32))
    rgb = io.export_slice_pixmap(v, "z", 1, tmp_path / "s.ppm")
    assert rgb.shape == (4, 5, 3) and np.all(rgb == 128)
    assert np.array_equal(io.read_pixmap(tmp_path / "s.ppm"), rgb)


def test_pixmap_dims_and_overlay(tmp_path):
    rng = np.random.default_rng(0)
    v = Volume(rng.standard_normal((3, 4, 5)).astype(np.float32))
    bg = Volume(np.zeros((3, 4, 5), np.uint8), kind="label")
    for axis, shape in (("x", (3, 4)), ("y", (3, 5)), ("z", (4, 5))):
        plain = io.export_slice_pixmap(v, axis, 0, tmp_path / "a.ppm")
        with_bg = io.export_slice_pixmap(v, axis, 0, tmp_path / "b.ppm", overlay=bg)
        assert plain.shape[:2] == shape
        assert (tmp_path / "a.ppm").read_bytes() == (tmp_path / "b.ppm").read_bytes()
    lab = bg.data.copy()
    lab[0, 0, 0], lab[0, 0, 1] = 1, 2
    rgb = io.render_slice(v, "z", 0, Volume(lab, kind="label"))
    gray = io.render_slice(v, "z", 0)
    assert rgb[0, 0, 1] == np.floor(0.5 * gray[0, 0, 1] + 0.5 * 255 + 0.5)
    assert rgb[0, 1, 2] == np.floor(0.5 * gray[0, 1, 2] + 0.5 * 255 + 0.5)
    assert rgb[0, 0, 0] == np.floor(0.5 * gray[0, 0, 0] + 0.5)


def test_pixmap_whitespace_pixels_roundtrip(tmp_path):
    # pixel bytes 9, 10, 13 and 32 are whitespace; they must survive the reader
    v = Volume(np.array([[[0.0, 9.0, 10.0, 13.0, 32.0, 255.0]]], np.float32))
    rgb = io.export_slice_pixmap(v, "z", 0, tmp_path / "w.ppm")
    assert rgb[0, :, 0].tolist() == [0, 9, 10, 13, 32, 255]
    assert np.array_equal(io.read_pixmap(tmp_path / "w.ppm"), rgb)


def test_pixmap_index_error(tmp_path):
    v = Volume(np.zeros((3, 4, 5), np.float32))
    with pytest.raises(IndexError):
        io.export_slice_pixmap(v, "x", 5, tmp_path / "s.ppm")


# -- config files -----------------------------------------------------------

def test_config_entries(tmp_path):
    p = tmp_path / "net.cfg"
    p.write_text("# comment\n\nkernels = 3 1   # trailing\n  channels=4 3\n")
    assert io.read_config_entries(p) == [("kernels", "3 1", 3), ("channels", "4 3", 4)]
    p.write_text("kernels = 3\noops\n")
    with pytest.raises(ConfigError) as info:
        io.read_config_entries(p)
    assert info.value.lineno == 2
    io.write_config({"a": "1", "b": "2 3"}, p, comment="test")
    assert io.read_config_entries(p) == [("a", "1", 2), ("b", "2 3", 3)]
