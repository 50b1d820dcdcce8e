import math
import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from slicevol.errors import FormatError, LengthError, ValidationError
from slicevol.volume import (
    LabelMap, Slice, Volume, assemble_volume, extract_slices, load_labels, load_volume, nearest_rank,
    percentile_normalize, resample_labels, resample_volume, save_labels, save_volume, slice_ncc, trilinear_sample,
)

dims_st = st.tuples(*(st.integers(1, 5),) * 3)
finite_f32 = st.floats(-1e6, 1e6, allow_nan=False, width=32)


@st.composite
def volumes(draw):
    shape = draw(dims_st)
    data = draw(arrays(np.float32, shape, elements=finite_f32))
    spacing = draw(st.tuples(*(st.floats(0.1, 5.0),) * 3))
    return Volume(data, spacing)


# ------------------------------------------------------------------ types


def test_volume_is_immutable_and_float32():
    v = Volume(np.arange(8).reshape(2, 2, 2))
    assert v.data.dtype == np.float32
    with pytest.raises(ValueError):
        v.data[0, 0, 0] = 1


@pytest.mark.parametrize("spacing", [(0, 1, 1), (1, -1, 1), (1, 1)])
def test_volume_rejects_bad_spacing(spacing):
    with pytest.raises(ValidationError):
        Volume(np.zeros((2, 2, 2)), spacing)


def test_labelmap_checks_range():
    with pytest.raises(ValidationError):
        LabelMap(np.full((2, 2, 2), 3), 3)
    with pytest.raises(ValidationError):
        LabelMap(np.zeros((2, 2, 2), int), 1)


# -------------------------------------------------------------------- I/O


def test_zero_volume_roundtrip(tmp_path):
    v = Volume(np.zeros((4, 4, 4)))
    save_volume(v, tmp_path / "z.svol")
    assert load_volume(tmp_path / "z.svol").equals(v)


def test_ramp_volume_roundtrip_bits(tmp_path):
    n = 3 * 4 * 5
    v = Volume((np.arange(n) / n).reshape(3, 4, 5), (0.5, 1.0, 2.0))
    save_volume(v, tmp_path / "r.svol")
    back = load_volume(tmp_path / "r.svol")
    assert back.data.tobytes() == v.data.tobytes()
    assert back.spacing == v.spacing


def test_file_size_and_header_layout(tmp_path):
    v = Volume(np.zeros((2, 3, 4)), (1.0, 2.0, 3.0))
    path = tmp_path / "h.svol"
    save_volume(v, path)
    raw = path.read_bytes()
    assert len(raw) == 32 + 4 * 24
    magic, version, dtype, d, h, w, sd, sh, sw = struct.unpack_from("<4sHH3I3f", raw)
    assert (magic, version, dtype, d, h, w) == (b"SVOL", 1, 1, 2, 3, 4)
    assert (sd, sh, sw) == (1.0, 2.0, 3.0)


def test_zero_payload(tmp_path):
    path = tmp_path / "z.svol"
    save_volume(Volume(np.zeros((2, 2, 2))), path)
    assert path.read_bytes()[32:] == bytes(32)


def test_nan_rejected_before_write(tmp_path):
    data = np.zeros((2, 2, 2))
    data[1, 1, 1] = np.nan
    path = tmp_path / "n.svol"
    with pytest.raises(ValidationError):
        save_volume(Volume(data), path)
    assert not path.exists()


def test_bad_magic(tmp_path):
    path = tmp_path / "x.svol"
    save_volume(Volume(np.zeros((2, 2, 2))), path)
    path.write_bytes(b"XXXX" + path.read_bytes()[4:])
    with pytest.raises(FormatError):
        load_volume(path)


def test_truncated_payload(tmp_path):
    path = tmp_path / "t.svol"
    save_volume(Volume(np.zeros((2, 2, 2))), path)
    path.write_bytes(path.read_bytes()[:-4])
    with pytest.raises(LengthError):
        load_volume(path)


def test_nonfinite_on_disk_rejected(tmp_path):
    path = tmp_path / "inf.svol"
    save_volume(Volume(np.zeros((1, 1, 2))), path)
    raw = bytearray(path.read_bytes())
    raw[-4:] = struct.pack("<f", math.inf)
    path.write_bytes(bytes(raw))
    with pytest.raises(ValidationError):
        load_volume(path)


@given(volumes())
def test_volume_roundtrip_property(tmp_path_factory, v):
    path = tmp_path_factory.mktemp("rt") / "v.svol"
    save_volume(v, path)
    assert load_volume(path).equals(v)


def test_label_roundtrip_and_layout(tmp_path):
    rng = np.random.default_rng(0)
    m = LabelMap(rng.integers(0, 5, (3, 4, 5)), 5)
    path = tmp_path / "l.slab"
    save_labels(m, path)
    raw = path.read_bytes()
    assert len(raw) == 20 + 2 * 60
    assert struct.unpack_from("<4sHH3I", raw) == (b"SLAB", 1, 5, 3, 4, 5)
    assert load_labels(path).equals(m)


# ----------------------------------------------------------- normalization


def test_nearest_rank_definition():
    s = np.arange(1, 11, dtype=float)
    assert nearest_rank(s, 0) == 1
    assert nearest_rank(s, 25) == 3  # ceil(2.5) = 3
    assert nearest_rank(s, 100) == 10


def test_constant_volume_normalizes_to_zero():
    out = percentile_normalize(Volume(np.full((3, 3, 3), 7.0)))
    assert np.all(out.data == 0)


def test_ramp_normalization_endpoints():
    v = Volume(np.arange(100).reshape(4, 5, 5))
    out = percentile_normalize(v, 0, 100)
    assert out.data.min() == 0 and out.data.max() == 1
    np.testing.assert_allclose(out.data, v.data / 99.0, atol=1e-7)


def test_uniform_sample_matches_sort_oracle():
    x = np.random.default_rng(7).uniform(size=1000)
    v = Volume(x.reshape(10, 10, 10))
    out = percentile_normalize(v, 1, 99).data.ravel().astype(np.float64)
    s = np.sort(v.data.ravel().astype(np.float64))
    a, b = s[math.ceil(0.01 * 1000) - 1], s[math.ceil(0.99 * 1000) - 1]
    x32 = v.data.ravel().astype(np.float64)
    expected = np.clip((x32 - a) / (b - a), 0, 1)
    np.testing.assert_allclose(out, expected.astype(np.float32), atol=0)
    assert out.min() == 0 and out.max() == 1
    assert np.count_nonzero(out == 0) == np.count_nonzero(x32 <= a)
    assert np.count_nonzero(out == 1) == np.count_nonzero(x32 >= b)


@given(volumes(), st.floats(0, 49), st.floats(51, 100))
def test_normalized_range(v, lo, hi):
    out = percentile_normalize(v, lo, hi)
    assert out.data.min() >= 0 and out.data.max() <= 1


@given(st.integers(2, 6))
def test_normalize_idempotent_on_unit_range(n):
    data = np.linspace(0, 1, n**3, dtype=np.float32).reshape(n, n, n)
    out = percentile_normalize(Volume(data), 0, 100)
    np.testing.assert_allclose(out.data, data, atol=1e-6)


def test_normalize_rejects_bad_percentiles():
    with pytest.raises(ValidationError):
        percentile_normalize(Volume(np.zeros((2, 2, 2))), 50, 50)


# -------------------------------------------------------------- resampling


@given(volumes())
def test_resample_identity(v):
    out = resample_volume(v, v.dims)
    np.testing.assert_allclose(out.data, v.data, rtol=1e-6, atol=1e-6 * (1 + np.abs(v.data).max()))


@given(st.floats(-10, 10, allow_nan=False), dims_st, dims_st)
def test_resample_constant(c, d_in, d_out):
    out = resample_volume(Volume(np.full(d_in, c)), d_out)
    np.testing.assert_allclose(out.data, np.float32(c), rtol=1e-6, atol=1e-6)
    assert out.dims == d_out


def test_resample_ramp_hand_oracle():
    x = np.broadcast_to(np.arange(4.0), (4, 4, 4))
    out = resample_volume(Volume(x), (2, 2, 2))
    # corner-aligned: output index j samples input coordinate j * 3 / 1 = 0, 3
    assert np.all(out.data[..., 0] == 0) and np.all(out.data[..., 1] == 3)
    assert out.spacing == (2.0, 2.0, 2.0)


def test_resample_upsample_midpoints():
    x = np.broadcast_to(np.arange(2.0), (2, 2, 2))
    out = resample_volume(Volume(x), (2, 2, 3))
    np.testing.assert_allclose(out.data[0, 0], [0, 0.5, 1])


def test_resample_labels_nearest():
    m = LabelMap(np.repeat(np.arange(4), 16).reshape(4, 4, 4), 4)
    out = resample_labels(m, (2, 4, 4))
    assert set(np.unique(out.labels)) <= {0, 3}


def test_trilinear_gradient_matches_fd():
    rng = np.random.default_rng(3)
    data = rng.normal(size=(5, 6, 7))
    pts = rng.uniform(0.2, 4.8, size=(3, 20)) + rng.uniform(0, 0.5, size=(3, 1))
    _, g = trilinear_sample(data, pts, grad=True)
    h = 1e-6
    for k in range(3):
        e = np.zeros((3, 1))
        e[k] = h
        fd = (trilinear_sample(data, pts + e) - trilinear_sample(data, pts - e)) / (2 * h)
        np.testing.assert_allclose(g[k], fd, atol=1e-6)


# ----------------------------------------------------------------- slicing


def test_extract_shape():
    slices = extract_slices(Volume(np.zeros((3, 2, 2))), 0)
    assert len(slices) == 3 and all(s.dims == (2, 2) for s in slices)


def test_slice_index_content():
    v = Volume(np.broadcast_to(np.arange(4.0)[:, None, None], (4, 3, 2)))
    for t, s in enumerate(extract_slices(v, 0)):
        assert np.all(s.data == t)


@given(volumes(), st.sampled_from([0, 1, 2]))
def test_extract_assemble_inverse(v, axis):
    back = assemble_volume(extract_slices(v, axis), v.spacing, axis)
    assert back.equals(v)
    assert len(extract_slices(v, axis)) == v.dims[axis]


def test_assemble_identical_slices():
    s = Slice(np.array([[1.0, 2.0], [3.0, 4.0]]))
    v = assemble_volume([s, s, s])
    assert v.dims == (3, 2, 2)
    assert all(np.array_equal(v.data[t], s.data) for t in range(3))


def test_assemble_errors():
    with pytest.raises(ValidationError):
        assemble_volume([])
    with pytest.raises(ValidationError):
        assemble_volume([Slice(np.zeros((2, 2))), Slice(np.zeros((2, 3)))])
    with pytest.raises(ValidationError):
        extract_slices(Volume(np.zeros((2, 2, 2))), 3)


def test_slice_ncc_linear_profile():
    # every slice is a scaled copy of the same pattern -> NCC 1
    pattern = np.random.default_rng(0).normal(size=(4, 4))
    v = Volume(np.stack([pattern * (t + 1) for t in range(5)]))
    assert slice_ncc(v) == pytest.approx(1.0, abs=1e-6)
