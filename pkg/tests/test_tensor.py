import io
import itertools

import numpy as np
import pytest

from d2conv3d.tensor import (
    KernelWeights,
    NpyFormatError,
    Shape5D,
    as_shape5d,
    flat_index,
    npy_read,
    npy_write,
    tensor_new,
)


def test_tensor_new_fills():
    z = tensor_new((1, 1, 2, 2, 2))
    assert z.shape == (1, 1, 2, 2, 2) and z.size == 8 and not z.any()
    one = tensor_new((1, 1, 1, 1, 1), 3.5)
    assert one.item() == 3.5


def test_tensor_new_random_is_deterministic():
    a = tensor_new((2, 3, 4, 4, 4), "random-normal", seed=7)
    b = tensor_new((2, 3, 4, 4, 4), "random-normal", seed=7)
    assert a.tobytes() == b.tobytes()
    c = tensor_new((2, 3, 4, 4, 4), "random-normal", seed=8)
    assert not np.array_equal(a, c)


def test_tensor_new_rejects_bad_args():
    with pytest.raises(ValueError):
        tensor_new((1, 1, 1, 1, 1), "random-normal", stddev=-1.0)
    with pytest.raises(ValueError):
        tensor_new((1, -1, 1, 1, 1))
    with pytest.raises(ValueError):
        tensor_new((1, 1, 1))


def test_flat_index_matches_row_major_enumeration():
    shape = Shape5D(2, 3, 2, 3, 4)
    arr = np.arange(shape.size).reshape(shape)
    for idx in itertools.product(*(range(d) for d in shape)):
        assert flat_index(shape, *idx) == arr[idx]


def test_as_shape5d_zero_dim_is_empty():
    s = as_shape5d((0, 1, 1, 1, 1))
    assert s.size == 0


def test_kernel_weights_validation():
    kw = KernelWeights(np.zeros((4, 2, 3, 3, 3)), np.zeros(4))
    assert (kw.c_out, kw.c_in, kw.kernel_size, kw.num_points) == (4, 2, (3, 3, 3), 27)
    with pytest.raises(ValueError):
        KernelWeights(np.zeros((4, 2, 2, 3, 3)))
    with pytest.raises(ValueError):
        KernelWeights(np.zeros((4, 2, 3, 3, 3)), np.zeros(3))


# NPY: numpy's own writer is the independent oracle for the byte layout.


def _numpy_bytes(arr):
    buf = io.BytesIO()
    np.lib.format.write_array(buf, arr, version=(1, 0), allow_pickle=False)
    return buf.getvalue()


@pytest.mark.parametrize("dtype", [np.float64, np.float32])
@pytest.mark.parametrize("shape", [(1, 1, 1, 1, 2), (2, 3, 4, 5, 6), (0, 1, 1, 1, 1), (1, 2, 1, 3, 1)])
def test_npy_write_bytes_match_numpy(tmp_path, rng, dtype, shape):
    arr = rng.normal(size=shape).astype(dtype)
    path = tmp_path / "a.npy"
    npy_write(arr, path)
    assert path.read_bytes() == _numpy_bytes(arr)


def test_npy_header_descriptor(tmp_path):
    path = tmp_path / "a.npy"
    npy_write(np.array([1.0, 2.0]).reshape(1, 1, 1, 1, 2), path)
    raw = path.read_bytes()
    assert raw[:8] == b"\x93NUMPY\x01\x00"
    header = raw[10 : 10 + int.from_bytes(raw[8:10], "little")].decode("latin1")
    assert "'descr': '<f8'" in header and "'fortran_order': False" in header
    assert "'shape': (1, 1, 1, 1, 2)" in header
    assert (10 + len(header)) % 64 == 0 and header.endswith("\n")


@pytest.mark.parametrize("dtype", [np.float64, np.float32])
def test_npy_round_trip_bitwise(tmp_path, rng, dtype):
    for shape in [(1, 1, 1, 1, 1), (2, 3, 4, 5, 6), (0, 2, 1, 1, 1)]:
        arr = rng.normal(size=shape).astype(dtype)
        npy_write(arr, tmp_path / "r.npy")
        back = npy_read(tmp_path / "r.npy")
        assert back.dtype == arr.dtype and back.shape == arr.shape
        assert back.tobytes() == arr.tobytes()


def test_npy_read_files_written_by_numpy(tmp_path, rng):
    arr = rng.normal(size=(4, 8, 8))
    np.save(tmp_path / "n.npy", arr)
    back = npy_read(tmp_path / "n.npy")
    assert back.shape == (1, 1, 4, 8, 8)
    np.testing.assert_array_equal(back[0, 0], arr)
    np.save(tmp_path / "b.npy", arr.astype(">f4"))
    back = npy_read(tmp_path / "b.npy")
    np.testing.assert_array_equal(back[0, 0], arr.astype(np.float32))


def test_npy_read_pads_4d(tmp_path):
    np.save(tmp_path / "f.npy", np.zeros((2, 3, 4, 5)))
    assert npy_read(tmp_path / "f.npy").shape == (1, 2, 3, 4, 5)


def test_npy_read_truncated_payload(tmp_path, rng):
    npy_write(rng.normal(size=(1, 1, 2, 3, 3)), tmp_path / "t.npy")
    raw = (tmp_path / "t.npy").read_bytes()
    (tmp_path / "t.npy").write_bytes(raw[:-5])
    with pytest.raises(NpyFormatError):
        npy_read(tmp_path / "t.npy")


def test_npy_read_bad_magic_and_dtype(tmp_path):
    (tmp_path / "x.npy").write_bytes(b"not an npy file at all")
    with pytest.raises(NpyFormatError):
        npy_read(tmp_path / "x.npy")
    np.save(tmp_path / "i.npy", np.zeros((2, 2), dtype=np.int32))
    with pytest.raises(NpyFormatError):
        npy_read(tmp_path / "i.npy")


def test_npy_write_rejects_integer(tmp_path):
    with pytest.raises((TypeError, ValueError)):
        npy_write(np.zeros((1, 1, 1, 1, 1), dtype=np.int64), tmp_path / "i.npy")


def test_npy_read_non_finite(tmp_path):
    arr = np.zeros((1, 1, 1, 1, 3))
    arr[0, 0, 0, 0, 1] = np.nan
    npy_write(arr, tmp_path / "nan.npy")
    with pytest.raises(ValueError):
        npy_read(tmp_path / "nan.npy")
    assert np.isnan(npy_read(tmp_path / "nan.npy", finite_only=False)).sum() == 1
