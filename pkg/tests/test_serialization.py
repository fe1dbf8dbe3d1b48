from pathlib import Path
import struct
import sys

ROOT = Path(__file__).resolve().parents[1]
if str(ROOT) not in sys.path:
    sys.path.insert(0, str(ROOT))

import numpy as np  # noqa: E402
import pytest  # noqa: E402

from app.tensor import TensorFormatError, load_tensors, save_tensors  # noqa: E402
from app.tensor.serialization import MAGIC, decode_tensors, encode_tensors  # noqa: E402


def _sample() -> dict:
    rng = np.random.default_rng(0)
    return {
        "cell1.0.weight": rng.standard_normal((4, 3, 3, 3)).astype(np.float32),
        "cell1.0.bias": np.zeros(4, dtype=np.float32),
        "scalar": np.array(1.5, dtype=np.float32),
    }


def test_save_and_load_preserve_names_shapes_and_bits(tmp_path) -> None:
    path = tmp_path / "nested" / "weights.mntw"
    tensors = _sample()

    save_tensors(path, tensors)
    loaded = load_tensors(path)

    assert list(loaded) == list(tensors)
    for name, value in tensors.items():
        assert loaded[name].dtype == np.float32
        assert loaded[name].shape == value.shape
        assert loaded[name].tobytes() == value.tobytes()


def test_header_layout() -> None:
    data = encode_tensors({"w": np.ones((2, 3), dtype=np.float32)})

    assert data[:4] == MAGIC
    assert struct.unpack("<II", data[4:12]) == (1, 1)
    assert struct.unpack("<H", data[12:14]) == (1,)
    assert data[14:15] == b"w"
    assert len(data) == 4 + 8 + 2 + 1 + 1 + 2 * 4 + 6 * 4


def test_bad_magic_reports_offset_zero(tmp_path) -> None:
    path = tmp_path / "bad.mntw"
    path.write_bytes(b"NOPE" + encode_tensors(_sample())[4:])

    with pytest.raises(TensorFormatError) as excinfo:
        load_tensors(path)

    assert excinfo.value.offset == 0
    assert excinfo.value.path == path


def test_unsupported_version_is_rejected() -> None:
    data = bytearray(encode_tensors(_sample()))
    data[4:8] = struct.pack("<I", 2)

    with pytest.raises(TensorFormatError, match="version 2") as excinfo:
        decode_tensors(bytes(data))

    assert excinfo.value.offset == 4


def test_truncated_file_reports_offset() -> None:
    data = encode_tensors(_sample())

    with pytest.raises(TensorFormatError, match="truncated") as excinfo:
        decode_tensors(data[:-3])

    assert 0 < excinfo.value.offset < len(data)


def test_trailing_bytes_are_rejected() -> None:
    data = encode_tensors(_sample())

    with pytest.raises(TensorFormatError, match="trailing") as excinfo:
        decode_tensors(data + b"\x00\x00")

    assert excinfo.value.offset == len(data)


def test_duplicate_names_are_rejected() -> None:
    single = encode_tensors({"w": np.ones(1, dtype=np.float32)})
    body = single[12:]
    data = MAGIC + struct.pack("<II", 1, 2) + body + body

    with pytest.raises(TensorFormatError, match="duplicate"):
        decode_tensors(data)
