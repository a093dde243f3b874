import numpy as np
import pytest

from cvthead.errors import FormatError
from cvthead.numerics import load_container, save_container


@pytest.fixture
def entries():
    rng = np.random.default_rng(0)
    return {
        "alpha": rng.normal(size=(3, 4)).astype(np.float32),
        "beta.w": rng.normal(size=(8,)).astype(np.float32),
        "scalarish": np.array(2.5, dtype=np.float32),
    }


def test_round_trip_bitwise(tmp_path, entries):
    path = tmp_path / "w.cvth"
    save_container(path, entries)
    back = load_container(path)
    assert list(back.keys()) == list(entries.keys())
    for name, arr in entries.items():
        assert back[name].dtype == np.float32
        assert np.array_equal(back[name], arr)
        assert back[name].tobytes() == arr.tobytes()


def test_truncated_file_rejected(tmp_path, entries):
    path = tmp_path / "w.cvth"
    save_container(path, entries)
    raw = path.read_bytes()
    (tmp_path / "cut.cvth").write_bytes(raw[: len(raw) - 7])
    with pytest.raises(FormatError, match="truncated"):
        load_container(tmp_path / "cut.cvth")


def test_bad_magic_rejected(tmp_path, entries):
    path = tmp_path / "w.cvth"
    save_container(path, entries)
    raw = bytearray(path.read_bytes())
    raw[:4] = b"NOPE"
    path.write_bytes(bytes(raw))
    with pytest.raises(FormatError, match="magic"):
        load_container(path)


def test_bad_version_rejected(tmp_path, entries):
    path = tmp_path / "w.cvth"
    save_container(path, entries)
    raw = bytearray(path.read_bytes())
    raw[4] = 99
    path.write_bytes(bytes(raw))
    with pytest.raises(FormatError, match="version"):
        load_container(path)


def test_trailing_bytes_rejected(tmp_path, entries):
    path = tmp_path / "w.cvth"
    save_container(path, entries)
    path.write_bytes(path.read_bytes() + b"xx")
    with pytest.raises(FormatError, match="trailing"):
        load_container(path)


def test_error_names_offending_entry(tmp_path, entries):
    path = tmp_path / "w.cvth"
    save_container(path, entries)
    raw = path.read_bytes()
    # drop the final payload bytes of the last entry
    (tmp_path / "cut.cvth").write_bytes(raw[:-2])
    with pytest.raises(FormatError, match="scalarish"):
        load_container(tmp_path / "cut.cvth")
