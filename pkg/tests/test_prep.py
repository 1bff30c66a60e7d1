import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from sketchgait import container
from sketchgait.errors import CorruptionError, ParameterError
from sketchgait.modality import stack_channels
from sketchgait.prep import (
    EmptyForeground, ManifestError, SequenceMeta, foreground_of, normalize_frame,
    package_sequence, read_record, scan_manifest, write_record,
)


def write_manifest(tmp_path, obj, files=()):
    for rel in files:
        (tmp_path / rel).parent.mkdir(parents=True, exist_ok=True)
        (tmp_path / rel).write_bytes(b"")
    path = tmp_path / "manifest.json"
    path.write_text(json.dumps(obj))
    return path


def entry(subject="s1", condition="NM", seq="00", n=2, **extra):
    frames = [f"f/{subject}/{condition}/{seq}/{i}.png" for i in range(n)]
    return {"subject": subject, "condition": condition, "view": "090", "seq": seq, "frames": frames, **extra}


# ---- manifest ------------------------------------------------------------

def test_empty_manifest(tmp_path):
    index = scan_manifest(write_manifest(tmp_path, {"entries": []}))
    assert index.entries == []


def test_short_sketch_list_cites_entry(tmp_path):
    e = entry(n=3)
    e["sketches"] = e["frames"][:2]
    with pytest.raises(ManifestError) as info:
        scan_manifest(write_manifest(tmp_path, {"entries": [e]}, e["frames"]), check_files=False)
    assert info.value.pointer == "/entries/0/sketches"
    assert "s1-NM-090-00" in str(info.value)


@pytest.mark.parametrize("obj, pointer", [
    ({"entries": [{"subject": "a", "condition": "NM", "view": "0", "seq": "0", "frames": []}]},
     "/entries/0/frames"),
    ({"entries": [], "protocol": {"exclusion": "sometimes"}}, "/protocol/exclusion"),
    ({"entries": [{"subject": "a", "condition": "NM", "view": "0", "seq": "0", "frames": ["x"], "extra": 1}]},
     "/entries/0"),
    ({"entries": [], "palette": {"x": "head"}}, "/palette"),
])
def test_schema_pointer(tmp_path, obj, pointer):
    with pytest.raises(ManifestError) as info:
        scan_manifest(write_manifest(tmp_path, obj))
    assert info.value.pointer == pointer


def test_duplicate_and_missing(tmp_path):
    e = entry()
    with pytest.raises(ManifestError, match="duplicates"):
        scan_manifest(write_manifest(tmp_path, {"entries": [e, e]}, e["frames"]))
    with pytest.raises(ManifestError, match="missing file") as info:
        scan_manifest(write_manifest(tmp_path, {"entries": [entry(subject="zz")]}))
    assert info.value.pointer == "/entries/0/frames/0"


def test_palette_and_grouping_checks(tmp_path):
    with pytest.raises(ManifestError) as info:
        scan_manifest(write_manifest(tmp_path, {"entries": [], "palette": {"1": "head"},
                                                "grouping": {"a": [1, 2]}}))
    assert info.value.pointer == "/grouping"
    with pytest.raises(ManifestError):
        scan_manifest(write_manifest(tmp_path, {"entries": [], "palette": {"0": "sky"}}))


def test_sorted_and_stable(tmp_path):
    es = [entry("b", "NM"), entry("a", "CL"), entry("a", "BG", seq="01"), entry("a", "BG")]
    files = [f for e in es for f in e["frames"]]
    path = write_manifest(tmp_path, {"entries": es}, files)
    keys = [e.key for e in scan_manifest(path).entries]
    assert keys == sorted(keys)
    assert keys == [e.key for e in scan_manifest(path).entries]


def test_synthetic_manifest_subjects(synthetic_small):
    index = scan_manifest(synthetic_small)
    assert index.subjects == [f"{i:03d}" for i in range(10)]


# ---- normalization -------------------------------------------------------

def person(shape, top, bottom, left, right, seed=0):
    rng = np.random.default_rng(seed)
    mask = np.zeros(shape, dtype=np.uint8)
    mask[top:bottom, left:right] = 1
    mask[top:top + 3, left + 2:right - 2] = 1
    sketch = (rng.random(shape) * mask).astype(np.float64)
    return stack_channels([sketch, mask], names=["sketch", "silhouette"]), mask


def test_centred_full_height_is_plain_resize():
    stack, mask = person((64, 64), 0, 64, 24, 40)
    out = normalize_frame(stack, mask, (64, 64))
    np.testing.assert_array_equal(out.data, stack.data)


@pytest.mark.parametrize("h, shift", [(64, 10), (128, 10), (64, -7)])
def test_shift_equivariance(h, shift):
    stack, mask = person((h, 100), 0, h, 40, 56, seed=3)
    moved = np.roll(stack.data, shift, axis=2)
    mstack = type(stack)(moved, stack.channels)
    a = normalize_frame(stack, mask, (64, 64))
    b = normalize_frame(mstack, np.roll(mask, shift, axis=1), (64, 64))
    assert np.abs(a.data - b.data).max() <= 1 / 255


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31), top=st.integers(0, 30), height=st.integers(10, 60),
       left=st.integers(0, 40), width=st.integers(4, 30))
def test_normalization_idempotent(seed, top, height, left, width):
    stack, mask = person((100, 80), top, top + height, left, left + width, seed)
    once = normalize_frame(stack, mask)
    twice = normalize_frame(once, foreground_of(once))
    assert np.abs(once.data - twice.data).max() <= 1 / 255


def test_empty_mask_skips():
    stack, mask = person((20, 20), 2, 10, 2, 10)
    with pytest.raises(EmptyForeground):
        normalize_frame(stack, np.zeros_like(mask))


def test_silhouette_stays_binary():
    stack, mask = person((37, 23), 3, 30, 5, 15)
    out = normalize_frame(stack, mask, (64, 44))
    assert set(np.unique(out.data[1])) <= {0.0, 1.0}
    assert out.shape == (64, 44)


def test_foreground_priority():
    stack, mask = person((16, 16), 2, 14, 4, 12)
    np.testing.assert_array_equal(foreground_of(stack), mask)
    sketch_only = stack.select(["sketch"])
    np.testing.assert_array_equal(foreground_of(sketch_only), (sketch_only.data[0] >= 0.1).astype(np.uint8))


# ---- container -----------------------------------------------------------

@settings(max_examples=50)
@given(arr=st.one_of(
    arrays(np.float32, st.lists(st.integers(0, 5), min_size=0, max_size=4).map(tuple),
           elements=st.floats(-1e6, 1e6, width=32)),
    arrays(np.uint8, st.lists(st.integers(0, 5), min_size=0, max_size=4).map(tuple)),
))
def test_container_roundtrip(arr):
    back = container.decode(container.encode(arr))
    assert back.dtype == arr.dtype and back.shape == arr.shape
    assert back.tobytes() == arr.tobytes()


def test_container_layout():
    blob = container.encode(np.arange(6, dtype=np.uint8).reshape(2, 3))
    assert blob[:8] == b"GSTK0001"
    assert blob[8:10] == bytes([1, 2])
    assert blob[10:26] == (2).to_bytes(8, "little") + (3).to_bytes(8, "little")
    assert blob[26:32] == bytes(range(6))
    assert len(blob) == 36


def test_container_rejects_other_dtypes():
    with pytest.raises(ParameterError):
        container.encode(np.zeros(3, dtype=np.float64))


@pytest.mark.parametrize("damage", ["magic", "crc", "payload", "truncate", "extend"])
def test_container_corruption(damage):
    blob = bytearray(container.encode(np.random.default_rng(0).random((4, 5)).astype(np.float32)))
    if damage == "magic":
        blob[0] ^= 1
    elif damage == "crc":
        blob[-1] ^= 0x80
    elif damage == "payload":
        blob[40] ^= 0x01
    elif damage == "truncate":
        blob = blob[:-7]
    else:
        blob += b"\0"
    with pytest.raises(CorruptionError):
        container.decode(bytes(blob))


@pytest.mark.parametrize("n", [1, 30])
def test_record_roundtrip(tmp_path, n):
    stacks = []
    for i in range(n):
        stack, mask = person((40, 30), 2, 38, 8, 20, seed=i)
        stacks.append(normalize_frame(stack, mask))
    meta = SequenceMeta("007", "NM", "090", "01", tuple(f"{i}.png" for i in range(n)))
    rec = package_sequence(meta, stacks)
    write_record(tmp_path / "r.gstk", rec)
    back = read_record(tmp_path / "r.gstk")
    assert back.meta == meta
    assert back.channels == rec.channels
    assert back.array().tobytes() == rec.array().tobytes()


def test_truncated_record_never_partial(tmp_path):
    stack, mask = person((40, 30), 2, 38, 8, 20)
    rec = package_sequence(SequenceMeta("a", "NM", "0", "0", ("x",)), [normalize_frame(stack, mask)] * 3)
    path = tmp_path / "r.gstk"
    write_record(path, rec)
    path.write_bytes(path.read_bytes()[:100])
    with pytest.raises(CorruptionError):
        read_record(path)


def test_package_rejects_mixed_layout():
    a, ma = person((40, 30), 2, 38, 8, 20)
    with pytest.raises(ParameterError):
        package_sequence(SequenceMeta("a", "NM", "0", "0"), [normalize_frame(a, ma), normalize_frame(a.select(["sketch"]), ma)])
