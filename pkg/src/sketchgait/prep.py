"""Dataset manifests, canonical gait-frame normalization and sequence records."""

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import jsonschema
import numpy as np

from . import container
from .errors import DataError, ParameterError
from .modality import SILHOUETTE, ModalityStack, as_mask, check_grouping

MODALITY_LISTS = ("masks", "parsing", "sketches")

MANIFEST_SCHEMA = {
    "type": "object",
    "required": ["entries"],
    "additionalProperties": False,
    "properties": {
        "palette": {
            "type": "object",
            "patternProperties": {"^[0-9]+$": {"type": "string"}},
            "additionalProperties": False,
        },
        "grouping": {
            "type": "object",
            "additionalProperties": {"type": "array", "items": {"type": "integer", "minimum": 1}},
        },
        "protocol": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "gallery_conditions": {"type": "array", "items": {"type": "string"}},
                "probe_conditions": {"type": "array", "items": {"type": "string"}},
                "train_subjects": {"type": "array", "items": {"type": "string"}},
                "train_conditions": {"type": "array", "items": {"type": "string"}},
                "exclusion": {"enum": ["none", "same-sequence", "same-view"]},
            },
        },
        "entries": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["subject", "condition", "view", "seq", "frames"],
                "additionalProperties": False,
                "properties": {
                    "subject": {"type": "string", "minLength": 1},
                    "condition": {"type": "string", "minLength": 1},
                    "view": {"type": "string"},
                    "seq": {"type": ["string", "integer"]},
                    "frames": {"type": "array", "items": {"type": "string"}, "minItems": 1},
                    **{k: {"type": "array", "items": {"type": "string"}} for k in MODALITY_LISTS},
                },
            },
        },
    },
}


def _pointer(parts) -> str:
    return "/" + "/".join(str(p).replace("~", "~0").replace("/", "~1") for p in parts) if parts else ""


class ManifestError(DataError):
    def __init__(self, pointer: str, message: str):
        super().__init__(f"{pointer or '/'}: {message}")
        self.pointer = pointer


class EmptyForeground(DataError):
    """Frame-skip signal: the foreground mask has no pixels."""


@dataclass(frozen=True)
class Protocol:
    gallery_conditions: tuple = ()
    probe_conditions: tuple = ()
    train_subjects: Optional[tuple] = None
    train_conditions: Optional[tuple] = None
    exclusion: str = "same-sequence"

    def to_json(self) -> dict:
        out = {
            "gallery_conditions": list(self.gallery_conditions),
            "probe_conditions": list(self.probe_conditions),
            "exclusion": self.exclusion,
        }
        if self.train_subjects is not None:
            out["train_subjects"] = list(self.train_subjects)
        if self.train_conditions is not None:
            out["train_conditions"] = list(self.train_conditions)
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "Protocol":
        def opt(key):
            return tuple(obj[key]) if key in obj else None

        return cls(
            tuple(obj.get("gallery_conditions", ())),
            tuple(obj.get("probe_conditions", ())),
            opt("train_subjects"),
            opt("train_conditions"),
            obj.get("exclusion", "same-sequence"),
        )


@dataclass(frozen=True)
class SequenceMeta:
    subject: str
    condition: str
    view: str
    seq: str
    frames: tuple = ()
    modalities: dict = field(default_factory=dict, compare=True, hash=False)

    @property
    def key(self) -> tuple:
        return (self.subject, self.condition, self.view, self.seq)

    @property
    def name(self) -> str:
        return "-".join(self.key)

    def to_json(self) -> dict:
        return {
            "subject": self.subject,
            "condition": self.condition,
            "view": self.view,
            "seq": self.seq,
            "frames": list(self.frames),
            **{k: list(v) for k, v in sorted(self.modalities.items())},
        }

    @classmethod
    def from_json(cls, obj: dict) -> "SequenceMeta":
        mods = {k: tuple(obj[k]) for k in MODALITY_LISTS if k in obj}
        return cls(str(obj["subject"]), str(obj["condition"]), str(obj["view"]),
                   str(obj["seq"]), tuple(obj.get("frames", ())), mods)


@dataclass
class DatasetIndex:
    entries: list
    palette: dict
    grouping: dict
    protocol: Protocol
    root: Path = Path(".")

    def resolve(self, rel: str) -> Path:
        return self.root / rel

    @property
    def subjects(self):
        return sorted({e.subject for e in self.entries})


def scan_manifest(path, check_files: bool = True) -> DatasetIndex:
    """Load and fully validate a JSON manifest; entries come back sorted by key."""
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except FileNotFoundError as exc:
        raise ManifestError("", f"manifest {path} does not exist") from exc
    except json.JSONDecodeError as exc:
        raise ManifestError("", f"invalid JSON: {exc}") from exc

    err = jsonschema.exceptions.best_match(jsonschema.Draft7Validator(MANIFEST_SCHEMA).iter_errors(raw))
    if err is not None:
        raise ManifestError(_pointer(err.absolute_path), err.message)

    palette = {int(k): v for k, v in raw.get("palette", {}).items()}
    palette.setdefault(0, "background")
    if palette[0] != "background":
        raise ManifestError("/palette/0", "label 0 is reserved for background")
    if "grouping" in raw:
        try:
            grouping = check_grouping(raw["grouping"], palette)
        except ParameterError as exc:
            raise ManifestError("/grouping", str(exc)) from exc
    else:
        grouping = {name: [label] for label, name in sorted(palette.items()) if label != 0}
    protocol = Protocol.from_json(raw.get("protocol", {}))

    root = path.parent
    entries, seen = [], {}
    for i, obj in enumerate(raw["entries"]):
        meta = SequenceMeta.from_json(obj)
        where = f"/entries/{i}"
        n = len(meta.frames)
        for kind, paths in meta.modalities.items():
            if len(paths) != n:
                raise ManifestError(f"{where}/{kind}",
                                    f"entry {meta.name} lists {len(paths)} {kind} for {n} frames")
        if meta.key in seen:
            raise ManifestError(where, f"entry {meta.name} duplicates /entries/{seen[meta.key]}")
        seen[meta.key] = i
        if check_files:
            for kind, paths in [("frames", meta.frames), *meta.modalities.items()]:
                for j, rel in enumerate(paths):
                    if not (root / rel).is_file():
                        raise ManifestError(f"{where}/{kind}/{j}", f"missing file {rel}")
        entries.append(meta)
    entries.sort(key=lambda e: e.key)
    return DatasetIndex(entries, palette, grouping, protocol, root)


def index_to_json(index: DatasetIndex) -> dict:
    return {
        "palette": {str(k): v for k, v in sorted(index.palette.items())},
        "grouping": index.grouping,
        "protocol": index.protocol.to_json(),
        "entries": [e.to_json() for e in index.entries],
    }


def _resample_axis(data: np.ndarray, positions: np.ndarray, axis: int) -> np.ndarray:
    """Linear interpolation along ``axis`` at fractional indices, clamped to the edges."""
    n = data.shape[axis]
    pos = np.clip(positions, 0.0, n - 1)
    i0 = np.floor(pos).astype(np.int64)
    i1 = np.minimum(i0 + 1, n - 1)
    t = pos - i0
    shape = [1] * data.ndim
    shape[axis] = -1
    t = t.reshape(shape)
    return np.take(data, i0, axis=axis) * (1.0 - t) + np.take(data, i1, axis=axis) * t


def normalize_frame(stack: ModalityStack, fg, target=(64, 64)) -> ModalityStack:
    """Crop to the foreground rows, scale to the target height and centre horizontally.

    Scaling keeps the aspect ratio. The centring shift is a whole number of
    output pixels, which makes the operation idempotent. Raises
    ``EmptyForeground`` when ``fg`` is empty.
    """
    out_h, out_w = target
    mask = as_mask(fg)
    if mask.shape != stack.shape:
        raise ParameterError(f"mask {mask.shape} does not match stack {stack.shape}")
    rows = np.flatnonzero(mask.any(axis=1))
    if rows.size == 0:
        raise EmptyForeground("empty foreground mask")
    r0, r1 = rows[0], rows[-1]
    box_h = r1 - r0 + 1
    scale = out_h / box_h

    data = stack.data[:, r0:r1 + 1, :].astype(np.float64)
    m = mask[r0:r1 + 1, :].astype(np.float64)
    ys = (np.arange(out_h) + 0.5) / scale - 0.5
    xs = (np.arange(int(math.ceil(stack.shape[1] * scale))) + 0.5) / scale - 0.5
    data = _resample_axis(_resample_axis(data, ys, 1), xs, 2)
    m = _resample_axis(_resample_axis(m, ys, 0), xs, 1)

    cols = np.flatnonzero((m >= 0.5).any(axis=0))
    weights = (m >= 0.5).sum(axis=0) if cols.size else m.sum(axis=0)
    if weights.sum() <= 0:
        raise EmptyForeground("foreground vanished after resampling")
    com = float(np.dot(np.arange(weights.size), weights) / weights.sum())
    start = int(math.floor(com + 0.5)) - out_w // 2

    out = np.zeros((data.shape[0], out_h, out_w))
    lo, hi = max(start, 0), min(start + out_w, data.shape[2])
    if hi > lo:
        out[:, :, lo - start:hi - start] = data[:, :, lo:hi]
    for i, (_, kind) in enumerate(stack.channels):
        if kind == SILHOUETTE:
            out[i] = (out[i] >= 0.5).astype(np.float64)
    return ModalityStack(np.clip(out, 0.0, 1.0), stack.channels)


def foreground_of(stack: ModalityStack, sketch_threshold: float = 0.1) -> np.ndarray:
    """Silhouette channel, else union of parsing planes, else thresholded sketch."""
    sil = stack.planes_of_kind(SILHOUETTE)
    if sil:
        return (stack.select(sil[:1]).data[0] >= 0.5).astype(np.uint8)
    parts = stack.planes_of_kind("parsing-onehot-group")
    if parts:
        return (stack.select(parts).data.max(axis=0) >= 0.5).astype(np.uint8)
    return (stack.data[0] >= sketch_threshold).astype(np.uint8)


@dataclass
class SequenceRecord:
    meta: SequenceMeta
    frames: list

    @property
    def channels(self):
        return self.frames[0].channels

    def array(self) -> np.ndarray:
        return np.stack([f.data for f in self.frames])


def package_sequence(meta: SequenceMeta, stacks) -> SequenceRecord:
    stacks = list(stacks)
    if not stacks:
        raise ParameterError(f"sequence {meta.name} has no frames")
    first = stacks[0]
    for i, s in enumerate(stacks[1:], 1):
        if s.channels != first.channels or s.shape != first.shape:
            raise ParameterError(f"frame {i} of {meta.name} differs in layout from frame 0")
    return SequenceRecord(meta, stacks)


def write_record(path, record: SequenceRecord) -> None:
    """Write ``<path>`` (tensor container) and ``<path>.json`` (metadata sidecar)."""
    path = Path(path)
    container.save(path, record.array())
    sidecar = {
        "meta": record.meta.to_json(),
        "channels": [list(c) for c in record.channels],
        "frames": len(record.frames),
    }
    Path(str(path) + ".json").write_text(json.dumps(sidecar, indent=1, sort_keys=True))


def read_record(path) -> SequenceRecord:
    path = Path(path)
    arr = container.load(path)
    try:
        sidecar = json.loads(Path(str(path) + ".json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"record sidecar for {path} unreadable: {exc}") from exc
    channels = tuple(tuple(c) for c in sidecar["channels"])
    if arr.ndim != 4 or arr.shape[0] != sidecar["frames"] or arr.shape[1] != len(channels):
        raise DataError(f"record {path} shape {arr.shape} disagrees with its sidecar")
    meta = SequenceMeta.from_json(sidecar["meta"])
    return SequenceRecord(meta, [ModalityStack(a, channels) for a in arr])
