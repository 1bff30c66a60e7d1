"""Modalities derived from RGB frames, foreground masks and parsing label maps."""

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import edges
from .errors import DataError, ParameterError

SKETCH = "sketch"
SILHOUETTE = "silhouette"
PARSING_GROUP = "parsing-onehot-group"
KINDS = (SKETCH, SILHOUETTE, PARSING_GROUP)

DEFAULT_PALETTE = {
    0: "background",
    1: "head",
    2: "torso",
    3: "left_arm",
    4: "right_arm",
    5: "left_leg",
    6: "right_leg",
    7: "bag",
}
DEFAULT_GROUPING = {
    "head": [1],
    "torso": [2, 7],
    "arms": [3, 4],
    "legs": [5, 6],
}


@dataclass(frozen=True)
class DetectorSpec:
    kind: str = "sobel"
    sigma: float = 1.4
    low: float = 0.1
    high: float = 0.3
    hook: Optional[edges.ExternalHookConfig] = None

    def __post_init__(self):
        if self.kind not in ("sobel", "canny", "external"):
            raise ParameterError(f"unknown detector {self.kind!r}")
        if self.kind == "external" and self.hook is None:
            raise ParameterError("external detector needs a hook")


@dataclass(frozen=True)
class ModalityStack:
    """Planar channels ``(C, H, W)`` stored as float32, plus ``(name, kind)`` per channel."""

    data: np.ndarray
    channels: tuple = field(default=())

    def __post_init__(self):
        data = np.ascontiguousarray(self.data, dtype=np.float32)
        channels = tuple((str(n), str(k)) for n, k in self.channels)
        if data.ndim != 3:
            raise ParameterError(f"stack data must be (C, H, W), got shape {data.shape}")
        if data.shape[0] != len(channels):
            raise ParameterError(f"{data.shape[0]} planes but {len(channels)} channel descriptors")
        for i, (name, kind) in enumerate(channels):
            if kind not in KINDS:
                raise ParameterError(f"channel {name!r} has unknown kind {kind!r}")
            plane = data[i]
            if not np.all(np.isfinite(plane)) or plane.min(initial=0) < 0 or plane.max(initial=0) > 1:
                raise ParameterError(f"channel {name!r} values must lie in [0, 1]")
            if kind == SILHOUETTE and not np.all((plane == 0) | (plane == 1)):
                raise ParameterError(f"silhouette channel {name!r} must be binary")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "channels", channels)

    @property
    def shape(self):
        return self.data.shape[1:]

    @property
    def names(self):
        return [n for n, _ in self.channels]

    def select(self, names) -> "ModalityStack":
        idx = [self.names.index(n) for n in names]
        return ModalityStack(self.data[idx], tuple(self.channels[i] for i in idx))

    def planes_of_kind(self, kind):
        return [n for n, k in self.channels if k == kind]


def as_frame(frame) -> np.ndarray:
    arr = np.asarray(frame, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ParameterError(f"frame must have shape (H, W, 3), got {arr.shape}")
    if not np.all(np.isfinite(arr)) or arr.min(initial=0) < 0 or arr.max(initial=0) > 1:
        raise ParameterError("frame values must be finite and in [0, 1]")
    return arr


def as_mask(mask) -> np.ndarray:
    arr = np.asarray(mask)
    if arr.ndim != 2:
        raise ParameterError(f"mask must be 2-D, got shape {arr.shape}")
    if not np.all((arr == 0) | (arr == 1)):
        raise ParameterError("mask must be binary")
    return arr.astype(np.uint8)


def as_labels(lm) -> np.ndarray:
    arr = np.asarray(lm)
    if arr.ndim != 2:
        raise ParameterError(f"label map must be 2-D, got shape {arr.shape}")
    if not np.issubdtype(arr.dtype, np.integer):
        if not np.all(arr == np.round(arr)):
            raise DataError("label map must hold integers")
        arr = arr.astype(np.int64)
    if arr.size and arr.min() < 0:
        raise DataError("label map holds negative labels")
    return arr.astype(np.int64)


def mask_from_parsing(lm) -> np.ndarray:
    return (as_labels(lm) != 0).astype(np.uint8)


def parsing_to_silhouette(lm) -> np.ndarray:
    """Collapse a parsing map to its binary foreground."""
    return mask_from_parsing(lm)


def masked_foreground(frame, mask) -> np.ndarray:
    f = as_frame(frame)
    m = as_mask(mask)
    if f.shape[:2] != m.shape:
        raise ParameterError(f"frame {f.shape[:2]} and mask {m.shape} dimensions differ")
    return f * m[:, :, None]


def build_sketch(frame, mask, detector: DetectorSpec = DetectorSpec()) -> np.ndarray:
    m = as_mask(mask)
    fg = masked_foreground(frame, m)
    if detector.kind == "sobel":
        sketch = edges.sobel_sketch(edges.luminance(fg))
    elif detector.kind == "canny":
        sketch = edges.canny(edges.luminance(fg), detector.sigma, detector.low, detector.high)
    else:
        sketch = edges.run_external_detector(fg, detector.hook)
    # re-mask: wide detector supports bleed outside the body
    return sketch * m


def parsing_to_edge(lm, include_outer: bool = True) -> np.ndarray:
    """1 where a 4-neighbour carries a different label.

    With ``include_outer=False`` transitions touching background are ignored,
    leaving only internal part boundaries.
    """
    arr = as_labels(lm)
    out = np.zeros(arr.shape, dtype=bool)

    def mark(a, b, oa, ob):
        diff = a != b
        if not include_outer:
            diff &= (a != 0) & (b != 0)
        oa |= diff
        ob |= diff

    mark(arr[:, :-1], arr[:, 1:], out[:, :-1], out[:, 1:])
    mark(arr[:-1, :], arr[1:, :], out[:-1, :], out[1:, :])
    return out.astype(np.float64)


def stack_channels(maps, names=None) -> ModalityStack:
    """Stack rasters along a new leading channel axis.

    Integer or boolean rasters are taken as silhouettes, float rasters as
    sketches. ``names`` defaults to the kind.
    """
    maps = list(maps)
    if not maps:
        raise ParameterError("cannot stack an empty list of maps")
    shape = np.shape(maps[0])
    planes, channels = [], []
    for i, m in enumerate(maps):
        arr = np.asarray(m)
        if arr.shape != shape or arr.ndim != 2:
            raise ParameterError(f"map {i} has shape {arr.shape}, expected {shape}")
        kind = SKETCH if np.issubdtype(arr.dtype, np.floating) else SILHOUETTE
        name = names[i] if names is not None else kind
        planes.append(arr.astype(np.float32))
        channels.append((name, kind))
    return ModalityStack(np.stack(planes), tuple(channels))


def check_grouping(groups, palette=None) -> dict:
    groups = {str(g): [int(v) for v in labels] for g, labels in groups.items()}
    seen = {}
    for g, labels in groups.items():
        for v in labels:
            if v == 0:
                raise ParameterError(f"group {g!r} contains the background label 0")
            if v in seen:
                raise ParameterError(f"label {v} is in both {seen[v]!r} and {g!r}")
            if palette is not None and v not in palette:
                raise ParameterError(f"group {g!r} references label {v} missing from the palette")
            seen[v] = g
    if palette is not None:
        missing = sorted(set(palette) - set(seen) - {0})
        if missing:
            raise ParameterError(f"palette labels {missing} are not assigned to any group")
    return groups


def parsing_to_stack(lm, groups=None, palette=None) -> ModalityStack:
    """One binary plane per label group, in grouping order."""
    groups = check_grouping(DEFAULT_GROUPING if groups is None else groups, palette)
    arr = as_labels(lm)
    allowed = {0} | set(palette or ()) | {v for labels in groups.values() for v in labels}
    bad = ~np.isin(arr, sorted(allowed))
    if bad.any():
        r, c = np.argwhere(bad)[0]
        raise DataError(f"pixel (row={r}, col={c}) has label {arr[r, c]} outside the palette")
    planes = [np.isin(arr, labels).astype(np.float32) for labels in groups.values()]
    return ModalityStack(np.stack(planes), tuple((g, PARSING_GROUP) for g in groups))
