"""Multi-branch sequence descriptors: filter-bank stages, Stage-1 fusion, temporal
max pooling, horizontal pyramid pooling and per-strip projection.

Feature maps are float64 arrays shaped ``(C, h, w)``.
"""

import json
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import container
from .errors import DataError, ParameterError
from .modality import PARSING_GROUP, SILHOUETTE, SKETCH
from .prep import SequenceMeta

BRANCHES = ("ske", "par", "fus")
MODALITY_SETS = {
    "sketch": ("ske",),
    "parsing": ("par",),
    "sketch+parsing": ("ske", "par", "fus"),
    "sketch+silhouette+parsing": ("ske", "par", "fus"),
}


@dataclass(frozen=True)
class DescriptorConfig:
    modality_set: str = "sketch+parsing"
    branches: Optional[tuple] = None
    stages: int = 2
    orientations: int = 8
    levels: tuple = (1, 2, 4, 8)
    embed_dim: int = 32
    fusion: str = "add"

    def __post_init__(self):
        if self.modality_set not in MODALITY_SETS:
            raise ParameterError(f"unknown modality set {self.modality_set!r}")
        if self.fusion not in ("add", "concat"):
            raise ParameterError(f"unknown fusion operator {self.fusion!r}")
        for b in self.active_branches:
            if b not in BRANCHES:
                raise ParameterError(f"unknown branch {b!r}")
        if "fus" in self.active_branches and self.modality_set in ("sketch", "parsing"):
            raise ParameterError("the fusion branch needs both sketch and parsing inputs")
        if self.stages < 1 or self.orientations < 2:
            raise ParameterError("need stages >= 1 and orientations >= 2")

    @property
    def active_branches(self) -> tuple:
        return tuple(self.branches) if self.branches is not None else MODALITY_SETS[self.modality_set]


@dataclass(frozen=True)
class PartDescriptor:
    strips: np.ndarray
    levels: tuple

    def __post_init__(self):
        if self.strips.shape[0] != sum(self.levels):
            raise ParameterError(f"{self.strips.shape[0]} strips for levels {self.levels}")


@dataclass(frozen=True)
class Embedding:
    data: np.ndarray
    spans: tuple = field(default=())

    def span(self, tag: str) -> np.ndarray:
        for t, lo, hi in self.spans:
            if t == tag:
                return self.data[lo:hi]
        raise KeyError(tag)


@lru_cache(maxsize=None)
def gabor_bank(orientations: int, size: int = 5, sigma: float = 1.2, wavelength: float = 4.0) -> np.ndarray:
    """Odd (sine-phase) Gabor kernels ``(K, size, size)``, each with unit L1 norm.

    Kernel ``k`` has its carrier along angle ``k*pi/K`` measured from the
    column axis towards increasing rows, so kernel 0 responds to vertical edges.
    """
    r = size // 2
    y, x = np.mgrid[-r:r + 1, -r:r + 1].astype(np.float64)
    bank = []
    for k in range(orientations):
        theta = k * np.pi / orientations
        along = x * np.cos(theta) + y * np.sin(theta)
        across = -x * np.sin(theta) + y * np.cos(theta)
        g = np.exp(-(along ** 2 + across ** 2) / (2 * sigma ** 2)) * np.sin(2 * np.pi * along / wavelength)
        bank.append(g / np.abs(g).sum())
    out = np.stack(bank)
    out.setflags(write=False)
    return out


def oriented_responses(planes: np.ndarray, orientations: int) -> np.ndarray:
    """Correlate every plane with every kernel: ``(P, h, w) -> (P*K, h, w)``, plane-major."""
    bank = gabor_bank(orientations)
    r = bank.shape[1] // 2
    p, h, w = planes.shape
    padded = np.pad(planes, ((0, 0), (r, r), (r, r)), mode="reflect")
    win = sliding_window_view(padded, bank.shape[1:], axis=(1, 2))
    out = win.reshape(p * h * w, -1) @ bank.reshape(orientations, -1).T
    return out.reshape(p, h, w, orientations).transpose(0, 3, 1, 2).reshape(p * orientations, h, w)


def max_downsample(fm: np.ndarray) -> np.ndarray:
    c, h, w = fm.shape
    fm = fm[:, : h - h % 2, : w - w % 2]
    return fm.reshape(c, h // 2, 2, w // 2, 2).max(axis=(2, 4))


def encode_stage(fm: np.ndarray, orientations: int) -> np.ndarray:
    return max_downsample(np.abs(oriented_responses(fm, orientations)))


def _check_encodable(shape, stages):
    need = 4 * 2 ** stages
    if shape[-2] < need or shape[-1] < need:
        raise ParameterError(f"input {shape[-2]}x{shape[-1]} too small for {stages} stages (need {need})")


def filter_bank_encode(planes, stages: int = 2, orientations: int = 8) -> np.ndarray:
    """Deterministic stand-in for a convolutional backbone.

    Each stage: oriented odd-Gabor responses per input plane, absolute value,
    2x2 max downsampling. Output has ``P * K**stages`` channels.
    """
    fm = np.asarray(getattr(planes, "data", planes), dtype=np.float64)
    if stages < 1 or orientations < 2:
        raise ParameterError("need stages >= 1 and orientations >= 2")
    _check_encodable(fm.shape, stages)
    for _ in range(stages):
        fm = encode_stage(fm, orientations)
    return fm


def _same_dims(a, b, what):
    if a.shape != b.shape:
        raise ParameterError(f"{what}: feature maps {a.shape} and {b.shape} differ")


def fuse_add(a, b) -> np.ndarray:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    _same_dims(a, b, "fuse_add")
    return a + b


def fuse_concat(a, b) -> np.ndarray:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape[1:] != b.shape[1:]:
        raise ParameterError(f"fuse_concat: spatial dims {a.shape[1:]} and {b.shape[1:]} differ")
    return np.concatenate([a, b])


def collapse_planes(fm: np.ndarray, orientations: int) -> np.ndarray:
    """Sum rectified Stage-1 responses over input planes, one channel per orientation."""
    c, h, w = fm.shape
    return fm.reshape(c // orientations, orientations, h, w).sum(axis=0)


def temporal_max_pool(frames) -> np.ndarray:
    frames = [np.asarray(f, dtype=np.float64) for f in frames]
    if not frames:
        raise ParameterError("temporal_max_pool needs at least one frame")
    out = frames[0].copy()
    for f in frames[1:]:
        _same_dims(out, f, "temporal_max_pool")
        np.maximum(out, f, out=out)
    return out


def strip_bounds(h: int, n: int):
    base = h // n
    return [(i * base, h if i == n - 1 else (i + 1) * base) for i in range(n)]


def hpp(fm, levels=(1, 2, 4, 8)) -> PartDescriptor:
    """Horizontal pyramid pooling; each strip is max + mean over its rows and all columns."""
    fm = np.asarray(fm, dtype=np.float64)
    levels = tuple(int(v) for v in levels)
    if not levels or min(levels) < 1:
        raise ParameterError(f"invalid levels {levels}")
    if fm.shape[1] < max(levels):
        raise ParameterError(f"height {fm.shape[1]} is below the finest level {max(levels)}")
    strips = []
    for n in levels:
        for lo, hi in strip_bounds(fm.shape[1], n):
            part = fm[:, lo:hi, :]
            strips.append(part.max(axis=(1, 2)) + part.mean(axis=(1, 2)))
    return PartDescriptor(np.stack(strips), levels)


def identity_projection(n_strips: int, channels: int, dim: int) -> np.ndarray:
    """Untrained per-strip maps: the first ``dim`` rows of the identity."""
    return np.repeat(np.eye(dim, channels)[None], n_strips, axis=0)


def branch_embed(pd: PartDescriptor, proj) -> np.ndarray:
    proj = np.asarray(proj, dtype=np.float64)
    s, c = pd.strips.shape
    if proj.ndim != 3 or proj.shape[0] != s or proj.shape[2] != c:
        raise ParameterError(f"projection shape {proj.shape} incompatible with {s} strips of {c} channels")
    return np.einsum("sdc,sc->sd", proj, pd.strips).reshape(-1)


def concat_embeddings(parts) -> Embedding:
    """Concatenate branch embeddings in the given order; ``parts`` maps tag -> vector."""
    spans, chunks, pos = [], [], 0
    for tag, vec in parts.items():
        vec = np.asarray(vec, dtype=np.float64).reshape(-1)
        spans.append((tag, pos, pos + vec.size))
        chunks.append(vec)
        pos += vec.size
    data = np.concatenate(chunks) if chunks else np.zeros(0)
    return Embedding(data, tuple(spans))


def branch_inputs(stack, cfg: DescriptorConfig):
    """Split a normalized frame into the sketch-branch and parsing-branch planes."""
    sketch = [n for n, k in stack.channels if k == SKETCH]
    if cfg.modality_set == "sketch+silhouette+parsing":
        sketch += [n for n, k in stack.channels if k == SILHOUETTE][:1]
    parsing = [n for n, k in stack.channels if k == PARSING_GROUP]
    branches = cfg.active_branches
    if ("ske" in branches or "fus" in branches) and not sketch:
        raise ParameterError("record has no sketch channel")
    if ("par" in branches or "fus" in branches) and not parsing:
        raise ParameterError("record has no parsing channels")
    if cfg.modality_set == "sketch+silhouette+parsing" and len(sketch) < 2:
        raise ParameterError("record has no silhouette channel to stack onto the sketch")
    ske = stack.select(sketch).data.astype(np.float64) if sketch else None
    par = stack.select(parsing).data.astype(np.float64) if parsing else None
    return ske, par


def frame_features(stack, cfg: DescriptorConfig) -> dict:
    """Final-stage feature map of every active branch for one frame."""
    branches = cfg.active_branches
    k = cfg.orientations
    ske, par = branch_inputs(stack, cfg)
    _check_encodable(stack.data.shape, cfg.stages)
    first = {}
    if ske is not None and ("ske" in branches or "fus" in branches):
        first["ske"] = encode_stage(ske, k)
    if par is not None and ("par" in branches or "fus" in branches):
        first["par"] = encode_stage(par, k)
    if "fus" in branches:
        a, b = collapse_planes(first["ske"], k), collapse_planes(first["par"], k)
        first["fus"] = fuse_add(a, b) if cfg.fusion == "add" else fuse_concat(a, b)
    out = {}
    for b in branches:
        fm = first[b]
        for _ in range(cfg.stages - 1):
            fm = encode_stage(fm, k)
        out[b] = fm
    return out


def sequence_parts(record, cfg: DescriptorConfig) -> dict:
    """Per-branch HPP descriptors of a whole sequence (temporal max over frames)."""
    if not record.frames:
        raise ParameterError(f"sequence {record.meta.name} has no frames")
    per_frame = [frame_features(stack, cfg) for stack in record.frames]
    return {b: hpp(temporal_max_pool([f[b] for f in per_frame]), cfg.levels)
            for b in cfg.active_branches}


def sequence_descriptor(record, cfg: DescriptorConfig = DescriptorConfig(), projections=None) -> Embedding:
    """Final embedding ske | par | fus; ``projections`` maps branch -> (strips, d, C)."""
    parts = sequence_parts(record, cfg)
    embedded = {}
    for b, pd in parts.items():
        proj = None if projections is None else projections.get(b)
        if proj is None:
            proj = identity_projection(pd.strips.shape[0], pd.strips.shape[1], cfg.embed_dim)
        embedded[b] = branch_embed(pd, proj)
    return concat_embeddings(embedded)


def config_to_json(cfg: DescriptorConfig) -> dict:
    out = asdict(cfg)
    out["levels"] = list(cfg.levels)
    out["branches"] = list(cfg.active_branches)
    return out


def config_from_json(obj: dict) -> DescriptorConfig:
    obj = dict(obj)
    obj["levels"] = tuple(obj.get("levels", (1, 2, 4, 8)))
    if obj.get("branches") is not None:
        obj["branches"] = tuple(obj["branches"])
    return DescriptorConfig(**obj)


@dataclass
class DescriptorSet:
    """Per-branch strip descriptors ``(N, S, C)`` for N sequences, in ``metas`` order."""

    metas: list
    parts: dict
    config: DescriptorConfig

    def layout(self) -> dict:
        return {b: {"strips": int(a.shape[1]), "channels": int(a.shape[2])} for b, a in self.parts.items()}

    def raw_embeddings(self) -> np.ndarray:
        """Embeddings under the untrained identity-truncated projections."""
        d = self.config.embed_dim
        cols = []
        for a in self.parts.values():
            proj = identity_projection(a.shape[1], a.shape[2], d)
            cols.append(np.einsum("sdc,nsc->nsd", proj, a.astype(np.float64)).reshape(a.shape[0], -1))
        return np.concatenate(cols, axis=1)

    def subset(self, branches) -> "DescriptorSet":
        cfg = DescriptorConfig(**{**asdict(self.config), "branches": tuple(branches)})
        return DescriptorSet(self.metas, {b: self.parts[b] for b in branches}, cfg)


def save_descriptors(directory, ds: DescriptorSet) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for b, a in ds.parts.items():
        container.save(d / f"{b}.parts.gstk", np.asarray(a, dtype=np.float32))
    container.save(d / "embedding.gstk", ds.raw_embeddings().astype(np.float32))
    sidecar = {
        "branches": list(ds.parts),
        "layout": ds.layout(),
        "config": config_to_json(ds.config),
        "sequences": [m.to_json() for m in ds.metas],
    }
    (d / "descriptors.json").write_text(json.dumps(sidecar, indent=1, sort_keys=True))


def load_descriptors(directory) -> DescriptorSet:
    d = Path(directory)
    try:
        sidecar = json.loads((d / "descriptors.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read descriptor layout in {d}: {exc}") from exc
    metas = [SequenceMeta.from_json(m) for m in sidecar["sequences"]]
    parts = {}
    for b in sidecar["branches"]:
        a = container.load(d / f"{b}.parts.gstk")
        if a.ndim != 3 or a.shape[0] != len(metas):
            raise DataError(f"branch {b} descriptors have shape {a.shape} for {len(metas)} sequences")
        parts[b] = a.astype(np.float64)
    return DescriptorSet(metas, parts, config_from_json(sidecar["config"]))
