"""Synthetic walking stick figures with per-identity limb geometry.

Each identity gets its own body proportions, limb thickness, stride, arm
swing, cadence and clothing colours. Conditions:

* ``NM`` normal walking
* ``BG`` carrying a bag at the hip (parsing label 7)
* ``CL`` wearing a coat that widens the torso and covers the thighs
"""

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import pngio
from .modality import DEFAULT_GROUPING, DEFAULT_PALETTE

HEAD, TORSO, L_ARM, R_ARM, L_LEG, R_LEG, BAG = 1, 2, 3, 4, 5, 6, 7
CONDITIONS = ("NM", "BG", "CL")


@dataclass(frozen=True)
class Identity:
    name: str
    head_r: float
    torso_len: float
    torso_w: float
    upper_arm: float
    lower_arm: float
    thigh: float
    shin: float
    limb_w: float
    stride: float
    arm_swing: float
    period: float
    shirt: tuple
    pants: tuple
    skin: tuple


def make_identity(name: str, rng: np.random.Generator) -> Identity:
    u = rng.uniform
    return Identity(
        name=name,
        head_r=u(5.5, 10.0),
        torso_len=u(26.0, 42.0),
        torso_w=u(11.0, 22.0),
        upper_arm=u(13.0, 22.0),
        lower_arm=u(11.0, 20.0),
        thigh=u(19.0, 31.0),
        shin=u(19.0, 31.0),
        limb_w=u(3.0, 7.5),
        stride=u(0.25, 0.65),
        arm_swing=u(0.15, 0.7),
        period=u(8.0, 14.0),
        shirt=tuple(u(0.1, 0.9, 3)),
        pants=tuple(u(0.1, 0.9, 3)),
        skin=tuple(np.array([0.85, 0.65, 0.5]) * u(0.6, 1.1)),
    )


def _segment_dist(py, px, a, b):
    """Distance from pixel centres to the segment a-b; points are (row, col)."""
    ay, ax = a
    by, bx = b
    dy, dx = by - ay, bx - ax
    denom = dy * dy + dx * dx
    t = np.zeros_like(py) if denom == 0 else np.clip(((py - ay) * dy + (px - ax) * dx) / denom, 0.0, 1.0)
    return np.hypot(py - (ay + t * dy), px - (ax + t * dx))


def _limb(origin, length, angle):
    """Endpoint of a limb hanging from ``origin`` rotated by ``angle`` from straight down."""
    return (origin[0] + length * math.cos(angle), origin[1] + length * math.sin(angle))


def render_frame(ident: Identity, condition: str, t: int, size=(128, 88), phase0=0.0, x0=None,
                 coat_color=(0.3, 0.3, 0.35), rng=None):
    """Render one frame: returns ``(rgb, mask, labels)``."""
    h, w = size
    py, px = np.mgrid[0:h, 0:w].astype(np.float64) + 0.5
    labels = np.zeros((h, w), dtype=np.int64)
    color = np.zeros((h, w, 3))

    phase = phase0 + 2.0 * math.pi * t / ident.period
    bob = 1.5 * abs(math.sin(phase))
    leg_len = ident.thigh + ident.shin
    body_h = 2 * ident.head_r + ident.torso_len + leg_len
    top = (h - body_h) / 2.0 - bob
    cx = (w / 2.0 if x0 is None else x0) + 0.8 * t
    head_c = (top + ident.head_r, cx)
    neck = (top + 2 * ident.head_r, cx)
    hip = (neck[0] + ident.torso_len, cx)
    shoulder = (neck[0] + 0.15 * ident.torso_len, cx)

    def paint(region, label, rgb):
        labels[region] = label
        color[region] = rgb

    def leg(sign, label, rgb):
        a = sign * ident.stride * math.sin(phase)
        bend = max(0.0, sign * 0.8 * ident.stride * math.cos(phase))
        knee = _limb(hip, ident.thigh, a)
        foot = _limb(knee, ident.shin, a - bend)
        r = ident.limb_w / 2 + 1.0
        region = (_segment_dist(py, px, hip, knee) <= r) | (_segment_dist(py, px, knee, foot) <= r * 0.85)
        paint(region, label, rgb)

    def arm(sign, label, rgb):
        a = -sign * ident.arm_swing * math.sin(phase)
        elbow = _limb(shoulder, ident.upper_arm, a)
        hand = _limb(elbow, ident.lower_arm, a + 0.3 * abs(a) + 0.1)
        r = ident.limb_w / 2
        region = (_segment_dist(py, px, shoulder, elbow) <= r) | (_segment_dist(py, px, elbow, hand) <= r * 0.9)
        paint(region, label, rgb)

    leg(-1, R_LEG, ident.pants)
    arm(-1, R_ARM, ident.skin)
    torso_w = ident.torso_w * (1.35 if condition == "CL" else 1.0)
    torso = (np.abs(px - cx) <= torso_w / 2) & (py >= neck[0]) & (py <= hip[0])
    paint(torso, TORSO, coat_color if condition == "CL" else ident.shirt)
    leg(1, L_LEG, ident.pants)
    if condition == "CL":
        depth = (py - hip[0]) / (0.6 * ident.thigh)
        skirt = (py >= hip[0]) & (depth <= 1.0) & (np.abs(px - cx) <= torso_w / 2 * (1 + 0.25 * depth))
        paint(skirt, TORSO, coat_color)
    if condition == "BG":
        bag = (np.abs(px - (cx + 0.5 * torso_w + 5)) <= 6) & (np.abs(py - (hip[0] - 2)) <= 8)
        paint(bag, BAG, (0.45, 0.3, 0.15))
    paint(np.hypot(py - head_c[0], px - head_c[1]) <= ident.head_r, HEAD, ident.skin)
    arm(1, L_ARM, ident.skin)

    rng = rng or np.random.default_rng(0)
    fg = labels > 0
    bg = _background(h, w, rng)
    rgb = np.where(fg[..., None], color + rng.normal(0, 0.02, (h, w, 3)), bg)
    return np.clip(rgb, 0, 1), fg.astype(np.uint8), labels


def _background(h, w, rng):
    yy, xx = np.mgrid[0:h, 0:w] / max(h, w)
    base = 0.5 + 0.2 * np.sin(2 * math.pi * (rng.uniform(1, 4) * xx + rng.uniform(0, 1)))
    base = base + 0.15 * np.sin(2 * math.pi * rng.uniform(2, 6) * yy)
    rgb = np.stack([base * c for c in rng.uniform(0.5, 1.0, 3)], axis=-1)
    return np.clip(rgb + rng.normal(0, 0.05, (h, w, 3)), 0, 1)


def generate(out_dir, identities: int = 10, seqs_per_condition: int = 3, frames: int = 8,
             seed: int = 0, size=(128, 88), conditions=CONDITIONS, sequence_seed=None) -> Path:
    """Write PNG frames/masks/parsing maps plus ``manifest.json``; returns the manifest path.

    ``seed`` fixes the identities; ``sequence_seed`` (default: ``seed``) fixes
    gait phase, placement, coat colour and noise, so two datasets can share
    identities while differing in every rendered sequence.
    """
    seq_seed = seed if sequence_seed is None else sequence_seed
    out = Path(out_dir)
    rng = np.random.default_rng(seed)
    people = [make_identity(f"{i:03d}", rng) for i in range(identities)]
    entries = []
    for ident in people:
        for cond in conditions:
            for s in range(seqs_per_condition):
                seq_rng = np.random.default_rng([seq_seed, int(ident.name), conditions.index(cond), s])
                phase0 = seq_rng.uniform(0, 2 * math.pi)
                x0 = size[1] / 2 + seq_rng.uniform(-12, 4)
                coat = tuple(seq_rng.uniform(0.1, 0.6, 3))
                rel = Path(ident.name) / cond / f"{s:02d}"
                lists = {"frames": [], "masks": [], "parsing": []}
                for kind in lists:
                    (out / kind / rel).mkdir(parents=True, exist_ok=True)
                for t in range(frames):
                    rgb, mask, lab = render_frame(ident, cond, t, size, phase0, x0, coat, seq_rng)
                    name = f"{t:03d}.png"
                    pngio.write_rgb(out / "frames" / rel / name, rgb)
                    pngio.write_gray(out / "masks" / rel / name, mask.astype(np.float64))
                    pngio.write_labels(out / "parsing" / rel / name, lab)
                    for kind in lists:
                        lists[kind].append(str(Path(kind) / rel / name))
                entries.append({"subject": ident.name, "condition": cond, "view": "090",
                                "seq": f"{s:02d}", **lists})
    manifest = {
        "palette": {str(k): v for k, v in DEFAULT_PALETTE.items()},
        "grouping": DEFAULT_GROUPING,
        "protocol": {"gallery_conditions": [conditions[0]], "probe_conditions": list(conditions[1:])},
        "entries": entries,
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return path
