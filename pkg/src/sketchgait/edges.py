"""Classical edge detectors that turn a grayscale foreground into a sketch map.

All rasters are 2-D float arrays indexed ``[row, col]`` with values in [0,1].
Borders are handled by mirror reflection without edge repetition
(numpy ``mode="reflect"``).
"""

import math
import shlex
import subprocess
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from . import pngio
from .errors import ExternalToolError, ParameterError

LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])

SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
SOBEL_Y = SOBEL_X.T
SOBEL_SCALE = 1.0 / 8.0

# (drow, dcol) step along the gradient for each quantized orientation bin
_NMS_STEPS = ((0, 1), (1, 1), (1, 0), (1, -1))


@dataclass(frozen=True)
class GradientField:
    gx: np.ndarray
    gy: np.ndarray
    magnitude: np.ndarray
    orientation: np.ndarray


def as_gray(img) -> np.ndarray:
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim != 2 or arr.size == 0:
        raise ParameterError(f"gray image must be a non-empty 2-D array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)) or arr.min() < 0.0 or arr.max() > 1.0:
        raise ParameterError("gray image values must be finite and in [0, 1]")
    return arr


def luminance(frame) -> np.ndarray:
    """RGB frame ``(H, W, 3)`` to luma with BT.601 weights."""
    arr = np.asarray(frame, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ParameterError(f"frame must have shape (H, W, 3), got {arr.shape}")
    return np.clip(arr @ LUMA_WEIGHTS, 0.0, 1.0)


def gaussian_kernel(sigma: float) -> np.ndarray:
    radius = int(math.ceil(3.0 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return k / k.sum()


def _correlate_1d(img: np.ndarray, kernel: np.ndarray, axis: int) -> np.ndarray:
    r = kernel.size // 2
    pad = [(0, 0), (0, 0)]
    pad[axis] = (r, r)
    padded = np.pad(img, pad, mode="reflect")
    out = np.zeros_like(img)
    n = img.shape[axis]
    for i, w in enumerate(kernel):
        out += w * (padded[i:i + n, :] if axis == 0 else padded[:, i:i + n])
    return out


def gaussian_blur(img, sigma: float) -> np.ndarray:
    if not sigma > 0:
        raise ParameterError(f"sigma must be positive, got {sigma}")
    arr = as_gray(img)
    k = gaussian_kernel(sigma)
    return _correlate_1d(_correlate_1d(arr, k, axis=1), k, axis=0)


def _sobel_pair(img: np.ndarray):
    """Raw Sobel correlations, formed as differences of mirrored taps.

    Subtracting before weighting makes constant regions cancel exactly,
    which a plain weighted sum of nine products does not guarantee.
    """
    h, w = img.shape
    p = np.pad(img, 1, mode="reflect")

    def tap(dr, dc):
        return p[1 + dr:1 + dr + h, 1 + dc:1 + dc + w]

    gx = (tap(-1, 1) - tap(-1, -1)) + 2.0 * (tap(0, 1) - tap(0, -1)) + (tap(1, 1) - tap(1, -1))
    gy = (tap(1, -1) - tap(-1, -1)) + 2.0 * (tap(1, 0) - tap(-1, 0)) + (tap(1, 1) - tap(-1, 1))
    return gx, gy


def sobel_gradients(img) -> GradientField:
    """Sobel responses scaled by 1/8, so [0,1] inputs give gx, gy in [-1, 1]."""
    arr = as_gray(img)
    if arr.shape[0] < 3 or arr.shape[1] < 3:
        raise ParameterError(f"sobel needs at least 3x3 pixels, got {arr.shape}")
    gx, gy = _sobel_pair(arr)
    gx, gy = SOBEL_SCALE * gx, SOBEL_SCALE * gy
    magnitude = np.sqrt(gx * gx + gy * gy)
    orientation = np.mod(np.arctan2(gy, gx), np.pi)
    # arctan2 may land exactly on pi after the mod for tiny negative angles
    orientation[orientation >= np.pi] = 0.0
    return GradientField(gx, gy, magnitude, orientation)


def sobel_sketch(img) -> np.ndarray:
    mag = sobel_gradients(img).magnitude
    peak = mag.max()
    if peak <= 0.0:
        return np.zeros_like(mag)
    return mag / peak


def quantize_orientation(orientation: np.ndarray) -> np.ndarray:
    """Bins 0..3 centred on 0, pi/4, pi/2, 3pi/4; each bin is half-open on its upper side."""
    return np.floor((orientation + np.pi / 8.0) / (np.pi / 4.0)).astype(np.int64) % 4


def non_max_suppression(magnitude: np.ndarray, orientation: np.ndarray) -> np.ndarray:
    h, w = magnitude.shape
    bins = quantize_orientation(orientation)
    padded = np.pad(magnitude, 1, mode="reflect")
    keep = np.zeros((h, w), dtype=bool)
    for b, (dr, dc) in enumerate(_NMS_STEPS):
        ahead = padded[1 + dr:1 + dr + h, 1 + dc:1 + dc + w]
        behind = padded[1 - dr:1 - dr + h, 1 - dc:1 - dc + w]
        # strict: plateaus are suppressed on both sides
        keep |= (bins == b) & (magnitude > ahead) & (magnitude > behind)
    return np.where(keep, magnitude, 0.0)


def hysteresis(thin: np.ndarray, low: float, high: float) -> np.ndarray:
    weak = (thin > 0.0) & (thin >= low)
    strong = weak & (thin >= high)
    labels, n = ndimage.label(weak, structure=np.ones((3, 3), dtype=bool))
    if n == 0:
        return np.zeros(thin.shape, dtype=np.float64)
    seeded = np.zeros(n + 1, dtype=bool)
    seeded[np.unique(labels[strong])] = True
    seeded[0] = False
    return seeded[labels].astype(np.float64)


def canny(img, sigma: float = 1.4, low: float = 0.1, high: float = 0.3) -> np.ndarray:
    """Binary Canny map; thresholds are fractions of the peak gradient magnitude."""
    if not (0.0 < low < 1.0 and 0.0 < high < 1.0):
        raise ParameterError(f"thresholds must lie in (0, 1), got low={low}, high={high}")
    if low >= high:
        raise ParameterError(f"low threshold {low} must be below high threshold {high}")
    grad = sobel_gradients(gaussian_blur(img, sigma))
    peak = grad.magnitude.max()
    if peak <= 0.0:
        return np.zeros_like(grad.magnitude)
    thin = non_max_suppression(grad.magnitude, grad.orientation)
    return hysteresis(thin, low * peak, high * peak)


@dataclass(frozen=True)
class ExternalHookConfig:
    """Command template for an out-of-process edge detector.

    ``{in}`` and ``{out}`` in ``command`` are replaced by PNG paths. ``send``
    picks whether the hook receives the RGB foreground or its luminance.
    """

    command: str
    timeout: float = 60.0
    send: str = "rgb"


def run_external_detector(fg, hook: ExternalHookConfig) -> np.ndarray:
    frame = np.asarray(fg, dtype=np.float64)
    if frame.ndim != 3 or frame.shape[2] != 3:
        raise ParameterError(f"foreground frame must have shape (H, W, 3), got {frame.shape}")
    if hook.send not in ("rgb", "gray"):
        raise ParameterError(f"hook send mode must be 'rgb' or 'gray', got {hook.send!r}")
    h, w = frame.shape[:2]
    with tempfile.TemporaryDirectory(prefix="sketchgait-hook-") as tmp:
        src = Path(tmp) / "in.png"
        dst = Path(tmp) / "out.png"
        if hook.send == "rgb":
            pngio.write_rgb(src, frame)
        else:
            pngio.write_gray(src, luminance(frame))
        argv = [tok.replace("{in}", str(src)).replace("{out}", str(dst))
                for tok in shlex.split(hook.command)]
        diag = {"argv": argv}
        try:
            proc = subprocess.run(argv, capture_output=True, text=True, timeout=hook.timeout)
        except subprocess.TimeoutExpired as exc:
            raise ExternalToolError(f"hook timed out after {hook.timeout}s", diag) from exc
        except OSError as exc:
            raise ExternalToolError(f"hook could not start: {exc}", diag) from exc
        diag.update(returncode=proc.returncode, stdout=proc.stdout, stderr=proc.stderr)
        if proc.returncode != 0:
            raise ExternalToolError(f"hook exited with status {proc.returncode}", diag)
        if not dst.exists():
            raise ExternalToolError("hook produced no output file", diag)
        try:
            with Image.open(dst) as out:
                out.load()
                mode, size = out.mode, out.size
                data = np.asarray(out, dtype=np.float64)
        except OSError as exc:
            raise ExternalToolError(f"hook output unreadable: {exc}", diag) from exc
    if mode not in ("L", "I;16"):
        raise ExternalToolError(f"hook output must be single-channel, got mode {mode}", diag)
    if size != (w, h):
        raise ExternalToolError(f"hook output is {size[0]}x{size[1]}, expected {w}x{h}", diag)
    return data / (255.0 if mode == "L" else 65535.0)
