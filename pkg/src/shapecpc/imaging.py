"""Images, overlapping patch grids and the procedural texture bank.

Images are ``H×W×3`` float32 arrays with values in ``[0, 1]``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import ndimage

IMGF_MAGIC = b"IMGF"
_IMGF_HEADER = struct.Struct("<4sHHHH")

LUMA = np.array([0.299, 0.587, 0.114], dtype=np.float32)


class GridSpecError(ValueError):
    pass


class UnknownTextureError(KeyError):
    pass


def check_image(img, name: str = "image") -> np.ndarray:
    arr = np.asarray(img, dtype=np.float32)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"{name} must be H×W×3, got shape {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValueError(f"{name} is degenerate: {arr.shape}")
    if not np.isfinite(arr).all() or arr.min() < 0.0 or arr.max() > 1.0:
        raise ValueError(f"{name} values must lie in [0, 1]")
    return arr


def luminance(img: np.ndarray) -> np.ndarray:
    return img @ LUMA


def resize(img, side: int) -> np.ndarray:
    """Bilinear resize to ``side×side`` with corner-aligned sampling.

    Output pixel ``i`` samples source coordinate ``i * (H - 1) / (side - 1)``,
    so the first and last rows/columns land exactly on the source corners.
    """
    img = check_image(img)
    if side < 1:
        raise ValueError(f"side must be >= 1, got {side}")
    h, w, _ = img.shape
    if (h, w) == (side, side):
        return img.copy()

    def coords(n_in):
        if side == 1:
            return np.array([(n_in - 1) / 2.0])
        return np.arange(side) * ((n_in - 1) / (side - 1))

    ys, xs = coords(h), coords(w)
    y0 = np.clip(np.floor(ys).astype(int), 0, h - 1)
    x0 = np.clip(np.floor(xs).astype(int), 0, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[:, None, None]
    wx = (xs - x0)[None, :, None]
    src = img.astype(np.float64)
    top = src[y0][:, x0] * (1 - wx) + src[y0][:, x1] * wx
    bottom = src[y1][:, x0] * (1 - wx) + src[y1][:, x1] * wx
    out = top * (1 - wy) + bottom * wy
    return np.clip(out, 0.0, 1.0).astype(np.float32)


# -- patch grid -------------------------------------------------------------------


@dataclass(frozen=True)
class GridSpec:
    image_side: int = 64
    patch_side: int = 16
    stride: int = 8

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        S, p, stride = self.image_side, self.patch_side, self.stride
        if min(S, p, stride) < 1:
            raise GridSpecError(f"image_side, patch_side and stride must be positive: S={S} p={p} stride={stride}")
        if p % 2:
            raise GridSpecError(f"patch_side must be even: p={p}")
        if stride != p // 2:
            raise GridSpecError(f"stride must equal patch_side/2 (half overlap): stride={stride} p={p}")
        if S < p:
            raise GridSpecError(f"image_side must be >= patch_side: S={S} p={p}")
        if (S - p) % stride:
            raise GridSpecError(f"(S - p) must be divisible by stride: ({S}-{p}) % {stride} != 0")

    @property
    def grid_side(self) -> int:
        return (self.image_side - self.patch_side) // self.stride + 1

    def window(self, row: int, col: int) -> tuple[slice, slice]:
        r, c = row * self.stride, col * self.stride
        return slice(r, r + self.patch_side), slice(c, c + self.patch_side)


FULL_GRID = GridSpec(224, 56, 28)
DESK_GRID = GridSpec(64, 16, 8)


@dataclass
class PatchGrid:
    spec: GridSpec
    patches: np.ndarray  # s × s × p × p × 3
    texture_id: int = 0

    @property
    def side(self) -> int:
        return self.patches.shape[0]


def extract_grid(img, spec: GridSpec, texture_id: int = 0) -> PatchGrid:
    img = check_image(img)
    if img.shape[:2] != (spec.image_side, spec.image_side):
        raise GridSpecError(f"image is {img.shape[0]}x{img.shape[1]}, grid spec expects {spec.image_side}x{spec.image_side}")
    windows = sliding_window_view(img, (spec.patch_side, spec.patch_side), axis=(0, 1))
    # windows: H', W', 3, p, p
    windows = windows[:: spec.stride, :: spec.stride]
    patches = np.ascontiguousarray(windows.transpose(0, 1, 3, 4, 2))
    return PatchGrid(spec, patches, texture_id)


# -- textures ---------------------------------------------------------------------

PATTERNS = ("stripes", "checker", "dots", "noise", "crosshatch")


@dataclass(frozen=True)
class TextureTransform:
    """Replace local texture by a procedural pattern while keeping edges.

    The output is ``(1 - blend) * img + blend * clip(pattern + gain * detail)``
    where ``detail`` is a band-pass of the source luminance carrying object
    boundaries but not fine texture.
    """

    texture_id: int
    pattern: str
    period: int = 8
    blend: float = 0.6
    low: tuple = (0.1, 0.1, 0.1)
    high: tuple = (0.9, 0.9, 0.9)
    radius: float = 2.0
    amplitude: float = 0.4
    seed: int = 0
    phase: tuple = (0, 0)
    detail_gain: float = 2.0

    def __post_init__(self):
        if self.texture_id < 1:
            raise ValueError(f"texture_id must be >= 1, got {self.texture_id}")
        if self.pattern not in PATTERNS:
            raise ValueError(f"unknown pattern {self.pattern!r}; expected one of {PATTERNS}")
        if not 0.0 <= self.blend <= 1.0:
            raise ValueError(f"blend must lie in [0, 1], got {self.blend}")


def default_texture_bank(count: int = 5, blend: float = 0.6, scale: float = 1.0) -> list[TextureTransform]:
    """The five built-in transforms, optionally rescaled for larger images."""
    if not 0 <= count <= len(PATTERNS):
        raise ValueError(f"texture count must be in [0, {len(PATTERNS)}], got {count}")
    s = lambda n: max(2, int(round(n * scale)))  # noqa: E731
    bank = [
        TextureTransform(1, "stripes", period=s(8), blend=blend, low=(0.05, 0.15, 0.45), high=(0.95, 0.85, 0.3)),
        TextureTransform(2, "checker", period=s(8), blend=blend, low=(0.1, 0.1, 0.1), high=(0.9, 0.9, 0.9)),
        TextureTransform(3, "dots", period=s(8), radius=2.0 * scale, blend=blend, low=(0.85, 0.8, 0.7), high=(0.1, 0.3, 0.2)),
        TextureTransform(4, "noise", amplitude=0.4, seed=4, blend=blend, low=(0.0, 0.0, 0.0), high=(1.0, 1.0, 1.0)),
        TextureTransform(5, "crosshatch", period=s(6), blend=blend, low=(0.9, 0.75, 0.6), high=(0.3, 0.1, 0.05)),
    ]
    return bank[:count]


def pattern_field(t: TextureTransform, height: int, width: int) -> np.ndarray:
    """Grayscale pattern in [0, 1] of shape ``height×width``."""
    y, x = np.mgrid[0:height, 0:width]
    y = y + t.phase[0]
    x = x + t.phase[1]
    p = t.period
    if t.pattern == "stripes":
        field_ = ((x + y) % p) < p / 2
    elif t.pattern == "checker":
        field_ = ((x // p) + (y // p)) % 2 == 1
    elif t.pattern == "dots":
        dy = (y % p) - (p - 1) / 2
        dx = (x % p) - (p - 1) / 2
        field_ = dy * dy + dx * dx <= t.radius * t.radius
    elif t.pattern == "crosshatch":
        width_ = max(1, p // 3)
        field_ = ((x % p) < width_) | ((y % p) < width_)
    else:
        rng = np.random.default_rng(t.seed)
        noise = rng.uniform(-1.0, 1.0, size=(height + abs(t.phase[0]), width + abs(t.phase[1])))
        noise = noise[abs(t.phase[0]):, abs(t.phase[1]):][:height, :width]
        return np.clip(0.5 + t.amplitude * noise, 0.0, 1.0)
    return field_.astype(np.float64)


def structure_detail(img: np.ndarray) -> np.ndarray:
    """Band-pass luminance: object-scale edges without pixel-scale texture."""
    lum = luminance(img.astype(np.float64))
    fine = ndimage.gaussian_filter(lum, 0.5, mode="reflect")
    coarse = ndimage.gaussian_filter(lum, 4.0, mode="reflect")
    return fine - coarse


def apply_texture(img, t: TextureTransform) -> np.ndarray:
    img = check_image(img)
    if t.blend == 0.0:
        return img.copy()
    h, w, _ = img.shape
    field_ = pattern_field(t, h, w)[..., None]
    low, high = np.asarray(t.low), np.asarray(t.high)
    pattern = low + (high - low) * field_
    textured = np.clip(pattern + t.detail_gain * structure_detail(img)[..., None], 0.0, 1.0)
    out = (1.0 - t.blend) * img.astype(np.float64) + t.blend * textured
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def lookup_texture(bank: Sequence[TextureTransform], texture_id: int) -> TextureTransform:
    for t in bank:
        if t.texture_id == texture_id:
            return t
    raise UnknownTextureError(f"texture_id {texture_id} not in bank {[t.texture_id for t in bank]}")


def make_variants(img, bank: Sequence[TextureTransform]) -> list[np.ndarray]:
    """Original image followed by one textured copy per bank entry."""
    img = check_image(img)
    return [img.copy()] + [apply_texture(img, t) for t in bank]


def edge_map(img, threshold: float = 0.2) -> np.ndarray:
    """Boolean Sobel-magnitude edge map of the luminance (unit step -> 1)."""
    lum = luminance(np.asarray(img, dtype=np.float64))
    gx = ndimage.sobel(lum, axis=1, mode="reflect") / 4.0
    gy = ndimage.sobel(lum, axis=0, mode="reflect") / 4.0
    return np.hypot(gx, gy) > threshold


# -- file formats -----------------------------------------------------------------


def write_imgf(path, img) -> None:
    arr = np.asarray(img, dtype="<f4")
    if arr.ndim == 2:
        arr = arr[..., None]
    h, w, c = arr.shape
    with open(path, "wb") as fh:
        fh.write(_IMGF_HEADER.pack(IMGF_MAGIC, h, w, c, 0))
        fh.write(np.ascontiguousarray(arr).tobytes())


def read_imgf(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < _IMGF_HEADER.size:
        raise ValueError(f"{path}: truncated IMGF header")
    magic, h, w, c, _ = _IMGF_HEADER.unpack_from(raw)
    if magic != IMGF_MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    expected = h * w * c * 4
    payload = raw[_IMGF_HEADER.size:]
    if len(payload) != expected:
        raise ValueError(f"{path}: expected {expected} payload bytes, found {len(payload)}")
    return np.frombuffer(payload, dtype="<f4").reshape(h, w, c).astype(np.float32)


def read_png(path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0


def write_png(path, img) -> None:
    from PIL import Image

    arr = np.clip(np.asarray(img) * 255.0 + 0.5, 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)


def load_image(path) -> np.ndarray:
    """Read an IMGF or PNG file, dispatching on the leading magic bytes."""
    with open(path, "rb") as fh:
        head = fh.read(4)
    img = read_imgf(path) if head == IMGF_MAGIC else read_png(path)
    if img.shape[2] == 1:
        img = np.repeat(img, 3, axis=2)
    return check_image(img, name=str(path))
