"""Grayscale images, PGM persistence, and the PSNR/SSIM quality metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, FileFormatError

PSNR_INF = math.inf


@dataclass(frozen=True)
class ImageGray:
    """Row-major grayscale image with intensities in [0, 1]."""

    data: np.ndarray  # (height, width) float32

    def __post_init__(self):
        a = np.asarray(self.data, dtype=np.float32)
        if a.ndim != 2:
            raise ContractError(f"image data must be 2-D, got shape {a.shape}")
        if not np.isfinite(a).all() or a.min() < 0.0 or a.max() > 1.0:
            raise ContractError("image intensities must be finite and in [0, 1]")
        a = a.copy()
        a.setflags(write=False)
        object.__setattr__(self, "data", a)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]


def write_pgm_bytes(img: ImageGray) -> bytes:
    """Binary PGM (P5), maxval 255; intensity i maps to byte round(i*255)."""
    b = np.rint(img.data.astype(np.float64) * 255.0).astype(np.uint8)
    header = f"P5\n{img.width} {img.height}\n255\n".encode("ascii")
    return header + b.tobytes()


def write_pgm(img: ImageGray, path) -> None:
    with open(path, "wb") as f:
        f.write(write_pgm_bytes(img))


def _pgm_tokens(buf: bytes):
    """Yield header tokens, skipping whitespace and '#' comments."""
    i = 0
    n = len(buf)
    while True:
        while i < n and buf[i : i + 1].isspace():
            i += 1
        if i < n and buf[i : i + 1] == b"#":
            while i < n and buf[i : i + 1] != b"\n":
                i += 1
            continue
        start = i
        while i < n and not buf[i : i + 1].isspace():
            i += 1
        if start == i:
            raise FileFormatError("truncated PGM header")
        yield buf[start:i], i


def read_pgm_bytes(buf: bytes) -> ImageGray:
    it = _pgm_tokens(buf)
    magic, _ = next(it)
    if magic != b"P5":
        raise FileFormatError("not a binary PGM (P5) file")
    (w, _), (h, _), (maxval, end) = next(it), next(it), next(it)
    try:
        w, h, maxval = int(w), int(h), int(maxval)
    except ValueError as e:
        raise FileFormatError(f"bad PGM header field: {e}") from None
    if maxval != 255:
        raise FileFormatError(f"only maxval 255 supported, got {maxval}")
    pixels = buf[end + 1 : end + 1 + w * h]
    if len(pixels) != w * h:
        raise FileFormatError("PGM pixel payload truncated")
    a = np.frombuffer(pixels, dtype=np.uint8).reshape(h, w)
    return ImageGray(a.astype(np.float32) / 255.0)


def read_pgm(path) -> ImageGray:
    with open(path, "rb") as f:
        return read_pgm_bytes(f.read())


def _check_same_shape(a: ImageGray, b: ImageGray):
    if a.data.shape != b.data.shape:
        raise ContractError(f"image shapes differ: {a.data.shape} vs {b.data.shape}")


def psnr(a: ImageGray, b: ImageGray) -> float:
    """10*log10(1/MSE) with peak 1.0; returns math.inf when MSE is zero."""
    _check_same_shape(a, b)
    mse = float(np.mean((a.data.astype(np.float64) - b.data.astype(np.float64)) ** 2))
    if mse == 0.0:
        return PSNR_INF
    return 10.0 * math.log10(1.0 / mse)


def _gaussian_kernel1d(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    r = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    k = np.exp(-(r**2) / (2.0 * sigma**2))
    return k / k.sum()


def _filter_valid(img: np.ndarray, k: np.ndarray) -> np.ndarray:
    """Separable valid-mode Gaussian filtering (no padding)."""
    from numpy.lib.stride_tricks import sliding_window_view

    rows = sliding_window_view(img, len(k), axis=1) @ k
    return sliding_window_view(rows, len(k), axis=0) @ k


def ssim(a: ImageGray, b: ImageGray, win_size: int = 11, sigma: float = 1.5) -> float:
    """Mean local SSIM on the [0,1] range, Gaussian-weighted 11x11 windows.

    Uses the standard stabilizers C1=(0.01)^2, C2=(0.03)^2 and weighted
    (population) moments; windows are taken in valid mode so every local
    statistic has full support.
    """
    _check_same_shape(a, b)
    if a.height < win_size or a.width < win_size:
        raise ContractError(f"images must be at least {win_size}x{win_size} for SSIM")
    x = a.data.astype(np.float64)
    y = b.data.astype(np.float64)
    k = _gaussian_kernel1d(win_size, sigma)
    c1, c2 = 0.01**2, 0.03**2
    mx = _filter_valid(x, k)
    my = _filter_valid(y, k)
    mxx = _filter_valid(x * x, k)
    myy = _filter_valid(y * y, k)
    mxy = _filter_valid(x * y, k)
    vx = mxx - mx * mx
    vy = myy - my * my
    cxy = mxy - mx * my
    s = ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
    return float(s.mean())
