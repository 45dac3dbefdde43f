"""Dense optical flow by Farnebäck polynomial expansion.

A flow field ``(u, v)`` at pixel ``x`` of the first frame points to where
that content sits in the second frame: ``I_t(x + d) ~= I_p(x)``. ``u`` is
horizontal (columns), ``v`` vertical (rows).
"""

from __future__ import annotations

import struct
from collections.abc import Callable
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy import ndimage

LUMA = np.array([0.299, 0.587, 0.114])
FLOW_CLAMP = 16.0
ZERO_MOTION = 0.5
FLO_MAGIC = b"FLO1"


@dataclass(frozen=True)
class FlowParams:
    pyramid_scale: float = 0.5
    levels: int = 3
    window_size: int = 15
    iterations: int = 3
    poly_n: int = 5
    poly_sigma: float = 1.1

    def __post_init__(self) -> None:
        if not 0.0 < self.pyramid_scale < 1.0:
            raise ValueError("pyramid_scale must be in (0, 1)")
        if self.levels < 1 or self.iterations < 1:
            raise ValueError("levels and iterations must be positive")
        if self.window_size < 1 or self.window_size % 2 == 0:
            raise ValueError("window_size must be an odd positive integer")
        if self.poly_n < 5 or self.poly_n % 2 == 0:
            raise ValueError("poly_n must be an odd integer >= 5")
        if self.poly_sigma <= 0:
            raise ValueError("poly_sigma must be positive")


@dataclass
class FlowField:
    u: np.ndarray
    v: np.ndarray

    def __post_init__(self) -> None:
        if self.u.shape != self.v.shape or self.u.ndim != 2:
            raise ValueError("u and v must be 2-D arrays of equal shape")
        if not (np.all(np.isfinite(self.u)) and np.all(np.isfinite(self.v))):
            raise ValueError("flow contains non-finite values")

    @property
    def shape(self) -> tuple[int, int]:
        return self.u.shape

    def magnitude(self) -> np.ndarray:
        return np.hypot(self.u, self.v)


@dataclass
class PolyCoeffs:
    """Local model ``f(p + x) ~= x^T A x + b^T x + c`` at every pixel.

    ``A`` is ``(H, W, 2, 2)``, ``b`` is ``(H, W, 2)``, ``c`` is ``(H, W)``;
    vector components are ordered (x=column, y=row).
    """

    A: np.ndarray
    b: np.ndarray
    c: np.ndarray


def to_gray(pixels: np.ndarray) -> np.ndarray:
    pixels = np.asarray(pixels, dtype=np.float64)
    if pixels.ndim == 2:
        return pixels
    return pixels[..., :3] @ LUMA


@lru_cache(maxsize=16)
def _poly_kernels(n: int, sigma: float) -> np.ndarray:
    """Six ``n x n`` correlation kernels giving weighted-LS coefficients for
    the basis (1, x, y, x^2, y^2, xy)."""
    r = n // 2
    ys, xs = np.mgrid[-r : r + 1, -r : r + 1].astype(np.float64)
    w = np.exp(-(xs**2 + ys**2) / (2.0 * sigma**2))
    basis = np.stack([np.ones_like(xs), xs, ys, xs**2, ys**2, xs * ys])  # (6, n, n)
    flat = basis.reshape(6, -1)
    gram = (flat * w.reshape(1, -1)) @ flat.T
    dual = np.linalg.solve(gram, flat)  # (6, n*n)
    return (dual * w.reshape(1, -1)).reshape(6, n, n)


def poly_expansion(image: np.ndarray, n: int = 5, sigma: float = 1.1) -> PolyCoeffs:
    """Gaussian-weighted least-squares quadratic fit around each pixel.

    ``n`` is the (odd) neighbourhood width. Borders are reflected, so only
    pixels at least ``n // 2`` from the edge are exact fits.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise ValueError("poly_expansion expects a single-channel image")
    if min(image.shape) < n:
        raise ValueError(f"image {image.shape} smaller than neighbourhood {n}")
    kernels = _poly_kernels(n, float(sigma))
    r = [ndimage.correlate(image, k, mode="reflect") for k in kernels]
    A = np.empty(image.shape + (2, 2))
    A[..., 0, 0] = r[3]
    A[..., 1, 1] = r[4]
    A[..., 0, 1] = A[..., 1, 0] = 0.5 * r[5]
    b = np.stack([r[1], r[2]], axis=-1)
    return PolyCoeffs(A, b, r[0])


def _resize(img: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Bilinear resample to ``shape`` with pixel centres aligned."""
    h, w = img.shape
    ry = (np.arange(shape[0]) + 0.5) * (h / shape[0]) - 0.5
    rx = (np.arange(shape[1]) + 0.5) * (w / shape[1]) - 0.5
    yy, xx = np.meshgrid(ry, rx, indexing="ij")
    return ndimage.map_coordinates(img, [yy, xx], order=1, mode="nearest")


def _warp(field: np.ndarray, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Sample ``field`` (H, W, ...) at ``(row + v, col + u)``, bilinear."""
    h, w = u.shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    coords = [yy + v, xx + u]
    flat = field.reshape(h, w, -1)
    out = np.stack(
        [ndimage.map_coordinates(flat[..., i], coords, order=1, mode="nearest") for i in range(flat.shape[-1])],
        axis=-1,
    )
    return out.reshape(field.shape)


def _refine(p1: PolyCoeffs, p2: PolyCoeffs, u: np.ndarray, v: np.ndarray, window: int) -> tuple[np.ndarray, np.ndarray]:
    d = np.stack([u, v], axis=-1)
    A2 = _warp(p2.A, u, v)
    b2 = _warp(p2.b, u, v)
    A = 0.5 * (p1.A + A2)
    db = -0.5 * (b2 - p1.b) + np.einsum("...ij,...j->...i", A, d)
    # normal equations of A d = db, aggregated over the window
    G = np.einsum("...ki,...kj->...ij", A, A)
    h = np.einsum("...ki,...k->...i", A, db)
    g11 = ndimage.uniform_filter(G[..., 0, 0], window, mode="nearest")
    g12 = ndimage.uniform_filter(G[..., 0, 1], window, mode="nearest")
    g22 = ndimage.uniform_filter(G[..., 1, 1], window, mode="nearest")
    h1 = ndimage.uniform_filter(h[..., 0], window, mode="nearest")
    h2 = ndimage.uniform_filter(h[..., 1], window, mode="nearest")
    lam = 1e-4 * float(np.mean(g11 + g22)) + 1e-15
    g11 = g11 + lam
    g22 = g22 + lam
    det = g11 * g22 - g12 * g12
    return (g22 * h1 - g12 * h2) / det, (g11 * h2 - g12 * h1) / det


def _pyramid_shapes(shape: tuple[int, int], params: FlowParams) -> list[tuple[int, int]]:
    shapes = [shape]
    for _ in range(1, params.levels):
        h, w = shapes[-1]
        nxt = (int(round(h * params.pyramid_scale)), int(round(w * params.pyramid_scale)))
        if min(nxt) < max(params.poly_n, params.window_size // 2 + 1):
            break
        shapes.append(nxt)
    return shapes


def farneback_flow(prev: np.ndarray, target: np.ndarray, params: FlowParams | None = None) -> FlowField:
    """Coarse-to-fine Farnebäck flow from ``prev`` to ``target``.

    Inputs are ``(H, W, 3)`` images or ``(H, W)`` grayscale in [0, 1].
    """
    params = params or FlowParams()
    g1, g2 = to_gray(prev), to_gray(target)
    if g1.shape != g2.shape:
        raise ValueError(f"frame size mismatch {g1.shape} vs {g2.shape}")
    shapes = _pyramid_shapes(g1.shape, params)
    u = v = None
    for shape in reversed(shapes):
        if shape == g1.shape:
            i1, i2 = g1, g2
        else:
            # anti-alias before decimation
            sigma = 0.5 * (g1.shape[0] / shape[0] - 1.0)
            i1 = _resize(ndimage.gaussian_filter(g1, sigma), shape)
            i2 = _resize(ndimage.gaussian_filter(g2, sigma), shape)
        if u is None:
            u = np.zeros(shape)
            v = np.zeros(shape)
        else:
            fy = shape[0] / u.shape[0]
            fx = shape[1] / u.shape[1]
            u = _resize(u, shape) * fx
            v = _resize(v, shape) * fy
        p1 = poly_expansion(i1, params.poly_n, params.poly_sigma)
        p2 = poly_expansion(i2, params.poly_n, params.poly_sigma)
        for _ in range(params.iterations):
            u, v = _refine(p1, p2, u, v, params.window_size)
    return FlowField(u, v)


def block_matching_flow(prev: np.ndarray, target: np.ndarray, radius: int = 4, window: int = 9) -> FlowField:
    """Integer-displacement flow by exhaustive SSD search.

    Slow and coarse; kept as an independent cross-check for the Farnebäck
    path on small translations.
    """
    g1, g2 = to_gray(prev), to_gray(target)
    if g1.shape != g2.shape:
        raise ValueError(f"frame size mismatch {g1.shape} vs {g2.shape}")
    best = np.full(g1.shape, np.inf)
    u = np.zeros(g1.shape)
    v = np.zeros(g1.shape)
    for dy in range(-radius, radius + 1):
        for dx in range(-radius, radius + 1):
            # shifted[y, x] = target[y + dy, x + dx]
            shifted = np.roll(g2, shift=(-dy, -dx), axis=(0, 1))
            ssd = ndimage.uniform_filter((shifted - g1) ** 2, window, mode="nearest")
            better = ssd < best - 1e-12
            best[better] = ssd[better]
            u[better] = dx
            v[better] = dy
    return FlowField(u, v)


FlowMethod = Callable[[np.ndarray, np.ndarray], FlowField]

FLOW_METHODS: dict[str, FlowMethod] = {
    "farneback": farneback_flow,
    "blockmatch": block_matching_flow,
}


def encode_flow_channel(x: np.ndarray, clamp: float = FLOW_CLAMP) -> np.ndarray:
    """Map displacement (pixels) to [0, 1], zero motion at 0.5."""
    return ZERO_MOTION + np.clip(x, -clamp, clamp) / (2.0 * clamp)


def flow_image(field: FlowField, clamp: float = FLOW_CLAMP) -> np.ndarray:
    """``(H, W, 3)`` image of encoded (u, v, |(u, v)|)."""
    return np.stack(
        [
            encode_flow_channel(field.u, clamp),
            encode_flow_channel(field.v, clamp),
            encode_flow_channel(field.magnitude(), clamp),
        ],
        axis=-1,
    )


def write_flo(field: FlowField, path: str | Path) -> None:
    h, w = field.shape
    data = np.stack([field.u, field.v], axis=-1).astype("<f4")
    with open(path, "wb") as fh:
        fh.write(FLO_MAGIC + struct.pack("<II", w, h))
        fh.write(data.tobytes(order="C"))


def read_flo(path: str | Path) -> FlowField:
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:4] != FLO_MAGIC:
        raise ValueError(f"{path}: not a FLO1 file")
    w, h = struct.unpack("<II", raw[4:12])
    expected = 12 + 8 * w * h
    if len(raw) != expected:
        raise ValueError(f"{path}: expected {expected} bytes, found {len(raw)}")
    data = np.frombuffer(raw[12:], dtype="<f4").reshape(h, w, 2).astype(np.float64)
    return FlowField(data[..., 0].copy(), data[..., 1].copy())
