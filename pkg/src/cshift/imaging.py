"""Image primitives: windowed SSIM (with its gradient), Sobel, box blur, HSV.

Filtering along each axis is expressed as an explicit (n x n) matrix with the
boundary reflection folded in, so a separable 2-D filter is ``A_h @ X @ A_w.T``
and its adjoint is ``A_h.T @ G @ A_w``. That makes the SSIM gradient exact.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
K1, K2 = 0.01, 0.03
DATA_RANGE = 1.0
C1 = (K1 * DATA_RANGE) ** 2
C2 = (K2 * DATA_RANGE) ** 2


def reflect_index(i: np.ndarray, n: int) -> np.ndarray:
    """Half-sample symmetric reflection (``dcba|abcd|dcba``), any offset."""
    if n == 1:
        return np.zeros_like(i)
    period = 2 * n
    j = np.mod(i, period)
    return np.where(j < n, j, period - 1 - j)


@lru_cache(maxsize=64)
def _filter_matrix(n: int, taps: tuple[float, ...]) -> np.ndarray:
    radius = len(taps) // 2
    mat = np.zeros((n, n))
    rows = np.arange(n)
    for k, tap in enumerate(taps):
        np.add.at(mat, (rows, reflect_index(rows + k - radius, n)), tap)
    mat.setflags(write=False)
    return mat


@lru_cache(maxsize=8)
def gaussian_taps(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> tuple[float, ...]:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x ** 2) / (2 * sigma ** 2))
    return tuple(g / g.sum())


def box_taps(radius: int) -> tuple[float, ...]:
    size = 2 * radius + 1
    return (1.0 / size,) * size


def filter_matrix(n: int, taps) -> np.ndarray:
    if not isinstance(taps, tuple):
        taps = tuple(float(t) for t in taps)
    return _filter_matrix(int(n), taps)


def separable(x: np.ndarray, taps, transpose: bool = False) -> np.ndarray:
    """Apply a separable filter to the last two axes of ``x`` (..., H, W)."""
    a_h = filter_matrix(x.shape[-2], taps)
    a_w = filter_matrix(x.shape[-1], taps)
    if transpose:
        return a_h.T @ x @ a_w
    return a_h @ x @ a_w.T


def ssim_components(x: np.ndarray, y: np.ndarray):
    """Local statistics and the per-pixel SSIM map over the last two axes."""
    mx, my, exx, eyy, exy = separable(np.stack([x, y, x * x, y * y, x * y]), gaussian_taps())
    vx, vy, cxy = exx - mx * mx, eyy - my * my, exy - mx * my
    a1 = 2 * mx * my + C1
    a2 = 2 * cxy + C2
    b1 = mx * mx + my * my + C1
    b2 = vx + vy + C2
    s = (a1 * a2) / (b1 * b2)
    return s, (mx, my, a1, a2, b1, b2)


def ssim_map(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Per-pixel SSIM (Gaussian 11x11 window, sigma 1.5, reflect boundary)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    return ssim_components(x, y)[0]


def ssim_mean_and_grad(x: np.ndarray, y: np.ndarray):
    """Mean SSIM over the last two axes and its gradient with respect to ``x``.

    Returns ``(mean, grad)`` where ``mean`` has shape ``x.shape[:-2]``.
    """
    s, (mx, my, a1, a2, b1, b2) = ssim_components(x, y)
    n = x.shape[-1] * x.shape[-2]
    # Partials of s w.r.t. the three local moments that depend on x.
    d_mx = s * (2 * my / a1 - 2 * my / a2 - 2 * mx / b1 + 2 * mx / b2) / n
    d_exx = -s / b2 / n
    d_exy = s * 2 / a2 / n
    g_mx, g_exx, g_exy = separable(np.stack(np.broadcast_arrays(d_mx, d_exx, d_exy)),
                                   gaussian_taps(), transpose=True)
    grad = g_mx + 2 * x * g_exx + y * g_exy
    return s.mean(axis=(-2, -1)), grad


SOBEL_MAX = 4.0 * np.sqrt(2.0)


def box_blur(x: np.ndarray, radius: int) -> np.ndarray:
    if radius <= 0:
        return x
    return separable(x, box_taps(radius))


def sobel_magnitude(x: np.ndarray) -> np.ndarray:
    """Sobel gradient magnitude over the last two axes (reflect boundary)."""
    a_h = filter_matrix(x.shape[-2], (1.0, 2.0, 1.0))
    a_w = filter_matrix(x.shape[-1], (1.0, 2.0, 1.0))
    d_h = filter_matrix(x.shape[-2], (-1.0, 0.0, 1.0))
    d_w = filter_matrix(x.shape[-1], (-1.0, 0.0, 1.0))
    gx = a_h @ x @ d_w.T
    gy = d_h @ x @ a_w.T
    return np.hypot(gx, gy)


def rgb_to_hsv(rgb: np.ndarray) -> np.ndarray:
    """Standard hexcone RGB -> HSV on (..., 3) arrays, hue scaled to [0, 1)."""
    rgb = np.asarray(rgb, dtype=np.float64)
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    v = rgb.max(axis=-1)
    mn = rgb.min(axis=-1)
    delta = v - mn
    s = np.where(v > 0, delta / np.where(v > 0, v, 1.0), 0.0)
    safe = np.where(delta > 0, delta, 1.0)
    rc, gc, bc = (v - r) / safe, (v - g) / safe, (v - b) / safe
    h = np.where(v == r, bc - gc, np.where(v == g, 2.0 + rc - bc, 4.0 + gc - rc))
    h = np.where(delta > 0, np.mod(h / 6.0, 1.0), 0.0)
    return np.stack([h, s, v], axis=-1)
