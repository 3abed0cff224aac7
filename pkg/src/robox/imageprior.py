"""Hand-crafted image priors: edge sketch, superpixel boundaries, high-pass detail.

All extractors are deterministic functions of ``(image, parameters)`` and
operate on 2-D float arrays with intensities in ``[0, 1]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

# SLIC compares intensities on a 0..100 scale (the range of CIELAB lightness),
# so that a compactness of ~10 balances intensity against position.
INTENSITY_SCALE = 100.0

_EIGHT = np.ones((3, 3), dtype=bool)
_FOUR = ndimage.generate_binary_structure(2, 1)


def check_gray(img) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError(f"expected a 2-D image, got shape {img.shape}")
    if min(img.shape) < 8:
        raise ValueError(f"image must be at least 8x8, got {img.shape}")
    if not np.all(np.isfinite(img)) or img.min() < 0.0 or img.max() > 1.0:
        raise ValueError("image intensities must lie in [0, 1]")
    return img


@dataclass(frozen=True)
class SuperpixelLabeling:
    labels: np.ndarray
    k_actual: int


@dataclass(frozen=True)
class SelfInfoStack:
    edge: np.ndarray
    superpixel_boundary: np.ndarray
    highpass: np.ndarray

    def as_array(self) -> np.ndarray:
        """Channels stacked as (3, H, W) float64."""
        return np.stack([self.edge, self.superpixel_boundary, self.highpass]).astype(np.float64)


@dataclass(frozen=True)
class PriorConfig:
    canny_sigma: float = 1.0
    canny_low: float = 0.1
    canny_high: float = 0.3
    slic_k: int = 64
    slic_compactness: float = 10.0
    slic_iters: int = 10
    highpass_radius_frac: float = 0.1

    @classmethod
    def from_dict(cls, d: dict | None) -> PriorConfig:
        return cls(**(d or {}))


# -- Canny ---------------------------------------------------------------------
def gaussian_kernel(sigma: float) -> np.ndarray:
    r = int(math.ceil(3 * sigma))
    x = np.arange(-r, r + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def _filter_rows_cols(img: np.ndarray, kr: np.ndarray, kc: np.ndarray, mode: str) -> np.ndarray:
    """Separable correlation with ``kr`` along rows and ``kc`` along columns."""
    rr, rc = len(kr) // 2, len(kc) // 2
    p = np.pad(img, ((rr, rr), (rc, rc)), mode=mode)
    h, w = img.shape
    tmp = sum(kc[j] * p[:, j: j + w] for j in range(len(kc)))
    return sum(kr[i] * tmp[i: i + h, :] for i in range(len(kr)))


def sobel(img: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Returns ``(gx, gy)``: derivatives along columns and rows."""
    smooth = np.array([1.0, 2.0, 1.0])
    diff = np.array([-1.0, 0.0, 1.0])
    gx = _filter_rows_cols(img, smooth, diff, "edge")
    gy = _filter_rows_cols(img, diff, smooth, "edge")
    return gx, gy


def canny(img, sigma: float = 1.0, low: float = 0.1, high: float = 0.3) -> np.ndarray:
    """Binary edge map; thresholds are fractions of the maximum gradient magnitude."""
    img = np.asarray(img, dtype=np.float64)
    if sigma <= 0 or not 0 < low < high <= 1:
        raise ValueError(f"invalid canny parameters sigma={sigma} low={low} high={high}")
    k = gaussian_kernel(sigma)
    if min(img.shape) < len(k):
        raise ValueError(f"image {img.shape} smaller than the {len(k)}-tap blur kernel")
    blurred = _filter_rows_cols(img, k, k, "reflect")
    gx, gy = sobel(blurred)
    mag = np.hypot(gx, gy)
    peak = mag.max()
    if peak <= 1e-12:
        return np.zeros(img.shape, dtype=np.uint8)

    # quantise gradient direction into 0/45/90/135 degrees
    ang = np.rad2deg(np.arctan2(gy, gx)) % 180.0
    bins = (np.floor((ang + 22.5) / 45.0).astype(int)) % 4
    offsets = {0: (0, 1), 1: (1, 1), 2: (1, 0), 3: (1, -1)}
    pad = np.pad(mag, 1, mode="constant")
    h, w = mag.shape
    keep = np.zeros(mag.shape, dtype=bool)
    for b, (dr, dc) in offsets.items():
        fwd = pad[1 + dr: 1 + dr + h, 1 + dc: 1 + dc + w]
        bwd = pad[1 - dr: 1 - dr + h, 1 - dc: 1 - dc + w]
        # ">=" one way and ">" the other keeps exactly one pixel of a flat ridge
        keep |= (bins == b) & (mag >= fwd) & (mag > bwd)
    nms = np.where(keep, mag, 0.0)

    strong = nms >= high * peak
    weak = nms >= low * peak
    comp, n = ndimage.label(weak, structure=_EIGHT)
    if n == 0:
        return np.zeros(img.shape, dtype=np.uint8)
    has_strong = np.zeros(n + 1, dtype=bool)
    has_strong[np.unique(comp[strong])] = True
    has_strong[0] = False
    return has_strong[comp].astype(np.uint8)


# -- SLIC ----------------------------------------------------------------------
def _grid_centers(h: int, w: int, k: int) -> np.ndarray:
    nx = max(1, int(math.ceil(math.sqrt(k * w / h) - 1e-9)))
    ny = max(1, int(math.ceil(k / nx - 1e-9)))
    while nx * ny > k and nx > 1:
        nx -= 1
        ny = max(1, int(math.ceil(k / nx - 1e-9)))
    ys = (np.arange(ny) + 0.5) * h / ny
    xs = (np.arange(nx) + 0.5) * w / nx
    cy, cx = np.meshgrid(ys, xs, indexing="ij")
    centers = np.stack([cy.ravel(), cx.ravel()], axis=1)
    return np.floor(centers).astype(int)[:k]


def _perturb_centers(img: np.ndarray, centers: np.ndarray) -> np.ndarray:
    h, w = img.shape
    p = np.pad(img, 1, mode="edge")
    grad = (p[1:-1, 2:] - p[1:-1, :-2]) ** 2 + (p[2:, 1:-1] - p[:-2, 1:-1]) ** 2
    out = centers.copy()
    for i, (r, c) in enumerate(centers):
        best, best_g = (r, c), grad[r, c]
        for dr in (-1, 0, 1):
            for dc in (-1, 0, 1):
                rr, cc = r + dr, c + dc
                if 0 <= rr < h and 0 <= cc < w and grad[rr, cc] < best_g:
                    best, best_g = (rr, cc), grad[rr, cc]
        out[i] = best
    return out


def slic(img, k: int = 64, compactness: float = 10.0, iters: int = 10) -> SuperpixelLabeling:
    """Grayscale SLIC over (intensity, x, y) followed by connectivity enforcement."""
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape
    if not 1 <= k <= h * w:
        raise ValueError(f"slic: k={k} outside [1, {h * w}]")
    if iters < 1:
        raise ValueError("slic: iters must be >= 1")
    S = math.sqrt(h * w / k)
    seeds = _perturb_centers(img, _grid_centers(h, w, k))
    inten = img * INTENSITY_SCALE
    # cluster state: (intensity, y, x)
    cen = np.stack([inten[seeds[:, 0], seeds[:, 1]], seeds[:, 0], seeds[:, 1]], axis=1).astype(np.float64)
    yy, xx = np.mgrid[0:h, 0:w]
    py, px, pi = yy.ravel().astype(np.float64), xx.ravel().astype(np.float64), inten.ravel()
    spatial_w = (compactness / S) ** 2
    labels = np.zeros(h * w, dtype=np.int64)
    for _ in range(iters):
        dy = py[:, None] - cen[None, :, 1]
        dx = px[:, None] - cen[None, :, 2]
        di = pi[:, None] - cen[None, :, 0]
        D = di * di + spatial_w * (dx * dx + dy * dy)
        window = (np.abs(dx) <= S) & (np.abs(dy) <= S)
        Dw = np.where(window, D, np.inf)
        labels = np.argmin(Dw, axis=1)
        uncovered = ~np.isfinite(Dw[np.arange(h * w), labels])
        if uncovered.any():
            labels[uncovered] = np.argmin(D[uncovered], axis=1)
        counts = np.bincount(labels, minlength=len(cen))
        nz = counts > 0
        for j, v in enumerate((pi, py, px)):
            sums = np.bincount(labels, weights=v, minlength=len(cen))
            cen[nz, j] = sums[nz] / counts[nz]
    merged = enforce_connectivity(labels.reshape(h, w), min_size=S * S / 4.0)
    return SuperpixelLabeling(merged, int(merged.max()) + 1)


def enforce_connectivity(labels: np.ndarray, min_size: float) -> np.ndarray:
    """Split labels into 4-connected components and fold small ones into neighbours.

    A component smaller than ``min_size`` joins the largest adjacent component.
    Output labels are renumbered 0.. in row-major order of first appearance.
    """
    h, w = labels.shape
    comp = np.zeros((h, w), dtype=np.int64)
    n = 0
    for lab in np.unique(labels):
        c, m = ndimage.label(labels == lab, structure=_FOUR)
        comp[c > 0] = c[c > 0] + n
        n += m
    comp -= 1
    size = np.bincount(comp.ravel(), minlength=n).astype(np.int64)
    parent = np.arange(n)

    def find(i: int) -> int:
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    # adjacency between components (4-neighbourhood)
    pairs = np.concatenate([
        np.stack([comp[:, :-1].ravel(), comp[:, 1:].ravel()], axis=1),
        np.stack([comp[:-1, :].ravel(), comp[1:, :].ravel()], axis=1),
    ])
    pairs = pairs[pairs[:, 0] != pairs[:, 1]]
    adj: dict[int, set[int]] = {i: set() for i in range(n)}
    for a, b in np.unique(np.sort(pairs, axis=1), axis=0):
        adj[int(a)].add(int(b))
        adj[int(b)].add(int(a))

    for i in sorted(range(n), key=lambda j: (size[j], j)):
        r = find(i)
        if r != i or size[r] >= min_size:
            continue
        neigh = {find(j) for j in adj[r]} - {r}
        if not neigh:
            continue
        target = min(neigh, key=lambda j: (-size[j], j))
        parent[r] = target
        size[target] += size[r]
        adj[target] |= adj[r]

    roots = np.array([find(i) for i in range(n)])
    flat = roots[comp.ravel()]
    _, first = np.unique(flat, return_index=True)
    order = np.argsort(first)
    remap = np.empty(flat.max() + 1, dtype=np.int64)
    remap[np.unique(flat)[order]] = np.arange(len(order))
    return remap[flat].reshape(h, w)


def boundary_map(labels) -> np.ndarray:
    """1 where any 4-neighbour carries a different label."""
    lab = labels.labels if isinstance(labels, SuperpixelLabeling) else np.asarray(labels)
    out = np.zeros(lab.shape, dtype=bool)
    dh = lab[:, 1:] != lab[:, :-1]
    dv = lab[1:, :] != lab[:-1, :]
    out[:, 1:] |= dh
    out[:, :-1] |= dh
    out[1:, :] |= dv
    out[:-1, :] |= dv
    return out.astype(np.uint8)


# -- frequency channel ----------------------------------------------------------
def fft_highpass(img, radius_frac: float | None = 0.1) -> np.ndarray:
    """Suppress low-frequency amplitudes and return the image-domain detail map.

    Amplitudes within ``radius_frac * min(H, W)`` of DC (in centred frequency
    index units) are zeroed, phase is kept, and the real part of the inverse
    transform is clamped to [-1, 1]. ``radius_frac=None`` applies no mask.
    """
    img = np.asarray(img, dtype=np.float64)
    if radius_frac is not None and not 0.0 < radius_frac < 0.5:
        raise ValueError(f"radius_frac must lie in (0, 0.5), got {radius_frac}")
    h, w = img.shape
    F = np.fft.fft2(img)
    amp, phase = np.abs(F), np.angle(F)
    if radius_frac is not None:
        ky = np.fft.fftfreq(h) * h
        kx = np.fft.fftfreq(w) * w
        dist = np.hypot(ky[:, None], kx[None, :])
        amp = np.where(dist <= radius_frac * min(h, w), 0.0, amp)
    out = np.fft.ifft2(amp * np.exp(1j * phase)).real
    return np.clip(out, -1.0, 1.0)


def build_stack(img, cfg: PriorConfig | None = None) -> SelfInfoStack:
    cfg = cfg or PriorConfig()
    img = check_gray(img)
    edge = canny(img, cfg.canny_sigma, cfg.canny_low, cfg.canny_high)
    sp = boundary_map(slic(img, cfg.slic_k, cfg.slic_compactness, cfg.slic_iters))
    hp = fft_highpass(img, cfg.highpass_radius_frac)
    return SelfInfoStack(edge=edge, superpixel_boundary=sp, highpass=hp)
