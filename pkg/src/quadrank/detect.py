"""Detection pipeline: dense multi-scale response, 3x3x3 scale-space
non-maximum suppression, Taylor sub-sample localization, quantile
selection, plus the hand-crafted and random linear baselines.

Responses live in per-octave stacks that mirror the pyramid's octave
stacks: scales_per_octave detectable maps flanked by one overlap map on
each side, so every detectable sample has a full 26-neighborhood.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .image import PATCH_RADIUS, PATCH_SIZE, ScalePyramid, build_pyramid, max_octaves
from .imgio import atomic_write_bytes
from .model import ResponseModel, build_model, forward_dense

DEFAULT_DOG_SIGMA = 1.6
DEFAULT_DOG_RATIO = 2.0 ** (1.0 / 3.0)


@dataclass(frozen=True)
class Detection:
    """A localized interest point in base-image coordinates.

    `s` is the continuous blur sigma; `polarity` records whether the
    point was a scale-space maximum ("max") or minimum ("min")."""

    x: float
    y: float
    s: float
    response: float
    polarity: str


@dataclass(frozen=True)
class OctaveResponses:
    maps: np.ndarray  # (scales_per_octave + 2, vh, vw), overlaps at both ends
    sigmas: np.ndarray
    octave: int
    stride: int


@dataclass(frozen=True)
class ResponseVolume:
    octaves: list[OctaveResponses]
    scales_per_octave: int
    sigma0: float

    @property
    def maps(self) -> list[np.ndarray]:
        """Detectable response maps, one per pyramid level."""
        s = self.scales_per_octave
        return [o.maps[j] for o in self.octaves for j in range(1, s + 1)]


def _worker_count() -> int:
    raw = os.environ.get("QUADRANK_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def compute_volume(model: ResponseModel, pyramid: ScalePyramid) -> ResponseVolume:
    """Dense response at every stack level (overlap levels included)."""
    tasks = [
        (oi, j, stack.images[j])
        for oi, stack in enumerate(pyramid.stacks)
        for j in range(len(stack.images))
    ]
    workers = min(_worker_count(), len(tasks))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(lambda t: forward_dense(model, t[2]), tasks))
    else:
        results = [forward_dense(model, img) for _, _, img in tasks]
    out = []
    pos = 0
    for stack in pyramid.stacks:
        n = len(stack.images)
        out.append(
            OctaveResponses(
                maps=np.stack(results[pos : pos + n]),
                sigmas=stack.sigmas.copy(),
                octave=stack.octave,
                stride=stack.stride,
            )
        )
        pos += n
    return ResponseVolume(
        octaves=out,
        scales_per_octave=pyramid.scales_per_octave,
        sigma0=pyramid.sigma0,
    )


def nms_3x3x3(vol: ResponseVolume) -> list[tuple[int, int, int, str]]:
    """Strict 26-neighbor extrema over the scale-space response volume.

    Returns (level, x, y, polarity) tuples; level is the global
    detectable level index and x, y are level pixel coordinates.
    Boundary samples (spatial or scale) are never selected.
    """
    s = vol.scales_per_octave
    candidates = []
    for oct_resp in vol.octaves:
        m = oct_resp.maps
        if m.shape[0] < 3 or m.shape[1] < 3 or m.shape[2] < 3:
            continue
        core = m[1 : s + 1, 1:-1, 1:-1]
        is_max = np.ones(core.shape, dtype=bool)
        is_min = np.ones(core.shape, dtype=bool)
        vh, vw = m.shape[1], m.shape[2]
        for dz in (-1, 0, 1):
            for dy in (-1, 0, 1):
                for dx in (-1, 0, 1):
                    if dz == 0 and dy == 0 and dx == 0:
                        continue
                    nb = m[1 + dz : s + 1 + dz, 1 + dy : vh - 1 + dy, 1 + dx : vw - 1 + dx]
                    is_max &= core > nb
                    is_min &= core < nb
        for polarity, mask in (("max", is_max), ("min", is_min)):
            for z, iy, ix in np.argwhere(mask):
                level = oct_resp.octave * s + z  # z index in core = stack z - 1
                candidates.append(
                    (level, int(ix) + 1 + PATCH_RADIUS, int(iy) + 1 + PATCH_RADIUS, polarity)
                )
    candidates.sort(key=lambda c: (c[0], c[2], c[1], c[3]))
    return candidates


def _derivatives(m: np.ndarray, z: int, iy: int, ix: int):
    """Central-difference gradient and Hessian in (x, y, z) order."""
    c = float(m[z, iy, ix])
    dx = (float(m[z, iy, ix + 1]) - float(m[z, iy, ix - 1])) / 2.0
    dy = (float(m[z, iy + 1, ix]) - float(m[z, iy - 1, ix])) / 2.0
    dz = (float(m[z + 1, iy, ix]) - float(m[z - 1, iy, ix])) / 2.0
    dxx = float(m[z, iy, ix + 1]) + float(m[z, iy, ix - 1]) - 2.0 * c
    dyy = float(m[z, iy + 1, ix]) + float(m[z, iy - 1, ix]) - 2.0 * c
    dzz = float(m[z + 1, iy, ix]) + float(m[z - 1, iy, ix]) - 2.0 * c
    dxy = (
        float(m[z, iy + 1, ix + 1])
        - float(m[z, iy + 1, ix - 1])
        - float(m[z, iy - 1, ix + 1])
        + float(m[z, iy - 1, ix - 1])
    ) / 4.0
    dxz = (
        float(m[z + 1, iy, ix + 1])
        - float(m[z + 1, iy, ix - 1])
        - float(m[z - 1, iy, ix + 1])
        + float(m[z - 1, iy, ix - 1])
    ) / 4.0
    dyz = (
        float(m[z + 1, iy + 1, ix])
        - float(m[z + 1, iy - 1, ix])
        - float(m[z - 1, iy + 1, ix])
        + float(m[z - 1, iy - 1, ix])
    ) / 4.0
    grad = np.array([dx, dy, dz])
    hess = np.array([[dxx, dxy, dxz], [dxy, dyy, dyz], [dxz, dyz, dzz]])
    return grad, hess


def localize_taylor(
    vol: ResponseVolume, candidate: tuple[int, int, int, str], max_iter: int = 5
) -> Detection | None:
    """Refine one NMS candidate by a second-order Taylor fit.

    Re-centers on the adjacent sample while any offset component exceeds
    0.5 (up to max_iter tries); rejects on singular Hessians, volume
    boundaries, or drift beyond 0.5 * max_iter samples.
    """
    level, x, y, polarity = candidate
    s = vol.scales_per_octave
    oct_resp = vol.octaves[level // s]
    m = oct_resp.maps.astype(np.float64, copy=False)
    _, vh, vw = m.shape
    z = level % s + 1
    iy, ix = y - PATCH_RADIUS, x - PATCH_RADIUS
    start = np.array([ix, iy, z], dtype=np.float64)
    drift_cap = 0.5 * max_iter
    for _ in range(max_iter):
        if not (1 <= z <= s and 1 <= iy <= vh - 2 and 1 <= ix <= vw - 2):
            return None
        grad, hess = _derivatives(m, z, iy, ix)
        if abs(np.linalg.det(hess)) < 1e-12:
            return None
        delta = -np.linalg.solve(hess, grad)
        if np.max(np.abs(delta)) <= 0.5:
            pos = np.array([ix, iy, z], dtype=np.float64) + delta
            if np.max(np.abs(pos - start)) > drift_cap:
                return None
            refined = float(m[z, iy, ix]) + 0.5 * float(grad @ delta)
            stride = oct_resp.stride
            gx = (pos[0] + PATCH_RADIUS) * stride
            gy = (pos[1] + PATCH_RADIUS) * stride
            index = oct_resp.octave * s - 1 + pos[2]
            sigma = vol.sigma0 * 2.0 ** (index / s)
            return Detection(x=gx, y=gy, s=sigma, response=refined, polarity=polarity)
        ix += int(np.sign(delta[0])) if abs(delta[0]) > 0.5 else 0
        iy += int(np.sign(delta[1])) if abs(delta[1]) > 0.5 else 0
        z += int(np.sign(delta[2])) if abs(delta[2]) > 0.5 else 0
    return None


def select_top(detections: list[Detection], n: int) -> list[Detection]:
    """Top-n by absolute response; ties broken by (scale, y, x)."""
    if n < 1:
        raise ValueError("n must be >= 1")
    ordered = sorted(detections, key=lambda d: (-abs(d.response), d.s, d.y, d.x))
    return ordered[:n]


def make_dog_model(
    sigma_inner: float = DEFAULT_DOG_SIGMA,
    sigma_outer: float = DEFAULT_DOG_SIGMA * DEFAULT_DOG_RATIO,
) -> ResponseModel:
    """Linear model whose filter is a difference of Gaussians.

    The 17x17 filter samples G(sigma_outer) - G(sigma_inner) on the
    patch lattice; bias is zero. Sums to ~0 (zero-DC up to truncation).
    """
    r = PATCH_RADIUS
    u, v = np.meshgrid(np.arange(-r, r + 1), np.arange(-r, r + 1))
    rsq = (u * u + v * v).astype(np.float64)

    def g(sigma):
        return np.exp(-rsq / (2.0 * sigma * sigma)) / (2.0 * math.pi * sigma * sigma)

    model = build_model("linear", seed=0)
    model.layers[0].weight[0, 0] = (g(sigma_outer) - g(sigma_inner)).astype(np.float32)
    model.layers[0].bias[...] = 0.0
    return model


def make_random_model(seed: int) -> ResponseModel:
    """Untrained linear model with the standard initialization."""
    return build_model("linear", seed=seed)


def detect(
    model: ResponseModel,
    img: np.ndarray,
    n_points: int,
    threshold: float = 0.0,
    octaves: int | None = None,
    scales_per_octave: int = 3,
    sigma0: float = 1.6,
) -> list[Detection]:
    """Full pipeline: response volume, NMS, Taylor refinement, |response|
    threshold, top-n selection. Deterministic for identical inputs."""
    if octaves is None:
        octaves = min(3, max_octaves(img))
    pyramid = build_pyramid(img, octaves, scales_per_octave, sigma0)
    vol = compute_volume(model, pyramid)
    detections = []
    for cand in nms_3x3x3(vol):
        det = localize_taylor(vol, cand)
        if det is not None and abs(det.response) > threshold:
            detections.append(det)
    return select_top(detections, n_points)


def write_detections_csv(path: str | Path, detections: list[Detection], comment: str = "") -> None:
    """CSV export: x,y,scale,response,polarity at fixed 6-decimal precision."""
    lines = []
    if comment:
        lines.append(f"# {comment}")
    lines.append("x,y,scale,response,polarity")
    for d in detections:
        lines.append(f"{d.x:.6f},{d.y:.6f},{d.s:.6f},{d.response:.6f},{d.polarity}")
    atomic_write_bytes(path, ("\n".join(lines) + "\n").encode("ascii"))
