"""Grayscale image primitives: blur, scale pyramid, sampling, patches.

Images are 2-D float32 arrays, row-major, intensities nominally in [0, 1].
Coordinates are (x, y) with x = column, y = row, origin at the top-left
pixel center; rotations are counterclockwise in image coordinates (y down).
Border policy is clamp-to-edge everywhere.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import correlate1d

PATCH_SIZE = 17
PATCH_RADIUS = PATCH_SIZE // 2

# Patches with standard deviation below this are treated as flat and
# normalized to all zeros instead of dividing by ~0.
FLAT_STD = 1e-8


def gaussian_kernel(sigma: float) -> np.ndarray:
    """1-D Gaussian kernel, radius ceil(3*sigma), renormalized to sum 1."""
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    if sigma == 0:
        return np.ones(1)
    radius = math.ceil(3.0 * sigma)
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur with clamp-to-edge borders."""
    k = gaussian_kernel(sigma)
    if k.size == 1:
        return img.astype(np.float32, copy=True)
    out = correlate1d(img.astype(np.float64), k, axis=0, mode="nearest")
    out = correlate1d(out, k, axis=1, mode="nearest")
    return out.astype(np.float32)


def _downsample2(img: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(img[::2, ::2])


@dataclass(frozen=True)
class PyramidLevel:
    """One blur level: image at the octave's resolution plus its metadata.

    `sigma` is the blur in base-image pixel units; `stride` maps level
    pixel coordinates back to base-image coordinates.
    """

    image: np.ndarray
    sigma: float
    octave: int
    stride: int
    index: int


@dataclass(frozen=True)
class OctaveStack:
    """All blur levels of one octave at a common resolution.

    Holds scales_per_octave detectable levels plus one overlap level on
    each side so every detectable level has both scale neighbors during
    non-maximum suppression.
    """

    images: list[np.ndarray]
    sigmas: np.ndarray
    octave: int
    stride: int


@dataclass(frozen=True)
class ScalePyramid:
    base: np.ndarray
    octaves: int
    scales_per_octave: int
    sigma0: float
    stacks: list[OctaveStack] = field(repr=False)

    def sigma_at(self, index: float) -> float:
        """Blur sigma for a (possibly fractional) global level index."""
        return self.sigma0 * 2.0 ** (index / self.scales_per_octave)

    @property
    def levels(self) -> list[PyramidLevel]:
        """Detectable levels in increasing-sigma order (overlaps excluded)."""
        out = []
        s = self.scales_per_octave
        for stack in self.stacks:
            for j in range(1, s + 1):
                idx = stack.octave * s + (j - 1)
                out.append(
                    PyramidLevel(
                        image=stack.images[j],
                        sigma=float(stack.sigmas[j]),
                        octave=stack.octave,
                        stride=stack.stride,
                        index=idx,
                    )
                )
        return out


def max_octaves(img: np.ndarray, min_size: int = PATCH_SIZE) -> int:
    """Largest octave count whose smallest level still fits min_size."""
    n = 0
    h, w = img.shape
    while min(h, w) >= min_size:
        n += 1
        h = (h + 1) // 2
        w = (w + 1) // 2
    return n


def build_pyramid(
    img: np.ndarray,
    octaves: int,
    scales_per_octave: int = 3,
    sigma0: float = 1.6,
) -> ScalePyramid:
    """Gaussian scale pyramid with geometric sigma schedule.

    Level k (k = 0 .. octaves*scales_per_octave - 1) carries blur
    sigma0 * 2**(k / scales_per_octave) relative to the base image and
    lives at spatial stride 2**(k // scales_per_octave). Levels are
    produced incrementally, each blurred exactly once from its
    predecessor; octave boundaries downsample by 2.
    """
    if octaves < 1:
        raise ValueError("octaves must be >= 1")
    if scales_per_octave < 1:
        raise ValueError("scales_per_octave must be >= 1")
    if max_octaves(img) < octaves:
        raise ValueError(
            f"image too small: {img.shape[1]}x{img.shape[0]} supports at most "
            f"{max_octaves(img)} octave(s), requested {octaves}"
        )

    s = scales_per_octave
    img = img.astype(np.float32, copy=False)
    stacks: list[OctaveStack] = []
    for octave in range(octaves):
        stride = 2**octave
        # Stack position j holds global index octave*s + j - 1; positions
        # 0 and s+1 are the overlap levels.
        sigmas = sigma0 * 2.0 ** ((octave * s + np.arange(s + 2) - 1.0) / s)
        own = sigmas / stride
        if octave == 0:
            first = gaussian_blur(img, own[0])
        else:
            first = _downsample2(stacks[-1].images[s])
        images = [first]
        for j in range(1, s + 2):
            inc = math.sqrt(own[j] ** 2 - own[j - 1] ** 2)
            images.append(gaussian_blur(images[-1], inc))
        stacks.append(
            OctaveStack(images=images, sigmas=sigmas, octave=octave, stride=stride)
        )
    return ScalePyramid(
        base=img,
        octaves=octaves,
        scales_per_octave=s,
        sigma0=sigma0,
        stacks=stacks,
    )


def bilinear(img: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Vectorized bilinear sampling; coordinates clamped to the image."""
    h, w = img.shape
    xs = np.clip(xs, 0.0, w - 1.0)
    ys = np.clip(ys, 0.0, h - 1.0)
    x0 = np.floor(xs).astype(np.intp)
    y0 = np.floor(ys).astype(np.intp)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (xs - x0).astype(np.float64)
    fy = (ys - y0).astype(np.float64)
    im = img.astype(np.float64, copy=False)
    top = im[y0, x0] * (1.0 - fx) + im[y0, x1] * fx
    bot = im[y1, x0] * (1.0 - fx) + im[y1, x1] * fx
    return top * (1.0 - fy) + bot * fy


def sample_bilinear(img: np.ndarray, x: float, y: float) -> float:
    """Bilinear interpolation of the four surrounding pixels."""
    return float(bilinear(img, np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)))


def normalize_patch(raw: np.ndarray) -> np.ndarray:
    """Standardize a patch to mean 0 / stddev 1; flat patches become zeros."""
    values = raw.astype(np.float64, copy=False)
    mean = values.mean()
    std = values.std()
    if std < FLAT_STD:
        return np.zeros_like(raw, dtype=np.float32)
    return ((values - mean) / std).astype(np.float32)


# (v, u) offsets of the 17x17 sampling lattice, rows = v, columns = u.
_LATTICE_U, _LATTICE_V = np.meshgrid(
    np.arange(-PATCH_RADIUS, PATCH_RADIUS + 1, dtype=np.float64),
    np.arange(-PATCH_RADIUS, PATCH_RADIUS + 1, dtype=np.float64),
)


def extract_patches_raw(
    img: np.ndarray,
    xs: np.ndarray,
    ys: np.ndarray,
    scales: np.ndarray | float = 1.0,
    rotations: np.ndarray | float = 0.0,
) -> np.ndarray:
    """Sample raw (unnormalized) 17x17 patches on rotated, scaled lattices.

    The sample offset for lattice cell (u, v) is scale * Rot(rotation) @ (u, v);
    returns an array of shape (n, 17, 17) in float32.
    """
    xs = np.atleast_1d(np.asarray(xs, dtype=np.float64))
    ys = np.atleast_1d(np.asarray(ys, dtype=np.float64))
    n = xs.shape[0]
    scales = np.broadcast_to(np.asarray(scales, dtype=np.float64), (n,))
    rotations = np.broadcast_to(np.asarray(rotations, dtype=np.float64), (n,))
    c = (np.cos(rotations) * scales)[:, None, None]
    s = (np.sin(rotations) * scales)[:, None, None]
    px = xs[:, None, None] + c * _LATTICE_U - s * _LATTICE_V
    py = ys[:, None, None] + s * _LATTICE_U + c * _LATTICE_V
    return bilinear(img, px, py).astype(np.float32)


def extract_patch_raw(
    img: np.ndarray, x: float, y: float, scale: float = 1.0, rotation: float = 0.0
) -> np.ndarray:
    if scale <= 0:
        raise ValueError(f"scale must be > 0, got {scale}")
    return extract_patches_raw(img, x, y, scale, rotation)[0]


def extract_patch(
    img: np.ndarray, x: float, y: float, scale: float = 1.0, rotation: float = 0.0
) -> np.ndarray:
    """Extract and normalize a 17x17 patch centered at (x, y)."""
    return normalize_patch(extract_patch_raw(img, x, y, scale, rotation))


def extract_patches(
    img: np.ndarray,
    xs: np.ndarray,
    ys: np.ndarray,
    scales: np.ndarray | float = 1.0,
    rotations: np.ndarray | float = 0.0,
) -> np.ndarray:
    """Batched extract + normalize; shape (n, 17, 17)."""
    raw = extract_patches_raw(img, xs, ys, scales, rotations).astype(np.float64)
    means = raw.mean(axis=(1, 2), keepdims=True)
    stds = raw.std(axis=(1, 2), keepdims=True)
    flat = stds[:, 0, 0] < FLAT_STD
    stds[flat] = 1.0
    out = (raw - means) / stds
    out[flat] = 0.0
    return out.astype(np.float32)
