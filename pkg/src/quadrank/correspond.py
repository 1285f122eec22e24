"""Correspondence pairs and training-quadruple sampling.

Two correspondence sources are supported: synthetic area-preserving
affine warps of a single image (fully-unsupervised setting) and
pixel-aligned image pairs (cross-modal setting, e.g. intensity/depth).

A quadruple holds four normalized patches: (p1, p3) and (p2, p4) are
correspondence pairs across the two images; p1, p2 come from image a and
p3, p4 from image b. Patch transforms follow the invariance/augmentation
protocol: the invariance class draws one transform per image side
(applied to both of its patches), the augmentation class one transform
per correspondence (applied to both of its patches).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .image import PATCH_RADIUS, bilinear, extract_patches

SMALL_WARP_STRETCH = 1.1
LARGE_WARP_STRETCH = 2.0
MIN_POINT_SEPARATION = 3.0

IDENTITY_MAPPING = np.eye(3)


@dataclass(frozen=True)
class WarpSpec:
    """Area-preserving affine warp rot(a) @ diag(s, 1/s) @ rot(-a) plus
    a gain/bias illumination change."""

    alpha: float
    stretch: float
    gain: float = 1.0
    bias: float = 0.0

    @classmethod
    def sample(cls, rng: np.random.Generator, max_stretch: float, illumination: bool = True):
        alpha = rng.uniform(0.0, 2.0 * math.pi)
        stretch = rng.uniform(1.0, max_stretch)
        if illumination:
            gain = rng.uniform(0.7, 1.3)
            bias = rng.uniform(-0.1, 0.1)
        else:
            gain, bias = 1.0, 0.0
        return cls(alpha=alpha, stretch=stretch, gain=gain, bias=bias)

    @property
    def affine(self) -> np.ndarray:
        """2x2 affine part; determinant is 1 by construction."""
        c, s = math.cos(self.alpha), math.sin(self.alpha)
        rot = np.array([[c, -s], [s, c]])
        stretch = np.diag([self.stretch, 1.0 / self.stretch])
        return rot @ stretch @ rot.T


def affine_about_center(mat: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Lift a 2x2 linear map to a 3x3 homography anchored at the image center."""
    h, w = shape
    center = np.array([(w - 1) / 2.0, (h - 1) / 2.0])
    out = np.eye(3)
    out[:2, :2] = mat
    out[:2, 2] = center - mat @ center
    return out


def apply_mapping(mapping: np.ndarray, xs, ys):
    """Apply a 3x3 point mapping (homography) to coordinate arrays."""
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    denom = mapping[2, 0] * xs + mapping[2, 1] * ys + mapping[2, 2]
    mx = (mapping[0, 0] * xs + mapping[0, 1] * ys + mapping[0, 2]) / denom
    my = (mapping[1, 0] * xs + mapping[1, 1] * ys + mapping[1, 2]) / denom
    return mx, my


def warp_image(img: np.ndarray, mapping: np.ndarray) -> np.ndarray:
    """Resample so that output(mapping @ p) shows img(p); clamped bilinear."""
    h, w = img.shape
    inv = np.linalg.inv(mapping)
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    sx, sy = apply_mapping(inv, xs, ys)
    return bilinear(img, sx, sy).astype(np.float32)


@dataclass(frozen=True)
class CorrespondencePair:
    """Two images plus an invertible ground-truth point map a -> b."""

    image_a: np.ndarray
    image_b: np.ndarray
    mapping: np.ndarray
    name: str = ""
    transform_class: str = ""

    def __post_init__(self):
        det = np.linalg.det(self.mapping[:2, :2])
        if abs(det) <= 1e-9:
            raise ValueError(f"mapping not invertible: affine determinant {det}")

    def map_points(self, xs, ys):
        return apply_mapping(self.mapping, xs, ys)

    def inverse(self) -> "CorrespondencePair":
        return CorrespondencePair(
            image_a=self.image_b,
            image_b=self.image_a,
            mapping=np.linalg.inv(self.mapping),
            name=self.name,
            transform_class=self.transform_class,
        )

    @property
    def valid_bounds(self) -> tuple[float, float, float, float]:
        """Inset rectangle (x0, x1, y0, y1) of image a with full patch support."""
        h, w = self.image_a.shape
        return (
            float(PATCH_RADIUS),
            float(w - 1 - PATCH_RADIUS),
            float(PATCH_RADIUS),
            float(h - 1 - PATCH_RADIUS),
        )

    def valid_mask(self, xs, ys) -> np.ndarray:
        """True where (x, y) and its mapped point both have full patch support."""
        x0, x1, y0, y1 = self.valid_bounds
        hb, wb = self.image_b.shape
        mx, my = self.map_points(xs, ys)
        inside_a = (xs >= x0) & (xs <= x1) & (ys >= y0) & (ys <= y1)
        inside_b = (
            (mx >= PATCH_RADIUS)
            & (mx <= wb - 1 - PATCH_RADIUS)
            & (my >= PATCH_RADIUS)
            & (my <= hb - 1 - PATCH_RADIUS)
        )
        return inside_a & inside_b

    def sample_valid(self, rng: np.random.Generator, n: int, max_tries: int = 200) -> np.ndarray:
        """Draw n points uniformly from the valid region; shape (n, 2)."""
        x0, x1, y0, y1 = self.valid_bounds
        if x1 <= x0 or y1 <= y0:
            raise ValueError("valid region too small: image lacks patch support")
        out = np.empty((n, 2))
        filled = 0
        for _ in range(max_tries):
            m = max(n - filled, 16)
            xs = rng.uniform(x0, x1, m)
            ys = rng.uniform(y0, y1, m)
            ok = self.valid_mask(xs, ys)
            good = np.count_nonzero(ok)
            take = min(good, n - filled)
            out[filled : filled + take, 0] = xs[ok][:take]
            out[filled : filled + take, 1] = ys[ok][:take]
            filled += take
            if filled == n:
                return out
        raise ValueError("valid region too small: rejection sampling failed")


def make_warp_pair(
    img: np.ndarray, spec: WarpSpec, rng: np.random.Generator | None = None
) -> CorrespondencePair:
    """Warp a whole image by an area-preserving affine map about its center.

    The returned pair maps a-coordinates to b-coordinates through the
    affine; the warped image additionally gets the spec's illumination
    change, clamped to [0, 1].
    """
    h, w = img.shape
    if h < 64 or w < 64:
        raise ValueError(f"image {w}x{h} too small for warp pairs (need >= 64x64)")
    mapping = affine_about_center(spec.affine, img.shape)
    warped = warp_image(img, mapping)
    warped = np.clip(spec.gain * warped + spec.bias, 0.0, 1.0).astype(np.float32)
    return CorrespondencePair(
        image_a=img.astype(np.float32, copy=False),
        image_b=warped,
        mapping=mapping,
        transform_class="warp",
    )


def make_aligned_pair(img_a: np.ndarray, img_b: np.ndarray, name: str = "") -> CorrespondencePair:
    """Pixel-aligned pair (identity mapping), e.g. registered cross-modal frames."""
    if img_a.shape != img_b.shape:
        raise ValueError(f"aligned pair size mismatch: {img_a.shape} vs {img_b.shape}")
    return CorrespondencePair(
        image_a=img_a.astype(np.float32, copy=False),
        image_b=img_b.astype(np.float32, copy=False),
        mapping=IDENTITY_MAPPING.copy(),
        name=name,
        transform_class="aligned",
    )


@dataclass(frozen=True)
class TransformClass:
    """A family of patch transforms sampled as (rotation, scale) pairs."""

    rotation_range: tuple[float, float] = (0.0, 0.0)
    scale_range: tuple[float, float] = (1.0, 1.0)

    def sample(self, rng: np.random.Generator, n: int = 1):
        rotations = rng.uniform(self.rotation_range[0], self.rotation_range[1], n)
        scales = rng.uniform(self.scale_range[0], self.scale_range[1], n)
        return rotations, scales


ROTATION_INVARIANCE = TransformClass(rotation_range=(0.0, 2.0 * math.pi))
SCALE_AUGMENTATION = TransformClass(scale_range=(1.0 / 3.0, 3.0))
IDENTITY_TRANSFORMS = TransformClass()


@dataclass(frozen=True)
class Quadruple:
    """One training example: four normalized patches."""

    p1: np.ndarray
    p2: np.ndarray
    p3: np.ndarray
    p4: np.ndarray
    point_i: tuple[float, float]
    point_j: tuple[float, float]

    @property
    def patches(self) -> np.ndarray:
        return np.stack([self.p1, self.p2, self.p3, self.p4])


@dataclass
class QuadruplePool:
    """A batch of quadruples in array form.

    `patches[k]` holds patch k+1 of every quadruple; `rotations` and
    `scales` record the transform actually applied to each patch, so the
    invariance/augmentation sharing pattern is directly inspectable.
    """

    patches: np.ndarray  # (4, n, 17, 17) float32
    points_a: np.ndarray  # (2, n, 2): rows i, j; columns (x, y)
    points_b: np.ndarray
    rotations: np.ndarray  # (4, n)
    scales: np.ndarray  # (4, n)

    def __len__(self) -> int:
        return self.patches.shape[1]

    def batches(self, batch_size: int):
        """Full consecutive slices of batch_size quadruples; remainder dropped."""
        n = len(self) // batch_size
        return [
            self.patches[:, i * batch_size : (i + 1) * batch_size] for i in range(n)
        ]


def sample_quadruples(
    pair: CorrespondencePair,
    n: int,
    rng: np.random.Generator,
    invariance: TransformClass = ROTATION_INVARIANCE,
    augmentation: TransformClass = SCALE_AUGMENTATION,
    min_separation: float = MIN_POINT_SEPARATION,
) -> QuadruplePool:
    """Sample n quadruples from one correspondence pair.

    Point pairs are drawn uniformly from the valid region with a minimum
    separation; each quadruple then draws two invariance transforms
    (one per image side) and two augmentation transforms (one per
    correspondence).
    """
    pts_i = pair.sample_valid(rng, n)
    pts_j = np.empty_like(pts_i)
    pending = np.arange(n)
    for _ in range(200):
        if pending.size == 0:
            break
        cand = pair.sample_valid(rng, pending.size)
        dist = np.hypot(*(cand - pts_i[pending]).T)
        ok = dist >= min_separation
        pts_j[pending[ok]] = cand[ok]
        pending = pending[~ok]
    if pending.size:
        raise ValueError("valid region too small: cannot place separated point pairs")

    inv_rot, inv_scale = invariance.sample(rng, 2 * n)
    aug_rot, aug_scale = augmentation.sample(rng, 2 * n)
    inv_rot = inv_rot.reshape(2, n)
    inv_scale = inv_scale.reshape(2, n)
    aug_rot = aug_rot.reshape(2, n)
    aug_scale = aug_scale.reshape(2, n)

    # patch -> (invariance index by image side, augmentation index by pair)
    side = [0, 0, 1, 1]
    member = [0, 1, 0, 1]
    rotations = np.stack([inv_rot[side[k]] + aug_rot[member[k]] for k in range(4)])
    scales = np.stack([inv_scale[side[k]] * aug_scale[member[k]] for k in range(4)])

    mi_x, mi_y = pair.map_points(pts_i[:, 0], pts_i[:, 1])
    mj_x, mj_y = pair.map_points(pts_j[:, 0], pts_j[:, 1])
    centers_x = [pts_i[:, 0], pts_j[:, 0], mi_x, mj_x]
    centers_y = [pts_i[:, 1], pts_j[:, 1], mi_y, mj_y]
    images = [pair.image_a, pair.image_a, pair.image_b, pair.image_b]

    patches = np.empty((4, n, 17, 17), dtype=np.float32)
    for k in range(4):
        patches[k] = extract_patches(images[k], centers_x[k], centers_y[k], scales[k], rotations[k])
    points_b = np.stack([np.column_stack([mi_x, mi_y]), np.column_stack([mj_x, mj_y])])
    return QuadruplePool(
        patches=patches,
        points_a=np.stack([pts_i, pts_j]),
        points_b=points_b,
        rotations=rotations,
        scales=scales,
    )


def sample_quadruple(
    pair: CorrespondencePair,
    rng: np.random.Generator,
    invariance: TransformClass = ROTATION_INVARIANCE,
    augmentation: TransformClass = SCALE_AUGMENTATION,
) -> Quadruple:
    pool = sample_quadruples(pair, 1, rng, invariance, augmentation)
    return Quadruple(
        p1=pool.patches[0, 0],
        p2=pool.patches[1, 0],
        p3=pool.patches[2, 0],
        p4=pool.patches[3, 0],
        point_i=tuple(pool.points_a[0, 0]),
        point_j=tuple(pool.points_a[1, 0]),
    )


def sample_epoch(
    sources: list,
    quads_per_pair: int,
    batch_size: int,
    rng: np.random.Generator,
    invariance: TransformClass = ROTATION_INVARIANCE,
    augmentation: TransformClass = SCALE_AUGMENTATION,
):
    """One epoch segment: pick one source, sample its quadruple pool.

    Each source is either a CorrespondencePair or a callable(rng) that
    produces one. Returns (source index, pool); cut training batches with
    pool.batches(batch_size).
    """
    if batch_size < 1 or batch_size > quads_per_pair:
        raise ValueError("need 1 <= batch_size <= quads_per_pair")
    idx = int(rng.integers(len(sources)))
    source = sources[idx]
    pair = source(rng) if callable(source) else source
    pool = sample_quadruples(pair, quads_per_pair, rng, invariance, augmentation)
    return idx, pool
