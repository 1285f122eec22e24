"""Synthetic benchmark fixtures: textured images, transformed pairs per
transformation class, and the pair-manifest file format.

A pair manifest is a small text file naming the two images (relative to
the manifest) and the 3x3 ground-truth mapping, one matrix row per line
with 17 significant digits, so real benchmark homography data can be
dropped in with the same layout.
"""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np

from .correspond import (
    CorrespondencePair,
    WarpSpec,
    affine_about_center,
    make_aligned_pair,
    make_warp_pair,
    warp_image,
)
from .image import gaussian_blur
from .imgio import atomic_write_bytes, load_image, write_pgm

TRANSFORM_CLASSES = ("viewpoint", "zoom-rotation", "illumination", "blur")
MANIFEST_SUFFIX = ".pair"


def make_texture(size: int, rng: np.random.Generator) -> np.ndarray:
    """Textured synthetic image: multi-scale filtered noise plus shapes.

    Weighted toward fine detail so scale-space detectors find plenty of
    extrema, as they would on a real photograph."""
    img = np.zeros((size, size), dtype=np.float64)
    for sigma, weight in ((0.0, 0.3), (0.6, 1.0), (1.5, 0.5), (3.0, 0.3), (6.0, 0.2)):
        noise = rng.standard_normal((size, size))
        if sigma > 0:
            layer = gaussian_blur(noise.astype(np.float32), sigma).astype(np.float64)
        else:
            layer = noise
        img += weight * layer / max(layer.std(), 1e-9)

    ys, xs = np.mgrid[0:size, 0:size]
    for _ in range(40):
        cx, cy = rng.uniform(0, size, 2)
        radius = rng.uniform(2.0, 12.0)
        value = rng.uniform(-1.5, 1.5)
        mask = (xs - cx) ** 2 + (ys - cy) ** 2 <= radius * radius
        img[mask] = 0.5 * img[mask] + value
    for _ in range(10):
        x0, y0 = rng.uniform(0, size - 20, 2)
        w, h = rng.uniform(5, 25, 2)
        value = rng.uniform(-1.5, 1.5)
        sl = (slice(int(y0), int(min(size, y0 + h))), slice(int(x0), int(min(size, x0 + w))))
        img[sl] = 0.5 * img[sl] + value

    lo, hi = img.min(), img.max()
    return (0.1 + 0.8 * (img - lo) / (hi - lo)).astype(np.float32)


def _zoom_rotation_pair(img: np.ndarray, rng: np.random.Generator) -> CorrespondencePair:
    theta = rng.uniform(0.0, 2.0 * math.pi)
    zoom = rng.uniform(0.8, 1.25)
    c, s = math.cos(theta), math.sin(theta)
    mat = zoom * np.array([[c, -s], [s, c]])
    mapping = affine_about_center(mat, img.shape)
    return CorrespondencePair(
        image_a=img,
        image_b=warp_image(img, mapping),
        mapping=mapping,
        transform_class="zoom-rotation",
    )


def make_class_pair(
    img: np.ndarray, transform_class: str, rng: np.random.Generator
) -> CorrespondencePair:
    """One transformed pair of the given class with its exact mapping."""
    if transform_class == "viewpoint":
        spec = WarpSpec.sample(rng, max_stretch=2.0, illumination=False)
        pair = make_warp_pair(img, spec)
    elif transform_class == "zoom-rotation":
        pair = _zoom_rotation_pair(img, rng)
    elif transform_class == "illumination":
        gain = rng.uniform(0.6, 1.4)
        bias = rng.uniform(-0.15, 0.15)
        warped = np.clip(gain * img + bias, 0.0, 1.0).astype(np.float32)
        pair = make_aligned_pair(img, warped)
    elif transform_class == "blur":
        sigma = rng.uniform(1.0, 2.5)
        pair = make_aligned_pair(img, gaussian_blur(img, sigma))
    else:
        raise ValueError(f"unknown transform class {transform_class!r}")
    return CorrespondencePair(
        image_a=pair.image_a,
        image_b=pair.image_b,
        mapping=pair.mapping,
        transform_class=transform_class,
    )


def write_pair_manifest(
    path: Path, image_a: str, image_b: str, transform_class: str, mapping: np.ndarray
) -> None:
    lines = [
        "# quadrank pair manifest",
        f"image_a {image_a}",
        f"image_b {image_b}",
        f"class {transform_class}",
    ]
    for row in np.asarray(mapping, dtype=np.float64):
        lines.append(" ".join(f"{v:.17g}" for v in row))
    atomic_write_bytes(path, ("\n".join(lines) + "\n").encode("ascii"))


def read_pair_manifest(path: str | Path) -> CorrespondencePair:
    path = Path(path)
    image_a = image_b = None
    transform_class = "unknown"
    matrix_rows = []
    for line in path.read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("image_a "):
            image_a = line.split(None, 1)[1]
        elif line.startswith("image_b "):
            image_b = line.split(None, 1)[1]
        elif line.startswith("class "):
            transform_class = line.split(None, 1)[1]
        else:
            matrix_rows.append([float(v) for v in line.split()])
    if image_a is None or image_b is None:
        raise ValueError(f"bad pair manifest {path}: missing image entries")
    if len(matrix_rows) != 3 or any(len(r) != 3 for r in matrix_rows):
        raise ValueError(f"bad pair manifest {path}: mapping must be a 3x3 matrix")
    return CorrespondencePair(
        image_a=load_image(path.parent / image_a),
        image_b=load_image(path.parent / image_b),
        mapping=np.array(matrix_rows, dtype=np.float64),
        name=path.stem,
        transform_class=transform_class,
    )


def load_pairs(directory: str | Path) -> list[CorrespondencePair]:
    """All pair manifests under a directory, sorted by name."""
    directory = Path(directory)
    manifests = sorted(directory.rglob(f"*{MANIFEST_SUFFIX}"))
    if not manifests:
        raise ValueError(f"no *{MANIFEST_SUFFIX} manifests under {directory}")
    return [read_pair_manifest(m) for m in manifests]


def make_fixtures(
    out_dir: str | Path,
    seed: int,
    bases: int = 5,
    size: int = 256,
    classes: tuple[str, ...] = TRANSFORM_CLASSES,
) -> list[Path]:
    """Generate `bases` textured images x one pair per class.

    Writes PGM images plus one manifest per pair under out_dir; returns
    the manifest paths. Regenerating with the same seed is bit-identical.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    manifests = []
    for b in range(bases):
        base = make_texture(size, rng)
        base_name = f"base{b:02d}.pgm"
        write_pgm(out_dir / base_name, base)
        # Pair generation reads the quantized PGM back so that manifest
        # consumers see exactly the image the mapping was built for.
        base_q = load_image(out_dir / base_name)
        for cls in classes:
            pair = make_class_pair(base_q, cls, rng)
            warped_name = f"base{b:02d}_{cls}.pgm"
            write_pgm(out_dir / warped_name, pair.image_b)
            manifest = out_dir / f"base{b:02d}_{cls}{MANIFEST_SUFFIX}"
            write_pair_manifest(manifest, base_name, warped_name, cls, pair.mapping)
            manifests.append(manifest)
    return manifests
