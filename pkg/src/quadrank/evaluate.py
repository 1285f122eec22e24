"""Repeatability measurement under ground-truth point mappings.

A detection's measurement region is the disc of radius 3 * scale around
its location. A detection in image a is re-detected in image b when the
mapped region (an ellipse under the local affine linearization of the
mapping) overlaps a b-region with overlap error below 40%. Repeatability
is the matched count over the smaller common-region detection count,
with both lists truncated to the same requested budget first.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .correspond import CorrespondencePair, apply_mapping
from .detect import Detection, detect, select_top

OVERLAP_ERROR_THRESHOLD = 0.4
REGION_RADIUS_FACTOR = 3.0
GRID_SAMPLES = 200


def mapping_jacobian(mapping: np.ndarray, x: float, y: float) -> np.ndarray:
    """2x2 Jacobian of the homography's point action at (x, y)."""
    h = np.asarray(mapping, dtype=np.float64)
    w = h[2, 0] * x + h[2, 1] * y + h[2, 2]
    fx = h[0, 0] * x + h[0, 1] * y + h[0, 2]
    fy = h[1, 0] * x + h[1, 1] * y + h[1, 2]
    return np.array(
        [
            [(h[0, 0] * w - fx * h[2, 0]) / (w * w), (h[0, 1] * w - fx * h[2, 1]) / (w * w)],
            [(h[1, 0] * w - fy * h[2, 0]) / (w * w), (h[1, 1] * w - fy * h[2, 1]) / (w * w)],
        ]
    )


def region_overlap_error(
    det_a: Detection,
    det_b: Detection,
    mapping: np.ndarray,
    grid: int = GRID_SAMPLES,
) -> float:
    """1 - intersection/union of the two measurement regions in b-frame.

    Region a is the disc of radius 3*s_a mapped through the local affine
    linearization of the mapping (an ellipse); region b is a disc. Areas
    are estimated by sampling a grid x grid lattice over the joint
    bounding box.
    """
    r_a = REGION_RADIUS_FACTOR * det_a.s
    r_b = REGION_RADIUS_FACTOR * det_b.s
    mx, my = apply_mapping(mapping, det_a.x, det_a.y)
    jac = mapping_jacobian(mapping, det_a.x, det_a.y)
    if abs(np.linalg.det(jac)) < 1e-12:
        return 1.0
    jinv = np.linalg.inv(jac)

    ext_x = r_a * float(np.hypot(jac[0, 0], jac[0, 1]))
    ext_y = r_a * float(np.hypot(jac[1, 0], jac[1, 1]))
    lo_x = min(mx - ext_x, det_b.x - r_b)
    hi_x = max(mx + ext_x, det_b.x + r_b)
    lo_y = min(my - ext_y, det_b.y - r_b)
    hi_y = max(my + ext_y, det_b.y + r_b)

    xs = lo_x + (np.arange(grid) + 0.5) * (hi_x - lo_x) / grid
    ys = lo_y + (np.arange(grid) + 0.5) * (hi_y - lo_y) / grid
    gx, gy = np.meshgrid(xs, ys)

    ux = jinv[0, 0] * (gx - mx) + jinv[0, 1] * (gy - my)
    uy = jinv[1, 0] * (gx - mx) + jinv[1, 1] * (gy - my)
    in_a = ux * ux + uy * uy <= r_a * r_a
    in_b = (gx - det_b.x) ** 2 + (gy - det_b.y) ** 2 <= r_b * r_b

    union = np.count_nonzero(in_a | in_b)
    if union == 0:
        return 1.0
    inter = np.count_nonzero(in_a & in_b)
    return 1.0 - inter / union


@dataclass
class RepeatabilityReport:
    n_requested: int
    n_a: int
    n_b: int
    n_correspondences: int
    repeatability: float
    empty_common_region: bool = False
    matches: list[tuple[int, int, float]] = field(default_factory=list)


def _inside(xs, ys, shape) -> np.ndarray:
    h, w = shape
    return (xs >= 0) & (xs <= w - 1) & (ys >= 0) & (ys <= h - 1)


def repeatability(
    dets_a: list[Detection],
    dets_b: list[Detection],
    mapping: np.ndarray,
    n_points: int,
    shape_a: tuple[int, int],
    shape_b: tuple[int, int],
) -> RepeatabilityReport:
    """Matched fraction of budget-truncated detections in the common region.

    Protocol: truncate both lists to n_points by absolute response, drop
    detections whose mapped location falls outside the other image, then
    match greedily by ascending overlap error (one-to-one, accepting
    error < 0.4). Repeatability is matches / min(kept_a, kept_b).
    """
    dets_a = select_top(dets_a, n_points) if dets_a else []
    dets_b = select_top(dets_b, n_points) if dets_b else []
    inv = np.linalg.inv(mapping)

    if dets_a:
        ax = np.array([d.x for d in dets_a])
        ay = np.array([d.y for d in dets_a])
        amx, amy = apply_mapping(mapping, ax, ay)
        keep_a = _inside(amx, amy, shape_b)
        dets_a = [d for d, k in zip(dets_a, keep_a) if k]
        amx, amy = amx[keep_a], amy[keep_a]
    if dets_b:
        bx = np.array([d.x for d in dets_b])
        by = np.array([d.y for d in dets_b])
        bmx, bmy = apply_mapping(inv, bx, by)
        keep_b = _inside(bmx, bmy, shape_a)
        dets_b = [d for d, k in zip(dets_b, keep_b) if k]

    n_a, n_b = len(dets_a), len(dets_b)
    if n_a == 0 or n_b == 0:
        return RepeatabilityReport(
            n_requested=n_points,
            n_a=n_a,
            n_b=n_b,
            n_correspondences=0,
            repeatability=0.0,
            empty_common_region=True,
        )

    # Disjoint regions have error 1; skip pairs whose regions cannot touch.
    bx = np.array([d.x for d in dets_b])
    by = np.array([d.y for d in dets_b])
    rb = REGION_RADIUS_FACTOR * np.array([d.s for d in dets_b])
    acceptable = []
    for i, da in enumerate(dets_a):
        jac = mapping_jacobian(mapping, da.x, da.y)
        sv_max = float(np.linalg.svd(jac, compute_uv=False)[0])
        ra = REGION_RADIUS_FACTOR * da.s * sv_max
        dist = np.hypot(bx - amx[i], by - amy[i])
        for j in np.flatnonzero(dist <= ra + rb):
            err = region_overlap_error(da, dets_b[j], mapping)
            if err < OVERLAP_ERROR_THRESHOLD:
                acceptable.append((err, i, int(j)))

    acceptable.sort()
    used_a: set[int] = set()
    used_b: set[int] = set()
    matches = []
    for err, i, j in acceptable:
        if i in used_a or j in used_b:
            continue
        used_a.add(i)
        used_b.add(j)
        matches.append((i, j, err))

    n_corr = len(matches)
    return RepeatabilityReport(
        n_requested=n_points,
        n_a=n_a,
        n_b=n_b,
        n_correspondences=n_corr,
        repeatability=n_corr / min(n_a, n_b),
        matches=matches,
    )


@dataclass(frozen=True)
class BenchRow:
    model: str
    pair: str
    transform_class: str
    budget: int
    n_a: int
    n_b: int
    n_corr: int
    repeatability: float


def bench_matrix(
    models: list[tuple[str, object]],
    pairs: list[CorrespondencePair],
    budgets: list[int],
    **detect_kwargs,
) -> list[BenchRow]:
    """Repeatability for every (model, pair, budget) combination.

    Detection runs once per (model, image) at the largest budget; smaller
    budgets reuse its prefix since selection orders by |response|.
    Rows come out in deterministic (model, pair, budget) order.
    """
    budgets = sorted(budgets)
    n_max = budgets[-1]
    det_cache: dict[tuple, list[Detection]] = {}

    def detections(name, model, img):
        key = (name, hashlib.sha1(img.tobytes()).hexdigest())
        if key not in det_cache:
            det_cache[key] = detect(model, img, n_max, **detect_kwargs)
        return det_cache[key]

    rows = []
    for name, model in models:
        for pair in pairs:
            da = detections(name, model, pair.image_a)
            db = detections(name, model, pair.image_b)
            for budget in budgets:
                rep = repeatability(
                    da, db, pair.mapping, budget, pair.image_a.shape, pair.image_b.shape
                )
                rows.append(
                    BenchRow(
                        model=name,
                        pair=pair.name or "pair",
                        transform_class=pair.transform_class or "unknown",
                        budget=budget,
                        n_a=rep.n_a,
                        n_b=rep.n_b,
                        n_corr=rep.n_correspondences,
                        repeatability=rep.repeatability,
                    )
                )
    return rows


def class_averages(rows: list[BenchRow]) -> dict[tuple[str, str, int], float]:
    """Mean repeatability keyed by (model, transform_class, budget)."""
    sums: dict[tuple[str, str, int], list[float]] = {}
    for r in rows:
        sums.setdefault((r.model, r.transform_class, r.budget), []).append(r.repeatability)
    return {k: float(np.mean(v)) for k, v in sums.items()}
