"""Built-in checks run by ``implicit-depth selftest``.

Gradient checks compare analytic gradients of small float64 models with
central differences. Metric checks compare the vectorised metrics with
plain-loop reference implementations on random small instances.
"""

from __future__ import annotations

import math
import time

import numpy as np

from .geometry import DepthMap
from .metrics import aggregate_plane_ious, depth_metrics, occlusion_iou
from .nn import EncoderConfig, ImplicitModel, ModelConfig, QueryBatch, RegressionModel, gradient_check

GRAD_TOLERANCE = 1e-3


def small_model_config(kind: str, seed: int = 0) -> ModelConfig:
    enc = EncoderConfig(channels=(4, 6, 6, 8), strides=(1, 2, 1, 1))
    return ModelConfig(kind=kind, encoder=enc, hidden=24, seed=seed)


def probe_batch(seed: int = 0, n_images: int = 2, h: int = 16, w: int = 24, n: int = 48) -> QueryBatch:
    rng = np.random.default_rng(seed)
    gt = rng.uniform(0.6, 4.0, size=(n_images, h, w))
    gt[0, 0, :3] = np.nan
    return QueryBatch(
        images=rng.random((n_images, h, w, 3)),
        batch_index=rng.integers(0, n_images, n),
        u=rng.uniform(0, w - 1, n),
        v=rng.uniform(0, h - 1, n),
        depth=rng.uniform(0.5, 4.5, n),
        prev=rng.choice([-1.0, 0.1, 0.85], n),
        label=rng.integers(0, 2, n).astype(float),
        is_edge=rng.random(n) < 0.3,
        gt_depth=gt,
    )


def run_gradient_checks(n_coords: int = 64, seed: int = 0) -> dict:
    batch = probe_batch(seed)
    out = {}
    for kind, cls in (("implicit", ImplicitModel), ("regression", RegressionModel)):
        model = cls(small_model_config(kind, seed), dtype=np.float64)
        out[kind] = gradient_check(model, batch, n_coords=n_coords, seed=seed)
    return out


def _ref_iou(pred, gt, region):
    inter = union = 0
    for i in range(len(pred)):
        for j in range(len(pred[0])):
            if region[i][j]:
                inter += pred[i][j] and gt[i][j]
                union += pred[i][j] or gt[i][j]
    return math.nan if union == 0 else 100.0 * inter / union


def _ref_hm(a, b):
    if math.isnan(a) or math.isnan(b):
        return math.nan
    return 0.0 if a + b == 0 else 2 * a * b / (a + b)


def reference_occlusion_iou(y_pred, y_gt, d_virtual, d_real, valid, radius=7, rel=0.05):
    """Loop implementation of the occlusion IoU family."""
    h, w = len(y_pred), len(y_pred[0])
    region = [[bool(valid[i][j]) for j in range(w)] for i in range(h)]
    neg_p = [[not y_pred[i][j] for j in range(w)] for i in range(h)]
    neg_g = [[not y_gt[i][j] for j in range(w)] for i in range(h)]

    def trio(reg):
        plus = _ref_iou(neg_p, neg_g, reg)
        minus = _ref_iou(y_pred, y_gt, reg)
        return plus, minus, _ref_hm(plus, minus)

    plus, minus, all_ = trio(region)
    surf = [[region[i][j] and abs(d_virtual[i][j] - d_real[i][j]) <= rel * d_real[i][j]
             for j in range(w)] for i in range(h)]
    edges = set()
    for i in range(h):
        for j in range(w):
            for di, dj in ((1, 0), (0, 1)):
                a, b = i + di, j + dj
                if a < h and b < w and region[i][j] and region[a][b] and y_gt[i][j] != y_gt[a][b]:
                    edges.add((i, j))
                    edges.add((a, b))
    band = [[region[i][j] and any(max(abs(i - a), abs(j - b)) <= radius for a, b in edges)
             for j in range(w)] for i in range(h)]
    return plus, minus, all_, trio(surf)[2], trio(band)[2]


def reference_depth_metrics(pred, gt):
    pairs = [(p, g) for p, g in zip(pred, gt)]
    n = len(pairs)
    out = {
        "abs_diff": sum(abs(p - g) for p, g in pairs) / n,
        "abs_rel": sum(abs(p - g) / g for p, g in pairs) / n,
        "sq_rel": sum((p - g) ** 2 / g for p, g in pairs) / n,
        "rmse": math.sqrt(sum((p - g) ** 2 for p, g in pairs) / n),
        "log_rmse": math.sqrt(sum((math.log(p) - math.log(g)) ** 2 for p, g in pairs) / n),
    }
    for name, t in (("a5", 1.05), ("a10", 1.10), ("a25", 1.25)):
        out[name] = 100.0 * sum(max(p / g, g / p) < t for p, g in pairs) / n
    return out


def reference_aggregate(per_plane):
    means = []
    for vals in per_plane.values():
        good = [v for v in vals if not math.isnan(v)]
        if good:
            means.append(sum(good) / len(good))
    return sum(means) / len(means)


def random_instance(rng):
    h, w = int(rng.integers(2, 17)), int(rng.integers(2, 17))
    d_real = rng.uniform(0.5, 5.0, size=(h, w))
    d_virtual = np.full((h, w), float(rng.uniform(0.5, 5.0)))
    # snap some pixels near the plane so the surface band is populated
    near = rng.random((h, w)) < 0.3
    d_real[near] = d_virtual[near] * rng.uniform(0.96, 1.04, size=int(near.sum()))
    valid = rng.random((h, w)) < 0.9
    y_gt = d_real < d_virtual
    y_pred = np.where(rng.random((h, w)) < 0.2, ~y_gt, y_gt)
    return y_pred, y_gt, d_virtual, d_real, valid


def _same(a, b, tol=0.0):
    return (math.isnan(a) and math.isnan(b)) or abs(a - b) <= tol * max(1.0, abs(b))


# IoUs are count ratios and must agree bit-for-bit; sums over floats may differ in order only
FLOAT_SUM_TOL = 1e-12


def run_metric_checks(n_instances: int = 100, seed: int = 0) -> int:
    """Number of mismatching instances (0 means all agree)."""
    rng = np.random.default_rng(seed)
    failures = 0
    for _ in range(n_instances):
        y_pred, y_gt, dv, dr, valid = random_instance(rng)
        got = occlusion_iou(y_pred, y_gt, DepthMap(dv), DepthMap(dr, valid))
        ref = reference_occlusion_iou(y_pred.tolist(), y_gt.tolist(), dv.tolist(), dr.tolist(), valid.tolist())
        got_t = (got.iou_plus, got.iou_minus, got.iou_all, got.iou_surface, got.iou_boundary)
        ok = all(_same(a, b) for a, b in zip(got_t, ref))
        pred = DepthMap(dr * rng.uniform(0.8, 1.2, size=dr.shape), valid)
        dm = depth_metrics(pred, DepthMap(dr))
        rd = reference_depth_metrics(pred.values[valid].tolist(), dr[valid].tolist()) if valid.any() else None
        if rd is not None:
            ok &= all(_same(dm[k], rd[k], FLOAT_SUM_TOL) for k in rd)
        planes = {float(p): [float(x) if rng.random() > 0.2 else math.nan for x in rng.uniform(0, 100, size=3)]
                  for p in range(1, int(rng.integers(2, 5)))}
        if any(not math.isnan(x) for v in planes.values() for x in v):
            ok &= _same(aggregate_plane_ious(planes), reference_aggregate(planes), FLOAT_SUM_TOL)
        failures += not ok
    return failures


def run_all(verbose: bool = True) -> bool:
    t0 = time.perf_counter()
    grads = run_gradient_checks()
    t1 = time.perf_counter()
    failures = run_metric_checks()
    t2 = time.perf_counter()
    ok = all(err < GRAD_TOLERANCE for err in grads.values()) and failures == 0
    if verbose:
        for kind, err in grads.items():
            status = "PASS" if err < GRAD_TOLERANCE else "FAIL"
            print(f"[{status}] gradient check ({kind}): max rel. error {err:.2e}")
        print(f"      gradient checks took {t1 - t0:.1f}s")
        print(f"[{'PASS' if failures == 0 else 'FAIL'}] metric brute-force equivalence: "
              f"{failures} mismatches in 100 instances ({t2 - t1:.1f}s)")
    return ok
