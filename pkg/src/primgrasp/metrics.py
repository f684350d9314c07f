"""Segmentation and grasping statistics plus shape-recovery errors."""
from __future__ import annotations

import itertools
import math

import numpy as np
from scipy import ndimage, stats

from .shapes import PrimitiveShape, ShapeClass

ALPHA = math.log(0.5) / 5.0
SIGMA = math.sqrt(5.0)
KERNEL = 7


def _gaussian_kernel(size: int, sigma: float) -> np.ndarray:
    r = (size - 1) / 2.0
    y, x = np.mgrid[-r:r + 1, -r:r + 1]
    k = np.exp(-(x * x + y * y) / (2.0 * sigma * sigma))
    return k / k.sum()


def weighted_fmeasure(pred, truth, beta: float = 1.0, sigma: float = SIGMA,
                      kernel: int = KERNEL, alpha: float = ALPHA) -> float:
    """Distance-weighted F-measure of a foreground map against a binary truth.

    Errors on truth pixels may be lowered to their Gaussian-blurred
    neighbourhood error (dependency between nearby errors); false
    positives are weighted up by ``2 - exp(alpha * d)`` with ``d`` the
    Euclidean distance to the nearest truth pixel.  An empty truth scores
    1 for an empty prediction and 0 otherwise.
    """
    P = np.asarray(pred, dtype=float)
    G = np.asarray(truth).astype(bool)
    if P.shape != G.shape:
        raise ValueError("prediction and truth rasters differ in size")
    if P.size == 0:
        raise ValueError("rasters must be nonempty")
    if np.any((P < 0) | (P > 1)):
        raise ValueError("prediction values must lie in [0, 1]")
    if not G.any():
        return 1.0 if not P.any() else 0.0
    E = np.abs(P - G)
    dist, idx = ndimage.distance_transform_edt(~G, return_indices=True)
    Et = E[idx[0], idx[1]]  # background pixels take the error of their nearest truth pixel
    Et[G] = E[G]
    # edge replication: zero padding would fake recall for missed truth pixels at the border
    EA = ndimage.correlate(Et, _gaussian_kernel(kernel, sigma), mode="nearest")
    min_e = E.copy()
    lower = G & (EA < E)
    min_e[lower] = EA[lower]
    B = np.ones_like(E)
    B[~G] = 2.0 - np.exp(alpha * dist[~G])
    Ew = min_e * B
    tp = G.sum() - Ew[G].sum()
    fp = Ew[~G].sum()
    recall = 1.0 - Ew[G].mean()
    precision = tp / (tp + fp) if tp + fp > 0 else 0.0
    b2 = beta * beta
    den = b2 * precision + recall
    if den <= 0:
        return 0.0
    return float((1.0 + b2) * precision * recall / den)


def success_ci(successes: int, attempts: int, method: str = "wald", z: float = 1.96):
    """Success rate and 95% interval half-width, both in percent.

    ``method="wald"`` is the normal approximation; ``"exact"`` returns half
    the width of the Clopper-Pearson interval.
    """
    if attempts < 1:
        raise ValueError("attempts must be >= 1")
    if not 0 <= successes <= attempts:
        raise ValueError("need 0 <= successes <= attempts")
    p = successes / attempts
    if method == "wald":
        return 100.0 * p, 100.0 * z * math.sqrt(p * (1.0 - p) / attempts)
    if method == "exact":
        lo, hi = clopper_pearson(successes, attempts)
        return 100.0 * p, 50.0 * (hi - lo)
    raise ValueError(f"unknown interval method {method!r}")


def clopper_pearson(successes: int, attempts: int, level: float = 0.95):
    """Exact binomial interval as fractions."""
    a = 1.0 - level
    lo = 0.0 if successes == 0 else stats.beta.ppf(a / 2, successes, attempts - successes + 1)
    hi = 1.0 if successes == attempts else stats.beta.ppf(1 - a / 2, successes + 1, attempts - successes)
    return float(lo), float(hi)


def per_class_report(pairs, beta: float = 1.0) -> dict:
    """Mean F per class and over all pairs.

    ``pairs`` holds ``(class_id, prediction, truth)`` triples.  The overall
    entry ``"All"`` averages every pair, i.e. the class means weighted by
    their pair counts.
    """
    pairs = list(pairs)
    if not pairs:
        raise ValueError("report needs at least one pair")
    scores = {}
    for cls, pred, truth in pairs:
        scores.setdefault(cls, []).append(weighted_fmeasure(pred, truth, beta))
    report = {cls: float(np.mean(v)) for cls, v in scores.items()}
    report["All"] = float(np.mean([s for v in scores.values() for s in v]))
    return report


def format_report(report: dict) -> str:
    names = [k for k in report if k != "All"] + ["All"]
    head = " | ".join(f"{str(n):>10}" for n in names)
    row = " | ".join(f"{report[n]:>10.3f}" for n in names)
    return head + "\n" + row + "\n"


def _angle(u, v, signless: bool) -> float:
    c = float(np.dot(u, v))
    if signless:
        c = abs(c)
    return math.degrees(math.acos(min(1.0, max(-1.0, c))))


def shape_errors(truth: PrimitiveShape, fit: PrimitiveShape):
    """(largest relative parameter error, axis error in degrees).

    Tube axes are compared without sign; a semi-sphere's dome direction
    with sign; cuboid edges are matched to the fit's edges by the axis
    permutation with the best alignment.  Spheres have no axis error.
    """
    if truth.kind != fit.kind:
        raise ValueError("shapes of different classes")
    kind = truth.kind
    tp, fp = truth.params, fit.params
    if kind in (ShapeClass.SPHERE, ShapeClass.SEMISPHERE):
        err = abs(fp["r"] - tp["r"]) / tp["r"]
        ang = _angle(truth.axis, fit.axis, False) if kind == ShapeClass.SEMISPHERE else 0.0
        return err, ang
    if kind.tubular:
        err = max(abs(fp[n] - tp[n]) / tp[n] for n in ("r_in", "h"))
        return err, _angle(truth.axis, fit.axis, True)
    Rt, Rf = truth.pose.matrix, fit.pose.matrix
    names = ("w", "d", "h")
    dot = np.abs(Rt.T @ Rf)
    perm = max(itertools.permutations(range(3)), key=lambda p: sum(dot[i, p[i]] for i in range(3)))
    err = max(abs(fp[names[perm[i]]] - tp[names[i]]) / tp[names[i]] for i in range(3))
    ang = max(_angle(Rt[:, i], Rf[:, perm[i]], True) for i in range(3))
    return err, ang
