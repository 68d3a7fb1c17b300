"""Evaluation metrics for per-vertex classification, correspondence and regression."""

import warnings

import numpy as np
from scipy.sparse.csgraph import connected_components

from .errors import DomainError, ShapeError
from .expmap import build_neighbor_graph

DEFAULT_HIT_THRESHOLDS = (0.10, 0.20, 0.30)


def evaluate_classification(predictions, truth):
    """Fraction of vertices whose predicted class equals the label."""
    predictions = np.asarray(predictions).ravel()
    truth = np.asarray(truth).ravel()
    if predictions.shape != truth.shape:
        raise ShapeError(f"{predictions.size} predictions for {truth.size} labels")
    if truth.size == 0:
        raise ShapeError("no labels to evaluate")
    return float(np.mean(predictions == truth))


def geodesic_error(predicted, truth, mesh, chunk=256):
    """Edge-graph geodesic distances between predicted and true vertices.

    Returns
    -------
    errors : ndarray, shape (n,)
    diameter : float
        Largest eccentricity among the true vertices (the exact geodesic
        diameter whenever every vertex appears in ``truth``).
    """
    predicted = np.asarray(predicted, dtype=np.int64).ravel()
    truth = np.asarray(truth, dtype=np.int64).ravel()
    if predicted.shape != truth.shape:
        raise ShapeError(f"{predicted.size} predictions for {truth.size} ground-truth ids")
    for ids in (predicted, truth):
        if ids.size and (ids.min() < 0 or ids.max() >= mesh.n_vertices):
            raise DomainError("vertex id out of range of the reference mesh")
    graph = build_neighbor_graph(mesh)
    n_comp, _ = connected_components(graph.matrix, directed=False)
    if n_comp > 1:
        raise DomainError(f"reference mesh has {n_comp} connected components")
    sources, inverse = np.unique(truth, return_inverse=True)
    errors = np.empty(len(truth))
    diameter = 0.0
    for start in range(0, len(sources), chunk):
        block = sources[start:start + chunk]
        dist = graph.distances(block)
        diameter = max(diameter, float(dist.max()))
        sel = np.nonzero((inverse >= start) & (inverse < start + len(block)))[0]
        errors[sel] = dist[inverse[sel] - start, predicted[sel]]
    return errors, diameter


def evaluate_correspondence(predicted, truth, mesh, radii=None):
    """Cumulative fraction of matches within a geodesic radius.

    ``radii`` are fractions of the shape diameter (default 0 to 0.10 in
    steps of 0.01).  Returns an ``(len(radii), 2)`` array of
    ``(radius fraction, fraction of vertices within it)``.
    """
    if radii is None:
        radii = np.linspace(0.0, 0.10, 11)
    radii = np.asarray(radii, dtype=float)
    errors, diameter = geodesic_error(predicted, truth, mesh)
    rel = errors / diameter if diameter > 0 else np.zeros_like(errors)
    # tolerance absorbs rounding when a radius equals an error exactly
    frac = np.array([np.mean(rel <= r + 1e-12) for r in radii])
    return np.stack([radii, frac], axis=1)


def pearson(x, y):
    """Pearson correlation coefficient."""
    x = np.asarray(x, dtype=float).ravel()
    y = np.asarray(y, dtype=float).ravel()
    xc, yc = x - x.mean(), y - y.mean()
    denom = np.sqrt((xc ** 2).sum() * (yc ** 2).sum())
    return float((xc * yc).sum() / denom) if denom > 0 else float("nan")


def evaluate_regression(predictions, truth, thresholds=DEFAULT_HIT_THRESHOLDS):
    """Scalar-field regression metrics.

    Returns a dict with ``MAPE`` (mean absolute relative error), ``RRMSE``
    (RMS error over RMS truth), ``PCC``, one ``HR_<pct>`` entry per
    threshold (fraction of vertices with relative error ``<= tau``) and
    ``excluded``, the number of zero-truth vertices left out of the
    relative metrics.  All ratios are fractions, not percentages.
    """
    pred = np.asarray(predictions, dtype=float).ravel()
    truth = np.asarray(truth, dtype=float).ravel()
    if pred.shape != truth.shape:
        raise ShapeError(f"{pred.size} predictions for {truth.size} targets")
    if truth.size == 0:
        raise ShapeError("no targets to evaluate")
    delta = pred - truth
    nonzero = truth != 0
    excluded = int((~nonzero).sum())
    if excluded:
        warnings.warn(f"{excluded} zero ground-truth values excluded from relative metrics",
                      stacklevel=2)
    rel = np.abs(delta[nonzero] / truth[nonzero])
    rms_truth = np.sqrt(np.mean(truth ** 2))
    out = {
        "MAPE": float(rel.mean()) if rel.size else float("nan"),
        "RRMSE": float(np.sqrt(np.mean(delta ** 2)) / rms_truth) if rms_truth > 0 else float("nan"),
        "PCC": pearson(pred, truth),
    }
    for tau in thresholds:
        # relative errors are compared with a rounding allowance of a few ulps
        hit = rel <= tau * (1 + 1e-12)
        out[f"HR_{round(100 * tau, 6):g}"] = float(hit.mean()) if rel.size else float("nan")
    out["excluded"] = excluded
    return out
