"""OOD scores, ranking metrics and threshold calibration.

Scores are oriented so that higher means more OOD-like, and OOD is the
positive class for AUROC and AUPR.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from .errors import ContractError
from .graph import propagate_energy, sym_normalize
from .models import detector_forward, embed
from .numerics import Tape, softmax_rows
from .objectives import energy_score, transformed_energy

METHODS = ("msp", "energy", "gnnsafe", "gold")


@dataclass
class ScoreSet:
    id_scores: np.ndarray
    ood_scores: np.ndarray

    def __post_init__(self):
        self.id_scores = np.asarray(self.id_scores, dtype=np.float64).ravel()
        self.ood_scores = np.asarray(self.ood_scores, dtype=np.float64).ravel()
        if self.id_scores.size == 0 or self.ood_scores.size == 0:
            raise ContractError("both ID and OOD scores must be nonempty")
        if not (np.isfinite(self.id_scores).all() and np.isfinite(self.ood_scores).all()):
            raise ContractError("scores must be finite")

    def swapped(self):
        return ScoreSet(self.ood_scores, self.id_scores)


@dataclass
class EvalReport:
    method: str
    subsets: dict[str, dict[str, float]]
    average: dict[str, float]
    id_accuracy: float
    tau: float
    histograms: dict[str, dict[str, list]] = field(default_factory=dict)

    def to_json(self):
        return {
            "method": self.method,
            "id_accuracy": self.id_accuracy,
            "tau": self.tau,
            "subsets": self.subsets,
            "average": self.average,
        }


def detector_energy(det, e):
    """Transformed energy ``e'`` of the detector applied to energies ``e``."""
    tape = Tape()
    return transformed_energy(tape.value(detector_forward(np.asarray(e).reshape(-1, 1), det, tape)))


def node_energies(model, g, alpha, k, a_hat=None):
    """Raw and propagated energies for every node of ``g``."""
    _, Z = embed(model.gcn, g, a_hat)
    e = energy_score(Z)
    return Z, e, propagate_energy(e, g, alpha, k)


def score_nodes(model, g, method, alpha=0.5, k=2, a_hat=None):
    """Per-node OOD score for ``method`` (higher = more OOD)."""
    if method not in METHODS:
        raise ContractError(f"unknown scoring method {method!r}")
    if method == "gold" and model.detector is None:
        raise ContractError("gold scoring needs a trained detector")
    Z, e, e_prop = node_energies(model, g, alpha, k, a_hat)
    if method == "msp":
        return 1.0 - softmax_rows(Z).max(axis=1)
    if method == "energy":
        return e
    if method == "gnnsafe":
        return e_prop
    return detector_energy(model.detector, e_prop)


def auroc(s):
    """P(OOD score > ID score) + 0.5 P(tie), via the Mann-Whitney rank sum."""
    n_id, n_ood = s.id_scores.size, s.ood_scores.size
    ranks = rankdata(np.concatenate([s.id_scores, s.ood_scores]))
    u = ranks[n_id:].sum() - n_ood * (n_ood + 1) / 2.0
    return float(u / (n_id * n_ood))


def aupr(s):
    """Area under the OOD-positive precision-recall step curve.

    Thresholds sweep from high to low; tied scores enter together, so each
    distinct score contributes ``(recall gain) * precision`` once.
    """
    scores = np.concatenate([s.ood_scores, s.id_scores])
    positive = np.concatenate([np.ones(s.ood_scores.size), np.zeros(s.id_scores.size)])
    order = np.argsort(-scores, kind="mergesort")
    scores, positive = scores[order], positive[order]
    tp = np.cumsum(positive)
    # last index of each tied group
    ends = np.flatnonzero(np.r_[scores[1:] != scores[:-1], True])
    tp = tp[ends]
    predicted = ends + 1.0
    precision = tp / predicted
    recall = tp / s.ood_scores.size
    gains = np.diff(np.r_[0.0, recall])
    return float(np.sum(gains * precision))


def _order_index(target, n):
    # 1-based order statistic ceil(target * n), guarded against 0.95*100 = 95.0000001
    return max(1, min(n, math.ceil(round(target * n, 9))))


def calibrate_tau(valid_id_scores, target_tpr=0.95):
    """The ``ceil(target_tpr * n)``-th smallest validation ID score."""
    scores = np.sort(np.asarray(valid_id_scores, dtype=np.float64).ravel())
    if scores.size == 0:
        raise ContractError("cannot calibrate a threshold on no scores")
    return float(scores[_order_index(target_tpr, scores.size) - 1])


def fpr95(s, target_tpr=0.95):
    """Fraction of OOD scores at or below the 95th-percentile ID score."""
    if s.id_scores.size < 20:
        warnings.warn("fewer than 20 ID scores: the 95th percentile is degenerate", RuntimeWarning, stacklevel=2)
    tau = calibrate_tau(s.id_scores, target_tpr)
    return float(np.mean(s.ood_scores <= tau))


def classify(e, tau):
    """Threshold detector: 0 (OOD) where ``e >= tau``, 1 (ID) otherwise."""
    return np.where(np.asarray(e, dtype=np.float64) >= tau, 0, 1)


def metrics(s):
    """AUROC / AUPR / FPR95 in percent."""
    return {"auroc": 100.0 * auroc(s), "aupr": 100.0 * aupr(s), "fpr95": 100.0 * fpr95(s)}


def accuracy(Z, labels):
    labels = np.asarray(labels)
    if labels.size == 0:
        return float("nan")
    return float(np.mean(np.argmax(Z, axis=1) == labels))


def histogram(id_values, ood_values, pood_values=None, bins=50):
    """Shared-bin counts for ID, OOD and (optionally) p-OOD values."""
    pood_values = np.zeros(0) if pood_values is None else np.asarray(pood_values, dtype=np.float64)
    allv = np.concatenate([id_values, ood_values, pood_values])
    lo, hi = float(allv.min()), float(allv.max())
    if hi <= lo:
        hi = lo + 1.0
    edges = np.linspace(lo, hi, bins + 1)
    return {
        "bin_left": edges[:-1].tolist(),
        "bin_right": edges[1:].tolist(),
        "count_id": np.histogram(id_values, edges)[0].tolist(),
        "count_ood": np.histogram(ood_values, edges)[0].tolist(),
        "count_pood": np.histogram(pood_values, edges)[0].tolist(),
    }


HIST_COLUMNS = ("bin_left", "bin_right", "count_id", "count_ood", "count_pood")


def write_histogram_csv(path, hist):
    with open(path, "w", newline="\n", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(HIST_COLUMNS)
        for row in zip(*(hist[c] for c in HIST_COLUMNS)):
            w.writerow([repr(float(row[0])), repr(float(row[1])), *(int(x) for x in row[2:])])


def read_histogram_csv(path):
    with open(path, newline="", encoding="utf-8") as f:
        rows = list(csv.DictReader(f))
    return {
        "bin_left": [float(r["bin_left"]) for r in rows],
        "bin_right": [float(r["bin_right"]) for r in rows],
        "count_id": [int(r["count_id"]) for r in rows],
        "count_ood": [int(r["count_ood"]) for r in rows],
        "count_pood": [int(r["count_pood"]) for r in rows],
    }


def histogram_mean(hist, column):
    """Mean of a binned population, each count placed at its bin centre."""
    centres = (np.asarray(hist["bin_left"]) + np.asarray(hist["bin_right"])) / 2.0
    counts = np.asarray(hist[column], dtype=np.float64)
    if counts.sum() == 0:
        raise ContractError(f"histogram column {column!r} is empty")
    return float(np.sum(centres * counts) / counts.sum())


def evaluate(model, bundle, alpha=0.5, k=2, method=None, pood=None, bins=50):
    """Score ID test nodes against every OOD set and build an :class:`EvalReport`.

    ``pood`` optionally carries pseudo-OOD embeddings; their energies fill
    the ``count_pood`` histogram column.
    """
    method = method or model.method
    g = bundle.id_graph
    a_hat = sym_normalize(g)
    Z, e, e_prop = node_energies(model, g, alpha, k, a_hat)
    test = g.masks.get("test", np.arange(g.n))
    valid = g.masks.get("valid", test)
    id_scores = score_nodes(model, g, method, alpha, k, a_hat)
    tau = calibrate_tau(id_scores[valid] if valid.size else id_scores[test])
    labelled = test[g.labels[test] >= 0]
    id_acc = 100.0 * accuracy(Z[labelled], g.labels[labelled])

    pood_e = pood_ep = None
    if pood is not None and len(pood):
        W = model.gcn.store[model.gcn.weight(model.gcn.layers)]
        pood_e = energy_score(pood @ W)
        if model.detector is not None:
            pood_ep = detector_energy(model.detector, pood_e)

    subsets, hists = {}, {}
    for name, ood in bundle.ood_sets.items():
        og = ood.graph
        o_hat = a_hat if og is g else sym_normalize(og)
        ood_scores = score_nodes(model, og, method, alpha, k, o_hat)[ood.mask]
        subsets[name] = metrics(ScoreSet(id_scores[test], ood_scores))
        _, _, oe_prop = node_energies(model, og, alpha, k, o_hat)
        hists[f"{name}_energy"] = histogram(e_prop[test], oe_prop[ood.mask], pood_e, bins)
        if model.detector is not None:
            hists[f"{name}_transformed"] = histogram(
                detector_energy(model.detector, e_prop[test]),
                detector_energy(model.detector, oe_prop[ood.mask]),
                pood_ep,
                bins,
            )
    average = {key: float(np.mean([m[key] for m in subsets.values()])) for key in ("auroc", "aupr", "fpr95")} if subsets else {}
    return EvalReport(method, subsets, average, id_acc, tau, hists)
