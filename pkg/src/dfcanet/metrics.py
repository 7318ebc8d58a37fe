"""Presentation-attack-detection metrics: error rates, DET sweep, EER and
confusion matrices.

Score polarity: higher score means more attack-like, and a sample is
classified as an attack when ``score >= threshold``.  All rates are
percentages.  APCER counts attack samples classified bonafide, NPCER counts
bonafide samples classified attack, ACER is their mean and AA the overall
accuracy.  A test set missing one class yields ``None`` for the undefined
rates rather than a silent zero.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DataError

BONAFIDE_IDX, ATTACK_IDX = 0, 1


@dataclass
class MetricsReport:
    aa: float
    apcer: float | None
    npcer: float | None
    acer: float | None
    eer: float | None
    threshold: float
    confusion: np.ndarray
    det_points: list = field(default_factory=list)
    n_bonafide: int = 0
    n_attack: int = 0


def confusion_matrix(predictions, labels, k: int) -> np.ndarray:
    """Counts with true class on rows and predicted class on columns."""
    pred = np.asarray(predictions, dtype=np.int64)
    lab = np.asarray(labels, dtype=np.int64)
    if pred.shape != lab.shape:
        raise DataError(f"predictions {pred.shape} and labels {lab.shape} differ in length")
    m = np.zeros((k, k), dtype=np.int64)
    if pred.size == 0:
        return m
    if pred.min() < 0 or pred.max() >= k or lab.min() < 0 or lab.max() >= k:
        raise DataError(f"class index out of range for K={k}")
    np.add.at(m, (lab, pred), 1)
    return m


def det_curve(scores, labels):
    """Sweep thresholds over the sorted unique scores (plus a sentinel past
    the top) and return ([(threshold, apcer, npcer), ...], eer).

    EER is the crossing of the two error rates, linearly interpolated
    between adjacent sweep points.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    attack = s[y == ATTACK_IDX]
    bona = s[y == BONAFIDE_IDX]
    if attack.size == 0 or bona.size == 0:
        raise DataError("DET curve needs both bonafide and attack samples")
    thresholds = np.unique(s)
    thresholds = np.append(thresholds, thresholds[-1] + 1.0)
    points = []
    for t in thresholds:
        apcer = 100.0 * np.count_nonzero(attack < t) / attack.size
        npcer = 100.0 * np.count_nonzero(bona >= t) / bona.size
        points.append((float(t), apcer, npcer))
    eer = None
    for (t0, a0, n0), (t1, a1, n1) in zip(points, points[1:]):
        d0, d1 = a0 - n0, a1 - n1
        if d0 == 0.0:
            eer = a0
            break
        if d0 < 0.0 <= d1:
            frac = d0 / (d0 - d1)
            eer = a0 + frac * (a1 - a0)
            break
    if eer is None:
        last = points[-1]
        eer = last[1] if last[1] == last[2] else 50.0
    return points, float(eer)


def binary_metrics(scores, labels, threshold: float = 0.5, with_det: bool = True) -> MetricsReport:
    """Full report for binary attack-vs-bonafide scores."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if s.shape != y.shape:
        raise DataError(f"scores {s.shape} and labels {y.shape} differ in length")
    if s.size == 0:
        raise DataError("cannot evaluate an empty score set")
    pred = (s >= threshold).astype(np.int64)
    aa = 100.0 * float(np.count_nonzero(pred == y)) / y.size
    n_attack = int(np.count_nonzero(y == ATTACK_IDX))
    n_bona = int(np.count_nonzero(y == BONAFIDE_IDX))
    apcer = 100.0 * float(np.count_nonzero((y == ATTACK_IDX) & (pred == BONAFIDE_IDX))) / n_attack \
        if n_attack else None
    npcer = 100.0 * float(np.count_nonzero((y == BONAFIDE_IDX) & (pred == ATTACK_IDX))) / n_bona \
        if n_bona else None
    acer = (apcer + npcer) / 2.0 if apcer is not None and npcer is not None else None
    det_points, eer = ([], None)
    if with_det and n_attack and n_bona:
        det_points, eer = det_curve(s, y)
    return MetricsReport(aa=aa, apcer=apcer, npcer=npcer, acer=acer, eer=eer,
                         threshold=threshold, confusion=confusion_matrix(pred, y, 2),
                         det_points=det_points, n_bonafide=n_bona, n_attack=n_attack)


def multiclass_metrics(probabilities, labels, k: int) -> MetricsReport:
    """Argmax accuracy and confusion for the K-class lens-detection mode."""
    p = np.asarray(probabilities, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    pred = p.argmax(axis=1)
    aa = 100.0 * float(np.count_nonzero(pred == y)) / y.size
    return MetricsReport(aa=aa, apcer=None, npcer=None, acer=None, eer=None,
                         threshold=float("nan"), confusion=confusion_matrix(pred, y, k))


# -- report files -----------------------------------------------------------


def _fmt(value):
    if value is None:
        return "undefined"
    if isinstance(value, float):
        return f"{value:.2f}"
    return str(value)


def format_report(report: MetricsReport, extra: dict | None = None) -> str:
    """Render the structured-text report: key=value lines, a confusion
    block, then the DET block of threshold,apcer,npcer rows."""
    lines = []
    for key, val in (extra or {}).items():
        lines.append(f"{key}={_fmt(val)}")
    lines.append(f"threshold={report.threshold:.2f}" if report.threshold == report.threshold
                 else "threshold=undefined")
    for key in ("aa", "apcer", "npcer", "acer", "eer"):
        lines.append(f"{key}={_fmt(getattr(report, key))}")
    lines.append(f"n_bonafide={report.n_bonafide}")
    lines.append(f"n_attack={report.n_attack}")
    lines.append("confusion=" + ";".join(",".join(str(c) for c in row) for row in report.confusion))
    lines.append("det:")
    for t, a, n in report.det_points:
        lines.append(f"{t:.6f},{a:.6f},{n:.6f}")
    return "\n".join(lines) + "\n"


def parse_report(text: str) -> dict:
    """Parse a report file back into a dict; the DET block lands under
    ``det_points`` and numeric values come back as floats (or None)."""
    out = {"det_points": []}
    in_det = False
    for line in text.splitlines():
        line = line.strip()
        if not line:
            continue
        if line == "det:":
            in_det = True
            continue
        if in_det:
            t, a, n = (float(v) for v in line.split(","))
            out["det_points"].append((t, a, n))
            continue
        key, _, val = line.partition("=")
        if val == "undefined":
            out[key] = None
        else:
            try:
                out[key] = float(val)
            except ValueError:
                out[key] = val
    return out
