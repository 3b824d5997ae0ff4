"""PCC, RMSE and epsilon-insensitive RMSE after a monotonic cubic mapping."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import DegenerateInput, TooFewPoints

GRID_POINTS = 101
MONOTONE_SLACK = 1e-9
MU_START = 1.0
MU_GROWTH = 10.0
MAX_ESCALATIONS = 12


@dataclass
class EvalPair:
    predicted: float
    label: float
    ci95: float | None = None


@dataclass
class MetricsReport:
    dataset: str
    n: int
    pcc: float | None
    rmse: float | None
    rmse_3rd: float | None
    mapping: tuple[float, float, float, float] | None
    errors: dict[str, str] = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = {"dataset": self.dataset, "n": self.n, "pcc": self.pcc, "rmse": self.rmse,
             "rmse_3rd": self.rmse_3rd,
             "mapping": list(self.mapping) if self.mapping is not None else None}
        if self.errors:
            d["errors"] = dict(self.errors)
        return d


def _pair(pred, label) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(pred, dtype=np.float64).reshape(-1)
    y = np.asarray(label, dtype=np.float64).reshape(-1)
    if p.size != y.size:
        raise ValueError(f"length mismatch: {p.size} predictions vs {y.size} labels")
    return p, y


def pearson(pred, label) -> float:
    p, y = _pair(pred, label)
    if p.size < 2:
        raise DegenerateInput("pearson needs at least two pairs")
    pc, yc = p - p.mean(), y - y.mean()
    sp, sy = math.sqrt(np.dot(pc, pc)), math.sqrt(np.dot(yc, yc))
    if sp == 0.0 or sy == 0.0:
        raise DegenerateInput("zero variance input")
    return float(np.clip(np.dot(pc, yc) / (sp * sy), -1.0, 1.0))


def rmse(pred, label) -> float:
    p, y = _pair(pred, label)
    if p.size == 0:
        raise DegenerateInput("rmse of an empty set")
    return float(np.sqrt(np.mean((p - y) ** 2)))


# ------------------------------------------------------- monotone cubic fit

def cubic(coeffs, x):
    a, b, c, d = coeffs
    x = np.asarray(x, dtype=np.float64)
    return a + x * (b + x * (c + x * d))


def cubic_slope(coeffs, x):
    _, b, c, d = coeffs
    x = np.asarray(x, dtype=np.float64)
    return b + x * (2 * c + 3 * d * x)


def _to_raw(coeffs_u, center: float, scale: float) -> np.ndarray:
    """Coefficients in u=(x-center)/scale -> coefficients in x."""
    a, b, c, d = coeffs_u
    b, c, d = b / scale, c / scale ** 2, d / scale ** 3
    h = center
    return np.array([a - b * h + c * h * h - d * h ** 3,
                     b - 2 * c * h + 3 * d * h * h,
                     c - 3 * d * h,
                     d])


def _penalised_fit(V: np.ndarray, y: np.ndarray, D: np.ndarray, mu: float,
                   start: np.ndarray) -> np.ndarray:
    """Minimise |V w - y|^2 + mu * sum(max(0, -D w)^2) exactly.

    The objective is piecewise quadratic; iterate on the set of violated grid
    slopes, solving a plain least-squares problem for each set.
    """
    w = start
    seen = set()
    root = math.sqrt(mu)
    for _ in range(100):
        active = D @ w < 0
        key = active.tobytes()
        if key in seen:
            break
        seen.add(key)
        A = np.vstack([V, root * D[active]])
        rhs = np.concatenate([y, np.zeros(active.sum())])
        w = np.linalg.lstsq(A, rhs, rcond=None)[0]
    return w


def fit_monotonic_cubic(pred, label) -> tuple[float, float, float, float]:
    """Least-squares cubic a + b x + c x^2 + d x^3 with non-negative slope on [min(pred), max(pred)].

    Starts from the unconstrained fit; if any of 101 grid slopes is negative,
    adds a squared-hinge penalty on the negative slopes and grows its weight
    tenfold (from 1, at most 12 times) until every grid slope is >= -1e-9.
    """
    x, y = _pair(pred, label)
    if x.size < 4:
        raise TooFewPoints(f"monotone cubic fit needs >= 4 points, got {x.size}")
    lo, hi = float(x.min()), float(x.max())
    center = 0.5 * (lo + hi)
    scale = 0.5 * (hi - lo) if hi > lo else 1.0
    u = (x - center) / scale
    V = np.vander(u, 4, increasing=True)
    grid_x = np.linspace(lo, hi, GRID_POINTS)
    gu = (grid_x - center) / scale
    D = np.stack([np.zeros_like(gu), np.ones_like(gu), 2 * gu, 3 * gu ** 2], axis=1)

    def feasible(w_u) -> bool:
        return bool(np.all(cubic_slope(_to_raw(w_u, center, scale), grid_x) >= -MONOTONE_SLACK))

    w = np.linalg.lstsq(V, y, rcond=None)[0]
    if not feasible(w):
        mu = MU_START
        for _ in range(MAX_ESCALATIONS + 1):
            w = _penalised_fit(V, y, D, mu, w)
            if feasible(w):
                break
            mu *= MU_GROWTH
        else:
            w = _feasible_fallback(V, u, y)
    return tuple(float(c) for c in _to_raw(w, center, scale))


def _feasible_fallback(V: np.ndarray, u: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Best of the always-monotone candidates: constant and non-decreasing line."""
    const = np.array([y.mean(), 0.0, 0.0, 0.0])
    line = np.linalg.lstsq(V[:, :2], y, rcond=None)[0]
    cands = [const]
    if line[1] >= 0:
        cands.append(np.array([line[0], line[1], 0.0, 0.0]))
    return min(cands, key=lambda w: float(np.sum((V @ w - y) ** 2)))


def _unpack_pairs(pairs: Sequence[EvalPair]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    p = np.array([q.predicted for q in pairs], dtype=np.float64)
    y = np.array([q.label for q in pairs], dtype=np.float64)
    eps = np.array([q.ci95 if q.ci95 is not None else 0.0 for q in pairs], dtype=np.float64)
    if np.any(eps < 0):
        raise ValueError("ci95 must be non-negative")
    return p, y, eps


def rmse_3rd(pairs: Sequence[EvalPair], coeffs=None) -> float:
    """Epsilon-insensitive RMSE after the monotone cubic mapping, with n - 4 degrees of freedom."""
    p, y, eps = _unpack_pairs(pairs)
    if p.size <= 4:
        raise TooFewPoints(f"rmse_3rd needs more than 4 pairs, got {p.size}")
    if coeffs is None:
        coeffs = fit_monotonic_cubic(p, y)
    r = np.maximum(0.0, np.abs(cubic(coeffs, p) - y) - eps)
    return float(np.sqrt(np.sum(r ** 2) / (p.size - 4)))


def evaluate_pairs(pairs: Sequence[EvalPair], dataset: str = "") -> MetricsReport:
    """Compute every metric; failures are recorded per field instead of raised."""
    p, y, _ = _unpack_pairs(pairs)
    report = MetricsReport(dataset, int(p.size), None, None, None, None)
    try:
        report.pcc = pearson(p, y)
    except DegenerateInput as exc:
        report.errors["pcc"] = f"DegenerateInput: {exc}"
    try:
        report.rmse = rmse(p, y)
    except DegenerateInput as exc:
        report.errors["rmse"] = f"DegenerateInput: {exc}"
    try:
        if p.size <= 4:
            raise TooFewPoints(f"rmse_3rd needs more than 4 pairs, got {p.size}")
        report.mapping = fit_monotonic_cubic(p, y)
        report.rmse_3rd = rmse_3rd(pairs, report.mapping)
    except TooFewPoints as exc:
        report.errors["rmse_3rd"] = f"TooFewPoints: {exc}"
    return report


def average_reports(reports: Sequence[MetricsReport], dataset: str = "average") -> MetricsReport:
    """Unweighted mean over datasets; set sizes do not matter."""
    def mean_of(attr):
        vals = [getattr(r, attr) for r in reports if getattr(r, attr) is not None]
        return float(np.mean(vals)) if vals else None

    return MetricsReport(dataset, int(np.sum([r.n for r in reports])), mean_of("pcc"),
                         mean_of("rmse"), mean_of("rmse_3rd"), None)


CSV_COLUMNS = ("dataset", "n", "pcc", "rmse", "rmse_3rd", "a", "b", "c", "d")


def reports_to_csv(reports: Sequence[MetricsReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in reports:
        mapping = list(r.mapping) if r.mapping is not None else ["", "", "", ""]
        w.writerow([r.dataset, r.n] + ["" if v is None else repr(v) for v in (r.pcc, r.rmse, r.rmse_3rd)]
                   + [repr(m) if m != "" else "" for m in mapping])
    return buf.getvalue()


def reports_to_json(reports: Sequence[MetricsReport]) -> str:
    return json.dumps([r.to_dict() for r in reports], indent=2, sort_keys=True) + "\n"
