"""Panel CSV input/output, missing-data screening and the normal-score transform.

Panel files have a header row of location labels (first cell names the time
column) and one row per time point with the time label in the first column.
Empty cells and ``NA`` mark missing values. Numbers are written with
``repr`` so that a write/read round trip is exact and output is byte-stable.
"""

from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.stats import norm, rankdata

from .model import PanelObservations

__all__ = [
    "PanelParseError",
    "RawPanel",
    "TransformState",
    "read_panel_csv",
    "write_panel_csv",
    "write_matrix_csv",
    "format_number",
    "screen_locations",
    "pit_to_normal",
    "normal_to_original",
]

MISSING_TOKENS = frozenset({"", "NA", "NaN", "nan"})


class PanelParseError(ValueError):
    """Malformed panel file; ``row`` and ``column`` are 1-based file coordinates."""

    def __init__(self, message: str, row: int | None = None, column: int | None = None):
        where = "" if row is None else f" (row {row}" + ("" if column is None else f", column {column}") + ")"
        super().__init__(message + where)
        self.row = row
        self.column = column


@dataclass(frozen=True)
class RawPanel:
    """``T x n`` panel with labels; missing cells are NaN.

    ``dropped`` lists locations removed by ``screen_locations``.
    """

    time_labels: tuple[str, ...]
    location_labels: tuple[str, ...]
    values: NDArray[np.float64]
    dropped: tuple[str, ...] = ()

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        if v.ndim != 2 or v.shape != (len(self.time_labels), len(self.location_labels)):
            raise ValueError("values must be T x n matching the label counts")
        for name, labels in (("time", self.time_labels), ("location", self.location_labels)):
            if len(set(labels)) != len(labels):
                raise ValueError(f"{name} labels must be unique")
        if np.isinf(v).any():
            raise ValueError("values must be finite or missing (NaN)")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "time_labels", tuple(map(str, self.time_labels)))
        object.__setattr__(self, "location_labels", tuple(map(str, self.location_labels)))

    @property
    def missing(self) -> NDArray[np.bool_]:
        return np.isnan(self.values)

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def to_observations(self) -> PanelObservations:
        if self.missing.any():
            raise ValueError("panel has missing cells; screen it first")
        return PanelObservations(self.values)


def format_number(v: float) -> str:
    v = float(v)
    if math.isnan(v):
        return "NA"
    if v == 0.0:
        return "0.0"  # drop the sign of -0.0
    return repr(v)


def write_matrix_csv(path, matrix: ArrayLike, row_labels, col_labels, corner: str = "time") -> None:
    """Labelled matrix as CSV (UTF-8, LF line endings)."""
    m = np.asarray(matrix, dtype=float)
    if m.shape != (len(row_labels), len(col_labels)):
        raise ValueError("matrix shape does not match the labels")
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([corner, *col_labels])
        for lab, row in zip(row_labels, m):
            w.writerow([lab, *map(format_number, row)])


def write_panel_csv(path, panel) -> None:
    if isinstance(panel, RawPanel):
        write_matrix_csv(path, panel.values, panel.time_labels, panel.location_labels)
    else:
        v = panel.values if isinstance(panel, PanelObservations) else np.asarray(panel, dtype=float)
        write_matrix_csv(path, v, [str(t + 1) for t in range(v.shape[0])],
                         [str(i) for i in range(v.shape[1])])


def read_panel_csv(path) -> RawPanel:
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    rows = [r for r in rows if r]  # tolerate a trailing blank line
    if len(rows) < 2:
        raise PanelParseError("panel file needs a header and at least one data row")
    header = rows[0]
    n = len(header) - 1
    if n < 1:
        raise PanelParseError("header has no location columns", row=1)
    times, vals = [], np.empty((len(rows) - 1, n))
    for r, row in enumerate(rows[1:], start=2):
        if len(row) != n + 1:
            raise PanelParseError(f"expected {n + 1} cells, found {len(row)}", row=r)
        times.append(row[0])
        for c, cell in enumerate(row[1:], start=2):
            tok = cell.strip()
            if tok in MISSING_TOKENS:
                vals[r - 2, c - 2] = np.nan
                continue
            try:
                x = float(tok)
            except ValueError:
                raise PanelParseError(f"non-numeric cell {cell!r}", row=r, column=c) from None
            if not math.isfinite(x):
                raise PanelParseError(f"non-finite cell {cell!r}", row=r, column=c)
            vals[r - 2, c - 2] = x
    try:
        return RawPanel(tuple(times), tuple(h.strip() for h in header[1:]), vals)
    except ValueError as exc:
        raise PanelParseError(str(exc)) from None


def _fill(col: NDArray[np.float64]) -> NDArray[np.float64]:
    out = col.copy()
    ok = ~np.isnan(out)
    # last observation carried forward, then back-fill the leading gap
    idx = np.where(ok, np.arange(out.size), -1)
    np.maximum.accumulate(idx, out=idx)
    first = int(np.argmax(ok))
    idx[idx < 0] = first
    return out[idx]


def screen_locations(panel: RawPanel, max_missing_fraction: float = 0.5) -> RawPanel:
    """Drop locations with too many missing cells, impute the rest.

    A location is dropped when its missing fraction exceeds
    ``max_missing_fraction``. Remaining gaps are filled by carrying the last
    observation forward; a leading gap takes the first observed value.
    """
    if not 0.0 <= max_missing_fraction <= 1.0:
        raise ValueError("max_missing_fraction must lie in [0, 1]")
    frac = panel.missing.mean(axis=0)
    keep = (frac <= max_missing_fraction) & (frac < 1.0)
    dropped = tuple(lab for lab, k in zip(panel.location_labels, keep) if not k)
    if not keep.any():
        raise ValueError("every location exceeds the missing-data threshold")
    if keep.sum() < 2:
        raise ValueError(f"only {int(keep.sum())} location left after screening; need at least 2")
    vals = np.column_stack([_fill(panel.values[:, j]) for j in np.flatnonzero(keep)])
    labels = tuple(lab for lab, k in zip(panel.location_labels, keep) if k)
    return RawPanel(panel.time_labels, labels, vals, panel.dropped + dropped)


@dataclass(frozen=True)
class TransformState:
    """Per-location distinct order statistics and their normal scores."""

    location_labels: tuple[str, ...]
    values: tuple[NDArray[np.float64], ...]
    scores: tuple[NDArray[np.float64], ...]
    T: int = 0

    def to_json(self) -> str:
        doc = {
            "T": self.T,
            "locations": {
                lab: {"values": v.tolist(), "scores": s.tolist()}
                for lab, v, s in zip(self.location_labels, self.values, self.scores)
            },
        }
        return json.dumps(doc, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "TransformState":
        doc = json.loads(text)
        locs = doc["locations"]
        labels = tuple(locs)
        return cls(labels,
                   tuple(np.array(locs[k]["values"], dtype=float) for k in labels),
                   tuple(np.array(locs[k]["scores"], dtype=float) for k in labels),
                   int(doc.get("T", 0)))

    def save(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "TransformState":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))


def pit_to_normal(panel) -> tuple[PanelObservations, TransformState]:
    """Rank-based normal scores ``Phi^{-1}((r - 0.5) / T)`` per column.

    Ties share their average rank. Accepts a complete ``RawPanel`` or a
    ``T x n`` array.
    """
    if isinstance(panel, RawPanel):
        y, labels = panel.values, panel.location_labels
    else:
        y = np.asarray(panel, dtype=float)
        labels = tuple(str(i) for i in range(y.shape[1]))
    if np.isnan(y).any():
        raise ValueError("panel has missing cells; screen it first")
    T = y.shape[0]
    out = np.empty_like(y)
    vals, scores = [], []
    for j in range(y.shape[1]):
        col = y[:, j]
        if np.all(col == col[0]):
            raise ValueError(f"location {labels[j]!r} is constant; normal scores are undefined")
        z = norm.ppf((rankdata(col, method="average") - 0.5) / T)
        out[:, j] = z
        v, first = np.unique(col, return_index=True)
        vals.append(v)
        scores.append(z[first])
    return PanelObservations(out), TransformState(tuple(labels), tuple(vals), tuple(scores), T)


def normal_to_original(scores: ArrayLike, state: TransformState) -> NDArray[np.float64]:
    """Invert the score map column by column by linear interpolation.

    Scores outside the fitted range are clamped to the extreme order
    statistics, with a ``RuntimeWarning``.
    """
    z = np.asarray(scores, dtype=float)
    squeeze = z.ndim == 1
    if squeeze:
        z = z[:, None]
    if z.shape[1] != len(state.values):
        raise ValueError(f"scores have {z.shape[1]} columns, state has {len(state.values)} locations")
    out = np.empty_like(z)
    clamped = 0
    for j, (v, s) in enumerate(zip(state.values, state.scores)):
        col = z[:, j]
        clamped += int(np.count_nonzero((col < s[0]) | (col > s[-1])))
        out[:, j] = np.interp(col, s, v)
    if clamped:
        warnings.warn(f"{clamped} score(s) outside the fitted range were clamped", RuntimeWarning,
                      stacklevel=2)
    return out[:, 0] if squeeze else out
