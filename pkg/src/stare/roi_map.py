"""ROI geometry: loading, validation and pixel -> ROI / row / column mapping.

Boxes are half-open, ``[x_min, x_max) x [y_min, y_max)``, origin top-left with y
growing downward.  A valid map partitions the image exactly.
"""
from __future__ import annotations

import bisect
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

#: Returned by every mapping routine for coordinates outside the image.
OFF = -1


class ROIMapError(ValueError):
    """Base class for ROI map problems."""


class UnsupportedLayoutError(ROIMapError):
    """Axis-wise mapping requested on a map that is not a grid."""


@dataclass(frozen=True)
class Problem:
    kind: str  # "overlap" | "gap" | "duplicate_id" | "bad_box" | "ids" | "bounds" | "grid"
    message: str
    roi_ids: tuple[int, ...] = ()
    box: tuple[float, float, float, float] | None = None
    point: tuple[float, float] | None = None


class ROIValidationError(ROIMapError):
    """Collects every violation found while validating a map."""

    def __init__(self, problems: list[Problem]):
        self.problems = problems
        lines = "\n".join(f"  - [{p.kind}] {p.message}" for p in problems)
        super().__init__(f"{len(problems)} ROI map problem(s):\n{lines}")

    def kinds(self) -> set[str]:
        return {p.kind for p in self.problems}


@dataclass(frozen=True)
class ROI:
    roi_id: int
    label: str
    x_min: float
    y_min: float
    x_max: float
    y_max: float
    row: int = 0
    col: int = 0

    def contains(self, x: float, y: float) -> bool:
        return self.x_min <= x < self.x_max and self.y_min <= y < self.y_max


@dataclass(frozen=True)
class ROIMap:
    image_width: float
    image_height: float
    rois: tuple[ROI, ...]
    n_rows: int = 0
    n_cols: int = 0
    grid: bool = False
    # derived, filled by validate(); column/row boundaries for grid maps
    col_edges: tuple[float, ...] = field(default=(), compare=False)
    row_edges: tuple[float, ...] = field(default=(), compare=False)
    cell_ids: tuple[tuple[int, ...], ...] = field(default=(), compare=False)

    @property
    def n_rois(self) -> int:
        return len(self.rois)

    def roi_at(self, row: int, col: int) -> int:
        """roi_id of the grid cell (row, col); OFF if either index is OFF."""
        if row == OFF or col == OFF:
            return OFF
        return self.cell_ids[row][col]

    def to_dict(self) -> dict:
        return {
            "image_width": self.image_width,
            "image_height": self.image_height,
            "grid": self.grid,
            "n_rows": self.n_rows,
            "n_cols": self.n_cols,
            "rois": [
                {
                    "id": r.roi_id,
                    "label": r.label,
                    "x_min": r.x_min,
                    "y_min": r.y_min,
                    "x_max": r.x_max,
                    "y_max": r.y_max,
                    "row": r.row,
                    "col": r.col,
                }
                for r in self.rois
            ],
        }


def _boxes_overlap(a: ROI, b: ROI) -> tuple[float, float, float, float] | None:
    x0, x1 = max(a.x_min, b.x_min), min(a.x_max, b.x_max)
    y0, y1 = max(a.y_min, b.y_min), min(a.y_max, b.y_max)
    if x0 < x1 and y0 < y1:
        return (x0, y0, x1, y1)
    return None


def validate(m: ROIMap) -> ROIMap:
    """Check exclusivity, exhaustiveness and id density; return the map with
    grid lookup tables filled in.  Raises ROIValidationError listing all problems.
    """
    problems: list[Problem] = []
    W, H = m.image_width, m.image_height
    if not (W > 0 and H > 0):
        problems.append(Problem("bounds", f"image size must be positive, got {W}x{H}"))
        raise ROIValidationError(problems)

    seen: dict[int, int] = {}
    for r in m.rois:
        seen[r.roi_id] = seen.get(r.roi_id, 0) + 1
    for rid, n in sorted(seen.items()):
        if n > 1:
            problems.append(Problem("duplicate_id", f"roi_id {rid} appears {n} times", (rid,)))
    if sorted(seen) != list(range(len(seen))):
        problems.append(Problem("ids", f"roi_ids must be dense 0..J-1, got {sorted(seen)}"))

    good: list[ROI] = []
    for r in m.rois:
        if not (r.x_min < r.x_max and r.y_min < r.y_max):
            problems.append(Problem("bad_box", f"roi {r.roi_id} has an empty box", (r.roi_id,)))
            continue
        if r.x_min < 0 or r.y_min < 0 or r.x_max > W or r.y_max > H:
            problems.append(
                Problem("bounds", f"roi {r.roi_id} extends outside the {W}x{H} image", (r.roi_id,))
            )
        good.append(r)

    for i, a in enumerate(good):
        for b in good[i + 1 :]:
            box = _boxes_overlap(a, b)
            if box is not None:
                problems.append(
                    Problem(
                        "overlap",
                        f"rois {a.roi_id} and {b.roi_id} overlap on box {box}",
                        (a.roi_id, b.roi_id),
                        box=box,
                    )
                )

    # exact coverage on the elementary cells spanned by all box edges
    xs = sorted({0.0, float(W), *(e for r in good for e in (r.x_min, r.x_max) if 0 <= e <= W)})
    ys = sorted({0.0, float(H), *(e for r in good for e in (r.y_min, r.y_max) if 0 <= e <= H)})
    for x0, x1 in zip(xs, xs[1:]):
        for y0, y1 in zip(ys, ys[1:]):
            px, py = (x0 + x1) / 2, (y0 + y1) / 2
            if not any(r.contains(px, py) for r in good):
                problems.append(
                    Problem(
                        "gap",
                        f"point ({px}, {py}) in cell [{x0},{x1})x[{y0},{y1}) is not covered",
                        box=(x0, y0, x1, y1),
                        point=(px, py),
                    )
                )

    col_edges: tuple[float, ...] = ()
    row_edges: tuple[float, ...] = ()
    cell_ids: tuple[tuple[int, ...], ...] = ()
    if m.grid:
        grid_problems, col_edges, row_edges, cell_ids = _grid_tables(m, good)
        problems.extend(grid_problems)

    if problems:
        raise ROIValidationError(problems)
    return ROIMap(
        m.image_width, m.image_height, m.rois, m.n_rows, m.n_cols, m.grid,
        col_edges, row_edges, cell_ids,
    )


def _grid_tables(m: ROIMap, rois: list[ROI]):
    problems: list[Problem] = []
    R, C = m.n_rows, m.n_cols
    if R < 1 or C < 1:
        return [Problem("grid", f"grid map needs n_rows, n_cols >= 1, got {R}x{C}")], (), (), ()
    cells: dict[tuple[int, int], list[ROI]] = {}
    for r in rois:
        if not (0 <= r.row < R and 0 <= r.col < C):
            problems.append(Problem("grid", f"roi {r.roi_id} has (row, col)=({r.row}, {r.col}) outside {R}x{C}", (r.roi_id,)))
            continue
        cells.setdefault((r.row, r.col), []).append(r)
    for row in range(R):
        for col in range(C):
            n = len(cells.get((row, col), []))
            if n != 1:
                problems.append(Problem("grid", f"grid cell ({row}, {col}) maps to {n} rois"))
    if problems:
        return problems, (), (), ()

    col_spans = {}
    row_spans = {}
    for (row, col), (r,) in cells.items():
        col_spans.setdefault(col, set()).add((r.x_min, r.x_max))
        row_spans.setdefault(row, set()).add((r.y_min, r.y_max))
    for col, spans in sorted(col_spans.items()):
        if len(spans) != 1:
            problems.append(Problem("grid", f"column {col} has inconsistent x spans {sorted(spans)}"))
    for row, spans in sorted(row_spans.items()):
        if len(spans) != 1:
            problems.append(Problem("grid", f"row {row} has inconsistent y spans {sorted(spans)}"))
    if problems:
        return problems, (), (), ()

    cx = [next(iter(col_spans[c])) for c in range(C)]
    ry = [next(iter(row_spans[r])) for r in range(R)]
    for name, spans in (("column", cx), ("row", ry)):
        for i, (a, b) in enumerate(zip(spans, spans[1:])):
            if a[1] != b[0]:
                problems.append(Problem("grid", f"{name}s {i} and {i + 1} are not contiguous"))
    col_edges = tuple([cx[0][0]] + [s[1] for s in cx])
    row_edges = tuple([ry[0][0]] + [s[1] for s in ry])
    cell_ids = tuple(tuple(cells[(row, col)][0].roi_id for col in range(C)) for row in range(R))
    return problems, col_edges, row_edges, cell_ids


def grid_map(n_rows: int, n_cols: int, width: float, height: float) -> ROIMap:
    """Regular row-major grid; roi_id = row * n_cols + col."""
    xe = np.linspace(0.0, width, n_cols + 1)
    ye = np.linspace(0.0, height, n_rows + 1)
    xe[-1], ye[-1] = width, height
    rois = []
    for r in range(n_rows):
        for c in range(n_cols):
            rois.append(
                ROI(r * n_cols + c, f"r{r}c{c}", float(xe[c]), float(ye[r]),
                    float(xe[c + 1]), float(ye[r + 1]), r, c)
            )
    return validate(ROIMap(float(width), float(height), tuple(rois), n_rows, n_cols, True))


def roi_map_from_dict(doc: dict) -> ROIMap:
    try:
        rois = tuple(
            ROI(
                int(r["id"]),
                str(r.get("label", "")),
                float(r["x_min"]),
                float(r["y_min"]),
                float(r["x_max"]),
                float(r["y_max"]),
                int(r.get("row", 0)),
                int(r.get("col", 0)),
            )
            for r in doc["rois"]
        )
        m = ROIMap(
            float(doc["image_width"]),
            float(doc["image_height"]),
            rois,
            int(doc.get("n_rows", 0)),
            int(doc.get("n_cols", 0)),
            bool(doc.get("grid", False)),
        )
    except (KeyError, TypeError, ValueError) as e:
        raise ROIMapError(f"malformed ROI map document: {e!r}") from e
    return validate(m)


def load_roi_map(path: str | Path) -> ROIMap:
    with open(path, encoding="utf-8") as fh:
        return roi_map_from_dict(json.load(fh))


def save_roi_map(m: ROIMap, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(m.to_dict(), fh, indent=1)
        fh.write("\n")


def _inside(m: ROIMap, x: float, y: float) -> bool:
    return 0 <= x < m.image_width and 0 <= y < m.image_height


def map_point_to_roi(m: ROIMap, x: float, y: float) -> int:
    if not _inside(m, x, y):  # NaN fails both comparisons
        return OFF
    # box containment on purpose, independent of the grid tables
    for r in m.rois:
        if r.contains(x, y):
            return r.roi_id
    return OFF  # unreachable for validated maps


def _require_grid(m: ROIMap) -> None:
    if not m.grid:
        raise UnsupportedLayoutError("axis-wise mapping needs a grid ROI map")


def _span_index(edges: tuple[float, ...], v: float) -> int:
    if not (edges[0] <= v < edges[-1]):
        return OFF
    return bisect.bisect_right(edges, v) - 1


def map_x_to_column_token(m: ROIMap, x: float) -> int:
    _require_grid(m)
    if not (0 <= x < m.image_width):
        return OFF
    return _span_index(m.col_edges, x)


def map_y_to_row_token(m: ROIMap, y: float) -> int:
    _require_grid(m)
    if not (0 <= y < m.image_height):
        return OFF
    return _span_index(m.row_edges, y)


def columns_of(m: ROIMap, xs) -> np.ndarray:
    """Vectorised map_x_to_column_token."""
    _require_grid(m)
    return _spans_of(np.asarray(m.col_edges), np.asarray(xs, dtype=float), m.image_width)


def rows_of(m: ROIMap, ys) -> np.ndarray:
    """Vectorised map_y_to_row_token."""
    _require_grid(m)
    return _spans_of(np.asarray(m.row_edges), np.asarray(ys, dtype=float), m.image_height)


def _spans_of(edges: np.ndarray, v: np.ndarray, limit: float) -> np.ndarray:
    idx = np.searchsorted(edges, v, side="right") - 1
    ok = (v >= 0) & (v < limit) & (v >= edges[0]) & (v < edges[-1])
    return np.where(ok, idx, OFF).astype(np.int64)


def rois_of(m: ROIMap, xs, ys) -> np.ndarray:
    """Vectorised map_point_to_roi."""
    xs = np.asarray(xs, dtype=float)
    ys = np.asarray(ys, dtype=float)
    if m.grid:
        c = columns_of(m, xs)
        r = rows_of(m, ys)
        table = np.asarray(m.cell_ids, dtype=np.int64)
        return np.where((c >= 0) & (r >= 0), table[np.maximum(r, 0), np.maximum(c, 0)], OFF)
    out = np.full(np.broadcast(xs, ys).shape, OFF, dtype=np.int64)
    for roi in m.rois:
        hit = (xs >= roi.x_min) & (xs < roi.x_max) & (ys >= roi.y_min) & (ys < roi.y_max)
        out[hit] = roi.roi_id
    return out


def monte_carlo_coverage(m: ROIMap, n: int = 100_000, seed: int = 0) -> bool:
    """True iff n uniform in-image points are each contained in exactly one ROI."""
    rng = np.random.default_rng(seed)
    xs = rng.uniform(0, m.image_width, n)
    ys = rng.uniform(0, m.image_height, n)
    counts = np.zeros(n, dtype=np.int64)
    for roi in m.rois:
        counts += (xs >= roi.x_min) & (xs < roi.x_max) & (ys >= roi.y_min) & (ys < roi.y_max)
    return bool(np.all(counts == 1))
