"""Gaze sequences, outcomes, CSV ingestion and the planted-signal generator."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence, Union

import numpy as np

from .roi_map import ROIMap, grid_map, rois_of

FIXATION_HEADER = ["session_id", "t_index", "start_ms", "end_ms", "x_px", "y_px"]
RAW_HEADER = ["session_id", "t_index", "time_ms", "left_x", "left_y", "right_x", "right_y"]
OUTCOME_HEADER = ["session_id", "shelf_id", "chosen_roi_ids", "item_count"]

# synthetic stimulus size in pixels
IMAGE_WIDTH = 1920.0
IMAGE_HEIGHT = 1080.0


class GazeDataError(ValueError):
    pass


class ParseError(GazeDataError):
    def __init__(self, path, line: int, msg: str):
        self.line = line
        super().__init__(f"{path}:{line}: {msg}")


class IntegrityError(GazeDataError):
    pass


class SpacingError(IntegrityError):
    pass


class ConfigError(GazeDataError):
    pass


class Modality(str, Enum):
    FIXATION = "fixation"
    BINOCULAR_RAW = "binocular_raw"


@dataclass(frozen=True)
class FixationRecord:
    session_id: str
    t_index: int
    start_ms: int
    end_ms: int
    x_px: float
    y_px: float


@dataclass(frozen=True)
class RawGazeSample:
    session_id: str
    t_index: int
    time_ms: int
    left_x: float
    left_y: float
    right_x: float
    right_y: float


Record = Union[FixationRecord, RawGazeSample]


@dataclass(frozen=True)
class GazeSequence:
    session_id: str
    modality: Modality
    records: tuple[Record, ...]

    def __post_init__(self):
        if not self.records:
            raise IntegrityError(f"session {self.session_id!r}: gaze sequence is empty")
        kind = FixationRecord if self.modality is Modality.FIXATION else RawGazeSample
        for r in self.records:
            if not isinstance(r, kind):
                raise IntegrityError(f"session {self.session_id!r}: mixed record types")
            if r.session_id != self.session_id:
                raise IntegrityError(
                    f"session {self.session_id!r}: record belongs to {r.session_id!r}"
                )

    @property
    def length(self) -> int:
        return len(self.records)

    def onsets_ms(self) -> np.ndarray:
        if self.modality is Modality.FIXATION:
            return np.array([r.start_ms for r in self.records], dtype=np.int64)
        return np.array([r.time_ms for r in self.records], dtype=np.int64)

    def channels(self) -> np.ndarray:
        """K x T coordinate array: (x, y) for fixations, (lx, ly, rx, ry) for raw."""
        if self.modality is Modality.FIXATION:
            return np.array([[r.x_px for r in self.records], [r.y_px for r in self.records]])
        return np.array(
            [
                [r.left_x for r in self.records],
                [r.left_y for r in self.records],
                [r.right_x for r in self.records],
                [r.right_y for r in self.records],
            ]
        )

    def prefix(self, n: int) -> "GazeSequence":
        return GazeSequence(self.session_id, self.modality, self.records[:n])


@dataclass(frozen=True)
class Outcome:
    session_id: str
    chosen_roi_ids: frozenset[int]
    item_count: int
    shelf_id: str = "0"
    class_label: int | None = None

    def __post_init__(self):
        if self.item_count < 0:
            raise IntegrityError(f"session {self.session_id!r}: negative item_count")
        if self.item_count != len(self.chosen_roi_ids):
            raise IntegrityError(
                f"session {self.session_id!r}: item_count {self.item_count} != "
                f"{len(self.chosen_roi_ids)} chosen ids"
            )


@dataclass
class Dataset:
    sessions: list[tuple[GazeSequence, Outcome]]
    _index: dict[str, int] = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        self._index = {}
        for i, (g, u) in enumerate(self.sessions):
            if g.session_id != u.session_id:
                raise IntegrityError(f"gaze {g.session_id!r} paired with outcome {u.session_id!r}")
            if g.session_id in self._index:
                raise IntegrityError(f"duplicate session_id {g.session_id!r}")
            self._index[g.session_id] = i

    @property
    def N(self) -> int:
        return len(self.sessions)

    def __len__(self) -> int:
        return len(self.sessions)

    def __getitem__(self, session_id: str) -> tuple[GazeSequence, Outcome]:
        return self.sessions[self._index[session_id]]

    def __contains__(self, session_id: str) -> bool:
        return session_id in self._index

    @property
    def session_ids(self) -> list[str]:
        return [g.session_id for g, _ in self.sessions]

    def subset(self, ids: Iterable[str]) -> "Dataset":
        return Dataset([self[s] for s in ids])

    def map_sequences(self, fn) -> "Dataset":
        return Dataset([(fn(g), u) for g, u in self.sessions])

    def mean_length(self) -> float:
        return float(np.mean([g.length for g, _ in self.sessions])) if self.sessions else 0.0

    @classmethod
    def join(cls, sequences: Sequence[GazeSequence], outcomes: Sequence[Outcome]) -> "Dataset":
        by_id = {u.session_id: u for u in outcomes}
        missing = [g.session_id for g in sequences if g.session_id not in by_id]
        if missing:
            raise IntegrityError(f"no outcome for sessions {missing}")
        return cls([(g, by_id[g.session_id]) for g in sequences])


# --------------------------------------------------------------------------- CSV

def _open_rows(path, header: list[str]):
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        first = next(reader, None)
        if first is None or [h.strip() for h in first] != header:
            raise ParseError(path, 1, f"expected header {','.join(header)}, got {first}")
        for row in reader:
            if not row:
                continue
            yield reader.line_num, row


def _parse(path, line, fn, value, what):
    try:
        return fn(value)
    except ValueError:
        raise ParseError(path, line, f"non-numeric {what} {value!r}") from None


def _group(path, rows: list[tuple[int, Record]]) -> list[list[Record]]:
    groups: dict[str, list[Record]] = {}
    seen: dict[tuple[str, int], int] = {}
    for line, rec in rows:
        key = (rec.session_id, rec.t_index)
        if key in seen:
            raise IntegrityError(
                f"{path}:{line}: duplicate (session_id, t_index) {key}, first on line {seen[key]}"
            )
        seen[key] = line
        groups.setdefault(rec.session_id, []).append(rec)
    return [sorted(g, key=lambda r: r.t_index) for g in groups.values()]


def load_fixations(path: str | Path) -> list[GazeSequence]:
    rows: list[tuple[int, Record]] = []
    for line, row in _open_rows(path, FIXATION_HEADER):
        if len(row) != len(FIXATION_HEADER):
            raise ParseError(path, line, f"expected {len(FIXATION_HEADER)} fields, got {len(row)}")
        sid = row[0]
        rec = FixationRecord(
            sid,
            _parse(path, line, int, row[1], "t_index"),
            _parse(path, line, int, row[2], "start_ms"),
            _parse(path, line, int, row[3], "end_ms"),
            _parse(path, line, float, row[4], "x_px"),
            _parse(path, line, float, row[5], "y_px"),
        )
        if rec.end_ms <= rec.start_ms:
            raise IntegrityError(f"{path}:{line}: end_ms must exceed start_ms")
        rows.append((line, rec))
    out = []
    for recs in _group(path, rows):
        for a, b in zip(recs, recs[1:]):
            if b.start_ms < a.start_ms:
                raise IntegrityError(
                    f"{path}: session {a.session_id!r} start_ms decreases at t_index {b.t_index}"
                )
        out.append(GazeSequence(recs[0].session_id, Modality.FIXATION, tuple(recs)))
    return out


def load_raw_gaze(path: str | Path, tolerance_ms: int = 1) -> list[GazeSequence]:
    rows: list[tuple[int, Record]] = []
    for line, row in _open_rows(path, RAW_HEADER):
        if len(row) != len(RAW_HEADER):
            raise ParseError(path, line, f"expected {len(RAW_HEADER)} fields, got {len(row)}")
        rec = RawGazeSample(
            row[0],
            _parse(path, line, int, row[1], "t_index"),
            _parse(path, line, int, row[2], "time_ms"),
            *(_parse(path, line, float, v, n) for v, n in zip(row[3:], RAW_HEADER[3:])),
        )
        rows.append((line, rec))
    out = []
    for recs in _group(path, rows):
        times = np.array([r.time_ms for r in recs], dtype=np.int64)
        gaps = np.diff(times)
        if len(gaps):
            if np.any(gaps <= 0):
                raise IntegrityError(f"{path}: session {recs[0].session_id!r} time_ms not increasing")
            bad = np.abs(gaps - gaps[0]) > tolerance_ms
            if np.any(bad):
                i = int(np.argmax(bad))
                raise SpacingError(
                    f"{path}: session {recs[0].session_id!r} spacing {gaps[i]} ms at t_index "
                    f"{recs[i + 1].t_index} deviates from {gaps[0]} ms by more than {tolerance_ms} ms"
                )
        out.append(GazeSequence(recs[0].session_id, Modality.BINOCULAR_RAW, tuple(recs)))
    return out


def load_outcomes(path: str | Path, single_choice: bool = False) -> list[Outcome]:
    """Parse the outcomes CSV.  With ``single_choice`` every row must name exactly
    one id and ``class_label`` is set to that id + 1."""
    out = []
    for line, row in _open_rows(path, OUTCOME_HEADER):
        if len(row) != len(OUTCOME_HEADER):
            raise ParseError(path, line, f"expected {len(OUTCOME_HEADER)} fields, got {len(row)}")
        sid, shelf, ids_s, count_s = row
        ids = [
            _parse(path, line, int, v, "roi id") for v in ids_s.split("|") if v.strip() != ""
        ]
        count = _parse(path, line, int, count_s, "item_count")
        if len(set(ids)) != len(ids):
            raise IntegrityError(f"{path}:{line}: repeated roi id in {ids_s!r}")
        if count != len(ids):
            raise IntegrityError(
                f"{path}:{line}: item_count {count} does not match {len(ids)} chosen ids"
            )
        label = None
        if single_choice:
            if len(ids) != 1:
                raise IntegrityError(f"{path}:{line}: single-choice row needs exactly one id")
            label = ids[0] + 1
        out.append(Outcome(sid, frozenset(ids), count, shelf, label))
    return out


def _fmt(v: float) -> str:
    return repr(float(v))


def fixations_csv(sequences: Iterable[GazeSequence]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(FIXATION_HEADER)
    for g in sequences:
        for r in g.records:
            w.writerow([r.session_id, r.t_index, r.start_ms, r.end_ms, _fmt(r.x_px), _fmt(r.y_px)])
    return buf.getvalue()


def raw_gaze_csv(sequences: Iterable[GazeSequence]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RAW_HEADER)
    for g in sequences:
        for r in g.records:
            w.writerow([r.session_id, r.t_index, r.time_ms, _fmt(r.left_x), _fmt(r.left_y),
                        _fmt(r.right_x), _fmt(r.right_y)])
    return buf.getvalue()


def outcomes_csv(outcomes: Iterable[Outcome]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(OUTCOME_HEADER)
    for u in outcomes:
        w.writerow([u.session_id, u.shelf_id, "|".join(str(i) for i in sorted(u.chosen_roi_ids)),
                    u.item_count])
    return buf.getvalue()


def write_fixations(sequences, path) -> None:
    Path(path).write_text(fixations_csv(sequences), encoding="utf-8")


def write_raw_gaze(sequences, path) -> None:
    Path(path).write_text(raw_gaze_csv(sequences), encoding="utf-8")


def write_outcomes(outcomes, path) -> None:
    Path(path).write_text(outcomes_csv(outcomes), encoding="utf-8")


# --------------------------------------------------------------------- synthetic

@dataclass(frozen=True)
class SyntheticConfig:
    rows: int = 8
    cols: int = 8
    sessions: int = 512
    min_fix: int = 30
    max_fix: int = 50
    p_choose: float = 0.05
    dwell_bias: float = 6.0
    # spatial length scale (in cells) of the base walk; not part of the config document
    locality: float = 1.0

    def validate(self) -> None:
        if not self.dwell_bias > 1:
            raise ConfigError(f"dwell_bias must be > 1 to plant a signal, got {self.dwell_bias}")
        if self.rows * self.cols < 2:
            raise ConfigError("rows * cols must be at least 2")
        if self.rows < 1 or self.cols < 1:
            raise ConfigError("rows and cols must be positive")
        if self.sessions < 1:
            raise ConfigError("sessions must be positive")
        if not 1 <= self.min_fix <= self.max_fix:
            raise ConfigError("need 1 <= min_fix <= max_fix")
        if not 0 <= self.p_choose <= 1:
            raise ConfigError("p_choose must lie in [0, 1]")


def base_transition_weights(rows: int, cols: int, locality: float) -> np.ndarray:
    """Symmetric, strictly positive weights between grid cells; nearby cells
    (including the current one) are preferred, every cell stays reachable."""
    r, c = np.divmod(np.arange(rows * cols), cols)
    dist = np.hypot(r[:, None] - r[None, :], c[:, None] - c[None, :])
    return np.exp(-dist / locality) + 0.02


def generate_synthetic(cfg: SyntheticConfig, seed: int) -> tuple[Dataset, ROIMap]:
    """Pick-any choice sessions over a rows x cols shelf.

    Each ROI is chosen with probability ``p_choose``.  The scan-path is a Markov
    walk over ROIs whose transition weights into chosen ROIs are multiplied by
    ``dwell_bias``; fixation positions are uniform inside the visited ROI.
    """
    cfg.validate()
    rng = np.random.default_rng(seed)
    roi_map = grid_map(cfg.rows, cfg.cols, IMAGE_WIDTH, IMAGE_HEIGHT)
    J = cfg.rows * cfg.cols
    base = base_transition_weights(cfg.rows, cfg.cols, cfg.locality)
    boxes = np.array([[r.x_min, r.y_min, r.x_max, r.y_max] for r in roi_map.rois])
    width = len(str(cfg.sessions - 1))
    sessions = []
    for i in range(cfg.sessions):
        sid = f"s{i:0{width}d}"
        chosen = np.flatnonzero(rng.random(J) < cfg.p_choose)
        boost = np.ones(J)
        boost[chosen] = cfg.dwell_bias
        trans = base * boost[None, :]
        trans /= trans.sum(axis=1, keepdims=True)
        cum = np.cumsum(trans, axis=1)
        T = int(rng.integers(cfg.min_fix, cfg.max_fix + 1))
        state = int(rng.integers(J))
        t_ms = int(rng.integers(0, 200))
        recs = []
        for t in range(1, T + 1):
            if t > 1:
                state = min(int(np.searchsorted(cum[state], rng.random(), side="right")), J - 1)
            x0, y0, x1, y1 = boxes[state]
            x = float(rng.uniform(x0, x1))
            y = float(rng.uniform(y0, y1))
            dur = int(rng.integers(200, 501))
            recs.append(FixationRecord(sid, t, t_ms, t_ms + dur, x, y))
            t_ms += dur + int(rng.integers(20, 61))
        g = GazeSequence(sid, Modality.FIXATION, tuple(recs))
        u = Outcome(sid, frozenset(int(j) for j in chosen), len(chosen), "0")
        sessions.append((g, u))
    return Dataset(sessions), roi_map


def binocular_from_fixations(ds: Dataset, seed: int, period_ms: int = 20,
                             eye_offset_px: float = 12.0, jitter_px: float = 6.0) -> Dataset:
    """Resample fixation sessions into equally spaced binocular samples.

    Each fixation is held for its duration at ``period_ms`` spacing; the right eye
    sits ``eye_offset_px`` to the right of the left eye plus Gaussian jitter.
    """
    rng = np.random.default_rng(seed)
    out = []
    for g, u in ds.sessions:
        if g.modality is not Modality.FIXATION:
            raise IntegrityError("binocular_from_fixations needs fixation sequences")
        samples = []
        t0 = g.records[0].start_ms
        t = 1
        for r in g.records:
            n = max(1, (r.end_ms - r.start_ms) // period_ms)
            for _ in range(n):
                lx, ly, rx, ry = rng.normal(0.0, jitter_px, 4)
                samples.append(
                    RawGazeSample(
                        g.session_id, t, t0 + (t - 1) * period_ms,
                        r.x_px - eye_offset_px / 2 + lx, r.y_px + ly,
                        r.x_px + eye_offset_px / 2 + rx, r.y_px + ry,
                    )
                )
                t += 1
        out.append((GazeSequence(g.session_id, Modality.BINOCULAR_RAW, tuple(samples)), u))
    return Dataset(out)


def dwell_fraction(ds: Dataset, roi_map: ROIMap) -> tuple[float, float]:
    """Mean fraction of fixations inside chosen ROIs, and the chance fraction
    |chosen| / J, averaged over sessions with a non-empty choice set."""
    hit, chance = [], []
    for g, u in ds.sessions:
        if not u.chosen_roi_ids:
            continue
        xy = g.channels()
        ids = rois_of(roi_map, xy[0], xy[1])
        hit.append(np.isin(ids, list(u.chosen_roi_ids)).mean())
        chance.append(len(u.chosen_roi_ids) / roi_map.n_rois)
    return float(np.mean(hit)), float(np.mean(chance))
