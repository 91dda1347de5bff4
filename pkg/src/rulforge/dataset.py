"""Cell histories, file formats, labelled samples and feature scaling.

On-disk layout (one cell per file pair)::

    <cell_id>.csv        cell_id,cycle,t_s,current_a,voltage_v,capacity_ah,phase
    <cell_id>.jsonl      {"cell_id", "cycle", "t", "i", "v", "q", "phase_boundaries"} per line
    <cell_id>.meta.csv   cell_id,cycle_life,nominal_capacity_ah

An optional ``splits.csv`` (``cell_id,split``) assigns cells to train/test.
"""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ContractError, InsufficientDataError, ParseError, RulforgeError, StateError
from .preprocess import PrepConfig, RawCycleSignals, assemble_sample, cycle_statistics

logger = logging.getLogger(__name__)

RUL_SCALE = 3000
CSV_COLUMNS = ("cell_id", "cycle", "t_s", "current_a", "voltage_v", "capacity_ah", "phase")
META_COLUMNS = ("cell_id", "cycle_life", "nominal_capacity_ah")
PHASES = ("charge", "discharge")


@dataclass
class CellHistory:
    cell_id: str
    cycles: list[RawCycleSignals]
    cycle_life: int
    nominal_capacity: float | None = None

    def __post_init__(self):
        if self.cycle_life <= 0:
            raise ContractError(f"cell {self.cell_id}: cycle_life must be positive")
        if self.cycle_life >= RUL_SCALE:
            raise ContractError(
                f"cell {self.cell_id}: cycle_life {self.cycle_life} must be below the "
                f"RUL scale of {RUL_SCALE}")

    def __len__(self):
        return len(self.cycles)


@dataclass(frozen=True)
class Sample:
    features: np.ndarray = field(repr=False)
    label_rul: int
    cell_id: str
    cycle_index: int
    cycle_life: int

    @property
    def label_scaled(self) -> float:
        return self.label_rul / RUL_SCALE


# ---------------------------------------------------------------------------
# reading and writing


def _fmt(x: float) -> str:
    return repr(float(x))


def _read_meta(path: Path) -> dict:
    if not path.exists():
        raise ParseError(f"missing metadata file {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in ("cell_id", "cycle_life") if c not in (reader.fieldnames or [])]
        if missing:
            raise ParseError(f"{path}: missing column(s) {', '.join(missing)}")
        rows = list(reader)
    if len(rows) != 1:
        raise ParseError(f"{path}: expected exactly one metadata row, found {len(rows)}")
    row = rows[0]
    try:
        life = int(row["cycle_life"])
        nominal = row.get("nominal_capacity_ah") or ""
        nominal = float(nominal) if nominal.strip() else None
    except ValueError as exc:
        raise ParseError(f"{path}:2: bad metadata value ({exc})") from exc
    return {"cell_id": row["cell_id"], "cycle_life": life, "nominal_capacity": nominal}


def _make_cycle(where: str, t, i, v, q, discharge) -> RawCycleSignals:
    t = np.asarray(t, dtype=np.float64)
    if np.any(np.diff(t) <= 0):
        bad = int(np.argmax(np.diff(t) <= 0)) + 1
        raise ParseError(f"{where}: time not strictly increasing at sample {bad}")
    try:
        return RawCycleSignals(t, i, v, q, discharge)
    except RulforgeError as exc:
        raise ParseError(f"{where}: {exc}") from exc


def _build_cell(path: Path, meta: dict, cycles: list) -> CellHistory:
    try:
        return CellHistory(meta["cell_id"], cycles, meta["cycle_life"], meta["nominal_capacity"])
    except ContractError as exc:
        raise ParseError(f"{path}: {exc}") from exc


def _read_csv_cell(path: Path) -> CellHistory | None:
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return None
        header = [h.strip() for h in header]
        missing = [c for c in CSV_COLUMNS if c not in header]
        if missing:
            raise ParseError(f"{path}:1: missing column(s) {', '.join(missing)}")
        col = {name: header.index(name) for name in CSV_COLUMNS}
        cycles = []
        cell_id = None
        current = None
        buf = None
        start_line = 2

        def flush():
            where = f"{path}: cell {cell_id} cycle {current} (line {start_line})"
            cycles.append(_make_cycle(where, buf[0], buf[1], buf[2], buf[3],
                                      np.array(buf[4], dtype=bool)))

        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise ParseError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            try:
                cyc = int(row[col["cycle"]])
                vals = [float(row[col[c]]) for c in ("t_s", "current_a", "voltage_v", "capacity_ah")]
            except ValueError as exc:
                raise ParseError(f"{path}:{lineno}: {exc}") from exc
            phase = row[col["phase"]].strip()
            if phase not in PHASES:
                raise ParseError(f"{path}:{lineno}: phase must be one of {PHASES}, got {phase!r}")
            rid = row[col["cell_id"]]
            if cell_id is None:
                cell_id = rid
            elif rid != cell_id:
                raise ParseError(f"{path}:{lineno}: mixed cell ids {cell_id!r} and {rid!r}")
            if cyc != current:
                expected = 1 if current is None else current + 1
                if cyc != expected:
                    raise ParseError(
                        f"{path}:{lineno}: cell {cell_id}: cycle index gap, expected cycle "
                        f"{expected} but found {cyc}")
                if buf is not None:
                    flush()
                current, buf, start_line = cyc, ([], [], [], [], []), lineno
            if buf[0] and vals[0] <= buf[0][-1]:
                raise ParseError(
                    f"{path}:{lineno}: cell {cell_id} cycle {cyc}: time not strictly increasing")
            for k in range(4):
                buf[k].append(vals[k])
            buf[4].append(phase == "discharge")
        if buf is None:
            return None
        flush()
    meta = _read_meta(_meta_path(path))
    if meta["cell_id"] != cell_id:
        raise ParseError(f"{_meta_path(path)}: cell id {meta['cell_id']!r} != {cell_id!r}")
    return _build_cell(path, meta, cycles)


def _read_jsonl_cell(path: Path) -> CellHistory | None:
    cycles = []
    cell_id = None
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from exc
            missing = [k for k in ("cell_id", "cycle", "t", "i", "v", "q", "phase_boundaries")
                       if k not in obj]
            if missing:
                raise ParseError(f"{path}:{lineno}: missing field(s) {', '.join(missing)}")
            if cell_id is None:
                cell_id = obj["cell_id"]
            elif obj["cell_id"] != cell_id:
                raise ParseError(f"{path}:{lineno}: mixed cell ids")
            expected = len(cycles) + 1
            if obj["cycle"] != expected:
                raise ParseError(
                    f"{path}:{lineno}: cell {cell_id}: cycle index gap, expected cycle "
                    f"{expected} but found {obj['cycle']}")
            n = len(obj["t"])
            discharge = np.zeros(n, dtype=bool)
            for seg in obj["phase_boundaries"]:
                if seg.get("phase") not in PHASES:
                    raise ParseError(f"{path}:{lineno}: bad phase in phase_boundaries")
                if seg["phase"] == "discharge":
                    discharge[int(seg["start"]):int(seg["end"])] = True
            where = f"{path}:{lineno}: cell {cell_id} cycle {obj['cycle']}"
            cycles.append(_make_cycle(where, obj["t"], obj["i"], obj["v"], obj["q"], discharge))
    if not cycles:
        return None
    meta = _read_meta(_meta_path(path))
    return _build_cell(path, meta, cycles)


def _meta_path(data_path: Path) -> Path:
    return data_path.with_name(data_path.stem + ".meta.csv")


def _data_files(path: Path, fmt: str) -> list[Path]:
    suffix = ".csv" if fmt == "csv" else ".jsonl"
    if path.is_file():
        return [path]
    if not path.is_dir():
        raise ParseError(f"no such file or directory: {path}")
    return sorted(p for p in path.iterdir()
                  if p.suffix == suffix and not p.name.endswith(".meta.csv")
                  and p.name != "splits.csv")


def load_cells(path, format: str = "csv") -> list[CellHistory]:
    """Read every cell under ``path`` (a directory or one data file)."""
    if format not in ("csv", "jsonl"):
        raise ContractError(f"unknown cell format {format!r}")
    reader = _read_csv_cell if format == "csv" else _read_jsonl_cell
    cells = []
    for p in _data_files(Path(path), format):
        cell = reader(p)
        if cell is not None:
            cells.append(cell)
    return cells


def write_cells(cells: Iterable[CellHistory], directory, format: str = "csv") -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written = []
    for cell in cells:
        if format == "csv":
            path = directory / f"{cell.cell_id}.csv"
            with path.open("w", newline="", encoding="utf-8") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(CSV_COLUMNS)
                for k, cyc in enumerate(cell.cycles, start=1):
                    dis = cyc.discharge if cyc.discharge is not None else np.zeros(len(cyc), bool)
                    for j in range(len(cyc)):
                        w.writerow((cell.cell_id, k, _fmt(cyc.t[j]), _fmt(cyc.I[j]), _fmt(cyc.V[j]),
                                    _fmt(cyc.Q[j]), "discharge" if dis[j] else "charge"))
        elif format == "jsonl":
            path = directory / f"{cell.cell_id}.jsonl"
            with path.open("w", encoding="utf-8") as fh:
                for k, cyc in enumerate(cell.cycles, start=1):
                    obj = {"cell_id": cell.cell_id, "cycle": k, "t": cyc.t.tolist(),
                           "i": cyc.I.tolist(), "v": cyc.V.tolist(), "q": cyc.Q.tolist(),
                           "phase_boundaries": _phase_segments(cyc)}
                    fh.write(json.dumps(obj) + "\n")
        else:
            raise ContractError(f"unknown cell format {format!r}")
        meta = directory / f"{cell.cell_id}.meta.csv"
        nominal = "" if cell.nominal_capacity is None else _fmt(cell.nominal_capacity)
        meta.write_text(",".join(META_COLUMNS) + "\n"
                        + f"{cell.cell_id},{cell.cycle_life},{nominal}\n", encoding="utf-8")
        written.append(path)
    return written


def _phase_segments(cyc: RawCycleSignals) -> list[dict]:
    dis = cyc.discharge if cyc.discharge is not None else np.zeros(len(cyc), bool)
    segments = []
    start = 0
    for j in range(1, len(dis) + 1):
        if j == len(dis) or dis[j] != dis[start]:
            segments.append({"phase": "discharge" if dis[start] else "charge",
                             "start": start, "end": j})
            start = j
    return segments


def read_splits(directory) -> dict[str, str] | None:
    path = Path(directory) / "splits.csv"
    if not path.exists():
        return None
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"cell_id", "split"} <= set(reader.fieldnames):
            raise ParseError(f"{path}:1: expected columns cell_id,split")
        return {row["cell_id"]: row["split"] for row in reader}


def write_splits(directory, splits: dict[str, str]) -> Path:
    path = Path(directory) / "splits.csv"
    lines = ["cell_id,split"] + [f"{cid},{splits[cid]}" for cid in sorted(splits)]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def partition(cells: Sequence[CellHistory], splits: dict[str, str]) -> dict[str, list[CellHistory]]:
    groups: dict[str, list[CellHistory]] = {}
    for cell in cells:
        if cell.cell_id not in splits:
            raise ParseError(f"cell {cell.cell_id} has no entry in splits.csv")
        groups.setdefault(splits[cell.cell_id], []).append(cell)
    return groups


def holdout_split(cells: Sequence[CellHistory], fraction: float, seed: int = 0):
    """Split cells into ``(keep, held_out)`` with ``round(fraction * n)`` held
    out (at least one when ``fraction > 0`` and ``n >= 2``)."""
    n = len(cells)
    k = int(round(fraction * n))
    if fraction > 0 and n >= 2:
        k = min(max(k, 1), n - 1)
    order = np.random.default_rng(seed).permutation(n)
    held = set(order[:k].tolist())
    keep = [c for j, c in enumerate(cells) if j not in held]
    out = [c for j, c in enumerate(cells) if j in held]
    return keep, out


def split_by_median(cells: Sequence[CellHistory]):
    """``(lower, upper)`` by cycle life; lives equal to the median go upper."""
    if len(cells) < 2:
        raise InsufficientDataError("median split needs at least 2 cells")
    med = float(np.median([c.cycle_life for c in cells]))
    lower = [c for c in cells if c.cycle_life < med]
    upper = [c for c in cells if c.cycle_life >= med]
    return lower, upper


# ---------------------------------------------------------------------------
# samples


def cell_statistics(cell: CellHistory, prep: PrepConfig = PrepConfig()) -> np.ndarray:
    return np.array([cycle_statistics(c, prep.denoise, prep.grid_size) for c in cell.cycles])


def make_dataset(cells: Iterable[CellHistory], prep: PrepConfig = PrepConfig()) -> list[Sample]:
    """One sample per valid cycle index (every ``sample_stride`` cycles)."""
    samples = []
    first = prep.min_valid_index
    for cell in cells:
        last = min(len(cell.cycles), cell.cycle_life)
        if last < first:
            logger.warning("cell %s: %d usable cycles, need %d for one sample; skipped",
                           cell.cell_id, last, first)
            continue
        stats = np.array([cycle_statistics(c, prep.denoise, prep.grid_size)
                          for c in cell.cycles[:last]])
        for i in range(first, last + 1, prep.sample_stride):
            samples.append(Sample(assemble_sample(stats, i, prep), cell.cycle_life - i,
                                  cell.cell_id, i, cell.cycle_life))
    return samples


def stack_features(samples: Sequence[Sample]) -> np.ndarray:
    return np.stack([s.features for s in samples]) if samples else np.zeros((0, 10, 4, 6))


def stack_labels(samples: Sequence[Sample]) -> np.ndarray:
    return np.array([s.label_scaled for s in samples], dtype=np.float64)


class MinMaxScaler:
    """Per-dimension min-max scaling over the flattened 24 feature dimensions.

    Constant dimensions map to 0; values outside the fitted range are left
    unclamped.
    """

    def __init__(self):
        self.min_: np.ndarray | None = None
        self.max_: np.ndarray | None = None

    @property
    def fitted(self) -> bool:
        return self.min_ is not None

    def fit(self, features: np.ndarray) -> "MinMaxScaler":
        if self.fitted:
            raise StateError("scaler is already fitted")
        flat = self._flat(features)
        if flat.shape[0] == 0:
            raise InsufficientDataError("cannot fit a scaler on an empty training set")
        self.min_ = flat.min(axis=0)
        self.max_ = flat.max(axis=0)
        return self

    def _flat(self, features: np.ndarray) -> np.ndarray:
        features = np.asarray(features, dtype=np.float64)
        return features.reshape(-1, int(np.prod(features.shape[-2:])))

    def _span(self):
        span = self.max_ - self.min_
        return np.where(span > 0, span, 1.0), span > 0

    def transform(self, features: np.ndarray) -> np.ndarray:
        if not self.fitted:
            raise StateError("scaler used before fit")
        features = np.asarray(features, dtype=np.float64)
        span, live = self._span()
        flat = np.where(live, (self._flat(features) - self.min_) / span, 0.0)
        return flat.reshape(features.shape)

    def inverse_transform(self, features: np.ndarray) -> np.ndarray:
        if not self.fitted:
            raise StateError("scaler used before fit")
        features = np.asarray(features, dtype=np.float64)
        span, _ = self._span()
        return (self._flat(features) * span + self.min_).reshape(features.shape)

    def to_dict(self) -> dict:
        return {"min": self.min_.tolist(), "max": self.max_.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "MinMaxScaler":
        s = cls()
        s.min_ = np.asarray(d["min"], dtype=np.float64)
        s.max_ = np.asarray(d["max"], dtype=np.float64)
        return s


def fit_scaler(train: Sequence[Sample]) -> MinMaxScaler:
    return MinMaxScaler().fit(stack_features(train))


def apply_scaler(scaler: MinMaxScaler, samples: Sequence[Sample]) -> list[Sample]:
    if not samples:
        return []
    scaled = scaler.transform(stack_features(samples))
    return [replace(s, features=f) for s, f in zip(samples, scaled)]
