"""Metrics reports, their serialization, and per-episode CSV logs."""
from __future__ import annotations

import csv
import io
import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List

import numpy as np

from ..episode import EpisodeLog
from ..errors import ConfigInvalid, IoError

REPORT_SCHEMA = "safectl.report/1"
FORMATS = ("csv", "json")

# Fixed leading columns of the per-seed CSV; violation and extra columns follow, sorted by name.
ROW_COLUMNS = ("arm", "seed", "episodes", "steps", "cost", "violations", "first_violation_step",
               "filter_steps", "filter_modified", "fallbacks", "infeasible", "solver_failures",
               "saturations", "wall_per_step")
# Metrics aggregated across seeds (median and quartiles).
AGGREGATED = ("cost", "violations", "first_violation_step", "filter_modified", "fallbacks",
              "infeasible", "solver_failures", "saturations", "wall_per_step")


@dataclass
class SeedRow:
    """Metrics of one arm on one seed, summed over its episodes.

    ``first_violation_step`` is the first step with any violation, or -1.
    """

    arm: str
    seed: int
    episodes: int = 0
    steps: int = 0
    cost: float = 0.0
    violations: int = 0
    first_violation_step: int = -1
    filter_steps: int = 0
    filter_modified: int = 0
    fallbacks: int = 0
    infeasible: int = 0
    solver_failures: int = 0
    saturations: int = 0
    wall_per_step: float = 0.0
    violations_by_constraint: Dict[str, int] = field(default_factory=dict)
    extras: Dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return _plain(asdict(self))

    @classmethod
    def from_dict(cls, d) -> "SeedRow":
        return cls(**d)


def _plain(obj):
    """Numpy scalars and arrays to built-in types, recursively."""
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    return obj


def quartiles(values) -> Dict[str, float]:
    v = np.asarray(values, dtype=float)
    q25, med, q75 = np.quantile(v, [0.25, 0.5, 0.75])
    return {"median": float(med), "q25": float(q25), "q75": float(q75)}


def aggregate(rows: List[SeedRow]) -> Dict[str, Dict[str, Dict[str, float]]]:
    """Per arm, median and quartiles across seeds of every numeric metric."""
    out: Dict[str, Dict[str, Dict[str, float]]] = {}
    for arm in dict.fromkeys(r.arm for r in rows):
        sel = [r for r in rows if r.arm == arm]
        stats = {k: quartiles([getattr(r, k) for r in sel]) for k in AGGREGATED}
        for name in sorted({k for r in sel for k in r.violations_by_constraint}):
            stats[f"violations[{name}]"] = quartiles([r.violations_by_constraint.get(name, 0) for r in sel])
        for name in sorted({k for r in sel for k in r.extras}):
            vals = [r.extras[name] for r in sel if name in r.extras]
            stats[name] = quartiles(vals)
        out[arm] = stats
    return out


@dataclass
class MetricsReport:
    experiment: str
    rows: List[SeedRow]
    aggregates: Dict[str, Dict[str, Dict[str, float]]] = field(default_factory=dict)
    summary: Dict[str, object] = field(default_factory=dict)
    metadata: Dict[str, object] = field(default_factory=dict)
    schema: str = REPORT_SCHEMA

    def __post_init__(self):
        if not self.aggregates and self.rows:
            self.aggregates = aggregate(self.rows)

    def arm_rows(self, arm: str) -> List[SeedRow]:
        return [r for r in self.rows if r.arm == arm]

    def median(self, arm: str, metric: str) -> float:
        return self.aggregates[arm][metric]["median"]

    def consistent(self, tol: float = 1e-12) -> bool:
        """True when the stored aggregates equal a recomputation from the rows."""
        fresh = aggregate(self.rows)
        if fresh.keys() != self.aggregates.keys():
            return False
        for arm, stats in fresh.items():
            if stats.keys() != self.aggregates[arm].keys():
                return False
            for k, q in stats.items():
                if any(abs(q[s] - self.aggregates[arm][k][s]) > tol for s in q):
                    return False
        return True

    def to_dict(self) -> dict:
        return _plain({"schema": self.schema, "experiment": self.experiment,
                       "rows": [r.to_dict() for r in self.rows], "aggregates": self.aggregates,
                       "summary": self.summary, "metadata": self.metadata})

    @classmethod
    def from_dict(cls, d) -> "MetricsReport":
        if d.get("schema") != REPORT_SCHEMA:
            raise ConfigInvalid(f"unsupported report schema {d.get('schema')!r}", "schema")
        return cls(d["experiment"], [SeedRow.from_dict(r) for r in d["rows"]], d["aggregates"],
                   d.get("summary", {}), d.get("metadata", {}), d["schema"])


# ----------------------------------------------------------------------------
# Report emission
# ----------------------------------------------------------------------------

def _row_columns(rows: List[SeedRow]):
    viol = sorted({k for r in rows for k in r.violations_by_constraint})
    extra = sorted({k for r in rows for k in r.extras})
    return list(ROW_COLUMNS) + [f"violations[{k}]" for k in viol] + [f"extra[{k}]" for k in extra]


def report_csv(report: MetricsReport) -> str:
    """Per-seed rows as CSV. The first line is a JSON comment carrying everything else."""
    buf = io.StringIO()
    head = {k: v for k, v in report.to_dict().items() if k not in ("rows", "aggregates")}
    buf.write("# " + json.dumps(head, sort_keys=True) + "\n")
    cols = _row_columns(report.rows)
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for r in report.rows:
        line = []
        for c in cols:
            if c.startswith("violations["):
                v = r.violations_by_constraint.get(c[11:-1], "")
            elif c.startswith("extra["):
                v = r.extras.get(c[6:-1], "")
            else:
                v = getattr(r, c)
            line.append(_fmt(v))
        w.writerow(line)
    return buf.getvalue()


def parse_report_csv(text: str) -> MetricsReport:
    first, _, body = text.partition("\n")
    if not first.startswith("# "):
        raise ConfigInvalid("missing report header line")
    head = json.loads(first[2:])
    reader = csv.reader(io.StringIO(body))
    cols = next(reader)
    ints = {"seed", "episodes", "steps", "violations", "first_violation_step", "filter_steps",
            "filter_modified", "fallbacks", "infeasible", "solver_failures", "saturations"}
    rows = []
    for line in reader:
        r = SeedRow(arm="", seed=0)
        for c, v in zip(cols, line):
            if v == "":
                continue
            if c.startswith("violations["):
                r.violations_by_constraint[c[11:-1]] = int(v)
            elif c.startswith("extra["):
                r.extras[c[6:-1]] = float(v)
            elif c == "arm":
                r.arm = v
            else:
                setattr(r, c, int(v) if c in ints else float(v))
        rows.append(r)
    rep = MetricsReport(head["experiment"], rows, {}, head.get("summary", {}), head.get("metadata", {}),
                        head.get("schema", REPORT_SCHEMA))
    return rep


def parse_report_json(text: str) -> MetricsReport:
    return MetricsReport.from_dict(json.loads(text))


def emit(report: MetricsReport, fmt: str, out_dir) -> Path:
    """Write the report as ``report.json`` or ``report.csv`` in ``out_dir``."""
    if fmt not in FORMATS:
        raise ConfigInvalid(f"unknown format {fmt!r}; expected one of {list(FORMATS)}", "format")
    path = Path(out_dir) / f"report.{fmt}"
    text = json.dumps(report.to_dict(), indent=1, sort_keys=True) if fmt == "json" else report_csv(report)
    _write(path, text)
    return path


def load_report(path) -> MetricsReport:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise IoError(f"cannot read report {path}: {exc}") from exc
    return parse_report_csv(text) if str(path).endswith(".csv") else parse_report_json(text)


def _write(path: Path, text: str) -> None:
    try:
        os.makedirs(path.parent, exist_ok=True)
        path.write_text(text)
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


# ----------------------------------------------------------------------------
# Episode logs and plot data
# ----------------------------------------------------------------------------

def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def episode_columns(log: EpisodeLog) -> List[str]:
    n_w = len(log.w[0]) if log.w else log.n_w
    n_c = len(log.c[0]) if log.c else 0
    return (["k"] + [f"x{i}" for i in range(log.n_x)] + [f"u_learn{i}" for i in range(log.n_u)]
            + [f"u_applied{i}" for i in range(log.n_u)] + [f"w{i}" for i in range(n_w)] + ["l"]
            + [f"c{j}" for j in range(n_c)] + ["filter_status"])


def episode_csv(log: EpisodeLog) -> str:
    """One row per step k with the state x_k before the input is applied."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(episode_columns(log))
    for k in range(len(log)):
        vals = ([k] + list(log.states[k]) + list(log.u_learn[k]) + list(log.u_applied[k])
                + list(log.w[k]) + [log.cost[k]] + list(log.c[k]) + [log.filter_status[k]])
        w.writerow([_fmt(v) for v in vals])
    return buf.getvalue()


def write_episode(log: EpisodeLog, path) -> None:
    _write(Path(path), episode_csv(log))


def read_episode_csv(path) -> Dict[str, object]:
    """Columns of an episode CSV as arrays (``filter_status`` as a list of strings)."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    cols, data = rows[0], rows[1:]
    out: Dict[str, object] = {}
    for j, c in enumerate(cols):
        col = [r[j] for r in data]
        out[c] = col if c == "filter_status" else np.array(col, dtype=float)
    return out


def write_series(path, columns, rows) -> None:
    """Plot-data table (e.g. learning curves) with a header line."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(v) for v in r])
    _write(Path(path), buf.getvalue())


def episode_path(out_dir, arm: str, seed: int, episode: int) -> Path:
    return Path(out_dir) / arm / f"seed_{seed}" / f"episode_{episode}.csv"
