"""Incremental-learning metrics, overhead accounting and report files."""

from __future__ import annotations

import csv
import json
import statistics
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Any, Sequence


class IncompleteMatrixError(ValueError):
    pass


class ReportError(OSError):
    pass


@dataclass
class AccuracyMatrix:
    """Lower-triangular A[i][t]: accuracy on task i after learning task t.

    Cells hold exact ``(correct, total)`` counts; indices are 1-based.
    """

    cells: dict[tuple[int, int], tuple[int, int]] = field(default_factory=dict)

    def record(self, task: int, session: int, correct: int, total: int) -> None:
        if not 1 <= task <= session:
            raise ValueError(f"A[{task},{session}] lies outside the lower triangle")
        if total <= 0 or not 0 <= correct <= total:
            raise ValueError(f"invalid counts {correct}/{total}")
        self.cells[(task, session)] = (int(correct), int(total))

    def set_value(self, task: int, session: int, value: float) -> None:
        """Store a real-valued accuracy (used for metric tests and loaded reports)."""
        frac = Fraction(value)
        self.cells[(task, session)] = (frac.numerator, frac.denominator)

    def fraction(self, task: int, session: int) -> Fraction:
        try:
            c, n = self.cells[(task, session)]
        except KeyError:
            raise IncompleteMatrixError(f"A[{task},{session}] is undefined") from None
        return Fraction(c, n)

    def __getitem__(self, key: tuple[int, int]) -> float:
        return float(self.fraction(*key))

    @property
    def sessions(self) -> int:
        return max((t for _, t in self.cells), default=0)

    def is_complete(self, through: int | None = None) -> bool:
        b = self.sessions if through is None else through
        return b > 0 and all((i, t) in self.cells for t in range(1, b + 1) for i in range(1, t + 1))

    def require_complete(self) -> int:
        b = self.sessions
        if b == 0:
            raise IncompleteMatrixError("accuracy matrix is empty")
        missing = [(i, t) for t in range(1, b + 1) for i in range(1, t + 1) if (i, t) not in self.cells]
        if missing:
            raise IncompleteMatrixError(f"accuracy matrix missing cells {missing}")
        return b

    def row(self, session: int) -> list[float]:
        """Accuracies of tasks 1..session after ``session``."""
        return [self[i, session] for i in range(1, session + 1)]

    def to_rows(self) -> list[list[float | None]]:
        b = self.sessions
        return [[self[i, t] if (i, t) in self.cells else None for i in range(1, b + 1)] for t in range(1, b + 1)]

    def to_counts(self) -> list[list[int]]:
        return [[i, t, c, n] for (i, t), (c, n) in sorted(self.cells.items())]

    @classmethod
    def from_counts(cls, counts: Sequence[Sequence[int]]) -> AccuracyMatrix:
        m = cls()
        for i, t, c, n in counts:
            m.record(int(i), int(t), int(c), int(n))
        return m

    @classmethod
    def from_rows(cls, rows: Sequence[Sequence[float]]) -> AccuracyMatrix:
        """rows[t-1][i-1] = A[i,t] for i <= t."""
        m = cls()
        for t, row in enumerate(rows, start=1):
            for i in range(1, t + 1):
                m.set_value(i, t, row[i - 1])
        return m


def session_average(m: AccuracyMatrix, b: int) -> Fraction:
    """Average accuracy over tasks 1..b after session b."""
    return sum((m.fraction(i, b) for i in range(1, b + 1)), Fraction(0)) / b


def final_average_accuracy(m: AccuracyMatrix) -> float:
    b = m.require_complete()
    return float(session_average(m, b))


def cumulative_average_accuracy(m: AccuracyMatrix) -> float:
    b = m.require_complete()
    return float(sum((session_average(m, s) for s in range(1, b + 1)), Fraction(0)) / b)


def per_session_accuracies(m: AccuracyMatrix) -> list[float]:
    b = m.require_complete()
    return [float(session_average(m, s)) for s in range(1, b + 1)]


def selection_accuracy(predicted: Sequence[Sequence[int]], truth: Sequence[Sequence[int]]) -> list[float]:
    """Per-session fraction of test samples whose selected task is correct."""
    if len(predicted) != len(truth):
        raise ValueError(f"{len(predicted)} predicted sessions vs {len(truth)} true sessions")
    out = []
    for s, (p, t) in enumerate(zip(predicted, truth), start=1):
        if len(p) != len(t):
            raise ValueError(f"session {s}: {len(p)} predictions vs {len(t)} labels")
        if len(t) == 0:
            raise ValueError(f"session {s} has no samples")
        out.append(sum(int(a) == int(b) for a, b in zip(p, t)) / len(t))
    return out


# ---------------------------------------------------------------- overheads


@dataclass
class OverheadReport:
    method: str
    prompt_number: int
    prompt_params: int
    key_params: int
    head_params: int
    learnable_params: int
    training_time_per_epoch: float = 0.0
    training_time_spread: float = 0.0
    selection_time: float = 0.0
    selection_time_spread: float = 0.0

    def counts(self) -> dict[str, Any]:
        return {
            k: v
            for k, v in asdict(self).items()
            if k in ("method", "prompt_number", "prompt_params", "key_params", "head_params", "learnable_params")
        }

    def timing(self) -> dict[str, float]:
        return {
            "training_time_per_epoch": self.training_time_per_epoch,
            "training_time_spread": self.training_time_spread,
            "selection_time": self.selection_time,
            "selection_time_spread": self.selection_time_spread,
        }


def median_spread(samples: Sequence[float]) -> tuple[float, float]:
    if not samples:
        return 0.0, 0.0
    med = statistics.median(samples)
    spread = statistics.pstdev(samples) if len(samples) > 1 else 0.0
    return float(med), float(spread)


# ---------------------------------------------------------------- reports


@dataclass
class RunResult:
    method: str
    seed: int
    matrix: AccuracyMatrix
    overhead: OverheadReport
    selection: list[float] | None = None
    loss_log: list[dict[str, float]] = field(default_factory=list)
    state: Any = field(default=None, repr=False, compare=False)  # final ExperimentState, not serialized


def summarize(result: RunResult) -> dict[str, Any]:
    m = result.matrix
    summary: dict[str, Any] = {
        "method": result.method,
        "seed": result.seed,
        "final_average_accuracy": final_average_accuracy(m),
        "cumulative_average_accuracy": cumulative_average_accuracy(m),
        "per_session_accuracy": per_session_accuracies(m),
        "accuracy_matrix": m.to_rows(),
        "accuracy_counts": m.to_counts(),
        "overhead": result.overhead.counts(),
    }
    if result.selection is not None:
        summary["selection_accuracy"] = result.selection
    return summary


def _dump_json(obj: Any) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, ensure_ascii=False) + "\n"


def emit_report(
    results: Sequence[RunResult],
    path: str | Path,
    config: dict[str, Any] | None = None,
    plot_data: bool = True,
) -> dict[str, Path]:
    """Write matrix CSVs, a JSON summary, timing JSON and plot-data CSV.

    Wall-clock timings go to ``timing.json`` so ``summary.json`` depends
    only on (config, seed).
    """
    if not results:
        raise ReportError("nothing to report: the run produced no results")
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ReportError(f"cannot create report directory {out}: {exc}") from exc
    written: dict[str, Path] = {}
    runs = []
    timing = []
    try:
        for r in results:
            tag = f"{r.method}_seed{r.seed}"
            mpath = out / f"accuracy_{tag}.csv"
            write_matrix_csv(r.matrix, mpath)
            written[f"matrix:{tag}"] = mpath
            runs.append(summarize(r))
            timing.append({"method": r.method, "seed": r.seed, **r.overhead.timing()})
        summary = {
            "config": config or {},
            "seeds": [r.seed for r in results],
            "runs": runs,
            "mean_final_average_accuracy": sum(x["final_average_accuracy"] for x in runs) / len(runs),
            "mean_cumulative_average_accuracy": sum(x["cumulative_average_accuracy"] for x in runs) / len(runs),
        }
        spath = out / "summary.json"
        spath.write_text(_dump_json(summary), encoding="utf-8")
        written["summary"] = spath
        tpath = out / "timing.json"
        tpath.write_text(_dump_json(timing), encoding="utf-8")
        written["timing"] = tpath
        if plot_data:
            ppath = out / "plot_data.csv"
            with ppath.open("w", newline="", encoding="utf-8") as fh:
                w = csv.writer(fh)
                w.writerow(["method", "seed", "session", "average_accuracy", "selection_accuracy"])
                for r, s in zip(results, runs):
                    for b, acc in enumerate(s["per_session_accuracy"], start=1):
                        sel = "" if r.selection is None else repr(r.selection[b - 1])
                        w.writerow([r.method, r.seed, b, repr(acc), sel])
            written["plot_data"] = ppath
    except OSError as exc:
        raise ReportError(f"failed writing report under {out}: {exc}") from exc
    return written


def write_matrix_csv(m: AccuracyMatrix, path: Path) -> None:
    """One row per session t, columns A[1,t]..A[t,t] (triangle only)."""
    b = m.require_complete()
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["session"] + [f"task_{i}" for i in range(1, b + 1)])
        for t in range(1, b + 1):
            w.writerow([t] + [repr(m[i, t]) for i in range(1, t + 1)])


def read_matrix_csv(path: str | Path) -> AccuracyMatrix:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise IncompleteMatrixError(f"{path} is empty")
    values = []
    for t, r in enumerate(rows[1:], start=1):
        cells = [v for v in r[1:] if v != ""]
        if len(cells) != t:
            raise IncompleteMatrixError(f"{path}: row {t} has {len(cells)} values, expected {t}")
        try:
            values.append([float(v) for v in cells])
        except ValueError as exc:
            raise IncompleteMatrixError(f"{path}: row {t}: {exc}") from exc
    return AccuracyMatrix.from_rows(values)
