"""Ordered detector cascade and the evaluation suite.

The cascade applies reconstruction, distance and MC dropout in that fixed
order (cheapest-to-most-sensitive) and stops at the first red flag, so
the final flag equals the OR of the standalone flags while later stages
are only paid for on surviving windows.
"""

from __future__ import annotations

import csv
import io
import time
from dataclasses import dataclass, field

import numpy as np

from .classifier import ClassifierHead, predict_classes
from .data import SensorWindow, ScenarioSet
from .detectors import (
    GREEN,
    RED,
    DetectorVerdict,
    Detector,
    DistanceDetector,
    McDropoutDetector,
    ReconstructionDetector,
    dump_scores_csv,
)
from .mae import MaeModel, encode

CASCADE_ORDER = ("reconstruction", "distance", "mcdropout")
PASSED_ALL = "passed_all"
SPLIT_ORDER = ("unseen_class", "unseen_subject", "unseen_dataset", "validation")


@dataclass
class CascadeVerdict:
    final_flag: str
    stage_reached: str  # first red stage, or "passed_all"
    verdicts: list[DetectorVerdict]


class Cascade:
    """Short-circuiting combination of the three calibrated detectors."""

    def __init__(
        self,
        reconstruction: ReconstructionDetector,
        distance: DistanceDetector,
        mcdropout: McDropoutDetector,
    ):
        self.reconstruction = reconstruction
        self.distance = distance
        self.mcdropout = mcdropout

    @property
    def stages(self) -> dict[str, Detector]:
        return {
            "reconstruction": self.reconstruction,
            "distance": self.distance,
            "mcdropout": self.mcdropout,
        }

    def verdicts(self, windows: list[SensorWindow]) -> list[CascadeVerdict]:
        """Cascade verdict per window; later stages see only survivors.

        The reconstruction stage groups consecutive windows of the given
        list, exactly as the standalone detector would on the same list.
        """
        n = len(windows)
        results: list[CascadeVerdict | None] = [None] * n

        rec_scores = self.reconstruction.scores(windows)
        rec_verdicts = [
            DetectorVerdict("reconstruction", float(s), self.reconstruction.flag_of(s))
            for s in rec_scores
        ]
        survivors = []
        for i, v in enumerate(rec_verdicts):
            if v.flag == RED:
                results[i] = CascadeVerdict(RED, "reconstruction", [v])
            else:
                survivors.append(i)

        if survivors:
            latents = encode(self.distance.mae, [windows[i] for i in survivors])
            dist_scores = self.distance.scores_from_latents(latents)
            stage3 = []
            for row, i in enumerate(survivors):
                v = DetectorVerdict("distance", float(dist_scores[row]), self.distance.flag_of(dist_scores[row]))
                if v.flag == RED:
                    results[i] = CascadeVerdict(RED, "distance", [rec_verdicts[i], v])
                else:
                    stage3.append((row, i, v))

            if stage3:
                rows = [row for row, _, _ in stage3]
                mcd_scores = self.mcdropout.scores_from_latents(latents[rows])
                for (row, i, dv), s in zip(stage3, mcd_scores):
                    v = DetectorVerdict("mcdropout", float(s), self.mcdropout.flag_of(s))
                    if v.flag == RED:
                        results[i] = CascadeVerdict(RED, "mcdropout", [rec_verdicts[i], dv, v])
                    else:
                        results[i] = CascadeVerdict(GREEN, PASSED_ALL, [rec_verdicts[i], dv, v])
        return results  # type: ignore[return-value]

    def verdict(self, window: SensorWindow) -> CascadeVerdict:
        return self.verdicts([window])[0]


# ---------------------------------------------------------------------------
# Uncertainty Accuracy
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class UAReport:
    """Four-cell confusion between flags and classifier correctness.

    Inconsistent cases are (out-of-scope AND correct) plus (in-scope AND
    incorrect); ua = 1 - inconsistent / (inconsistent + consistent).
    """

    n_in_correct: int
    n_in_incorrect: int
    n_out_correct: int
    n_out_incorrect: int
    ua: float

    @property
    def total(self) -> int:
        return (
            self.n_in_correct + self.n_in_incorrect
            + self.n_out_correct + self.n_out_incorrect
        )


def uncertainty_accuracy(flags, predictions, labels) -> UAReport:
    """Score flag/correctness consistency. Green means in scope."""
    flags = list(flags)
    predictions = list(predictions)
    labels = list(labels)
    if not flags:
        raise ValueError("uncertainty_accuracy of empty input")
    if not len(flags) == len(predictions) == len(labels):
        raise ValueError("flags, predictions and labels must have equal length")
    n_in_correct = n_in_incorrect = n_out_correct = n_out_incorrect = 0
    for f, p, y in zip(flags, predictions, labels):
        correct = p == y
        if f == GREEN:
            n_in_correct += correct
            n_in_incorrect += not correct
        else:
            n_out_correct += correct
            n_out_incorrect += not correct
    inconsistent = n_out_correct + n_in_incorrect
    consistent = n_in_correct + n_out_incorrect
    ua = 1.0 - inconsistent / (inconsistent + consistent)
    return UAReport(
        n_in_correct=n_in_correct,
        n_in_incorrect=n_in_incorrect,
        n_out_correct=n_out_correct,
        n_out_incorrect=n_out_incorrect,
        ua=ua,
    )


# ---------------------------------------------------------------------------
# Scenario evaluation
# ---------------------------------------------------------------------------


@dataclass
class ReportRow:
    method: str
    split: str
    ua: float
    red_rate: float
    accuracy: float
    n: int


@dataclass
class EvaluationReport:
    rows: list[ReportRow]
    stage_stats: dict[str, dict[str, float]]  # split -> stage_reached fractions
    scores: dict[tuple[str, str], np.ndarray] = field(default_factory=dict)

    def row(self, method: str, split: str) -> ReportRow:
        for r in self.rows:
            if r.method == method and r.split == split:
                return r
        raise KeyError((method, split))

    def to_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            self._write_csv(fh)

    def csv_text(self) -> str:
        buf = io.StringIO()
        self._write_csv(buf)
        return buf.getvalue()

    def _write_csv(self, fh):
        writer = csv.writer(fh)
        writer.writerow(["method", "split", "ua", "red_rate", "accuracy", "n"])
        for r in self.rows:
            writer.writerow(
                [r.method, r.split, f"{r.ua:.6f}", f"{r.red_rate:.6f}",
                 f"{r.accuracy:.6f}", r.n]
            )

    def format_text(self) -> str:
        lines = ["UA (x100) by method and split:"]
        header = f"{'method':<16}" + "".join(f"{s:>16}" for s in SPLIT_ORDER)
        lines.append(header)
        for method in (*CASCADE_ORDER, "cascade"):
            cells = []
            for split in SPLIT_ORDER:
                cells.append(f"{100.0 * self.row(method, split).ua:>16.2f}")
            lines.append(f"{method:<16}" + "".join(cells))
        lines.append("")
        lines.append("Short-circuit profile (fraction of windows stopped per stage;")
        lines.append("not part of the reference tables, operational extension):")
        for split in SPLIT_ORDER:
            stats = self.stage_stats[split]
            cells = ", ".join(f"{k}={v:.3f}" for k, v in stats.items())
            lines.append(f"  {split}: {cells}")
        return "\n".join(lines)


def evaluate_scenarios(
    mae: MaeModel,
    head: ClassifierHead,
    cascade: Cascade,
    scenarios: ScenarioSet,
) -> EvaluationReport:
    """UA, red-flag rate, and classifier accuracy for each method on each
    split, plus short-circuit statistics for the cascade."""
    rows: list[ReportRow] = []
    stage_stats: dict[str, dict[str, float]] = {}
    scores: dict[tuple[str, str], np.ndarray] = {}
    splits = scenarios.splits()
    for split_name in SPLIT_ORDER:
        if split_name not in splits or not splits[split_name]:
            raise ValueError(f"missing evaluation split {split_name!r}")
    for split_name in SPLIT_ORDER:
        windows = splits[split_name]
        labels = [w.label for w in windows]
        latents = encode(mae, windows)
        predictions = list(predict_classes(head, latents))
        accuracy = float(np.mean([p == y for p, y in zip(predictions, labels)]))

        per_method_flags: dict[str, list[str]] = {}
        rec = cascade.reconstruction
        rec_scores = rec.scores(windows)
        scores[("reconstruction", split_name)] = rec_scores
        per_method_flags["reconstruction"] = [rec.flag_of(s) for s in rec_scores]

        dist_scores = cascade.distance.scores_from_latents(latents)
        scores[("distance", split_name)] = dist_scores
        per_method_flags["distance"] = [cascade.distance.flag_of(s) for s in dist_scores]

        mcd_scores = cascade.mcdropout.scores_from_latents(latents)
        scores[("mcdropout", split_name)] = mcd_scores
        per_method_flags["mcdropout"] = [cascade.mcdropout.flag_of(s) for s in mcd_scores]

        cascade_verdicts = cascade.verdicts(windows)
        per_method_flags["cascade"] = [v.final_flag for v in cascade_verdicts]
        counts = {stage: 0 for stage in (*CASCADE_ORDER, PASSED_ALL)}
        for v in cascade_verdicts:
            counts[v.stage_reached] += 1
        stage_stats[split_name] = {k: c / len(windows) for k, c in counts.items()}

        for method in (*CASCADE_ORDER, "cascade"):
            flags = per_method_flags[method]
            ua = uncertainty_accuracy(flags, predictions, labels)
            rows.append(
                ReportRow(
                    method=method,
                    split=split_name,
                    ua=ua.ua,
                    red_rate=float(np.mean([f == RED for f in flags])),
                    accuracy=accuracy,
                    n=len(windows),
                )
            )
    return EvaluationReport(rows=rows, stage_stats=stage_stats, scores=scores)


def dump_histograms(report: EvaluationReport, out_dir):
    """One (score, split) CSV per detector per split."""
    import os

    paths = []
    for (method, split), values in report.scores.items():
        path = os.path.join(out_dir, f"hist_{method}_{split}.csv")
        dump_scores_csv(path, values, split)
        paths.append(path)
    return paths


# ---------------------------------------------------------------------------
# Timing
# ---------------------------------------------------------------------------


@dataclass
class TimingRow:
    method: str
    seconds: float
    n_samples: int


def timing_report(
    mae: MaeModel,
    head: ClassifierHead,
    cascade: Cascade,
    windows: list[SensorWindow],
) -> list[TimingRow]:
    """Wall-clock seconds per method over the given windows.

    Stage rows time the scoring step proper: distance and MC dropout are
    measured on precomputed latents (dropout lives in the head, so one
    deterministic encoding is shared); the shared encoding cost is its own
    row. ``total`` is the no-short-circuit sum of the three stage rows;
    ``cascade`` is the real short-circuiting run including survivor
    encodings. Numbers are hardware dependent and reported, not asserted.
    """
    n = len(windows)
    rows: list[TimingRow] = []

    t0 = time.perf_counter()
    latents = encode(mae, windows)
    rows.append(TimingRow("encode", time.perf_counter() - t0, n))

    t0 = time.perf_counter()
    cascade.reconstruction.scores(windows)
    rec_t = time.perf_counter() - t0
    rows.append(TimingRow("reconstruction", rec_t, n))

    t0 = time.perf_counter()
    cascade.distance.scores_from_latents(latents)
    dist_t = time.perf_counter() - t0
    rows.append(TimingRow("distance", dist_t, n))

    t0 = time.perf_counter()
    cascade.mcdropout.scores_from_latents(latents)
    mcd_t = time.perf_counter() - t0
    rows.append(TimingRow("mcdropout", mcd_t, n))

    rows.append(TimingRow("total", rec_t + dist_t + mcd_t, n))

    t0 = time.perf_counter()
    cascade.verdicts(windows)
    rows.append(TimingRow("cascade", time.perf_counter() - t0, n))
    return rows


def timing_csv_text(rows: list[TimingRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(["method", "seconds", "n_samples"])
    for r in rows:
        writer.writerow([r.method, f"{r.seconds:.6f}", r.n_samples])
    return buf.getvalue()
