"""End-to-end stages: data, pretrain, head, calibrate, evaluate, infer.

Each stage is a plain function over (config, bundle) so the CLI, the test
suite and the demo scripts drive exactly the same code.
"""

from __future__ import annotations

import dataclasses
import math
import os
from dataclasses import dataclass

import numpy as np

from .bundle import Bundle, build_detectors, build_head, build_mae, snapshot_params
from .cascade import (
    Cascade,
    EvaluationReport,
    TimingRow,
    dump_histograms,
    evaluate_scenarios,
    timing_report,
)
from .classifier import ClassifierHead, predict_probs, train_head
from .config import RunConfig, config_checksum
from .data import ScenarioSet, SensorWindow, build_scenarios, ingest_csv, synth_generate
from .detectors import DistanceDetector, McDropoutDetector, ReconstructionDetector
from .mae import MaeModel, encode, pretrain
from .nn.rng import RngState


def load_windows(config: RunConfig) -> list[SensorWindow]:
    """Synthetic generation, or CSV ingestion when paths.data_csv is set."""
    if config.paths.data_csv:
        return ingest_csv(
            config.paths.data_csv,
            window_len=config.data.window_len,
            sample_rate_hz=config.data.sample_rate_hz,
        )
    return synth_generate(config.data, RngState(config.seed.data))


def make_scenarios(config: RunConfig) -> ScenarioSet:
    windows = load_windows(config)
    return build_scenarios(windows, config.split, RngState(config.seed.data).child("split"))


def eval_seeds_of(config: RunConfig) -> dict[str, int]:
    mc = RngState(config.seed.mc)
    return {
        "reconstruction": mc.child("recon-eval").seed,
        "mcdropout": mc.child("mcd-eval").seed,
    }


def run_pretrain(config: RunConfig) -> tuple[Bundle, list[dict]]:
    scenarios = make_scenarios(config)
    mae = MaeModel(
        config.mae, config.data.window_len, config.data.channels,
        RngState(config.seed.init),
    )
    curve = pretrain(
        mae,
        scenarios.train,
        scenarios.validation,
        epochs=config.train.mae_epochs,
        rng=RngState(config.seed.training),
        lr=config.train.mae_lr,
        batch_size=config.train.mae_batch_size,
    )
    bundle = Bundle(
        config=config,
        mae_arrays=snapshot_params(mae.parameters()),
        eval_seeds=eval_seeds_of(config),
    )
    return bundle, curve


def run_train_head(config: RunConfig, bundle: Bundle) -> tuple[Bundle, list[dict]]:
    mae = build_mae(bundle)
    scenarios = make_scenarios(config)
    class_labels = sorted({w.label for w in scenarios.train})
    head = ClassifierHead(
        embed_dim=config.mae.embed_dim,
        class_labels=class_labels,
        rng=RngState(config.seed.init).child("head"),
        hidden_dim=config.head.hidden_dim,
        dropout_rate=config.head.dropout_rate,
    )
    curve = train_head(
        head,
        mae,
        scenarios.train,
        scenarios.validation,
        epochs=config.train.head_epochs,
        rng=RngState(config.seed.training).child("head"),
        lr=config.train.head_lr,
        batch_size=config.train.head_batch_size,
    )
    out = Bundle(
        config=config,
        mae_arrays=bundle.mae_arrays,
        head_arrays=snapshot_params(head.parameters()),
        class_labels=class_labels,
        eval_seeds=eval_seeds_of(config),
    )
    return out, curve


def run_calibrate(config: RunConfig, bundle: Bundle) -> tuple[Bundle, dict[str, float]]:
    """Fit centroids, calibrate all three thresholds on the validation
    split; returns the completed bundle plus each detector's red rate on
    its own calibration windows."""
    mae = build_mae(bundle)
    head = build_head(bundle)
    scenarios = make_scenarios(config)
    seeds = eval_seeds_of(config)

    rec = ReconstructionDetector(mae, eval_seed=seeds["reconstruction"])
    dist = DistanceDetector(mae)
    dist.fit(
        scenarios.train,
        k=config.kmeans_k(),
        rng=RngState(config.seed.training).child("kmeans"),
        max_iter=config.detector.kmeans_max_iter,
        restarts=config.detector.kmeans_restarts,
    )
    mcd = McDropoutDetector(
        mae, head, passes=config.detector.mc_passes, eval_seed=seeds["mcdropout"]
    )

    q = config.detector.quantile
    red_rates: dict[str, float] = {}
    thresholds = {}
    for det in (rec, dist, mcd):
        thresholds[det.name] = det.calibrate(scenarios.validation, q=q)
        flags = [v.flag for v in det.verdicts(scenarios.validation)]
        red_rates[det.name] = float(np.mean([f == "red" for f in flags]))

    out = Bundle(
        config=config,
        mae_arrays=bundle.mae_arrays,
        head_arrays=bundle.head_arrays,
        class_labels=bundle.class_labels,
        thresholds=thresholds,
        centroids=dist.centroids,
        eval_seeds=seeds,
    )
    return out, red_rates


@dataclass
class Runtime:
    mae: MaeModel
    head: ClassifierHead
    reconstruction: ReconstructionDetector
    distance: DistanceDetector
    mcdropout: McDropoutDetector
    cascade: Cascade


def build_runtime(bundle: Bundle) -> Runtime:
    mae = build_mae(bundle)
    head = build_head(bundle)
    rec, dist, mcd = build_detectors(bundle, mae, head)
    return Runtime(mae, head, rec, dist, mcd, Cascade(rec, dist, mcd))


def run_evaluate(config: RunConfig, bundle: Bundle, out_dir) -> tuple[EvaluationReport, list[str]]:
    """Table-style report over the four splits; writes report.csv,
    report.txt and per-detector histogram CSVs into out_dir."""
    rt = build_runtime(bundle)
    scenarios = make_scenarios(config)
    report = evaluate_scenarios(rt.mae, rt.head, rt.cascade, scenarios)
    os.makedirs(out_dir, exist_ok=True)
    csv_path = os.path.join(out_dir, "report.csv")
    report.to_csv(csv_path)
    txt_path = os.path.join(out_dir, "report.txt")
    with open(txt_path, "w", encoding="utf-8") as fh:
        fh.write(f"config checksum: {config_checksum(config)}\n")
        fh.write(f"bundle checksum: {bundle.content_checksum()}\n\n")
        fh.write(report.format_text())
        fh.write("\n")
    paths = [csv_path, txt_path] + dump_histograms(report, out_dir)
    return report, paths


def timing_windows(config: RunConfig, n_samples: int) -> list[SensorWindow]:
    """Synthetic source-domain windows for timing runs."""
    cells = config.data.n_classes * config.data.n_subjects
    per_combo = max(1, math.ceil(n_samples / cells))
    gen = dataclasses.replace(
        config.data, n_domains=1, windows_per_combo=per_combo, foreign_windows_per_combo=0
    )
    windows = synth_generate(gen, RngState(config.seed.data).child("timing"))
    return windows[:n_samples]


def run_timing(config: RunConfig, bundle: Bundle, n_samples: int = 10_000) -> list[TimingRow]:
    rt = build_runtime(bundle)
    windows = timing_windows(config, n_samples)
    return timing_report(rt.mae, rt.head, rt.cascade, windows)


def run_infer(bundle: Bundle, windows: list[SensorWindow], mode: str = "cascade") -> list[dict]:
    """Per-window verdict stream rows.

    mode is "cascade" or one detector name; unevaluated stage scores stay
    blank.
    """
    rt = build_runtime(bundle)
    latents = encode(rt.mae, windows)
    probs = predict_probs(rt.head, latents)
    rows: list[dict] = []

    def base_row(i):
        ci = int(np.argmax(probs[i]))
        return {
            "window_index": i,
            "predicted_class": rt.head.class_labels[ci],
            "max_prob": float(probs[i][ci]),
            "flag": "",
            "stage_reached": "",
            "rec_score": "",
            "dist_score": "",
            "mcd_score": "",
        }

    if mode == "cascade":
        verdicts = rt.cascade.verdicts(windows)
        for i, v in enumerate(verdicts):
            row = base_row(i)
            row["flag"] = v.final_flag
            row["stage_reached"] = v.stage_reached
            key = {"reconstruction": "rec_score", "distance": "dist_score",
                   "mcdropout": "mcd_score"}
            for dv in v.verdicts:
                row[key[dv.detector]] = f"{dv.score:.8g}"
            rows.append(row)
        return rows

    detectors = {
        "reconstruction": rt.reconstruction,
        "distance": rt.distance,
        "mcdropout": rt.mcdropout,
    }
    if mode not in detectors:
        raise ValueError(f"unknown inference mode {mode!r}")
    det = detectors[mode]
    key = {"reconstruction": "rec_score", "distance": "dist_score", "mcdropout": "mcd_score"}[mode]
    for i, v in enumerate(det.verdicts(windows)):
        row = base_row(i)
        row["flag"] = v.flag
        row["stage_reached"] = mode
        row[key] = f"{v.score:.8g}"
        rows.append(row)
    return rows


INFER_COLUMNS = [
    "window_index", "predicted_class", "max_prob", "flag", "stage_reached",
    "rec_score", "dist_score", "mcd_score",
]
