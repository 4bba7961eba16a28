"""Synthetic multi-channel sensor windows, evaluation splits, CSV ingestion.

The generator produces windows along three factor axes that map onto the
three distribution shifts the detectors are evaluated on: activity class
(waveform family), subject (frequency/amplitude perturbation) and domain
(channel gain/offset/permutation transform).
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass

import numpy as np

from .nn.rng import RngState

FRAME_GROUP = 8  # every window length must be a multiple of this


class CsvFormatError(ValueError):
    """Base class for CSV ingestion problems."""


class MissingColumnError(CsvFormatError):
    pass


class EmptyFileError(CsvFormatError):
    pass


class NonMonotoneTimestampError(CsvFormatError):
    pass


@dataclass
class SensorWindow:
    """Fixed-length multi-channel sample with label and provenance tags."""

    frames: np.ndarray  # (N, D) float32
    label: int
    subject: int
    domain: int
    sample_rate_hz: float = 50.0

    def __post_init__(self):
        self.frames = np.ascontiguousarray(np.asarray(self.frames, dtype=np.float32))
        if self.frames.ndim != 2:
            raise ValueError(f"frames must be (N, D), got shape {self.frames.shape}")
        n = self.frames.shape[0]
        if n % FRAME_GROUP != 0:
            raise ValueError(f"window length {n} not divisible by {FRAME_GROUP}")
        if not np.isfinite(self.frames).all():
            raise ValueError("non-finite channel values in window")
        if self.sample_rate_hz <= 0:
            raise ValueError("sample_rate_hz must be positive")


@dataclass(frozen=True)
class GeneratorConfig:
    """Knobs of the synthetic waveform generator.

    Class c gets fundamental ``base_freq_hz + c * freq_step_hz`` plus a
    class-specific harmonic mix and amplitude envelope. Subjects perturb
    frequency and amplitude; domains >= 1 apply a channel
    gain/offset/permutation transform. Window-level variability comes from
    additive Gaussian noise only, so ``noise_sigma = 0`` makes windows of
    one (class, subject, domain) cell identical.
    """

    n_classes: int = 6
    n_subjects: int = 8
    n_domains: int = 2
    windows_per_combo: int = 120          # per (class, subject) in the source domain
    foreign_windows_per_combo: int = 30   # per (class, subject) in each other domain
    window_len: int = 128
    channels: int = 6
    sample_rate_hz: float = 50.0
    noise_sigma: float = 0.1
    base_freq_hz: float = 1.0
    freq_step_hz: float = 0.45
    identity_domain_transform: bool = False

    def __post_init__(self):
        if self.n_classes < 1 or self.n_subjects < 1 or self.n_domains < 1:
            raise ValueError("generator needs at least one class, subject and domain")
        if self.window_len % FRAME_GROUP != 0:
            raise ValueError(f"window_len must be a multiple of {FRAME_GROUP}")
        if self.channels < 1:
            raise ValueError("channels must be positive")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be nonnegative")


def _class_waveform(cfg: GeneratorConfig, cls: int, t: np.ndarray) -> np.ndarray:
    """Clean (N, D) signal for one class: per-channel harmonic mix with a
    slow amplitude envelope. Fundamental dominates so classes stay
    separable by dominant FFT bin."""
    f = cfg.base_freq_hz + cls * cfg.freq_step_hz
    h2 = 0.25 + 0.10 * (cls % 3)
    h3 = 0.10 + 0.05 * (cls % 2)
    env_rate = 0.15 + 0.07 * cls
    out = np.empty((t.size, cfg.channels), dtype=np.float64)
    for j in range(cfg.channels):
        gain = 1.0 - 0.12 * (j % 3)
        phase = 2.0 * math.pi * j / cfg.channels + 0.7 * cls
        sig = (
            np.sin(2 * math.pi * f * t + phase)
            + h2 * np.sin(4 * math.pi * f * t + 0.5 * phase)
            + h3 * np.sin(6 * math.pi * f * t)
        )
        env = 1.0 + 0.25 * np.sin(2 * math.pi * env_rate * t + 0.3 * j)
        out[:, j] = gain * sig * env
    return out


def _domain_transform(cfg: GeneratorConfig, domain: int):
    """(time_scale, permutation, gain, offset) for a domain; domain 0 is
    the identity. The time scale mimics a different device/sampling setup
    and shifts every apparent frequency, so a foreign domain disturbs the
    class-discriminative content, not just channel statistics."""
    d = cfg.channels
    if domain == 0 or cfg.identity_domain_transform:
        return 1.0, np.arange(d), np.ones(d), np.zeros(d)
    time_scale = 1.0 + 0.6 * domain
    perm = np.roll(np.arange(d), domain)
    gain = 1.0 + 0.35 * np.cos(np.arange(d) * 1.3 + domain)
    offset = 0.3 * domain * np.sin(np.arange(d) * 0.9 + domain)
    return time_scale, perm, gain, offset


def synth_generate(cfg: GeneratorConfig, rng: RngState) -> list[SensorWindow]:
    """Generate windows for every (domain, class, subject) cell.

    Same seed, same config: bit-identical output.
    """
    t = np.arange(cfg.window_len) / cfg.sample_rate_hz
    freq_mult = rng.uniform(0.92, 1.08, size=cfg.n_subjects)
    amp_mult = rng.uniform(0.85, 1.15, size=cfg.n_subjects)

    windows: list[SensorWindow] = []
    for domain in range(cfg.n_domains):
        time_scale, perm, gain, offset = _domain_transform(cfg, domain)
        count = cfg.windows_per_combo if domain == 0 else cfg.foreign_windows_per_combo
        for cls in range(cfg.n_classes):
            for subj in range(cfg.n_subjects):
                f_scale = freq_mult[subj] * time_scale
                clean = _class_waveform(cfg, cls, t * f_scale) * amp_mult[subj]
                noise = rng.normal(0.0, 1.0, size=(count, cfg.window_len, cfg.channels))
                batch = clean[None, :, :] + cfg.noise_sigma * noise
                batch = batch[:, :, perm] * gain + offset
                for i in range(count):
                    windows.append(
                        SensorWindow(
                            frames=batch[i],
                            label=cls,
                            subject=subj,
                            domain=domain,
                            sample_rate_hz=cfg.sample_rate_hz,
                        )
                    )
    return windows


@dataclass(frozen=True)
class SplitSpec:
    """Which class/subject to hold out and how to split the remainder."""

    held_out_class: int | None = None
    held_out_subject: int | None = None
    train_fraction: float = 0.8
    source_domain: int = 0

    def __post_init__(self):
        if not 0.0 < self.train_fraction < 1.0:
            raise ValueError("train_fraction must be in (0, 1)")


@dataclass
class ScenarioSet:
    """The four evaluation splits plus training data."""

    train: list[SensorWindow]
    validation: list[SensorWindow]
    unseen_class: list[SensorWindow]
    unseen_subject: list[SensorWindow]
    unseen_dataset: list[SensorWindow]

    def splits(self) -> dict[str, list[SensorWindow]]:
        return {
            "validation": self.validation,
            "unseen_class": self.unseen_class,
            "unseen_subject": self.unseen_subject,
            "unseen_dataset": self.unseen_dataset,
        }


def build_scenarios(windows: list[SensorWindow], spec: SplitSpec, rng: RngState) -> ScenarioSet:
    """Partition windows into train/validation and the three shift test sets.

    Train and validation exclude the held-out class, the held-out subject
    and every foreign domain; the test sets are carved from exactly those
    exclusions. unseen_class keeps only non-held-out subjects so it
    isolates label shift.
    """
    hoc, hos, src = spec.held_out_class, spec.held_out_subject, spec.source_domain
    labels = {w.label for w in windows}
    subjects = {w.subject for w in windows}
    if hoc is not None and hoc not in labels:
        raise ValueError(f"held-out class {hoc} not present in data")
    if hos is not None and hos not in subjects:
        raise ValueError(f"held-out subject {hos} not present in data")

    eligible = [
        w for w in windows
        if w.domain == src and w.label != hoc and w.subject != hos
    ]
    unseen_class = [
        w for w in windows
        if w.domain == src and w.label == hoc and w.subject != hos
    ]
    unseen_subject = [
        w for w in windows
        if w.domain == src and w.subject == hos and w.label != hoc
    ]
    unseen_dataset = [w for w in windows if w.domain != src]

    order = rng.permutation(len(eligible))
    n_train = int(round(spec.train_fraction * len(eligible)))
    train = [eligible[i] for i in order[:n_train]]
    validation = [eligible[i] for i in order[n_train:]]

    out = ScenarioSet(train, validation, unseen_class, unseen_subject, unseen_dataset)
    for name, split in [("train", train)] + list(out.splits().items()):
        if not split:
            raise ValueError(f"split {name!r} is empty")
    return out


@dataclass(frozen=True)
class CsvSchema:
    """Column mapping for sensor CSV files.

    Metadata columns set to None fall back to defaults (label -1,
    subject/domain 0), which suits unlabeled inference input.
    """

    time_column: str = "t"
    channel_columns: tuple[str, ...] = ("ax", "ay", "az", "gx", "gy", "gz")
    label_column: str | None = "label"
    subject_column: str | None = "subject"
    domain_column: str | None = "domain"


DEFAULT_SCHEMA = CsvSchema()


def ingest_csv(
    path,
    schema: CsvSchema = DEFAULT_SCHEMA,
    window_len: int = 128,
    stride: int | None = None,
    sample_rate_hz: float = 50.0,
) -> list[SensorWindow]:
    """Slice a CSV of one sample per row into sliding windows.

    Rows with unparseable or non-finite cells are rejected (their file
    line numbers are reported in a warning) and any window overlapping a
    rejected row is excluded. Window metadata is taken from the window's
    first row.
    """
    if window_len % FRAME_GROUP != 0:
        raise ValueError(f"window_len must be a multiple of {FRAME_GROUP}")
    stride = window_len if stride is None else stride
    if stride < 1:
        raise ValueError("stride must be positive")

    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise EmptyFileError(f"{path}: file is empty")
        header = [h.strip() for h in header]
        col = {name: i for i, name in enumerate(header)}

        needed = [schema.time_column, *schema.channel_columns]
        for opt in (schema.label_column, schema.subject_column, schema.domain_column):
            if opt is not None:
                needed.append(opt)
        for name in needed:
            if name not in col:
                raise MissingColumnError(f"{path}: missing column {name!r}")

        values: list[np.ndarray] = []
        meta: list[tuple[int, int, int]] = []
        times: list[float] = []
        good: list[bool] = []
        bad_lines: list[int] = []
        for line_no, row in enumerate(reader, start=2):
            ok = True
            try:
                tval = float(row[col[schema.time_column]])
                chans = np.array(
                    [float(row[col[c]]) for c in schema.channel_columns], dtype=np.float64
                )
                if not (math.isfinite(tval) and np.isfinite(chans).all()):
                    ok = False
            except (ValueError, IndexError):
                ok = False
            if not ok:
                bad_lines.append(line_no)
                values.append(np.zeros(len(schema.channel_columns)))
                times.append(math.nan)
                good.append(False)
                meta.append((-1, 0, 0))
                continue

            def _int_of(column, default):
                if column is None:
                    return default
                return int(float(row[col[column]]))

            try:
                label = _int_of(schema.label_column, -1)
                subject = _int_of(schema.subject_column, 0)
                domain = _int_of(schema.domain_column, 0)
            except ValueError:
                bad_lines.append(line_no)
                values.append(chans)
                times.append(tval)
                good.append(False)
                meta.append((-1, 0, 0))
                continue
            values.append(chans)
            times.append(tval)
            good.append(True)
            meta.append((label, subject, domain))

    if not values:
        raise EmptyFileError(f"{path}: no data rows")
    if bad_lines:
        warnings.warn(f"{path}: rejected rows at lines {bad_lines}", stacklevel=2)

    prev = None
    for t_val, ok in zip(times, good):
        if not ok:
            continue
        if prev is not None and t_val <= prev:
            raise NonMonotoneTimestampError(f"{path}: timestamps not strictly increasing")
        prev = t_val

    data = np.asarray(values, dtype=np.float64)
    good_arr = np.asarray(good)
    n_rows = len(values)
    windows: list[SensorWindow] = []
    excluded = 0
    for start in range(0, n_rows - window_len + 1, stride):
        stop = start + window_len
        if not good_arr[start:stop].all():
            excluded += 1
            continue
        label, subject, domain = meta[start]
        windows.append(
            SensorWindow(
                frames=data[start:stop],
                label=label,
                subject=subject,
                domain=domain,
                sample_rate_hz=sample_rate_hz,
            )
        )
    if excluded:
        warnings.warn(f"{path}: excluded {excluded} window(s) overlapping bad rows", stacklevel=2)
    if not windows:
        warnings.warn(f"{path}: no complete window of length {window_len}", stacklevel=2)
    return windows


def write_csv(windows: list[SensorWindow], path, schema: CsvSchema = DEFAULT_SCHEMA):
    """Serialize windows back to the one-row-per-sample CSV format."""
    if not windows:
        raise ValueError("no windows to write")
    d = windows[0].frames.shape[1]
    if d != len(schema.channel_columns):
        raise ValueError(
            f"window has {d} channels but schema names {len(schema.channel_columns)}"
        )
    header = [schema.time_column, *schema.channel_columns]
    for opt in (schema.label_column, schema.subject_column, schema.domain_column):
        if opt is not None:
            header.append(opt)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        tick = 0
        for w in windows:
            dt = 1.0 / w.sample_rate_hz
            for i in range(w.frames.shape[0]):
                row = [f"{tick * dt:.6f}"] + [f"{v:.6f}" for v in w.frames[i]]
                if schema.label_column is not None:
                    row.append(w.label)
                if schema.subject_column is not None:
                    row.append(w.subject)
                if schema.domain_column is not None:
                    row.append(w.domain)
                writer.writerow(row)
                tick += 1


def stack_frames(windows: list[SensorWindow]) -> np.ndarray:
    """(B, N, D) float32 batch from a list of windows."""
    return np.stack([w.frames for w in windows]).astype(np.float32)
