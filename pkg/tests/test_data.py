"""Generator, scenario splits, and CSV ingestion."""

import numpy as np
import pytest
from scipy.stats import ks_2samp

from uqcascade.data import (
    CsvSchema,
    EmptyFileError,
    GeneratorConfig,
    MissingColumnError,
    NonMonotoneTimestampError,
    SensorWindow,
    SplitSpec,
    build_scenarios,
    ingest_csv,
    synth_generate,
    write_csv,
)
from uqcascade.nn import RngState


class TestSensorWindow:
    def test_window_length_must_be_multiple_of_eight(self):
        with pytest.raises(ValueError, match="divisible"):
            SensorWindow(frames=np.zeros((100, 6)), label=0, subject=0, domain=0)

    def test_non_finite_rejected(self):
        frames = np.zeros((16, 6))
        frames[3, 2] = np.nan
        with pytest.raises(ValueError, match="finite"):
            SensorWindow(frames=frames, label=0, subject=0, domain=0)


class TestSynthGenerate:
    def test_zero_noise_single_cell_identical(self):
        cfg = GeneratorConfig(
            n_classes=1, n_subjects=1, n_domains=1, windows_per_combo=5, noise_sigma=0.0
        )
        windows = synth_generate(cfg, RngState(1))
        assert len(windows) == 5
        assert all(np.array_equal(windows[0].frames, w.frames) for w in windows)

    def test_degenerate_config_rejected(self):
        with pytest.raises(ValueError):
            GeneratorConfig(n_classes=0)

    def test_fft_separates_classes(self):
        # 1 Hz vs 4 Hz: dominant FFT bin identifies the class
        cfg = GeneratorConfig(
            n_classes=2, n_subjects=2, n_domains=1, windows_per_combo=100,
            base_freq_hz=1.0, freq_step_hz=3.0,
        )
        windows = synth_generate(cfg, RngState(2))
        hits = 0
        for w in windows:
            spectrum = np.abs(np.fft.rfft(w.frames[:, 0]))
            spectrum[0] = 0.0
            freqs = np.fft.rfftfreq(w.frames.shape[0], d=1.0 / w.sample_rate_hz)
            dominant = freqs[np.argmax(spectrum)]
            predicted = 0 if abs(dominant - 1.0) < abs(dominant - 4.0) else 1
            hits += predicted == w.label
        assert hits / len(windows) > 0.99

    def test_identity_domain_matches_source_distribution(self):
        cfg = GeneratorConfig(
            identity_domain_transform=True,
            windows_per_combo=40,
            foreign_windows_per_combo=40,
        )
        windows = synth_generate(cfg, RngState(5))
        src = np.array([w.frames.mean() for w in windows if w.domain == 0])
        foreign = np.array([w.frames.mean() for w in windows if w.domain == 1])
        assert ks_2samp(src, foreign).pvalue > 0.01

    def test_same_seed_bit_identical(self):
        cfg = GeneratorConfig(windows_per_combo=6, foreign_windows_per_combo=2)
        a = synth_generate(cfg, RngState(3))
        b = synth_generate(cfg, RngState(3))
        assert len(a) == len(b)
        assert all(np.array_equal(x.frames, y.frames) for x, y in zip(a, b))

    def test_every_window_length_multiple_of_eight(self):
        cfg = GeneratorConfig(windows_per_combo=2, foreign_windows_per_combo=1)
        for w in synth_generate(cfg, RngState(4)):
            assert w.frames.shape[0] % 8 == 0


@pytest.fixture(scope="module")
def scenario_pool():
    cfg = GeneratorConfig(windows_per_combo=25, foreign_windows_per_combo=5)
    return synth_generate(cfg, RngState(7))


class TestBuildScenarios:
    def test_eighty_twenty_split(self, scenario_pool):
        spec = SplitSpec(held_out_class=5, held_out_subject=7)
        sc = build_scenarios(scenario_pool, spec, RngState(8))
        eligible = len(sc.train) + len(sc.validation)
        assert abs(len(sc.train) - round(0.8 * eligible)) <= 1
        assert abs(len(sc.validation) - round(0.2 * eligible)) <= 1

    def test_held_out_class_absent_from_train_and_validation(self, scenario_pool):
        spec = SplitSpec(held_out_class=5, held_out_subject=7)
        sc = build_scenarios(scenario_pool, spec, RngState(8))
        assert all(w.label != 5 for w in sc.train + sc.validation)
        assert all(w.subject != 7 for w in sc.train + sc.validation)
        assert all(w.domain == 0 for w in sc.train + sc.validation)

    def test_unseen_class_invariants(self, scenario_pool):
        sc = build_scenarios(
            scenario_pool, SplitSpec(held_out_class=5, held_out_subject=7), RngState(8)
        )
        assert all(w.label == 5 for w in sc.unseen_class)
        train_labels = {w.label for w in sc.train}
        assert {w.label for w in sc.unseen_subject} <= train_labels
        assert all(w.subject == 7 for w in sc.unseen_subject)
        assert all(w.domain != 0 for w in sc.unseen_dataset)

    def test_no_identity_leakage(self, scenario_pool):
        sc = build_scenarios(
            scenario_pool, SplitSpec(held_out_class=5, held_out_subject=7), RngState(8)
        )
        train_ids = {id(w) for w in sc.train}
        for split in (sc.validation, sc.unseen_class, sc.unseen_subject, sc.unseen_dataset):
            assert train_ids.isdisjoint({id(w) for w in split})

    def test_same_seed_same_split(self, scenario_pool):
        spec = SplitSpec(held_out_class=5, held_out_subject=7)
        a = build_scenarios(scenario_pool, spec, RngState(9))
        b = build_scenarios(scenario_pool, spec, RngState(9))
        assert [id(w) for w in a.train] == [id(w) for w in b.train]
        assert [id(w) for w in a.validation] == [id(w) for w in b.validation]

    def test_missing_held_out_class_rejected(self, scenario_pool):
        with pytest.raises(ValueError, match="held-out class"):
            build_scenarios(
                scenario_pool, SplitSpec(held_out_class=99, held_out_subject=7), RngState(8)
            )

    def test_empty_split_rejected(self):
        cfg = GeneratorConfig(
            n_classes=2, n_subjects=2, n_domains=1, windows_per_combo=4
        )
        windows = synth_generate(cfg, RngState(10))
        # single domain means unseen_dataset would be empty
        with pytest.raises(ValueError, match="empty"):
            build_scenarios(
                windows, SplitSpec(held_out_class=1, held_out_subject=1), RngState(11)
            )


def _write_rows(path, n_rows, header="t,ax,ay,az,gx,gy,gz,label,subject,domain"):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(header + "\n")
        for i in range(n_rows):
            fh.write(f"{i * 0.02:.3f},0.1,0.2,0.3,0.4,0.5,0.6,1,2,0\n")


class TestIngestCsv:
    def test_non_overlapping_windows(self, tmp_path):
        path = tmp_path / "a.csv"
        _write_rows(path, 256)
        windows = ingest_csv(path, window_len=128, stride=128)
        assert len(windows) == 2
        assert windows[0].label == 1 and windows[0].subject == 2

    def test_short_file_yields_zero_windows_with_warning(self, tmp_path):
        path = tmp_path / "b.csv"
        _write_rows(path, 127)
        with pytest.warns(UserWarning, match="no complete window"):
            windows = ingest_csv(path, window_len=128)
        assert windows == []

    def test_nan_cell_excludes_window(self, tmp_path):
        path = tmp_path / "c.csv"
        _write_rows(path, 256)
        lines = path.read_text().splitlines()
        lines[10] = lines[10].replace("0.2", "NaN", 1)
        path.write_text("\n".join(lines) + "\n")
        with pytest.warns(UserWarning):
            windows = ingest_csv(path, window_len=128, stride=128)
        assert len(windows) == 1  # the window holding the bad row is gone

    def test_bad_row_index_reported(self, tmp_path):
        path = tmp_path / "d.csv"
        _write_rows(path, 130)
        lines = path.read_text().splitlines()
        lines[5] = lines[5].replace("0.3", "oops", 1)
        path.write_text("\n".join(lines) + "\n")
        with pytest.warns(UserWarning, match=r"lines \[6\]"):
            ingest_csv(path, window_len=128)

    def test_missing_column(self, tmp_path):
        path = tmp_path / "e.csv"
        _write_rows(path, 16, header="t,ax,ay,az,gx,gy,label,subject,domain")
        with pytest.raises(MissingColumnError, match="gz"):
            ingest_csv(path, window_len=8)

    def test_empty_file(self, tmp_path):
        path = tmp_path / "f.csv"
        path.write_text("")
        with pytest.raises(EmptyFileError):
            ingest_csv(path)

    def test_header_only_file(self, tmp_path):
        path = tmp_path / "g.csv"
        path.write_text("t,ax,ay,az,gx,gy,gz,label,subject,domain\n")
        with pytest.raises(EmptyFileError):
            ingest_csv(path)

    def test_non_monotone_timestamps(self, tmp_path):
        path = tmp_path / "h.csv"
        _write_rows(path, 16)
        lines = path.read_text().splitlines()
        lines[4], lines[5] = lines[5], lines[4]
        path.write_text("\n".join(lines) + "\n")
        with pytest.raises(NonMonotoneTimestampError):
            ingest_csv(path, window_len=8)

    def test_round_trip_through_write_csv(self, tmp_path):
        cfg = GeneratorConfig(
            n_classes=2, n_subjects=2, n_domains=1, windows_per_combo=3
        )
        windows = synth_generate(cfg, RngState(12))
        path = tmp_path / "rt.csv"
        write_csv(windows, path)
        back = ingest_csv(path, window_len=cfg.window_len)
        assert len(back) == len(windows)
        for a, b in zip(windows, back):
            assert (a.label, a.subject, a.domain) == (b.label, b.subject, b.domain)
            assert np.abs(a.frames - b.frames).max() < 1e-5  # %.6f text round trip

    def test_unlabeled_schema_defaults(self, tmp_path):
        path = tmp_path / "u.csv"
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("t,ax,ay,az,gx,gy,gz\n")
            for i in range(8):
                fh.write(f"{i},0,0,0,0,0,0\n")
        schema = CsvSchema(label_column=None, subject_column=None, domain_column=None)
        windows = ingest_csv(path, schema=schema, window_len=8)
        assert windows[0].label == -1 and windows[0].subject == 0
