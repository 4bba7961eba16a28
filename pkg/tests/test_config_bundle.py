"""Flat config file format and the checksummed bundle container."""

import dataclasses

import numpy as np
import pytest

from uqcascade.bundle import (
    Bundle,
    BundleError,
    ChecksumError,
    build_detectors,
    build_head,
    build_mae,
)
from uqcascade.config import (
    ConfigError,
    RunConfig,
    config_checksum,
    default_config_text,
    from_text,
    load_config,
    save_config,
    to_text,
)


class TestConfigFormat:
    def test_round_trip(self):
        config = RunConfig()
        assert from_text(to_text(config)) == config

    def test_default_template_parses_to_defaults(self):
        assert from_text(default_config_text()) == RunConfig()

    def test_comments_and_blank_lines_ignored(self):
        text = "# a comment\n\n" + to_text(RunConfig()) + "\n# trailing\n"
        assert from_text(text) == RunConfig()

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError, match="unknown"):
            from_text(to_text(RunConfig()) + "data.bogus = 1\n")

    def test_unknown_section_rejected(self):
        with pytest.raises(ConfigError, match="unknown section"):
            from_text("nosuch.key = 1\n")

    def test_bad_value_rejected(self):
        with pytest.raises(ConfigError):
            from_text("data.n_classes = many\n")

    def test_missing_file_is_config_error(self, tmp_path):
        with pytest.raises(ConfigError, match="cannot read"):
            load_config(tmp_path / "nope.conf")

    def test_checksum_stable_and_sensitive(self):
        a = RunConfig()
        b = dataclasses.replace(a, seed=dataclasses.replace(a.seed, data=99))
        assert config_checksum(a) == config_checksum(RunConfig())
        assert config_checksum(a) != config_checksum(b)

    def test_file_round_trip(self, tmp_path):
        path = tmp_path / "run.conf"
        save_config(RunConfig(), path)
        assert load_config(path) == RunConfig()

    def test_sensor_groups_round_trip(self):
        cfg = RunConfig()
        mae = dataclasses.replace(cfg.mae, sensor_groups=(("imu", (0, 2, 4)), ("rest", (1, 3, 5))))
        cfg = dataclasses.replace(cfg, mae=mae)
        assert from_text(to_text(cfg)) == cfg

    def test_kmeans_k_auto_rule(self):
        cfg = RunConfig()  # 6 classes, 1 held out -> 5 in scope
        assert cfg.kmeans_k() == 20
        explicit = dataclasses.replace(
            cfg, detector=dataclasses.replace(cfg.detector, kmeans_k=7)
        )
        assert explicit.kmeans_k() == 7


class TestBundle:
    def test_save_load_round_trip(self, mini, tmp_path):
        path = tmp_path / "b.npz"
        mini.bundle.save(path)
        loaded = Bundle.load(path)
        assert loaded.content_checksum() == mini.bundle.content_checksum()
        assert loaded.config == mini.bundle.config
        assert loaded.thresholds == mini.bundle.thresholds
        assert loaded.class_labels == mini.bundle.class_labels
        assert np.array_equal(loaded.centroids.centroids, mini.bundle.centroids.centroids)

    def test_round_trip_preserves_verdicts(self, mini, tmp_path):
        from uqcascade.pipeline import build_runtime

        windows = mini.scenarios.validation[:100]
        before = mini.cascade.verdicts(windows)
        path = tmp_path / "b.npz"
        mini.bundle.save(path)
        rt = build_runtime(Bundle.load(path))
        after = rt.cascade.verdicts(windows)
        for a, b in zip(before, after):
            assert a.final_flag == b.final_flag
            assert a.stage_reached == b.stage_reached
            for va, vb in zip(a.verdicts, b.verdicts):
                assert va.flag == vb.flag
                assert abs(va.score - vb.score) < 1e-6

    def test_checksum_detects_tampering(self, mini, tmp_path):
        path = tmp_path / "b.npz"
        mini.bundle.save(path)
        with np.load(path) as npz:
            entries = {k: npz[k].copy() for k in npz.files}
        key = next(k for k in entries if k.startswith("mae/"))
        entries[key] = entries[key] + 1.0
        np.savez(path, **entries)
        with pytest.raises(ChecksumError):
            Bundle.load(path)

    def test_not_a_bundle_rejected(self, tmp_path):
        path = tmp_path / "x.npz"
        np.savez(path, a=np.zeros(3))
        with pytest.raises(BundleError, match="not a bundle"):
            Bundle.load(path)

    def test_partial_bundle_refusals(self, mini):
        empty = Bundle(config=mini.cfg)
        with pytest.raises(BundleError, match="no MAE"):
            build_mae(empty)
        mae_only = Bundle(config=mini.cfg, mae_arrays=mini.bundle.mae_arrays)
        with pytest.raises(BundleError, match="no classifier head"):
            build_head(mae_only)
        uncalibrated = Bundle(
            config=mini.cfg,
            mae_arrays=mini.bundle.mae_arrays,
            head_arrays=mini.bundle.head_arrays,
            class_labels=mini.bundle.class_labels,
            eval_seeds=mini.bundle.eval_seeds,
        )
        mae = build_mae(uncalibrated)
        head = build_head(uncalibrated)
        with pytest.raises(BundleError, match="no thresholds"):
            build_detectors(uncalibrated, mae, head)

    def test_shape_mismatch_rejected(self, mini):
        arrays = dict(mini.bundle.mae_arrays)
        key = next(iter(arrays))
        arrays[key] = np.zeros((1, 1), dtype=np.float32)
        broken = Bundle(config=mini.cfg, mae_arrays=arrays)
        with pytest.raises(BundleError, match="shape"):
            build_mae(broken)

    def test_checksum_independent_of_save_time(self, mini, tmp_path):
        # content checksum, not file bytes: two saves agree
        p1, p2 = tmp_path / "a.npz", tmp_path / "b.npz"
        mini.bundle.save(p1)
        mini.bundle.save(p2)
        assert Bundle.load(p1).content_checksum() == Bundle.load(p2).content_checksum()
