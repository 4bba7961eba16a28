"""Shared fixtures: one small trained pipeline reused across unit tests."""

import dataclasses
from types import SimpleNamespace

import pytest

from uqcascade.cascade import Cascade
from uqcascade.config import RunConfig
from uqcascade.pipeline import (
    build_runtime,
    make_scenarios,
    run_calibrate,
    run_pretrain,
    run_train_head,
)


def small_config() -> RunConfig:
    cfg = RunConfig()
    return dataclasses.replace(
        cfg,
        data=dataclasses.replace(cfg.data, windows_per_combo=24, foreign_windows_per_combo=8),
        train=dataclasses.replace(
            cfg.train, mae_epochs=20, head_epochs=30, mae_batch_size=128
        ),
    )


@pytest.fixture(scope="session")
def mini():
    """Small trained + calibrated pipeline (about half a minute once)."""
    cfg = small_config()
    bundle, mae_curve = run_pretrain(cfg)
    bundle, head_curve = run_train_head(cfg, bundle)
    bundle, red_rates = run_calibrate(cfg, bundle)
    rt = build_runtime(bundle)
    return SimpleNamespace(
        cfg=cfg,
        bundle=bundle,
        scenarios=make_scenarios(cfg),
        mae=rt.mae,
        head=rt.head,
        rec=rt.reconstruction,
        dist=rt.distance,
        mcd=rt.mcdropout,
        cascade=rt.cascade,
        mae_curve=mae_curve,
        head_curve=head_curve,
        red_rates=red_rates,
    )


def fresh_cascade(mini) -> Cascade:
    """Detectors sharing mini's models/thresholds but with fresh counters."""
    rt = build_runtime(mini.bundle)
    return rt.cascade


# ---------------------------------------------------------------------------
# Acceptance summary: one pass/fail line per criterion at the end of the run.
# ---------------------------------------------------------------------------

_acceptance_results: list[tuple[str, str]] = []


def pytest_runtest_logreport(report):
    if report.when != "call":
        return
    if "test_acceptance.py" not in report.nodeid:
        return
    name = report.nodeid.split("::")[-1]
    _acceptance_results.append((name, report.outcome.upper()))


def pytest_terminal_summary(terminalreporter):
    if not _acceptance_results:
        return
    terminalreporter.write_sep("-", "acceptance criteria")
    for name, outcome in _acceptance_results:
        terminalreporter.write_line(f"{name}: {outcome}")
