"""The deployable bundle: models, thresholds, centroids, config, checksum.

One self-describing npz container holds everything a calibrated pipeline
needs, so thresholds can never be paired with the wrong model. The content
checksum covers arrays and metadata (not zip bytes, which carry
timestamps) and is verified on load.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .classifier import ClassifierHead
from .config import RunConfig, from_text, to_text
from .detectors import (
    CentroidSet,
    DistanceDetector,
    McDropoutDetector,
    QuantileThreshold,
    ReconstructionDetector,
)
from .mae import MaeModel
from .nn.rng import RngState

FORMAT_VERSION = 1


class BundleError(ValueError):
    """Malformed, incomplete, or inconsistent bundle."""


class ChecksumError(BundleError):
    """Stored checksum does not match recomputed content."""


@dataclass
class Bundle:
    config: RunConfig
    mae_arrays: dict[str, np.ndarray] | None = None
    head_arrays: dict[str, np.ndarray] | None = None
    class_labels: list[int] | None = None
    thresholds: dict[str, QuantileThreshold] | None = None
    centroids: CentroidSet | None = None
    eval_seeds: dict[str, int] = field(default_factory=dict)

    @property
    def has_mae(self) -> bool:
        return self.mae_arrays is not None

    @property
    def has_head(self) -> bool:
        return self.head_arrays is not None

    @property
    def is_calibrated(self) -> bool:
        return self.thresholds is not None and self.centroids is not None

    # ---- checksum / persistence ------------------------------------------

    def _meta(self) -> dict:
        meta = {
            "format_version": FORMAT_VERSION,
            "config": to_text(self.config),
            "class_labels": self.class_labels,
            "eval_seeds": self.eval_seeds,
            "thresholds": None,
            "centroids": None,
        }
        if self.thresholds is not None:
            meta["thresholds"] = {
                name: {
                    "quantile": t.quantile,
                    "value": t.value,
                    "calibration_size": t.calibration_size,
                }
                for name, t in self.thresholds.items()
            }
        if self.centroids is not None:
            meta["centroids"] = {"k": self.centroids.k, "inertia": self.centroids.inertia}
        return meta

    def _arrays(self) -> dict[str, np.ndarray]:
        arrays: dict[str, np.ndarray] = {}
        if self.mae_arrays is not None:
            arrays.update({f"mae/{k}": v for k, v in self.mae_arrays.items()})
        if self.head_arrays is not None:
            arrays.update({f"head/{k}": v for k, v in self.head_arrays.items()})
        if self.centroids is not None:
            arrays["centroids"] = self.centroids.centroids
        return arrays

    def content_checksum(self) -> str:
        digest = hashlib.sha256()
        digest.update(json.dumps(self._meta(), sort_keys=True).encode("utf-8"))
        arrays = self._arrays()
        for key in sorted(arrays):
            arr = np.ascontiguousarray(arrays[key])
            digest.update(key.encode("utf-8"))
            digest.update(str(arr.shape).encode("utf-8"))
            digest.update(str(arr.dtype).encode("utf-8"))
            digest.update(arr.tobytes())
        return digest.hexdigest()

    def save(self, path):
        meta_bytes = json.dumps(self._meta(), sort_keys=True).encode("utf-8")
        payload = {key: arr for key, arr in self._arrays().items()}
        payload["__meta__"] = np.frombuffer(meta_bytes, dtype=np.uint8)
        payload["__checksum__"] = np.frombuffer(
            self.content_checksum().encode("ascii"), dtype=np.uint8
        )
        np.savez(path, **payload)

    @classmethod
    def load(cls, path) -> "Bundle":
        try:
            with np.load(path) as npz:
                entries = {k: npz[k] for k in npz.files}
        except (OSError, ValueError) as exc:
            raise BundleError(f"cannot read bundle {path}: {exc}")
        if "__meta__" not in entries or "__checksum__" not in entries:
            raise BundleError(f"{path}: not a bundle (missing metadata)")
        meta = json.loads(bytes(entries.pop("__meta__").tobytes()).decode("utf-8"))
        stored_checksum = entries.pop("__checksum__").tobytes().decode("ascii")
        if meta.get("format_version") != FORMAT_VERSION:
            raise BundleError(
                f"{path}: unsupported format version {meta.get('format_version')}"
            )
        mae_arrays = {
            k[len("mae/"):]: v for k, v in entries.items() if k.startswith("mae/")
        } or None
        head_arrays = {
            k[len("head/"):]: v for k, v in entries.items() if k.startswith("head/")
        } or None
        thresholds = None
        if meta["thresholds"] is not None:
            thresholds = {
                name: QuantileThreshold(
                    quantile=t["quantile"],
                    value=t["value"],
                    calibration_size=t["calibration_size"],
                )
                for name, t in meta["thresholds"].items()
            }
        centroids = None
        if meta["centroids"] is not None:
            centroids = CentroidSet(
                k=meta["centroids"]["k"],
                centroids=entries["centroids"],
                inertia=meta["centroids"]["inertia"],
            )
        bundle = cls(
            config=from_text(meta["config"]),
            mae_arrays=mae_arrays,
            head_arrays=head_arrays,
            class_labels=meta["class_labels"],
            thresholds=thresholds,
            centroids=centroids,
            eval_seeds={k: int(v) for k, v in meta["eval_seeds"].items()},
        )
        actual = bundle.content_checksum()
        if actual != stored_checksum:
            raise ChecksumError(f"{path}: checksum mismatch (content altered?)")
        return bundle


# ---------------------------------------------------------------------------
# Model <-> bundle conversion
# ---------------------------------------------------------------------------


def snapshot_params(params) -> dict[str, np.ndarray]:
    return {p.name: p.data.copy() for p in params}


def restore_params(params, arrays: dict[str, np.ndarray], what: str):
    seen = set()
    for p in params:
        if p.name not in arrays:
            raise BundleError(f"{what}: missing parameter {p.name!r}")
        arr = np.asarray(arrays[p.name], dtype=np.float32)
        if arr.shape != p.data.shape:
            raise BundleError(
                f"{what}: parameter {p.name!r} has shape {arr.shape}, "
                f"expected {p.data.shape}"
            )
        p.data = arr.copy()
        seen.add(p.name)
    extra = set(arrays) - seen
    if extra:
        raise BundleError(f"{what}: unexpected parameters {sorted(extra)}")


def build_mae(bundle: Bundle) -> MaeModel:
    if not bundle.has_mae:
        raise BundleError("bundle has no MAE checkpoint (run pretrain first)")
    cfg = bundle.config
    model = MaeModel(cfg.mae, cfg.data.window_len, cfg.data.channels, RngState(0))
    restore_params(model.parameters(), bundle.mae_arrays, "mae")
    return model


def build_head(bundle: Bundle) -> ClassifierHead:
    if not bundle.has_head:
        raise BundleError("bundle has no classifier head (run train-head first)")
    cfg = bundle.config
    head = ClassifierHead(
        embed_dim=cfg.mae.embed_dim,
        class_labels=list(bundle.class_labels),
        rng=RngState(0),
        hidden_dim=cfg.head.hidden_dim,
        dropout_rate=cfg.head.dropout_rate,
    )
    restore_params(head.parameters(), bundle.head_arrays, "head")
    return head


def build_detectors(bundle: Bundle, mae: MaeModel, head: ClassifierHead):
    """Rebuild the three calibrated detectors from a full bundle."""
    if not bundle.is_calibrated:
        raise BundleError("bundle has no thresholds/centroids (run calibrate first)")
    rec = ReconstructionDetector(mae, eval_seed=bundle.eval_seeds["reconstruction"])
    dist = DistanceDetector(mae, centroids=bundle.centroids)
    mcd = McDropoutDetector(
        mae, head, passes=bundle.config.detector.mc_passes,
        eval_seed=bundle.eval_seeds["mcdropout"],
    )
    for det in (rec, dist, mcd):
        if det.name not in bundle.thresholds:
            raise BundleError(f"bundle missing threshold for {det.name}")
        det.threshold = bundle.thresholds[det.name]
    return rec, dist, mcd
