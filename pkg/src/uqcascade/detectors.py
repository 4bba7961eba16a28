"""The three calibrated uncertainty detectors.

Each detector turns a window (or its latent) into a scalar score, is
calibrated to a quantile threshold on the validation split, and then
flags red exactly when score > threshold. Scoring uses fixed evaluation
seeds so verdicts are deterministic and batch-order independent.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .classifier import ClassifierHead, predict_stochastic
from .data import SensorWindow
from .mae import MaeModel, encode, reconstruction_score, scores_per_window
from .nn.rng import RngState
from .nn.tensor import Tensor, gelu, linear, no_grad, softmax

GREEN = "green"
RED = "red"


class NotCalibratedError(RuntimeError):
    """verdict() called before calibrate()."""


@dataclass(frozen=True)
class QuantileThreshold:
    quantile: float
    value: float
    calibration_size: int


@dataclass
class CentroidSet:
    k: int
    centroids: np.ndarray  # (k, embed_dim)
    inertia: float


@dataclass(frozen=True)
class DetectorVerdict:
    detector: str
    score: float
    flag: str


def quantile(values, q: float) -> float:
    """Linear-interpolation quantile: index h = q * (n - 1) on the sorted
    values, interpolated between its floor and ceil neighbours."""
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        raise ValueError("quantile of empty list")
    if not 0.0 < q <= 1.0:
        raise ValueError(f"quantile level must be in (0, 1], got {q}")
    s = np.sort(values)
    h = q * (s.size - 1)
    lo = int(np.floor(h))
    hi = min(lo + 1, s.size - 1)
    frac = h - lo
    return float(s[lo] + frac * (s[hi] - s[lo]))


def kmeans_fit(
    latents: np.ndarray,
    k: int,
    rng: RngState,
    max_iter: int = 100,
    tol: float = 1e-6,
    restarts: int = 1,
) -> CentroidSet:
    """Lloyd's algorithm with Euclidean assignments.

    Init samples k distinct points; empty clusters are re-seeded to the
    point farthest from its centroid. With restarts > 1 the lowest-inertia
    run wins.
    """
    latents = np.asarray(latents, dtype=np.float64)
    n = latents.shape[0]
    if n < k:
        raise ValueError(f"need at least k={k} latents, got {n}")
    best: CentroidSet | None = None
    for _ in range(max(1, restarts)):
        fitted = _lloyd_once(latents, k, rng, max_iter, tol)
        if best is None or fitted.inertia < best.inertia:
            best = fitted
    return best


def _lloyd_once(latents, k, rng, max_iter, tol) -> CentroidSet:
    centroids = latents[rng.choice(latents.shape[0], k, replace=False)].copy()
    assign = None
    for _ in range(max_iter):
        d2 = _sq_distances(latents, centroids)
        new_assign = d2.argmin(axis=1)
        if assign is not None and np.array_equal(new_assign, assign):
            break
        assign = new_assign
        moved = 0.0
        for j in range(k):
            members = latents[assign == j]
            if members.shape[0] == 0:
                far = int(d2[np.arange(len(assign)), assign].argmax())
                target = latents[far]
            else:
                target = members.mean(axis=0)
            moved = max(moved, float(np.linalg.norm(target - centroids[j])))
            centroids[j] = target
        if moved < tol:
            break
    d2 = _sq_distances(latents, centroids)
    inertia = float(d2.min(axis=1).sum())
    return CentroidSet(k=k, centroids=centroids.astype(np.float32), inertia=inertia)


def _sq_distances(x: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    diff = x[:, None, :] - centroids[None, :, :]
    return (diff ** 2).sum(axis=2)


def distance_score(centroids: CentroidSet, latent: np.ndarray) -> float:
    """Euclidean distance to the nearest centroid."""
    return float(distance_scores(centroids, np.asarray(latent)[None])[0])


def distance_scores(centroids: CentroidSet, latents: np.ndarray) -> np.ndarray:
    d2 = _sq_distances(
        np.asarray(latents, dtype=np.float64),
        centroids.centroids.astype(np.float64),
    )
    return np.sqrt(d2.min(axis=1))


def mc_variance_score(probs: np.ndarray) -> float:
    """Mean over classes of the per-class sample variance of the stochastic
    probability vectors (rows). Centering on the first pass keeps the score
    exactly zero when every pass is identical."""
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 2 or probs.shape[0] < 2:
        raise ValueError("need at least 2 stochastic passes")
    centered = probs - probs[0]
    return float(centered.var(axis=0, ddof=1).mean())


def mcd_score(
    head: ClassifierHead,
    mae: MaeModel,
    window: SensorWindow,
    passes: int = 100,
    rng: RngState | None = None,
) -> float:
    """Reference per-window MC-dropout score: ``passes`` stochastic
    predictions, each on its own child stream, reduced by
    mc_variance_score."""
    if passes < 2:
        raise ValueError("need at least 2 stochastic passes")
    if rng is None:
        rng = RngState(0)
    probs = np.stack(
        [
            predict_stochastic(head, mae, window, rng.child(t)).probabilities
            for t in range(passes)
        ]
    )
    return mc_variance_score(probs)


# ---------------------------------------------------------------------------
# Calibrated detectors
# ---------------------------------------------------------------------------


class Detector:
    """Shared calibrate/flag machinery; subclasses provide scores()."""

    name = "detector"

    def __init__(self):
        self.threshold: QuantileThreshold | None = None
        self.score_invocations = 0  # windows scored, for short-circuit audits

    def scores(self, windows: list[SensorWindow]) -> np.ndarray:
        raise NotImplementedError

    def calibrate(self, windows: list[SensorWindow], q: float = 0.99) -> QuantileThreshold:
        values = self._calibration_scores(windows)
        self.threshold = QuantileThreshold(
            quantile=q, value=quantile(values, q), calibration_size=len(values)
        )
        return self.threshold

    def _calibration_scores(self, windows) -> np.ndarray:
        return self.scores(windows)

    def flag_of(self, score: float) -> str:
        if self.threshold is None:
            raise NotCalibratedError(f"{self.name} detector is not calibrated")
        return RED if score > self.threshold.value else GREEN

    def verdicts(self, windows: list[SensorWindow]) -> list[DetectorVerdict]:
        if self.threshold is None:
            raise NotCalibratedError(f"{self.name} detector is not calibrated")
        return [
            DetectorVerdict(detector=self.name, score=float(s), flag=self.flag_of(s))
            for s in self.scores(windows)
        ]

    def verdict(self, window: SensorWindow) -> DetectorVerdict:
        return self.verdicts([window])[0]


class ReconstructionDetector(Detector):
    """Masked-reconstruction loss per group of consecutive windows; every
    member window inherits its group's score."""

    name = "reconstruction"

    def __init__(self, mae: MaeModel, eval_seed: int):
        super().__init__()
        self.mae = mae
        self.eval_seed = int(eval_seed)

    def group_scores(self, windows):
        return reconstruction_score(self.mae, windows, RngState(self.eval_seed))

    def scores(self, windows: list[SensorWindow]) -> np.ndarray:
        self.score_invocations += len(windows)
        groups = self.group_scores(windows)
        return scores_per_window(groups, len(windows))

    def _calibration_scores(self, windows) -> np.ndarray:
        # Calibrate on the group scores themselves; windows inherit flags.
        return np.array([g.score for g in self.group_scores(windows)])


class DistanceDetector(Detector):
    """Distance to the nearest K-means centroid in latent space."""

    name = "distance"

    def __init__(self, mae: MaeModel, centroids: CentroidSet | None = None):
        super().__init__()
        self.mae = mae
        self.centroids = centroids

    def fit(
        self,
        train_windows: list[SensorWindow],
        k: int,
        rng: RngState,
        max_iter: int = 100,
        restarts: int = 1,
    ) -> CentroidSet:
        latents = encode(self.mae, train_windows)
        self.centroids = kmeans_fit(latents, k, rng, max_iter=max_iter, restarts=restarts)
        return self.centroids

    def scores_from_latents(self, latents: np.ndarray) -> np.ndarray:
        if self.centroids is None:
            raise NotCalibratedError("distance detector has no fitted centroids")
        self.score_invocations += latents.shape[0]
        return distance_scores(self.centroids, latents)

    def scores(self, windows: list[SensorWindow]) -> np.ndarray:
        return self.scores_from_latents(encode(self.mae, windows))


class McDropoutDetector(Detector):
    """Variance across stochastic head passes on a cached encoding.

    Every window is scored with the same fixed sequence of dropout masks
    (children of the evaluation seed), so scores are deterministic and a
    batched call matches the per-window reference exactly.
    """

    name = "mcdropout"

    def __init__(self, mae: MaeModel, head: ClassifierHead, passes: int, eval_seed: int):
        super().__init__()
        if passes < 2:
            raise ValueError("need at least 2 stochastic passes")
        self.mae = mae
        self.head = head
        self.passes = int(passes)
        self.eval_seed = int(eval_seed)

    def _mask_factors(self, hidden_dim: int) -> np.ndarray:
        rate = self.head.dropout_rate
        base = RngState(self.eval_seed)
        factors = np.ones((self.passes, hidden_dim), dtype=np.float32)
        if rate > 0.0:
            for t in range(self.passes):
                u = base.child(t).uniform(size=(hidden_dim,))
                factors[t] = (u >= rate).astype(np.float32) / np.float32(1.0 - rate)
        return factors

    def scores_from_latents(self, latents: np.ndarray) -> np.ndarray:
        self.score_invocations += latents.shape[0]
        head = self.head
        with no_grad():
            h = gelu(linear(Tensor(latents), head.fc1.w, head.fc1.b)).data
            factors = self._mask_factors(h.shape[1])
            n, c = latents.shape[0], len(head.class_labels)
            probs = np.empty((self.passes, n, c), dtype=np.float32)
            for t in range(self.passes):
                hd = Tensor(h * factors[t])
                probs[t] = softmax(linear(hd, head.fc2.w, head.fc2.b)).data
        wide = probs.astype(np.float64)
        centered = wide - wide[0]
        return centered.var(axis=0, ddof=1).mean(axis=1)

    def scores(self, windows: list[SensorWindow]) -> np.ndarray:
        return self.scores_from_latents(encode(self.mae, windows))


def dump_scores_csv(path, scores: np.ndarray, split: str):
    """Write (score, split) pairs for histogram plotting."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["score", "split"])
        for s in scores:
            writer.writerow([f"{float(s):.8g}", split])
