"""Fully connected head over frozen MAE latents, with a stochastic mode.

Dropout lives in the head only, so one deterministic encoding per window
can be reused across all stochastic passes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import SensorWindow
from .mae import DivergenceError, MaeModel, encode
from .nn.layers import Linear
from .nn.optim import Adam
from .nn.rng import RngState
from .nn.tensor import Tensor, backward, cross_entropy, dropout, gelu, no_grad, softmax


@dataclass
class Prediction:
    probabilities: np.ndarray  # (C,) simplex vector
    predicted_class: int       # argmax, ties broken by lowest class index


class ClassifierHead:
    def __init__(
        self,
        embed_dim: int,
        class_labels: list[int],
        rng: RngState,
        hidden_dim: int = 64,
        dropout_rate: float = 0.3,
    ):
        if len(set(class_labels)) != len(class_labels):
            raise ValueError("class_labels must be unique")
        self.class_labels = list(class_labels)
        self.dropout_rate = float(dropout_rate)
        self.fc1 = Linear("head.fc1", embed_dim, hidden_dim, rng)
        self.fc2 = Linear("head.fc2", hidden_dim, len(class_labels), rng)
        self._label_to_index = {label: i for i, label in enumerate(self.class_labels)}

    def parameters(self):
        return self.fc1.parameters() + self.fc2.parameters()

    def probabilities(self, latents: Tensor, mode: str = "eval", rng: RngState | None = None):
        h = gelu(self.fc1(latents))
        h = dropout(h, self.dropout_rate, mode, rng)
        return softmax(self.fc2(h))


def _to_prediction(head: ClassifierHead, prob_row: np.ndarray) -> Prediction:
    return Prediction(
        probabilities=prob_row.copy(),
        predicted_class=head.class_labels[int(np.argmax(prob_row))],
    )


def predict(head: ClassifierHead, mae: MaeModel, window: SensorWindow) -> Prediction:
    """Deterministic prediction (dropout off)."""
    return _to_prediction(head, predict_probs(head, encode(mae, [window]))[0])


def predict_stochastic(
    head: ClassifierHead, mae: MaeModel, window: SensorWindow, rng: RngState
) -> Prediction:
    """One forward pass with dropout active in the head; the MAE encoding
    stays deterministic."""
    latents = encode(mae, [window])
    with no_grad():
        probs = head.probabilities(Tensor(latents), mode="train", rng=rng).data
    return _to_prediction(head, probs[0])


def predict_probs(head: ClassifierHead, latents: np.ndarray) -> np.ndarray:
    """Deterministic class probabilities for a batch of latents."""
    with no_grad():
        return head.probabilities(Tensor(latents), mode="eval").data


def predict_classes(head: ClassifierHead, latents: np.ndarray) -> np.ndarray:
    probs = predict_probs(head, latents)
    return np.array([head.class_labels[i] for i in probs.argmax(axis=1)])


def train_head(
    head: ClassifierHead,
    mae: MaeModel,
    train_windows: list[SensorWindow],
    val_windows: list[SensorWindow],
    epochs: int,
    rng: RngState,
    lr: float = 1e-3,
    batch_size: int = 256,
) -> list[dict]:
    """Train the head on frozen-MAE latents (encoded once and cached).

    Returns one row per epoch: train cross-entropy and validation accuracy.
    """
    for w in train_windows + val_windows:
        if w.label not in head._label_to_index:
            raise ValueError(f"label {w.label} not in head class_labels")
    train_latents = encode(mae, train_windows)
    val_latents = encode(mae, val_windows)
    train_y = np.array([head._label_to_index[w.label] for w in train_windows])
    val_y = np.array([w.label for w in val_windows])

    opt = Adam(head.parameters(), lr=lr)
    curve: list[dict] = []
    n = train_latents.shape[0]
    for epoch in range(epochs):
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            opt.zero_grad()
            try:
                probs = head.probabilities(Tensor(train_latents[idx]), mode="train", rng=rng)
                loss = cross_entropy(probs, train_y[idx])
                value = loss.item()
                if not np.isfinite(value):
                    raise ValueError("non-finite training loss")
                backward(loss)
                opt.step()
            except ValueError as exc:
                raise DivergenceError(
                    f"head training diverged at epoch {epoch}: {exc}", epoch=epoch
                )
            losses.append(value)
        val_acc = float((predict_classes(head, val_latents) == val_y).mean())
        curve.append(
            {
                "epoch": epoch,
                "train_loss": float(np.mean(losses)),
                "val_accuracy": val_acc,
            }
        )
    return curve
