"""Masked autoencoder over sensor windows.

A window is split into non-overlapping time frames; each frame is sliced
per sensor group and linearly projected, giving one token per
(group, frame) position. Most positions are masked; only the visible
tokens pass through the transformer encoder, and a lightweight decoder
fills the masked positions from learnable per-group mask tokens. The
training loss is the mean over masked positions of the squared L2
reconstruction error of the original frame values.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import SensorWindow, stack_frames
from .nn.layers import LayerNorm, Linear, TransformerBlock
from .nn.optim import Adam
from .nn.rng import RngState
from .nn.tensor import (
    Parameter,
    Tensor,
    add,
    backward,
    concat,
    expand_batch,
    gather_rows,
    matmul,
    mse_masked,
    no_grad,
    reshape,
    scale,
    scatter_rows,
    take_rows,
)

MIN_SCORE_FRAMES = 8      # minimum consecutive frames a scoring batch must supply
GROUP_FRAME_SLOTS = 128   # target frame count per scoring group (16 windows x 8 frames)


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss; carries the epoch index."""

    def __init__(self, message: str, epoch: int):
        super().__init__(message)
        self.epoch = epoch


@dataclass(frozen=True)
class MaeConfig:
    frame_len: int = 16
    embed_dim: int = 64
    encoder_depth: int = 2
    decoder_depth: int = 1
    heads: int = 4
    mask_ratio: float = 0.75
    sensor_groups: tuple[tuple[str, tuple[int, ...]], ...] = (
        ("accel", (0, 1, 2)),
        ("gyro", (3, 4, 5)),
    )

    def __post_init__(self):
        if self.decoder_depth >= self.encoder_depth:
            raise ValueError("decoder must be strictly smaller than the encoder")
        if not 0.0 < self.mask_ratio < 1.0:
            raise ValueError("mask_ratio must be in (0, 1)")
        if self.embed_dim % self.heads != 0:
            raise ValueError("embed_dim must be divisible by heads")
        seen: set[int] = set()
        for _, chans in self.sensor_groups:
            for c in chans:
                if c in seen:
                    raise ValueError(f"channel {c} appears in more than one sensor group")
                seen.add(c)


def split_frames(window: SensorWindow, frame_len: int) -> np.ndarray:
    """Slice a window into non-overlapping (frame_len, D) frames, losslessly."""
    n, d = window.frames.shape
    if n % frame_len != 0:
        raise ValueError(f"window length {n} not divisible by frame_len {frame_len}")
    return window.frames.reshape(n // frame_len, frame_len, d)


def mask_count(mask_ratio: float, n_positions: int) -> int:
    return int(np.floor(mask_ratio * n_positions + 0.5))


def sample_mask_indices(
    n_windows: int, n_positions: int, mask_ratio: float, rng: RngState
) -> tuple[np.ndarray, np.ndarray]:
    """Uniform without-replacement mask selection per window.

    Returns (visible_idx, masked_idx), each sorted ascending per row.
    """
    m = mask_count(mask_ratio, n_positions)
    if not 1 <= m <= n_positions - 1:
        raise ValueError(
            f"mask_ratio {mask_ratio} leaves no visible or no masked position "
            f"for {n_positions} positions"
        )
    order = np.argsort(rng.uniform(size=(n_windows, n_positions)), axis=1)
    masked = np.sort(order[:, :m], axis=1)
    visible = np.sort(order[:, m:], axis=1)
    return visible, masked


class MaeModel:
    """Projector, sensor-group mask tokens, transformer encoder/decoder."""

    def __init__(self, config: MaeConfig, window_len: int, channels: int, rng: RngState):
        if window_len % config.frame_len != 0:
            raise ValueError(
                f"window_len {window_len} not divisible by frame_len {config.frame_len}"
            )
        covered = sorted(c for _, chans in config.sensor_groups for c in chans)
        if covered != list(range(channels)):
            raise ValueError(
                f"sensor groups must partition channels 0..{channels - 1}, got {covered}"
            )
        self.config = config
        self.window_len = window_len
        self.channels = channels
        self.n_frames = window_len // config.frame_len
        self.n_groups = len(config.sensor_groups)
        self.n_positions = self.n_groups * self.n_frames
        mask_count_check = mask_count(config.mask_ratio, self.n_positions)
        if not 1 <= mask_count_check <= self.n_positions - 1:
            raise ValueError("mask_ratio leaves no visible or no masked position")

        e = config.embed_dim
        self.group_dims = [
            config.frame_len * len(chans) for _, chans in config.sensor_groups
        ]
        self.group_channels = [np.asarray(chans) for _, chans in config.sensor_groups]
        self.group_of_position = np.repeat(np.arange(self.n_groups), self.n_frames)

        self.projectors = [
            Linear(f"projector.{name}", dim, e, rng)
            for (name, _), dim in zip(config.sensor_groups, self.group_dims)
        ]
        self.mask_tokens = Parameter(
            "mask_tokens", rng.normal(0.0, 0.02, size=(self.n_groups, e))
        )
        self.pos_enc = Parameter("pos_enc", rng.normal(0.0, 0.02, size=(self.n_positions, e)))
        self.pos_dec = Parameter("pos_dec", rng.normal(0.0, 0.02, size=(self.n_positions, e)))
        self.encoder = [
            TransformerBlock(f"encoder.block{i}", e, config.heads, rng)
            for i in range(config.encoder_depth)
        ]
        self.encoder_norm = LayerNorm("encoder.norm", e)
        self.decoder = [
            TransformerBlock(f"decoder.block{i}", e, config.heads, rng)
            for i in range(config.decoder_depth)
        ]
        self.decoder_norm = LayerNorm("decoder.norm", e)
        self.output_heads = [
            Linear(f"output.{name}", e, dim, rng)
            for (name, _), dim in zip(config.sensor_groups, self.group_dims)
        ]

    def parameters(self) -> list[Parameter]:
        params: list[Parameter] = []
        for p in self.projectors:
            params.extend(p.parameters())
        params.extend([self.mask_tokens, self.pos_enc, self.pos_dec])
        for blk in self.encoder:
            params.extend(blk.parameters())
        params.extend(self.encoder_norm.parameters())
        for blk in self.decoder:
            params.extend(blk.parameters())
        params.extend(self.decoder_norm.parameters())
        for h in self.output_heads:
            params.extend(h.parameters())
        return params

    # ---- forward pieces -------------------------------------------------

    def group_targets(self, batch: np.ndarray) -> list[np.ndarray]:
        """Original frame values per group: list of (B, F, dim_g) arrays."""
        b, n, _ = batch.shape
        frames = batch.reshape(b, self.n_frames, self.config.frame_len, self.channels)
        return [
            np.ascontiguousarray(frames[:, :, :, chans]).reshape(b, self.n_frames, dim)
            for chans, dim in zip(self.group_channels, self.group_dims)
        ]

    def _embed(self, batch: np.ndarray) -> Tensor:
        """Project every (group, frame) slice; returns (B, P, E) after
        adding the learned positional embedding."""
        tokens = [
            proj(Tensor(target))
            for proj, target in zip(self.projectors, self.group_targets(batch))
        ]
        seq = concat(tokens, axis=1)
        return add(seq, self.pos_enc)

    def _run_encoder(self, x: Tensor) -> Tensor:
        for blk in self.encoder:
            x = blk(x)
        return self.encoder_norm(x)

    def _run_decoder(self, x: Tensor) -> Tensor:
        for blk in self.decoder:
            x = blk(x)
        return self.decoder_norm(x)

    def _reconstruct(self, batch: np.ndarray, visible_idx: np.ndarray) -> list[Tensor]:
        """Predicted frame values per group, (B, F, dim_g) each.

        Only visible tokens enter the encoder; its output is merged with
        the per-group mask tokens at masked positions before decoding.
        """
        b = batch.shape[0]
        emb = self._embed(batch)
        enc_out = self._run_encoder(gather_rows(emb, visible_idx))
        base = expand_batch(take_rows(self.mask_tokens, self.group_of_position), b)
        merged = scatter_rows(base, visible_idx, enc_out)
        dec_out = self._run_decoder(add(merged, self.pos_dec))
        preds = []
        for g, head in enumerate(self.output_heads):
            lo = g * self.n_frames
            pos = reshape(
                gather_rows(dec_out, np.tile(np.arange(lo, lo + self.n_frames), (b, 1))),
                (b, self.n_frames, self.config.embed_dim),
            )
            preds.append(head(pos))
        return preds


def mae_forward_loss(
    model: MaeModel,
    batch: np.ndarray,
    rng: RngState,
    mask: tuple[np.ndarray, np.ndarray] | None = None,
) -> Tensor:
    """Masked-reconstruction loss over one batch of raw windows (B, N, D)."""
    if batch.ndim == 2:
        batch = batch[None]
    b = batch.shape[0]
    if mask is None:
        visible_idx, masked_idx = sample_mask_indices(
            b, model.n_positions, model.config.mask_ratio, rng
        )
    else:
        visible_idx, masked_idx = mask
    preds = model._reconstruct(batch, visible_idx)
    targets = model.group_targets(batch)

    mask_flags = np.zeros((b, model.n_positions), dtype=bool)
    mask_flags[np.arange(b)[:, None], masked_idx] = True
    total_masked = int(mask_flags.sum())

    loss = None
    for g, (pred, target, dim) in enumerate(zip(preds, targets, model.group_dims)):
        lo = g * model.n_frames
        flags = mask_flags[:, lo:lo + model.n_frames].reshape(-1)
        m_g = int(flags.sum())
        if m_g == 0:
            continue
        part = mse_masked(
            reshape(pred, (b * model.n_frames, dim)),
            Tensor(target.reshape(b * model.n_frames, dim)),
            flags,
        )
        part = scale(part, m_g / total_masked)
        loss = part if loss is None else add(loss, part)
    return loss


def pretrain(
    model: MaeModel,
    train_windows: list[SensorWindow],
    val_windows: list[SensorWindow],
    epochs: int,
    rng: RngState,
    lr: float = 1e-3,
    batch_size: int = 256,
) -> list[dict]:
    """Minibatch training loop; returns one row per epoch with train and
    validation loss (validation keeps masking on, fixed seed)."""
    if not train_windows or not val_windows:
        raise ValueError("pretrain needs nonempty train and validation splits")
    train_data = stack_frames(train_windows)
    val_data = stack_frames(val_windows)
    opt = Adam(model.parameters(), lr=lr)
    val_seed = rng.child("val-loss").seed
    curve: list[dict] = []
    n = train_data.shape[0]
    for epoch in range(epochs):
        order = rng.permutation(n)
        batch_losses = []
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            opt.zero_grad()
            try:
                loss = mae_forward_loss(model, train_data[idx], rng)
                value = loss.item()
                if not np.isfinite(value):
                    raise ValueError("non-finite training loss")
                backward(loss)
                opt.step()
            except ValueError as exc:
                # non-finite activations, loss or gradients: the run diverged
                raise DivergenceError(
                    f"training diverged at epoch {epoch}: {exc}", epoch=epoch
                )
            batch_losses.append(value)
        val_loss = evaluate_masked_loss(model, val_data, RngState(val_seed), batch_size)
        curve.append(
            {
                "epoch": epoch,
                "train_loss": float(np.mean(batch_losses)),
                "val_loss": val_loss,
            }
        )
    return curve


def evaluate_masked_loss(
    model: MaeModel, data: np.ndarray, rng: RngState, batch_size: int = 256
) -> float:
    """Masked loss without gradients, averaged over batches."""
    losses = []
    with no_grad():
        for start in range(0, data.shape[0], batch_size):
            loss = mae_forward_loss(model, data[start:start + batch_size], rng)
            losses.append(loss.item())
    return float(np.mean(losses))


def encode(model: MaeModel, windows, batch_size: int = 256) -> np.ndarray:
    """Window embeddings: full sequence, no masking, mean-pooled over
    positions. Deterministic; returns (B, embed_dim) float32."""
    if isinstance(windows, SensorWindow):
        return encode(model, [windows], batch_size)[0]
    data = windows if isinstance(windows, np.ndarray) else stack_frames(windows)
    if data.ndim == 2:
        data = data[None]
    out = np.empty((data.shape[0], model.config.embed_dim), dtype=np.float32)
    with no_grad():
        for start in range(0, data.shape[0], batch_size):
            chunk = data[start:start + batch_size]
            emb = model._embed(chunk)
            enc = model._run_encoder(emb)
            out[start:start + chunk.shape[0]] = enc.data.mean(axis=1)
    return out


@dataclass
class GroupScore:
    """Reconstruction loss of one scoring group of consecutive windows."""

    score: float
    window_indices: list[int]
    padded: bool


def reconstruction_score(
    model: MaeModel, windows: list[SensorWindow], rng: RngState
) -> list[GroupScore]:
    """Score consecutive groups of windows totaling 128 frame slots each.

    Every group reuses the same fixed mask pattern derived from the seed
    of ``rng``, so scores depend only on group content. A trailing
    partial group is padded by repeating its last window and flagged.
    """
    if not windows:
        raise ValueError("no windows to score")
    frames_per_window = model.n_frames
    total_frames = frames_per_window * len(windows)
    if total_frames < MIN_SCORE_FRAMES:
        raise ValueError(
            f"scoring needs at least {MIN_SCORE_FRAMES} consecutive frames, "
            f"got {total_frames}"
        )
    group_windows = max(1, GROUP_FRAME_SLOTS // frames_per_window)
    pattern = sample_mask_indices(
        group_windows, model.n_positions, model.config.mask_ratio, RngState(rng.seed)
    )

    data = stack_frames(windows)
    groups: list[GroupScore] = []
    batches: list[np.ndarray] = []
    metas: list[tuple[list[int], bool]] = []
    for start in range(0, len(windows), group_windows):
        member = list(range(start, min(start + group_windows, len(windows))))
        padded = len(member) < group_windows
        idx = member + [member[-1]] * (group_windows - len(member))
        batches.append(data[idx])
        metas.append((member, padded))

    # Batch several groups per forward pass; the per-group losses are
    # separated afterwards, so stacking never changes a group's score.
    chunk_groups = max(1, 4096 // (group_windows * frames_per_window))
    vis_one, mask_one = pattern
    with no_grad():
        for lo in range(0, len(batches), chunk_groups):
            part = batches[lo:lo + chunk_groups]
            big = np.concatenate(part, axis=0)
            reps = len(part)
            vis = np.tile(vis_one, (reps, 1))
            msk = np.tile(mask_one, (reps, 1))
            sq_err = _per_position_sq_error(model, big, vis, msk)
            per_group = sq_err.reshape(reps, -1)
            m = mask_one.size
            for j in range(reps):
                member, padded = metas[lo + j]
                groups.append(
                    GroupScore(
                        score=float(per_group[j].sum() / m),
                        window_indices=member,
                        padded=padded,
                    )
                )
    return groups


def _per_position_sq_error(
    model: MaeModel, batch: np.ndarray, visible_idx: np.ndarray, masked_idx: np.ndarray
) -> np.ndarray:
    """Squared reconstruction error summed per masked position, zeros
    elsewhere; returns (B, P) float64."""
    preds = model._reconstruct(batch, visible_idx)
    targets = model.group_targets(batch)
    b = batch.shape[0]
    mask_flags = np.zeros((b, model.n_positions), dtype=bool)
    mask_flags[np.arange(b)[:, None], masked_idx] = True
    out = np.zeros((b, model.n_positions), dtype=np.float64)
    for g, (pred, target) in enumerate(zip(preds, targets)):
        lo = g * model.n_frames
        diff = pred.data.astype(np.float64) - target
        sq = (diff ** 2).sum(axis=2)
        flags = mask_flags[:, lo:lo + model.n_frames]
        out[:, lo:lo + model.n_frames] = np.where(flags, sq, 0.0)
    return out


def scores_per_window(groups: list[GroupScore], n_windows: int) -> np.ndarray:
    """Expand group scores onto their member windows."""
    out = np.empty(n_windows, dtype=np.float64)
    for g in groups:
        for i in g.window_indices:
            out[i] = g.score
    return out
