"""Background-weighted NLL, RMSprop and the windowed training loop."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .nn import ModelParams, ShapeError, forward_batch, init_params, log_softmax, model_backward

log = logging.getLogger(__name__)

BACKGROUND = 0


class TrainingDiverged(FloatingPointError):
    def __init__(self, message, epoch=None, step=None):
        super().__init__(message)
        self.epoch = epoch
        self.step = step


@dataclass(frozen=True)
class LossConfig:
    rho: float = 0.3

    def __post_init__(self):
        if not self.rho > 0:
            raise ValueError(f"rho must be positive, got {self.rho}")


def class_weights(targets, rho: float) -> np.ndarray:
    return np.where(np.asarray(targets) == BACKGROUND, rho, 1.0)


def weighted_nll(log_probs, target: int, config: LossConfig = LossConfig()) -> float:
    """-alpha * log q(target), alpha = rho for background and 1 otherwise."""
    log_probs = np.asarray(log_probs, dtype=np.float64)
    if not 0 <= target < log_probs.shape[-1]:
        raise IndexError(f"target {target} outside [0, {log_probs.shape[-1] - 1}]")
    alpha = config.rho if target == BACKGROUND else 1.0
    return float(-alpha * log_probs[target])


def weighted_nll_grad(log_probs, target: int, config: LossConfig = LossConfig()) -> np.ndarray:
    """Gradient of :func:`weighted_nll` with respect to the log-probabilities."""
    grad = np.zeros(np.shape(log_probs))
    grad[target] = -(config.rho if target == BACKGROUND else 1.0)
    return grad


@dataclass
class TrainWindow:
    video_id: str
    features: np.ndarray  # (seq_len, D)
    targets: np.ndarray  # (seq_len,) int
    mask: np.ndarray  # (seq_len,) bool, False = padding

    def __post_init__(self):
        n = len(self.features)
        if len(self.targets) != n or len(self.mask) != n:
            raise ShapeError(
                f"window {self.video_id}: features {len(self.features)}, "
                f"targets {len(self.targets)}, mask {len(self.mask)} differ in length"
            )


@dataclass
class LabeledSequence:
    video_id: str
    features: np.ndarray  # (T, D)
    targets: np.ndarray  # (T,)


def _stack(windows):
    x = np.stack([w.features for w in windows]).astype(np.float64)
    y = np.stack([w.targets for w in windows]).astype(np.int64)
    m = np.stack([w.mask for w in windows]).astype(bool)
    return x, y, m


def masked_loss_and_grad(logits, targets, mask, config: LossConfig = LossConfig()):
    """Mean weighted NLL over unmasked clips and its gradient w.r.t. logits.

    Shapes: logits (B, T, K+1); targets and mask (B, T).
    """
    targets = np.asarray(targets)
    mask = np.asarray(mask, dtype=bool)
    count = int(mask.sum())
    if count == 0:
        raise ValueError("batch has no unmasked clips")
    if targets.min() < 0 or targets.max() >= logits.shape[-1]:
        raise IndexError(f"targets outside [0, {logits.shape[-1] - 1}]")
    logp = log_softmax(logits)
    picked = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    alpha = class_weights(targets, config.rho) * mask
    loss = float(-(alpha * picked).sum() / count)
    grad = np.exp(logp)
    np.put_along_axis(
        grad, targets[..., None], np.take_along_axis(grad, targets[..., None], -1) - 1.0, -1
    )
    grad *= (alpha / count)[..., None]
    return loss, grad


def batch_loss(windows, probs, config: LossConfig = LossConfig()) -> float:
    """Mean of per-clip :func:`weighted_nll` over all unmasked positions."""
    total = 0.0
    count = 0
    for w, p in zip(windows, probs, strict=True):
        p = np.asarray(p, dtype=np.float64)
        if p.shape[0] != len(w.targets):
            raise ShapeError(f"probs {p.shape} do not match window of {len(w.targets)} clips")
        logp = np.log(p)
        for t in np.flatnonzero(w.mask):
            total += weighted_nll(logp[t], int(w.targets[t]), config)
            count += 1
    if count == 0:
        raise ValueError("batch has no unmasked clips")
    return total / count


@dataclass
class OptimizerState:
    mean_square: ModelParams
    learning_rate: float = 1e-5
    decay: float = 0.9
    epsilon: float = 1e-8

    @classmethod
    def for_params(cls, params: ModelParams, learning_rate=1e-5, decay=0.9, epsilon=1e-8):
        return cls(params.zeros_like(), learning_rate, decay, epsilon)


def rmsprop_step(params: ModelParams, grads: ModelParams, state: OptimizerState):
    """One RMSprop update.  Returns new (params, state); inputs are untouched."""
    p_arrays, g_arrays, ms_arrays = params.arrays(), grads.arrays(), state.mean_square.arrays()
    if [a.shape for a in p_arrays] != [g.shape for g in g_arrays]:
        raise ShapeError("gradient structure does not match parameters")
    for n, g in enumerate(g_arrays):
        if not np.all(np.isfinite(g)):
            bad = int((~np.isfinite(g)).sum())
            raise TrainingDiverged(f"{bad} non-finite entries in gradient array {n}")

    new_ms = [state.decay * ms + (1.0 - state.decay) * g * g for ms, g in zip(ms_arrays, g_arrays)]
    new_p = [
        p - state.learning_rate * g / (np.sqrt(ms) + state.epsilon)
        for p, g, ms in zip(p_arrays, g_arrays, new_ms)
    ]
    it_p, it_ms = iter(new_p), iter(new_ms)
    params_out = params.map(lambda _: next(it_p))
    ms_out = state.mean_square.map(lambda _: next(it_ms))
    return params_out, OptimizerState(ms_out, state.learning_rate, state.decay, state.epsilon)


def make_windows(dataset, seq_len: int = 20, seed: int = 0) -> list[TrainWindow]:
    """Cut every sequence into non-overlapping, zero-padded windows, then shuffle."""
    if not dataset:
        raise ValueError("empty dataset")
    if seq_len < 1:
        raise ValueError(f"seq_len must be positive, got {seq_len}")
    windows = []
    for item in dataset:
        feats = np.asarray(item.features)
        targets = np.asarray(item.targets, dtype=np.int64)
        n = len(feats)
        if n < 1:
            raise ValueError(f"video {item.video_id} has no clips")
        if len(targets) != n:
            raise ShapeError(f"video {item.video_id}: {n} clips but {len(targets)} targets")
        for start in range(0, n, seq_len):
            chunk = slice(start, min(start + seq_len, n))
            real = chunk.stop - chunk.start
            f = np.zeros((seq_len, feats.shape[1]), dtype=feats.dtype)
            y = np.zeros(seq_len, dtype=np.int64)
            m = np.zeros(seq_len, dtype=bool)
            f[:real], y[:real], m[:real] = feats[chunk], targets[chunk], True
            windows.append(TrainWindow(item.video_id, f, y, m))
    order = np.random.default_rng(seed).permutation(len(windows))
    return [windows[i] for i in order]


@dataclass
class TrainConfig:
    num_layers: int = 1
    cells: int = 512
    num_classes: int = 200
    input_dim: int = 4096
    dropout: float = 0.5
    rho: float = 0.3
    lr: float = 1e-5
    decay: float = 0.9
    epsilon: float = 1e-8
    epochs: int = 100
    batch_size: int = 256
    seq_len: int = 20
    seed: int = 0


@dataclass
class TrainResult:
    params: ModelParams
    epoch_losses: list[float] = field(default_factory=list)


def train(dataset, config: TrainConfig, params: ModelParams | None = None, progress=None) -> TrainResult:
    """Train on ``dataset`` (a list of :class:`LabeledSequence`).

    Deterministic for a given config.seed.  ``progress`` is called as
    ``progress(epoch, mean_loss)`` after every epoch.
    """
    if not dataset:
        raise ValueError("empty dataset")
    for item in dataset:
        t = np.asarray(item.targets)
        if t.size and (t.min() < 0 or t.max() > config.num_classes):
            raise ValueError(f"video {item.video_id}: labels outside [0, {config.num_classes}]")
    if params is None:
        params = init_params(
            config.num_layers, config.cells, config.num_classes, config.input_dim,
            seed=config.seed, dropout_p=config.dropout,
        )
    loss_cfg = LossConfig(config.rho)
    state = OptimizerState.for_params(params, config.lr, config.decay, config.epsilon)
    x_all, y_all, m_all = _stack(make_windows(dataset, config.seq_len, config.seed))
    if x_all.shape[-1] != params.input_dim:
        raise ShapeError(f"features have dim {x_all.shape[-1]}, model expects {params.input_dim}")

    result = TrainResult(params)
    for epoch in range(1, config.epochs + 1):
        order = np.random.default_rng([config.seed, epoch]).permutation(len(x_all))
        loss_sum = 0.0
        clip_count = 0
        for step, start in enumerate(range(0, len(order), config.batch_size)):
            idx = order[start:start + config.batch_size]
            rng = np.random.default_rng([config.seed, epoch, step])
            _, trace = forward_batch(params, x_all[idx], train=True, rng=rng)
            loss, grad = masked_loss_and_grad(trace.logits, y_all[idx], m_all[idx], loss_cfg)
            if not np.isfinite(loss):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch}, step {step}", epoch, step
                )
            grads = model_backward(params, trace, grad)
            try:
                params, state = rmsprop_step(params, grads, state)
            except TrainingDiverged as exc:
                raise TrainingDiverged(f"epoch {epoch}, step {step}: {exc}", epoch, step) from exc
            n = int(m_all[idx].sum())
            loss_sum += loss * n
            clip_count += n
        mean_loss = loss_sum / clip_count
        result.epoch_losses.append(mean_loss)
        log.debug("epoch %d loss %.6f", epoch, mean_loss)
        if progress is not None:
            progress(epoch, mean_loss)
    result.params = params
    return result


def format_loss_log(losses) -> str:
    return "".join(f"{epoch}\t{loss:.8f}\n" for epoch, loss in enumerate(losses, start=1))


def parse_loss_log(text: str) -> list[float]:
    out = []
    for line in text.splitlines():
        if line.strip():
            _, loss = line.split("\t")
            out.append(float(loss))
    return out
