"""LSTM sequence classifier with hand-written backpropagation through time.

Architecture per clip sequence::

    input(D) - dropout(p) - N x lstm(c) - dropout(p) - softmax(K+1)

Gate weights are stored stacked along a leading axis of length 4 in the
order input, forget, output, candidate (``i, f, o, g``).  All arithmetic is
float64; checkpoints hold float32.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

GATES = ("i", "f", "o", "g")
CHECKPOINT_MAGIC = b"SAC1"


class ShapeError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


def sigmoid(x):
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


@dataclass
class LstmLayerParams:
    input_weights: np.ndarray  # (4, c, in)
    recurrent_weights: np.ndarray  # (4, c, c)
    biases: np.ndarray  # (4, c)

    def __post_init__(self):
        wx, wh, b = self.input_weights, self.recurrent_weights, self.biases
        if wx.ndim != 3 or wx.shape[0] != 4:
            raise ShapeError(f"input_weights must be (4, cells, input_dim), got {wx.shape}")
        c = wx.shape[1]
        if wh.shape != (4, c, c):
            raise ShapeError(f"recurrent_weights shape {wh.shape} != {(4, c, c)}")
        if b.shape != (4, c):
            raise ShapeError(f"biases shape {b.shape} != {(4, c)}")

    @property
    def cells(self) -> int:
        return self.input_weights.shape[1]

    @property
    def input_dim(self) -> int:
        return self.input_weights.shape[2]

    def arrays(self) -> list[np.ndarray]:
        return [self.input_weights, self.recurrent_weights, self.biases]


@dataclass
class DenseSoftmaxParams:
    weights: np.ndarray  # (K+1, c)
    bias: np.ndarray  # (K+1,)

    def __post_init__(self):
        if self.weights.ndim != 2 or self.bias.shape != (self.weights.shape[0],):
            raise ShapeError(
                f"dense weights {self.weights.shape} and bias {self.bias.shape} disagree"
            )

    def arrays(self) -> list[np.ndarray]:
        return [self.weights, self.bias]


@dataclass
class ModelParams:
    lstm_layers: list[LstmLayerParams]
    output: DenseSoftmaxParams
    input_dim: int = 4096
    dropout_p: float = 0.5

    def __post_init__(self):
        if len(self.lstm_layers) < 1:
            raise ShapeError("model needs at least one LSTM layer")
        expected = self.input_dim
        for n, layer in enumerate(self.lstm_layers):
            if layer.input_dim != expected:
                raise ShapeError(
                    f"layer {n} input dim {layer.input_dim} != expected {expected}"
                )
            expected = layer.cells
        if self.output.weights.shape[1] != expected:
            raise ShapeError(
                f"dense weights {self.output.weights.shape} do not take {expected} cells"
            )
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError(f"dropout_p must be in [0, 1), got {self.dropout_p}")

    @property
    def num_layers(self) -> int:
        return len(self.lstm_layers)

    @property
    def cells(self) -> int:
        return self.lstm_layers[-1].cells

    @property
    def num_classes(self) -> int:
        """K, the number of activity classes (background excluded)."""
        return self.output.weights.shape[0] - 1

    def arrays(self) -> list[np.ndarray]:
        """Every parameter array in checkpoint order."""
        out = []
        for layer in self.lstm_layers:
            out.extend(layer.arrays())
        out.extend(self.output.arrays())
        return out

    def map(self, fn) -> "ModelParams":
        """A same-shaped structure with ``fn`` applied to every array."""
        layers = [
            LstmLayerParams(*(fn(a) for a in layer.arrays())) for layer in self.lstm_layers
        ]
        output = DenseSoftmaxParams(*(fn(a) for a in self.output.arrays()))
        return ModelParams(layers, output, self.input_dim, self.dropout_p)

    def zeros_like(self) -> "ModelParams":
        return self.map(np.zeros_like)

    def copy(self) -> "ModelParams":
        return self.map(np.array)


@dataclass
class LstmState:
    hidden: np.ndarray
    cell: np.ndarray

    @classmethod
    def zeros(cls, cells: int, batch: tuple[int, ...] = ()) -> "LstmState":
        return cls(np.zeros(batch + (cells,)), np.zeros(batch + (cells,)))


@dataclass
class StepCache:
    x: np.ndarray
    h_prev: np.ndarray
    c_prev: np.ndarray
    gates: np.ndarray  # (..., 4, c) activated i, f, o, g
    cell: np.ndarray
    tanh_cell: np.ndarray


def lstm_cell_step(params: LstmLayerParams, x, state: LstmState):
    """Advance one LSTM layer by one timestep.

    ``x`` may carry leading batch axes; the state must carry the same ones.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != params.input_dim:
        raise ShapeError(
            f"input shape {x.shape} does not match layer input dim {params.input_dim}"
        )
    c = params.cells
    if state.hidden.shape[-1] != c or state.cell.shape != state.hidden.shape:
        raise ShapeError(
            f"state shapes {state.hidden.shape}/{state.cell.shape} do not match cells {c}"
        )
    wx = params.input_weights.reshape(4 * c, -1)
    wh = params.recurrent_weights.reshape(4 * c, c)
    z = x @ wx.T + state.hidden @ wh.T + params.biases.reshape(-1)
    z = z.reshape(z.shape[:-1] + (4, c))
    gates = np.empty_like(z)
    gates[..., :3, :] = sigmoid(z[..., :3, :])
    gates[..., 3, :] = np.tanh(z[..., 3, :])
    i, f, o, g = (gates[..., k, :] for k in range(4))
    cell = f * state.cell + i * g
    tanh_cell = np.tanh(cell)
    hidden = o * tanh_cell
    cache = StepCache(x, state.hidden, state.cell, gates, cell, tanh_cell)
    return LstmState(hidden, cell), cache


def dropout_mask(rng: np.random.Generator, shape, p: float) -> np.ndarray:
    """Inverted-dropout mask: entries are 0 or 1/(1-p)."""
    if p == 0.0:
        return np.ones(shape)
    keep = rng.random(shape) >= p
    return keep / (1.0 - p)


@dataclass
class ForwardTrace:
    """Everything the backward pass needs, for a batch of B sequences."""

    inputs: np.ndarray  # (B, T, D) after input dropout
    input_mask: np.ndarray  # (B, D)
    output_mask: np.ndarray  # (B, c)
    steps: list[list[StepCache]]  # [layer][t]
    logits: np.ndarray  # (B, T, K+1)
    probs: np.ndarray  # (B, T, K+1)
    batched: bool = field(default=True)

    def __len__(self) -> int:
        return self.logits.shape[1]

    def __iter__(self) -> Iterator[list[StepCache]]:
        """Per-timestep caches, one entry per layer."""
        for t in range(len(self)):
            yield [layer[t] for layer in self.steps]


def forward_batch(params: ModelParams, x, train: bool = False, rng=None):
    """Run the model over a (B, T, D) batch.  Returns (probs, trace)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3:
        raise ShapeError(f"expected (batch, time, dim) features, got shape {x.shape}")
    b, t_len, d = x.shape
    if t_len < 1:
        raise ValueError("cannot run the model on an empty sequence")
    if d != params.input_dim:
        raise ShapeError(f"feature shape {x.shape} does not match input_dim {params.input_dim}")

    p = params.dropout_p if train else 0.0
    if rng is None:
        rng = np.random.default_rng(0)
    input_mask = dropout_mask(rng, (b, d), p)
    output_mask = dropout_mask(rng, (b, params.cells), p)

    layer_in = x * input_mask[:, None, :]
    inputs = layer_in
    steps = []
    for layer in params.lstm_layers:
        state = LstmState.zeros(layer.cells, (b,))
        caches = []
        outs = np.empty((b, t_len, layer.cells))
        for t in range(t_len):
            state, cache = lstm_cell_step(layer, layer_in[:, t], state)
            caches.append(cache)
            outs[:, t] = state.hidden
        steps.append(caches)
        layer_in = outs

    top = layer_in * output_mask[:, None, :]
    logits = top @ params.output.weights.T + params.output.bias
    probs = softmax(logits)
    trace = ForwardTrace(inputs, input_mask, output_mask, steps, logits, probs)
    return probs, trace


def model_forward(params: ModelParams, seq, mode: str = "eval", rng_seed: int = 0):
    """Class probabilities (T, K+1) for one feature sequence (T, D)."""
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    seq = np.asarray(seq, dtype=np.float64)
    if seq.ndim != 2:
        raise ShapeError(f"expected (time, dim) features, got shape {seq.shape}")
    probs, trace = forward_batch(
        params, seq[None], train=(mode == "train"), rng=np.random.default_rng(rng_seed)
    )
    trace.batched = False
    return probs[0], trace


def model_backward(params: ModelParams, trace: ForwardTrace, grad_out) -> ModelParams:
    """Exact gradients given dLoss/dlogits.

    ``grad_out`` has the shape of ``trace.logits`` (or (T, K+1) for a trace
    from :func:`model_forward`).
    """
    grad_out = np.asarray(grad_out, dtype=np.float64)
    if not trace.batched and grad_out.ndim == 2:
        grad_out = grad_out[None]
    if grad_out.shape != trace.logits.shape:
        raise ShapeError(
            f"grad_out shape {grad_out.shape} does not match trace logits {trace.logits.shape}"
        )
    grads = params.zeros_like()
    b, t_len, _ = grad_out.shape

    top_hidden = np.stack([s.gates[:, 2, :] * s.tanh_cell for s in trace.steps[-1]], axis=1)
    top = top_hidden * trace.output_mask[:, None, :]
    grads.output.weights[...] = np.einsum("btk,btc->kc", grad_out, top)
    grads.output.bias[...] = grad_out.sum(axis=(0, 1))
    d_hidden = (grad_out @ params.output.weights) * trace.output_mask[:, None, :]

    for n in range(params.num_layers - 1, -1, -1):
        layer = params.lstm_layers[n]
        g_layer = grads.lstm_layers[n]
        c = layer.cells
        wx = layer.input_weights.reshape(4 * c, -1)
        wh = layer.recurrent_weights.reshape(4 * c, c)
        dwx = np.zeros_like(wx)
        dwh = np.zeros_like(wh)
        db = np.zeros(4 * c)
        d_in = np.empty((b, t_len, layer.input_dim))
        dh_next = np.zeros((b, c))
        dc_next = np.zeros((b, c))
        for t in range(t_len - 1, -1, -1):
            s = trace.steps[n][t]
            i, f, o, g = (s.gates[:, k, :] for k in range(4))
            dh = d_hidden[:, t] + dh_next
            dc = dh * o * (1.0 - s.tanh_cell**2) + dc_next
            dz = np.empty((b, 4, c))
            dz[:, 0] = dc * g * i * (1.0 - i)
            dz[:, 1] = dc * s.c_prev * f * (1.0 - f)
            dz[:, 2] = dh * s.tanh_cell * o * (1.0 - o)
            dz[:, 3] = dc * i * (1.0 - g**2)
            dz = dz.reshape(b, 4 * c)
            dwx += dz.T @ s.x
            dwh += dz.T @ s.h_prev
            db += dz.sum(axis=0)
            d_in[:, t] = dz @ wx
            dh_next = dz @ wh
            dc_next = dc * f
        g_layer.input_weights[...] = dwx.reshape(4, c, -1)
        g_layer.recurrent_weights[...] = dwh.reshape(4, c, c)
        g_layer.biases[...] = db.reshape(4, c)
        d_hidden = d_in
    return grads


def init_params(
    num_layers: int,
    cells: int,
    num_classes: int,
    input_dim: int = 4096,
    seed: int = 0,
    dropout_p: float = 0.5,
) -> ModelParams:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, forget bias 1.

    Draws are rounded to float32 so a freshly initialised model survives a
    checkpoint roundtrip unchanged.
    """
    for name, v in (("num_layers", num_layers), ("cells", cells),
                    ("num_classes", num_classes), ("input_dim", input_dim)):
        if int(v) < 1:
            raise ValueError(f"{name} must be positive, got {v}")
    rng = np.random.default_rng(seed)

    def uniform(shape, fan_in):
        s = np.float32(1.0 / np.sqrt(fan_in))
        w = rng.uniform(-1.0, 1.0, size=shape).astype(np.float32) * s
        return np.clip(w, -s, s).astype(np.float64)

    layers = []
    fan = input_dim
    for _ in range(num_layers):
        biases = np.zeros((4, cells))
        biases[GATES.index("f")] = 1.0
        layers.append(
            LstmLayerParams(
                uniform((4, cells, fan), fan),
                uniform((4, cells, cells), cells),
                biases,
            )
        )
        fan = cells
    output = DenseSoftmaxParams(uniform((num_classes + 1, cells), cells), np.zeros(num_classes + 1))
    return ModelParams(layers, output, input_dim, dropout_p)


def save_checkpoint(params: ModelParams, path) -> None:
    header = struct.pack(
        "<4I", params.num_layers, params.cells, params.num_classes, params.input_dim
    )
    body = b"".join(a.astype("<f4").tobytes(order="C") for a in params.arrays())
    Path(path).write_bytes(CHECKPOINT_MAGIC + header + body)


def load_checkpoint(path, dropout_p: float = 0.5) -> ModelParams:
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic {raw[:4]!r})")
    if len(raw) < 20:
        raise CheckpointError(f"{path}: truncated header")
    n, c, k, d = struct.unpack("<4I", raw[4:20])
    template = init_params(n, c, k, d, seed=0, dropout_p=dropout_p)
    sizes = [a.size for a in template.arrays()]
    payload = np.frombuffer(raw, dtype="<f4", offset=20)
    if payload.size != sum(sizes):
        raise CheckpointError(
            f"{path}: expected {sum(sizes)} floats for N={n} c={c} K={k} D={d}, found {payload.size}"
        )
    chunks = iter(np.split(payload.astype(np.float64), np.cumsum(sizes)[:-1]))
    return template.map(lambda a: next(chunks).reshape(a.shape))
