"""MLP encoder pair (query + momentum key) with exact reverse-mode gradients.

A small ReLU MLP whose output head l2-normalises each row; forward caches the
activations that backward needs, and backward produces exact gradients through
the normalisation head, the ReLU layers, and the affine maps. The training
update is SGD with momentum and weight decay, and the key encoder tracks the
query encoder as an exponential moving average.

Checkpoints use a little-endian binary layout behind the magic "CLAB1":
query encoder, key encoder, velocity (each: u32 layer count, then per layer
u32 out_dim, u32 in_dim, f64 weights row-major, f64 biases) and a u64 step
counter.
"""

from __future__ import annotations

import os
import struct
import tempfile
from dataclasses import dataclass, field

import numpy as np

from .core import NORM_EPS, EmbeddingBatch, RngStream

CHECKPOINT_MAGIC = b"CLAB1"


@dataclass
class EncoderParams:
    """Per-layer weight matrices (out x in) and bias vectors, float64."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def __post_init__(self):
        if len(self.weights) != len(self.biases):
            raise ValueError("weights and biases must pair up")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.ndim != 1 or w.shape[0] != b.shape[0]:
                raise ValueError(f"layer {i}: weight {w.shape} and bias {b.shape} disagree")
            if i > 0 and w.shape[1] != self.weights[i - 1].shape[0]:
                raise ValueError(
                    f"layer {i} input dim {w.shape[1]} != layer {i - 1} output dim "
                    f"{self.weights[i - 1].shape[0]}"
                )
            if not (np.isfinite(w).all() and np.isfinite(b).all()):
                raise ValueError(f"layer {i} holds non-finite values")

    @property
    def layer_sizes(self) -> list[int]:
        return [self.weights[0].shape[1]] + [w.shape[0] for w in self.weights]

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def embed_dim(self) -> int:
        return self.weights[-1].shape[0]

    def copy(self) -> "EncoderParams":
        return EncoderParams([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    @staticmethod
    def init(layer_sizes: list[int], rng: RngStream) -> "EncoderParams":
        """He-scaled Gaussian weights, zero biases. Hidden layers are ReLU."""
        if len(layer_sizes) < 2:
            raise ValueError("need at least input and output sizes")
        weights, biases = [], []
        for i in range(len(layer_sizes) - 1):
            fan_in, fan_out = layer_sizes[i], layer_sizes[i + 1]
            last = i == len(layer_sizes) - 2
            scale = np.sqrt(1.0 / fan_in) if last else np.sqrt(2.0 / fan_in)
            weights.append(rng.standard_normal((fan_out, fan_in)) * scale)
            biases.append(np.zeros(fan_out))
        return EncoderParams(weights, biases)

    @staticmethod
    def zeros_like(other: "EncoderParams") -> "EncoderParams":
        return EncoderParams(
            [np.zeros_like(w) for w in other.weights], [np.zeros_like(b) for b in other.biases]
        )


# velocity buffers share the gradient layout
GradBuffer = EncoderParams


@dataclass(frozen=True)
class TrainConfig:
    """Pre-training hyperparameters. Defaults follow the MoCo v2 recipe."""

    lr: float = 0.03
    weight_decay: float = 1e-4
    momentum: float = 0.9
    batch_size: int = 64
    epochs: int = 20
    key_momentum: float = 0.999
    tau: float = 0.2
    queue_size: int = 1024
    views: int = 2

    def __post_init__(self):
        if not 0.0 <= self.key_momentum <= 1.0:
            raise ValueError(f"key_momentum must be in [0, 1], got {self.key_momentum}")
        if self.tau <= 0.0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        if self.queue_size < 1 or self.batch_size < 1:
            raise ValueError("queue_size and batch_size must be >= 1")
        if self.views < 2:
            raise ValueError(f"need >= 2 views (one query, one key), got {self.views}")

    def lr_at(self, epoch: int) -> float:
        """Step schedule: x0.1 at 60% and again at 80% of total epochs."""
        factor = 1.0
        if self.epochs > 0:
            if epoch >= 0.6 * self.epochs:
                factor *= 0.1
            if epoch >= 0.8 * self.epochs:
                factor *= 0.1
        return self.lr * factor


@dataclass
class ActivationRecord:
    """Cache of everything backward needs; produced by forward."""

    inputs: list[np.ndarray]  # input to each affine layer
    pre_acts: list[np.ndarray]  # affine outputs before ReLU (hidden layers only)
    pre_norm: np.ndarray  # last affine output, before l2 normalisation
    norms: np.ndarray  # per-row norms of pre_norm
    embeddings: np.ndarray  # normalised rows (zero where norm <= eps)
    params: EncoderParams = field(repr=False)


def forward(params: EncoderParams, batch: np.ndarray) -> tuple[EmbeddingBatch, ActivationRecord]:
    """Run the MLP and l2-normalise each output row.

    Rows whose pre-normalisation output is (near-)zero come back as zero
    vectors; the batch's normalized flag is only set when no such row exists.
    """
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.input_dim:
        raise ValueError(f"batch shape {x.shape} does not match input dim {params.input_dim}")
    inputs, pre_acts = [], []
    h = x
    n_layers = len(params.weights)
    for i in range(n_layers):
        inputs.append(h)
        z = h @ params.weights[i].T + params.biases[i]
        if i < n_layers - 1:
            pre_acts.append(z)
            h = np.maximum(z, 0.0)
        else:
            pre_norm = z
    norms = np.linalg.norm(pre_norm, axis=1)
    safe = norms > NORM_EPS
    emb = np.zeros_like(pre_norm)
    np.divide(pre_norm, norms[:, None], out=emb, where=safe[:, None])
    record = ActivationRecord(inputs, pre_acts, pre_norm, norms, emb, params)
    return EmbeddingBatch(emb.copy(), normalized=bool(safe.all())), record


def backward(record: ActivationRecord, upstream: np.ndarray) -> GradBuffer:
    """Exact gradients of sum(upstream * embedding) w.r.t. the parameters.

    The normalisation head contributes the Jacobian (I - q q^T) / |z| per row;
    zero-norm rows pass zero gradient (the embedding there is constant zero).
    """
    g_emb = np.asarray(upstream, dtype=np.float64)
    if g_emb.shape != record.embeddings.shape:
        raise ValueError(
            f"upstream shape {g_emb.shape} does not match embeddings {record.embeddings.shape}"
        )
    params = record.params
    safe = record.norms > NORM_EPS
    q = record.embeddings
    inner = np.sum(g_emb * q, axis=1, keepdims=True)
    g = np.zeros_like(g_emb)
    np.divide(g_emb - q * inner, record.norms[:, None], out=g, where=safe[:, None])

    n_layers = len(params.weights)
    d_weights = [np.empty(0)] * n_layers
    d_biases = [np.empty(0)] * n_layers
    for i in range(n_layers - 1, -1, -1):
        d_weights[i] = g.T @ record.inputs[i]
        d_biases[i] = g.sum(axis=0)
        if i > 0:
            g = (g @ params.weights[i]) * (record.pre_acts[i - 1] > 0.0)
    return GradBuffer(d_weights, d_biases)


def momentum_update(key: EncoderParams, query: EncoderParams, m: float) -> EncoderParams:
    """key' = m * key + (1 - m) * query, elementwise."""
    _check_congruent(key, query, "momentum_update")
    return EncoderParams(
        [m * wk + (1.0 - m) * wq for wk, wq in zip(key.weights, query.weights)],
        [m * bk + (1.0 - m) * bq for bk, bq in zip(key.biases, query.biases)],
    )


def sgd_step(
    params: EncoderParams, grads: GradBuffer, velocity: GradBuffer, cfg: TrainConfig, lr: float | None = None
) -> tuple[EncoderParams, GradBuffer]:
    """v' = momentum * v + (grad + wd * theta); theta' = theta - lr * v'."""
    _check_congruent(params, grads, "sgd_step grads")
    _check_congruent(params, velocity, "sgd_step velocity")
    for i, (gw, gb) in enumerate(zip(grads.weights, grads.biases)):
        if not (np.isfinite(gw).all() and np.isfinite(gb).all()):
            raise ValueError(f"non-finite gradient in layer {i}")
    step_lr = cfg.lr if lr is None else lr
    new_w, new_b, vel_w, vel_b = [], [], [], []
    for w, b, gw, gb, vw, vb in zip(
        params.weights, params.biases, grads.weights, grads.biases, velocity.weights, velocity.biases
    ):
        nvw = cfg.momentum * vw + (gw + cfg.weight_decay * w)
        nvb = cfg.momentum * vb + (gb + cfg.weight_decay * b)
        vel_w.append(nvw)
        vel_b.append(nvb)
        new_w.append(w - step_lr * nvw)
        new_b.append(b - step_lr * nvb)
    return EncoderParams(new_w, new_b), GradBuffer(vel_w, vel_b)


def _check_congruent(a: EncoderParams, b: EncoderParams, what: str):
    shapes_a = [w.shape for w in a.weights]
    shapes_b = [w.shape for w in b.weights]
    if shapes_a != shapes_b:
        raise ValueError(f"{what}: shape mismatch {shapes_a} vs {shapes_b}")


@dataclass
class TrainState:
    """Everything a checkpoint persists."""

    query: EncoderParams
    key: EncoderParams
    velocity: GradBuffer
    step: int = 0


def _write_params(out: list[bytes], params: EncoderParams):
    out.append(struct.pack("<I", len(params.weights)))
    for w, b in zip(params.weights, params.biases):
        out.append(struct.pack("<II", w.shape[0], w.shape[1]))
        out.append(np.ascontiguousarray(w, dtype="<f8").tobytes())
        out.append(np.ascontiguousarray(b, dtype="<f8").tobytes())


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise ValueError("checkpoint truncated")
        chunk = self.blob[self.pos : self.pos + n]
        self.pos += n
        return chunk


def _read_params(r: _Reader) -> EncoderParams:
    (n_layers,) = struct.unpack("<I", r.take(4))
    weights, biases = [], []
    for _ in range(n_layers):
        out_dim, in_dim = struct.unpack("<II", r.take(8))
        w = np.frombuffer(r.take(8 * out_dim * in_dim), dtype="<f8").reshape(out_dim, in_dim).copy()
        b = np.frombuffer(r.take(8 * out_dim), dtype="<f8").copy()
        weights.append(w)
        biases.append(b)
    return EncoderParams(weights, biases)


def save_checkpoint(state: TrainState, path: str):
    """Serialise atomically: write a sibling temp file, then rename over path."""
    chunks: list[bytes] = [CHECKPOINT_MAGIC]
    _write_params(chunks, state.query)
    _write_params(chunks, state.key)
    _write_params(chunks, state.velocity)
    chunks.append(struct.pack("<Q", state.step))
    blob = b"".join(chunks)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".ckpt-")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path: str) -> TrainState:
    with open(path, "rb") as f:
        blob = f.read()
    r = _Reader(blob)
    magic = r.take(len(CHECKPOINT_MAGIC))
    if magic != CHECKPOINT_MAGIC:
        raise ValueError(f"bad checkpoint magic {magic!r} in {path}")
    query = _read_params(r)
    key = _read_params(r)
    velocity = _read_params(r)
    (step,) = struct.unpack("<Q", r.take(8))
    if r.pos != len(blob):
        raise ValueError(f"trailing bytes in checkpoint {path}")
    return TrainState(query, key, velocity, int(step))
