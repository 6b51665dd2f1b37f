"""Dense feed-forward network with analytic forward/backward passes.

Everything here runs in float64. The architecture is a stack of affine
layers with a rectifier on every hidden layer and raw logits at the output;
gradients are computed in closed form for both parameters and inputs, which
keeps finite-difference checks tight and makes sign-gradient attacks exact.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

MODEL_MAGIC = b"FMD1"


class Model:
    """Layered dense network: logits(x) = W_L(...relu(W_1 x + b_1)...) + b_L.

    Weight matrices are shaped (out, in); biases (out,). Consecutive layer
    dimensions must chain. Instances are treated as immutable during a
    training step: updates go through :func:`sgd_step`, which returns a new
    Model.
    """

    __slots__ = ("weights", "biases")

    def __init__(self, weights: list[np.ndarray], biases: list[np.ndarray]):
        if len(weights) != len(biases) or not weights:
            raise ValueError("model needs matching, non-empty weight/bias lists")
        ws, bs = [], []
        prev_out = None
        for k, (w, b) in enumerate(zip(weights, biases)):
            w = np.asarray(w, dtype=np.float64)
            b = np.asarray(b, dtype=np.float64)
            if w.ndim != 2 or b.ndim != 1 or w.shape[0] != b.shape[0]:
                raise ValueError(f"layer {k}: weight (out,in) and bias (out,) shapes disagree")
            if prev_out is not None and w.shape[1] != prev_out:
                raise ValueError(
                    f"layer {k}: input size {w.shape[1]} does not chain with previous output {prev_out}"
                )
            prev_out = w.shape[0]
            ws.append(w)
            bs.append(b)
        self.weights = ws
        self.biases = bs

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def num_classes(self) -> int:
        return self.weights[-1].shape[0]

    @property
    def num_layers(self) -> int:
        return len(self.weights)

    @property
    def num_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def copy(self) -> "Model":
        return Model([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Model):
            return NotImplemented
        return len(self.weights) == len(other.weights) and all(
            np.array_equal(a, b) for a, b in zip(self.weights, other.weights)
        ) and all(np.array_equal(a, b) for a, b in zip(self.biases, other.biases))


@dataclass
class GradientBundle:
    """Gradients mirroring a Model's layout plus optional input gradients.

    For batched inputs the parameter gradients are accumulated over rows, so
    upstream logit gradients should already carry any 1/n scaling.
    """

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    inputs: np.ndarray | None = None


@dataclass
class OptimizerState:
    """SGD-with-momentum state: v <- momentum*v + g, theta <- theta - lr*v."""

    lr: float
    momentum: float = 0.0
    velocities: list[tuple[np.ndarray, np.ndarray]] | None = None

    def __post_init__(self) -> None:
        if not np.isfinite(self.lr) or self.lr <= 0:
            raise ValueError(f"learning rate must be positive, got {self.lr}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")


def init_mlp(
    input_dim: int,
    hidden: tuple[int, ...] | list[int],
    num_classes: int,
    rng: np.random.Generator,
) -> Model:
    """He-initialized MLP: Gaussian weights with std sqrt(2/fan_in), zero biases."""
    dims = [int(input_dim), *[int(h) for h in hidden], int(num_classes)]
    if any(d <= 0 for d in dims):
        raise ValueError(f"all layer sizes must be positive, got {dims}")
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        std = np.sqrt(2.0 / fan_in)
        weights.append(rng.normal(0.0, std, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return Model(weights, biases)


def _as_batch(x: np.ndarray, dim: int, what: str) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != dim:
        raise ValueError(f"{what} must have {dim} features, got shape {x.shape}")
    return x, single


def forward(model: Model, x: np.ndarray) -> np.ndarray:
    """Raw logits for a single input (d,) or a batch (n, d)."""
    xb, single = _as_batch(x, model.input_dim, "input")
    a = xb
    last = model.num_layers - 1
    for k, (w, b) in enumerate(zip(model.weights, model.biases)):
        z = a @ w.T + b
        a = np.maximum(z, 0.0) if k < last else z
    return a[0] if single else a


def _forward_trace(model: Model, xb: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
    # Returns logits and the post-activation inputs feeding each layer.
    acts = [xb]
    a = xb
    last = model.num_layers - 1
    for k, (w, b) in enumerate(zip(model.weights, model.biases)):
        z = a @ w.T + b
        a = np.maximum(z, 0.0) if k < last else z
        if k < last:
            acts.append(a)
    return a, acts


def backward(
    model: Model,
    x: np.ndarray,
    dlogits: np.ndarray,
    *,
    with_param_grads: bool = True,
    with_input_grads: bool = True,
) -> GradientBundle:
    """Exact reverse-mode gradients for parameters and/or inputs.

    `dlogits` is the upstream gradient of a scalar loss with respect to the
    logits, one row per batched input. The rectifier derivative at exactly
    zero is taken as zero.
    """
    xb, single = _as_batch(x, model.input_dim, "input")
    db, dsingle = _as_batch(dlogits, model.num_classes, "dlogits")
    if single != dsingle or xb.shape[0] != db.shape[0]:
        raise ValueError(
            f"input batch {xb.shape[0]} and dlogits batch {db.shape[0]} must agree"
        )

    logits_unused, acts = _forward_trace(model, xb)
    del logits_unused
    n_layers = model.num_layers
    w_grads: list[np.ndarray | None] = [None] * n_layers
    b_grads: list[np.ndarray | None] = [None] * n_layers

    delta = db
    for k in range(n_layers - 1, -1, -1):
        a_in = acts[k]
        if with_param_grads:
            w_grads[k] = delta.T @ a_in
            b_grads[k] = delta.sum(axis=0)
        if k == 0 and not with_input_grads:
            delta = None
            break
        delta = delta @ model.weights[k]
        if k > 0:
            # acts[k] is the rectifier output, positive exactly where z > 0
            delta = delta * (acts[k] > 0.0)

    dx = None
    if with_input_grads:
        dx = delta[0] if single else delta
    if not with_param_grads:
        return GradientBundle([], [], dx)
    return GradientBundle(w_grads, b_grads, dx)  # type: ignore[arg-type]


def input_gradient(model: Model, x: np.ndarray, dlogits: np.ndarray) -> np.ndarray:
    """Gradient of the loss w.r.t. the inputs only (cheaper than full backward)."""
    return backward(model, x, dlogits, with_param_grads=False).inputs


def sgd_step(model: Model, grads: GradientBundle, state: OptimizerState) -> Model:
    """One momentum-SGD update; mutates the state's velocity buffers."""
    if state.velocities is None:
        state.velocities = [
            (np.zeros_like(w), np.zeros_like(b))
            for w, b in zip(model.weights, model.biases)
        ]
    if len(grads.weights) != model.num_layers:
        raise ValueError("gradient layout does not match model")
    new_w, new_b = [], []
    for (w, b), (gw, gb), (vw, vb) in zip(
        zip(model.weights, model.biases), zip(grads.weights, grads.biases), state.velocities
    ):
        if gw.shape != w.shape or gb.shape != b.shape:
            raise ValueError(f"gradient shape {gw.shape} does not match weights {w.shape}")
        vw *= state.momentum
        vw += gw
        vb *= state.momentum
        vb += gb
        new_w.append(w - state.lr * vw)
        new_b.append(b - state.lr * vb)
    return Model(new_w, new_b)


def flatten(model: Model) -> np.ndarray:
    """All parameters as one vector: layer by layer, row-major weights then bias."""
    parts = []
    for w, b in zip(model.weights, model.biases):
        parts.append(w.ravel())
        parts.append(b)
    return np.concatenate(parts)


def unflatten(vector: np.ndarray, like: Model) -> Model:
    """Inverse of :func:`flatten`, using `like` as the shape template."""
    v = np.asarray(vector, dtype=np.float64)
    if v.ndim != 1 or v.size != like.num_params:
        raise ValueError(f"expected a flat vector of length {like.num_params}, got shape {v.shape}")
    weights, biases, pos = [], [], 0
    for w, b in zip(like.weights, like.biases):
        weights.append(v[pos : pos + w.size].reshape(w.shape).copy())
        pos += w.size
        biases.append(v[pos : pos + b.size].copy())
        pos += b.size
    return Model(weights, biases)


def save_model(model: Model, path) -> None:
    """Serialize to the FMD1 binary format (bit-exact little-endian float64)."""
    with open(path, "wb") as fh:
        fh.write(MODEL_MAGIC)
        fh.write(struct.pack("<I", model.num_layers))
        for w in model.weights:
            fh.write(struct.pack("<II", w.shape[0], w.shape[1]))
        for w, b in zip(model.weights, model.biases):
            fh.write(w.astype("<f8").tobytes())
            fh.write(b.astype("<f8").tobytes())


def load_model(path) -> Model:
    """Read a model written by :func:`save_model`."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MODEL_MAGIC:
        raise ValueError(f"{path}: not a model file (bad magic {blob[:4]!r})")
    (n_layers,) = struct.unpack_from("<I", blob, 4)
    off = 8
    shapes = []
    for _ in range(n_layers):
        out, inp = struct.unpack_from("<II", blob, off)
        off += 8
        shapes.append((out, inp))
    weights, biases = [], []
    for out, inp in shapes:
        need = (out * inp + out) * 8
        if off + need > len(blob):
            raise ValueError(f"{path}: truncated at byte {off}")
        w = np.frombuffer(blob, dtype="<f8", count=out * inp, offset=off).reshape(out, inp)
        off += out * inp * 8
        b = np.frombuffer(blob, dtype="<f8", count=out, offset=off)
        off += out * 8
        weights.append(w.copy())
        biases.append(b.copy())
    if off != len(blob):
        raise ValueError(f"{path}: {len(blob) - off} trailing bytes")
    return Model(weights, biases)
