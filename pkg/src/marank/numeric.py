"""Small deterministic numerics: a ReLU MLP with exact backprop, MC dropout, seeded RNG."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erfc


class ShapeError(ValueError):
    """Raised when an array does not fit the layer it is fed to."""


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """Return a PCG64 generator for ``seed``.

    Extra integers select an independent sub-stream, so ``make_rng(7, 0)`` and
    ``make_rng(7, 1)`` never overlap while both stay reproducible.
    """
    if seed < 0:
        raise ValueError("seed must be non-negative")
    seq = np.random.SeedSequence(entropy=seed, spawn_key=tuple(int(s) for s in stream))
    return np.random.Generator(np.random.PCG64(seq))


def sub_seed(seed: int, *stream: int) -> int:
    """Derive a 63-bit integer seed for sub-stream ``stream`` of ``seed``."""
    seq = np.random.SeedSequence(entropy=seed, spawn_key=tuple(int(s) for s in stream))
    return int(seq.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


@dataclass
class MlpParams:
    """Weights of a feed-forward net: ReLU on hidden layers, identity output.

    ``weights[l]`` has shape ``(out, in)``. ``dropout[l]`` is the drop rate
    applied to the output of hidden layer ``l`` (so there are ``len(weights) - 1``
    rates).
    """

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    dropout: list[float] = field(default_factory=list)

    def __post_init__(self):
        if len(self.weights) == 0 or len(self.weights) != len(self.biases):
            raise ShapeError("need one bias per weight matrix")
        if not self.dropout:
            self.dropout = [0.0] * (len(self.weights) - 1)
        if len(self.dropout) != len(self.weights) - 1:
            raise ShapeError("need one dropout rate per hidden layer")
        for rate in self.dropout:
            if not 0.0 <= rate < 1.0:
                raise ValueError(f"dropout rate {rate} outside [0, 1)")
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ShapeError(f"layer {l}: weight {w.shape} / bias {b.shape} mismatch")
            if l > 0 and w.shape[1] != self.weights[l - 1].shape[0]:
                raise ShapeError(
                    f"layer {l}: expects {w.shape[1]} inputs, previous layer emits "
                    f"{self.weights[l - 1].shape[0]}"
                )

    @property
    def sizes(self) -> list[int]:
        return [self.weights[0].shape[1]] + [w.shape[0] for w in self.weights]

    @property
    def n_inputs(self) -> int:
        return self.weights[0].shape[1]

    @property
    def n_outputs(self) -> int:
        return self.weights[-1].shape[0]

    @property
    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for pair in zip(self.weights, self.biases) for a in pair])

    def with_flat(self, vec: np.ndarray) -> "MlpParams":
        vec = np.asarray(vec, dtype=np.float64)
        if vec.size != self.n_params:
            raise ShapeError(f"flat vector has {vec.size} entries, expected {self.n_params}")
        weights, biases, pos = [], [], 0
        for w, b in zip(self.weights, self.biases):
            weights.append(vec[pos:pos + w.size].reshape(w.shape).copy())
            pos += w.size
            biases.append(vec[pos:pos + b.size].copy())
            pos += b.size
        return MlpParams(weights, biases, list(self.dropout))

    def zeros_like(self) -> "MlpParams":
        return self.with_flat(np.zeros(self.n_params))

    def copy(self) -> "MlpParams":
        return self.with_flat(self.flat())

    def with_dropout(self, rate: float) -> "MlpParams":
        return MlpParams([w.copy() for w in self.weights], [b.copy() for b in self.biases],
                         [rate] * (len(self.weights) - 1))

    def to_dict(self) -> dict:
        return {
            "sizes": self.sizes,
            "dropout": list(self.dropout),
            "weights": [w.ravel().tolist() for w in self.weights],
            "biases": [b.tolist() for b in self.biases],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "MlpParams":
        sizes = doc["sizes"]
        weights = [np.asarray(w, dtype=np.float64).reshape(sizes[l + 1], sizes[l])
                   for l, w in enumerate(doc["weights"])]
        biases = [np.asarray(b, dtype=np.float64) for b in doc["biases"]]
        return cls(weights, biases, [float(r) for r in doc["dropout"]])


def init_mlp(sizes: list[int], rng: np.random.Generator, dropout: float = 0.0,
             scale: float | None = None) -> MlpParams:
    """He-style Gaussian init; biases start at zero."""
    if len(sizes) < 2 or min(sizes) < 1:
        raise ShapeError(f"invalid layer sizes {sizes}")
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        std = scale if scale is not None else math.sqrt(2.0 / fan_in)
        weights.append(rng.normal(0.0, std, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return MlpParams(weights, biases, [dropout] * (len(sizes) - 2))


def _check_input(params: MlpParams, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim not in (1, 2) or x.shape[-1] != params.n_inputs:
        raise ShapeError(f"layer 0: input of shape {x.shape}, expected last dim {params.n_inputs}")
    return x


def _check_masks(params: MlpParams, masks, batch_shape) -> None:
    if masks is None:
        return
    if len(masks) != len(params.weights) - 1:
        raise ShapeError(f"got {len(masks)} dropout masks for {len(params.weights) - 1} hidden layers")
    for l, m in enumerate(masks):
        width = params.weights[l].shape[0]
        if np.shape(m)[-1] != width:
            raise ShapeError(f"layer {l}: mask width {np.shape(m)[-1]} != hidden width {width}")


def _forward_cache(params: MlpParams, x: np.ndarray, masks):
    # returns per-layer inputs and pre-activations
    inputs, pre = [], []
    h = x
    n_layers = len(params.weights)
    for l, (w, b) in enumerate(zip(params.weights, params.biases)):
        inputs.append(h)
        z = h @ w.T + b
        pre.append(z)
        if l < n_layers - 1:
            h = np.maximum(z, 0.0)
            if masks is not None:
                keep = 1.0 - params.dropout[l]
                h = h * (np.asarray(masks[l], dtype=np.float64) / keep)
        else:
            h = z
    return inputs, pre, h


def mlp_forward(params: MlpParams, x: np.ndarray, masks=None) -> np.ndarray:
    """Evaluate the net on one input ``(d,)`` or a batch ``(B, d)``.

    ``masks`` are binary keep-masks per hidden layer (inverted dropout: kept
    units are scaled by ``1 / (1 - p)``). Without masks dropout is off.
    """
    x = _check_input(params, x)
    _check_masks(params, masks, x.shape[:-1])
    return _forward_cache(params, x, masks)[2]


def mlp_gradient(params: MlpParams, x: np.ndarray, upstream: np.ndarray, masks=None):
    """Reverse-mode gradient of ``sum(upstream * mlp_forward(params, x, masks))``.

    Batched inputs have their parameter gradients summed over the batch.
    ReLU uses subgradient 0 at exactly 0. Returns ``(param_grads, input_grad)``.
    """
    x = _check_input(params, x)
    _check_masks(params, masks, x.shape[:-1])
    upstream = np.asarray(upstream, dtype=np.float64)
    inputs, pre, out = _forward_cache(params, x, masks)
    if upstream.shape != out.shape:
        raise ShapeError(f"output layer: upstream gradient {upstream.shape} != output {out.shape}")
    batched = x.ndim == 2
    n_layers = len(params.weights)
    gw: list[np.ndarray] = [None] * n_layers  # type: ignore[list-item]
    gb: list[np.ndarray] = [None] * n_layers  # type: ignore[list-item]
    delta = upstream
    for l in range(n_layers - 1, -1, -1):
        if batched:
            gw[l] = delta.T @ inputs[l]
            gb[l] = delta.sum(axis=0)
        else:
            gw[l] = np.outer(delta, inputs[l])
            gb[l] = delta.copy()
        delta = delta @ params.weights[l]
        if l > 0:
            if masks is not None:
                keep = 1.0 - params.dropout[l - 1]
                delta = delta * (np.asarray(masks[l - 1], dtype=np.float64) / keep)
            delta = delta * (pre[l - 1] > 0.0)
    return MlpParams(gw, gb, list(params.dropout)), delta


def finite_diff_gradient(loss_fn, params: MlpParams, h: float = 1e-5) -> MlpParams:
    """Central-difference gradient of a scalar ``loss_fn(params)``."""
    if h <= 0:
        raise ValueError("step h must be positive")
    base = params.flat()
    grad = np.empty_like(base)
    for k in range(base.size):
        bumped = base.copy()
        bumped[k] = base[k] + h
        up = loss_fn(params.with_flat(bumped))
        bumped[k] = base[k] - h
        down = loss_fn(params.with_flat(bumped))
        grad[k] = (up - down) / (2.0 * h)
    return params.with_flat(grad)


def sgd_step(params: MlpParams, grads: MlpParams, lr: float, ascend: bool = False) -> MlpParams:
    sign = 1.0 if ascend else -1.0
    return params.with_flat(params.flat() + sign * lr * grads.flat())


def gaussian_cdf(x, mu=0.0, sigma=1.0):
    """Normal CDF via the complementary error function (accurate in both tails)."""
    if np.any(np.asarray(sigma) <= 0):
        raise ValueError("sigma must be positive")
    z = (np.asarray(x, dtype=np.float64) - mu) / sigma
    out = 0.5 * erfc(-z / math.sqrt(2.0))
    return float(out) if np.ndim(out) == 0 else out


def gaussian_pdf(x, mu=0.0, sigma=1.0):
    if np.any(np.asarray(sigma) <= 0):
        raise ValueError("sigma must be positive")
    z = (np.asarray(x, dtype=np.float64) - mu) / sigma
    out = np.exp(-0.5 * z * z) / (sigma * math.sqrt(2.0 * math.pi))
    return float(out) if np.ndim(out) == 0 else out


def sample_dropout_masks(params: MlpParams, rng: np.random.Generator, batch_shape=()) -> list[np.ndarray]:
    """Draw binary keep-masks, one per hidden layer."""
    masks = []
    for l, rate in enumerate(params.dropout):
        width = params.weights[l].shape[0]
        masks.append((rng.random(tuple(batch_shape) + (width,)) >= rate).astype(np.float64))
    return masks


def mc_dropout_samples(params: MlpParams, x: np.ndarray, n_samples: int,
                       rng: np.random.Generator) -> np.ndarray:
    """Stack of ``n_samples`` stochastic forward passes, shape ``(n_samples, *out_shape)``."""
    x = _check_input(params, x)
    return np.stack([mlp_forward(params, x, sample_dropout_masks(params, rng, x.shape[:-1]))
                     for _ in range(n_samples)])


def mc_dropout_stats(params: MlpParams, x: np.ndarray, n_samples: int, rng: np.random.Generator):
    """Per-output sample mean and unbiased variance over MC-dropout passes."""
    if n_samples < 2:
        raise ValueError("mc_dropout_stats needs n_samples >= 2")
    if all(rate == 0.0 for rate in params.dropout):
        out = mlp_forward(params, x)
        return out, np.zeros_like(out)
    draws = mc_dropout_samples(params, x, n_samples, rng)
    return draws.mean(axis=0), draws.var(axis=0, ddof=1)
