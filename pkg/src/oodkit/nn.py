"""Dense ReLU MLP with inverted dropout, plus SGD with momentum.

Everything is plain float64 numpy. Forward passes record a trace with
enough intermediate state for an exact backward pass, including the
dropout masks, so gradients always match the stochastic forward that
produced them.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

MODEL_FORMAT_VERSION = 1

FORWARD_MODES = ("eval", "train", "mc_dropout")


class DivergenceError(RuntimeError):
    """Non-finite values would have entered model state."""


class ModelFileError(ValueError):
    """Model file is unreadable or internally inconsistent."""


def _as_batch(x, dim: int | None = None) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"expected a 2-D batch, got shape {x.shape}")
    if dim is not None and x.shape[1] != dim:
        raise ValueError(f"expected {dim} input columns, got {x.shape[1]}")
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite entries in input batch")
    return x


@dataclass
class MlpModel:
    """Fully connected ReLU network. weights[l] has shape (dims[l+1], dims[l])."""

    layer_dims: list[int]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    dropout_rate: float = 0.0

    def __post_init__(self):
        dims = [int(d) for d in self.layer_dims]
        if len(dims) < 2 or any(d < 1 for d in dims):
            raise ValueError(f"layer_dims must be >=2 positive sizes, got {dims}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if len(self.weights) != len(dims) - 1 or len(self.biases) != len(dims) - 1:
            raise ValueError("weights/biases count does not match layer_dims")
        self.layer_dims = dims
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            w = np.asarray(w, dtype=np.float64)
            b = np.asarray(b, dtype=np.float64)
            if w.shape != (dims[l + 1], dims[l]):
                raise ValueError(
                    f"weights[{l}] shape {w.shape} != {(dims[l + 1], dims[l])}"
                )
            if b.shape != (dims[l + 1],):
                raise ValueError(f"biases[{l}] shape {b.shape} != {(dims[l + 1],)}")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ValueError(f"non-finite parameters in layer {l}")
            self.weights[l] = w
            self.biases[l] = b

    @property
    def input_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def num_classes(self) -> int:
        return self.layer_dims[-1]

    def copy(self) -> "MlpModel":
        return MlpModel(
            layer_dims=list(self.layer_dims),
            weights=[w.copy() for w in self.weights],
            biases=[b.copy() for b in self.biases],
            dropout_rate=self.dropout_rate,
        )


@dataclass
class ForwardTrace:
    """Intermediate state of one forward pass, consumed by backward()."""

    inputs: np.ndarray
    pre_activations: list[np.ndarray]
    hidden_activations: list[np.ndarray]  # post-ReLU, post-dropout
    masks: list[np.ndarray | None]  # entries are 0 or 1/keep; None when inactive
    mode: str

    @property
    def penultimate_features(self) -> np.ndarray:
        """Input to the final linear layer."""
        if self.hidden_activations:
            return self.hidden_activations[-1]
        return self.inputs

    def layer_input(self, l: int) -> np.ndarray:
        return self.inputs if l == 0 else self.hidden_activations[l - 1]


@dataclass
class Gradients:
    weights: list[np.ndarray]
    biases: list[np.ndarray]


@dataclass
class OptimizerState:
    """SGD-with-momentum state; weight decay is coupled (added to the gradient)."""

    learning_rate: float
    momentum: float
    weight_decay: float
    velocity_w: list[np.ndarray]
    velocity_b: list[np.ndarray]

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ValueError(f"weight_decay must be >= 0, got {self.weight_decay}")

    @classmethod
    def zeros(
        cls,
        model: MlpModel,
        learning_rate: float,
        momentum: float = 0.9,
        weight_decay: float = 0.0,
    ) -> "OptimizerState":
        return cls(
            learning_rate=learning_rate,
            momentum=momentum,
            weight_decay=weight_decay,
            velocity_w=[np.zeros_like(w) for w in model.weights],
            velocity_b=[np.zeros_like(b) for b in model.biases],
        )


def init_mlp(layer_dims, dropout_rate: float = 0.0, seed: int = 0) -> MlpModel:
    """He fan-in initialisation (variance 2/fan_in), zero biases."""
    dims = [int(d) for d in layer_dims]
    if len(dims) < 2 or any(d < 1 for d in dims):
        raise ValueError(f"layer_dims must be >=2 positive sizes, got {dims}")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        std = np.sqrt(2.0 / fan_in)
        weights.append(rng.normal(0.0, std, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return MlpModel(dims, weights, biases, dropout_rate)


def forward(
    model: MlpModel,
    inputs,
    mode: str = "eval",
    seed: int | None = None,
) -> tuple[np.ndarray, ForwardTrace]:
    """Run the network. Returns (logits, trace).

    mode "eval" disables dropout; "train" and "mc_dropout" sample fresh
    inverted-dropout masks from `seed` (required when dropout_rate > 0).
    """
    if mode not in FORWARD_MODES:
        raise ValueError(f"mode must be one of {FORWARD_MODES}, got {mode!r}")
    x = _as_batch(inputs, model.input_dim)
    dropout_active = mode != "eval" and model.dropout_rate > 0.0
    if dropout_active and seed is None:
        raise ValueError(f"mode {mode!r} with dropout requires a seed")
    rng = np.random.default_rng(seed) if dropout_active else None

    n_layers = len(model.weights)
    pre, hidden, masks = [], [], []
    a = x
    for l in range(n_layers):
        z = a @ model.weights[l].T + model.biases[l]
        pre.append(z)
        if l == n_layers - 1:
            break
        h = np.maximum(z, 0.0)
        if dropout_active:
            keep = 1.0 - model.dropout_rate
            mask = (rng.random(h.shape) < keep).astype(np.float64) / keep
            h = h * mask
            masks.append(mask)
        else:
            masks.append(None)
        hidden.append(h)
        a = h
    trace = ForwardTrace(x, pre, hidden, masks, mode)
    return pre[-1], trace


def softmax(logits) -> np.ndarray:
    """Row-wise softmax with max subtraction."""
    z = _as_batch(logits)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def backward(model: MlpModel, trace: ForwardTrace, d_logits) -> Gradients:
    """Backpropagate a logit gradient through the traced forward pass."""
    n_layers = len(model.weights)
    dz = np.asarray(d_logits, dtype=np.float64)
    if dz.shape != trace.pre_activations[-1].shape:
        raise ValueError(
            f"d_logits shape {dz.shape} != logits shape "
            f"{trace.pre_activations[-1].shape}"
        )
    grads_w: list[np.ndarray] = [None] * n_layers  # type: ignore[list-item]
    grads_b: list[np.ndarray] = [None] * n_layers  # type: ignore[list-item]
    for l in reversed(range(n_layers)):
        a_prev = trace.layer_input(l)
        grads_w[l] = dz.T @ a_prev
        grads_b[l] = dz.sum(axis=0)
        if l > 0:
            da = dz @ model.weights[l]
            mask = trace.masks[l - 1]
            if mask is not None:
                da = da * mask
            dz = da * (trace.pre_activations[l - 1] > 0.0)
    return Gradients(grads_w, grads_b)


def sgd_step(model: MlpModel, grads: Gradients, state: OptimizerState) -> None:
    """One in-place SGD-momentum update. Aborts (no mutation) on non-finite grads."""
    if len(grads.weights) != len(model.weights):
        raise ValueError("gradient/model layer count mismatch")
    for gw, gb, w, b in zip(grads.weights, grads.biases, model.weights, model.biases):
        if gw.shape != w.shape or gb.shape != b.shape:
            raise ValueError("gradient/parameter shape mismatch")
        if not (np.all(np.isfinite(gw)) and np.all(np.isfinite(gb))):
            raise DivergenceError("non-finite gradient; step aborted")
    lr, mu, wd = state.learning_rate, state.momentum, state.weight_decay
    for w, gw, vw in zip(model.weights, grads.weights, state.velocity_w):
        vw *= mu
        vw += gw + wd * w
        w -= lr * vw
    for b, gb, vb in zip(model.biases, grads.biases, state.velocity_b):
        vb *= mu
        vb += gb + wd * b
        b -= lr * vb


def save_model(model: MlpModel, path) -> None:
    doc = {
        "format_version": MODEL_FORMAT_VERSION,
        "layer_dims": list(model.layer_dims),
        "dropout_rate": model.dropout_rate,
        "weights": [w.tolist() for w in model.weights],
        "biases": [b.tolist() for b in model.biases],
    }
    with open(path, "w") as fh:
        json.dump(doc, fh)
        fh.write("\n")


def load_model(path) -> MlpModel:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ModelFileError(f"cannot read model file {path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise ModelFileError(f"model file {path} is not a JSON object")
    version = doc.get("format_version")
    if version != MODEL_FORMAT_VERSION:
        raise ModelFileError(
            f"unsupported model format_version {version!r} "
            f"(expected {MODEL_FORMAT_VERSION})"
        )
    missing = {"layer_dims", "dropout_rate", "weights", "biases"} - doc.keys()
    if missing:
        raise ModelFileError(f"model file {path} missing fields: {sorted(missing)}")
    try:
        return MlpModel(
            layer_dims=list(doc["layer_dims"]),
            weights=[np.asarray(w, dtype=np.float64) for w in doc["weights"]],
            biases=[np.asarray(b, dtype=np.float64) for b in doc["biases"]],
            dropout_rate=float(doc["dropout_rate"]),
        )
    except (TypeError, ValueError) as exc:
        raise ModelFileError(f"inconsistent model file {path}: {exc}") from exc
