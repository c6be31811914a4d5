"""Small differentiable models with analytic gradients.

Two families stand in for task heads at desk scale: a softmax classifier
over fixed feature vectors and a per-token MLP tagger over token-feature
sequences. Parameters live in one flat vector so the surgery kernel can
treat gradients uniformly.

Batch losses are computed after sorting examples by their canonical key,
which makes loss and gradient bitwise invariant to batch order.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Tuple, Union

import numpy as np

from .numcore import ContractViolation, ParamVec, RngStreams

FAMILIES = ("softmax_classifier", "mlp_token_tagger")

Features = np.ndarray  # (D,) for classifier, (L, D) for tagger
Labels = Union[int, np.ndarray]  # int for classifier, (L,) for tagger


@dataclass(frozen=True)
class ModelSpec:
    family: str
    input_dim: int
    hidden_dim: int  # 0 means linear
    num_classes: int

    def __post_init__(self) -> None:
        if self.family not in FAMILIES:
            raise ContractViolation(f"unknown family {self.family!r}")
        if self.input_dim < 1:
            raise ContractViolation("input_dim must be positive")
        if self.hidden_dim < 0:
            raise ContractViolation("hidden_dim must be non-negative")
        if self.num_classes < 2:
            raise ContractViolation("num_classes must be at least 2")

    @property
    def param_dim(self) -> int:
        d, h, c = self.input_dim, self.hidden_dim, self.num_classes
        if h == 0:
            return c * d + c
        return h * d + h + c * h + c

    def to_dict(self) -> dict:
        return {
            "family": self.family,
            "input_dim": self.input_dim,
            "hidden_dim": self.hidden_dim,
            "num_classes": self.num_classes,
        }

    @staticmethod
    def from_dict(d: dict) -> "ModelSpec":
        return ModelSpec(
            family=d["family"],
            input_dim=int(d["input_dim"]),
            hidden_dim=int(d["hidden_dim"]),
            num_classes=int(d["num_classes"]),
        )


@dataclass(frozen=True)
class ModelState:
    spec: ModelSpec
    theta: ParamVec

    def __post_init__(self) -> None:
        if self.theta.dim != self.spec.param_dim:
            raise ContractViolation(
                f"theta has dim {self.theta.dim}, spec needs {self.spec.param_dim}"
            )


@dataclass(frozen=True)
class GradReport:
    loss: float
    grad: ParamVec


@dataclass(frozen=True)
class Batch:
    """A multiset of identified examples.

    `keys` are canonical ids (pool indices); two batches holding the same
    (key, example) pairs in any order produce bitwise-identical losses.
    """

    xs: Tuple[Features, ...]
    ys: Tuple[Labels, ...]
    keys: Tuple[int, ...]

    def __len__(self) -> int:
        return len(self.xs)


def make_batch(
    examples: Sequence[Tuple[Features, Labels]], keys: Optional[Sequence[int]] = None
) -> Batch:
    if keys is None:
        keys = range(len(examples))
    xs = tuple(np.asarray(x, dtype=np.float64) for x, _ in examples)
    ys = tuple(y for _, y in examples)
    return Batch(xs=xs, ys=ys, keys=tuple(int(k) for k in keys))


def init_params(spec: ModelSpec, rng: RngStreams) -> ModelState:
    """Uniform weights in [-s, s] with s = 1/sqrt(fan_in), zero biases.

    Drawn from the `init` substream only, so consuming other substreams
    never perturbs initialization.
    """
    gen = rng.init
    d, h, c = spec.input_dim, spec.hidden_dim, spec.num_classes
    parts = []
    if h == 0:
        s = 1.0 / math.sqrt(d)
        parts.append(gen.uniform(-s, s, size=c * d))
        parts.append(np.zeros(c))
    else:
        s1 = 1.0 / math.sqrt(d)
        parts.append(gen.uniform(-s1, s1, size=h * d))
        parts.append(np.zeros(h))
        s2 = 1.0 / math.sqrt(h)
        parts.append(gen.uniform(-s2, s2, size=c * h))
        parts.append(np.zeros(c))
    return ModelState(spec=spec, theta=ParamVec(np.concatenate(parts)))


def _unpack(spec: ModelSpec, theta: ParamVec):
    """Read-only weight views into the flat parameter vector."""
    d, h, c = spec.input_dim, spec.hidden_dim, spec.num_classes
    v = theta.values
    if h == 0:
        W = v[: c * d].reshape(c, d)
        b = v[c * d : c * d + c]
        return (W, b)
    o = 0
    W1 = v[o : o + h * d].reshape(h, d)
    o += h * d
    b1 = v[o : o + h]
    o += h
    W2 = v[o : o + c * h].reshape(c, h)
    o += c * h
    b2 = v[o : o + c]
    return (W1, b1, W2, b2)


def _logits(spec: ModelSpec, theta: ParamVec, X: np.ndarray) -> np.ndarray:
    weights = _unpack(spec, theta)
    if spec.hidden_dim == 0:
        W, b = weights
        return X @ W.T + b
    W1, b1, W2, b2 = weights
    return np.tanh(X @ W1.T + b1) @ W2.T + b2


def _softmax(Z: np.ndarray) -> np.ndarray:
    Zs = Z - Z.max(axis=1, keepdims=True)
    E = np.exp(Zs)
    return E / E.sum(axis=1, keepdims=True)


def _sorted_rows(state: ModelState, batch: Batch):
    """Validate the batch and return feature/label matrices in canonical
    (key-sorted) order, flattening token sequences for the tagger."""
    spec = state.spec
    if len(batch) == 0:
        raise ContractViolation("empty batch")
    order = sorted(range(len(batch)), key=lambda i: (batch.keys[i], i))
    if spec.family == "softmax_classifier":
        X = np.empty((len(batch), spec.input_dim), dtype=np.float64)
        y = np.empty(len(batch), dtype=np.int64)
        for row, i in enumerate(order):
            x = np.asarray(batch.xs[i], dtype=np.float64)
            if x.shape != (spec.input_dim,):
                raise ContractViolation(
                    f"example {batch.keys[i]}: features shape {x.shape}, "
                    f"expected ({spec.input_dim},)"
                )
            X[row] = x
            y[row] = int(batch.ys[i])
        seq_lens = None
    else:
        mats, labs, lens = [], [], []
        for i in order:
            x = np.asarray(batch.xs[i], dtype=np.float64)
            t = np.asarray(batch.ys[i], dtype=np.int64).reshape(-1)
            if x.ndim != 2 or x.shape[1] != spec.input_dim:
                raise ContractViolation(
                    f"example {batch.keys[i]}: token features must be "
                    f"(L, {spec.input_dim}), got {x.shape}"
                )
            if x.shape[0] != t.shape[0]:
                raise ContractViolation(
                    f"example {batch.keys[i]}: {x.shape[0]} tokens vs {t.shape[0]} tags"
                )
            mats.append(x)
            labs.append(t)
            lens.append(x.shape[0])
        X = np.concatenate(mats, axis=0)
        y = np.concatenate(labs, axis=0)
        seq_lens = lens
    if X.shape[0] == 0:
        raise ContractViolation("batch contains no tokens")
    if y.min() < 0 or y.max() >= spec.num_classes:
        bad = int(y[(y < 0) | (y >= spec.num_classes)][0])
        raise ContractViolation(f"label {bad} out of range [0, {spec.num_classes})")
    return X, y, seq_lens


def loss_and_grad(state: ModelState, batch: Batch) -> GradReport:
    """Mean cross-entropy over the batch (tagger: over all tokens) and its
    analytic gradient, flattened in parameter order."""
    spec = state.spec
    X, y, _ = _sorted_rows(state, batch)
    n = X.shape[0]

    if spec.hidden_dim == 0:
        W, b = _unpack(spec, state.theta)
        Z = X @ W.T + b
    else:
        W1, b1, W2, b2 = _unpack(spec, state.theta)
        A1 = np.tanh(X @ W1.T + b1)
        Z = A1 @ W2.T + b2

    Zmax = Z.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(Z - Zmax).sum(axis=1, keepdims=True)) + Zmax
    loss = float(np.sum(logsumexp[:, 0] - Z[np.arange(n), y]) / n)

    P = np.exp(Z - logsumexp)
    G = P
    G[np.arange(n), y] -= 1.0
    G /= n

    if spec.hidden_dim == 0:
        dW = G.T @ X
        db = G.sum(axis=0)
        grad = np.concatenate([dW.ravel(), db])
    else:
        dW2 = G.T @ A1
        db2 = G.sum(axis=0)
        dZ1 = (G @ W2) * (1.0 - A1 * A1)
        dW1 = dZ1.T @ X
        db1 = dZ1.sum(axis=0)
        grad = np.concatenate([dW1.ravel(), db1, dW2.ravel(), db2])

    if not math.isfinite(loss):
        raise ContractViolation("non-finite loss")
    return GradReport(loss=loss, grad=ParamVec(grad))


def sgd_step(state: ModelState, grad: ParamVec, lr: float) -> ModelState:
    """theta' = theta - lr * grad, elementwise."""
    if grad.dim != state.theta.dim:
        raise ContractViolation(f"grad dim {grad.dim} != theta dim {state.theta.dim}")
    if lr < 0:
        raise ContractViolation("lr must be non-negative")
    return ModelState(spec=state.spec, theta=ParamVec(state.theta.values - lr * grad.values))


def predict_proba(state: ModelState, x: Features) -> np.ndarray:
    """Class probabilities; rows for the tagger, a single row otherwise."""
    X = np.asarray(x, dtype=np.float64)
    single = X.ndim == 1
    if single:
        X = X.reshape(1, -1)
    if X.shape[1] != state.spec.input_dim:
        raise ContractViolation(
            f"features have dim {X.shape[1]}, expected {state.spec.input_dim}"
        )
    P = _softmax(_logits(state.spec, state.theta, X))
    return P[0] if single else P


def predict(state: ModelState, x: Features):
    """Argmax prediction; ties break toward the lowest class index.

    Classifier input is a (D,) vector and yields an int; tagger input is an
    (L, D) sequence and yields one label per token.
    """
    X = np.asarray(x, dtype=np.float64)
    if state.spec.family == "softmax_classifier":
        if X.ndim != 1:
            raise ContractViolation("classifier predict expects a (D,) vector")
        Z = _logits(state.spec, state.theta, X.reshape(1, -1))
        return int(np.argmax(Z[0]))
    if X.ndim != 2:
        raise ContractViolation("tagger predict expects an (L, D) sequence")
    Z = _logits(state.spec, state.theta, X)
    return np.argmax(Z, axis=1)


# --- checkpoint files -------------------------------------------------------
#
# JSON with parameters as decimal-exact strings (repr round-trips f64
# bit-for-bit), so save -> load -> evaluate is bitwise stable.

CHECKPOINT_VERSION = 1


def checkpoint_payload(state: ModelState, epoch: int, strategy: str) -> dict:
    return {
        "format_version": CHECKPOINT_VERSION,
        "kind": "model-checkpoint",
        "spec": state.spec.to_dict(),
        "epoch": int(epoch),
        "strategy": strategy,
        "theta": [repr(float(v)) for v in state.theta.values.tolist()],
    }


def save_checkpoint(state: ModelState, path: Union[str, Path], epoch: int, strategy: str) -> None:
    payload = checkpoint_payload(state, epoch, strategy)
    Path(path).write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")


def load_checkpoint(path: Union[str, Path]) -> Tuple[ModelState, int, str]:
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    if payload.get("format_version") != CHECKPOINT_VERSION:
        raise ContractViolation(f"unsupported checkpoint version in {path}")
    spec = ModelSpec.from_dict(payload["spec"])
    theta = ParamVec(np.array([float(s) for s in payload["theta"]], dtype=np.float64))
    return ModelState(spec=spec, theta=theta), int(payload["epoch"]), payload["strategy"]
