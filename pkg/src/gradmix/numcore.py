"""Deterministic flat-vector numerics and seeded RNG substreams.

Everything here is 64-bit float with fixed accumulation order so that two
runs of the same code produce bit-identical results. The training loop and
the trajectory-equivalence tests rely on that.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Union

import numpy as np

# Named substreams of a run's RNG. Each is seeded independently from the
# master seed, so consuming one never advances another.
SUBSTREAM_IDS = ("init", "shuffle", "lang_pick", "surgery_p", "shot_sample", "synth_data")


class ContractViolation(ValueError):
    """An operation was called outside its stated preconditions."""


VectorLike = Union["ParamVec", Sequence[float], np.ndarray]


@dataclass(frozen=True, eq=False)
class ParamVec:
    """Immutable 1-D float64 vector holding model parameters or a gradient."""

    values: np.ndarray

    def __post_init__(self) -> None:
        arr = np.array(self.values, dtype=np.float64, copy=True).reshape(-1)
        if arr.size == 0:
            raise ContractViolation("ParamVec must be non-empty")
        if not np.all(np.isfinite(arr)):
            bad = int(np.flatnonzero(~np.isfinite(arr))[0])
            raise ContractViolation(f"non-finite entry at index {bad}")
        arr.setflags(write=False)
        object.__setattr__(self, "values", arr)

    @property
    def dim(self) -> int:
        return int(self.values.shape[0])

    def tobytes(self) -> bytes:
        return self.values.tobytes()

    def bitwise_equal(self, other: "ParamVec") -> bool:
        return self.dim == other.dim and self.tobytes() == other.tobytes()

    def __repr__(self) -> str:  # keep test failure output short
        head = ", ".join(repr(v) for v in self.values[:4].tolist())
        tail = ", ..." if self.dim > 4 else ""
        return f"ParamVec([{head}{tail}], dim={self.dim})"


def as_paramvec(v: VectorLike) -> ParamVec:
    return v if isinstance(v, ParamVec) else ParamVec(np.asarray(v, dtype=np.float64))


def _check_dims(a: ParamVec, b: ParamVec) -> None:
    if a.dim != b.dim:
        raise ContractViolation(f"dimension mismatch: {a.dim} != {b.dim}")


def dot(a: ParamVec, b: ParamVec) -> float:
    """Inner product with strict sequential left-to-right f64 accumulation.

    Deliberately not BLAS: the accumulation order is part of the contract,
    which keeps the result independent of library reduction strategies.
    """
    _check_dims(a, b)
    acc = 0.0
    for x, y in zip(a.values.tolist(), b.values.tolist()):
        acc += x * y
    return acc


def norm(a: ParamVec) -> float:
    return math.sqrt(dot(a, a))


def cosine_similarity(a: ParamVec, b: ParamVec) -> Optional[float]:
    """Cosine of the angle between a and b, clamped to [-1, 1].

    Returns None ("missing") when either vector has zero norm; callers
    serialize that as an explicit null rather than letting NaN propagate.
    """
    _check_dims(a, b)
    na = norm(a)
    nb = norm(b)
    if na == 0.0 or nb == 0.0:
        return None
    if a.tobytes() == b.tobytes():
        return 1.0  # identical content is exactly parallel; avoid rounding to 1-ulp
    c = dot(a, b) / (na * nb)
    return min(1.0, max(-1.0, c))


def finite_diff_grad(
    loss_fn: Callable[[ParamVec], float],
    theta: ParamVec,
    h: Optional[float] = None,
) -> ParamVec:
    """Central-difference gradient of a scalar field, the test oracle for
    analytic gradients.

    With h=None the step is 1e-5 * max(1, |theta_i|) per coordinate, a
    standard balance of truncation against f64 round-off.
    """
    if h is not None and h <= 0.0:
        raise ContractViolation(f"h must be positive, got {h}")
    base = theta.values
    grad = np.empty(theta.dim, dtype=np.float64)
    for i in range(theta.dim):
        step = h if h is not None else 1e-5 * max(1.0, abs(float(base[i])))
        plus = base.copy()
        minus = base.copy()
        plus[i] += step
        minus[i] -= step
        lp = float(loss_fn(ParamVec(plus)))
        lm = float(loss_fn(ParamVec(minus)))
        if not (math.isfinite(lp) and math.isfinite(lm)):
            raise ContractViolation(f"non-finite loss probing coordinate {i}")
        grad[i] = (lp - lm) / (2.0 * step)
    return ParamVec(grad)


def _label_spawn_key(label: str) -> tuple[int, ...]:
    digest = hashlib.sha256(label.encode("utf-8")).digest()
    return tuple(int.from_bytes(digest[i : i + 4], "big") for i in range(0, 16, 4))


class RngStreams:
    """Independent named random substreams derived from one master seed.

    Each named substream is its own PCG64 generator, so drawing from one
    never changes what another will produce. `derived` mints additional
    generators under a substream namespace (per language, per epoch, ...)
    that are a pure function of (master_seed, substream, label); they make
    shot selection and shuffles independent of call order.
    """

    def __init__(self, master_seed: int):
        if master_seed < 0:
            raise ContractViolation("master_seed must be a non-negative integer")
        self.master_seed = int(master_seed)
        for idx, name in enumerate(SUBSTREAM_IDS):
            seq = np.random.SeedSequence(entropy=self.master_seed, spawn_key=(idx,))
            setattr(self, name, np.random.Generator(np.random.PCG64(seq)))

    # Declarations so attribute access is discoverable; real generators are
    # installed in __init__.
    init: np.random.Generator
    shuffle: np.random.Generator
    lang_pick: np.random.Generator
    surgery_p: np.random.Generator
    shot_sample: np.random.Generator
    synth_data: np.random.Generator

    def derived(self, substream: str, label: str) -> np.random.Generator:
        if substream not in SUBSTREAM_IDS:
            raise ContractViolation(f"unknown substream {substream!r}")
        idx = SUBSTREAM_IDS.index(substream)
        seq = np.random.SeedSequence(
            entropy=self.master_seed, spawn_key=(idx, 1) + _label_spawn_key(label)
        )
        return np.random.Generator(np.random.PCG64(seq))
