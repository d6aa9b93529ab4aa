"""Dense numerics kernel: initializers, normalization/activation primitives with
their backward passes, Adam with linear learning-rate decay, a finite-difference
gradient checker and the binary tensor container used for every artifact."""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping

import numpy as np

_log = logging.getLogger(__name__)

DTYPE = np.float32
SeededRng = np.random.Generator

MAGIC = b"SCCF"
FORMAT_VERSION = 1


class ConfigurationError(ValueError):
    """Invalid user-supplied configuration or shape."""


def seeded_rng(seed: int) -> SeededRng:
    """PCG64 generator; identical seeds give identical streams on every platform."""
    return np.random.Generator(np.random.PCG64(np.uint64(seed)))


def truncated_normal_init(shape, low: float = -0.01, high: float = 0.01,
                          rng: SeededRng | None = None, std: float | None = None,
                          dtype=DTYPE) -> np.ndarray:
    """Draw from N(0, std) and redraw every element that falls outside [low, high].

    ``std`` defaults to (high - low) / 4, i.e. the bounds sit at two standard
    deviations as in the usual truncated-normal initializer.
    """
    shape = tuple(int(s) for s in np.atleast_1d(shape))
    if any(s <= 0 for s in shape):
        raise ConfigurationError(f"invalid shape {shape}: all dimensions must be positive")
    if not low < high:
        raise ConfigurationError(f"low ({low}) must be < high ({high})")
    if rng is None:
        rng = seeded_rng(0)
    if std is None:
        std = (high - low) / 4.0
    mean = 0.5 * (low + high)
    out = rng.normal(mean, std, size=shape)
    bad = (out < low) | (out > high)
    while bad.any():
        out[bad] = rng.normal(mean, std, size=int(bad.sum()))
        bad = (out < low) | (out > high)
    return out.astype(dtype)


def dropout_mask(shape, rate: float, rng: SeededRng, training: bool, dtype=DTYPE) -> np.ndarray:
    """Inverted-dropout keep mask scaled by 1/(1-rate); all ones outside training."""
    if not 0.0 <= rate < 1.0:
        raise ConfigurationError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return np.ones(shape, dtype=dtype)
    keep = rng.random(shape) >= rate
    return keep.astype(dtype) / np.dtype(dtype).type(1.0 - rate)


def softmax_rows(t: np.ndarray) -> np.ndarray:
    """Softmax over the last axis with per-row max subtraction.

    Rows that are entirely ``-inf`` produce zeros rather than NaN.
    """
    t = np.asarray(t)
    mx = np.max(t, axis=-1, keepdims=True)
    mx = np.where(np.isfinite(mx), mx, 0.0)
    e = np.exp(t - mx)
    s = np.sum(e, axis=-1, keepdims=True, dtype=np.float64)
    s = np.where(s > 0, s, 1.0)
    return (e / s).astype(t.dtype if np.issubdtype(t.dtype, np.floating) else np.float64)


def softmax_rows_backward(probs: np.ndarray, dout: np.ndarray) -> np.ndarray:
    inner = np.sum(dout * probs, axis=-1, keepdims=True)
    return probs * (dout - inner)


def layer_norm(x: np.ndarray, gain: np.ndarray, bias: np.ndarray, eps: float = 1e-8):
    """Normalize over the last axis; returns (output, cache for layer_norm_backward)."""
    mu = np.mean(x, axis=-1, keepdims=True, dtype=np.float64)
    xc = x - mu.astype(x.dtype)
    var = np.mean(np.square(xc), axis=-1, keepdims=True, dtype=np.float64)
    inv = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = xc * inv
    return xhat * gain + bias, (xhat, inv, gain)


def layer_norm_backward(dout: np.ndarray, cache):
    """Returns (dx, dgain, dbias) with dgain/dbias summed over all leading axes."""
    xhat, inv, gain = cache
    d = xhat.shape[-1]
    lead = tuple(range(dout.ndim - 1))
    dgain = np.sum(dout * xhat, axis=lead)
    dbias = np.sum(dout, axis=lead)
    dxhat = dout * gain
    dx = (inv / d) * (d * dxhat
                      - np.sum(dxhat, axis=-1, keepdims=True)
                      - xhat * np.sum(dxhat * xhat, axis=-1, keepdims=True))
    return dx, dgain, dbias


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def log_sigmoid(x):
    """log(sigmoid(x)) without overflow for large |x|."""
    return -np.logaddexp(0.0, -x)


@dataclass
class ParameterStore:
    entries: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    adam_m: dict[str, np.ndarray] = field(default_factory=dict)
    adam_v: dict[str, np.ndarray] = field(default_factory=dict)

    def add(self, name: str, value: np.ndarray) -> np.ndarray:
        self.entries[name] = value
        self.adam_m[name] = np.zeros_like(value)
        self.adam_v[name] = np.zeros_like(value)
        return value

    def __getitem__(self, name: str) -> np.ndarray:
        return self.entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self.entries

    def names(self) -> list[str]:
        return list(self.entries)

    def n_params(self) -> int:
        return sum(v.size for v in self.entries.values())

    def astype(self, dtype) -> "ParameterStore":
        """Deep copy with every tensor cast; used to run gradient checks in float64."""
        return ParameterStore(
            {k: v.astype(dtype) for k, v in self.entries.items()},
            self.step,
            {k: v.astype(dtype) for k, v in self.adam_m.items()},
            {k: v.astype(dtype) for k, v in self.adam_v.items()},
        )

    def copy(self) -> "ParameterStore":
        return ParameterStore(
            {k: v.copy() for k, v in self.entries.items()},
            self.step,
            {k: v.copy() for k, v in self.adam_m.items()},
            {k: v.copy() for k, v in self.adam_v.items()},
        )

    def l2_norm_sq(self) -> float:
        return float(sum(np.sum(np.square(v, dtype=np.float64)) for v in self.entries.values()))


@dataclass
class DecaySchedule:
    """Linear decay lr * max(0, 1 - step/total_steps); disabled when total_steps is None."""

    total_steps: int | None = None

    def factor(self, step: int) -> float:
        if not self.total_steps:
            return 1.0
        return max(0.0, 1.0 - step / self.total_steps)


@dataclass
class AdamConfig:
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    l2: float = 0.0


def adam_step(store: ParameterStore, grads: Mapping[str, np.ndarray], base_lr: float = 0.001,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
              decay: DecaySchedule | None = None) -> ParameterStore:
    """One bias-corrected Adam update in place. Parameters without a gradient are untouched."""
    unknown = set(grads) - set(store.entries)
    if unknown:
        raise KeyError(f"gradients for unknown parameters: {sorted(unknown)}")
    lr = base_lr * (decay.factor(store.step) if decay is not None else 1.0)
    t = store.step + 1
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name in sorted(grads):
        g = grads[name]
        p = store.entries[name]
        if g.shape != p.shape:
            raise AssertionError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name}")
        m = store.adam_m[name]
        v = store.adam_v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * np.square(g)
        if lr > 0.0:
            p -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype)
    store.step = t
    return store


def add_l2(store: ParameterStore, grads: dict[str, np.ndarray], l2: float) -> float:
    """Add the gradient of l2 * ||theta||^2 into ``grads``; returns the penalty value."""
    if l2 <= 0.0:
        return 0.0
    for name, p in store.entries.items():
        g = grads.get(name)
        grads[name] = 2.0 * l2 * p if g is None else g + 2.0 * l2 * p
    return l2 * store.l2_norm_sq()


@dataclass
class GradCheckReport:
    max_rel_error: float
    passed: bool
    n_checked: int
    failures: list[str]


def finite_diff_check(loss_fn: Callable[[ParameterStore], float], store: ParameterStore,
                      analytic_grads: Mapping[str, np.ndarray], h: float = 1e-3,
                      tol: float = 1e-3, n_coords: int = 100,
                      rng: SeededRng | None = None) -> GradCheckReport:
    """Compare analytic gradients to central differences on a random coordinate subset.

    A coordinate passes when |fd - g| <= tol * (1 + |g|). ``loss_fn`` must be
    deterministic; the store is perturbed in place and restored.
    """
    rng = rng if rng is not None else seeded_rng(1234)
    coords = [(name, i) for name in store.names() for i in range(store[name].size)]
    if len(coords) > n_coords:
        pick = rng.choice(len(coords), size=n_coords, replace=False)
        coords = [coords[i] for i in sorted(pick)]
    worst = 0.0
    failures: set[str] = set()
    for name, i in coords:
        flat = store[name].reshape(-1)
        orig = flat[i].copy()
        flat[i] = orig + h
        up = loss_fn(store)
        flat[i] = orig - h
        down = loss_fn(store)
        flat[i] = orig
        fd = (up - down) / (2.0 * h)
        g = analytic_grads[name].reshape(-1)[i] if name in analytic_grads else 0.0
        err = abs(fd - g) / (1.0 + abs(g))
        worst = max(worst, float(err))
        if err > tol:
            failures.add(name)
    if failures:
        _log.warning("gradient check failed for %s (max rel err %.3g)", sorted(failures), worst)
    return GradCheckReport(worst, not failures, len(coords), sorted(failures))


# --- tensor container -------------------------------------------------------
#
# magic "SCCF" | u32 version | u32 n_tensors | tensors | u32 n_string_lists |
# string lists | u64 step.  Tensor: u32 name_len, utf-8 name, u32 rank,
# u32 dims[rank], f32 little-endian payload.  String list: u32 name_len, name,
# u32 count, then count x (u32 len, utf-8 bytes).


def _write_str(f, s: str) -> None:
    b = s.encode("utf-8")
    f.write(struct.pack("<I", len(b)))
    f.write(b)


def _read_exact(f, n: int) -> bytes:
    b = f.read(n)
    if len(b) != n:
        raise ValueError("truncated container file")
    return b


def _read_u32(f) -> int:
    return struct.unpack("<I", _read_exact(f, 4))[0]


def _read_str(f) -> str:
    return _read_exact(f, _read_u32(f)).decode("utf-8")


def save_container(path, tensors: Mapping[str, np.ndarray], step: int = 0,
                   strings: Mapping[str, list[str]] | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", FORMAT_VERSION, len(tensors)))
        for name, arr in tensors.items():
            arr = np.ascontiguousarray(arr, dtype="<f4")
            _write_str(f, name)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes())
        strings = strings or {}
        f.write(struct.pack("<I", len(strings)))
        for name, items in strings.items():
            _write_str(f, name)
            f.write(struct.pack("<I", len(items)))
            for s in items:
                _write_str(f, s)
        f.write(struct.pack("<Q", int(step)))
    tmp.replace(path)


def load_container(path) -> tuple[dict[str, np.ndarray], dict[str, list[str]], int]:
    with open(path, "rb") as f:
        if f.read(4) != MAGIC:
            raise ValueError(f"{path}: not an SCCF container")
        version = _read_u32(f)
        if version != FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported container version {version}")
        tensors: dict[str, np.ndarray] = {}
        for _ in range(_read_u32(f)):
            name = _read_str(f)
            rank = _read_u32(f)
            dims = struct.unpack(f"<{rank}I", _read_exact(f, 4 * rank)) if rank else ()
            n = int(np.prod(dims)) if rank else 1
            data = np.frombuffer(_read_exact(f, 4 * n), dtype="<f4")
            tensors[name] = data.astype(np.float32).reshape(dims)
        strings: dict[str, list[str]] = {}
        for _ in range(_read_u32(f)):
            name = _read_str(f)
            strings[name] = [_read_str(f) for _ in range(_read_u32(f))]
        step = struct.unpack("<Q", _read_exact(f, 8))[0]
    return tensors, strings, step


def save_store(path, store: ParameterStore, strings: Mapping[str, list[str]] | None = None) -> None:
    """Checkpoint a ParameterStore with its Adam moments under ``.m``/``.v`` suffixes."""
    tensors: dict[str, np.ndarray] = {}
    for name, value in store.entries.items():
        tensors[name] = value
        tensors[name + ".m"] = store.adam_m[name]
        tensors[name + ".v"] = store.adam_v[name]
    save_container(path, tensors, store.step, strings)


def load_store(path) -> tuple[ParameterStore, dict[str, list[str]]]:
    tensors, strings, step = load_container(path)
    store = ParameterStore(step=step)
    for name, value in tensors.items():
        if name.endswith(".m") or name.endswith(".v"):
            continue
        store.entries[name] = value
        store.adam_m[name] = tensors.get(name + ".m", np.zeros_like(value))
        store.adam_v[name] = tensors.get(name + ".v", np.zeros_like(value))
    return store, strings
