"""Dense tensor helpers, parameter containers, Adam with normalized gradients
and the checkpoint format.

Tensors are plain ``float64`` numpy arrays. A parameter set is an ordered
``dict`` mapping names to 2-D arrays; ``tau`` (the log-variance of the hub
prior) is stored as a ``(1, 1)`` array so every entry has the same rank.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

DTYPE = np.float64
NORM_FLOOR = 1e-12


class DimensionError(ValueError):
    """Raised when tensor shapes are incompatible."""


class NumericalError(FloatingPointError):
    """Raised when a loss term or activation becomes non-finite."""


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=DTYPE)
    b = np.asarray(b, dtype=DTYPE)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def check_finite(name: str, value) -> None:
    if not np.all(np.isfinite(value)):
        raise NumericalError(f"non-finite value in {name}")


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Architecture:
    """Layer widths of the encoder/decoder MLPs."""

    input_dim: int
    latent_dim: int
    hidden: tuple[int, ...] = (300, 300)

    def __post_init__(self):
        if self.input_dim < 1 or self.latent_dim < 1:
            raise ValueError("input_dim and latent_dim must be positive")
        if any(h < 1 for h in self.hidden):
            raise ValueError("hidden widths must be positive")


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out)).astype(DTYPE)


def init_params(arch: Architecture, rng: np.random.Generator, tau: float = 0.0) -> dict[str, np.ndarray]:
    """Glorot-uniform weights, zero biases, ``tau`` set to the given log-variance."""
    params: dict[str, np.ndarray] = {}
    widths = (arch.input_dim, *arch.hidden)
    for i in range(len(arch.hidden)):
        params[f"enc_W{i}"] = _glorot(rng, widths[i], widths[i + 1])
        params[f"enc_b{i}"] = np.zeros((1, widths[i + 1]), dtype=DTYPE)
    last = widths[-1]
    params["enc_Wmu"] = _glorot(rng, last, arch.latent_dim)
    params["enc_bmu"] = np.zeros((1, arch.latent_dim), dtype=DTYPE)
    params["enc_Wvar"] = _glorot(rng, last, arch.latent_dim)
    params["enc_bvar"] = np.zeros((1, arch.latent_dim), dtype=DTYPE)

    widths = (arch.latent_dim, *arch.hidden)
    for i in range(len(arch.hidden)):
        params[f"dec_W{i}"] = _glorot(rng, widths[i], widths[i + 1])
        params[f"dec_b{i}"] = np.zeros((1, widths[i + 1]), dtype=DTYPE)
    params["dec_Wout"] = _glorot(rng, widths[-1], arch.input_dim)
    params["dec_bout"] = np.zeros((1, arch.input_dim), dtype=DTYPE)
    params["tau"] = np.full((1, 1), tau, dtype=DTYPE)
    return params


def zeros_like_params(params: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {name: np.zeros_like(value) for name, value in params.items()}


def copy_params(params: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {name: value.copy() for name, value in params.items()}


def architecture_of(params: dict[str, np.ndarray]) -> Architecture:
    n_hidden = sum(1 for name in params if name.startswith("enc_W") and name[5:].isdigit())
    hidden = tuple(params[f"enc_W{i}"].shape[1] for i in range(n_hidden))
    return Architecture(
        input_dim=params["dec_Wout"].shape[1],
        latent_dim=params["enc_Wmu"].shape[1],
        hidden=hidden,
    )


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

def normalize_gradients(grads: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    """Rescale each gradient block to unit L2 norm; near-zero blocks become zero."""
    out = {}
    for name, g in grads.items():
        norm = float(np.sqrt(np.sum(g * g)))
        if norm < NORM_FLOOR:
            out[name] = np.zeros_like(g)
        else:
            out[name] = g / norm
    return out


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: dict[str, np.ndarray], **kwargs) -> "AdamState":
        state = cls(**kwargs)
        state.m = zeros_like_params(params)
        state.v = zeros_like_params(params)
        return state


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
    frozen: frozenset[str] = frozenset(),
) -> dict[str, np.ndarray]:
    """One Adam update on block-normalized gradients. Returns new arrays.

    Blocks named in ``frozen`` keep their value (used to pin ``tau``).
    """
    for name, p in params.items():
        if grads[name].shape != p.shape:
            raise DimensionError(f"gradient for {name} has shape {grads[name].shape}, expected {p.shape}")
    g_norm = normalize_gradients(grads)
    state.step += 1
    bc1 = 1.0 - state.beta1 ** state.step
    bc2 = 1.0 - state.beta2 ** state.step
    new_params = {}
    for name, p in params.items():
        g = g_norm[name]
        if name in frozen:
            g = np.zeros_like(g)
        m = state.beta1 * state.m[name] + (1.0 - state.beta1) * g
        v = state.beta2 * state.v[name] + (1.0 - state.beta2) * g * g
        state.m[name] = m
        state.v[name] = v
        m_hat = m / bc1
        v_hat = v / bc2
        new_params[name] = p - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return new_params


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------
#
# Binary layout, all integers little-endian uint32, all reals IEEE float64 LE:
#   magic  b"HUBVAE01"
#   input_dim, latent_dim, n_hidden, hidden[0..n_hidden)
#   tau (float64)
#   n_tensors
#   per tensor: name_len, name (utf-8), rows, cols, rows*cols float64 row-major
#
# ``tau`` is written both in the header and as a regular tensor so a reader
# can recover it without walking the tensor table.

CHECKPOINT_MAGIC = b"HUBVAE01"


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, tensors: dict[str, np.ndarray]) -> None:
    arch = architecture_of(tensors)
    buf = bytearray(CHECKPOINT_MAGIC)
    buf += struct.pack("<III", arch.input_dim, arch.latent_dim, len(arch.hidden))
    buf += struct.pack(f"<{len(arch.hidden)}I", *arch.hidden)
    buf += struct.pack("<d", float(tensors["tau"][0, 0]))
    buf += struct.pack("<I", len(tensors))
    for name, value in tensors.items():
        value = np.ascontiguousarray(value, dtype="<f8")
        if value.ndim != 2:
            raise DimensionError(f"tensor {name} must be 2-D")
        encoded = name.encode("utf-8")
        buf += struct.pack("<I", len(encoded)) + encoded
        buf += struct.pack("<II", *value.shape)
        buf += value.tobytes()
    Path(path).write_bytes(bytes(buf))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    offset = 0

    def take(n: int) -> bytes:
        nonlocal offset
        if offset + n > len(data):
            raise CheckpointError(f"truncated checkpoint at offset {offset}")
        chunk = data[offset:offset + n]
        offset += n
        return chunk

    if take(8) != CHECKPOINT_MAGIC:
        raise CheckpointError("bad checkpoint magic")
    _, _, n_hidden = struct.unpack("<III", take(12))
    struct.unpack(f"<{n_hidden}I", take(4 * n_hidden))
    struct.unpack("<d", take(8))
    (n_tensors,) = struct.unpack("<I", take(4))
    tensors = {}
    for _ in range(n_tensors):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode("utf-8")
        rows, cols = struct.unpack("<II", take(8))
        values = np.frombuffer(take(8 * rows * cols), dtype="<f8")
        tensors[name] = values.reshape(rows, cols).astype(DTYPE)
    if offset != len(data):
        raise CheckpointError(f"trailing bytes after offset {offset}")
    return tensors
