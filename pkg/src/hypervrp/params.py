"""Parameter registry, initialization, Adam, and checkpoint files.

Parameters live in a flat :class:`ParameterStore` keyed by dotted names.
Each entry belongs to one of three groups:

* ``"rl"``  — everything trained by the policy-gradient step,
* ``"hg"``  — the hyperedge selection/projection matrices, stepped once
  per epoch by their own optimizer,
* ``"stats"`` — non-trainable buffers (batch-norm running statistics).

The checkpoint container is a single binary file: magic ``HVRP1``, a
JSON manifest (tensor names, shapes, groups, byte offsets, plus a free-
form ``extra`` dict), then one little-endian float64 blob.  Round trips
are bit-exact.
"""
from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass, field

import numpy as np

from .autodiff import RunningStats, Tensor
from .errors import CheckpointFormatError

__all__ = [
    "GROUPS", "ParameterStore",
    "xavier_init", "xavier_fill",
    "AdamState", "adam_step",
    "save_checkpoint", "load_checkpoint",
]

GROUPS = ("rl", "hg", "stats")

_MAGIC = b"HVRP1\n"


class ParameterStore:
    """Ordered, grouped registry of named tensors.

    Insertion order is deterministic (model builders add parameters in a
    fixed sequence), which fixes the iteration order everywhere: Adam
    updates, gradient harvesting, and checkpoint layout.
    """

    def __init__(self):
        self._entries: dict[str, tuple[Tensor, str]] = {}

    def add(self, name: str, value: np.ndarray | Tensor, group: str) -> Tensor:
        if group not in GROUPS:
            raise ValueError(f"unknown group {group!r}, expected one of {GROUPS}")
        if name in self._entries:
            raise ValueError(f"duplicate parameter name {name!r}")
        tensor = value if isinstance(value, Tensor) else Tensor(value)
        tensor.requires_grad = group != "stats"
        self._entries[name] = (tensor, group)
        return tensor

    def tensor(self, name: str) -> Tensor:
        return self._entries[name][0]

    def group_of(self, name: str) -> str:
        return self._entries[name][1]

    def names(self, group: str | None = None) -> list[str]:
        return [n for n, (_, g) in self._entries.items()
                if group is None or g == group]

    def named_tensors(self, group: str | None = None) -> list[tuple[str, Tensor]]:
        return [(n, t) for n, (t, g) in self._entries.items()
                if group is None or g == group]

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def zero_grads(self) -> None:
        for t, _ in self._entries.values():
            t.grad = None

    def gradients(self, group: str | None = None) -> dict[str, np.ndarray]:
        """Harvest non-None gradients (copies) for a group."""
        out: dict[str, np.ndarray] = {}
        for name, (t, g) in self._entries.items():
            if group is not None and g != group:
                continue
            if t.grad is not None:
                out[name] = t.grad.copy()
        return out

    def values(self, group: str | None = None) -> dict[str, np.ndarray]:
        """Copies of current parameter values."""
        return {n: t.data.copy() for n, t in self.named_tensors(group)}

    def load_values(self, values: dict[str, np.ndarray], strict: bool = True) -> None:
        for name, arr in values.items():
            if name not in self._entries:
                if strict:
                    raise KeyError(f"unknown parameter {name!r}")
                continue
            t = self._entries[name][0]
            if t.data.shape != arr.shape:
                raise CheckpointFormatError(
                    f"parameter {name!r}: stored shape {arr.shape} "
                    f"!= model shape {t.data.shape}")
            t.data = np.array(arr, dtype=np.float64)

    def copy_values_from(self, other: "ParameterStore") -> None:
        """Overwrite every entry with the same-named entry of ``other``."""
        if set(self._entries) != set(other._entries):
            raise ValueError("parameter stores have different entries")
        for name in self._entries:
            self._entries[name][0].data = other.tensor(name).data.copy()


# ---------------------------------------------------------------------------
# Initialization
# ---------------------------------------------------------------------------

def _xavier_bound(shape: tuple[int, ...]) -> float:
    if len(shape) == 2:
        fan_out, fan_in = shape
    elif len(shape) == 1:
        fan_out, fan_in = shape[0], 1
    else:
        raise ValueError(f"xavier init supports 1-D/2-D shapes, got {shape}")
    return float(np.sqrt(6.0 / (fan_in + fan_out)))


def xavier_fill(shape: tuple[int, ...], rng: np.random.Generator) -> np.ndarray:
    """Xavier/Glorot uniform draw from an existing generator.

    The bound ``sqrt(6 / (fan_in + fan_out))`` is symmetric in the two
    axes of a 2-D shape, so weight orientation does not matter; 1-D
    vectors use fan_in 1.
    """
    bound = _xavier_bound(tuple(shape))
    return rng.uniform(-bound, bound, size=shape)


def xavier_init(shape: tuple[int, ...], seed: int) -> np.ndarray:
    """Deterministic Xavier/Glorot uniform initialization."""
    return xavier_fill(shape, np.random.default_rng(seed))


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    """Adam first/second-moment buffers plus the shared step counter."""

    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(store: ParameterStore, grads: dict[str, np.ndarray],
              state: AdamState, lr: float) -> None:
    """One Adam update over exactly the parameters named in ``grads``.

    Parameters absent from ``grads`` are untouched bit for bit, which is
    what isolates the per-batch policy updates from the once-per-epoch
    hyperedge update.  Unknown names and ``stats`` buffers are rejected.
    """
    for name in grads:
        if name not in store:
            raise ValueError(f"gradient for unknown parameter {name!r}")
        if store.group_of(name) == "stats":
            raise ValueError(f"cannot optimize stats buffer {name!r}")
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name, g in grads.items():
        p = store.tensor(name)
        if g.shape != p.data.shape:
            raise ValueError(
                f"gradient shape {g.shape} != parameter shape {p.data.shape} "
                f"for {name!r}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * (g * g)
        state.m[name] = m
        state.v[name] = v
        m_hat = m / bc1
        v_hat = v / bc2
        p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + state.eps)


def clip_gradients(grads: dict[str, np.ndarray],
                   max_norm: float) -> dict[str, np.ndarray]:
    """Rescale a gradient dict so its joint L2 norm is at most ``max_norm``.

    Policy-gradient advantages are heavy-tailed: a batch with a few
    catastrophically bad samples can yield a step orders of magnitude
    larger than its neighbors and knock the policy off a good region.
    Capping the joint norm bounds the step without biasing its direction.
    Stateless and deterministic, so checkpoint resume is unaffected.
    """
    total_sq = 0.0
    for g in grads.values():
        total_sq += float(np.sum(g * g))
    total = np.sqrt(total_sq)
    if total <= max_norm:
        return grads
    scale = max_norm / total
    return {name: g * scale for name, g in grads.items()}


# ---------------------------------------------------------------------------
# Checkpoint container
# ---------------------------------------------------------------------------

def save_checkpoint(path: str, tensors: dict[str, tuple[np.ndarray, str]],
                    extra: dict | None = None) -> None:
    """Write a checkpoint file.

    ``tensors`` maps name -> (array, group).  ``extra`` must be JSON
    serializable (config echo, epoch counters, RNG states).  The write
    is atomic (temp file + rename).
    """
    manifest_tensors = []
    blob_parts: list[bytes] = []
    offset = 0
    for name, (arr, group) in tensors.items():
        a = np.ascontiguousarray(arr, dtype=np.float64)
        raw = a.astype("<f8", copy=False).tobytes()
        manifest_tensors.append({
            "name": name,
            "shape": list(a.shape),
            "group": group,
            "offset": offset,
        })
        blob_parts.append(raw)
        offset += len(raw)
    manifest = {
        "format": "HVRP1",
        "tensors": manifest_tensors,
        "extra": extra or {},
    }
    payload = json.dumps(manifest).encode("utf-8")
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".ckpt-", suffix="~")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(_MAGIC)
            fh.write(struct.pack("<Q", len(payload)))
            fh.write(payload)
            for part in blob_parts:
                fh.write(part)
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise


def load_checkpoint(path: str) -> tuple[dict[str, tuple[np.ndarray, str]], dict]:
    """Read a checkpoint file back into ``(tensors, extra)``.

    Raises :class:`CheckpointFormatError` on a bad magic/version or a
    truncated/inconsistent layout.
    """
    with open(path, "rb") as fh:
        blob = fh.read()
    if not blob.startswith(_MAGIC):
        raise CheckpointFormatError(
            f"{path}: not a HVRP1 checkpoint (bad magic {blob[:6]!r})")
    header_end = len(_MAGIC) + 8
    if len(blob) < header_end:
        raise CheckpointFormatError(f"{path}: truncated header")
    (manifest_len,) = struct.unpack("<Q", blob[len(_MAGIC):header_end])
    manifest_end = header_end + manifest_len
    if len(blob) < manifest_end:
        raise CheckpointFormatError(f"{path}: truncated manifest")
    try:
        manifest = json.loads(blob[header_end:manifest_end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"{path}: bad manifest: {exc}") from None
    if manifest.get("format") != "HVRP1":
        raise CheckpointFormatError(
            f"{path}: unsupported format {manifest.get('format')!r}")
    data = blob[manifest_end:]
    tensors: dict[str, tuple[np.ndarray, str]] = {}
    for entry in manifest["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        end = start + 8 * count
        if end > len(data):
            raise CheckpointFormatError(
                f"{path}: tensor {entry['name']!r} extends past end of file")
        arr = np.frombuffer(data[start:end], dtype="<f8").reshape(shape).copy()
        tensors[entry["name"]] = (arr, entry["group"])
    return tensors, manifest.get("extra", {})


def stats_arrays(prefix: str, running: RunningStats) -> dict[str, tuple[np.ndarray, str]]:
    """Checkpoint entries for one RunningStats buffer pair."""
    return {
        f"{prefix}.mean": (running.mean, "stats"),
        f"{prefix}.var": (running.var, "stats"),
    }
