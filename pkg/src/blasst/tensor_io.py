"""Tensor container, the BTSR binary format and seeded synthetic workloads.

File layout (all integers little-endian)::

    offset  size        field
    0       4           magic b"BTSR"
    4       4           version, u32 == 1
    8       1           dtype code, u8 (0 = f32, 1 = f64)
    9       1           rank, u8 (>= 1)
    10      2           reserved, u16 == 0
    12      8 * rank    extents, u64 each
    ...                 row-major little-endian payload

Random numbers come from SplitMix64 used in counter mode: the i-th 64-bit
word of a stream keyed by ``key`` is ``mix64(key + (i + 1) * 0x9E3779B97F4A7C15)``
where ``mix64`` is the SplitMix64 finalizer (shifts 30/27/31, multipliers
0xBF58476D1CE4E5B9 and 0x94D049BB133111EB).  Uniforms take the top 53 bits,
``u = ((w >> 11) + 0.5) * 2**-53``, so ``u`` lies strictly inside (0, 1).
Gaussians use Box-Muller on consecutive uniform pairs.  Every tensor draws
from its own stream, ``key = mix64(seed ^ tag)`` with tags 1 (Q), 2 (K), 3 (V)
and 4 (key importances of the shared_importance distribution).
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import asdict, dataclass, field
from typing import Any

import numpy as np

MAGIC = b"BTSR"
VERSION = 1
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_HEADER = struct.Struct("<4sIBBH")

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_MASK64 = (1 << 64) - 1


class TensorFormatError(ValueError):
    """The bytes on disk are not a valid BTSR tensor."""


class TensorLengthError(TensorFormatError):
    """Payload size disagrees with the declared shape."""


class UnsupportedDtypeError(TensorFormatError):
    pass


class WorkloadSpecError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Tensor:
    """Dense row-major array of f32 or f64 values.

    Thin wrapper over an ndarray; ``np.asarray(t)`` gives the data back.
    """

    data: np.ndarray

    def __post_init__(self) -> None:
        arr = np.asarray(self.data)
        if arr.ndim < 1:
            raise ValueError("tensor rank must be >= 1")
        if any(n < 1 for n in arr.shape):
            raise ValueError(f"tensor extents must be positive, got {arr.shape}")
        if arr.dtype not in _DTYPE_CODES:
            raise ValueError(f"unsupported dtype {arr.dtype}; expected float32 or float64")
        object.__setattr__(self, "data", np.ascontiguousarray(arr))

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def element_count(self) -> int:
        return int(self.data.size)

    def is_finite(self) -> bool:
        return bool(np.isfinite(self.data).all())

    def __array__(self, dtype=None, copy=None):
        if dtype is None:
            return self.data
        return self.data.astype(dtype)

    def __eq__(self, other: object) -> bool:
        # bit equality, so NaN payloads compare equal to themselves
        if not isinstance(other, Tensor):
            return NotImplemented
        return (
            self.dtype == other.dtype
            and self.shape == other.shape
            and self.data.tobytes() == other.data.tobytes()
        )


def write_tensor(t: Tensor | np.ndarray, path: str | os.PathLike) -> None:
    if not isinstance(t, Tensor):
        t = Tensor(np.asarray(t))
    code = _DTYPE_CODES[t.dtype]
    header = _HEADER.pack(MAGIC, VERSION, code, t.data.ndim, 0)
    dims = struct.pack(f"<{t.data.ndim}Q", *t.shape)
    payload = t.data.astype(_CODE_DTYPES[code], copy=False).tobytes(order="C")
    try:
        with open(path, "wb") as fh:
            fh.write(header + dims + payload)
    except OSError as exc:
        raise OSError(f"cannot write tensor to {os.fspath(path)}: {exc.strerror}") from exc


def read_tensor(path: str | os.PathLike) -> Tensor:
    with open(path, "rb") as fh:
        raw = fh.read()
    name = os.fspath(path)
    if len(raw) < _HEADER.size:
        raise TensorLengthError(f"{name}: file too short for a BTSR header ({len(raw)} bytes)")
    magic, version, code, rank, reserved = _HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise TensorFormatError(f"{name}: bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise TensorFormatError(f"{name}: unsupported version {version}")
    if code not in _CODE_DTYPES:
        raise UnsupportedDtypeError(f"{name}: unsupported dtype code {code}")
    if rank < 1:
        raise TensorFormatError(f"{name}: rank must be >= 1")
    dims_end = _HEADER.size + 8 * rank
    if len(raw) < dims_end:
        raise TensorLengthError(f"{name}: truncated extents")
    shape = struct.unpack_from(f"<{rank}Q", raw, _HEADER.size)
    dtype = _CODE_DTYPES[code]
    count = int(np.prod(shape, dtype=np.uint64)) if shape else 0
    payload = raw[dims_end:]
    if len(payload) != count * dtype.itemsize:
        raise TensorLengthError(
            f"{name}: shape {list(shape)} needs {count} elements, "
            f"payload holds {len(payload) / dtype.itemsize:g}"
        )
    data = np.frombuffer(payload, dtype=dtype).reshape(shape)
    return Tensor(data.astype(dtype.newbyteorder("="), copy=True))


def validate_finite(t: Tensor) -> list[str]:
    """Describe non-finite content; an empty list means the tensor is clean."""
    bad = ~np.isfinite(t.data)
    if not bad.any():
        return []
    first = np.unravel_index(int(np.argmax(bad)), t.shape)
    return [f"{int(bad.sum())} non-finite values, first at index {tuple(int(i) for i in first)}"]


# --- PRNG -------------------------------------------------------------------

def mix64(z: np.ndarray) -> np.ndarray:
    z = z.astype(np.uint64, copy=True)
    z ^= z >> np.uint64(30)
    z *= _MIX1
    z ^= z >> np.uint64(27)
    z *= _MIX2
    z ^= z >> np.uint64(31)
    return z


def stream_key(seed: int, tag: int) -> int:
    return int(mix64(np.array([(seed ^ tag) & _MASK64], dtype=np.uint64))[0])


def random_words(key: int, n: int, offset: int = 0) -> np.ndarray:
    counters = np.arange(offset + 1, offset + n + 1, dtype=np.uint64)
    with np.errstate(over="ignore"):
        return mix64(np.uint64(key) + counters * _GOLDEN)


def uniforms(key: int, n: int, offset: int = 0) -> np.ndarray:
    w = random_words(key, n, offset)
    return ((w >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0**-53


def gaussians(key: int, n: int) -> np.ndarray:
    pairs = (n + 1) // 2
    u = uniforms(key, 2 * pairs)
    r = np.sqrt(-2.0 * np.log(u[0::2]))
    theta = 2.0 * np.pi * u[1::2]
    out = np.empty(2 * pairs)
    out[0::2] = r * np.cos(theta)
    out[1::2] = r * np.sin(theta)
    return out[:n]


# --- synthetic workloads ----------------------------------------------------

@dataclass(frozen=True)
class IidGaussian:
    sigma: float = 1.0
    kind: str = field(default="iid_gaussian", init=False)


@dataclass(frozen=True)
class SinkBiased:
    sigma: float = 1.0
    sink_cols: tuple[int, ...] = (0,)
    sink_boost: float = 8.0
    kind: str = field(default="sink_biased", init=False)


@dataclass(frozen=True)
class Needle:
    sigma: float = 1.0
    needle_positions: tuple[int, ...] = ()
    needle_boost: float = 8.0
    kind: str = field(default="needle", init=False)


@dataclass(frozen=True)
class SharedImportance:
    """Keys carry exponential importances along ``num_topics`` shared directions.

    Queries in consecutive runs of ``topic_span`` positions all point along one
    topic (cycling through topics), with weight sqrt(head_dim) so that under the
    default 1/sqrt(d) scale a key's score is its importance plus N(0, σ⁴) noise.
    Heavy (exponential) score tails make the λ ∝ 1/L law hold.
    """

    sigma: float = 0.3
    tail_scale: float = 1.0
    num_topics: int = 32
    topic_span: int = 64
    kind: str = field(default="shared_importance", init=False)


Distribution = IidGaussian | SinkBiased | Needle | SharedImportance
_DISTRIBUTIONS = {
    "iid_gaussian": IidGaussian,
    "sink_biased": SinkBiased,
    "needle": Needle,
    "shared_importance": SharedImportance,
}


@dataclass(frozen=True)
class SyntheticWorkloadSpec:
    seq_len: int
    num_q_heads: int = 1
    num_kv_heads: int = 1
    head_dim: int = 64
    seed: int = 0
    distribution: Distribution = field(default_factory=IidGaussian)

    def __post_init__(self) -> None:
        if self.seq_len < 1 or self.head_dim < 1:
            raise WorkloadSpecError("seq_len and head_dim must be positive")
        if self.num_kv_heads < 1 or self.num_q_heads < 1:
            raise WorkloadSpecError("head counts must be positive")
        if self.num_q_heads % self.num_kv_heads:
            raise WorkloadSpecError(
                f"num_q_heads={self.num_q_heads} is not a multiple of num_kv_heads={self.num_kv_heads}"
            )
        if not 0 <= self.seed <= _MASK64:
            raise WorkloadSpecError("seed must fit in 64 unsigned bits")
        dist = self.distribution
        if isinstance(dist, SharedImportance):
            if not 1 <= dist.num_topics < self.head_dim:
                raise WorkloadSpecError("shared_importance needs 1 <= num_topics < head_dim")
            if dist.topic_span < 1:
                raise WorkloadSpecError("topic_span must be >= 1")

    def with_(self, **changes: Any) -> SyntheticWorkloadSpec:
        fields = {**asdict(self), **changes}
        fields["distribution"] = changes.get("distribution", self.distribution)
        return SyntheticWorkloadSpec(**fields)

    def to_dict(self) -> dict:
        d = asdict(self)
        dist = d["distribution"]
        for k, v in dist.items():
            if isinstance(v, tuple):
                dist[k] = list(v)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> SyntheticWorkloadSpec:
        d = dict(d)
        dist = dict(d.pop("distribution", {"kind": "iid_gaussian"}))
        kind = dist.pop("kind", "iid_gaussian")
        if kind not in _DISTRIBUTIONS:
            raise WorkloadSpecError(f"unknown distribution kind {kind!r}")
        dist = {k: tuple(v) if isinstance(v, list) else v for k, v in dist.items()}
        try:
            return cls(distribution=_DISTRIBUTIONS[kind](**dist), **d)
        except TypeError as exc:
            raise WorkloadSpecError(str(exc)) from exc

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_json(cls, text: str) -> SyntheticWorkloadSpec:
        return cls.from_dict(json.loads(text))


def _boost_positions(q: np.ndarray, k: np.ndarray, positions, boost: float, sigma: float) -> None:
    # Coordinate 0 acts as a shared direction: every query gets a positive
    # component there, so a boost on K[:, pos, 0] raises that key's score for
    # all queries at once.
    q[..., 0] = np.abs(q[..., 0]) + sigma
    for p in positions:
        if not 0 <= p < k.shape[1]:
            raise WorkloadSpecError(f"position {p} outside sequence of length {k.shape[1]}")
        k[:, p, 0] += boost


def generate_workload(spec: SyntheticWorkloadSpec) -> tuple[Tensor, Tensor, Tensor]:
    """Deterministic f32 Q [Hq, L, d] and K, V [Hkv, L, d] for ``spec``."""
    dist = spec.distribution
    qshape = (spec.num_q_heads, spec.seq_len, spec.head_dim)
    kvshape = (spec.num_kv_heads, spec.seq_len, spec.head_dim)
    q, k, v = (
        dist.sigma * gaussians(stream_key(spec.seed, tag), int(np.prod(shape))).reshape(shape)
        for tag, shape in ((1, qshape), (2, kvshape), (3, kvshape))
    )
    if isinstance(dist, SinkBiased):
        _boost_positions(q, k, dist.sink_cols, dist.sink_boost, dist.sigma)
    elif isinstance(dist, Needle):
        _boost_positions(q, k, dist.needle_positions, dist.needle_boost, dist.sigma)
    elif isinstance(dist, SharedImportance):
        t = dist.num_topics
        u = uniforms(stream_key(spec.seed, 4), spec.num_kv_heads * spec.seq_len * t)
        k[..., :t] = -dist.tail_scale * np.log(u).reshape(spec.num_kv_heads, spec.seq_len, t)
        topic = (np.arange(spec.seq_len) // dist.topic_span) % t
        q[..., :t] = 0.0
        q[:, np.arange(spec.seq_len), topic] = np.sqrt(spec.head_dim)
    return tuple(Tensor(x.astype(np.float32)) for x in (q, k, v))
