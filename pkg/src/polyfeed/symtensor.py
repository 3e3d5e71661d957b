"""Symmetric multilinear forms over R^n in packed storage.

A symmetric form of order k is stored through its entries on non-decreasing
multi-indices j1 <= ... <= jk, listed in lexicographic order, so a form on
R^n has binom(n+k-1, k) stored numbers. Non-symmetric intermediates are plain
``numpy.ndarray`` objects with one axis per slot (row-major).
"""
from __future__ import annotations

import functools
import itertools
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ValidationError

MAX_ORDER = 8
SYMT_MAGIC = b"SYMT"
SYMT_VERSION = 1


@functools.lru_cache(maxsize=None)
def multi_indices(n: int, k: int) -> np.ndarray:
    """Non-decreasing multi-indices of length k over range(n), lexicographic."""
    idx = np.array(list(itertools.combinations_with_replacement(range(n), k)), dtype=np.intp)
    idx = idx.reshape(-1, k)
    idx.setflags(write=False)
    return idx


@functools.lru_cache(maxsize=None)
def multiplicities(n: int, k: int) -> np.ndarray:
    """Number of distinct permutations of each packed multi-index."""
    out = np.empty(len(multi_indices(n, k)))
    for p, mi in enumerate(multi_indices(n, k)):
        _, counts = np.unique(mi, return_counts=True)
        out[p] = math.factorial(k) / math.prod(math.factorial(c) for c in counts)
    out.setflags(write=False)
    return out


@functools.lru_cache(maxsize=None)
def _flat_codes(n: int, k: int) -> np.ndarray:
    # row-major flat position of every packed multi-index
    if k == 0:
        return np.zeros(1, dtype=np.intp)
    return np.ravel_multi_index(multi_indices(n, k).T, (n,) * k)


@functools.lru_cache(maxsize=None)
def _unpack_map(n: int, k: int) -> np.ndarray:
    # dense flat position -> packed position
    full = np.indices((n,) * k).reshape(k, -1)
    codes = np.ravel_multi_index(np.sort(full, axis=0), (n,) * k)
    out = np.searchsorted(_flat_codes(n, k), codes)
    out.setflags(write=False)
    return out


@functools.lru_cache(maxsize=None)
def packed_position(n: int, k: int) -> dict:
    """Lookup table: sorted multi-index tuple -> packed position."""
    return {tuple(int(v) for v in mi): p for p, mi in enumerate(multi_indices(n, k))}


def packed_size(n: int, k: int) -> int:
    return math.comb(n + k - 1, k)


@dataclass(frozen=True, eq=False)
class SymTensor:
    """Order-k symmetric multilinear form on R^dim, packed storage."""

    order: int
    dim: int
    entries: np.ndarray

    def __post_init__(self):
        if not (1 <= self.order <= MAX_ORDER):
            raise ValidationError(f"order must lie in 1..{MAX_ORDER}, got {self.order}")
        if self.dim < 1:
            raise ValidationError(f"dim must be >= 1, got {self.dim}")
        e = np.array(self.entries, dtype=np.float64).reshape(-1)
        if e.size != packed_size(self.dim, self.order):
            raise ValidationError(
                f"order-{self.order} form on R^{self.dim} needs "
                f"{packed_size(self.dim, self.order)} entries, got {e.size}"
            )
        if not np.all(np.isfinite(e)):
            raise ValidationError("tensor entries must be finite")
        e.setflags(write=False)
        object.__setattr__(self, "entries", e)

    @classmethod
    def zeros(cls, order: int, dim: int) -> "SymTensor":
        return cls(order, dim, np.zeros(packed_size(dim, order)))

    @classmethod
    def from_dense(cls, dense, check: bool = False, atol: float = 0.0) -> "SymTensor":
        """Pack a dense symmetric array.

        Only the entries on sorted multi-indices are read. With ``check=True``
        the array is first verified to be symmetric up to ``atol``.
        """
        dense = np.asarray(dense, dtype=np.float64)
        k = dense.ndim
        n = dense.shape[0] if k else 0
        if k == 0 or any(s != n for s in dense.shape):
            raise ValidationError(f"dense tensor must have uniform axes, got shape {dense.shape}")
        if check:
            for perm in itertools.permutations(range(k)):
                if np.max(np.abs(dense - dense.transpose(perm)), initial=0.0) > atol:
                    raise ValidationError("dense tensor is not symmetric")
        return cls(k, n, dense.reshape(-1)[_flat_codes(n, k)])

    @functools.cached_property
    def dense(self) -> np.ndarray:
        out = self.entries[_unpack_map(self.dim, self.order)].reshape((self.dim,) * self.order)
        out.setflags(write=False)
        return out

    def norm(self) -> float:
        """Frobenius norm of the full (multiplicity-expanded) tensor."""
        return float(np.sqrt(np.sum(multiplicities(self.dim, self.order) * self.entries**2)))

    def __add__(self, other: "SymTensor") -> "SymTensor":
        _check_same_space(self, other)
        return SymTensor(self.order, self.dim, self.entries + other.entries)

    def __sub__(self, other: "SymTensor") -> "SymTensor":
        _check_same_space(self, other)
        return SymTensor(self.order, self.dim, self.entries - other.entries)

    def __mul__(self, c: float) -> "SymTensor":
        return SymTensor(self.order, self.dim, float(c) * self.entries)

    __rmul__ = __mul__

    def __repr__(self):
        return f"SymTensor(order={self.order}, dim={self.dim}, norm={self.norm():.3e})"


def _check_same_space(a: SymTensor, b: SymTensor):
    if (a.order, a.dim) != (b.order, b.dim):
        raise ValidationError(f"shape mismatch: ({a.order},{a.dim}) vs ({b.order},{b.dim})")


def _as_vector(v, n: int, what: str = "argument") -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (n,):
        raise ValidationError(f"{what} must have shape ({n},), got {v.shape}")
    return v


def contract_first(dense: np.ndarray, vectors) -> np.ndarray:
    """Contract the leading axes of ``dense`` with ``vectors`` in turn."""
    out = dense
    for z in vectors:
        out = np.tensordot(z, out, axes=(0, 0))
    return out


def eval_form(T: SymTensor, args) -> float:
    """Evaluate T(z1, ..., zk).

    Arguments are put in a canonical order before contracting, so the result
    is bit-identical under any permutation of ``args``.
    """
    args = list(args)
    if len(args) != T.order:
        raise ValidationError(f"order-{T.order} form needs {T.order} arguments, got {len(args)}")
    vecs = [_as_vector(z, T.dim) for z in args]
    vecs.sort(key=lambda v: tuple(v.tolist()))
    return float(contract_first(T.dense, vecs))


def eval_diagonal(T: SymTensor, y) -> float:
    """T(y, ..., y)."""
    y = _as_vector(y, T.dim)
    return float(contract_first(T.dense, [y] * T.order))


def riesz_gradient(T: SymTensor, y) -> np.ndarray:
    """Vector g with <g, z> = T(z, y, ..., y) for all z."""
    y = _as_vector(y, T.dim)
    out = T.dense
    for _ in range(T.order - 1):
        out = out @ y
    return np.array(out, dtype=np.float64).reshape(T.dim)


def transform_slots(dense: np.ndarray, M: np.ndarray) -> np.ndarray:
    """Apply M in every slot: returns S with S(w1..wk) = T(M w1, ..., M wk)."""
    out = dense
    for _ in range(dense.ndim):
        out = np.tensordot(out, M, axes=(0, 0))
    return out


def sym_blocks(T: np.ndarray, i: int, j: int) -> np.ndarray:
    """Average of T over the block-ordered permutations S_{i,j}.

    A permutation sigma in S_{i,j} keeps sigma(1) < ... < sigma(i) and
    sigma(i+1) < ... < sigma(i+j); there are binom(i+j, i) of them.
    """
    T = np.asarray(T, dtype=np.float64)
    if i < 1 or j < 1:
        raise ValidationError("block sizes must be >= 1")
    if T.ndim != i + j:
        raise ValidationError(f"tensor of order {T.ndim} cannot be split into blocks ({i},{j})")
    out = np.zeros_like(T)
    perms = block_permutations(i, j)
    for sigma in perms:
        # out[a] += T[a_sigma(0), ..., a_sigma(k-1)]
        out += np.transpose(T, np.argsort(sigma))
    return out / len(perms)


@functools.lru_cache(maxsize=None)
def block_permutations(i: int, j: int) -> tuple:
    """The set S_{i,j} as 0-based tuples (sigma(0), ..., sigma(i+j-1))."""
    k = i + j
    perms = []
    for head in itertools.combinations(range(k), i):
        tail = tuple(p for p in range(k) if p not in head)
        perms.append(head + tail)
    return tuple(perms)


def full_symmetrize(T: np.ndarray) -> SymTensor:
    """Project a dense tensor onto symmetric forms (exact k!-term average)."""
    T = np.asarray(T, dtype=np.float64)
    k = T.ndim
    if k == 0 or any(s != T.shape[0] for s in T.shape):
        raise ValidationError(f"full_symmetrize needs uniform axes, got shape {T.shape}")
    if k > 6:
        raise ValidationError("full_symmetrize supports order <= 6")
    perms = list(itertools.permutations(range(k)))
    # exactly symmetric input is returned unchanged (averaging would round)
    if all(np.array_equal(T, np.transpose(T, p)) for p in perms[1:]):
        return SymTensor.from_dense(T)
    acc = np.zeros_like(T)
    for perm in perms:
        acc += np.transpose(T, perm)
    return SymTensor.from_dense(acc / math.factorial(k))


def outer_contract_u(C1: np.ndarray, C2: np.ndarray) -> np.ndarray:
    """(C1 (x)_U C2)(z1..z_{i+j}) = sum_u C1[u](z1..zi) C2[u](z_{i+1}..z_{i+j})."""
    C1 = np.asarray(C1, dtype=np.float64)
    C2 = np.asarray(C2, dtype=np.float64)
    if C1.shape[0] != C2.shape[0]:
        raise ValidationError(f"leading axes differ: {C1.shape[0]} vs {C2.shape[0]}")
    return np.tensordot(C1, C2, axes=(0, 0))


# ---------------------------------------------------------------- archives


def write_symt(path, T: SymTensor) -> None:
    header = SYMT_MAGIC + struct.pack("<III", SYMT_VERSION, T.order, T.dim)
    Path(path).write_bytes(header + T.entries.astype("<f8").tobytes())


def read_symt(path) -> SymTensor:
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:4] != SYMT_MAGIC:
        raise ValidationError(f"{path}: not a SYMT file")
    version, order, dim = struct.unpack("<III", raw[4:16])
    if version != SYMT_VERSION:
        raise ValidationError(f"{path}: unsupported SYMT version {version}")
    body = raw[16:]
    if len(body) != 8 * packed_size(dim, order):
        raise ValidationError(f"{path}: expected {packed_size(dim, order)} entries")
    return SymTensor(order, dim, np.frombuffer(body, dtype="<f8").astype(np.float64))


def write_manifest(path, fields: dict) -> None:
    lines = []
    for key, val in fields.items():
        if "\n" in str(val) or "=" in str(key):
            raise ValidationError(f"manifest entry {key!r} is not representable")
        lines.append(f"{key}={val}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path) -> dict:
    out = {}
    for line in Path(path).read_text().splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        key, sep, val = line.partition("=")
        if not sep:
            raise ValidationError(f"{path}: malformed manifest line {line!r}")
        out[key.strip()] = val.strip()
    return out


def save_archive(directory, tensors: dict, manifest: dict) -> None:
    """Write ``{name: SymTensor}`` as ``name.symt`` files plus ``manifest.txt``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for name, T in tensors.items():
        write_symt(d / f"{name}.symt", T)
    fields = dict(manifest)
    fields["tensors"] = ",".join(tensors)
    write_manifest(d / "manifest.txt", fields)


def load_archive(directory):
    d = Path(directory)
    if not (d / "manifest.txt").exists():
        raise ValidationError(f"{d}: missing manifest.txt")
    manifest = read_manifest(d / "manifest.txt")
    names = [s for s in manifest.get("tensors", "").split(",") if s]
    tensors = {name: read_symt(d / f"{name}.symt") for name in names}
    return tensors, manifest
