"""Quadratic control systems  y' = A y - N(y, y) + B u  and benchmark instances."""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ValidationError

SCHEMA_VERSION = 1


@dataclass(frozen=True, eq=False)
class QuadraticControlSystem:
    """Finite-dimensional system  y' = A y - F(y) + B u,  F(y) = N(y, y).

    ``Ntensor[i, j, l]`` gives ``N(y, z)_i = sum_{j,l} Ntensor[i, j, l] y_j z_l``;
    it need not be symmetric in (j, l). The running cost is
    ``0.5 |y|^2 + 0.5 * alpha * |u|^2``.
    """

    A: np.ndarray
    B: np.ndarray
    Ntensor: np.ndarray
    alpha: float
    label: str = ""

    def __post_init__(self):
        A = np.array(self.A, dtype=np.float64, ndmin=2)
        B = np.array(self.B, dtype=np.float64, ndmin=2)
        N = np.array(self.Ntensor, dtype=np.float64)
        n = A.shape[0]
        if A.shape != (n, n):
            raise ValidationError(f"A must be square, got {A.shape}")
        if B.ndim != 2 or B.shape[0] != n:
            raise ValidationError(f"B must have shape ({n}, m), got {B.shape}")
        if N.shape != (n, n, n):
            raise ValidationError(f"Ntensor must have shape ({n},{n},{n}), got {N.shape}")
        alpha = float(self.alpha)
        if not alpha > 0 or not np.isfinite(alpha):
            raise ValidationError(f"alpha must be positive and finite, got {self.alpha}")
        for name, arr in (("A", A), ("B", B), ("Ntensor", N)):
            if not np.all(np.isfinite(arr)):
                raise ValidationError(f"{name} has non-finite entries")
            arr.setflags(write=False)
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "Ntensor", N)
        object.__setattr__(self, "alpha", alpha)

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def m(self) -> int:
        return self.B.shape[1]

    def bilinear(self, y, z) -> np.ndarray:
        """N(y, z)."""
        return np.einsum("ijl,j,l->i", self.Ntensor, y, z)

    def jac_F(self, y) -> np.ndarray:
        """Jacobian of F at y, i.e. the matrix of z -> N(y, z) + N(z, y)."""
        return np.einsum("ijl,j->il", self.Ntensor, y) + np.einsum("ijl,l->ij", self.Ntensor, y)

    def oseen_tensor(self) -> np.ndarray:
        """A0 as a (n, n, n) array, symmetric in its last two axes."""
        return self.Ntensor + self.Ntensor.transpose(0, 2, 1)

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "n": self.n,
            "m": self.m,
            "alpha": self.alpha,
            "A": self.A.reshape(-1).tolist(),
            "B": self.B.reshape(-1).tolist(),
            "N": self.Ntensor.reshape(-1).tolist(),
            "label": self.label,
        }

    def hash(self) -> str:
        """Content hash over the numeric data (label excluded)."""
        d = self.to_dict()
        d.pop("label")
        blob = json.dumps(d, sort_keys=True, allow_nan=False).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _vec(sys: QuadraticControlSystem, y, size=None, what="state") -> np.ndarray:
    size = sys.n if size is None else size
    y = np.asarray(y, dtype=np.float64)
    if y.shape != (size,):
        raise ValidationError(f"{what} must have shape ({size},), got {y.shape}")
    return y


def f_eval(sys: QuadraticControlSystem, y) -> np.ndarray:
    """F(y) = N(y, y)."""
    y = _vec(sys, y)
    return sys.bilinear(y, y)


def oseen_apply(sys: QuadraticControlSystem, y, z) -> np.ndarray:
    """A0(y, z) = N(y, z) + N(z, y)."""
    y = _vec(sys, y)
    z = _vec(sys, z)
    return np.einsum("ijl,j,l->i", sys.oseen_tensor(), y, z)


def rhs_closed(sys: QuadraticControlSystem, y, u) -> np.ndarray:
    """A y - F(y) + B u."""
    y = _vec(sys, y)
    u = _vec(sys, u, sys.m, "control")
    return sys.A @ y - sys.bilinear(y, y) + sys.B @ u


# ---------------------------------------------------------------- instances


@dataclass(frozen=True)
class BurgersConfig:
    """Sine-Galerkin Burgers surrogate  y_t = nu y_xx + mu y - y y_x + sum_p 1_{patch_p} u_p
    on (0, 1) with homogeneous Dirichlet conditions."""

    n_modes: int
    nu: float
    mu: float
    control_patches: tuple = field(default_factory=tuple)

    def validate(self):
        if int(self.n_modes) < 1:
            raise ValidationError("n_modes must be >= 1")
        if not self.nu > 0:
            raise ValidationError("nu must be positive")
        if not self.control_patches:
            raise ValidationError("at least one control patch is required")
        for a, b in self.control_patches:
            if not (0.0 < a < b < 1.0):
                raise ValidationError(f"invalid control patch ({a}, {b})")


def make_burgers(cfg: BurgersConfig, alpha: float = 1.0, label: str = "") -> QuadraticControlSystem:
    """Galerkin projection onto phi_j(x) = sqrt(2) sin(j pi x), j = 1..n_modes.

    The basis is orthonormal, so the mass matrix is the identity.
    """
    cfg.validate()
    n = int(cfg.n_modes)
    j = np.arange(1, n + 1, dtype=np.float64)
    A = np.diag(cfg.mu - cfg.nu * (j * np.pi) ** 2)

    B = np.empty((n, len(cfg.control_patches)))
    for p, (a, b) in enumerate(cfg.control_patches):
        B[:, p] = np.sqrt(2.0) * (np.cos(j * np.pi * a) - np.cos(j * np.pi * b)) / (j * np.pi)

    x, w = np.polynomial.legendre.leggauss(4 * n + 8)
    x = 0.5 * (x + 1.0)
    w = 0.5 * w
    phi = np.sqrt(2.0) * np.sin(np.outer(j, x) * np.pi)
    dphi = np.sqrt(2.0) * (j * np.pi)[:, None] * np.cos(np.outer(j, x) * np.pi)
    N = np.einsum("iq,jq,lq,q->ijl", phi, phi, dphi, w)

    label = label or f"burgers(n={n}, nu={cfg.nu}, mu={cfg.mu})"
    return QuadraticControlSystem(A, B, N, alpha, label)


def make_scalar(a: float, b: float, n1: float, alpha: float) -> QuadraticControlSystem:
    """y' = a y - n1 y^2 + b u."""
    if b == 0 and a >= 0:
        raise ValidationError(f"scalar system with b=0 and a={a} >= 0 is not stabilizable")
    return QuadraticControlSystem(
        [[a]], [[b]], [[[n1]]], alpha, f"scalar(a={a}, b={b}, n1={n1})"
    )


# ---------------------------------------------------------------- file I/O


def save_system(sys: QuadraticControlSystem, path) -> None:
    # json emits shortest round-trip repr for floats (<= 17 significant digits)
    Path(path).write_text(json.dumps(sys.to_dict(), allow_nan=False, indent=1) + "\n")


def system_from_dict(d: dict) -> QuadraticControlSystem:
    if d.get("schema_version") != SCHEMA_VERSION:
        raise ValidationError(f"unsupported schema_version {d.get('schema_version')!r}")
    try:
        n, m = int(d["n"]), int(d["m"])
        A, B, N = (np.asarray(d[k], dtype=np.float64) for k in ("A", "B", "N"))
        alpha = float(d["alpha"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ValidationError(f"malformed system record: {exc}") from None
    for name, arr, size in (("A", A, n * n), ("B", B, n * m), ("N", N, n**3)):
        if arr.ndim != 1 or arr.size != size:
            raise ValidationError(f"field {name} must hold {size} numbers, got {arr.size}")
    return QuadraticControlSystem(
        A.reshape(n, n), B.reshape(n, m), N.reshape(n, n, n), alpha, str(d.get("label", ""))
    )


def load_system(path) -> QuadraticControlSystem:
    try:
        d = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(d, dict):
        raise ValidationError(f"{path}: expected a JSON object")
    return system_from_dict(d)
