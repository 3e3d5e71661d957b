"""Polynomial value expansion V_d, its gradient, the feedback law u_d and r_d."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError
from .model import QuadraticControlSystem, f_eval
from .symtensor import eval_diagonal, riesz_gradient


@dataclass(frozen=True, eq=False)
class ValueExpansion:
    """V_d(y) = sum_{k=2}^d T_k(y, ..., y) / k!  with feedback u_d = -(1/alpha) B^T DV_d."""

    alpha: float
    B: np.ndarray
    tensors: dict
    system_hash: str = ""
    residuals: dict = field(default_factory=dict)

    def __post_init__(self):
        orders = sorted(self.tensors)
        if not orders or orders != list(range(2, orders[-1] + 1)):
            raise ValidationError(f"expansion orders must be 2..d without gaps, got {orders}")
        dims = {T.dim for T in self.tensors.values()}
        if len(dims) != 1:
            raise ValidationError(f"tensors have mixed dimensions {dims}")
        for k, T in self.tensors.items():
            if T.order != k:
                raise ValidationError(f"tensor stored under order {k} has order {T.order}")
        B = np.array(self.B, dtype=np.float64, ndmin=2)
        if B.shape[0] != dims.pop():
            raise ValidationError("B does not match tensor dimension")
        if not self.alpha > 0:
            raise ValidationError("alpha must be positive")
        B.setflags(write=False)
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "tensors", dict(sorted(self.tensors.items())))

    @property
    def d(self) -> int:
        return max(self.tensors)

    @property
    def n(self) -> int:
        return self.tensors[2].dim

    @property
    def Pi(self) -> np.ndarray:
        return np.array(self.tensors[2].dense)

    def truncate(self, d: int) -> "ValueExpansion":
        """The degree-d expansion built from the same chain."""
        if not 2 <= d <= self.d:
            raise ValidationError(f"cannot truncate degree {self.d} expansion to {d}")
        return ValueExpansion(self.alpha, self.B, {k: self.tensors[k] for k in range(2, d + 1)},
                              self.system_hash, {k: r for k, r in self.residuals.items() if k <= d})


def _state(exp: ValueExpansion, y) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    if y.shape != (exp.n,):
        raise ValidationError(f"state must have shape ({exp.n},), got {y.shape}")
    return y


def gradients(exp: ValueExpansion, y) -> dict:
    """{k: riesz_gradient(T_k, y)} for every order in the chain."""
    y = _state(exp, y)
    return {k: riesz_gradient(T, y) for k, T in exp.tensors.items()}


def eval_Vd(exp: ValueExpansion, y) -> float:
    y = _state(exp, y)
    return float(sum(eval_diagonal(T, y) / math.factorial(k) for k, T in exp.tensors.items()))


def eval_DVd(exp: ValueExpansion, y, grads=None) -> np.ndarray:
    grads = gradients(exp, y) if grads is None else grads
    return sum(g / math.factorial(k - 1) for k, g in grads.items())


def eval_feedback(exp: ValueExpansion, y) -> np.ndarray:
    """u_d(y) = -(1/alpha) B^T DV_d(y)."""
    return -(exp.B.T @ eval_DVd(exp, y)) / exp.alpha


def eval_Gk(exp: ValueExpansion, k: int, y) -> np.ndarray:
    """Nonlinear feedback part G_k(y) = -B B^T T_k(., y, .., y) / (alpha (k-1)!)."""
    if not 3 <= k <= exp.d:
        raise ValidationError(f"G_k defined for 3 <= k <= {exp.d}, got {k}")
    y = _state(exp, y)
    g = riesz_gradient(exp.tensors[k], y)
    return -(exp.B @ (exp.B.T @ g)) / (exp.alpha * math.factorial(k - 1))


def eval_rd(exp: ValueExpansion, sys: QuadraticControlSystem, y, grads=None) -> float:
    """Defect r_d(y) of V_d in the HJB equation.

    r_d = (1/2a) sum_{k=d+1}^{2d-2} sum_{l=k-d+1}^{d-1} <B^T g_{l+1}, B^T g_{k-l+1}> / (l! (k-l)!)
          + T_d(F(y), y, .., y) / (d-1)!
    """
    y = _state(exp, y)
    grads = gradients(exp, y) if grads is None else grads
    d = exp.d
    bg = {j: exp.B.T @ g for j, g in grads.items()}
    quad = 0.0
    for k in range(d + 1, 2 * d - 1):
        for ell in range(k - d + 1, d):
            quad += float(bg[ell + 1] @ bg[k - ell + 1]) / (math.factorial(ell) * math.factorial(k - ell))
    return quad / (2.0 * exp.alpha) + float(grads[d] @ f_eval(sys, y)) / math.factorial(d - 1)


def hjb_residual(exp: ValueExpansion, sys: QuadraticControlSystem, y) -> float:
    """<DV_d, Ay - F(y)> + |y|^2/2 - |B^T DV_d|^2/(2 alpha) + r_d(y); zero up to rounding."""
    if exp.system_hash and exp.system_hash != sys.hash():
        warnings.warn("expansion was synthesized for a different system", RuntimeWarning)
    y = _state(exp, y)
    grads = gradients(exp, y)
    dv = eval_DVd(exp, y, grads)
    bdv = sys.B.T @ dv
    val = dv @ (sys.A @ y - f_eval(sys, y)) + 0.5 * (y @ y) - (bdv @ bdv) / (2.0 * sys.alpha)
    return float(val + eval_rd(exp, sys, y, grads))


def hjb_check(exp: ValueExpansion, sys: QuadraticControlSystem, samples: int = 100,
              radius: float = 1.0, seed: int = 0) -> float:
    """Max of |hjb_residual| / (1 + |y|^{2d}) over seeded probes with |y| <= radius."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(samples):
        y = rng.standard_normal(exp.n)
        y *= radius * rng.uniform() ** (1.0 / exp.n) / np.linalg.norm(y)
        worst = max(worst, abs(hjb_residual(exp, sys, y)) / (1.0 + np.linalg.norm(y) ** (2 * exp.d)))
    return worst
