"""Closed-loop integration, running costs and the dynamic-programming identity."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import solve_ivp

from .errors import DivergenceError, ProvenanceError, ValidationError
from .feedback import ValueExpansion, eval_DVd, eval_rd, eval_Vd
from .model import QuadraticControlSystem
from .riccati import closed_loop, spectral_abscissa

log = logging.getLogger(__name__)

DIVERGENCE_NORM = 1e6


@dataclass(eq=False)
class Trajectory:
    """Closed-loop run. Controls are u_d evaluated at the accepted solver nodes."""

    times: np.ndarray
    states: np.ndarray
    controls: np.ndarray
    ell_d: np.ndarray
    J_running: float
    rd_integral: float
    diverged: bool
    tail_estimate: float
    rd_tail: float = 0.0
    system_hash: str = ""
    degree: int = 0
    cost_degree: int = 0
    message: str = ""
    dense: object = field(default=None, repr=False)

    @property
    def y0(self) -> np.ndarray:
        return self.states[0]

    @property
    def yT(self) -> np.ndarray:
        return self.states[-1]


def default_horizon(sys: QuadraticControlSystem, exp: ValueExpansion) -> float:
    return 40.0 / abs(spectral_abscissa(closed_loop(sys, exp.Pi)))


def integrate_closed_loop(sys: QuadraticControlSystem, exp: ValueExpansion, y0, T=None,
                          tol: float = 1e-9, cost_exp: ValueExpansion | None = None,
                          controller=None, dense: bool = False) -> Trajectory:
    """Integrate y' = Ay - F(y) + B u_d(y) with Dormand-Prince 5(4).

    ``tol`` is the relative tolerance; absolute tolerances are ``tol`` times
    |y0| (states) and |y0|^2 (costs), so small initial data keep full
    relative accuracy.

    The running cost 0.5|y|^2 + 0.5 alpha |u|^2 and r_d are appended to the
    state, so they share the error control of the trajectory. ``cost_exp``
    selects the expansion whose r_d is accumulated (default: ``exp``).
    ``controller`` overrides the feedback (e.g. ``lambda y: 0`` for the
    open loop); costs are still accumulated.
    """
    y0 = np.asarray(y0, dtype=np.float64)
    if y0.shape != (sys.n,):
        raise ValidationError(f"y0 must have shape ({sys.n},), got {y0.shape}")
    if exp.system_hash and exp.system_hash != sys.hash():
        raise ProvenanceError("expansion was synthesized for a different system")
    if T is None:
        T = default_horizon(sys, exp)
    if not T > 0 or not tol > 0:
        raise ValidationError("horizon and tolerance must be positive")
    cexp = exp if cost_exp is None else cost_exp
    n, alpha = sys.n, sys.alpha
    BT = sys.B.T

    def feedback(y):
        if controller is not None:
            return np.broadcast_to(np.asarray(controller(y), dtype=np.float64), (sys.m,))
        return -(BT @ eval_DVd(exp, y)) / alpha

    def ell(y, u):
        return 0.5 * (y @ y) + 0.5 * alpha * (u @ u), eval_rd(cexp, sys, y)

    def rhs(t, x):
        y = x[:n]
        if not np.all(np.isfinite(y)):
            return np.full_like(x, np.nan)
        u = feedback(y)
        run, rd = ell(y, u)
        out = np.empty(n + 2)
        out[:n] = sys.A @ y - sys.bilinear(y, y) + sys.B @ u
        out[n] = run
        out[n + 1] = rd
        return out

    def blowup(t, x):
        return DIVERGENCE_NORM - np.linalg.norm(x[:n])

    blowup.terminal = True
    x0 = np.concatenate([y0, [0.0, 0.0]])
    # absolute tolerances follow the magnitude of the data (|y| for states, |y|^2 for costs)
    size = float(np.linalg.norm(y0)) or 1.0
    atol = np.concatenate([np.full(n, tol * size), [tol * size**2] * 2])
    with np.errstate(all="ignore"):
        sol = solve_ivp(rhs, (0.0, T), x0, method="RK45", rtol=tol, atol=atol,
                        events=blowup, dense_output=dense)
    states = sol.y[:n].T
    finite = np.all(np.isfinite(sol.y), axis=0)
    diverged = sol.status != 0 or not finite.all() or sol.t[-1] < T
    if not finite.all():
        keep = finite.copy()
        states, times, aug = states[keep], sol.t[keep], sol.y[:, keep]
    else:
        times, aug = sol.t, sol.y
    controls = np.array([feedback(y) for y in states]).reshape(len(states), sys.m)
    ell_d = np.array([sum(ell(y, u)) for y, u in zip(states, controls)])

    yT = states[-1]
    Pi = exp.Pi
    tail = 0.5 * float(yT @ Pi @ yT)
    rate = abs(spectral_abscissa(closed_loop(sys, Pi)))
    rd_tail = abs(eval_rd(cexp, sys, yT)) / ((cexp.d + 1) * rate)
    if diverged:
        log.warning("trajectory diverged at t=%.4g: %s", times[-1], sol.message)
    return Trajectory(
        times=times, states=states, controls=controls, ell_d=ell_d,
        J_running=float(aug[n, -1]), rd_integral=float(aug[n + 1, -1]),
        diverged=bool(diverged), tail_estimate=tail, rd_tail=rd_tail,
        system_hash=sys.hash(), degree=exp.d, cost_degree=cexp.d,
        message=sol.message, dense=sol.sol,
    )


def _require_converged(traj: Trajectory):
    if traj.diverged:
        raise DivergenceError(
            f"cost unavailable: trajectory diverged (last state norm {np.linalg.norm(traj.yT):.3e})"
        )


def cost_J(traj: Trajectory, sys: QuadraticControlSystem | None = None) -> float:
    """J = running cost on [0, T] + 0.5 y(T)^T Pi y(T) as tail."""
    _require_converged(traj)
    if sys is not None and traj.system_hash != sys.hash():
        raise ProvenanceError("trajectory belongs to a different system")
    return traj.J_running + traj.tail_estimate


def cost_Jd(traj: Trajectory, sys: QuadraticControlSystem | None = None,
            exp: ValueExpansion | None = None) -> float:
    """J_d = J + int r_d (with its tail)."""
    if exp is not None and exp.d != traj.cost_degree:
        raise ProvenanceError(f"trajectory accumulated r_{traj.cost_degree}, not r_{exp.d}")
    return cost_J(traj, sys) + traj.rd_integral + traj.rd_tail


def dp_identity_check(traj: Trajectory, exp: ValueExpansion) -> float:
    """|V_d(y(T)) - V_d(y0) + int_0^T l_d(y, u_d) dt|, zero for the exact flow."""
    if traj.degree != exp.d or traj.cost_degree != exp.d or (
            exp.system_hash and exp.system_hash != traj.system_hash):
        raise ProvenanceError("trajectory was not generated with this expansion")
    _require_converged(traj)
    return abs(eval_Vd(exp, traj.yT) - eval_Vd(exp, traj.y0) + traj.J_running + traj.rd_integral)


def write_csv(traj: Trajectory, path) -> None:
    n = traj.states.shape[1]
    m = traj.controls.shape[1]
    header = ["t"] + [f"y_{i + 1}" for i in range(n)] + [f"u_{i + 1}" for i in range(m)] + ["ell_d"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for t, y, u, l in zip(traj.times, traj.states, traj.controls, traj.ell_d):
            w.writerow([f"{v:.17g}" for v in (t, *y, *u, l)])
