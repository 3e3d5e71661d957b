"""Open-loop optimal control oracle and Taylor-order studies.

The infinite-horizon problem is replaced by a finite horizon [0, T] with the
terminal cost 0.5 y(T)^T Pi y(T). Controls are continuous piecewise linear on
a uniform grid; the state and the running cost are propagated with classical
RK4, and gradients come from the exact discrete adjoint of that scheme.
"""
from __future__ import annotations

import concurrent.futures
import csv
import logging
import math
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import scipy.optimize
import scipy.stats

from . import _rk4
from .errors import DivergenceError, StudyError, ValidationError
from .feedback import eval_feedback, eval_Vd
from .model import QuadraticControlSystem
from .riccati import closed_loop, solve_are, spectral_abscissa
from .sim import cost_J, integrate_closed_loop

log = logging.getLogger(__name__)

class Transcription:
    """Discretized cost  u_grid -> J_h(u)  and its gradient for one initial state."""

    def __init__(self, sys: QuadraticControlSystem, y0, T: float, n_steps: int, Pi):
        if n_steps < 1 or not T > 0:
            raise ValidationError("need T > 0 and n_steps >= 1")
        self.sys = sys
        self.y0 = np.asarray(y0, dtype=np.float64)
        self.T = float(T)
        self.n_steps = int(n_steps)
        self.h = self.T / self.n_steps
        self.Pi = np.ascontiguousarray(Pi, dtype=np.float64)
        self._A = np.ascontiguousarray(sys.A)
        self._B = np.ascontiguousarray(sys.B)
        self._N = np.ascontiguousarray(sys.Ntensor)
        self._A0 = np.ascontiguousarray(sys.oseen_tensor())
        self.times = np.linspace(0.0, self.T, self.n_steps + 1)
        w = np.full(self.n_steps + 1, self.h)
        w[[0, -1]] *= 0.5
        self.weights = w

    def forward(self, u):
        """Return (cost, states, stages); raises DivergenceError on blow-up."""
        u = np.ascontiguousarray(u, dtype=np.float64).reshape(self.n_steps + 1, self.sys.m)
        states = np.zeros((self.n_steps + 1, self.sys.n))
        stages = np.zeros((self.n_steps, 3, self.sys.n))
        cost, bad = _rk4.forward(self._A, self._N, self._B, self.Pi, self.y0, u, self.h,
                                 self.sys.alpha, states, stages)
        if bad >= 0:
            raise DivergenceError(f"open-loop state left the basin at t={self.times[bad]:.4g}")
        return cost, states, stages

    def cost_grad(self, u):
        """Cost, gradient w.r.t. nodal controls, states and discrete costates."""
        u = np.ascontiguousarray(u, dtype=np.float64).reshape(self.n_steps + 1, self.sys.m)
        cost, states, stages = self.forward(u)
        grad = np.empty_like(u)
        costates = np.empty_like(states)
        _rk4.adjoint(self._A, self._A0, self._B, self.Pi, u, self.h, self.sys.alpha,
                     states, stages, grad, costates)
        return cost, grad, states, costates

    def kkt_vector(self, grad):
        """Nodal values of alpha u + B^T p (gradient divided by the lumped mass)."""
        return grad / self.weights[:, None]


@dataclass(eq=False)
class OpenLoopSolution:
    times: np.ndarray
    control_grid: np.ndarray
    state_traj: np.ndarray
    costate_traj: np.ndarray
    V_hat: float
    kkt_norm: float
    iterations: int
    converged: bool
    y0: np.ndarray
    T: float
    n_steps: int
    Pi: np.ndarray = field(repr=False, default=None)
    message: str = ""


def default_oracle_horizon(sys: QuadraticControlSystem, Pi) -> float:
    return 12.0 / abs(spectral_abscissa(closed_loop(sys, Pi)))


def _kkt(tr: Transcription, u, grad) -> float:
    q = tr.kkt_vector(grad)
    return float(np.max(np.linalg.norm(q, axis=1)) / (1.0 + np.max(np.abs(u), initial=0.0)))


def optimal_openloop(sys: QuadraticControlSystem, y0, T=None, n_steps: int = 400, warm_start=None,
                     tol: float = 1e-8, Pi=None, max_iter: int = 3000) -> OpenLoopSolution:
    """Minimize the discretized cost over nodal controls with L-BFGS.

    When L-BFGS stops above the tolerance (cost rounding limits its line
    search), a Newton-Krylov solve of the gradient equation finishes the job.

    Success means max_n |alpha u_n + B^T p_n| <= tol (1 + |u|_inf). The
    problem is solved in the scaled variable z = u sqrt(h) / |y0| and the
    cost is divided by |y0|^2, which keeps the Hessian close to alpha I.
    ``warm_start`` is an (n_steps+1, m) array of nodal controls.
    """
    y0 = np.asarray(y0, dtype=np.float64)
    if y0.shape != (sys.n,):
        raise ValidationError(f"y0 must have shape ({sys.n},), got {y0.shape}")
    if n_steps < 50:
        raise ValidationError("n_steps must be >= 50")
    if Pi is None:
        Pi = solve_are(sys).Pi
    if T is None:
        T = default_oracle_horizon(sys, Pi)
    tr = Transcription(sys, y0, T, n_steps, Pi)
    shape = (n_steps + 1, sys.m)
    scale = float(np.linalg.norm(y0))
    if scale == 0.0:
        u = np.zeros(shape)
        cost, grad, states, costates = tr.cost_grad(u)
        return OpenLoopSolution(tr.times, u, states, costates, cost, _kkt(tr, u, grad), 0, True,
                                y0, T, n_steps, Pi, "zero initial state")
    c = scale / math.sqrt(tr.h)

    def fun(z):
        try:
            cost, grad, _, _ = tr.cost_grad(c * z.reshape(shape))
        except DivergenceError:
            return np.inf, np.zeros_like(z)
        return cost / scale**2, (c / scale**2) * grad.ravel()

    z = np.zeros(shape) if warm_start is None else np.asarray(warm_start, dtype=np.float64) / c
    if z.shape != shape:
        raise ValidationError(f"warm start must have shape {shape}, got {z.shape}")
    if not np.isfinite(fun(z.ravel())[0]):
        raise DivergenceError("initial guess drives the state out of the basin")
    res = scipy.optimize.minimize(
        fun, z.ravel(), jac=True, method="L-BFGS-B",
        options={"maxiter": max_iter, "maxcor": 30, "gtol": 1e-3 * tol, "ftol": 1e-30, "maxls": 50},
    )
    z, iterations, message = res.x, res.nit, str(res.message)
    u = c * z.reshape(shape)
    cost, grad, states, costates = tr.cost_grad(u)
    kkt = _kkt(tr, u, grad)
    if kkt > 1e-2 * tol:
        # L-BFGS stalls where cost differences drop to rounding level; the gradient is
        # still accurate there, so finish with Newton-Krylov on grad = 0
        def grad_only(zz):
            try:
                return (c / scale**2) * tr.cost_grad(c * zz.reshape(shape))[1].ravel()
            except DivergenceError:
                return np.full(zz.size, np.inf)

        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            pol = scipy.optimize.root(grad_only, z, method="krylov",
                                      options={"fatol": 1e-14, "maxiter": 40})
        if np.all(np.isfinite(pol.x)):
            u2 = c * pol.x.reshape(shape)
            try:
                out = tr.cost_grad(u2)
            except DivergenceError:
                out = None
            # accept only a stationary point that does not raise the cost
            if out is not None and _kkt(tr, u2, out[1]) < kkt and out[0] <= cost * (1 + 1e-10):
                u, (cost, grad, states, costates) = u2, out
                kkt = _kkt(tr, u, grad)
                iterations += pol.nit
                message = f"{message}; newton-krylov polish: {pol.message}"
    converged = kkt <= tol
    if not converged:
        log.warning("open-loop oracle stopped with KKT residual %.3e (%s)", kkt, message)
    return OpenLoopSolution(tr.times, u, states, costates, cost, kkt, iterations, converged,
                            y0, T, n_steps, Pi, message)


def kkt_residual(sol: OpenLoopSolution, sys: QuadraticControlSystem) -> float:
    """max_n |alpha u_n + B^T p_n| / (1 + |u|_inf) for the stored controls."""
    tr = Transcription(sys, sol.y0, sol.T, sol.n_steps, sol.Pi)
    _, grad, _, _ = tr.cost_grad(sol.control_grid)
    return _kkt(tr, sol.control_grid, grad)


# ---------------------------------------------------------------- order study


@dataclass
class StudyRow:
    s: float
    d: int
    V_hat: float
    V_d: float
    gap_V: float
    J_cl: float
    gap_u: float
    kkt: float
    noise_V: float
    noise_u: float
    ordering_ok: bool
    converged: bool


@dataclass
class OrderFit:
    quantity: str
    d: int
    slope: float
    half_width: float
    n_points: int
    band: tuple | None = None
    note: str = ""

    @property
    def in_band(self) -> bool | None:
        if self.band is None or math.isnan(self.slope):
            return None
        return self.band[0] <= self.slope <= self.band[1]


@dataclass
class StudyReport:
    direction: np.ndarray
    scalings: np.ndarray
    rows: list
    fitted_orders: list
    flagged: list = field(default_factory=list)

    def fit(self, quantity: str, d: int) -> OrderFit:
        for f in self.fitted_orders:
            if f.quantity == quantity and f.d == d:
                return f
        raise KeyError((quantity, d))


def fit_order(s, gaps, quantity: str, d: int, band=None, min_points: int = 4) -> OrderFit:
    """Least-squares slope of log(gap) against log(s) with a 95% half-width."""
    s = np.asarray(s, dtype=np.float64)
    gaps = np.asarray(gaps, dtype=np.float64)
    if len(s) < min_points:
        return OrderFit(quantity, d, math.nan, math.nan, len(s), band, "below noise floor")
    lr = scipy.stats.linregress(np.log(s), np.log(gaps))
    half = float(scipy.stats.t.ppf(0.975, len(s) - 2) * lr.stderr) if len(s) > 2 else math.inf
    return OrderFit(quantity, d, float(lr.slope), half, len(s), band)


def _l2_gap(times, u_bar, u_cl) -> float:
    diff = np.sum((u_bar - u_cl) ** 2, axis=1)
    return float(math.sqrt(np.trapezoid(diff, times)))


def study_row(sys, expansions: dict, y0, s, T, n_steps, tol, sim_tol, noise=True):
    """All (s, d) records for one initial state. Returns (rows, flag message or None)."""
    Pi = expansions[min(expansions)].Pi
    dmax = max(expansions)
    trajs = {}
    for d, exp in expansions.items():
        trajs[d] = integrate_closed_loop(sys, exp, y0, tol=sim_tol, dense=True)
        if trajs[d].diverged:
            return [], f"s={s:.3e}: degree-{d} closed loop diverged"
    times = np.linspace(0.0, T, n_steps + 1)
    u_cl = {}
    for d, exp in expansions.items():
        ys = trajs[d].dense(times)[: sys.n].T
        u_cl[d] = np.array([eval_feedback(exp, y) for y in ys])
    try:
        sol = optimal_openloop(sys, y0, T, n_steps, warm_start=u_cl[dmax], tol=tol, Pi=Pi)
    except DivergenceError as exc:
        return [], f"s={s:.3e}: oracle left the basin ({exc})"
    if not sol.converged:
        return [], f"s={s:.3e}: oracle did not converge (kkt {sol.kkt_norm:.2e})"
    noise_V = noise_u = 0.0
    if noise:
        # spread between starting points, and a step-halving discretization estimate
        cold = optimal_openloop(sys, y0, T, n_steps, warm_start=None, tol=tol, Pi=Pi)
        coarse = optimal_openloop(sys, y0, T, n_steps // 2, warm_start=sol.control_grid[::2],
                                  tol=tol, Pi=Pi)
        noise_V = max(abs(cold.V_hat - sol.V_hat), abs(coarse.V_hat - sol.V_hat) / 15.0)
        noise_u = max(_l2_gap(times, cold.control_grid, sol.control_grid),
                      _l2_gap(times[::2], coarse.control_grid, sol.control_grid[::2]) / 3.0)
    slack = 2.0 * (tol * (1.0 + np.max(np.abs(sol.control_grid)))) ** 2 * T / sys.alpha
    rows = []
    for d, exp in expansions.items():
        J = cost_J(trajs[d], sys)
        V_d = eval_Vd(exp, y0)
        row_slack = slack + 2.0 * noise_V + 2.0 * sim_tol * abs(J)
        rows.append(StudyRow(
            s=float(s), d=d, V_hat=sol.V_hat, V_d=V_d, gap_V=abs(sol.V_hat - V_d), J_cl=J,
            gap_u=_l2_gap(times, sol.control_grid, u_cl[d]), kkt=sol.kkt_norm,
            noise_V=noise_V, noise_u=noise_u, ordering_ok=sol.V_hat <= J + row_slack,
            converged=True,
        ))
    return rows, None


def _row_task(args):
    return study_row(*args)


def taylor_order_study(sys: QuadraticControlSystem, expansions, v, s_grid, T=None,
                       n_steps: int = 400, tol: float = 1e-8, sim_tol: float = 1e-10,
                       bands: dict | None = None, noise: bool = True, noise_factor: float = 10.0,
                       workers: int = 1) -> StudyReport:
    """Gaps |V_hat - V_d| and |u_bar - u_d|_{L2} along y0 = s v, with fitted orders.

    ``expansions`` maps degree d -> ValueExpansion (a list is keyed by .d).
    ``bands`` maps (quantity, d) -> (lo, hi); quantity is "V" or "u".
    Rows whose gap is below ``noise_factor`` times the measured oracle noise
    are left out of the fit.
    """
    if not isinstance(expansions, dict):
        expansions = {e.d: e for e in expansions}
    expansions = dict(sorted(expansions.items()))
    v = np.asarray(v, dtype=np.float64)
    v = v / np.linalg.norm(v)
    s_grid = np.sort(np.asarray(s_grid, dtype=np.float64))[::-1]
    Pi = expansions[min(expansions)].Pi
    if T is None:
        T = default_oracle_horizon(sys, Pi)
    tasks = [(sys, expansions, s * v, s, T, n_steps, tol, sim_tol, noise) for s in s_grid]
    if workers > 1:
        with concurrent.futures.ProcessPoolExecutor(workers) as pool:
            results = list(pool.map(_row_task, tasks))
    else:
        results = [_row_task(t) for t in tasks]
    rows, flagged = [], []
    for r, flag in results:
        rows.extend(r)
        if flag:
            flagged.append(flag)
            log.warning("study row excluded: %s", flag)
    if len({r.s for r in rows}) < 4:
        raise StudyError(f"only {len({r.s for r in rows})} usable scalings (need 4): {flagged}")
    bands = bands or {}
    fits = []
    for d in expansions:
        for q, gap, noise_of in (("V", "gap_V", "noise_V"), ("u", "gap_u", "noise_u")):
            use = [r for r in rows if r.d == d and getattr(r, gap) > noise_factor * getattr(r, noise_of)
                   and getattr(r, gap) > 0]
            fits.append(fit_order([r.s for r in use], [getattr(r, gap) for r in use], q, d,
                                  bands.get((q, d))))
    return StudyReport(v, s_grid, rows, fits, flagged)


def default_bands(dmax: int) -> dict:
    """V gap ~ s^(d+1) within +-0.3; control gap ~ s^d within [d-0.3, d+0.4]."""
    bands = {}
    for d in range(2, dmax + 1):
        bands[("V", d)] = (d + 0.7, d + 1.3)
        bands[("u", d)] = (d - 0.3, d + 0.4)
    return bands


def write_study(report: StudyReport, directory) -> None:
    """CSV of rows, plain-text order summary and (x, y) plot-data files."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "study.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["s", "d", "V_hat", "V_d", "gap_V", "J_cl", "gap_u", "kkt"])
        for r in report.rows:
            w.writerow([f"{r.s:.17g}", r.d] + [f"{getattr(r, k):.17g}" for k in
                                               ("V_hat", "V_d", "gap_V", "J_cl", "gap_u", "kkt")])
    lines = []
    for f in report.fitted_orders:
        if math.isnan(f.slope):
            lines.append(f"{f.quantity} d={f.d}: {f.note} ({f.n_points} usable points)")
            continue
        band = "" if f.band is None else f" band=[{f.band[0]:g}, {f.band[1]:g}] " + (
            "PASS" if f.in_band else "FAIL")
        lines.append(f"{f.quantity} d={f.d}: slope={f.slope:.4f} +- {f.half_width:.4f} "
                     f"({f.n_points} points){band}")
    for flag in report.flagged:
        lines.append(f"excluded: {flag}")
    (out / "orders.txt").write_text("\n".join(lines) + "\n")
    for d in sorted({r.d for r in report.rows}):
        for q, attr in (("V", "gap_V"), ("u", "gap_u")):
            pts = [(r.s, getattr(r, attr)) for r in report.rows if r.d == d]
            (out / f"gap_{q}_d{d}.dat").write_text(
                "".join(f"{x:.17g} {y:.17g}\n" for x, y in pts))


def with_controls(sol: OpenLoopSolution, controls) -> OpenLoopSolution:
    """Copy of ``sol`` with other nodal controls (diagnostics only)."""
    return replace(sol, control_grid=np.asarray(controls, dtype=np.float64))
