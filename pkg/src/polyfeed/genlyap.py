"""Chain of generalized Lyapunov tensor equations.

For k >= 3 the order-k form T_k solves

    sum_i T_k(z1, ..., A_pi z_i, ..., zk) = R_k(z1, ..., zk)

where R_k is assembled from T_2 .. T_{k-1}, the control matrix and the
Oseen operator A0(y, z) = N(y, z) + N(z, y).
"""
from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from . import symtensor as st
from .errors import SolverError, ValidationError
from .feedback import ValueExpansion
from .model import QuadraticControlSystem, f_eval
from .riccati import RiccatiSolution, schur_form, solve_are, spectral_abscissa
from .symtensor import SymTensor

log = logging.getLogger(__name__)

PROBE_SEED = 0xC0FFEE
N_PROBES = 64
DENSE_LIMIT = 20000


@dataclass(frozen=True, eq=False)
class ChainEquation:
    k: int
    A_pi: np.ndarray
    R_k: SymTensor
    T_k: SymTensor
    residual_norm: float


@dataclass(frozen=True, eq=False)
class SynthesisResult:
    """Output of :func:`synthesize`: the expansion plus per-order diagnostics."""

    expansion: ValueExpansion
    riccati: RiccatiSolution
    equations: dict = field(default_factory=dict)

    @property
    def residuals(self) -> dict:
        return {k: eq.residual_norm for k, eq in self.equations.items()}


# ---------------------------------------------------------------- RHS


def control_contraction(T: SymTensor, B: np.ndarray) -> np.ndarray:
    """C(z1..z_{k-1}) = B^T T(., z1, ..., z_{k-1}) as an (m, n, ..., n) array."""
    return np.tensordot(B.T, T.dense, axes=(1, 0))


def oseen_term(T_prev: SymTensor, sys: QuadraticControlSystem) -> np.ndarray:
    """(T_{k-1} (x) A0)(z1..zk) = T_{k-1}(A0(z_{k-1}, z_k), z1, ..., z_{k-2}), dense."""
    return np.tensordot(T_prev.dense, sys.oseen_tensor(), axes=(0, 0))


def assemble_rhs(k: int, chain: dict, sys: QuadraticControlSystem) -> SymTensor:
    """Right-hand side R_k of the order-k chain equation.

    R_k = (1/2 alpha) sum_{i=2}^{k-2} binom(k, i) Sym_{i,k-i}(C_i (x)_U C_{k-i})
          + k(k-1)/2 Sym_{k-2,2}(T_{k-1} (x) A0)

    with C_i = B^T T_{i+1}(., ...). The second term equals the double sum of
    T_{k-1}(A0(z_j, z_{j+i}), remaining z's) over all pairs j < j+i.
    """
    if k < 3:
        raise ValidationError(f"assemble_rhs needs k >= 3, got {k}")
    missing = [j for j in range(2, k) if j not in chain]
    if missing:
        raise ValidationError(f"chain is missing orders {missing} needed for R_{k}")
    n = sys.n
    acc = np.zeros((n,) * k)
    C = {i: control_contraction(chain[i + 1], sys.B) for i in range(2, k - 1)}
    for i in range(2, k - 1):
        term = st.outer_contract_u(C[i], C[k - i])
        acc += math.comb(k, i) / (2.0 * sys.alpha) * st.sym_blocks(term, i, k - i)
    oseen = oseen_term(chain[k - 1], sys)
    acc += 0.5 * k * (k - 1) * st.sym_blocks(oseen, k - 2, 2)
    return SymTensor.from_dense(acc)


def rhs_bruteforce(k: int, chain: dict, sys: QuadraticControlSystem, zs) -> float:
    """R_k(z1..zk) straight from the index sums (slow; used as a check)."""
    zs = [np.asarray(z, dtype=np.float64) for z in zs]
    B = sys.B
    A0 = sys.oseen_tensor()
    total = 0.0
    # sum_{i=2}^{k-2} binom(k,i) Sym_{i,k-i}(C_i (x) C_{k-i})
    for i in range(2, k - 1):
        perms = st.block_permutations(i, k - i)
        s = 0.0
        for sigma in perms:
            w = [zs[p] for p in sigma]
            left = B.T @ st.contract_first(chain[i + 1].dense.transpose(*range(1, i + 1), 0), w[:i])
            right = B.T @ st.contract_first(
                chain[k - i + 1].dense.transpose(*range(1, k - i + 1), 0), w[i:]
            )
            s += left @ right
        total += math.comb(k, i) / (2.0 * sys.alpha) * s / len(perms)
    for j in range(k - 1):
        for jj in range(j + 1, k):
            a0 = np.einsum("ijl,j,l->i", A0, zs[j], zs[jj])
            rest = [z for q, z in enumerate(zs) if q not in (j, jj)]
            total += st.contract_first(chain[k - 1].dense, [a0] + rest)
    return float(total)


# ---------------------------------------------------------------- solvers


def _check_hurwitz(A_pi):
    A_pi = np.asarray(A_pi, dtype=np.float64)
    if A_pi.ndim != 2 or A_pi.shape[0] != A_pi.shape[1]:
        raise ValidationError(f"A_pi must be square, got {A_pi.shape}")
    a = spectral_abscissa(A_pi)
    if a >= 0:
        raise ValidationError(f"A_pi is not Hurwitz (spectral abscissa {a:.3e})")
    return A_pi, a


def apply_operator(T: SymTensor, A_pi) -> SymTensor:
    """sum_i T(z1, ..., A_pi z_i, ..., zk) as a symmetric form."""
    k = T.order
    D = T.dense
    acc = np.zeros_like(D)
    for i in range(k):
        acc += np.moveaxis(np.tensordot(A_pi, D, axes=(0, i)), 0, i)
    return SymTensor.from_dense(acc)


def solve_chain_lyapunov(A_pi, R: SymTensor, tol: float = 1e-10) -> SymTensor:
    """Solve sum_i T(.., A_pi z_i, ..) = R by triangular recursion in the Schur basis.

    With A_pi = Q U Q^H, the transformed form Th(w) = T(Q w1, ..., Q wk)
    satisfies, entry by entry on sorted multi-indices a,

        Th[a] * sum_i U[a_i, a_i] = Rh[a] - sum_i sum_{b < a_i} U[b, a_i] Th[a; a_i -> b],

    and every index on the right is lexicographically smaller than a.
    """
    A_pi, _ = _check_hurwitz(A_pi)
    n, k = R.dim, R.order
    if A_pi.shape != (n, n):
        raise ValidationError(f"A_pi shape {A_pi.shape} does not match dim {n}")
    Q, U = schur_form(A_pi)
    Rh = st.transform_slots(R.dense.astype(complex), Q)
    Rh_packed = Rh.reshape(-1)[st._flat_codes(n, k)]
    pos = st.packed_position(n, k)
    diag = np.diag(U)
    Th = np.zeros(len(Rh_packed), dtype=complex)
    for p, a in enumerate(st.multi_indices(n, k)):
        a = tuple(int(v) for v in a)
        acc = Rh_packed[p]
        for slot, ai in enumerate(a):
            if slot and a[slot - 1] == ai:
                continue  # equal indices share one contribution, counted below
            count = a.count(ai)
            rest = a[:slot] + a[slot + count :]
            for b in range(ai):
                key = tuple(sorted(rest + (b,) + (ai,) * (count - 1)))
                acc -= count * U[b, ai] * Th[pos[key]]
        Th[p] = acc / sum(diag[ai] for ai in a)
    dense_h = Th[st._unpack_map(n, k)].reshape((n,) * k)
    T_dense = st.transform_slots(dense_h, Q.conj().T)
    imag = np.max(np.abs(T_dense.imag), initial=0.0)
    if imag > 1e-8 * (1.0 + np.max(np.abs(T_dense.real), initial=0.0)):
        log.warning("Schur back-transform left imaginary part %.2e", imag)
    T = SymTensor.from_dense(T_dense.real)
    res = (apply_operator(T, A_pi) - R).norm()
    if res > tol * (1.0 + R.norm()):
        raise SolverError(f"order-{k} chain solve residual {res:.3e} above tolerance", order=k)
    return T


def kron_sum_matrix(A_pi, k: int) -> np.ndarray:
    """Dense matrix of T -> sum_i T(.., A_pi z_i, ..) acting on row-major vec(T)."""
    n = A_pi.shape[0]
    eye = np.eye(n)
    L = np.zeros((n**k, n**k))
    for i in range(k):
        factors = [eye] * k
        factors[i] = A_pi.T
        term = factors[0]
        for f in factors[1:]:
            term = np.kron(term, f)
        L += term
    return L


def solve_dense_kron(A_pi, R: SymTensor) -> SymTensor:
    """Reference solver: dense Kronecker-sum linear system (n^k <= 20000)."""
    A_pi, _ = _check_hurwitz(A_pi)
    n, k = R.dim, R.order
    if n**k > DENSE_LIMIT:
        raise ValidationError(f"dense Kronecker solve limited to n^k <= {DENSE_LIMIT}")
    x = np.linalg.solve(kron_sum_matrix(A_pi, k), R.dense.reshape(-1))
    return st.full_symmetrize(x.reshape((n,) * k))


def solve_via_quadrature(A_pi, G: SymTensor, T_horizon=None, n_nodes: int = 200, panels: int = 10,
                         tol: float = 1e-8):
    """T(z) = -int_0^inf G(e^{A_pi t} z1, ..., e^{A_pi t} zk) dt by composite Gauss-Legendre.

    Returns ``(T, tail)`` where ``tail`` bounds the neglected integral over
    [T_horizon, inf). A tail above ``tol`` triggers a RuntimeWarning.
    """
    A_pi, absc = _check_hurwitz(A_pi)
    k = G.order
    if T_horizon is None:
        T_horizon = 40.0 / abs(absc) / k
    if n_nodes % panels:
        raise ValidationError("n_nodes must be a multiple of panels")
    x, w = np.polynomial.legendre.leggauss(n_nodes // panels)
    edges = np.linspace(0.0, T_horizon, panels + 1)
    acc = np.zeros((G.dim,) * k)
    for lo, hi in zip(edges[:-1], edges[1:]):
        half = 0.5 * (hi - lo)
        for xi, wi in zip(x, w):
            E = scipy.linalg.expm(A_pi * (lo + half * (xi + 1.0)))
            acc += half * wi * st.transform_slots(G.dense, E)
    ET = scipy.linalg.expm(A_pi * T_horizon)
    grow = np.linalg.norm(ET, 2)
    tail = G.norm() * grow**k / (k * abs(absc))
    if tail > tol:
        warnings.warn(f"quadrature horizon too short: tail estimate {tail:.2e}", RuntimeWarning)
    return SymTensor.from_dense(-acc), tail


# ---------------------------------------------------------------- residuals


def _probe_vectors(n: int, k: int) -> np.ndarray:
    rng = np.random.default_rng(PROBE_SEED)
    return rng.standard_normal((N_PROBES, k, n))


def lyap_residual(T: SymTensor, A_pi, R: SymTensor) -> float:
    """Max over 64 seeded probe tuples of the normalized chain-equation defect."""
    if (T.order, T.dim) != (R.order, R.dim):
        raise ValidationError("T and R orders/dims differ")
    A_pi = np.asarray(A_pi, dtype=np.float64)
    k = T.order
    rnorm = R.norm()
    worst = 0.0
    for zs in _probe_vectors(T.dim, k):
        lhs = 0.0
        for i in range(k):
            args = list(zs)
            args[i] = A_pi @ zs[i]
            lhs += st.contract_first(T.dense, args)
        rhs = st.contract_first(R.dense, list(zs))
        scale = 1.0 + rnorm * np.prod(np.linalg.norm(zs, axis=1))
        worst = max(worst, abs(lhs - rhs) / scale)
    return float(worst)


def a_form_residual(exp: ValueExpansion, sys: QuadraticControlSystem, k: int, y) -> float:
    """Diagonal identity in terms of A instead of A_pi, normalized by 1 + |y|^k:

    k T_k(Ay, y..) - (1/2a) sum_{i=1}^{k-1} binom(k,i) <B^T g_{i+1}, B^T g_{k-i+1}>
        - k(k-1) T_{k-1}(F(y), y..)
    with g_j = riesz_gradient(T_j, y).
    """
    y = np.asarray(y, dtype=np.float64)
    T = exp.tensors
    bg = {j: sys.B.T @ st.riesz_gradient(T[j], y) for j in range(2, k + 1)}
    val = k * float(st.riesz_gradient(T[k], y) @ (sys.A @ y))
    val -= sum(math.comb(k, i) * float(bg[i + 1] @ bg[k - i + 1]) for i in range(1, k)) / (2 * sys.alpha)
    val -= k * (k - 1) * float(st.riesz_gradient(T[k - 1], y) @ f_eval(sys, y))
    return abs(val) / (1.0 + np.linalg.norm(y) ** k)


# ---------------------------------------------------------------- synthesis


def synthesize(sys: QuadraticControlSystem, d: int, tol: float = 1e-10,
               riccati_tol: float = 1e-11) -> SynthesisResult:
    """Riccati solve for T_2 = Pi, then R_k / T_k for k = 3..d."""
    if d < 2:
        raise ValidationError(f"degree must be >= 2, got {d}")
    ric = solve_are(sys, tol=riccati_tol)
    chain = {2: SymTensor.from_dense(0.5 * (ric.Pi + ric.Pi.T))}
    equations = {}
    for k in range(3, d + 1):
        R = assemble_rhs(k, chain, sys)
        try:
            T = solve_chain_lyapunov(ric.A_pi, R, tol=tol)
        except SolverError as exc:
            raise SolverError(f"order {k}: {exc}", order=k) from exc
        res = lyap_residual(T, ric.A_pi, R)
        if res > tol:
            raise SolverError(f"order {k}: probe residual {res:.3e} exceeds {tol:.1e}", order=k)
        log.info("order %d: residual %.3e, |T_k| = %.3e", k, res, T.norm())
        chain[k] = T
        equations[k] = ChainEquation(k, ric.A_pi, R, T, res)
    exp = ValueExpansion(
        alpha=sys.alpha,
        B=sys.B,
        tensors=chain,
        system_hash=sys.hash(),
        residuals={k: eq.residual_norm for k, eq in equations.items()},
    )
    return SynthesisResult(exp, ric, equations)


# ---------------------------------------------------------------- archives


def save_chain(directory, result: SynthesisResult, extra: dict | None = None) -> None:
    exp = result.expansion
    tensors = {f"T{k}": exp.tensors[k] for k in sorted(exp.tensors)}
    manifest = {
        "system_hash": exp.system_hash,
        "d": exp.d,
        "alpha": repr(exp.alpha),
        "m": exp.B.shape[1],
        "B": ",".join(repr(float(v)) for v in exp.B.reshape(-1)),
        "solver": "schur-triangular",
        "schur_kind": "complex",
        "riccati_residual": repr(result.riccati.residual_norm),
        "spectral_abscissa": repr(result.riccati.spectral_abscissa),
    }
    for k, r in sorted(result.residuals.items()):
        manifest[f"residual_{k}"] = repr(r)
    manifest.update(extra or {})
    st.save_archive(directory, tensors, manifest)


def load_chain(directory, sys: QuadraticControlSystem | None = None) -> ValueExpansion:
    """Read a chain archive; with ``sys`` given, the system hash must match."""
    from .errors import ProvenanceError

    tensors, manifest = st.load_archive(directory)
    try:
        chain = {int(name[1:]): T for name, T in tensors.items()}
        alpha = float(manifest["alpha"])
        m = int(manifest["m"])
        B = np.array([float(v) for v in manifest["B"].split(",")])
        residuals = {int(key.split("_")[1]): float(v) for key, v in manifest.items()
                     if key.startswith("residual_")}
    except (KeyError, ValueError) as exc:
        raise ValidationError(f"{directory}: malformed chain manifest ({exc})") from None
    n = chain[2].dim
    exp = ValueExpansion(alpha=alpha, B=B.reshape(n, m), tensors=chain,
                         system_hash=manifest.get("system_hash", ""), residuals=residuals)
    if sys is not None and exp.system_hash != sys.hash():
        raise ProvenanceError(
            f"chain {directory} was synthesized for system {exp.system_hash}, not {sys.hash()}"
        )
    return exp
