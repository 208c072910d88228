"""Dense NLP machinery for small trajectory-optimization problems.

Three layers:

* a dual active-set solver for strictly convex QPs (equalities first, then
  most-violated inequalities; solves against a cached Cholesky of the
  Hessian with incremental Schur-complement factor updates),
* an SQP loop: damped-BFGS Hessian approximation, L1-merit Armijo line
  search, slack-based feasibility restoration when a subproblem is
  infeasible, KKT-based termination,
* first-order value sensitivities w.r.t. the problem's closed-over
  parameter vector via the Lagrangian envelope formula.

Problems are expected to arrive reasonably scaled (all quantities O(1));
the MPC builders take care of that.
"""

from __future__ import annotations

import csv
import enum
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.linalg import cho_factor, cho_solve, solve_triangular
from scipy.linalg.lapack import dpotri, dtrtrs


class NlpError(Exception):
    pass


class DegenerateSolution(NlpError):
    """A theta-coupled inequality is weakly active; the value gradient is
    not well defined at this solution."""


class SolveStatus(enum.Enum):
    SOLVED = "solved"
    MAX_ITER = "max_iter"
    INFEASIBLE = "infeasible"
    NUMERICAL_FAILURE = "numerical_failure"


@dataclass
class ProblemInstance:
    """A dense NLP: min f(z) s.t. c_eq(z) = 0, c_in(z) <= 0, lb <= z <= ub.

    Constraint callbacks take (z, jac) and return (values, jacobian-or-None);
    the objective callback returns (f, grad-or-None). `theta` is the
    parameter vector the callbacks close over; `theta_jacobians(z)` returns
    (df/dtheta, dc_eq/dtheta, dc_in/dtheta) for value sensitivities and may
    be None for problems without parameters.
    """

    n: int
    m_eq: int
    m_in: int
    objective: Callable
    eq_constraints: Callable | None
    in_constraints: Callable | None
    lb: np.ndarray
    ub: np.ndarray
    theta: np.ndarray | None = None
    theta_jacobians: Callable | None = None
    metadata: dict = field(default_factory=dict)

    def eval_objective(self, z, grad=False):
        f, g = self.objective(z, grad)
        return float(f), g

    def eval_eq(self, z, jac=False):
        if self.m_eq == 0:
            return np.zeros(0), (np.zeros((0, self.n)) if jac else None)
        return self.eq_constraints(z, jac)

    def eval_in(self, z, jac=False):
        if self.m_in == 0:
            return np.zeros(0), (np.zeros((0, self.n)) if jac else None)
        return self.in_constraints(z, jac)


@dataclass
class Solution:
    z: np.ndarray
    lam_eq: np.ndarray
    mu_in: np.ndarray
    mu_lb: np.ndarray
    mu_ub: np.ndarray
    obj: float
    status: SolveStatus
    iterations: int
    kkt_res: float

    @property
    def solved(self) -> bool:
        return self.status is SolveStatus.SOLVED


@dataclass
class SqpOptions:
    tol_kkt: float = 1e-8
    max_iter: int = 200
    armijo: float = 1e-4
    max_backtracks: int = 40
    bfgs_damping: float = 0.2
    qp_feas_tol: float = 1e-10


# ---------------------------------------------------------------------------
# dual active-set QP
# ---------------------------------------------------------------------------

class QpInfeasible(Exception):
    pass


class QpFailure(Exception):
    pass


def _chol_with_jitter(G):
    jitter = 0.0
    for _ in range(4):
        try:
            return cho_factor(
                G if jitter == 0.0 else G + jitter * np.eye(G.shape[0]),
                lower=True)
        except np.linalg.LinAlgError:
            jitter = max(jitter * 100.0,
                         1e-10 * max(np.trace(G) / G.shape[0], 1.0))
    raise QpFailure("Hessian not positive definite")


class _ActiveSet:
    """Active rows with Y = G^{-1}N and an incremental Cholesky of N'G^{-1}N.

    Buffers are preallocated to capacity n + m_eq (an independent active set
    can never be larger) so appends are O(m n) writes, not reallocations.
    """

    def __init__(self, n, cap):
        self.n = n
        self.cap = cap
        self.m = 0
        self.ids = np.zeros(cap, dtype=int)
        self.is_eq = np.zeros(cap, dtype=bool)
        self._Y = np.zeros((n, cap))
        self._M = np.zeros((cap, cap))
        self._Lm = np.zeros((cap, cap))
        self._u = np.zeros(cap)

    def __len__(self):
        return self.m

    @property
    def u(self):
        return self._u[:self.m]

    def directions(self, normal, yplus):
        """Projected primal direction z and multiplier sensitivity r.

        Also stages the Schur column so an immediately following append()
        reuses it.
        """
        m = self.m
        self._pending_diag = float(normal @ yplus)
        if m == 0:
            self._pending_w = np.zeros(0)
            return yplus, np.zeros(0)
        Y = self._Y[:, :m]
        Lm = self._Lm[:m, :m]
        w = Y.T @ normal
        self._pending_w = w
        half, _ = dtrtrs(Lm, w, lower=1)
        r, _ = dtrtrs(Lm, half, lower=1, trans=1)
        return yplus - Y @ r, r

    def append(self, idx, is_eq, yplus, mult):
        m = self.m
        if m >= self.cap:
            raise QpFailure("active set exceeded capacity")
        diag = float(self._pending_diag)
        if m == 0:
            if diag <= 0.0:
                raise QpFailure("dependent constraint at first position")
            self._Lm[0, 0] = np.sqrt(diag)
            self._M[0, 0] = diag
        else:
            w = self._pending_w
            lw, _ = dtrtrs(self._Lm[:m, :m], w, lower=1)
            d2 = diag - float(lw @ lw)
            if d2 <= 1e-12 * max(diag, 1.0):
                raise QpFailure("dependent constraint added to active set")
            self._M[:m, m] = w
            self._M[m, :m] = w
            self._M[m, m] = diag
            self._Lm[m, :m] = lw
            self._Lm[m, m] = np.sqrt(d2)
        self.ids[m] = idx
        self.is_eq[m] = is_eq
        self._Y[:, m] = yplus
        self._u[m] = mult
        self.m = m + 1

    def drop(self, pos):
        m = self.m
        keep = np.concatenate([np.arange(0, pos), np.arange(pos + 1, m)])
        last = m - 1
        self.ids[:last] = self.ids[keep]
        self.is_eq[:last] = self.is_eq[keep]
        self._Y[:, :last] = self._Y[:, keep]
        self._u[:last] = self._u[keep]
        self._M[:last, :last] = self._M[np.ix_(keep, keep)]
        self.m = last
        if last:
            self._Lm[:last, :last] = np.linalg.cholesky(self._M[:last, :last])


@dataclass
class QpResult:
    x: np.ndarray
    lam_eq: np.ndarray
    mu_in: np.ndarray
    iterations: int


def solve_qp(G, a, A_eq=None, b_eq=None, A_in=None, b_in=None,
             feas_tol=1e-10, max_iter=None):
    """Strictly convex QP: min 1/2 x'Gx + a'x, A_eq x = b_eq, A_in x <= b_in.

    Dual active-set method. Raises QpInfeasible when no feasible point
    exists and QpFailure on numerical breakdown. Multiplier conventions:
    stationarity is G x + a + A_eq' lam + A_in' mu = 0 with mu >= 0.
    """
    G = np.asarray(G, dtype=float)
    a = np.asarray(a, dtype=float)
    n = a.size
    A_eq = np.zeros((0, n)) if A_eq is None else np.asarray(A_eq, dtype=float)
    b_eq = np.zeros(0) if b_eq is None else np.asarray(b_eq, dtype=float)
    A_in = np.zeros((0, n)) if A_in is None else np.asarray(A_in, dtype=float)
    b_in = np.zeros(0) if b_in is None else np.asarray(b_in, dtype=float)
    m_eq, m_in = A_eq.shape[0], A_in.shape[0]
    if max_iter is None:
        max_iter = 50 * (n + m_eq + m_in + 10)

    cho = _chol_with_jitter(G)
    inv_tri, info = dpotri(cho[0], lower=True)
    if info != 0:
        raise QpFailure("Hessian inversion failed")
    G_inv = np.tril(inv_tri) + np.tril(inv_tri, -1).T

    def g_solve(w):
        nz = np.nonzero(w)[0]
        if nz.size <= max(4, n // 16):
            return G_inv[:, nz] @ w[nz]
        return G_inv @ w

    x = -(G_inv @ a)
    active = _ActiveSet(n, cap=n + 1)
    eq_flip = np.ones(m_eq)
    iters = 0

    def drive_in(idx, normal, target, is_eq):
        """Add internal constraint normal'x >= target to the active set."""
        nonlocal x, iters
        accumulated = 0.0
        yplus = g_solve(normal)
        dep_scale = max(abs(float(normal @ yplus)), 1.0)
        while True:
            iters += 1
            if iters > max_iter:
                raise QpFailure("active-set iteration limit")
            z, r = active.directions(normal, yplus)
            s = float(normal @ x - target)
            ztn = float(normal @ z)
            t1 = np.inf
            if ztn > 1e-13 * dep_scale:
                t1 = max(0.0, -s / ztn)
            t2 = np.inf
            kstar = -1
            m = active.m
            if m:
                r_arr = np.asarray(r)
                mask = (~active.is_eq[:m]) & (r_arr > 1e-13)
                if mask.any():
                    bounds = active._u[:m][mask] / r_arr[mask]
                    j = int(np.argmin(bounds))
                    t2 = float(bounds[j])
                    kstar = int(np.where(mask)[0][j])
            t = min(t1, t2)
            if not np.isfinite(t):
                if is_eq:
                    raise QpFailure("inconsistent or dependent equality rows")
                raise QpInfeasible(f"inequality {idx} cannot be satisfied")
            if t > 0.0:
                x = x + t * z
                if m:
                    active._u[:m] -= t * r
                accumulated += t
            if t2 < t1:
                active.drop(kstar)
                continue
            active.append(idx, is_eq, yplus, accumulated)
            return

    # phase 0: all equalities in one block solve (multipliers sign-free)
    if m_eq:
        Y_eq = G_inv @ A_eq.T
        M_eq = A_eq @ Y_eq
        try:
            Lm_eq = np.linalg.cholesky(M_eq)
        except np.linalg.LinAlgError:
            raise QpFailure("inconsistent or dependent equality rows") from None
        resid = b_eq - A_eq @ x
        t_eq = solve_triangular(
            Lm_eq.T, solve_triangular(Lm_eq, resid, lower=True,
                                      check_finite=False),
            lower=False, check_finite=False)
        x = x + Y_eq @ t_eq
        active.ids[:m_eq] = np.arange(m_eq)
        active.is_eq[:m_eq] = True
        active._Y[:, :m_eq] = Y_eq
        active._M[:m_eq, :m_eq] = M_eq
        active._Lm[:m_eq, :m_eq] = Lm_eq
        active._u[:m_eq] = t_eq
        active.m = m_eq
        iters += m_eq

    # phase 1: inequalities, most violated first
    while m_in:
        resid = A_in @ x - b_in
        mem = active.ids[:active.m]
        ineq_members = mem[mem >= m_eq] - m_eq
        resid[ineq_members] = -np.inf
        worst = int(np.argmax(resid))
        if resid[worst] <= feas_tol:
            break
        drive_in(m_eq + worst, -A_in[worst], -b_in[worst], is_eq=False)

    lam_eq = np.zeros(m_eq)
    mu_in = np.zeros(m_in)
    mem = active.ids[:active.m]
    u_fin = active._u[:active.m]
    eq_sel = mem < m_eq
    # internal normal was flip*A_eq; stationarity Gx+a = sum n*u
    lam_eq[mem[eq_sel]] = -eq_flip[mem[eq_sel]] * u_fin[eq_sel]
    mu_in[mem[~eq_sel] - m_eq] = u_fin[~eq_sel]
    return QpResult(x=x, lam_eq=lam_eq, mu_in=mu_in, iterations=iters)


# ---------------------------------------------------------------------------
# SQP
# ---------------------------------------------------------------------------

def _finite_rows(lb, ub):
    return np.where(np.isfinite(lb))[0], np.where(np.isfinite(ub))[0]


class _Evaluator:
    """Caches one full evaluation of the problem at a point."""

    def __init__(self, prob: ProblemInstance, z, jac=True):
        self.z = z
        with np.errstate(all="ignore"):
            self.f, self.g = prob.eval_objective(z, grad=jac)
            self.c_eq, self.J_eq = prob.eval_eq(z, jac=jac)
            self.c_in, self.J_in = prob.eval_in(z, jac=jac)

    @property
    def finite(self):
        vals = [self.f, self.c_eq, self.c_in]
        if self.g is not None:
            vals += [self.g, self.J_eq, self.J_in]
        return all(np.all(np.isfinite(v)) for v in vals if v is not None)

    def infeas_l1(self):
        return (np.abs(self.c_eq).sum()
                + np.maximum(0.0, self.c_in).sum())

    def merit(self, rho):
        return self.f + rho * self.infeas_l1()


def _grad_lagrangian(ev: _Evaluator, lam, mu):
    g = ev.g.copy()
    if lam.size:
        g += ev.J_eq.T @ lam
    if mu.size:
        g += ev.J_in.T @ mu
    return g


def kkt_residual_parts(prob: ProblemInstance, z, lam_eq, mu_in, mu_lb, mu_ub,
                       ev: _Evaluator | None = None) -> float:
    """Max-norm KKT residual: stationarity, feasibility, dual, complementarity."""
    ev = ev or _Evaluator(prob, z, jac=True)
    stat = _grad_lagrangian(ev, lam_eq, mu_in)
    lb_rows, ub_rows = _finite_rows(prob.lb, prob.ub)
    stat[lb_rows] -= mu_lb[lb_rows]
    stat[ub_rows] += mu_ub[ub_rows]
    parts = [np.abs(stat).max(initial=0.0)]
    parts.append(np.abs(ev.c_eq).max(initial=0.0))
    parts.append(np.maximum(0.0, ev.c_in).max(initial=0.0))
    parts.append(np.maximum(0.0, prob.lb - z).max(initial=0.0))
    parts.append(np.maximum(0.0, z - prob.ub).max(initial=0.0))
    parts.append(np.maximum(0.0, -mu_in).max(initial=0.0))
    parts.append(np.maximum(0.0, -mu_lb).max(initial=0.0))
    parts.append(np.maximum(0.0, -mu_ub).max(initial=0.0))
    if mu_in.size:
        parts.append(np.abs(mu_in * ev.c_in).max(initial=0.0))
    if lb_rows.size:
        parts.append(np.abs(mu_lb[lb_rows] * (z - prob.lb)[lb_rows]).max(initial=0.0))
    if ub_rows.size:
        parts.append(np.abs(mu_ub[ub_rows] * (z - prob.ub)[ub_rows]).max(initial=0.0))
    return float(max(parts))


def kkt_residual(prob: ProblemInstance, sol: Solution) -> float:
    return kkt_residual_parts(prob, sol.z, sol.lam_eq, sol.mu_in,
                              sol.mu_lb, sol.mu_ub)


def _assemble_qp_inequalities(prob, ev, z):
    """Linearized general inequalities plus finite box rows on the step d."""
    n = prob.n
    lb_rows, ub_rows = _finite_rows(prob.lb, prob.ub)
    blocks_A, blocks_b = [], []
    if prob.m_in:
        blocks_A.append(ev.J_in)
        blocks_b.append(-ev.c_in)
    if lb_rows.size:
        E = np.zeros((lb_rows.size, n))
        E[np.arange(lb_rows.size), lb_rows] = -1.0
        blocks_A.append(E)
        blocks_b.append((z - prob.lb)[lb_rows])
    if ub_rows.size:
        E = np.zeros((ub_rows.size, n))
        E[np.arange(ub_rows.size), ub_rows] = 1.0
        blocks_A.append(E)
        blocks_b.append((prob.ub - z)[ub_rows])
    if blocks_A:
        return np.vstack(blocks_A), np.concatenate(blocks_b), lb_rows, ub_rows
    return np.zeros((0, n)), np.zeros(0), lb_rows, ub_rows


def _split_qp_multipliers(prob, mu_all, lb_rows, ub_rows):
    mu_in = mu_all[:prob.m_in]
    mu_lb = np.zeros(prob.n)
    mu_ub = np.zeros(prob.n)
    off = prob.m_in
    mu_lb[lb_rows] = mu_all[off:off + lb_rows.size]
    off += lb_rows.size
    mu_ub[ub_rows] = mu_all[off:off + ub_rows.size]
    return mu_in, mu_lb, mu_ub


def _restoration_step(B, g, ev, A_in_rows, b_in_rows, rho):
    """Elastic QP: relax constraints with L1-penalized slacks.

    Variables (d, s+, s-, t): equality rows get signed slacks, inequality
    rows one-sided slacks. Always feasible; used when the plain subproblem
    is infeasible. Returns the step d.
    """
    n = B.shape[0]
    m_eq = ev.c_eq.shape[0]
    m_in = b_in_rows.shape[0]
    n_tot = n + 2 * m_eq + m_in
    eps = 1e-8
    G = np.zeros((n_tot, n_tot))
    G[:n, :n] = B
    idx = np.arange(n, n_tot)
    G[idx, idx] = eps
    a = np.zeros(n_tot)
    a[:n] = g
    a[n:] = rho
    A_eq = np.zeros((m_eq, n_tot))
    if m_eq:
        A_eq[:, :n] = ev.J_eq
        A_eq[:, n:n + m_eq] = -np.eye(m_eq)
        A_eq[:, n + m_eq:n + 2 * m_eq] = np.eye(m_eq)
    rows = []
    rhs = []
    if m_in:
        Ain = np.zeros((m_in, n_tot))
        Ain[:, :n] = A_in_rows
        Ain[:, n + 2 * m_eq:] = -np.eye(m_in)
        rows.append(Ain)
        rhs.append(b_in_rows)
    nonneg = np.zeros((2 * m_eq + m_in, n_tot))
    nonneg[:, n:] = -np.eye(2 * m_eq + m_in)
    rows.append(nonneg)
    rhs.append(np.zeros(2 * m_eq + m_in))
    res = solve_qp(G, a, A_eq, -ev.c_eq, np.vstack(rows), np.concatenate(rhs))
    return res.x[:n]


def solve(prob: ProblemInstance, z_init, multiplier_init=None,
          options: SqpOptions | None = None, trace_path=None) -> Solution:
    """SQP solve of a dense NLP; deterministic given identical inputs.

    `multiplier_init` may be a Solution or a (lam_eq, mu_in, mu_lb, mu_ub)
    tuple; used for the initial KKT check (warm re-solves return
    immediately) and the initial merit penalty.
    """
    opts = options or SqpOptions()
    n = prob.n
    z = np.clip(np.asarray(z_init, dtype=float), prob.lb, prob.ub)
    if multiplier_init is None:
        lam = np.zeros(prob.m_eq)
        mu = np.zeros(prob.m_in)
        mu_lb = np.zeros(n)
        mu_ub = np.zeros(n)
    elif isinstance(multiplier_init, Solution):
        lam = multiplier_init.lam_eq.copy()
        mu = multiplier_init.mu_in.copy()
        mu_lb = multiplier_init.mu_lb.copy()
        mu_ub = multiplier_init.mu_ub.copy()
    else:
        lam, mu, mu_lb, mu_ub = (np.asarray(v, dtype=float).copy()
                                 for v in multiplier_init)

    trace_rows = []
    B = np.eye(n)
    rho = 1.0
    ev = _Evaluator(prob, z, jac=True)
    if not ev.finite:
        return Solution(z, lam, mu, mu_lb, mu_ub, np.nan,
                        SolveStatus.NUMERICAL_FAILURE, 0, np.inf)

    best = None
    status = SolveStatus.MAX_ITER
    it = 0
    for it in range(opts.max_iter + 1):
        kkt = kkt_residual_parts(prob, z, lam, mu, mu_lb, mu_ub, ev)
        if best is None or kkt < best[0]:
            best = (kkt, z.copy(), lam.copy(), mu.copy(), mu_lb.copy(),
                    mu_ub.copy(), ev.f)
        if trace_path is not None:
            trace_rows.append([it, ev.merit(rho), kkt])
        if kkt <= opts.tol_kkt:
            status = SolveStatus.SOLVED
            break
        if it == opts.max_iter:
            break

        A_in, b_in, lb_rows, ub_rows = _assemble_qp_inequalities(prob, ev, z)
        restored = False
        try:
            qp = solve_qp(B, ev.g, ev.J_eq, -ev.c_eq, A_in, b_in,
                          feas_tol=opts.qp_feas_tol)
            d = qp.x
            lam_new = qp.lam_eq
            mu_new, mu_lb_new, mu_ub_new = _split_qp_multipliers(
                prob, qp.mu_in, lb_rows, ub_rows)
        except QpInfeasible:
            restored = True
            d = _restoration_step(B, ev.g, ev, A_in[:prob.m_in],
                                  b_in[:prob.m_in], max(rho, 1e2))
            d = np.clip(z + d, prob.lb, prob.ub) - z
            lam_new, mu_new = lam, mu
            mu_lb_new, mu_ub_new = mu_lb, mu_ub
        except QpFailure:
            status = SolveStatus.NUMERICAL_FAILURE
            break

        if not np.all(np.isfinite(d)):
            status = SolveStatus.NUMERICAL_FAILURE
            break

        mult_norm = max(
            np.abs(lam_new).max(initial=0.0),
            np.abs(mu_new).max(initial=0.0),
            np.abs(mu_lb_new).max(initial=0.0),
            np.abs(mu_ub_new).max(initial=0.0),
        )
        rho = max(rho, 1.5 * mult_norm + 1e-2)

        merit0 = ev.merit(rho)
        ddir = float(ev.g @ d) - rho * ev.infeas_l1()
        step = 1.0
        accepted = None
        for _ in range(opts.max_backtracks):
            trial = _Evaluator(prob, z + step * d, jac=False)
            if trial.finite and (trial.merit(rho)
                                 <= merit0 + opts.armijo * step * min(ddir, 0.0)):
                accepted = trial
                break
            step *= 0.5
        if accepted is None:
            # stalled line search: report the best iterate seen
            status = (SolveStatus.INFEASIBLE if restored
                      else SolveStatus.MAX_ITER)
            break

        z_new = z + step * d
        ev_new = _Evaluator(prob, z_new, jac=True)
        if not ev_new.finite:
            status = SolveStatus.NUMERICAL_FAILURE
            break

        if restored and ev_new.infeas_l1() > (1.0 - 1e-3) * ev.infeas_l1():
            # restoration makes no progress on infeasibility
            status = SolveStatus.INFEASIBLE
            z, ev = z_new, ev_new
            break

        # damped BFGS on the Lagrangian gradient
        s = z_new - z
        y_vec = (_grad_lagrangian(ev_new, lam_new, mu_new)
                 - _grad_lagrangian(ev, lam_new, mu_new))
        sBs = float(s @ B @ s)
        sy = float(s @ y_vec)
        if sBs > 0.0 and float(s @ s) > 1e-30:
            if sy < opts.bfgs_damping * sBs:
                theta_mix = (1.0 - opts.bfgs_damping) * sBs / (sBs - sy)
                y_vec = theta_mix * y_vec + (1.0 - theta_mix) * (B @ s)
                sy = float(s @ y_vec)
            if sy > 1e-12 * sBs:
                Bs = B @ s
                B = (B - np.outer(Bs, Bs) / sBs + np.outer(y_vec, y_vec) / sy)

        z, ev = z_new, ev_new
        lam, mu, mu_lb, mu_ub = lam_new, mu_new, mu_lb_new, mu_ub_new

    if status is not SolveStatus.SOLVED and best is not None:
        # return the best-KKT iterate rather than the last one
        kkt, z, lam, mu, mu_lb, mu_ub, fbest = best
        if kkt <= opts.tol_kkt:
            status = SolveStatus.SOLVED
    kkt_final = best[0] if best is not None else np.inf
    f_final = prob.eval_objective(z)[0]

    if trace_path is not None:
        with open(trace_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["iteration", "merit", "kkt_residual"])
            writer.writerows(trace_rows)

    return Solution(z=z, lam_eq=lam, mu_in=mu, mu_lb=mu_lb, mu_ub=mu_ub,
                    obj=f_final, status=status, iterations=it,
                    kkt_res=float(kkt_final))


# ---------------------------------------------------------------------------
# parametric value sensitivities
# ---------------------------------------------------------------------------

def value_gradient(prob: ProblemInstance, sol: Solution,
                   degenerate_eps: float = 1e-6) -> np.ndarray:
    """Gradient of the optimal value w.r.t. the closed-over parameters.

    Envelope formula: d/dtheta of the Lagrangian at the primal-dual solution.
    Raises DegenerateSolution when a theta-coupled inequality is weakly
    active (both the residual and its multiplier within `degenerate_eps`);
    rows with an identically zero theta-Jacobian cannot contribute and are
    exempt from the check.
    """
    if not sol.solved:
        raise NlpError(f"value_gradient requires a solved problem, got {sol.status}")
    if prob.theta_jacobians is None:
        raise NlpError("problem carries no theta jacobians")
    df_dth, dceq_dth, dcin_dth = prob.theta_jacobians(sol.z)
    grad = np.asarray(df_dth, dtype=float).copy()
    if prob.m_eq:
        grad += dceq_dth.T @ sol.lam_eq
    if prob.m_in:
        c_in, _ = prob.eval_in(sol.z, jac=False)
        coupled = np.abs(dcin_dth).sum(axis=1) > 0.0
        weak = (coupled & (np.abs(c_in) <= degenerate_eps)
                & (sol.mu_in <= degenerate_eps) & (c_in >= -degenerate_eps))
        if np.any(weak):
            rows = np.where(weak)[0][:5]
            raise DegenerateSolution(
                f"weakly active theta-coupled inequalities at rows {rows}")
        grad += dcin_dth.T @ sol.mu_in
    return grad
