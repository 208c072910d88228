"""Parametrized MPC problems: value function, policy, and baseline variants.

One trajectory NLP serves every controller variant. Decision vector
(scaled): shared inputs u(0..N-1), then per-sample states x(0..N), then
per-sample slacks sigma(0..N). The learned variant has one sample whose
dynamics use the learnable parameters theta_p and whose cost weights are
learnable; the ideal/nominal baselines are the same problem with fixed
parameters; the robust variant carries n sampled parameter vectors and
averages their costs over one shared input sequence.

Internally everything is scaled to O(1): states, inputs and slacks are
divided by physical scales, constraint rows by their natural ranges, and
the objective by F_SCALE. Reported values and parameter gradients are
mapped back to raw units.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .env import DU_MAX, U_MAX, U_MIN, Y_RANGE, output_bounds
from .model import output_generic, rk4_step_generic
from .nlp import (
    ProblemInstance,
    Solution,
    SolveStatus,
    SqpOptions,
    solve,
    value_gradient,
)

THETA_DIM = 39

# decision-variable scales
X_SCALE = np.array([0.1, 1e-3, 15.0, 1e-2])
SIGMA_SCALE = np.array([100.0, 1.6, 5.0, 70.0])
ROW_SCALE = np.array([100.0, 1.6, 5.0, 70.0])  # output-constraint rows
F_SCALE = 1e4

# wide safety box on physical states: keeps line-search trials inside the
# domain where the model formulas stay finite; never active at solutions
X_SAFETY_LO = np.array([-0.5, -0.02, -40.0, -0.05])
X_SAFETY_HI = np.array([2.0, 0.06, 80.0, 0.25])


@dataclass(frozen=True)
class ThetaVector:
    """The 39 learnable MPC parameters with their box bounds.

    Layout of the flat vector: [theta0, dy1, u(3), omega(4), y1f, yN, p(28)].
    """

    theta0: float
    dy1: float
    u: np.ndarray
    omega: np.ndarray
    y1f: float
    yN: float
    p: np.ndarray
    lb: np.ndarray
    ub: np.ndarray

    def __post_init__(self):
        for name, size in (("u", 3), ("omega", 4), ("p", 28),
                           ("lb", THETA_DIM), ("ub", THETA_DIM)):
            arr = np.asarray(getattr(self, name), dtype=float)
            object.__setattr__(self, name, arr)
            if arr.shape != (size,):
                raise ValueError(f"{name} must have shape ({size},)")
        vec = self.as_vector()
        if np.any(vec < self.lb - 1e-12) or np.any(vec > self.ub + 1e-12):
            raise ValueError("theta outside its bounds")

    def as_vector(self) -> np.ndarray:
        return np.concatenate([[self.theta0, self.dy1], self.u, self.omega,
                               [self.y1f, self.yN], self.p])

    @classmethod
    def from_vector(cls, vec, lb, ub) -> "ThetaVector":
        vec = np.asarray(vec, dtype=float)
        return cls(theta0=float(vec[0]), dy1=float(vec[1]),
                   u=vec[2:5].copy(), omega=vec[5:9].copy(),
                   y1f=float(vec[9]), yN=float(vec[10]), p=vec[11:].copy(),
                   lb=np.asarray(lb, float).copy(),
                   ub=np.asarray(ub, float).copy())

    def replace_vector(self, vec) -> "ThetaVector":
        return ThetaVector.from_vector(vec, self.lb, self.ub)

    def to_json(self) -> str:
        return json.dumps({
            "theta0": self.theta0, "dy1": self.dy1,
            "u": self.u.tolist(), "omega": self.omega.tolist(),
            "y1f": self.y1f, "yN": self.yN, "p": self.p.tolist(),
            "lb": [None if not np.isfinite(v) else v for v in self.lb],
            "ub": [None if not np.isfinite(v) else v for v in self.ub],
        }, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "ThetaVector":
        d = json.loads(text)
        lb = np.array([-np.inf if v is None else v for v in d["lb"]])
        ub = np.array([np.inf if v is None else v for v in d["ub"]])
        return cls(theta0=d["theta0"], dy1=d["dy1"], u=np.array(d["u"]),
                   omega=np.array(d["omega"]), y1f=d["y1f"], yN=d["yN"],
                   p=np.array(d["p"]), lb=lb, ub=ub)


def theta_bounds(p_true) -> tuple[np.ndarray, np.ndarray]:
    """Box bounds: theta0 free, cost weights nonnegative, p in (0.5, 1.5)|p|."""
    p_true = np.asarray(p_true, dtype=float)
    lb = np.concatenate([[-np.inf], np.zeros(10), 0.5 * np.abs(p_true)])
    ub = np.concatenate([[np.inf], np.full(10, np.inf), 1.5 * np.abs(p_true)])
    return lb, ub


def make_theta(p, theta0=0.0, dy1=100.0, u=(10.0, 1.0, 1.0),
               omega=(1e5, 1e5, 1e5, 1e5), y1f=1.0, yN=135.0,
               p_true=None) -> ThetaVector:
    """ThetaVector at the canonical initial cost weights with given model p."""
    lb, ub = theta_bounds(p if p_true is None else p_true)
    return ThetaVector(theta0=theta0, dy1=dy1, u=np.asarray(u, float),
                       omega=np.asarray(omega, float), y1f=y1f, yN=yN,
                       p=np.asarray(p, float), lb=lb, ub=ub)


def sample_params(rng, p_true, halfwidth=0.2) -> np.ndarray:
    """One draw from the parametric-uncertainty distribution."""
    p_true = np.asarray(p_true, dtype=float)
    return rng.uniform(p_true - halfwidth * np.abs(p_true),
                       p_true + halfwidth * np.abs(p_true))


def theta_init(rng, p_true) -> ThetaVector:
    """Initial parametrization: canonical cost weights, p sampled from the
    uncertainty range."""
    return make_theta(sample_params(rng, p_true), p_true=p_true)


@dataclass(frozen=True)
class MpcConfig:
    N: int = 24
    gamma: float = 0.99
    dt: float = 900.0
    u_min: np.ndarray = field(default_factory=lambda: U_MIN.copy())
    u_max: np.ndarray = field(default_factory=lambda: U_MAX.copy())
    y_range: np.ndarray = field(default_factory=lambda: Y_RANGE.copy())
    tol_kkt: float = 1e-8
    max_iter: int = 200

    def __post_init__(self):
        if self.N < 1:
            raise ValueError("horizon must be >= 1")
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("gamma must be in (0, 1]")

    @property
    def du_max(self) -> np.ndarray:
        return self.u_max / 10.0

    def solver_options(self) -> SqpOptions:
        return SqpOptions(tol_kkt=self.tol_kkt, max_iter=self.max_iter)


class MpcLayout:
    """Index map of the scaled decision vector for S samples and horizon N."""

    def __init__(self, N: int, S: int):
        self.N = N
        self.S = S
        self.n_u = 3 * N
        self.n_x1 = 4 * (N + 1)
        self.n = self.n_u + S * 2 * self.n_x1
        self.x_off = self.n_u
        self.sig_off = self.n_u + S * self.n_x1

    def u_slice(self, k):
        return slice(3 * k, 3 * k + 3)

    def x_slice(self, s, k):
        base = self.x_off + s * self.n_x1 + 4 * k
        return slice(base, base + 4)

    def sig_slice(self, s, k):
        base = self.sig_off + s * self.n_x1 + 4 * k
        return slice(base, base + 4)

    def unpack(self, z):
        """Scaled z -> physical (U, X, Sigma) with shapes (N,3), (S,N+1,4)."""
        N, S = self.N, self.S
        U = z[:self.n_u].reshape(N, 3) * U_MAX
        X = (z[self.x_off:self.x_off + S * self.n_x1]
             .reshape(S, N + 1, 4) * X_SCALE)
        Sig = (z[self.sig_off:self.sig_off + S * self.n_x1]
               .reshape(S, N + 1, 4) * SIGMA_SCALE)
        return U, X, Sig

    def pack(self, U, X, Sig):
        return np.concatenate([
            (U / U_MAX).ravel(),
            (X / X_SCALE).ravel(),
            (Sig / SIGMA_SCALE).ravel(),
        ])


@dataclass(frozen=True)
class CostWeights:
    """Objective weights of the trajectory NLP (a theta snapshot)."""

    theta0: float
    dy1: float
    u: np.ndarray
    omega: np.ndarray
    y1f: float
    yN: float

    @classmethod
    def from_theta(cls, th: ThetaVector):
        return cls(th.theta0, th.dy1, th.u, th.omega, th.y1f, th.yN)


class TrajectoryNlp:
    """The dense NLP behind V_theta / Q_theta and the baseline variants."""

    def __init__(self, p_list, weights: CostWeights, x0, d_preview, u_prev,
                 cfg: MpcConfig, theta: ThetaVector | None = None,
                 pinned_u0=None):
        p_list = np.atleast_2d(np.asarray(p_list, dtype=float))
        self.S = p_list.shape[0]
        self.p_list = p_list
        self.w = weights
        self.x0 = np.asarray(x0, dtype=float)
        d_preview = np.asarray(d_preview, dtype=float)
        if d_preview.shape[0] < cfg.N + 1:
            raise ValueError("disturbance preview shorter than N + 1")
        self.D = d_preview[:cfg.N + 1]
        self.u_prev = np.asarray(u_prev, dtype=float)
        self.cfg = cfg
        self.theta = theta
        self.pinned_u0 = (None if pinned_u0 is None
                          else np.asarray(pinned_u0, dtype=float))
        self.layout = MpcLayout(cfg.N, self.S)

        N, S = cfg.N, self.S
        self.m_eq = S * 4 * (N + 1) + (3 if self.pinned_u0 is not None else 0)
        # inequalities: input rate rows, then per sample/stage output rows
        self.m_rate = 6 * N
        self.m_out = S * (N + 1) * 7
        self.m_in = self.m_rate + self.m_out

        bounds = [output_bounds(d1) for d1 in self.D[:, 0]]
        self.y_min = np.array([b[0] for b in bounds])
        self.y_max = np.array([b[1] for b in bounds])

        self._build_static()

    # -- static pieces ---------------------------------------------------

    def _build_static(self):
        lay, cfg, N, S = self.layout, self.cfg, self.cfg.N, self.S
        n = lay.n

        # objective: linear in z
        gamma = cfg.gamma
        gk = gamma ** np.arange(N + 1)
        c = np.zeros(n)
        w = self.w
        # dry-weight telescoping terms on y1(k) = 1000 x1(k)
        a_x1 = np.zeros(N + 1)
        a_x1[0] = w.dy1 * gamma
        if N > 1:
            ks = np.arange(1, N)
            a_x1[ks] = -w.dy1 * (gk[ks] - gk[ks + 1])
        a_x1[N] = -w.dy1 * gk[N] * (1.0 - w.y1f)
        for s in range(S):
            for k in range(N + 1):
                xs = lay.x_slice(s, k)
                c[xs.start] += (a_x1[k] * 1000.0) * X_SCALE[0] / S
        # input penalty
        for k in range(N):
            c[lay.u_slice(k)] = gk[k] * w.u * U_MAX
        # slack penalty (first output has infinite range: zero weight)
        sig_w = np.where(np.isfinite(cfg.y_range),
                         w.omega / np.where(np.isfinite(cfg.y_range),
                                            cfg.y_range, 1.0),
                         0.0)
        for s in range(S):
            for k in range(N + 1):
                c[lay.sig_slice(s, k)] = gk[k] * sig_w * SIGMA_SCALE / S
        self.obj_const = w.theta0 - w.y1f * gk[N] * w.dy1 * w.yN
        self.c_obj = c / F_SCALE

        # box bounds on z
        lb = np.empty(n)
        ub = np.empty(n)
        for k in range(N):
            lb[lay.u_slice(k)] = cfg.u_min / U_MAX
            ub[lay.u_slice(k)] = cfg.u_max / U_MAX
        for s in range(S):
            for k in range(N + 1):
                lb[lay.x_slice(s, k)] = X_SAFETY_LO / X_SCALE
                ub[lay.x_slice(s, k)] = X_SAFETY_HI / X_SCALE
                lb[lay.sig_slice(s, k)] = 0.0
                ub[lay.sig_slice(s, k)] = np.inf
        self.lb, self.ub = lb, ub

        # input-rate rows: (u(k) - u(k-1) - du)/du <= 0 and the mirror
        A = np.zeros((self.m_rate, n))
        b_const = np.empty(self.m_rate)
        ratio = U_MAX / cfg.du_max  # = 10 per component
        uhat_prev = self.u_prev / U_MAX
        for k in range(N):
            rp = slice(6 * k, 6 * k + 3)
            rm = slice(6 * k + 3, 6 * k + 6)
            us = lay.u_slice(k)
            A[rp, us] = np.diag(ratio)
            A[rm, us] = -np.diag(ratio)
            if k == 0:
                b_const[rp] = -ratio * uhat_prev - 1.0
                b_const[rm] = ratio * uhat_prev - 1.0
            else:
                up = lay.u_slice(k - 1)
                A[rp, up] = -np.diag(ratio)
                A[rm, up] = np.diag(ratio)
                b_const[rp] = -1.0
                b_const[rm] = -1.0
        self.A_rate = A
        self.b_rate = b_const

        # constant slack coefficients in the output rows: -sigma_i/rs_i with
        # sigma scaled by SIGMA_SCALE == ROW_SCALE gives exactly -1
        self.out_row_scale = ROW_SCALE

    # -- dynamics and outputs, batched -----------------------------------

    def _sim_parts(self, X, U, dual_dirs=None, theta_dirs=False):
        """Batch-evaluate next states over all samples and stages.

        Returns component tuples shaped (S, N); with `dual_dirs` the
        components are Duals seeded over (x(4), u(3)); with `theta_dirs`
        over the 28 model parameters.
        """
        S, N = self.S, self.cfg.N
        shape = (S, N)
        Xk = X[:, :N]
        if dual_dirs:
            xs = [ad.seed(Xk[:, :, i], i, 7, shape) for i in range(4)]
            us = [ad.seed(np.broadcast_to(U[:, j], shape), 4 + j, 7, shape)
                  for j in range(3)]
            ps = [self.p_list[:, j][:, None] for j in range(28)]
        elif theta_dirs:
            xs = [Xk[:, :, i] for i in range(4)]
            us = [np.broadcast_to(U[:, j], shape) for j in range(3)]
            ps = [ad.seed(self.p_list[:, j][:, None], j, 28, (self.S, 1))
                  for j in range(28)]
        else:
            xs = [Xk[:, :, i] for i in range(4)]
            us = [np.broadcast_to(U[:, j], shape) for j in range(3)]
            ps = [self.p_list[:, j][:, None] for j in range(28)]
        ds = [self.D[:N, j] for j in range(4)]
        with np.errstate(all="ignore"):
            return rk4_step_generic(xs, us, ds, ps, self.cfg.dt)

    def _out_parts(self, X, dual=False, theta_dirs=False):
        """Batch-evaluate the output map over all samples and stages 0..N."""
        S, N = self.S, self.cfg.N
        shape = (S, N + 1)
        if dual:
            xs = [ad.seed(X[:, :, i], i, 4, shape) for i in range(4)]
            ps = [self.p_list[:, j][:, None] for j in range(28)]
        elif theta_dirs:
            xs = [X[:, :, i] for i in range(4)]
            ps = [ad.seed(self.p_list[:, j][:, None], j, 28, (self.S, 1))
                  for j in range(28)]
        else:
            xs = [X[:, :, i] for i in range(4)]
            ps = [self.p_list[:, j][:, None] for j in range(28)]
        with np.errstate(all="ignore"):
            return output_generic(xs, ps)

    # -- NLP callbacks -----------------------------------------------------

    def _objective(self, z, grad=False):
        f = (self.c_obj @ z) + self.obj_const / F_SCALE
        return f, (self.c_obj.copy() if grad else None)

    def _eq(self, z, jac=False):
        lay, N, S = self.layout, self.cfg.N, self.S
        U, X, _ = lay.unpack(z)
        c = np.zeros(self.m_eq)
        J = np.zeros((self.m_eq, lay.n)) if jac else None
        parts = self._sim_parts(X, U, dual_dirs=jac)
        vals = np.stack([ad.value(p) for p in parts], axis=-1)  # (S,N,4)
        for s in range(S):
            r0 = s * 4 * (N + 1)
            c[r0:r0 + 4] = (X[s, 0] - self.x0) / X_SCALE
            resid = (X[s, 1:] - vals[s]) / X_SCALE  # (N,4)
            c[r0 + 4:r0 + 4 * (N + 1)] = resid.ravel()
        if self.pinned_u0 is not None:
            c[-3:] = (U[0] - self.pinned_u0) / U_MAX
        if jac:
            dF = np.stack([p.der for p in parts], axis=-2)  # (S,N,4,7)
            sx_ratio = X_SCALE[None, :4] / X_SCALE[:, None]
            su_ratio = U_MAX[None, :] / X_SCALE[:, None]
            eye4 = np.eye(4)
            for s in range(S):
                r0 = s * 4 * (N + 1)
                J[r0:r0 + 4, lay.x_slice(s, 0)] = eye4
                for k in range(N):
                    rows = slice(r0 + 4 + 4 * k, r0 + 8 + 4 * k)
                    J[rows, lay.x_slice(s, k)] = -dF[s, k, :, :4] * sx_ratio
                    J[rows, lay.u_slice(k)] = -dF[s, k, :, 4:] * su_ratio
                    J[rows, lay.x_slice(s, k + 1)] = eye4
            if self.pinned_u0 is not None:
                J[-3:, lay.u_slice(0)] = np.eye(3)
        return c, J

    def _ineq(self, z, jac=False):
        lay, N, S = self.layout, self.cfg.N, self.S
        _, X, Sig = lay.unpack(z)
        c = np.empty(self.m_in)
        c[:self.m_rate] = self.A_rate @ z + self.b_rate
        J = None
        parts = self._out_parts(X, dual=jac)
        Yv = np.stack([ad.value(p) for p in parts], axis=-1)  # (S,N+1,4)
        rs = self.out_row_scale
        if jac:
            J = np.zeros((self.m_in, lay.n))
            J[:self.m_rate] = self.A_rate
            dY = np.stack([p.der for p in parts], axis=-2)  # (S,N+1,4,4)
        r = self.m_rate
        for s in range(S):
            for k in range(N + 1):
                y = Yv[s, k]
                lower = (self.y_min[k] - y - Sig[s, k]) / rs
                upper = (y[1:] - self.y_max[k, 1:] - Sig[s, k, 1:]) / rs[1:]
                c[r:r + 4] = lower
                c[r + 4:r + 7] = upper
                if jac:
                    dy = dY[s, k] * (X_SCALE[None, :] / rs[:, None])  # (4,4)
                    xs = lay.x_slice(s, k)
                    sg = lay.sig_slice(s, k)
                    J[r:r + 4, xs] = -dy
                    J[np.arange(r, r + 4), np.arange(sg.start, sg.stop)] = -1.0
                    J[r + 4:r + 7, xs] = dy[1:]
                    J[np.arange(r + 4, r + 7),
                      np.arange(sg.start + 1, sg.stop)] = -1.0
                r += 7
        return c, J

    # -- theta sensitivities ------------------------------------------------

    def _theta_jacobians(self, z):
        """(df/dth, dc_eq/dth, dc_in/dth) of the scaled problem, S = 1 only."""
        lay, N = self.layout, self.cfg.N
        cfg, w = self.cfg, self.w
        U, X, Sig = lay.unpack(z)
        gamma = cfg.gamma
        gk = gamma ** np.arange(N + 1)
        y1 = 1000.0 * X[0, :, 0]

        df = np.zeros(THETA_DIM)
        df[0] = 1.0
        growth = float(np.sum(gk[1:] * (y1[1:] - y1[:-1])))
        df[1] = -growth - w.y1f * gk[N] * (w.yN - y1[N])
        df[2:5] = (gk[:N, None] * U).sum(axis=0)
        inv_range = np.where(np.isfinite(cfg.y_range), 1.0 / cfg.y_range, 0.0)
        df[5:9] = (gk[:, None] * Sig[0]).sum(axis=0) * inv_range
        df[9] = -gk[N] * w.dy1 * (w.yN - y1[N])
        df[10] = -w.y1f * gk[N] * w.dy1
        df /= F_SCALE

        dceq = np.zeros((self.m_eq, THETA_DIM))
        parts = self._sim_parts(X, U, theta_dirs=True)
        dF = np.stack([p.der for p in parts], axis=-2)  # (1,N,4,28)
        for k in range(N):
            rows = slice(4 + 4 * k, 8 + 4 * k)
            dceq[rows, 11:] = -dF[0, k] / X_SCALE[:, None]

        dcin = np.zeros((self.m_in, THETA_DIM))
        oparts = self._out_parts(X, theta_dirs=True)
        dYp = np.stack([p.der for p in oparts], axis=-2)  # (1,N+1,4,28)
        rs = self.out_row_scale
        r = self.m_rate
        for k in range(N + 1):
            dy = dYp[0, k] / rs[:, None]
            dcin[r:r + 4, 11:] = -dy
            dcin[r + 4:r + 7, 11:] = dy[1:]
            r += 7
        return df, dceq, dcin

    # -- assembly ------------------------------------------------------------

    def problem(self) -> ProblemInstance:
        theta_jac = None
        theta_vec = None
        if self.theta is not None and self.S == 1:
            theta_jac = self._theta_jacobians
            theta_vec = self.theta.as_vector()
        return ProblemInstance(
            n=self.layout.n, m_eq=self.m_eq, m_in=self.m_in,
            objective=self._objective,
            eq_constraints=self._eq,
            in_constraints=self._ineq,
            lb=self.lb, ub=self.ub,
            theta=theta_vec,
            theta_jacobians=theta_jac,
            metadata={"layout": self.layout, "f_scale": F_SCALE,
                      "builder": self},
        )

    # -- initial guesses -----------------------------------------------------

    def cold_start(self) -> np.ndarray:
        """Roll out each sample under held u_prev; slacks absorb violations."""
        N, S = self.cfg.N, self.S
        U = np.tile(self.u_prev, (N, 1))
        X = np.zeros((S, N + 1, 4))
        X[:, 0] = self.x0
        for s in range(S):
            xs = [np.array([self.x0[i]]) for i in range(4)]
            for k in range(N):
                us = [np.array([self.u_prev[j]]) for j in range(3)]
                ds = [np.array([self.D[k, j]]) for j in range(4)]
                ps = [np.array([self.p_list[s, j]]) for j in range(28)]
                with np.errstate(all="ignore"):
                    nxt = rk4_step_generic(xs, us, ds, ps, self.cfg.dt)
                vals = np.array([float(v[0]) for v in nxt])
                if not np.all(np.isfinite(vals)):
                    vals = np.array([float(v[0]) for v in xs])
                vals = np.clip(vals, X_SAFETY_LO, X_SAFETY_HI)
                X[s, k + 1] = vals
                xs = [np.array([vals[i]]) for i in range(4)]
        Sig = self._slacks_for(X)
        return np.clip(self.layout.pack(U, X, Sig), self.lb, self.ub)

    def _slacks_for(self, X) -> np.ndarray:
        parts = self._out_parts(X)
        Yv = np.stack([ad.value(p) for p in parts], axis=-1)
        over = np.maximum(0.0, Yv - self.y_max[None, :, :])
        under = np.maximum(0.0, self.y_min[None, :, :] - Yv)
        sig = np.maximum(over, under)
        return np.where(np.isfinite(sig), sig, 0.0)

    def warm_start_from(self, U_prev_sol, X_prev_sol, Sig_prev_sol,
                        advance: bool) -> np.ndarray:
        """Shift the previous solution one stage; repeat the final stage."""
        N, S = self.cfg.N, self.S
        if not advance:
            return np.clip(self.layout.pack(U_prev_sol, X_prev_sol,
                                            Sig_prev_sol), self.lb, self.ub)
        U = np.vstack([U_prev_sol[1:], U_prev_sol[-1:]])
        X = np.concatenate([X_prev_sol[:, 1:], X_prev_sol[:, -1:]], axis=1)
        X[:, 0] = self.x0
        for s in range(S):
            xs = [np.array([X_prev_sol[s, -1, i]]) for i in range(4)]
            us = [np.array([U[-1, j]]) for j in range(3)]
            ds = [np.array([self.D[-2, j]]) for j in range(4)]
            ps = [np.array([self.p_list[s, j]]) for j in range(28)]
            with np.errstate(all="ignore"):
                nxt = rk4_step_generic(xs, us, ds, ps, self.cfg.dt)
            vals = np.array([float(v[0]) for v in nxt])
            if np.all(np.isfinite(vals)):
                X[s, -1] = np.clip(vals, X_SAFETY_LO, X_SAFETY_HI)
        Sig = self._slacks_for(X)
        return np.clip(self.layout.pack(U, X, Sig), self.lb, self.ub)


# ---------------------------------------------------------------------------
# public builders (spec surface)
# ---------------------------------------------------------------------------

def build_v_problem(theta: ThetaVector, state, d_preview, u_prev,
                    cfg: MpcConfig) -> ProblemInstance:
    """The value-function NLP V_theta(s)."""
    x0 = state.x if hasattr(state, "x") else np.asarray(state, float)
    nlp = TrajectoryNlp(theta.p[None, :], CostWeights.from_theta(theta), x0,
                        d_preview, u_prev, cfg, theta=theta)
    return nlp.problem()


def build_q_problem(theta: ThetaVector, state, action, d_preview, u_prev,
                    cfg: MpcConfig) -> ProblemInstance:
    """The action-value NLP: the V problem plus the constraint u(0) = a."""
    x0 = state.x if hasattr(state, "x") else np.asarray(state, float)
    nlp = TrajectoryNlp(theta.p[None, :], CostWeights.from_theta(theta), x0,
                        d_preview, u_prev, cfg, theta=theta,
                        pinned_u0=action)
    return nlp.problem()


def build_robust_problem(samples, state, d_preview, u_prev, cfg: MpcConfig,
                         weights: CostWeights | None = None) -> ProblemInstance:
    """Scenario NLP: one input sequence, per-sample trajectories, mean cost."""
    x0 = state.x if hasattr(state, "x") else np.asarray(state, float)
    samples = np.atleast_2d(np.asarray(samples, dtype=float))
    if weights is None:
        base = make_theta(samples[0])
        weights = CostWeights.from_theta(base)
    nlp = TrajectoryNlp(samples, weights, x0, d_preview, u_prev, cfg)
    return nlp.problem()


@dataclass
class StepResult:
    u0: np.ndarray
    value: float
    solution: Solution
    problem: ProblemInstance
    wall_time: float
    cold_start: bool


class MpcController:
    """Stateful receding-horizon controller with shift warm starts.

    `samples` (a list/array of model-parameter vectors) selects the robust
    scenario variant; otherwise the controller solves the parametrized
    problem for the given theta (learned, ideal, or nominal depending on
    where theta.p came from).
    """

    def __init__(self, cfg: MpcConfig, theta: ThetaVector | None = None,
                 samples=None):
        if (theta is None) == (samples is None):
            raise ValueError("provide exactly one of theta or samples")
        self.cfg = cfg
        self.theta = theta
        self.samples = (None if samples is None
                        else np.atleast_2d(np.asarray(samples, float)))
        if samples is not None:
            self.weights = CostWeights.from_theta(make_theta(self.samples[0]))
        self.reset()

    def reset(self):
        self._prev = None  # (U, X, Sig) physical trajectories

    def set_theta(self, theta: ThetaVector):
        self.theta = theta

    def _make_nlp(self, x0, d_preview, u_prev, pinned_u0=None):
        if self.samples is not None:
            return TrajectoryNlp(self.samples, self.weights, x0, d_preview,
                                 u_prev, self.cfg)
        return TrajectoryNlp(self.theta.p[None, :],
                             CostWeights.from_theta(self.theta), x0,
                             d_preview, u_prev, self.cfg, theta=self.theta,
                             pinned_u0=pinned_u0)

    def solve_policy(self, state, d_preview, u_prev) -> StepResult:
        """Solve the V problem; u(0) of the minimizer is the action."""
        x0 = state.x if hasattr(state, "x") else np.asarray(state, float)
        nlp = self._make_nlp(x0, d_preview, u_prev)
        prob = nlp.problem()
        t0 = time.perf_counter()
        cold = self._prev is None
        if not cold:
            z0 = nlp.warm_start_from(*self._prev, advance=True)
            sol = solve(prob, z0, options=self.cfg.solver_options())
            if sol.status in (SolveStatus.NUMERICAL_FAILURE,
                              SolveStatus.INFEASIBLE):
                cold = True
        if cold:
            sol = solve(prob, nlp.cold_start(),
                        options=self.cfg.solver_options())
        wall = time.perf_counter() - t0
        U, X, Sig = nlp.layout.unpack(sol.z)
        self._prev = (U, X, Sig)
        u0 = np.clip(U[0], self.cfg.u_min, self.cfg.u_max)
        return StepResult(u0=u0, value=sol.obj * F_SCALE, solution=sol,
                          problem=prob, wall_time=wall, cold_start=cold)

    def solve_q(self, state, action, d_preview, u_prev,
                warm_from: StepResult | None = None) -> StepResult:
        """Solve the Q problem with u(0) pinned to `action`."""
        if self.samples is not None:
            raise ValueError("Q values are only defined for theta variants")
        x0 = state.x if hasattr(state, "x") else np.asarray(state, float)
        nlp = self._make_nlp(x0, d_preview, u_prev, pinned_u0=action)
        prob = nlp.problem()
        t0 = time.perf_counter()
        cold = True
        if warm_from is not None:
            vsol = warm_from.solution
            mults = (np.concatenate([vsol.lam_eq, np.zeros(3)]),
                     vsol.mu_in, vsol.mu_lb, vsol.mu_ub)
            sol = solve(prob, vsol.z, multiplier_init=mults,
                        options=self.cfg.solver_options())
            cold = False
            if sol.status in (SolveStatus.NUMERICAL_FAILURE,):
                cold = True
        if cold:
            z0 = nlp.cold_start()
            lay = nlp.layout
            z0[:lay.n_u][: 3] = (np.asarray(action, float) / U_MAX)
            sol = solve(prob, z0, options=self.cfg.solver_options())
        wall = time.perf_counter() - t0
        return StepResult(u0=np.asarray(action, float),
                          value=sol.obj * F_SCALE, solution=sol,
                          problem=prob, wall_time=wall, cold_start=cold)

    @staticmethod
    def value_theta_gradient(result: StepResult) -> np.ndarray:
        """d(value)/d(theta) in raw units for a solved step result."""
        return value_gradient(result.problem, result.solution) * F_SCALE
