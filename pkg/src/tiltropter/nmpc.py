"""Wrench-rate NMPC with contact-switched non-holonomic constraints.

State ``x = [F, M, p, v, q, ω]`` (19), input ``u = [F_dot, M_dot]`` (6). The
optimal control problem is transcribed by multiple shooting with one RK4
step per stage and solved by Gauss-Newton SQP. Each QP is condensed onto the
inputs and solved densely with ``quadprog``.

Quaternions are handled in a local tangent space: every stage is perturbed
as ``q ⊗ [1, δθ/2]`` (normalized) so the QP works with 18 tangent
coordinates per stage.

While the reference is on the ground the prediction model treats the wheel
contact as an ideal constraint: the ground reaction (along world z and body
y, plus a roll torque) is whatever keeps the vertical acceleration, the
body-y acceleration and the roll acceleration at the targets
``λ = (a_z, a_By, ω_dot_x)``. These targets are per-stage decision variables
with a small weight; they let the shooting nodes meet the equality rows
``v_By = 0``, ``ω_x = 0`` and ``p_z = r`` exactly without giving the thrust
any authority along the constrained directions.
"""
from __future__ import annotations

import functools
import time
from dataclasses import dataclass, field, fields

import casadi as ca
import numpy as np
import quadprog

from .core import quat_error, quat_to_rotmat

NX = 19
NT = 18
NU = 6
NL = 3

CONVERGED = "converged"
MAX_ITER = "max-iter"
RELAXED = "infeasible-relaxed"


class SolverError(RuntimeError):
    pass


def _vec(values, n):
    a = np.asarray(values, float)
    if a.ndim == 0:
        a = np.full(n, float(a))
    if a.shape != (n,):
        raise ValueError(f"expected {n} entries, got shape {a.shape}")
    return a


def _default_q():
    # light F_z weight: the absolute wrench penalty otherwise biases hover altitude
    return np.array([0.05, 0.05, 0.02] + [0.1] * 3 + [80, 80, 120] + [10] * 3 + [60] * 3 + [5] * 3, float)


def _default_q_contact():
    # rolling: the ground carries the weight and pitch is free to tilt the thrust forward
    q = _default_q()
    q[2] = 0.2
    q[13] = 5.0
    return q


def _default_qn():
    q = _default_q()
    q[6:] *= 10.0
    return q


@dataclass(frozen=True)
class NmpcConfig:
    N: int = 20
    dt: float = 0.1
    Q: np.ndarray = field(default_factory=_default_q)
    Q_N: np.ndarray = field(default_factory=_default_qn)
    R: np.ndarray = field(default_factory=lambda: np.full(6, 2.0))
    u_max: np.ndarray = field(default_factory=lambda: np.full(6, 2.0))
    W_min: np.ndarray = field(default_factory=lambda: np.array([-0.2, -0.2, 0.0, -20.0, -20.0, -20.0]))
    W_max: np.ndarray = field(default_factory=lambda: np.array([0.2, 0.2, 20.0, 20.0, 20.0, 20.0]))
    omega_max: np.ndarray = field(default_factory=lambda: np.array([2.0, 2.0, 1.5]))
    contact_tol: float = 0.02
    max_iter: int = 30
    tol: float = 1e-6
    rti: bool = False
    nonholonomic: bool = True
    contact_weight: float = 1e-3
    stage0_tol: float = 1e-3
    relax_weight: float = 1e4
    merit_weight: float = 1e4
    servo_rate_max: float = 8.0
    Q_contact: np.ndarray = field(default_factory=_default_q_contact)

    def __post_init__(self):
        for name, n in (("Q", NT), ("Q_N", NT), ("Q_contact", NT), ("R", NU), ("u_max", NU), ("W_min", 6),
                        ("W_max", 6), ("omega_max", 3)):
            object.__setattr__(self, name, _vec(getattr(self, name), n))
        if self.N < 2:
            raise ValueError("horizon needs N >= 2")
        if self.dt <= 0:
            raise ValueError("stage length must be positive")
        if np.any(self.Q < 0) or np.any(self.Q_N < 0) or np.any(self.Q_contact < 0):
            raise ValueError("state weights must be nonnegative")
        if np.any(self.R <= 0):
            raise ValueError("input weights must be positive")
        if np.any(self.u_max <= 0) or np.any(self.omega_max <= 0):
            raise ValueError("rate bounds must be positive")
        if np.any(self.W_min > self.W_max):
            raise ValueError("W_min must not exceed W_max")
        if self.max_iter < 1:
            raise ValueError("max_iter must be at least 1")

    @property
    def iterations(self):
        return 1 if self.rti else self.max_iter

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown NMPC config keys: {sorted(unknown)}")
        return cls(**data)

    def with_(self, **changes):
        data = {f.name: getattr(self, f.name) for f in fields(self)}
        data.update(changes)
        return NmpcConfig(**data)


def contact_indicator(p_rz, p_z, r, tol=0.02):
    if r <= 0:
        raise ValueError("wheel radius must be positive")
    return int(abs(p_rz - r) <= tol and abs(p_z - r) <= tol)


def stage_error(x, ref):
    """18-dim tracking error; the wrench block is penalized absolutely."""
    x = np.asarray(x, float)
    qe = quat_error(x[12:16], ref.q)
    return np.concatenate([x[0:6], x[6:9] - ref.p, x[9:12] - ref.v, qe[1:], x[16:19] - ref.omega])


# --- symbolic model --------------------------------------------------------

def _qmul(a, b):
    return ca.vertcat(
        a[0] * b[0] - a[1] * b[1] - a[2] * b[2] - a[3] * b[3],
        a[0] * b[1] + a[1] * b[0] + a[2] * b[3] - a[3] * b[2],
        a[0] * b[2] - a[1] * b[3] + a[2] * b[0] + a[3] * b[1],
        a[0] * b[3] + a[1] * b[2] - a[2] * b[1] + a[3] * b[0],
    )


def _qconj(q):
    return ca.vertcat(q[0], -q[1], -q[2], -q[3])


def _rotmat(q):
    w, x, y, z = q[0], q[1], q[2], q[3]
    return ca.vertcat(
        ca.horzcat(1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)),
        ca.horzcat(2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)),
        ca.horzcat(2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)),
    )


def _retract(x, d):
    dq = ca.vertcat(1.0, 0.5 * d[12:15])
    q = _qmul(x[12:16], dq)
    q = q / ca.norm_2(q)
    return ca.vertcat(x[0:12] + d[0:12], q, x[16:19] + d[15:18])


def _minus(xa, xb):
    """Tangent vector taking ``xb`` to ``xa``."""
    qe = _qmul(_qconj(xb[12:16]), xa[12:16])
    s = ca.if_else(qe[0] < 0, -1.0, 1.0)
    return ca.vertcat(xa[0:12] - xb[0:12], 2 * s * qe[1:4], xa[16:19] - xb[16:19])


@functools.lru_cache(maxsize=16)
def _model(mass, inertia, gravity, dt, r_wheel, N):
    J = ca.DM(np.array(inertia).reshape(3, 3))
    J_inv = ca.DM(np.linalg.inv(np.array(inertia).reshape(3, 3)))
    g = ca.DM(gravity)
    x = ca.SX.sym("x", NX)
    u = ca.SX.sym("u", NU)
    lam = ca.SX.sym("lam", NL)
    ext = ca.SX.sym("ext", 6)   # world-frame force, body-frame torque
    c = ca.SX.sym("c")          # 1 on contact intervals

    def rhs(x):
        F, M, v, q, om = x[0:3], x[3:6], x[9:12], x[12:16], x[16:19]
        R = _rotmat(q)
        a0 = (ca.mtimes(R, F) + ext[0:3]) / mass + g
        dom0 = ca.mtimes(J_inv, M + ext[3:6] - ca.cross(om, ca.mtimes(J, om)))
        # reaction along world z and body y reaching the target accelerations
        e_y = R[:, 1]
        e_y_dot = ca.mtimes(R, ca.vertcat(-om[2], 0, om[0]))
        cz = e_y[2]
        r0 = lam[0] - a0[2]
        r1 = lam[1] - ca.dot(e_y_dot, v) - ca.dot(e_y, a0)
        det = 1 - cz * cz
        n = (r0 - cz * r1) / det
        lat = (r1 - cz * r0) / det
        dv = a0 + c * (n * ca.DM([0, 0, 1]) + lat * e_y)
        tau = (lam[2] - dom0[0]) / J_inv[0, 0]
        dom = dom0 + c * tau * J_inv[:, 0]
        dq = 0.5 * _qmul(q, ca.vertcat(0, om))
        return ca.vertcat(u, v, dv, dq, dom)

    k1 = rhs(x)
    k2 = rhs(x + 0.5 * dt * k1)
    k3 = rhs(x + 0.5 * dt * k2)
    k4 = rhs(x + dt * k3)
    xn = x + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
    xn = ca.vertcat(xn[0:12], xn[12:16] / ca.norm_2(xn[12:16]), xn[16:19])
    f = ca.Function("f", [x, u, lam, ext, c], [xn])

    # shooting defect and its tangent-space Jacobians
    x1 = ca.SX.sym("x1", NX)
    d0 = ca.SX.sym("d0", NT)
    d1 = ca.SX.sym("d1", NT)
    defect = _minus(f(_retract(x, d0), u, lam, ext, c), _retract(x1, d1))
    outs = [defect, ca.jacobian(defect, d0), ca.jacobian(defect, u),
            ca.jacobian(defect, lam), ca.jacobian(defect, d1)]
    outs = [ca.substitute(o, ca.vertcat(d0, d1), ca.DM.zeros(2 * NT)) for o in outs]
    stage = ca.Function("stage", [x, u, lam, x1, ext, c], outs)

    # tracking error and ground constraints at a node
    ref = ca.SX.sym("ref", 13)
    xd = _retract(x, d0)
    qe = _qmul(xd[12:16], _qconj(ref[6:10]))
    s = ca.if_else(qe[0] < 0, -1.0, 1.0)
    err = ca.vertcat(xd[0:6], xd[6:9] - ref[0:3], xd[9:12] - ref[3:6], s * qe[1:4],
                     xd[16:19] - ref[10:13])
    R = _rotmat(xd[12:16])
    h = ca.vertcat(ca.dot(R[:, 1], xd[9:12]), xd[16], xd[8] - r_wheel)
    node_outs = [err, ca.jacobian(err, d0), h, ca.jacobian(h, d0)]
    node_outs = [ca.substitute(o, d0, ca.DM.zeros(NT)) for o in node_outs]
    node = ca.Function("node", [x, ref], node_outs)

    return {
        "f": f,
        "f_map": f.map(N, "serial"),
        "stage": stage.map(N, "serial"),
        "node": node.map(N + 1, "serial"),
        "retract": ca.Function("retract", [x, d0], [_retract(x, d0)]).map(N + 1, "serial"),
    }


def _model_for(params, cfg):
    J = tuple(np.asarray(params.inertia, float).ravel())
    return _model(float(params.mass), J, tuple(params.gravity), float(cfg.dt),
                  float(params.r_wheel), int(cfg.N))


# --- problem / solution ----------------------------------------------------

@dataclass(frozen=True)
class OcpProblem:
    x_est: np.ndarray
    refs: np.ndarray            # (N+1, 13): p, v, q, omega
    delta: np.ndarray           # (N+1,) contact indicators
    ext: np.ndarray             # world-frame force, body-frame torque
    cfg: NmpcConfig
    params: object
    t: float = 0.0

    @property
    def eq_stages(self):
        """Stages carrying the non-holonomic equality rows."""
        if not self.cfg.nonholonomic:
            return []
        return [k for k in range(1, self.cfg.N + 1) if self.delta[k]]

    @property
    def n_eq_rows(self):
        return 3 * len(self.eq_stages)

    @property
    def contact_intervals(self):
        return [k - 1 for k in self.eq_stages]

    @property
    def contact_mask(self):
        m = np.zeros(self.cfg.N)
        m[self.contact_intervals] = 1.0
        return m


@dataclass(frozen=True)
class OcpSolution:
    states: np.ndarray
    inputs: np.ndarray
    contact_accels: np.ndarray
    kkt_residual: float
    iterations: int
    status: str
    cost: float
    delta: np.ndarray
    t: float = 0.0
    solve_time: float = 0.0
    merit_history: tuple = ()

    @property
    def u0(self):
        return self.inputs[0]


def _ref_array(traj):
    rows = []
    for r in traj:
        rows.append(np.concatenate([r.p, r.v, r.q, r.omega]))
    return np.array(rows, float)


def build_ocp(x_est, traj, cfg, params, ext_wrench=None, t=0.0):
    """Assemble the horizon problem for the current estimate ``x_est`` (19).

    ``traj`` is a sequence of at least ``N + 1`` reference points.
    ``ext_wrench`` is the estimated external wrench ``(F_e, M_e)`` in the
    body frame; the force is frozen in the world frame at the current
    attitude over the horizon.
    """
    x_est = np.asarray(x_est, float)
    if x_est.shape != (NX,):
        raise ValueError("x_est must have 19 entries")
    if len(traj) < cfg.N + 1:
        raise ValueError(f"reference horizon has {len(traj)} points, need {cfg.N + 1}")
    refs = _ref_array(traj[: cfg.N + 1])
    ext = np.zeros(6) if ext_wrench is None else np.asarray(ext_wrench, float).copy()
    if not (np.all(np.isfinite(x_est)) and np.all(np.isfinite(refs)) and np.all(np.isfinite(ext))):
        raise ValueError("non-finite problem data")
    if abs(np.linalg.norm(x_est[12:16]) - 1.0) > 1e-6:
        raise ValueError("x_est quaternion is not unit norm")
    ext[0:3] = quat_to_rotmat(x_est[12:16]) @ ext[0:3]
    r = params.r_wheel
    tol = cfg.contact_tol
    delta = np.zeros(cfg.N + 1, dtype=bool)
    delta[0] = bool(contact_indicator(refs[0, 2], x_est[8], r, tol))
    for k in range(1, cfg.N + 1):
        delta[k] = abs(refs[k, 2] - r) <= tol
    return OcpProblem(x_est=x_est, refs=refs, delta=delta, ext=ext, cfg=cfg, params=params, t=t)


# --- solver ----------------------------------------------------------------

def _initial_guess(problem, warm_start, fns):
    cfg = problem.cfg
    N = cfg.N
    U = np.zeros((N, NU))
    L = np.zeros((N, NL))
    if warm_start is not None:
        shift = (problem.t - warm_start.t) / cfg.dt
        grid = np.arange(N) + shift
        for j in range(NU):
            U[:, j] = np.interp(grid, np.arange(N), warm_start.inputs[:, j])
        for j in range(NL):
            L[:, j] = np.interp(grid, np.arange(N), warm_start.contact_accels[:, j])
    c = problem.contact_mask
    L[c == 0] = 0.0
    X = np.empty((N + 1, NX))
    X[0] = problem.x_est
    f = fns["f"]
    if warm_start is None:
        for k in range(N):
            X[k + 1] = np.asarray(f(X[k], U[k], L[k], problem.ext, c[k])).ravel()
        return X, U, L
    # shift the previous shooting nodes; the last one is extended by the model
    prev = warm_start.states
    src = np.arange(N + 1) + (problem.t - warm_start.t) / cfg.dt
    for k in range(1, N + 1):
        s = src[k]
        if s >= N:
            X[k] = np.asarray(f(X[k - 1], U[k - 1], L[k - 1], problem.ext, c[k - 1])).ravel()
            continue
        i = int(np.floor(s))
        w = s - i
        xk = (1 - w) * prev[i] + w * prev[min(i + 1, N)]
        if np.dot(prev[i, 12:16], prev[min(i + 1, N), 12:16]) < 0:
            xk[12:16] = prev[i, 12:16]
        xk[12:16] /= np.linalg.norm(xk[12:16])
        X[k] = xk
    return X, U, L


def _evaluate(problem, X, U, L, fns):
    N = problem.cfg.N
    d, A, B, C, E = fns["stage"](X[:-1].T, U.T, L.T, X[1:].T, np.tile(problem.ext, (N, 1)).T,
                                  problem.contact_mask[None, :])
    d = np.asarray(d).T
    A = np.asarray(A).reshape(NT, N, NT).transpose(1, 0, 2)
    B = np.asarray(B).reshape(NT, N, NU).transpose(1, 0, 2)
    C = np.asarray(C).reshape(NT, N, NL).transpose(1, 0, 2)
    E = np.asarray(E).reshape(NT, N, NT).transpose(1, 0, 2)
    e, S, h, Hc = fns["node"](X.T, problem.refs.T)
    e = np.asarray(e).T
    S = np.asarray(S).reshape(NT, N + 1, NT).transpose(1, 0, 2)
    h = np.asarray(h).T
    Hc = np.asarray(Hc).reshape(3, N + 1, NT).transpose(1, 0, 2)
    return d, A, B, C, E, e, S, h, Hc


def _weights(problem):
    cfg = problem.cfg
    W = np.tile(cfg.Q, (cfg.N + 1, 1))
    W[-1] = cfg.Q_N
    delta = problem.delta
    W[:-1][delta[:-1]] = cfg.Q_contact
    if delta[-1]:
        # terminal contact weights keep the terminal-to-stage ratio of Q_N
        scale = np.divide(cfg.Q_N, cfg.Q, out=np.ones(NT), where=cfg.Q > 0)
        W[-1] = cfg.Q_contact * scale
    return W


def _cost(problem, e, U, L):
    cfg = problem.cfg
    W = _weights(problem)
    mask = np.zeros(cfg.N, dtype=bool)
    mask[problem.contact_intervals] = True
    return float(np.sum(W * e * e) + np.sum(cfg.R * U * U) + cfg.contact_weight * np.sum(L[mask] ** 2))


def _infeasibility(problem, d, h):
    eq = h[problem.eq_stages] if problem.eq_stages else np.zeros((0, 3))
    return float(np.sum(np.abs(d)) + np.sum(np.abs(eq)))


def _bound_violation(problem, X, U):
    cfg = problem.cfg
    viol = [np.max(np.abs(U) - cfg.u_max, initial=0.0)]
    Wk = X[1:, 0:6]
    viol.append(np.max(cfg.W_min - Wk, initial=0.0))
    viol.append(np.max(Wk - cfg.W_max, initial=0.0))
    viol.append(np.max(np.abs(X[1:, 16:19]) - cfg.omega_max, initial=0.0))
    return float(max(viol))


def _condense(problem, d, A, B, C, E):
    """Affine maps ``δ_k = g_k + G_k z`` of the stage tangents in the QP variables."""
    cfg = problem.cfg
    N = cfg.N
    intervals = problem.contact_intervals
    lam_col = {k: 6 * N + 3 * i for i, k in enumerate(intervals)}
    nz = 6 * N + 3 * len(intervals)
    E_inv = np.linalg.inv(E)
    g = np.zeros((N + 1, NT))
    G = np.zeros((N + 1, NT, nz))
    for k in range(N):
        Ak = -E_inv[k] @ A[k]
        g[k + 1] = Ak @ g[k] - E_inv[k] @ d[k]
        G[k + 1] = Ak @ G[k]
        G[k + 1][:, 6 * k: 6 * k + 6] -= E_inv[k] @ B[k]
        if k in lam_col:
            c = lam_col[k]
            G[k + 1][:, c: c + 3] -= E_inv[k] @ C[k]
    return g, G, lam_col, nz


def _qp_rows(problem, X, U, h, Hc, g, G, nz, with_omega=True):
    """Equality and inequality rows ``C_eq z = b_eq``, ``C_in z >= b_in``."""
    cfg = problem.cfg
    N = cfg.N
    eq_rows, eq_rhs = [], []
    for k in problem.eq_stages:
        eq_rows.append(Hc[k] @ G[k])
        eq_rhs.append(-(h[k] + Hc[k] @ g[k]))
    in_rows, in_rhs = [], []
    eye = np.eye(nz)
    for k in range(N):
        for j in range(NU):
            col = 6 * k + j
            in_rows.append(eye[col])
            in_rhs.append(-cfg.u_max[j] - U[k, j])
            in_rows.append(-eye[col])
            in_rhs.append(-(cfg.u_max[j] - U[k, j]))
    W0 = X[0, 0:6]
    for k in range(1, N + 1):
        reach = k * cfg.dt * cfg.u_max
        for j in range(6):
            # rows the wrench cannot reach within k stages are redundant
            if W0[j] - reach[j] < cfg.W_min[j]:
                in_rows.append(G[k][j])
                in_rhs.append(cfg.W_min[j] - X[k, j] - g[k][j])
            if W0[j] + reach[j] > cfg.W_max[j]:
                in_rows.append(-G[k][j])
                in_rhs.append(-(cfg.W_max[j] - X[k, j] - g[k][j]))
        if with_omega:
            for j in range(3):
                row = G[k][15 + j]
                base = X[k, 16 + j] + g[k][15 + j]
                in_rows.append(row)
                in_rhs.append(-cfg.omega_max[j] - base)
                in_rows.append(-row)
                in_rhs.append(-(cfg.omega_max[j] - base))
    rows = eq_rows + in_rows
    rhs = eq_rhs + in_rhs
    Cm = np.vstack([np.atleast_2d(r) for r in rows]) if rows else np.zeros((0, nz))
    b = np.concatenate([np.atleast_1d(r) for r in rhs]) if rhs else np.zeros(0)
    return Cm, b, 3 * len(eq_rows)


def _solve_qp(H, grad, Cm, b, meq):
    sol = quadprog.solve_qp(H, -grad, Cm.T, b, meq)
    return sol[0]


def _qp(problem, X, U, L, lin):
    cfg = problem.cfg
    N = cfg.N
    d, A, B, C, E, e, S, h, Hc = lin
    g, G, lam_col, nz = _condense(problem, d, A, B, C, E)
    Wts = np.sqrt(_weights(problem))
    M = np.einsum("ki,kij,kjz->kiz", Wts, S, G).reshape(-1, nz)
    res = (Wts * (e + np.einsum("kij,kj->ki", S, g))).ravel()
    H = M.T @ M
    grad = M.T @ res
    Rd = np.tile(cfg.R, N)
    H[np.arange(6 * N), np.arange(6 * N)] += Rd
    grad[: 6 * N] += Rd * U.ravel()
    for k, c in lam_col.items():
        H[np.arange(c, c + 3), np.arange(c, c + 3)] += cfg.contact_weight
        grad[c: c + 3] += cfg.contact_weight * L[k]
    H = 0.5 * (H + H.T)

    relaxed = False
    z = None
    for with_omega in (True, False):
        Cm, b, meq = _qp_rows(problem, X, U, h, Hc, g, G, nz, with_omega)
        try:
            z = _solve_qp(H, grad, Cm, b, meq)
            break
        except ValueError:
            relaxed = True
    if z is None:
        raise SolverError("QP infeasible even without angular-rate bounds")
    dX = g + np.einsum("kiz,z->ki", G, z)
    dU = z[: 6 * N].reshape(N, NU)
    dL = np.zeros((N, NL))
    for k, c in lam_col.items():
        dL[k] = z[c: c + 3]
    stationarity = float(np.max(np.abs(H @ z))) if nz else 0.0
    return dX, dU, dL, stationarity, relaxed


def _retract_all(X, dX, fns):
    out = np.asarray(fns["retract"](X.T, dX.T)).T
    return out


def _stage0_residual(problem):
    if not (problem.cfg.nonholonomic and problem.delta[0]):
        return 0.0
    x = problem.x_est
    R = quat_to_rotmat(x[12:16])
    res = np.array([R[:, 1] @ x[9:12], x[16], x[8] - problem.params.r_wheel])
    return float(np.sum(np.abs(res)))


def solve(problem, warm_start=None):
    """Gauss-Newton SQP on the multiple-shooting problem."""
    t_start = time.perf_counter()
    cfg = problem.cfg
    fns = _model_for(problem.params, cfg)
    X, U, L = _initial_guess(problem, warm_start, fns)
    status = MAX_ITER
    kkt = np.inf
    relaxed = False
    merits = []
    iters = 0
    lin = _evaluate(problem, X, U, L, fns)
    for it in range(cfg.iterations):
        d, e, h = lin[0], lin[5], lin[7]
        merit0 = _cost(problem, e, U, L) + cfg.merit_weight * _infeasibility(problem, d, h)
        if not merits:
            merits.append(merit0)
        dX, dU, dL, stat, qp_relaxed = _qp(problem, X, U, L, lin)
        relaxed |= qp_relaxed
        iters = it + 1
        primal = max(float(np.max(np.abs(d), initial=0.0)),
                     float(np.max(np.abs(h[problem.eq_stages]), initial=0.0)),
                     _bound_violation(problem, X, U))
        kkt = max(stat, primal)
        step = 1.0
        if not cfg.rti:
            if kkt <= cfg.tol:
                status = CONVERGED
                break
            while True:
                Xt = _retract_all(X, step * dX, fns)
                Ut, Lt = U + step * dU, L + step * dL
                lin_t = _evaluate(problem, Xt, Ut, Lt, fns)
                merit = (_cost(problem, lin_t[5], Ut, Lt)
                         + cfg.merit_weight * _infeasibility(problem, lin_t[0], lin_t[7]))
                if merit <= merit0 or step < 1e-3:
                    break
                step *= 0.5
            if merit > merit0:
                # no descent left at this iterate
                break
            X, U, L, lin = Xt, Ut, Lt, lin_t
            merits.append(merit)
        else:
            X = _retract_all(X, dX, fns)
            U, L = U + dU, L + dL
            lin = _evaluate(problem, X, U, L, fns)
            merits.append(_cost(problem, lin[5], U, L)
                          + cfg.merit_weight * _infeasibility(problem, lin[0], lin[7]))
    cost = _cost(problem, lin[5], U, L)
    stage0 = _stage0_residual(problem)
    if stage0 > cfg.stage0_tol:
        relaxed = True
        cost += cfg.relax_weight * stage0
    if relaxed:
        status = RELAXED
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(U))):
        raise SolverError("solver produced non-finite iterates")
    return OcpSolution(
        states=X, inputs=U, contact_accels=L, kkt_residual=float(kkt), iterations=iters,
        status=status, cost=float(cost), delta=problem.delta.copy(), t=problem.t,
        solve_time=time.perf_counter() - t_start, merit_history=tuple(merits),
    )


def rollout(problem, inputs, contact_accels=None):
    """States predicted by the discrete model for given inputs."""
    fns = _model_for(problem.params, problem.cfg)
    N = problem.cfg.N
    L = np.zeros((N, NL)) if contact_accels is None else contact_accels
    c = problem.contact_mask
    X = np.empty((N + 1, NX))
    X[0] = problem.x_est
    for k in range(N):
        X[k + 1] = np.asarray(fns["f"](X[k], inputs[k], L[k], problem.ext, c[k])).ravel()
    return X


def control_step(x_est, traj, cfg, params, prev_solution=None, ext_wrench=None, dt_ctrl=0.01, t=0.0):
    """Solve at the current estimate and return ``(W_cmd, solution)``.

    ``W_cmd = W_0 + u_0 dt_ctrl`` is the wrench state advanced over one
    control period.
    """
    problem = build_ocp(x_est, traj, cfg, params, ext_wrench, t)
    sol = solve(problem, prev_solution)
    W_cmd = problem.x_est[0:6] + sol.u0 * dt_ctrl
    return W_cmd, sol


class NmpcController:
    """Receding-horizon controller owning its warm start."""

    def __init__(self, cfg, params, dt_ctrl=0.01):
        self.cfg = cfg
        self.params = params
        self.dt_ctrl = dt_ctrl
        self.solution = None

    def reset(self):
        self.solution = None

    def step(self, t, x_est, traj, ext_wrench=None):
        W_cmd, self.solution = control_step(x_est, traj, self.cfg, self.params, self.solution,
                                            ext_wrench, self.dt_ctrl, t)
        return W_cmd, self.solution
