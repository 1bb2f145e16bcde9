"""Optimization-based coupling of the 3D soil problem and the 1D xylem
network.

Each backward-Euler step runs a Picard loop: nonlinear coefficients are
frozen at the previous iterate, and the linearized coupled problem is the
minimization of the interface mismatch functional subject to the two
decoupled constraint systems (soil and xylem).  The first-order optimality
system for the stacked control vector X = [phi_sigma; phi_chi] is solved by
a matrix-free conjugate gradient: each operator application performs two
forward and two adjoint-type sparse solves.  The optional preconditioner is
the block-diagonal pair of control mass matrices.
"""

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .xylem import gauss01, hat_basis, saddle_matrix


class CouplingError(Exception):
    pass


# ---------------------------------------------------------------------------
# Picard operators


def picard_operators(space, iops, Z_lin, Z_old, dt, K_fun, c_fun,
                     gravity=True, load=None):
    """Frozen-coefficient soil operator and right-hand side.

    A* = A(Z_lin) + C(Z_lin)/dt + M_Lp and f* = C(Z_lin) Z_old / dt + f,
    with f the gravity load (optional) plus any explicit source vector.
    """
    A, C, f = space.assemble(Z_lin, K_fun, c_fun, gravity=gravity)
    if np.isfinite(dt):
        Astar = (A + C / dt + iops.M_lp).tocsc()
        fstar = C @ Z_old / dt + f
    else:
        Astar = (A + iops.M_lp).tocsc()
        fstar = f.copy()
    if load is not None:
        fstar = fstar + load
    return Astar, fstar


# ---------------------------------------------------------------------------
# forward / adjoint solves


class ForwardSolver:
    """Factorized solvers for the two linearized constraint systems.

    Soil Dirichlet conditions and xylem collar/tip conditions are applied
    by elimination; the *state* solves carry the boundary data while the
    *homogeneous* variants (used inside the CG operator) zero it out.
    """

    def __init__(self, Astar, soil_mask=None, soil_values=None,
                 ops1d=None, bc1d=None):
        n = Astar.shape[0]
        if soil_mask is None:
            soil_mask = np.zeros(n, dtype=bool)
        self.soil_mask = soil_mask
        self.free = np.flatnonzero(~soil_mask)
        self.fixed = np.flatnonzero(soil_mask)
        if soil_values is None:
            soil_values = np.zeros(len(self.fixed))
        soil_values = np.asarray(soil_values, dtype=float)
        if soil_values.size == n:
            soil_values = soil_values[self.fixed]
        self.soil_values = soil_values
        Acsc = Astar.tocsc()
        self._soil_lift = Acsc[self.free][:, self.fixed] @ self.soil_values
        self._soil_lu = spla.splu(Acsc[self.free][:, self.free])

        self.ops1d = ops1d
        self.bc1d = bc1d
        if ops1d is not None:
            K = saddle_matrix(ops1d)
            self.nu = ops1d.A.shape[0]
            self.np1 = ops1d.M_lp.shape[0]
            ntot = self.nu + self.np1
            if bc1d is None:
                keep = np.ones(ntot, dtype=bool)
                self._x_fixed = np.zeros(0, dtype=int)
                self._x_vals = np.zeros(0)
            else:
                keep = np.ones(ntot, dtype=bool)
                keep[bc1d.fixed_idx] = False
                keep[self.nu:] = bc1d.free_p
                self._x_fixed = bc1d.fixed_idx
                self._x_vals = bc1d.fixed_val
            self.keep1d = keep
            Kc = K.tocsc()
            kidx = np.flatnonzero(keep)
            self._x_lift = Kc[kidx][:, self._x_fixed] @ self._x_vals
            self._x_lu = spla.splu(Kc[kidx][:, kidx])

    # soil ----------------------------------------------------------------

    def solve_soil(self, rhs):
        out = np.zeros(self.soil_mask.size)
        out[self.fixed] = self.soil_values
        out[self.free] = self._soil_lu.solve(rhs[self.free] - self._soil_lift)
        return out

    def solve_soil0(self, rhs):
        out = np.zeros(self.soil_mask.size)
        out[self.free] = self._soil_lu.solve(rhs[self.free])
        return out

    # xylem ---------------------------------------------------------------

    def _solve_1d(self, rhs_u, rhs_p, with_data):
        rhs = np.concatenate([rhs_u, rhs_p])
        full = np.zeros(self.nu + self.np1)
        if with_data and len(self._x_fixed):
            full[self._x_fixed] = self._x_vals
            r = rhs[self.keep1d] - self._x_lift
        else:
            r = rhs[self.keep1d]
        full[self.keep1d] = self._x_lu.solve(r)
        return full[: self.nu], full[self.nu:]

    def solve_1d(self, rhs_u, rhs_p):
        return self._solve_1d(rhs_u, rhs_p, True)

    def solve_1d0(self, rhs_p):
        return self._solve_1d(np.zeros(self.nu), rhs_p, False)


# ---------------------------------------------------------------------------
# the reduced control-space operator


def split_controls(iops, X):
    ns = iops.G.shape[0]
    return X[:ns], X[ns:]


def apply_reduced_matrix(fw, iops, dX):
    """Matrix-free application of the reduced operator to a control
    direction, via two forward and two adjoint-type solves."""
    dps, dpx = split_controls(iops, dX)
    dpsi = fw.solve_soil0(iops.D_sx_lp @ dpx)
    _, dpsih = fw.solve_1d0(-(iops.D_xs_lp @ dps))
    dpsi_d = fw.solve_soil0(iops.M @ dpsi - iops.D_ss @ dps)
    _, dpsih_d = fw.solve_1d0(iops.M_hat @ dpsih - iops.D_xx @ dpx)
    row_s = iops.G @ dps - iops.D_ss.T @ dpsi - iops.D_xs_lp.T @ dpsih_d
    row_x = iops.G_hat @ dpx - iops.D_xx.T @ dpsih + iops.D_sx_lp.T @ dpsi_d
    return np.concatenate([row_s, row_x])


def gradient_shift(fw, iops, psi_f, psih_f):
    """The constant part d of the gradient M X + d, built from the states
    driven by the data alone (psi_f soil, psih_f xylem pressure)."""
    _, aux = fw.solve_1d0(iops.M_hat @ psih_f)
    row_s = -(iops.D_ss.T @ psi_f) - iops.D_xs_lp.T @ aux
    row_x = -(iops.D_xx.T @ psih_f) + iops.D_sx_lp.T @ fw.solve_soil0(
        iops.M @ psi_f
    )
    return np.concatenate([row_s, row_x])


def quadratic_scalar(iops, psi_f, psih_f):
    """The X-independent term of the cost functional."""
    return float(psi_f @ (iops.M @ psi_f) + psih_f @ (iops.M_hat @ psih_f))


def cost_value(fw, iops, psi_f, psih_f, X):
    """Interface mismatch functional at control vector X."""
    MX = apply_reduced_matrix(fw, iops, X)
    d = gradient_shift(fw, iops, psi_f, psih_f)
    b = quadratic_scalar(iops, psi_f, psih_f)
    return 0.5 * (X @ MX + 2.0 * X @ d + b)


# ---------------------------------------------------------------------------
# conjugate gradient


@dataclass
class ControlPreconditioner:
    """Block-diagonal control-mass preconditioner."""

    lu_s: object
    lu_x: object
    ns: int

    @classmethod
    def build(cls, iops):
        return cls(
            lu_s=spla.splu(iops.G.tocsc()),
            lu_x=spla.splu(iops.G_hat.tocsc()),
            ns=iops.G.shape[0],
        )

    def __call__(self, r):
        return np.concatenate(
            [self.lu_s.solve(r[: self.ns]), self.lu_x.solve(r[self.ns:])]
        )


def cg_solve(apply_op, d, X0, rtol=1e-6, maxiter=2000, precond=None):
    """Conjugate gradient for M X + d = 0 with the absolute-residual
    stopping rule ||r|| < rtol (1 + ||r(X0)||).

    Returns (X, iterations, residual history).
    """
    X = np.asarray(X0, dtype=float).copy()
    r = apply_op(X) + d
    stop = rtol * (1.0 + np.linalg.norm(r))
    hist = [np.linalg.norm(r)]
    if hist[0] < stop:
        return X, 0, hist
    z = precond(r) if precond is not None else r
    p = -z
    rz = float(r @ z)
    for k in range(1, maxiter + 1):
        Mp = apply_op(p)
        curv = float(p @ Mp)
        if curv <= 0:
            raise CouplingError(
                f"negative curvature in CG at iteration {k}: {curv:.3e}"
            )
        alpha = rz / curv
        X += alpha * p
        r += alpha * Mp
        nr = np.linalg.norm(r)
        hist.append(nr)
        if nr < stop:
            return X, k, hist
        z = precond(r) if precond is not None else r
        rz_new = float(r @ z)
        p = -z + (rz_new / rz) * p
        rz = rz_new
    raise CouplingError(f"CG did not converge in {maxiter} iterations")


# ---------------------------------------------------------------------------
# one backward-Euler step (Picard loop)


@dataclass
class StepConfig:
    dt: float
    picard_tol: float = 1e-8
    picard_max: int = 30
    cg_rtol: float = 1e-6
    cg_max: int = 2000
    precond: bool = True


@dataclass
class StepResult:
    Z: np.ndarray          # soil pressure head DOFs
    u: np.ndarray          # xylem velocity DOFs
    psi_hat: np.ndarray    # xylem pressure head DOFs
    X: np.ndarray          # controls [phi_sigma; phi_chi]
    picard_iters: int
    cg_iters: list
    cost: float


def picard_step(space, K_fun, c_fun, iops, ops1d, Z_old, X0, cfg,
                soil_mask=None, soil_values=None, soil_load=None,
                bc1d=None, rhs1d_u=None, rhs1d_p=None, gravity=True,
                preconditioner=None):
    """Advance one backward-Euler step with Picard linearization.

    ``soil_load`` is an optional explicit source vector added to f*;
    ``rhs1d_u``/``rhs1d_p`` are the data parts of the 1D right-hand side
    (gravity load and boundary/forcing terms).
    """
    n1u = ops1d.A.shape[0]
    n1p = ops1d.M_lp.shape[0]
    if rhs1d_u is None:
        rhs1d_u = ops1d.f_gravity
    if rhs1d_p is None:
        rhs1d_p = np.zeros(n1p)
    if preconditioner is None and cfg.precond:
        preconditioner = ControlPreconditioner.build(iops)

    Z = Z_old.copy()
    X = np.asarray(X0, dtype=float).copy()
    cg_iters = []
    fw = psi_f = psih_f = None
    for it in range(1, cfg.picard_max + 1):
        Astar, fstar = picard_operators(
            space, iops, Z, Z_old, cfg.dt, K_fun, c_fun,
            gravity=gravity, load=soil_load,
        )
        fw = ForwardSolver(Astar, soil_mask, soil_values, ops1d, bc1d)
        psi_f = fw.solve_soil(fstar)
        _, psih_f = fw.solve_1d(rhs1d_u, rhs1d_p)
        d = gradient_shift(fw, iops, psi_f, psih_f)
        X, ncg, _ = cg_solve(
            lambda dX: apply_reduced_matrix(fw, iops, dX), d, X,
            rtol=cfg.cg_rtol, maxiter=cfg.cg_max,
            precond=preconditioner if cfg.precond else None,
        )
        cg_iters.append(ncg)
        _, phi_x = split_controls(iops, X)
        Z_new = psi_f + fw.solve_soil0(iops.D_sx_lp @ phi_x)
        done = np.abs(Z_new - Z).max() < cfg.picard_tol * (
            1.0 + np.abs(Z_new).max()
        )
        Z = Z_new
        if done:
            break
    else:
        raise CouplingError(
            f"Picard did not converge in {cfg.picard_max} iterations"
        )
    phi_s, phi_x = split_controls(iops, X)
    du, dph = fw.solve_1d0(-(iops.D_xs_lp @ phi_s))
    u_f, _ = fw.solve_1d(rhs1d_u, rhs1d_p)
    u = u_f + du
    psi_hat = psih_f + dph
    cost = cost_value(fw, iops, psi_f, psih_f, X)
    return StepResult(Z, u, psi_hat, X, it, cg_iters, cost)


# ---------------------------------------------------------------------------
# water uptake


def water_uptake(network, dofmap, lp, phi_s, phi_x, time=0.0, quad=3):
    """Radial water uptake 2 pi R Lp (phi_sigma - phi_chi) integrated per
    segment; returns ({segment: cm^3/day}, total)."""
    if callable(lp):
        lfun = lp
    else:
        lfun = lambda x, age: np.full(len(x), float(lp))
    qx, qw = gauss01(quad)
    smap, cmap = dofmap.phi_sigma, dofmap.phi_chi
    bs = smap.expand @ phi_s
    bx = cmap.expand @ phi_x
    per = {}
    R = network.R
    for sid in sorted(network.segments):
        seg = network.segments[sid]
        pa, pb = network.segment_points(sid)
        L = network.segment_length(sid)
        e_s = (pb - pa) / L
        age = max(0.0, time - seg.birth)
        breaks = sorted(
            set(np.linspace(0.0, L, smap.counts[sid] + 1))
            | set(np.linspace(0.0, L, cmap.counts[sid] + 1))
        )
        tot = 0.0
        for s0, s1 in zip(breaks[:-1], breaks[1:]):
            sq = s0 + qx * (s1 - s0)
            w = qw * (s1 - s0)
            x = pa[None, :] + sq[:, None] * e_s[None, :]
            lq = np.asarray(lfun(x, age), dtype=float)

            def val(pmap, broken):
                h = L / pmap.counts[sid]
                el = min(int(0.5 * (s0 + s1) / h), pmap.counts[sid] - 1)
                xi = sq / h - el
                off = pmap.offset[sid]
                return broken[off + el] * (1 - xi) + broken[off + el + 1] * xi

            q = 2.0 * np.pi * R * lq * (val(smap, bs) - val(cmap, bx))
            tot += float(w @ q)
        per[sid] = tot
    return per, sum(per.values())
