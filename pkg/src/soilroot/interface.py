"""Interface operators coupling the soil sample, the xylem network, and the
control variables on the root centerlines.

All matrices are line integrals over the root network of products of three
families of basis functions: traces of the 3D soil basis (evaluated through
the polynomial projection of each containing cell, volume-weighted when a
point lies in several cells), the 1D pressure-head basis, and the two
control bases.  Quadrature runs per sub-interval of the partition obtained
by merging the 3D cell crossings with the breakpoints of the three 1D
partitions, so every integrand is polynomial on each sub-interval.
"""

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .xylem import gauss01, hat_basis


@dataclass
class InterfaceOperators:
    """Line-integral matrices over the root network.

    Naming: ``s`` = soil trace space, ``x`` = 1D pressure space, ``cs`` /
    ``cx`` = control spaces associated with the soil and xylem sides.
    """

    M_lp: sp.csr_matrix      # (Ns, Ns)   2 pi R <Lp tr_b, tr_a>
    M: sp.csr_matrix         # (Ns, Ns)   <tr_b, tr_a>
    M_hat: sp.csr_matrix     # (Nx, Nx)   <p_b, p_a>
    G: sp.csr_matrix         # (Ncs, Ncs) <cs_b, cs_a>
    G_hat: sp.csr_matrix     # (Ncx, Ncx) <cx_b, cx_a>
    D_sx_lp: sp.csr_matrix   # (Ns, Ncx)  2 pi R <Lp cx_b, tr_a>
    D_xs_lp: sp.csr_matrix   # (Nx, Ncs)  2 pi R <Lp cs_b, p_a>
    D_ss: sp.csr_matrix      # (Ns, Ncs)  <tr_a, cs_b>
    D_xx: sp.csr_matrix      # (Nx, Ncx)  <p_a, cx_b>


def _trace_block(space, cells, x):
    """Soil-basis trace values at points x (nq, 3) for a containing-cell
    tuple: returns (global dof ids, values (nd, nq))."""
    mesh = space.mesh
    w = mesh.cell_volume[list(cells)]
    w = w / w.sum()
    vals = {}
    for wc, c in zip(w, cells):
        dofs, P, xE, hE = space.projector(c)
        tv = P[0][None, :] + ((x - xE) / hE) @ P[1:]   # (nq, N)
        for i, d in enumerate(dofs):
            if d in vals:
                vals[d] = vals[d] + wc * tv[:, i]
            else:
                vals[d] = wc * tv[:, i]
    dlist = np.fromiter(sorted(vals), dtype=np.int64)
    V = np.stack([vals[d] for d in dlist])
    return dlist, V


class _Coo:
    def __init__(self, shape):
        self.shape = shape
        self.r, self.c, self.v = [], [], []

    def add(self, rows, cols, block):
        # block: (len(rows), len(cols))
        self.r.append(np.repeat(rows, len(cols)))
        self.c.append(np.tile(cols, len(rows)))
        self.v.append(np.asarray(block).ravel())

    def tocsr(self):
        if not self.r:
            return sp.csr_matrix(self.shape)
        return sp.csr_matrix(
            (np.concatenate(self.v),
             (np.concatenate(self.r), np.concatenate(self.c))),
            shape=self.shape,
        )


def _p1_block(off, m, L, s0, s1, sq):
    """Hat-basis values of a 1D partition at arc lengths sq inside the
    element containing the midpoint of (s0, s1): (broken ids, values)."""
    h = L / m
    el = min(int(0.5 * (s0 + s1) / h), m - 1)
    xi = sq / h - el
    return np.array([off + el, off + el + 1]), hat_basis(xi)


def trace_load(space, network, fun, quad=4):
    """Load vector <f, tr phi_i> over the root network for a pointwise
    line source fun(x) with x of shape (nq, 3)."""
    mesh = space.mesh
    qx, qw = gauss01(quad)
    out = np.zeros(space.ndof)
    for sid in sorted(network.segments):
        pa, pb = network.segment_points(sid)
        L = network.segment_length(sid)
        e_s = (pb - pa) / L
        for t0, t1, cells in mesh.segment_intervals(pa, pb):
            sq = (t0 + qx * (t1 - t0)) * L
            w = qw * (t1 - t0) * L
            x = pa[None, :] + sq[:, None] * e_s[None, :]
            fv = np.asarray(fun(x), dtype=float)
            ids, tr = _trace_block(space, cells, x)
            out[ids] += tr @ (w * fv)
    return out


def assemble_interface(space, network, xmesh, dofmap, lp, time=0.0, quad=3):
    """Build all interface matrices for the current network.

    ``space`` is the 3D soil discretization, ``xmesh``/``dofmap`` the 1D
    meshes and DOF maps, ``lp`` the radial conductivity (constant or
    callable(x, age)).  Raises a mesh error if a segment crosses a carved
    void or leaves the box.
    """
    mesh = space.mesh
    R = network.R
    if callable(lp):
        lfun = lp
    else:
        lfun = lambda x, age: np.full(len(x), float(lp))

    pmap = dofmap.pressure
    smap = dofmap.phi_sigma
    cmap = dofmap.phi_chi
    Ns = space.ndof

    qx, qw = gauss01(quad)
    M_lp = _Coo((Ns, Ns))
    M = _Coo((Ns, Ns))
    M_hat = _Coo((pmap.n_broken, pmap.n_broken))
    G = _Coo((smap.n_broken, smap.n_broken))
    G_hat = _Coo((cmap.n_broken, cmap.n_broken))
    D_sx = _Coo((Ns, cmap.n_broken))
    D_xs = _Coo((pmap.n_broken, smap.n_broken))
    D_ss = _Coo((Ns, smap.n_broken))
    D_xx = _Coo((pmap.n_broken, cmap.n_broken))

    for sid in sorted(network.segments):
        seg = network.segments[sid]
        pa, pb = network.segment_points(sid)
        L = network.segment_length(sid)
        e_s = (pb - pa) / L
        age = max(0.0, time - seg.birth)
        crossings = mesh.segment_intervals(pa, pb)
        breaks = {0.0, L}
        breaks.update(t0 * L for t0, _, _ in crossings[1:])
        for m in (pmap.counts[sid], smap.counts[sid], cmap.counts[sid]):
            breaks.update(np.linspace(0.0, L, m + 1)[1:-1])
        bl = sorted(breaks)
        merged = [bl[0]]
        for s in bl[1:]:
            if s - merged[-1] > 1e-12 * L:
                merged.append(s)
        starts = [t0 * L for t0, _, _ in crossings]
        for s0, s1 in zip(merged[:-1], merged[1:]):
            smid = 0.5 * (s0 + s1)
            ci = int(np.searchsorted(starts, smid) - 1)
            cells = crossings[ci][2]
            sq = s0 + qx * (s1 - s0)
            w = qw * (s1 - s0)
            x = pa[None, :] + sq[:, None] * e_s[None, :]
            lq = np.asarray(lfun(x, age), dtype=float)

            tr_ids, tr = _trace_block(space, cells, x)
            p_ids, pb_ = _p1_block(pmap.offset[sid], pmap.counts[sid], L, s0, s1, sq)
            cs_ids, cs = _p1_block(smap.offset[sid], smap.counts[sid], L, s0, s1, sq)
            cx_ids, cx = _p1_block(cmap.offset[sid], cmap.counts[sid], L, s0, s1, sq)

            wl = 2.0 * np.pi * R * lq * w
            M_lp.add(tr_ids, tr_ids, (tr * wl) @ tr.T)
            M.add(tr_ids, tr_ids, (tr * w) @ tr.T)
            M_hat.add(p_ids, p_ids, (pb_ * w) @ pb_.T)
            G.add(cs_ids, cs_ids, (cs * w) @ cs.T)
            G_hat.add(cx_ids, cx_ids, (cx * w) @ cx.T)
            D_sx.add(tr_ids, cx_ids, (tr * wl) @ cx.T)
            D_xs.add(p_ids, cs_ids, (pb_ * wl) @ cs.T)
            D_ss.add(tr_ids, cs_ids, (tr * w) @ cs.T)
            D_xx.add(p_ids, cx_ids, (pb_ * w) @ cx.T)

    Ep = pmap.expand
    Es = smap.expand
    Ex = cmap.expand
    return InterfaceOperators(
        M_lp=M_lp.tocsr(),
        M=M.tocsr(),
        M_hat=(Ep.T @ M_hat.tocsr() @ Ep).tocsr(),
        G=(Es.T @ G.tocsr() @ Es).tocsr(),
        G_hat=(Ex.T @ G_hat.tocsr() @ Ex).tocsr(),
        D_sx_lp=(D_sx.tocsr() @ Ex).tocsr(),
        D_xs_lp=(Ep.T @ D_xs.tocsr() @ Es).tocsr(),
        D_ss=(D_ss.tocsr() @ Es).tocsr(),
        D_xx=(Ep.T @ D_xx.tocsr() @ Ex).tocsr(),
    )
