"""Mixed 1D finite elements for xylem flow on the root network.

Velocity is discretized with continuous piecewise quadratics whose degrees
of freedom are the values at partition vertices plus one mean-value moment
per element; pressure head with continuous piecewise linears.  At network
junctions the velocity carries one value per adjacent segment except the
last (sorted by segment id), whose value is eliminated through the flux
balance, so every discrete velocity conserves flux at junctions exactly.
Pressure is single-valued at junctions.

Per-segment partitions are equispaced; their element counts derive from the
number of sub-intervals the 3D mesh induces on the segment, scaled by
refinement ratios (one for the state meshes, one per control mesh).
"""

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla


class XylemError(Exception):
    pass


# ---------------------------------------------------------------------------
# reference bases on [0, 1]


def velocity_basis(xi):
    """P2 basis with DOFs (value at 0, value at 1, mean value): (3, n)."""
    xi = np.asarray(xi, dtype=float)
    return np.stack([
        1.0 - 4.0 * xi + 3.0 * xi * xi,
        3.0 * xi * xi - 2.0 * xi,
        6.0 * xi * (1.0 - xi),
    ])


def velocity_dbasis(xi):
    """d/dxi of the velocity basis: (3, n)."""
    xi = np.asarray(xi, dtype=float)
    return np.stack([
        -4.0 + 6.0 * xi,
        6.0 * xi - 2.0,
        6.0 - 12.0 * xi,
    ])


def hat_basis(xi):
    """P1 basis (value at 0, value at 1): (2, n)."""
    xi = np.asarray(xi, dtype=float)
    return np.stack([1.0 - xi, xi])


def gauss01(npts):
    x, w = np.polynomial.legendre.leggauss(npts)
    return 0.5 * (x + 1.0), 0.5 * w


_QX, _QW = gauss01(3)


# ---------------------------------------------------------------------------
# DOF maps


def _stable_numbering(keys, previous_index):
    """Index assignment for ``keys`` (a list in canonical order).  When every
    previously numbered key is still present, old indices are kept and new
    keys are appended after them; otherwise numbering restarts from zero."""
    if previous_index is not None and set(previous_index) <= set(keys):
        index = dict(previous_index)
        nxt = len(index)
        for k in keys:
            if k not in index:
                index[k] = nxt
                nxt += 1
        return index
    return {k: i for i, k in enumerate(keys)}


class VelocityDofMap:
    """Global velocity DOFs plus the broken-to-global expansion matrix.

    Broken DOFs are per-segment: partition vertex values 0..M followed by
    the M element mean values.  The expansion encodes the junction flux
    balance, so any global vector satisfies it identically.
    """

    def __init__(self, network, counts, previous=None):
        self.counts = dict(counts)
        self.seg_ids = sorted(network.segments)
        inc = network.node_incidence()

        keys = []
        for sid in self.seg_ids:
            m = self.counts[sid]
            keys.extend(("iv", sid, k) for k in range(1, m))
            keys.extend(("mom", sid, e) for e in range(m))
        for node in sorted(inc):
            adj = inc[node]
            if len(adj) == 1:
                keys.append(("nv", node, adj[0][0]))
            else:
                for sid, _ in adj[:-1]:
                    keys.append(("nv", node, sid))
        prev = previous.index if previous is not None else None
        self.index = _stable_numbering(keys, prev)
        self.n = len(self.index)
        self.n_nodal = sum(1 for k in self.index if k[0] != "mom")

        # broken layout and expansion
        self.offset = {}
        off = 0
        rows, cols, vals = [], [], []
        for sid in self.seg_ids:
            m = self.counts[sid]
            self.offset[sid] = off
            seg = network.segments[sid]
            for k in range(1, m):
                rows.append(off + k)
                cols.append(self.index[("iv", sid, k)])
                vals.append(1.0)
            for e in range(m):
                rows.append(off + m + 1 + e)
                cols.append(self.index[("mom", sid, e)])
                vals.append(1.0)
            for node, vert in ((seg.a, 0), (seg.b, m)):
                adj = inc[node]
                if len(adj) == 1 or sid != adj[-1][0]:
                    rows.append(off + vert)
                    cols.append(self.index[("nv", node, sid)])
                    vals.append(1.0)
                else:
                    # eliminated value: signed sum of the other adjacents
                    g_last = adj[-1][1]
                    for osid, g in adj[:-1]:
                        rows.append(off + vert)
                        cols.append(self.index[("nv", node, osid)])
                        vals.append(-float(g_last * g))
            off += 2 * m + 1
        self.n_broken = off
        self.expand = sp.csr_matrix(
            (vals, (rows, cols)), shape=(self.n_broken, self.n)
        )

    def endpoint_broken_index(self, network, sid, node):
        seg = network.segments[sid]
        m = self.counts[sid]
        if node == seg.a:
            return self.offset[sid]
        if node == seg.b:
            return self.offset[sid] + m
        raise XylemError("node is not an endpoint of the segment")


class P1DofMap:
    """Continuous piecewise-linear DOFs on the network (pressure head and
    interface control variables): one DOF per interior partition vertex and
    a single shared DOF per network node."""

    def __init__(self, network, counts, previous=None):
        self.counts = dict(counts)
        self.seg_ids = sorted(network.segments)
        keys = []
        for sid in self.seg_ids:
            m = self.counts[sid]
            keys.extend(("iv", sid, k) for k in range(1, m))
        nodes = sorted(network.node_incidence())
        keys.extend(("nd", n) for n in nodes)
        prev = previous.index if previous is not None else None
        self.index = _stable_numbering(keys, prev)
        self.n = len(self.index)

        self.offset = {}
        off = 0
        rows, cols, vals = [], [], []
        for sid in self.seg_ids:
            m = self.counts[sid]
            self.offset[sid] = off
            seg = network.segments[sid]
            rows.append(off)
            cols.append(self.index[("nd", seg.a)])
            vals.append(1.0)
            for k in range(1, m):
                rows.append(off + k)
                cols.append(self.index[("iv", sid, k)])
                vals.append(1.0)
            rows.append(off + m)
            cols.append(self.index[("nd", seg.b)])
            vals.append(1.0)
            off += m + 1
        self.n_broken = off
        self.expand = sp.csr_matrix(
            (vals, (rows, cols)), shape=(self.n_broken, self.n)
        )

    def node_dof(self, node):
        return self.index[("nd", node)]


@dataclass
class XylemMesh:
    """Per-segment element counts for the state and control partitions."""

    induced: dict
    counts: dict
    counts_chi: dict
    counts_sigma: dict

    def grid(self, network, sid):
        return np.linspace(0.0, network.segment_length(sid), self.counts[sid] + 1)


@dataclass
class XylemDofMap:
    velocity: VelocityDofMap
    pressure: P1DofMap
    phi_sigma: P1DofMap
    phi_chi: P1DofMap


def _element_counts(network, soil_mesh, induced, previous_counts):
    out = {}
    for sid in sorted(network.segments):
        if previous_counts and sid in previous_counts:
            out[sid] = previous_counts[sid]
            continue
        if induced and sid in induced:
            out[sid] = int(induced[sid])
        elif soil_mesh is not None:
            pa, pb = network.segment_points(sid)
            out[sid] = len(soil_mesh.segment_intervals(pa, pb))
        else:
            out[sid] = 1
    return out


def build_dof_maps(network, soil_mesh=None, delta=1.0, delta_phi_chi=0.5,
                   delta_phi_sigma=0.5, induced=None, previous=None):
    """Build the 1D partitions and DOF maps for the current network.

    ``induced`` optionally overrides the induced element count per segment;
    ``previous`` is an optional (XylemMesh, XylemDofMap) pair whose counts
    and DOF numbering are preserved for surviving segments, with new DOFs
    appended after the old ones.
    """
    prev_mesh, prev_dofs = previous if previous is not None else (None, None)
    base = _element_counts(
        network, soil_mesh, induced,
        prev_mesh.induced if prev_mesh is not None else None,
    )

    def scaled(d):
        return {s: max(1, int(round(d * n))) for s, n in base.items()}

    xmesh = XylemMesh(
        induced=base,
        counts=scaled(delta),
        counts_chi=scaled(delta_phi_chi),
        counts_sigma=scaled(delta_phi_sigma),
    )
    if prev_mesh is not None:
        for sid in prev_mesh.counts:
            if sid in xmesh.counts:
                xmesh.counts[sid] = prev_mesh.counts[sid]
                xmesh.counts_chi[sid] = prev_mesh.counts_chi[sid]
                xmesh.counts_sigma[sid] = prev_mesh.counts_sigma[sid]
    dofs = XylemDofMap(
        velocity=VelocityDofMap(
            network, xmesh.counts,
            prev_dofs.velocity if prev_dofs is not None else None,
        ),
        pressure=P1DofMap(
            network, xmesh.counts,
            prev_dofs.pressure if prev_dofs is not None else None,
        ),
        phi_sigma=P1DofMap(
            network, xmesh.counts_sigma,
            prev_dofs.phi_sigma if prev_dofs is not None else None,
        ),
        phi_chi=P1DofMap(
            network, xmesh.counts_chi,
            prev_dofs.phi_chi if prev_dofs is not None else None,
        ),
    )
    return xmesh, dofs


# ---------------------------------------------------------------------------
# assembly


@dataclass
class XylemParams:
    """Physical parameters of the 1D flow problem.

    ``kappa`` (axial resistance, day/cm) and ``lp`` (radial conductivity,
    cm/day... per head unit) may be constants or callables: kappa(x) with x
    the 3D point, lp(x, age) with age the segment age in days.
    """

    R: float
    kappa: object
    lp: object = 0.0
    T: float = 0.0


def _as_fun(v, nargs):
    if callable(v):
        return v
    if nargs == 1:
        return lambda x: np.full(len(x), float(v))
    return lambda x, age: np.full(len(x), float(v))


@dataclass
class XylemOperators:
    A: sp.csr_matrix        # velocity-velocity, axial resistance
    B: sp.csr_matrix        # pressure-velocity, -pi R^2 <p, du/ds>
    M_lp: sp.csr_matrix     # pressure-pressure, 2 pi R <Lp p, q>
    f_gravity: np.ndarray   # -pi R^2 <e_z . e_s, v>


def assemble_xylem(network, xmesh, dofmap, params, time=0.0):
    """Assemble the mixed 1D operators on the current network."""
    R = params.R
    kfun = _as_fun(params.kappa, 1)
    lfun = _as_fun(params.lp, 2)
    vmap, pmap = dofmap.velocity, dofmap.pressure

    B = velocity_basis(_QX)          # (3, q)
    dB = velocity_dbasis(_QX)
    P = hat_basis(_QX)               # (2, q)

    ar, ac, av = [], [], []
    br, bc, bv = [], [], []
    mr, mc, mv = [], [], []
    fb = np.zeros(vmap.n_broken)
    for sid in vmap.seg_ids:
        seg = network.segments[sid]
        pa, pb = network.segment_points(sid)
        L = network.segment_length(sid)
        e_s = (pb - pa) / L
        m = vmap.counts[sid]
        h = L / m
        if h <= 0:
            raise XylemError(f"zero-length element on segment {sid}")
        voff = vmap.offset[sid]
        poff = pmap.offset[sid]
        age = max(0.0, time - seg.birth)
        ez_es = float(e_s[2])
        for el in range(m):
            s = (el + _QX) * h
            x = pa[None, :] + s[:, None] * e_s[None, :]
            kq = np.asarray(kfun(x), dtype=float)
            lq = np.asarray(lfun(x, age), dtype=float)
            vidx = [voff + el, voff + el + 1, voff + m + 1 + el]
            pidx = [poff + el, poff + el + 1]
            a_loc = h * np.einsum("q,iq,jq->ij", _QW * kq, B, B)
            b_loc = -np.pi * R * R * np.einsum("q,iq,jq->ij", _QW, P, dB)
            m_loc = 2.0 * np.pi * R * h * np.einsum("q,iq,jq->ij", _QW * lq, P, P)
            f_loc = -np.pi * R * R * ez_es * h * (B @ _QW)
            for i in range(3):
                fb[vidx[i]] += f_loc[i]
                for j in range(3):
                    ar.append(vidx[i]); ac.append(vidx[j]); av.append(a_loc[i, j])
            for i in range(2):
                for j in range(3):
                    br.append(pidx[i]); bc.append(vidx[j]); bv.append(b_loc[i, j])
                for j in range(2):
                    mr.append(pidx[i]); mc.append(pidx[j]); mv.append(m_loc[i, j])
    Ab = sp.csr_matrix((av, (ar, ac)), shape=(vmap.n_broken, vmap.n_broken))
    Bb = sp.csr_matrix((bv, (br, bc)), shape=(pmap.n_broken, vmap.n_broken))
    Mb = sp.csr_matrix((mv, (mr, mc)), shape=(pmap.n_broken, pmap.n_broken))
    Ev, Ep = vmap.expand, pmap.expand
    return XylemOperators(
        A=(Ev.T @ Ab @ Ev).tocsr(),
        B=(Ep.T @ Bb @ Ev).tocsr(),
        M_lp=(Ep.T @ Mb @ Ep).tocsr(),
        f_gravity=Ev.T @ fb,
    )


def p1_load(network, p1map, fun, quad=4):
    """Load vector <fun, basis> on a piecewise-linear space; fun takes an
    (n, 3) array of 3D points and returns n values."""
    qx, qw = gauss01(quad)
    P = hat_basis(qx)
    out = np.zeros(p1map.n_broken)
    for sid in p1map.seg_ids:
        pa, pb = network.segment_points(sid)
        L = network.segment_length(sid)
        e_s = (pb - pa) / L
        m = p1map.counts[sid]
        h = L / m
        off = p1map.offset[sid]
        for el in range(m):
            s = (el + qx) * h
            x = pa[None, :] + s[:, None] * e_s[None, :]
            fq = np.asarray(fun(x), dtype=float)
            v = h * (P * (qw * fq)).sum(axis=1)
            out[off + el] += v[0]
            out[off + el + 1] += v[1]
    return p1map.expand.T @ out


def endpoint_pressure_rhs(network, dofmap, values, R):
    """Natural boundary term on the velocity space for prescribed pressure
    head at network end points: the datum enters through the boundary
    normal stress, which is minus the pressure head, so the contribution at
    an end point is -pi R^2 * head * (outward sign).  ``values`` maps
    degree-1 node ids to pressure-head values."""
    inc = network.node_incidence()
    out = np.zeros(dofmap.velocity.n)
    for node, val in values.items():
        adj = inc[node]
        if len(adj) != 1:
            raise XylemError(f"node {node} is not a network end point")
        sid, g = adj[0]
        dof = dofmap.velocity.index[("nv", node, sid)]
        out[dof] -= np.pi * R * R * float(val) * g
    return out


@dataclass
class CollarTipBC:
    fixed_idx: np.ndarray   # velocity DOFs with prescribed values
    fixed_val: np.ndarray
    free_p: np.ndarray      # boolean mask over pressure DOFs


def collar_tip_bc(network, dofmap, T):
    """Transpiration boundary conditions: the collar velocity is set to the
    transpiration flux divided by the lumen cross-section (positive when
    water leaves toward the stem) and tip velocities to zero.  The pressure
    space keeps its end-point degrees of freedom, so summing the discrete
    mass equations telescopes the prescribed boundary fluxes into the
    radial exchange term and global mass balance holds exactly."""
    if network.collar_node is None:
        raise XylemError("network has no collar")
    inc = network.node_incidence()
    idx, val = [], []
    sid, g = inc[network.collar_node][0]
    idx.append(dofmap.velocity.index[("nv", network.collar_node, sid)])
    val.append(g * T / (np.pi * network.R ** 2))
    for node in network.tip_like_nodes():
        sid, _ = inc[node][0]
        idx.append(dofmap.velocity.index[("nv", node, sid)])
        val.append(0.0)
    free_p = np.ones(dofmap.pressure.n, dtype=bool)
    return CollarTipBC(np.asarray(idx), np.asarray(val), free_p)


def saddle_matrix(ops):
    return sp.bmat([[ops.A, ops.B.T], [ops.B, -ops.M_lp]], format="csc")


def solve_saddle(ops, rhs_u, rhs_p, bc=None):
    """Solve the mixed system for (velocity, pressure head).

    Returns full-length vectors; with a :class:`CollarTipBC`, constrained
    velocity DOFs carry their prescribed values and removed pressure DOFs
    are zero (they are not unknowns of the problem).
    """
    nu, npr = ops.A.shape[0], ops.M_lp.shape[0]
    K = saddle_matrix(ops)
    rhs = np.concatenate([rhs_u, rhs_p])
    if bc is None:
        sol = spla.spsolve(K, rhs)
        return sol[:nu], sol[nu:]
    keep = np.ones(nu + npr, dtype=bool)
    keep[bc.fixed_idx] = False
    keep[nu:] = bc.free_p
    full = np.zeros(nu + npr)
    full[bc.fixed_idx] = bc.fixed_val
    rhs = rhs - K @ full
    Kff = K[np.ix_(keep, keep)].tocsc()
    full[keep] = spla.spsolve(Kff, rhs[keep])
    return full[:nu], full[nu:]


# ---------------------------------------------------------------------------
# evaluation, balances, errors


def junction_balances(network, dofmap, u):
    """Signed sum of segment-end velocities at every junction (should be
    zero to round-off for any vector in the discrete space)."""
    broken = dofmap.velocity.expand @ u
    out = {}
    for node, adj in network.junctions().items():
        r = 0.0
        for sid, g in adj:
            k = dofmap.velocity.endpoint_broken_index(network, sid, node)
            r += g * broken[k]
        out[node] = r
    return out


def velocity_values(network, xmesh, dofmap, u, sid, svals):
    """Evaluate the discrete velocity on segment ``sid`` at arc lengths s."""
    broken = dofmap.velocity.expand @ u
    vmap = dofmap.velocity
    m = vmap.counts[sid]
    L = network.segment_length(sid)
    h = L / m
    off = vmap.offset[sid]
    svals = np.atleast_1d(np.asarray(svals, dtype=float))
    out = np.empty_like(svals)
    for i, s in enumerate(svals):
        el = min(int(s / h), m - 1)
        xi = s / h - el
        Bv = velocity_basis(np.array([xi]))[:, 0]
        coeff = np.array([broken[off + el], broken[off + el + 1],
                          broken[off + m + 1 + el]])
        out[i] = coeff @ Bv
    return out


def p1_values(network, p1map, vec, sid, svals):
    """Evaluate a piecewise-linear field on segment ``sid`` at arc lengths s."""
    broken = p1map.expand @ vec
    m = p1map.counts[sid]
    L = network.segment_length(sid)
    h = L / m
    off = p1map.offset[sid]
    svals = np.atleast_1d(np.asarray(svals, dtype=float))
    out = np.empty_like(svals)
    for i, s in enumerate(svals):
        el = min(int(s / h), m - 1)
        xi = s / h - el
        out[i] = broken[off + el] * (1 - xi) + broken[off + el + 1] * xi
    return out


def _segment_quad(network, sid, m, quad):
    qx, qw = gauss01(quad)
    pa, pb = network.segment_points(sid)
    L = network.segment_length(sid)
    e_s = (pb - pa) / L
    h = L / m
    s = (np.arange(m)[:, None] + qx[None, :]) * h   # (m, q)
    x = pa[None, None, :] + s[..., None] * e_s[None, None, :]
    w = h * np.broadcast_to(qw, s.shape)
    return s, x, w, qx


def velocity_l2_error(network, xmesh, dofmap, u, exact, quad=5):
    """Relative L2 error of the discrete velocity against exact(x)->value."""
    num = den = 0.0
    broken = dofmap.velocity.expand @ u
    vmap = dofmap.velocity
    for sid in vmap.seg_ids:
        m = vmap.counts[sid]
        off = vmap.offset[sid]
        s, x, w, qx = _segment_quad(network, sid, m, quad)
        Bv = velocity_basis(qx)
        for el in range(m):
            coeff = np.array([broken[off + el], broken[off + el + 1],
                              broken[off + m + 1 + el]])
            uh = coeff @ Bv
            ue = np.asarray(exact(x[el]), dtype=float)
            num += float(w[el] @ (uh - ue) ** 2)
            den += float(w[el] @ ue ** 2)
    return np.sqrt(num / den) if den > 0 else np.sqrt(num)


def p1_l2_error(network, p1map, vec, exact, quad=5):
    """Relative L2 error of a piecewise-linear field against exact(x)."""
    num = den = 0.0
    broken = p1map.expand @ vec
    for sid in p1map.seg_ids:
        m = p1map.counts[sid]
        off = p1map.offset[sid]
        s, x, w, qx = _segment_quad(network, sid, m, quad)
        P = hat_basis(qx)
        for el in range(m):
            ph = broken[off + el] * P[0] + broken[off + el + 1] * P[1]
            pe = np.asarray(exact(x[el]), dtype=float)
            num += float(w[el] @ (ph - pe) ** 2)
            den += float(w[el] @ pe ** 2)
    return np.sqrt(num / den) if den > 0 else np.sqrt(num)


# ---------------------------------------------------------------------------
# incremental growth


@dataclass
class XylemState:
    """Assembled operators together with the meshes/DOF maps that produced
    them and a geometry snapshot used to detect remodeling."""

    xmesh: XylemMesh
    dofmap: XylemDofMap
    ops: XylemOperators
    seg_snapshot: dict = field(default_factory=dict)


def _snapshot(network):
    return {
        sid: (network.nodes[s.a].copy(), network.nodes[s.b].copy())
        for sid, s in network.segments.items()
    }


def _check_monotone(network, snapshot):
    tol = 1e-9

    def leaves(sid):
        if sid in network.segments:
            return [sid]
        if sid in network.replaced:
            a, b = network.replaced[sid]
            return leaves(a) + leaves(b)
        raise XylemError(f"segment {sid} disappeared: network was remodeled")

    for sid, (pa, pb) in snapshot.items():
        ids = leaves(sid)
        first = network.segments[ids[0]]
        last = network.segments[ids[-1]]
        if (np.linalg.norm(network.nodes[first.a] - pa) > tol
                or np.linalg.norm(network.nodes[last.b] - pb) > tol):
            raise XylemError(f"segment {sid} moved: network was remodeled")
        total = sum(network.segment_length(i) for i in ids)
        if abs(total - np.linalg.norm(pb - pa)) > tol * (1 + total):
            raise XylemError(f"segment {sid} changed length: remodeled")


def grow_operators(network, params, previous=None, soil_mesh=None,
                   induced=None, time=0.0, delta=1.0, delta_phi_chi=0.5,
                   delta_phi_sigma=0.5):
    """(Re)build DOF maps and operators after network growth.

    DOF numbering is stable: indices of DOFs surviving from ``previous``
    are unchanged and new ones are appended, so the new matrices contain
    the old ones wherever basis supports do not touch new segments.  If a
    previously known segment vanished without being split, the network was
    remodeled and an error is raised.
    """
    if previous is not None:
        _check_monotone(network, previous.seg_snapshot)
        prev = (previous.xmesh, previous.dofmap)
    else:
        prev = None
    xmesh, dofmap = build_dof_maps(
        network, soil_mesh=soil_mesh, delta=delta,
        delta_phi_chi=delta_phi_chi, delta_phi_sigma=delta_phi_sigma,
        induced=induced, previous=prev,
    )
    ops = assemble_xylem(network, xmesh, dofmap, params, time=time)
    return XylemState(xmesh, dofmap, ops, _snapshot(network))
