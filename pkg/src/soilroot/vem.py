"""First-order virtual elements on polyhedral cells.

One degree of freedom per mesh vertex. Local H1 projectors onto linear
polynomials are computed from boundary integrals only; face integrals of the
(virtual) traces use the 2D face projector of the same order, so general
polygonal faces are handled without any interior quadrature. Local forms use
the classical dofi-dofi stabilization.

The per-cell projector and form "shapes" are precomputed once; reassembling
the stiffness/mass/gravity operators for new cell-wise coefficients is a
vectorized scaling of cached COO arrays.
"""

from __future__ import annotations

import numpy as np
import scipy.io
import scipy.sparse as sp

from .mesh import PolyMesh, _face_frame

# degree-2 tetrahedron quadrature (4 points, weights |T|/4)
_L1 = (5.0 - np.sqrt(5.0)) / 20.0
_L2 = (5.0 + 3.0 * np.sqrt(5.0)) / 20.0
_TET4 = np.array(
    [
        [_L2, _L1, _L1, _L1],
        [_L1, _L2, _L1, _L1],
        [_L1, _L1, _L2, _L1],
        [_L1, _L1, _L1, _L2],
    ]
)


def _face_dof_integrals(mesh, f):
    """Boundary-only integrals of the virtual trace basis over face f.

    Returns (loop, ints) where ints[alpha] = ∫_F phi_alpha dA, computed via
    the 2D order-1 face projector: only edge integrals (trapezoid, exact for
    linear edge traces) enter.
    """
    loop = mesh.faces[f]
    pts = mesh.vertices[loop]
    n = mesh.face_normal[f]
    t1, t2 = _face_frame(pts, n)
    origin = mesh.face_centroid[f]
    p2 = (pts - origin) @ np.stack([t1, t2]).T
    nv = len(loop)
    e = np.roll(p2, -1, axis=0) - p2
    el = np.linalg.norm(e, axis=1)
    # outward in-plane conormal of each edge
    nu = np.stack([e[:, 1], -e[:, 0]], axis=1) / el[:, None]
    area = 0.5 * np.sum(p2[:, 0] * np.roll(p2[:, 1], -1) - np.roll(p2[:, 0], -1) * p2[:, 1])
    if area < 0:
        raise ValueError("face loop orientation inconsistent with stored normal")
    perim = el.sum()
    # ∮ phi ds and ∮ phi nu ds by the trapezoid rule on each edge
    b_int = np.zeros(nv)
    g_int = np.zeros((nv, 2))
    for i in range(nv):
        j = (i + 1) % nv
        b_int[i] += el[i] / 2
        b_int[j] += el[i] / 2
        g_int[i] += el[i] / 2 * nu[i]
        g_int[j] += el[i] / 2 * nu[i]
    # grad of the face projection; constant part from the mean-on-boundary rule
    g = g_int / area
    mids = 0.5 * (p2 + np.roll(p2, -1, axis=0))
    xi_int = (el[:, None] * mids).sum(axis=0)  # ∮ (xi, eta) ds
    c0 = (b_int - g @ xi_int) / perim
    # centered coordinates: ∫_F (xi, eta) dA relative to the centroid is 0
    return loop, c0 * area


class SoilSpace:
    """VEM k=1 discretization of the soil sample on a PolyMesh."""

    def __init__(self, mesh: PolyMesh, dirichlet_regions=()):
        self.mesh = mesh
        self.ndof = len(mesh.vertices)
        self.dirichlet_mask = np.zeros(self.ndof, dtype=bool)
        self.dirichlet_regions = tuple(dirichlet_regions)
        if dirichlet_regions:
            self.dirichlet_mask[mesh.region_vertex_ids(set(dirichlet_regions))] = True
        self.free = np.flatnonzero(~self.dirichlet_mask)

        # face -> integrals of each trace dof (shared by both adjacent cells)
        face_ints = [_face_dof_integrals(mesh, f) for f in range(len(mesh.faces))]

        self.cell_dofs = []
        self.P = []  # projector coefficients, 4 x N_E in the scaled basis
        SA, SM, GV = [], [], []
        for c in range(mesh.n_cells):
            dofs = mesh.cell_vertex_ids(c)
            pos = {v: i for i, v in enumerate(dofs)}
            N = len(dofs)
            vol = mesh.cell_volume[c]
            hE = mesh.cell_diameter[c]
            xE = mesh.cell_centroid[c]

            bnd_n = np.zeros((N, 3))  # ∫_∂E phi n ds
            bnd = np.zeros(N)  # ∫_∂E phi ds
            for f, s in zip(mesh.cell_faces[c], mesh.cell_signs[c]):
                loop, ints = face_ints[f]
                nrm = s * mesh.face_normal[f]
                for v, w in zip(loop, ints):
                    i = pos[v]
                    bnd_n[i] += w * nrm
                    bnd[i] += w
            a_grad = (hE / vol) * bnd_n.T  # (3, N): linear coefficients
            # scaled monomial boundary integrals ∮ m_i ds
            m_bnd = np.zeros(3)
            for f, s in zip(mesh.cell_faces[c], mesh.cell_signs[c]):
                loop, ints = face_ints[f]
                # exact: ∮_F m_i = projector of the linear monomial = itself
                m_bnd += ints @ ((mesh.vertices[loop] - xE) / hE)
            perim = sum(mesh.face_area[f] for f in mesh.cell_faces[c])
            a0 = (bnd - m_bnd @ a_grad) / perim
            P = np.vstack([a0, a_grad])
            self.cell_dofs.append(dofs)
            self.P.append(P)

            # D matrix: dof values of the scaled monomials
            D = np.hstack([np.ones((N, 1)), (mesh.vertices[dofs] - xE) / hE])
            Q = np.eye(N) - D @ P  # dof residual of the projection

            # second moments of the scaled monomials (signed tet fan)
            H = np.zeros((4, 4))
            H[0, 0] = vol
            ref = mesh.vertices[dofs].mean(axis=0)
            M2 = np.zeros((3, 3))
            for tri in mesh.cell_triangles(c):
                tv = np.linalg.det(tri - ref) / 6.0
                qp = _TET4 @ np.vstack([ref, tri])
                sm = (qp - xE) / hE
                M2 += tv / 4.0 * sm.T @ sm
            H[1:, 1:] = M2
            # first moments vanish: basis centered at the centroid

            SA.append((vol / hE**2) * a_grad.T @ a_grad + hE * Q.T @ Q)
            SM.append(P.T @ H @ P + vol * Q.T @ Q)
            GV.append(-(vol / hE) * a_grad[2])

        # flattened COO caches for vectorized reassembly
        rows, cols, entry_cell = [], [], []
        for c, dofs in enumerate(self.cell_dofs):
            r = np.repeat(dofs, len(dofs))
            rows.append(r)
            cols.append(np.tile(dofs, len(dofs)))
            entry_cell.append(np.full(len(dofs) ** 2, c))
        self._rows = np.concatenate(rows)
        self._cols = np.concatenate(cols)
        self._ecell = np.concatenate(entry_cell)
        self._sa = np.concatenate([m.ravel() for m in SA])
        self._sm = np.concatenate([m.ravel() for m in SM])
        self._grows = np.concatenate(self.cell_dofs)
        self._gcell = np.concatenate(
            [np.full(len(d), c) for c, d in enumerate(self.cell_dofs)]
        )
        self._gdata = np.concatenate(GV)
        # cell-centroid evaluation of the projected field: psi_E = P0 @ Z
        self._proj0 = sp.csr_matrix(
            (
                np.concatenate([self.P[c][0] for c in range(mesh.n_cells)]),
                (self._gcell, self._grows),
            ),
            shape=(mesh.n_cells, self.ndof),
        )

    # -- assembly ----------------------------------------------------------

    def cell_projected_values(self, Z):
        """Pi0 Z evaluated at each cell centroid (one scalar per cell)."""
        return self._proj0 @ np.asarray(Z, dtype=float)

    def assemble_stiffness(self, K_cells):
        K_cells = np.asarray(K_cells, dtype=float)
        if np.any(K_cells <= 0) or np.any(~np.isfinite(K_cells)):
            raise ValueError("conductivity coefficients must be positive and finite")
        data = self._sa * K_cells[self._ecell]
        return sp.csr_matrix((data, (self._rows, self._cols)), shape=(self.ndof,) * 2)

    def assemble_mass(self, c_cells):
        c_cells = np.asarray(c_cells, dtype=float)
        if np.any(c_cells < 0) or np.any(~np.isfinite(c_cells)):
            raise ValueError("capacity coefficients must be non-negative and finite")
        data = self._sm * c_cells[self._ecell]
        return sp.csr_matrix((data, (self._rows, self._cols)), shape=(self.ndof,) * 2)

    def assemble_gravity(self, K_cells):
        K_cells = np.asarray(K_cells, dtype=float)
        return np.bincount(
            self._grows, weights=self._gdata * K_cells[self._gcell], minlength=self.ndof
        )

    def assemble(self, Z, K_fun, c_fun, gravity=True):
        """(A(Z), C(Z), f) with coefficients frozen per cell at Pi0 Z."""
        psi_E = self.cell_projected_values(Z)
        K_E = np.asarray(K_fun(psi_E), dtype=float)
        c_E = np.asarray(c_fun(psi_E), dtype=float)
        if np.any(~np.isfinite(K_E)) or np.any(~np.isfinite(c_E)):
            raise ValueError("NaN/inf coefficient from constitutive curves")
        A = self.assemble_stiffness(K_E)
        C = self.assemble_mass(c_E)
        f = self.assemble_gravity(K_E) if gravity else np.zeros(self.ndof)
        return A, C, f

    # -- local/polynomial access ------------------------------------------

    def local_stiffness(self, c, K=1.0):
        if K <= 0:
            raise ValueError("need K > 0")
        dofs = self.cell_dofs[c]
        n = len(dofs)
        sel = self._ecell == c
        return K * self._sa[sel].reshape(n, n)

    def local_mass(self, c, coeff=1.0):
        if coeff < 0:
            raise ValueError("need coeff >= 0")
        dofs = self.cell_dofs[c]
        sel = self._ecell == c
        return coeff * self._sm[sel].reshape(len(dofs), len(dofs))

    def projector(self, c):
        """(dofs, P, x_E, h_E): Pi q = P0·q + sum_i Pi·q (x_i - x_E)/h_E."""
        return (
            self.cell_dofs[c],
            self.P[c],
            self.mesh.cell_centroid[c],
            self.mesh.cell_diameter[c],
        )

    def eval_projected(self, c, Z, x):
        """Pi(grad) Z of cell c evaluated at point(s) x."""
        dofs, P, xE, hE = self.projector(c)
        coeff = P @ np.asarray(Z)[dofs]
        x = np.asarray(x, dtype=float)
        return coeff[0] + (x - xE) / hE @ coeff[1:]

    def eval_gradient(self, c, Z):
        """Constant gradient of the projection on cell c."""
        dofs, P, _, hE = self.projector(c)
        return (self.P[c][1:] @ np.asarray(Z)[dofs]) / hE

    def eval_field(self, Z, x, curves):
        """(psi, theta, grad theta) at x as |E|-weighted cell averages."""
        from . import soil

        cells = self.mesh.locate_point(x)
        if not cells:
            raise ValueError(f"point {x} is outside the soil (carved or exterior)")
        w = self.mesh.cell_volume[cells]
        w = w / w.sum()
        psi = 0.0
        th = 0.0
        gth = np.zeros(3)
        for wc, c in zip(w, cells):
            p = self.eval_projected(c, Z, x)
            psi += wc * p
            th += wc * soil.theta(p, curves)
            gth += wc * soil.capacity_C(p, curves) * self.eval_gradient(c, Z)
        return psi, th, gth


def _cell_quadrature(space, c):
    """Degree-2 quadrature points/weights on cell c via the signed tet fan."""
    mesh = space.mesh
    dofs = space.cell_dofs[c]
    ref = mesh.vertices[dofs].mean(axis=0)
    pts, wts = [], []
    for tri in mesh.cell_triangles(c):
        tv = np.linalg.det(tri - ref) / 6.0
        pts.append(_TET4 @ np.vstack([ref, tri]))
        wts.append(np.full(4, tv / 4.0))
    return np.concatenate(pts), np.concatenate(wts)


def source_load(space, fun):
    """Load vector <f, Pi phi_i> for a pointwise source fun(x) with
    x of shape (nq, 3)."""
    out = np.zeros(space.ndof)
    for c in range(space.mesh.n_cells):
        dofs, P, xE, hE = space.projector(c)
        qp, qw = _cell_quadrature(space, c)
        fv = np.asarray(fun(qp), dtype=float)
        basis = P[0][None, :] + ((qp - xE) / hE) @ P[1:]  # (nq, N)
        out[list(dofs)] += (qw * fv) @ basis
    return out


def l2_h1_errors(space, Z, exact, exact_grad=None):
    """(absolute L2 error of Pi Z, absolute H1-seminorm error of grad Pi Z,
    L2 norm of exact) against pointwise functions of x (nq, 3)."""
    Z = np.asarray(Z, dtype=float)
    e2 = h2 = n2 = 0.0
    for c in range(space.mesh.n_cells):
        dofs, P, xE, hE = space.projector(c)
        coeff = P @ Z[list(dofs)]
        qp, qw = _cell_quadrature(space, c)
        vals = coeff[0] + (qp - xE) / hE @ coeff[1:]
        ex = np.asarray(exact(qp), dtype=float)
        e2 += qw @ (vals - ex) ** 2
        n2 += qw @ ex**2
        if exact_grad is not None:
            g = coeff[1:] / hE
            eg = np.asarray(exact_grad(qp), dtype=float)
            h2 += qw @ ((eg - g[None, :]) ** 2).sum(axis=1)
    return np.sqrt(e2), np.sqrt(h2), np.sqrt(n2)


def apply_dirichlet(A, b, mask, values):
    """Symmetric elimination of Dirichlet DOFs with lifting.

    Returns (A_ff, b_f, expand) where expand(u_f) scatters the free solution
    and inserts the prescribed values.
    """
    mask = np.asarray(mask, dtype=bool)
    free = np.flatnonzero(~mask)
    fixed = np.flatnonzero(mask)
    A = A.tocsr()
    vals = np.zeros(len(mask))
    if np.ndim(values) == 0:
        vals[fixed] = float(values)
    elif len(np.asarray(values)) == len(mask):
        vals[fixed] = np.asarray(values)[fixed]
    else:
        vals[fixed] = values
    b_f = np.asarray(b)[free] - A[free][:, fixed] @ vals[fixed]
    A_ff = A[free][:, free]

    def expand(u_f):
        u = vals.copy()
        u[free] = u_f
        return u

    return A_ff, b_f, expand


def write_matrix_market(path, M):
    """Debug export of a sparse operator."""
    scipy.io.mmwrite(path, sp.coo_matrix(M))
