"""Polyhedral meshes of the soil box.

Structured hexahedral grids, carving of tessellated spherical stones
(convex polyhedra), geometric caches and queries, and an auxiliary
tetrahedral submesh used for nodal scalar fields.

Units are cm throughout.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import shapely
from shapely.geometry import Polygon


class MeshError(Exception):
    pass


class CarveError(MeshError):
    """Boolean subtraction failed on a cell."""

    def __init__(self, cell, msg):
        super().__init__(f"cell {cell}: {msg}")
        self.cell = cell


# ---------------------------------------------------------------------------
# small geometric helpers


def _polygon_area_normal_centroid(pts):
    """Area, unit normal and centroid of a planar polygon (fan from pts[0])."""
    p0 = pts[0]
    v1 = pts[1:-1] - p0
    v2 = pts[2:] - p0
    cr = np.cross(v1, v2)
    avec = 0.5 * cr.sum(axis=0)
    area = np.linalg.norm(avec)
    if area < 1e-300:
        return 0.0, np.zeros(3), pts.mean(axis=0)
    normal = avec / area
    tri_a = 0.5 * cr @ normal
    tri_c = (p0 + pts[1:-1] + pts[2:]) / 3.0
    centroid = (tri_a[:, None] * tri_c).sum(axis=0) / tri_a.sum()
    return area, normal, centroid


def _face_frame(pts, normal):
    """Orthonormal in-plane axes (t1, t2) with t1 x t2 = normal."""
    ref = pts[1] - pts[0]
    t1 = ref - (ref @ normal) * normal
    n1 = np.linalg.norm(t1)
    if n1 < 1e-14:
        ref = np.array([1.0, 0.0, 0.0])
        if abs(normal[0]) > 0.9:
            ref = np.array([0.0, 1.0, 0.0])
        t1 = ref - (ref @ normal) * normal
        n1 = np.linalg.norm(t1)
    t1 /= n1
    t2 = np.cross(normal, t1)
    return t1, t2


def _clip_polygon_halfplane(pts2, a, c):
    """Sutherland-Hodgman clip of a 2D polygon against a.y <= c."""
    if len(pts2) == 0:
        return pts2
    d = pts2 @ a - c
    out = []
    n = len(pts2)
    for i in range(n):
        j = (i + 1) % n
        di, dj = d[i], d[j]
        if di <= 0.0:
            out.append(pts2[i])
            if dj > 0.0:
                t = di / (di - dj)
                out.append(pts2[i] + t * (pts2[j] - pts2[i]))
        elif dj <= 0.0:
            t = di / (di - dj)
            out.append(pts2[i] + t * (pts2[j] - pts2[i]))
    return np.array(out) if out else np.zeros((0, 2))


def _clip_polygon_halfspace_3d(pts, n, b):
    """Clip a 3D planar polygon against n.x <= b."""
    if len(pts) == 0:
        return pts
    d = pts @ n - b
    out = []
    m = len(pts)
    for i in range(m):
        j = (i + 1) % m
        di, dj = d[i], d[j]
        if di <= 0.0:
            out.append(pts[i])
            if dj > 0.0:
                t = di / (di - dj)
                out.append(pts[i] + t * (pts[j] - pts[i]))
        elif dj <= 0.0:
            t = di / (di - dj)
            out.append(pts[i] + t * (pts[j] - pts[i]))
    return np.array(out) if out else np.zeros((0, 3))


def _clip_polytope(faces, n, b, tol=1e-12):
    """Clip a convex polytope (list of outward-oriented face loops) by n.x <= b.

    Returns the new face list; the cut cap is reconstructed from the clipped
    edges and appended with outward orientation.
    """
    allpts = np.vstack(faces)
    d = allpts @ n - b
    eps = 1e-9 * (1.0 + np.abs(allpts).max())
    if d.max() <= eps:
        return faces  # plane does not cut (faces may lie exactly on it)
    if d.min() >= -eps:
        return []
    newfaces = []
    cap_pts = []
    for pts in faces:
        cp = _clip_polygon_halfspace_3d(pts, n, b)
        if len(cp) >= 3:
            a, _, _ = _polygon_area_normal_centroid(cp)
            if a > tol:
                newfaces.append(cp)
            # collect points lying on the cut plane
            on = np.abs(cp @ n - b) < 1e-9 * (1.0 + abs(b))
            cap_pts.extend(cp[on])
    if len(cap_pts) >= 3:
        cap = np.array(cap_pts)
        # order around the plane; outward normal of the cap is +n
        c = cap.mean(axis=0)
        t1, t2 = _face_frame(cap, n / np.linalg.norm(n))
        ang = np.arctan2((cap - c) @ t2, (cap - c) @ t1)
        order = np.argsort(ang)
        cap = cap[order]
        # drop duplicates
        keep = [0]
        for i in range(1, len(cap)):
            if np.linalg.norm(cap[i] - cap[keep[-1]]) > 1e-10 * (1.0 + np.abs(cap).max()):
                keep.append(i)
        if len(keep) >= 3 and np.linalg.norm(cap[keep[0]] - cap[keep[-1]]) < 1e-10 * (
            1.0 + np.abs(cap).max()
        ):
            keep = keep[:-1]
        cap = cap[keep]
        if len(cap) >= 3:
            a, nn, _ = _polygon_area_normal_centroid(cap)
            if a > tol:
                if nn @ n < 0:
                    cap = cap[::-1]
                newfaces.append(cap)
    return newfaces


def _clip_param_interval(p0, d, ns, bs, t0=0.0, t1=1.0):
    """Clip the line p0 + t*d against the half-spaces n.x <= b."""
    for n, b in zip(ns, bs):
        a = float(n @ d)
        c = float(n @ p0) - b
        if abs(a) < 1e-14 * (1.0 + abs(c)):
            if c > 1e-9 * (1.0 + abs(b)):
                return None
            continue
        tcut = -c / a
        if a > 0:
            t1 = min(t1, tcut)
        else:
            t0 = max(t0, tcut)
        if t0 >= t1 - 1e-13:
            return None
    return (t0, t1)


def _ray_triangle_param(p0, d, tri):
    """Parameter t of the intersection of p0 + t*d with a triangle's plane,
    if the hit point falls inside the triangle (Moller-Trumbore)."""
    e1 = tri[1] - tri[0]
    e2 = tri[2] - tri[0]
    pv = np.cross(d, e2)
    det = float(e1 @ pv)
    if abs(det) < 1e-16:
        return None
    tv = p0 - tri[0]
    u = float(tv @ pv) / det
    if u < -1e-10 or u > 1 + 1e-10:
        return None
    qv = np.cross(tv, e1)
    v = float(d @ qv) / det
    if v < -1e-10 or u + v > 1 + 1e-10:
        return None
    return float(e2 @ qv) / det


def _faces_volume(faces):
    """Volume of a closed polyhedron given outward-oriented face loops."""
    vol = 0.0
    for pts in faces:
        a = pts[0]
        for i in range(1, len(pts) - 1):
            vol += np.linalg.det(np.stack([a, pts[i], pts[i + 1]])) / 6.0
    return vol


def _point_triangle_distance(x, tri):
    """Distance from point x to triangle (3,3). Ericson, Real-Time CD."""
    a, b, c = tri
    ab = b - a
    ac = c - a
    if np.linalg.norm(np.cross(ab, ac)) < 1e-14 * max(np.linalg.norm(ab), np.linalg.norm(ac), 1e-300) ** 2:
        # degenerate triangle: closest point on its edges
        d = np.inf
        for p, q in ((a, b), (a, c), (b, c)):
            pq = q - p
            t = np.clip((x - p) @ pq / max(pq @ pq, 1e-300), 0.0, 1.0)
            d = min(d, np.linalg.norm(x - (p + t * pq)))
        return d
    ap = x - a
    d1 = ab @ ap
    d2 = ac @ ap
    if d1 <= 0 and d2 <= 0:
        return np.linalg.norm(ap)
    bp = x - b
    d3 = ab @ bp
    d4 = ac @ bp
    if d3 >= 0 and d4 <= d3:
        return np.linalg.norm(bp)
    vc = d1 * d4 - d3 * d2
    if vc <= 0 and d1 >= 0 and d3 <= 0:
        v = d1 / (d1 - d3)
        return np.linalg.norm(ap - v * ab)
    cp = x - c
    d5 = ab @ cp
    d6 = ac @ cp
    if d6 >= 0 and d5 <= d6:
        return np.linalg.norm(cp)
    vb = d5 * d2 - d1 * d6
    if vb <= 0 and d2 >= 0 and d6 <= 0:
        w = d2 / (d2 - d6)
        return np.linalg.norm(ap - w * ac)
    va = d3 * d6 - d5 * d4
    if va <= 0 and (d4 - d3) >= 0 and (d5 - d6) >= 0:
        w = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        return np.linalg.norm(x - (b + w * (c - b)))
    denom = 1.0 / (va + vb + vc)
    v = vb * denom
    w = vc * denom
    return np.linalg.norm(x - (a + v * ab + w * ac))


def _winding_number(x, tris):
    """Generalized winding number of x w.r.t. outward triangles (n,3,3)."""
    A = tris[:, 0] - x
    B = tris[:, 1] - x
    C = tris[:, 2] - x
    la = np.linalg.norm(A, axis=1)
    lb = np.linalg.norm(B, axis=1)
    lc = np.linalg.norm(C, axis=1)
    num = np.einsum("ij,ij->i", A, np.cross(B, C))
    den = (
        la * lb * lc
        + np.einsum("ij,ij->i", A, B) * lc
        + np.einsum("ij,ij->i", B, C) * la
        + np.einsum("ij,ij->i", C, A) * lb
    )
    return np.arctan2(num, den).sum() / (2.0 * np.pi)


# ---------------------------------------------------------------------------
# stones


@dataclass
class Sphere:
    """A spherical stone, tessellated as a UV sphere."""

    center: np.ndarray
    radius: float
    meridians: int = 8
    parallels: int = 6

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=float)
        if self.radius <= 0:
            raise ValueError("radius must be positive")
        if self.meridians < 3 or self.parallels < 1:
            raise ValueError("need meridians >= 3 and parallels >= 1")

    def tessellate(self):
        """Vertices and outward-oriented face loops of the UV sphere."""
        M, P = self.meridians, self.parallels
        verts = [self.center + np.array([0.0, 0.0, self.radius])]
        for i in range(1, P + 1):
            th = np.pi * i / (P + 1)
            for j in range(M):
                ph = 2.0 * np.pi * j / M
                verts.append(
                    self.center
                    + self.radius
                    * np.array([np.sin(th) * np.cos(ph), np.sin(th) * np.sin(ph), np.cos(th)])
                )
        verts.append(self.center + np.array([0.0, 0.0, -self.radius]))
        verts = np.array(verts)
        south = len(verts) - 1

        def ring(i, j):
            return 1 + (i - 1) * M + (j % M)

        faces = []
        for j in range(M):  # top cap
            faces.append([0, ring(1, j), ring(1, j + 1)])
        for i in range(1, P):
            for j in range(M):
                faces.append([ring(i, j), ring(i + 1, j), ring(i + 1, j + 1), ring(i, j + 1)])
        for j in range(M):  # bottom cap
            faces.append([south, ring(P, j + 1), ring(P, j)])
        # orient all faces outward
        loops = []
        for f in faces:
            pts = verts[f]
            _, n, c = _polygon_area_normal_centroid(pts)
            if (c - self.center) @ n < 0:
                pts = pts[::-1]
            loops.append(pts)
        return verts, loops

    def planes(self):
        """Half-space representation (n, b) with inside = all(n.x <= b)."""
        _, loops = self.tessellate()
        ns, bs = [], []
        for pts in loops:
            _, n, _ = _polygon_area_normal_centroid(pts)
            ns.append(n)
            bs.append(float(np.mean(pts @ n)))
        return np.array(ns), np.array(bs)

    def volume(self):
        _, loops = self.tessellate()
        return _faces_volume(loops)


# ---------------------------------------------------------------------------
# the polyhedral mesh


class PolyMesh:
    """General polyhedral mesh with face-based connectivity.

    Faces are planar convex polygons stored as vertex loops; the stored loop
    orientation gives a normal pointing out of ``face_cells[f, 0]``. Boundary
    faces have ``face_cells[f, 1] == -1`` and carry a region tag.
    """

    def __init__(self, vertices, faces, face_cells, face_tags, n_cells, cell_convex=None):
        self.vertices = np.asarray(vertices, dtype=float)
        self.faces = [np.asarray(f, dtype=np.int64) for f in faces]
        self.face_cells = np.asarray(face_cells, dtype=np.int64)
        self.face_tags = list(face_tags)
        self.n_cells = int(n_cells)
        if cell_convex is None:
            cell_convex = np.ones(n_cells, dtype=bool)
        self.cell_convex = np.asarray(cell_convex, dtype=bool)
        self._build_caches()
        self._tri_cache = {}
        self._locator = None

    # -- construction ------------------------------------------------------

    def _build_caches(self):
        nf = len(self.faces)
        self.face_area = np.zeros(nf)
        self.face_normal = np.zeros((nf, 3))
        self.face_centroid = np.zeros((nf, 3))
        cell_faces = [[] for _ in range(self.n_cells)]
        cell_signs = [[] for _ in range(self.n_cells)]
        for f, loop in enumerate(self.faces):
            pts = self.vertices[loop]
            a, n, c = _polygon_area_normal_centroid(pts)
            self.face_area[f] = a
            self.face_normal[f] = n
            self.face_centroid[f] = c
            cp, cm = self.face_cells[f]
            if cp >= 0:
                cell_faces[cp].append(f)
                cell_signs[cp].append(1)
            if cm >= 0:
                cell_faces[cm].append(f)
                cell_signs[cm].append(-1)
        self.cell_faces = [np.array(cf, dtype=np.int64) for cf in cell_faces]
        self.cell_signs = [np.array(cs, dtype=np.int64) for cs in cell_signs]

        self.cell_volume = np.zeros(self.n_cells)
        self.cell_centroid = np.zeros((self.n_cells, 3))
        self.cell_diameter = np.zeros(self.n_cells)
        self._cell_vertices = []
        for c in range(self.n_cells):
            vids = np.unique(np.concatenate([self.faces[f] for f in self.cell_faces[c]]))
            self._cell_vertices.append(vids)
            pts = self.vertices[vids]
            d = pts[:, None, :] - pts[None, :, :]
            self.cell_diameter[c] = np.sqrt((d * d).sum(axis=2)).max()
            vol = 0.0
            mom = np.zeros(3)
            for f, s in zip(self.cell_faces[c], self.cell_signs[c]):
                loop = self.vertices[self.faces[f]]
                a = loop[0]
                for i in range(1, len(loop) - 1):
                    b, cc = loop[i], loop[i + 1]
                    v6 = np.linalg.det(np.stack([a, b, cc])) * s
                    vol += v6 / 6.0
                    mom += v6 / 6.0 * (a + b + cc) / 4.0
            self.cell_volume[c] = vol
            self.cell_centroid[c] = mom / vol if vol != 0 else pts.mean(axis=0)
        if np.any(self.cell_volume <= 0):
            bad = int(np.argmin(self.cell_volume))
            raise MeshError(f"non-positive volume for cell {bad}")

    # -- queries -----------------------------------------------------------

    @property
    def h(self):
        """Global mesh size max_E h_E."""
        return float(self.cell_diameter.max())

    @property
    def edges(self):
        """Unique vertex pairs (i < j) over all face loops."""
        if getattr(self, "_edges", None) is None:
            pairs = set()
            for loop in self.faces:
                for i in range(len(loop)):
                    a, b = int(loop[i]), int(loop[(i + 1) % len(loop)])
                    pairs.add((a, b) if a < b else (b, a))
            self._edges = np.array(sorted(pairs), dtype=np.int64)
        return self._edges

    def cell_vertex_ids(self, c):
        return self._cell_vertices[c]

    def cell_geometry(self, c):
        """(volume, centroid, diameter) of cell c, from the geometric caches."""
        defect = self.closure_defect(c)
        if defect > 1e-9:
            raise MeshError(f"cell {c} is not watertight (defect {defect:.2e})")
        return self.cell_volume[c], self.cell_centroid[c].copy(), self.cell_diameter[c]

    def closure_defect(self, c):
        """|sum of outward area vectors| / surface area for cell c."""
        s = np.zeros(3)
        tot = 0.0
        for f, sg in zip(self.cell_faces[c], self.cell_signs[c]):
            s += sg * self.face_area[f] * self.face_normal[f]
            tot += self.face_area[f]
        return float(np.linalg.norm(s) / tot)

    def total_volume(self):
        return float(self.cell_volume.sum())

    def boundary_regions(self):
        return sorted({t for t in self.face_tags if t})

    def region_vertex_ids(self, regions):
        """Vertex ids lying on boundary faces tagged with any given region."""
        regions = set(regions)
        ids = [self.faces[f] for f in range(len(self.faces)) if self.face_tags[f] in regions]
        if not ids:
            return np.zeros(0, dtype=np.int64)
        return np.unique(np.concatenate(ids))

    def cell_triangles(self, c):
        """Outward-oriented triangles (n,3,3) covering the boundary of cell c."""
        tris = self._tri_cache.get(c)
        if tris is None:
            out = []
            for f, s in zip(self.cell_faces[c], self.cell_signs[c]):
                loop = self.vertices[self.faces[f]]
                if s < 0:
                    loop = loop[::-1]
                for i in range(1, len(loop) - 1):
                    out.append((loop[0], loop[i], loop[i + 1]))
            tris = np.array(out)
            self._tri_cache[c] = tris
        return tris

    def _build_locator(self):
        lo = self.vertices.min(axis=0)
        hi = self.vertices.max(axis=0)
        target = max(1.0, self.n_cells ** (1.0 / 3.0))
        dims = np.maximum(1, np.minimum(128, (target * np.ones(3)).astype(int)))
        span = np.maximum(hi - lo, 1e-12)
        bins = {}
        for c in range(self.n_cells):
            pts = self.vertices[self._cell_vertices[c]]
            i0 = np.clip(((pts.min(axis=0) - lo) / span * dims).astype(int), 0, dims - 1)
            i1 = np.clip(((pts.max(axis=0) - lo) / span * dims).astype(int), 0, dims - 1)
            for ix in range(i0[0], i1[0] + 1):
                for iy in range(i0[1], i1[1] + 1):
                    for iz in range(i0[2], i1[2] + 1):
                        bins.setdefault((ix, iy, iz), []).append(c)
        self._locator = (lo, span, dims, bins)

    def candidate_cells(self, x):
        if self._locator is None:
            self._build_locator()
        lo, span, dims, bins = self._locator
        idx = np.clip(((np.asarray(x) - lo) / span * dims).astype(int), 0, dims - 1)
        return bins.get(tuple(idx), [])

    def locate_point(self, x, tol=None):
        """All cells whose closure contains x (empty set outside the mesh)."""
        x = np.asarray(x, dtype=float)
        found = []
        for c in self.candidate_cells(x):
            if tol is None:
                atol = 1e-12 * max(1.0, self.cell_diameter[c])
            else:
                atol = tol
            tris = self.cell_triangles(c)
            w = _winding_number(x, tris)
            if w > 0.5 + 1e-6:
                found.append(c)
                continue
            # near-boundary points belong to every adjacent cell
            dmin = min(_point_triangle_distance(x, t) for t in tris)
            if dmin <= atol:
                found.append(c)
        return found

    def _cell_param_intervals(self, c, p0, d):
        """Parameter intervals of the line p0 + t*d, t in [0, 1], inside cell c."""
        if self.cell_convex[c]:
            ns, bs = _cell_plane_rep(self, c)
            iv = _clip_param_interval(p0, d, ns, bs)
            return [iv] if iv else []
        pieces = getattr(self, "cell_pieces", {}).get(c)
        ivs = []
        if pieces:
            for faces in pieces:
                ns, bs = [], []
                cin = np.vstack(faces).mean(axis=0)
                for pts in faces:
                    a, n, fc = _polygon_area_normal_centroid(pts)
                    if a <= 0.0:
                        continue
                    if n @ (cin - fc) > 0:
                        n = -n
                    ns.append(n)
                    bs.append(float(n @ fc))
                iv = _clip_param_interval(p0, d, np.array(ns), np.array(bs))
                if iv:
                    ivs.append(iv)
        else:
            # general concave fallback: boundary crossings + midpoint winding
            tris = self.cell_triangles(c)
            ts = {0.0, 1.0}
            for tri in tris:
                t = _ray_triangle_param(p0, d, tri)
                if t is not None and 0.0 < t < 1.0:
                    ts.add(float(t))
            ts = sorted(ts)
            for t0, t1 in zip(ts[:-1], ts[1:]):
                if t1 - t0 < 1e-12:
                    continue
                mid = p0 + 0.5 * (t0 + t1) * d
                if _winding_number(mid, tris) > 0.5:
                    ivs.append((t0, t1))
        # merge touching intervals
        ivs.sort()
        merged = []
        for t0, t1 in ivs:
            if merged and t0 <= merged[-1][1] + 1e-10:
                merged[-1] = (merged[-1][0], max(merged[-1][1], t1))
            else:
                merged.append((t0, t1))
        return merged

    def segment_intervals(self, p0, p1):
        """Partition of the segment p0 -> p1 by cell boundaries.

        Returns a list of (t0, t1, cells) with 0 = t0 < ... < t1 = 1 covering
        the segment, where ``cells`` is the tuple of cells containing the
        sub-interval (usually one; several if the segment runs along a face).
        """
        p0 = np.asarray(p0, dtype=float)
        p1 = np.asarray(p1, dtype=float)
        d = p1 - p0
        length = np.linalg.norm(d)
        if length <= 0:
            raise MeshError("zero-length segment")
        if self._locator is None:
            self._build_locator()
        lo, span, dims, _ = self._locator
        binsize = float((span / dims).min())
        nsamp = max(2, 3 * int(np.ceil(length / binsize)) + 1)
        cand = set()
        for t in np.linspace(0.0, 1.0, nsamp):
            cand.update(self.candidate_cells(p0 + t * d))
        cover = []
        events = {0.0, 1.0}
        for c in sorted(cand):
            for t0, t1 in self._cell_param_intervals(c, p0, d):
                t0, t1 = max(t0, 0.0), min(t1, 1.0)
                if t1 - t0 < 1e-12:
                    continue
                cover.append((t0, t1, c))
                events.update((t0, t1))
        # cluster nearly-coincident breakpoints
        ts = sorted(events)
        breaks = [ts[0]]
        for t in ts[1:]:
            if t - breaks[-1] > 1e-9:
                breaks.append(t)
        breaks[0], breaks[-1] = 0.0, 1.0
        out = []
        for t0, t1 in zip(breaks[:-1], breaks[1:]):
            mid = 0.5 * (t0 + t1)
            cells = tuple(
                sorted(c for (a, b, c) in cover if a - 1e-9 <= mid <= b + 1e-9)
            )
            if not cells:
                raise MeshError(
                    f"segment leaves the mesh on t in ({t0:.6g}, {t1:.6g})"
                )
            if out and out[-1][2] == cells:
                out[-1] = (out[-1][0], t1, cells)
            else:
                out.append((t0, t1, cells))
        return out


# ---------------------------------------------------------------------------
# builders


def build_structured_hex(bounds, spacing):
    """Regular hexahedral mesh of an axis-aligned box.

    ``bounds`` is ((x0, x1), (y0, y1), (z0, z1)) in cm. The spacing must
    divide every edge length. Boundary faces are tagged top/bottom/lateral.
    """
    if spacing <= 0:
        raise ValueError("spacing must be positive")
    bounds = np.asarray(bounds, dtype=float)
    lo, hi = bounds[:, 0], bounds[:, 1]
    ext = hi - lo
    if np.any(ext <= 0):
        raise ValueError("degenerate box")
    nd = ext / spacing
    n = np.rint(nd).astype(int)
    if np.any(np.abs(nd - n) > 1e-9 * np.maximum(1, np.abs(nd))):
        raise ValueError(f"spacing {spacing} does not divide box extents {ext}")
    nx, ny, nz = (int(v) for v in n)

    xs = lo[0] + spacing * np.arange(nx + 1)
    ys = lo[1] + spacing * np.arange(ny + 1)
    zs = lo[2] + spacing * np.arange(nz + 1)
    X, Y, Z = np.meshgrid(xs, ys, zs, indexing="ij")
    vertices = np.stack([X.ravel(), Y.ravel(), Z.ravel()], axis=1)

    def vid(i, j, k):
        return (i * (ny + 1) + j) * (nz + 1) + k

    def cid(i, j, k):
        return (i * ny + j) * nz + k

    faces, face_cells, face_tags = [], [], []

    def add(loop, cp, cm, tag):
        faces.append(loop)
        face_cells.append((cp, cm))
        face_tags.append(tag)

    # x-normal faces
    for i in range(nx + 1):
        for j in range(ny):
            for k in range(nz):
                loop = [vid(i, j, k), vid(i, j + 1, k), vid(i, j + 1, k + 1), vid(i, j, k + 1)]
                if i == 0:
                    add(loop[::-1], cid(0, j, k), -1, "lateral")
                elif i == nx:
                    add(loop, cid(nx - 1, j, k), -1, "lateral")
                else:
                    add(loop, cid(i - 1, j, k), cid(i, j, k), "")
    # y-normal faces
    for j in range(ny + 1):
        for i in range(nx):
            for k in range(nz):
                loop = [vid(i, j, k), vid(i, j, k + 1), vid(i + 1, j, k + 1), vid(i + 1, j, k)]
                if j == 0:
                    add(loop[::-1], cid(i, 0, k), -1, "lateral")
                elif j == ny:
                    add(loop, cid(i, ny - 1, k), -1, "lateral")
                else:
                    add(loop, cid(i, j - 1, k), cid(i, j, k), "")
    # z-normal faces
    for k in range(nz + 1):
        for i in range(nx):
            for j in range(ny):
                loop = [vid(i, j, k), vid(i + 1, j, k), vid(i + 1, j + 1, k), vid(i, j + 1, k)]
                if k == 0:
                    add(loop[::-1], cid(i, j, 0), -1, "bottom")
                elif k == nz:
                    add(loop, cid(i, j, nz - 1), -1, "top")
                else:
                    add(loop, cid(i, j, k - 1), cid(i, j, k), "")

    mesh = PolyMesh(vertices, faces, face_cells, face_tags, nx * ny * nz)
    mesh.bounds = bounds
    return mesh


def build_structured_tet5(bounds, spacing):
    """Structured tetrahedral mesh of an axis-aligned box.

    Each cube of the underlying grid is split into five tetrahedra (one
    central, four corner tets); the decomposition is mirrored in a
    checkerboard pattern so the face diagonals of neighbouring cubes match
    and the mesh conforms.  Boundary faces are tagged top/bottom/lateral.
    """
    if spacing <= 0:
        raise ValueError("spacing must be positive")
    bounds = np.asarray(bounds, dtype=float)
    lo, hi = bounds[:, 0], bounds[:, 1]
    ext = hi - lo
    if np.any(ext <= 0):
        raise ValueError("degenerate box")
    nd = ext / spacing
    n = np.rint(nd).astype(int)
    if np.any(np.abs(nd - n) > 1e-9 * np.maximum(1, np.abs(nd))):
        raise ValueError(f"spacing {spacing} does not divide box extents {ext}")
    nx, ny, nz = (int(v) for v in n)

    xs = lo[0] + spacing * np.arange(nx + 1)
    ys = lo[1] + spacing * np.arange(ny + 1)
    zs = lo[2] + spacing * np.arange(nz + 1)
    X, Y, Z = np.meshgrid(xs, ys, zs, indexing="ij")
    vertices = np.stack([X.ravel(), Y.ravel(), Z.ravel()], axis=1)

    def vid(i, j, k):
        return (i * (ny + 1) + j) * (nz + 1) + k

    # five-tet split of the unit cube, by local corner offsets
    base = [
        ((0, 0, 0), (1, 1, 0), (1, 0, 1), (0, 1, 1)),  # central
        ((1, 0, 0), (0, 0, 0), (1, 1, 0), (1, 0, 1)),
        ((0, 1, 0), (0, 0, 0), (1, 1, 0), (0, 1, 1)),
        ((0, 0, 1), (0, 0, 0), (1, 0, 1), (0, 1, 1)),
        ((1, 1, 1), (1, 1, 0), (1, 0, 1), (0, 1, 1)),
    ]
    mirror = [tuple((1 - dx, dy, dz) for dx, dy, dz in tet) for tet in base]

    tets = []
    for i in range(nx):
        for j in range(ny):
            for k in range(nz):
                split = mirror if (i + j + k) % 2 else base
                for tet in split:
                    ids = [vid(i + dx, j + dy, k + dz) for dx, dy, dz in tet]
                    a, b, c, d = (vertices[v] for v in ids)
                    if np.linalg.det(np.stack([b - a, c - a, d - a])) < 0:
                        ids[2], ids[3] = ids[3], ids[2]
                    tets.append(ids)

    faces, face_cells, face_tags = [], [], []
    lookup = {}
    for ct, ids in enumerate(tets):
        cen = vertices[ids].mean(axis=0)
        for skip in range(4):
            tri = [ids[m] for m in range(4) if m != skip]
            key = frozenset(tri)
            fidx = lookup.get(key)
            if fidx is not None:
                face_cells[fidx][1] = ct
                face_tags[fidx] = ""
                continue
            pts = vertices[tri]
            nrm = np.cross(pts[1] - pts[0], pts[2] - pts[0])
            if nrm @ (pts.mean(axis=0) - cen) < 0:
                tri = tri[::-1]
            lookup[key] = len(faces)
            faces.append(np.asarray(tri, dtype=np.int64))
            face_cells.append([ct, -1])
            zvals = vertices[tri][:, 2]
            if np.all(np.abs(zvals - hi[2]) < 1e-12 * (1 + abs(hi[2]))):
                face_tags.append("top")
            elif np.all(np.abs(zvals - lo[2]) < 1e-12 * (1 + abs(lo[2]))):
                face_tags.append("bottom")
            else:
                face_tags.append("lateral")

    mesh = PolyMesh(vertices, faces, face_cells, face_tags, len(tets))
    mesh.bounds = bounds
    return mesh


# ---------------------------------------------------------------------------
# carving


def _cell_plane_rep(mesh, c):
    """Half-space representation of a convex cell."""
    ns, bs = [], []
    for f, s in zip(mesh.cell_faces[c], mesh.cell_signs[c]):
        n = s * mesh.face_normal[f]
        ns.append(n)
        bs.append(float(n @ mesh.face_centroid[f]))
    return np.array(ns), np.array(bs)


def _cell_face_loops(mesh, c):
    """Outward-oriented face loops of a cell, as coordinate arrays."""
    loops = []
    for f, s in zip(mesh.cell_faces[c], mesh.cell_signs[c]):
        pts = mesh.vertices[mesh.faces[f]]
        loops.append(pts if s > 0 else pts[::-1])
    return loops


def _intersection_volume(mesh, c, stone_planes):
    """Volume of cell c intersected with a convex polytope (signed-fan safe)."""
    ns, bs = stone_planes
    if mesh.cell_convex[c]:
        faces = _cell_face_loops(mesh, c)
        for n, b in zip(ns, bs):
            faces = _clip_polytope(faces, n, b)
            if not faces:
                return 0.0
        return _faces_volume(faces)
    # concave cell: clip each signed fan tetrahedron
    ref = mesh.vertices[mesh.cell_vertex_ids(c)].mean(axis=0)
    vol = 0.0
    for tri in mesh.cell_triangles(c):
        a, b3, c3 = tri
        sv = np.linalg.det(np.stack([a - ref, b3 - ref, c3 - ref])) / 6.0
        if abs(sv) < 1e-300:
            continue
        # outward-oriented tet faces
        if sv > 0:
            tet = [
                np.array([a, b3, c3]),
                np.array([ref, b3, a]),
                np.array([ref, c3, b3]),
                np.array([ref, a, c3]),
            ]
        else:
            tet = [
                np.array([a, c3, b3]),
                np.array([ref, a, b3]),
                np.array([ref, b3, c3]),
                np.array([ref, c3, a]),
            ]
        faces = tet
        for n, b in zip(ns, bs):
            faces = _clip_polytope(faces, n, b)
            if not faces:
                faces = None
                break
        if faces:
            vol += np.sign(sv) * _faces_volume(faces)
    return vol


def _stone_cross_section_2d(origin, t1, t2, normal, offset, stone_planes, extent):
    """Cross-section polygon of the stone with the plane x = origin + u t1 + v t2.

    Returns 2D coordinates (u, v) or None when empty.
    """
    ns, bs = stone_planes
    L = 2.0 * extent
    poly = np.array([[-L, -L], [L, -L], [L, L], [-L, L]])
    for n, b in zip(ns, bs):
        a = np.array([n @ t1, n @ t2])
        c = b - n @ origin
        na = np.linalg.norm(a)
        if na < 1e-12:
            if c < 0:  # plane parallel to face plane and face outside stone
                return None
            continue
        poly = _clip_polygon_halfplane(poly, a, c)
        if len(poly) < 3:
            return None
    a, _, _ = _polygon_area_normal_centroid(np.c_[poly, np.zeros(len(poly))])
    if a < 1e-14 * extent**2:
        return None
    return poly


class _VertexWeld:
    """Merge nearly coincident points into shared vertex ids."""

    def __init__(self, vertices, tol):
        self.tol = tol
        self.coords = [v for v in vertices]
        self.lookup = {}
        for i, v in enumerate(vertices):
            self.lookup.setdefault(self._key(v), []).append(i)

    def _key(self, p):
        return tuple(np.round(np.asarray(p) / self.tol).astype(np.int64))

    def add(self, p):
        p = np.asarray(p, dtype=float)
        k = self._key(p)
        for dk in self._neighbors(k):
            for i in self.lookup.get(dk, ()):
                if np.linalg.norm(self.coords[i] - p) <= self.tol:
                    return i
        i = len(self.coords)
        self.coords.append(p)
        self.lookup.setdefault(k, []).append(i)
        return i

    @staticmethod
    def _neighbors(k):
        for dx in (0, -1, 1):
            for dy in (0, -1, 1):
                for dz in (0, -1, 1):
                    yield (k[0] + dx, k[1] + dy, k[2] + dz)

    def array(self):
        return np.array(self.coords)


def carve_spheres(mesh, stones):
    """Subtract tessellated spherical stones from the mesh.

    Cells fully inside a stone are deleted; cut cells become general
    (possibly concave) polyhedra bounded by trimmed original faces and by
    clipped stone facets tagged "stone".
    """
    for stone in stones:
        mesh = _carve_one(mesh, stone)
    return mesh


def _carve_one(mesh, stone):
    planes = stone.planes()
    sverts, sloops = stone.tessellate()
    if hasattr(mesh, "bounds"):
        lo, hi = mesh.bounds[:, 0], mesh.bounds[:, 1]
        if np.any(stone.center - stone.radius < lo - 1e-12) or np.any(
            stone.center + stone.radius > hi + 1e-12
        ):
            warnings.warn("stone extends outside the box; it will be clipped by the domain")

    # classify candidate cells
    slo = stone.center - stone.radius
    shi = stone.center + stone.radius
    cls = {}
    for c in range(mesh.n_cells):
        pts = mesh.vertices[mesh.cell_vertex_ids(c)]
        if np.any(pts.max(axis=0) < slo) or np.any(pts.min(axis=0) > shi):
            continue
        vol = _intersection_volume(mesh, c, planes)
        V = mesh.cell_volume[c]
        if vol <= 1e-9 * V:
            continue
        if vol >= (1.0 - 1e-9) * V:
            cls[c] = "full"
        else:
            if not mesh.cell_convex[c]:
                raise CarveError(c, "partial boolean against a non-convex cell")
            cls[c] = "partial"
    if not cls:
        return mesh

    htol = 1e-9 * mesh.h
    weld = _VertexWeld(mesh.vertices, htol)
    new_faces, new_cells, new_tags = [], [], []
    new_convex_flags = {}

    # old cell -> new cell numbering (delete the "full" ones)
    cell_map = np.full(mesh.n_cells, -1, dtype=np.int64)
    nc = 0
    for c in range(mesh.n_cells):
        if cls.get(c) != "full":
            cell_map[c] = nc
            if cls.get(c) == "partial":
                new_convex_flags[nc] = False
            else:
                new_convex_flags[nc] = mesh.cell_convex[c]
            nc += 1

    def emit(loop_ids, cp, cm, tag):
        ids = [int(v) for v in loop_ids]
        ids = [v for i, v in enumerate(ids) if v != ids[i - 1]]  # drop repeats
        if len(ids) < 3 or len(set(ids)) < 3:
            return
        new_faces.append(np.asarray(ids, dtype=np.int64))
        new_cells.append((cp, cm))
        new_tags.append(tag)

    for f, loop in enumerate(mesh.faces):
        cp, cm = mesh.face_cells[f]
        kp = cell_map[cp] if cp >= 0 else -1
        km = cell_map[cm] if cm >= 0 else -1
        touched = (cp >= 0 and cp in cls) or (cm >= 0 and cm in cls)
        if kp < 0 and km < 0:
            continue  # face fully interior to the removed region
        if not touched:
            emit(loop, kp, km, mesh.face_tags[f])
            continue
        pts = mesh.vertices[loop]
        n = mesh.face_normal[f]
        origin = mesh.face_centroid[f]
        t1, t2 = _face_frame(pts, n)
        extent = np.abs((pts - origin) @ np.stack([t1, t2]).T).max() + 1.0
        cross = _stone_cross_section_2d(origin, t1, t2, n, None, planes, extent)
        if cross is None:
            emit(loop, kp, km, mesh.face_tags[f])
            continue
        p2 = (pts - origin) @ np.stack([t1, t2]).T
        fp = Polygon(p2)
        cpoly = Polygon(cross)
        if not fp.intersects(cpoly) or fp.intersection(cpoly).area < 1e-12 * fp.area:
            emit(loop, kp, km, mesh.face_tags[f])
            continue
        diff = fp.difference(cpoly)
        if diff.is_empty or diff.area < 1e-12 * fp.area:
            continue  # face swallowed by the stone
        if diff.area > fp.area * (1.0 - 1e-12):
            emit(loop, kp, km, mesh.face_tags[f])
            continue
        tag = mesh.face_tags[f]
        if kp < 0 or km < 0:
            if cp >= 0 and cm >= 0:
                tag = "stone"  # interface to a deleted cell
        geoms = diff.geoms if diff.geom_type == "MultiPolygon" else [diff]
        for g in geoms:
            tris = shapely.constrained_delaunay_triangles(g)
            for t in tris.geoms:
                xy = np.array(t.exterior.coords[:-1])
                if len(xy) != 3:
                    continue
                # keep the original face orientation
                u, v = xy[1] - xy[0], xy[2] - xy[0]
                s = 0.5 * (u[0] * v[1] - u[1] * v[0])
                if abs(s) < (1e-6 * mesh.h) ** 2:
                    continue
                if s < 0:
                    xy = xy[::-1]
                p3 = origin + xy[:, :1] * t1 + xy[:, 1:2] * t2
                emit([weld.add(p) for p in p3], kp, km, tag)

    # convex decomposition of each cut cell (peeling by the stone planes),
    # kept for tetrahedralization later
    sns, sbs = planes
    cell_pieces = {}
    for c0, pieces in getattr(mesh, "cell_pieces", {}).items():
        if cell_map[c0] >= 0:
            cell_pieces[cell_map[c0]] = pieces
    for c, kind in cls.items():
        if kind != "partial":
            continue
        remaining = _cell_face_loops(mesh, c)
        pieces = []
        for n, b in zip(sns, sbs):
            outside = _clip_polytope(remaining, -n, -b)
            if outside and _faces_volume(outside) > 1e-12 * mesh.cell_volume[c]:
                pieces.append(outside)
            remaining = _clip_polytope(remaining, n, b)
            if not remaining:
                break
        cell_pieces[cell_map[c]] = pieces

    # stone facets closing the carved cells
    for c, kind in cls.items():
        if kind != "partial":
            continue
        ns, bs = _cell_plane_rep(mesh, c)
        kc = cell_map[c]
        for sl in sloops:
            pts = sl
            for n, b in zip(ns, bs):
                pts = _clip_polygon_halfspace_3d(pts, n, b)
                if len(pts) < 3:
                    break
            if len(pts) < 3:
                continue
            a, _, _ = _polygon_area_normal_centroid(pts)
            if a < (1e-6 * mesh.h) ** 2:
                continue
            # outward normal of the soil cell points into the stone
            ids = [weld.add(p) for p in pts[::-1]]
            if len(set(ids)) < 3:
                continue
            emit(ids, kc, -1, "stone")

    verts = weld.array()
    # drop vertices no longer referenced by any face (interior to the stone)
    used = np.zeros(len(verts), dtype=bool)
    for ids in new_faces:
        used[ids] = True
    vmap = np.cumsum(used) - 1
    verts = verts[used]
    new_faces = [vmap[ids] for ids in new_faces]
    out = PolyMesh(
        verts,
        new_faces,
        new_cells,
        new_tags,
        nc,
        cell_convex=np.array([new_convex_flags[i] for i in range(nc)]),
    )
    if hasattr(mesh, "bounds"):
        out.bounds = mesh.bounds
    out.cell_pieces = cell_pieces
    return out


# ---------------------------------------------------------------------------
# tetrahedral submesh


class TetMesh:
    """Conforming tetrahedral partition with a per-vertex scalar slot."""

    def __init__(self, vertices, tets, vertex_regions):
        self.vertices = np.asarray(vertices, dtype=float)
        self.tets = np.asarray(tets, dtype=np.int64)
        self.vertex_regions = vertex_regions  # list[set[str]]
        self.values = np.zeros(len(self.vertices))
        a = self.vertices[self.tets[:, 0]]
        b = self.vertices[self.tets[:, 1]]
        c = self.vertices[self.tets[:, 2]]
        d = self.vertices[self.tets[:, 3]]
        self.tet_volume = np.einsum("ij,ij->i", np.cross(b - a, c - a), d - a) / 6.0
        self._mats = None
        self._locator = None

    def total_volume(self):
        return float(np.abs(self.tet_volume).sum())

    def flagged_vertices(self, regions):
        regions = set(regions)
        return np.array(
            [i for i, r in enumerate(self.vertex_regions) if r & regions], dtype=np.int64
        )

    def _build_locator(self):
        lo = self.vertices.min(axis=0)
        hi = self.vertices.max(axis=0)
        target = max(1.0, len(self.tets) ** (1.0 / 3.0) / 2.0)
        dims = np.maximum(1, np.minimum(96, (target * np.ones(3)).astype(int)))
        span = np.maximum(hi - lo, 1e-12)
        bins = {}
        pts = self.vertices[self.tets]  # (nt,4,3)
        i0 = np.clip(((pts.min(axis=1) - lo) / span * dims).astype(int), 0, dims - 1)
        i1 = np.clip(((pts.max(axis=1) - lo) / span * dims).astype(int), 0, dims - 1)
        for t in range(len(self.tets)):
            if self.tet_volume[t] <= 0:
                continue
            for ix in range(i0[t, 0], i1[t, 0] + 1):
                for iy in range(i0[t, 1], i1[t, 1] + 1):
                    for iz in range(i0[t, 2], i1[t, 2] + 1):
                        bins.setdefault((ix, iy, iz), []).append(t)
        self._locator = (lo, span, dims, bins)

    def find_tet(self, x, tol=1e-9):
        """Index of a tet containing x, or -1."""
        if self._locator is None:
            self._build_locator()
        lo, span, dims, bins = self._locator
        x = np.asarray(x, dtype=float)
        idx = np.clip(((x - lo) / span * dims).astype(int), 0, dims - 1)
        best, best_err = -1, np.inf
        for t in bins.get(tuple(idx), []):
            lam = self.barycentric(t, x)
            err = -min(lam.min(), 0.0)
            if err < best_err:
                best, best_err = t, err
            if err <= tol:
                return t
        return best if best_err < 1e-6 else -1

    def barycentric(self, t, x):
        a, b, c, d = self.vertices[self.tets[t]]
        T = np.stack([b - a, c - a, d - a], axis=1)
        lam = np.linalg.solve(T, x - a)
        return np.array([1.0 - lam.sum(), *lam])

    def interpolate(self, x):
        """(value, gradient) of the nodal field at x; raises outside the mesh."""
        t = self.find_tet(x)
        if t < 0:
            raise MeshError(f"point {x} outside the tetrahedral mesh")
        vids = self.tets[t]
        lam = self.barycentric(t, x)
        vals = self.values[vids]
        a, b, c, d = self.vertices[vids]
        T = np.stack([b - a, c - a, d - a], axis=1)
        g = np.linalg.solve(T.T, vals[1:] - vals[0])
        return float(lam @ vals), g


def build_tet_submesh(mesh):
    """Conforming tetrahedralization of every cell of a PolyMesh.

    Convex cells are fanned from their lowest-index vertex over face
    triangulations fanned from each face's lowest-index vertex (conforming
    across cells); concave cells fall back to a centroid fan.
    """
    verts = [v for v in mesh.vertices]
    vregions = [set() for _ in mesh.vertices]
    for f, tag in enumerate(mesh.face_tags):
        if tag:
            for v in mesh.faces[f]:
                vregions[v].add(tag)

    def face_tris(f):
        loop = mesh.faces[f]
        k = int(np.argmin(loop))
        loop = np.roll(loop, -k)
        return [(loop[0], loop[i], loop[i + 1]) for i in range(1, len(loop) - 1)]

    weld = _VertexWeld(mesh.vertices, 1e-9 * mesh.h)
    pieces_map = getattr(mesh, "cell_pieces", {})
    tets = []
    for c in range(mesh.n_cells):
        if mesh.cell_convex[c]:
            apex = int(mesh.cell_vertex_ids(c).min())
            for f, s in zip(mesh.cell_faces[c], mesh.cell_signs[c]):
                if apex in mesh.faces[f]:
                    continue
                for (a, b, d) in face_tris(f):
                    if s > 0:
                        tets.append((apex, a, b, d))
                    else:
                        tets.append((apex, a, d, b))
        elif c in pieces_map:
            # disjoint convex pieces of a carved cell: fan each from a vertex
            vtol = 1e-12 * mesh.cell_volume[c]
            for piece in pieces_map[c]:
                loops = [[weld.add(p) for p in pts] for pts in piece]
                apex = min(min(l) for l in loops)
                for li, ids in enumerate(loops):
                    if apex in ids:
                        continue
                    pts = piece[li]
                    for i in range(1, len(ids) - 1):
                        v = (
                            np.linalg.det(
                                np.stack(
                                    [
                                        pts[0] - weld.coords[apex],
                                        pts[i] - weld.coords[apex],
                                        pts[i + 1] - weld.coords[apex],
                                    ]
                                )
                            )
                            / 6.0
                        )
                        if v > vtol:
                            tets.append((apex, ids[0], ids[i], ids[i + 1]))
        else:
            # fallback: centroid fan over the face triangulation (valid only
            # for star-shaped cells)
            ci = weld.add(mesh.cell_centroid[c])
            for f, s in zip(mesh.cell_faces[c], mesh.cell_signs[c]):
                for (a, b, d) in face_tris(f):
                    if s > 0:
                        tets.append((ci, a, b, d))
                    else:
                        tets.append((ci, a, d, b))

    verts = weld.array()
    while len(vregions) < len(verts):
        vregions.append(set())
    # tag vertices created inside carved cells that lie on tagged faces
    tagged = [f for f, t in enumerate(mesh.face_tags) if t]
    if len(verts) > len(mesh.vertices) and tagged:
        tol = 1e-8 * mesh.h
        ftris, frad = {}, {}
        for f in tagged:
            pts = mesh.vertices[mesh.faces[f]]
            ftris[f] = np.array(
                [(pts[0], pts[i], pts[i + 1]) for i in range(1, len(pts) - 1)]
            )
            frad[f] = np.linalg.norm(pts - mesh.face_centroid[f], axis=1).max()
        for vi in range(len(mesh.vertices), len(verts)):
            x = verts[vi]
            for f in tagged:
                if np.linalg.norm(x - mesh.face_centroid[f]) > frad[f] + tol:
                    continue
                if min(_point_triangle_distance(x, t) for t in ftris[f]) <= tol:
                    vregions[vi].add(mesh.face_tags[f])

    tm = TetMesh(verts, tets, vregions)
    neg = tm.tet_volume <= 0
    if neg.any():
        raise MeshError(f"{int(neg.sum())} degenerate or inverted tetrahedra")
    vol = tm.tet_volume.sum()
    if abs(vol - mesh.total_volume()) > 1e-6 * mesh.total_volume():
        raise MeshError(
            f"tetrahedralization volume mismatch: {vol} vs {mesh.total_volume()}"
        )
    return tm
