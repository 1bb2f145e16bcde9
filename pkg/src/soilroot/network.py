"""Root network topology: segments, junctions, tips, and growth bookkeeping.

The network is a collection of straight 3D segments joined at shared nodes.
Each segment is oriented from its proximal end (``a``, toward the collar)
to its distal end (``b``, toward the tips).  Nodes where two or more
segments meet are junctions; the flux balance there is expressed with the
sign convention that a segment counts positively when the junction sits at
its distal end and negatively at its proximal end.

Growth is monotone: segments are never removed, only split in two at a
branch point (the union of their geometry is preserved) or extended by
appending new segments at tips.
"""

from dataclasses import dataclass, field, replace

import numpy as np


class NetworkError(Exception):
    pass


@dataclass
class Segment:
    a: int                 # proximal node id
    b: int                 # distal node id
    order: int
    birth: float           # creation time (days)
    root: int              # id of the root axis this segment belongs to
    parent: int | None = None   # segment this one was split from / branched off


@dataclass
class Tip:
    node: int
    order: int
    root: int
    direction: np.ndarray       # previous unit growth direction
    birth: float
    axis_length: float = 0.0    # length grown along this root axis (cm)
    alive: bool = True
    traits: object = None       # per-root sampled growth parameters
    branched: set = field(default_factory=set)  # arc-length keys already fired


class RootNetwork:
    """Mutable rooted network of straight segments."""

    def __init__(self, radius):
        if radius <= 0:
            raise NetworkError("radius must be positive")
        self.R = float(radius)
        self.nodes = []             # list of 3-vectors
        self.segments = {}          # id -> Segment
        self.replaced = {}          # old id -> (proximal id, distal id)
        self.tips = {}              # tip id -> Tip
        self.collar_node = None
        self.seed_node = None
        self._next_seg = 0
        self._next_tip = 0

    # -- construction ------------------------------------------------------

    def add_node(self, x):
        self.nodes.append(np.asarray(x, dtype=float).copy())
        return len(self.nodes) - 1

    def add_segment(self, a, b, order, birth=0.0, root=0, parent=None):
        if a == b:
            raise NetworkError("degenerate segment")
        if self.segment_length_points(self.nodes[a], self.nodes[b]) <= 0:
            raise NetworkError("zero-length segment")
        sid = self._next_seg
        self._next_seg += 1
        self.segments[sid] = Segment(a, b, order, birth, root, parent)
        return sid

    def add_tip(self, node, order, root, direction, birth=0.0, traits=None,
                axis_length=0.0):
        d = np.asarray(direction, dtype=float)
        nrm = np.linalg.norm(d)
        if nrm <= 0:
            raise NetworkError("tip direction must be non-zero")
        tid = self._next_tip
        self._next_tip += 1
        self.tips[tid] = Tip(node, order, root, d / nrm, birth,
                             axis_length=axis_length, traits=traits)
        return tid

    def split_segment(self, sid, t):
        """Split segment ``sid`` at parameter t in (0, 1).

        Returns (proximal id, distal id, new node id).  The original id is
        retired and recorded in ``replaced``.
        """
        if sid in self.replaced:
            raise NetworkError(f"segment {sid} was already split")
        seg = self.segments[sid]
        if not 0.0 < t < 1.0:
            raise NetworkError("split parameter must be interior")
        pa, pb = self.nodes[seg.a], self.nodes[seg.b]
        m = self.add_node(pa + t * (pb - pa))
        del self.segments[sid]
        s1 = self.add_segment(seg.a, m, seg.order, seg.birth, seg.root, sid)
        s2 = self.add_segment(m, seg.b, seg.order, seg.birth, seg.root, sid)
        self.replaced[sid] = (s1, s2)
        return s1, s2, m

    # -- geometry ----------------------------------------------------------

    @staticmethod
    def segment_length_points(pa, pb):
        return float(np.linalg.norm(np.asarray(pb) - np.asarray(pa)))

    def segment_points(self, sid):
        seg = self.segments[sid]
        return self.nodes[seg.a], self.nodes[seg.b]

    def segment_length(self, sid):
        pa, pb = self.segment_points(sid)
        return self.segment_length_points(pa, pb)

    def segment_direction(self, sid):
        pa, pb = self.segment_points(sid)
        d = pb - pa
        return d / np.linalg.norm(d)

    def total_length(self):
        return sum(self.segment_length(s) for s in self.segments)

    # -- topology ----------------------------------------------------------

    def node_incidence(self):
        """node id -> sorted list of (segment id, sign); sign +1 when the
        node is the segment's distal end, -1 when proximal."""
        inc = {}
        for sid in sorted(self.segments):
            seg = self.segments[sid]
            inc.setdefault(seg.a, []).append((sid, -1))
            inc.setdefault(seg.b, []).append((sid, +1))
        return inc

    def junctions(self):
        """node id -> incidence list, for nodes shared by >= 2 segments."""
        return {n: adj for n, adj in self.node_incidence().items()
                if len(adj) >= 2}

    def end_nodes(self):
        """Degree-1 nodes: the collar plus all flux-free ends (tips, seed)."""
        return [n for n, adj in self.node_incidence().items() if len(adj) == 1]

    def tip_like_nodes(self):
        """Degree-1 nodes excluding the collar (velocity pinned to zero)."""
        return [n for n in self.end_nodes() if n != self.collar_node]

    # -- invariants --------------------------------------------------------

    def validate(self, omega_max=None):
        inc = self.node_incidence()
        if self.collar_node is not None:
            if len(inc.get(self.collar_node, ())) != 1:
                raise NetworkError("collar must touch exactly one segment")
        for sid, seg in self.segments.items():
            if self.segment_length(sid) <= 0:
                raise NetworkError(f"segment {sid} has zero length")
            if seg.order < 0 or (omega_max is not None and seg.order > omega_max):
                raise NetworkError(f"segment {sid} order out of range")
        for tid, tip in self.tips.items():
            if tip.alive and len(inc.get(tip.node, ())) > 1:
                raise NetworkError(f"tip {tid} sits on a junction")
        return True

    def edge_union_covers(self, old):
        """Check that every edge of ``old`` is covered by edges of self
        lying on the same line (monotone growth, up to splitting)."""
        tol = 1e-9
        for sid in old.segments:
            pa, pb = old.segment_points(sid)
            d = pb - pa
            L2 = float(d @ d)
            covered = []
            for nid in self.segments:
                qa, qb = self.segment_points(nid)
                ta = float((qa - pa) @ d) / L2
                tb = float((qb - pa) @ d) / L2
                offa = np.linalg.norm(qa - (pa + ta * d))
                offb = np.linalg.norm(qb - (pa + tb * d))
                if offa > tol or offb > tol:
                    continue
                t0, t1 = sorted((ta, tb))
                t0, t1 = max(t0, 0.0), min(t1, 1.0)
                if t1 - t0 > tol:
                    covered.append((t0, t1))
            covered.sort()
            reach = 0.0
            for t0, t1 in covered:
                if t0 > reach + tol:
                    return False
                reach = max(reach, t1)
            if reach < 1.0 - tol:
                return False
        return True

    def copy(self):
        out = RootNetwork(self.R)
        out.nodes = [p.copy() for p in self.nodes]
        out.segments = {k: replace(v) for k, v in self.segments.items()}
        out.replaced = dict(self.replaced)
        out.tips = {
            k: replace(v, direction=v.direction.copy(), branched=set(v.branched))
            for k, v in self.tips.items()
        }
        out.collar_node = self.collar_node
        out.seed_node = self.seed_node
        out._next_seg = self._next_seg
        out._next_tip = self._next_tip
        return out


def single_segment_network(p0, p1, radius, order=0):
    """Straight one-segment network with the collar at ``p0``."""
    net = RootNetwork(radius)
    a = net.add_node(p0)
    b = net.add_node(p1)
    net.add_segment(a, b, order)
    net.collar_node = a
    net.add_tip(b, order, 0, np.asarray(p1, float) - np.asarray(p0, float))
    return net
