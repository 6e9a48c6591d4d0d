"""Finite metric trees, branched coverings between them, and tree fitting.

A ``FiniteTree`` has finite edges between ordinary vertices and infinite
edges (rays) ending at marked end leaves.  Points are ``TreePoint(a, b, t)``:
on the edge ``{a, b}`` at distance ``t`` from ``a``; on a ray, ``a`` is the
finite vertex.  A ``TreeMap`` sends each source vertex to a target point and
each source edge linearly, with an integer slope, onto the geodesic between
the images of its endpoints (for a ray: onto the ray towards the image end).

Local degrees count directions: ``deg_x`` is the number of directions at
``x`` whose images agree with a given direction at ``F(x)``.  Slopes record
the expansion along an edge and do not enter the degree.
"""

from __future__ import annotations

import itertools
import json
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .errors import ConfigError, DomainError, StructureError

LENGTH_RTOL = 1e-9
GENERIC_SAMPLES = 7
CONTRACT = 1e-12


# ---------------------------------------------------------------------------
# trees and points


@dataclass(frozen=True)
class TreePoint:
    """Point on the edge ``{a, b}`` at distance ``t`` from ``a``; ``a == b`` is a vertex."""

    a: str
    b: str
    t: float = 0.0

    @property
    def is_vertex(self):
        return self.a == self.b

    def __repr__(self):
        if self.is_vertex:
            return f"TreePoint({self.a!r})"
        return f"TreePoint({self.a!r}, {self.b!r}, {self.t:.6g})"


def vertex_point(v) -> TreePoint:
    return TreePoint(str(v), str(v), 0.0)


class FiniteTree:
    """A finite tree with positive edge lengths and optional marked ends."""

    __slots__ = ("vertices", "edges", "ends", "_adj", "_len")

    def __init__(self, vertices: Iterable, edges: Iterable, ends: Iterable = ()):
        verts = tuple(str(v) for v in vertices)
        if len(set(verts)) != len(verts):
            raise DomainError("duplicate vertex ids")
        if not verts:
            raise DomainError("a tree needs at least one vertex")
        ends = frozenset(str(e) for e in ends)
        adj = {v: {} for v in verts}
        lengths = {}
        clean = []
        for u, v, length in edges:
            u, v = str(u), str(v)
            if u not in adj or v not in adj:
                raise DomainError(f"edge ({u}, {v}) uses an unknown vertex")
            if u == v or v in adj[u]:
                raise DomainError(f"loop or repeated edge ({u}, {v})")
            is_ray = u in ends or v in ends
            if is_ray:
                length = math.inf
            else:
                length = float(length)
                if not (length > 0 and math.isfinite(length)):
                    raise DomainError(f"edge ({u}, {v}) needs a positive finite length, got {length}")
            if u in ends:  # store rays as (finite vertex, end)
                u, v = v, u
            adj[u][v] = length
            adj[v][u] = length
            lengths[frozenset((u, v))] = length
            clean.append((u, v, length))
        if len(clean) != len(verts) - 1:
            raise DomainError("a tree on n vertices has n - 1 edges")
        seen = {verts[0]}
        queue = deque([verts[0]])
        while queue:
            x = queue.popleft()
            for y in adj[x]:
                if y not in seen:
                    seen.add(y)
                    queue.append(y)
        if len(seen) != len(verts):
            raise DomainError("tree is not connected")
        for e in ends:
            if e not in adj:
                raise DomainError(f"unknown end {e!r}")
            if len(adj[e]) != 1:
                raise DomainError(f"end {e!r} must be a leaf")
            (nb,) = adj[e]
            if nb in ends:
                raise DomainError("two ends cannot be adjacent")
        self.vertices = verts
        self.edges = tuple(clean)
        self.ends = ends
        self._adj = adj
        self._len = lengths

    # -- basic queries --------------------------------------------------------

    def __repr__(self):
        return f"FiniteTree({len(self.vertices)} vertices, {len(self.edges)} edges, ends={sorted(self.ends)})"

    def __eq__(self, other):
        return (isinstance(other, FiniteTree) and set(self.vertices) == set(other.vertices)
                and self._len == other._len and self.ends == other.ends)

    def __hash__(self):
        return hash((frozenset(self.vertices), self.ends))

    def neighbors(self, v):
        return sorted(self._adj[v])

    def degree(self, v):
        return len(self._adj[v])

    def length(self, u, v) -> float:
        try:
            return self._len[frozenset((u, v))]
        except KeyError:
            raise DomainError(f"no edge ({u}, {v})") from None

    def has_edge(self, u, v):
        return frozenset((u, v)) in self._len

    def check_vertex(self, v):
        if v not in self._adj:
            raise DomainError(f"unknown vertex {v!r}")

    def point(self, a, b=None, t: float = 0.0) -> TreePoint:
        """Validated, canonical point (vertices get ``a == b``)."""
        a = str(a)
        self.check_vertex(a)
        if b is None or str(b) == a:
            if a in self.ends:
                raise DomainError("ends are not points of the tree")
            return vertex_point(a)
        b = str(b)
        L = self.length(a, b)
        if a in self.ends:  # measure from the finite vertex
            if not math.isinf(L):
                raise DomainError("internal error: end on a finite edge")
            raise DomainError("points on a ray are measured from its finite vertex")
        t = float(t)
        if t < 0 or t > L or (math.isinf(L) and not math.isfinite(t)):
            raise DomainError(f"offset {t} outside the edge ({a}, {b})")
        if t == 0:
            return vertex_point(a)
        if t == L:
            return vertex_point(b)
        return TreePoint(a, b, t)

    def canonical(self, p: TreePoint) -> TreePoint:
        return self.point(p.a, None if p.is_vertex else p.b, p.t)

    def path(self, u, v):
        """Vertices on the unique path from ``u`` to ``v``."""
        self.check_vertex(u)
        self.check_vertex(v)
        parent = {u: None}
        queue = deque([u])
        while queue:
            x = queue.popleft()
            if x == v:
                break
            for y in self._adj[x]:
                if y not in parent:
                    parent[y] = x
                    queue.append(y)
        out = [v]
        while out[-1] != u:
            out.append(parent[out[-1]])
        return out[::-1]

    def vertex_dist(self, u, v) -> float:
        p = self.path(u, v)
        return float(sum(self.length(x, y) for x, y in zip(p[:-1], p[1:])))

    def _anchors(self, p: TreePoint):
        """Finite endpoints of the edge carrying ``p`` with distances to them."""
        if p.is_vertex:
            return [(p.a, 0.0)]
        L = self.length(p.a, p.b)
        out = [(p.a, p.t)]
        if p.b not in self.ends:
            out.append((p.b, L - p.t))
        return out

    def dist(self, p, q) -> float:
        p = p if isinstance(p, TreePoint) else vertex_point(p)
        q = q if isinstance(q, TreePoint) else vertex_point(q)
        if not p.is_vertex and not q.is_vertex and frozenset((p.a, p.b)) == frozenset((q.a, q.b)):
            tq = q.t if q.a == p.a else self.length(q.a, q.b) - q.t
            return abs(p.t - tq)
        return min(dp + self.vertex_dist(x, y) + dq for x, dp in self._anchors(p) for y, dq in self._anchors(q))

    def directions(self, p: TreePoint):
        """Directions at ``p``, each named by the vertex it points towards."""
        if p.is_vertex:
            return sorted(self._adj[p.a])
        return sorted((p.a, p.b))

    # -- walking along geodesics ---------------------------------------------

    def _exit(self, p: TreePoint, x: str):
        """Segment from ``p`` to ``x``, an endpoint of the edge carrying ``p``."""
        if p.is_vertex:
            return []
        return [(p.a, p.b, p.t, self.length(p.a, p.b) if x == p.b else 0.0)]

    def _vertex_walk(self, u, v):
        verts = self.path(u, v)
        return [(x, y, 0.0, self.length(x, y)) for x, y in zip(verts[:-1], verts[1:])]

    def walk(self, p: TreePoint, dest: str):
        """Segments ``(u, v, s0, s1)`` of the geodesic from ``p`` to vertex (or end) ``dest``.

        Each segment runs along the edge ``{u, v}`` from offset ``s0`` to
        offset ``s1``, both measured from ``u`` (the finite vertex on a ray);
        the last segment of a walk into an end is infinite.
        """
        self.check_vertex(dest)
        if p.is_vertex:
            return self._vertex_walk(p.a, dest)
        x = p.b if (p.b == dest or p.b in self.path(p.a, dest)) else p.a
        return self._exit(p, x) + self._vertex_walk(x, dest)

    def walk_between(self, p: TreePoint, q: TreePoint):
        """Segments of the geodesic from ``p`` to ``q`` (total length ``dist(p, q)``)."""
        if not p.is_vertex and not q.is_vertex and frozenset((p.a, p.b)) == frozenset((q.a, q.b)):
            tq = q.t if q.a == p.a else self.length(q.a, q.b) - q.t
            return [(p.a, p.b, p.t, tq)] if tq != p.t else []
        if q.is_vertex:
            return self.walk(p, q.a)
        _, x, y = min(((dp + self.vertex_dist(x, y) + dq, x, y)
                       for x, dp in self._anchors(p) for y, dq in self._anchors(q)), key=lambda c: c[0])
        tail = [(q.a, q.b, 0.0 if y == q.a else self.length(q.a, q.b), q.t)]
        return self._exit(p, x) + self._vertex_walk(x, y) + tail

    def locate(self, segs, y: TreePoint):
        """Distance along ``segs`` at which ``y`` lies, or ``None``."""
        acc = 0.0
        for u, v, s0, s1 in segs:
            if y.is_vertex:
                off = 0.0 if y.a == u else (self.length(u, v) if y.a == v else None)
            elif frozenset((y.a, y.b)) == frozenset((u, v)):
                off = y.t if y.a == u else self.length(u, v) - y.t
            else:
                off = None
            if off is not None and min(s0, s1) - 1e-12 <= off <= max(s0, s1) + 1e-12:
                return acc + abs(off - s0)
            acc += abs(s1 - s0)
        return None

    def point_along(self, segs, D: float) -> TreePoint:
        """The point at distance ``D`` along ``segs``."""
        acc = 0.0
        for u, v, s0, s1 in segs:
            span = abs(s1 - s0)
            if D <= acc + span + 1e-15:
                step = min(D - acc, span)
                off = s0 + step if s1 >= s0 else s0 - step
                L = self.length(u, v)
                if off <= 0:
                    return vertex_point(u)
                if off >= L:
                    return vertex_point(v)
                return TreePoint(u, v, off)
            acc += span
        raise DomainError(f"distance {D} beyond the end of the walk")

    # -- serialisation --------------------------------------------------------

    def to_dict(self):
        return {"vertices": list(self.vertices),
                "edges": [[u, v, None if math.isinf(L) else L] for u, v, L in self.edges],
                "ends": sorted(self.ends)}

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - {"vertices", "edges", "ends"}
        if unknown:
            raise ConfigError(f"unknown tree fields {sorted(unknown)}")
        try:
            edges = [(u, v, math.inf if L is None else L) for u, v, L in d["edges"]]
            return cls(d["vertices"], edges, d.get("ends", ()))
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"malformed tree: {exc}") from None


def tree_to_json(tree: FiniteTree) -> str:
    return json.dumps(tree.to_dict(), sort_keys=True)


def tree_from_json(text: str) -> FiniteTree:
    return FiniteTree.from_dict(json.loads(text))


# ---------------------------------------------------------------------------
# hulls and projections


def hull(tree: FiniteTree, targets: Iterable) -> FiniteTree:
    """Smallest subtree containing the target vertices (ends included as leaves)."""
    targets = sorted({str(t) for t in targets})
    if not targets:
        raise DomainError("hull needs at least one target")
    for t in targets:
        tree.check_vertex(t)
    verts = {targets[0]}
    for t in targets[1:]:
        verts.update(tree.path(targets[0], t))
    edges = [(u, v, L) for u, v, L in tree.edges if u in verts and v in verts]
    order = [v for v in tree.vertices if v in verts]
    return FiniteTree(order, edges, [e for e in tree.ends if e in verts])


def _in_subtree(sub: FiniteTree, p: TreePoint):
    if p.is_vertex:
        return p.a in sub._adj
    return sub.has_edge(p.a, p.b)


def project(tree: FiniteTree, point: TreePoint, subtree: FiniteTree) -> TreePoint:
    """Nearest point of ``subtree`` (a subtree of ``tree``) to ``point``."""
    point = tree.canonical(point)
    if _in_subtree(subtree, point):
        return point
    anchor = next(v for v in subtree.vertices if v not in subtree.ends)
    for u, v, s0, s1 in tree.walk(point, anchor):
        for x in (u, v):
            if x in subtree._adj and x not in subtree.ends:
                # the first subtree vertex met on the way is the gate
                return vertex_point(x)
    return vertex_point(anchor)


# ---------------------------------------------------------------------------
# maps


def _edge_key(u, v):
    return tuple(sorted((str(u), str(v))))


class TreeMap:
    """Piecewise linear map with integer slopes between two finite trees.

    ``images`` maps every source vertex to a target point (ends to ends),
    ``slopes`` maps every source edge (as a sorted vertex pair) to a positive
    integer, ``degree`` is the declared global degree and ``witness`` the
    source vertices spanning the finite subtree ``S`` off which the map must
    be a local isometry.  Length consistency is checked by
    ``validate_branched_cover``, not here, so that broken maps can be
    represented and diagnosed.
    """

    def __init__(self, source: FiniteTree, target: FiniteTree, images: dict, slopes: dict, degree: int,
                 witness: Iterable = ()):
        self.source = source
        self.target = target
        imgs = {}
        for v in source.vertices:
            if v not in images and str(v) not in images:
                raise StructureError(f"no image for vertex {v!r}")
            im = images.get(v, images.get(str(v)))
            if isinstance(im, (str, int)):
                im = vertex_point(im)
            if v in source.ends:
                if not im.is_vertex or im.a not in target.ends:
                    raise StructureError(f"end {v!r} must map to an end of the target")
                imgs[v] = im
            else:
                imgs[v] = target.canonical(im)
        sl = {}
        for u, v, _ in source.edges:
            key = _edge_key(u, v)
            e = slopes.get(key, slopes.get((key[1], key[0])))
            if e is None:
                raise StructureError(f"no slope for edge {key}")
            if not isinstance(e, (int, np.integer)) or isinstance(e, bool) or e < 1:
                raise StructureError(f"slope of edge {key} must be a positive integer, got {e!r}")
            sl[key] = int(e)
        if not isinstance(degree, (int, np.integer)) or degree < 1:
            raise StructureError("degree must be a positive integer")
        witness = frozenset(str(w) for w in witness)
        for w in witness:
            source.check_vertex(w)
        self.images = imgs
        self.slopes = sl
        self.degree = int(degree)
        self.witness = witness

    def slope(self, u, v):
        return self.slopes[_edge_key(u, v)]

    def edge_walk(self, u, v):
        """Image walk of the edge ``u -> v`` (``v`` may be an end)."""
        tgt = self.target
        pu = self.images[u]
        if v in self.source.ends:
            return tgt.walk(pu, self.images[v].a)
        if u in self.source.ends:
            raise DomainError("walk rays from their finite vertex")
        return tgt.walk_between(pu, self.images[v])

    def __call__(self, p) -> TreePoint:
        p = p if isinstance(p, TreePoint) else vertex_point(p)
        if p.is_vertex:
            return self.images[p.a]
        e = self.slope(p.a, p.b)
        return self.target.point_along(self.edge_walk(p.a, p.b), e * p.t)

    def image_direction(self, x: TreePoint, toward: str):
        """Direction at ``F(x)`` (named by a target vertex) of the source direction."""
        src = self.source
        if x.is_vertex:
            a, b, t = x.a, toward, 0.0
        else:
            a, b = x.a, x.b
            t = x.t
        if a in src.ends:
            a, b = b, a
            t = 0.0
        segs = self.edge_walk(a, b)
        D = self.slope(a, b) * t
        forward = (toward == b)
        if not x.is_vertex and toward == a:
            forward = False
        if x.is_vertex:
            forward = True
        acc = 0.0
        for u, v, s0, s1 in segs:
            lo, hi = acc, acc + abs(s1 - s0)
            ahead, behind = (v, u) if s1 > s0 else (u, v)
            if forward and lo - 1e-12 <= D < hi - 1e-12:
                return ahead
            if not forward and lo + 1e-12 < D <= hi + 1e-12:
                return behind
            acc = hi
        raise StructureError(f"edge ({a}, {b}) collapses at {x}")

    def to_dict(self):
        def pt(p):
            return [p.a] if p.is_vertex else [p.a, p.b, p.t]
        return {"source": self.source.to_dict(), "target": self.target.to_dict(),
                "images": {v: pt(p) for v, p in sorted(self.images.items())},
                "slopes": [[u, v, e] for (u, v), e in sorted(self.slopes.items())],
                "degree": self.degree, "witness": sorted(self.witness)}

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - {"source", "target", "images", "slopes", "degree", "witness"}
        if unknown:
            raise ConfigError(f"unknown map fields {sorted(unknown)}")
        try:
            src = FiniteTree.from_dict(d["source"])
            tgt = d.get("target")
            tgt = src if tgt is None else FiniteTree.from_dict(tgt)
            images = {}
            for v, p in d["images"].items():
                images[v] = vertex_point(p[0]) if len(p) == 1 else TreePoint(str(p[0]), str(p[1]), float(p[2]))
            slopes = {_edge_key(u, v): e for u, v, e in d["slopes"]}
            return cls(src, tgt, images, slopes, d["degree"], d.get("witness", ()))
        except (KeyError, TypeError, ValueError, IndexError) as exc:
            raise ConfigError(f"malformed tree map: {exc}") from None


def map_to_json(f: TreeMap) -> str:
    return json.dumps(f.to_dict(), sort_keys=True)


def map_from_json(text: str) -> TreeMap:
    return TreeMap.from_dict(json.loads(text))


def _direction_counts(f: TreeMap, x: TreePoint):
    counts = {}
    for w in f.source.directions(x):
        img = f.image_direction(x, w)
        counts[img] = counts.get(img, 0) + 1
    return counts


def local_degree(f: TreeMap, x) -> int:
    """Number of directions at ``x`` sharing an image direction (maximised over them)."""
    x = x if isinstance(x, TreePoint) else vertex_point(x)
    x = f.source.canonical(x)
    if not f.source.edges:
        return 1
    return max(_direction_counts(f, x).values())


def critical_locus(f: TreeMap):
    """Source points of local degree >= 2 (only vertices can qualify)."""
    return [vertex_point(v) for v in f.source.vertices
            if v not in f.source.ends and local_degree(f, v) >= 2]


def fiber(f: TreeMap, y: TreePoint):
    """All source points mapping to ``y``."""
    y = f.target.canonical(y)
    found = {}
    for v in f.source.vertices:
        if v not in f.source.ends and f.images[v] == y:
            found[(v, v, 0.0)] = vertex_point(v)
    for u, v, L in f.source.edges:
        D = f.target.locate(f.edge_walk(u, v), y)
        if D is None:
            continue
        t = D / f.slope(u, v)
        p = f.source.point(u, v, min(t, L))
        found[(p.a, p.b, round(p.t, 12))] = p
    return [found[k] for k in sorted(found)]


# ---------------------------------------------------------------------------
# validation


@dataclass
class CoverReport:
    valid: bool
    degree: int
    failures: list = field(default_factory=list)   # (kind, witness, detail)

    def __str__(self):
        if self.valid:
            return f"valid, d = {self.degree}"
        kind, wit, detail = self.failures[0]
        return f"invalid ({len(self.failures)} failures); first: {kind} at {wit}: {detail}"


def _target_samples(tgt: FiniteTree, k: int):
    finite_total = sum(L for _, _, L in tgt.edges if math.isfinite(L))
    ray_extent = 1.0 + finite_total
    out = [vertex_point(v) for v in tgt.vertices if v not in tgt.ends]
    for u, v, L in tgt.edges:
        span = ray_extent if math.isinf(L) else L
        for j in range(1, k + 1):
            out.append(TreePoint(u, v, span * j / (k + 1)))
    return out


def validate_branched_cover(f: TreeMap, samples: int = GENERIC_SAMPLES) -> CoverReport:
    """Check the branched covering axioms; every failure comes with a witness."""
    src, tgt = f.source, f.target
    fails = []
    S = hull(src, f.witness) if f.witness else None

    def in_S_edge(u, v):
        return S is not None and S.has_edge(u, v)

    def in_S_vertex(v):
        return S is not None and v in S.vertices

    for u, v, L in src.edges:
        e = f.slope(u, v)
        if v in src.ends:
            if f.images[v].a not in tgt.ends:
                fails.append(("end", v, "end does not map to an end"))
        else:
            img_len = tgt.dist(f.images[u], f.images[v])
            if abs(img_len - e * L) > LENGTH_RTOL * max(1.0, e * L):
                fails.append(("length", (u, v), f"image length {img_len:.12g} != slope {e} x {L:.12g}"))
                continue
        if e != 1 and not in_S_edge(u, v):
            fails.append(("isometry", (u, v), f"slope {e} outside the witness subtree"))
    if fails:
        return CoverReport(False, f.degree, fails)
    for v in src.vertices:
        if v in src.ends:
            continue
        try:
            counts = _direction_counts(f, vertex_point(v))
        except StructureError as exc:
            fails.append(("collapse", v, str(exc)))
            continue
        dirs = tgt.directions(f.images[v])
        vals = {counts.get(w, 0) for w in dirs}
        if len(vals) != 1:
            fails.append(("direction", v, f"direction counts {dict(sorted(counts.items()))} over {dirs}"))
        elif max(counts.values()) > 1 and not in_S_vertex(v):
            fails.append(("isometry", v, "folding outside the witness subtree"))
    for y in _target_samples(tgt, samples):
        try:
            pts = fiber(f, y)
            total = sum(local_degree(f, x) for x in pts)
        except (StructureError, DomainError) as exc:
            fails.append(("fiber", y, str(exc)))
            continue
        if total != f.degree:
            fails.append(("fiber", y, f"fiber degree sum {total} != {f.degree}"))
    return CoverReport(not fails, f.degree, fails)


# ---------------------------------------------------------------------------
# translation lengths


def _ray_constant(tree: FiniteTree, end: str, x: TreePoint) -> float:
    """``c`` with ``dist(z, x) = s + c`` for ``z`` far out on the ray to ``end`` (``s`` from its base)."""
    (base,) = tree.neighbors(end)
    if not x.is_vertex and frozenset((x.a, x.b)) == frozenset((base, end)):
        return -x.t
    return tree.dist(vertex_point(base), x)


def translation_length_end(f: TreeMap, end, basepoint=None) -> float:
    """``lim dist(x, x0) - dist(F x, x0)`` along the ray to ``end``; ``-inf`` if it expands."""
    if f.source != f.target:
        raise StructureError("translation lengths need a self-map of a tree")
    tree = f.source
    end = str(end)
    if end not in tree.ends:
        raise StructureError(f"{end!r} is not a marked end")
    image = f.images[end]
    if not image.is_vertex or image.a not in tree.ends:
        raise StructureError(f"end {end!r} is not eventually mapped into a ray")
    (base,) = tree.neighbors(end)
    if f.slope(base, end) >= 2:
        return -math.inf
    if basepoint is None:
        x0 = vertex_point(next(v for v in tree.vertices if v not in tree.ends))
    elif isinstance(basepoint, TreePoint):
        x0 = tree.canonical(basepoint)
    else:
        x0 = tree.point(basepoint)
    beta = image.a
    return (_ray_constant(tree, end, x0) + _ray_constant(tree, beta, f.images[base])
            - _ray_constant(tree, beta, x0))


def cycle_translation_length(f: TreeMap, ends) -> float:
    """Sum of the translation lengths of a cycle of ends."""
    ends = [str(e) for e in ends]
    if not ends:
        raise StructureError("empty cycle")
    for a, b in zip(ends, ends[1:] + ends[:1]):
        if f.images.get(a) is None or f.images[a].a != b:
            raise StructureError(f"ends do not form a cycle: {a} does not map to {b}")
    vals = [translation_length_end(f, e) for e in ends]
    return -math.inf if any(v == -math.inf for v in vals) else float(sum(vals))


# ---------------------------------------------------------------------------
# tree fitting


@dataclass
class TreeFit:
    tree: FiniteTree
    placement: dict              # label -> vertex id
    distortion: float
    ok: bool
    worst_quadruple: tuple | None = None


def four_point_defect(D, i, j, k, l) -> float:
    """Gap between the two largest of the three pair sums (0 for tree metrics)."""
    s = sorted([D[i, j] + D[k, l], D[i, k] + D[j, l], D[i, l] + D[j, k]])
    return s[2] - s[1]


def fit_tree(labels, D, tol: float = 1e-9, basepoint: int = 0) -> TreeFit:
    """Tree metric close to ``D`` built from repaired Gromov products at ``basepoint``.

    Gromov products are replaced by their max-min closure (a maximum
    spanning tree, ties broken by label order), which is the standard
    repair of the four-point condition; the tree is then read off the
    resulting dendrogram.  ``ok`` is false when the maximum distortion
    exceeds ``tol``; ``worst_quadruple`` names the labels with the largest
    four-point defect in that case.
    """
    labels = [str(x) for x in labels]
    D = np.asarray(D, dtype=float)
    n = len(labels)
    if n < 2:
        raise DomainError("fit_tree needs at least two points")
    if D.shape != (n, n) or not np.allclose(D, D.T) or np.any(np.diag(D) != 0) or np.any(D < 0):
        raise DomainError("distance matrix must be square, symmetric, nonnegative with zero diagonal")
    if len(set(labels)) != n:
        raise DomainError("labels must be distinct")
    b = basepoint
    h = D[b]
    G = (h[:, None] + h[None, :] - D) / 2
    G = np.minimum(G, np.minimum(h[:, None], h[None, :]))
    G = np.maximum(G, 0)
    others = [i for i in range(n) if i != b]
    rank = {i: r for r, i in enumerate(sorted(range(n), key=lambda i: labels[i]))}
    pairs = sorted(((G[i, j], i, j) for i, j in itertools.combinations(others, 2)),
                   key=lambda x: (-x[0], rank[x[1]], rank[x[2]]))
    # union-find dendrogram
    parent = {i: i for i in others}
    top = {i: ("leaf", i, h[i]) for i in others}   # cluster root -> node (kind, id, depth)
    nodes = {}      # node id -> depth
    links = []      # (child node, parent node)
    counter = itertools.count()

    def node_id(node):
        return labels[node[1]] if node[0] == "leaf" else node[1]

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for g, i, j in pairs:
        ri, rj = find(i), find(j)
        if ri == rj:
            continue
        bid = f"_b{next(counter)}"
        node = ("branch", bid, g)
        nodes[bid] = g
        links.append((top[ri], node))
        links.append((top[rj], node))
        parent[rj] = ri
        top[ri] = node
    roots = sorted({find(i) for i in others}, key=lambda i: rank[i])
    base_node = ("leaf", b, 0.0)
    for r in roots:
        links.append((top[r], base_node))
    # build adjacency with lengths, then contract zero-length edges onto labelled vertices
    depth = {labels[i]: h[i] for i in others}
    depth[labels[b]] = 0.0
    depth.update(nodes)
    edges = [(node_id(c), node_id(p)) for c, p in links]
    alias = {}

    def res(x):
        while x in alias:
            x = alias[x]
        return x

    changed = True
    while changed:
        changed = False
        for c, p in edges:
            c, p = res(c), res(p)
            if c != p and depth[c] - depth[p] <= CONTRACT:
                # keep labelled vertices; branch vertices are absorbed
                if c.startswith("_b"):
                    alias[c] = p
                elif p.startswith("_b"):
                    alias[p] = c
                    depth[c] = min(depth[c], depth[p])
                else:
                    continue
                changed = True
    final_edges = {}
    for c, p in edges:
        c, p = res(c), res(p)
        if c == p:
            continue
        L = max(depth[c] - depth[p], 0.0)
        key = tuple(sorted((c, p)))
        final_edges[key] = L
    verts = sorted({res(x) for x in depth})
    # relabel branch vertices deterministically
    names = {}
    k = 0
    for v in verts:
        if v.startswith("_b"):
            names[v] = f"b{k}"
            k += 1
        else:
            names[v] = v
    tree_edges = []
    for (u, v), L in sorted(final_edges.items()):
        if L <= CONTRACT:
            raise StructureError(f"zero-length edge between labelled points {u} and {v}: duplicate points")
        tree_edges.append((names[u], names[v], L))
    tree = FiniteTree([names[v] for v in verts], tree_edges)
    placement = {lab: names[res(lab)] for lab in labels}
    fitted = np.array([[tree.vertex_dist(placement[a], placement[c]) for c in labels] for a in labels])
    distortion = float(np.abs(fitted - D).max())
    ok = distortion <= tol
    worst = None
    if not ok and n >= 4:
        best = -1.0
        for q in itertools.combinations(sorted(range(n), key=lambda i: labels[i]), 4):
            dft = four_point_defect(D, *q)
            if dft > best + 1e-15:
                best, worst = dft, tuple(labels[i] for i in q)
    return TreeFit(tree, placement, distortion, ok, worst)


def hyperbolic_distances(vectors, scale: float) -> np.ndarray:
    """Pairwise hyperbolic distances divided by ``scale``.

    Points are given as ``direction * dist / scale`` about a common basepoint,
    as in a snapshot.  Uses ``d = 2 asinh sqrt(sinh^2((r1 - r2)/2) +
    sinh r1 sinh r2 sin^2(angle/2))`` evaluated in logs, so large radii do
    not overflow.
    """
    V = np.asarray(vectors, dtype=float)
    norms = np.linalg.norm(V, axis=1)
    rho = norms * scale
    n = len(V)
    out = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            if norms[i] == 0 or norms[j] == 0:
                d = abs(rho[i] - rho[j])
            else:
                c = float(np.clip(V[i] @ V[j] / (norms[i] * norms[j]), -1, 1))
                half = abs(rho[i] - rho[j]) / 2
                terms = []
                if half > 0:
                    terms.append(2 * _log_sinh(half))
                if c < 1:
                    terms.append(_log_sinh(rho[i]) + _log_sinh(rho[j]) + math.log((1 - c) / 2))
                if not terms:
                    d = 0.0
                else:
                    log_inner = float(np.logaddexp.reduce(terms))
                    d = (math.log(4) + log_inner if log_inner > 60
                         else 2 * math.asinh(math.exp(log_inner / 2)))
            out[i, j] = out[j, i] = d / scale
    return out


def _log_sinh(x):
    return x + math.log1p(-math.exp(-2 * x)) - math.log(2)


# ---------------------------------------------------------------------------
# random covers


def random_tree(rng: np.random.Generator, n: int, min_length=0.5, max_length=2.0) -> FiniteTree:
    """Random tree on ``t0 .. t{n-1}`` (each vertex attached to an earlier one)."""
    edges = [(f"t{int(rng.integers(i))}", f"t{i}", float(rng.uniform(min_length, max_length)))
             for i in range(1, n)]
    return FiniteTree([f"t{i}" for i in range(n)], edges)


def glued_cover(target: FiniteTree, d: int, rng: np.random.Generator, max_slope: int = 3) -> TreeMap:
    """Degree ``d`` branched cover made of ``d`` scaled copies of ``target``.

    Sheet ``k`` is glued to an earlier sheet at one randomly chosen vertex,
    which keeps the source a tree and gives the glued vertex local degree
    equal to the number of sheets through it.  Sheet edges get random slopes
    in ``1 .. max_slope`` with lengths divided accordingly; the witness
    subtree spans the glued vertices and the expanding edges.
    """
    if target.ends:
        raise DomainError("glued covers are built over trees without ends")
    alias = {}

    def name(k, v):
        x = f"s{k}_{v}"
        while x in alias:
            x = alias[x]
        return x

    glued = set()
    for k in range(1, d):
        j = int(rng.integers(k))
        v = target.vertices[int(rng.integers(len(target.vertices)))]
        root = name(j, v)
        alias[f"s{k}_{v}"] = root
        glued.add(root)
    verts, images, edges, slopes = [], {}, [], {}
    for k in range(d):
        for v in target.vertices:
            x = name(k, v)
            if x not in images:
                verts.append(x)
                images[x] = vertex_point(v)
        for u, v, L in target.edges:
            e = int(rng.integers(1, max_slope + 1))
            a, b = name(k, u), name(k, v)
            edges.append((a, b, L / e))
            slopes[_edge_key(a, b)] = e
    source = FiniteTree(verts, edges)
    witness = set(glued)
    for key, e in slopes.items():
        if e > 1:
            witness.update(key)
    return TreeMap(source, target, images, slopes, d, witness)


def mutate_cover(f: TreeMap, rng: np.random.Generator, kind: str) -> TreeMap:
    """Copy of ``f`` with one slope (``kind='slope'``) or one vertex image (``'image'``) changed."""
    images, slopes = dict(f.images), dict(f.slopes)
    if kind == "slope":
        key = sorted(slopes)[int(rng.integers(len(slopes)))]
        slopes[key] += 1
    elif kind == "image":
        v = f.source.vertices[int(rng.integers(len(f.source.vertices)))]
        choices = [w for w in f.target.vertices if vertex_point(w) != images[v] and w not in f.target.ends]
        images[v] = vertex_point(choices[int(rng.integers(len(choices)))])
    else:
        raise DomainError(f"unknown mutation {kind!r}")
    return TreeMap(f.source, f.target, images, slopes, f.degree, f.witness)
