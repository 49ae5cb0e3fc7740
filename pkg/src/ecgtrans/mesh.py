"""Triangulations of disks and annuli with tagged boundary loops.

Meshes are built ring by ring.  Ring node counts are powers of two, so
halving ``h_target`` exactly doubles every loop and nested refinements
line up node-for-node on the boundary circles.
"""
from __future__ import annotations

import math
from pathlib import Path

import numpy as np

from .errors import InputError

__all__ = [
    "OUTER",
    "INNER",
    "Mesh",
    "generate_annulus",
    "generate_disk",
    "boundary_nodes",
    "save_mesh",
    "load_mesh",
    "quality_report",
]

OUTER = "OUTER"
INNER = "INNER"
TAGS = (OUTER, INNER)


class Mesh:
    """Immutable P1 triangulation.

    Parameters
    ----------
    vertices : (N, 2) array
    triangles : (T, 3) int array, counterclockwise
    edges : (E, 2) int array of boundary edges
    edge_tags : sequence of str, one of ``OUTER``/``INNER`` per edge

    Boundary edges are re-oriented so the domain lies to their left; the
    outward normal of edge ``(p, q)`` is then ``(t_y, -t_x)``.
    """

    def __init__(self, vertices, triangles, edges, edge_tags):
        vertices = np.array(vertices, dtype=float)
        triangles = np.array(triangles, dtype=np.int64)
        edges = np.array(edges, dtype=np.int64).reshape(-1, 2)
        edge_tags = np.array([str(t) for t in edge_tags], dtype=object)
        if vertices.ndim != 2 or vertices.shape[1] != 2:
            raise InputError("vertices must have shape (N, 2)")
        if triangles.ndim != 2 or triangles.shape[1] != 3:
            raise InputError("triangles must have shape (T, 3)")
        if len(edge_tags) != len(edges):
            raise InputError("one tag per boundary edge required")
        bad = set(edge_tags) - set(TAGS)
        if bad:
            raise InputError(f"unknown boundary tags {sorted(bad)}")
        nv = len(vertices)
        if triangles.size and (triangles.min() < 0 or triangles.max() >= nv):
            raise InputError("triangle references a missing vertex")
        if not np.all(np.isfinite(vertices)):
            raise InputError("non-finite vertex coordinates")

        areas = _signed_areas(vertices, triangles)
        if np.any(areas <= 0):
            raise InputError(f"{int(np.sum(areas <= 0))} triangles with non-positive area")

        # edge -> adjacent triangles; manifold check
        half = np.concatenate([triangles[:, [0, 1]], triangles[:, [1, 2]], triangles[:, [2, 0]]])
        key = np.sort(half, axis=1)
        uniq, inv, counts = np.unique(key, axis=0, return_inverse=True, return_counts=True)
        inv = inv.ravel()
        if np.any(counts > 2):
            raise InputError("non-manifold edge shared by more than two triangles")
        boundary_keys = uniq[counts == 1]
        directed = half[counts[inv] == 1]

        given = {tuple(sorted(e)): t for e, t in zip(edges.tolist(), edge_tags)}
        if len(given) != len(edges):
            raise InputError("duplicate boundary edges")
        if set(given) != {tuple(e) for e in boundary_keys.tolist()}:
            raise InputError("boundary edge list does not match the triangulation boundary")
        # orient as in the owning triangle (domain on the left)
        oriented = directed
        tags = np.array([given[tuple(sorted(e))] for e in oriented.tolist()], dtype=object)

        self.vertices = vertices
        self.triangles = triangles
        self.areas = areas
        self.edges = oriented
        self.edge_tags = tags
        self.n_edges_total = len(uniq)
        t = vertices[oriented[:, 1]] - vertices[oriented[:, 0]]
        self.edge_lengths = np.hypot(t[:, 0], t[:, 1])
        self.normals = np.column_stack([t[:, 1], -t[:, 0]]) / self.edge_lengths[:, None]
        self._loops = {tag: _order_loop(oriented[tags == tag]) for tag in TAGS if np.any(tags == tag)}
        for arr in (self.vertices, self.triangles, self.areas, self.edges,
                    self.edge_lengths, self.normals):
            arr.setflags(write=False)

    @property
    def n_nodes(self):
        return len(self.vertices)

    @property
    def tags(self):
        return tuple(self._loops)

    def euler_characteristic(self):
        return self.n_nodes - self.n_edges_total + len(self.triangles)

    def boundary_nodes(self, tag):
        try:
            return self._loops[tag]
        except KeyError:
            raise InputError(f"mesh has no boundary tagged {tag!r}") from None

    def boundary_edges(self, tag):
        if tag not in self._loops:
            raise InputError(f"mesh has no boundary tagged {tag!r}")
        return np.flatnonzero(self.edge_tags == tag)

    def boundary_weights(self, tag):
        """Trapezoidal weights ``w_i = sum |e|/2`` over edges at each loop node."""
        nodes = self.boundary_nodes(tag)
        idx = self.boundary_edges(tag)
        w = np.zeros(self.n_nodes)
        np.add.at(w, self.edges[idx, 0], 0.5 * self.edge_lengths[idx])
        np.add.at(w, self.edges[idx, 1], 0.5 * self.edge_lengths[idx])
        return w[nodes]

    def boundary_length(self, tag):
        return float(self.edge_lengths[self.boundary_edges(tag)].sum())

    def node_normals(self, tag):
        """Average of the two adjacent edge normals at each loop node, normalized."""
        nodes = self.boundary_nodes(tag)
        idx = self.boundary_edges(tag)
        acc = np.zeros((self.n_nodes, 2))
        np.add.at(acc, self.edges[idx, 0], self.normals[idx])
        np.add.at(acc, self.edges[idx, 1], self.normals[idx])
        nn = acc[nodes]
        return nn / np.linalg.norm(nn, axis=1, keepdims=True)

    def edge_length_stats(self):
        e = np.concatenate([self.triangles[:, [0, 1]], self.triangles[:, [1, 2]],
                            self.triangles[:, [2, 0]]])
        d = self.vertices[e[:, 1]] - self.vertices[e[:, 0]]
        lengths = np.hypot(d[:, 0], d[:, 1])
        return float(lengths.min()), float(lengths.max())

    def min_angle(self):
        """Smallest interior angle over all triangles, in degrees."""
        p = self.vertices[self.triangles]
        angles = []
        for i in range(3):
            u = p[:, (i + 1) % 3] - p[:, i]
            v = p[:, (i + 2) % 3] - p[:, i]
            cosang = np.einsum("ij,ij->i", u, v) / (np.linalg.norm(u, axis=1) * np.linalg.norm(v, axis=1))
            angles.append(np.degrees(np.arccos(np.clip(cosang, -1, 1))))
        return float(np.min(angles))

    def centroids(self):
        return self.vertices[self.triangles].mean(axis=1)

    def __repr__(self):
        return f"<Mesh nodes={self.n_nodes} triangles={len(self.triangles)} loops={list(self._loops)}>"


def _signed_areas(v, tri):
    p0, p1, p2 = v[tri[:, 0]], v[tri[:, 1]], v[tri[:, 2]]
    return 0.5 * ((p1[:, 0] - p0[:, 0]) * (p2[:, 1] - p0[:, 1])
                  - (p1[:, 1] - p0[:, 1]) * (p2[:, 0] - p0[:, 0]))


def _order_loop(edges):
    nxt = {}
    for p, q in edges.tolist():
        if p in nxt:
            raise InputError("boundary is not a simple closed loop")
        nxt[p] = q
    start = min(nxt)
    order = [start]
    node = nxt[start]
    while node != start:
        if node not in nxt or len(order) > len(nxt):
            raise InputError("boundary edges do not form a closed loop")
        order.append(node)
        node = nxt[node]
    if len(order) != len(nxt):
        raise InputError("each tag must form exactly one closed loop")
    arr = np.array(order, dtype=np.int64)
    arr.setflags(write=False)
    return arr


# --- generators -------------------------------------------------------------

def _ring_count(r, h):
    return max(8, 2 ** math.ceil(math.log2(2.0 * math.pi * r / h) - 1e-12))


def _ring(r, count):
    t = 2.0 * np.pi * np.arange(count) / count
    return np.column_stack([r * np.cos(t), r * np.sin(t)])


def _stitch(inner_ids, outer_ids, inner_pts, outer_pts):
    """Triangulate the strip between two concentric rings, counterclockwise."""
    na, nb = len(inner_ids), len(outer_ids)
    tri = []
    i = j = 0
    while i < na or j < nb:
        ta = 2 * math.pi * (i + 1) / na
        tb = 2 * math.pi * (j + 1) / nb
        a0, a1 = i % na, (i + 1) % na
        b0, b1 = j % nb, (j + 1) % nb
        if j >= nb:
            advance_inner = True
        elif i >= na:
            advance_inner = False
        elif abs(ta - tb) < 1e-12:
            d_inner = np.linalg.norm(inner_pts[a1] - outer_pts[b0])
            d_outer = np.linalg.norm(inner_pts[a0] - outer_pts[b1])
            advance_inner = d_inner <= d_outer
        else:
            advance_inner = ta < tb
        if advance_inner:
            tri.append((inner_ids[a0], outer_ids[b0], inner_ids[a1]))
            i += 1
        else:
            tri.append((inner_ids[a0], outer_ids[b0], outer_ids[b1]))
            j += 1
    return tri


def _assemble_rings(radii, counts, center):
    pts = []
    ids = []
    offset = 0
    if center:
        pts.append(np.zeros((1, 2)))
        offset = 1
    rings = []
    for r, c in zip(radii, counts):
        ring = _ring(r, c)
        rings.append(ring)
        ids.append(np.arange(offset, offset + c))
        pts.append(ring)
        offset += c
    vertices = np.vstack(pts)
    tri = []
    if center:
        c0 = ids[0]
        for a in range(len(c0)):
            tri.append((0, c0[a], c0[(a + 1) % len(c0)]))
    for s in range(len(radii) - 1):
        tri.extend(_stitch(ids[s], ids[s + 1], rings[s], rings[s + 1]))
    return vertices, np.array(tri, dtype=np.int64), ids


def _loop_edges(ids):
    return np.column_stack([ids, np.roll(ids, -1)])


def generate_annulus(r_in, r_out, h_target):
    """Mesh of ``{r_in <= |x| <= r_out}``; INNER on ``|x| = r_in``, OUTER on ``|x| = r_out``."""
    if not (r_in > 0 and r_out > r_in):
        raise InputError(f"need 0 < r_in < r_out, got r_in={r_in}, r_out={r_out}")
    if not (0 < h_target < r_out - r_in):
        raise InputError(f"need 0 < h_target < r_out - r_in, got {h_target}")
    nr = math.ceil((r_out - r_in) / h_target - 1e-12)
    radii = np.linspace(r_in, r_out, nr + 1)
    counts = [_ring_count(r, h_target) for r in radii]
    vertices, tri, ids = _assemble_rings(radii, counts, center=False)
    edges = np.vstack([_loop_edges(ids[0]), _loop_edges(ids[-1])])
    tags = [INNER] * counts[0] + [OUTER] * counts[-1]
    return Mesh(vertices, tri, edges, tags)


def generate_disk(r, h_target):
    """Mesh of ``{|x| <= r}`` with a single INNER-tagged boundary loop."""
    if not r > 0:
        raise InputError(f"need r > 0, got {r}")
    if not 0 < h_target < r:
        raise InputError(f"need 0 < h_target < r, got {h_target}")
    nr = math.ceil(r / h_target - 1e-12)
    radii = np.linspace(0.0, r, nr + 1)[1:]
    counts = [_ring_count(rr, h_target) for rr in radii]
    vertices, tri, ids = _assemble_rings(radii, counts, center=True)
    edges = _loop_edges(ids[-1])
    return Mesh(vertices, tri, edges, [INNER] * len(edges))


def boundary_nodes(mesh, tag):
    return mesh.boundary_nodes(tag)


def quality_report(mesh):
    emin, emax = mesh.edge_length_stats()
    report = {
        "nodes": mesh.n_nodes,
        "triangles": len(mesh.triangles),
        "edges": mesh.n_edges_total,
        "euler_characteristic": mesh.euler_characteristic(),
        "min_angle_deg": mesh.min_angle(),
        "min_edge": emin,
        "max_edge": emax,
        "min_area": float(mesh.areas.min()),
    }
    for tag in mesh.tags:
        report[f"{tag.lower()}_nodes"] = len(mesh.boundary_nodes(tag))
        report[f"{tag.lower()}_length"] = mesh.boundary_length(tag)
    return report


# --- file format ------------------------------------------------------------
#
#   ecgtrans-mesh 1
#   VERTICES <N>
#   <x> <y>                 (N lines, repr floats: exact round trip)
#   TRIANGLES <T>
#   <i> <j> <k>             (T lines, 0-based, counterclockwise)
#   EDGES <E>
#   <i> <j> <TAG>           (E lines, TAG in OUTER/INNER)
#
# Blank lines and lines starting with '#' are ignored.

MESH_HEADER = "ecgtrans-mesh 1"


def save_mesh(mesh, path):
    lines = [MESH_HEADER, f"VERTICES {mesh.n_nodes}"]
    lines += [f"{x!r} {y!r}" for x, y in mesh.vertices.tolist()]
    lines.append(f"TRIANGLES {len(mesh.triangles)}")
    lines += [f"{a} {b} {c}" for a, b, c in mesh.triangles.tolist()]
    lines.append(f"EDGES {len(mesh.edges)}")
    lines += [f"{p} {q} {t}" for (p, q), t in zip(mesh.edges.tolist(), mesh.edge_tags)]
    Path(path).write_text("\n".join(lines) + "\n")


def load_mesh(path):
    try:
        raw = Path(path).read_text().splitlines()
    except OSError as exc:
        raise InputError(f"cannot read mesh file: {exc}") from None
    lines = [ln.strip() for ln in raw if ln.strip() and not ln.lstrip().startswith("#")]
    if not lines or lines[0] != MESH_HEADER:
        raise InputError(f"{path}: missing header {MESH_HEADER!r}")
    pos = 1

    def section(name, ncols, conv):
        nonlocal pos
        if pos >= len(lines):
            raise InputError(f"{path}: missing {name} section")
        head = lines[pos].split()
        if len(head) != 2 or head[0] != name:
            raise InputError(f"{path}: expected '{name} <count>', got {lines[pos]!r}")
        count = int(head[1])
        rows = lines[pos + 1:pos + 1 + count]
        if len(rows) != count:
            raise InputError(f"{path}: {name} section truncated")
        pos += 1 + count
        out = []
        for row in rows:
            parts = row.split()
            if len(parts) != ncols:
                raise InputError(f"{path}: bad {name} row {row!r}")
            try:
                out.append(conv(parts))
            except ValueError:
                raise InputError(f"{path}: bad {name} row {row!r}") from None
        return out

    verts = section("VERTICES", 2, lambda p: (float(p[0]), float(p[1])))
    tris = section("TRIANGLES", 3, lambda p: tuple(int(x) for x in p))
    edges = section("EDGES", 3, lambda p: (int(p[0]), int(p[1]), p[2]))
    if pos != len(lines):
        raise InputError(f"{path}: trailing content after EDGES section")
    return Mesh(np.array(verts).reshape(-1, 2), np.array(tris, dtype=np.int64).reshape(-1, 3),
                [(p, q) for p, q, _ in edges], [t for _, _, t in edges])
