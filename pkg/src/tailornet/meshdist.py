"""Point-to-triangle-mesh queries: nearest point, signed distance, projection.

Signs come from angle-weighted pseudo-normals evaluated at the nearest
surface feature (face, edge or vertex), which is correct on closed meshes
with consistent outward winding.  Meshes made of several closed patches
(detected by edge adjacency) are treated as a union: each patch is queried
separately and the smallest signed distance wins, so a point buried in one
patch is inside even when another patch's surface is nearer.  Queries are
accelerated by KD-trees over triangle centroids.
"""

from __future__ import annotations

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        def wrap(fn):
            return fn

        return wrap if not (args and callable(args[0])) else args[0]


def closest_point_on_triangles(points, tri_a, tri_b, tri_c):
    """Closest points on triangles for paired (point, triangle) rows.

    Region-based algorithm evaluated branch-free over the whole batch.
    Returns (closest (N,3), barycentric (N,3)).
    """
    a, b, c, p = tri_a, tri_b, tri_c, points
    ab = b - a
    ac = c - a
    ap = p - a

    def dot(x, y):
        return np.einsum("ij,ij->i", x, y)

    def safe_div(num, den):
        return num / np.where(np.abs(den) < 1e-300, 1.0, den)

    d1 = dot(ab, ap)
    d2 = dot(ac, ap)
    bp = p - b
    d3 = dot(ab, bp)
    d4 = dot(ac, bp)
    cp = p - c
    d5 = dot(ab, cp)
    d6 = dot(ac, cp)

    vc = d1 * d4 - d3 * d2
    vb = d5 * d2 - d1 * d6
    va = d3 * d6 - d5 * d4

    v_ab = safe_div(d1, d1 - d3)
    w_ac = safe_div(d2, d2 - d6)
    w_bc = safe_div(d4 - d3, (d4 - d3) + (d5 - d6))
    denom = safe_div(np.ones_like(va), va + vb + vc)
    v_in = vb * denom
    w_in = vc * denom

    n = p.shape[0]
    bary = np.empty((n, 3))
    conds = [
        (d1 <= 0) & (d2 <= 0),                        # vertex a
        (d3 >= 0) & (d4 <= d3),                       # vertex b
        (vc <= 0) & (d1 >= 0) & (d3 <= 0),            # edge ab
        (d6 >= 0) & (d5 <= d6),                       # vertex c
        (vb <= 0) & (d2 >= 0) & (d6 <= 0),            # edge ac
        (va <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0),  # edge bc
    ]
    zeros = np.zeros(n)
    ones = np.ones(n)
    u_choices = [ones, zeros, 1 - v_ab, zeros, 1 - w_ac, zeros]
    v_choices = [zeros, ones, v_ab, zeros, zeros, 1 - w_bc]
    w_choices = [zeros, zeros, zeros, ones, w_ac, w_bc]
    bary[:, 0] = np.select(conds, u_choices, default=1 - v_in - w_in)
    bary[:, 1] = np.select(conds, v_choices, default=v_in)
    bary[:, 2] = np.select(conds, w_choices, default=w_in)

    closest = bary[:, :1] * a + bary[:, 1:2] * b + bary[:, 2:] * c
    return closest, bary


@njit(cache=True, nogil=True, inline="always")
def _closest_point_scalar(
    ax, ay, az, bx, by, bz, cx, cy, cz, px, py, pz
):
    """Ericson-style closest point on one triangle, fully scalarized.

    Returns (x, y, z, u, v, w): the closest point and its barycentrics.
    """
    abx, aby, abz = bx - ax, by - ay, bz - az
    acx, acy, acz = cx - ax, cy - ay, cz - az
    apx, apy, apz = px - ax, py - ay, pz - az
    d1 = abx * apx + aby * apy + abz * apz
    d2 = acx * apx + acy * apy + acz * apz
    if d1 <= 0.0 and d2 <= 0.0:
        return ax, ay, az, 1.0, 0.0, 0.0
    bpx, bpy, bpz = px - bx, py - by, pz - bz
    d3 = abx * bpx + aby * bpy + abz * bpz
    d4 = acx * bpx + acy * bpy + acz * bpz
    if d3 >= 0.0 and d4 <= d3:
        return bx, by, bz, 0.0, 1.0, 0.0
    vc = d1 * d4 - d3 * d2
    if vc <= 0.0 and d1 >= 0.0 and d3 <= 0.0:
        v = d1 / (d1 - d3)
        return ax + v * abx, ay + v * aby, az + v * abz, 1.0 - v, v, 0.0
    cpx, cpy, cpz = px - cx, py - cy, pz - cz
    d5 = abx * cpx + aby * cpy + abz * cpz
    d6 = acx * cpx + acy * cpy + acz * cpz
    if d6 >= 0.0 and d5 <= d6:
        return cx, cy, cz, 0.0, 0.0, 1.0
    vb = d5 * d2 - d1 * d6
    if vb <= 0.0 and d2 >= 0.0 and d6 <= 0.0:
        w = d2 / (d2 - d6)
        return ax + w * acx, ay + w * acy, az + w * acz, 1.0 - w, 0.0, w
    va = d3 * d6 - d5 * d4
    if va <= 0.0 and (d4 - d3) >= 0.0 and (d5 - d6) >= 0.0:
        w = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        return (
            bx + w * (cx - bx),
            by + w * (cy - by),
            bz + w * (cz - bz),
            0.0,
            1.0 - w,
            w,
        )
    denom = 1.0 / (va + vb + vc)
    v = vb * denom
    w = vc * denom
    return (
        ax + v * abx + w * acx,
        ay + v * aby + w * acy,
        az + v * abz + w * acz,
        1.0 - v - w,
        v,
        w,
    )


@njit(cache=True, nogil=True)
def _query_kernel(
    points,
    candidates,
    vertices,
    faces,
    face_normals,
    edge_normals,
    face_edges,
    vertex_normals,
    tol,
):
    q = points.shape[0]
    k = candidates.shape[1]
    sd = np.empty(q)
    closest = np.empty((q, 3))
    normals = np.empty((q, 3))
    for i in range(q):
        px, py, pz = points[i, 0], points[i, 1], points[i, 2]
        best_d2 = np.inf
        best_face = -1
        bu = bv = bw = 0.0
        bx = by = bz = 0.0
        for j in range(k):
            f = candidates[i, j]
            ia, ib, ic = faces[f, 0], faces[f, 1], faces[f, 2]
            x, y, z, u, v, w = _closest_point_scalar(
                vertices[ia, 0], vertices[ia, 1], vertices[ia, 2],
                vertices[ib, 0], vertices[ib, 1], vertices[ib, 2],
                vertices[ic, 0], vertices[ic, 1], vertices[ic, 2],
                px, py, pz,
            )
            dx, dy, dz = px - x, py - y, pz - z
            d2 = dx * dx + dy * dy + dz * dz
            if d2 < best_d2:
                best_d2 = d2
                best_face = f
                bu, bv, bw = u, v, w
                bx, by, bz = x, y, z
        # feature pseudo-normal
        n_small = 0
        if bu <= tol:
            n_small += 1
        if bv <= tol:
            n_small += 1
        if bw <= tol:
            n_small += 1
        if n_small == 0:
            nx = face_normals[best_face, 0]
            ny = face_normals[best_face, 1]
            nz = face_normals[best_face, 2]
        elif n_small == 1:
            if bu <= tol:
                slot = 2
            elif bv <= tol:
                slot = 1
            else:
                slot = 0
            e = face_edges[best_face, slot]
            nx, ny, nz = edge_normals[e, 0], edge_normals[e, 1], edge_normals[e, 2]
        else:
            if bu >= bv and bu >= bw:
                corner = 0
            elif bv >= bw:
                corner = 1
            else:
                corner = 2
            vid = faces[best_face, corner]
            nx = vertex_normals[vid, 0]
            ny = vertex_normals[vid, 1]
            nz = vertex_normals[vid, 2]
        dist = np.sqrt(best_d2)
        dot = (px - bx) * nx + (py - by) * ny + (pz - bz) * nz
        sd[i] = -dist if dot < 0.0 else dist
        closest[i, 0] = bx
        closest[i, 1] = by
        closest[i, 2] = bz
        normals[i, 0] = nx
        normals[i, 1] = ny
        normals[i, 2] = nz
    return sd, closest, normals


@njit(cache=True, nogil=True)
def _union_kernel(
    points,
    candidates,
    cand_count,
    vertices,
    faces,
    face_normals,
    face_edge_normals,
    face_corner_normals,
    face_patch,
    n_patches,
    tol,
):
    """Signed union distance over cached candidate faces.

    Per point, the nearest feature of each represented patch is found
    among the candidates; patch signed distances are then min-combined.
    """
    q = points.shape[0]
    sd_out = np.empty(q)
    closest_out = np.empty((q, 3))
    normals_out = np.empty((q, 3))
    best_d2 = np.empty(n_patches)
    best_face = np.empty(n_patches, dtype=np.int64)
    best_bary = np.empty((n_patches, 3))
    best_pt = np.empty((n_patches, 3))
    for i in range(q):
        px, py, pz = points[i, 0], points[i, 1], points[i, 2]
        for p in range(n_patches):
            best_d2[p] = np.inf
            best_face[p] = -1
        for j in range(cand_count[i]):
            f = candidates[i, j]
            ia, ib, ic = faces[f, 0], faces[f, 1], faces[f, 2]
            x, y, z, u, v, w = _closest_point_scalar(
                vertices[ia, 0], vertices[ia, 1], vertices[ia, 2],
                vertices[ib, 0], vertices[ib, 1], vertices[ib, 2],
                vertices[ic, 0], vertices[ic, 1], vertices[ic, 2],
                px, py, pz,
            )
            dx, dy, dz = px - x, py - y, pz - z
            d2 = dx * dx + dy * dy + dz * dz
            p = face_patch[f]
            if d2 < best_d2[p]:
                best_d2[p] = d2
                best_face[p] = f
                best_bary[p, 0] = u
                best_bary[p, 1] = v
                best_bary[p, 2] = w
                best_pt[p, 0] = x
                best_pt[p, 1] = y
                best_pt[p, 2] = z
        sd_min = np.inf
        for p in range(n_patches):
            f = best_face[p]
            if f < 0:
                continue
            bu, bv, bw = best_bary[p, 0], best_bary[p, 1], best_bary[p, 2]
            n_small = 0
            if bu <= tol:
                n_small += 1
            if bv <= tol:
                n_small += 1
            if bw <= tol:
                n_small += 1
            if n_small == 0:
                nx = face_normals[f, 0]
                ny = face_normals[f, 1]
                nz = face_normals[f, 2]
            elif n_small == 1:
                if bu <= tol:
                    slot = 2
                elif bv <= tol:
                    slot = 1
                else:
                    slot = 0
                nx = face_edge_normals[f, slot, 0]
                ny = face_edge_normals[f, slot, 1]
                nz = face_edge_normals[f, slot, 2]
            else:
                if bu >= bv and bu >= bw:
                    corner = 0
                elif bv >= bw:
                    corner = 1
                else:
                    corner = 2
                nx = face_corner_normals[f, corner, 0]
                ny = face_corner_normals[f, corner, 1]
                nz = face_corner_normals[f, corner, 2]
            bx, by, bz = best_pt[p, 0], best_pt[p, 1], best_pt[p, 2]
            dist = np.sqrt(best_d2[p])
            dot = (px - bx) * nx + (py - by) * ny + (pz - bz) * nz
            s = -dist if dot < 0.0 else dist
            if s < sd_min:
                sd_min = s
                sd_out[i] = s
                closest_out[i, 0] = bx
                closest_out[i, 1] = by
                closest_out[i, 2] = bz
                normals_out[i, 0] = nx
                normals_out[i, 1] = ny
                normals_out[i, 2] = nz
    return sd_out, closest_out, normals_out


def _face_normals(vertices, faces):
    tri = vertices[faces]
    n = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    length = np.linalg.norm(n, axis=1, keepdims=True)
    return n / np.maximum(length, 1e-300)


def face_edge_components(faces):
    """Label faces by edge-adjacency connected component."""
    f = np.asarray(faces, dtype=np.int64)
    pairs = np.sort(
        np.concatenate([f[:, [0, 1]], f[:, [0, 2]], f[:, [1, 2]]]), axis=1
    )
    _, inverse = np.unique(pairs, axis=0, return_inverse=True)
    face_ids = np.tile(np.arange(len(f)), 3)
    order = np.argsort(inverse, kind="stable")
    inv_sorted = inverse[order]
    fid_sorted = face_ids[order]
    # connect consecutive faces sharing each edge
    same = inv_sorted[1:] == inv_sorted[:-1]
    rows = fid_sorted[:-1][same]
    cols = fid_sorted[1:][same]
    adj = coo_matrix(
        (np.ones(len(rows)), (rows, cols)), shape=(len(f), len(f))
    )
    n_comp, labels = connected_components(adj, directed=False)
    return n_comp, labels


class _Patch:
    """Nearest-feature queries against one closed mesh patch."""

    FEATURE_TOL = 1e-9

    def __init__(self, vertices, faces):
        self.vertices = vertices
        self.faces = faces
        self.face_normals = _face_normals(vertices, faces)

        tri = vertices[faces]
        self.centroids = tri.mean(axis=1)
        self.tri_radius = np.linalg.norm(
            tri - self.centroids[:, None, :], axis=2
        ).max(axis=1)
        self.max_radius = float(self.tri_radius.max())
        self.tree = cKDTree(self.centroids)
        self.vertex_normals = self._angle_weighted_vertex_normals()
        self._build_edges()

    def _angle_weighted_vertex_normals(self):
        normals = np.zeros_like(self.vertices)
        tri = self.vertices[self.faces]
        for corner in range(3):
            e1 = tri[:, (corner + 1) % 3] - tri[:, corner]
            e2 = tri[:, (corner + 2) % 3] - tri[:, corner]
            cosang = np.einsum("ij,ij->i", e1, e2) / np.maximum(
                np.linalg.norm(e1, axis=1) * np.linalg.norm(e2, axis=1), 1e-300
            )
            ang = np.arccos(np.clip(cosang, -1.0, 1.0))
            np.add.at(
                normals, self.faces[:, corner], ang[:, None] * self.face_normals
            )
        length = np.linalg.norm(normals, axis=1, keepdims=True)
        return normals / np.maximum(length, 1e-300)

    def _build_edges(self):
        f = self.faces
        pairs = np.concatenate([f[:, [0, 1]], f[:, [0, 2]], f[:, [1, 2]]])
        pairs_sorted = np.sort(pairs, axis=1)
        uniq, inverse = np.unique(pairs_sorted, axis=0, return_inverse=True)
        edge_normals = np.zeros((uniq.shape[0], 3))
        np.add.at(edge_normals, inverse, np.tile(self.face_normals, (3, 1)))
        length = np.linalg.norm(edge_normals, axis=1, keepdims=True)
        self.edge_normals = edge_normals / np.maximum(length, 1e-300)
        # (F, 3) edge ids per face in bary order [ab, ac, bc]
        self.face_edges = np.ascontiguousarray(
            inverse.reshape(3, -1).T.astype(np.int64)
        )

    def _exact_nearest(self, points, k):
        q = points.shape[0]
        k = min(k, len(self.centroids))
        cdist, idx = self.tree.query(points, k=k)
        if k == 1:
            cdist, idx = cdist[:, None], idx[:, None]
        flat_faces = self.faces[idx.ravel()]
        rep = np.repeat(points, k, axis=0)
        closest, bary = closest_point_on_triangles(
            rep,
            self.vertices[flat_faces[:, 0]],
            self.vertices[flat_faces[:, 1]],
            self.vertices[flat_faces[:, 2]],
        )
        d2 = np.einsum("ij,ij->i", rep - closest, rep - closest).reshape(q, k)
        pick = np.argmin(d2, axis=1)
        rows = np.arange(q)
        dist = np.sqrt(d2[rows, pick])
        # true nearest is certainly among candidates once the farthest
        # candidate centroid lies beyond dist + max triangle radius
        certified = (cdist[:, -1] >= dist + self.max_radius) | (
            k == len(self.centroids)
        )
        flat_pick = rows * k + pick
        return idx[rows, pick], closest[flat_pick], bary[flat_pick], dist, certified

    def nearest(self, points, k):
        if HAVE_NUMBA:
            return self._nearest_fast(points, k)
        return self._nearest_numpy(points, k)

    def _nearest_fast(self, points, k):
        q = points.shape[0]
        sd = np.zeros(q)
        closest = np.zeros((q, 3))
        normals = np.zeros((q, 3))
        pending = np.arange(q)
        kk = k
        n_faces = len(self.centroids)
        while pending.size:
            kq = min(kk, n_faces)
            cdist, idx = self.tree.query(points[pending], k=kq)
            if kq == 1:
                cdist, idx = cdist[:, None], idx[:, None]
            s, cl, nr = _query_kernel(
                points[pending],
                np.ascontiguousarray(idx.astype(np.int64)),
                self.vertices,
                self.faces,
                self.face_normals,
                self.edge_normals,
                self.face_edges,
                self.vertex_normals,
                self.FEATURE_TOL,
            )
            ok = (cdist[:, -1] >= np.abs(s) + self.max_radius) | (kq == n_faces)
            done = pending[ok]
            sd[done] = s[ok]
            closest[done] = cl[ok]
            normals[done] = nr[ok]
            pending = pending[~ok]
            kk *= 2
        return sd, closest, normals

    def _nearest_numpy(self, points, k):
        q = points.shape[0]
        face_ids = np.zeros(q, dtype=np.int64)
        best_closest = np.zeros((q, 3))
        best_bary = np.zeros((q, 3))
        dist = np.zeros(q)
        pending = np.arange(q)
        kk = k
        while pending.size:
            f, cl, ba, di, ok = self._exact_nearest(points[pending], kk)
            done = pending[ok]
            face_ids[done] = f[ok]
            best_closest[done] = cl[ok]
            best_bary[done] = ba[ok]
            dist[done] = di[ok]
            pending = pending[~ok]
            kk *= 2

        normals = self._feature_normals(face_ids, best_bary)
        signs = np.where(
            np.einsum("ij,ij->i", points - best_closest, normals) < 0.0, -1.0, 1.0
        )
        return signs * dist, best_closest, normals

    def _feature_normals(self, face_ids, bary):
        small = bary <= self.FEATURE_TOL
        n_small = small.sum(axis=1)
        normals = self.face_normals[face_ids].copy()

        edge_rows = np.nonzero(n_small == 1)[0]
        if edge_rows.size:
            local = np.argmax(small[edge_rows], axis=1)
            # u=0 -> edge bc (slot 2), v=0 -> ac (1), w=0 -> ab (0)
            normals[edge_rows] = self.edge_normals[
                self.face_edges[face_ids[edge_rows], 2 - local]
            ]

        vert_rows = np.nonzero(n_small >= 2)[0]
        if vert_rows.size:
            corner = np.argmax(bary[vert_rows], axis=1)
            vids = self.faces[face_ids[vert_rows], corner]
            normals[vert_rows] = self.vertex_normals[vids]
        return normals


class MeshDistance:
    """Signed-distance queries against one fixed triangle mesh."""

    def __init__(self, vertices, faces):
        self.vertices = np.asarray(vertices, dtype=np.float64)
        self.faces = np.asarray(faces, dtype=np.int64)
        n_comp, labels = face_edge_components(self.faces)
        self.face_patch = labels.astype(np.int64)
        self.patches = []
        self.patch_face_ids = []
        self.boxes = []
        F = self.faces.shape[0]
        self.face_normals = np.zeros((F, 3))
        self.face_edge_normals = np.zeros((F, 3, 3))
        self.face_corner_normals = np.zeros((F, 3, 3))
        for c in range(n_comp):
            ids = np.nonzero(labels == c)[0]
            patch = _Patch(self.vertices, self.faces[ids])
            self.patches.append(patch)
            self.patch_face_ids.append(ids)
            used = self.vertices[np.unique(patch.faces)]
            self.boxes.append((used.min(axis=0), used.max(axis=0)))
            # scatter patch feature normals into global per-face tables
            self.face_normals[ids] = patch.face_normals
            self.face_edge_normals[ids] = patch.edge_normals[patch.face_edges]
            self.face_corner_normals[ids] = patch.vertex_normals[patch.faces]

    def tracker(self, refresh_k=24, slack=0.004):
        return CollisionTracker(self, refresh_k=refresh_k, slack=slack)

    def _patch_masks(self, points):
        """Which patches must be evaluated exactly for which points.

        A patch matters when the point may lie inside it (inside its AABB)
        or when it may hold the smallest positive distance (centroid-based
        lower bound does not exceed the best upper bound).
        """
        n_patch = len(self.patches)
        lo = np.empty((n_patch, points.shape[0]))
        hi = np.empty_like(lo)
        in_box = np.empty((n_patch, points.shape[0]), dtype=bool)
        for c, patch in enumerate(self.patches):
            d_cent = patch.tree.query(points, k=1)[0]
            lo[c] = d_cent - patch.max_radius
            hi[c] = d_cent + patch.max_radius
            bmin, bmax = self.boxes[c]
            in_box[c] = np.all((points >= bmin) & (points <= bmax), axis=1)
        best_hi = hi.min(axis=0)
        return in_box | (lo <= best_hi + 1e-12)

    def nearest(self, points, k=12):
        """Union nearest-surface query.

        Returns (signed_distance, closest_points, normals); distances are
        positive outside every closed patch, negative inside any of them.
        """
        points = np.asarray(points, dtype=np.float64)
        q = points.shape[0]
        if q == 0:
            return np.zeros(0), np.zeros((0, 3)), np.zeros((0, 3))
        if len(self.patches) == 1:
            return self.patches[0].nearest(points, k)

        masks = self._patch_masks(points)
        sd = np.full(q, np.inf)
        closest = np.zeros((q, 3))
        normals = np.zeros((q, 3))
        for c, patch in enumerate(self.patches):
            rows = np.nonzero(masks[c])[0]
            if not rows.size:
                continue
            sd2, closest2, normals2 = patch.nearest(points[rows], k)
            take = sd2 < sd[rows]
            sel = rows[take]
            sd[sel] = sd2[take]
            closest[sel] = closest2[take]
            normals[sel] = normals2[take]
        return sd, closest, normals

    def signed_distance(self, points, k=12):
        return self.nearest(points, k=k)[0]

    def project_outside(self, points, eps, k=12, max_passes=16):
        """Push points to signed distance >= eps along nearest-point normals.

        Points already at >= eps are untouched.  Returns (points, moved
        count).  In overlap regions the nearest patch's offset target can
        sit inside another patch, so targets from every nearby patch are
        tried in order of distance and the first clean one wins.
        """
        out = np.asarray(points, dtype=np.float64).copy()
        q = out.shape[0]
        moved = np.zeros(q, dtype=bool)
        # concave creases eat part of each push, so the push target grows
        # by the remaining deficit every time a point fails again
        target = np.full(q, eps)
        for it in range(max_passes):
            sd, closest, normals = self.nearest(out, k=k)
            inside = sd < eps - 1e-12
            if not np.any(inside):
                break
            rows = np.nonzero(inside)[0]
            if it > 0:
                target[rows] += eps - sd[rows]
            # points already outside move along the exact direction away
            # from their nearest point; buried points use the pseudo-normal
            direction = normals[rows]
            clear = sd[rows] > 1e-9
            direction[clear] = (out[rows][clear] - closest[rows][clear]) / sd[
                rows
            ][clear, None]
            out[rows] = closest[rows] + target[rows, None] * direction
            moved |= inside
            if len(self.patches) > 1:
                self._fix_overlaps(out, rows, eps, k)
        return out, int(moved.sum())

    def _fix_overlaps(self, out, rows, eps, k):
        still = rows[self.signed_distance(out[rows], k=k) < eps - 1e-12]
        if not still.size:
            return
        pts = out[still]
        cand_sd, cand_target = [], []
        for patch in self.patches:
            psd, pclosest, pnormal = patch.nearest(pts, k)
            cand_sd.append(np.abs(psd))
            cand_target.append(pclosest + eps * pnormal)
        cand_sd = np.stack(cand_sd)            # (P, S)
        cand_target = np.stack(cand_target)    # (P, S, 3)
        order = np.argsort(cand_sd, axis=0)
        best = cand_target[order[0], np.arange(len(still))]
        best_score = np.full(len(still), -np.inf)
        for rank in range(len(self.patches)):
            pick = order[rank]
            targets = cand_target[pick, np.arange(len(still))]
            tsd = self.signed_distance(targets, k=k)
            better = tsd > best_score
            best[better] = targets[better]
            best_score[better] = tsd[better]
            if np.all(best_score >= eps - 1e-12):
                break
        out[still] = best


class CollisionTracker:
    """Amortized signed-distance queries for slowly moving point sets.

    Candidate triangles per point are cached and only refreshed for points
    that moved more than `slack` since their last refresh, which makes
    per-iteration collision handling in the relaxation loop cheap.  The
    final authoritative checks should still use MeshDistance directly.
    """

    def __init__(self, dist, refresh_k=24, slack=0.004):
        self.dist = dist
        self.refresh_k = refresh_k
        self.slack = slack
        self.ref_points = None
        self.candidates = None
        self.cand_count = None

    def _refresh(self, points, rows):
        dist = self.dist
        pts = points[rows]
        n_patch = len(dist.patches)
        per_patch, ks = [], []
        lo = np.empty((n_patch, rows.size))
        hi = np.empty_like(lo)
        in_box = np.empty((n_patch, rows.size), dtype=bool)
        for c, patch in enumerate(dist.patches):
            k = min(self.refresh_k, len(patch.centroids))
            cdist, idx = patch.tree.query(pts, k=k)
            if k == 1:
                cdist, idx = cdist[:, None], idx[:, None]
            per_patch.append(idx)
            ks.append(k)
            margin = patch.max_radius + 2 * self.slack
            lo[c] = cdist[:, 0] - margin
            hi[c] = cdist[:, 0] + patch.max_radius
            bmin, bmax = dist.boxes[c]
            in_box[c] = np.all(
                (pts >= bmin - self.slack) & (pts <= bmax + self.slack), axis=1
            )
        # keep a patch when the point may be inside it or it may carry the
        # smallest positive distance within the movement slack
        keep = in_box | (lo <= hi.min(axis=0)[None, :] + 1e-12)

        widths = keep * np.array(ks)[:, None]
        offsets = np.concatenate(
            [np.zeros((1, rows.size), dtype=np.int64), np.cumsum(widths, axis=0)]
        )
        for c, (patch, ids) in enumerate(zip(dist.patches, dist.patch_face_ids)):
            take = keep[c]
            if not np.any(take):
                continue
            cols = offsets[c][take, None] + np.arange(ks[c])[None, :]
            self.candidates[rows[take][:, None], cols] = ids[per_patch[c][take]]
        self.cand_count[rows] = offsets[-1]
        self.ref_points[rows] = pts

    def query(self, points):
        points = np.ascontiguousarray(points, dtype=np.float64)
        q = points.shape[0]
        dist = self.dist
        max_cand = self.refresh_k * len(dist.patches)
        if self.ref_points is None or self.ref_points.shape[0] != q:
            self.ref_points = np.full((q, 3), np.inf)
            self.candidates = np.zeros((q, max_cand), dtype=np.int64)
            self.cand_count = np.zeros(q, dtype=np.int64)
        moved = (
            np.einsum("ij,ij->i", points - self.ref_points, points - self.ref_points)
            > self.slack**2
        )
        rows = np.nonzero(moved)[0]
        if rows.size:
            self.cand_count[rows] = 0
            self._refresh(points, rows)
        return _union_kernel(
            points,
            self.candidates,
            self.cand_count,
            dist.vertices,
            dist.faces,
            dist.face_normals,
            dist.face_edge_normals,
            dist.face_corner_normals,
            dist.face_patch,
            len(dist.patches),
            _Patch.FEATURE_TOL,
        )

    def project_outside(self, points, eps):
        """Inner-loop projection; exact only up to the cached candidates."""
        sd, closest, normals = self.query(points)
        inside = sd < eps - 1e-12
        if not np.any(inside):
            return points, 0
        out = points.copy()
        out[inside] = closest[inside] + eps * normals[inside]
        return out, int(inside.sum())
