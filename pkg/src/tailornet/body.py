"""Parametric body: template + linear shape blendshapes + skeleton + skinning.

The body is a simplified SMPL-style model.  A rest mesh is deformed by
linear blendshapes, a joint regressor places the skeleton on the shaped
mesh, and vertices follow a convex blend of per-joint rigid transforms
(linear blend skinning).  The blend is exactly invertible per vertex,
which is what lets simulated garments be pulled back into the rest pose.

All functions are pure; a BodyModel is immutable after construction and
safe to share across threads.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .containers import read_container, write_container


class ParameterError(ValueError):
    """Bad pose/shape parameters (wrong size or non-finite)."""


class DegenerateSkinningError(RuntimeError):
    """Per-vertex blended transform is numerically singular."""

    def __init__(self, vertex_index, condition):
        super().__init__(
            f"blended skinning matrix at vertex {vertex_index} is degenerate "
            f"(condition number {condition:.3g})"
        )
        self.vertex_index = vertex_index


# condition number beyond this is treated as non-invertible
COND_LIMIT = 1e8

ROOT = -1


@dataclass(frozen=True)
class BodyModel:
    """Template mesh + blendshapes + skeleton + skinning weights.

    pose_basis holds optional pose-corrective blendshape directions.  Two
    feature conventions are accepted, keyed on the leading dimension P:
    P == 3*J uses the raw axis-angle vector, P == 9*(J-1) uses the
    flattened per-joint rotation deviations (R_k - I) for non-root joints.
    The procedural body ships with an empty basis.
    """

    template_vertices: np.ndarray  # (n, 3) meters
    faces: np.ndarray  # (F, 3) int
    shape_basis: np.ndarray  # (B, n, 3)
    pose_basis: np.ndarray  # (P, n, 3), may be empty
    joint_regressor: np.ndarray  # (J, n)
    skinning_weights: np.ndarray  # (n, J) convex rows
    kinematic_tree: np.ndarray  # (J,) parent index, ROOT for the root

    @property
    def n_vertices(self):
        return self.template_vertices.shape[0]

    @property
    def n_joints(self):
        return self.kinematic_tree.shape[0]

    @property
    def n_shapes(self):
        return self.shape_basis.shape[0]

    def validate(self):
        n, J = self.n_vertices, self.n_joints
        if not np.all(np.isfinite(self.template_vertices)):
            raise ValueError("non-finite template vertices")
        if not np.all(np.isfinite(self.shape_basis)):
            raise ValueError("non-finite shape basis")
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= n):
            raise ValueError("face index out of range")
        w = self.skinning_weights
        if w.shape != (n, J):
            raise ValueError(f"weights shape {w.shape} != ({n}, {J})")
        if w.min() < -1e-12:
            raise ValueError("negative skinning weight")
        if np.abs(w.sum(axis=1) - 1.0).max() > 1e-6:
            raise ValueError("skinning weight rows must sum to 1")
        tree = self.kinematic_tree
        if int(np.sum(tree == ROOT)) != 1:
            raise ValueError("kinematic tree needs exactly one root")
        if np.any((tree != ROOT) & ((tree < 0) | (tree >= J))):
            raise ValueError("kinematic tree parent index out of range")
        # acyclicity: walking up from every joint must terminate
        for j in range(J):
            seen, k = set(), j
            while k != ROOT:
                if k in seen:
                    raise ValueError(f"kinematic tree cycle through joint {k}")
                seen.add(k)
                k = int(tree[k])
        return self

    def topo_order(self):
        """Joint order with every parent before its children."""
        tree = self.kinematic_tree
        order, placed = [], set()
        while len(order) < self.n_joints:
            progressed = False
            for j in range(self.n_joints):
                if j in placed:
                    continue
                p = int(tree[j])
                if p == ROOT or p in placed:
                    order.append(j)
                    placed.add(j)
                    progressed = True
            if not progressed:
                raise ValueError("kinematic tree is not a forest")
        return order

    def to_chunks(self):
        return {
            "template": self.template_vertices,
            "faces": self.faces,
            "shape_basis": self.shape_basis,
            "pose_basis": self.pose_basis,
            "joint_regressor": self.joint_regressor,
            "weights": self.skinning_weights,
            "tree": self.kinematic_tree,
        }

    @classmethod
    def from_chunks(cls, chunks):
        weights = np.asarray(chunks["weights"], dtype=np.float64)
        model = cls(
            template_vertices=np.asarray(chunks["template"], dtype=np.float64),
            faces=np.asarray(chunks["faces"], dtype=np.int64),
            shape_basis=np.asarray(chunks["shape_basis"], dtype=np.float64),
            pose_basis=np.asarray(chunks["pose_basis"], dtype=np.float64),
            joint_regressor=np.asarray(chunks["joint_regressor"], dtype=np.float64),
            skinning_weights=_renormalize_rows(weights),
            kinematic_tree=np.asarray(chunks["tree"], dtype=np.int64),
        )
        return model.validate()

    def save(self, path):
        write_container(path, self.to_chunks())

    @classmethod
    def load(cls, path):
        return cls.from_chunks(read_container(path))


@dataclass(frozen=True)
class BodyParams:
    """Shape coefficients beta plus per-joint axis-angle rotations theta."""

    beta: np.ndarray
    theta: np.ndarray

    @classmethod
    def zero(cls, model):
        return cls(np.zeros(model.n_shapes), np.zeros(3 * model.n_joints))

    def check(self, model):
        beta = np.asarray(self.beta, dtype=np.float64).ravel()
        theta = np.asarray(self.theta, dtype=np.float64).ravel()
        if beta.shape[0] != model.n_shapes:
            raise ParameterError(
                f"beta has {beta.shape[0]} entries, model expects {model.n_shapes}"
            )
        if theta.shape[0] != 3 * model.n_joints:
            raise ParameterError(
                f"theta has {theta.shape[0]} entries, expected {3 * model.n_joints}"
            )
        if not (np.all(np.isfinite(beta)) and np.all(np.isfinite(theta))):
            raise ParameterError("non-finite body parameters")
        return beta, theta


@dataclass(frozen=True)
class PartTransforms:
    """World-space rigid transform per joint, as homogeneous 4x4 matrices."""

    matrices: np.ndarray  # (J, 4, 4)
    joints: np.ndarray  # (J, 3) shaped rest-pose joint positions

    def validate(self):
        rot = self.matrices[:, :3, :3]
        if np.abs(np.linalg.det(rot) - 1.0).max() > 1e-6:
            raise ValueError("part transform rotation is not special orthogonal")
        return self


def rodrigues(axis_angle):
    """Axis-angle vectors (..., 3) -> rotation matrices (..., 3, 3)."""
    aa = np.asarray(axis_angle, dtype=np.float64)
    flat = aa.reshape(-1, 3)
    angle = np.linalg.norm(flat, axis=1)
    out = np.tile(np.eye(3), (flat.shape[0], 1, 1))
    nz = angle > 1e-12
    if np.any(nz):
        axis = flat[nz] / angle[nz, None]
        x, y, z = axis[:, 0], axis[:, 1], axis[:, 2]
        zero = np.zeros_like(x)
        K = np.stack(
            [zero, -z, y, z, zero, -x, -y, x, zero], axis=1
        ).reshape(-1, 3, 3)
        s = np.sin(angle[nz])[:, None, None]
        c = np.cos(angle[nz])[:, None, None]
        out[nz] = np.eye(3) + s * K + (1.0 - c) * (K @ K)
    return out.reshape(aa.shape[:-1] + (3, 3))


def shaped_rest_vertices(model, beta):
    """Template plus the beta-weighted shape blendshapes (no pose term)."""
    return model.template_vertices + np.tensordot(beta, model.shape_basis, axes=1)


def _pose_feature(model, theta):
    P = model.pose_basis.shape[0]
    J = model.n_joints
    if P == 0:
        return None
    if P == 3 * J:
        return theta
    if P == 9 * (J - 1):
        rots = rodrigues(theta.reshape(J, 3)[1:])
        return (rots - np.eye(3)).reshape(-1)
    raise ParameterError(
        f"pose basis with {P} directions matches neither 3*J nor 9*(J-1)"
    )


def unposed_shape(model, params):
    """Rest-pose vertices for (beta, theta): template + shape + pose correctives."""
    beta, theta = params.check(model)
    verts = shaped_rest_vertices(model, beta)
    feat = _pose_feature(model, theta)
    if feat is not None:
        verts = verts + np.tensordot(feat, model.pose_basis, axes=1)
    return verts


def part_transforms(model, params):
    """Forward kinematics: world transform per joint for the given pose.

    Joint positions come from the joint regressor applied to the shaped
    (beta-only) rest mesh.  Each returned matrix maps rest-pose coordinates
    to posed coordinates, so a zero pose yields identities.
    """
    beta, theta = params.check(model)
    joints = model.joint_regressor @ shaped_rest_vertices(model, beta)
    rots = rodrigues(theta.reshape(model.n_joints, 3))
    tree = model.kinematic_tree

    world = np.zeros((model.n_joints, 4, 4))
    for j in model.topo_order():
        local = np.eye(4)
        local[:3, :3] = rots[j]
        parent = int(tree[j])
        if parent == ROOT:
            local[:3, 3] = joints[j]
            world[j] = local
        else:
            local[:3, 3] = joints[j] - joints[parent]
            world[j] = world[parent] @ local

    # subtract the rest-pose joint location so H_k is identity at zero pose
    H = world.copy()
    H[:, :3, 3] -= np.einsum("jab,jb->ja", world[:, :3, :3], joints)
    return PartTransforms(matrices=H, joints=joints)


def blend_matrices(weights, transforms):
    """Per-vertex 4x4 blend of part transforms for the given weight rows."""
    return np.einsum("nj,jab->nab", weights, transforms.matrices)


def _apply_affine(M, points):
    return np.einsum("nab,nb->na", M[:, :3, :3], points) + M[:, :3, 3]


def skin(model, params, unposed, weights=None):
    """Pose rest-space vertices by blended part transforms (Eq. of LBS)."""
    unposed = np.asarray(unposed, dtype=np.float64)
    w = model.skinning_weights if weights is None else weights
    if unposed.shape != (w.shape[0], 3):
        raise ParameterError(
            f"unposed vertices have shape {unposed.shape}, expected ({w.shape[0]}, 3)"
        )
    M = blend_matrices(w, part_transforms(model, params))
    return _apply_affine(M, unposed)


def unskin(model, params, posed, weights=None):
    """Exact inverse of `skin`: recover rest-space vertices from posed ones."""
    posed = np.asarray(posed, dtype=np.float64)
    w = model.skinning_weights if weights is None else weights
    if posed.shape != (w.shape[0], 3):
        raise ParameterError(
            f"posed vertices have shape {posed.shape}, expected ({w.shape[0]}, 3)"
        )
    M = blend_matrices(w, part_transforms(model, params))
    linear = M[:, :3, :3]
    cond = np.linalg.cond(linear)
    bad = np.nonzero(~(cond < COND_LIMIT))[0]
    if bad.size:
        raise DegenerateSkinningError(int(bad[0]), float(cond[bad[0]]))
    return np.linalg.solve(linear, (posed - M[:, :3, 3])[..., None])[..., 0]


# ---------------------------------------------------------------------------
# procedural capsule humanoid
# ---------------------------------------------------------------------------

JOINT_NAMES = [
    "pelvis", "spine", "neck", "head",
    "l_shoulder", "l_elbow", "r_shoulder", "r_elbow",
    "l_hip", "l_knee", "r_hip", "r_knee",
]

_PARENTS = np.array([ROOT, 0, 1, 2, 1, 4, 1, 6, 0, 8, 0, 10])

_JOINTS = np.array([
    [0.00, 0.95, 0.0],   # pelvis
    [0.00, 1.30, 0.0],   # spine/chest
    [0.00, 1.46, 0.0],   # neck
    [0.00, 1.55, 0.0],   # head
    [0.18, 1.42, 0.0],   # l_shoulder
    [0.42, 1.42, 0.0],   # l_elbow
    [-0.18, 1.42, 0.0],  # r_shoulder
    [-0.42, 1.42, 0.0],  # r_elbow
    [0.09, 0.90, 0.0],   # l_hip
    [0.09, 0.52, 0.0],   # l_knee
    [-0.09, 0.90, 0.0],  # r_hip
    [-0.09, 0.52, 0.0],  # r_knee
])

# skinning bone segments: joint -> functional end point
_BONE_ENDS = np.array([
    [0.00, 1.30, 0.0],   # pelvis -> spine
    [0.00, 1.46, 0.0],   # spine -> neck
    [0.00, 1.55, 0.0],   # neck -> head
    [0.00, 1.66, 0.0],   # head -> crown
    [0.42, 1.42, 0.0],   # l_shoulder -> elbow
    [0.66, 1.42, 0.0],   # l_elbow -> wrist
    [-0.42, 1.42, 0.0],
    [-0.66, 1.42, 0.0],
    [0.09, 0.52, 0.0],   # l_hip -> knee
    [0.09, 0.14, 0.0],   # l_knee -> ankle
    [-0.09, 0.52, 0.0],
    [-0.09, 0.14, 0.0],
])

# limb capsules whose union isosurface is the body skin
_CAPSULES = [
    ([0.00, 0.84, 0.0], [0.00, 1.44, 0.0], 0.160),  # torso
    ([0.00, 1.50, 0.0], [0.00, 1.64, 0.0], 0.095),  # head
    ([0.17, 1.42, 0.0], [0.64, 1.42, 0.0], 0.065),  # arms
    ([-0.17, 1.42, 0.0], [-0.64, 1.42, 0.0], 0.065),
    ([0.09, 0.90, 0.0], [0.09, 0.14, 0.0], 0.077),  # legs
    ([-0.09, 0.90, 0.0], [-0.09, 0.14, 0.0], 0.077),
]

_GRID_LO = np.array([-0.78, 0.0, -0.28])
_GRID_HI = np.array([0.78, 1.82, 0.28])
_BASE_CELL = 0.064


def _capsule_union_sdf(points):
    """Signed distance to the capsule union and its (outward) gradient."""
    best = np.full(points.shape[0], np.inf)
    grad = np.zeros_like(points)
    for p0, p1, r in _CAPSULES:
        p0 = np.asarray(p0, dtype=np.float64)
        p1 = np.asarray(p1, dtype=np.float64)
        ab = p1 - p0
        t = np.clip(((points - p0) @ ab) / (ab @ ab), 0.0, 1.0)
        offset = points - (p0 + t[:, None] * ab)
        dist = np.linalg.norm(offset, axis=1)
        sd = dist - r
        take = sd < best
        best[take] = sd[take]
        grad[take] = offset[take] / np.maximum(dist[take, None], 1e-12)
    return best, grad


def make_procedural_body(resolution, seed):
    """Deterministic capsule-limb humanoid standing in T-pose.

    The skin is the zero isosurface of a capsule-union distance field
    (torso, head, two arms, two legs) extracted by marching cubes, so the
    mesh is one closed, consistently oriented, edge-connected surface.
    Resolution 0 gives roughly 600 vertices; each level quadruples the
    count.  Two shape blendshapes: overall girth (along the surface
    normal) and torso length (vertical stretch above the hips).
    """
    if resolution < 0:
        raise ValueError("resolution must be >= 0")
    from skimage import measure

    rng = np.random.default_rng(seed)
    cell = _BASE_CELL / (2**resolution)
    shape = np.ceil((_GRID_HI - _GRID_LO) / cell).astype(int) + 1
    axes = [_GRID_LO[i] + np.arange(shape[i]) * cell for i in range(3)]
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    values = _capsule_union_sdf(grid.reshape(-1, 3))[0].reshape(grid.shape[:3])
    verts, faces, _, _ = measure.marching_cubes(
        values, level=0.0, spacing=(cell, cell, cell)
    )
    vertices = verts + _GRID_LO
    faces = np.asarray(faces, dtype=np.int64)

    _, normals = _capsule_union_sdf(vertices)

    # small jitter along the normal so the surface is not perfectly
    # regular; round to float32 so the in-memory model matches its
    # container serialization
    jitter = rng.uniform(-0.0003, 0.0003, size=(vertices.shape[0], 1))
    vertices = _f32(vertices + jitter * normals)

    girth = 0.02 * normals
    lift = np.clip((vertices[:, 1] - 0.95) / (1.42 - 0.95), 0.0, 1.0)
    torso_len = np.zeros_like(vertices)
    torso_len[:, 1] = 0.06 * lift
    shape_basis = _f32(np.stack([girth, torso_len]))

    # joint regressor: uniform weights over the nearest shell of vertices
    J = _JOINTS.shape[0]
    regressor = np.zeros((J, vertices.shape[0]))
    k_near = 8 * 4**resolution
    for j in range(J):
        nearest = np.argsort(np.linalg.norm(vertices - _JOINTS[j], axis=1))[:k_near]
        regressor[j, nearest] = 1.0 / k_near

    model = BodyModel(
        template_vertices=vertices,
        faces=faces,
        shape_basis=shape_basis,
        pose_basis=np.zeros((0, vertices.shape[0], 3)),
        joint_regressor=_f32(regressor),
        skinning_weights=_renormalize_rows(_f32(_distance_weights(vertices))),
        kinematic_tree=_PARENTS.copy(),
    )
    return model.validate()


def _f32(x):
    return np.asarray(x).astype(np.float32).astype(np.float64)


def _renormalize_rows(w):
    return w / w.sum(axis=1, keepdims=True)


def _segment_distance(points, a, b):
    ab = b - a
    denom = float(ab @ ab)
    t = np.clip(((points - a) @ ab) / max(denom, 1e-12), 0.0, 1.0)
    closest = a + t[:, None] * ab
    return np.linalg.norm(points - closest, axis=1)


def _distance_weights(vertices, sigma=0.06, keep=4):
    """Smooth bone-distance skinning weights, top-`keep` joints per vertex."""
    J = _JOINTS.shape[0]
    dist = np.stack(
        [_segment_distance(vertices, _JOINTS[j], _BONE_ENDS[j]) for j in range(J)],
        axis=1,
    )
    raw = np.exp(-((dist / sigma) ** 2))
    # keep the nearest joints only so blends stay local
    order = np.argsort(-raw, axis=1)
    mask = np.zeros_like(raw, dtype=bool)
    rows = np.arange(vertices.shape[0])[:, None]
    mask[rows, order[:, :keep]] = True
    raw = np.where(mask, raw, 0.0)
    # guard: a vertex far from every bone still needs a valid row
    best = order[:, 0]
    empty = raw.sum(axis=1) < 1e-300
    raw[empty, best[empty]] = 1.0
    return raw / raw.sum(axis=1, keepdims=True)
