"""Procedural articulated body: template mesh, skeleton, blend shapes, LBS.

The toy humanoid is license-free: 16 capsule-sampled parts on a 24-joint
SMPL-like tree, 1.70 m tall, y-up, facing +z. Parts are built pairwise
disjoint (tangent at the joints) so that signed distance to the closest
triangle is an exact signed distance for the whole multi-component mesh.
"""

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import DataFormatError
from .formats import atomic_write_text, canonical_json_dumps

ROOT_SENTINEL = -1
INVERSE_DISTANCE_EPS = 1e-8

JOINT_NAMES = [
    "pelvis", "l_hip", "r_hip", "spine1", "l_knee", "r_knee", "spine2",
    "l_ankle", "r_ankle", "spine3", "l_foot", "r_foot", "neck", "l_collar",
    "r_collar", "head", "l_shoulder", "r_shoulder", "l_elbow", "r_elbow",
    "l_wrist", "r_wrist", "l_hand", "r_hand",
]

_JOINT_POS = np.array([
    [0.0, 0.95, 0.0],      # pelvis
    [+0.09, 0.90, 0.0],    # l_hip
    [-0.09, 0.90, 0.0],    # r_hip
    [0.0, 1.06, 0.0],      # spine1
    [+0.10, 0.47, 0.0],    # l_knee
    [-0.10, 0.47, 0.0],    # r_knee
    [0.0, 1.18, 0.0],      # spine2
    [+0.105, 0.08, 0.0],   # l_ankle
    [-0.105, 0.08, 0.0],   # r_ankle
    [0.0, 1.28, 0.0],      # spine3
    [+0.105, 0.03, 0.10],  # l_foot
    [-0.105, 0.03, 0.10],  # r_foot
    [0.0, 1.42, 0.0],      # neck
    [+0.06, 1.36, 0.0],    # l_collar
    [-0.06, 1.36, 0.0],    # r_collar
    [0.0, 1.50, 0.0],      # head
    [+0.18, 1.40, 0.0],    # l_shoulder
    [-0.18, 1.40, 0.0],    # r_shoulder
    [+0.46, 1.40, 0.0],    # l_elbow
    [-0.46, 1.40, 0.0],    # r_elbow
    [+0.72, 1.40, 0.0],    # l_wrist
    [-0.72, 1.40, 0.0],    # r_wrist
    [+0.80, 1.40, 0.0],    # l_hand
    [-0.80, 1.40, 0.0],    # r_hand
])

_JOINT_PARENTS = np.array(
    [-1, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 9, 9, 12, 13, 14, 16, 17,
     18, 19, 20, 21]
)

# (name, driving joint, solid-span endpoints, radius). Spans are the full
# extent of the capsule solid; the mesh axis is shrunk by the radius at
# both ends. Spans are chosen so no two solids overlap.
_PART_CAPSULES = [
    ("pelvis", 0, (0.0, 0.83, 0.0), (0.0, 1.05, 0.0), 0.100),
    ("torso", 6, (0.0, 1.05, 0.0), (0.0, 1.39, 0.0), 0.120),
    ("neck", 12, (0.0, 1.395, 0.0), (0.0, 1.475, 0.0), 0.038),
    ("head", 15, (0.0, 1.475, 0.0), (0.0, 1.70, 0.0), 0.085),
    ("l_upper_arm", 16, (0.13, 1.40, 0.0), (0.46, 1.40, 0.0), 0.048),
    ("r_upper_arm", 17, (-0.13, 1.40, 0.0), (-0.46, 1.40, 0.0), 0.048),
    ("l_forearm", 18, (0.47, 1.40, 0.0), (0.715, 1.40, 0.0), 0.042),
    ("r_forearm", 19, (-0.47, 1.40, 0.0), (-0.715, 1.40, 0.0), 0.042),
    ("l_hand", 20, (0.725, 1.40, 0.0), (0.86, 1.40, 0.0), 0.035),
    ("r_hand", 21, (-0.725, 1.40, 0.0), (-0.86, 1.40, 0.0), 0.035),
    ("l_thigh", 1, (0.095, 0.825, 0.0), (0.095, 0.485, 0.0), 0.065),
    ("r_thigh", 2, (-0.095, 0.825, 0.0), (-0.095, 0.485, 0.0), 0.065),
    ("l_calf", 4, (0.10, 0.475, 0.0), (0.10, 0.085, 0.0), 0.050),
    ("r_calf", 5, (-0.10, 0.475, 0.0), (-0.10, 0.085, 0.0), 0.050),
    ("l_foot", 7, (0.105, 0.035, 0.0), (0.105, 0.035, 0.18), 0.035),
    ("r_foot", 8, (-0.105, 0.035, 0.0), (-0.105, 0.035, 0.18), 0.035),
]


@dataclass
class BodyModel:
    vertices: np.ndarray      # (V, 3) canonical rest pose, meters
    faces: np.ndarray         # (F, 3) int
    joints: np.ndarray        # (K, 3) rest joint locations
    parents: np.ndarray       # (K,) int, parents[0] == ROOT_SENTINEL
    skin_weights: np.ndarray  # (V, K) dense, rows sum to 1
    shape_basis: np.ndarray   # (V, S, 3)
    pose_basis: np.ndarray    # (V, P, 3); P in {0, 9*(K-1)}
    vertex_part: np.ndarray   # (V,) int in [0, num_parts)
    part_joint: np.ndarray    # (num_parts,) driving joint per part

    @property
    def num_joints(self):
        return len(self.joints)

    @property
    def num_parts(self):
        return len(self.part_joint)

    @property
    def height(self):
        return float(self.vertices[:, 1].max() - self.vertices[:, 1].min())


@dataclass
class Pose:
    axis_angle: np.ndarray          # (K, 3)
    global_translation: np.ndarray  # (3,)

    def __post_init__(self):
        self.axis_angle = np.asarray(self.axis_angle, dtype=np.float64)
        self.global_translation = np.asarray(
            self.global_translation, dtype=np.float64
        )
        norms = np.linalg.norm(self.axis_angle, axis=1)
        if np.any(norms >= np.pi):
            raise ValueError("axis-angle norms must be < pi")

    @staticmethod
    def rest(num_joints):
        return Pose(np.zeros((num_joints, 3)), np.zeros(3))


@dataclass
class Shape:
    coefficients: np.ndarray

    def __post_init__(self):
        self.coefficients = np.asarray(self.coefficients, dtype=np.float64)

    @staticmethod
    def neutral(width=2):
        return Shape(np.zeros(width))


class UniformGrid:
    """Uniform-cell accelerator for exact k-nearest-neighbor queries."""

    def __init__(self, points, cell_size=None):
        self.points = np.asarray(points, dtype=np.float64)
        if len(self.points) == 0:
            raise ValueError("cannot index zero points")
        lo = self.points.min(axis=0)
        hi = self.points.max(axis=0)
        if cell_size is None:
            vol = float(np.prod(np.maximum(hi - lo, 1e-3)))
            cell_size = max((vol / len(self.points)) ** (1.0 / 3.0), 1e-4)
        self.cell = float(cell_size)
        self.origin = lo
        idx = np.floor((self.points - lo) / self.cell).astype(np.int64)
        self.dims = idx.max(axis=0) + 1
        self.cells = {}
        for i, key in enumerate(map(tuple, idx)):
            self.cells.setdefault(key, []).append(i)
        self.max_ring = int(self.dims.max()) + 1

    def _ring_candidates(self, center, ring):
        found = []
        lo = center - ring
        hi = center + ring
        for cx in range(lo[0], hi[0] + 1):
            for cy in range(lo[1], hi[1] + 1):
                for cz in range(lo[2], hi[2] + 1):
                    # only the shell; inner cells were already visited
                    if ring > 0 and (
                        abs(cx - center[0]) != ring
                        and abs(cy - center[1]) != ring
                        and abs(cz - center[2]) != ring
                    ):
                        continue
                    found.extend(self.cells.get((cx, cy, cz), ()))
        return found

    def query_knn(self, point, k):
        """Exact kNN; ties with the k-th distance are all included."""
        point = np.asarray(point, dtype=np.float64)
        center = np.floor((point - self.origin) / self.cell).astype(np.int64)
        candidates = []
        for ring in range(self.max_ring + 1):
            candidates.extend(self._ring_candidates(center, ring))
            if len(candidates) >= k:
                cand = np.asarray(candidates)
                d = np.linalg.norm(self.points[cand] - point, axis=1)
                kth = np.partition(d, k - 1)[k - 1]
                # all points within ring*cell of the query are guaranteed
                # to have been visited already
                if kth < ring * self.cell:
                    keep = d <= kth
                    return cand[keep], d[keep]
        d = np.linalg.norm(self.points - point, axis=1)
        kth = np.partition(d, min(k, len(d)) - 1)[min(k, len(d)) - 1]
        keep = d <= kth
        return np.nonzero(keep)[0], d[keep]


@dataclass
class PosedBody:
    model: BodyModel
    posed_vertices: np.ndarray      # (V, 3)
    joint_transforms: np.ndarray    # (K, 4, 4) rest-relative rigid
    vertex_transforms: np.ndarray   # (V, 4, 4) Eq-style per-vertex affine
    blend_offsets: np.ndarray       # (V, 3) shape + pose corrective offsets
    spatial_index: UniformGrid = field(repr=False, default=None)
    _inverse_transforms: np.ndarray = field(repr=False, default=None)
    _vertex_tree: object = field(repr=False, default=None)

    @property
    def inverse_transforms(self):
        if self._inverse_transforms is None:
            self._inverse_transforms = np.linalg.inv(self.vertex_transforms)
        return self._inverse_transforms

    @property
    def vertex_tree(self):
        if self._vertex_tree is None:
            self._vertex_tree = cKDTree(self.posed_vertices)
        return self._vertex_tree


def rodrigues(axis_angle):
    """Axis-angle (3,) to rotation matrix (3, 3)."""
    axis_angle = np.asarray(axis_angle, dtype=np.float64)
    theta = np.linalg.norm(axis_angle)
    if theta < 1e-12:
        return np.eye(3)
    axis = axis_angle / theta
    kx, ky, kz = axis
    cross = np.array([[0.0, -kz, ky], [kz, 0.0, -kx], [-ky, kx, 0.0]])
    return np.eye(3) + np.sin(theta) * cross + (1.0 - np.cos(theta)) * (cross @ cross)


def forward_kinematics(model, pose):
    """Rest-relative rigid transform per joint, (K, 4, 4).

    At zero pose and translation every returned transform is the identity,
    i.e. it fixes all rest geometry in place.
    """
    if len(pose.axis_angle) != model.num_joints:
        raise ValueError("pose joint count does not match model")
    k = model.num_joints
    world = np.zeros((k, 4, 4))
    for j in range(k):
        rot = rodrigues(pose.axis_angle[j])
        local = np.eye(4)
        local[:3, :3] = rot
        parent = model.parents[j]
        if parent == ROOT_SENTINEL:
            local[:3, 3] = model.joints[j] + pose.global_translation
            world[j] = local
        else:
            local[:3, 3] = model.joints[j] - model.joints[parent]
            world[j] = world[parent] @ local
    rel = world.copy()
    # shift so transforms act on canonical coordinates (G_k J_k -> posed J_k)
    rel[:, :3, 3] -= np.einsum("kab,kb->ka", world[:, :3, :3], model.joints)
    return rel


def pose_feature(pose):
    """Flattened (R_j - I) for joints 1..K-1; drives pose correctives."""
    mats = [rodrigues(aa) - np.eye(3) for aa in pose.axis_angle[1:]]
    return np.concatenate([m.ravel() for m in mats]) if mats else np.zeros(0)


def blend_offsets(model, shape, pose):
    if len(shape.coefficients) != model.shape_basis.shape[1]:
        raise ValueError("shape coefficient count does not match basis")
    offsets = np.einsum("vsd,s->vd", model.shape_basis, shape.coefficients)
    if model.pose_basis.shape[1] > 0:
        offsets = offsets + np.einsum(
            "vpd,p->vd", model.pose_basis, pose_feature(pose)
        )
    return offsets


def deform(model, shape, pose):
    """Pose + shape the template; returns a PosedBody with the per-vertex
    canonical->observation transforms and a spatial index over the result."""
    joint_tf = forward_kinematics(model, pose)
    offsets = blend_offsets(model, shape, pose)
    blended = np.einsum("vk,kab->vab", model.skin_weights, joint_tf)
    vertex_tf = blended.copy()
    vertex_tf[:, :3, 3] += np.einsum("vab,vb->va", blended[:, :3, :3], offsets)
    posed = (
        np.einsum("vab,vb->va", vertex_tf[:, :3, :3], model.vertices)
        + vertex_tf[:, :3, 3]
    )
    return PosedBody(
        model=model,
        posed_vertices=posed,
        joint_transforms=joint_tf,
        vertex_transforms=vertex_tf,
        blend_offsets=offsets,
        spatial_index=UniformGrid(posed),
    )


def inverse_lbs(body, point, k_neighbors=4):
    """Map one observation-space point back to canonical space.

    Inverse-distance weights over the k nearest posed vertices (distance
    clamped at 1e-8 m); exact ties with the k-th neighbor all participate.
    """
    if k_neighbors < 1:
        raise ValueError("k_neighbors must be >= 1")
    if len(body.posed_vertices) == 0:
        raise ValueError("posed body has no vertices")
    point = np.asarray(point, dtype=np.float64)
    idx, dist = body.spatial_index.query_knn(point, k_neighbors)
    w = 1.0 / np.maximum(dist, INVERSE_DISTANCE_EPS)
    w /= w.sum()
    inv = body.inverse_transforms[idx]
    mapped = np.einsum("jab,b->ja", inv[:, :3, :3], point) + inv[:, :3, 3]
    return w @ mapped


def _canonicalize_dense(body, points, k):
    """Reference inverse LBS: full distance matrix, ties included."""
    verts = body.posed_vertices
    inv = body.inverse_transforms
    diff = points[:, None, :] - verts[None, :, :]
    d = np.sqrt(np.einsum("pvd,pvd->pv", diff, diff))
    kth = np.partition(d, k - 1, axis=1)[:, k - 1]
    mask = d <= kth[:, None]
    w = np.where(mask, 1.0 / np.maximum(d, INVERSE_DISTANCE_EPS), 0.0)
    w /= w.sum(axis=1, keepdims=True)
    tf = np.einsum("pv,vab->pab", w, inv)
    return np.einsum("pab,pb->pa", tf[:, :3, :3], points) + tf[:, :3, 3]


def canonicalize_points(body, points, k_neighbors=4, chunk=65536):
    """Vectorized inverse LBS for (P, 3) points; same results as
    inverse_lbs. KD-tree nearest neighbors; rows with an exact distance tie
    at the k-th rank fall back to the dense all-ties path."""
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    verts = body.posed_vertices
    k = min(k_neighbors, len(verts))
    inv = body.inverse_transforms
    tree = body.vertex_tree
    out = np.empty_like(points)
    kq = min(k + 1, len(verts))
    for start in range(0, len(points), chunk):
        block = points[start:start + chunk]
        _, idx = tree.query(block, k=kq)
        idx = idx.reshape(len(block), kq)
        cand = verts[idx]
        d = np.linalg.norm(block[:, None, :] - cand, axis=2)
        order = np.argsort(d, axis=1, kind="stable")
        d = np.take_along_axis(d, order, axis=1)
        idx = np.take_along_axis(idx, order, axis=1)
        if kq > k:
            tie = d[:, k] == d[:, k - 1]
            d, idx = d[:, :k], idx[:, :k]
        else:
            tie = np.zeros(len(block), dtype=bool)
        w = 1.0 / np.maximum(d, INVERSE_DISTANCE_EPS)
        w /= w.sum(axis=1, keepdims=True)
        tf = np.einsum("pk,pkab->pab", w, inv[idx])
        block_out = np.einsum("pab,pb->pa", tf[:, :3, :3], block) + tf[:, :3, 3]
        if tie.any():
            block_out[tie] = _canonicalize_dense(body, block[tie], k)
        out[start:start + chunk] = block_out
    return out


def _orthonormal_frame(axis):
    helper = np.array([1.0, 0.0, 0.0])
    if abs(axis @ helper) > 0.9:
        helper = np.array([0.0, 1.0, 0.0])
    u = np.cross(axis, helper)
    u /= np.linalg.norm(u)
    v = np.cross(axis, u)
    return u, v


def _capsule_mesh(p0, p1, radius, segments, n_rings, phase):
    """Closed, edge-manifold capsule around the solid span p0..p1.

    The axis is shrunk by the radius at both ends so the solid stays
    inside the span. Returns (vertices, faces).
    """
    p0 = np.asarray(p0, dtype=np.float64)
    p1 = np.asarray(p1, dtype=np.float64)
    span = p1 - p0
    length = np.linalg.norm(span)
    axis = span / length
    a0 = p0 + axis * radius
    a1 = p1 - axis * radius
    u, v = _orthonormal_frame(axis)

    cap_rings = max(1, int(round(n_rings * 0.4)))
    cyl_rings = max(0, n_rings - 2 * cap_rings)

    ring_specs = []  # (center, ring_radius, axial_offset)
    for i in range(1, cap_rings + 1):
        lat = (np.pi / 2.0) * i / cap_rings
        ring_specs.append((a0, radius * np.sin(lat), -radius * np.cos(lat)))
    for i in range(1, cyl_rings + 1):
        t = i / (cyl_rings + 1)
        ring_specs.append((a0 + (a1 - a0) * t, radius, 0.0))
    for i in range(cap_rings, 0, -1):
        lat = (np.pi / 2.0) * i / cap_rings
        ring_specs.append((a1, radius * np.sin(lat), radius * np.cos(lat)))

    angles = phase + 2.0 * np.pi * np.arange(segments) / segments
    circle = np.outer(np.cos(angles), u) + np.outer(np.sin(angles), v)

    verts = [a0 - axis * radius]
    for center, ring_r, axial in ring_specs:
        verts.extend(center + ring_r * circle + axial * axis)
    verts.append(a1 + axis * radius)
    verts = np.asarray(verts)

    faces = []
    n_ring = len(ring_specs)
    ring_start = lambda r: 1 + r * segments
    for s in range(segments):
        faces.append([0, ring_start(0) + (s + 1) % segments, ring_start(0) + s])
    for r in range(n_ring - 1):
        for s in range(segments):
            a = ring_start(r) + s
            b = ring_start(r) + (s + 1) % segments
            c = ring_start(r + 1) + s
            d = ring_start(r + 1) + (s + 1) % segments
            faces.append([a, b, d])
            faces.append([a, d, c])
    top = len(verts) - 1
    for s in range(segments):
        faces.append([top, ring_start(n_ring - 1) + s,
                      ring_start(n_ring - 1) + (s + 1) % segments])
    return verts, np.asarray(faces, dtype=np.int64)


def _joint_depth(parents, j):
    depth = 0
    while parents[j] != ROOT_SENTINEL:
        j = parents[j]
        depth += 1
    return depth


def _limb_parent_blend(u):
    # 50/50 with the parent joint at the proximal end, fading out by u=0.25
    return 0.5 * np.clip(1.0 - u / 0.25, 0.0, 1.0)


def _part_weights(name, joint, p0, p1, verts, parents):
    """Per-vertex skinning weights for one capsule part, rows sum to 1."""
    n = len(verts)
    y = verts[:, 1]
    w = np.zeros((n, len(_JOINT_PARENTS)))
    if name == "pelvis":
        w3 = 0.5 * np.clip((y - 0.99) / 0.06, 0.0, 1.0)
        w[:, 3] = w3
        w[:, 0] = 1.0 - w3
    elif name == "torso":
        w0 = 0.5 * np.clip((1.11 - y) / 0.06, 0.0, 1.0)
        t_lo = np.clip((y - 1.06) / 0.12, 0.0, 1.0)
        t_hi = np.clip((y - 1.18) / 0.10, 0.0, 1.0)
        spine = np.zeros((n, 3))
        spine[:, 0] = (1.0 - t_lo)
        spine[:, 1] = t_lo * (1.0 - t_hi)
        spine[:, 2] = t_lo * t_hi
        w[:, 0] = w0
        w[:, [3, 6, 9]] = spine * (1.0 - w0)[:, None]
    elif name == "neck":
        w9 = 0.5 * np.clip((1.43 - y) / 0.035, 0.0, 1.0)
        w[:, 9] = w9
        w[:, 12] = 1.0 - w9
    elif name == "head":
        w12 = 0.5 * np.clip((1.52 - y) / 0.045, 0.0, 1.0)
        w[:, 12] = w12
        w[:, 15] = 1.0 - w12
    else:
        p0 = np.asarray(p0, dtype=np.float64)
        p1 = np.asarray(p1, dtype=np.float64)
        axis = (p1 - p0) / np.linalg.norm(p1 - p0)
        u = np.clip((verts - p0) @ axis / np.linalg.norm(p1 - p0), 0.0, 1.0)
        wp = _limb_parent_blend(u)
        w[:, parents[joint]] = wp
        w[:, joint] = 1.0 - wp
    return w


def make_toy_body(part_count, verts_per_part, seed):
    """Deterministic 1.70 m capsule humanoid.

    part_count in {2..16} groups the 16 canonical capsules into contiguous
    part labels; verts_per_part is a per-capsule vertex target (small
    values are rounded up to the minimum closed capsule mesh).
    """
    if not 2 <= part_count <= 16:
        raise ValueError("part_count must be in {2..16}")
    if verts_per_part < 8:
        raise ValueError("verts_per_part must be >= 8")
    rng = np.random.default_rng(seed)

    base_segments = 4 if verts_per_part < 26 else (8 if verts_per_part < 80 else 12)

    groups = np.array_split(np.arange(len(_PART_CAPSULES)), part_count)
    capsule_group = np.zeros(len(_PART_CAPSULES), dtype=np.int64)
    for g, members in enumerate(groups):
        capsule_group[members] = g

    all_verts, all_faces, all_weights, all_labels = [], [], [], []
    offset = 0
    n_rings = max(3, int(round((verts_per_part - 2) / base_segments)))
    for ci, (name, joint, p0, p1, radius) in enumerate(_PART_CAPSULES):
        # fat capsules get more segments so facet size stays comparable
        segments = base_segments + (base_segments // 2 if radius >= 0.09 else 0)
        phase = rng.uniform(0.0, 2.0 * np.pi / segments)
        verts, faces = _capsule_mesh(p0, p1, radius, segments, n_rings, phase)
        all_verts.append(verts)
        all_faces.append(faces + offset)
        all_weights.append(_part_weights(name, joint, p0, p1, verts, _JOINT_PARENTS))
        all_labels.append(np.full(len(verts), capsule_group[ci], dtype=np.int64))
        offset += len(verts)

    vertices = np.concatenate(all_verts)
    part_joint = np.zeros(part_count, dtype=np.int64)
    for g, members in enumerate(groups):
        joints = [_PART_CAPSULES[m][1] for m in members]
        part_joint[g] = min(joints, key=lambda j: (_joint_depth(_JOINT_PARENTS, j), j))

    shape_basis = np.zeros((len(vertices), 2, 3))
    shape_basis[:, 0, 1] = 0.06 * vertices[:, 1]          # height direction
    shape_basis[:, 1, 0] = 0.05 * vertices[:, 0]          # girth direction
    shape_basis[:, 1, 2] = 0.05 * vertices[:, 2]

    return BodyModel(
        vertices=vertices,
        faces=np.concatenate(all_faces),
        joints=_JOINT_POS.copy(),
        parents=_JOINT_PARENTS.copy(),
        skin_weights=np.concatenate(all_weights),
        shape_basis=shape_basis,
        pose_basis=np.zeros((len(vertices), 0, 3)),
        vertex_part=np.concatenate(all_labels),
        part_joint=part_joint,
    )


def validate_body(model):
    """Raise DataFormatError if any structural invariant is violated."""
    v, k = len(model.vertices), model.num_joints
    if model.parents[0] != ROOT_SENTINEL:
        raise DataFormatError("joint 0 must be the root")
    if np.any(model.parents[1:] >= np.arange(1, k)) or np.any(model.parents[1:] < 0):
        raise DataFormatError("parents must form a tree in topological order")
    if model.skin_weights.shape != (v, k):
        raise DataFormatError("skin weight table shape mismatch")
    if np.any(model.skin_weights < -1e-12):
        raise DataFormatError("negative skinning weight")
    if np.any(np.abs(model.skin_weights.sum(axis=1) - 1.0) > 1e-6):
        raise DataFormatError("skinning weights must sum to 1 per vertex")
    if model.faces.min() < 0 or model.faces.max() >= v:
        raise DataFormatError("face indexes out of range")
    parts = model.num_parts
    present = np.bincount(model.vertex_part, minlength=parts)
    if np.any(present == 0) or model.vertex_part.max() >= parts:
        raise DataFormatError("every part label must own at least one vertex")
    if np.any(model.part_joint < 0) or np.any(model.part_joint >= k):
        raise DataFormatError("part_joint out of range")
    if model.shape_basis.shape[0] != v or model.shape_basis.shape[2] != 3:
        raise DataFormatError("shape basis shape mismatch")
    if model.pose_basis.shape[0] != v or model.pose_basis.shape[2] != 3:
        raise DataFormatError("pose basis shape mismatch")
    if model.pose_basis.shape[1] not in (0, 9 * (k - 1)):
        raise DataFormatError("pose basis width must be 0 or 9*(K-1)")
    edges = {}
    for f in model.faces:
        for a, b in ((f[0], f[1]), (f[1], f[2]), (f[2], f[0])):
            key = (min(a, b), max(a, b))
            edges[key] = edges.get(key, 0) + 1
    if any(c != 2 for c in edges.values()):
        raise DataFormatError("mesh is not edge-manifold/closed")


def body_to_dict(model):
    sparse = []
    for row in model.skin_weights:
        nz = np.nonzero(row > 0.0)[0]
        sparse.append([[int(j), float(row[j])] for j in nz])
    pose_basis = (
        [] if model.pose_basis.shape[1] == 0 else model.pose_basis.tolist()
    )
    return {
        "vertices": model.vertices.tolist(),
        "faces": model.faces.tolist(),
        "joints": model.joints.tolist(),
        "parents": model.parents.tolist(),
        "skin_weights": sparse,
        "shape_basis": model.shape_basis.tolist(),
        "pose_basis": pose_basis,
        "vertex_part": model.vertex_part.tolist(),
        "part_joint": model.part_joint.tolist(),
    }


def body_from_dict(data):
    try:
        vertices = np.asarray(data["vertices"], dtype=np.float64)
        faces = np.asarray(data["faces"], dtype=np.int64)
        joints = np.asarray(data["joints"], dtype=np.float64)
        parents = np.asarray(data["parents"], dtype=np.int64)
        sparse = data["skin_weights"]
        shape_basis = np.asarray(data["shape_basis"], dtype=np.float64)
        raw_pose = data["pose_basis"]
        vertex_part = np.asarray(data["vertex_part"], dtype=np.int64)
        part_joint = np.asarray(data["part_joint"], dtype=np.int64)
    except (KeyError, TypeError, ValueError) as exc:
        raise DataFormatError(f"malformed body model: {exc}") from exc
    v, k = len(vertices), len(joints)
    if len(sparse) != v or len(vertex_part) != v:
        raise DataFormatError("per-vertex array lengths disagree")
    weights = np.zeros((v, k))
    for i, row in enumerate(sparse):
        for j, w in row:
            j = int(j)
            if not 0 <= j < k:
                raise DataFormatError(f"skin weight joint {j} out of range")
            weights[i, j] = float(w)
    if len(raw_pose) == 0:
        pose_basis = np.zeros((v, 0, 3))
    else:
        pose_basis = np.asarray(raw_pose, dtype=np.float64)
    if vertices.ndim != 2 or vertices.shape[1] != 3:
        raise DataFormatError("vertices must be (V, 3)")
    model = BodyModel(
        vertices=vertices,
        faces=faces,
        joints=joints,
        parents=parents,
        skin_weights=weights,
        shape_basis=shape_basis,
        pose_basis=pose_basis,
        vertex_part=vertex_part,
        part_joint=part_joint,
    )
    validate_body(model)
    return model


def save_body_json(model, path):
    atomic_write_text(path, canonical_json_dumps(body_to_dict(model)) + "\n")


def load_body_json(path):
    try:
        with open(path, "r", encoding="utf-8") as fh:
            data = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise DataFormatError(f"cannot read body model {path}: {exc}") from exc
    return body_from_dict(data)
