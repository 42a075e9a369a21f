"""Per-part bounding boxes, cameras, ray generation, and ray culling.

Boxes are axis-aligned in canonical space and carried into observation
space rigidly (the driving joint's transform composed with the part
centroid's blend-shape translation); extents never change.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import DataFormatError

DEFAULT_BOX_MARGIN = 0.05


@dataclass
class PartBoxSet:
    b_min: np.ndarray              # (P, 3) canonical
    b_max: np.ndarray              # (P, 3)
    margin: float
    posed: np.ndarray = field(default=None)  # (P, 4, 4) rigid, or None

    def __post_init__(self):
        if np.any(self.b_min >= self.b_max):
            raise ValueError("boxes must have positive extent on every axis")

    @property
    def num_parts(self):
        return len(self.b_min)

    def centers(self):
        return 0.5 * (self.b_min + self.b_max)

    def extents(self):
        return self.b_max - self.b_min


@dataclass
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray     # (3, 3) camera-to-world
    translation: np.ndarray  # (3,) camera center in world, meters
    width: int
    height: int

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.translation = np.asarray(self.translation, dtype=np.float64)
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not np.allclose(self.rotation @ self.rotation.T, np.eye(3), atol=1e-6):
            raise ValueError("camera rotation must be orthonormal")


@dataclass
class RayBundle:
    """One ray per pixel in row-major order (struct of arrays)."""

    origin: np.ndarray   # (3,) shared camera center
    dirs: np.ndarray     # (R, 3) unit directions
    pixels: np.ndarray   # (R, 2) (row, col)
    t_near: np.ndarray   # (R,)
    t_far: np.ndarray    # (R,)
    hit: np.ndarray      # (R,) bool

    def __len__(self):
        return len(self.dirs)


def canonical_part_boxes(model, margin=DEFAULT_BOX_MARGIN):
    """Axis-aligned min/max per part over its template vertices + margin."""
    if margin < 0:
        raise ValueError("margin must be >= 0")
    parts = model.num_parts
    b_min = np.empty((parts, 3))
    b_max = np.empty((parts, 3))
    for p in range(parts):
        verts = model.vertices[model.vertex_part == p]
        if len(verts) == 0:
            raise DataFormatError(f"part {p} owns no vertices")
        b_min[p] = verts.min(axis=0) - margin
        b_max[p] = verts.max(axis=0) + margin
    return PartBoxSet(b_min=b_min, b_max=b_max, margin=float(margin))


def pose_boxes(boxes, posed, model):
    """Fill the posed rigid transform per box: G_{part joint} composed with
    the blend-shape translation of the part centroid."""
    if boxes.num_parts != model.num_parts:
        raise ValueError("box count does not match model part count")
    transforms = np.empty((boxes.num_parts, 4, 4))
    for p in range(boxes.num_parts):
        joint_tf = posed.joint_transforms[model.part_joint[p]]
        centroid_offset = posed.blend_offsets[model.vertex_part == p].mean(axis=0)
        shift = np.eye(4)
        shift[:3, 3] = centroid_offset
        transforms[p] = joint_tf @ shift
    return PartBoxSet(
        b_min=boxes.b_min.copy(),
        b_max=boxes.b_max.copy(),
        margin=boxes.margin,
        posed=transforms,
    )


def generate_rays(cam):
    """Pinhole rays through pixel centers, camera-to-world, unit length."""
    if cam.width <= 0 or cam.height <= 0:
        raise ValueError("image must have positive size")
    cols, rows = np.meshgrid(np.arange(cam.width), np.arange(cam.height))
    x = (cols + 0.5 - cam.cx) / cam.fx
    y = (rows + 0.5 - cam.cy) / cam.fy
    dirs_cam = np.stack([x, y, np.ones_like(x)], axis=-1).reshape(-1, 3)
    dirs = dirs_cam @ cam.rotation.T
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    pixels = np.stack([rows.ravel(), cols.ravel()], axis=1)
    n = len(dirs)
    return RayBundle(
        origin=cam.translation.copy(),
        dirs=dirs,
        pixels=pixels,
        t_near=np.zeros(n),
        t_far=np.zeros(n),
        hit=np.zeros(n, dtype=bool),
    )


def ray_obb_intersect(origin, direction, box_transform, b_min, b_max):
    """Slab test of one ray against one oriented box.

    Returns (t_enter, t_exit) or None; t_enter is clamped to 0 when the
    origin is inside, and intersections entirely behind the origin miss.
    """
    rot = box_transform[:3, :3]
    trans = box_transform[:3, 3]
    o = rot.T @ (np.asarray(origin, dtype=np.float64) - trans)
    d = rot.T @ np.asarray(direction, dtype=np.float64)
    t_enter, t_exit = -np.inf, np.inf
    for a in range(3):
        if abs(d[a]) < 1e-12:
            if o[a] < b_min[a] or o[a] > b_max[a]:
                return None
            continue
        t0 = (b_min[a] - o[a]) / d[a]
        t1 = (b_max[a] - o[a]) / d[a]
        if t0 > t1:
            t0, t1 = t1, t0
        t_enter = max(t_enter, t0)
        t_exit = min(t_exit, t1)
    if t_enter > t_exit or t_exit <= 0.0:
        return None
    return max(t_enter, 0.0), t_exit


def filter_rays(rays, boxes):
    """Mark rays intersecting any posed box; merge [t_near, t_far] over all
    intersected boxes (min entry, max exit). Vectorized over rays."""
    if boxes.posed is None:
        raise ValueError("boxes must be posed before ray filtering")
    n = len(rays)
    t_near = np.full(n, np.inf)
    t_far = np.full(n, -np.inf)
    hit = np.zeros(n, dtype=bool)
    for p in range(boxes.num_parts):
        rot = boxes.posed[p, :3, :3]
        trans = boxes.posed[p, :3, 3]
        o = rot.T @ (rays.origin - trans)
        d = rays.dirs @ rot
        lo, hi = boxes.b_min[p], boxes.b_max[p]
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / d
            t0 = (lo[None, :] - o[None, :]) * inv
            t1 = (hi[None, :] - o[None, :]) * inv
        near_axis = np.minimum(t0, t1)
        far_axis = np.maximum(t0, t1)
        # parallel-axis handling: inside -> unbounded slab, outside -> miss
        parallel = np.abs(d) < 1e-12
        inside = (o >= lo) & (o <= hi)
        near_axis = np.where(parallel, np.where(inside, -np.inf, np.inf), near_axis)
        far_axis = np.where(parallel, np.where(inside, np.inf, -np.inf), far_axis)
        enter = near_axis.max(axis=1)
        leave = far_axis.min(axis=1)
        ok = (enter <= leave) & (leave > 0.0)
        enter = np.maximum(enter, 0.0)
        t_near[ok] = np.minimum(t_near[ok], enter[ok])
        t_far[ok] = np.maximum(t_far[ok], leave[ok])
        hit |= ok
    t_near[~hit] = 0.0
    t_far[~hit] = 0.0
    return RayBundle(
        origin=rays.origin.copy(),
        dirs=rays.dirs,
        pixels=rays.pixels,
        t_near=t_near,
        t_far=t_far,
        hit=hit,
    )


def frontal_camera(model, width, height, distance=2.4, fill=0.9):
    """Portrait camera on the +z axis looking back at the body, framed so
    the body height covers `fill` of the image height."""
    y_lo = model.vertices[:, 1].min()
    y_hi = model.vertices[:, 1].max()
    mid = 0.5 * (y_lo + y_hi)
    half = max(0.5 * (y_hi - y_lo), 1e-3)
    f = fill * (height / 2.0) * distance / half
    rot = np.array([[-1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, -1.0]])
    return Camera(
        fx=f,
        fy=f,
        cx=width / 2.0,
        cy=height / 2.0,
        rotation=rot,
        translation=np.array([0.0, mid, distance]),
        width=width,
        height=height,
    )


_CORNER_BITS = np.array(
    [[i, j, k] for i in (0, 1) for j in (0, 1) for k in (0, 1)], dtype=np.int64
)

_BOX_TRIS = np.array([
    [0, 1, 3], [0, 3, 2],  # x = min face
    [4, 6, 7], [4, 7, 5],  # x = max
    [0, 4, 5], [0, 5, 1],  # y = min
    [2, 3, 7], [2, 7, 6],  # y = max
    [0, 2, 6], [0, 6, 4],  # z = min
    [1, 5, 7], [1, 7, 3],  # z = max
], dtype=np.int64)


def box_corners(b_min, b_max, transform=None):
    """8 corners in canonical bit order (x-major, then y, then z)."""
    lo = np.asarray(b_min, dtype=np.float64)
    hi = np.asarray(b_max, dtype=np.float64)
    corners = np.where(_CORNER_BITS.astype(bool), hi[None, :], lo[None, :])
    if transform is not None:
        corners = corners @ transform[:3, :3].T + transform[:3, 3]
    return corners


def boxes_to_mesh(boxes):
    """All posed (or canonical) boxes as one triangle soup for OBJ export."""
    verts, faces = [], []
    for p in range(boxes.num_parts):
        tf = boxes.posed[p] if boxes.posed is not None else np.eye(4)
        verts.append(box_corners(boxes.b_min[p], boxes.b_max[p], tf))
        faces.append(_BOX_TRIS + 8 * p)
    return np.concatenate(verts), np.concatenate(faces)
