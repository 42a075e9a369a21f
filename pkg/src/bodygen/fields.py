"""Compositional generator: per-part FiLM-SIREN subnetworks over local
boxes, blended by a smooth window, producing an SDF offset on top of the
template geometry plus view-conditioned color.

Field math (window weight, local normalization, density conversion) is
written generically so the same formulas serve numpy callers and the torch
autograd path.
"""

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
from scipy.spatial import cKDTree

from .geometry import PartBoxSet, canonical_part_boxes

WINDOW_M_DEFAULT = 2.0
WINDOW_N_DEFAULT = 8
ALPHA_INIT_DEFAULT = 0.1
LATENT_DIM_DEFAULT = 256
STYLE_DIM_DEFAULT = 256
FILM_GAMMA_SCALE = 0.25
SIREN_OMEGA = 30.0

# per-part trunk depths for the canonical 16-part split:
# pelvis, torso, neck, head, upper arms, forearms, hands, thighs, calves, feet
_DEPTHS_16 = [6, 6, 4, 8, 4, 4, 4, 4, 3, 3, 4, 4, 4, 4, 3, 3]


def default_part_depths(part_count):
    if part_count == 16:
        return list(_DEPTHS_16)
    return [4] * part_count


def _sigmoid(x):
    if isinstance(x, torch.Tensor):
        return torch.sigmoid(x)
    x = np.asarray(x, dtype=np.float64)
    s = 1.0 / (1.0 + np.exp(-np.abs(x)))
    return np.where(x >= 0.0, s, 1.0 - s)


def normalize_local(x, b_min, b_max):
    """Affine map of a box onto [-1, 1]^3: (2x - (lo + hi)) / (hi - lo)."""
    extent = b_max - b_min
    if isinstance(x, torch.Tensor):
        if bool((extent <= 0).any()):
            raise ValueError("degenerate box")
        return (2.0 * x - (b_min + b_max)) / extent
    extent = np.asarray(extent, dtype=np.float64)
    if np.any(extent <= 0):
        raise ValueError("degenerate box")
    return (2.0 * np.asarray(x, dtype=np.float64) - (b_min + b_max)) / extent


def window_weight(xhat, m=WINDOW_M_DEFAULT, n=WINDOW_N_DEFAULT):
    """exp(-m * (x^n + y^n + z^n)) with even n; 1 at the box center.

    Computed as (x*x)^(n/2) so the even symmetry is exact in floats.
    """
    if n % 2 != 0 or n < 2:
        raise ValueError("window exponent must be even and >= 2")
    if isinstance(xhat, torch.Tensor):
        powered = ((xhat * xhat) ** (n // 2)).sum(-1)
        return torch.exp(-m * powered)
    x = np.asarray(xhat, dtype=np.float64)
    powered = np.sum((x * x) ** (n // 2), axis=-1)
    return np.exp(-m * powered)


def sdf_to_density(d, alpha):
    """sigma = sigmoid(-d / alpha) / alpha; monotone decreasing in d."""
    if isinstance(alpha, torch.Tensor):
        if bool((alpha <= 0).any()):
            raise ValueError("alpha must be positive")
    elif alpha <= 0:
        raise ValueError("alpha must be positive")
    return _sigmoid(-d / alpha) / alpha


# ---------------------------------------------------------------------------
# template signed distance


def _closest_points_candidates(points, a, ab, ac):
    """Vectorized closest point on triangles (Ericson's region test).

    points: (Q, 3); a, ab, ac: (Q, C, 3) per-point candidate triangles.
    Returns (cp (Q, C, 3), feature (Q, C)) with feature codes 0,1,2 =
    vertices a,b,c; 3,4,5 = edges ab,ac,bc; 6 = face interior. The closest
    point is a + v*ab + w*ac with (v, w) selected per Voronoi region.
    """
    ap = points[:, None, :] - a
    bp = ap - ab
    cp_ = ap - ac
    d1 = np.einsum("qtd,qtd->qt", ab, ap)
    d2 = np.einsum("qtd,qtd->qt", ac, ap)
    d3 = np.einsum("qtd,qtd->qt", ab, bp)
    d4 = np.einsum("qtd,qtd->qt", ac, bp)
    d5 = np.einsum("qtd,qtd->qt", ab, cp_)
    d6 = np.einsum("qtd,qtd->qt", ac, cp_)
    vc = d1 * d4 - d3 * d2
    vb = d5 * d2 - d1 * d6
    va = d3 * d6 - d5 * d4

    with np.errstate(divide="ignore", invalid="ignore"):
        v_ab = np.where(d1 != d3, d1 / (d1 - d3), 0.0)
        w_ac = np.where(d2 != d6, d2 / (d2 - d6), 0.0)
        denom_bc = (d4 - d3) + (d5 - d6)
        w_bc = np.where(denom_bc != 0, (d4 - d3) / denom_bc, 0.0)
        denom = np.where(va + vb + vc != 0, va + vb + vc, 1.0)
        v_in = vb / denom
        w_in = vc / denom

    conds = [
        (d1 <= 0) & (d2 <= 0),                       # vertex a
        (d3 >= 0) & (d4 <= d3),                      # vertex b
        (vc <= 0) & (d1 >= 0) & (d3 <= 0),           # edge ab
        (d6 >= 0) & (d5 <= d6),                      # vertex c
        (vb <= 0) & (d2 >= 0) & (d6 <= 0),           # edge ac
        (va <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0), # edge bc
    ]
    zeros = np.zeros_like(d1)
    ones = np.ones_like(d1)
    v = np.select(conds, [zeros, ones, v_ab, zeros, zeros, 1.0 - w_bc], v_in)
    w = np.select(conds, [zeros, zeros, zeros, ones, w_ac, w_bc], w_in)
    feature = np.select(conds, [0, 1, 3, 2, 4, 5], 6).astype(np.int8)
    cp = a + v[..., None] * ab + w[..., None] * ac
    return cp, feature


class TemplateSdf:
    """Signed point-to-mesh distance for the canonical template.

    Sign comes from the angle-weighted pseudonormal of the closest feature,
    so it is exact for the closed toy mesh. An optional trilinear grid cache
    accelerates bulk queries; cached values agree with the exact distance to
    within a grid-cell diagonal.
    """

    def __init__(self, model, grid_resolution=64, use_grid=True):
        self.model = model
        verts = model.vertices
        faces = model.faces
        self.tri = verts[faces]  # (T, 3, 3)
        fn = np.cross(self.tri[:, 1] - self.tri[:, 0], self.tri[:, 2] - self.tri[:, 0])
        norms = np.linalg.norm(fn, axis=1, keepdims=True)
        if np.any(norms < 1e-14):
            raise ValueError("degenerate template triangle")
        self.face_normals = fn / norms

        vertex_normals = np.zeros_like(verts)
        for corner in range(3):
            i = faces[:, corner]
            e1 = self.tri[:, (corner + 1) % 3] - self.tri[:, corner]
            e2 = self.tri[:, (corner + 2) % 3] - self.tri[:, corner]
            cosang = np.einsum("td,td->t", e1, e2) / (
                np.linalg.norm(e1, axis=1) * np.linalg.norm(e2, axis=1)
            )
            angles = np.arccos(np.clip(cosang, -1.0, 1.0))
            np.add.at(vertex_normals, i, angles[:, None] * self.face_normals)
        edge_normals = {}
        for t, f in enumerate(faces):
            for u, v in ((f[0], f[1]), (f[1], f[2]), (f[2], f[0])):
                key = (min(u, v), max(u, v))
                edge_normals[key] = edge_normals.get(key, 0.0) + self.face_normals[t]

        # per-face normal lookup table for the 7 feature codes
        table = np.empty((7, len(faces), 3))
        for corner in range(3):
            table[corner] = vertex_normals[faces[:, corner]]
        for slot, (i, j) in enumerate(((0, 1), (0, 2), (1, 2))):
            table[3 + slot] = [
                edge_normals[(min(f[i], f[j]), max(f[i], f[j]))] for f in faces
            ]
        table[6] = self.face_normals
        self.normal_table = table

        centroids = self.tri.mean(axis=1)
        self._tri_tree = cKDTree(centroids)
        self._tri_radius = float(
            np.linalg.norm(self.tri - centroids[:, None, :], axis=2).max()
        )

        self.grid = None
        if use_grid:
            self._build_grid(grid_resolution)

    def _signed_distance(self, block, tri_idx):
        """Exact signed distance of block points against the listed
        triangles (tri_idx: (Q, C) candidate indices per point)."""
        cand = self.tri[tri_idx]  # (Q, C, 3, 3)
        a, b, c = cand[:, :, 0], cand[:, :, 1], cand[:, :, 2]
        ab = b - a
        ac = c - a
        cp, feature = _closest_points_candidates(block, a, ab, ac)
        diff = block[:, None, :] - cp
        d2 = np.einsum("qtd,qtd->qt", diff, diff)
        best = np.argmin(d2, axis=1)
        rows = np.arange(len(block))
        best_tri = tri_idx[rows, best]
        normal = self.normal_table[feature[rows, best], best_tri]
        offset = block - cp[rows, best]
        sign = np.sign(np.einsum("qd,qd->q", offset, normal))
        sign[sign == 0.0] = 1.0
        return sign * np.sqrt(d2[rows, best]), np.sqrt(d2[rows, best])

    def query_exact(self, points, chunk=4096, candidates=64):
        """Exact signed distance, (Q,).

        Candidate triangles come from a KD tree over triangle centroids.
        Any non-candidate triangle sits at centroid distance >= the k-th
        candidate's, hence at true distance >= that minus the largest
        triangle radius; points where the candidate answer cannot be
        certified this way escalate to more candidates, then to all.
        """
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        t_count = len(self.tri)
        out = np.empty(len(points))
        for start in range(0, len(points), chunk):
            block = points[start:start + chunk]
            pending = np.arange(len(block))
            result = np.empty(len(block))
            for k in (min(candidates, t_count), min(8 * candidates, t_count)):
                cdist, cidx = self._tri_tree.query(block[pending], k=k)
                if k == 1:
                    cdist, cidx = cdist[:, None], cidx[:, None]
                signed, unsigned = self._signed_distance(block[pending], cidx)
                if k == t_count:
                    certified = np.ones(len(pending), dtype=bool)
                else:
                    certified = unsigned <= cdist[:, -1] - self._tri_radius
                result[pending[certified]] = signed[certified]
                pending = pending[~certified]
                if len(pending) == 0:
                    break
            if len(pending):
                idx = np.broadcast_to(
                    np.arange(t_count), (len(pending), t_count)
                )
                signed, _ = self._signed_distance(block[pending], idx)
                result[pending] = signed
            out[start:start + chunk] = result
        return out

    def _build_grid(self, resolution):
        lo = self.model.vertices.min(axis=0)
        hi = self.model.vertices.max(axis=0)
        extent = hi - lo
        cell = float(extent.max()) / max(resolution - 1, 1)
        # cover the part boxes (template bbox + default margin) with slack
        pad = 3.0 * cell + 0.02
        lo = lo - pad
        hi = hi + pad
        dims = np.maximum(np.ceil((hi - lo) / cell).astype(int) + 1, 2)
        axes = [lo[a] + cell * np.arange(dims[a]) for a in range(3)]
        gx, gy, gz = np.meshgrid(*axes, indexing="ij")
        pts = np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)
        values = self.query_exact(pts).reshape(dims)
        self.grid = {
            "origin": lo,
            "cell": cell,
            "dims": dims,
            "values": values,
        }

    def _query_grid(self, points):
        g = self.grid
        rel = (points - g["origin"]) / g["cell"]
        clamped = np.clip(rel, 0.0, g["dims"].astype(np.float64) - 1.0 - 1e-9)
        # points beyond the cache get the clamped value plus the overshoot,
        # an upper-bound-consistent positive distance far from the body
        overshoot = np.linalg.norm((rel - clamped) * g["cell"], axis=1)
        i0 = np.floor(clamped).astype(int)
        frac = clamped - i0
        vals = g["values"]
        acc = np.zeros(len(points))
        for dx in (0, 1):
            wx = frac[:, 0] if dx else 1.0 - frac[:, 0]
            for dy in (0, 1):
                wy = frac[:, 1] if dy else 1.0 - frac[:, 1]
                for dz in (0, 1):
                    wz = frac[:, 2] if dz else 1.0 - frac[:, 2]
                    idx = (
                        np.minimum(i0[:, 0] + dx, g["dims"][0] - 1),
                        np.minimum(i0[:, 1] + dy, g["dims"][1] - 1),
                        np.minimum(i0[:, 2] + dz, g["dims"][2] - 1),
                    )
                    acc += wx * wy * wz * vals[idx]
        return acc + overshoot

    def query(self, points, exact=False):
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        if exact or self.grid is None:
            return self.query_exact(points)
        return self._query_grid(points)


class ZeroTemplate:
    """Template stub with d_T = 0 everywhere (for synthetic field tests)."""

    def query(self, points, exact=False):
        return np.zeros(len(np.atleast_2d(points)))


def load_or_build_template(model, grid_resolution=64, cache_dir=None):
    """TemplateSdf whose grid is loaded from (or saved to) a cache keyed by
    the mesh content and resolution. Grids are deterministic, so cached and
    fresh builds are interchangeable."""
    if cache_dir is None:
        return TemplateSdf(model, grid_resolution=grid_resolution)
    import hashlib
    import os

    os.makedirs(cache_dir, exist_ok=True)
    key = hashlib.sha1(
        b"grid-v1"
        + model.vertices.tobytes()
        + model.faces.tobytes()
        + str(grid_resolution).encode()
    ).hexdigest()[:20]
    path = os.path.join(cache_dir, f"template_{key}.npz")
    sdf = TemplateSdf(model, use_grid=False)
    if os.path.exists(path):
        data = np.load(path)
        sdf.grid = {
            "origin": data["origin"],
            "cell": float(data["cell"]),
            "dims": data["dims"],
            "values": data["values"],
        }
    else:
        sdf._build_grid(grid_resolution)
        tmp = path + ".tmp.npz"
        np.savez_compressed(
            tmp,
            origin=sdf.grid["origin"],
            cell=sdf.grid["cell"],
            dims=sdf.grid["dims"],
            values=sdf.grid["values"],
        )
        os.replace(tmp, path)
    return sdf


# ---------------------------------------------------------------------------
# generator network


@dataclass
class FieldSamples:
    """Batched field evaluation at canonical points."""

    color: torch.Tensor        # (N, 3) in [0, 1]
    sdf: torch.Tensor          # (N,) template + offset
    density: torch.Tensor      # (N,) >= 0, zero outside all boxes
    delta: torch.Tensor        # (N,) blended SDF offset
    inside: torch.Tensor       # (N,) bool, inside at least one box
    grad_delta: torch.Tensor = None  # (N, 3) d(delta)/dx when requested


class PartNet(nn.Module):
    """One local subnetwork: FiLM-SIREN trunk from the normalized position,
    an SDF-offset head, and a view-conditioned color head."""

    def __init__(self, depth, hidden, view_dim=3):
        super().__init__()
        dims = [3] + [hidden] * depth
        self.trunk = nn.ModuleList(
            nn.Linear(dims[i], dims[i + 1]) for i in range(depth)
        )
        self.delta_head = nn.Linear(hidden, 1)
        self.color_linear = nn.Linear(hidden + view_dim, hidden)
        self.color_out = nn.Linear(hidden, 3)
        self.depth = depth

    @property
    def film_layers(self):
        # one (gamma, phi) pair per trunk layer plus the color layer
        return self.depth + 1

    def forward(self, xhat, dirs, gamma, phi):
        h = xhat
        for i, lin in enumerate(self.trunk):
            h = torch.sin(gamma[i] * lin(h) + phi[i])
        delta = self.delta_head(h).squeeze(-1)
        hc = torch.cat([h, dirs], dim=-1)
        hc = torch.sin(gamma[self.depth] * self.color_linear(hc) + phi[self.depth])
        rgb = torch.sigmoid(self.color_out(hc))
        return rgb, delta


class GeneratorNet(nn.Module):
    def __init__(
        self,
        boxes,
        depths=None,
        hidden=64,
        latent_dim=LATENT_DIM_DEFAULT,
        style_dim=STYLE_DIM_DEFAULT,
        mapping_layers=3,
        window_m=WINDOW_M_DEFAULT,
        window_n=WINDOW_N_DEFAULT,
        alpha_init=ALPHA_INIT_DEFAULT,
        template=None,
        seed=0,
    ):
        super().__init__()
        if alpha_init <= 0:
            raise ValueError("alpha must be positive")
        part_count = boxes.num_parts
        if depths is None:
            depths = default_part_depths(part_count)
        if len(depths) != part_count:
            raise ValueError("need one depth per part")
        self.boxes = boxes
        self.template = template
        self.depths = list(depths)
        self.hidden = hidden
        self.latent_dim = latent_dim
        self.style_dim = style_dim
        self.mapping_layers = mapping_layers
        self.window_m = float(window_m)
        self.window_n = int(window_n)
        self.alpha_init = float(alpha_init)
        self.init_seed = int(seed)

        layers = []
        dims = [latent_dim] + [style_dim] * mapping_layers
        for i in range(mapping_layers):
            layers.append(nn.Linear(dims[i], dims[i + 1]))
            if i + 1 < mapping_layers:
                layers.append(nn.LeakyReLU(0.2))
        self.mapping = nn.Sequential(*layers)

        self.parts = nn.ModuleList(PartNet(d, hidden) for d in depths)
        self.film_heads = nn.ModuleList(
            nn.ModuleList(
                nn.Linear(style_dim, 2 * hidden) for _ in range(part.film_layers)
            )
            for part in self.parts
        )
        self.log_alpha = nn.Parameter(torch.tensor(math.log(alpha_init)))

        self.register_buffer(
            "box_min", torch.from_numpy(boxes.b_min.astype(np.float64)).float()
        )
        self.register_buffer(
            "box_max", torch.from_numpy(boxes.b_max.astype(np.float64)).float()
        )
        self._init_parameters(seed)

    def _init_parameters(self, seed):
        gen = torch.Generator().manual_seed(seed)

        def uniform_(tensor, bound):
            with torch.no_grad():
                tensor.uniform_(-bound, bound, generator=gen)

        for module in self.mapping:
            if isinstance(module, nn.Linear):
                uniform_(module.weight, 1.0 / math.sqrt(module.in_features))
                with torch.no_grad():
                    module.bias.zero_()
        for part in self.parts:
            first = part.trunk[0]
            uniform_(first.weight, SIREN_OMEGA / first.in_features)
            with torch.no_grad():
                first.bias.zero_()
            hidden_layers = list(part.trunk[1:]) + [part.color_linear, part.color_out]
            for lin in hidden_layers:
                uniform_(lin.weight, math.sqrt(6.0 / lin.in_features) / SIREN_OMEGA)
                with torch.no_grad():
                    lin.bias.zero_()
            with torch.no_grad():
                part.delta_head.weight.zero_()
                part.delta_head.bias.zero_()
        for heads in self.film_heads:
            for head in heads:
                with torch.no_grad():
                    head.weight.zero_()
                    head.bias.zero_()

    @property
    def alpha(self):
        return torch.exp(self.log_alpha)

    @property
    def dtype(self):
        return self.log_alpha.dtype

    def config(self):
        return {
            "kind": "generator",
            "part_count": self.boxes.num_parts,
            "depths": self.depths,
            "hidden": self.hidden,
            "latent_dim": self.latent_dim,
            "style_dim": self.style_dim,
            "mapping_layers": self.mapping_layers,
            "window_m": self.window_m,
            "window_n": self.window_n,
            "alpha_init": self.alpha_init,
            "box_margin": self.boxes.margin,
            "box_min": self.boxes.b_min.tolist(),
            "box_max": self.boxes.b_max.tolist(),
            "init_seed": self.init_seed,
        }

    @classmethod
    def from_config(cls, cfg, template=None):
        boxes = PartBoxSet(
            b_min=np.asarray(cfg["box_min"], dtype=np.float64),
            b_max=np.asarray(cfg["box_max"], dtype=np.float64),
            margin=float(cfg["box_margin"]),
        )
        return cls(
            boxes=boxes,
            depths=list(cfg["depths"]),
            hidden=int(cfg["hidden"]),
            latent_dim=int(cfg["latent_dim"]),
            style_dim=int(cfg["style_dim"]),
            mapping_layers=int(cfg["mapping_layers"]),
            window_m=float(cfg["window_m"]),
            window_n=int(cfg["window_n"]),
            alpha_init=float(cfg["alpha_init"]),
            template=template,
            seed=int(cfg["init_seed"]),
        )

    def mapping_forward(self, z):
        """Latent -> style -> per-part FiLM (gamma, phi) per layer.

        Zero-initialized heads give gamma = 1, phi = 0 exactly.
        """
        z = torch.as_tensor(z, dtype=self.dtype)
        if z.shape != (self.latent_dim,):
            raise ValueError(f"latent must have length {self.latent_dim}")
        style = self.mapping(z)
        film = []
        for heads in self.film_heads:
            gammas, phis = [], []
            for head in heads:
                raw = head(style)
                g_raw, phi = raw[: self.hidden], raw[self.hidden:]
                gammas.append(1.0 + FILM_GAMMA_SCALE * g_raw)
                phis.append(phi)
            film.append((torch.stack(gammas), torch.stack(phis)))
        return film


def build_generator(
    model,
    margin=0.05,
    template_resolution=64,
    with_template=True,
    **kwargs,
):
    """Generator wired to a body model: boxes from its parts, template SDF
    from its mesh."""
    boxes = canonical_part_boxes(model, margin)
    template = (
        TemplateSdf(model, grid_resolution=template_resolution)
        if with_template
        else ZeroTemplate()
    )
    return GeneratorNet(boxes=boxes, template=template, **kwargs)


def query_composite(
    x,
    dirs,
    net,
    boxes=None,
    film=None,
    z=None,
    background=(1.0, 1.0, 1.0),
    with_grad_delta=False,
    template_exact=False,
):
    """Blend the subnetworks whose boxes contain each point.

    x, dirs: (N, 3) canonical positions and world view directions (torch or
    numpy). Points outside every box get density 0 and the background color.
    Only containing subnetworks are evaluated.
    """
    if film is None:
        if z is None:
            raise ValueError("need film parameters or a latent")
        film = net.mapping_forward(z)
    dtype = net.dtype
    x_t = torch.as_tensor(x, dtype=dtype)
    dirs_t = torch.as_tensor(dirs, dtype=dtype)
    if x_t.ndim == 1:
        x_t = x_t[None, :]
    if dirs_t.ndim == 1:
        dirs_t = dirs_t[None, :].expand(len(x_t), 3)
    n = len(x_t)

    if with_grad_delta and not x_t.requires_grad:
        x_t = x_t.detach().clone().requires_grad_(True)

    if boxes is None:
        b_min, b_max = net.box_min, net.box_max
    else:
        b_min = torch.as_tensor(np.asarray(boxes.b_min), dtype=dtype)
        b_max = torch.as_tensor(np.asarray(boxes.b_max), dtype=dtype)

    inside = ((x_t[:, None, :] >= b_min[None]) & (x_t[:, None, :] <= b_max[None])).all(
        dim=-1
    )  # (N, P)

    weight_sum = torch.zeros(n, dtype=dtype)
    color_sum = torch.zeros(n, 3, dtype=dtype)
    delta_sum = torch.zeros(n, dtype=dtype)
    for p, part in enumerate(net.parts):
        mask = inside[:, p]
        if not bool(mask.any()):
            continue
        idx = mask.nonzero(as_tuple=True)[0]
        xhat = normalize_local(x_t[idx], b_min[p], b_max[p])
        w = window_weight(xhat, net.window_m, net.window_n)
        gamma, phi = film[p]
        rgb, delta = part(xhat, dirs_t[idx], gamma[:, None, :], phi[:, None, :])
        weight_sum = weight_sum.index_add(0, idx, w)
        color_sum = color_sum.index_add(0, idx, w[:, None] * rgb)
        delta_sum = delta_sum.index_add(0, idx, w * delta)

    any_inside = inside.any(dim=1)
    safe_sum = torch.where(any_inside, weight_sum, torch.ones_like(weight_sum))
    bg = torch.as_tensor(background, dtype=dtype)
    color = torch.where(
        any_inside[:, None], color_sum / safe_sum[:, None], bg.expand(n, 3)
    )
    delta = torch.where(any_inside, delta_sum / safe_sum, torch.zeros_like(delta_sum))

    grad_delta = None
    if with_grad_delta:
        if bool(any_inside.any()):
            grad_delta = torch.autograd.grad(
                delta.sum(),
                x_t,
                create_graph=torch.is_grad_enabled(),
                allow_unused=False,
            )[0]
        else:
            grad_delta = torch.zeros_like(x_t)

    template = net.template
    if template is None:
        d_template = torch.zeros(n, dtype=dtype)
    else:
        d_np = template.query(x_t.detach().cpu().numpy(), exact=template_exact)
        d_template = torch.as_tensor(d_np, dtype=dtype)
    sdf = d_template + delta
    density = torch.where(
        any_inside,
        sdf_to_density(sdf, net.alpha),
        torch.zeros_like(sdf),
    )
    return FieldSamples(
        color=color,
        sdf=sdf,
        density=density,
        delta=delta,
        inside=any_inside,
        grad_delta=grad_delta,
    )


def field_gradients(net, x, dirs, z, color_probe=None):
    """Reverse-mode derivatives of the blended field.

    Returns (scalar, grad_x_delta, param_grads) where scalar is
    mean(delta) + mean(color * probe) and param_grads maps parameter names
    to gradients of that scalar. The same scalar is what finite-difference
    oracles perturb.
    """
    film = net.mapping_forward(torch.as_tensor(z, dtype=net.dtype))
    samples = query_composite(x, dirs, net, film=film, with_grad_delta=True)
    if color_probe is None:
        color_probe = torch.ones(3, dtype=net.dtype)
    probe = torch.as_tensor(color_probe, dtype=net.dtype)
    scalar = samples.delta.mean() + (samples.color * probe).sum(-1).mean()
    params = dict(net.named_parameters())
    grads = torch.autograd.grad(scalar, list(params.values()), allow_unused=True)
    param_grads = {
        name: (g if g is not None else torch.zeros_like(p))
        for (name, p), g in zip(params.items(), grads)
    }
    return (
        float(scalar.detach()),
        samples.grad_delta.detach(),
        param_grads,
    )


def composite_sdf_grid(net, z, resolution=48, pad=0.02):
    """Sample the composite SDF on a regular grid spanning all boxes."""
    lo = net.boxes.b_min.min(axis=0) - pad
    hi = net.boxes.b_max.max(axis=0) + pad
    axes = [np.linspace(lo[a], hi[a], resolution) for a in range(3)]
    gx, gy, gz = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)
    film = net.mapping_forward(torch.as_tensor(z, dtype=net.dtype))
    values = np.empty(len(pts))
    dirs = np.zeros(3)
    dirs[2] = 1.0
    with torch.no_grad():
        for start in range(0, len(pts), 8192):
            block = pts[start:start + 8192]
            out = query_composite(
                block, np.tile(dirs, (len(block), 1)), net, film=film
            )
            # outside all boxes the field is empty; keep it positive there
            sdf = out.sdf.cpu().numpy()
            outside = ~out.inside.cpu().numpy()
            sdf[outside] = np.maximum(sdf[outside], 1e-4)
            values[start:start + 8192] = sdf
    spacing = (hi - lo) / (resolution - 1)
    return values.reshape(resolution, resolution, resolution), lo, spacing


def extract_surface(net, z, resolution=48):
    """Debug surface extraction (marching cubes on the composite SDF)."""
    from skimage.measure import marching_cubes

    values, lo, spacing = composite_sdf_grid(net, z, resolution)
    verts, faces, _, _ = marching_cubes(values, level=0.0, spacing=tuple(spacing))
    return verts + lo, faces
