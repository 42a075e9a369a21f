"""End-to-end image formation: ray culling, stratified sampling, inverse
LBS into canonical space, composite field queries, and discrete volume
integration.

Sample positions never depend on network parameters, so the geometric
stages run in numpy; only field evaluation and compositing live on the
autograd tape.
"""

import time
from dataclasses import dataclass, field

import numpy as np
import torch

from .body import canonicalize_points, deform
from .errors import NumericsError
from .fields import query_composite
from .geometry import filter_rays, generate_rays, pose_boxes


@dataclass
class RenderConfig:
    samples_per_ray: int = 28
    background: tuple = (1.0, 1.0, 1.0)
    k_neighbors: int = 4
    deterministic_midpoint: bool = False

    def __post_init__(self):
        if self.samples_per_ray < 1:
            raise ValueError("need at least one sample per ray")


@dataclass
class RenderOutput:
    rgb: np.ndarray       # (H, W, 3) in [0, 1]
    depth: np.ndarray     # (H, W) expected termination distance, 0 on miss
    opacity: np.ndarray   # (H, W) accumulated 1 - transmittance
    query_count: int      # composite field evaluations performed
    wall_time: float = 0.0


def stratified_samples(t_near, t_far, n, rng=None, midpoint=False):
    """One uniform draw per bin of [t_near, t_far]; returns (t, delta).

    Batched: t_near/t_far may be scalars or (R,) arrays; output (R, N).
    delta_i = t_{i+1} - t_i for i < N, delta_N = t_far - t_N. Midpoint mode
    replaces the draws with bin centers.
    """
    t_near = np.atleast_1d(np.asarray(t_near, dtype=np.float64))
    t_far = np.atleast_1d(np.asarray(t_far, dtype=np.float64))
    if np.any(t_near >= t_far):
        raise ValueError("need t_near < t_far")
    if n < 1:
        raise ValueError("need at least one sample")
    r = len(t_near)
    if midpoint:
        u = np.full((r, n), 0.5)
    else:
        if rng is None:
            raise ValueError("stratified sampling needs an rng (or midpoint mode)")
        u = rng.random((r, n))
    edges = np.arange(n, dtype=np.float64)[None, :]
    span = (t_far - t_near)[:, None]
    t = t_near[:, None] + (edges + u) / n * span
    delta = np.empty_like(t)
    delta[:, :-1] = t[:, 1:] - t[:, :-1]
    delta[:, -1] = t_far - t[:, -1]
    return t, delta


def integrate_ray(colors, sigmas, deltas, background, ts=None):
    """Discrete compositing of one ray (numpy reference path).

    weights w_i = T_i (1 - exp(-sigma_i delta_i)) with
    T_i = exp(-sum_{j<i} sigma_j delta_j); the leftover transmittance falls
    on the background. Returns (rgb, depth, opacity); depth needs ts.
    """
    colors = np.asarray(colors, dtype=np.float64).reshape(-1, 3)
    sigmas = np.asarray(sigmas, dtype=np.float64)
    deltas = np.asarray(deltas, dtype=np.float64)
    if np.any(sigmas < 0) or np.any(deltas < 0):
        raise ValueError("sigma and delta must be nonnegative")
    optical = sigmas * deltas
    trans = np.exp(-np.concatenate([[0.0], np.cumsum(optical)[:-1]]))
    alpha = 1.0 - np.exp(-optical)
    weights = trans * alpha
    t_final = np.exp(-optical.sum())
    rgb = weights @ colors + t_final * np.asarray(background, dtype=np.float64)
    opacity = 1.0 - t_final
    if ts is None or weights.sum() <= 0.0:
        depth = 0.0
    else:
        depth = float(weights @ np.asarray(ts, dtype=np.float64) / weights.sum())
    return rgb, depth, opacity


def _integrate_batch(colors, sigmas, deltas, ts, background):
    """Torch compositing over (R, N) sample grids; differentiable."""
    optical = sigmas * deltas
    cum = torch.cumsum(optical, dim=1)
    trans = torch.exp(-torch.cat([torch.zeros_like(cum[:, :1]), cum[:, :-1]], dim=1))
    alpha = 1.0 - torch.exp(-optical)
    weights = trans * alpha
    t_final = torch.exp(-cum[:, -1])
    rgb = (weights[:, :, None] * colors).sum(dim=1) + t_final[:, None] * background
    opacity = 1.0 - t_final
    wsum = weights.sum(dim=1)
    covered = wsum > 0.0
    safe = torch.where(covered, wsum, torch.ones_like(wsum))
    depth = torch.where(covered, (weights * ts).sum(dim=1) / safe, torch.zeros_like(wsum))
    return rgb, depth, opacity


@dataclass
class RayGeometry:
    """Parameter-independent per-ray sampling geometry (numpy)."""

    hit_index: np.ndarray      # (Rh,) indices into the row-major pixel grid
    canonical: np.ndarray      # (Rh * N, 3) canonicalized sample positions
    dirs: np.ndarray           # (Rh * N, 3) world view directions
    ts: np.ndarray             # (Rh, N)
    deltas: np.ndarray         # (Rh, N)
    n_rays: int
    height: int
    width: int


def prepare_ray_geometry(model, shape, pose, cam, boxes, cfg, rng=None, subset=None):
    """Deform, pose boxes, cull rays and canonicalize sample points.

    subset: optional bool mask (H*W,) restricting which pixels to consider.
    """
    posed = deform(model, shape, pose)
    posed_boxes = pose_boxes(boxes, posed, model)
    rays = generate_rays(cam)
    rays = filter_rays(rays, posed_boxes)
    hit = rays.hit.copy()
    if subset is not None:
        hit &= subset
    hit_index = np.nonzero(hit)[0]
    n = cfg.samples_per_ray
    if len(hit_index) == 0:
        empty = np.zeros((0, 3))
        return RayGeometry(
            hit_index=hit_index,
            canonical=empty,
            dirs=empty,
            ts=np.zeros((0, n)),
            deltas=np.zeros((0, n)),
            n_rays=len(rays),
            height=cam.height,
            width=cam.width,
        )
    ts, deltas = stratified_samples(
        rays.t_near[hit_index],
        rays.t_far[hit_index],
        n,
        rng=rng,
        midpoint=cfg.deterministic_midpoint or rng is None,
    )
    dirs = rays.dirs[hit_index]
    points = rays.origin[None, None, :] + ts[:, :, None] * dirs[:, None, :]
    canonical = canonicalize_points(
        posed, points.reshape(-1, 3), k_neighbors=cfg.k_neighbors
    )
    return RayGeometry(
        hit_index=hit_index,
        canonical=canonical,
        dirs=np.repeat(dirs, n, axis=0),
        ts=ts,
        deltas=deltas,
        n_rays=len(rays),
        height=cam.height,
        width=cam.width,
    )


def render_geometry(net, geo, film, cfg):
    """Field queries + compositing for prepared geometry; torch output.

    Returns (rgb (H, W, 3) torch, depth (Rh,), opacity (Rh,), query_count).
    """
    dtype = net.dtype
    bg = torch.as_tensor(cfg.background, dtype=dtype)
    h, w = geo.height, geo.width
    base = bg[None, :].expand(h * w, 3)
    n_hit = len(geo.hit_index)
    if n_hit == 0:
        rgb = base.reshape(h, w, 3)
        zero = torch.zeros(0, dtype=dtype)
        return rgb, zero, zero, 0
    n = geo.ts.shape[1]
    samples = query_composite(
        geo.canonical, geo.dirs, net, film=film, background=cfg.background
    )
    colors = samples.color.reshape(n_hit, n, 3)
    sigmas = samples.density.reshape(n_hit, n)
    ts = torch.as_tensor(geo.ts, dtype=dtype)
    deltas = torch.as_tensor(geo.deltas, dtype=dtype)
    ray_rgb, ray_depth, ray_opacity = _integrate_batch(colors, sigmas, deltas, ts, bg)
    idx = torch.as_tensor(geo.hit_index, dtype=torch.long)
    rgb = base.index_put((idx,), ray_rgb).reshape(h, w, 3)
    return rgb, ray_depth, ray_opacity, n_hit * n


def render_image(net, model, shape, pose, cam, z, cfg, rng=None):
    """Differentiable full-frame render; returns (rgb torch, geo, extras)."""
    geo = prepare_ray_geometry(model, shape, pose, cam, net.boxes, cfg, rng=rng)
    film = net.mapping_forward(torch.as_tensor(z, dtype=net.dtype))
    rgb, ray_depth, ray_opacity, query_count = render_geometry(net, geo, film, cfg)
    return rgb, geo, (ray_depth, ray_opacity, query_count)


def render(net, model, shape, pose, cam, z, cfg=None, rng=None):
    """Full pipeline to numpy buffers (RenderOutput)."""
    cfg = cfg or RenderConfig()
    start = time.perf_counter()
    with torch.no_grad():
        rgb, geo, (ray_depth, ray_opacity, query_count) = render_image(
            net, model, shape, pose, cam, z, cfg, rng=rng
        )
    h, w = geo.height, geo.width
    depth = np.zeros(h * w)
    opacity = np.zeros(h * w)
    depth[geo.hit_index] = ray_depth.cpu().numpy()
    opacity[geo.hit_index] = ray_opacity.cpu().numpy()
    out = RenderOutput(
        rgb=rgb.cpu().numpy().astype(np.float64),
        depth=depth.reshape(h, w),
        opacity=opacity.reshape(h, w),
        query_count=query_count,
        wall_time=time.perf_counter() - start,
    )
    if not np.isfinite(out.rgb).all():
        raise NumericsError("render produced non-finite pixels")
    return out


def _pixel_mean(net, geo, film, cfg):
    rgb, _, _, _ = render_geometry(net, geo, film, cfg)
    flat = rgb.reshape(-1, 3)
    idx = torch.as_tensor(geo.hit_index, dtype=torch.long)
    return flat[idx].mean()


def render_gradcheck(
    net,
    model,
    shape,
    pose,
    cam,
    z,
    cfg=None,
    pixel_count=16,
    fd_step=1e-6,
    coords_per_param=4,
    seed=0,
):
    """Compare reverse-mode gradients of the mean rendered pixel value
    against central finite differences, parameter group by group.

    Returns (max relative error, per-group dict). Sample geometry is frozen
    once (it does not depend on parameters), so each FD probe re-evaluates
    only field queries and compositing.
    """
    cfg = cfg or RenderConfig(deterministic_midpoint=True)
    if pixel_count > 64:
        raise ValueError("gradcheck supports at most 64 pixels")
    rng = np.random.default_rng(seed)
    geo = prepare_ray_geometry(model, shape, pose, cam, net.boxes, cfg)
    if len(geo.hit_index) == 0:
        raise ValueError("no rays hit the body; nothing to check")
    chosen = rng.choice(
        len(geo.hit_index), size=min(pixel_count, len(geo.hit_index)), replace=False
    )
    keep = np.zeros(geo.n_rays, dtype=bool)
    keep[geo.hit_index[chosen]] = True
    geo = prepare_ray_geometry(model, shape, pose, cam, net.boxes, cfg, subset=keep)

    z_t = torch.as_tensor(z, dtype=net.dtype)

    def forward():
        film = net.mapping_forward(z_t)
        return _pixel_mean(net, geo, film, cfg)

    value = forward()
    params = dict(net.named_parameters())
    grads = torch.autograd.grad(value, list(params.values()), allow_unused=True)
    analytic = {
        name: (g if g is not None else torch.zeros_like(p))
        for (name, p), g in zip(params.items(), grads)
    }

    # Per group: central differences on the largest-gradient coordinates
    # (best signal-to-noise) plus one random directional probe covering the
    # whole tensor. Richardson extrapolation over step h and h/2 removes the
    # O(h^2) truncation term. Quantities below the resolvable signal floor
    # are certified absolutely: the FD noise floor makes relative error
    # meaningless there.
    report = {}
    worst = 0.0
    gmax = max(float(max(g.abs().max() for g in analytic.values())), 1e-12)
    eps = float(torch.finfo(net.dtype).eps)
    noise = 8.0 * eps * max(1.0, abs(float(value.detach()))) / fd_step
    atol = max(1e-4 * gmax, 1e3 * noise)

    def central(apply, undo):
        diffs = []
        with torch.no_grad():
            for h in (fd_step, 0.5 * fd_step):
                apply(h)
                f_plus = float(forward())
                undo()
                apply(-h)
                f_minus = float(forward())
                undo()
                diffs.append((f_plus - f_minus) / (2.0 * h))
        return (4.0 * diffs[1] - diffs[0]) / 3.0

    for name, param in params.items():
        flat = param.data.view(-1)
        grad_flat = analytic[name].view(-1)
        group_err = 0.0
        n_coords = min(coords_per_param, flat.numel())
        top = torch.argsort(grad_flat.abs(), descending=True)[:n_coords]
        for c in top.tolist():
            orig = float(flat[c])

            def bump(h, c=c, orig=orig):
                flat[c] = orig + h

            def restore(c=c, orig=orig):
                flat[c] = orig

            fd = central(bump, restore)
            ad = float(grad_flat[c])
            if max(abs(ad), abs(fd)) > atol:
                group_err = max(group_err, abs(ad - fd) / max(abs(ad), abs(fd)))
        direction = torch.from_numpy(
            rng.standard_normal(flat.numel())
        ).to(flat.dtype)
        direction /= direction.norm()
        base = param.data.clone()

        def shift(h, param=param, direction=direction, base=base):
            param.data.copy_(base + h * direction.view(param.shape))

        def reset(param=param, base=base):
            param.data.copy_(base)

        fd_dir = central(shift, reset)
        ad_dir = float(grad_flat @ direction)
        if max(abs(ad_dir), abs(fd_dir)) > atol:
            group_err = max(group_err, abs(ad_dir - fd_dir) / max(abs(ad_dir), abs(fd_dir)))
        report[name] = group_err
        worst = max(worst, group_err)
    return worst, report
