"""Adversarial objective, regularizers, R1 schedule, discriminator,
augmentation, and the desk-scale optimizer loop.

The split of the combined adversarial objective is the standard
non-saturating form: D minimizes softplus(D(fake)) + softplus(-D(real))
+ lambda * R1; G minimizes softplus(-D(fake)).
"""

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .body import Pose, Shape, deform
from .errors import NumericsError
from .fields import query_composite
from .formats import atomic_write_text
from .geometry import Camera
from .render import RenderConfig, render_image
from .sampling import sample_latent


@dataclass
class AugmentConfig:
    max_pan_px: float = 4.0
    max_scale: float = 0.05
    max_rot_deg: float = 3.0


@dataclass
class TrainConfig:
    lr_g: float = 2e-5
    lr_d: float = 2e-4
    lambda_off: float = 1.5
    lambda_eik: float = 0.5
    r1_initial: float = 300.0
    r1_floor: float = 18.5
    r1_halflife_iters: int = 50000
    batch: int = 4
    aug: AugmentConfig = field(default_factory=AugmentConfig)
    iters: int = 200
    seed: int = 0
    adam_beta1: float = 0.0
    adam_beta2: float = 0.9
    reg_points: int = 1024
    log_every: int = 1
    checkpoint_every: int = 0  # 0 = only at the end

    def __post_init__(self):
        if min(self.lr_g, self.lr_d) < 0:
            raise ValueError("learning rates must be >= 0")
        if self.r1_floor > self.r1_initial:
            raise ValueError("R1 floor must not exceed the initial value")


def f_logistic(u):
    """f(u) = -log(1 + exp(-u)), evaluated in the overflow-free branch."""
    u = np.asarray(u, dtype=np.float64)
    out = np.where(u >= 0.0, -np.log1p(np.exp(-np.abs(u))), u - np.log1p(np.exp(-np.abs(u))))
    return out if out.ndim else float(out)


def d_loss(scores_real, scores_fake, r1_term, lam):
    """mean softplus(fake) + mean softplus(-real) + lam * r1."""
    real = torch.as_tensor(scores_real, dtype=torch.float64) if not torch.is_tensor(scores_real) else scores_real
    fake = torch.as_tensor(scores_fake, dtype=torch.float64) if not torch.is_tensor(scores_fake) else scores_fake
    if real.numel() == 0 or fake.numel() == 0:
        raise ValueError("empty score batch")
    if real.numel() != fake.numel():
        raise ValueError("real/fake batch sizes differ")
    return F.softplus(fake).mean() + F.softplus(-real).mean() + lam * r1_term


def g_loss(scores_fake):
    """mean softplus(-score); the non-saturating generator objective."""
    fake = torch.as_tensor(scores_fake, dtype=torch.float64) if not torch.is_tensor(scores_fake) else scores_fake
    if fake.numel() == 0:
        raise ValueError("empty score batch")
    return F.softplus(-fake).mean()


def r1_penalty(disc, real_batch):
    """Mean squared Frobenius norm of d(score)/d(pixels) at real samples."""
    if not real_batch.requires_grad:
        real_batch = real_batch.detach().clone().requires_grad_(True)
    scores = disc(real_batch)
    if not scores.requires_grad:  # constant discriminator: zero gradient
        return torch.zeros((), dtype=real_batch.dtype)
    grads = torch.autograd.grad(
        scores.sum(),
        real_batch,
        create_graph=torch.is_grad_enabled(),
        allow_unused=True,
    )[0]
    if grads is None:
        return torch.zeros((), dtype=real_batch.dtype)
    return (grads.reshape(len(grads), -1) ** 2).sum(dim=1).mean()


def offset_loss(delta_samples):
    if delta_samples.numel() == 0:
        raise ValueError("empty sample set")
    return (delta_samples ** 2).mean()


def eikonal_loss(grad_delta_samples):
    if grad_delta_samples.numel() == 0:
        raise ValueError("empty sample set")
    return (grad_delta_samples ** 2).sum(dim=-1).mean()


def r1_schedule(iteration, initial=300.0, floor=18.5, halflife=50000):
    """initial / 2^floor(iter / halflife), clamped below at the floor."""
    if iteration < 0:
        raise ValueError("iteration must be >= 0")
    return max(initial / (2 ** (iteration // halflife)), floor)


def sample_in_boxes(boxes, count, rng):
    """Points uniform over the union of canonical boxes (volume-weighted
    box choice, uniform within; overlaps are double-counted)."""
    extents = boxes.extents()
    volumes = np.prod(extents, axis=1)
    probs = volumes / volumes.sum()
    which = rng.choice(boxes.num_parts, size=count, p=probs)
    u = rng.random((count, 3))
    return boxes.b_min[which] + u * extents[which]


# ---------------------------------------------------------------------------
# discriminator


class Discriminator(nn.Module):
    """Strided conv pyramid from (H, W) down to 4x4, then a linear score.

    Each block halves every dimension still larger than 4; channels double
    from base_channels up to max_channels.
    """

    def __init__(self, height, width, base_channels=64, max_channels=256, seed=0):
        super().__init__()
        if height < 4 or width < 4:
            raise ValueError("input must be at least 4x4")
        self.height = height
        self.width = width
        self.base_channels = base_channels
        self.max_channels = max_channels
        self.init_seed = int(seed)
        blocks = []
        ch_in = 3
        h, w = height, width
        ch = base_channels
        # stride a dimension only while halving keeps it >= 4 (power-of-two
        # multiples of 4 land exactly on 4x4; others stop at 4..7)
        while h >= 8 or w >= 8:
            stride = (2 if h >= 8 else 1, 2 if w >= 8 else 1)
            blocks.append(nn.Conv2d(ch_in, ch, kernel_size=3, stride=stride, padding=1))
            blocks.append(nn.LeakyReLU(0.2))
            ch_in = ch
            ch = min(ch * 2, max_channels)
            h = -(-h // 2) if stride[0] == 2 else h
            w = -(-w // 2) if stride[1] == 2 else w
        self.features = nn.Sequential(*blocks)
        self.score = nn.Linear(ch_in * h * w, 1)
        self._init_parameters(seed)

    def _init_parameters(self, seed):
        gen = torch.Generator().manual_seed(seed)
        for module in self.modules():
            if isinstance(module, (nn.Conv2d, nn.Linear)):
                fan_in = module.weight[0].numel()
                bound = 1.0 / math.sqrt(fan_in)
                with torch.no_grad():
                    module.weight.uniform_(-bound, bound, generator=gen)
                    module.bias.zero_()

    def config(self):
        return {
            "kind": "discriminator",
            "height": self.height,
            "width": self.width,
            "base_channels": self.base_channels,
            "max_channels": self.max_channels,
            "init_seed": self.init_seed,
        }

    @classmethod
    def from_config(cls, cfg):
        return cls(
            height=int(cfg["height"]),
            width=int(cfg["width"]),
            base_channels=int(cfg["base_channels"]),
            max_channels=int(cfg["max_channels"]),
            seed=int(cfg["init_seed"]),
        )

    def forward(self, images):
        if images.ndim == 3:
            images = images[None]
        if images.shape[1:] != (3, self.height, self.width):
            raise ValueError(
                f"expected (B, 3, {self.height}, {self.width}), got {tuple(images.shape)}"
            )
        h = self.features(images)
        return self.score(h.reshape(len(h), -1)).squeeze(-1)


# ---------------------------------------------------------------------------
# augmentation


def _bilinear_sample(image, rows, cols):
    """image (C, H, W); rows/cols (H, W) float sample coords, edge-clamped.
    Linear in pixel values, so gradients flow through unchanged."""
    c, h, w = image.shape
    rows = rows.clamp(0.0, h - 1.0)
    cols = cols.clamp(0.0, w - 1.0)
    r0 = rows.floor().long().clamp(0, h - 1)
    c0 = cols.floor().long().clamp(0, w - 1)
    r1 = (r0 + 1).clamp(0, h - 1)
    c1 = (c0 + 1).clamp(0, w - 1)
    fr = (rows - r0.to(rows.dtype))[None]
    fc = (cols - c0.to(cols.dtype))[None]
    v00 = image[:, r0, c0]
    v01 = image[:, r0, c1]
    v10 = image[:, r1, c0]
    v11 = image[:, r1, c1]
    return (
        v00 * (1 - fr) * (1 - fc)
        + v01 * (1 - fr) * fc
        + v10 * fr * (1 - fc)
        + v11 * fr * fc
    )


def augment(images, rng, cfg):
    """Random pan/scale/rotation with bilinear resampling, edge clamped.

    images: (B, 3, H, W) or (3, H, W) torch. Transforms are drawn
    independently per image; draws come from the supplied numpy rng.
    """
    single = images.ndim == 3
    if single:
        images = images[None]
    b, _, h, w = images.shape
    dtype = images.dtype
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    grid_r, grid_c = torch.meshgrid(
        torch.arange(h, dtype=dtype), torch.arange(w, dtype=dtype), indexing="ij"
    )
    out = []
    for i in range(b):
        dx = float(rng.uniform(-cfg.max_pan_px, cfg.max_pan_px)) if cfg.max_pan_px else 0.0
        dy = float(rng.uniform(-cfg.max_pan_px, cfg.max_pan_px)) if cfg.max_pan_px else 0.0
        scale = 1.0 + (float(rng.uniform(-cfg.max_scale, cfg.max_scale)) if cfg.max_scale else 0.0)
        rot = math.radians(float(rng.uniform(-cfg.max_rot_deg, cfg.max_rot_deg))) if cfg.max_rot_deg else 0.0
        # inverse map: undo pan, then scale, then rotation, all about center
        rr = (grid_r - cy - dy) / scale
        cc = (grid_c - cx - dx) / scale
        cos, sin = math.cos(-rot), math.sin(-rot)
        src_r = cos * rr - sin * cc + cy
        src_c = sin * rr + cos * cc + cx
        out.append(_bilinear_sample(images[i], src_r, src_c))
    result = torch.stack(out)
    return result[0] if single else result


def apply_pan_scale_rot(images, dx, dy, scale, rot_deg):
    """Deterministic version of augment (fixed transform for every image)."""
    single = images.ndim == 3
    if single:
        images = images[None]
    b, _, h, w = images.shape
    dtype = images.dtype
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    grid_r, grid_c = torch.meshgrid(
        torch.arange(h, dtype=dtype), torch.arange(w, dtype=dtype), indexing="ij"
    )
    rot = math.radians(rot_deg)
    rr = (grid_r - cy - dy) / scale
    cc = (grid_c - cx - dx) / scale
    cos, sin = math.cos(-rot), math.sin(-rot)
    src_r = cos * rr - sin * cc + cy
    src_c = sin * rr + cos * cc + cx
    out = torch.stack([_bilinear_sample(images[i], src_r, src_c) for i in range(b)])
    return out[0] if single else out


# ---------------------------------------------------------------------------
# synthetic data + the training loop


def rasterize_part_colors(model, posed, cam, part_colors, background=(1.0, 1.0, 1.0)):
    """Flat-shaded z-buffered rasterization of the posed mesh (used to build
    synthetic training images; unrelated to the volume renderer)."""
    h, w = cam.height, cam.width
    img = np.ones((h, w, 3)) * np.asarray(background, dtype=np.float64)
    zbuf = np.full((h, w), np.inf)
    rot_wc = cam.rotation.T
    verts_cam = (posed.posed_vertices - cam.translation) @ rot_wc.T
    z = verts_cam[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        px = verts_cam[:, 0] / z * cam.fx + cam.cx
        py = verts_cam[:, 1] / z * cam.fy + cam.cy
    for f_idx, face in enumerate(model.faces):
        if np.any(z[face] <= 1e-6):
            continue
        xs, ys = px[face], py[face]
        lo_x = max(int(np.floor(xs.min() - 0.5)), 0)
        hi_x = min(int(np.ceil(xs.max() + 0.5)), w - 1)
        lo_y = max(int(np.floor(ys.min() - 0.5)), 0)
        hi_y = min(int(np.ceil(ys.max() + 0.5)), h - 1)
        if lo_x > hi_x or lo_y > hi_y:
            continue
        gx, gy = np.meshgrid(
            np.arange(lo_x, hi_x + 1) + 0.5, np.arange(lo_y, hi_y + 1) + 0.5
        )
        d = (ys[1] - ys[2]) * (xs[0] - xs[2]) + (xs[2] - xs[1]) * (ys[0] - ys[2])
        if abs(d) < 1e-12:
            continue
        l0 = ((ys[1] - ys[2]) * (gx - xs[2]) + (xs[2] - xs[1]) * (gy - ys[2])) / d
        l1 = ((ys[2] - ys[0]) * (gx - xs[2]) + (xs[0] - xs[2]) * (gy - ys[2])) / d
        l2 = 1.0 - l0 - l1
        inside = (l0 >= 0) & (l1 >= 0) & (l2 >= 0)
        if not inside.any():
            continue
        depth = l0 * z[face[0]] + l1 * z[face[1]] + l2 * z[face[2]]
        part = model.vertex_part[face[0]]
        color = part_colors[part]
        sub_z = zbuf[lo_y:hi_y + 1, lo_x:hi_x + 1]
        closer = inside & (depth < sub_z)
        sub_z[closer] = depth[closer]
        img[lo_y:hi_y + 1, lo_x:hi_x + 1][closer] = color
    return img


def make_synthetic_dataset(model, count, height, width, seed=0):
    """Tiny labeled dataset: flat-colored rasterizations of mild poses.

    Returns (records, images (B, H, W, 3) float64).
    """
    from .geometry import frontal_camera
    from .sampling import PoseRecord

    rng = np.random.default_rng(seed)
    cam = frontal_camera(model, width, height)
    part_colors = rng.uniform(0.2, 0.9, size=(model.num_parts, 3))
    records, images = [], []
    for i in range(count):
        theta = np.zeros((model.num_joints, 3))
        theta[0, 1] = rng.uniform(-0.2, 0.2)  # slight yaw variation
        beta = rng.uniform(-0.3, 0.3, size=model.shape_basis.shape[1])
        pose = Pose(theta, np.zeros(3))
        posed = deform(model, Shape(beta), pose)
        img = rasterize_part_colors(model, posed, cam, part_colors)
        records.append(
            PoseRecord(
                id=f"synth{i:03d}",
                beta=beta,
                theta=theta,
                cam={
                    "fx": cam.fx,
                    "fy": cam.fy,
                    "cx": cam.cx,
                    "cy": cam.cy,
                    "R": cam.rotation,
                    "t": cam.translation,
                },
            )
        )
        images.append(img)
    return records, np.stack(images)


def _camera_of(record, height, width):
    return Camera(
        fx=record.cam["fx"],
        fy=record.cam["fy"],
        cx=record.cam["cx"],
        cy=record.cam["cy"],
        rotation=record.cam["R"],
        translation=record.cam["t"],
        width=width,
        height=height,
    )


class Trainer:
    """One-process adversarial training at desk scale.

    All stochastic draws flow through one seeded numpy generator, so a
    fixed seed reproduces the loss trajectory bit-for-bit.
    """

    def __init__(
        self,
        gen,
        disc,
        model,
        sampler,
        images,
        cfg=None,
        render_cfg=None,
        height=None,
        width=None,
        log_path=None,
        checkpoint_dir=None,
    ):
        self.gen = gen
        self.disc = disc
        self.model = model
        self.sampler = sampler
        self.cfg = cfg or TrainConfig()
        self.height = height or disc.height
        self.width = width or disc.width
        self.render_cfg = render_cfg or RenderConfig()
        imgs = torch.as_tensor(np.asarray(images), dtype=gen.dtype)
        if imgs.ndim != 4 or imgs.shape[-1] != 3:
            raise ValueError("images must be (B, H, W, 3)")
        self.images = imgs.permute(0, 3, 1, 2).contiguous()
        self.ids = [rec.id for rec in sampler.meta.records]
        self.opt_g = torch.optim.Adam(
            gen.parameters(),
            lr=self.cfg.lr_g,
            betas=(self.cfg.adam_beta1, self.cfg.adam_beta2),
        )
        self.opt_d = torch.optim.Adam(
            disc.parameters(),
            lr=self.cfg.lr_d,
            betas=(self.cfg.adam_beta1, self.cfg.adam_beta2),
        )
        self.rng = np.random.default_rng(self.cfg.seed)
        self.log_path = log_path
        self.checkpoint_dir = checkpoint_dir
        self._log_lines = []
        self._id_index = {rid: i for i, rid in enumerate(self.ids)}

    def _record_index(self, record):
        return self._id_index[record.id]

    def _render_fakes(self, records, zs):
        frames = []
        for rec, z in zip(records, zs):
            cam = _camera_of(rec, self.height, self.width)
            rgb, _, _ = render_image(
                self.gen,
                self.model,
                Shape(rec.beta),
                Pose(rec.theta, np.zeros(3)),
                cam,
                z,
                self.render_cfg,
                rng=self.rng,
            )
            frames.append(rgb.permute(2, 0, 1))
        return torch.stack(frames)

    def step(self, iteration):
        cfg = self.cfg
        lam = r1_schedule(
            iteration, cfg.r1_initial, cfg.r1_floor, cfg.r1_halflife_iters
        )

        # --- discriminator update
        records = self.sampler.sample(cfg.batch, self.rng)
        zs = [sample_latent(self.rng, self.gen.latent_dim) for _ in records]
        with torch.no_grad():
            fakes = self._render_fakes(records, zs)
        reals = torch.stack([self.images[self._record_index(r)] for r in records])
        reals_aug = augment(reals, self.rng, cfg.aug)
        fakes_aug = augment(fakes, self.rng, cfg.aug)
        r1 = r1_penalty(self.disc, reals_aug)
        scores_real = self.disc(reals_aug)
        scores_fake_d = self.disc(fakes_aug)
        loss_d = d_loss(scores_real, scores_fake_d, r1, lam)
        self.opt_d.zero_grad(set_to_none=True)
        loss_d.backward()
        self.opt_d.step()

        # --- generator update
        records_g = self.sampler.sample(cfg.batch, self.rng)
        zs_g = [sample_latent(self.rng, self.gen.latent_dim) for _ in records_g]
        fakes_g = self._render_fakes(records_g, zs_g)
        fakes_g_aug = augment(fakes_g, self.rng, cfg.aug)
        adv = g_loss(self.disc(fakes_g_aug))
        reg_x = sample_in_boxes(self.gen.boxes, cfg.reg_points, self.rng)
        reg_dirs = np.zeros_like(reg_x)
        reg_dirs[:, 2] = 1.0
        samples = query_composite(
            reg_x, reg_dirs, self.gen, z=zs_g[0], with_grad_delta=True
        )
        l_off = offset_loss(samples.delta)
        l_eik = eikonal_loss(samples.grad_delta)
        loss_g = adv + cfg.lambda_off * l_off + cfg.lambda_eik * l_eik
        self.opt_g.zero_grad(set_to_none=True)
        loss_g.backward()
        self.opt_g.step()

        report = {
            "iter": iteration,
            "d_loss": float(loss_d.detach()),
            "g_loss": float(adv.detach()),
            "l_off": float(l_off.detach()),
            "l_eik": float(l_eik.detach()),
            "r1_lambda": lam,
            "alpha": float(self.gen.alpha.detach()),
            "score_real": float(scores_real.detach().mean()),
            "score_fake": float(scores_fake_d.detach().mean()),
        }
        if not all(math.isfinite(v) for v in report.values() if isinstance(v, float)):
            raise NumericsError(f"non-finite loss at iteration {iteration}: {report}")
        return report

    def run(self, iters=None):
        from .checkpoint import save_checkpoint

        iters = self.cfg.iters if iters is None else iters
        history = []
        for it in range(iters):
            report = self.step(it)
            history.append(report)
            if self.log_path and it % self.cfg.log_every == 0:
                self._log_lines.append(json.dumps(report, sort_keys=True))
            if (
                self.checkpoint_dir
                and self.cfg.checkpoint_every
                and (it + 1) % self.cfg.checkpoint_every == 0
            ):
                save_checkpoint(
                    os.path.join(self.checkpoint_dir, f"ckpt_{it + 1:06d}.bgc"),
                    {"generator": self.gen, "discriminator": self.disc},
                )
        if self.log_path:
            atomic_write_text(self.log_path, "\n".join(self._log_lines) + "\n")
        if self.checkpoint_dir:
            save_checkpoint(
                os.path.join(self.checkpoint_dir, "ckpt_final.bgc"),
                {"generator": self.gen, "discriminator": self.disc},
            )
        return history
