"""Hand-set field networks for blending and regularizer tests."""

import math

import numpy as np
import torch
import torch.nn as nn

from bodygen.geometry import PartBoxSet


class ConstPart(nn.Module):
    """Subnetwork emitting a constant color and SDF offset."""

    def __init__(self, rgb, delta, dtype=torch.float64):
        super().__init__()
        self.rgb = torch.as_tensor(rgb, dtype=dtype)
        self.delta = torch.as_tensor(delta, dtype=dtype)

    def forward(self, xhat, dirs, gamma, phi):
        n = len(xhat)
        return self.rgb.expand(n, 3).clone(), self.delta.expand(n).clone()


class LinearDeltaPart(nn.Module):
    """delta = w . xhat, constant color."""

    def __init__(self, w, dtype=torch.float64):
        super().__init__()
        self.w = nn.Parameter(torch.as_tensor(w, dtype=dtype))

    def forward(self, xhat, dirs, gamma, phi):
        delta = xhat @ self.w
        return torch.full((len(xhat), 3), 0.5, dtype=xhat.dtype), delta


class ZeroTemplateStub:
    def query(self, points, exact=False):
        return np.zeros(len(np.atleast_2d(points)))


class SphereTemplate:
    def __init__(self, center, radius):
        self.center = np.asarray(center, dtype=np.float64)
        self.radius = radius

    def query(self, points, exact=False):
        points = np.atleast_2d(points)
        return np.linalg.norm(points - self.center, axis=1) - self.radius


class StubNet(nn.Module):
    """Minimal stand-in for GeneratorNet over hand-set part evaluators."""

    def __init__(self, boxes, parts, alpha=0.1, window_m=2.0, window_n=8,
                 template=None, dtype=torch.float64):
        super().__init__()
        if not isinstance(boxes, PartBoxSet):
            b_min, b_max = boxes
            boxes = PartBoxSet(
                b_min=np.atleast_2d(np.asarray(b_min, dtype=np.float64)),
                b_max=np.atleast_2d(np.asarray(b_max, dtype=np.float64)),
                margin=0.0,
            )
        self.boxes = boxes
        self.parts = nn.ModuleList(parts)
        self.log_alpha = nn.Parameter(
            torch.tensor(math.log(alpha), dtype=dtype)
        )
        self.window_m = window_m
        self.window_n = window_n
        self.template = template or ZeroTemplateStub()
        self.latent_dim = 4
        self.register_buffer(
            "box_min", torch.as_tensor(boxes.b_min, dtype=dtype)
        )
        self.register_buffer(
            "box_max", torch.as_tensor(boxes.b_max, dtype=dtype)
        )

    @property
    def alpha(self):
        return torch.exp(self.log_alpha)

    @property
    def dtype(self):
        return self.log_alpha.dtype

    def mapping_forward(self, z):
        blank = torch.zeros(1, 1, dtype=self.dtype)
        return [(blank, blank) for _ in self.parts]


def two_box_overlap_net(**kwargs):
    """Two equal boxes overlapping half their width along x, constant parts
    red and green."""
    boxes = PartBoxSet(
        b_min=np.array([[0.0, -1.0, -1.0], [1.0, -1.0, -1.0]]),
        b_max=np.array([[2.0, 1.0, 1.0], [3.0, 1.0, 1.0]]),
        margin=0.0,
    )
    parts = [
        ConstPart([1.0, 0.0, 0.0], 1.0),
        ConstPart([0.0, 1.0, 0.0], 0.0),
    ]
    return StubNet(boxes, parts, **kwargs)
