import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from bodygen.fields import (
    FILM_GAMMA_SCALE,
    TemplateSdf,
    build_generator,
    extract_surface,
    field_gradients,
    normalize_local,
    query_composite,
    sdf_to_density,
    window_weight,
)
from bodygen.geometry import PartBoxSet

from oracles import richardson_fd, sign_by_parity
from stubs import ConstPart, LinearDeltaPart, SphereTemplate, StubNet, two_box_overlap_net

# ---------------------------------------------------------------------------
# pure formulas


def test_normalize_center_and_corner():
    lo = np.array([-1.0, -1.0, -1.0])
    hi = np.array([1.0, 1.0, 1.0])
    np.testing.assert_allclose(normalize_local(0.5 * (lo + hi), lo, hi), 0.0)
    np.testing.assert_allclose(normalize_local(hi, lo, hi), 1.0)


def test_normalize_scaled_box():
    lo, hi = np.array([-2.0, -2.0, -2.0]), np.array([2.0, 2.0, 2.0])
    np.testing.assert_allclose(
        normalize_local(np.array([1.0, 0.0, 0.0]), lo, hi), [0.5, 0.0, 0.0]
    )


def test_normalize_degenerate_box():
    with pytest.raises(ValueError):
        normalize_local(np.zeros(3), np.zeros(3), np.array([0.0, 1.0, 1.0]))


def test_window_center_is_one():
    assert window_weight(np.zeros(3), 2.0, 8) == 1.0


def test_window_face_value():
    got = window_weight(np.array([1.0, 0.0, 0.0]), 2.0, 8)
    np.testing.assert_allclose(got, math.exp(-2.0), rtol=1e-15)


@given(
    st.lists(st.floats(-1.0, 1.0), min_size=3, max_size=3),
    st.sampled_from([2, 4, 8]),
)
@settings(max_examples=60, deadline=None)
def test_window_even_symmetry(xs, n):
    # the window is only evaluated at points inside a box (|xhat| <= 1)
    x = np.array(xs)
    a = window_weight(x, 2.0, n)
    b = window_weight(-x, 2.0, n)
    assert a == b
    assert 0.0 < a <= 1.0


def test_window_rejects_odd_exponent():
    with pytest.raises(ValueError):
        window_weight(np.zeros(3), 2.0, 7)


def test_density_at_zero():
    assert sdf_to_density(0.0, 0.1) == 5.0


def test_density_far_outside():
    assert sdf_to_density(1e6, 0.1) == 0.0


def test_density_inside_value():
    np.testing.assert_allclose(
        sdf_to_density(-0.1, 0.1), 7.310585786300049, rtol=1e-14
    )


@given(
    st.floats(-5.0, 5.0),
    st.floats(-5.0, 5.0),
    st.floats(0.01, 2.0),
)
@settings(max_examples=80, deadline=None)
def test_density_monotone(d1, d2, alpha):
    if abs(d1 - d2) < 1e-9:  # below float resolution of the sigmoid
        return
    lo, hi = min(d1, d2), max(d1, d2)
    if max(abs(lo), abs(hi)) / alpha > 30.0:  # sigmoid saturated in floats
        return
    assert sdf_to_density(lo, alpha) > sdf_to_density(hi, alpha)


def test_density_rejects_nonpositive_alpha():
    with pytest.raises(ValueError):
        sdf_to_density(0.0, 0.0)


# ---------------------------------------------------------------------------
# template SDF


def test_template_zero_at_vertices(toy16, template96):
    d = template96.query_exact(toy16.vertices[::97])
    np.testing.assert_allclose(d, 0.0, atol=1e-6)


def test_template_offset_along_normal(toy16, template96):
    # step outward from a face centroid along its normal
    rng = np.random.default_rng(123)
    checked = 0
    for fi in rng.choice(len(toy16.faces), 64, replace=False):
        tri = toy16.vertices[toy16.faces[fi]]
        centroid = tri.mean(axis=0)
        n = np.cross(tri[1] - tri[0], tri[2] - tri[0])
        n /= np.linalg.norm(n)
        p = centroid + 0.1 * n
        d = template96.query_exact([p])[0]
        if d > 0:  # another part may be nearer on the inward side
            assert d <= 0.1 + 1e-9
        if abs(d - 0.1) <= 1e-3:
            checked += 1
    assert checked >= 16  # plenty of faces have 10 cm of clearance


def test_template_sign_interior(toy16, template96):
    torso = toy16.vertices[toy16.vertex_part == 1]
    centroid = torso.mean(axis=0)
    assert template96.query_exact([centroid])[0] < 0


def test_template_sign_matches_parity_oracle(toy16, template96):
    rng = np.random.default_rng(5)
    pts = rng.uniform([-0.4, 0.0, -0.2], [0.4, 1.75, 0.2], (120, 3))
    d = template96.query_exact(pts)
    clear = np.abs(d) > 2e-3  # parity is ill-posed exactly on the surface
    signs = sign_by_parity(toy16.vertices, toy16.faces, pts[clear], rng)
    np.testing.assert_array_equal(np.sign(d[clear]), signs)


def test_template_magnitude_bounded_by_surface_distance(toy16, template96):
    # |d| can never exceed the distance to densely sampled surface points
    rng = np.random.default_rng(8)
    tri = toy16.vertices[toy16.faces]
    bary = rng.dirichlet([1, 1, 1], size=4000)
    which = rng.integers(0, len(tri), 4000)
    surface = np.einsum("nk,nkd->nd", bary, tri[which])
    pts = rng.uniform([-0.9, -0.05, -0.4], [0.9, 1.8, 0.4], (200, 3))
    d = template96.query_exact(pts)
    from scipy.spatial import cKDTree

    nearest, _ = cKDTree(surface).query(pts)
    assert np.all(np.abs(d) <= nearest + 1e-9)


def test_template_grid_within_cell_diagonal(toy16, template96):
    # the trilinear bound applies inside the cached region
    g = template96.grid
    lo = g["origin"]
    hi = g["origin"] + (g["dims"] - 1) * g["cell"]
    rng = np.random.default_rng(9)
    pts = rng.uniform(lo, hi, (400, 3))
    exact = template96.query_exact(pts)
    grid = template96.query(pts)
    diag = g["cell"] * math.sqrt(3)
    assert np.abs(grid - exact).max() <= diag


def test_template_pruned_equals_full(toy16, template96):
    rng = np.random.default_rng(10)
    pts = rng.uniform([-1.2, -0.3, -0.6], [1.2, 2.0, 0.6], (300, 3))
    fast = template96.query_exact(pts)
    full = template96.query_exact(pts, candidates=10**9)
    np.testing.assert_array_equal(fast, full)


# ---------------------------------------------------------------------------
# mapping + FiLM


def test_mapping_zero_init_film(toy2, template32_toy2):
    net = build_generator(toy2, hidden=16, with_template=False, seed=0)
    z = np.random.default_rng(0).standard_normal(256)
    film = net.mapping_forward(z)
    assert len(film) == 2
    for p, (gamma, phi) in enumerate(film):
        assert gamma.shape[0] == net.parts[p].film_layers
        assert torch.all(gamma == 1.0)
        assert torch.all(phi == 0.0)


def test_mapping_rejects_wrong_length(toy2):
    net = build_generator(toy2, hidden=16, with_template=False, seed=0)
    with pytest.raises(ValueError):
        net.mapping_forward(np.zeros(7))


def test_film_heads_separate_after_one_step(toy2):
    net = build_generator(toy2, hidden=16, with_template=False, seed=1)
    rng = np.random.default_rng(2)
    z1 = torch.as_tensor(rng.standard_normal(256), dtype=net.dtype)
    z2 = torch.as_tensor(rng.standard_normal(256), dtype=net.dtype)
    opt = torch.optim.SGD(
        [p for heads in net.film_heads for h in heads for p in h.parameters()],
        lr=0.1,
    )
    g1 = net.mapping_forward(z1)[0][0]
    g2 = net.mapping_forward(z2)[0][0]
    loss = ((g1 - 2.0) ** 2).mean() + (g2 ** 2).mean()
    opt.zero_grad()
    loss.backward()
    opt.step()
    with torch.no_grad():
        a = net.mapping_forward(z1)[0][0]
        b = net.mapping_forward(z2)[0][0]
    assert not torch.allclose(a, b)


# ---------------------------------------------------------------------------
# composite queries


def test_composite_outside_all_boxes():
    net = two_box_overlap_net()
    out = query_composite(
        np.array([[10.0, 0.0, 0.0]]),
        np.array([[0.0, 0.0, 1.0]]),
        net,
        z=np.zeros(4),
        background=(0.2, 0.4, 0.6),
    )
    assert out.density.item() == 0.0
    np.testing.assert_allclose(out.color.numpy()[0], [0.2, 0.4, 0.6])
    assert not out.inside.item()


def test_composite_single_box_equals_subnet():
    net = two_box_overlap_net()
    # x in box 0 only
    out = query_composite(
        np.array([[0.5, 0.0, 0.0]]), np.array([[0.0, 0.0, 1.0]]), net, z=np.zeros(4)
    )
    np.testing.assert_allclose(out.color.numpy()[0], [1.0, 0.0, 0.0], atol=1e-12)
    np.testing.assert_allclose(out.delta.item(), 1.0, atol=1e-12)


def test_composite_two_box_equal_weight_blend():
    # identical boxes shifted so the point x=1.5 maps to mirrored xhat
    # (+0.5 in one, -0.5 in the other) -> equal window weights
    boxes = PartBoxSet(
        b_min=np.array([[0.0, -1.0, -1.0], [1.0, -1.0, -1.0]]),
        b_max=np.array([[2.0, 1.0, 1.0], [3.0, 1.0, 1.0]]),
        margin=0.0,
    )
    net = StubNet(
        boxes, [ConstPart([1.0, 0.0, 0.0], 0.0), ConstPart([0.0, 1.0, 0.0], 0.0)]
    )
    out = query_composite(
        np.array([[1.5, 0.0, 0.0]]), np.array([[0.0, 0.0, 1.0]]), net, z=np.zeros(4)
    )
    np.testing.assert_allclose(out.color.numpy()[0], [0.5, 0.5, 0.0], atol=1e-12)


def test_composite_blend_partition():
    # constant equal parts: the normalized blend must reproduce the
    # constant exactly wherever at least one box contains the point
    net = two_box_overlap_net()
    net2 = StubNet(
        net.boxes,
        [ConstPart([0.3, 0.6, 0.9], 0.25), ConstPart([0.3, 0.6, 0.9], 0.25)],
    )
    rng = np.random.default_rng(0)
    x = rng.uniform([1.0, -1.0, -1.0], [2.0, 1.0, 1.0], (200, 3))  # overlap zone
    out = query_composite(x, np.tile([0.0, 0.0, 1.0], (200, 1)), net2, z=np.zeros(4))
    np.testing.assert_allclose(
        out.color.numpy(), np.tile([0.3, 0.6, 0.9], (200, 1)), atol=1e-12
    )
    np.testing.assert_allclose(out.delta.numpy(), 0.25, atol=1e-12)


def test_composite_continuity_across_shared_face():
    net = two_box_overlap_net()
    rng = np.random.default_rng(1)
    uv = rng.uniform(-1.0, 1.0, (1000, 2))
    eps = 1e-9
    inside = np.column_stack([np.full(1000, 2.0 - eps), uv[:, 0], uv[:, 1]])
    outside = np.column_stack([np.full(1000, 2.0 + eps), uv[:, 0], uv[:, 1]])
    dirs = np.tile([0.0, 0.0, 1.0], (1000, 1))
    a = query_composite(inside, dirs, net, z=np.zeros(4))
    b = query_composite(outside, dirs, net, z=np.zeros(4))
    jump_c = (a.color - b.color).abs().max(dim=1).values.numpy()
    jump_d = (a.delta - b.delta).abs().numpy()
    bound = math.exp(-2.0) / (1.0 + math.exp(-2.0))  # equal-size-box ratio
    assert jump_c.max() < 0.15
    assert jump_d.max() < 0.15
    assert jump_c.max() <= bound + 1e-6


def test_composite_zero_offset_matches_template(toy2, template32_toy2):
    net = build_generator(toy2, hidden=16, with_template=False, seed=0)
    net.template = template32_toy2
    rng = np.random.default_rng(3)
    x = rng.uniform(net.boxes.b_min.min(0), net.boxes.b_max.max(0), (500, 3))
    with torch.no_grad():
        out = query_composite(
            x, np.tile([0.0, 0.0, 1.0], (500, 1)), net, z=np.zeros(256)
        )
    inside = out.inside.numpy()
    expected = template32_toy2.query(x[inside])
    np.testing.assert_allclose(out.sdf.numpy()[inside], expected, atol=1e-6)


def test_composite_determinism(toy2):
    net = build_generator(toy2, hidden=16, with_template=False, seed=0)
    z = np.random.default_rng(1).standard_normal(256)
    rng = np.random.default_rng(4)
    x = rng.uniform(net.boxes.b_min.min(0), net.boxes.b_max.max(0), (64, 3))
    d = rng.normal(size=(64, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    a = query_composite(x, d, net, z=z)
    b = query_composite(x, d, net, z=z)
    assert torch.equal(a.color, b.color)
    assert torch.equal(a.density, b.density)
    assert torch.equal(a.delta, b.delta)


# ---------------------------------------------------------------------------
# gradients


def test_gradients_constant_net_is_zero():
    net = StubNet(
        (np.array([-1.0, -1.0, -1.0]), np.array([1.0, 1.0, 1.0])),
        [ConstPart([0.5, 0.5, 0.5], 0.3)],
    )
    out = query_composite(
        np.array([[0.2, 0.1, -0.3]]),
        np.array([[0.0, 0.0, 1.0]]),
        net,
        z=np.zeros(4),
        with_grad_delta=True,
    )
    np.testing.assert_allclose(out.grad_delta.detach().numpy(), 0.0, atol=1e-15)


def test_gradients_linear_delta_analytic():
    lo = np.array([-0.5, -1.0, -2.0])
    hi = np.array([1.5, 1.0, 2.0])
    w = np.array([0.7, -0.3, 0.2])
    net = StubNet((lo, hi), [LinearDeltaPart(w)])
    x = np.array([[0.5, 0.0, 0.0]])  # box center: window weight 1, flat
    out = query_composite(
        x, np.array([[0.0, 0.0, 1.0]]), net, z=np.zeros(4), with_grad_delta=True
    )
    expected = w * 2.0 / (hi - lo)
    np.testing.assert_allclose(out.grad_delta.detach().numpy()[0], expected, atol=1e-10)


def test_field_gradients_match_finite_differences(toy2):
    net = build_generator(toy2, hidden=16, with_template=False, seed=5).double()
    gen = torch.Generator().manual_seed(9)
    with torch.no_grad():
        for part in net.parts:
            part.delta_head.weight.uniform_(-0.5, 0.5, generator=gen)
    rng = np.random.default_rng(2)
    # interior points with clearance from every box face (membership must
    # not flip under the finite-difference probes)
    lo = net.boxes.b_min
    hi = net.boxes.b_max
    which = rng.integers(0, 2, 400)
    u = rng.uniform(0.05, 0.95, (400, 3))
    candidates = lo[which] + u * (hi[which] - lo[which])
    clearance = np.ones(len(candidates), dtype=bool)
    for p in range(2):
        xhat = (2 * candidates - (lo[p] + hi[p])) / (hi[p] - lo[p])
        clearance &= np.all(np.abs(np.abs(xhat) - 1.0) > 1e-3, axis=1)
    xs = candidates[clearance][:100]
    assert len(xs) == 100
    ds = rng.normal(size=(100, 3))
    ds /= np.linalg.norm(ds, axis=1, keepdims=True)
    z = rng.standard_normal(256)

    _, grad_x_delta, param_grads = field_gradients(net, xs, ds, z)
    assert grad_x_delta.shape == (100, 3)

    # position gradients, probed one point at a time so the FD signal is the
    # full per-point derivative rather than a 1/N share of a mean
    film = net.mapping_forward(torch.as_tensor(z, dtype=torch.float64))
    worst = 0.0
    for i in rng.choice(100, 6, replace=False):
        xt = torch.tensor(xs[i:i + 1], dtype=torch.float64, requires_grad=True)
        out = query_composite(xt, ds[i:i + 1], net, film=film)
        scalar = out.delta.mean() + out.color.sum(-1).mean()
        grad_pt = torch.autograd.grad(scalar, xt)[0].numpy()[0]
        floor = max(1e-3 * np.abs(grad_pt).max(), 1e-9)
        x_mut = xs[i:i + 1].copy()

        def forward(x_mut=x_mut, i=i):
            s, _, _ = field_gradients(net, x_mut, ds[i:i + 1], z)
            return s

        for a in range(3):
            def apply(h, a=a, x_mut=x_mut, i=i):
                x_mut[0, a] = xs[i, a] + h

            def restore(a=a, x_mut=x_mut, i=i):
                x_mut[0, a] = xs[i, a]

            fd = richardson_fd(forward, apply, restore, 1e-5)
            ad = grad_pt[a]
            if max(abs(ad), abs(fd)) > floor:
                worst = max(worst, abs(ad - fd) / max(abs(ad), abs(fd)))
            else:
                assert abs(ad - fd) < 1e-8
    assert worst < 1e-5

    # parameters: largest coordinate of a few representative groups,
    # probed through the full 100-point scalar
    def forward_all():
        s, _, _ = field_gradients(net, xs, ds, z)
        return s

    names = ["parts.0.delta_head.weight", "parts.0.trunk.0.weight", "log_alpha"]
    params = dict(net.named_parameters())
    for name in names:
        flat = params[name].data.view(-1)
        c = int(param_grads[name].view(-1).abs().argmax())
        orig = float(flat[c])

        def apply(h, flat=flat, c=c, orig=orig):
            flat[c] = orig + h

        def restore(flat=flat, c=c, orig=orig):
            flat[c] = orig

        fd = richardson_fd(forward_all, apply, restore, 1e-5)
        ad = float(param_grads[name].view(-1)[c])
        if name == "log_alpha":
            # alpha does not enter the probed scalar (delta + color)
            assert abs(ad) < 1e-12
            continue
        if max(abs(ad), abs(fd)) > 1e-5:
            assert abs(ad - fd) / max(abs(ad), abs(fd)) < 1e-5, name
        else:
            assert abs(ad - fd) < 1e-8, name


def test_extract_surface_sphere():
    template = SphereTemplate([0.0, 0.0, 0.0], 0.5)
    net = StubNet(
        (np.array([-1.0, -1.0, -1.0]), np.array([1.0, 1.0, 1.0])),
        [ConstPart([0.5, 0.5, 0.5], 0.0)],
        template=template,
    )
    verts, faces = extract_surface(net, np.zeros(4), resolution=40)
    radii = np.linalg.norm(verts, axis=1)
    assert len(faces) > 0
    np.testing.assert_allclose(radii.mean(), 0.5, atol=0.02)
    assert radii.std() < 0.02
