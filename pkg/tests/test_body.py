import numpy as np
import pytest

from bodygen.body import (
    BodyModel,
    Pose,
    Shape,
    body_from_dict,
    body_to_dict,
    canonicalize_points,
    deform,
    forward_kinematics,
    inverse_lbs,
    load_body_json,
    make_toy_body,
    rodrigues,
    save_body_json,
    validate_body,
)
from bodygen.errors import DataFormatError

from oracles import compose_chain


def random_pose(model, rng, max_angle):
    aa = rng.uniform(-max_angle, max_angle, (model.num_joints, 3))
    return Pose(aa, np.zeros(3))


def test_toy_body_construction(toy16):
    assert toy16.num_joints == 24
    assert toy16.num_parts == 16
    assert set(np.unique(toy16.vertex_part)) == set(range(16))
    validate_body(toy16)


def test_toy_body_two_parts(toy2):
    assert toy2.num_parts == 2
    np.testing.assert_allclose(toy2.skin_weights.sum(axis=1), 1.0, atol=1e-12)
    validate_body(toy2)


def test_toy_body_minimal_vertex_budget():
    tiny = make_toy_body(2, 8, 0)
    assert tiny.num_parts == 2
    np.testing.assert_allclose(tiny.skin_weights.sum(axis=1), 1.0, atol=1e-12)
    validate_body(tiny)


def test_toy_body_height(toy16):
    assert abs(toy16.height - 1.70) <= 0.01


def test_toy_body_deterministic():
    a = make_toy_body(16, 64, 3)
    b = make_toy_body(16, 64, 3)
    np.testing.assert_array_equal(a.vertices, b.vertices)
    c = make_toy_body(16, 64, 4)
    assert not np.array_equal(a.vertices, c.vertices)


def test_make_toy_body_rejects_bad_args():
    with pytest.raises(ValueError):
        make_toy_body(1, 64, 0)
    with pytest.raises(ValueError):
        make_toy_body(17, 64, 0)
    with pytest.raises(ValueError):
        make_toy_body(16, 4, 0)


def test_pose_rejects_large_angles():
    aa = np.zeros((24, 3))
    aa[3, 0] = np.pi
    with pytest.raises(ValueError):
        Pose(aa, np.zeros(3))


def test_fk_zero_pose_identity(toy16):
    transforms = forward_kinematics(toy16, Pose.rest(24))
    np.testing.assert_allclose(transforms, np.tile(np.eye(4), (24, 1, 1)), atol=1e-12)


def test_fk_root_rotation_oracle(toy16):
    aa = np.zeros((24, 3))
    aa[0, 2] = np.pi / 2
    transforms = forward_kinematics(toy16, Pose(aa, np.zeros(3)))
    root = toy16.joints[0]
    to_origin = np.eye(4)
    to_origin[:3, 3] = -root
    rot = np.eye(4)
    rot[:3, :3] = rodrigues([0.0, 0.0, np.pi / 2])
    back = np.eye(4)
    back[:3, 3] = root
    expected = compose_chain([back, rot, to_origin])
    for k in range(24):
        np.testing.assert_allclose(transforms[k], expected, atol=1e-12)
        got = transforms[k, :3, :3] @ toy16.joints[k] + transforms[k, :3, 3]
        want = expected[:3, :3] @ toy16.joints[k] + expected[:3, 3]
        np.testing.assert_allclose(got, want, atol=1e-12)


def test_fk_child_rotation_leaves_parent(toy16):
    aa = np.zeros((24, 3))
    aa[4, 0] = 0.7  # left knee
    transforms = forward_kinematics(toy16, Pose(aa, np.zeros(3)))
    hip = toy16.joints[1]
    np.testing.assert_allclose(
        transforms[1, :3, :3] @ hip + transforms[1, :3, 3], hip, atol=1e-12
    )
    # the knee joint location itself is also fixed (rotation about it)
    knee = toy16.joints[4]
    np.testing.assert_allclose(
        transforms[4, :3, :3] @ knee + transforms[4, :3, 3], knee, atol=1e-12
    )


def test_deform_identity(toy16):
    posed = deform(toy16, Shape.neutral(2), Pose.rest(24))
    np.testing.assert_allclose(posed.posed_vertices, toy16.vertices, atol=1e-7)


def test_deform_shape_linearity(toy16):
    posed = deform(toy16, Shape(np.array([1.0, 0.0])), Pose.rest(24))
    np.testing.assert_allclose(
        posed.posed_vertices, toy16.vertices + toy16.shape_basis[:, 0, :], atol=1e-9
    )


def test_deform_vertex_transform_consistency(toy16):
    rng = np.random.default_rng(7)
    pose = random_pose(toy16, rng, np.radians(30))
    posed = deform(toy16, Shape(rng.normal(0, 0.5, 2)), pose)
    m = posed.vertex_transforms
    recon = np.einsum("vab,vb->va", m[:, :3, :3], toy16.vertices) + m[:, :3, 3]
    np.testing.assert_allclose(recon, posed.posed_vertices, atol=1e-6)


def test_root_rigid_motion(toy16):
    aa = np.zeros((24, 3))
    aa[0] = [0.3, 0.5, -0.2]
    t = np.array([0.4, -0.1, 0.2])
    posed = deform(toy16, Shape.neutral(2), Pose(aa, t))
    rot = rodrigues(aa[0])
    root = toy16.joints[0]
    expected = (toy16.vertices - root) @ rot.T + root + t
    np.testing.assert_allclose(posed.posed_vertices, expected, atol=1e-9)


def test_lbs_partition_of_unity_single_joint(toy16):
    # all weight on one joint -> exactly that joint's rigid transform
    model = make_toy_body(16, 64, 0)
    model.skin_weights[:] = 0.0
    model.skin_weights[:, 6] = 1.0
    aa = np.zeros((24, 3))
    aa[6] = [0.0, 0.4, 0.0]
    aa[0] = [0.0, 0.0, 0.3]
    posed = deform(model, Shape.neutral(2), Pose(aa, np.zeros(3)))
    transforms = forward_kinematics(model, Pose(aa, np.zeros(3)))
    expected = (
        np.einsum("ab,vb->va", transforms[6, :3, :3], model.vertices)
        + transforms[6, :3, 3]
    )
    np.testing.assert_allclose(posed.posed_vertices, expected, atol=1e-12)


def test_pose_basis_code_path(toy16):
    rng = np.random.default_rng(11)
    model = make_toy_body(16, 64, 0)
    width = 9 * (model.num_joints - 1)
    model.pose_basis = rng.normal(0, 0.01, (len(model.vertices), width, 3))
    validate_body(model)
    # zero pose: feature vector is zero, so no corrective offset
    posed = deform(model, Shape.neutral(2), Pose.rest(24))
    np.testing.assert_allclose(posed.posed_vertices, model.vertices, atol=1e-12)
    # single rotated joint with weights pinned to the root: offset equals
    # basis contraction with (R - I) exactly
    model.skin_weights[:] = 0.0
    model.skin_weights[:, 0] = 1.0
    aa = np.zeros((24, 3))
    aa[5] = [0.2, -0.1, 0.3]
    posed = deform(model, Shape.neutral(2), Pose(aa, np.zeros(3)))
    feature = np.zeros(width)
    feature[9 * 4:9 * 5] = (rodrigues(aa[5]) - np.eye(3)).ravel()
    expected = model.vertices + np.einsum("vpd,p->vd", model.pose_basis, feature)
    np.testing.assert_allclose(posed.posed_vertices, expected, atol=1e-12)


def test_inverse_lbs_exact_at_vertex(toy16):
    rng = np.random.default_rng(7)
    pose = random_pose(toy16, rng, np.radians(25))
    posed = deform(toy16, Shape.neutral(2), pose)
    for vi in (0, 431, 1100):
        got = inverse_lbs(posed, posed.posed_vertices[vi], k_neighbors=1)
        np.testing.assert_allclose(got, toy16.vertices[vi], atol=1e-6)


def test_inverse_lbs_identity_pose(toy16):
    posed = deform(toy16, Shape.neutral(2), Pose.rest(24))
    rng = np.random.default_rng(0)
    pts = rng.uniform([-0.8, 0.0, -0.3], [0.8, 1.7, 0.3], (32, 3))
    for p in pts:
        np.testing.assert_allclose(inverse_lbs(posed, p, 4), p, atol=1e-6)


def test_inverse_lbs_requires_valid_k(toy16):
    posed = deform(toy16, Shape.neutral(2), Pose.rest(24))
    with pytest.raises(ValueError):
        inverse_lbs(posed, np.zeros(3), 0)


def test_inverse_lbs_round_trip_smoke(toy16):
    rng = np.random.default_rng(3)
    height = toy16.height
    hits = 0
    total = 0
    for _ in range(5):
        pose = random_pose(toy16, rng, np.radians(30))
        posed = deform(toy16, Shape.neutral(2), pose)
        idx = rng.choice(len(toy16.vertices), 200, replace=False)
        target = posed.posed_vertices[idx]
        back = canonicalize_points(posed, target, k_neighbors=4)
        err = np.linalg.norm(back - toy16.vertices[idx], axis=1)
        hits += (err <= 1e-2 * height).sum()
        total += len(idx)
    assert hits / total >= 0.95


def test_grid_knn_matches_brute_force(toy16):
    rng = np.random.default_rng(5)
    pose = random_pose(toy16, rng, np.radians(20))
    posed = deform(toy16, Shape.neutral(2), pose)
    verts = posed.posed_vertices
    pts = rng.uniform(verts.min(0) - 0.2, verts.max(0) + 0.2, (1000, 3))
    for k in (1, 4):
        for p in pts[:: max(1, len(pts) // 1000)]:
            idx, dist = posed.spatial_index.query_knn(p, k)
            brute = np.linalg.norm(verts - p, axis=1)
            kth = np.partition(brute, k - 1)[k - 1]
            expected = np.nonzero(brute <= kth)[0]
            assert set(idx) == set(expected), (k, p)


def test_batch_canonicalize_matches_single(toy16):
    rng = np.random.default_rng(9)
    pose = random_pose(toy16, rng, np.radians(25))
    posed = deform(toy16, Shape.neutral(2), pose)
    pts = rng.uniform([-0.8, 0.0, -0.3], [0.8, 1.7, 0.3], (64, 3))
    batch = canonicalize_points(posed, pts, 4)
    single = np.array([inverse_lbs(posed, p, 4) for p in pts])
    np.testing.assert_allclose(batch, single, atol=1e-12)


def test_knn_tie_averaging(toy2):
    # two posed vertices exactly equidistant from the query: both included
    posed = deform(toy2, Shape.neutral(2), Pose.rest(24))
    verts = posed.posed_vertices
    a, b = verts[0], verts[1]
    mid = 0.5 * (a + b)
    idx, dist = posed.spatial_index.query_knn(mid, 1)
    if abs(np.linalg.norm(a - mid) - np.linalg.norm(b - mid)) < 1e-15:
        assert len(idx) >= 2


def test_validate_rejects_bad_weights(toy2):
    broken = make_toy_body(2, 16, 0)
    broken.skin_weights[0, :] *= 0.5
    with pytest.raises(DataFormatError):
        validate_body(broken)


def test_validate_rejects_bad_parents(toy2):
    broken = make_toy_body(2, 16, 0)
    broken.parents = broken.parents.copy()
    broken.parents[1] = 5  # not topologically ordered
    with pytest.raises(DataFormatError):
        validate_body(broken)


def test_body_json_round_trip(tmp_path, toy2):
    path = tmp_path / "body.json"
    save_body_json(toy2, str(path))
    loaded = load_body_json(str(path))
    path2 = tmp_path / "body2.json"
    save_body_json(loaded, str(path2))
    assert path.read_bytes() == path2.read_bytes()
    np.testing.assert_allclose(loaded.vertices, toy2.vertices, rtol=1e-8)


def test_body_json_rejects_length_mismatch(toy2):
    data = body_to_dict(toy2)
    data["vertex_part"] = data["vertex_part"][:-1]
    with pytest.raises(DataFormatError):
        body_from_dict(data)


def test_body_json_rejects_bad_weight_index(toy2):
    data = body_to_dict(toy2)
    data["skin_weights"][0] = [[99, 1.0]]
    with pytest.raises(DataFormatError):
        body_from_dict(data)


def test_load_missing_body(tmp_path):
    with pytest.raises(DataFormatError):
        load_body_json(str(tmp_path / "nope.json"))
