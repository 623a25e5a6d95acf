import numpy as np
import pytest

from conftest import random_rotation
from liftcore.core import Intrinsics, PointMap, Pose, compose, inverse, rot_z, rotation_angle
from liftcore.matching import (
    DegenerateGeometry,
    Edge,
    MatchGraph,
    PairObservation,
    RelativePose,
    build_match_graph,
    estimate_focal,
    focal_objective,
    register,
    relative_pose,
    weighted_umeyama,
)
from liftcore.trajectory import plan_articulated


def pinhole_pointmap(rng, f, size=64, noise=0.0):
    K = Intrinsics(f, size, size)
    depth = rng.uniform(2.0, 6.0, (size, size))
    pts = K.unproject(depth)
    if noise:
        pts = pts * (1 + noise * rng.normal(size=pts.shape))
    return PointMap(pts, np.ones((size, size)))


def as_pm(points):
    p = np.asarray(points, dtype=np.float64).reshape(1, -1, 3)
    return PointMap(p, np.ones(p.shape[:2]))


@pytest.mark.parametrize("f", [200.0, 350.0, 800.0])
def test_focal_noiseless(rng, f):
    est = estimate_focal(pinhole_pointmap(rng, f)).focal
    assert abs(est - f) / f < 1e-3


@pytest.mark.parametrize("f", [200.0, 350.0, 800.0])
def test_focal_noisy(rng, f):
    est = estimate_focal(pinhole_pointmap(rng, f, noise=0.01)).focal
    assert abs(est - f) / f < 0.02


def test_focal_single_row_weighted_median(rng):
    size = 32
    pts = np.zeros((size, size, 3))
    conf = np.zeros((size, size))
    row = size // 2  # v_y = 0 on the center row, so each term is |v_x| |u_x/v_x - f|
    ii = np.arange(size)
    z = rng.uniform(1, 3, size)
    f_true = rng.uniform(80, 120, size)
    u = ii - size / 2.0
    pts[row, :, 0] = u * z / f_true
    pts[row, :, 2] = z
    conf[row] = rng.uniform(0.5, 2, size)
    conf[row, size // 2] = 0.0  # the axis pixel carries no information
    pm = PointMap(pts, conf)
    est = estimate_focal(pm, iters=5000, tol=0).focal
    grid = np.linspace(60, 140, 80001)
    brute = grid[np.argmin([focal_objective(pm, g) for g in grid])]
    assert focal_objective(pm, est) <= focal_objective(pm, brute) + 1e-9
    assert abs(est - brute) < 2e-3


def test_focal_degenerate():
    pts = np.zeros((4, 4, 3))
    pts[..., 2] = 1.0
    with pytest.raises(DegenerateGeometry, match="degenerate geometry"):
        estimate_focal(PointMap(pts, np.ones((4, 4))))


def test_umeyama_identity(rng):
    x = rng.normal(size=(50, 3))
    r = relative_pose(PairObservation("a", "b", as_pm(x), as_pm(x)))
    assert np.abs(r.rotation - np.eye(3)).max() < 1e-12
    assert np.abs(r.translation).max() < 1e-12
    assert r.scale == pytest.approx(1.0, abs=1e-12) and r.residual < 1e-12


def test_umeyama_known_similarity(rng):
    x = rng.normal(size=(100, 3))
    R, T, s = rot_z(np.deg2rad(30)), np.array([1.0, 2.0, 3.0]), 2.0
    y = s * (x @ R.T + T)
    r = relative_pose(PairObservation("a", "b", as_pm(x), as_pm(y)))
    assert np.abs(r.rotation - R).max() < 1e-9
    assert np.abs(r.translation - T).max() < 1e-9
    assert abs(r.scale - s) < 1e-9


def test_umeyama_zero_weight_outliers(rng):
    x = rng.normal(size=(100, 3))
    R, T, s = random_rotation(rng), rng.normal(size=3), 1.7
    y = s * (x @ R.T + T)
    conf = np.ones(100)
    y[::2] = rng.normal(size=(50, 3)) * 100
    conf[::2] = 0.0
    pm_x = PointMap(x.reshape(1, -1, 3), np.ones((1, 100)))
    pm_y = PointMap(y.reshape(1, -1, 3), conf.reshape(1, -1))
    r = relative_pose(PairObservation("a", "b", pm_x, pm_y))
    assert np.abs(r.rotation - R).max() < 1e-9 and np.abs(r.translation - T).max() < 1e-9 and abs(r.scale - s) < 1e-9


def test_umeyama_reflection_fix(rng):
    x = rng.normal(size=(30, 3))
    y = x * np.array([1.0, 1.0, -1.0])  # mirror image: best proper rotation, never a reflection
    s, R, t = weighted_umeyama(x, y, np.ones(30))
    assert np.linalg.det(R) == pytest.approx(1.0)


def test_umeyama_degenerate(rng):
    line = np.outer(rng.normal(size=10), [1.0, 2.0, 3.0])
    with pytest.raises(DegenerateGeometry, match="degenerate geometry"):
        weighted_umeyama(line, line, np.ones(10))
    with pytest.raises(DegenerateGeometry):
        weighted_umeyama(np.eye(3)[:2], np.eye(3)[:2], np.ones(2))


def test_relative_pose_self_inverse(rng):
    x = rng.normal(size=(80, 3))
    R, T, s = random_rotation(rng), rng.normal(size=3), 0.6
    y = s * (x @ R.T + T)
    ab = relative_pose(PairObservation("a", "b", as_pm(x), as_pm(y)))
    ba = relative_pose(PairObservation("b", "a", as_pm(y), as_pm(x)))
    assert np.abs(ab.matrix() @ ba.matrix() - np.eye(4)).max() < 1e-8


def test_relative_pose_confidence_scale_invariance(rng):
    x = rng.normal(size=(60, 3))
    y = 1.3 * (x @ random_rotation(rng).T + 0.2) + rng.normal(size=(60, 3)) * 0.05
    w = rng.uniform(0.1, 1, 60)
    a = relative_pose(PairObservation("a", "b", PointMap(x.reshape(1, -1, 3), w.reshape(1, -1)), as_pm(y)))
    b = relative_pose(PairObservation("a", "b", PointMap(x.reshape(1, -1, 3), 7.5 * w.reshape(1, -1)), as_pm(y)))
    assert np.abs(a.rotation - b.rotation).max() < 1e-10
    assert np.abs(a.translation - b.translation).max() < 1e-10
    assert abs(a.scale - b.scale) < 1e-10


def test_relative_pose_dict_roundtrip(rng):
    r = RelativePose(random_rotation(rng), rng.normal(size=3), 1.5, 0.1)
    back = RelativePose.from_dict(r.to_dict())
    assert np.array_equal(back.matrix(), r.matrix()) and back.residual == r.residual


def test_match_graph_edges():
    plan = plan_articulated(16, 4)
    g = build_match_graph(plan.frames)
    assert len(g.tree_edges) == 108 and g.root == "input_000"
    small = build_match_graph(plan_articulated(2, 2).frames)
    assert len(small.edges) == 4
    extra = build_match_graph(plan_articulated(3, 4).frames, extra_edges=3)
    assert len(extra.extra_edges) == 3
    assert all(e.extra for e in extra.extra_edges)
    assert MatchGraph.from_dict(extra.to_dict()).to_dict() == extra.to_dict()


def test_match_graph_single_clip_path():
    from dataclasses import dataclass

    @dataclass
    class F:
        frame_id: str
        parent_id: object
        clip_id: str = "c"

    frames = [F("f0", None)] + [F(f"f{k}", f"f{k-1}") for k in range(1, 5)]
    g = build_match_graph(frames)
    assert [(e.ref, e.src) for e in g.edges] == [(f"f{k-1}", f"f{k}") for k in range(1, 5)]


def test_match_graph_errors():
    from dataclasses import dataclass

    @dataclass
    class F:
        frame_id: str
        parent_id: object
        clip_id: str = "c"

    with pytest.raises(ValueError, match="disconnected"):
        build_match_graph([F("a", None), F("b", "zzz")])
    with pytest.raises(ValueError, match="root"):
        build_match_graph([F("a", None), F("b", None)])
    with pytest.raises(ValueError, match="disconnected"):
        build_match_graph([F("a", None), F("b", "c"), F("c", "b")])


def _chain_scene(rng, n=4, size=12):
    """Exact pointmaps for a chain of random similarity-related cameras."""
    K = Intrinsics(20.0, size, size)
    poses = [Pose.identity()]
    for _ in range(n - 1):
        poses.append(compose(poses[-1], Pose(random_rotation(rng) @ np.eye(3), rng.normal(size=3) * 0.3)))
    world = rng.uniform(-1, 1, (size, size, 3)) + [0, 0, 6]
    pms = {}
    for k, p in enumerate(poses):
        pts = p.apply_inverse(world.reshape(-1, 3)).reshape(size, size, 3)
        pms[f"f{k}"] = PointMap(pts, np.ones((size, size)))
    return K, poses, pms


def test_register_chain_matches_matrix_oracle(rng):
    K, poses, pms = _chain_scene(rng)
    nodes = [f"f{k}" for k in range(4)]
    edges = [Edge(f"f{k-1}", f"f{k}") for k in range(1, 4)]
    rel = {}
    for e in edges:
        pm_src = pms[e.src]
        ref_pose = poses[int(e.ref[1:])]
        src_pose = poses[int(e.src[1:])]
        in_ref = compose(inverse(ref_pose), src_pose).apply(pm_src.points.reshape(-1, 3)).reshape(pm_src.points.shape)
        rel[e.key] = relative_pose(PairObservation(e.ref, e.src, pm_src, PointMap(in_ref, pm_src.confidence)))
    scene = register(MatchGraph(nodes, edges, "f0"), rel, pms, K)
    oracle = np.eye(4)
    for k in range(1, 4):
        oracle = oracle @ rel[f"f{k-1}__f{k}"].matrix()
        assert np.abs(scene.poses[f"f{k}"].matrix() - poses[k].matrix()).max() < 1e-9
        sim = scene.poses[f"f{k}"].matrix()
        sim[:3, :3] *= scene.scales[f"f{k}"]
        assert np.abs(sim - oracle).max() < 1e-12
    assert len(scene.points) == sum(int(p.valid.sum()) for p in pms.values())
    assert set(np.unique(scene.source)) <= set(range(4))


def test_register_identity_path():
    pm = PointMap(np.random.default_rng(0).normal(size=(3, 3, 3)) + [0, 0, 5], np.ones((3, 3)))
    nodes = ["a", "b", "c"]
    edges = [Edge("a", "b"), Edge("b", "c")]
    ident = RelativePose(np.eye(3), np.zeros(3), 1.0)
    scene = register(MatchGraph(nodes, edges, "a"), {e.key: ident for e in edges}, {n: pm for n in nodes}, Intrinsics(5, 3, 3))
    for n in nodes:
        assert np.array_equal(scene.poses[n].matrix(), np.eye(4)) and scene.scales[n] == 1.0


def test_register_refinement_keeps_exact_poses(rng):
    K, poses, pms = _chain_scene(rng, n=3)
    nodes = ["f0", "f1", "f2"]
    edges = [Edge("f0", "f1"), Edge("f1", "f2"), Edge("f0", "f2", extra=True)]
    rel, obs = {}, {}
    for e in edges:
        src = pms[e.src]
        in_ref = compose(inverse(poses[int(e.ref[1:])]), poses[int(e.src[1:])]).apply(src.points.reshape(-1, 3)).reshape(src.points.shape)
        obs[e.key] = PairObservation(e.ref, e.src, src, PointMap(in_ref, src.confidence))
        rel[e.key] = relative_pose(obs[e.key])
    scene = register(MatchGraph(nodes, edges, "f0"), rel, pms, K, observations=obs, refine_iters=400)
    for k in range(3):
        assert np.abs(scene.poses[f"f{k}"].matrix() - poses[k].matrix()).max() < 1e-9


def test_register_refinement_reduces_loop_error(rng):
    K, poses, pms = _chain_scene(rng, n=3)
    nodes = ["f0", "f1", "f2"]
    edges = [Edge("f0", "f1"), Edge("f1", "f2"), Edge("f0", "f2", extra=True)]
    rel, obs = {}, {}
    for e in edges:
        src = pms[e.src]
        in_ref = compose(inverse(poses[int(e.ref[1:])]), poses[int(e.src[1:])]).apply(src.points.reshape(-1, 3)).reshape(src.points.shape)
        obs[e.key] = PairObservation(e.ref, e.src, src, PointMap(in_ref, src.confidence))
        rel[e.key] = relative_pose(obs[e.key])
    # corrupt one tree edge; the loop-closing edge lets refinement pull it back
    bad = rel["f0__f1"]
    rel["f0__f1"] = RelativePose(bad.rotation @ rot_z(0.05), bad.translation + 0.05, bad.scale * 1.02)
    plain = register(MatchGraph(nodes, edges, "f0"), rel, pms, K)
    refined = register(MatchGraph(nodes, edges, "f0"), rel, pms, K, observations=obs, refine_iters=400)
    err = lambda s: max(rotation_angle(s.poses[f"f{k}"].rotation.T @ poses[k].rotation) for k in (1, 2))  # noqa: E731
    assert err(plain) > 0.04 and err(refined) < 1e-5


def test_register_errors():
    pm = PointMap(np.ones((2, 2, 3)), np.ones((2, 2)))
    ident = RelativePose(np.eye(3), np.zeros(3), 1.0)
    with pytest.raises(ValueError, match="missing relative pose"):
        register(MatchGraph(["a", "b"], [Edge("a", "b")], "a"), {}, {"a": pm, "b": pm}, Intrinsics(1, 2, 2))
    with pytest.raises(ValueError, match="inconsistent edge endpoints|outside"):
        register(MatchGraph(["a", "b"], [Edge("a", "x")], "a"), {"a__x": ident}, {"a": pm, "b": pm}, Intrinsics(1, 2, 2))
    with pytest.raises(ValueError, match="inconsistent edge endpoints"):
        register(MatchGraph(["a", "b", "c"], [Edge("a", "b")], "a"), {"a__b": ident}, {"a": pm, "b": pm, "c": pm}, Intrinsics(1, 2, 2))
