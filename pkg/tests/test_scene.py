"""Scene-graph domain types and the procedural synthetic-scene generator."""

import numpy as np
import pytest
import torch

from exgs.scene import (
    WORLD_UP,
    CameraView,
    GaussianCollection,
    GaussianPrimitive,
    NodeKind,
    RoadNode,
    SceneGraph,
    SkyModel,
    lateral_shift,
)
from exgs.synthetic import (
    AnalyticScene,
    Billboard,
    SceneSpecError,
    SyntheticSceneSpec,
    generate_synthetic_scene,
    init_scene_graph,
    opposite_probe,
)


@pytest.fixture(scope="module")
def default_scene():
    spec = SyntheticSceneSpec()
    scene, views = generate_synthetic_scene(spec)
    return spec, scene, views


# -- SyntheticSceneSpec validation -------------------------------------------


@pytest.mark.parametrize(
    "kwargs, field_name",
    [
        (dict(road_half_width=0.0), "road_half_width"),
        (dict(path_count=0), "path_count"),
        (dict(rsg_pitch=-1.0), "rsg_pitch"),
        (dict(img_width=4), "img_width"),
        (dict(fx=-10.0), "fx"),
        (dict(billboards=[Billboard(14.0, 5.0), Billboard(5.0, 5.0)]), "billboards[1].distance"),
        (dict(billboards=[Billboard(25000.0, 5.0)]), "billboards[0].distance"),
        (dict(billboards=[Billboard(15.0, -1.0)]), "billboards[0].size"),
    ],
)
def test_spec_validation_names_offending_field(kwargs, field_name):
    with pytest.raises(SceneSpecError) as err:
        SyntheticSceneSpec(**kwargs)
    assert err.value.field_name == field_name
    assert field_name in str(err.value)


# -- generation ---------------------------------------------------------------


def test_generation_deterministic_bit_identical():
    a_scene, a_views = generate_synthetic_scene(SyntheticSceneSpec(seed=5))
    b_scene, b_views = generate_synthetic_scene(SyntheticSceneSpec(seed=5))
    assert len(a_views) == len(b_views) == 24
    for va, vb in zip(a_views, b_views):
        assert np.array_equal(va.pose, vb.pose)
        assert np.array_equal(va.image, vb.image)
        assert np.array_equal(va.road_mask, vb.road_mask)
        assert np.array_equal(va.sky_mask, vb.sky_mask)
    c_views = generate_synthetic_scene(SyntheticSceneSpec(seed=6))[1]
    assert not np.array_equal(a_views[0].image, c_views[0].image)


def test_every_pixel_covered_by_exactly_one_class(default_scene):
    _, scene, views = default_scene
    for view in views[:4]:
        _, kind, _ = scene.cast(view.center, view.pixel_rays())
        road = kind == AnalyticScene.ROAD
        board = kind == AnalyticScene.BILLBOARD
        sky = kind == AnalyticScene.SKY
        assert np.array_equal(road.astype(int) + board.astype(int) + sky.astype(int),
                              np.ones_like(kind, dtype=int))
        assert np.array_equal(view.road_mask, road)
        assert np.array_equal(view.sky_mask, sky)
        assert not np.logical_and(view.road_mask, view.sky_mask).any()
    # the default scene exercises all three classes
    v = views[0]
    assert v.road_mask.sum() > 0 and v.sky_mask.sum() > 0
    assert (~(v.road_mask | v.sky_mask)).sum() > 0


def test_road_mask_matches_independent_ray_plane_oracle(default_scene):
    spec, _, views = default_scene
    view = views[3]
    rays = view.pixel_rays().reshape(-1, 3)
    c = view.center
    # independent flat-plane intersection (default grade = 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        t = -c[2] / rays[:, 2]
    p = c[None, :] + t[:, None] * rays
    expect = (
        np.isfinite(t)
        & (t > 0)
        & (p[:, 0] >= 0.0)
        & (p[:, 0] <= spec.road_length)
        & (np.abs(p[:, 1]) <= spec.road_half_width)
    )
    # a billboard can occlude the road; those pixels are not road in the mask
    board = ~(view.road_mask | view.sky_mask)
    got = view.road_mask.reshape(-1)
    expect = expect & ~board.reshape(-1)
    assert np.array_equal(got, expect)


def test_billboard_apparent_height_20px():
    spec = SyntheticSceneSpec(
        billboards=[Billboard(500.0, 10.0, 0, lateral=0.0)],
        fx=1000.0,
        img_width=256,
        img_height=192,
        path_count=1,
        path_length=0.0,
    )
    scene, views = generate_synthetic_scene(spec)
    view = views[0]
    board = ~(view.road_mask | view.sky_mask)
    column = board[:, 128]
    height_px = int(column.sum())
    assert abs(height_px - 20) <= 1


def test_camera_axes_follow_convention(default_scene):
    _, _, views = default_scene
    r = views[0].rotation
    np.testing.assert_allclose(r[:, 0], [0, -1, 0], atol=1e-12)  # right
    np.testing.assert_allclose(r[:, 1], [0, 0, -1], atol=1e-12)  # down
    np.testing.assert_allclose(r[:, 2], [1, 0, 0], atol=1e-12)  # forward
    assert views[0].center[2] == pytest.approx(1.6)


def test_pixel_rays_unit_and_centered(default_scene):
    _, _, views = default_scene
    view = views[0]
    rays = view.pixel_rays()
    assert rays.shape == (view.height, view.width, 3)
    np.testing.assert_allclose(np.linalg.norm(rays, axis=-1), 1.0, atol=1e-12)
    # the ray through the principal point is the forward axis
    center_ray = rays[view.height // 2, view.width // 2]
    forward = view.rotation[:, 2]
    assert center_ray @ forward > 0.999


# -- lateral_shift --------------------------------------------------------------


def test_lateral_shift_zero_is_identity(default_scene):
    _, _, views = default_scene
    out = lateral_shift(views[0], 0.0)
    assert np.array_equal(out.pose, views[0].pose)
    assert out.is_extrapolated is False


def test_lateral_shift_exact_displacement(default_scene):
    _, _, views = default_scene
    for offset in (1.5, 3.0, -3.0):
        out = lateral_shift(views[2], offset)
        assert np.linalg.norm(out.center - views[2].center) == pytest.approx(abs(offset), abs=1e-12)
        assert out.is_extrapolated is True
        assert out.image is None and out.road_mask is None and out.sky_mask is None
        assert out.view_id.endswith(f"shift{offset:+g}")
        # ground-projected lateral axis: no vertical motion
        assert out.center[2] == pytest.approx(views[2].center[2], abs=1e-12)


def test_lateral_shift_round_trip(default_scene):
    _, _, views = default_scene
    out = lateral_shift(lateral_shift(views[1], 1.5), -1.5)
    assert np.linalg.norm(out.center - views[1].center) < 1e-9


def test_lateral_shift_preserves_rotation(default_scene):
    _, _, views = default_scene
    out = lateral_shift(views[1], 3.0)
    assert np.linalg.norm(out.rotation - views[1].rotation) < 1e-12
    assert out.fx == views[1].fx and out.cx == views[1].cx


def test_lateral_shift_limit():
    spec = SyntheticSceneSpec(path_count=1)
    _, views = generate_synthetic_scene(spec)
    with pytest.raises(ValueError):
        lateral_shift(views[0], 10.5)


def test_opposite_probe_mirrors_pose(default_scene):
    _, _, views = default_scene
    pivot = np.array([10.0, 0.0, 1.6])
    probe = opposite_probe(views[0], pivot)
    flip = np.diag([-1.0, -1.0, 1.0])
    np.testing.assert_allclose(probe.center, pivot + flip @ (views[0].center - pivot), atol=1e-12)
    # forward axis flipped in the ground plane, still a proper rotation
    np.testing.assert_allclose(probe.rotation[:, 2], flip @ views[0].rotation[:, 2], atol=1e-12)
    assert np.linalg.det(probe.rotation) == pytest.approx(1.0)
    assert probe.is_extrapolated is True


# -- domain-type invariants -----------------------------------------------------


def test_camera_view_validation():
    with pytest.raises(ValueError):
        CameraView(fx=0.0, fy=1.0, cx=0, cy=0, pose=np.eye(4), width=8, height=8)
    with pytest.raises(ValueError):
        CameraView(
            fx=1.0, fy=1.0, cx=0, cy=0, pose=np.eye(4), width=2, height=2,
            image=np.full((2, 2, 3), 1.5),
        )


def test_world_to_camera_inverts_pose(default_scene):
    _, _, views = default_scene
    view = views[5]
    np.testing.assert_allclose(view.world_to_camera @ view.pose, np.eye(4), atol=1e-12)


def test_gaussian_primitive_scale_dims_and_quat():
    with pytest.raises(ValueError):
        GaussianPrimitive(
            position=np.zeros(3), log_scales=np.zeros(3), rotation=[1, 0, 0, 0],
            opacity_logit=0.0, color_sh=np.zeros((3, 1)), uncert_sh=np.ones(1),
            node_tag=NodeKind.ROAD,
        )
    with pytest.raises(ValueError):
        GaussianPrimitive(
            position=np.zeros(3), log_scales=np.zeros(2), rotation=[1, 0, 0, 0],
            opacity_logit=0.0, color_sh=np.zeros((3, 1)), uncert_sh=np.ones(1),
        )
    prim = GaussianPrimitive(
        position=np.zeros(3), log_scales=np.zeros(3), rotation=[2.0, 0, 0, 0],
        opacity_logit=1.3, color_sh=np.zeros((3, 4)), uncert_sh=np.ones(9),
    )
    assert np.linalg.norm(prim.rotation) == pytest.approx(1.0, abs=1e-12)
    assert 0.0 < prim.opacity < 1.0


def test_collection_roundtrip_and_dtype():
    prims = [
        GaussianPrimitive(
            position=np.array([i, 0.0, 1.0]), log_scales=np.full(3, -1.0),
            rotation=[1, 0, 0, 0], opacity_logit=0.5,
            color_sh=np.full((3, 4), 0.1 * i), uncert_sh=np.eye(9)[0],
            log_factor=0.25 * i,
        )
        for i in range(3)
    ]
    col = GaussianCollection.from_primitives(prims, dtype=torch.float64)
    assert len(col) == 3 and col.dtype == torch.float64
    back = col.primitive(1)
    np.testing.assert_allclose(back.position, prims[1].position)
    assert back.log_factor == pytest.approx(0.25)
    col32 = col.to(torch.float32)
    assert col32.dtype == torch.float32
    np.testing.assert_allclose(
        col32.positions.numpy(), col.positions.numpy(), atol=1e-6
    )
    assert torch.allclose(col.opacities, torch.sigmoid(col.opacity_logits))


def test_collection_rejects_bad_input():
    with pytest.raises(ValueError):
        GaussianCollection.from_primitives([])
    road = GaussianPrimitive(
        position=np.zeros(3), log_scales=np.zeros(2), rotation=[1, 0, 0, 0],
        opacity_logit=0.0, color_sh=np.zeros((3, 1)), uncert_sh=np.ones(1),
        node_tag=NodeKind.ROAD,
    )
    other = GaussianPrimitive(
        position=np.zeros(3), log_scales=np.zeros(3), rotation=[1, 0, 0, 0],
        opacity_logit=0.0, color_sh=np.zeros((3, 1)), uncert_sh=np.ones(1),
    )
    with pytest.raises(ValueError):
        GaussianCollection.from_primitives([road, other])
    with pytest.raises(ValueError):
        GaussianCollection(
            NodeKind.BACKGROUND, np.zeros((1, 3)), np.zeros((1, 3)),
            np.zeros((1, 4)), np.zeros(1), np.zeros((1, 3, 1)), np.ones((1, 1)),
        )


def test_sky_model_shapes():
    sky = SkyModel(np.zeros((3, 9)))
    assert sky.degree == 2
    assert sky.uncert_sh.shape == (16,) and float(sky.uncert_sh[0]) == 1.0
    with pytest.raises(ValueError):
        SkyModel(np.zeros((3, 5)))
    with pytest.raises(ValueError):
        SkyModel(np.zeros((3, 9)), uncert_sh=np.zeros(7))
    sky64 = sky.to(torch.float64)
    assert sky64.color_sh.dtype == torch.float64


def test_scene_graph_node_invariants():
    def road_node():
        col = GaussianCollection(
            NodeKind.ROAD, np.zeros((1, 3)), np.zeros((1, 2)), [[1, 0, 0, 0]],
            np.zeros(1), np.zeros((1, 3, 1)), np.ones((1, 1)),
        )
        return RoadNode(sdf=None, gaussians=col)

    sky = SkyModel(np.zeros((3, 1)))
    graph = SceneGraph([(NodeKind.ROAD, road_node()), (NodeKind.SKY, sky)])
    assert isinstance(graph.road, RoadNode)
    assert graph.sky is sky
    with pytest.raises(ValueError):
        SceneGraph([(NodeKind.SKY, sky)])
    with pytest.raises(ValueError):
        SceneGraph([
            (NodeKind.ROAD, road_node()), (NodeKind.ROAD, road_node()), (NodeKind.SKY, sky),
        ])
    with pytest.raises(ValueError):
        SceneGraph([(NodeKind.ROAD, road_node()), (NodeKind.SKY, sky)], world_up=[0, 0, 2])
    with pytest.raises(KeyError):
        graph.node(NodeKind.BACKGROUND)


def test_road_node_requires_road_collection():
    col = GaussianCollection(
        NodeKind.BACKGROUND, np.zeros((1, 3)), np.zeros((1, 3)), [[1, 0, 0, 0]],
        np.zeros(1), np.zeros((1, 3, 1)), np.ones((1, 1)),
    )
    with pytest.raises(ValueError):
        RoadNode(sdf=None, gaussians=col)


# -- init_scene_graph -----------------------------------------------------------


def test_init_graph_structure(default_scene):
    spec, _, views = default_scene
    graph = init_scene_graph(views, spec)
    kinds = sorted(k.value for k, _ in graph.nodes)
    assert kinds == ["background", "far_field", "road", "sky"]
    ffg = graph.node(NodeKind.FAR_FIELD)
    assert torch.all(ffg.log_factors == 0)
    # 40 m x 8 m road at 0.25 m pitch -> 160 x 32 grid
    assert len(graph.road.gaussians) == 5120
    assert graph.road.gaussians.log_scales.shape[1] == 2
    np.testing.assert_allclose(ffg.anchor.numpy(), views[0].center, atol=1e-6)
    # far-field bootstrap ring: 50 m from the anchor
    dist = np.linalg.norm(ffg.positions.numpy() - views[0].center[None], axis=1)
    np.testing.assert_allclose(dist, 50.0, atol=1e-4)


def test_init_graph_deterministic(default_scene):
    spec, _, views = default_scene
    g1 = init_scene_graph(views, spec)
    g2 = init_scene_graph(views, spec)
    for c1, c2 in zip(g1.gaussian_nodes(), g2.gaussian_nodes()):
        for name, t1 in c1.tensors().items():
            assert torch.equal(t1, c2.tensors()[name]), name
    assert torch.equal(g1.sky.color_sh, g2.sky.color_sh)


def test_init_graph_requires_two_views(default_scene):
    spec, _, views = default_scene
    with pytest.raises(ValueError):
        init_scene_graph(views[:1], spec)
