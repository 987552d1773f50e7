"""Tests for image/mask/float-dump/camera/checkpoint/manifest serialization."""

import json

import numpy as np
import pytest
import torch

from exgs import io as xio
from exgs.rasterize import composite_nodes
from exgs.scene import NodeKind
from exgs.synthetic import SyntheticSceneSpec, generate_synthetic_scene, init_scene_graph

torch.set_num_threads(1)


@pytest.fixture(scope="module")
def small_scene():
    spec = SyntheticSceneSpec(path_count=3, img_width=48, img_height=32)
    scene, views = generate_synthetic_scene(spec)
    graph = init_scene_graph(views, spec)
    return spec, scene, views, graph


class TestImages:
    def test_image_roundtrip_quantized(self, tmp_path):
        rng = np.random.default_rng(0)
        img = rng.random((20, 30, 3))
        p = tmp_path / "img.png"
        xio.save_image(p, img)
        back = xio.load_image(p)
        assert back.shape == (20, 30, 3)
        assert np.abs(back - img).max() <= 0.5 / 255 + 1e-9

    def test_mask_roundtrip_exact(self, tmp_path):
        mask = np.random.default_rng(1).random((16, 24)) > 0.5
        p = tmp_path / "mask.png"
        xio.save_mask(p, mask)
        assert np.array_equal(xio.load_mask(p), mask)

    def test_gray_export(self, tmp_path):
        u = np.linspace(0, 1, 64).reshape(8, 8)
        p = tmp_path / "u.png"
        xio.save_gray(p, u)
        with open(p, "rb") as f:
            assert f.read(8) == b"\x89PNG\r\n\x1a\n"


class TestFloatDump:
    def test_roundtrip_lossless(self, tmp_path):
        arr = np.random.default_rng(2).random((13, 29)).astype(np.float32)
        p = tmp_path / "u.f32"
        xio.save_float_dump(p, arr)
        back = xio.load_float_dump(p)
        assert back.dtype == np.float32
        assert np.array_equal(back, arr)

    def test_header_layout(self, tmp_path):
        arr = np.zeros((5, 7), dtype=np.float32)
        p = tmp_path / "u.f32"
        xio.save_float_dump(p, arr)
        raw = p.read_bytes()
        assert raw[:6] == b"EXGSU\x00"
        assert int.from_bytes(raw[6:8], "little") == 7  # width
        assert int.from_bytes(raw[8:10], "little") == 5  # height
        assert raw[10:18] == b"\x00" * 8  # reserved
        assert len(raw) == 18 + 4 * 35

    def test_bad_magic_rejected(self, tmp_path):
        p = tmp_path / "u.f32"
        p.write_bytes(b"NOTEXGS\x00" + b"\x00" * 32)
        with pytest.raises(ValueError):
            xio.load_float_dump(p)

    def test_truncated_payload_rejected(self, tmp_path):
        p = tmp_path / "u.f32"
        xio.save_float_dump(p, np.zeros((4, 4), dtype=np.float32))
        data = p.read_bytes()
        p.write_bytes(data[:-8])
        with pytest.raises(ValueError):
            xio.load_float_dump(p)

    def test_non_2d_rejected(self, tmp_path):
        with pytest.raises(ValueError):
            xio.save_float_dump(tmp_path / "x.f32", np.zeros((2, 2, 2)))


class TestCameras:
    def test_roundtrip(self, tmp_path, small_scene):
        _, _, views, _ = small_scene
        p = tmp_path / "cameras.json"
        xio.save_cameras(p, views)
        back = xio.load_cameras(p)
        assert len(back) == len(views)
        for a, b in zip(views, back):
            assert a.view_id == b.view_id
            assert np.allclose(a.pose, b.pose)
            assert (a.fx, a.fy, a.cx, a.cy) == (b.fx, b.fy, b.cx, b.cy)
            assert (a.width, a.height) == (b.width, b.height)

    def test_malformed_rejected(self, tmp_path):
        p = tmp_path / "cameras.json"
        p.write_text("{not json")
        with pytest.raises(ValueError):
            xio.load_cameras(p)
        p.write_text(json.dumps({"fx": 1}))
        with pytest.raises(ValueError):
            xio.load_cameras(p)
        p.write_text(json.dumps([{"fx": 1.0, "fy": 1.0}]))
        with pytest.raises(ValueError):
            xio.load_cameras(p)


class TestCheckpoint:
    def test_roundtrip_preserves_render(self, tmp_path, small_scene):
        _, _, views, graph = small_scene
        p = tmp_path / "ckpt.zip"
        opt_state = {"positions.0.m": torch.randn(4, 3), "positions.0.v": torch.rand(4, 3)}
        xio.save_checkpoint(
            p, graph, iteration=123, optimizer_state=opt_state, optimizer_step=7,
            extra={"note": "test"},
        )
        graph2, it, opt2, step, extra = xio.load_checkpoint(p)
        assert it == 123 and step == 7 and extra == {"note": "test"}
        assert set(opt2) == set(opt_state)
        for k in opt_state:
            assert torch.allclose(opt2[k], opt_state[k], atol=1e-7)

        with torch.no_grad():
            a = composite_nodes(graph, views[0])
            b = composite_nodes(graph2, views[0])
        assert float((a.color - b.color).abs().max()) < 1e-6
        assert float((a.uncertainty - b.uncertainty).abs().max()) < 1e-6

    def test_version_mismatch_rejected(self, tmp_path, small_scene):
        _, _, _, graph = small_scene
        p = tmp_path / "ckpt.zip"
        xio.save_checkpoint(p, graph)
        import zipfile

        with zipfile.ZipFile(p) as z:
            manifest = json.loads(z.read("manifest.json"))
            blobs = {n: z.read(n) for n in z.namelist() if n != "manifest.json"}
        manifest["version"] = 999
        with zipfile.ZipFile(p, "w") as z:
            z.writestr("manifest.json", json.dumps(manifest))
            for n, b in blobs.items():
                z.writestr(n, b)
        with pytest.raises(xio.CheckpointError):
            xio.load_checkpoint(p)

    def test_missing_file_rejected(self, tmp_path):
        with pytest.raises(xio.CheckpointError):
            xio.load_checkpoint(tmp_path / "nope.zip")

    def test_node_structure_preserved(self, tmp_path, small_scene):
        _, _, _, graph = small_scene
        p = tmp_path / "ckpt.zip"
        xio.save_checkpoint(p, graph)
        graph2, *_ = xio.load_checkpoint(p)
        kinds = [k for k, _ in graph2.nodes]
        assert kinds == [k for k, _ in graph.nodes]
        road, road2 = graph.road, graph2.road
        assert len(road2.gaussians) == len(road.gaussians)
        assert road2.sdf.extent == road.sdf.extent
        for name, p1 in road.sdf.parameters().items():
            assert torch.allclose(
                road2.sdf.parameters()[name], p1, atol=1e-6
            ), name
        ffg = graph.node(NodeKind.FAR_FIELD)
        ffg2 = graph2.node(NodeKind.FAR_FIELD)
        assert torch.allclose(ffg2.anchor, ffg.anchor, atol=1e-6)
        assert torch.allclose(ffg2.log_factors, ffg.log_factors, atol=1e-6)


class TestManifestAndMetrics:
    def test_manifest_write(self, tmp_path):
        m = xio.RunManifest(
            command="train",
            config_path="cfg.json",
            seed=3,
            out_dir=str(tmp_path),
            git_describe=xio.git_describe(),
            started_at=xio.utc_now(),
        )
        p = tmp_path / "manifest.json"
        m.write(p)
        data = json.loads(p.read_text())
        assert data["status"] == "running"
        m.status = "completed"
        m.ended_at = xio.utc_now()
        m.write(p)
        assert json.loads(p.read_text())["status"] == "completed"

    def test_metrics_append_and_read(self, tmp_path):
        p = tmp_path / "metrics.csv"
        xio.append_metrics(p, [{"iteration": 1, "phase": "A", "loss_total": 0.5}])
        xio.append_metrics(p, [{"iteration": 2, "phase": "A", "loss_total": 0.4, "psnr": 21.0}])
        rows = xio.read_metrics(p)
        assert len(rows) == 2
        assert rows[0]["iteration"] == "1"
        assert rows[1]["psnr"] == "21.0"
