"""File formats: images, masks, float dumps, checkpoints, cameras, manifests.

Everything here is deterministic and explicit about byte order; all float
payloads are little-endian float32, row-major.
"""

from __future__ import annotations

import csv
import io as _io
import json
import struct
import subprocess
import zipfile
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch
from PIL import Image

from .road import HeightFieldSDF
from .scene import CameraView, GaussianCollection, NodeKind, RoadNode, SceneGraph, SkyModel

FLOAT_DUMP_MAGIC = b"EXGSU\x00"
# header: magic (6) + u16 width + u16 height + 2 reserved u32, little-endian
FLOAT_DUMP_HEADER = struct.Struct("<6sHHII")
CHECKPOINT_VERSION = 1

GAUSSIAN_TENSORS = (
    "positions",
    "log_scales",
    "rotations",
    "opacity_logits",
    "color_sh",
    "uncert_sh",
    "log_factors",
)


class CheckpointError(ValueError):
    """Raised for unreadable, corrupt, or version-mismatched checkpoints."""


# ---------------------------------------------------------------------------
# images and masks
# ---------------------------------------------------------------------------


def save_image(path, image) -> None:
    """Write an (H, W, 3) float image in [0, 1] as an 8-bit PNG."""
    arr = np.asarray(_detach(image), dtype=np.float64)
    if arr.ndim == 2:
        arr = np.repeat(arr[:, :, None], 3, axis=2)
    data = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(data, mode="RGB").save(str(path))


def load_image(path) -> np.ndarray:
    """Read a PNG into an (H, W, 3) float64 image in [0, 1]."""
    with Image.open(str(path)) as img:
        return np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0


def save_mask(path, mask) -> None:
    """Write a boolean (H, W) mask as an 8-bit PNG with values {0, 255}."""
    data = np.where(np.asarray(_detach(mask), dtype=bool), 255, 0).astype(np.uint8)
    Image.fromarray(data, mode="L").save(str(path))


def load_mask(path) -> np.ndarray:
    with Image.open(str(path)) as img:
        return np.asarray(img.convert("L")) > 127


def save_gray(path, image) -> None:
    """Write an (H, W) float image in [0, 1] as an 8-bit grayscale PNG."""
    arr = np.asarray(_detach(image), dtype=np.float64)
    data = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(data, mode="L").save(str(path))


def _detach(x):
    return x.detach().cpu().numpy() if isinstance(x, torch.Tensor) else x


# ---------------------------------------------------------------------------
# lossless float dump (uncertainty export)
# ---------------------------------------------------------------------------


def save_float_dump(path, array) -> None:
    """Lossless 2-D float32 dump with a magic-tagged header.

    Layout: magic "EXGSU\\0", u16 width, u16 height, two reserved u32 (zero),
    then height*width little-endian float32 values, row-major.
    """
    arr = np.ascontiguousarray(np.asarray(_detach(array), dtype="<f4"))
    if arr.ndim != 2:
        raise ValueError(f"float dump expects a 2-D array, got shape {arr.shape}")
    h, w = arr.shape
    if w >= 1 << 16 or h >= 1 << 16:
        raise ValueError("float dump dimensions exceed u16 range")
    with open(path, "wb") as f:
        f.write(FLOAT_DUMP_HEADER.pack(FLOAT_DUMP_MAGIC, w, h, 0, 0))
        f.write(arr.tobytes())


def load_float_dump(path) -> np.ndarray:
    with open(path, "rb") as f:
        header = f.read(FLOAT_DUMP_HEADER.size)
        if len(header) != FLOAT_DUMP_HEADER.size:
            raise ValueError("float dump truncated before header end")
        magic, w, h, _, _ = FLOAT_DUMP_HEADER.unpack(header)
        if magic != FLOAT_DUMP_MAGIC:
            raise ValueError(f"bad float dump magic {magic!r}")
        payload = f.read()
    expected = 4 * w * h
    if len(payload) != expected:
        raise ValueError(f"float dump payload is {len(payload)} bytes, expected {expected}")
    return np.frombuffer(payload, dtype="<f4").reshape(h, w).copy()


# ---------------------------------------------------------------------------
# camera JSON
# ---------------------------------------------------------------------------


def camera_to_dict(view: CameraView) -> dict:
    return {
        "view_id": view.view_id,
        "fx": view.fx,
        "fy": view.fy,
        "cx": view.cx,
        "cy": view.cy,
        "width": view.width,
        "height": view.height,
        "pose": [float(x) for x in np.asarray(view.pose, dtype=np.float64).reshape(-1)],
        "timestamp": view.timestamp,
        "is_extrapolated": bool(view.is_extrapolated),
    }


def camera_from_dict(d: dict) -> CameraView:
    required = {"fx", "fy", "cx", "cy", "width", "height", "pose"}
    missing = required - set(d)
    if missing:
        raise ValueError(f"camera entry missing fields: {sorted(missing)}")
    pose = np.asarray(d["pose"], dtype=np.float64)
    if pose.size != 16:
        raise ValueError("camera pose must hold 16 values (4x4 row-major)")
    return CameraView(
        fx=float(d["fx"]),
        fy=float(d["fy"]),
        cx=float(d["cx"]),
        cy=float(d["cy"]),
        pose=pose.reshape(4, 4),
        width=int(d["width"]),
        height=int(d["height"]),
        timestamp=float(d.get("timestamp", 0.0)),
        view_id=str(d.get("view_id", "")),
        is_extrapolated=bool(d.get("is_extrapolated", False)),
    )


def save_cameras(path, views: Sequence[CameraView]) -> None:
    Path(path).write_text(json.dumps([camera_to_dict(v) for v in views], indent=1))


def load_cameras(path) -> List[CameraView]:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise ValueError(f"malformed camera file {path}: {e}") from e
    if not isinstance(data, list):
        raise ValueError(f"camera file {path} must hold a JSON array")
    return [camera_from_dict(d) for d in data]


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def _tensor_bytes(t: torch.Tensor) -> bytes:
    return np.ascontiguousarray(t.detach().cpu().numpy().astype("<f4")).tobytes()


def _collection_config(col: GaussianCollection) -> dict:
    return {"kind": col.kind.value, "count": len(col)}


def save_checkpoint(
    path,
    graph: SceneGraph,
    iteration: int = 0,
    optimizer_state: Optional[Dict[str, torch.Tensor]] = None,
    optimizer_step: int = 0,
    extra: Optional[dict] = None,
) -> None:
    """Versioned zip container: JSON manifest + one raw float32 blob per tensor."""
    tensors: Dict[str, torch.Tensor] = {}
    manifest: dict = {
        "version": CHECKPOINT_VERSION,
        "iteration": int(iteration),
        "optimizer_step": int(optimizer_step),
        "nodes": [],
        "shapes": {},
        "extra": extra or {},
    }

    for kind, payload in graph.nodes:
        entry: dict = {"kind": kind.value}
        if kind == NodeKind.SKY:
            tensors["sky.color_sh"] = payload.color_sh
            tensors["sky.uncert_sh"] = payload.uncert_sh
        else:
            col = payload.gaussians if isinstance(payload, RoadNode) else payload
            entry.update(_collection_config(col))
            prefix = f"node.{kind.value}"
            for name in GAUSSIAN_TENSORS:
                tensors[f"{prefix}.{name}"] = getattr(col, name)
            tensors[f"{prefix}.anchor"] = col.anchor
            if isinstance(payload, RoadNode) and payload.sdf is not None:
                f: HeightFieldSDF = payload.sdf
                entry["sdf"] = {
                    "extent": list(f.extent),
                    "z_bounds": list(f.z_bounds),
                    "seed": f.seed,
                }
                for pname, p in f.parameters().items():
                    tensors[f"sdf.{pname}"] = p
        manifest["nodes"].append(entry)

    if optimizer_state:
        for name, t in optimizer_state.items():
            tensors[f"opt.{name}"] = t

    manifest["shapes"] = {k: list(t.shape) for k, t in tensors.items()}
    manifest["world_up"] = [float(x) for x in graph.world_up]

    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as z:
        z.writestr("manifest.json", json.dumps(manifest, indent=1))
        for name, t in tensors.items():
            z.writestr(f"tensors/{name}.f32", _tensor_bytes(t))


def load_checkpoint(path, dtype: torch.dtype = torch.float32):
    """Rebuilds (SceneGraph, iteration, optimizer_state, optimizer_step, extra)."""
    try:
        z = zipfile.ZipFile(path)
    except (FileNotFoundError, zipfile.BadZipFile) as e:
        raise CheckpointError(f"cannot open checkpoint {path}: {e}") from e
    with z:
        try:
            manifest = json.loads(z.read("manifest.json"))
        except KeyError as e:
            raise CheckpointError(f"checkpoint {path} has no manifest") from e
        version = manifest.get("version")
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(
                f"checkpoint version {version} unsupported (expected {CHECKPOINT_VERSION})"
            )
        shapes = manifest["shapes"]

        def read_tensor(name: str, as_dtype=dtype) -> torch.Tensor:
            raw = np.frombuffer(z.read(f"tensors/{name}.f32"), dtype="<f4")
            arr = raw.reshape(shapes[name])
            return torch.as_tensor(arr.copy(), dtype=as_dtype)

        nodes = []
        for entry in manifest["nodes"]:
            kind = NodeKind(entry["kind"])
            if kind == NodeKind.SKY:
                nodes.append(
                    (kind, SkyModel(read_tensor("sky.color_sh"), read_tensor("sky.uncert_sh"), dtype=dtype))
                )
                continue
            prefix = f"node.{kind.value}"
            col = GaussianCollection(
                kind,
                *(read_tensor(f"{prefix}.{name}") for name in GAUSSIAN_TENSORS),
                anchor=read_tensor(f"{prefix}.anchor"),
                dtype=dtype,
            )
            # the constructor re-normalizes quaternions; restore the saved
            # bytes verbatim (they are already unit norm) so a resumed run
            # replays the original trajectory bit for bit
            with torch.no_grad():
                col.rotations.copy_(read_tensor(f"{prefix}.rotations"))
            if kind == NodeKind.ROAD:
                sdf = None
                if "sdf" in entry:
                    cfg = entry["sdf"]
                    sdf = HeightFieldSDF(
                        extent=tuple(cfg["extent"]),
                        z_bounds=tuple(cfg["z_bounds"]),
                        seed=int(cfg["seed"]),
                    )
                    with torch.no_grad():
                        for pname, p in sdf.parameters().items():
                            p.copy_(read_tensor(f"sdf.{pname}", p.dtype))
                nodes.append((kind, RoadNode(sdf=sdf, gaussians=col)))
            else:
                nodes.append((kind, col))

        opt_state = {
            name[len("tensors/opt.") : -len(".f32")]: read_tensor(
                name[len("tensors/") : -len(".f32")]
            )
            for name in z.namelist()
            if name.startswith("tensors/opt.")
        }

    graph = SceneGraph(nodes=nodes, world_up=np.asarray(manifest["world_up"]))
    return (
        graph,
        int(manifest["iteration"]),
        opt_state,
        int(manifest.get("optimizer_step", 0)),
        manifest.get("extra", {}),
    )


# ---------------------------------------------------------------------------
# run manifest and metrics log
# ---------------------------------------------------------------------------


@dataclass
class RunManifest:
    command: str
    config_path: str
    seed: int
    out_dir: str
    git_describe: str = ""
    started_at: str = ""
    ended_at: str = ""
    status: str = "running"
    extra: dict = field(default_factory=dict)

    def write(self, path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=1))


def utc_now() -> str:
    return datetime.now(timezone.utc).isoformat()


def git_describe(cwd=".") -> str:
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            cwd=cwd,
            capture_output=True,
            text=True,
            timeout=10,
        )
        return out.stdout.strip() if out.returncode == 0 else "unknown"
    except (OSError, subprocess.TimeoutExpired):
        return "unknown"


METRICS_FIELDS = [
    "iteration",
    "phase",
    "loss_total",
    "loss_l1",
    "loss_ssim",
    "loss_mask",
    "loss_sdf",
    "loss_nll",
    "loss_ex",
    "psnr",
]


def append_metrics(path, rows: Sequence[dict]) -> None:
    path = Path(path)
    fresh = not path.exists()
    with open(path, "a", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=METRICS_FIELDS)
        if fresh:
            writer.writeheader()
        for row in rows:
            writer.writerow({k: row.get(k, "") for k in METRICS_FIELDS})


def read_metrics(path) -> List[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))
