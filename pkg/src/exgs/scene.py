"""Scene-graph domain types: Gaussian collections, cameras, and the graph.

The world frame is fixed z-up.  Cameras follow the computer-vision pinhole
convention: x right, y down, z forward, with ``pose`` the camera-to-world
rigid transform.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Iterator, Optional

import numpy as np
import torch

from .utils import quat_normalize

WORLD_UP = np.array([0.0, 0.0, 1.0])

# Trainable attribute names of a GaussianCollection, in serialization order.
GAUSSIAN_FIELDS = (
    "positions",
    "log_scales",
    "rotations",
    "opacity_logits",
    "color_sh",
    "uncert_sh",
    "log_factors",
)


class NodeKind(str, Enum):
    """Scene-graph node tags."""

    BACKGROUND = "background"
    ROAD = "road"
    FAR_FIELD = "far_field"
    SKY = "sky"


@dataclass
class GaussianPrimitive:
    """A single Gaussian, the per-element view of a collection."""

    position: np.ndarray  # (3,) meters
    log_scales: np.ndarray  # (2,) for road Gaussians, (3,) otherwise
    rotation: np.ndarray  # (4,) unit quaternion, (w, x, y, z)
    opacity_logit: float
    color_sh: np.ndarray  # (3, (L_c+1)^2)
    uncert_sh: np.ndarray  # ((L+1)^2,)
    node_tag: NodeKind = NodeKind.BACKGROUND
    log_factor: float = 0.0  # far-field depth factor f; 0 elsewhere

    def __post_init__(self) -> None:
        self.rotation = quat_normalize(np.asarray(self.rotation, dtype=np.float64))
        n_scales = 2 if self.node_tag == NodeKind.ROAD else 3
        if np.asarray(self.log_scales).shape != (n_scales,):
            raise ValueError(
                f"{self.node_tag.value} Gaussian requires {n_scales} scale "
                f"dimensions, got {np.asarray(self.log_scales).shape}"
            )

    @property
    def opacity(self) -> float:
        return float(torch.sigmoid(torch.tensor(self.opacity_logit)))


class GaussianCollection:
    """A homogeneous, struct-of-arrays batch of Gaussians for one node.

    All attributes are torch tensors so the training loop can flip
    ``requires_grad`` per parameter group.  Road collections store two scale
    dimensions per Gaussian; every other kind stores three.  ``log_factors``
    is the far-field depth factor f and stays zero for other kinds.
    """

    # Render-time opacity overlay (set by rasterize.modulate_opacity); the
    # stored opacity_logits are never touched by modulation.
    opacity_scale = None

    def __init__(
        self,
        kind: NodeKind,
        positions,
        log_scales,
        rotations,
        opacity_logits,
        color_sh,
        uncert_sh,
        log_factors=None,
        anchor=None,
        dtype: torch.dtype = torch.float32,
    ) -> None:
        as_t = lambda x: torch.as_tensor(np.asarray(x), dtype=dtype).clone()
        self.kind = kind
        # non-trainable node origin; far-field depth factors scale about it
        self.anchor = as_t(anchor if anchor is not None else np.zeros(3)).reshape(3)
        self.positions = as_t(positions).reshape(-1, 3)
        n = self.positions.shape[0]

        def shaped(t, *dims):
            # torch cannot infer -1 on zero-element tensors (empty nodes are
            # legal, e.g. a road collection before seeding); make it explicit
            if n == 0 and -1 in dims:
                last = t.shape[-1] if t.dim() > 1 else 1
                dims = tuple(last if d == -1 else d for d in dims)
            return t.reshape(*dims)

        n_scales = 2 if kind == NodeKind.ROAD else 3
        self.log_scales = as_t(log_scales).reshape(n, n_scales)
        self.rotations = as_t(rotations).reshape(n, 4)
        self.opacity_logits = as_t(opacity_logits).reshape(n)
        self.color_sh = shaped(as_t(color_sh), n, 3, -1)
        self.uncert_sh = shaped(as_t(uncert_sh), n, -1)
        if log_factors is None:
            log_factors = torch.zeros(n, dtype=dtype)
        self.log_factors = as_t(log_factors).reshape(n)
        with torch.no_grad():
            norms = self.rotations.norm(dim=-1, keepdim=True)
            if not torch.all(norms > 0):
                raise ValueError("zero-norm quaternion in collection")
            self.rotations /= norms

    def __len__(self) -> int:
        return self.positions.shape[0]

    @property
    def dtype(self) -> torch.dtype:
        return self.positions.dtype

    @property
    def opacities(self) -> torch.Tensor:
        return torch.sigmoid(self.opacity_logits)

    def tensors(self) -> dict:
        return {name: getattr(self, name) for name in GAUSSIAN_FIELDS}

    def to(self, dtype: torch.dtype) -> "GaussianCollection":
        return GaussianCollection(
            self.kind,
            *(t.detach() for t in self.tensors().values()),
            anchor=self.anchor.detach(),
            dtype=dtype,
        )

    def primitive(self, i: int) -> GaussianPrimitive:
        """Detached per-element view, mainly for tests and inspection."""
        return GaussianPrimitive(
            position=self.positions[i].detach().numpy().copy(),
            log_scales=self.log_scales[i].detach().numpy().copy(),
            rotation=self.rotations[i].detach().numpy().copy(),
            opacity_logit=float(self.opacity_logits[i]),
            color_sh=self.color_sh[i].detach().numpy().copy(),
            uncert_sh=self.uncert_sh[i].detach().numpy().copy(),
            node_tag=self.kind,
            log_factor=float(self.log_factors[i]),
        )

    @staticmethod
    def from_primitives(prims, dtype: torch.dtype = torch.float32) -> "GaussianCollection":
        prims = list(prims)
        if not prims:
            raise ValueError("empty primitive list")
        kind = prims[0].node_tag
        if any(p.node_tag != kind for p in prims):
            raise ValueError("mixed node tags in one collection")
        return GaussianCollection(
            kind,
            np.stack([p.position for p in prims]),
            np.stack([p.log_scales for p in prims]),
            np.stack([p.rotation for p in prims]),
            np.array([p.opacity_logit for p in prims]),
            np.stack([p.color_sh for p in prims]),
            np.stack([p.uncert_sh for p in prims]),
            np.array([p.log_factor for p in prims]),
            dtype=dtype,
        )


@dataclass
class CameraView:
    """A pinhole camera with optional ground-truth image and masks."""

    fx: float
    fy: float
    cx: float
    cy: float
    pose: np.ndarray  # (4, 4) camera-to-world
    width: int
    height: int
    image: Optional[np.ndarray] = None  # (H, W, 3) in [0, 1]
    road_mask: Optional[np.ndarray] = None  # (H, W) bool
    sky_mask: Optional[np.ndarray] = None  # (H, W) bool
    is_extrapolated: bool = False
    timestamp: float = 0.0
    view_id: str = ""

    def __post_init__(self) -> None:
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        self.pose = np.asarray(self.pose, dtype=np.float64).reshape(4, 4)
        if self.image is not None:
            self.image = np.asarray(self.image, dtype=np.float64)
            if self.image.min() < 0.0 or self.image.max() > 1.0:
                raise ValueError("image values must lie in [0, 1]")

    @property
    def center(self) -> np.ndarray:
        return self.pose[:3, 3]

    @property
    def rotation(self) -> np.ndarray:
        """Camera-to-world rotation; columns are right / down / forward."""
        return self.pose[:3, :3]

    @property
    def world_to_camera(self) -> np.ndarray:
        out = np.eye(4)
        out[:3, :3] = self.rotation.T
        out[:3, 3] = -self.rotation.T @ self.center
        return out

    def pixel_rays(self) -> np.ndarray:
        """World-space unit ray directions, one per pixel, shape (H, W, 3)."""
        u = np.arange(self.width) + 0.5
        v = np.arange(self.height) + 0.5
        uu, vv = np.meshgrid(u, v)
        d = np.stack([(uu - self.cx) / self.fx, (vv - self.cy) / self.fy, np.ones_like(uu)], axis=-1)
        d /= np.linalg.norm(d, axis=-1, keepdims=True)
        return d @ self.rotation.T


def lateral_shift(view: CameraView, offset: float) -> CameraView:
    """Translate a camera sideways along its ground-projected lateral axis.

    Orientation and intrinsics are unchanged; the returned view is flagged
    extrapolated whenever the offset is nonzero, and carries no image or
    masks (any attached ground truth is stale at the new pose).
    """
    if abs(offset) > 10.0:
        raise ValueError(f"|offset| must be <= 10 m, got {offset}")
    if offset == 0.0:
        return replace(view, is_extrapolated=False)
    lateral = view.rotation[:, 0] - np.dot(view.rotation[:, 0], WORLD_UP) * WORLD_UP
    norm = np.linalg.norm(lateral)
    if norm < 1e-9:  # camera pointing straight up/down: fall back to raw axis
        lateral, norm = view.rotation[:, 0], 1.0
    pose = view.pose.copy()
    pose[:3, 3] = pose[:3, 3] + (offset / norm) * lateral
    return replace(
        view,
        pose=pose,
        image=None,
        road_mask=None,
        sky_mask=None,
        is_extrapolated=True,
        view_id=f"{view.view_id}+shift{offset:+g}" if view.view_id else view.view_id,
    )


class SkyModel:
    """Per-direction spherical-harmonic sky: color fill plus a view-density
    coefficient vector so the sky contributes a certainty term like any node."""

    def __init__(self, color_sh, uncert_sh=None, dtype: torch.dtype = torch.float32) -> None:
        self.color_sh = torch.as_tensor(np.asarray(color_sh), dtype=dtype).clone().reshape(3, -1)
        if uncert_sh is None:
            uncert_sh = np.zeros(16)
            uncert_sh[0] = 1.0  # DC-only: uniform view density
        self.uncert_sh = torch.as_tensor(np.asarray(uncert_sh), dtype=dtype).clone().reshape(-1)
        for t, label in ((self.color_sh.shape[1], "color_sh"), (self.uncert_sh.shape[0], "uncert_sh")):
            if int(round(t**0.5)) ** 2 != t:
                raise ValueError(f"sky {label} length {t} is not a square (L+1)^2")

    @property
    def degree(self) -> int:
        return int(round(self.color_sh.shape[1] ** 0.5)) - 1

    def to(self, dtype: torch.dtype) -> "SkyModel":
        return SkyModel(self.color_sh.detach(), self.uncert_sh.detach(), dtype=dtype)


class RoadNode:
    """The road node: a height-field SDF plus the flat Gaussians slaved to it."""

    def __init__(self, sdf, gaussians: GaussianCollection) -> None:
        if gaussians.kind != NodeKind.ROAD:
            raise ValueError("road node requires a road-tagged collection")
        self.sdf = sdf
        self.gaussians = gaussians


@dataclass
class SceneGraph:
    """Node list plus the global up direction.

    Exactly one road node and one sky node are required; background and
    far-field nodes are optional.
    """

    nodes: list  # [(NodeKind, GaussianCollection | RoadNode | SkyModel)]
    world_up: np.ndarray = field(default_factory=lambda: WORLD_UP.copy())

    def __post_init__(self) -> None:
        kinds = [k for k, _ in self.nodes]
        for kind, required in ((NodeKind.ROAD, True), (NodeKind.SKY, True)):
            if kinds.count(kind) != 1:
                raise ValueError(f"scene graph requires exactly one {kind.value} node")
        self.world_up = np.asarray(self.world_up, dtype=np.float64)
        if abs(np.linalg.norm(self.world_up) - 1.0) > 1e-9:
            raise ValueError("world_up must be a unit vector")

    def node(self, kind: NodeKind):
        for k, payload in self.nodes:
            if k == kind:
                return payload
        raise KeyError(kind)

    @property
    def road(self) -> RoadNode:
        return self.node(NodeKind.ROAD)

    @property
    def sky(self) -> SkyModel:
        return self.node(NodeKind.SKY)

    def gaussian_nodes(self) -> Iterator[GaussianCollection]:
        """All Gaussian collections in node order (road node contributes its
        slaved collection)."""
        for kind, payload in self.nodes:
            if kind == NodeKind.SKY:
                continue
            yield payload.gaussians if isinstance(payload, RoadNode) else payload

    def to(self, dtype: torch.dtype) -> "SceneGraph":
        nodes = []
        for kind, payload in self.nodes:
            if isinstance(payload, RoadNode):
                nodes.append((kind, RoadNode(payload.sdf.to(dtype), payload.gaussians.to(dtype))))
            else:
                nodes.append((kind, payload.to(dtype)))
        return SceneGraph(nodes, self.world_up.copy())
