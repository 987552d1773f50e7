"""Differentiable CPU splatting: EWA projection, tiled alpha compositing of
color and the certainty channel, and whole-scene node composition.

Compositing contract (shared with the per-pixel reference compositor used in
tests): primitives are blended front to back with per-pixel alpha
``min(opacity * exp(-0.5 d' cov2d^-1 d), alpha_clamp)``; contributions below
``alpha_min`` are dropped, and a pixel stops accepting contributions once its
transmittance falls below ``t_stop``.  The certainty channel composites the
per-Gaussian view density p_g (clamped to [0, 1]) with the *detached* blend
weights, so the NLL uncertainty loss reaches only the SH density coefficients
and never the geometry.

Node composition runs one global depth sort across FFG, Background, and RSG
primitives; the sky fills the residual transmittance 1 - acc_alpha.  RSG
positions are rendered detached (they are recomputed from the road SDF, not
optimized); far-field Gaussians are scaled about their node anchor by e^f
before projection.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field as dc_field
from typing import Optional, Sequence

import numpy as np
import torch

from .farfield import apply_ffg_autograd
from .scene import CameraView, GaussianCollection, NodeKind, RoadNode, SceneGraph, SkyModel
from .sh import eval_sh_basis

__all__ = [
    "ALPHA_CLAMP",
    "ALPHA_MIN",
    "T_STOP",
    "DILATION",
    "Z_NEAR",
    "TILE",
    "RasterizerError",
    "ProjectedGaussian",
    "ShadingInputs",
    "RenderedFrame",
    "project",
    "rasterize",
    "composite_nodes",
    "render_scene",
    "modulate_opacity",
    "backward",
]

TILE = 16
ALPHA_CLAMP = 0.999
ALPHA_MIN = 1.0 / 255.0
T_STOP = 1e-4
DILATION = 0.3  # px^2 low-pass added to every projected covariance
Z_NEAR = 0.2
# Tile-binning / culling radius in sigmas.  3.33 > sqrt(2 ln 255), so every
# pixel where a primitive could still reach alpha_min lies inside the radius
# even at opacity 1; beyond it contributions are exactly zero by the
# alpha_min cut, keeping the tiled result identical to a full compositor.
RADIUS_SIGMA = 3.33


class RasterizerError(RuntimeError):
    """Raised for unusable rasterizer inputs (e.g. backward without a graph)."""


@dataclass
class ProjectedGaussian:
    """A single primitive after EWA projection into one camera."""

    mean2d: np.ndarray  # (2,) pixels
    cov2d: np.ndarray  # (2, 2) symmetric PD, pixels^2 (includes dilation)
    depth: float  # meters, > z_near
    view_dir: np.ndarray  # (3,) unit, camera center -> Gaussian, world frame
    index: int = 0  # row into the source collection / shading inputs


@dataclass
class ShadingInputs:
    """Per-Gaussian appearance arrays, indexed by ``ProjectedGaussian.index``."""

    color_sh: torch.Tensor  # (N, 3, (Lc+1)^2)
    uncert_sh: torch.Tensor  # (N, (Lu+1)^2)
    opacities: torch.Tensor  # (N,) effective base opacity in [0, 1]

    def __post_init__(self) -> None:
        self.color_sh = _as_tensor(self.color_sh)
        self.uncert_sh = _as_tensor(self.uncert_sh)
        self.opacities = _as_tensor(self.opacities)


@dataclass
class RenderedFrame:
    """Output of one rasterization pass (tensors keep the autograd graph)."""

    color: torch.Tensor  # (H, W, 3) in [0, 1]
    uncertainty: torch.Tensor  # (H, W) in [0, 1]
    depth: torch.Tensor  # (H, W) meters (weight-averaged; 0 where empty)
    acc_alpha: torch.Tensor  # (H, W) in [0, 1]
    node_alpha: dict = dc_field(default_factory=dict)  # name -> (H, W)
    diagnostics: dict = dc_field(default_factory=dict)


def _as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


def _quat_rotmats(q: torch.Tensor) -> torch.Tensor:
    """Batch (w, x, y, z) quaternions -> (N, 3, 3) rotation matrices."""
    q = q / q.norm(dim=-1, keepdim=True).clamp_min(1e-12)
    w, x, y, z = q.unbind(-1)
    rows = [
        1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
        2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
        2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
    ]
    return torch.stack(rows, dim=-1).reshape(-1, 3, 3)


def _eval_color(color_sh: torch.Tensor, dirs: torch.Tensor) -> torch.Tensor:
    """Clamped view-dependent RGB from per-Gaussian SH (DC carries +0.5 offset)."""
    degree = int(round(math.sqrt(color_sh.shape[-1]))) - 1
    basis = eval_sh_basis(degree, dirs)
    return ((color_sh * basis[:, None, :]).sum(-1) + 0.5).clamp(0.0, 1.0)


def _eval_density(uncert_sh: torch.Tensor, dirs: torch.Tensor) -> torch.Tensor:
    """View density p_g(v) = (a . Y(v))^2 / |a|^2, zero for all-zero coefficients."""
    degree = int(round(math.sqrt(uncert_sh.shape[-1]))) - 1
    basis = eval_sh_basis(degree, dirs)
    s = (uncert_sh * basis).sum(-1)
    return s * s / (uncert_sh * uncert_sh).sum(-1).clamp_min(1e-30)


def _node_render_inputs(col: GaussianCollection):
    """World positions, 3-axis scales, rotations, and base alpha for one node.

    Applies the node-specific parameterizations: RSG positions are detached
    and padded with a zero-thickness normal axis; far-field positions and
    scales are multiplied by e^f about the node anchor (custom backward for f).
    """
    scales = torch.exp(col.log_scales)
    if col.kind == NodeKind.ROAD:
        positions = col.positions.detach()
        scales = torch.cat([scales, torch.zeros_like(scales[:, :1])], dim=1)
    elif col.kind == NodeKind.FAR_FIELD:
        anchor = col.anchor.to(col.positions.dtype)
        local, scales = apply_ffg_autograd(col.positions - anchor, scales, col.log_factors)
        positions = local + anchor
    else:
        positions = col.positions
    alpha = torch.sigmoid(col.opacity_logits)
    if col.opacity_scale is not None:
        alpha = alpha * col.opacity_scale.to(alpha.dtype)
    return positions, scales, col.rotations, alpha


def _project_tensors(positions, scales, rotations, view: CameraView, z_near: float):
    """Vectorized EWA projection; returns per-Gaussian 2D stats + validity mask."""
    dtype = positions.dtype
    w2c = torch.as_tensor(view.world_to_camera, dtype=dtype)
    cam = positions @ w2c[:3, :3].T + w2c[:3, 3]
    depth = cam[:, 2]
    valid = depth > z_near
    z = torch.where(valid, depth, torch.ones_like(depth))

    fx, fy = float(view.fx), float(view.fy)
    u = fx * cam[:, 0] / z + float(view.cx)
    v = fy * cam[:, 1] / z + float(view.cy)
    mean2d = torch.stack([u, v], dim=-1)

    zero = torch.zeros_like(z)
    jac = torch.stack(
        [
            torch.stack([fx / z, zero, -fx * cam[:, 0] / (z * z)], dim=-1),
            torch.stack([zero, fy / z, -fy * cam[:, 1] / (z * z)], dim=-1),
        ],
        dim=-2,
    )  # (N, 2, 3)
    axes = _quat_rotmats(rotations) * scales[:, None, :]  # columns scaled
    cov_world = axes @ axes.transpose(1, 2)
    m = jac @ w2c[:3, :3]
    cov2d = m @ cov_world @ m.transpose(1, 2)
    cov2d = cov2d + DILATION * torch.eye(2, dtype=dtype)

    center = torch.as_tensor(view.center, dtype=dtype)
    offset = positions - center
    view_dir = offset / offset.norm(dim=-1, keepdim=True).clamp_min(1e-12)

    a, b, d = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    mid = 0.5 * (a + d)
    disc = torch.sqrt((0.5 * (a - d)) ** 2 + b * b)
    radius = RADIUS_SIGMA * torch.sqrt((mid + disc).clamp_min(0.0))

    valid = (
        valid
        & (mean2d[:, 0] + radius > 0)
        & (mean2d[:, 0] - radius < view.width)
        & (mean2d[:, 1] + radius > 0)
        & (mean2d[:, 1] - radius < view.height)
    )
    return {
        "mean2d": mean2d,
        "cov2d": cov2d,
        "depth": depth,
        "view_dir": view_dir,
        "radius": radius,
        "valid": valid,
    }


def project(
    primitive,
    camera: CameraView,
    *,
    z_near: float = Z_NEAR,
    index: int = 0,
    dtype: torch.dtype = torch.float64,
) -> Optional[ProjectedGaussian]:
    """EWA-project one world-space ``GaussianPrimitive``; None when culled.

    Road primitives get a zero-thickness third axis.  The far-field e^f
    reparameterization is a node-level transform (it needs the node anchor),
    so it is applied by ``composite_nodes``, not here.
    """
    log_scales = np.asarray(primitive.log_scales, dtype=np.float64)
    scales = np.exp(log_scales)
    if scales.shape == (2,):
        scales = np.concatenate([scales, [0.0]])
    out = _project_tensors(
        torch.as_tensor(primitive.position, dtype=dtype).reshape(1, 3),
        torch.as_tensor(scales, dtype=dtype).reshape(1, 3),
        torch.as_tensor(primitive.rotation, dtype=dtype).reshape(1, 4),
        camera,
        z_near,
    )
    if not bool(out["valid"][0]):
        return None
    return ProjectedGaussian(
        mean2d=out["mean2d"][0].numpy(),
        cov2d=out["cov2d"][0].numpy(),
        depth=float(out["depth"][0]),
        view_dir=out["view_dir"][0].numpy(),
        index=index,
    )


def _composite(
    mean2d,
    cov2d,
    depth,
    alpha,
    color,
    pg,
    node_id,
    n_nodes: int,
    height: int,
    width: int,
    *,
    tile: int,
    alpha_clamp: float,
    alpha_min: float,
    t_stop: float,
):
    """Tiled front-to-back compositor over pre-projected, pre-shaded primitives.

    Returns flat (H*W) accumulators; certainty uses detached weights.
    """
    dtype = mean2d.dtype if mean2d.numel() else torch.float32
    npix = height * width
    out = {
        "color": torch.zeros(npix, 3, dtype=dtype),
        "cert": torch.zeros(npix, dtype=dtype),
        "depth_sum": torch.zeros(npix, dtype=dtype),
        "acc": torch.zeros(npix, dtype=dtype),
        "node_acc": torch.zeros(max(n_nodes, 1), npix, dtype=dtype),
        "skipped_non_pd": 0,
    }
    n = mean2d.shape[0]
    if n == 0:
        return out

    order = torch.argsort(depth.detach(), stable=True)
    mean2d, cov2d, depth = mean2d[order], cov2d[order], depth[order]
    alpha, color, node_id = alpha[order], color[order], node_id[order]
    pg = pg[order].clamp(0.0, 1.0)

    a, b, d = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    det = a * d - b * b
    pd_ok = (det > 0) & (a > 0)
    out["skipped_non_pd"] = int((~pd_ok).sum())
    safe_det = torch.where(pd_ok, det, torch.ones_like(det))
    inv00, inv01, inv11 = d / safe_det, -b / safe_det, a / safe_det

    with torch.no_grad():
        mid = 0.5 * (a + d)
        disc = torch.sqrt((0.5 * (a - d)) ** 2 + b * b)
        radius = (RADIUS_SIGMA * torch.sqrt((mid + disc).clamp_min(0.0))).numpy()
        ug = mean2d[:, 0].numpy()
        vg = mean2d[:, 1].numpy()
        keep = pd_ok.numpy()

    for ty in range(0, height, tile):
        y_end = min(ty + tile, height)
        row_hit = keep & (vg + radius > ty) & (vg - radius < y_end)
        if not row_hit.any():
            continue
        for tx in range(0, width, tile):
            x_end = min(tx + tile, width)
            sel = np.nonzero(row_hit & (ug + radius > tx) & (ug - radius < x_end))[0]
            if sel.size == 0:
                continue
            idx = torch.from_numpy(sel)
            ys, xs = torch.meshgrid(
                torch.arange(ty, y_end), torch.arange(tx, x_end), indexing="ij"
            )
            ys, xs = ys.reshape(-1), xs.reshape(-1)
            pix_index = ys * width + xs
            px = xs.to(dtype) + 0.5
            py = ys.to(dtype) + 0.5

            dx = px[:, None] - mean2d[idx, 0][None, :]
            dy = py[:, None] - mean2d[idx, 1][None, :]
            power = -0.5 * (
                inv00[idx] * dx * dx + 2.0 * inv01[idx] * dx * dy + inv11[idx] * dy * dy
            )
            amat = (alpha[idx] * torch.exp(power)).clamp(max=alpha_clamp)
            amat = torch.where(
                (power <= 0) & (amat >= alpha_min), amat, torch.zeros_like(amat)
            )
            t_before = torch.cat(
                [torch.ones_like(amat[:, :1]), torch.cumprod(1.0 - amat, dim=1)[:, :-1]],
                dim=1,
            )
            w = torch.where(t_before >= t_stop, amat * t_before, torch.zeros_like(amat))

            out["color"].index_add_(0, pix_index, w @ color[idx])
            out["cert"].index_add_(0, pix_index, w.detach() @ pg[idx])
            out["depth_sum"].index_add_(0, pix_index, w @ depth[idx])
            out["acc"].index_add_(0, pix_index, w.sum(dim=1))
            nid = node_id[idx]
            for k in range(n_nodes):
                mask = nid == k
                if bool(mask.any()):
                    out["node_acc"][k].index_add_(0, pix_index, w[:, mask].sum(dim=1))
    return out


def _finish_frame(core, height, width, names, diagnostics):
    acc = core["acc"]
    denom = torch.where(acc > 1e-10, acc, torch.ones_like(acc))
    uncert = 1.0 - core["cert"]
    low = float(uncert.detach().min()) if uncert.numel() else 1.0
    if low < -1e-5:
        raise RasterizerError(f"uncertainty lower bound violated: min {low}")
    node_alpha = {name: core["node_acc"][k].reshape(height, width) for k, name in enumerate(names)}
    return RenderedFrame(
        color=core["color"].reshape(height, width, 3),
        uncertainty=uncert.clamp(0.0, 1.0).reshape(height, width),
        depth=(core["depth_sum"] / denom).reshape(height, width),
        acc_alpha=acc.reshape(height, width),
        node_alpha=node_alpha,
        diagnostics=diagnostics,
    )


def rasterize(
    projected: Sequence[ProjectedGaussian],
    shading: ShadingInputs,
    width: int,
    height: int,
    *,
    alpha_clamp: float = ALPHA_CLAMP,
    alpha_min: float = ALPHA_MIN,
    t_stop: float = T_STOP,
    tile: int = TILE,
) -> RenderedFrame:
    """Composite an explicit list of projected Gaussians (no sky fill).

    The list may arrive in any order; primitives are sorted by ascending
    depth with ties broken by source index.  With no primitives the frame is
    empty: U = 1, acc_alpha = 0.
    """
    projected = list(projected)
    if not projected:
        dtype = shading.opacities.dtype
        empty = torch.zeros(height, width, dtype=dtype)
        return RenderedFrame(
            color=torch.zeros(height, width, 3, dtype=dtype),
            uncertainty=torch.ones(height, width, dtype=dtype),
            depth=empty.clone(),
            acc_alpha=empty.clone(),
            node_alpha={"gaussians": empty.clone()},
            diagnostics={"skipped_non_pd": 0},
        )
    projected = sorted(projected, key=lambda g: g.index)
    dtype = shading.opacities.dtype
    idx = torch.tensor([g.index for g in projected], dtype=torch.long)
    mean2d = torch.as_tensor(np.stack([g.mean2d for g in projected]), dtype=dtype)
    cov2d = torch.as_tensor(np.stack([g.cov2d for g in projected]), dtype=dtype)
    depth = torch.as_tensor(np.array([g.depth for g in projected]), dtype=dtype)
    dirs = torch.as_tensor(np.stack([g.view_dir for g in projected]), dtype=dtype)

    core = _composite(
        mean2d,
        cov2d,
        depth,
        shading.opacities.to(dtype)[idx],
        _eval_color(shading.color_sh.to(dtype)[idx], dirs),
        _eval_density(shading.uncert_sh.to(dtype)[idx], dirs),
        torch.zeros(len(projected), dtype=torch.long),
        1,
        height,
        width,
        tile=tile,
        alpha_clamp=alpha_clamp,
        alpha_min=alpha_min,
        t_stop=t_stop,
    )
    return _finish_frame(
        core, height, width, ["gaussians"], {"skipped_non_pd": core["skipped_non_pd"]}
    )


def composite_nodes(
    graph: SceneGraph,
    camera: CameraView,
    *,
    alpha_clamp: float = ALPHA_CLAMP,
    alpha_min: float = ALPHA_MIN,
    t_stop: float = T_STOP,
    z_near: float = Z_NEAR,
    tile: int = TILE,
) -> RenderedFrame:
    """Render a full scene graph into one camera.

    All Gaussian nodes are projected and composited in a single global depth
    ordering (fixed node order FFG, Background, RSG breaks depth ties), then
    the sky fills the residual transmittance 1 - acc_alpha.  node_alpha maps
    are recorded per node for the mask loss; the sky's entry is the residual.
    """
    node_order = (NodeKind.FAR_FIELD, NodeKind.BACKGROUND, NodeKind.ROAD)
    cols, names = [], []
    for kind in node_order:
        try:
            payload = graph.node(kind)
        except KeyError:
            continue
        cols.append(payload.gaussians if isinstance(payload, RoadNode) else payload)
        names.append(kind.value)

    dtype = cols[-1].dtype if cols else graph.sky.color_sh.dtype
    parts = {k: [] for k in ("mean2d", "cov2d", "depth", "alpha", "color", "pg", "nid")}
    culled = 0
    for nid, col in enumerate(cols):
        if len(col) == 0:
            continue
        positions, scales, rotations, alpha = _node_render_inputs(col)
        proj = _project_tensors(positions, scales, rotations, camera, z_near)
        sel = proj["valid"]
        culled += int((~sel).sum())
        if not bool(sel.any()):
            continue
        dirs = proj["view_dir"][sel]
        parts["mean2d"].append(proj["mean2d"][sel])
        parts["cov2d"].append(proj["cov2d"][sel])
        parts["depth"].append(proj["depth"][sel])
        parts["alpha"].append(alpha[sel])
        parts["color"].append(_eval_color(col.color_sh[sel], dirs))
        # detached directions: the certainty channel trains the uncertainty
        # SH alone, never geometry (blend weights are likewise detached)
        parts["pg"].append(_eval_density(col.uncert_sh[sel], dirs.detach()))
        parts["nid"].append(torch.full((int(sel.sum()),), nid, dtype=torch.long))

    if parts["mean2d"]:
        packed = {k: torch.cat(v) for k, v in parts.items()}
    else:
        packed = {
            "mean2d": torch.zeros(0, 2, dtype=dtype),
            "cov2d": torch.zeros(0, 2, 2, dtype=dtype),
            "depth": torch.zeros(0, dtype=dtype),
            "alpha": torch.zeros(0, dtype=dtype),
            "color": torch.zeros(0, 3, dtype=dtype),
            "pg": torch.zeros(0, dtype=dtype),
            "nid": torch.zeros(0, dtype=torch.long),
        }
    core = _composite(
        packed["mean2d"],
        packed["cov2d"],
        packed["depth"],
        packed["alpha"],
        packed["color"],
        packed["pg"],
        packed["nid"],
        len(cols),
        camera.height,
        camera.width,
        tile=tile,
        alpha_clamp=alpha_clamp,
        alpha_min=alpha_min,
        t_stop=t_stop,
    )

    sky = graph.sky
    sky_dirs = torch.as_tensor(camera.pixel_rays().reshape(-1, 3), dtype=dtype)
    color_basis = eval_sh_basis(sky.degree, sky_dirs)
    sky_rgb = (color_basis @ sky.color_sh.to(dtype).T).clamp(0.0, 1.0)
    uncert_sh = sky.uncert_sh.to(dtype)
    u_degree = int(round(math.sqrt(uncert_sh.shape[0]))) - 1
    s = eval_sh_basis(u_degree, sky_dirs) @ uncert_sh
    pg_sky = (s * s / (uncert_sh @ uncert_sh).clamp_min(1e-30)).clamp(0.0, 1.0)
    residual_t = (1.0 - core["acc"]).clamp(0.0, 1.0)
    core["color"] = core["color"] + residual_t[:, None] * sky_rgb
    core["cert"] = core["cert"] + residual_t.detach() * pg_sky

    frame = _finish_frame(
        core,
        camera.height,
        camera.width,
        names,
        {"skipped_non_pd": core["skipped_non_pd"], "culled": culled},
    )
    frame.node_alpha[NodeKind.SKY.value] = residual_t.reshape(camera.height, camera.width)
    return frame


render_scene = composite_nodes


def modulate_opacity(gaussians: GaussianCollection, u) -> GaussianCollection:
    """Render-time opacity overlay: effective alpha becomes u * sigmoid(logit).

    Returns a shallow copy sharing every parameter tensor; the stored
    opacity_logits are untouched.  ``u`` must be per-Gaussian values in [0, 1].
    """
    u = _as_tensor(u).reshape(-1)
    if u.shape[0] != len(gaussians):
        raise ValueError(f"u has {u.shape[0]} entries for {len(gaussians)} Gaussians")
    if bool((u < 0).any()) or bool((u > 1).any()) or not bool(torch.isfinite(u).all()):
        raise ValueError("opacity modulation u must lie in [0, 1]")
    out = copy.copy(gaussians)
    out.opacity_scale = u
    return out


def backward(
    frame: RenderedFrame,
    *,
    grad_color=None,
    grad_uncertainty=None,
    grad_depth=None,
    grad_acc=None,
    grad_node_alpha: Optional[dict] = None,
    retain_graph: bool = False,
) -> None:
    """Backpropagate frame-space gradients to scene parameters (.grad fields).

    Raises RasterizerError when the frame carries no autograd graph (it was
    rendered under no_grad or detached), since there is nothing to traverse.
    """
    pairs = []
    for tensor, grad in (
        (frame.color, grad_color),
        (frame.uncertainty, grad_uncertainty),
        (frame.depth, grad_depth),
        (frame.acc_alpha, grad_acc),
    ):
        if grad is not None:
            pairs.append((tensor, grad))
    for name, grad in (grad_node_alpha or {}).items():
        pairs.append((frame.node_alpha[name], grad))
    if not pairs:
        raise ValueError("no output gradients provided")
    tensors, grads = [], []
    for tensor, grad in pairs:
        if tensor.grad_fn is None:
            raise RasterizerError(
                "frame has no forward cache: it was rendered without gradient tracking"
            )
        grad_t = torch.as_tensor(np.asarray(grad), dtype=tensor.dtype).reshape(tensor.shape)
        tensors.append(tensor)
        grads.append(grad_t)
    torch.autograd.backward(tensors, grads, retain_graph=retain_graph)
