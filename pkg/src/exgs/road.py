"""Height-field road SDF: hash-grid features, tiny MLP heads, NeuS rendering.

The signed distance is dimension reduced: d(p) = slope(x, y) · (p_z − H(x, y)),
with H the learned elevation and slope the learned |cos θ| of the local
surface tilt.  Flat road Gaussians are slaved to the field by
``align_rsg_gaussians`` (no gradient; geometry is owned by the SDF).
"""

from __future__ import annotations

import math
import warnings
from typing import Callable, Dict, Optional, Sequence, Tuple

import numpy as np
import torch

from .optim import Adam
from .scene import GaussianCollection, NodeKind
from .utils import frame_from_normal, quat_from_rotmats

HASH_PRIME_Y = 2654435761  # instant-ngp style spatial hash
FD_STEP = 1e-3  # meters; spatial finite-difference step through the grid


class HashGrid2D:
    """Multi-level 2D feature grid with hashed tables and bilinear lookup."""

    def __init__(
        self,
        levels: int = 8,
        base_resolution: int = 16,
        max_resolution: int = 512,
        features_per_level: int = 2,
        table_size: int = 2**15,
        seed: int = 0,
        dtype: torch.dtype = torch.float32,
    ) -> None:
        self.levels = levels
        self.features_per_level = features_per_level
        self.table_size = table_size
        growth = (max_resolution / base_resolution) ** (1.0 / max(levels - 1, 1))
        self.resolutions = [int(round(base_resolution * growth**i)) for i in range(levels)]
        gen = torch.Generator().manual_seed(seed)
        self.table = (
            torch.rand((levels, table_size, features_per_level), generator=gen, dtype=torch.float64)
            .to(dtype)
            .mul_(2e-4)
            .sub_(1e-4)
        )

    @property
    def feature_dim(self) -> int:
        return self.levels * self.features_per_level

    def _indices(self, ix: torch.Tensor, iy: torch.Tensor, res: int) -> torch.Tensor:
        if (res + 1) ** 2 <= self.table_size:
            return ix * (res + 1) + iy
        return torch.bitwise_xor(ix, iy * HASH_PRIME_Y) % self.table_size

    def lookup(self, xy: torch.Tensor) -> torch.Tensor:
        """xy in [0, 1]^2, shape (N, 2) -> features (N, levels * dim)."""
        outs = []
        for level, res in enumerate(self.resolutions):
            pos = xy.clamp(0.0, 1.0) * res
            i0 = pos.floor().long().clamp(0, res - 1)
            frac = pos - i0
            ix, iy = i0[:, 0], i0[:, 1]
            t = self.table[level]
            f00 = t[self._indices(ix, iy, res)]
            f10 = t[self._indices(ix + 1, iy, res)]
            f01 = t[self._indices(ix, iy + 1, res)]
            f11 = t[self._indices(ix + 1, iy + 1, res)]
            wx = frac[:, 0:1]
            wy = frac[:, 1:2]
            outs.append(
                f00 * (1 - wx) * (1 - wy)
                + f10 * wx * (1 - wy)
                + f01 * (1 - wx) * wy
                + f11 * wx * wy
            )
        return torch.cat(outs, dim=-1)


class TinyNet:
    """A small MLP on raw tensors with a fixed output transform."""

    def __init__(
        self,
        widths: Sequence[int],
        output: str = "linear",  # "linear" | "sigmoid"
        seed: int = 0,
        zero_last: bool = True,
        dtype: torch.dtype = torch.float32,
    ) -> None:
        self.widths = list(widths)
        self.output = output
        gen = torch.Generator().manual_seed(seed)
        self.weights = []
        self.biases = []
        for i, (n_in, n_out) in enumerate(zip(widths[:-1], widths[1:])):
            last = i == len(widths) - 2
            if last and zero_last:
                w = torch.zeros((n_in, n_out), dtype=torch.float64)
            else:
                bound = math.sqrt(6.0 / n_in)
                w = (torch.rand((n_in, n_out), generator=gen, dtype=torch.float64) * 2 - 1) * bound
            self.weights.append(w.to(dtype))
            self.biases.append(torch.zeros(n_out, dtype=dtype))

    def __call__(self, x: torch.Tensor) -> torch.Tensor:
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            x = x @ w + b
            if i < len(self.weights) - 1:
                x = torch.relu(x)
        if self.output == "sigmoid":
            x = torch.sigmoid(x)
        return x

    def parameters(self):
        for w, b in zip(self.weights, self.biases):
            yield w
            yield b


def fourier_embed(v: torch.Tensor, n_freqs: int) -> torch.Tensor:
    """sin/cos embedding of a direction at octave frequencies 2^0 .. 2^{k-1}."""
    parts = []
    for k in range(n_freqs):
        parts.append(torch.sin((2.0**k) * v))
        parts.append(torch.cos((2.0**k) * v))
    return torch.cat(parts, dim=-1)


class HeightFieldSDF:
    """The trainable road surface: elevation, slope, and color heads.

    ``override_elevation`` / ``override_slope`` / ``override_color`` accept
    callables on (x, y) world coordinates and replace the corresponding
    network — used by tests to force exact analytic fields.
    """

    def __init__(
        self,
        extent: Tuple[float, float, float, float],
        seed: int = 0,
        n_fourier: int = 4,
        hidden: int = 32,
        z_bounds: Optional[Tuple[float, float]] = None,
        dtype: torch.dtype = torch.float32,
    ) -> None:
        x0, x1, y0, y1 = extent
        if not (x1 > x0 and y1 > y0):
            raise ValueError("degenerate extent")
        self.extent = (float(x0), float(x1), float(y0), float(y1))
        self.z_bounds = (-5.0, 5.0) if z_bounds is None else (float(z_bounds[0]), float(z_bounds[1]))
        self.seed = seed
        self.n_fourier = n_fourier
        self.grid = HashGrid2D(seed=seed, dtype=dtype)
        # encoding = hash features plus the raw normalized coordinates, so the
        # heads can express smooth global trends without fighting the grid
        feat = self.grid.feature_dim + 2
        # elevation head output is scaled to the z range so meter-scale
        # surfaces are reachable from zero-initialized weights quickly
        self.z_scale = max(1.0, 0.5 * (self.z_bounds[1] - self.z_bounds[0]))
        self.elevation_net = TinyNet([feat, hidden, hidden, 1], "linear", seed=seed + 1, dtype=dtype)
        self.slope_net = TinyNet([feat, hidden, 1], "sigmoid", seed=seed + 2, dtype=dtype)
        self.color_net = TinyNet(
            [feat + 6 * n_fourier, hidden, 3], "sigmoid", seed=seed + 3, dtype=dtype
        )
        self.log_inv_std = torch.tensor([math.log(20.0)], dtype=dtype)
        self.override_elevation: Optional[Callable] = None
        self.override_slope: Optional[Callable] = None
        self.override_color: Optional[Callable] = None
        self._warned_oob = False

    @property
    def dtype(self) -> torch.dtype:
        return self.grid.table.dtype

    @property
    def inv_std(self) -> torch.Tensor:
        return torch.exp(self.log_inv_std)

    def parameters(self) -> Dict[str, torch.Tensor]:
        out = {"hash_table": self.grid.table, "log_inv_std": self.log_inv_std}
        for name, net in (
            ("elevation", self.elevation_net),
            ("slope", self.slope_net),
            ("color", self.color_net),
        ):
            for i, p in enumerate(net.parameters()):
                out[f"{name}.{i}"] = p
        return out

    def to(self, dtype: torch.dtype) -> "HeightFieldSDF":
        other = HeightFieldSDF(
            self.extent,
            seed=self.seed,
            n_fourier=self.n_fourier,
            z_bounds=self.z_bounds,
            dtype=dtype,
        )
        src, dst = self.parameters(), other.parameters()
        with torch.no_grad():
            for name, p in dst.items():
                p.copy_(src[name].detach().to(dtype))
        other.override_elevation = self.override_elevation
        other.override_slope = self.override_slope
        other.override_color = self.override_color
        return other

    # -- field evaluation --------------------------------------------------

    def _normalize(self, x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
        x0, x1, y0, y1 = self.extent
        # tolerance covers finite-difference probes straddling the boundary
        tol = 0.01
        inside = (x >= x0 - tol) & (x <= x1 + tol) & (y >= y0 - tol) & (y <= y1 + tol)
        if not self._warned_oob and not bool(inside.all()):
            warnings.warn("height-field query outside grid bounds; clamping", RuntimeWarning)
            self._warned_oob = True
        u = ((x - x0) / (x1 - x0)).clamp(0.0, 1.0)
        v = ((y - y0) / (y1 - y0)).clamp(0.0, 1.0)
        return torch.stack([u, v], dim=-1)

    def _features(self, x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
        uv = self._normalize(x, y)
        return torch.cat([self.grid.lookup(uv), uv], dim=-1)

    def heads(self, x: torch.Tensor, y: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        """Elevation H and slope at (x, y); both shaped like x."""
        feat = None
        if self.override_elevation is None or self.override_slope is None:
            feat = self._features(x, y)
        if self.override_elevation is not None:
            h = torch.as_tensor(self.override_elevation(x, y), dtype=x.dtype)
            h = h.expand_as(x) if h.dim() == 0 else h
        else:
            h = self.z_scale * self.elevation_net(feat)[..., 0]
        if self.override_slope is not None:
            s = torch.as_tensor(self.override_slope(x, y), dtype=x.dtype)
            s = s.expand_as(x) if s.dim() == 0 else s
        else:
            s = self.slope_net(feat)[..., 0]
        return h, s

    def color(self, x: torch.Tensor, y: torch.Tensor, view_dirs: torch.Tensor) -> torch.Tensor:
        if self.override_color is not None:
            return torch.as_tensor(self.override_color(x, y), dtype=x.dtype)
        feat = self._features(x, y)
        emb = fourier_embed(view_dirs, self.n_fourier)
        return self.color_net(torch.cat([feat, emb], dim=-1))

    def surface_gradient(
        self, x: torch.Tensor, y: torch.Tensor, h: float = FD_STEP
    ) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor]:
        """(H, slope, ∂H/∂x, ∂H/∂y) with central differences in x and y."""
        hh, ss = self.heads(x, y)
        hx = (self.heads(x + h, y)[0] - self.heads(x - h, y)[0]) / (2 * h)
        hy = (self.heads(x, y + h)[0] - self.heads(x, y - h)[0]) / (2 * h)
        return hh, ss, hx, hy


def sdf_eval(field: HeightFieldSDF, p) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Signed distance, elevation, and slope at point(s) p.

    Accepts a single 3-vector or an (N, 3) batch; returns tensors with
    matching leading shape.  d = slope · (p_z − H).
    """
    t = torch.as_tensor(p, dtype=field.dtype) if not torch.is_tensor(p) else p
    if not torch.isfinite(t).all():
        raise ValueError("non-finite point passed to sdf_eval")
    single = t.dim() == 1
    t2 = t.reshape(-1, 3)
    h, s = field.heads(t2[:, 0], t2[:, 1])
    d = s * (t2[:, 2] - h)
    if single:
        return d[0], h[0], s[0]
    return d, h, s


# -- NeuS-style ray rendering -----------------------------------------------


def _aabb_range(origins: np.ndarray, dirs: np.ndarray, lo: np.ndarray, hi: np.ndarray):
    with np.errstate(divide="ignore", invalid="ignore"):
        t0 = (lo - origins) / dirs
        t1 = (hi - origins) / dirs
    near = np.nanmax(np.minimum(t0, t1), axis=-1)
    far = np.nanmin(np.maximum(t0, t1), axis=-1)
    near = np.maximum(near, 1e-4)
    return near, far


def render_sdf_rays(
    field: HeightFieldSDF,
    origins,
    dirs,
    n_samples: int = 64,
    generator: Optional[torch.Generator] = None,
) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Batched NeuS rendering; returns (colors (N,3), depths (N,), opacities (N,)).

    Rays that never enter the field's bounding box contribute zero opacity
    and black color.  With ``generator`` unset, samples are deterministic
    segment midpoints; otherwise stratified.
    """
    if n_samples < 16:
        raise ValueError("n_samples must be >= 16")
    o_np = np.atleast_2d(np.asarray(origins, dtype=np.float64))
    d_np = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
    if o_np.shape[0] == 1 and d_np.shape[0] > 1:
        o_np = np.broadcast_to(o_np, d_np.shape).copy()
    norms = np.linalg.norm(d_np, axis=-1)
    if np.abs(norms - 1.0).max() > 1e-6:
        raise ValueError("ray directions must be unit length")
    x0, x1, y0, y1 = field.extent
    lo = np.array([x0, y0, field.z_bounds[0]])
    hi = np.array([x1, y1, field.z_bounds[1]])
    near, far = _aabb_range(o_np, d_np, lo, hi)
    valid = far > near
    n_ray = d_np.shape[0]

    colors = torch.zeros((n_ray, 3), dtype=field.dtype)
    depths = torch.zeros(n_ray, dtype=field.dtype)
    opacities = torch.zeros(n_ray, dtype=field.dtype)
    if not valid.any():
        return colors, depths, opacities

    o = torch.as_tensor(o_np[valid], dtype=field.dtype)
    d = torch.as_tensor(d_np[valid], dtype=field.dtype)
    t_near = torch.as_tensor(near[valid], dtype=field.dtype)
    t_far = torch.as_tensor(far[valid], dtype=field.dtype)
    m = o.shape[0]

    edges = torch.linspace(0.0, 1.0, n_samples + 1, dtype=field.dtype)
    if generator is None:
        offset = torch.full((m, n_samples), 0.5, dtype=field.dtype)
    else:
        offset = torch.rand((m, n_samples), generator=generator, dtype=field.dtype)
    seg = (t_far - t_near)[:, None]
    starts = t_near[:, None] + edges[None, :-1] * seg
    widths = seg / n_samples
    t_mid = starts + offset * widths  # sample points inside each segment

    def field_sdf(ts: torch.Tensor) -> torch.Tensor:
        pts = o[:, None, :] + ts[..., None] * d[:, None, :]
        flat = pts.reshape(-1, 3)
        dd, _, _ = sdf_eval(field, flat)
        return dd.reshape(ts.shape)

    # NeuS alpha from consecutive SDF values at the jittered sample points
    sdf_vals = field_sdf(t_mid)  # (m, n)
    inv_s = field.inv_std
    cdf = torch.sigmoid(sdf_vals * inv_s)
    alpha = ((cdf[:, :-1] - cdf[:, 1:]) / cdf[:, :-1].clamp_min(1e-9)).clamp(0.0, 1.0)
    trans = torch.cumprod(
        torch.cat([torch.ones((m, 1), dtype=field.dtype), 1.0 - alpha + 1e-10], dim=1), dim=1
    )[:, :-1]
    weights = alpha * trans  # (m, n-1)

    seg_t = 0.5 * (t_mid[:, :-1] + t_mid[:, 1:])
    pts = o[:, None, :] + seg_t[..., None] * d[:, None, :]
    flat = pts.reshape(-1, 3)
    vdirs = d[:, None, :].expand_as(pts).reshape(-1, 3)
    cols = field.color(flat[:, 0], flat[:, 1], vdirs).reshape(m, n_samples - 1, 3)

    acc = weights.sum(dim=1)
    color = (weights[..., None] * cols).sum(dim=1)
    depth = (weights * seg_t).sum(dim=1) / acc.clamp_min(1e-8)

    idx = torch.as_tensor(np.flatnonzero(valid))
    colors[idx] = color
    depths[idx] = depth * (acc > 1e-8)
    opacities[idx] = acc
    return colors, depths, opacities


def render_sdf_ray(field: HeightFieldSDF, origin, direction, n_samples: int = 64):
    """Single-ray convenience wrapper around ``render_sdf_rays``."""
    c, t, a = render_sdf_rays(field, np.asarray(origin)[None], np.asarray(direction)[None], n_samples)
    return c[0], t[0], a[0]


# -- losses ------------------------------------------------------------------


def eikonal_residual(field: HeightFieldSDF, pts: torch.Tensor) -> torch.Tensor:
    """(‖∇d‖₂ − 1)² per point; ∂d/∂z analytic, x/y via finite differences."""
    x, y, z = pts[:, 0], pts[:, 1], pts[:, 2]
    h = FD_STEP
    hh, ss = field.heads(x, y)
    hpx, spx = field.heads(x + h, y)
    hmx, smx = field.heads(x - h, y)
    hpy, spy = field.heads(x, y + h)
    hmy, smy = field.heads(x, y - h)
    dz = z - hh
    gx = (spx - smx) / (2 * h) * dz - ss * (hpx - hmx) / (2 * h)
    gy = (spy - smy) / (2 * h) * dz - ss * (hpy - hmy) / (2 * h)
    gz = ss
    norm = torch.sqrt(gx * gx + gy * gy + gz * gz + 1e-12)
    return (norm - 1.0) ** 2


def sdf_loss(
    field: HeightFieldSDF,
    pixel_batch: Sequence[Tuple[int, int, int]],
    views,
    n_samples: int = 32,
    eikonal_weight: float = 0.1,
    generator: Optional[torch.Generator] = None,
    with_grads: bool = False,
):
    """Photometric L1 on road pixels plus Eikonal over all ray samples.

    ``pixel_batch`` holds (view index, row, col) triples sampled from road
    masks.  Returns (loss, parts) where parts reports the two terms and the
    sampled-ray count; with ``with_grads`` the parts also include gradients
    for every field parameter (autograd, graph retained for composition).
    """
    if len(pixel_batch) == 0:
        raise ValueError("empty pixel batch")
    if with_grads:
        for p in field.parameters().values():
            p.requires_grad_(True)
    ray_cache = {}
    origins, dirs, gts = [], [], []
    for vi, row, col in pixel_batch:
        view = views[vi]
        if vi not in ray_cache:
            ray_cache[vi] = view.pixel_rays()
        origins.append(view.center)
        dirs.append(ray_cache[vi][row, col])
        gts.append(view.image[row, col])
    origins = np.stack(origins)
    dirs = np.stack(dirs)
    colors, _, opacity = render_sdf_rays(field, origins, dirs, n_samples, generator)
    gt = torch.as_tensor(np.stack(gts), dtype=field.dtype)
    l1 = (colors - gt).abs().mean()

    # eikonal points: re-sample along the same rays, uniform in the slab
    o = torch.as_tensor(origins, dtype=field.dtype)
    d = torch.as_tensor(dirs, dtype=field.dtype)
    if generator is None:
        ts = torch.linspace(0.05, 0.95, 8, dtype=field.dtype)[None, :]
    else:
        ts = torch.rand((o.shape[0], 8), generator=generator, dtype=field.dtype)
    lo = np.array([field.extent[0], field.extent[2], field.z_bounds[0]])
    hi = np.array([field.extent[1], field.extent[3], field.z_bounds[1]])
    near, far = _aabb_range(origins, dirs, lo, hi)
    tnear = torch.as_tensor(near, dtype=field.dtype)[:, None]
    tfar = torch.as_tensor(far, dtype=field.dtype)[:, None]
    pts = (o[:, None, :] + (tnear + ts * (tfar - tnear))[..., None] * d[:, None, :]).reshape(-1, 3)
    eik = eikonal_residual(field, pts).mean()

    loss = l1 + eikonal_weight * eik
    parts = {"l1": l1.detach(), "eikonal": eik.detach(), "rays": len(pixel_batch)}
    if with_grads:
        params = field.parameters()
        grads = torch.autograd.grad(loss, list(params.values()), retain_graph=True, allow_unused=True)
        parts["grads"] = {k: g for (k, _), g in zip(params.items(), grads)}
    return loss, parts


# -- Gaussian alignment -------------------------------------------------------


@torch.no_grad()
def align_rsg_gaussians(field: HeightFieldSDF, gaussians: GaussianCollection) -> GaussianCollection:
    """Slave road Gaussians to the field: μ_z = H, flat axis = surface normal.

    Mutates the collection in place (outside autograd) and returns it; x, y,
    opacity, and all color/uncertainty coefficients are untouched.
    """
    if gaussians.kind != NodeKind.ROAD:
        raise ValueError("align_rsg_gaussians requires a road collection")
    x = gaussians.positions[:, 0].detach()
    y = gaussians.positions[:, 1].detach()
    hh, _, hx, hy = field.surface_gradient(x, y)
    normal = torch.stack([-hx, -hy, torch.ones_like(hx)], dim=-1)
    normal = normal / normal.norm(dim=-1, keepdim=True)
    frames = frame_from_normal(normal)
    quats = quat_from_rotmats(frames)
    gaussians.positions.data[:, 2] = hh.to(gaussians.dtype)
    gaussians.rotations.data[:] = quats.to(gaussians.dtype)
    return gaussians


# -- module-level fitting (used by tests and the trainer's warm start) -------


def fit_height_field(
    field: HeightFieldSDF,
    surface_fn: Callable[[np.ndarray, np.ndarray], np.ndarray],
    iters: int = 2500,
    batch: int = 1024,
    lr: float = 1e-2,
    eikonal_weight: float = 0.1,
    hash_l2: float = 0.05,
    seed: int = 0,
) -> HeightFieldSDF:
    """Fits the field to an analytic surface z = surface_fn(x, y).

    Regresses d (L1) against the true signed distance at points straddling
    the surface (vertical offset × local |cos θ|, with ∇surface taken by
    finite differences), plus the Eikonal residual at the same points.
    Distance regression keeps the slope head identified — a pure
    |d|-on-surface objective admits the degenerate slope → 0 optimum.  The
    hash table trains at half rate with an L2 pull so sparse-update noise in
    rarely hit cells cannot dominate the smooth coordinate pathway.
    """
    params = field.parameters()
    opt = Adam(
        [
            {"name": "hash", "params": [params["hash_table"]], "lr": lr * 0.5},
            {
                "name": "nets",
                "params": [p for k, p in params.items() if k.startswith(("elevation", "slope", "color"))],
                "lr": lr,
            },
        ]
    )
    rng = np.random.default_rng(seed)
    x0, x1, y0, y1 = field.extent
    for it in range(iters):
        decay = 0.05 + 0.95 * 0.5 * (1.0 + math.cos(math.pi * it / iters))
        for g in opt.groups:
            g["lr"] = (lr * 0.5 if g["name"] == "hash" else lr) * decay
        xs = rng.uniform(x0, x1, batch)
        ys = rng.uniform(y0, y1, batch)
        zs = np.asarray(surface_fn(xs, ys), dtype=np.float64)
        dz = rng.uniform(-1.5, 1.5, batch)
        gx = (np.asarray(surface_fn(xs + FD_STEP, ys)) - np.asarray(surface_fn(xs - FD_STEP, ys))) / (2 * FD_STEP)
        gy = (np.asarray(surface_fn(xs, ys + FD_STEP)) - np.asarray(surface_fn(xs, ys - FD_STEP))) / (2 * FD_STEP)
        true_d = dz / np.sqrt(1.0 + gx * gx + gy * gy)
        pts = torch.as_tensor(np.stack([xs, ys, zs + dz], axis=-1), dtype=field.dtype)
        d, _, _ = sdf_eval(field, pts)
        target = torch.as_tensor(true_d, dtype=field.dtype)
        loss = (
            (d - target).abs().mean()
            + eikonal_weight * eikonal_residual(field, pts).mean()
            + hash_l2 * params["hash_table"].square().mean()
        )
        opt.zero_grad()
        loss.backward()
        opt.step()
    return field
