"""Loss assembly, pseudo-GT providers, and the staged extrapolation schedule.

The trainer follows a three-phase curriculum: phase A fits the original
capture, phase B introduces laterally shifted cameras supervised by a
pseudo-GT provider, and phase C widens the shift.  Extrapolated views
contribute only the provider-matching term ``L_ex`` (through the pseudo
color encoder); original views carry the full photometric + mask + SDF +
uncertainty-NLL sum.  Everything is seeded per iteration so a resumed run
reproduces the original trajectory bit for bit.
"""

from __future__ import annotations

import zlib
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from .farfield import F_LIMIT
from .io import append_metrics, save_checkpoint
from .metrics import psnr, ssim
from .optim import Adam
from .rasterize import RenderedFrame, composite_nodes
from .road import align_rsg_gaussians, sdf_loss
from .scene import CameraView, NodeKind, SceneGraph, lateral_shift

NLL_EPS = 1e-4  # uncertainty is clamped at 1 - NLL_EPS before the log
_BCE_EPS = 1e-6


class TrainingError(RuntimeError):
    """Raised for unusable inputs or a failing pseudo-GT provider."""


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    """Loss weights, schedule boundaries, and per-group learning rates.

    ``stage_iters`` are the iterations at which phases B and C begin; the
    lateral shifts introduced by those phases are ``shifts[0]`` and
    ``shifts[1]`` meters (sampled in both directions).  ``lambda_lpips`` is
    reserved: the perceptual term is accepted in the weight set but not
    evaluated at desk scale.
    """

    lambda_l1: float = 0.8
    lambda_ssim: float = 0.2
    lambda_lpips: float = 0.05  # reserved, never evaluated
    lambda_mask: float = 0.5
    lambda_sdf: float = 0.5
    lambda_nll: float = 1.0
    lambda_ex: float = 1.0

    total_iters: int = 40000
    stage_iters: Tuple[int, int] = (30000, 35000)
    shifts: Tuple[float, float] = (1.5, 3.0)
    ramp_ex: bool = False  # linear ramp of lambda_ex across phases B/C
    extrapolated_fraction: float = 0.5  # share of B/C iterations on shifts

    lr_position: float = 1e-3
    lr_scale: float = 5e-3
    lr_rotation: float = 1e-3
    lr_opacity: float = 5e-2
    lr_color: float = 2.5e-2
    lr_uncert: float = 2.5e-2
    lr_log_factor: float = 1e-2
    lr_sdf: float = 1e-2
    lr_encoder: float = 1e-3

    sdf_rays: int = 64
    sdf_samples: int = 32
    sdf_eikonal: float = 0.1
    seed: int = 0

    def validate(self) -> None:
        for name in (
            "lambda_l1",
            "lambda_ssim",
            "lambda_lpips",
            "lambda_mask",
            "lambda_sdf",
            "lambda_nll",
            "lambda_ex",
        ):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0, got {getattr(self, name)}")
        s1, s2 = self.stage_iters
        if not (0 < s1 < s2 < self.total_iters):
            raise ValueError(
                f"stage iterations must satisfy 0 < {s1} < {s2} < {self.total_iters}"
            )
        if not (0 < self.shifts[0] < self.shifts[1] <= 10.0):
            raise ValueError(f"shifts must be increasing and <= 10 m, got {self.shifts}")
        for name in (
            "lr_position",
            "lr_scale",
            "lr_rotation",
            "lr_opacity",
            "lr_color",
            "lr_uncert",
            "lr_log_factor",
            "lr_sdf",
            "lr_encoder",
        ):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be > 0")
        if self.sdf_rays < 1:
            raise ValueError("sdf_rays must be >= 1")
        if self.sdf_samples < 16:
            raise ValueError("sdf_samples must be >= 16")
        if not 0.0 <= self.extrapolated_fraction <= 1.0:
            raise ValueError("extrapolated_fraction must be in [0, 1]")

    def scaled(self, factor: float) -> "TrainConfig":
        """The same config with every iteration count scaled by ``factor``."""
        out = replace(
            self,
            total_iters=max(1, round(self.total_iters * factor)),
            stage_iters=(
                round(self.stage_iters[0] * factor),
                round(self.stage_iters[1] * factor),
            ),
        )
        out.validate()
        return out

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stage_iters"] = list(self.stage_iters)
        d["shifts"] = list(self.shifts)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f_.name for f_ in cls.__dataclass_fields__.values()}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        kwargs = dict(d)
        if "stage_iters" in kwargs:
            kwargs["stage_iters"] = tuple(kwargs["stage_iters"])
        if "shifts" in kwargs:
            kwargs["shifts"] = tuple(kwargs["shifts"])
        return cls(**kwargs)


# ---------------------------------------------------------------------------
# pseudo color encoder
# ---------------------------------------------------------------------------


class PseudoColorEncoder:
    """Per-pixel residual MLP bridging renders to pseudo-GT color statistics.

    ``encode(c) = clamp(c + MLP(c), 0, 1)`` with the output layer zero-
    initialized, so a fresh encoder is exactly the identity and the
    geometry never has to absorb a provider's global color bias.
    """

    def __init__(self, hidden: int = 16, seed: int = 0, dtype: torch.dtype = torch.float32):
        gen = torch.Generator().manual_seed(seed)
        scale = (2.0 / 3.0) ** 0.5
        self.w1 = (torch.randn(3, hidden, generator=gen, dtype=dtype) * scale).requires_grad_()
        self.b1 = torch.zeros(hidden, dtype=dtype, requires_grad=True)
        self.w2 = torch.zeros(hidden, 3, dtype=dtype, requires_grad=True)
        self.b2 = torch.zeros(3, dtype=dtype, requires_grad=True)

    def __call__(self, colors: torch.Tensor) -> torch.Tensor:
        if colors.shape[-1] != 3:
            raise ValueError(f"expected trailing RGB axis, got shape {tuple(colors.shape)}")
        flat = colors.reshape(-1, 3)
        residual = torch.relu(flat @ self.w1 + self.b1) @ self.w2 + self.b2
        return (flat + residual).clamp(0.0, 1.0).reshape(colors.shape)

    def parameters(self) -> Dict[str, torch.Tensor]:
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}

    # JSON-safe state (the encoder is ~100 floats, so lists are fine)
    def state_lists(self) -> Dict[str, list]:
        return {k: v.detach().cpu().numpy().tolist() for k, v in self.parameters().items()}

    def load_state_lists(self, state: Dict[str, list]) -> None:
        for name, tensor in self.parameters().items():
            value = torch.as_tensor(state[name], dtype=tensor.dtype)
            if value.shape != tensor.shape:
                raise ValueError(f"encoder state {name!r}: shape {tuple(value.shape)} "
                                 f"!= {tuple(tensor.shape)}")
            with torch.no_grad():
                tensor.copy_(value)


# ---------------------------------------------------------------------------
# pseudo-GT providers
# ---------------------------------------------------------------------------


class PseudoGtProvider:
    """Callable contract: (render, uncertainty, view) -> HxWx3 image in [0, 1].

    ``render`` and ``uncertainty`` are detached numpy arrays of the current
    model output at the extrapolated view.  Implementations must be
    deterministic for a given view.
    """

    def __call__(self, render: np.ndarray, uncertainty: np.ndarray, view: CameraView) -> np.ndarray:
        raise NotImplementedError


class IdentityProvider(PseudoGtProvider):
    """Ground truth as pseudo-GT: renders the analytic scene at the view."""

    def __init__(self, scene) -> None:
        self.scene = scene
        self._cache: Dict[str, np.ndarray] = {}

    def __call__(self, render, uncertainty, view):
        key = view.view_id or ""
        if key not in self._cache:
            self._cache[key] = self.scene.render(view).image
        return self._cache[key]


class AdditiveBiasProvider(PseudoGtProvider):
    """Ground truth plus a constant color bias (clipped to [0, 1])."""

    def __init__(self, scene, bias=0.1) -> None:
        self.scene = scene
        self.bias = np.asarray(bias, dtype=np.float64)
        self._cache: Dict[str, np.ndarray] = {}

    def __call__(self, render, uncertainty, view):
        key = view.view_id or ""
        if key not in self._cache:
            gt = self.scene.render(view).image
            self._cache[key] = np.clip(gt + self.bias, 0.0, 1.0)
        return self._cache[key]


class UncertaintyMaskedNoiseProvider(PseudoGtProvider):
    """Deterministic per-view noise wherever U exceeds ``threshold``.

    Confident regions pass the model's own render through (self-
    distillation); with ``threshold=-1`` every pixel is noise, which is the
    adversarial "pure noise" provider used in robustness checks.
    """

    def __init__(self, seed: int = 0, threshold: float = 0.5) -> None:
        self.seed = seed
        self.threshold = threshold

    def __call__(self, render, uncertainty, view):
        render = np.asarray(render, dtype=np.float64)
        rng = np.random.default_rng((self.seed, zlib.crc32((view.view_id or "").encode())))
        noise = rng.random(render.shape)
        mask = np.asarray(uncertainty) > self.threshold
        return np.where(mask[..., None], noise, np.clip(render, 0.0, 1.0))


class DatasetProvider(PseudoGtProvider):
    """Pseudo-GT looked up from a dataset's pre-rendered shift sets.

    Expects the layout written by ``exgs synth``: images live under
    ``<root>/shifts/<label>/images/<view_id>.png`` where the view id is the
    one :func:`lateral_shift` assigns.  Unknown views raise ``KeyError``,
    which the trainer reports with the offending view id.
    """

    def __init__(self, root) -> None:
        from .io import load_image  # local import keeps module deps one-way

        self.root = Path(root)
        self._load = load_image
        self._paths: Dict[str, Path] = {}
        for png in sorted(self.root.glob("shifts/*/images/*.png")):
            self._paths[png.stem] = png
        self._cache: Dict[str, np.ndarray] = {}

    def __call__(self, render, uncertainty, view):
        key = view.view_id or ""
        if key not in self._paths:
            raise KeyError(f"no pseudo-GT image for view {key!r} under {self.root}")
        if key not in self._cache:
            self._cache[key] = self._load(self._paths[key])
        return self._cache[key]


# ---------------------------------------------------------------------------
# loss terms
# ---------------------------------------------------------------------------


def _bce(alpha: torch.Tensor, mask: np.ndarray) -> torch.Tensor:
    target = torch.as_tensor(np.asarray(mask, dtype=np.float64), dtype=alpha.dtype)
    a = alpha.clamp(_BCE_EPS, 1.0 - _BCE_EPS)
    return -(target * a.log() + (1.0 - target) * (1.0 - a).log()).mean()


def loss_photometric(
    frame: RenderedFrame, view: CameraView, config: TrainConfig
) -> Tuple[torch.Tensor, Dict[str, torch.Tensor]]:
    """lambda_l1 * L1 + lambda_ssim * (1 - SSIM) + lambda_mask * mask-BCE.

    The mask term compares the road and sky node alphas against the view's
    binary masks and is skipped for masks the view does not carry.
    """
    if view.image is None:
        raise ValueError(f"view {view.view_id!r} has no ground-truth image")
    render = frame.color
    gt = torch.as_tensor(np.asarray(view.image), dtype=render.dtype)
    if tuple(render.shape) != tuple(gt.shape):
        raise ValueError(
            f"render {tuple(render.shape)} does not match ground truth {tuple(gt.shape)}"
        )
    l1 = (render - gt).abs().mean()
    ssim_term = 1.0 - ssim(render, gt)
    mask_term = render.new_zeros(())
    for mask, key in ((view.road_mask, NodeKind.ROAD.value), (view.sky_mask, "sky")):
        if mask is None:
            continue
        if key not in frame.node_alpha:
            raise ValueError(f"frame carries no {key!r} node alpha for the mask loss")
        if mask.shape != frame.node_alpha[key].shape:
            raise ValueError(f"{key} mask shape {mask.shape} does not match the render")
        mask_term = mask_term + _bce(frame.node_alpha[key], mask)
    total = (
        config.lambda_l1 * l1
        + config.lambda_ssim * ssim_term
        + config.lambda_mask * mask_term
    )
    return total, {"l1": l1, "ssim": ssim_term, "mask": mask_term}


def loss_nll(uncertainty: torch.Tensor) -> Tuple[torch.Tensor, int]:
    """Mean -log(1 - U) with U clamped at 1 - 1e-4; returns the clamp count."""
    clamped = int((uncertainty > 1.0 - NLL_EPS).sum())
    u = uncertainty.clamp(0.0, 1.0 - NLL_EPS)
    return -torch.log1p(-u).mean(), clamped


def _sdf_pixel_batch(
    view: CameraView, config: TrainConfig, iteration: int
) -> Tuple[list, Optional[torch.Generator]]:
    """Deterministic road-pixel sample for one view (keyed off the view id,
    not the batch composition, so per-view losses stay additive)."""
    if view.road_mask is None:
        return [], None
    rows, cols = np.nonzero(view.road_mask)
    if rows.size == 0:
        return [], None
    seed = (config.seed * 1_000_003 + iteration * 9176 + zlib.crc32((view.view_id or "").encode())) % (
        2**63
    )
    gen = torch.Generator().manual_seed(seed)
    take = min(config.sdf_rays, rows.size)
    sel = torch.randint(0, rows.size, (take,), generator=gen).numpy()
    return [(0, int(r), int(c)) for r, c in zip(rows[sel], cols[sel])], gen


def _validated_pseudo_gt(raw, view: CameraView, render: torch.Tensor) -> np.ndarray:
    if raw is None:
        raise TrainingError(f"provider returned no pseudo-GT for view {view.view_id!r}")
    img = np.asarray(raw, dtype=np.float64)
    if img.shape != tuple(render.shape):
        raise TrainingError(
            f"pseudo-GT for view {view.view_id!r} has shape {img.shape}, "
            f"expected {tuple(render.shape)}"
        )
    if not np.isfinite(img).all() or img.min() < -1e-6 or img.max() > 1.0 + 1e-6:
        raise TrainingError(f"pseudo-GT for view {view.view_id!r} is not an image in [0, 1]")
    return np.clip(img, 0.0, 1.0)


def total_loss(
    graph: SceneGraph,
    views: Sequence[CameraView],
    config: TrainConfig,
    *,
    encoder: Optional[PseudoColorEncoder] = None,
    provider: Optional[PseudoGtProvider] = None,
    iteration: int = 0,
    render_kwargs: Optional[dict] = None,
) -> Tuple[torch.Tensor, Dict[str, float], List[dict]]:
    """Sum of per-view losses with the extrapolation indicator applied.

    Original views contribute the full photometric + mask + SDF + NLL sum;
    extrapolated views contribute only ``lambda_ex * L1(encode(render),
    pseudo-GT)``.  Returns ``(loss, parts, details)`` where ``parts`` holds
    the weighted term totals as floats and ``details`` one record per view
    ({"view", "frame", "target"}) for logging.
    """
    if not views:
        raise TrainingError("total_loss needs at least one view")
    render_kwargs = render_kwargs or {}
    parts = {k: 0.0 for k in ("loss_l1", "loss_ssim", "loss_mask", "loss_sdf", "loss_nll", "loss_ex")}
    parts["nll_clamped"] = 0.0
    details: List[dict] = []
    total: Optional[torch.Tensor] = None

    s1, _ = config.stage_iters
    weight_ex = config.lambda_ex
    if config.ramp_ex:
        span = max(1, config.total_iters - s1)
        weight_ex = config.lambda_ex * min(max((iteration - s1) / span, 0.0), 1.0)

    for view in views:
        frame = composite_nodes(graph, view, **render_kwargs)
        if view.is_extrapolated:
            if provider is None:
                raise TrainingError(
                    f"extrapolated view {view.view_id!r} without a pseudo-GT provider"
                )
            render_np = frame.color.detach().cpu().numpy()
            unc_np = frame.uncertainty.detach().cpu().numpy()
            try:
                raw = provider(render_np, unc_np, view)
            except TrainingError:
                raise
            except Exception as exc:
                raise TrainingError(
                    f"pseudo-GT provider failed for view {view.view_id!r}: {exc}"
                ) from exc
            pseudo_gt = _validated_pseudo_gt(raw, view, frame.color)
            encoded = encoder(frame.color) if encoder is not None else frame.color
            target = torch.as_tensor(pseudo_gt, dtype=frame.color.dtype)
            lex = (encoded - target).abs().mean()
            view_loss = weight_ex * lex
            parts["loss_ex"] += float(view_loss.detach())
            details.append({"view": view, "frame": frame, "target": pseudo_gt})
        else:
            photo, photo_parts = loss_photometric(frame, view, config)
            nll, clamp_count = loss_nll(frame.uncertainty)
            view_loss = photo + config.lambda_nll * nll
            if config.lambda_sdf > 0 and graph.road.sdf is not None:
                batch, gen = _sdf_pixel_batch(view, config, iteration)
                if batch:
                    sdf_term, _ = sdf_loss(
                        graph.road.sdf,
                        batch,
                        [view],
                        n_samples=config.sdf_samples,
                        eikonal_weight=config.sdf_eikonal,
                        generator=gen,
                    )
                    view_loss = view_loss + config.lambda_sdf * sdf_term
                    parts["loss_sdf"] += float(config.lambda_sdf * sdf_term.detach())
            parts["loss_l1"] += float(config.lambda_l1 * photo_parts["l1"].detach())
            parts["loss_ssim"] += float(config.lambda_ssim * photo_parts["ssim"].detach())
            parts["loss_mask"] += float(config.lambda_mask * photo_parts["mask"].detach())
            parts["loss_nll"] += float(config.lambda_nll * nll.detach())
            parts["nll_clamped"] += clamp_count
            details.append({"view": view, "frame": frame, "target": np.asarray(view.image)})
        total = view_loss if total is None else total + view_loss
    return total, parts, details


# ---------------------------------------------------------------------------
# optimizer assembly
# ---------------------------------------------------------------------------


def build_optimizer(
    graph: SceneGraph, config: TrainConfig, encoder: Optional[PseudoColorEncoder] = None
) -> Adam:
    """Adam groups over every trainable family in the scene graph.

    Road Gaussian positions and rotations are deliberately absent: they are
    slaved to the height field by :func:`align_rsg_gaussians` each
    iteration, so only the field's own parameters move them.
    """
    bg = graph.node(NodeKind.BACKGROUND)
    road = graph.road.gaussians
    ff = graph.node(NodeKind.FAR_FIELD)
    groups = [
        {"name": "positions", "params": [bg.positions, ff.positions], "lr": config.lr_position},
        {
            "name": "log_scales",
            "params": [bg.log_scales, road.log_scales, ff.log_scales],
            "lr": config.lr_scale,
        },
        {
            "name": "rotations",
            "params": [bg.rotations, ff.rotations],
            "lr": config.lr_rotation,
            "quaternion": True,
        },
        {
            "name": "opacity_logits",
            "params": [bg.opacity_logits, road.opacity_logits, ff.opacity_logits],
            "lr": config.lr_opacity,
        },
        {
            "name": "color_sh",
            "params": [bg.color_sh, road.color_sh, ff.color_sh, graph.sky.color_sh],
            "lr": config.lr_color,
        },
        {
            "name": "uncert_sh",
            "params": [bg.uncert_sh, road.uncert_sh, ff.uncert_sh, graph.sky.uncert_sh],
            "lr": config.lr_uncert,
        },
    ]
    if ff.log_factors is not None:
        groups.append(
            {
                "name": "log_factors",
                "params": [ff.log_factors],
                "lr": config.lr_log_factor,
                "clamp": (-F_LIMIT, F_LIMIT),
            }
        )
    if graph.road.sdf is not None:
        groups.append(
            {
                "name": "sdf",
                "params": list(graph.road.sdf.parameters().values()),
                "lr": config.lr_sdf,
            }
        )
    if encoder is not None:
        groups.append(
            {"name": "encoder", "params": list(encoder.parameters().values()), "lr": config.lr_encoder}
        )
    return Adam(groups)


# ---------------------------------------------------------------------------
# schedule
# ---------------------------------------------------------------------------


def _phase(iteration: int, config: TrainConfig) -> str:
    if iteration < config.stage_iters[0]:
        return "A"
    if iteration < config.stage_iters[1]:
        return "B"
    return "C"


def _shift_pool(originals: Sequence[CameraView], offsets: Sequence[float]) -> List[CameraView]:
    return [lateral_shift(v, sign * o) for v in originals for o in offsets for sign in (1.0, -1.0)]


def evaluate_psnr(
    graph: SceneGraph,
    views: Sequence[CameraView],
    render_kwargs: Optional[dict] = None,
) -> Tuple[float, List[Tuple[str, float]]]:
    """Mean PSNR of the current graph against each view's attached image."""
    render_kwargs = render_kwargs or {}
    per_view: List[Tuple[str, float]] = []
    with torch.no_grad():
        for view in views:
            if view.image is None:
                raise ValueError(f"view {view.view_id!r} has no image to evaluate against")
            frame = composite_nodes(graph, view, **render_kwargs)
            per_view.append((view.view_id or "", psnr(frame.color, np.asarray(view.image))))
    return float(np.mean([p for _, p in per_view])), per_view


def mean_uncertainty(
    graph: SceneGraph,
    views: Sequence[CameraView],
    render_kwargs: Optional[dict] = None,
) -> float:
    """Mean rendered uncertainty across a set of probe views."""
    render_kwargs = render_kwargs or {}
    vals = []
    with torch.no_grad():
        for view in views:
            frame = composite_nodes(graph, view, **render_kwargs)
            vals.append(float(frame.uncertainty.mean()))
    return float(np.mean(vals))


def run_schedule(
    graph: SceneGraph,
    views: Sequence[CameraView],
    config: TrainConfig,
    provider: Optional[PseudoGtProvider] = None,
    *,
    encoder: Optional[PseudoColorEncoder] = None,
    optimizer: Optional[Adam] = None,
    out_dir=None,
    start_iteration: int = 0,
    end_iteration: Optional[int] = None,
    render_kwargs: Optional[dict] = None,
) -> Tuple[SceneGraph, List[dict]]:
    """Runs the A/B/C curriculum and returns (graph, per-iteration rows).

    Phase A trains on the original views; B adds ``shifts[0]`` lateral
    shifts of every original camera (both directions) supervised by the
    provider; C adds ``shifts[1]``.  The road Gaussians are re-slaved to
    the height field every iteration.  With ``out_dir`` set, metrics are
    appended to ``metrics.csv`` and checkpoints written at each phase
    boundary and at the end.  Per-iteration RNG is keyed on (seed,
    iteration), so resuming from ``start_iteration`` replays the original
    run exactly.
    """
    config.validate()
    originals = [v for v in views if not v.is_extrapolated]
    if not originals:
        raise TrainingError("run_schedule needs at least one original (non-extrapolated) view")
    for v in originals:
        if v.image is None:
            raise TrainingError(f"original view {v.view_id!r} has no training image")

    encoder = encoder if encoder is not None else PseudoColorEncoder(seed=config.seed)
    optimizer = optimizer if optimizer is not None else build_optimizer(graph, config, encoder)
    pool_b = _shift_pool(originals, [config.shifts[0]])
    pool_c = pool_b + _shift_pool(originals, [config.shifts[1]])

    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    rows: List[dict] = []

    def checkpoint(name: str, iteration: int) -> None:
        if out_dir is None:
            return
        save_checkpoint(
            out_dir / name,
            graph,
            iteration=iteration,
            optimizer_state=optimizer.state_tensors(),
            optimizer_step=optimizer.step_count,
            extra={"encoder": encoder.state_lists(), "config": config.to_dict()},
        )

    s1, s2 = config.stage_iters
    stop = config.total_iters if end_iteration is None else min(end_iteration, config.total_iters)
    for it in range(start_iteration, stop):
        phase = _phase(it, config)
        rng = np.random.default_rng((config.seed, 0x5EED, it))
        if phase == "A":
            extrapolated = False
        else:
            extrapolated = rng.random() < config.extrapolated_fraction
        if extrapolated:
            pool = pool_b if phase == "B" else pool_c
            view = pool[int(rng.integers(len(pool)))]
        else:
            view = originals[int(rng.integers(len(originals)))]

        align_rsg_gaussians(graph.road.sdf, graph.road.gaussians)
        optimizer.zero_grad()
        loss, parts, details = total_loss(
            graph,
            [view],
            config,
            encoder=encoder,
            provider=provider,
            iteration=it,
            render_kwargs=render_kwargs,
        )
        loss.backward()
        optimizer.step()

        frame = details[0]["frame"]
        row = {
            "iteration": it,
            "phase": phase,
            "loss_total": float(loss.detach()),
            **{k: parts[k] for k in ("loss_l1", "loss_ssim", "loss_mask", "loss_sdf", "loss_nll", "loss_ex")},
            "psnr": psnr(frame.color.detach(), details[0]["target"]),
            "extrapolated": view.is_extrapolated,
            "view_id": view.view_id,
        }
        rows.append(row)
        if out_dir is not None:
            append_metrics(out_dir / "metrics.csv", [row])
        if it + 1 == s1:
            checkpoint("checkpoint_phase_a.zip", it + 1)
        elif it + 1 == s2:
            checkpoint("checkpoint_phase_b.zip", it + 1)

    align_rsg_gaussians(graph.road.sdf, graph.road.gaussians)
    if stop == config.total_iters:
        checkpoint("checkpoint_final.zip", config.total_iters)
    else:
        checkpoint(f"checkpoint_{stop:06d}.zip", stop)
    return graph, rows
