"""Full model assembly, losses, training, and evaluation.

The model lifts every input view to a feature point cloud (depth network +
feature encoder), renders each cloud to the target camera, fuses the
per-pixel view features with attention, and decodes the fused map to RGB.
"""

from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import checkpoint as ckpt
from .autodiff import AdamState, Tape, Tensor, adam_step
from .errors import (
    DomainError,
    EmptyInputError,
    FormatError,
    MissingDepthError,
    ShapeError,
    TrainingDivergedError,
)
from .geometry import Intrinsics, Pose, camera_center, unproject_t, view_delta_t
from .metrics import psnr, ssim
from .networks import (
    DepthNetConfig,
    DepthUNet,
    EncoderConfig,
    FeatureEncoder,
    FusionConfig,
    FusionTransformer,
    Module,
    RefinementConfig,
    RefinementDecoder,
    ViewConditioner,
    ViewMLPConfig,
    presoftplus,
)
from .scenes import SceneBundle, SceneView
from .splat import SplatConfig, render_cloud_t

VARIANTS = ("fwd-d", "fwd-u", "ablate-no-transformer", "ablate-no-viewdep")
_DTYPES = {"float32": np.float32, "float64": np.float64}


@dataclass
class LossConfig:
    """Loss weights; content_loss switches the image-gradient term."""

    lambda_l2: float = 5.0
    lambda_c: float = 1.0
    lambda_s: float = 5.0
    content_loss: str = "off"  # "off" or "gradient_diff"

    def __post_init__(self):
        if min(self.lambda_l2, self.lambda_c, self.lambda_s) < 0:
            raise DomainError("loss weights must be nonnegative")
        if self.content_loss not in ("off", "gradient_diff"):
            raise DomainError(f"unknown content_loss: {self.content_loss}")


@dataclass
class ModelConfig:
    variant: str = "fwd-d"
    width: float = 0.25
    n_heads: int = 4
    n_input_views: int = 3
    radius_px: float = 1.5
    k_blend: int = 16
    alpha_min_clamp: float = 1e-3
    depth_mode: str = "alpha_sum"
    loss: LossConfig = field(default_factory=LossConfig)
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    depth_prior: float = 2.0
    depth_identity: bool = False
    unet_levels: int = 3
    unet_base_channels: int = 32
    use_spectral_norm: bool = False
    psi_residual: bool = True
    refine_downsample_at: tuple = (3,)
    refine_upsample_at: tuple = (6,)
    noise_std: float = 0.0
    branch_gain: float = 1.0
    head_gain: float = 0.05
    dtype: str = "float32"
    seed: int = 0
    stage1_steps: int = 0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise DomainError(f"unknown variant: {self.variant}")
        if self.dtype not in _DTYPES:
            raise DomainError(f"unknown dtype: {self.dtype}")
        if self.width <= 0 or self.n_input_views < 1 or self.depth_prior <= 0:
            raise DomainError("width, n_input_views, and depth_prior must be positive")
        if self.stage1_steps < 0:
            raise DomainError("stage1_steps must be nonnegative")
        if self.stage1_steps and self.variant != "fwd-u":
            raise DomainError("two-stage training applies to the fwd-u variant only")
        self.refine_downsample_at = tuple(self.refine_downsample_at)
        self.refine_upsample_at = tuple(self.refine_upsample_at)

    @property
    def two_stage(self) -> bool:
        return self.stage1_steps > 0

    @property
    def feature_dim(self) -> int:
        return EncoderConfig(width=self.width, n_heads=self.n_heads).feature_dim

    def splat_config(self) -> SplatConfig:
        return SplatConfig(
            radius_px=self.radius_px,
            k_blend=self.k_blend,
            alpha_min_clamp=self.alpha_min_clamp,
            depth_mode=self.depth_mode,
        )

    def np_dtype(self):
        return _DTYPES[self.dtype]


@dataclass
class ViewInput:
    """One source view: image plus camera, optionally with sensor depth."""

    image: np.ndarray
    intr: Intrinsics
    pose: Pose
    depth: np.ndarray | None = None
    mask: np.ndarray | None = None

    def __post_init__(self):
        h, w = self.intr.height, self.intr.width
        if self.image.shape != (h, w, 3):
            raise ShapeError(f"view image shape {self.image.shape} != ({h}, {w}, 3)")
        if self.depth is not None and self.depth.shape != (h, w):
            raise ShapeError(f"view depth shape {self.depth.shape} != ({h}, {w})")
        if self.mask is None and self.depth is not None:
            self.mask = (self.depth > 0).astype(np.float64)

    @classmethod
    def from_scene_view(cls, view: SceneView) -> "ViewInput":
        mask = view.valid_mask if view.depth is not None else None
        return cls(image=view.image, intr=view.intr, pose=view.pose,
                   depth=view.depth, mask=mask)


@dataclass
class PerViewData:
    """View-independent intermediates: cloud positions, features, depth."""

    positions: Tensor
    features: Tensor
    depth: Tensor
    intr: Intrinsics
    pose: Pose
    depth_sensor: np.ndarray | None
    mask: np.ndarray | None
    has_depth_params: bool


class FwdModel(Module):
    """The full synthesis network for one configured variant."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        dtype = cfg.np_dtype()
        rng = np.random.default_rng(cfg.seed)
        if not cfg.depth_identity:
            self.depth_net = self.add_child("depth_net", DepthUNet(
                DepthNetConfig(width=cfg.width, levels=cfg.unet_levels,
                               base_channels=cfg.unet_base_channels),
                rng=rng, dtype=dtype))
        else:
            self.depth_net = None
        enc_cfg = EncoderConfig(width=cfg.width, n_heads=cfg.n_heads,
                                use_spectral_norm=cfg.use_spectral_norm)
        self.encoder = self.add_child("encoder", FeatureEncoder(enc_cfg, rng=rng, dtype=dtype))
        if cfg.variant != "ablate-no-viewdep":
            self.view_mlp = self.add_child("view_mlp", ViewConditioner(
                ViewMLPConfig(width=cfg.width, residual=cfg.psi_residual),
                enc_cfg.feature_dim, rng=rng, dtype=dtype))
        else:
            self.view_mlp = None
        if cfg.variant != "ablate-no-transformer":
            self.fusion = self.add_child("fusion", FusionTransformer(
                FusionConfig(width=cfg.width, n_heads=cfg.n_heads), rng=rng, dtype=dtype))
        else:
            self.fusion = None
        self.refiner = self.add_child("refiner", RefinementDecoder(
            RefinementConfig(width=cfg.width,
                             downsample_at=cfg.refine_downsample_at,
                             upsample_at=cfg.refine_upsample_at,
                             noise_std=cfg.noise_std,
                             branch_gain=cfg.branch_gain,
                             head_gain=cfg.head_gain),
            enc_cfg.feature_dim, rng=rng, dtype=dtype))
        if self.refiner.out_scale != 1:
            raise ShapeError("refinement resampling plan must return to the input resolution")
        self.splat_cfg = cfg.splat_config()

    # -- per-view lifting (independent of the target camera) ---------------

    def _predict_depth(self, vin: ViewInput) -> tuple[Tensor, np.ndarray | None, np.ndarray | None]:
        cfg = self.cfg
        dtype = cfg.np_dtype()
        h, w = vin.intr.height, vin.intr.width
        rgb = vin.image.reshape(-1, 3)
        use_sensor = cfg.variant != "fwd-u" and vin.depth is not None
        if cfg.variant == "fwd-d" and vin.depth is None:
            raise MissingDepthError("variant fwd-d requires sensor depth on every input view")
        if use_sensor:
            obs = vin.depth.reshape(-1).astype(np.float64)
            mask = (vin.mask.reshape(-1) > 0).astype(np.float64)
            obs = obs * mask
        else:
            obs = np.zeros(h * w)
            mask = np.zeros(h * w)
        filled = np.where(mask > 0, obs, cfg.depth_prior)
        if cfg.depth_identity:
            depth = ad.constant(filled, dtype=dtype)
        else:
            x = np.concatenate([rgb, obs[:, None], mask[:, None]], axis=1)
            shift = presoftplus(filled)[:, None].astype(dtype)
            depth = self.depth_net.forward(ad.constant(x, dtype=dtype), h, w, shift)
        sensor = obs.reshape(h, w) if use_sensor else None
        sensor_mask = mask.reshape(h, w) if use_sensor else None
        return depth, sensor, sensor_mask

    def encode_views(self, inputs: list[ViewInput], stage: int = 2) -> list[PerViewData]:
        """Lift each input view to a world-space feature point cloud."""
        if not inputs:
            raise EmptyInputError("at least one input view is required")
        cfg = self.cfg
        dtype = cfg.np_dtype()
        out = []
        for vin in inputs:
            h, w = vin.intr.height, vin.intr.width
            depth, sensor, sensor_mask = self._predict_depth(vin)
            positions = unproject_t(depth, vin.intr, vin.pose)
            if stage == 1:
                features = ad.constant(vin.image.reshape(-1, 3), dtype=dtype)
            else:
                rgb_t = ad.constant(vin.image.reshape(-1, 3), dtype=dtype)
                features = self.encoder.forward(rgb_t, h, w)
            out.append(PerViewData(
                positions=positions, features=features, depth=depth,
                intr=vin.intr, pose=vin.pose,
                depth_sensor=sensor, mask=sensor_mask,
                has_depth_params=not cfg.depth_identity))
        return out

    # -- target-view rendering ---------------------------------------------

    def render_target(self, per_view: list[PerViewData], intr: Intrinsics, pose: Pose,
                      rng: np.random.Generator | None = None, stage: int = 2,
                      variant: str | None = None, splat_cfg: SplatConfig | None = None,
                      timings: dict | None = None):
        """Render the lifted views to the target camera.

        Returns (image tensor (H*W, 3), aux dict). Stage 1 renders raw RGB
        clouds without fusion or refinement. `variant` overrides the render
        path at inference time where the built modules allow it (the
        ablations can always run; the fusion path needs a fusion module).
        When `timings` is a dict it receives per-phase wall times in ms.
        """
        if not per_view:
            raise EmptyInputError("at least one lifted view is required")
        cfg = self.cfg
        eff_variant = cfg.variant if variant is None else variant
        if eff_variant not in VARIANTS:
            raise DomainError(f"unknown variant: {eff_variant}")
        if eff_variant in ("fwd-d", "fwd-u") and self.fusion is None:
            raise DomainError(
                f"model was built without a fusion module; cannot render as {eff_variant}")
        scfg = self.splat_cfg if splat_cfg is None else splat_cfg
        dtype = cfg.np_dtype()
        hw = intr.height * intr.width
        target_center = camera_center(pose)
        use_viewdep = self.view_mlp is not None and eff_variant != "ablate-no-viewdep"
        t_phase = time.perf_counter()

        if stage == 1 or eff_variant == "ablate-no-transformer":
            feats = [pv.features for pv in per_view]
            if use_viewdep and stage != 1:
                feats = [self.view_mlp.forward(
                    pv.features,
                    view_delta_t(pv.positions, camera_center(pv.pose), target_center))
                    for pv in per_view]
            positions = per_view[0].positions if len(per_view) == 1 else ad.concat(
                [pv.positions for pv in per_view], axis=0)
            features = feats[0] if len(feats) == 1 else ad.concat(feats, axis=0)
            fused, depth_map, view = render_cloud_t(positions, features, intr, pose, scfg)
            coverage = view.coverage.copy()
            rendered_views = [view]
            if timings is not None:
                now = time.perf_counter()
                timings["rasterize_ms"] = (now - t_phase) * 1000.0
                timings["fuse_ms"] = 0.0
                t_phase = now
        else:
            maps = []
            coverage = np.zeros((intr.height, intr.width), dtype=np.int64)
            rendered_views = []
            for pv in per_view:
                feats = pv.features
                if use_viewdep:
                    delta = view_delta_t(pv.positions, camera_center(pv.pose), target_center)
                    feats = self.view_mlp.forward(feats, delta)
                fmap, _, view = render_cloud_t(pv.positions, feats, intr, pose, scfg)
                covered = (view.coverage.reshape(-1) > 0).astype(dtype)[:, None]
                cmask = ad.constant(covered, dtype=dtype)
                fmap = fmap * cmask + self.fusion.empty_token * (1.0 - cmask)
                maps.append(ad.reshape(fmap, (hw, 1, fmap.data.shape[1])))
                coverage += view.coverage
                rendered_views.append(view)
            stack = maps[0] if len(maps) == 1 else ad.concat(maps, axis=1)
            if timings is not None:
                now = time.perf_counter()
                timings["rasterize_ms"] = (now - t_phase) * 1000.0
                t_phase = now
            fused = self.fusion.fuse(stack)
            if timings is not None:
                now = time.perf_counter()
                timings["fuse_ms"] = (now - t_phase) * 1000.0
                t_phase = now

        if stage == 1:
            image = fused  # 3-channel RGB cloud rendering
        else:
            image, ho, wo = self.refiner.forward(fused, intr.height, intr.width, rng)
            if (ho, wo) != (intr.height, intr.width):
                raise ShapeError("refinement changed the output resolution")
        if timings is not None:
            timings["refine_ms"] = (time.perf_counter() - t_phase) * 1000.0
        aux = {
            "fused": fused,
            "coverage": coverage,
            "views": rendered_views,
            "depths": [pv.depth for pv in per_view],
            "height": intr.height,
            "width": intr.width,
        }
        return image, aux

    def forward(self, inputs: list[ViewInput], intr: Intrinsics, pose: Pose,
                rng: np.random.Generator | None = None, stage: int = 2):
        per_view = self.encode_views(inputs, stage=stage)
        image, aux = self.render_target(per_view, intr, pose, rng=rng, stage=stage)
        aux["per_view"] = per_view
        return image, aux


# -- losses ------------------------------------------------------------------


def _grad_pairs(h: int, w: int) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    idx = np.arange(h * w).reshape(h, w)
    return (idx[:, 1:].ravel(), idx[:, :-1].ravel(),
            idx[1:, :].ravel(), idx[:-1, :].ravel())


def loss_terms(pred: Tensor, gt: np.ndarray, per_view: list[PerViewData] | None,
               cfg: LossConfig, height: int, width: int):
    """Weighted training loss.

    Returns (total tensor, components dict). The total is exactly
    lambda_l2*l2 + lambda_c*content + lambda_s*depth with no other terms;
    the depth term covers input views carrying sensor depth and is skipped
    (exact zero) when none do or when every mask is empty.
    """
    gt = np.asarray(gt, dtype=np.float64)
    if gt.ndim == 3:
        gt = gt.reshape(-1, gt.shape[2])
    if pred.data.shape != gt.shape:
        raise ShapeError(f"loss shapes differ: {pred.data.shape} vs {gt.shape}")
    dtype = pred.data.dtype.type
    gt_c = ad.constant(gt.astype(dtype))
    diff = pred - gt_c
    l2 = ad.tmean(diff * diff)
    total = cfg.lambda_l2 * l2
    comps = {"l2": float(l2.data)}

    content = None
    if cfg.content_loss == "gradient_diff":
        xr, xl, yb, yt = _grad_pairs(height, width)
        gx_p = ad.take_rows(pred, xr) - ad.take_rows(pred, xl)
        gy_p = ad.take_rows(pred, yb) - ad.take_rows(pred, yt)
        gx_g = ad.constant((gt[xr] - gt[xl]).astype(dtype))
        gy_g = ad.constant((gt[yb] - gt[yt]).astype(dtype))
        content = 0.5 * ad.tmean(ad.tabs(gx_p - gx_g)) + 0.5 * ad.tmean(ad.tabs(gy_p - gy_g))
        total = total + cfg.lambda_c * content
    comps["content"] = float(content.data) if content is not None else 0.0

    depth_term = None
    if per_view is not None:
        sums = []
        count = 0.0
        for pv in per_view:
            if pv.depth_sensor is None or not pv.has_depth_params:
                continue
            m = pv.mask.reshape(-1)
            n_valid = float(m.sum())
            if n_valid == 0.0:
                continue
            err = ad.tabs(pv.depth - ad.constant(pv.depth_sensor.reshape(-1).astype(dtype)))
            sums.append(ad.tsum(err * ad.constant(m.astype(dtype))))
            count += n_valid
        if sums:
            acc = sums[0]
            for s in sums[1:]:
                acc = acc + s
            depth_term = acc / count
            total = total + cfg.lambda_s * depth_term
    comps["depth"] = float(depth_term.data) if depth_term is not None else 0.0
    comps["total"] = float(total.data)
    return total, comps


def compute_loss(pred: np.ndarray, gt: np.ndarray, cfg: LossConfig,
                 depth_pred: np.ndarray | None = None,
                 depth_sensor: np.ndarray | None = None,
                 mask: np.ndarray | None = None) -> dict:
    """Array-level loss evaluation (no gradients); returns the components."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape or pred.ndim != 3:
        raise ShapeError(f"expected matching (H, W, C) images, got {pred.shape} vs {gt.shape}")
    h, w, c = pred.shape
    per_view = None
    if depth_pred is not None and depth_sensor is not None:
        if depth_pred.shape != depth_sensor.shape:
            raise ShapeError("depth shapes differ")
        m = np.ones_like(depth_sensor) if mask is None else np.asarray(mask, dtype=np.float64)
        per_view = [PerViewData(
            positions=None, features=None,
            depth=ad.constant(depth_pred.reshape(-1)),
            intr=None, pose=None,
            depth_sensor=np.asarray(depth_sensor, dtype=np.float64),
            mask=m, has_depth_params=True)]
    total, comps = loss_terms(ad.constant(pred.reshape(-1, c)), gt.reshape(-1, c),
                              per_view, cfg, h, w)
    return comps


# -- training ----------------------------------------------------------------


@dataclass
class TrainState:
    step: int
    adam: AdamState
    rng: np.random.Generator
    stage_boundaries: list
    loss_history: list = field(default_factory=list)
    curve_steps: list = field(default_factory=list)
    curve_losses: list = field(default_factory=list)

    @property
    def stage(self) -> int:
        for boundary in self.stage_boundaries:
            if self.step < boundary:
                return 1
        return 2


def init_train_state(model: FwdModel, seed: int = 0) -> TrainState:
    boundaries = [model.cfg.stage1_steps] if model.cfg.two_stage else []
    return TrainState(step=0, adam=AdamState(model.parameters()),
                      rng=np.random.default_rng(seed), stage_boundaries=boundaries)


def _sample_batch(scene_list: list[SceneBundle], cfg: ModelConfig, rng: np.random.Generator):
    scene = scene_list[int(rng.integers(len(scene_list)))]
    n = len(scene.views)
    k = min(cfg.n_input_views, max(n - 1, 1))
    perm = rng.permutation(n)
    input_idx = perm[:k]
    rest = perm[k:]
    if rest.size:
        target_idx = int(rest[int(rng.integers(rest.size))])
    else:
        target_idx = int(perm[int(rng.integers(k))])
    return scene, [int(i) for i in input_idx], target_idx


def train(model: FwdModel, scenes: list[SceneBundle], steps: int, *,
          seed: int = 0, state: TrainState | None = None,
          curve_every: int = 100, on_step=None) -> TrainState:
    """Run `steps` optimization steps (appending to `state` when resuming).

    Each step samples one scene, one target view, and up to n_input_views
    source views, all from the training RNG, so a fixed seed gives a
    deterministic run. Raises TrainingDivergedError when the loss goes
    non-finite.
    """
    if not scenes:
        raise EmptyInputError("train requires at least one scene")
    if state is None:
        state = init_train_state(model, seed)
    cfg = model.cfg
    params = model.parameters()
    model.train()
    window: list[float] = []
    for _ in range(steps):
        scene, input_idx, target_idx = _sample_batch(scenes, cfg, state.rng)
        inputs = [ViewInput.from_scene_view(scene.views[i]) for i in input_idx]
        target = scene.views[target_idx]
        stage = state.stage
        with Tape() as tape:
            image, aux = model.forward(inputs, target.intr, target.pose,
                                       rng=state.rng, stage=stage)
            total, comps = loss_terms(image, target.image.reshape(-1, 3),
                                      aux["per_view"], cfg.loss,
                                      target.intr.height, target.intr.width)
            if not np.isfinite(total.data):
                raise TrainingDivergedError(state.step)
            ad.backward(total, tape)
        grads = [p.grad for p in params]
        adam_step(params, grads, state.adam, lr=cfg.lr, beta1=cfg.beta1,
                  beta2=cfg.beta2, eps=cfg.adam_eps)
        model.zero_grad()
        state.step += 1
        state.loss_history.append(comps["total"])
        window.append(comps["total"])
        if curve_every and state.step % curve_every == 0:
            state.curve_steps.append(state.step)
            state.curve_losses.append(float(np.mean(window[-curve_every:])))
            window = window[-curve_every:]
        if on_step is not None:
            on_step(state.step, comps)
    model.eval()
    return state


# -- inference and evaluation -------------------------------------------------


def synthesize(model: FwdModel, scene: SceneBundle, target_pose: Pose,
               input_indices: list[int] | None = None,
               target_intr: Intrinsics | None = None):
    """Render the scene from a new camera; returns (image (H, W, 3), aux)."""
    if not scene.views:
        raise EmptyInputError("scene has no views")
    if input_indices is None:
        input_indices = list(range(min(model.cfg.n_input_views, len(scene.views))))
    inputs = [ViewInput.from_scene_view(scene.views[i]) for i in input_indices]
    intr = target_intr if target_intr is not None else inputs[0].intr
    model.eval()
    image, aux = model.forward(inputs, intr, target_pose)
    return image.data.reshape(intr.height, intr.width, 3).astype(np.float64), aux


def evaluate(model: FwdModel, scenes: list[SceneBundle],
             min_timed_renders: int = 30) -> list[dict]:
    """Held-out metrics per scene view: PSNR, SSIM, and render latency.

    Inputs are the first n_input_views of each bundle; every remaining view
    is a target row. Latency is wall-clock per render, measured after one
    warm-up render and averaged over at least `min_timed_renders` renders
    (cycling over the targets when there are fewer).
    """
    if not scenes:
        raise EmptyInputError("evaluate requires at least one scene")
    model.eval()
    rows = []
    jobs = []
    for scene in scenes:
        n = len(scene.views)
        k = min(model.cfg.n_input_views, max(n - 1, 1))
        input_idx = list(range(k))
        targets = list(range(k, n)) if n > k else [0]
        inputs = [ViewInput.from_scene_view(scene.views[i]) for i in input_idx]
        for t in targets:
            jobs.append((scene, inputs, t))

    timings: dict[int, list[float]] = {i: [] for i in range(len(jobs))}
    results: dict[int, np.ndarray] = {}
    warmed = False
    rounds = 0
    while sum(len(v) for v in timings.values()) < min_timed_renders or rounds == 0:
        for i, (scene, inputs, t) in enumerate(jobs):
            target = scene.views[t]
            if not warmed:
                model.forward(inputs, target.intr, target.pose)
                warmed = True
            t0 = time.perf_counter()
            image, _aux = model.forward(inputs, target.intr, target.pose)
            dt_ms = (time.perf_counter() - t0) * 1000.0
            timings[i].append(dt_ms)
            if i not in results:
                results[i] = image.data.reshape(target.intr.height, target.intr.width, 3)
        rounds += 1
        if rounds > 1000:
            break
    for i, (scene, inputs, t) in enumerate(jobs):
        target = scene.views[t]
        pred = np.clip(results[i].astype(np.float64), 0.0, 1.0)
        rows.append({
            "scene": scene.name,
            "view": t,
            "psnr_db": psnr(pred, target.image),
            "ssim": ssim(pred, target.image),
            "ms_per_frame": float(np.mean(timings[i])),
        })
    return rows


# -- checkpoint glue -----------------------------------------------------------


def _config_to_jsonable(cfg: ModelConfig) -> dict:
    d = dataclasses.asdict(cfg)
    d["loss"] = dataclasses.asdict(cfg.loss)
    d["refine_downsample_at"] = list(cfg.refine_downsample_at)
    d["refine_upsample_at"] = list(cfg.refine_upsample_at)
    return d


def _config_from_jsonable(d: dict) -> ModelConfig:
    data = dict(d)
    data["loss"] = LossConfig(**d["loss"])
    data["refine_downsample_at"] = tuple(d["refine_downsample_at"])
    data["refine_upsample_at"] = tuple(d["refine_upsample_at"])
    known = {f.name for f in dataclasses.fields(ModelConfig)}
    unknown = set(data) - known
    if unknown:
        raise FormatError(f"unknown model config fields: {sorted(unknown)}")
    return ModelConfig(**data)


def save_model(path, model: FwdModel, state: TrainState | None = None) -> None:
    """Serialize parameters (plus optimizer and RNG state when training)."""
    arrays: dict[str, np.ndarray] = {}
    for name, p in model.named_parameters():
        arrays[f"param/{name}"] = p.data
    for name, b in model.named_buffers():
        arrays[f"buffer/{name}"] = b
    meta = {
        "kind": "fwd-model",
        "variant": model.cfg.variant,
        "config": _config_to_jsonable(model.cfg),
        "step": state.step if state is not None else 0,
        "stage": state.stage if state is not None else 2,
        "stage_boundaries": list(state.stage_boundaries) if state is not None
        else ([model.cfg.stage1_steps] if model.cfg.two_stage else []),
        "has_optimizer": state is not None,
    }
    if state is not None:
        for (name, _p), m, v in zip(model.named_parameters(), state.adam.m, state.adam.v):
            arrays[f"adam_m/{name}"] = m
            arrays[f"adam_v/{name}"] = v
        meta["adam_t"] = state.adam.t
        meta["rng"] = state.rng.bit_generator.state
    ckpt.save_checkpoint(path, arrays, meta)


def load_model(path) -> tuple[FwdModel, TrainState | None]:
    """Rebuild a model (and optimizer state when present) from a checkpoint."""
    arrays, meta = ckpt.load_checkpoint(path)
    if meta.get("kind") != "fwd-model":
        raise FormatError(f"checkpoint {path} does not hold a model")
    cfg = _config_from_jsonable(meta["config"])
    model = FwdModel(cfg)
    dtype = cfg.np_dtype()
    for name, p in model.named_parameters():
        key = f"param/{name}"
        if key not in arrays:
            raise FormatError(f"checkpoint {path} is missing parameter {name}")
        if tuple(arrays[key].shape) != p.data.shape:
            raise FormatError(
                f"checkpoint parameter {name} has shape {arrays[key].shape}, expected {p.data.shape}")
        p.data[...] = arrays[key].astype(p.data.dtype)
    for name, b in model.named_buffers():
        key = f"buffer/{name}"
        if key in arrays:
            b[...] = arrays[key].astype(b.dtype)
    state = None
    if meta.get("has_optimizer"):
        params = model.parameters()
        adam = AdamState(params)
        for i, (name, p) in enumerate(model.named_parameters()):
            mk, vk = f"adam_m/{name}", f"adam_v/{name}"
            if mk not in arrays or vk not in arrays:
                raise FormatError(f"checkpoint {path} is missing optimizer state for {name}")
            adam.m[i] = arrays[mk].astype(dtype)
            adam.v[i] = arrays[vk].astype(dtype)
        adam.t = int(meta["adam_t"])
        rng = np.random.default_rng()
        rng.bit_generator.state = meta["rng"]
        state = TrainState(step=int(meta["step"]), adam=adam, rng=rng,
                           stage_boundaries=list(meta.get("stage_boundaries", [])))
    return model, state
