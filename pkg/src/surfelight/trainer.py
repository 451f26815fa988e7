"""Optimization loop: two-stage schedule, Adam, and adaptive density control."""
from __future__ import annotations

import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import lighting, losses, rasterizer
from .errors import ContractViolation
from .losses import LossReport, LossWeights
from .optim import Adam
from .scene import Camera, Scene, Surfels, logit, mlp_backward, mlp_forward, quat_to_rotmat_vjp, surfel_normal

log = logging.getLogger(__name__)

SURFEL_PARAMS = ("position", "rotation", "log_scale", "opacity_logit", "albedo_param", "transfer")
MIN_SURFELS = 16
RESET_OPACITY = 0.01


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    total_iters: int = 50000
    stage1_iters: int = 30000
    lr_mlp: float = 0.002
    lr_mlp_stage2: float = 0.0001
    lr_sh: float = 0.002
    lr_position: float = 1.6e-4  # multiplied by the scene extent
    lr_position_final: float = 1.6e-6
    lr_rotation: float = 1e-3
    lr_scale: float = 5e-3
    lr_opacity: float = 5e-2
    lr_albedo: float = 2.5e-3
    densify_interval: int = 500
    densify_from_iter: int = 500
    densify_until_iter: int = 15000
    opacity_reset_interval: int = 3000
    densify_grad_threshold: float = 2e-4
    prune_opacity_threshold: float = 0.005
    split_scale_fraction: float = 0.01
    max_surfels: int = 5000
    normal_reg_from_iter: int = 7000
    distortion_reg_from_iter: int = 3000
    seed: int = 0
    desk_scale: int = 1
    log_every: int = 1
    checkpoint_every: int = 0
    weights: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        if self.stage1_iters > self.total_iters:
            raise ValueError("stage1_iters must not exceed total_iters")
        for name in ("lr_mlp", "lr_mlp_stage2", "lr_sh", "lr_position", "lr_rotation", "lr_scale", "lr_opacity", "lr_albedo"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.desk_scale < 1:
            raise ValueError("desk_scale must be >= 1")

    SCALED_FIELDS = (
        "total_iters", "stage1_iters", "densify_interval", "densify_from_iter", "densify_until_iter",
        "opacity_reset_interval", "normal_reg_from_iter", "distortion_reg_from_iter",
    )

    def scaled(self) -> "TrainConfig":
        """Copy with every iteration count divided by ``desk_scale``."""
        if self.desk_scale == 1:
            return dataclasses.replace(self)
        changes = {name: max(1, getattr(self, name) // self.desk_scale) for name in self.SCALED_FIELDS}
        changes["desk_scale"] = 1
        return dataclasses.replace(self, **changes)

    def to_json(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        weights = LossWeights(**d.pop("weights", {}))
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(weights=weights, **d)

    def stage(self, it: int) -> int:
        return 1 if it < self.stage1_iters else 2

    def learning_rates(self, it: int, extent: float) -> dict[str, float]:
        frac = min(1.0, it / max(1, self.total_iters))
        pos = self.lr_position * (self.lr_position_final / self.lr_position) ** frac if self.lr_position > 0 else 0.0
        return {
            "position": pos * extent,
            "rotation": self.lr_rotation,
            "log_scale": self.lr_scale,
            "opacity_logit": self.lr_opacity,
            "albedo_param": self.lr_albedo,
            "transfer": self.lr_sh,
            "mlp": self.lr_mlp if self.stage(it) == 1 else self.lr_mlp_stage2,
        }


@dataclass
class Batch:
    image_index: int
    camera: Camera
    image: np.ndarray  # (H, W, 3) linear float
    valid_mask: np.ndarray | None = None  # (H, W) True = use pixel


@dataclass
class StepResult:
    report: LossReport
    surfel_grads: dict[str, np.ndarray]
    light_grads: dict[str, np.ndarray]
    screen_grad: np.ndarray
    visible: np.ndarray
    stage: int


def step_directions(seed: int, it: int, n: int) -> np.ndarray:
    """The Monte-Carlo direction batch shared by every term of one step."""
    return losses.sample_sphere(n, np.random.default_rng([seed, it, 7]))


def compute_loss_and_grads(
    scene: Scene, batch: Batch, config: TrainConfig, it: int, dirs: np.ndarray | None = None
) -> StepResult:
    """Forward and backward through renderer, lighting, light MLP and losses."""
    w = config.weights
    stage = config.stage(it)
    sw = w.stage_weights(stage)
    if dirs is None:
        dirs = step_directions(config.seed, it, w.mc_samples)
    surfels = scene.surfels
    cam = batch.camera
    k = len(surfels)

    light, mlp_cache = mlp_forward(scene.lights, batch.image_index, return_cache=True)
    shading = lighting.shade(surfels, light, cam)
    c_s = shading.radiance_shadowed
    c_u = shading.radiance_unshadowed
    attrs = np.concatenate([c_s, c_u, shading.normal], axis=1)
    res = rasterizer.render(surfels, attrs, cam)
    img_s = res.features[..., 0:3]
    img_u = res.features[..., 3:6]
    normal_img = res.features[..., 6:9]

    report = LossReport()
    g_feat = np.zeros_like(res.features)
    rec_u, g_u = losses.photometric_loss(img_u, batch.image, batch.valid_mask, w.lambda_ssim, with_grad=True)
    report.add("rec_unshadowed", rec_u, sw["rec_unshadowed"])
    g_feat[..., 3:6] = sw["rec_unshadowed"] * g_u
    rec_s, g_s = losses.photometric_loss(img_s, batch.image, batch.valid_mask, w.lambda_ssim, with_grad=True)
    report.add("rec_shadowed", rec_s, sw["rec_shadowed"])
    g_feat[..., 0:3] = sw["rec_shadowed"] * g_s

    # Physical constraints, all on the same direction batch.
    world_normals = surfel_normal(surfels)
    l01, g_d_01 = losses.loss_01(surfels.transfer, dirs, with_grad=True)
    lpos, g_light_pos = losses.loss_positive_light(light, dirs, with_grad=True)
    lmatch, g_d_match, g_n_match = losses.loss_transfer_match(surfels.transfer, world_normals, dirs, with_grad=True)
    lshadow, g_cs, g_cu = losses.loss_shadow_only(c_s, c_u, with_grad=True)
    report.add("loss_01", l01, w.lambda_01)
    report.add("loss_positive_light", lpos, w.lambda_positive)
    report.add("loss_transfer_match", lmatch, w.lambda_transfer_match)
    report.add("loss_shadow_only", lshadow, sw["shadow"])

    lam_n = w.lambda_normal if it >= config.normal_reg_from_iter else 0.0
    lam_d = w.lambda_distortion if it >= config.distortion_reg_from_iter else 0.0
    nc, g_nc_A, g_nc_D, g_nc_n = losses.normal_consistency(res.alpha, res.depth_sum, normal_img, cam, with_grad=True)
    dd, g_dd = losses.depth_distortion(res.distortion, with_grad=True)
    report.add("normal_consistency", nc, lam_n)
    report.add("depth_distortion", dd, lam_d)
    g_feat[..., 6:9] += lam_n * g_nc_n

    bad = report.first_nonfinite()
    if bad is not None:
        raise TrainingError(f"non-finite loss term '{bad}' at iteration {it}")

    rg = rasterizer.backward(
        surfels, cam, res,
        grad_features=g_feat,
        grad_alpha=lam_n * g_nc_A,
        grad_depth_sum=lam_n * g_nc_D,
        grad_distortion=lam_d * g_dd,
    )
    sg = lighting.shade_backward(
        surfels, light, shading,
        grad_rad_shadowed=rg.attributes[:, 0:3] + sw["shadow"] * g_cs,
        grad_rad_unshadowed=rg.attributes[:, 3:6] + sw["shadow"] * g_cu,
        grad_normal=rg.attributes[:, 6:9],
    )
    g_R = np.zeros((k, 3, 3))
    g_R[:, :, 2] = w.lambda_transfer_match * g_n_match
    grads = {
        "position": rg.position,
        "rotation": rg.rotation + sg.rotation + quat_to_rotmat_vjp(surfels.rotation, g_R),
        "log_scale": rg.log_scale,
        "opacity_logit": rg.opacity_logit,
        "albedo_param": sg.albedo_param,
        "transfer": sg.transfer + w.lambda_01 * g_d_01 + w.lambda_transfer_match * g_d_match,
    }
    g_light = sg.light + w.lambda_positive * g_light_pos
    light_grads = mlp_backward(scene.lights, mlp_cache, g_light)

    # Positional gradient expressed in normalized device units, for densification.
    g_cam = grads["position"] @ cam.rotation.T
    z = np.maximum(cam.world_to_cam_points(surfels.position)[:, 2], rasterizer.NEAR_PLANE)
    screen = np.hypot(g_cam[:, 0] * z / cam.fx * cam.width / 2, g_cam[:, 1] * z / cam.fy * cam.height / 2)
    return StepResult(report, grads, light_grads, screen, rg.visible, stage)


@dataclass
class TrainState:
    scene: Scene
    config: TrainConfig
    optimizer: Adam = field(default_factory=Adam)
    iteration: int = 0
    grad_accum: np.ndarray | None = None
    grad_count: np.ndarray | None = None

    def __post_init__(self):
        k = len(self.scene.surfels)
        if self.grad_accum is None:
            self.grad_accum = np.zeros(k)
        if self.grad_count is None:
            self.grad_count = np.zeros(k)


def apply_gradients(state: TrainState, step: StepResult, it: int) -> dict[str, float]:
    lrs = state.config.learning_rates(it, state.scene.extent)
    opt = state.optimizer
    s = state.scene.surfels
    for name in SURFEL_PARAMS:
        opt.step(name, getattr(s, name), step.surfel_grads[name], lrs[name])
    params = state.scene.lights.params()
    for name, arr in params.items():
        opt.step(f"light/{name}", arr, step.light_grads[name], lrs["mlp"])
    if lrs["rotation"] > 0:
        s.normalize_rotations()
    return lrs


def train_step(state: TrainState, batch: Batch) -> tuple[LossReport, dict[str, float]]:
    """One optimization step at ``state.iteration``; advances the iteration counter."""
    it = state.iteration
    cfg = state.config
    step = compute_loss_and_grads(state.scene, batch, cfg, it)
    lrs = apply_gradients(state, step, it)
    vis = step.visible
    state.grad_accum[vis] += step.screen_grad[vis]
    state.grad_count[vis] += 1
    state.iteration = it + 1
    done = state.iteration
    if step.stage == 1 and done < cfg.densify_until_iter:
        if done >= cfg.densify_from_iter and done % cfg.densify_interval == 0:
            densify_and_prune(state)
        if done % cfg.opacity_reset_interval == 0:
            reset_opacity(state)
    return step.report, lrs


# ---------------------------------------------------------------------------
# Adaptive density control
# ---------------------------------------------------------------------------


def _resize_state(state: TrainState, keep: np.ndarray, new: Surfels | None) -> None:
    scene = state.scene
    opt = state.optimizer
    surfels = scene.surfels.subset(keep)
    opt.select_rows(SURFEL_PARAMS, keep)
    added = 0 if new is None else len(new)
    if added:
        surfels = surfels.concat(new)
        opt.append_rows(SURFEL_PARAMS, added)
    scene.surfels = surfels
    state.grad_accum = np.zeros(len(surfels))
    state.grad_count = np.zeros(len(surfels))


def densify_and_prune(state: TrainState, rng: np.random.Generator | None = None) -> None:
    """Clone small / split large high-gradient surfels, then prune transparent ones.

    Children inherit every parameter (including ``d_k``) from their parent.
    Splits sample two child centers from the parent's in-plane Gaussian and
    divide its scales by 1.6.
    """
    cfg = state.config
    scene = state.scene
    s = scene.surfels
    k = len(s)
    if rng is None:
        rng = np.random.default_rng([cfg.seed, state.iteration, 11])
    avg = np.where(state.grad_count > 0, state.grad_accum / np.maximum(state.grad_count, 1), 0.0)
    hot = avg >= cfg.densify_grad_threshold
    room = max(0, cfg.max_surfels - k)
    if hot.sum() > room:
        # Keep the strongest candidates when the budget is tight.
        order = np.argsort(-avg, kind="stable")[:room]
        hot = np.zeros(k, dtype=bool)
        hot[order] = True
    big = s.scale.max(axis=1) > cfg.split_scale_fraction * scene.extent
    clone_idx = np.nonzero(hot & ~big)[0]
    split_idx = np.nonzero(hot & big)[0]

    clones = s.subset(clone_idx)
    children = s.subset(np.repeat(split_idx, 2))
    if len(split_idx):
        R = children.rotation_matrices()
        local = rng.normal(size=(len(children), 2)) * children.scale
        children.position = children.position + R[:, :, 0] * local[:, 0:1] + R[:, :, 1] * local[:, 1:2]
        children.log_scale = children.log_scale - math.log(1.6)
    new = clones.concat(children)

    keep = np.ones(k, dtype=bool)
    keep[split_idx] = False
    opacity = np.concatenate([s.opacity, new.opacity])
    all_keep = np.concatenate([keep, np.ones(len(new), dtype=bool)])
    transparent = opacity < cfg.prune_opacity_threshold
    survivors = all_keep & ~transparent
    if survivors.sum() < MIN_SURFELS:
        # Guard the floor: keep the most opaque candidates.
        cand = np.nonzero(all_keep)[0]
        top = cand[np.argsort(-opacity[cand], kind="stable")[:MIN_SURFELS]]
        survivors = np.zeros_like(all_keep)
        survivors[top] = True
    new_keep = survivors[k:]
    _resize_state(state, np.nonzero(survivors[:k])[0], new.subset(np.nonzero(new_keep)[0]))
    log.debug("densify: clone=%d split=%d -> %d surfels", len(clone_idx), len(split_idx), len(state.scene.surfels))


def reset_opacity(state_or_surfels) -> None:
    """Clamp every opacity to at most 0.01 (logit adjusted in place)."""
    if isinstance(state_or_surfels, TrainState):
        s = state_or_surfels.scene.surfels
        state_or_surfels.optimizer.reset("opacity_logit")
    else:
        s = state_or_surfels
    s.opacity_logit = np.minimum(s.opacity_logit, logit(RESET_OPACITY))


# ---------------------------------------------------------------------------
# Loop
# ---------------------------------------------------------------------------


def image_order(seed: int, it: int, num_images: int) -> int:
    """Training image for iteration ``it``: seeded shuffle per epoch."""
    epoch, pos = divmod(it, num_images)
    perm = np.random.default_rng([seed, epoch, 3]).permutation(num_images)
    return int(perm[pos])


def log_record(it: int, report: LossReport, stage: int, lrs: dict, num_surfels: int, image_index: int) -> dict:
    return {
        "step": it,
        "stage": stage,
        "image_index": image_index,
        "terms": report.terms,
        "weights": report.weights,
        "total": report.total,
        "learning_rates": lrs,
        "num_surfels": num_surfels,
    }


def train(
    state: TrainState,
    batches,
    out_dir: str | Path | None = None,
    progress=None,
    until: int | None = None,
):
    """Run until ``config.total_iters`` (or ``until``); ``batches`` is a list of :class:`Batch`.

    Writes ``train_log.jsonl`` and ``checkpoint/`` into ``out_dir`` when given.
    """
    from .io import save_checkpoint

    cfg = state.config
    if not batches:
        raise ContractViolation("training needs at least one batch")
    out = Path(out_dir) if out_dir is not None else None
    log_file = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        mode = "a" if state.iteration > 0 else "w"
        log_file = open(out / "train_log.jsonl", mode)
    try:
        stop = cfg.total_iters if until is None else min(until, cfg.total_iters)
        while state.iteration < stop:
            it = state.iteration
            b = batches[image_order(cfg.seed, it, len(batches))]
            report, lrs = train_step(state, b)
            if log_file is not None and (it % cfg.log_every == 0 or it == cfg.total_iters - 1):
                rec = log_record(it, report, cfg.stage(it), lrs, len(state.scene.surfels), b.image_index)
                log_file.write(json.dumps(rec, sort_keys=True) + "\n")
            if progress is not None:
                progress(it, report)
            if out is not None and cfg.checkpoint_every and state.iteration % cfg.checkpoint_every == 0:
                save_checkpoint(state, out / "checkpoint")
    finally:
        if log_file is not None:
            log_file.close()
    if out is not None:
        save_checkpoint(state, out / "checkpoint")
    return state


# ---------------------------------------------------------------------------
# Dataset glue
# ---------------------------------------------------------------------------


def batches_from_dataset(dataset) -> list[Batch]:
    """Training batches; occluder-marked pixels are dropped from the loss."""
    out = []
    for e in dataset.train:
        valid = None if e.occluder_mask is None else ~e.occluder_mask
        out.append(Batch(e.image_index, e.camera, e.image, valid))
    return out


def init_scene(dataset, config: TrainConfig) -> Scene:
    """Surfels from the dataset point cloud (or its camera frusta) and a fresh light model."""
    from .scene import LightModel, init_surfels

    rng = np.random.default_rng([config.seed, 1])
    if dataset.points is not None:
        pts = dataset.points
        surfels = init_surfels(pts, rng=rng)
    else:
        centers = np.array([e.camera.center for e in dataset.train])
        lo, hi = centers.min(axis=0), centers.max(axis=0)
        pts = np.array([lo, hi])
        surfels = init_surfels(None, count=1000, bbox=(lo, hi), rng=rng)
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    extent = float(np.linalg.norm(hi - lo) / 2) or 1.0
    # A DC start near the image mean keeps early gradients sane.
    mean = float(np.mean([e.image.mean() for e in dataset.train]))
    lights = LightModel.create(len(dataset.train), rng, dc_init=max(mean, 1e-3) * 2.0)
    return Scene(surfels, lights, extent, lo, hi)
