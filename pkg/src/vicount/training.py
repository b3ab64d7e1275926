"""Pair sampling, augmentation, the four-term density loss, and the
optimization loop (poly-decay schedule, JSONL metrics log).
"""

from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import cv2
import numpy as np
import torch

from . import density
from .annotations import (
    ClipAnnotation,
    FrameAnnotation,
    HeadPoint,
    Supervision,
    derive_flow,
    derive_flow_weak,
    pair_indices,
)
from .density import GtBundle, KernelSpec, gt_bundle
from .errors import ConfigError, SamplingError, TrainingDivergedError, ValidationError
from .model import ModelOutputs, VICModel, save_checkpoint

LOSS_KEYS = ("L_g", "L_s", "L_o", "L_in")


@dataclass
class TrainConfig:
    delta_min: int = 3
    delta_max: int = 8
    lr0: float = 1e-5
    weight_decay: float = 1e-6
    poly_power: float = 0.9
    max_steps: int = 1000
    batch_pairs: int = 1
    crop_size: int = 256
    seed: int = 0
    # Augmentation knobs; defaults follow the standard crop/flip/scale recipe.
    flip: bool = True
    scale_range: tuple | None = (0.8, 1.2)
    resolution_cap: tuple = (2560, 1440)  # (long side, short side)
    sigma: float = density.DEFAULT_SIGMA
    val_every: int = 200
    log_every: int = 10

    def __post_init__(self):
        if not (1 <= self.delta_min <= self.delta_max):
            raise ConfigError(
                f"need 1 <= delta_min <= delta_max, got {self.delta_min}..{self.delta_max}"
            )
        if self.batch_pairs < 1 or self.crop_size < 1:
            raise ConfigError("batch_pairs and crop_size must be >= 1")

    @property
    def kernel(self) -> KernelSpec:
        return KernelSpec(self.sigma, 3.0 * self.sigma)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        data = dict(data)
        for key in ("scale_range", "resolution_cap"):
            if key in data and data[key] is not None:
                data[key] = tuple(data[key])
        return cls(**data)


@dataclass
class TrainClip:
    """A clip annotation together with its frame images (uint8 H x W x 3)."""

    annotation: ClipAnnotation
    frames: list

    def __post_init__(self):
        if len(self.frames) != self.annotation.n_frames:
            raise ValidationError(
                f"{self.annotation.clip_id}: {len(self.frames)} images for "
                f"{self.annotation.n_frames} annotated frames"
            )


def load_train_clip(manifest_path) -> TrainClip:
    """Load a clip manifest along with its PNG frames."""
    from PIL import Image

    from .annotations import load_manifest

    annotation, frame_paths = load_manifest(manifest_path)
    frames = [np.asarray(Image.open(p).convert("RGB")) for p in frame_paths]
    return TrainClip(annotation=annotation, frames=frames)


@dataclass
class PairSample:
    image_a: np.ndarray  # float32 H x W x 3 in [0, 1]
    image_b: np.ndarray
    gt: GtBundle
    delta: int
    frame_a: int
    frame_b: int


def _to_float_image(image: np.ndarray) -> np.ndarray:
    if image.dtype == np.uint8:
        return image.astype(np.float32) / 255.0
    return image.astype(np.float32)


def cap_scale_factor(width: int, height: int, cap: tuple) -> float:
    """Downscale factor so long side <= cap[0] and short side <= cap[1]."""
    long_side, short_side = max(width, height), min(width, height)
    return min(1.0, cap[0] / long_side, cap[1] / short_side)


def _transform_points(points, fx, fy, x0, y0, cw, ch, flipped):
    out = []
    for p in points:
        x = p.x * fx - x0
        y = p.y * fy - y0
        if not (0 <= x < cw and 0 <= y < ch):
            continue
        if flipped:
            x = min(max(cw - 1.0 - x, 0.0), float(np.nextafter(cw, 0)))
        out.append(HeadPoint(x=x, y=y, track_id=p.track_id, flags=p.flags))
    return tuple(out)


def sample_pair(clip: TrainClip, config: TrainConfig, rng: np.random.Generator) -> PairSample:
    """Draw one augmented training pair from a clip.

    Uniform start frame and frame interval; the same resolution cap, scale,
    crop window and flip are applied to both frames and their head points,
    and the ground-truth bundle is rasterized from the transformed points
    (full clips re-derive the flow decomposition from ids after cropping,
    weak clips keep their flags).
    """
    ann = clip.annotation
    n = ann.n_frames
    if n <= config.delta_max:
        raise SamplingError(
            f"{ann.clip_id}: {n} frames cannot host delta_max={config.delta_max}"
        )
    delta = int(rng.integers(config.delta_min, config.delta_max + 1))
    j = int(rng.integers(0, n - delta))
    frame_a, frame_b = ann.frames[j], ann.frames[j + delta]
    img_a = _to_float_image(clip.frames[j])
    img_b = _to_float_image(clip.frames[j + delta])

    h, w = img_a.shape[:2]
    factor = cap_scale_factor(w, h, config.resolution_cap)
    if config.scale_range is not None:
        factor *= float(rng.uniform(*config.scale_range))
    if factor != 1.0:
        new_w = max(1, int(round(w * factor)))
        new_h = max(1, int(round(h * factor)))
        img_a = cv2.resize(img_a, (new_w, new_h), interpolation=cv2.INTER_LINEAR)
        img_b = cv2.resize(img_b, (new_w, new_h), interpolation=cv2.INTER_LINEAR)
        fx, fy = new_w / w, new_h / h
        w, h = new_w, new_h
    else:
        fx = fy = 1.0

    cw, ch = min(config.crop_size, w), min(config.crop_size, h)
    x0 = int(rng.integers(0, w - cw + 1))
    y0 = int(rng.integers(0, h - ch + 1))
    img_a = img_a[y0 : y0 + ch, x0 : x0 + cw]
    img_b = img_b[y0 : y0 + ch, x0 : x0 + cw]

    flip_draw = rng.random()  # drawn unconditionally to keep streams aligned
    flipped = bool(config.flip and flip_draw < 0.5)
    if flipped:
        img_a = img_a[:, ::-1].copy()
        img_b = img_b[:, ::-1].copy()

    new_a = FrameAnnotation(
        frame_index=frame_a.frame_index,
        points=_transform_points(frame_a.points, fx, fy, x0, y0, cw, ch, flipped),
        width=cw, height=ch,
    )
    new_b = FrameAnnotation(
        frame_index=frame_b.frame_index,
        points=_transform_points(frame_b.points, fx, fy, x0, y0, cw, ch, flipped),
        width=cw, height=ch,
    )
    if ann.supervision is Supervision.FULL:
        pair = derive_flow(new_a, new_b)
    else:
        pair = derive_flow_weak(new_a, new_b)
    gt = gt_bundle(pair, new_a, new_b, kernel=config.kernel)
    return PairSample(
        image_a=np.ascontiguousarray(img_a),
        image_b=np.ascontiguousarray(img_b),
        gt=gt,
        delta=delta,
        frame_a=j,
        frame_b=j + delta,
    )


def _map_mae(pred: torch.Tensor, target) -> torch.Tensor:
    grid = target.grid if isinstance(target, density.DensityMap) else target
    gt = torch.as_tensor(np.asarray(grid), dtype=pred.dtype, device=pred.device)
    return (pred.reshape(gt.shape) - gt).abs().mean()


def loss(outputs: ModelOutputs, gt: GtBundle, variant: str = "multiscale"):
    """Per-pair density loss: four per-map MAE terms and their sum.

    Global and shared terms average the two frames' maps; the direct variant
    has no shared supervision and its L_s is zero.
    """
    l_g = (_map_mae(outputs.global_a, gt.global_a)
           + _map_mae(outputs.global_b, gt.global_b)) / 2
    if variant == "direct" or outputs.shared_a is None:
        l_s = torch.zeros((), dtype=l_g.dtype, device=l_g.device)
    else:
        l_s = (_map_mae(outputs.shared_a, gt.shared_a)
               + _map_mae(outputs.shared_b, gt.shared_b)) / 2
    l_o = _map_mae(outputs.outflow_a, gt.outflow_a)
    l_in = _map_mae(outputs.inflow_b, gt.inflow_b)
    total = l_g + l_s + l_o + l_in
    return total, {"L_g": l_g, "L_s": l_s, "L_o": l_o, "L_in": l_in}


def polynomial_lr(step: int, config: TrainConfig) -> float:
    return config.lr0 * (1.0 - step / config.max_steps) ** config.poly_power


def _image_to_tensor(image: np.ndarray, device) -> torch.Tensor:
    return torch.from_numpy(image).permute(2, 0, 1).unsqueeze(0).to(device)


def evaluate_flow_mae(model: VICModel, clips, stride: int, kernel: KernelSpec | None = None):
    """Mean absolute inflow/outflow error per pair over fully labeled clips."""
    kernel = kernel or KernelSpec()
    device = next(model.parameters()).device
    inflow_errors, outflow_errors = [], []
    was_training = model.training
    model.eval()
    with torch.no_grad():
        for clip in clips:
            ann = clip.annotation
            for a, b in pair_indices(ann.n_frames, stride):
                flow = derive_flow(ann.frames[a], ann.frames[b])
                out = model(
                    _image_to_tensor(_to_float_image(clip.frames[a]), device),
                    _image_to_tensor(_to_float_image(clip.frames[b]), device),
                )
                inflow_pred = float(out.inflow_b.sum())
                outflow_pred = float(out.outflow_a.sum())
                inflow_errors.append(abs(inflow_pred - len(flow.inflow)))
                outflow_errors.append(abs(outflow_pred - len(flow.outflow)))
    if was_training:
        model.train()
    if not inflow_errors:
        raise ValidationError("no evaluable pairs at this stride")
    return float(np.mean(inflow_errors)), float(np.mean(outflow_errors))


@dataclass
class TrainResult:
    history: list = field(default_factory=list)
    best_step: int | None = None
    best_val_miae: float | None = None
    checkpoint_dir: Path | None = None


def train(
    dataset,
    model: VICModel,
    config: TrainConfig,
    out_dir=None,
    val_clips=None,
) -> TrainResult:
    """Optimize the model on a list of TrainClips.

    AdamW with polynomial lr decay; per-step components are logged to
    history (and ``train_log.jsonl`` under out_dir). With val_clips the best
    weights by validation inflow MAE are restored at the end, otherwise the
    final weights stand. Non-finite loss aborts with the failing step.
    """
    if not dataset:
        raise ValidationError("training needs at least one clip")
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    optimizer = torch.optim.AdamW(
        model.parameters(), lr=config.lr0, weight_decay=config.weight_decay
    )
    device = next(model.parameters()).device

    log_file = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "train_config.json").write_text(
            json.dumps(asdict(config), indent=2) + "\n"
        )
        log_file = (out_dir / "train_log.jsonl").open("w")

    result = TrainResult()
    best_state = None
    val_stride = max(1, (config.delta_min + config.delta_max) // 2)
    model.train()
    try:
        for step in range(config.max_steps):
            lr = polynomial_lr(step, config)
            for group in optimizer.param_groups:
                group["lr"] = lr

            totals, parts = [], []
            for _ in range(config.batch_pairs):
                clip = dataset[int(rng.integers(0, len(dataset)))]
                sample = sample_pair(clip, config, rng)
                outputs = model(
                    _image_to_tensor(sample.image_a, device),
                    _image_to_tensor(sample.image_b, device),
                )
                total, components = loss(outputs, sample.gt, model.config.variant)
                totals.append(total)
                parts.append(components)
            batch_total = torch.stack(totals).mean()
            if not torch.isfinite(batch_total):
                raise TrainingDivergedError(step, float(batch_total.detach()))

            optimizer.zero_grad()
            batch_total.backward()
            optimizer.step()

            record = {"step": step, "lr": lr}
            for key in LOSS_KEYS:
                record[key] = float(
                    torch.stack([p[key].detach() for p in parts]).mean()
                )
            record["total"] = float(batch_total.detach())
            result.history.append(record)
            if log_file is not None and (
                step % config.log_every == 0 or step == config.max_steps - 1
            ):
                log_file.write(json.dumps(record) + "\n")
                log_file.flush()

            if val_clips and (
                (step + 1) % config.val_every == 0 or step == config.max_steps - 1
            ):
                miae, _ = evaluate_flow_mae(model, val_clips, val_stride, config.kernel)
                if result.best_val_miae is None or miae < result.best_val_miae:
                    result.best_val_miae = miae
                    result.best_step = step
                    best_state = copy.deepcopy(model.state_dict())
    finally:
        if log_file is not None:
            log_file.close()

    if best_state is not None:
        model.load_state_dict(best_state)
    model.eval()
    if out_dir is not None:
        ckpt_dir = out_dir / "checkpoint"
        save_checkpoint(model, ckpt_dir)
        result.checkpoint_dir = ckpt_dir
    return result
