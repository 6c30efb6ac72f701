"""Moving-block bootstrap refinement with direct covariance modeling.

Training pretrains a detector, then repeatedly refines it on block-bootstrap
resamples of the training series. After every refinement the current model is
run on the validation split; residuals of matched corners and the predicted
covariances are pooled over all iterations. Their covariance (epistemic) and
mean (bagged aleatoric) are combined with the final model's own prediction at
inference time.
"""
from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .detector import (
    CollabMode,
    Detection,
    DetectorConfig,
    Model,
    PreparedSet,
    detect,
    init_model,
    train,
)
from .distributions import (
    BoxUncertainty,
    UQStats,
    Variant,
    combine_covariance,
    estimate_sigma_a,
    estimate_sigma_e,
)
from .errors import ConfigError, EstimationError, FormatError, UsageError
from .metrics import match_detections
from .scenegen import DIM, N_CORNERS, Frame, SceneConfig, scene_lengths, substream

STATS_MAGIC = b"DMUQST1"


@dataclass(frozen=True)
class DoubleMConfig:
    block_length: int = 10
    n_bootstraps: int = 4
    refine_epochs: int = 5
    refine_lr_scale: float = 0.1
    match_iou: float = 0.5
    seed: int = 42

    def validate(self) -> "DoubleMConfig":
        if self.block_length < 1:
            raise ConfigError("block_length must be >= 1")
        if self.n_bootstraps < 1:
            raise ConfigError("n_bootstraps must be >= 1")
        if self.refine_epochs < 0:
            raise ConfigError("refine_epochs must be >= 0")
        return self


# -- blocks ------------------------------------------------------------------------

@dataclass(frozen=True)
class BlockCollection:
    """Overlapping length-``block_length`` windows that never cross a scene boundary."""

    n_frames: int
    block_length: int
    starts: np.ndarray

    def __len__(self) -> int:
        return len(self.starts)

    def block(self, b: int) -> np.ndarray:
        start = int(self.starts[b])
        return np.arange(start, start + self.block_length)

    @property
    def n_draws(self) -> int:
        return self.n_frames // self.block_length


def build_blocks(lengths: Sequence[int] | Sequence[Frame], block_length: int) -> BlockCollection:
    """Blocks over scenes of the given lengths (or over a scene-major frame list)."""
    if len(lengths) and isinstance(lengths[0], Frame):
        lengths = scene_lengths(list(lengths))
    lengths = [int(n) for n in lengths]
    if not lengths or sum(lengths) == 0:
        raise ConfigError("no frames to build blocks from")
    if block_length < 1:
        raise ConfigError("block length must be >= 1")
    short = [n for n in lengths if n < block_length]
    if short:
        raise ConfigError(f"block length {block_length} exceeds scene length {min(short)}")
    starts: list[np.ndarray] = []
    offset = 0
    for n in lengths:
        starts.append(offset + np.arange(n - block_length + 1))
        offset += n
    return BlockCollection(offset, block_length, np.concatenate(starts))


@dataclass(frozen=True)
class Resample:
    blocks: np.ndarray  # drawn block ids in draw order
    frames: np.ndarray  # concatenated frame indices


def sample_bootstrap(blocks: BlockCollection, rng: np.random.Generator) -> Resample:
    """Draw floor(K / l) blocks uniformly with replacement and concatenate them."""
    if len(blocks) == 0:
        raise UsageError("empty block collection")
    draws = rng.integers(0, len(blocks), size=blocks.n_draws)
    frames = np.concatenate([blocks.block(b) for b in draws]) if draws.size else np.zeros(0, dtype=np.int64)
    return Resample(draws, frames)


# -- residual harvesting ---------------------------------------------------------

@dataclass
class ResidualSet:
    """One row per matched corner: (iteration, validation frame, object id, corner) and e = y - y_hat."""

    keys: np.ndarray = field(default_factory=lambda: np.zeros((0, 4), dtype=np.int64))
    values: np.ndarray = field(default_factory=lambda: np.zeros((0, DIM)))

    def __len__(self) -> int:
        return len(self.values)

    def extend(self, keys: np.ndarray, values: np.ndarray) -> None:
        self.keys = np.concatenate([self.keys, keys])
        self.values = np.concatenate([self.values, values])

    def pooled(self, variant: Variant | None) -> np.ndarray:
        """Residual vectors at the statistics dimension of ``variant``."""
        if variant is Variant.DMG:
            return self.values.reshape(-1, N_CORNERS * DIM)
        return self.values


def harvest(
    detections: list[list[Detection]],
    frames: Sequence[Frame],
    iteration: int,
    iou_threshold: float,
) -> tuple[np.ndarray, np.ndarray, list[np.ndarray]]:
    """Residual rows, their keys and the matched detections' covariances, in frame order."""
    keys: list[list[int]] = []
    values: list[np.ndarray] = []
    covs: list[np.ndarray] = []
    for k, (dets, frame) in enumerate(zip(detections, frames)):
        gts = frame.target_corners()
        ids = [b.object_id for b in frame.targets()]
        for m in match_detections(dets, gts, iou_threshold):
            det = dets[m.det]
            resid = gts[m.gt] - det.corners
            for i in range(N_CORNERS):
                keys.append([iteration, k, ids[m.gt], i])
                values.append(resid[i])
            if det.uncertainty is not None:
                covs.append(det.uncertainty.cov)
    return (
        np.asarray(keys, dtype=np.int64).reshape(-1, 4),
        np.asarray(values, dtype=np.float64).reshape(-1, DIM),
        covs,
    )


def stats_from_logs(
    variant: Variant | None,
    residuals: ResidualSet,
    covariances: list[np.ndarray],
    cfg: DoubleMConfig,
) -> UQStats:
    vectors = residuals.pooled(variant)
    dim = vectors.shape[1]
    if len(vectors) < dim + 1:
        raise EstimationError(
            f"only {len(vectors)} residual vectors collected (need {dim + 1}); the model matched too few boxes"
        )
    sigma_e = estimate_sigma_e(vectors)
    if variant is Variant.ISG:
        sigma_e = np.diag(np.diag(sigma_e))
    if variant is None:
        sigma_a = np.zeros((dim, dim))
    else:
        sigma_a = estimate_sigma_a(np.stack(covariances))
    tag = variant.value if variant is not None else "NONE"
    return UQStats(sigma_a, sigma_e, cfg.n_bootstraps, len(vectors), cfg.block_length, tag)


@dataclass
class BootstrapResult:
    model: Model
    stats: UQStats
    residuals: ResidualSet
    covariances: list[np.ndarray]
    pretrain_losses: list[float]
    refine_losses: list[list[float]]
    resamples: list[Resample]


def bootstrap_train(
    train_frames: Sequence[Frame],
    val_frames: Sequence[Frame],
    cfg: DoubleMConfig,
    pretrained: Model,
    mode: CollabMode | str,
    prepared: PreparedSet | None = None,
    pretrain_losses: list[float] | None = None,
) -> BootstrapResult:
    """Bootstrap refinement loop shared by Double-M and the MBB baseline."""
    cfg.validate()
    if not val_frames:
        raise UsageError("validation split is empty")
    mode = CollabMode.parse(mode)
    prepared = prepared if prepared is not None else PreparedSet(train_frames, pretrained, mode)
    blocks = build_blocks(list(train_frames), cfg.block_length)
    rng = substream(cfg.seed, "bootstrap")
    model = pretrained
    residuals = ResidualSet()
    covariances: list[np.ndarray] = []
    refine_losses: list[list[float]] = []
    resamples: list[Resample] = []
    lr = model.config.lr * cfg.refine_lr_scale
    for n in range(1, cfg.n_bootstraps + 1):
        resample = sample_bootstrap(blocks, rng)
        resamples.append(resample)
        if cfg.refine_epochs:
            result = train(model, prepared.subset(resample.frames), cfg.refine_epochs, lr, cfg.seed, f"batch-order/boot{n}")
            model = result.model
            refine_losses.append(result.losses)
        else:
            refine_losses.append([])
        dets = detect(model, val_frames, mode)
        keys, values, covs = harvest(dets, val_frames, n, cfg.match_iou)
        residuals.extend(keys, values)
        covariances.extend(covs)
    if len(residuals) == 0:
        raise EstimationError("no validation detection matched a ground truth in any bootstrap iteration")
    stats = stats_from_logs(model.variant, residuals, covariances, cfg)
    return BootstrapResult(model, stats, residuals, covariances, pretrain_losses or [], refine_losses, resamples)


def pretrain(
    train_frames: Sequence[Frame],
    scene: SceneConfig,
    variant: Variant | str | None,
    mode: CollabMode | str,
    detector_cfg: DetectorConfig | None = None,
    seed: int = 42,
    prepared: PreparedSet | None = None,
):
    """Initialize and fully train a detector; returns (model, losses, prepared set)."""
    model0 = init_model(scene, variant, detector_cfg, seed)
    prepared = prepared if prepared is not None else PreparedSet(train_frames, model0, mode)
    result = train(model0, prepared, seed=seed, stream="batch-order/pretrain")
    return result.model, result.losses, prepared


def double_m_train(
    train_frames: Sequence[Frame],
    val_frames: Sequence[Frame],
    cfg: DoubleMConfig,
    scene: SceneConfig,
    variant: Variant | str = Variant.IMG,
    mode: CollabMode | str = CollabMode.INTERMEDIATE,
    detector_cfg: DetectorConfig | None = None,
    pretrained: Model | None = None,
) -> BootstrapResult:
    """Pretrain with the KL regression loss, then bootstrap-refine and pool statistics."""
    variant = Variant.parse(variant)
    losses: list[float] = []
    prepared = None
    if pretrained is None:
        pretrained, losses, prepared = pretrain(train_frames, scene, variant, mode, detector_cfg, cfg.seed)
    elif pretrained.variant is not variant:
        raise UsageError(f"pretrained model has variant {pretrained.variant}, expected {variant.value}")
    return bootstrap_train(train_frames, val_frames, cfg, pretrained, mode, prepared, losses)


def run_mbb(
    train_frames: Sequence[Frame],
    val_frames: Sequence[Frame],
    cfg: DoubleMConfig,
    scene: SceneConfig,
    mode: CollabMode | str = CollabMode.INTERMEDIATE,
    detector_cfg: DetectorConfig | None = None,
    pretrained: Model | None = None,
) -> BootstrapResult:
    """Bootstrap baseline: smooth-L1 regression, no covariance head, residual covariance only."""
    losses: list[float] = []
    prepared = None
    if pretrained is None:
        pretrained, losses, prepared = pretrain(train_frames, scene, None, mode, detector_cfg, cfg.seed)
    elif pretrained.variant is not None:
        raise UsageError("the MBB baseline trains a detector without a covariance head")
    return bootstrap_train(train_frames, val_frames, cfg, pretrained, mode, prepared, losses)


def run_dm(
    train_frames: Sequence[Frame],
    scene: SceneConfig,
    variant: Variant | str = Variant.IMG,
    mode: CollabMode | str = CollabMode.INTERMEDIATE,
    detector_cfg: DetectorConfig | None = None,
    seed: int = 42,
) -> tuple[Model, list[float]]:
    """Direct-modeling baseline: one KL-loss training run; the head's covariance is used as is."""
    model, losses, _ = pretrain(train_frames, scene, Variant.parse(variant), mode, detector_cfg, seed)
    return model, losses


# -- inference ---------------------------------------------------------------------------

def with_covariance(det: Detection, variant: Variant, cov: np.ndarray) -> Detection:
    return Detection(det.score, det.corners, BoxUncertainty(variant, cov), det.cell, det.frame)


def double_m_infer(
    model: Model,
    stats: UQStats,
    frames: Sequence[Frame],
    mode: CollabMode | str,
    detections: list[list[Detection]] | None = None,
) -> list[list[Detection]]:
    """One detection pass, then every covariance becomes sigma_e + (sigma_a + sigma_hat) / 2."""
    if model.variant is None or stats.variant != model.variant.value:
        raise UsageError(f"statistics for {stats.variant} cannot be applied to a {model.variant} model")
    detections = detections if detections is not None else detect(model, frames, mode)
    return [
        [with_covariance(d, model.variant, combine_covariance(stats.sigma_e, stats.sigma_a, d.uncertainty.cov)) for d in dets]
        for dets in detections
    ]


def mbb_infer(
    model: Model,
    stats: UQStats,
    frames: Sequence[Frame],
    mode: CollabMode | str,
    detections: list[list[Detection]] | None = None,
) -> list[list[Detection]]:
    """Every corner of every detection gets the pooled residual covariance."""
    if stats.variant != "NONE":
        raise UsageError("MBB inference expects statistics from a model without a covariance head")
    detections = detections if detections is not None else detect(model, frames, mode)
    cov = np.broadcast_to(stats.sigma_e, (N_CORNERS,) + stats.sigma_e.shape).copy()
    return [[with_covariance(d, Variant.IMG, cov) for d in dets] for dets in detections]


# -- files ----------------------------------------------------------------------------------

def stats_bytes(stats: UQStats) -> bytes:
    buf = io.BytesIO()
    buf.write(STATS_MAGIC)
    buf.write(stats.variant.encode().ljust(4, b"\0"))
    buf.write(struct.pack("<IIQI", stats.block_length, stats.n_bootstraps, stats.n_residuals, stats.dim))
    buf.write(np.ascontiguousarray(stats.sigma_a, dtype="<f8").tobytes())
    buf.write(np.ascontiguousarray(stats.sigma_e, dtype="<f8").tobytes())
    return buf.getvalue()


def save_stats(path: str | Path, stats: UQStats) -> None:
    Path(path).write_bytes(stats_bytes(stats))


def load_stats(path: str | Path) -> UQStats:
    data = Path(path).read_bytes()
    if data[: len(STATS_MAGIC)] != STATS_MAGIC:
        raise FormatError(f"{path}: not a UQ statistics file")
    off = len(STATS_MAGIC)
    variant = data[off : off + 4].rstrip(b"\0").decode()
    off += 4
    block_length, n_boot, n_res, dim = struct.unpack_from("<IIQI", data, off)
    off += struct.calcsize("<IIQI")
    size = dim * dim
    if len(data) != off + 16 * size:
        raise FormatError(f"{path}: matrix payload size mismatch")
    sigma_a = np.frombuffer(data, "<f8", size, off).reshape(dim, dim).astype(np.float64)
    sigma_e = np.frombuffer(data, "<f8", size, off + 8 * size).reshape(dim, dim).astype(np.float64)
    return UQStats(sigma_a, sigma_e, n_boot, n_res, block_length, variant)


def save_residual_log(path: str | Path, residuals: ResidualSet) -> None:
    lines = ["n k j i e1 e2"]
    for key, val in zip(residuals.keys, residuals.values):
        lines.append(" ".join(str(int(x)) for x in key) + " " + " ".join(repr(float(v)) for v in val))
    Path(path).write_text("\n".join(lines) + "\n")


def load_residual_log(path: str | Path) -> ResidualSet:
    rows = [line.split() for line in Path(path).read_text().splitlines()[1:] if line.strip()]
    if not rows:
        return ResidualSet()
    keys = np.array([[int(x) for x in r[:4]] for r in rows], dtype=np.int64)
    values = np.array([[float(x) for x in r[4:]] for r in rows])
    return ResidualSet(keys, values)
