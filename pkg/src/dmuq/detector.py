"""Toy anchor-free BEV detector with a corner-covariance head.

Layout: a two-layer stride-2 convolutional encoder (downsampling 4, 16
features), agent aggregation, a two-layer convolutional decoder and three 1x1
heads per output cell: one classification logit, I*D corner offsets and the
uncertainty parameters of the configured distribution variant (none for
models trained with smooth-L1 regression).
"""
from __future__ import annotations

import enum
import io
import json
import math
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .distributions import BoxUncertainty, Variant, kl_loss_from_chol, loss_isg_from_log_std
from .errors import ConfigError, FormatError, TrainingError, UsageError
from .geometry import safe_quad_iou
from .linalg import RAW_DIAG_BOUND, cholesky_reconstruct, n_chol_params
from .scenegen import DIM, N_CORNERS, Frame, SceneConfig, substream

CHECKPOINT_MAGIC = b"DMUQCP1"
DOWNSAMPLE = 4
REG_WIDTH = N_CORNERS * DIM


class CollabMode(str, enum.Enum):
    LOWER_BOUND = "lb"
    INTERMEDIATE = "inter"
    EARLY_UPPER_BOUND = "early"

    @classmethod
    def parse(cls, value: "str | CollabMode") -> "CollabMode":
        aliases = {"lowerbound": "lb", "intermediate": "inter", "earlyupperbound": "early", "ub": "early", "dn": "inter"}
        key = str(getattr(value, "value", value)).lower().replace("_", "").replace("-", "")
        try:
            return cls(aliases.get(key, key))
        except ValueError as exc:
            raise ConfigError(f"unknown collaboration mode {value!r}") from exc


def head_width(variant: Variant | None) -> int:
    if variant is None:
        return 0
    variant = Variant.parse(variant)
    if variant is Variant.IMG:
        return N_CORNERS * n_chol_params(DIM)
    if variant is Variant.ISG:
        return N_CORNERS * DIM
    return n_chol_params(N_CORNERS * DIM)


@dataclass(frozen=True)
class DetectorConfig:
    feature_dim: int = 16
    hidden_dim: int = 32
    lr: float = 1e-2
    momentum: float = 0.9
    epochs: int = 30
    batch_size: int = 16
    grad_clip: float = 10.0
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    offset_bound: float = 2.0  # in output-cell widths
    smooth_l1_beta: float = 1.0  # in input-cell widths
    score_threshold: float = 0.1
    nms_iou: float = 0.3
    ego: int = 0

    @classmethod
    def from_dict(cls, data: dict) -> "DetectorConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ConfigError(f"unknown detector fields: {sorted(unknown)}")
        return cls(**data)


@dataclass
class Model:
    params: dict[str, Tensor]
    variant: Variant | None
    grid_shape: tuple[int, int]
    cell_size: float
    config: DetectorConfig = field(default_factory=DetectorConfig)

    @property
    def out_shape(self) -> tuple[int, int]:
        return self.grid_shape[0] // DOWNSAMPLE, self.grid_shape[1] // DOWNSAMPLE

    @property
    def out_cell(self) -> float:
        return self.cell_size * DOWNSAMPLE

    @property
    def head_widths(self) -> dict[str, int]:
        return {"cls": 1, "reg": REG_WIDTH, "cov": head_width(self.variant)}

    def copy(self) -> "Model":
        return Model(
            {k: ad.parameter(v.data.copy()) for k, v in self.params.items()},
            self.variant,
            self.grid_shape,
            self.cell_size,
            self.config,
        )

    def flat(self) -> np.ndarray:
        return np.concatenate([p.data.reshape(-1) for p in self.params.values()])

    def cell_centers(self) -> np.ndarray:
        """(h*w, 2) world coordinates of output-cell centers, row-major."""
        h, w = self.out_shape
        rr, cc = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
        return np.stack([(cc.reshape(-1) + 0.5) * self.out_cell, (rr.reshape(-1) + 0.5) * self.out_cell], axis=1)


def init_model(
    scene: SceneConfig,
    variant: Variant | str | None = Variant.IMG,
    config: DetectorConfig | None = None,
    seed: int = 0,
) -> Model:
    config = config or DetectorConfig()
    variant = None if variant is None or str(getattr(variant, "value", variant)).upper() == "NONE" else Variant.parse(variant)
    if scene.downsample != DOWNSAMPLE:
        raise ConfigError(f"the encoder downsamples by {DOWNSAMPLE}, scene config says {scene.downsample}")
    rng = substream(seed, "init")
    f, hdim = config.feature_dim, config.hidden_dim

    def conv(out_c, in_c, k, std=None):
        std = math.sqrt(2.0 / (in_c * k * k)) if std is None else std
        return rng.normal(0.0, std, (out_c, in_c, k, k))

    params = {
        "enc1.w": conv(8, 1, 3),
        "enc1.b": np.zeros(8),
        "enc2.w": conv(f, 8, 3),
        "enc2.b": np.zeros(f),
        "dec1.w": conv(hdim, f, 3),
        "dec1.b": np.zeros(hdim),
        "dec2.w": conv(hdim, hdim, 3),
        "dec2.b": np.zeros(hdim),
        "cls.w": conv(1, hdim, 1, 0.01),
        "cls.b": np.full(1, -math.log(99.0)),
        "reg.w": conv(REG_WIDTH, hdim, 1, 0.01),
        "reg.b": np.zeros(REG_WIDTH),
    }
    width = head_width(variant)
    if width:
        params["cov.w"] = conv(width, hdim, 1, 0.01)
        params["cov.b"] = np.zeros(width)
    grid_shape = scene.grid_shape
    return Model({k: ad.parameter(v) for k, v in params.items()}, variant, grid_shape, scene.cell_size, config)


# -- forward pass ---------------------------------------------------------------

@dataclass
class RawOutputs:
    logits: Tensor  # (B, h, w, 1)
    reg: Tensor  # (B, h, w, I*D)
    cov: Tensor | None  # (B, h, w, width)


def encode(grid, model: Model) -> Tensor:
    """Encoder E: (B, H, W, 1) occupancy -> (B, H/4, W/4, F) features."""
    x = ad.as_tensor(grid)
    if x.ndim == 2:
        x = x.reshape((1,) + x.shape + (1,))
    if x.ndim != 4 or x.shape[3] != 1:
        raise UsageError(f"encoder expects (B, H, W, 1) input, got {x.shape}")
    if x.shape[1] % DOWNSAMPLE or x.shape[2] % DOWNSAMPLE:
        raise UsageError(f"grid {x.shape[1:3]} not divisible by {DOWNSAMPLE}")
    p = model.params
    h = ad.relu(ad.conv2d(x, p["enc1.w"], p["enc1.b"], stride=2, padding=1))
    return ad.relu(ad.conv2d(h, p["enc2.w"], p["enc2.b"], stride=2, padding=1))


def aggregate(features: Sequence[Tensor] | Tensor, mode: CollabMode | str, ego: int = 0) -> Tensor:
    """Combine per-agent feature maps; ``features`` is a list or a tensor with the agent axis first."""
    mode = CollabMode.parse(mode)
    if isinstance(features, Tensor):
        n_agents = features.shape[0]
        stacked = features
    else:
        n_agents = len(features)
        stacked = None
    if n_agents == 0:
        raise UsageError("no feature maps to aggregate")
    if mode is CollabMode.EARLY_UPPER_BOUND:
        if n_agents != 1:
            raise UsageError("early collaboration fuses occupancy before encoding; pass the single fused map")
        return features[0]
    if not 0 <= ego < n_agents:
        raise UsageError(f"ego agent {ego} has no feature map ({n_agents} given)")
    if mode is CollabMode.LOWER_BOUND:
        return features[ego]
    if stacked is None:
        stacked = ad.stack(list(features), axis=0)
    return ad.max_reduce(stacked, axis=0)


def decode_and_head(feature: Tensor, model: Model) -> RawOutputs:
    p = model.params
    h = ad.relu(ad.conv2d(feature, p["dec1.w"], p["dec1.b"], stride=1, padding=1))
    h = ad.relu(ad.conv2d(h, p["dec2.w"], p["dec2.b"], stride=1, padding=1))
    logits = ad.conv2d(h, p["cls.w"], p["cls.b"])
    reg = ad.conv2d(h, p["reg.w"], p["reg.b"])
    cov = ad.conv2d(h, p["cov.w"], p["cov.b"]) if "cov.w" in p else None
    return RawOutputs(logits, reg, cov)


def mode_inputs(frames: Sequence[Frame], mode: CollabMode | str, ego: int = 0) -> np.ndarray:
    """Stack detector inputs: (K, 1, H, W) for lb/early, (K, A, H, W) for intermediate."""
    mode = CollabMode.parse(mode)
    if not len(frames):
        raise UsageError("no frames given")
    if mode is CollabMode.LOWER_BOUND:
        return np.stack([f.grids[ego][None] for f in frames]).astype(np.float64)
    if mode is CollabMode.EARLY_UPPER_BOUND:
        return np.stack([f.fused[None] for f in frames]).astype(np.float64)
    return np.stack([f.grids for f in frames]).astype(np.float64)


def forward(model: Model, inputs: np.ndarray, mode: CollabMode | str) -> RawOutputs:
    mode = CollabMode.parse(mode)
    batch, n_views, height, width = inputs.shape
    if mode is CollabMode.INTERMEDIATE:
        feats = encode(inputs.reshape(batch * n_views, height, width, 1), model)
        feats = feats.reshape((batch, n_views) + feats.shape[1:]).transpose(1, 0, 2, 3, 4)
        fused = aggregate(feats, mode)
    else:
        if n_views != 1:
            raise UsageError(f"{mode.value} mode expects one input view, got {n_views}")
        fused = encode(inputs.reshape(batch, height, width, 1), model)
    return decode_and_head(fused, model)


# -- targets and loss -------------------------------------------------------------

@dataclass
class Targets:
    cls: np.ndarray  # (B, h, w, 1)
    flat_index: np.ndarray  # positives, index into B*h*w
    corners: np.ndarray  # (P, I, D)


def assign_targets(frames: Sequence[Frame], model: Model) -> Targets:
    """A cell is positive when a target box center falls in it; larger boxes win collisions."""
    h, w = model.out_shape
    cls = np.zeros((len(frames), h, w, 1))
    flat: list[int] = []
    corners: list[np.ndarray] = []
    for b, frame in enumerate(frames):
        owner: dict[int, tuple[float, np.ndarray]] = {}
        for box in frame.targets():
            cx, cy = box.center
            c = min(max(int(cx // model.out_cell), 0), w - 1)
            r = min(max(int(cy // model.out_cell), 0), h - 1)
            idx = r * w + c
            if idx not in owner or box.area > owner[idx][0]:
                owner[idx] = (box.area, box.corners)
        for idx in sorted(owner):
            cls[b, idx // w, idx % w, 0] = 1.0
            flat.append(b * h * w + idx)
            corners.append(owner[idx][1])
    return Targets(
        cls,
        np.asarray(flat, dtype=np.int64),
        np.stack(corners) if corners else np.zeros((0, N_CORNERS, DIM)),
    )


def focal_loss(logits: Tensor, targets: np.ndarray, alpha: float = 0.25, gamma: float = 2.0) -> Tensor:
    """Sigmoid focal cross-entropy summed over all cells."""
    p = ad.sigmoid(logits)
    log_p = -ad.softplus(-logits)
    log_not_p = -ad.softplus(logits)
    pos = -alpha * ad.power(1.0 - p, gamma) * log_p
    neg = -(1.0 - alpha) * ad.power(p, gamma) * log_not_p
    return (targets * pos + (1.0 - targets) * neg).sum()


def gather_cells(t: Tensor, flat_index: np.ndarray) -> Tensor:
    """(B, h, w, C) -> (P, C) rows at flattened (batch, row, col) indices."""
    b, h, w, c = t.shape
    return t.reshape(b * h * w, c)[flat_index]


def decode_corners(reg_rows: Tensor, centers: np.ndarray, model: Model) -> Tensor:
    """Per-cell offsets -> absolute corners (P, I, D), tanh-bounded around the cell center."""
    bound = model.config.offset_bound * model.out_cell
    offsets = bound * ad.tanh(reg_rows)
    return (offsets + np.tile(centers, (1, N_CORNERS))).reshape(reg_rows.shape[0], N_CORNERS, DIM)


def regression_loss(model: Model, y: np.ndarray, y_hat: Tensor, cov_rows: Tensor | None) -> Tensor:
    n = y.shape[0]
    if model.variant is None:
        beta = model.config.smooth_l1_beta * model.cell_size
        return ad.smooth_l1(y - y_hat, beta).sum()
    if model.variant is Variant.IMG:
        raw = cov_rows.reshape(n, N_CORNERS, n_chol_params(DIM))
        return kl_loss_from_chol(y, y_hat, raw).sum()
    if model.variant is Variant.ISG:
        raw = cov_rows.reshape(n, N_CORNERS, DIM)
        return loss_isg_from_log_std(y, y_hat, raw).sum()
    flat_y = y.reshape(n, N_CORNERS * DIM)
    return kl_loss_from_chol(flat_y, y_hat.reshape(n, N_CORNERS * DIM), cov_rows).sum()


def detection_loss(model: Model, raw: RawOutputs, targets: Targets) -> Tensor:
    """Focal classification over all cells plus regression over positive cells, per frame."""
    batch = raw.logits.shape[0]
    cfg = model.config
    loss = focal_loss(raw.logits, targets.cls, cfg.focal_alpha, cfg.focal_gamma)
    if targets.flat_index.size:
        h, w = model.out_shape
        centers = model.cell_centers()[targets.flat_index % (h * w)]
        y_hat = decode_corners(gather_cells(raw.reg, targets.flat_index), centers, model)
        cov_rows = gather_cells(raw.cov, targets.flat_index) if raw.cov is not None else None
        loss = loss + regression_loss(model, targets.corners, y_hat, cov_rows)
    return loss * (1.0 / batch)


# -- training ------------------------------------------------------------------------

@dataclass
class TrainResult:
    model: Model
    losses: list[float]


class PreparedSet:
    """Detector inputs and targets for a list of frames in one collaboration mode."""

    def __init__(self, frames: Sequence[Frame], model: Model, mode: CollabMode | str):
        self.mode = CollabMode.parse(mode)
        self.inputs = mode_inputs(frames, self.mode, model.config.ego)
        self.frames = list(frames)
        h, w = model.out_shape
        per_frame = [assign_targets([f], model) for f in frames]
        self.cls = np.concatenate([t.cls for t in per_frame]) if per_frame else np.zeros((0, h, w, 1))
        self.local_index = [t.flat_index for t in per_frame]
        self.corners = [t.corners for t in per_frame]

    def __len__(self) -> int:
        return self.inputs.shape[0]

    def subset(self, order: np.ndarray) -> "PreparedSet":
        out = object.__new__(PreparedSet)
        out.mode = self.mode
        out.inputs = self.inputs[order]
        out.frames = [self.frames[i] for i in order]
        out.cls = self.cls[order]
        out.local_index = [self.local_index[i] for i in order]
        out.corners = [self.corners[i] for i in order]
        return out

    def batch(self, idx: np.ndarray, cells_per_frame: int) -> tuple[np.ndarray, Targets]:
        flat = [self.local_index[i] + b * cells_per_frame for b, i in enumerate(idx)]
        corners = [self.corners[i] for i in idx]
        return self.inputs[idx], Targets(
            self.cls[idx],
            np.concatenate(flat) if flat else np.zeros(0, dtype=np.int64),
            np.concatenate(corners) if corners else np.zeros((0, N_CORNERS, DIM)),
        )


def train(
    model: Model,
    data: PreparedSet,
    epochs: int | None = None,
    lr: float | None = None,
    seed: int = 0,
    stream: str = "batch-order",
) -> TrainResult:
    """SGD with momentum on the detection loss; returns a new model and the per-step losses."""
    if len(data) == 0:
        raise UsageError("cannot train on an empty dataset")
    cfg = model.config
    epochs = cfg.epochs if epochs is None else epochs
    lr = cfg.lr if lr is None else lr
    out = model.copy()
    velocity = {k: np.zeros_like(v.data) for k, v in out.params.items()}
    rng = substream(seed, stream)
    h, w = out.out_shape
    losses: list[float] = []
    for epoch in range(epochs):
        order = rng.permutation(len(data))
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            inputs, targets = data.batch(idx, h * w)
            for p in out.params.values():
                p.zero_grad()
            loss = detection_loss(out, forward(out, inputs, data.mode), targets)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingError(
                    f"loss became non-finite at epoch {epoch}, step {start // cfg.batch_size}"
                    f" (previous loss {losses[-1] if losses else float('nan'):.4g}, lr {lr})"
                )
            loss.backward()
            grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in out.params.items()}
            norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
            scale = cfg.grad_clip / norm if cfg.grad_clip and norm > cfg.grad_clip else 1.0
            for k, p in out.params.items():
                velocity[k] = cfg.momentum * velocity[k] + scale * grads[k]
                p.data = p.data - lr * velocity[k]
            losses.append(value)
    for p in out.params.values():
        p.zero_grad()
    return TrainResult(out, losses)


def evaluate_loss(model: Model, data: PreparedSet, batch_size: int = 64) -> float:
    h, w = model.out_shape
    total = 0.0
    for start in range(0, len(data), batch_size):
        idx = np.arange(start, min(start + batch_size, len(data)))
        inputs, targets = data.batch(idx, h * w)
        total += detection_loss(model, forward(model, inputs, data.mode), targets).item() * len(idx)
    return total / len(data)


# -- inference ------------------------------------------------------------------------------

@dataclass
class Detection:
    score: float
    corners: np.ndarray  # (I, D) world meters
    uncertainty: BoxUncertainty | None
    cell: tuple[int, int]
    frame: int = 0

    @property
    def cov(self) -> np.ndarray | None:
        return None if self.uncertainty is None else self.uncertainty.cov


def covariances_from_raw(raw: np.ndarray, variant: Variant) -> np.ndarray:
    """Head outputs (P, width) -> (P, I, D, D) for IMG/ISG or (P, I*D, I*D) for DMG."""
    n = raw.shape[0]
    if variant is Variant.IMG:
        return cholesky_reconstruct(raw.reshape(n, N_CORNERS, n_chol_params(DIM)))
    if variant is Variant.ISG:
        var = np.exp(2.0 * np.clip(raw.reshape(n, N_CORNERS, DIM), -RAW_DIAG_BOUND, RAW_DIAG_BOUND))
        out = np.zeros((n, N_CORNERS, DIM, DIM))
        out[..., np.arange(DIM), np.arange(DIM)] = var
        return out
    return cholesky_reconstruct(raw)


def nms(candidates: list[Detection], iou_threshold: float) -> list[Detection]:
    """Greedy suppression in descending score; stable for ties."""
    order = sorted(range(len(candidates)), key=lambda i: -candidates[i].score)
    kept: list[Detection] = []
    for i in order:
        cand = candidates[i]
        if all(safe_quad_iou(cand.corners, k.corners) <= iou_threshold for k in kept):
            kept.append(cand)
    return kept


def detect_inputs(
    model: Model,
    inputs: np.ndarray,
    mode: CollabMode | str,
    score_threshold: float | None = None,
    nms_iou: float | None = None,
    batch_size: int = 64,
    frame_offset: int = 0,
) -> list[list[Detection]]:
    score_threshold = model.config.score_threshold if score_threshold is None else score_threshold
    nms_iou = model.config.nms_iou if nms_iou is None else nms_iou
    h, w = model.out_shape
    centers = model.cell_centers()
    results: list[list[Detection]] = []
    for start in range(0, inputs.shape[0], batch_size):
        raw = forward(model, inputs[start : start + batch_size], mode)
        probs = ad.sigmoid(raw.logits).data.reshape(-1, h * w)
        reg = raw.reg.data.reshape(-1, h * w, REG_WIDTH)
        cov = raw.cov.data.reshape(reg.shape[0], h * w, -1) if raw.cov is not None else None
        for b in range(probs.shape[0]):
            keep = np.flatnonzero(probs[b] >= score_threshold)
            if keep.size == 0:
                results.append([])
                continue
            corners = decode_corners(ad.Tensor(reg[b, keep]), centers[keep], model).data
            covs = covariances_from_raw(cov[b, keep], model.variant) if cov is not None else None
            cands = [
                Detection(
                    float(probs[b, c]),
                    corners[n],
                    BoxUncertainty(model.variant, covs[n]) if covs is not None else None,
                    (int(c // w), int(c % w)),
                    frame_offset + start + b,
                )
                for n, c in enumerate(keep)
            ]
            results.append(nms(cands, nms_iou))
    return results


def detect(
    model: Model,
    frames: Sequence[Frame],
    mode: CollabMode | str,
    score_threshold: float | None = None,
    nms_iou: float | None = None,
) -> list[list[Detection]]:
    """Per-frame detections after thresholding and NMS."""
    return detect_inputs(model, mode_inputs(frames, mode, model.config.ego), mode, score_threshold, nms_iou)


# -- checkpoint file -----------------------------------------------------------------------

def checkpoint_bytes(model: Model) -> bytes:
    layers = [{"name": k, "shape": list(v.shape)} for k, v in model.params.items()]
    header = {
        "variant": model.variant.value if model.variant is not None else "NONE",
        "head_widths": model.head_widths,
        "grid_shape": list(model.grid_shape),
        "cell_size": model.cell_size,
        "config": asdict(model.config),
        "layers": layers,
    }
    head = json.dumps(header, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", len(head)))
    buf.write(head)
    for v in model.params.values():
        buf.write(np.ascontiguousarray(v.data, dtype="<f8").tobytes())
    return buf.getvalue()


def save_checkpoint(path: str | Path, model: Model) -> None:
    Path(path).write_bytes(checkpoint_bytes(model))


def load_checkpoint(path: str | Path) -> Model:
    data = Path(path).read_bytes()
    if data[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint file")
    off = len(CHECKPOINT_MAGIC)
    (hlen,) = struct.unpack_from("<I", data, off)
    off += 4
    header = json.loads(data[off : off + hlen])
    off += hlen
    params: dict[str, Tensor] = {}
    for layer in header["layers"]:
        shape = tuple(layer["shape"])
        count = int(np.prod(shape)) if shape else 1
        if off + 8 * count > len(data):
            raise FormatError(f"{path}: parameter payload is truncated")
        params[layer["name"]] = ad.parameter(np.frombuffer(data, "<f8", count, off).reshape(shape))
        off += 8 * count
    if off != len(data):
        raise FormatError(f"{path}: parameter payload size mismatch")
    variant = None if header["variant"] == "NONE" else Variant.parse(header["variant"])
    model = Model(params, variant, tuple(header["grid_shape"]), header["cell_size"], DetectorConfig.from_dict(header["config"]))
    if model.head_widths != header["head_widths"]:
        raise FormatError(f"{path}: head widths do not match variant {header['variant']}")
    return model
