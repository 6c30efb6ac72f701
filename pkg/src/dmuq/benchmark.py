"""Detector x uncertainty-method grid: training, artifact files and metric reports."""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence


from .config import METHODS, RunConfig
from .detector import CollabMode, Detection, Model, detect, load_checkpoint, save_checkpoint
from .distributions import UQStats, Variant
from .doublem import (
    ResidualSet,
    bootstrap_train,
    double_m_infer,
    load_residual_log,
    load_stats,
    mbb_infer,
    pretrain,
    save_residual_log,
    save_stats,
)
from .errors import ConfigError, FormatError, MetricError, UsageError
from .metrics import average_precision, nll_details
from .scenegen import Frame, SceneConfig, generate_dataset, load_dataset

log = logging.getLogger(__name__)

REPORT_FIELDS = ("mode", "uq_method", "ap50", "ap70", "nll50", "nll70", "n_det", "n_gt", "seconds")
SPLITS = ("train", "val", "test")


# -- data -----------------------------------------------------------------------------------

def generate_splits(cfg: RunConfig) -> dict[str, list[Frame]]:
    out = {}
    for split in SPLITS:
        scene, first = cfg.split_scene(split)
        out[split] = generate_dataset(scene, first_scene=first)
    return out


def dataset_path(directory: str | Path, split: str) -> Path:
    return Path(directory) / f"{split}.dmuqds"


GEOMETRY_FIELDS = ("world_width", "world_length", "grid_cells", "n_agents", "downsample")


def load_splits(
    directory: str | Path,
    splits: Iterable[str] = SPLITS,
    expect: SceneConfig | None = None,
) -> dict[str, list[Frame]]:
    """Read dataset files; with ``expect``, refuse data whose grid geometry differs."""
    out = {}
    for split in splits:
        path = dataset_path(directory, split)
        if not path.is_file():
            raise UsageError(f"missing dataset file {path}; run 'gen' first")
        frames, scene = load_dataset(path)
        if expect is not None:
            diff = [f for f in GEOMETRY_FIELDS if getattr(scene, f) != getattr(expect, f)]
            if diff:
                raise ConfigError(f"{path} was generated with different {', '.join(diff)} than the config")
        out[split] = frames
    return out


# -- artifacts ----------------------------------------------------------------------------

@dataclass
class Artifact:
    """Everything one (mode, method) cell needs at test time, plus its training logs."""

    mode: str
    method: str
    model: Model
    stats: UQStats | None = None
    losses: list[float] = field(default_factory=list)
    residuals: ResidualSet | None = None
    train_seconds: float = 0.0

    @property
    def variant(self) -> str:
        return self.model.variant.value if self.model.variant is not None else "NONE"


def cell_dir(root: str | Path, mode: str, method: str, variant: str | None = None) -> Path:
    name = method if variant in (None, "IMG", "NONE") else f"{method}-{variant}"
    return Path(root) / CollabMode.parse(mode).value / name


def save_artifact(root: str | Path, art: Artifact, variant_suffix: bool = False) -> Path:
    out = cell_dir(root, art.mode, art.method, art.variant if variant_suffix else None)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out / "model.dmuqcp", art.model)
    (out / "losses.txt").write_text("".join(f"{v!r}\n" for v in art.losses))
    if art.stats is not None:
        save_stats(out / "stats.dmuqst", art.stats)
    if art.residuals is not None:
        save_residual_log(out / "residuals.txt", art.residuals)
    return out


def load_artifact(root: str | Path, mode: str, method: str, variant: str | None = None) -> Artifact:
    path = cell_dir(root, mode, method, variant)
    ckpt = path / "model.dmuqcp"
    if not ckpt.is_file():
        raise UsageError(f"missing artifact {ckpt}")
    model = load_checkpoint(ckpt)
    stats = None
    if method in ("mbb", "doublem"):
        if not (path / "stats.dmuqst").is_file():
            raise UsageError(f"missing statistics file in {path}")
        stats = load_stats(path / "stats.dmuqst")
    losses = [float(x) for x in (path / "losses.txt").read_text().split()] if (path / "losses.txt").is_file() else []
    residuals = load_residual_log(path / "residuals.txt") if (path / "residuals.txt").is_file() else None
    return Artifact(CollabMode.parse(mode).value, method, model, stats, losses, residuals)


# -- training -------------------------------------------------------------------------------

def _needs(methods: Sequence[str]) -> tuple[bool, bool]:
    for m in methods:
        if m not in METHODS:
            raise UsageError(f"unknown method {m!r}; expected one of {METHODS}")
    return any(m in ("dm", "doublem") for m in methods), any(m in ("none", "mbb") for m in methods)


def train_cells(
    splits: dict[str, list[Frame]],
    cfg: RunConfig,
    mode: str,
    methods: Sequence[str],
    variant: str | Variant | None = None,
) -> dict[str, Artifact]:
    """Train the requested methods for one mode.

    DM and Double-M share one pretrained probabilistic detector; None and MBB
    share one pretrained smooth-L1 detector. Both refinement loops start from
    the shared weights, so every cell is as if trained alone.
    """
    mode = CollabMode.parse(mode).value
    variant = Variant.parse(variant or cfg.detector.variant)
    want_prob, want_det = _needs(methods)
    scene = cfg.scene
    det_cfg = cfg.detector_config()
    dm_cfg = cfg.doublem_config()
    train, val = splits["train"], splits["val"]
    out: dict[str, Artifact] = {}
    for probabilistic, wanted in ((True, want_prob), (False, want_det)):
        if not wanted:
            continue
        t0 = time.perf_counter()
        base, losses, prepared = pretrain(train, scene, variant if probabilistic else None, mode, det_cfg, cfg.seed)
        t_pre = time.perf_counter() - t0
        single, boot = ("dm", "doublem") if probabilistic else ("none", "mbb")
        log.info("pretrained %s/%s in %.1fs (final loss %.4g)", mode, variant.value if probabilistic else "none", t_pre, losses[-1])
        if single in methods:
            out[single] = Artifact(mode, single, base, None, losses, None, t_pre)
        if boot in methods:
            t1 = time.perf_counter()
            res = bootstrap_train(train, val, dm_cfg, base, mode, prepared, losses)
            trace = losses + [v for run in res.refine_losses for v in run]
            out[boot] = Artifact(mode, boot, res.model, res.stats, trace, res.residuals, t_pre + time.perf_counter() - t1)
            log.info("bootstrap %s/%s done: %d residual vectors", mode, boot, res.stats.n_residuals)
    return {m: out[m] for m in methods}


# -- inference and scoring -----------------------------------------------------------------

def predict(art: Artifact, frames: Sequence[Frame]) -> list[list[Detection]]:
    if art.method == "doublem":
        return double_m_infer(art.model, art.stats, frames, art.mode)
    if art.method == "mbb":
        return mbb_infer(art.model, art.stats, frames, art.mode)
    if art.method == "none":
        dets = detect(art.model, frames, art.mode)
        return [[Detection(d.score, d.corners, None, d.cell, d.frame) for d in ds] for ds in dets]
    return detect(art.model, frames, art.mode)


@dataclass
class MetricReport:
    mode: str
    uq_method: str
    ap50: float | None = None
    ap70: float | None = None
    nll50: float | None = None
    nll70: float | None = None
    n_det: int | None = None
    n_gt: int | None = None
    seconds: float | None = None
    variant: str | None = None
    n_matched50: int | None = None
    n_matched70: int | None = None

    def record(self, with_variant: bool = False) -> dict:
        rec = {k: getattr(self, k) for k in REPORT_FIELDS}
        if with_variant:
            rec = {"variant": self.variant, **rec}
        return rec


def _nll(dets, gts, thr) -> tuple[float | None, int | None]:
    try:
        res = nll_details(dets, gts, thr)
    except MetricError:
        return None, 0
    return res.value, res.n_matched


def score_cell(art: Artifact, frames: Sequence[Frame], cfg: RunConfig, detections=None) -> MetricReport:
    t0 = time.perf_counter()
    dets = detections if detections is not None else predict(art, frames)
    gts = [f.target_corners() for f in frames]
    lo, hi = cfg.eval.iou_thresholds
    rep = MetricReport(art.mode, art.method, variant=art.variant)
    rep.ap50 = average_precision(dets, gts, lo)
    rep.ap70 = average_precision(dets, gts, hi)
    if art.method != "none":
        rep.nll50, rep.n_matched50 = _nll(dets, gts, lo)
        rep.nll70, rep.n_matched70 = _nll(dets, gts, hi)
    rep.n_det = sum(len(d) for d in dets)
    rep.n_gt = sum(len(g) for g in gts)
    if cfg.eval.record_time:
        rep.seconds = art.train_seconds + time.perf_counter() - t0
    return rep


def evaluate_artifacts(
    root: str | Path,
    frames: Sequence[Frame],
    cfg: RunConfig,
    modes: Sequence[str] | None = None,
    methods: Sequence[str] | None = None,
) -> list[MetricReport]:
    """Score every stored grid cell; cells without artifacts become rows of gaps."""
    rows = []
    for mode in modes or cfg.eval.modes:
        for method in methods or cfg.eval.methods:
            try:
                art = load_artifact(root, mode, method)
            except UsageError as exc:
                log.warning("%s", exc)
                rows.append(MetricReport(CollabMode.parse(mode).value, method))
                continue
            rows.append(score_cell(art, frames, cfg))
    return rows


def run_benchmark(
    splits: dict[str, list[Frame]],
    cfg: RunConfig,
    modes: Sequence[str] | None = None,
    methods: Sequence[str] | None = None,
    artifacts: str | Path | None = None,
) -> list[MetricReport]:
    """Train and score the full grid in fixed (mode, method) order."""
    rows = []
    methods = list(methods or cfg.eval.methods)
    for mode in modes or cfg.eval.modes:
        arts = train_cells(splits, cfg, mode, methods)
        for method in methods:
            if artifacts is not None:
                save_artifact(artifacts, arts[method])
            rows.append(score_cell(arts[method], splits["test"], cfg))
    return rows


def run_ablation(
    splits: dict[str, list[Frame]],
    cfg: RunConfig,
    variants: Sequence[str] | None = None,
    methods: Sequence[str] = ("dm", "doublem"),
    artifacts: str | Path | None = None,
    reuse: dict[str, dict[str, Artifact]] | None = None,
) -> list[MetricReport]:
    """Distribution-variant grid for probabilistic methods in one mode."""
    rows = []
    mode = cfg.eval.ablation_mode
    for v in variants or cfg.eval.ablation_variants:
        v = Variant.parse(v).value
        arts = (reuse or {}).get(v) or train_cells(splits, cfg, mode, methods, v)
        for method in methods:
            if artifacts is not None:
                save_artifact(artifacts, arts[method], variant_suffix=True)
            rows.append(score_cell(arts[method], splits["test"], cfg))
    return rows


# -- report files -----------------------------------------------------------------------------

def _fmt(value, digits: int = 4) -> str:
    if value is None or (isinstance(value, float) and not math.isfinite(value)):
        return "-"
    if isinstance(value, float):
        return f"{value:.{digits}f}"
    return str(value)


def format_table(rows: Sequence[MetricReport], cfg: RunConfig, with_variant: bool = False) -> str:
    lo, hi = cfg.eval.iou_thresholds
    head = [
        "# AP: all-point interpolated precision envelope over the test split",
        f"# NLL: mean over matched corners (DMG joint density divided by 4); score threshold {cfg.eval.score_threshold}",
        f"# ap50/nll50 at IoU {lo}, ap70/nll70 at IoU {hi}; '-' marks a gap",
    ]
    names = (("variant",) if with_variant else ()) + REPORT_FIELDS
    table = [list(names)]
    for r in rows:
        rec = r.record(with_variant)
        table.append([_fmt(rec[k], 2 if k == "seconds" else 4) for k in names])
    widths = [max(len(row[i]) for row in table) for i in range(len(names))]
    lines = ["  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip() for row in table]
    return "\n".join(head + lines) + "\n"


def write_report(path: str | Path, rows: Sequence[MetricReport], cfg: RunConfig, with_variant: bool = False) -> tuple[Path, Path]:
    """Text table at ``path`` and one JSON record per row next to it (``.json``)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(format_table(rows, cfg, with_variant))
    records = [r.record(with_variant) for r in rows]
    jpath = path.with_suffix(".json")
    jpath.write_text(json.dumps(records, indent=1) + "\n")
    return path, jpath


def read_report(path: str | Path) -> list[dict]:
    path = Path(path)
    jpath = path if path.suffix == ".json" else path.with_suffix(".json")
    try:
        return json.loads(jpath.read_text())
    except (OSError, ValueError) as exc:
        raise FormatError(f"cannot read report {jpath}: {exc}") from None


def report_lookup(records: Sequence[dict], mode: str, method: str, variant: str | None = None) -> dict:
    for r in records:
        if r["mode"] == mode and r["uq_method"] == method and (variant is None or r.get("variant") == variant):
            return r
    raise KeyError((mode, method, variant))
