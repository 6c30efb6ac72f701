"""Synthetic multi-agent driving scenes rasterized into binary BEV occupancy.

Vehicles drive along lanes parallel to the x axis with slowly wandering
heading and speed, so consecutive frames are strongly correlated. Stationary
roadside agents observe them within a sensing radius; a vehicle cell is seen
only if the ray from the agent to it does not cross another vehicle.
"""
from __future__ import annotations

import json
import math
import struct
import zlib
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError, UsageError

DATASET_MAGIC = b"DMUQDS1"
N_CORNERS = 4
DIM = 2
VEHICLE = 1
FRAME_DT = 0.2  # seconds, 5 Hz recording


def substream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for a named component of a seeded run."""
    return np.random.default_rng(np.random.SeedSequence([int(seed) & (2**64 - 1), zlib.crc32(name.encode())]))


@dataclass(frozen=True)
class SceneConfig:
    world_width: float = 48.0
    world_length: float = 48.0
    grid_cells: int = 32
    n_agents: int = 3
    n_objects: int = 6
    n_scenes: int = 8
    frames_per_scene: int = 100
    sensing_radius: float = 20.0
    occlusion: bool = True
    motion_noise: float = 0.1
    downsample: int = 4
    seed: int = 42

    @property
    def resolution(self) -> float:
        """Cells per meter along x."""
        return self.grid_cells / self.world_width

    @property
    def cell_size(self) -> float:
        return self.world_width / self.grid_cells

    @property
    def grid_shape(self) -> tuple[int, int]:
        rows = int(round(self.world_length * self.resolution))
        return rows, self.grid_cells

    def validate(self) -> "SceneConfig":
        if self.n_agents < 1:
            raise ConfigError("n_agents must be >= 1")
        if self.n_objects < 0 or self.n_scenes < 1 or self.frames_per_scene < 1:
            raise ConfigError("object, scene and frame counts must be positive")
        if self.sensing_radius <= 0:
            raise ConfigError("sensing_radius must be > 0")
        if self.world_width <= 0 or self.world_length <= 0:
            raise ConfigError("world size must be positive")
        rows, cols = self.grid_shape
        if not math.isclose(rows / self.world_length, self.resolution, rel_tol=1e-9):
            raise ConfigError("grid must have square cells")
        if rows % self.downsample or cols % self.downsample:
            raise ConfigError(f"grid {rows}x{cols} not divisible by downsampling factor {self.downsample}")
        # each vehicle needs a free disc of MIN_GAP diameter; stay well under a loose packing bound
        if self.n_objects * (MIN_GAP**2) > 0.5 * self.world_width * self.world_length:
            raise ConfigError(f"cannot pack {self.n_objects} vehicles in a {self.world_width}x{self.world_length} m world")
        return self

    def replace(self, **changes) -> "SceneConfig":
        data = asdict(self)
        unknown = set(changes) - set(data)
        if unknown:
            raise ConfigError(f"unknown scene fields: {sorted(unknown)}")
        data.update(changes)
        return SceneConfig(**data)

    @classmethod
    def from_dict(cls, data: dict) -> "SceneConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ConfigError(f"unknown scene fields: {sorted(unknown)}")
        return cls(**data)


MIN_GAP = 6.0  # meters between vehicle centers
EDGE_MARGIN = 3.0


@dataclass(frozen=True)
class GroundTruthBox:
    """Four corners, counterclockwise from rear-left, in world meters."""

    corners: np.ndarray
    label: int = VEHICLE
    object_id: int = 0
    visible: bool = True

    @property
    def center(self) -> np.ndarray:
        return self.corners.mean(axis=0)

    @property
    def area(self) -> float:
        return polygon_area(self.corners)


@dataclass(frozen=True)
class BEVGrid:
    cells: np.ndarray  # uint8, (rows, cols)
    agent: int = -1


@dataclass
class Frame:
    scene: int
    index: int
    grids: np.ndarray  # uint8, (n_agents, rows, cols)
    boxes: list[GroundTruthBox]
    poses: np.ndarray  # (n_agents, 2)
    _fused: np.ndarray | None = field(default=None, repr=False, compare=False)

    @property
    def n_agents(self) -> int:
        return self.grids.shape[0]

    def view(self, agent: int) -> BEVGrid:
        return BEVGrid(self.grids[agent], agent)

    @property
    def fused(self) -> np.ndarray:
        if self._fused is None:
            self._fused = fuse_early(list(self.grids)).cells
        return self._fused

    def targets(self) -> list[GroundTruthBox]:
        """Boxes observed by at least one agent."""
        return [b for b in self.boxes if b.visible]

    def target_corners(self) -> np.ndarray:
        boxes = self.targets()
        if not boxes:
            return np.zeros((0, N_CORNERS, DIM))
        return np.stack([b.corners for b in boxes])


# -- geometry helpers ----------------------------------------------------------

def polygon_area(poly: np.ndarray) -> float:
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def canonical_yaw(heading: float) -> float:
    """Fold a heading into [-pi/2, pi/2); front and rear are indistinguishable in occupancy."""
    return (heading + 0.5 * math.pi) % math.pi - 0.5 * math.pi


def box_corners(center, yaw: float, length: float, width: float) -> np.ndarray:
    c, s = math.cos(yaw), math.sin(yaw)
    local = np.array(
        [
            [-0.5 * length, 0.5 * width],
            [-0.5 * length, -0.5 * width],
            [0.5 * length, -0.5 * width],
            [0.5 * length, 0.5 * width],
        ]
    )
    rot = np.array([[c, -s], [s, c]])
    return local @ rot.T + np.asarray(center, dtype=np.float64)


def _inside_world(corners: np.ndarray, cfg: SceneConfig) -> bool:
    return bool(
        np.all(corners[:, 0] >= 0.0)
        and np.all(corners[:, 0] <= cfg.world_width)
        and np.all(corners[:, 1] >= 0.0)
        and np.all(corners[:, 1] <= cfg.world_length)
    )


# -- trajectories ---------------------------------------------------------------

@dataclass
class _Vehicle:
    center: np.ndarray
    lane: float  # 0 or pi
    drift: float  # heading deviation from the lane direction
    speed: float
    length: float
    width: float

    @property
    def heading(self) -> float:
        return self.lane + self.drift

    def corners(self) -> np.ndarray:
        return box_corners(self.center, canonical_yaw(self.heading), self.length, self.width)


def _spawn(cfg: SceneConfig, rng: np.random.Generator, count: int) -> list[_Vehicle]:
    vehicles: list[_Vehicle] = []
    attempts = 0
    while len(vehicles) < count:
        attempts += 1
        if attempts > 2000:
            raise ConfigError(f"could not place {count} non-overlapping vehicles")
        length = rng.uniform(3.8, 5.0)
        width = rng.uniform(1.7, 2.1)
        center = np.array(
            [
                rng.uniform(EDGE_MARGIN + 3.0, cfg.world_width - EDGE_MARGIN - 3.0),
                rng.uniform(EDGE_MARGIN + 3.0, cfg.world_length - EDGE_MARGIN - 3.0),
            ]
        )
        if any(np.linalg.norm(center - v.center) < MIN_GAP for v in vehicles):
            continue
        lane = 0.0 if rng.random() < 0.5 else math.pi
        vehicles.append(_Vehicle(center, lane, rng.normal(0.0, 0.1), rng.uniform(3.0, 8.0), length, width))
    return vehicles


def _step(vehicles: list[_Vehicle], cfg: SceneConfig, rng: np.random.Generator) -> None:
    for idx, v in enumerate(vehicles):
        v.speed = float(np.clip(v.speed + rng.normal(0.0, cfg.motion_noise / FRAME_DT), 1.0, 10.0))
        v.drift = 0.9 * v.drift + rng.normal(0.0, 0.05)
        for _ in range(3):
            nxt = v.center + v.speed * FRAME_DT * np.array([math.cos(v.heading), math.sin(v.heading)])
            corners = box_corners(nxt, canonical_yaw(v.heading), v.length, v.width)
            blocked = any(
                np.linalg.norm(nxt - o.center) < MIN_GAP and np.linalg.norm(nxt - o.center) < np.linalg.norm(v.center - o.center)
                for j, o in enumerate(vehicles)
                if j != idx
            )
            if _inside_world(corners, cfg) and not blocked:
                v.center = nxt
                break
            if blocked or not (0.0 <= nxt[0] - 0.5 * v.length and nxt[0] + 0.5 * v.length <= cfg.world_width):
                v.lane = (v.lane + math.pi) % (2.0 * math.pi)
            else:
                v.drift = -v.drift


def _place_agents(cfg: SceneConfig, rng: np.random.Generator) -> np.ndarray:
    min_spacing = 0.6 * cfg.sensing_radius
    poses: list[np.ndarray] = []
    for attempt in range(5000):
        p = np.array([rng.uniform(EDGE_MARGIN, cfg.world_width - EDGE_MARGIN),
                      rng.uniform(EDGE_MARGIN, cfg.world_length - EDGE_MARGIN)])
        spacing = min_spacing if attempt < 4000 else 0.0
        if all(np.linalg.norm(p - q) >= spacing for q in poses):
            poses.append(p)
            if len(poses) == cfg.n_agents:
                break
    return np.stack(poses)


# -- rasterization ----------------------------------------------------------------

_SUPERSAMPLE = 3
# line-of-sight targets inside a cell, in cell widths from its center
_VIEW_POINTS = np.array([[0.0, 0.0], [-0.4, -0.4], [0.4, -0.4], [0.4, 0.4], [-0.4, 0.4]])


def label_raster(corner_sets: list[np.ndarray], cfg: SceneConfig) -> np.ndarray:
    """Object index per cell (-1 for free space) from supersampled footprints."""
    rows, cols = cfg.grid_shape
    cell = cfg.cell_size
    offsets = (np.arange(_SUPERSAMPLE) + 0.5) / _SUPERSAMPLE
    sub_x = ((np.arange(cols)[:, None] + offsets[None, :]) * cell).reshape(-1)
    sub_y = ((np.arange(rows)[:, None] + offsets[None, :]) * cell).reshape(-1)
    px, py = np.meshgrid(sub_x, sub_y)  # (rows*S, cols*S)
    labels = np.full((rows, cols), -1, dtype=np.int64)
    best = np.zeros((rows, cols), dtype=np.int64)
    for obj, corners in enumerate(corner_sets):
        center = corners.mean(axis=0)
        axis_l = corners[3] - corners[0]
        axis_w = corners[0] - corners[1]
        length, width = np.linalg.norm(axis_l), np.linalg.norm(axis_w)
        ul, uw = axis_l / length, axis_w / width
        dx, dy = px - center[0], py - center[1]
        inside = (np.abs(dx * ul[0] + dy * ul[1]) <= 0.5 * length) & (np.abs(dx * uw[0] + dy * uw[1]) <= 0.5 * width)
        counts = inside.reshape(rows, _SUPERSAMPLE, cols, _SUPERSAMPLE).sum(axis=(1, 3))
        take = counts > best
        labels[take] = obj
        best[take] = counts[take]
    return labels


def rasterize_labels(labels: np.ndarray, pose: np.ndarray, cfg: SceneConfig) -> np.ndarray:
    """Occupancy seen from ``pose`` given the object label raster."""
    rows, cols = labels.shape
    cell = cfg.cell_size
    grid = np.zeros((rows, cols), dtype=np.uint8)
    rr, cc = np.nonzero(labels >= 0)
    if rr.size == 0:
        return grid
    centers = np.stack([(cc + 0.5) * cell, (rr + 0.5) * cell], axis=1)
    dist = np.linalg.norm(centers - pose, axis=1)
    keep = dist <= cfg.sensing_radius
    rr, cc, centers, dist = rr[keep], cc[keep], centers[keep], dist[keep]
    if rr.size == 0:
        return grid
    if cfg.occlusion:
        # a cell is seen when any of a few points inside it has a clear line of
        # sight; every occupied cell on the way, the vehicle's own included, blocks
        n_samples = int(math.ceil(cfg.sensing_radius / cell * 4)) + 1
        t = np.linspace(0.0, 1.0, n_samples)[None, None, :, None]
        targets = centers[:, None, :] + cell * _VIEW_POINTS[None, :, :]
        pts = pose + t * (targets[:, :, None, :] - pose)
        sc = np.clip((pts[..., 0] / cell).astype(np.int64), 0, cols - 1)
        sr = np.clip((pts[..., 1] / cell).astype(np.int64), 0, rows - 1)
        own = (sr == rr[:, None, None]) & (sc == cc[:, None, None])
        clear = ~np.any((labels[sr, sc] >= 0) & ~own, axis=2)
        visible = np.any(clear, axis=1)
        rr, cc = rr[visible], cc[visible]
    grid[rr, cc] = 1
    return grid


def rasterize_view(frame: Frame, agent: int, cfg: SceneConfig) -> BEVGrid:
    if not 0 <= agent < frame.n_agents:
        raise UsageError(f"agent {agent} out of range for {frame.n_agents} agents")
    labels = label_raster([b.corners for b in frame.boxes], cfg)
    return BEVGrid(rasterize_labels(labels, frame.poses[agent], cfg), agent)


def fuse_early(grids) -> BEVGrid:
    """Cellwise OR of per-agent rasters in the shared world frame."""
    arrays = [g.cells if isinstance(g, BEVGrid) else np.asarray(g) for g in grids]
    if not arrays:
        raise UsageError("need at least one grid to fuse")
    shapes = {a.shape for a in arrays}
    if len(shapes) != 1:
        raise UsageError(f"grid dimension mismatch: {sorted(shapes)}")
    out = arrays[0].astype(bool)
    for a in arrays[1:]:
        out = out | a.astype(bool)
    return BEVGrid(out.astype(np.uint8), -1)


# -- dataset generation ------------------------------------------------------------

def generate_scene(cfg: SceneConfig, scene: int, rng: np.random.Generator) -> list[Frame]:
    n_objects = int(rng.integers(max(1, cfg.n_objects - 2), cfg.n_objects + 1)) if cfg.n_objects else 0
    vehicles = _spawn(cfg, rng, n_objects)
    poses = _place_agents(cfg, rng)
    frames: list[Frame] = []
    for k in range(cfg.frames_per_scene):
        if k:
            _step(vehicles, cfg, rng)
        corner_sets = [v.corners() for v in vehicles]
        labels = label_raster(corner_sets, cfg)
        grids = np.stack([rasterize_labels(labels, p, cfg) for p in poses])
        fused = grids.max(axis=0)
        boxes = [
            GroundTruthBox(c, VEHICLE, j, bool(np.any(fused[labels == j])))
            for j, c in enumerate(corner_sets)
        ]
        frames.append(Frame(scene, k, grids, boxes, poses.copy()))
    return frames


def generate_dataset(cfg: SceneConfig, first_scene: int = 0) -> list[Frame]:
    """All frames of ``cfg.n_scenes`` scenes, scene-major and in temporal order.

    Scene ``s`` draws from its own sub-stream, so disjoint ``first_scene``
    ranges give independent splits from one seed.
    """
    cfg.validate()
    frames: list[Frame] = []
    for s in range(first_scene, first_scene + cfg.n_scenes):
        frames.extend(generate_scene(cfg, s, substream(cfg.seed, f"scenegen/scene{s}")))
    return frames


def scene_lengths(frames: list[Frame]) -> list[int]:
    lengths: list[int] = []
    last = None
    for f in frames:
        if f.scene != last:
            lengths.append(0)
            last = f.scene
        lengths[-1] += 1
    return lengths


def lag1_autocorrelation(x: np.ndarray) -> float:
    x = np.asarray(x, dtype=np.float64) - np.mean(x)
    denom = float(np.dot(x, x))
    return float(np.dot(x[:-1], x[1:]) / denom) if denom > 0 else 1.0


# -- dataset file format -------------------------------------------------------------

def _rle_encode(cells: np.ndarray) -> np.ndarray:
    flat = cells.reshape(-1).astype(np.uint8)
    change = np.flatnonzero(np.diff(flat)) + 1
    bounds = np.concatenate([[0], change, [flat.size]])
    runs = np.diff(bounds)
    if flat.size and flat[0] == 1:
        runs = np.concatenate([[0], runs])
    return runs.astype("<u4")


def _rle_decode(runs: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    values = np.arange(runs.size) % 2
    flat = np.repeat(values.astype(np.uint8), runs.astype(np.int64))
    if flat.size != shape[0] * shape[1]:
        raise FormatError("run-length data does not fill the grid")
    return flat.reshape(shape)


def _encode_frame(frame: Frame) -> bytes:
    n_agents, rows, cols = frame.grids.shape
    parts = [struct.pack("<IIIII", frame.scene, frame.index, n_agents, rows, cols)]
    parts.append(np.asarray(frame.poses, dtype="<f8").tobytes())
    for g in frame.grids:
        runs = _rle_encode(g)
        parts.append(struct.pack("<I", runs.size))
        parts.append(runs.tobytes())
    parts.append(struct.pack("<I", len(frame.boxes)))
    for b in frame.boxes:
        rec = np.concatenate([[b.label, b.object_id, float(b.visible)], b.corners.reshape(-1)])
        parts.append(rec.astype("<f8").tobytes())
    return b"".join(parts)


def _decode_frame(buf: bytes) -> Frame:
    scene, index, n_agents, rows, cols = struct.unpack_from("<IIIII", buf, 0)
    off = 20
    poses = np.frombuffer(buf, "<f8", n_agents * 2, off).reshape(n_agents, 2).astype(np.float64)
    off += n_agents * 16
    grids = np.empty((n_agents, rows, cols), dtype=np.uint8)
    for a in range(n_agents):
        (n_runs,) = struct.unpack_from("<I", buf, off)
        off += 4
        runs = np.frombuffer(buf, "<u4", n_runs, off)
        off += 4 * n_runs
        grids[a] = _rle_decode(runs, (rows, cols))
    (n_boxes,) = struct.unpack_from("<I", buf, off)
    off += 4
    rec_len = 3 + N_CORNERS * DIM
    recs = np.frombuffer(buf, "<f8", n_boxes * rec_len, off).reshape(n_boxes, rec_len).astype(np.float64)
    off += recs.nbytes
    if off != len(buf):
        raise FormatError("trailing bytes in frame record")
    boxes = [
        GroundTruthBox(r[3:].reshape(N_CORNERS, DIM).copy(), int(r[0]), int(r[1]), bool(r[2]))
        for r in recs
    ]
    return Frame(scene, index, grids, boxes, poses)


def save_dataset(path: str | Path, frames: list[Frame], cfg: SceneConfig) -> None:
    header = json.dumps(asdict(cfg), sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(DATASET_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(struct.pack("<Q", len(frames)))
        for frame in frames:
            rec = _encode_frame(frame)
            fh.write(struct.pack("<Q", len(rec)))
            fh.write(rec)


def load_dataset(path: str | Path) -> tuple[list[Frame], SceneConfig]:
    data = Path(path).read_bytes()
    if data[: len(DATASET_MAGIC)] != DATASET_MAGIC:
        raise FormatError(f"{path}: not a dataset file")
    off = len(DATASET_MAGIC)
    (hlen,) = struct.unpack_from("<I", data, off)
    off += 4
    cfg = SceneConfig.from_dict(json.loads(data[off : off + hlen]))
    off += hlen
    (count,) = struct.unpack_from("<Q", data, off)
    off += 8
    frames = []
    for _ in range(count):
        (rlen,) = struct.unpack_from("<Q", data, off)
        off += 8
        frames.append(_decode_frame(data[off : off + rlen]))
        off += rlen
    if off != len(data):
        raise FormatError(f"{path}: trailing bytes after {count} frames")
    return frames, cfg
