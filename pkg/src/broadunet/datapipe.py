"""Dataset containers, preprocessing pipelines and sample construction.

Covers the precipitation-radar and cloud-cover label pipelines, lag/horizon
sample windows, chronological splits and a synthetic advection generator for
desk-scale experiments.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .archive import archive_load, archive_save
from .tensor import ShapeError

PRECIP_RAW_SHAPE = (765, 700)
PRECIP_CROP = 288
CLOUD_SIZE = 256
CLOUD_BBOX = (51.896, 41.104, -5.842, 9.842)  # upper lat, lower lat, left lon, right lon
CLOUD_LABELS = range(1, 16)


class DataError(ValueError):
    """Raw input data violates the pipeline's contract."""


@dataclass
class FrameSequence:
    """Time-ordered frames of shape (N, H, W, C) plus pipeline metadata."""

    frames: np.ndarray
    cadence_minutes: float
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.frames = np.asarray(self.frames)
        if self.frames.ndim != 4:
            raise ShapeError(f"frames must be (N, H, W, C), got {self.frames.shape}")
        if self.cadence_minutes <= 0:
            raise ValueError("cadence must be positive")

    def __len__(self):
        return self.frames.shape[0]


@dataclass
class SampleSet:
    """(input (T,H,W,F), target (1,H,W,F)) pairs with their start frames."""

    inputs: np.ndarray    # (N, T, H, W, F)
    targets: np.ndarray   # (N, 1, H, W, F)
    lags: int
    horizon: int
    starts: np.ndarray

    def __len__(self):
        return self.inputs.shape[0]

    def subset(self, index) -> "SampleSet":
        return SampleSet(self.inputs[index], self.targets[index],
                         self.lags, self.horizon, self.starts[index])


# ---------------------------------------------------------------------------
# Preprocessing
# ---------------------------------------------------------------------------

def precip_preprocess(seq: FrameSequence, rain_fraction: float,
                      train_fraction: float = 0.8) -> FrameSequence:
    """Central 288x288 crop, rain-fraction filter, training-max normalization.

    Crop offsets are floor((dim - 288) / 2): rows [238, 526), cols [206, 494).
    Frames are kept when the fraction of pixels with value > 0 is at least
    `rain_fraction`. All kept frames are divided by the maximum value over the
    first `train_fraction` of them; that maximum lands in the metadata.
    """
    frames = seq.frames
    if frames.shape[1:3] != PRECIP_RAW_SHAPE or frames.shape[3] != 1:
        raise ShapeError(
            f"expected (N, 765, 700, 1) radar frames, got {frames.shape}")
    r0 = (PRECIP_RAW_SHAPE[0] - PRECIP_CROP) // 2
    c0 = (PRECIP_RAW_SHAPE[1] - PRECIP_CROP) // 2
    cropped = frames[:, r0:r0 + PRECIP_CROP, c0:c0 + PRECIP_CROP, :]
    wet = (cropped > 0).mean(axis=(1, 2, 3))
    kept = cropped[wet >= rain_fraction].astype(np.float32)
    if len(kept) == 0:
        raise DataError(f"no frame passes the rain fraction {rain_fraction}")
    n_train = max(1, int(len(kept) * train_fraction))
    norm = float(kept[:n_train].max())
    if norm <= 0:
        raise DataError("training portion has no positive rainfall value")
    normalized = kept / norm
    threshold_mean = float(normalized[:n_train].mean())
    return FrameSequence(
        normalized, seq.cadence_minutes,
        metadata={
            "norm_factor": norm,
            "rain_fraction": rain_fraction,
            "threshold_mean": threshold_mean,
            "crop_offsets": (r0, c0),
            "source": seq.metadata.get("source", "precipitation"),
        })


def cloud_preprocess(seq: FrameSequence, lats: np.ndarray,
                     lons: np.ndarray) -> FrameSequence:
    """Label grouping, geographic crop and nearest-neighbor resize to 256x256.

    Labels 1..4 become 0 (no cloud), 5..15 become 1 (cloud). `lats`/`lons`
    give the geolocation of the source grid's rows and columns; the crop
    keeps the France bounding box. Nearest-neighbor resizing preserves the
    binary label space exactly.
    """
    frames = seq.frames
    bad = (frames < 1) | (frames > 15)
    if bad.any():
        i, h, w, c = np.argwhere(bad)[0]
        raise DataError(
            f"label {int(frames[i, h, w, c])} outside 1..15 in frame {i} "
            f"at pixel ({h}, {w})")
    lats = np.asarray(lats, dtype=np.float64)
    lons = np.asarray(lons, dtype=np.float64)
    if lats.shape != (frames.shape[1],) or lons.shape != (frames.shape[2],):
        raise ShapeError("lats/lons must match the frame grid")
    upper, lower, left, right = CLOUD_BBOX
    rows = np.flatnonzero((lats >= lower) & (lats <= upper))
    cols = np.flatnonzero((lons >= left) & (lons <= right))
    if rows.size == 0 or cols.size == 0:
        raise DataError("bounding box selects no pixels")
    binary = (frames >= 5).astype(np.float32)
    cropped = binary[:, rows[0]:rows[-1] + 1, cols[0]:cols[-1] + 1, :]
    hc, wc = cropped.shape[1:3]
    ri = np.minimum((np.arange(CLOUD_SIZE) + 0.5) * hc / CLOUD_SIZE, hc - 1).astype(int)
    ci = np.minimum((np.arange(CLOUD_SIZE) + 0.5) * wc / CLOUD_SIZE, wc - 1).astype(int)
    resized = cropped[:, ri][:, :, ci]
    return FrameSequence(
        resized, seq.cadence_minutes,
        metadata={"norm_factor": 1.0,
                  "source": seq.metadata.get("source", "cloud_cover")})


# ---------------------------------------------------------------------------
# Samples and splits
# ---------------------------------------------------------------------------

def make_samples(seq: FrameSequence, lags: int, horizon: int) -> SampleSet:
    """One sample per start index: T consecutive input frames, target
    exactly `horizon` steps after the last input frame."""
    if lags < 1 or horizon < 1:
        raise ValueError("lags and horizon must be positive")
    n = len(seq)
    count = n - lags - horizon + 1
    if count < 1:
        raise ValueError(
            f"sequence of {n} frames too short for lags={lags}, horizon={horizon}")
    inputs = np.stack([seq.frames[i:i + lags] for i in range(count)])
    targets = np.stack([seq.frames[i + lags - 1 + horizon][None]
                        for i in range(count)])
    return SampleSet(inputs, targets, lags, horizon, np.arange(count))


@dataclass(frozen=True)
class SplitScheme:
    """Chronological split: frames at/after `test_start` are test material;
    earlier samples split `train_fraction` / rest by sample position."""

    test_start: int
    train_fraction: float = 0.8


def split_dataset(samples: SampleSet, scheme: SplitScheme):
    """(train, val, test) with no window straddling the test boundary.

    A sample's window spans frames [start, start + lags - 1 + horizon];
    windows crossing `test_start` are dropped.
    """
    last = samples.starts + samples.lags - 1 + samples.horizon
    test_mask = samples.starts >= scheme.test_start
    pre_mask = last < scheme.test_start
    pre_idx = np.flatnonzero(pre_mask)
    n_train = int(len(pre_idx) * scheme.train_fraction)
    train = samples.subset(pre_idx[:n_train])
    val = samples.subset(pre_idx[n_train:])
    test = samples.subset(np.flatnonzero(test_mask))
    if len(train) == 0 or len(val) == 0 or len(test) == 0:
        raise ValueError(
            f"empty partition: train={len(train)} val={len(val)} test={len(test)}")
    return train, val, test


def split_counts(samples: SampleSet, n_train: int, n_val: int, n_test: int):
    """Simple chronological split by sample counts (desk-scale synthetic use)."""
    if n_train + n_val + n_test > len(samples):
        raise ValueError(
            f"requested {n_train + n_val + n_test} samples, have {len(samples)}")
    if min(n_train, n_val, n_test) < 1:
        raise ValueError("all partitions must be nonempty")
    a, b = n_train, n_train + n_val
    return (samples.subset(np.s_[:a]), samples.subset(np.s_[a:b]),
            samples.subset(np.s_[b:b + n_test]))


# ---------------------------------------------------------------------------
# Synthetic advection
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SynthConfig:
    height: int = 32
    width: int = 32
    n_frames: int = 64
    n_blobs: int = 3
    velocity: tuple = (0.0, 1.0)   # (dy, dx) per frame
    blob_sigma: float = 2.5
    seed: int = 0

    def __post_init__(self):
        if self.height < 8 or self.width < 8:
            raise ValueError("H and W must be at least 8")
        if self.n_frames < 1 or self.n_blobs < 1:
            raise ValueError("need at least one frame and one blob")


def synth_advection(cfg: SynthConfig) -> FrameSequence:
    """Gaussian blobs translated by `velocity` per frame with toroidal wrap.

    Blob intensity uses the toroidal distance to each center, so an integer
    velocity produces frames that are exact circular shifts of each other.
    Values are clipped to [0, 1]; the sequence is deterministic per seed.
    """
    rng = np.random.default_rng(cfg.seed)
    centers = rng.uniform((0, 0), (cfg.height, cfg.width), size=(cfg.n_blobs, 2))
    vy, vx = cfg.velocity
    rows = np.arange(cfg.height, dtype=np.float64)[:, None]
    cols = np.arange(cfg.width, dtype=np.float64)[None, :]
    frames = np.zeros((cfg.n_frames, cfg.height, cfg.width, 1), dtype=np.float32)
    inv = 1.0 / (2.0 * cfg.blob_sigma ** 2)
    for t in range(cfg.n_frames):
        total = np.zeros((cfg.height, cfg.width), dtype=np.float64)
        for cy, cx in centers:
            dy = (rows - cy - vy * t) % cfg.height
            dy = np.minimum(dy, cfg.height - dy)
            dx = (cols - cx - vx * t) % cfg.width
            dx = np.minimum(dx, cfg.width - dx)
            total += np.exp(-(dy * dy + dx * dx) * inv)
        frames[t, :, :, 0] = np.clip(total, 0.0, 1.0)
    return FrameSequence(frames, cadence_minutes=5.0,
                         metadata={"norm_factor": 1.0, "source": "synthetic"})


# ---------------------------------------------------------------------------
# On-disk helpers
# ---------------------------------------------------------------------------

def save_frames(path, seq: FrameSequence) -> None:
    archive_save(path, {
        "frames": seq.frames,
        "cadence_minutes": np.asarray([seq.cadence_minutes], dtype=np.float64),
    })
    write_manifest(str(path) + ".manifest", {
        "cadence_minutes": seq.cadence_minutes,
        **{k: v for k, v in seq.metadata.items()
           if k in ("norm_factor", "threshold_mean", "rain_fraction", "source")},
    })


def load_frames(path) -> FrameSequence:
    records = archive_load(path)
    meta = {}
    try:
        meta = read_manifest(str(path) + ".manifest")
    except OSError:
        pass
    return FrameSequence(records["frames"],
                         float(records["cadence_minutes"][0]), metadata=meta)


def save_samples(path, samples: SampleSet) -> None:
    archive_save(path, {
        "inputs": samples.inputs,
        "targets": samples.targets,
        "starts": samples.starts.astype(np.float64),
        "lags_horizon": np.asarray([samples.lags, samples.horizon],
                                   dtype=np.float64),
    })


def load_samples(path) -> SampleSet:
    records = archive_load(path)
    lags, horizon = records["lags_horizon"]
    return SampleSet(records["inputs"], records["targets"], int(lags),
                     int(horizon), records["starts"].astype(np.int64))


def write_manifest(path, entries: dict) -> None:
    """Dataset manifest: UTF-8 `key = value` lines."""
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for key, value in entries.items():
            f.write(f"{key} = {value}\n")


def read_manifest(path) -> dict:
    entries = {}
    with open(path, encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            key, _, value = line.partition(" = ")
            try:
                entries[key] = float(value)
            except ValueError:
                entries[key] = value
    return entries
