"""Video storage, dataset manifests and spatio-temporal volume addressing.

Videos live on disk in a small raw container::

    b"STV1" | u32 width | u32 height | u32 frames | frames*height*width*3 bytes

all little-endian, RGB8 interleaved, frame-major and row-major inside a
frame.  A dataset is a JSON-lines manifest with one record per video.
"""

import json
import os
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from ._io import atomic_write_bytes, atomic_write_text

__all__ = [
    "MAGIC",
    "VideoStoreError",
    "ShapeTooLargeError",
    "VideoMeta",
    "VolumeIndex",
    "VolumeBlock",
    "Dataset",
    "write_video",
    "read_video_header",
    "load_dataset",
    "write_manifest",
    "sample_volume",
    "materialize",
    "volumes_overlap",
    "admits_disjoint_pair",
    "synth_dataset",
    "SYNTH_CLASSES",
]

MAGIC = b"STV1"
_HEADER = struct.Struct("<4sIII")


class VideoStoreError(Exception):
    """Malformed manifest, bad video file, or inconsistent metadata."""


class ShapeTooLargeError(VideoStoreError, ValueError):
    """A requested volume shape does not fit inside the video."""


@dataclass(frozen=True)
class VideoMeta:
    id: int
    path: str
    width: int
    height: int
    frame_count: int
    label: str | None = None

    def __post_init__(self):
        if min(self.width, self.height, self.frame_count) < 1:
            raise VideoStoreError(
                f"video {self.id}: dimensions must be >= 1, got "
                f"{self.width}x{self.height}x{self.frame_count}"
            )


@dataclass(frozen=True)
class VolumeIndex:
    """Box ``[x, x+x0) x [y, y+y0) x [t, t+t0)`` inside video ``video_id``."""

    video_id: int
    x: int
    y: int
    t: int
    x0: int
    y0: int
    t0: int

    @property
    def shape(self):
        return (self.x0, self.y0, self.t0)

    def as_dict(self):
        return {
            "video_id": self.video_id,
            "x": self.x,
            "y": self.y,
            "t": self.t,
            "x0": self.x0,
            "y0": self.y0,
            "t0": self.t0,
        }

    def fits(self, video):
        return (
            min(self.x, self.y, self.t) >= 0
            and min(self.x0, self.y0, self.t0) >= 1
            and self.x + self.x0 <= video.width
            and self.y + self.y0 <= video.height
            and self.t + self.t0 <= video.frame_count
        )


@dataclass(frozen=True, eq=False)
class VolumeBlock:
    """A materialized volume; ``pixels`` is float32 ``(t0, y0, x0, 3)`` in [0, 1]."""

    index: VolumeIndex
    pixels: np.ndarray

    def with_pixels(self, pixels):
        return VolumeBlock(self.index, pixels)


@dataclass(frozen=True, eq=False)
class Dataset:
    videos: tuple
    root: str = "."
    _maps: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        if not self.videos:
            raise VideoStoreError("dataset is empty")
        object.__setattr__(self, "videos", tuple(self.videos))
        ids = [v.id for v in self.videos]
        if ids != list(range(1, len(ids) + 1)):
            raise VideoStoreError(f"video ids must be 1..N in order, got {ids[:10]}...")

    def __len__(self):
        return len(self.videos)

    def video(self, video_id):
        if not 1 <= video_id <= len(self.videos):
            raise KeyError(f"no video with id {video_id}")
        return self.videos[video_id - 1]

    @property
    def has_labels(self):
        return all(v.label is not None for v in self.videos)

    @property
    def labels(self):
        return [v.label for v in self.videos]

    def unlabeled(self):
        """A view of the same videos with every label removed.

        Mining and training only ever see this view, so evaluation labels
        cannot leak into them.
        """
        return Dataset(
            tuple(replace(v, label=None) for v in self.videos), self.root, self._maps
        )

    def resolve(self, video):
        path = Path(video.path)
        return path if path.is_absolute() else Path(self.root) / path

    def pixels(self, video_id):
        """Read-only memory map of a video, shaped ``(frames, height, width, 3)``."""
        m = self._maps.get(video_id)
        if m is None:
            v = self.video(video_id)
            m = np.memmap(
                self.resolve(v),
                dtype=np.uint8,
                mode="r",
                offset=_HEADER.size,
                shape=(v.frame_count, v.height, v.width, 3),
            )
            self._maps[video_id] = m
        return m


def write_video(path, frames):
    """Write uint8 frames ``(frames, height, width, 3)`` as an STV1 file."""
    frames = np.asarray(frames)
    if frames.dtype != np.uint8 or frames.ndim != 4 or frames.shape[3] != 3:
        raise VideoStoreError(f"expected uint8 (F, H, W, 3), got {frames.dtype} {frames.shape}")
    f, h, w, _ = frames.shape
    header = _HEADER.pack(MAGIC, w, h, f)
    atomic_write_bytes(path, header + np.ascontiguousarray(frames).tobytes())


def read_video_header(path):
    """Return ``(width, height, frames)`` from an STV1 file header."""
    with open(path, "rb") as fh:
        raw = fh.read(_HEADER.size)
    if len(raw) < _HEADER.size:
        raise VideoStoreError(f"{path}: truncated header")
    magic, w, h, f = _HEADER.unpack(raw)
    if magic != MAGIC:
        raise VideoStoreError(f"{path}: bad magic {magic!r}")
    expected = _HEADER.size + w * h * f * 3
    size = os.path.getsize(path)
    if size != expected:
        raise VideoStoreError(f"{path}: {size} bytes on disk, header implies {expected}")
    return w, h, f


def _parse_record(line, lineno, manifest):
    try:
        rec = json.loads(line)
        meta = VideoMeta(
            id=int(rec["id"]),
            path=str(rec["path"]),
            width=int(rec["width"]),
            height=int(rec["height"]),
            frame_count=int(rec["frames"]),
            label=None if rec.get("label") is None else str(rec["label"]),
        )
    except (ValueError, KeyError, TypeError) as exc:
        raise VideoStoreError(f"{manifest}:{lineno}: malformed record ({exc})") from exc
    return meta


def load_dataset(manifest_path):
    """Load and validate a JSON-lines manifest.

    Paths are resolved relative to the manifest's directory and every
    record is checked against its file header.
    """
    manifest_path = Path(manifest_path)
    if not manifest_path.is_file():
        raise FileNotFoundError(f"manifest not found: {manifest_path}")
    videos = []
    with open(manifest_path) as fh:
        for lineno, line in enumerate(fh, 1):
            if line.strip():
                videos.append(_parse_record(line, lineno, manifest_path))
    if not videos:
        raise VideoStoreError(f"{manifest_path}: manifest is empty")
    videos.sort(key=lambda v: v.id)
    ds = Dataset(tuple(videos), str(manifest_path.parent))
    for v in ds.videos:
        path = ds.resolve(v)
        if not path.is_file():
            raise FileNotFoundError(f"video {v.id}: file not found: {path}")
        header = read_video_header(path)
        if header != (v.width, v.height, v.frame_count):
            raise VideoStoreError(
                f"video {v.id}: manifest says {v.width}x{v.height}x{v.frame_count}, "
                f"file header says {header[0]}x{header[1]}x{header[2]}"
            )
    return ds


def write_manifest(path, videos):
    lines = []
    for v in videos:
        rec = {
            "id": v.id,
            "path": v.path,
            "width": v.width,
            "height": v.height,
            "frames": v.frame_count,
        }
        if v.label is not None:
            rec["label"] = v.label
        lines.append(json.dumps(rec))
    atomic_write_text(path, "\n".join(lines) + "\n")


def sample_volume(video, shape, rng):
    """Uniformly random in-bounds volume of ``shape = (x0, y0, t0)``."""
    x0, y0, t0 = (int(s) for s in shape)
    if x0 > video.width or y0 > video.height or t0 > video.frame_count or min(x0, y0, t0) < 1:
        raise ShapeTooLargeError(
            f"volume {x0}x{y0}x{t0} does not fit video {video.id} "
            f"({video.width}x{video.height}x{video.frame_count})"
        )
    x = int(rng.integers(0, video.width - x0 + 1))
    y = int(rng.integers(0, video.height - y0 + 1))
    t = int(rng.integers(0, video.frame_count - t0 + 1))
    return VolumeIndex(video.id, x, y, t, x0, y0, t0)


def materialize(dataset, index):
    """Read the pixels of ``index`` and scale RGB8 to float32 in [0, 1]."""
    video = dataset.video(index.video_id)
    if not index.fits(video):
        raise IndexError(f"volume {index} is outside video {video.id}")
    raw = dataset.pixels(index.video_id)[
        index.t : index.t + index.t0,
        index.y : index.y + index.y0,
        index.x : index.x + index.x0,
    ]
    return VolumeBlock(index, raw.astype(np.float32) / np.float32(255.0))


def volumes_overlap(a, b):
    """True iff the half-open boxes of ``a`` and ``b`` intersect."""
    if a.video_id != b.video_id:
        raise ValueError(f"volumes belong to different videos ({a.video_id}, {b.video_id})")
    return (
        a.x < b.x + b.x0
        and b.x < a.x + a.x0
        and a.y < b.y + b.y0
        and b.y < a.y + a.y0
        and a.t < b.t + b.t0
        and b.t < a.t + a.t0
    )


def admits_disjoint_pair(video, shape):
    """Whether two non-overlapping volumes of ``shape`` fit in ``video``."""
    x0, y0, t0 = shape
    return (
        x0 <= video.width
        and y0 <= video.height
        and t0 <= video.frame_count
        and (2 * x0 <= video.width or 2 * y0 <= video.height or 2 * t0 <= video.frame_count)
    )


# Class patterns for the synthetic fixture.  Each class has its own blob
# shape and motion direction.  None of them is the horizontal mirror of
# another, so horizontal flips used as augmentation never map one class
# onto a different one.
SYNTH_CLASSES = ("rightward", "downward", "upward", "diagonal")
_SHAPES = ("square", "disc", "ring", "cross")
_DIRECTIONS = {
    "rightward": (1.0, 0.0),
    "downward": (0.0, 1.0),
    "upward": (0.0, -1.0),
    "diagonal": (0.7071, 0.7071),
}


def _class_name(k):
    if k < len(SYNTH_CLASSES):
        return SYNTH_CLASSES[k]
    return f"class{k}"


def _class_pattern(k):
    name = _class_name(k)
    if name in _DIRECTIONS:
        direction = _DIRECTIONS[name]
    else:
        angle = 2 * np.pi * ((k * 0.618034) % 1.0)
        direction = (float(np.cos(angle)), float(np.sin(angle)))
    return name, direction, _SHAPES[k % len(_SHAPES)], (k * 0.25 + 0.07 * (k // 4)) % 1.0


def _blob_mask(shape, xx, yy, cx, cy, radius):
    dx, dy = xx - cx, yy - cy
    if shape == "square":
        return (np.abs(dx) <= radius) & (np.abs(dy) <= radius)
    if shape == "disc":
        return dx * dx + dy * dy <= radius * radius
    if shape == "ring":
        r2 = dx * dx + dy * dy
        return (r2 <= radius * radius) & (r2 >= (0.5 * radius) ** 2)
    # cross
    arm = max(radius / 3.0, 1.0)
    return ((np.abs(dx) <= arm) & (np.abs(dy) <= radius)) | (
        (np.abs(dy) <= arm) & (np.abs(dx) <= radius)
    )


def _hsv_pixel_to_rgb(h, s, v):
    from .transforms import hsv_to_rgb

    return np.asarray(hsv_to_rgb(np.array([h, s, v], dtype=np.float64)))


def _render_video(rng, class_idx, width, height, frames):
    _, (ux, uy), shape, hue = _class_pattern(class_idx)
    radius = rng.uniform(0.12, 0.18) * min(width, height)
    speed = rng.uniform(0.5, 0.7) * min(width, height) / frames
    hue = (hue + rng.uniform(-0.04, 0.04)) % 1.0
    fg = _hsv_pixel_to_rgb(hue, rng.uniform(0.7, 1.0), rng.uniform(0.75, 1.0))
    bg = rng.uniform(0.05, 0.25)

    # keep the whole blob inside the frame for the whole clip
    travel_x, travel_y = ux * speed * (frames - 1), uy * speed * (frames - 1)
    lo_x = radius + max(0.0, -travel_x)
    lo_y = radius + max(0.0, -travel_y)
    hi_x = width - 1 - radius - max(0.0, travel_x)
    hi_y = height - 1 - radius - max(0.0, travel_y)
    cx0 = rng.uniform(lo_x, max(lo_x, hi_x))
    cy0 = rng.uniform(lo_y, max(lo_y, hi_y))

    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    out = np.empty((frames, height, width, 3), dtype=np.uint8)
    for k in range(frames):
        cx, cy = cx0 + ux * speed * k, cy0 + uy * speed * k
        frame = np.full((height, width, 3), bg)
        frame[_blob_mask(shape, xx, yy, cx, cy, radius)] = fg
        frame += rng.normal(0.0, 0.02, size=frame.shape)
        out[k] = np.clip(np.round(frame * 255.0), 0, 255).astype(np.uint8)
    return out


def synth_dataset(
    out_dir,
    num_classes=4,
    videos_per_class=8,
    width=32,
    height=32,
    frames=16,
    seed=0,
):
    """Write a deterministic synthetic dataset and return it loaded.

    Each class is a blob of a class-specific shape translating in a
    class-specific direction over a noisy background; position, speed,
    size and colour jitter per video.  ``videos_per_class`` may be an int
    or one count per class.  Labels go to the manifest for evaluation only.
    """
    if isinstance(videos_per_class, int):
        counts = [videos_per_class] * num_classes
    else:
        counts = [int(c) for c in videos_per_class]
        if len(counts) != num_classes:
            raise ValueError("videos_per_class needs one entry per class")
    if num_classes < 1 or min(counts) < 1 or min(width, height, frames) < 1:
        raise ValueError("all counts and dimensions must be >= 1")

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    seeds = iter(np.random.SeedSequence(seed).spawn(sum(counts)))
    videos = []
    vid = 1
    for k, count in enumerate(counts):
        for _ in range(count):
            rng = np.random.default_rng(next(seeds))
            name = f"v{vid:05d}.stv"
            write_video(out_dir / name, _render_video(rng, k, width, height, frames))
            videos.append(VideoMeta(vid, name, width, height, frames, _class_name(k)))
            vid += 1
    write_manifest(out_dir / "manifest.jsonl", videos)
    return load_dataset(out_dir / "manifest.jsonl")
