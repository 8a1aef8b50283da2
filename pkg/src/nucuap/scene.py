"""Synthetic frame sequences and frame / tensor I/O.

Synthetic scenes are bright disks or squares moving linearly over a static
textured background. They stand in for surveillance footage at desk scale.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import png
from scipy.ndimage import uniform_filter

from nucuap.errors import FrameIOError, SceneSpecError, TensorFormatError

TENSOR_MAGIC = b"UAPT"
TENSOR_VERSION = 1
DTYPE_FLOAT32 = 1
TENSOR_SUFFIX = ".uapt"
DETECTABILITY_MARGIN = 0.3


@dataclass(frozen=True)
class FrameSequence:
    """B frames stacked as a ``(B, H, W, C)`` float32 array with pixels in [0, 1]."""

    frames: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.frames, dtype=np.float32)
        if arr.ndim != 4 or arr.shape[0] < 1:
            raise ValueError(f"frames must have shape (B, H, W, C), got {arr.shape}")
        if not np.all(np.isfinite(arr)) or arr.min() < 0.0 or arr.max() > 1.0:
            raise ValueError("frame pixels must lie in [0, 1]")
        arr.setflags(write=False)
        object.__setattr__(self, "frames", arr)

    @property
    def frame_count(self) -> int:
        return self.frames.shape[0]

    @property
    def height(self) -> int:
        return self.frames.shape[1]

    @property
    def width(self) -> int:
        return self.frames.shape[2]

    @property
    def channels(self) -> int:
        return self.frames.shape[3]

    @property
    def frame_shape(self) -> tuple[int, int, int]:
        return self.frames.shape[1:]

    def __len__(self):
        return self.frame_count

    def __iter__(self):
        return iter(self.frames)

    def __getitem__(self, b):
        return self.frames[b]


@dataclass(frozen=True)
class ObjectSpec:
    shape: str = "disk"
    radius: float = 6.0
    start: tuple[float, float] = (16.0, 16.0)  # (row, col) of the centre
    velocity: tuple[float, float] = (0.0, 0.0)  # px per frame
    intensity: float = 0.9

    def center(self, b: int) -> tuple[float, float]:
        return (self.start[0] + b * self.velocity[0], self.start[1] + b * self.velocity[1])


@dataclass(frozen=True)
class BackgroundSpec:
    level: float = 0.2
    amplitude: float = 0.05
    seed: int = 0


@dataclass(frozen=True)
class SceneSpec:
    height: int = 64
    width: int = 64
    channels: int = 3
    frame_count: int = 8
    objects: tuple[ObjectSpec, ...] = ()
    background: BackgroundSpec = field(default_factory=BackgroundSpec)

    def validate(self):
        if self.height < 1 or self.width < 1 or self.frame_count < 1:
            raise SceneSpecError("height, width and frame_count must be positive")
        if self.channels not in (1, 3):
            raise SceneSpecError(f"channels must be 1 or 3, got {self.channels}")
        bg = self.background
        if not 0.0 <= bg.level <= 1.0 or bg.amplitude < 0.0:
            raise SceneSpecError("background level must be in [0,1] and amplitude >= 0")
        for k, obj in enumerate(self.objects):
            if obj.shape not in ("disk", "square"):
                raise SceneSpecError(f"object {k}: unknown shape {obj.shape!r}")
            if not 0.0 < obj.intensity <= 1.0:
                raise SceneSpecError(f"object {k}: intensity must be in (0, 1]")
            if obj.intensity - bg.level < DETECTABILITY_MARGIN - 1e-12:
                raise SceneSpecError(
                    f"object {k}: intensity {obj.intensity} is less than "
                    f"{DETECTABILITY_MARGIN} above the background level {bg.level}"
                )
            if obj.radius <= 0:
                raise SceneSpecError(f"object {k}: radius must be positive")
            for b in range(self.frame_count):
                cy, cx = obj.center(b)
                if (
                    cy - obj.radius < 0
                    or cx - obj.radius < 0
                    or cy + obj.radius > self.height - 1
                    or cx + obj.radius > self.width - 1
                ):
                    raise SceneSpecError(f"object {k} leaves the frame at frame {b}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class GroundTruth:
    """Per-frame object boxes ``(x0, y0, x1, y1)`` (half-open) and masks."""

    boxes: list[list[tuple[int, int, int, int]]]
    masks: np.ndarray  # (B, n_objects, H, W) bool

    def to_json(self) -> dict:
        return {"boxes": [[list(b) for b in frame] for frame in self.boxes]}


def background_texture(spec: SceneSpec) -> np.ndarray:
    bg = spec.background
    rng = np.random.default_rng(bg.seed)
    noise = rng.uniform(-bg.amplitude, bg.amplitude, size=(spec.height, spec.width, spec.channels))
    smooth = uniform_filter(noise, size=(3, 3, 1), mode="reflect")
    return np.clip(bg.level + smooth, 0.0, 1.0)


def object_mask(obj: ObjectSpec, b: int, height: int, width: int) -> np.ndarray:
    cy, cx = obj.center(b)
    rows = np.arange(height)[:, None]
    cols = np.arange(width)[None, :]
    if obj.shape == "disk":
        return (rows - cy) ** 2 + (cols - cx) ** 2 <= obj.radius ** 2
    return (np.abs(rows - cy) <= obj.radius) & (np.abs(cols - cx) <= obj.radius)


def _mask_box(mask: np.ndarray) -> tuple[int, int, int, int]:
    ys, xs = np.nonzero(mask)
    return (int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1)


def generate_scene(spec: SceneSpec) -> tuple[FrameSequence, GroundTruth]:
    """Render ``spec``; a pure function of the spec (seeded background)."""
    spec.validate()
    texture = background_texture(spec)
    frames = np.empty((spec.frame_count, spec.height, spec.width, spec.channels), np.float32)
    masks = np.zeros(
        (spec.frame_count, len(spec.objects), spec.height, spec.width), dtype=bool
    )
    boxes = []
    for b in range(spec.frame_count):
        img = texture.copy()
        frame_boxes = []
        for k, obj in enumerate(spec.objects):
            m = object_mask(obj, b, spec.height, spec.width)
            img[m] = obj.intensity
            masks[b, k] = m
            frame_boxes.append(_mask_box(m))
        frames[b] = img
        boxes.append(frame_boxes)
    return FrameSequence(frames), GroundTruth(boxes=boxes, masks=masks)


def _min_separation(objects, frame_count: int) -> float:
    best = np.inf
    for b in range(frame_count):
        centers = [o.center(b) for o in objects]
        for i, ci in enumerate(centers):
            for cj in centers[i + 1:]:
                best = min(best, float(np.hypot(ci[0] - cj[0], ci[1] - cj[1])))
    return best


def random_scene_spec(
    seed: int,
    height: int = 64,
    width: int = 64,
    channels: int = 3,
    frame_count: int = 8,
    n_objects: int = 2,
    radius: float = 7.0,
    speed: float = 1.0,
    intensity: float = 0.9,
    level: float = 0.2,
    amplitude: float = 0.05,
    min_gap: float = 10.0,
    max_tries: int = 1000,
) -> SceneSpec:
    """Draw a valid scene with ``n_objects`` non-overlapping moving disks."""
    rng = np.random.default_rng(seed)
    for _ in range(max_tries):
        objects = []
        for _k in range(n_objects):
            angle = rng.uniform(0.0, 2.0 * np.pi)
            vel = (round(float(speed * np.sin(angle)), 6), round(float(speed * np.cos(angle)), 6))
            lo = radius + 1.0
            start = (
                float(rng.uniform(lo, height - 1 - lo)),
                float(rng.uniform(lo, width - 1 - lo)),
            )
            objects.append(ObjectSpec("disk", radius, start, vel, intensity))
        spec = SceneSpec(
            height, width, channels, frame_count, tuple(objects),
            BackgroundSpec(level, amplitude, seed),
        )
        try:
            spec.validate()
        except SceneSpecError:
            continue
        # keep objects apart so the detector sees them as separate blobs
        if _min_separation(objects, frame_count) >= 2 * radius + min_gap:
            return spec
    raise SceneSpecError(f"could not place {n_objects} objects after {max_tries} tries")


# ---------------------------------------------------------------- tensors


def save_tensor(t, path) -> None:
    """Write ``t`` in the UAPT binary format as little-endian float32."""
    arr = np.asarray(t)
    if not np.all(np.isfinite(arr)):
        raise ValueError("refusing to save a tensor with NaN/Inf entries")
    if arr.ndim > 255:
        raise ValueError("too many dimensions")
    arr = np.ascontiguousarray(arr, dtype="<f4")
    header = TENSOR_MAGIC + bytes([TENSOR_VERSION, DTYPE_FLOAT32, arr.ndim])
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    try:
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(arr.tobytes(order="C"))
    except OSError as exc:
        raise FrameIOError(f"cannot write tensor {path}: {exc}") from exc


def load_tensor(path) -> np.ndarray:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise FrameIOError(f"cannot read tensor {path}: {exc}") from exc
    if len(data) < 7 or data[:4] != TENSOR_MAGIC:
        raise TensorFormatError(f"{path}: bad magic, not a UAPT tensor file")
    version, dtype, ndim = data[4], data[5], data[6]
    if version != TENSOR_VERSION:
        raise TensorFormatError(f"{path}: unsupported version {version}")
    if dtype != DTYPE_FLOAT32:
        raise TensorFormatError(f"{path}: unsupported dtype code {dtype}")
    head = 7 + 4 * ndim
    if len(data) < head:
        raise TensorFormatError(f"{path}: truncated shape header")
    shape = struct.unpack(f"<{ndim}I", data[7:head])
    expected = int(np.prod(shape, dtype=np.int64)) * 4
    payload = data[head:]
    if len(payload) != expected:
        raise TensorFormatError(
            f"{path}: truncated payload, header {shape} needs {expected} bytes, "
            f"found {len(payload)}"
        )
    return np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float32)


# ----------------------------------------------------------------- frames


def write_png(frame, path, bitdepth: int = 8) -> None:
    """Write one ``H x W x C`` frame in [0, 1] as an 8- or 16-bit PNG."""
    arr = np.asarray(frame, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    h, w, c = arr.shape
    if c not in (1, 3):
        raise ValueError("PNG frames need 1 or 3 channels")
    scale = (1 << bitdepth) - 1
    q = np.rint(np.clip(arr, 0.0, 1.0) * scale).astype(np.uint16 if bitdepth == 16 else np.uint8)
    writer = png.Writer(w, h, greyscale=(c == 1), bitdepth=bitdepth)
    try:
        with open(path, "wb") as fh:
            writer.write(fh, q.reshape(h, w * c))
    except OSError as exc:
        raise FrameIOError(f"cannot write {path}: {exc}") from exc


def read_png(path) -> np.ndarray:
    try:
        width, height, rows, info = png.Reader(filename=str(path)).asDirect()
        data = np.vstack([np.asarray(r, dtype=np.float64) for r in rows])
    except (OSError, png.Error) as exc:
        raise FrameIOError(f"cannot read {path}: {exc}") from exc
    planes = info["planes"]
    img = data.reshape(height, width, planes) / float((1 << info["bitdepth"]) - 1)
    if info.get("alpha"):
        img = img[:, :, :-1]
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def write_frames(seq: FrameSequence, dir_path, prefix: str = "frame", bitdepth: int = 8):
    out = Path(dir_path)
    out.mkdir(parents=True, exist_ok=True)
    digits = max(4, len(str(seq.frame_count - 1)))
    paths = []
    for b, frame in enumerate(seq):
        p = out / f"{prefix}_{b:0{digits}d}.png"
        write_png(frame, p, bitdepth)
        paths.append(p)
    return paths


def load_frames(dir_path) -> FrameSequence:
    """Load PNG / UAPT frames from a directory, ordered by file name."""
    d = Path(dir_path)
    if not d.is_dir():
        raise FrameIOError(f"{d} is not a directory")
    files = sorted(
        p for p in d.iterdir()
        if p.is_file() and p.suffix.lower() in (".png", TENSOR_SUFFIX)
    )
    if not files:
        raise FrameIOError(f"{d} contains no .png or {TENSOR_SUFFIX} frames")
    frames = []
    for p in files:
        if p.suffix.lower() == ".png":
            img = read_png(p)
        else:
            img = load_tensor(p)
            if img.ndim == 2:
                img = img[:, :, None]
            if img.ndim != 3:
                raise FrameIOError(f"{p}: tensor frame must be H x W or H x W x C")
            img = np.clip(img, 0.0, 1.0)
        if frames and img.shape != frames[0].shape:
            raise FrameIOError(
                f"{p.name} has shape {img.shape}, expected {frames[0].shape}"
            )
        frames.append(img)
    return FrameSequence(np.stack(frames))


def write_ground_truth(gt: GroundTruth, spec: SceneSpec, path) -> None:
    payload = {"scene": spec.to_dict(), **gt.to_json()}
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
