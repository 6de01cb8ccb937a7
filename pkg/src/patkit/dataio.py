"""Point-cloud and event-stream I/O, synthetic datasets and clip windowing."""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

import numpy as np

from .errors import ContractError, FormatError
from .geometry import PointCloud

SHAPES = ("sphere", "cube", "cylinder", "torus")
SENSOR_SIZE = 128
EVENT_HEADER = "t_us,x,y,polarity"
INDEX_FILE = "index.tsv"


@dataclass
class Dataset:
    """Stacked clouds (S, N, 3+f) with one label per cloud (S,) or per point (S, N)."""

    points: np.ndarray
    labels: np.ndarray
    class_names: list = field(default_factory=list)
    outlier_mask: Optional[np.ndarray] = None
    groups: Optional[np.ndarray] = None  # e.g. source stream id of each clip

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.points.ndim != 3 or self.points.shape[-1] < 3:
            raise FormatError(f"dataset points need shape (S, N, 3+f), got {self.points.shape}")
        if self.labels.shape[0] != self.points.shape[0]:
            raise FormatError("points and labels disagree on sample count")

    def __len__(self) -> int:
        return self.points.shape[0]

    @property
    def n_classes(self) -> int:
        return len(self.class_names) if self.class_names else int(self.labels.max()) + 1

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(
            self.points[idx],
            self.labels[idx],
            list(self.class_names),
            None if self.outlier_mask is None else self.outlier_mask[idx],
            None if self.groups is None else self.groups[idx],
        )

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.points).tobytes())
        h.update(np.ascontiguousarray(self.labels).tobytes())
        return h.hexdigest()


# -- point-cloud text format ----------------------------------------------------------


def parse_point_cloud(text: str, source: str = "<text>") -> PointCloud:
    rows = []
    width = None
    for lineno, line in enumerate(text.splitlines(), 1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        parts = body.split()
        if len(parts) < 3:
            raise FormatError(f"{source}:{lineno}: need at least 3 columns, got {len(parts)}")
        if width is None:
            width = len(parts)
        elif len(parts) != width:
            raise FormatError(f"{source}:{lineno}: expected {width} columns, got {len(parts)}")
        try:
            rows.append([float(p) for p in parts])
        except ValueError:
            raise FormatError(f"{source}:{lineno}: non-numeric value in {body!r}") from None
    if not rows:
        raise FormatError(f"{source}: no points")
    try:
        return PointCloud(np.array(rows))
    except FormatError as exc:
        raise FormatError(f"{source}: {exc}") from None


def load_point_cloud(path) -> PointCloud:
    path = Path(path)
    return parse_point_cloud(path.read_text(encoding="utf-8"), str(path))


def format_point_cloud(cloud: Union[PointCloud, np.ndarray]) -> str:
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
    return "".join(" ".join(repr(float(v)) for v in row) + "\n" for row in pts)


def save_point_cloud(path, cloud: Union[PointCloud, np.ndarray]) -> None:
    Path(path).write_text(format_point_cloud(cloud), encoding="utf-8")


# -- synthetic shapes ----------------------------------------------------------------


def _unit_vectors(rng: np.random.Generator, n: int) -> np.ndarray:
    v = rng.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def sample_surface(shape: str, n: int, rng: np.random.Generator) -> np.ndarray:
    """n points uniformly on the surface of a unit-scale primitive centred at 0."""
    if shape == "sphere":
        return _unit_vectors(rng, n)
    if shape == "cube":
        p = rng.uniform(-1, 1, size=(n, 3))
        axis = rng.integers(0, 3, size=n)
        p[np.arange(n), axis] = rng.choice([-1.0, 1.0], size=n)
        return p
    if shape == "cylinder":
        # lateral area 4*pi vs caps 2*pi for radius 1, height 2
        p = np.empty((n, 3))
        theta = rng.uniform(0, 2 * math.pi, size=n)
        on_side = rng.random(n) < 2 / 3
        r = np.where(on_side, 1.0, np.sqrt(rng.random(n)))
        p[:, 0], p[:, 1] = r * np.cos(theta), r * np.sin(theta)
        p[:, 2] = np.where(on_side, rng.uniform(-1, 1, size=n), rng.choice([-1.0, 1.0], size=n))
        return p
    if shape == "torus":
        big, small = 0.7, 0.3
        out = np.empty((0, 3))
        while len(out) < n:
            # rejection on the tube angle gives an area-uniform sample
            u = rng.uniform(0, 2 * math.pi, size=2 * n)
            v = rng.uniform(0, 2 * math.pi, size=2 * n)
            keep = rng.random(2 * n) < (big + small * np.cos(v)) / (big + small)
            u, v = u[keep], v[keep]
            ring = big + small * np.cos(v)
            out = np.concatenate([out, np.stack([ring * np.cos(u), ring * np.sin(u), small * np.sin(v)], 1)])
        return out[:n]
    raise ContractError(f"unknown shape {shape!r}; expected one of {SHAPES}")


def rotate_z(points: np.ndarray, angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    out = np.array(points, dtype=np.float64, copy=True)
    x, y = out[..., 0].copy(), out[..., 1]
    out[..., 0] = c * x - s * y
    out[..., 1] = s * x + c * y
    return out


def gen_shapes(
    classes: Sequence[str] = SHAPES,
    n_per_class: int = 200,
    n_points: int = 256,
    noise_sigma: float = 0.01,
    outlier_frac: float = 0.0,
    rng: Union[np.random.Generator, int, None] = 0,
) -> Dataset:
    """Balanced labelled clouds of jittered primitive surfaces.

    Each cloud gets a random rotation about z, Gaussian jitter and
    floor(outlier_frac * n_points) points replaced by uniform draws in
    [-1.5, 1.5]^3. Samples are interleaved by class.
    """
    if n_points < 8:
        raise ContractError("gen_shapes needs n_points >= 8")
    if not 0 <= outlier_frac < 1:
        raise ContractError("outlier_frac must lie in [0, 1)")
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    n_out = int(math.floor(outlier_frac * n_points + 1e-9))
    pts, labels, masks = [], [], []
    for _ in range(n_per_class):
        for label, shape in enumerate(classes):
            p = sample_surface(shape, n_points, rng)
            p = rotate_z(p, rng.uniform(0, 2 * math.pi))
            p = p + rng.normal(scale=noise_sigma, size=p.shape)
            mask = np.zeros(n_points, dtype=bool)
            if n_out:
                where = rng.choice(n_points, n_out, replace=False)
                p[where] = rng.uniform(-1.5, 1.5, size=(n_out, 3))
                mask[where] = True
            pts.append(p)
            labels.append(label)
            masks.append(mask)
    return Dataset(np.stack(pts), np.array(labels), list(classes), np.stack(masks))


def gen_parts(n_samples: int = 200, n_points: int = 256, noise_sigma: float = 0.01, rng=0) -> Dataset:
    """Segmentation set: each cloud holds all four primitives at random offsets.

    Every point is labelled with the primitive it was sampled from.
    """
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    k = len(SHAPES)
    pts, labels = [], []
    for _ in range(n_samples):
        counts = np.full(k, n_points // k)
        counts[: n_points % k] += 1
        slots = rng.permutation(k)
        cloud, lab = [], []
        for label, (shape, cnt) in enumerate(zip(SHAPES, counts)):
            p = 0.45 * sample_surface(shape, int(cnt), rng)
            angle = slots[label] * math.pi / 2 + rng.uniform(-0.3, 0.3)
            p[:, 0] += math.cos(angle)
            p[:, 1] += math.sin(angle)
            cloud.append(p)
            lab.append(np.full(cnt, label))
        p = np.concatenate(cloud) + rng.normal(scale=noise_sigma, size=(n_points, 3))
        order = rng.permutation(n_points)
        pts.append(p[order])
        labels.append(np.concatenate(lab)[order])
    return Dataset(np.stack(pts), np.stack(labels), list(SHAPES))


def augment(points: np.ndarray, rng: np.random.Generator, sigma: float = 0.01) -> np.ndarray:
    """Random rotation about z per cloud plus per-point xyz jitter."""
    pts = np.array(points, dtype=np.float64, copy=True)
    angles = rng.uniform(0, 2 * math.pi, size=pts.shape[0])
    c, s = np.cos(angles)[:, None], np.sin(angles)[:, None]
    x, y = pts[..., 0].copy(), pts[..., 1].copy()
    pts[..., 0] = c * x - s * y
    pts[..., 1] = s * x + c * y
    pts[..., :3] += rng.normal(scale=sigma, size=pts[..., :3].shape)
    return pts.astype(points.dtype, copy=False)


# -- dataset manifests ---------------------------------------------------------------


def save_manifest(directory, dataset: Dataset) -> Path:
    """One point-cloud file per sample plus an index of 'label<TAB>path' lines."""
    if dataset.labels.ndim != 1:
        raise ContractError("manifests hold one label per cloud")
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = []
    width = max(4, len(str(len(dataset))))
    for i, (pts, label) in enumerate(zip(dataset.points, dataset.labels)):
        name = f"sample_{i:0{width}d}.txt"
        save_point_cloud(directory / name, pts.astype(np.float64))
        lines.append(f"{int(label)}\t{name}\n")
    index = directory / INDEX_FILE
    index.write_text("".join(lines), encoding="utf-8")
    return index


def load_manifest(directory) -> Dataset:
    directory = Path(directory)
    index = directory / INDEX_FILE
    if not index.exists():
        raise FormatError(f"{directory}: missing {INDEX_FILE}")
    pts, labels = [], []
    for lineno, line in enumerate(index.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 2 or not parts[0].strip().lstrip("-").isdigit():
            raise FormatError(f"{index}:{lineno}: expected 'label<TAB>path'")
        label = int(parts[0])
        if label < 0:
            raise FormatError(f"{index}:{lineno}: negative label")
        cloud = load_point_cloud(directory / parts[1].strip())
        if pts and cloud.points.shape != pts[0].shape:
            raise FormatError(f"{index}:{lineno}: cloud shape {cloud.points.shape} differs from {pts[0].shape}")
        pts.append(cloud.points)
        labels.append(label)
    if not pts:
        raise FormatError(f"{index}: empty manifest")
    return Dataset(np.stack(pts), np.array(labels))


# -- events --------------------------------------------------------------------------


@dataclass(frozen=True)
class EventRecord:
    t: int
    x: int
    y: int
    polarity: int


@dataclass(frozen=True)
class ClipSpec:
    window_ms: float = 750.0
    step_ms: float = 100.0
    n_sample: int = 256

    def __post_init__(self):
        if not (self.window_ms > 0 and self.step_ms > 0):
            raise ContractError("window and step must be positive")
        if self.step_ms > self.window_ms:
            raise ContractError("step must not exceed the window length")
        if self.n_sample < 1:
            raise ContractError("n_sample must be >= 1")


EventsLike = Union[Sequence[EventRecord], np.ndarray]


def events_to_array(stream: EventsLike) -> np.ndarray:
    """(n, 4) int64 array of t_us, x, y, polarity."""
    if isinstance(stream, np.ndarray):
        arr = stream.astype(np.int64, copy=False)
        return arr.reshape(-1, 4)
    return np.array([(e.t, e.x, e.y, e.polarity) for e in stream], dtype=np.int64).reshape(-1, 4)


def array_to_events(arr: np.ndarray) -> list[EventRecord]:
    return [EventRecord(int(t), int(x), int(y), int(p)) for t, x, y, p in np.asarray(arr)]


def validate_events(arr: np.ndarray, source: str = "<events>", first_row: int = 1) -> None:
    bad_xy = (arr[:, 1] < 0) | (arr[:, 1] >= SENSOR_SIZE) | (arr[:, 2] < 0) | (arr[:, 2] >= SENSOR_SIZE)
    bad_p = (arr[:, 3] != 0) & (arr[:, 3] != 1)
    bad = bad_xy | bad_p
    if bad.any():
        i = int(np.argmax(bad))
        what = "x/y outside [0, 128)" if bad_xy[i] else "polarity not in {0, 1}"
        raise FormatError(f"{source}: row {i + first_row}: {what}")
    desc = np.diff(arr[:, 0]) < 0
    if desc.any():
        i = int(np.argmax(desc)) + 1
        raise FormatError(f"{source}: row {i + first_row}: timestamp decreases")


def load_events(path) -> list[EventRecord]:
    return array_to_events(load_events_array(path))


def load_events_array(path) -> np.ndarray:
    path = Path(path)
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines or lines[0].strip().replace(" ", "") != EVENT_HEADER:
        raise FormatError(f"{path}: first line must be '{EVENT_HEADER}'")
    rows = []
    for row, line in enumerate(lines[1:], 1):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != 4:
            raise FormatError(f"{path}: row {row}: expected 4 fields, got {len(parts)}")
        try:
            rows.append([int(p) for p in parts])
        except ValueError:
            raise FormatError(f"{path}: row {row}: non-integer field in {line.strip()!r}") from None
    arr = np.array(rows, dtype=np.int64).reshape(-1, 4)
    validate_events(arr, str(path))
    return arr


def save_events(path, stream: EventsLike) -> None:
    arr = events_to_array(stream)
    validate_events(arr)
    body = "".join(f"{t},{x},{y},{p}\n" for t, x, y, p in arr.tolist())
    Path(path).write_text(EVENT_HEADER + "\n" + body, encoding="utf-8")


def clip_count(span_us: int, spec: ClipSpec) -> int:
    window, step = spec.window_ms * 1000, spec.step_ms * 1000
    if span_us < window:
        return 0
    return int(math.floor((span_us - window) / step + 1e-9)) + 1


def window_events(
    stream: EventsLike,
    spec: ClipSpec = ClipSpec(),
    rng: Union[np.random.Generator, int, None] = 0,
) -> list[PointCloud]:
    """Slice a sorted stream into fixed-size spatio-temporal clouds.

    Window k covers [t0 + k*step, t0 + k*step + window) with t0 the first
    timestamp; windows must end within the stream span (last - first + 1 us).
    Points are (x, y, t_norm, polarity) with x, y mapped to [-1, 1] and
    t_norm in [0, 1). Windows without events are skipped.
    """
    arr = events_to_array(stream)
    if len(arr) == 0:
        return []
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    t = arr[:, 0]
    t0 = int(t[0])
    span = int(t[-1]) - t0 + 1
    window, step = spec.window_ms * 1000, spec.step_ms * 1000
    clips = []
    for k in range(clip_count(span, spec)):
        start = t0 + k * step
        lo, hi = np.searchsorted(t, [start, start + window], side="left")
        if hi <= lo:
            continue
        ev = arr[lo:hi]
        pick = rng.choice(len(ev), spec.n_sample, replace=len(ev) < spec.n_sample)
        ev = ev[np.sort(pick)]
        pts = np.empty((spec.n_sample, 4))
        pts[:, 0] = ev[:, 1] / (SENSOR_SIZE - 1) * 2 - 1
        pts[:, 1] = ev[:, 2] / (SENSOR_SIZE - 1) * 2 - 1
        pts[:, 2] = (ev[:, 0] - start) / window
        pts[:, 3] = ev[:, 3]
        clips.append(PointCloud(pts))
    return clips


def system_prediction(clip_predictions: Iterable[int]) -> int:
    """Most frequent clip label; ties go to the lowest class id."""
    preds = np.asarray(list(clip_predictions), dtype=np.int64)
    if preds.size == 0:
        raise ContractError("system_prediction needs at least one clip prediction")
    if preds.min() < 0:
        raise ContractError("class ids must be non-negative")
    return int(np.argmax(np.bincount(preds)))


GESTURES = ("circle", "swipe_right", "swipe_down")


def gen_gesture_stream(
    label: int,
    rng: np.random.Generator,
    duration_ms: float = 1500.0,
    rate_per_ms: float = 8.0,
    noise_frac: float = 0.1,
) -> np.ndarray:
    """One synthetic event stream of a blob tracing gesture ``label``.

    0 circles around a random centre, 1 sweeps left to right, 2 sweeps top
    to bottom. A fraction of events are uniform background noise.
    """
    n = int(duration_ms * rate_per_ms)
    t = np.sort(rng.integers(0, int(duration_ms * 1000), size=n))
    phase = t / (duration_ms * 1000)
    cx, cy = rng.uniform(48, 80, size=2)
    speed = rng.uniform(0.8, 1.2)
    if label == 0:
        ang = 2 * math.pi * (speed * phase * 1.5) + rng.uniform(0, 2 * math.pi)
        x, y = cx + 30 * np.cos(ang), cy + 30 * np.sin(ang)
    elif label == 1:
        x = 10 + ((speed * phase * 2) % 1.0) * 108
        y = np.full(n, cy)
    elif label == 2:
        x = np.full(n, cx)
        y = 10 + ((speed * phase * 2) % 1.0) * 108
    else:
        raise ContractError(f"gesture label must be in [0, {len(GESTURES)})")
    x = x + rng.normal(scale=3.0, size=n)
    y = y + rng.normal(scale=3.0, size=n)
    noise = rng.random(n) < noise_frac
    x[noise] = rng.uniform(0, SENSOR_SIZE, size=noise.sum())
    y[noise] = rng.uniform(0, SENSOR_SIZE, size=noise.sum())
    xi = np.clip(np.round(x), 0, SENSOR_SIZE - 1).astype(np.int64)
    yi = np.clip(np.round(y), 0, SENSOR_SIZE - 1).astype(np.int64)
    pol = rng.integers(0, 2, size=n)
    return np.stack([t, xi, yi, pol], axis=1)


def gen_gesture_streams(n_per_class: int, rng=0, **kwargs) -> tuple[list[np.ndarray], np.ndarray]:
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    streams, labels = [], []
    for _ in range(n_per_class):
        for label in range(len(GESTURES)):
            streams.append(gen_gesture_stream(label, rng, **kwargs))
            labels.append(label)
    return streams, np.array(labels)


def clips_dataset(streams: Sequence[np.ndarray], labels: Sequence[int], spec: ClipSpec, rng=0) -> Dataset:
    """Window every stream; each clip inherits its stream label and id (``groups``)."""
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    pts, labs, groups = [], [], []
    for sid, (stream, label) in enumerate(zip(streams, labels)):
        for clip in window_events(stream, spec, rng):
            pts.append(clip.points)
            labs.append(int(label))
            groups.append(sid)
    if not pts:
        raise ContractError("no stream is long enough for a single clip")
    return Dataset(np.stack(pts), np.array(labs), list(GESTURES), groups=np.array(groups))


def stream_accuracy(clip_preds: np.ndarray, groups: np.ndarray, stream_labels: Sequence[int]) -> float:
    """Share of streams whose mode-voted clip prediction matches the stream label."""
    clip_preds, groups = np.asarray(clip_preds), np.asarray(groups)
    hits = [
        system_prediction(clip_preds[groups == sid]) == label
        for sid, label in enumerate(stream_labels)
        if np.any(groups == sid)
    ]
    return float(np.mean(hits)) if hits else 0.0
