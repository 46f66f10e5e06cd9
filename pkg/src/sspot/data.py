"""Dataset directory format, loading, normalisation and a synthetic event generator.

A dataset directory holds::

    manifest.json             shape, class names, channel statistics, splits
    samples/day_00000.bin     float32 little-endian, C-order [channel][frame][row][col]
    labels.csv                day,frame,class_id,x,y,w,h   (labeled frames only)
    events.csv                every planted event, including unlabeled ones
"""

from __future__ import annotations

import csv
import json
import logging
import math
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .geometry import Box
from .tensor import Tensor

log = logging.getLogger(__name__)

STD_FLOOR = 1e-6
SAMPLE_DTYPE = np.dtype("<f4")
MORPHOLOGIES = ("rotating-spiral", "compact-blob", "elongated-band", "drifting-blob")
LABEL_HEADER = ["day", "frame", "class_id", "x", "y", "w", "h"]
EVENT_HEADER = ["day", "event", "class_id", "x0", "y0", "w", "h", "dx", "dy", "spin", "labeled"]


@dataclass
class DatasetManifest:
    channels: int
    timesteps_per_sample: int
    image_h: int
    image_w: int
    num_classes: int
    class_names: list[str]
    channel_mean: list[float]
    channel_std: list[float]
    sample_count: int
    labeled_frames: list[int] = field(default_factory=lambda: [0, 2, 4, 6])
    splits: dict[str, list[int]] = field(default_factory=dict)
    generator: dict | None = None

    def __post_init__(self):
        if len(self.channel_mean) != self.channels or len(self.channel_std) != self.channels:
            raise ValueError("channel statistics must have one entry per channel")
        if any(s <= 0 for s in self.channel_std):
            raise ValueError("channel stddev must be positive")
        if any(not 0 <= f < self.timesteps_per_sample for f in self.labeled_frames):
            raise ValueError(f"labeled frames {self.labeled_frames} outside [0, {self.timesteps_per_sample})")
        if len(self.class_names) != self.num_classes:
            raise ValueError("class_names must have num_classes entries")
        if not self.splits:
            self.splits = {"train": list(range(self.sample_count))}

    @property
    def sample_shape(self) -> tuple[int, int, int, int]:
        return (self.channels, self.timesteps_per_sample, self.image_h, self.image_w)

    @property
    def sample_bytes(self) -> int:
        return math.prod(self.sample_shape) * SAMPLE_DTYPE.itemsize

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetManifest":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


def sample_path(root: Path, index: int) -> Path:
    return Path(root) / "samples" / f"day_{index:05d}.bin"


def write_sample(root: Path, index: int, values: np.ndarray) -> None:
    path = sample_path(root, index)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(np.ascontiguousarray(values, dtype=SAMPLE_DTYPE).tobytes())


class Dataset:
    """Read-only view of a dataset directory."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        try:
            self.manifest = DatasetManifest.from_dict(json.loads((self.root / "manifest.json").read_text("utf-8")))
        except FileNotFoundError:
            raise FileNotFoundError(f"no manifest.json in {self.root}") from None
        self._labels: dict[int, list[Box]] = defaultdict(list)
        labels = self.root / "labels.csv"
        if labels.exists():
            with labels.open(newline="") as fh:
                for row in csv.DictReader(fh):
                    self._labels[int(row["day"])].append(
                        Box(float(row["x"]), float(row["y"]), float(row["w"]), float(row["h"]),
                            int(row["class_id"]), int(row["frame"]))
                    )

    def __len__(self) -> int:
        return self.manifest.sample_count

    def split(self, name: str) -> list[int]:
        try:
            return list(self.manifest.splits[name])
        except KeyError:
            raise KeyError(f"dataset has no split {name!r}; available: {sorted(self.manifest.splits)}") from None

    def boxes(self, index: int) -> list[Box]:
        return list(self._labels.get(index, []))

    def read_raw(self, index: int) -> np.ndarray:
        """Unnormalised sample as float64 [C, T, H, W]."""
        if not 0 <= index < len(self):
            raise IndexError(f"sample {index} outside [0, {len(self)})")
        path = sample_path(self.root, index)
        if not path.exists():
            raise FileNotFoundError(f"missing sample file {path}")
        raw = path.read_bytes()
        if len(raw) != self.manifest.sample_bytes:
            raise ValueError(f"{path}: expected {self.manifest.sample_bytes} bytes, found {len(raw)}")
        return np.frombuffer(raw, dtype=SAMPLE_DTYPE).astype(np.float64).reshape(self.manifest.sample_shape)

    def normalize(self, values: np.ndarray) -> np.ndarray:
        m = np.asarray(self.manifest.channel_mean)[:, None, None, None]
        s = np.asarray(self.manifest.channel_std)[:, None, None, None]
        return (values - m) / s

    def load_sample(self, index: int) -> tuple[Tensor, list[Box]]:
        return Tensor(self.normalize(self.read_raw(index))), self.boxes(index)


def load_sample(dataset: Dataset | str | Path, index: int) -> tuple[Tensor, list[Box]]:
    """z-scored sample tensor [C, T, H, W] and its labeled boxes."""
    ds = dataset if isinstance(dataset, Dataset) else Dataset(dataset)
    return ds.load_sample(index)


def compute_channel_stats(dataset: Dataset, split: str | Sequence[int] = "train") -> tuple[np.ndarray, np.ndarray]:
    """Population mean and stddev per channel over every frame of a split (two passes)."""
    indices = dataset.split(split) if isinstance(split, str) else list(split)
    if not indices:
        raise ValueError("cannot compute statistics of an empty split")
    c = dataset.manifest.channels
    n_per = math.prod(dataset.manifest.sample_shape[1:])
    total = np.zeros(c)
    for i in indices:
        total += dataset.read_raw(i).reshape(c, -1).sum(axis=1)
    mean = total / (n_per * len(indices))
    sq = np.zeros(c)
    for i in indices:
        d = dataset.read_raw(i).reshape(c, -1) - mean[:, None]
        sq += np.einsum("ij,ij->i", d, d)
    std = np.sqrt(sq / (n_per * len(indices)))
    low = std < STD_FLOOR
    if low.any():
        log.warning("channels %s have (near) zero variance; stddev floored at %g", np.flatnonzero(low).tolist(), STD_FLOOR)
        std = np.where(low, STD_FLOOR, std)
    return mean, std


# ---------------------------------------------------------------------------
# synthetic generator


@dataclass(frozen=True)
class EventClassSpec:
    name: str
    morphology: str
    width: tuple[float, float]
    height: tuple[float, float] | None  # None: square events
    signature: dict[int, float]  # channel -> amplitude in background stddevs
    motion: tuple[float, float] = (0.0, 0.0)  # pixels per frame (dx, dy)
    spin: float = 0.0  # radians per frame, spirals only

    def __post_init__(self):
        if self.morphology not in MORPHOLOGIES:
            raise ValueError(f"unknown morphology {self.morphology!r}; choose from {MORPHOLOGIES}")
        lo, hi = self.width
        if not 0 < lo <= hi:
            raise ValueError(f"{self.name}: width range must be positive and ordered")
        if self.height is not None and not 0 < self.height[0] <= self.height[1]:
            raise ValueError(f"{self.name}: height range must be positive and ordered")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["signature"] = {str(k): v for k, v in self.signature.items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EventClassSpec":
        d = dict(d)
        d["signature"] = {int(k): float(v) for k, v in d["signature"].items()}
        d["width"] = tuple(d["width"])
        d["height"] = tuple(d["height"]) if d.get("height") is not None else None
        d["motion"] = tuple(d.get("motion", (0.0, 0.0)))
        return cls(**d)


@dataclass(frozen=True)
class SyntheticEventSpec:
    classes: tuple[EventClassSpec, ...]
    events_per_day: tuple[int, int] = (1, 3)
    drop_rate: float = 0.0
    channels: int = 8
    image_h: int = 128
    image_w: int = 192
    timesteps: int = 8
    labeled_frames: tuple[int, ...] = (0, 2, 4, 6)
    cell: int = 64
    background_modes: int = 6
    max_wavenumber: int = 1  # background modes complete at most this many cycles across the image
    background_scale: float = 0.1  # weak clutter relative to event amplitudes of 2 to 2.5
    noise: float = 0.1

    def __post_init__(self):
        if not 0.0 <= self.drop_rate < 1.0:
            raise ValueError(f"drop_rate must lie in [0, 1), got {self.drop_rate}")
        lo, hi = self.events_per_day
        if not 0 <= lo <= hi:
            raise ValueError("events_per_day must be an ordered non-negative range")
        for c in self.classes:
            if any(not 0 <= ch < self.channels for ch in c.signature):
                raise ValueError(f"{c.name}: signature channel outside [0, {self.channels})")
        if self.max_wavenumber < 1 or self.background_scale < 0 or self.noise < 0:
            raise ValueError("need max_wavenumber >= 1 and non-negative background_scale and noise")
        if self.image_h % self.cell or self.image_w % self.cell:
            raise ValueError("image extents must be multiples of the cell size")

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["classes"] = [c.to_dict() for c in self.classes]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticEventSpec":
        d = dict(d)
        d["classes"] = tuple(EventClassSpec.from_dict(c) for c in d["classes"])
        for k in ("events_per_day", "labeled_frames"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)

    @classmethod
    def default(cls, **overrides) -> "SyntheticEventSpec":
        """Four classes loosely modelled on TD / TC / ETC / AR morphologies."""
        classes = (
            EventClassSpec("TD", "compact-blob", (26, 36), None, {0: 2.0, 1: 2.5}, (1.5, 0.5)),
            EventClassSpec("TC", "rotating-spiral", (40, 58), None, {0: 2.0, 2: 2.5, 3: -2.0}, (-1.0, 1.0), 0.35),
            EventClassSpec("ETC", "drifting-blob", (48, 70), (36, 50), {0: 1.5, 4: 2.5, 5: -2.0}, (3.0, -0.5)),
            EventClassSpec("AR", "elongated-band", (80, 110), (20, 28), {0: 2.5, 6: 2.5, 7: 2.0}, (2.0, 0.0)),
        )
        return cls(classes=classes, **overrides)

    @classmethod
    def temporal(cls, **overrides) -> "SyntheticEventSpec":
        """Classes 0 and 1 look identical in any single frame; only their motion differs."""
        same = {0: 2.0, 1: 2.5}
        classes = (
            EventClassSpec("STILL", "compact-blob", (30, 40), None, same, (0.0, 0.0)),
            EventClassSpec("MOVER", "compact-blob", (30, 40), None, same, (12.0, 0.0)),
            EventClassSpec("SPIRAL", "rotating-spiral", (40, 58), None, {0: 2.0, 2: 2.5, 3: -2.0}, (-1.0, 1.0), 0.35),
            EventClassSpec("BAND", "elongated-band", (80, 110), (20, 28), {0: 2.5, 6: 2.5, 7: 2.0}, (2.0, 0.0)),
        )
        return cls(classes=classes, **overrides)


@dataclass
class PlantedEvent:
    class_id: int
    x0: float
    y0: float
    w: float
    h: float
    dx: float
    dy: float
    spin: float
    labeled: bool = True

    def center(self, frame: int) -> tuple[float, float]:
        return self.x0 + self.dx * frame, self.y0 + self.dy * frame

    def box(self, frame: int) -> Box:
        x, y = self.center(frame)
        return Box(x, y, self.w, self.h, self.class_id, frame)


def _pixel_grid(h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    ys = np.arange(h) + 0.5
    xs = np.arange(w) + 0.5
    return np.broadcast_to(xs[None, :], (h, w)), np.broadcast_to(ys[:, None], (h, w))


def render_event(event: PlantedEvent, morphology: str, frame: int, image_h: int, image_w: int) -> np.ndarray:
    """Unit-amplitude pattern of one event at one frame; support is the ellipse inscribed in its box."""
    X, Y = _pixel_grid(image_h, image_w)
    cx, cy = event.center(frame)
    u = (X - cx) / (event.w / 2)
    v = (Y - cy) / (event.h / 2)
    r2 = u * u + v * v
    env = np.where(r2 < 1.0, (1.0 - r2) ** 2, 0.0)
    if morphology == "rotating-spiral":
        theta = np.arctan2(v, u)
        arms = 0.5 + 0.5 * np.cos(2.0 * (theta - event.spin * frame) + 5.0 * np.sqrt(r2))
        return env * (0.35 + 0.65 * arms)
    if morphology == "elongated-band":
        return env * (0.8 + 0.2 * np.cos(3.0 * np.pi * u))
    return env


def _background(rng: np.random.Generator, spec: SyntheticEventSpec) -> np.ndarray:
    """Smooth, slowly evolving random fields; variance background_scale**2 plus noise."""
    c, t, h, w = spec.channels, spec.timesteps, spec.image_h, spec.image_w
    X, Y = _pixel_grid(h, w)
    out = np.empty((c, t, h, w))
    k = spec.background_modes
    amp = math.sqrt(2.0 / k)
    for ch in range(c):
        kx = rng.integers(0, spec.max_wavenumber + 1, size=k)
        ky = rng.integers(0, spec.max_wavenumber + 1, size=k)
        kx[(kx == 0) & (ky == 0)] = 1
        phase = rng.uniform(0, 2 * np.pi, size=k)
        drift = rng.normal(0.0, 0.15, size=k)
        spatial = [2 * np.pi * (kx[m] * X / w + ky[m] * Y / h) for m in range(k)]
        for f in range(t):
            field_ = np.zeros((h, w))
            for m in range(k):
                field_ += np.cos(spatial[m] + phase[m] + drift[m] * f)
            out[ch, f] = spec.background_scale * amp * field_
    out += spec.noise * rng.standard_normal(out.shape)
    return out


def _place_events(rng: np.random.Generator, spec: SyntheticEventSpec) -> list[PlantedEvent]:
    lo, hi = spec.events_per_day
    n = int(rng.integers(lo, hi + 1))
    last = spec.timesteps - 1
    taken: set[tuple[int, int, int]] = set()
    events: list[PlantedEvent] = []
    for _ in range(n):
        cid = int(rng.integers(0, spec.num_classes))
        cs = spec.classes[cid]
        w = float(rng.uniform(*cs.width))
        h = w if cs.height is None else float(rng.uniform(*cs.height))
        dx, dy = cs.motion
        # keep the whole box inside the image on every frame
        xlo = w / 2 + max(0.0, -dx * last) + 1
        xhi = spec.image_w - w / 2 - max(0.0, dx * last) - 1
        ylo = h / 2 + max(0.0, -dy * last) + 1
        yhi = spec.image_h - h / 2 - max(0.0, dy * last) - 1
        if xlo >= xhi or ylo >= yhi:
            raise ValueError(f"class {cs.name} cannot fit inside a {spec.image_h}x{spec.image_w} image")
        for _attempt in range(50):
            x0 = float(rng.uniform(xlo, xhi))
            y0 = float(rng.uniform(ylo, yhi))
            cells = {
                (f, int((y0 + dy * f) // spec.cell), int((x0 + dx * f) // spec.cell)) for f in spec.labeled_frames
            }
            if not cells & taken:
                taken |= cells
                events.append(PlantedEvent(cid, x0, y0, w, h, dx, dy, cs.spin))
                break
    for ev in events:
        ev.labeled = not (spec.drop_rate > 0 and rng.random() < spec.drop_rate)
    return events


def synthesize_day(spec: SyntheticEventSpec, seed: int, day: int) -> tuple[np.ndarray, list[PlantedEvent]]:
    """One day's raw fields [C, T, H, W] and the events planted in it."""
    rng = np.random.default_rng([seed, day])
    fields = _background(rng, spec)
    events = _place_events(rng, spec)
    for ev in events:
        cs = spec.classes[ev.class_id]
        for f in range(spec.timesteps):
            pattern = render_event(ev, cs.morphology, f, spec.image_h, spec.image_w)
            for ch, amp in cs.signature.items():
                fields[ch, f] += amp * pattern
    # give channels physical-looking offsets and scales so normalisation matters
    ch_rng = np.random.default_rng([seed, 2**31 - 1])
    offset = ch_rng.uniform(-50, 300, size=spec.channels)
    scale = ch_rng.uniform(0.5, 20.0, size=spec.channels)
    return offset[:, None, None, None] + scale[:, None, None, None] * fields, events


def generate_synthetic_dataset(
    spec: SyntheticEventSpec, out_dir: str | Path, n_days: int, seed: int, test_days: int = 0
) -> Dataset:
    """Write a complete dataset directory; byte-identical for equal arguments.

    The last ``test_days`` of the ``n_days`` form the "test" split; channel
    statistics come from the "train" split.
    """
    if n_days < 1 or not 0 <= test_days < n_days:
        raise ValueError(f"need n_days >= 1 and 0 <= test_days < n_days, got {n_days}, {test_days}")
    root = Path(out_dir)
    try:
        (root / "samples").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create dataset directory {root}: {exc}") from exc

    label_rows, event_rows = [], []
    for day in range(n_days):
        values, events = synthesize_day(spec, seed, day)
        write_sample(root, day, values)
        for k, ev in enumerate(events):
            event_rows.append(
                [day, k, ev.class_id, f"{ev.x0:.6f}", f"{ev.y0:.6f}", f"{ev.w:.6f}", f"{ev.h:.6f}",
                 f"{ev.dx:.6f}", f"{ev.dy:.6f}", f"{ev.spin:.6f}", int(ev.labeled)]
            )
        for f in spec.labeled_frames:
            for ev in events:
                if ev.labeled:
                    b = ev.box(f)
                    label_rows.append([day, f, b.class_id, f"{b.x:.6f}", f"{b.y:.6f}", f"{b.w:.6f}", f"{b.h:.6f}"])
    label_rows.sort(key=lambda r: (r[0], r[1]))
    _write_csv(root / "labels.csv", LABEL_HEADER, label_rows)
    _write_csv(root / "events.csv", EVENT_HEADER, event_rows)

    n_train = n_days - test_days
    splits = {"train": list(range(n_train))}
    if test_days:
        splits["test"] = list(range(n_train, n_days))
    manifest = DatasetManifest(
        channels=spec.channels,
        timesteps_per_sample=spec.timesteps,
        image_h=spec.image_h,
        image_w=spec.image_w,
        num_classes=spec.num_classes,
        class_names=[c.name for c in spec.classes],
        channel_mean=[0.0] * spec.channels,
        channel_std=[1.0] * spec.channels,
        sample_count=n_days,
        labeled_frames=list(spec.labeled_frames),
        splits=splits,
        generator={"seed": seed, "spec": spec.to_dict()},
    )
    write_manifest(root, manifest)
    ds = Dataset(root)
    mean, std = compute_channel_stats(ds, "train")
    manifest.channel_mean = mean.tolist()
    manifest.channel_std = std.tolist()
    write_manifest(root, manifest)
    return Dataset(root)


def write_manifest(root: Path, manifest: DatasetManifest) -> None:
    text = json.dumps(manifest.to_dict(), indent=2, sort_keys=True)
    (Path(root) / "manifest.json").write_text(text + "\n", encoding="utf-8")


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def read_events(root: str | Path) -> list[dict]:
    """Every planted event, typed; ``labeled`` is False for dropped labels."""
    ints = ("day", "event", "class_id")
    with (Path(root) / "events.csv").open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    out = []
    for r in rows:
        ev = {k: int(v) if k in ints else float(v) for k, v in r.items() if k != "labeled"}
        ev["labeled"] = r["labeled"] == "1"
        out.append(ev)
    return out
