"""Synthetic traffic scenes with annotated consecutive frames.

A scene is a static textured background with textured rectangular road
users moving at constant integer velocity. The generator can add thin static
occluding bars, motion blur (sub-frame averaging) and static unannotated
distractors that look like road users. Output is a pure function of the
:class:`SceneSpec`, seed included.

On disk a sequence is a directory::

    frames/000000.png ...
    annotations.jsonl     one record per frame
    spec.json             the generating SceneSpec
    meta.json             format version, channel means, class names

A collection groups many sequences under one root with ``collection.json``.
"""

from __future__ import annotations

import json
from collections.abc import Sequence
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .geometry import Box, LabeledBox
from .inputs import Frame

FORMAT_VERSION = 1
SMALL_SIDE = 12
PLACEMENT_TRIES = 50
TAGS = ("small", "occluded", "blurred", "stationary", "moving")


class DatasetFormatError(ValueError):
    pass


@dataclass(frozen=True)
class ClassSpec:
    """Appearance and motion range of one road-user class.

    ``size_range`` bounds the longer box side in pixels; ``aspect`` is
    height / width.
    """

    name: str
    size_range: tuple[int, int]
    speed_range: tuple[int, int]
    aspect: float
    color: tuple[float, float, float]


DEFAULT_CLASSES = (
    ClassSpec("car", (16, 28), (1, 4), 0.6, (0.80, 0.20, 0.15)),
    ClassSpec("pedestrian", (4, 8), (1, 2), 2.0, (0.15, 0.20, 0.65)),
    ClassSpec("bus", (28, 40), (1, 3), 0.45, (0.90, 0.75, 0.10)),
)


@dataclass(frozen=True)
class SceneSpec:
    image_size: tuple[int, int] = (128, 128)
    num_frames: int = 20
    classes: tuple[ClassSpec, ...] = DEFAULT_CLASSES
    object_count_range: tuple[int, int] = (3, 6)
    occluder_count: int = 1
    blur_strength: int = 1
    distractor_count: int = 1
    stationary_fraction: float = 0.25
    background_level: float = 0.45
    background_noise: float = 0.08
    background_smoothness: float = 2.0
    seed: int = 0

    def __post_init__(self) -> None:
        w, h = self.image_size
        if w < 1 or h < 1 or self.num_frames < 1:
            raise ValueError("image size and frame count must be positive")
        lo, hi = self.object_count_range
        if lo < 0 or hi < lo:
            raise ValueError("object_count_range must be a non-empty range of counts")
        if not 0.0 <= self.stationary_fraction <= 1.0:
            raise ValueError("stationary_fraction must lie in [0, 1]")
        if self.blur_strength < 1 or self.occluder_count < 0 or self.distractor_count < 0:
            raise ValueError("invalid blur / occluder / distractor parameters")
        if not self.classes:
            raise ValueError("at least one class required")
        for c in self.classes:
            if not (1 <= c.size_range[0] <= c.size_range[1]):
                raise ValueError(f"class {c.name}: empty size range")
            if not (0 <= c.speed_range[0] <= c.speed_range[1]):
                raise ValueError(f"class {c.name}: empty speed range")
            if max(self._extent(c, c.size_range[0])) > min(w, h):
                raise ValueError(f"class {c.name}: object too large for image")

    @staticmethod
    def _extent(c: ClassSpec, side: int) -> tuple[int, int]:
        if c.aspect >= 1:
            return max(1, round(side / c.aspect)), side
        return side, max(1, round(side * c.aspect))

    @property
    def class_names(self) -> list[str]:
        return [c.name for c in self.classes]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> SceneSpec:
        d = dict(d)
        if "classes" in d:
            d["classes"] = tuple(
                ClassSpec(
                    c["name"],
                    tuple(c["size_range"]),
                    tuple(c["speed_range"]),
                    float(c["aspect"]),
                    tuple(c["color"]),
                )
                for c in d["classes"]
            )
        for key in ("image_size", "object_count_range"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass(frozen=True)
class Annotation:
    box: LabeledBox
    object_id: int
    tags: frozenset[str] = frozenset()


@dataclass
class AnnotatedSequence:
    frames: list[Frame]
    annotations: list[list[Annotation]]
    distractors: list[list[Box]]
    spec: SceneSpec
    name: str = "scene"

    def ground_truths(self, t: int) -> list[LabeledBox]:
        return [a.box for a in self.annotations[t]]

    def channel_means(self) -> tuple[float, float, float]:
        stack = np.stack([f.pixels for f in self.frames])
        return tuple(float(m) for m in stack.reshape(-1, 3).astype(np.float64).mean(axis=0))


@dataclass
class _Object:
    class_id: int
    w: int
    h: int
    x0: int
    y0: int
    vx: int
    vy: int
    color: np.ndarray
    texture: np.ndarray

    def position(self, t: float) -> tuple[float, float]:
        return self.x0 + self.vx * t, self.y0 + self.vy * t


def quantize(pixels: np.ndarray) -> np.ndarray:
    """Round to 8-bit levels; the float32 result survives PNG storage exactly."""
    return _from_uint8(np.round(np.clip(pixels, 0.0, 1.0) * 255.0).astype(np.uint8))


def _from_uint8(a: np.ndarray) -> np.ndarray:
    return a.astype(np.float32) / np.float32(255.0)


def _texture(rng: np.random.Generator, h: int, w: int, amplitude: float, smooth: float) -> np.ndarray:
    noise = ndimage.gaussian_filter(rng.standard_normal((h, w)), smooth, mode="wrap")
    noise /= noise.std() + 1e-12
    return amplitude * noise


def _appearance(rng: np.random.Generator, c: ClassSpec, class_id: int, w: int, h: int):
    color = np.clip(np.array(c.color) + rng.uniform(-0.08, 0.08, 3), 0.0, 1.0)
    tex = np.repeat(_texture(rng, h, w, 0.05, 0.8)[..., None], 3, axis=2)
    # class-specific markings so appearance carries class information
    if class_id % 3 == 0:
        tex[:, : max(1, w // 4)] -= 0.35
    elif class_id % 3 == 2:
        band = slice(max(0, h // 4), max(1, h // 2))
        tex[band, 1::3] -= 0.45
    else:
        tex[: max(1, h // 3)] += 0.25
    return color, tex


def _place(rng, spec: SceneSpec, c: ClassSpec, class_id: int, stationary: bool) -> _Object:
    W, H = spec.image_size
    side = int(rng.integers(c.size_range[0], c.size_range[1] + 1))
    w, h = SceneSpec._extent(c, side)
    travel = spec.num_frames - 1
    if stationary:
        vx = vy = 0
    else:
        vx = int(rng.integers(max(1, c.speed_range[0]), max(1, c.speed_range[1]) + 1))
        vx *= 1 if rng.random() < 0.5 else -1
        vy = int(rng.integers(-1, 2)) if rng.random() < 0.3 else 0
        # slow down until the whole trajectory fits in the frame
        while vx != 0 and abs(vx) * travel > W - w:
            vx -= 1 if vx > 0 else -1
        while vy != 0 and abs(vy) * travel > H - h:
            vy -= 1 if vy > 0 else -1
        if vx == 0 and vy == 0:
            raise ValueError(f"class {c.name}: image too small for a moving object over {spec.num_frames} frames")
    lo_x, hi_x = max(0, -vx * travel), W - w - max(0, vx * travel)
    lo_y, hi_y = max(0, -vy * travel), H - h - max(0, vy * travel)
    x0 = int(rng.integers(lo_x, hi_x + 1))
    y0 = int(rng.integers(lo_y, hi_y + 1))
    color, tex = _appearance(rng, c, class_id, w, h)
    return _Object(class_id, w, h, x0, y0, vx, vy, color, tex)


def _paths_collide(a: _Object, b: _Object, num_frames: int, margin: int = 1) -> bool:
    for t in range(num_frames):
        ax, ay = a.position(t)
        bx, by = b.position(t)
        if (
            ax < bx + b.w + margin
            and bx < ax + a.w + margin
            and ay < by + b.h + margin
            and by < ay + a.h + margin
        ):
            return True
    return False


def _paint(canvas: np.ndarray, obj: _Object, x: float, y: float) -> None:
    xi, yi = int(round(x)), int(round(y))
    H, W = canvas.shape[:2]
    xa, ya = max(xi, 0), max(yi, 0)
    xb, yb = min(xi + obj.w, W), min(yi + obj.h, H)
    if xa >= xb or ya >= yb:
        return
    patch = obj.color[None, None, :] + obj.texture
    canvas[ya:yb, xa:xb] = patch[ya - yi : yb - yi, xa - xi : xb - xi]


def generate_scene(spec: SceneSpec, name: str = "scene") -> AnnotatedSequence:
    """Render ``spec.num_frames`` annotated frames.

    The annotated box of an object is its full extent at frame time even
    when an occluder covers part of it. Blur averages ``blur_strength``
    renders spread over the half frame interval preceding each frame.
    """
    rng = np.random.default_rng(spec.seed)
    W, H = spec.image_size
    background = np.clip(
        spec.background_level
        + _texture(rng, H, W, spec.background_noise, spec.background_smoothness)[..., None]
        + rng.uniform(-0.03, 0.03, 3)[None, None, :],
        0.0,
        1.0,
    )
    n_obj = int(rng.integers(spec.object_count_range[0], spec.object_count_range[1] + 1))
    n_static = int(round(spec.stationary_fraction * n_obj))
    stationary = np.zeros(n_obj, dtype=bool)
    stationary[rng.permutation(n_obj)[:n_static]] = True
    placed: list[_Object] = []

    def place(is_static: bool) -> _Object:
        cid = int(rng.integers(len(spec.classes)))
        for _ in range(PLACEMENT_TRIES):
            obj = _place(rng, spec, spec.classes[cid], cid, is_static)
            if not any(_paths_collide(obj, other, spec.num_frames) for other in placed):
                break
        placed.append(obj)
        return obj

    objects = [place(bool(stationary[i])) for i in range(n_obj)]
    distractors = [place(True) for _ in range(spec.distractor_count)]

    occluders = []
    for _ in range(spec.occluder_count):
        vertical = rng.random() < 0.5
        thick = 2
        length = int(rng.integers(H // 2, H + 1)) if vertical else int(rng.integers(W // 2, W + 1))
        if vertical:
            x, y = int(rng.integers(0, W - thick + 1)), int(rng.integers(0, H - length + 1))
            occluders.append((x, y, x + thick, y + length))
        else:
            x, y = int(rng.integers(0, W - length + 1)), int(rng.integers(0, H - thick + 1))
            occluders.append((x, y, x + length, y + thick))
    occ_shade = 0.2 + 0.1 * rng.random()

    static_layer = background.copy()
    for d in distractors:
        _paint(static_layer, d, d.x0, d.y0)

    S = spec.blur_strength
    offsets = [0.0] if S == 1 else [-0.5 * k / (S - 1) for k in range(S)]
    frames, annotations, distractor_boxes = [], [], []
    for t in range(spec.num_frames):
        acc = np.zeros_like(background)
        for off in offsets:
            canvas = static_layer.copy()
            for obj in objects:
                x, y = obj.position(t + off)
                _paint(canvas, obj, x, y)
            acc += canvas
        img = acc / len(offsets)
        for x1, y1, x2, y2 in occluders:
            img[y1:y2, x1:x2] = occ_shade
        frames.append(Frame(quantize(img), t))

        recs = []
        for oid, obj in enumerate(objects):
            x, y = obj.position(t)
            box = Box(float(x), float(y), float(x + obj.w), float(y + obj.h))
            tags = {"stationary" if obj.vx == 0 and obj.vy == 0 else "moving"}
            if max(obj.w, obj.h) < SMALL_SIDE:
                tags.add("small")
            if S > 1 and "moving" in tags:
                tags.add("blurred")
            if any(_overlap(box, o) for o in occluders):
                tags.add("occluded")
            recs.append(Annotation(LabeledBox(box, obj.class_id), oid, frozenset(tags)))
        annotations.append(recs)
        distractor_boxes.append(
            [Box(float(d.x0), float(d.y0), float(d.x0 + d.w), float(d.y0 + d.h)) for d in distractors]
        )
    return AnnotatedSequence(frames, annotations, distractor_boxes, spec, name)


def _overlap(box: Box, rect: tuple[int, int, int, int]) -> bool:
    return min(box.x2, rect[2]) > max(box.x1, rect[0]) and min(box.y2, rect[3]) > max(box.y1, rect[1])


def _box_list(b: Box) -> list[float]:
    return [b.x1, b.y1, b.x2, b.y2]


def save_dataset(seq: AnnotatedSequence, path: str | Path) -> Path:
    path = Path(path)
    (path / "frames").mkdir(parents=True, exist_ok=True)
    for f in seq.frames:
        img = np.round(f.pixels * 255.0).astype(np.uint8)
        Image.fromarray(img, mode="RGB").save(path / "frames" / f"{f.time_index:06d}.png")
    with open(path / "annotations.jsonl", "w") as fh:
        for t, (recs, dis) in enumerate(zip(seq.annotations, seq.distractors)):
            fh.write(
                json.dumps(
                    {
                        "frame": seq.frames[t].time_index,
                        "boxes": [_box_list(a.box.box) for a in recs],
                        "labels": [a.box.class_id for a in recs],
                        "object_ids": [a.object_id for a in recs],
                        "tags": [sorted(a.tags) for a in recs],
                        "distractors": [_box_list(b) for b in dis],
                    }
                )
                + "\n"
            )
    (path / "spec.json").write_text(json.dumps(seq.spec.to_dict(), indent=2))
    meta = {
        "format_version": FORMAT_VERSION,
        "name": seq.name,
        "num_frames": len(seq.frames),
        "image_size": list(seq.spec.image_size),
        "class_names": seq.spec.class_names,
        "channel_means": list(seq.channel_means()),
    }
    (path / "meta.json").write_text(json.dumps(meta, indent=2))
    return path


def _read_json(path: Path) -> dict:
    try:
        return json.loads(path.read_text())
    except FileNotFoundError as exc:
        raise DatasetFormatError(f"missing {path.name} in {path.parent}") from exc
    except json.JSONDecodeError as exc:
        raise DatasetFormatError(f"malformed {path}: {exc}") from exc


def load_dataset(path: str | Path) -> AnnotatedSequence:
    path = Path(path)
    meta = _read_json(path / "meta.json")
    if meta.get("format_version") != FORMAT_VERSION:
        raise DatasetFormatError(f"{path}: unsupported format version {meta.get('format_version')!r}")
    spec = SceneSpec.from_dict(_read_json(path / "spec.json"))
    try:
        lines = (path / "annotations.jsonl").read_text().splitlines()
        records = [json.loads(line) for line in lines if line.strip()]
    except (FileNotFoundError, json.JSONDecodeError) as exc:
        raise DatasetFormatError(f"{path}: bad annotations.jsonl: {exc}") from exc
    if len(records) != meta["num_frames"]:
        raise DatasetFormatError(f"{path}: {len(records)} annotation records, expected {meta['num_frames']}")

    frames, annotations, distractors = [], [], []
    for rec in records:
        t = int(rec["frame"])
        fp = path / "frames" / f"{t:06d}.png"
        try:
            with Image.open(fp) as im:
                arr = np.asarray(im.convert("RGB"))
        except (FileNotFoundError, OSError) as exc:
            raise DatasetFormatError(f"{fp}: unreadable frame: {exc}") from exc
        frames.append(Frame(_from_uint8(arr), t))
        try:
            annotations.append(
                [
                    Annotation(LabeledBox(Box.from_array(b), int(c)), int(o), frozenset(tg))
                    for b, c, o, tg in zip(
                        rec["boxes"], rec["labels"], rec["object_ids"], rec["tags"], strict=True
                    )
                ]
            )
            distractors.append([Box.from_array(b) for b in rec["distractors"]])
        except (KeyError, ValueError, TypeError) as exc:
            raise DatasetFormatError(f"{path}: malformed record for frame {t}: {exc}") from exc
    return AnnotatedSequence(frames, annotations, distractors, spec, meta.get("name", path.name))


@dataclass(frozen=True)
class DatasetSpec:
    """Recipe for a train/test collection of independently seeded scenes."""

    scene: SceneSpec = field(default_factory=SceneSpec)
    train_scenes: int = 40
    test_scenes: int = 10
    seed: int = 0

    def to_dict(self) -> dict:
        return {
            "scene": self.scene.to_dict(),
            "train_scenes": self.train_scenes,
            "test_scenes": self.test_scenes,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> DatasetSpec:
        return cls(
            scene=SceneSpec.from_dict(d.get("scene", {})),
            train_scenes=int(d.get("train_scenes", 40)),
            test_scenes=int(d.get("test_scenes", 10)),
            seed=int(d.get("seed", 0)),
        )


@dataclass
class Collection:
    train: list[AnnotatedSequence]
    test: list[AnnotatedSequence]
    class_names: list[str]
    channel_means: tuple[float, float, float]

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def class_counts(self, split: str = "train") -> list[int]:
        counts = [0] * self.num_classes
        for seq in getattr(self, split):
            for recs in seq.annotations:
                for a in recs:
                    counts[a.box.class_id] += 1
        return counts


def _scene_seed(seed: int, split: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, split, index]).generate_state(1)[0])


def _pooled_means(seqs: Sequence[AnnotatedSequence]) -> tuple[float, float, float]:
    total = np.zeros(3)
    n = 0
    for s in seqs:
        for f in s.frames:
            total += f.pixels.reshape(-1, 3).astype(np.float64).sum(axis=0)
            n += f.pixels.shape[0] * f.pixels.shape[1]
    return tuple(float(v) for v in total / max(n, 1))


def generate_collection(spec: DatasetSpec) -> Collection:
    def make(split_id: int, split: str, count: int) -> list[AnnotatedSequence]:
        return [
            generate_scene(replace(spec.scene, seed=_scene_seed(spec.seed, split_id, i)), f"{split}_{i:03d}")
            for i in range(count)
        ]

    train = make(0, "train", spec.train_scenes)
    test = make(1, "test", spec.test_scenes)
    return Collection(train, test, spec.scene.class_names, _pooled_means(train or test))


def save_collection(col: Collection, path: str | Path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    for seq in col.train + col.test:
        save_dataset(seq, path / seq.name)
    index = {
        "format_version": FORMAT_VERSION,
        "class_names": col.class_names,
        "channel_means": list(col.channel_means),
        "splits": {"train": [s.name for s in col.train], "test": [s.name for s in col.test]},
    }
    (path / "collection.json").write_text(json.dumps(index, indent=2))
    return path


def load_collection(path: str | Path) -> Collection:
    """Load a collection root, or wrap a single sequence directory as a
    collection whose train and test splits are that sequence."""
    path = Path(path)
    if not (path / "collection.json").exists():
        seq = load_dataset(path)
        return Collection([seq], [seq], seq.spec.class_names, seq.channel_means())
    index = _read_json(path / "collection.json")
    if index.get("format_version") != FORMAT_VERSION:
        raise DatasetFormatError(f"{path}: unsupported format version {index.get('format_version')!r}")
    splits = index["splits"]
    return Collection(
        [load_dataset(path / n) for n in splits["train"]],
        [load_dataset(path / n) for n in splits["test"]],
        list(index["class_names"]),
        tuple(index["channel_means"]),
    )
