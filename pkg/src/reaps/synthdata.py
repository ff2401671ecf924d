"""Synthetic fine-grained dataset with ground-truth object boxes.

Every object is a coloured bar carrying a left-to-right row of part glyphs.
The bar colour marks a coarse group of classes. Within a group, classes
share one base layout and differ only in a few attributes (tone, shape,
size) of one or two parts, so telling them apart needs part-level detail. Objects sit at a random position and scale over a
cluttered background, and a part is occasionally occluded.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .imageio import ImageFormatError, read_ppm, to_uint8, write_ppm
from .ran import BBox
from .tensor_core import Tensor, bilinear_resize

SHAPES = ("square", "circle", "triangle", "diamond")
TONES = ("dark", "light")
SIZES = ("small", "large")
ATTRIBUTES = {"tone": TONES, "shape": SHAPES, "size": SIZES}
TONE_VALUES = {"dark": 0.08, "light": 0.97}

# saturated colours for objects, washed-out ones for clutter: the two never overlap
OBJECT_PALETTE = np.array(
    [[0.85, 0.15, 0.15], [0.15, 0.55, 0.9], [0.95, 0.75, 0.1], [0.2, 0.75, 0.3], [0.75, 0.25, 0.8], [0.95, 0.5, 0.1]]
)
CLUTTER_PALETTE = np.array([[0.5, 0.47, 0.44], [0.42, 0.45, 0.47], [0.47, 0.5, 0.45], [0.52, 0.5, 0.52]])


@dataclass
class SynthSpec:
    num_classes: int = 10
    train_per_class: int = 100
    test_per_class: int = 50
    image_size: int = 64
    min_parts: int = 3
    max_parts: int = 5
    subtlety: int = 2  # attribute changes separating a class from the base layout
    clutter: int = 6  # background glyphs per image
    body_colours: int = 3  # class k is painted in colour k % body_colours; 0 draws a random colour
    occlusion: float = 0.1
    orientation: str = "horizontal"
    seed: int = 0

    def validate(self) -> None:
        if self.num_classes < 2:
            raise ValueError(f"need at least 2 classes, got {self.num_classes}")
        if self.image_size < 32:
            raise ValueError(f"image_size must be >= 32, got {self.image_size}")
        if not 1 <= self.min_parts <= self.max_parts:
            raise ValueError(f"bad part range {self.min_parts}..{self.max_parts}")
        if not 1 <= self.subtlety <= self.min_parts:
            raise ValueError(f"subtlety must be in [1, min_parts], got {self.subtlety}")
        if not 0.0 <= self.occlusion <= 1.0:
            raise ValueError(f"occlusion probability must be in [0, 1], got {self.occlusion}")
        if self.orientation not in ("horizontal", "vertical"):
            raise ValueError(f"orientation must be horizontal or vertical, got {self.orientation!r}")
        if _object_extent(self.max_parts, 1.0)[0] > self.image_size - 2:
            raise ValueError(f"{self.max_parts} parts do not fit a {self.image_size}px image")
        if not 0 <= self.body_colours <= len(OBJECT_PALETTE):
            raise ValueError(f"body_colours must be in [0, {len(OBJECT_PALETTE)}], got {self.body_colours}")
        if self.train_per_class < 0 or self.test_per_class < 0:
            raise ValueError("sample counts must be non-negative")


@dataclass
class SynthSample:
    image: np.ndarray  # [3,H,W] in [0,1]
    label: int
    object_box: BBox | None
    part_centers: list = field(default_factory=list)
    parts: list = field(default_factory=list)  # per drawn part: slot + attributes


@dataclass
class Dataset:
    images: np.ndarray  # [N,3,H,W] float32
    labels: np.ndarray  # [N] int64
    boxes: np.ndarray | None = None  # [N,4] x0,y0,x1,y1
    class_names: list = field(default_factory=list)
    part_centers: list | None = None
    parts: list | None = None

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def __getitem__(self, i: int) -> SynthSample:
        box = BBox(*(int(v) for v in self.boxes[i])) if self.boxes is not None else None
        return SynthSample(
            image=self.images[i],
            label=int(self.labels[i]),
            object_box=box,
            part_centers=self.part_centers[i] if self.part_centers else [],
            parts=self.parts[i] if self.parts else [],
        )

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)

        def pick(seq):
            return None if seq is None else [seq[i] for i in idx]

        return Dataset(
            images=self.images[idx],
            labels=self.labels[idx],
            boxes=None if self.boxes is None else self.boxes[idx],
            class_names=list(self.class_names),
            part_centers=pick(self.part_centers),
            parts=pick(self.parts),
        )


def class_templates(spec: SynthSpec) -> list[list[dict]]:
    """Per-class attribute tables, one dict per part slot.

    Class ``k`` copies a shared base layout and changes ``spec.subtlety``
    attributes on the first ``min_parts`` slots (the ones every object has).
    """
    rng = np.random.default_rng([spec.seed, 7919])
    base = [{name: str(rng.choice(vals)) for name, vals in ATTRIBUTES.items()} for _ in range(spec.max_parts)]
    seen, templates = set(), []
    options = [(slot, name) for slot in range(spec.min_parts) for name in ATTRIBUTES]
    attempts = 0
    while len(templates) < spec.num_classes:
        attempts += 1
        if attempts > 10000:
            raise ValueError(f"cannot build {spec.num_classes} distinct classes with subtlety={spec.subtlety}")
        tmpl = [dict(p) for p in base]
        for k in rng.choice(len(options), size=spec.subtlety, replace=False):
            slot, name = options[k]
            alternatives = [v for v in ATTRIBUTES[name] if v != base[slot][name]]
            tmpl[slot][name] = str(rng.choice(alternatives))
        key = tuple(tuple(sorted(p.items())) for p in tmpl[: spec.min_parts])
        if key in seen:
            continue
        seen.add(key)
        templates.append(tmpl)
    return templates


PITCH = 10.0  # px between part centres at scale 1
BODY_HEIGHT = 24.0
MARGIN = 3.0


def _object_extent(n_parts: int, scale: float) -> tuple[float, float]:
    return (n_parts * PITCH + 2 * MARGIN) * scale, BODY_HEIGHT * scale


def _glyph_mask(shape: str, cx: float, cy: float, r: float, yy, xx) -> np.ndarray:
    dx, dy = xx - cx, yy - cy
    if shape == "square":
        return (np.abs(dx) <= r * 0.85) & (np.abs(dy) <= r * 0.85)
    if shape == "circle":
        return dx * dx + dy * dy <= r * r
    if shape == "triangle":
        return (dy >= -r) & (dy <= r) & (np.abs(dx) <= (dy + r) * 0.5)
    if shape == "diamond":
        return np.abs(dx) + np.abs(dy) <= r
    raise ValueError(f"unknown glyph shape {shape!r}")


def render_sample(spec: SynthSpec, label: int, templates, rng: np.random.Generator) -> SynthSample:
    size = spec.image_size
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5

    # background: tinted gray, pixel noise, low-contrast clutter glyphs
    base = 0.45 + rng.uniform(-0.05, 0.05) + rng.uniform(-0.02, 0.02, 3)
    img = np.broadcast_to(base, (size, size, 3)) + rng.normal(0.0, 0.025, (size, size, 3))
    for _ in range(spec.clutter):
        col = CLUTTER_PALETTE[rng.integers(len(CLUTTER_PALETTE))] + rng.uniform(-0.04, 0.04)
        m = _glyph_mask(
            SHAPES[rng.integers(len(SHAPES))],
            rng.uniform(0, size),
            rng.uniform(0, size),
            rng.uniform(2.5, 6.0),
            yy,
            xx,
        )
        img = np.where(m[..., None], col, img)

    n_parts = int(rng.integers(spec.min_parts, spec.max_parts + 1))
    max_scale = min(1.1, (size - 2) / _object_extent(n_parts, 1.0)[0])
    scale = rng.uniform(min(0.85, max_scale), max_scale)
    length, thick = _object_extent(n_parts, scale)
    x0 = rng.uniform(1.0, size - 1.0 - length)
    y0 = rng.uniform(1.0, size - 1.0 - thick)

    if spec.body_colours:
        body_col = OBJECT_PALETTE[label % spec.body_colours] + rng.uniform(-0.06, 0.06, 3)
    else:
        body_col = OBJECT_PALETTE[rng.integers(len(OBJECT_PALETTE))]
    body = (xx >= x0) & (xx <= x0 + length) & (yy >= y0) & (yy <= y0 + thick)
    obj = body.copy()
    img = np.where(body[..., None], body_col, img)

    occluded = int(rng.integers(n_parts)) if rng.random() < spec.occlusion else -1
    template = templates[label]
    centers, parts = [], []
    cy = y0 + thick / 2
    for slot in range(n_parts):
        attrs = template[slot]
        cx = x0 + (MARGIN + PITCH * (slot + 0.5)) * scale
        r = scale * (3.8 if attrs["size"] == "small" else 4.9)
        if slot == occluded:
            continue
        m = _glyph_mask(attrs["shape"], cx, cy, r, yy, xx)
        img = np.where(m[..., None], TONE_VALUES[attrs["tone"]], img)
        obj |= m
        centers.append((cx, cy))
        parts.append({"slot": slot, **attrs})

    img = np.clip(img, 0.0, 1.0)
    rows, cols = np.nonzero(obj)
    box = BBox(int(cols.min()), int(rows.min()), int(cols.max()) + 1, int(rows.max()) + 1)
    if spec.orientation == "vertical":
        img = img.transpose(1, 0, 2)
        box = BBox(box.y0, box.x0, box.y1, box.x1)
        centers = [(y, x) for x, y in centers]
    return SynthSample(
        image=np.ascontiguousarray(img.transpose(2, 0, 1), dtype=np.float32),
        label=label,
        object_box=box,
        part_centers=centers,
        parts=parts,
    )


def _generate_split(spec: SynthSpec, templates, per_class: int, split: int) -> Dataset:
    n = per_class * spec.num_classes
    size = spec.image_size
    images = np.empty((n, 3, size, size), dtype=np.float32)
    labels = np.empty(n, dtype=np.int64)
    boxes = np.empty((n, 4), dtype=np.int64)
    centers, parts = [], []
    for i in range(n):
        label = i % spec.num_classes
        # each sample seeds its own stream, so generation order does not matter
        rng = np.random.default_rng([spec.seed, split, i])
        s = render_sample(spec, label, templates, rng)
        images[i], labels[i], boxes[i] = s.image, label, s.object_box.as_tuple()
        centers.append(s.part_centers)
        parts.append(s.parts)
    return Dataset(images, labels, boxes, [f"class_{k:03d}" for k in range(spec.num_classes)], centers, parts)


def generate_dataset(spec: SynthSpec) -> tuple[Dataset, Dataset]:
    """Deterministic ``(train, test)`` splits for ``spec``."""
    spec.validate()
    templates = class_templates(spec)
    return (
        _generate_split(spec, templates, spec.train_per_class, 0),
        _generate_split(spec, templates, spec.test_per_class, 1),
    )


def iterate_batches(n: int, batch_size: int, seed: int, epoch: int) -> list[np.ndarray]:
    """Index batches for one epoch; the order depends only on ``(seed, epoch)``.

    The final short batch is kept.
    """
    if batch_size < 1:
        raise ValueError(f"batch_size must be positive, got {batch_size}")
    perm = np.random.default_rng([seed, epoch, 104729]).permutation(n)
    return [perm[i : i + batch_size] for i in range(0, n, batch_size)]


def export_dataset(dataset: Dataset, root) -> Path:
    """Write ``root/<class>/<index>.ppm`` plus ``manifest.tsv`` with the boxes."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    lines = ["filename\tlabel\tx0\ty0\tx1\ty1"]
    for i in range(len(dataset)):
        cls = dataset.class_names[dataset.labels[i]]
        (root / cls).mkdir(exist_ok=True)
        rel = f"{cls}/{i:05d}.ppm"
        write_ppm(root / rel, to_uint8(dataset.images[i]))
        box = dataset.boxes[i] if dataset.boxes is not None else (-1, -1, -1, -1)
        lines.append("\t".join([rel, str(int(dataset.labels[i])), *(str(int(v)) for v in box)]))
    (root / "manifest.tsv").write_text("\n".join(lines) + "\n")
    return root


def load_directory_dataset(path, image_size: int = 64) -> Dataset:
    """Load ``path/<class_name>/*.ppm``; labels follow sorted class names.

    Images are resized to ``image_size`` square. Boxes are read from
    ``manifest.tsv`` when one sits at the root.
    """
    root = Path(path)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset directory not found: {root}")
    classes = sorted(d.name for d in root.iterdir() if d.is_dir())
    if not classes:
        raise ValueError(f"{root}: no class subdirectories")
    manifest = _read_manifest(root / "manifest.tsv")
    images, labels, boxes, has_boxes = [], [], [], True
    for label, cls in enumerate(classes):
        files = sorted(f for f in (root / cls).iterdir() if f.is_file() and f.suffix.lower() == ".ppm")
        if not files:
            raise ValueError(f"{root / cls}: class directory holds no .ppm images")
        for f in files:
            try:
                rgb = read_ppm(f)
            except (OSError, ImageFormatError) as exc:
                raise ValueError(f"unreadable image {f}: {exc}") from exc
            h, w = rgb.shape[:2]
            img = rgb.transpose(2, 0, 1).astype(np.float32) / np.float32(255.0)
            if (h, w) != (image_size, image_size):
                img = bilinear_resize(Tensor(img), image_size, image_size).data
            images.append(img)
            labels.append(label)
            rel = f"{cls}/{f.name}"
            if rel in manifest and (h, w) == (image_size, image_size):
                boxes.append(manifest[rel])
            else:
                has_boxes = False
    return Dataset(
        images=np.stack(images),
        labels=np.asarray(labels, dtype=np.int64),
        boxes=np.asarray(boxes, dtype=np.int64) if has_boxes and boxes else None,
        class_names=classes,
    )


def _read_manifest(path: Path) -> dict:
    if not path.exists():
        return {}
    out = {}
    for line in path.read_text().splitlines()[1:]:
        if not line.strip():
            continue
        cols = line.split("\t")
        box = tuple(int(v) for v in cols[2:6])
        if box[0] >= 0:
            out[cols[0]] = box
    return out


def linear_probe_accuracy(train: Dataset, test: Dataset, epochs: int = 200, lr: float = 0.5, seed: int = 0) -> float:
    """Test accuracy of softmax regression on raw pixels (a difficulty baseline)."""
    rng = np.random.default_rng(seed)
    xtr = train.images.reshape(len(train), -1).astype(np.float64)
    xte = test.images.reshape(len(test), -1).astype(np.float64)
    mu, sd = xtr.mean(0), xtr.std(0) + 1e-6
    xtr, xte = (xtr - mu) / sd, (xte - mu) / sd
    k = int(max(train.labels.max(), test.labels.max())) + 1
    w = rng.normal(0, 1e-3, (xtr.shape[1], k))
    b = np.zeros(k)
    onehot = np.eye(k)[train.labels]
    for _ in range(epochs):
        z = xtr @ w + b
        z -= z.max(1, keepdims=True)
        p = np.exp(z)
        p /= p.sum(1, keepdims=True)
        g = (p - onehot) / len(xtr)
        w -= lr * (xtr.T @ g + 1e-3 * w)
        b -= lr * g.sum(0)
    return float(((xte @ w + b).argmax(1) == test.labels).mean())


def dataset_summary(ds: Dataset) -> str:
    counts = np.bincount(ds.labels, minlength=ds.num_classes)
    return f"{len(ds)} images, {ds.num_classes} classes, per-class {counts.min()}..{counts.max()}"


__all__ = [
    "Dataset",
    "SynthSample",
    "SynthSpec",
    "class_templates",
    "dataset_summary",
    "export_dataset",
    "generate_dataset",
    "iterate_batches",
    "linear_probe_accuracy",
    "load_directory_dataset",
    "render_sample",
]
