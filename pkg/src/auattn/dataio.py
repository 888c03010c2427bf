"""Annotation files, image loading, dataset indexing, batching and synthetic data.

On-disk layout::

    <root>/annotations/<video>.txt       header of 12 AU names, one CSV row per frame
    <root>/images/<video>/00001.jpg      1-based, 5-digit frame numbers (.png accepted)
"""

from __future__ import annotations

import logging
import queue
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from .exceptions import AnnotationParseError, DatasetError, DimensionError
from .objective import AU_NAMES, INVALID

logger = logging.getLogger(__name__)

NUM_AUS = 12
MASK, DROP = "mask", "drop"
IMAGE_EXTS = (".jpg", ".png")


@dataclass
class AnnotationFile:
    video_id: str
    header: tuple
    labels: np.ndarray  # frames x 12, row k-1 is frame k

    @property
    def frames(self):
        return np.arange(1, len(self.labels) + 1)

    def row(self, frame):
        return self.labels[frame - 1]


def parse_annotations(path) -> AnnotationFile:
    path = Path(path)
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    while lines and not lines[-1].strip():
        lines.pop()
    if not lines:
        raise AnnotationParseError(path, 1, "missing header")
    header = tuple(tok.strip() for tok in lines[0].split(","))
    if len(header) != NUM_AUS:
        raise AnnotationParseError(path, 1, f"header has {len(header)} columns, expected {NUM_AUS}")
    rows = []
    for lineno, line in enumerate(lines[1:], start=2):
        toks = line.split(",")
        if len(toks) != NUM_AUS:
            raise AnnotationParseError(path, lineno, f"{len(toks)} columns, expected {NUM_AUS}")
        try:
            vals = [int(t.strip()) for t in toks]
        except ValueError:
            raise AnnotationParseError(path, lineno, f"non-integer token in {line!r}") from None
        if any(v not in (0, 1, INVALID) for v in vals):
            raise AnnotationParseError(path, lineno, f"value outside {{0, 1, -1}} in {line!r}")
        rows.append(vals)
    labels = np.array(rows, dtype=np.int8).reshape(-1, NUM_AUS)
    return AnnotationFile(path.stem, header, labels)


def write_annotations(path, labels, header: Sequence[str] = AU_NAMES):
    labels = np.asarray(labels)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        for row in labels:
            fh.write(",".join(str(int(v)) for v in row) + "\n")


def load_image(path, target_size=112, dtype=np.float32):
    """Decode to RGB, bilinearly resize to ``target_size`` if needed, scale to [0, 1]."""
    try:
        with Image.open(path) as img:
            img = img.convert("RGB")
            if img.size != (target_size, target_size):
                img = img.resize((target_size, target_size), Image.BILINEAR)
            arr = np.asarray(img, dtype=np.uint8)
    except (OSError, ValueError) as exc:
        raise OSError(f"cannot decode image {path}: {exc}") from exc
    return arr.astype(dtype) / dtype(255)


def frame_path(image_dir, video, frame):
    """Existing image for a frame (.jpg preferred, then .png), or None."""
    base = Path(image_dir) / video / f"{frame:05d}"
    for ext in IMAGE_EXTS:
        p = base.with_suffix(ext)
        if p.exists():
            return p
    return None


@dataclass
class DatasetIndex:
    """Annotated frames paired with image files.

    Also works as the in-memory dataset protocol used by the trainer:
    ``len()``, ``labels`` and ``load_batch(indices)``.
    """

    paths: list
    labels: np.ndarray
    policy: str = MASK
    names: tuple = AU_NAMES
    image_size: int = 112
    positives: np.ndarray = field(default=None)
    total: int = field(default=None)
    cache: bool = False
    _images: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int8).reshape(-1, NUM_AUS)
        counted_pos, counted_total = self.counts()
        if self.positives is None:
            self.positives = counted_pos
        if self.total is None:
            self.total = counted_total

    def __len__(self):
        return len(self.paths)

    def counts(self):
        return (self.labels == 1).sum(axis=0).astype(np.int64), len(self.labels)

    def consistent(self):
        pos, total = self.counts()
        return bool(np.array_equal(pos, self.positives) and total == self.total)

    def subset(self, indices):
        indices = np.asarray(indices, dtype=np.int64)
        return DatasetIndex([self.paths[i] for i in indices], self.labels[indices],
                            self.policy, self.names, self.image_size, cache=self.cache)

    def load_batch(self, indices):
        out = np.empty((len(indices), self.image_size, self.image_size, 3), dtype=np.float32)
        for k, i in enumerate(indices):
            i = int(i)
            img = self._images.get(i)
            if img is None:
                img = load_image(self.paths[i], self.image_size)
                if self.cache:
                    self._images[i] = img
            out[k] = img
        return out


@dataclass
class ArrayDataset:
    """Images and labels already held in memory."""

    images: np.ndarray
    labels: np.ndarray
    names: tuple = AU_NAMES

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int8)
        if len(self.images) != len(self.labels):
            raise DimensionError("images and labels differ in length")

    def __len__(self):
        return len(self.labels)

    def load_batch(self, indices):
        return np.asarray(self.images[np.asarray(indices, dtype=np.int64)], dtype=np.float32)


def build_index(annotation_dir, image_dir, policy=MASK, image_size=112, cache=False) -> DatasetIndex:
    """Pair annotated frames with images under the chosen invalid-label policy.

    ``mask`` keeps frames with some -1 entries (the loss ignores those
    entries), ``drop`` removes them.  Frames that are entirely -1 are always
    removed.  Rows without a matching image are logged and skipped.
    """
    if policy not in (MASK, DROP):
        raise ValueError(f"policy must be 'mask' or 'drop', got {policy!r}")
    files = sorted(Path(annotation_dir).glob("*.txt"))
    paths, labels, names = [], [], None
    for f in files:
        ann = parse_annotations(f)
        names = names or ann.header
        for frame, row in zip(ann.frames, ann.labels):
            invalid = row == INVALID
            if invalid.all() or (policy == DROP and invalid.any()):
                continue
            p = frame_path(image_dir, ann.video_id, int(frame))
            if p is None:
                logger.warning("no image for %s frame %d; skipping", ann.video_id, frame)
                continue
            paths.append(p)
            labels.append(row)
    if not paths:
        raise DatasetError(f"no usable frames found under {annotation_dir}")
    return DatasetIndex(paths, np.array(labels), policy, tuple(names), image_size, cache=cache)


def load_dataset(root, policy=MASK, image_size=112, cache=False):
    root = Path(root)
    return build_index(root / "annotations", root / "images", policy, image_size, cache)


def batch_order(n, seed, epoch):
    return np.random.default_rng([int(seed), int(epoch)]).permutation(n)


def batch_iter(dataset, batch_size, seed, epoch, prefetch=2, shuffle=True):
    """Yield ``(images, labels, indices)`` in a shuffle keyed on ``(seed, epoch)``.

    Images for upcoming batches are decoded in a background thread through a
    bounded queue; emission order is fixed by the shuffle alone.  The final
    batch may be short.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    n = len(dataset)
    order = batch_order(n, seed, epoch) if shuffle else np.arange(n)
    chunks = [order[s:s + batch_size] for s in range(0, n, batch_size)]
    if prefetch <= 0:
        for idx in chunks:
            yield dataset.load_batch(idx), np.asarray(dataset.labels[idx]), idx
        return

    q: queue.Queue = queue.Queue(maxsize=prefetch)
    stop = threading.Event()
    done = object()

    def produce():
        try:
            for idx in chunks:
                item = (dataset.load_batch(idx), np.asarray(dataset.labels[idx]), idx)
                while not stop.is_set():
                    try:
                        q.put(item, timeout=0.1)
                        break
                    except queue.Full:
                        continue
                if stop.is_set():
                    return
            q.put(done)
        except BaseException as exc:  # surfaced in the consumer
            q.put(exc)

    worker = threading.Thread(target=produce, daemon=True)
    worker.start()
    try:
        while True:
            item = q.get()
            if item is done:
                break
            if isinstance(item, BaseException):
                raise item
            yield item
    finally:
        stop.set()
        worker.join()


# ------------------------------------------------------------------ synthetic


@dataclass
class SyntheticSpec:
    n: int = 1000
    seed: int = 0
    image_size: int = 112
    prevalence: tuple = tuple(np.round(np.linspace(0.05, 0.5, NUM_AUS), 6))
    noise: float = 0.1

    def validate(self):
        if self.image_size < 32:
            raise ValueError("synthetic image size must be >= 32")
        if len(self.prevalence) != NUM_AUS:
            raise ValueError(f"need {NUM_AUS} prevalence values")
        if not all(0 < p < 1 for p in self.prevalence):
            raise ValueError("prevalences must lie strictly between 0 and 1")
        if self.n < 1 or self.noise < 0:
            raise ValueError("n must be >= 1 and noise >= 0")
        return self


BACKGROUND = 0.5
FOREGROUND = 1.0


def pattern_boxes(size):
    """``(top, left, height, width)`` of the 12 disjoint AU marks.

    The image is cut into a 3 x 4 grid; AU ``i`` owns cell ``i`` and draws a
    horizontal bar there for even ``i`` and a vertical bar for odd ``i``.
    """
    boxes = []
    rows, cols = 3, 4
    ch, cw = size // rows, size // cols
    long_h, long_w = max(2, (ch * 2) // 3), max(2, (cw * 2) // 3)
    short = max(2, min(ch, cw) // 4)
    for i in range(NUM_AUS):
        r, c = divmod(i, cols)
        h, w = (short, long_w) if i % 2 == 0 else (long_h, short)
        top = r * ch + (ch - h) // 2
        left = c * cw + (cw - w) // 2
        boxes.append((top, left, h, w))
    return boxes


def render_sample(labels, size, noise, rng):
    img = np.full((size, size), BACKGROUND)
    if noise > 0:
        img += rng.normal(0.0, noise, size=(size, size))
    for i, (top, left, h, w) in enumerate(pattern_boxes(size)):
        if labels[i] == 1:
            img[top:top + h, left:left + w] = FOREGROUND
    img = np.clip(img, 0.0, 1.0)
    gray = np.rint(img * 255).astype(np.uint8)
    return np.repeat(gray[:, :, None], 3, axis=2)


def draw_labels(spec: SyntheticSpec, rng=None):
    """Independent Bernoulli(p_i) labels, ``spec.n x 12``."""
    rng = np.random.default_rng(spec.seed) if rng is None else rng
    return (rng.random((spec.n, NUM_AUS)) < np.asarray(spec.prevalence)).astype(np.int8)


def generate_synthetic(spec: SyntheticSpec, out_dir, video="synth") -> AnnotationFile:
    """Write a labelled pattern dataset in the standard layout; fully seed-determined."""
    spec.validate()
    out = Path(out_dir)
    img_dir = out / "images" / video
    ann_dir = out / "annotations"
    img_dir.mkdir(parents=True, exist_ok=True)
    ann_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.seed)
    labels = draw_labels(spec, rng)
    for k in range(spec.n):
        pixels = render_sample(labels[k], spec.image_size, spec.noise, rng)
        Image.fromarray(pixels).save(img_dir / f"{k + 1:05d}.png", optimize=False)
    write_annotations(ann_dir / f"{video}.txt", labels)
    return AnnotationFile(video, AU_NAMES, labels)
