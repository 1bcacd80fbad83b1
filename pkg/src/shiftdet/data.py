"""Procedural source/target domain-pair dataset: generation, storage, batching.

Scenes are 64x64 RGB images containing 1-5 filled shapes (disc, square,
triangle = classes 1..3) over a plain background.  A domain is a rendering
style: palette, fill texture, outline thickness, background clutter density
and pixel noise.  A domain pair renders the same kind of scenes under two
styles, which is the controllable stand-in for a train/test distribution gap.

On disk: ``<root>/<split>/images/*.png`` plus ``<root>/<split>/annotations.jsonl``
and a top-level ``manifest.json``.  Generation is deterministic per
(seed, split, index), so a dataset is reproducible byte for byte.

Trainer-facing target records structurally carry no labels (see
:class:`UnlabeledExample`); only evaluation code loads target annotations.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

IMAGE_SIZE = 64
CLASS_NAMES = {1: "disc", 2: "square", 3: "triangle"}
DATASET_FORMAT_VERSION = 1

# palette: background, per-class fill colors, outline color (RGB in [0, 1])
PALETTES: dict[str, dict] = {
    "studio": {
        "background": (0.86, 0.87, 0.90),
        "classes": {1: (0.80, 0.20, 0.22), 2: (0.16, 0.60, 0.27), 3: (0.20, 0.32, 0.80)},
        "outline": (0.10, 0.10, 0.12),
    },
    "field": {
        "background": (0.34, 0.30, 0.38),
        "classes": {1: (0.88, 0.56, 0.14), 2: (0.13, 0.62, 0.62), 3: (0.62, 0.26, 0.66)},
        "outline": (0.92, 0.92, 0.86),
    },
    "dusk": {
        "background": (0.55, 0.52, 0.60),
        "classes": {1: (0.85, 0.35, 0.25), 2: (0.20, 0.55, 0.45), 3: (0.40, 0.30, 0.75)},
        "outline": (0.15, 0.12, 0.18),
    },
}


@dataclass
class DomainStyle:
    """Rendering knobs for one domain."""

    palette: str = "studio"
    texture: str = "flat"        # "flat" | "hatched"
    outline: int = 1             # outline thickness in pixels, 0 disables
    clutter: float = 0.0         # expected distractor marks per image
    noise: float = 0.02          # gaussian pixel noise sigma

    def __post_init__(self):
        if self.palette not in PALETTES:
            raise ValueError(f"unknown palette {self.palette!r}; choices: {sorted(PALETTES)}")
        if self.texture not in ("flat", "hatched"):
            raise ValueError(f"unknown texture {self.texture!r}")


@dataclass
class DomainShiftConfig:
    """Paired styles; adaptation runs require an actual difference."""

    source: DomainStyle = field(default_factory=DomainStyle)
    target: DomainStyle = field(default_factory=lambda: DomainStyle(
        palette="field", texture="hatched", outline=2, clutter=6.0, noise=0.05))

    def is_shifted(self) -> bool:
        return asdict(self.source) != asdict(self.target)


@dataclass
class SplitCounts:
    source_train: int = 500
    source_test: int = 150
    target_train: int = 300
    target_test: int = 200

    def __post_init__(self):
        for name, v in asdict(self).items():
            if v < 1:
                raise ValueError(f"split count {name} must be >= 1")


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------

MIN_OBJ_SIDE = 12.0
MAX_OBJ_SIDE = 30.0
MAX_OBJ_IOU = 0.2


def _erode(mask: np.ndarray, steps: int) -> np.ndarray:
    """4-neighborhood binary erosion, ``steps`` iterations."""
    out = mask.copy()
    for _ in range(steps):
        shrunk = out.copy()
        shrunk[1:, :] &= out[:-1, :]
        shrunk[:-1, :] &= out[1:, :]
        shrunk[:, 1:] &= out[:, :-1]
        shrunk[:, :-1] &= out[:, 1:]
        out = shrunk
    return out


def _shape_mask(class_id: int, box_px: np.ndarray) -> np.ndarray:
    x0, y0, x1, y1 = box_px
    yy, xx = np.mgrid[0:IMAGE_SIZE, 0:IMAGE_SIZE].astype(np.float64) + 0.5
    if class_id == 1:  # disc
        cx, cy = (x0 + x1) / 2, (y0 + y1) / 2
        rx, ry = (x1 - x0) / 2, (y1 - y0) / 2
        return ((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2 <= 1.0
    if class_id == 2:  # square
        return (xx >= x0) & (xx <= x1) & (yy >= y0) & (yy <= y1)
    if class_id == 3:  # triangle, apex top-center
        cx = (x0 + x1) / 2
        h = max(y1 - y0, 1e-9)
        half = (yy - y0) / h * (x1 - x0) / 2
        return (yy >= y0) & (yy <= y1) & (np.abs(xx - cx) <= half)
    raise ValueError(f"unknown class id {class_id}")


def _paint(img: np.ndarray, mask: np.ndarray, color) -> None:
    img[mask] = np.asarray(color, dtype=np.float64)


def _draw_clutter(img: np.ndarray, style: DomainStyle, rng: np.random.Generator) -> None:
    pal = PALETTES[style.palette]
    n = int(rng.poisson(style.clutter))
    for _ in range(n):
        kind = rng.choice(["dash", "dot", "ring"])
        if rng.random() < 0.6:
            color = pal["classes"][int(rng.integers(1, 4))]
        else:
            color = pal["outline"]
        cx, cy = rng.uniform(3, IMAGE_SIZE - 3, size=2)
        mask = np.zeros((IMAGE_SIZE, IMAGE_SIZE), dtype=bool)
        yy, xx = np.mgrid[0:IMAGE_SIZE, 0:IMAGE_SIZE].astype(np.float64) + 0.5
        if kind == "dash":
            ang = rng.choice([0.0, np.pi / 4, np.pi / 2, 3 * np.pi / 4])
            length = rng.uniform(4, 10)
            t = np.linspace(-length / 2, length / 2, 24)
            px = cx + t * np.cos(ang)
            py = cy + t * np.sin(ang)
            width = rng.uniform(0.6, 1.2)
            for x, y in zip(px, py):
                mask |= (np.abs(xx - x) <= width) & (np.abs(yy - y) <= width)
        elif kind == "dot":
            r = rng.uniform(1.0, 2.2)
            mask = (xx - cx) ** 2 + (yy - cy) ** 2 <= r * r
        else:  # ring
            r = rng.uniform(2.0, 4.0)
            d2 = (xx - cx) ** 2 + (yy - cy) ** 2
            mask = (d2 <= (r + 0.7) ** 2) & (d2 >= (r - 0.7) ** 2)
        _paint(img, mask, color)


def _sample_objects(rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Random (boxes_px, classes) with limited pairwise overlap."""
    from .boxes import iou_matrix

    n = int(rng.integers(1, 6))
    boxes, classes = [], []
    for _ in range(n):
        for _attempt in range(30):
            w = rng.uniform(MIN_OBJ_SIDE, MAX_OBJ_SIDE)
            h = float(np.clip(w * rng.uniform(0.8, 1.25), MIN_OBJ_SIDE, MAX_OBJ_SIDE))
            x0 = rng.uniform(1.0, IMAGE_SIZE - 1.0 - w)
            y0 = rng.uniform(1.0, IMAGE_SIZE - 1.0 - h)
            cand = np.array([x0, y0, x0 + w, y0 + h])
            if boxes and np.max(iou_matrix(cand[None] / IMAGE_SIZE,
                                           np.asarray(boxes) / IMAGE_SIZE)) > MAX_OBJ_IOU:
                continue
            boxes.append(cand)
            classes.append(int(rng.integers(1, 4)))
            break
    return np.asarray(boxes, dtype=np.float64), np.asarray(classes, dtype=np.int64)


def render_scene(style: DomainStyle, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Render one scene; returns (image float32 HWC in [0,1], boxes norm, classes)."""
    pal = PALETTES[style.palette]
    img = np.empty((IMAGE_SIZE, IMAGE_SIZE, 3), dtype=np.float64)
    img[:] = np.asarray(pal["background"])
    if style.clutter > 0:
        _draw_clutter(img, style, rng)

    boxes_px, classes = _sample_objects(rng)
    for box, cls in zip(boxes_px, classes):
        mask = _shape_mask(int(cls), box)
        fill = np.asarray(pal["classes"][int(cls)]) + rng.normal(0.0, 0.03, size=3)
        fill = np.clip(fill, 0.0, 1.0)
        if style.texture == "hatched":
            yy, xx = np.mgrid[0:IMAGE_SIZE, 0:IMAGE_SIZE]
            stripes = ((xx + yy) // 3) % 2 == 0
            _paint(img, mask & stripes, fill)
            _paint(img, mask & ~stripes, np.clip(fill * 0.55, 0.0, 1.0))
        else:
            _paint(img, mask, fill)
        if style.outline > 0:
            border = mask & ~_erode(mask, style.outline)
            _paint(img, border, pal["outline"])

    if style.noise > 0:
        img = img + rng.normal(0.0, style.noise, size=img.shape)
    img = np.clip(img, 0.0, 1.0)
    return img.astype(np.float32), boxes_px / IMAGE_SIZE, classes


# ---------------------------------------------------------------------------
# on-disk datasets
# ---------------------------------------------------------------------------

_SPLIT_STYLE = {"source_train": "source", "source_test": "source",
                "target_train": "target", "target_test": "target"}


def generate_domain_pair(root: str | Path, seed: int, counts: SplitCounts,
                         shift: DomainShiftConfig) -> Path:
    """Write all four splits under ``root``; deterministic per (seed, index)."""
    root = Path(root)
    for split_idx, (split, domain) in enumerate(sorted(_SPLIT_STYLE.items())):
        style = getattr(shift, domain)
        img_dir = root / split / "images"
        img_dir.mkdir(parents=True, exist_ok=True)
        records = []
        for i in range(getattr(counts, split)):
            rng = np.random.default_rng(np.random.SeedSequence([seed, split_idx, i]))
            img, boxes, classes = render_scene(style, rng)
            fname = f"{i:06d}.png"
            Image.fromarray((img * 255.0 + 0.5).astype(np.uint8)).save(img_dir / fname)
            records.append({
                "file": f"images/{fname}",
                "width": IMAGE_SIZE,
                "height": IMAGE_SIZE,
                "objects": [
                    {"class_id": int(c),
                     "x_min": float(b[0]), "y_min": float(b[1]),
                     "x_max": float(b[2]), "y_max": float(b[3])}
                    for b, c in zip(boxes, classes)
                ],
            })
        with open(root / split / "annotations.jsonl", "w") as fh:
            for rec in records:
                fh.write(json.dumps(rec) + "\n")
    manifest = {
        "format_version": DATASET_FORMAT_VERSION,
        "seed": seed,
        "counts": asdict(counts),
        "shift": asdict(shift),
        "classes": CLASS_NAMES,
        "image_size": IMAGE_SIZE,
    }
    with open(root / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
    return root


@dataclass
class LabeledExample:
    image: np.ndarray            # (H, W, 3) float32 in [0, 1]
    boxes: np.ndarray            # (m, 4) normalized
    classes: np.ndarray          # (m,) in 1..K
    image_id: str


@dataclass
class UnlabeledExample:
    """Trainer-facing target record: structurally label-free."""

    image: np.ndarray
    image_id: str


def _read_split(root: Path, split: str):
    ann = root / split / "annotations.jsonl"
    if not ann.exists():
        raise FileNotFoundError(f"missing annotations for split {split!r} under {root}")
    with open(ann) as fh:
        for line in fh:
            rec = json.loads(line)
            img = np.asarray(Image.open(root / split / rec["file"]), dtype=np.float32) / 255.0
            yield rec, img


def load_labeled(root: str | Path, split: str) -> list[LabeledExample]:
    out = []
    for rec, img in _read_split(Path(root), split):
        objs = rec["objects"]
        boxes = np.array([[o["x_min"], o["y_min"], o["x_max"], o["y_max"]] for o in objs],
                         dtype=np.float64).reshape(-1, 4)
        classes = np.array([o["class_id"] for o in objs], dtype=np.int64)
        if len(boxes) and (np.any(boxes < -1e-9) or np.any(boxes > 1 + 1e-9)
                           or np.any(boxes[:, 2] <= boxes[:, 0]) or np.any(boxes[:, 3] <= boxes[:, 1])):
            raise ValueError(f"degenerate or out-of-range box in {split}/{rec['file']}")
        out.append(LabeledExample(img, boxes, classes, rec["file"]))
    return out


def load_unlabeled(root: str | Path, split: str) -> list[UnlabeledExample]:
    """Load images only; annotation contents never reach the caller."""
    return [UnlabeledExample(img, rec["file"]) for rec, img in _read_split(Path(root), split)]


# ---------------------------------------------------------------------------
# augmentation and batch composition
# ---------------------------------------------------------------------------

@dataclass
class AugmentConfig:
    enabled: bool = True
    hflip_prob: float = 0.5
    jitter_strength: float = 0.10   # brightness scale / shift amplitude
    crop_prob: float = 0.5
    crop_min_scale: float = 0.8


def _resize(img: np.ndarray, size: int) -> np.ndarray:
    pil = Image.fromarray((img * 255.0 + 0.5).astype(np.uint8))
    out = pil.resize((size, size), Image.BILINEAR)
    return np.asarray(out, dtype=np.float32) / 255.0


def augment(img: np.ndarray, boxes: np.ndarray | None, classes: np.ndarray | None,
            cfg: AugmentConfig, rng: np.random.Generator):
    """Flip / photometric jitter / random crop, identical in law for both domains.

    Draws the same random variates regardless of whether boxes are present,
    so label availability cannot influence the image stream.
    """
    has_boxes = boxes is not None and len(boxes) > 0
    if not cfg.enabled:
        return img, boxes, classes

    if rng.random() < cfg.hflip_prob:
        img = img[:, ::-1].copy()
        if has_boxes:
            boxes = boxes.copy()
            boxes[:, [0, 2]] = 1.0 - boxes[:, [2, 0]]

    s = 1.0 + rng.uniform(-cfg.jitter_strength, cfg.jitter_strength)
    shift = rng.uniform(-cfg.jitter_strength / 2, cfg.jitter_strength / 2)
    img = np.clip(img * s + shift, 0.0, 1.0)

    if rng.random() < cfg.crop_prob:
        size = img.shape[0]
        scale = rng.uniform(cfg.crop_min_scale, 1.0)
        w = max(int(round(size * scale)), 8)
        x0 = int(rng.integers(0, size - w + 1))
        y0 = int(rng.integers(0, size - w + 1))
        img = _resize(img[y0:y0 + w, x0:x0 + w], size)
        if has_boxes:
            centers = (boxes[:, :2] + boxes[:, 2:]) / 2 * size
            inside = ((centers[:, 0] >= x0) & (centers[:, 0] < x0 + w)
                      & (centers[:, 1] >= y0) & (centers[:, 1] < y0 + w))
            boxes = boxes[inside] * size
            classes = classes[inside]
            boxes[:, [0, 2]] -= x0
            boxes[:, [1, 3]] -= y0
            boxes = np.clip(boxes / w, 0.0, 1.0)
            keep = (boxes[:, 2] - boxes[:, 0] > 1e-3) & (boxes[:, 3] - boxes[:, 1] > 1e-3)
            boxes, classes = boxes[keep], classes[keep]
    return img, boxes, classes


@dataclass
class DomainBatch:
    """Paired mini-batch: labeled source half, unlabeled target half."""

    source_images: np.ndarray | None
    source_boxes: list[np.ndarray]
    source_classes: list[np.ndarray]
    target_images: np.ndarray | None


class BatchComposer:
    """Epoch-shuffled sampler producing mixed or single-domain batches.

    Each domain is drawn without replacement; exhausting a split reshuffles
    it (a new epoch for that stream).  Requesting more than a split holds in
    one batch wraps around within the call and is logged once.
    """

    def __init__(self, source: list[LabeledExample] | None,
                 target: list[UnlabeledExample] | None,
                 n_source: int, n_target: int, seed: int,
                 augment_cfg: AugmentConfig | None = None):
        import logging
        self._log = logging.getLogger(__name__)
        if n_source > 0 and not source:
            raise ValueError("source examples required for n_source > 0")
        if n_target > 0 and not target:
            raise ValueError("target examples required for n_target > 0")
        self.source = source or []
        self.target = target or []
        self.n_source = n_source
        self.n_target = n_target
        self.cfg = augment_cfg or AugmentConfig()
        ss = np.random.SeedSequence([seed, 0xBA7C4])
        self.rng = np.random.default_rng(ss)
        self._order: dict[str, list[int]] = {"source": [], "target": []}
        self.epochs = {"source": 0, "target": 0}
        for domain, pool, need in (("source", self.source, n_source), ("target", self.target, n_target)):
            if pool and need > len(pool):
                self._log.warning("batch half (%d) exceeds %s split size (%d); wrapping around",
                                  need, domain, len(pool))

    def _draw(self, domain: str, pool: list, k: int) -> list[int]:
        idx = []
        order = self._order[domain]
        while len(idx) < k:
            if not order:
                order.extend(self.rng.permutation(len(pool)).tolist())
                self.epochs[domain] += 1
            idx.append(order.pop())
        return idx

    def next_batch(self) -> DomainBatch:
        src_imgs, src_boxes, src_classes = [], [], []
        if self.n_source:
            for i in self._draw("source", self.source, self.n_source):
                ex = self.source[i]
                img, boxes, classes = augment(ex.image, ex.boxes, ex.classes, self.cfg, self.rng)
                src_imgs.append(img)
                src_boxes.append(boxes)
                src_classes.append(classes)
        tgt_imgs = []
        if self.n_target:
            for i in self._draw("target", self.target, self.n_target):
                ex = self.target[i]
                img, _, _ = augment(ex.image, None, None, self.cfg, self.rng)
                tgt_imgs.append(img)
        return DomainBatch(
            np.stack(src_imgs) if src_imgs else None,
            src_boxes, src_classes,
            np.stack(tgt_imgs) if tgt_imgs else None,
        )
