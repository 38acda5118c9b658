"""Deterministic synthetic long-tail glyph-detection dataset.

Each class is a unique (shape, fill-pattern, hue-band) combination; class
identity lives entirely in local appearance, never in position. Per-class
training frequency follows a Zipf curve over class rank, with the tail
(novel) classes capped at 10 annotated instances. Images go to disk as binary
PPM (P6), annotations as JSON-lines, plus a manifest that echoes the spec and
the base/novel split.

Generation is a pure function of DatasetSpec: every image derives its own RNG
stream from (seed, split, image_id), so output bytes are identical across runs
and images can be rendered in any order.
"""
from __future__ import annotations

import colorsys
import json
import math
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

SHAPES = ("disk", "square", "triangle", "ring", "diamond", "cross")
PATTERNS = ("solid", "striped", "checker")
N_HUE_BANDS = 8

# Fixed catalog order, independent of the dataset seed, so class semantics are
# stable across specs.
_catalog_rng = np.random.default_rng(20240307)
_ALL_COMBOS = [(s, p, h) for s in range(len(SHAPES)) for p in range(len(PATTERNS))
               for h in range(N_HUE_BANDS)]
CATALOG = [_ALL_COMBOS[i] for i in _catalog_rng.permutation(len(_ALL_COMBOS))]

MAX_NOVEL_TRAIN_INSTANCES = 10
PLACEMENT_RETRIES = 40
MAX_OCCLUDED_FRACTION = 0.5


class DataError(RuntimeError):
    pass


class GenerationError(RuntimeError):
    pass


@dataclass
class DatasetSpec:
    n_classes: int = 40
    zipf_exponent: float = 1.0
    base_class_count: int = 30
    image_size: tuple[int, int] = (96, 96)  # (H, W)
    objects_per_image: tuple[int, int] = (1, 3)
    seed: int = 0
    head_count: int = 300              # train instances for the rank-1 class
    eval_images_per_class: int = 6

    def validate(self) -> None:
        if self.n_classes < self.base_class_count + 1:
            raise ValueError(
                f"n_classes={self.n_classes} must exceed base_class_count={self.base_class_count}")
        if self.n_classes > len(CATALOG):
            raise ValueError(f"at most {len(CATALOG)} distinct glyph classes available")
        lo, hi = self.objects_per_image
        if not (1 <= lo <= hi):
            raise ValueError(f"objects_per_image range {self.objects_per_image} invalid")
        if self.eval_images_per_class < 5:
            raise ValueError("eval split needs at least 5 images per class")
        h, w = self.image_size
        if _glyph_size_range(min(h, w))[1] + 4 > min(h, w):
            raise GenerationError(
                f"image size {self.image_size} too small to place requested objects")


@dataclass(frozen=True)
class Annotation:
    image_id: int
    class_id: int
    box: tuple[int, int, int, int]  # x1, y1, x2, y2; right/bottom exclusive


def _glyph_size_range(min_side: int) -> tuple[int, int]:
    lo = max(10, round(0.19 * min_side))
    hi = max(lo + 2, round(0.46 * min_side))
    return lo, hi


def class_table(spec: DatasetSpec) -> list[dict]:
    rows = []
    for cid in range(spec.n_classes):
        s, p, h = CATALOG[cid]
        rows.append({"id": cid, "rank": cid + 1, "shape": SHAPES[s],
                     "pattern": PATTERNS[p], "hue_band": h})
    return rows


def train_instance_counts(spec: DatasetSpec) -> dict[int, int]:
    """Zipf-shaped per-class train instance counts; novel tail capped at 10."""
    counts = {}
    for cid in range(spec.n_classes):
        rank = cid + 1
        n = max(1, round(spec.head_count * rank ** (-spec.zipf_exponent)))
        if cid >= spec.base_class_count:
            n = min(n, MAX_NOVEL_TRAIN_INSTANCES)
        counts[cid] = n
    return counts


def _hsv_rgb(h: float, s: float, v: float) -> np.ndarray:
    r, g, b = colorsys.hsv_to_rgb(h % 1.0, s, v)
    return np.array([r * 255, g * 255, b * 255], dtype=np.uint8)


def _glyph_mask_and_uv(shape_idx: int, cx: float, cy: float, size: float,
                       rot: float, h: int, w: int):
    yy, xx = np.mgrid[0:h, 0:w]
    dx = (xx + 0.5) - cx
    dy = (yy + 0.5) - cy
    u = dx * math.cos(rot) + dy * math.sin(rot)
    v = -dx * math.sin(rot) + dy * math.cos(rot)
    r = size / 2.0
    shape = SHAPES[shape_idx]
    if shape == "disk":
        mask = u * u + v * v <= r * r
    elif shape == "square":
        mask = np.maximum(np.abs(u), np.abs(v)) <= 0.88 * r
    elif shape == "triangle":
        mask = (v <= 0.75 * r) & (v >= (1.75 / 0.95) * np.abs(u) - r)
    elif shape == "ring":
        rho2 = u * u + v * v
        mask = (rho2 <= r * r) & (rho2 >= (0.55 * r) ** 2)
    elif shape == "diamond":
        mask = np.abs(u) + np.abs(v) <= r
    elif shape == "cross":
        arm = 0.34 * r
        mask = ((np.abs(u) <= arm) & (np.abs(v) <= r)) | ((np.abs(v) <= arm) & (np.abs(u) <= r))
    else:
        raise ValueError(f"unknown shape index {shape_idx}")
    return mask, u, v


def _pattern_primary(pattern_idx: int, u: np.ndarray, v: np.ndarray, size: float) -> np.ndarray:
    pattern = PATTERNS[pattern_idx]
    if pattern == "solid":
        return np.ones_like(u, dtype=bool)
    if pattern == "striped":
        period = max(2.0, size / 3.0)
        return (np.floor(u / period).astype(np.int64) % 2) == 0
    if pattern == "checker":
        period = max(2.0, size / 3.5)
        cells = np.floor(u / period).astype(np.int64) + np.floor(v / period).astype(np.int64)
        return (cells % 2) == 0
    raise ValueError(f"unknown pattern index {pattern_idx}")


def _paint_glyph(image: np.ndarray, class_id: int, cx: float, cy: float,
                 size: float, rot: float, hue_jitter: float) -> np.ndarray:
    """Paint one glyph in place; returns its pixel mask."""
    h, w = image.shape[:2]
    shape_idx, pattern_idx, hue_band = CATALOG[class_id]
    mask, u, v = _glyph_mask_and_uv(shape_idx, cx, cy, size, rot, h, w)
    hue = (hue_band + hue_jitter) / N_HUE_BANDS
    primary = _hsv_rgb(hue, 0.82, 0.95)
    secondary = _hsv_rgb(hue, 0.82, 0.55)
    sel = _pattern_primary(pattern_idx, u, v, size)
    image[mask & sel] = primary
    image[mask & ~sel] = secondary
    return mask


def _tight_box(mask: np.ndarray) -> tuple[int, int, int, int]:
    ys, xs = np.nonzero(mask)
    return int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1


def render(class_id: int, placement: tuple[float, float, float], style_seed: int,
           image_size: tuple[int, int] = (96, 96), background: int = 40):
    """Render a single glyph on a flat background.

    placement is (center_x, center_y, size). Returns (image uint8 HWC, tight
    box of the glyph's pixels). Same arguments always give the same bytes.
    """
    h, w = image_size
    rng = np.random.default_rng(np.random.SeedSequence([int(style_seed)]))
    image = np.full((h, w, 3), background, dtype=np.uint8)
    cx, cy, size = placement
    rot = float(rng.uniform(-0.35, 0.35))
    hue_jitter = float(rng.uniform(0.05, 0.95))
    mask = _paint_glyph(image, class_id, cx, cy, size, rot, hue_jitter)
    if not mask.any():
        raise GenerationError(f"glyph for class {class_id} rendered no pixels at {placement}")
    return image, _tight_box(mask)


def compose_image(class_ids: list[int], rng: np.random.Generator,
                  image_size: tuple[int, int]) -> tuple[np.ndarray, list[tuple[int, tuple]]]:
    """Paint the given instances into one image, painter's order.

    A placement that would hide more than half of an earlier glyph is
    resampled. Returns (pixels, [(class_id, tight_box_of_visible_pixels)]).
    """
    h, w = image_size
    size_lo, size_hi = _glyph_size_range(min(h, w))
    bg = int(rng.integers(25, 61))
    noise = rng.integers(-6, 7, size=(h, w, 1))
    image = np.clip(bg + noise, 0, 255).astype(np.uint8).repeat(3, axis=2)
    ownership = np.full((h, w), -1, dtype=np.int32)
    areas: list[int] = []
    for idx, cid in enumerate(class_ids):
        placed = False
        for _ in range(PLACEMENT_RETRIES):
            size = float(rng.uniform(size_lo, size_hi))
            margin = size / 2 + 2
            cx = float(rng.uniform(margin, w - margin))
            cy = float(rng.uniform(margin, h - margin))
            rot = float(rng.uniform(-0.35, 0.35))
            hue_jitter = float(rng.uniform(0.05, 0.95))
            shape_idx, _, _ = CATALOG[cid]
            mask, _, _ = _glyph_mask_and_uv(shape_idx, cx, cy, size, rot, h, w)
            if not mask.any():
                continue
            # Check how much of each earlier glyph this placement would hide.
            ok = True
            for j in range(idx):
                visible_j = int((ownership == j).sum())
                newly_hidden = int(((ownership == j) & mask).sum())
                if visible_j - newly_hidden < (1 - MAX_OCCLUDED_FRACTION) * areas[j]:
                    ok = False
                    break
            if not ok:
                continue
            _paint_glyph(image, cid, cx, cy, size, rot, hue_jitter)
            ownership[mask] = idx
            areas.append(int(mask.sum()))
            placed = True
            break
        if not placed:
            raise GenerationError(
                f"image too small to place requested objects ({len(class_ids)} in {w}x{h})")
    anns = []
    for idx, cid in enumerate(class_ids):
        visible = ownership == idx
        if not visible.any():
            raise GenerationError("glyph fully occluded despite occlusion cap")
        anns.append((cid, _tight_box(visible)))
    return image, anns


def write_ppm(path: Path, image: np.ndarray) -> None:
    h, w = image.shape[:2]
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(image.tobytes())


def read_ppm(path: Path) -> np.ndarray:
    data = Path(path).read_bytes()
    fields: list[bytes] = []
    pos = 0
    while len(fields) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos] != 10:
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DataError(f"{path}: truncated header")
        fields.append(data[start:pos])
    if fields[0] != b"P6":
        raise DataError(f"{path}: not a P6 PPM file")
    w, h, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    if maxval != 255:
        raise DataError(f"{path}: unsupported maxval {maxval}")
    pos += 1  # single whitespace after maxval
    payload = data[pos:pos + h * w * 3]
    if len(payload) != h * w * 3:
        raise DataError(f"{path}: truncated payload, expected {h * w * 3} bytes, got {len(payload)}")
    return np.frombuffer(payload, dtype=np.uint8).reshape(h, w, 3).copy()


def _plan_images(spec: DatasetSpec) -> dict:
    """Deterministic assignment of instances to images for both splits."""
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 0]))
    counts = train_instance_counts(spec)
    base_ids = list(range(spec.base_class_count))
    novel_ids = list(range(spec.base_class_count, spec.n_classes))
    lo, hi = spec.objects_per_image

    def chunk(pool: list[int]) -> list[list[int]]:
        pool = list(pool)
        rng.shuffle(pool)
        out = []
        i = 0
        while i < len(pool):
            k = int(rng.integers(lo, hi + 1))
            out.append(pool[i:i + k])
            i += k
        return out

    # Train images never mix base and novel objects: pretraining and
    # meta-training must not see novel-class pixels.
    train_images = chunk([cid for cid in base_ids for _ in range(counts[cid])])
    train_images += chunk([cid for cid in novel_ids for _ in range(counts[cid])])

    eval_images = []
    for cid in range(spec.n_classes):
        for _ in range(spec.eval_images_per_class):
            n_extra = int(rng.integers(0, min(3, hi)))
            extras = [int(rng.integers(0, spec.n_classes)) for _ in range(n_extra)]
            eval_images.append([cid] + extras)
    return {"train": train_images, "eval": eval_images}


_SPLIT_SALT = {"train": 1, "eval": 2}


def generate(spec: DatasetSpec, out_dir: str | Path) -> Path:
    """Materialize the dataset under out_dir; byte-identical for equal specs."""
    spec.validate()
    out = Path(out_dir)
    plan = _plan_images(spec)
    per_class_instances: dict[str, Counter] = {}
    per_class_images: dict[str, Counter] = {}
    (out / "annotations").mkdir(parents=True, exist_ok=True)
    for split, image_plans in plan.items():
        img_dir = out / "images" / split
        img_dir.mkdir(parents=True, exist_ok=True)
        inst_counter: Counter = Counter()
        img_counter: Counter = Counter()
        lines = []
        for image_id, class_ids in enumerate(image_plans):
            rng = np.random.default_rng(
                np.random.SeedSequence([spec.seed, _SPLIT_SALT[split], image_id]))
            image, anns = compose_image(class_ids, rng, spec.image_size)
            write_ppm(img_dir / f"{image_id}.ppm", image)
            for cid, box in anns:
                inst_counter[cid] += 1
                lines.append(json.dumps(
                    {"image_id": image_id, "class_id": int(cid), "box": list(box)},
                    sort_keys=True))
            for cid in set(c for c, _ in anns):
                img_counter[cid] += 1
        (out / "annotations" / f"{split}.jsonl").write_text("\n".join(lines) + "\n")
        per_class_instances[split] = inst_counter
        per_class_images[split] = img_counter
    manifest = {
        "format_version": 1,
        "spec": asdict(spec),
        "classes": class_table(spec),
        "base_class_ids": list(range(spec.base_class_count)),
        "novel_class_ids": list(range(spec.base_class_count, spec.n_classes)),
        "splits": {
            split: {
                "n_images": len(plan[split]),
                "per_class_instances": {str(k): per_class_instances[split][k]
                                        for k in sorted(per_class_instances[split])},
                "per_class_images": {str(k): per_class_images[split][k]
                                     for k in sorted(per_class_images[split])},
            } for split in plan
        },
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return out


class GlyphDataset:
    """In-memory index of a generated dataset, grouped by class.

    Class-keyed reads (instances / images_containing) are counted in
    access_log, which lets tests assert that a training stage never touched a
    class it was not supposed to see.
    """

    def __init__(self, root: str | Path):
        self.root = Path(root)
        manifest_path = self.root / "manifest.json"
        if not manifest_path.exists():
            raise DataError(f"{manifest_path}: no manifest found")
        self.manifest = json.loads(manifest_path.read_text())
        self.spec = DatasetSpec(**{**self.manifest["spec"], **{
            "image_size": tuple(self.manifest["spec"]["image_size"]),
            "objects_per_image": tuple(self.manifest["spec"]["objects_per_image"])}})
        self.base_class_ids: list[int] = list(self.manifest["base_class_ids"])
        self.novel_class_ids: list[int] = list(self.manifest["novel_class_ids"])
        self.class_ids = self.base_class_ids + self.novel_class_ids
        self.images: dict[str, dict[int, np.ndarray]] = {}
        self.annotations: dict[str, list[Annotation]] = {}
        self._by_class: dict[str, dict[int, list[tuple[int, tuple]]]] = {}
        self._images_with: dict[str, dict[int, list[int]]] = {}
        self.access_log: Counter = Counter()
        self._tensor_cache: dict[str, tuple[list[int], torch.Tensor, dict[int, int]]] = {}
        for split in ("train", "eval"):
            self._load_split(split)

    def _load_split(self, split: str) -> None:
        ann_path = self.root / "annotations" / f"{split}.jsonl"
        if not ann_path.exists():
            raise DataError(f"{ann_path}: missing annotation file")
        anns: list[Annotation] = []
        offset = 0
        with open(ann_path, "rb") as f:
            for raw in f:
                line = raw.strip()
                if line:
                    try:
                        rec = json.loads(line)
                        box = tuple(int(v) for v in rec["box"])
                        if len(box) != 4 or box[0] >= box[2] or box[1] >= box[3]:
                            raise ValueError(f"degenerate box {box}")
                        anns.append(Annotation(int(rec["image_id"]), int(rec["class_id"]), box))
                    except (ValueError, KeyError, TypeError) as exc:
                        raise DataError(f"{ann_path}: malformed record at byte {offset}: {exc}") from exc
                offset += len(raw)
        self.annotations[split] = anns
        image_ids = sorted({a.image_id for a in anns})
        images = {}
        for image_id in image_ids:
            images[image_id] = read_ppm(self.root / "images" / split / f"{image_id}.ppm")
        self.images[split] = images
        by_class: dict[int, list[tuple[int, tuple]]] = {}
        images_with: dict[int, list[int]] = {}
        for a in anns:
            by_class.setdefault(a.class_id, []).append((a.image_id, a.box))
            lst = images_with.setdefault(a.class_id, [])
            if a.image_id not in lst:
                lst.append(a.image_id)
        self._by_class[split] = by_class
        self._images_with[split] = images_with

    # -- class-keyed reads (tracked) --
    def instances(self, split: str, class_id: int) -> list[tuple[int, tuple]]:
        self.access_log[class_id] += 1
        return list(self._by_class[split].get(class_id, []))

    def images_containing(self, split: str, class_id: int) -> list[int]:
        self.access_log[class_id] += 1
        return list(self._images_with[split].get(class_id, []))

    def instance_count(self, split: str, class_id: int) -> int:
        return len(self._by_class[split].get(class_id, []))

    def reset_access_log(self) -> None:
        self.access_log = Counter()

    # -- untracked helpers --
    def image(self, split: str, image_id: int) -> np.ndarray:
        return self.images[split][image_id]

    def image_ids(self, split: str) -> list[int]:
        return sorted(self.images[split])

    def annotations_for(self, split: str, image_id: int) -> list[Annotation]:
        return [a for a in self.annotations[split] if a.image_id == image_id]

    def image_ids_with_classes_within(self, split: str, pool: set[int]) -> list[int]:
        """Images that have >=1 annotation and all annotations inside pool."""
        per_image: dict[int, bool] = {}
        for a in self.annotations[split]:
            ok = per_image.get(a.image_id, True)
            per_image[a.image_id] = ok and (a.class_id in pool)
        return sorted(i for i, ok in per_image.items() if ok)

    def to_tensor(self, image: np.ndarray) -> torch.Tensor:
        return torch.from_numpy(image.astype(np.float32) / 255.0).permute(2, 0, 1)

    def image_batch(self, split: str, image_ids: list[int]) -> torch.Tensor:
        ids_all, tensor, index = self._tensor_cache.get(split, (None, None, None))
        if tensor is None:
            ids_all = self.image_ids(split)
            tensor = torch.stack([self.to_tensor(self.images[split][i]) for i in ids_all])
            index = {i: k for k, i in enumerate(ids_all)}
            self._tensor_cache[split] = (ids_all, tensor, index)
        return tensor[[index[i] for i in image_ids]]


def load(root: str | Path) -> GlyphDataset:
    return GlyphDataset(root)
