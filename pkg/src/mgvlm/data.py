"""Unified sample schema, synthetic shapes-world corpora, annotation
filtering, and mixed-type batch assembly.

A sample is one image or video clip, an optional caption, and any number
of (bounding box, text) annotations at object or region granularity. The
generator renders colored shapes on a grid with exact cell-aligned boxes
and templated captions, in either of two closed synthetic languages so a
trained text module can be swapped for a second-language one.

Datasets live in a directory: a JSON manifest, line-delimited sample
records, PPM media sidecars, and a one-token-per-line vocab file.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .text import Vocab
from .vision import BoundingBox

FORMAT_VERSION = 1
GEN_STREAM = 202  # spawn key for corpus generation

COLORS = {
    "red": (255, 0, 0),
    "green": (0, 255, 0),
    "blue": (0, 0, 255),
    "yellow": (255, 255, 0),
}
SHAPES = ("circle", "square", "triangle")
SIZES = ("small", "big")

# Word-for-word parallel lexicons; equal sizes keep swapped checkpoints
# shape-compatible (same vocab length, same MLM head width).
LEXICONS = {
    "en": {
        "red": "red", "green": "green", "blue": "blue", "yellow": "yellow",
        "circle": "circle", "square": "square", "triangle": "triangle",
        "small": "small", "big": "big",
        "a": "a", "and": "and", "of": "of", "moving": "moving",
        "left": "left", "above": "above",
        "right": "right", "up": "up", "down": "down",
    },
    "de": {
        "red": "rot", "green": "gruen", "blue": "blau", "yellow": "gelb",
        "circle": "kreis", "square": "quadrat", "triangle": "dreieck",
        "small": "klein", "big": "gross",
        "a": "ein", "and": "und", "of": "von", "moving": "bewegt",
        "left": "links", "above": "ueber",
        "right": "rechts", "up": "hoch", "down": "runter",
    },
}
_WORD_KEYS = sorted(LEXICONS["en"])


def build_vocab(lang: str = "en") -> Vocab:
    lex = LEXICONS[lang]
    return Vocab.from_words([lex[k] for k in _WORD_KEYS])


def color_shape_words(lang: str = "en") -> set[str]:
    lex = LEXICONS[lang]
    return {lex[k] for k in (*COLORS, *SHAPES)}


# --------------------------------------------------------------------------
# Sample schema
# --------------------------------------------------------------------------

@dataclass
class Annotation:
    box: BoundingBox
    text: str
    kind: str                     # "object" | "region"


@dataclass
class Sample:
    source_id: str
    frames: list                  # list of (H, W, C) float arrays in [0, 1]
    caption: str | None
    annotations: list[Annotation]
    timestamps: list = field(default_factory=list)
    frame_boxes: list = field(default_factory=list)

    def __post_init__(self):
        if self.caption is None and not self.annotations:
            raise ValueError(f"sample {self.source_id}: needs a caption or annotations")

    @property
    def is_video(self) -> bool:
        return len(self.frames) > 1

    @property
    def kind(self) -> str:
        if self.is_video:
            return "video"
        if self.caption and self.annotations:
            return "full"
        return "caption" if self.caption else "annotated"


# --------------------------------------------------------------------------
# PPM sidecar files (no image-codec dependency)
# --------------------------------------------------------------------------

def write_ppm(path, image: np.ndarray) -> None:
    h, w, c = image.shape
    if c != 3:
        raise ValueError("PPM requires 3 channels")
    data = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def read_ppm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if not raw.startswith(b"P6"):
        raise ValueError(f"{path}: not a binary PPM")
    fields, pos = [], 2
    while len(fields) < 3:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        fields.append(int(raw[start:pos]))
    pos += 1  # single whitespace after maxval
    w, h, maxval = fields
    pixels = np.frombuffer(raw, dtype=np.uint8, count=w * h * 3, offset=pos)
    return (pixels.reshape(h, w, 3).astype(np.float32) / float(maxval))


# --------------------------------------------------------------------------
# Filtering (invalid boxes, sub-patch boxes, near-duplicate region texts)
# --------------------------------------------------------------------------

@dataclass
class FilterReport:
    counts: dict = field(default_factory=dict)
    rejections: list = field(default_factory=list)

    def add(self, source_id: str, rule: str) -> None:
        self.counts[rule] = self.counts.get(rule, 0) + 1
        self.rejections.append({"id": source_id, "rule": rule})

    def write(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for rec in self.rejections:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")


def _word_jaccard(a: str, b: str) -> float:
    wa, wb = set(a.lower().split()), set(b.lower().split())
    if not wa and not wb:
        return 1.0
    return len(wa & wb) / len(wa | wb)


def validate_and_filter(records: list[dict], *, image_size: int, patch_size: int,
                        min_edge: int = 0, max_aspect: float = 3.0,
                        jaccard_max: float = 0.75) -> tuple[list[dict], FilterReport]:
    """Drop malformed annotations and unusable records from parsed
    record dicts. Rules, each counted separately:

    - "invalid": box field outside [0, 1] or non-positive extent
    - "too-small": box pixel area below one patch
    - "overlap": region text near-duplicates an earlier region of the
      same record (word-set Jaccard > jaccard_max, first kept)
    - "aspect" / "small-image": record-level dimension filters
    - "empty": record left with neither caption nor annotations
    """
    patch_area = float(patch_size * patch_size)
    kept_records = []
    report = FilterReport()
    for rec in records:
        rid = rec.get("id", "?")
        h = rec.get("height", image_size)
        w = rec.get("width", image_size)
        if max(h, w) > max_aspect * min(h, w):
            report.add(rid, "aspect")
            continue
        if min_edge and min(h, w) < min_edge:
            report.add(rid, "small-image")
            continue
        kept_anns = []
        kept_region_texts = []
        for ann in rec.get("annotations", []):
            vals = [ann.get(k) for k in ("cx", "cy", "w", "h")]
            if any(v is None or not 0.0 <= v <= 1.0 for v in vals) or vals[2] <= 0 or vals[3] <= 0:
                report.add(rid, "invalid")
                continue
            cx, cy, bw, bh = vals
            x1, y1 = max(cx - bw / 2, 0.0), max(cy - bh / 2, 0.0)
            x2, y2 = min(cx + bw / 2, 1.0), min(cy + bh / 2, 1.0)
            if (x2 - x1) * (y2 - y1) * w * h < patch_area:
                report.add(rid, "too-small")
                continue
            if ann.get("kind") == "region":
                if any(_word_jaccard(ann["text"], t) > jaccard_max for t in kept_region_texts):
                    report.add(rid, "overlap")
                    continue
                kept_region_texts.append(ann["text"])
            kept_anns.append(ann)
        if not rec.get("caption") and not kept_anns:
            report.add(rid, "empty")
            continue
        new_rec = dict(rec)
        new_rec["annotations"] = kept_anns
        kept_records.append(new_rec)
    return kept_records, report


# --------------------------------------------------------------------------
# Shape rendering
# --------------------------------------------------------------------------

def _render_shape(image: np.ndarray, row: int, col: int, cell: int,
                  shape: str, color: tuple, size: str) -> None:
    y0, x0 = row * cell, col * cell
    rgb = np.array(color, dtype=np.float32) / 255.0
    yy, xx = np.mgrid[0:cell, 0:cell]
    center = (cell - 1) / 2.0
    if shape == "square":
        half = cell / 2 if size == "big" else cell / 4
        mask = (np.abs(yy - center) <= half) & (np.abs(xx - center) <= half)
    elif shape == "circle":
        radius = cell / 2 if size == "big" else cell / 4
        mask = (yy - center) ** 2 + (xx - center) ** 2 <= radius ** 2
    else:  # triangle: apex at top center, base at the bottom
        scale = 1.0 if size == "big" else 0.5
        span = (yy + 1) / cell * center * scale
        top = (1.0 - scale) * center
        mask = (yy >= top) & (np.abs(xx - center) <= span)
    image[y0:y0 + cell, x0:x0 + cell][mask] = rgb


def _cell_box(row: int, col: int, grid: int) -> BoundingBox:
    return BoundingBox((col + 0.5) / grid, (row + 0.5) / grid, 1.0 / grid, 1.0 / grid)


def _union_box(a: BoundingBox, b: BoundingBox) -> BoundingBox:
    ax1, ay1, ax2, ay2 = a.corners()
    bx1, by1, bx2, by2 = b.corners()
    x1, y1 = min(ax1, bx1), min(ay1, by1)
    x2, y2 = max(ax2, bx2), max(ay2, by2)
    return BoundingBox((x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1)


_TYPE_TABLE = [(size, color, shape) for size in SIZES for color in sorted(COLORS)
               for shape in SHAPES]


def _phrase(lex: dict, size: str, color: str, shape: str) -> str:
    return f"{lex[size]} {lex[color]} {lex[shape]}"


# --------------------------------------------------------------------------
# Corpus generation
# --------------------------------------------------------------------------

def generate_shapes_world(seed: int, n: int, out_dir, *, image_size: int = 32,
                          grid: int = 2, patch_size: int = 8, lang: str = "en",
                          min_shapes: int = 1, max_shapes: int = 4,
                          type_pool: int = 0, caption_only_rate: float = 0.0,
                          annotation_only_rate: float = 0.0) -> Path:
    """Render n image samples of non-overlapping colored shapes on a grid.

    Captions enumerate shapes left to right; every shape yields an object
    annotation whose box exactly bounds its cell, and adjacent pairs in
    reading order yield a spatial-relation region annotation. Captions
    are unique across the corpus, and the whole run is deterministic for
    a given seed.

    type_pool > 0 restricts shapes to the first type_pool entries of the
    (size, color, shape) table; with min_shapes=max_shapes=2 this yields
    densely confusable corpora for compositional retrieval probes.
    """
    if image_size % grid != 0:
        raise ValueError("grid must divide the image size")
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(GEN_STREAM,)))
    lex = LEXICONS[lang]
    cell = image_size // grid
    n_cells = grid * grid
    pool = len(_TYPE_TABLE) if type_pool <= 0 else min(type_pool, len(_TYPE_TABLE))
    max_shapes = min(max_shapes, n_cells, pool)
    min_shapes = max(1, min(min_shapes, max_shapes))
    out = Path(out_dir)
    (out / "media").mkdir(parents=True, exist_ok=True)

    seen_captions: set[str] = set()
    records = []
    kind_counts: dict[str, int] = {}
    for i in range(n):
        for attempt in range(1000):
            n_shapes = int(rng.integers(min_shapes, max_shapes + 1))
            cells = rng.choice(n_cells, size=n_shapes, replace=False)
            types = rng.choice(pool, size=n_shapes, replace=False)
            placed = sorted(
                ((int(c) % grid, int(c) // grid, _TYPE_TABLE[int(t)])
                 for c, t in zip(cells, types)),
                key=lambda item: (item[0], item[1]))
            caption = f" {lex['and']} ".join(
                f"{lex['a']} {_phrase(lex, *typ)}" for _, _, typ in placed)
            if caption not in seen_captions:
                break
        else:
            raise ValueError("infeasible placement: caption space exhausted")
        seen_captions.add(caption)

        image = np.zeros((image_size, image_size, 3), dtype=np.float32)
        annotations = []
        boxes = []
        for col, row, (size, color, shape) in placed:
            _render_shape(image, row, col, cell, shape, COLORS[color], size)
            box = _cell_box(row, col, grid)
            boxes.append(box)
            annotations.append({"cx": box.cx, "cy": box.cy, "w": box.w, "h": box.h,
                                "text": _phrase(lex, size, color, shape),
                                "kind": "object"})
        for j in range(len(placed) - 1):
            (col_a, row_a, typ_a), (col_b, row_b, typ_b) = placed[j], placed[j + 1]
            rel = lex["left"] if col_a != col_b else lex["above"]
            union = _union_box(boxes[j], boxes[j + 1])
            annotations.append({"cx": union.cx, "cy": union.cy, "w": union.w, "h": union.h,
                                "text": f"{_phrase(lex, *typ_a)} {rel} {lex['of']} "
                                        f"{_phrase(lex, *typ_b)}",
                                "kind": "region"})

        rid = f"img_{i:05d}"
        write_ppm(out / "media" / f"{rid}.ppm", image)
        record = {"id": rid, "media": [f"media/{rid}.ppm"],
                  "caption": caption, "annotations": annotations}
        flavor = rng.random()
        if flavor < caption_only_rate:
            record["annotations"] = []
        elif flavor < caption_only_rate + annotation_only_rate:
            record["caption"] = None
        kind = ("caption" if record["caption"] and not record["annotations"] else
                "annotated" if not record["caption"] else "full")
        kind_counts[kind] = kind_counts.get(kind, 0) + 1
        records.append(record)

    vocab = build_vocab(lang)
    vocab.save(out / "vocab.txt")
    _write_records(out, records)
    _write_manifest(out, image_size, patch_size, grid, lang, len(records), kind_counts)
    return out


def generate_shapes_video(seed: int, n: int, out_dir, *, image_size: int = 32,
                          grid: int = 4, patch_size: int = 8, frames: int = 4,
                          lang: str = "en") -> Path:
    """Render n video clips of one shape translating one cell per frame.

    The caption names the shape and its motion direction; exact per-frame
    boxes are kept alongside for diagnostics but clips carry no
    annotations (video samples do not feed the localization loss).
    """
    if image_size % grid != 0:
        raise ValueError("grid must divide the image size")
    if frames > grid:
        raise ValueError("path length exceeds the grid")
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(GEN_STREAM,)))
    lex = LEXICONS[lang]
    cell = image_size // grid
    directions = {"right": (1, 0), "left": (-1, 0), "up": (0, -1), "down": (0, 1)}
    names = sorted(directions)
    out = Path(out_dir)
    (out / "media").mkdir(parents=True, exist_ok=True)

    seen: set[str] = set()
    records = []
    for i in range(n):
        for attempt in range(1000):
            size, color, shape = _TYPE_TABLE[int(rng.integers(len(_TYPE_TABLE)))]
            dname = names[int(rng.integers(len(names)))]
            caption = f"{_phrase(lex, size, color, shape)} {lex['moving']} {lex[dname]}"
            if caption not in seen:
                break
        else:
            raise ValueError("infeasible placement: video caption space exhausted")
        seen.add(caption)
        dx, dy = directions[dname]
        col0 = int(rng.integers(0, grid - (frames - 1))) if dx > 0 else \
            int(rng.integers(frames - 1, grid)) if dx < 0 else int(rng.integers(0, grid))
        row0 = int(rng.integers(0, grid - (frames - 1))) if dy > 0 else \
            int(rng.integers(frames - 1, grid)) if dy < 0 else int(rng.integers(0, grid))

        rid = f"vid_{i:05d}"
        media, frame_boxes = [], []
        for f in range(frames):
            col, row = col0 + dx * f, row0 + dy * f
            image = np.zeros((image_size, image_size, 3), dtype=np.float32)
            _render_shape(image, row, col, cell, shape, COLORS[color], size)
            fname = f"media/{rid}_f{f}.ppm"
            write_ppm(out / fname, image)
            media.append(fname)
            box = _cell_box(row, col, grid)
            frame_boxes.append({"cx": box.cx, "cy": box.cy, "w": box.w, "h": box.h})
        records.append({"id": rid, "media": media, "caption": caption,
                        "annotations": [], "timestamps": [float(f) for f in range(frames)],
                        "frame_boxes": frame_boxes})

    vocab = build_vocab(lang)
    vocab.save(out / "vocab.txt")
    _write_records(out, records)
    _write_manifest(out, image_size, patch_size, grid, lang, len(records),
                    {"video": len(records)})
    return out


def _write_records(out: Path, records: list[dict]) -> None:
    with open(out / "records.jsonl", "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def _write_manifest(out: Path, image_size: int, patch_size: int, grid: int,
                    lang: str, count: int, kind_counts: dict) -> None:
    manifest = {"format_version": FORMAT_VERSION, "height": image_size,
                "width": image_size, "channels": 3, "patch_size": patch_size,
                "grid": grid, "lang": lang, "record_count": count,
                "kind_counts": kind_counts, "vocab_file": "vocab.txt"}
    if image_size % patch_size != 0:
        raise ValueError("media dimensions must be divisible by the patch size")
    (out / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=1) + "\n",
                                       encoding="utf-8")


# --------------------------------------------------------------------------
# Loading and batch assembly
# --------------------------------------------------------------------------

class Dataset:
    def __init__(self, manifest: dict, samples: list[Sample], vocab: Vocab):
        self.manifest = manifest
        self.samples = samples
        self.vocab = vocab

    def __len__(self) -> int:
        return len(self.samples)

    def filter_kind(self, kind: str) -> "Dataset":
        return Dataset(self.manifest, [s for s in self.samples if s.kind == kind],
                       self.vocab)

    @classmethod
    def load(cls, path, apply_filters: bool = True) -> "Dataset":
        root = Path(path)
        manifest = json.loads((root / "manifest.json").read_text(encoding="utf-8"))
        if manifest.get("format_version") != FORMAT_VERSION:
            raise ValueError(f"unsupported dataset format: {manifest.get('format_version')}")
        vocab = Vocab.load(root / manifest["vocab_file"])
        records = []
        with open(root / "records.jsonl", encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    records.append(json.loads(line))
        if manifest["record_count"] != len(records):
            raise ValueError(f"manifest claims {manifest['record_count']} records, "
                             f"found {len(records)}")
        if apply_filters:
            records, _ = validate_and_filter(records, image_size=manifest["height"],
                                             patch_size=manifest["patch_size"])
        samples = []
        for rec in records:
            frames = [read_ppm(root / m) for m in rec["media"]]
            anns = [Annotation(BoundingBox(a["cx"], a["cy"], a["w"], a["h"]),
                               a["text"], a.get("kind", "object"))
                    for a in rec["annotations"]]
            samples.append(Sample(rec["id"], frames, rec.get("caption"), anns,
                                  rec.get("timestamps", []),
                                  [BoundingBox(b["cx"], b["cy"], b["w"], b["h"])
                                   for b in rec.get("frame_boxes", [])]))
        return cls(manifest, samples, vocab)


def assemble_batch(mix: list[tuple[Dataset, float]], batch_size: int,
                   rng: np.random.Generator) -> list[Sample]:
    """Draw batch_size samples i.i.d.: first a dataset by normalized mix
    weight, then a uniform sample within it."""
    if not mix:
        raise ValueError("empty mix")
    weights = np.array([w for _, w in mix], dtype=np.float64)
    if (weights <= 0).any():
        raise ValueError("mix weights must be positive")
    for ds, _ in mix:
        if len(ds) == 0:
            raise ValueError("mix references an empty dataset")
    dims = {(d.manifest["height"], d.manifest["width"]) for d, _ in mix}
    if len(dims) != 1:
        raise ValueError("mixed datasets must share media dimensions")
    weights /= weights.sum()
    picks = rng.choice(len(mix), size=batch_size, p=weights)
    batch = []
    for p in picks:
        ds = mix[int(p)][0]
        batch.append(ds.samples[int(rng.integers(len(ds)))])
    return batch
