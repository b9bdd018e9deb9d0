import json
from pathlib import Path

import numpy as np
import pytest

from mgvlm.data import (Dataset, assemble_batch, build_vocab, generate_shapes_video,
                        generate_shapes_world, read_ppm, validate_and_filter,
                        write_ppm)
from mgvlm.text import UNK, tokenize
from mgvlm.vision import concept_patch_ids


def dir_fingerprint(root: Path) -> dict:
    return {str(p.relative_to(root)): p.read_bytes()
            for p in sorted(root.rglob("*")) if p.is_file()}


# ---------------------------------------------------------------------------
# PPM sidecars
# ---------------------------------------------------------------------------

def test_ppm_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    image = (rng.integers(0, 256, size=(32, 32, 3)) / 255.0).astype(np.float32)
    write_ppm(tmp_path / "x.ppm", image)
    back = read_ppm(tmp_path / "x.ppm")
    np.testing.assert_allclose(back, image, atol=1e-7)


# ---------------------------------------------------------------------------
# generator
# ---------------------------------------------------------------------------

def test_generation_deterministic(tmp_path):
    a = generate_shapes_world(13, 20, tmp_path / "a")
    b = generate_shapes_world(13, 20, tmp_path / "b")
    assert dir_fingerprint(a) == dir_fingerprint(b)


def test_video_generation_deterministic(tmp_path):
    a = generate_shapes_video(5, 5, tmp_path / "a", frames=3)
    b = generate_shapes_video(5, 5, tmp_path / "b", frames=3)
    assert dir_fingerprint(a) == dir_fingerprint(b)


def test_manifest_counts(shapes_dir, shapes):
    manifest = json.loads((Path(shapes_dir) / "manifest.json").read_text())
    assert manifest["record_count"] == 24
    assert sum(manifest["kind_counts"].values()) == 24
    assert len(shapes) == 24
    assert manifest["height"] % manifest["patch_size"] == 0


def test_annotation_boxes_bound_grid_cells(shapes):
    grid = shapes.manifest["grid"]
    for s in shapes.samples:
        for ann in s.annotations:
            if ann.kind != "object":
                continue
            # cell-aligned: corners land on grid lines
            x1, y1, x2, y2 = ann.box.corners()
            for v in (x1, y1, x2, y2):
                assert v == pytest.approx(round(v * grid) / grid, abs=1e-9)
            assert ann.box.w == pytest.approx(1.0 / grid)


def test_boxes_contain_rendered_pixels(shapes):
    for s in shapes.samples[:8]:
        image = s.frames[0]
        lit = np.nonzero(image.sum(axis=2) > 0)
        ys, xs = lit[0] / image.shape[0], lit[1] / image.shape[1]
        object_boxes = [a.box for a in s.annotations if a.kind == "object"]
        if not object_boxes:
            continue
        for y, x in zip(ys, xs):
            assert any(bx.corners()[0] <= x < bx.corners()[2] and
                       bx.corners()[1] <= y < bx.corners()[3] for bx in object_boxes)


def test_captions_unique_and_in_vocab(shapes):
    captions = [s.caption for s in shapes.samples if s.caption]
    assert len(set(captions)) == len(captions)
    for s in shapes.samples:
        for text in filter(None, [s.caption] + [a.text for a in s.annotations]):
            seq = tokenize(text, shapes.vocab, 64)
            assert UNK not in seq.ids


def test_kept_annotations_select_patches(shapes):
    grid_patches = shapes.manifest["height"] // shapes.manifest["patch_size"]
    for s in shapes.samples:
        for ann in s.annotations:
            assert len(concept_patch_ids(ann.box, grid_patches)) >= 1


def test_caption_flavor_rates(tmp_path):
    out = generate_shapes_world(3, 60, tmp_path / "mix", caption_only_rate=0.3,
                                annotation_only_rate=0.3)
    ds = Dataset.load(out)
    kinds = {k: sum(1 for s in ds.samples if s.kind == k)
             for k in ("caption", "annotated", "full")}
    assert all(v > 0 for v in kinds.values())


def test_video_direction_matches_box_motion(videos):
    lex_dirs = {"right": (1, 0), "left": (-1, 0), "up": (0, -1), "down": (0, 1)}
    for s in videos.samples:
        word = s.caption.split()[-1]
        dx, dy = lex_dirs[word]
        first, last = s.frame_boxes[0], s.frame_boxes[-1]
        if dx:
            assert np.sign(last.cx - first.cx) == dx
        if dy:
            assert np.sign(last.cy - first.cy) == dy
        assert not s.annotations
        assert len(s.frames) == len(s.timestamps)


def test_single_frame_video_is_image_sample(tmp_path):
    out = generate_shapes_video(2, 3, tmp_path / "v1", frames=1)
    ds = Dataset.load(out)
    assert all(not s.is_video for s in ds.samples)
    assert all(len(s.frames) == 1 for s in ds.samples)


def test_parallel_lexicons_align(tmp_path):
    en = build_vocab("en")
    de = build_vocab("de")
    assert len(en) == len(de)
    out = generate_shapes_world(3, 6, tmp_path / "de", lang="de")
    ds = Dataset.load(out)
    for s in ds.samples:
        seq = tokenize(s.caption, ds.vocab, 32)
        assert UNK not in seq.ids


# ---------------------------------------------------------------------------
# filters
# ---------------------------------------------------------------------------

def base_record(**kw):
    rec = {"id": "r0", "media": ["media/x.ppm"], "caption": "a red circle",
           "annotations": []}
    rec.update(kw)
    return rec


def test_filter_invalid_box_fields():
    rec = base_record(annotations=[
        {"cx": -0.1, "cy": 0.5, "w": 0.2, "h": 0.2, "text": "red circle", "kind": "object"},
        {"cx": 0.5, "cy": 0.5, "w": 0.5, "h": 0.5, "text": "blue square", "kind": "object"},
    ])
    kept, report = validate_and_filter([rec], image_size=32, patch_size=8)
    assert len(kept[0]["annotations"]) == 1
    assert report.counts == {"invalid": 1}


def test_filter_sub_patch_box():
    # patch is 8x8=64 px^2 of a 32x32 image; half that area must drop
    side = (0.5 * 64 / (32 * 32)) ** 0.5
    rec = base_record(annotations=[
        {"cx": 0.5, "cy": 0.5, "w": side, "h": side, "text": "red circle", "kind": "object"},
        {"cx": 0.5, "cy": 0.5, "w": 0.25, "h": 0.25, "text": "blue square", "kind": "object"},
    ])
    kept, report = validate_and_filter([rec], image_size=32, patch_size=8)
    assert report.counts == {"too-small": 1}
    assert len(kept[0]["annotations"]) == 1
    # exactly one patch of area is kept (strictly-less rule)
    exact = {"cx": 0.5, "cy": 0.5, "w": 0.25, "h": 0.25, "text": "x", "kind": "object"}
    kept2, report2 = validate_and_filter([base_record(annotations=[exact])],
                                         image_size=32, patch_size=8)
    assert report2.counts == {}


def test_filter_region_jaccard_hand_case():
    # "red circle top left" vs "red circle at top left": 4/5 = 0.8 > 0.75
    rec = base_record(annotations=[
        {"cx": 0.5, "cy": 0.5, "w": 0.5, "h": 0.5, "text": "red circle top left",
         "kind": "region"},
        {"cx": 0.5, "cy": 0.5, "w": 0.5, "h": 0.5, "text": "red circle at top left",
         "kind": "region"},
    ])
    kept, report = validate_and_filter([rec], image_size=32, patch_size=8)
    assert report.counts == {"overlap": 1}
    assert [a["text"] for a in kept[0]["annotations"]] == ["red circle top left"]


def test_filter_keeps_distinct_regions():
    rec = base_record(annotations=[
        {"cx": 0.5, "cy": 0.5, "w": 0.5, "h": 0.5,
         "text": "small red circle left of big blue square", "kind": "region"},
        {"cx": 0.5, "cy": 0.5, "w": 0.5, "h": 0.5,
         "text": "big blue square left of small green triangle", "kind": "region"},
    ])
    kept, report = validate_and_filter([rec], image_size=32, patch_size=8)
    assert len(kept[0]["annotations"]) == 2


def test_filter_drops_emptied_record():
    rec = base_record(caption=None, annotations=[
        {"cx": 2.0, "cy": 0.5, "w": 0.2, "h": 0.2, "text": "red circle", "kind": "object"},
    ])
    kept, report = validate_and_filter([rec], image_size=32, patch_size=8)
    assert kept == []
    assert report.counts == {"invalid": 1, "empty": 1}


def test_filter_aspect_and_min_edge():
    wide = base_record(height=10, width=40)
    kept, report = validate_and_filter([wide], image_size=32, patch_size=8)
    assert kept == [] and report.counts == {"aspect": 1}
    small = base_record(height=16, width=16)
    kept, report = validate_and_filter([small], image_size=32, patch_size=8, min_edge=224)
    assert kept == [] and report.counts == {"small-image": 1}
    kept, _ = validate_and_filter([small], image_size=32, patch_size=8)  # disabled default
    assert len(kept) == 1


def test_filter_idempotent(shapes_dir):
    root = Path(shapes_dir)
    records = [json.loads(ln) for ln in
               (root / "records.jsonl").read_text().splitlines() if ln]
    once, _ = validate_and_filter(records, image_size=32, patch_size=8)
    twice, report = validate_and_filter(once, image_size=32, patch_size=8)
    assert once == twice
    assert report.counts == {}


def test_rejection_report_format(tmp_path):
    rec = base_record(annotations=[
        {"cx": -0.1, "cy": 0.5, "w": 0.2, "h": 0.2, "text": "x", "kind": "object"}])
    _, report = validate_and_filter([rec], image_size=32, patch_size=8)
    report.write(tmp_path / "rej.jsonl")
    lines = [json.loads(ln) for ln in (tmp_path / "rej.jsonl").read_text().splitlines()]
    assert lines == [{"id": "r0", "rule": "invalid"}]


# ---------------------------------------------------------------------------
# batch assembly
# ---------------------------------------------------------------------------

def test_single_kind_mix(tmp_path):
    out = generate_shapes_world(21, 30, tmp_path / "c", caption_only_rate=1.0)
    ds = Dataset.load(out)
    batch = assemble_batch([(ds, 1.0)], 16, np.random.default_rng(0))
    assert all(s.kind == "caption" for s in batch)


def test_mix_proportions_monte_carlo(tmp_path):
    cap = Dataset.load(generate_shapes_world(22, 20, tmp_path / "cap", caption_only_rate=1.0))
    ann = Dataset.load(generate_shapes_world(23, 20, tmp_path / "ann", annotation_only_rate=1.0))
    rng = np.random.default_rng(1)
    counts = {"caption": 0, "annotated": 0}
    draws = 20
    for _ in range(draws):
        for s in assemble_batch([(cap, 1.0), (ann, 1.0)], 1024, rng):
            counts[s.kind] += 1
    frac = counts["caption"] / (draws * 1024)
    assert abs(frac - 0.5) < 0.05


def test_same_seed_same_batches(shapes):
    a = assemble_batch([(shapes, 1.0)], 8, np.random.default_rng(9))
    b = assemble_batch([(shapes, 1.0)], 8, np.random.default_rng(9))
    assert [s.source_id for s in a] == [s.source_id for s in b]


def test_empty_mix_rejected(shapes):
    with pytest.raises(ValueError):
        assemble_batch([], 4, np.random.default_rng(0))
    with pytest.raises(ValueError):
        assemble_batch([(shapes, -1.0)], 4, np.random.default_rng(0))


def test_mismatched_dimensions_rejected(tmp_path, shapes):
    other = Dataset.load(generate_shapes_world(2, 4, tmp_path / "big", image_size=64,
                                               grid=2, patch_size=8))
    with pytest.raises(ValueError):
        assemble_batch([(shapes, 1.0), (other, 1.0)], 4, np.random.default_rng(0))
