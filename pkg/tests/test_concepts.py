import json
from pathlib import Path

import numpy as np
import pytest

from oracles import box_iou, reference_tracks
from videotcav.concepts import (
    Detection,
    DetectionFormatError,
    DetectionFrame,
    Track,
    build_spatial_concept,
    build_spatiotemporal_concept,
    build_tracks,
    center_offsets,
    iou,
    load_detection_file,
    mine_concepts,
    parse_detections,
    read_concept_manifest,
    sample_random_sets,
    subsample_indices,
    write_concept_manifest,
)
from videotcav.core_types import ConceptKind, VideoClip, concept_set_violations, is_static
from videotcav.synthetic import generate_concept_scene, generate_random_pool

GOLDEN = json.loads((Path(__file__).parent / "fixtures" / "concept_golden.json").read_text())


def _frames(*per_frame):
    """``per_frame[i]`` is a list of (label, conf, bbox) for frame i."""
    return [DetectionFrame(i, tuple(Detection(l, c, tuple(b)) for l, c, b in dets)) for i, dets in enumerate(per_frame)]


def _as_oracle_input(frames):
    return [(f.frame_index, [(d.class_label, d.confidence, d.bbox) for d in f.detections]) for f in frames]


def _track_boxes(tracks):
    return [[(f, tuple(b)) for f, b in t.boxes] for t in tracks]


# ---------------------------------------------------------------------------
# ingestion
# ---------------------------------------------------------------------------


def test_parse_valid_and_sorted():
    raw = {
        "video_id": "v",
        "width": 10,
        "height": 10,
        "frames": [
            {"frame_index": 1, "detections": []},
            {"frame_index": 0, "detections": [{"label": "person", "confidence": 0.9, "bbox": [0, 0, 5, 5]}]},
        ],
    }
    det = parse_detections(raw)
    assert [f.frame_index for f in det.frames] == [0, 1]
    assert det.frames[0].detections[0] == Detection("person", 0.9, (0.0, 0.0, 5.0, 5.0))


@pytest.mark.parametrize(
    "bbox, message",
    [([5, 0, 2, 5], "inverted bbox at frame 0"), ([0, 0, 11, 5], "bbox outside frame"), ([0, 0, "x", 1], "malformed")],
)
def test_parse_bad_boxes(bbox, message):
    raw = {"video_id": "v", "width": 10, "height": 10, "frames": [{"frame_index": 0, "detections": [{"label": "a", "confidence": 0.5, "bbox": bbox}]}]}
    with pytest.raises(DetectionFormatError, match=message):
        parse_detections(raw)


def test_parse_header_and_confidence_errors(tmp_path):
    with pytest.raises(DetectionFormatError, match="header"):
        parse_detections({"frames": []})
    bad_conf = {"video_id": "v", "width": 4, "height": 4, "frames": [{"frame_index": 0, "detections": [{"label": "a", "confidence": 1.5, "bbox": [0, 0, 1, 1]}]}]}
    with pytest.raises(DetectionFormatError, match="confidence"):
        parse_detections(bad_conf)
    path = tmp_path / "broken.json"
    path.write_text("{not json")
    with pytest.raises(DetectionFormatError, match="broken.json"):
        load_detection_file(path)


# ---------------------------------------------------------------------------
# tracking
# ---------------------------------------------------------------------------


def test_iou_examples():
    assert iou((0, 0, 2, 2), (0, 0, 2, 2)) == 1.0
    assert iou((0, 0, 2, 2), (2, 0, 4, 2)) == 0.0
    assert iou((0, 0, 2, 2), (1, 0, 3, 2)) == pytest.approx(1 / 3)
    rng = np.random.default_rng(0)
    for _ in range(200):
        a = np.sort(rng.uniform(0, 10, (2, 2)), axis=0).T.ravel()[[0, 2, 1, 3]]
        b = np.sort(rng.uniform(0, 10, (2, 2)), axis=0).T.ravel()[[0, 2, 1, 3]]
        assert iou(a, b) == pytest.approx(box_iou(a, b))
        assert iou(a, b) == pytest.approx(iou(b, a))


def test_static_box_single_track():
    frames = _frames(*[[("person", 0.9, (1, 1, 5, 5))]] * 10)
    tracks = build_tracks(frames, "person", 0.5)
    assert len(tracks) == 1 and len(tracks[0]) == 10


def test_two_disjoint_boxes_never_swapped():
    rng = np.random.default_rng(1)
    per_frame = []
    for t in range(10):
        dets = [("ball", float(rng.uniform(0.3, 1)), (t, 0, t + 4, 4)), ("ball", float(rng.uniform(0.3, 1)), (t, 10, t + 4, 14))]
        per_frame.append(dets[:: 1 if t % 2 else -1])
    tracks = build_tracks(_frames(*per_frame), "ball", 0.5)
    assert len(tracks) == 2
    for t in tracks:
        ys = {b[1] for _, b in t.boxes}
        assert len(ys) == 1 and len(t) == 10


def test_gap_rule_splits_tracks():
    box = ("person", 0.9, (0, 0, 4, 4))
    per_frame = [[box]] * 3 + [[]] * 2 + [[box]] * 3
    assert [len(t) for t in build_tracks(_frames(*per_frame), "person", 0.5, max_gap=1)] == [3, 3]
    assert [len(t) for t in build_tracks(_frames(*per_frame), "person", 0.5, max_gap=2)] == [6]


def test_tracker_label_filter_and_empty():
    assert build_tracks([], "person") == []
    assert build_tracks(_frames([("dog", 0.9, (0, 0, 1, 1))]), "person") == []
    with pytest.raises(ValueError):
        build_tracks([], "person", iou_threshold=1.0)


def test_tracker_matches_reference_on_random_instances():
    rng = np.random.default_rng(2)
    for _ in range(300):
        n_frames = int(rng.integers(1, 11))
        per_frame = []
        for _t in range(n_frames):
            dets = []
            for _b in range(int(rng.integers(0, 4))):
                x, y = (int(v) for v in rng.integers(0, 6, 2))
                w, h = (int(v) for v in rng.integers(2, 5, 2))
                dets.append((str(rng.choice(["a", "b"])), float(rng.choice([0.5, 0.7, 0.9])), (x, y, x + w, y + h)))
            per_frame.append(dets)
        frames = _frames(*per_frame)
        thr = float(rng.choice([0.2, 0.5]))
        gap = int(rng.integers(0, 3))
        got = _track_boxes(build_tracks(frames, "a", thr, gap))
        assert got == reference_tracks(_as_oracle_input(frames), "a", thr, gap)


# ---------------------------------------------------------------------------
# builders
# ---------------------------------------------------------------------------


def _index_video(shape):
    t, h, w = shape
    idx = np.arange(t * h * w, dtype=np.float32).reshape(t, h, w)
    return VideoClip("idx", np.repeat((idx / 255.0)[..., None], 3, axis=-1))


def test_spatiotemporal_golden_centring():
    g = GOLDEN["centring"]
    video = _index_video(g["video_shape"])
    track = Track("t", "x", [(i, tuple(b)) for i, b in enumerate(g["boxes"])], [1.0] * len(g["boxes"]))
    assert list(track.max_box) == g["max_box"]
    clip = build_spatiotemporal_concept(video, track, T=len(g["boxes"]))
    for t, grid in enumerate(g["grids"]):
        expected = np.array(grid, np.float32)
        expected = np.where(expected < 0, 0.0, expected / np.float32(255.0)).astype(np.float32)
        assert clip.frames[t, :, :, 0].tobytes() == expected.tobytes(), f"frame {t}"
    from videotcav.concepts import crop_size

    assert [list(center_offsets(crop_size(b), tuple(g["max_box"]))) for b in g["boxes"]] == g["offsets"]


def test_ten_in_twenty_offset():
    g = GOLDEN["ten_in_twenty"]
    frames = np.random.default_rng(3).uniform(0, 1, (2, 24, 24, 3)).astype(np.float32)
    video = VideoClip("v", frames)
    track = Track("t", "x", [(0, tuple(g["small"])), (1, tuple(g["large"]))], [1.0, 1.0])
    clip = build_spatiotemporal_concept(video, track, T=2, pad_value=0.0)
    assert clip.shape == (2, 20, 20, 3)
    ox, oy = g["offset"]
    assert clip.frames[0, oy : oy + 10, ox : ox + 10].tobytes() == frames[0, 2:12, 2:12].tobytes()
    mask = np.ones((20, 20), bool)
    mask[oy : oy + 10, ox : ox + 10] = False
    assert not clip.frames[0][mask].any()
    assert clip.frames[1].tobytes() == frames[1, :20, :20].tobytes()


@pytest.mark.parametrize("case", GOLDEN["subsample"], ids=lambda c: f"{c['length']}to{c['T']}")
def test_subsample_golden(case):
    assert subsample_indices(case["length"], case["T"]).tolist() == case["indices"]


def test_subsample_enumeration_oracle():
    for length in range(1, 40):
        for T in range(1, length + 1):
            got = subsample_indices(length, T).tolist()
            if T == 1:
                assert got == [0]
                continue
            # exact rational position (length-1)*i/(T-1), halves rounded up
            want = [((length - 1) * i * 2 + (T - 1)) // (2 * (T - 1)) for i in range(T)]
            assert got == want
            assert all(b > a for a, b in zip(got, got[1:]))
    with pytest.raises(ValueError, match="shorter than T"):
        subsample_indices(3, 4)


def test_equal_boxes_no_padding():
    frames = np.random.default_rng(4).uniform(0, 1, (5, 12, 12, 3)).astype(np.float32)
    track = Track("t", "x", [(i, (i, 1, i + 6, 7)) for i in range(5)], [1.0] * 5)
    clip = build_spatiotemporal_concept(VideoClip("v", frames), track, T=5, pad_value=0.3)
    for t in range(5):
        assert clip.frames[t].tobytes() == frames[t, 1:7, t : t + 6].tobytes()


def test_spatiotemporal_errors():
    video = VideoClip("v", np.zeros((3, 8, 8, 3), np.float32))
    with pytest.raises(ValueError, match="shorter than T"):
        build_spatiotemporal_concept(video, Track("t", "x", [(0, (0, 0, 2, 2))], [1.0]), T=2)
    with pytest.raises(ValueError, match="outside"):
        build_spatiotemporal_concept(video, Track("t", "x", [(0, (0, 0, 2, 2)), (5, (0, 0, 2, 2))], [1, 1]), T=2)


def test_spatial_concept_frame_identity():
    crop = np.random.default_rng(5).uniform(0, 1, (32, 32, 3)).astype(np.float32)
    clip = build_spatial_concept(crop, T=16, out_size=(64, 64))
    assert clip.shape == (16, 64, 64, 3)
    assert all(clip.frames[t].tobytes() == clip.frames[0].tobytes() for t in range(16))
    assert is_static(clip)
    assert build_spatial_concept(crop, T=1).num_frames == 1
    black = build_spatial_concept(np.zeros((4, 4, 3)), T=3)
    assert not black.frames.any()
    with pytest.raises(ValueError, match="zero-area"):
        build_spatial_concept(np.zeros((0, 4, 3)), T=3)


# ---------------------------------------------------------------------------
# random sets, mining, manifests
# ---------------------------------------------------------------------------


def test_sample_random_sets():
    pool = generate_random_pool(40, T=2, H=8, W=8, seed=0)
    a = sample_random_sets(pool, 3, 10, exclude={pool[0].clip_id}, seed=1)
    b = sample_random_sets(pool, 3, 10, exclude={pool[0].clip_id}, seed=1)
    assert [s.clip_ids for s in a] == [s.clip_ids for s in b]
    ids = [cid for s in a for cid in s.clip_ids]
    assert len(ids) == len(set(ids)) == 30 and pool[0].clip_id not in ids
    assert all(s.kind == ConceptKind.RANDOM for s in a)
    overlapping = sample_random_sets(pool, 5, 10, seed=2)
    assert all(len(set(s.clip_ids)) == 10 for s in overlapping)
    with pytest.raises(ValueError, match="insufficient corpus"):
        sample_random_sets(pool[:5], 1, 10)


def test_mine_concepts_one_moving_square(tmp_path):
    clip, det = generate_concept_scene(seed=7)
    clip2, det2 = generate_concept_scene(seed=8)
    videos = {clip.clip_id: clip, clip2.clip_id: clip2}
    dets = {d["video_id"]: parse_detections(d) for d in (det, det2)}
    mined = mine_concepts(videos, dets, ["person"], T=16, out_size=(32, 32))
    kinds = sorted(ConceptKind(s.kind).value for s in mined.sets)
    assert kinds == ["spatial", "spatiotemporal"]
    for s in mined.sets:
        assert concept_set_violations(s) == []
        assert s.clips[0].shape == (16, 32, 32, 3)
    dynamic = next(s for s in mined.sets if s.kind == ConceptKind.SPATIOTEMPORAL)
    assert not is_static(dynamic.clips[0])
    assert mine_concepts(videos, dets, ["giraffe"], T=16, out_size=(32, 32)).sets == []

    path = write_concept_manifest(tmp_path / "concepts", mined.sets)
    back = read_concept_manifest(path)
    assert [s.name for s in back] == [s.name for s in mined.sets]
    for s, r in zip(mined.sets, back):
        assert s.kind == r.kind and s.origin == r.origin
        assert [c.frames.tobytes() for c in s.clips] == [c.frames.tobytes() for c in r.clips]
