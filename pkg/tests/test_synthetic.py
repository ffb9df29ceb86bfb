import numpy as np
import pytest

from videotcav.concepts import parse_detections
from videotcav.core_types import validate_clip
from videotcav.synthetic import (
    SyntheticSpec,
    generate_concept_scene,
    generate_random_pool,
    generate_synthetic_dataset,
    read_boxes,
    shape_x_positions,
    write_dataset,
)

SMALL = dict(T=8, H=16, W=16, shape_size=4, n_train=20, n_test=10)


def test_dataset_deterministic_and_balanced():
    a = generate_synthetic_dataset(SyntheticSpec(seed=3, **SMALL))
    b = generate_synthetic_dataset(SyntheticSpec(seed=3, **SMALL))
    assert [it.clip.frames.tobytes() for it in a.items] == [it.clip.frames.tobytes() for it in b.items]
    for split, n in (("train", 20), ("test", 10)):
        labels = [it.label for it in a.split(split)]
        assert len(labels) == n and sum(labels) == n // 2
    assert all(validate_clip(it.clip) == [] for it in a.items)
    assert a.class_names == ("left", "right")


def test_trajectory_matches_label():
    corpus = generate_synthetic_dataset(SyntheticSpec(seed=4, noise_std=0.0, **SMALL))
    for it in corpus.items:
        xs = shape_x_positions(it.clip)
        slope = np.polyfit(np.arange(len(xs)), xs, 1)[0]
        assert np.sign(slope) == (1 if it.label == 1 else -1)
        # boxes agree with the drawn pixels
        centre = (it.boxes[:, 0] + it.boxes[:, 2]) / 2 - 0.5
        np.testing.assert_allclose(xs, centre, atol=1e-9)


def test_presence_task_has_blank_class():
    corpus = generate_synthetic_dataset(SyntheticSpec(task="presence", seed=5, noise_std=0.0, **SMALL))
    for it in corpus.items:
        assert it.clip.frames.any() == (it.label == 1)


@pytest.mark.parametrize(
    "kw, message",
    [
        (dict(speed=0), "degenerate motion"),
        (dict(shape_size=12), "shape would exit frame"),
        (dict(n_train=0), "n_train"),
        (dict(task="jump"), "unknown task"),
    ],
)
def test_spec_errors(kw, message):
    with pytest.raises(ValueError, match=message):
        generate_synthetic_dataset(SyntheticSpec(**{**SMALL, **kw}))


def test_write_dataset_boxes(tmp_path):
    corpus = generate_synthetic_dataset(SyntheticSpec(seed=6, **SMALL))
    write_dataset(corpus, tmp_path)
    boxes = read_boxes(tmp_path)
    for it in corpus.items:
        assert boxes[it.clip.clip_id].tolist() == it.boxes.tolist()


def test_concept_scene_detections_cover_square():
    clip, det = generate_concept_scene(seed=9, noise_std=0.0, direction=-1)
    parsed = parse_detections(det)
    assert len(parsed.frames) == clip.num_frames
    xs = []
    for fr in parsed.frames:
        actor = next(d for d in fr.detections if d.class_label == "person")
        x1, y1, x2, y2 = (int(v) for v in actor.bbox)
        inside = clip.frames[fr.frame_index, y1:y2, x1:x2].max(axis=-1) > 0.45
        assert inside.sum() == 36
        xs.append(np.nonzero(inside.any(axis=0))[0].min() + x1)
    assert np.all(np.diff(xs) == -1)


def test_random_pool_valid_and_seeded():
    a = generate_random_pool(5, T=4, H=12, W=12, seed=1)
    b = generate_random_pool(5, T=4, H=12, W=12, seed=1)
    assert [c.frames.tobytes() for c in a] == [c.frames.tobytes() for c in b]
    assert all(validate_clip(c) == [] for c in a)
    assert len({c.clip_id for c in a}) == 5
