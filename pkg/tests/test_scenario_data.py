from collections import Counter

import numpy as np
import pytest

from scenario_data import (Annotation, ClassRange, ScenarioError, TaskDataset, batch_iter, class_histogram,
                           export_dataset, generate_dataset, joint_task, load_dataset, parse_scenario, render_scene,
                           split_tasks, to_tensor)


@pytest.fixture(scope="module")
def big():
    return generate_dataset(1000, 8, seed=0)


@pytest.fixture(scope="module")
def small():
    return generate_dataset(120, 8, seed=3)


def _iou(a, b):
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / ((a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter)


def test_same_seed_gives_identical_pixels_and_boxes():
    a, b = generate_dataset(20, 8, seed=11), generate_dataset(20, 8, seed=11)
    for sa, sb in zip(a.samples, b.samples):
        assert np.array_equal(sa.image, sb.image)
        assert sa.annotations == sb.annotations
    c = generate_dataset(20, 8, seed=12)
    assert any(not np.array_equal(sa.image, sc.image) for sa, sc in zip(a.samples, c.samples))


def test_images_render_independently_of_order():
    ds = generate_dataset(10, 8, seed=5)
    alone = render_scene(7, 8, seed=5)
    assert np.array_equal(ds.samples[7].image, alone.image)


def test_class_frequencies_are_near_uniform(big):
    hist = class_histogram(big.samples)
    assert sorted(hist) == list(range(1, 9))
    mean = sum(hist.values()) / 8
    assert all(0.8 * mean <= n <= 1.2 * mean for n in hist.values())


def test_scene_invariants(small):
    for s in small.samples:
        assert s.image.shape == (64, 64, 3) and s.image.dtype == np.uint8
        assert 1 <= len(s.annotations) <= 3
        for a in s.annotations:
            x1, y1, x2, y2 = a.box
            assert 0 <= x1 < x2 <= 64 and 0 <= y1 < y2 <= 64
            assert s.image[int(y1):int(y2), int(x1):int(x2)].any()
        for i, a in enumerate(s.annotations):
            for b in s.annotations[i + 1:]:
                assert _iou(a.box, b.box) <= 0.3


def test_too_many_classes_is_rejected():
    with pytest.raises(ScenarioError):
        generate_dataset(10, 9, seed=0)


@pytest.mark.parametrize("text,counts", [
    ("8", (8,)), ("4p4", (4, 4)), ("6p2", (6, 2)), ("7p1", (7, 1)),
    ("4p1x4", (4, 1, 1, 1, 1)), ("2p2p2p2", (2, 2, 2, 2)), ("4p2x2", (4, 2, 2)),
])
def test_parse_scenario(text, counts):
    assert parse_scenario(text).counts == counts


@pytest.mark.parametrize("text", ["", "0p4", "4p", "p4", "4x2p1", "4p0x2", "four"])
def test_parse_scenario_rejects_malformed(text):
    with pytest.raises(ScenarioError):
        parse_scenario(text)


def test_single_task_split_is_the_full_dataset(small):
    (task,) = split_tasks(small, parse_scenario("8")).tasks
    assert [s.image_id for s in task.samples] == [s.image_id for s in small.samples]
    assert [s.annotations for s in task.samples] == [s.annotations for s in small.samples]
    assert task.visible == ClassRange(1, 8)


def test_4p4_filters_labels_and_keeps_old_objects_as_background(small):
    seq = split_tasks(small, parse_scenario("4p4"))
    assert seq.ranges == [ClassRange(1, 4), ClassRange(5, 8)]
    t1 = seq[1]
    assert all(a.class_id >= 5 for s in t1.samples for a in s.annotations)
    assert all(s.annotations for s in t1.samples)
    unlabeled_old = [s for s, full in zip(t1.samples, t1.full_annotations) if any(a.class_id <= 4 for a in full)]
    assert unlabeled_old


def test_label_leak_freedom(big):
    seq = split_tasks(big, parse_scenario("4p1x4"))
    for n in range(1, len(seq)):
        ids = {a.class_id for s in seq[n].samples for a in s.annotations}
        for earlier in seq.ranges[:n]:
            assert not any(c in earlier for c in ids)


def test_4p1x4_counts_match_a_brute_force_scan(big):
    seq = split_tasks(big, parse_scenario("4p1x4"))
    for task, (lo, hi) in zip(seq.tasks, [(1, 4), (5, 5), (6, 6), (7, 7), (8, 8)]):
        expected = sum(1 for s in big.samples if any(lo <= a.class_id <= hi for a in s.annotations))
        assert len(task) == expected


def test_scenario_exceeding_classes_is_rejected(small):
    with pytest.raises(ScenarioError):
        split_tasks(small, parse_scenario("4p4p1"))


def test_joint_task_accumulates_seen_classes(small):
    seq = split_tasks(small, parse_scenario("4p4"))
    joint = joint_task(seq, 1)
    assert joint.visible == ClassRange(1, 8)
    ids = {s.image_id for s in seq[0].samples} | {s.image_id for s in seq[1].samples}
    assert [s.image_id for s in joint.samples] == sorted(ids)
    assert {a.class_id for s in joint.samples for a in s.annotations} == set(range(1, 9))
    with pytest.raises(ScenarioError):
        joint_task(seq, 2)


def test_batch_iter_single_batch_is_a_permutation(small):
    task = split_tasks(small, parse_scenario("8"))[0]
    (batch,) = list(batch_iter(task, len(task) + 5, epoch_seed=1))
    assert sorted(s.image_id for s in batch) == sorted(s.image_id for s in task.samples)


def test_batch_iter_is_seeded_and_covers_the_task(small):
    task = split_tasks(small, parse_scenario("8"))[0]
    a = [[s.image_id for s in b] for b in batch_iter(task, 16, epoch_seed=4)]
    b = [[s.image_id for s in b] for b in batch_iter(task, 16, epoch_seed=4)]
    assert a == b
    assert len(a[-1]) == len(task) % 16 or len(a[-1]) == 16
    assert Counter(i for batch in a for i in batch) == Counter(s.image_id for s in task.samples)


def test_batch_iter_errors():
    empty = TaskDataset(0, ClassRange(1, 1), [], [])
    with pytest.raises(ScenarioError):
        list(batch_iter(empty, 4, 0))
    task = TaskDataset(0, ClassRange(1, 1), generate_dataset(2, 1, 0).samples, [])
    with pytest.raises(ScenarioError):
        list(batch_iter(task, 0, 0))


def test_to_tensor_layout(small):
    t = to_tensor([s.image for s in small.samples[:3]])
    assert t.shape == (3, 3, 64, 64)
    assert 0.0 <= t.data.min() and t.data.max() <= 1.0
    assert t.data[0, 1, 5, 7] == small.samples[0].image[5, 7, 1] / 255.0


def test_export_then_load_preserves_pixels_and_annotations(tmp_path, small):
    manifest = export_dataset(small, tmp_path / "data")
    assert manifest.read_text().splitlines()[1] == "# image_id class_id x1 y1 x2 y2"
    loaded = load_dataset(tmp_path / "data")
    assert loaded.num_classes == 8 and loaded.seed == 3
    assert [s.image_id for s in loaded.samples] == [s.image_id for s in small.samples]
    for a, b in zip(loaded.samples, small.samples):
        assert np.array_equal(a.image, b.image)
        assert a.annotations == b.annotations


def test_load_reports_the_bad_manifest_line(tmp_path, small):
    export_dataset(small, tmp_path)
    manifest = tmp_path / "manifest.txt"
    manifest.write_text(manifest.read_text() + "12 3 1 2 three 4\n")
    n_lines = len(manifest.read_text().splitlines())
    with pytest.raises(ScenarioError, match=f":{n_lines}:"):
        load_dataset(tmp_path)


def test_annotation_is_a_plain_tuple():
    a = Annotation(3, (1.0, 2.0, 5.0, 9.0))
    assert a.class_id == 3 and a.box[2] == 5.0
