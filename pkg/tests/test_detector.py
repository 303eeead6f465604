import math

import numpy as np
import pytest

from autodiff import Tape, Tensor, conv2d, relu
from detector import (DEFAULT_STAGES, DetectorError, DetectorSpec, HeadOutputs, Latent, StageSpec, build_detector,
                      count_params, decode_detections, expand_head, forward, latent_forward, latent_shape, layers,
                      set_freeze, set_split, snapshot_teacher, upper_forward)

TINY = DetectorSpec(
    num_classes=2,
    stages=(StageSpec("stage1", (2,)), StageSpec("stage2", (3,)), StageSpec("stage3", (4,))),
    head_trunk=(4,),
)


def images(n, seed=0):
    return Tensor(np.random.default_rng(seed).uniform(size=(n, 3, 64, 64)))


def test_build_is_deterministic_and_seed_sensitive():
    a, b, c = build_detector(TINY, 3), build_detector(TINY, 3), build_detector(TINY, 4)
    assert list(a.params) == list(b.params)
    assert all(np.array_equal(a.params[n].data, b.params[n].data) for n in a.params)
    assert any(not np.array_equal(a.params[n].data, c.params[n].data) for n in a.params)


def test_parameter_names_follow_layers():
    d = build_detector(TINY, 0)
    assert list(d.params)[:2] == ["stage1.conv0.weight", "stage1.conv0.bias"]
    assert "trunk.conv0.weight" in d.params and "head.cls.bias" in d.params
    assert np.array_equal(d.params["head.cls.bias"].data, [-4.0, -4.0])


def test_unknown_boundaries_and_bad_specs_are_rejected():
    with pytest.raises(DetectorError):
        build_detector(TINY, 0, frozen_boundary="stage9")
    with pytest.raises(DetectorError):
        build_detector(TINY, 0, split_point="neck")
    with pytest.raises(DetectorError):
        DetectorSpec(num_classes=2, grid=4).validate()
    with pytest.raises(DetectorError):
        DetectorSpec(num_classes=2, stages=(StageSpec("a", (2,)), StageSpec("a", (2,)), StageSpec("b", (2,)))).validate()
    with pytest.raises(DetectorError):
        DetectorSpec(num_classes=0).validate()


def test_default_spec_has_three_stages_of_two_convs():
    spec = DetectorSpec(num_classes=4)
    assert [s.name for s in DEFAULT_STAGES] == ["stage1", "stage2", "stage3"]
    assert spec.boundaries == ("input", "stage1", "stage2", "stage3")
    strides = [layer.stride for layer in layers(spec) if layer.name.startswith("stage")]
    assert strides == [2, 1, 2, 1, 2, 1]
    assert latent_shape(spec, "stage3") == (32, 8, 8)


def test_forward_shapes_and_wrong_input():
    d = build_detector(TINY, 0)
    out = forward(d, images(2))
    assert out.class_logits.shape == (2, 2, 8, 8)
    assert out.box_regress.shape == (2, 4, 8, 8)
    assert out.trunk_features.shape == (2, 4, 8, 8)
    assert (out.box_regress.data >= 0).all()
    with pytest.raises(DetectorError):
        forward(d, Tensor(np.zeros((1, 3, 32, 32))))


def test_zero_image_gives_head_bias_logits():
    d = build_detector(DetectorSpec(num_classes=3), 0)
    out = forward(d, Tensor(np.zeros((1, 3, 64, 64))))
    assert np.all(out.class_logits.data == -4.0)


def test_batch_of_two_equals_two_batches_of_one():
    d = build_detector(TINY, 1)
    x = images(2, seed=5)
    both = forward(d, x).class_logits.data
    one = forward(d, Tensor(x.data[:1])).class_logits.data
    two = forward(d, Tensor(x.data[1:])).class_logits.data
    assert np.array_equal(both, np.concatenate([one, two]))


@pytest.mark.parametrize("split", ["input", "stage1", "stage2", "stage3"])
def test_forward_equals_upper_of_latent_bitwise(split):
    d = build_detector(TINY, 2, split_point=split)
    x = images(2, seed=1)
    full = forward(d, x)
    composed = upper_forward(d, latent_forward(d, x))
    assert np.array_equal(full.class_logits.data, composed.class_logits.data)
    assert np.array_equal(full.box_regress.data, composed.box_regress.data)


def test_latent_at_input_is_the_images_and_at_top_is_backbone_output():
    x = images(1, seed=2)
    d = build_detector(TINY, 0, split_point="input")
    assert np.array_equal(latent_forward(d, x).features.data, x.data)

    d = set_split(d, "stage3")
    h = x
    for layer in layers(TINY):
        if layer.name.startswith("stage"):
            h = relu(conv2d(h, d.params[f"{layer.name}.weight"], layer.stride, layer.pad, d.params[f"{layer.name}.bias"]))
    assert np.array_equal(latent_forward(d, x).features.data, h.data)


def test_frozen_split_latent_is_detached():
    x = images(1)
    d = build_detector(TINY, 0)
    with Tape():
        assert latent_forward(d, x).features.requires_grad
        frozen = set_freeze(d, "stage3")
        assert not latent_forward(frozen, x).features.requires_grad


def test_upper_forward_checks_split_and_shape():
    d = build_detector(TINY, 0)
    with pytest.raises(DetectorError):
        upper_forward(d, Latent(Tensor(np.zeros((1, 4, 8, 8))), "stage2"))
    with pytest.raises(DetectorError):
        upper_forward(d, Latent(Tensor(np.zeros((1, 5, 8, 8))), "stage3"))


def test_upper_only_teacher_shares_the_student_latent():
    d = build_detector(TINY, 0)
    teacher = snapshot_teacher(d, upper_only=True)
    assert all(not p.requires_grad for p in teacher.params.values())
    assert not any(n.startswith("stage") for n in teacher.params)
    x = images(2)
    z = latent_forward(d, x)
    t_out, s_out = upper_forward(teacher, z), upper_forward(d, z)
    assert np.array_equal(t_out.class_logits.data, s_out.class_logits.data)
    with pytest.raises(DetectorError):
        forward(teacher, x)


def test_expand_head_rejects_non_positive_k():
    d = build_detector(TINY, 0)
    with pytest.raises(DetectorError):
        expand_head(d, 0, seed=1)


def test_expand_head_keeps_existing_channels_bitwise():
    d = build_detector(TINY, 0)
    x = images(2, seed=3)
    before = forward(d, x).class_logits.data
    grown = expand_head(expand_head(d, 1, seed=1), 2, seed=2)
    after = forward(grown, x).class_logits.data
    assert after.shape[1] == 5 and grown.spec.num_classes == 5
    assert np.array_equal(after[:, :2], before)


def test_new_channel_starts_near_sigma_of_minus_four():
    d = expand_head(build_detector(DetectorSpec(num_classes=2), 0), 1, seed=9)
    out = forward(d, Tensor(np.zeros((1, 3, 64, 64))))
    p = 1.0 / (1.0 + np.exp(-out.class_logits.data[:, 2]))
    assert np.allclose(p, 1.0 / (1.0 + math.exp(4.0)))
    assert p.max() == pytest.approx(0.018, abs=1e-3)


def test_set_freeze_counts():
    d = build_detector(DetectorSpec(num_classes=4), 0)
    total = count_params(d.params)
    assert count_params(d.params, set_freeze(d, "none").trainable_names()) == total
    top = set_freeze(d, "stage3")
    upper = [n for n in d.params if n.startswith(("trunk.", "head."))]
    assert sorted(top.trainable_names()) == sorted(upper)

    counts = [count_params(d.params, set_freeze(d, b).trainable_names()) for b in d.spec.boundaries]
    assert counts[0] == total
    assert all(a > b for a, b in zip(counts, counts[1:]))
    with pytest.raises(DetectorError):
        set_freeze(d, "neck")


def head(logits, box, stride=8):
    return HeadOutputs(Tensor(logits), Tensor(box), Tensor(np.zeros((logits.shape[0], 1, 8, 8))), stride)


def test_decode_empty_when_below_threshold():
    out = head(np.full((1, 2, 8, 8), -10.0), np.zeros((1, 4, 8, 8)))
    assert decode_detections(out, 0.05, 0.6) == [[]]


def test_decode_one_cell_matches_hand_arithmetic():
    logits = np.full((1, 2, 8, 8), -10.0)
    box = np.zeros((1, 4, 8, 8))
    logits[0, 1, 2, 3] = 5.0
    box[0, :, 2, 3] = (4, 6, 8, 2)  # cell center (28, 20)
    (dets,) = decode_detections(head(logits, box), 0.05, 0.6)
    assert len(dets) == 1
    assert dets[0].class_id == 2
    assert dets[0].box == (24.0, 14.0, 36.0, 22.0)
    assert dets[0].score == pytest.approx(1.0 / (1.0 + math.exp(-5.0)))


def test_decode_nms_keeps_the_higher_score_per_class():
    logits = np.full((1, 2, 8, 8), -10.0)
    box = np.zeros((1, 4, 8, 8))
    logits[0, 0, 2, 3], box[0, :, 2, 3] = 5.0, (4, 6, 8, 2)
    logits[0, 0, 2, 4], box[0, :, 2, 4] = 3.0, (12, 6, 0.5, 2)  # almost the same box
    logits[0, 1, 2, 4] = 4.0
    (dets,) = decode_detections(head(logits, box), 0.05, 0.6)
    by_class = {}
    for det in dets:
        by_class.setdefault(det.class_id, []).append(det)
    assert len(by_class[1]) == 1 and by_class[1][0].score == pytest.approx(1.0 / (1.0 + math.exp(-5.0)))
    assert len(by_class[2]) == 1
    assert [d.score for d in dets] == sorted((d.score for d in dets), reverse=True)


def test_decode_clips_to_canvas_and_drops_degenerate_boxes():
    logits = np.full((1, 1, 8, 8), -10.0)
    box = np.zeros((1, 4, 8, 8))
    logits[0, 0, 0, 0], box[0, :, 0, 0] = 2.0, (30, 30, 3, 3)
    logits[0, 0, 7, 7] = 2.0  # zero-size box
    (dets,) = decode_detections(head(logits, box), 0.05, 0.6)
    assert [d.box for d in dets] == [(0.0, 0.0, 7.0, 7.0)]


def test_decode_rejects_thresholds_outside_unit_interval():
    out = head(np.zeros((1, 1, 8, 8)), np.zeros((1, 4, 8, 8)))
    with pytest.raises(DetectorError):
        decode_detections(out, 0.0, 0.5)
