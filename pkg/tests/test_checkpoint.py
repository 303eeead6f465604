import json

import numpy as np
import pytest

import checkpoint
from checkpoint import MAGIC, VERSION, CheckpointError
from cl_strategies import finalize_task, initial_state, update_buffer
from detector import DetectorSpec, StageSpec, build_detector
from scenario_data import generate_dataset, parse_scenario, split_tasks

TINY = DetectorSpec(
    num_classes=2,
    stages=(StageSpec("stage1", (2,)), StageSpec("stage2", (3,)), StageSpec("stage3", (4,))),
    head_trunk=(4,),
)


@pytest.fixture(scope="module")
def tasks():
    return split_tasks(generate_dataset(40, 4, seed=6), parse_scenario("2p2"))


def same_detector(a, b):
    assert a.spec == b.spec
    assert (a.frozen_boundary, a.split_point, a.upper_only) == (b.frozen_boundary, b.split_point, b.upper_only)
    assert list(a.params) == list(b.params)
    for name in a.params:
        assert np.array_equal(a.params[name].data, b.params[name].data)
        assert a.params[name].requires_grad == b.params[name].requires_grad


def test_round_trip_with_upper_only_teacher(tmp_path, tasks):
    model, state = finalize_task(initial_state("latent_distill", 2), build_detector(TINY, 0), tasks[0], 2, seed=3)
    path = checkpoint.save(tmp_path / "ckpt" / "task_0.ckpt", model, state, {"task": 0, "rows": [{"a": "1"}]})
    assert path.read_bytes()[:8] == MAGIC
    assert not list(tmp_path.glob("ckpt/*.tmp"))

    ckpt = checkpoint.load(path)
    same_detector(ckpt.model, model)
    same_detector(ckpt.state.teacher, state.teacher)
    assert ckpt.state.kind is state.kind and ckpt.state.alpha == state.alpha
    assert ckpt.state.old_range == state.old_range and ckpt.state.new_range == state.new_range
    assert ckpt.state.task_index == 1 and ckpt.state.buffer is None
    assert ckpt.metadata == {"task": 0, "rows": [{"a": "1"}]}


@pytest.mark.parametrize("kind", ["replay", "latent_replay"])
def test_round_trip_keeps_buffer_entries_bitwise(tmp_path, tasks, kind):
    model = build_detector(TINY, 1)
    state = update_buffer(initial_state(kind, 2, capacity=6), tasks[0], seed=2, model=model)
    ckpt = checkpoint.load(checkpoint.save(tmp_path / "b.ckpt", model, state))
    restored = ckpt.state.buffer
    assert (restored.capacity, restored.latent) == (6, kind == "latent_replay")
    assert restored.byte_size == state.buffer.byte_size
    for a, b in zip(restored.entries, state.buffer.entries):
        assert (a.task, a.image_id, a.class_range, a.annotations, a.split_point) == \
               (b.task, b.image_id, b.class_range, b.annotations, b.split_point)
        if kind == "replay":
            assert a.image.dtype == np.uint8 and np.array_equal(a.image, b.image)
        else:
            assert np.array_equal(a.latent, b.latent)


@pytest.fixture
def saved(tmp_path):
    return checkpoint.save(tmp_path / "m.ckpt", build_detector(TINY, 0), initial_state("finetune", 2))


def test_truncated_files_are_rejected(saved):
    raw = saved.read_bytes()
    saved.write_bytes(raw[:-1])
    with pytest.raises(CheckpointError, match="payload"):
        checkpoint.load(saved)
    saved.write_bytes(raw[:10])
    with pytest.raises(CheckpointError, match="truncated"):
        checkpoint.load(saved)
    saved.write_bytes(raw[:40])
    with pytest.raises(CheckpointError, match="truncated header"):
        checkpoint.load(saved)


def test_bad_magic_and_version(saved):
    raw = saved.read_bytes()
    saved.write_bytes(b"NOTACKPT" + raw[8:])
    with pytest.raises(CheckpointError, match="magic"):
        checkpoint.load(saved)
    saved.write_bytes(raw[:8] + (VERSION + 1).to_bytes(4, "little") + raw[12:])
    with pytest.raises(CheckpointError, match="version"):
        checkpoint.load(saved)


def test_flipped_payload_byte_fails_the_checksum(saved):
    raw = bytearray(saved.read_bytes())
    raw[-3] ^= 0xFF
    saved.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="checksum"):
        checkpoint.load(saved)


def rewrite_header(path, edit):
    raw = path.read_bytes()
    n = int.from_bytes(raw[12:20], "little")
    header = json.loads(raw[20:20 + n])
    edit(header)
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    path.write_bytes(raw[:12] + len(blob).to_bytes(8, "little") + blob + raw[20 + n:])


def test_edited_spec_fails_the_digest(saved):
    rewrite_header(saved, lambda h: h["model"]["spec"].update(head_trunk=[5]))
    with pytest.raises(CheckpointError, match="digest"):
        checkpoint.load(saved)


def test_missing_file(tmp_path):
    with pytest.raises(CheckpointError, match="not found"):
        checkpoint.load(tmp_path / "none.ckpt")


@pytest.mark.parametrize("key", ["payload_sha256", "payload_bytes", "model", "state", "metadata"])
def test_header_missing_a_field_is_a_checkpoint_error(saved, key):
    rewrite_header(saved, lambda h: h.pop(key))
    with pytest.raises(CheckpointError, match=key):
        checkpoint.load(saved)


def test_header_with_a_bad_state_block(saved):
    rewrite_header(saved, lambda h: h["state"].pop("old_range"))
    with pytest.raises(CheckpointError, match="malformed header"):
        checkpoint.load(saved)
