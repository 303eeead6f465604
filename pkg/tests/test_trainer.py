import csv
import math
from dataclasses import replace

import numpy as np
import pytest

import checkpoint
from autodiff import Tensor
from cl_strategies import LossError, finalize_task, initial_state
from config import DataConfig, ExperimentConfig, Hyperparams, ModelConfig
from detector import DetectorSpec, StageSpec, build_detector, replace_params
from scenario_data import generate_dataset, parse_scenario, split_tasks
from trainer import (CSV_FIELDS, AdamState, NonFiniteError, TrainingError, adamw_step, config_changes, derive_seed,
                     lr_at, new_adam_state, run_experiment, train_task)

TINY = DetectorSpec(
    num_classes=2,
    stages=(StageSpec("stage1", (2,)), StageSpec("stage2", (3,)), StageSpec("stage3", (4,))),
    head_trunk=(4,),
)
HP = Hyperparams(epochs_per_task=1, warmup_steps=2, t_max=1, batch_size=8)


def tiny_config(tmp_path, strategy="latent_distill", **hp):
    return ExperimentConfig(
        scenario="2p2", strategy=strategy, freeze_boundary="stage3", output_dir=str(tmp_path / strategy), seed=3,
        data=DataConfig(train_images=32, test_images=12, num_classes=4, seed=0, test_seed=1),
        model=ModelConfig(stages=((2,), (3,), (4,)), trunk=(4,)),
        hp=replace(HP, **hp),
    )


def read_csv(path):
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


@pytest.fixture(scope="module")
def tasks():
    return split_tasks(generate_dataset(32, 4, seed=0), parse_scenario("2p2"))


def test_derive_seed_is_stable_and_distinct():
    assert derive_seed(1, 2, 3) == derive_seed(1, 2, 3)
    assert len({derive_seed(0, n) for n in range(20)}) == 20


def test_adamw_first_step_closed_form():
    hp = Hyperparams(base_lr=0.1, weight_decay=0.05)
    params = {"w": Tensor([1.0, -2.0], requires_grad=True)}
    state = AdamState({"w": np.zeros(2)}, {"w": np.zeros(2)})
    new, state = adamw_step(params, {"w": np.array([1.0, 0.5])}, state, 0.1, hp)
    # first step: m_hat = g, v_hat = g^2, so the Adam move is lr * g / (|g| + eps)
    expected = [1.0 - 0.1 * 1.0 / (1.0 + 1e-8) - 0.1 * 0.05 * 1.0,
                -2.0 - 0.1 * 0.5 / (0.5 + 1e-8) + 0.1 * 0.05 * 2.0]
    np.testing.assert_allclose(new["w"].data, expected, rtol=1e-14)
    assert state.step == 1 and new["w"].requires_grad
    np.testing.assert_allclose(state.m["w"], [0.1, 0.05])
    np.testing.assert_allclose(state.v["w"], [0.001, 0.00025])


def test_adamw_zero_gradient_only_decays():
    hp = Hyperparams(weight_decay=0.05)
    params = {"w": Tensor(np.full(3, 2.0), requires_grad=True)}
    state = AdamState({"w": np.zeros(3)}, {"w": np.zeros(3)})
    new, _ = adamw_step(params, {"w": np.zeros(3)}, state, 0.01, hp)
    np.testing.assert_allclose(new["w"].data, 2.0 * (1.0 - 0.01 * 0.05), rtol=1e-14)


def test_adamw_rejects_bad_gradients():
    hp = Hyperparams()
    params = {"w": Tensor(np.ones(2), requires_grad=True)}
    state = AdamState({"w": np.zeros(2)}, {"w": np.zeros(2)})
    with pytest.raises(NonFiniteError):
        adamw_step(params, {"w": np.array([1.0, np.nan])}, state, 0.1, hp)
    with pytest.raises(TrainingError):
        adamw_step(params, {"w": np.ones(3)}, state, 0.1, hp)
    with pytest.raises(TrainingError):
        adamw_step(params, {}, state, 0.1, hp)


def test_optimizer_state_covers_trainable_parameters_only(tasks):
    model, _ = finalize_task(initial_state("latent_distill", 2), build_detector(TINY, 0), tasks[0], 2, seed=1)
    state = new_adam_state(model)
    assert sorted(state.m) == sorted(model.trainable_names()) == sorted(state.v)
    assert not any(n.startswith("stage") for n in state.m)


def test_lr_schedule():
    hp = Hyperparams(base_lr=1e-3, warmup_steps=50, t_max=30)
    assert lr_at(0, 0, hp) == pytest.approx(1e-3 / 50)
    assert lr_at(49, 0, hp) == pytest.approx(1e-3)
    assert lr_at(50, 0, hp) == pytest.approx(1e-3)
    assert lr_at(500, 15, hp) == pytest.approx(0.5e-3)
    assert lr_at(900, 30, hp) == pytest.approx(0.0, abs=1e-18)
    assert lr_at(0, 0, replace(hp, warmup_steps=0)) == 1e-3
    rates = [lr_at(10 ** 4, e, hp) for e in range(31)]
    assert all(a >= b for a, b in zip(rates, rates[1:]))
    with pytest.raises(TrainingError):
        lr_at(-1, 0, hp)


def test_zero_epochs_leave_the_model_untouched(tasks):
    model = build_detector(TINY, 0)
    trained, curves = train_task(model, initial_state("finetune", 2), tasks[0], replace(HP, epochs_per_task=0), seed=0)
    assert trained is model and curves.steps == [] and curves.epochs == []


def test_training_moves_only_the_trainable_parameters(tasks):
    model, state = finalize_task(initial_state("latent_distill", 2), build_detector(TINY, 0), tasks[0], 2, seed=1)
    trained, curves = train_task(model, state, tasks[1], HP, seed=5)
    assert len(curves.steps) == math.ceil(len(tasks[1]) / HP.batch_size) and len(curves.epochs) == 1
    for name, p in model.params.items():
        moved = not np.array_equal(p.data, trained.params[name].data)
        assert moved == p.requires_grad, name
    assert all(math.isfinite(r["total"]) for r in curves.steps)
    assert curves.steps[0]["lr"] == pytest.approx(HP.base_lr / HP.warmup_steps)


@pytest.mark.parametrize("strategy", ["latent_distill", "sid", "lwf"])
def test_teacher_is_untouched_by_a_task_of_training(tasks, strategy):
    model, state = finalize_task(initial_state(strategy, 2), build_detector(TINY, 0), tasks[0], 2, seed=1)
    before = {n: np.array(p.data) for n, p in state.teacher.params.items()}
    train_task(model, state, tasks[1], replace(HP, epochs_per_task=2), seed=5)
    assert sorted(state.teacher.params) == sorted(before)
    for name, value in before.items():
        assert np.array_equal(state.teacher.params[name].data, value), name
        assert not state.teacher.params[name].requires_grad


def test_training_is_deterministic(tasks):
    model = build_detector(TINY, 0)
    state = initial_state("finetune", 2)
    a, ca = train_task(model, state, tasks[0], HP, seed=9)
    b, cb = train_task(model, state, tasks[0], HP, seed=9)
    assert ca.steps == cb.steps
    assert all(np.array_equal(a.params[n].data, b.params[n].data) for n in a.params)


def test_divergence_dumps_the_model(tmp_path, tasks):
    model = build_detector(TINY, 0)
    huge = {"head.reg.bias": Tensor(np.full(4, 1e308))}
    model = replace_params(model, huge)
    dump = tmp_path / "diverged.ckpt"
    with pytest.raises(NonFiniteError):
        train_task(model, initial_state("finetune", 2), tasks[0], HP, seed=0, dump_path=dump)
    assert checkpoint.load(dump).metadata["reason"]


def test_bad_targets_are_not_reported_as_divergence(tmp_path, tasks):
    # task 1 carries classes 3-4, the 2-class model supervises 1-2 only
    dump = tmp_path / "diverged.ckpt"
    with pytest.raises(LossError) as exc:
        train_task(build_detector(TINY, 0), initial_state("finetune", 2), tasks[1], HP, seed=0, dump_path=dump)
    assert not isinstance(exc.value, NonFiniteError)
    assert "outside supervised range" in str(exc.value)
    assert not dump.exists()


def test_run_experiment_writes_every_artifact(tmp_path):
    cfg = tiny_config(tmp_path)
    art = run_experiment(cfg)
    out = tmp_path / "latent_distill"
    rows = read_csv(out / "results.csv")
    assert [r["task"] for r in rows] == ["0", "1"] and list(rows[0]) == CSV_FIELDS
    assert rows[0]["old_map"] == "" and rows[1]["old_map"] != ""
    assert rows[0]["overhead_params"] == "0" and int(rows[1]["overhead_params"]) == int(rows[1]["trainable_params"])
    assert int(rows[1]["trainable_params"]) < int(rows[1]["total_params"])
    assert (out / "reports" / "task_1.yaml").exists() and (out / "epoch_curves.csv").exists()
    assert {r["task"] for r in read_csv(out / "curves.csv")} == {"0", "1"}
    assert [p.name for p in art.checkpoints] == ["task_0.ckpt", "task_1.ckpt"]
    first, final = checkpoint.load(art.checkpoints[0]), checkpoint.load(art.checkpoints[-1])
    assert final.model.num_classes == 4 and final.metadata["task"] == 1

    lower = final.model.names_at_or_below("stage3")
    assert lower and all(not final.model.params[n].requires_grad for n in lower)
    for name in lower:
        assert np.array_equal(first.model.params[name].data, final.model.params[name].data), name


def test_runs_are_reproducible_across_output_dirs(tmp_path):
    a = run_experiment(tiny_config(tmp_path / "a", strategy="replay"))
    b = run_experiment(tiny_config(tmp_path / "b", strategy="replay"))
    assert a.csv_path.read_text() == b.csv_path.read_text()
    assert a.curves_path.read_text() == b.curves_path.read_text()


def test_resume_from_a_task_checkpoint_reproduces_the_run(tmp_path):
    cfg = tiny_config(tmp_path, strategy="latent_replay")
    art = run_experiment(cfg)
    results, curves = art.csv_path.read_text(), art.curves_path.read_text()
    final = checkpoint.load(art.checkpoints[-1]).model

    resumed = run_experiment(cfg, resume=art.checkpoints[0])
    assert resumed.csv_path.read_text() == results
    assert resumed.curves_path.read_text() == curves
    again = checkpoint.load(resumed.checkpoints[-1]).model
    assert all(np.array_equal(final.params[n].data, again.params[n].data) for n in final.params)


def test_resume_rejects_a_different_config(tmp_path):
    art = run_experiment(tiny_config(tmp_path, strategy="finetune"))
    with pytest.raises(TrainingError, match=r"changed: hp\.batch_size$"):
        run_experiment(tiny_config(tmp_path, strategy="finetune", batch_size=4), resume=art.checkpoints[0])


def test_config_changes_names_dotted_fields(tmp_path):
    a = tiny_config(tmp_path)
    b = replace(a, strategy="sid", hp=replace(a.hp, t_max=7), data=replace(a.data, seed=9))
    assert config_changes(a, b) == ["strategy", "data.seed", "hp.t_max"]
    assert config_changes(a, a) == []
