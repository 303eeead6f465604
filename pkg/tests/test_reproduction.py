"""Multi-seed training reproductions on the shapes dataset. Minutes, not seconds: run with -m slow."""
from dataclasses import replace

import pytest

from cl_strategies import initial_state
from config import ExperimentConfig
from detector import build_detector
from scenario_data import generate_dataset, split_tasks
from trainer import derive_seed, run_experiment, run_freeze_sweep, train_task

pytestmark = pytest.mark.slow

SEEDS = (0, 1, 2)
CL_STRATEGIES = ("finetune", "replay", "latent_replay", "lwf", "sid", "latent_distill")


def run_4p4(tmp_path, strategy, seed):
    cfg = ExperimentConfig(scenario="4p4", strategy=strategy, seed=seed,
                           output_dir=str(tmp_path / f"{strategy}_{seed}"))
    return run_experiment(cfg).rows


@pytest.mark.parametrize("seed", SEEDS)
def test_forgetting_pattern_on_4p4(tmp_path, seed):
    last = {s: run_4p4(tmp_path, s, seed)[-1] for s in CL_STRATEGIES + ("joint",)}

    ft_old, ld_old, joint_old = (float(last[s]["old_map"]) for s in ("finetune", "latent_distill", "joint"))
    assert ft_old < 0.02
    assert ld_old > 5 * ft_old
    assert ld_old >= 0.5 * joint_old
    joint_all = float(last["joint"]["all_map"])
    for strategy in CL_STRATEGIES:
        assert joint_all > float(last[strategy]["all_map"]), strategy


def test_task_0_epoch_loss_decreases_with_the_default_config():
    cfg = ExperimentConfig(strategy="finetune")
    tasks = split_tasks(generate_dataset(cfg.data.train_images, cfg.data.num_classes, cfg.data.seed),
                        cfg.scenario_spec)
    model = build_detector(cfg.detector_spec(), seed=derive_seed(cfg.seed, 0))
    hp = replace(cfg.hp, epochs_per_task=5)
    _, curves = train_task(model, initial_state("finetune", cfg.scenario_spec.counts[0]), tasks[0], hp,
                           seed=derive_seed(cfg.seed, 0, 2))
    means = [e["total"] for e in curves.epochs]
    assert len(means) == 5
    assert all(a > b for a, b in zip(means, means[1:])), means
    # at least a 10% drop over the five epochs
    assert means[-1] < 0.9 * means[0]


def test_freeze_sweep_on_7p1(tmp_path, record_property):
    non_increasing = 0
    for seed in SEEDS:
        out = tmp_path / f"sweep_{seed}"
        cfg = ExperimentConfig(scenario="7p1", strategy="latent_distill", seed=seed, output_dir=str(out))
        results = run_freeze_sweep(cfg)
        assert [b for b, _ in results] == ["input", "stage1", "stage2", "stage3"]
        last = [art.rows[-1] for _, art in results]
        trainable = [int(r["trainable_params"]) for r in last]
        backward = [int(r["bwd_macs"]) for r in last]
        assert all(a > b for a, b in zip(trainable, trainable[1:]))
        assert all(a > b for a, b in zip(backward, backward[1:]))
        assert (out / "sweep.csv").exists()

        new_map = [float(r["new_map"]) for r in last]
        non_increasing += all(a >= b for a, b in zip(new_map, new_map[1:]))
    # plasticity trend is reported, not asserted
    record_property("new_map_non_increasing_seeds", f"{non_increasing}/{len(SEEDS)}")
    print(f"New mAP non-increasing with freezing in {non_increasing}/{len(SEEDS)} seeds")
