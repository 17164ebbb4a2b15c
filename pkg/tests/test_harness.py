"""Harness integration: configs, the training loop, hypotheses, and the CLI."""

import json
import struct

import numpy as np
import pytest

from prunescope.errors import ConfigurationError, NumericsError
from prunescope.harness.cli import main
from prunescope.harness.config import (DatasetConfig, ExperimentConfig,
                                       ModelConfig, OptimizerConfig,
                                       SEED_ENV_VAR, build_model)
from prunescope.harness.hypotheses import evaluate_hypotheses, render_report
from prunescope.harness.trace import TraceRecord, read_trace, validate_trace
from prunescope.harness.train import (evaluate_mse, finetune, load_dataset,
                                      run_training, save_outputs)
from prunescope.importance import states_from_doc
from prunescope.modelgraph import build_groups
from prunescope.netcore import forward, load_checkpoint, mse_loss
from prunescope.scheduler import ScheduleConfig, schedule_row


def toy_config(**overrides):
    base = dict(
        model=ModelConfig(preset="toy_multihead"),
        dataset=DatasetConfig(kind="synthetic", n_train=128, n_test=32,
                              rank=6, target="affine"),
        epochs=3, batch_size=32, seed=0)
    base.update(overrides)
    return ExperimentConfig(**base)


# -- configuration ------------------------------------------------------------


def test_config_round_trips_through_json(tmp_path):
    cfg = toy_config(epochs=7, gamma=0.8,
                     schedule=ScheduleConfig(lambda_base=2e-5, cycle_T=10),
                     optimizer=OptimizerConfig(kind="sgd", lr=0.05))
    path = tmp_path / "cfg.json"
    cfg.save(path)
    assert ExperimentConfig.from_file(path) == cfg


def test_config_rejects_unknown_keys_and_bad_values(tmp_path):
    with pytest.raises(ConfigurationError, match="unknown config keys"):
        ExperimentConfig.from_dict({"epoch": 5})
    with pytest.raises(ConfigurationError):
        ExperimentConfig.from_dict({"model": {"preset": "resnet"}})
    with pytest.raises(ConfigurationError):
        ExperimentConfig(gamma=1.0)
    with pytest.raises(ConfigurationError):
        ExperimentConfig(metric_weights=(0.5, 0.5, 0.5))
    with pytest.raises(ConfigurationError):
        ExperimentConfig(epochs=0)
    path = tmp_path / "absent.json"
    with pytest.raises(ConfigurationError):
        ExperimentConfig.from_file(path)
    path.write_text("{broken")
    with pytest.raises(ConfigurationError):
        ExperimentConfig.from_file(path)


def test_model_config_validates_presets():
    with pytest.raises(ConfigurationError):
        ModelConfig(preset="autoencoder", latent_dim=32)
    for latent in (8, 64, 256, 512):
        assert ModelConfig(preset="autoencoder", latent_dim=latent)
    with pytest.raises(ConfigurationError):
        ModelConfig(preset="custom")  # needs explicit widths


def test_dataset_config_validates():
    with pytest.raises(ConfigurationError):
        DatasetConfig(kind="imagenet")
    with pytest.raises(ConfigurationError):
        DatasetConfig(kind="mnist")  # needs a path


def test_seed_env_var_overrides_the_config(monkeypatch):
    cfg = toy_config(seed=5)
    monkeypatch.delenv(SEED_ENV_VAR, raising=False)
    assert cfg.resolve_seed() == 5
    monkeypatch.setenv(SEED_ENV_VAR, "99")
    assert cfg.resolve_seed() == 99
    monkeypatch.setenv(SEED_ENV_VAR, "not-an-int")
    with pytest.raises(ConfigurationError):
        cfg.resolve_seed()


def test_build_model_is_seed_deterministic():
    a = build_model(ModelConfig(preset="toy_multihead"), seed=4)
    b = build_model(ModelConfig(preset="toy_multihead"), seed=4)
    c = build_model(ModelConfig(preset="toy_multihead"), seed=5)
    for (_, _, ta), (_, _, tb) in zip(a.param_tensors(), b.param_tensors()):
        np.testing.assert_array_equal(ta.values, tb.values)
    assert not np.array_equal(a.layers[0].weight.values,
                              c.layers[0].weight.values)


def test_custom_model_builds_sequential_chains():
    cfg = ModelConfig(preset="custom", widths=(6, 4, 2),
                      activations=("relu", "identity"),
                      components={"all": (0, 2)})
    net = build_model(cfg, seed=0)
    assert [l.out_dim for l in net.layers] == [4, 2]


def test_autoencoder_preset_shape():
    net = build_model(ModelConfig(preset="autoencoder", latent_dim=64), seed=1)
    assert [l.out_dim for l in net.layers] == [256, 128, 64, 128, 256, 784]
    assert [l.activation for l in net.layers] == [
        "relu", "relu", "identity", "relu", "relu", "sigmoid"]
    assert net.components == {"encoder": (0, 3), "decoder": (3, 6)}


# -- datasets through the config --------------------------------------------------


def test_load_dataset_identity_width_mismatch():
    cfg = toy_config(dataset=DatasetConfig(kind="synthetic", target="identity"))
    net = build_model(cfg.model, seed=0)  # 16 in, 2 out
    with pytest.raises(ConfigurationError, match="identity"):
        load_dataset(cfg, 0, net)


def test_load_dataset_mnist_round_trip(tmp_path):
    import struct as _struct
    from prunescope.harness.data import IDX_IMAGE_MAGIC
    path = tmp_path / "train.idx"
    payload = bytes(range(6 * 4))
    path.write_bytes(_struct.pack(">IIII", IDX_IMAGE_MAGIC, 6, 2, 2) + payload)
    cfg = toy_config(
        model=ModelConfig(preset="custom", widths=(4, 3, 4),
                          activations=("relu", "sigmoid"),
                          components={"all": (0, 2)}),
        dataset=DatasetConfig(kind="mnist", train_images=str(path),
                              n_train=4, n_test=2))
    net = build_model(cfg.model, seed=0)
    xtr, ytr, xte, yte = load_dataset(cfg, 0, net)
    assert xtr.shape == (4, 4) and xte.shape == (2, 4)
    np.testing.assert_array_equal(xtr, ytr)
    with pytest.raises(ConfigurationError, match="cannot cover"):
        load_dataset(toy_config(
            model=cfg.model,
            dataset=DatasetConfig(kind="mnist", train_images=str(path),
                                  n_train=6, n_test=2)), 0, net)


# -- the training loop --------------------------------------------------------------


def test_training_is_bitwise_deterministic():
    a = run_training(toy_config())
    b = run_training(toy_config())
    assert a.records == b.records
    for (_, _, ta), (_, _, tb) in zip(a.net.param_tensors(),
                                      b.net.param_tensors()):
        np.testing.assert_array_equal(ta.values, tb.values)
    assert struct.pack("d", a.test_mse) == struct.pack("d", b.test_mse)


def test_training_seed_changes_the_run(monkeypatch):
    base = run_training(toy_config())
    other = run_training(toy_config(seed=1))
    assert base.records != other.records
    monkeypatch.setenv(SEED_ENV_VAR, "1")
    via_env = run_training(toy_config())
    assert via_env.seed == 1
    assert via_env.records == other.records


def test_trace_has_one_row_per_epoch_and_group_in_graph_order():
    result = run_training(toy_config(epochs=4))
    records = result.records
    assert validate_trace(records) == []
    gids = [g.id for g in result.graph.groups]
    assert len(records) == 4 * len(gids)
    for epoch in range(1, 5):
        chunk = [r for r in records if r.epoch == epoch]
        assert [r.group_id for r in chunk] == gids
        assert [r.kind for r in chunk] == [g.kind for g in result.graph.groups]


def test_trace_lambda_column_follows_the_schedule():
    result = run_training(toy_config(epochs=3))
    schedule = result.config.schedule.with_groups(len(result.graph.groups))
    counts = [g.param_count for g in result.graph.groups]
    for epoch in range(1, 4):
        expected = schedule_row(epoch - 1, counts, schedule)
        chunk = [r.lambda_ for r in result.records if r.epoch == epoch]
        assert chunk == expected


def test_importance_sees_task_gradients_only():
    """With one iteration per epoch, the first epoch's raw metrics must be
    identical whether or not the sparsity term is active, because the
    importance update runs before the subgradient is mixed in."""
    heavy = toy_config(batch_size=128, epochs=1,
                       schedule=ScheduleConfig(lambda_base=10.0))
    light = toy_config(batch_size=128, epochs=1,
                       schedule=ScheduleConfig(lambda_weight=0.0))
    a = run_training(heavy)
    b = run_training(light)
    for ra, rb in zip(a.records, b.records):
        assert ra.raw_grad == rb.raw_grad
        assert ra.raw_fisher == rb.raw_fisher
        assert ra.raw_bayes == rb.raw_bayes


def test_total_loss_adds_the_scheduled_term():
    result = run_training(toy_config(epochs=2))
    for epoch in (1, 2):
        chunk = [r for r in result.records if r.epoch == epoch]
        assert len({r.task_loss for r in chunk}) == 1
        assert len({r.total_loss for r in chunk}) == 1
        assert chunk[0].total_loss >= chunk[0].task_loss


def test_non_finite_loss_raises_with_context():
    cfg = toy_config(epochs=1)
    net = build_model(cfg.model, seed=0)
    for _, _, tensor in net.param_tensors():
        tensor.values = tensor.values * 1e200
    with np.errstate(over="ignore", invalid="ignore"):
        with pytest.raises(NumericsError, match="epoch 1"):
            run_training(cfg, net=net)


def test_evaluate_mse_matches_unbatched_loss():
    cfg = toy_config()
    result = run_training(cfg)
    _, _, xte, yte = load_dataset(cfg, result.seed, result.net)
    whole, _ = mse_loss(forward(result.net, xte)[-1], yte)
    np.testing.assert_allclose(evaluate_mse(result.net, xte, yte, batch_size=7),
                               whole, rtol=1e-12)


# -- artifacts -----------------------------------------------------------------------


def test_save_outputs_writes_the_full_artifact_set(tmp_path):
    result = run_training(toy_config())
    paths = save_outputs(result, tmp_path / "run")
    for name in ("config", "checkpoint", "trace_csv", "trace_json", "states",
                 "manifest", "summary"):
        assert paths[name].exists(), name
    net, meta = load_checkpoint(paths["checkpoint"])
    assert meta["layers_per_group"] == 1
    assert meta["seed"] == result.seed
    assert read_trace(paths["trace_csv"]) == result.records
    states = states_from_doc(json.loads(paths["states"].read_text()))
    assert set(states) == set(result.states)
    summary = json.loads(paths["summary"].read_text())
    assert summary["format"] == "prunescope.summary"
    assert set(summary["rankings"]) == {"grad", "fisher", "bayes", "combined"}
    assert summary["param_count"] == result.net.param_count()
    assert "mu decreases" in summary["bayes_note"]
    for row in summary["groups"]:
        np.testing.assert_allclose(row["inv_mu"], 1.0 / row["mu"], rtol=1e-15)


def test_finetune_uses_checkpoint_grouping_and_fresh_states(tmp_path):
    cfg = toy_config(layers_per_group=2)
    result = run_training(cfg)
    paths = save_outputs(result, tmp_path / "run")
    ft_cfg = toy_config(epochs=2)  # configured with layers_per_group = 1
    ft = finetune(paths["checkpoint"], ft_cfg, epochs=2)
    assert ft.graph.layers_per_group == 2
    iters_per_epoch = -(-128 // 32)
    for st in ft.states.values():
        assert st.iteration == 2 * iters_per_epoch
    assert max(r.epoch for r in ft.records) == 2


def test_finetune_continues_from_saved_parameters(tmp_path):
    cfg = toy_config()
    result = run_training(cfg)
    paths = save_outputs(result, tmp_path / "run")
    ft = finetune(paths["checkpoint"], cfg, epochs=1)
    # loss should carry on from the trained level, not restart from scratch
    fresh = run_training(toy_config(epochs=1))
    assert ft.final_task_loss < fresh.final_task_loss


# -- hypotheses ------------------------------------------------------------------------


def constant_records(epochs=60, scores=(3.0, 2.0, 1.0)):
    gids = ["coupling_x_y", "x_1", "y_1"]
    kinds = ["coupling", "component_specific", "component_specific"]
    records = []
    for epoch in range(1, epochs + 1):
        for gid, kind, s in zip(gids, kinds, scores):
            records.append(TraceRecord(
                epoch=epoch, group_id=gid, kind=kind, lambda_=1e-5,
                raw_grad=s, ema_grad=s, raw_fisher=s, ema_fisher=s,
                raw_bayes=s, ema_bayes=s, l1_norm=1.0, task_loss=0.1,
                total_loss=0.1))
    return records


def test_constant_rankings_have_zero_crossovers():
    report = evaluate_hypotheses(constant_records(), window=20)
    assert report.crossover_epochs == {"grad": [], "fisher": [], "bayes": []}
    assert report.coupling_on_top == {"grad": True, "fisher": True,
                                      "bayes": True}
    assert report.earliest_specific == "x_1"
    assert report.earliest_specific_rank["grad"] == 2
    assert report.earliest_specific_bottom["grad"] is False


def test_single_swap_yields_exactly_one_crossover():
    records = constant_records(epochs=100)
    flipped = []
    for r in records:
        if r.epoch >= 50 and r.group_id in ("x_1", "y_1"):
            s = 1.0 if r.group_id == "x_1" else 2.0
            r = TraceRecord(r.epoch, r.group_id, r.kind, r.lambda_,
                            s, s, s, s, s, s, r.l1_norm, r.task_loss,
                            r.total_loss)
        flipped.append(r)
    report = evaluate_hypotheses(flipped, window=20)
    assert report.crossover_epochs["grad"] == [50]
    assert report.earliest_specific_bottom["grad"] is True


def test_hypotheses_window_shrinks_with_a_note():
    report = evaluate_hypotheses(constant_records(epochs=5), window=20)
    assert report.window == 5
    assert any("shrunk" in n for n in report.notes)
    text = render_report(report)
    assert "H1" in text and "H2" in text and "H3" in text


def test_hypotheses_reject_malformed_traces():
    records = constant_records(epochs=3)
    with pytest.raises(Exception):
        evaluate_hypotheses(records[1:], window=5)  # missing one row


# -- CLI ---------------------------------------------------------------------------------


@pytest.fixture
def cli_workspace(tmp_path):
    cfg = toy_config(epochs=2)
    cfg_path = tmp_path / "cfg.json"
    cfg.save(cfg_path)
    return tmp_path, cfg_path


def test_cli_exit_codes_for_usage():
    assert main([]) == 1
    assert main(["--help"]) == 0
    assert main(["no-such-command"]) == 1
    assert main(["train"]) == 1  # missing required arguments


def test_cli_train_prune_finetune_verify_report(cli_workspace, capsys):
    tmp_path, cfg_path = cli_workspace
    run_dir = tmp_path / "run"
    assert main(["train", "--config", str(cfg_path),
                 "--out", str(run_dir)]) == 0
    ckpt = run_dir / "checkpoint.json"

    plan_path = tmp_path / "plan.json"
    assert main(["prune", "--checkpoint", str(ckpt), "--sparsity", "0.4",
                 "--metric", "grad", "--plan", str(plan_path)]) == 0
    assert plan_path.exists()

    pruned_dir = tmp_path / "pruned"
    assert main(["prune", "--checkpoint", str(ckpt), "--sparsity", "0.4",
                 "--metric", "combined", "--out", str(pruned_dir)]) == 0
    assert (pruned_dir / "checkpoint.json").exists()
    assert (pruned_dir / "plan.json").exists()

    applied_dir = tmp_path / "applied"
    assert main(["prune", "--checkpoint", str(ckpt), "--apply", str(plan_path),
                 "--out", str(applied_dir)]) == 0

    ft_dir = tmp_path / "ft"
    assert main(["finetune", "--checkpoint",
                 str(pruned_dir / "checkpoint.json"), "--config",
                 str(cfg_path), "--epochs", "1", "--out", str(ft_dir)]) == 0

    assert main(["verify", "--checkpoint",
                 str(ft_dir / "checkpoint.json")]) == 0
    capsys.readouterr()
    assert main(["report", "--trace", str(run_dir / "trace.csv"),
                 "--hypotheses"]) == 0
    out = capsys.readouterr().out
    assert "H1" in out and "crossover" in out


def test_cli_failures_exit_two(cli_workspace, capsys):
    tmp_path, cfg_path = cli_workspace
    assert main(["train", "--config", str(tmp_path / "nope.json"),
                 "--out", str(tmp_path / "x")]) == 2
    assert main(["report", "--trace", str(tmp_path / "nope.csv")]) == 2
    assert main(["verify", "--checkpoint", str(cfg_path)]) == 2  # not a checkpoint
    run_dir = tmp_path / "run"
    assert main(["train", "--config", str(cfg_path), "--out", str(run_dir)]) == 0
    ckpt = str(run_dir / "checkpoint.json")
    assert main(["prune", "--checkpoint", ckpt, "--sparsity", "0.4"]) == 2
    assert main(["prune", "--checkpoint", ckpt, "--metric", "grad",
                 "--out", str(tmp_path / "p")]) == 2  # no sparsity, no plan
    assert main(["prune", "--checkpoint", ckpt, "--sparsity", "2.0",
                 "--out", str(tmp_path / "p")]) == 2
    err = capsys.readouterr().err
    assert "error:" in err


def test_cli_train_synthetic_flag_and_protect(tmp_path, capsys):
    cfg = toy_config(epochs=2)
    cfg_path = tmp_path / "cfg.json"
    doc = cfg.to_dict()
    doc["dataset"] = {"kind": "mnist", "train_images": "/nonexistent.idx",
                      "n_train": 128, "n_test": 32, "target": "affine"}
    cfg_path.write_text(json.dumps(doc))
    run_dir = tmp_path / "run"
    assert main(["train", "--config", str(cfg_path), "--out", str(run_dir),
                 "--synthetic"]) == 0
    assert main(["prune", "--checkpoint", str(run_dir / "checkpoint.json"),
                 "--sparsity", "0.3", "--metric", "grad",
                 "--protect", "encoder_1",
                 "--out", str(tmp_path / "pruned")]) == 0
    plan = json.loads((tmp_path / "pruned" / "plan.json").read_text())
    assert "encoder_1" not in plan["groups"]
