import os

import pytest

from meshtkg.cli import run

from conftest import micro_config


def read(path):
    with open(path, encoding="utf-8") as fh:
        return fh.read()


def micro_flags(out, **extra):
    flags = dict(
        dim=16, llm_dim=16, adapter_hidden=16, channels=3,
        epochs_stage0=4, epochs_stage1=3, learning_rate=0.01, seed=1,
    )
    flags.update(extra)
    argv = ["--out", out]
    for key, value in flags.items():
        argv += [f"--{key.replace('_', '-')}", str(value)]
    return argv


class TestDataCommands:
    def test_stats(self, synth_dataset, tmp_path, capsys):
        out = str(tmp_path / "o")
        assert run(["stats", synth_dataset["dir"], "--out", out]) == 0
        printed = capsys.readouterr().out
        assert "|F_his|" in printed
        kv = dict(line.split("\t") for line in read(os.path.join(out, "stats.tsv")).strip().split("\n"))
        assert kv["entities"] == "30"
        assert kv["train"] == str(synth_dataset["train"].num_facts)
        assert os.path.exists(os.path.join(out, "config.echo"))

    def test_prepare_roundtrip(self, synth_dataset, tmp_path):
        out = str(tmp_path / "o")
        assert run(["prepare", synth_dataset["dir"], "--out", out]) == 0
        from meshtkg.tkg import load_dataset

        _, train, _, _ = load_dataset(os.path.join(out, "dataset"))
        assert sorted(train.facts()) == sorted(synth_dataset["train"].facts())

    def test_prepare_with_drop_history(self, synth_dataset, tmp_path):
        out = str(tmp_path / "o")
        assert run(["prepare", synth_dataset["dir"], "--out", out,
                    "--drop-history", "0.5", "--seed", "3"]) == 0
        from meshtkg.tkg import load_dataset

        _, train, _, test = load_dataset(os.path.join(out, "dataset"))
        original = synth_dataset["train"].num_facts
        assert train.num_facts == original - int(0.5 * original)
        assert test.num_facts == synth_dataset["test"].num_facts  # only train is thinned

    def test_naive(self, synth_dataset, tmp_path, capsys):
        out = str(tmp_path / "o")
        assert run(["naive", synth_dataset["dir"], "--out", out]) == 0
        assert "MRR" in capsys.readouterr().out
        assert os.path.exists(os.path.join(out, "naive_metrics.tsv"))

    def test_emit_prompts(self, synth_dataset, tmp_path):
        out = str(tmp_path / "o")
        code = run(["emit-prompts", synth_dataset["dir"], "--out", out,
                    "--domain", "political", "--datatype", "historical"])
        assert code == 0
        lines = read(os.path.join(out, "prompts.tsv")).splitlines()
        assert len(lines) == 30 + 4
        assert lines[0].startswith("E\t0\tIn the context of political,")

    def test_missing_dataset_is_data_error(self, tmp_path):
        assert run(["stats", str(tmp_path / "nope"), "--out", str(tmp_path / "o")]) == 3

    def test_unknown_subcommand_exits_2(self):
        with pytest.raises(SystemExit) as exc:
            run(["frobnicate"])
        assert exc.value.code == 2


@pytest.fixture(scope="module")
def train_dir(synth_dataset, tmp_path_factory):
    out = str(tmp_path_factory.mktemp("cli_train"))
    assert run(["train", synth_dataset["dir"], *micro_flags(out)]) == 0
    return out


class TestTrainEvalCommands:
    def test_train_artifacts(self, train_dir):
        assert os.path.exists(os.path.join(train_dir, "checkpoint.mesh"))
        log = read(os.path.join(train_dir, "training.log"))
        assert len(log.strip().split("\n")) == 3
        echo = read(os.path.join(train_dir, "config.echo"))
        assert "seed = 1" in echo and "dim = 16" in echo

    def test_determinism_byte_identical_logs(self, synth_dataset, train_dir, tmp_path):
        out2 = str(tmp_path / "again")
        assert run(["train", synth_dataset["dir"], *micro_flags(out2)]) == 0
        assert read(os.path.join(train_dir, "training.log")) == read(os.path.join(out2, "training.log"))
        assert read(os.path.join(train_dir, "config.echo")).replace(train_dir, out2) == read(
            os.path.join(out2, "config.echo")
        )

    def test_echo_reproduces_run(self, synth_dataset, train_dir, tmp_path):
        out2 = str(tmp_path / "fromecho")
        echo_path = os.path.join(train_dir, "config.echo")
        assert run(["train", synth_dataset["dir"], "--config", echo_path, "--out", out2]) == 0
        assert read(os.path.join(train_dir, "training.log")) == read(os.path.join(out2, "training.log"))

    def test_eval_and_analyze(self, synth_dataset, train_dir, tmp_path, capsys):
        ckpt = os.path.join(train_dir, "checkpoint.mesh")
        out = str(tmp_path / "ev")
        assert run(["eval", ckpt, synth_dataset["dir"], "--out", out]) == 0
        printed = capsys.readouterr().out
        assert "historical" in printed
        assert os.path.exists(os.path.join(out, "metrics.tsv"))
        assert os.path.exists(os.path.join(out, "gate_stats.txt"))
        out2 = str(tmp_path / "an")
        assert run(["analyze", ckpt, synth_dataset["dir"], "--out", out2]) == 0
        assert "alpha_1" in read(os.path.join(out2, "gate_stats.txt"))

    def test_eval_ablation_flag_changes_metrics(self, synth_dataset, train_dir, tmp_path):
        ckpt = os.path.join(train_dir, "checkpoint.mesh")
        out_a = str(tmp_path / "a")
        out_b = str(tmp_path / "b")
        assert run(["eval", ckpt, synth_dataset["dir"], "--out", out_a]) == 0
        assert run(["eval", ckpt, synth_dataset["dir"], "--out", out_b, "--disable-semantic"]) == 0
        assert read(os.path.join(out_a, "metrics.tsv")) != read(os.path.join(out_b, "metrics.tsv"))

    def test_env_override(self, synth_dataset, tmp_path, monkeypatch):
        out = str(tmp_path / "envrun")
        monkeypatch.setenv("MESH_EPOCHS_STAGE1", "1")
        monkeypatch.setenv("MESH_EPOCHS_STAGE0", "1")
        monkeypatch.setenv("MESH_DIM", "8")
        argv = ["train", synth_dataset["dir"], "--out", out, "--llm-dim", "16",
                "--adapter-hidden", "8", "--channels", "2", "--seed", "1"]
        assert run(argv) == 0
        echo = read(os.path.join(out, "config.echo"))
        assert "dim = 8" in echo and "epochs_stage1 = 1" in echo

    def test_flags_beat_config_file(self, synth_dataset, tmp_path):
        cfg_file = tmp_path / "run.cfg"
        cfg_file.write_text("dim = 8\nepochs_stage0 = 1\nepochs_stage1 = 1\nchannels = 2\n"
                            "llm_dim = 16\nadapter_hidden = 8\n")
        out = str(tmp_path / "layered")
        argv = ["train", synth_dataset["dir"], "--config", str(cfg_file), "--out", out,
                "--dim", "12", "--seed", "1"]
        assert run(argv) == 0
        echo = read(os.path.join(out, "config.echo"))
        assert "dim = 12" in echo          # flag wins
        assert "epochs_stage0 = 1" in echo  # file beats profile preset

    def test_bad_config_value_exits_2(self, synth_dataset, tmp_path):
        assert run(["train", synth_dataset["dir"], "--out", str(tmp_path / "x"),
                    "--dropout", "1.5"]) == 2

    def test_numeric_failure_exits_4(self, synth_dataset, tmp_path, monkeypatch):
        from meshtkg.autodiff import NumericError
        import meshtkg.cli

        def boom(*args, **kwargs):
            raise NumericError("non-finite loss in stage 1, epoch 1, timestamp 0")

        monkeypatch.setattr(meshtkg.cli.training, "train_model", boom)
        assert run(["train", synth_dataset["dir"], *micro_flags(str(tmp_path / "x"))]) == 4


class TestSweep:
    def test_omega_sweep_writes_summary(self, synth_dataset, tmp_path):
        out = str(tmp_path / "sweep")
        argv = ["sweep", synth_dataset["dir"], *micro_flags(out, epochs_stage0=2, epochs_stage1=1),
                "--omega-list", "0.5,1.0"]
        assert run(argv) == 0
        rows = read(os.path.join(out, "sweep.tsv")).strip().split("\n")
        assert rows[0] == "setting\tMRR\tH@3\tH@10"
        assert len(rows) == 3
        assert rows[1].startswith("omega_0.5\t")
        assert os.path.isdir(os.path.join(out, "omega_1"))

    def test_mn_sweep(self, synth_dataset, tmp_path):
        out = str(tmp_path / "mn")
        argv = ["sweep", synth_dataset["dir"], *micro_flags(out, epochs_stage0=1, epochs_stage1=1),
                "--mn-grid", "1x1,2x1"]
        assert run(argv) == 0
        rows = read(os.path.join(out, "sweep.tsv")).strip().split("\n")
        assert rows[1].startswith("m1n1\t") and rows[2].startswith("m2n1\t")

    def test_sweep_needs_exactly_one_axis(self, synth_dataset, tmp_path):
        out = str(tmp_path / "bad")
        assert run(["sweep", synth_dataset["dir"], "--out", out]) == 2
        assert run(["sweep", synth_dataset["dir"], "--out", out,
                    "--omega-list", "1.0", "--mn-grid", "1x1"]) == 2
