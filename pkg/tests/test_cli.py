import json

import pytest

from fewshot_ec.cli import main

BASE_CONFIG = {
    "data": {
        "synthetic": {"num_labels": 24, "examples_per_label": 14,
                      "vocab_size": 200, "seed": 5},
        "split": {"counts": [20, 2, 2]},
    },
    "encoder": {"kind": "cnn", "word_dim": 8, "pos_dim": 4,
                "cnn_filters": 6, "max_pos_dist": 6},
    "head": {"name": "proto"},
    "train": {"episodes": 6, "eval_every": 3, "eval_episodes": 4,
              "n_way": 2, "k_shot": 3, "q_query": 2, "q_aux": 1, "seed": 1},
    "eval": {"n_way": 2, "k_shot": 3, "q_query": 2, "episodes": 8, "seed": 2},
}


@pytest.fixture
def config_path(tmp_path):
    p = tmp_path / "config.json"
    p.write_text(json.dumps(BASE_CONFIG))
    return str(p)


class TestConfigHandling:
    def test_unknown_section_exits_1(self, tmp_path, capsys):
        p = tmp_path / "c.json"
        p.write_text('{"bogus": {}}')
        assert main(["train", "--config", str(p)]) == 1
        assert "bogus" in capsys.readouterr().err

    def test_unknown_key_in_section_exits_1(self, tmp_path, capsys):
        p = tmp_path / "c.json"
        p.write_text('{"train": {"episodez": 3}}')
        assert main(["train", "--config", str(p)]) == 1
        assert "episodez" in capsys.readouterr().err

    def test_missing_config_file_exits_1(self):
        assert main(["train", "--config", "/no/such/file.json"]) == 1

    def test_invalid_json_exits_1(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text("{nope")
        assert main(["train", "--config", str(p)]) == 1

    def test_missing_corpus_exits_2(self, tmp_path):
        cfg = {"data": {"train_path": str(tmp_path / "a.jsonl"),
                        "dev_path": str(tmp_path / "b.jsonl"),
                        "test_path": str(tmp_path / "c.jsonl")},
               "train": {"episodes": 1}}
        p = tmp_path / "c.json"
        p.write_text(json.dumps(cfg))
        assert main(["train", "--config", str(p), "--out", str(tmp_path)]) == 2

    def test_bad_flag_value_exits_1(self, config_path, tmp_path):
        # q_aux must be < k_shot once the auxiliary loss is on
        assert main(["train", "--config", config_path, "--q-aux", "5",
                     "--lambda", "0.1", "--out", str(tmp_path / "o")]) == 1


class TestGenData:
    def test_writes_splits(self, config_path, tmp_path, capsys):
        out = tmp_path / "data"
        assert main(["gen-data", "--config", config_path,
                     "--out", str(out)]) == 0
        for name in ("train", "dev", "test"):
            assert (out / f"{name}.jsonl").exists()

    def test_deterministic_bytes(self, config_path, tmp_path):
        out1, out2 = tmp_path / "d1", tmp_path / "d2"
        main(["gen-data", "--config", config_path, "--out", str(out1)])
        main(["gen-data", "--config", config_path, "--out", str(out2)])
        assert (out1 / "train.jsonl").read_bytes() == \
               (out2 / "train.jsonl").read_bytes()


class TestTrainEval:
    def test_train_then_eval(self, config_path, tmp_path, capsys):
        out = tmp_path / "run"
        assert main(["train", "--config", config_path, "--out", str(out)]) == 0
        assert (out / "checkpoint.json").exists()
        assert (out / "train_log.jsonl").exists()
        assert main(["eval", "--config", config_path,
                     "--checkpoint", str(out / "checkpoint.json"),
                     "--out", str(out)]) == 0
        report = json.loads((out / "eval_report.json").read_text())
        assert report["n_way"] == 2 and report["episodes_evaluated"] == 8
        assert 0.0 <= report["mean_accuracy"] <= 1.0

    def test_train_determinism_bitwise_files(self, config_path, tmp_path):
        out1, out2 = tmp_path / "r1", tmp_path / "r2"
        main(["train", "--config", config_path, "--out", str(out1)])
        main(["train", "--config", config_path, "--out", str(out2)])
        assert (out1 / "checkpoint.json").read_bytes() == \
               (out2 / "checkpoint.json").read_bytes()
        assert (out1 / "train_log.jsonl").read_bytes() == \
               (out2 / "train_log.jsonl").read_bytes()

    def test_eval_determinism_bitwise_files(self, config_path, tmp_path):
        run = tmp_path / "run"
        main(["train", "--config", config_path, "--out", str(run)])
        out1, out2 = tmp_path / "e1", tmp_path / "e2"
        for out in (out1, out2):
            main(["eval", "--config", config_path,
                  "--checkpoint", str(run / "checkpoint.json"),
                  "--out", str(out)])
        assert (out1 / "eval_report.json").read_bytes() == \
               (out2 / "eval_report.json").read_bytes()

    def test_lolos_off_flag_zeroes_aux(self, config_path, tmp_path):
        out = tmp_path / "off"
        main(["train", "--config", config_path, "--lolos", "off",
              "--out", str(out)])
        records = [json.loads(l) for l in
                   (out / "train_log.jsonl").read_text().splitlines()]
        assert all(r["loss_aux"] == 0.0 for r in records if "loss_aux" in r)

    def test_eval_without_checkpoint_exits_1(self, config_path, tmp_path):
        assert main(["eval", "--config", config_path,
                     "--out", str(tmp_path)]) == 1

    def test_missing_checkpoint_exits_2(self, config_path, tmp_path):
        assert main(["eval", "--config", config_path,
                     "--checkpoint", str(tmp_path / "nope.json"),
                     "--out", str(tmp_path)]) == 2


class TestGridReport:
    def grid_config(self, tmp_path):
        cfg = json.loads(json.dumps(BASE_CONFIG))
        del cfg["head"]
        cfg["train"]["eval_every"] = 0
        cfg["train"]["episodes"] = 2
        cfg["train"]["q_aux"] = 1
        cfg["train"]["k_shot"] = 3
        cfg["grid"] = {"heads": ["proto"], "encoders": ["cnn"],
                       "settings": [[2, 3]], "lolos": [True, False],
                       "noise_rates": [0.2, 0.3, 0.5],
                       "eval_episodes": 2, "q_query": 2, "seed": 0}
        p = tmp_path / "grid_config.json"
        p.write_text(json.dumps(cfg))
        return str(p)

    def test_grid_and_report(self, tmp_path, capsys):
        cfg = self.grid_config(tmp_path)
        out = tmp_path / "grid"
        assert main(["grid", "--config", cfg, "--out", str(out)]) == 0
        doc = json.loads((out / "grid.json").read_text())
        assert len(doc["cells"]) == 6  # 2 lolos x 3 noise rates
        rates = {c["cell"]["noise_rate"] for c in doc["cells"]}
        assert rates == {0.2, 0.3, 0.5}
        capsys.readouterr()
        assert main(["report", "--grid-json", str(out / "grid.json")]) == 0
        text = capsys.readouterr().out
        assert "proto" in text and "2w3s" in text


class TestGradcheckCommand:
    def test_exit_zero(self, capsys):
        assert main(["gradcheck"]) == 0
        out = capsys.readouterr().out
        assert "gradient checks" in out
