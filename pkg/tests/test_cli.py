import json
import subprocess
import sys

import pytest

from relnet import __version__
from relnet.checkpoint import read_manifest
from relnet.cli import main
from relnet.config import SCHEMA, ConfigError, help_text, parse_config
from relnet.data import make_glyph_dataset, make_synthetic_zsl, write_feature_table, write_image_corpus


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    write_image_corpus(make_glyph_dataset(10, 4, seed=0), root)
    return root


@pytest.fixture(scope="module")
def zsl_files(tmp_path_factory):
    root = tmp_path_factory.mktemp("zsl")
    train, test = make_synthetic_zsl(n_seen=6, n_unseen=3, dim=5, train_per_class=8, test_per_class=4, seed=0)
    write_feature_table(train, root / "train.csv", root / "attributes.csv", root / "splits.csv")
    write_feature_table(test, root / "test.csv", root / "attributes.csv", root / "splits.csv")
    return root


def fewshot_flags(corpus):
    return [f"--data.root={corpus}", "--data.train_classes=6", "--data.test_classes=4", "--model.channels=4",
            "--episode.ways=3", "--episode.queries=2", "--eval.episodes=4", "--train.log_every=2"]


@pytest.fixture(scope="module")
def trained(corpus, tmp_path_factory):
    out = tmp_path_factory.mktemp("train")
    code = main(["train", "--outdir", str(out), "--train.total_episodes=4", *fewshot_flags(corpus)])
    assert code == 0
    return out


class TestConfig:
    def test_empty_file_gives_defaults(self, tmp_path):
        path = tmp_path / "c.toml"
        path.write_text("")
        cfg = parse_config(path)
        assert cfg["episode.preset"] == "omniglot-5w1s" and cfg["train.seed"] == 0

    def test_sections_and_dotted_keys(self, tmp_path):
        path = tmp_path / "c.toml"
        path.write_text('[train]\nseed = 4\n\n[episode]\npreset = "omniglot-20w5s"\n')
        assert parse_config(path)["train.seed"] == 4
        path.write_text("train.seed = 5\n")
        assert parse_config(path)["train.seed"] == 5

    def test_override_beats_file(self, tmp_path):
        path = tmp_path / "c.toml"
        path.write_text("train.seed = 4\n")
        assert parse_config(path, {"train.seed": "9"})["train.seed"] == 9

    def test_unknown_key(self, tmp_path):
        path = tmp_path / "c.toml"
        path.write_text("train.sed = 4\n")
        with pytest.raises(ConfigError, match="train.sed"):
            parse_config(path)

    def test_type_mismatch(self, tmp_path):
        path = tmp_path / "c.toml"
        path.write_text('train.seed = "four"\n')
        with pytest.raises(ConfigError):
            parse_config(path)
        with pytest.raises(ConfigError):
            parse_config(None, {"train.total_episodes": "many"})

    def test_list_override(self):
        assert parse_config(None, {"synth.seeds": "1,2"})["synth.seeds"] == [1, 2]

    def test_dump_round_trip(self, tmp_path):
        cfg = parse_config(None, {"synth.query": "0.5,-1", "data.root": 'a "quoted" dir', "train.base_lr": "1e-4"})
        path = cfg.write(tmp_path / "resolved.cfg")
        assert parse_config(path).values == cfg.values

    def test_help_lists_every_key(self):
        text = help_text()
        assert all(k.name in text for k in SCHEMA)


class TestExitCodes:
    def test_version(self, capsys):
        assert main(["version"]) == 0
        assert capsys.readouterr().out.strip() == __version__

    def test_presets_listed(self, capsys):
        assert main(["version", "--presets"]) == 0
        assert "omniglot-5w1s: ways=5 shots=1 queries=19" in capsys.readouterr().out

    def test_missing_config_file(self, tmp_path):
        assert main(["synth", "--config", str(tmp_path / "none.toml"), "--outdir", str(tmp_path)]) == 2

    def test_unknown_subcommand(self):
        assert main(["fly"]) == 1

    def test_no_subcommand(self):
        assert main([]) == 1

    def test_unknown_flag(self, tmp_path):
        assert main(["synth", "--bogus", "--outdir", str(tmp_path)]) == 1

    def test_unknown_key(self, tmp_path):
        assert main(["synth", "--synth.colour=red", "--outdir", str(tmp_path)]) == 2

    def test_missing_required_key(self, tmp_path):
        assert main(["train", "--outdir", str(tmp_path)]) == 2

    def test_missing_data(self, tmp_path):
        assert main(["train", f"--data.root={tmp_path / 'nothing'}", "--outdir", str(tmp_path / "o")]) == 2

    def test_help(self, capsys):
        assert main(["train", "--help"]) == 0
        assert "data.root" in capsys.readouterr().out

    def test_gradcheck_all(self, capsys):
        assert main(["gradcheck", "--all"]) == 0
        assert "all passed" in capsys.readouterr().out

    def test_gradcheck_unknown_op(self):
        assert main(["gradcheck", "--op", "nope"]) == 1

    def test_module_entry_point(self):
        out = subprocess.run([sys.executable, "-m", "relnet", "version"], capture_output=True, text=True)
        assert out.returncode == 0 and out.stdout.strip() == __version__


class TestRuns:
    def test_train_outputs(self, trained):
        for name in ("resolved.cfg", "metrics.csv", "metrics.png", "ckpt_4.rnc", "eval_report.json",
                     "eval_report.csv", "summary.json"):
            assert (trained / name).exists(), name
        summary = json.loads((trained / "summary.json").read_text())
        assert summary["steps"] == 4 and 0 <= summary["test_accuracy"] <= 1
        resolved = parse_config(trained / "resolved.cfg")
        assert resolved["episode.ways"] == 3 and resolved["train.total_episodes"] == 4

    def test_preset_expansion(self, trained):
        manifest = read_manifest(trained / "ckpt_4.rnc")
        tc = manifest["extra"]["train_config"]
        assert (tc["ways"], tc["shots"], tc["queries"]) == (3, 1, 2)
        # omniglot evaluation uses as many queries as shots
        assert tc["eval_queries"] == 1

    def test_eval_is_deterministic_across_threads(self, corpus, trained, tmp_path):
        flags = [f"--eval.checkpoint={trained / 'ckpt_4.rnc'}", *fewshot_flags(corpus)]
        assert main(["eval", "--outdir", str(tmp_path / "a"), *flags]) == 0
        assert main(["eval", "--outdir", str(tmp_path / "b"), "--threads", "2", *flags]) == 0
        a = json.loads((tmp_path / "a" / "report.json").read_text())
        b = json.loads((tmp_path / "b" / "report.json").read_text())
        assert a["accuracies"] == b["accuracies"] and len(a["accuracies"]) == 4
        assert (tmp_path / "a" / "metrics.csv").exists()

    def test_resume_via_cli(self, corpus, trained, tmp_path):
        flags = ["--train.total_episodes=6", "--train.final_eval=false", *fewshot_flags(corpus)]
        assert main(["train", "--outdir", str(tmp_path / "r"), f"--train.resume={trained / 'ckpt_4.rnc'}", *flags]) == 0
        assert main(["train", "--outdir", str(tmp_path / "f"), *flags]) == 0
        assert (tmp_path / "r" / "ckpt_6.rnc").read_bytes() == (tmp_path / "f" / "ckpt_6.rnc").read_bytes()

    def test_export_viz(self, corpus, trained, tmp_path):
        code = main(["export-viz", "--outdir", str(tmp_path), f"--viz.checkpoint={trained / 'ckpt_4.rnc'}",
                     "--viz.queries=1", *fewshot_flags(corpus)])
        assert code == 0
        for name in ("embeddings.csv", "embeddings_pca.ppm", "embeddings_pca.png", "pair_features.csv",
                     "pair_features_pca.png"):
            assert (tmp_path / name).exists(), name
        assert len((tmp_path / "pair_features.csv").read_text().splitlines()) == 1 + 3 * 3

    def test_zsl_train_and_eval(self, zsl_files, tmp_path):
        files = [f"--data.features={zsl_files / 'train.csv'}", f"--data.test_features={zsl_files / 'test.csv'}",
                 f"--data.attributes={zsl_files / 'attributes.csv'}", f"--data.splits={zsl_files / 'splits.csv'}"]
        code = main(["zsl-train", "--outdir", str(tmp_path / "t"), "--train.total_episodes=5", "--train.batch_size=8",
                     "--zsl.fc1_hidden=8", "--zsl.fc3_hidden=8", *files])
        assert code == 0
        assert (tmp_path / "t" / "zsl_gzsl.csv").read_text().startswith("mode,t1_unseen,t1_seen,harmonic")
        code = main(["zsl-eval", "--outdir", str(tmp_path / "e"), f"--eval.checkpoint={tmp_path / 't' / 'ckpt_5.rnc'}",
                     *files])
        assert code == 0
        conv = json.loads((tmp_path / "e" / "zsl_conventional.json").read_text())
        gz = json.loads((tmp_path / "e" / "zsl_gzsl.json").read_text())
        assert gz["t1_unseen"] <= conv["mean"]

    def test_zsl_eval_rejects_fewshot_checkpoint(self, zsl_files, trained, tmp_path):
        code = main(["zsl-eval", "--outdir", str(tmp_path), f"--eval.checkpoint={trained / 'ckpt_4.rnc'}",
                     f"--data.test_features={zsl_files / 'test.csv'}",
                     f"--data.attributes={zsl_files / 'attributes.csv'}", f"--data.splits={zsl_files / 'splits.csv'}"])
        assert code == 2

    def test_synth(self, tmp_path):
        code = main(["synth", "--outdir", str(tmp_path), "--synth.n_train=300", "--synth.n_test=100",
                     "--synth.steps=5", "--synth.grid=16", "--synth.seeds=0", "--synth.relation_hidden=8,8"])
        assert code == 0
        for name in ("summary.json", "metrics.csv", "accuracy.png", "decision_relation_mlp_seed0.ppm",
                     "decision_relation_mlp_seed0.png", "pair_features_pca.csv", "pair_features_pca.png"):
            assert (tmp_path / name).exists(), name
