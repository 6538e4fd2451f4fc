"""CLI subcommands, error categories, and pipeline consistency."""

import json

import numpy as np
import pytest

from stldistill import augment as ag
from stldistill import cli
from stldistill import formula as fm
from stldistill.encoder import EncoderConfig, build_encoder, load_embeddings, save_encoder
from stldistill.errors import ConfigError
from stldistill.kernel import load_gram


def run(argv, capsys=None):
    code = cli.main(argv)
    return code


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """Signals + tiny dataset shared by the CLI tests."""
    root = tmp_path_factory.mktemp("cli")
    assert run(["gen-signals", "--n", "40", "--points", "101", "--vars", "3",
                "--horizon", "100", "--seed", "3", "--out", str(root / "sig.bin")]) == 0
    assert run(["gen-dataset", "--total", "60", "--seed", "4",
                "--out", str(root / "data.jsonl")]) == 0
    return root


class TestErrors:
    def test_missing_file_is_io_error(self, tmp_path, capsys):
        code = run(["kernel", "--dataset", str(tmp_path / "absent.jsonl"),
                    "--signals", str(tmp_path / "absent.bin"),
                    "--out", str(tmp_path / "gram.bin")])
        captured = capsys.readouterr()
        assert code == 2
        assert captured.err.startswith("E_IO:")

    def test_bad_flag_is_config_error(self, capsys):
        code = run(["gen-signals", "--n", "1", "--out", "x", "--bogus"])
        captured = capsys.readouterr()
        assert code == 3
        assert captured.err.startswith("E_CONFIG:")

    def test_unknown_config_key(self, tmp_path, capsys):
        cfg = tmp_path / "aug.cfg"
        cfg.write_text("not_a_key = 1\n")
        code = run(["gen-dataset", "--total", "10", "--config", str(cfg),
                    "--out", str(tmp_path / "d.jsonl")])
        captured = capsys.readouterr()
        assert code == 3
        assert captured.err.startswith("E_CONFIG:")
        assert "not_a_key" in captured.err

    def test_validation_error_is_numeric(self, workdir, tmp_path, capsys):
        bad = tmp_path / "bad.jsonl"
        bad.write_text(json.dumps({
            "id": "r0", "formula_text": "always[0,500] x_0 >= 0",
            "seed_id": 0, "variant_kind": "parametric",
        }) + "\n" + json.dumps({
            "id": "r1", "formula_text": "x_0 >= 0",
            "seed_id": 1, "variant_kind": "parametric",
        }) + "\n")
        code = run(["kernel", "--dataset", str(bad),
                    "--signals", str(workdir / "sig.bin"),
                    "--out", str(tmp_path / "gram.bin")])
        captured = capsys.readouterr()
        assert code == 4
        assert captured.err.startswith("E_NUMERIC:")


class TestKernelCommand:
    def test_two_formula_gram_csv(self, workdir, tmp_path):
        data = tmp_path / "two.jsonl"
        data.write_text(
            json.dumps({"id": "a", "formula_text": "x_0 >= 0.5",
                        "seed_id": 0, "variant_kind": "parametric"}) + "\n" +
            json.dumps({"id": "b", "formula_text": "not x_0 >= 0.5",
                        "seed_id": 1, "variant_kind": "parametric"}) + "\n"
        )
        out = tmp_path / "gram.bin"
        assert run(["kernel", "--dataset", str(data),
                    "--signals", str(workdir / "sig.bin"), "--out", str(out)]) == 0
        gm = load_gram(out)
        assert gm.size == 2
        assert gm.values[0, 0] == 1.0 and gm.values[1, 1] == 1.0
        assert gm.values[0, 1] == pytest.approx(np.exp(-10.0), rel=1e-9)
        lines = (tmp_path / "gram.bin.csv").read_text().strip().splitlines()
        assert lines[0] == "id,a,b"
        assert len(lines) == 3

    def test_gram_determinism(self, workdir, tmp_path):
        out1, out2 = tmp_path / "g1.bin", tmp_path / "g2.bin"
        for out in (out1, out2):
            assert run(["kernel", "--dataset", str(workdir / "data.jsonl"),
                        "--signals", str(workdir / "sig.bin"), "--out", str(out)]) == 0
        assert out1.read_bytes() == out2.read_bytes()


class TestConfigPlumbing:
    def test_kv_file_and_sets(self, tmp_path):
        cfg = tmp_path / "aug.cfg"
        cfg.write_text("min_depth = 4\nnum_vars = 2  # comment\n")
        mapping = cli.load_kv_file(cfg)
        assert mapping == {"min_depth": "4", "num_vars": "2"}
        built = cli.build_config(ag.AugmentConfig, mapping, "augment")
        assert built.min_depth == 4 and built.num_vars == 2

    def test_tuple_and_optional_coercion(self):
        from stldistill.bench import BenchConfig

        built = cli.build_config(
            BenchConfig,
            {"batch_sizes": "8,16", "memory_budget_mb": "none"},
            "bench",
        )
        assert built.batch_sizes == (8, 16)
        assert built.memory_budget_mb is None
        built2 = cli.build_config(BenchConfig, {"memory_budget_mb": "12.5"}, "bench")
        assert built2.memory_budget_mb == 12.5

    def test_unknown_key_raises(self):
        with pytest.raises(ConfigError):
            cli.build_config(ag.AugmentConfig, {"zzz": "1"}, "augment")

    def test_resolved_line_lists_all_fields(self):
        line = cli.resolved_line("augment", ag.AugmentConfig())
        assert "min_depth=5" in line
        assert "frac_equivalent=0.104" in line


@pytest.fixture(scope="module")
def trained(workdir, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    code = run([
        "train", "--dataset", str(workdir / "data.jsonl"),
        "--signals", str(workdir / "sig.bin"),
        "--out-dir", str(out),
        "--pooling", "cls", "--epochs", "2", "--lr", "1e-3", "--seed", "5",
        "--set", "micro_batch=8", "--set", "accumulation=2",
        "--set", "n_signals=40",
    ])
    assert code == 0
    return out


class TestPipeline:
    def test_train_embed_similarity_consistency(self, workdir, trained, tmp_path):
        # embeddings of the validation subset reproduce the logged alignment
        from stldistill.kernel import gram_from_robustness
        from stldistill.objective import kernel_alignment
        from stldistill.semantics import robustness_matrix
        from stldistill.signals import load_trajectories

        emb_path = tmp_path / "val.stlv"
        val_ids = (trained / "val_ids.txt").read_text().split()
        records = {r.id: r for r in ag.load_dataset(workdir / "data.jsonl")}
        val_dataset = tmp_path / "val.jsonl"
        ag.save_dataset([records[i] for i in val_ids], val_dataset)

        assert run(["embed", "--model", str(trained / "encoder_last.stle"),
                    "--dataset", str(val_dataset), "--out", str(emb_path)]) == 0
        sim_path = tmp_path / "sims.csv"
        assert run(["similarity", "--embeddings", str(emb_path),
                    "--out", str(sim_path)]) == 0

        emb = load_embeddings(emb_path).astype(np.float64)
        signals = load_trajectories(workdir / "sig.bin")
        formulae = [fm.parse(records[i].formula_text) for i in val_ids]
        k = gram_from_robustness(robustness_matrix(formulae, signals), 0.2).values
        align = kernel_alignment(k, emb @ emb.T)

        rows = (trained / "metrics.tsv").read_text().strip().splitlines()[1:]
        val_rows = [r.split("\t") for r in rows if r.split("\t")[1] == "val"]
        logged = float(val_rows[-1][3])
        assert align == pytest.approx(logged, abs=1e-6)

        sim_lines = sim_path.read_text().strip().splitlines()
        assert len(sim_lines) == len(val_ids)

    def test_invert_nn_self_retrieval(self, workdir, trained, capsys):
        records = ag.load_dataset(workdir / "data.jsonl")
        query = records[3].formula_text
        code = run(["invert-nn", "--model", str(trained / "encoder_last.stle"),
                    "--corpus", str(workdir / "data.jsonl"),
                    "--query", query, "--top-k", "3"])
        captured = capsys.readouterr()
        assert code == 0
        first = captured.out.strip().splitlines()[0].split("\t")
        assert first[0] == "1"
        assert first[2] == records[3].id

    def test_gen_pairs_and_eval_agreement(self, workdir, trained, tmp_path, capsys):
        pairs_path = tmp_path / "pairs.jsonl"
        assert run(["gen-pairs", "--dataset", str(workdir / "data.jsonl"),
                    "--signals", str(workdir / "sig.bin"),
                    "--per-category", "6", "--seed", "7",
                    "--out", str(pairs_path)]) == 0
        report_path = tmp_path / "agreement.json"
        assert run(["eval-agreement", "--model", str(trained / "encoder_last.stle"),
                    "--pairs", str(pairs_path),
                    "--signals", str(workdir / "sig.bin"),
                    "--out", str(report_path)]) == 0
        captured = capsys.readouterr()
        assert "Neural similarity" in captured.out
        report = json.loads(report_path.read_text())
        assert set(report) == {"equivalent", "non_equivalent", "lexically_similar"}
        assert report["equivalent"]["kernel_similarity"] >= 0.99

    def test_probe_command_neural_and_kernel(self, workdir, trained, tmp_path):
        gram_path = tmp_path / "gram.bin"
        assert run(["kernel", "--dataset", str(workdir / "data.jsonl"),
                    "--signals", str(workdir / "sig.bin"),
                    "--out", str(gram_path)]) == 0
        out_n = tmp_path / "probe_neural.json"
        assert run(["probe", "--model", str(trained / "encoder_last.stle"),
                    "--dataset", str(workdir / "data.jsonl"),
                    "--signals", str(workdir / "sig.bin"),
                    "--target", "satisfaction", "--epochs", "50",
                    "--out", str(out_n)]) == 0
        out_k = tmp_path / "probe_kernel.json"
        assert run(["probe", "--gram", str(gram_path),
                    "--dataset", str(workdir / "data.jsonl"),
                    "--signals", str(workdir / "sig.bin"),
                    "--target", "robustness", "--epochs", "50",
                    "--out", str(out_k)]) == 0
        neural = json.loads(out_n.read_text())
        kernel = json.loads(out_k.read_text())
        assert neural["feature_source"] == "neural"
        assert kernel["feature_source"] == "kernel"

    def test_bench_command(self, workdir, tmp_path):
        model_path = tmp_path / "bench_model.stle"
        save_encoder(build_encoder(EncoderConfig(
            d_model=32, n_layers=1, n_heads=2, d_ff=64, max_len=256, d_out=16,
            seed=8)), model_path)
        out = tmp_path / "bench.tsv"
        assert run(["bench", "similarity", "--dataset", str(workdir / "data.jsonl"),
                    "--model", str(model_path), "--grid", "B=8;N=20",
                    "--reps", "1", "--out", str(out)]) == 0
        lines = out.read_text().strip().splitlines()
        assert len(lines) == 4  # header + 3 methods

    def test_end_to_end_determinism(self, tmp_path):
        """Two identical pipelines give identical logs and embedding bytes."""
        def pipeline(tag):
            root = tmp_path / tag
            root.mkdir()
            assert run(["gen-signals", "--n", "30", "--points", "101", "--vars", "3",
                        "--horizon", "100", "--seed", "11",
                        "--out", str(root / "sig.bin")]) == 0
            assert run(["gen-dataset", "--total", "40", "--seed", "12",
                        "--out", str(root / "data.jsonl")]) == 0
            assert run(["train", "--dataset", str(root / "data.jsonl"),
                        "--signals", str(root / "sig.bin"),
                        "--out-dir", str(root / "run"),
                        "--epochs", "2", "--seed", "13",
                        "--set", "micro_batch=8", "--set", "accumulation=1",
                        "--set", "n_signals=30"]) == 0
            assert run(["embed", "--model", str(root / "run" / "encoder_last.stle"),
                        "--dataset", str(root / "data.jsonl"),
                        "--out", str(root / "emb.stlv")]) == 0
            return root

        a, b = pipeline("a"), pipeline("b")
        assert (a / "data.jsonl").read_bytes() == (b / "data.jsonl").read_bytes()
        assert (a / "sig.bin").read_bytes() == (b / "sig.bin").read_bytes()
        assert (a / "run" / "metrics.tsv").read_text() == (b / "run" / "metrics.tsv").read_text()
        assert (a / "emb.stlv").read_bytes() == (b / "emb.stlv").read_bytes()
