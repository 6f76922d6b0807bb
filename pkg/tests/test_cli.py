import itertools
import json

import numpy as np
import pytest

import plte.cli as cli
from plte.cli import bench, format_bench, length_bucket, main
from plte.data import entity_scores, read_conll
from plte.lattice import mirror
from plte.trainer import load_model

from toys import synthetic_model

SMALL_CONFIG = """\
epochs = 2
char_dim = 8
bigram_dim = 8
word_dim = 8
gru_hidden = 8
d_model = 12
heads = 3
"""

RELATION_IDS = {f"r{i}": i for i in range(1, 9)}


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    d = tmp_path_factory.mktemp("synth")
    assert main(["synth", "--out", str(d), "--seed", "0", "--train-size", "8", "--dev-size", "3",
                 "--test-size", "3"]) == 0
    (d / "small.cfg").write_text(SMALL_CONFIG, encoding="utf-8")
    return d


def train_args(d, model, *extra):
    return ["train", "--train", str(d / "train.conll"), "--dev", str(d / "dev.conll"),
            "--lexicon", str(d / "lexicon.txt"), "--config", str(d / "small.cfg"),
            "--model", str(model), "--seed", "4", *extra]


@pytest.fixture(scope="module")
def trained(corpus, tmp_path_factory):
    model = tmp_path_factory.mktemp("model") / "m.npz"
    metrics = model.with_suffix(".jsonl")
    assert main(train_args(corpus, model, "--metrics", str(metrics))) == 0
    return model, metrics


def parse_dump(text):
    """Relation matrix of an inspect dump as r-ids."""
    lines = text.splitlines()
    start = lines.index("relations:") + 2
    end = lines.index("mask:")
    return np.array([[RELATION_IDS[c] for c in line.split("\t")[1:]] for line in lines[start:end]])


class TestTrain:
    def test_writes_model_and_metrics(self, trained):
        model, metrics = trained
        records = [json.loads(line) for line in metrics.read_text().splitlines()]
        assert len(records) == 2 and records[0]["epoch"] == 1
        assert {"loss", "dev_f1", "lr"} <= set(records[0])
        assert load_model(model).config.gru_hidden == 8

    def test_missing_train_file(self, tmp_path, capsys):
        missing = tmp_path / "nope.conll"
        assert main(["train", "--train", str(missing), "--model", str(tmp_path / "m.npz")]) == 1
        assert str(missing) in capsys.readouterr().err

    def test_unknown_flag(self, capsys):
        with pytest.raises(SystemExit) as e:
            main(["train", "--bogus"])
        assert e.value.code == 2
        assert "usage" in capsys.readouterr().err

    @pytest.mark.parametrize("flag,check", [
        ("no-porous", lambda m: not m.config.encoder.use_porous and "rel.key" in m.params),
        ("no-lasa", lambda m: not m.config.encoder.use_lasa and not any(k.startswith("rel.") for k in m.params)),
        ("none", lambda m: m.config.encoder.use_porous and m.config.encoder.use_lasa),
    ])
    def test_ablate(self, corpus, tmp_path, capsys, flag, check):
        out = tmp_path / "m.npz"
        assert main(train_args(corpus, out, "--ablate", flag, "--epochs", "1")) == 0
        assert check(load_model(out))
        assert len(capsys.readouterr().out.strip().splitlines()) == 1

    def test_deterministic_given_seed(self, corpus, tmp_path, capsys):
        a, b = tmp_path / "a.npz", tmp_path / "b.npz"
        assert main(train_args(corpus, a, "--epochs", "1")) == 0
        assert main(train_args(corpus, b, "--epochs", "1")) == 0
        ma, mb = load_model(a), load_model(b)
        for k, v in ma.params.items():
            assert v.data.tobytes() == mb.params[k].data.tobytes()

    def test_bad_config(self, corpus, tmp_path, capsys):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("no_such_key = 1\n")
        args = train_args(corpus, tmp_path / "m.npz")
        args[args.index("--config") + 1] = str(cfg)
        assert main(args) == 1
        assert "no_such_key" in capsys.readouterr().err


class TestEvalPredict:
    def test_eval_prints_scores(self, corpus, trained, capsys):
        assert main(["eval", "--model", str(trained[0]), "--test", str(corpus / "test.conll")]) == 0
        out = capsys.readouterr().out
        assert out.splitlines()[1].startswith("overall")

    def test_predict_round_trip_and_consistency(self, corpus, trained, tmp_path, capsys):
        pred_path = tmp_path / "pred.conll"
        test = corpus / "test.conll"
        assert main(["predict", "--model", str(trained[0]), "--test", str(test), "--output", str(pred_path)]) == 0
        gold, pred = read_conll(test), read_conll(pred_path)
        assert [s.chars for s in pred] == [s.chars for s in gold]
        f1 = entity_scores([s.tags for s in gold], [s.tags for s in pred]).f1
        capsys.readouterr()
        main(["eval", "--model", str(trained[0]), "--test", str(test)])
        overall = capsys.readouterr().out.splitlines()[1].split()
        assert float(overall[3]) == pytest.approx(f1, abs=5e-5)

    def test_predict_stdout(self, corpus, trained, capsys):
        assert main(["predict", "--model", str(trained[0]), "--test", str(corpus / "test.conll")]) == 0
        assert "\t" in capsys.readouterr().out

    def test_broken_model(self, corpus, tmp_path, capsys):
        bad = tmp_path / "m.npz"
        bad.write_bytes(b"PK\x03\x04 not really")
        assert main(["eval", "--model", str(bad), "--test", str(corpus / "test.conll")]) == 1
        assert "model" in capsys.readouterr().err


class TestInspect:
    def test_city_bridge_sentence(self, tmp_path, capsys):
        lex = tmp_path / "lex.txt"
        lex.write_text("南京\n南京市\n市长\n长江\n大桥\n", encoding="utf-8")
        assert main(["inspect", "南京市长江大桥", "--lexicon", str(lex)]) == 0
        L = parse_dump(capsys.readouterr().out)
        assert L.shape == (12, 12)
        assert L[0, 1] == 1
        for i, j in itertools.product(range(12), repeat=2):
            assert L[j, i] == mirror(L[i, j])

    def test_single_character(self, capsys):
        assert main(["inspect", "南"]) == 0
        out = capsys.readouterr().out
        assert parse_dump(out).tolist() == [[5]]
        assert out.rstrip().splitlines()[-1].split()[-1] == "1"


class TestBench:
    def test_buckets(self):
        assert [length_bucket(n) for n in (1, 20, 21, 40, 41, 61, 80, 81, 500)] == [
            "<=20", "<=20", "21-40", "21-40", "41-60", "61-80", "61-80", ">80", ">80"]

    def test_report_shape_and_median(self, monkeypatch):
        model, sc = synthetic_model(12)
        durations = itertools.cycle([3.0, 1.0, 2.0])
        clock = {"t": 0.0, "calls": 0}

        def fake_clock():
            if clock["calls"] % 2:
                clock["t"] += next(durations)
            clock["calls"] += 1
            return clock["t"]

        monkeypatch.setattr(cli.time, "perf_counter", fake_clock)
        report = bench(model, [s.chars for s in sc.train], [1, 16], reps=3)
        assert report["gate"] == "passed" and report["reps"] == 3
        assert set(report["throughput"]) == {1, 16}
        assert report["throughput"][1] == pytest.approx(12 / 2.0)  # median of 3, 1, 2
        assert report["speedup"][16] == pytest.approx(1.0)
        text = format_bench(report)
        assert "speedup" in text and "<=20" in text

    def test_gate_blocks_timing(self, monkeypatch):
        model, sc = synthetic_model(4)
        real = cli.predict_examples

        def broken(m, ex, bs=16):
            out = real(m, ex, bs)
            return out if bs == 1 else [["O"] * len(t) for t in out[:-1]] + [["S-PER"] * len(out[-1])]

        monkeypatch.setattr(cli, "predict_examples", broken)
        monkeypatch.setattr(cli.time, "perf_counter", lambda: pytest.fail("timed before the gate passed"))
        with pytest.raises(cli.CommandError, match="gate"):
            bench(model, [s.chars for s in sc.train], [1, 16], reps=1)

    def test_cli_bench(self, corpus, capsys):
        assert main(["bench", "--test", str(corpus / "train.conll"), "--lexicon", str(corpus / "lexicon.txt"),
                     "--config", str(corpus / "small.cfg"), "--bench-batches", "1,4", "--reps", "1"]) == 0
        out = capsys.readouterr().out
        assert "correctness gate: passed" in out

    def test_bad_batch_list(self, corpus, capsys):
        assert main(["bench", "--test", str(corpus / "train.conll"), "--bench-batches", "1,x"]) == 1
