import csv

import pytest

from hynt.cli import EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, main
from hynt.config import ConfigError, RunConfig, parse_config
from hynt.ingest import load_dataset

TINY = ["--dim", "8", "--set", "model.context_heads=2", "--set", "model.prediction_heads=2",
        "--set", "model.context_layers=1", "--set", "model.prediction_layers=1"]


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    assert main(["gen-data", "--out", str(out), "--facts", "60", "--entities", "12", "--seed", "7"]) == EXIT_OK
    return out


@pytest.fixture(scope="module")
def run_dir(data_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    args = ["train", "--data", str(data_dir), "--out", str(out), "--epochs", "2", "--set", "train.validate_every=1", *TINY]
    assert main(args) == EXIT_OK
    return out


class TestConfig:
    def test_defaults(self):
        cfg = RunConfig()
        assert cfg.model.dim == 256 and cfg.train.eval_mode == "filtered"

    def test_parse(self):
        cfg = parse_config("[model]\ndim = 16\n\n[train]\nno_mask = R, V_N\nlr=1e-3\n[data]\nnormalize = no\n")
        assert cfg.model.dim == 16
        assert cfg.train.no_mask == ("R", "V_N")
        assert cfg.train.lr == 1e-3
        assert cfg.data.normalize is False

    def test_unknown_key_has_location(self):
        with pytest.raises(ConfigError, match=r"exp\.cfg:3: unknown key 'depth'"):
            parse_config("[model]\ndim = 16\ndepth = 3\n", path="exp.cfg")

    def test_unknown_section(self):
        with pytest.raises(ConfigError, match=":1:"):
            parse_config("[optimizer]\n", path="x")

    def test_bad_value(self):
        with pytest.raises(ConfigError, match="model.dim"):
            parse_config("[model]\ndim = wide\n", path="x")

    def test_dump_round_trip(self):
        cfg = parse_config("[model]\ndim = 16\nencoding = hadamard\n[train]\nno_mask = E_qual\n")
        again = parse_config(cfg.dumps())
        assert again == cfg


class TestGenData:
    def test_byte_identical(self, tmp_path):
        for name in ("a", "b"):
            assert main(["gen-data", "--out", str(tmp_path / name), "--seed", "7", "--facts", "50"]) == EXIT_OK
        for f in ("train.txt", "valid.txt", "test.txt", "spec.txt"):
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()

    def test_reparses_and_counts(self, data_dir):
        ds = load_dataset(data_dir)
        assert ds.violations() == []
        assert len(ds.train) + len(ds.valid) + len(ds.test) == 60
        assert len(ds.vocabulary.entities) <= 12

    def test_bad_spec(self, tmp_path):
        assert main(["gen-data", "--out", str(tmp_path), "--entities", "0"]) == EXIT_USAGE


class TestTrain:
    def test_outputs(self, run_dir):
        for sub in ("best", "last"):
            assert (run_dir / sub / "tensors.bin").exists()
            assert (run_dir / sub / "normalization.txt").exists()
        rows = list(csv.DictReader(open(run_dir / "log.csv")))
        assert [r["epoch"] for r in rows] == ["1", "2"]
        assert set(rows[0]) >= {"epoch", "lr", "loss", "val_link_mrr", "val_rmse"}
        frozen = parse_config((run_dir / "config.txt").read_text())
        assert frozen.model.dim == 8 and frozen.train.epochs == 2

    def test_rerun_identical(self, data_dir, run_dir, tmp_path):
        args = ["train", "--data", str(data_dir), "--out", str(tmp_path), "--epochs", "2", "--set", "train.validate_every=1", *TINY]
        assert main(args) == EXIT_OK
        assert (tmp_path / "best" / "tensors.bin").read_bytes() == (run_dir / "best" / "tensors.bin").read_bytes()
        assert (tmp_path / "log.csv").read_text() == (run_dir / "log.csv").read_text()

    @pytest.mark.parametrize("flags", [["--prediction-head", "linear"], ["--encoding", "hadamard"], ["--no-mask", "V_N", "--no-mask", "R"]])
    def test_ablation_flags(self, data_dir, tmp_path, flags):
        args = ["train", "--data", str(data_dir), "--out", str(tmp_path), "--epochs", "1", *TINY, *flags]
        assert main(args) == EXIT_OK
        frozen = (tmp_path / "config.txt").read_text()
        assert flags[1] in frozen

    def test_config_error_exit(self, data_dir, tmp_path, capsys):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("[train]\nepochs = 1\nwarmup = 5\n")
        assert main(["train", "--config", str(cfg), "--data", str(data_dir)]) == EXIT_CONFIG
        assert "bad.cfg:3:" in capsys.readouterr().err

    def test_invalid_choice_in_config(self, data_dir, tmp_path):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("[model]\nencoding = sum\n")
        assert main(["train", "--config", str(cfg), "--data", str(data_dir)]) == EXIT_CONFIG

    def test_data_error_exit(self, tmp_path, capsys):
        (tmp_path / "train.txt").write_text("a r\n")
        assert main(["train", "--data", str(tmp_path), "--out", str(tmp_path / "o")]) == EXIT_DATA
        assert "train.txt:1" in capsys.readouterr().err

    def test_numeric_failure_exit(self, data_dir, tmp_path):
        args = ["train", "--data", str(data_dir), "--out", str(tmp_path), "--epochs", "2", "--set", "train.lr=1e300", *TINY]
        assert main(args) == EXIT_NUMERIC


class TestEval:
    def test_report_files(self, run_dir, data_dir, tmp_path, capsys):
        prefix = tmp_path / "report"
        assert main(["eval", str(run_dir / "best"), "--data", str(data_dir), "--out", str(prefix)]) == EXIT_OK
        printed = capsys.readouterr().out
        assert printed == (tmp_path / "report.txt").read_text()
        rows = list(csv.DictReader(open(tmp_path / "report.csv")))
        assert {(r["task"], r["scope"]) for r in rows} >= {("link", "tri"), ("link", "all"), ("numeric", "all")}

    def test_filtered_at_least_raw(self, run_dir, data_dir, tmp_path):
        for mode in ("raw", "filtered"):
            assert main(["eval", str(run_dir / "best"), "--data", str(data_dir), "--mode", mode, "--out", str(tmp_path / mode)]) == 0
        get = lambda m: {(r["task"], r["scope"]): r for r in csv.DictReader(open(tmp_path / f"{m}.csv"))}
        raw, filt = get("raw"), get("filtered")
        for key in (("link", "all"), ("relation", "all")):
            assert float(filt[key]["mrr"]) >= float(raw[key]["mrr"])

    def test_scope_all_equals_tri_without_qualifiers(self, run_dir, data_dir, tmp_path):
        bare = tmp_path / "bare"
        bare.mkdir()
        for split in ("train", "valid", "test"):
            lines = (data_dir / f"{split}.txt").read_text().splitlines()
            (bare / f"{split}.txt").write_text("".join(" ".join(l.split()[:3]) + "\n" for l in lines))
        assert main(["eval", str(run_dir / "best"), "--data", str(bare), "--out", str(tmp_path / "r")]) == 0
        rows = {(r["task"], r["scope"]): r for r in csv.DictReader(open(tmp_path / "r.csv"))}
        for task in ("link", "relation", "numeric"):
            tri = {k: v for k, v in rows[(task, "tri")].items() if k != "scope"}
            every = {k: v for k, v in rows[(task, "all")].items() if k != "scope"}
            assert tri == every

    def test_missing_checkpoint(self, data_dir, tmp_path):
        assert main(["eval", str(tmp_path), "--data", str(data_dir)]) == EXIT_DATA


class TestPredict:
    def first_fact(self, data_dir):
        return (data_dir / "train.txt").read_text().splitlines()[0].split()

    def test_numeric_query(self, run_dir, data_dir, capsys):
        # synthetic numeric facts are "e attr #v point_in_time #year"
        numeric = next(l.split() for l in (data_dir / "train.txt").read_text().splitlines() if l.split()[2].startswith("#"))
        numeric[2] = "#?"
        assert main(["predict", str(run_dir / "best"), " ".join(numeric)]) == EXIT_OK
        float(capsys.readouterr().out.strip())

    def test_entity_query_top_n(self, run_dir, data_dir, capsys):
        tokens = self.first_fact(data_dir)
        tokens[0] = "?"
        assert main(["predict", str(run_dir / "best"), " ".join(tokens), "--top", "3"]) == EXIT_OK
        lines = capsys.readouterr().out.splitlines()
        assert len(lines) == 3
        probs = [float(l.split("\t")[1]) for l in lines]
        assert probs == sorted(probs, reverse=True)

    def test_relation_query(self, run_dir, data_dir, capsys):
        tokens = self.first_fact(data_dir)
        tokens[1] = "?"
        assert main(["predict", str(run_dir / "best"), " ".join(tokens), "--top", "2"]) == EXIT_OK
        assert len(capsys.readouterr().out.splitlines()) == 2

    def test_two_holes_is_usage_error(self, run_dir):
        assert main(["predict", str(run_dir / "best"), "? r ?"]) == EXIT_USAGE

    def test_unknown_token(self, run_dir):
        assert main(["predict", str(run_dir / "best"), "? nosuchrel e1"]) == EXIT_DATA


class TestInspect:
    def test_statistics_table(self, data_dir, capsys):
        assert main(["inspect", str(data_dir)]) == EXIT_OK
        out = capsys.readouterr().out
        for label in ("|V_D|", "|V_N|", "|R_D|", "|R_N|", "|E|", "w/ qual.", "|E_tri|", "|E_qual|"):
            assert label in out
        e_line = next(l for l in out.splitlines() if l.startswith("|E| "))
        assert int(e_line.split()[-1].replace(",", "")) == 60


def test_no_command_is_usage_error():
    assert main([]) == EXIT_USAGE
