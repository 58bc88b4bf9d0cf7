import hashlib
import json

import pytest

from rotfusion import __version__
from rotfusion.config import format_config

from cli_chain import call, chain, collect, prepare


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    prepare(root)
    return root


@pytest.fixture(scope="module")
def runs(work):
    return chain(work, work / "first", threads=1), chain(work, work / "second", threads=4)


class TestDeterminism:
    def test_every_output_byte_identical(self, runs):
        a, b = runs
        assert set(a) == set(b)
        diff = [k for k in a if a[k] != b[k]]
        assert not diff

    def test_covers_every_subcommand(self, runs):
        a, _ = runs
        for name in ("dd.csv", "sim/pixels.csv", "model.rfm", "pred.csv", "pairs.csv",
                     "fit.json", "fit_additive.json", "loocv.json", "boot.json",
                     "quintile.json", "heatmap.csv", "spatial.csv", "positivity.json",
                     "trend.json", "run/manifest.json"):
            assert name in a, name

    def test_different_seed_changes_outputs(self, work, runs):
        a, _ = runs
        out = work / "seed4"
        out.mkdir()
        assert call("fit-sat", "--in", work / "sim" / "pixels.csv", "--out", out / "model.rfm",
                    "--set", "n_trees=40", "--seed", 4) == 0
        assert (out / "model.rfm").read_bytes() != a["model.rfm"]


class TestProvenance:
    def test_seed_and_version_recorded(self, runs):
        fit = json.loads(runs[0]["fit.json"])
        prov = fit["provenance"]
        assert prov["seed"] == 3 and prov["tool"] == "rotfusion"
        assert prov["version"] == __version__
        assert prov["command"] == "calibrate"
        assert "threads" not in prov["config"] and "log_level" not in prov["config"]

    def test_input_digests(self, work, runs):
        prov = json.loads(runs[0]["run/fit.json"])["provenance"]
        pixels = work / "sim" / "pixels.csv"
        assert prov["inputs"]["pixels"]["sha256"] == hashlib.sha256(pixels.read_bytes()).hexdigest()

    def test_manifest_lists_outputs_with_digests(self, work, runs):
        manifest = json.loads(runs[0]["run/manifest.json"])
        files = {e["file"]: e for e in manifest["files"]}
        for name in ("model.rfm", "fit.json", "loocv.json", "predictions.csv",
                     "summaries/heatmap.csv", "summaries/trend.json"):
            assert name in files, name
        for name, entry in files.items():
            data = runs[0]["run/" + name]
            assert entry["sha256"] == hashlib.sha256(data).hexdigest()
            assert entry["bytes"] == len(data)

    def test_echo_reproduces_run(self, work, runs):
        prov = json.loads(runs[0]["run/manifest.json"])["provenance"]
        cfg = work / "echo.cfg"
        cfg.write_text(format_config(prov["config"]))
        out = work / "echo"
        assert call("run", "--config", cfg, "--out", out) == 0
        again = collect(out)
        first = {k[len("run/"):]: v for k, v in runs[0].items() if k.startswith("run/")}
        assert again == first


class TestExitCodes:
    def test_version(self, capsys):
        with pytest.raises(SystemExit) as info:
            call("--version")
        assert info.value.code == 0
        assert __version__ in capsys.readouterr().out

    def test_bad_flag(self):
        with pytest.raises(SystemExit) as info:
            call("fit-sat", "--no-such-flag")
        assert info.value.code == 2

    def test_malformed_config_names_line(self, work, tmp_path, capsys):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("crop = corn\nn_trees = 40\nthis line has no equals sign\n")
        assert call("run", "--config", cfg, "--out", tmp_path / "o") == 2
        err = capsys.readouterr().err
        assert "bad.cfg:3" in err
        assert not (tmp_path / "o" / "manifest.json").exists()

    def test_unknown_key_and_bad_value(self, tmp_path, capsys):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("crop = corn\nn_treez = 40\n")
        assert call("fit-sat", "--config", cfg, "--out", tmp_path / "m.rfm") == 2
        assert "bad.cfg:2" in capsys.readouterr().err
        cfg.write_text("n_trees = many\n")
        assert call("fit-sat", "--config", cfg, "--out", tmp_path / "m.rfm") == 2
        assert "bad.cfg:1" in capsys.readouterr().err

    def test_missing_input(self, tmp_path):
        assert call("fit-sat", "--in", tmp_path / "nope.csv", "--out", tmp_path / "m.rfm") == 2
        assert not (tmp_path / "m.rfm").exists()

    def test_data_error(self, work, tmp_path):
        src = (work / "sim" / "pixels.csv").read_text()
        (tmp_path / "one_arm.csv").write_text(src.replace(",SC,", ",CC,"))
        assert call("fit-sat", "--in", tmp_path / "one_arm.csv", "--out",
                    tmp_path / "m.rfm", "--set", "n_trees=10") == 3
        header = src.splitlines()[0].replace("gdd", "gdx")
        (tmp_path / "bad_header.csv").write_text(header + "\n" + "\n".join(src.splitlines()[1:]))
        assert call("fit-sat", "--in", tmp_path / "bad_header.csv", "--out",
                    tmp_path / "m.rfm", "--set", "n_trees=10") == 3

    def test_numerical_failure(self, runs, tmp_path, capsys):
        lines = runs[0]["rows.csv"].decode().splitlines()
        k = lines[0].split(",").index("exp_effect")
        out = [lines[0]]
        for line in lines[1:]:
            f = line.split(",")
            f[k] = repr(float(f[k]) * 1e160)
            out.append(",".join(f))
        (tmp_path / "huge.csv").write_text("\n".join(out) + "\n")
        assert call("calibrate", "--in", tmp_path / "huge.csv", "--out", tmp_path / "f.json") == 4
        assert "numerical failure" in capsys.readouterr().err
