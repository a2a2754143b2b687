import csv
import json

import pytest

from equimap.cli import COMMANDS, build_parser, main


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def test_help_lists_all_flags(capsys):
    for name, (_, opts) in COMMANDS.items():
        with pytest.raises(SystemExit):
            build_parser().parse_args([name, "--help"])
        out = capsys.readouterr().out
        for flag in ["--seed", "--config", "--dry-run", "--threads", "--verbose", "--output"] + [o[0] for o in opts]:
            assert flag in out, (name, flag)


@pytest.mark.parametrize("argv", [["learn-map", "--bogus"], ["learn-map", "--k", "foo"], ["learn-map", "--m", "0"],
                                  ["learn-map", "--method", "xx"], ["stitch"], ["compensate", "--angles", "9:0:1"],
                                  ["selftest", "--threads", "0"]])
def test_invalid_configuration_exits_2(capsys, argv):
    assert run(capsys, *argv)[0] == 2


def test_k_zero_is_valid(capsys):
    code, out, _ = run(capsys, "learn-map", "--k", "0", "--dry-run")
    assert code == 0 and json.loads(out)["config"]["k"] == 0


def test_config_file_and_override(capsys, tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"method": "rr", "lam": 2.5, "n-train": 7}))
    code, out, _ = run(capsys, "learn-map", "--config", str(cfg), "--lam", "0.5", "--dry-run")
    plan = json.loads(out)["config"]
    assert code == 0
    assert plan["method"] == "rr" and plan["lam"] == 0.5 and plan["n_train"] == 7


@pytest.mark.parametrize("content", ['{"nope": 1}', '{"method": "zz"}', "[1]", "not json",
                                     '{"command": "stitch"}'])
def test_bad_config_file_exits_2(capsys, tmp_path, content):
    cfg = tmp_path / "c.json"
    cfg.write_text(content)
    assert run(capsys, "learn-map", "--config", str(cfg))[0] == 2


def test_runtime_error_exits_1(capsys, tmp_path):
    assert run(capsys, "extract", "--data", str(tmp_path / "missing"), "-o", str(tmp_path))[0] == 1


def test_selftest(capsys):
    code, out, _ = run(capsys, "selftest", "--n", "3", "--verbose", "0")
    assert code == 0
    assert out.count("PASS") == 5 and "FAIL" not in out


def test_synth_extract_learn_eval(capsys, tmp_path):
    d = tmp_path / "data"
    assert run(capsys, "synth", "--kind", "generic", "--n", "12", "-o", str(d), "--verbose", "0")[0] == 0
    assert (d / "index.json").exists()
    assert run(capsys, "extract", "--data", str(d), "-o", str(tmp_path / "f"), "--verbose", "0")[0] == 0
    assert len(list((tmp_path / "f").glob("*.eqf"))) == 12
    out = tmp_path / "map"
    code, text, _ = run(capsys, "learn-map", "--data", str(d), "--g", "rot180", "--k", "1", "--m", "1",
                        "--n-test", "4", "-o", str(out), "--verbose", "0")
    assert code == 0 and json.loads(text)["mean"] < 1e-9
    rows = list(csv.DictReader(open(out / "learn-map-rot180-hog.csv")))
    assert rows and "fit_time" in rows[0]
    code, text, _ = run(capsys, "eval-map", "--map", str(out / "map.eqm"), "--n-test", "3", "-o", str(out),
                        "--verbose", "0")
    assert code == 0 and json.loads(text)["mean"] < 1e-9


def test_seed_reproducibility(capsys, tmp_path):
    outs = []
    for i in range(2):
        code, text, _ = run(capsys, "learn-map", "--g", "rot:30", "--n-train", "6", "--n-test", "3", "--seed", "4",
                            "-o", str(tmp_path / str(i)), "--verbose", "0")
        r = json.loads(text)
        r.pop("fit_time")
        outs.append(r)
    assert outs[0] == outs[1]


@pytest.mark.slow
def test_network_commands(capsys, tmp_path):
    q = ["--verbose", "0"]
    for seed, name in [(0, "a"), (1, "b")]:
        code, text, _ = run(capsys, "train-net", "--n", "300", "--n-test", "100", "--epochs", "2", "--seed",
                            str(seed), "-o", str(tmp_path / name), *q)
        assert code == 0 and "test_error" in json.loads(text)
    net_a, net_b = str(tmp_path / "a" / "net"), str(tmp_path / "b" / "net")
    code, text, _ = run(capsys, "learn-translayer", "--net", net_a, "--n", "100", "--n-test", "50", "--epochs", "1",
                        "-o", str(tmp_path / "t"), *q)
    assert code == 0 and {"original", "uncompensated", "compensated"} <= set(json.loads(text))
    assert (tmp_path / "t" / "translayer" / "manifest.json").exists()
    code, text, _ = run(capsys, "invariance", "--net", net_a, "--layer", str(tmp_path / "t" / "translayer"),
                        "--g", "vflip", "--n", "50", "--n-test", "50", "-o", str(tmp_path / "i"), *q)
    assert code == 0 and 0 <= json.loads(text)["p"] <= 16
    code, text, _ = run(capsys, "stitch", "--net-a", net_a, "--net-b", net_b, "--n", "100", "--n-test", "50",
                        "--epochs", "1", "-o", str(tmp_path / "s"), *q)
    assert code == 0 and "error_learned" in json.loads(text)
