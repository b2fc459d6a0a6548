import json
import os
import subprocess
import sys

import pytest

from guardmpc import cli, dataio


def run_cli(*argv):
    return cli.main(list(argv))


@pytest.fixture(scope="module")
def adv_policy_path(tmp_path_factory):
    path = tmp_path_factory.mktemp("pol") / "adv.json"
    assert run_cli("fixture-policy", "--benchmark", "stir_tank",
                   "--kind", "adversarial", "--out", str(path)) == 0
    return str(path)


class TestGen:
    def test_deterministic_hash(self, tmp_path):
        for sub in ("a", "b"):
            (tmp_path / sub).mkdir()
            code = run_cli("gen", "--benchmark", "stir_tank", "--n", "10",
                           "--seed", "7", "--out", str(tmp_path / sub / "ds"))
            assert code == 0
        assert (dataio.dataset_digest(tmp_path / "a" / "ds")
                == dataio.dataset_digest(tmp_path / "b" / "ds"))

    def test_unknown_benchmark_exits_2(self, tmp_path, capsys):
        with pytest.raises(SystemExit) as err:
            run_cli("gen", "--benchmark", "pendulum", "--n", "5",
                    "--out", str(tmp_path / "x"))
        assert err.value.code == 2
        assert "stir_tank" in capsys.readouterr().err  # lists valid choices


class TestSimulate:
    def test_missing_policy_exits_2(self, tmp_path):
        code = run_cli("simulate", "--benchmark", "stir_tank", "--mode", "naive",
                       "--n-runs", "1", "--steps", "3",
                       "--out", str(tmp_path / "logs"))
        assert code == 2

    def test_missing_weights_file_exits_2(self, tmp_path):
        code = run_cli("simulate", "--benchmark", "stir_tank", "--mode", "naive",
                       "--policy", str(tmp_path / "nope.json"),
                       "--n-runs", "1", "--steps", "3",
                       "--out", str(tmp_path / "logs"))
        assert code == 2

    def test_safe_and_naive_batches(self, tmp_path, adv_policy_path, capsys):
        out_safe = tmp_path / "safe"
        code = run_cli("simulate", "--benchmark", "stir_tank", "--mode", "safe",
                       "--policy", adv_policy_path, "--n-runs", "3",
                       "--steps", "15", "--seed", "3", "--out", str(out_safe))
        assert code == 0
        assert "safe: 100.0%" in capsys.readouterr().out
        out_naive = tmp_path / "naive"
        code = run_cli("simulate", "--benchmark", "stir_tank", "--mode", "naive",
                       "--policy", adv_policy_path, "--n-runs", "3",
                       "--steps", "15", "--seed", "3", "--out", str(out_naive))
        assert code == 0
        txt = capsys.readouterr().out
        pct = float(txt.split("safe: ")[1].split("%")[0])
        assert pct < 100.0

        code = run_cli("report", "--logs", str(out_safe), str(out_naive))
        assert code == 0
        table = capsys.readouterr().out
        assert "naive" in table and "safe" in table

        # crash log ends with a violating row in the CSV export
        csv_path = tmp_path / "run.csv"
        logs = sorted(os.listdir(out_naive))
        code = run_cli("plotdata", "--log", str(out_naive / logs[0]),
                       "--out", str(csv_path))
        assert code == 0
        lines = csv_path.read_text().strip().splitlines()
        assert lines[0].startswith("t,")
        assert any("state" in ln for ln in lines[1:])


class TestOtherCommands:
    def test_synth_terminal_writes_spec(self, tmp_path, capsys):
        out = tmp_path / "spec.json"
        code = run_cli("synth-terminal", "--benchmark", "stir_tank",
                       "--n-check", "1500", "--out", str(out))
        assert code == 0
        doc = json.loads(out.read_text())
        assert "terminal" in doc and doc["N"] == 10

    def test_lemma1_zero_eps_passes(self, capsys):
        code = run_cli("lemma1", "--benchmark", "stir_tank", "--eps", "0",
                       "--trials", "10", "--n-states", "3")
        assert code == 0
        assert "PASS" in capsys.readouterr().out

    def test_console_script_entry(self):
        out = subprocess.run([sys.executable, "-m", "guardmpc", "--help"],
                             capture_output=True, text=True)
        assert out.returncode == 0
        assert "simulate" in out.stdout
