"""Cross-component contract: files and CLI are the only shared surface.

The consumer validates trainer-exported weight files at load time (probe
block, schema), and a policy trained on a real dataset must be accepted by
the online guard on most steps while the closed loop stays safe.
"""

import json
import os
import shutil
import subprocess
import sys

import pytest

GUARDMPC = shutil.which("guardmpc") or "guardmpc"


def run(args, **kw):
    return subprocess.run(args, capture_output=True, text=True, **kw)


@pytest.fixture(scope="module")
def small_pipeline(tmp_path_factory):
    """Small dataset and trained policy shared by the contract tests."""
    root = tmp_path_factory.mktemp("pipeline")
    ds = root / "ds"
    r = run([GUARDMPC, "gen", "--benchmark", "stir_tank", "--n", "300",
             "--seed", "3", "--jobs", "2", "--out", str(ds)])
    assert r.returncode == 0, r.stderr
    weights = root / "w.json"
    r = run([sys.executable, "-m", "guardmpc_trainer.cli", "train",
             "--dataset", str(ds), "--arch", "32,32", "--epochs", "150",
             "--seed", "1", "--out", str(weights)])
    assert r.returncode == 0, r.stderr
    return root, ds, weights


class TestWeightFileContract:
    def test_consumer_accepts_trained_file(self, small_pipeline):
        root, ds, weights = small_pipeline
        logs = root / "logs_accept"
        r = run([GUARDMPC, "simulate", "--benchmark", "stir_tank",
                 "--mode", "naive", "--policy", str(weights),
                 "--n-runs", "1", "--steps", "2", "--seed", "5",
                 "--out", str(logs)])
        assert r.returncode == 0, r.stderr

    def test_consumer_rejects_tampered_probe(self, small_pipeline, tmp_path):
        root, ds, weights = small_pipeline
        doc = json.loads(weights.read_text())
        doc["probe"]["outputs"][0][0] += 0.5
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps(doc))
        r = run([GUARDMPC, "simulate", "--benchmark", "stir_tank",
                 "--mode", "naive", "--policy", str(bad),
                 "--n-runs", "1", "--steps", "2", "--seed", "5",
                 "--out", str(tmp_path / "logs")])
        assert r.returncode == 2
        assert "probe" in r.stderr


@pytest.mark.slow
class TestGuardedAcceptance:
    def test_trained_policy_mostly_accepted_and_safe(self, tmp_path_factory):
        # full-scale check: 10^4-row dataset, 200 guarded runs of 50 steps;
        # the guard must accept the network on most steps and the loop must
        # stay safe throughout
        root = tmp_path_factory.mktemp("full")
        ds = root / "ds"
        r = run([GUARDMPC, "gen", "--benchmark", "stir_tank", "--n", "15500",
                 "--seed", "11", "--jobs", "2", "--out", str(ds)])
        assert r.returncode == 0, r.stderr
        manifest = json.loads((root / "ds.json").read_text())
        assert manifest["counts"]["feasible"] >= 10000

        weights = root / "w.json"
        r = run([sys.executable, "-m", "guardmpc_trainer.cli", "train",
                 "--dataset", str(ds), "--arch", "50,50", "--epochs", "200",
                 "--seed", "1", "--out", str(weights)])
        assert r.returncode == 0, r.stderr

        logs = root / "logs"
        r = run([GUARDMPC, "simulate", "--benchmark", "stir_tank",
                 "--mode", "safe", "--policy", str(weights),
                 "--n-runs", "200", "--steps", "50", "--seed", "77",
                 "--jobs", "2", "--out", str(logs)])
        assert r.returncode == 0, r.stderr

        total_steps = kept = unsafe = 0
        for name in sorted(os.listdir(logs)):
            with open(logs / name) as fh:
                *_, footer = [json.loads(ln) for ln in fh if ln.strip()]
            assert footer["record"] == "summary"
            total_steps += footer["steps"]
            kept += footer["candidate_applied"]
            unsafe += not footer["safe"]
        accepted_pct = 100.0 * (total_steps - kept) / total_steps
        ok = unsafe == 0 and accepted_pct > 50.0
        print(f"CRITERION 9: {'PASS' if ok else 'FAIL'} - trained policy "
              f"accepted on {accepted_pct:.1f}% of {total_steps} guarded steps, "
              f"{200 - unsafe}/200 runs safe")
        assert unsafe == 0
        assert accepted_pct > 50.0
