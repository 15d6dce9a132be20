import json
import subprocess
import sys

import numpy as np
import pytest
from PIL import Image

from lagkit.cli import main
from lagkit.io import load_gmm, load_nap, load_supervector
from lagkit.manifest import DatasetManifest, ManifestEntry

SMALL = ["--classes", "3", "--dim", "3", "--K-gen", "2", "--patches-per-item", "60", "--items-per-class", "8"]
QUICK = ["--set", "K=4", "--set", "nap_rank=2", "--set", "split.train_per_class=4", "--set", "split.trials=2"]


def run(argv):
    """main() exit code, treating a normal return as 0."""
    try:
        return main([str(a) for a in argv])
    except SystemExit as e:
        return e.code


def error_of(capsys):
    return json.loads(capsys.readouterr().err.strip().splitlines()[-1])


@pytest.fixture
def synth_dir(tmp_path):
    out = tmp_path / "synth"
    assert run(["synth", "--out", out, "--separation", "1.0", *SMALL]) == 0
    return out


class TestSynthEvaluate:
    def test_smoke(self, synth_dir, tmp_path, capsys):
        m = DatasetManifest.load(synth_dir / "manifest.json")
        assert len(m.entries) == 24 and m.features == "final"
        out = tmp_path / "eval"
        assert run(["evaluate", "--manifest", synth_dir / "manifest.json", "--method", "all", *QUICK, "--out", out]) == 0
        for name in ("lag", "rlag", "klvec"):
            rep = json.loads((out / f"report_{name}.json").read_text())
            assert rep["trials"] == 2 and len(rep["confusion"]) == 3
            lines = (out / f"confusion_{name}.csv").read_text().splitlines()
            assert len(lines) == 4
        assert "LAG:" in capsys.readouterr().out

    def test_reports_reproducible_across_workers(self, synth_dir, tmp_path):
        outs = []
        for i, workers in enumerate((1, 1, 4)):
            out = tmp_path / f"e{i}"
            argv = ["evaluate", "--manifest", synth_dir / "manifest.json", "--method", "LAG,RLAG", *QUICK]
            assert run([*argv, "--workers", workers, "--out", out]) == 0
            outs.append(out)
        for name in ("report_lag.json", "report_rlag.json", "confusion_lag.csv"):
            ref = (outs[0] / name).read_bytes()
            assert all((o / name).read_bytes() == ref for o in outs[1:])

    def test_scale_down(self, synth_dir, tmp_path):
        argv = ["evaluate", "--manifest", synth_dir / "manifest.json", *QUICK, "--set", "split.train_per_class=50"]
        assert run([*argv, "--out", tmp_path / "a"]) == 1
        assert run([*argv, "--scale-down", "--out", tmp_path / "b"]) == 0
        rep = json.loads((tmp_path / "b" / "report_lag.json").read_text())
        assert rep["settings"]["train_per_class"] == 4

    def test_sweep_k(self, synth_dir, tmp_path):
        out = tmp_path / "sweep"
        argv = ["sweep-k", "--manifest", synth_dir / "manifest.json", *QUICK, "--grid", "2,4", "--out", out]
        assert run(argv) == 0
        rows = json.loads((out / "sweep_k.json").read_text())["rows"]
        assert [r["K"] for r in rows] == [2, 4]
        assert set(rows[0]) == {"K", "LAG", "RLAG", "KLVEC"}
        assert len((out / "sweep_k.txt").read_text().splitlines()) == 3


class TestPipelineChain:
    def test_train_vectorize_nap_classify(self, synth_dir, tmp_path, capsys):
        ubm_path = tmp_path / "ubm.lagm"
        assert run(["train-ubm", "--manifest", synth_dir / "manifest.json", "--K", "4", "--out", ubm_path]) == 0
        ubm = load_gmm(ubm_path)
        assert (ubm.K, ubm.D) == (4, 3)

        vec_dir = tmp_path / "vec"
        argv = ["vectorize", "--manifest", synth_dir / "manifest.json", "--ubm", ubm_path, "--method", "LAG"]
        assert run([*argv, "--out", vec_dir]) == 0
        vm = DatasetManifest.load(vec_dir / "vectors_lag.json")
        assert len(load_supervector(vm.resolve(vm.entries[0]))) == 5 * 4 * 2 * 3

        # first half of each class trains, the rest tests
        seen, train, test = {}, [], []
        for e in vm.entries:
            seen[e.label] = seen.get(e.label, 0) + 1
            (train if seen[e.label] <= 4 else test).append(e)
        for name, entries in (("train", train), ("test", test)):
            DatasetManifest(vec_dir, entries, vm.classes, "final").save(vec_dir / f"{name}.json")

        nap_path = tmp_path / "nap.lagn"
        assert run(["nap-train", "--vectors", vec_dir / "train.json", "--rank", "2", "--out", nap_path]) == 0
        assert load_nap(nap_path).rank == 2
        res = tmp_path / "pred.json"
        argv = ["classify", "--train", vec_dir / "train.json", "--test", vec_dir / "test.json", "--nap", nap_path]
        assert run([*argv, "--out", res]) == 0
        result = json.loads(res.read_text())
        assert len(result["predictions"]) == 12
        assert result["accuracy"] > 60.0  # chance is 33%

        capsys.readouterr()
        assert run(["inspect", ubm_path]) == 0
        text = capsys.readouterr().out
        assert "K=4 D=3" in text and "min std >= sqrt(floor): yes" in text

    def test_images_end_to_end(self, tmp_path, rng):
        img_dir = tmp_path / "imgs"
        img_dir.mkdir()
        entries = []
        for c, freq in enumerate((2, 7)):
            for i in range(4):
                yy, xx = np.mgrid[0:48, 0:48] / 48.0
                img = 127 + 100 * np.sin(2 * np.pi * freq * (xx + 0.1 * i)) + rng.normal(0, 5, (48, 48))
                name = f"c{c}_{i}.png"
                Image.fromarray(np.clip(img, 0, 255).astype(np.uint8)).save(img_dir / name)
                entries.append(ManifestEntry(f"c{c}_{i}", f"c{c}", name))
        DatasetManifest(img_dir, entries, ["c0", "c1"]).save(img_dir / "manifest.json")

        pdir = tmp_path / "patches"
        cfg = ["--set", "descriptor.step=8", "--set", "descriptor.pca_dim=6"]
        assert run(["extract", "--manifest", img_dir / "manifest.json", *cfg, "--out", pdir]) == 0
        assert DatasetManifest.load(pdir / "manifest.json").features == "raw"
        ubm = tmp_path / "ubm.lagm"
        assert run(["train-ubm", "--manifest", pdir / "manifest.json", *cfg, "--K", "2", "--out", ubm]) == 0
        assert load_gmm(ubm).D == 8
        assert (tmp_path / "ubm.lagm.lagc").exists()
        argv = ["vectorize", "--manifest", pdir / "manifest.json", "--ubm", ubm, "--pca", tmp_path / "ubm.lagm.lagc"]
        assert run([*argv, *cfg, "--out", tmp_path / "vec"]) == 0
        argv = ["evaluate", "--manifest", img_dir / "manifest.json", *cfg, "--set", "K=2", "--set", "nap_rank=1"]
        argv += ["--set", "split.train_per_class=2", "--set", "split.trials=2", "--out", tmp_path / "ev"]
        assert run(argv) == 0


class TestExitCodes:
    def test_bad_override_is_config_error(self, synth_dir, tmp_path, capsys):
        argv = ["evaluate", "--manifest", synth_dir / "manifest.json", "--set", "split.trials=0"]
        assert run([*argv, "--out", tmp_path]) == 2
        err = error_of(capsys)
        assert err["error"] == "config" and "split.trials" in err["fields"]

    def test_usage_error(self, capsys):
        assert run(["evaluate"]) == 2
        assert error_of(capsys)["error"] == "usage"

    def test_missing_manifest(self, tmp_path, capsys):
        assert run(["evaluate", "--manifest", tmp_path / "nope.json", "--out", tmp_path]) == 3
        assert error_of(capsys)["error"] == "missing-file"

    def test_missing_item_file(self, synth_dir, tmp_path, capsys):
        next((synth_dir / "patches").iterdir()).unlink()
        assert run(["evaluate", "--manifest", synth_dir / "manifest.json", "--out", tmp_path]) == 3

    def test_corrupt_container(self, tmp_path, capsys):
        (tmp_path / "bad.lagm").write_bytes(b"LAGM\x01\x00")
        assert run(["inspect", tmp_path / "bad.lagm"]) == 4
        assert "truncated" in error_of(capsys)["message"]

    def test_module_entry_point(self, tmp_path):
        proc = subprocess.run(
            [sys.executable, "-m", "lagkit", "inspect", str(tmp_path / "none.lagv")],
            capture_output=True,
            text=True,
        )
        assert proc.returncode == 3
        assert json.loads(proc.stderr)["error"] == "missing-file"


@pytest.mark.slow
class TestSeparationExtremes:
    def _accuracy(self, tmp_path, separation, name):
        d = tmp_path / name
        argv = ["synth", "--out", d, "--separation", separation, "--classes", "4", "--dim", "4", "--K-gen", "2"]
        argv += ["--patches-per-item", "80", "--items-per-class", "16", "--seed", "3"]
        assert run(argv) == 0
        quick = ["--set", "K=4", "--set", "nap_rank=4", "--set", "split.train_per_class=8", "--set", "split.trials=4"]
        assert run(["evaluate", "--manifest", d / "manifest.json", *quick, "--out", d / "ev"]) == 0
        return json.loads((d / "ev" / "report_lag.json").read_text())["mean"]

    def test_no_separation_is_chance(self, tmp_path):
        assert abs(self._accuracy(tmp_path, 0.0, "zero") - 25.0) <= 15.0

    def test_large_separation_is_perfect(self, tmp_path):
        assert self._accuracy(tmp_path, 2.0, "far") >= 98.0
