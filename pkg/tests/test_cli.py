import subprocess
import sys

import numpy as np
import pytest

from epimvs import io as eio
from epimvs.cli import main

SMALL = ["--width", "160", "--height", "128"]


@pytest.fixture(scope="module")
def views(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "views"
    assert main(["synth", "--scene", "three-plane", "--seed", "1", "--output", str(out)] + SMALL) == 0
    return out


@pytest.fixture(scope="module")
def estimated(views):
    out = views.parent / "est"
    assert main(["estimate", "--views", str(views), "--output", str(out), "--refs", "0"]) == 0
    return out


def read_tree(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


class TestSynth:
    def test_layout(self, views):
        assert (views / "manifest.txt").exists() and (views / "scene.cfg").exists()
        images = sorted((views / "images").glob("*.npy"))
        assert len(images) == 5
        assert np.load(images[0]).shape == (128, 160, 3)
        assert len(list((views / "depths_gt").glob("*.pfm"))) == 5

    def test_spec_reproducible(self, views, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        for out in (a, b):
            assert main(["synth", "--spec", str(views / "scene.cfg"), "--output", str(out)]) == 0
        ta, tb = read_tree(a), read_tree(b)
        assert ta.keys() == tb.keys()
        # the manifest records the output path, everything else is byte-identical
        assert all(ta[k] == tb[k] for k in ta if k != "manifest.txt")
        assert read_tree(views)["images/00000000.npy"] == ta["images/00000000.npy"]


class TestEstimateFuseEval:
    def test_outputs(self, estimated):
        names = read_tree(estimated).keys()
        assert {"depth/00000000.pfm", "confidence/00000000.pfm", "metrics.txt", "manifest.txt"} <= set(names)
        assert {f"depth/00000000_stage{k}.pfm" for k in range(4)} <= set(names)
        assert eio.read_pfm(estimated / "depth" / "00000000.pfm").shape == (128, 160)

    def test_metrics(self, estimated):
        last = [ln for ln in (estimated / "metrics.txt").read_text().splitlines() if "stage=3" in ln][0]
        fields = dict(tok.split("=") for tok in last.split())
        assert float(fields["epe"]) < 5.0

    def test_fuse_and_eval(self, views, tmp_path, capsys):
        est = tmp_path / "est"
        assert main(["estimate", "--views", str(views), "--output", str(est)]) == 0
        ply = tmp_path / "cloud.ply"
        assert main(["fuse", "--views", str(views), "--depths", str(est), "--output", str(ply), "--conf-threshold", "0"]) == 0
        cloud = eio.read_ply(ply)
        assert len(cloud) > 0
        assert (tmp_path / "cloud.manifest.txt").exists()
        capsys.readouterr()
        assert main(["eval", "--cloud", str(ply), "--gt-cloud", str(ply)]) == 0
        assert "overall=0" in capsys.readouterr().out

    def test_eval_depth(self, views, estimated, capsys):
        pred = estimated / "depth" / "00000000.pfm"
        assert main(["eval", "--pred", str(pred), "--gt", str(views / "depths_gt" / "00000000.pfm")]) == 0
        assert "epe=" in capsys.readouterr().out

    def test_threads_env(self, views, tmp_path, monkeypatch):
        monkeypatch.setenv("EPIMVS_THREADS", "3")
        out = tmp_path / "t3"
        assert main(["estimate", "--views", str(views), "--output", str(out), "--refs", "0", "--stages", "2"]) == 0
        assert "threads = 3" in (out / "manifest.txt").read_text()
        monkeypatch.setenv("EPIMVS_THREADS", "zero")
        assert main(["estimate", "--views", str(views), "--output", str(tmp_path / "bad")]) == 2


class TestErrors:
    def test_missing_input(self, tmp_path, capsys):
        out = tmp_path / "o"
        code = main(["estimate", "--views", str(tmp_path / "nope"), "--output", str(out)])
        err = capsys.readouterr().err.strip().splitlines()
        assert code == 2
        assert len(err) == 1 and err[0].startswith("error: UsageError: ")
        assert not out.exists()

    def test_failure_leaves_no_partial_output(self, views, tmp_path, capsys):
        broken = tmp_path / "views"
        broken.mkdir()
        for sub in ("images", "cams"):
            (broken / sub).mkdir()
            for p in (views / sub).iterdir():
                (broken / sub / p.name).write_bytes(p.read_bytes())
        (broken / "cams" / "00000003_cam.txt").write_text("extrinsic\n1 2\n")
        out = tmp_path / "est"
        code = main(["estimate", "--views", str(broken), "--output", str(out)])
        err = capsys.readouterr().err.strip()
        assert code == 1 and err.startswith("error: FormatError: ")
        assert not out.exists()
        assert not [p for p in tmp_path.iterdir() if p.name.startswith(".est")]

    def test_bad_threads(self, views, tmp_path):
        assert main(["estimate", "--views", str(views), "--output", str(tmp_path / "o"), "--threads", "0"]) == 2


def test_gradcheck_exit_code(capsys):
    assert main(["gradcheck", "--instances", "5"]) == 0
    assert "converged=true" in capsys.readouterr().out


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "epimvs", "--version"], capture_output=True, text=True)
    assert proc.returncode == 0 and proc.stdout.startswith("epimvs ")
