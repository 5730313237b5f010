import json
import subprocess
import sys

import numpy as np
import pytest

from geoagg.cli import main
from geoagg.formats import read_anchor_bank, read_labels, read_tensor, write_labels, write_ply, write_tensor
from geoagg.synthetic import SCENE_FPFH, two_primitive_scene

SCENE_CFG = """\
gamma_iters = 16
n_super = 128
k1 = 32
k2 = 24
ms_iters = 0
m_ref = {m_ref}
k3 = {k3}
k4 = {k4}
r1 = {r1}
r2 = {r2}
""".format(**vars(SCENE_FPFH))


def run(argv, capsys):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def scene_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("scene")
    scene = two_primitive_scene()
    write_ply(d / "cloud.ply", scene.cloud)
    write_tensor(d / "vlm.gzt", scene.features)
    write_tensor(d / "text.gzt", scene.prototypes)
    (d / "scene.cfg").write_text(SCENE_CFG)
    return d


def error_line(err):
    lines = err.strip().splitlines()
    assert len(lines) == 1 and lines[0].startswith("error: ")
    return lines[0].split(": ")[1]


class TestErrors:
    def test_unknown_subcommand(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["frobnicate"])
        assert exc.value.code == 2

    def test_missing_file(self, tmp_path, capsys):
        code, _, err = run(["eval", "--pred", tmp_path / "nope.txt", "--gt", tmp_path / "x.txt"], capsys)
        assert code == 1 and error_line(err) == "file_not_found"

    def test_aggregate_row_mismatch(self, scene_dir, tmp_path, capsys):
        write_tensor(tmp_path / "short.gzt", np.ones((10, 4)))
        code, _, err = run(["aggregate", "--cloud", scene_dir / "cloud.ply", "--vlm",
                            tmp_path / "short.gzt", "--geo", tmp_path / "short.gzt",
                            "--preset", "modelnet40", "--out", tmp_path / "o.gzt"], capsys)
        assert code == 1 and error_line(err) == "dimension_mismatch"
        assert not (tmp_path / "o.gzt").exists()

    def test_bad_magic_code(self, tmp_path, capsys):
        (tmp_path / "f.gzt").write_bytes(b"nope" * 8)
        write_tensor(tmp_path / "t.gzt", np.eye(2))
        code, _, err = run(["segment", "--features", tmp_path / "f.gzt", "--text",
                            tmp_path / "t.gzt", "--out", tmp_path / "p.txt"], capsys)
        assert code == 1 and error_line(err) == "bad_magic"

    def test_missing_config(self, scene_dir, tmp_path, capsys):
        code, _, err = run(["fpfh", "--input", scene_dir / "cloud.ply", "--out", tmp_path / "g.gzt"],
                           capsys)
        assert code == 1 and error_line(err) == "missing_config"

    def test_length_mismatch(self, tmp_path, capsys):
        write_labels(tmp_path / "a.txt", [0, 1])
        write_labels(tmp_path / "b.txt", [0])
        code, _, err = run(["eval", "--pred", tmp_path / "a.txt", "--gt", tmp_path / "b.txt"], capsys)
        assert code == 1 and error_line(err) == "length_mismatch"

    def test_console_script_module(self, tmp_path):
        proc = subprocess.run([sys.executable, "-m", "geoagg.cli", "eval", "--pred",
                               str(tmp_path / "missing"), "--gt", str(tmp_path / "missing")],
                              capture_output=True, text=True)
        assert proc.returncode == 1 and proc.stderr.startswith("error: file_not_found")


class TestEval:
    def test_identical_files(self, tmp_path, capsys):
        write_labels(tmp_path / "p.txt", [0, 1, 2, 1])
        code, out, _ = run(["eval", "--pred", tmp_path / "p.txt", "--gt", tmp_path / "p.txt"], capsys)
        assert code == 0 and out.strip() == "miou 1.0"

    def test_accuracy_against_ply(self, scene_dir, tmp_path, capsys):
        labels = two_primitive_scene().labels.copy()
        labels[:4] = 1 - labels[:4]
        write_labels(tmp_path / "p.txt", labels)
        code, out, _ = run(["eval", "--pred", tmp_path / "p.txt", "--gt", scene_dir / "cloud.ply",
                            "--metric", "accuracy"], capsys)
        assert code == 0 and out.strip() == f"accuracy {1 - 4 / 1024}"


class TestSmallCommands:
    def test_fuse_views(self, tmp_path, capsys):
        write_tensor(tmp_path / "v1.gzt", [[0, 1, 1, 0, 0], [2, 1, 0, 1, 0]])
        write_tensor(tmp_path / "v2.gzt", [[0, 3, 0, 2, 1]])
        code, _, _ = run(["fuse-views", "--view", tmp_path / "v1.gzt", "--view", tmp_path / "v2.gzt",
                          "--n", 3, "--out", tmp_path / "f.gzt", "--mask-out", tmp_path / "m.txt"],
                         capsys)
        assert code == 0
        f = read_tensor(tmp_path / "f.gzt")
        expect = np.array([0.25, 1.5, 0.75]) / np.linalg.norm([0.25, 1.5, 0.75])
        assert np.allclose(f[0], expect, atol=1e-6)
        assert read_labels(tmp_path / "m.txt").tolist() == [1, 0, 1]

    def test_fuse_views_bad_index(self, tmp_path, capsys):
        write_tensor(tmp_path / "v.gzt", [[0.5, 1, 1, 0]])
        code, _, err = run(["fuse-views", "--view", tmp_path / "v.gzt", "--n", 2, "--out",
                            tmp_path / "f.gzt"], capsys)
        assert code == 1 and error_line(err) == "bad_view"

    def test_classify(self, tmp_path, capsys):
        text = np.eye(3)
        write_tensor(tmp_path / "t.gzt", text)
        write_tensor(tmp_path / "f.gzt", [[0.1, 0.2, 1.0], [0, 0.3, 0.9]])
        code, _, _ = run(["classify", "--features", tmp_path / "f.gzt", "--text", tmp_path / "t.gzt",
                          "--out", tmp_path / "c.txt"], capsys)
        assert code == 0 and (tmp_path / "c.txt").read_text() == "2\n"

    def test_fpfh_explicit_params(self, scene_dir, tmp_path, capsys):
        p = SCENE_FPFH
        code, _, _ = run(["fpfh", "--input", scene_dir / "cloud.ply", "--out", tmp_path / "g.gzt",
                          "--m-ref", 256, "--k3", p.k3, "--k4", p.k4, "--r1", 0.3, "--r2", 0.5],
                         capsys)
        g = read_tensor(tmp_path / "g.gzt")
        assert code == 0 and g.shape == (1024, 33)
        assert np.allclose(np.linalg.norm(g, axis=1), 1, atol=1e-5)


@pytest.fixture(scope="module")
def chain(scene_dir):
    d = scene_dir
    assert main(["fpfh", "--input", str(d / "cloud.ply"), "--config", str(d / "scene.cfg"),
                 "--out", str(d / "geo.gzt")]) == 0
    assert main(["aggregate", "--cloud", str(d / "cloud.ply"), "--vlm", str(d / "vlm.gzt"),
                 "--geo", str(d / "geo.gzt"), "--config", str(d / "scene.cfg"),
                 "--out", str(d / "agg.gzt"), "--report", str(d / "report.json")]) == 0
    return d


class TestChain:
    def score(self, d, feats, capsys):
        capsys.readouterr()
        assert main(["segment", "--features", str(d / feats), "--text", str(d / "text.gzt"),
                     "--out", str(d / "pred.txt")]) == 0
        assert main(["eval", "--pred", str(d / "pred.txt"), "--gt", str(d / "cloud.ply"),
                     "--metric", "accuracy"]) == 0
        name, value = capsys.readouterr().out.split()
        assert name == "accuracy"
        return float(value)

    def test_aggregation_improves_accuracy(self, chain, capsys):
        before = self.score(chain, "vlm.gzt", capsys)
        after = self.score(chain, "agg.gzt", capsys)
        assert after > before

    def test_report(self, chain):
        report = json.loads((chain / "report.json").read_text())
        assert report["config"] is None
        assert {"n_points", "n_superpoints", "anchors", "timings", "scales"} <= set(report)
        assert report["n_points"] == 1024 and report["n_superpoints"] == 128
        assert report["anchors"]["n_anchors"] >= 1

    def test_anchor_save_merge_and_reuse(self, chain, capsys):
        d = chain
        common = ["--cloud", d / "cloud.ply", "--vlm", d / "vlm.gzt", "--geo", d / "geo.gzt",
                  "--config", d / "scene.cfg"]
        assert run(["anchors", "--save", *common, "--out", d / "bank.gzt"], capsys)[0] == 0
        bank = read_anchor_bank(d / "bank.gzt")
        assert run(["anchors", "--merge", d / "bank.gzt", d / "bank.gzt", "--out",
                    d / "merged.gzt"], capsys)[0] == 0
        assert len(read_anchor_bank(d / "merged.gzt")) == len(bank)
        code, _, _ = run(["aggregate", *common, "--anchors", d / "merged.gzt",
                          "--out", d / "agg2.gzt"], capsys)
        assert code == 0 and read_tensor(d / "agg2.gzt").shape == (1024, 16)
