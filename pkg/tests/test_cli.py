import csv
import json

import numpy as np
import pytest

from qspca import archive, codec
from qspca.cli import LAB_COLUMNS, main
from qspca.factorizer import CalibrationSet, FixedIterations, SolverConfig
from qspca.pipeline import checksum, compress_layer, synthetic_layer
from qspca.sweep import SWEEP_COLUMNS
from qspca.tensor_core import WeightTensor


@pytest.fixture
def layer_files(tmp_path):
    W, X, Y, spec = synthetic_layer(shape=(8, 8, 3, 3), m=16, seed=4)
    archive.save(tmp_path / "w.qspt", {"weight": W.data})
    archive.save(tmp_path / "calib.qspt", {"X": X, "Y": Y})
    return tmp_path, str(tmp_path / "w.qspt"), str(tmp_path / "calib.qspt")


def compress(w, c, out, *extra):
    return main(["compress", "--weights", w, "--calib", c, "--d", "8", "--k", "4", "--out", str(out), *extra])


class TestCompress:
    def test_report_and_file(self, layer_files, capsys):
        tmp, w, c = layer_files
        assert compress(w, c, tmp / "a.qspc", "--stop", "iters:3", "--sparsity", "0.2") == 0
        rep = json.loads(capsys.readouterr().out)
        blob = (tmp / "a.qspc").read_bytes()
        assert rep["L_c"] == codec.layout(blob).factor_bits
        assert rep["iterations"] == 3 and rep["shape"] == [8, 8, 3, 3]

    def test_deterministic(self, layer_files):
        tmp, w, c = layer_files
        for i in range(2):
            assert compress(w, c, tmp / f"{i}.qspc", "--mode", "iterative", "--sparsity", "0.1") == 0
        assert (tmp / "0.qspc").read_bytes() == (tmp / "1.qspc").read_bytes()

    def test_zero_iterations_is_svd_path(self, layer_files, capsys):
        tmp, w, c = layer_files
        assert compress(w, c, tmp / "z.qspc", "--stop", "iters:0") == 0
        W = WeightTensor(archive.load(w)["weight"])
        calib = archive.load(c)
        cal = CalibrationSet.from_arrays(calib["X"], calib["Y"], kernel_hw=(3, 3))
        res = compress_layer(W, cal, 8, 4, solver=SolverConfig(stopping=FixedIterations(0)))
        assert res.to_bytes() == (tmp / "z.qspc").read_bytes()

    def test_config_file_then_flags(self, layer_files, capsys):
        tmp, w, c = layer_files
        (tmp / "cfg.json").write_text(json.dumps({"bz": 3, "stop": "iters:1", "k": 2}))
        assert compress(w, c, tmp / "c.qspc", "--config", str(tmp / "cfg.json"), "--bz", "5") == 0
        rep = json.loads(capsys.readouterr().out)
        assert (rep["b_z"], rep["k"], rep["iterations"]) == (5, 4, 1)

    @pytest.mark.parametrize("flags", [["--k", "9"], ["--bz", "9"], ["--sparsity", "0.95"], ["--stop", "forever"]])
    def test_bad_parameters(self, layer_files, flags, capsys):
        tmp, w, c = layer_files
        assert compress(w, c, tmp / "x.qspc", *flags) == 2
        assert "error" in capsys.readouterr().err

    def test_missing_calibration_tensor(self, layer_files):
        tmp, w, _ = layer_files
        archive.save(tmp / "bad.qspt", {"X": np.zeros((2, 8, 8, 8))})
        assert compress(w, str(tmp / "bad.qspt"), tmp / "x.qspc") == 2


class TestDecompress:
    def test_chain(self, layer_files, capsys):
        tmp, w, c = layer_files

        def chain(tag):
            assert compress(w, c, tmp / f"{tag}1.qspc", "--stop", "iters:2") == 0
            assert main(["decompress", str(tmp / f"{tag}1.qspc"), "--out", str(tmp / f"{tag}.qspt")]) == 0
            assert compress(str(tmp / f"{tag}.qspt"), c, tmp / f"{tag}2.qspc", "--stop", "iters:2") == 0
            return (tmp / f"{tag}2.qspc").read_bytes()

        assert chain("a") == chain("b")
        capsys.readouterr()
        assert main(["decompress", str(tmp / "a1.qspc")]) == 0
        info = json.loads(capsys.readouterr().out)
        W = WeightTensor(archive.load(tmp / "a.qspt")["weight"])
        assert info == {"shape": [8, 8, 3, 3], "sha256": checksum(W)}

    def test_truncated(self, layer_files, capsys):
        tmp, w, c = layer_files
        assert compress(w, c, tmp / "t.qspc", "--stop", "iters:0") == 0
        blob = (tmp / "t.qspc").read_bytes()
        (tmp / "t.qspc").write_bytes(blob[:-3])
        assert main(["decompress", str(tmp / "t.qspc")]) == 2
        assert "truncated" in capsys.readouterr().err

    def test_worked_example_shape(self, tmp_path, capsys):
        rng = np.random.default_rng(0)
        W = rng.standard_normal((256, 256, 3, 3)).astype(np.float32) * 0.05
        X = rng.standard_normal((4, 256, 3, 3))
        Y = rng.standard_normal((4, 256, 3, 3))
        archive.save(tmp_path / "w.qspt", {"weight": W})
        archive.save(tmp_path / "c.qspt", {"X": X, "Y": Y})
        assert main(["compress", "--weights", str(tmp_path / "w.qspt"), "--calib", str(tmp_path / "c.qspt"),
                     "--d", "256", "--k", "128", "--stop", "iters:0", "--out", str(tmp_path / "big.qspc")]) == 0
        rep = json.loads(capsys.readouterr().out)
        assert (rep["weight_elements"], rep["codebook_elements"], rep["n"]) == (589_824, 32_768, 2304)
        assert main(["decompress", str(tmp_path / "big.qspc")]) == 0
        assert json.loads(capsys.readouterr().out)["shape"] == [256, 256, 3, 3]


class TestReport:
    def test_from_dimensions(self, capsys):
        assert main(["report", "--shape", "256,256,3,3", "--d", "256", "--k", "128", "--bz", "3",
                     "--nnz", "221184", "--p", "3136"]) == 0
        out = json.loads(capsys.readouterr().out)
        assert out["size"]["L_c"] == 1_093_632
        assert round(out["overhead"]["relative"], 4) == 0.0408

    def test_from_file(self, layer_files, capsys):
        tmp, w, c = layer_files
        compress(w, c, tmp / "r.qspc", "--stop", "iters:0", "--report", str(tmp / "r.json"))
        capsys.readouterr()
        assert main(["report", str(tmp / "r.qspc")]) == 0
        assert json.loads(capsys.readouterr().out)["size"]["L_c"] == json.loads((tmp / "r.json").read_text())["L_c"]

    def test_needs_input(self):
        assert main(["report"]) == 2


class TestSweep:
    def test_grid(self, layer_files):
        tmp, w, c = layer_files
        assert main(["sweep", "--weights", w, "--calib", c, "--d", "8", "--stop", "iters:1", "--k-grid", "2,4",
                     "--bz-grid", "3,4", "--sparsity-grid", "0,0.2", "--out", str(tmp / "s.csv"),
                     "--pareto-out", str(tmp / "p.csv")]) == 0
        rows = list(csv.DictReader(open(tmp / "s.csv")))
        front = list(csv.DictReader(open(tmp / "p.csv")))
        assert len(rows) == 8 and list(rows[0]) == SWEEP_COLUMNS
        assert front == [r for r in rows if r["pareto"] == "True"]

    def test_single_cell(self, layer_files):
        tmp, w, c = layer_files
        assert main(["sweep", "--weights", w, "--calib", c, "--d", "8", "--stop", "iters:0", "--k-grid", "2",
                     "--out", str(tmp / "s.csv")]) == 0
        rows = list(csv.DictReader(open(tmp / "s.csv")))
        assert len(rows) == 1 and rows[0]["pareto"] == "True"


class TestLab:
    def run(self, tmp_path, *args):
        out = tmp_path / "lab.csv"
        code = main(["lab", *args, "--out", str(out)])
        rows = list(csv.DictReader(open(out)))
        return code, rows

    def test_projection(self, tmp_path, capsys):
        code, rows = self.run(tmp_path, "projection", "--trials", "2000")
        assert code == 0 and len(rows) == 2000 and list(rows[0]) == LAB_COLUMNS
        assert max(float(r["final_error"]) for r in rows) <= 2
        assert "max ratio" in capsys.readouterr().err

    def test_contraction(self, tmp_path, capsys):
        code, rows = self.run(tmp_path, "contraction", "--L", "0.25", "--t", "10")
        assert code == 0 and all(r["success"] == "1" for r in rows)
        assert "envelope satisfied" in capsys.readouterr().err

    def test_iht(self, tmp_path, capsys):
        code, rows = self.run(tmp_path, "iht", "--trials", "5")
        assert code == 0 and len(rows) == 5
        assert "success rate" in capsys.readouterr().err

    def test_biht_deterministic(self, tmp_path):
        _, a = self.run(tmp_path, "biht", "--trials", "3", "--iterations", "20")
        _, b = self.run(tmp_path, "biht", "--trials", "3", "--iterations", "20")
        assert a == b

    def test_bad_parameters(self, tmp_path):
        assert main(["lab", "iht", "--s", "0", "--out", str(tmp_path / "x.csv")]) == 2
