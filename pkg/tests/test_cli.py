import json
import math

import numpy as np
import pytest

from gridsde.cli import main


def run(*args):
    return main(list(args))


class TestSimulate:
    def test_binomial_density_slice(self, tmp_path):
        rc = run(
            "simulate", "--n", "8", "--mode", "exhaustive",
            "--f", "0", "--h", "1", "--x0", "0",
            "--slices", "0,1", "--out", str(tmp_path),
        )
        assert rc == 0
        lines = (tmp_path / "density.csv").read_text().strip().splitlines()
        header = lines[0].split(",")
        assert header[0] == "t"
        edges = [float(v) for v in header[1:]]
        row_t1 = [float(v) for v in lines[2].split(",")]
        assert row_t1[0] == 1.0
        rho = np.array(row_t1[1:])
        # binomial oracle: mass C(8,j)/2^8 at site (2j-8)/sqrt(8)
        for j in range(9):
            x = (2 * j - 8) / math.sqrt(8)
            idx = next(i for i, e in enumerate(edges) if e <= x < e + 1 / 8)
            assert rho[idx] * (1 / 8) == pytest.approx(math.comb(8, j) / 256, abs=1e-15)
        sidecar = json.loads((tmp_path / "density.json").read_text())
        assert sidecar["ensemble"]["mode"] == "exhaustive"
        assert sidecar["normalization_exact"] is True

    def test_missing_h_is_usage_error(self, tmp_path):
        assert run("simulate", "--n", "8", "--f", "0", "--out", str(tmp_path)) == 2

    def test_exhaustive_cap_is_usage_error(self, tmp_path):
        rc = run(
            "simulate", "--n", "40", "--mode", "exhaustive",
            "--f", "0", "--h", "1", "--out", str(tmp_path),
        )
        assert rc == 2

    def test_divergence_exit_code(self, tmp_path):
        rc = run(
            "simulate", "--n", "8", "--mode", "exhaustive",
            "--f", "x^2", "--h", "0", "--x0", "50", "--out", str(tmp_path),
        )
        assert rc == 3

    def test_bad_expression_exit_code(self, tmp_path):
        rc = run(
            "simulate", "--n", "8", "--f", "x^t", "--h", "1", "--out", str(tmp_path),
        )
        assert rc == 2

    def test_threads_do_not_change_output(self, tmp_path):
        outs = []
        for threads, sub in (("1", "a"), ("4", "b")):
            out = tmp_path / sub
            rc = run(
                "simulate", "--n", "10", "--mode", "sampled", "--samples", "20000",
                "--seed", "3", "--f=-x", "--h", "1", "--x0", "0",
                "--slices", "0,0.5,1", "--threads", threads, "--out", str(out),
            )
            assert rc == 0
            outs.append((out / "density.csv").read_bytes())
        assert outs[0] == outs[1]

    def test_rerun_reproduces_bytes(self, tmp_path):
        blobs = []
        for sub in ("first", "second"):
            out = tmp_path / sub
            run(
                "simulate", "--n", "8", "--mode", "exhaustive",
                "--f", "0", "--h", "1", "--out", str(out),
            )
            blobs.append((out / "density.csv").read_bytes())
        assert blobs[0] == blobs[1]


class TestConfigFile:
    def test_config_supplies_values_and_flags_override(self, tmp_path):
        cfg = tmp_path / "run.json"
        cfg.write_text(json.dumps({"n": 8, "mode": "exhaustive", "f": "0", "h": "1", "x0": 0.25}))
        out = tmp_path / "out"
        rc = run("simulate", "--config", str(cfg), "--x0", "0", "--slices", "0", "--out", str(out))
        assert rc == 0
        sidecar = json.loads((out / "density.json").read_text())
        assert sidecar["problem"]["x0"] == 0.0  # flag wins
        assert sidecar["problem"]["n"] == 8

    def test_unknown_key_rejected(self, tmp_path):
        cfg = tmp_path / "run.json"
        cfg.write_text(json.dumps({"nope": 1}))
        assert run("simulate", "--config", str(cfg), "--f", "0", "--h", "1") == 2

    def test_tolerance_override(self, tmp_path):
        cfg = tmp_path / "run.json"
        cfg.write_text(json.dumps({"tol_weakform_scale": 1e-9}))
        rc = run(
            "verify", "weakform", "--config", str(cfg), "--n", "8",
            "--mode", "exhaustive", "--out", str(tmp_path),
        )
        assert rc == 1  # impossible bound -> tolerance failure


class TestVerify:
    def test_lemmas_pass(self, tmp_path):
        assert run("verify", "lemmas", "--n", "8", "--out", str(tmp_path)) == 0
        report = json.loads((tmp_path / "verify_lemmas.json").read_text())
        assert report["passed"] is True
        assert report["results"]["worst_relative_deviation"] <= 1e-10

    def test_weakform_pass(self, tmp_path):
        rc = run("verify", "weakform", "--n", "16", "--mode", "exhaustive", "--out", str(tmp_path))
        assert rc == 0
        report = json.loads((tmp_path / "verify_weakform.json").read_text())
        assert abs(report["results"]["residual"]) <= report["results"]["bound"]

    def test_crossval_h_zero_trivial(self, tmp_path):
        # default drift, no diffusion: both densities stay in the x0 cell
        rc = run(
            "verify", "crossval", "--n", "64", "--h", "0",
            "--samples", "100", "--out", str(tmp_path),
        )
        assert rc == 0

    def test_ito_pass_with_unit_exponents(self, tmp_path):
        assert run("verify", "ito", "--n", "64", "--out", str(tmp_path)) == 0
        report = json.loads((tmp_path / "verify_ito.json").read_text())
        assert abs(report["results"]["deterministic_exponent"] - 1.0) <= 0.3


class TestConvergence:
    def test_fewer_than_three_levels(self, tmp_path):
        assert run("convergence", "--levels", "8,16", "--out", str(tmp_path)) == 2

    def test_table_and_exponents(self, tmp_path):
        rc = run(
            "convergence", "--levels", "8,16,32", "--samples", "200000",
            "--out", str(tmp_path),
        )
        assert rc == 0
        lines = (tmp_path / "convergence.csv").read_text().strip().splitlines()
        assert lines[0] == "n,weakform_residual,ito_max_residual,l1_fp"
        assert len(lines) == 4
        meta = json.loads((tmp_path / "convergence.json").read_text())
        # weak-form residual decays across levels (superconvergent here,
        # so only positivity of the fitted exponent is asserted)
        assert meta["exponents"]["weakform"] > 0.5


class TestFpSolve:
    def test_writes_same_schema_as_density(self, tmp_path):
        rc = run(
            "fp-solve", "--f", "0", "--h", "1", "--x0", "0",
            "--t-end", "0.5", "--slices", "0.25,0.5", "--out", str(tmp_path),
        )
        assert rc == 0
        lines = (tmp_path / "fp.csv").read_text().strip().splitlines()
        assert lines[0].startswith("t,")
        assert len(lines) == 3

    def test_unstable_dt_is_config_error(self, tmp_path):
        rc = run(
            "fp-solve", "--f", "0", "--h", "1", "--x0", "0",
            "--dt", "0.01", "--out", str(tmp_path),
        )
        assert rc == 2


class TestPairAndEquivalent:
    def test_pair_dirac_exact(self, tmp_path, capsys):
        rc = run("pair", "--n", "64", "--dist", "dirac", "--center", "0", "--out", str(tmp_path))
        assert rc == 0
        printed = capsys.readouterr().out.strip()
        assert float(printed) == math.exp(-1)

    def test_pair_derivative_sign_convention(self, tmp_path):
        rc = run(
            "pair", "--n", "128", "--dist", "dirac-derivative", "--center", "0",
            "--phi", "x*bump(x/2)", "--out", str(tmp_path),
        )
        assert rc == 0
        report = json.loads((tmp_path / "pair.json").read_text())
        assert report["value"] == pytest.approx(-math.exp(-1), abs=1e-3)

    def test_equivalent_dirac_vs_split(self, tmp_path):
        rc = run("equivalent", "--n", "64", "--out", str(tmp_path))
        assert rc == 0

    def test_not_equivalent_exit_code(self, tmp_path):
        rc = run(
            "equivalent", "--n", "64", "--dist", "dirac", "--dist2", "dirac",
            "--center2", "1.0", "--tol", "0.01", "--out", str(tmp_path),
        )
        assert rc == 1

    def test_unknown_distribution(self, tmp_path):
        assert run("pair", "--n", "8", "--dist", "comb", "--out", str(tmp_path)) == 2


class TestUsage:
    def test_unknown_flag_exits_two(self, capsys):
        assert run("simulate", "--bogus") == 2
        capsys.readouterr()

    def test_missing_subcommand_exits_two(self, capsys):
        assert run() == 2
        capsys.readouterr()
