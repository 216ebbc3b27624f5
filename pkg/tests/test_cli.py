import subprocess
import sys

import numpy as np
import pytest

import simba_idt.cli as cli
from simba_idt.containers import read_measurements, read_trace_csv, read_volume, write_tf
from simba_idt.errors import NonConvergenceError
from simba_idt.simulate import make_phantom

from conftest import small_tf


def run_cli(*argv):
    return cli.main(list(argv))


@pytest.fixture()
def tiny_dataset(tmp_path):
    m_path = tmp_path / "m.idtm"
    tf_path = tmp_path / "tf.idtf"
    code = run_cli("simulate", "--size", "16", "--slices", "1",
                   "--illuminations", "8", "--input-snr-db", "25",
                   "--seed", "1", "--out-measurements", str(m_path),
                   "--out-tf", str(tf_path))
    assert code == 0
    return m_path, tf_path


# ---------------------------------------------------------------------------
# value parsers and layouts
# ---------------------------------------------------------------------------


def test_spread_angles_layout():
    angles = cli.spread_angles(60, 0.40)
    assert len(angles) == 60
    r = np.hypot(*np.array(angles).T)
    assert r.max() <= 0.40 + 1e-12
    # five rings of twelve, radii equally spaced up to the cap
    radii = sorted(set(np.round(r, 12)))
    assert len(radii) == 5
    np.testing.assert_allclose(radii, 0.40 * np.arange(1, 6) / 5, atol=1e-12)
    assert cli.spread_angles(60, 0.40) == angles  # deterministic


def test_parse_denoiser_specs():
    d = cli.parse_denoiser("gaussian:radius=3,sigma=1.5")
    assert d.kind == "gaussianKernel"
    assert d.kernel_radius == 3 and d.kernel_sigma == 1.5
    t = cli.parse_denoiser("tv:weight=0.2,iters=50")
    assert t.kind == "totalVariation" and t.tv_weight == 0.2
    assert cli.parse_denoiser("identity").kind == "identity"
    for bad in ("median", "gaussian:radius", "gaussian:width=2", "cnn"):
        with pytest.raises(Exception):
            cli.parse_denoiser(bad)


def test_snr_value_spellings():
    assert cli.snr_value("20") == 20.0
    for text in ("inf", "Infinite", "none"):
        assert cli.snr_value(text) == float("inf")


# ---------------------------------------------------------------------------
# end-to-end flows
# ---------------------------------------------------------------------------


def test_simulate_outputs(tiny_dataset):
    m_path, tf_path = tiny_dataset
    m = read_measurements(m_path)
    assert m.y.shape == (8, 16, 16)
    assert m.ground_truth is not None
    assert m.metadata["input_snr_db"] == 25.0
    assert m.metadata["numerical_aperture"] == 0.65


def test_reconstruct_all_algorithms(tiny_dataset, tmp_path, capsys):
    m_path, tf_path = tiny_dataset
    for algo, extra in (("simba", ["--batch", "4", "--iters", "40"]),
                        ("gm-red", ["--iters", "40"]),
                        ("tikhonov", ["--reg-weight", "0.05"])):
        out = tmp_path / f"rec_{algo}.idtm"
        code = run_cli("reconstruct", "--algo", algo,
                       "--measurements", str(m_path), "--tf", str(tf_path),
                       "--tau", "0.1", "--out", str(out), *extra)
        assert code == 0, algo
        text = capsys.readouterr().out
        assert "SNR vs ground truth" in text
        vol, meta = read_volume(out)
        assert vol.shape == (1, 16, 16)
        assert meta["algo"] == algo


def test_reconstruct_accelerated_and_trace(tiny_dataset, tmp_path):
    m_path, tf_path = tiny_dataset
    trace_path = tmp_path / "trace.csv"
    code = run_cli("reconstruct", "--algo", "simba", "--accelerated",
                   "--measurements", str(m_path), "--tf", str(tf_path),
                   "--batch", "4", "--iters", "15", "--tau", "0.1",
                   "--trace", str(trace_path),
                   "--out", str(tmp_path / "rec.idtm"))
    assert code == 0
    data = read_trace_csv(trace_path)
    assert len(data["iter"]) == 15
    assert data["batch_indices"][0].count(";") == 3
    assert np.all(np.isfinite(data["snr_db"]))


def test_compare_reports_snr(tiny_dataset, tmp_path, capsys):
    m_path, tf_path = tiny_dataset
    out = tmp_path / "rec.idtm"
    run_cli("reconstruct", "--algo", "tikhonov", "--measurements", str(m_path),
            "--tf", str(tf_path), "--out", str(out))
    capsys.readouterr()
    code = run_cli("compare", "--estimate", str(out),
                   "--reference", str(m_path))
    assert code == 0
    text = capsys.readouterr().out
    assert "affine-fit SNR (phase)" in text and "dB" in text
    # a volume against itself hits the metric cap
    code = run_cli("compare", "--estimate", str(out), "--reference", str(out))
    assert code == 0
    assert "300.0000 dB" in capsys.readouterr().out


def test_plot_writes_images(tiny_dataset, tmp_path):
    m_path, tf_path = tiny_dataset
    trace_path = tmp_path / "trace.csv"
    run_cli("reconstruct", "--algo", "simba", "--measurements", str(m_path),
            "--tf", str(tf_path), "--batch", "4", "--iters", "10",
            "--tau", "0.1", "--trace", str(trace_path),
            "--out", str(tmp_path / "rec.idtm"))
    prefix = tmp_path / "curves"
    code = run_cli("plot", "--trace", str(trace_path),
                   "--out-prefix", str(prefix))
    assert code == 0
    for suffix in ("snr_vs_iter", "snr_vs_seconds"):
        png = tmp_path / f"curves_{suffix}.png"
        assert png.exists()
        assert png.read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"


def test_probe_command(capsys, tmp_path):
    code = run_cli("probe", "--denoiser", "identity", "--size", "8",
                   "--pairs", "20")
    assert code == 0
    text = capsys.readouterr().out
    assert "1.000000000" in text
    assert "certified nonexpansive" in text
    code = run_cli("probe", "--denoiser", "gaussian", "--size", "8",
                   "--pairs", "20", "--slices", "2")
    assert code == 0


def test_theory_command_smoke(tmp_path, capsys):
    report = tmp_path / "report.csv"
    summary = tmp_path / "summary.txt"
    code = run_cli("theory", "--suite", "theorem", "--size", "12",
                   "--slices", "1", "--illuminations", "4", "--seeds", "2",
                   "--horizon", "40", "--batches", "1,2",
                   "--out-report", str(report), "--out-summary", str(summary))
    assert code == 0
    text = capsys.readouterr().out
    assert "instance: L =" in text
    assert "2/2 seeds" in text
    assert report.read_text().startswith("batch_size,seed,iter,")
    assert "stationarity bound certification" in summary.read_text()


def test_theory_propositions_suite(capsys):
    code = run_cli("theory", "--suite", "propositions", "--pairs", "40",
                   "--size", "12", "--slices", "1", "--illuminations", "4")
    assert code == 0
    text = capsys.readouterr().out
    assert text.count(": pass") == 4


# ---------------------------------------------------------------------------
# exit codes
# ---------------------------------------------------------------------------


def test_usage_errors_exit_2(capsys):
    assert run_cli("transmogrify") == 2
    assert run_cli() == 2
    assert run_cli("reconstruct", "--batch", "0") == 2
    assert run_cli("probe") == 2  # --denoiser is required
    capsys.readouterr()


def test_data_errors_exit_3(tiny_dataset, tmp_path, capsys):
    m_path, tf_path = tiny_dataset
    # transfer-function container offered as measurements: magic mismatch
    code = run_cli("reconstruct", "--measurements", str(tf_path),
                   "--tf", str(tf_path), "--out", str(tmp_path / "r.idtm"))
    assert code == 3
    assert "bad magic" in capsys.readouterr().err
    # unknown phantom name surfaces from the command body
    assert run_cli("simulate", "--phantom", "checkerboard",
                   "--out-measurements", str(tmp_path / "m.idtm"),
                   "--out-tf", str(tmp_path / "t.idtf")) == 3
    # malformed denoiser parameter
    assert run_cli("reconstruct", "--measurements", str(m_path),
                   "--tf", str(tf_path), "--denoiser", "gaussian:width=2",
                   "--out", str(tmp_path / "r.idtm")) == 3
    capsys.readouterr()


def test_nonconvergence_exit_4(tiny_dataset, tmp_path, monkeypatch, capsys):
    m_path, tf_path = tiny_dataset

    def explode(*a, **k):
        raise NonConvergenceError("cg stalled")

    monkeypatch.setattr(cli, "tikhonov_reconstruct", explode)
    code = run_cli("reconstruct", "--algo", "tikhonov",
                   "--measurements", str(m_path), "--tf", str(tf_path),
                   "--out", str(tmp_path / "r.idtm"))
    assert code == 4
    assert "cg stalled" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# config files
# ---------------------------------------------------------------------------


def test_config_file_expansion(tmp_path):
    cfg = tmp_path / "sim.cfg"
    cfg.write_text(
        "size = 12\n"
        "illuminations = 9   # a comment\n"
        "input_snr_db = inf\n"
        "\n"
        "seed = 7\n")
    m_path = tmp_path / "m.idtm"
    code = run_cli("simulate", "--config", str(cfg),
                   "--out-measurements", str(m_path),
                   "--out-tf", str(tmp_path / "t.idtf"))
    assert code == 0
    m = read_measurements(m_path)
    assert m.y.shape == (9, 12, 12)
    assert m.metadata["input_snr_db"] is None
    assert m.metadata["noise_seed"] == 7


def test_config_file_explicit_flags_win(tmp_path):
    # command-line flags come after expansion, so argparse keeps the last
    cfg = tmp_path / "sim.cfg"
    cfg.write_text("size=12\n")
    m_path = tmp_path / "m.idtm"
    code = run_cli("simulate", "--config", str(cfg), "--size", "10",
                   "--illuminations", "4",
                   "--out-measurements", str(m_path),
                   "--out-tf", str(tmp_path / "t.idtf"))
    assert code == 0
    assert read_measurements(m_path).y.shape == (4, 10, 10)


def test_config_file_booleans_and_errors(tiny_dataset, tmp_path, capsys):
    m_path, tf_path = tiny_dataset
    cfg = tmp_path / "rec.cfg"
    cfg.write_text("full_batch_stub = true\nbatch = 8\niters = 5\n")
    code = run_cli("reconstruct", "--config", str(cfg),
                   "--measurements", str(m_path), "--tf", str(tf_path),
                   "--out", str(tmp_path / "r.idtm"))
    assert code == 0
    _, meta = read_volume(tmp_path / "r.idtm")
    assert meta["batch_size"] == 8

    bad = tmp_path / "bad.cfg"
    bad.write_text("just a line without equals\n")
    assert run_cli("simulate", "--config", str(bad)) == 3
    assert run_cli("simulate", "--config", str(tmp_path / "missing.cfg")) == 3
    capsys.readouterr()


# ---------------------------------------------------------------------------
# console entry point
# ---------------------------------------------------------------------------


def test_console_script_help():
    out = subprocess.run([sys.executable, "-m", "simba_idt.cli", "--help"],
                         capture_output=True, text=True)
    # argparse --help exits 0 and advertises every subcommand
    assert out.returncode == 0
    for name in ("simulate", "reconstruct", "theory", "probe", "compare",
                 "plot"):
        assert name in out.stdout
