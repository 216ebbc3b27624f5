"""Training mechanics: loss definition, first-order step check, logging,
divergence abort, and the evaluation report."""

import math

import numpy as np
import pytest
import torch

from dncnn_trainer.data import PatchSampler, load_images, make_corpus
from dncnn_trainer.errors import CorpusError, TrainerError, TrainingDiverged
from dncnn_trainer.evaluate import evaluate, psnr_db
from dncnn_trainer.model import DnCnnStar
from dncnn_trainer.train import TrainConfig, mixed_loss, train
from dncnn_trainer.weights_io import read_dnw, write_dnw


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    folder = tmp_path_factory.mktemp("corpus")
    make_corpus(folder, count=6, size=64, seed=5)
    return folder


# ---------------------------------------------------------------------------
# corpus and sampler
# ---------------------------------------------------------------------------


def test_corpus_is_deterministic_and_in_range(tmp_path):
    a = tmp_path / "a"
    b = tmp_path / "b"
    paths_a = make_corpus(a, count=3, size=32, seed=9)
    make_corpus(b, count=3, size=32, seed=9)
    for pa, pb in zip(sorted(a.iterdir()), sorted(b.iterdir())):
        assert pa.read_bytes() == pb.read_bytes()
    imgs = load_images(a)
    assert len(imgs) == len(paths_a) == 3
    for im in imgs:
        assert im.dtype == np.float32 and im.shape == (32, 32)
        assert 0.0 <= im.min() and im.max() <= 1.0


def test_load_images_rejects_empty_folder(tmp_path):
    with pytest.raises(CorpusError):
        load_images(tmp_path / "missing")
    empty = tmp_path / "empty"
    empty.mkdir()
    with pytest.raises(CorpusError):
        load_images(empty)


def test_sampler_shapes_and_intensity(corpus):
    imgs = load_images(corpus)
    rng = np.random.default_rng(0)
    s = PatchSampler(imgs, 16, rng, intensity_range=(0.1, 0.5),
                     full_scale_share=0.0)
    batch = s.sample(40)
    assert batch.shape == (40, 1, 16, 16) and batch.dtype == np.float32
    # every patch was dimmed into the requested range
    assert float(batch.max()) <= 0.5 + 1e-6

    plain = PatchSampler(imgs, 16, np.random.default_rng(0),
                         intensity_range=(1.0, 1.0), full_scale_share=1.0)
    assert float(plain.sample(40).max()) <= 1.0

    with pytest.raises(CorpusError):
        PatchSampler(imgs, 100, rng)


def test_sampler_is_seed_deterministic(corpus):
    imgs = load_images(corpus)
    a = PatchSampler(imgs, 12, np.random.default_rng(7)).sample(8)
    b = PatchSampler(imgs, 12, np.random.default_rng(7)).sample(8)
    assert np.array_equal(a, b)


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------


def test_mixed_loss_hand_value():
    pred = torch.tensor([[[[1.0, -1.0]]], [[[0.5, 0.0]]]], dtype=torch.float64)
    target = torch.tensor([[[[0.0, 1.0]]], [[[0.5, -2.0]]]], dtype=torch.float64)
    # patch residuals: (1, -2) and (0, 2)
    expected_l2 = ((1 + 4) + (0 + 4)) / 2
    expected_l1 = ((1 + 2) + (0 + 2)) / 2
    assert float(mixed_loss(pred, target, 0.0)) == pytest.approx(expected_l2, abs=1e-12)
    assert float(mixed_loss(pred, target, 0.5)) == pytest.approx(
        expected_l2 + 0.5 * expected_l1, abs=1e-12)


def test_rho_zero_matches_independent_mse():
    rng = np.random.default_rng(1)
    pred = rng.normal(size=(4, 1, 9, 9))
    target = rng.normal(size=(4, 1, 9, 9))
    expected = np.mean([np.sum((pred[i] - target[i]) ** 2) for i in range(4)])
    got = float(mixed_loss(torch.from_numpy(pred), torch.from_numpy(target), 0.0))
    assert got == pytest.approx(expected, abs=1e-6)


@pytest.mark.parametrize("rho", [0.0, 1.0])
def test_first_order_step_prediction(rho):
    """One SGD step from zero weights moves the loss by -lr * ||grad||^2 to
    first order; with a small step the measured change agrees within 10%."""
    torch.manual_seed(2)
    net = DnCnnStar(layers=3, hidden=8).double()
    with torch.no_grad():
        for p in net.parameters():
            p.zero_()
    rng = np.random.default_rng(3)
    clean = rng.uniform(0.2, 0.8, size=(4, 1, 8, 8))
    noise = rng.normal(0.0, 0.08, size=clean.shape)
    noisy = torch.from_numpy(clean + noise)
    target = torch.from_numpy(noise)

    loss0 = mixed_loss(net(noisy), target, rho)
    loss0.backward()
    lr = 1e-4
    predicted = -lr * sum(float((p.grad ** 2).sum()) for p in net.parameters())
    assert predicted < 0  # the last bias always sees a gradient
    with torch.no_grad():
        for p in net.parameters():
            p -= lr * p.grad
        loss1 = mixed_loss(net(noisy), target, rho)
    change = float(loss1) - float(loss0.detach())
    assert change == pytest.approx(predicted, rel=0.1)


# ---------------------------------------------------------------------------
# train()
# ---------------------------------------------------------------------------


def test_config_validation(corpus):
    with pytest.raises(TrainerError):
        TrainConfig(image_folder=str(corpus), sigma=12)
    with pytest.raises(TrainerError):
        TrainConfig(image_folder=str(corpus), rho=-0.5)
    with pytest.raises(TrainerError):
        TrainConfig(image_folder=str(corpus), patch_size=4)
    with pytest.raises(TrainerError):
        TrainConfig(image_folder=str(corpus), lr=0.0)
    with pytest.raises(TrainerError):
        TrainConfig(image_folder=str(corpus), epochs=0)


def tiny_config(corpus, tmp_path, **overrides):
    base = dict(image_folder=str(corpus), sigma=10, rho=0.0, layers=3,
                epochs=2, patch_size=16, seed=0, hidden=8, batch_size=4,
                batches_per_epoch=6, lr=1e-3,
                out_path=str(tmp_path / "tiny.dnw"), spectral_norm_iters=10)
    base.update(overrides)
    return TrainConfig(**base)


def test_train_exports_and_logs(corpus, tmp_path):
    config = tiny_config(corpus, tmp_path)
    path = train(config)
    assert path == config.out_path

    kernels, biases, meta, norms = read_dnw(path)
    assert len(kernels) == 3 and kernels[0].shape == (8, 1, 3, 3)
    assert meta["sigma"] == 10 and meta["optimizer"] == "adam"
    assert meta["epochs"] == 2 and meta["corpus_images"] == 6
    assert meta["residual"] is True
    assert len(norms) == 3 and all(n > 0 for n in norms)

    lines = (tmp_path / "tiny.dnw.log.csv").read_text().strip().splitlines()
    assert lines[0] == "epoch,lr,mean_loss,mean_rmse,wall_seconds"
    assert len(lines) == 3
    rows = [line.split(",") for line in lines[1:]]
    assert [r[0] for r in rows] == ["0", "1"]
    losses = [float(r[2]) for r in rows]
    assert all(math.isfinite(v) for v in losses)
    assert losses[1] < losses[0]  # past the init transient the loss drops
    assert float(rows[1][4]) >= float(rows[0][4])


def test_train_is_seed_deterministic(corpus, tmp_path):
    a = train(tiny_config(corpus, tmp_path, out_path=str(tmp_path / "a.dnw")))
    b = train(tiny_config(corpus, tmp_path, out_path=str(tmp_path / "b.dnw")))
    assert (tmp_path / "a.dnw").read_bytes() == (tmp_path / "b.dnw").read_bytes()
    assert a != b


def test_divergent_loss_aborts_with_epoch(corpus, tmp_path):
    config = tiny_config(corpus, tmp_path, layers=4, lr=1e8, epochs=3,
                         batches_per_epoch=8)
    with pytest.raises(TrainingDiverged) as err:
        train(config)
    assert err.value.epoch == 0
    assert "epoch 0" in str(err.value)


# ---------------------------------------------------------------------------
# evaluate()
# ---------------------------------------------------------------------------


def test_psnr_definition():
    truth = np.zeros((4, 4))
    est = np.full((4, 4), 0.1)
    assert psnr_db(est, truth) == pytest.approx(20.0)
    assert psnr_db(truth, truth) == math.inf


def test_identity_weights_leave_psnr_unchanged(corpus, tmp_path):
    kernels = [np.zeros((8, 1, 3, 3), np.float32),
               np.zeros((1, 8, 3, 3), np.float32)]
    biases = [np.zeros(8, np.float32), np.zeros(1, np.float32)]
    path = tmp_path / "zero.dnw"
    write_dnw(path, kernels, biases, {"sigma": 10})
    report = evaluate(path, corpus, 10, seed=0)
    assert report.gain_db == 0.0
    for _, noisy, denoised in report.per_image:
        assert noisy == denoised


def test_cli_round_trip(tmp_path, capsys):
    from dncnn_trainer.cli import main

    folder = str(tmp_path / "imgs")
    assert main(["make-corpus", "--folder", folder, "--count", "3",
                 "--size", "48", "--seed", "4"]) == 0
    out = str(tmp_path / "cli.dnw")
    assert main(["train", "--folder", folder, "--sigma", "10", "--layers", "2",
                 "--hidden", "4", "--epochs", "1", "--patch", "16",
                 "--batch", "2", "--batches-per-epoch", "2",
                 "--out", out]) == 0
    assert main(["evaluate", "--weights", out, "--folder", folder,
                 "--sigma", "10"]) == 0
    text = capsys.readouterr().out
    assert "wrote 3 images" in text
    assert f"wrote weights to {out}" in text
    assert "sigma 10:" in text

    assert main(["train", "--folder", str(tmp_path / "nowhere"),
                 "--out", out]) == 1
    assert "error:" in capsys.readouterr().err


def test_evaluate_is_seeded(corpus, tmp_path):
    kernels = [np.zeros((1, 1, 3, 3), np.float32)]
    biases = [np.zeros(1, np.float32)]
    path = tmp_path / "zero1.dnw"
    write_dnw(path, kernels, biases)
    a = evaluate(path, corpus, 10, seed=0)
    b = evaluate(path, corpus, 10, seed=0)
    c = evaluate(path, corpus, 10, seed=1)
    assert a.noisy_psnr_db == b.noisy_psnr_db
    assert a.noisy_psnr_db != c.noisy_psnr_db
    assert "sigma 10" in a.summary()
