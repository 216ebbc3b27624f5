import numpy as np
import numpy.testing as npt
import pytest

from simba_idt.cli import spread_angles
from simba_idt.errors import DataError, DimensionMismatchError
from simba_idt.fidelity import make_rng, operator_norm_bound, power_iteration_norms
from simba_idt.forward import (
    ContrastVolume,
    MeasurementSet,
    TransferFunctionStack,
    adjoint_sum,
    apply_adjoint,
    apply_forward,
    forward_batch,
    normal_apply,
    normal_rhs,
    synth_tf,
    tikhonov_reconstruct,
)
from simba_idt.simulate import make_phantom, simulate_measurements

from conftest import random_volume, small_tf


def conj_flip(g):
    """g(-k) conjugated, with -k taken modulo the grid size."""
    out = np.conj(g[..., ::-1, ::-1])
    out = np.roll(out, 1, axis=-1)
    return np.roll(out, 1, axis=-2)


def random_stack(rng, n_ill, slices, height, width, convention="re_kept"):
    """Unstructured complex stack; adjointness must not rely on symmetry."""
    def c(): return rng.standard_normal((n_ill, slices, height, width)) \
        + 1j * rng.standard_normal((n_ill, slices, height, width))
    return TransferFunctionStack(h_re=c(), h_im=c(), convention=convention)


# ---------------------------------------------------------------------------
# volume container algebra
# ---------------------------------------------------------------------------


def test_volume_algebra_matches_numpy():
    rng = np.random.default_rng(0)
    a = random_volume(rng, 2, 4, 5)
    b = random_volume(rng, 2, 4, 5)
    npt.assert_array_equal((a + b).re, a.re + b.re)
    npt.assert_array_equal((a - b).im, a.im - b.im)
    npt.assert_array_equal((a * 2.5).re, 2.5 * a.re)
    npt.assert_array_equal((-a).im, -a.im)
    want = float(np.sum(a.re * b.re) + np.sum(a.im * b.im))
    assert a.dot(b) == pytest.approx(want, rel=1e-15)
    assert a.norm() == pytest.approx(np.sqrt(a.dot(a)), rel=1e-15)


def test_volume_ravel_round_trip():
    rng = np.random.default_rng(1)
    a = random_volume(rng, 3, 4, 5)
    vec = a.ravel()
    assert vec.shape == (2 * 3 * 4 * 5,)
    # re channel first, then im
    npt.assert_array_equal(vec[:60], a.re.ravel())
    npt.assert_array_equal(vec[60:], a.im.ravel())
    back = ContrastVolume.from_ravel(vec, a.shape)
    npt.assert_array_equal(back.re, a.re)
    npt.assert_array_equal(back.im, a.im)


def test_volume_is_immutable():
    a = ContrastVolume.zeros(1, 2, 2)
    assert not a.re.flags.writeable
    assert not a.im.flags.writeable
    with pytest.raises(ValueError):
        a.re[0, 0, 0] = 1.0


def test_volume_shape_mismatch_raises():
    with pytest.raises(DataError):
        ContrastVolume(np.zeros((1, 2, 2)), np.zeros((1, 2, 3)))
    a = ContrastVolume.zeros(1, 2, 2)
    b = ContrastVolume.zeros(1, 2, 3)
    with pytest.raises(DataError):
        a + b


def test_stack_index_and_volume_checks():
    tf = small_tf(n_ill=2, slices=2, size=8)
    with pytest.raises(DataError):
        tf.check_index(2)
    with pytest.raises(DataError):
        tf.check_index(-3)
    with pytest.raises(DataError):
        tf.check_volume(ContrastVolume.zeros(1, 8, 8))
    m = MeasurementSet(y=np.zeros((3, 8, 8)))
    with pytest.raises(DataError):
        m.check_tf(tf)


# ---------------------------------------------------------------------------
# forward / adjoint pair
# ---------------------------------------------------------------------------


@pytest.mark.parametrize("shape", [(1, 1, 4, 4), (2, 3, 8, 8), (3, 2, 7, 5)])
def test_adjoint_identity_random_stacks(shape):
    # <A x, r> = <x, A^H r> under the real inner product, for arbitrary
    # complex stacks: the pairing may not depend on Hermitian symmetry
    rng = np.random.default_rng(hash(shape) % 2**32)
    n_ill, slices, h, w = shape
    tf = random_stack(rng, n_ill, slices, h, w)
    x = random_volume(rng, slices, h, w)
    r = rng.standard_normal((h, w))
    for i in range(n_ill):
        lhs = float(np.sum(apply_forward(x, tf, i) * r))
        rhs = x.dot(apply_adjoint(r, tf, i))
        assert abs(lhs - rhs) <= 1e-10 * max(1.0, abs(lhs))


def test_adjoint_identity_complex_convention():
    rng = np.random.default_rng(5)
    tf = random_stack(rng, 2, 2, 6, 6, convention="re_dropped")
    x = random_volume(rng, 2, 6, 6)
    r = rng.standard_normal((6, 6)) + 1j * rng.standard_normal((6, 6))
    y = apply_forward(x, tf, 1)
    assert np.iscomplexobj(y)
    lhs = float(np.real(np.vdot(r, y)))
    rhs = x.dot(apply_adjoint(r, tf, 1))
    assert abs(lhs - rhs) <= 1e-10 * max(1.0, abs(lhs))


def test_forward_linearity():
    rng = np.random.default_rng(2)
    tf = small_tf(n_ill=2, slices=2, size=8)
    x = random_volume(rng, 2, 8, 8)
    z = random_volume(rng, 2, 8, 8)
    lhs = apply_forward(x * 1.7 + z * (-0.4), tf, 0)
    rhs = 1.7 * apply_forward(x, tf, 0) - 0.4 * apply_forward(z, tf, 0)
    npt.assert_allclose(lhs, rhs, atol=1e-12)


def test_forward_batch_matches_single():
    rng = np.random.default_rng(3)
    tf = small_tf(n_ill=4, slices=2, size=8)
    x = random_volume(rng, 2, 8, 8)
    idx = np.array([3, 0, 3])
    batch = forward_batch(x, tf, idx)
    for b, i in enumerate(idx):
        npt.assert_array_equal(batch[b], apply_forward(x, tf, int(i)))


def test_adjoint_sum_matches_singles():
    rng = np.random.default_rng(4)
    tf = small_tf(n_ill=4, slices=2, size=8)
    res = rng.standard_normal((3, 8, 8))
    idx = np.array([1, 2, 1])
    total = adjoint_sum(res, tf, idx)
    want = ContrastVolume.zeros(2, 8, 8)
    for b, i in enumerate(idx):
        want = want + apply_adjoint(res[b], tf, int(i))
    npt.assert_allclose(total.re, want.re, atol=1e-12)
    npt.assert_allclose(total.im, want.im, atol=1e-12)


def test_adjoint_sum_rejects_bad_residuals():
    tf = small_tf(n_ill=2, slices=1, size=8)
    with pytest.raises(DimensionMismatchError):
        adjoint_sum(np.zeros((1, 4, 4)), tf, np.array([0]))
    with pytest.raises(DimensionMismatchError):
        adjoint_sum(np.zeros((2, 8, 8)), tf, np.array([0]))


def test_dense_adjoint_is_matrix_transpose():
    # materialize the forward map as a matrix from basis vectors and check
    # that the adjoint materializes as its exact transpose
    rng = np.random.default_rng(6)
    tf = small_tf(n_ill=2, slices=1, size=6, seed=9)
    n = 2 * 1 * 6 * 6
    fwd = np.empty((2, 36, n))
    for col in range(n):
        e = np.zeros(n)
        e[col] = 1.0
        x = ContrastVolume.from_ravel(e, (1, 6, 6))
        for i in range(2):
            fwd[i, :, col] = apply_forward(x, tf, i).ravel()
    adj = np.empty((2, n, 36))
    for row in range(36):
        r = np.zeros(36)
        r[row] = 1.0
        for i in range(2):
            adj[i, :, row] = apply_adjoint(r.reshape(6, 6), tf, i).ravel()
    for i in range(2):
        npt.assert_allclose(adj[i], fwd[i].T, atol=1e-12)


# ---------------------------------------------------------------------------
# synthetic stacks
# ---------------------------------------------------------------------------


def test_synth_tf_hermitian_symmetry():
    tf = small_tf(n_ill=3, slices=2, size=8, seed=4)
    npt.assert_allclose(tf.h_re, conj_flip(tf.h_re), atol=1e-12)
    npt.assert_allclose(tf.h_im, conj_flip(tf.h_im), atol=1e-12)
    # Hermitian stacks acting on real volumes give real predictions, so
    # re_kept drops nothing: forward commutes with doubling the volume
    rng = np.random.default_rng(0)
    x = random_volume(rng, 2, 8, 8)
    npt.assert_allclose(forward_batch(x * 2.0, tf, np.arange(3)),
                        2.0 * forward_batch(x, tf, np.arange(3)), atol=1e-12)


def test_synth_tf_dc_blindness():
    tf = small_tf(n_ill=3, slices=2, size=8, seed=4)
    npt.assert_array_equal(tf.h_re[:, :, 0, 0], 0.0)
    # adding a constant to the phase channel must not change any prediction
    rng = np.random.default_rng(7)
    x = random_volume(rng, 2, 8, 8)
    shifted = ContrastVolume(x.re + 3.21, x.im)
    npt.assert_allclose(forward_batch(shifted, tf, np.arange(3)),
                        forward_batch(x, tf, np.arange(3)), atol=1e-12)


def test_synth_tf_pupil_support():
    tf = synth_tf(16, 16, 1, wavelength_um=0.63, na=0.65,
                  illumination_angles=spread_angles(4, 0.35), seed=1)
    pixel = tf.metadata["pixel_size_um"]
    assert pixel == pytest.approx(0.63 / (4 * 0.65))
    fx = np.fft.fftfreq(16, d=pixel)[None, :]
    fy = np.fft.fftfreq(16, d=pixel)[:, None]
    outside = (fx ** 2 + fy ** 2) > (0.65 / 0.63) ** 2
    assert outside.any()
    assert np.all(tf.h_re[:, :, outside] == 0.0)
    assert np.all(tf.h_im[:, :, outside] == 0.0)


def test_synth_tf_seed_controls_gains():
    a = small_tf(seed=0)
    b = small_tf(seed=0)
    c = small_tf(seed=1)
    npt.assert_array_equal(a.h_im, b.h_im)
    assert np.any(a.h_im != c.h_im)


def test_synth_tf_validation():
    angles = [(0.0, 0.0)]
    with pytest.raises(DataError):
        synth_tf(0, 8, 1, wavelength_um=0.63, na=0.65, illumination_angles=angles)
    with pytest.raises(DataError):
        synth_tf(8, 8, 1, wavelength_um=0.63, na=1.5, illumination_angles=angles)
    with pytest.raises(DataError):
        synth_tf(8, 8, 1, wavelength_um=-1.0, na=0.65, illumination_angles=angles)
    with pytest.raises(DataError):
        synth_tf(8, 8, 1, wavelength_um=0.63, na=0.65, illumination_angles=[])


# ---------------------------------------------------------------------------
# Tikhonov baseline
# ---------------------------------------------------------------------------


def dense_normal_system(m, tf):
    """Materialized mean normal operator and right-hand side."""
    slices, h, w = tf.slices, tf.height, tf.width
    n = 2 * slices * h * w
    n_ill = tf.illuminations
    a = np.empty((n_ill * h * w, n))
    for col in range(n):
        e = np.zeros(n)
        e[col] = 1.0
        x = ContrastVolume.from_ravel(e, (slices, h, w))
        a[:, col] = forward_batch(x, tf, np.arange(n_ill)).ravel()
    gram = a.T @ a / n_ill
    rhs = a.T @ m.y.ravel() / n_ill
    return gram, rhs


def tikhonov_case(size=6, slices=2, n_ill=3, seed=20, snr_db=30.0):
    tf = small_tf(n_ill=n_ill, slices=slices, size=size, seed=seed)
    truth = make_phantom(size, size, slices, "disks", seed, max_contrast=0.1,
                         with_absorption=True)
    m = simulate_measurements(truth, tf, snr_db, seed + 1)
    return tf, m


def test_tikhonov_matches_dense_solve():
    tf, m = tikhonov_case()
    reg = 0.05
    gram, rhs = dense_normal_system(m, tf)
    want = np.linalg.solve(gram + reg * np.eye(gram.shape[0]), rhs)
    got = tikhonov_reconstruct(m, tf, reg)
    assert got.iterations == 0
    assert got.relative_residual == 0.0
    npt.assert_allclose(got.volume.ravel(), want, atol=1e-8)


def test_tikhonov_cg_matches_per_frequency():
    tf, m = tikhonov_case()
    reg = 0.05
    direct = tikhonov_reconstruct(m, tf, reg, method="per_frequency")
    cg = tikhonov_reconstruct(m, tf, reg, method="cg", cg_rtol=1e-12)
    assert cg.iterations > 0
    npt.assert_allclose(cg.volume.ravel(), direct.volume.ravel(), atol=1e-7)


def test_tikhonov_auto_prefers_diagonal():
    tf, m = tikhonov_case()
    res = tikhonov_reconstruct(m, tf, 0.1, method="auto")
    assert res.iterations == 0


def test_tikhonov_validation():
    tf, m = tikhonov_case()
    with pytest.raises(DataError):
        tikhonov_reconstruct(m, tf, -1.0)
    with pytest.raises(DataError):
        tikhonov_reconstruct(m, tf, 0.1, method="explicit")


def test_normal_operator_matches_dense():
    rng = np.random.default_rng(8)
    tf, m = tikhonov_case()
    gram, rhs = dense_normal_system(m, tf)
    x = random_volume(rng, tf.slices, tf.height, tf.width)
    npt.assert_allclose(normal_apply(x, tf).ravel(), gram @ x.ravel(), atol=1e-10)
    npt.assert_allclose(normal_rhs(m, tf).ravel(), rhs, atol=1e-10)


def test_operator_norm_bound_dominates_power_iteration():
    tf = small_tf(n_ill=4, slices=3, size=8, seed=12)
    norms = power_iteration_norms(tf, iters=200, rtol=1e-12)
    for i in range(4):
        assert operator_norm_bound(tf, i) >= norms[i] - 1e-9
