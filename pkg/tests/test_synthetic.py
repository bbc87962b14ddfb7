import math

import numpy as np
import pytest
from scipy.integrate import quad

from cgsysid import kernels as K
from cgsysid import synthetic as Sy


@pytest.fixture(scope="module")
def op16():
    return Sy.build_operator(16)


@pytest.fixture(scope="module")
def held16(op16):
    return Sy.heldout_set(op16)


@pytest.mark.parametrize("t, a, b, value", [
    (2.0, 0.0, 1.0, 2 * math.log(2) - 1),
    (1.0, 0.0, 1.0, -1.0),
    (0.5, 0.0, 1.0, math.log(0.5) - 1),
    (0.0, 0.0, 1.0, -1.0),
])
def test_kernel_entry_closed_forms(t, a, b, value):
    assert Sy.integral_kernel_entry(t, a, b) == pytest.approx(value, abs=1e-14)


@pytest.mark.parametrize("t, a, b", [(0.3, 0.1, 0.2), (0.15, 0.1, 0.2), (0.9, 0.0, 0.25)])
def test_kernel_entry_quadrature(t, a, b):
    pts = [t] if a < t < b else None
    ref = quad(lambda s: math.log(abs(t - s)), a, b, points=pts, limit=200)[0]
    assert Sy.integral_kernel_entry(t, a, b) == pytest.approx(ref, abs=1e-10)


def test_kernel_entry_errors():
    with pytest.raises(ValueError):
        Sy.integral_kernel_entry(0.5, 1.0, 1.0)


def test_operator_structure(op16):
    A = op16.A
    assert A.shape == (16, 16) and np.all(np.isfinite(A))
    assert np.max(np.abs(A - A.T)) < 1e-12
    assert np.all(np.argmin(A, axis=1) == np.arange(16))
    assert np.allclose(op16.points, (np.arange(16) + 0.5) / 16)
    # midpoint collocation on a uniform grid makes every band constant
    for m in range(16):
        band = np.diagonal(A, m)
        assert np.ptp(band) < 1e-12
    # squared Frobenius norm 3.4303 (computed once)
    assert np.sum(A * A) == pytest.approx(3.4303, abs=5e-4)


def test_operator_small_cases():
    assert Sy.build_operator(1).A[0, 0] == pytest.approx(math.log(0.5) - 1, abs=1e-14)
    with pytest.raises(ValueError):
        Sy.build_operator(12)


def test_projection_vaf(op16, held16):
    hier = K.to_dense(K.project_to_hierarchical(op16.A, k=1)).values
    toep = K.toeplitz_matrix(op16.A[0])
    # 99.96 for the hierarchical projection; the operator is exactly Toeplitz
    assert Sy.operator_vaf(hier, held16) == pytest.approx(99.96, abs=0.01)
    assert Sy.operator_vaf(toep, held16) == pytest.approx(100.0, abs=1e-9)


def test_samples(op16):
    s = Sy.gen_samples(op16, 20, 0.0, seed=3)
    F, Y = Sy.stack(s)
    assert F.shape == Y.shape == (20, 16)
    assert np.allclose(Y, F @ op16.A.T, rtol=0, atol=1e-14)
    again = Sy.stack(Sy.gen_samples(op16, 20, 0.0, seed=3))
    assert np.array_equal(again[0], F) and np.array_equal(again[1], Y)
    # the first m samples of a larger draw are the m-sample draw
    assert np.array_equal(Sy.stack(Sy.gen_samples(op16, 50, 0.0, seed=3))[0][:20], F)
    with pytest.raises(ValueError):
        Sy.gen_samples(op16, -1, 0.0)


def test_noise_level(op16):
    F, Y = Sy.stack(Sy.gen_samples(op16, 10_000, 0.3, seed=4))
    E = Y - F @ op16.A.T
    assert np.mean(np.sum(E * E, axis=1) / 16) == pytest.approx(0.09, rel=0.05)


def test_objective_matches_per_sample_loss(op16):
    rng = np.random.default_rng(5)
    F, Y = Sy.stack(Sy.gen_samples(op16, 40, 0.1, seed=5))
    for rep in Sy.MODEL_CLASSES:
        spec = Sy.class_spec(rep, 16)
        theta = rng.normal(size=K.param_count(spec))
        obj = Sy.OperatorObjective(spec, F, Y, l2=0.01)
        ker = K.unflatten(theta, spec)
        resid = np.array([K.matvec(ker, f) for f in F]) - Y
        ref = np.mean(resid ** 2) + 0.01 * theta @ theta
        value, grad = obj.value_and_grad(theta)
        assert value == pytest.approx(ref, rel=1e-10)
        up = 2 * resid / resid.size
        gref = sum(K.grad_matvec(ker, f, u) for f, u in zip(F, up)) + 0.02 * theta
        assert np.allclose(grad, gref, rtol=1e-9, atol=1e-12)


def test_dense_recovers_operator(op16, held16):
    F, Y = Sy.stack(Sy.gen_samples(op16, 1024, 0.0, seed=6))
    cfg = Sy.SYNTH_CONFIG.with_(epochs=20000, tol=1e-12)
    fitted, v = Sy.fit_arrays("dense", F, Y, held16, cfg)
    assert np.max(np.abs(fitted.values - op16.A)) < 1e-3
    assert v > 99.99


def test_toeplitz_realizable(op16, held16):
    fitted, v = Sy.fit_operator("toeplitz_sym", Sy.gen_samples(op16, 64, 0.0, seed=7), held16)
    assert v > 99.9


def test_hierarchical_near_projection(op16, held16):
    proj = K.to_dense(K.project_to_hierarchical(op16.A, k=1)).values
    bound = Sy.operator_vaf(proj, held16)
    _, v = Sy.fit_operator("hierarchical", Sy.gen_samples(op16, 512, 0.0, seed=8), held16)
    assert v >= bound - 1.0


def test_fit_errors(op16, held16):
    with pytest.raises(ValueError):
        Sy.fit_operator("dense", [], held16)
    with pytest.raises(ValueError):
        Sy.class_spec("banded", 16)


def test_min_samples_toeplitz_noiseless(op16, held16):
    res = Sy.min_samples_for_accuracy("toeplitz_sym", 0.0, 95.0, repeats=3, op=op16, heldout=held16)
    assert 1 <= res.m_star <= 8192 and not res.saturated
    assert res.median_vaf >= 95.0


def test_min_samples_saturates(op16, held16):
    res = Sy.min_samples_for_accuracy("dense", 1.0, 99.99, repeats=1, cap=16, op=op16, heldout=held16)
    assert res.saturated and res.m_star == 16


def test_min_samples_deterministic(op16, held16):
    runs = [Sy.min_samples_for_accuracy("hierarchical", 0.1, 90.0, repeats=3, op=op16, heldout=held16)
            for _ in range(2)]
    assert runs[0].m_star == runs[1].m_star and runs[0].evaluated == runs[1].evaluated


def test_sweep_small(tmp_path):
    rep = Sy.sweep(sigmas=(0.1, 0.3), classes=("toeplitz_sym", "hierarchical"), target_vaf=90.0,
                   repeats=1, N=8)
    assert len(rep.rows) == 4
    assert [r[:2] for r in rep.rows] == [("toeplitz_sym", 0.1), ("hierarchical", 0.1),
                                         ("toeplitz_sym", 0.3), ("hierarchical", 0.3)]
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    rep.to_csv(a)
    Sy.sweep(sigmas=(0.1, 0.3), classes=("toeplitz_sym", "hierarchical"), target_vaf=90.0,
             repeats=1, N=8).to_csv(b)
    assert a.read_bytes() == b.read_bytes()
    assert a.read_text().splitlines()[0] == "class,sigma,m_star,median_vaf,saturated_flag"
