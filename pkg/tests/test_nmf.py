import numpy as np
import pytest

from clustile import nmf
from clustile.errors import ValidationError
from clustile.synth import SynthSpec, gen_planted_matrix


def brute_objective(V, W, H):
    """Independent scalar-loop evaluation of sum((V - WH)^2)."""
    n, c = V.shape
    k = W.shape[1]
    total = 0.0
    for m in range(n):
        for j in range(c):
            recon = 0.0
            for q in range(k):
                recon += W[m, q] * H[q, j]
            total += (V[m, j] - recon) ** 2
    return total


def test_objective_exact_cases():
    W = np.array([[1.0, 2.0], [0.5, 1.5]])
    H = np.array([[1.0, 0.0, 2.0], [0.0, 1.0, 1.0]])
    assert nmf.objective(W @ H, W, H) == 0.0
    assert nmf.objective(np.array([[1.0]]), np.array([[0.0]]), np.array([[5.0]])) == 1.0


def test_objective_matches_scalar_loop_oracle():
    rng = np.random.default_rng(0)
    for _ in range(5):
        V = rng.random((3, 4))
        W = rng.random((3, 2))
        H = rng.random((2, 4))
        assert nmf.objective(V, W, H) == pytest.approx(brute_objective(V, W, H), abs=1e-12)


def test_objective_shape_mismatch():
    with pytest.raises(ValidationError):
        nmf.objective(np.ones((2, 2)), np.ones((2, 2)), np.ones((3, 2)))


def test_train_identity_exact_factorization():
    V = np.eye(2)
    result = nmf.nmf_train(V, 2, max_iters=2000, rel_tol=0.0, seed=5)
    assert result.model.final_objective <= 1e-6


def test_train_planted_recovery():
    spec = SynthSpec(seed=11, n_rows=500, channels=64, k=6, noise_sigma=0.0)
    V, _, _ = gen_planted_matrix(spec)
    result = nmf.nmf_train(V, 6, max_iters=500, rel_tol=0.0, seed=0)
    rel = np.sqrt(result.model.final_objective) / np.linalg.norm(V)
    assert rel <= 1e-2


def test_train_monotone_and_nonnegative():
    rng = np.random.default_rng(3)
    V = rng.random((60, 20))
    result = nmf.nmf_train(V, 5, max_iters=80, rel_tol=0.0, seed=1)
    history = np.asarray(result.history)
    assert np.all(np.diff(history) <= 1e-10)
    assert (result.weights >= 0).all()
    assert (result.model.basis >= 0).all()


def test_train_deterministic():
    rng = np.random.default_rng(4)
    V = rng.random((40, 10))
    a = nmf.nmf_train(V, 3, seed=9)
    b = nmf.nmf_train(V, 3, seed=9)
    assert np.array_equal(a.weights, b.weights)
    assert np.array_equal(a.model.basis, b.model.basis)
    c = nmf.nmf_train(V, 3, seed=10)
    assert not np.array_equal(a.model.basis, c.model.basis)


def test_train_input_validation():
    with pytest.raises(ValidationError):
        nmf.nmf_train(np.array([[1.0, -0.1], [0.2, 0.3]]), 1)
    with pytest.raises(ValidationError):
        nmf.nmf_train(np.ones((2, 2)), 0)
    with pytest.raises(ValidationError):
        nmf.nmf_train(np.ones((2, 2)), 3)
    with pytest.raises(ValidationError):
        nmf.nmf_train(np.zeros((4, 4)), 2)
    with pytest.raises(ValidationError):
        nmf.nmf_train(np.array([[np.inf, 1.0]]), 1)


def test_infer_recovers_scaled_basis_row():
    from clustile.synth import planted_basis

    spec = SynthSpec(seed=3, channels=24, k=4)
    H = planted_basis(spec, np.random.default_rng(3))
    model = nmf.FactorModel(basis=H, seed=0, train_iterations=0, final_objective=0.0)
    V = 2.5 * H[2][None, :]
    W = nmf.nmf_infer(model, V, max_iters=500)
    expected = 2.5 * np.eye(4)[2]
    assert np.abs(W[0] - expected).max() <= 1e-3
    assert nmf.argmax_cluster(W)[0] == 3  # classes are 1-based


def test_infer_zero_matrix_gives_zero_weights():
    H = np.ones((3, 5))
    model = nmf.FactorModel(basis=H, seed=0, train_iterations=0, final_objective=0.0)
    W = nmf.nmf_infer(model, np.zeros((4, 5)))
    assert np.array_equal(W, np.zeros((4, 3)))


def test_infer_channel_mismatch():
    model = nmf.FactorModel(basis=np.ones((2, 4)), seed=0, train_iterations=0,
                            final_objective=0.0)
    with pytest.raises(ValidationError):
        nmf.nmf_infer(model, np.ones((3, 5)))


def test_infer_keeps_basis_and_is_idempotent_on_training_data():
    rng = np.random.default_rng(8)
    V = rng.random((80, 16))
    result = nmf.nmf_train(V, 4, seed=2)
    basis_before = result.model.basis.copy()
    W = nmf.nmf_infer(result.model, V)
    assert np.array_equal(result.model.basis, basis_before)
    bound = result.model.final_objective + nmf.DEFAULT_REL_TOL * np.sum(V * V)
    assert nmf.objective(V, W, result.model.basis) <= bound


def test_argmax_cluster_rules():
    W = np.array([[0.1, 0.7, 0.2], [0.4, 0.4, 0.1], [0.0, 0.0, 0.0]])
    out = nmf.argmax_cluster(W)
    assert out.tolist() == [2, 1, nmf.UNASSIGNED]


def test_argmax_scale_invariance():
    rng = np.random.default_rng(1)
    W = rng.random((20, 5))
    scaled = W.copy()
    scaled[7] *= 123.0
    assert np.array_equal(nmf.argmax_cluster(W), nmf.argmax_cluster(scaled))


def test_prune_weights_clears_trailing_noise():
    W = np.array([[1.0, 0.001, 0.2], [0.005, 0.004, 0.003], [0.0, 0.0, 0.0]])
    out = nmf.prune_weights(W, rel_tol=0.05, row_floor=0.02)
    assert out[0].tolist() == [1.0, 0.0, 0.2]
    assert not out[1].any()  # row max far below the strongest row
    assert not out[2].any()
    assert np.array_equal(nmf.prune_weights(W, rel_tol=0.0, row_floor=0.0), W)


def test_model_save_load_round_trip(tmp_path):
    rng = np.random.default_rng(6)
    V = rng.random((30, 8))
    result = nmf.nmf_train(V, 2, seed=7)
    path = tmp_path / "model.clt"
    nmf.save_model(result.model, path)
    back = nmf.load_model(path)
    assert back.k == 2 and back.channels == 8
    assert back.seed == 7
    assert back.train_iterations == result.model.train_iterations
    assert back.final_objective == result.model.final_objective
    assert np.array_equal(back.basis, result.model.basis.astype(np.float32).astype(np.float64))