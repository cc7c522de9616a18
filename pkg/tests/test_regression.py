import numpy as np
import pytest
from conftest import random_basis, random_dataset

from kcfcert.dictionary import PolynomialDictionary, make_lifted_linear
from kcfcert.errors import RankDeficiencyError, ValidationError
from kcfcert.regression import (
    FittedModel,
    SnapshotDataset,
    design_matrices,
    edmd_full,
    fit_top_block,
    forward_backward,
    forward_backward_matrices,
    pinv_full_row_rank,
)
from kcfcert.systems import ExperimentProtocol, collect, synthetic_linear


def scalar_linear_dataset(n_snap=200, seed=0):
    """Snapshots of x+ = 0.5 x + u under diverse random inputs."""
    system = synthetic_linear(np.array([[0.5]]), np.array([[1.0]]))
    protocol = ExperimentProtocol(
        duration=float(n_snap), dt=1.0, hold=1.0, x0=[0.3], seed=seed,
    )
    return collect(system, protocol)


class TestPinv:
    def test_scalar(self):
        assert np.allclose(pinv_full_row_rank(np.array([[2.0]]), "M"), [[0.5]])

    def test_unit_row(self):
        got = pinv_full_row_rank(np.array([[1.0, 0.0, 0.0]]), "M")
        assert np.array_equal(got, np.array([[1.0], [0.0], [0.0]]))

    def test_right_inverse_identity(self):
        rng = np.random.default_rng(1)
        m = rng.normal(size=(3, 8))
        assert np.allclose(m @ pinv_full_row_rank(m, "M"), np.eye(3), atol=1e-10)

    def test_rank_deficient_rows(self):
        m = np.ones((2, 6))
        with pytest.raises(RankDeficiencyError) as err:
            pinv_full_row_rank(m, "duplicated")
        assert "duplicated" in str(err.value)
        assert "cond" in str(err.value)

    def test_more_rows_than_columns(self):
        with pytest.raises(RankDeficiencyError):
            pinv_full_row_rank(np.eye(4)[:, :2], "tall")

    def test_pinv_projector_identities(self):
        rng = np.random.default_rng(2)
        l = rng.normal(size=(5, 40))
        l_pinv = pinv_full_row_rank(l, "L")
        proj = l_pinv @ l
        assert np.allclose(l @ proj, l, atol=1e-10)
        assert np.allclose(proj, proj.T, atol=1e-10)


class TestSnapshotDataset:
    def test_shape_validation(self):
        with pytest.raises(ValidationError):
            SnapshotDataset(np.zeros((2, 5)), np.zeros((1, 4)),
                            np.zeros((2, 5)), np.ones(5, bool))
        with pytest.raises(ValidationError):
            SnapshotDataset(np.zeros((2, 5)), np.zeros((1, 5)),
                            np.zeros((3, 5)), np.ones(5, bool))
        with pytest.raises(ValidationError):
            SnapshotDataset(np.zeros((2, 0)), np.zeros((1, 0)),
                            np.zeros((2, 0)), np.zeros(0, bool))

    def test_split_views(self):
        data = scalar_linear_dataset(20)
        assert data.n_train + data.n_test == data.n_snapshots
        assert data.train.n_snapshots == data.n_train
        assert data.test.n_snapshots == data.n_test
        assert np.all(data.train.train_mask)

    def test_save_load_round_trip(self, tmp_path):
        data = scalar_linear_dataset(25)
        path = tmp_path / "data.csv"
        data.save(path)
        back = SnapshotDataset.load(path)
        assert np.array_equal(back.x, data.x)
        assert np.array_equal(back.u, data.u)
        assert np.array_equal(back.xplus, data.xplus)
        assert np.array_equal(back.train_mask, data.train_mask)
        assert back.meta["system"] == "synthetic-linear"

    def test_load_missing_sidecar(self, tmp_path):
        path = tmp_path / "data.csv"
        path.write_text("x1,u1,xplus1,split\n1.0,0.0,0.5,train\n")
        with pytest.raises(ValidationError):
            SnapshotDataset.load(path)


class TestEdmd:
    def test_identity_transition(self):
        rng = np.random.default_rng(3)
        basis = random_basis(rng, n=2, m=1, n_h=3, n_rows=2)
        x = rng.normal(size=(2, 40))
        data = SnapshotDataset(x, rng.uniform(-1, 1, (1, 40)), x, np.ones(40, bool))
        a = edmd_full(basis, data)
        assert np.allclose(a, np.eye(basis.n_psi), atol=1e-8)

    def test_known_scalar_coefficients(self):
        data = scalar_linear_dataset()
        basis = make_lifted_linear(PolynomialDictionary.coordinates(1), 1)
        a = edmd_full(basis, data)
        # Psi = [x; 1; u]: first row advances x+ = 0.5 x + 0*1 + 1*u
        assert np.allclose(a[0], [0.5, 0.0, 1.0], atol=1e-10)

    def test_too_few_snapshots(self):
        data = scalar_linear_dataset(2)
        basis = make_lifted_linear(PolynomialDictionary.coordinates(1), 1)
        with pytest.raises(RankDeficiencyError):
            edmd_full(basis, data)


class TestFitTopBlock:
    def test_known_scalar_blocks(self):
        data = scalar_linear_dataset()
        basis = make_lifted_linear(PolynomialDictionary.coordinates(1), 1)
        model = fit_top_block(basis, data)
        assert np.allclose(model.a11, [[0.5, 0.0], [0.0, 1.0]], atol=1e-10)
        assert np.allclose(model.a12, [[1.0], [0.0]], atol=1e-10)
        assert model.diagnostics["relative_residual"] < 1e-12

    def test_identity_transition(self):
        rng = np.random.default_rng(5)
        basis = random_basis(rng, n=2, m=1, n_h=3, n_rows=2)
        x = rng.normal(size=(2, 40))
        data = SnapshotDataset(x, rng.uniform(-1, 1, (1, 40)), x, np.ones(40, bool))
        model = fit_top_block(basis, data)
        assert np.allclose(model.a11, np.eye(3), atol=1e-8)
        assert np.allclose(model.a12, 0.0, atol=1e-8)

    def test_matches_edmd_top_rows(self):
        rng = np.random.default_rng(6)
        for _ in range(5):
            basis = random_basis(rng)
            data = random_dataset(rng, basis.n, basis.m, 50)
            model = fit_top_block(basis, data)
            a = edmd_full(basis, data)
            assert np.allclose(model.a_top, a[: basis.n_h], atol=1e-12)

    def test_residual_optimality(self):
        rng = np.random.default_rng(7)
        basis = random_basis(rng, n=2, m=1, n_h=3, n_rows=2)
        data = random_dataset(rng, 2, 1, 60)
        model = fit_top_block(basis, data)
        j, l = design_matrices(basis, data)
        best = np.linalg.norm(j - model.a_top @ l)
        for _ in range(20):
            delta = rng.normal(size=model.a_top.shape)
            delta *= 1e-3 / np.linalg.norm(delta)
            perturbed = np.linalg.norm(j - (model.a_top + delta) @ l)
            assert perturbed >= best - 1e-12

    def test_payload_round_trip(self):
        data = scalar_linear_dataset(50)
        basis = make_lifted_linear(PolynomialDictionary.coordinates(1), 1)
        model = fit_top_block(basis, data)
        back = FittedModel.from_payload(model.to_payload(), basis)
        assert np.array_equal(back.a11, model.a11)
        assert np.array_equal(back.a12, model.a12)
        with pytest.raises(ValidationError):
            FittedModel.from_payload({"a11": [[1.0]], "a12": [[0.0]]}, basis)


class TestForwardBackward:
    def test_raw_matrix_example(self):
        j = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
        l = np.array([[1.0, 0.0, 0.0]])
        a_f, a_b = forward_backward_matrices(j, l)
        assert np.allclose(a_f, [[1.0], [0.0]])
        assert np.allclose(a_b, [[1.0, 0.0]])

    def test_row_containment_gives_identity(self):
        rng = np.random.default_rng(8)
        l = rng.normal(size=(6, 30))
        mix = rng.normal(size=(3, 6))
        j = mix @ l  # rows of J inside row(L)
        a_f, a_b = forward_backward_matrices(j, l)
        assert np.allclose(a_f @ a_b, np.eye(3), atol=1e-9)

    def test_identical_columns_rank_error(self):
        col_j = np.ones((2, 1))
        col_l = np.ones((3, 1))
        with pytest.raises(RankDeficiencyError):
            forward_backward_matrices(np.tile(col_j, 8), np.tile(col_l, 8))

    def test_forward_equals_fitted_top_block(self):
        rng = np.random.default_rng(9)
        basis = random_basis(rng)
        data = random_dataset(rng, basis.n, basis.m, 50)
        a_f, _ = forward_backward(basis, data)
        model = fit_top_block(basis, data)
        assert np.allclose(a_f, model.a_top, atol=1e-12)

    def test_column_mismatch(self):
        with pytest.raises(ValidationError):
            forward_backward_matrices(np.zeros((2, 5)), np.zeros((3, 6)))
