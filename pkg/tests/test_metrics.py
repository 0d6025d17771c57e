import json
import math

import numpy as np
import pytest
from scipy import integrate, stats

from nevae.data import Dataset
from nevae.metrics import (
    EvalConfig,
    active_units,
    activity,
    append_csv,
    evaluate,
    mi_from_params,
    mutual_information,
    reencode_error,
    write_activity_csv,
)
from nevae.models import init_vae


def collapsed_model(pixels=16, n_z=4):
    return init_vae(pixels, n_z=n_z, hidden=(8,), seed=0, zero_head=True)


def identity_model(n_z=3, sigma=1e-6):
    """Encoder mu = x, log_var = 2 log sigma; decoder mean = z."""
    m = init_vae(n_z, n_z=n_z, hidden=(n_z,), activation="identity", seed=0)
    m.output = "identity"
    eye = np.eye(n_z)
    m.encoder.weights[0].data[...] = eye
    m.encoder.weights[1].data[...] = np.hstack([eye, np.zeros((n_z, n_z))])
    m.encoder.biases[1].data[n_z:] = 2 * math.log(sigma)
    m.decoder.weights[0].data[...] = eye
    m.decoder.weights[1].data[...] = eye
    return m


def two_point_mi_by_quadrature() -> float:
    """I_q for q(z|x1)=N(-10,1), q(z|x2)=N(10,1), uniform over the two inputs."""
    def integrand(z):
        q = 0.5 * (stats.norm.pdf(z, -10) + stats.norm.pdf(z, 10))
        return q * (math.log(q) - stats.norm.logpdf(z)) if q > 0 else 0.0
    agg, _ = integrate.quad(integrand, -30, 30, points=[-10, 0, 10], limit=400)
    return 50.0 - agg  # each component has KL = 10^2 / 2


class TestActivity:
    def test_constant_dim(self):
        np.testing.assert_array_equal(activity([[1.0, 0.0], [1.0, 2.0]]), [0.0, 2.0])

    def test_unbiased(self):
        assert activity([[0.0], [2.0]])[0] == 2.0

    def test_needs_two_rows(self):
        with pytest.raises(ValueError):
            activity([[1.0, 2.0]])

    def test_permutation_invariant(self):
        rng = np.random.default_rng(0)
        mus = rng.standard_normal((50, 5))
        np.testing.assert_allclose(activity(mus[rng.permutation(50)]), activity(mus), rtol=1e-13)

    def test_threshold_is_strict(self):
        assert active_units([0.01, 0.0100001, 0.5, 0.0]) == 2

    def test_constant_dim_does_not_change_count(self):
        mus = np.random.default_rng(1).standard_normal((30, 3)) * [1.0, 0.01, 0.5]
        base = active_units(activity(mus))
        assert active_units(activity(np.hstack([mus, np.full((30, 1), 3.0)]))) == base


class TestMutualInformation:
    def test_collapsed(self):
        ds = Dataset(np.random.default_rng(0).random((300, 16)))
        assert abs(mutual_information(collapsed_model(), ds, rng=np.random.default_rng(0))) < 0.05

    def test_two_point_oracle(self):
        oracle = two_point_mi_by_quadrature()
        assert abs(oracle - math.log(2)) < 1e-9
        mi = mi_from_params(np.array([[-10.0], [10.0]]), np.zeros((2, 1)), 200,
                            np.random.default_rng(0))
        assert abs(mi - oracle) < 0.01

    def test_bounded_by_kl(self):
        rng = np.random.default_rng(3)
        for _ in range(10):
            mu = rng.standard_normal((200, 3)) * rng.uniform(0, 3, 3)
            lv = rng.uniform(-3, 1, (200, 3))
            kl = (0.5 * (mu**2 + np.exp(lv) - 1 - lv)).sum(1).mean()
            assert mi_from_params(mu, lv, 1, rng) <= kl + 0.05

    def test_seeded(self):
        m = init_vae(16, n_z=3, hidden=(8,), seed=1)
        ds = Dataset(np.random.default_rng(0).random((100, 16)))
        a = mutual_information(m, ds, rng=np.random.default_rng(5))
        assert a == mutual_information(m, ds, rng=np.random.default_rng(5))

    def test_errors(self):
        with pytest.raises(ValueError):
            mi_from_params(np.zeros((0, 2)), np.zeros((0, 2)), 1, np.random.default_rng(0))
        with pytest.raises(ValueError):
            mi_from_params(np.zeros((3, 2)), np.zeros((3, 2)), 0, np.random.default_rng(0))


class TestReencodeError:
    def test_collapsed_is_two_nz(self):
        n_z = 4
        ds = Dataset(np.random.default_rng(0).random((10_000, 16)))
        se = reencode_error(collapsed_model(n_z=n_z), ds, np.random.default_rng(1))
        assert abs(se - 2 * n_z) < 0.05 * 2 * n_z

    def test_identity_fixed_point(self):
        ds = Dataset(np.random.default_rng(0).random((50, 3)))
        assert reencode_error(identity_model(), ds) < 1e-10

    def test_nonnegative(self):
        ds = Dataset(np.random.default_rng(0).random((20, 16)))
        assert reencode_error(init_vae(16, 3, (8,), seed=2), ds) >= 0


class TestEvaluate:
    @pytest.fixture
    def ds(self):
        return Dataset(np.random.default_rng(0).random((120, 16)))

    def test_zero_init_kl_exactly_zero(self, ds):
        rep = evaluate(collapsed_model(), ds)
        assert rep.kl == 0.0 and rep.au_count == 0

    def test_deterministic(self, ds):
        m = init_vae(16, 3, (8,), seed=4)
        cfg = EvalConfig(batch_size=50)
        assert evaluate(m, ds, cfg).to_json() == evaluate(m, ds, cfg).to_json()

    def test_neg_elbo_collapsed_is_bernoulli_half(self, ds):
        # logits are 0 everywhere -> each pixel costs log 2
        assert evaluate(collapsed_model(), ds).neg_elbo == pytest.approx(16 * math.log(2), abs=1e-12)

    def test_outputs(self, ds, tmp_path):
        rep = evaluate(init_vae(16, 3, (8,), seed=4), ds)
        assert json.loads(rep.to_json(tmp_path / "r.json"))["au_count"] == rep.au_count
        append_csv(tmp_path / "m.csv", rep, "run", 3)
        append_csv(tmp_path / "m.csv", rep, "run", 4)
        lines = (tmp_path / "m.csv").read_text().splitlines()
        assert lines[0] == "run_id,epoch,neg_elbo,kl,mi,au,mean_reencode_se"
        assert len(lines) == 3 and lines[2].startswith("run,4,")
        write_activity_csv(tmp_path / "a.csv", rep, "run", 4)
        assert len((tmp_path / "a.csv").read_text().splitlines()) == 1 + 3
