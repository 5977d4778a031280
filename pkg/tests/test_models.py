import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ddolab import grad as G
from ddolab.data import default_gmm2d
from ddolab.metrics import tv
from ddolab.models import (
    ARModel,
    CategoricalDistribution,
    CategoricalModel,
    CheckpointError,
    DiffusionModel,
    NoiseSchedule,
    ar_log_prob,
    ar_sample,
    categorical_log_prob,
    denoise,
    diffusion_sample,
    draw_noise,
    edm_mle_loss,
    edm_weighted_denoiser_loss,
    f_target,
    load_model,
    read_container,
    save_model,
)
from ddolab.train import CategoricalTask, pretrain

# -- categorical -----------------------------------------------------------------------------


def test_categorical_distribution_validates():
    with pytest.raises(ValueError):
        CategoricalDistribution(np.array([0.5, 0.6]))
    with pytest.raises(ValueError):
        CategoricalDistribution(np.array([1.5, -0.5]))
    CategoricalDistribution(np.array([0.3, 0.7]))


def test_uniform_logits_log_prob():
    m = CategoricalModel(np.zeros(4))
    for x in range(4):
        assert float(categorical_log_prob(m, x).data) == pytest.approx(math.log(0.25), abs=1e-15)


def test_normalized_logits_log_prob():
    m = CategoricalModel(np.log([0.7, 0.3]))
    assert float(categorical_log_prob(m, 0).data) == pytest.approx(math.log(0.7), abs=1e-15)


@given(st.lists(st.floats(-10, 10), min_size=1, max_size=20))
def test_categorical_probs_sum_to_one(logits):
    m = CategoricalModel(np.array(logits))
    total = sum(math.exp(float(categorical_log_prob(m, x).data)) for x in range(len(logits)))
    assert total == pytest.approx(1.0, abs=1e-12)


def test_categorical_index_out_of_range():
    m = CategoricalModel(np.zeros(3))
    with pytest.raises(IndexError):
        categorical_log_prob(m, 3)
    with pytest.raises(IndexError):
        categorical_log_prob(m, -1)


def test_random_distribution_respects_floor():
    rng = np.random.default_rng(0)
    for K in (2, 8, 16):
        p = CategoricalDistribution.random(rng, K, 0.01).probs
        assert p.min() >= 0.01 - 1e-15 and abs(p.sum() - 1) < 1e-12


# -- autoregressive -----------------------------------------------------------------------------


def test_zero_initialized_ar_is_uniform():
    m = ARModel(3, 4, init="zeros")
    x = np.array([[0, 1, 2, 0], [2, 2, 2, 2]])
    np.testing.assert_allclose(m.log_prob(x).data, 4 * math.log(1 / 3), atol=1e-14)


def test_length_one_ar_is_a_categorical():
    m = ARModel(5, 1, hidden=4, seed=3)
    logits = m.step_logits(np.zeros((1, 1), dtype=np.int64), 0)[0]
    cat = CategoricalModel(logits)
    for x in range(5):
        assert float(ar_log_prob(m, [x]).data[0]) == pytest.approx(float(categorical_log_prob(cat, x).data), abs=1e-13)


def test_ar_pmf_sums_to_one_by_enumeration():
    m = ARModel(3, 3, hidden=6, seed=1)
    seqs = np.array(list(itertools.product(range(3), repeat=3)))
    assert len(seqs) == 27
    assert np.exp(m.log_prob(seqs).data).sum() == pytest.approx(1.0, abs=1e-12)


def test_ar_log_prob_is_sum_of_conditionals():
    m = ARModel(3, 4, hidden=5, seed=2)
    x = np.array([[2, 0, 1, 1]])
    total = 0.0
    for n in range(4):
        lp = G.log_softmax(m.step_logits(x, n)).data[0]
        total += lp[x[0, n]]
    assert float(m.log_prob(x).data[0]) == pytest.approx(total, abs=1e-13)


def test_ar_conditional_model_pmf_per_label():
    m = ARModel(2, 3, class_count=3, hidden=4, seed=0)
    for label in (None, 0, 1, 2):
        assert m.exact_pmf(label).sum() == pytest.approx(1.0, abs=1e-12)


def test_ar_rejects_bad_tokens_and_labels():
    m = ARModel(3, 2, class_count=2, hidden=4)
    with pytest.raises(ValueError):
        m.log_prob([[0, 3]])
    with pytest.raises(ValueError):
        m.log_prob([[0, 1, 2]])
    with pytest.raises(ValueError):
        m.log_prob([[0, 1]], [2])
    with pytest.raises(ValueError):
        ARModel(3, 2).log_prob([[0, 1]], [0])


def test_uniform_ar_sampling_frequency():
    m = ARModel(2, 1, init="zeros")
    x = ar_sample(m, None, np.random.default_rng(0), 100_000)
    assert abs((x[:, 0] == 0).mean() - 0.5) < 0.01


def test_deterministic_ar_samples_argmax():
    m = ARModel(3, 3, hidden=4, init="zeros")
    m.params["b_out"] = np.array([0.0, 50.0, 0.0])
    x = m.sample(np.random.default_rng(0), 100)
    assert np.all(x == 1)


def test_ar_sampling_matches_exact_pmf():
    m = ARModel(3, 2, hidden=4, seed=5)
    x = m.sample(np.random.default_rng(1), 100_000)
    emp = np.bincount(x[:, 0] * 3 + x[:, 1], minlength=9) / len(x)
    assert tv(emp, m.exact_pmf()) < 0.02


def test_ar_guidance_zero_is_conditional():
    m = ARModel(3, 3, class_count=2, hidden=4, seed=0)
    a = m.sample(np.random.default_rng(0), 50, np.zeros(50, dtype=int))
    b = m.sample(np.random.default_rng(0), 50, np.zeros(50, dtype=int), guidance=0.0)
    np.testing.assert_array_equal(a, b)


# -- diffusion ------------------------------------------------------------------------------------

S = NoiseSchedule()


def test_c_skip_half_at_sigma_data():
    assert float(S.c_skip(S.sigma_data)) == pytest.approx(0.5, abs=1e-15)


@given(st.floats(1e-3, 1e3))
def test_preconditioning_identities(t):
    sd = S.sigma_data
    assert float(S.c_in(t) ** 2 * (sd ** 2 + t ** 2)) == pytest.approx(1.0, rel=1e-12)
    assert float(S.c_out(t) ** 2) == pytest.approx(float(t ** 2 * sd ** 2 * S.c_in(t) ** 2), rel=1e-12)
    assert float(S.c_noise(t)) == pytest.approx(0.25 * math.log(t), rel=1e-12, abs=1e-15)
    assert float(S.c_skip(t) + S.c_out(t) ** 2 / sd ** 2) == pytest.approx(1.0, rel=1e-12)


def test_schedule_rejects_nonpositive_time():
    for t in (0.0, -1.0):
        with pytest.raises(ValueError):
            S.c_skip(t)
    m = DiffusionModel(hidden=4, depth=1)
    with pytest.raises(ValueError):
        denoise(m, np.zeros((1, 2)), 0.0)


def _zero_F(m):
    m.params["W_out"] = np.zeros_like(m.params["W_out"])
    m.params["b_out"] = np.zeros_like(m.params["b_out"])
    return m


def test_zero_network_denoiser_is_skip():
    m = _zero_F(DiffusionModel(hidden=8, depth=2, seed=0))
    x = np.random.default_rng(0).normal(size=(5, 2))
    for t in (0.01, 0.5, 10.0):
        np.testing.assert_allclose(denoise(m, x, t).data, S.c_skip(t) * x, atol=1e-15)


def test_time_sampler_moments():
    logt = np.log(S.sample_t(np.random.default_rng(0), 1_000_000))
    assert abs(logt.mean() - S.P_mean) < 0.01 * abs(S.P_mean)
    assert abs(logt.std() - S.P_std) < 0.01 * S.P_std


def test_sampling_grid_endpoints():
    grid = NoiseSchedule(sigma_data=0.5).sampling_grid(18)
    assert len(grid) == 18 and grid[0] == pytest.approx(80.0) and grid[-1] == pytest.approx(0.002)
    assert np.all(np.diff(grid) < 0)
    scaled = NoiseSchedule(sigma_data=0.25).sampling_grid(18)
    np.testing.assert_allclose(scaled, grid / 2, rtol=1e-12)


def test_mle_loss_zero_for_perfect_network():
    class Perfect(DiffusionModel):
        def F(self, x_in, c_noise, labels=None, P=None):
            t = np.exp(4 * np.asarray(c_noise))
            x_t = np.asarray(x_in) / self.schedule.c_in(t)[:, None]
            return G.Tensor(f_target(self.schedule, np.zeros_like(x_t), x_t, t))

    m = Perfect(hidden=4, depth=1)
    loss = edm_mle_loss(m, np.zeros((64, 2)), None, np.random.default_rng(0))
    assert float(loss.data) < 1e-20


def test_mle_loss_zero_network_is_target_energy():
    m = _zero_F(DiffusionModel(hidden=4, depth=1))
    rng = np.random.default_rng(0)
    x0 = rng.normal(size=(32, 2))
    t, eps = draw_noise(m.schedule, rng, 32, 2)
    loss = float(edm_mle_loss(m, x0, None, rng, noise=(t, eps)).data)
    F_hat = f_target(m.schedule, x0, x0 + t[:, None] * eps, t)
    assert loss == pytest.approx(np.mean(np.sum(F_hat ** 2, axis=1)), rel=1e-13)
    assert loss > 0


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_f_form_equals_weighted_denoiser_form(seed):
    rng = np.random.default_rng(seed)
    m = DiffusionModel(hidden=8, depth=2, seed=seed)
    x0 = rng.normal(size=(16, 2))
    t, eps = draw_noise(m.schedule, rng, 16, 2)
    a = float(edm_mle_loss(m, x0, None, rng, noise=(t, eps)).data)
    b = float(edm_weighted_denoiser_loss(m, x0, None, t, eps).data)
    assert abs(a - b) <= 1e-10 * max(1.0, abs(a))


def test_zero_denoiser_contracts_samples():
    class Origin(DiffusionModel):
        def denoise(self, x_t, t, labels=None, P=None):
            return G.Tensor(np.zeros_like(np.atleast_2d(x_t)))

    m = Origin(hidden=4, depth=1)
    x_init = np.random.default_rng(7).standard_normal((10, 2)) * m.schedule.sampling_grid(18)[0]
    out = diffusion_sample(m, None, 18, np.random.default_rng(7), n=10)
    assert np.all(np.linalg.norm(out, axis=1) < np.linalg.norm(x_init, axis=1))


def test_sampler_needs_two_steps():
    with pytest.raises(ValueError):
        diffusion_sample(DiffusionModel(hidden=4, depth=1), None, 1, np.random.default_rng(0))


def test_sampling_is_deterministic_by_seed():
    m = DiffusionModel(hidden=8, depth=2, seed=1)
    a = m.sample(np.random.default_rng(3), 100)
    b = m.sample(np.random.default_rng(3), 100)
    assert a.tobytes() == b.tobytes()


@pytest.fixture(scope="module")
def trained_diffusion(tmp_path_factory):
    from ddolab.config import default_config
    from ddolab.experiment import Experiment

    out = tmp_path_factory.mktemp("toy")
    Experiment(default_config("diffusion")).pretrain(out)
    return load_model(out / "pretrain" / "ckpt.ddo")[0]


def test_step_doubling_self_convergence(trained_diffusion):
    a = trained_diffusion.sample(np.random.default_rng(0), 2000, steps=18)
    b = trained_diffusion.sample(np.random.default_rng(0), 2000, steps=36)
    assert np.sqrt(np.mean((a - b) ** 2)) < 1e-2


def test_conditional_denoiser_uses_null_label():
    m = DiffusionModel(class_count=3, hidden=8, depth=2, seed=0)
    x = np.ones((2, 2))
    np.testing.assert_array_equal(m.denoise(x, 0.5, None).data, m.denoise(x, 0.5, [-1, -1]).data)
    assert not np.allclose(m.denoise(x, 0.5, [0, 0]).data, m.denoise(x, 0.5, [1, 1]).data)
    with pytest.raises(ValueError):
        m.denoise(x, 0.5, [3, 0])


# -- training --------------------------------------------------------------------------------


def test_mle_on_categorical_decreases_cross_entropy_every_step():
    p = CategoricalDistribution.random(np.random.default_rng(0), 8, 0.01)
    m = CategoricalModel(np.zeros(8))
    losses = [l for _, l in pretrain(m, CategoricalTask(p_data=p), 100, 5e-2, 1, seed=0)]
    assert all(b < a for a, b in zip(losses, losses[1:]))


def test_mle_on_ar_decreases_cross_entropy():
    from ddolab.data import make_markov_dataset
    from ddolab.train import ARTask

    ds, chain = make_markov_dataset(3, 4, n_samples=5000, seed=0)
    m = ARModel(3, 4, hidden=8, seed=0)
    task = ARTask(chain=chain, dataset=ds)
    before = task.metric(m)
    pretrain(m, task, 100, 1e-2, 256, seed=0)
    assert task.metric(m) < before


# -- checkpoints ------------------------------------------------------------------------------


@pytest.mark.parametrize("model", [
    CategoricalModel(np.random.default_rng(0).normal(size=6)),
    ARModel(3, 4, class_count=2, hidden=5, seed=1),
    DiffusionModel(class_count=3, hidden=8, depth=2, schedule=NoiseSchedule(sigma_data=0.3), seed=2),
])
def test_checkpoint_round_trip_is_bit_exact(tmp_path, model):
    path = save_model(tmp_path / "m.ddo", model, seed=11, round_index=2)
    loaded, header = load_model(path)
    assert type(loaded) is type(model) and loaded.config() == model.config()
    assert list(loaded.params) == list(model.params)
    for k in model.params:
        assert loaded.params[k].tobytes() == model.params[k].tobytes()
    assert header["seed"] == 11 and header["round"] == 2
    save_model(tmp_path / "again.ddo", loaded, seed=11, round_index=2)
    assert (tmp_path / "m.ddo").read_bytes() == (tmp_path / "again.ddo").read_bytes()


def test_checkpoint_layout(tmp_path):
    m = CategoricalModel(np.array([1.0, 2.0, 3.0]))
    blob = save_model(tmp_path / "c.ddo", m).read_bytes()
    assert blob[:4] == b"DDO1"
    n = int.from_bytes(blob[4:12], "little")
    assert blob[12 + n:] == np.array([1.0, 2.0, 3.0], dtype="<f8").tobytes()


def test_corrupt_checkpoints_rejected(tmp_path):
    path = save_model(tmp_path / "c.ddo", CategoricalModel(np.zeros(3)))
    blob = path.read_bytes()
    (tmp_path / "bad_magic.ddo").write_bytes(b"XXXX" + blob[4:])
    (tmp_path / "trailing.ddo").write_bytes(blob + b"\0")
    for name in ("bad_magic.ddo", "trailing.ddo"):
        with pytest.raises(CheckpointError):
            read_container(tmp_path / name)


def test_diffusion_loss_on_default_mixture_is_finite():
    gmm = default_gmm2d()
    x, _ = gmm.sample(np.random.default_rng(0), 64)
    m = DiffusionModel(hidden=8, depth=2)
    assert np.isfinite(float(edm_mle_loss(m, x, None, np.random.default_rng(0)).data))
