import numpy as np
import pytest

from ddolab.data import (
    Dataset,
    GMM2D,
    default_gmm2d,
    default_markov_chain,
    make_categorical_dataset,
    make_gmm2d,
    make_markov_dataset,
    make_two_moons,
    regenerate,
)
from ddolab.metrics import GridSpec, cell_masses, tv


def _standard_normal():
    return make_gmm2d(1, [1.0], [[0.0, 0.0]], [np.eye(2)], n_samples=100_000, seed=0)


def test_single_standard_normal_sample_mean():
    ds, _ = _standard_normal()
    assert np.all(np.abs(ds.items.mean(axis=0)) < 0.02)


def test_default_mixture_integrates_to_one_on_grid():
    gmm = default_gmm2d()
    grid = GridSpec.around(gmm.mean(), gmm.std())
    assert abs(cell_masses(gmm.log_density, grid).sum() - 1.0) < 0.02
    # midpoint rule agrees with quadrature at this resolution
    cx, cy = grid.centers()
    X, Y = np.meshgrid(cx, cy, indexing="ij")
    dens = np.exp(gmm.log_density(np.stack([X.ravel(), Y.ravel()], axis=1)))
    assert abs(dens.sum() * grid.cell_area - 1.0) < 0.02


def test_default_mixture_shape():
    gmm = default_gmm2d()
    np.testing.assert_allclose(gmm.weights, [0.7, 0.2, 0.1])
    d = np.linalg.norm(gmm.means[:, None] - gmm.means[None], axis=-1)
    np.testing.assert_allclose(d[np.triu_indices(3, 1)], 1.0, atol=1e-12)


def test_log_density_matches_closed_form():
    _, gmm = _standard_normal()
    x = np.array([[0.0, 0.0], [1.0, -2.0]])
    np.testing.assert_allclose(gmm.log_density(x), -np.log(2 * np.pi) - 0.5 * np.sum(x ** 2, axis=1), atol=1e-14)


def test_mixture_sample_moments():
    gmm = default_gmm2d()
    x, lab = gmm.sample(np.random.default_rng(0), 200_000)
    np.testing.assert_allclose(x.mean(axis=0), gmm.mean(), atol=0.01)
    np.testing.assert_allclose(np.bincount(lab) / len(lab), gmm.weights, atol=0.01)
    fixed, same = gmm.sample(np.random.default_rng(0), 100, labels=np.full(100, 2))
    assert np.all(same == 2) and np.linalg.norm(fixed.mean(0) - gmm.means[2]) < 0.1


def test_gmm_is_deterministic_by_seed():
    a, _ = make_gmm2d(n_samples=1000, seed=3)
    b, _ = make_gmm2d(n_samples=1000, seed=3)
    c, _ = make_gmm2d(n_samples=1000, seed=4)
    assert a.items.tobytes() == b.items.tobytes() and a.labels.tobytes() == b.labels.tobytes()
    assert a.items.tobytes() != c.items.tobytes()


@pytest.mark.parametrize("kw", [
    dict(weights=[0.5, 0.6], means=[[0, 0], [1, 1]], covs=[np.eye(2)] * 2),
    dict(weights=[1.0], means=[[0, 0]], covs=[[[1.0, 2.0], [2.0, 1.0]]]),
    dict(weights=[1.0], means=[[0, 0]], covs=[[[1.0, 0.5], [0.0, 1.0]]]),
])
def test_invalid_mixtures_rejected(kw):
    with pytest.raises(ValueError):
        GMM2D(np.asarray(kw["weights"]), np.asarray(kw["means"], float), np.asarray(kw["covs"], float))


def test_two_moons():
    ds = make_two_moons(5000, 0.0, seed=1)
    top = ds.items[ds.labels == 0]
    np.testing.assert_allclose(np.linalg.norm(top, axis=1), 1.0, atol=1e-12)
    assert regenerate(ds.provenance).items.tobytes() == ds.items.tobytes()
    with pytest.raises(ValueError):
        make_two_moons(10, -1.0)


# -- Markov chains ---------------------------------------------------------------------


def test_identity_chain_gives_constant_sequences():
    ds, chain = make_markov_dataset(3, 5, np.eye(3), n_samples=1000, seed=0)
    assert np.all(ds.items == ds.items[:, :1])
    assert set(np.unique(ds.items[:, 0])) == {0, 1, 2}


def test_pmf_sums_to_one():
    chain = default_markov_chain(3, 4)
    assert len(chain.exact_pmf()) == 81
    assert chain.exact_pmf().sum() == pytest.approx(1.0, abs=1e-12)


def test_empirical_pmf_matches_exact():
    ds, chain = make_markov_dataset(3, 4, n_samples=100_000, seed=0)
    codes = ds.items @ (3 ** np.arange(3, -1, -1))
    emp = np.bincount(codes, minlength=81) / len(codes)
    assert tv(emp, chain.exact_pmf()) < 0.02


def test_empirical_tv_shrinks_with_more_samples():
    chain = default_markov_chain(3, 4)
    exact = chain.exact_pmf()
    tvs = []
    for n in (1000, 10_000, 100_000):
        x = chain.sample(np.random.default_rng(0), n)
        tvs.append(tv(np.bincount(x @ (3 ** np.arange(3, -1, -1)), minlength=81) / n, exact))
    assert tvs[0] > tvs[1] > tvs[2]


@pytest.mark.parametrize("T", [np.array([[0.5, 0.6], [0.5, 0.5]]), np.array([[1.5, -0.5], [0.5, 0.5]]),
                               np.ones((2, 3)) / 3])
def test_non_stochastic_transition_rejected(T):
    with pytest.raises(ValueError):
        make_markov_dataset(2, 3, T)


def test_exact_pmf_size_limit():
    with pytest.raises(ValueError):
        default_markov_chain(10, 5).exact_pmf()


# -- categorical and persistence ----------------------------------------------------------


def test_categorical_dataset_frequencies():
    ds, dist = make_categorical_dataset([1, 2, 7], 100_000, seed=0)
    np.testing.assert_allclose(dist.probs, [0.1, 0.2, 0.7])
    assert tv(np.bincount(ds.items, minlength=3) / len(ds), dist) < 0.01


@pytest.mark.parametrize("make", [
    lambda: make_gmm2d(n_samples=500, seed=2)[0],
    lambda: make_markov_dataset(3, 4, n_samples=500, seed=2)[0],
    lambda: make_categorical_dataset([0.2, 0.8], 500, seed=2)[0],
])
def test_provenance_regenerates_and_container_round_trips(tmp_path, make):
    ds = make()
    again = regenerate(ds.provenance)
    assert again.items.tobytes() == ds.items.tobytes()
    path = ds.save(tmp_path / "d.ddo")
    assert path.read_bytes()[:4] == b"DDO1"
    loaded = Dataset.load(path)
    assert loaded.items.tobytes() == ds.items.tobytes() and loaded.provenance == ds.provenance
    assert (loaded.labels is None) == (ds.labels is None)


def test_unknown_generator_and_wrong_container(tmp_path):
    with pytest.raises(ValueError):
        regenerate({"generator": "nope", "params": {}, "n_samples": 1, "seed": 0})
    from ddolab.models import CategoricalModel, save_model

    path = save_model(tmp_path / "m.ddo", CategoricalModel(np.zeros(2)))
    with pytest.raises(ValueError):
        Dataset.load(path)
