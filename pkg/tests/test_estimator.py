import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from octaboltz import BoltzmannRelaxation
from octaboltz.solver import collision_rhs

SMALL = dict(ell=1.0, active_radius=1.5, n_s=16, n_theta=16, dt=0.05, n_steps=300)


@pytest.fixture(scope="module")
def fitted(tmp_path_factory):
    path = tmp_path_factory.mktemp("est") / "c.octb"
    return BoltzmannRelaxation(cache_path=str(path), **SMALL).fit()


def test_params_round_trip():
    est = BoltzmannRelaxation(**SMALL)
    params = est.get_params()
    assert params["active_radius"] == 1.5 and params["integrator"] == "rk4"
    other = clone(est).set_params(n_steps=7)
    assert other.n_steps == 7 and est.n_steps == 300


def test_not_fitted():
    with pytest.raises(NotFittedError):
        BoltzmannRelaxation(**SMALL).transform(np.ones((1, 27)))


@pytest.mark.filterwarnings("ignore:active radius")
def test_transform_conserves_and_relaxes(fitted):
    X = np.vstack([fitted.maxwellian(1.0, (0.5, 0, 0), 0.3),
                   fitted.maxwellian(0.5, (0, -0.4, 0), 0.2)])
    Y = fitted.transform(X)
    assert Y.shape == X.shape
    np.testing.assert_allclose(Y.sum(1), X.sum(1), rtol=1e-12)
    # only mass is a discrete invariant; the collision term itself decays
    rhs0 = np.abs(collision_rhs(fitted.coefficients_, X)).sum(1)
    rhs1 = np.abs(collision_rhs(fitted.coefficients_, Y)).sum(1)
    assert np.all(rhs1 < 0.1 * rhs0)
    assert fitted.fit_transform(X).shape == X.shape


def test_cache_reuse(fitted):
    again = clone(fitted).fit()
    assert again.coefficients_.meta["build_hash"] == fitted.coefficients_.meta["build_hash"]


def test_input_validation(fitted):
    with pytest.raises(ValueError, match="columns"):
        fitted.transform(np.ones((2, 5)))
    with pytest.raises(ValueError):
        fitted.transform(np.full((1, 27), np.nan))
    with pytest.raises(ValueError):
        BoltzmannRelaxation(kernel="soft", **SMALL).fit()
