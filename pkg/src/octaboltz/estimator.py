"""scikit-learn style wrapper: ``fit`` builds the collision operator,
``transform`` relaxes batches of cell-density vectors."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from . import coefficients as co
from . import kernel as _kernel
from .coefficients import BuildSpec
from .diagnostics import reconstruct_moments
from .kernel import SphereQuadrature
from .lattice import build_lattice
from .quadrature import CellQuadrature
from .solver import initial_state, initialize_from_maxwellian, step_homogeneous


class BoltzmannRelaxation(TransformerMixin, BaseEstimator):
    """Spatially homogeneous relaxation on a truncated-octahedron velocity lattice.

    Parameters
    ----------
    ell, active_radius : float
        Cell size and radius of the active ball of cell centres.
    kernel : {"hard_sphere", "vhs_power"}
        Scattering model; ``b`` and ``exponent`` parametrise it.
    outer_order, loss_order, n_s, n_theta : int
        Cell-pair and sphere quadrature resolution of the coefficient build.
    dt, n_steps, integrator
        Time stepping used by :meth:`transform`.
    cache_path : str or None
        If set, coefficients are loaded from (or saved to) this file.
    """

    def __init__(self, ell=1.0, active_radius=3.0, kernel="hard_sphere", b=1.0, exponent=0.0,
                 outer_order=1, loss_order=2, n_s=48, n_theta=48, dt=0.02, n_steps=100,
                 integrator="rk4", threads=1, cache_path=None):
        self.ell = ell
        self.active_radius = active_radius
        self.kernel = kernel
        self.b = b
        self.exponent = exponent
        self.outer_order = outer_order
        self.loss_order = loss_order
        self.n_s = n_s
        self.n_theta = n_theta
        self.dt = dt
        self.n_steps = n_steps
        self.integrator = integrator
        self.threads = threads
        self.cache_path = cache_path

    def _kernel_model(self):
        if self.kernel == "hard_sphere":
            return _kernel.hard_sphere(self.b)
        if self.kernel == "vhs_power":
            return _kernel.vhs_power(self.b, self.exponent)
        raise ValueError(f"unknown kernel {self.kernel!r}")

    def fit(self, X=None, y=None):
        """Build (or load) the coefficients; ``X`` is only used to check its width."""
        lattice = build_lattice(self.ell, self.active_radius)
        kernel = self._kernel_model()
        path = Path(self.cache_path) if self.cache_path else None
        if path is not None and path.exists():
            coeffs = co.load_coefficients(path, lattice, kernel)
        else:
            spec = BuildSpec(outer=CellQuadrature("tet", self.outer_order),
                             loss_outer=CellQuadrature("tet", self.loss_order),
                             sphere=SphereQuadrature(self.n_s, self.n_theta),
                             threads=self.threads)
            coeffs = co.build_coefficients(lattice, kernel, spec)
            if path is not None:
                co.save_coefficients(coeffs, path)
        self.lattice_ = lattice
        self.coefficients_ = coeffs
        self.n_features_in_ = lattice.n_cells
        if X is not None:
            self._validate(X)
        return self

    def _validate(self, X):
        X = check_array(X, dtype=np.float64, ensure_all_finite=True)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(
                f"X has {X.shape[1]} columns, the lattice has {self.n_features_in_} cells")
        return X

    def transform(self, X):
        """Evolve each row of densities by ``n_steps`` steps of size ``dt``."""
        check_is_fitted(self, "coefficients_")
        X = self._validate(X)
        out = np.empty_like(X)
        for k, row in enumerate(X):
            state = initial_state(self.coefficients_, row)
            for _ in range(int(self.n_steps)):
                state = step_homogeneous(self.coefficients_, state, self.dt, self.integrator)
            out[k] = state.N
        return out

    def maxwellian(self, n0, u0, T0):
        """Cell densities of a Maxwellian, one row ready for :meth:`transform`."""
        check_is_fitted(self, "lattice_")
        return initialize_from_maxwellian(self.lattice_, n0, u0, T0)[None, :]

    def moments(self, X):
        """Mass, momentum (3) and energy of each row, as an ``(n, 5)`` array."""
        check_is_fitted(self, "coefficients_")
        X = self._validate(X)
        p, E = reconstruct_moments(self.coefficients_, X)
        return np.column_stack([X.sum(axis=1), p, E])
