"""Training-sample nuisance estimation.

Ships series least squares with cross-validated size, a weighted-histogram
density estimate for the density-based comparison path, and the zero
estimator (which deliberately ignores the admissible range of the inverse
propensity and still leaves the full pipeline consistent).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from hoif.basis import Basis, BasisSpec, build_basis
from hoif.data import Dataset, ValidationError
from hoif.functionals import FunctionalSpec

DEFAULT_SIGMA_FLOOR = 0.05


@dataclass(frozen=True)
class NuisanceSet:
    b_hat: Callable[[np.ndarray], np.ndarray]
    p_hat: Callable[[np.ndarray], np.ndarray]
    g_hat: Callable[[np.ndarray], np.ndarray] | None = None
    provenance: str = ""


def _constant(value: float):
    def fn(x):
        x = np.asarray(x)
        n = x.shape[0] if x.ndim > 1 else len(np.atleast_1d(x))
        return np.full(n, value)

    return fn


def zero_nuisance() -> NuisanceSet:
    """b_hat = p_hat = 0; the range clipping of p_hat is deliberately
    bypassed, the higher-order terms alone then estimate the target."""
    return NuisanceSet(b_hat=_constant(0.0), p_hat=_constant(0.0), provenance="zero")


def _sub_basis(basis: Basis, k: int) -> Basis:
    d = basis.spec.dimension
    q = round(k ** (1.0 / d))
    if q**d != k:
        raise ValueError(f"k={k} is not a realizable tensor size for d={d}")
    return build_basis(BasisSpec(basis.spec.family, d, q, order=min(basis.spec.order, max(q - 1, 0))))


def _series_fit(x: np.ndarray, response: np.ndarray, basis: Basis,
                k_grid: list[int], folds: int, seed: int):
    """Least-squares series fit with fold-averaged squared-error selection.

    Returns (predict, k_chosen).  Sizes in ``k_grid`` that exceed half the
    sample or hit a singular design are skipped; an error is raised only
    when every candidate fails.
    """
    n = x.shape[0]
    if n == 0:
        raise ValidationError("empty fitting sample")
    usable = [k for k in k_grid if k <= max(n // 2, 1)]
    if not usable:
        raise ValidationError("no usable series size in k_grid")
    rng = np.random.default_rng(seed)
    order = rng.permutation(n)
    fold_id = np.arange(n) % folds
    scores = {}
    sub_bases = {}
    for k in usable:
        try:
            sub = _sub_basis(basis, k)
        except ValueError:
            continue
        sub_bases[k] = sub
        z = sub.evaluate_many(x)
        if folds >= 2 and n >= 2 * folds:
            err = 0.0
            ok = True
            for f in range(folds):
                test = order[fold_id == f]
                train = order[fold_id != f]
                coef, _, rank, _ = np.linalg.lstsq(z[train], response[train], rcond=None)
                if rank < k:
                    ok = False
                    break
                resid = response[test] - z[test] @ coef
                err += float(resid @ resid)
            if not ok:
                continue
            scores[k] = err / n
        else:
            coef, _, _, _ = np.linalg.lstsq(z, response, rcond=None)
            resid = response - z @ coef
            scores[k] = float(resid @ resid) / n
    if not scores:
        raise ValidationError("all series sizes produced singular designs")
    k_best = min(scores, key=lambda k: (scores[k], k))
    sub = sub_bases[k_best]
    coef, _, _, _ = np.linalg.lstsq(sub.evaluate_many(x), response, rcond=None)

    def predict(pts):
        return sub.evaluate_many(np.asarray(pts)) @ coef

    return predict, k_best


def series_regression(training: Dataset, basis: Basis, k_grid: list[int],
                      folds: int, target: str, seed: int = 0,
                      sigma_floor: float = DEFAULT_SIGMA_FLOOR):
    """Cross-validated series fit of the outcome regression or propensity.

    ``target='b'`` regresses Y on X among records with A=1; ``target='pi'``
    regresses A on X over all records, clips the fit to [sigma_floor, 1]
    and returns its reciprocal (the inverse propensity).
    """
    if target == "b":
        mask = training.a > 0
        fit, _ = _series_fit(training.x[mask], training.y[mask], basis, k_grid, folds, seed)
        return fit
    if target == "pi":
        fit, _ = _series_fit(training.x, training.a, basis, k_grid, folds, seed)

        def p_hat(pts):
            pi = np.clip(fit(pts), sigma_floor, 1.0)
            return 1.0 / pi

        return p_hat
    raise ValueError(f"unknown target {target!r}")


def mean_regression(training: Dataset, response: np.ndarray, basis: Basis,
                    k_grid: list[int], folds: int, seed: int = 0):
    """Plain cross-validated series regression of ``response`` on X."""
    fit, _ = _series_fit(training.x, response, basis, k_grid, folds, seed)
    return fit


def density_series(training: Dataset, basis: Basis, spec: FunctionalSpec,
                   sigma_floor: float = DEFAULT_SIGMA_FLOOR):
    """|h1|-weighted histogram density on the basis's dyadic cells.

    Floored at ``sigma_floor`` and renormalized to the weighted sample
    mass; used only by the density-based comparison path.
    """
    if training.n == 0:
        raise ValidationError("empty training set")
    w = np.abs(spec.h1(training))
    mass = float(np.mean(w))
    if mass <= 0.0:
        raise ValidationError("all |h1| weights are zero")
    q = basis.spec.per_dim_size
    d = basis.d
    cells = np.minimum((training.x * q).astype(np.int64), q - 1)
    flat = np.zeros(q**d)
    strides = q ** np.arange(d - 1, -1, -1)
    np.add.at(flat, cells @ strides, w)
    dens = flat / training.n * q**d  # histogram density per cell
    dens = np.maximum(dens, sigma_floor)
    dens = dens * (mass / (np.mean(dens / q**d) * q**d))
    dens = np.maximum(dens, sigma_floor)

    def g_hat(pts):
        pts = np.asarray(pts)
        if pts.ndim == 1:
            pts = pts[:, None]
        cell = np.minimum((pts * q).astype(np.int64), q - 1)
        return dens[cell @ strides]

    return g_hat


def fit_nuisances(functional_id: str, spec: FunctionalSpec, training: Dataset,
                  basis: Basis, k_grid: list[int], folds: int, seed: int = 0,
                  sigma_floor: float = DEFAULT_SIGMA_FLOOR,
                  with_density: bool = False) -> NuisanceSet:
    """Fit the nuisance pair appropriate to the functional."""
    if functional_id in ("mar_mean", "mar_mean_arm0"):
        flipped = functional_id == "mar_mean_arm0"
        work = training
        if flipped:
            work = Dataset(training.x, 1.0 - training.a, training.y)
        b_hat = series_regression(work, basis, k_grid, folds, "b", seed, sigma_floor)
        p_hat = series_regression(work, basis, k_grid, folds, "pi", seed + 1, sigma_floor)
        g_hat = density_series(training, basis, spec, sigma_floor) if with_density else None
        return NuisanceSet(b_hat, p_hat, g_hat, provenance=f"series:k_grid={k_grid}")
    if functional_id == "expected_cond_cov":
        b_hat = mean_regression(training, training.y, basis, k_grid, folds, seed)
        p_hat = mean_regression(training, training.a, basis, k_grid, folds, seed + 1)
        g_hat = density_series(training, basis, spec, sigma_floor) if with_density else None
        return NuisanceSet(b_hat, p_hat, g_hat, provenance=f"series:k_grid={k_grid}")
    raise ValueError(f"unknown functional {functional_id!r}")
