"""Estimator pipeline: split, fit, Gram, U-statistic sum, inference.

The full estimate is the one-step (first-order) estimator plus the
higher-order U-statistic corrections of orders 2..m, with the inverse Gram
taken either from the empirical training-sample covariance (variant
``emp``, the main path) or from quadrature against an estimated density
(variant ``ac``).  A Gram that fails the invertibility check maps the
whole estimate to zero by convention.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.stats import norm

from hoif.basis import Basis, BasisSpec, build_basis
from hoif.data import Dataset, ValidationError
from hoif import functionals as fn
from hoif.functionals import FunctionalSpec
from hoif.gram import (
    DEFAULT_EIGEN_FLOOR,
    GramMatrix,
    InverseReport,
    empirical_gram,
    invert_checked,
    op_norm_distance,
    quadrature_gram,
)
from hoif.nuisance import (
    DEFAULT_SIGMA_FLOOR,
    NuisanceSet,
    density_series,
    fit_nuisances,
    zero_nuisance,
)
from hoif.quadrature import QuadratureSpec, default_nodes_per_dim
from hoif.ustat import M_MAX_HARD, ChainInputs, if22, ifjj

VARIANTS = ("emp", "ac", "first_order")
FUNCTIONALS = ("mar_mean", "ate", "ecc")


@dataclass(frozen=True)
class EstimatorConfig:
    functional: str = "mar_mean"
    basis: BasisSpec = field(default_factory=lambda: BasisSpec("haar", 1, 4))
    m: int = 2
    split_fraction: float = 0.5
    seed: int = 0
    variant: str = "emp"
    eigen_floor: float = DEFAULT_EIGEN_FLOOR
    cross_fit: bool = False
    m_max: int = 4
    nuisance_method: str = "series"  # series | zero | plugin
    nuisance_k_grid: tuple[int, ...] = (1, 2, 4)
    nuisance_folds: int = 2
    sigma_floor: float = DEFAULT_SIGMA_FLOOR
    quad_nodes: int = 0  # 0 means dimension default
    ci_level: float = 0.95

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValidationError(f"unknown variant {self.variant!r}")
        if self.functional not in FUNCTIONALS:
            raise ValidationError(f"unknown functional {self.functional!r}")
        if not 0.0 < self.split_fraction < 1.0:
            raise ValidationError("split_fraction must be in (0, 1)")
        if self.m < 1 or self.m > min(self.m_max, M_MAX_HARD):
            raise ValidationError(f"m must be in [1, {min(self.m_max, M_MAX_HARD)}]")

    @property
    def k(self) -> int:
        return self.basis.k

    def quadrature(self) -> QuadratureSpec:
        nodes = self.quad_nodes or default_nodes_per_dim(self.basis.dimension)
        return QuadratureSpec(nodes)


@dataclass
class EstimateReport:
    psi_hat: float
    psi_1: float
    per_order: list[float]  # contributions for j = 2..m
    variance_est: float
    ci_low: float
    ci_high: float
    gram_diag: InverseReport | None
    zero_convention_applied: bool
    n_est: int
    n_tr: int
    k: int
    m: int
    variant: str
    functional: str
    seed: int
    elapsed_s: float = 0.0
    if1_values: np.ndarray | None = None  # estimated IF1 summands (diagnostic)

    CSV_COLUMNS = (
        "functional,variant,n_est,n_tr,k,m,seed,psi_hat,psi_1,"
        "per_order_2,per_order_3,per_order_4,per_order_5,per_order_6,"
        "variance_est,ci_low,ci_high,zero_convention,op_dist,elapsed_s"
    )

    def csv_row(self) -> str:
        per = list(self.per_order) + [float("nan")] * (5 - len(self.per_order))
        op = float("nan")
        if self.gram_diag is not None and self.gram_diag.op_distance_to_reference is not None:
            op = self.gram_diag.op_distance_to_reference
        vals = [
            self.functional, self.variant, self.n_est, self.n_tr, self.k,
            self.m, self.seed, self.psi_hat, self.psi_1, *per[:5],
            self.variance_est, self.ci_low, self.ci_high,
            int(self.zero_convention_applied), op, self.elapsed_s,
        ]
        return ",".join(_fmt(v) for v in vals)

    def text_block(self) -> str:
        lines = [
            f"functional      : {self.functional} ({self.variant})",
            f"samples         : estimation {self.n_est}, training {self.n_tr}",
            f"basis size k    : {self.k}   order m: {self.m}",
            f"psi_hat         : {self.psi_hat:.10g}",
            f"one-step psi_1  : {self.psi_1:.10g}",
        ]
        for j, v in enumerate(self.per_order, start=2):
            lines.append(f"order-{j} term    : {v:.10g}")
        lines.append(f"variance est    : {self.variance_est:.10g}")
        lines.append(f"95% CI          : [{self.ci_low:.10g}, {self.ci_high:.10g}]")
        if self.zero_convention_applied:
            lines.append("zero convention : applied (Gram not invertible)")
        return "\n".join(lines)


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.17g}"
    return str(v)


def split_sample(data: Dataset, fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Uniformly random partition into estimation and training samples."""
    if not 0.0 < fraction < 1.0:
        raise ValidationError("fraction must be in (0, 1)")
    if data.n < 4:
        raise ValidationError("need at least 4 records to split")
    n_est = math.ceil(fraction * data.n)
    if n_est == data.n:
        n_est -= 1
    rng = np.random.default_rng(seed)
    perm = rng.permutation(data.n)
    return data.subset(perm[:n_est]), data.subset(perm[n_est:])


def one_step(est_sample: Dataset, spec: FunctionalSpec, nuis: NuisanceSet) -> float:
    """Sample mean of H(b_hat, p_hat): plug-in plus first-order correction."""
    return float(np.mean(fn.h_values(spec, est_sample, nuis.b_hat, nuis.p_hat)))


def default_tuning(n: int, variant: str, dimension: int = 1,
                   family: str = "haar", m_max: int = 4) -> tuple[int, int]:
    """Rate-optimal (k, m) for the estimation-sample size n.

    emp: k = n/(ln n)^3, m = sqrt(ln n); ac: k = n/(ln n)^2, m = ln n.
    m is clamped to [2, m_max] and k is rounded down to the nearest
    realizable tensor size q**dimension.
    """
    if n < 8:
        raise ValidationError("n must be >= 8 for the tuning rules")
    ln = math.log(n)
    if variant == "ac":
        k_raw = max(1, int(n / ln**2))
        m = math.ceil(ln)
    else:
        k_raw = max(1, int(n / ln**3))
        m = math.ceil(math.sqrt(ln))
    m = min(max(m, 2), min(m_max, M_MAX_HARD))
    return realizable_k(k_raw, dimension, family), m


def realizable_k(k_raw: int, dimension: int, family: str = "haar") -> int:
    """Largest realizable tensor size q**dimension not exceeding k_raw."""
    best = 1
    q = 1
    while True:
        q_next = q * 2 if family == "haar" else q + 1
        if q_next**dimension > k_raw:
            break
        q = q_next
        best = q**dimension
    return best


def confidence_interval(psi_hat: float, variance_est: float, level: float) -> tuple[float, float]:
    if not 0.0 < level < 1.0:
        raise ValidationError("level must be in (0, 1)")
    if variance_est <= 0.0:
        raise ValidationError("non-positive variance estimate")
    half = norm.ppf(0.5 * (1.0 + level)) * math.sqrt(variance_est)
    return psi_hat - half, psi_hat + half


def _resolve_spec(functional: str) -> FunctionalSpec:
    if functional == "mar_mean":
        return fn.mar_mean_spec()
    if functional == "ecc":
        return fn.expected_cond_cov_spec()
    raise ValidationError(f"unknown functional {functional!r}")


def _fit_or_default(spec: FunctionalSpec, training: Dataset, cfg: EstimatorConfig,
                    basis: Basis, nuisance_override: NuisanceSet | None) -> NuisanceSet:
    if nuisance_override is not None:
        return nuisance_override
    if cfg.nuisance_method == "zero":
        return zero_nuisance()
    if cfg.nuisance_method == "series":
        return fit_nuisances(spec.id, spec, training, basis,
                             list(cfg.nuisance_k_grid), cfg.nuisance_folds,
                             seed=cfg.seed + 17, sigma_floor=cfg.sigma_floor,
                             with_density=cfg.variant == "ac")
    raise ValidationError(f"nuisance method {cfg.nuisance_method!r} needs an override")


def _estimate_spec(spec: FunctionalSpec, est: Dataset, training: Dataset,
                   cfg: EstimatorConfig, basis: Basis,
                   nuisance_override: NuisanceSet | None = None,
                   omega_inv_override: np.ndarray | None = None,
                   reference_gram: GramMatrix | None = None) -> EstimateReport:
    t0 = time.perf_counter()
    spec.check_h1_sign(est)
    spec.check_h1_sign(training)
    nuis = _fit_or_default(spec, training, cfg, basis, nuisance_override)

    if1 = fn.h_values(spec, est, nuis.b_hat, nuis.p_hat)
    psi_1 = float(np.mean(if1))
    n = est.n
    variance_est = float(np.var(if1, ddof=1)) / n if n > 1 else float("nan")

    def report(psi_hat, per_order, diag, zero_applied):
        if variance_est > 0.0 and np.isfinite(variance_est):
            lo, hi = confidence_interval(psi_hat, variance_est, cfg.ci_level)
        else:
            lo = hi = float("nan")
        return EstimateReport(
            psi_hat=psi_hat, psi_1=psi_1 if not zero_applied else 0.0,
            per_order=per_order, variance_est=variance_est,
            ci_low=lo, ci_high=hi, gram_diag=diag,
            zero_convention_applied=zero_applied,
            n_est=n, n_tr=training.n, k=basis.k, m=cfg.m,
            variant=cfg.variant, functional=spec.id, seed=cfg.seed,
            elapsed_s=time.perf_counter() - t0,
            if1_values=if1,
        )

    if cfg.variant == "first_order" or cfg.m == 1:
        return report(psi_1, [], None, False)

    if cfg.variant == "emp":
        if basis.k > n:
            raise ValidationError(
                "basis size exceeds the estimation sample; the empirical "
                "inverse covariance matrix does not exist"
            )
        gram = empirical_gram(basis, training, spec)
    else:  # ac
        g_hat = nuis.g_hat
        if g_hat is None:
            g_hat = density_series(training, basis, spec, cfg.sigma_floor)
        gram = quadrature_gram(basis, g_hat, cfg.quadrature())

    diag = invert_checked(gram, cfg.eigen_floor)
    if reference_gram is not None:
        diag = replace(diag, op_distance_to_reference=op_norm_distance(gram, reference_gram))

    omega_inv = diag.inverse
    if omega_inv_override is not None:
        omega_inv = omega_inv_override
    elif not diag.invertible:
        # estimator defined to be zero when the Gram fails invertibility
        return report(0.0, [0.0] * (cfg.m - 1), diag, True)

    res = fn.residuals(spec, est, nuis.b_hat, nuis.p_hat)
    inputs = ChainInputs(
        eps_p=res.eps_p, eps_b=res.eps_b, abs_h1=res.abs_h1,
        zmat=basis.evaluate_many(est.x), omega_inv=omega_inv,
        sign_flag=spec.sign_flag,
    )
    per_order = [if22(inputs)]
    for j in range(3, cfg.m + 1):
        per_order.append(ifjj(j, inputs, m_max=cfg.m_max))
    return report(psi_1 + float(np.sum(per_order)), per_order, diag, False)


def _combine_arm_reports(r1: EstimateReport, r0: EstimateReport,
                         cfg: EstimatorConfig) -> EstimateReport:
    zero = r1.zero_convention_applied or r0.zero_convention_applied
    if zero:
        psi_hat, psi_1 = 0.0, 0.0
        per_order = [0.0] * max(len(r1.per_order), len(r0.per_order))
        if1 = None
        variance = float("nan")
        lo = hi = float("nan")
    else:
        psi_1 = r1.psi_1 - r0.psi_1
        per_order = [a - b for a, b in zip(r1.per_order, r0.per_order)] \
            if r1.per_order else []
        psi_hat = r1.psi_hat - r0.psi_hat
        if1 = r1.if1_values - r0.if1_values
        n = len(if1)
        variance = float(np.var(if1, ddof=1)) / n if n > 1 else float("nan")
        if variance > 0:
            lo, hi = confidence_interval(psi_hat, variance, cfg.ci_level)
        else:
            lo = hi = float("nan")
    return EstimateReport(
        psi_hat=psi_hat, psi_1=psi_1, per_order=per_order,
        variance_est=variance, ci_low=lo, ci_high=hi,
        gram_diag=r1.gram_diag, zero_convention_applied=zero,
        n_est=r1.n_est, n_tr=r1.n_tr, k=r1.k, m=r1.m,
        variant=cfg.variant, functional="ate", seed=cfg.seed,
        elapsed_s=r1.elapsed_s + r0.elapsed_s, if1_values=if1,
    )


def estimate_split(est: Dataset, training: Dataset, cfg: EstimatorConfig,
                   nuisance_override: NuisanceSet | None = None,
                   omega_inv_override: np.ndarray | None = None,
                   reference_gram: GramMatrix | None = None) -> EstimateReport:
    """Run the pipeline on caller-supplied estimation/training samples.

    Used by conditional-on-training studies, where one training sample is
    fixed and only the estimation sample is replicated.
    """
    basis = build_basis(cfg.basis)
    if cfg.functional == "ate":
        arm1, arm0 = fn.ate_spec()
        r1 = _estimate_spec(arm1, est, training, cfg, basis,
                            nuisance_override, omega_inv_override, reference_gram)
        r0 = _estimate_spec(arm0, est, training, cfg, basis,
                            None, omega_inv_override, None)
        return _combine_arm_reports(r1, r0, cfg)
    spec = _resolve_spec(cfg.functional)
    return _estimate_spec(spec, est, training, cfg, basis,
                          nuisance_override, omega_inv_override, reference_gram)


def estimate(data: Dataset, cfg: EstimatorConfig,
             nuisance_override: NuisanceSet | None = None,
             nuisance_override_arm0: NuisanceSet | None = None,
             omega_inv_override: np.ndarray | None = None,
             reference_gram: GramMatrix | None = None,
             _swap_halves: bool = False) -> EstimateReport:
    """Run the full pipeline on one random split of ``data``."""
    basis = build_basis(cfg.basis)
    est, training = split_sample(data, cfg.split_fraction, cfg.seed)
    if _swap_halves:
        est, training = training, est
    if cfg.functional == "ate":
        arm1, arm0 = fn.ate_spec()
        r1 = _estimate_spec(arm1, est, training, cfg, basis,
                            nuisance_override, omega_inv_override, reference_gram)
        r0 = _estimate_spec(arm0, est, training, cfg, basis,
                            nuisance_override_arm0, omega_inv_override, None)
        return _combine_arm_reports(r1, r0, cfg)
    spec = _resolve_spec(cfg.functional)
    return _estimate_spec(spec, est, training, cfg, basis,
                          nuisance_override, omega_inv_override, reference_gram)


def cross_fit(data: Dataset, cfg: EstimatorConfig,
              reference_gram: GramMatrix | None = None) -> EstimateReport:
    """Average the estimate with the roles of the two halves exchanged.

    The variance estimate pools the estimated first-order influence
    function values over all N records and divides by N.
    """
    if not cfg.cross_fit:
        raise ValidationError("cross_fit called with cfg.cross_fit=False")
    r_a = estimate(data, cfg, reference_gram=reference_gram)
    r_b = estimate(data, cfg, reference_gram=reference_gram, _swap_halves=True)
    psi_hat = 0.5 * (r_a.psi_hat + r_b.psi_hat)
    psi_1 = 0.5 * (r_a.psi_1 + r_b.psi_1)
    per_order = [0.5 * (x + y) for x, y in zip(r_a.per_order, r_b.per_order)]
    zero = r_a.zero_convention_applied or r_b.zero_convention_applied
    if zero:
        psi_hat = psi_1 = 0.0
        per_order = [0.0 for _ in per_order]
    if r_a.if1_values is not None and r_b.if1_values is not None:
        pooled = np.concatenate([r_a.if1_values, r_b.if1_values])
        variance = float(np.var(pooled, ddof=1)) / len(pooled)
    else:
        variance = float("nan")
    if variance > 0 and not zero:
        lo, hi = confidence_interval(psi_hat, variance, cfg.ci_level)
    else:
        lo = hi = float("nan")
    return EstimateReport(
        psi_hat=psi_hat, psi_1=psi_1, per_order=per_order,
        variance_est=variance, ci_low=lo, ci_high=hi,
        gram_diag=r_a.gram_diag, zero_convention_applied=zero,
        n_est=r_a.n_est + r_b.n_est, n_tr=0, k=r_a.k, m=r_a.m,
        variant=cfg.variant, functional=r_a.functional, seed=cfg.seed,
        elapsed_s=r_a.elapsed_s + r_b.elapsed_s, if1_values=None,
    )
