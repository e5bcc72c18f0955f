"""Average-treatment-effect estimators over unit-level experiment data.

Four estimators share one frame type:

* ``diff_in_means`` -- the unadjusted two-sample baseline.
* ``basic_ra`` -- CUPED-style adjustment on the pre-period metric:
  subtract theta * (y_pre - mean) from the outcome, theta = cov/var pooled
  across both arms, then difference the arms.
* ``multi_ra`` -- the same subtraction with a least-squares theta vector over
  several named covariates.
* ``crossfit_ra`` -- fits an out-of-fold linear predictor of the outcome from
  pre-experiment columns and adjusts on the prediction, so each unit's
  covariate never saw its own outcome.

Adjustment coefficients are estimated pooled (classic CUPED); variances use
the two-sample Neyman form on adjusted outcomes and confidence intervals use
normal quantiles.  Every estimator is a pure function of the frame and is
invariant to its row order.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
from scipy.stats import norm

from .corrmodel import CorrelationStructure

CONTROL, TREATMENT = 0, 1

#: Columns every frame carries outside the named covariates.
RESERVED_COLUMNS = ("unit_id", "arm", "y_pre", "y_post")


class EstimatorError(ValueError):
    """Base class for estimator-input failures."""


class FrameInvariantError(EstimatorError):
    """Experiment frame violates a structural invariant."""


class ZeroVarianceCovariateError(EstimatorError):
    """A covariate (or required series) is constant, so adjustment is undefined."""


class CollinearCovariatesError(EstimatorError):
    """The covariate design matrix is rank deficient."""


class UnknownColumnError(EstimatorError):
    """A requested column name does not exist in the frame."""


class FoldSizeError(EstimatorError):
    """A cross-fitting fold is too small to fit or evaluate the predictor."""


@dataclass(frozen=True)
class ExperimentFrame:
    """Per-unit experiment records.

    Columns: an opaque ``unit_id`` per row, ``arm`` (0 control / 1 treatment),
    the pre- and post-period goal metric, and optionally named numeric
    covariates as an (n, k) matrix aligned with ``covariate_names``.

    Construction validates the invariants every estimator relies on: at least
    two units per arm, consistent lengths, finite values, distinct covariate
    names.  Treat instances as immutable.
    """

    unit_ids: np.ndarray
    arms: np.ndarray
    y_pre: np.ndarray
    y_post: np.ndarray
    covariate_names: tuple[str, ...] = ()
    covariate_values: np.ndarray = field(default_factory=lambda: np.empty((0, 0)))

    def __post_init__(self):
        unit_ids = np.asarray(self.unit_ids, dtype=object)
        arms = np.asarray(self.arms)
        y_pre = np.asarray(self.y_pre, dtype=float)
        y_post = np.asarray(self.y_post, dtype=float)
        names = tuple(self.covariate_names)
        values = np.asarray(self.covariate_values, dtype=float)
        if values.size == 0:
            values = np.empty((len(y_pre), 0))
        if values.ndim != 2:
            raise FrameInvariantError("covariate_values must be a 2-D array")

        n = len(unit_ids)
        if not (len(arms) == len(y_pre) == len(y_post) == values.shape[0] == n):
            raise FrameInvariantError("all frame columns must have the same length")
        if values.shape[1] != len(names):
            raise FrameInvariantError(
                f"{len(names)} covariate names but {values.shape[1]} value columns"
            )
        if len(set(names)) != len(names):
            raise FrameInvariantError(f"duplicate covariate names in {names}")
        for name in names:
            if name in RESERVED_COLUMNS:
                raise FrameInvariantError(f"covariate name {name!r} is reserved")

        if not np.isin(arms, (CONTROL, TREATMENT)).all():
            raise FrameInvariantError("arm values must be 0 (control) or 1 (treatment)")
        arms = arms.astype(np.int8)
        for label, arm in (("control", CONTROL), ("treatment", TREATMENT)):
            if int(np.sum(arms == arm)) < 2:
                raise FrameInvariantError(f"fewer than 2 units in the {label} arm")
        for label, column in (("y_pre", y_pre), ("y_post", y_post), ("covariates", values)):
            if not np.isfinite(column).all():
                raise FrameInvariantError(f"non-finite value in {label}")

        object.__setattr__(self, "unit_ids", unit_ids)
        object.__setattr__(self, "arms", arms)
        object.__setattr__(self, "y_pre", y_pre)
        object.__setattr__(self, "y_post", y_post)
        object.__setattr__(self, "covariate_names", names)
        object.__setattr__(self, "covariate_values", values)

    @property
    def n_units(self) -> int:
        return len(self.unit_ids)

    def column(self, name: str) -> np.ndarray:
        """Look up a column by name: 'y_pre', 'y_post', or a covariate."""
        if name == "y_pre":
            return self.y_pre
        if name == "y_post":
            return self.y_post
        try:
            j = self.covariate_names.index(name)
        except ValueError:
            raise UnknownColumnError(
                f"column {name!r} not in frame (have y_pre, y_post"
                + ("".join(f", {c}" for c in self.covariate_names))
                + ")"
            ) from None
        return self.covariate_values[:, j]


@dataclass(frozen=True)
class AdjustedEstimate:
    """Point estimate of the average treatment effect plus inference metadata.

    ``theta`` holds the adjustment coefficients in covariate order (empty for
    the unadjusted estimator).  ``variance_reduction_factor`` is the ratio of
    this estimator's variance to the unadjusted variance on the same frame;
    finite samples can push it slightly above 1, which is recorded rather
    than clamped.
    """

    delta_hat: float
    variance: float
    std_error: float
    ci_low: float
    ci_high: float
    confidence_level: float
    theta: tuple[float, ...]
    variance_reduction_factor: float
    method_tag: str

    def __post_init__(self):
        if self.variance < 0.0:
            raise ValueError(f"negative estimator variance {self.variance}")
        if not self.ci_low <= self.delta_hat <= self.ci_high:
            raise ValueError("confidence interval does not bracket the estimate")


def _check_confidence_level(confidence_level: float) -> None:
    if not 0.0 < confidence_level < 1.0:
        raise ValueError(f"confidence_level must be in (0, 1), got {confidence_level}")


def _two_sample(frame: ExperimentFrame, outcome: np.ndarray) -> tuple[float, float]:
    """Difference of arm means of ``outcome`` and its Neyman variance."""
    treated = outcome[frame.arms == TREATMENT]
    control = outcome[frame.arms == CONTROL]
    delta = float(np.mean(treated) - np.mean(control))
    variance = float(
        np.var(treated, ddof=1) / len(treated) + np.var(control, ddof=1) / len(control)
    )
    return delta, variance


def _estimate(
    frame: ExperimentFrame,
    outcome: np.ndarray,
    theta: tuple[float, ...],
    method_tag: str,
    confidence_level: float,
) -> AdjustedEstimate:
    delta, variance = _two_sample(frame, outcome)
    if theta:
        _, variance_unadj = _two_sample(frame, frame.y_post)
        reduction = variance / variance_unadj if variance_unadj > 0.0 else float("nan")
    else:
        reduction = 1.0
    std_error = float(np.sqrt(variance))
    z = float(norm.ppf(0.5 + confidence_level / 2.0))
    return AdjustedEstimate(
        delta_hat=delta,
        variance=variance,
        std_error=std_error,
        ci_low=delta - z * std_error,
        ci_high=delta + z * std_error,
        confidence_level=confidence_level,
        theta=theta,
        variance_reduction_factor=reduction,
        method_tag=method_tag,
    )


def diff_in_means(
    frame: ExperimentFrame, confidence_level: float = 0.95
) -> AdjustedEstimate:
    """Unadjusted difference of post-period arm means."""
    _check_confidence_level(confidence_level)
    return _estimate(frame, frame.y_post, (), "diff_in_means", confidence_level)


def basic_ra(
    frame: ExperimentFrame, confidence_level: float = 0.95
) -> AdjustedEstimate:
    """Adjustment on the pre-period metric alone (classic CUPED).

    theta = cov(y_pre, y_post) / var(y_pre) over all units pooled; the
    adjusted outcome is y_post - theta * (y_pre - mean(y_pre)).
    """
    _check_confidence_level(confidence_level)
    var_pre = float(np.var(frame.y_pre, ddof=1))
    if var_pre <= 0.0:
        raise ZeroVarianceCovariateError("y_pre is constant; adjustment undefined")
    theta = float(np.cov(frame.y_pre, frame.y_post, ddof=1)[0, 1]) / var_pre
    adjusted = frame.y_post - theta * (frame.y_pre - np.mean(frame.y_pre))
    return _estimate(frame, adjusted, (theta,), "basic_ra", confidence_level)


def _design_matrix(
    frame: ExperimentFrame, covariate_names: list[str] | tuple[str, ...]
) -> np.ndarray:
    if not covariate_names:
        raise ValueError("covariate_names must name at least one column")
    return np.column_stack([frame.column(name) for name in covariate_names])


def multi_ra(
    frame: ExperimentFrame,
    covariate_names: list[str] | tuple[str, ...],
    confidence_level: float = 0.95,
) -> AdjustedEstimate:
    """Adjustment on several named covariates ('y_pre' may be one of them).

    The theta vector solves the pooled least-squares normal equations of the
    outcome on centered covariates; the adjusted outcome subtracts
    (covariates - means) @ theta.  With a single covariate this reduces to
    :func:`basic_ra` on that column.
    """
    _check_confidence_level(confidence_level)
    names = list(covariate_names)
    design = _design_matrix(frame, names)

    variances = np.var(design, axis=0, ddof=1)
    constant = [name for name, v in zip(names, variances) if v <= 0.0]
    if constant:
        raise ZeroVarianceCovariateError(
            f"constant covariate column(s): {', '.join(constant)}"
        )

    centered = design - design.mean(axis=0)
    _, r_diag, pivots = scipy.linalg.qr(centered, mode="economic", pivoting=True)
    diag = np.abs(np.diag(r_diag))
    tol = diag[0] * max(centered.shape) * np.finfo(float).eps if diag.size else 0.0
    rank = int(np.sum(diag > tol))
    if rank < len(names):
        offending = [names[j] for j in sorted(pivots[rank:])]
        raise CollinearCovariatesError(
            f"covariate design matrix is rank deficient; offending column(s): "
            f"{', '.join(offending)}"
        )

    theta, *_ = np.linalg.lstsq(centered, frame.y_post - frame.y_post.mean(), rcond=None)
    adjusted = frame.y_post - centered @ theta
    return _estimate(
        frame, adjusted, tuple(float(t) for t in theta), "multi_ra", confidence_level
    )


def fold_assignments(unit_ids: np.ndarray, seed: int, k_folds: int) -> np.ndarray:
    """Deterministic fold index per unit, keyed off a hash of (seed, unit_id).

    Independent of row order and of the process hash seed, so cross-fitting
    is reproducible across runs and machines.
    """
    out = np.empty(len(unit_ids), dtype=np.int64)
    for i, uid in enumerate(unit_ids):
        digest = hashlib.blake2b(f"{seed}:{uid}".encode(), digest_size=8).digest()
        out[i] = int.from_bytes(digest, "little") % k_folds
    return out


def crossfit_ra(
    frame: ExperimentFrame,
    k_folds: int,
    confidence_level: float = 0.95,
    seed: int = 0,
) -> AdjustedEstimate:
    """Adjustment on a cross-fitted linear prediction of the outcome.

    Units are hashed into ``k_folds`` folds from ``seed``.  For each fold an
    ordinary-least-squares predictor of y_post from the pre-experiment
    columns (y_pre plus every covariate) is fit on the other folds, and the
    held-out predictions become a single engineered covariate, adjusted for
    exactly as in :func:`basic_ra`.
    """
    _check_confidence_level(confidence_level)
    if k_folds < 2:
        raise ValueError(f"k_folds must be at least 2, got {k_folds}")

    predictors = np.column_stack([frame.y_pre, frame.covariate_values])
    n, p = predictors.shape
    folds = fold_assignments(frame.unit_ids, seed, k_folds)
    sizes = np.bincount(folds, minlength=k_folds)
    if sizes.min() < p + 2:
        raise FoldSizeError(
            f"smallest fold has {int(sizes.min())} units; need at least {p + 2} "
            f"for {p} predictor column(s)"
        )

    # Fit in unit_id-canonical order so results are exactly row-order invariant.
    canonical = np.argsort(np.array([str(u) for u in frame.unit_ids]))
    design = np.column_stack([np.ones(n), predictors])
    predictions = np.empty(n)
    for j in range(k_folds):
        test = canonical[folds[canonical] == j]
        train = canonical[folds[canonical] != j]
        coef, *_ = np.linalg.lstsq(design[train], frame.y_post[train], rcond=None)
        predictions[test] = design[test] @ coef

    var_pred = float(np.var(predictions, ddof=1))
    if var_pred <= 0.0:
        raise ZeroVarianceCovariateError("cross-fitted predictions are constant")
    theta = float(np.cov(predictions, frame.y_post, ddof=1)[0, 1]) / var_pred
    adjusted = frame.y_post - theta * (predictions - np.mean(predictions))
    return _estimate(frame, adjusted, (theta,), "crossfit_ra", confidence_level)


def empirical_correlation(frame: ExperimentFrame, x_column: str) -> CorrelationStructure:
    """Estimate (sigma, tau, rho) for a candidate covariate from control units.

    Only control-arm units enter, since treatment shifts y_post and would
    bias the correlations involving it.  All three series must be
    non-constant on the control arm.
    """
    control = frame.arms == CONTROL
    x = frame.column(x_column)[control]
    y_pre = frame.y_pre[control]
    y_post = frame.y_post[control]
    for name, series in ((x_column, x), ("y_pre", y_pre), ("y_post", y_post)):
        if np.var(series, ddof=1) <= 0.0:
            raise ZeroVarianceCovariateError(
                f"{name} is constant on the control arm; correlation undefined"
            )

    def cor(u: np.ndarray, v: np.ndarray) -> float:
        return float(np.clip(np.corrcoef(u, v)[0, 1], -1.0, 1.0))

    return CorrelationStructure(
        sigma=cor(x, y_pre), tau=cor(x, y_post), rho=cor(y_pre, y_post)
    )
