"""Closed-form calculus on the correlation structure behind covariate adjustment.

Everything here operates on the 3x3 correlation matrix of (X, Y_pre, Y_post),
where Y_pre and Y_post are the goal metric measured before and after an
experiment and X is an engineered covariate built from pre-experiment data:

    [[1,     sigma, tau],
     [sigma, 1,     rho],
     [tau,   rho,   1]]

with sigma = cor(X, Y_pre), tau = cor(X, Y_post), rho = cor(Y_pre, Y_post).

Basic adjustment on Y_pre scales the effect-estimator variance by 1 - rho^2;
adjustment on X scales it by 1 - tau^2, so the advanced-vs-basic ratio is
(1 - tau^2) / (1 - rho^2).  When X is the best covariate achievable by linear
feature engineering (no combination a*X + b*Y_pre beats X itself, which pins
rho = sigma * tau) and X predicts the post period no better than the pre
period (tau <= sigma), that ratio is floored at 1 / (1 + rho): at most a
further 50% variance cut, however good the feature engineering.

All functions are pure; nothing here touches data, randomness, or I/O.
"""

import math
from dataclasses import dataclass, field

import numpy as np

# Tolerance on the minimum eigenvalue when deciding positive semidefiniteness.
# Boundary structures (determinant exactly zero) must count as feasible so
# that downstream samplers can factor them after jitter.
PSD_TOLERANCE = 1e-10


class InfeasibleStructureError(ValueError):
    """A correlation structure failed feasibility checks required by an operation."""


class DegenerateStructureError(ValueError):
    """A structure is valid but degenerate for the requested operation."""


@dataclass(frozen=True)
class CorrelationStructure:
    """The (sigma, tau, rho) triple of pairwise correlations.

    sigma = cor(X, Y_pre), tau = cor(X, Y_post), rho = cor(Y_pre, Y_post).
    Construction does not enforce feasibility; call :func:`validate`.
    """

    sigma: float
    tau: float
    rho: float

    def matrix(self) -> np.ndarray:
        """The implied 3x3 correlation matrix, ordered (X, Y_pre, Y_post)."""
        s, t, r = self.sigma, self.tau, self.rho
        return np.array([[1.0, s, t], [s, 1.0, r], [t, r, 1.0]])

    def determinant(self) -> float:
        """Determinant of the correlation matrix, in closed form."""
        s, t, r = self.sigma, self.tau, self.rho
        return 1.0 + 2.0 * s * t * r - s * s - t * t - r * r


@dataclass(frozen=True)
class ValidationReport:
    """Feasibility verdict for a :class:`CorrelationStructure`."""

    feasible: bool
    determinant: float
    min_eigenvalue: float
    violations: tuple[str, ...] = field(default=())


@dataclass(frozen=True)
class ComboWeights:
    """Weights (a, b) of a linear combination a*X + b*Y_pre.

    As returned by :func:`best_linear_combo` they are normalized to unit
    variance: a^2 + b^2 + 2*a*b*sigma = 1.
    """

    a: float
    b: float


def validate(structure: CorrelationStructure) -> ValidationReport:
    """Check that (sigma, tau, rho) form a valid correlation matrix.

    Feasible means every field lies in [-1, 1] and the 3x3 matrix is
    positive semidefinite, judged by its minimum eigenvalue being at least
    -PSD_TOLERANCE.  The determinant is computed from the closed form and the
    minimum eigenvalue from a direct symmetric eigenvalue solve; tests keep
    the two routes honest against each other.

    Never raises: every input produces a report.
    """
    violations: list[str] = []
    for name in ("sigma", "tau", "rho"):
        value = getattr(structure, name)
        if not math.isfinite(value):
            violations.append(f"{name}={value} is not finite")
        elif not -1.0 <= value <= 1.0:
            violations.append(f"{name}={value} outside [-1, 1]")

    determinant = structure.determinant()
    if all(math.isfinite(getattr(structure, n)) for n in ("sigma", "tau", "rho")):
        min_eigenvalue = float(np.linalg.eigvalsh(structure.matrix())[0])
    else:
        min_eigenvalue = math.nan
    if not min_eigenvalue >= -PSD_TOLERANCE:
        violations.append(
            f"matrix not positive semidefinite (min eigenvalue {min_eigenvalue})"
        )

    return ValidationReport(
        feasible=not violations,
        determinant=determinant,
        min_eigenvalue=min_eigenvalue,
        violations=tuple(violations),
    )


def require_feasible(structure: CorrelationStructure) -> ValidationReport:
    """Validate and raise :class:`InfeasibleStructureError` on failure."""
    report = validate(structure)
    if not report.feasible:
        raise InfeasibleStructureError(
            f"infeasible correlation structure {structure}: "
            + "; ".join(report.violations)
        )
    return report


def assumption_holds(structure: CorrelationStructure) -> bool:
    """Whether X predicts the post period no better than the pre period (tau <= sigma)."""
    require_feasible(structure)
    return structure.tau <= structure.sigma


def is_best_covariate(structure: CorrelationStructure, tol: float) -> bool:
    """Whether X is stationary-optimal among combinations a*X + b*Y_pre.

    The condition is rho = sigma * tau (within ``tol``): exactly when no
    admixture of Y_pre improves the correlation with Y_post, so the best
    unit-variance combination is (a, b) = (1, 0).
    """
    require_feasible(structure)
    return abs(structure.rho - structure.sigma * structure.tau) <= tol


def best_linear_combo(
    structure: CorrelationStructure,
) -> tuple[ComboWeights, float]:
    """Maximize cor(a*X + b*Y_pre, Y_post) subject to unit variance.

    Returns the maximizing weights and the achieved correlation.  The square
    of the achieved correlation is the multiple correlation

        R^2 = (tau^2 + rho^2 - 2*sigma*tau*rho) / (1 - sigma^2),

    and the weights are proportional to (tau - sigma*rho, rho - sigma*tau),
    scaled so a^2 + b^2 + 2*a*b*sigma = 1.  Of the two sign choices the one
    with nonnegative achieved correlation is returned; when the objective is
    identically zero (tau = rho = 0) the convention is (a, b) = (1, 0).

    Raises :class:`DegenerateStructureError` when X and Y_pre are perfectly
    collinear (sigma^2 = 1), where the combination space collapses.
    """
    require_feasible(structure)
    s, t, r = structure.sigma, structure.tau, structure.rho
    if s * s >= 1.0:
        raise DegenerateStructureError(
            f"X and Y_pre are perfectly collinear (sigma={s}); "
            "the unit-variance combination space is degenerate"
        )

    a_raw = t - s * r
    b_raw = r - s * t
    variance = a_raw * a_raw + b_raw * b_raw + 2.0 * s * a_raw * b_raw
    if variance <= 0.0:
        # Objective identically zero: any unit-variance combination attains 0.
        return ComboWeights(a=1.0, b=0.0), 0.0

    scale = 1.0 / math.sqrt(variance)
    a, b = a_raw * scale, b_raw * scale
    achieved = a * t + b * r
    return ComboWeights(a=a, b=b), achieved


def variance_ratio(structure: CorrelationStructure) -> float:
    """Variance of the X-adjusted estimator relative to the Y_pre-adjusted one.

    Equals (1 - tau^2) / (1 - rho^2).  Requires |rho| < 1; at |rho| = 1 the
    basic adjustment already removes all variance and the ratio degenerates.
    """
    t, r = structure.tau, structure.rho
    if abs(r) >= 1.0:
        raise DegenerateStructureError(
            f"variance ratio undefined at |rho| = 1 (rho={r})"
        )
    return (1.0 - t * t) / (1.0 - r * r)


def theorem_lower_bound(rho: float) -> float:
    """Floor on the advanced-vs-basic variance ratio: 1 / (1 + rho).

    Holds for any best-possible covariate satisfying tau <= sigma.  As rho
    approaches 1 the floor approaches 0.5: feature engineering can cut the
    basic-adjusted variance at most in half.
    """
    if not 0.0 <= rho < 1.0:
        raise ValueError(f"rho must lie in [0, 1), got {rho}")
    return 1.0 / (1.0 + rho)


def max_ci_width_reduction(rho: float) -> float:
    """Largest additional confidence-interval shrinkage from engineered covariates.

    CI width scales with the standard deviation, so the cap on extra width
    reduction is 1 - sqrt(1 / (1 + rho)); at rho = 1 this is 1 - 1/sqrt(2),
    about 29%.
    """
    if not 0.0 <= rho <= 1.0:
        raise ValueError(f"rho must lie in [0, 1], got {rho}")
    return 1.0 - math.sqrt(1.0 / (1.0 + rho))


def optimal_tau(rho: float, sigma: float) -> float:
    """The tau consistent with X being the best covariate for given (rho, sigma).

    Solves rho = sigma * tau for tau.  Requires sigma > 0, rho in [0, 1], and
    rho / sigma <= 1; the resulting (sigma, tau, rho) structure is verified
    feasible before returning.
    """
    if not 0.0 <= rho <= 1.0:
        raise ValueError(f"rho must lie in [0, 1], got {rho}")
    if sigma <= 0.0:
        raise ValueError(
            f"sigma must be positive, got {sigma}"
            + (" (no tau is consistent with rho > 0)" if rho > 0 else "")
        )
    tau = rho / sigma
    if tau > 1.0:
        if tau <= 1.0 + 1e-12:
            tau = 1.0  # rho = sigma boundary, off by float rounding
        else:
            raise ValueError(
                f"rho/sigma = {tau} exceeds 1: no feasible correlation "
                f"structure has cor(X, Y_post) that large"
            )
    require_feasible(CorrelationStructure(sigma=sigma, tau=tau, rho=rho))
    return tau
