"""Cubic B-spline bases on a uniform 2.5-year knot grid.

Each country gets its own grid: one knot is pinned at the estimation
horizon (default mid-2015) and the grid extends backward in 2.5-year steps
until it reaches past the start of the covered span, so grids are
deterministic regardless of observation jitter.  Curves are parameterized
as an intercept plus first differences of the spline coefficients; the
``DifferenceTransform`` maps the differences back to coefficient space.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.interpolate import BSpline
from scipy.linalg import solveh_banded

KNOT_SPACING = 2.5
DEGREE = 3
BASE_YEAR = 1990.0
DEFAULT_HORIZON = 2015.5


def midyear(year: float) -> float:
    """Map a calendar year to its midyear decimal (y -> y + 0.5).

    Values that already carry a fractional part are returned unchanged.
    """
    year = float(year)
    if year == int(year):
        return year + 0.5
    return year


@dataclass(frozen=True)
class KnotGrid:
    """Uniform knot grid for one country.

    ``knots`` holds the unreplicated grid knots (boundary replication for
    the clamped cubic basis is internal to evaluation).  ``n_basis`` is the
    number of B-spline basis functions, which exceeds the interval count
    by the cubic degree: n_basis = len(knots) - 1 + 3.
    """

    country_id: str
    t_start: float
    t_end: float
    knots: tuple
    n_basis: int

    @property
    def n_intervals(self) -> int:
        return len(self.knots) - 1

    def contains(self, t) -> bool:
        t = np.asarray(t, dtype=float)
        return bool(np.all((t >= self.t_start) & (t <= self.t_end)))

    def interval_index(self, t) -> np.ndarray:
        """Index of the inter-knot interval containing t (right-closed at the end)."""
        t = np.asarray(t, dtype=float)
        if not self.contains(t):
            raise ValueError(
                f"time outside grid span [{self.t_start}, {self.t_end}]"
            )
        idx = np.searchsorted(np.asarray(self.knots), t, side="right") - 1
        return np.clip(idx, 0, self.n_intervals - 1)

    def last_supported_basis(self, t) -> int:
        """Largest basis-function index with support at any of the times t."""
        return int(np.max(self.interval_index(t))) + DEGREE


def build_knot_grid(
    first_obs_year: float | None,
    horizon: float = DEFAULT_HORIZON,
    country_id: str = "",
) -> KnotGrid:
    """Construct the knot grid covering [min(1990, first obs), horizon].

    One knot lands exactly at ``horizon``; knots step backward by 2.5
    years, always extending at least one knot below the span start so
    early observations never sit on the grid boundary.

    Raises
    ------
    ValueError
        If ``horizon`` precedes 1990 or the first observation year.
    """
    if horizon < BASE_YEAR:
        raise ValueError(f"horizon {horizon} precedes {BASE_YEAR}")
    if first_obs_year is not None and first_obs_year > horizon:
        raise ValueError(
            f"first observation year {first_obs_year} is after horizon {horizon}"
        )
    span_start = BASE_YEAR if first_obs_year is None else min(BASE_YEAR, first_obs_year)
    n_intervals = int(np.floor((horizon - span_start) / KNOT_SPACING + 1e-9)) + 1
    knots = tuple(horizon - KNOT_SPACING * k for k in range(n_intervals, -1, -1))
    return KnotGrid(
        country_id=country_id,
        t_start=knots[0],
        t_end=horizon,
        knots=knots,
        n_basis=n_intervals + DEGREE,
    )


class SplineBasis:
    """Clamped cubic B-spline basis over a :class:`KnotGrid`.

    Basis values are non-negative, sum to one everywhere on the span, and
    each function is supported on at most four adjacent intervals.
    """

    def __init__(self, grid: KnotGrid):
        self.grid = grid
        inner = np.asarray(grid.knots, dtype=float)
        self._knot_vector = np.concatenate(
            [np.repeat(inner[0], DEGREE), inner, np.repeat(inner[-1], DEGREE)]
        )

    def design_matrix(self, ts) -> np.ndarray:
        """Dense (len(ts), n_basis) matrix of basis values."""
        ts = np.atleast_1d(np.asarray(ts, dtype=float))
        if not self.grid.contains(ts):
            raise ValueError(
                f"time outside grid span [{self.grid.t_start}, {self.grid.t_end}]"
            )
        dm = BSpline.design_matrix(ts, self._knot_vector, DEGREE)
        return np.asarray(dm.todense())

    def eval(self, t: float) -> np.ndarray:
        """Vector of the n_basis basis values at time t."""
        return self.design_matrix([float(t)])[0]


def eval_basis(grid: KnotGrid, t: float) -> np.ndarray:
    """Evaluate all basis functions of ``grid`` at a single time."""
    return SplineBasis(grid).eval(t)


def first_difference_matrix(n_coef: int) -> np.ndarray:
    """(n_coef-1, n_coef) matrix taking adjacent differences a[k+1] - a[k]."""
    if n_coef < 2:
        raise ValueError("need at least 2 coefficients")
    d = np.zeros((n_coef - 1, n_coef))
    idx = np.arange(n_coef - 1)
    d[idx, idx] = -1.0
    d[idx, idx + 1] = 1.0
    return d


@dataclass(frozen=True)
class DifferenceTransform:
    """Least-norm right inverse of the first-difference matrix.

    ``matrix`` has shape (n_coef, n_coef - 1); applying first differences
    to ``matrix @ eps`` recovers ``eps``, and its columns sum to zero so
    the mean of the reconstructed coefficients is carried entirely by the
    intercept.
    """

    n_coef: int
    matrix: np.ndarray


def difference_transform(n_coef: int) -> DifferenceTransform:
    """Build the transform D'(DD')^-1 for ``n_coef`` spline coefficients.

    The symmetric tridiagonal system (DD') X = D is solved with a banded
    Cholesky solver, O(n_coef) per column.
    """
    if n_coef < 2:
        raise ValueError("difference transform requires at least 2 coefficients")
    d = first_difference_matrix(n_coef)
    q = n_coef - 1
    if q == 1:
        solved = d / 2.0  # DD' = [[2]]
    else:
        # DD' is tridiagonal with 2 on the diagonal and -1 off it.
        ab = np.zeros((2, q))
        ab[0, 1:] = -1.0
        ab[1, :] = 2.0
        solved = solveh_banded(ab, d)  # (q, n_coef), rows solve (DD') x = D[:, j]
    return DifferenceTransform(n_coef=n_coef, matrix=solved.T)


def coefficients_from(
    lam: float, eps: np.ndarray, transform: DifferenceTransform
) -> np.ndarray:
    """Spline coefficients from intercept ``lam`` and differences ``eps``.

    The result has first differences exactly equal to ``eps`` and mean
    exactly ``lam``.
    """
    eps = np.asarray(eps, dtype=float)
    if eps.shape != (transform.n_coef - 1,):
        raise ValueError(
            f"eps has length {eps.shape}, expected {transform.n_coef - 1}"
        )
    return lam + transform.matrix @ eps
