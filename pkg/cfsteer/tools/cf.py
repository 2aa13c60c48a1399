"""Characteristic functions of the distribution catalog and their numerical inversion.

All inversions run on a trapezoid grid in standardized frequency
tau = t * sd, with sd the standard deviation of the variable being
inverted. The Gil-Pelaez and density integrands are even in t, so
integrating [0, T] with the trapezoid rule loses nothing to the endpoint
at zero.
"""
import logging
import threading
from typing import Optional, Tuple, Union

import numpy as np
from scipy import stats

from ..shared_libraries.constants import QUADRATURE_DEFAULTS, TAIL_CUTOFF_SIGMAS
from ..shared_libraries.errors import DegenerateDistribution
from ..shared_libraries.models import DistFamily, LinComboCF, QuadratureSpec, ScalarDist
from .quadrature import standardized_upper, trapezoid_grid

logger = logging.getLogger(__name__)

ArrayLike = Union[float, np.ndarray]

# Number of negative density values clamped to zero
_diagnostics_lock = threading.Lock()
INVERSION_DIAGNOSTICS = {'clamped_pdf': 0}


def reset_diagnostics():
    with _diagnostics_lock:
        INVERSION_DIAGNOSTICS['clamped_pdf'] = 0


# ---------------------------------------------------------------------------
# Closed forms per family
# ---------------------------------------------------------------------------

def cf_eval(dist: ScalarDist, t: ArrayLike) -> Union[complex, np.ndarray]:
    """E[exp(i t w)] in closed form.

    Args:
        dist (ScalarDist): the distribution
        t (ArrayLike): frequency or array of frequencies

    Returns:
        complex or np.ndarray: characteristic function values
    """
    s = np.asarray(t, dtype=float)
    if dist.family == DistFamily.GAUSSIAN:
        out = np.exp(1j * dist.loc * s - 0.5 * dist.spread * s * s)
    elif dist.family == DistFamily.LAPLACE:
        out = np.exp(1j * dist.loc * s) / (1.0 + (dist.spread * s) ** 2)
    else:
        out = np.zeros(s.shape, dtype=complex)
        for w, mu, var in zip(dist.weights, dist.means, dist.variances):
            out = out + w * np.exp(1j * mu * s - 0.5 * var * s * s)
    return complex(out) if out.ndim == 0 else out


def cf_derivative(dist: ScalarDist, t: ArrayLike) -> Union[complex, np.ndarray]:
    """d/dt of the characteristic function."""
    s = np.asarray(t, dtype=float)
    if dist.family == DistFamily.GAUSSIAN:
        out = (1j * dist.loc - dist.spread * s) * np.exp(1j * dist.loc * s - 0.5 * dist.spread * s * s)
    elif dist.family == DistFamily.LAPLACE:
        b2 = dist.spread ** 2
        denom = 1.0 + b2 * s * s
        out = np.exp(1j * dist.loc * s) * (1j * dist.loc / denom - 2.0 * b2 * s / denom ** 2)
    else:
        out = np.zeros(s.shape, dtype=complex)
        for w, mu, var in zip(dist.weights, dist.means, dist.variances):
            out = out + w * (1j * mu - var * s) * np.exp(1j * mu * s - 0.5 * var * s * s)
    return complex(out) if out.ndim == 0 else out


def envelope(dist: ScalarDist, t: ArrayLike) -> ArrayLike:
    """Upper bound on |cf(t)| that is nonincreasing in |t|."""
    s = np.asarray(t, dtype=float)
    if dist.family == DistFamily.GAUSSIAN:
        return np.exp(-0.5 * dist.spread * s * s)
    if dist.family == DistFamily.LAPLACE:
        return 1.0 / (1.0 + (dist.spread * s) ** 2)
    out = np.zeros(s.shape)
    for w, var in zip(dist.weights, dist.variances):
        out = out + w * np.exp(-0.5 * var * s * s)
    return out


def pdf(dist: ScalarDist, z: ArrayLike) -> ArrayLike:
    """Closed-form density."""
    if dist.family == DistFamily.GAUSSIAN:
        if dist.spread == 0:
            raise DegenerateDistribution(dist.loc)
        return stats.norm.pdf(z, loc=dist.loc, scale=np.sqrt(dist.spread))
    if dist.family == DistFamily.LAPLACE:
        return stats.laplace.pdf(z, loc=dist.loc, scale=dist.spread)
    if any(v == 0 for v in dist.variances):
        raise DegenerateDistribution(dist.mean())
    return sum(w * stats.norm.pdf(z, loc=mu, scale=np.sqrt(var))
               for w, mu, var in zip(dist.weights, dist.means, dist.variances))


def cdf(dist: ScalarDist, z: ArrayLike) -> ArrayLike:
    """Closed-form cumulative distribution function."""
    if dist.family == DistFamily.GAUSSIAN:
        if dist.spread == 0:
            return np.where(np.asarray(z) >= dist.loc, 1.0, 0.0)
        return stats.norm.cdf(z, loc=dist.loc, scale=np.sqrt(dist.spread))
    if dist.family == DistFamily.LAPLACE:
        return stats.laplace.cdf(z, loc=dist.loc, scale=dist.spread)
    total = 0.0
    for w, mu, var in zip(dist.weights, dist.means, dist.variances):
        if var == 0:
            total = total + w * np.where(np.asarray(z) >= mu, 1.0, 0.0)
        else:
            total = total + w * stats.norm.cdf(z, loc=mu, scale=np.sqrt(var))
    return total


def sample(dist: ScalarDist, rng: np.random.Generator, size: Optional[int] = None) -> ArrayLike:
    """Draw from the distribution.

    Gaussian draws use the standard normal transform, Laplace draws invert
    the cdf, and mixtures pick a component first.

    Args:
        dist (ScalarDist): the distribution
        rng (np.random.Generator): seeded stream owned by the caller
        size (int, optional): number of draws; a scalar when omitted

    Returns:
        float or np.ndarray: the draws
    """
    n = 1 if size is None else size
    if dist.family == DistFamily.GAUSSIAN:
        out = dist.loc + np.sqrt(dist.spread) * rng.standard_normal(n)
    elif dist.family == DistFamily.LAPLACE:
        u = rng.random(n) - 0.5
        out = dist.loc - dist.spread * np.sign(u) * np.log1p(-2.0 * np.abs(u))
    else:
        labels = rng.choice(len(dist.weights), size=n, p=np.asarray(dist.weights))
        z = rng.standard_normal(n)
        out = np.asarray(dist.means)[labels] + np.sqrt(np.asarray(dist.variances))[labels] * z
    return float(out[0]) if size is None else out


# ---------------------------------------------------------------------------
# Linear combinations of independent components
# ---------------------------------------------------------------------------

def _active(lc: LinComboCF):
    return [(c, d) for c, d in zip(lc.coefficients, lc.components) if c != 0.0]


def lincombo_cf_eval(lc: LinComboCF, t: ArrayLike) -> Union[complex, np.ndarray]:
    """exp(i t g) * prod_i cf_i(c_i t); zero coefficients contribute exactly 1."""
    s = np.asarray(t, dtype=float)
    out = np.exp(1j * lc.offset * s)
    for c, dist in _active(lc):
        out = out * cf_eval(dist, c * s)
    return complex(out) if np.ndim(out) == 0 else out


def lincombo_envelope(lc: LinComboCF, t: float) -> float:
    bound = 1.0
    for c, dist in _active(lc):
        bound *= float(envelope(dist, c * t))
    return bound


def _grid(q: QuadratureSpec, sd: float, *envelopes) -> Tuple[np.ndarray, np.ndarray]:
    """Trapezoid grid in raw frequency for a variable of standard deviation sd."""
    upper = standardized_upper(q, lambda tau: max(env(tau / sd) for env in envelopes))
    tau, weights = trapezoid_grid(upper, q.nodes_per_unit, q.max_nodes)
    return tau / sd, weights / sd


def product_terms(lc: LinComboCF, t: np.ndarray):
    """Per-component CF values and the product of the others for each one."""
    active = [(i, c, d) for i, (c, d) in enumerate(zip(lc.coefficients, lc.components)) if c != 0.0]
    factors = np.ones((len(active), t.shape[0]), dtype=complex)
    for row, (_, c, dist) in enumerate(active):
        factors[row] = cf_eval(dist, c * t)
    prefix = np.ones_like(factors)
    suffix = np.ones_like(factors)
    for row in range(1, len(active)):
        prefix[row] = prefix[row - 1] * factors[row - 1]
    for row in range(len(active) - 2, -1, -1):
        suffix[row] = suffix[row + 1] * factors[row + 1]
    full = prefix[-1] * factors[-1] if active else np.ones(t.shape[0], dtype=complex)
    return active, full, prefix * suffix


def _check_invertible(lc: LinComboCF) -> float:
    if lc.is_degenerate():
        raise DegenerateDistribution(lc.mean())
    return lc.std()


def gil_pelaez_cdf(lc: LinComboCF, y: float, q: Optional[QuadratureSpec] = None) -> float:
    """P(lc <= y) from the characteristic function.

    Evaluates 1/2 - (1/pi) int_0^T Im[exp(-i t y) cf(t)] / t dt with the
    removable singularity at t = 0 replaced by its limit, mean - y.

    Args:
        lc (LinComboCF): the variable
        y (float): evaluation point
        q (QuadratureSpec, optional): quadrature settings

    Returns:
        float: cdf value clamped to [0, 1]

    Raises:
        DegenerateDistribution: the variable is almost surely constant
    """
    return cdf_with_gradient(lc, y, q, need_gradient=False)[0]


def cdf_with_gradient(lc: LinComboCF, y: float, q: Optional[QuadratureSpec] = None,
                      need_gradient: bool = True) -> Tuple[float, np.ndarray, float]:
    """Gil-Pelaez cdf and its sensitivities.

    Returns:
        Tuple[float, np.ndarray, float]: (cdf, d cdf / d coefficients, density at y);
        the derivative with respect to the offset is minus the density
    """
    q = q or QuadratureSpec()
    sd = _check_invertible(lc)
    mean = lc.mean()
    grad = np.zeros(lc.coefficients.shape[0])
    standardized = (y - mean) / sd
    if standardized > TAIL_CUTOFF_SIGMAS:
        return 1.0, grad, 0.0
    if standardized < -TAIL_CUTOFF_SIGMAS:
        return 0.0, grad, 0.0

    t, w = _grid(q, sd, lambda s: lincombo_envelope(lc, s))
    phase = np.exp(1j * t * (lc.offset - y))
    active, full, others = product_terms(lc, t)
    shifted = phase * full
    integrand = np.empty(t.shape[0])
    integrand[1:] = shifted[1:].imag / t[1:]
    integrand[0] = mean - y
    value = 0.5 - np.dot(w, integrand) / np.pi
    density = max(float(np.dot(w, shifted.real) / np.pi), 0.0)

    if need_gradient:
        for row, (i, c, dist) in enumerate(active):
            d_factor = cf_derivative(dist, c * t)
            grad[i] = -np.dot(w, (phase * d_factor * others[row]).imag) / np.pi
    return float(min(max(value, 0.0), 1.0)), grad, density


def invert_pdf(lc: LinComboCF, z: ArrayLike, q: Optional[QuadratureSpec] = None) -> ArrayLike:
    """Density of lc at z by Fourier inversion of its characteristic function.

    Uses Hermitian symmetry: (1/pi) int_0^T Re[exp(-i t z) cf(t)] dt. Small
    negative values from quadrature error are clamped to zero and counted in
    INVERSION_DIAGNOSTICS.

    Raises:
        DegenerateDistribution: the variable is almost surely constant
    """
    q = q or QuadratureSpec()
    sd = _check_invertible(lc)
    mean = lc.mean()
    zs = np.atleast_1d(np.asarray(z, dtype=float))
    t, w = _grid(q, sd, lambda s: lincombo_envelope(lc, s))
    centered = lincombo_cf_eval(lc, t) * np.exp(-1j * t * mean)
    out = np.zeros(zs.shape[0])
    far = np.abs(zs - mean) > TAIL_CUTOFF_SIGMAS * sd
    block = max(1, QUADRATURE_DEFAULTS['chunk_elements'] // t.shape[0])
    idx = np.flatnonzero(~far)
    for start in range(0, idx.shape[0], block):
        sel = idx[start:start + block]
        phase = np.exp(-1j * np.outer(zs[sel] - mean, t))
        out[sel] = (phase * centered).real @ w / np.pi
    negative = out < 0
    if np.any(negative):
        with _diagnostics_lock:
            INVERSION_DIAGNOSTICS['clamped_pdf'] += int(negative.sum())
        logger.debug(f"Clamped {int(negative.sum())} negative density values "
                     f"(min {out[negative].min():.3e})")
        out[negative] = 0.0
    return float(out[0]) if np.ndim(z) == 0 else out
