"""Real Zernike polynomials on the unit disk.

Bases are addressed either by ``(n, m)`` or by a 1-based linear index ``j``
ordered by radial order ``n`` ascending and azimuthal frequency ``m``
ascending within each order::

    j:      1       2        3       4        5       6      ...
    (n,m):  (0,0)   (1,-1)   (1,1)   (2,-2)   (2,0)   (2,2)  ...

Even bases (``m >= 0``) carry ``cos(m theta)``, odd bases (``m < 0``) carry
``sin(|m| theta)``.  The normalized basis integrates to one in square over
the disk, so a function expressed in it has Parseval-exact coefficients.
"""

from dataclasses import dataclass
from functools import lru_cache
import math

import numpy as np

from .errors import DomainError

MAX_ORDER = 20
TWO_PI = 2.0 * np.pi
_R_TOL = 1e-12

_FACTORIAL = np.array([float(math.factorial(i)) for i in range(MAX_ORDER + 1)])


def wrap_angle(theta):
    """Map angles into ``[0, 2*pi)``."""
    # np.mod returns exactly 2*pi for tiny negative inputs
    wrapped = np.mod(theta, TWO_PI)
    wrapped = np.where(wrapped >= TWO_PI, 0.0, wrapped)
    return float(wrapped) if wrapped.ndim == 0 else wrapped


@dataclass(frozen=True)
class ZernikeIndex:
    n: int
    m: int

    def __post_init__(self):
        _check_nm(self.n, self.m)

    @property
    def j(self):
        return linear_index(self.n, self.m)

    @classmethod
    def from_j(cls, j):
        return cls(*from_linear_index(j))


@dataclass(frozen=True)
class DiskSample:
    """A point on the unit disk with a per-channel value."""

    r: float
    theta: float
    value: tuple = ()

    def __post_init__(self):
        if not -_R_TOL <= self.r <= 1.0 + _R_TOL:
            raise DomainError(f"r={self.r} outside [0, 1]")
        object.__setattr__(self, "r", min(max(float(self.r), 0.0), 1.0))
        object.__setattr__(self, "theta", wrap_angle(float(self.theta)))
        object.__setattr__(self, "value", tuple(float(v) for v in np.atleast_1d(self.value)))


def _check_nm(n, m):
    if n < 0 or abs(m) > n or (n - abs(m)) % 2:
        raise DomainError(f"invalid Zernike index (n={n}, m={m})")
    if n > MAX_ORDER:
        raise DomainError(f"radial order n={n} exceeds cap {MAX_ORDER}")


def linear_index(n, m):
    """1-based position of ``(n, m)`` in the basis ordering.

    >>> linear_index(3, 3)
    10
    """
    if n < 0 or abs(m) > n or (n - abs(m)) % 2:
        raise DomainError(f"invalid Zernike index (n={n}, m={m})")
    return n * (n + 1) // 2 + (m + n) // 2 + 1


def from_linear_index(j):
    """Inverse of :func:`linear_index`."""
    if j < 1:
        raise DomainError(f"linear index j={j} must be >= 1")
    n = (math.isqrt(8 * (j - 1) + 1) - 1) // 2
    m = 2 * (j - 1 - n * (n + 1) // 2) - n
    return n, m


def num_bases(order):
    """Number of bases with radial order ``<= order``."""
    return (order + 1) * (order + 2) // 2


@lru_cache(maxsize=None)
def index_table(k):
    """Arrays ``(n, m)`` of length ``k`` for the first ``k`` bases."""
    if k < 1:
        raise DomainError(f"k={k} must be >= 1")
    nm = [from_linear_index(j) for j in range(1, k + 1)]
    if nm[-1][0] > MAX_ORDER:
        raise DomainError(f"k={k} needs radial order {nm[-1][0]} > cap {MAX_ORDER}")
    n = np.array([a for a, _ in nm])
    m = np.array([b for _, b in nm])
    n.setflags(write=False)
    m.setflags(write=False)
    return n, m


def _check_r(r):
    r = np.asarray(r, dtype=float)
    if np.any(r < -_R_TOL) or np.any(r > 1.0 + _R_TOL) or np.any(~np.isfinite(r)):
        raise DomainError("radial coordinate outside [0, 1]")
    return np.clip(r, 0.0, 1.0)


def _radial(n, m, r):
    if (n - m) % 2:
        return np.zeros_like(r)
    out = np.zeros_like(r)
    half_sum, half_diff = (n + m) // 2, (n - m) // 2
    for s in range(half_diff + 1):
        c = (-1) ** s * _FACTORIAL[n - s] / (
            _FACTORIAL[s] * _FACTORIAL[half_sum - s] * _FACTORIAL[half_diff - s])
        out = out + c * r ** (n - 2 * s)
    return out


def radial_poly(n, m, r):
    """Zernike radial polynomial ``R_n^m(r)`` for ``0 <= m <= n``.

    Returns zero when ``n - m`` is odd.  Accepts scalar or array ``r``.
    """
    if m < 0 or m > n:
        raise DomainError(f"radial polynomial needs 0 <= m <= n, got n={n}, m={m}")
    if n > MAX_ORDER:
        raise DomainError(f"radial order n={n} exceeds cap {MAX_ORDER}")
    r = _check_r(r)
    out = _radial(n, m, r)
    return float(out) if out.ndim == 0 else out


def zernike(n, m, r, theta):
    """Unnormalized Zernike polynomial ``Z_n^m(r, theta)``."""
    _check_nm(n, m)
    r = _check_r(r)
    theta = np.asarray(theta, dtype=float)
    radial = _radial(n, abs(m), r)
    out = radial * (np.cos(m * theta) if m >= 0 else np.sin(-m * theta))
    return float(out) if out.ndim == 0 else out


def normalization(m):
    """Angular normalization factor ``sqrt((2 - delta_m0) / pi)``."""
    return math.sqrt((2.0 - (m == 0)) / math.pi)


def radial_normalization(n):
    """Radial factor ``sqrt(n + 1)``, since ``int R_n^m(r)^2 r dr = 1 / (2n + 2)``."""
    return math.sqrt(n + 1.0)


def normalized_zernike(j, r, theta):
    """Orthonormal basis ``Z_j`` addressed by linear index.

    Product of :func:`zernike` with :func:`normalization` and
    :func:`radial_normalization`; the angular factor alone leaves
    ``||Z_j||^2 = 1 / (n + 1)``.
    """
    n, m = from_linear_index(j)
    return zernike(n, m, r, theta) * normalization(m) * radial_normalization(n)


def basis_matrix(r, theta, k):
    """Evaluate the first ``k`` normalized bases at sample points.

    Parameters
    ----------
    r, theta : array_like, shape (n_samples,)
        Polar coordinates on the unit disk.
    k : int
        Number of bases.

    Returns
    -------
    ndarray, shape (n_samples, k)
        ``B[s, i] = Z_{i+1}(r_s, theta_s)``.
    """
    r = _check_r(np.atleast_1d(r))
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    if r.size == 0:
        raise DomainError("basis_matrix needs at least one sample")
    if r.shape != theta.shape:
        raise DomainError("r and theta must have the same shape")
    ns, ms = index_table(k)
    out = np.empty(r.shape + (k,))
    radial_cache = {}
    for i, (n, m) in enumerate(zip(ns, ms)):
        key = (int(n), abs(int(m)))
        if key not in radial_cache:
            radial_cache[key] = _radial(key[0], key[1], r)
        ang = np.cos(m * theta) if m >= 0 else np.sin(-m * theta)
        out[..., i] = radial_cache[key] * ang * (normalization(m) * radial_normalization(n))
    return out


def basis_matrix_from_samples(samples, k):
    """:func:`basis_matrix` over a list of :class:`DiskSample`."""
    if not samples:
        raise DomainError("basis_matrix needs at least one sample")
    r = np.array([s.r for s in samples])
    theta = np.array([s.theta for s in samples])
    return basis_matrix(r, theta, k)


@lru_cache(maxsize=None)
def _rotation_pairs(k):
    ns, ms = index_table(k)
    pairs = []
    for i, (n, m) in enumerate(zip(ns, ms)):
        if m > 0:
            partner = linear_index(int(n), -int(m)) - 1
            pairs.append((i, partner, int(m)))
    paired = {p for _, p, _ in pairs}
    for i, m in enumerate(ms):
        if m < 0 and i not in paired:
            raise DomainError(
                f"k={k} splits a (+m, -m) pair; rotation needs complete radial orders")
    return tuple(pairs)


def rotation_matrix(k, phi):
    """Block-orthogonal ``k x k`` matrix mapping coefficients of ``f`` to ``f(r, theta + phi)``."""
    rot = np.eye(k)
    for even, odd, m in _rotation_pairs(k):
        c, s = math.cos(m * phi), math.sin(m * phi)
        rot[even, even] = c
        rot[even, odd] = s
        rot[odd, even] = -s
        rot[odd, odd] = c
    return rot


def rotate_coefficients(alpha, phi):
    """Rotate coefficient vectors by ``phi``.

    ``alpha`` has the basis along axis 0; trailing axes (channels) are
    rotated together.  The result ``beta`` satisfies
    ``sum_i beta_i Z_i(r, theta) == sum_i alpha_i Z_i(r, theta + phi)``.
    """
    alpha = np.asarray(alpha, dtype=float)
    if alpha.ndim == 0 or not np.all(np.isfinite(alpha)):
        raise DomainError("coefficients must be a finite array with the basis on axis 0")
    phi = float(wrap_angle(phi))
    rot = rotation_matrix(alpha.shape[0], phi)
    return np.tensordot(rot, alpha, axes=(1, 0))


def disk_quadrature(n_r=400, n_theta=400):
    """Product quadrature nodes on the unit disk.

    Gauss-Legendre in ``r`` (area element ``r dr`` folded into the weights)
    and the periodic trapezoid rule in ``theta``.  Exact for polynomial
    times trigonometric integrands of moderate degree.

    Returns
    -------
    r, theta, w : ndarray, each of shape (n_r * n_theta,)
    """
    x, wx = np.polynomial.legendre.leggauss(n_r)
    r = 0.5 * (x + 1.0)
    wr = 0.5 * wx * r
    theta = TWO_PI * np.arange(n_theta) / n_theta
    wt = np.full(n_theta, TWO_PI / n_theta)
    rr, tt = np.meshgrid(r, theta, indexing="ij")
    w = np.outer(wr, wt)
    return rr.ravel(), tt.ravel(), w.ravel()


def gram_matrix(k, n_r=400, n_theta=400):
    """Quadrature Gram matrix of the first ``k`` normalized bases."""
    r, theta, w = disk_quadrature(n_r, n_theta)
    basis = basis_matrix(r, theta, k)
    return basis.T @ (basis * w[:, None])
