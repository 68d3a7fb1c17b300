"""Least-squares Zernike fits of patch samples.

Patch radii are mapped onto the unit disk by ``r / r0`` and each field
channel is fitted independently.  Fits use the singular value
decomposition of the basis matrix, so the solve never forms normal
equations and the numerical rank is available for free.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

from .errors import (DecompositionError, DomainError, InsufficientSamplesError,
                     RankDeficiencyError, ShapeError, ZernetError)
from .zernike import basis_matrix

FAILURE_FRACTION = 0.01


@dataclass(frozen=True, eq=False)
class PatchTensor:
    """Stacked coefficients ``data[p, i, c]`` of basis ``i``, channel ``c`` at vertex ``p``.

    ``failed`` lists vertices whose rows are zero because no fit was possible.
    """

    data: np.ndarray
    r0: float
    failed: tuple = field(default=())

    def __post_init__(self):
        data = np.asarray(self.data, dtype=float)
        if data.ndim != 3:
            raise ShapeError("patch tensor must be N x k x d")
        if not np.all(np.isfinite(data)):
            raise DomainError("patch tensor has non-finite entries")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "failed", tuple(int(v) for v in self.failed))

    @property
    def shape(self):
        return self.data.shape

    @property
    def N(self):
        return self.data.shape[0]

    @property
    def k(self):
        return self.data.shape[1]

    @property
    def d(self):
        return self.data.shape[2]


def _normalized_basis(patch, k):
    if len(patch) < k:
        raise InsufficientSamplesError(
            f"vertex {patch.center}: {len(patch)} samples < k={k}; densify first")
    rho = np.clip(patch.r / patch.r0, 0.0, 1.0)
    return basis_matrix(rho, patch.theta, k)


def _svd_pinv(basis, k, ridge):
    u, sv, vt = np.linalg.svd(basis, full_matrices=False)
    tol = sv[0] * max(basis.shape) * np.finfo(float).eps if sv.size else 0.0
    rank = int((sv > tol).sum())
    if rank < k:
        if not ridge:
            raise RankDeficiencyError(rank, k)
        lam = 1e-8 * sv[0]
        inv = sv / (sv ** 2 + lam ** 2)
    else:
        inv = 1.0 / sv
    return (vt.T * inv) @ u.T


def fit_operator(patch, k, ridge=False):
    """Matrix ``P`` (k x n_samples) with ``alpha = P @ values``.

    Raises
    ------
    InsufficientSamplesError
        Fewer samples than ``k``.
    RankDeficiencyError
        Numerical rank below ``k`` and ``ridge`` is off.
    """
    return _svd_pinv(_normalized_basis(patch, k), k, ridge)


def decompose(patch, values, k, ridge=False):
    """Fit ``k`` Zernike coefficients per channel to sampled values.

    Parameters
    ----------
    patch : GeodesicPatch
    values : array_like, shape (n_samples,) or (n_samples, d)
    k : int
    ridge : bool
        Fall back to Tikhonov regularization (``1e-8`` times the largest
        singular value) instead of raising on rank deficiency.

    Returns
    -------
    alpha : ndarray, shape (k, d)
    residual : ndarray, shape (d,)
        Euclidean norm of ``B @ alpha - values`` per channel.
    """
    if k < 1:
        raise DomainError("k must be >= 1")
    values = np.asarray(values, dtype=float)
    if values.ndim == 1:
        values = values[:, None]
    if values.shape[0] != len(patch):
        raise ShapeError(f"{values.shape[0]} values for {len(patch)} samples")
    basis = _normalized_basis(patch, k)
    alpha = _svd_pinv(basis, k, ridge) @ values
    residual = np.linalg.norm(basis @ alpha - values, axis=0)
    return alpha, residual


def reconstruct(alpha, r, theta):
    """Evaluate ``sum_i alpha_i Z_i(r, theta)`` on the unit disk.

    ``alpha`` may carry trailing channel axes; the result then has shape
    ``r.shape + alpha.shape[1:]``.
    """
    alpha = np.asarray(alpha, dtype=float)
    scalar = np.ndim(r) == 0
    basis = basis_matrix(np.atleast_1d(r), np.atleast_1d(theta), alpha.shape[0])
    out = np.tensordot(basis, alpha, axes=(1, 0))
    return out[0] if scalar else out


def field_to_patch_tensor(mesh, patches, field, k, ridge=False):
    """Decompose a per-vertex field over every vertex patch.

    Parameters
    ----------
    patches : sequence of GeodesicPatch or None
        One entry per vertex; ``None`` marks a vertex without a patch.
    field : array_like, shape (n_vertices, d)

    Raises
    ------
    DecompositionError
        More than 1% of vertices failed.
    """
    field = np.asarray(field, dtype=float)
    if field.ndim == 1:
        field = field[:, None]
    if len(patches) != mesh.n_vertices or field.shape[0] != mesh.n_vertices:
        raise ShapeError("need one patch and one field row per vertex")
    r0 = _common_r0(patches)
    data = np.zeros((mesh.n_vertices, k, field.shape[1]))
    failed = []
    for p, patch in enumerate(patches):
        if patch is None:
            failed.append(p)
            continue
        try:
            data[p], _ = decompose(patch, patch.field_values(field), k, ridge)
        except (ZernetError, np.linalg.LinAlgError):
            failed.append(p)
    _check_failures(failed, mesh.n_vertices)
    return PatchTensor(data, r0, tuple(failed))


def _common_r0(patches):
    radii = {p.r0 for p in patches if p is not None}
    if len(radii) > 1:
        raise DomainError(f"patches mix radii {sorted(radii)}")
    return radii.pop() if radii else float("nan")


def _check_failures(failed, total):
    if len(failed) > FAILURE_FRACTION * total:
        raise DecompositionError(failed, total)


@dataclass(frozen=True, eq=False)
class DecompositionOperator:
    """Linear map from vertex fields to patch coefficients.

    ``matrix`` has shape ``(N * k, N)``; row ``p * k + i`` yields coefficient
    ``i`` at vertex ``p``.  Applying it equals :func:`field_to_patch_tensor`.
    """

    matrix: sparse.csr_matrix
    k: int
    r0: float
    failed: tuple = ()

    @property
    def n_vertices(self):
        return self.matrix.shape[1]

    def apply(self, values):
        """``(N, d)`` or ``(N, ..., d)`` vertex values to ``(N, k, ..., d)`` coefficients."""
        values = np.asarray(values, dtype=float)
        if values.shape[0] != self.n_vertices:
            raise ShapeError(f"field has {values.shape[0]} rows, operator expects {self.n_vertices}")
        flat = values.reshape(values.shape[0], -1)
        out = self.matrix @ flat
        return out.reshape((self.n_vertices, self.k) + values.shape[1:])

    def apply_transpose(self, grad):
        """Adjoint of :meth:`apply` (used for backpropagation)."""
        grad = np.asarray(grad, dtype=float)
        flat = grad.reshape(self.n_vertices * self.k, -1)
        out = self.matrix.T @ flat
        return out.reshape((self.n_vertices,) + grad.shape[2:])


def decomposition_operator(patches, n_vertices, k, ridge=False):
    """Assemble the sparse :class:`DecompositionOperator` for a patch set."""
    if len(patches) != n_vertices:
        raise ShapeError("need one patch per vertex")
    rows, cols, vals = [], [], []
    failed = []
    for p, patch in enumerate(patches):
        if patch is None:
            failed.append(p)
            continue
        try:
            pinv = fit_operator(patch, k, ridge)
        except (ZernetError, np.linalg.LinAlgError):
            failed.append(p)
            continue
        interp = patch.interpolation_matrix(n_vertices).tocoo()
        block = sparse.csr_matrix(pinv) @ interp
        block = block.tocoo()
        rows.append(block.row + p * k)
        cols.append(block.col)
        vals.append(block.data)
    _check_failures(failed, n_vertices)
    if rows:
        rows, cols, vals = np.concatenate(rows), np.concatenate(cols), np.concatenate(vals)
    matrix = sparse.csr_matrix((vals, (rows, cols)), shape=(n_vertices * k, n_vertices))
    return DecompositionOperator(matrix, k, _common_r0(patches), tuple(failed))
