"""Zernike convolution.

With both the patch function and the kernel expanded in the orthonormal
basis, their integral over the disk is the dot product of coefficient
vectors.  The unknown kernel orientation on each tangent plane is covered
by ``s`` rotated copies of the kernel, later max-pooled or, in directional
mode, kept as an extra axis.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, ShapeError, StateError
from .zernike import TWO_PI, rotation_matrix


def bank_rotations(k, s):
    """Rotation matrices for offsets ``2*pi*t/s``, shape (s, k, k)."""
    if s < 1:
        raise DomainError("angular resolution s must be >= 1")
    return np.stack([rotation_matrix(k, TWO_PI * t / s) for t in range(s)])


@dataclass(eq=False)
class KernelBank:
    """Trainable kernel coefficients and their rotated copies.

    Attributes
    ----------
    base : ndarray, shape (k, d_in, d_out)
    s : int
    bias : ndarray, shape (d_out,)
    """

    base: np.ndarray
    s: int
    bias: np.ndarray = None
    rotations: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.base = np.asarray(self.base, dtype=float)
        if self.base.ndim != 3:
            raise ShapeError("kernel base must be k x d_in x d_out")
        if self.bias is None:
            self.bias = np.zeros(self.base.shape[2])
        self.bias = np.asarray(self.bias, dtype=float)
        if self.bias.shape != (self.base.shape[2],):
            raise ShapeError("bias must have one entry per output channel")
        self.rotations = bank_rotations(self.base.shape[0], self.s)

    @property
    def k(self):
        return self.base.shape[0]

    @property
    def d_in(self):
        return self.base.shape[1]

    @property
    def d_out(self):
        return self.base.shape[2]

    @property
    def bank(self):
        """Rotated copies, shape (k, d_in, d_out, s); slice 0 is ``base``."""
        out = np.einsum("tij,jco->icot", self.rotations[1:], self.base)
        return np.concatenate([self.base[..., None], out], axis=3)

    def fold_gradient(self, grad_bank):
        """Pull a gradient on :attr:`bank` back onto :attr:`base`."""
        return np.einsum("tji,jcot->ico", self.rotations, grad_bank)


def make_kernel_bank(base, s, bias=None):
    return KernelBank(base, s, bias)


@dataclass(frozen=True, eq=False)
class ConvResponse:
    """Responses ``data[p, o, t]`` of output channel ``o`` at rotation ``t``."""

    data: np.ndarray
    argmax: np.ndarray = None


def _as_tensor(F):
    # ndarray.data is a buffer, so only unwrap container objects
    if not isinstance(F, np.ndarray) and hasattr(F, "data"):
        F = F.data
    return np.asarray(F, dtype=float)


def zer_conv_forward(F, bank):
    """``response[p, o, t] = sum_{i,c} F[p, i, c] * bank[i, c, o, t] + bias[o]``."""
    F = _as_tensor(F)
    if F.ndim != 3 or F.shape[1:] != (bank.k, bank.d_in):
        raise ShapeError(f"F of shape {F.shape} does not match kernel k={bank.k}, d_in={bank.d_in}")
    data = np.einsum("pic,icot->pot", F, bank.bank, optimize=True)
    return ConvResponse(data + bank.bias[None, :, None])


def angular_max_pool(response):
    """Max over the rotation axis; ties resolve to the smallest rotation index.

    Returns
    -------
    pooled : ndarray, shape (N, d_out)
    ConvResponse
        The input response with ``argmax`` filled in.
    """
    data = _as_tensor(response)
    argmax = np.argmax(data, axis=-1)
    pooled = np.take_along_axis(data, argmax[..., None], axis=-1)[..., 0]
    return pooled, ConvResponse(data, argmax)


def angular_max_pool_backward(grad_pooled, argmax, s):
    """Route pooled gradients to the winning rotation slots."""
    grad = np.zeros(grad_pooled.shape + (s,))
    np.put_along_axis(grad, argmax[..., None], grad_pooled[..., None], axis=-1)
    return grad


def directional_conv_forward(F_dir, bank):
    """Direction-preserving convolution.

    ``out[p, t, o] = sum_{i,c} F_dir[p, t, i, c] * bank[i, c, o, t] + bias[o]``:
    direction channel ``t`` of the input meets the kernel rotated by
    ``2*pi*t/s``.
    """
    F_dir = np.asarray(F_dir, dtype=float)
    if F_dir.ndim != 4 or F_dir.shape[1] != bank.s:
        raise ShapeError(f"direction axis of F_dir {F_dir.shape} must equal s={bank.s}")
    if F_dir.shape[2:] != (bank.k, bank.d_in):
        raise ShapeError(f"F_dir of shape {F_dir.shape} does not match k={bank.k}, d_in={bank.d_in}")
    return _directional_matmul(F_dir, bank.bank) + bank.bias


def _per_rotation(F_dir, bank):
    """Stack (s, N, k*d_in) inputs and (s, k*d_in, d_out) kernels."""
    N, s, k, c = F_dir.shape
    Ft = np.moveaxis(F_dir, 1, 0).reshape(s, N, k * c)
    Bt = np.moveaxis(bank, 3, 0).reshape(s, k * c, bank.shape[2])
    return Ft, Bt


def _directional_matmul(F_dir, bank):
    # batched matmul over t; plain einsum here drops to an unblocked loop
    Ft, Bt = _per_rotation(F_dir, bank)
    return np.moveaxis(Ft @ Bt, 0, 1)


class ZerConvOp:
    """Differentiable convolution on precomputed coefficients.

    Input is ``F`` of shape (N, k, d_in), or (N, s, k, d_in) when
    ``directional_input``.  Output is the pooled (N, d_out) response, or
    (N, s, d_out) when ``pool`` is off.
    """

    def __init__(self, bank, directional_input=False, pool=True):
        self.bank = bank
        self.directional_input = directional_input
        self.pool = pool
        self._cache = None
        self.grad_base = None
        self.grad_bias = None

    def forward(self, F):
        F = _as_tensor(F)
        if self.directional_input:
            resp = directional_conv_forward(F, self.bank)  # N, s, d_out
        else:
            resp = np.moveaxis(zer_conv_forward(F, self.bank).data, 2, 1)
        argmax = None
        out = resp
        if self.pool:
            argmax = np.argmax(resp, axis=1)
            out = np.take_along_axis(resp, argmax[:, None, :], axis=1)[:, 0, :]
        self._cache = (F, argmax)
        return out

    def backward(self, grad_out):
        if self._cache is None:
            raise StateError("backward called before forward")
        F, argmax = self._cache
        s = self.bank.s
        if self.pool:
            grad_resp = np.zeros(grad_out.shape[:1] + (s,) + grad_out.shape[1:])
            np.put_along_axis(grad_resp, argmax[:, None, :], grad_out[:, None, :], axis=1)
        else:
            grad_resp = np.asarray(grad_out, dtype=float)
        bank = self.bank.bank
        if self.directional_input:
            Ft, Bt = _per_rotation(F, bank)
            Gt = np.moveaxis(grad_resp, 1, 0)  # s, N, d_out
            k, c, o, s_ = bank.shape
            grad_bank = np.moveaxis((Ft.transpose(0, 2, 1) @ Gt).reshape(s_, k, c, o), 0, 3)
            grad_F = np.moveaxis((Gt @ Bt.transpose(0, 2, 1)).reshape(s_, -1, k, c), 0, 1)
        else:
            grad_bank = np.einsum("pic,pto->icot", F, grad_resp, optimize=True)
            grad_F = np.einsum("pto,icot->pic", grad_resp, bank, optimize=True)
        self.grad_base = self.bank.fold_gradient(grad_bank)
        self.grad_bias = grad_resp.sum(axis=(0, 1))
        return grad_F


def backward(layer, upstream):
    """Gradients ``(grad_F, grad_base, grad_bias)`` of a :class:`ZerConvOp`."""
    grad_F = layer.backward(upstream)
    return grad_F, layer.grad_base, layer.grad_bias
