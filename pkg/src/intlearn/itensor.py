"""Integer tensor core.

Tensors are plain ``numpy.int64`` arrays.  Every arithmetic helper here is
checked: a result that does not fit in a signed 64-bit integer raises
:class:`IntegerOverflowError` instead of wrapping around.

Overflow checks are done with an a-priori magnitude bound computed in Python
integers.  When the bound does not prove safety the operation is redone in
exact arbitrary precision (``object`` dtype) and the result is range-checked.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

INT64_MIN = -(2**63)
INT64_MAX = 2**63 - 1

IntTensor = np.ndarray


class IntegerOverflowError(OverflowError):
    pass


class InvalidDivisorError(ValueError):
    pass


def as_int(x) -> IntTensor:
    """Return ``x`` as an int64 array; rejects any non-integer dtype."""
    arr = np.asarray(x)
    if arr.dtype == object:
        return _from_exact(arr)
    if not np.issubdtype(arr.dtype, np.integer):
        raise TypeError(f"integer tensor required, got dtype {arr.dtype}")
    if arr.dtype == np.uint64 and arr.size and int(arr.max()) > INT64_MAX:
        raise IntegerOverflowError("uint64 value does not fit in int64")
    return arr.astype(np.int64, copy=False)


def max_abs(x) -> int:
    """Largest magnitude in ``x`` as a Python int (0 for empty tensors)."""
    arr = np.asarray(x)
    if arr.size == 0:
        return 0
    return max(abs(int(arr.max())), abs(int(arr.min())))


def _from_exact(arr: np.ndarray) -> IntTensor:
    arr = np.asarray(arr, dtype=object)
    if arr.size:
        hi, lo = int(arr.max()), int(arr.min())
        if hi > INT64_MAX or lo < INT64_MIN:
            raise IntegerOverflowError(f"value range [{lo}, {hi}] exceeds int64")
    return arr.astype(np.int64)


def _exact(arr: np.ndarray) -> np.ndarray:
    return np.asarray(arr).astype(object)


def intdiv(numerator, divisor: int):
    """Integer division truncating toward zero.

    Works on Python ints and on integer tensors; ``intdiv(-7, 2) == -3``.
    """
    divisor = int(divisor)
    if divisor <= 0:
        raise InvalidDivisorError(f"divisor must be >= 1, got {divisor}")
    if isinstance(numerator, (int, np.integer)):
        n = int(numerator)
        q = abs(n) // divisor
        return -q if n < 0 else q
    n = as_int(numerator)
    if n.size and int(n.min()) == INT64_MIN:
        raise IntegerOverflowError("cannot negate INT64_MIN")
    return np.where(n < 0, -((-n) // divisor), n // divisor)


def add(a, b) -> IntTensor:
    a, b = as_int(a), as_int(b)
    if max_abs(a) + max_abs(b) <= INT64_MAX:
        return a + b
    return _from_exact(_exact(a) + _exact(b))


def sub(a, b) -> IntTensor:
    a, b = as_int(a), as_int(b)
    if max_abs(a) + max_abs(b) <= INT64_MAX:
        return a - b
    return _from_exact(_exact(a) - _exact(b))


def mul(a, b) -> IntTensor:
    a, b = as_int(a), as_int(b)
    if max_abs(a) * max_abs(b) <= INT64_MAX:
        return a * b
    return _from_exact(_exact(a) * _exact(b))


def matmul(a, b) -> IntTensor:
    """Exact integer matrix product ``a @ b`` with overflow checking."""
    a, b = as_int(a), as_int(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"inner dimensions differ: {a.shape} x {b.shape}")
    k = a.shape[1]
    # bound on every partial sum, not only on the final result
    if max_abs(a) * max_abs(b) * k <= INT64_MAX:
        # numpy has no BLAS path for int64; einsum's loop copes far better
        # with transposed operands than the generic matmul kernel
        return np.einsum("ik,kj->ij", a, b)
    return _from_exact(_exact(a) @ _exact(b))


def reduce_sum_axis0(t) -> IntTensor:
    t = as_int(t)
    if t.ndim < 1:
        raise ValueError("reduce_sum_axis0 needs rank >= 1")
    if max_abs(t) * max(t.shape[0], 1) <= INT64_MAX:
        return t.sum(axis=0)
    return _from_exact(_exact(t).sum(axis=0))


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def im2col(x: IntTensor, kernel: int, stride: int, padding: int) -> IntTensor:
    """Unfold ``[N, C, H, W]`` into patch rows ``[N*H'*W', C*K*K]``.

    Column order is (channel, kernel row, kernel col), matching a
    ``[F, C, K, K]`` kernel reshaped to ``[F, C*K*K]``.
    """
    n, c, h, w = x.shape
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    windows = sliding_window_view(x, (kernel, kernel), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride]  # N, C, H', W', K, K
    ho, wo = windows.shape[2], windows.shape[3]
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kernel * kernel)
    return np.ascontiguousarray(cols)


def col2im(cols: IntTensor, input_shape, kernel: int, stride: int, padding: int) -> IntTensor:
    """Adjoint of :func:`im2col`: scatter-add patch rows back onto the input grid."""
    n, c, h, w = input_shape
    ho = conv_output_size(h, kernel, stride, padding)
    wo = conv_output_size(w, kernel, stride, padding)
    patches = as_int(cols).reshape(n, ho, wo, c, kernel, kernel)
    if max_abs(patches) * kernel * kernel > INT64_MAX:
        raise IntegerOverflowError("col2im accumulation may overflow int64")
    out = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=np.int64)
    for i in range(kernel):
        for j in range(kernel):
            out[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += (
                patches[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            )
    if padding:
        out = out[:, :, padding:padding + h, padding:padding + w]
    return np.ascontiguousarray(out)


def conv2d(x, kernels, stride: int = 1, padding: int = 0) -> IntTensor:
    """Integer cross-correlation of ``[N, C, H, W]`` with ``[F, C, K, K]`` kernels."""
    x, kernels = as_int(x), as_int(kernels)
    if x.ndim != 4 or kernels.ndim != 4:
        raise ValueError(f"conv2d expects 4-D tensors, got {x.shape} and {kernels.shape}")
    n, c, h, w = x.shape
    f, kc, kh, kw = kernels.shape
    if kc != c:
        raise ValueError(f"channel mismatch: input has {c}, kernels expect {kc}")
    if kh != kw:
        raise ValueError("only square kernels are supported")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise ValueError("kernel larger than padded input")
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(w, kw, stride, padding)
    cols = im2col(x, kh, stride, padding)
    out = matmul(cols, kernels.reshape(f, -1).T)
    return np.ascontiguousarray(out.reshape(n, ho, wo, f).transpose(0, 3, 1, 2))
