"""2-D convolution, its transpose, and the kernel-gradient op.

The three maps are mutually adjoint and bilinear, so each one's backward rule
is written in terms of the other two; gradients of gradients come for free.
Cross-correlation semantics, zero padding, kernels laid out
[C_out, C_in, kh, kw]. Inputs may carry a leading batch axis.
"""

from __future__ import annotations

import numpy as np

from .engine import EngineError, Tensor, _record


def _out_dim(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def conv_output_shape(hw: tuple[int, int], k: tuple[int, int], stride: int, pad: int):
    return (_out_dim(hw[0], k[0], stride, pad), _out_dim(hw[1], k[1], stride, pad))


def tconv_output_shape(hw: tuple[int, int], k: tuple[int, int], stride: int, pad: int):
    return (
        stride * (hw[0] - 1) + k[0] - 2 * pad,
        stride * (hw[1] - 1) + k[1] - 2 * pad,
    )


def _pad_hw(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    spec = [(0, 0)] * (x.ndim - 2) + [(pad, pad), (pad, pad)]
    return np.pad(x, spec)


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    """x: [N,C,H,W] -> [N*H'*W', C*kh*kw] patch matrix."""
    xp = _pad_hw(x, pad)
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]  # [N,C,H',W',kh,kw]
    n, c, ho, wo = win.shape[:4]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    return np.ascontiguousarray(cols)


def _conv_forward(x: np.ndarray, k: np.ndarray, stride: int, pad: int) -> np.ndarray:
    """x: [N,C,H,W], k: [O,C,kh,kw] -> [N,O,H',W'] via one GEMM."""
    n, c, h, w = x.shape
    o, _, kh, kw = k.shape
    ho, wo = _out_dim(h, kh, stride, pad), _out_dim(w, kw, stride, pad)
    cols = _im2col(x, kh, kw, stride, pad)
    out = cols @ k.reshape(o, c * kh * kw).T  # [N*H'*W', O]
    return np.ascontiguousarray(out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2))


def _conv_input_grad(g: np.ndarray, k: np.ndarray, stride: int, pad: int, hw) -> np.ndarray:
    """Adjoint of _conv_forward in its first argument. g: [N,O,H',W'] -> [N,C,H,W]."""
    n, o, ho, wo = g.shape
    _, c, kh, kw = k.shape
    h, w = hw
    gt = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(n * ho * wo, o)
    cols = gt @ k.reshape(o, c * kh * kw)  # [N*H'*W', C*kh*kw]
    # scatter columns back to (possibly overlapping) input positions
    patches = np.ascontiguousarray(
        cols.reshape(n, ho, wo, c, kh, kw).transpose(4, 5, 0, 3, 1, 2)
    )  # [kh,kw,N,C,H',W']
    gxp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=g.dtype)
    for i in range(kh):
        for j in range(kw):
            gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += patches[i, j]
    if pad == 0:
        return gxp
    return gxp[:, :, pad : pad + h, pad : pad + w]


def _conv_kernel_grad(
    x: np.ndarray, g: np.ndarray, stride: int, pad: int, k_hw
) -> np.ndarray:
    """Adjoint of _conv_forward in its second argument -> [O,C,kh,kw]."""
    kh, kw = k_hw
    n, o, ho, wo = g.shape
    c = x.shape[1]
    cols = _im2col(x, kh, kw, stride, pad)
    gt = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(n * ho * wo, o)
    return (gt.T @ cols).reshape(o, c, kh, kw)


def _check_image(t: Tensor, what: str) -> bool:
    if t.ndim == 3:
        return False
    if t.ndim == 4:
        return True
    raise EngineError(f"{what} must be [C,H,W] or [N,C,H,W], got {t.shape}")


def _norm_in(x: Tensor):
    batched = _check_image(x, "conv input")
    data = x.data if batched else x.data[None]
    return data, batched


def conv2d(x: Tensor, kernels: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation with zero padding; kernels must have odd extent."""
    if kernels.ndim != 4:
        raise EngineError("kernels must be [C_out,C_in,kh,kw]")
    kh, kw = kernels.shape[2], kernels.shape[3]
    if kh % 2 == 0 or kw % 2 == 0:
        raise EngineError(f"conv2d kernel extent must be odd, got {kh}x{kw}")
    return _conv2d_raw(x, kernels, stride, pad)


def _conv2d_raw(x: Tensor, kernels: Tensor, stride: int, pad: int) -> Tensor:
    data, batched = _norm_in(x)
    c_in = data.shape[1]
    if kernels.shape[1] != c_in:
        raise EngineError(
            f"conv2d channel mismatch: input {c_in}, kernels expect {kernels.shape[1]}"
        )
    hw = data.shape[2:]
    ho, wo = conv_output_shape(hw, kernels.shape[2:], stride, pad)
    if ho < 1 or wo < 1:
        raise EngineError(f"conv2d output dims not positive: {(ho, wo)}")
    out_data = _conv_forward(data, kernels.data, stride, pad)
    out = Tensor(out_data if batched else out_data[0])

    def dx(g):
        return _tconv_raw(g, kernels, stride, pad, out_hw=hw)

    def dk(g):
        return conv2d_kernel_grad(x, g, stride, pad, kernels.shape[2:])

    return _record(out, (x, kernels), (dx, dk))


def conv2d_transpose(x: Tensor, kernels: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Exact adjoint of conv2d with the same geometry.

    x lives in conv2d's output space [C_out,H',W']; the result lives in its
    input space [C_in,H,W] with H = stride*(H'-1)+kh-2*pad.
    """
    if kernels.ndim != 4:
        raise EngineError("kernels must be [C_out,C_in,kh,kw]")
    return _tconv_raw(x, kernels, stride, pad, out_hw=None)


def _tconv_raw(x: Tensor, kernels: Tensor, stride: int, pad: int, out_hw) -> Tensor:
    data, batched = _norm_in(x)
    if kernels.shape[0] != data.shape[1]:
        raise EngineError(
            f"conv2d_transpose channel mismatch: input {data.shape[1]}, "
            f"kernels expect {kernels.shape[0]}"
        )
    kh, kw = kernels.shape[2], kernels.shape[3]
    if out_hw is None:
        out_hw = tconv_output_shape(data.shape[2:], (kh, kw), stride, pad)
    if out_hw[0] < 1 or out_hw[1] < 1:
        raise EngineError(f"conv2d_transpose output dims not positive: {out_hw}")
    back = conv_output_shape(out_hw, (kh, kw), stride, pad)
    if back != tuple(data.shape[2:]):
        raise EngineError(
            f"conv2d_transpose geometry inconsistent: input {tuple(data.shape[2:])} "
            f"does not match conv output {back} for image {out_hw}"
        )
    out_data = _conv_input_grad(data, kernels.data, stride, pad, out_hw)
    out = Tensor(out_data if batched else out_data[0])
    in_hw = tuple(data.shape[2:])

    def dx(g):
        return _conv2d_raw(g, kernels, stride, pad)

    def dk(g):
        return conv2d_kernel_grad(g, x, stride, pad, (kh, kw))

    return _record(out, (x, kernels), (dx, dk))


def conv2d_kernel_grad(
    x: Tensor, g: Tensor, stride: int, pad: int, k_hw: tuple[int, int]
) -> Tensor:
    """Gradient of conv2d w.r.t. kernels, as a differentiable op.

    x is the conv input, g the cotangent in output space; both may be batched
    (jointly) and the batch axis is summed out.
    """
    x_data, xb = _norm_in(x)
    g_data, gb = _norm_in(g)
    if xb != gb or x_data.shape[0] != g_data.shape[0]:
        raise EngineError("conv2d_kernel_grad batch mismatch")
    out = Tensor(_conv_kernel_grad(x_data, g_data, stride, pad, k_hw))
    out_hw = tuple(x_data.shape[2:])

    def dx(gg):
        return _tconv_raw(g, gg, stride, pad, out_hw=out_hw)

    def dg(gg):
        return _conv2d_raw(x, gg, stride, pad)

    return _record(out, (x, g), (dx, dg))
