"""Layer forward/backward implementations.

Convolutions are valid (no padding) and run through im2col + GEMM, chunked
over the batch to bound scratch memory. Large-kernel 2D convolutions (the
dense-prediction head) take an FFT path in forward-only mode. All layers
cache activations only when ``train=True``; backward consumes and clears
the cache.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

# Scratch buffer cap for im2col chunks; keeps peak memory bounded on small
# machines without hurting GEMM efficiency much.
CHUNK_BYTES = 256 * 1024 * 1024

# FFT dispatch thresholds, measured on desk-scale shapes. Training always
# benefits above a small kernel area because the forward-pass input spectrum
# is reused by backward; at eval, small (e.g. 3x3) kernels are faster via
# im2col+GEMM, and the kernel-spectrum cache cannot amortize across the many
# distinct padded sizes seen during augmented scoring.
FFT_MIN_KERNEL_AREA = 9  # train-mode threshold
FFT_EVAL_MIN_KERNEL_AREA = 25  # eval-mode threshold
FFT_MIN_POSITIONS = 36


def _fft_wins(kernel_area: int, oh: int, ow: int, train: bool) -> bool:
    if oh * ow < FFT_MIN_POSITIONS:
        return False
    return kernel_area >= (FFT_MIN_KERNEL_AREA if train else FFT_EVAL_MIN_KERNEL_AREA)


class ShapeMismatch(Exception):
    pass


class StaleCache(Exception):
    pass


class Layer:
    """Base layer: parameter dicts plus forward/backward."""

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.cache = None

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        raise NotImplementedError

    def backward(self, dout: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def spec(self) -> dict:
        raise NotImplementedError

    def state_arrays(self) -> dict[str, np.ndarray]:
        """All persistent arrays (learnable params + running statistics)."""
        return dict(self.params)

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        for name, arr in arrays.items():
            dst = self.state_arrays()[name]
            if dst.shape != arr.shape:
                raise ShapeMismatch(f"{name}: expected {dst.shape}, got {arr.shape}")
            dst[...] = arr

    def _take_cache(self):
        if self.cache is None:
            raise StaleCache(f"{type(self).__name__}: backward without train-mode forward")
        cache, self.cache = self.cache, None
        return cache


def _rows_per_chunk(row_bytes: int, n_rows: int) -> int:
    return max(1, min(n_rows, CHUNK_BYTES // max(1, row_bytes)))


class Conv2D(Layer):
    """Valid 2D convolution (cross-correlation); x: (N, C, H, W)."""

    def __init__(self, in_channels, filters, kernel, dtype=np.float32):
        super().__init__()
        self.in_channels = in_channels
        self.filters = filters
        self.kh, self.kw = kernel
        self.dtype = dtype
        self.params = {
            "W": np.zeros((filters, in_channels, self.kh, self.kw), dtype=dtype),
            "b": np.zeros(filters, dtype=dtype),
        }

    def spec(self):
        return {
            "kind": "conv2d",
            "in_channels": self.in_channels,
            "filters": self.filters,
            "kernel": [self.kh, self.kw],
        }

    def out_shape(self, h, w):
        return h - self.kh + 1, w - self.kw + 1

    def _check_input(self, x):
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise ShapeMismatch(
                f"conv2d expects (N,{self.in_channels},H,W), got {x.shape}"
            )
        if x.shape[2] < self.kh or x.shape[3] < self.kw:
            raise ShapeMismatch(f"conv2d input {x.shape} smaller than kernel")

    def forward(self, x, train=False):
        self._check_input(x)
        # strided crops make both im2col and FFT input transforms pathological
        x = np.ascontiguousarray(x)
        W, b = self.params["W"], self.params["b"]
        n, _, h, w = x.shape
        oh, ow = self.out_shape(h, w)
        if _fft_wins(self.kh * self.kw, oh, ow, train):
            # the identity-keyed kernel cache is only safe in eval mode:
            # gradient checking perturbs W in place
            spec = _spectrum(x, *_fft_sizes(h, w)) if train else None
            out = _conv2d_fft(self, x, W, use_cache=not train, spec=spec) + b.reshape(
                1, -1, 1, 1
            )
            if train:
                self.cache = ("fft", x.shape, spec)
            return out
        # direct path: channels-last im2col and one wide GEMM. Building the
        # columns channels-last keeps every copy contiguous over C; the
        # straight channels-first gather runs an order of magnitude slower.
        cin = self.in_channels
        if self.kh == self.kw == 1:  # pointwise: a plain channel GEMM
            res = W.reshape(self.filters, cin) @ x.reshape(n, cin, -1)
            out = res.reshape(n, self.filters, oh, ow) + b.reshape(1, -1, 1, 1)
            if train:
                self.cache = x
            return out
        xcl = np.ascontiguousarray(x.transpose(0, 2, 3, 1))  # (n, H, W, C)
        wmat = np.ascontiguousarray(
            W.transpose(2, 3, 1, 0).reshape(self.kh * self.kw * cin, self.filters)
        )
        out = np.empty((n, self.filters, oh, ow), dtype=x.dtype)
        step = _rows_per_chunk(oh * ow * cin * self.kh * self.kw * x.itemsize, n)
        for i in range(0, n, step):
            m = min(step, n - i)
            cols = np.empty((m, oh, ow, self.kh, self.kw, cin), dtype=x.dtype)
            for dy in range(self.kh):
                for dx in range(self.kw):
                    cols[:, :, :, dy, dx] = xcl[i : i + m, dy : dy + oh, dx : dx + ow]
            res = cols.reshape(-1, wmat.shape[0]) @ wmat
            out[i : i + m] = res.reshape(m, oh, ow, self.filters).transpose(0, 3, 1, 2)
        out += b.reshape(1, -1, 1, 1)
        if train:
            self.cache = x
        return out

    def backward(self, dout):
        cached = self._take_cache()
        W = self.params["W"]
        if isinstance(cached, tuple) and cached[0] == "fft":
            _, xshape, spec = cached
            n, _, h, w = xshape
            oh, ow = self.out_shape(h, w)
            if dout.shape != (n, self.filters, oh, ow):
                raise ShapeMismatch(
                    f"conv2d grad shape {dout.shape} != {(n, self.filters, oh, ow)}"
                )
            dW, dx = _conv2d_fft_backward(spec, xshape, dout, W)
            self.grads["W"] = dW
            self.grads["b"] = dout.sum(axis=(0, 2, 3))
            return dx
        x = cached
        n, _, h, w = x.shape
        oh, ow = self.out_shape(h, w)
        if dout.shape != (n, self.filters, oh, ow):
            raise ShapeMismatch(f"conv2d grad shape {dout.shape} != {(n, self.filters, oh, ow)}")
        dW = np.zeros_like(W)
        row_bytes = oh * ow * self.in_channels * self.kh * self.kw * x.itemsize
        step = _rows_per_chunk(row_bytes, n)
        for i in range(0, n, step):
            cols = _im2col2d(x[i : i + step], self.kh, self.kw)
            dflt = dout[i : i + step].transpose(0, 2, 3, 1).reshape(-1, self.filters)
            dW += (dflt.T @ cols.reshape(-1, cols.shape[-1])).reshape(dW.shape)
        self.grads["W"] = dW
        self.grads["b"] = dout.sum(axis=(0, 2, 3))
        # dx: full correlation of dout with the flipped kernel
        dpad = np.pad(
            dout, ((0, 0), (0, 0), (self.kh - 1,) * 2, (self.kw - 1,) * 2)
        )
        wflip = W[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(self.in_channels, -1).T
        dx = np.empty_like(x)
        row_bytes = h * w * self.filters * self.kh * self.kw * x.itemsize
        step = _rows_per_chunk(row_bytes, n)
        for i in range(0, n, step):
            cols = _im2col2d(dpad[i : i + step], self.kh, self.kw)
            res = cols.reshape(-1, cols.shape[-1]) @ wflip
            dx[i : i + step] = res.reshape(-1, h, w, self.in_channels).transpose(0, 3, 1, 2)
        return dx


class Conv3D(Layer):
    """Valid 3D convolution; x: (N, C, Z, H, W); kernel given as (ky, kx, kz)."""

    def __init__(self, in_channels, filters, kernel, dtype=np.float32):
        super().__init__()
        self.in_channels = in_channels
        self.filters = filters
        self.ky, self.kx, self.kz = kernel
        self.dtype = dtype
        self.params = {
            "W": np.zeros(
                (filters, in_channels, self.kz, self.ky, self.kx), dtype=dtype
            ),
            "b": np.zeros(filters, dtype=dtype),
        }

    def spec(self):
        return {
            "kind": "conv3d",
            "in_channels": self.in_channels,
            "filters": self.filters,
            "kernel": [self.ky, self.kx, self.kz],
        }

    def out_shape(self, z, h, w):
        return z - self.kz + 1, h - self.ky + 1, w - self.kx + 1

    def _check_input(self, x):
        if x.ndim != 5 or x.shape[1] != self.in_channels:
            raise ShapeMismatch(
                f"conv3d expects (N,{self.in_channels},Z,H,W), got {x.shape}"
            )
        if x.shape[2] < self.kz or x.shape[3] < self.ky or x.shape[4] < self.kx:
            raise ShapeMismatch(f"conv3d input {x.shape} smaller than kernel")

    def forward(self, x, train=False):
        self._check_input(x)
        # strided crops make both im2col and FFT input transforms pathological
        x = np.ascontiguousarray(x)
        W, b = self.params["W"], self.params["b"]
        n = x.shape[0]
        oz, oh, ow = self.out_shape(*x.shape[2:])
        if _fft_wins(self.ky * self.kx, oh, ow, train):
            return self._forward_fft(x, W, b, n, oz, oh, ow, train=train)
        # direct path: channels-last im2col and one wide GEMM; see the 2D
        # analogue above
        cin = self.in_channels
        kvol = cin * self.kz * self.ky * self.kx
        xcl = np.ascontiguousarray(x.transpose(0, 2, 3, 4, 1))  # (n, Z, H, W, C)
        wmat = np.ascontiguousarray(
            W.transpose(2, 3, 4, 1, 0).reshape(kvol, self.filters)
        )
        out = np.empty((n, self.filters, oz, oh, ow), dtype=x.dtype)
        step = _rows_per_chunk(oz * oh * ow * kvol * x.itemsize, n)
        for i in range(0, n, step):
            m = min(step, n - i)
            cols = np.empty(
                (m, oz, oh, ow, self.kz, self.ky, self.kx, cin), dtype=x.dtype
            )
            for dz in range(self.kz):
                for dy in range(self.ky):
                    for dx in range(self.kx):
                        cols[:, :, :, :, dz, dy, dx] = xcl[
                            i : i + m, dz : dz + oz, dy : dy + oh, dx : dx + ow
                        ]
            res = cols.reshape(-1, kvol) @ wmat
            out[i : i + m] = res.reshape(m, oz, oh, ow, self.filters).transpose(
                0, 4, 1, 2, 3
            )
        out += b.reshape(1, -1, 1, 1, 1)
        if train:
            self.cache = x
        return out

    def _forward_fft(self, x, W, b, n, oz, oh, ow, train=False):
        """3D correlation as a 2D FFT correlation: the kz depth taps are
        unfolded into input channels (an expansion of only kz, versus the
        full kernel volume for im2col), valid depth positions become batch
        entries, and the shared 2D path does the in-plane work."""
        h, w = x.shape[3], x.shape[4]
        v = sliding_window_view(x, self.kz, axis=2)  # (N, C, OZ, H, W, kz)
        xz = np.ascontiguousarray(v.transpose(0, 2, 1, 5, 3, 4)).reshape(
            n * oz, self.in_channels * self.kz, h, w
        )
        cache = getattr(self, "_w2d_cache", None)
        if cache is None or cache[0] is not W:
            w2d = W.reshape(self.filters, self.in_channels * self.kz, self.ky, self.kx)
            self._w2d_cache = (W, w2d)
        w2d = self._w2d_cache[1]
        spec = _spectrum(xz, *_fft_sizes(h, w)) if train else None
        out2d = _conv2d_fft(self, xz, w2d, use_cache=not train, spec=spec) + b.reshape(
            1, -1, 1, 1
        )
        if train:
            self.cache = ("fft", x.shape, xz.shape, spec)
        return out2d.reshape(n, oz, self.filters, oh, ow).transpose(0, 2, 1, 3, 4)

    def _backward_fft(self, cached, dout, W):
        """Gradients through the same z-unfold used by _forward_fft: with
        depth taps as channels the 2D FFT backward yields dW directly and
        a per-(depth-position, tap) input gradient that folds back into
        dx by overlap-add over the kz shifts."""
        _, xshape, xzshape, spec = cached
        n, c, z, h, w = xshape
        oz, oh, ow = self.out_shape(z, h, w)
        if dout.shape != (n, self.filters, oz, oh, ow):
            raise ShapeMismatch(
                f"conv3d grad shape {dout.shape} != {(n, self.filters, oz, oh, ow)}"
            )
        w2d = W.reshape(self.filters, c * self.kz, self.ky, self.kx)
        d2 = np.ascontiguousarray(dout.transpose(0, 2, 1, 3, 4)).reshape(
            n * oz, self.filters, oh, ow
        )
        dw2d, dxz = _conv2d_fft_backward(spec, xzshape, d2, w2d)
        self.grads["W"] = dw2d.reshape(W.shape)
        self.grads["b"] = dout.sum(axis=(0, 2, 3, 4))
        dxz = dxz.reshape(n, oz, c, self.kz, h, w)
        dx = np.zeros((n, c, z, h, w), dtype=dxz.dtype)
        for zk in range(self.kz):
            dx[:, :, zk : zk + oz] += dxz[:, :, :, zk].transpose(0, 2, 1, 3, 4)
        return dx

    def backward(self, dout):
        cached = self._take_cache()
        W = self.params["W"]
        if isinstance(cached, tuple) and cached[0] == "fft":
            return self._backward_fft(cached, dout, W)
        x = cached
        n = x.shape[0]
        oz, oh, ow = self.out_shape(*x.shape[2:])
        if dout.shape != (n, self.filters, oz, oh, ow):
            raise ShapeMismatch(
                f"conv3d grad shape {dout.shape} != {(n, self.filters, oz, oh, ow)}"
            )
        kvol = self.in_channels * self.kz * self.ky * self.kx
        dW = np.zeros_like(W)
        row_bytes = oz * oh * ow * kvol * x.itemsize
        step = _rows_per_chunk(row_bytes, n)
        for i in range(0, n, step):
            cols = _im2col3d(x[i : i + step], self.kz, self.ky, self.kx)
            dflt = dout[i : i + step].transpose(0, 2, 3, 4, 1).reshape(-1, self.filters)
            dW += (dflt.T @ cols.reshape(-1, kvol)).reshape(dW.shape)
        self.grads["W"] = dW
        self.grads["b"] = dout.sum(axis=(0, 2, 3, 4))
        dpad = np.pad(
            dout,
            (
                (0, 0),
                (0, 0),
                (self.kz - 1,) * 2,
                (self.ky - 1,) * 2,
                (self.kx - 1,) * 2,
            ),
        )
        wflip = (
            W[:, :, ::-1, ::-1, ::-1]
            .transpose(1, 0, 2, 3, 4)
            .reshape(self.in_channels, -1)
            .T
        )
        dx = np.empty_like(x)
        z, h, w = x.shape[2:]
        row_bytes = z * h * w * self.filters * self.kz * self.ky * self.kx * x.itemsize
        step = _rows_per_chunk(row_bytes, n)
        for i in range(0, n, step):
            cols = _im2col3d(dpad[i : i + step], self.kz, self.ky, self.kx)
            res = cols.reshape(-1, cols.shape[-1]) @ wflip
            dx[i : i + step] = res.reshape(-1, z, h, w, self.in_channels).transpose(
                0, 4, 1, 2, 3
            )
        return dx


def _im2col2d(x, kh, kw):
    # (N, C, H, W) -> (N, OH, OW, C*kh*kw), copying once
    v = sliding_window_view(x, (kh, kw), axis=(2, 3))  # (N, C, OH, OW, kh, kw)
    n, c, oh, ow = v.shape[:4]
    return np.ascontiguousarray(v.transpose(0, 2, 3, 1, 4, 5)).reshape(
        n, oh, ow, c * kh * kw
    )


def _im2col3d(x, kz, ky, kx):
    v = sliding_window_view(x, (kz, ky, kx), axis=(2, 3, 4))
    n, c, oz, oh, ow = v.shape[:5]
    return np.ascontiguousarray(v.transpose(0, 2, 3, 4, 1, 5, 6, 7)).reshape(
        n, oz, oh, ow, c * kz * ky * kx
    )


def _fft_sizes(h, w):
    """FFT sizes covering (h, w), rounded up to even first so inputs
    differing by one pixel (the dense shift-and-stitch passes) share one
    FFT size and one cached kernel FFT."""
    from scipy import fft as sfft

    return (
        sfft.next_fast_len((h + 1) // 2 * 2),
        sfft.next_fast_len((w + 1) // 2 * 2),
    )


def _spectrum(a, fh, fw):
    """rfft2 of (N, C, H, W) repacked as a contiguous (lf, N, C) stack of
    per-frequency matrices; batched complex matmul only runs at BLAS
    speed on contiguous operands."""
    from scipy import fft as sfft

    n, c = a.shape[0], a.shape[1]
    af = sfft.rfft2(a, s=(fh, fw))
    fh2, fw2 = af.shape[-2], af.shape[-1]
    am = np.ascontiguousarray(af.reshape(n, c, fh2 * fw2).transpose(2, 0, 1))
    return am, fh2, fw2


def _conv2d_fft(layer, x, W, use_cache=True, spec=None):
    """Valid cross-correlation via FFT; used for 3x3-and-larger kernels.
    The kernel-side FFT is cached on the layer in eval mode only: the
    cache is keyed on W's identity, which training updates change but
    in-place gradient-check perturbations do not."""
    from scipy import fft as sfft

    n, c, h, w = x.shape
    f, _, kh, kw = W.shape
    oh, ow = h - kh + 1, w - kw + 1
    fh, fw = _fft_sizes(h, w)
    wm = None
    if use_cache:
        cache = getattr(layer, "_fft_w_cache", None)
        if cache is None or cache[0] is not W:
            cache = (W, {})
            layer._fft_w_cache = cache
        wm = cache[1].get((fh, fw))
    if wm is None:
        wf = sfft.rfft2(W[:, :, ::-1, ::-1], s=(fh, fw))  # (F, C, fh, fw2)
        lf = wf.shape[-2] * wf.shape[-1]
        wm = np.ascontiguousarray(
            wf.reshape(f, c, lf).transpose(2, 1, 0)
        )  # (lf, C, F)
        if use_cache:
            cache[1][(fh, fw)] = wm
    if spec is not None:
        xm, fh2, fw2 = spec
        of = np.matmul(xm, wm)  # (lf, N, F)
        of = np.ascontiguousarray(of.transpose(1, 2, 0)).reshape(n, f, fh2, fw2)
        full = sfft.irfft2(of, s=(fh, fw))
        # return the strided crop; the caller's bias add materializes it
        return full[:, :, kh - 1 : kh - 1 + oh, kw - 1 : kw - 1 + ow]
    # eval: no spectrum is kept for backward, so chunk the batch to bound
    # the complex scratch (spectra are 8-16x the input bytes)
    out = np.empty((n, f, oh, ow), dtype=x.dtype)
    row_bytes = fh * (fw // 2 + 1) * c * 16
    step = _rows_per_chunk(row_bytes, n)
    for i in range(0, n, step):
        xm, fh2, fw2 = _spectrum(x[i : i + step], fh, fw)
        of = np.matmul(xm, wm)  # (lf, m, F)
        m = of.shape[1]
        off = np.ascontiguousarray(of.transpose(1, 2, 0)).reshape(m, f, fh2, fw2)
        full = sfft.irfft2(off, s=(fh, fw))
        out[i : i + m] = full[:, :, kh - 1 : kh - 1 + oh, kw - 1 : kw - 1 + ow]
    return out


def _conv2d_fft_backward(spec, xshape, dout, W):
    """FFT form of the conv2d weight and input gradients, reusing the
    input spectrum cached by the forward pass.

    dW is the valid correlation of x with dout (spectrum X * conj(D)),
    dx is the full convolution of dout with the unflipped kernel
    (spectrum D * W). The FFT sizes cover h, so neither circular product
    wraps. All batched matmuls run on contiguous operands.
    """
    from scipy import fft as sfft

    n, c, h, w = xshape
    f, _, kh, kw = W.shape
    fh, fw = _fft_sizes(h, w)
    xm, fh2, fw2 = spec
    lf = fh2 * fw2
    dm, _, _ = _spectrum(dout, fh, fw)  # (lf, N, F)
    dmh = np.empty((lf, f, n), dtype=dm.dtype)
    np.conjugate(dm.transpose(0, 2, 1), out=dmh)
    # dW: sum over the batch of per-frequency outer products
    gm = np.matmul(dmh, xm)  # (lf, F, C)
    gf = np.ascontiguousarray(gm.transpose(1, 2, 0)).reshape(f, c, fh2, fw2)
    dW = sfft.irfft2(gf, s=(fh, fw))[:, :, :kh, :kw]
    # dx
    wf = sfft.rfft2(W, s=(fh, fw))
    wm = np.ascontiguousarray(wf.reshape(f, c, lf).transpose(2, 0, 1))  # (lf,F,C)
    dxm = np.matmul(dm, wm)  # (lf, N, C)
    dxf = np.ascontiguousarray(dxm.transpose(1, 2, 0)).reshape(n, c, fh2, fw2)
    dx = sfft.irfft2(dxf, s=(fh, fw))[:, :, :h, :w]
    return (
        np.ascontiguousarray(dW).astype(W.dtype, copy=False),
        np.ascontiguousarray(dx).astype(dm.real.dtype, copy=False),
    )


class MaxPool2D(Layer):
    def __init__(self, size, stride):
        super().__init__()
        self.kh, self.kw = size
        self.sh, self.sw = (stride, stride) if np.isscalar(stride) else stride

    def spec(self):
        return {"kind": "maxpool2d", "size": [self.kh, self.kw], "stride": [self.sh, self.sw]}

    def forward(self, x, train=False):
        n, c, h, w = x.shape
        v = sliding_window_view(x, (self.kh, self.kw), axis=(2, 3))[
            :, :, :: self.sh, :: self.sw
        ]  # (N, C, OH, OW, kh, kw)
        oh, ow = v.shape[2], v.shape[3]
        flat = v.reshape(n, c, oh, ow, -1)
        idx = flat.argmax(axis=-1)
        out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
        if train:
            self.cache = (x.shape, idx)
        return np.ascontiguousarray(out)

    def backward(self, dout):
        x_shape, idx = self._take_cache()
        n, c, h, w = x_shape
        oh, ow = idx.shape[2], idx.shape[3]
        dx = np.zeros(x_shape, dtype=dout.dtype)
        u, v = np.divmod(idx, self.kw)
        oy = np.arange(oh).reshape(1, 1, -1, 1) * self.sh
        ox = np.arange(ow).reshape(1, 1, 1, -1) * self.sw
        ys = (oy + u).reshape(n, c, -1)
        xs = (ox + v).reshape(n, c, -1)
        ni = np.arange(n).reshape(-1, 1, 1)
        ci = np.arange(c).reshape(1, -1, 1)
        np.add.at(dx, (ni, ci, ys, xs), dout.reshape(n, c, -1))
        return dx


class MaxPool3D(Layer):
    """Pool size given as (ky, kx, kz); x: (N, C, Z, H, W)."""

    def __init__(self, size, stride=None):
        super().__init__()
        self.ky, self.kx, self.kz = size
        self.sy, self.sx, self.sz = size if stride is None else stride

    def spec(self):
        return {
            "kind": "maxpool3d",
            "size": [self.ky, self.kx, self.kz],
            "stride": [self.sy, self.sx, self.sz],
        }

    def forward(self, x, train=False):
        n, c = x.shape[:2]
        v = sliding_window_view(x, (self.kz, self.ky, self.kx), axis=(2, 3, 4))[
            :, :, :: self.sz, :: self.sy, :: self.sx
        ]  # (N, C, OZ, OH, OW, kz, ky, kx)
        oz, oh, ow = v.shape[2:5]
        flat = v.reshape(n, c, oz, oh, ow, -1)
        idx = flat.argmax(axis=-1)
        out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
        if train:
            self.cache = (x.shape, idx)
        return np.ascontiguousarray(out)

    def backward(self, dout):
        x_shape, idx = self._take_cache()
        n, c = x_shape[:2]
        oz, oh, ow = idx.shape[2:]
        dx = np.zeros(x_shape, dtype=dout.dtype)
        w, rem = np.divmod(idx, self.ky * self.kx)
        u, v = np.divmod(rem, self.kx)
        ozg = np.arange(oz).reshape(1, 1, -1, 1, 1) * self.sz
        oyg = np.arange(oh).reshape(1, 1, 1, -1, 1) * self.sy
        oxg = np.arange(ow).reshape(1, 1, 1, 1, -1) * self.sx
        zs = (ozg + w).reshape(n, c, -1)
        ys = (oyg + u).reshape(n, c, -1)
        xs = (oxg + v).reshape(n, c, -1)
        ni = np.arange(n).reshape(-1, 1, 1)
        ci = np.arange(c).reshape(1, -1, 1)
        np.add.at(dx, (ni, ci, zs, ys, xs), dout.reshape(n, c, -1))
        return dx


class Dense(Layer):
    def __init__(self, in_features, out_features, dtype=np.float32):
        super().__init__()
        self.in_features = in_features
        self.out_features = out_features
        self.params = {
            "W": np.zeros((in_features, out_features), dtype=dtype),
            "b": np.zeros(out_features, dtype=dtype),
        }

    def spec(self):
        return {
            "kind": "dense",
            "in_features": self.in_features,
            "out_features": self.out_features,
        }

    def forward(self, x, train=False):
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise ShapeMismatch(f"dense expects (N,{self.in_features}), got {x.shape}")
        if train:
            self.cache = x
        return x @ self.params["W"] + self.params["b"]

    def backward(self, dout):
        x = self._take_cache()
        self.grads["W"] = x.T @ dout
        self.grads["b"] = dout.sum(axis=0)
        return dout @ self.params["W"].T


class Flatten(Layer):
    def spec(self):
        return {"kind": "flatten"}

    def forward(self, x, train=False):
        if train:
            self.cache = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, dout):
        return dout.reshape(self._take_cache())


class ReLU(Layer):
    def spec(self):
        return {"kind": "relu"}

    def forward(self, x, train=False):
        out = np.maximum(x, 0)
        if train:
            self.cache = out
        return out

    def backward(self, dout):
        out = self._take_cache()
        return dout * (out > 0)


class BatchNorm(Layer):
    """Per-feature normalization; features live on axis 1 (or the only axis
    beyond batch for 2D input). Running statistics are updated in train mode
    and used verbatim in eval mode."""

    def __init__(self, num_features, momentum=0.9, eps=1e-5, dtype=np.float32):
        super().__init__()
        self.num_features = num_features
        self.momentum = momentum
        self.eps = eps
        self.params = {
            "gamma": np.ones(num_features, dtype=dtype),
            "beta": np.zeros(num_features, dtype=dtype),
        }
        self.running_mean = np.zeros(num_features, dtype=dtype)
        self.running_var = np.ones(num_features, dtype=dtype)

    def spec(self):
        return {
            "kind": "batchnorm",
            "num_features": self.num_features,
            "momentum": self.momentum,
            "eps": self.eps,
        }

    def state_arrays(self):
        return {
            **self.params,
            "running_mean": self.running_mean,
            "running_var": self.running_var,
        }

    def _folded(self, x):
        # (N, C, *spatial) -> (N, C, M)
        if x.shape[1] != self.num_features:
            raise ShapeMismatch(
                f"batchnorm expects {self.num_features} features, got {x.shape}"
            )
        return x.reshape(x.shape[0], self.num_features, -1)

    def forward(self, x, train=False):
        if not train:
            # eval is a fixed per-feature affine map; apply it broadcast on
            # the original layout (folding would copy strided conv outputs)
            if x.shape[1] != self.num_features:
                raise ShapeMismatch(
                    f"batchnorm expects {self.num_features} features, got {x.shape}"
                )
            inv_std = 1.0 / np.sqrt(self.running_var + self.eps)
            scale = self.params["gamma"] * inv_std
            shift = self.params["beta"] - self.running_mean * scale
            bshape = (1, self.num_features) + (1,) * (x.ndim - 2)
            out = x * scale.reshape(bshape) + shift.reshape(bshape)
            return out.astype(x.dtype, copy=False)
        xf = self._folded(x)
        n, _, m = xf.shape
        if n * m < 2:
            raise ShapeMismatch("batchnorm needs >=2 samples per feature in train mode")
        mean = xf.mean(axis=(0, 2))
        var = xf.var(axis=(0, 2))
        self.running_mean = (
            self.momentum * self.running_mean + (1 - self.momentum) * mean
        ).astype(self.running_mean.dtype)
        self.running_var = (
            self.momentum * self.running_var + (1 - self.momentum) * var
        ).astype(self.running_var.dtype)
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (xf - mean[None, :, None]) * inv_std[None, :, None]
        out = self.params["gamma"][None, :, None] * xhat + self.params["beta"][None, :, None]
        if train:
            self.cache = (xhat, inv_std, x.shape)
        return out.reshape(x.shape).astype(x.dtype, copy=False)

    def backward(self, dout):
        xhat, inv_std, x_shape = self._take_cache()
        df = self._folded(dout)
        n, _, m = df.shape
        cnt = n * m
        self.grads["gamma"] = (df * xhat).sum(axis=(0, 2))
        self.grads["beta"] = df.sum(axis=(0, 2))
        g = self.params["gamma"][None, :, None]
        dxhat = df * g
        dx = (
            inv_std[None, :, None]
            / cnt
            * (
                cnt * dxhat
                - dxhat.sum(axis=(0, 2), keepdims=True)
                - xhat * (dxhat * xhat).sum(axis=(0, 2), keepdims=True)
            )
        )
        return dx.reshape(x_shape)


class Dropout(Layer):
    """Inverted dropout: scales at train time, identity at eval."""

    def __init__(self, rate):
        super().__init__()
        if not 0 <= rate < 1:
            raise ValueError(f"dropout rate {rate} not in [0,1)")
        self.rate = rate
        self.rng = np.random.default_rng(0)

    def spec(self):
        return {"kind": "dropout", "rate": self.rate}

    def forward(self, x, train=False):
        if not train or self.rate == 0:
            if train:
                self.cache = "identity"
            return x
        mask = (self.rng.random(x.shape) >= self.rate) / (1.0 - self.rate)
        mask = mask.astype(x.dtype)
        self.cache = mask
        return x * mask

    def backward(self, dout):
        cache = self._take_cache()
        if isinstance(cache, str):
            return dout
        return dout * cache


class Softmax(Layer):
    """Softmax over the channel axis (axis 1 for >=2D input)."""

    def spec(self):
        return {"kind": "softmax"}

    def forward(self, x, train=False):
        shifted = x - x.max(axis=1, keepdims=True)
        e = np.exp(shifted)
        p = e / e.sum(axis=1, keepdims=True)
        if train:
            self.cache = p
        return p

    def backward(self, dout):
        p = self._take_cache()
        return p * (dout - (dout * p).sum(axis=1, keepdims=True))


_LAYER_KINDS = {
    "conv2d": lambda s, dt: Conv2D(s["in_channels"], s["filters"], s["kernel"], dtype=dt),
    "conv3d": lambda s, dt: Conv3D(s["in_channels"], s["filters"], s["kernel"], dtype=dt),
    "maxpool2d": lambda s, dt: MaxPool2D(s["size"], s["stride"]),
    "maxpool3d": lambda s, dt: MaxPool3D(s["size"], s["stride"]),
    "dense": lambda s, dt: Dense(s["in_features"], s["out_features"], dtype=dt),
    "flatten": lambda s, dt: Flatten(),
    "relu": lambda s, dt: ReLU(),
    "batchnorm": lambda s, dt: BatchNorm(
        s["num_features"], s.get("momentum", 0.9), s.get("eps", 1e-5), dtype=dt
    ),
    "dropout": lambda s, dt: Dropout(s["rate"]),
    "softmax": lambda s, dt: Softmax(),
}


def build_layer(spec: dict, dtype=np.float32) -> Layer:
    kind = spec["kind"]
    if kind not in _LAYER_KINDS:
        raise ValueError(f"unknown layer kind {kind!r}")
    return _LAYER_KINDS[kind](spec, dtype)
