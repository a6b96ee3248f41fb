# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled inner loops for convolution lowering and depthwise convolution.

Every function mirrors a function of the same name in ``_kernels_py`` and
agrees with it up to floating point summation order.
"""
import numpy as np
cimport numpy as cnp

ctypedef fused real:
    float
    double


cdef inline Py_ssize_t _lo(Py_ssize_t off, Py_ssize_t stride) nogil:
    # first output index o with o*stride + off >= 0
    if off >= 0:
        return 0
    return (-off + stride - 1) // stride


cdef inline Py_ssize_t _hi(Py_ssize_t off, Py_ssize_t stride, Py_ssize_t n, Py_ssize_t no) nogil:
    # one past the last output index o with o*stride + off < n
    cdef Py_ssize_t h
    if n - off <= 0:
        return 0
    h = (n - off - 1) // stride + 1
    return h if h < no else no


def im2col(const real[:, :, ::1] x, int kh, int kw, int stride,
           int pt, int pb, int pl, int pr):
    cdef Py_ssize_t C = x.shape[0], H = x.shape[1], W = x.shape[2]
    cdef Py_ssize_t Ho = (H + pt + pb - kh) // stride + 1
    cdef Py_ssize_t Wo = (W + pl + pr - kw) // stride + 1
    dtype = np.float32 if real is float else np.float64
    out = np.zeros((C * kh * kw, Ho * Wo), dtype=dtype)
    cdef real[:, ::1] o = out
    cdef Py_ssize_t c, i, j, oy, ox, iy, ix, y0, y1, x0, x1, row
    for c in range(C):
        for i in range(kh):
            for j in range(kw):
                row = (c * kh + i) * kw + j
                y0 = _lo(i - pt, stride)
                y1 = _hi(i - pt, stride, H, Ho)
                x0 = _lo(j - pl, stride)
                x1 = _hi(j - pl, stride, W, Wo)
                for oy in range(y0, y1):
                    iy = oy * stride + i - pt
                    for ox in range(x0, x1):
                        ix = ox * stride + j - pl
                        o[row, oy * Wo + ox] = x[c, iy, ix]
    return out


def col2im(const real[:, ::1] cols, int C, int H, int W, int kh, int kw,
           int stride, int pt, int pb, int pl, int pr):
    cdef Py_ssize_t Ho = (H + pt + pb - kh) // stride + 1
    cdef Py_ssize_t Wo = (W + pl + pr - kw) // stride + 1
    dtype = np.float32 if real is float else np.float64
    out = np.zeros((C, H, W), dtype=dtype)
    cdef real[:, :, ::1] o = out
    cdef Py_ssize_t c, i, j, oy, ox, iy, ix, y0, y1, x0, x1, row
    for c in range(C):
        for i in range(kh):
            for j in range(kw):
                row = (c * kh + i) * kw + j
                y0 = _lo(i - pt, stride)
                y1 = _hi(i - pt, stride, H, Ho)
                x0 = _lo(j - pl, stride)
                x1 = _hi(j - pl, stride, W, Wo)
                for oy in range(y0, y1):
                    iy = oy * stride + i - pt
                    for ox in range(x0, x1):
                        ix = ox * stride + j - pl
                        o[c, iy, ix] += cols[row, oy * Wo + ox]
    return out


def depthwise_conv2d(const real[:, :, ::1] x, const real[:, :, ::1] w, int stride,
                     int pt, int pb, int pl, int pr, const real[::1] bias=None):
    cdef Py_ssize_t C = x.shape[0], H = x.shape[1], W = x.shape[2]
    cdef Py_ssize_t kh = w.shape[1], kw = w.shape[2]
    cdef Py_ssize_t Ho = (H + pt + pb - kh) // stride + 1
    cdef Py_ssize_t Wo = (W + pl + pr - kw) // stride + 1
    dtype = np.float32 if real is float else np.float64
    out = np.empty((C, Ho, Wo), dtype=dtype)
    cdef real[:, :, ::1] o = out
    cdef Py_ssize_t c, i, j, oy, ox, iy, ix, y0, y1, x0, x1
    cdef real wv
    cdef real* op
    cdef const real* xp
    # the accumulator starts at the bias, saving a separate pass over the output
    for c in range(C):
        wv = bias[c] if bias is not None else 0
        op = &o[c, 0, 0]
        for i in range(Ho * Wo):
            op[i] = wv
    if stride == 1:
        for c in range(C):
            for i in range(kh):
                for j in range(kw):
                    wv = w[c, i, j]
                    y0 = _lo(i - pt, 1)
                    y1 = _hi(i - pt, 1, H, Ho)
                    x0 = _lo(j - pl, 1)
                    x1 = _hi(j - pl, 1, W, Wo)
                    for oy in range(y0, y1):
                        op = &o[c, oy, 0]
                        xp = &x[c, oy + i - pt, j - pl]
                        for ox in range(x0, x1):
                            op[ox] += wv * xp[ox]
        return out
    for c in range(C):
        for i in range(kh):
            for j in range(kw):
                wv = w[c, i, j]
                y0 = _lo(i - pt, stride)
                y1 = _hi(i - pt, stride, H, Ho)
                x0 = _lo(j - pl, stride)
                x1 = _hi(j - pl, stride, W, Wo)
                for oy in range(y0, y1):
                    iy = oy * stride + i - pt
                    for ox in range(x0, x1):
                        ix = ox * stride + j - pl
                        o[c, oy, ox] += wv * x[c, iy, ix]
    return out


def depthwise_conv2d_backward(const real[:, :, ::1] dout, const real[:, :, ::1] x,
                              const real[:, :, ::1] w, int stride,
                              int pt, int pb, int pl, int pr):
    cdef Py_ssize_t C = x.shape[0], H = x.shape[1], W = x.shape[2]
    cdef Py_ssize_t kh = w.shape[1], kw = w.shape[2]
    cdef Py_ssize_t Ho = dout.shape[1], Wo = dout.shape[2]
    dtype = np.float32 if real is float else np.float64
    dx_arr = np.zeros((C, H, W), dtype=dtype)
    dw_arr = np.zeros((C, kh, kw), dtype=dtype)
    cdef real[:, :, ::1] dx = dx_arr
    cdef real[:, :, ::1] dw = dw_arr
    cdef Py_ssize_t c, i, j, oy, ox, iy, ix, y0, y1, x0, x1
    cdef real wv, acc, g
    for c in range(C):
        for i in range(kh):
            for j in range(kw):
                wv = w[c, i, j]
                acc = 0
                y0 = _lo(i - pt, stride)
                y1 = _hi(i - pt, stride, H, Ho)
                x0 = _lo(j - pl, stride)
                x1 = _hi(j - pl, stride, W, Wo)
                for oy in range(y0, y1):
                    iy = oy * stride + i - pt
                    for ox in range(x0, x1):
                        ix = ox * stride + j - pl
                        g = dout[c, oy, ox]
                        acc += g * x[c, iy, ix]
                        dx[c, iy, ix] += wv * g
                dw[c, i, j] = acc
    return dx_arr, dw_arr


def layernorm_columns(real[:, ::1] x, const real[::1] gamma, const real[::1] beta, double eps,
                      const real[:, ::1] addend=None, const real[::1] shift=None):
    """LayerNorm of every column of a D x N map. Returns (out, mean, rstd), the last two 1 x N.

    If ``addend`` (D x N) or ``shift`` (D) is given it is first added to x
    in place, inside the first statistics pass.
    """
    cdef Py_ssize_t D = x.shape[0], N = x.shape[1], d, n
    dtype = np.float32 if real is float else np.float64
    out = np.empty((D, N), dtype=dtype)
    mean = np.zeros((1, N), dtype=dtype)
    rstd = np.empty((1, N), dtype=dtype)
    var_a = np.zeros(N, dtype=dtype)
    cdef real[:, ::1] o = out, m = mean, r = rstd
    cdef real[::1] v = var_a
    cdef real* row
    cdef const real* arow
    cdef real* mp = &m[0, 0]
    cdef real* vp = &v[0]
    cdef real* rp = &r[0, 0]
    cdef real* orow
    cdef real t, g, b, sh
    cdef real invD = <real>1.0 / D
    cdef bint has_add = addend is not None, has_shift = shift is not None
    cdef double[::1] s1, s2
    cdef double* s1p
    cdef double* s2p
    cdef double dm
    if real is float:
        # one pass with double sums; float inputs cannot cancel badly in double
        s1 = np.zeros(N)
        s2 = np.zeros(N)
        s1p = &s1[0]
        s2p = &s2[0]
        for d in range(D):
            row = &x[d, 0]
            if has_add or has_shift:
                sh = shift[d] if has_shift else 0
                if has_add:
                    arow = &addend[d, 0]
                    for n in range(N):
                        row[n] = row[n] + arow[n] + sh
                else:
                    for n in range(N):
                        row[n] = row[n] + sh
            for n in range(N):
                s1p[n] += row[n]
                s2p[n] += <double>row[n] * row[n]
        for n in range(N):
            dm = s1p[n] / D
            mp[n] = <real>dm
            rp[n] = <real>(1.0 / (max(s2p[n] / D - dm * dm, 0.0) + eps) ** 0.5)
        for d in range(D):
            g = gamma[d]
            b = beta[d]
            row = &x[d, 0]
            orow = &o[d, 0]
            for n in range(N):
                orow[n] = (row[n] - mp[n]) * rp[n] * g + b
        return out, mean, rstd
    # two-pass statistics; rows are contiguous so the inner loops vectorise
    for d in range(D):
        row = &x[d, 0]
        if has_add or has_shift:
            sh = shift[d] if has_shift else 0
            if has_add:
                arow = &addend[d, 0]
                for n in range(N):
                    row[n] = row[n] + arow[n] + sh
            else:
                for n in range(N):
                    row[n] = row[n] + sh
        for n in range(N):
            mp[n] += row[n]
    for n in range(N):
        mp[n] *= invD
    for d in range(D):
        row = &x[d, 0]
        for n in range(N):
            t = row[n] - mp[n]
            vp[n] += t * t
    for n in range(N):
        rp[n] = <real>(1.0 / (vp[n] * invD + eps) ** 0.5)
    for d in range(D):
        g = gamma[d]
        b = beta[d]
        row = &x[d, 0]
        orow = &o[d, 0]
        for n in range(N):
            orow[n] = (row[n] - mp[n]) * rp[n] * g + b
    return out, mean, rstd


def bias_relu_(real[:, ::1] h, const real[::1] b):
    """In place: h = max(h + b[:, None], 0)."""
    cdef Py_ssize_t D = h.shape[0], N = h.shape[1], d, n
    cdef real t, bd
    for d in range(D):
        bd = b[d]
        for n in range(N):
            t = h[d, n] + bd
            h[d, n] = t if t > 0 else 0
