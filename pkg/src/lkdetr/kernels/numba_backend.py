"""Numba-jitted implementations of the hot kernels.

Single-threaded, fastmath off: results are deterministic and specialize per
dtype (float32/float64). Accumulation happens in float64 regardless of the
array dtype.
"""

import numpy as np
from numba import njit


@njit(cache=True)
def _conv2d_forward_kernel(x, w, y, sh, sw, ph, pw, dh, dw, groups):
    n, cin, h, wd = x.shape
    cout, cig, kh, kw = w.shape
    ho, wo = y.shape[2], y.shape[3]
    ocg = cout // groups
    for b in range(n):
        for g in range(groups):
            for oc in range(ocg):
                co = g * ocg + oc
                for i in range(ho):
                    ib = i * sh - ph
                    for j in range(wo):
                        jb = j * sw - pw
                        acc = 0.0
                        for c in range(cig):
                            ci = g * cig + c
                            for u in range(kh):
                                ii = ib + u * dh
                                if ii < 0 or ii >= h:
                                    continue
                                for v in range(kw):
                                    jj = jb + v * dw
                                    if jj < 0 or jj >= wd:
                                        continue
                                    acc += x[b, ci, ii, jj] * w[co, c, u, v]
                        y[b, co, i, j] = acc
    return y


@njit(cache=True)
def _conv2d_backward_input_kernel(gy, w, gx, sh, sw, ph, pw, dh, dw, groups):
    n, cin, h, wd = gx.shape
    cout, cig, kh, kw = w.shape
    ho, wo = gy.shape[2], gy.shape[3]
    ocg = cout // groups
    for b in range(n):
        for g in range(groups):
            for oc in range(ocg):
                co = g * ocg + oc
                for i in range(ho):
                    ib = i * sh - ph
                    for j in range(wo):
                        jb = j * sw - pw
                        gval = gy[b, co, i, j]
                        for c in range(cig):
                            ci = g * cig + c
                            for u in range(kh):
                                ii = ib + u * dh
                                if ii < 0 or ii >= h:
                                    continue
                                for v in range(kw):
                                    jj = jb + v * dw
                                    if jj < 0 or jj >= wd:
                                        continue
                                    gx[b, ci, ii, jj] += gval * w[co, c, u, v]
    return gx


@njit(cache=True)
def _conv2d_backward_weight_kernel(gy, x, gw, sh, sw, ph, pw, dh, dw, groups):
    n, cin, h, wd = x.shape
    cout, cig, kh, kw = gw.shape
    ho, wo = gy.shape[2], gy.shape[3]
    ocg = cout // groups
    for g in range(groups):
        for oc in range(ocg):
            co = g * ocg + oc
            for c in range(cig):
                ci = g * cig + c
                for u in range(kh):
                    for v in range(kw):
                        acc = 0.0
                        for b in range(n):
                            for i in range(ho):
                                ii = i * sh - ph + u * dh
                                if ii < 0 or ii >= h:
                                    continue
                                for j in range(wo):
                                    jj = j * sw - pw + v * dw
                                    if jj < 0 or jj >= wd:
                                        continue
                                    acc += gy[b, co, i, j] * x[b, ci, ii, jj]
                        gw[co, c, u, v] = acc
    return gw


def conv2d_forward(x, w, stride, padding, dilation, groups):
    n, cin, h, wd = x.shape
    cout, cig, kh, kw = w.shape
    ho = (h + 2 * padding[0] - dilation[0] * (kh - 1) - 1) // stride[0] + 1
    wo = (wd + 2 * padding[1] - dilation[1] * (kw - 1) - 1) // stride[1] + 1
    y = np.empty((n, cout, ho, wo), dtype=x.dtype)
    _conv2d_forward_kernel(x, w, y, stride[0], stride[1], padding[0],
                           padding[1], dilation[0], dilation[1], groups)
    return y


def conv2d_backward_input(gy, w, x_shape, stride, padding, dilation, groups):
    gx = np.zeros(x_shape, dtype=gy.dtype)
    _conv2d_backward_input_kernel(gy, w, gx, stride[0], stride[1], padding[0],
                                  padding[1], dilation[0], dilation[1], groups)
    return gx


def conv2d_backward_weight(gy, x, w_shape, stride, padding, dilation, groups):
    gw = np.empty(w_shape, dtype=gy.dtype)
    _conv2d_backward_weight_kernel(gy, x, gw, stride[0], stride[1], padding[0],
                                   padding[1], dilation[0], dilation[1], groups)
    return gw


@njit(cache=True)
def _bilinear_forward_kernel(feat, pts, out):
    g, c, h, w = feat.shape
    p = pts.shape[1]
    for gi in range(g):
        for pi in range(p):
            x = pts[gi, pi, 0] * w - 0.5
            y = pts[gi, pi, 1] * h - 0.5
            x0 = int(np.floor(x))
            y0 = int(np.floor(y))
            fx = x - x0
            fy = y - y0
            for dy in range(2):
                cy = y0 + dy
                if cy < 0 or cy >= h:
                    continue
                wy = fy if dy == 1 else 1.0 - fy
                for dx in range(2):
                    cx = x0 + dx
                    if cx < 0 or cx >= w:
                        continue
                    wx = fx if dx == 1 else 1.0 - fx
                    wgt = wy * wx
                    for ci in range(c):
                        out[gi, pi, ci] += wgt * feat[gi, ci, cy, cx]
    return out


@njit(cache=True)
def _bilinear_backward_kernel(feat, pts, gout, gfeat, gpts):
    g, c, h, w = feat.shape
    p = pts.shape[1]
    for gi in range(g):
        for pi in range(p):
            x = pts[gi, pi, 0] * w - 0.5
            y = pts[gi, pi, 1] * h - 0.5
            x0 = int(np.floor(x))
            y0 = int(np.floor(y))
            fx = x - x0
            fy = y - y0
            gx_acc = 0.0
            gy_acc = 0.0
            for dy in range(2):
                cy = y0 + dy
                inside_y = 0 <= cy < h
                wy = fy if dy == 1 else 1.0 - fy
                dwy = 1.0 if dy == 1 else -1.0
                for dx in range(2):
                    cx = x0 + dx
                    inside = inside_y and 0 <= cx < w
                    wx = fx if dx == 1 else 1.0 - fx
                    dwx = 1.0 if dx == 1 else -1.0
                    if not inside:
                        continue
                    for ci in range(c):
                        go = gout[gi, pi, ci]
                        val = feat[gi, ci, cy, cx]
                        gfeat[gi, ci, cy, cx] += go * wy * wx
                        gx_acc += go * val * wy * dwx
                        gy_acc += go * val * dwy * wx
            gpts[gi, pi, 0] = gx_acc * w
            gpts[gi, pi, 1] = gy_acc * h
    return gfeat


def bilinear_forward(feat, pts):
    g, _, _, _ = feat.shape
    p = pts.shape[1]
    out = np.zeros((g, p, feat.shape[1]), dtype=feat.dtype)
    _bilinear_forward_kernel(feat, pts, out)
    return out


def bilinear_backward(feat, pts, gout):
    gfeat = np.zeros_like(feat)
    gpts = np.empty_like(pts)
    _bilinear_backward_kernel(feat, pts, gout, gfeat, gpts)
    return gfeat, gpts
