"""Pure-numpy implementations of the hot kernels.

Fallback path used when numba is unavailable or when LKDETR_BACKEND=numpy.
Convolutions are computed by looping over kernel taps and doing one strided
einsum per tap; bilinear sampling/scatter is fully vectorized (scatter via
bincount, which is much faster than np.add.at).
"""

import numpy as np


def _out_size(size, k, stride, pad, dil):
    return (size + 2 * pad - dil * (k - 1) - 1) // stride + 1


def conv2d_forward(x, w, stride, padding, dilation, groups):
    n, cin, h, wd = x.shape
    cout, cig, kh, kw = w.shape
    sh, sw = stride
    ph, pw = padding
    dh, dw = dilation
    ho = _out_size(h, kh, sh, ph, dh)
    wo = _out_size(wd, kw, sw, pw, dw)
    xp = np.zeros((n, cin, h + 2 * ph, wd + 2 * pw), dtype=x.dtype)
    xp[:, :, ph:ph + h, pw:pw + wd] = x
    xg = xp.reshape(n, groups, cig, h + 2 * ph, wd + 2 * pw)
    wg = w.reshape(groups, cout // groups, cig, kh, kw)
    y = np.zeros((n, groups, cout // groups, ho, wo), dtype=x.dtype)
    for u in range(kh):
        for v in range(kw):
            xs = xg[:, :, :, u * dh:u * dh + (ho - 1) * sh + 1:sh,
                    v * dw:v * dw + (wo - 1) * sw + 1:sw]
            y += np.einsum("ngihw,goi->ngohw", xs, wg[:, :, :, u, v],
                           optimize=True)
    return y.reshape(n, cout, ho, wo)


def conv2d_backward_input(gy, w, x_shape, stride, padding, dilation, groups):
    n, cin, h, wd = x_shape
    cout, cig, kh, kw = w.shape
    sh, sw = stride
    ph, pw = padding
    dh, dw = dilation
    ho, wo = gy.shape[2], gy.shape[3]
    gyg = gy.reshape(n, groups, cout // groups, ho, wo)
    wg = w.reshape(groups, cout // groups, cig, kh, kw)
    gxp = np.zeros((n, groups, cig, h + 2 * ph, wd + 2 * pw), dtype=gy.dtype)
    for u in range(kh):
        for v in range(kw):
            contrib = np.einsum("ngohw,goi->ngihw", gyg, wg[:, :, :, u, v],
                                optimize=True)
            gxp[:, :, :, u * dh:u * dh + (ho - 1) * sh + 1:sh,
                v * dw:v * dw + (wo - 1) * sw + 1:sw] += contrib
    gx = gxp.reshape(n, cin, h + 2 * ph, wd + 2 * pw)
    return gx[:, :, ph:ph + h, pw:pw + wd]


def conv2d_backward_weight(gy, x, w_shape, stride, padding, dilation, groups):
    n, cin, h, wd = x.shape
    cout, cig, kh, kw = w_shape
    sh, sw = stride
    ph, pw = padding
    dh, dw = dilation
    ho, wo = gy.shape[2], gy.shape[3]
    xp = np.zeros((n, cin, h + 2 * ph, wd + 2 * pw), dtype=x.dtype)
    xp[:, :, ph:ph + h, pw:pw + wd] = x
    xg = xp.reshape(n, groups, cig, h + 2 * ph, wd + 2 * pw)
    gyg = gy.reshape(n, groups, cout // groups, ho, wo)
    gw = np.zeros((groups, cout // groups, cig, kh, kw), dtype=gy.dtype)
    for u in range(kh):
        for v in range(kw):
            xs = xg[:, :, :, u * dh:u * dh + (ho - 1) * sh + 1:sh,
                    v * dw:v * dw + (wo - 1) * sw + 1:sw]
            gw[:, :, :, u, v] = np.einsum("ngihw,ngohw->goi", xs, gyg,
                                          optimize=True)
    return gw.reshape(cout, cig, kh, kw)


def _corner_data(feat, pts):
    """Shared corner geometry for bilinear forward/backward.

    pts holds (x, y) in normalized [0,1]^2; texel centers sit at
    ((j+0.5)/W, (i+0.5)/H). Out-of-range corners contribute zeros.
    """
    g, c, h, w = feat.shape
    x = pts[..., 0] * w - 0.5
    y = pts[..., 1] * h - 0.5
    x0 = np.floor(x)
    y0 = np.floor(y)
    fx = x - x0
    fy = y - y0
    corners = []
    for dy_i, dx_i, wgt in (
        (0, 0, (1 - fy) * (1 - fx)),
        (0, 1, (1 - fy) * fx),
        (1, 0, fy * (1 - fx)),
        (1, 1, fy * fx),
    ):
        cx = x0 + dx_i
        cy = y0 + dy_i
        valid = (cx >= 0) & (cx < w) & (cy >= 0) & (cy < h)
        lin = (np.clip(cy, 0, h - 1) * w + np.clip(cx, 0, w - 1)).astype(np.int64)
        corners.append((lin, valid, wgt))
    return corners, fx, fy


def bilinear_forward(feat, pts):
    g, c, h, w = feat.shape
    p = pts.shape[1]
    corners, _, _ = _corner_data(feat, pts)
    flat = feat.reshape(g, c, h * w)
    out = np.zeros((g, p, c), dtype=feat.dtype)
    for lin, valid, wgt in corners:
        vals = np.take_along_axis(flat, lin[:, None, :], axis=2)  # [G,C,P]
        vals = vals * valid[:, None, :]
        out += (vals * wgt[:, None, :]).transpose(0, 2, 1)
    return out


def bilinear_backward(feat, pts, gout):
    g, c, h, w = feat.shape
    p = pts.shape[1]
    corners, fx, fy = _corner_data(feat, pts)
    flat = feat.reshape(g, c, h * w)
    gfeat = np.zeros(g * c * h * w, dtype=np.float64)
    g_idx = np.arange(g)[:, None, None]
    c_idx = np.arange(c)[None, None, :]
    corner_vals = []
    for lin, valid, wgt in corners:
        vals = np.take_along_axis(flat, lin[:, None, :], axis=2)
        vals = (vals * valid[:, None, :]).transpose(0, 2, 1)  # [G,P,C]
        corner_vals.append(vals)
        contrib = gout * (wgt * valid)[:, :, None]  # [G,P,C]
        idx3 = (g_idx * c + c_idx) * (h * w) + lin[:, :, None]
        gfeat += np.bincount(idx3.ravel(), weights=contrib.ravel(),
                             minlength=g * c * h * w)
    v00, v01, v10, v11 = corner_vals
    # d(out)/dx and d(out)/dy per point, contracted against gout over channels
    dval_dfx = (v01 - v00) * (1 - fy)[:, :, None] + (v11 - v10) * fy[:, :, None]
    dval_dfy = (v10 - v00) * (1 - fx)[:, :, None] + (v11 - v01) * fx[:, :, None]
    gx = np.sum(gout * dval_dfx, axis=2) * w
    gy = np.sum(gout * dval_dfy, axis=2) * h
    gpts = np.stack([gx, gy], axis=2).astype(feat.dtype)
    return gfeat.reshape(g, c, h, w).astype(feat.dtype), gpts
