"""Hot numeric loops, each with a numba and a pure-numpy implementation.

The public names at the bottom dispatch on :data:`patsparse._backend.USE_NUMBA`.
Both variants are importable explicitly (``*_nb`` / ``*_np``) so tests and the
benchmark can compare them side by side.

Summation orders (relevant for float32 reproducibility):

* dense direct conv: for each output pixel, channels ascending, and within a
  channel the 9 taps row-major are summed into one partial that is then added
  to the accumulator.
* pattern conv: for each output filter, pattern groups in record order; within
  a group, records in order; per record the 4 taps in ascending bit order are
  summed into one partial that is then added to the accumulator.

The thread count never splits a filter, so results do not depend on it.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ._backend import USE_NUMBA, njit


# ---------------------------------------------------------------------------
# im2col / col2im (training path, float64)
# ---------------------------------------------------------------------------

def im2col_np(xp, stride, ho, wo):
    """[B, C, Hp, Wp] padded input -> [B, C, 9, ho*wo] patches."""
    b, c = xp.shape[:2]
    win = sliding_window_view(xp, (3, 3), axis=(2, 3))
    win = win[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    # win: [B, C, ho, wo, 3, 3]
    return np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3)).reshape(b, c, 9, ho * wo)


def col2im_np(cols, hp, wp, stride, ho, wo):
    """Adjoint of :func:`im2col_np`: scatter-add patches back to [B, C, Hp, Wp]."""
    b, c = cols.shape[:2]
    out = np.zeros((b, c, hp, wp), dtype=cols.dtype)
    cols = cols.reshape(b, c, 3, 3, ho, wo)
    for kh in range(3):
        for kw in range(3):
            out[:, :, kh : kh + (ho - 1) * stride + 1 : stride,
                kw : kw + (wo - 1) * stride + 1 : stride] += cols[:, :, kh, kw]
    return out


@njit(nogil=True)
def im2col_nb(xp, stride, ho, wo):
    b, c = xp.shape[0], xp.shape[1]
    out = np.empty((b, c, 9, ho * wo), dtype=xp.dtype)
    for n in range(b):
        for ch in range(c):
            for kh in range(3):
                for kw in range(3):
                    k = kh * 3 + kw
                    for oh in range(ho):
                        row = oh * stride + kh
                        for ow in range(wo):
                            out[n, ch, k, oh * wo + ow] = xp[n, ch, row, ow * stride + kw]
    return out


@njit(nogil=True)
def col2im_nb(cols, hp, wp, stride, ho, wo):
    b, c = cols.shape[0], cols.shape[1]
    out = np.zeros((b, c, hp, wp), dtype=cols.dtype)
    for n in range(b):
        for ch in range(c):
            for kh in range(3):
                for kw in range(3):
                    k = kh * 3 + kw
                    for oh in range(ho):
                        row = oh * stride + kh
                        for ow in range(wo):
                            out[n, ch, row, ow * stride + kw] += cols[n, ch, k, oh * wo + ow]
    return out


# ---------------------------------------------------------------------------
# Simplex projection, batched over rows (float64)
# ---------------------------------------------------------------------------

def simplex_project_rows_np(d):
    """Euclidean projection of every row of ``d`` onto the probability simplex.

    Returns ``(u, nu)`` with ``u = max(d - nu, 0)`` row-wise.
    """
    n, k = d.shape
    s = -np.sort(-d, axis=1)
    css = np.cumsum(s, axis=1) - 1.0
    idx = np.arange(1, k + 1)
    cond = s - css / idx > 0
    rho = k - np.argmax(cond[:, ::-1], axis=1)  # last True index + 1
    nu = css[np.arange(n), rho - 1] / rho
    return np.maximum(d - nu[:, None], 0.0), nu


@njit(nogil=True)
def simplex_project_rows_nb(d):
    n, k = d.shape
    u = np.empty_like(d)
    nus = np.empty(n)
    for i in range(n):
        s = np.sort(d[i])[::-1]
        css = 0.0
        nu = 0.0
        run = 0.0
        for j in range(k):
            run += s[j]
            t = (run - 1.0) / (j + 1)
            if s[j] - t > 0:
                css = run
                nu = t
        for j in range(k):
            v = d[i, j] - nu
            u[i, j] = v if v > 0.0 else 0.0
        nus[i] = nu
    return u, nus


# ---------------------------------------------------------------------------
# Inference convolutions (float32)
# ---------------------------------------------------------------------------

@njit(nogil=True, fastmath=False)
def dense_conv_nb(xp, w, bias, stride, ho, wo, filters, out):
    """Naive direct 3x3 conv over the selected output ``filters``.

    xp: [B, C, Hp, Wp] padded input; w: [F, C, 3, 3]; out: [B, F, ho, wo].
    """
    nb_, c = xp.shape[0], xp.shape[1]
    for n in range(nb_):
        for fi in range(filters.shape[0]):
            f = filters[fi]
            acc = out[n, f]
            acc[:, :] = 0.0
            for ch in range(c):
                x = xp[n, ch]
                w0 = w[f, ch, 0, 0]; w1 = w[f, ch, 0, 1]; w2 = w[f, ch, 0, 2]
                w3 = w[f, ch, 1, 0]; w4 = w[f, ch, 1, 1]; w5 = w[f, ch, 1, 2]
                w6 = w[f, ch, 2, 0]; w7 = w[f, ch, 2, 1]; w8 = w[f, ch, 2, 2]
                for oh in range(ho):
                    r = oh * stride
                    x0 = x[r]
                    x1 = x[r + 1]
                    x2 = x[r + 2]
                    a = acc[oh]
                    for ow in range(wo):
                        q = ow * stride
                        a[ow] += (w0 * x0[q] + w1 * x0[q + 1] + w2 * x0[q + 2]
                                  + w3 * x1[q] + w4 * x1[q + 1] + w5 * x1[q + 2]
                                  + w6 * x2[q] + w7 * x2[q + 1] + w8 * x2[q + 2])
            b = bias[f]
            for oh in range(ho):
                for ow in range(wo):
                    acc[oh, ow] += b


def dense_conv_np(xp, w, bias, stride, ho, wo, filters, out):
    """Tap-wise shift-and-accumulate; same contract as :func:`dense_conv_nb`."""
    wf = w[filters]
    acc = np.zeros((xp.shape[0], len(filters), ho, wo), dtype=xp.dtype)
    for kh in range(3):
        for kw in range(3):
            xs = xp[:, :, kh : kh + (ho - 1) * stride + 1 : stride,
                    kw : kw + (wo - 1) * stride + 1 : stride]
            acc += np.einsum("fc,bchw->bfhw", wf[:, :, kh, kw], xs)
    out[:, filters] = acc + bias[filters][None, :, None, None]


@njit(nogil=True, fastmath=False)
def pattern_conv_nb(xp, group_ptr, group_pat, filter_group_ptr, chan, wts,
                    offsets, bias, stride, ho, wo, filters, out, counter):
    """Pattern-grouped sparse 3x3 conv over the selected packed ``filters``.

    Records of packed filter ``f`` live in groups ``filter_group_ptr[f] ..
    filter_group_ptr[f+1]``; group ``g`` spans records ``group_ptr[g] ..
    group_ptr[g+1]`` which all share pattern ``group_pat[g]``. ``offsets[p]``
    holds the 4 (row, col) taps of pattern ``p``. The tap offsets are loaded
    once per group; the per-record loop body is the same 4-MAC sequence for
    every record. ``counter[0]`` accumulates executed multiplies when
    ``counter`` has nonzero length.
    """
    count = counter.shape[0] > 0
    for n in range(xp.shape[0]):
        for fi in range(filters.shape[0]):
            f = filters[fi]
            acc = out[n, f]
            acc[:, :] = 0.0
            for g in range(filter_group_ptr[f], filter_group_ptr[f + 1]):
                p = group_pat[g]
                r0 = offsets[p, 0, 0]; c0 = offsets[p, 0, 1]
                r1 = offsets[p, 1, 0]; c1 = offsets[p, 1, 1]
                r2 = offsets[p, 2, 0]; c2 = offsets[p, 2, 1]
                r3 = offsets[p, 3, 0]; c3 = offsets[p, 3, 1]
                for rec in range(group_ptr[g], group_ptr[g + 1]):
                    x = xp[n, chan[rec]]
                    w0 = wts[rec, 0]; w1 = wts[rec, 1]; w2 = wts[rec, 2]; w3 = wts[rec, 3]
                    for oh in range(ho):
                        r = oh * stride
                        xa = x[r + r0]
                        xb = x[r + r1]
                        xc = x[r + r2]
                        xd = x[r + r3]
                        a = acc[oh]
                        for ow in range(wo):
                            q = ow * stride
                            a[ow] += (w0 * xa[q + c0] + w1 * xb[q + c1]
                                      + w2 * xc[q + c2] + w3 * xd[q + c3])
                    if count:
                        counter[0] += 4 * ho * wo
            b = bias[f]
            for oh in range(ho):
                for ow in range(wo):
                    acc[oh, ow] += b


def pattern_conv_np(xp, group_ptr, group_pat, filter_group_ptr, chan, wts,
                    offsets, bias, stride, ho, wo, filters, out, counter):
    span_h = (ho - 1) * stride + 1
    span_w = (wo - 1) * stride + 1
    for f in filters:
        acc = np.zeros((xp.shape[0], ho, wo), dtype=xp.dtype)
        for g in range(filter_group_ptr[f], filter_group_ptr[f + 1]):
            p = group_pat[g]
            lo, hi = group_ptr[g], group_ptr[g + 1]
            ch = chan[lo:hi]
            part = 0
            for t in range(4):
                r, c = offsets[p, t]
                xs = xp[:, ch, r : r + span_h : stride, c : c + span_w : stride]
                part = part + np.einsum("k,bkhw->bhw", wts[lo:hi, t], xs)
            acc += part
            if counter.shape[0]:
                counter[0] += 4 * (hi - lo) * ho * wo * xp.shape[0]
        out[:, f] = acc + bias[f]


if USE_NUMBA:
    im2col = im2col_nb
    col2im = col2im_nb
    simplex_project_rows = simplex_project_rows_nb
    dense_conv = dense_conv_nb
    pattern_conv = pattern_conv_nb
else:
    im2col = im2col_np
    col2im = col2im_np
    simplex_project_rows = simplex_project_rows_np
    dense_conv = dense_conv_np
    pattern_conv = pattern_conv_np
