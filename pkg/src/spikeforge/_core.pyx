# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels. Semantics mirror ``spikeforge._pure`` exactly."""
import numpy as np
cimport numpy as cnp

cnp.import_array()

# relative slack on threshold crossings; absorbs rounding in accumulated input
cdef double FIRE_RTOL = 1e-9


def conv2d_forward(x, w, b, int stride, int padding):
    # scatter form: zero inputs (padding, silent ReLUs, absent spikes) cost nothing
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], wd = x.shape[3]
    cdef Py_ssize_t k = w.shape[0], kh = w.shape[2], kw = w.shape[3]
    cdef Py_ssize_t ho = (h + 2 * padding - kh) // stride + 1
    cdef Py_ssize_t wo = (wd + 2 * padding - kw) // stride + 1
    cdef double[:, :, :, ::1] xv = np.ascontiguousarray(x, dtype=np.float64)
    # weights as [C, kh, kw, K] so the innermost loop over filters is contiguous
    cdef double[:, :, :, ::1] wt = np.ascontiguousarray(np.transpose(w, (1, 2, 3, 0)), dtype=np.float64)
    cdef double[::1] bv = np.ascontiguousarray(b, dtype=np.float64)
    out_arr = np.empty((n, ho, wo, k))
    cdef double[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t s, f, ch, y, xx, i, j, py, px, oi, oj
    cdef double val
    with nogil:
        for s in range(n):
            for oi in range(ho):
                for oj in range(wo):
                    for f in range(k):
                        out[s, oi, oj, f] = bv[f]
            for ch in range(c):
                for y in range(h):
                    py = y + padding
                    for xx in range(wd):
                        val = xv[s, ch, y, xx]
                        if val == 0.0:
                            continue
                        px = xx + padding
                        for i in range(kh):
                            oi = py - i
                            if oi < 0 or oi % stride != 0:
                                continue
                            oi = oi // stride
                            if oi >= ho:
                                continue
                            for j in range(kw):
                                oj = px - j
                                if oj < 0 or oj % stride != 0:
                                    continue
                                oj = oj // stride
                                if oj >= wo:
                                    continue
                                for f in range(k):
                                    out[s, oi, oj, f] += val * wt[ch, i, j, f]
    return np.ascontiguousarray(out_arr.transpose(0, 3, 1, 2))


def conv2d_backward(x, w, grad_out, int stride, int padding):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], wd = x.shape[3]
    cdef Py_ssize_t k = w.shape[0], kh = w.shape[2], kw = w.shape[3]
    cdef Py_ssize_t ho = grad_out.shape[2], wo = grad_out.shape[3]
    xp_arr = np.ascontiguousarray(
        np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x,
        dtype=np.float64)
    cdef double[:, :, :, ::1] xp = xp_arr
    cdef double[:, :, :, ::1] wv = np.ascontiguousarray(w, dtype=np.float64)
    cdef double[:, :, :, ::1] g = np.ascontiguousarray(grad_out, dtype=np.float64)
    gxp_arr = np.zeros(xp_arr.shape)
    gw_arr = np.zeros((k, c, kh, kw))
    gb_arr = np.zeros(k)
    cdef double[:, :, :, ::1] gxp = gxp_arr
    cdef double[:, :, :, ::1] gw = gw_arr
    cdef double[::1] gb = gb_arr
    cdef Py_ssize_t s, f, ch, i, j, oi, oj
    cdef double acc, wgt, go
    with nogil:
        for f in range(k):
            acc = 0.0
            for s in range(n):
                for oi in range(ho):
                    for oj in range(wo):
                        acc = acc + g[s, f, oi, oj]
            gb[f] = acc
        for f in range(k):
            for ch in range(c):
                for i in range(kh):
                    for j in range(kw):
                        acc = 0.0
                        wgt = wv[f, ch, i, j]
                        for s in range(n):
                            for oi in range(ho):
                                for oj in range(wo):
                                    go = g[s, f, oi, oj]
                                    acc = acc + go * xp[s, ch, oi * stride + i, oj * stride + j]
                                    gxp[s, ch, oi * stride + i, oj * stride + j] += wgt * go
                        gw[f, ch, i, j] = acc
    if padding:
        gxp_arr = gxp_arr[:, :, padding:padding + h, padding:padding + wd]
    return np.ascontiguousarray(gxp_arr), gw_arr, gb_arr


def avg_pool_forward(x, int size, int stride):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], wd = x.shape[3]
    cdef Py_ssize_t ho = (h - size) // stride + 1, wo = (wd - size) // stride + 1
    cdef double[:, :, :, ::1] xv = np.ascontiguousarray(x, dtype=np.float64)
    out_arr = np.empty((n, c, ho, wo))
    cdef double[:, :, :, ::1] out = out_arr
    cdef double area = size * size, acc
    cdef Py_ssize_t s, ch, oi, oj, i, j
    with nogil:
        for s in range(n):
            for ch in range(c):
                for oi in range(ho):
                    for oj in range(wo):
                        acc = 0.0
                        for i in range(size):
                            for j in range(size):
                                acc = acc + xv[s, ch, oi * stride + i, oj * stride + j]
                        out[s, ch, oi, oj] = acc / area
    return out_arr


def avg_pool_backward(grad_out, input_shape, int size, int stride):
    cdef double[:, :, :, ::1] g = np.ascontiguousarray(grad_out, dtype=np.float64)
    gx_arr = np.zeros(tuple(input_shape))
    cdef double[:, :, :, ::1] gx = gx_arr
    cdef Py_ssize_t n = g.shape[0], c = g.shape[1], ho = g.shape[2], wo = g.shape[3]
    cdef double area = size * size, share
    cdef Py_ssize_t s, ch, oi, oj, i, j
    with nogil:
        for s in range(n):
            for ch in range(c):
                for oi in range(ho):
                    for oj in range(wo):
                        share = g[s, ch, oi, oj] / area
                        for i in range(size):
                            for j in range(size):
                                gx[s, ch, oi * stride + i, oj * stride + j] += share
    return gx_arr


def dense_propagate(x, w):
    cdef double[:, ::1] xv = np.ascontiguousarray(x, dtype=np.float64)
    cdef double[:, ::1] wt = np.ascontiguousarray(np.transpose(w), dtype=np.float64)
    cdef Py_ssize_t n = xv.shape[0], n_pre = xv.shape[1], n_post = wt.shape[1], s, j, i
    out_arr = np.zeros((n, n_post))
    cdef double[:, ::1] out = out_arr
    cdef double val
    with nogil:
        for s in range(n):
            for j in range(n_pre):
                val = xv[s, j]
                if val == 0.0:
                    continue
                for i in range(n_post):
                    out[s, i] += val * wt[j, i]
    return out_arr


def integrate_fire(currents, threshold):
    cdef double[:, ::1] cur = np.ascontiguousarray(currents, dtype=np.float64)
    cdef double[::1] thr = np.ascontiguousarray(threshold, dtype=np.float64)
    cdef Py_ssize_t steps = cur.shape[0], m = cur.shape[1], t, i
    spikes_arr = np.zeros((steps, m), dtype=np.uint8)
    cdef cnp.uint8_t[:, ::1] spikes = spikes_arr
    v_arr = np.zeros(m)
    cdef double[::1] v = v_arr
    with nogil:
        for t in range(steps):
            for i in range(m):
                v[i] += cur[t, i]
                if v[i] >= thr[i] * (1.0 - FIRE_RTOL):
                    spikes[t, i] = 1
                    v[i] -= thr[i]
                if v[i] < 0.0:
                    v[i] = 0.0
    return spikes_arr


def stdp_apply(pre, post, w_arr, double a_plus, double a_minus, double decay_plus,
               double decay_minus, double w_min, double w_max):
    cdef cnp.uint8_t[:, ::1] pr = np.ascontiguousarray(pre, dtype=np.uint8)
    cdef cnp.uint8_t[:, ::1] po = np.ascontiguousarray(post, dtype=np.uint8)
    cdef double[:, ::1] w = w_arr
    cdef Py_ssize_t steps = pr.shape[0], n_pre = pr.shape[1], n_post = po.shape[1]
    cdef double[::1] x_pre = np.zeros(n_pre)
    cdef double[::1] x_post = np.zeros(n_post)
    with nogil:
        _stdp_loop(pr, po, w, x_pre, x_post, steps, n_pre, n_post,
                   a_plus, a_minus, decay_plus, decay_minus, w_min, w_max)
    return w_arr


cdef void _stdp_loop(cnp.uint8_t[:, ::1] pr, cnp.uint8_t[:, ::1] po, double[:, ::1] w,
                     double[::1] x_pre, double[::1] x_post,
                     Py_ssize_t steps, Py_ssize_t n_pre, Py_ssize_t n_post,
                     double a_plus, double a_minus, double decay_plus, double decay_minus,
                     double w_min, double w_max) noexcept nogil:
    cdef Py_ssize_t t
    for t in range(steps):
        _stdp_step(pr, po, t, w, x_pre, x_post, n_pre, n_post,
                   a_plus, a_minus, decay_plus, decay_minus, w_min, w_max, 1)


cdef inline void _stdp_step(cnp.uint8_t[:, ::1] pr, cnp.uint8_t[:, ::1] po, Py_ssize_t t,
                            double[:, ::1] w, double[::1] x_pre, double[::1] x_post,
                            Py_ssize_t n_pre, Py_ssize_t n_post,
                            double a_plus, double a_minus, double decay_plus, double decay_minus,
                            double w_min, double w_max, bint decay) noexcept nogil:
    cdef Py_ssize_t i, j
    cdef bint any_event = 0
    if decay:
        for j in range(n_pre):
            x_pre[j] *= decay_plus
        for i in range(n_post):
            x_post[i] *= decay_minus
    for j in range(n_pre):
        if pr[t, j]:
            any_event = 1
            for i in range(n_post):
                w[i, j] -= a_minus * x_post[i]
    for i in range(n_post):
        if po[t, i]:
            any_event = 1
            for j in range(n_pre):
                w[i, j] += a_plus * x_pre[j]
    if any_event:
        for i in range(n_post):
            for j in range(n_pre):
                if w[i, j] < w_min:
                    w[i, j] = w_min
                elif w[i, j] > w_max:
                    w[i, j] = w_max
    for j in range(n_pre):
        if pr[t, j]:
            x_pre[j] += 1.0
    for i in range(n_post):
        if po[t, i]:
            x_post[i] += 1.0


def stdp_layer_run(pre, w_arr, theta_arr, double base_threshold, double theta_plus,
                   double theta_decay, double a_plus, double a_minus, double decay_plus,
                   double decay_minus, double w_min, double w_max, bint wta, bint learn):
    cdef cnp.uint8_t[:, ::1] pr = np.ascontiguousarray(pre, dtype=np.uint8)
    cdef double[:, ::1] w = w_arr
    cdef double[::1] theta = theta_arr
    cdef Py_ssize_t steps = pr.shape[0], n_pre = pr.shape[1], n_post = w.shape[0]
    post_arr = np.zeros((steps, n_post), dtype=np.uint8)
    cdef cnp.uint8_t[:, ::1] po = post_arr
    cdef double[::1] v = np.zeros(n_post)
    cdef double[::1] x_pre = np.zeros(n_pre)
    cdef double[::1] x_post = np.zeros(n_post)
    cdef Py_ssize_t t, i, j, winner
    cdef double over, best, thr
    with nogil:
        for t in range(steps):
            for j in range(n_pre):
                x_pre[j] *= decay_plus
            for i in range(n_post):
                x_post[i] *= decay_minus
            if learn:
                for i in range(n_post):
                    theta[i] *= theta_decay
            if t > 0:
                for j in range(n_pre):
                    if pr[t - 1, j]:
                        for i in range(n_post):
                            v[i] += w[i, j]
            if wta:
                winner = 0
                best = v[0] - (base_threshold + theta[0])
                for i in range(1, n_post):
                    over = v[i] - (base_threshold + theta[i])
                    if over > best:
                        best = over
                        winner = i
                if best >= -FIRE_RTOL * (base_threshold + theta[winner]):
                    po[t, winner] = 1
                    for i in range(n_post):
                        v[i] = 0.0
                    if learn:
                        theta[winner] += theta_plus
            else:
                for i in range(n_post):
                    thr = base_threshold + theta[i]
                    if v[i] >= thr * (1.0 - FIRE_RTOL):
                        po[t, i] = 1
                        v[i] -= thr
                        if learn:
                            theta[i] += theta_plus
                    if v[i] < 0.0:
                        v[i] = 0.0
            if learn:
                _stdp_step(pr, po, t, w, x_pre, x_post, n_pre, n_post,
                           a_plus, a_minus, decay_plus, decay_minus, w_min, w_max, 0)
    return post_arr
