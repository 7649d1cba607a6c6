"""Pure numpy implementations of the hot kernels.

Every function here has a compiled twin in ``_core.pyx`` with the same
signature and semantics. The compiled module is preferred at import time
(see :mod:`spikeforge.backend`); this module is the fallback and the
reference for the equivalence tests.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

# relative slack on threshold crossings; absorbs rounding in accumulated input
FIRE_RTOL = 1e-9


def _windows(xp, kh, kw, stride, ho, wo):
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return win[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]


def conv2d_forward(x, w, b, stride, padding):
    """Batched cross-correlation. x: [N,C,H,W], w: [K,C,kh,kw] -> [N,K,Ho,Wo].

    Accumulates one kernel tap at a time, so each output element is summed
    in a fixed order whatever the batch size.
    """
    n, c, h, wd = x.shape
    k, _, kh, kw = w.shape
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
    out = np.empty((n, k, ho, wo))
    out[:] = b[None, :, None, None]
    for ch in range(c):
        for i in range(kh):
            for j in range(kw):
                patch = xp[:, ch, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride]
                out += w[None, :, ch, i, j, None, None] * patch[:, None]
    return out


def conv2d_backward(x, w, grad_out, stride, padding):
    """Return (grad_x, grad_w, grad_b) for :func:`conv2d_forward`."""
    n, c, h, wd = x.shape
    k, _, kh, kw = w.shape
    ho, wo = grad_out.shape[2], grad_out.shape[3]
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
    win = _windows(xp, kh, kw, stride, ho, wo)
    grad_w = np.tensordot(grad_out, win, axes=([0, 2, 3], [0, 2, 3]))
    grad_b = grad_out.sum(axis=(0, 2, 3))
    grad_xp = np.zeros(xp.shape)
    for i in range(kh):
        for j in range(kw):
            contrib = np.tensordot(grad_out, w[:, :, i, j], axes=([1], [0]))  # [N,Ho,Wo,C]
            grad_xp[:, :, i : i + stride * (ho - 1) + 1 : stride,
                    j : j + stride * (wo - 1) + 1 : stride] += contrib.transpose(0, 3, 1, 2)
    if padding:
        grad_xp = grad_xp[:, :, padding : padding + h, padding : padding + wd]
    return np.ascontiguousarray(grad_xp), grad_w, grad_b


def avg_pool_forward(x, size, stride):
    n, c, h, wd = x.shape
    ho = (h - size) // stride + 1
    wo = (wd - size) // stride + 1
    win = _windows(x, size, size, stride, ho, wo)
    return np.ascontiguousarray(win.mean(axis=(4, 5)))


def avg_pool_backward(grad_out, input_shape, size, stride):
    grad_x = np.zeros(input_shape)
    ho, wo = grad_out.shape[2], grad_out.shape[3]
    share = grad_out / (size * size)
    for i in range(size):
        for j in range(size):
            grad_x[:, :, i : i + stride * (ho - 1) + 1 : stride,
                   j : j + stride * (wo - 1) + 1 : stride] += share
    return grad_x


def dense_propagate(x, w):
    """``x @ w.T`` summed over inputs in index order, independent of batch size."""
    wt = np.ascontiguousarray(w.T)
    out = np.zeros((x.shape[0], w.shape[0]))
    for j in range(x.shape[1]):
        col = x[:, j]
        rows = np.flatnonzero(col)
        if rows.size:
            out[rows] += col[rows, None] * wt[j]
    return out


def integrate_fire(currents, threshold):
    """Integrate-and-fire over time for independent neurons.

    currents: [T, M] input per step; threshold: [M]. Reset by subtraction,
    membrane floored at zero. Returns uint8 spikes [T, M].
    """
    steps, m = currents.shape
    v = np.zeros(m)
    spikes = np.zeros((steps, m), dtype=np.uint8)
    for t in range(steps):
        v += currents[t]
        fired = v >= threshold * (1.0 - FIRE_RTOL)
        v[fired] -= threshold[fired]
        np.maximum(v, 0.0, out=v)
        spikes[t] = fired
    return spikes


def stdp_apply(pre, post, w, a_plus, a_minus, decay_plus, decay_minus, w_min, w_max):
    """Trace-based all-pairs STDP over recorded spike trains, in place on w.

    pre: [T, n_pre] uint8, post: [T, n_post] uint8, w: [n_post, n_pre].
    """
    steps = pre.shape[0]
    x_pre = np.zeros(pre.shape[1])
    x_post = np.zeros(post.shape[1])
    for t in range(steps):
        x_pre *= decay_plus
        x_post *= decay_minus
        pre_t = pre[t].astype(bool)
        post_t = post[t].astype(bool)
        if pre_t.any():
            w[:, pre_t] -= a_minus * x_post[:, None]
        if post_t.any():
            w[post_t, :] += a_plus * x_pre[None, :]
        if pre_t.any() or post_t.any():
            np.clip(w, w_min, w_max, out=w)
        x_pre[pre_t] += 1.0
        x_post[post_t] += 1.0
    return w


def stdp_layer_run(pre, w, theta_adapt, base_threshold, theta_plus, theta_decay,
                   a_plus, a_minus, decay_plus, decay_minus, w_min, w_max, wta, learn):
    """Simulate one IF layer driven by ``pre`` spikes with optional online STDP.

    Synaptic delay is one step. Under winner-take-all, at most one neuron
    fires per step (largest overshoot, ties to lowest index) and every
    membrane is reset to zero. With ``learn`` set, theta_adapt and w are
    updated in place; otherwise both are read-only.
    Returns post spikes [T, n_post] uint8.
    """
    steps, n_pre = pre.shape
    n_post = w.shape[0]
    v = np.zeros(n_post)
    x_pre = np.zeros(n_pre)
    x_post = np.zeros(n_post)
    post = np.zeros((steps, n_post), dtype=np.uint8)
    for t in range(steps):
        x_pre *= decay_plus
        x_post *= decay_minus
        if learn:
            theta_adapt *= theta_decay
        if t > 0:
            # sequential accumulation keeps rounding identical to the compiled loop
            for j in np.flatnonzero(pre[t - 1]):
                v += w[:, j]
        thr = base_threshold + theta_adapt
        over = v - thr
        if wta:
            winner = int(np.argmax(over))
            if over[winner] >= -FIRE_RTOL * thr[winner]:
                post[t, winner] = 1
                v[:] = 0.0
                if learn:
                    theta_adapt[winner] += theta_plus
        else:
            fired = v >= thr * (1.0 - FIRE_RTOL)
            post[t] = fired
            v[fired] -= thr[fired]
            np.maximum(v, 0.0, out=v)
            if learn:
                theta_adapt[fired] += theta_plus
        if learn:
            pre_t = pre[t].astype(bool)
            post_t = post[t].astype(bool)
            if pre_t.any():
                w[:, pre_t] -= a_minus * x_post[:, None]
            if post_t.any():
                w[post_t, :] += a_plus * x_pre[None, :]
            if pre_t.any() or post_t.any():
                np.clip(w, w_min, w_max, out=w)
            x_pre[pre_t] += 1.0
            x_post[post_t] += 1.0
    return post
