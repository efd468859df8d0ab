"""Independent brute-force oracles; deliberately loop-based and slow."""

import itertools

import numpy as np


def conv3d_direct(x, w, b, stride, dilation, padding, groups):
    n, cin, D, H, W = x.shape
    cout, cin_g, kd, kh, kw = w.shape
    cout_g = cout // groups
    k = (kd, kh, kw)
    out_sp = [
        (L + 2 * p - d * (kk - 1) - 1) // s + 1
        for L, kk, s, d, p in zip((D, H, W), k, stride, dilation, padding)
    ]
    y = np.zeros((n, cout, *out_sp))
    for b_, co, od, oh, ow in itertools.product(range(n), range(cout), *map(range, out_sp)):
        g = co // cout_g
        acc = 0.0 if b is None else float(b[co])
        for ci, td, th, tw in itertools.product(range(cin_g), range(kd), range(kh), range(kw)):
            i = od * stride[0] + td * dilation[0] - padding[0]
            j = oh * stride[1] + th * dilation[1] - padding[1]
            l = ow * stride[2] + tw * dilation[2] - padding[2]
            if 0 <= i < D and 0 <= j < H and 0 <= l < W:
                acc += float(w[co, ci, td, th, tw]) * float(x[b_, g * cin_g + ci, i, j, l])
        y[b_, co, od, oh, ow] = acc
    return y


def transposed_conv3d_scatter(x, w, b, stride, dilation, padding, groups):
    """Every input voxel scatters its kernel-weighted value into the output."""
    n, cin, D, H, W = x.shape
    _, cout_g, kd, kh, kw = w.shape
    cin_g = cin // groups
    cout = cout_g * groups
    k = (kd, kh, kw)
    out_sp = [
        (L - 1) * s - 2 * p + d * (kk - 1) + 1
        for L, kk, s, d, p in zip((D, H, W), k, stride, dilation, padding)
    ]
    y = np.zeros((n, cout, *out_sp))
    for b_, ci, i0, j0, l0 in itertools.product(range(n), range(cin), range(D), range(H), range(W)):
        g = ci // cin_g
        v = float(x[b_, ci, i0, j0, l0])
        for co, td, th, tw in itertools.product(range(cout_g), range(kd), range(kh), range(kw)):
            i = i0 * stride[0] + td * dilation[0] - padding[0]
            j = j0 * stride[1] + th * dilation[1] - padding[1]
            l = l0 * stride[2] + tw * dilation[2] - padding[2]
            if 0 <= i < out_sp[0] and 0 <= j < out_sp[1] and 0 <= l < out_sp[2]:
                y[b_, g * cout_g + co, i, j, l] += float(w[ci, co, td, th, tw]) * v
    if b is not None:
        y += np.asarray(b, dtype=float).reshape(1, -1, 1, 1, 1)
    return y


def central_difference(f, x, h=1e-3):
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        o = flat[i]
        flat[i] = o + h
        up = f(x)
        flat[i] = o - h
        down = f(x)
        flat[i] = o
        gflat[i] = (up - down) / (2 * h)
    return g


# closed-form parameter counts, summed layer by layer


def conv_params(cin, cout, k, bias=True, groups=1):
    return cin // groups * cout * k**3 + (cout if bias else 0)


def dlk_params(c):
    h = c // 2
    return (conv_params(c, h, 1) + conv_params(h, h, 5, groups=h) + conv_params(h, h, 7, groups=h)
            + conv_params(2, 2, 7) + conv_params(c, c, 1))


def block_params(c, r):
    module = 2 * conv_params(c, c, 1) + dlk_params(c)
    mlp = conv_params(c, r * c, 1) + conv_params(r * c, c, 1)
    return 4 * c + module + mlp


def dff_params(c):
    return conv_params(2 * c, 2 * c, 1) + conv_params(2 * c, c, 1) + 2 * conv_params(c, 1, 1)


def conv_bn_params(cin, cout, k=3):
    return conv_params(cin, cout, k, bias=False) + 2 * cout


def mixer_params(c, m):
    return 2 * c + conv_params(c, m * c, 1) + conv_params(m * c, m * c, 3, groups=m * c) + conv_params(m * c, c, 1)


def model_params(variant, C, S, B, r, cin, classes, body="mixer", m=4):
    """Trainable parameter total of the assembled network."""
    total = conv_bn_params(cin, C, 7)
    for i in range(1, S + 1):
        c = C * 2 ** (i - 1)
        total += B * block_params(c, r) + conv_params(c, 2 * c, 3)
    total += B * block_params(C * 2**S, r)
    total += conv_params(C, C, 2)  # decoder stem
    for i in range(1, S + 1):
        c = C * 2 ** (i - 1)
        total += conv_params(2 * c, c, 2)
        if variant == "dlknetr":
            total += conv_bn_params(c, c) + conv_bn_params(2 * c, c)
        else:
            total += dff_params(c) + B * block_params(c, r)
    if variant == "dlknetr":
        return total + conv_bn_params(cin, C) + conv_bn_params(2 * C, C) + conv_params(C, classes, 1)
    if variant == "dlknet" or body == "none":
        return total + conv_params(C, classes, 1)
    bodies = {
        "mixer": mixer_params(C, m),
        "convblock": 2 * conv_bn_params(C, C),
        "dlk": 2 * dlk_params(C),
    }
    return (total + conv_bn_params(cin, C) + bodies[body] + dff_params(C)
            + 2 * conv_bn_params(C, C) + conv_params(C, classes, 1))
