"""Independent reference computations used by the tests.

None of these import the code under test's numerical paths; they rebuild the
quantity from a textbook definition (scipy special functions, explicit loops,
brute-force sums).
"""

from __future__ import annotations

import math

import numpy as np
from scipy import special


def lat_centers(n_lat):
    return 90.0 - (np.arange(n_lat) + 0.5) * 180.0 / n_lat


def lon_centers(n_lat):
    n_lon = 2 * n_lat
    return (np.arange(n_lon) + 0.5) * 360.0 / n_lon


def cell_area_weights(n_lat):
    """(H, W) exact cell areas over 4 pi."""
    edges = np.deg2rad(90.0 - np.arange(n_lat + 1) * 180.0 / n_lat)
    band = np.sin(edges[:-1]) - np.sin(edges[1:])
    n_lon = 2 * n_lat
    return np.repeat((band / (2 * n_lon))[:, None], n_lon, axis=1)


def real_ylm(l, m, n_lat):
    """Real orthonormal spherical harmonic on the cell-centered grid, via scipy (no Condon-Shortley phase)."""
    theta = np.deg2rad(90.0 - lat_centers(n_lat))[:, None]
    phi = np.deg2rad(lon_centers(n_lat))[None, :]
    y = special.sph_harm_y(l, abs(m), theta, phi) * (-1) ** abs(m)
    if m == 0:
        return y.real * np.ones_like(phi)
    if m > 0:
        return math.sqrt(2) * y.real
    return math.sqrt(2) * y.imag


def synth_from_coeffs(coeffs, n_lat):
    """sum_lm c[l, m + l_max] Y_lm by explicit loops."""
    l_max = coeffs.shape[0] - 1
    out = np.zeros((n_lat, 2 * n_lat))
    for l in range(l_max + 1):
        for m in range(-l, l + 1):
            c = coeffs[l, m + l_max]
            if c:
                out += c * real_ylm(l, m, n_lat)
    return out


def full_attention(x, qkv_w, qkv_b, proj_w, proj_b, heads, bias_table, rel_index):
    """Brute-force multi-head attention over all cells of a (C, H, W) field."""
    C, H, W = x.shape
    t = x.reshape(C, H * W).T  # tokens in row-major cell order
    qkv = t @ qkv_w.T + qkv_b
    q, k, v = qkv[:, :C], qkv[:, C:2 * C], qkv[:, 2 * C:]
    d = C // heads
    out = np.zeros_like(t)
    for h in range(heads):
        sl = slice(h * d, (h + 1) * d)
        logits = (q[:, sl] / math.sqrt(d)) @ k[:, sl].T
        logits = logits + bias_table[rel_index, h]
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        p /= p.sum(axis=1, keepdims=True)
        out[:, sl] = p @ v[:, sl]
    y = out @ proj_w.T + proj_b
    return y.T.reshape(C, H, W)


def circular_conv(x, kernel, bias, dilation=1):
    """Explicit-loop conv: latitude padded by pole reflection with half-turn roll, longitude circular."""
    C, H, W = x.shape
    O, _, kh, kw = kernel.shape
    ph, pw = kh // 2, kw // 2
    out = np.zeros((O, H, W))
    for i in range(H):
        for j in range(W):
            acc = bias.copy()
            for a in range(kh):
                for b in range(kw):
                    r = i + a - ph
                    c = j + (b - pw) * dilation
                    if r < 0:
                        r, c = -r - 1, c + W // 2
                    elif r >= H:
                        r, c = 2 * H - r - 1, c + W // 2
                    acc = acc + kernel[:, :, a, b] @ x[:, r, c % W]
            out[:, i, j] = acc
    return out


def weighted_std(x, w):
    w = np.broadcast_to(w, x.shape)
    mu = (w * x).sum() / w.sum()
    return math.sqrt((w * (x - mu) ** 2).sum() / w.sum())


def haversine_deg(lat1, lon1, lat2, lon2):
    p1, p2 = math.radians(lat1), math.radians(lat2)
    dp, dl = p2 - p1, math.radians(lon2 - lon1)
    a = math.sin(dp / 2) ** 2 + math.cos(p1) * math.cos(p2) * math.sin(dl / 2) ** 2
    return math.degrees(2 * math.asin(min(1.0, math.sqrt(a))))
