"""Building blocks: spherical convolution, windowed attention, grid convolution,
resampling, and capped spectral normalization. All operate on (B, C, H, W)."""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn
from torch.nn.utils import parametrize

from .spherical import Grid, SphericalTransform, get_transform


class ChannelNorm(nn.Module):
    """LayerNorm over the channel axis of a (B, C, H, W) tensor."""

    def __init__(self, channels: int, eps: float = 1e-5):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))
        self.eps = eps

    def forward(self, x):
        mu = x.mean(dim=1, keepdim=True)
        var = (x - mu).pow(2).mean(dim=1, keepdim=True)
        x = (x - mu) / torch.sqrt(var + self.eps)
        return x * self.weight[:, None, None] + self.bias[:, None, None]


def pointwise(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None = None) -> torch.Tensor:
    y = torch.einsum("oc,bchw->bohw", weight, x)
    if bias is not None:
        y = y + bias[:, None, None]
    return y


class Pointwise(nn.Module):
    """1x1 convolution."""

    def __init__(self, c_in: int, c_out: int, bias: bool = True, zero_init: bool = False):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(c_out, c_in))
        self.bias = nn.Parameter(torch.zeros(c_out)) if bias else None
        if zero_init:
            nn.init.zeros_(self.weight)
        else:
            nn.init.kaiming_uniform_(self.weight, a=math.sqrt(5))

    def forward(self, x):
        return pointwise(x, self.weight, self.bias)


# spherical convolution ------------------------------------------------------


class SphericalConv(nn.Module):
    """Coefficient-wise rank-1 filter in harmonic space, then optional channel mix.

    Each channel c is filtered by g[c, l, m] = degree[c, l] * order[c, m], with
    ``order`` indexed by m + l_max. The block is linear in its input (no bias).
    """

    def __init__(self, grid: Grid, channels: int, out_channels: int | None = None, *,
                 l_max: int | None = None, mix: bool = True, init_noise: float = 1e-2,
                 generator: torch.Generator | None = None):
        super().__init__()
        self.transform: SphericalTransform = get_transform(grid.n_lat, l_max)
        L = self.transform.l_max + 1
        self.grid = grid
        self.channels = channels
        self.degree = nn.Parameter(torch.ones(channels, L))
        order = torch.zeros(channels, 2 * L - 1)
        order[:, L - 1] = 1.0
        if init_noise:
            order = order + init_noise * torch.randn(order.shape, generator=generator)
        self.order = nn.Parameter(order)
        out_channels = channels if out_channels is None else out_channels
        if mix:
            self.mix = nn.Parameter(torch.empty(out_channels, channels))
            nn.init.kaiming_uniform_(self.mix, a=math.sqrt(5))
        elif out_channels != channels:
            raise ValueError("changing channel count requires the mixing matrix")
        else:
            self.register_parameter("mix", None)

    @property
    def l_max(self) -> int:
        return self.transform.l_max

    def filters(self) -> tuple[torch.Tensor, torch.Tensor]:
        L = self.l_max + 1
        g_cos = self.degree[:, :, None] * self.order[:, None, L - 1:]
        g_sin = self.degree[:, :, None] * self.order[:, None, :L].flip(-1)
        return g_cos, g_sin

    def forward(self, x):
        if x.shape[1] != self.channels:
            raise ValueError(f"expected {self.channels} channels, got {x.shape[1]}")
        ccos, csin = self.transform.analysis(x)
        g_cos, g_sin = self.filters()
        y = self.transform.synthesis(ccos * g_cos.to(x.dtype), csin * g_sin.to(x.dtype))
        if self.mix is not None:
            y = pointwise(y, self.mix)
        return y


def spherical_conv(x: torch.Tensor, degree, order, mix=None, l_max: int | None = None) -> torch.Tensor:
    """Functional form of :class:`SphericalConv` with explicit parameters."""
    grid = Grid(x.shape[-2])
    grid.check_field(x)
    T = get_transform(grid.n_lat, l_max)
    L = T.l_max + 1
    degree = torch.as_tensor(degree, dtype=x.dtype)
    order = torch.as_tensor(order, dtype=x.dtype)
    if degree.shape[-1] != L or order.shape[-1] != 2 * L - 1:
        raise ValueError(f"filter vectors do not match l_max={T.l_max}")
    ccos, csin = T.analysis(x)
    y = T.synthesis(ccos * degree[..., :, None] * order[..., None, L - 1:],
                    csin * degree[..., :, None] * order[..., None, :L].flip(-1))
    if mix is not None:
        y = pointwise(y, torch.as_tensor(mix, dtype=x.dtype))
    return y


# windowed attention ---------------------------------------------------------


def window_partitions(h: int, w: int, window: tuple[int, int], shift: tuple[int, int]) -> list[np.ndarray]:
    """Flat cell indices of each (possibly shifted) window on an h x w field."""
    wh, ww = window
    rows = (np.arange(h) + shift[0]) % h
    cols = (np.arange(w) + shift[1]) % w
    idx = (rows[:, None] * w + cols[None, :])
    out = []
    for i in range(0, h, wh):
        for j in range(0, w, ww):
            out.append(idx[i:i + wh, j:j + ww].ravel())
    return out


class WindowAttention(nn.Module):
    """Multi-head self-attention inside (optionally cyclically shifted) windows.

    Longitude is periodic, so shifted windows that straddle the dateline are
    genuine neighbours and are not masked. Windows that wrap across the poles
    after the latitude roll are masked so no attention crosses them.
    """

    def __init__(self, dim: int, heads: int, window: tuple[int, int], shifted: bool = False):
        super().__init__()
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by {heads} heads")
        self.dim = dim
        self.heads = heads
        self.window = tuple(window)
        self.shifted = shifted
        self.scale = (dim // heads) ** -0.5
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        wh, ww = self.window
        self.rel_bias = nn.Parameter(torch.zeros((2 * wh - 1) * (2 * ww - 1), heads))
        nn.init.trunc_normal_(self.rel_bias, std=0.02)
        ch, cw = torch.meshgrid(torch.arange(wh), torch.arange(ww), indexing="ij")
        coords = torch.stack((ch.flatten(), cw.flatten()))
        rel = coords[:, :, None] - coords[:, None, :]
        index = (rel[0] + wh - 1) * (2 * ww - 1) + (rel[1] + ww - 1)
        self.register_buffer("rel_index", index, persistent=False)

    def effective(self, h: int, w: int) -> tuple[tuple[int, int], tuple[int, int]]:
        wh, ww = self.window
        if h % wh or w % ww:
            raise ValueError(f"field {h}x{w} not divisible by window {wh}x{ww}")
        if not self.shifted:
            return (wh, ww), (0, 0)
        return (wh, ww), (wh // 2 if wh < h else 0, ww // 2 if ww < w else 0)

    def _mask(self, h, w, shift, device):
        wh, ww = self.window
        if shift[0] == 0:
            return None
        region = torch.zeros(h, dtype=torch.long)
        region[h - wh:h - shift[0]] = 1
        region[h - shift[0]:] = 2
        region = region[:, None].expand(h, w)
        win = region.reshape(h // wh, wh, w // ww, ww).permute(0, 2, 1, 3).reshape(-1, wh * ww)
        same = win[:, :, None] == win[:, None, :]
        mask = torch.zeros(same.shape, device=device)
        return mask.masked_fill(~same, float("-inf"))

    def forward(self, x):
        B, C, H, W = x.shape
        (wh, ww), shift = self.effective(H, W)
        if shift != (0, 0):
            x = torch.roll(x, shifts=(-shift[0], -shift[1]), dims=(2, 3))
        nh, nw = H // wh, W // ww
        t = x.reshape(B, C, nh, wh, nw, ww).permute(0, 2, 4, 3, 5, 1).reshape(B * nh * nw, wh * ww, C)
        qkv = self.qkv(t).reshape(t.shape[0], wh * ww, 3, self.heads, C // self.heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = (q * self.scale) @ k.transpose(-2, -1)
        bias = self.rel_bias[self.rel_index.reshape(-1)].reshape(wh * ww, wh * ww, -1).permute(2, 0, 1)
        attn = attn + bias.to(attn.dtype)[None]
        mask = self._mask(H, W, shift, x.device)
        if mask is not None:
            attn = attn.reshape(B, nh * nw, self.heads, wh * ww, wh * ww) + mask.to(attn.dtype)[None, :, None]
            attn = attn.reshape(-1, self.heads, wh * ww, wh * ww)
        attn = attn.softmax(dim=-1)
        t = (attn @ v).transpose(1, 2).reshape(t.shape[0], wh * ww, C)
        t = self.proj(t)
        y = t.reshape(B, nh, nw, wh, ww, C).permute(0, 5, 1, 3, 2, 4).reshape(B, C, H, W)
        if shift != (0, 0):
            y = torch.roll(y, shifts=shift, dims=(2, 3))
        return y


def fit_window(window: Sequence[int], h: int, w: int) -> tuple[int, int]:
    """Shrink a window to the field when the field is smaller."""
    return (min(window[0], h), min(window[1], w))


class SwinBlock(nn.Module):
    def __init__(self, dim: int, heads: int, window: tuple[int, int], shifted: bool, mlp_ratio: float = 2.0):
        super().__init__()
        self.norm1 = ChannelNorm(dim)
        self.attn = WindowAttention(dim, heads, window, shifted)
        self.norm2 = ChannelNorm(dim)
        hidden = int(dim * mlp_ratio)
        self.fc1 = Pointwise(dim, hidden)
        self.fc2 = Pointwise(hidden, dim)

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.fc2(F.gelu(self.fc1(self.norm2(x))))


class SphericalBlock(nn.Module):
    """Residual spherical-convolution block: norm, sifting filter + mix, GELU, 1x1."""

    def __init__(self, grid: Grid, dim: int, *, generator=None):
        super().__init__()
        self.norm = ChannelNorm(dim)
        self.conv = SphericalConv(grid, dim, generator=generator)
        self.out = Pointwise(dim, dim)

    def forward(self, x):
        return x + self.out(F.gelu(self.conv(self.norm(x))))


# grid convolution -----------------------------------------------------------


def dilation_activity(grid: Grid, dilations: Sequence[int], factor: float = 0.75) -> np.ndarray:
    """(n_lat, n_dil) bool table; dilation d is active where 1/cos(lat) >= factor * d."""
    inv_cos = 1.0 / np.cos(np.deg2rad(grid.lat_centers))
    return inv_cos[:, None] >= factor * np.asarray(dilations, dtype=np.float64)[None, :]


def pole_pad(x: torch.Tensor, rows: int) -> torch.Tensor:
    """Pad latitude by reflecting across each pole with a 180 degree roll."""
    if rows == 0:
        return x
    if rows > x.shape[-2]:
        raise ValueError("pole padding wider than the field")
    half = x.shape[-1] // 2
    top = torch.roll(x[..., :rows, :].flip(-2), half, dims=-1)
    bottom = torch.roll(x[..., -rows:, :].flip(-2), half, dims=-1)
    return torch.cat((top, x, bottom), dim=-2)


def _dilated_conv(xp: torch.Tensor, weight, bias, d: int) -> torch.Tensor:
    """Conv on a latitude-padded tensor, circular in longitude with dilation d."""
    pw = d * (weight.shape[-1] // 2)
    if pw:
        xp = torch.cat((xp[..., -pw:], xp, xp[..., :pw]), dim=-1)
    return F.conv2d(xp, weight, bias, dilation=(1, d))


def _runs(mask: np.ndarray) -> list[tuple[int, int]]:
    out, start = [], None
    for i, m in enumerate(mask):
        if m and start is None:
            start = i
        elif not m and start is not None:
            out.append((start, i))
            start = None
    if start is not None:
        out.append((start, len(mask)))
    return out


class GridConv(nn.Module):
    """Shared kernel applied at several longitudinal dilations, blended per row.

    Row weights are a softmax over the dilations active at that row, so every
    row's weights form a simplex with zeros on inactive dilations. Inactive
    (row, dilation) pairs are never computed.
    """

    def __init__(self, grid: Grid, c_in: int, c_out: int, kernel: tuple[int, int] = (3, 3),
                 dilations: Sequence[int] = (1, 2, 4), factor: float = 0.75):
        super().__init__()
        if any(k % 2 == 0 for k in kernel):
            raise ValueError("kernel sizes must be odd")
        dilations = tuple(int(d) for d in dilations)
        if min(dilations) < 1 or max(dilations) * (kernel[1] // 2) >= grid.n_lon:
            raise ValueError(f"dilations {dilations} do not fit {grid.n_lon} longitudes")
        self.grid = grid
        self.dilations = dilations
        self.weight = nn.Parameter(torch.empty(c_out, c_in, *kernel))
        nn.init.kaiming_uniform_(self.weight, a=math.sqrt(5))
        self.bias = nn.Parameter(torch.zeros(c_out))
        active = dilation_activity(grid, dilations, factor)
        if not active.any(axis=1).all():
            raise ValueError("every row needs at least one active dilation")
        self.register_buffer("active", torch.as_tensor(active), persistent=False)
        self.row_logits = nn.Parameter(torch.zeros(grid.n_lat, len(dilations)))
        self._runs = [_runs(active[:, i]) for i in range(len(dilations))]

    def row_weights(self) -> torch.Tensor:
        logits = self.row_logits.masked_fill(~self.active, float("-inf"))
        return torch.softmax(logits, dim=1)

    def forward(self, x):
        self.grid.check_field(x)
        weight = self.weight.to(x.dtype)
        rw = self.row_weights().to(x.dtype)
        ph = weight.shape[-2] // 2
        xp = pole_pad(x, ph)
        H = x.shape[-2]
        out = None
        for i, d in enumerate(self.dilations):
            pieces, cursor = [], 0
            for start, stop in self._runs[i]:
                if start > cursor:
                    pieces.append(x.new_zeros(x.shape[0], weight.shape[0], start - cursor, x.shape[-1]))
                y = _dilated_conv(xp[..., start:stop + 2 * ph, :], weight, None, d)
                pieces.append(y * rw[start:stop, i][:, None])
                cursor = stop
            if not pieces:
                continue
            if cursor < H:
                pieces.append(x.new_zeros(x.shape[0], weight.shape[0], H - cursor, x.shape[-1]))
            contrib = torch.cat(pieces, dim=-2) if len(pieces) > 1 else pieces[0]
            out = contrib if out is None else out + contrib
        return out + self.bias.to(x.dtype)[:, None, None]

    def forward_naive(self, x):
        """Reference path: every dilation on every row, then the weighted sum."""
        weight = self.weight.to(x.dtype)
        rw = self.row_weights().to(x.dtype)
        xp = pole_pad(x, weight.shape[-2] // 2)
        out = 0.0
        for i, d in enumerate(self.dilations):
            out = out + _dilated_conv(xp, weight, None, d) * rw[:, i][:, None]
        return out + self.bias.to(x.dtype)[:, None, None]


# resampling -------------------------------------------------------------------


def resample(x: torch.Tensor, direction: str) -> torch.Tensor:
    """Halve (``"down"``) or double (``"up"``) a cell-centered lat-lon field.

    Down is 2x2 area-weighted averaging; up is bilinear with longitude
    wraparound and clamped latitude edges. Both are written as interpolations
    a + t * (b - a) so constants pass through bitwise.
    """
    H, W = x.shape[-2:]
    if direction == "down":
        if H % 2 or W % 2:
            raise ValueError(f"cannot downsample odd dimensions {H}x{W}")
        w = torch.as_tensor(Grid(H).area_weights, dtype=x.dtype, device=x.device)
        t = (w[1::2] / (w[0::2] + w[1::2]))[:, None]
        lon = (x[..., 0::2] + x[..., 1::2]) / 2
        a, b = lon[..., 0::2, :], lon[..., 1::2, :]
        return a + t * (b - a)
    if direction == "up":
        # fine index 2k -> coarse k - 1/4, fine 2k + 1 -> coarse k + 1/4
        up_lat = torch.cat((x[..., :1, :], x[..., :-1, :]), dim=-2)
        dn_lat = torch.cat((x[..., 1:, :], x[..., -1:, :]), dim=-2)
        rows = torch.stack((x + 0.25 * (up_lat - x), x + 0.25 * (dn_lat - x)), dim=-2)
        rows = rows.reshape(*x.shape[:-2], 2 * H, W)
        left = torch.roll(rows, 1, dims=-1)
        right = torch.roll(rows, -1, dims=-1)
        cols = torch.stack((rows + 0.25 * (left - rows), rows + 0.25 * (right - rows)), dim=-1)
        return cols.reshape(*x.shape[:-2], 2 * H, 2 * W)
    raise ValueError(f"direction must be 'down' or 'up', got {direction!r}")


# spectral normalization ---------------------------------------------------------


class CappedSpectralNorm(nn.Module):
    """Parametrization W -> W * min(1, cap / sigma_hat(W)).

    sigma_hat comes from power iteration with persistent vectors, one step per
    call in training mode. A zero matrix passes through unchanged.
    """

    def __init__(self, weight: torch.Tensor, cap: float = 2.0, eps: float = 1e-12,
                 generator: torch.Generator | None = None):
        super().__init__()
        mat = weight.detach().reshape(weight.shape[0], -1)
        self.cap = cap
        self.eps = eps
        u = torch.randn(mat.shape[0], generator=generator, dtype=mat.dtype)
        v = torch.randn(mat.shape[1], generator=generator, dtype=mat.dtype)
        self.register_buffer("u", u / u.norm().clamp_min(eps))
        self.register_buffer("v", v / v.norm().clamp_min(eps))

    @torch.no_grad()
    def power_step(self, mat: torch.Tensor, steps: int = 1) -> None:
        u, v = self.u.to(mat.dtype), self.v.to(mat.dtype)
        for _ in range(steps):
            v = mat.t() @ u
            v = v / v.norm().clamp_min(self.eps)
            u = mat @ v
            u = u / u.norm().clamp_min(self.eps)
        self.u.copy_(u)
        self.v.copy_(v)

    def sigma(self, weight: torch.Tensor) -> torch.Tensor:
        mat = weight.reshape(weight.shape[0], -1)
        # clones: later power steps update the buffers in place
        return self.u.to(mat.dtype).clone() @ mat @ self.v.to(mat.dtype).clone()

    def forward(self, weight):
        mat = weight.reshape(weight.shape[0], -1)
        if self.training:
            self.power_step(mat.detach())
        sigma = self.sigma(weight)
        if float(sigma.detach().abs()) <= self.eps:
            return weight
        return weight * torch.clamp(self.cap / sigma.abs(), max=1.0)


def apply_spectral_cap(module: nn.Module, name: str = "weight", cap: float = 2.0,
                       generator: torch.Generator | None = None) -> nn.Module:
    weight = getattr(module, name)
    parametrize.register_parametrization(module, name, CappedSpectralNorm(weight, cap, generator=generator))
    return module


def spectral_norm_apply(W, state: CappedSpectralNorm, training: bool = True):
    """Functional form: one power-iteration step on ``state``, then the cap."""
    state.train(training)
    return state(torch.as_tensor(W))
