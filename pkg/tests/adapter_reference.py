"""Straight-line numpy reference for both adapters.

Everything here is written against named weight arrays, with convolutions
built from sliding windows and the spectrum handled by numpy's FFT. It
shares no code with the package and exists only to cross-check the torch
implementation.
"""

import numpy as np
from scipy.special import erf


def conv2d(x, w, b=None, pad=0, groups=1):
    """Cross-correlation for NCHW input and OIHW weights."""
    bsz, cin, _, _ = x.shape
    cout, cin_g, kh, kw = w.shape
    assert cin == cin_g * groups
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    # win: (B, C, H', W', kh, kw)
    outs = []
    og = cout // groups
    for g in range(groups):
        wg = win[:, g * cin_g:(g + 1) * cin_g]
        kg = w[g * og:(g + 1) * og]
        outs.append(np.einsum("bchwij,ocij->bohw", wg, kg))
    out = np.concatenate(outs, axis=1)
    if b is not None:
        out = out + b[None, :, None, None]
    return out


def relu(x):
    return np.maximum(x, 0.0)


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def gelu(x):
    return 0.5 * x * (1.0 + erf(x / np.sqrt(2.0)))


def sfa_forward(p, adapt_factor, x, freq_bypass=False, return_f_up=False):
    """p maps layer names to (weight, bias) numpy arrays; se_alpha is a scalar."""
    _, _, h, w = x.shape

    pooled = x.mean(axis=(2, 3), keepdims=True)
    gate_c = sigmoid(conv2d(relu(conv2d(pooled, p["se_down"][0])), p["se_up"][0]))
    xse = p["se_alpha"] * gate_c * x
    z = conv2d(x + xse, p["down1"][0], p["down1"][1])

    s_up = conv2d(z, p["spatial_dw"][0], p["spatial_dw"][1], pad=2, groups=z.shape[1]) \
        * conv2d(x, p["gate"][0], p["gate"][1])
    s = conv2d(relu(s_up), p["spatial_up"][0], p["spatial_up"][1])

    spec = np.fft.rfft2(z, axes=(2, 3))
    amp, phase = np.abs(spec), np.angle(spec)
    if freq_bypass:
        mod = amp
    else:
        a = conv2d(gelu(conv2d(amp, p["freq_dw"][0], p["freq_dw"][1], pad=1,
                               groups=amp.shape[1])),
                   p["freq_amp"][0], p["freq_amp"][1])
        mod = a * sigmoid(a)
    spec = mod * np.cos(phase) + 1j * mod * np.sin(phase)
    f_up = np.fft.irfft2(spec, s=(h, w), axes=(2, 3))
    if return_f_up:
        return f_up
    f = conv2d(relu(f_up), p["freq_up"][0], p["freq_up"][1])

    cin = x.shape[1]
    s = relu(conv2d(s, p["shared_dw"][0], pad=1, groups=cin))
    f = relu(conv2d(f, p["shared_dw"][0], pad=1, groups=cin))
    fused = conv2d(relu(conv2d(np.concatenate([s, f], axis=1), p["fuse_down"][0])),
                   p["fuse_up"][0])

    return x + xse + fused * adapt_factor


def sca_forward(p, adapt_factor, t):
    refined = t + conv2d(relu(conv2d(t, p["refine_down"][0])), p["refine_up"][0])
    pooled = refined.mean(axis=(2, 3), keepdims=True)
    g = sigmoid(conv2d(relu(conv2d(pooled, p["se_down"][0], p["se_down"][1])),
                       p["se_up"][0], p["se_up"][1]))
    return refined * g * adapt_factor


def extract_params(adapter):
    """Pull named (weight, bias) numpy pairs out of a torch adapter."""
    p = {}
    for name, module in adapter.named_modules():
        if hasattr(module, "weight") and name:
            w = module.weight.detach().double().numpy()
            b = module.bias.detach().double().numpy() if module.bias is not None else None
            p[name] = (w, b)
    if hasattr(adapter, "se_alpha"):
        p["se_alpha"] = float(adapter.se_alpha.detach())
    return p
