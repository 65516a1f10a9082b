"""Feature-map adapters: a spatial-frequency fidelity adapter for the codec
transforms and a channel-context adapter for the entropy model.

Both adapters preserve the input shape and are pure functions of
(parameters, input), so they can be dropped into any (B, C, H, W) feature
path of the host network.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

INIT_SCHEMES = ("default-random", "zero-bias-random", "all-zero-weights")


class AdapterConfigError(ValueError):
    """Raised when an adapter configuration violates its invariants."""


@dataclass(frozen=True)
class SfaConfig:
    """Configuration of one structural fidelity adapter instance.

    in_dim: channel count of the host feature map.
    middle_dim: bottleneck width of the shared low-rank representation;
        must be strictly smaller than in_dim.
    se_reduction: divisor for the channel-excitation bottleneck.
    se_factor: initial value of the learnable excitation scalar.
    adapt_factor: fixed scalar applied to the fused branch output.
    """

    in_dim: int
    middle_dim: int
    se_reduction: int = 16
    se_factor: float = 1.0
    adapt_factor: float = 1.0

    def validate(self) -> None:
        if self.in_dim < 2:
            raise AdapterConfigError(f"in_dim must be >= 2, got {self.in_dim}")
        if not (1 <= self.middle_dim < self.in_dim):
            raise AdapterConfigError(
                f"middle_dim must satisfy 1 <= middle_dim < in_dim, "
                f"got middle_dim={self.middle_dim}, in_dim={self.in_dim}"
            )
        if self.se_reduction < 1 or self.in_dim // self.se_reduction < 1:
            raise AdapterConfigError(
                f"se_reduction={self.se_reduction} leaves no excitation "
                f"channels for in_dim={self.in_dim}"
            )
        for name in ("se_factor", "adapt_factor"):
            v = getattr(self, name)
            if not torch.isfinite(torch.tensor(float(v))):
                raise AdapterConfigError(f"{name} must be finite, got {v}")

    @property
    def se_hidden(self) -> int:
        return self.in_dim // self.se_reduction

    @property
    def fuse_hidden(self) -> int:
        return self.in_dim // 2


@dataclass(frozen=True)
class ScaConfig:
    """Configuration of one semantic context adapter instance."""

    channels: int
    reduction_ratio: int = 8
    adapt_factor: float = 1.0

    def validate(self) -> None:
        if self.channels < 1:
            raise AdapterConfigError(f"channels must be >= 1, got {self.channels}")
        if self.reduction_ratio < 1:
            raise AdapterConfigError(
                f"reduction_ratio must be >= 1, got {self.reduction_ratio}"
            )
        if not torch.isfinite(torch.tensor(float(self.adapt_factor))):
            raise AdapterConfigError(f"adapt_factor must be finite, got {self.adapt_factor}")

    @property
    def hidden(self) -> int:
        return max(4, self.channels // self.reduction_ratio)


def _check_input(x: torch.Tensor, channels: int, who: str) -> None:
    if x.dim() != 4:
        raise ValueError(f"{who} expects a (B, C, H, W) input, got shape {tuple(x.shape)}")
    if x.shape[1] != channels:
        raise ValueError(
            f"{who} configured for {channels} channels, input has {x.shape[1]}"
        )
    if not torch.isfinite(x).all():
        raise ValueError(f"{who} received non-finite input")


class SfaAdapter(nn.Module):
    """Structural fidelity adapter.

    Three stages: (I) channel excitation plus a 1x1 bottleneck projection,
    (II) a spatial branch (gated 5x5 depth-wise conv) and a frequency
    branch (amplitude modulation of the real 2-D spectrum with the phase
    reapplied), (III) a soft fusion of both branches through a shared 3x3
    depth-wise conv and a two-layer 1x1 channel mixer. The output keeps two
    residual terms so a zero-initialised adapter stays close to identity.
    """

    def __init__(self, config: SfaConfig):
        config.validate()
        super().__init__()
        self.config = config
        c, m = config.in_dim, config.middle_dim

        self.se_down = nn.Conv2d(c, config.se_hidden, 1, bias=False)
        self.se_up = nn.Conv2d(config.se_hidden, c, 1, bias=False)
        self.se_alpha = nn.Parameter(torch.tensor(float(config.se_factor)))
        self.down1 = nn.Conv2d(c, m, 1)

        self.gate = nn.Conv2d(c, m, 1)
        self.spatial_dw = nn.Conv2d(m, m, 5, padding=2, groups=m)
        self.spatial_up = nn.Conv2d(m, c, 1)

        self.freq_dw = nn.Conv2d(m, m, 3, padding=1, groups=m)
        self.freq_amp = nn.Conv2d(m, m, 1)
        self.freq_up = nn.Conv2d(m, c, 1)

        self.shared_dw = nn.Conv2d(c, c, 3, padding=1, groups=c, bias=False)
        self.fuse_down = nn.Conv2d(2 * c, config.fuse_hidden, 1, bias=False)
        self.fuse_up = nn.Conv2d(config.fuse_hidden, c, 1, bias=False)

    def _excite(self, x: torch.Tensor) -> torch.Tensor:
        w = x.mean(dim=(2, 3), keepdim=True)
        w = torch.sigmoid(self.se_up(F.relu(self.se_down(w))))
        return self.se_alpha * w * x

    def _bottleneck(self, x: torch.Tensor) -> torch.Tensor:
        return self.down1(x + self._excite(x))

    def _frequency_up(self, z: torch.Tensor, h: int, w: int, bypass: bool) -> torch.Tensor:
        spec = torch.fft.rfft2(z, dim=(2, 3), norm="backward")
        amp, phase = torch.abs(spec), torch.angle(spec)
        if bypass:
            mod = amp
        else:
            a = self.freq_amp(F.gelu(self.freq_dw(amp)))
            mod = a * torch.sigmoid(a)
        spec = torch.complex(mod * torch.cos(phase), mod * torch.sin(phase))
        return torch.fft.irfft2(spec, s=(h, w), dim=(2, 3), norm="backward")

    def frequency_branch(self, x: torch.Tensor, bypass: bool = False) -> torch.Tensor:
        """Return the pre-activation inverse-transform map of the frequency
        branch. With bypass=True the raw amplitude is kept, which makes the
        branch an exact round trip of the bottleneck representation."""
        _check_input(x, self.config.in_dim, "SfaAdapter")
        _, _, h, w = x.shape
        return self._frequency_up(self._bottleneck(x), h, w, bypass)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        _check_input(x, self.config.in_dim, "SfaAdapter")
        _, _, h, w = x.shape

        xse = self._excite(x)
        z = self.down1(x + xse)

        s_up = self.spatial_dw(z) * self.gate(x)
        s = self.spatial_up(F.relu(s_up))

        f_up = self._frequency_up(z, h, w, bypass=False)
        f = self.freq_up(F.relu(f_up))

        s = F.relu(self.shared_dw(s))
        f = F.relu(self.shared_dw(f))
        fused = self.fuse_up(F.relu(self.fuse_down(torch.cat([s, f], dim=1))))

        return x + xse + fused * self.config.adapt_factor


class ScaAdapter(nn.Module):
    """Semantic context adapter.

    A residual channel refinement gated by a squeeze-and-excitation vector
    computed from the refined map. Unlike the fidelity adapter this is a
    full transform of its input, not an additive correction: with all-zero
    weights it returns 0.5 * input (the sigmoid gate at zero).
    """

    def __init__(self, config: ScaConfig):
        config.validate()
        super().__init__()
        self.config = config
        c, hid = config.channels, config.hidden

        self.refine_down = nn.Conv2d(c, hid, 1, bias=False)
        self.refine_up = nn.Conv2d(hid, c, 1, bias=False)
        self.se_down = nn.Conv2d(c, hid, 1)
        self.se_up = nn.Conv2d(hid, c, 1)

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        _check_input(t, self.config.channels, "ScaAdapter")
        refined = t + self.refine_up(F.relu(self.refine_down(t)))
        g = refined.mean(dim=(2, 3), keepdim=True)
        g = torch.sigmoid(self.se_up(F.relu(self.se_down(g))))
        return refined * g * self.config.adapt_factor


def _conv_inits(conv: nn.Conv2d, gen: torch.Generator, scheme: str) -> None:
    fan_in = conv.in_channels // conv.groups * conv.kernel_size[0] * conv.kernel_size[1]
    bound = 1.0 / fan_in**0.5
    if scheme == "all-zero-weights":
        nn.init.zeros_(conv.weight)
    else:
        with torch.no_grad():
            conv.weight.uniform_(-bound, bound, generator=gen)
    if conv.bias is not None:
        if scheme == "default-random":
            with torch.no_grad():
                conv.bias.uniform_(-bound, bound, generator=gen)
        else:
            nn.init.zeros_(conv.bias)


def init_adapter_params(
    config: SfaConfig | ScaConfig, seed: int, scheme: str = "default-random"
) -> SfaAdapter | ScaAdapter:
    """Build an adapter with deterministic parameters.

    default-random draws weights and biases from the fan-in-scaled uniform
    distribution; zero-bias-random keeps random weights but zeroes every
    bias; all-zero-weights zeroes everything except the excitation scalar,
    which always starts at se_factor.
    """
    if scheme not in INIT_SCHEMES:
        raise AdapterConfigError(f"unknown init scheme {scheme!r}; expected one of {INIT_SCHEMES}")
    config.validate()
    gen = torch.Generator().manual_seed(seed)
    adapter: SfaAdapter | ScaAdapter
    adapter = SfaAdapter(config) if isinstance(config, SfaConfig) else ScaAdapter(config)
    # Fixed traversal order keeps (config, seed, scheme) -> params bit-stable.
    for _, module in sorted(adapter.named_modules()):
        if isinstance(module, nn.Conv2d):
            _conv_inits(module, gen, scheme)
    if isinstance(adapter, SfaAdapter):
        with torch.no_grad():
            adapter.se_alpha.fill_(float(config.se_factor))
    return adapter


def adapter_param_count(config: SfaConfig | ScaConfig) -> int:
    """Exact trainable scalar count, enumerated from the layer signatures."""
    config.validate()
    if isinstance(config, SfaConfig):
        c, m, h = config.in_dim, config.middle_dim, config.se_hidden
        fuse = config.fuse_hidden
        return (
            c * h + h * c            # excitation pair, no bias
            + 1                      # excitation scalar
            + (c * m + m)            # bottleneck projection
            + (c * m + m)            # spatial gate
            + (m * 25 + m)           # 5x5 depth-wise
            + (m * c + c)            # spatial up-projection
            + (m * 9 + m)            # 3x3 depth-wise (frequency)
            + (m * m + m)            # amplitude map
            + (m * c + c)            # frequency up-projection
            + c * 9                  # shared 3x3 depth-wise, no bias
            + 2 * c * fuse           # fusion down, no bias
            + fuse * c               # fusion up, no bias
        )
    c, hid = config.channels, config.hidden
    return (
        c * hid + hid * c            # refine pair, no bias
        + (c * hid + hid)            # SE down, with bias
        + (hid * c + c)              # SE up, with bias
    )
