"""Small convolutional hyperprior codec with adapter insertion points.

The backbone is a 3-stage stride-2 analysis/synthesis pair with leaky
rectification plus a 2-stage hyper path that predicts per-element (mu,
sigma) for a mean-scale Gaussian conditional. Quantization is
mean-centered (code round(y - mu), reconstruct + mu) and the coded
residual alphabet is the integer range [-127, 128] with tail mass folded
into the edge bins.
"""

from __future__ import annotations

import hashlib
import json
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from scipy.special import ndtr
from torch import nn

from .adapters import ScaConfig, SfaConfig, init_adapter_params
from .rangecoder import (RangeDecoder, RangeEncoder, decode_symbols,
                         encode_symbols, quantize_pmf)

PROB_FLOOR = 1e-9
RESIDUAL_MIN, RESIDUAL_MAX = -127, 128
BITSTREAM_MAGIC = b"S2CT"
BITSTREAM_VERSION = 1

BASE_PREFIXES = ("g_a.", "g_s.", "h_a.", "h_s.", "z_prior.")
ADAPTER_PREFIXES = ("enc_adapters.", "dec_adapters.", "ha_adapter.", "hs_adapter.")


class CodecError(ValueError):
    pass


class BitstreamError(RuntimeError):
    pass


class DivergenceError(RuntimeError):
    """Non-finite loss: training or evaluation has blown up."""


@dataclass(frozen=True)
class CodecConfig:
    input_channels: int = 3
    stage_widths: tuple[int, ...] = (32, 32, 48)
    latent_channels: int = 48
    hyper_widths: tuple[int, int] = (32, 32)
    hyper_latent_channels: int = 16
    sigma_floor: float = 0.11
    patch_size: int = 64

    def validate(self) -> None:
        widths = (self.input_channels, self.latent_channels,
                  self.hyper_latent_channels, *self.stage_widths, *self.hyper_widths)
        if any(w < 1 for w in widths):
            raise CodecError("all channel widths must be >= 1")
        if len(self.stage_widths) != 3:
            raise CodecError("exactly 3 analysis stages are supported")
        if self.stage_widths[-1] != self.latent_channels:
            raise CodecError("last stage width must equal latent_channels")
        if self.sigma_floor <= 0:
            raise CodecError("sigma_floor must be positive")
        if self.patch_size % self.total_downsampling != 0:
            raise CodecError(
                f"patch_size must be divisible by {self.total_downsampling}"
            )

    @property
    def y_downsampling(self) -> int:
        return 2 ** len(self.stage_widths)

    @property
    def total_downsampling(self) -> int:
        return self.y_downsampling * 4

    def to_dict(self) -> dict:
        return {
            "input_channels": self.input_channels,
            "stage_widths": list(self.stage_widths),
            "latent_channels": self.latent_channels,
            "hyper_widths": list(self.hyper_widths),
            "hyper_latent_channels": self.hyper_latent_channels,
            "sigma_floor": self.sigma_floor,
            "patch_size": self.patch_size,
        }


@dataclass(frozen=True)
class AdapterSpec:
    """Knobs used to derive per-site adapter configs from channel counts."""

    sfa_middle_div: int = 2
    sfa_se_reduction: int = 16
    sfa_se_factor: float = 1.0
    sfa_adapt_factor: float = 1.0
    sca_reduction_ratio: int = 8
    sca_adapt_factor: float = 1.0
    init_scheme: str = "default-random"

    def site_config(self, kind: str, channels: int) -> SfaConfig | ScaConfig:
        if kind == "sfa":
            middle = max(1, channels // self.sfa_middle_div)
            return SfaConfig(channels, middle, self.sfa_se_reduction,
                             self.sfa_se_factor, self.sfa_adapt_factor)
        if kind == "sca":
            return ScaConfig(channels, self.sca_reduction_ratio, self.sca_adapt_factor)
        raise CodecError(f"unknown adapter kind {kind!r}")

    def to_dict(self) -> dict:
        return {
            "sfa_middle_div": self.sfa_middle_div,
            "sfa_se_reduction": self.sfa_se_reduction,
            "sfa_se_factor": self.sfa_se_factor,
            "sfa_adapt_factor": self.sfa_adapt_factor,
            "sca_reduction_ratio": self.sca_reduction_ratio,
            "sca_adapt_factor": self.sca_adapt_factor,
            "init_scheme": self.init_scheme,
        }


PLACEMENT_KINDS = ("none", "sfa", "sca")


@dataclass(frozen=True)
class Placement:
    """Which adapter kind sits in the transforms and in the entropy model.

    The transform sites are after each analysis stage and before each
    synthesis stage; the entropy sites are the symmetric middle layers of
    the hyper-analysis and hyper-synthesis paths.
    """

    encdec: str = "none"
    entropy: str = "none"

    def validate(self) -> None:
        for name in ("encdec", "entropy"):
            if getattr(self, name) not in PLACEMENT_KINDS:
                raise CodecError(
                    f"placement.{name} must be one of {PLACEMENT_KINDS}, "
                    f"got {getattr(self, name)!r}"
                )

    def to_dict(self) -> dict:
        return {"encdec": self.encdec, "entropy": self.entropy}


# Table-6 style strategy rows, plus the raw base codec.
PLACEMENT_MATRIX: dict[str, Placement] = {
    "a": Placement("sca", "none"),
    "b": Placement("sca", "sca"),
    "c": Placement("sca", "sfa"),
    "d": Placement("sfa", "none"),
    "e": Placement("sfa", "sfa"),
    "f": Placement("sfa", "sca"),
}


class _LowerBound(torch.autograd.Function):
    """max(x, bound) whose gradient lets the optimizer push x back above
    the bound but never deeper below it."""

    @staticmethod
    def forward(ctx, x, bound):
        ctx.save_for_backward(x)
        ctx.bound = bound
        return torch.clamp(x, min=bound)

    @staticmethod
    def backward(ctx, grad_output):
        (x,) = ctx.saved_tensors
        keep = (x >= ctx.bound) | (grad_output < 0)
        return keep.to(grad_output.dtype) * grad_output, None


def lower_bound(x: torch.Tensor, bound: float) -> torch.Tensor:
    return _LowerBound.apply(x, bound)


def quantize(v: torch.Tensor, mu: torch.Tensor | None = None, *,
             mode: str = "eval-round",
             generator: torch.Generator | None = None) -> torch.Tensor:
    """train-noise adds i.i.d. uniform noise on [-0.5, 0.5); eval-round is
    mean-centered rounding with half-to-even ties."""
    if mode == "train-noise":
        noise = torch.rand(v.shape, dtype=v.dtype, device=v.device, generator=generator) - 0.5
        return v + noise
    if mode == "eval-round":
        if mu is None:
            return torch.round(v)
        return torch.round(v - mu) + mu
    raise CodecError(f"unknown quantize mode {mode!r}")


def estimate_rate(y_hat: torch.Tensor, mu: torch.Tensor, sigma: torch.Tensor,
                  sigma_floor: float = 0.11) -> torch.Tensor:
    """Total bits of y_hat under the discretized Gaussian N(mu, sigma)."""
    if not (torch.isfinite(mu).all() and torch.isfinite(sigma).all()):
        raise CodecError("non-finite Gaussian parameters")
    if sigma.min() < sigma_floor - 1e-6:
        raise CodecError(f"sigma below floor {sigma_floor}: min={float(sigma.min())}")
    r = y_hat - mu
    p = torch.special.ndtr((r + 0.5) / sigma) - torch.special.ndtr((r - 0.5) / sigma)
    return -torch.log2(torch.clamp(p, min=PROB_FLOOR)).sum()


class ChannelGaussianPrior(nn.Module):
    """Per-channel learned (mu, sigma) discretized Gaussian for the
    hyper-latent."""

    def __init__(self, channels: int, sigma_floor: float):
        super().__init__()
        self.sigma_floor = sigma_floor
        self.mu = nn.Parameter(torch.zeros(1, channels, 1, 1))
        self.raw_sigma = nn.Parameter(torch.ones(1, channels, 1, 1))

    def params(self) -> tuple[torch.Tensor, torch.Tensor]:
        return self.mu, lower_bound(self.raw_sigma, self.sigma_floor)


def estimate_rate_z(z_hat: torch.Tensor, prior: ChannelGaussianPrior) -> torch.Tensor:
    mu, sigma = prior.params()
    return estimate_rate(z_hat, mu.expand_as(z_hat), sigma.expand_as(z_hat),
                         prior.sigma_floor)


@dataclass
class LatentPack:
    y: torch.Tensor
    y_hat: torch.Tensor
    z: torch.Tensor
    z_hat: torch.Tensor
    mu: torch.Tensor
    sigma: torch.Tensor
    rate_y_bits: float = 0.0
    rate_z_bits: float = 0.0

    @property
    def total_bits(self) -> float:
        return self.rate_y_bits + self.rate_z_bits


def _init_conv_defaults(module: nn.Module, seed: int) -> None:
    gen = torch.Generator().manual_seed(seed)
    for _, m in sorted(module.named_modules()):
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
            if isinstance(m, nn.ConvTranspose2d):
                fan_in = m.in_channels * m.kernel_size[0] * m.kernel_size[1]
            else:
                fan_in = m.in_channels // m.groups * m.kernel_size[0] * m.kernel_size[1]
            bound = 1.0 / fan_in**0.5
            with torch.no_grad():
                m.weight.uniform_(-bound, bound, generator=gen)
                if m.bias is not None:
                    m.bias.uniform_(-bound, bound, generator=gen)


class HyperpriorCodec(nn.Module):
    """Analysis/synthesis transforms plus the hyper entropy path, with
    optional adapters at the declared sites. Construction is fully
    deterministic given (config, placement, adapter_spec, seeds)."""

    def __init__(self, config: CodecConfig, placement: Placement = Placement(),
                 adapter_spec: AdapterSpec = AdapterSpec(), *,
                 base_seed: int = 0, adapter_seed: int = 0):
        config.validate()
        placement.validate()
        super().__init__()
        self.config = config
        self.placement = placement
        self.adapter_spec = adapter_spec

        w = config.stage_widths
        cin = config.input_channels
        self.g_a = nn.ModuleList([
            nn.Conv2d(cin, w[0], 5, stride=2, padding=2),
            nn.Conv2d(w[0], w[1], 5, stride=2, padding=2),
            nn.Conv2d(w[1], w[2], 5, stride=2, padding=2),
        ])
        self.g_s = nn.ModuleList([
            nn.ConvTranspose2d(w[2], w[1], 5, stride=2, padding=2, output_padding=1),
            nn.ConvTranspose2d(w[1], w[0], 5, stride=2, padding=2, output_padding=1),
            nn.ConvTranspose2d(w[0], cin, 5, stride=2, padding=2, output_padding=1),
        ])
        hw = config.hyper_widths
        m, cz = config.latent_channels, config.hyper_latent_channels
        self.h_a = nn.ModuleList([
            nn.Conv2d(m, hw[0], 3, stride=2, padding=1),
            nn.Conv2d(hw[0], cz, 3, stride=2, padding=1),
        ])
        self.h_s = nn.ModuleList([
            nn.ConvTranspose2d(cz, hw[1], 3, stride=2, padding=1, output_padding=1),
            nn.ConvTranspose2d(hw[1], 2 * m, 3, stride=2, padding=1, output_padding=1),
        ])
        self.z_prior = ChannelGaussianPrior(cz, config.sigma_floor)
        _init_conv_defaults(self, base_seed)

        enc_channels = list(w)
        dec_channels = [w[2], w[1], w[0]]
        if placement.encdec != "none":
            kind = placement.encdec
            self.enc_adapters = nn.ModuleList([
                init_adapter_params(adapter_spec.site_config(kind, c),
                                    adapter_seed + i, adapter_spec.init_scheme)
                for i, c in enumerate(enc_channels)
            ])
            self.dec_adapters = nn.ModuleList([
                init_adapter_params(adapter_spec.site_config(kind, c),
                                    adapter_seed + 3 + i, adapter_spec.init_scheme)
                for i, c in enumerate(dec_channels)
            ])
        else:
            self.enc_adapters = None
            self.dec_adapters = None
        if placement.entropy != "none":
            kind = placement.entropy
            self.ha_adapter = init_adapter_params(
                adapter_spec.site_config(kind, hw[0]), adapter_seed + 6,
                adapter_spec.init_scheme)
            self.hs_adapter = init_adapter_params(
                adapter_spec.site_config(kind, hw[1]), adapter_seed + 7,
                adapter_spec.init_scheme)
        else:
            self.ha_adapter = None
            self.hs_adapter = None

    # -- forward pieces -------------------------------------------------

    def _check_image(self, x: torch.Tensor) -> None:
        if x.dim() != 4 or x.shape[1] != self.config.input_channels:
            raise CodecError(f"expected (B, {self.config.input_channels}, H, W) input, "
                             f"got {tuple(x.shape)}")
        if x.shape[0] == 0:
            raise CodecError("empty image batch")
        if x.shape[2] % self.config.y_downsampling or x.shape[3] % self.config.y_downsampling:
            raise CodecError(f"H and W must be multiples of {self.config.y_downsampling}")
        if not torch.isfinite(x).all():
            raise CodecError("non-finite image input")
        if x.min() < 0 or x.max() > 1:
            raise CodecError("image values must lie in [0, 1]")

    def encode_analysis(self, x: torch.Tensor) -> torch.Tensor:
        self._check_image(x)
        h = x
        for i, conv in enumerate(self.g_a):
            h = conv(h)
            if i < len(self.g_a) - 1:
                h = F.leaky_relu(h)
            if self.enc_adapters is not None:
                h = self.enc_adapters[i](h)
        return h

    def decode_synthesis(self, y_hat: torch.Tensor) -> torch.Tensor:
        h = y_hat
        for i, deconv in enumerate(self.g_s):
            if self.dec_adapters is not None:
                h = self.dec_adapters[i](h)
            h = deconv(h)
            if i < len(self.g_s) - 1:
                h = F.leaky_relu(h)
        return h

    def hyper_analysis(self, y: torch.Tensor) -> torch.Tensor:
        h = F.leaky_relu(self.h_a[0](y))
        if self.ha_adapter is not None:
            h = self.ha_adapter(h)
        return self.h_a[1](h)

    def hyper_synthesis(self, z_hat: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        h = F.leaky_relu(self.h_s[0](z_hat))
        if self.hs_adapter is not None:
            h = self.hs_adapter(h)
        out = self.h_s[1](h)
        m = self.config.latent_channels
        mu, raw_sigma = out[:, :m], out[:, m:]
        return mu, lower_bound(raw_sigma, self.config.sigma_floor)

    def hyper_round_trip(self, y: torch.Tensor):
        """Eval-mode hyper path: returns (mu, sigma, z, z_hat)."""
        z = self.hyper_analysis(y)
        z_hat = quantize(z, mode="eval-round")
        mu, sigma = self.hyper_synthesis(z_hat)
        return mu, sigma, z, z_hat

    def forward_eval(self, x: torch.Tensor) -> LatentPack:
        with torch.no_grad():
            y = self.encode_analysis(x)
            mu, sigma, z, z_hat = self.hyper_round_trip(y)
            y_hat = quantize(y, mu, mode="eval-round")
            pack = LatentPack(y=y, y_hat=y_hat, z=z, z_hat=z_hat, mu=mu, sigma=sigma)
            pack.rate_y_bits = float(estimate_rate(y_hat, mu, sigma, self.config.sigma_floor))
            pack.rate_z_bits = float(estimate_rate_z(z_hat, self.z_prior))
        return pack

    # -- parameter bookkeeping -------------------------------------------

    def base_parameter_names(self) -> list[str]:
        return [n for n, _ in self.named_parameters() if n.startswith(BASE_PREFIXES)]

    def adapter_parameter_names(self) -> list[str]:
        return [n for n, _ in self.named_parameters() if n.startswith(ADAPTER_PREFIXES)]

    def base_hash(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.base_parameter_names()):
            p = dict(self.named_parameters())[name]
            h.update(name.encode())
            h.update(p.detach().cpu().numpy().tobytes())
        return h.hexdigest()

    def config_hash(self) -> str:
        blob = json.dumps({
            "codec": self.config.to_dict(),
            "placement": self.placement.to_dict(),
            "adapters": self.adapter_spec.to_dict(),
        }, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


def rd_step(model: HyperpriorCodec, x: torch.Tensor, lam: float, distortion_fn, *,
            mode: str = "train-noise",
            generator: torch.Generator | None = None) -> dict:
    """One rate-distortion evaluation: loss = bits/pixel + lam * distortion."""
    if lam <= 0:
        raise CodecError(f"lambda must be positive, got {lam}")
    y = model.encode_analysis(x)
    z = model.hyper_analysis(y)
    z_q = quantize(z, mode=mode, generator=generator)
    mu, sigma = model.hyper_synthesis(z_q)
    y_q = quantize(y, mu, mode=mode, generator=generator)
    rate = estimate_rate(y_q, mu, sigma, model.config.sigma_floor) \
        + estimate_rate_z(z_q, model.z_prior)
    x_hat = model.decode_synthesis(y_q)

    n_pixels = x.shape[0] * x.shape[2] * x.shape[3]
    bpp = rate / n_pixels
    distortion = distortion_fn(x, x_hat)
    loss = bpp + lam * distortion

    mse = F.mse_loss(x_hat.clamp(0, 1), x)
    psnr = -10.0 * torch.log10(torch.clamp(mse, min=1e-10))
    if not torch.isfinite(loss):
        raise DivergenceError(
            f"non-finite loss (rate={float(rate):.3g}, distortion={float(distortion):.3g})"
        )
    return {
        "loss": loss,
        "rate_bits": rate,
        "bpp": bpp,
        "distortion": distortion,
        "mse": float(mse),
        "psnr": float(psnr),
    }


def forward_train(model: HyperpriorCodec, x: torch.Tensor, lam: float, task_net, *,
                  generator: torch.Generator | None = None) -> dict:
    """Training objective with the task-perceptual distortion of a frozen
    task network."""
    return rd_step(model, x, lam, task_net.perceptual_distortion, generator=generator)


# -- lossless coding ------------------------------------------------------


def _residual_pmfs(mu_frac: np.ndarray, sigma: np.ndarray) -> np.ndarray:
    """Tail-folded discretized-Gaussian PMFs over [-127, 128] for each
    (mu, sigma) pair; mu is the non-integer offset of the bin centers."""
    k = np.arange(RESIDUAL_MIN, RESIDUAL_MAX + 1, dtype=np.float64)
    up = ndtr((k[None, :] + 0.5 - mu_frac[:, None]) / sigma[:, None])
    lo = ndtr((k[None, :] - 0.5 - mu_frac[:, None]) / sigma[:, None])
    pmf = up - lo
    pmf[:, 0] += lo[:, 0]
    pmf[:, -1] += 1.0 - up[:, -1]
    return pmf


def _check_symbol_range(r: np.ndarray, what: str) -> None:
    if r.min() < RESIDUAL_MIN or r.max() > RESIDUAL_MAX:
        raise BitstreamError(
            f"{what} symbol out of supported range [{RESIDUAL_MIN}, {RESIDUAL_MAX}]: "
            f"span [{r.min()}, {r.max()}] (sigma or latent blow-up)"
        )


def _z_cdf_table(model: HyperpriorCodec) -> np.ndarray:
    mu, sigma = model.z_prior.params()
    mu = mu.detach().double().numpy().ravel()
    sigma = sigma.detach().double().numpy().ravel()
    return quantize_pmf(_residual_pmfs(mu, sigma))


def compress(model: HyperpriorCodec, x: torch.Tensor) -> bytes:
    """Encode a batch of images into one bitstream container.

    All hyper-latent symbols share one range-coder stream and all latent
    residuals another, so the framing cost stays a small fixed header."""
    model._check_image(x)
    model.eval()
    with torch.no_grad():
        cz_table = _z_cdf_table(model)
        z_enc, y_enc = RangeEncoder(), RangeEncoder()
        for i in range(x.shape[0]):
            y = model.encode_analysis(x[i:i + 1])
            mu, sigma, _, z_hat = model.hyper_round_trip(y)

            z_sym = z_hat.detach().numpy().astype(np.int64)
            _check_symbol_range(z_sym, "hyper-latent")
            cz, hz, wz = z_sym.shape[1:]
            z_cdfs = np.broadcast_to(cz_table[:, None, None, :],
                                     (cz, hz, wz, cz_table.shape[-1]))
            encode_symbols(z_sym.reshape(-1) - RESIDUAL_MIN, z_cdfs, z_enc)

            r = torch.round(y - mu).detach().numpy().astype(np.int64)
            _check_symbol_range(r, "latent residual")
            sig = sigma.detach().double().numpy().reshape(-1)
            y_cdfs = quantize_pmf(_residual_pmfs(np.zeros_like(sig), sig))
            encode_symbols(r.reshape(-1) - RESIDUAL_MIN, y_cdfs, y_enc)
        z_stream, y_stream = z_enc.finish(), y_enc.finish()
    payload = struct.pack("<I", len(z_stream)) + z_stream + y_stream
    header = struct.pack(
        "<4sB8sHHHI", BITSTREAM_MAGIC, BITSTREAM_VERSION,
        bytes.fromhex(model.config_hash()[:16]), x.shape[0], x.shape[2], x.shape[3],
        zlib.crc32(payload),
    )
    return header + payload


def decompress(model: HyperpriorCodec, blob: bytes, *,
               return_latents: bool = False):
    """Decode a container back to reconstructed images in [0, 1]."""
    head_size = struct.calcsize("<4sB8sHHHI")
    if len(blob) < head_size:
        raise BitstreamError("truncated bitstream header")
    magic, version, cfg_hash, count, h, w = struct.unpack("<4sB8sHHH", blob[:head_size - 4])
    crc = struct.unpack("<I", blob[head_size - 4:head_size])[0]
    if magic != BITSTREAM_MAGIC:
        raise BitstreamError(f"bad magic {magic!r}")
    if version != BITSTREAM_VERSION:
        raise BitstreamError(f"unsupported bitstream version {version}")
    if cfg_hash.hex() != model.config_hash()[:16]:
        raise BitstreamError("bitstream was produced by a different model configuration")
    payload = blob[head_size:]
    if zlib.crc32(payload) != crc:
        raise BitstreamError("checksum mismatch (corrupt bitstream)")
    (z_len,) = struct.unpack_from("<I", payload, 0)
    z_dec = RangeDecoder(payload[4:4 + z_len])
    y_dec = RangeDecoder(payload[4 + z_len:])

    cfg = model.config
    hz, wz = h // cfg.total_downsampling, w // cfg.total_downsampling
    hy, wy = h // cfg.y_downsampling, w // cfg.y_downsampling
    cz, m = cfg.hyper_latent_channels, cfg.latent_channels

    model.eval()
    images, packs = [], []
    with torch.no_grad():
        cz_table = _z_cdf_table(model)
        z_cdfs = np.broadcast_to(cz_table[:, None, None, :],
                                 (cz, hz, wz, cz_table.shape[-1]))
        for _ in range(count):
            z_sym = decode_symbols(z_dec, z_cdfs) + RESIDUAL_MIN
            z_hat = torch.from_numpy(z_sym.astype(np.float32))[None]
            mu, sigma = model.hyper_synthesis(z_hat)

            sig = sigma.detach().double().numpy().reshape(-1)
            y_cdfs = quantize_pmf(_residual_pmfs(np.zeros_like(sig), sig))
            r = decode_symbols(y_dec, y_cdfs) + RESIDUAL_MIN
            r = torch.from_numpy(r.reshape(1, m, hy, wy).astype(np.float32))
            y_hat = r + mu
            images.append(model.decode_synthesis(y_hat).clamp(0, 1))
            if return_latents:
                packs.append((y_hat, z_hat))
    x_hat = torch.cat(images, dim=0)
    if return_latents:
        return x_hat, packs
    return x_hat
