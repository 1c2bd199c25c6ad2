"""SAFNet: pyramid encoder, shared coarse-to-fine flow/mask decoder, refiner."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import NamedTuple

import torch
import torch.nn.functional as F
from torch import nn

from . import radiometry
from .hdrio import atomic_write
from .warpgrid import backward_warp, upsample2x, upsample_flow2x

CHECKPOINT_FORMAT = "safnet-checkpoint/1"


class CheckpointError(RuntimeError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    variant: str = "safnet"
    enc_channels: int = 40
    dec_channels: int = 120
    dec_groups: int = 3
    levels: int = 4
    refine_channels: int = 80
    refine_blocks: str = "residual"
    refine_dilations: tuple[int, ...] = (1, 2, 4, 2, 1)
    half_res_io: bool = True
    gamma: float = radiometry.GAMMA
    mu: float = radiometry.MU

    def __post_init__(self):
        object.__setattr__(self, "refine_dilations", tuple(self.refine_dilations))
        if self.variant not in ("safnet", "safnet-s"):
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.levels != 4:
            raise ValueError("the decoder is defined for exactly 4 pyramid levels")
        if self.dec_channels % self.dec_groups:
            raise ValueError("dec_channels must be divisible by dec_groups")
        if self.refine_blocks not in ("residual", "plain"):
            raise ValueError("refine_blocks must be 'residual' or 'plain'")

    @classmethod
    def for_variant(cls, variant: str, **overrides) -> "ModelConfig":
        if variant == "safnet-s":
            base = dict(variant="safnet-s", refine_channels=32, refine_blocks="plain")
        else:
            base = dict(variant="safnet")
        base.update(overrides)
        return cls(**base)

    @property
    def divisor(self) -> int:
        d = 2 ** self.levels
        return 2 * d if self.half_res_io else d

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["refine_dilations"] = list(self.refine_dilations)
        return d


class SAFNetOutput(NamedTuple):
    flow21: torch.Tensor
    flow23: torch.Tensor
    mask1: torch.Tensor
    mask3: torch.Tensor
    hdr_merged: torch.Tensor
    hdr_refined: torch.Tensor | None


def conv_prelu(cin, cout, stride=1, dilation=1, groups=1):
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride, padding=dilation, dilation=dilation, groups=groups),
        nn.PReLU(cout, init=0.25),
    )


def channel_shuffle(x, groups):
    n, c, h, w = x.shape
    return x.view(n, groups, c // groups, h, w).transpose(1, 2).reshape(n, c, h, w)


class PyramidEncoder(nn.Module):
    """Two 3x3 convs (stride 2 then 1) per level; constant width across levels."""

    def __init__(self, in_channels=6, channels=40, levels=4):
        super().__init__()
        self.blocks = nn.ModuleList()
        for k in range(levels):
            cin = in_channels if k == 0 else channels
            self.blocks.append(nn.Sequential(conv_prelu(cin, channels, stride=2), conv_prelu(channels, channels)))

    def forward(self, x):
        feats = []
        for block in self.blocks:
            x = block(x)
            feats.append(x)
        return feats


class FlowMaskDecoder(nn.Module):
    """One coarse-to-fine step; the same instance serves every pyramid level.

    Input is ``[F21, F23, M1, M3, warp(phi1), phi2, warp(phi3)]``; the output
    6 channels are a 4-channel residual flow and 2 mask logits at twice the
    input resolution.
    """

    def __init__(self, feat_channels=40, channels=120, groups=3):
        super().__init__()
        self.groups = groups
        cin = 6 + 3 * feat_channels
        self.conv1 = conv_prelu(cin, channels)
        self.conv2 = conv_prelu(channels, channels, groups=groups)
        self.conv3 = conv_prelu(channels, channels, groups=groups)
        self.conv4 = conv_prelu(channels, channels, groups=groups)
        self.conv5 = conv_prelu(channels, channels)
        self.deconv = nn.ConvTranspose2d(channels, 6, 4, stride=2, padding=1)

    def forward(self, flow21, flow23, mask1, mask3, phi1, phi2, phi3):
        phi1w = backward_warp(phi1, flow21)
        phi3w = backward_warp(phi3, flow23)
        x = torch.cat([flow21, flow23, mask1, mask3, phi1w, phi2, phi3w], dim=1)
        x = self.conv1(x)
        x = channel_shuffle(self.conv2(x), self.groups)
        x = channel_shuffle(self.conv3(x), self.groups)
        x = self.conv5(self.conv4(x))
        out = self.deconv(x)
        flow21 = upsample_flow2x(flow21) + out[:, 0:2]
        flow23 = upsample_flow2x(flow23) + out[:, 2:4]
        masks = torch.sigmoid(out[:, 4:6])
        return flow21, flow23, masks[:, 0:1], masks[:, 1:2]


class DilatedBlock(nn.Module):
    def __init__(self, channels, dilation, residual=True):
        super().__init__()
        self.residual = residual
        self.conv = nn.Conv2d(channels, channels, 3, padding=dilation, dilation=dilation)
        self.act = nn.PReLU(channels, init=0.25)

    def forward(self, x):
        y = self.conv(x)
        return self.act(x + y if self.residual else y)


class RefineNet(nn.Module):
    """Full-resolution detail refiner producing ``max(0, H_m + residual)``."""

    def __init__(self, channels=80, dilations=(1, 2, 4, 2, 1), residual=True):
        super().__init__()
        c = channels
        self.extract1 = nn.Sequential(conv_prelu(6, c), conv_prelu(c, c))
        self.extract2 = nn.Sequential(conv_prelu(6 + 4 + 2 + 3, c), conv_prelu(c, c))
        self.extract3 = nn.Sequential(conv_prelu(6, c), conv_prelu(c, c))
        self.fuse = conv_prelu(3 * c, c)
        self.blocks = nn.Sequential(*[DilatedBlock(c, d, residual) for d in dilations])
        self.out = nn.Conv2d(c, 3, 3, padding=1)

    def forward(self, x1, x2, x3, flow21, flow23, mask1, mask3, hdr_merged):
        shapes = {t.shape[-2:] for t in (x1, x2, x3, flow21, flow23, mask1, mask3, hdr_merged)}
        if len(shapes) != 1:
            raise ValueError(f"refiner inputs disagree in resolution: {sorted(tuple(s) for s in shapes)}")
        y1 = backward_warp(self.extract1(x1), flow21)
        y2 = self.extract2(torch.cat([x2, flow21, flow23, mask1, mask3, hdr_merged], dim=1))
        y3 = backward_warp(self.extract3(x3), flow23)
        y = self.blocks(self.fuse(torch.cat([y1, y2, y3], dim=1)))
        return torch.relu(hdr_merged + self.out(y))


class SAFNet(nn.Module):
    def __init__(self, config: ModelConfig | None = None, seed: int = 0):
        super().__init__()
        self.config = config or ModelConfig()
        cfg = self.config
        # default layer init draws from the global RNG; keep that stream untouched
        with torch.random.fork_rng(devices=[]):
            self.encoder = PyramidEncoder(6, cfg.enc_channels, cfg.levels)
            self.decoder = FlowMaskDecoder(cfg.enc_channels, cfg.dec_channels, cfg.dec_groups)
            self.refiner = RefineNet(cfg.refine_channels, cfg.refine_dilations, cfg.refine_blocks == "residual")
        init_weights(self, seed)

    # -- stage 1 ---------------------------------------------------------

    def encode(self, x):
        n = x.shape[-2:]
        d = 2 ** self.config.levels
        if n[0] % d or n[1] % d:
            need = tuple((-s) % d for s in n)
            raise ValueError(f"encoder input {tuple(n)} must be divisible by {d}; pad by {need} (rows, cols)")
        return self.encoder(x)

    def decode(self, pyr1, pyr2, pyr3):
        """Run the shared decoder from the coarsest level to level 1."""
        coarse = pyr2[-1]
        n, _, h, w = coarse.shape
        zeros = coarse.new_zeros
        flow21, flow23 = zeros(n, 2, h, w), zeros(n, 2, h, w)
        mask1, mask3 = zeros(n, 1, h, w), zeros(n, 1, h, w)
        for k in reversed(range(self.config.levels)):
            flow21, flow23, mask1, mask3 = self.decoder(flow21, flow23, mask1, mask3, pyr1[k], pyr2[k], pyr3[k])
        return flow21, flow23, mask1, mask3

    def align_and_merge(self, x1, x2, x3):
        """Flows, masks and the explicitly merged HDR image for 6-channel inputs."""
        cfg = self.config
        xs = (x1, x2, x3)
        if cfg.half_res_io:
            xs_enc = [F.interpolate(x, scale_factor=0.5, mode="bilinear", align_corners=False) for x in xs]
        else:
            xs_enc = xs
        pyr = [self.encode(x) for x in xs_enc]
        flow21, flow23, mask1, mask3 = self.decode(*pyr)
        if cfg.half_res_io:
            flow21, flow23 = upsample_flow2x(flow21), upsample_flow2x(flow23)
            mask1, mask3 = upsample2x(mask1), upsample2x(mask3)

        h1w = backward_warp(x1[:, 3:], flow21)
        h3w = backward_warp(x3[:, 3:], flow23)
        lam = radiometry.initial_coefficients(x2[:, :3])
        w1, w2, w3 = radiometry.reweight_coefficients(lam, mask1, mask3)
        hdr = radiometry.merge_hdr(h1w, x2[:, 3:], h3w, w1, w2, w3)
        return flow21, flow23, mask1, mask3, hdr

    def refine(self, x1, x2, x3, flow21, flow23, mask1, mask3, hdr_merged):
        return self.refiner(x1, x2, x3, flow21, flow23, mask1, mask3, hdr_merged)

    def forward(self, x1, x2, x3, refine=True):
        flow21, flow23, mask1, mask3, hm = self.align_and_merge(x1, x2, x3)
        hr = self.refine(x1, x2, x3, flow21, flow23, mask1, mask3, hm) if refine else None
        return SAFNetOutput(flow21, flow23, mask1, mask3, hm, hr)


def init_weights(model: nn.Module, seed: int = 0):
    """He fan-in normal weights, zero biases, PReLU slopes 0.25; seeded."""
    gen = torch.Generator().manual_seed(seed)
    for m in model.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
            w = m.weight
            if isinstance(m, nn.ConvTranspose2d):
                # each output pixel of a stride-2 4x4 deconv sees in_channels * 2 * 2 taps
                fan_in = w.shape[0] * (w.shape[2] // m.stride[0]) * (w.shape[3] // m.stride[1])
            else:
                fan_in = w.shape[1] * w.shape[2] * w.shape[3]
            std = (2.0 / ((1 + 0.25**2) * fan_in)) ** 0.5
            with torch.no_grad():
                w.normal_(0.0, std, generator=gen)
                if m.bias is not None:
                    m.bias.zero_()
        elif isinstance(m, nn.PReLU):
            with torch.no_grad():
                m.weight.fill_(0.25)


def count_parameters(module: nn.Module) -> int:
    # parameters() yields each shared tensor once
    return sum(p.numel() for p in module.parameters())


def zero_decoder_(model: SAFNet):
    with torch.no_grad():
        for p in model.decoder.parameters():
            p.zero_()
    return model


def zero_refiner_output_(model: SAFNet):
    with torch.no_grad():
        model.refiner.out.weight.zero_()
        model.refiner.out.bias.zero_()
    return model


def pad_to_multiple(x, divisor):
    """Reflect-pad the bottom/right edges so H and W are multiples of ``divisor``."""
    h, w = x.shape[-2:]
    ph, pw = (-h) % divisor, (-w) % divisor
    if not ph and not pw:
        return x
    mode = "reflect" if ph < h and pw < w else "replicate"
    return F.pad(x, (0, pw, 0, ph), mode=mode)


def forward_full(model: SAFNet, l1, l2, l3, exposures, refine=True) -> SAFNetOutput:
    """End-to-end inference from three LDR batches (N×3×H×W) and times (N×3).

    Inputs whose size is not a multiple of the network's divisor are
    reflect-padded internally and every output is cropped back.
    """
    cfg = model.config
    exposures = torch.as_tensor(exposures, dtype=l2.dtype)
    if exposures.dim() == 1:
        exposures = exposures.unsqueeze(0).expand(l2.shape[0], 3)
    h, w = l2.shape[-2:]
    xs = [
        radiometry.make_network_input(pad_to_multiple(l.contiguous(), cfg.divisor), exposures[:, i], cfg.gamma)
        for i, l in enumerate((l1, l2, l3))
    ]
    out = model(*xs, refine=refine)
    return SAFNetOutput(*(None if t is None else t[..., :h, :w] for t in out))


def save_checkpoint(path, model: SAFNet, extra: dict | None = None):
    payload = {
        "format": CHECKPOINT_FORMAT,
        "model_config": model.config.to_dict(),
        "weights": {k: v.detach().clone() for k, v in model.state_dict().items()},
    }
    if extra:
        payload.update(extra)
    with atomic_write(path) as fh:
        torch.save(payload, fh)


def load_checkpoint(path, map_dtype=None):
    """Return ``(model, payload)``; raises CheckpointError on bad archives."""
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:  # noqa: BLE001 - surface any unpickling/IO failure uniformly
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not a {CHECKPOINT_FORMAT} archive")
    try:
        cfg = ModelConfig(**payload["model_config"])
        model = SAFNet(cfg)
        model.load_state_dict(payload["weights"])
    except (KeyError, TypeError, ValueError, RuntimeError) as exc:
        raise CheckpointError(f"checkpoint {path} is inconsistent: {exc}") from exc
    if map_dtype is not None:
        model.to(map_dtype)
    return model, payload
