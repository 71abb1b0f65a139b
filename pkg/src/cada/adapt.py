"""Patch discriminators and the adaptation losses built on them.

Label convention: a discriminator emits the logit of "this patch comes from
the target domain".  The segmentation network fools it by pushing source
features toward the target label; the discriminator learns target -> 1,
source -> 0.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn
from .nn import OptState, ParamSet, Tensor
from .segnet import NUM_SCALES, SegOutput

SOURCE = 0
TARGET = 1

DISC_CHANNELS = (64, 128, 256, 512)
DISC_STRIDE_LAYERS = 5
PATCH_DIVISOR = 2 ** DISC_STRIDE_LAYERS

PAPER_LAMBDAS = {"seg": 1.0, "adv_E": 0.002, "adv_D": 0.018, "mse_E": 0.057, "mse_D": 0.79}


def build_discriminator(in_channels: int, seed: int, channels=DISC_CHANNELS) -> ParamSet:
    """Five 4x4/stride-2 convs, ``in -> 64 -> 128 -> 256 -> 512 -> 1``; final bias starts at zero."""
    if in_channels < 1:
        raise ValueError("discriminator needs at least one input channel")
    rng = np.random.default_rng(seed)
    ps = ParamSet()
    widths = (in_channels, *channels, 1)
    for i in range(len(widths) - 1):
        cin, cout = widths[i], widths[i + 1]
        std = np.sqrt(2.0 / (cin * 16))
        ps.add(f"conv{i}.w", rng.normal(0.0, std, size=(cout, cin, 4, 4)))
        ps.add(f"conv{i}.b", np.zeros(cout))
    return ps


def disc_forward(disc: ParamSet, feature: Tensor, frozen: bool = False) -> Tensor:
    """Patch logits ``[N,1,h,w]`` with ``h = extent / 32``."""
    if feature.ndim != 4:
        raise ValueError(f"discriminator input must be [N,C,H,W], got {feature.shape}")
    if min(feature.shape[2:]) < PATCH_DIVISOR:
        raise ValueError(f"discriminator input extent must be >= {PATCH_DIVISOR}, got {feature.shape[2:]}")
    n_layers = len(disc) // 2
    x = feature
    for i in range(n_layers):
        x = nn.conv2d(x, disc.get(f"conv{i}.w", frozen), disc.get(f"conv{i}.b", frozen), stride=2, pad=1)
        if i < n_layers - 1:
            x = nn.leaky_relu(x, 0.2)
    return x


def adv_loss(disc: ParamSet, source_feature: Tensor) -> Tensor:
    """Fooling loss: BCE of the frozen discriminator on source features against TARGET."""
    return nn.bce_logits_loss(disc_forward(disc, source_feature, frozen=True), TARGET)


def disc_loss(disc: ParamSet, source_feature: Tensor, target_feature: Tensor) -> Tensor:
    """Discriminator loss on detached features: target -> TARGET, source -> SOURCE."""
    src, tgt = source_feature.detach(), target_feature.detach()
    return (nn.bce_logits_loss(disc_forward(disc, tgt), TARGET)
            + nn.bce_logits_loss(disc_forward(disc, src), SOURCE))


def consistency_loss(student: SegOutput, teacher: SegOutput) -> tuple[Tensor, Tensor]:
    """Student-teacher MSE on the encoder feature and on softmax outputs.

    The decoder term averages five MSEs: one per scale plus the prediction
    made from the averaged logits.  Teacher tensors are detached.
    """
    mse_e = nn.mse_loss(student.enc_feature, teacher.enc_feature.detach())
    terms = [
        nn.mse_loss(nn.softmax(s), nn.softmax(t.detach()))
        for s, t in zip(student.scale_logits, teacher.scale_logits)
    ]
    terms.append(nn.mse_loss(nn.softmax(student.avg_logits), nn.softmax(teacher.avg_logits.detach())))
    mse_d = terms[0]
    for t in terms[1:]:
        mse_d = mse_d + t
    return mse_e, mse_d * (1.0 / len(terms))


def total_loss(parts: dict, lambdas: dict) -> Tensor | float:
    """Weighted objective ``seg + sum(lambda_k * part_k)``.

    ``parts`` maps ``seg``, ``adv_E``, ``adv_D``, ``mse_E``, ``mse_D`` to a
    scalar (Tensor or float) or ``None`` for a disabled term.  ``adv_D`` may
    be a list, one entry per engaged decoder discriminator; its weight is
    split equally across them.
    """
    for key, lam in lambdas.items():
        if lam < 0:
            raise ValueError(f"lambda {key!r} is negative")
    total = parts["seg"] * lambdas.get("seg", 1.0)
    for key in ("adv_E", "adv_D", "mse_E", "mse_D"):
        part = parts.get(key)
        lam = lambdas.get(key, 0.0)
        if part is None or lam == 0:
            continue
        if isinstance(part, (list, tuple)):
            if not part:
                continue
            acc = part[0]
            for p in part[1:]:
                acc = acc + p
            part = acc * (1.0 / len(parts[key]))
        total = total + part * lam
    return total


def decoder_scales(num_dec_discs: int) -> list[int]:
    """Decoder levels carrying a discriminator, finest output first."""
    if not 0 <= num_dec_discs <= NUM_SCALES:
        raise ValueError(f"num_dec_discs must lie in [0, {NUM_SCALES}]")
    return [NUM_SCALES - 1 - k for k in range(num_dec_discs)]


@dataclass
class AdaptorSet:
    """The encoder discriminator, up to four decoder discriminators, their optimizers and weights."""

    enc_disc: ParamSet
    dec_discs: list[ParamSet]
    enc_opt: OptState
    dec_opts: list[OptState]
    lambdas: dict = field(default_factory=lambda: dict(PAPER_LAMBDAS))
    enc_enabled: bool = True
    se_enabled: bool = True
    num_dec_discs: int = NUM_SCALES

    def __post_init__(self):
        for k, v in self.lambdas.items():
            if v < 0:
                raise ValueError(f"lambda {k!r} is negative")
        decoder_scales(self.num_dec_discs)

    @property
    def enc_active(self) -> bool:
        return self.enc_enabled and self.lambdas.get("adv_E", 0.0) > 0

    @property
    def active_dec_scales(self) -> list[int]:
        if self.lambdas.get("adv_D", 0.0) <= 0:
            return []
        return decoder_scales(self.num_dec_discs)

    @property
    def mse_enc_active(self) -> bool:
        return self.se_enabled and self.enc_enabled and self.lambdas.get("mse_E", 0.0) > 0

    @property
    def mse_dec_active(self) -> bool:
        return self.se_enabled and self.lambdas.get("mse_D", 0.0) > 0

    def all_discs(self) -> dict[str, ParamSet]:
        out = {"enc": self.enc_disc}
        for j, d in enumerate(self.dec_discs):
            out[f"dec{j}"] = d
        return out


def build_adaptors(seed: int, lambdas: dict | None = None, enc_enabled: bool = True,
                   se_enabled: bool = True, num_dec_discs: int = NUM_SCALES,
                   lr: float = 2.5e-5, num_classes: int = 3,
                   channels=DISC_CHANNELS) -> AdaptorSet:
    """One discriminator per adaptation site; ``dec_discs[j]`` watches decoder level ``j``."""
    enc = build_discriminator(1, seed * 7919 + 1, channels)
    decs = [build_discriminator(num_classes, seed * 7919 + 2 + j, channels) for j in range(NUM_SCALES)]
    return AdaptorSet(
        enc_disc=enc,
        dec_discs=decs,
        enc_opt=nn.adam(lr),
        dec_opts=[nn.adam(lr) for _ in range(NUM_SCALES)],
        lambdas=dict(PAPER_LAMBDAS if lambdas is None else lambdas),
        enc_enabled=enc_enabled,
        se_enabled=se_enabled,
        num_dec_discs=num_dec_discs,
    )
