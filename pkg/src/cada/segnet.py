"""Multi-scale-input, multi-scale-output U-Net.

Layout for input extent S and base width b (widths b, 2b, 4b, 8b):

* encoder block i runs at S/2**i; blocks 1-3 receive the max-pooled previous
  block concatenated with a stem of the raw image (avg-pool by 2**i, 3x3 conv);
* the deepest encoder block is compressed by a 1x1 conv to a single-channel
  feature map at S/8 (the encoder adaptor input);
* decoder level j runs at S/2**(3-j); levels 1-3 upsample the previous level
  and concatenate the matching encoder skip;
* each decoder level has a 1x1 head to the class logits, upsampled to S.

The source network and the target student share one ``ParamSet``; the teacher
is a second ``ParamSet`` with the same layout kept up to date by
:func:`ema_update`.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .nn import ParamSet, Tensor

NUM_SCALES = 4
NUM_CLASSES = 3


@dataclass(frozen=True)
class SegNetConfig:
    base_channels: int = 8
    input_size: int = 64
    num_scales: int = NUM_SCALES
    num_classes: int = NUM_CLASSES
    in_channels: int = 3

    def validate(self) -> None:
        if self.num_scales != NUM_SCALES:
            raise ValueError(f"num_scales is fixed at {NUM_SCALES}, got {self.num_scales}")
        if self.num_classes != NUM_CLASSES:
            raise ValueError(f"num_classes is fixed at {NUM_CLASSES}, got {self.num_classes}")
        if self.input_size <= 0 or self.input_size % 32:
            raise ValueError(f"input_size must be a positive multiple of 32, got {self.input_size}")
        if self.base_channels < 1:
            raise ValueError("base_channels must be >= 1")
        if self.in_channels < 1:
            raise ValueError("in_channels must be >= 1")

    def enc_width(self, i: int) -> int:
        return self.base_channels * 2 ** i

    def dec_width(self, j: int) -> int:
        return self.base_channels * 2 ** (NUM_SCALES - 1 - j)


@dataclass
class SegOutput:
    enc_feature: Tensor
    scale_logits: list[Tensor]
    avg_logits: Tensor


def _he(rng: np.random.Generator, cout: int, cin: int, k: int) -> np.ndarray:
    std = np.sqrt(2.0 / (cin * k * k))
    return rng.normal(0.0, std, size=(cout, cin, k, k))


def _add_conv(ps: ParamSet, rng, name: str, cin: int, cout: int, k: int) -> None:
    ps.add(f"{name}.w", _he(rng, cout, cin, k))
    ps.add(f"{name}.b", np.zeros(cout))


def _add_bn(ps: ParamSet, name: str, c: int) -> None:
    ps.add(f"{name}.g", np.ones(c))
    ps.add(f"{name}.b", np.zeros(c))
    ps.add_buffer(f"{name}.rm", np.zeros(c))
    ps.add_buffer(f"{name}.rv", np.ones(c))


def _add_block(ps: ParamSet, rng, name: str, cin: int, cout: int) -> None:
    _add_conv(ps, rng, f"{name}.conv1", cin, cout, 3)
    _add_bn(ps, f"{name}.bn1", cout)
    _add_conv(ps, rng, f"{name}.conv2", cout, cout, 3)
    _add_bn(ps, f"{name}.bn2", cout)


def build_segnet(config: SegNetConfig, seed: int) -> ParamSet:
    config.validate()
    rng = np.random.default_rng(seed)
    ps = ParamSet()
    for i in range(NUM_SCALES):
        if i == 0:
            cin = config.in_channels
        else:
            _add_conv(ps, rng, f"stem{i}", config.in_channels, config.enc_width(i - 1), 3)
            cin = 2 * config.enc_width(i - 1)
        _add_block(ps, rng, f"enc{i}", cin, config.enc_width(i))
    _add_conv(ps, rng, "enc_head", config.enc_width(NUM_SCALES - 1), 1, 1)
    for j in range(NUM_SCALES):
        if j == 0:
            cin = config.enc_width(NUM_SCALES - 1)
        else:
            cin = config.dec_width(j - 1) + config.enc_width(NUM_SCALES - 1 - j)
        _add_block(ps, rng, f"dec{j}", cin, config.dec_width(j))
        _add_conv(ps, rng, f"head{j}", config.dec_width(j), config.num_classes, 1)
    return ps


class _Ctx:
    """Per-call accessor that applies the frozen/mode switches uniformly."""

    def __init__(self, ps: ParamSet, mode: str, frozen: bool):
        self.ps, self.mode, self.frozen = ps, mode, frozen

    def conv(self, name: str, x: Tensor, pad: int) -> Tensor:
        return nn.conv2d(x, self.ps.get(f"{name}.w", self.frozen),
                         self.ps.get(f"{name}.b", self.frozen), stride=1, pad=pad)

    def bn(self, name: str, x: Tensor) -> Tensor:
        return nn.batch_norm2d(x, self.ps.get(f"{name}.g", self.frozen),
                               self.ps.get(f"{name}.b", self.frozen),
                               self.ps.buffers[f"{name}.rm"], self.ps.buffers[f"{name}.rv"],
                               mode=self.mode)

    def block(self, name: str, x: Tensor) -> Tensor:
        x = nn.relu(self.bn(f"{name}.bn1", self.conv(f"{name}.conv1", x, 1)))
        return nn.relu(self.bn(f"{name}.bn2", self.conv(f"{name}.conv2", x, 1)))


def forward(params: ParamSet, images, mode: str = "train", frozen: bool = False,
            input_size: int | None = None) -> SegOutput:
    """Run the network.  ``frozen`` keeps gradients out of ``params``."""
    x = images if isinstance(images, Tensor) else Tensor(images)
    if x.ndim != 4:
        raise ValueError(f"images must be [N,C,H,W], got {x.shape}")
    s = x.shape[2]
    if x.shape[3] != s or (input_size is not None and s != input_size):
        raise ValueError(f"expected square {input_size or s}x{input_size or s} input, got {x.shape[2:]}")
    if s % 32:
        raise ValueError(f"input extent {s} is not a multiple of 32")
    if mode not in ("train", "eval"):
        raise ValueError(f"unknown mode {mode!r}")
    c = _Ctx(params, mode, frozen)

    skips = []
    h = None
    for i in range(NUM_SCALES):
        if i == 0:
            inp = x
        else:
            stem = nn.relu(c.conv(f"stem{i}", nn.pool2d(x, 2 ** i, "avg"), 1))
            inp = nn.concat([nn.pool2d(h, 2, "max"), stem])
        h = c.block(f"enc{i}", inp)
        skips.append(h)
    enc_feature = c.conv("enc_head", h, 0)

    scale_logits = []
    d = h
    for j in range(NUM_SCALES):
        if j > 0:
            d = nn.concat([nn.upsample2d(d, 2), skips[NUM_SCALES - 1 - j]])
        d = c.block(f"dec{j}", d)
        logits = c.conv(f"head{j}", d, 0)
        scale_logits.append(nn.upsample2d(logits, 2 ** (NUM_SCALES - 1 - j)))

    avg = scale_logits[0]
    for t in scale_logits[1:]:
        avg = avg + t
    avg = avg * (1.0 / NUM_SCALES)
    return SegOutput(enc_feature, scale_logits, avg)


def segmentation_loss(out: SegOutput, labels: np.ndarray, deep_weight: float = 0.25) -> Tensor:
    """Cross-entropy on the averaged logits plus weighted per-scale deep supervision."""
    loss = nn.softmax_ce_loss(out.avg_logits, labels)
    if deep_weight:
        for t in out.scale_logits:
            loss = loss + nn.softmax_ce_loss(t, labels) * deep_weight
    return loss


def predict_mask(logits) -> np.ndarray:
    """Per-pixel argmax over classes; ``np.argmax`` resolves ties to the lowest index."""
    data = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    if data.ndim != 4:
        raise ValueError(f"logits must be [N,K,H,W], got {data.shape}")
    return data.argmax(axis=1).astype(np.int64)


def ema_update(teacher: ParamSet, student: ParamSet, alpha: float) -> None:
    """teacher <- alpha * teacher + (1 - alpha) * student, for weights and BN buffers."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"EMA alpha must lie in [0, 1], got {alpha}")
    if not teacher.same_layout(student):
        raise ValueError("teacher and student parameter layouts differ")
    src = student.arrays()
    for name, arr in teacher.arrays().items():
        if alpha == 0.0:
            arr[...] = src[name]
        elif alpha != 1.0:
            arr *= alpha
            arr += (1.0 - alpha) * src[name]
    teacher.step += 1


def init_teacher(student: ParamSet) -> ParamSet:
    teacher = student.copy()
    teacher.step = 0
    for t in teacher.params.values():
        t.requires_grad = False
    return teacher
