"""Procedural two-domain fundus-like dataset.

A sample is an elliptical optic disc with a nested cup, dark curvilinear
vessels and a smooth illumination falloff.  Geometry is drawn from one random
stream and photometry from another, so two domains that share a geometry
seed produce identical masks.  Masks are rendered before any photometric
effect is applied.
"""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from PIL import Image

from .metrics import vertical_diameter

MASK_VALUES = (0, 128, 255)

SOURCE_PALETTE = ((0.55, 0.24, 0.12), (0.86, 0.55, 0.34), (0.96, 0.80, 0.60))
TARGET_PALETTE = ((0.30, 0.30, 0.18), (0.58, 0.60, 0.40), (0.72, 0.76, 0.58))


@dataclass(frozen=True)
class DomainSpec:
    palette: tuple = SOURCE_PALETTE  # RGB means for background, disc, cup
    intensity_gain: float = 1.0
    gamma: float = 1.0
    noise_sigma: float = 0.0
    vessel_density: float = 0.5
    seed: int = 0

    def validate(self) -> None:
        pal = np.asarray(self.palette, dtype=float)
        if pal.shape != (3, 3):
            raise ValueError("palette must hold three RGB triples (background, disc, cup)")
        if pal.min() < 0 or pal.max() > 1:
            raise ValueError("palette channels must lie in [0, 1]")
        if self.gamma <= 0:
            raise ValueError("gamma must be positive")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")
        if not 0 <= self.vessel_density <= 1:
            raise ValueError("vessel_density must lie in [0, 1]")
        if self.intensity_gain <= 0:
            raise ValueError("intensity_gain must be positive")

    def digest(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def source_spec(seed: int = 0) -> DomainSpec:
    return DomainSpec(palette=SOURCE_PALETTE, gamma=1.0, noise_sigma=0.0, seed=seed)


def target_spec(seed: int = 1, shift: float = 1.0) -> DomainSpec:
    """Target domain whose distance from the source scales linearly with ``shift``.

    ``shift=0`` reproduces the source photometry exactly; ``shift=1`` is the
    default shift (distinct palette, gamma 1.4, noise 0.02).
    """
    src = np.asarray(SOURCE_PALETTE)
    pal = src + shift * (np.asarray(TARGET_PALETTE) - src)
    pal = np.clip(pal, 0.0, 1.0)
    return DomainSpec(
        palette=tuple(tuple(float(v) for v in row) for row in pal),
        gamma=1.0 + 0.4 * shift,
        noise_sigma=0.02 * shift,
        seed=seed,
    )


@dataclass
class Geometry:
    cy: float
    cx: float
    disc_ry: float
    disc_rx: float
    cup_cy: float
    cup_cx: float
    cup_ry: float
    cup_rx: float
    vessels: list = field(default_factory=list)  # control points per stroke


@dataclass
class Sample:
    image: np.ndarray  # [3,H,W] float in [0,1]
    mask: np.ndarray  # [H,W] int, classes {0,1,2}
    true_cdr: float
    meta: dict = field(default_factory=dict)


def ellipse_mask(size: int, cy: float, cx: float, ry: float, rx: float) -> np.ndarray:
    """Pixels whose centres ``(y+0.5, x+0.5)`` fall inside the ellipse."""
    yy = (np.arange(size) + 0.5 - cy) / ry
    xx = (np.arange(size) + 0.5 - cx) / rx
    return (yy[:, None] ** 2 + xx[None, :] ** 2) <= 1.0


def render_mask(geom: Geometry, size: int) -> np.ndarray:
    disc = ellipse_mask(size, geom.cy, geom.cx, geom.disc_ry, geom.disc_rx)
    cup = ellipse_mask(size, geom.cup_cy, geom.cup_cx, geom.cup_ry, geom.cup_rx) & disc
    mask = np.zeros((size, size), dtype=np.int64)
    mask[disc] = 1
    mask[cup] = 2
    return mask


def mask_cdr(mask: np.ndarray) -> float:
    vd = vertical_diameter(mask, "disc")
    return vertical_diameter(mask, "cup") / vd if vd else 0.0


def _rng(seed: int, index: int, stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, index, stream]))


def sample_geometry(seed: int, index: int, size: int) -> Geometry:
    rng = _rng(seed, index, 0)
    c = size / 2.0
    cy = c + rng.uniform(-1, 1) * size / 16
    cx = c + rng.uniform(-1, 1) * size / 16
    disc_ry = rng.uniform(0.22, 0.32) * size
    disc_rx = disc_ry * rng.uniform(0.85, 1.1)
    cdr = rng.uniform(0.3, 0.8)
    cup_ry = cdr * disc_ry
    cup_rx = cup_ry * rng.uniform(0.85, 1.15)
    # keep the cup centre well inside the disc
    slack_y = max(disc_ry - cup_ry, 0.0) * 0.4
    slack_x = max(disc_rx - cup_rx, 0.0) * 0.4
    cup_cy = cy + rng.uniform(-1, 1) * slack_y
    cup_cx = cx + rng.uniform(-1, 1) * slack_x
    n_strokes = 8
    vessels = []
    for _ in range(n_strokes):
        ang = rng.uniform(0, 2 * np.pi)
        bend = rng.uniform(-0.6, 0.6)
        length = rng.uniform(0.6, 0.9) * size
        width = rng.uniform(0.6, 1.4) * size / 64
        vessels.append((float(ang), float(bend), float(length), float(width)))
    return Geometry(cy, cx, disc_ry, disc_rx, cup_cy, cup_cx, cup_ry, cup_rx, vessels)


def _vessel_map(geom: Geometry, size: int, density: float, rng: np.random.Generator) -> np.ndarray:
    """Soft [0,1] map of dark strokes radiating from the disc centre."""
    out = np.zeros((size, size))
    n = int(round(density * len(geom.vessels)))
    if n == 0:
        return out
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    t = np.linspace(0.0, 1.0, 64)
    for ang, bend, length, width in geom.vessels[:n]:
        theta = ang + bend * t
        py = geom.cy + length * t * np.sin(theta)
        px = geom.cx + length * t * np.cos(theta)
        d2 = (yy[..., None] - py) ** 2 + (xx[..., None] - px) ** 2
        stroke = np.exp(-d2.min(axis=-1) / (2 * width ** 2))
        out = np.maximum(out, stroke * rng.uniform(0.6, 1.0))
    return out


def render_image(geom: Geometry, mask: np.ndarray, spec: DomainSpec,
                 rng: np.random.Generator) -> np.ndarray:
    size = mask.shape[0]
    pal = np.asarray(spec.palette, dtype=float)
    img = pal[mask].transpose(2, 0, 1).copy()  # [3,H,W]
    # soften region boundaries slightly and add illumination falloff
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    r2 = ((yy - geom.cy) ** 2 + (xx - geom.cx) ** 2) / (size * 0.75) ** 2
    img *= (1.0 - 0.35 * r2)[None]
    img *= 1.0 + 0.04 * rng.standard_normal((3, 1, 1))
    vessels = _vessel_map(geom, size, spec.vessel_density, rng)
    img *= (1.0 - 0.55 * vessels)[None]
    img = np.clip(img * spec.intensity_gain, 0.0, 1.0) ** spec.gamma
    if spec.noise_sigma > 0:
        img = img + rng.normal(0.0, spec.noise_sigma, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def generate(spec: DomainSpec, n: int, size: int, geometry_seed: int | None = None,
             start: int = 0) -> list[Sample]:
    """``n`` samples, deterministic per (spec, index).  Masks depend only on ``geometry_seed``."""
    spec.validate()
    if n < 1:
        raise ValueError("n must be >= 1")
    if size <= 0 or size % 32:
        raise ValueError(f"size must be a positive multiple of 32, got {size}")
    gseed = spec.seed if geometry_seed is None else geometry_seed
    out = []
    for idx in range(start, start + n):
        geom = sample_geometry(gseed, idx, size)
        mask = render_mask(geom, size)
        image = render_image(geom, mask, spec, _rng(spec.seed, idx, 1))
        out.append(Sample(image=image, mask=mask, true_cdr=mask_cdr(mask),
                          meta={"index": idx, "spec": spec.digest()}))
    return out


# augmentation ------------------------------------------------------------------

@dataclass(frozen=True)
class AugmentConfig:
    noise_sigma: tuple = (0.0, 0.05)
    gain: tuple = (0.9, 1.1)
    offset: tuple = (-0.05, 0.05)


IDENTITY_AUGMENT = AugmentConfig(noise_sigma=(0.0, 0.0), gain=(1.0, 1.0), offset=(0.0, 0.0))


def augment(image: np.ndarray, seed, cfg: AugmentConfig = AugmentConfig()) -> np.ndarray:
    """Gaussian noise, intensity scaling and brightness offset, clamped to [0,1].

    Works on a single ``[C,H,W]`` image or a ``[N,C,H,W]`` batch (one draw per image).
    """
    rng = np.random.default_rng(seed)
    x = np.asarray(image, dtype=float)
    batch = x if x.ndim == 4 else x[None]
    out = np.empty_like(batch)
    for i, img in enumerate(batch):
        sigma = rng.uniform(*cfg.noise_sigma)
        gain = rng.uniform(*cfg.gain)
        offset = rng.uniform(*cfg.offset)
        noisy = img + rng.normal(0.0, 1.0, size=img.shape) * sigma if sigma > 0 else img
        out[i] = np.clip(noisy * gain + offset, 0.0, 1.0)
    return out if x.ndim == 4 else out[0]


# file IO ------------------------------------------------------------------------

def save_sample(sample: Sample, stem: str | os.PathLike) -> None:
    """Write ``<stem>.png`` (RGB), ``<stem>_mask.png`` and ``<stem>.json``."""
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    rgb = np.round(np.clip(sample.image, 0, 1).transpose(1, 2, 0) * 255).astype(np.uint8)
    Image.fromarray(rgb, mode="RGB").save(stem.with_suffix(".png"))
    lut = np.asarray(MASK_VALUES, dtype=np.uint8)
    Image.fromarray(lut[sample.mask], mode="L").save(f"{stem}_mask.png")
    meta = dict(sample.meta, true_cdr=sample.true_cdr)
    Path(f"{stem}.json").write_text(json.dumps(meta, sort_keys=True))


def mask_from_png_values(values: np.ndarray) -> np.ndarray:
    mask = np.full(values.shape, -1, dtype=np.int64)
    for cls, v in enumerate(MASK_VALUES):
        mask[values == v] = cls
    if (mask < 0).any():
        bad = sorted(set(np.unique(values)) - set(MASK_VALUES))
        raise ValueError(f"mask file holds values outside {MASK_VALUES}: {bad[:5]}")
    return mask


def load_sample(stem: str | os.PathLike) -> Sample:
    stem = Path(stem)
    try:
        rgb = np.asarray(Image.open(stem.with_suffix(".png")).convert("RGB"))
        raw = np.asarray(Image.open(f"{stem}_mask.png"))
        meta = json.loads(Path(f"{stem}.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise OSError(f"cannot read sample {stem}: {exc}") from exc
    if raw.ndim != 2:
        raise ValueError(f"mask file for {stem} is not single-channel")
    image = rgb.transpose(2, 0, 1).astype(np.float64) / 255.0
    true_cdr = float(meta.pop("true_cdr"))
    return Sample(image=image, mask=mask_from_png_values(raw), true_cdr=true_cdr, meta=meta)


def write_manifest(path: str | os.PathLike, entries: Sequence[tuple[str, str, str]]) -> None:
    """Line-oriented manifest: ``split<TAB>domain<TAB>relative stem`` per sample."""
    lines = ["# split\tdomain\tstem"] + ["\t".join(e) for e in entries]
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path: str | os.PathLike) -> list[tuple[str, str, str]]:
    out = []
    for line in Path(path).read_text().splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise ValueError(f"malformed manifest line: {line!r}")
        out.append((parts[0], parts[1], parts[2]))
    return out


@dataclass
class DomainData:
    source: list
    target_train: list
    target_test: list


def make_domains(size: int, n_source: int, n_target: int, n_test: int, shift: float = 1.0,
                 seed: int = 0) -> DomainData:
    """Source/target splits with disjoint geometry streams."""
    src = source_spec(seed=seed * 1000 + 11)
    tgt = target_spec(seed=seed * 1000 + 23, shift=shift)
    return DomainData(
        source=generate(src, n_source, size),
        target_train=generate(tgt, n_target, size),
        target_test=generate(replace(tgt, seed=tgt.seed + 500), n_test, size),
    )


def save_domains(data: DomainData, root: str | os.PathLike) -> Path:
    root = Path(root)
    entries = []
    for split, domain, samples in (("train", "source", data.source),
                                   ("train", "target", data.target_train),
                                   ("test", "target", data.target_test)):
        for i, s in enumerate(samples):
            rel = f"{domain}_{split}/{i:05d}"
            save_sample(s, root / rel)
            entries.append((split, domain, rel))
    manifest = root / "manifest.tsv"
    write_manifest(manifest, entries)
    return manifest


def load_domains(manifest: str | os.PathLike) -> DomainData:
    manifest = Path(manifest)
    groups: dict[tuple[str, str], list] = {}
    for split, domain, rel in read_manifest(manifest):
        groups.setdefault((split, domain), []).append(load_sample(manifest.parent / rel))
    return DomainData(
        source=groups.get(("train", "source"), []),
        target_train=groups.get(("train", "target"), []),
        target_test=groups.get(("test", "target"), []),
    )


# loaders ------------------------------------------------------------------------

@dataclass
class Batch:
    images: np.ndarray  # [B,3,H,W]
    masks: np.ndarray | None
    indices: np.ndarray


def stack(samples: Sequence[Sample], idx: Sequence[int], with_masks: bool) -> Batch:
    images = np.stack([samples[i].image for i in idx])
    masks = np.stack([samples[i].mask for i in idx]) if with_masks else None
    return Batch(images, masks, np.asarray(idx))


class PairLoader:
    """Paired source/target minibatches with independent per-domain shuffles.

    An epoch has ``len(source) // batch`` steps and visits every source index
    at most once (exactly once when ``batch`` divides the source size).  The
    target stream keeps its own permutation and reshuffles when exhausted.
    """

    def __init__(self, source: Sequence[Sample], target: Sequence[Sample], batch: int, seed: int):
        if batch < 1:
            raise ValueError("batch must be >= 1")
        if not source:
            raise ValueError("source dataset is empty")
        if len(source) < batch:
            raise ValueError("source dataset smaller than one batch")
        self.source, self.target, self.batch, self.seed = source, target, batch, seed

    @property
    def steps_per_epoch(self) -> int:
        return len(self.source) // self.batch

    def epoch(self, e: int) -> Iterator[tuple[Batch, Batch | None]]:
        perm_s = np.random.default_rng([self.seed, e, 0]).permutation(len(self.source))
        tgt_order = self._target_order(e)
        for k in range(self.steps_per_epoch):
            s_idx = perm_s[k * self.batch:(k + 1) * self.batch]
            b_s = stack(self.source, s_idx, with_masks=True)
            b_t = None
            if tgt_order is not None:
                b_t = stack(self.target, tgt_order[k * self.batch:(k + 1) * self.batch], with_masks=False)
            yield b_s, b_t

    def _target_order(self, e: int) -> np.ndarray | None:
        if not self.target:
            return None
        need = self.steps_per_epoch * self.batch
        rng = np.random.default_rng([self.seed, e, 1])
        chunks, have = [], 0
        while have < need:
            chunks.append(rng.permutation(len(self.target)))
            have += len(self.target)
        return np.concatenate(chunks)[:need]


def make_loaders(source, target, batch: int = 4, seed: int = 0,
                 epochs: int | None = None) -> Iterator[tuple[Batch, Batch | None]]:
    """Iterate ``(B_s, B_t)`` pairs over ``epochs`` epochs (forever when ``None``)."""
    loader = PairLoader(source, target, batch, seed)
    e = 0
    while epochs is None or e < epochs:
        yield from loader.epoch(e)
        e += 1
