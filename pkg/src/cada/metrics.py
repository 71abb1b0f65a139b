"""Disc/cup Dice, vertical cup-to-disc ratio, and hole-filling post-processing.

The disc region is every pixel labelled disc or cup (classes 1 and 2); the cup
region is class 2 alone.
"""
from __future__ import annotations

import csv
import json
import os
import warnings
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import ndimage

CUP, DISC = 2, 1


class DegeneratePredictionWarning(UserWarning):
    """The predicted mask has no disc, so its CDR is undefined (reported as 0)."""


def region(mask: np.ndarray, which) -> np.ndarray:
    if which in ("cup", CUP):
        return mask == CUP
    if which in ("disc", DISC):
        return mask >= DISC
    raise ValueError(f"unknown region {which!r}")


def dice(pred: np.ndarray, gt: np.ndarray, cls) -> float:
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"dice shape mismatch: {pred.shape} vs {gt.shape}")
    p, g = region(pred, cls), region(gt, cls)
    tp = np.count_nonzero(p & g)
    fp = np.count_nonzero(p & ~g)
    fn = np.count_nonzero(~p & g)
    denom = 2 * tp + fp + fn
    return 1.0 if denom == 0 else 2.0 * tp / denom


def vertical_diameter(mask: np.ndarray, which) -> int:
    r = region(np.asarray(mask), which)
    cols = np.flatnonzero(r.any(axis=0))
    if cols.size == 0:
        return 0
    sub = r[:, cols]
    first = sub.argmax(axis=0)
    last = sub.shape[0] - 1 - sub[::-1].argmax(axis=0)
    return int((last - first + 1).max())


def cdr(mask: np.ndarray) -> float:
    vd = vertical_diameter(mask, "disc")
    return vertical_diameter(mask, "cup") / vd if vd else 0.0


def cdr_error(pred: np.ndarray, gt: np.ndarray) -> tuple[float, float, float]:
    """Return ``(cdr_pred, cdr_true, |cdr_pred - cdr_true|)``."""
    gt_disc = vertical_diameter(gt, "disc")
    if gt_disc == 0:
        raise ValueError("ground-truth mask has no disc; CDR undefined")
    cdr_true = vertical_diameter(gt, "cup") / gt_disc
    pred_disc = vertical_diameter(pred, "disc")
    if pred_disc == 0:
        warnings.warn("predicted mask has no disc; CDR set to 0", DegeneratePredictionWarning, stacklevel=2)
        cdr_pred = 0.0
    else:
        cdr_pred = vertical_diameter(pred, "cup") / pred_disc
    return cdr_pred, cdr_true, abs(cdr_pred - cdr_true)


def fill_holes(mask: np.ndarray) -> np.ndarray:
    """Fill enclosed holes of the disc region, then of the cup region; keep cup inside disc."""
    mask = np.asarray(mask)
    disc = ndimage.binary_fill_holes(mask >= DISC)
    cup = ndimage.binary_fill_holes(mask == CUP)
    out = np.zeros_like(mask)
    out[disc] = DISC
    out[cup & disc] = CUP
    return out


@dataclass
class SampleScore:
    sample_id: int
    dice_cup: float
    dice_disc: float
    cdr_pred: float
    cdr_true: float
    gamma: float
    degenerate: bool = False


@dataclass
class EvalReport:
    dice_cup: float
    dice_disc: float
    gamma_cdr: float
    per_sample: list[SampleScore] = field(default_factory=list)

    @classmethod
    def from_scores(cls, scores: Sequence[SampleScore]) -> "EvalReport":
        if not scores:
            raise ValueError("cannot aggregate an empty evaluation")
        return cls(
            dice_cup=float(np.mean([s.dice_cup for s in scores])),
            dice_disc=float(np.mean([s.dice_disc for s in scores])),
            gamma_cdr=float(np.mean([s.gamma for s in scores])),
            per_sample=list(scores),
        )

    def summary(self) -> dict:
        return {"dice_cup": self.dice_cup, "dice_disc": self.dice_disc, "gamma_cdr": self.gamma_cdr,
                "n": len(self.per_sample)}

    def write_jsonl(self, path: str | os.PathLike) -> None:
        with open(path, "w") as fh:
            for s in self.per_sample:
                fh.write(json.dumps({"kind": "sample", **asdict(s)}) + "\n")
            fh.write(json.dumps({"kind": "aggregate", **self.summary()}) + "\n")

    def write_csv(self, path: str | os.PathLike) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["sample_id", "dice_cup", "dice_disc", "cdr_pred", "cdr_true", "gamma"])
            for s in self.per_sample:
                w.writerow([s.sample_id, repr(s.dice_cup), repr(s.dice_disc),
                            repr(s.cdr_pred), repr(s.cdr_true), repr(s.gamma)])

    @classmethod
    def read_jsonl(cls, path: str | os.PathLike) -> "EvalReport":
        scores, agg = [], None
        with open(path) as fh:
            for line in fh:
                rec = json.loads(line)
                kind = rec.pop("kind")
                if kind == "sample":
                    scores.append(SampleScore(**rec))
                else:
                    agg = rec
        report = cls.from_scores(scores)
        if agg is not None:
            report.dice_cup, report.dice_disc, report.gamma_cdr = agg["dice_cup"], agg["dice_disc"], agg["gamma_cdr"]
        return report


def score_masks(pred: np.ndarray, gt: np.ndarray, sample_id: int = 0, post: bool = True) -> SampleScore:
    if post:
        pred = fill_holes(pred)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", DegeneratePredictionWarning)
        cdr_p, cdr_t, gamma = cdr_error(pred, gt)
    return SampleScore(sample_id, dice(pred, gt, CUP), dice(pred, gt, DISC), cdr_p, cdr_t, gamma,
                       degenerate=bool(caught))


def evaluate(model, samples, batch: int = 8, post: bool = True,
             return_masks: bool = False):
    """Score a model on labelled samples.

    ``model`` is either a segmentation ``ParamSet`` (run in eval mode, using
    the averaged logits) or any callable mapping an image batch to logits.
    """
    from . import segnet
    from .nn import no_grad

    if not samples:
        raise ValueError("evaluation dataset is empty")
    if callable(model):
        predict: Callable = model
    else:
        def predict(images):
            with no_grad():
                return segnet.forward(model, images, mode="eval").avg_logits.data

    scores, masks = [], []
    for start in range(0, len(samples), batch):
        chunk = samples[start:start + batch]
        logits = predict(np.stack([s.image for s in chunk]))
        preds = segnet.predict_mask(logits)
        for k, (s, p) in enumerate(zip(chunk, preds)):
            score = score_masks(p, s.mask, sample_id=start + k, post=post)
            scores.append(score)
            if return_masks:
                masks.append(fill_holes(p) if post else p)
    report = EvalReport.from_scores(scores)
    if any(s.degenerate for s in scores):
        n = sum(s.degenerate for s in scores)
        warnings.warn(f"{n} predictions had no disc (CDR set to 0)", DegeneratePredictionWarning, stacklevel=2)
    return (report, masks) if return_masks else report
