"""The adaptation training loop.

Each iteration runs five sub-steps in a fixed order:

1. ``seg``          supervised loss on the source batch, SGD step;
2. ``ema``          teacher <- EMA of student;
3. ``adv``          fooling losses on source features through frozen
                    discriminators, SGD step on the shared weights;
4. ``disc``         discriminator losses on detached source/target features,
                    one Adam step per discriminator;
5. ``consistency``  student vs. teacher on differently augmented target
                    images, SGD step.

A sub-step whose terms are all disabled (flag off or zero weight) is skipped
entirely: no forward pass, no optimizer step, no buffer updates.
"""
from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .. import adapt, nn, segnet, synthdata
from ..checkpoint import load_checkpoint, namespaced, save_checkpoint, strip
from ..metrics import EvalReport, evaluate
from ..nn import ParamSet
from .config import RunConfig

log = logging.getLogger(__name__)

LOG_FIELDS = ["iter", "epoch", "l_seg", "l_adv_E", "l_adv_D", "l_dis_E", "l_dis_D",
              "l_mse_E", "l_mse_D", "lr_seg", "lr_disc"]
EPOCH_FIELDS = ["epoch", "iter", "dice_cup", "dice_disc", "gamma_cdr"]
STEP_ORDER = ("seg", "ema", "adv", "disc", "consistency")
ENC_UPSAMPLE = 8


class TrainingDiverged(RuntimeError):
    pass


class RunInterrupted(RuntimeError):
    """Raised by ``train(stop_after_epoch=...)`` once the requested epoch is checkpointed."""


@dataclass
class TrainState:
    config: RunConfig
    student: ParamSet
    teacher: ParamSet
    adaptors: adapt.AdaptorSet
    seg_opt: nn.OptState
    iteration: int = 0
    epoch: int = 0
    max_iter: int = 1
    hooks: list[Callable[[str], None]] = field(default_factory=list)

    def _fire(self, name: str) -> None:
        for h in self.hooks:
            h(name)

    @property
    def eval_weights(self) -> ParamSet:
        """Weights handed back at the end: the teacher, unless self-ensembling is off."""
        return self.teacher if self.config.se_enabled else self.student

    @property
    def eval_namespace(self) -> str:
        return "teacher" if self.config.se_enabled else "student"


def init_state(config: RunConfig) -> TrainState:
    config.validate()
    student = segnet.build_segnet(config.segnet_config(), config.seed)
    if config.init_from:
        _, arrays = load_checkpoint(config.init_from)
        src = "teacher" if any(k.startswith("teacher/") for k in arrays) else "student"
        student.load_arrays(strip(src, arrays))
    teacher = segnet.init_teacher(student)
    adaptors = adapt.build_adaptors(
        config.seed, lambdas=config.lambdas, enc_enabled=config.enc_enabled,
        se_enabled=config.se_enabled, num_dec_discs=config.num_dec_discs, lr=config.disc_lr)
    for opt in [adaptors.enc_opt, *adaptors.dec_opts]:
        opt.betas = (config.disc_beta1, config.disc_beta2)
    seg_opt = nn.sgd(config.seg_lr, momentum=config.seg_momentum)
    return TrainState(config, student, teacher, adaptors, seg_opt, max_iter=config.max_iter)


def _enc_view(t: nn.Tensor) -> nn.Tensor:
    # bring the S/8 bottleneck map to full resolution for the encoder discriminator
    return nn.upsample2d(t, ENC_UPSAMPLE)


def _check(name: str, value: nn.Tensor) -> float:
    v = value.item()
    if not math.isfinite(v):
        raise TrainingDiverged(f"loss {name} became {v}")
    return v


def train_step(state: TrainState, b_s: synthdata.Batch, b_t: synthdata.Batch | None) -> dict:
    cfg, ad = state.config, state.adaptors
    it = state.iteration
    lr_seg = nn.poly_lr(cfg.seg_lr, it, state.max_iter, cfg.lr_power)
    lr_disc = nn.poly_lr(cfg.disc_lr, it, state.max_iter, cfg.lr_power)
    rec = {k: None for k in LOG_FIELDS}
    rec.update(iter=it, epoch=state.epoch, lr_seg=lr_seg, lr_disc=lr_disc)
    student = state.student

    # 1. supervised segmentation on the source batch
    student.zero_grad()
    out = segnet.forward(student, b_s.images, mode="train")
    l_seg = segnet.segmentation_loss(out, b_s.masks, cfg.deep_supervision) * cfg.lambda_seg
    rec["l_seg"] = _check("l_seg", l_seg)
    l_seg.backward()
    nn.opt_step(student, state.seg_opt, lr_seg)
    state._fire("seg")

    # 2. teacher follows the student
    if cfg.se_enabled:
        segnet.ema_update(state.teacher, student, cfg.ema_alpha)
        state._fire("ema")

    dec_scales = ad.active_dec_scales
    adversarial = b_t is not None and (ad.enc_active or bool(dec_scales))

    # 3. adversarial update of the shared weights
    if adversarial:
        student.zero_grad()
        out_s = segnet.forward(student, b_s.images, mode="train")
        with nn.no_grad():
            out_t = segnet.forward(student, b_t.images, mode="train")
        parts = {"seg": 0.0}
        if ad.enc_active:
            parts["adv_E"] = adapt.adv_loss(ad.enc_disc, _enc_view(out_s.enc_feature))
            rec["l_adv_E"] = _check("l_adv_E", parts["adv_E"])
        if dec_scales:
            parts["adv_D"] = [adapt.adv_loss(ad.dec_discs[j], nn.softmax(out_s.scale_logits[j]))
                              for j in dec_scales]
            rec["l_adv_D"] = float(np.mean([_check("l_adv_D", p) for p in parts["adv_D"]]))
        l_adv = adapt.total_loss(parts, {**ad.lambdas, "seg": 0.0})
        l_adv.backward()
        nn.opt_step(student, state.seg_opt, lr_seg)
        state._fire("adv")

        # 4. discriminators on detached features from the same forward pass
        if ad.enc_active:
            d = ad.enc_disc
            d.zero_grad()
            l_dis = adapt.disc_loss(d, _enc_view(out_s.enc_feature.detach()),
                                    _enc_view(out_t.enc_feature.detach()))
            rec["l_dis_E"] = _check("l_dis_E", l_dis)
            l_dis.backward()
            nn.opt_step(d, ad.enc_opt, lr_disc)
        dis_d = []
        for j in dec_scales:
            d = ad.dec_discs[j]
            d.zero_grad()
            l_dis = adapt.disc_loss(d, nn.softmax(out_s.scale_logits[j].detach()),
                                    nn.softmax(out_t.scale_logits[j]))
            dis_d.append(_check("l_dis_D", l_dis))
            l_dis.backward()
            nn.opt_step(d, ad.dec_opts[j], lr_disc)
        if dis_d:
            rec["l_dis_D"] = float(np.mean(dis_d))
        state._fire("disc")

    # 5. student-teacher consistency on the target batch
    if b_t is not None and (ad.mse_enc_active or ad.mse_dec_active):
        x_student = synthdata.augment(b_t.images, [cfg.seed, it, 0])
        x_teacher = synthdata.augment(b_t.images, [cfg.seed, it, 1])
        student.zero_grad()
        out_st = segnet.forward(student, x_student, mode="train")
        with nn.no_grad():
            out_te = segnet.forward(state.teacher, x_teacher, mode="eval", frozen=True)
        mse_e, mse_d = adapt.consistency_loss(out_st, out_te)
        parts = {"seg": 0.0}
        if ad.mse_enc_active:
            parts["mse_E"] = mse_e
            rec["l_mse_E"] = _check("l_mse_E", mse_e)
        if ad.mse_dec_active:
            parts["mse_D"] = mse_d
            rec["l_mse_D"] = _check("l_mse_D", mse_d)
        l_mse = adapt.total_loss(parts, {**ad.lambdas, "seg": 0.0})
        l_mse.backward()
        nn.opt_step(student, state.seg_opt, lr_seg)
        state._fire("consistency")

    student.clear_grad()
    state.iteration += 1
    return rec


# persistence ---------------------------------------------------------------------

def state_arrays(state: TrainState) -> dict:
    arrays = {}
    arrays.update(namespaced("student", state.student.arrays()))
    arrays.update(namespaced("teacher", state.teacher.arrays()))
    for key, d in state.adaptors.all_discs().items():
        arrays.update(namespaced(f"disc/{key}", d.arrays()))
    arrays.update(namespaced("opt/seg/m", state.seg_opt.m))
    opts = {"enc": state.adaptors.enc_opt, **{f"dec{j}": o for j, o in enumerate(state.adaptors.dec_opts)}}
    for key, o in opts.items():
        arrays.update(namespaced(f"opt/{key}/m", o.m))
        arrays.update(namespaced(f"opt/{key}/v", o.v))
    return arrays


def state_meta(state: TrainState) -> dict:
    ad = state.adaptors
    return {
        "config": state.config.to_dict(),
        "segnet": {"base_channels": state.config.base_channels, "input_size": state.config.input_size},
        "iteration": state.iteration,
        "epoch": state.epoch,
        "max_iter": state.max_iter,
        "eval_namespace": state.eval_namespace,
        "steps": {
            "student": state.student.step, "teacher": state.teacher.step,
            "seg_opt": state.seg_opt.step, "enc_opt": ad.enc_opt.step,
            "dec_opts": [o.step for o in ad.dec_opts],
            "enc_disc": ad.enc_disc.step, "dec_discs": [d.step for d in ad.dec_discs],
        },
    }


def save_state(state: TrainState, path: Path) -> None:
    save_checkpoint(path, state_arrays(state), state_meta(state))


def restore_state(state: TrainState, path: Path) -> None:
    meta, arrays = load_checkpoint(path)
    state.student.load_arrays(strip("student", arrays))
    state.teacher.load_arrays(strip("teacher", arrays))
    for key, d in state.adaptors.all_discs().items():
        d.load_arrays(strip(f"disc/{key}", arrays))
    state.seg_opt.m = dict(strip("opt/seg/m", arrays))
    opts = {"enc": state.adaptors.enc_opt, **{f"dec{j}": o for j, o in enumerate(state.adaptors.dec_opts)}}
    for key, o in opts.items():
        o.m = dict(strip(f"opt/{key}/m", arrays))
        o.v = dict(strip(f"opt/{key}/v", arrays))
    steps = meta["steps"]
    state.student.step, state.teacher.step = steps["student"], steps["teacher"]
    state.seg_opt.step = steps["seg_opt"]
    state.adaptors.enc_opt.step = steps["enc_opt"]
    state.adaptors.enc_disc.step = steps["enc_disc"]
    for o, s in zip(state.adaptors.dec_opts, steps["dec_opts"]):
        o.step = s
    for d, s in zip(state.adaptors.dec_discs, steps["dec_discs"]):
        d.step = s
    state.iteration, state.epoch = meta["iteration"], meta["epoch"]


def load_eval_weights(path: str | Path) -> tuple[ParamSet, dict]:
    """Rebuild the returned network from a checkpoint (teacher namespace when present)."""
    meta, arrays = load_checkpoint(path)
    cfg = RunConfig.from_dict(meta["config"])
    ns = meta.get("eval_namespace", "teacher")
    ps = segnet.build_segnet(cfg.segnet_config(), cfg.seed)
    ps.load_arrays(strip(ns, arrays))
    return ps, meta


# data ------------------------------------------------------------------------------

def load_data(config: RunConfig) -> synthdata.DomainData:
    if config.data_dir:
        manifest = Path(config.data_dir)
        if manifest.is_dir():
            manifest = manifest / "manifest.tsv"
        return synthdata.load_domains(manifest)
    return synthdata.make_domains(config.input_size, config.n_source, config.n_target,
                                  config.n_test, shift=config.shift, seed=config.data_seed)


# run loop ---------------------------------------------------------------------------

@dataclass
class RunResult:
    run_dir: Path
    weights: ParamSet
    weights_from: str
    report: EvalReport
    state: TrainState


def _write_rows(path: Path, fields: list[str], rows: list[dict], mode: str) -> None:
    new = mode == "w" or not path.exists()
    with open(path, mode, newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields)
        if new:
            w.writeheader()
        for r in rows:
            w.writerow({k: ("" if r.get(k) is None else repr(r[k]) if isinstance(r[k], float) else r[k])
                        for k in fields})


def _truncate_csv(path: Path, keep: Callable[[dict], bool]) -> None:
    if not path.exists():
        return
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        fields = reader.fieldnames or []
        rows = [r for r in reader if keep(r)]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        w.writerows(rows)


def train(config: RunConfig, resume: bool = True, data: synthdata.DomainData | None = None,
          stop_after_epoch: int | None = None) -> RunResult:
    """Run the full schedule and return the evaluated weights and their report.

    With ``resume`` the run continues from ``<out>/checkpoints/latest.ckpt``
    when one exists.  ``stop_after_epoch`` ends the run early after that
    epoch's checkpoint (used to simulate interruption).
    """
    config.validate()
    run_dir = Path(config.out)
    ckpt_dir = run_dir / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    config.save(run_dir / "config.yaml")
    if data is None:
        data = load_data(config)
    target = data.target_train if config.use_target else []
    if config.use_target and not target:
        raise ValueError("use_target is set but the target training split is empty")

    state = init_state(config)
    loader = synthdata.PairLoader(data.source, target, config.batch_size, config.seed)
    metrics_path, epochs_path = run_dir / "metrics.csv", run_dir / "epoch_metrics.csv"
    latest = ckpt_dir / "latest.ckpt"
    start_epoch = 0
    if resume and latest.exists():
        restore_state(state, latest)
        start_epoch = state.epoch
        done = state.iteration
        _truncate_csv(metrics_path, lambda r: int(r["iter"]) < done)
        _truncate_csv(epochs_path, lambda r: int(r["epoch"]) < start_epoch)
        log.info("resumed %s at epoch %d (iteration %d)", run_dir, start_epoch, done)
    else:
        for p in (metrics_path, epochs_path):
            if p.exists():
                p.unlink()

    t0 = time.time()
    for e in range(start_epoch, config.epochs):
        state.epoch = e
        rows = []
        try:
            for b_s, b_t in loader.epoch(e):
                rows.append(train_step(state, b_s, b_t))
        except (TrainingDiverged, FloatingPointError) as exc:
            _write_rows(metrics_path, LOG_FIELDS, rows, "a")
            (run_dir / "diverged.json").write_text(json.dumps(
                {"iteration": state.iteration, "epoch": e, "error": str(exc)}))
            raise TrainingDiverged(f"run aborted at iteration {state.iteration}: {exc}") from exc
        _write_rows(metrics_path, LOG_FIELDS, rows, "a")
        state.epoch = e + 1
        if (e + 1) % config.eval_every == 0 or e + 1 == config.epochs:
            rep = evaluate(state.eval_weights, data.target_test) if data.target_test else None
            if rep is not None:
                _write_rows(epochs_path, EPOCH_FIELDS,
                            [{"epoch": e, "iter": state.iteration, **rep.summary()}], "a")
                log.info("epoch %d  dice_cup %.4f  dice_disc %.4f  gamma %.4f  (%.0fs)",
                         e, rep.dice_cup, rep.dice_disc, rep.gamma_cdr, time.time() - t0)
        if (e + 1) % config.checkpoint_every == 0 or e + 1 == config.epochs:
            save_state(state, latest)
            save_state(state, ckpt_dir / f"epoch{e + 1:03d}.ckpt")
        if stop_after_epoch is not None and e + 1 >= stop_after_epoch and e + 1 < config.epochs:
            save_state(state, latest)
            raise RunInterrupted(f"stopped after epoch {e + 1}")

    save_state(state, run_dir / "final.ckpt")
    weights = state.eval_weights
    report = finalize(run_dir, weights, data, config)
    return RunResult(run_dir, weights, state.eval_namespace, report, state)


def finalize(run_dir: Path, weights: ParamSet, data: synthdata.DomainData, config: RunConfig) -> EvalReport:
    from PIL import Image

    if not data.target_test:
        raise ValueError("no target test split to evaluate")
    report, masks = evaluate(weights, data.target_test, return_masks=True)
    report.write_jsonl(run_dir / "eval_report.jsonl")
    report.write_csv(run_dir / "eval_report.csv")
    (run_dir / "final_metrics.json").write_text(json.dumps(report.summary(), indent=2, sort_keys=True))
    if config.save_masks:
        mdir = run_dir / "pred_masks"
        mdir.mkdir(exist_ok=True)
        lut = np.asarray(synthdata.MASK_VALUES, dtype=np.uint8)
        for i, m in enumerate(masks):
            Image.fromarray(lut[m], mode="L").save(mdir / f"{i:05d}.png")
    if config.figures:
        from . import report as figs
        figs.training_curves(run_dir)
    return report
