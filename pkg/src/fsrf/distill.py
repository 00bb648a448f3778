"""Self-distillation step: two masked views through one shared network."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import MODALITIES, MissingPattern, draw_mrm_pair, mask_batch
from .encoders import BranchOutput, FSRFModel
from .losses import LossConfig, dhf_losses, js_divergence, sinkhorn_distance, task_loss, total_loss

VARIANTS = ("full", "no_dhf", "no_das")
BREAKDOWN_KEYS = ("task", "dhf_hohe", "dhf_n1", "dhf_n2", "das_feat", "das_logits", "total")


@dataclass
class BranchInput:
    feats: dict
    masks: dict

    @property
    def size(self) -> int:
        return self.feats["L"].shape[0]


def _stack(a: BranchInput, b: BranchInput) -> BranchInput:
    return BranchInput(
        {m: np.concatenate([a.feats[m], b.feats[m]]) for m in MODALITIES},
        {m: np.concatenate([a.masks[m], b.masks[m]]) for m in MODALITIES},
    )


def _rows(t: Tensor, start: int, stop: int) -> Tensor:
    return ad.take(t, slice(start, stop))


def _split(out: BranchOutput, n: int) -> tuple[BranchOutput, BranchOutput]:
    halves = []
    for lo, hi in ((0, n), (n, 2 * n)):
        reps = None
        if out.reps is not None:
            reps = {m: tuple(_rows(r, lo, hi) for r in out.reps[m]) for m in MODALITIES}
        hidden = {m: _rows(h, lo, hi) for m, h in out.hidden.items()}
        halves.append(BranchOutput(reps, hidden, _rows(out.z, lo, hi), _rows(out.probs, lo, hi),
                                   _rows(out.pred, lo, hi)))
    return halves[0], halves[1]


def _zero() -> Tensor:
    return Tensor(0.0)


def das_loss(
    model: FSRFModel,
    branch_p: BranchInput,
    branch_q: BranchInput | None,
    targets: np.ndarray,
    cfg: LossConfig,
) -> tuple[Tensor, dict[str, float]]:
    """Total objective for already-masked branch inputs.

    ``branch_q=None`` runs a single branch with no distillation terms. Terms
    whose weight is zero are skipped and reported as 0.
    """
    mode = model.config.mode
    n = branch_p.size
    if branch_q is None:
        outs = [model.forward(branch_p.feats, branch_p.masks)]
    else:
        both = _stack(branch_p, branch_q)
        outs = list(_split(model.forward(both.feats, both.masks), n))

    preds = [o.probs if mode == "classification" else o.pred for o in outs]
    task = task_loss(preds, targets, mode)

    parts = {k: _zero() for k in ("dhf_hohe", "dhf_n1", "dhf_n2", "das_feat", "das_logits")}
    if cfg.lambda1 > 0 and outs[0].reps is not None:
        per_branch = [dhf_losses(o.reps, cfg) for o in outs]
        scale = 1.0 / len(per_branch)
        for i, key in enumerate(("dhf_hohe", "dhf_n1", "dhf_n2")):
            acc = per_branch[0][i]
            for extra in per_branch[1:]:
                acc = ad.add(acc, extra[i])
            parts[key] = ad.scalar_mul(acc, scale)
    if cfg.lambda2 > 0 and len(outs) == 2:
        parts["das_feat"] = sinkhorn_distance(
            outs[0].z, outs[1].z, cfg.sinkhorn_eps, cfg.sinkhorn_max_iter, cfg.sinkhorn_tol
        )
        parts["das_logits"] = ad.mean(js_divergence(outs[0].probs, outs[1].probs))

    dhf = ad.add(ad.add(parts["dhf_hohe"], parts["dhf_n1"]), parts["dhf_n2"])
    das = ad.add(parts["das_feat"], parts["das_logits"])
    total = total_loss(task, dhf, das, cfg.lambda1, cfg.lambda2)
    breakdown = {"task": task.item(), **{k: v.item() for k, v in parts.items()}, "total": total.item()}
    return total, breakdown


def mrm_branches(
    feats: dict, masks: dict, rng: np.random.Generator, two_branches: bool = True
) -> tuple[BranchInput, BranchInput | None, list, list]:
    """Draw per-sample MRM pattern pairs and mask the batch into two views."""
    n = feats["L"].shape[0]
    pairs = [draw_mrm_pair(rng) for _ in range(n)]
    pats_p = [p for p, _ in pairs]
    pats_q = [q for _, q in pairs]
    fp, kp = mask_batch(feats, masks, pats_p, rng)
    if not two_branches:
        return BranchInput(fp, kp), None, pats_p, []
    fq, kq = mask_batch(feats, masks, pats_q, rng)
    return BranchInput(fp, kp), BranchInput(fq, kq), pats_p, pats_q


def das_step(
    model: FSRFModel,
    feats: dict,
    masks: dict,
    targets: np.ndarray,
    cfg: LossConfig,
    rng: np.random.Generator,
    variant: str = "full",
) -> tuple[Tensor, dict[str, float]]:
    """One batch of complete samples -> (total loss tensor, itemized breakdown).

    ``no_das`` keeps MRM masking on a single branch and drops the
    distillation terms; ``no_dhf`` expects a model built with that variant.
    """
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    if feats["L"].shape[0] == 0:
        raise ValueError("empty batch")
    bp, bq, _, _ = mrm_branches(feats, masks, rng, two_branches=variant != "no_das")
    return das_loss(model, bp, bq, targets, cfg)


def eval_forward(model: FSRFModel, feats: dict, masks: dict) -> BranchOutput:
    """Single-branch inference on already-masked inputs; nothing is recorded."""
    with ad.no_grad():
        return model.forward(feats, masks)


def identity_patterns(n: int) -> list[MissingPattern]:
    return [MissingPattern() for _ in range(n)]
