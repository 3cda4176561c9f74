"""Semantic, uncertainty, mutual-learning and total losses."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import torch

from .geometry import BevGridSpec
from .net import BevFeatureSet, ModelOutput

log = logging.getLogger(__name__)

EPS = 1e-7
SCHEMES = ("none", "feature_sim", "cbft_teacher", "cfft_teacher", "output_sim", "subfeature_sim")
DISTANCES = ("L1", "KL", "L2")


class LossConfigError(ValueError):
    pass


class NonFiniteLossError(FloatingPointError):
    pass


@dataclass
class LossWeights:
    lambda1: float = 0.05
    lambda2: float = 0.01
    alpha: float = 0.001
    beta: float = 1.0
    class_weights: list[float] | None = None
    neg_ratio: int = 3
    neg_factor_cap: float = 0.99

    def __post_init__(self):
        for k in ("lambda1", "lambda2", "alpha", "beta"):
            if getattr(self, k) < 0:
                raise LossConfigError(f"{k} must be non-negative")
        if self.class_weights is not None and any(w <= 0 for w in self.class_weights):
            raise LossConfigError("class weights must be strictly positive")

    def to_dict(self) -> dict:
        return dict(vars(self))


@dataclass
class SchemeConfig:
    scheme: str = "output_sim"
    distance: str = "L2"

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise LossConfigError(f"scheme must be one of {SCHEMES}, got {self.scheme!r}")
        if self.distance not in DISTANCES:
            raise LossConfigError(f"distance must be one of {DISTANCES}, got {self.distance!r}")

    def to_dict(self) -> dict:
        return dict(vars(self))


def compute_class_weights(freqs, normalize: str | None = "mean", cap: float | None = None) -> list[float]:
    """Inverse square root of per-class positive frequency.

    ``normalize``: None keeps the raw values, "mean" rescales to mean 1 and
    then clips at ``cap`` when given, "max" rescales so the largest weight
    equals ``cap`` (default 1). Classes with zero frequency get weight 1 after
    normalization and are logged.
    """
    raw = []
    for i, f in enumerate(freqs):
        f = float(f)
        if f < 0 or f > 1:
            raise ValueError(f"frequency {f} of class {i} outside [0, 1]")
        if f == 0:
            log.warning("class %d never occurs; its weight is undefined and set to 1", i)
            raw.append(math.nan)
        else:
            raw.append(f ** -0.5)
    known = [w for w in raw if not math.isnan(w)]
    if normalize is None or not known:
        scale = 1.0
    elif normalize == "mean":
        scale = len(known) / sum(known)
    elif normalize == "max":
        scale = (1.0 if cap is None else cap) / max(known)
    else:
        raise ValueError(f"unknown normalization {normalize!r}")
    out = [1.0 if math.isnan(w) else w * scale for w in raw]
    if normalize == "mean" and cap is not None:
        out = [min(w, cap) for w in out]
    return out


def _per_class(w, like: torch.Tensor) -> torch.Tensor:
    w = torch.as_tensor(w, dtype=like.dtype, device=like.device)
    return w.view(1, -1, *([1] * (like.dim() - 2)))


def hard_negative_mask(scores, labels, class_weights, valid=None, neg_ratio=3, neg_factor_cap=0.99, eps=EPS):
    """Per sample, the ``neg_ratio * N_pos`` negatives with the largest
    weighted loss; ties go to the lowest flat index. A sample without
    positives keeps all its negatives."""
    with torch.no_grad():
        c = scores.clamp(eps, 1 - eps)
        w = _per_class(class_weights, scores)
        neg_loss = -(1 - w.clamp(max=neg_factor_cap)) * torch.log(1 - c)
        cand, pos = labels == 0, labels > 0
        if valid is not None:
            inside = valid.unsqueeze(1) > 0
            cand, pos = cand & inside, pos & inside
        mask = torch.zeros_like(cand)
        for b in range(scores.shape[0]):
            n_pos = int(pos[b].sum())
            flat_c = cand[b].reshape(-1)
            if n_pos == 0:
                mask[b] = cand[b]
                continue
            k = min(neg_ratio * n_pos, int(flat_c.sum()))
            vals = torch.where(flat_c, neg_loss[b].reshape(-1), torch.full_like(neg_loss[b].reshape(-1), -math.inf))
            order = torch.sort(vals, descending=True, stable=True).indices[:k]
            m = torch.zeros_like(flat_c)
            m[order] = True
            mask[b] = m.view_as(cand[b])
    return mask


def semantic_loss(scores, labels, class_weights, valid=None, neg_mask=None,
                  neg_ratio=3, neg_factor_cap=0.99, eps=EPS):
    """Class-weighted binary cross entropy over positives and mined negatives,
    normalized by the positive count.

    scores, labels: (B, C, Z, W); valid: (B, Z, W) or None.
    ``neg_mask`` fixes the negative set (e.g. for gradient checks); otherwise
    it is mined from the current scores.
    """
    if scores.shape != labels.shape:
        raise ValueError(f"scores {tuple(scores.shape)} vs labels {tuple(labels.shape)}")
    labels = labels.to(scores.dtype)
    pos = labels > 0
    if valid is not None:
        pos = pos & (valid.unsqueeze(1) > 0)
    if neg_mask is None:
        neg_mask = hard_negative_mask(scores, labels, class_weights, valid, neg_ratio, neg_factor_cap, eps)
    c = scores.clamp(eps, 1 - eps)
    w = _per_class(class_weights, scores)
    pos_term = -(w * torch.log(c))[pos].sum() if pos.any() else c.sum() * 0
    neg_term = -((1 - w.clamp(max=neg_factor_cap)) * torch.log(1 - c))[neg_mask].sum()
    n_pos = int(pos.sum())
    if n_pos == 0:
        log.debug("semantic loss on a batch without positives")
        return neg_term
    return (pos_term + neg_term) / n_pos


def uncertainty_loss(*score_maps, eps=EPS):
    """Mean of 1 - c*log(c) over every entry of all given maps."""
    if not score_maps:
        raise ValueError("need at least one score map")
    flat = torch.cat([s.clamp(min=eps).reshape(-1) for s in score_maps])
    return (1 - flat * torch.log(flat)).mean()


def _rms(d: torch.Tensor) -> torch.Tensor:
    sq = d.pow(2).mean()
    safe = torch.where(sq > 0, sq, torch.ones_like(sq))
    return torch.where(sq > 0, safe.sqrt(), torch.zeros_like(sq))


def _kl_sym(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    la, lb = torch.log_softmax(a, dim=1), torch.log_softmax(b, dim=1)
    pa, pb = la.exp(), lb.exp()
    kl_ab = (pa * (la - lb)).sum(dim=1).mean()
    kl_ba = (pb * (lb - la)).sum(dim=1).mean()
    return 0.5 * (kl_ab + kl_ba)


def distance(a: torch.Tensor, b: torch.Tensor, kind: str = "L2") -> torch.Tensor:
    """Element-count normalized distance between two feature tensors.

    L2 is the root mean square difference, L1 the mean absolute difference,
    KL the symmetrized per-cell divergence of channel softmaxes (dim 1).
    """
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    if kind == "L2":
        return _rms(a - b)
    if kind == "L1":
        return (a - b).abs().mean()
    if kind == "KL":
        return _kl_sym(a, b)
    raise LossConfigError(f"unknown distance {kind!r}")


def mutual_learning_loss(geo: BevFeatureSet, glo: BevFeatureSet, lw: LossWeights = LossWeights(),
                         dist: str = "L2", include_concat: bool = True):
    if len(geo.sub_features) != len(glo.sub_features):
        raise ValueError("branches have different numbers of sub-features")
    total = 0
    if include_concat:
        total = lw.lambda1 * distance(geo.concatenated, glo.concatenated, dist)
    for a, b in zip(geo.sub_features, glo.sub_features):
        total = total + lw.lambda2 * distance(a, b, dist)
    return total


def split_by_extent(t: torch.Tensor, grid: BevGridSpec) -> BevFeatureSet:
    subs = []
    for e in range(len(grid.extents)):
        a, b = grid.extent_rows(e)
        subs.append(t[..., a:b, :])
    return BevFeatureSet(subs, t)


def apply_scheme(scheme: str, output: ModelOutput, grid: BevGridSpec):
    """Pick the tensors the mutual-learning term compares and block gradient
    into the teacher side.

    Returns (geo, glo, include_concat) or None when the scheme adds no term.
    """
    if scheme not in SCHEMES:
        raise LossConfigError(f"unknown scheme {scheme!r}")
    if scheme == "none":
        return None
    geo, glo = output.branch_features["geo"], output.branch_features["glo"]
    if geo is None or glo is None:
        raise LossConfigError(f"scheme {scheme!r} needs both branches")
    if scheme == "cbft_teacher":
        return geo.detach(), glo, True
    if scheme == "cfft_teacher":
        return geo, glo.detach(), True
    if scheme == "output_sim":
        return (split_by_extent(output.branch_scores["geo"], grid),
                split_by_extent(output.branch_scores["glo"], grid), True)
    if scheme == "subfeature_sim":
        return geo, glo, False
    return geo, glo, True


def scheme_loss(scheme_cfg: SchemeConfig, output: ModelOutput, grid: BevGridSpec, lw: LossWeights):
    picked = apply_scheme(scheme_cfg.scheme, output, grid)
    if picked is None:
        return None
    geo, glo, include_concat = picked
    return mutual_learning_loss(geo, glo, lw, scheme_cfg.distance, include_concat)


def total_loss(l_s, l_u, l_m, lw: LossWeights = LossWeights()):
    parts = {"semantic": l_s, "uncertainty": l_u, "mutual": l_m}
    for name, v in parts.items():
        if v is not None and not math.isfinite(_f(v)):
            raise NonFiniteLossError(f"{name} loss is not finite: {_f(v)}")
    out = l_s
    if l_u is not None:
        out = out + lw.alpha * l_u
    if l_m is not None and lw.beta != 0:
        out = out + lw.beta * l_m
    return out


def _f(v) -> float:
    return float(v.detach()) if torch.is_tensor(v) else float(v)


@dataclass
class LossBreakdown:
    total: torch.Tensor
    semantic: torch.Tensor
    uncertainty: torch.Tensor
    mutual: torch.Tensor | None
    extras: dict = field(default_factory=dict)

    def as_floats(self) -> dict[str, float]:
        return {
            "total": _f(self.total), "semantic": _f(self.semantic),
            "uncertainty": _f(self.uncertainty),
            "mutual": None if self.mutual is None else _f(self.mutual),
        }


def hft_loss(output: ModelOutput, labels, valid, lw: LossWeights, scheme_cfg: SchemeConfig,
             grid: BevGridSpec, neg_masks: dict | None = None) -> LossBreakdown:
    """Full training objective for one batch.

    The semantic term supervises the main scores and, in hybrid mode, each
    branch's own scores; the uncertainty term covers the branch score maps.
    """
    C = labels.shape[1]
    w = lw.class_weights or [1.0] * C
    if len(w) != C:
        raise LossConfigError(f"{len(w)} class weights for {C} classes")
    neg_masks = neg_masks or {}
    heads = {"main": output.scores}
    branches = [k for k in ("geo", "glo") if output.branch_scores.get(k) is not None]
    if len(branches) == 2:
        heads.update({k: output.branch_scores[k] for k in branches})
    l_s = 0
    parts = {}
    for name, sc in heads.items():
        parts[name] = semantic_loss(sc, labels, w, valid, neg_masks.get(name), lw.neg_ratio, lw.neg_factor_cap)
        l_s = l_s + parts[name]
    l_u = uncertainty_loss(*[output.branch_scores[k] for k in branches])
    l_m = scheme_loss(scheme_cfg, output, grid, lw) if len(branches) == 2 else None
    tot = total_loss(l_s, l_u, l_m, lw)
    return LossBreakdown(tot, l_s, l_u, l_m, {f"semantic_{k}": float(v.detach()) for k, v in parts.items()})
