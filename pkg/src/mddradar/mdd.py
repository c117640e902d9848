"""Margin disparity discrepancy objectives and the bound diagnostics.

The training objective returns two scalars per batch:

* ``classification_loss`` on labelled source scores of the main head ``f``;
* ``transfer_loss`` = target adversarial term minus the (weighted) source
  term, both on the adversarial head ``f'`` against ``f``'s detached
  pseudo-labels.

``f'`` should *maximise* the transfer loss while the feature extractor
minimises it.  With the gradient reversal layer sitting between the features
and ``f'``, a single descent step on ``classification_loss - transfer_loss``
does both (see :func:`total_loss`).
"""
from __future__ import annotations

from dataclasses import dataclass
from types import SimpleNamespace
from typing import Callable, NamedTuple

import numpy as np

from . import losses
from . import numerics as nx
from .losses import DEFAULT_RHO
from .model import ClassifierHead, MDDNet
from .numerics import ContractError, Tensor
from .optim import SGDState, sgd_step

VARIANTS = ("original", "soft_margin")


@dataclass
class ObjectiveConfig:
    variant: str = "soft_margin"
    gamma: float = 1.0
    rho: float = DEFAULT_RHO
    grl_eta: float = 1.0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ContractError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.variant == "original" and not self.gamma > 0:
            raise ContractError(f"margin factor gamma must be > 0, got {self.gamma}")
        if self.variant == "soft_margin" and self.gamma != 1.0:
            raise ContractError("the soft-margin objective fixes gamma = 1")
        if self.rho < 0:
            raise ContractError(f"rho must be >= 0, got {self.rho}")
        if self.grl_eta < 0:
            raise ContractError(f"grl_eta must be >= 0, got {self.grl_eta}")


class Batch(NamedTuple):
    x_r: np.ndarray
    x_d: np.ndarray
    labels: np.ndarray | None = None


def _check_batches(source: Batch, target: Batch) -> None:
    if len(source.x_r) == 0 or len(target.x_r) == 0:
        raise ContractError("batches must be non-empty")
    if source.labels is None:
        raise ContractError("source batch needs labels")


def _terms(adv_t: Tensor, adv_s: Tensor, pseudo_t, pseudo_s, cfg: ObjectiveConfig):
    if cfg.variant == "original":
        tgt = losses.adversarial_loss(adv_t, pseudo_t)
        src = losses.lse_loss(adv_s, pseudo_s)
        weight = cfg.gamma
    else:
        tgt = losses.sm_adversarial(adv_t, pseudo_t, cfg.rho)
        src = losses.sm_cross_entropy(adv_s, pseudo_s, cfg.rho)
        weight = 1.0
    return nx.sub(nx.mean(tgt), nx.scale(nx.mean(src), weight))


def classification_term(scores: Tensor, labels, cfg: ObjectiveConfig) -> Tensor:
    if cfg.variant == "original":
        return nx.mean(losses.lse_loss(scores, labels))
    return nx.mean(losses.sm_cross_entropy(scores, labels, cfg.rho))


def batch_objective(source: Batch, target: Batch, net: MDDNet, cfg: ObjectiveConfig) -> tuple[Tensor, Tensor]:
    """``(classification_loss, transfer_loss)`` for one source/target batch pair.

    Source and target go through the feature extractor in one stacked pass.
    Pseudo-labels are the arg-max of ``f`` and carry no gradient.
    """
    _check_batches(source, target)
    ns = len(source.x_r)
    feats = net.features(
        np.concatenate([source.x_r, target.x_r]),
        np.concatenate([source.x_d, target.x_d]),
    )
    scores = net.head(feats)
    adv = net.adv_head(nx.grad_reverse(feats, cfg.grl_eta))
    n = feats.shape[0]
    pseudo = losses.predict(scores.data)
    cls = classification_term(nx.take_rows(scores, 0, ns), source.labels, cfg)
    transfer = _terms(nx.take_rows(adv, ns, n), nx.take_rows(adv, 0, ns), pseudo[ns:], pseudo[:ns], cfg)
    return cls, transfer


def batch_objective_original(source: Batch, target: Batch, net: MDDNet, cfg: ObjectiveConfig):
    if cfg.variant != "original":
        raise ContractError("batch_objective_original needs variant='original'")
    return batch_objective(source, target, net, cfg)


def batch_objective_soft_margin(source: Batch, target: Batch, net: MDDNet, cfg: ObjectiveConfig):
    if cfg.variant != "soft_margin":
        raise ContractError("batch_objective_soft_margin needs variant='soft_margin'")
    return batch_objective(source, target, net, cfg)


def total_loss(classification_loss: Tensor, transfer_loss: Tensor) -> Tensor:
    """The scalar a single descent step minimises."""
    return nx.sub(classification_loss, transfer_loss)


# --- diagnostics ---------------------------------------------------------


def _fit(params, loss_fn: Callable[[], Tensor], steps: int, lr: float, momentum: float = 0.9) -> None:
    cfg = SimpleNamespace(
        lr0=lr, momentum=momentum, weight_decay=0.0, lr_alpha=0.0, lr_beta=0.0, total_steps=max(steps, 1)
    )
    state = SGDState()
    for step in range(steps):
        for p in params:
            p.grad = None
        nx.backward(loss_fn())
        sgd_step(params, [p.grad for p in params], state, step, cfg)


def _params(module) -> list[Tensor]:
    return [p for _, p in module.named_parameters()]


def estimate_mdd_from_features(
    feat_s: np.ndarray,
    feat_t: np.ndarray,
    scores_f_s: np.ndarray,
    scores_f_t: np.ndarray,
    adversary,
    adversary_steps: int,
    rho: float = DEFAULT_RHO,
    lr: float = 0.05,
) -> float:
    """Train ``adversary`` on frozen features, report the ramp-loss disparity gap.

    The adversary ascends the differentiable soft-margin surrogate; the value
    returned is ``disp_T - disp_S`` with the true ramp loss at margin ``rho``.
    Finite training only reaches *some* ``f'``, so this is a lower estimate of
    the supremum.
    """
    pseudo_s = losses.predict(scores_f_s)
    pseudo_t = losses.predict(scores_f_t)
    fs, ft = Tensor(feat_s), Tensor(feat_t)
    params = _params(adversary)

    def neg_surrogate():
        gap = nx.sub(
            nx.mean(losses.sm_adversarial(adversary(ft), pseudo_t, rho)),
            nx.mean(losses.sm_cross_entropy(adversary(fs), pseudo_s, rho)),
        )
        return nx.scale(gap, -1.0)

    _fit(params, neg_surrogate, adversary_steps, lr)
    with nx.no_grad():
        adv_s = adversary(fs).data
        adv_t = adversary(ft).data
    return losses.mdd_empirical(
        losses.disparity_empirical(adv_t, scores_f_t, rho),
        losses.disparity_empirical(adv_s, scores_f_s, rho),
    )


def _features_and_scores(net: MDDNet, data) -> tuple[np.ndarray, np.ndarray]:
    with nx.no_grad():
        feats = net.features(data.x_r, data.x_d)
        return feats.data, net.head(feats).data


def estimate_mdd(source, target, net: MDDNet, adversary_steps: int, rho: float = DEFAULT_RHO, seed: int = 0, lr: float = 0.05) -> float:
    """Disparity gap reached by a fresh adversarial head against the frozen ``f`` and features."""
    feat_s, sc_s = _features_and_scores(net, source)
    feat_t, sc_t = _features_and_scores(net, target)
    adversary = ClassifierHead(net.arch, np.random.default_rng(seed))
    return estimate_mdd_from_features(feat_s, feat_t, sc_s, sc_t, adversary, adversary_steps, rho, lr)


def ideal_combined_margin_loss_from_features(
    feat_s: np.ndarray,
    labels_s,
    feat_t: np.ndarray,
    labels_t,
    head,
    steps: int,
    rho: float = DEFAULT_RHO,
    lr: float = 0.05,
) -> float:
    """Fit ``head`` on the union of both labelled sets; return ``err_S + err_T`` at margin ``rho``.

    Training minimises the soft-margin cross-entropy at ``2 rho``, which
    bounds ``2 rho`` times the ramp loss at ``rho`` from above.  Any fitted
    head only upper-bounds the ideal joint loss.
    """
    if steps < 1:
        raise ContractError(f"steps must be >= 1, got {steps}")
    if labels_s is None or labels_t is None:
        raise ContractError("ideal joint margin loss needs labels on both domains")
    labels_s = np.asarray(labels_s)
    labels_t = np.asarray(labels_t)
    if (labels_s < 0).any() or (labels_t < 0).any():
        raise ContractError("ideal joint margin loss needs labels on both domains")
    feats = Tensor(np.concatenate([feat_s, feat_t]))
    labels = np.concatenate([labels_s, labels_t])
    params = _params(head)
    _fit(params, lambda: nx.mean(losses.sm_cross_entropy(head(feats), labels, 2 * rho)), steps, lr)
    with nx.no_grad():
        sc_s = head(Tensor(feat_s)).data
        sc_t = head(Tensor(feat_t)).data
    return losses.margin_loss_empirical(sc_s, labels_s, rho) + losses.margin_loss_empirical(sc_t, labels_t, rho)


def ideal_combined_margin_loss(source_labeled, target_labeled, net: MDDNet, steps: int, rho: float = DEFAULT_RHO, seed: int = 0, lr: float = 0.05) -> float:
    """Upper estimate of the ideal joint margin loss over the frozen feature extractor."""
    for ds in (source_labeled, target_labeled):
        if not getattr(ds, "labeled", True) or ds.labels is None:
            raise ContractError("ideal joint margin loss needs labelled source and target sets")
    feat_s, _ = _features_and_scores(net, source_labeled)
    feat_t, _ = _features_and_scores(net, target_labeled)
    head = ClassifierHead(net.arch, np.random.default_rng(seed))
    return ideal_combined_margin_loss_from_features(
        feat_s, source_labeled.labels, feat_t, target_labeled.labels, head, steps, rho, lr
    )


def bound_gap(err_t: float, err_s_margin: float, mdd_estimate: float, lambda_estimate: float) -> float:
    """Right-hand side of the target error bound minus the observed target error.

    Reported only: the disparity estimate is a lower estimate and the joint
    loss an upper estimate, so the sign carries no guarantee.
    """
    return (err_s_margin + mdd_estimate + lambda_estimate) - err_t

