"""Margin losses, disparities and the cross-entropy family used for training.

Class labels are 0-based indices into a score vector.  Score arguments are
either a single vector of shape ``(k,)`` with an integer label, or a batch
of shape ``(n, k)`` with an integer array of labels.

The ramp/margin quantities (``margin_indicator``, ``score_margin``,
``generalized_hinge``, the disparities) are plain numpy functions used for
metrics.  The cross-entropy family (``lse_loss``, ``adversarial_loss``,
``sm_cross_entropy``, ``sm_adversarial``) returns a :class:`Tensor` when
given one, so the same call serves training and evaluation.
"""
from __future__ import annotations

import math

import numpy as np

from . import numerics as nx
from .numerics import ContractError, Tensor

ADV_EPS = 1e-12
LOG_ADV_EPS = math.log(ADV_EPS)
DEFAULT_RHO = 2.0 * math.log(2.0)


def _check_rho(rho: float, allow_zero: bool = False) -> float:
    rho = float(rho)
    if not math.isfinite(rho) or rho < 0 or (rho == 0 and not allow_zero):
        bound = ">= 0" if allow_zero else "> 0"
        raise ContractError(f"margin rho must be {bound}, got {rho}")
    return rho


def _scores(f) -> np.ndarray:
    arr = np.asarray(f.data if isinstance(f, Tensor) else f, dtype=np.float64)
    if arr.ndim not in (1, 2):
        raise ContractError(f"scores must be (k,) or (n, k), got shape {arr.shape}")
    if arr.shape[-1] < 2:
        raise ContractError(f"need at least 2 classes, got k={arr.shape[-1]}")
    if not np.isfinite(arr).all():
        raise ContractError("scores must be finite")
    return arr


def _labels(y, arr: np.ndarray) -> np.ndarray:
    lab = np.asarray(y, dtype=np.int64)
    k = arr.shape[-1]
    if arr.ndim == 1 and lab.ndim != 0:
        raise ContractError("a single score vector takes a scalar label")
    if arr.ndim == 2 and lab.shape != (arr.shape[0],):
        raise ContractError(f"expected {arr.shape[0]} labels, got shape {lab.shape}")
    if ((lab < 0) | (lab >= k)).any():
        raise ContractError(f"label out of range for k={k}: {y}")
    return lab


def _onehot(lab: np.ndarray, k: int) -> np.ndarray:
    return (np.arange(k) == lab[..., None]).astype(np.float64)


def _other_mask(lab: np.ndarray, k: int) -> np.ndarray:
    """0 for every class except the labelled one, which gets -inf."""
    return np.where(np.arange(k) == lab[..., None], -np.inf, 0.0)


# --- ramp and margin -----------------------------------------------------


def margin_indicator(x, rho: float):
    """Ramp loss: 1 below 0, 0 above ``rho``, linear in between."""
    rho = _check_rho(rho)
    # (rho - x) / rho rounds exactly like the hinge form (2 rho - 2x) / (2 rho)
    out = np.clip((rho - np.asarray(x, dtype=np.float64)) / rho, 0.0, 1.0)
    return float(out) if out.ndim == 0 else out


def score_margin(f, y):
    """Half the gap between the labelled score and the best competing score."""
    arr = _scores(f)
    lab = _labels(y, arr)
    own = np.take_along_axis(arr, lab[..., None], axis=-1)[..., 0]
    rival = np.max(arr + _other_mask(lab, arr.shape[-1]), axis=-1)
    out = 0.5 * (own - rival)
    return float(out) if out.ndim == 0 else out


def predict(scores):
    """Arg-max class; ties go to the lowest index."""
    arr = _scores(scores)
    out = np.argmax(arr, axis=-1)
    return int(out) if out.ndim == 0 else out


def margin_loss_empirical(scores, labels, rho: float) -> float:
    arr = np.atleast_2d(_scores(scores))
    if arr.shape[0] == 0:
        raise ContractError("margin loss of an empty dataset")
    lab = _labels(np.atleast_1d(labels), arr)
    return float(np.mean(margin_indicator(score_margin(arr, lab), rho)))


def disparity_empirical(scores_fprime, scores_f, rho: float) -> float:
    """Mean ramp loss of ``f'`` measured against the predictions of ``f``."""
    a = np.atleast_2d(_scores(scores_fprime))
    b = np.atleast_2d(_scores(scores_f))
    if a.shape != b.shape:
        raise ContractError(f"disparity needs matching score lists, got {a.shape} and {b.shape}")
    if a.shape[0] == 0:
        raise ContractError("disparity of an empty dataset")
    return margin_loss_empirical(a, predict(b), rho)


def mdd_empirical(disp_target: float, disp_source: float) -> float:
    return float(disp_target) - float(disp_source)


def generalized_hinge(f, y, theta: float):
    """``max_y' (f_y' - f_y + theta * [y' != y])``; never negative."""
    if theta < 0:
        raise ContractError(f"theta must be >= 0, got {theta}")
    arr = _scores(f)
    lab = _labels(y, arr)
    own = np.take_along_axis(arr, lab[..., None], axis=-1)
    out = np.max(arr - own + theta * (1.0 - _onehot(lab, arr.shape[-1])), axis=-1)
    return float(out) if out.ndim == 0 else out


# --- softmax family ------------------------------------------------------


def softmax(z):
    arr = _scores(z)
    e = np.exp(arr - arr.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def sm_softmax(z, y, rho: float):
    """Soft-margin softmax entry for the labelled class (true logit lowered by ``rho``)."""
    rho = _check_rho(rho, allow_zero=True)
    arr = _scores(z)
    lab = _labels(y, arr)
    shifted = arr - rho * _onehot(lab, arr.shape[-1])
    p = softmax(shifted)
    out = np.take_along_axis(p, lab[..., None], axis=-1)[..., 0]
    return float(out) if out.ndim == 0 else out


def _lift(f):
    """Wrap raw scores in a constant tensor; report whether the caller wants floats."""
    if isinstance(f, Tensor):
        _scores(f)
        return f, False
    return Tensor(_scores(f)), True


def _finish(t: Tensor, plain: bool):
    if not plain:
        return t
    return float(t.data) if t.data.ndim == 0 else t.data


def sm_cross_entropy(f, y, rho: float):
    """``log sum_y' exp(f_y' - f_y + rho [y' != y])``; ``rho = 0`` is plain cross-entropy."""
    rho = _check_rho(rho, allow_zero=True)
    t, plain = _lift(f)
    lab = _labels(y, t.data)
    k = t.shape[-1]
    lifted = nx.add(t, rho * (1.0 - _onehot(lab, k))) if rho else t
    out = nx.sub(nx.logsumexp(lifted, axis=-1), nx.pick(t, lab))
    return _finish(out, plain)


def lse_loss(f, y):
    """Softmax cross-entropy ``-log softmax(f)_y`` in log-sum-exp form."""
    return sm_cross_entropy(f, y, 0.0)


def sm_adversarial(f, y, rho: float):
    """``log(1 - sm_softmax(f, y, rho))`` with ``1 - p`` floored at 1e-12."""
    rho = _check_rho(rho, allow_zero=True)
    t, plain = _lift(f)
    lab = _labels(y, t.data)
    k = t.shape[-1]
    rest = nx.logsumexp(nx.add(t, _other_mask(lab, k)), axis=-1)
    lifted = nx.add(t, rho * (1.0 - _onehot(lab, k))) if rho else t
    raw = nx.sub(rest, nx.logsumexp(lifted, axis=-1))
    if rho:
        raw = nx.add(raw, rho)
    return _finish(nx.clamp_min(raw, LOG_ADV_EPS), plain)


def adversarial_loss(f, y):
    """``log(1 - softmax(f)_y)`` with the clamp of :func:`sm_adversarial`."""
    return sm_adversarial(f, y, 0.0)
