"""Training loops, evaluation and the cross-configuration accuracy sweep."""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import losses, mdd
from . import numerics as nx
from .losses import DEFAULT_RHO
from .mdd import Batch, ObjectiveConfig
from .model import ArchConfig, MDDNet
from .numerics import ContractError
from .optim import SGDState, grl_schedule, lr_at, sgd_step  # noqa: F401  (re-exported)
from .synthdata import DomainDataset, RadarConfigSpec, balanced_labels, make_domain_pair

log = logging.getLogger(__name__)

METRIC_COLUMNS = (
    "step",
    "lr",
    "eta",
    "cls_loss",
    "transfer_loss",
    "source_acc",
    "target_acc",
    "source_margin_err",
    "target_margin_err",
    "disp_source",
    "disp_target",
)


@dataclass
class TrainingConfig:
    variant: str = "soft_margin"
    rho: float = DEFAULT_RHO
    gamma: float = 1.0
    lr0: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 32
    total_steps: int = 3000
    lr_alpha: float = 10.0
    lr_beta: float = 0.75
    grl_delta: float = 10.0
    grl_max: float = 1.0
    eval_every: int = 500
    seed: int = 0
    bottleneck: int = 128
    diag_steps: int = 300

    def __post_init__(self):
        if not self.lr0 > 0:
            raise ContractError(f"lr0 must be > 0, got {self.lr0}")
        if not 0 <= self.momentum < 1:
            raise ContractError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.batch_size < 2:
            raise ContractError(f"batch_size must be >= 2, got {self.batch_size}")
        if self.total_steps < 1:
            raise ContractError(f"total_steps must be >= 1, got {self.total_steps}")
        if self.grl_max < 0:
            raise ContractError(f"grl_max must be >= 0, got {self.grl_max}")
        if self.eval_every < 1:
            raise ContractError(f"eval_every must be >= 1, got {self.eval_every}")
        self.objective(0.0)  # validates variant / gamma / rho

    def objective(self, eta: float) -> ObjectiveConfig:
        return ObjectiveConfig(variant=self.variant, gamma=self.gamma, rho=self.rho, grl_eta=eta)

    @property
    def margin(self) -> float:
        """Ramp-loss margin used for reporting; the original variant has no own margin."""
        return self.rho if self.rho > 0 else DEFAULT_RHO

    @classmethod
    def field_names(cls) -> set[str]:
        return {f.name for f in fields(cls)}

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainResult:
    net: MDDNet
    metrics: list[dict] = field(default_factory=list)
    mode: str = "mdd"

    def write_metrics_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(METRIC_COLUMNS)
            for row in self.metrics:
                writer.writerow(["" if row.get(c) is None else _fmt(row[c]) for c in METRIC_COLUMNS])


def _fmt(v) -> str:
    return str(v) if isinstance(v, (int, np.integer)) else repr(float(v))


class BatchStream:
    """Epoch-shuffled mini-batches; wraps around with a fresh permutation."""

    def __init__(self, ds: DomainDataset, batch_size: int, rng: np.random.Generator):
        self.ds = ds
        self.batch_size = batch_size
        self.rng = rng
        self.order = rng.permutation(len(ds))
        self.cursor = 0

    def next(self) -> Batch:
        idx = []
        while len(idx) < self.batch_size:
            if self.cursor == len(self.order):
                self.order = self.rng.permutation(len(self.ds))
                self.cursor = 0
            take = min(self.batch_size - len(idx), len(self.order) - self.cursor)
            idx.extend(self.order[self.cursor : self.cursor + take])
            self.cursor += take
        idx = np.asarray(idx)
        labels = self.ds.labels[idx] if self.ds.labeled else None
        return Batch(self.ds.x_r[idx].astype(np.float64), self.ds.x_d[idx].astype(np.float64), labels)


# --- evaluation ----------------------------------------------------------


def predict_scores(net: MDDNet, ds, head: str = "head", chunk: int = 256) -> np.ndarray:
    out = []
    module = getattr(net, head)
    with nx.no_grad():
        for lo in range(0, len(ds.x_r), chunk):
            feats = net.features(np.asarray(ds.x_r[lo : lo + chunk], np.float64), np.asarray(ds.x_d[lo : lo + chunk], np.float64))
            out.append(module(feats).data)
    return np.concatenate(out) if out else np.zeros((0, net.arch.n_classes))


def evaluate(net: MDDNet, ds: DomainDataset, rho: float = DEFAULT_RHO) -> dict:
    """Accuracy, 0-1 error, ramp margin loss and mean cross-entropy on a labelled set."""
    if not ds.labeled:
        raise ContractError("evaluate() needs a labelled dataset")
    scores = predict_scores(net, ds)
    return evaluate_scores(scores, ds.labels, rho)


def evaluate_scores(scores: np.ndarray, labels, rho: float = DEFAULT_RHO) -> dict:
    labels = np.asarray(labels)
    pred = losses.predict(scores)
    error = float(np.mean(pred != labels))
    return {
        "accuracy": 1.0 - error,
        "error": error,
        "margin_loss": losses.margin_loss_empirical(scores, labels, rho),
        "lse_loss": float(np.mean(losses.lse_loss(scores, labels))),
        "sm_loss": float(np.mean(losses.sm_cross_entropy(scores, labels, rho))),
    }


def _disparity(net: MDDNet, ds, rho: float) -> float:
    return losses.disparity_empirical(predict_scores(net, ds, "adv_head"), predict_scores(net, ds), rho)


# --- training ------------------------------------------------------------


def _check_pair(src: DomainDataset, tgt: DomainDataset) -> None:
    if src.shape != tgt.shape or src.k != tgt.k:
        raise ContractError(
            f"source and target disagree: shape {src.shape} vs {tgt.shape}, k {src.k} vs {tgt.k}"
        )


def _make_net(ds: DomainDataset, cfg: TrainingConfig) -> MDDNet:
    arch = ArchConfig(input_shape=ds.shape, bottleneck=cfg.bottleneck, n_classes=ds.k)
    return MDDNet(arch, seed=cfg.seed)


def _eval_row(net, cfg, step, lr, eta, cls_acc, tr_acc, eval_sets, adaptive: bool) -> dict:
    row = {
        "step": step,
        "lr": lr,
        "eta": eta,
        "cls_loss": cls_acc,
        "transfer_loss": tr_acc if adaptive else None,
    }
    if eval_sets is not None:
        s_test, t_test = eval_sets
        s_eval = evaluate(net, s_test, cfg.margin)
        t_eval = evaluate(net, t_test, cfg.margin)
        row.update(
            source_acc=s_eval["accuracy"],
            target_acc=t_eval["accuracy"],
            source_margin_err=s_eval["margin_loss"],
            target_margin_err=t_eval["margin_loss"],
        )
        if adaptive:
            row.update(disp_source=_disparity(net, s_test, cfg.margin), disp_target=_disparity(net, t_test, cfg.margin))
    return row


def _run(src: DomainDataset, tgt: DomainDataset | None, cfg: TrainingConfig, eval_sets) -> TrainResult:
    if not src.labeled:
        raise ContractError("source training set must be labelled")
    adaptive = tgt is not None
    if adaptive:
        _check_pair(src, tgt)
    net = _make_net(src, cfg)
    rng = np.random.default_rng(cfg.seed)
    s_stream = BatchStream(src, cfg.batch_size, np.random.default_rng(rng.integers(2**63)))
    t_stream = BatchStream(tgt, cfg.batch_size, np.random.default_rng(rng.integers(2**63))) if adaptive else None
    params = net.parameters() if adaptive else net.psi.parameters() + net.head.parameters()
    state = SGDState()
    result = TrainResult(net=net, mode="mdd" if adaptive else "source-only")
    cls_sum = tr_sum = 0.0
    count = 0
    for step in range(cfg.total_steps):
        eta = cfg.grl_max * grl_schedule(step, cfg.total_steps, cfg.grl_delta) if adaptive else 0.0
        obj = cfg.objective(eta)
        sb = s_stream.next()
        for p in params:
            p.grad = None
        if adaptive:
            cls, transfer = mdd.batch_objective(sb, t_stream.next(), net, obj)
            loss = mdd.total_loss(cls, transfer)
            tr_sum += transfer.item()
        else:
            feats = net.features(sb.x_r, sb.x_d)
            cls = mdd.classification_term(net.head(feats), sb.labels, obj)
            loss = cls
        cls_sum += cls.item()
        count += 1
        nx.backward(loss)
        lr = sgd_step(params, [p.grad for p in params], state, step, cfg)
        done = step + 1
        if done % cfg.eval_every == 0 or done == cfg.total_steps:
            row = _eval_row(net, cfg, done, lr, eta, cls_sum / count, tr_sum / count, eval_sets, adaptive)
            result.metrics.append(row)
            log.info("step %d %s", done, {k: v for k, v in row.items() if v is not None})
            cls_sum = tr_sum = 0.0
            count = 0
    return result


def train_source_only(s_train: DomainDataset, cfg: TrainingConfig, eval_sets=None) -> TrainResult:
    """Classification loss only; the adversarial head is left untouched."""
    return _run(s_train, None, cfg, eval_sets)


def train_mdd(s_train: DomainDataset, t_train: DomainDataset, cfg: TrainingConfig, eval_sets=None) -> TrainResult:
    """One source and one target batch per step, one shared SGD step over all parameters."""
    return _run(s_train, t_train, cfg, eval_sets)


# --- reporting -----------------------------------------------------------


def bound_report(net: MDDNet, s_test: DomainDataset, t_test: DomainDataset, cfg: TrainingConfig) -> dict:
    """Components of the target-error bound, measured on held-out sets."""
    rho = cfg.margin
    s_eval = evaluate(net, s_test, rho)
    t_eval = evaluate(net, t_test, rho)
    mdd_est = mdd.estimate_mdd(s_test, t_test, net, cfg.diag_steps, rho, seed=cfg.seed)
    lam = mdd.ideal_combined_margin_loss(s_test, t_test, net, cfg.diag_steps, rho, seed=cfg.seed)
    gap = mdd.bound_gap(t_eval["error"], s_eval["margin_loss"], mdd_est, lam)
    if gap < 0:
        log.warning("bound gap is negative (%.4f): estimator slack, not a violated bound", gap)
    else:
        log.info("bound gap %.4f", gap)
    return {
        "rho": rho,
        "source_margin_loss": s_eval["margin_loss"],
        "mdd_estimate": mdd_est,
        "lambda_upper": lam,
        "target_error": t_eval["error"],
        "bound_gap": gap,
        "bound_gap_sign": "nonnegative" if gap >= 0 else "negative",
    }


def summarize(result: TrainResult, s_test: DomainDataset, t_test: DomainDataset, cfg: TrainingConfig, with_bound: bool = True) -> dict:
    s_eval = evaluate(result.net, s_test, cfg.margin)
    t_eval = evaluate(result.net, t_test, cfg.margin)
    out = {
        "mode": result.mode,
        "source_accuracy": s_eval["accuracy"],
        "target_accuracy": t_eval["accuracy"],
        "source_margin_loss": s_eval["margin_loss"],
        "target_error": t_eval["error"],
        "config": cfg.to_dict(),
    }
    if with_bound and result.mode == "mdd":
        out["bound"] = bound_report(result.net, s_test, t_test, cfg)
    return out


def write_summary(summary: dict, path) -> None:
    Path(path).write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")


# --- sweep ---------------------------------------------------------------


@dataclass
class DataSpec:
    n_train: int = 200
    n_test: int = 80
    k: int = 5
    seed: int = 0
    shape: tuple[int, int] = (16, 32)


def _pair_job(args) -> dict:
    cfg_s, cfg_t, data, cfg, pair_index = args
    s_train, t_train, s_test, t_test = make_domain_pair(cfg_s, cfg_t, data.n_train, data.n_test, data.k, data.seed, data.shape)
    run_cfg = TrainingConfig(**{**cfg.to_dict(), "seed": cfg.seed ^ pair_index})
    base = train_source_only(s_train, run_cfg)
    adapted = train_mdd(s_train, t_train, run_cfg)
    return {
        "source": cfg_s.name,
        "target": cfg_t.name,
        "baseline": evaluate(base.net, t_test, run_cfg.margin)["accuracy"],
        "mdd": evaluate(adapted.net, t_test, run_cfg.margin)["accuracy"],
    }


def accuracy_matrix(configs: Sequence[RadarConfigSpec], cfg: TrainingConfig, data: DataSpec | None = None, jobs: int = 1) -> dict:
    """Train every ordered (source, target) pair; rows are sources, columns targets.

    Returns ``{"names", "mdd", "baseline", "cells"}`` where the two matrices
    hold target-test accuracies with ``None`` on the diagonal.
    """
    if len(configs) < 2:
        raise ContractError("accuracy matrix needs at least two configurations")
    data = data or DataSpec()
    names = [c.name for c in configs]
    tasks = []
    for i, cs in enumerate(configs):
        for j, ct in enumerate(configs):
            if i != j:
                tasks.append((cs, ct, data, cfg, len(tasks)))
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=jobs) as pool:
            cells = list(pool.map(_pair_job, tasks))
    else:
        cells = [_pair_job(t) for t in tasks]
    n = len(names)
    mdd_m = [[None] * n for _ in range(n)]
    base_m = [[None] * n for _ in range(n)]
    for cell in cells:
        i, j = names.index(cell["source"]), names.index(cell["target"])
        mdd_m[i][j] = cell["mdd"]
        base_m[i][j] = cell["baseline"]
    return {"names": names, "mdd": mdd_m, "baseline": base_m, "cells": cells}


def write_matrix_csv(matrix: dict, path, key: str = "mdd") -> None:
    """Rows = source configuration, columns = target; blank diagonal; percent values."""
    names = matrix["names"]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["source\\target", *names])
        for i, name in enumerate(names):
            writer.writerow([name, *("" if v is None else f"{100 * v:.1f}" for v in matrix[key][i])])


def write_pairs_csv(matrix: dict, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["source", "target", "baseline_acc", "mdd_acc", "delta"])
        for c in matrix["cells"]:
            writer.writerow([c["source"], c["target"], f"{100 * c['baseline']:.1f}", f"{100 * c['mdd']:.1f}", f"{100 * (c['mdd'] - c['baseline']):.1f}"])


def recover_target_labels(t_train: DomainDataset, role: str = "T_train") -> DomainDataset:
    """Restore generator labels of a stripped set (diagnostics only)."""
    return t_train.with_labels(balanced_labels(len(t_train), t_train.k, t_train.seed, role))

