"""Property suites behind ``mddradar verify`` and the acceptance tests.

Each suite draws seeded random inputs, checks a family of properties and
stops at the first violation, keeping the offending input as a
counterexample.  The ramp function is injectable so a deliberately broken
version can be fed through the lemma suite to show that it gets caught.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import losses, mdd
from . import numerics as nx
from .model import ArchConfig, MDDNet
from .numerics import ContractError, Tensor

SUITES = ("lemma", "gradients", "identities")

GRAD_TOL = 1e-4
IDENTITY_TOL = 1e-9
SOFTMAX_TOL = 1e-12

# small enough for finite differences over every parameter of a layer
TOY_ARCH = ArchConfig(input_shape=(6, 8), stages=((2, 3, 1), (3, 3, 2)), bottleneck=6, n_classes=3)


@dataclass
class SuiteResult:
    name: str
    trials: int
    checks: int = 0
    counterexample: dict | None = None
    seconds: float = 0.0
    notes: list[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.counterexample is None

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name}: {self.checks} checks over {self.trials} trials in {self.seconds:.2f}s"


def random_case(rng: np.random.Generator) -> tuple[int, np.ndarray, int, float]:
    """One ``(k, f, y, rho)`` draw: k in 2..8, scores in [-5, 5], rho in (0, 3]."""
    k = int(rng.integers(2, 9))
    f = rng.uniform(-5.0, 5.0, size=k)
    y = int(rng.integers(k))
    rho = 3.0 * (1.0 - rng.random())  # (0, 3]
    return k, f, y, rho


def _case(k, f, y, rho, **extra) -> dict:
    out = {"k": k, "f": [float(v) for v in f], "y": y, "rho": rho}
    out.update(extra)
    return out


# --- lemma ---------------------------------------------------------------


def lemma_suite(trials: int = 1000, seed: int = 0, phi: Callable = losses.margin_indicator) -> SuiteResult:
    """Ramp loss under the halved soft-margin cross-entropy, and the chain behind it.

    Per draw: the bound itself, the hinge identity, hinge over ramp and
    log-sum-exp over hinge.  Every tenth draw also checks the bound on the
    mean over a random batch.
    """
    _check_trials(trials)
    res = SuiteResult("lemma", trials)
    rng = np.random.default_rng(seed)
    start = time.perf_counter()
    for trial in range(trials):
        k, f, y, rho = random_case(rng)
        margin = losses.score_margin(f, y)
        ramp = float(phi(margin, rho))
        ce = losses.sm_cross_entropy(f, y, 2 * rho)
        hinge = losses.generalized_hinge(f, y, 2 * rho)
        hinge_closed = 2 * rho * max(0.0, 1.0 - margin / rho)
        checks = (
            ("bound", ramp <= ce / (2 * rho), {"ramp": ramp, "half_ce": ce / (2 * rho)}),
            ("hinge_identity", abs(hinge - hinge_closed) <= IDENTITY_TOL * max(1.0, abs(hinge)),
             {"hinge": hinge, "closed_form": hinge_closed}),
            ("hinge_dominates_ramp", ramp <= hinge / (2 * rho), {"ramp": ramp, "half_hinge": hinge / (2 * rho)}),
            ("lse_dominates_hinge", ce >= hinge, {"ce": ce, "hinge": hinge}),
        )
        for name, ok, values in checks:
            res.checks += 1
            if not ok:
                res.counterexample = _case(k, f, y, rho, property=name, **values)
                break
        if res.counterexample is None and trial % 10 == 0:
            res.checks += 1
            n = int(rng.integers(1, 33))
            scores = rng.uniform(-5.0, 5.0, size=(n, k))
            labels = rng.integers(k, size=n)
            emp = float(np.mean(phi(losses.score_margin(scores, labels), rho)))
            bound = float(np.mean(losses.sm_cross_entropy(scores, labels, 2 * rho))) / (2 * rho)
            if not emp <= bound:
                res.counterexample = {
                    "property": "dataset_bound", "k": k, "rho": rho,
                    "scores": scores.tolist(), "labels": labels.tolist(),
                    "margin_loss": emp, "half_mean_ce": bound,
                }
        if res.counterexample is not None:
            break
    res.seconds = time.perf_counter() - start
    return res


def flipped_ramp(x, rho: float):
    """A broken ramp with its branches swapped: 0 below 0, 1 above ``rho``.

    Only exists to prove the lemma suite notices a wrong loss.
    """
    return np.clip(np.asarray(x, dtype=np.float64) / rho, 0.0, 1.0)


# --- identities ----------------------------------------------------------


def _toy_batches(rng: np.random.Generator, arch: ArchConfig, n: int = 4):
    h, w = arch.input_shape
    src = mdd.Batch(rng.random((n, h, w)), rng.random((n, h, w)), rng.integers(arch.n_classes, size=n))
    tgt = mdd.Batch(rng.random((n, h, w)), rng.random((n, h, w)))
    return src, tgt


def identities_suite(trials: int = 200, seed: int = 0) -> SuiteResult:
    """Zero-margin reductions and agreement of the closed forms with their definitions."""
    _check_trials(trials)
    res = SuiteResult("identities", trials)
    rng = np.random.default_rng(seed)
    start = time.perf_counter()

    def fail(name, k, f, y, rho, **values):
        res.counterexample = _case(k, f, y, rho, property=name, **values)

    for _ in range(trials):
        k, f, y, rho = random_case(rng)
        p = losses.softmax(f)
        sm0 = losses.sm_softmax(f, y, 0.0)
        sm = losses.sm_softmax(f, y, rho)
        ce_def = -math.log(p[y])
        sm_ce_def = -math.log(sm)
        ce = losses.lse_loss(f, y)
        sm_ce = losses.sm_cross_entropy(f, y, rho)
        res.checks += 4
        if abs(sm0 - p[y]) > SOFTMAX_TOL:
            fail("sm_softmax_rho0", k, f, y, rho, sm_softmax=sm0, softmax=float(p[y]))
        elif abs(ce - ce_def) > IDENTITY_TOL * max(1.0, ce_def):
            fail("lse_closed_form", k, f, y, rho, lse=ce, neg_log_softmax=ce_def)
        elif abs(sm_ce - sm_ce_def) > IDENTITY_TOL * max(1.0, sm_ce_def):
            fail("sm_ce_closed_form", k, f, y, rho, sm_ce=sm_ce, neg_log_sm_softmax=sm_ce_def)
        elif 1.0 - sm > 1e-6:
            adv = losses.sm_adversarial(f, y, rho)
            adv_def = math.log(1.0 - sm)
            if abs(adv - adv_def) > IDENTITY_TOL * max(1.0, abs(adv_def)):
                fail("sm_adversarial_closed_form", k, f, y, rho, sm_adversarial=adv, log_one_minus=adv_def)
        if res.counterexample is not None:
            break

    if res.counterexample is None:
        # whole objective: soft margin at rho = 0 against the original at gamma = 1
        for trial in range(max(1, min(trials // 50, 5))):
            net = MDDNet(TOY_ARCH, seed=seed + trial)
            src, tgt = _toy_batches(rng, TOY_ARCH)
            soft = mdd.batch_objective(src, tgt, net, mdd.ObjectiveConfig("soft_margin", 1.0, 0.0, 1.0))
            orig = mdd.batch_objective(src, tgt, net, mdd.ObjectiveConfig("original", 1.0, 0.0, 1.0))
            res.checks += 1
            diff = max(abs(soft[0].item() - orig[0].item()), abs(soft[1].item() - orig[1].item()))
            if diff > IDENTITY_TOL:
                res.counterexample = {
                    "property": "objective_rho0_equals_gamma1", "net_seed": seed + trial,
                    "soft_margin": [soft[0].item(), soft[1].item()],
                    "original": [orig[0].item(), orig[1].item()],
                }
                break
    res.seconds = time.perf_counter() - start
    return res


# --- gradients -----------------------------------------------------------


def _away_from_kinks(x: np.ndarray, margin: float = 1e-3) -> np.ndarray:
    """Nudge entries off zero so relu/clamp kinks stay outside the difference stencil."""
    return np.where(np.abs(x) < margin, np.sign(x + 1e-30) * margin * 2, x)


def _primitive_cases(rng: np.random.Generator):
    """``(name, fn, point)`` triples covering every differentiable primitive."""
    a = rng.normal(size=(3, 4))
    b = rng.normal(size=(3, 4))
    row = rng.normal(size=4)
    m = rng.normal(size=(4, 2))
    img = rng.normal(size=(2, 1, 5, 6))
    ker = rng.normal(size=(2, 1, 3, 3))
    idx = rng.integers(4, size=3)
    w = rng.normal(size=(3, 4))

    def weighted(t):
        return nx.sum(nx.mul(t, Tensor(np.resize(w, t.shape))))

    return [
        ("add", lambda x: weighted(nx.add(x, Tensor(row))), a),
        ("sub", lambda x: weighted(nx.sub(Tensor(b), x)), a),
        ("mul", lambda x: weighted(nx.mul(x, Tensor(b))), a),
        ("mul_broadcast", lambda x: weighted(nx.mul(Tensor(a), x)), row),
        ("scale", lambda x: weighted(nx.scale(x, -1.7)), a),
        ("relu", lambda x: weighted(nx.relu(x)), _away_from_kinks(a)),
        ("exp", lambda x: weighted(nx.exp(x)), a),
        ("log", lambda x: weighted(nx.log(x)), np.abs(a) + 0.5),
        ("clamp_min", lambda x: weighted(nx.clamp_min(x, 0.0)), _away_from_kinks(a)),
        ("sum_axis", lambda x: nx.sum(nx.mul(nx.sum(x, axis=0), Tensor(row))), a),
        ("mean", lambda x: nx.mean(nx.mul(x, x)), a),
        ("max", lambda x: nx.sum(nx.mul(nx.max(x, axis=-1), Tensor(w[:, 0]))), a),
        ("logsumexp", lambda x: nx.sum(nx.mul(nx.logsumexp(x, axis=-1), Tensor(w[:, 0]))), a + 50.0),
        ("reshape", lambda x: weighted(nx.reshape(nx.reshape(x, (12,)), (3, 4))), a),
        ("concat", lambda x: nx.sum(nx.mul(nx.concat([x, Tensor(b)], axis=0), Tensor(np.resize(w, (6, 4))))), a),
        ("take_rows", lambda x: nx.sum(nx.mul(nx.take_rows(x, 1, 3), Tensor(w[1:3]))), a),
        ("pick", lambda x: nx.sum(nx.mul(nx.pick(x, idx), Tensor(w[:, 0]))), a),
        ("matmul_left", lambda x: nx.sum(nx.mul(nx.matmul(x, Tensor(m)), Tensor(w[:, :2]))), a),
        ("matmul_right", lambda x: nx.sum(nx.mul(nx.matmul(Tensor(a), x), Tensor(w[:, :2]))), m),
        ("conv2d_input", lambda x: nx.sum(nx.mul(nx.conv2d(x, Tensor(ker), 1), nx.conv2d(Tensor(img), Tensor(ker), 1))), img),
        ("conv2d_kernel", lambda x: nx.sum(nx.mul(nx.conv2d(Tensor(img), x, 2), nx.conv2d(Tensor(img), Tensor(ker), 2))), ker),
    ]


def _loss_cases(rng: np.random.Generator):
    k = int(rng.integers(2, 7))
    f = rng.uniform(-3.0, 3.0, size=(5, k))
    y = rng.integers(k, size=5)
    rho = float(rng.uniform(0.1, 3.0))
    return [
        ("lse_loss", lambda x: nx.mean(losses.lse_loss(x, y)), f),
        ("adversarial_loss", lambda x: nx.mean(losses.adversarial_loss(x, y)), f),
        ("sm_cross_entropy", lambda x: nx.mean(losses.sm_cross_entropy(x, y, rho)), f),
        ("sm_adversarial", lambda x: nx.mean(losses.sm_adversarial(x, y, rho)), f),
    ]


def _swap(owner, attr: str, objective: Callable[[], Tensor]) -> Callable[[Tensor], Tensor]:
    """Turn a parameter attribute into the argument of a scalar function."""
    original = getattr(owner, attr)

    def fn(x: Tensor) -> Tensor:
        setattr(owner, attr, x)
        try:
            return objective()
        finally:
            setattr(owner, attr, original)

    return fn


def _numeric_grad(fn: Callable[[Tensor], Tensor], point: np.ndarray, step: float = 1e-5) -> np.ndarray:
    base = point.copy()
    out = np.zeros_like(base)
    flat, o = base.reshape(-1), out.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + step
        hi = fn(Tensor(base)).item()
        flat[i] = keep - step
        lo = fn(Tensor(base)).item()
        flat[i] = keep
        o[i] = (hi - lo) / (2 * step)
    return out


def _rel_err(a: np.ndarray, b: np.ndarray) -> float:
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)
    return float(np.max(np.abs(a - b) / denom))


def _objective_cases(rng: np.random.Generator, variant: str, seed: int):
    """Classification and transfer terms against a ψ weight, a head weight and an adversary weight.

    The gradient reversal layer makes ψ descend the transfer term's negation,
    so for ψ parameters the expected analytic gradient is ``-eta`` times the
    finite difference.
    """
    net = MDDNet(TOY_ARCH, seed=seed)
    src, tgt = _toy_batches(rng, TOY_ARCH)
    gamma = 1.0 if variant == "soft_margin" else 2.0
    eta = 1.0
    cfg = mdd.ObjectiveConfig(variant, gamma, losses.DEFAULT_RHO, eta)
    owners = (
        ("psi.range.0.weight", net.psi.branch_r.convs[0], "weight", -eta),
        ("psi.bottleneck.weight", net.psi.bottleneck, "weight", -eta),
        ("adv_head.out.weight", net.adv_head.out, "weight", 1.0),
    )
    cases = []
    for term in (0, 1):
        for pname, owner, attr, psi_sign in owners:
            sign = psi_sign if term == 1 else 1.0
            if term == 0 and pname.startswith("adv_head"):
                continue
            objective = lambda term=term: mdd.batch_objective(src, tgt, net, cfg)[term]
            cases.append((f"{variant}.{'cls' if term == 0 else 'transfer'}.{pname}", _swap(owner, attr, objective), owner, attr, sign))
    return cases


def gradients_suite(trials: int = 3, seed: int = 0) -> SuiteResult:
    """Reverse mode against central differences for primitives, losses and whole objectives."""
    _check_trials(trials)
    res = SuiteResult("gradients", trials)
    rng = np.random.default_rng(seed)
    start = time.perf_counter()
    worst = 0.0
    for trial in range(trials):
        for name, fn, point in _primitive_cases(rng) + _loss_cases(rng):
            err = nx.grad_check(fn, point)
            res.checks += 1
            worst = max(worst, err)
            if err > GRAD_TOL:
                res.counterexample = {"property": name, "trial": trial, "relative_error": err,
                                      "point": np.asarray(point).tolist()}
                break
        if res.counterexample is not None:
            break
        for variant in mdd.VARIANTS:
            for name, fn, owner, attr, sign in _objective_cases(rng, variant, seed + trial):
                point = getattr(owner, attr).data.copy()
                x = Tensor(point.copy(), requires_grad=True)
                nx.backward(fn(x))
                analytic = x.grad if x.grad is not None else np.zeros_like(point)
                err = _rel_err(analytic, sign * _numeric_grad(fn, point))
                if err > GRAD_TOL:
                    # a relu kink inside the stencil moves out when the step shrinks; a wrong gradient does not
                    err = _rel_err(analytic, sign * _numeric_grad(fn, point, step=1e-6))
                res.checks += 1
                worst = max(worst, err)
                if err > GRAD_TOL:
                    res.counterexample = {"property": name, "trial": trial, "relative_error": err}
                    break
            if res.counterexample is not None:
                break
        if res.counterexample is not None:
            break
    res.notes.append(f"worst relative error {worst:.2e}")
    res.seconds = time.perf_counter() - start
    return res


# --- driver --------------------------------------------------------------


def _check_trials(trials: int) -> None:
    if trials < 1:
        raise ContractError(f"trials must be >= 1, got {trials}")


def run_suites(suite: str, trials: int, seed: int, phi: Callable = losses.margin_indicator) -> list[SuiteResult]:
    """Run ``suite`` (one of :data:`SUITES` or ``"all"``).

    ``trials`` is the number of random draws for the lemma and identity
    suites; the gradient suite is far more expensive per draw and runs
    ``ceil(trials / 500)`` rounds.
    """
    _check_trials(trials)
    names = SUITES if suite == "all" else (suite,)
    if any(n not in SUITES for n in names):
        raise ContractError(f"unknown suite {suite!r}; choose from {SUITES + ('all',)}")
    out = []
    for name in names:
        if name == "lemma":
            out.append(lemma_suite(trials, seed, phi))
        elif name == "identities":
            out.append(identities_suite(trials, seed))
        else:
            out.append(gradients_suite(max(1, math.ceil(trials / 500)), seed))
    return out
