"""Release gate: finite-difference checks of every backward rule, the full
model objective with its consolidation term, and divergence properties."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .detect import js_divergence, kl_divergence
from .ewc import FisherDiagonal, ewc_penalty
from .model import ModelConfig, ModelParams, init_params, loss, loss_and_grad

GRAD_TOL = 1e-4


@dataclass
class CheckResult:
    name: str
    ok: bool
    detail: str

    def line(self) -> str:
        return f"[{'PASS' if self.ok else 'FAIL'}] {self.name}: {self.detail}"


def _weighted(rng, op: Callable) -> Callable:
    """Scalar probe sum(w * op(...)) with fixed random weights, so every output entry matters."""
    box = {}

    def f(*xs):
        out = op(*xs)
        if "w" not in box:
            box["w"] = rng.normal(size=np.shape(ad._val(out)))
        return _dot(out, box["w"])

    return f


def _dot(out, w):
    # sum(out * w) as tape ops: flatten then one matmul
    flat = ad.reshape(out, (1, -1))
    return ad.reshape(ad.matmul(flat, w.reshape(-1, 1)), ())


def primitive_cases(seed: int = 0) -> dict[str, tuple[Callable, list[np.ndarray]]]:
    rng = np.random.default_rng(seed)

    def away_from_zero(shape):
        # keep relu inputs clear of the kink
        x = rng.normal(size=shape)
        return np.where(np.abs(x) < 0.05, 0.5, x)

    return {
        "matmul": (_weighted(rng, ad.matmul), [rng.normal(size=(3, 4)), rng.normal(size=(4, 2))]),
        "conv1d_time": (
            _weighted(rng, ad.conv1d_time),
            [rng.normal(size=(2, 6, 3)), rng.normal(size=(3, 3, 2)), rng.normal(size=2)],
        ),
        "relu": (_weighted(rng, ad.relu), [away_from_zero((4, 5))]),
        "linear": (_weighted(rng, ad.linear), [rng.normal(size=(3, 4)), rng.normal(size=(4, 2)), rng.normal(size=2)]),
        "l2_loss": (ad.l2_loss, [rng.normal(size=(3, 4)), rng.normal(size=(3, 4))]),
        "add": (_weighted(rng, ad.add), [rng.normal(size=(3, 4)), rng.normal(size=(3, 4))]),
        "reshape": (_weighted(rng, lambda x: ad.reshape(x, (6, 2))), [rng.normal(size=(3, 4))]),
        "transpose": (_weighted(rng, lambda x: ad.transpose(x, (2, 0, 1))), [rng.normal(size=(2, 3, 4))]),
        "concat": (
            _weighted(rng, lambda a, b: ad.concat([a, b], axis=1)),
            [rng.normal(size=(3, 2)), rng.normal(size=(3, 4))],
        ),
    }


def check_primitives(seed: int = 0, tol: float = GRAD_TOL) -> list[CheckResult]:
    out = []
    for name, (f, params) in primitive_cases(seed).items():
        try:
            err = ad.check_gradients(f, params)
            out.append(CheckResult(f"grad {name}", err < tol, f"max rel err {err:.2e}"))
        except Exception as exc:  # reported, not swallowed
            out.append(CheckResult(f"grad {name}", False, f"{type(exc).__name__}: {exc}"))
    return out


def model_instance(seed: int = 0, nodes: int = 5, batch: int = 2, config: ModelConfig | None = None):
    """Random graph, batch, targets, parameters, anchor and Fisher."""
    cfg = config or ModelConfig()
    rng = np.random.default_rng(seed)
    a = rng.uniform(0.2, 1.0, size=(nodes, nodes)) * (rng.random((nodes, nodes)) < 0.6)
    adj = np.triu(a, 1)
    adj = adj + adj.T
    x = rng.normal(size=(batch, nodes, cfg.in_steps, cfg.features))
    y = rng.normal(size=(batch, nodes, cfg.horizon))
    params = init_params(cfg, seed)
    anchor = ModelParams.from_flat(cfg, params.flatten() + rng.normal(scale=0.02, size=params.size))
    fisher = FisherDiagonal(rng.uniform(0.0, 1.0, size=params.size), 1)
    return cfg, adj, x, y, params, anchor, fisher


def full_objective_error(seed: int = 0, lam: float = 1.0, eps: float = 1e-5, nodes: int = 5) -> float:
    """Max relative error of d(loss + EWC)/d(theta) against central differences."""
    cfg, adj, x, y, params, anchor, fisher = model_instance(seed, nodes)

    def objective(theta):
        p = ModelParams.from_flat(cfg, theta)
        return loss(p, adj, x, y) + ewc_penalty(theta, anchor, fisher, lam)[0]

    theta = params.flatten()
    _, g_model = loss_and_grad(params, adj, x, y)
    analytic = g_model + ewc_penalty(theta, anchor, fisher, lam)[1]
    (numeric,) = ad.numeric_grad(objective, [theta], eps)
    return ad.relative_error(analytic, numeric)


def check_model(seed: int = 0, tol: float = GRAD_TOL) -> list[CheckResult]:
    out = []
    for lam in (0.0, 1.0):
        try:
            err = full_objective_error(seed, lam)
            out.append(CheckResult(f"grad model+ewc lam={lam:g}", err < tol, f"max rel err {err:.2e}"))
        except Exception as exc:
            out.append(CheckResult(f"grad model+ewc lam={lam:g}", False, f"{type(exc).__name__}: {exc}"))
    try:
        rng = np.random.default_rng(seed + 1)
        cur, ref = rng.normal(size=6), rng.normal(size=6)
        fish = FisherDiagonal(rng.uniform(0, 3, size=6), 1)
        # closed-form gradient, no tape involved
        (num,) = ad.numeric_grad(lambda c: ewc_penalty(c, ref, fish, 0.7)[0], [cur])
        err = ad.relative_error(ewc_penalty(cur, ref, fish, 0.7)[1], num)
        out.append(CheckResult("grad ewc penalty", err < tol, f"max rel err {err:.2e}"))
    except Exception as exc:
        out.append(CheckResult("grad ewc penalty", False, f"{type(exc).__name__}: {exc}"))
    return out


def random_histograms(rng, count: int, bins: int = 50, floor: float = 1e-6):
    raw = rng.random((count, bins)) ** 3
    p = raw / raw.sum(axis=1, keepdims=True) + floor
    return p / p.sum(axis=1, keepdims=True)


def divergence_suite(seed: int = 0, pairs: int = 1000) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    p = random_histograms(rng, pairs)
    q = random_histograms(rng, pairs)
    jpq = js_divergence(p, q)
    jqp = js_divergence(q, p)
    jpp = js_divergence(p, p)
    out = [
        CheckResult("jsd bounds", bool(np.all((jpq >= 0) & (jpq <= math.log(2)))), f"range [{jpq.min():.3g}, {jpq.max():.3g}]"),
        CheckResult("jsd symmetry", float(np.max(np.abs(jpq - jqp))) <= 1e-12, f"max asym {np.max(np.abs(jpq - jqp)):.1e}"),
        CheckResult("jsd identity", float(np.max(jpp)) <= 1e-12, f"max self-divergence {np.max(jpp):.1e}"),
        CheckResult("jsd distinct>0", bool(np.all(jpq > 1e-12)), f"min over distinct pairs {jpq.min():.2e}"),
    ]
    kl = kl_divergence([0.75, 0.25], [0.5, 0.5])
    out.append(CheckResult("kl example", abs(kl - 0.13081) < 1e-5, f"{kl:.6f}"))
    return out


def run_all(seed: int = 0) -> list[CheckResult]:
    return check_primitives(seed) + check_model(seed) + divergence_suite(seed)
