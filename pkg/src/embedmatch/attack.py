"""Iterative embedding-matching attack with per-step epsilon-ball projection.

Each iteration descends the matching loss along its raw input gradient, then
clips the accumulated perturbation to [-epsilon, +epsilon] per pixel and the
image back to [0, 1].  The run stops early once the embedding distance to the
target falls below the convergence threshold.  The final iteration evaluates
without updating, so the returned image is exactly the last traced state.
"""

from __future__ import annotations

import concurrent.futures
from dataclasses import dataclass, field

import numpy as np

from .autodiff import ShapeError
from .model import EMBED_KINDS, Embedding, ModelWeights, embed, matching_loss_grad_embed, predict

RELATIVE_CONV_DEFAULT = 0.01  # threshold = 0.01 * ||target embedding|| when unset


class AttackError(RuntimeError):
    """Non-finite loss or gradient; message names the iteration."""


class PairingError(ValueError):
    """Pair selection impossible (fewer than two distinct labels)."""


@dataclass(frozen=True)
class PRMConfig:
    eta: float = 0.05
    epsilon: float = 0.1
    max_iters: int = 5000
    conv_threshold: float | None = None  # absolute ||f(x) - f(target)||; None = relative default
    kind: str = "mil_mean"
    trace_every: int = 25

    def __post_init__(self):
        if self.eta <= 0:
            raise ValueError("eta must be positive")
        if not 0.0 <= self.epsilon <= 1.0:
            raise ValueError("epsilon must lie in [0, 1]")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if self.conv_threshold is not None and self.conv_threshold < 0:
            raise ValueError("conv_threshold must be >= 0")
        if self.kind not in EMBED_KINDS:
            raise ValueError(f"unknown embedding kind {self.kind!r}")
        if self.trace_every < 1:
            raise ValueError("trace_every must be >= 1")


@dataclass
class TracePoint:
    iteration: int
    loss: float
    cosine: float
    mean_abs_delta: float


@dataclass
class AttackRecord:
    source_id: str
    target_id: str
    image: np.ndarray = field(repr=False)  # optimized image, float32 (H, W, C)
    iterations_used: int
    trace: list[TracePoint]
    label_source_true: int
    label_target_true: int
    label_before: int
    label_after: int
    max_abs_delta: float
    converged: bool


def project(x_tilde: np.ndarray, x0: np.ndarray, epsilon: float) -> np.ndarray:
    """Clip the perturbation to the epsilon ball, then the image to [0, 1]."""
    x_tilde = np.asarray(x_tilde, dtype=np.float32)
    x0 = np.asarray(x0, dtype=np.float32)
    if x_tilde.shape != x0.shape:
        raise ShapeError(f"project: dims {x_tilde.shape} vs {x0.shape}")
    eps = np.float32(epsilon)
    delta = np.clip(x_tilde - x0, -eps, eps)
    return np.clip(x0 + delta, np.float32(0.0), np.float32(1.0))


def _cosine64(u: np.ndarray, v: np.ndarray) -> float:
    u = u.astype(np.float64)
    v = v.astype(np.float64)
    return float(u @ v / (np.linalg.norm(u) * np.linalg.norm(v)))


def prm(x0: np.ndarray, target: Embedding, weights: ModelWeights, cfg: PRMConfig,
        *, source_id: str = "", target_id: str = "",
        label_source_true: int = -1, label_target_true: int = -1) -> AttackRecord:
    """Run the matching attack from x0 toward the target embedding."""
    x0 = np.asarray(x0, dtype=np.float32)
    tgt64 = target.values.astype(np.float64)
    tau = cfg.conv_threshold
    if tau is None:
        tau = RELATIVE_CONV_DEFAULT * float(np.linalg.norm(tgt64))
    x = x0.copy()
    trace: list[TracePoint] = []
    max_abs_delta = 0.0
    converged = False
    iterations_used = cfg.max_iters
    best_loss, best_x = np.inf, x
    for t in range(1, cfg.max_iters + 1):
        loss, grad, emb = matching_loss_grad_embed(x, target, weights, cfg.kind)
        if not np.isfinite(loss) or not np.isfinite(grad).all():
            raise AttackError(f"non-finite loss or gradient at iteration {t}")
        if loss < best_loss:
            best_loss, best_x = loss, x
        dist = float(np.linalg.norm(emb.astype(np.float64) - tgt64))
        hit = dist < tau
        if t == 1 or (t - 1) % cfg.trace_every == 0 or t == cfg.max_iters or hit:
            trace.append(TracePoint(t, loss, _cosine64(emb, target.values),
                                    float(np.mean(np.abs(x - x0), dtype=np.float64))))
        if hit:
            converged = True
            iterations_used = t
            break
        if t < cfg.max_iters:
            x = project(x - np.float32(cfg.eta) * grad, x0, cfg.epsilon)
            max_abs_delta = max(max_abs_delta, float(np.max(np.abs(x - x0))))
    # fixed-step descent can end an oscillation above its starting loss; the
    # returned image is the best evaluated iterate, so the final loss never
    # exceeds the initial one (the trace still documents the full trajectory)
    return AttackRecord(
        source_id=source_id,
        target_id=target_id,
        image=best_x,
        iterations_used=iterations_used,
        trace=trace,
        label_source_true=label_source_true,
        label_target_true=label_target_true,
        label_before=predict(x0, weights, cfg.kind),
        label_after=predict(best_x, weights, cfg.kind),
        max_abs_delta=max_abs_delta,
        converged=converged,
    )


def build_pairs(items, seed: int, limit: int | None = None) -> list[tuple[str, str]]:
    """One (source, target) pair per selected source; labels always differ.

    Targets are drawn uniformly among items with a different true label.  With
    a limit, sources are a random subset (dataset order preserved).
    """
    items = list(items)
    if len({it.label for it in items}) < 2:
        raise PairingError("pair selection needs at least two distinct labels")
    rng = np.random.Generator(np.random.PCG64(int(seed)))
    indices = np.arange(len(items))
    if limit is not None and limit < len(items):
        indices = np.sort(rng.choice(len(items), size=limit, replace=False))
    pairs = []
    for i in indices:
        candidates = [j for j in range(len(items)) if items[j].label != items[i].label]
        j = candidates[int(rng.integers(len(candidates)))]
        pairs.append((items[i].id, items[j].id))
    return pairs


def _run_pair(args):
    weights, cfg, source, target = args
    target_emb = embed(target.image, weights, cfg.kind)
    return prm(source.image, target_emb, weights, cfg,
               source_id=source.id, target_id=target.id,
               label_source_true=source.label, label_target_true=target.label)


def run_suite(pairs, weights: ModelWeights, cfg: PRMConfig, items_by_id,
              workers: int = 1):
    """Attack every pair; returns (records, failures).

    Records keep pair order.  A failed pair lands in failures as
    (source_id, target_id, message) and the remaining pairs still run.
    Results are identical for any worker count.
    """
    if not pairs:
        raise ValueError("pair list is empty")
    tasks = [(weights, cfg, items_by_id[s], items_by_id[t]) for s, t in pairs]
    records = []
    failures = []
    if workers <= 1:
        outcomes = []
        for task in tasks:
            try:
                outcomes.append((task, _run_pair(task), None))
            except AttackError as e:
                outcomes.append((task, None, str(e)))
    else:
        outcomes = []
        with concurrent.futures.ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(_run_pair, task) for task in tasks]
            for task, fut in zip(tasks, futures):
                try:
                    outcomes.append((task, fut.result(), None))
                except AttackError as e:
                    outcomes.append((task, None, str(e)))
    for task, record, error in outcomes:
        if record is not None:
            records.append(record)
        else:
            failures.append((task[2].id, task[3].id, error))
    return records, failures
