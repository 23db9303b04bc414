"""Modification detector: flag inputs whose label flips under Gaussian noise.

An image is classified once clean and once per noisy draw (noise added, then
clipped back to [0, 1]); any disagreement flags it.  With draws=1 this is
exactly the one-draw consistency rule; more draws only add nested samples
from the same stream, so a one-draw flag implies a k-draw flag.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import ModelWeights, predict
from .seeding import PURPOSES


@dataclass(frozen=True)
class DetectorConfig:
    sigma: float = 0.05
    draws: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")
        if self.draws < 1:
            raise ValueError("draws must be >= 1")


@dataclass
class DetectResult:
    flagged: bool
    clean_label: int
    noisy_labels: list[int]


def detect(image: np.ndarray, weights: ModelWeights, kind: str,
           cfg: DetectorConfig) -> DetectResult:
    """Classify the image and cfg.draws noisy copies; flag on any mismatch."""
    image = np.asarray(image, dtype=np.float32)
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(cfg.seed))))
    clean_label = predict(image, weights, kind)
    noisy_labels = []
    for _ in range(cfg.draws):
        noisy = image + rng.normal(0.0, cfg.sigma, image.shape)
        noisy = np.clip(noisy, 0.0, 1.0).astype(np.float32)
        noisy_labels.append(predict(noisy, weights, kind))
    return DetectResult(any(l != clean_label for l in noisy_labels), clean_label, noisy_labels)


@dataclass
class SweepRow:
    sigma: float
    clean_flag_rate: float
    attacked_flag_rate: float


def _flag_rate(images, weights, kind, sigma, draws, seed, group: int) -> float:
    flagged = 0
    for i, image in enumerate(images):
        sub = int(np.random.SeedSequence(
            [int(seed), PURPOSES["detector"], group, i]).generate_state(1, np.uint64)[0])
        cfg = DetectorConfig(sigma=sigma, draws=draws, seed=sub)
        flagged += int(detect(image, weights, kind, cfg).flagged)
    return flagged / len(images)


def sweep(clean_images, attacked_images, sigmas, weights: ModelWeights,
          kind: str, seed: int, draws: int = 1) -> list[SweepRow]:
    """Flag rates over both image sets at each noise level.

    Each image owns a derived noise stream, so rates are deterministic per
    seed and independent of evaluation order or parallelism.
    """
    if not clean_images or not attacked_images:
        raise ValueError("both image sets must be nonempty")
    rows = []
    for si, sigma in enumerate(sigmas):
        rows.append(SweepRow(
            sigma=float(sigma),
            clean_flag_rate=_flag_rate(clean_images, weights, kind, sigma, draws, seed,
                                       group=2 * si),
            attacked_flag_rate=_flag_rate(attacked_images, weights, kind, sigma, draws, seed,
                                          group=2 * si + 1),
        ))
    return rows
