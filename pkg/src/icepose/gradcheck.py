"""End-to-end gradient check of the ViT loss against central differences."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .vit import PRESETS, ViTConfig, ViTParams, forward, init_params, loss


@dataclass(frozen=True)
class GradCheckResult:
    max_error: float
    per_param: dict[str, float]
    n_checked: int

    def worst(self) -> tuple[str, float]:
        name = max(self.per_param, key=self.per_param.get)
        return name, self.per_param[name]


def check_gradients(
    config: ViTConfig | None = None,
    seed: int = 0,
    batch: int = 2,
    perturb: float = 0.0,
    h: float = 1e-5,
    lam: float = 2.0,
    target_scale: float = 1.0,
) -> GradCheckResult:
    """Compare backward() with central differences on every parameter entry.

    ``perturb`` adds N(0, perturb) noise to all parameters first, moving the
    check away from the symmetric initial point (unit gains, zero biases).
    Targets are the current prediction plus N(0, target_scale) offsets, so
    the loss stays O(1) wherever the parameters are: central-difference
    rounding noise grows like eps * loss / h and would otherwise swamp
    exactly-zero gradients such as the attention key bias.
    """
    config = config or PRESETS["micro"]
    rng = np.random.default_rng(seed)
    params = init_params(config, seed)
    if perturb > 0.0:
        for t in params.values():
            t.data = t.data + rng.normal(0.0, perturb, t.shape)
    images = rng.uniform(0.0, 1.0, (batch, config.image_h, config.image_w))
    with T.no_grad():
        pred = forward(params, config, images)
    target_p = pred.p_hat.data + rng.normal(0.0, target_scale, (batch, 3))
    target_o = pred.o_hat.data + rng.normal(0.0, target_scale, (batch, 6))

    def objective(_x=None):
        return loss(forward(params, config, images), target_p, target_o, lam)

    params.zero_grad()
    T.backward(objective())
    per_param = {}
    for name, t in params.items():
        numeric = T.finite_diff_grad(objective, t, h)
        per_param[name] = T.max_relative_error(t.grad, numeric)
    return GradCheckResult(max(per_param.values()), per_param, params.num_parameters())


__all__ = ["GradCheckResult", "check_gradients", "ViTParams"]
