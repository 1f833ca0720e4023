"""Central finite-difference verification of reverse-mode gradients."""
from __future__ import annotations

from typing import Callable, Mapping

import numpy as np

from .tensor import Tensor, backward, no_grad, parameter

LossFn = Callable[[Mapping[str, Tensor]], Tensor]


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return np.abs(analytic - numeric) / scale


def numeric_gradient(loss_fn: LossFn, arrays: Mapping[str, np.ndarray], name: str, eps: float,
                     dtype=np.longdouble) -> np.ndarray:
    """Central differences for one parameter tensor, all others held fixed.

    Losses are evaluated in extended precision by default: with a 1e-5 step,
    float64 cancellation error alone is ~1e-11, which swamps the relative
    error of gradient entries near 1e-8.
    """
    work = {k: np.array(v, dtype=dtype) for k, v in arrays.items()}
    target = work[name]
    flat = target.reshape(-1)
    grad = np.zeros_like(flat)
    with no_grad():
        leaves = {k: Tensor(v, name=k) for k, v in work.items()}
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + eps
            plus = loss_fn(leaves).data.reshape(())
            flat[i] = original - eps
            minus = loss_fn(leaves).data.reshape(())
            flat[i] = original
            grad[i] = (plus - minus) / (2 * dtype(eps))
    return grad.reshape(target.shape).astype(np.float64)


def check_gradients(
    loss_fn: LossFn,
    arrays: Mapping[str, np.ndarray],
    eps: float = 1e-5,
    analytic: Mapping[str, np.ndarray] | None = None,
) -> dict[str, float]:
    """Max relative error per parameter between reverse-mode and finite-difference gradients.

    ``loss_fn`` maps a dict of parameter tensors to a scalar loss; it must be
    deterministic (disable dropout). ``analytic`` overrides the reverse-mode
    gradients, which is how fault-injection fixtures are exercised.
    """
    if not arrays:
        return {}
    if analytic is None:
        params = {k: parameter(np.asarray(v, dtype=np.float64), k) for k, v in arrays.items()}
        analytic = backward(loss_fn(params), params.values())
    report = {}
    for name in arrays:
        numeric = numeric_gradient(loss_fn, arrays, name, eps)
        report[name] = float(relative_error(np.asarray(analytic[name]), numeric).max())
    return report


def check_captioner_gradients(seed: int = 0, eps: float = 1e-5) -> dict[str, float]:
    """Gradient check of the full captioner graph at reduced geometry.

    Uses hidden 16, embedding 8, 4 regions of 12 features and the real
    vocabulary, on a random feature map and a random rendered sentence.
    """
    from .captioner import CaptionerParams, ModelConfig, batch_loss, pad_targets
    from .grammar import all_cases, build_vocab, render
    from .tensor import RngStream

    vocab = build_vocab()
    config = ModelConfig.reduced(len(vocab))
    params = CaptionerParams.init(config, seed, dtype=np.float64)
    rng = RngStream(seed, "gradcheck")
    features = rng.normal((config.regions, config.feature_dim))
    cases = all_cases()
    target = pad_targets([vocab.encode(render(cases[int(rng.integers(0, len(cases)))]))])
    return check_gradients(lambda p: batch_loss(features, target, p, config), params.arrays, eps)
