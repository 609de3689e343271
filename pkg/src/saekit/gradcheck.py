"""Finite-difference checks of a whole network's loss gradient."""
from __future__ import annotations

import numpy as np

from .layers import softmax_cross_entropy
from .models import ModelInstance, forward
from .tensor import Tensor, backward, no_grad, record_kinks, rel_error


def model_loss(m: ModelInstance, x: np.ndarray, labels: np.ndarray) -> Tensor:
    return softmax_cross_entropy(forward(m, Tensor(x)), labels)


def check_model_gradients(
    m: ModelInstance,
    x: np.ndarray,
    labels: np.ndarray,
    eps: float = 1e-5,
    samples: int = 4,
    seed: int = 0,
    max_tries: int = 64,
) -> dict[str, float]:
    """Max relative error per parameter tensor (plus ``"input"``).

    The model is cast to double precision and run in train mode. Up to
    ``samples`` coordinates per tensor are perturbed, chosen by a seeded
    generator. A coordinate whose +eps and -eps forwards take different
    ReLU or max-pool branches is skipped, since the central difference
    straddles a kink there. A tensor with no kink-free coordinate after
    ``max_tries`` draws reports NaN.
    """
    m.to(np.float64).train()
    x = np.array(x, dtype=np.float64)
    params = m.parameters()
    leaf = Tensor(x.copy(), requires_grad=True)
    grads = backward(softmax_cross_entropy(forward(m, leaf), labels))
    rng = np.random.default_rng(seed)

    def loss_at() -> tuple[float, list]:
        with no_grad(), record_kinks() as kinks:
            return float(model_loss(m, x, labels).data), kinks

    def same_branches(a: list, b: list) -> bool:
        return len(a) == len(b) and all(np.array_equal(u, v) for u, v in zip(a, b))

    def probe(arr: np.ndarray, analytic: np.ndarray) -> float:
        flat = arr.reshape(-1)
        want = min(samples, flat.size)
        order = rng.permutation(flat.size)[:max_tries]
        idx, numeric = [], []
        for i in order:
            orig = flat[i]
            flat[i] = orig + eps
            fp, kp = loss_at()
            flat[i] = orig - eps
            fm, km = loss_at()
            flat[i] = orig
            if not same_branches(kp, km):
                continue
            idx.append(i)
            numeric.append((fp - fm) / (2 * eps))
            if len(idx) == want:
                break
        if not idx:
            return float("nan")
        return float(rel_error(analytic.reshape(-1)[idx], np.array(numeric)).max())

    report = {"input": probe(x, grads.get(leaf, np.zeros_like(x)))}
    for name, t in params.items():
        report[name] = probe(t.data, grads.get(t, np.zeros_like(t.data)))
    return report
