"""Adam on flat parameter vectors."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class AdamState:
    first_moment: np.ndarray
    second_moment: np.ndarray
    learning_rate: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0

    @classmethod
    def zeros_like(cls, params: np.ndarray, **hyper) -> AdamState:
        return cls(np.zeros_like(params, dtype=np.float64), np.zeros_like(params, dtype=np.float64), **hyper)


def adam_step(state: AdamState, params: np.ndarray, grads: np.ndarray) -> tuple[np.ndarray, AdamState]:
    """One bias-corrected Adam update.

    ``state`` is advanced in place and also returned; ``params`` is not
    modified, the updated copy is returned.
    """
    params = np.asarray(params, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if params.shape != grads.shape or params.shape != state.first_moment.shape:
        raise ValueError(
            f"shape mismatch: params {params.shape}, grads {grads.shape}, "
            f"moments {state.first_moment.shape}"
        )
    state.step += 1
    state.first_moment = state.beta1 * state.first_moment + (1.0 - state.beta1) * grads
    state.second_moment = state.beta2 * state.second_moment + (1.0 - state.beta2) * grads * grads
    m_hat = state.first_moment / (1.0 - state.beta1**state.step)
    v_hat = state.second_moment / (1.0 - state.beta2**state.step)
    return params - state.learning_rate * m_hat / (np.sqrt(v_hat) + state.eps), state


def clip_by_global_norm(grads: np.ndarray, max_norm: float) -> np.ndarray:
    norm = float(np.sqrt(np.sum(grads * grads)))
    if norm > max_norm:
        return grads * (max_norm / norm)
    return grads
