"""Adam keyed by replica id, with moment warm-up for freshly split replicas."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step_count: int = 0

    @classmethod
    def zeros(cls, n):
        return cls(np.zeros(n), np.zeros(n), 0)

    def copy(self):
        return AdamState(self.m.copy(), self.v.copy(), self.step_count)


def inverse_sqrt_lr(step, base_lr, warmup_steps):
    """Linear warm-up to ``base_lr`` over ``warmup_steps``, then ``1/sqrt(step)`` decay."""
    step = max(step, 1)
    if warmup_steps <= 0:
        return base_lr
    return base_lr * min(step / warmup_steps, np.sqrt(warmup_steps / step))


@dataclass
class Adam:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-9
    warmup_steps: int = 0
    clip_norm: float | None = None
    states: dict = field(default_factory=dict)  # replica_id -> AdamState

    def schedule(self, global_step):
        return inverse_sqrt_lr(global_step, self.lr, self.warmup_steps)

    def state_for(self, replica_id, size):
        st = self.states.get(replica_id)
        if st is None:
            st = self.states[replica_id] = AdamState.zeros(size)
        return st

    def update(self, params, grad, state, lr):
        """In-place bias-corrected Adam update of one flat parameter block."""
        if grad.shape != params.shape:
            raise ValueError(f"gradient length {grad.shape} != parameter length {params.shape}")
        state.step_count += 1
        b1, b2 = self.beta1, self.beta2
        tmp = np.multiply(grad, 1.0 - b1)
        state.m *= b1
        state.m += tmp
        np.multiply(grad, grad, out=tmp)
        tmp *= 1.0 - b2
        state.v *= b2
        state.v += tmp
        # params -= lr * m_hat / (sqrt(v_hat) + eps), with both corrections folded into scalars
        c2 = np.sqrt(1.0 - b2 ** state.step_count)
        np.sqrt(state.v, out=tmp)
        tmp += self.eps * c2
        np.divide(state.m, tmp, out=tmp)
        tmp *= lr * c2 / (1.0 - b1 ** state.step_count)
        params -= tmp

    def step(self, replicas, grads, global_step):
        """Update every replica that has a gradient; returns the learning rate used.

        ``replicas`` maps replica_id -> Replica, ``grads`` replica_id -> flat array.
        Non-finite gradients skip the whole step.
        """
        lr = self.schedule(global_step)
        sq = sum(float(g @ g) for g in grads.values())
        if not np.isfinite(sq):
            log.warning("non-finite gradient at step %d; update skipped", global_step)
            return None
        scale = 1.0
        if self.clip_norm and np.sqrt(sq) > self.clip_norm:
            scale = self.clip_norm / np.sqrt(sq)
        for rid in sorted(grads):
            rep = replicas[rid]
            g = grads[rid] if scale == 1.0 else grads[rid] * scale
            self.update(rep.params, g, self.state_for(rid, rep.size), lr)
        return lr

    def warmup_states(self, parent_id, children, probe):
        """Give each child a copy of the parent's moments advanced once by its probe gradient.

        The child gradient is the mean of the probe gradients of the tasks bound
        to it.  Parameters are not touched.  The parent's state is dropped.
        """
        parent = self.states.pop(parent_id, None)
        for child in children:
            base = parent.copy() if parent is not None else AdamState.zeros(child.size)
            try:
                g = np.mean([probe.grads[(parent_id, t)] for t in sorted(child.tasks)], axis=0)
            except KeyError:
                log.warning("missing probe gradient for replica %d; state copied verbatim",
                            child.replica_id)
                self.states[child.replica_id] = base
                continue
            base.m = self.beta1 * base.m + (1.0 - self.beta1) * g
            base.v = self.beta2 * base.v + (1.0 - self.beta2) * (g * g)
            self.states[child.replica_id] = base
        return [self.states[c.replica_id] for c in children]
