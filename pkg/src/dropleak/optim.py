"""Optimizers for the dummy-data search: L-BFGS with backtracking, and Adam."""

import numpy as np

from . import _kernels


class LBFGS:
    """Limited-memory BFGS over a flat float64 vector.

    Each step computes the two-loop direction, tries the step scaled by
    ``lr`` and halves it up to ``max_backtracks`` times while the objective
    increases. If every trial increases the objective the smallest step is
    taken anyway and counted in ``nonmonotone``. When the full step decreases
    the objective but leaves ``s'y`` non-positive, the step is doubled (up to
    ``max_expansions`` times) while the objective keeps falling. Curvature pairs with
    ``s'y <= curvature_eps`` are skipped; the oldest pair is evicted once
    ``history_size`` pairs are stored.
    """

    def __init__(self, history_size=100, lr=1.0, max_backtracks=10, curvature_eps=1e-10,
                 max_expansions=10):
        if history_size < 1:
            raise ValueError("history_size must be >= 1")
        if lr <= 0:
            raise ValueError("lr must be positive")
        self.history_size = history_size
        self.lr = lr
        self.max_backtracks = max_backtracks
        self.max_expansions = max_expansions
        self.curvature_eps = curvature_eps
        self._s = None
        self._y = None
        self._rho = np.zeros(history_size)
        self._order = []
        self.nonmonotone = 0
        self.skipped_pairs = 0
        self.resets = 0

    def reset(self):
        self._order = []

    def __len__(self):
        return len(self._order)

    def direction(self, grad):
        if self._s is None or self._s.shape[1] != grad.size:
            self._s = np.zeros((self.history_size, grad.size))
            self._y = np.zeros((self.history_size, grad.size))
            self._order = []
        d = _kernels.two_loop(grad, self._s, self._y, self._rho, self._order)
        if not np.all(np.isfinite(d)):
            self.resets += 1
            self.reset()
            d = -grad
        return d

    def push(self, s, y):
        sy = float(np.dot(s, y))
        if not sy > self.curvature_eps:
            self.skipped_pairs += 1
            return False
        if len(self._order) < self.history_size:
            slot = len(self._order)
        else:
            slot = self._order.pop(0)
        self._s[slot] = s
        self._y[slot] = y
        self._rho[slot] = 1.0 / sy
        self._order.append(slot)
        return True

    def step(self, x, f, grad, closure):
        """Advance from ``x`` (objective ``f``, gradient ``grad``).

        ``closure(x)`` returns ``(f, grad)``. Returns ``(x_new, f_new, grad_new)``.
        """
        d = self.direction(grad)
        t = self.lr
        for attempt in range(self.max_backtracks + 1):
            x_new = x + t * d
            f_new, g_new = closure(x_new)
            if np.isfinite(f_new) and f_new <= f:
                break
            if attempt < self.max_backtracks:
                t *= 0.5
        else:
            self.nonmonotone += 1
        if attempt == 0:
            # full step accepted but curvature not yet positive: walk further along d
            for _ in range(self.max_expansions):
                if not np.isfinite(f_new) or np.dot(x_new - x, g_new - grad) > self.curvature_eps:
                    break
                t *= 2.0
                x_try = x + t * d
                f_try, g_try = closure(x_try)
                if not (np.isfinite(f_try) and f_try <= f_new):
                    break
                x_new, f_new, g_new = x_try, f_try, g_try
        if np.isfinite(f_new) and np.all(np.isfinite(g_new)):
            self.push(x_new - x, g_new - grad)
        return x_new, f_new, g_new

    def minimize(self, fun, x0, max_steps, gtol=0.0):
        """Run up to ``max_steps`` steps of ``fun(x) -> (f, grad)``.

        Stops early once the gradient norm drops to ``gtol``. Returns the final
        ``(x, f, grad, steps_taken)``.
        """
        x = np.array(x0, dtype=np.float64)
        f, g = fun(x)
        steps = 0
        while steps < max_steps and np.linalg.norm(g) > gtol:
            x, f, g = self.step(x, f, g, fun)
            steps += 1
        return x, f, g, steps


class Adam:
    def __init__(self, lr=0.1, beta1=0.9, beta2=0.999, eps=1e-8):
        if lr <= 0:
            raise ValueError("lr must be positive")
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = None
        self.v = None

    def step(self, x, f, grad, closure):
        if self.m is None:
            self.m = np.zeros_like(x)
            self.v = np.zeros_like(x)
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        m_hat = self.m / (1 - self.beta1 ** self.t)
        v_hat = self.v / (1 - self.beta2 ** self.t)
        x_new = x - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
        f_new, g_new = closure(x_new)
        return x_new, f_new, g_new
