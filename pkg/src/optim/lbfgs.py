"""
Limited-memory BFGS on a flat parameter vector, with a strong-Wolfe line
search (cubic interpolation and zoom, as in torch.optim.LBFGS).
"""

import math
from collections import deque
from collections.abc import Callable
from dataclasses import dataclass, field
from typing import Literal

from torch import Tensor

from core.config import LbfgsConfig
from core.logger import logger

Objective = Callable[[Tensor], tuple[float, Tensor]]
Status = Literal["converged", "max_epochs", "line_search_failed", "stalled"]


@dataclass
class LbfgsResult:
    x: Tensor
    value: float
    grad_norm: float
    iterations: int
    status: Status
    history: list[float] = field(default_factory=list)
    evaluations: int = 0


def _cubic_interpolate(x1, f1, g1, x2, f2, g2, bounds=None) -> float:
    if bounds is not None:
        xmin_bound, xmax_bound = bounds
    else:
        xmin_bound, xmax_bound = (x1, x2) if x1 <= x2 else (x2, x1)
    d1 = g1 + g2 - 3 * (f1 - f2) / (x1 - x2)
    d2_square = d1**2 - g1 * g2
    if d2_square >= 0:
        d2 = math.sqrt(d2_square)
        if x1 <= x2:
            min_pos = x2 - (x2 - x1) * ((g2 + d2 - d1) / (g2 - g1 + 2 * d2))
        else:
            min_pos = x1 - (x1 - x2) * ((g1 + d2 - d1) / (g1 - g2 + 2 * d2))
        return min(max(min_pos, xmin_bound), xmax_bound)
    return (xmin_bound + xmax_bound) / 2.0


@dataclass
class _LineSearch:
    value: float
    grad: Tensor
    step: float
    evaluations: int
    satisfied: bool


def strong_wolfe(
    objective: Objective,
    x: Tensor,
    step: float,
    direction: Tensor,
    value: float,
    grad: Tensor,
    slope: float,
    c1: float = 1e-4,
    c2: float = 0.9,
    tolerance_change: float = 1e-9,
    max_evaluations: int = 25,
) -> _LineSearch:
    """Find a step along ``direction`` meeting the strong Wolfe conditions."""

    def evaluate(t: float) -> tuple[float, Tensor, float]:
        f, g = objective(x + t * direction)
        return f, g, float(g.dot(direction))

    d_norm = float(direction.abs().max())
    f_new, g_new, gtd_new = evaluate(step)
    evaluations = 1
    t_prev, f_prev, g_prev, gtd_prev = 0.0, value, grad.clone(), slope
    done = False
    ls_iter = 0
    t = step

    while ls_iter < max_evaluations:
        if f_new > value + c1 * t * slope or (ls_iter > 1 and f_new >= f_prev):
            bracket = [t_prev, t]
            bracket_f = [f_prev, f_new]
            bracket_g = [g_prev, g_new.clone()]
            bracket_gtd = [gtd_prev, gtd_new]
            break
        if abs(gtd_new) <= -c2 * slope:
            bracket, bracket_f, bracket_g, bracket_gtd = [t], [f_new], [g_new], [gtd_new]
            done = True
            break
        if gtd_new >= 0:
            bracket = [t_prev, t]
            bracket_f = [f_prev, f_new]
            bracket_g = [g_prev, g_new.clone()]
            bracket_gtd = [gtd_prev, gtd_new]
            break

        # extrapolate
        min_step = t + 0.01 * (t - t_prev)
        max_step = t * 10
        previous = t
        t = _cubic_interpolate(t_prev, f_prev, gtd_prev, t, f_new, gtd_new, bounds=(min_step, max_step))
        t_prev, f_prev, g_prev, gtd_prev = previous, f_new, g_new.clone(), gtd_new
        f_new, g_new, gtd_new = evaluate(t)
        evaluations += 1
        ls_iter += 1

    if ls_iter == max_evaluations:
        bracket = [0.0, t]
        bracket_f = [value, f_new]
        bracket_g = [grad, g_new]
        bracket_gtd = [slope, gtd_new]

    # zoom
    insufficient = False
    low, high = (0, 1) if bracket_f[0] <= bracket_f[-1] else (1, 0)
    while not done and ls_iter < max_evaluations:
        if abs(bracket[1] - bracket[0]) * d_norm < tolerance_change:
            break
        t = _cubic_interpolate(
            bracket[0], bracket_f[0], bracket_gtd[0], bracket[1], bracket_f[1], bracket_gtd[1]
        )
        eps = 0.1 * (max(bracket) - min(bracket))
        if min(max(bracket) - t, t - min(bracket)) < eps:
            if insufficient or t >= max(bracket) or t <= min(bracket):
                t = max(bracket) - eps if abs(t - max(bracket)) < abs(t - min(bracket)) else min(bracket) + eps
                insufficient = False
            else:
                insufficient = True
        else:
            insufficient = False

        f_new, g_new, gtd_new = evaluate(t)
        evaluations += 1
        ls_iter += 1

        if f_new > value + c1 * t * slope or f_new >= bracket_f[low]:
            bracket[high], bracket_f[high], bracket_g[high], bracket_gtd[high] = t, f_new, g_new.clone(), gtd_new
            low, high = (0, 1) if bracket_f[0] <= bracket_f[1] else (1, 0)
        else:
            if abs(gtd_new) <= -c2 * slope:
                done = True
            elif gtd_new * (bracket[high] - bracket[low]) >= 0:
                bracket[high], bracket_f[high] = bracket[low], bracket_f[low]
                bracket_g[high], bracket_gtd[high] = bracket_g[low], bracket_gtd[low]
            bracket[low], bracket_f[low], bracket_g[low], bracket_gtd[low] = t, f_new, g_new.clone(), gtd_new

    if len(bracket) == 1:
        low = 0
    return _LineSearch(bracket_f[low], bracket_g[low], bracket[low], evaluations, done)


def lbfgs_minimize(
    objective: Objective,
    x0: Tensor,
    config: LbfgsConfig | None = None,
) -> LbfgsResult:
    """
    Minimize ``objective`` (value and gradient at a point) from ``x0``.

    Runs at most ``epochs * iterations_per_epoch`` iterations. Accepted
    iterations never increase the objective; a failed line search keeps the
    best point found and reports ``line_search_failed``.
    """
    config = config or LbfgsConfig()
    x = x0.detach().clone()
    value, grad = objective(x)
    evaluations = 1
    history = [value]

    if float(grad.norm()) <= config.tolerance_grad:
        return LbfgsResult(x, value, float(grad.norm()), 0, "converged", history, evaluations)

    old_dirs: deque[Tensor] = deque(maxlen=config.history_size)
    old_steps: deque[Tensor] = deque(maxlen=config.history_size)
    rho: deque[float] = deque(maxlen=config.history_size)
    h_diag = 1.0
    max_iterations = config.epochs * config.iterations_per_epoch
    status: Status = "max_epochs"
    iterations = 0
    direction = -grad
    step = 0.0
    prev_grad = grad

    while iterations < max_iterations:
        iterations += 1
        if iterations > 1:
            y = grad - prev_grad
            s = direction * step
            ys = float(y.dot(s))
            if ys > 1e-10:
                old_dirs.append(y)
                old_steps.append(s)
                rho.append(1.0 / ys)
                h_diag = ys / float(y.dot(y))
            q = -grad
            alphas = []
            for y_i, s_i, rho_i in zip(reversed(old_dirs), reversed(old_steps), reversed(rho)):
                a = rho_i * float(s_i.dot(q))
                alphas.append(a)
                q = q - a * y_i
            direction = q * h_diag
            for (y_i, s_i, rho_i), a in zip(zip(old_dirs, old_steps, rho), reversed(alphas)):
                b = rho_i * float(y_i.dot(direction))
                direction = direction + (a - b) * s_i
        prev_grad = grad.clone()
        prev_value = value

        if iterations == 1:
            step = min(1.0, 1.0 / float(grad.abs().sum())) * config.lr
        else:
            step = config.lr
        slope = float(grad.dot(direction))
        if slope > -config.tolerance_change:
            status = "stalled"
            break

        search = strong_wolfe(
            objective, x, step, direction, value, grad, slope,
            c1=config.c1, c2=config.c2,
            tolerance_change=config.tolerance_change,
            max_evaluations=config.max_line_search,
        )
        evaluations += search.evaluations
        if search.value >= value:
            if search.satisfied:
                status = "stalled"
            else:
                logger.warning(
                    f"L-BFGS line search failed at iteration {iterations}; keeping best point (value {value:.6g})"
                )
                status = "line_search_failed"
            break
        step = search.step
        x = x + step * direction
        value, grad = search.value, search.grad
        history.append(value)

        if float(grad.norm()) <= config.tolerance_grad:
            status = "converged"
            break
        if float((direction * step).abs().max()) <= config.tolerance_change:
            status = "stalled"
            break
        if abs(value - prev_value) < config.tolerance_change:
            status = "stalled"
            break

    return LbfgsResult(x, value, float(grad.norm()), iterations, status, history, evaluations)
