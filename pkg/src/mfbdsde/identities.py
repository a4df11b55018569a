"""Constructed processes with constant integrands for the Ito and product-rule sign checks.

Each helper returns ``(sample, closed_form)`` where ``sample`` is the
per-particle quantity whose mean should equal ``closed_form``. The checks
run on any driver ensemble and confirm the sign conventions of the backward
integral: a ``-gamma^2`` correction in the square and a ``G z - g q`` cross
term in the product.
"""
from __future__ import annotations

import numpy as np


def square_identity(paths, theta, gamma, c=0.5):
    """``alpha_t = c + theta W_t - gamma (B_T - B_t)``, so that
    ``d alpha = theta dW + gamma dB`` with the backward integral; returns
    ``alpha_T^2 - alpha_0^2`` against ``(theta^2 - gamma^2) T``."""
    w = paths.w_values()[..., 0]
    tail = paths.b_tails()[..., 0]
    alpha = c + theta * w - gamma * tail
    return alpha[:, -1] ** 2 - alpha[:, 0] ** 2, (theta**2 - gamma**2) * paths.grid.horizon


def square_identity_sums(paths, theta, gamma, c=0.5):
    """Discrete expansion of ``alpha_T^2 - alpha_0^2``: forward integral at the
    left endpoint, backward integral at the right endpoint, plus the two
    quadratic-variation sums. The identity holds pathwise up to the
    difference between realized and expected quadratic variation."""
    w = paths.w_values()[..., 0]
    tail = paths.b_tails()[..., 0]
    alpha = c + theta * w - gamma * tail
    dw, db = paths.w_increments[..., 0], paths.b_increments[..., 0]
    forward = np.sum(2 * alpha[:, :-1] * theta * dw, axis=1)
    backward_right = np.sum(2 * alpha[:, 1:] * gamma * db, axis=1)
    backward_left = np.sum(2 * alpha[:, :-1] * gamma * db, axis=1)
    qv = np.sum((theta * dw) ** 2, axis=1) - np.sum((gamma * db) ** 2, axis=1)
    return alpha[:, -1] ** 2 - alpha[:, 0] ** 2, forward, backward_right, backward_left, qv


def product_identity(paths, a, b, f, g, z, F, G, q):
    """Backward ``y`` with constant ``(f, g, z)`` and forward ``p`` with constant
    ``(F, G, q)``; returns ``p_T y_T - p_0 y_0`` against
    ``(a F - b f + G z - g q) T``.

    ``y_t = a + f (T - t) + g (B_T - B_t) + z W_t`` solves
    ``-dy = f dt + g dB - z dW`` and
    ``p_t = b + F t + G W_t + q (B_T - B_t)`` solves
    ``dp = F dt + G dW - q dB``.
    """
    T = paths.grid.horizon
    t = paths.grid.points[None, :]
    w = paths.w_values()[..., 0]
    tail = paths.b_tails()[..., 0]
    y = a + f * (T - t) + g * tail + z * w
    p = b + F * t + G * w + q * tail
    return p[:, -1] * y[:, -1] - p[:, 0] * y[:, 0], (a * F - b * f + G * z - g * q) * T


def within(sample, target, n_se=3.0):
    """``(passed, mean, standard_error)`` of ``|mean(sample) - target| <= n_se * SE``."""
    se = sample.std(ddof=1) / np.sqrt(sample.size)
    return bool(abs(sample.mean() - target) <= n_se * se), float(sample.mean()), float(se)


# Constants of the shipped sign checks; chosen so the wrong-sign closed forms differ clearly.
SQUARE_CASE = {"theta": 1.0, "gamma": 0.8, "c": 0.5}
PRODUCT_CASE = {"a": 1.0, "b": 0.5, "f": 0.3, "g": 0.7, "z": 0.6, "F": -0.4, "G": 0.9, "q": 0.5}


def sign_checks(paths, n_se: float = 3.0) -> dict:
    """Square and product identities on ``paths``, each against its closed form.

    Each entry also records whether the mean is separated from the closed form
    with the backward correction's sign flipped, so a sign error cannot pass.
    """
    out = {}
    sq, target = square_identity(paths, **SQUARE_CASE)
    theta, gamma = SQUARE_CASE["theta"], SQUARE_CASE["gamma"]
    wrong = (theta**2 + gamma**2) * paths.grid.horizon
    out["ito_square"] = _entry(sq, target, wrong, n_se)
    pr, target = product_identity(paths, **PRODUCT_CASE)
    k = PRODUCT_CASE
    wrong = (k["a"] * k["F"] - k["b"] * k["f"] - k["G"] * k["z"] + k["g"] * k["q"]) * paths.grid.horizon
    out["product_rule"] = _entry(pr, target, wrong, n_se)
    return out


def _entry(sample, target, wrong, n_se):
    ok, mean, se = within(sample, target, n_se)
    return {"mean": mean, "standard_error": se, "closed_form": float(target), "passed": ok,
            "wrong_sign_closed_form": float(wrong), "wrong_sign_rejected": not within(sample, wrong, n_se)[0]}
