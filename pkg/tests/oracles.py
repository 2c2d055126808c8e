"""Slow, independent reference implementations used to check the vectorised code.

Nothing here imports from ``bridgestop``'s numerics; formulas are re-derived
from first principles (Gaussian conditioning, direct integration, plain loops).
"""

import math

from scipy import integrate
from scipy.stats import norm

SHEPP_B = 0.8399


def cond_mean(t, x, u, S, T):
    # E[X_u | X_t = x] for a bridge pinned at (T, S): linear interpolation in time
    return x + (S - x) * (u - t) / (T - t)


def cond_var(t, u, sigma, T):
    # Var(W_u - W_t) - Cov(W_u - W_t, W_T - W_t)^2 / Var(W_T - W_t)
    a, b = u - t, T - t
    return sigma**2 * (a - a * a / b)


def kernel_quad(t, x1, u, x2, S, T, sigma, lam):
    """Discount-rate-weighted E[(S - X_u) 1{X_u <= x2}] by numerical integration."""
    m = cond_mean(t, x1, u, S, T)
    s = math.sqrt(cond_var(t, u, sigma, T))
    lo = m - 40 * s
    if x2 <= lo:
        return 0.0
    val, _ = integrate.quad(lambda y: (S - y) * norm.pdf(y, m, s), lo, x2, points=[m],
                            epsabs=1e-14, epsrel=1e-12, limit=200)
    return math.exp(-lam * (u - t)) * (1.0 / (T - u) + lam) * val


def kernel_closed(t, x1, u, x2, S, T, sigma, lam):
    m = cond_mean(t, x1, u, S, T)
    s = math.sqrt(cond_var(t, u, sigma, T))
    z = (x2 - m) / s
    return math.exp(-lam * (u - t)) * (1.0 / (T - u) + lam) * ((S - m) * norm.cdf(z) + s * norm.pdf(z))


def tail_H(t, x, t_last, S, T, sigma, lam):
    d = T - t_last
    return math.exp(-lam * (t_last - t)) * (
        (S - x) * d / (T - t) * (1 + lam * d / 2) + sigma * math.sqrt(2 * d / math.pi) * (1 + lam * d / 3))


def last_node(S, T, sigma, lam, t_last):
    d = T - t_last
    num = S / 2 * (1 - lam * d / 2) - sigma * math.sqrt(d / (2 * math.pi)) * (1 + lam * d / 3)
    return num / (0.5 - lam * d / 4)


def solve_loop(nodes, S, sigma, lam, delta, max_iter=1000):
    """Backward recursion with explicit Python loops and the closed-form kernel."""
    N = len(nodes) - 1
    T = nodes[-1]
    b = [0.0] * (N + 1)
    b[N] = S
    b[N - 1] = last_node(S, T, sigma, lam, nodes[N - 1])
    d = T - nodes[N - 1]
    for i in range(N - 2, -1, -1):
        t = nodes[i]
        x = b[i + 1]
        for _ in range(max_iter):
            total = 0.0
            for j in range(i + 1, N):
                total += kernel_closed(t, x, nodes[j], b[j], S, T, sigma, lam) * (nodes[j] - nodes[j - 1])
            e = math.exp(-lam * (nodes[N - 1] - t))
            const = e * sigma * math.sqrt(2 * d / math.pi) * (1 + lam * d / 3) / 2
            slope = e * (1 + lam * d / 2) * d / (T - t) / 2
            new = (S - total - const - slope * S) / (1 - slope)
            done = abs(x - new) / abs(x) <= delta
            x = new
            if done:
                break
        b[i] = x
    return b


def closed_form(S, T, sigma, t):
    return S - SHEPP_B * sigma * math.sqrt(T - t)
