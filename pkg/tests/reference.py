"""Straight-line scalar re-implementations used as oracles for the vectorized formulas."""

import math

EPS = 1e-6


def fuse(r, w_safe, w_task, eps=EPS):
    total = 0.0
    for i in range(4):
        total += w_safe[i] * math.log(max(r[i], eps))
    task = 0.0
    for j in range(4):
        task += w_task[j] * r[4 + j]
    return total + math.log(max(task, eps))


def dense(table, w_t, w_safe, w_task):
    out = 0.0
    for t in range(8):
        out += w_t[t] * fuse(table[t], w_safe, w_task)
    return out


def mahalanobis(traj, mean, sigma):
    out = 0.0
    for t in range(8):
        for i in range(3):
            out += ((traj[t][i] - mean[t][i]) / sigma[t][i]) ** 2
    return out


def advantages(rewards):
    n = len(rewards)
    mu = sum(rewards) / n
    var = sum((r - mu) ** 2 for r in rewards) / n
    sd = math.sqrt(max(var, 1e-8))
    return [(r - mu) / sd for r in rewards]


def actor(adv, logp_new, logp_old, eps):
    out = 0.0
    for a, ln, lo in zip(adv, logp_new, logp_old):
        rho = math.exp(ln - lo)
        clipped = min(max(rho, 1 - eps), 1 + eps)
        out += max(-a * rho, -a * clipped)
    return out / len(adv)
