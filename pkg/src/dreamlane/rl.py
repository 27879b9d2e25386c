"""Reinforcement learning in latent imagination.

Reward fusion, dense temporal aggregation, Gaussian vocabulary sampling (and the
unconstrained Gaussian baseline), group-normalized advantages, the clipped
actor loss, and the policy head trained with them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .core import DT, HORIZON, SeededRng
from .nn import AdamW, DenseNet, Module, NonFiniteError

EPS_FLOOR = 1e-6
VAR_FLOOR = 1e-8
SOURCE_SOFTMAX = "softmax"
SOURCE_NEIGHBOR = "neighborhood"
SOURCE_RANDOM = "random"


# --- reward fusion --------------------------------------------------------------------


def _check_weights(w_safe, w_task):
    w_safe = np.asarray(w_safe, dtype=np.float64)
    w_task = np.asarray(w_task, dtype=np.float64)
    if w_safe.shape != (4,) or w_task.shape != (4,):
        raise ValueError("need four safety and four task weights")
    if np.any(w_safe < 0) or np.any(w_task < 0):
        raise ValueError("reward weights must be nonnegative")
    if abs(w_task.sum() - 1.0) > 1e-9:
        raise ValueError(f"task weights must sum to 1, got {w_task.sum()}")
    return w_safe, w_task


DEFAULT_W_SAFE = np.ones(4)
DEFAULT_W_TASK = np.full(4, 0.25)
DEFAULT_W_TIME = np.full(HORIZON, 1.0 / HORIZON)


def fuse_reward(r, w_safe=DEFAULT_W_SAFE, w_task=DEFAULT_W_TASK, eps_floor: float = EPS_FLOOR, variant: str = "log_product"):
    """Safety-dominant log fusion of (..., 8) reward vectors ordered (nc, dac, ddc, tlc, ep, ttc, lk, hc).

    ``log_product``: sum_i w_i log r_i + log(sum_j w_j r_j), floored at eps_floor.
    ``log_sigmoid``: sum_i w_i log sigmoid(r_i) + log(sum_j w_j r_j), kept for ablations.
    """
    w_safe, w_task = _check_weights(w_safe, w_task)
    r = np.asarray(r, dtype=np.float64)
    safe, task = r[..., :4], r[..., 4:]
    if variant == "log_product":
        s_term = np.sum(w_safe * np.log(np.maximum(safe, eps_floor)), axis=-1)
    elif variant == "log_sigmoid":
        s_term = np.sum(w_safe * -np.log1p(np.exp(-safe)), axis=-1)
    else:
        raise ValueError(f"unknown fusion variant {variant!r}")
    t_term = np.log(np.maximum(np.sum(w_task * task, axis=-1), eps_floor))
    out = s_term + t_term
    return float(out) if out.ndim == 0 else out


def dense_final_reward(table, w_t=DEFAULT_W_TIME, **fuse_kw):
    """Weighted sum over the 8 horizon rows of the fused reward; table (..., 8, 8)."""
    w_t = np.asarray(w_t, dtype=np.float64)
    if w_t.shape != (HORIZON,) or np.any(w_t < 0):
        raise ValueError("temporal weights must be 8 nonnegative values")
    out = np.sum(w_t * fuse_reward(table, **fuse_kw), axis=-1)
    return float(out) if np.ndim(out) == 0 else out


# --- Gaussian policy geometry -----------------------------------------------------------


def sigma_schedule(xy_base=0.2, xy_slope=0.05, theta_base=0.05, theta_slope=0.01) -> np.ndarray:
    """(8, 3) per-coordinate standard deviations growing with the horizon index t = 1..8."""
    t = np.arange(1, HORIZON + 1, dtype=np.float64)
    xy = xy_base + xy_slope * t
    th = theta_base + theta_slope * t
    return np.stack([xy, xy, th], axis=1)


def mahalanobis(traj, mean, sigma):
    """Sum over the 8x3 coordinates of squared standardized deviations; broadcasts over leading axes."""
    sigma = np.asarray(sigma, dtype=np.float64)
    if np.any(sigma <= 0):
        raise ValueError("sigma must be positive")
    z = (np.asarray(traj, dtype=np.float64) - np.asarray(mean, dtype=np.float64)) / sigma
    out = np.sum(z * z, axis=(-1, -2))
    return float(out) if np.ndim(out) == 0 else out


def gaussian_logpdf(x, mean, sigma):
    """Diagonal-Gaussian log-density of (..., 8, 3) trajectories."""
    sigma = np.asarray(sigma, dtype=np.float64)
    return -0.5 * mahalanobis(x, mean, sigma) - np.sum(np.log(sigma)) - 0.5 * sigma.size * math.log(2 * math.pi)


@dataclass
class CandidateSet:
    trajs: np.ndarray  # (G, 8, 3)
    sources: list[str]
    distances: np.ndarray
    vocab_indices: np.ndarray  # -1 for off-vocabulary samples
    rewards: np.ndarray | None = None
    advantages: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.trajs)


def sample_candidates(vocab, mean, sigma, g1: int, g2: int, temperature: float, rng: SeededRng) -> CandidateSet:
    """g1 softmax(-d / temperature) draws without replacement plus the g2 nearest remaining entries.

    The softmax draws use Gumbel top-k, which is equivalent to sequential sampling
    without replacement.
    """
    entries = vocab.entries if hasattr(vocab, "entries") else np.asarray(vocab)
    k = len(entries)
    if g1 < 0 or g2 < 0 or g1 + g2 > k:
        raise ValueError(f"g1 + g2 = {g1 + g2} exceeds vocabulary size {k}")
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    d = mahalanobis(entries, mean, sigma)
    d = np.atleast_1d(d)
    picked: list[int] = []
    if g1:
        logits = -d / temperature
        keys = logits - np.log(-np.log(rng.uniform(size=k)))
        picked = list(np.argsort(-keys, kind="stable")[:g1])
    if g2:
        taken = np.zeros(k, dtype=bool)
        taken[picked] = True
        order = np.argsort(d, kind="stable")
        picked += [int(i) for i in order[~taken[order]][:g2]]
    idx = np.array(picked, dtype=np.int64)
    return CandidateSet(
        trajs=entries[idx].copy(),
        sources=[SOURCE_SOFTMAX] * g1 + [SOURCE_NEIGHBOR] * g2,
        distances=d[idx],
        vocab_indices=idx,
    )


def sample_candidates_random_baseline(mean, sigma, g: int, rng: SeededRng) -> CandidateSet:
    """g coordinate-wise draws from N(mean, sigma^2); no vocabulary, no smoothing."""
    if g < 1:
        raise ValueError("need at least one candidate")
    mean = np.asarray(mean, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    trajs = mean + sigma * rng.normal(size=(g,) + mean.shape)
    safe_sigma = np.where(sigma > 0, sigma, 1.0)
    d = np.sum(((trajs - mean) / safe_sigma) ** 2, axis=(-1, -2))
    return CandidateSet(trajs, [SOURCE_RANDOM] * g, d, np.full(g, -1, dtype=np.int64))


def second_difference_energy(trajs) -> float:
    """Mean squared second difference of positions (with the origin prepended); a jerkiness proxy."""
    trajs = np.asarray(trajs, dtype=np.float64).reshape(-1, HORIZON, 3)
    pos = np.concatenate([np.zeros((len(trajs), 1, 2)), trajs[..., :2]], axis=1)
    dd = np.diff(pos, n=2, axis=1)
    return float(np.mean(np.sum(dd * dd, axis=-1)))


# --- GRPO pieces ------------------------------------------------------------------------


def group_advantages(rewards) -> np.ndarray:
    r = np.asarray(rewards, dtype=np.float64)
    if r.ndim != 1 or len(r) < 2:
        raise ValueError("group advantages need at least two rewards")
    return (r - r.mean()) / np.sqrt(max(r.var(), VAR_FLOOR))


def actor_loss(adv, logp_new, logp_old, epsilon: float = 0.2):
    """mean(max(-A rho, -A clip(rho, 1-eps, 1+eps))) with rho = exp(logp_new - logp_old)."""
    if not 0 < epsilon < 1:
        raise ValueError("epsilon must lie in (0, 1)")
    logp_new = np.asarray(logp_new, dtype=np.float64)
    logp_old = np.asarray(logp_old, dtype=np.float64)
    if not (np.all(np.isfinite(logp_new)) and np.all(np.isfinite(logp_old))):
        raise ValueError("non-finite log-probabilities")
    adv = np.asarray(adv, dtype=np.float64)
    rho = np.exp(logp_new - logp_old)
    out = np.maximum(-adv * rho, -adv * np.clip(rho, 1 - epsilon, 1 + epsilon))
    return float(np.mean(out))


def actor_loss_grad(adv, logp_new, logp_old, epsilon: float = 0.2) -> np.ndarray:
    """d actor_loss / d logp_new for each candidate (batch mean included)."""
    adv = np.asarray(adv, dtype=np.float64)
    rho = np.exp(np.asarray(logp_new, dtype=np.float64) - np.asarray(logp_old, dtype=np.float64))
    unclipped = -adv * rho
    clipped = -adv * np.clip(rho, 1 - epsilon, 1 + epsilon)
    # gradient flows only through the unclipped branch; ties resolve to it
    active = unclipped >= clipped
    return np.where(active, -adv * rho, 0.0) / adv.size


# --- policy head ------------------------------------------------------------------------

OUTPUT_SCALE = np.array([8.0, 4.0, 0.5])


@dataclass(frozen=True)
class RLConfig:
    g1: int = 8
    g2: int = 8
    temperature: float = 1.0
    epsilon: float = 0.2
    lambda_bc: float = 1.0
    lambda_kl: float = 0.1
    lr: float = 3e-4
    batch_scenes: int = 16
    wm_steps: int = 1
    sigma_xy_base: float = 0.2
    sigma_xy_slope: float = 0.05
    sigma_theta_base: float = 0.05
    sigma_theta_slope: float = 0.01
    w_safe: tuple = (1.0, 1.0, 1.0, 1.0)
    w_task: tuple = (0.25, 0.25, 0.25, 0.25)
    w_time: tuple = tuple([1.0 / HORIZON] * HORIZON)
    fusion: str = "log_product"
    sampler: str = "vocab"

    @property
    def sigma(self) -> np.ndarray:
        return sigma_schedule(self.sigma_xy_base, self.sigma_xy_slope, self.sigma_theta_base, self.sigma_theta_slope)

    def final_reward(self, tables):
        return dense_final_reward(tables, np.array(self.w_time), w_safe=np.array(self.w_safe), w_task=np.array(self.w_task), variant=self.fusion)


def time_basis(degree: int) -> np.ndarray:
    """(8, degree) polynomial basis tau^1..tau^degree on tau = k/8; every column vanishes at the start pose."""
    if degree < 1:
        raise ValueError("basis degree must be >= 1")
    tau = np.arange(1, HORIZON + 1) / HORIZON
    return np.stack([tau ** p for p in range(1, degree + 1)], axis=1)


class PolicyHead(Module):
    """Maps (scaled observation features, flattened history latents) to a mean trajectory.

    The mean is a straight constant-speed rollout at the current speed plus a
    low-degree polynomial offset in time per coordinate; the network emits the
    polynomial coefficients.
    """

    def __init__(self, n_features: int, latent_dim: int, n_history: int, rng: SeededRng, hidden: int = 128, degree: int = 3, speed_index: int = 2):
        super().__init__()
        self.n_features = n_features
        self.speed_index = speed_index
        self.basis = time_basis(degree)
        self.net = DenseNet([n_features + n_history * latent_dim, hidden, hidden, degree * 3], ["tanh", "tanh", "identity"], rng)

    def children(self):
        return {"net": self.net}

    def _inputs(self, feats, hist, feature_scale):
        feats = np.asarray(feats, dtype=np.float64)
        hist = np.asarray(hist, dtype=np.float64).reshape(len(feats), -1)
        return np.concatenate([feats * feature_scale, hist], axis=-1)

    @staticmethod
    def nominal(speed: np.ndarray) -> np.ndarray:
        speed = np.asarray(speed, dtype=np.float64).reshape(-1, 1)
        out = np.zeros((len(speed), HORIZON, 3))
        out[..., 0] = speed * DT * np.arange(1, HORIZON + 1)
        return out

    def _compose(self, feats, raw) -> np.ndarray:
        coef = raw.astype(np.float64).reshape(len(raw), -1, 3)
        return self.nominal(np.asarray(feats)[:, self.speed_index]) + np.einsum("kp,bpc->bkc", self.basis, coef) * OUTPUT_SCALE

    def mean(self, feats, hist, feature_scale) -> np.ndarray:
        return self._compose(feats, self.net(self._inputs(feats, hist, feature_scale)))

    def forward(self, feats, hist, feature_scale) -> np.ndarray:
        return self._compose(feats, self.net.forward(self._inputs(feats, hist, feature_scale)))

    def backward(self, g_mean: np.ndarray) -> None:
        g_coef = np.einsum("kp,bkc->bpc", self.basis, np.asarray(g_mean) * OUTPUT_SCALE)
        self.net.backward(g_coef.reshape(len(g_coef), -1))


@dataclass
class PolicyBatch:
    """Per-scene policy inputs and targets; arrays stacked over scenes."""

    feats: np.ndarray  # (B, F) raw observation features at frame 0
    hist: np.ndarray  # (B, 4, L)
    anchors: np.ndarray  # (B, 8, 3)
    vocabs: list  # per-scene (K, 8, 3) arrays

    def subset(self, idx) -> "PolicyBatch":
        idx = list(idx)
        return PolicyBatch(self.feats[idx], self.hist[idx], self.anchors[idx], [self.vocabs[i] for i in idx])


def bc_loss(mean, anchors) -> tuple[float, np.ndarray]:
    """Mean absolute deviation and its gradient."""
    diff = np.asarray(mean) - np.asarray(anchors)
    return float(np.mean(np.abs(diff))), np.sign(diff) / diff.size


def kl_loss(mean, ref_mean, sigma) -> tuple[float, np.ndarray]:
    """KL(N(mean, s^2) || N(ref, s^2)) summed over coordinates, averaged over the batch."""
    diff = np.asarray(mean) - np.asarray(ref_mean)
    b = len(diff)
    return float(np.sum(diff * diff / (2 * sigma * sigma)) / b), diff / (sigma * sigma) / b


def policy_loss(mean, cands, adv, mu_old, anchors, ref_mean, cfg: RLConfig):
    """Total loss and its gradient wrt the policy mean for fixed candidates and advantages.

    cands (B, G, 8, 3), adv (B, G). The actor term averages over scenes of per-group means.
    """
    sigma = cfg.sigma
    mean = np.asarray(mean, dtype=np.float64)
    b = len(mean)
    logp_new = gaussian_logpdf(cands, mean[:, None], sigma)
    logp_old = gaussian_logpdf(cands, np.asarray(mu_old)[:, None], sigma)
    actor = 0.0
    g_actor = np.zeros_like(mean)
    for i in range(b):
        actor += actor_loss(adv[i], logp_new[i], logp_old[i], cfg.epsilon) / b
        g_logp = actor_loss_grad(adv[i], logp_new[i], logp_old[i], cfg.epsilon) / b
        # d logp / d mean = (x - mean) / sigma^2
        g_actor[i] = np.sum(g_logp[:, None, None] * (cands[i] - mean[i]) / (sigma * sigma), axis=0)
    bc, g_bc = bc_loss(mean, anchors)
    kl, g_kl = kl_loss(mean, ref_mean, sigma)
    total = actor + cfg.lambda_bc * bc + cfg.lambda_kl * kl
    grad = g_actor + cfg.lambda_bc * g_bc + cfg.lambda_kl * g_kl
    return {"actor": actor, "bc": bc, "kl": kl, "total": total}, grad


def draw_candidates(batch: PolicyBatch, mean: np.ndarray, cfg: RLConfig, rng: SeededRng) -> list[CandidateSet]:
    g = cfg.g1 + cfg.g2
    out = []
    for i in range(len(mean)):
        if cfg.sampler == "vocab":
            out.append(sample_candidates(batch.vocabs[i], mean[i], cfg.sigma, cfg.g1, cfg.g2, cfg.temperature, rng))
        elif cfg.sampler == "random":
            out.append(sample_candidates_random_baseline(mean[i], cfg.sigma, g, rng))
        else:
            raise ValueError(f"unknown sampler {cfg.sampler!r}")
    return out


@dataclass
class RLState:
    policy: PolicyHead
    ref_policy: PolicyHead
    opt: AdamW
    cfg: RLConfig
    feature_scale: np.ndarray
    history: list = field(default_factory=list)


def rl_train_step(state: RLState, wm, rm, batch: PolicyBatch, rng: SeededRng, scorer=None) -> dict:
    """One GRPO update of the policy head on a batch of scenes.

    ``scorer(hist (N, 4, L), trajs (N, 8, 3), rng) -> (N, 8, 8)`` predicts reward tables; by
    default the frozen world model and reward model are used.
    """
    from .rewardmodel import score_trajectories

    cfg = state.cfg
    policy = state.policy
    if scorer is None:
        def scorer(hist, trajs, r):
            return score_trajectories(wm, rm, hist, trajs, cfg.wm_steps, r)

    mu_old = policy.mean(batch.feats, batch.hist, state.feature_scale)
    ref_mean = state.ref_policy.mean(batch.feats, batch.hist, state.feature_scale)
    sets = draw_candidates(batch, mu_old, cfg, rng)
    cands = np.stack([s.trajs for s in sets])  # (B, G, 8, 3)
    b, g = cands.shape[:2]
    hist_rep = np.repeat(batch.hist, g, axis=0)
    tables = scorer(hist_rep, cands.reshape(b * g, HORIZON, 3), rng).reshape(b, g, HORIZON, -1)
    rewards = cfg.final_reward(tables)
    adv = np.stack([group_advantages(r) for r in rewards])
    for s, r, a in zip(sets, rewards, adv):
        s.rewards, s.advantages = r, a

    policy.zero_grad()
    mean = policy.forward(batch.feats, batch.hist, state.feature_scale)
    losses, grad = policy_loss(mean, cands, adv, mu_old, batch.anchors, ref_mean, cfg)
    if not all(np.isfinite(v) for v in losses.values()):
        raise NonFiniteError(f"non-finite RL loss: {losses}")
    policy.backward(grad)
    state.opt.step(policy.parameter_dict(), policy.gradient_dict())
    losses["mean_reward"] = float(np.mean(rewards))
    losses["collision_freq"] = float(np.mean(tables[:, :, -1, 0] < 0.5))
    losses["candidate_jerk"] = second_difference_energy(cands.reshape(-1, HORIZON, 3))
    return losses


def bc_train(policy: PolicyHead, batch: PolicyBatch, feature_scale, epochs: int, rng: SeededRng, lr: float = 1e-3, minibatch: int = 32, weight_decay: float = 1e-4) -> list[float]:
    """Behavior cloning of the anchors with the mean absolute deviation loss."""
    opt = AdamW(lr=lr, weight_decay=weight_decay)
    n = len(batch.feats)
    curve = []
    for _ in range(epochs):
        order = rng.gen.permutation(n)
        total = 0.0
        for start in range(0, n, minibatch):
            idx = order[start:start + minibatch]
            policy.zero_grad()
            mean = policy.forward(batch.feats[idx], batch.hist[idx], feature_scale)
            loss, grad = bc_loss(mean, batch.anchors[idx])
            policy.backward(grad)
            opt.step(policy.parameter_dict(), policy.gradient_dict())
            total += loss * len(idx)
        curve.append(total / n)
    return curve
