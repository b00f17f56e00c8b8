"""Episodic training of the fusion head and an optional linear embedding.

The loss is softmax cross-entropy over the fused class scores, averaged over
the episode's queries. Gradients are derived by hand:

* fusion and per-branch standardization: the usual batch-norm backward,
  with the statistics taken over every (query, class) score of a branch;
* KL branch: closed-form derivatives of the Gaussian KL with respect to both
  arguments' means and covariances, pushed through the shrinkage covariance
  estimator and the mean to the embedded descriptors;
* image-to-class branch: the top-k selection is frozen at its forward-pass
  indices and only the cosines are differentiated.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import linalg
from .descriptors import LabeledDataset
from .distributions import DEFAULT_SHRINKAGE, estimate_stats, stack_stats
from .episodes import Episode, EpisodeSpec, sample_episode
from .errors import InvalidSpec, NonFiniteGradient
from .measures import cosine_matrix, i2c_similarity, kl_divergence
from .model import BN_EPS, Embedding, FusionHead, with_running_stats
from .rng import STREAM_TRAIN, stream

FUSION_PARAMS = ("w", "gamma", "beta")
GAMMA_MIN = 1e-3
TRAINABLE = ("fusion", "fusion+embedding")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    episodes_per_epoch: int = 200
    lr: float = 1e-3
    lr_decay: float = 0.5
    decay_every: int = 10
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    trainable: str = "fusion"
    spec: EpisodeSpec = EpisodeSpec(5, 1, 15)
    shrinkage: float = DEFAULT_SHRINKAGE
    k: int = 1
    cms: bool = False

    def __post_init__(self):
        if not self.lr > 0:
            raise InvalidSpec(f"learning rate must be positive, got {self.lr}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise InvalidSpec("Adam betas must lie in [0, 1)")
        if self.epochs < 0 or self.episodes_per_epoch < 1 or self.decay_every < 1:
            raise InvalidSpec("epochs must be >= 0, episodes_per_epoch and decay_every >= 1")
        if self.trainable not in TRAINABLE:
            raise InvalidSpec(f"trainable must be one of {TRAINABLE}, got {self.trainable!r}")

    def lr_at(self, epoch: int) -> float:
        return self.lr * self.lr_decay ** (epoch // self.decay_every)


# --------------------------------------------------------------------- forward


@dataclass
class _Forward:
    """Everything the backward pass needs from one forward pass."""

    x_support: list[np.ndarray]  # raw pooled descriptors per class
    y_support: list[np.ndarray]  # embedded pooled descriptors per class
    x_query: list[np.ndarray]
    y_query: list[np.ndarray]
    x_comp: list[np.ndarray] = field(default_factory=list)
    y_comp: list[np.ndarray] = field(default_factory=list)
    dist: np.ndarray = None
    i2c: np.ndarray = None
    xhat: tuple = (None, None)
    sigma: tuple = (1.0, 1.0)
    z: tuple = (None, None)
    fused: np.ndarray = None
    probs: np.ndarray = None
    loss: float = 0.0


def _stats_list(sets, shrinkage):
    return stack_stats([estimate_stats(s, shrinkage) for s in sets])


def _forward(episode: Episode, embedding: Embedding, head: FusionHead, config: TrainConfig) -> _Forward:
    ways = episode.ways
    x_support = [np.concatenate([np.asarray(i, np.float64) for i in imgs], axis=0) for imgs in episode.support]
    x_query = [np.asarray(q, np.float64) for q in episode.query]
    f = _Forward(
        x_support,
        [embedding.apply(x) for x in x_support],
        x_query,
        [embedding.apply(x) for x in x_query],
    )
    nq = len(x_query)
    q_stats = _stats_list(f.y_query, config.shrinkage).reshape(nq, 1)
    s_stats = _stats_list(f.y_support, config.shrinkage).reshape(1, ways)
    dist = np.asarray(kl_divergence(q_stats, s_stats))
    if config.cms:
        f.x_comp = [np.concatenate([x for j, x in enumerate(x_support) if j != i]) for i in range(ways)]
        f.y_comp = [embedding.apply(x) for x in f.x_comp]
        comp = _stats_list(f.y_comp, config.shrinkage).reshape(1, ways)
        dist = dist - np.asarray(kl_divergence(q_stats, comp))
    f.dist = dist
    f.i2c = np.array([[i2c_similarity(y, z, config.k) for z in f.y_support] for y in f.y_query])

    xhat, sigma, z = [], [], []
    for b, scores in enumerate((f.dist, f.i2c)):
        if head.mode == "off":
            xhat.append(scores)
            sigma.append(1.0)
            z.append(scores)
        else:
            # training always normalizes with the episode's own statistics
            s = math.sqrt(float(np.var(scores)) + BN_EPS)
            xh = (scores - np.mean(scores)) / s
            xhat.append(xh)
            sigma.append(s)
            z.append(head.gamma[b] * xh + head.beta[b])
    f.xhat, f.sigma, f.z = tuple(xhat), tuple(sigma), tuple(z)
    f.fused = -head.w[0] * z[0] + head.w[1] * z[1]

    shifted = f.fused - np.max(f.fused, axis=1, keepdims=True)
    log_norm = np.log(np.sum(np.exp(shifted), axis=1))
    log_probs = shifted - log_norm[:, None]
    f.probs = np.exp(log_probs)
    f.loss = float(-np.mean(log_probs[np.arange(nq), episode.query_labels]))
    return f


def episode_loss(
    episode: Episode, embedding: Embedding, head: FusionHead, config: TrainConfig
) -> tuple[float, np.ndarray]:
    """Mean cross-entropy of the fused scores, and the fused scores themselves."""
    f = _forward(episode, embedding, head, config)
    return f.loss, f.fused


# -------------------------------------------------------------------- backward


def _inverse(stats) -> np.ndarray:
    eye = np.broadcast_to(np.eye(stats.dim), stats.cov.shape)
    inv = linalg.spd_solve(stats.factor, eye)
    return 0.5 * (inv + np.swapaxes(inv, -1, -2))


def _kl_backward(g, q_mean, q_cov, q_inv, s_mean, s_inv):
    """Gradients of ``sum_jc g[j,c] KL(Q_j || S_c)`` w.r.t. both sides' stats."""
    delta = s_mean[None, :, :] - q_mean[:, None, :]  # (J, C, c)
    pd = np.einsum("cab,jcb->jca", s_inv, delta)
    g_q_mean = -np.einsum("jc,jca->ja", g, pd)
    g_s_mean = np.einsum("jc,jca->ca", g, pd)
    g_q_cov = 0.5 * (np.einsum("jc,cab->jab", g, s_inv) - np.sum(g, axis=1)[:, None, None] * q_inv)
    weighted_q = np.einsum("jc,jab->cab", g, q_cov)
    g_s_cov = 0.5 * (
        np.sum(g, axis=0)[:, None, None] * s_inv
        - s_inv @ weighted_q @ s_inv
        - np.einsum("jc,jca,jcb->cab", g, pd, pd)
    )
    return g_q_mean, g_q_cov, g_s_mean, g_s_cov


def _stats_backward(y: np.ndarray, g_mean: np.ndarray, g_cov: np.ndarray, shrinkage: float) -> np.ndarray:
    """Gradient w.r.t. descriptors ``y`` given gradients w.r.t. its mean and
    regularized covariance."""
    n, c = y.shape
    g_cov = 0.5 * (g_cov + g_cov.T)
    g_scatter = (1.0 - shrinkage) * g_cov + (shrinkage * np.trace(g_cov) / c) * np.eye(c)
    centred = y - y.mean(axis=0)
    return (2.0 / n) * centred @ g_scatter + g_mean[None, :] / n


def _unit_backward(y: np.ndarray, g_unit: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(y, axis=-1, keepdims=True)
    safe = np.where(norms > 0, norms, 1.0)
    u = y / safe
    g = (g_unit - u * np.sum(u * g_unit, axis=-1, keepdims=True)) / safe
    return np.where(norms > 0, g, 0.0)


def _unit(y):
    norms = np.linalg.norm(y, axis=-1, keepdims=True)
    return np.divide(y, norms, out=np.zeros_like(y), where=norms > 0)


def grad(
    episode: Episode, embedding: Embedding, head: FusionHead, config: TrainConfig
) -> tuple[float, dict[str, np.ndarray]]:
    """Loss and its exact gradients for every trainable parameter group.

    Keys are ``w``, ``gamma``, ``beta`` and, when the embedding is linear and
    ``config.trainable`` includes it, ``embedding``.
    """
    f, grads = _grad(episode, embedding, head, config)
    return f.loss, grads


def _grad(episode, embedding, head, config):
    f = _forward(episode, embedding, head, config)
    nq, ways = f.probs.shape
    onehot = np.zeros_like(f.probs)
    onehot[np.arange(nq), episode.query_labels] = 1.0
    g_fused = (f.probs - onehot) / nq

    grads = {
        "w": np.array([-np.sum(g_fused * f.z[0]), np.sum(g_fused * f.z[1])]),
        "gamma": np.zeros(2),
        "beta": np.zeros(2),
    }
    g_z = (-head.w[0] * g_fused, head.w[1] * g_fused)
    g_branch = []
    for b in range(2):
        if head.mode == "off":
            g_branch.append(g_z[b])
            continue
        xh = f.xhat[b]
        grads["gamma"][b] = np.sum(g_z[b] * xh)
        grads["beta"][b] = np.sum(g_z[b])
        g_xh = head.gamma[b] * g_z[b]
        g_branch.append((g_xh - np.mean(g_xh) - xh * np.mean(g_xh * xh)) / f.sigma[b])

    if config.trainable == "fusion+embedding" and embedding.kind == "linear":
        grads["embedding"] = _embedding_grad(f, g_branch[0], g_branch[1], config)

    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"gradient of {name} is not finite")
    return f, grads


def _embedding_grad(f: _Forward, g_dist: np.ndarray, g_i2c: np.ndarray, config: TrainConfig) -> np.ndarray:
    lam = config.shrinkage
    q_stats = _stats_list(f.y_query, lam)
    s_stats = _stats_list(f.y_support, lam)
    q_inv, s_inv = _inverse(q_stats), _inverse(s_stats)
    g_y_query = [np.zeros_like(y) for y in f.y_query]
    g_y_support = [np.zeros_like(y) for y in f.y_support]

    gqm, gqc, gsm, gsc = _kl_backward(g_dist, q_stats.mean, q_stats.cov, q_inv, s_stats.mean, s_inv)
    if config.cms:
        c_stats = _stats_list(f.y_comp, lam)
        c_inv = _inverse(c_stats)
        hqm, hqc, hcm, hcc = _kl_backward(-g_dist, q_stats.mean, q_stats.cov, q_inv, c_stats.mean, c_inv)
        gqm, gqc = gqm + hqm, gqc + hqc
        g_matrix = sum(
            _stats_backward(y, hcm[i], hcc[i], lam).T @ x for i, (y, x) in enumerate(zip(f.y_comp, f.x_comp))
        )
    else:
        g_matrix = 0.0

    for j, y in enumerate(f.y_query):
        g_y_query[j] += _stats_backward(y, gqm[j], gqc[j], lam)
    for i, y in enumerate(f.y_support):
        g_y_support[i] += _stats_backward(y, gsm[i], gsc[i], lam)

    k = config.k
    u_support = [_unit(y) for y in f.y_support]
    g_u_support = [np.zeros_like(u) for u in u_support]
    for j, y in enumerate(f.y_query):
        u = _unit(y)
        g_u = np.zeros_like(u)
        for i, us in enumerate(u_support):
            weight = g_i2c[j, i]
            if weight == 0.0:
                continue
            cos = cosine_matrix(y, f.y_support[i])
            top = np.argsort(-cos, axis=1, kind="stable")[:, :k]
            sel = np.zeros_like(cos)
            np.put_along_axis(sel, top, weight, axis=1)
            g_u += sel @ us
            g_u_support[i] += sel.T @ u
        g_y_query[j] += _unit_backward(y, g_u)
    for i, y in enumerate(f.y_support):
        g_y_support[i] += _unit_backward(y, g_u_support[i])

    for gy, x in zip(g_y_query, f.x_query):
        g_matrix = g_matrix + gy.T @ x
    for gy, x in zip(g_y_support, f.x_support):
        g_matrix = g_matrix + gy.T @ x
    return np.asarray(g_matrix)


# ------------------------------------------------------------------------ Adam


@dataclass(frozen=True)
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params: dict[str, np.ndarray]) -> "AdamState":
        return cls({k: np.zeros_like(p) for k, p in params.items()}, {k: np.zeros_like(p) for k, p in params.items()})


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update; returns new params and state."""
    if params.keys() != grads.keys():
        raise KeyError(f"parameter groups {sorted(params)} vs gradients {sorted(grads)}")
    t = state.step + 1
    new_params, m, v = {}, {}, {}
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != np.shape(p):
            raise ValueError(f"{name}: gradient shape {g.shape} != parameter shape {np.shape(p)}")
        m[name] = beta1 * state.m[name] + (1 - beta1) * g
        v[name] = beta2 * state.v[name] + (1 - beta2) * g * g
        m_hat = m[name] / (1 - beta1**t)
        v_hat = v[name] / (1 - beta2**t)
        new_params[name] = p - lr * m_hat / (np.sqrt(v_hat) + eps)
    return new_params, AdamState(m, v, t)


# ----------------------------------------------------------------------- train


@dataclass(frozen=True)
class TrainResult:
    embedding: Embedding
    head: FusionHead
    loss_curve: list[float]

    def to_dict(self) -> dict:
        return {"embedding": self.embedding.to_dict(), **self.head.to_dict()}


def get_params(embedding: Embedding, head: FusionHead, trainable: str) -> dict[str, np.ndarray]:
    params = {name: getattr(head, name).copy() for name in FUSION_PARAMS}
    if trainable == "fusion+embedding":
        params["embedding"] = embedding.matrix.copy()
    return params


def set_params(embedding: Embedding, head: FusionHead, params: dict[str, np.ndarray]):
    head = replace(
        head,
        w=params["w"],
        gamma=np.maximum(params["gamma"], GAMMA_MIN),
        beta=params["beta"],
    )
    if "embedding" in params:
        embedding = Embedding.linear(params["embedding"])
    return embedding, head


def train(
    dataset: LabeledDataset,
    split,
    config: TrainConfig,
    seed: int,
    embedding: Embedding | None = None,
    head: FusionHead | None = None,
) -> TrainResult:
    """Adam over ``epochs x episodes_per_epoch`` sampled episodes.

    Episode ``i`` of epoch ``e`` is drawn from stream ``(seed, TRAIN, e, i)``.
    The learning rate is multiplied by ``lr_decay`` every ``decay_every``
    epochs. Returns the final parameters and the mean loss of each epoch.
    """
    embedding = embedding or Embedding()
    head = head or FusionHead()
    if config.trainable == "fusion+embedding" and embedding.kind == "identity":
        embedding = Embedding.linear(np.eye(dataset.dim))
    params = get_params(embedding, head, config.trainable)
    state = AdamState.zeros_like(params)
    split = list(split)
    curve = []
    for epoch in range(config.epochs):
        lr = config.lr_at(epoch)
        losses = []
        for i in range(config.episodes_per_epoch):
            episode = sample_episode(dataset, split, config.spec, stream(seed, STREAM_TRAIN, epoch, i))
            f, grads = _grad(episode, embedding, head, config)
            if head.mode != "off":
                head = with_running_stats(head, f.dist, f.i2c)
            grads = {name: grads[name] for name in params}
            params, state = adam_step(params, grads, state, lr, config.beta1, config.beta2, config.eps_adam)
            embedding, head = set_params(embedding, head, params)
            params = get_params(embedding, head, config.trainable)
            losses.append(f.loss)
        curve.append(float(np.mean(losses)))
    return TrainResult(embedding, head, curve)

