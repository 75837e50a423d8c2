"""Source and target objectives. Each returns the scalar loss and its gradient(s).

Neighbourhood objectives treat the memory bank and neighbour indices as
constants: gradients flow through the current batch's predictions only.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def softmax(z: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(z))


def softmax_backward(p: np.ndarray, gp: np.ndarray) -> np.ndarray:
    """Pull a gradient w.r.t. probabilities back to logits."""
    return p * (gp - (p * gp).sum(axis=1, keepdims=True))


def smoothed_targets(labels, n_classes: int, alpha: float = 0.1) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValueError(f"labels must lie in [0, {n_classes})")
    q = np.full((len(labels), n_classes), alpha / n_classes)
    q[np.arange(len(labels)), labels] += 1.0 - alpha
    return q


def source_pretrain_loss(logits, labels, alpha: float = 0.1):
    """Cross-entropy against label-smoothed targets, averaged over the batch."""
    if not 0.0 <= alpha < 1.0:
        raise ValueError("alpha must lie in [0, 1)")
    n, k = logits.shape
    q = smoothed_targets(labels, k, alpha)
    lp = log_softmax(logits)
    loss = -(q * lp).sum() / n
    return float(loss), (np.exp(lp) - q) / n


def entropy(p: np.ndarray) -> np.ndarray:
    return -(p * np.log(np.clip(p, 1e-300, None))).sum(axis=-1)


def shot_loss(logits):
    """Information maximization: mean per-sample entropy minus entropy of the mean prediction."""
    n = logits.shape[0]
    if n < 2:
        raise ValueError("the diversity term needs a batch of at least two samples")
    lp = log_softmax(logits)
    p = np.exp(lp)
    h = -(p * lp).sum(axis=1)
    pbar = p.mean(axis=0)
    lbar = np.log(pbar)
    loss = h.mean() + (pbar * lbar).sum()
    # d/dz of H(p_i) is -p (log p + H)
    g_cond = -p * (lp + h[:, None]) / n
    g_div = softmax_backward(p, np.broadcast_to((lbar + 1.0) / n, p.shape))
    return float(loss), g_cond + g_div


def shot_pseudo_labels(features: np.ndarray, probs: np.ndarray, rounds: int = 1) -> np.ndarray:
    """Weighted-centroid clustering in cosine space (the self-training half of SHOT)."""
    f = features / (np.linalg.norm(features, axis=1, keepdims=True) + 1e-8)
    w = probs
    for _ in range(rounds + 1):
        cent = w.T @ f / (w.sum(axis=0)[:, None] + 1e-8)
        cent /= np.linalg.norm(cent, axis=1, keepdims=True) + 1e-8
        labels = np.argmax(f @ cent.T, axis=1)
        w = np.eye(probs.shape[1])[labels]
    return labels


def pseudo_label_loss(logits, labels):
    return source_pretrain_loss(logits, labels, alpha=0.0)


# -- neighbourhood objectives ----------------------------------------------------

@dataclass
class MemoryBank:
    """L2-normalized features and softmax scores for every target sample."""

    features: np.ndarray
    scores: np.ndarray

    @classmethod
    def build(cls, features, logits) -> "MemoryBank":
        return cls(normalize(features), softmax(logits))

    def update(self, idx, features, logits) -> None:
        self.features[idx] = normalize(features)
        self.scores[idx] = softmax(logits)

    def __len__(self):
        return len(self.features)


def normalize(f: np.ndarray) -> np.ndarray:
    return f / np.maximum(np.linalg.norm(f, axis=1, keepdims=True), 1e-12)


def default_k(batch_size: int) -> int:
    return 3 if batch_size < 32 else 5


def nearest(query: np.ndarray, bank: np.ndarray, k: int, exclude=None) -> np.ndarray:
    """Indices of the ``k`` most cosine-similar bank rows (ties broken by index)."""
    sim = normalize(query) @ bank.T
    if exclude is not None:
        sim[np.arange(len(sim)), exclude] = -np.inf
    k = min(k, bank.shape[0] - (1 if exclude is not None else 0))
    if k < 1:
        raise ValueError("memory bank holds no candidate neighbours")
    return np.argsort(-sim, axis=1, kind="stable")[:, :k]


def nrc_weights(bank: MemoryBank, idx, k: int, k_expand: int | None = None, r: float = 0.1):
    """Neighbour index sets and affinities.

    Reciprocal neighbours (the query is among the neighbour's own k nearest)
    get weight 1, others ``r``. Each neighbour's own neighbours form the
    expanded set with weight ``r``; the query itself is dropped from it.
    """
    idx = np.asarray(idx)
    if len(bank) == 0:
        raise ValueError("memory bank is empty")
    k_expand = k if k_expand is None else k_expand
    near = nearest(bank.features[idx], bank.features, k, exclude=idx)
    flat = near.reshape(-1)
    near_near = nearest(bank.features[flat], bank.features, max(k, k_expand), exclude=flat)
    recip = (near_near[:, :k] == np.repeat(idx, near.shape[1])[:, None]).any(axis=1)
    w_near = np.where(recip, 1.0, r).reshape(near.shape)
    expand = near_near[:, :k_expand].reshape(len(idx), -1)
    w_expand = np.where(expand == idx[:, None], 0.0, r)
    return near, w_near, expand, w_expand


def nrc_loss(logits, bank: MemoryBank, idx, k: int = 5, k_expand: int | None = None, r: float = 0.1):
    """Affinity-weighted KL(S_j || p_i) consistency plus ``sum pbar log pbar`` diversity."""
    n = logits.shape[0]
    near, w_near, expand, w_expand = nrc_weights(bank, idx, k, k_expand, r)
    lp = log_softmax(logits)
    p = np.exp(lp)
    loss = 0.0
    gp_lp = np.zeros_like(p)  # gradient w.r.t. log p
    for nb, w in ((near, w_near), (expand, w_expand)):
        s = bank.scores[nb]  # n, k, K
        s_log_s = (s * np.log(np.clip(s, 1e-300, None))).sum(axis=2)
        cross = np.einsum("nkc,nc->nk", s, lp)
        loss += (w * (s_log_s - cross)).sum() / n
        gp_lp -= np.einsum("nk,nkc->nc", w, s) / n
    pbar = p.mean(axis=0)
    lbar = np.log(pbar)
    loss += (pbar * lbar).sum()
    # log-softmax pullback: g_z = g - p * sum(g)
    g = gp_lp - p * gp_lp.sum(axis=1, keepdims=True)
    g += softmax_backward(p, np.broadcast_to((lbar + 1.0) / n, p.shape))
    return float(loss), g


def aad_lambda(progress: float, beta: float = 5.0, alpha: float = 1.0) -> float:
    return float(alpha * (1.0 + 10.0 * progress) ** (-beta))


def aad_loss(logits, bank: MemoryBank, idx, k: int = 5, lam: float = 1.0):
    """Attraction ``-sum_j <S_j, p_i>`` to k nearest bank entries plus ``lam`` times
    the in-batch dispersion ``sum_{m != i} <p_i, p_m>``, both averaged over the batch."""
    n = logits.shape[0]
    near = nearest(np.asarray(bank.features[np.asarray(idx)]), bank.features, k, exclude=np.asarray(idx))
    p = softmax(logits)
    s_sum = bank.scores[near].sum(axis=1)
    attract = -(s_sum * p).sum() / n
    gram = p @ p.T
    disperse = (gram.sum() - np.trace(gram)) / n
    loss = attract + lam * disperse
    gp = -s_sum / n + lam * 2.0 * (p.sum(axis=0, keepdims=True) - p) / n
    return float(loss), softmax_backward(p, gp)


# -- masking and imputation -----------------------------------------------------

def temporal_mask(shape, ratio: float, rng: np.random.Generator) -> np.ndarray:
    """Boolean mask hiding one contiguous block of ``round(ratio * L)`` steps per sample."""
    if not 0.0 < ratio < 1.0:
        raise ValueError("mask ratio must lie in (0, 1)")
    n, _, length = shape
    span = max(1, int(round(ratio * length)))
    starts = rng.integers(0, length - span + 1, size=n)
    t = np.arange(length)
    hide = (t[None, :] >= starts[:, None]) & (t[None, :] < starts[:, None] + span)
    return np.broadcast_to(hide[:, None, :], shape).copy()


def imputation_loss(clean, imputed):
    """Mean over the batch of the squared distance; returns grads for both arguments."""
    n = clean.shape[0]
    d = imputed - clean
    loss = float((d * d).sum() / n)
    return loss, -2.0 * d / n, 2.0 * d / n


def mapu_losses(model, x, hide: np.ndarray, weight: float = 0.5, train: bool = True, rng=None):
    """IM loss on clean inputs plus ``weight`` times the imputation auxiliary.

    The imputer is treated as frozen. Returns ``(total, im, imputation, grads)``
    with gradients for backbone and classifier parameters.
    """
    xm = np.where(hide, 0.0, x)
    logits, feats, cache = model.forward(x, train=train, rng=rng)
    _, feats_m, cache_m = model.forward(xm, train=train, rng=rng)
    imp, icache = model.impute(feats_m)
    im, g_logits = shot_loss(logits)
    aux, g_clean, g_imp = imputation_loss(feats, imp)
    g_fm, _ = model.impute_backward(icache, weight * g_imp)
    grads = model.backward(cache, g_logits, weight * g_clean)
    grads_m = model.backward(cache_m, None, g_fm)
    for k, v in grads_m.items():
        grads[k] = grads[k] + v
    return im + weight * aux, im, aux, grads
