"""Training objectives and reference contrastive losses.

The trainable losses all return a LossResult carrying the scalar loss,
per-term breakdown, and analytic logit gradients for the in-distribution
block and (where applicable) the out-of-distribution block. Gradients
are averaged over the batch, so the loss is the mean per-example value.

The contrastive losses at the bottom (ntxent, pairwise, triplet) are
reference implementations: loss values only, no gradients.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .nn import softmax


@dataclass
class LossResult:
    loss: float
    d_logits_in: np.ndarray
    d_logits_out: np.ndarray | None
    terms: dict[str, float] = field(default_factory=dict)


@dataclass
class ObjectiveParams:
    """Knobs for the similarity-regularised objectives.

    lam weights the cosine term of ce_cosine (lam = -1 gives the minimax
    form) and the uniformity term of outlier_exposure. gamma is the
    ranking margin and may be negative: mean cosine of probability rows
    lives in [0, 1], so a non-negative gamma keeps the hinge always
    active.
    """

    lam: float = -1.0
    gamma: float = -0.5
    lambda1: float = 0.5
    lambda2: float = 0.1
    alpha: float = 0.95
    k: int = 3
    tau: float = 0.5

    def __post_init__(self):
        if self.k < 2:
            raise ValueError(f"k must be >= 2, got {self.k}")
        if self.tau <= 0:
            raise ValueError(f"tau must be > 0, got {self.tau}")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("lambda1 and lambda2 must be >= 0")
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError(f"alpha must be in (0, 1], got {self.alpha}")


def _check_logits(logits, name: str) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim != 2 or z.shape[0] == 0:
        raise ValueError(f"{name} must be a non-empty 2-D batch, got shape {z.shape}")
    if not np.all(np.isfinite(z)):
        raise ValueError(f"non-finite entries in {name}")
    return z


def _check_labels(labels, n: int, k: int) -> np.ndarray:
    y = np.asarray(labels)
    if y.shape != (n,):
        raise ValueError(f"labels shape {y.shape} != ({n},)")
    if not np.issubdtype(y.dtype, np.integer):
        raise ValueError("labels must be integers")
    if y.min() < 0 or y.max() >= k:
        raise ValueError(f"labels must lie in [0, {k}), got range "
                         f"[{y.min()}, {y.max()}]")
    return y


def _check_pair(logits_in, logits_out) -> tuple[np.ndarray, np.ndarray]:
    z_in = _check_logits(logits_in, "logits_in")
    z_out = _check_logits(logits_out, "logits_out")
    if z_in.shape != z_out.shape:
        raise ValueError(
            f"logits_in shape {z_in.shape} != logits_out shape {z_out.shape}"
        )
    return z_in, z_out


def _log_softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def _softmax_vjp(p: np.ndarray, g: np.ndarray) -> np.ndarray:
    # dL/dz for L with dL/dp = g, p = softmax(z): p * (g - <g, p>)
    dot = (g * p).sum(axis=1, keepdims=True)
    return p * (g - dot)


def cosine_similarity(u, v) -> float:
    """Cosine of the angle between two vectors. Errors on zero norm."""
    u = np.asarray(u, dtype=np.float64).ravel()
    v = np.asarray(v, dtype=np.float64).ravel()
    if u.shape != v.shape:
        raise ValueError(f"shape mismatch: {u.shape} vs {v.shape}")
    nu = np.linalg.norm(u)
    nv = np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        raise ValueError("cosine similarity undefined for zero-norm vectors")
    return float(u @ v / (nu * nv))


def _row_cosines(p: np.ndarray, q: np.ndarray):
    """Per-row cosine of two probability batches plus cached norms."""
    pn = np.linalg.norm(p, axis=1, keepdims=True)
    qn = np.linalg.norm(q, axis=1, keepdims=True)
    if np.any(pn == 0.0) or np.any(qn == 0.0):
        # unreachable for softmax outputs, guarded anyway
        raise ValueError("zero-norm probability row")
    s = (p * q).sum(axis=1, keepdims=True) / (pn * qn)
    return s, pn, qn


def _cosine_grads(p, q, s, pn, qn, weight: float):
    """Logit gradients of weight * mean_i cos(p_i, q_i)."""
    gp = weight * (q / (pn * qn) - s * p / pn**2)
    gq = weight * (p / (pn * qn) - s * q / qn**2)
    return _softmax_vjp(p, gp), _softmax_vjp(q, gq)


def cross_entropy_loss(logits_in, labels) -> LossResult:
    """Mean cross-entropy on labelled in-distribution logits."""
    z = _check_logits(logits_in, "logits_in")
    n, k = z.shape
    y = _check_labels(labels, n, k)
    logp = _log_softmax(z)
    loss = float(-logp[np.arange(n), y].mean())
    d = np.exp(logp)
    d[np.arange(n), y] -= 1.0
    d /= n
    return LossResult(loss, d, None, {"ce": loss})


def ce_cosine_loss(logits_in, labels, logits_out, lam: float) -> LossResult:
    """Cross-entropy plus lam * mean row-wise cosine between the softmax
    rows of the in-distribution batch and a paired outlier batch.

    Positive lam penalises similarity between the paired predictive
    distributions; lam = -1 is the minimax form, which rewards it and in
    practice drives outlier predictions toward the uniform vector.
    """
    z_in, z_out = _check_pair(logits_in, logits_out)
    ce = cross_entropy_loss(z_in, labels)
    n = z_in.shape[0]
    p = softmax(z_in)
    q = softmax(z_out)
    s, pn, qn = _row_cosines(p, q)
    cos_term = float(lam * s.mean())
    d_in = ce.d_logits_in
    d_out = np.zeros_like(z_out)
    if lam != 0.0:
        g_in, g_out = _cosine_grads(p, q, s, pn, qn, lam / n)
        d_in = d_in + g_in
        d_out = g_out
    loss = ce.loss + cos_term
    return LossResult(loss, d_in, d_out, {"ce": ce.loss, "cosine": cos_term})


def cosine_margin_ranking_loss(
    logits_in, labels, logits_out, params: ObjectiveParams
) -> LossResult:
    """Hinged cosine ranking with uniformity and confidence anchors.

    loss = max(0, gamma + mean_i cos(p_in_i, p_out_i))
         + lambda1 * mean_i sum_c |p_out_ic - 1/k|
         + lambda2 * mean_i (p_in_i[y_i] - alpha)^2

    The hinge takes subgradient 0 at its kink. There is no explicit
    cross-entropy term; the lambda2 anchor supplies the label signal.
    """
    z_in, z_out = _check_pair(logits_in, logits_out)
    n, k = z_in.shape
    if k != params.k:
        raise ValueError(f"params.k = {params.k} but logits have {k} classes")
    y = _check_labels(labels, n, k)
    p = softmax(z_in)
    q = softmax(z_out)
    s, pn, qn = _row_cosines(p, q)

    hinge_arg = params.gamma + float(s.mean())
    hinge = max(0.0, hinge_arg)
    d_in = np.zeros_like(z_in)
    d_out = np.zeros_like(z_out)
    if hinge_arg > 0.0:
        g_in, g_out = _cosine_grads(p, q, s, pn, qn, 1.0 / n)
        d_in += g_in
        d_out += g_out

    uniform = 1.0 / k
    l1_term = float(params.lambda1 * np.abs(q - uniform).sum(axis=1).mean())
    if params.lambda1 != 0.0:
        g_l1 = (params.lambda1 / n) * np.sign(q - uniform)
        d_out += _softmax_vjp(q, g_l1)

    p_true = p[np.arange(n), y]
    l2_term = float(params.lambda2 * ((p_true - params.alpha) ** 2).mean())
    if params.lambda2 != 0.0:
        g_l2 = np.zeros_like(p)
        g_l2[np.arange(n), y] = (params.lambda2 / n) * 2.0 * (p_true - params.alpha)
        d_in += _softmax_vjp(p, g_l2)

    loss = hinge + l1_term + l2_term
    return LossResult(
        loss, d_in, d_out, {"hinge": hinge, "l1": l1_term, "l2": l2_term}
    )


def outlier_exposure_loss(logits_in, labels, logits_out, lam: float) -> LossResult:
    """Cross-entropy plus lam * mean cross-entropy of outlier predictions
    against the uniform distribution over the k classes."""
    if lam < 0:
        raise ValueError(f"outlier exposure weight must be >= 0, got {lam}")
    z_in, z_out = _check_pair(logits_in, logits_out)
    ce = cross_entropy_loss(z_in, labels)
    n, k = z_out.shape
    logq = _log_softmax(z_out)
    oe_term = float(lam * (-logq.mean(axis=1)).mean())
    d_out = np.zeros_like(z_out)
    if lam != 0.0:
        d_out = (lam / n) * (np.exp(logq) - 1.0 / k)
    loss = ce.loss + oe_term
    return LossResult(loss, ce.d_logits_in, d_out, {"ce": ce.loss, "oe": oe_term})


# ---------------------------------------------------------------------------
# Reference contrastive losses (values only, no gradients)
# ---------------------------------------------------------------------------


def ntxent_loss(latents, pairing, tau: float) -> float:
    """Normalised-temperature cross-entropy over a batch of paired latents.

    latents has 2n rows; pairing[i] names row i's positive partner. Each
    anchor's denominator ranges over every other row, the positive
    included, the anchor itself excluded.
    """
    if tau <= 0:
        raise ValueError(f"tau must be > 0, got {tau}")
    z = np.asarray(latents, dtype=np.float64)
    if z.ndim != 2 or z.shape[0] < 2 or z.shape[0] % 2 != 0:
        raise ValueError(f"latents must have an even row count >= 2, got {z.shape}")
    m = z.shape[0]
    pair = np.asarray(pairing)
    if pair.shape != (m,) or not np.issubdtype(pair.dtype, np.integer):
        raise ValueError("pairing must be an integer vector with one entry per row")
    if pair.min() < 0 or pair.max() >= m:
        raise ValueError("pairing entries out of range")
    if np.any(pair == np.arange(m)) or np.any(pair[pair] != np.arange(m)):
        raise ValueError("unpaired row: pairing must be a fixed-point-free involution")
    norms = np.linalg.norm(z, axis=1, keepdims=True)
    if np.any(norms == 0.0):
        raise ValueError("zero-norm latent row")
    zn = z / norms
    sim = (zn @ zn.T) / tau
    np.fill_diagonal(sim, -np.inf)  # anchor excluded from its own denominator
    row_max = sim.max(axis=1, keepdims=True)
    logdenom = row_max.ravel() + np.log(np.exp(sim - row_max).sum(axis=1))
    pos = sim[np.arange(m), pair]
    return float((logdenom - pos).mean())


def pairwise_ranking_loss(z_a, z_b, y: int, gamma: float) -> float:
    """Contrastive pair loss: y*d + (1-y)*max(0, gamma - d), Euclidean d."""
    if y not in (0, 1):
        raise ValueError(f"y must be 0 or 1, got {y!r}")
    if gamma < 0:
        raise ValueError(f"gamma must be >= 0, got {gamma}")
    a = np.asarray(z_a, dtype=np.float64).ravel()
    b = np.asarray(z_b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    d = float(np.linalg.norm(a - b))
    return y * d + (1 - y) * max(0.0, gamma - d)


def triplet_ranking_loss(z, z_pos, z_neg, gamma: float) -> tuple[float, str]:
    """Triplet margin loss plus the regime of the triplet.

    Returns (max(0, gamma + d_pos - d_neg), regime) where regime is
    "easy" when d_neg > d_pos + gamma, "hard" when d_neg < d_pos, and
    "semi_hard" in between.
    """
    if gamma < 0:
        raise ValueError(f"gamma must be >= 0, got {gamma}")
    anchor = np.asarray(z, dtype=np.float64).ravel()
    pos = np.asarray(z_pos, dtype=np.float64).ravel()
    neg = np.asarray(z_neg, dtype=np.float64).ravel()
    if not (anchor.shape == pos.shape == neg.shape):
        raise ValueError("anchor/positive/negative shapes differ")
    d_pos = float(np.linalg.norm(anchor - pos))
    d_neg = float(np.linalg.norm(anchor - neg))
    loss = max(0.0, gamma + d_pos - d_neg)
    if d_neg > d_pos + gamma:
        regime = "easy"
    elif d_neg < d_pos:
        regime = "hard"
    else:
        regime = "semi_hard"
    return loss, regime
