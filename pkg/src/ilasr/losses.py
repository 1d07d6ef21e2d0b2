"""Training objectives: CTC, response distillation, explainability distillation, EWC.

Batched losses reduce with a mean over samples (``reduction="mean"``) or
return one value per sample (``reduction="none"``).  Single-sample inputs use
the per-utterance orientation: posteriors are K x M, attention maps d_h x K.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import tensor as tn
from .errors import (ConfigError, DomainError, GraphError, InfeasibleAlignmentError,
                     ShapeError)
from .model import BLANK, Checkpoint, EncoderOutput, Posteriors, collate, forward
from .tensor import Tensor

__all__ = [
    "Posteriors", "LossWeights", "ImportanceArtifacts", "ctc_loss", "ctc_loss_bruteforce",
    "min_alignment_length", "soften", "rbkd_loss", "greedy_log_prob", "importance_map",
    "ebkd_loss", "ewc_penalty", "fisher_estimate", "aggregate_loss", "entropy",
]

LOG_FLOOR = 1e-12
NORM_EPS = 1e-8
BRUTEFORCE_LIMIT = 4 ** 8

DEFAULT_T, DEFAULT_BETA, DEFAULT_GAMMA = 3.0, 0.03, 500.0


@dataclass(frozen=True)
class LossWeights:
    T: float = DEFAULT_T
    beta: float = DEFAULT_BETA
    gamma: float = DEFAULT_GAMMA
    lambda_ewc: float = 0.0

    def __post_init__(self):
        for name in ("T", "beta", "gamma", "lambda_ewc"):
            v = getattr(self, name)
            if not math.isfinite(v):
                raise ConfigError(f"loss weight {name} must be finite, got {v}")
        if self.T <= 0:
            raise ConfigError(f"temperature T must be > 0, got {self.T}")
        for name in ("beta", "gamma", "lambda_ewc"):
            if getattr(self, name) < 0:
                raise ConfigError(f"loss weight {name} must be >= 0, got {getattr(self, name)}")


@dataclass
class ImportanceArtifacts:
    alpha: np.ndarray      # (B, K, d_h), d log p / d A
    Q: Tensor              # (B, K, d_h), ReLU(alpha * A)
    log_p: np.ndarray      # (B,), greedy log prediction probability
    mask: np.ndarray       # (B, K)


def _as_posteriors(p) -> Posteriors:
    return p if isinstance(p, Posteriors) else Posteriors.from_probs(p)


def _reduce(per_sample: Tensor, reduction: str) -> Tensor:
    if reduction == "mean":
        return per_sample.mean()
    if reduction == "none":
        return per_sample
    raise ValueError(f"unknown reduction {reduction!r}")


# -- CTC ------------------------------------------------------------------

def min_alignment_length(y: Sequence[int]) -> int:
    """Frames needed to emit y: one per label plus a blank between equal neighbours."""
    return len(y) + sum(1 for a, b in zip(y, y[1:]) if a == b)


def _check_labels(labels, lengths, M, blank):
    for b, y in enumerate(labels):
        for lab in y:
            if lab == blank or not 0 <= lab < M:
                raise DomainError(f"label {lab} of sample {b} outside [1, {M - 1}] (blank is {blank})")
        need = min_alignment_length(y)
        if lengths[b] < need:
            raise InfeasibleAlignmentError(
                f"infeasible alignment for sample {b}: {lengths[b]} frames < {need} required "
                f"for labels {list(y)}")


def _shift(a: np.ndarray, k: int) -> np.ndarray:
    out = np.full_like(a, -np.inf)
    out[:, k:] = a[:, :-k]
    return out


def _ctc_lattice(lp: np.ndarray, lengths: np.ndarray, labels, blank: int):
    """Log-space forward/backward over the blank-extended label lattice.

    Returns (log P per sample, occupancy gradient d(-log P)/d lp).
    alpha includes the emission at frame t, beta does not, so
    exp(alpha + beta - log P) is the posterior occupancy of lattice state s at t.
    """
    B, K, M = lp.shape
    U = np.array([len(y) for y in labels])
    L = 2 * U + 1
    Lmax = int(L.max())
    ext = np.full((B, Lmax), blank, dtype=np.int64)
    for b, y in enumerate(labels):
        ext[b, 1:2 * len(y):2] = y
    s_idx = np.arange(Lmax)
    valid = s_idx[None, :] < L[:, None]
    skip = np.zeros((B, Lmax), dtype=bool)
    skip[:, 2:] = (ext[:, 2:] != blank) & (ext[:, 2:] != ext[:, :-2])
    skip &= valid
    emit = np.take_along_axis(lp, np.broadcast_to(ext[:, None, :], (B, K, Lmax)), axis=2)
    emit = np.where(valid[:, None, :], emit, -np.inf)

    alpha = np.full((B, K, Lmax), -np.inf)
    alpha[:, 0, 0] = emit[:, 0, 0]
    if Lmax > 1:
        alpha[:, 0, 1] = emit[:, 0, 1]
    for t in range(1, K):
        prev = alpha[:, t - 1]
        acc = np.logaddexp(prev, _shift(prev, 1))
        if Lmax > 2:
            acc = np.logaddexp(acc, np.where(skip, _shift(prev, 2), -np.inf))
        alpha[:, t] = acc + emit[:, t]

    rows = np.arange(B)
    last = alpha[rows, lengths - 1]  # (B, Lmax)
    end1 = last[rows, L - 1]
    end2 = np.where(L >= 2, last[rows, np.maximum(L - 2, 0)], -np.inf)
    logP = np.logaddexp(end1, end2)

    init = np.full((B, Lmax), -np.inf)
    init[rows, L - 1] = 0.0
    init[rows[L >= 2], (L - 2)[L >= 2]] = 0.0
    beta = np.full((B, K, Lmax), -np.inf)
    skip_from = np.zeros((B, Lmax), dtype=bool)
    skip_from[:, :-2] = skip[:, 2:]
    nxt = np.full((B, Lmax), -np.inf)
    for t in range(K - 1, -1, -1):
        if t + 1 < K:
            v = beta[:, t + 1] + emit[:, t + 1]
            rec = np.logaddexp(v, np.concatenate([v[:, 1:], np.full((B, 1), -np.inf)], axis=1))
            if Lmax > 2:
                v2 = np.concatenate([v[:, 2:], np.full((B, 2), -np.inf)], axis=1)
                rec = np.logaddexp(rec, np.where(skip_from, v2, -np.inf))
        else:
            rec = nxt
        beta[:, t] = np.where((lengths - 1 == t)[:, None], init,
                              np.where((t < lengths - 1)[:, None], rec, -np.inf))

    with np.errstate(invalid="ignore"):
        occ = np.exp(alpha + beta - logP[:, None, None])
    occ = np.nan_to_num(occ, nan=0.0)
    onehot = np.zeros((B, Lmax, M))
    onehot[rows[:, None], s_idx[None, :], ext] = valid.astype(np.float64)
    grad = -np.einsum("bts,bsm->btm", occ, onehot)
    return logP, grad


def ctc_loss(posteriors, labels, blank_id: int = BLANK, reduction: str = "mean") -> Tensor:
    """Negative log of the summed probability of all CTC paths collapsing to the labels.

    ``labels`` is one label sequence (for single-sample posteriors) or a list
    of sequences.  Masked frames are excluded; each sample's frames must be
    a prefix of the padded axis.
    """
    post = _as_posteriors(posteriors)
    lp_t = post.log_probs
    B, K, M = lp_t.shape
    if B == 1 and (len(labels) == 0 or np.ndim(labels[0]) == 0):
        labels = [labels]
    labels = [list(map(int, y)) for y in labels]
    if len(labels) != B:
        raise ShapeError(f"ctc_loss: {len(labels)} label sequences for batch of {B}")
    lengths = post.mask.sum(axis=1).astype(np.int64)
    if np.any(lengths < 1):
        raise ShapeError("ctc_loss: every sample needs at least one frame")
    _check_labels(labels, lengths, M, blank_id)
    with np.errstate(invalid="ignore"):  # NaN inputs propagate; the trainer aborts on them
        logP, g_lp = _ctc_lattice(lp_t.data, lengths, labels, blank_id)
    if np.any(np.isneginf(logP)):
        raise InfeasibleAlignmentError("infeasible alignment: no path has non-zero probability")
    per = Tensor._result(-logP, "ctc", (lp_t,), lambda g: (g[:, None, None] * g_lp,))
    return _reduce(per, reduction)


def _collapse(path: Sequence[int], blank: int) -> list[int]:
    out, prev = [], None
    for c in path:
        if c != prev and c != blank:
            out.append(c)
        prev = c
    return out


def ctc_loss_bruteforce(posteriors, labels, blank_id: int = BLANK) -> float:
    """CTC loss by literal enumeration of all M^K paths (single sample, test oracle)."""
    probs = posteriors.probs[0] if isinstance(posteriors, Posteriors) else np.asarray(posteriors, float)
    if probs.ndim != 2:
        raise ShapeError(f"ctc_loss_bruteforce: expects one K x M matrix, got {probs.shape}")
    K, M = probs.shape
    if M ** K > BRUTEFORCE_LIMIT:
        raise ValueError(f"ctc_loss_bruteforce: {M}^{K} paths exceeds the enumeration bound "
                         f"{BRUTEFORCE_LIMIT}")
    target = [int(v) for v in labels]
    total = 0.0
    for path in itertools.product(range(M), repeat=K):
        if _collapse(path, blank_id) == target:
            total += math.prod(probs[k, c] for k, c in enumerate(path))
    if total == 0.0:
        raise InfeasibleAlignmentError(f"infeasible alignment: no length-{K} path collapses to {target}")
    return -math.log(total)


# -- response-based distillation ------------------------------------------

def soften(posteriors, T: float) -> Posteriors:
    """Temperature softening p ∝ π^(1/T), computed as log_softmax(log π / T)."""
    if not T > 0:
        raise DomainError(f"soften: temperature must be > 0, got {T}")
    post = _as_posteriors(posteriors)
    return Posteriors(tn.log_softmax(post.log_probs * (1.0 / T), axis=-1), post.mask)


def entropy(posteriors) -> np.ndarray:
    """Per-frame Shannon entropy (nats) of (B, K, M) posteriors."""
    post = _as_posteriors(posteriors)
    p, lp = post.probs, post.log_probs.data
    return -(p * lp).sum(axis=-1)


def _check_pair(op, a: Posteriors, b: Posteriors):
    if a.log_probs.shape != b.log_probs.shape:
        raise ShapeError(f"{op}: teacher {a.log_probs.shape} and student {b.log_probs.shape} differ")
    if not np.array_equal(a.mask, b.mask):
        raise ShapeError(f"{op}: teacher and student frame masks differ")


def rbkd_loss(teacher, student, T: float, reduction: str = "mean") -> Tensor:
    """Cross-entropy of softened student posteriors under softened teacher posteriors.

    The teacher side is a constant; gradients reach only the student.
    """
    t, s = _as_posteriors(teacher), _as_posteriors(student)
    _check_pair("rbkd_loss", t, s)
    p1 = np.exp(soften(Posteriors(tn.detach(t.log_probs), t.mask), T).log_probs.data)
    weight = p1 * s.mask[..., None]
    lp2 = soften(s, T).log_probs
    per = -(lp2 * weight).sum(axis=(1, 2))
    return _reduce(per, reduction)


# -- explainability-based distillation ------------------------------------

def greedy_log_prob(posteriors) -> Tensor:
    """Per-sample sum over real frames of the frame-wise max log posterior, shape (B,)."""
    post = _as_posteriors(posteriors)
    best, _ = tn.max_with_argmax(post.log_probs, axis=-1)
    return (best * post.mask.astype(np.float64)).sum(axis=1)


def importance_map(output: EncoderOutput, student: bool = False) -> ImportanceArtifacts:
    """Importance map alpha = d log p / d A and attention map Q = ReLU(alpha * A).

    alpha is always a constant.  For the teacher (``student=False``) Q is
    detached as well; for the student Q stays connected to the graph through A.
    The forward graph is retained so the caller can still backpropagate.
    """
    A = output.feature_map
    if not A.requires_grad:
        raise GraphError("importance_map: feature map has no graph; re-run forward with "
                         "tap_feature_map=True")
    log_p = greedy_log_prob(output.posteriors)
    if not log_p.requires_grad:
        raise GraphError("importance_map: posteriors are not connected to the feature map; "
                         "re-run forward")
    (alpha,) = tn.grad(log_p.sum(), [A], retain_graph=True)
    Q = tn.relu(A * alpha)
    if not student:
        Q = tn.detach(Q)
    return ImportanceArtifacts(alpha, Q, log_p.data.copy(), output.frame_mask)


def _as_q(Q) -> Tensor:
    Q = Q if isinstance(Q, Tensor) else Tensor(Q)
    if Q.ndim == 2:  # single sample, d_h x K
        Q = Q.transpose(1, 0).reshape(1, Q.shape[1], Q.shape[0])
    if Q.ndim != 3:
        raise ShapeError(f"ebkd_loss: attention maps must be (d_h, K) or (B, K, d_h), got {Q.shape}")
    return Q


def ebkd_loss(teacher_Q, student_Q, mask=None, reduction: str = "mean",
              eps: float = NORM_EPS) -> Tensor:
    """Mean over real frames of || Q2/|Q2| - Q1/|Q1| ||_2 per sample.

    Frame vectors with norm below ``eps`` normalise to zero.
    """
    q1, q2 = _as_q(teacher_Q), _as_q(student_Q)
    if q1.shape != q2.shape:
        raise ShapeError(f"ebkd_loss: teacher {q1.shape} and student {q2.shape} attention maps differ")
    if mask is None:
        mask = np.ones(q1.shape[:2], dtype=bool)
    mask = np.asarray(mask, dtype=bool).reshape(q1.shape[:2])
    n1 = tn.detach(tn.row_normalize(q1, eps))
    dist = tn.row_norm(tn.row_normalize(q2, eps) - n1)
    frames = np.maximum(mask.sum(axis=1), 1).astype(np.float64)
    per = (dist * mask.astype(np.float64)).sum(axis=1) * (1.0 / frames)
    return _reduce(per, reduction)


# -- EWC baseline ----------------------------------------------------------

def ewc_penalty(params: Mapping[str, Tensor], reference: Mapping[str, np.ndarray],
                fisher: Mapping[str, np.ndarray]) -> Tensor:
    """Sum_j F_j (theta_j - theta*_j)^2 over all parameters."""
    if set(params) != set(reference) or set(params) != set(fisher):
        raise ShapeError("ewc_penalty: parameter, reference and Fisher names differ")
    total = Tensor(0.0)
    for name in sorted(params):
        p = params[name] if isinstance(params[name], Tensor) else Tensor(params[name])
        ref, f = np.asarray(reference[name]), np.asarray(fisher[name])
        if p.shape != ref.shape or p.shape != f.shape:
            raise ShapeError(f"ewc_penalty: '{name}' shapes {p.shape}, {ref.shape}, {f.shape} differ")
        d = p - ref
        total = total + (d * d * f).sum()
    return total


def fisher_estimate(checkpoint: Checkpoint, samples, num_samples: int | None = None,
                    seed: int = 0) -> dict[str, np.ndarray]:
    """Empirical diagonal Fisher: mean over samples of the squared CTC gradient.

    ``samples`` are objects with ``x`` (F x S) and ``y``.  With ``num_samples``
    None or >= the dataset size every sample is used; otherwise a seeded
    subset without replacement.
    """
    samples = list(samples)
    if not samples:
        raise ValueError("fisher_estimate: dataset is empty")
    if num_samples is not None and num_samples < len(samples):
        pick = np.random.default_rng(seed).choice(len(samples), size=num_samples, replace=False)
        samples = [samples[i] for i in sorted(pick)]
    acc = {k: np.zeros_like(v) for k, v in checkpoint.params.items()}
    names = list(checkpoint.params)
    for smp in samples:
        params = checkpoint.tensors(requires_grad=True)
        x, lengths = collate([smp.x])
        out = forward(checkpoint, x, lengths, params=params, tap_feature_map=False)
        loss = ctc_loss(out.posteriors, [list(smp.y)])
        grads = tn.grad(loss, [params[k] for k in names], retain_graph=False)
        for k, g in zip(names, grads):
            acc[k] += g * g
    return {k: v / len(samples) for k, v in acc.items()}


# -- aggregate -------------------------------------------------------------

def aggregate_loss(ctc, rbkd=None, ebkd=None, weights: LossWeights = LossWeights(), ewc=None):
    """ctc + beta*rbkd + gamma*ebkd (+ lambda*ewc).

    Terms with zero weight are skipped entirely rather than multiplied by
    zero, so a degenerate weighting reproduces plain CTC training exactly.
    """
    total = ctc
    for w, term, name in ((weights.beta, rbkd, "rbkd"), (weights.gamma, ebkd, "ebkd"),
                          (weights.lambda_ewc, ewc, "ewc")):
        if w == 0:
            continue
        if term is None:
            raise ValueError(f"aggregate_loss: weight for {name} is {w} but the term is missing")
        total = total + w * term
    return total
