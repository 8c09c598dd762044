"""Uncertainty-estimate heads: map a pair logit (and representation) to (score, variance).

Two heads share one contract:

* :class:`HeteroscedasticHead` models the logit as ``Normal(logit + shift(r), exp(logvar(r)))``
  and reports the Monte-Carlo mean of the logistic over that distribution. It is
  trainable; :func:`dual_loss` is the cross-entropy of that mean probability.
* :class:`CountBasedHead` is an analytic reference whose variance shrinks with the
  number of observations of each entity in the pair.

Both expose ``estimate_batch(logits, reprs, src_ids, dst_ids) -> (scores, variances)``,
which is what index reweighting and retrieval call.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Mapping, Optional, Tuple

import numpy as np

PROB_CLAMP = 1e-7


class NumericError(ArithmeticError):
    pass


@dataclass(frozen=True)
class UncertaintyEstimate:
    score: float
    variance: float

    def __post_init__(self) -> None:
        if not (np.isfinite(self.score) and np.isfinite(self.variance)):
            raise NumericError("non-finite uncertainty estimate")
        if not 0.0 <= self.score <= 1.0 or self.variance < 0.0:
            raise NumericError(f"estimate out of range: {self}")


def logistic(x):
    x = np.asarray(x, dtype=np.float64)
    # split by sign to avoid overflow in exp
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out if out.ndim else float(out)


def logit(probability: float) -> float:
    if not 0.0 < probability < 1.0:
        raise ValueError(f"logit is undefined for p={probability}")
    return float(np.log(probability) - np.log1p(-probability))


class HeteroscedasticHead:
    """Gaussian-logit head with Monte-Carlo estimates.

    Parameters are two affine maps of the pair representation: a shift added to
    the incoming logit and the log-variance of the logit. ``eps`` holds the fixed
    standard-normal draws used by :meth:`estimate`, so estimates are a pure
    function of the inputs once the head is constructed.
    """

    def __init__(self, width: int, samples: int = 64, seed: int = 0, init: str = "zero",
                 rng: Optional[np.random.Generator] = None) -> None:
        if samples < 1:
            raise ValueError("samples must be positive")
        self.width = int(width)
        self.samples = int(samples)
        self.seed = int(seed)
        self.eps = np.random.default_rng(self.seed).standard_normal(self.samples)
        self.w_mu = np.zeros(self.width)
        self.b_mu = np.zeros(1)
        self.w_lv = np.zeros(self.width)
        self.b_lv = np.zeros(1)
        if init == "random":
            rng = rng or np.random.default_rng(self.seed + 1)
            bound = 1.0 / np.sqrt(max(self.width, 1))
            self.w_mu = rng.uniform(-bound, bound, self.width)
            self.w_lv = rng.uniform(-bound, bound, self.width)
        elif init != "zero":
            raise ValueError(f"unknown init {init!r}")

    PARAM_NAMES = ("w_mu", "b_mu", "w_lv", "b_lv")

    def params(self) -> Dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in self.PARAM_NAMES}

    def with_samples(self, samples: int) -> "HeteroscedasticHead":
        """Same parameters, different number of Monte-Carlo draws."""
        head = HeteroscedasticHead(self.width, samples=samples, seed=self.seed)
        for name in self.PARAM_NAMES:
            setattr(head, name, getattr(self, name).copy())
        return head

    def _check(self) -> None:
        for name in self.PARAM_NAMES:
            if not np.isfinite(getattr(self, name)).all():
                raise NumericError(f"head parameter {name} is not finite")

    def _moments(self, logits, reprs):
        reprs = np.atleast_2d(np.asarray(reprs, dtype=np.float64))
        if reprs.shape[1] != self.width:
            raise ValueError(f"representation width {reprs.shape[1]} != head width {self.width}")
        mu = np.asarray(logits, dtype=np.float64).reshape(-1) + reprs @ self.w_mu + self.b_mu[0]
        logvar = reprs @ self.w_lv + self.b_lv[0]
        return mu, logvar

    def estimate_batch(self, logits, reprs, src_ids=None, dst_ids=None, eps=None):
        self._check()
        mu, logvar = self._moments(logits, reprs)
        sigma = np.exp(0.5 * logvar)
        eps = self.eps if eps is None else eps
        eps = np.broadcast_to(eps, (len(mu), np.shape(eps)[-1]))
        scores = logistic(mu[:, None] + sigma[:, None] * eps).mean(axis=1)
        return scores, np.exp(logvar)

    def estimate(self, logit: float, representation) -> UncertaintyEstimate:
        scores, variances = self.estimate_batch([logit], [representation])
        return UncertaintyEstimate(float(scores[0]), float(variances[0]))

    def loss_and_grads(self, logits, reprs, labels, eps=None):
        """Mean DUAL-style loss over a batch with gradients.

        Returns ``(loss, grads, d_logits, d_reprs)`` where ``grads`` is keyed like
        :meth:`params`, and ``d_logits``/``d_reprs`` are the gradients with respect
        to the incoming logits and representations.
        """
        mu, logvar = self._moments(logits, reprs)
        reprs = np.atleast_2d(np.asarray(reprs, dtype=np.float64))
        labels = np.asarray(labels, dtype=np.float64).reshape(-1)
        n = len(mu)
        eps = self.eps if eps is None else eps
        eps = np.broadcast_to(eps, (n, np.shape(eps)[-1]))
        sigma = np.exp(0.5 * logvar)
        s = logistic(mu[:, None] + sigma[:, None] * eps)
        p = s.mean(axis=1)
        clipped = (p < PROB_CLAMP) | (p > 1.0 - PROB_CLAMP)
        pc = np.clip(p, PROB_CLAMP, 1.0 - PROB_CLAMP)
        losses = -(labels * np.log(pc) + (1.0 - labels) * np.log1p(-pc))
        d_p = np.where(clipped, 0.0, (pc - labels) / (pc * (1.0 - pc))) / n
        ds = s * (1.0 - s)
        d_mu = d_p * ds.mean(axis=1)
        d_lv = d_p * (ds * eps).mean(axis=1) * 0.5 * sigma
        grads = {
            "w_mu": reprs.T @ d_mu,
            "b_mu": np.array([d_mu.sum()]),
            "w_lv": reprs.T @ d_lv,
            "b_lv": np.array([d_lv.sum()]),
        }
        d_reprs = np.outer(d_mu, self.w_mu) + np.outer(d_lv, self.w_lv)
        return float(losses.mean()), grads, d_mu, d_reprs

    def loss(self, logit: float, representation, label: int) -> float:
        return dual_loss(self, logit, representation, label)


def heteroscedastic_estimate(head: HeteroscedasticHead, logit_value: float, representation) -> UncertaintyEstimate:
    return head.estimate(logit_value, representation)


def dual_loss(head: HeteroscedasticHead, logit_value: float, representation, label: int) -> float:
    if label not in (0, 1):
        raise ValueError("label must be 0 or 1")
    loss, _, _, _ = head.loss_and_grads([logit_value], [representation], [label])
    return loss


class CountBasedHead:
    """Variance ``v0 / (1 + count)`` per entity, summed over the pair.

    ``source_counts`` applies to the first id of a pair and ``target_counts`` to
    the second; for item-to-item use they are the same map.
    """

    def __init__(self, base_variance: float = 1.0, counts: Optional[Mapping[int, int]] = None,
                 source_counts: Optional[Mapping[int, int]] = None) -> None:
        if base_variance <= 0:
            raise ValueError("base_variance must be positive")
        self.base_variance = float(base_variance)
        self.target_counts = dict(counts or {})
        self.source_counts = self.target_counts if source_counts is None else dict(source_counts)

    def entity_variance(self, entity: int, source: bool = False) -> float:
        counts = self.source_counts if source else self.target_counts
        return self.base_variance / (1.0 + counts.get(int(entity), 0))

    def _variances(self, counts: Mapping[int, int], ids) -> np.ndarray:
        c = np.fromiter((counts.get(int(i), 0) for i in np.atleast_1d(ids)), dtype=np.float64)
        return self.base_variance / (1.0 + c)

    def estimate_batch(self, logits, reprs=None, src_ids=None, dst_ids=None):
        logits = np.asarray(logits, dtype=np.float64).reshape(-1)
        src = np.broadcast_to(np.atleast_1d(src_ids), logits.shape)
        dst = np.broadcast_to(np.atleast_1d(dst_ids), logits.shape)
        var = self._variances(self.source_counts, src) + self._variances(self.target_counts, dst)
        return logistic(logits), var

    def estimate_pair(self, id_a: int, id_b: int, raw_score: float) -> UncertaintyEstimate:
        scores, var = self.estimate_batch([raw_score], None, [id_a], [id_b])
        return UncertaintyEstimate(float(scores[0]), float(var[0]))


def count_based_estimate(head: CountBasedHead, id_a: int, id_b: int, raw_score: float) -> UncertaintyEstimate:
    return head.estimate_pair(id_a, id_b, raw_score)


def estimate_batch(head, logits, reprs, src_ids, dst_ids) -> Tuple[np.ndarray, np.ndarray]:
    """Uniform entry point; ``head=None`` means a point estimate with zero variance."""
    if head is None:
        logits = np.asarray(logits, dtype=np.float64).reshape(-1)
        return logistic(logits), np.zeros(len(logits))
    return head.estimate_batch(logits, reprs, src_ids, dst_ids)
