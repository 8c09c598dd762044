"""Independent reference implementations shared by the module tests and the acceptance suite."""

import math
from fractions import Fraction

import numpy as np

from uncertain_ann.core import Interaction, InteractionLog
from uncertain_ann.eval.synthetic import SyntheticSpec, generate_synthetic
from uncertain_ann.swing import compute_swing
from uncertain_ann.trainer import ModelConfig, TrainedModel, build_samples, joint_loss_and_grads, make_batch, \
    swing_positive_rows


def click_log(pairs):
    return InteractionLog([Interaction(u, i, 0, t, "click") for t, (u, i) in enumerate(pairs)])


def random_click_log(rng, max_users=50, max_items=50):
    users, items = int(rng.integers(2, max_users + 1)), int(rng.integers(2, max_items + 1))
    pairs = {(int(rng.integers(users)), int(rng.integers(items))) for _ in range(int(rng.integers(5, 250)))}
    return click_log(sorted(pairs))


def brute_swing(log, alpha):
    """Direct double sum over ordered user pairs for every item pair."""
    I = {}
    for it in log:
        if it.event == "click":
            I.setdefault(it.user, set()).add(it.item)
    items = sorted({i for s in I.values() for i in s})
    out = {}
    for a in items:
        for b in items:
            if a >= b:
                continue
            terms = []
            for u in I:
                for v in I:
                    if u != v and {a, b} <= I[u] and {a, b} <= I[v]:
                        terms.append(1.0 / (alpha + len(I[u] & I[v])))
            if terms:
                out[(a, b)] = math.fsum(terms)
    return out


# ------------------------------------------------------------------ metrics


def ref_recall(retrieved, truth, n):
    hits = 0
    for t in truth:
        found = False
        for r in retrieved[:n]:
            if r == t:
                found = True
        hits += found
    return hits / len(truth)


def ref_new_cate(retrieved, history):
    seen = []
    for c in history:
        if c not in seen:
            seen.append(c)
    fresh = []
    for c in retrieved:
        if c not in seen and c not in fresh:
            fresh.append(c)
    return len(fresh) / len(seen)


def exact_sum(terms):
    """Exact sum of the float terms, rounded once."""
    total = Fraction(0)
    for t in terms:
        total += Fraction(t)
    return float(total)


def ref_entropy(items, category_of):
    counts = {}
    for i in items:
        c = category_of[i]
        counts[c] = counts.get(c, 0) + 1
    terms = []
    for c in counts:
        p = counts[c] / len(items)
        terms.append(p * math.log2(p))
    return -exact_sum(terms)


def random_metric_fixture(rng):
    items = int(rng.integers(5, 80))
    category_of = {i: int(rng.integers(0, rng.integers(1, 12))) for i in range(items)}
    retrieved = [int(i) for i in rng.choice(items, int(rng.integers(1, items)), replace=False)]
    truth = {int(i) for i in rng.choice(items, int(rng.integers(1, 4)), replace=False)}
    history = [int(i) for i in rng.choice(items, int(rng.integers(1, 10)))]
    return category_of, retrieved, truth, history, int(rng.integers(1, 100))


# -------------------------------------------------------------- gradients


def head_fd_error(head, logits, reprs, labels, eps, h=1e-4):
    """Worst relative gap between analytic and central-difference gradients of the head loss."""
    _, grads, d_logits, d_reprs = head.loss_and_grads(logits, reprs, labels, eps)
    worst = 0.0
    pairs = [(getattr(head, n), grads[n]) for n in head.PARAM_NAMES] + [(logits, d_logits), (reprs, d_reprs)]
    for arr, g in pairs:
        flat, gflat = arr.reshape(-1), np.asarray(g).reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            lp = head.loss_and_grads(logits, reprs, labels, eps)[0]
            flat[i] = old - h
            lm = head.loss_and_grads(logits, reprs, labels, eps)[0]
            flat[i] = old
            num = (lp - lm) / (2 * h)
            worst = max(worst, abs(num - gflat[i]) / max(abs(num), abs(gflat[i]), 1e-6))
    return worst


def random_head_problem(rng, trial):
    from uncertain_ann.uncertainty import HeteroscedasticHead

    width = int(rng.integers(1, 6))
    n = int(rng.integers(1, 5))
    head = HeteroscedasticHead(width, samples=int(rng.integers(1, 9)), seed=trial, init="random")
    head.b_mu = rng.normal(0, 0.5, 1)
    head.b_lv = rng.normal(-0.5, 0.5, 1)
    logits = rng.normal(0, 1.5, n)
    reprs = rng.normal(0, 1, (n, width))
    labels = rng.integers(0, 2, n).astype(float)
    return head, logits, reprs, labels


def random_problem(seed):
    """A tiny randomized model and batch, with biases and head parameters off zero."""
    rng = np.random.default_rng(seed)
    data = generate_synthetic(SyntheticSpec(num_users=int(rng.integers(4, 10)), num_items=int(rng.integers(4, 9)),
                                            mean_history=4, min_history=2, num_clusters=2, seed=seed))
    cfg = ModelConfig(embedding_dim=int(rng.integers(2, 4)), item_tower_layers=(int(rng.integers(2, 5)), 3),
                      user_head_layers=(int(rng.integers(2, 5)), 3, 1), train_samples=int(rng.integers(1, 4)),
                      sample_neg=2, u2i_negatives=2, temperature=float(rng.uniform(0.5, 3.0)),
                      lambda_i2i=float(rng.uniform(0.05, 1.0)), seed=seed)
    model = TrainedModel(sorted(data.log.items), cfg)
    for name in model.param_names():
        if name.startswith("ue_") or name.endswith("_b"):
            model.set_param(name, rng.normal(0, 0.3, np.shape(model.get_param(name))))
    samples = build_samples(model, data.log)[:6]
    sw = compute_swing(data.log)
    batch = make_batch(model, samples, swing_positive_rows(model, sw, cfg.sample_pos), rng)
    return model, batch


def joint_fd_error(model, batch, lambda_i2i=None, h=1e-6):
    """Worst relative gap over every parameter coordinate of the joint loss."""
    _, _, _, grads = joint_loss_and_grads(model, batch, lambda_i2i)
    worst = 0.0
    for name in model.param_names():
        p = np.array(model.get_param(name), dtype=np.float64)
        flat = p.reshape(-1)
        an = np.asarray(grads[name]).reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            model.set_param(name, flat.reshape(p.shape))
            lp = joint_loss_and_grads(model, batch, lambda_i2i)[0]
            flat[i] = old - h
            model.set_param(name, flat.reshape(p.shape))
            lm = joint_loss_and_grads(model, batch, lambda_i2i)[0]
            flat[i] = old
            model.set_param(name, flat.reshape(p.shape))
            num = (lp - lm) / (2 * h)
            worst = max(worst, abs(num - an[i]) / max(abs(num), abs(an[i]), 1e-4))
    return worst


# ------------------------------------------------------------------ ranking


def exact_spearman(x, y):
    """Spearman's rho on average ranks, in exact rational arithmetic."""
    def ranks(v):
        order = sorted(range(len(v)), key=lambda i: v[i])
        r = [Fraction(0)] * len(v)
        i = 0
        while i < len(order):
            j = i
            while j + 1 < len(order) and v[order[j + 1]] == v[order[i]]:
                j += 1
            for k in range(i, j + 1):
                r[order[k]] = Fraction(i + j + 2, 2)
            i = j + 1
        return r

    rx, ry = ranks(x), ranks(y)
    n = len(x)
    mx, my = sum(rx) / n, sum(ry) / n
    cov = sum((a - mx) * (b - my) for a, b in zip(rx, ry))
    vx = sum((a - mx) ** 2 for a in rx)
    vy = sum((b - my) ** 2 for b in ry)
    if vx == 0 or vy == 0:
        return Fraction(0)
    # for tie-free ranks vx == vy, so the ratio is exact; otherwise fall back to a float root
    if vx == vy:
        return cov / vx
    return Fraction(float(cov) / math.sqrt(float(vx) * float(vy)))
