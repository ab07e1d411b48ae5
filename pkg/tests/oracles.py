"""Pure-Python reference computations, independent of torch and of cpe.losses."""

import math


def ce(logits, y):
    m = max(logits)
    return math.log(math.fsum(math.exp(v - m) for v in logits)) + m - logits[y]


def balanced_ce(logits, y, pi, tau):
    return ce([l + tau * math.log(p) for l, p in zip(logits, pi)], y)


def supervised(expert_logits, labels, pi, taus):
    per = []
    for e, tau in enumerate(taus):
        rows = expert_logits[e]
        per.append(math.fsum(balanced_ce(rows[j], labels[j], pi, tau) for j in range(len(labels)))
                   / len(labels))
    return math.fsum(per), per


def group_of(y, num_classes):
    third = num_classes // 3
    if y < third:
        return "head"
    if y >= num_classes - third:
        return "tail"
    return "medium"


def cbn_term(hmt, mt, t, y, num_classes):
    g = group_of(y, num_classes)
    terms = [ce(hmt, y)]
    if g in ("medium", "tail"):
        terms.append(ce(mt, y))
    if g == "tail":
        terms.append(ce(t, y))
    return math.fsum(terms) / len(terms)


def unsupervised(expert_logits, pseudo, conf, rho, lam, branch_logits=None, num_classes=None):
    """``expert_logits[e][j]`` or, with branches, ``branch_logits[b][e][j]``."""
    per, rates = [], []
    n_exp = len(pseudo)
    for e in range(n_exp):
        b = len(pseudo[e])
        acc = []
        for j in range(b):
            if not conf[e][j] > rho:
                continue
            y = pseudo[e][j]
            if branch_logits is None:
                acc.append(ce(expert_logits[e][j], y))
            else:
                acc.append(cbn_term(branch_logits[0][e][j], branch_logits[1][e][j],
                                    branch_logits[2][e][j], y, num_classes))
        per.append(lam * math.fsum(acc) / b)
        rates.append(len(acc) / b)
    return math.fsum(per), per, rates
