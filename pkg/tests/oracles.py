"""Independent reference implementations shared by unit and acceptance tests."""

import itertools
from fractions import Fraction

import numpy as np

from expertflow import numerics as nx


def rel_err(a, b):
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if scale == 0 else np.linalg.norm(a - b) / scale


def op_error(fn, *shapes, seed=0, lo=-2.0, hi=2.0, h=1e-6, ranges=None):
    """Worst relative error between autodiff and central differences over all inputs of ``fn``."""
    rng = np.random.default_rng(seed)
    ranges = ranges or [(lo, hi)] * len(shapes)
    inputs = [rng.uniform(a, b, s) for s, (a, b) in zip(shapes, ranges)]
    weights = rng.normal(size=fn(*[nx.Graph(False).const(x) for x in inputs]).value.shape)

    def loss_of(vals):
        g = nx.Graph()
        nodes = [g.leaf(v, f"x{i}") for i, v in enumerate(vals)]
        return g, nx.total(nx.mul(fn(*nodes), g.const(weights)))

    g, loss = loss_of(inputs)
    grads = nx.backward(g, loss)
    worst = 0.0
    for i, x in enumerate(inputs):
        def f(theta, i=i):
            vals = list(inputs)
            vals[i] = theta
            return loss_of(vals)[1].value[0, 0]

        worst = max(worst, rel_err(grads[f"x{i}"], nx.finite_diff(f, x, h)))
    return worst


# (name, fn, shapes, value ranges or None)
OP_CASES = [
    ("exp", nx.exp, [(3, 4)], None),
    ("log", nx.log, [(3, 4)], [(0.5, 2.0)]),
    ("square", nx.square, [(3, 4)], None),
    ("sigmoid", nx.sigmoid, [(3, 4)], None),
    ("gelu", lambda a: nx.gelu(a), [(3, 4)], None),
    ("softmax_rows", nx.softmax_rows, [(3, 4)], None),
    ("logsumexp_rows", nx.logsumexp_rows, [(3, 4)], None),
    ("log_softmax_rows", nx.log_softmax_rows, [(3, 4)], None),
    ("l2_normalize_rows", nx.l2_normalize_rows, [(3, 4)], None),
    ("l2_normalize_cols", nx.l2_normalize_cols, [(3, 4)], None),
    ("total", nx.total, [(3, 4)], None),
    ("mean_all", nx.mean_all, [(3, 4)], None),
    ("row_sum", nx.row_sum, [(3, 4)], None),
    ("col_sum", nx.col_sum, [(3, 4)], None),
    ("transpose", nx.transpose, [(3, 4)], None),
    ("scale", lambda a: nx.scale(a, -1.7), [(3, 4)], None),
    ("slice_cols", lambda a: nx.slice_cols(a, 1, 3), [(3, 4)], None),
    ("take_rows", lambda a: nx.take_rows(a, [2, 0, 2]), [(3, 4)], None),
    ("pick", lambda a: nx.pick(a, [0, 3, 1]), [(3, 4)], None),
    ("matmul", nx.matmul, [(3, 4), (4, 2)], None),
    ("add", nx.add, [(3, 4), (1, 4)], None),
    ("sub", nx.sub, [(3, 4), (3, 1)], None),
    ("mul", nx.mul, [(3, 4), (3, 4)], None),
    ("div", nx.div, [(3, 4), (3, 1)], [(-2.0, 2.0), (0.5, 2.0)]),
    ("rms_norm", nx.rms_norm, [(3, 4), (1, 4)], None),
    ("concat_cols", lambda a, b: nx.concat_cols([a, b]), [(3, 2), (3, 3)], None),
    ("concat_rows", lambda a, b: nx.concat_rows([a, b]), [(2, 3), (1, 3)], None),
    ("ste_sign", lambda z: nx.mul(nx.ste_sign(z, anchor=np.array([[1.0, -1.0, 1.0, -1.0]] * 3)), z), [(3, 4)], None),
]


# --- metric oracles (exact rational arithmetic) -----------------------------


def frac_iou(a, b):
    a = [Fraction(x) for x in a]
    b = [Fraction(x) for x in b]
    inter = max(Fraction(0), min(a[1], b[1]) - max(a[0], b[0]))
    return inter / ((a[1] - a[0]) + (b[1] - b[0]) - inter)


def oracle_matching(P, G, tau):
    """Among all maximal matchings over eligible pairs, the one whose pairs,
    sorted by (-iou, pred, gold), form the lexicographically smallest list."""
    t = Fraction(str(tau))
    elig = [(i, j) for i in range(len(P)) for j in range(len(G)) if frac_iou(P[i], G[j]) >= t]
    best = None
    for r in range(len(elig) + 1):
        for combo in itertools.combinations(elig, r):
            ps, gs = [c[0] for c in combo], [c[1] for c in combo]
            if len(set(ps)) < r or len(set(gs)) < r:
                continue
            if any(i not in ps and j not in gs for i, j in elig):
                continue  # not maximal
            key = sorted((-frac_iou(P[i], G[j]), i, j) for i, j in combo)
            if best is None or key < best:
                best = key
    return best


def oracle_f1(P, G, thresholds=(0.3, 0.5, 0.7, 0.9)):
    vals = []
    for tau in thresholds:
        if not P and not G:
            vals.append(Fraction(1))
            continue
        m = len(oracle_matching(P, G, tau))
        p = Fraction(m, len(P)) if P else Fraction(0)
        r = Fraction(m, len(G)) if G else Fraction(0)
        vals.append(Fraction(0) if p + r == 0 else 2 * p * r / (p + r))
    return sum(vals) / len(vals)


def oracle_ap(scored, G, tau):
    if not G:
        return Fraction(0)
    t = Fraction(str(tau))
    ranked = sorted(scored, key=lambda it: (-it[1], it[0][0]))
    used, flags = set(), []
    for iv, _ in ranked:
        cands = [(frac_iou(iv, g), -j) for j, g in enumerate(G) if j not in used and frac_iou(iv, g) >= t]
        if cands:
            used.add(-max(cands)[1])
            flags.append(1)
        else:
            flags.append(0)
    # area under the precision/recall steps: precision times recall increment
    area, prev_recall = Fraction(0), Fraction(0)
    for k in range(1, len(flags) + 1):
        recall = Fraction(sum(flags[:k]), len(G))
        area += Fraction(sum(flags[:k]), k) * (recall - prev_recall)
        prev_recall = recall
    return area


def oracle_map(scored, G, thresholds=(0.5, 0.75)):
    return sum(oracle_ap(scored, G, t) for t in thresholds) / len(thresholds)
