"""Independent reference implementations used only by the tests."""

from itertools import combinations


def literal_trim(gammas, gamma_max):
    """Decrement the largest budget (first index on ties) until the sum fits."""
    g = list(gammas)
    while sum(g) > gamma_max:
        i = g.index(max(g))
        g[i] -= 1
    return g


def brute_force_objective(pool, cfg, lat):
    """Minimum objective over all 2^R - 1 non-empty subsets, or None."""
    best = None
    n = len(pool)
    for size in range(1, n + 1):
        for idx in combinations(range(n), size):
            if sum(pool[i].mem for i in idx) > cfg.m_max or size > cfg.gamma_max:
                continue
            g = literal_trim([pool[i].gamma for i in idx], cfg.gamma_max)
            l = max(pool[i].seq_len for i in idx)
            ttl = max(lat.ssm(size, l, x) for x in g) + lat.llm(size, l, sum(g))
            if ttl > cfg.t_max:
                continue
            obj = ttl / size + cfg.lam * sum(g)
            if best is None or obj < best:
                best = obj
    return best
