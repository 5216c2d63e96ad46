"""Bundled toy world: a multi-domain target model with domain-expert drafters.

Tokens are split into domain blocks plus an end-of-sequence token. The
target's next-token rows keep a conversation inside its domain and favour
one successor token. Each drafter mixes a weak shared table with a domain
table that copies the target inside its own domain and is flat
elsewhere, so it is confident exactly where it is also right.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import EmbeddingTable, Vocabulary, normalize
from .models import DomainProfile, TabularModel, specialize
from .scheduler import Request

DOMAINS = ("physics", "medicine", "finance")


@dataclass
class World:
    vocab: Vocabulary
    embeddings: EmbeddingTable
    target: TabularModel
    drafters: list
    domains: tuple
    domain_tokens: dict


def build_world(seed: int = 0, domains=DOMAINS, tokens_per_domain: int = 5,
                bias: float = 0.8, peak: float = 0.7, eos_prob: float = 0.02,
                base_skill: float = 0.15, embedding_dim: int = 8) -> World:
    rng = np.random.default_rng(seed)
    nd = len(domains)
    size = nd * tokens_per_domain + 1
    eos = size - 1
    names = [f"{d[:3]}{i}" for d in domains for i in range(tokens_per_domain)] + ["<eos>"]
    vocab = Vocabulary(tuple(names), eos)
    block = {d: list(range(k * tokens_per_domain, (k + 1) * tokens_per_domain))
             for k, d in enumerate(domains)}
    owner = {t: d for d, toks in block.items() for t in toks}

    uniform = np.full(size, 1.0 / size)
    target_rows, base_rows = {}, {}
    for t in range(size):
        if t == eos:
            target_rows[(t,)] = uniform
            base_rows[(t,)] = uniform
            continue
        toks = block[owner[t]]
        succ = toks[(toks.index(t) + int(rng.integers(1, len(toks)))) % len(toks)]
        row = np.zeros(size)
        rest = [x for x in toks if x != succ]
        row[rest] = rng.dirichlet(np.ones(len(rest))) * (1.0 - peak - eos_prob)
        row[succ] = peak
        row[eos] = eos_prob
        target_rows[(t,)] = normalize(row)
        base_rows[(t,)] = normalize(base_skill * row + (1.0 - base_skill) * rng.dirichlet(np.ones(size)))
    target = TabularModel(1, target_rows, uniform, name="target")
    base = TabularModel(1, base_rows, uniform, name="base")

    drafters = []
    for d in domains:
        rows = {}
        for t in range(size):
            if t != eos and owner[t] == d:
                rows[(t,)] = target_rows[(t,)]
            else:
                rows[(t,)] = uniform
        domain_table = TabularModel(1, rows, uniform, name=f"{d}-table")
        drafters.append(specialize(base, DomainProfile(d, bias), domain_table))
        drafters[-1].name = f"drafter-{d}"

    centers = {d: rng.normal(size=embedding_dim) for d in domains}
    vecs = []
    for t in range(size):
        c = centers[owner[t]] if t != eos else np.zeros(embedding_dim)
        vecs.append(c + 0.5 * rng.normal(size=embedding_dim))
    return World(vocab, EmbeddingTable(vecs), target, drafters, tuple(domains), block)


def make_workload(world: World, n: int, seed: int = 0, prompt_len: int = 256,
                  max_new: int = 128, arrival_gap_ms: float = 0.0) -> list[Request]:
    """Requests with in-domain prompts sampled from the target (EOS suppressed)."""
    rng = np.random.default_rng(seed)
    reqs = []
    for i in range(n):
        dom = world.domains[int(rng.integers(len(world.domains)))]
        tok = int(rng.choice(world.domain_tokens[dom]))
        prompt = [tok]
        for _ in range(prompt_len - 1):
            row = np.array(world.target.next_distribution(prompt), dtype=np.float64)
            row[world.vocab.eos_id] = 0.0
            prompt.append(int(rng.choice(row.size, p=row / row.sum())))
        reqs.append(Request(i, tuple(prompt), max_new, arrival_ms=i * arrival_gap_ms, domain=dom))
    return reqs
