"""Post-training evaluation: semantic agreement between neural and kernel
similarities, frozen-embedding regression probes, the kernel-feature baseline,
and nearest-neighbor retrieval over embeddings.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np
import torch

from . import formula as fm
from .augment import AugmentConfig, make_equivalent_variant
from .encoder import TransformerEncoder, encode
from .errors import DepthUnreachableError, HorizonError
from .kernel import DEFAULT_SIGMA2
from .semantics import robustness_matrix, satisfies
from .signals import TrajectorySet

__all__ = [
    "CATEGORIES",
    "AgreementCategory",
    "AgreementReport",
    "ProbeReport",
    "agreement_eval",
    "mine_agreement_pairs",
    "save_pairs",
    "load_pairs",
    "compute_targets",
    "train_probe",
    "kernel_features",
    "invert_nn",
    "levenshtein",
]

CATEGORIES = ("equivalent", "non_equivalent", "lexically_similar")


@dataclass(frozen=True)
class AgreementCategory:
    name: str
    n_pairs: int
    neural_similarity: float
    kernel_similarity: float
    mae: float
    rel_neural_distance: float
    rel_kernel_distance: float


@dataclass(frozen=True)
class AgreementReport:
    categories: dict[str, AgreementCategory]

    def to_json(self) -> str:
        return json.dumps({k: asdict(v) for k, v in self.categories.items()}, indent=2)

    def format_table(self) -> str:
        rows = [
            ("Metric", *(c.replace("_", " ") for c in self.categories)),
            ("Neural similarity", *(f"{self.categories[c].neural_similarity:.3f}"
                                    for c in self.categories)),
            ("Kernel similarity", *(f"{self.categories[c].kernel_similarity:.3f}"
                                    for c in self.categories)),
            ("MAE", *(f"{self.categories[c].mae:.3f}" for c in self.categories)),
            ("Relative neural distance", *(f"{self.categories[c].rel_neural_distance:.3f}"
                                           for c in self.categories)),
            ("Relative kernel distance", *(f"{self.categories[c].rel_kernel_distance:.3f}"
                                           for c in self.categories)),
        ]
        widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
        return "\n".join(
            "  ".join(cell.ljust(w) for cell, w in zip(row, widths)) for row in rows
        )


@dataclass(frozen=True)
class ProbeReport:
    target: str
    feature_source: str
    pearson_r: float
    mae: float
    n_train: int
    n_test: int

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)


# ---------------------------------------------------------------------------
# Semantic agreement

def _unit_rows(matrix: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(matrix, axis=1, keepdims=True)
    if np.any(norms == 0.0):
        raise ValueError("zero-norm robustness vector in agreement pool")
    return matrix / norms


def agreement_eval(
    model: TransformerEncoder,
    pairs: dict[str, list[tuple[fm.Formula, fm.Formula]]],
    signals: TrajectorySet,
    sigma2: float = DEFAULT_SIGMA2,
    chunk_size: int = 64,
) -> AgreementReport:
    """Compare neural and kernel similarity per pair category.

    Distances (1 - similarity) are normalized by each method's maximum over
    the whole evaluation pool, pooled across categories.
    """
    for name in CATEGORIES:
        if not pairs.get(name):
            raise ValueError(f"empty agreement category {name!r}")

    index: dict[str, int] = {}
    formulae: list[fm.Formula] = []

    def intern(f: fm.Formula) -> int:
        key = fm.print_formula(f)
        if key not in index:
            index[key] = len(formulae)
            formulae.append(f)
        return index[key]

    pair_idx = {
        name: [(intern(a), intern(b)) for a, b in pairs[name]] for name in CATEGORIES
    }

    sequences = [
        fm.tokenize(f, model.cfg.max_len, model.cfg.agg_token, model.cfg.max_vars)
        for f in formulae
    ]
    emb = encode(model, sequences, chunk_size).astype(np.float64)
    unit_rho = _unit_rows(robustness_matrix(formulae, signals))

    sims: dict[str, tuple[np.ndarray, np.ndarray]] = {}
    for name, idx in pair_idx.items():
        ii = np.array([i for i, _ in idx])
        jj = np.array([j for _, j in idx])
        neural = np.sum(emb[ii] * emb[jj], axis=1)
        cos = np.clip(np.sum(unit_rho[ii] * unit_rho[jj], axis=1), -1.0, 1.0)
        kernel = np.exp(-(1.0 - cos) / sigma2)
        sims[name] = (neural, kernel)

    all_neural = np.concatenate([sims[n][0] for n in CATEGORIES])
    all_kernel = np.concatenate([sims[n][1] for n in CATEGORIES])
    max_dn = max(float((1.0 - all_neural).max()), 1e-12)
    max_dk = max(float((1.0 - all_kernel).max()), 1e-12)

    categories = {}
    for name in CATEGORIES:
        neural, kernel = sims[name]
        categories[name] = AgreementCategory(
            name=name,
            n_pairs=len(neural),
            neural_similarity=float(neural.mean()),
            kernel_similarity=float(kernel.mean()),
            mae=float(np.abs(neural - kernel).mean()),
            rel_neural_distance=float(((1.0 - neural) / max_dn).mean()),
            rel_kernel_distance=float(((1.0 - kernel) / max_dk).mean()),
        )
    return AgreementReport(categories)


def levenshtein(a: str, b: str) -> int:
    """Edit distance with vectorized row updates.

    The sequential insertion chain cur[j] = min(cur[j], cur[j-1] + 1) is
    resolved as j + prefix-min of (cur[k] - k).
    """
    if len(a) < len(b):
        a, b = b, a
    if not b:
        return len(a)
    bb = np.frombuffer(b.encode("utf-8"), dtype=np.uint8)
    pos = np.arange(len(bb) + 1, dtype=np.int64)
    prev = pos.copy()
    for i, ch in enumerate(a.encode("utf-8"), start=1):
        cur = np.empty_like(prev)
        cur[0] = i
        np.minimum(prev[:-1] + (bb != ch), prev[1:] + 1, out=cur[1:])
        shifted = cur - pos
        np.minimum.accumulate(shifted, out=shifted)
        prev = shifted + pos
    return int(prev[-1])


def mine_agreement_pairs(
    records,
    cfg: AugmentConfig,
    signals: TrajectorySet,
    n_per_category: int = 100,
    seed: int = 0,
    lexical_candidates: int = 48,
    kernel_cutoff: float = 0.7,
) -> dict[str, list[tuple[fm.Formula, fm.Formula]]]:
    """Build the three evaluation categories from dataset records.

    Equivalent pairs come from fresh robustness-preserving variants;
    non-equivalent pairs are random records of different seed families;
    lexically-similar pairs minimize edit distance subject to kernel
    similarity below ``kernel_cutoff``.
    """
    if len(records) < 4:
        raise ValueError("need at least four records to mine pairs")
    rng = np.random.default_rng([seed, 41])
    formulae = [fm.parse(r.formula_text) for r in records]

    equivalent = []
    attempts = 0
    while len(equivalent) < n_per_category and attempts < 50 * n_per_category:
        attempts += 1
        i = int(rng.integers(len(records)))
        try:
            variant = make_equivalent_variant(formulae[i], cfg, rng)
            fm.tokenize(variant, cfg.max_tokens)
        except (DepthUnreachableError, Exception):
            continue
        equivalent.append((formulae[i], variant))
    if len(equivalent) < n_per_category:
        raise ValueError("could not mine enough equivalent pairs")

    non_equivalent = []
    while len(non_equivalent) < n_per_category:
        i, j = rng.integers(len(records)), rng.integers(len(records))
        if records[int(i)].seed_id != records[int(j)].seed_id:
            non_equivalent.append((formulae[int(i)], formulae[int(j)]))

    pool_size = min(len(records), max(4 * n_per_category, 64))
    pool = rng.choice(len(records), size=pool_size, replace=False)
    texts = [records[int(i)].formula_text for i in pool]
    unit_rho = _unit_rows(robustness_matrix([formulae[int(i)] for i in pool], signals))

    lexically_similar = []
    anchor_order = rng.permutation(pool_size)
    for a in anchor_order:
        if len(lexically_similar) >= n_per_category:
            break
        cands = rng.choice(pool_size, size=min(lexical_candidates, pool_size), replace=False)
        best = None
        for c in cands:
            if c == a:
                continue
            cos = float(np.clip(unit_rho[a] @ unit_rho[c], -1.0, 1.0))
            if np.exp(-(1.0 - cos) / DEFAULT_SIGMA2) >= kernel_cutoff:
                continue
            dist = levenshtein(texts[a], texts[c])
            if best is None or dist < best[0]:
                best = (dist, c)
        if best is not None:
            lexically_similar.append(
                (formulae[int(pool[a])], formulae[int(pool[best[1]])])
            )
    if len(lexically_similar) < n_per_category:
        raise ValueError("could not mine enough lexically similar pairs")

    return {
        "equivalent": equivalent,
        "non_equivalent": non_equivalent,
        "lexically_similar": lexically_similar,
    }


def save_pairs(pairs, path) -> None:
    with open(path, "w") as fh:
        for name, items in pairs.items():
            for a, b in items:
                fh.write(json.dumps({
                    "category": name,
                    "formula_a": fm.print_formula(a),
                    "formula_b": fm.print_formula(b),
                }) + "\n")


def load_pairs(path) -> dict[str, list[tuple[fm.Formula, fm.Formula]]]:
    pairs: dict[str, list] = {}
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            pairs.setdefault(obj["category"], []).append(
                (fm.parse(obj["formula_a"]), fm.parse(obj["formula_b"]))
            )
    return pairs


# ---------------------------------------------------------------------------
# Regression probes

def compute_targets(formulae, signals: TrajectorySet) -> tuple[np.ndarray, np.ndarray]:
    """Per-formula average robustness and satisfaction probability.

    Satisfaction counts strictly positive robustness; exact zeros (rare on
    continuous signals) defer to the Boolean evaluator, so ties follow
    comparison strictness.
    """
    rho = robustness_matrix(formulae, signals)
    rho_bar = rho.mean(axis=1)
    p_sat = (rho > 0).mean(axis=1)
    zero_rows, zero_cols = np.nonzero(rho == 0.0)
    for i, j in zip(zero_rows, zero_cols):
        if satisfies(formulae[int(i)], signals.trajectory(int(j)), 0):
            p_sat[i] += 1.0 / signals.n
    return rho_bar, p_sat


def kernel_features(
    formulae,
    anchors,
    signals: TrajectorySet,
    sigma2: float = DEFAULT_SIGMA2,
) -> np.ndarray:
    """Classic kernel embedding: rows of kernel values against an anchor set."""
    unit_f = _unit_rows(robustness_matrix(formulae, signals))
    unit_a = _unit_rows(robustness_matrix(anchors, signals))
    cos = np.clip(unit_f @ unit_a.T, -1.0, 1.0)
    return np.exp(-(1.0 - cos) / sigma2)


def train_probe(
    features: np.ndarray,
    targets: np.ndarray,
    target_name: str = "",
    feature_source: str = "",
    seed: int = 0,
    test_fraction: float = 0.25,
    epochs: int = 1000,
    learning_rate: float = 1e-2,
) -> ProbeReport:
    """Fit a two-layer MLP (hidden = input/2, GELU, MSE) on frozen features.

    The split is by formula (row); the report carries Pearson r and MAE on
    the held-out rows.
    """
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(targets, dtype=np.float64)
    if x.ndim != 2 or y.shape != (x.shape[0],):
        raise ValueError(f"bad probe shapes {x.shape} / {y.shape}")
    if float(y.var()) == 0.0:
        raise ValueError("degenerate probe targets with zero variance")

    rng = np.random.default_rng([seed, 51])
    order = rng.permutation(x.shape[0])
    n_test = max(1, int(round(test_fraction * x.shape[0])))
    test_idx, train_idx = order[:n_test], order[n_test:]
    if train_idx.size < 2:
        raise ValueError("not enough rows to train the probe")

    mu, sd = y[train_idx].mean(), y[train_idx].std()
    sd = sd if sd > 0 else 1.0

    torch.manual_seed(seed)
    hidden = max(1, x.shape[1] // 2)
    mlp = torch.nn.Sequential(
        torch.nn.Linear(x.shape[1], hidden),
        torch.nn.GELU(),
        torch.nn.Linear(hidden, 1),
    ).to(torch.float64)
    opt = torch.optim.Adam(mlp.parameters(), lr=learning_rate)
    xt = torch.as_tensor(x[train_idx])
    yt = torch.as_tensor((y[train_idx] - mu) / sd).unsqueeze(1)
    for _ in range(epochs):
        opt.zero_grad()
        out = mlp(xt)
        loss = torch.mean((out - yt) ** 2)
        loss.backward()
        opt.step()

    with torch.no_grad():
        pred = mlp(torch.as_tensor(x[test_idx])).squeeze(1).numpy() * sd + mu
    truth = y[test_idx]
    if pred.std() == 0.0 or truth.std() == 0.0:
        r = 0.0
    else:
        r = float(np.corrcoef(pred, truth)[0, 1])
    return ProbeReport(
        target=target_name,
        feature_source=feature_source,
        pearson_r=r,
        mae=float(np.abs(pred - truth).mean()),
        n_train=int(train_idx.size),
        n_test=int(test_idx.size),
    )


# ---------------------------------------------------------------------------
# Nearest-neighbor retrieval

def invert_nn(
    query_embedding: np.ndarray,
    corpus_embeddings: np.ndarray,
    top_k: int,
) -> list[tuple[int, float]]:
    """Top-k corpus rows by cosine similarity, ties broken by corpus order."""
    corpus = np.asarray(corpus_embeddings, dtype=np.float64)
    query = np.asarray(query_embedding, dtype=np.float64).reshape(-1)
    if corpus.ndim != 2 or corpus.shape[1] != query.shape[0]:
        raise ValueError(f"bad shapes: corpus {corpus.shape}, query {query.shape}")
    if top_k > corpus.shape[0]:
        raise ValueError(f"top_k {top_k} exceeds corpus size {corpus.shape[0]}")
    if top_k <= 0:
        return []
    sims = corpus @ query
    order = np.argsort(-sims, kind="stable")[:top_k]
    return [(int(i), float(sims[i])) for i in order]
