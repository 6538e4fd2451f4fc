"""Corpus generation: stochastic AST rewrites, numeric perturbations,
post-serialization refinement, and stratified dataset assembly.

Rewrites split into two groups. Robustness-preserving rules (not-injection,
De Morgan, time partitioning, temporal identity, distributivity, predicate
inversion, and the duality shift applied at refinement time) leave the
robustness vector unchanged on the evaluation grid and feed the "equivalent"
stratum. Until nesting changes semantics, so it only participates in the
"hybrid" stratum alongside numeric perturbations.

Time partitioning composes nested windows additively (a = a1 + a2,
b = b1 + b2) with split points snapped to the configured evaluation grid, so
the rewrite is exact after index rounding, not just in continuous time.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from importlib import resources
from typing import Callable, Sequence

import numpy as np

from . import formula as fm
from .errors import (
    ConfigError,
    DepthUnreachableError,
    GenerationError,
    HorizonError,
    TokenOverflowError,
)
from .semantics import robustness
from .signals import Trajectory, sample_mu0

__all__ = [
    "AugmentConfig",
    "DatasetRecord",
    "RULE_NAMES",
    "PRESERVING_RULES",
    "apply_rule",
    "rewrite_once",
    "make_equivalent_variant",
    "perturb",
    "refine_serialized",
    "build_dataset",
    "save_dataset",
    "load_dataset",
    "load_seed_formulas",
    "default_seed_path",
    "stratum_counts",
]

VARIANT_KINDS = ("equivalent", "parametric", "hybrid")


@dataclass
class AugmentConfig:
    """Knobs for the rewrite cascade, perturbations, and stratification."""

    p_not_injection: float = 0.001
    p_de_morgan: float = 0.099
    p_time_partition: float = 0.35
    p_until_nesting: float = 0.25
    p_temporal_identity: float = 0.05
    p_distributivity: float = 0.15
    p_predicate_inversion: float = 0.08
    p_no_change: float = 0.02

    min_depth: int = 5
    p_vibration: float = 0.5
    p_duality_shift: float = 0.4
    vibration_threshold_range: tuple[float, float] = (0.9, 1.1)
    vibration_width_range: tuple[float, float] = (0.6, 1.8)
    shift_threshold_range: tuple[float, float] = (-6.0, 6.0)
    shift_time_range: tuple[float, float] = (-15.0, 40.0)

    frac_equivalent: float = 0.104
    frac_parametric: float = 0.434
    frac_hybrid: float = 0.457

    num_vars: int = 3
    signal_points: int = 101
    signal_horizon: float = 100.0

    until_threshold_std: float = 2.0
    until_start_max: float = 5.0
    until_width_range: tuple[float, float] = (1.0, 10.0)

    # matched to the encoder's default max_len so datasets tokenize as-is
    max_tokens: int = 128
    max_record_attempts: int = 200
    seed: int = 0

    @property
    def time_step(self) -> float:
        return self.signal_horizon / (self.signal_points - 1)

    def rule_probabilities(self) -> dict[str, float]:
        return {
            "not_injection": self.p_not_injection,
            "de_morgan": self.p_de_morgan,
            "time_partition": self.p_time_partition,
            "until_nesting": self.p_until_nesting,
            "temporal_identity": self.p_temporal_identity,
            "distributivity": self.p_distributivity,
            "predicate_inversion": self.p_predicate_inversion,
            "no_change": self.p_no_change,
        }

    def validate(self) -> None:
        total = sum(self.rule_probabilities().values())
        if abs(total - 1.0) > 1e-9:
            raise ConfigError(f"rule probabilities sum to {total}, expected 1")
        strata = self.frac_equivalent + self.frac_parametric + self.frac_hybrid
        if abs(strata - 1.0) > 0.005:
            raise ConfigError(f"stratification targets sum to {strata}, expected ~1")
        if self.min_depth < 1:
            raise ConfigError(f"min_depth must be >= 1, got {self.min_depth}")
        if self.signal_points < 2 or self.signal_horizon <= 0 or self.num_vars < 1:
            raise ConfigError("invalid probe-signal shape")


# ---------------------------------------------------------------------------
# Tree surgery helpers

def _node_paths(f: fm.Formula) -> list[tuple[tuple[int, ...], fm.Formula, fm.Formula | None]]:
    """All (path, node, parent) triples in pre-order."""
    out = []

    def walk(node, path, parent):
        out.append((path, node, parent))
        for i, child in enumerate(fm.children(node)):
            walk(child, path + (i,), node)

    walk(f, (), None)
    return out


def _replace(f: fm.Formula, path: tuple[int, ...], new: fm.Formula) -> fm.Formula:
    if not path:
        return new
    head, rest = path[0], path[1:]
    if isinstance(f, (fm.Not, fm.Eventually, fm.Always)):
        return replace(f, child=_replace(f.child, rest, new))
    if isinstance(f, (fm.And, fm.Or, fm.Until)):
        if head == 0:
            return replace(f, left=_replace(f.left, rest, new))
        return replace(f, right=_replace(f.right, rest, new))
    raise ValueError(f"path {path} does not exist in {f!r}")


def _round5(x: float) -> float:
    return round(float(x), 5)


# ---------------------------------------------------------------------------
# Individual rewrite rules: an applicability predicate over (node, parent) and
# a builder that produces the rewritten node.

def _can_partition(node, parent, cfg) -> bool:
    if not isinstance(node, (fm.Always, fm.Eventually)):
        return False
    # need at least two grid steps of width to split into two positive widths
    return int(math.floor(node.interval.width / cfg.time_step)) >= 2


def _build_time_partition(node, cfg, rng):
    iv = node.interval
    dt = cfg.time_step
    width_steps = int(math.floor(iv.width / dt))
    start_steps = int(math.floor(iv.start / dt))
    m = int(rng.integers(0, start_steps + 1))
    j = int(rng.integers(1, width_steps))
    a1, b1 = _round5(m * dt), _round5((m + j) * dt)
    a2, b2 = _round5(iv.start - m * dt), _round5(iv.end - (m + j) * dt)
    op = type(node)
    return op(fm.Interval(a1, b1), op(fm.Interval(a2, b2), node.child))


def _build_until_nesting(node, cfg, rng):
    psi = fm.Predicate(
        int(rng.integers(cfg.num_vars)),
        str(rng.choice(fm.COMPARISONS)),
        _round5(rng.normal(0.0, cfg.until_threshold_std)),
    )
    start = _round5(rng.uniform(0.0, cfg.until_start_max))
    width = _round5(rng.uniform(*cfg.until_width_range))
    iv = fm.Interval(start, _round5(start + width))
    if rng.random() < 0.5:
        return fm.Until(iv, node, psi)
    return fm.Until(iv, psi, node)


def _build_temporal_identity(node, cfg, rng):
    op = fm.Always if rng.random() < 0.5 else fm.Eventually
    return op(fm.Interval(0.0, 0.0), node)


def _build_distributivity(node, cfg, rng):
    if isinstance(node, fm.Always):
        return fm.And(
            fm.Always(node.interval, node.child.left),
            fm.Always(node.interval, node.child.right),
        )
    return fm.Or(
        fm.Eventually(node.interval, node.child.left),
        fm.Eventually(node.interval, node.child.right),
    )


_INVERTED_CMP = {"<=": ">", "<": ">=", ">=": "<", ">": "<="}


def _build_duality_shift(node, cfg, rng):
    if isinstance(node, fm.Always):
        return fm.Not(fm.Eventually(node.interval, fm.Not(node.child)))
    return fm.Not(fm.Always(node.interval, fm.Not(node.child)))


_RULES: dict[str, tuple[Callable, Callable]] = {
    "not_injection": (
        lambda node, parent, cfg: not isinstance(parent, fm.Not),
        lambda node, cfg, rng: fm.Not(fm.Not(node)),
    ),
    "de_morgan": (
        lambda node, parent, cfg: isinstance(node, (fm.And, fm.Or)),
        lambda node, cfg, rng: fm.Not(
            (fm.Or if isinstance(node, fm.And) else fm.And)(
                fm.Not(node.left), fm.Not(node.right)
            )
        ),
    ),
    "time_partition": (_can_partition, _build_time_partition),
    "until_nesting": (lambda node, parent, cfg: True, _build_until_nesting),
    "temporal_identity": (lambda node, parent, cfg: True, _build_temporal_identity),
    "distributivity": (
        lambda node, parent, cfg: (
            (isinstance(node, fm.Always) and isinstance(node.child, fm.And))
            or (isinstance(node, fm.Eventually) and isinstance(node.child, fm.Or))
        ),
        _build_distributivity,
    ),
    "predicate_inversion": (
        lambda node, parent, cfg: isinstance(node, fm.Predicate),
        lambda node, cfg, rng: fm.Not(
            fm.Predicate(node.var, _INVERTED_CMP[node.cmp], node.threshold)
        ),
    ),
    "duality_shift": (
        lambda node, parent, cfg: isinstance(node, (fm.Always, fm.Eventually)),
        _build_duality_shift,
    ),
}

RULE_NAMES = tuple(k for k in _RULES if k != "duality_shift") + ("no_change",)
# Rules that leave the robustness vector unchanged on the evaluation grid.
PRESERVING_RULES = (
    "not_injection",
    "de_morgan",
    "time_partition",
    "temporal_identity",
    "distributivity",
    "predicate_inversion",
)


def apply_rule(
    f: fm.Formula,
    rule: str,
    cfg: AugmentConfig,
    rng: np.random.Generator,
) -> fm.Formula | None:
    """Apply ``rule`` at a uniformly sampled applicable node.

    Returns None when the rule applies nowhere in the tree.
    """
    if rule == "no_change":
        return f
    applies, build = _RULES[rule]
    candidates = [
        (path, node) for path, node, parent in _node_paths(f) if applies(node, parent, cfg)
    ]
    if not candidates:
        return None
    path, node = candidates[int(rng.integers(len(candidates)))]
    return _replace(f, path, build(node, cfg, rng))


def _sample_rule(names: Sequence[str], cfg: AugmentConfig, rng) -> str:
    probs = cfg.rule_probabilities()
    weights = np.array([probs[n] for n in names], dtype=np.float64)
    total = weights.sum()
    if total <= 0:
        raise ConfigError("rule probabilities for the active subset sum to zero")
    return str(rng.choice(list(names), p=weights / total))


def rewrite_once(f: fm.Formula, cfg: AugmentConfig, rng: np.random.Generator) -> fm.Formula:
    """One step of the stochastic cascade: sample a rule, apply at one node.

    Falls back to returning ``f`` unchanged when the sampled rule is
    inapplicable anywhere.
    """
    rule = _sample_rule(RULE_NAMES, cfg, rng)
    rewritten = apply_rule(f, rule, cfg, rng)
    return f if rewritten is None else rewritten


_DEPTH_BUDGET = 64


def _complicate(f, cfg, rng, names) -> fm.Formula:
    """Apply sampled rules from ``names`` until depth >= cfg.min_depth."""
    g = f
    for _ in range(_DEPTH_BUDGET):
        rule = _sample_rule(names, cfg, rng)
        rewritten = apply_rule(g, rule, cfg, rng)
        if rewritten is not None:
            g = rewritten
        if fm.depth(g) >= cfg.min_depth:
            return g
    raise DepthUnreachableError(
        f"could not reach depth {cfg.min_depth} in {_DEPTH_BUDGET} rewrites"
    )


def make_equivalent_variant(
    f: fm.Formula, cfg: AugmentConfig, rng: np.random.Generator
) -> fm.Formula:
    """Lexically complex variant with identical robustness on the grid."""
    return _complicate(f, cfg, rng, PRESERVING_RULES + ("no_change",))


def _perturb_interval_vibration(iv: fm.Interval, cfg, rng) -> fm.Interval:
    if iv.is_degenerate:
        return iv
    width = iv.width * rng.uniform(*cfg.vibration_width_range)
    return _consistent_interval(iv.start, width)


def _perturb_interval_shift(iv: fm.Interval, cfg, rng) -> fm.Interval:
    if iv.is_degenerate:
        return iv
    delta = rng.uniform(*cfg.shift_time_range)
    start = max(0.0, iv.start + delta)
    return _consistent_interval(start, iv.width)


def _consistent_interval(start: float, width: float) -> fm.Interval:
    # Interval consistency: the upper bound is rebuilt as start + width.
    start = _round5(start)
    width = max(width, 1e-4)
    end = _round5(start + width)
    if end <= start:
        end = _round5(start + 1e-4)
    return fm.Interval(start, end)


def perturb(f: fm.Formula, cfg: AugmentConfig, rng: np.random.Generator) -> fm.Formula:
    """Semantic-altering numeric noise; tree shape is untouched.

    Vibration multiplies thresholds by u ~ U[0.9, 1.1] and resamples window
    widths in [0.6W, 1.8W]; shift translates thresholds by U[-6, 6] and window
    positions by U[-15, 40]. Degenerate [0,0] identity windows are left alone.
    """
    vibration = rng.random() < cfg.p_vibration

    def walk(node):
        if isinstance(node, fm.Top):
            return node
        if isinstance(node, fm.Predicate):
            if vibration:
                theta = node.threshold * rng.uniform(*cfg.vibration_threshold_range)
            else:
                theta = node.threshold + rng.uniform(*cfg.shift_threshold_range)
            return replace(node, threshold=_round5(theta))
        if isinstance(node, fm.Not):
            return fm.Not(walk(node.child))
        if isinstance(node, (fm.And, fm.Or)):
            return type(node)(walk(node.left), walk(node.right))
        perturb_iv = _perturb_interval_vibration if vibration else _perturb_interval_shift
        if isinstance(node, (fm.Always, fm.Eventually)):
            return type(node)(perturb_iv(node.interval, cfg, rng), walk(node.child))
        if isinstance(node, fm.Until):
            return fm.Until(perturb_iv(node.interval, cfg, rng), walk(node.left), walk(node.right))
        raise TypeError(f"not a formula: {node!r}")

    return walk(f)


def _validate(f: fm.Formula, probe: Trajectory) -> bool:
    """Empirical validation against the probe signal."""
    try:
        value = robustness(f, probe, 0)
    except HorizonError:
        return False
    return math.isfinite(value)


def refine_serialized(
    f: fm.Formula,
    cfg: AugmentConfig,
    rng: np.random.Generator,
    probe: Trajectory,
) -> fm.Formula | None:
    """Optional duality shift, then empirical validation.

    Returns None when the variant fails validation; callers resample.
    """
    g = f
    if rng.random() < cfg.p_duality_shift:
        shifted = apply_rule(g, "duality_shift", cfg, rng)
        if shifted is not None:
            g = shifted
    if not _validate(g, probe):
        return None
    return g


# ---------------------------------------------------------------------------
# Dataset assembly

@dataclass(frozen=True)
class DatasetRecord:
    id: str
    formula_text: str
    seed_id: int
    variant_kind: str


def stratum_counts(n_total: int, cfg: AugmentConfig) -> dict[str, int]:
    """Largest-remainder allocation of records to strata."""
    fracs = {
        "equivalent": cfg.frac_equivalent,
        "parametric": cfg.frac_parametric,
        "hybrid": cfg.frac_hybrid,
    }
    total = sum(fracs.values())
    shares = {k: n_total * v / total for k, v in fracs.items()}
    counts = {k: int(math.floor(s)) for k, s in shares.items()}
    remainder = n_total - sum(counts.values())
    by_frac = sorted(fracs, key=lambda k: shares[k] - counts[k], reverse=True)
    for k in by_frac[:remainder]:
        counts[k] += 1
    return counts


def _token_ok(f: fm.Formula, cfg: AugmentConfig) -> bool:
    if cfg.max_tokens <= 0:
        return True
    try:
        fm.tokenize(f, cfg.max_tokens)
    except (TokenOverflowError, ValueError):
        return False
    return True


def _make_variant(kind, seed_formula, cfg, rng, probe) -> fm.Formula | None:
    if kind == "equivalent":
        g = make_equivalent_variant(seed_formula, cfg, rng)
        g = refine_serialized(g, cfg, rng, probe)
    elif kind == "parametric":
        g = perturb(seed_formula, cfg, rng)
        if not _validate(g, probe):
            g = None
    else:  # hybrid: structural cascade (until nesting included) then noise
        g = _complicate(seed_formula, cfg, rng, RULE_NAMES)
        g = perturb(g, cfg, rng)
        g = refine_serialized(g, cfg, rng, probe)
    if g is not None and not _token_ok(g, cfg):
        return None
    return g


def build_dataset(
    seeds: Sequence[fm.Formula],
    n_total: int,
    cfg: AugmentConfig,
    seed: int | None = None,
) -> list[DatasetRecord]:
    """Emit ``n_total`` validated records stratified per the configured mix.

    Deterministic given (seeds, cfg, seed): every record draws from its own
    RNG substream keyed by the record index.
    """
    if not seeds:
        raise ValueError("need at least one seed formula")
    cfg.validate()
    base_seed = cfg.seed if seed is None else seed
    probe = sample_mu0(1, cfg.signal_points, cfg.num_vars, cfg.signal_horizon,
                       seed=base_seed).trajectory(0)

    counts = stratum_counts(n_total, cfg)
    kinds = [k for k in VARIANT_KINDS for _ in range(counts[k])]
    np.random.default_rng([base_seed, 0]).shuffle(kinds)

    records = []
    for i, kind in enumerate(kinds):
        rng = np.random.default_rng([base_seed, 1, i])
        seed_idx = int(rng.integers(len(seeds)))
        variant = None
        for attempt in range(cfg.max_record_attempts):
            try:
                variant = _make_variant(kind, seeds[seed_idx], cfg, rng, probe)
            except DepthUnreachableError:
                variant = None
            if variant is not None:
                break
        if variant is None:
            raise GenerationError(
                f"record {i} ({kind}, seed {seed_idx}): no valid variant in "
                f"{cfg.max_record_attempts} attempts"
            )
        records.append(
            DatasetRecord(
                id=f"r{i:06d}",
                formula_text=fm.print_formula(variant),
                seed_id=seed_idx,
                variant_kind=kind,
            )
        )
    return records


# ---------------------------------------------------------------------------
# Dataset and seed-file IO

def save_dataset(records: Sequence[DatasetRecord], path) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps({
                "id": rec.id,
                "formula_text": rec.formula_text,
                "seed_id": rec.seed_id,
                "variant_kind": rec.variant_kind,
            }) + "\n")


def load_dataset(path) -> list[DatasetRecord]:
    records = []
    with open(path) as fh:
        for line_no, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                records.append(DatasetRecord(
                    id=str(obj["id"]),
                    formula_text=str(obj["formula_text"]),
                    seed_id=int(obj["seed_id"]),
                    variant_kind=str(obj["variant_kind"]),
                ))
            except (json.JSONDecodeError, KeyError) as exc:
                raise ValueError(f"{path}:{line_no}: bad dataset record: {exc}") from exc
    return records


def load_seed_formulas(path, num_vars: int | None = None) -> list[fm.Formula]:
    """Seed formulae: one per line, '#' starts a comment."""
    out = []
    with open(path) as fh:
        for line in fh:
            text = line.split("#", 1)[0].strip()
            if text:
                out.append(fm.parse(text, num_vars))
    return out


def default_seed_path():
    """Path of the bundled sample seed list."""
    return resources.files("stldistill").joinpath("data/seed_formulas.txt")
