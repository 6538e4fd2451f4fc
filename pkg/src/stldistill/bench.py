"""Efficiency harness: embedding and pairwise-similarity wall time plus peak
resident memory for the symbolic kernel versus the neural encoder over a
(B, N) grid.

Formula selection is deterministic (the first B dataset records). The embed
phase maps formulae to their representation (robustness vectors over freshly
sampled signals for the kernel; tokenize + forward for the encoder). The
similarity phase maps representations to the full B x B matrix (Gram assembly
for the kernel, one matrix product for embeddings), isolating the quadratic
part so scaling trends are clean. Timings are asserted downstream only as
trends, never as absolute values.

A configurable memory budget lets the out-of-memory path emit an explicit OOM
record instead of exhausting the host.
"""

from __future__ import annotations

import threading
import time
from dataclasses import dataclass, field

import numpy as np
import psutil

from . import formula as fm
from .encoder import encode, load_encoder
from .kernel import gram_from_robustness
from .semantics import robustness_matrix
from .signals import sample_mu0

__all__ = [
    "BenchConfig",
    "BenchRecord",
    "bench_embed",
    "bench_similarity",
    "save_bench_records",
    "load_bench_records",
    "format_bench_table",
]

METHODS = ("kernel", "encoder_loaded", "encoder_full")


@dataclass
class BenchConfig:
    batch_sizes: tuple[int, ...] = (64, 128)
    signal_counts: tuple[int, ...] = (100, 400)
    signal_points: int = 101
    signal_vars: int = 3
    signal_horizon: float = 100.0
    sigma2: float = 0.2
    repetitions: int = 3
    min_time: float = 0.02
    memory_budget_mb: float | None = None
    encode_chunk: int = 64
    seed: int = 0
    keep_artifacts: bool = False


@dataclass(frozen=True)
class BenchRecord:
    method: str
    phase: str
    batch_size: int
    n_signals: int
    n_points: int
    seconds: float
    peak_memory_mb: float
    repetitions: int
    seed: int
    status: str = "ok"


@dataclass
class BenchResult:
    records: list[BenchRecord] = field(default_factory=list)
    artifacts: dict = field(default_factory=dict)


class _PeakRss:
    """Samples resident memory in a background thread; reports the peak."""

    def __init__(self, interval: float = 0.002):
        self.interval = interval
        self.process = psutil.Process()
        self.peak = 0
        self._stop = threading.Event()
        self._thread: threading.Thread | None = None

    def _run(self):
        while not self._stop.is_set():
            self.peak = max(self.peak, self.process.memory_info().rss)
            self._stop.wait(self.interval)

    def __enter__(self):
        self.peak = self.process.memory_info().rss
        self._stop.clear()
        self._thread = threading.Thread(target=self._run, daemon=True)
        self._thread.start()
        return self

    def __exit__(self, *exc):
        self._stop.set()
        self._thread.join()
        self.peak = max(self.peak, self.process.memory_info().rss)
        return False

    @property
    def peak_mb(self) -> float:
        return self.peak / 1e6


def _measure(fn, repetitions: int, min_time: float) -> tuple[float, float, object]:
    """Median wall time of one call, peak RSS, and the last return value.

    Calls faster than ``min_time`` are repeated in an auto-calibrated inner
    loop to keep the clock resolution honest.
    """
    with _PeakRss() as rss:
        t0 = time.perf_counter()
        out = fn()
        first = time.perf_counter() - t0
        inner = max(1, int(np.ceil(min_time / max(first, 1e-9))))
        times = []
        for _ in range(repetitions):
            t0 = time.perf_counter()
            for _ in range(inner):
                out = fn()
            times.append((time.perf_counter() - t0) / inner)
    return float(np.median(times)), rss.peak_mb, out


def _estimate_mb(method: str, phase: str, b: int, n: int, cfg: BenchConfig) -> float:
    p, k = cfg.signal_points, cfg.signal_vars
    if method == "kernel":
        if phase == "embed":
            by = n * p * k * 8 + b * n * 8 + n * p * 8  # signals, vectors, scratch
        else:
            by = b * n * 8 + 2 * b * b * 8
    else:
        if phase == "embed":
            by = b * 256 * 8 + cfg.encode_chunk * 256 * 64 * 4 * 8
        else:
            by = b * 64 * 8 + b * b * 8
    return by / 1e6


def _oom_record(method, phase, b, n, cfg, estimate) -> BenchRecord:
    return BenchRecord(method, phase, b, n, cfg.signal_points, 0.0, estimate,
                       cfg.repetitions, cfg.seed, status="oom")


def _over_budget(cfg: BenchConfig, estimate: float) -> bool:
    return cfg.memory_budget_mb is not None and estimate > cfg.memory_budget_mb


def _select_formulae(records, max_b: int) -> list[fm.Formula]:
    if len(records) < max_b:
        raise ValueError(f"dataset has {len(records)} records, grid needs {max_b}")
    return [fm.parse(r.formula_text) for r in records[:max_b]]


def bench_embed(records, model_path, cfg: BenchConfig) -> BenchResult:
    """Formula -> representation timing for all three methods on the grid."""
    result = BenchResult()
    formulae = _select_formulae(records, max(cfg.batch_sizes))
    model = load_encoder(model_path)
    enc_cfg = model.cfg

    for b in cfg.batch_sizes:
        subset = formulae[:b]
        for n in cfg.signal_counts:
            est = _estimate_mb("kernel", "embed", b, n, cfg)
            if _over_budget(cfg, est):
                result.records.append(_oom_record("kernel", "embed", b, n, cfg, est))
            else:
                def kernel_embed():
                    ts = sample_mu0(n, cfg.signal_points, cfg.signal_vars,
                                    cfg.signal_horizon, seed=cfg.seed)
                    return robustness_matrix(subset, ts)

                secs, mem, _ = _measure(kernel_embed, cfg.repetitions, cfg.min_time)
                result.records.append(BenchRecord(
                    "kernel", "embed", b, n, cfg.signal_points, secs, mem,
                    cfg.repetitions, cfg.seed))

            def encoder_embed():
                seqs = [fm.tokenize(f, enc_cfg.max_len, enc_cfg.agg_token,
                                    enc_cfg.max_vars) for f in subset]
                return encode(model, seqs, cfg.encode_chunk)

            def encoder_full():
                fresh = load_encoder(model_path)
                seqs = [fm.tokenize(f, enc_cfg.max_len, enc_cfg.agg_token,
                                    enc_cfg.max_vars) for f in subset]
                return encode(fresh, seqs, cfg.encode_chunk)

            for method, fn in (("encoder_loaded", encoder_embed),
                               ("encoder_full", encoder_full)):
                est = _estimate_mb(method, "embed", b, n, cfg)
                if _over_budget(cfg, est):
                    result.records.append(_oom_record(method, "embed", b, n, cfg, est))
                    continue
                secs, mem, _ = _measure(fn, cfg.repetitions, cfg.min_time)
                result.records.append(BenchRecord(
                    method, "embed", b, n, cfg.signal_points, secs, mem,
                    cfg.repetitions, cfg.seed))
    return result


def bench_similarity(records, model_path, cfg: BenchConfig) -> BenchResult:
    """Representation -> B x B similarity matrix timing on the grid."""
    result = BenchResult()
    formulae = _select_formulae(records, max(cfg.batch_sizes))
    model = load_encoder(model_path)
    enc_cfg = model.cfg

    for b in cfg.batch_sizes:
        subset = formulae[:b]
        seqs = [fm.tokenize(f, enc_cfg.max_len, enc_cfg.agg_token, enc_cfg.max_vars)
                for f in subset]
        emb = encode(model, seqs, cfg.encode_chunk).astype(np.float64)
        for n in cfg.signal_counts:
            est = _estimate_mb("kernel", "similarity", b, n, cfg)
            if _over_budget(cfg, est):
                result.records.append(_oom_record("kernel", "similarity", b, n, cfg, est))
            else:
                ts = sample_mu0(n, cfg.signal_points, cfg.signal_vars,
                                cfg.signal_horizon, seed=cfg.seed)
                rho = robustness_matrix(subset, ts)

                def kernel_similarity():
                    return gram_from_robustness(rho, cfg.sigma2).values

                secs, mem, gram_out = _measure(kernel_similarity, cfg.repetitions,
                                               cfg.min_time)
                result.records.append(BenchRecord(
                    "kernel", "similarity", b, n, cfg.signal_points, secs, mem,
                    cfg.repetitions, cfg.seed))
                if cfg.keep_artifacts:
                    result.artifacts[("kernel", b, n)] = (rho, gram_out)

            for method in ("encoder_loaded", "encoder_full"):
                est = _estimate_mb(method, "similarity", b, n, cfg)
                if _over_budget(cfg, est):
                    result.records.append(_oom_record(method, "similarity", b, n, cfg, est))
                    continue

                def encoder_similarity():
                    return emb @ emb.T

                secs, mem, sim_out = _measure(encoder_similarity, cfg.repetitions,
                                              cfg.min_time)
                result.records.append(BenchRecord(
                    method, "similarity", b, n, cfg.signal_points, secs, mem,
                    cfg.repetitions, cfg.seed))
                if cfg.keep_artifacts and method == "encoder_loaded":
                    result.artifacts[("encoder", b, n)] = (emb, sim_out)
    return result


# ---------------------------------------------------------------------------
# Record IO

_COLUMNS = ("method", "phase", "batch_size", "n_signals", "n_points", "seconds",
            "peak_memory_mb", "repetitions", "seed", "status")


def save_bench_records(records, path) -> None:
    with open(path, "w") as fh:
        fh.write("\t".join(_COLUMNS) + "\n")
        for r in records:
            fh.write("\t".join(str(getattr(r, c)) for c in _COLUMNS) + "\n")


def load_bench_records(path) -> list[BenchRecord]:
    out = []
    with open(path) as fh:
        header = fh.readline().strip().split("\t")
        if header != list(_COLUMNS):
            raise ValueError(f"unexpected bench columns {header}")
        for line in fh:
            parts = line.strip().split("\t")
            out.append(BenchRecord(
                method=parts[0], phase=parts[1], batch_size=int(parts[2]),
                n_signals=int(parts[3]), n_points=int(parts[4]),
                seconds=float(parts[5]), peak_memory_mb=float(parts[6]),
                repetitions=int(parts[7]), seed=int(parts[8]), status=parts[9]))
    return out


def format_bench_table(records) -> str:
    lines = [f"{'method':<16} {'phase':<11} {'B':>6} {'N':>7} "
             f"{'time_s':>10} {'peak_mb':>9} {'status':>6}"]
    for r in sorted(records, key=lambda r: (r.phase, r.method, r.batch_size, r.n_signals)):
        lines.append(
            f"{r.method:<16} {r.phase:<11} {r.batch_size:>6} {r.n_signals:>7} "
            f"{r.seconds:>10.5f} {r.peak_memory_mb:>9.1f} {r.status:>6}"
        )
    return "\n".join(lines)
