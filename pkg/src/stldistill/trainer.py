"""Distillation loop: online per-batch kernel targets, encoder updates with
decoupled weight decay, gradient accumulation, and metric logging.

One optimizer step covers one effective batch (micro_batch x accumulation
formulae). The teacher Gram matrix and the alignment loss are computed over
the whole effective batch, while the encoder runs forward/backward in
micro-batch chunks whose gradients accumulate; since the loss depends on
parameters only through the embedding rows, the accumulated gradient equals
the full-batch gradient exactly, whatever the chunking.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import formula as fm
from .encoder import (
    EncoderConfig,
    TransformerEncoder,
    build_encoder,
    encode,
    forward_with_tape,
    save_encoder,
)
from .kernel import gram_from_robustness
from .objective import LossConfig, kernel_alignment, loss as alignment_loss, uniformity
from .semantics import robustness_matrix
from .signals import TrajectorySet, sample_mu0

__all__ = ["TrainConfig", "TrainResult", "train", "evaluate", "write_metric_log"]

METRIC_FIELDS = ("step", "split", "loss", "alignment", "uniformity")


@dataclass
class TrainConfig:
    epochs: int = 10
    micro_batch: int = 16
    accumulation: int = 4
    learning_rate: float = 1e-3
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    n_signals: int = 200
    sigma2: float = 0.2
    val_fraction: float = 0.2
    checkpoint_every: int = 0
    seed: int = 0
    signal_points: int = 101
    signal_vars: int = 3
    signal_horizon: float = 100.0
    eval_chunk: int = 64

    @property
    def effective_batch(self) -> int:
        return self.micro_batch * self.accumulation

    def validate(self) -> None:
        if self.epochs < 1 or self.micro_batch < 1 or self.accumulation < 1:
            raise ValueError("epochs, micro_batch and accumulation must be >= 1")
        if self.effective_batch < 2:
            raise ValueError("effective batch must hold at least two formulae")
        if self.learning_rate < 0:
            raise ValueError(f"negative learning rate {self.learning_rate}")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ValueError(f"val_fraction must be in [0, 1), got {self.val_fraction}")


@dataclass
class TrainResult:
    model: TransformerEncoder
    log: list[dict] = field(default_factory=list)
    val_record_ids: list[str] = field(default_factory=list)
    best_alignment: float | None = None
    best_state: dict | None = None
    steps: int = 0


def _metric_row(step: int, split: str, loss_v: float, align: float, uni: float) -> dict:
    return {"step": step, "split": split, "loss": loss_v, "alignment": align,
            "uniformity": uni}


def write_metric_log(rows, path) -> None:
    with open(path, "w") as fh:
        fh.write("\t".join(METRIC_FIELDS) + "\n")
        for row in rows:
            fh.write("\t".join(repr(row[k]) if k != "split" else row[k]
                               for k in METRIC_FIELDS) + "\n")


def _split_by_seed(records, val_fraction: float, seed: int) -> tuple[list[int], list[int]]:
    """Indices split so all variants of a seed land on one side."""
    seed_ids = sorted({r.seed_id for r in records})
    rng = np.random.default_rng([seed, 11])
    order = rng.permutation(len(seed_ids))
    n_val = int(round(val_fraction * len(seed_ids))) if val_fraction > 0 else 0
    n_val = min(n_val, len(seed_ids) - 1)
    val_seeds = {seed_ids[i] for i in order[:n_val]}
    train_idx = [i for i, r in enumerate(records) if r.seed_id not in val_seeds]
    val_idx = [i for i, r in enumerate(records) if r.seed_id in val_seeds]
    return train_idx, val_idx


def _batch_metrics(e: np.ndarray, k: np.ndarray, loss_v: float, step: int, split: str) -> dict:
    return _metric_row(step, split, loss_v, kernel_alignment(k, e @ e.T), uniformity(e))


def _nonfinite_diagnostic(e: np.ndarray, k: np.ndarray, ids) -> str:
    bad_rows = np.flatnonzero(~np.all(np.isfinite(e), axis=1))
    if bad_rows.size:
        names = ", ".join(ids[i] for i in bad_rows[:4])
        return f"non-finite embeddings for {names}"
    bad = np.argwhere(~np.isfinite(k))
    if bad.size:
        i, j = bad[0]
        return f"non-finite kernel entry for pair ({ids[i]}, {ids[j]})"
    return "non-finite loss"


def train(
    records,
    encoder_cfg: EncoderConfig,
    cfg: TrainConfig,
    signals: TrajectorySet | None = None,
    loss_cfg: LossConfig | None = None,
    out_dir=None,
    dtype: torch.dtype = torch.float32,
) -> TrainResult:
    """Distill the kernel into the encoder over the given dataset records."""
    cfg.validate()
    loss_cfg = loss_cfg or LossConfig()
    if not records:
        raise ValueError("empty dataset")

    if signals is None:
        sig_seed = int(np.random.SeedSequence([cfg.seed, 21]).generate_state(1)[0])
        signals = sample_mu0(cfg.n_signals, cfg.signal_points, cfg.signal_vars,
                             cfg.signal_horizon, seed=sig_seed)

    formulae = [fm.parse(r.formula_text) for r in records]
    ids = [r.id for r in records]
    sequences = [
        fm.tokenize(f, encoder_cfg.max_len, encoder_cfg.agg_token, encoder_cfg.max_vars)
        for f in formulae
    ]
    rho = robustness_matrix(formulae, signals, ids)

    train_idx, val_idx = _split_by_seed(records, cfg.val_fraction, cfg.seed)
    if not train_idx:
        raise ValueError("training split is empty")

    model = build_encoder(encoder_cfg, dtype)
    optimizer = torch.optim.AdamW(
        model.parameters(),
        lr=cfg.learning_rate,
        betas=(cfg.beta1, cfg.beta2),
        eps=cfg.eps,
        weight_decay=cfg.weight_decay,
    )

    result = TrainResult(model=model, val_record_ids=[ids[i] for i in val_idx])
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    step = 0
    for epoch in range(cfg.epochs):
        order = np.random.default_rng([cfg.seed, 31, epoch]).permutation(train_idx)
        for lo in range(0, len(order), cfg.effective_batch):
            batch = order[lo:lo + cfg.effective_batch]
            if batch.size < 2:
                continue
            batch_ids = [ids[i] for i in batch]
            k = gram_from_robustness(rho[batch], cfg.sigma2, tuple(batch_ids)).values

            tapes = []
            parts = []
            for mlo in range(0, batch.size, cfg.micro_batch):
                chunk = [sequences[i] for i in batch[mlo:mlo + cfg.micro_batch]]
                part, tape = forward_with_tape(model, chunk)
                parts.append(part)
                tapes.append(tape)
            e = np.concatenate(parts, axis=0).astype(np.float64)

            try:
                loss_v, de = alignment_loss(e, k, loss_cfg)
            except ValueError as exc:
                raise RuntimeError(
                    f"aborting at step {step}: {_nonfinite_diagnostic(e, k, batch_ids)}"
                ) from exc

            offset = 0
            for tape in tapes:
                upstream = torch.as_tensor(
                    de[offset:offset + tape.batch_size], dtype=tape.output.dtype
                )
                tape.output.backward(gradient=upstream)
                offset += tape.batch_size
            optimizer.step()
            optimizer.zero_grad(set_to_none=False)

            step += 1
            result.log.append(_batch_metrics(e, k, loss_v, step, "train"))

        if val_idx:
            metrics = _evaluate_rows(model, rho[val_idx], [sequences[i] for i in val_idx],
                                     [ids[i] for i in val_idx], cfg, loss_cfg)
            result.log.append(_metric_row(step, "val", metrics["loss"],
                                          metrics["kernel_alignment"], metrics["uniformity"]))
            if result.best_alignment is None or metrics["kernel_alignment"] > result.best_alignment:
                result.best_alignment = metrics["kernel_alignment"]
                result.best_state = copy.deepcopy(model.state_dict())
                if out_dir is not None:
                    save_encoder(model, out_dir / "encoder_best.stle")
                    torch.save(optimizer.state_dict(), out_dir / "encoder_best.opt")
        if out_dir is not None and cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
            save_encoder(model, out_dir / f"encoder_epoch{epoch + 1:03d}.stle")

    result.steps = step
    if out_dir is not None:
        save_encoder(model, out_dir / "encoder_last.stle")
        torch.save(optimizer.state_dict(), out_dir / "encoder_last.opt")
        if result.best_state is None:
            save_encoder(model, out_dir / "encoder_best.stle")
            torch.save(optimizer.state_dict(), out_dir / "encoder_best.opt")
        write_metric_log(result.log, out_dir / "metrics.tsv")
        (out_dir / "val_ids.txt").write_text(
            "".join(i + "\n" for i in result.val_record_ids)
        )
    return result


def _evaluate_rows(model, rho_rows, sequences, ids, cfg, loss_cfg) -> dict:
    k = gram_from_robustness(rho_rows, cfg.sigma2, tuple(ids)).values
    e = encode(model, sequences, cfg.eval_chunk).astype(np.float64)
    loss_v, _ = alignment_loss(e, k, loss_cfg)
    return {
        "loss": loss_v,
        "kernel_alignment": kernel_alignment(k, e @ e.T),
        "uniformity": uniformity(e),
    }


def evaluate(
    model: TransformerEncoder,
    formulae,
    signals: TrajectorySet,
    sigma2: float = 0.2,
    loss_cfg: LossConfig | None = None,
    chunk_size: int = 64,
    ids=None,
) -> dict:
    """Loss, kernel alignment, and uniformity on a formula set; no mutation."""
    if len(formulae) < 2:
        raise ValueError("evaluation needs at least two formulae")
    loss_cfg = loss_cfg or LossConfig()
    ids = list(ids) if ids is not None else [str(i) for i in range(len(formulae))]
    rho = robustness_matrix(formulae, signals, ids)
    k = gram_from_robustness(rho, sigma2, tuple(ids)).values
    sequences = [
        fm.tokenize(f, model.cfg.max_len, model.cfg.agg_token, model.cfg.max_vars)
        for f in formulae
    ]
    e = encode(model, sequences, chunk_size).astype(np.float64)
    loss_v, _ = alignment_loss(e, k, loss_cfg)
    return {
        "loss": loss_v,
        "kernel_alignment": kernel_alignment(k, e @ e.T),
        "uniformity": uniformity(e),
    }
