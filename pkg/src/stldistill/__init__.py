"""Distill the STL robustness kernel into a compact Transformer encoder.

The package covers the full pipeline: STL parsing and token encoding
(:mod:`.formula`), trajectory sampling (:mod:`.signals`), quantitative
semantics (:mod:`.semantics`), the Monte-Carlo semantic kernel
(:mod:`.kernel`), corpus augmentation (:mod:`.augment`), the encoder
(:mod:`.encoder`), the alignment objective and metrics (:mod:`.objective`),
the training loop (:mod:`.trainer`), post-training evaluation (:mod:`.probe`),
efficiency benchmarks (:mod:`.bench`), and the command-line front end
(:mod:`.cli`).
"""

from .errors import (
    ConfigError,
    DegenerateFormulaError,
    DepthUnreachableError,
    GenerationError,
    HorizonError,
    IntervalError,
    ParseError,
    StlError,
    TokenOverflowError,
)
from .formula import (
    Always,
    And,
    Eventually,
    Formula,
    Interval,
    Not,
    Or,
    Predicate,
    TokenSequence,
    Top,
    Until,
    depth,
    parse,
    print_formula,
    size,
    tokenize,
)
from .signals import Trajectory, TrajectorySet, sample_mu0, time_to_index
from .semantics import (
    TOP_ROBUSTNESS,
    RobustnessVector,
    robustness,
    robustness_vector,
    satisfies,
)
from .kernel import DEFAULT_SIGMA2, GramMatrix, cosine_similarity, gram, raw_inner, rbf
from .augment import (
    AugmentConfig,
    DatasetRecord,
    build_dataset,
    make_equivalent_variant,
    perturb,
    refine_serialized,
    rewrite_once,
)
from .encoder import EncoderConfig, TransformerEncoder, build_encoder, load_encoder, save_encoder
from .objective import LossConfig, kernel_alignment, loss, uniformity
from .trainer import TrainConfig, TrainResult, evaluate, train
from .probe import AgreementReport, ProbeReport, agreement_eval, compute_targets, invert_nn, train_probe
from .bench import BenchConfig, BenchRecord, bench_embed, bench_similarity

__version__ = "0.1.0"
