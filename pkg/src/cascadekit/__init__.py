"""Training and evaluation toolkit for two-model LM cascades.

The package covers the full desk-scale loop: synthetic multi-task corpora,
a small float64 transformer with exact gradients, capability-masked training
losses, teacher caching, deferral rules with cost accounting, and
deferral-curve sweeps with report generation.
"""

from .bleu_reference import bleu_reference
from .cascade import (
    CascadeError, CascadePrediction, DeferralRuleSpec, Router, ScoreRow,
    cascade_predict, deferral_score, model_cost, read_score_log,
    router_features, router_labels, train_router, write_score_log,
)
from .corpus import (
    CorpusError, Example, TaskSpec, Vocab, apply_rule, default_task_specs,
    default_vocab, generate_corpus, generate_task, inject_label_noise,
    load_corpus, load_vocab, save_corpus, save_vocab, task_pool,
)
from .evaluation import (
    CurvePoint, EvalError, audc, bleu, content_tokens, dataset_xent,
    exact_match, example_quality, next_token_acc, quality_at_rate,
    read_curve_csv, render_curves_svg, sentence_bleu, sweep, value_at_rate,
    write_curve_csv,
)
from .experiment import (
    ConfigError, ExperimentConfig, RunPaths, StageError, apply_overrides,
    config_from_dict, default_config, load_config, run_pipeline,
)
from .losses import (
    ALPHA_VARIANTS, LOSS_KINDS, LossError, LossSpec, TeacherOutputs,
    batch_loss_and_grad, compute_alpha, sequence_dist, sequence_xent,
)
from .model import (
    DecodeResult, Model, ModelConfig, ModelError, forward_teacher_forced,
    forward_teacher_forced_batch, greedy_decode, greedy_decode_batch,
    init_model, load_model, loss_and_grad, model_checksum, save_model,
)
from .trainer import (
    TeacherCache, TrainConfig, TrainResult, TrainerError,
    TrainingDivergedError, build_teacher_cache, load_teacher_cache,
    save_teacher_cache, train,
)

__version__ = "0.1.0"
