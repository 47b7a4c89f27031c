"""Gated two-layer networks on sparse-coded data.

A small numerical laboratory: a sparse-coding data generator, purified
gated-network constructions with scalar or pseudo-inverse heads, single-step
L2/Linf attacks, purification and gate-stability diagnostics, a frozen-feature
downstream fit, and a reproducible Monte Carlo experiment harness with a CLI.
"""

from sparsegate.sparse_model import (
    ContrastivePair,
    NoiseConvention,
    Sample,
    SparseModel,
    make_sample,
    observe,
    respond,
    respond_class,
    sample_features,
    sample_pair,
    sample_unitary,
)
from sparsegate.gated_net import (
    GatedNetwork,
    HeadMismatchError,
    MatrixHead,
    MembershipReport,
    PseudoHead,
    PurifiedSpec,
    ScalarHead,
    SingularityError,
    activation,
    apply_head,
    apply_head_transpose,
    build_purified,
    check_membership,
    forward_supervised,
    head_matrix,
    load_network,
    pseudo_head,
    represent,
    save_network,
)
from sparsegate.objectives import (
    LossKind,
    grad_z,
    loss_contrastive,
    loss_supervised,
    score_contrastive,
)
from sparsegate.attack import (
    AdvEval,
    AttackNorm,
    AttackSpec,
    adv_loss,
    attack_effectiveness,
    perturb,
)
from sparsegate.diagnostics import (
    GateStability,
    PurificationStats,
    cancellation_prob,
    check_isotropy_optimal,
    gamma_stats,
    gate_stability,
    l2_sandwich_check,
    leakage_matrix,
    linf_sandwich_check,
    psi_rate,
    theory_epsilon,
)
from sparsegate.downstream import (
    DownstreamTask,
    FitResult,
    RobustnessGap,
    fit_head,
    make_downstream_task,
    robustness_gap,
)
from sparsegate.experiments import (
    CalibrationError,
    ConfigError,
    ExperimentConfig,
    ExperimentReport,
    MetricRow,
    ReportSchemaError,
    calibrate_epsilon,
    config_from_mapping,
    report_to_csv,
    run_contrastive_sweep,
    run_downstream_sweep,
    run_gamma_sweep,
    run_preset,
    run_supervised_sweep,
    run_verify,
    write_report,
)

__all__ = [
    "AdvEval",
    "AttackNorm",
    "AttackSpec",
    "CalibrationError",
    "ConfigError",
    "ContrastivePair",
    "DownstreamTask",
    "ExperimentConfig",
    "ExperimentReport",
    "FitResult",
    "GateStability",
    "GatedNetwork",
    "HeadMismatchError",
    "LossKind",
    "MatrixHead",
    "MembershipReport",
    "MetricRow",
    "NoiseConvention",
    "PseudoHead",
    "PurificationStats",
    "PurifiedSpec",
    "ReportSchemaError",
    "RobustnessGap",
    "Sample",
    "ScalarHead",
    "SingularityError",
    "SparseModel",
    "activation",
    "adv_loss",
    "apply_head",
    "apply_head_transpose",
    "attack_effectiveness",
    "build_purified",
    "calibrate_epsilon",
    "cancellation_prob",
    "check_isotropy_optimal",
    "check_membership",
    "config_from_mapping",
    "fit_head",
    "forward_supervised",
    "gamma_stats",
    "gate_stability",
    "grad_z",
    "head_matrix",
    "l2_sandwich_check",
    "leakage_matrix",
    "linf_sandwich_check",
    "load_network",
    "loss_contrastive",
    "loss_supervised",
    "make_downstream_task",
    "make_sample",
    "observe",
    "perturb",
    "pseudo_head",
    "psi_rate",
    "report_to_csv",
    "represent",
    "respond",
    "respond_class",
    "robustness_gap",
    "run_contrastive_sweep",
    "run_downstream_sweep",
    "run_gamma_sweep",
    "run_preset",
    "run_supervised_sweep",
    "run_verify",
    "sample_features",
    "sample_pair",
    "sample_unitary",
    "save_network",
    "score_contrastive",
    "theory_epsilon",
    "write_report",
]

__version__ = "0.1.0"
