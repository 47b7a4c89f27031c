"""Reproducible Monte Carlo experiment presets.

Each preset builds purified networks at several purification levels m,
evaluates clean and attacked losses or leakage statistics over repeated
draws, and emits a flat CSV report: one row per (m, metric) with the mean,
the across-repetition sample std, the repetition count, and the attack
budget used. Reruns with the same config and seed are bit-identical, with
or without process parallelism, because every repetition owns a seed stream
derived from (preset, repetition, purpose [, m]) and results are merged in
a fixed order.

Presets
-------
contrastive-sweep   clean/adversarial contrastive loss on similar and
                    dissimilar pairs vs m, with optional attack-budget
                    calibration against a target adversarial loss
gamma-sweep         leakage block statistics gamma1/gamma2 vs m plus their
                    log-log slopes
supervised-sweep    clean/adversarial square loss and the robustness gap
                    vs m, plus per-repetition gap ratios against m = 1
downstream-sweep    downstream head fitting on frozen representations and
                    the inherited robustness gap vs pre-training m
verify              the property battery: effectiveness sandwiches, gate
                    stability under noise and attack, cancellation
                    probability, isotropy optimality, finite-difference
                    gradient agreement, and rate annotations
"""

from __future__ import annotations

import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from sparsegate.attack import AttackNorm, AttackSpec, adv_loss
from sparsegate.diagnostics import (
    cancellation_prob,
    check_isotropy_optimal,
    gate_stability,
    l2_sandwich_check,
    linf_sandwich_check,
    psi_rate,
    theory_epsilon,
    _gamma_one_rep,
)
from sparsegate.downstream import make_downstream_task, robustness_gap
from sparsegate.gated_net import (
    DEFAULT_TAU,
    GatedNetwork,
    PurifiedSpec,
    ScalarHead,
    build_purified,
    forward_supervised,
    pseudo_head,
    _require_scalar_head,
)
from sparsegate.objectives import (
    LossKind,
    grad_z,
    loss_contrastive,
    loss_supervised,
    score_contrastive,
)
from sparsegate.sparse_model import (
    ContrastivePair,
    NoiseConvention,
    SparseModel,
    observe,
    respond,
    sample_features,
    sample_pair,
    sample_unitary,
)

__all__ = [
    "PRESETS",
    "ConfigError",
    "CalibrationError",
    "ReportSchemaError",
    "ExperimentConfig",
    "MetricRow",
    "ExperimentReport",
    "config_from_mapping",
    "report_to_csv",
    "write_report",
    "calibrate_epsilon",
    "run_contrastive_sweep",
    "run_gamma_sweep",
    "run_supervised_sweep",
    "run_downstream_sweep",
    "run_verify",
    "run_preset",
]

PRESETS = (
    "contrastive-sweep",
    "gamma-sweep",
    "supervised-sweep",
    "downstream-sweep",
    "verify",
)

#: Stable preset tags entering the seed streams; appending presets must not
#: renumber existing ones.
PRESET_TAGS = {
    "contrastive-sweep": 1,
    "gamma-sweep": 2,
    "supervised-sweep": 3,
    "downstream-sweep": 4,
    "verify": 5,
}

# seed-stream purposes
_MIXING, _NET, _DATA, _GRAD = 0, 1, 2, 3

#: Attack budget used when the config leaves epsilon unset.
DEFAULT_EPSILON = {
    "contrastive-sweep": "calibrate",
    "gamma-sweep": None,
    "supervised-sweep": 0.002,
    "downstream-sweep": 0.01,
    "verify": "theory",
}

#: Node-assignment mode used when the config leaves it unset. The sweeps that
#: reproduce randomized-leakage numbers need the independent construction;
#: the loss sweeps use the deterministic grouped one.
DEFAULT_ASSIGNMENT = {
    "contrastive-sweep": "independent",
    "gamma-sweep": "independent",
    "supervised-sweep": "grouped",
    "downstream-sweep": "grouped",
    "verify": "grouped",
}

CSV_HEADER = "preset,m,metric,mean,std,reps,epsilon,seed"

# calibration
CALIBRATION_TARGET = 0.8286
CALIBRATION_BRACKET = (1e-4, 1.0)
CALIBRATION_MAX_ITERS = 40
#: Float-noise slack for the monotonicity guard; evaluations share random
#: numbers, so any larger decrease is a real property of the loss curve.
MONOTONE_SLACK = 1e-12

# verify-internal scales, pinned independently of the main config
ISO_D, ISO_K, ISO_TRIALS, ISO_SAMPLES = 8, 4, 50, 100_000
GRAD_PAIRS, GRAD_STEP, GRAD_MARGIN = 1000, 1e-6, 1e-4
GRAD_NET_D, GRAD_NET_H = 12, 24

_CHUNK = 256


class ConfigError(ValueError):
    """Invalid experiment configuration or config-file content."""


class CalibrationError(RuntimeError):
    """Attack-budget calibration could not reach its target."""


class ReportSchemaError(ValueError):
    """A report row violates the CSV schema."""


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ExperimentConfig:
    """Complete description of one preset run.

    ``epsilon`` may be a float budget, the string ``"calibrate"`` (only with
    the contrastive sweep), or None to take the preset default. ``assignment``
    None likewise takes the preset default. ``jobs`` and the output paths are
    execution details and stay out of the report echo.
    """

    preset: str
    d: int = 1000
    k: int = 10
    zeta: float = 0.005
    H: int = 10_000
    n_samples: int = 1000
    reps: int = 30
    m_list: tuple = (1, 2, 5, 10)
    epsilon: object = None
    tau: float = DEFAULT_TAU
    noise_convention: NoiseConvention = NoiseConvention.SCALED_BY_DIM
    seed: int = 0
    output_path: str | None = None
    assignment: str | None = None
    jobs: int = 1
    fix_mixing: bool = False
    svg_path: str | None = None

    def __post_init__(self):
        if self.preset not in PRESETS:
            raise ConfigError(f"unknown preset {self.preset!r}, expected one of {PRESETS}")
        for name in ("d", "k", "H", "n_samples", "reps", "jobs"):
            value = getattr(self, name)
            if not isinstance(value, int) or value < 1:
                raise ConfigError(f"{name} must be a positive integer, got {value!r}")
        if not (0 <= self.seed < 2**64):
            raise ConfigError(f"seed must fit in an unsigned 64-bit integer, got {self.seed!r}")
        if self.k > self.d:
            raise ConfigError(f"k={self.k} exceeds d={self.d}")
        if self.zeta < 0:
            raise ConfigError(f"zeta must be non-negative, got {self.zeta!r}")
        if self.tau <= 0:
            raise ConfigError(f"tau must be positive, got {self.tau!r}")
        object.__setattr__(self, "m_list", tuple(int(m) for m in self.m_list))
        if len(self.m_list) == 0:
            raise ConfigError("m_list must not be empty")
        for m in self.m_list:
            if m < 1:
                raise ConfigError(f"purification level m must be >= 1, got {m}")
            if self.d % m != 0 or (self.H * m) % self.d != 0:
                raise ConfigError(
                    f"m={m} incompatible with d={self.d}, H={self.H}: "
                    "need d % m == 0 and (H * m) % d == 0"
                )
        if self.epsilon is not None and not isinstance(self.epsilon, str):
            eps = float(self.epsilon)
            if not (eps >= 0 and math.isfinite(eps)):
                raise ConfigError(f"epsilon must be finite and non-negative, got {eps!r}")
            object.__setattr__(self, "epsilon", eps)
        if isinstance(self.epsilon, str):
            if self.epsilon != "calibrate":
                raise ConfigError(f"epsilon must be a number or 'calibrate', got {self.epsilon!r}")
            if self.preset != "contrastive-sweep":
                raise ConfigError("epsilon='calibrate' is only supported by contrastive-sweep")
        if self.assignment not in (None, "grouped", "independent"):
            raise ConfigError(f"assignment must be 'grouped' or 'independent', got {self.assignment!r}")
        if not isinstance(self.noise_convention, NoiseConvention):
            raise ConfigError(f"noise_convention must be a NoiseConvention, got {self.noise_convention!r}")

    @property
    def effective_assignment(self) -> str:
        return self.assignment or DEFAULT_ASSIGNMENT[self.preset]


_CONFIG_COERCERS = {
    "preset": str,
    "d": int,
    "k": int,
    "zeta": float,
    "H": int,
    "n_samples": int,
    "reps": int,
    "m_list": lambda v: tuple(int(p) for p in str(v).split(",") if p.strip()) if isinstance(v, str) else tuple(v),
    "epsilon": lambda v: v if v is None or v == "calibrate" else float(v),
    "tau": float,
    "noise_convention": lambda v: v if isinstance(v, NoiseConvention) else NoiseConvention[str(v).upper()],
    "seed": int,
    "output_path": str,
    "assignment": str,
    "jobs": int,
    "fix_mixing": lambda v: v if isinstance(v, bool) else {"true": True, "1": True, "false": False, "0": False}[str(v).lower()],
    "svg_path": str,
}


def config_from_mapping(preset: str, mapping: dict) -> ExperimentConfig:
    """Build a config from string-or-typed values, rejecting unknown keys."""
    kwargs = {}
    for key, value in mapping.items():
        if key == "preset":
            if str(value) != preset:
                raise ConfigError(f"config file names preset {value!r} but {preset!r} was requested")
            continue
        coerce = _CONFIG_COERCERS.get(key)
        if coerce is None:
            raise ConfigError(f"unknown config key {key!r}")
        try:
            kwargs[key] = coerce(value)
        except (TypeError, ValueError, KeyError) as exc:
            raise ConfigError(f"bad value for {key!r}: {value!r} ({exc})") from exc
    return ExperimentConfig(preset=preset, **kwargs)


def _effective_epsilon(config: ExperimentConfig) -> object:
    """The attack budget the run will use: a float, 'calibrate', or None."""
    eps = config.epsilon
    if eps is None:
        eps = DEFAULT_EPSILON[config.preset]
    if eps == "theory":
        eps = theory_epsilon(config.d, config.k, 1)
    return eps


# ---------------------------------------------------------------------------
# report and CSV
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MetricRow:
    """One CSV row: a named statistic at one purification level."""

    preset: str
    m: int | None
    metric: str
    mean: float
    std: float
    reps: int
    epsilon: float | None
    seed: int


@dataclass
class ExperimentReport:
    """All rows of one preset run plus the effective settings behind them.

    ``wall_clock_seconds`` is informational and never serialized: the CSV
    must be bit-identical across reruns.
    """

    config: ExperimentConfig
    rows: list = field(default_factory=list)
    calibrated_epsilon: float | None = None
    epsilon_effective: float | None = None
    wall_clock_seconds: float = 0.0

    def echo_items(self) -> list:
        cfg = self.config
        eps_cfg = cfg.epsilon
        items = {
            "preset": cfg.preset,
            "d": cfg.d,
            "k": cfg.k,
            "zeta": repr(cfg.zeta),
            "H": cfg.H,
            "n_samples": cfg.n_samples,
            "reps": cfg.reps,
            "m_list": ",".join(str(m) for m in cfg.m_list),
            "epsilon": "" if eps_cfg is None else (eps_cfg if isinstance(eps_cfg, str) else repr(float(eps_cfg))),
            "epsilon_effective": "" if self.epsilon_effective is None else repr(float(self.epsilon_effective)),
            "calibrated_epsilon": "" if self.calibrated_epsilon is None else repr(float(self.calibrated_epsilon)),
            "tau": repr(float(cfg.tau)),
            "noise_convention": cfg.noise_convention.name.lower(),
            "assignment": cfg.effective_assignment,
            "fix_mixing": "true" if cfg.fix_mixing else "false",
            "seed": cfg.seed,
        }
        return sorted(items.items())


def validate_report(report: ExperimentReport) -> None:
    """Schema check before serialization; raises ReportSchemaError."""
    for i, row in enumerate(report.rows):
        where = f"row {i} ({row.metric!r})"
        if row.preset != report.config.preset:
            raise ReportSchemaError(f"{where}: preset {row.preset!r} != {report.config.preset!r}")
        if row.m is not None and (not isinstance(row.m, int) or row.m < 1):
            raise ReportSchemaError(f"{where}: bad m {row.m!r}")
        if not row.metric or any(c in row.metric for c in ",\n\r"):
            raise ReportSchemaError(f"{where}: bad metric name {row.metric!r}")
        if not math.isfinite(row.mean):
            raise ReportSchemaError(f"{where}: non-finite mean {row.mean!r}")
        if not math.isfinite(row.std) or row.std < 0:
            raise ReportSchemaError(f"{where}: bad std {row.std!r}")
        if not isinstance(row.reps, int) or row.reps < 1:
            raise ReportSchemaError(f"{where}: bad reps {row.reps!r}")
        if row.epsilon is not None and not (math.isfinite(row.epsilon) and row.epsilon >= 0):
            raise ReportSchemaError(f"{where}: bad epsilon {row.epsilon!r}")


def report_to_csv(report: ExperimentReport) -> str:
    """Serialize to the `preset,m,metric,mean,std,reps,epsilon,seed` schema."""
    validate_report(report)
    lines = [f"# {key}={value}" for key, value in report.echo_items()]
    lines.append(CSV_HEADER)
    for row in report.rows:
        m_field = "" if row.m is None else str(row.m)
        eps_field = "" if row.epsilon is None else repr(float(row.epsilon))
        lines.append(
            f"{row.preset},{m_field},{row.metric},{repr(float(row.mean))},"
            f"{repr(float(row.std))},{row.reps},{eps_field},{row.seed}"
        )
    return "\n".join(lines) + "\n"


def write_report(report: ExperimentReport, path) -> None:
    Path(path).write_text(report_to_csv(report), encoding="utf-8")


# ---------------------------------------------------------------------------
# seed streams
# ---------------------------------------------------------------------------


def _stream(seed: int, tag: int, rep: int, purpose: int, m: int | None = None) -> np.random.Generator:
    key = (tag, rep, purpose) if m is None else (tag, rep, purpose, m)
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=key))


# ---------------------------------------------------------------------------
# per-repetition tasks (module-level for process pools)
# ---------------------------------------------------------------------------


def _chunked_adv_sums(atk: AttackSpec, kind: LossKind, net: GatedNetwork, make_chunk, n: int):
    """Sum clean/adversarial losses over row chunks to bound memory."""
    clean_sum = adv_sum = 0.0
    flips = 0
    for i in range(0, n, _CHUNK):
        ev = adv_loss(atk, kind, net, *make_chunk(i, min(i + _CHUNK, n)))
        clean_sum += float(np.sum(ev.clean))
        adv_sum += float(np.sum(ev.adversarial))
        flips += int(np.sum(ev.gate_flips))
    return clean_sum / n, adv_sum / n, flips


def _slice_pair(pair: ContrastivePair, i: int, j: int) -> ContrastivePair:
    return ContrastivePair(
        z=pair.z[i:j],
        z_prime=pair.z_prime[i:j],
        y=pair.y,
        x=pair.x[i:j],
        x_prime=pair.x_prime[i:j],
    )


def _rep_model(args: dict, rep: int) -> SparseModel:
    mix_rep = 0 if args["fix_mixing"] else rep
    M = sample_unitary(args["d"], _stream(args["seed"], args["tag"], mix_rep, _MIXING))
    return SparseModel(
        d=args["d"],
        k=args["k"],
        zeta=args["zeta"],
        M=M,
        noise_convention=args["conv"],
    )


def _rep_contrastive(args: dict, m: int, rep: int) -> dict:
    model = _rep_model(args, rep)
    spec = PurifiedSpec.for_model(model, m, args["H"])
    net = build_purified(model, spec, _stream(args["seed"], args["tag"], rep, _NET, m), args["assignment"])
    net = pseudo_head(net, args["tau"])
    data_rng = _stream(args["seed"], args["tag"], rep, _DATA)
    pair_sim = sample_pair(model, 1, data_rng, args["n"])
    pair_dis = sample_pair(model, -1, data_rng, args["n"])
    atk = AttackSpec(norm=AttackNorm.L2, epsilon=args["epsilon"])
    kind = LossKind.CONTRASTIVE_LOGISTIC
    clean_sim, adv_sim, _ = _chunked_adv_sums(
        atk, kind, net, lambda i, j: (_slice_pair(pair_sim, i, j),), args["n"]
    )
    clean_dis, adv_dis, _ = _chunked_adv_sums(
        atk, kind, net, lambda i, j: (_slice_pair(pair_dis, i, j),), args["n"]
    )
    return {"clean_sim": clean_sim, "adv_sim": adv_sim, "clean_dis": clean_dis, "adv_dis": adv_dis}


def _rep_gamma(args: dict, m: int, rep: int) -> dict:
    model = SparseModel(d=args["d"], k=args["k"], zeta=args["zeta"], M=None, noise_convention=args["conv"])
    spec = PurifiedSpec.for_model(model, m, args["H"])
    g1, g2 = _gamma_one_rep(
        model,
        spec,
        args["assignment"],
        args["n"],
        _stream(args["seed"], args["tag"], rep, _NET, m),
        _stream(args["seed"], args["tag"], rep, _DATA),
    )
    return {"gamma1": g1, "gamma2": g2}


def _rep_supervised(args: dict, m: int, rep: int) -> dict:
    model = _rep_model(args, rep)
    spec = PurifiedSpec.for_model(model, m, args["H"])
    net = build_purified(model, spec, _stream(args["seed"], args["tag"], rep, _NET, m), args["assignment"])
    data_rng = _stream(args["seed"], args["tag"], rep, _DATA)
    X = sample_features(model, data_rng, args["n"])
    Z = observe(model, X, data_rng)
    y = respond(model, X, data_rng)
    atk = AttackSpec(norm=AttackNorm.L2, epsilon=args["epsilon"])
    clean, adv, _ = _chunked_adv_sums(
        atk, LossKind.SQUARE, net, lambda i, j: (Z[i:j], y[i:j]), args["n"]
    )
    return {"clean": clean, "adv": adv, "gap": adv - clean}


def _rep_downstream(args: dict, m: int, rep: int) -> dict:
    model = _rep_model(args, rep)
    spec = PurifiedSpec.for_model(model, m, args["H"])
    net = build_purified(model, spec, _stream(args["seed"], args["tag"], rep, _NET, m), args["assignment"])
    task = make_downstream_task(args["d"])
    atk = AttackSpec(norm=AttackNorm.L2, epsilon=args["epsilon"])
    result = robustness_gap(
        net,
        model,
        task,
        atk,
        n_train=args["n"],
        n_test=args["n"],
        rng=_stream(args["seed"], args["tag"], rep, _DATA),
    )
    return {
        "l_clean": result.loss_clean,
        "l_adv": result.loss_adv,
        "gap": result.gap,
        "ridge_fallback": float(result.degenerate_fallback),
    }


_REP_FUNCS = {
    "contrastive-sweep": _rep_contrastive,
    "gamma-sweep": _rep_gamma,
    "supervised-sweep": _rep_supervised,
    "downstream-sweep": _rep_downstream,
}


def _rep_task(task: tuple) -> tuple:
    args, m, rep = task
    return m, rep, _REP_FUNCS[args["preset"]](args, m, rep)


def _task_args(config: ExperimentConfig, epsilon: float | None) -> dict:
    return {
        "preset": config.preset,
        "tag": PRESET_TAGS[config.preset],
        "d": config.d,
        "k": config.k,
        "zeta": config.zeta,
        "H": config.H,
        "n": config.n_samples,
        "epsilon": epsilon,
        "tau": config.tau,
        "conv": config.noise_convention,
        "seed": config.seed,
        "assignment": config.effective_assignment,
        "fix_mixing": config.fix_mixing,
    }


def _collect(config: ExperimentConfig, args: dict, m_values) -> dict:
    """Run every (m, rep) task, serially or in a process pool, keyed merge."""
    tasks = [(args, m, rep) for m in m_values for rep in range(config.reps)]
    if config.jobs > 1:
        with ProcessPoolExecutor(max_workers=config.jobs) as pool:
            outputs = list(pool.map(_rep_task, tasks, chunksize=1))
    else:
        outputs = [_rep_task(t) for t in tasks]
    return {(m, rep): metrics for m, rep, metrics in outputs}


def _mean_std(values: np.ndarray) -> tuple:
    mean = float(np.mean(values))
    std = float(np.std(values, ddof=1)) if len(values) > 1 else 0.0
    return mean, std


def _sweep_rows(
    config: ExperimentConfig,
    results: dict,
    metric_order,
    epsilon: float | None,
) -> list:
    rows = []
    for m in config.m_list:
        for metric in metric_order:
            values = np.array([results[(m, rep)][metric] for rep in range(config.reps)])
            mean, std = _mean_std(values)
            rows.append(
                MetricRow(
                    preset=config.preset,
                    m=m,
                    metric=metric,
                    mean=mean,
                    std=std,
                    reps=config.reps,
                    epsilon=epsilon,
                    seed=config.seed,
                )
            )
    return rows


# ---------------------------------------------------------------------------
# calibration
# ---------------------------------------------------------------------------


def _adv_dis_curve_point(config: ExperimentConfig, epsilon: float) -> tuple:
    """Mean and std of the m=1 adversarial dissimilar loss at one budget.

    All evaluations share networks and data (the seed streams do not involve
    epsilon), so the point is a deterministic function of the budget and the
    measured curve is exactly comparable across budgets.
    """
    args = _task_args(config, epsilon)
    results = _collect(config, args, (1,))
    values = np.array([results[(1, rep)]["adv_dis"] for rep in range(config.reps)])
    return _mean_std(values)


def calibrate_epsilon(config: ExperimentConfig, target: float = CALIBRATION_TARGET) -> float:
    """Bisect the attack budget so the m=1 adversarial dissimilar mean hits target.

    Succeeds when the measured mean is within one across-repetition std of
    the target. Raises CalibrationError when the target is outside what the
    bracket can reach or when the measured curve is not non-decreasing over
    the evaluated budgets.
    """
    if config.preset != "contrastive-sweep":
        raise ConfigError("calibration is defined for the contrastive-sweep preset")
    lo, hi = CALIBRATION_BRACKET
    seen: dict[float, float] = {}

    def measure(eps: float) -> tuple:
        mean, std = _adv_dis_curve_point(config, eps)
        seen[eps] = mean
        points = sorted(seen.items())
        for (e1, m1), (e2, m2) in zip(points, points[1:]):
            if m2 < m1 - MONOTONE_SLACK:
                raise CalibrationError(
                    "adversarial dissimilar loss is not non-decreasing in epsilon: "
                    f"loss({e1!r})={m1!r} > loss({e2!r})={m2!r}"
                )
        return mean, std

    mean_lo, std_lo = measure(lo)
    if abs(mean_lo - target) <= std_lo:
        return lo
    if mean_lo > target:
        raise CalibrationError(
            f"target {target} sits below the bracket: loss({lo})={mean_lo}, "
            "reduce the target or the lower bracket end"
        )
    mean_hi, std_hi = measure(hi)
    if abs(mean_hi - target) <= std_hi:
        return hi
    if mean_hi < target:
        raise CalibrationError(
            f"target {target} unreachable in the bracket: loss({lo})={mean_lo}, "
            f"loss({hi})={mean_hi}"
        )

    for _ in range(CALIBRATION_MAX_ITERS):
        mid = math.sqrt(lo * hi)  # the budget spans decades: bisect in log space
        mean_mid, std_mid = measure(mid)
        if abs(mean_mid - target) <= std_mid:
            return mid
        if mean_mid < target:
            lo = mid
        else:
            hi = mid
    raise CalibrationError(
        f"bisection exhausted after {CALIBRATION_MAX_ITERS} steps: bracket "
        f"[{lo}, {hi}], losses [{seen[lo]}, {seen[hi]}], target {target}"
    )


# ---------------------------------------------------------------------------
# preset runners
# ---------------------------------------------------------------------------


def run_contrastive_sweep(config: ExperimentConfig) -> ExperimentReport:
    """Clean/adversarial contrastive losses on similar and dissimilar pairs."""
    started = time.monotonic()
    eps = _effective_epsilon(config)
    calibrated = None
    if eps == "calibrate":
        calibrated = calibrate_epsilon(config)
        eps = calibrated
    results = _collect(config, _task_args(config, eps), config.m_list)
    rows = _sweep_rows(config, results, ("clean_sim", "adv_sim", "clean_dis", "adv_dis"), eps)
    return ExperimentReport(
        config=config,
        rows=rows,
        calibrated_epsilon=calibrated,
        epsilon_effective=eps,
        wall_clock_seconds=time.monotonic() - started,
    )


def run_gamma_sweep(config: ExperimentConfig) -> ExperimentReport:
    """Leakage block statistics vs m, plus per-repetition log-log slopes."""
    started = time.monotonic()
    results = _collect(config, _task_args(config, None), config.m_list)
    rows = _sweep_rows(config, results, ("gamma1", "gamma2"), None)
    if len(config.m_list) >= 2:
        log_m = np.log(np.array(config.m_list, dtype=np.float64))
        for metric in ("gamma1", "gamma2"):
            slopes = []
            for rep in range(config.reps):
                values = np.array([results[(m, rep)][metric] for m in config.m_list])
                if np.any(values <= 0):
                    break
                slopes.append(np.polynomial.polynomial.polyfit(log_m, np.log(values), 1)[1])
            else:
                mean, std = _mean_std(np.array(slopes))
                rows.append(
                    MetricRow(
                        preset=config.preset,
                        m=None,
                        metric=f"{metric}_loglog_slope",
                        mean=mean,
                        std=std,
                        reps=config.reps,
                        epsilon=None,
                        seed=config.seed,
                    )
                )
    return ExperimentReport(config=config, rows=rows, wall_clock_seconds=time.monotonic() - started)


def run_supervised_sweep(config: ExperimentConfig) -> ExperimentReport:
    """Square-loss robustness gaps vs m with matched data across m."""
    started = time.monotonic()
    eps = _effective_epsilon(config)
    results = _collect(config, _task_args(config, eps), config.m_list)
    rows = _sweep_rows(config, results, ("clean", "adv", "gap"), eps)
    if 1 in config.m_list:
        base = np.array([results[(1, rep)]["gap"] for rep in range(config.reps)])
        if np.all(np.abs(base) > 0):
            for m in config.m_list:
                gaps = np.array([results[(m, rep)]["gap"] for rep in range(config.reps)])
                mean, std = _mean_std(gaps / base)
                rows.append(
                    MetricRow(
                        preset=config.preset,
                        m=m,
                        metric="gap_ratio",
                        mean=mean,
                        std=std,
                        reps=config.reps,
                        epsilon=eps,
                        seed=config.seed,
                    )
                )
    return ExperimentReport(
        config=config, rows=rows, epsilon_effective=eps,
        wall_clock_seconds=time.monotonic() - started,
    )


def run_downstream_sweep(config: ExperimentConfig) -> ExperimentReport:
    """Downstream robustness inheritance vs pre-training purification."""
    started = time.monotonic()
    eps = _effective_epsilon(config)
    results = _collect(config, _task_args(config, eps), config.m_list)
    rows = _sweep_rows(config, results, ("l_clean", "l_adv", "gap", "ridge_fallback"), eps)
    return ExperimentReport(
        config=config, rows=rows, epsilon_effective=eps,
        wall_clock_seconds=time.monotonic() - started,
    )


# ---------------------------------------------------------------------------
# the verify preset
# ---------------------------------------------------------------------------


def _grad_fd_max_rel_err(kind: LossKind, rng: np.random.Generator) -> float:
    """Worst relative error of grad_z against central finite differences.

    Uses small dense networks and rejects inputs whose gate margins (and,
    for the absolute loss, output margin) are within GRAD_MARGIN of a kink,
    so the finite-difference step never crosses a non-differentiable point.
    """
    d, H = GRAD_NET_D, GRAD_NET_H
    worst = 0.0
    for _ in range(GRAD_PAIRS):
        W = rng.standard_normal((d, H)) / math.sqrt(d)
        b = 0.05 + 0.3 * np.abs(rng.standard_normal(H))
        net = GatedNetwork(b=b, head=None, W=W)
        if kind is LossKind.CONTRASTIVE_LOGISTIC:
            net = pseudo_head(net, DEFAULT_TAU)
        else:
            net = net.with_head(ScalarHead(a=rng.standard_normal(H)))

        for _ in range(100):
            z = rng.standard_normal(d)
            if np.min(np.abs(np.abs(net.preacts(z)) - net.b)) <= GRAD_MARGIN:
                continue
            if kind is LossKind.ABSOLUTE and abs(forward_supervised(net, z)) <= GRAD_MARGIN:
                continue
            break
        else:
            raise RuntimeError("could not draw an input clear of gate margins")

        if kind is LossKind.CONTRASTIVE_LOGISTIC:
            y = -1 if rng.random() < 0.5 else 1
            z_prime = rng.standard_normal(d)
            pair = ContrastivePair(z=z, z_prime=z_prime, y=y, x=np.zeros(d), x_prime=np.zeros(d))
            grad = grad_z(kind, net, pair)

            def loss_at(zv):
                moved = ContrastivePair(z=zv, z_prime=z_prime, y=y, x=pair.x, x_prime=pair.x_prime)
                return float(loss_contrastive(score_contrastive(net, moved), y))

        else:
            if kind is LossKind.LOGISTIC:
                y = -1.0 if rng.random() < 0.5 else 1.0
            else:
                y = float(rng.standard_normal())
            grad = grad_z(kind, net, z, y)

            def loss_at(zv):
                return float(loss_supervised(kind, forward_supervised(net, zv), y))

        fd = np.empty(d)
        for j in range(d):
            step = np.zeros(d)
            step[j] = GRAD_STEP
            fd[j] = (loss_at(z + step) - loss_at(z - step)) / (2 * GRAD_STEP)
        denom = max(np.linalg.norm(fd), 1e-12)
        worst = max(worst, float(np.linalg.norm(fd - grad) / denom))
    return worst


def run_verify(config: ExperimentConfig) -> ExperimentReport:
    """The property battery; single pass, serial, fixed internal scales."""
    started = time.monotonic()
    eps = _effective_epsilon(config)
    theory_eps = theory_epsilon(config.d, config.k, 1)
    seed, tag = config.seed, PRESET_TAGS[config.preset]
    n = config.n_samples
    rows: list[MetricRow] = []

    def add(metric: str, value: float, m: int | None = None, epsilon: float | None = None):
        rows.append(
            MetricRow(
                preset=config.preset,
                m=m,
                metric=metric,
                mean=float(value),
                std=0.0,
                reps=1,
                epsilon=epsilon,
                seed=config.seed,
            )
        )

    M = sample_unitary(config.d, _stream(seed, tag, 0, _MIXING))
    model = SparseModel(
        d=config.d, k=config.k, zeta=config.zeta, M=M, noise_convention=config.noise_convention
    )
    spec1 = PurifiedSpec.for_model(model, 1, config.H)

    # effectiveness sandwich (L2, any mixing) on the grouped m=1 net
    net_grouped = build_purified(model, spec1, _stream(seed, tag, 0, _NET, 1), "grouped")
    add("sandwich_pass_rate", l2_sandwich_check(net_grouped, model, n, _stream(seed, tag, 0, _DATA)), m=1)
    head = _require_scalar_head(net_grouped)
    forced_open = float(np.linalg.norm(net_grouped.matmul_w(head.a)))
    add("sandwich_forced_open_abs_err", abs(forced_open - float(np.linalg.norm(model.theta0))), m=1)

    # gate stability on the independent m=1 net, contrastive attack
    net_ind = pseudo_head(
        build_purified(model, spec1, _stream(seed, tag, 1, _NET, 1), "independent"), config.tau
    )
    kind = LossKind.CONTRASTIVE_LOGISTIC
    for suffix, net_g, gate_eps in (
        ("", net_ind, eps),
        ("_2b", net_ind.with_gates(2 * net_ind.b), eps),
        ("_theory", net_ind, theory_eps),
    ):
        stats = gate_stability(
            net_g, model, AttackSpec(norm=AttackNorm.L2, epsilon=gate_eps), kind, n,
            _stream(seed, tag, 1, _DATA),
        )
        add(f"gate_noise_activation_frac{suffix}", stats.noise_activation_fraction, m=1, epsilon=gate_eps)
        add(f"gate_feature_deactivation_frac{suffix}", stats.feature_deactivation_fraction, m=1, epsilon=gate_eps)
        add(f"gate_attack_flip_frac{suffix}", stats.attack_flip_fraction, m=1, epsilon=gate_eps)
        total = (stats.noise_activations + stats.feature_deactivations + stats.attack_flips) / stats.total
        add(f"gate_total_flip_frac{suffix}", total, m=1, epsilon=gate_eps)

    # near-cancellation probability at the gate scale
    add(
        "cancel_prob",
        cancellation_prob(net_ind, model, float(net_ind.b[0]), n, _stream(seed, tag, 2, _DATA)),
        m=1,
    )
    spec2 = PurifiedSpec.for_model(model, 2, config.H)
    net2 = build_purified(model, spec2, _stream(seed, tag, 2, _NET, 2), "independent")
    add(
        "cancel_prob",
        cancellation_prob(net2, model, float(net2.b[0]), n, _stream(seed, tag, 2, _DATA)),
        m=2,
    )

    # isotropy optimality at desk scale
    add(
        "isotropy_win_frac",
        check_isotropy_optimal(
            ISO_D, ISO_K, float(ISO_D), ISO_TRIALS, ISO_SAMPLES, _stream(seed, tag, 3, _DATA)
        ),
    )

    # L1 sandwich needs identity mixing
    model_id = SparseModel(
        d=config.d, k=config.k, zeta=config.zeta, M=None, noise_convention=config.noise_convention
    )
    net_id = build_purified(model_id, spec1, _stream(seed, tag, 4, _NET, 1), "grouped")
    add("linf_sandwich_pass_rate", linf_sandwich_check(net_id, model_id, n, _stream(seed, tag, 4, _DATA)), m=1)

    # analytic gradients vs central finite differences
    grad_rng = _stream(seed, tag, 5, _GRAD)
    for kind in (LossKind.SQUARE, LossKind.ABSOLUTE, LossKind.LOGISTIC, LossKind.CONTRASTIVE_LOGISTIC):
        add(f"grad_max_rel_err_{kind.name.lower()}", _grad_fd_max_rel_err(kind, grad_rng))

    # closed-form annotations
    add("theory_epsilon", theory_eps)
    for m in config.m_list:
        add("psi", psi_rate(config.d, config.k, config.H, m), m=m)

    return ExperimentReport(
        config=config, rows=rows, epsilon_effective=eps,
        wall_clock_seconds=time.monotonic() - started,
    )


_RUNNERS = {
    "contrastive-sweep": run_contrastive_sweep,
    "gamma-sweep": run_gamma_sweep,
    "supervised-sweep": run_supervised_sweep,
    "downstream-sweep": run_downstream_sweep,
    "verify": run_verify,
}


def run_preset(config: ExperimentConfig) -> ExperimentReport:
    """Dispatch to the preset's runner and schema-validate the result."""
    report = _RUNNERS[config.preset](config)
    validate_report(report)
    return report
