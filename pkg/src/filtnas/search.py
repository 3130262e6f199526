"""Sampled gradient estimation and the five search procedures.

All procedures alternate between weight training and distribution updates.
``alpha`` follows plain gradient descent on the expected loss, using the
score-function estimator: the mean over a configuration sample of
``loss * (a - n * p)``.
"""
from __future__ import annotations

import json
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from ._numeric import round_half_away_int
from ._seeds import child_rng, derive_seed
from .arch import ArchitectureSpec, Mode, NetworkConfig, make_homogeneous
from .complexity import config_complexity
from .dist import AlphaParams, Family, layer_probs, sample_network, score_vector
from .errors import ConfigError, DomainError
from .net import (
    Dataset,
    SGD,
    TrainSettings,
    Weights,
    fine_tune,
    forward,
    init_weights,
    train_epochs,
    train_from_scratch,
    evaluate,
)
from .objective import InterpTable, LossBreakdown, combined_loss, cross_entropy, interpolation_loss

HOMOGENEOUS_RATIOS = (0.25, 0.5, 0.75, 1.0)


@dataclass
class SampleSet:
    configs: list
    losses: list

    def __post_init__(self):
        if not self.configs:
            raise DomainError("sample set is empty")
        if len(self.configs) != len(self.losses):
            raise DomainError("configs and losses must align")


@dataclass
class SearchSettings:
    family: Family
    sample_size: int = 8
    lam: float = 0.0
    sigma: str = "hinge"
    target: object = None  # op index, width ratio, or NetworkConfig id string
    alpha_lr: float = 0.1
    t_omega: int = 1
    k_omega: int = 10
    fine_tune_epochs: int = 5
    warmup_epochs: int = 0
    alpha_batch_size: int | None = None
    max_iterations: int = 20
    max_alpha_steps: int | None = None
    threshold: float = 1e-3
    window: int = 10
    seed: int = 0
    init_prob: float | None = None
    homogeneous_ratios: tuple = HOMOGENEOUS_RATIOS
    interp_sigma: str = "identity"
    include_memory: bool | None = None
    workers: int = 1
    train: TrainSettings = field(default_factory=TrainSettings)

    def __post_init__(self):
        if isinstance(self.family, str):
            self.family = Family(self.family)
        if isinstance(self.train, dict):
            self.train = TrainSettings(**self.train)
        if self.sample_size < 1:
            raise DomainError("sample_size must be >= 1")
        if self.alpha_lr <= 0:
            raise DomainError("alpha_lr must be > 0")
        if self.lam < 0:
            raise DomainError("lam must be >= 0")
        if self.k_omega < 1:
            raise DomainError("k_omega must be >= 1")
        self.homogeneous_ratios = tuple(self.homogeneous_ratios)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["family"] = self.family.value
        return d


# ---------------------------------------------------------------- trace


class SearchTrace:
    """Append-only list of per-iteration records; serializes as JSON lines."""

    def __init__(self, records: Sequence[dict] = ()):
        self.records: list = []
        for r in records:
            self.append(r)

    def append(self, record: dict) -> None:
        if self.records and record["iteration"] <= self.records[-1]["iteration"]:
            raise DomainError("trace iterations must be strictly increasing")
        self.records.append(record)

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def without_wall_clock(self) -> list:
        return [{k: v for k, v in r.items() if k != "wall_clock"} for r in self.records]

    def to_jsonl(self, path) -> Path:
        path = Path(path)
        with path.open("w") as fh:
            for r in self.records:
                fh.write(json.dumps(r, allow_nan=False) + "\n")
        return path

    @classmethod
    def from_jsonl(cls, path) -> "SearchTrace":
        with Path(path).open() as fh:
            return cls([json.loads(line) for line in fh if line.strip()])


# ---------------------------------------------------------------- estimator


def estimate_gradient(
    sample: SampleSet, alpha: AlphaParams, arch: ArchitectureSpec, weights: Sequence[float] | None = None
) -> list:
    """Score-function estimate of dJ/dalpha, laid out like ``alpha``.

    Without ``weights`` each sample counts ``1/|S|``. Passing the exact
    probabilities of an exhaustive sample turns the estimate into the exact
    gradient.
    """
    n = len(sample.configs)
    w = np.full(n, 1.0 / n) if weights is None else np.asarray(weights, dtype=float)
    grad = [np.zeros(v.size) for v in alpha.per_layer]
    probs = [layer.trials * layer_probs(alpha, l) for l, layer in enumerate(arch.layers)]
    for wi, cfg, loss in zip(w, sample.configs, sample.losses):
        if not math.isfinite(loss):
            raise DomainError(f"non-finite loss {loss} for config {cfg.config_id}")
        for l, g in enumerate(grad):
            g += wi * loss * (np.asarray(cfg[l], dtype=float) - probs[l])
    return grad


def alpha_step(alpha: AlphaParams, gradient: Sequence[np.ndarray], rate: float) -> AlphaParams:
    if len(gradient) != len(alpha.per_layer):
        raise DomainError("gradient does not match alpha layout")
    return AlphaParams(
        alpha.family, tuple(v - rate * np.asarray(g) for v, g in zip(alpha.per_layer, gradient))
    )


def expected_config(alpha: AlphaParams, arch: ArchitectureSpec) -> NetworkConfig:
    """Per-layer rounded mean of the binomial distribution, ``round((C-1) p)``."""
    if alpha.family is not Family.BINOMIAL:
        raise DomainError("the expected configuration is defined for the binomial family only")
    alpha.check(arch)
    return NetworkConfig(
        tuple((round_half_away_int(layer.trials * layer_probs(alpha, l)[0]),) for l, layer in enumerate(arch.layers))
    )


def mean_quant_config(alpha: AlphaParams, arch: ArchitectureSpec) -> NetworkConfig:
    """Largest-remainder rounding of the multinomial mean ``C p`` per layer."""
    if alpha.family is not Family.MULTINOMIAL:
        raise DomainError("mean_quant_config applies to the multinomial family")
    layers = []
    for l, layer in enumerate(arch.layers):
        mean = layer.filters * layer_probs(alpha, l)
        counts = np.floor(mean).astype(int)
        order = np.argsort(-(mean - counts), kind="stable")
        counts[order[: layer.filters - counts.sum()]] += 1
        layers.append(tuple(int(c) for c in counts))
    return NetworkConfig(tuple(layers))


def initial_alpha(arch: ArchitectureSpec, settings: SearchSettings) -> AlphaParams:
    if settings.family is not Family.for_mode(arch.mode):
        raise ConfigError(f"{settings.family.value} search on a {arch.mode.value} architecture")
    if settings.init_prob is None:
        return AlphaParams.zeros(arch)
    if settings.family is not Family.BINOMIAL:
        raise ConfigError("init_prob applies to binomial searches")
    return AlphaParams.from_probs(arch, settings.init_prob)


def resolve_target(arch: ArchitectureSpec, target) -> NetworkConfig:
    """Target configuration from a selector: ``None`` picks the most capable
    homogeneous config (last op / full width)."""
    if isinstance(target, NetworkConfig):
        return target
    if isinstance(target, str):
        return NetworkConfig.from_id(target)
    if target is None:
        target = len(arch.layers[0].ops.quant_ops) - 1 if arch.mode is Mode.QUANTIZATION else 1.0
    return make_homogeneous(arch, target)


# ---------------------------------------------------------------- shared helpers


class _Scorer:
    """Caches per-config complexity terms for the combined loss."""

    def __init__(self, arch: ArchitectureSpec, settings: SearchSettings):
        self.arch = arch
        self.settings = settings
        self.target = resolve_target(arch, settings.target)
        self.opts = {} if settings.include_memory is None else {"include_memory": settings.include_memory}
        self._cache: dict = {}

    def combined(self, ce: float, cfg: NetworkConfig) -> LossBreakdown:
        key = cfg.layers
        if key not in self._cache:
            self._cache[key] = combined_loss(
                0.0, cfg, self.arch, self.target, self.settings.lam, self.settings.sigma, **self.opts
            ).complexity
        com = self._cache[key]
        return LossBreakdown(float(ce), com, float(ce) + self.settings.lam * com, self.settings.lam)

    def complexity(self, cfg: NetworkConfig) -> float:
        return config_complexity(cfg, self.arch, **self.opts)


def _map(fn: Callable, items: Sequence, workers: int) -> list:
    if workers <= 1 or len(items) <= 1:
        return [fn(i, item) for i, item in enumerate(items)]
    with ThreadPoolExecutor(workers) as pool:
        return list(pool.map(fn, range(len(items)), items))


def _batch_ce(weights: Weights, arch: ArchitectureSpec, cfg: NetworkConfig, batch) -> float:
    x, y = batch
    return cross_entropy(forward(weights, arch, cfg, x), y)


def _sample_records(configs, breakdowns) -> list:
    return [{"config": c.config_id, **b.to_dict()} for c, b in zip(configs, breakdowns)]


def _alpha_record(alpha: AlphaParams, arch: ArchitectureSpec) -> dict:
    return {
        "alpha": alpha.to_lists(),
        "probs": [layer_probs(alpha, l).tolist() for l in range(len(arch))],
    }


class _Convergence:
    """Stops once every alpha entry moved less than ``threshold`` per
    iteration over the last ``window`` iterations."""

    def __init__(self, threshold: float, window: int):
        self.threshold = threshold
        self.window = window
        self.moves: list = []

    def update(self, before: AlphaParams, after: AlphaParams) -> bool:
        move = max(float(np.max(np.abs(a - b))) for a, b in zip(after.per_layer, before.per_layer))
        self.moves.append(move)
        recent = self.moves[-self.window:]
        return len(recent) == self.window and max(recent) < self.threshold


def _steps_left(settings: SearchSettings, steps: int) -> bool:
    return settings.max_alpha_steps is None or steps < settings.max_alpha_steps


def _alpha_updates(alpha, arch, settings, scorer, rng, batches, losses_for, steps, fixed=None):
    """Run one alpha step per batch. ``losses_for(batch_index, batch, configs)``
    returns cross-entropies; ``fixed`` is an already-drawn ``(alpha, configs)``
    pair reused on every batch (its alpha scores the sample)."""
    records = []
    for b, batch in enumerate(batches):
        if not _steps_left(settings, steps):
            break
        if fixed is None:
            score_alpha = alpha
            configs = [sample_network(alpha, arch, rng) for _ in range(settings.sample_size)]
        else:
            score_alpha, configs = fixed
        ces = losses_for(b, batch, configs)
        breakdowns = [scorer(ce, cfg) for ce, cfg in zip(ces, configs)]
        sample = SampleSet(configs, [bd.combined for bd in breakdowns])
        grad = estimate_gradient(sample, score_alpha, arch)
        alpha = alpha_step(alpha, grad, settings.alpha_lr)
        steps += 1
        records.append({"samples": _sample_records(configs, breakdowns), "gradient": [g.tolist() for g in grad]})
    return alpha, steps, records


# ---------------------------------------------------------------- algorithms


def run_quant_search(
    arch: ArchitectureSpec, data: Dataset, settings: SearchSettings, weights: Weights | None = None
):
    """Multinomial search over per-layer bitwidth counts.

    Each iteration trains the shared weights for ``t_omega`` epochs on the
    omega split (one freshly sampled configuration per batch), then takes
    one alpha step per batch of the alpha split.
    """
    alpha = initial_alpha(arch, settings)
    if arch.mode is not Mode.QUANTIZATION:
        raise DomainError("run_quant_search needs a quantization architecture")
    seed = settings.seed
    weights = weights if weights is not None else init_weights(arch, derive_seed(seed, "init"))
    opt = SGD.from_settings(settings.train)
    t_omega, t_alpha = data.part("omega"), data.part("alpha")
    if settings.warmup_epochs:
        # Weights only: lets CE differences between ops emerge before alpha moves.
        warm = lambda rng: sample_network(alpha, arch, rng)
        train_epochs(weights, arch, warm, t_omega, settings.train, settings.warmup_epochs, child_rng(seed, "warmup"), opt)
    scorer = _Scorer(arch, settings)
    trace, conv, steps = SearchTrace(), _Convergence(settings.threshold, settings.window), 0
    for k in range(settings.max_iterations):
        if not _steps_left(settings, steps):
            break
        start = time.perf_counter()
        before = alpha
        rng_w = child_rng(seed, "omega", k)
        sampler = lambda rng, a=alpha: sample_network(a, arch, rng)
        train_losses = train_epochs(weights, arch, sampler, t_omega, settings.train, settings.t_omega, rng_w, opt)

        rng_a = child_rng(seed, "alpha", k)
        batches = list(t_alpha.batches(settings.alpha_batch_size or settings.train.batch_size, rng_a))

        def losses_for(b, batch, configs):
            # Same weights and batch: duplicate configurations share one forward pass.
            memo = {}
            for c in configs:
                if c.layers not in memo:
                    memo[c.layers] = _batch_ce(weights, arch, c, batch)
            return [memo[c.layers] for c in configs]

        alpha, steps, step_records = _alpha_updates(
            alpha, arch, settings, scorer.combined, rng_a, batches, losses_for, steps
        )
        mean_cfg = mean_quant_config(alpha, arch)
        trace.append({
            "iteration": k,
            **_alpha_record(alpha, arch),
            "steps": step_records,
            "alpha_steps": steps,
            "weight_train_ce": float(np.mean(train_losses)) if train_losses else None,
            "expected_config": mean_cfg.config_id,
            "expected_complexity": scorer.complexity(mean_cfg),
            "validation": _validation(weights, arch, data, [mean_cfg] + _last_sampled(step_records)),
            "wall_clock": time.perf_counter() - start,
        })
        if conv.update(before, alpha):
            break
    return alpha, trace


def _last_sampled(step_records) -> list:
    if not step_records:
        return []
    return [NetworkConfig.from_id(s["config"]) for s in step_records[-1]["samples"]]


def _validation(weights, arch, data, configs) -> dict:
    """Validation CE and accuracy per distinct configuration, using the
    given (shared) weights."""
    val = data.part("validation")
    if len(val) == 0 or weights is None:
        return {}
    out = {}
    for cfg in configs:
        if cfg.config_id not in out:
            ce, acc = evaluate(weights, arch, cfg, val)
            out[cfg.config_id] = {"ce": ce, "accuracy": acc}
    return out


def _check_pruning(arch: ArchitectureSpec, settings: SearchSettings) -> AlphaParams:
    alpha = initial_alpha(arch, settings)
    if alpha.family is not Family.BINOMIAL:
        raise DomainError("pruning searches need the binomial family")
    return alpha


def _homogeneous_set(arch, settings) -> list:
    seen, out = set(), []
    for r in settings.homogeneous_ratios:
        cfg = make_homogeneous(arch, r)
        if cfg.layers not in seen:
            seen.add(cfg.layers)
            out.append(cfg)
    return out


def run_prune_basic(arch: ArchitectureSpec, data: Dataset, settings: SearchSettings, weights: Weights | None = None):
    """Slimmable training on the homogeneous set plus the expected
    configuration, then per alpha batch: sample, fine-tune private copies on
    the omega split, and step."""
    alpha = _check_pruning(arch, settings)
    seed = settings.seed
    weights = weights if weights is not None else init_weights(arch, derive_seed(seed, "init"))
    opt = SGD.from_settings(settings.train)
    t_omega, t_alpha = data.part("omega"), data.part("alpha")
    homogeneous = _homogeneous_set(arch, settings)
    scorer = _Scorer(arch, settings)
    trace, conv, steps = SearchTrace(), _Convergence(settings.threshold, settings.window), 0
    for k in range(settings.max_iterations):
        if not _steps_left(settings, steps):
            break
        start = time.perf_counter()
        before = alpha
        exp_cfg = expected_config(alpha, arch)
        train_set = homogeneous + [exp_cfg]
        train_losses = train_epochs(
            weights, arch, train_set, t_omega, settings.train, settings.t_omega, child_rng(seed, "omega", k), opt
        )
        rng_a = child_rng(seed, "alpha", k)
        batches = list(t_alpha.batches(settings.train.batch_size, rng_a))

        def losses_for(b, batch, configs, k=k):
            def tuned_ce(i, cfg):
                tuned = fine_tune(
                    weights, arch, cfg, t_omega, settings.train,
                    settings.fine_tune_epochs, derive_seed(seed, "finetune", k, b, i),
                )
                return _batch_ce(tuned, arch, cfg, batch)
            return _map(tuned_ce, configs, settings.workers)

        alpha, steps, step_records = _alpha_updates(
            alpha, arch, settings, scorer.combined, rng_a, batches, losses_for, steps
        )
        new_exp = expected_config(alpha, arch)
        trace.append({
            "iteration": k,
            **_alpha_record(alpha, arch),
            "steps": step_records,
            "alpha_steps": steps,
            "weight_train_ce": float(np.mean(train_losses)),
            "slimmable_set": [c.config_id for c in train_set],
            "expected_config": new_exp.config_id,
            "expected_complexity": scorer.complexity(new_exp),
            "validation": _validation(weights, arch, data, [exp_cfg] + _last_sampled(step_records)),
            "wall_clock": time.perf_counter() - start,
        })
        if conv.update(before, alpha):
            break
    return alpha, trace


def run_prune_reset(arch: ArchitectureSpec, data: Dataset, settings: SearchSettings):
    """Like the basic search, but the shared weights are re-initialized and
    retrained only on iterations ``k`` with ``k % k_omega == 0``, all stages
    use the whole training set, and one sample per iteration is fine-tuned
    once and then scored on every batch."""
    alpha = _check_pruning(arch, settings)
    seed = settings.seed
    whole = data.training()
    homogeneous = _homogeneous_set(arch, settings)
    scorer = _Scorer(arch, settings)
    trace, conv, steps = SearchTrace(), _Convergence(settings.threshold, settings.window), 0
    weights = None
    for k in range(settings.max_iterations):
        if not _steps_left(settings, steps):
            break
        start = time.perf_counter()
        before = alpha
        record = {"iteration": k, "weight_round": False}
        if k % settings.k_omega == 0:
            weights = init_weights(arch, derive_seed(seed, "reset", k))
            train_set = homogeneous + [expected_config(alpha, arch)]
            train_epochs(
                weights, arch, train_set, whole, settings.train, settings.t_omega,
                child_rng(seed, "omega", k), SGD.from_settings(settings.train),
            )
            record.update(weight_round=True, slimmable_set=[c.config_id for c in train_set])
        rng_a = child_rng(seed, "alpha", k)
        configs = [sample_network(alpha, arch, rng_a) for _ in range(settings.sample_size)]
        tuned = _map(
            lambda i, cfg: fine_tune(
                weights, arch, cfg, whole, settings.train, settings.fine_tune_epochs,
                derive_seed(seed, "finetune", k, i),
            ),
            configs, settings.workers,
        )
        batches = list(whole.batches(settings.train.batch_size, rng_a))
        losses_for = lambda b, batch, cfgs: [_batch_ce(w, arch, c, batch) for w, c in zip(tuned, cfgs)]
        alpha, steps, step_records = _alpha_updates(
            alpha, arch, settings, scorer.combined, rng_a, batches, losses_for, steps, fixed=(alpha, configs)
        )
        new_exp = expected_config(alpha, arch)
        record.update({
            **_alpha_record(alpha, arch),
            "steps": step_records,
            "alpha_steps": steps,
            "expected_config": new_exp.config_id,
            "expected_complexity": scorer.complexity(new_exp),
            "validation": _validation(weights, arch, data, [new_exp] + _last_sampled(step_records)),
            "wall_clock": time.perf_counter() - start,
        })
        trace.append(record)
        if conv.update(before, alpha):
            break
    return alpha, trace


def _run_individual(arch, data, settings, alpha, scorer, tag):
    """Shared loop of the no-sharing searches: every sampled configuration
    trains its own weights from scratch on the whole training set."""
    seed = settings.seed
    whole = data.training()
    trace, conv, steps = SearchTrace(), _Convergence(settings.threshold, settings.window), 0
    for k in range(settings.max_iterations):
        if not _steps_left(settings, steps):
            break
        start = time.perf_counter()
        before = alpha
        rng_a = child_rng(seed, "alpha", k)
        configs = [sample_network(alpha, arch, rng_a) for _ in range(settings.sample_size)]
        seeds = [derive_seed(seed, tag, k, i) for i in range(len(configs))]
        own = _map(
            lambda i, cfg: train_from_scratch(arch, cfg, whole, settings.train, settings.t_omega, seeds[i]),
            configs, settings.workers,
        )
        batches = list(whole.batches(settings.train.batch_size, rng_a))
        losses_for = lambda b, batch, cfgs: [_batch_ce(w, arch, c, batch) for w, c in zip(own, cfgs)]
        alpha, steps, step_records = _alpha_updates(
            alpha, arch, settings, scorer, rng_a, batches, losses_for, steps, fixed=(alpha, configs)
        )
        new_exp = expected_config(alpha, arch)
        trace.append({
            "iteration": k,
            **_alpha_record(alpha, arch),
            "trainings": [{"config": c.config_id, "seed": s} for c, s in zip(configs, seeds)],
            "steps": step_records,
            "alpha_steps": steps,
            "expected_config": new_exp.config_id,
            "validation": {
                c.config_id: dict(zip(("ce", "accuracy"), evaluate(w, arch, c, data.part("validation"))))
                for c, w in zip(configs, own)
            } if len(data.part("validation")) else {},
            "wall_clock": time.perf_counter() - start,
        })
        if conv.update(before, alpha):
            break
    return alpha, trace


def run_prune_noshare(arch: ArchitectureSpec, data: Dataset, settings: SearchSettings):
    """No weight sharing: each sampled configuration trains private weights
    from scratch for ``t_omega`` epochs; losses are the combined loss."""
    alpha = _check_pruning(arch, settings)
    scorer = _Scorer(arch, settings)
    return _run_individual(arch, data, settings, alpha, scorer.combined, "noshare")


def run_prune_interp(arch: ArchitectureSpec, data: Dataset, settings: SearchSettings, table: InterpTable):
    """No-sharing search scored by the interpolation loss (no explicit
    complexity term)."""
    alpha = _check_pruning(arch, settings)
    opts = {} if settings.include_memory is None else {"include_memory": settings.include_memory}

    def scorer(ce, cfg):
        loss = interpolation_loss(ce, cfg, arch, table, settings.interp_sigma, **opts)
        return LossBreakdown(float(ce), 0.0, loss, 0.0)

    return _run_individual(arch, data, settings, alpha, scorer, "interp")


def build_interp_table(
    arch: ArchitectureSpec,
    data: Dataset,
    settings: SearchSettings,
    sessions: int = 5,
    ratios: Sequence[float] | None = None,
) -> InterpTable:
    """Anchor table: each homogeneous width trained from scratch ``sessions``
    times; ``ce_mean`` is the mean training-set cross-entropy."""
    whole = data.training()
    opts = {} if settings.include_memory is None else {"include_memory": settings.include_memory}
    anchors = {}
    for r_idx, ratio in enumerate(ratios or settings.homogeneous_ratios):
        cfg = make_homogeneous(arch, ratio)
        if cfg.layers in anchors:
            continue
        ces = []
        for s in range(sessions):
            w = train_from_scratch(
                arch, cfg, whole, settings.train, settings.t_omega, derive_seed(settings.seed, "anchor", r_idx, s)
            )
            ces.append(evaluate(w, arch, cfg, whole)[0])
        anchors[cfg.layers] = (cfg.config_id, config_complexity(cfg, arch, **opts), float(np.mean(ces)))
    return InterpTable(tuple(sorted(anchors.values(), key=lambda a: a[1])))


ALGORITHMS = {
    "quant": run_quant_search,
    "prune_basic": run_prune_basic,
    "prune_reset": run_prune_reset,
    "prune_noshare": run_prune_noshare,
    "prune_interp": run_prune_interp,
}
