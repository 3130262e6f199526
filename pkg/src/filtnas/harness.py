"""Experiment files, seeded orchestration, the grid variance study, result
emission and the lemma verification suite.

File formats (all JSON unless noted; unknown keys are rejected):

architecture
    ``{"filters": [4, 4], "num_classes": 4, "input_shape": [1, 8, 8],
    "kernel": 3, "quant_ops": [[2, 2], [8, 8]], "spatial": [8, 8]}``.
    ``quant_ops`` absent or null means pruning mode; ``spatial`` is optional.
experiment
    ``{"architecture": "arch.json", "algorithm": "quant", "mode": ...,
    "settings": {...}, "data": {...}, "repeats": 1, "output": "runs/x",
    "grid": {...}, "interp": {...}}``. Relative paths resolve against the
    experiment file's directory.
alpha
    ``{"family": "binomial", "alpha": [[0.0], [0.3]]}``.
config
    ``{"config": "4-0_2-2"}`` using the ``NetworkConfig`` id syntax.

Emitted files: ``records.jsonl`` (one JSON object per grid configuration),
``results.csv`` with columns ``config_id,z,mean_acc,ci_half,homogeneous``,
``plot_data.json`` (``baseline``: homogeneous points sorted by ``z``;
``scatter``: heterogeneous points) and, for searches, ``trace.jsonl``.
"""
from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.stats import norm

from ._seeds import child_rng, derive_seed
from .arch import (
    ArchitectureSpec,
    Mode,
    NetworkConfig,
    build_architecture,
    layer_configs,
    make_homogeneous,
    network_configs,
    validate_config,
)
from .complexity import config_complexity
from .dist import AlphaParams, Family, layer_pmf, layer_probs, multinomial_layer_pmf_grad, binomial_layer_pmf_grad
from .errors import ConfigError, DomainError, TrainingError
from .net import Dataset, SGD, TrainSettings, cluster_images, evaluate, init_weights, level_images, load_csv, train_epochs
from .objective import InterpTable
from .oracle import enumerate_space, exact_grad, finite_diff_grad, random_instance
from .search import ALGORITHMS, SearchSettings, SearchTrace, build_interp_table

CSV_COLUMNS = ("config_id", "z", "mean_acc", "ci_half", "homogeneous")


# ---------------------------------------------------------------- file formats


def _read_json(path: Path) -> dict:
    try:
        with path.open() as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise FileNotFoundError(f"file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None


def _reject_unknown(obj: dict, allowed, where: str) -> None:
    if not isinstance(obj, dict):
        raise ConfigError(f"{where}: expected an object")
    extra = sorted(set(obj) - set(allowed))
    if extra:
        raise ConfigError(f"{where}: unknown keys {extra}; allowed {sorted(allowed)}")


_ARCH_KEYS = {"filters", "num_classes", "input_shape", "kernel", "quant_ops", "spatial"}


def architecture_from_dict(obj: dict, where: str = "architecture") -> ArchitectureSpec:
    _reject_unknown(obj, _ARCH_KEYS, where)
    for key in ("filters", "num_classes"):
        if key not in obj:
            raise ConfigError(f"{where}: missing key {key!r}")
    return build_architecture(
        obj["filters"],
        num_classes=int(obj["num_classes"]),
        input_shape=tuple(obj.get("input_shape", (1, 8, 8))),
        kernel=int(obj.get("kernel", 3)),
        quant_ops=obj.get("quant_ops"),
        spatial=obj.get("spatial"),
    )


def load_architecture(path) -> ArchitectureSpec:
    path = Path(path)
    return architecture_from_dict(_read_json(path), str(path))


def architecture_to_dict(arch: ArchitectureSpec) -> dict:
    first = arch.layers[0]
    out = {
        "filters": [layer.filters for layer in arch.layers],
        "num_classes": arch.num_classes,
        "input_shape": list(arch.input_shape),
        "kernel": first.kernel,
        "spatial": [layer.out_height for layer in arch.layers],
    }
    if arch.mode is Mode.QUANTIZATION:
        out["quant_ops"] = [list(op) for op in first.ops.quant_ops]
    return out


def load_alpha(path, arch: ArchitectureSpec | None = None) -> AlphaParams:
    path = Path(path)
    obj = _read_json(path)
    _reject_unknown(obj, {"family", "alpha"}, str(path))
    try:
        alpha = AlphaParams(Family(obj["family"]), tuple(np.asarray(v, dtype=float) for v in obj["alpha"]))
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return alpha.check(arch) if arch is not None else alpha


def save_alpha(alpha: AlphaParams, path) -> Path:
    path = Path(path)
    path.write_text(json.dumps({"family": alpha.family.value, "alpha": alpha.to_lists()}, indent=2) + "\n")
    return path


def load_config(path, arch: ArchitectureSpec | None = None) -> NetworkConfig:
    path = Path(path)
    obj = _read_json(path)
    _reject_unknown(obj, {"config"}, str(path))
    cfg = NetworkConfig.from_id(str(obj["config"]))
    return validate_config(arch, cfg) if arch is not None else cfg


# ---------------------------------------------------------------- experiments


_DATA_KEYS = {"kind", "num_classes", "per_class", "shape", "noise", "seed", "val_fraction", "path"}
_GRID_KEYS = {"configs", "max_epochs", "patience", "homogeneous_only"}
_INTERP_KEYS = {"table", "sessions"}
_EXPERIMENT_KEYS = {"architecture", "mode", "algorithm", "settings", "data", "repeats", "output", "grid", "interp"}


@dataclass
class GridOptions:
    configs: object = "all"  # "all" or a list of config ids
    max_epochs: int = 60
    patience: int = 15
    homogeneous_only: bool = False


@dataclass
class ExperimentSpec:
    architecture: ArchitectureSpec
    architecture_path: Path
    algorithm: str
    settings: SearchSettings
    data: dict
    repeats: int = 1
    output: Path | None = None
    grid: GridOptions = field(default_factory=GridOptions)
    interp: dict = field(default_factory=dict)
    base_dir: Path = Path(".")

    def __post_init__(self):
        if self.repeats < 1:
            raise ConfigError("repeats must be >= 1")
        if self.algorithm not in ALGORITHMS:
            raise ConfigError(f"unknown algorithm {self.algorithm!r}; choose from {sorted(ALGORITHMS)}")

    @property
    def mode(self) -> Mode:
        return self.architecture.mode


def _search_settings(obj: dict, arch: ArchitectureSpec, where: str) -> SearchSettings:
    names = {f.name for f in fields(SearchSettings)}
    _reject_unknown(obj, names, where)
    obj = dict(obj)
    if "train" in obj:
        _reject_unknown(obj["train"], {f.name for f in fields(TrainSettings)}, f"{where}.train")
    obj.setdefault("family", Family.for_mode(arch.mode).value)
    try:
        return SearchSettings(**obj)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


def load_experiment(path) -> ExperimentSpec:
    path = Path(path)
    obj = _read_json(path)
    where = str(path)
    _reject_unknown(obj, _EXPERIMENT_KEYS, where)
    base = path.parent
    if "architecture" not in obj:
        raise ConfigError(f"{where}: missing key 'architecture'")
    arch_path = (base / obj["architecture"]).resolve()
    if not arch_path.exists():
        raise FileNotFoundError(f"file not found: {arch_path}")
    arch = load_architecture(arch_path)
    if "mode" in obj and Mode(obj["mode"]) is not arch.mode:
        raise ConfigError(f"{where}: mode {obj['mode']!r} disagrees with architecture ({arch.mode.value})")
    algorithm = obj.get("algorithm", "quant" if arch.mode is Mode.QUANTIZATION else "prune_basic")
    settings = _search_settings(obj.get("settings", {}), arch, f"{where}.settings")
    data = dict(obj.get("data", {"kind": "levels"}))
    _reject_unknown(data, _DATA_KEYS, f"{where}.data")
    if data.get("kind") == "csv":
        if "path" not in data:
            raise ConfigError(f"{where}.data: csv source needs 'path'")
        data["path"] = str((base / data["path"]).resolve())
        if not Path(data["path"]).exists():
            raise FileNotFoundError(f"file not found: {data['path']}")
    grid = obj.get("grid", {})
    _reject_unknown(grid, _GRID_KEYS, f"{where}.grid")
    interp = dict(obj.get("interp", {}))
    _reject_unknown(interp, _INTERP_KEYS, f"{where}.interp")
    if "table" in interp:
        interp["table"] = str((base / interp["table"]).resolve())
    output = obj.get("output")
    return ExperimentSpec(
        architecture=arch,
        architecture_path=arch_path,
        algorithm=algorithm,
        settings=settings,
        data=data,
        repeats=int(obj.get("repeats", 1)),
        output=(base / output) if output else None,
        grid=GridOptions(**grid),
        interp=interp,
        base_dir=base,
    )


def make_dataset(source: dict, arch: ArchitectureSpec) -> Dataset:
    """Dataset from a data-source block: ``levels`` (default), ``gratings`` or ``csv``."""
    source = dict(source)
    kind = source.pop("kind", "levels")
    shape = tuple(source.pop("shape", arch.input_shape))
    if kind == "csv":
        return load_csv(source["path"], shape, val_fraction=source.get("val_fraction", 0.25), seed=source.get("seed", 0))
    source.pop("path", None)
    source.setdefault("num_classes", arch.num_classes)
    generators = {"levels": level_images, "gratings": cluster_images}
    if kind not in generators:
        raise ConfigError(f"unknown data kind {kind!r}; choose from {sorted(generators) + ['csv']}")
    return generators[kind](shape=shape, **source)


def run_search(spec: ExperimentSpec, seed: int | None = None, workers: int | None = None):
    """Run the experiment's search; returns ``(alpha, trace)``."""
    settings = spec.settings
    if seed is not None:
        settings.seed = seed
    if workers is not None:
        settings.workers = workers
    data = make_dataset(spec.data, spec.architecture)
    fn = ALGORITHMS[spec.algorithm]
    if spec.algorithm == "prune_interp":
        if "table" in spec.interp:
            table = InterpTable.load(spec.interp["table"])
        else:
            table = build_interp_table(spec.architecture, data, settings, sessions=spec.interp.get("sessions", 5))
        return fn(spec.architecture, data, settings, table)
    return fn(spec.architecture, data, settings)


# ---------------------------------------------------------------- grid study


def confidence_interval(samples: Sequence[float], level: float = 0.6827) -> tuple:
    """``(mean, z * s / sqrt(n))`` with ``z`` the two-sided normal quantile.

    ``s`` uses the ``n - 1`` denominator; a single sample has half-width 0.
    At the default level ``z = 1.0000217``, the one-sigma quantile up to the
    rounding of 0.6827.
    """
    x = np.asarray(samples, dtype=float)
    if x.size < 1:
        raise DomainError("confidence interval needs at least one sample")
    if not 0.0 <= level < 1.0:
        raise DomainError(f"level must lie in [0, 1), got {level}")
    mean = float(np.mean(x))
    if x.size == 1:
        return mean, 0.0
    z = float(norm.ppf(0.5 + level / 2.0))
    return mean, z * float(np.std(x, ddof=1)) / math.sqrt(x.size)


@dataclass
class GridResult:
    config_id: str
    z: float
    samples: list
    mean: float
    ci_half: float
    homogeneous: bool
    epochs: list = field(default_factory=list)
    failures: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def _homogeneous_ids(arch: ArchitectureSpec) -> set:
    if arch.mode is Mode.QUANTIZATION:
        return {make_homogeneous(arch, i).config_id for i in range(len(arch.layers[0].ops.quant_ops))}
    ids = set()
    for f in range(1, max(layer.filters for layer in arch.layers) + 1):
        cfg = NetworkConfig(tuple((min(f, layer.filters) - 1,) for layer in arch.layers))
        ids.add(cfg.config_id)
    return ids


def train_until_plateau(
    arch: ArchitectureSpec,
    cfg: NetworkConfig,
    data: Dataset,
    settings: TrainSettings,
    seed: int,
    max_epochs: int,
    patience: int,
) -> tuple:
    """Train from scratch until validation accuracy has not improved for
    ``patience`` epochs. Returns ``(best_accuracy, epochs_run)``."""
    val = data.part("validation")
    train = data.training()
    weights = init_weights(arch, derive_seed(seed, "init"))
    opt = SGD.from_settings(settings)
    rng = child_rng(seed, "order")
    best, since, epoch = -1.0, 0, 0
    while epoch < max_epochs and since < patience:
        train_epochs(weights, arch, cfg, train, settings, 1, rng, opt)
        epoch += 1
        acc = evaluate(weights, arch, cfg, val)[1]
        if acc > best:
            best, since = acc, 0
        else:
            since += 1
    return best, epoch


def run_grid_study(
    spec: ExperimentSpec,
    configs: Sequence[NetworkConfig] | None = None,
    *,
    repeats: int = 3,
    seed: int = 0,
    workers: int = 1,
    level: float = 0.6827,
    vary_seed: bool = True,
) -> list:
    """Train every configuration ``repeats`` times and summarize validation
    accuracy. Diverging runs are recorded in ``failures`` and skipped.

    With ``vary_seed=False`` every repeat reuses the repeat-0 seed, which
    makes the repeats identical (a determinism check).
    """
    arch = spec.architecture
    data = make_dataset(spec.data, arch)
    if len(data.part("validation")) == 0:
        raise DomainError("grid study needs a validation split")
    homogeneous = _homogeneous_ids(arch)
    if configs is None:
        if spec.grid.configs == "all":
            configs = list(network_configs(arch))
        else:
            configs = [validate_config(arch, NetworkConfig.from_id(c)) for c in spec.grid.configs]
        if spec.grid.homogeneous_only:
            configs = [c for c in configs if c.config_id in homogeneous]
    jobs = [(c, r) for c in configs for r in range(repeats)]

    def job(item):
        cfg, r = item
        job_seed = derive_seed(seed, "grid", cfg.config_id, r if vary_seed else 0)
        try:
            return train_until_plateau(
                arch, cfg, data, spec.settings.train, job_seed, spec.grid.max_epochs, spec.grid.patience
            )
        except TrainingError as exc:
            return str(exc)

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            outcomes = list(pool.map(job, jobs))
    else:
        outcomes = [job(j) for j in jobs]

    results = []
    for i, cfg in enumerate(configs):
        mine = outcomes[i * repeats:(i + 1) * repeats]
        ok = [o for o in mine if isinstance(o, tuple)]
        failures = [{"repeat": r, "error": o} for r, o in enumerate(mine) if isinstance(o, str)]
        samples = [o[0] for o in ok]
        mean, half = confidence_interval(samples, level) if samples else (float("nan"), float("nan"))
        results.append(GridResult(
            config_id=cfg.config_id,
            z=config_complexity(cfg, arch),
            samples=samples,
            mean=mean,
            ci_half=half,
            homogeneous=cfg.config_id in homogeneous,
            epochs=[o[1] for o in ok],
            failures=failures,
        ))
    return results


# ---------------------------------------------------------------- emission


def _check_finite(obj, where: str = "value") -> None:
    if isinstance(obj, float) and not math.isfinite(obj):
        raise DomainError(f"non-finite number in {where}")
    if isinstance(obj, dict):
        for k, v in obj.items():
            _check_finite(v, f"{where}.{k}")
    elif isinstance(obj, (list, tuple)):
        for i, v in enumerate(obj):
            _check_finite(v, f"{where}[{i}]")


def plot_data(results: Sequence[GridResult]) -> dict:
    base = sorted((r for r in results if r.homogeneous), key=lambda r: (r.z, r.config_id))
    scatter = [r for r in results if not r.homogeneous]
    point = lambda r: {"config_id": r.config_id, "z": r.z, "mean_acc": r.mean, "ci_half": r.ci_half}
    return {"baseline": [point(r) for r in base], "scatter": [point(r) for r in scatter]}


def emit_results(results, out_dir) -> list:
    """Write grid results (or a ``SearchTrace``) under ``out_dir``.

    Every number is checked for finiteness before anything is written; a
    configuration whose repeats all failed therefore aborts emission.
    """
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc}") from None
    if isinstance(results, SearchTrace):
        for r in results:
            _check_finite(r, f"trace[{r['iteration']}]")
        return [results.to_jsonl(out / "trace.jsonl")]
    results = list(results)
    for r in results:
        _check_finite(r.to_dict(), r.config_id)
    paths = [out / "records.jsonl", out / "results.csv", out / "plot_data.json"]
    try:
        with paths[0].open("w") as fh:
            for r in results:
                fh.write(json.dumps(r.to_dict(), allow_nan=False) + "\n")
        with paths[1].open("w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(CSV_COLUMNS)
            for r in results:
                writer.writerow([r.config_id, repr(r.z), repr(r.mean), repr(r.ci_half), int(r.homogeneous)])
        paths[2].write_text(json.dumps(plot_data(results), indent=2, allow_nan=False) + "\n")
    except OSError as exc:
        raise OSError(f"writing results to {out}: {exc}") from None
    return paths


def load_records(path) -> list:
    with Path(path).open() as fh:
        return [GridResult(**json.loads(line)) for line in fh if line.strip()]


# ---------------------------------------------------------------- lemma suite


@dataclass
class CheckRow:
    name: str
    checks: int
    worst: float  # largest error divided by its tolerance; <= 1 passes
    passed: bool


def _ratio(analytic, numeric, rel: float, abs_: float) -> float:
    analytic, numeric = np.asarray(analytic, dtype=float), np.asarray(numeric, dtype=float)
    tol = np.maximum(abs_, rel * np.abs(numeric))
    return float(np.max(np.abs(analytic - numeric) / tol)) if analytic.size else 0.0


def _pmf_grad_ratio(arch, alpha, h, rel, abs_) -> tuple:
    worst, n = 0.0, 0
    for l, layer in enumerate(arch.layers):
        v = alpha.per_layer[l]
        for cfg in layer_configs(layer):
            for t in range(v.size):
                up, down = alpha.replace_entry(l, t, v[t] + h), alpha.replace_entry(l, t, v[t] - h)
                fd = (layer_pmf(layer, layer_probs(up, l), cfg) - layer_pmf(layer, layer_probs(down, l), cfg)) / (2 * h)
                if alpha.family is Family.MULTINOMIAL:
                    an = multinomial_layer_pmf_grad(layer, layer_probs(alpha, l), cfg, t)
                else:
                    an = binomial_layer_pmf_grad(layer, layer_probs(alpha, l), cfg)
                worst = max(worst, _ratio(an, fd, rel, abs_))
                n += 1
    return worst, n


def lemma_suite(
    seed: int = 0, instances: int = 100, rel: float = 1e-6, abs_: float = 1e-8, h: float = 1e-5
) -> list:
    """Compare analytic derivatives with central differences on random
    enumerable instances (half of each family) and check normalization.

    Rows: layer PMF gradients, network-probability gradients, expected-loss
    gradients, PMF normalization and zero-sum of probability gradients.
    """
    totals = {k: [0.0, 0] for k in ("pmf_grad", "network_prob_grad", "expected_loss_grad", "normalization", "grad_sum_zero")}
    for i in range(instances):
        family = Family.MULTINOMIAL if i % 2 == 0 else Family.BINOMIAL
        arch, alpha, losses = random_instance(child_rng(seed, "lemma", i), family=family)
        w, n = _pmf_grad_ratio(arch, alpha, h, rel, abs_)
        totals["pmf_grad"][0] = max(totals["pmf_grad"][0], w)
        totals["pmf_grad"][1] += n

        space = enumerate_space(arch, alpha)
        totals["normalization"][0] = max(totals["normalization"][0], abs(math.fsum(space.probs) - 1.0) / 1e-10)
        totals["normalization"][1] += 1
        for l, v in enumerate(alpha.per_layer):
            scores = space.layer_values(l) - arch.layers[l].trials * layer_probs(alpha, l)
            for t in range(v.size):
                an = space.probs * scores[:, t]
                up = enumerate_space(arch, alpha.replace_entry(l, t, v[t] + h)).probs
                down = enumerate_space(arch, alpha.replace_entry(l, t, v[t] - h)).probs
                row = totals["network_prob_grad"]
                row[0] = max(row[0], _ratio(an, (up - down) / (2 * h), rel, abs_))
                row[1] += an.size
                row = totals["grad_sum_zero"]
                row[0] = max(row[0], abs(math.fsum(an)) / 1e-10)
                row[1] += 1

        ex, fd = exact_grad(arch, alpha, losses), finite_diff_grad(arch, alpha, losses, h)
        row = totals["expected_loss_grad"]
        row[0] = max(row[0], max(_ratio(a, b, rel, abs_) for a, b in zip(ex, fd)))
        row[1] += sum(g.size for g in ex)
    return [CheckRow(name, n, worst, worst <= 1.0) for name, (worst, n) in totals.items()]


def format_check_table(rows: Sequence[CheckRow]) -> str:
    lines = [f"{'check':<22}{'n':>8}  {'err/tol':>10}  result"]
    for r in rows:
        lines.append(f"{r.name:<22}{r.checks:>8}  {r.worst:>10.3g}  {'PASS' if r.passed else 'FAIL'}")
    return "\n".join(lines)
