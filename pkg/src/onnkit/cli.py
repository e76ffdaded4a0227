"""Command-line front end: train, eval, gradcheck, describe.

Configuration is INI-like text with three sections:

  [network]   in_channels, tier_sizes, kernel_sizes, operators,
              sampling_factors, k_sin, k_chirp, cut, init, init_bound
  [trainer]   num_epochs, num_runs, optimizer, lr, momentum, beta1, beta2,
              eps, lr_decay, batch_size, seed, model_name, metrics
  [data]      task, path, count, size, channels, folds, val_fraction, seed

Lists are comma-separated. The operators key separates tiers with '/';
each tier holds either one operator set index (shared by all its blocks)
or one index per block, e.g. "operators = 4 / 0,13 / 3". Comments start
with '#' or ';'. Validation failures name the offending line.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
Errors print one line to stderr: "error: <domain>: <message>".
"""
from __future__ import annotations

import argparse
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import dataio
from .errors import (
    OnnkitError,
    ParseError,
    UnknownOptimizer,
    ValidationError,
)
from .network import OpNetwork, build_network, check_operator_set_gradients
from .oplib import OperatorConstants, OperatorSetLibrary, register_builtin_library
from .tensor import Tensor
from .trainer import (
    BUILTIN_METRICS,
    MetricSpec,
    Trainer,
    TrainerConfig,
    export_stats,
)


@dataclass
class NetworkConfig:
    in_channels: int = 1
    tier_sizes: list[int] = field(default_factory=list)
    kernel_sizes: list[int] = field(default_factory=list)
    operators: list[list[int]] = field(default_factory=list)
    sampling_factors: list[int] = field(default_factory=list)
    k_sin: float = float(np.pi)
    k_chirp: float = float(np.pi)
    cut: float = 10.0
    init: str = "uniform"
    init_bound: float = 0.1


@dataclass
class DataConfig:
    task: str = "identity"
    path: str | None = None
    count: int = 64
    size: int = 16
    channels: int = 1
    folds: int = 1
    val_fraction: float = 0.0
    seed: int = 0


@dataclass
class FullConfig:
    network: NetworkConfig
    trainer: TrainerConfig
    data: DataConfig
    metrics: list[tuple[str, str]] = field(default_factory=list)


# --- raw INI-like parsing, tracking line numbers ---

@dataclass(frozen=True)
class _Raw:
    value: str
    line: int


def _parse_sections(text: str) -> dict[str, dict[str, _Raw]]:
    sections: dict[str, dict[str, _Raw]] = {}
    current: str | None = None
    for lineno, raw_line in enumerate(text.splitlines(), start=1):
        line = raw_line.strip()
        if not line or line.startswith("#") or line.startswith(";"):
            continue
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1].strip()
            if not current:
                raise ParseError(f"config: line {lineno}: empty section name")
            sections.setdefault(current, {})
            continue
        if "=" not in line:
            raise ParseError(
                f"config: line {lineno}: expected 'key = value', got {line!r}"
            )
        if current is None:
            raise ParseError(
                f"config: line {lineno}: key outside any [section]"
            )
        key, _, value = line.partition("=")
        key = key.strip()
        if not key:
            raise ParseError(f"config: line {lineno}: empty key")
        if key in sections[current]:
            raise ParseError(
                f"config: line {lineno}: duplicate key {key!r} in [{current}]"
            )
        sections[current][key] = _Raw(value.strip(), lineno)
    return sections


class _Section:
    """Typed access to one section's raw values, with line-tagged errors."""

    def __init__(self, name: str, raw: dict[str, _Raw]):
        self.name = name
        self.raw = raw
        self.seen: set[str] = set()

    def fail(self, key: str, message: str):
        entry = self.raw.get(key)
        where = f"line {entry.line}: " if entry else ""
        raise ValidationError(f"{self.name}: {where}{key} {message}")

    def _convert(self, key: str, text: str, kind):
        try:
            if kind is int:
                return int(text)
            if kind is float:
                return float(text)
            return text
        except ValueError:
            self.fail(key, f"must be a {kind.__name__}, got {text!r}")

    def get(self, key: str, kind=str, default=None, required=False):
        self.seen.add(key)
        entry = self.raw.get(key)
        if entry is None:
            if required:
                raise ValidationError(f"{self.name}: missing required key {key!r}")
            return default
        return self._convert(key, entry.value, kind)

    def get_list(self, key: str, kind=int, default=None, required=False):
        self.seen.add(key)
        entry = self.raw.get(key)
        if entry is None:
            if required:
                raise ValidationError(f"{self.name}: missing required key {key!r}")
            return default
        items = [t.strip() for t in entry.value.split(",") if t.strip()]
        if not items:
            self.fail(key, "must hold at least one value")
        return [self._convert(key, t, kind) for t in items]

    def line(self, key: str) -> int | None:
        entry = self.raw.get(key)
        return entry.line if entry else None

    def check_unknown(self):
        for key, entry in self.raw.items():
            if key not in self.seen:
                raise ValidationError(
                    f"{self.name}: line {entry.line}: unknown key {key!r}"
                )


def _parse_operators(section: _Section, key: str,
                     tier_sizes: list[int], library_size: int) -> list[list[int]]:
    section.seen.add(key)
    entry = section.raw.get(key)
    if entry is None:
        raise ValidationError(f"{section.name}: missing required key {key!r}")
    tiers = [t.strip() for t in entry.value.split("/")]
    if len(tiers) != len(tier_sizes):
        section.fail(key, f"names {len(tiers)} tiers, network has {len(tier_sizes)}")
    result = []
    for t, (spec_text, size) in enumerate(zip(tiers, tier_sizes)):
        items = [s.strip() for s in spec_text.split(",") if s.strip()]
        if not items:
            section.fail(key, f"tier {t} has no operator set index")
        try:
            indices = [int(s) for s in items]
        except ValueError:
            section.fail(key, f"tier {t} holds a non-integer index")
        if len(indices) not in (1, size):
            section.fail(
                key,
                f"tier {t} needs 1 or {size} indices, has {len(indices)}",
            )
        for idx in indices:
            if not 0 <= idx < library_size:
                section.fail(
                    key,
                    f"index {idx} out of range [0, {library_size - 1}]",
                )
        result.append(indices)
    return result


def parse_config(text: str,
                 library: OperatorSetLibrary | None = None) -> FullConfig:
    """Parse and validate configuration text."""
    lib = library or register_builtin_library()
    sections = _parse_sections(text)
    for name in sections:
        if name not in ("network", "trainer", "data"):
            raise ValidationError(f"{name}: unknown section [{name}]")
    if "network" not in sections:
        raise ValidationError("network: missing section [network]")

    net_s = _Section("network", sections.get("network", {}))
    in_channels = net_s.get("in_channels", int, 1)
    if in_channels < 1:
        net_s.fail("in_channels", "must be at least 1")
    tier_sizes = net_s.get_list("tier_sizes", int, required=True)
    if any(s < 1 for s in tier_sizes):
        net_s.fail("tier_sizes", "entries must be at least 1")
    kernel_sizes = net_s.get_list("kernel_sizes", int, required=True)
    if len(kernel_sizes) != len(tier_sizes):
        net_s.fail("kernel_sizes",
                   f"has {len(kernel_sizes)} entries, tier_sizes has {len(tier_sizes)}")
    for k in kernel_sizes:
        if k < 1 or k % 2 == 0:
            net_s.fail("kernel_sizes", f"entries must be odd and positive, got {k}")
    operators = _parse_operators(net_s, "operators", tier_sizes, len(lib))
    sampling = net_s.get_list("sampling_factors", int,
                              default=[1] * len(tier_sizes))
    if len(sampling) != len(tier_sizes):
        net_s.fail("sampling_factors",
                   f"has {len(sampling)} entries, tier_sizes has {len(tier_sizes)}")
    if any(s == 0 for s in sampling):
        net_s.fail("sampling_factors", "entries must be nonzero")
    init = net_s.get("init", str, "uniform")
    if init not in ("uniform", "fan_in"):
        net_s.fail("init", f"must be 'uniform' or 'fan_in', got {init!r}")
    network = NetworkConfig(
        in_channels=in_channels,
        tier_sizes=tier_sizes,
        kernel_sizes=kernel_sizes,
        operators=operators,
        sampling_factors=sampling,
        k_sin=net_s.get("k_sin", float, float(np.pi)),
        k_chirp=net_s.get("k_chirp", float, float(np.pi)),
        cut=net_s.get("cut", float, 10.0),
        init=init,
        init_bound=net_s.get("init_bound", float, 0.1),
    )
    if network.cut == 0:
        net_s.fail("cut", "must be nonzero")
    net_s.check_unknown()

    tr_s = _Section("trainer", sections.get("trainer", {}))
    trainer = TrainerConfig(
        num_epochs=tr_s.get("num_epochs", int, required=True),
        num_runs=tr_s.get("num_runs", int, 1),
        optimizer=tr_s.get("optimizer", str, "adam"),
        lr=tr_s.get("lr", float, 0.001),
        momentum=tr_s.get("momentum", float, 0.9),
        beta1=tr_s.get("beta1", float, 0.9),
        beta2=tr_s.get("beta2", float, 0.999),
        eps=tr_s.get("eps", float, 1e-8),
        lr_decay=tr_s.get("lr_decay", float, 1.0),
        batch_size=tr_s.get("batch_size", int, 8),
        seed=tr_s.get("seed", int, 0),
        model_name=tr_s.get("model_name", str, "model"),
    )
    if trainer.num_epochs < 1:
        tr_s.fail("num_epochs", "must be at least 1")
    if trainer.num_runs < 1:
        tr_s.fail("num_runs", "must be at least 1")
    if trainer.batch_size < 1:
        tr_s.fail("batch_size", "must be at least 1")
    if trainer.lr <= 0:
        tr_s.fail("lr", "must be positive")
    metric_items = tr_s.get_list("metrics", str, default=[])
    metrics: list[tuple[str, str]] = []
    for item in metric_items:
        name, _, crit = item.partition(":")
        name = name.strip()
        crit = crit.strip()
        if name == "loss":
            continue
        if name not in BUILTIN_METRICS:
            tr_s.fail("metrics",
                      f"unknown metric {name!r}; builtin: "
                      f"{', '.join(sorted(BUILTIN_METRICS))}")
        if not crit:
            crit = BUILTIN_METRICS[name].criterion
        if crit not in ("max", "min"):
            tr_s.fail("metrics", f"criterion must be max or min, got {crit!r}")
        metrics.append((name, crit))
    tr_s.check_unknown()

    da_s = _Section("data", sections.get("data", {}))
    task = da_s.get("task", str, required=True)
    known_tasks = dataio.SYNTHETIC_TASKS + ("folder",)
    if task not in known_tasks:
        da_s.fail("task", f"must be one of {', '.join(known_tasks)}")
    data = DataConfig(
        task=task,
        path=da_s.get("path", str, None),
        count=da_s.get("count", int, 64),
        size=da_s.get("size", int, 16),
        channels=da_s.get("channels", int, 1),
        folds=da_s.get("folds", int, 1),
        val_fraction=da_s.get("val_fraction", float, 0.0),
        seed=da_s.get("seed", int, 0),
    )
    if task == "folder" and not data.path:
        da_s.fail("path", "is required when task = folder")
    if data.count < 1:
        da_s.fail("count", "must be at least 1")
    if data.size < 1:
        da_s.fail("size", "must be at least 1")
    if data.channels < 1:
        da_s.fail("channels", "must be at least 1")
    if data.folds < 1:
        da_s.fail("folds", "must be at least 1")
    if not 0.0 <= data.val_fraction < 1.0:
        da_s.fail("val_fraction", "must be in [0, 1)")
    da_s.check_unknown()

    if data.channels != network.in_channels:
        da_s.fail("channels",
                  f"is {data.channels}, network in_channels is {network.in_channels}")
    return FullConfig(network=network, trainer=trainer, data=data, metrics=metrics)


def _fmt_operators(operators: list[list[int]]) -> str:
    return " / ".join(",".join(str(i) for i in tier) for tier in operators)


def format_config(cfg: FullConfig) -> str:
    """Render a configuration as canonical text; parse() round-trips it."""
    n, t, d = cfg.network, cfg.trainer, cfg.data
    lines = [
        "[network]",
        f"in_channels = {n.in_channels}",
        f"tier_sizes = {', '.join(map(str, n.tier_sizes))}",
        f"kernel_sizes = {', '.join(map(str, n.kernel_sizes))}",
        f"operators = {_fmt_operators(n.operators)}",
        f"sampling_factors = {', '.join(map(str, n.sampling_factors))}",
        f"k_sin = {n.k_sin!r}",
        f"k_chirp = {n.k_chirp!r}",
        f"cut = {n.cut!r}",
        f"init = {n.init}",
        f"init_bound = {n.init_bound!r}",
        "",
        "[trainer]",
        f"num_epochs = {t.num_epochs}",
        f"num_runs = {t.num_runs}",
        f"optimizer = {t.optimizer}",
        f"lr = {t.lr!r}",
        f"momentum = {t.momentum!r}",
        f"beta1 = {t.beta1!r}",
        f"beta2 = {t.beta2!r}",
        f"eps = {t.eps!r}",
        f"lr_decay = {t.lr_decay!r}",
        f"batch_size = {t.batch_size}",
        f"seed = {t.seed}",
        f"model_name = {t.model_name}",
    ]
    if cfg.metrics:
        lines.append(
            "metrics = " + ", ".join(f"{n_}:{c}" for n_, c in cfg.metrics))
    lines += [
        "",
        "[data]",
        f"task = {d.task}",
    ]
    if d.path:
        lines.append(f"path = {d.path}")
    lines += [
        f"count = {d.count}",
        f"size = {d.size}",
        f"channels = {d.channels}",
        f"folds = {d.folds}",
        f"val_fraction = {d.val_fraction!r}",
        f"seed = {d.seed}",
        "",
    ]
    return "\n".join(lines)


# --- building pieces from a parsed config ---

def network_from_config(cfg: FullConfig,
                        library: OperatorSetLibrary | None = None) -> OpNetwork:
    lib = library or register_builtin_library()
    n = cfg.network
    constants = OperatorConstants(k_sin=n.k_sin, k_chirp=n.k_chirp, cut=n.cut)
    return build_network(n.in_channels, n.tier_sizes, n.kernel_sizes,
                         n.operators, n.sampling_factors, lib, constants,
                         (n.init, n.init_bound))


def dataset_from_config(cfg: FullConfig) -> dataio.PairedImageDataset:
    # a bad path or broken folder is a configuration problem, not a
    # runtime one: surface it under the data domain with exit code 1
    d = cfg.data
    try:
        if d.task == "folder":
            return dataio.load_image_folder(d.path, (d.size, d.size))
        return dataio.make_synthetic_task(d.task, d.count, d.size, d.seed,
                                          d.channels)
    except OnnkitError as e:
        raise ValidationError(f"data: {e}") from e


def metrics_from_config(cfg: FullConfig) -> list[MetricSpec]:
    out = []
    for name, crit in cfg.metrics:
        base = BUILTIN_METRICS[name]
        out.append(MetricSpec(base.name, base.compute, crit))
    return out


def _fold_seed(master: int, fold: int) -> int:
    ss = np.random.SeedSequence(entropy=master, spawn_key=(fold,))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


# --- commands ---

def cmd_describe(cfg: FullConfig, library: OperatorSetLibrary | None = None,
                 stream=None) -> int:
    stream = stream or sys.stdout
    lib = library or register_builtin_library()
    net = network_from_config(cfg, lib)
    size = cfg.data.size
    flow = net.spatial_flow((size, size))
    print(f"input: {net.in_channels} x {size} x {size}", file=stream)
    for t, tier in enumerate(net.tiers):
        names = sorted({b.opset.names for b in tier.blocks})
        ops = "; ".join("(" + ", ".join(n) + ")" for n in names)
        mm, nn = flow[t]
        print(
            f"tier {t}: {tier.size} block(s), kernel "
            f"{tier.kernel[0]}x{tier.kernel[1]}, operators {ops}, "
            f"sampling {tier.sampling}, output {tier.size} x {mm} x {nn}",
            file=stream,
        )
    print(f"parameters: {net.parameter_count()}", file=stream)
    return 0


def _train_one_fold(cfg: FullConfig, split, library, config_text, seed):
    net = network_from_config(cfg, library)
    fold_cfg = replace(cfg.trainer, seed=seed)
    trainer = Trainer(net, split, fold_cfg, metrics_from_config(cfg),
                      config_text, library)
    trainer.train()
    return trainer


def cmd_train(cfg: FullConfig, out_dir, jobs: int = 1,
              config_text: str | None = None,
              library: OperatorSetLibrary | None = None) -> int:
    lib = library or register_builtin_library()
    text = config_text if config_text is not None else format_config(cfg)
    dataset = dataset_from_config(cfg)
    splits = dataio.partition(dataset, cfg.data.folds, cfg.data.val_fraction,
                              cfg.data.seed)
    seeds = [_fold_seed(cfg.trainer.seed, s.fold) for s in splits]
    if jobs > 1 and len(splits) > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            trainers = list(pool.map(
                lambda args: _train_one_fold(cfg, args[0], lib, text, args[1]),
                zip(splits, seeds)))
    else:
        trainers = [_train_one_fold(cfg, s, lib, text, seed)
                    for s, seed in zip(splits, seeds)]
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for trainer in trainers:
        trainer.save_all(out / f"fold{trainer.split.fold}.ckpt")
    export_stats([t.record for t in trainers], out)
    for trainer in trainers:
        for status in trainer.record.run_status:
            if status.startswith("aborted"):
                print(f"warning: fold {trainer.split.fold} {status}",
                      file=sys.stderr)
    return 0


def cmd_gradcheck(cfg: FullConfig,
                  library: OperatorSetLibrary | None = None,
                  stream=None) -> int:
    stream = stream or sys.stdout
    lib = library or register_builtin_library()
    indices = sorted({i for tier in cfg.network.operators for i in tier})
    failures = 0
    for idx in indices:
        names = ", ".join(lib.decode(idx).names)
        report = check_operator_set_gradients(
            lib, idx, seed=cfg.trainer.seed,
            in_channels=cfg.network.in_channels)
        verdict = "PASS" if report.passed else "FAIL"
        if not report.passed:
            failures += 1
        print(
            f"{verdict} set {idx} ({names}): max rel err {report.worst():.3e}, "
            f"ties skipped {report.tie_coords}",
            file=stream,
        )
    print(f"{len(indices) - failures}/{len(indices)} operator sets passed",
          file=stream)
    return 0 if failures == 0 else 2


def cmd_eval(ckpt_path, cfg: FullConfig | None = None,
             library: OperatorSetLibrary | None = None, stream=None) -> int:
    from . import checkpoint as ckpt_mod
    stream = stream or sys.stdout
    lib = library or register_builtin_library()
    entries = ckpt_mod.load(ckpt_path)
    if cfg is None:
        text = entries.get("config/text")
        if text is None:
            print("error: config: checkpoint stores no configuration; "
                  "pass --config", file=sys.stderr)
            return 1
        cfg = parse_config(text.decode(), lib)
    dataset = dataset_from_config(cfg)
    splits = dataio.partition(dataset, cfg.data.folds, cfg.data.val_fraction,
                              cfg.data.seed)
    fold = int(np.asarray(entries.get("trainer/fold", np.array([0]))).reshape(-1)[0])
    trainer = Trainer.load(ckpt_path, splits[fold], lib)
    mismatches = 0
    for (partition, metric), best in sorted(trainer.best.items()):
        for p in trainer.net.parameters():
            p.assign(Tensor(best.params[p.name]))
        value = trainer.evaluate(partition)[metric]
        same = value == best.value
        if not same:
            mismatches += 1
        print(
            f"fold {fold} {partition} {metric}: recorded {best.value:.17g} "
            f"(run {best.run}, epoch {best.epoch}), re-evaluated "
            f"{value:.17g}, {'match' if same else 'MISMATCH'}",
            file=stream,
        )
    return 0 if mismatches == 0 else 2


# --- argument parsing and entry point ---

class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="onnkit", description=__doc__,
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_required=True):
        p.add_argument("--config", required=config_required,
                       help="path to configuration text")
        p.add_argument("--seed", type=int, default=None,
                       help="override the trainer seed")
        p.add_argument("--folds", type=int, default=None,
                       help="override the fold count")

    p_train = sub.add_parser("train", help="train a network")
    common(p_train)
    p_train.add_argument("--out", default="out", help="output directory")
    p_train.add_argument("--jobs", type=int, default=1,
                         help="parallel fold workers")

    p_eval = sub.add_parser("eval", help="re-evaluate archived best states")
    p_eval.add_argument("--ckpt", required=True, help="checkpoint archive")
    common(p_eval, config_required=False)

    p_grad = sub.add_parser("gradcheck",
                            help="finite-difference check configured operator sets")
    common(p_grad)

    p_desc = sub.add_parser("describe", help="print network structure")
    common(p_desc)
    return parser


def _load_config(args) -> tuple[FullConfig, str]:
    path = Path(args.config)
    try:
        text = path.read_text()
    except OSError as e:
        raise ParseError(f"config: cannot read {path}: {e}") from e
    cfg = parse_config(text)
    if getattr(args, "seed", None) is not None:
        cfg.trainer.seed = args.seed
    if getattr(args, "folds", None) is not None:
        if args.folds < 1:
            raise ValidationError("data: folds must be at least 1")
        cfg.data.folds = args.folds
    return cfg, text


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as e:
        print(f"error: usage: {e}", file=sys.stderr)
        return 1
    env_jobs = os.environ.get("ONNKIT_THREADS")
    try:
        if args.command == "train":
            cfg, text = _load_config(args)
            jobs = args.jobs
            if env_jobs is not None:
                try:
                    jobs = int(env_jobs)
                except ValueError:
                    raise ValidationError(
                        f"trainer: ONNKIT_THREADS must be an integer, "
                        f"got {env_jobs!r}")
            return cmd_train(cfg, args.out, max(1, jobs), text)
        if args.command == "describe":
            cfg, _ = _load_config(args)
            return cmd_describe(cfg)
        if args.command == "gradcheck":
            cfg, _ = _load_config(args)
            return cmd_gradcheck(cfg)
        if args.command == "eval":
            cfg = None
            if args.config:
                cfg, _ = _load_config(args)
            return cmd_eval(args.ckpt, cfg)
        raise _UsageError(f"unknown command {args.command!r}")
    except _UsageError as e:
        print(f"error: usage: {e}", file=sys.stderr)
        return 1
    except UnknownOptimizer as e:
        print(f"error: trainer: {e}", file=sys.stderr)
        return 1
    except (ParseError, ValidationError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except OnnkitError as e:
        print(f"error: runtime: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
