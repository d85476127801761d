"""Command-line experiment runner.

    nacl-pad run --config exp.toml [--method M]... [--order index|ed|de]
                 [--seeds N] [--jobs N] [--snapshots DIR] --out results.csv
    nacl-pad generate --config exp.toml --out features.csv
    nacl-pad dump-config --config exp.toml

The config has three flat sections. ``[stream]`` describes either a synthetic
stream (the default) or a feature table (``source = "table"`` plus ``path``),
``[engine]`` the method settings and ``[train]`` the optimizer. Every key has
a default, so an empty file is a valid config.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import re
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from nacl_pad import dataset, engine, mlp


EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2
RESULT_COLUMNS = ("method", "seed", "task_index", "apcer", "bpcer", "acer",
                  "pollution_buffer", "pollution_used", "novel_detected")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class StreamSpec:
    source: str = "synthetic"
    path: str | None = None
    dimension: int = 32
    attack_classes: int = 8
    train_per_class: int = 200
    test_per_class: int = 50
    separation: float = 10.0
    seed: int = 0
    attacks_per_task: int = 1
    bonafide_fraction: float = 0.5
    ordering: tuple[int, ...] | None = None

    def build(self) -> dataset.TaskStream:
        order = list(self.ordering) if self.ordering is not None else None
        if self.source == "table":
            samples = dataset.load_feature_table(self.path)
            train = [s for s in samples if s.split == "train"]
            test = [s for s in samples if s.split == "test"]
            return dataset.assemble_stream(train, test, self.attacks_per_task, order,
                                           self.bonafide_fraction, self.seed)
        return dataset.generate_synthetic_stream(
            self.dimension, self.attack_classes, self.train_per_class, self.test_per_class,
            self.separation, self.seed, self.attacks_per_task, order, self.bonafide_fraction)


@dataclass(frozen=True)
class RunManifest:
    stream: StreamSpec
    engine: engine.EngineConfig
    methods: tuple[str, ...] = ("nacl",)
    output: Path | None = None
    config_path: Path | None = field(default=None, compare=False)


# key -> accepted value types
_STREAM_KEYS = {
    "source": (str,), "path": (str,), "dimension": (int,), "attack_classes": (int,),
    "train_per_class": (int,), "test_per_class": (int,), "separation": (int, float),
    "seed": (int,), "attacks_per_task": (int,), "bonafide_fraction": (int, float),
    "ordering": (list,),
}
_ENGINE_KEYS = {
    "lam": (int, float), "tau": (int, float), "membership_mode": (str,),
    "m_per_component": (int,), "budget": (int,), "method": (str,), "methods": (list,), "ordering": (str,),
    "seeds": (int,), "jitter": (int, float), "hidden": (list,),
}
_TRAIN_KEYS = {
    "learning_rate": (int, float), "decay": (int, float), "batch_size": (int,),
    "num_batches": (int,), "adam_beta1": (int, float), "adam_beta2": (int, float),
    "adam_epsilon": (int, float),
}
_SECTIONS = {"stream": _STREAM_KEYS, "engine": _ENGINE_KEYS, "train": _TRAIN_KEYS}


def _line_of(text: str, section: str | None, key: str) -> int | None:
    current = None
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        header = re.fullmatch(r"\[\s*([A-Za-z0-9_.-]+)\s*\]", line)
        if header:
            current = header.group(1)
            if section is None and current == key:
                return number
            continue
        if current == section and re.match(rf"{re.escape(key)}\s*=", line):
            return number
    return None


def _where(path, text, section, key):
    line = _line_of(text, section, key)
    loc = f"{path}:{line}" if line else str(path)
    return f"{loc}: [{section}] {key}" if section else f"{loc}: [{key}]"


def _checked(path, text, section, table) -> dict:
    spec = _SECTIONS[section]
    out = {}
    for key, value in table.items():
        where = _where(path, text, section, key)
        if key not in spec:
            raise ConfigError(f"{where}: unknown key; expected one of {sorted(spec)}")
        types = spec[key]
        if isinstance(value, bool) or not isinstance(value, types):
            names = " or ".join(t.__name__ for t in types)
            raise ConfigError(f"{where}: expected {names}, got {type(value).__name__} {value!r}")
        if isinstance(value, list):
            if not all(isinstance(v, str if key == "methods" else int)
                       and not isinstance(v, bool) for v in value):
                kind = "strings" if key == "methods" else "integers"
                raise ConfigError(f"{where}: expected a list of {kind}, got {value!r}")
            value = tuple(value)
        out[key] = value
    return out


def parse_config(path, output=None) -> RunManifest:
    """Read a TOML config and resolve it against the defaults."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    text = path.read_text(encoding="utf-8")
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    for name, value in raw.items():
        if name not in _SECTIONS or not isinstance(value, dict):
            raise ConfigError(f"{_where(path, text, None, name)}: unknown section; "
                              f"expected {sorted(_SECTIONS)}")
    stream_kw = _checked(path, text, "stream", raw.get("stream", {}))
    engine_kw = _checked(path, text, "engine", raw.get("engine", {}))
    train_kw = _checked(path, text, "train", raw.get("train", {}))

    source = stream_kw.get("source", "synthetic")
    if source not in ("synthetic", "table"):
        raise ConfigError(f"{_where(path, text, 'stream', 'source')}: "
                          f"expected 'synthetic' or 'table', got {source!r}")
    if source == "table":
        if "path" not in stream_kw:
            raise ConfigError(f"{_where(path, text, 'stream', 'source')}: "
                              "missing required key [stream] path for a table source")
        synthetic_only = {"dimension", "attack_classes", "train_per_class", "test_per_class",
                          "separation"} & set(stream_kw)
        if synthetic_only:
            key = sorted(synthetic_only)[0]
            raise ConfigError(f"{_where(path, text, 'stream', key)}: synthetic key given "
                              "with a table source; exactly one stream source is allowed")
        table = Path(stream_kw["path"])
        if not table.is_absolute():
            stream_kw["path"] = str((path.parent / table).resolve())
    elif "path" in stream_kw:
        raise ConfigError(f"{_where(path, text, 'stream', 'path')}: "
                          "path given but source is synthetic")

    if "method" in engine_kw:
        if "methods" in engine_kw:
            raise ConfigError(f"{_where(path, text, 'engine', 'method')}: "
                              "give either method or methods, not both")
        engine_kw["methods"] = (engine_kw.pop("method"),)
    methods = engine_kw.pop("methods", ("nacl",))
    if not methods:
        raise ConfigError(f"{_where(path, text, 'engine', 'methods')}: empty method list")
    for m in methods:
        if m not in engine.METHODS:
            key = "method" if "method" in raw.get("engine", {}) else "methods"
            raise ConfigError(f"{_where(path, text, 'engine', key)}: unknown method "
                              f"{m!r}; valid methods are {', '.join(engine.METHODS)}")
    if "hidden" in engine_kw:
        engine_kw["hidden"] = tuple(engine_kw["hidden"])
    try:
        train = mlp.TrainConfig(**train_kw)
        config = engine.EngineConfig(train=train, **engine_kw)
        stream = StreamSpec(**stream_kw)
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    if output is not None:
        output = Path(output)
        if not output.parent.exists():
            raise ConfigError(f"output directory does not exist: {output.parent}")
    return RunManifest(stream, config, tuple(dict.fromkeys(methods)), output, path)


def _toml_value(v) -> str:
    if isinstance(v, str):
        return '"' + v.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (tuple, list)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    return str(v)


def dump_config(manifest: RunManifest) -> str:
    """TOML text that parses back to the same manifest."""
    s = dataclasses.asdict(manifest.stream)
    if manifest.stream.source == "table":
        for key in ("dimension", "attack_classes", "train_per_class", "test_per_class",
                    "separation"):
            s.pop(key)
    e = {f.name: getattr(manifest.engine, f.name) for f in dataclasses.fields(manifest.engine)
         if f.name not in ("train", "method")}
    e["methods"] = manifest.methods
    t = {f.name: getattr(manifest.engine.train, f.name)
         for f in dataclasses.fields(manifest.engine.train) if f.name != "seed"}
    lines = []
    for name, table in (("stream", s), ("engine", e), ("train", t)):
        lines.append(f"[{name}]")
        lines.extend(f"{k} = {_toml_value(v)}" for k, v in table.items() if v is not None)
        lines.append("")
    return "\n".join(lines)


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.6f}"
    return str(v)


def write_results(records: Sequence[engine.StepRecord], path) -> None:
    rows = sorted(records, key=lambda r: (r.method, r.seed, r.task_index))
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(",".join(RESULT_COLUMNS) + "\n")
        for r in rows:
            fh.write(",".join(_fmt(getattr(r, c)) for c in RESULT_COLUMNS) + "\n")


def _one_run(job):
    stream_spec, config, seed, snapshot_dir = job
    stream = stream_spec.build()
    return engine.run_protocol(stream, config, seed, snapshot_dir).records


def run(manifest: RunManifest, jobs: int = 1, snapshot_dir=None, echo=print) -> int:
    """Execute every (method, seed) run and write the results table."""
    todo = []
    for method in manifest.methods:
        config = dataclasses.replace(manifest.engine, method=method)
        todo.extend((method, seed, (manifest.stream, config, seed, snapshot_dir))
                    for seed in range(manifest.engine.seeds))
    records, failed, outcomes = [], [], []
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [(m, s, pool.submit(_one_run, job)) for m, s, job in todo]
            for m, s, fut in futures:
                try:
                    outcomes.append((m, s, fut.result(), None))
                except Exception as exc:  # noqa: BLE001 - reported per run
                    outcomes.append((m, s, None, exc))
    else:
        for m, s, job in todo:
            try:
                outcomes.append((m, s, _one_run(job), None))
            except Exception as exc:  # noqa: BLE001 - reported per run
                outcomes.append((m, s, None, exc))
    for method, seed, recs, exc in outcomes:
        if exc is not None:
            failed.append(f"run {method} seed {seed} failed: {type(exc).__name__}: {exc}")
            continue
        records.extend(recs)
        for r in recs:
            echo(f"{r.method} seed {r.seed} task {r.task_index}: acer {r.acer:.4f} "
                 f"apcer {r.apcer:.4f} bpcer {r.bpcer:.4f}")
    if manifest.output is not None:
        write_results(records, manifest.output)
    for line in failed:
        print(line, file=sys.stderr)
    return EXIT_RUNTIME if failed else EXIT_OK


def _generate(manifest: RunManifest, out) -> None:
    stream = manifest.stream.build()
    samples = list(stream.initial.samples)
    samples += [s for chunk in stream.bonafide_chunks for s in chunk]
    samples += [s for c in sorted(stream.attack_pool) for s in stream.attack_pool[c]]
    samples += list(stream.test_set)
    dataset.save_feature_table(sorted(samples, key=lambda s: s.id), out)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nacl-pad", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run methods over seeds and write a results table")
    r.add_argument("--config", required=True)
    r.add_argument("--method", action="append", dest="methods", metavar="M",
                   help="method to run; repeat for several (overrides the config)")
    r.add_argument("--order", choices=engine.ORDERINGS)
    r.add_argument("--seeds", type=int)
    r.add_argument("--jobs", type=int, default=1)
    r.add_argument("--snapshots", metavar="DIR", help="dump model, GMM and buffer per step")
    r.add_argument("--out", required=True)
    g = sub.add_parser("generate", help="write the configured synthetic stream as a feature table")
    g.add_argument("--config", required=True)
    g.add_argument("--out", required=True)
    d = sub.add_parser("dump-config", help="print the fully resolved config")
    d.add_argument("--config", required=True)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.ERROR, format="%(levelname)s %(name)s: %(message)s")
    try:
        manifest = parse_config(args.config, getattr(args, "out", None)
                                if args.command == "run" else None)
        if args.command == "run":
            overrides = {}
            if args.order:
                overrides["ordering"] = args.order
            if args.seeds is not None:
                overrides["seeds"] = args.seeds
            config = dataclasses.replace(manifest.engine, **overrides)
            methods = manifest.methods
            if args.methods:
                bad = [m for m in args.methods if m not in engine.METHODS]
                if bad:
                    raise ConfigError(f"unknown method {bad[0]!r}; valid methods are "
                                      f"{', '.join(engine.METHODS)}")
                methods = tuple(dict.fromkeys(args.methods))
            if args.jobs < 1:
                raise ConfigError(f"--jobs must be >= 1, got {args.jobs}")
            manifest = dataclasses.replace(manifest, engine=config, methods=methods)
    except (ConfigError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if args.command == "dump-config":
        print(dump_config(manifest), end="")
        return EXIT_OK
    try:
        if args.command == "generate":
            _generate(manifest, args.out)
            return EXIT_OK
        return run(manifest, args.jobs, args.snapshots)
    except Exception as exc:  # noqa: BLE001 - mapped to the runtime exit code
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
