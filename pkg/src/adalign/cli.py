"""``adalign`` command line: synth, train, eval, verify, export-curves.

Exit codes: 0 success, 1 runtime failure, 2 usage or config error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import logging
import os
import sys
from pathlib import Path

from .encoder import classify, encode, predict
from .errors import AdalignError, ConfigError, DimensionError, TrainingAborted
from .graph import (
    canonical_task,
    generate_csbm,
    load_domain,
    load_spec,
    save_domain,
    spec_to_text,
    with_seed,
)
from .metrics import discrepancy_report, format_report, macro_f1, micro_f1, report_csv
from .trainer import (
    RECORD_FIELDS,
    TrainConfig,
    adjacency,
    config_to_text,
    fit,
    format_record,
    parse_config_text,
    read_metrics_log,
    save_state,
    load_state,
)
from .verify import SUITES

log = logging.getLogger("adalign")

OUT_DIR_ENV = "ADALIGN_OUT_DIR"
EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2
DATA_FILES = ("edges.txt", "features.csv", "labels.txt")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def resolve_out_dir(flag: str | None) -> Path:
    env = os.environ.get(OUT_DIR_ENV)
    out = env or flag
    if not out:
        raise UsageError(f"no output directory: pass --out or set {OUT_DIR_ENV}")
    return Path(out)


# ---------------------------------------------------------------------------
# synth


def cmd_synth(args) -> int:
    spec = load_spec(args.spec) if args.spec else canonical_task()
    if args.seed is not None:
        spec = with_seed(spec, args.seed)
    spec.validate()
    out = resolve_out_dir(args.out)
    source, target = generate_csbm(spec)
    save_domain(out / "source", source)
    save_domain(out / "target", target)
    (out / "spec.txt").write_text(spec_to_text(spec))
    print(f"wrote {source.num_nodes}+{target.num_nodes} nodes to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# train


def resolve_config(args) -> TrainConfig:
    """Flag > config file > default."""
    values: dict[str, object] = {}
    if args.config:
        values.update(parse_config_text(Path(args.config).read_text()))
    for f in dataclasses.fields(TrainConfig):
        flag = getattr(args, f.name, None)
        if flag is not None:
            values[f.name] = flag
    return TrainConfig.from_mapping(values)


def _check_data_dir(data: Path) -> None:
    for dom in ("source", "target"):
        for name in DATA_FILES:
            if not (data / dom / name).is_file():
                raise FileNotFoundError(f"missing input file {data / dom / name}")


def write_manifest(path: Path, cfg: TrainConfig, data: Path, out: Path, config_file: str | None) -> None:
    lines = ["# adalign run manifest", "[config]"]
    lines += config_to_text(cfg).splitlines()
    lines += ["[run]", f"seed={cfg.seed}", f"data_dir={data.resolve()}", f"out_dir={out.resolve()}"]
    if config_file:
        lines.append(f"config_file={Path(config_file).resolve()}")
    lines.append("[checksums]")
    for dom in ("source", "target"):
        for name in DATA_FILES:
            lines.append(f"{dom}/{name}=sha256:{sha256(data / dom / name)}")
    if (data / "spec.txt").is_file():
        lines.append(f"spec.txt=sha256:{sha256(data / 'spec.txt')}")
    if config_file:
        lines.append(f"config=sha256:{sha256(Path(config_file))}")
    path.write_text("\n".join(lines) + "\n")


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    data = Path(args.data)
    out = resolve_out_dir(args.out)
    _check_data_dir(data)
    source = load_domain(data / "source")
    target = load_domain(data / "target")
    out.mkdir(parents=True, exist_ok=True)
    write_manifest(out / "manifest.txt", cfg, data, out, args.config)

    metrics_path, timing_path = out / "metrics.log", out / "timing.log"
    with open(metrics_path, "w") as mlog, open(timing_path, "w") as tlog:
        def on_record(rec):
            # wall time goes to its own file so metrics.log is reproducible byte for byte
            tlog.write(f"epoch:{rec.epoch} wall_ms:{rec.wall_ms!r}\n")
            mlog.write(format_record(dataclasses.replace(rec, wall_ms=None)) + "\n")
            mlog.flush()
            if not args.quiet:
                print(format_record(rec), flush=True)

        try:
            state, records = fit(source, target, cfg, eval_only=args.eval_only, on_record=on_record)
        except TrainingAborted as exc:
            (out / "aborted.txt").write_text(" ".join(f"{k}:{v!r}" for k, v in exc.record.items()) + "\n")
            print(f"error: training aborted: {exc}", file=sys.stderr)
            return EXIT_RUNTIME
    save_state(out / "checkpoint.bin", state, cfg)
    last = records[-1]
    print(f"done: epoch {last.epoch} target micro_f1 {last.micro_f1!r} macro_f1 {last.macro_f1!r}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval


def cmd_eval(args) -> int:
    encoder, sampler, cfg = load_state(args.checkpoint)
    data = Path(args.data)
    source = load_domain(data / "source")
    target = load_domain(data / "target", with_labels=(data / "target" / "labels.txt").is_file())
    for g, name in ((source, "source"), (target, "target")):
        if g.feature_dim != encoder.in_dim:
            raise DimensionError(f"checkpoint expects {encoder.in_dim} features, {name} graph has {g.feature_dim}")

    z_s = encode(adjacency(source), source.features, encoder).values
    z_t = encode(adjacency(target), target.features, encoder, cfg.target_prop_steps).values
    graph, z = (source, z_s) if args.domain == "source" else (target, z_t)
    f1 = {}
    if graph.labels is not None:
        pred = predict(classify(z, encoder))
        f1 = {
            "micro_f1": micro_f1(graph.labels, pred, encoder.num_classes),
            "macro_f1": macro_f1(graph.labels, pred, encoder.num_classes),
        }
    learned = sampler if cfg.sampler == "adaptive" else None
    disc = discrepancy_report(z_s, z_t, cfg.kappa, seed=cfg.seed, sampler=learned, num_freqs=args.num_freqs)

    f1_line = f"domain:{args.domain} " + (format_report(f1) if f1 else "micro_f1:na macro_f1:na")
    disc_line = format_report(disc)
    print(f1_line)
    print(disc_line)
    out_flag = os.environ.get(OUT_DIR_ENV) or args.out
    if out_flag:
        out = Path(out_flag)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"eval_{args.domain}.txt").write_text(f1_line + "\n" + disc_line + "\n")
        header, row = report_csv({**f1, **disc})
        (out / f"eval_{args.domain}.csv").write_text(header + "\n" + row + "\n")
    return EXIT_OK


# ---------------------------------------------------------------------------
# verify / export-curves


def cmd_verify(args) -> int:
    suite = SUITES.get(args.suite)
    if suite is None:
        raise UsageError(f"unknown suite {args.suite!r}; choose from {', '.join(SUITES)}")
    checks = suite(args.seed)
    for c in checks:
        print(c.line())
    failed = sum(not c.passed for c in checks)
    print(f"{args.suite}: {len(checks) - failed}/{len(checks)} checks passed")
    return EXIT_OK if failed == 0 else EXIT_RUNTIME


def _csv_cell(value) -> str:
    if value is None:
        return "na"
    return repr(value)


def cmd_export_curves(args) -> int:
    records = read_metrics_log(args.log)
    with open(args.out_csv, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(RECORD_FIELDS)
        for rec in records:
            writer.writerow([_csv_cell(getattr(rec, f)) for f in RECORD_FIELDS])
    print(f"wrote {len(records)} records to {args.out_csv}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    kinds = {"int": int, "float": float, "str": str}
    for f in dataclasses.fields(TrainConfig):
        kind = kinds.get(str(f.type), float)
        flags = [f"--{f.name.replace('_', '-')}"]
        if f.name == "lam":
            flags.append("--lambda")
        p.add_argument(*flags, dest=f.name, type=kind, default=None, help=f"override config field {f.name}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="adalign", description="Spectral distribution alignment for graph domain adaptation.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a source/target CSBM pair")
    p.add_argument("--spec", help="CSBM spec file (default: the canonical task)")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help=f"output directory (overridden by ${OUT_DIR_ENV})")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="run minimax training")
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--data", required=True, help="directory with source/ and target/")
    p.add_argument("--out", help=f"output directory (overridden by ${OUT_DIR_ENV})")
    p.add_argument("--eval-only", action="store_true")
    p.add_argument("--quiet", action="store_true")
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="F1 and discrepancy report for a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--domain", choices=("source", "target"), default="target")
    p.add_argument("--num-freqs", type=int, default=8192)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("verify", help="run a property suite")
    p.add_argument("suite", help=f"one of: {', '.join(SUITES)}")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("export-curves", help="metrics log to CSV")
    p.add_argument("log")
    p.add_argument("out_csv")
    p.set_defaults(func=cmd_export_curves)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (AdalignError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
