"""Operator entry points: synth, run, report, validate-cache.

Exit codes: 0 success, 2 config error, 3 data error, 4 numerical abort.
"""

import argparse
import json
import os
import sys
from dataclasses import fields as dataclass_fields

from . import checkpoint, data, stream
from .config import RunConfig, load_config, parse_config_text, resolved_text
from .errors import ConfigError, DataError, NumericalAbort

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


_CONFIG_FIELDS = [f.name for f in dataclass_fields(RunConfig)]


def _add_config_flags(p):
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a single config field (repeatable)")
    group = p.add_argument_group("config fields")
    for name in _CONFIG_FIELDS:
        group.add_argument(f"--{name.replace('_', '-')}", dest=f"cfg_{name}",
                           metavar="V", default=None)


def _collect_overrides(args):
    out = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got '{item}'")
        out.update(parse_config_text(item, source="--set"))
    for name in _CONFIG_FIELDS:
        raw = getattr(args, f"cfg_{name}", None)
        if raw is not None:
            out.update(parse_config_text(f"{name}={raw}", source="--" + name))
    return out


def _load(args) -> RunConfig:
    return load_config(args.config, overrides=_collect_overrides(args))


def cmd_synth(args) -> int:
    cfg = _load(args)
    if args.users <= 0 or args.items <= 0:
        raise ConfigError("users and items must be positive")
    os.makedirs(args.out, exist_ok=True)
    targets = ["interactions.csv", "visual.xsmf", "textual.xsmf", "affinities.xsmg"]
    clashes = [t for t in targets if os.path.exists(os.path.join(args.out, t))]
    if clashes and not args.force:
        raise ConfigError(
            f"refusing to overwrite {', '.join(clashes)} in {args.out} (use --force)"
        )
    result = data.synthesize(
        cfg.seed, args.users, args.items, args.windows, args.drift,
        args.interactions_per_window, dim=cfg.d, depth=cfg.side_layers,
    )
    paths = data.write_synthetic_dataset(args.out, result)
    with open(os.path.join(args.out, "synth_config.txt"), "w") as fh:
        fh.write(resolved_text(cfg))
        fh.write(f"# synth: users={args.users} items={args.items} "
                 f"windows={args.windows} drift={args.drift} "
                 f"interactions_per_window={args.interactions_per_window}\n")
    for name, path in paths.items():
        print(f"wrote {name}: {path}")
    return EXIT_OK


def _run_once(cfg: RunConfig, dataset, out_path, checkpoint_path) -> dict:
    def on_window(model, report):
        checkpoint.save_model(checkpoint_path, model)

    reports, model = stream.run_stream(dataset, cfg, on_window=on_window)
    with open(out_path, "w", encoding="utf-8") as fh:
        for rep in reports:
            rep = dict(rep)
            rep["tau"] = cfg.tau
            rep["variant"] = cfg.variant
            rep["seed"] = cfg.seed
            fh.write(json.dumps(rep) + "\n")
    return reports[-1]


def cmd_run(args) -> int:
    cfg = _load(args)
    if not cfg.interactions:
        raise ConfigError("config field 'interactions' is required for run")
    interactions = data.load_interactions(cfg.interactions)
    caches = {}
    for m in cfg.required_modalities():
        path = getattr(cfg, f"{m}_cache")
        if not path:
            raise ConfigError(f"variant '{cfg.variant}' requires {m}_cache")
        caches[m] = data.read_cache(path)
    chunks = stream.chunk_stream(interactions, cfg.chunks)
    dataset = stream.StreamDataset(chunks, caches, cfg.required_modalities(),
                                   max_seq_len=cfg.max_seq_len)

    os.makedirs(cfg.output_dir, exist_ok=True)
    with open(os.path.join(cfg.output_dir, "resolved_config.txt"), "w") as fh:
        fh.write(resolved_text(cfg))

    taus = [cfg.tau]
    if args.tau_sweep:
        taus = [float(t) for t in args.tau_sweep.split(",") if t.strip() != ""]
        if not taus:
            raise ConfigError("--tau-sweep given but empty")
    for tau in taus:
        run_cfg = RunConfig(**{**cfg.__dict__, "tau": tau}).validate()
        suffix = f"_tau{tau:g}" if args.tau_sweep else ""
        out_path = os.path.join(cfg.output_dir, f"report{suffix}.jsonl")
        ck_path = os.path.join(cfg.output_dir, f"checkpoint{suffix}.xsmo")
        avg = _run_once(run_cfg, dataset, out_path, ck_path)
        print(f"tau={tau:g} avg HR@10={avg['hr_at_10']:.4f} "
              f"NDCG@10={avg['ndcg_at_10']:.4f} -> {out_path}")
    return EXIT_OK


def _load_report(path):
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                rows.append(json.loads(line))
    if not rows:
        raise DataError(f"{path}: empty report")
    for row in rows:
        if row.get("schema_version") != stream.SCHEMA_VERSION:
            raise DataError(
                f"{path}: schema_version {row.get('schema_version')} "
                f"!= {stream.SCHEMA_VERSION}"
            )
    return rows


def cmd_report(args) -> int:
    runs = []
    for path in args.reports:
        rows = _load_report(path)
        name = os.path.basename(path)
        windows = {r["window"]: r for r in rows if r["hr_at_10"] is not None
                   and r["window"] != "avg"}
        avg = next((r for r in rows if r["window"] == "avg"), None)
        runs.append((name, windows, avg, rows))

    all_windows = sorted({w for _, wins, _, _ in runs for w in wins})
    header = ["window"] + [f"{name} HR@10|NDCG@10" for name, _, _, _ in runs]
    widths = [max(8, len(h)) for h in header]
    lines = ["  ".join(h.ljust(w) for h, w in zip(header, widths))]
    for w in all_windows:
        cells = [f"D{w + 1}".ljust(widths[0])]
        for i, (_, wins, _, _) in enumerate(runs):
            row = wins.get(w)
            cell = (f"{row['hr_at_10']:.4f}|{row['ndcg_at_10']:.4f}" if row else "-")
            cells.append(cell.ljust(widths[i + 1]))
        lines.append("  ".join(cells))
    cells = ["AVG".ljust(widths[0])]
    for i, (_, _, avg, _) in enumerate(runs):
        cell = (f"{avg['hr_at_10']:.4f}|{avg['ndcg_at_10']:.4f}" if avg else "-")
        cells.append(cell.ljust(widths[i + 1]))
    lines.append("  ".join(cells))
    table = "\n".join(lines)
    print(table)

    if args.csv:
        with open(args.csv, "w", encoding="utf-8") as fh:
            fh.write("run,tau,avg_hr_at_10,avg_ndcg_at_10,total_params,trainable_params\n")
            for name, _, avg, rows in runs:
                tagged = [r for r in rows if r["window"] != "avg"]
                tau = tagged[-1].get("tau", "") if tagged else ""
                tp = tagged[-1].get("total_params", "") if tagged else ""
                trp = tagged[-1].get("trainable_params", "") if tagged else ""
                fh.write(f"{name},{tau},{avg['hr_at_10'] if avg else ''},"
                         f"{avg['ndcg_at_10'] if avg else ''},{tp},{trp}\n")
        print(f"wrote {args.csv}")
    return EXIT_OK


def cmd_validate_cache(args) -> int:
    for path in args.caches:
        info = data.validate_cache(path)
        print(f"{path}: ok modality={info['modality']} items={info['items']} "
              f"layers={info['layers']} dim={info['dim']}")
    return EXIT_OK


def build_parser():
    ap = argparse.ArgumentParser(
        prog="xsmoe",
        description="expandable side mixture-of-experts streaming recommender",
    )
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic drifting stream")
    _add_config_flags(p)
    p.add_argument("--out", required=True)
    p.add_argument("--users", type=int, default=2000)
    p.add_argument("--items", type=int, default=500)
    p.add_argument("--windows", type=int, default=10)
    p.add_argument("--drift", type=float, default=0.5)
    p.add_argument("--interactions-per-window", type=int, default=3000)
    p.add_argument("--force", action="store_true")
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("run", help="run the streaming protocol end to end")
    _add_config_flags(p)
    p.add_argument("--tau-sweep", default="",
                   help="comma-separated pruning thresholds, one report each")
    p.set_defaults(fn=cmd_run)

    p = sub.add_parser("report", help="summarize one or more report files")
    p.add_argument("reports", nargs="+")
    p.add_argument("--csv", default="", help="also write a comparison CSV")
    p.set_defaults(fn=cmd_report)

    p = sub.add_parser("validate-cache", help="check XSMF feature caches")
    p.add_argument("caches", nargs="+")
    p.set_defaults(fn=cmd_validate_cache)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalAbort as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
