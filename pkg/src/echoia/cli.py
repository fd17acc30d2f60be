"""Command line: ``gen``, ``serve``, ``run``, ``interactive`` and ``eval``."""

from __future__ import annotations

import argparse
import asyncio
import json
import logging
import shutil
import sys
from dataclasses import fields
from pathlib import Path
from typing import TextIO

from . import config as cfgmod
from .config import ConfigError, ExperimentConfig
from .evaluation import (
    CorpusReport,
    read_json,
    timeline_eval,
    user_table,
    write_csv,
    write_json,
    write_table,
)
from .features import FeatureCatalog
from .service import RecordStore, Service, WireMessage, serve
from .simulation import background_windows, device_windows, gen_corpus, read_corpus, run_session, write_corpus

log = logging.getLogger("echoia")


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key = value config file; flags override its keys")
    defaults = ExperimentConfig()
    for f in fields(ExperimentConfig):
        p.add_argument(
            "--" + f.name.replace("_", "-"),
            dest=f.name,
            metavar=f.name.upper(),
            default=None,
            help=f"{f.metadata['help']} (default: {cfgmod.format_value(getattr(defaults, f.name))})",
        )


def resolve_config(args: argparse.Namespace) -> ExperimentConfig:
    cfg = cfgmod.load(args.config) if args.config else ExperimentConfig()
    changes = {}
    for f in fields(ExperimentConfig):
        raw = getattr(args, f.name, None)
        if raw is not None:
            changes[f.name] = cfgmod.coerce(f.name, raw)
    return cfgmod.override(cfg, **changes)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="echoia", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic corpus")
    _add_config_flags(p)
    p.add_argument("--force", action="store_true", help="replace an existing corpus")

    p = sub.add_parser("serve", help="run the control server over TCP")
    _add_config_flags(p)

    p = sub.add_parser("run", help="closed-loop timeline runs for the configured scheme(s)")
    _add_config_flags(p)
    p.add_argument("--sessions", action="store_true", help="also replay every device through the service and keep its logs")

    p = sub.add_parser("interactive", help="answer password and PIN prompts at the terminal")
    _add_config_flags(p)
    p.add_argument("--device", default="0", help="device id or index into the corpus (default: 0)")
    p.add_argument("--password", default="echoia", help="the device password (default: echoia)")
    p.add_argument("--pin", default="0000", help="the device PIN (default: 0000)")
    p.add_argument("--minutes", type=float, default=None, help="stop after this much device time")

    p = sub.add_parser("eval", help="summarize run reports against the ground truth")
    _add_config_flags(p)
    return parser


# -- gen ------------------------------------------------------------------------


def cmd_gen(cfg: ExperimentConfig, force: bool = False, out: TextIO | None = None) -> int:
    out = out or sys.stdout
    root = Path(cfg.corpus)
    if (root / "corpus.json").exists() or (root / "devices").exists():
        if not force:
            print(f"error: {root} already holds a corpus (use --force to replace it)", file=sys.stderr)
            return 2
        for name in ("devices", "truth"):
            shutil.rmtree(root / name, ignore_errors=True)
        for name in ("corpus.json", "scripts.json"):
            (root / name).unlink(missing_ok=True)
    corpus = gen_corpus(cfg.gen_params())
    try:
        root.mkdir(parents=True, exist_ok=True)
        write_corpus(corpus, root)
    except OSError as exc:
        print(f"error: writing corpus to {root}: {exc}", file=sys.stderr)
        return 2
    summary = corpus.summary(cfg.window_ms, cfg.hop_ms)
    print(
        f"corpus {root}: {summary['users']} users, {summary['windows']} windows, "
        f"intruder fraction {summary['intruder_fraction']:.3f}, drift {summary['drift']}",
        file=out,
    )
    if summary["null_separability"]:
        print("null-separability corpus: planted features carry no signal", file=out)
    return 0


def _load_corpus(cfg: ExperimentConfig):
    try:
        return read_corpus(cfg.corpus)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return None


# -- run ------------------------------------------------------------------------


def cmd_run(cfg: ExperimentConfig, sessions: bool = False, out: TextIO | None = None) -> int:
    out = out or sys.stdout
    corpus = _load_corpus(cfg)
    if corpus is None:
        return 2
    engine_cfg, policy = cfg.engine_config(), cfg.policy()
    out_dir = Path(cfg.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    cache = {
        d.device_id: device_windows(d, corpus.scripts[d.device_id], corpus.catalog, cfg.window_ms, cfg.hop_ms)
        for d in corpus.devices
    }
    aborted: list[str] = []
    reports = []
    for scheme in cfg.schemes:
        report = CorpusReport(scheme)
        for i, d in enumerate(corpus.devices):
            windows, owner = cache[d.device_id]
            try:
                report.users.append(
                    timeline_eval(
                        d.device_id, windows, owner, corpus.scripts[d.device_id].ranking,
                        corpus.catalog, scheme, engine_cfg, policy, cfg.seed,
                    )
                )
            except Exception as exc:
                aborted.append(f"{scheme}/{d.device_id}: {type(exc).__name__}: {exc}")
                log.error("aborted %s", aborted[-1])
            print(f"[{scheme}] {i + 1}/{len(corpus.devices)} {d.device_id}", file=sys.stderr)
        if report.users:
            write_csv(report, out_dir / f"{scheme}.csv")
            write_table(report, out_dir / f"{scheme}_users.csv")
            reports.append(report)
    if reports:
        write_json(reports, out_dir / "report.json")
    for r in reports:
        print(f"{r.scheme}: mean ACC {r.mean_acc:.4f} over {len(r.users)} users", file=out)
    if len(reports) == 2:
        print(f"echoia - fixed_all_features: {reports[0].mean_acc - reports[1].mean_acc:+.4f}", file=out)
    if sessions:
        bg = background_windows(corpus, cfg.window_ms, cfg.hop_ms)
        for d in corpus.devices:
            for scheme in cfg.schemes:
                svc = Service(corpus.catalog, cfg.service_config(), RecordStore(None), bg, adaptive=scheme == "echoia")
                slog = run_session(corpus, d.device_id, cfg.service_config(), cfg.policy(), cfg.seed, service=svc)
                slog.write(out_dir / "sessions" / scheme)
                if slog.aborted:
                    aborted.append(f"session {scheme}/{d.device_id}: {slog.aborted}")
    for a in aborted:
        print(f"aborted: {a}", file=sys.stderr)
    return 1 if aborted else 0


# -- eval -----------------------------------------------------------------------


def cmd_eval(cfg: ExperimentConfig, out: TextIO | None = None) -> int:
    out = out or sys.stdout
    path = Path(cfg.out) / "report.json"
    if not path.exists():
        print(f"error: no run report at {path}", file=sys.stderr)
        return 2
    truth_path = Path(cfg.corpus) / "truth" / "ground_truth.json"
    if not truth_path.exists():
        print(f"error: no ground truth at {truth_path}", file=sys.stderr)
        return 2
    truth = json.loads(truth_path.read_text())
    reports = read_json(path)
    summary = {}
    for scheme, report in reports.items():
        print(f"== {scheme}", file=out)
        print(f"{'device':<20} {'acc':>7} {'ta':>6} {'tr':>6} {'fa':>6} {'fr':>6} {'refr':>5} {'locks':>6}", file=out)
        for row in user_table(report):
            cells = [f"{row[0]:<20}", f"{row[1]:7.4f}"] + [f"{v:>6}" for v in row[2:6]] + [f"{row[6]:>5}", f"{row[7]:>6}"]
            print(" ".join(cells), file=out)
        overlaps = [len(set(u.final_features) & set(truth[u.device_id]["planted"])) for u in report.users]
        k = max((len(truth[u.device_id]["planted"]) for u in report.users), default=0)
        recovered = sum(o >= k // 2 + 1 for o in overlaps) / len(overlaps) if overlaps else 0.0
        summary[scheme] = {"mean_acc": report.mean_acc, "mean_points": report.mean_points, "planted_overlap": overlaps, "recovered": recovered}
        print(f"planted features kept in final top set (majority of k): {recovered:.2%}", file=out)
    (Path(cfg.out) / "eval.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
    return 0


# -- serve ----------------------------------------------------------------------


def cmd_serve(cfg: ExperimentConfig) -> int:
    catalog = FeatureCatalog.default()
    background = {}
    if (Path(cfg.corpus) / "corpus.json").exists():
        corpus = read_corpus(cfg.corpus)
        catalog = corpus.catalog
        background = background_windows(corpus, cfg.window_ms, cfg.hop_ms)
    store = RecordStore(cfg.data_dir, fsync=cfg.fsync)
    service = Service(catalog, cfg.service_config(), store, background)
    ready = asyncio.Event()

    async def main():
        task = asyncio.create_task(serve(service, cfg.host, cfg.port, ready))
        await ready.wait()
        host, port = service.address
        print(f"listening on {host}:{port}", flush=True)
        await task

    try:
        asyncio.run(main())
    except KeyboardInterrupt:
        pass
    finally:
        store.close()
    return 0


# -- interactive ----------------------------------------------------------------


def _pick_device(corpus, ref: str) -> str:
    ids = [d.device_id for d in corpus.devices]
    if ref in ids:
        return ref
    try:
        return ids[int(ref)]
    except (ValueError, IndexError):
        raise ConfigError(f"no device {ref!r} in corpus") from None


def cmd_interactive(
    cfg: ExperimentConfig,
    device: str = "0",
    password: str = "echoia",
    pin: str = "0000",
    minutes: float | None = None,
    stdin: TextIO | None = None,
    out: TextIO | None = None,
) -> int:
    stdin, out = stdin or sys.stdin, out or sys.stdout
    corpus = _load_corpus(cfg)
    if corpus is None:
        return 2
    device_id = _pick_device(corpus, device)

    def ask(text: str) -> str:
        out.write(text)
        out.flush()
        line = stdin.readline()
        if line == "":
            raise EOFError
        return line.rstrip("\n")

    def prompt(kind: str, holder: str, msg) -> tuple[bool, bool]:
        if kind == "password":
            typed = ask(f"device locked (held by {holder}); password: ")
            return typed == password, True
        typed = ask("PIN challenge; PIN: ")
        consent = ask("refresh your personal features? [y/n]: ").strip().lower().startswith("y")
        return typed == pin, consent

    def observer(msg: WireMessage) -> None:
        if msg.type == "LOCKED" and msg.payload.get("window_id") is not None:
            print(f"LOCKED at {msg.payload['timestamp']}", file=out)
        elif msg.type == "FEATURE_SET_UPDATE" and msg.payload.get("previous_top"):
            old = ", ".join(msg.payload["previous_top"])
            new = ", ".join(msg.payload["top"])
            print(f"FEATURE_SET_UPDATE v{msg.payload['version']}: [{old}] -> [{new}]", file=out)

    stop = None if minutes is None else int(minutes * 60 * corpus.params.rate_hz)
    slog = run_session(
        corpus, device_id, cfg.service_config(), cfg.policy(), cfg.seed, stop=stop, prompt=prompt, observer=observer
    )
    where = slog.write(Path(cfg.out) / "interactive")
    if slog.stopped == "eof":
        print("\ninput closed; session logs flushed", file=out)
    print(f"logs in {where}", file=out)
    if slog.aborted:
        print(f"aborted: {slog.aborted}", file=sys.stderr)
        return 1
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        if args.command == "gen":
            return cmd_gen(cfg, args.force)
        if args.command == "run":
            return cmd_run(cfg, args.sessions)
        if args.command == "eval":
            return cmd_eval(cfg)
        if args.command == "serve":
            return cmd_serve(cfg)
        return cmd_interactive(cfg, args.device, args.password, args.pin, args.minutes)
    except (ConfigError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
