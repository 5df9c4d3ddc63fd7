"""Command-line entry point.

    mabert <command> --config run.toml [--seed N] [--out DIR]

Commands: synth, preprocess, pretrain, finetune, evaluate, fraction,
incremental, inspect. Each writes its artifacts into the output directory;
reports are CSV, logs are ``key=value`` lines.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .checkpoint import (
    Checkpoint,
    CheckpointError,
    IncompatibleCheckpoint,
    check_encoder_compatible,
    load_checkpoint,
    read_manifest,
    save_checkpoint,
)
from .config import ConfigError, RunConfig, load_config
from .geo import ReconstructionConfig, read_tracks_csv, write_tracks_csv
from .model import Model
from .pipeline import preprocess_tracks
from .report import Entry, csv_bytes, emit_report, plot_xy, write_xy
from .fileio import atomic_write
from .scene import assemble_scenes, read_scenes, write_scenes
from .synth import generate, make_airport_family, separation_violations
from .training import (
    ExperimentPlan,
    RunLog,
    constant_eta_baseline,
    data_fraction_run,
    eligible,
    evaluate,
    incremental_run,
    prequential_violations,
    pretrain,
    run_task,
    split_scenes,
)

COMMANDS = ("synth", "preprocess", "pretrain", "finetune", "evaluate", "fraction", "incremental", "inspect")
TRAINING = {"pretrain", "finetune", "fraction", "incremental"}

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_INCOMPATIBLE = 0, 1, 2, 3

log = logging.getLogger("mabert")


class UsageError(ValueError):
    pass


# --------------------------------------------------------------------------
# helpers


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _need_path(cfg: RunConfig, key: str) -> Path:
    value = getattr(cfg.paths, key)
    if not value:
        raise ConfigError(f"{cfg.source}: [paths] {key} is required for this command")
    path = Path(value)
    if not path.exists():
        raise ConfigError(f"{cfg.source}: [paths] {key} = {value!r} does not exist")
    return path


def _airport_spec(cfg: RunConfig):
    family = make_airport_family(cfg.synth.family_seed)
    if cfg.airport not in family:
        raise ConfigError(f"{cfg.source}: airport must be one of {sorted(family)}, got {cfg.airport!r}")
    spec = family[cfg.airport]
    if cfg.synth.operating_hours is not None:
        spec = replace(spec, operating_hours=tuple(int(h) for h in cfg.synth.operating_hours))
    if cfg.synth.arrival_rate is not None:
        spec = replace(spec, arrival_rate=cfg.synth.arrival_rate)
    return spec


def _plan(cfg: RunConfig, mode: str, task: str | None = None, **extra) -> ExperimentPlan:
    p = cfg.plan
    task = task or p.task
    over = dict(batch_size=p.batch_size, data_fraction=p.data_fraction, mask_steps=p.mask_steps, seed=cfg.seed)
    over["fixed_masks"] = p.fixed_masks
    if p.epochs is not None:
        over["epochs"] = p.epochs
    if p.lr is not None:
        over["lr"] = p.lr
    over.update(extra)
    try:
        return ExperimentPlan.default(mode, task, **over)
    except ValueError as exc:
        raise ConfigError(f"{cfg.source}: [plan] {exc}") from exc


def _scenes(cfg: RunConfig):
    path = _need_path(cfg, "scenes")
    return read_scenes(path), _sha256(path)


def _parent(cfg: RunConfig, required: bool) -> Checkpoint | None:
    if not cfg.paths.checkpoint:
        if required:
            raise ConfigError(f"{cfg.source}: [paths] checkpoint is required for this command")
        return None
    path = _need_path(cfg, "checkpoint")
    ck = load_checkpoint(path)
    if cfg.model_given:
        check_encoder_compatible(ck.model.config, cfg.model, str(path))
    return ck


def _provenance(cfg: RunConfig, command: str, plan: ExperimentPlan | None, data_sha: str) -> dict:
    return {"command": command, "plan": plan.to_dict() if plan else None, "config": cfg.to_dict(), "data_sha256": data_sha}


def _entries(cfg: RunConfig, report, extra=()) -> list[Entry]:
    return [Entry(cfg.airport, cfg.method_label, report)] + list(extra)


def _summary(out: Path, name: str, rows: list[tuple[str, object]]) -> Path:
    path = out / name
    atomic_write(path, csv_bytes(["key", "value"], rows))
    return path


# --------------------------------------------------------------------------
# commands


def cmd_synth(cfg: RunConfig, out: Path) -> list[Path]:
    spec = _airport_spec(cfg)
    days = generate(spec, cfg.synth.days, cfg.seed if cfg.seed is not None else 0)
    tracks = [tr for d in days for tr in d.tracks]
    path = out / "tracks.csv"
    write_tracks_csv(path, tracks)
    rows = [(d.date, len(d.tracks)) for d in days]
    daily = out / "synth_daily.csv"
    atomic_write(daily, csv_bytes(["date", "flights"], rows))
    viol = sum(separation_violations(d, spec) for d in days)
    summ = _summary(out, "synth_summary.csv", [("airport", spec.name), ("days", len(days)), ("flights", len(tracks)), ("separation_violations", viol)])
    return [path, daily, summ]


def cmd_preprocess(cfg: RunConfig, out: Path) -> list[Path]:
    src = _need_path(cfg, "tracks")
    pp = cfg.preprocess
    ref = pp.airport_ref if pp.airport_ref is not None else _airport_spec(cfg).ref_point
    tracks = read_tracks_csv(src)
    rec = ReconstructionConfig(lambda2=pp.lambda2, lambda3=pp.lambda3)
    trajs = preprocess_tracks(tracks, tuple(ref), pp.dt, pp.cutoff_nm, rec)
    scenes = assemble_scenes(trajs, pp.t_max, pp.dt)
    path = out / "scenes.bin"
    write_scenes(path, scenes)
    agents = [s.N for s in scenes]
    summ = _summary(
        out,
        "preprocess_summary.csv",
        [
            ("tracks", len(tracks)),
            ("trajectories", len(trajs)),
            ("scenes", len(scenes)),
            ("mean_agents", sum(agents) / len(agents) if agents else 0.0),
            ("max_agents", max(agents, default=0)),
        ],
    )
    return [path, summ]


def cmd_pretrain(cfg: RunConfig, out: Path) -> list[Path]:
    scenes, data_sha = _scenes(cfg)
    plan = _plan(cfg, "pretrain", "mask_recovery")
    model = Model(cfg.model, seed=cfg.seed)
    runlog = RunLog(out / "pretrain.log")
    res = pretrain(model, scenes, plan, runlog)
    test = split_scenes(scenes)[2]
    report = evaluate(model, test, "mask_recovery", seed=plan.seed, horizon=plan.mask_steps) if test else None
    ck = out / "pretrain.ckpt"
    save_checkpoint(ck, model, _provenance(cfg, "pretrain", plan, data_sha))
    written = [ck, out / "pretrain.log"]
    entries = _entries(cfg, report) if report else []
    return written + emit_report(out, entries, {cfg.method_label: res.curve}, prefix="pretrain")


def cmd_finetune(cfg: RunConfig, out: Path) -> list[Path]:
    scenes, data_sha = _scenes(cfg)
    parent = _parent(cfg, required=False)
    if parent is None:
        model = Model(cfg.model, seed=cfg.seed)
        mode = "scratch"
    else:
        model = parent.model
        mode = "finetune"
    plan = _plan(cfg, mode)
    if plan.task == "mask_recovery":
        raise ConfigError(f"{cfg.source}: [plan] task for finetune must be trajectory or eta")
    runlog = RunLog(out / "finetune.log")
    res = run_task(model, scenes, plan, runlog)
    ck = out / "finetune.ckpt"
    save_checkpoint(ck, model, _provenance(cfg, "finetune", plan, data_sha), parent)
    extra = []
    if plan.task == "eta" and res.report is not None:
        train, _, test = split_scenes([s for s in scenes if eligible(s, "eta")])
        extra.append(Entry(cfg.airport, "constant", constant_eta_baseline(train, test)))
    entries = _entries(cfg, res.report, extra) if res.report is not None else []
    return [ck, out / "finetune.log"] + emit_report(out, entries, {cfg.method_label: res.curve}, prefix="finetune")


def cmd_evaluate(cfg: RunConfig, out: Path) -> list[Path]:
    scenes, _ = _scenes(cfg)
    ck = _parent(cfg, required=True)
    model = ck.model
    task = cfg.plan.task
    if task == "eta" and not model.config.decoder_outputs:
        raise UsageError("checkpoint has no ETA head; fine-tune it on the eta task first")
    test = split_scenes([s for s in scenes if eligible(s, task, cfg.plan.mask_steps)])[2]
    if not test:
        raise UsageError("no test scenes for this task")
    seed = cfg.seed if cfg.seed is not None else 0
    report = evaluate(model, test, task, seed=seed, horizon=cfg.plan.mask_steps)
    extra = []
    if task == "eta":
        train = split_scenes([s for s in scenes if eligible(s, "eta")])[0]
        extra.append(Entry(cfg.airport, "constant", constant_eta_baseline(train, test)))
    return emit_report(out, _entries(cfg, report, extra), prefix="evaluate")


def cmd_fraction(cfg: RunConfig, out: Path) -> list[Path]:
    scenes, data_sha = _scenes(cfg)
    parent = _parent(cfg, required=True)
    plan = _plan(cfg, "finetune")
    runlog = RunLog(out / "fraction.log")
    rows = data_fraction_run(parent.model, scenes, cfg.fractions, plan, runlog)
    metrics = list(rows[0][1].report.metrics()) if rows[0][1].report else []
    table = out / "fraction_table.csv"
    body = []
    for frac, res in rows:
        m = res.report.metrics() if res.report else {}
        body.append([frac, res.n_train, res.final_val_loss] + [m.get(k) for k in metrics])
    atomic_write(table, csv_bytes(["fraction", "n_train", "val_loss"] + metrics, body))
    written = [table, out / "fraction.log"]
    series = {}
    for k in metrics:
        p = out / f"fraction_{k}.xy.csv"
        xs = [f for f, _ in rows]
        ys = [res.report.metrics()[k] for _, res in rows]
        write_xy(p, xs, ys, ("fraction", k))
        written.append(p)
        if k != "loss":
            series[k] = (xs, ys)
    if series:
        fig = out / "fraction.png"
        plot_xy(fig, series, "training data fraction", "test metric", title=f"{cfg.airport} {plan.task}")
        written.append(fig)
    return written


def cmd_incremental(cfg: RunConfig, out: Path) -> list[Path]:
    scenes, data_sha = _scenes(cfg)
    parent = _parent(cfg, required=True)
    plan = _plan(cfg, "incremental", update_period=cfg.period)
    runlog = RunLog(out / "incremental.log")
    res = incremental_run(parent.model, scenes, cfg.period, plan, runlog)
    violations = prequential_violations(runlog.records)
    metrics = list(res.overall.metrics()) if res.overall else []
    table = out / "incremental_periods.csv"
    body = [[key, n] + [(r.metrics().get(k) if r else None) for k in metrics] for key, r, n in res.periods]
    atomic_write(table, csv_bytes(["period", "n_scenes"] + metrics, body))
    ck = out / "incremental.ckpt"
    save_checkpoint(ck, res.model, _provenance(cfg, "incremental", plan, data_sha), parent)
    summ = _summary(
        out,
        "incremental_summary.csv",
        [
            ("period", cfg.period),
            ("updates", sum(1 for _, _, n in res.periods if n)),
            ("overfit_prone", int(res.overfit_prone)),
            ("train_before_evaluate_violations", violations),
        ]
        + [(k, v) for k, v in (res.overall.metrics().items() if res.overall else [])],
    )
    written = [table, summ, ck, out / "incremental.log"]
    if res.overall is not None:
        entries = [Entry(cfg.airport, f"{cfg.method_label} ({cfg.period})", res.overall)]
        written += emit_report(out, entries, prefix="incremental")
    for k in metrics:
        pts = [(key, r.metrics()[k]) for key, r, _ in res.periods if r is not None]
        p = out / f"incremental_{k}.xy.csv"
        write_xy(p, *zip(*pts), names=("period", k))
        written.append(p)
    if violations:
        raise RuntimeError(f"{violations} scenes were trained on before being evaluated")
    return written


def cmd_inspect(cfg: RunConfig, out: Path) -> list[Path]:
    """Print what the configured checkpoint / scene container / track file hold."""
    lines = []
    if cfg.paths.checkpoint:
        path = _need_path(cfg, "checkpoint")
        manifest, blob = read_manifest(path.read_bytes(), str(path))
        ck = load_checkpoint(path)
        lines += [
            f"checkpoint={path}",
            f"sha256={ck.sha256}",
            f"format_version={manifest['format_version']}",
            f"parameters={ck.model.n_parameters}",
            f"blob_bytes={len(blob)}",
            f"parent={ck.parent or '-'}",
            f"chain_length={len(ck.chain)}",
        ]
        lines += [f"model.{k}={v}" for k, v in ck.model.config.to_dict().items()]
        if ck.run:
            lines.append("provenance=" + json.dumps(ck.run, sort_keys=True))
    if cfg.paths.scenes:
        scenes = read_scenes(_need_path(cfg, "scenes"))
        agents = [s.N for s in scenes]
        lines += [f"scenes={len(scenes)}", f"max_agents={max(agents, default=0)}"]
    if cfg.paths.tracks:
        tracks = read_tracks_csv(_need_path(cfg, "tracks"))
        lines += [f"tracks={len(tracks)}", f"samples={sum(len(t.samples) for t in tracks)}"]
    if not lines:
        raise ConfigError(f"{cfg.source}: inspect needs at least one of [paths] checkpoint/scenes/tracks")
    print("\n".join(lines))
    return []


HANDLERS = {
    "synth": cmd_synth,
    "preprocess": cmd_preprocess,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "evaluate": cmd_evaluate,
    "fraction": cmd_fraction,
    "incremental": cmd_incremental,
    "inspect": cmd_inspect,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mabert", description="Multi-agent trajectory transformer pipeline")
    ap.add_argument("command", choices=COMMANDS)
    ap.add_argument("--config", required=True, help="TOML run configuration")
    ap.add_argument("--seed", type=int, help="overrides the config seed (unsigned 64-bit)")
    ap.add_argument("--out", help="output directory (overrides the config)")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def run(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            if not 0 <= args.seed < 2**64:
                raise ConfigError("--seed must be an unsigned 64-bit integer")
            cfg = replace(cfg, seed=args.seed)
        if args.out is not None:
            cfg = replace(cfg, out=args.out)
        if args.command in TRAINING and cfg.seed is None:
            raise ConfigError(f"{cfg.source}: a seed is required for {args.command} (config 'seed' or --seed)")
        out = Path(cfg.out)
        out.mkdir(parents=True, exist_ok=True)
        written = HANDLERS[args.command](cfg, out)
    except ConfigError as exc:
        print(f"mabert: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except IncompatibleCheckpoint as exc:
        print(f"mabert: {exc}", file=sys.stderr)
        return EXIT_INCOMPATIBLE
    except (CheckpointError, UsageError, ValueError, RuntimeError, OSError) as exc:
        print(f"mabert: {args.command} failed: {exc}", file=sys.stderr)
        return EXIT_FAIL
    for p in written:
        log.info("wrote %s", p)
    return EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
