"""Command-line entry points: synth, train, track, eval.

Every command writes a manifest.json beside its outputs recording the
resolved configuration, seed, inputs, and outputs, so any run can be
reproduced from its manifest alone.  Exit codes: 0 success, 2 bad usage or
unreadable configuration, 3 empty task set or missing stored feature,
4 feature dimension mismatch, 5 unparseable evaluation input.

Configuration files are plain ``key = value`` lines ('#' comments allowed);
command-line flags override file values.  The METATRACK_THREADS environment
variable caps worker threads for the evaluation of multiple sequences.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import metatrack
from metatrack.episodes import (
    EmptyTaskSetError,
    build_tasks,
    ingest_ground_truth,
    parse_detections,
    parse_ground_truth,
    parse_results,
)
from metatrack.maml import MamlConfig, load_checkpoint, save_checkpoint, train
from metatrack.metrics import (
    evaluate_sequences,
    frames_from_gt,
    frames_from_results,
    render_kv,
    render_table,
)
from metatrack.model import FeatureStore
from metatrack.synth import SynthConfig, generate, write_scene
from metatrack.tracker import TrackerParams, track_sequence, write_results

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_EMPTY = 3
EXIT_DIM = 4
EXIT_PARSE = 5


def thread_count() -> int:
    """Worker cap from METATRACK_THREADS (default 1)."""
    raw = os.environ.get("METATRACK_THREADS", "1")
    try:
        n = int(raw)
    except ValueError as exc:
        raise ValueError(f"METATRACK_THREADS must be an integer, got {raw!r}") from exc
    if n < 1:
        raise ValueError("METATRACK_THREADS must be at least 1")
    return n


def parallel_map(fn, items):
    """Order-preserving map over items with at most thread_count() workers."""
    items = list(items)
    workers = min(thread_count(), max(1, len(items)))
    if workers == 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def read_config_file(path) -> dict[str, str]:
    """Parse 'key = value' lines; raises on anything else."""
    path = Path(path)
    out: dict[str, str] = {}
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ValueError(f"{path}:{lineno}: expected 'key = value'")
        key, _, value = stripped.partition("=")
        key = key.strip()
        value = value.strip()
        if not key or not value:
            raise ValueError(f"{path}:{lineno}: expected 'key = value'")
        if key in out:
            raise ValueError(f"{path}:{lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def coerce_fields(cls, raw: dict[str, str], where: str) -> dict:
    """Convert string values to a dataclass's field types."""
    fields = {f.name: f for f in dataclasses.fields(cls)}
    out = {}
    for key, value in raw.items():
        if key not in fields:
            raise ValueError(f"{where}: unknown key {key!r} for {cls.__name__}")
        ftype = fields[key].type
        try:
            if ftype == "int":
                out[key] = int(value)
            elif ftype == "float":
                out[key] = float(value)
            elif ftype == "bool":
                low = value.lower()
                if low in ("1", "true", "yes", "on"):
                    out[key] = True
                elif low in ("0", "false", "no", "off"):
                    out[key] = False
                else:
                    raise ValueError(f"not a boolean: {value!r}")
            elif ftype == "int | None":
                out[key] = None if value.lower() in ("none", "all") else int(value)
            else:
                out[key] = value
        except ValueError as exc:
            raise ValueError(f"{where}: bad value for {key!r}: {exc}") from exc
    return out


def write_manifest(out_dir: Path, command: str, argv: list[str], seed,
                   config: dict, inputs: dict, outputs: list[str],
                   wall_time_s: float) -> Path:
    payload = {
        "command": command,
        "argv": argv,
        "seed": seed,
        "config": config,
        "inputs": inputs,
        "outputs": outputs,
        "package_version": metatrack.__version__,
        "wall_time_s": wall_time_s,
    }
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(payload, indent=2) + "\n")
    return path


def unique_sequence(store: FeatureStore, where: str) -> str:
    names = sorted({key[0] for key, _ in store.items()})
    if len(names) != 1:
        raise ValueError(f"{where}: expected exactly one sequence, "
                         f"found {names or 'none'}")
    return names[0]


def cmd_synth(args, argv) -> int:
    started = time.perf_counter()
    try:
        raw = read_config_file(args.config)
        overrides = coerce_fields(SynthConfig, raw, str(args.config))
        config = SynthConfig(**overrides)
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    scene = generate(config, args.seed)
    out = Path(args.out)
    paths = write_scene(scene, out)
    write_manifest(
        out, "synth", argv, args.seed,
        dataclasses.asdict(config),
        {"config_file": str(args.config)},
        sorted(p.name for p in paths.values()),
        time.perf_counter() - started,
    )
    print(f"wrote sequence {scene.sequence!r}: {len(scene.gt)} gt rows, "
          f"{len(scene.detections)} detections -> {out}")
    return EXIT_OK


def cmd_train(args, argv) -> int:
    started = time.perf_counter()
    try:
        raw = read_config_file(args.config) if args.config else {}
        file_kwargs = coerce_fields(MamlConfig, {
            k: v for k, v in raw.items() if k not in ("k", "q")
        }, str(args.config))
        support_size = int(raw.get("k", 4))
        query_size = int(raw.get("q", 1))
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE

    flag_kwargs = {
        "inner_lr": args.inner_lr,
        "outer_lr": args.outer_lr,
        "epochs": args.epochs,
        "batch_size": args.batch_size,
        "seed": args.seed,
        "mode": {"exact": "exact", "fomaml": "first_order", None: None}[args.mode],
    }
    file_kwargs.update({k: v for k, v in flag_kwargs.items() if v is not None})
    if args.k is not None:
        support_size = args.k
    if args.q is not None:
        query_size = args.q

    try:
        config = MamlConfig(**file_kwargs)
        samples = []
        inputs = {}
        for data_dir in args.data:
            data = Path(data_dir)
            store = FeatureStore.load(data / "features.txt")
            sequence = unique_sequence(store, str(data))
            gt_rows = parse_ground_truth(data / "gt.txt")
            samples.extend(ingest_ground_truth(gt_rows, store, sequence))
            inputs[sequence] = str(data)
        dist = build_tasks(samples, support_size, query_size)
    except EmptyTaskSetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_EMPTY
    except (OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE

    try:
        result = train(dist, config, eval_tasks=dist.tasks)
    except EmptyTaskSetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_EMPTY

    ckpt = Path(args.checkpoint_out)
    out = ckpt.parent
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(ckpt, result.head, result.memory, config)

    # wall times stay in the manifest; the log must be seed-deterministic
    log_path = out / "train_log.csv"
    with log_path.open("w") as fh:
        fh.write("epoch,meta_loss,grad_norm,eval_loss\n")
        for e in result.log.epochs:
            fh.write(f"{e.epoch},{e.meta_loss!r},{e.grad_norm!r},{e.eval_loss!r}\n")

    from metatrack.report import save_train_curves

    curve_path = save_train_curves(result.log, out / "train_curve.png")
    write_manifest(
        out, "train", argv, config.seed,
        {**dataclasses.asdict(config), "k": support_size, "q": query_size,
         "tasks": len(dist.tasks), "num_classes": dist.num_classes},
        inputs,
        sorted([ckpt.name, log_path.name, curve_path.name]),
        time.perf_counter() - started,
    )
    status = "aborted" if result.log.aborted else "finished"
    final_loss = result.log.epochs[-1].meta_loss if result.log.epochs else float("nan")
    print(f"{status}: {len(dist.tasks)} tasks, {config.epochs} epochs, "
          f"final meta-loss {final_loss:.4f} -> {ckpt}")
    return EXIT_OK


def cmd_track(args, argv) -> int:
    started = time.perf_counter()
    try:
        raw = read_config_file(args.config) if args.config else {}
        params_kwargs = coerce_fields(TrackerParams, raw, str(args.config))
        head, memory, maml_config = load_checkpoint(args.checkpoint)
        store = FeatureStore.load(args.features)
        sequence = unique_sequence(store, str(args.features))
        detections = parse_detections(args.det)
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE

    if store.dim != head.feature_dim:
        print(f"error: feature dimension {store.dim} does not match the "
              f"checkpoint's head input {head.feature_dim}", file=sys.stderr)
        return EXIT_DIM

    if args.no_adapt:
        params_kwargs["adapt"] = False
    params_kwargs.setdefault("online_alpha", maml_config.inner_lr)
    try:
        params = TrackerParams(**params_kwargs)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE

    by_frame: dict[int, list] = {}
    for det in detections:
        by_frame.setdefault(det.frame, []).append(det)
    try:
        session, summaries = track_sequence(by_frame, store, sequence, head,
                                            memory, params)
    except KeyError as exc:
        print(f"error: missing stored feature: {exc}", file=sys.stderr)
        return EXIT_EMPTY

    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    write_results(session.tracks, out_path)
    confirmed = sum(1 for t in session.tracks if t.ever_confirmed)
    write_manifest(
        out_path.parent, "track", argv, args.seed,
        {**dataclasses.asdict(params), "sequence": sequence},
        {"det": str(args.det), "features": str(args.features),
         "checkpoint": str(args.checkpoint)},
        [out_path.name],
        time.perf_counter() - started,
    )
    print(f"tracked {sequence!r}: {len(by_frame)} frames, "
          f"{confirmed} confirmed tracks -> {out_path}")
    return EXIT_OK


def cmd_eval(args, argv) -> int:
    started = time.perf_counter()
    if len(args.gt) != len(args.results):
        print("error: need one --results per --gt", file=sys.stderr)
        return EXIT_USAGE
    if args.name and len(args.name) != len(args.gt):
        print("error: need one --name per --gt when names are given",
              file=sys.stderr)
        return EXIT_USAGE

    def load_pair(pair):
        gt_path, res_path = pair
        gt = frames_from_gt(parse_ground_truth(gt_path))
        pred = frames_from_results(parse_results(res_path))
        return gt, pred

    names = []
    for i, gt_path in enumerate(args.gt):
        if args.name:
            names.append(args.name[i])
        else:
            stem = Path(gt_path).resolve().parent.name or f"seq{i + 1}"
            names.append(stem if stem not in names else f"{stem}-{i + 1}")

    try:
        loaded = parallel_map(load_pair, zip(args.gt, args.results))
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PARSE

    try:
        report = evaluate_sequences(
            {name: pair for name, pair in zip(names, loaded)},
            iou_threshold=args.iou_thr,
        )
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PARSE

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    table = render_table(report)
    (out / "eval_report.txt").write_text(table)
    (out / "eval_report.kv").write_text(render_kv(report))

    from metatrack.report import save_eval_chart

    save_eval_chart(report, out / "eval_report.png")
    write_manifest(
        out, "eval", argv, None,
        {"iou_threshold": args.iou_thr, "sequences": names},
        {name: {"gt": str(g), "results": str(r)}
         for name, g, r in zip(names, args.gt, args.results)},
        ["eval_report.kv", "eval_report.png", "eval_report.txt"],
        time.perf_counter() - started,
    )
    print(table, end="")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="metatrack",
        description="Meta-learned appearance heads for multi-object tracking "
                    "on synthetic scenes.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_synth = sub.add_parser("synth", help="generate a synthetic sequence")
    p_synth.add_argument("config", help="key = value scene configuration file")
    p_synth.add_argument("--out", required=True, help="output directory")
    p_synth.add_argument("--seed", type=int, default=0)

    p_train = sub.add_parser("train", help="meta-train a head on sequences")
    p_train.add_argument("data", nargs="+",
                         help="directories holding gt.txt and features.txt")
    p_train.add_argument("--checkpoint-out", required=True)
    p_train.add_argument("--config", help="key = value training configuration")
    p_train.add_argument("--inner-lr", type=float)
    p_train.add_argument("--outer-lr", type=float)
    p_train.add_argument("--epochs", type=int)
    p_train.add_argument("--batch-size", type=int)
    p_train.add_argument("--mode", choices=("exact", "fomaml"))
    p_train.add_argument("--k", type=int, help="support appearances per identity")
    p_train.add_argument("--q", type=int, help="query appearances per identity")
    p_train.add_argument("--seed", type=int)

    p_track = sub.add_parser("track", help="run the tracker over detections")
    p_track.add_argument("--det", required=True)
    p_track.add_argument("--features", required=True)
    p_track.add_argument("--checkpoint", required=True)
    p_track.add_argument("--out", required=True, help="results file path")
    p_track.add_argument("--config", help="key = value tracker parameters")
    p_track.add_argument("--no-adapt", action="store_true",
                         help="freeze the meta-trained head")
    p_track.add_argument("--seed", type=int, default=0)

    p_eval = sub.add_parser("eval", help="score results against ground truth")
    p_eval.add_argument("--gt", action="append", required=True)
    p_eval.add_argument("--results", action="append", required=True)
    p_eval.add_argument("--name", action="append")
    p_eval.add_argument("--out", required=True, help="report directory")
    p_eval.add_argument("--iou-thr", type=float, default=0.5)

    return parser


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        thread_count()  # fail fast on a malformed METATRACK_THREADS
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    handlers = {
        "synth": cmd_synth,
        "train": cmd_train,
        "track": cmd_track,
        "eval": cmd_eval,
    }
    return handlers[args.command](args, argv)


if __name__ == "__main__":
    sys.exit(main())
