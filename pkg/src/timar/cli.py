"""Command line entry point: ``python -m timar <command>``.

Commands: ``gen-data``, ``train``, ``sample``, ``eval``, ``inspect``. Logs go
to stderr as JSON lines. Exit code 1 means a validation error, 2 an I/O error;
either way the last stderr line is ``{"error": ..., "reason": ...}``.
"""

from __future__ import annotations

import argparse
import json
import os
import subprocess
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from . import __version__
from .archive import ArchiveError, archive_manifest, archive_write, read_dict
from .config import ConfigError, ModelConfig, load_config
from .datagen import gen_dataset, load_dataset, read_manifest
from .metrics import SCHEMA_VERSION, evaluate

METRICS = ("fd", "pfd", "mse", "sid", "rpcc")


def log(**fields) -> None:
    print(json.dumps({"t": round(time.time(), 3), **fields}), file=sys.stderr, flush=True)


def version_string() -> str:
    try:
        desc = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], capture_output=True,
                              text=True, timeout=5, cwd=Path(__file__).parent).stdout.strip()
    except (OSError, subprocess.SubprocessError):
        desc = ""
    return f"{__version__}+{desc}" if desc else __version__


def write_json(path: Path, payload) -> None:
    tmp = path.with_name(f".{path.name}.tmp")
    tmp.write_text(json.dumps(payload, indent=2, sort_keys=True))
    os.replace(tmp, path)


def write_run_manifest(out_dir: Path, args, started: float, outputs: list) -> None:
    write_json(out_dir / "run_manifest.json", {
        "command": args.command,
        "config": getattr(args, "config", None),
        "seed": getattr(args, "seed", None),
        "version": version_string(),
        "started": started,
        "finished": time.time(),
        "outputs": [str(p) for p in outputs],
    })


def set_strict(strict: bool) -> None:
    import torch

    if strict:
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True)


def _config(args) -> ModelConfig:
    return load_config(args.config) if args.config else ModelConfig()


def cmd_gen_data(args) -> int:
    started = time.time()
    out = Path(args.out)
    manifest = gen_dataset(args.n_train, args.n_val, args.n_test, args.seed, out)
    log(event="gen-data", out=str(out), samples=len(manifest["samples"]))
    write_run_manifest(out, args, started, [out / "manifest.json"])
    return 0


def cmd_train(args) -> int:
    from .trainer import (default_checkpoint_path, fit_norm, init_state, load_checkpoint, prepare,
                          save_checkpoint, steps_for_epochs, train)

    started = time.time()
    set_strict(args.strict)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    samples = load_dataset(args.data, "train")
    if not samples:
        raise ValueError("dataset has no training samples")
    if args.checkpoint:
        state = load_checkpoint(args.checkpoint)
        cfg = state.cfg
    else:
        cfg = _config(args)
    data = prepare(samples, cfg)
    if not args.checkpoint:
        state = init_state(cfg, fit_norm(data), args.seed)
    n_steps = args.steps if args.steps is not None else steps_for_epochs(cfg, len(data)) - state.step
    log(event="train-start", steps=n_steps, samples=len(data), start_step=state.step)
    log_path = out / "train_log.jsonl"
    ckpt = default_checkpoint_path(out)
    done = 0
    every = args.save_every or n_steps or 1
    while done < n_steps:
        chunk = min(every, n_steps - done)
        train(state, data, chunk, log_path=log_path,
              log=lambda r: log(event="step", **r) if r["step"] % args.log_every == 0 else None)
        done += chunk
        save_checkpoint(state, ckpt)
    if n_steps == 0:
        save_checkpoint(state, ckpt)
    log(event="train-done", checkpoint=str(ckpt), step=state.step)
    write_run_manifest(out, args, started, [ckpt, log_path])
    return 0


def _generate(model, norm, job) -> None:
    from .datagen import load_sample
    from .streamer import conversation_turns, run_conversation

    _, sample_path, sample_id, n, omega, steps, seed, dest = job
    s = load_sample(sample_path, sample_id)
    out = run_conversation(model, norm, conversation_turns(s, model.cfg), n, omega, steps, seed, sample_id)
    archive_write([("agent_head", out)], dest, attrs={"sample_id": sample_id, "context_n": n, "omega": omega})


def _sample_one(job) -> None:
    from .trainer import load_model

    _generate(*load_model(job[0]), job)


def _setting_dir(out: Path, n: int, omega: float) -> Path:
    return out / f"n{n}_w{omega:g}"


def cmd_sample(args) -> int:
    from .trainer import load_model

    started = time.time()
    set_strict(args.strict)
    model, norm = load_model(args.checkpoint)
    data_dir = Path(args.data)
    entries = [e for e in read_manifest(data_dir)["samples"] if e["split"] == args.split]
    out = Path(args.out)
    steps = args.steps or model.cfg.diff_sample_steps
    outputs = []
    for n in args.context_n:
        for omega in args.omega:
            dest_dir = _setting_dir(out, n, omega)
            dest_dir.mkdir(parents=True, exist_ok=True)
            jobs = [(args.checkpoint, data_dir / e["file"], e["id"], n, omega, steps, args.seed,
                     dest_dir / f"{e['id']}.tmr") for e in entries]
            if args.workers > 1:
                with ProcessPoolExecutor(args.workers, initializer=set_strict, initargs=(args.strict,)) as pool:
                    list(pool.map(_sample_one, jobs))
            else:
                for job in jobs:
                    _generate(model, norm, job)
            write_json(dest_dir / "sample.json", {
                "seed": args.seed, "omega": omega, "context_n": n, "steps_out": steps,
                "checkpoint": str(args.checkpoint), "split": args.split, "ids": [e["id"] for e in entries],
            })
            log(event="sample", context_n=n, omega=omega, conversations=len(entries), out=str(dest_dir))
            outputs.append(dest_dir)
    write_run_manifest(out, args, started, outputs)
    return 0


def _generated_sets(root: Path) -> list[tuple[dict, Path]]:
    if (root / "sample.json").exists():
        return [(json.loads((root / "sample.json").read_text()), root)]
    if (root / "manifest.json").exists():
        return [({"context_n": None, "omega": None, "dataset": True}, root)]
    sets = [(json.loads(p.read_text()), p.parent) for p in root.glob("*/sample.json")]
    sets = sorted(sets, key=lambda s: (s[0]["context_n"], s[0]["omega"]))
    if not sets:
        raise FileNotFoundError(f"no generated outputs under {root}")
    return sets


def metric_rows(report: dict) -> dict:
    """Reshape ``{component: {metric: v}}`` into Table-style ``{metric: {component: v}}``."""
    comps = [k for k in report if k != "n_samples"]
    return {m: {c: report[c][m] for c in comps} for m in METRICS}


def cmd_eval(args) -> int:
    started = time.time()
    data_dir = Path(args.data)
    truth = {s.sample_id: s for s in load_dataset(data_dir, args.split)}
    rows = []
    for meta, path in _generated_sets(Path(args.generated)):
        gen, gt, user = [], [], []
        for sid in sorted(truth):
            arr = read_dict(path / f"{sid}.tmr")["agent_head"]
            L = len(arr)
            gen.append(arr)
            gt.append(truth[sid].agent_head[:L])
            user.append(truth[sid].user_head[:L])
        report = evaluate(gen, gt, user, seed=args.seed)
        rows.append({"context_n": meta.get("context_n"), "omega": meta.get("omega"),
                     "n_samples": report["n_samples"], "metrics": metric_rows(report)})
        log(event="eval", context_n=meta.get("context_n"), omega=meta.get("omega"),
            mse_exp=report["exp"]["mse"])
    doc = {"schema_version": SCHEMA_VERSION, "split": args.split, "data": str(data_dir), "rows": rows}
    out = Path(args.out)
    if out.suffix != ".json":
        out.mkdir(parents=True, exist_ok=True)
        out = out / "metrics.json"
    else:
        out.parent.mkdir(parents=True, exist_ok=True)
    write_json(out, doc)
    write_run_manifest(out.parent, args, started, [out])
    return 0


def cmd_inspect(args) -> int:
    manifest = archive_manifest(args.path)
    for entry in manifest["arrays"]:
        print(f"{entry['name']} [{', '.join(map(str, entry['shape']))}] {entry['dtype']}")
    if args.attrs:
        print(json.dumps(manifest.get("attrs", {}), indent=2, sort_keys=True))
    return 0


def _float_list(text: str) -> list[float]:
    return [float(x) for x in text.split(",") if x]


def _int_list(text: str) -> list[int]:
    return [int(x) for x in text.split(",") if x]


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="timar", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed=True):
        sp.add_argument("--config", help="key=value config file")
        if seed:
            sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--strict", action="store_true", help="single-threaded deterministic mode")
        sp.add_argument("--workers", type=int, default=1)

    g = sub.add_parser("gen-data", help="write a synthetic dialogue dataset")
    common(g)
    g.add_argument("--out", required=True)
    g.add_argument("--n-train", type=int, default=100)
    g.add_argument("--n-val", type=int, default=20)
    g.add_argument("--n-test", type=int, default=20)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train (or resume) a model")
    common(t)
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--checkpoint", help="resume from this checkpoint")
    t.add_argument("--steps", type=int, help="number of steps (default: the configured epochs)")
    t.add_argument("--save-every", type=int, default=0)
    t.add_argument("--log-every", type=int, default=10)
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sample", help="generate agent heads turn by turn")
    common(s)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--split", choices=("train", "val", "test"), default="test")
    s.add_argument("--context-n", type=_int_list, default=[0], help="comma-separated history lengths")
    s.add_argument("--omega", type=_float_list, default=[1.0], help="comma-separated guidance scales")
    s.add_argument("--steps", type=int, help="sampler steps (default: diff_sample_steps)")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_sample)

    e = sub.add_parser("eval", help="score generated heads against ground truth")
    common(e)
    e.add_argument("--data", required=True)
    e.add_argument("--generated", required=True, help="sample output root, one setting dir, or a dataset dir")
    e.add_argument("--split", choices=("train", "val", "test"), default="test")
    e.add_argument("--out", required=True, help="output .json path or directory")
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("inspect", help="list the arrays in an archive")
    i.add_argument("path")
    i.add_argument("--attrs", action="store_true")
    i.set_defaults(func=cmd_inspect)
    return p


def main(argv=None) -> int:
    from .trainer import TrainingError

    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ValueError, KeyError, ArchiveError, TrainingError) as exc:
        log(error="validation", reason=str(exc).replace("\n", " "))
        return 1
    except OSError as exc:
        log(error="io", reason=str(exc).replace("\n", " "))
        return 2


if __name__ == "__main__":
    sys.exit(main())
