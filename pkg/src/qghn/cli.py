"""Command line: gen-graphs, train, eval, report, quant-check.

Exit codes: 0 ok, 1 domain error (bad files, diverged training, failed
checks), 2 usage error. Every command that writes outputs also writes a
``<output>.manifest.json`` with the config hash, seeds and library versions.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import platform
import sys
from typing import Optional

import numpy as np
import torch

from . import __version__
from .archspace import (
    DatasetFormatError,
    GenConfig,
    GraphError,
    Split,
    by_split,
    generate_dataset,
    load_dataset,
    save_dataset,
)
from .conformance import main as quant_check_main
from .data import DataFormatError, SynthConfig, load_cifar10, synth_dataset
from .evaluate import EVAL_BATCH_SIZE, evaluate_split, eval_scheme_for, summarize
from .ghn import CheckpointError, GhnConfig, GhnConfigError, file_sha256, init_ghn, load_checkpoint
from .qat import TrainConfig, TrainingDiverged, qat_finetune
from .quantsim import QuantMode, QuantScheme, QuantizationError
from .report import entries_from_jsonl, entries_to_jsonl, render_report

log = logging.getLogger("qghn")

DOMAIN_ERRORS = (
    DatasetFormatError,
    GraphError,
    DataFormatError,
    CheckpointError,
    GhnConfigError,
    QuantizationError,
    TrainingDiverged,
    OSError,
    ValueError,
    KeyError,
)

TRAIN_SCHEMES = ("W4A4", "W4A8", "W2A2")
SPLIT_ORDER = ("id", "deep", "wide", "bnfree")


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(canonical_json(cfg).encode()).hexdigest()


def versions() -> dict:
    return {
        "qghn": __version__,
        "python": platform.python_version(),
        "torch": torch.__version__,
        "numpy": np.__version__,
    }


def write_manifest(out_path: str, command: str, config: dict, seeds: dict, inputs: list, outputs: list, **extra) -> str:
    """Sidecar JSON next to ``out_path``. Deliberately free of timestamps."""
    man = {
        "command": command,
        "config": config,
        "config_sha256": config_hash(config),
        "seeds": seeds,
        "versions": versions(),
        "inputs": {os.path.basename(p): file_sha256(p) for p in inputs if p and os.path.isfile(p)},
        "outputs": {os.path.basename(p): file_sha256(p) for p in outputs if os.path.isfile(p)},
        **extra,
    }
    path = out_path + ".manifest.json"
    with open(path, "w") as f:
        json.dump(man, f, indent=2, sort_keys=True)
        f.write("\n")
    return path


def _read_json(path: Optional[str]) -> dict:
    if path is None:
        return {}
    with open(path) as f:
        return json.load(f)


# ---------------------------------------------------------------- gen-graphs


def cmd_gen_graphs(args) -> int:
    cfg = GenConfig.from_dict(_read_json(args.config))
    if args.seed is not None:
        cfg.seed = args.seed
    graphs = generate_dataset(cfg)
    save_dataset(graphs, args.out)
    counts = {s.value: len(by_split(graphs, s)) for s in Split}
    write_manifest(args.out, "gen-graphs", cfg.to_dict(), {"seed": cfg.seed}, [args.config], [args.out], counts=counts)
    print(f"wrote {len(graphs)} graphs to {args.out}: {counts}")
    return 0


# ---------------------------------------------------------------- train


def run_config(raw: dict) -> dict:
    """Fill in a train/eval config file; unknown top-level keys are rejected."""
    known = {"ghn", "ghn_seed", "train", "synth", "eval"}
    unknown = set(raw) - known
    if unknown:
        raise ValueError(f"unknown config sections: {sorted(unknown)}")
    ghn = GhnConfig(**raw.get("ghn", {}))
    train = dict(raw.get("train", {}))
    if "scheme" in train:
        raise ValueError("the scheme is chosen on the command line, not in the config file")
    synth = SynthConfig(**raw.get("synth", {}))
    ev = {"eval_batches": None, "batch_size": EVAL_BATCH_SIZE, **raw.get("eval", {})}
    return {"ghn": ghn.to_dict(), "ghn_seed": raw.get("ghn_seed"), "train": train, "synth": synth.to_dict(), "eval": ev}


def load_images(source: dict, classes: Optional[int] = None):
    if source["kind"] == "synth":
        return synth_dataset(SynthConfig(**source["synth"]))
    return load_cifar10(source["dir"], classes or 10)


def graph_classes(g) -> int:
    return next(n.attrs["out_channels"] for n in g.nodes if n.op == "Linear")


def resolve_scheme(tag: str, mode: Optional[str], allow_unstable: bool, parser) -> QuantScheme:
    try:
        base = QuantScheme.parse(tag)
    except ValueError as exc:
        parser.error(str(exc))
    if mode is None:
        mode = "noisequant" if min(base.weight_bits, base.act_bits) <= 2 else "simquant"
    scheme = base.with_mode(mode)
    if scheme.mode is QuantMode.SIMQUANT and min(scheme.weight_bits, scheme.act_bits) <= 2 and not allow_unstable:
        parser.error(f"SimQuant at {scheme.label} is unstable; pass --allow-unstable to run it anyway")
    return scheme


def cmd_train(args, parser) -> int:
    scheme = resolve_scheme(args.scheme, args.mode, args.allow_unstable, parser)
    cfg_all = run_config(_read_json(args.config))
    tdict = dict(cfg_all["train"])
    if args.epochs is not None:
        tdict["epochs"] = args.epochs
    if args.seed is not None:
        tdict["seed"] = args.seed
    tcfg = TrainConfig(scheme=scheme, allow_unstable=args.allow_unstable, **tdict)
    tcfg.validate()

    graphs = load_dataset(args.graphs)
    train_graphs = by_split(graphs, Split.TRAIN)
    if not train_graphs:
        raise ValueError(f"{args.graphs} has no train split")
    if args.data == "synth":
        source = {"kind": "synth", "synth": cfg_all["synth"]}
    else:
        source = {"kind": "cifar", "dir": os.path.abspath(args.data)}
    classes = graph_classes(train_graphs[0])
    data = load_images(source, classes)
    if classes != data.classes:
        raise ValueError(f"graphs predict {classes} classes but the image data has {data.classes}")

    ghn_seed = cfg_all["ghn_seed"] if cfg_all["ghn_seed"] is not None else tcfg.seed
    ghn = init_ghn(GhnConfig(**cfg_all["ghn"]), ghn_seed)
    full_cfg = {**cfg_all, "ghn_seed": ghn_seed, "train": tcfg.to_dict()}
    extra_meta = {
        "run_config": full_cfg,
        "data": source,
        "data_manifest": data.manifest(),
        "graphs_sha256": file_sha256(args.graphs),
    }
    log_path = args.log or args.out + ".trainlog.jsonl"
    status = 0
    try:
        ghn, train_log = qat_finetune(ghn, train_graphs, data, tcfg, ckpt_path=args.out, resume_from=args.resume, extra_meta=extra_meta)
    except TrainingDiverged as exc:
        train_log = exc.train_log
        print(f"training diverged: {exc}", file=sys.stderr)
        status = 1
    train_log.write(log_path)
    seeds = {"train": tcfg.seed, "ghn": ghn_seed, "synth": cfg_all["synth"]["seed"]}
    write_manifest(
        args.out,
        "train",
        full_cfg,
        seeds,
        [args.graphs, args.config, args.resume],
        [args.out, log_path],
        scheme=scheme.to_dict(),
        data=data.manifest(),
        train_summary=train_log.summary(),
    )
    s = train_log.summary()
    print(f"{scheme.label} {scheme.mode.value}: {s['steps']} steps, loss {s['first_epoch_loss']} -> {s['last_epoch_loss']}")
    return status


# ---------------------------------------------------------------- eval


def row_label(eval_scheme: QuantScheme, trained: Optional[QuantScheme]) -> str:
    label = eval_scheme.label
    if trained is None:
        return label
    if trained.mode is QuantMode.NOISEQUANT:
        label += " (NoiseQuant)"
    if (trained.weight_bits, trained.act_bits) != (eval_scheme.weight_bits, eval_scheme.act_bits):
        label += f" [mismatched: trained {trained.label}]"
    return label


def cmd_eval(args, parser) -> int:
    splits = []
    for s in args.splits.split(","):
        try:
            splits.append(Split.parse(s).value)
        except ValueError:
            parser.error(f"unknown split {s!r}; choose from {','.join(SPLIT_ORDER)}")
    if "train" in splits:
        parser.error("the train split is not an evaluation split")
    ghn, _, meta = load_checkpoint(args.ckpt)
    trained = QuantScheme.from_dict(meta["scheme"]) if "scheme" in meta else None
    if args.scheme is not None:
        try:
            scheme = QuantScheme.parse(args.scheme, "simquant")
        except ValueError as exc:
            parser.error(str(exc))
    elif trained is not None:
        scheme = trained
    else:
        parser.error("checkpoint has no training scheme; pass --scheme")
    scheme = eval_scheme_for(scheme)

    run_cfg = meta.get("run_config", {})
    ev = dict(run_cfg.get("eval", {"eval_batches": None, "batch_size": EVAL_BATCH_SIZE}))
    if args.eval_batches is not None:
        ev["eval_batches"] = args.eval_batches
    if args.data is None:
        source = meta.get("data")
        if source is None:
            parser.error("checkpoint does not record its data source; pass --data")
    elif args.data == "synth":
        source = {"kind": "synth", "synth": run_cfg.get("synth", SynthConfig().to_dict())}
    else:
        source = {"kind": "cifar", "dir": os.path.abspath(args.data)}
    graphs = load_dataset(args.graphs)
    data = load_images(source, meta.get("data_manifest", {}).get("classes"))

    row = row_label(scheme, trained)
    entries, per_graph = [], []
    tmeta = {
        "trained_scheme": trained.to_dict() if trained else None,
        "eval_scheme": scheme.to_dict(),
        "train_summary": meta.get("train_summary"),
        "eval_batch_size": ev["batch_size"],
        "eval_batches": ev["eval_batches"],
    }
    for split in sorted(set(splits), key=SPLIT_ORDER.index):
        results = evaluate_split(ghn, by_split(graphs, split), data, scheme, ev["eval_batches"], ev["batch_size"])
        per_graph += [r.__dict__ for r in results]
        if not results:
            continue
        for variant in ("ok", "all"):
            e = summarize(results, row, split, variant)
            e.meta = tmeta
            entries.append(e)

    report_path = args.report
    summary_path = args.summary or report_path + ".summary.jsonl"
    graphs_path = report_path + ".graphs.jsonl"
    with open(summary_path, "w") as f:
        f.write(entries_to_jsonl(entries))
    with open(graphs_path, "w") as f:
        f.writelines(canonical_json(r) + "\n" for r in per_graph)
    text = render_report(entries, diagnostics_from(entries), report_notes(ev, data))
    with open(report_path, "w") as f:
        f.write(text)
    write_manifest(
        report_path,
        "eval",
        {"splits": splits, "eval": ev, "scheme": scheme.to_dict()},
        {"train": run_cfg.get("train", {}).get("seed")},
        [args.ckpt, args.graphs],
        [report_path, summary_path, graphs_path],
        data=data.manifest(),
    )
    sys.stdout.write(text)
    return 0


def report_notes(ev: dict, data) -> list:
    n = data.test_x.shape[0]
    if ev.get("eval_batches") is not None:
        n = min(n, ev["eval_batches"] * ev["batch_size"])
    return [
        f"Evaluated on {n} {data.name} test images, batch size {ev['batch_size']} "
        "(BatchNorm uses per-batch statistics).",
        "NoiseQuant-trained rows are evaluated with real (simulated) quantization.",
    ]


def diagnostics_from(entries: list) -> list:
    out, seen = [], set()
    for e in entries:
        s = e.meta.get("train_summary") if e.meta else None
        if s and e.row not in seen:
            seen.add(e.row)
            out.append(s)
    return out


# ---------------------------------------------------------------- report


def cmd_report(args) -> int:
    entries = []
    notes = []
    for p in args.inputs:
        with open(p) as f:
            got = entries_from_jsonl(f.read())
        if not got:
            notes.append(f"{os.path.basename(p)}: no entries")
        entries += got
    text = render_report(entries, diagnostics_from(entries), notes)
    if args.out:
        with open(args.out, "w") as f:
            f.write(text)
        write_manifest(args.out, "report", {"inputs": [os.path.basename(p) for p in args.inputs]}, {}, args.inputs, [args.out])
    sys.stdout.write(text)
    return 0


# ---------------------------------------------------------------- main


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="qghn", description="Quantization-aware graph hypernetworks.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-graphs", help="sample an architecture dataset")
    g.add_argument("--config", help="GenConfig JSON (defaults if omitted)")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int)

    t = sub.add_parser("train", help="bitwidth-specific QAT of the hypernetwork")
    t.add_argument("--graphs", required=True)
    t.add_argument("--data", required=True, help="CIFAR-10 binary directory or 'synth'")
    t.add_argument("--scheme", required=True, choices=TRAIN_SCHEMES)
    t.add_argument("--mode", choices=("simquant", "noisequant"), help="default: noisequant at 2 bits, else simquant")
    t.add_argument("--allow-unstable", action="store_true", help="permit SimQuant at 2 bits")
    t.add_argument("--config", help="run config JSON (ghn/train/synth/eval sections)")
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--log", help="TrainLog path (default <out>.trainlog.jsonl)")
    t.add_argument("--resume", help="continue from this checkpoint")
    t.add_argument("--epochs", type=int)
    t.add_argument("--seed", type=int)

    e = sub.add_parser("eval", help="evaluate predicted quantized CNNs")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--graphs", required=True)
    e.add_argument("--splits", default=",".join(SPLIT_ORDER))
    e.add_argument("--scheme", help="evaluate at this bitwidth instead of the trained one")
    e.add_argument("--data", help="override the checkpoint's data source")
    e.add_argument("--eval-batches", type=int)
    e.add_argument("--report", required=True)
    e.add_argument("--summary", help="summary JSONL path (default <report>.summary.jsonl)")

    r = sub.add_parser("report", help="merge summary files into one report")
    r.add_argument("--inputs", nargs="+", required=True)
    r.add_argument("--out")

    q = sub.add_parser("quant-check", help="run the quantization conformance suite")
    q.add_argument("--tensors", type=int, default=10_000)
    q.add_argument("--seed", type=int, default=0)
    return p


def main(argv: Optional[list] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    torch.set_num_threads(1)
    try:
        if args.command == "gen-graphs":
            return cmd_gen_graphs(args)
        if args.command == "train":
            return cmd_train(args, parser)
        if args.command == "eval":
            return cmd_eval(args, parser)
        if args.command == "report":
            return cmd_report(args)
        return quant_check_main(args.tensors, args.seed)
    except DOMAIN_ERRORS as exc:
        print(f"qghn {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
