"""Command line harness: theory checks, training, evaluation and stream tools.

Exit codes: 0 success, 2 usage, 3 validation, 4 I/O, 5 divergence.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import math
import os
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .code_tree import (SearchMode, check_theorem3_bound, expected_length, huffman, objective_value,
                        search_optimal_tree, theorem2_gap)
from .codec import bpp16, deserialize, psnr
from .estimator import detokenize, tokenize
from .exceptions import AdaptokError, DivergenceError, StreamError, ValidationError
from .model import load_checkpoint, save_checkpoint
from .router import RouterState
from .source import DiscreteSource, entropy, make_dataset, read_jsonl, write_jsonl

EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, EXIT_IO, EXIT_DIVERGENCE = 0, 2, 3, 4, 5
EVAL_COLUMNS = ("router", "target_bpp16", "beta", "mean_n_x", "realized_bpp16", "mse", "psnr",
                "spearman", "clamp_fraction", "decoder_nfe", "extra_nfe")


class UsageError(Exception):
    pass


def _floats(text: str) -> list[float]:
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from exc


def blob_hash(data: bytes) -> str:
    """Git blob object id of ``data``."""
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def _emit(obj) -> None:
    print(json.dumps(obj, sort_keys=True, default=_jsonable))


def _jsonable(v):
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (np.floating,)):
        return float(v)
    if isinstance(v, np.ndarray):
        return v.tolist()
    raise TypeError(f"cannot serialize {type(v).__name__}")


def write_manifest(path: Path, args: argparse.Namespace, inputs: list[Path], outputs: list[Path],
                   config: dict | None = None) -> Path:
    resolved = {k: v for k, v in sorted(vars(args).items()) if k != "func"}
    digest = hashlib.sha1()
    for p in sorted(inputs):
        digest.update(blob_hash(Path(p).read_bytes()).encode())
    digest.update(json.dumps(config if config is not None else resolved, sort_keys=True,
                             default=str).encode())
    manifest = {
        "subcommand": args.command,
        "config": config if config is not None else resolved,
        "args": resolved,
        "seed": resolved.get("seed"),
        "input_hash": digest.hexdigest(),
        "inputs": [{"path": str(p), "sha1": blob_hash(Path(p).read_bytes())} for p in inputs],
        "outputs": [{"path": str(p), "sha1": blob_hash(Path(p).read_bytes())} for p in outputs],
    }
    path.write_text(json.dumps(manifest, sort_keys=True, indent=2, default=str) + "\n")
    return path


def _manifest_for(out: Path) -> Path:
    return out.parent / (out.name + ".manifest.json")


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _source(args) -> DiscreteSource:
    return DiscreteSource.parse(args.probs)


# -- theory -----------------------------------------------------------------------

def cmd_entropy(args) -> int:
    _emit(entropy(_source(args), args.base))
    return EXIT_OK


def cmd_huffman(args) -> int:
    src = _source(args)
    tree = huffman(src, args.arity)
    depths = tree.depths()
    out = {"tree": tree.to_list(), "depths": [depths[i] for i in range(len(src.probs))],
           "expected_length": expected_length(tree, src), "entropy": entropy(src, args.arity),
           "kraft_sum": tree.kraft_sum(), "arity": args.arity}
    _emit(out)
    if args.out:
        _write_csv(args.out, ["item", "prob", "depth"],
                   [[i, p, depths[i]] for i, p in enumerate(src.probs)])
        write_manifest(_manifest_for(args.out), args, [], [args.out])
    return EXIT_OK


def cmd_tree_search(args) -> int:
    src = _source(args)
    mode = args.mode
    if mode == "auto":
        mode = "exhaustive" if len(src.probs) <= 8 else "lift"
    tree = search_optimal_tree(src, args.objective, SearchMode(mode))
    depths = tree.depths()
    out = {"tree": tree.to_list(), "objective": args.objective, "mode": mode,
           "value": objective_value(tree, src, args.objective),
           "expected_depth": expected_length(tree, src),
           "depths": [depths[i] for i in range(len(src.probs))]}
    _emit(out)
    if args.out:
        _write_csv(args.out, ["item", "prob", "depth"],
                   [[i, p, depths[i]] for i, p in enumerate(src.probs)])
        write_manifest(_manifest_for(args.out), args, [], [args.out])
    return EXIT_OK


def cmd_theorem2(args) -> int:
    rows = theorem2_gap(args.max_m, exhaustive_max=min(args.exhaustive_max, args.max_m))
    _emit({"rows": [asdict(r) for r in rows]})
    if args.out:
        names = [f.name for f in fields(rows[0])] if rows else []
        _write_csv(args.out, names, [[getattr(r, n) for n in names] for r in rows])
        write_manifest(_manifest_for(args.out), args, [], [args.out])
    return EXIT_OK


def cmd_theorem3(args) -> int:
    src = _source(args)
    gap = None
    if args.gap is not None:
        gap = args.gap if len(args.gap) > 1 else args.gap * len(src.probs)
    if args.beta == "auto":
        # smallest admissible beta plus one token of headroom
        probe = check_theorem3_bound(src, 1e300, gap, args.arity)
        beta = probe.min_beta + 1.0
    else:
        try:
            beta = float(args.beta)
        except ValueError as exc:
            raise UsageError(f"--beta must be a number or 'auto', got {args.beta!r}") from exc
    res = check_theorem3_bound(src, beta, gap, args.arity)
    out = {"beta": beta, "lhs": res.lhs, "rhs": res.rhs, "pass": res.passed, "margin": res.rhs - res.lhs,
           "slack": res.slack, "min_beta": res.min_beta}
    _emit(out)
    if args.out:
        _write_csv(args.out, list(out), [list(out.values())])
        write_manifest(_manifest_for(args.out), args, [], [args.out])
    return EXIT_OK


# -- data / training -----------------------------------------------------------------

def cmd_dataset(args) -> int:
    data = make_dataset(args.n, args.seed, args.noise_sigma)
    write_jsonl(args.out, data)
    write_manifest(_manifest_for(args.out), args, [], [args.out])
    _emit({"signals": len(data), "out": str(args.out)})
    return EXIT_OK


def _train_config(args):
    from .trainer import TrainConfig

    base = TrainConfig.from_json(args.config).to_dict() if args.config else TrainConfig().to_dict()
    if args.flex:
        if args.router_mode not in (None, "flex"):
            raise UsageError("--flex conflicts with --router-mode " + args.router_mode)
        args.router_mode = "flex"
    for f in fields(TrainConfig):
        v = getattr(args, f.name, None)
        if v is not None:
            base[f.name] = v
    return TrainConfig.from_dict(base)


def cmd_train(args) -> int:
    from .trainer import train

    config = _train_config(args)
    data = read_jsonl(args.data) if args.data else None
    result = train(config, data)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ckpt, log = out / "model.itkm", out / "train_log.csv"
    save_checkpoint(ckpt, result.params, result.router_state.to_dict(), {"config": config.to_dict()})
    result.write_logs(log)
    inputs = [p for p in (args.config, args.data) if p]
    write_manifest(out / "manifest.json", args, inputs, [ckpt, log], config.to_dict())
    _emit({"checkpoint": str(ckpt), "log": str(log), "final_loss": result.logs[-1]["loss"],
           "ema_nll": result.router_state.ema_nll})
    return EXIT_OK


def _load(args):
    if not Path(args.checkpoint).is_file():
        raise FileNotFoundError(f"checkpoint not found: {args.checkpoint}")
    params, header = load_checkpoint(args.checkpoint)
    if header.get("router") is None:
        raise ValidationError("checkpoint has no router state")
    return params, RouterState.from_dict(header["router"])


def _eval_data(args):
    if args.data:
        return read_jsonl(args.data)
    return make_dataset(args.eval_size, args.eval_seed, args.noise_sigma)


def cmd_eval(args) -> int:
    from .trainer import evaluate, evaluate_search

    params, state = _load(args)
    data = _eval_data(args)
    rows = []
    if args.router in ("elbo", "both"):
        if not args.bpp16:
            raise UsageError("--bpp16 is required for the ELBO router")
        rows += evaluate(params, state, data, args.bpp16, calibrate=not args.no_calibrate,
                         normalizer=args.normalizer)
    if args.router in ("search", "both"):
        if args.threshold is None:
            raise UsageError("--threshold is required for the search router")
        rows.append(evaluate_search(params, data, args.threshold, state.n_max, args.block))
    table = [[getattr(r, c) for c in EVAL_COLUMNS] for r in rows]
    _write_csv(args.out, EVAL_COLUMNS, table)
    write_manifest(_manifest_for(args.out), args,
                   [Path(args.checkpoint)] + ([Path(args.data)] if args.data else []), [args.out])
    _emit({"rows": [dict(zip(EVAL_COLUMNS, r)) for r in table]})
    return EXIT_OK


def cmd_tokenize(args) -> int:
    params, state = _load(args)
    data = _eval_data(args)
    norm = None
    if args.normalizer == "dataset":
        from .model import forward_full
        norm = float(forward_full(data.values, params).nll.mean())
    tok = tokenize(params, state, data.values, bpp16=args.bpp16, beta=args.beta, normalizer=norm)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, blob in enumerate(tok.streams(params)):
        p = out / f"{i:06d}.itk"
        p.write_bytes(blob)
        paths.append(p)
    per = [{"file": p.name, "n_x": int(n), "bpp16": bpp16(int(n), state.n_max),
            "mse": float(np.mean((r - x) ** 2)), "psnr": psnr(x, r)}
           for p, n, r, x in zip(paths, tok.n_x, tok.recon, data.values)]
    summary = {"count": len(paths), "beta": tok.beta, "normalizer": tok.normalizer,
               "mean_n_x": float(tok.n_x.mean()), "mean_bpp16": float(np.mean([s["bpp16"] for s in per])),
               "mse": float(np.mean([s["mse"] for s in per])),
               "psnr": float(np.mean([s["psnr"] for s in per])), "streams": per}
    summary_path = out / "summary.json"
    summary_path.write_text(json.dumps(summary, sort_keys=True, indent=1) + "\n")
    write_manifest(out / "manifest.json", args,
                   [Path(args.checkpoint)] + ([Path(args.data)] if args.data else []),
                   paths + [summary_path])
    _emit({k: v for k, v in summary.items() if k != "streams"})
    return EXIT_OK


def _stream_files(paths) -> list[Path]:
    files = []
    for p in map(Path, paths):
        files.extend(sorted(p.glob("*.itk")) if p.is_dir() else [p])
    if not files:
        raise ValidationError("no stream files given")
    return files


def cmd_detokenize(args) -> int:
    params, _ = _load(args)
    files = _stream_files(args.streams)
    recon = detokenize(params, [f.read_bytes() for f in files])
    out = Path(args.out)
    with open(out, "w") as fh:
        for f, r in zip(files, recon):
            fh.write(json.dumps({"file": f.name, "values": [float(v) for v in r]}) + "\n")
    report = {"count": len(files), "out": str(out)}
    if args.reference:
        ref = read_jsonl(args.reference)
        if len(ref) != len(files):
            raise ValidationError(f"{len(files)} streams but {len(ref)} reference signals")
        mses = [float(np.mean((r - x) ** 2)) for r, x in zip(recon, ref.values)]
        report.update(mse=float(np.mean(mses)),
                      psnr=float(np.mean([psnr(x, r) for r, x in zip(recon, ref.values)])))
    inputs = [Path(args.checkpoint)] + files + ([Path(args.reference)] if args.reference else [])
    write_manifest(_manifest_for(out), args, inputs, [out])
    _emit(report)
    return EXIT_OK


def cmd_bpp(args) -> int:
    if args.streams:
        rows = []
        for f in _stream_files(args.streams):
            ts = deserialize(f.read_bytes())
            rows.append({"file": f.name, "n_x": ts.mask.n_x, "n_max": ts.mask.n_max,
                         "bits_exact": ts.config.bits_exact, "bits_serialized": ts.config.bits_serialized,
                         "bpp16": bpp16(ts.mask.n_x, ts.mask.n_max, ts.config.bits_serialized),
                         "bpp16_exact_bits": bpp16(ts.mask.n_x, ts.mask.n_max, ts.config.bits_exact)})
        _emit({"streams": rows, "mean_bpp16": float(np.mean([r["bpp16"] for r in rows]))})
        return EXIT_OK
    if args.n_x is None or args.n_max is None:
        if args.target is None or args.n_max is None:
            raise UsageError("give --streams, --n-x with --n-max, or --target with --n-max")
        from .router import beta_from_bpp16
        _emit({"target_bpp16": args.target, "n_max": args.n_max,
               "beta": beta_from_bpp16(args.target, args.n_max, args.bits)})
        return EXIT_OK
    _emit({"bpp16": bpp16(args.n_x, args.n_max, args.bits, not args.no_mask)})
    return EXIT_OK


def cmd_codec(args) -> int:
    ts = deserialize(Path(args.stream).read_bytes())
    _emit({"n_max": ts.mask.n_max, "n_x": ts.mask.n_x, "levels": list(ts.config.levels),
           "mask": ts.mask.kept.astype(int).tolist(), "indices": ts.indices.tolist(),
           "digits": [list(c.digits) for c in ts.codes]})
    return EXIT_OK


# -- parser -----------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="adaptok", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def probs(sp):
        sp.add_argument("--probs", required=True, help='comma-separated probabilities or "geometric:M"')

    sp = sub.add_parser("entropy", help="source entropy")
    probs(sp)
    sp.add_argument("--base", type=int, default=2)
    sp.set_defaults(func=cmd_entropy)

    sp = sub.add_parser("huffman", help="Huffman code tree")
    probs(sp)
    sp.add_argument("--arity", type=int, default=2)
    sp.add_argument("--out", type=Path)
    sp.set_defaults(func=cmd_huffman)

    sp = sub.add_parser("tree-search", help="optimal binary code tree under an objective")
    probs(sp)
    sp.add_argument("--objective", choices=["uniform_loss", "expected_length"], default="uniform_loss")
    sp.add_argument("--mode", choices=["auto", "exhaustive", "lift"], default="auto")
    sp.add_argument("--out", type=Path)
    sp.set_defaults(func=cmd_tree_search)

    sp = sub.add_parser("theorem2", help="expected depth of the uniform-loss optimum vs entropy")
    sp.add_argument("--max-m", type=int, required=True)
    sp.add_argument("--exhaustive-max", type=int, default=3)
    sp.add_argument("--out", type=Path)
    sp.set_defaults(func=cmd_theorem2)

    sp = sub.add_parser("theorem3", help="ELBO-router length bound on a finite source")
    probs(sp)
    sp.add_argument("--beta", default="auto", help='token budget or "auto"')
    sp.add_argument("--gap", type=_floats, help="per-item nonnegative gap (one value broadcasts)")
    sp.add_argument("--arity", type=int, default=2)
    sp.add_argument("--out", type=Path)
    sp.set_defaults(func=cmd_theorem3)

    sp = sub.add_parser("dataset", help="write a synthetic signal set as JSON lines")
    sp.add_argument("--n", type=int, required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--noise-sigma", type=float, default=0.01)
    sp.add_argument("--out", type=Path, required=True)
    sp.set_defaults(func=cmd_dataset)

    sp = sub.add_parser("train", help="train the toy tokenizer")
    sp.add_argument("--config", type=Path)
    sp.add_argument("--data", type=Path, help="training signals (JSON lines); generated when omitted")
    sp.add_argument("--out-dir", type=Path, required=True)
    sp.add_argument("--steps", type=int)
    sp.add_argument("--batch", type=int)
    sp.add_argument("--lr-start", type=float)
    sp.add_argument("--lr-end", type=float)
    sp.add_argument("--router-mode", choices=["fixed_beta", "flex", "uniform_baseline", "full_length"])
    sp.add_argument("--beta", type=float)
    sp.add_argument("--flex-fractions", type=_floats)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--noise-sigma", type=float)
    sp.add_argument("--train-size", type=int)
    sp.add_argument("--phase1-fraction", type=float)
    sp.add_argument("--finetune-base", type=_bool, metavar="{true,false}")
    sp.add_argument("--encoder-init", choices=["transform", "random"])
    sp.add_argument("--train-encoder", type=_bool, metavar="{true,false}")
    sp.add_argument("--mean-gain", type=float)
    sp.add_argument("--detail-gain", type=float)
    sp.add_argument("--rms-decay", type=float)
    sp.add_argument("--rms-eps", type=float)
    sp.add_argument("--ema-decay", type=float)
    sp.add_argument("--flex", action="store_true", help="shorthand for --router-mode flex")
    sp.set_defaults(func=cmd_train)

    def data_args(sp):
        sp.add_argument("--checkpoint", type=Path, required=True)
        sp.add_argument("--data", type=Path, help="signals (JSON lines); generated when omitted")
        sp.add_argument("--eval-size", type=int, default=500)
        sp.add_argument("--eval-seed", type=int, default=10_000)
        sp.add_argument("--noise-sigma", type=float, default=0.01)

    sp = sub.add_parser("eval", help="metrics table over BPP16 targets")
    data_args(sp)
    sp.add_argument("--bpp16", type=_floats)
    sp.add_argument("--router", choices=["elbo", "search", "both"], default="elbo")
    sp.add_argument("--threshold", type=float, help="per-sample MSE target for the search router")
    sp.add_argument("--block", type=int)
    sp.add_argument("--normalizer", choices=["dataset", "ema"], default="dataset")
    sp.add_argument("--no-calibrate", action="store_true", help="use beta from the budget formula as is")
    sp.add_argument("--out", type=Path, required=True)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("tokenize", help="write one token stream per signal")
    data_args(sp)
    sp.add_argument("--bpp16", type=float)
    sp.add_argument("--beta", type=float)
    sp.add_argument("--normalizer", choices=["dataset", "ema"], default="ema")
    sp.add_argument("--out-dir", type=Path, required=True)
    sp.set_defaults(func=cmd_tokenize)

    sp = sub.add_parser("detokenize", help="reconstruct signals from token streams")
    sp.add_argument("--checkpoint", type=Path, required=True)
    sp.add_argument("--streams", nargs="+", required=True, help="stream files or directories")
    sp.add_argument("--reference", type=Path, help="original signals for MSE/PSNR")
    sp.add_argument("--out", type=Path, required=True)
    sp.set_defaults(func=cmd_detokenize)

    sp = sub.add_parser("bpp", help="BPP16 of streams or of a token count")
    sp.add_argument("--streams", nargs="+")
    sp.add_argument("--n-x", type=int)
    sp.add_argument("--n-max", type=int)
    sp.add_argument("--bits", type=float, default=16.0)
    sp.add_argument("--no-mask", action="store_true")
    sp.add_argument("--target", type=float, help="BPP16 target to convert into beta")
    sp.set_defaults(func=cmd_bpp)

    sp = sub.add_parser("codec", help="decode a single stream file to JSON")
    sp.add_argument("stream", type=Path)
    sp.set_defaults(func=cmd_codec)
    return p


def _bool(text: str) -> bool:
    t = text.lower()
    if t in ("1", "true", "yes"):
        return True
    if t in ("0", "false", "no"):
        return False
    raise argparse.ArgumentTypeError(f"expected true or false, got {text!r}")


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    threads = os.environ.get("ITK_THREADS")
    limit = None
    if threads:
        try:
            limit = max(1, int(threads))
        except ValueError:
            print(f"adaptok: ignoring non-integer ITK_THREADS={threads!r}", file=sys.stderr)
    try:
        with threadpool_limits(limits=limit):
            return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"adaptok {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DivergenceError as exc:
        print(f"adaptok {args.command}: diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except (ValidationError, StreamError) as exc:
        print(f"adaptok {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as exc:
        print(f"adaptok {args.command}: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except AdaptokError as exc:
        print(f"adaptok {args.command}: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
