"""Command-line interface: ``rnnt <command> --help`` documents every flag.

Log verbosity comes from the ``RNNT_LOG_LEVEL`` environment variable
(default ``WARNING``) or ``--verbose``.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
import time
from pathlib import Path
from typing import List, Optional

import numpy as np

from .. import biasing
from ..decoder import DecodeParams, decode_utterance, detokenize, format_nbest
from ..model import ModelConfig, matrix_param_names
from ..nn import FeatureSequence
from ..quant import payload_bytes, quantize_model
from ..runtime import PipelineConfig, run_pipeline
from .container import ModelContainer, save_model
from .data import ToyTaskSpec, gen_bias_task, gen_toy_data
from .formats import labels_to_text, read_features, read_manifest, text_to_labels, write_features, write_manifest
from .metrics import word_error_rate
from .train import TrainConfig, TrainingDiverged, train

logger = logging.getLogger("rnnt")


class UsageError(Exception):
    pass


def _toy_units(n):
    return tuple(chr(ord("a") + k) for k in range(n))


def _write_set(out_dir: Path, name: str, data, units):
    feat_dir = out_dir / name
    feat_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for i, (feats, labels) in enumerate(data):
        utt = f"{name}-{i:05d}"
        write_features(feat_dir / f"{utt}.f32", feats.frames)
        rows.append((utt, f"{name}/{utt}.f32", labels_to_text(labels, units)))
    write_manifest(out_dir / f"{name}.tsv", rows)
    return out_dir / f"{name}.tsv"


def cmd_gen_data(args):
    spec = ToyTaskSpec(vocab_size=args.vocab, feature_dim=args.dim, noise=args.noise,
                       seed=args.seed, frame_period=args.frame_period)
    if spec.vocab_size > 26:
        raise UsageError("--vocab must be <= 26 (units are named a..z)")
    units = _toy_units(spec.vocab_size)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if args.task == "toy":
        path = _write_set(out, args.name, gen_toy_data(spec, args.count, args.stream), units)
        print(f"wrote {args.count} utterances to {path}")
        return
    task = gen_bias_task(spec, count=args.count, train_count=args.train_count)
    for name in ("train", "with_phrase", "without_phrase", "dev_with_phrase", "dev_without_phrase"):
        _write_set(out, name, getattr(task, name), units)
    (out / "phrases.txt").write_text("".join(f"{w}\n" for w in task.names), encoding="utf-8")
    (out / "inventory.tsv").write_text(
        "".join(f"{w}\t{labels_to_text(s, units)}\n" for w, s in task.names.items()), encoding="utf-8")
    print(f"wrote bias task ({len(task.names)} names) to {out}")


def cmd_train(args):
    entries = read_manifest(args.manifest)
    if not entries:
        raise UsageError(f"{args.manifest}: empty manifest")
    units = tuple(args.units.split(",")) if args.units else tuple(
        sorted({tok for e in entries for tok in e.transcript.split()}))
    data = []
    for e in entries:
        frames = read_features(e.feature_path)
        data.append((FeatureSequence(frames, args.frame_period), text_to_labels(e.transcript, units)))
    config = ModelConfig.toy(feature_dim=data[0][0].d, vocab_size=len(units), units=units,
                             frame_period=args.frame_period)
    hyper = TrainConfig(learning_rate=args.lr, batch_size=args.batch_size, steps=args.steps,
                        optimizer=args.optimizer, grad_clip=args.clip, seed=args.seed)
    result = train(data, config, hyper)
    meta = {"steps": args.steps, "final_loss": float(np.mean(result.losses[-50:])) if result.losses else None,
            "seconds": round(result.seconds, 3), "seed": args.seed}
    if result.diagnostic:
        print(f"warning: {result.diagnostic}", file=sys.stderr)
    size = save_model(args.out, config, result.params, meta)
    print(f"trained {args.steps} steps in {result.seconds:.1f}s, final loss {meta['final_loss']:.4f}; "
          f"wrote {size} bytes to {args.out}")


def _fusion(args, container):
    if not args.phrases:
        return None
    if not args.inventory:
        raise UsageError("--phrases needs --inventory")
    inventory = biasing.read_inventory(args.inventory, container.config.units)
    fst = biasing.compile_context(biasing.read_phrases(args.phrases), inventory, args.boost)
    return biasing.ShallowFusion(fst, args.fusion_weight)


def cmd_decode(args):
    container = ModelContainer.load(args.model)
    model = container.model()
    units = container.config.units
    params = DecodeParams(beam_width=args.beam, max_expansions=args.max_expansions, nbest=args.nbest)
    fusion = _fusion(args, container)
    hyps = []
    for e in read_manifest(args.manifest):
        feats = FeatureSequence(read_features(e.feature_path), container.config.frame_period)
        nbest = decode_utterance(feats, model, params, fusion=fusion)
        for line in format_nbest(nbest, units).splitlines():
            print(f"{e.utt_id}\t{line}")
        hyps.append((e.utt_id, str(e.feature_path), labels_to_text(nbest[0][0], units)))
    if args.hyp_out:
        write_manifest(args.hyp_out, hyps)


def cmd_stream(args):
    container = ModelContainer.load(args.model)
    model = container.model()
    units = container.config.units
    feats = FeatureSequence(read_features(args.features), container.config.frame_period)
    params = DecodeParams(beam_width=args.beam, max_expansions=args.max_expansions, nbest=1)

    def partial(j, best):
        print(f"partial\t{j}\t{detokenize(best.prefix, units)}", flush=True)

    nbest = decode_utterance(feats, model, params, fusion=_fusion(args, container), on_partial=partial)
    print(f"final\t{nbest[0][1]:.6f}\t{detokenize(nbest[0][0], units)}", flush=True)


def cmd_quantize(args):
    container = ModelContainer.load(args.model)
    names = matrix_param_names(container.config)
    quantized = quantize_model(container.params, names, args.scheme)
    meta = dict(container.metadata, quantization=args.scheme)
    size = ModelContainer(container.config, quantized, meta).save(args.out)
    ratio = payload_bytes(quantized, names) / payload_bytes(container.params, names)
    print(f"{args.scheme}: weight payload {100 * ratio:.2f}% of float32; wrote {size} bytes to {args.out}")


def cmd_compile_bias(args):
    units = ()
    if args.model:
        units = ModelContainer.load(args.model).config.units
    elif args.units:
        units = tuple(args.units.split(","))
    inventory = biasing.read_inventory(args.inventory, units)
    fst = biasing.compile_context(biasing.read_phrases(args.phrases), inventory, args.boost)
    text = biasing.dump_fst(fst)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
        print(f"{fst.num_states} states, {len(fst.phrases)} phrases ({len(fst.oov)} OOV); wrote {args.out}")
    else:
        sys.stdout.write(text)


def cmd_eval(args):
    refs = {e.utt_id: e.transcript for e in read_manifest(args.ref)}
    hyps = {e.utt_id: e.transcript for e in read_manifest(args.hyp)}
    missing = sorted(set(refs) - set(hyps))
    if missing:
        raise UsageError(f"{len(missing)} reference utterance(s) have no hypothesis, e.g. {missing[0]}")
    ids = sorted(refs)
    report = word_error_rate([refs[i] for i in ids], [hyps[i] for i in ids])
    exact = sum(refs[i].split() == hyps[i].split() for i in ids) / len(ids)
    print(report)
    print(f"exact-sequence accuracy {100 * exact:.2f}% over {len(ids)} utterances")


def cmd_bench_rtf(args):
    container = ModelContainer.load(args.model)
    model = container.model()
    entries = read_manifest(args.manifest)[: args.limit]
    if not entries:
        raise UsageError(f"{args.manifest}: empty manifest")
    utts = [(e.utt_id, FeatureSequence(read_features(e.feature_path), container.config.frame_period))
            for e in entries]
    params = DecodeParams(beam_width=args.beam, max_expansions=args.max_expansions)
    config = PipelineConfig(capacities=(args.capacity, args.capacity), pipelined=args.pipelined)
    run_pipeline(utts[:1], model, params, config)  # warm-up: JIT compilation, caches
    start = time.perf_counter()
    _, report = run_pipeline(utts, model, params, config)
    text = report.to_text()
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    logger.info("bench-rtf finished in %.2fs", time.perf_counter() - start)


def _decode_flags(p):
    p.add_argument("--beam", type=int, default=4, help="beam width (default 4)")
    p.add_argument("--max-expansions", type=int, default=3,
                   help="most labels a hypothesis may emit per encoder frame (default 3)")


def _bias_flags(p):
    p.add_argument("--phrases", help="biasing phrase file, one phrase per line")
    p.add_argument("--inventory", help="speller file: word<TAB>unit unit ...")
    p.add_argument("--boost", type=float, default=1.0, help="score added per matched unit (default 1.0)")
    p.add_argument("--fusion-weight", type=float, default=1.0,
                   help="weight of the biasing score in shallow fusion (default 1.0)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rnnt", description="Streaming transducer speech recognition toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log at INFO level")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("gen-data", help="generate a synthetic toy dataset")
    p.add_argument("--out-dir", required=True, help="output directory")
    p.add_argument("--task", choices=("toy", "bias"), default="toy",
                   help="plain toy utterances, or a biasing task with phrase/inventory files")
    p.add_argument("--name", default="data", help="manifest name for --task toy (default data)")
    p.add_argument("--count", type=int, default=200, help="utterances per set (default 200)")
    p.add_argument("--train-count", type=int, default=2000, help="training utterances for --task bias")
    p.add_argument("--stream", type=int, default=0, help="independent random stream, e.g. 0=train 1=test")
    p.add_argument("--vocab", type=int, default=8, help="number of subword units (default 8)")
    p.add_argument("--dim", type=int, default=16, help="feature dimension (default 16)")
    p.add_argument("--noise", type=float, default=0.4, help="Gaussian noise level (default 0.4)")
    p.add_argument("--frame-period", type=float, default=0.03, help="seconds per frame (default 0.03)")
    p.add_argument("--seed", type=int, default=0, help="task seed (default 0)")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model from a manifest")
    p.add_argument("--manifest", required=True, help="training manifest")
    p.add_argument("--out", required=True, help="output model container")
    p.add_argument("--units", help="comma-separated unit inventory (default: sorted units of the manifest)")
    p.add_argument("--steps", type=int, default=800, help="optimizer steps (default 800)")
    p.add_argument("--batch-size", type=int, default=32, help="utterances per step (default 32)")
    p.add_argument("--lr", type=float, default=0.05, help="learning rate (default 0.05)")
    p.add_argument("--optimizer", choices=("momentum", "adam", "sgd"), default="momentum",
                   help="optimizer (default momentum)")
    p.add_argument("--clip", type=float, default=1.0, help="global gradient-norm clip (default 1.0)")
    p.add_argument("--frame-period", type=float, default=0.03, help="seconds per frame (default 0.03)")
    p.add_argument("--seed", type=int, default=0, help="initialization and shuffling seed (default 0)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("decode", help="batch-decode a manifest, printing N-best lists")
    p.add_argument("--model", required=True, help="model container")
    p.add_argument("--manifest", required=True, help="manifest to decode")
    p.add_argument("--nbest", type=int, default=4, help="hypotheses printed per utterance (default 4)")
    p.add_argument("--hyp-out", help="also write top hypotheses as a manifest (for eval)")
    _decode_flags(p)
    _bias_flags(p)
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("stream", help="decode one feature file, printing partial results per frame")
    p.add_argument("--model", required=True, help="model container")
    p.add_argument("--features", required=True, help="feature file")
    _decode_flags(p)
    _bias_flags(p)
    p.set_defaults(func=cmd_stream)

    p = sub.add_parser("quantize", help="quantize weight matrices to int8")
    p.add_argument("--model", required=True, help="float model container")
    p.add_argument("--out", required=True, help="output container")
    p.add_argument("--scheme", choices=("sym", "asym"), default="sym",
                   help="symmetric (no zero point) or asymmetric (default sym)")
    p.set_defaults(func=cmd_quantize)

    p = sub.add_parser("compile-bias", help="compile biasing phrases and dump the automaton as text")
    p.add_argument("--phrases", required=True, help="phrase file, one phrase per line")
    p.add_argument("--inventory", required=True, help="speller file: word<TAB>unit unit ...")
    p.add_argument("--boost", type=float, default=1.0, help="score per matched unit (default 1.0)")
    p.add_argument("--model", help="take the unit inventory from this container")
    p.add_argument("--units", help="comma-separated unit inventory (if no --model)")
    p.add_argument("--out", help="output file (default stdout)")
    p.set_defaults(func=cmd_compile_bias)

    p = sub.add_parser("eval", help="WER of a hypothesis manifest against a reference manifest")
    p.add_argument("--ref", required=True, help="reference manifest")
    p.add_argument("--hyp", required=True, help="hypothesis manifest (e.g. decode --hyp-out)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench-rtf", help="measure real-time factor (RT, RT90) over a manifest")
    p.add_argument("--model", required=True, help="model container")
    p.add_argument("--manifest", required=True, help="utterances to time")
    p.add_argument("--limit", type=int, default=20, help="number of utterances (default 20)")
    p.add_argument("--pipelined", action=argparse.BooleanOptionalAction, default=True,
                   help="run the three-stage threaded pipeline (default) or sequentially")
    p.add_argument("--capacity", type=int, default=8, help="queue capacity between stages (default 8)")
    p.add_argument("--out", help="also write the report here")
    _decode_flags(p)
    p.set_defaults(func=cmd_bench_rtf)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = "INFO" if args.verbose else os.environ.get("RNNT_LOG_LEVEL", "WARNING").upper()
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except UsageError as exc:
        parser.error(str(exc))
    except (OSError, ValueError, TrainingDiverged) as exc:
        print(f"rnnt {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
