"""patchlens command line.

Every failure exits with one line on stderr of the form ``E_<KIND>: <message>``
and a status code: 2 usage, 3 data, 4 numeric.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt_io
from .analysis import gradient_profile, run_invariant_suite
from .config import LOSS_MODES, ModelConfig, TrainConfig
from .export import write_csv, write_pgm
from .grounding import (
    class_histogram,
    generate_dataset,
    manifest_header,
    read_manifest,
    vocab_from_header,
    write_manifest,
)
from .lens import MODES, confidence_map
from .metrics import METRICS, calibrate_threshold, evaluate
from .model import forward
from .numcore import NumericError
from .train import train

EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4
_PREFIX = {EXIT_USAGE: "E_USAGE", EXIT_DATA: "E_DATA", EXIT_NUMERIC: "E_NUMERIC"}


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(EXIT_USAGE, f"{self.prog}: {message}")


def _load_manifest(path):
    try:
        return read_manifest(path)
    except (OSError, ValueError, KeyError, TypeError) as e:
        raise CliError(EXIT_DATA, f"cannot read manifest {path}: {e}") from None


def _load_checkpoint(path):
    try:
        return ckpt_io.load(path)
    except (OSError, ValueError, KeyError, TypeError) as e:
        raise CliError(EXIT_DATA, f"cannot read checkpoint {path}: {e}") from None


def _check_compatible(ck, header, vocab):
    cfg = ck.model_config
    if (cfg.grid_side, cfg.patch_px) != (int(header["G"]), int(header["p"])):
        raise CliError(EXIT_DATA, f"manifest grid G={header['G']} p={header['p']} does not match checkpoint "
                                  f"G={cfg.grid_side} p={cfg.patch_px}")
    if len(vocab) > cfg.vocab_size:
        raise CliError(EXIT_DATA, f"manifest vocabulary has {len(vocab)} words, model has {cfg.vocab_size}")


# --- commands ---------------------------------------------------------------


def cmd_gen_data(args) -> int:
    if args.images < 1 or args.grid < 2 or args.patch_px < 1:
        raise CliError(EXIT_USAGE, "--images must be >= 1, --grid >= 2 and --patch-px >= 1")
    try:
        examples = generate_dataset(args.images, grid_side=args.grid, patch_px=args.patch_px, seed=args.seed)
    except ValueError as e:
        raise CliError(EXIT_USAGE, str(e)) from None
    header = manifest_header(args.grid, args.patch_px, seed=args.seed, images=args.images)
    try:
        write_manifest(args.out, examples, header)
    except OSError as e:
        raise CliError(EXIT_DATA, f"cannot write {args.out}: {e}") from None
    print(f"wrote {args.images} images, {len(examples)} questions to {args.out}")
    for word, count in class_histogram(examples).items():
        print(f"{word:<8}{count:>6}")
    return 0


def cmd_train(args) -> int:
    header, examples = _load_manifest(args.data)
    vocab = vocab_from_header(header)
    try:
        model = ModelConfig(grid_side=int(header["G"]), patch_px=int(header["p"]), init_std=args.init_std,
                            seed=args.seed)
        config = TrainConfig(loss=args.loss, lam=args.lam, lr=args.lr, epochs=args.epochs,
                             batch_size=args.batch_size, seed=args.seed, model=model, data=str(args.data))
    except ValueError as e:
        raise CliError(EXIT_USAGE, str(e)) from None
    if len(vocab) > model.vocab_size:
        raise CliError(EXIT_DATA, f"manifest vocabulary has {len(vocab)} words, model has {model.vocab_size}")
    log_path = Path(args.log) if args.log else Path(str(args.out) + ".steps.jsonl")
    try:
        with open(log_path, "w", encoding="utf-8", newline="\n") as log_file:
            result = train(examples, config, vocab, on_step=lambda r: log_file.write(r.to_json() + "\n"))
    except NumericError as e:
        raise CliError(EXIT_NUMERIC, f"training diverged: {e}") from None
    except OSError as e:
        raise CliError(EXIT_DATA, f"cannot write {log_path}: {e}") from None
    ck = ckpt_io.Checkpoint(result.params, config, result.step, result.rng_state)
    try:
        ckpt_io.save(args.out, ck)
    except OSError as e:
        raise CliError(EXIT_DATA, f"cannot write {args.out}: {e}") from None
    spe = -(-len(examples) // config.batch_size)
    means = result.epoch_means(spe)
    print(f"trained {result.step} steps ({config.loss}, lambda={config.lam}); "
          f"epoch-mean l_total {means[0]:.4f} -> {means[-1]:.4f}")
    print(f"checkpoint: {args.out}\nstep log: {log_path}")
    return 0


def cmd_lens(args) -> int:
    ck = _load_checkpoint(args.ckpt)
    header, examples = _load_manifest(args.data)
    vocab = vocab_from_header(header)
    _check_compatible(ck, header, vocab)
    words = args.concept.split()
    unknown = [w for w in words if w not in vocab]
    if not words or unknown:
        raise CliError(EXIT_USAGE, f"unknown concept {args.concept!r}; vocabulary: {', '.join(vocab.words)}")
    ex = next((e for e in examples if e.image_id == args.image_id), None)
    if ex is None:
        raise CliError(EXIT_DATA, f"image id {args.image_id} not in {args.data}")
    trace = forward(ck.params, ex.image, ex.question)
    cmap = confidence_map(trace, [vocab.id(w) for w in words], mode=args.mode, checkpoint_id=str(args.ckpt))
    try:
        if args.out_csv:
            write_csv(args.out_csv, cmap.grid)
        if args.out_pgm:
            write_pgm(args.out_pgm, cmap.grid)
    except OSError as e:
        raise CliError(EXIT_DATA, f"cannot write map: {e}") from None
    print(f"image {ex.image_id} concept {args.concept!r} layer {cmap.layer} mode {cmap.mode}: "
          f"min {cmap.grid.min():.6g} max {cmap.grid.max():.6g}")
    return 0


def _parse_metrics(text: str) -> tuple[str, ...]:
    names = tuple(m.strip() for m in text.split(",") if m.strip())
    bad = [m for m in names if m not in METRICS]
    if bad or not names:
        raise CliError(EXIT_USAGE, f"unknown metric(s) {', '.join(bad) or '<none>'}; choose from {','.join(METRICS)}")
    return names


def cmd_eval(args) -> int:
    metrics = _parse_metrics(args.metrics)
    ck = _load_checkpoint(args.ckpt)
    header, examples = _load_manifest(args.data)
    vocab = vocab_from_header(header)
    _check_compatible(ck, header, vocab)
    threshold = args.threshold
    if "iou" in metrics and threshold is None:
        if not args.val_data:
            raise CliError(EXIT_USAGE, "metric iou needs --threshold or --val-data for threshold selection")
        val_header, val = _load_manifest(args.val_data)
        _check_compatible(ck, val_header, vocab_from_header(val_header))
        threshold = calibrate_threshold(ck.params, val, vocab)
    if threshold is not None and not 0.0 < threshold < 1.0:
        raise CliError(EXIT_USAGE, f"--threshold must lie in (0, 1), got {threshold}")
    tag = args.tag or ck.train_config.loss
    split = args.split or Path(args.data).stem
    report = evaluate(ck.params, examples, metrics, threshold, tag, split, vocab)
    out = Path(args.out) if args.out else Path(args.ckpt).with_suffix(f".{split}.eval")
    try:
        report.write_records(str(out) + ".jsonl")
        Path(str(out) + ".txt").write_text(report.table() + "\n", encoding="utf-8")
    except OSError as e:
        raise CliError(EXIT_DATA, f"cannot write report: {e}") from None
    print(report.table())
    return 0


def cmd_gradcheck(args) -> int:
    suite = run_invariant_suite(args.seed)
    for c in suite.checks:
        print(f"{'PASS' if c.passed else 'FAIL'} {c.name}: {c.detail}")
    if not suite.passed:
        names = ",".join(c.name for c in suite.failures())
        raise CliError(EXIT_NUMERIC, f"invariants violated: {names}")
    return 0


def cmd_analyze(args) -> int:
    ck = _load_checkpoint(args.ckpt)
    header, examples = _load_manifest(args.data)
    vocab = vocab_from_header(header)
    _check_compatible(ck, header, vocab)
    yes = [ex for ex in examples if ex.is_yes]
    if args.limit:
        yes = yes[: args.limit]
    if not yes:
        raise CliError(EXIT_DATA, f"{args.data} has no examples with a present object")
    out = Path(args.out) if args.out else Path(args.ckpt).with_suffix(".analysis.jsonl")
    lll_med, ntp_med, ratios, violations = [], [], [], 0
    try:
        with open(out, "w", encoding="utf-8", newline="\n") as f:
            for ex in yes:
                g = ex.grounding(vocab)
                rep = gradient_profile(ck.params, ex.image, ex.question, ex.answer, g)
                pos = rep.positives
                row = {
                    "image_id": ex.image_id,
                    "concept": ex.concept,
                    "median_lll_grad_final": float(np.median(np.asarray(rep.lll_grad_final)[pos])),
                    "median_lll_grad_visual": float(np.median(np.asarray(rep.lll_grad_visual)[pos])),
                    "median_ntp_grad_visual": float(np.median(np.asarray(rep.ntp_grad_visual)[pos])),
                    "median_ratio": rep.median_ratio,
                    "correlation": rep.correlation,
                    "op_norm_U": rep.op_norm_U,
                    "cap_violations": rep.cap_violations,
                }
                f.write(json.dumps(row) + "\n")
                lll_med.append(row["median_lll_grad_final"])
                ntp_med.append(row["median_ntp_grad_visual"])
                ratios.append(rep.median_ratio)
                violations += rep.cap_violations
    except OSError as e:
        raise CliError(EXIT_DATA, f"cannot write {out}: {e}") from None
    print(f"examples analysed        {len(yes)}")
    print(f"median |dLLL/dh_L| at P' {np.median(lll_med):.6g}")
    print(f"median |dNTP/dh| at P'   {np.median(ntp_med):.6g}")
    print(f"median LLL/NTP ratio     {np.median(ratios):.6g}")
    print(f"gradient-cap violations  {violations}")
    print(f"records: {out}")
    return 0


# --- parser -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="patchlens", description="Toy VLM grounding experiments with a logit-lens loss.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("gen-data", help="generate a shape-world manifest")
    s.add_argument("--out", required=True)
    s.add_argument("--images", type=int, default=512)
    s.add_argument("--grid", type=int, default=8)
    s.add_argument("--patch-px", type=int, default=4)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(fn=cmd_gen_data)

    s = sub.add_parser("train", help="train a model and write a checkpoint")
    s.add_argument("--data", required=True)
    s.add_argument("--loss", choices=LOSS_MODES, default="ntp+lll")
    s.add_argument("--lambda", dest="lam", type=float, default=0.5)
    s.add_argument("--epochs", type=int, default=10)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--lr", type=float, default=TrainConfig.lr)
    s.add_argument("--batch-size", type=int, default=TrainConfig.batch_size)
    s.add_argument("--init-std", type=float, default=ModelConfig.init_std)
    s.add_argument("--out", required=True)
    s.add_argument("--log", help="step log path (default: <out>.steps.jsonl)")
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("lens", help="export a logit-lens confidence map")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True, help="manifest holding the image")
    s.add_argument("--image-id", type=int, required=True)
    s.add_argument("--concept", required=True, help="concept word(s), space separated")
    s.add_argument("--mode", choices=MODES, default="last-layer")
    s.add_argument("--out-csv")
    s.add_argument("--out-pgm")
    s.set_defaults(fn=cmd_lens)

    s = sub.add_parser("eval", help="evaluate grounding and yes/no metrics")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--metrics", default=",".join(METRICS))
    s.add_argument("--split", help="dataset id recorded in the report (default: manifest file stem)")
    s.add_argument("--threshold", type=float)
    s.add_argument("--val-data", help="validation manifest for threshold selection")
    s.add_argument("--tag", help="model tag (default: the checkpoint's loss mode)")
    s.add_argument("--out", help="report path prefix; writes <out>.txt and <out>.jsonl")
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("gradcheck", help="run the gradient invariant suite")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(fn=cmd_gradcheck)

    s = sub.add_parser("analyze", help="gradient attenuation report for a checkpoint")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--limit", type=int, default=0, help="analyse at most this many examples (0: all)")
    s.add_argument("--out", help="record path (default: <ckpt>.analysis.jsonl)")
    s.set_defaults(fn=cmd_analyze)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if args.verbose:
            logging.basicConfig(level=logging.INFO, format="%(message)s")
        return args.fn(args)
    except CliError as e:
        code, msg = e.code, str(e)
    except NumericError as e:
        code, msg = EXIT_NUMERIC, str(e)
    except (ValueError, KeyError) as e:
        code, msg = EXIT_DATA, str(e)
    print(f"{_PREFIX[code]}: {' '.join(msg.split())}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
