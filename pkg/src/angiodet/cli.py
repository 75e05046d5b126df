"""Command-line surface: dataset synthesis, training, inference,
post-processing, evaluation, model comparison and numeric self-checks.

Exit codes: 0 success, 1 usage/config error, 2 numeric failure, 3 I/O error.
All outputs are written via temp-file + rename; reruns never mutate inputs.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import tempfile

import numpy as np

from . import config as cfgmod
from .data import load_dataset, save_dataset, synth_generate
from .detector import Detection
from .evaluation import SequenceOutcome, aggregate, mcnemar
from .model import OcclusionNet
from .pipeline import (
    MINIP_BASELINE,
    evaluate_model,
    gt_for_judging,
    infer_sequence,
    postprocess,
    preprocess,
)
from .trajectory import Trajectory
from .training import DivergenceError, train

VARIANT_CHOICES = ("occlunet1", "occlunet2", MINIP_BASELINE)


class CliError(Exception):
    def __init__(self, message, code=1):
        super().__init__(message)
        self.code = code


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(message, code=1)


def _write_atomic(path: str, text: str):
    d = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=d)
    try:
        with os.fdopen(fd, "w") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _load_json(path: str):
    with open(path) as f:
        return json.load(f)


# ---------------------------------------------------------------------------
# subcommands

def cmd_synth(args):
    cfg = cfgmod.load_config(args.config)
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.n is not None:
        cfg["synth"]["n_sequences"] = args.n
    scfg = cfgmod.synth_config(cfg)
    seqs = synth_generate(scfg)
    save_dataset(args.out, seqs, config=scfg.to_json())
    print(f"wrote {len(seqs)} sequences to {args.out}")
    return 0


def cmd_train(args):
    cfg = cfgmod.load_config(args.config)
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.epochs is not None:
        cfg["optimizer"]["epochs"] = args.epochs
    seqs, _ = load_dataset(args.data)
    rng = np.random.default_rng(cfg["seed"])
    order = rng.permutation(len(seqs))
    n_val = max(1, int(round(len(seqs) * cfg["train"]["val_fraction"])))
    val = [seqs[i] for i in order[:n_val]]
    trn = [seqs[i] for i in order[n_val:]]
    minip_mode = args.variant == MINIP_BASELINE
    mcfg = cfgmod.model_config(cfg, variant=args.variant)
    pcfg = cfgmod.pipeline_config(cfg)
    ocfg = cfgmod.optimizer_config(cfg)
    log_lines = []
    model, _log = train(trn, val, mcfg, ocfg, pcfg, seed=cfg["seed"],
                        windows_per_seq=cfg["train"]["windows_per_seq"],
                        minip_mode=minip_mode, val_jobs=args.jobs,
                        log_fn=lambda e: log_lines.append(json.dumps(e)))
    model.save(args.out, extra_meta={"pipeline_variant": args.variant,
                                     "seed": cfg["seed"]})
    if args.log:
        _write_atomic(args.log, "\n".join(log_lines) + "\n")
    print(f"saved checkpoint to {args.out}")
    return 0


def cmd_infer(args):
    cfg = cfgmod.load_config(args.config)
    model, meta = OcclusionNet.load(args.checkpoint)
    trained_as = meta.get("pipeline_variant")
    if trained_as is not None and trained_as != args.variant:
        raise CliError(f"checkpoint was trained as {trained_as!r}, "
                       f"requested {args.variant!r}", code=1)
    seqs, _ = load_dataset(args.data)
    pcfg = cfgmod.pipeline_config(cfg)
    minip_mode = args.variant == MINIP_BASELINE
    lines = [json.dumps({"format": 1, "type": "detections",
                         "variant": args.variant})]
    for seq in seqs:
        pre = preprocess(seq, pcfg)
        dets = infer_sequence(model, pre, pcfg, minip_mode=minip_mode)
        lines.append(json.dumps({"sequence_id": seq.sequence_id,
                                 "detections": [d.to_json() for d in dets]}))
    _write_atomic(args.out, "\n".join(lines) + "\n")
    print(f"wrote detections for {len(seqs)} sequences to {args.out}")
    return 0


def _read_detections(path: str):
    with open(path) as f:
        lines = [ln for ln in f.read().splitlines() if ln.strip()]
    if not lines:
        raise CliError(f"{path}: empty detections file", code=3)
    header = json.loads(lines[0])
    if header.get("type") != "detections":
        raise CliError(f"{path}: not a detections file", code=1)
    out = []
    for ln in lines[1:]:
        rec = json.loads(ln)
        out.append((rec["sequence_id"],
                    [Detection.from_json(d) for d in rec["detections"]]))
    return out


def cmd_postprocess(args):
    cfg = cfgmod.load_config(args.config)
    pcfg = cfgmod.pipeline_config(cfg)
    winners = []
    for seq_id, dets in _read_detections(args.detections):
        best = postprocess(dets, pcfg)
        winners.append({"sequence_id": seq_id,
                        "trajectory": best.to_json() if best else None})
    _write_atomic(args.out, json.dumps({"format": 1, "winners": winners}, indent=1))
    print(f"wrote {len(winners)} winners to {args.out}")
    return 0


def cmd_eval(args):
    cfg = cfgmod.load_config(args.config)
    pcfg = cfgmod.pipeline_config(cfg)
    if args.outcomes:
        doc = _load_json(args.outcomes)
        outcomes = [SequenceOutcome.from_json(o) for o in doc["outcomes"]]
    else:
        if not (args.winners and args.data):
            raise CliError("eval needs either --outcomes or --winners with --data")
        from .evaluation import judge_sequence
        doc = _load_json(args.winners)
        winners = {w["sequence_id"]: w["trajectory"] for w in doc["winners"]}
        seqs, _ = load_dataset(args.data)
        outcomes = []
        for seq in seqs:
            pre = preprocess(seq, pcfg)
            traj_doc = winners.get(seq.sequence_id)
            traj = Trajectory.from_json(traj_doc) if traj_doc else None
            outcomes.append(judge_sequence(traj, gt_for_judging(pre),
                                           pcfg.judge, seq.sequence_id))
    report = aggregate(outcomes)
    print(report.to_table())
    print(f"P = {100.0 * report.overall.precision:.2f}%  "
          f"R = {100.0 * report.overall.recall:.2f}%")
    if args.out:
        _write_atomic(args.out, json.dumps(
            {"report": report.to_json(),
             "outcomes": [o.to_json() for o in outcomes]}, indent=1))
    return 0


def cmd_compare(args):
    doc_a = _load_json(args.a)
    doc_b = _load_json(args.b)
    a = {o["sequence_id"]: SequenceOutcome.from_json(o).correct
         for o in doc_a["outcomes"]}
    b = {o["sequence_id"]: SequenceOutcome.from_json(o).correct
         for o in doc_b["outcomes"]}
    if set(a) != set(b):
        raise CliError("outcome files cover different sequence sets")
    ids = sorted(a)
    result = mcnemar([a[i] for i in ids], [b[i] for i in ids])
    print(f"b = {result['b']}  c = {result['c']}  p = {result['p_value']:.6g}")
    if args.out:
        _write_atomic(args.out, json.dumps(result, indent=1))
    return 0


def cmd_gradcheck(args):
    from .gradcheck import TOLERANCE, run_suite
    rows = run_suite(n_seeds=args.seeds, corrupt=args.corrupt_backward)
    width = max(len(r[0]) for r in rows)
    ok = True
    for name, err, passed in rows:
        ok &= passed
        print(f"{name.ljust(width)}  max rel err {err:.3e}  "
              f"{'pass' if passed else 'FAIL'} (tol {TOLERANCE:g})")
    return 0 if ok else 2


def cmd_selfeval(args):
    """Full pipeline evaluation of a checkpoint on a dataset."""
    cfg = cfgmod.load_config(args.config)
    model, meta = OcclusionNet.load(args.checkpoint)
    variant = meta.get("pipeline_variant", "occlunet1")
    seqs, _ = load_dataset(args.data)
    pcfg = cfgmod.pipeline_config(cfg)
    outcomes, report = evaluate_model(model, seqs, pcfg,
                                      minip_mode=variant == MINIP_BASELINE,
                                      jobs=args.jobs)
    print(report.to_table())
    if args.out:
        _write_atomic(args.out, json.dumps(
            {"report": report.to_json(),
             "outcomes": [o.to_json() for o in outcomes]}, indent=1))
    return 0


# ---------------------------------------------------------------------------

def build_parser():
    p = _Parser(prog="angiodet",
                description="Spatio-temporal occlusion detection pipeline")
    p.add_argument("--jobs", type=int, default=os.cpu_count() or 1,
                   help="worker bound for per-sequence parallelism")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("synth", help="generate a synthetic dataset")
    sp.add_argument("--config")
    sp.add_argument("--out", required=True)
    sp.add_argument("--n", type=int)
    sp.add_argument("--seed", type=int)
    sp.set_defaults(fn=cmd_synth)

    sp = sub.add_parser("train", help="train a model variant")
    sp.add_argument("--config")
    sp.add_argument("--data", required=True)
    sp.add_argument("--variant", choices=VARIANT_CHOICES, default="occlunet1")
    sp.add_argument("--out", required=True)
    sp.add_argument("--log")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--epochs", type=int)
    sp.set_defaults(fn=cmd_train)

    sp = sub.add_parser("infer", help="run inference, emit detections JSONL")
    sp.add_argument("--config")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--variant", choices=VARIANT_CHOICES, default="occlunet1")
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_infer)

    sp = sub.add_parser("postprocess", help="link detections, select winners")
    sp.add_argument("--config")
    sp.add_argument("--detections", required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_postprocess)

    sp = sub.add_parser("eval", help="sequence-level metrics report")
    sp.add_argument("--config")
    sp.add_argument("--outcomes", help="precomputed outcome records (fixture mode)")
    sp.add_argument("--winners")
    sp.add_argument("--data")
    sp.add_argument("--out")
    sp.set_defaults(fn=cmd_eval)

    sp = sub.add_parser("compare", help="McNemar paired comparison")
    sp.add_argument("--a", required=True)
    sp.add_argument("--b", required=True)
    sp.add_argument("--out")
    sp.set_defaults(fn=cmd_compare)

    sp = sub.add_parser("gradcheck", help="finite-difference self-checks")
    sp.add_argument("--seeds", type=int, default=20)
    sp.add_argument("--corrupt-backward", action="store_true",
                    help="negative control: corrupt one backward pass")
    sp.set_defaults(fn=cmd_gradcheck)

    sp = sub.add_parser("selfeval", help="evaluate a checkpoint end to end")
    sp.add_argument("--config")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--out")
    sp.set_defaults(fn=cmd_selfeval)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.fn(args)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code
    except (cfgmod.ConfigError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except DivergenceError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return 2
    except FloatingPointError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return 2
    except OSError as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
