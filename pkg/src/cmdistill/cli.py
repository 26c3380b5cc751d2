"""``cmdistill`` command line: synth, pretrain, train, eval, toylab, gradcheck."""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import sys
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, config_to_dict, load_config
from .data import by_split, read_manifest, write_manifest
from .errors import CmdistillError, UsageError, exit_code_for
from .pipeline import (donor_state, load_donor, load_student, load_teacher, make_world, pretrain_donor_models,
                       pretrain_teacher, teacher_state)

MANIFEST = "manifest.jsonl"
TEACHER = "teacher.ckpt"
DONOR = "donor.ckpt"
STUDENT = "student.ckpt"


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def _json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _loss_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["step", "loss"])
    for step, loss in rows:
        w.writerow([step, repr(float(loss))])
    return buf.getvalue()


def _config(args) -> RunConfig:
    cfg = load_config(args.config)
    if args.seed is not None and args.seed < 0:
        raise UsageError("--seed must be a non-negative integer")
    return cfg


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# -- commands ------------------------------------------------------------------------

def cmd_synth(args) -> int:
    cfg = _config(args)
    if args.seed is not None:
        cfg.seed = args.seed
    out = _out(args)
    world = make_world(cfg)
    from .audio import write_wav
    from .data import render

    examples = []
    audio_dir = out / "audio"
    if world.examples:
        audio_dir.mkdir(exist_ok=True)
    for ex in world.examples:
        rel = f"audio/{ex.id}.wav"
        write_wav(out / rel, render(ex, world.spec, world.rng.spawn("render")))
        examples.append(dataclasses.replace(ex, audio=rel))
    write_manifest(out / MANIFEST, examples)
    _write(out / "config.json", _json(config_to_dict(cfg)))
    counts = {s: len(by_split(examples, s)) for s in ("train", "dev", "test")}
    print(f"wrote {len(examples)} examples {counts} to {out / MANIFEST}")
    return 0


def _manifest_path(args, out: Path) -> Path:
    return Path(args.manifest) if args.manifest else out / MANIFEST


def _sets(cfg: RunConfig, manifest: Path, *splits: str):
    examples = read_manifest(manifest, cfg.model.vocab)
    world = make_world(cfg)
    return world, [world.speech_set(s, root=manifest.parent, examples=examples) for s in splits]


def cmd_pretrain(args) -> int:
    cfg = _config(args)
    if args.seed is not None:
        cfg.seed = args.seed
    out = _out(args)
    world, (train, dev) = _sets(cfg, _manifest_path(args, out), "train", "dev")
    lm_rows, donor_rows = [], []
    lm, lm_metrics = pretrain_teacher(world, lambda s, l: lm_rows.append((s, l)))
    save_checkpoint(teacher_state(lm), out / TEACHER)
    _write(out / "teacher_metrics.csv", _loss_csv(lm_rows))
    enc, dec, donor_metrics = pretrain_donor_models(world, train, dev, lambda s, l: donor_rows.append((s, l)))
    save_checkpoint(donor_state(enc, dec), out / DONOR)
    _write(out / "donor_metrics.csv", _loss_csv(donor_rows))
    summary = {"teacher": lm_metrics, "donor": donor_metrics, "teacher_checksum": lm.checksum()}
    _write(out / "pretrain_summary.json", _json(summary))
    print(f"teacher held-out perplexity {lm_metrics['held_out_perplexity']:.3f} "
          f"(unigram {lm_metrics['unigram_perplexity']:.3f}); "
          f"donor held-out token accuracy {donor_metrics['held_out_accuracy']:.3f}")
    return 0


def _pretrained(cfg: RunConfig, args, out: Path):
    root = Path(args.pretrained) if args.pretrained else out
    lm = load_teacher(cfg, load_checkpoint(root / TEACHER))
    enc, dec = load_donor(cfg, load_checkpoint(root / DONOR))
    return lm, enc, dec


def cmd_train(args) -> int:
    from .trainer import train, write_metrics

    cfg = _config(args)
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.arm:
        overrides["arm"] = args.arm
    if args.init:
        overrides["init_mode"] = args.init
    if args.freeze_encoder:
        overrides["freeze_encoder"] = True
    cfg.train = dataclasses.replace(cfg.train, **overrides)
    cfg.validate()
    out = _out(args)
    lm, enc, dec = _pretrained(cfg, args, out)
    _, (data,) = _sets(cfg, _manifest_path(args, out), "train")
    result = train(cfg.train, data, lm, enc, dec, cfg.model.n_queries, checkpoint_path=out / STUDENT)
    write_metrics(result.rows, out / "metrics.csv")
    last = result.rows[-1]
    print(f"arm={cfg.train.arm} init={cfg.train.init_mode} steps={len(result.rows)} "
          f"final combined={last[4]:.4f} reference_kl={last[5]:.4f}")
    return 0


def cmd_eval(args) -> int:
    from .evalkit import (TextPathStudent, bootstrap_csv, classification_report, first_token_agreement,
                          paired_bootstrap, records_csv)

    cfg = _config(args)
    if args.seed is not None:
        cfg.eval.bootstrap_seed = args.seed
    out = _out(args)
    lm, _, _ = _pretrained(cfg, args, out)
    world, (data,) = _sets(cfg, _manifest_path(args, out), args.split)
    if not args.checkpoints:
        raise UsageError("eval needs at least one checkpoint (or the word 'teacher')")
    summary_rows, indicators, names = [], {}, []
    for i, ck in enumerate(args.checkpoints):
        name = f"{i}:{Path(ck).name}" if ck != "teacher" else f"{i}:teacher"
        student = TextPathStudent(lm) if ck == "teacher" else load_student(cfg, load_checkpoint(ck), lm)
        rate, records = first_token_agreement(student, lm, data)
        _write(out / f"eval_{i}_agreement.csv", records_csv(records))
        row = {"name": name, "checkpoint": ck, "first_token_agreement": rate}
        if not args.skip_classification:
            for task in ("binary", "tri"):
                rep, recs = classification_report(student, lm, world.language, data, task)
                _write(out / f"eval_{i}_{task}.csv", records_csv(recs))
                row[f"{task}_accuracy"] = rep["accuracy"]
                row[f"{task}_weighted_f1"] = rep["weighted_f1"]
        summary_rows.append(row)
        indicators[name] = [r.value for r in records]
        names.append(name)
    cols = ["name", "checkpoint", "first_token_agreement"]
    if not args.skip_classification:
        cols += ["binary_accuracy", "binary_weighted_f1", "tri_accuracy", "tri_weighted_f1"]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for row in summary_rows:
        w.writerow([row[c] if isinstance(row[c], str) else repr(float(row[c])) for c in cols])
    _write(out / "eval_summary.csv", buf.getvalue())
    pairs = []
    for a in range(len(names)):
        for b in range(a + 1, len(names)):
            rep = paired_bootstrap(indicators[names[a]], indicators[names[b]],
                                   cfg.eval.bootstrap_resamples, cfg.eval.bootstrap_seed)
            pairs.append((names[a], names[b], rep))
    _write(out / "eval_bootstrap.csv", bootstrap_csv(pairs))
    for row in summary_rows:
        print(f"{row['name']}: first-token agreement {row['first_token_agreement']:.4f}")
    for a, b, rep in pairs:
        print(f"{a} vs {b}: diff {rep.diff:+.4f} p={rep.p_value:.4g} CI [{rep.ci_low:+.4f}, {rep.ci_high:+.4f}]")
    return 0


def _float_list(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise UsageError(f"expected a comma-separated list of numbers, got {text!r}") from exc


def cmd_toylab(args) -> int:
    from .toylab import summary_table, sweep, sweep_csv

    cfg = _config(args)
    toy = cfg.toy
    if args.seed is not None:
        toy.seed = args.seed
    if args.runs is not None:
        toy.runs = args.runs
    if args.lr is not None:
        toy.lr = args.lr
    if args.lr_sweep:
        toy.lr_sweep = _float_list(args.lr_sweep)
    dims = [int(d) for d in _float_list(args.dims)] if args.dims else list(toy.dims)
    toy.validate()
    out = _out(args)
    results = sweep(dims, toy, workers=args.workers)
    _write(out / "toylab.csv", sweep_csv(results, with_lr=bool(toy.lr_sweep)))
    print(summary_table(results))
    return 0


def cmd_gradcheck(args) -> int:
    from .checks import run_all

    cfg = _config(args)
    seed = cfg.seed if args.seed is None else args.seed
    out = _out(args)
    errs = run_all(seed, args.eps)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["check", "max_rel_error"])
    for k, v in errs.items():
        w.writerow([k, repr(v)])
        print(f"{k:32s} {v:.3e}")
    _write(out / "gradcheck.csv", buf.getvalue())
    worst = max(errs.values())
    if worst >= args.tolerance:
        print(f"FAILED: worst relative error {worst:.3e} >= {args.tolerance}", file=sys.stderr)
        return 3
    return 0


# -- parser --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration (defaults apply when omitted)")
    common.add_argument("--seed", type=int, help="seed for this command's randomness")
    common.add_argument("--out", default=".", help="output directory")

    p = argparse.ArgumentParser(prog="cmdistill", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("synth", parents=[common], help="write the synthetic corpus: manifest + WAV files")

    for name, text in (("pretrain", "train the teacher LM and the donor ASR model"),
                       ("train", "distil the teacher into an audio student"),
                       ("eval", "first-token agreement, classification, paired bootstrap")):
        sp = sub.add_parser(name, parents=[common], help=text)
        sp.add_argument("--manifest", help=f"manifest path (default <out>/{MANIFEST})")
        if name != "pretrain":
            sp.add_argument("--pretrained", help="directory holding teacher.ckpt and donor.ckpt (default <out>)")
        if name == "train":
            sp.add_argument("--arm", choices=("full", "distill_only", "align_only"))
            sp.add_argument("--init", choices=("decoder", "scratch"))
            sp.add_argument("--freeze-encoder", action="store_true")
        if name == "eval":
            sp.add_argument("checkpoints", nargs="*", help="student checkpoints, or 'teacher' for the text path")
            sp.add_argument("--split", default="test", choices=("train", "dev", "test"))
            sp.add_argument("--skip-classification", action="store_true")

    sp = sub.add_parser("toylab", parents=[common], help="L2 vs direct-KL toy sweep")
    sp.add_argument("--dims", help="comma-separated dimensions (default from config)")
    sp.add_argument("--runs", type=int)
    sp.add_argument("--lr", type=float)
    sp.add_argument("--lr-sweep", help="comma-separated learning rates; each arm reported at its best")
    sp.add_argument("--workers", type=int, default=1)

    sp = sub.add_parser("gradcheck", parents=[common], help="finite-difference checks of composed blocks")
    sp.add_argument("--eps", type=float, default=1e-5)
    sp.add_argument("--tolerance", type=float, default=1e-4)
    return p


COMMANDS = {"synth": cmd_synth, "pretrain": cmd_pretrain, "train": cmd_train, "eval": cmd_eval,
            "toylab": cmd_toylab, "gradcheck": cmd_gradcheck}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (CmdistillError, OSError, RuntimeError, ValueError) as exc:
        print(f"cmdistill {args.command}: error: {exc}", file=sys.stderr)
        return exit_code_for(exc)


if __name__ == "__main__":
    sys.exit(main())
