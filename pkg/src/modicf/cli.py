"""Command-line entry points.

Subcommands mirror the experiment workflow: synthesize or mask a dataset,
pretrain the completion module, run joint training (optionally a variant),
evaluate, export imputed features, produce per-user recommendations, and
aggregate multi-seed runs into a report with tables and figures.
"""

import os

# constrain BLAS before numpy loads; single-threaded kernels keep runs
# reproducible and are faster at desk scale anyway
_threads = os.environ.setdefault("MODICF_THREADS", "1")
os.environ.setdefault("OPENBLAS_NUM_THREADS", _threads)
os.environ.setdefault("OMP_NUM_THREADS", _threads)
os.environ.setdefault("MKL_NUM_THREADS", _threads)

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import dataset as ds
from . import metrics as mx
from . import report as rp
from . import storage
from . import training as tr
from .cfmr import counterfactual_adjust
from .rng import RngHub

EXIT_OK = 0
EXIT_DATA = 1
EXIT_USAGE = 2
EXIT_NAN = 3


def _fail(code, message):
    print(f"error: {message}", file=sys.stderr)
    return code


def _load_config(args):
    if getattr(args, "config", None):
        try:
            config = tr.TrainConfig.from_json(Path(args.config).read_text())
        except (OSError, ValueError, TypeError) as exc:
            raise ds.DataError(f"bad config file {args.config}: {exc}") from None
    else:
        config = tr.desk_config()
    if getattr(args, "seed", None) is not None:
        config.seed = args.seed
    if getattr(args, "variant", None):
        config.variant = args.variant
        if args.variant not in tr.VARIANTS:
            raise ds.DataError(f"unknown variant {args.variant!r}")
    return config


def cmd_synth(args):
    dims = [int(x) for x in args.dims.split(",")]
    bundle = ds.generate_synthetic(args.users, args.items, args.modalities, dims,
                                   args.groups, args.density, args.seed)
    storage.save_bundle(args.out, bundle)
    print(f"wrote {args.out}: {bundle.n_users} users, {bundle.n_items} items, "
          f"{int(bundle.interactions.sum())} interactions")
    return EXIT_OK


def cmd_mask(args):
    bundle, _ = storage.load_bundle(args.data)
    masked, plan = ds.apply_missing_mask(bundle, args.mr, args.seed)
    storage.save_bundle(args.out, masked, plan=plan, heldout_from=bundle)
    n_cells = sum(len(a) for a in plan.assignment)
    print(f"wrote {args.out}: masked {n_cells} item-modality cells (MR={args.mr})")
    return EXIT_OK


def cmd_pretrain(args):
    bundle, _ = storage.load_bundle(args.data)
    config = _load_config(args)
    hub = RngHub(config.seed)
    progress = _progress_printer(args.quiet)
    state, schedule, features, filled, history = tr.pretrain_mddc(
        bundle, config, hub, progress)
    tr.save_pretrained(args.out, state, features, filled, config)
    print(f"wrote {args.out}: {len(history.pretrain_losses)} epochs, "
          f"final loss {history.pretrain_losses[-1]:.5f}")
    return EXIT_OK


def _progress_printer(quiet):
    if quiet:
        return None

    def progress(stage, epoch, loss):
        if epoch % 50 == 0:
            print(f"[{stage}] epoch {epoch}: loss {loss:.5f}")

    return progress


def _write_timings(path, history):
    lines = ["epoch,seconds"]
    for i, s in enumerate(history.epoch_seconds):
        lines.append(f"{i},{s!r}")
    Path(path).write_text("\n".join(lines) + "\n")


def cmd_train(args):
    bundle, plan = storage.load_bundle(args.data)
    config = _load_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    hub = RngHub(config.seed)
    progress = _progress_printer(args.quiet)

    pretrained = None
    if tr._uses_mddc(config.variant):
        if args.pretrained:
            pretrained = tr.load_pretrained(args.pretrained, bundle, config, hub)
        else:
            state, schedule, features, filled, _ = tr.pretrain_mddc(
                bundle, config, hub, progress)
            pretrained = (state, schedule, features, filled)

    ckpt_path = out / "training.ckpt"
    model, history, n_params = tr.joint_train(
        bundle, config, hub, pretrained, progress,
        checkpoint_every=args.checkpoint_every, checkpoint_path=ckpt_path,
        resume=args.resume)
    tr.save_model(out / "model.ckpt", model)
    _write_timings(out / "timings.csv", history)

    report, _, _, _ = tr.evaluate_model(bundle, model)
    storage.save_report(out / "metrics.json", report)
    manifest = {
        "dataset": str(Path(args.data).resolve()),
        "dataset_hash": storage.dataset_hash(args.data),
        "config": json.loads(config.to_json()),
        "config_id": config.config_id(),
        "seed": config.seed,
        "variant": config.variant,
        "mr": plan.mr if plan else 0.0,
        "n_parameters": n_params,
        "best_epoch": history.best_epoch,
        "metrics": storage.report_to_json(report),
    }
    storage.write_manifest(out / "manifest.json", manifest)
    print(f"wrote {out}: best epoch {history.best_epoch}, "
          f"{n_params} registered parameter tensors")
    return EXIT_OK


def cmd_eval(args):
    bundle, _ = storage.load_bundle(args.data)
    model = tr.load_model(args.model, bundle)
    k_values = [int(k) for k in args.k.split(",")]
    report, _, _, _ = tr.evaluate_model(bundle, model, k_values=k_values)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    storage.save_report(out / "metrics.json", report)
    (out / "metrics.csv").write_text("\n".join(storage.report_csv_lines(report)) + "\n")
    for k in k_values:
        f = report.fairness[k]
        print(f"K={k}: recall {report.recall[k]:.4f} precision {report.precision[k]:.4f} "
              f"ndcg {report.ndcg[k]:.4f} F {f if f is None else round(f, 4)} "
              f"F_fuse {report.fairness_fuse[k]}")
    return EXIT_OK


def cmd_impute(args):
    bundle, _ = storage.load_bundle(args.data)
    model = tr.load_model(args.model, bundle)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    generated = {}
    for m, mod in enumerate(bundle.modalities):
        storage.write_fmat(out / f"{mod.name}.fmat", model.features[m])
        generated[mod.name] = [int(i) for i in bundle.indicator.missing_set(m)]
    (out / "generated_rows.json").write_text(
        json.dumps(generated, indent=2, sort_keys=True) + "\n")
    total = sum(len(v) for v in generated.values())
    print(f"wrote {out}: completed matrices, {total} generated rows")
    return EXIT_OK


def cmd_recommend(args):
    bundle, _ = storage.load_bundle(args.data)
    model = tr.load_model(args.model, bundle)
    if not 0 <= args.user < bundle.n_users:
        raise ds.DataError(f"user {args.user} outside [0, {bundle.n_users})")
    scores, raw, item = tr.validation_scores(model, bundle, model.config.variant)
    adjusted_all = counterfactual_adjust(raw, item, model.config.gamma)
    result = mx.rank_topk(scores, bundle, args.top_k)
    lines = ["user_id\trank\titem_id\tadjusted_score\traw_score\titem_direct_score"]
    for rank, item_id in enumerate(result.items[args.user], 1):
        lines.append(f"{args.user}\t{rank}\t{item_id}"
                     f"\t{adjusted_all[args.user, item_id]!r}"
                     f"\t{raw[args.user, item_id]!r}\t{item[item_id]!r}")
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text)
        print(f"wrote {args.out}")
    else:
        print(text, end="")
    return EXIT_OK


def cmd_report(args):
    manifests = []
    for pattern in args.runs:
        p = Path(pattern)
        if p.is_dir():
            p = p / "manifest.json"
        if not p.exists():
            raise ds.DataError(f"missing manifest: {p}")
        manifests.append(p)
    table, sig, figures = rp.write_report(manifests, args.out)
    print(f"wrote {args.out}: {len(table)} variants, {len(figures)} figures")
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="modicf",
                                description="diffusion-completed, counterfactually "
                                            "debiased multimodal recommendation toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic dataset directory")
    s.add_argument("--out", required=True)
    s.add_argument("--users", type=int, default=300)
    s.add_argument("--items", type=int, default=200)
    s.add_argument("--modalities", type=int, default=2)
    s.add_argument("--dims", default="16,16", help="comma-separated feature dims")
    s.add_argument("--groups", type=int, default=5)
    s.add_argument("--density", type=float, default=0.02)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(fn=cmd_synth)

    s = sub.add_parser("mask", help="apply a controlled missing-modality mask")
    s.add_argument("--data", required=True, help="input dataset directory")
    s.add_argument("--out", required=True)
    s.add_argument("--mr", type=float, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(fn=cmd_mask)

    s = sub.add_parser("pretrain", help="stage-one training of the completion module")
    s.add_argument("--data", required=True)
    s.add_argument("--config", help="TrainConfig JSON file")
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True, help="pretrained checkpoint path")
    s.add_argument("--quiet", action="store_true")
    s.set_defaults(fn=cmd_pretrain)

    s = sub.add_parser("train", help="joint training (full model or a variant)")
    s.add_argument("--data", required=True)
    s.add_argument("--config")
    s.add_argument("--seed", type=int)
    s.add_argument("--variant", choices=tr.VARIANTS)
    s.add_argument("--pretrained", help="stage-one checkpoint to start from")
    s.add_argument("--out", required=True, help="run output directory")
    s.add_argument("--checkpoint-every", type=int, default=0)
    s.add_argument("--resume", help="resume from a training checkpoint")
    s.add_argument("--quiet", action="store_true")
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("eval", help="metric report for a trained model")
    s.add_argument("--data", required=True)
    s.add_argument("--model", required=True, help="model.ckpt from train")
    s.add_argument("--k", default="10,20")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("impute", help="export completed feature matrices")
    s.add_argument("--data", required=True)
    s.add_argument("--model", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_impute)

    s = sub.add_parser("recommend", help="top-K list for one user as TSV")
    s.add_argument("--data", required=True)
    s.add_argument("--model", required=True)
    s.add_argument("--user", type=int, required=True)
    s.add_argument("--top-k", type=int, default=20)
    s.add_argument("--out")
    s.set_defaults(fn=cmd_recommend)

    s = sub.add_parser("report", help="aggregate run manifests into tables and figures")
    s.add_argument("--runs", nargs="+", required=True,
                   help="run directories or manifest.json paths")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_report)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except tr.TrainingDiverged as exc:
        return _fail(EXIT_NAN, str(exc))
    except (ds.DataError, storage.FormatError, mx.MetricError, ValueError) as exc:
        return _fail(EXIT_DATA, str(exc))
    except OSError as exc:
        return _fail(EXIT_DATA, f"{exc.__class__.__name__}: {exc}")


if __name__ == "__main__":
    sys.exit(main())
