"""Command-line interface: ``articfit {synth,train,register,measure,eval,export}``.

Exit codes: 0 ok, 2 bad input, 3 convergence failure.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import io as aio
from .kinematics import InvalidArgument, forward_batch
from .optim import ConvergenceError

logger = logging.getLogger("articfit")

EXIT_OK, EXIT_BAD_INPUT, EXIT_CONVERGENCE = 0, 2, 3
METRIC_KEYS = ("obs_to_model", "model_to_obs", "keypoint_l2")


class GroundTruthRefused(InvalidArgument):
    pass


def _threads():
    """Honour ARTICFIT_THREADS (default 1, which also keeps runs reproducible)."""
    import torch

    raw = os.environ.get("ARTICFIT_THREADS", "1")
    try:
        n = max(1, int(raw))
    except ValueError:
        raise InvalidArgument(f"ARTICFIT_THREADS must be an integer, got {raw!r}")
    torch.set_num_threads(n)
    return n


def _write_csv(path, rows, fields):
    out = sys.stdout if path in (None, "-") else open(path, "w", newline="")
    try:
        w = csv.DictWriter(out, fieldnames=list(fields), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(float(v)) if isinstance(v, (float, np.floating)) else v)
                        for k, v in r.items() if k in fields})
    finally:
        if out is not sys.stdout:
            out.close()


def _read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _train_config(args):
    from .pipeline import TrainConfig

    cfg = TrainConfig(iterations=args.iters, n_components=args.pcs)
    return cfg if args.steps is None else cfg.with_steps(args.steps)


def _split(manifest, subjects, seed, fold):
    from .synth import make_splits

    n_frames = min(len(s.frames) for s in subjects)
    return make_splits(len(subjects), n_frames, seed=seed)[fold]


def _check_truth_dir(root: Path):
    if (root / "true_model.afm").exists() or root.name == "truth":
        raise GroundTruthRefused(f"{root} looks like a ground-truth directory")


def _check_no_truth(subjects, prior, extra):
    if prior.meta.get("role") == "truth":
        raise GroundTruthRefused("prior model is a ground-truth model")
    if any(k.startswith("truth") for k in extra):
        raise GroundTruthRefused(f"prior container holds ground-truth blobs {sorted(extra)}")
    if any(s.truth is not None for s in subjects):
        raise GroundTruthRefused("subject series carry ground truth")


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args):
    from .synth import SynthConfig, make_dataset, make_splits

    cfg = SynthConfig(seed=args.seed, N=args.vertices, M=args.keypoints, D_true=args.latent,
                      n_subjects=args.subjects, n_frames=args.frames, noise=args.noise)
    ds = make_dataset(cfg)
    splits = None
    if cfg.n_subjects >= 5:
        splits = [{"fold": s.fold, "train": [int(i) for i in s.train],
                   "new_shape": [int(i) for i in s.new_shape],
                   "new_pose": {str(k): [int(f) for f in v] for k, v in s.new_pose.items()}}
                  for s in make_splits(cfg.n_subjects, cfg.n_frames, seed=args.seed)]
    aio.save_dataset(args.out, ds.subjects, ds.prior_model, dataclasses.asdict(cfg),
                     truth_model=ds.true_model, splits=splits)
    print(f"wrote {len(ds.subjects)} subjects x {cfg.n_frames} frames to {args.out}")
    return EXIT_OK


def cmd_train(args):
    from .pipeline import save_history, train

    root = Path(args.data)
    _check_truth_dir(root)
    subjects, prior, manifest = aio.load_dataset(root)
    if args.prior:
        prior, extra, _ = aio.load_model(args.prior, return_extra=True)
    elif prior is not None:
        prior, extra, _ = aio.load_model(root / manifest["prior_model"], return_extra=True)
    else:
        raise InvalidArgument("no prior model: pass --prior or use a dataset with one")
    _check_no_truth(subjects, prior, extra)
    if args.fold is not None:
        sp = _split(manifest, subjects, args.seed, args.fold)
        n_frames = min(len(s.frames) for s in subjects)
        subjects = [subjects[i].subset(sp.train_frames(i, n_frames)) for i in sp.train]
    cfg = _train_config(args)
    res = train(subjects, prior, cfg)
    model = res.model.replace(meta=dict(res.model.meta, seed=args.seed, fold=args.fold))
    out = Path(args.out)
    aio.save_model(out, model, extra_header={"history": res.history,
                                             "excluded": list(res.excluded)})
    metrics = Path(args.metrics) if args.metrics else out.with_suffix(".metrics.csv")
    save_history(metrics, res.history)
    fits = Path(args.fits) if args.fits else out.with_suffix(".fits.json")
    aio.save_fits(fits, res.fits)
    last = res.history[-1]
    print(f"trained {len(res.fits)} subjects, {len(res.history) - 1} iterations: "
          f"obs->model {last['obs_to_model']:.3f} mm; model {out}, metrics {metrics}")
    return EXIT_OK


def _find_subject(subjects, sid):
    for s in subjects:
        if s.subject_id == sid:
            return s
    raise InvalidArgument(f"subject {sid!r} not in dataset")


def cmd_register(args):
    from .pipeline import register_joint, register_new_subject, summarize

    model = aio.load_model(args.model)
    subjects, _, _ = aio.load_dataset(args.data)
    series = _find_subject(subjects, args.subject)
    cfg = _train_config(args)
    if args.no_unpose:
        m = model if args.pcs is None else model.replace(shape_basis=model.shape_basis[:, :args.pcs])
        reg = register_joint(m, series, cfg)
    else:
        reg = register_new_subject(model, series, cfg, n_components=args.pcs)
    fit = dataclasses.replace(reg.series, beta=reg.beta, thetas=reg.thetas, transl=reg.transl,
                              canonical=reg.canonical)
    aio.save_fits(args.out, [fit])
    s = summarize({series.subject_id: reg.metrics})
    print(f"{series.subject_id}: obs->model {s['obs_to_model']:.3f} mm, "
          f"keypoints {s['keypoint_l2']:.3f} mm -> {args.out}")
    return EXIT_OK


def cmd_measure(args):
    from .anthropometry import measure

    model = aio.load_model(args.model)
    ga = {}
    if args.ga:
        ga = {r["id"]: r["ga"] for r in _read_csv(args.ga)}
    rows = []
    if args.fit:
        for sid, f in aio.load_fits(args.fit).items():
            rows.append(dict(id=sid, GA=ga.get(sid, ""), **measure(model, f["canonical"]).row()))
    else:
        rows.append(dict(id="mean", GA=ga.get("mean", ""), **measure(model).row()))
    fields = ["id"] + (["GA"] if ga else []) + ["BL", "FL", "HC", "AC", "BV"]
    _write_csv(args.out, rows, fields)
    return EXIT_OK


def _frame_rows(sid, series, metrics, **extra):
    return [dict(extra, subject=sid, frame=fr.index, **m) for fr, m in zip(series.frames, metrics)]


def cmd_eval(args):
    from .pipeline import (neighbour_poses, register_new_poses, register_new_subject,
                           series_metrics, summarize)

    model = aio.load_model(args.model)
    subjects, _, manifest = aio.load_dataset(args.data)
    cfg = _train_config(args)
    seed = args.seed if args.seed is not None else model.meta.get("seed", 0)
    fold = args.fold if args.fold is not None else model.meta.get("fold")
    rows, per = [], {}
    if args.split in ("train", "new-pose"):
        if not args.fits:
            raise InvalidArgument(f"--split {args.split} needs --fits from training")
        fits = aio.load_fits(args.fits)
        for sid, f in fits.items():
            series = _find_subject(subjects, sid)
            if args.split == "train":
                by_index = {fr.index: i for i, fr in enumerate(series.frames)}
                sub = series.subset([by_index[i] for i in f["frames"]])
                sub = dataclasses.replace(sub, thetas=f["thetas"], transl=f["transl"],
                                          canonical=f["canonical"])
                metrics = series_metrics(model, sub)
            else:
                if fold is None:
                    raise InvalidArgument("--split new-pose needs a fold")
                sp = _split(manifest, subjects, seed, fold)
                idx = [s.subject_id for s in subjects].index(sid)
                held = sp.new_pose.get(idx, ())
                if not len(held):
                    continue
                sub = series.subset(held)
                th, tr = neighbour_poses(f["frames"], f["thetas"], f["transl"],
                                         [series.frames[i].index for i in held])
                metrics = register_new_poses(model, f["canonical"], sub, cfg, th, tr).metrics
            per[sid] = metrics
            rows += _frame_rows(sid, sub, metrics)
    else:
        if fold is None:
            held = [s for s in subjects if s.subject_id not in model.meta.get("subjects", ())]
        else:
            held = [subjects[i] for i in _split(manifest, subjects, seed, fold).new_shape]
        if not held:
            raise InvalidArgument("no held-out subjects for --split new-shape")
        for pcs in (args.sweep or [args.pcs]):
            per_pcs = {}
            for s in held:
                reg = register_new_subject(model, s, cfg, n_components=pcs)
                per_pcs[s.subject_id] = reg.metrics
                rows += _frame_rows(s.subject_id, s, reg.metrics, pcs=pcs)
            if args.sweep:
                print(f"pcs={pcs}: obs->model {summarize(per_pcs)['obs_to_model']:.3f} mm")
            per = per_pcs
    fields = (["pcs"] if args.split == "new-shape" else []) + ["subject", "frame", *METRIC_KEYS]
    _write_csv(args.out, rows, fields)
    if per:
        s = summarize(per)
        print(f"{args.split}: " + ", ".join(f"{k} {s[k]:.3f} mm" for k in METRIC_KEYS),
              file=sys.stderr if args.out in (None, "-") else sys.stdout)
    return EXIT_OK


def _svg_plot(path, x, ys: dict, xlabel, ylabel):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(4, 3))
    for label, y in ys.items():
        ax.plot(x, y, marker="o", label=label)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def cmd_export(args):
    model = aio.load_model(args.model)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    aio.save_obj(out / "mean_canonical.obj", model.vertices, model.faces)
    written = 1
    if args.fits:
        for sid, f in aio.load_fits(args.fits).items():
            aio.save_obj(out / f"{sid}_canonical.obj", f["canonical"], model.faces)
            posed, _ = forward_batch(model, f["canonical"], f["thetas"], f["transl"])
            for idx, V in zip(f["frames"], posed):
                aio.save_obj(out / f"{sid}_f{idx:04d}.obj", V, model.faces)
            written += 1 + len(posed)
    if args.metrics:
        rows = _read_csv(args.metrics)
        it = [int(r["iteration"]) for r in rows]
        _svg_plot(out / "error_vs_iteration.svg", it,
                  {k: [float(r[k]) for r in rows] for k in ("obs_to_model", "model_to_obs")},
                  "iteration", "median distance (mm)")
        written += 1
    if args.sweep:
        rows = _read_csv(args.sweep)
        pcs = sorted({int(r["pcs"]) for r in rows})
        err = [np.nanmean([float(r["obs_to_model"]) for r in rows if int(r["pcs"]) == p])
               for p in pcs]
        _svg_plot(out / "error_vs_pcs.svg", pcs, {"obs_to_model": err},
                  "number of shape PCs", "median distance (mm)")
        written += 1
    print(f"wrote {written} files to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def _int_list(text):
    try:
        return [int(t) for t in text.split(",") if t]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _fit_options(p, pcs_default=10):
    p.add_argument("--iters", type=int, default=3, help="outer coordinate-descent iterations")
    p.add_argument("--pcs", type=int, default=pcs_default, help="number of shape components")
    p.add_argument("--steps", type=int, default=None,
                   help="cap on Adam steps per stage (default: 2000 for initialization, 500 otherwise)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="articfit", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset directory")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--subjects", type=int, default=10)
    p.add_argument("--frames", type=int, default=40)
    p.add_argument("--noise", type=float, default=1.0, help="observation noise sigma (mm)")
    p.add_argument("--vertices", type=int, default=602)
    p.add_argument("--keypoints", type=int, default=10)
    p.add_argument("--latent", type=int, default=5, help="true shape-space dimension")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="learn a body model from a dataset directory")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="output model container")
    p.add_argument("--prior", help="prior model container (default: the dataset's)")
    p.add_argument("--seed", type=int, default=0, help="split seed")
    p.add_argument("--fold", type=int, default=None,
                   help="train on this fold's training part (default: all data)")
    p.add_argument("--metrics", help="per-iteration metrics CSV (default: <out>.metrics.csv)")
    p.add_argument("--fits", help="per-subject fits JSON (default: <out>.fits.json)")
    _fit_options(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("register", help="fit a trained model to one subject")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--subject", required=True)
    p.add_argument("--out", required=True, help="fits JSON")
    p.add_argument("--no-unpose", action="store_true", help="joint shape/pose baseline")
    _fit_options(p, pcs_default=None)
    p.set_defaults(func=cmd_register)

    p = sub.add_parser("measure", help="anthropometric measurements as CSV")
    p.add_argument("--model", required=True)
    p.add_argument("--fit", help="fits JSON; default measures the model mean shape")
    p.add_argument("--ga", help="CSV with columns id,ga to include gestational age")
    p.add_argument("--out", default="-")
    p.set_defaults(func=cmd_measure)

    p = sub.add_parser("eval", help="per-frame alignment errors on a split")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", required=True, choices=("train", "new-pose", "new-shape"))
    p.add_argument("--fits", help="fits JSON written by train")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--fold", type=int, default=None)
    p.add_argument("--sweep", type=_int_list, help="new-shape only: PC counts, e.g. 1,2,3,5,8")
    p.add_argument("--out", default="-")
    _fit_options(p, pcs_default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("export", help="meshes and SVG plots for external viewing")
    p.add_argument("--model", required=True)
    p.add_argument("--fits")
    p.add_argument("--metrics", help="metrics CSV from train")
    p.add_argument("--sweep", help="CSV from eval --split new-shape --sweep")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    from .pipeline import RegistrationFailed

    try:
        _threads()
        return args.func(args)
    except ConvergenceError as exc:
        print(f"articfit: convergence failure: {exc}", file=sys.stderr)
        return EXIT_CONVERGENCE
    except (InvalidArgument, RegistrationFailed, aio.ParseError, aio.VersionError,
            FileNotFoundError, KeyError, ValueError) as exc:
        print(f"articfit: bad input: {exc}", file=sys.stderr)
        return EXIT_BAD_INPUT


if __name__ == "__main__":
    sys.exit(main())
