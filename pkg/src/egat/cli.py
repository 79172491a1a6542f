"""``egat`` command line: gen, train, eval, explain, bound, replay.

Every command writes ``manifest.json`` into its output directory, recording
the argv, resolved configuration, seed, tool version, input/output digests
and wall time. ``egat replay MANIFEST`` re-executes the run single-threaded
and compares output digests.

Exit codes: 0 success, 1 replay digest mismatch, 2 usage/config error,
3 numerical failure, 4 I/O error.
"""
from __future__ import annotations

import argparse
import contextlib
import hashlib
import json
import os
import shutil
import sys
import tempfile
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .attacks import KINDS, AttackConfig, attack
from .data import DOMAINS, IMAGE_EXTS, DataError, background_shift_pairs, export_dataset, load_dataset, read_image, \
    split, synthetic_dataset
from .explain import input_saliency, save_heatmap
from .metrics import BASELINES, accuracy, estimate_bounds, evaluate, format_table, lemma1_check, linear_kappa_phi, \
    theorem1_terms, write_lemma1_csv, write_reports
from .model import CheckpointError, LinearClassifier, predict, read_checkpoint, save_checkpoint
from .train import NonFiniteLossError, TrainConfig, config_from_mapping, read_config, train, write_log

OUT_ENV = "EGAT_OUTPUT_ROOT"
MANIFEST = "manifest.json"
EXIT_OK, EXIT_MISMATCH, EXIT_USAGE, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3, 4


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# digests and manifests


def file_digest(path) -> str:
    path = Path(path)
    if path.name.endswith("train_log.csv"):
        # wall-clock column is the only nondeterministic field
        lines = path.read_text().splitlines()
        head = lines[0].split(",") if lines else []
        drop = head.index("wall_ms") if "wall_ms" in head else None
        norm = "\n".join(",".join(c for j, c in enumerate(l.split(",")) if j != drop) for l in lines)
        return hashlib.sha256(norm.encode()).hexdigest()
    return hashlib.sha256(path.read_bytes()).hexdigest()


def tree_digest(path) -> str:
    """Digest of a file, or of every file under a directory (names and contents)."""
    path = Path(path)
    if path.is_file():
        return file_digest(path)
    h = hashlib.sha256()
    for f in sorted(p for p in path.rglob("*") if p.is_file() and p.name != MANIFEST):
        h.update(str(f.relative_to(path)).encode() + b"\0" + file_digest(f).encode())
    return h.hexdigest()


def output_digests(out: Path) -> dict[str, str]:
    return {str(p.relative_to(out)): file_digest(p)
            for p in sorted(out.rglob("*")) if p.is_file() and p.name != MANIFEST}


def write_manifest(out: Path, command: str, argv: list[str], config: dict, seed, inputs: dict,
                   t0: float, threads: int | None) -> dict:
    man = {
        "command": command,
        "argv": list(argv),
        "cwd": os.getcwd(),
        "config": config,
        "seed": seed,
        "tool_version": __version__,
        "threads": threads,
        "inputs": {str(k): tree_digest(k) for k in inputs},
        "outputs": output_digests(out),
        "wall_time_s": round(time.time() - t0, 3),
    }
    (out / MANIFEST).write_text(json.dumps(man, indent=2, sort_keys=True) + "\n")
    return man


def prepare_out(args, command: str) -> Path:
    out = args.out
    if out is None:
        out = Path(os.environ.get(OUT_ENV, "runs")) / f"{command}-seed{args.seed}"
    out = Path(out)
    if out.exists() and any(out.iterdir()):
        if not args.force:
            raise UsageError(f"output directory {out} is not empty (use --force to overwrite)")
        shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)
    return out


@contextlib.contextmanager
def thread_limit(n: int | None):
    if n is None:
        yield
        return
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=n):
        yield


# ---------------------------------------------------------------------------
# argument types


def positive_int(s: str) -> int:
    v = int(s)
    if v <= 0:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {s}")
    return v


def nonneg_int(s: str) -> int:
    v = int(s)
    if v < 0:
        raise argparse.ArgumentTypeError(f"expected a nonnegative integer, got {s}")
    return v


def float_list(s: str) -> list[float]:
    try:
        vals = [float(t) for t in s.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {s!r}")
    if not vals or any(v < 0 for v in vals):
        raise argparse.ArgumentTypeError("epsilons must be nonnegative")
    return vals


def domain_list(s: str) -> list[str]:
    ds = [t.strip() for t in s.split(",") if t.strip()]
    bad = [d for d in ds if d not in DOMAINS]
    if not ds or bad:
        raise argparse.ArgumentTypeError(f"domains must be drawn from {','.join(DOMAINS)}")
    return ds


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out", type=Path, default=None,
                        help=f"output directory (default ${OUT_ENV}/<command>-seed<seed>)")
    common.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")
    common.add_argument("--threads", type=positive_int, default=None,
                        help="BLAS thread cap; 1 guarantees bit-reproducibility")
    common.add_argument("-q", "--quiet", action="store_true")

    p = argparse.ArgumentParser(prog="egat", description="Explanation-guided adversarial training lab")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", parents=[common], help="generate a synthetic object/background dataset")
    g.add_argument("--n", type=positive_int, required=True)
    g.add_argument("--classes", type=int, default=3)
    g.add_argument("--domains", type=domain_list, default=["flat", "stripes"])

    t = sub.add_parser("train", parents=[common], help="train ERM, IGR or EGAT")
    t.add_argument("--data", type=Path, required=True)
    t.add_argument("--config", type=Path, help="key=value or JSON config file; flags override it")
    t.add_argument("--objective", choices=("erm", "igr", "egat"))
    t.add_argument("--attack", choices=KINDS)
    t.add_argument("--eps", type=float)
    t.add_argument("--pgd-steps", type=positive_int)
    t.add_argument("--step-size", type=float)
    t.add_argument("--lr", type=float, dest="learning_rate")
    t.add_argument("--batch-size", type=positive_int)
    t.add_argument("--max-steps", type=nonneg_int)
    t.add_argument("--val-every", type=positive_int)
    for k in ("lambda1", "lambda2", "lambda3", "lambda4", "mixup-alpha", "igr-weight", "dropout-rate"):
        t.add_argument(f"--{k}", type=float)

    e = sub.add_parser("eval", parents=[common], help="accuracy / attack sweep / faithfulness report")
    e.add_argument("--ckpt", type=Path, required=True)
    e.add_argument("--data", type=Path, required=True)
    e.add_argument("--split", choices=("all", "train", "val", "test"), default="all")
    e.add_argument("--split-seed", type=int, default=None, help="defaults to the checkpoint's training seed")
    e.add_argument("--attack", choices=KINDS + ("none",), default="pgd")
    e.add_argument("--eps", type=float_list, default=[0.0])
    e.add_argument("--steps", type=positive_int, default=10)
    e.add_argument("--step-size", type=float, default=None)
    e.add_argument("--no-random-start", action="store_true")
    e.add_argument("--metric", default="acc", help="comma list from acc,comp,suff")
    e.add_argument("--k", type=float, default=0.2)
    e.add_argument("--baseline", choices=BASELINES, default="zero")
    e.add_argument("--ood", action="store_true", help="tag the report as out-of-distribution")

    x = sub.add_parser("explain", parents=[common], help="export Grad-CAM heatmaps")
    x.add_argument("--ckpt", type=Path, required=True)
    x.add_argument("--images", type=Path, nargs="+", required=True, help="image files or directories")
    x.add_argument("--class", dest="class_index", type=int, default=None, help="default: predicted class")
    x.add_argument("--attacked", choices=KINDS, default=None)
    x.add_argument("--eps", type=float, default=0.02)
    x.add_argument("--steps", type=positive_int, default=10)
    x.add_argument("--format", choices=("png", "ppm", "pgm"), default="png")

    b = sub.add_parser("bound", parents=[common], help="background-shift bound audit")
    b.add_argument("--ckpt", type=Path, required=True)
    b.add_argument("--data", type=Path, required=True)
    b.add_argument("--pairs", type=positive_int, default=500)
    b.add_argument("--shift-domain", choices=DOMAINS, default=None,
                   help="background for the shifted copy (default: first domain not in the dataset)")
    b.add_argument("--lipschitz-pairs", type=positive_int, default=10000)
    b.add_argument("--radius", type=float, default=0.02, help="per-pixel radius of perturbation pairs")
    b.add_argument("--kappa-phi-safety", type=float, default=10.0)
    b.add_argument("--n", type=positive_int, default=None, help="sample count for the bound (default: dataset size)")
    b.add_argument("--d", type=positive_int, default=None, help="input dimension (default: from data)")
    b.add_argument("--delta", type=float, default=0.05)
    b.add_argument("--alpha", type=float, default=1.0)

    r = sub.add_parser("replay", help="re-run a manifest single-threaded and compare digests")
    r.add_argument("manifest", type=Path)
    r.add_argument("--out", type=Path, default=None, help="replay directory (default: a temporary one)")
    r.add_argument("--keep", action="store_true", help="keep the temporary replay directory")
    return p


# ---------------------------------------------------------------------------
# commands


def _say(args, msg: str):
    if not getattr(args, "quiet", False):
        print(msg)


def _require(path: Path, what: str):
    if not path.exists():
        raise UsageError(f"{what} not found: {path}")


def cmd_gen(args, out: Path) -> tuple[dict, list]:
    ds = synthetic_dataset(args.n, args.classes, args.domains, args.seed)
    export_dataset(ds, out)
    _say(args, f"wrote {len(ds)} images ({args.classes} classes, domains {','.join(args.domains)}) to {out}")
    return {"n": args.n, "classes": args.classes, "domains": args.domains}, []


def train_config(args) -> TrainConfig:
    base = read_config(args.config) if args.config else TrainConfig()
    flags = {"objective": args.objective, "attack": args.attack, "eps": args.eps, "pgd_steps": args.pgd_steps,
             "step_size": args.step_size, "learning_rate": args.learning_rate, "batch_size": args.batch_size,
             "max_steps": args.max_steps, "val_every": args.val_every, "lambda1": args.lambda1,
             "lambda2": args.lambda2, "lambda3": args.lambda3, "lambda4": args.lambda4,
             "mixup_alpha": args.mixup_alpha, "igr_weight": args.igr_weight, "dropout_rate": args.dropout_rate}
    flags = {k: v for k, v in flags.items() if v is not None}
    cfg = config_from_mapping(flags, base)
    return replace(cfg, seed=args.seed, output_dir=str(args.out) if args.out else None)


def cmd_train(args, out: Path) -> tuple[dict, list]:
    _require(args.data, "dataset")
    cfg = train_config(args)
    ds = load_dataset(args.data)
    sp = split(ds, cfg.seed)

    def progress(row):
        if row["val_accuracy"] is not None:
            _say(args, f"step {row['step']:5d}  loss {row['total']:.4f}  val_acc {row['val_accuracy']:.4f}")

    try:
        res = train(cfg, sp, progress=progress)
    except NonFiniteLossError as err:
        (out / "nonfinite.json").write_text(json.dumps(err.dump(), indent=2) + "\n")
        raise
    for ck in (res.best,):
        ck.meta.update(train_domains=sorted(set(ds.domains or [])), split_seed=cfg.seed)
    save_checkpoint(res.best, out / "best.ckpt")
    last = res.best.__class__.from_model(res.final, cfg.max_steps, res.log[-1]["val_accuracy"] if res.log else
                                         res.best.val_accuracy, cfg.digest())
    last.meta.update(train_domains=sorted(set(ds.domains or [])), split_seed=cfg.seed)
    save_checkpoint(last, out / "last.ckpt")
    write_log(res.log, out / "train_log.csv")
    stable = {k: v for k, v in cfg.to_dict().items() if k != "output_dir"}
    (out / "config.json").write_text(json.dumps(stable, indent=2, sort_keys=True) + "\n")
    _say(args, f"best step {res.best.step} val_acc {res.best.val_accuracy:.4f}; "
               f"{res.clip_events} clipped steps; outputs in {out}")
    return cfg.to_dict(), [args.data] + ([args.config] if args.config else [])


def _load_model(ckpt_path: Path, num_classes: int | None = None):
    _require(ckpt_path, "checkpoint")
    ck = read_checkpoint(ckpt_path)
    if num_classes is not None and ck.meta["num_classes"] != num_classes:
        raise UsageError(f"checkpoint has {ck.meta['num_classes']} classes but the dataset has {num_classes}")
    return ck, ck.build_model()


def cmd_eval(args, out: Path) -> tuple[dict, list]:
    _require(args.data, "dataset")
    ds = load_dataset(args.data)
    ck, model = _load_model(args.ckpt, ds.num_classes)
    split_seed = args.split_seed if args.split_seed is not None else ck.meta.get("split_seed", args.seed)
    if args.split != "all":
        ds = getattr(split(ds, split_seed), args.split)
    metrics = [m.strip() for m in args.metric.split(",") if m.strip()]
    bad = [m for m in metrics if m not in ("acc", "comp", "suff")]
    if bad:
        raise UsageError(f"unknown metric(s) {bad}; choose from acc,comp,suff")
    if not 0 < args.k <= 1:
        raise UsageError("--k must lie in (0, 1]")
    train_domains = set(ck.meta.get("train_domains", []))
    ood = args.ood or bool(train_domains and ds.domains and not (set(ds.domains) & train_domains))
    reports = []
    for i, eps in enumerate(args.eps):
        cfg = None
        if args.attack != "none":
            cfg = AttackConfig(args.attack, eps, args.steps, args.step_size,
                               random_start=not args.no_random_start, seed=args.seed)
        want = metrics if i == 0 else [m for m in metrics if m == "acc"]
        reports.append(evaluate(model, ds.images, ds.labels, cfg, want, args.k, args.baseline, ood))
    write_reports(reports, out / "report.json", out / "report.txt")
    _say(args, (out / "report.txt").read_text().rstrip())
    conf = {"split": args.split, "split_seed": split_seed, "attack": args.attack, "eps": args.eps,
            "steps": args.steps, "step_size": args.step_size, "random_start": not args.no_random_start,
            "metrics": metrics, "k": args.k, "baseline": args.baseline, "ood": ood}
    return conf, [args.ckpt, args.data]


def _collect_images(paths) -> list[Path]:
    files = []
    for p in paths:
        if p.is_dir():
            files += sorted(f for f in p.rglob("*") if f.suffix.lower() in IMAGE_EXTS)
        else:
            files.append(p)
    return files


def cmd_explain(args, out: Path) -> tuple[dict, list]:
    _, model = _load_model(args.ckpt)
    if getattr(model, "tap_name", None) is None:
        raise UsageError("checkpoint has no convolutional tap; Grad-CAM needs the conv classifier")
    files = _collect_images(args.images)
    if not files:
        raise UsageError("no images found")
    failures, written = [], 0
    for k, f in enumerate(files):
        try:
            x = read_image(f)
        except (DataError, OSError) as err:
            print(f"error: {f}: {err}", file=sys.stderr)
            failures.append(str(f))
            continue
        c = args.class_index if args.class_index is not None else int(predict(model, x).argmax())
        stem = f"{k:04d}_{f.stem}"
        save_heatmap(input_saliency(model, x[None], [c])[0], out / f"{stem}_clean.{args.format}")
        written += 1
        if args.attacked:
            xa = attack(model, x, c, AttackConfig(args.attacked, args.eps, args.steps, random_start=False,
                                                  seed=args.seed))
            save_heatmap(input_saliency(model, xa[None], [c])[0], out / f"{stem}_{args.attacked}.{args.format}")
            written += 1
    _say(args, f"wrote {written} heatmaps to {out}")
    if failures:
        raise OSError(f"{len(failures)} unreadable image(s): {', '.join(failures)}")
    conf = {"class": args.class_index, "attacked": args.attacked, "eps": args.eps, "steps": args.steps,
            "format": args.format, "images": [str(f) for f in files]}
    return conf, [args.ckpt] + files


def cmd_bound(args, out: Path) -> tuple[dict, list]:
    _require(args.data, "dataset")
    ds = load_dataset(args.data)
    if ds.masks is None or not ds.meta.get("synthetic"):
        raise UsageError("the bound audit needs a synthetic dataset with object masks "
                         "(generate one with `egat gen`)")
    ck, model = _load_model(args.ckpt, ds.num_classes)
    shift = args.shift_domain or next((d for d in DOMAINS if d not in set(ds.domains)), DOMAINS[0])
    pairs = background_shift_pairs(ds, shift, args.pairs, args.seed)
    est = estimate_bounds(model, ds.images, ds.labels, ds.masks, args.lipschitz_pairs, args.seed, args.radius)
    if isinstance(model, LinearClassifier):
        kappa_phi, source = linear_kappa_phi(model.params["fc.w"].data), "closed_form"
    else:
        kappa_phi, source = args.kappa_phi_safety * est.kappa_phi, "estimate_x_safety"
    res = lemma1_check(model, pairs, kappa_phi)
    est.lemma1_lhs, est.lemma1_rhs, est.bg_shift_norm, est.satisfied = res.lhs, res.rhs, res.bg_shift_norm, \
        res.satisfied
    est.kappa_phi_safety = args.kappa_phi_safety
    write_lemma1_csv(res, out / "lemma1.csv")
    d = args.d or int(np.prod(ds.images.shape[1:]))
    n = args.n or len(ds)
    adv_err = 1.0 - accuracy(model, ds.images, ds.labels,
                             AttackConfig("pgd", 0.02, 10, random_start=True, seed=args.seed)) \
        if getattr(model, "tap_name", None) else None
    summary = {**est.summary(), "kappa_phi_used": kappa_phi, "kappa_phi_source": source, "shift_domain": shift,
               "failures": res.failures().tolist(),
               "theorem": theorem1_terms(est.kappa_f, est.kappa_phi, d, n, args.delta, adv_err, args.alpha, est.G)}
    (out / "bound.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    rows = [{"quantity": k, "value": v} for k, v in
            [("kappa_f", est.kappa_f), ("kappa_phi", est.kappa_phi), ("kappa_phi_used", kappa_phi),
             ("kappa_bg", est.kappa_bg), ("G", est.G), ("satisfaction_rate", res.rate),
             ("headline_term", summary["theorem"]["headline_term"])]]
    (out / "bound.txt").write_text(format_table(rows, ("quantity", "value")))
    _say(args, (out / "bound.txt").read_text().rstrip())
    conf = {"pairs": args.pairs, "shift_domain": shift, "lipschitz_pairs": args.lipschitz_pairs,
            "radius": args.radius, "kappa_phi_safety": args.kappa_phi_safety, "n": n, "d": d,
            "delta": args.delta, "alpha": args.alpha}
    return conf, [args.ckpt, args.data]


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "explain": cmd_explain, "bound": cmd_bound}


def _replace_out(argv: list[str], out: Path) -> list[str]:
    argv = list(argv)
    for i, a in enumerate(argv):
        if a == "--out" and i + 1 < len(argv):
            argv[i + 1] = str(out)
            break
        if a.startswith("--out="):
            argv[i] = f"--out={out}"
            break
    else:
        argv += ["--out", str(out)]
    for flag in ("--threads",):
        if flag in argv:
            j = argv.index(flag)
            del argv[j:j + 2]
    return argv + ["--threads", "1", "--force"]


def cmd_replay(args) -> int:
    man = json.loads(args.manifest.read_text())
    tmp = None
    out = args.out
    if out is None:
        tmp = Path(tempfile.mkdtemp(prefix="egat-replay-"))
        out = tmp / "out"
    out = Path(out).resolve()
    argv = _replace_out(man["argv"], out)
    prev = os.getcwd()
    try:
        os.chdir(man.get("cwd", prev))
        for path, dig in man["inputs"].items():
            if Path(path).exists() and tree_digest(path) != dig:
                print(f"input changed since the original run: {path}", file=sys.stderr)
                return EXIT_MISMATCH
        code = main(argv)
    finally:
        os.chdir(prev)
    if code != EXIT_OK:
        return code
    new = json.loads((out / MANIFEST).read_text())
    ok = True
    for name in sorted(set(man["outputs"]) | set(new["outputs"])):
        a, b = man["outputs"].get(name), new["outputs"].get(name)
        same = a == b
        ok &= same
        print(f"{'same' if same else 'DIFF'}  {name}")
    if tmp is not None and not args.keep:
        shutil.rmtree(tmp, ignore_errors=True)
    print("replay: identical digests" if ok else "replay: digests differ")
    return EXIT_OK if ok else EXIT_MISMATCH


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    if args.command == "replay":
        try:
            return cmd_replay(args)
        except (OSError, ValueError, KeyError) as err:
            print(f"error: cannot replay {args.manifest}: {err}", file=sys.stderr)
            return EXIT_IO
    t0 = time.time()
    try:
        out = prepare_out(args, args.command)
        with thread_limit(args.threads):
            conf, inputs = COMMANDS[args.command](args, out)
        write_manifest(out, args.command, argv, conf, args.seed, inputs, t0, args.threads)
    except UsageError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except NonFiniteLossError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    except FloatingPointError as err:
        print(f"numerical error: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, DataError, CheckpointError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as err:
        print(f"I/O error: {err}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
