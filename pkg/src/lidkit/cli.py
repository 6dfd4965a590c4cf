"""Command-line entry point: ``lidkit <command> [options]``."""

from __future__ import annotations

import argparse
import json
import sys
import warnings
from dataclasses import asdict, replace
from pathlib import Path

from lidkit import __version__
from lidkit.data import (LanguageList, LidError, labels_from_manifest, load_model, read_manifest,
                         read_scores, save_model, write_scores)
from lidkit.pipeline import PipelineConfig, StageError, stage


def _emit(args, obj: dict, text: str) -> None:
    if args.json:
        print(json.dumps(obj, indent=1, sort_keys=True))
    else:
        print(text)


def _out_dir(args, default: str = ".") -> Path:
    out = Path(args.out_dir or default)
    out.mkdir(parents=True, exist_ok=True)
    return out


_BACKEND_FLAGS = ("use_lda", "lda_dim", "lda_shrinkage", "l2_lambda", "rebalance", "max_iter", "tol", "order")


def _config(args) -> PipelineConfig:
    with stage("config"):
        cfg = PipelineConfig.load(args.config) if args.config else PipelineConfig()
        if args.seed is not None:
            cfg = replace(cfg, seed=args.seed)
        if getattr(args, "languages", None):
            cfg = replace(cfg, languages=LanguageList(s.strip() for s in args.languages.split(",")))
        overrides = {k: getattr(args, k) for k in _BACKEND_FLAGS if getattr(args, k, None) is not None}
        if "lda_dim" in overrides:
            overrides.setdefault("use_lda", True)
        if overrides:
            cfg = replace(cfg, backend=replace(cfg.backend, **overrides))
    return cfg


def _need_languages(cfg: PipelineConfig) -> LanguageList:
    if cfg.languages is None:
        raise StageError("config", "no language list; pass --languages or set \"languages\" in --config")
    return cfg.languages


def _outputs(command: str, files, summary: dict | None = None) -> dict:
    obj = {"command": command, "outputs": [str(f) for f in files]}
    if summary is not None:
        obj["summary"] = summary
    return obj


# -- subcommands ---------------------------------------------------------------

def cmd_train_backend(args) -> None:
    from lidkit.backend import TrainReport, train_backend
    from lidkit.pipeline import capped_backend_config, load_split

    cfg = _config(args)
    languages = _need_languages(cfg)
    backend_cfg = cfg.backend
    with stage("load-train"):
        train = load_split(args.train, languages, args.embeddings)
    with stage("train-backend"):
        backend_cfg = capped_backend_config(backend_cfg, len(languages))
        rep = TrainReport()
        model = train_backend(train, languages, backend_cfg, rep)
        path = Path(args.model) if args.model else _out_dir(args) / "backend.json"
        save_model(model, path)
    summary = {"stages": rep.stages, "converged": rep.fit.converged, "iterations": rep.fit.n_iter,
               "loss": rep.fit.loss, "dim": model.dim}
    _emit(args, _outputs("train-backend", [path], summary),
          f"wrote {path} ({' -> '.join(rep.stages)}; {rep.fit.n_iter} iterations, loss {rep.fit.loss:.6g})")


def cmd_score(args) -> None:
    from lidkit.backend import score
    from lidkit.pipeline import load_split

    with stage("load-model"):
        model = load_model(args.model)
    with stage("score"):
        emb = load_split(args.manifest, model.languages, args.embeddings)
        sm = score(model, emb)
        path = Path(args.output) if args.output else _out_dir(args) / "scores.tsv"
        write_scores(path, sm)
    _emit(args, _outputs("score", [path], {"n": sm.n, "k": sm.k}), f"wrote {path} ({sm.n} x {sm.k})")


def _labels_for(path, languages: LanguageList):
    return labels_from_manifest(read_manifest(path, languages), languages)


def _train_or_apply_fusion(args, command: str) -> None:
    from lidkit.fusion import fuse_scores, train_fusion

    cfg = _config(args)
    with stage("load-scores"):
        systems = [read_scores(p) for p in args.scores]
    out = _out_dir(args)
    files = []
    summary = {}
    with stage(command):
        if args.model and not args.labels:
            model = load_model(args.model)
        else:
            if not args.labels:
                raise LidError("--labels is required to train (or pass --model to apply one)")
            labels = _labels_for(args.labels, systems[0].languages)
            result = train_fusion(systems, labels, cfg.fusion)
            model = result.model
            path = Path(args.model) if args.model else out / f"{'calibration' if command == 'calibrate' else 'fusion'}.json"
            save_model(model, path)
            files.append(path)
            summary = {"cllr_before": result.cllr_before, "cllr_after": result.cllr_after,
                       "status": result.optimizer.status, "alphas": model.alphas.tolist(),
                       "betas": model.betas.tolist()}
        apply_to = args.apply or (args.scores if args.output else None)
        if apply_to:
            targets = [read_scores(p) for p in apply_to]
            fused = fuse_scores(model, targets)
            path = Path(args.output) if args.output else out / f"{command}_scores.tsv"
            write_scores(path, fused)
            files.append(path)
    text = [f"wrote {f}" for f in files]
    if summary:
        text.insert(0, f"dev Cllr {summary['cllr_before']:.4f} -> {summary['cllr_after']:.4f} bits")
    _emit(args, _outputs(command, files, summary), "\n".join(text))


def cmd_calibrate(args) -> None:
    if len(args.scores) != 1:
        raise StageError("calibrate", "calibrate takes exactly one score file; use fuse for several")
    _train_or_apply_fusion(args, "calibrate")


def cmd_fuse(args) -> None:
    _train_or_apply_fusion(args, "fuse")


def cmd_evaluate(args) -> None:
    from lidkit.metrics import evaluate, expand_trials, format_table

    cfg = _config(args)
    with stage("evaluate"):
        sm = read_scores(args.scores)
        labels = _labels_for(args.labels, sm.languages)
        p = args.p_target if args.p_target is not None else cfg.metrics.p_target
        thr = cfg.metrics.threshold
        report = evaluate(sm, labels, p, thr)
        if args.out_dir:
            from lidkit.plotting import plot_llr_histogram
            out = _out_dir(args)
            (out / "report.json").write_text(report.to_json() + "\n", encoding="utf-8")
            llr, is_tar = expand_trials(sm, labels, p).pooled
            plot_llr_histogram(llr[is_tar], llr[~is_tar], out / "llr_hist.png", threshold=thr)
    _emit(args, report.to_dict(), format_table([(Path(args.scores).stem, report)]))


def cmd_gradcheck(args) -> None:
    from lidkit.gradcheck import CASES, run_gradchecks

    names = args.only.split(",") if args.only else None
    if names:
        bad = [n for n in names if n not in CASES]
        if bad:
            raise StageError("gradcheck", f"unknown check(s) {bad}; choose from {list(CASES)}")
    seed = 0 if args.seed is None else args.seed
    with stage("gradcheck"):
        rows = run_gradchecks(args.instances, seed, args.tol, names)
    ok = all(r.passed for r in rows)
    obj = {"step": 1e-5, "tolerance": args.tol, "passed": ok, "checks": [r.to_dict() for r in rows]}
    lines = [f"{'check':<16} {'n':>4} {'max rel err':>12} {'strict':>10}  result"]
    lines += [f"{r.name:<16} {r.instances:>4} {r.max_rel_error:12.3e} {r.max_rel_error_strict:10.3e}  "
              f"{'PASS' if r.passed else 'FAIL'}" for r in rows]
    _emit(args, obj, "\n".join(lines))
    if not ok:
        raise StageError("gradcheck", "analytic and numeric gradients disagree")


def _synthetic_spec(args, seed: int):
    from lidkit.synthetic import SyntheticSpec

    with stage("config"):
        return SyntheticSpec(n_languages=args.n_languages, dim=args.dim, per_class_count=args.pool,
                             class_separation=args.separation, noise_scale=args.noise, seed=seed)


def cmd_fewshot(args) -> None:
    from lidkit.pipeline import format_fewshot, run_fewshot_experiment, write_fewshot

    cfg = _config(args)
    spec = _synthetic_spec(args, cfg.seed)
    with stage("fewshot"):
        try:
            sizes = [int(s) for s in args.sizes.split(",")]
        except ValueError:
            raise LidError(f"bad --sizes {args.sizes!r}; expected comma-separated integers") from None
        rows = run_fewshot_experiment(spec, sizes, n_seeds=args.seeds, test_count=args.test_count,
                                      backend=cfg.backend)
        files = write_fewshot(rows, _out_dir(args), figures=not args.no_figures) if args.out_dir else []
    obj = {"spec": asdict(spec), "rows": [asdict(r) for r in rows]}
    text = format_fewshot(rows)
    if files:
        text += "\n" + "\n".join(f"wrote {Path(args.out_dir) / f}" for f in files)
    _emit(args, obj, text)


def cmd_synth(args) -> None:
    from lidkit.pipeline import synthetic_splits, write_split

    cfg = _config(args)
    spec = _synthetic_spec(args, cfg.seed)
    out = _out_dir(args)
    with stage("synth"):
        splits = synthetic_splits(spec, args.train_count, args.dev_count, args.test_count)
        files = [write_split(out, name, emb, spec.languages) for name, emb in zip(("train", "dev", "test"), splits)]
        conf = out / "config.json"
        conf.write_text(json.dumps({"languages": list(spec.languages), "seed": cfg.seed}, indent=1) + "\n",
                        encoding="utf-8")
    listing = [conf] + [p for f in files for p in (f, f.with_suffix(".emb"))]
    _emit(args, _outputs("synth", listing), "\n".join(f"wrote {p}" for p in listing))


def cmd_pipeline(args) -> None:
    from lidkit.metrics import format_table
    from lidkit.pipeline import run_pipeline

    cfg = _config(args)
    _need_languages(cfg)
    if not args.out_dir:
        raise StageError("config", "pipeline needs --out-dir")
    result = run_pipeline(cfg, args.train, args.dev, args.test, args.out_dir, figures=not args.no_figures)
    if args.json:
        print(Path(args.out_dir, "report.json").read_text(encoding="utf-8"), end="")
    else:
        print(f"stages: {' -> '.join(result.stages)}")
        print(format_table([("dev", result.dev_report), ("test", result.report)]))
        print(f"wrote {len(result.files)} files to {args.out_dir}")


def cmd_augment(args) -> None:
    from lidkit.audio import read_wav, write_wav
    from lidkit.augment import AugmentResources, augmix, plan_log_line, sample_plan, utterance_seed

    cfg = _config(args)
    acfg = cfg.augment
    if args.rir_dir or args.noise_dir:
        acfg = replace(acfg, rir_dir=args.rir_dir or acfg.rir_dir, noise_dir=args.noise_dir or acfg.noise_dir)
    if args.transforms:
        with stage("config"):
            acfg = type(acfg).from_dict({**acfg.to_dict(), "transforms": args.transforms.split(",")})
    out = _out_dir(args, "augmented")
    with stage("augment"):
        utts = read_manifest(args.manifest, cfg.languages)
        resources = AugmentResources.from_config(acfg)
        base = Path(args.manifest).parent
        log_lines = []
        for u in utts:
            if u.audio_path is None:
                raise LidError(f"utterance {u.id!r} has no audio path")
            src = Path(u.audio_path)
            if not src.is_absolute():
                src = base / src
            x = read_wav(src, acfg.sample_rate)
            for copy in range(args.copies):
                key = u.id if args.copies == 1 else f"{u.id}#{copy}"
                plan = sample_plan(acfg, utterance_seed(cfg.seed, key), resources)
                y = augmix(x, plan, resources)
                name = f"{u.id}.wav" if args.copies == 1 else f"{u.id}_aug{copy}.wav"
                write_wav(out / name, y)
                log_lines.append(plan_log_line(key, name, plan))
        log = out / "plans.jsonl"
        log.write_text("\n".join(log_lines) + "\n", encoding="utf-8")
    _emit(args, _outputs("augment", [log], {"utterances": len(utts), "files": len(log_lines)}),
          f"augmented {len(utts)} utterances into {out} ({len(log_lines)} files; plans in {log})")


# -- parser --------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="pipeline config JSON (languages, backend, fusion, augment, metrics, seed)")
    common.add_argument("--seed", type=int, default=None, help="RNG seed (overrides the config)")
    common.add_argument("--out-dir", default=None, help="directory for output files")
    common.add_argument("--json", action="store_true", help="print machine-readable JSON instead of text")

    backend = argparse.ArgumentParser(add_help=False)
    g = backend.add_argument_group("backend options (override the config)")
    g.add_argument("--lda", dest="use_lda", action=argparse.BooleanOptionalAction, default=None,
                   help="project with LDA before the classifier")
    g.add_argument("--lda-dim", type=int, help="LDA output dimension (implies --lda; capped at K-1)")
    g.add_argument("--lda-shrinkage", type=float, help="trace-scaled shrinkage of the within-class scatter")
    g.add_argument("--l2-lambda", type=float, help="L2 penalty on the classifier weights")
    g.add_argument("--rebalance", action=argparse.BooleanOptionalAction, default=None,
                   help="weight classes inversely to their training counts")
    g.add_argument("--max-iter", type=int, help="optimizer iteration limit")
    g.add_argument("--tol", type=float, help="gradient infinity-norm stopping tolerance")
    g.add_argument("--order", choices=["norm_center", "center_norm"], help="length-normalize before or after centering")

    parser = argparse.ArgumentParser(prog="lidkit", description="Language-ID backend, calibration and evaluation tools.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("augment", parents=[common], help="AugMix-style reverb/noise/speed augmentation of WAV files")
    p.add_argument("manifest", help="JSONL manifest with an 'audio' path per line")
    p.add_argument("--rir-dir", help="directory of room impulse response WAVs")
    p.add_argument("--noise-dir", help="directory of noise WAVs")
    p.add_argument("--transforms", help="comma-separated subset of reverb,noise,speed")
    p.add_argument("--copies", type=int, default=1, help="augmented copies per utterance")
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("train-backend", parents=[common, backend], help="train normalize/center/[LDA]/multinomial backend")
    p.add_argument("train", help="training manifest (embeddings in the sidecar .emb file)")
    p.add_argument("--embeddings", help="embedding file (default: manifest path with .emb suffix)")
    p.add_argument("--languages", help="comma-separated language list (overrides the config)")
    p.add_argument("--model", help="output model path (default: OUT_DIR/backend.json)")
    p.set_defaults(func=cmd_train_backend)

    p = sub.add_parser("score", parents=[common], help="score embeddings with a backend model")
    p.add_argument("model", help="backend model JSON")
    p.add_argument("manifest", help="manifest of the utterances to score")
    p.add_argument("--embeddings", help="embedding file (default: manifest path with .emb suffix)")
    p.add_argument("--output", help="score TSV path (default: OUT_DIR/scores.tsv)")
    p.set_defaults(func=cmd_score)

    for name, help_text, nargs in (("calibrate", "train or apply a single-system affine calibration", 1),
                                   ("fuse", "train or apply a linear fusion of several systems", "+")):
        p = sub.add_parser(name, parents=[common], help=help_text)
        p.add_argument("scores", nargs=nargs, help="score TSV file(s), one per system")
        p.add_argument("--labels", help="labeled dev manifest; when given, a model is trained")
        p.add_argument("--model", help="model path to write (training) or read (applying)")
        p.add_argument("--apply", nargs="+", help="score file(s) to transform with the model")
        p.add_argument("--output", help="output TSV for transformed scores")
        p.set_defaults(func=cmd_calibrate if name == "calibrate" else cmd_fuse)

    p = sub.add_parser("evaluate", parents=[common], help="Cavg, minCavg, EER, Cllr and accuracy")
    p.add_argument("scores", help="score TSV")
    p.add_argument("labels", help="labeled manifest")
    p.add_argument("--p-target", type=float, default=None, help="target prior (default 0.5)")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("gradcheck", parents=[common], help="analytic vs central-difference gradient checks")
    p.add_argument("--instances", type=int, default=20, help="random instances per objective")
    p.add_argument("--tol", type=float, default=1e-6, help="max relative error allowed")
    p.add_argument("--only", help="comma-separated subset of checks")
    p.set_defaults(func=cmd_gradcheck)

    def synth_args(p, pool_default):
        p.add_argument("--n-languages", type=int, default=13)
        p.add_argument("--dim", type=int, default=64)
        p.add_argument("--separation", type=float, default=4.0, help="norm of each class mean")
        p.add_argument("--noise", type=float, default=1.0, help="RMS norm of the noise vector")
        p.add_argument("--pool", type=int, default=pool_default, help="utterances per language in the pool")

    p = sub.add_parser("fewshot", parents=[common], help="synthetic enrollment-size experiment")
    p.add_argument("--sizes", default="1,2,5,10,20,50,100", help="comma-separated utterances per language")
    p.add_argument("--seeds", type=int, default=5, help="number of generator seeds to average")
    p.add_argument("--test-count", type=int, default=200, help="held-out utterances per language")
    p.add_argument("--no-figures", action="store_true")
    synth_args(p, 100)
    p.set_defaults(func=cmd_fewshot)

    p = sub.add_parser("synth", parents=[common], help="write synthetic train/dev/test manifests and embeddings")
    p.add_argument("--train-count", type=int, default=100)
    p.add_argument("--dev-count", type=int, default=50)
    p.add_argument("--test-count", type=int, default=200)
    synth_args(p, 100)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("pipeline", parents=[common, backend], help="train, calibrate and evaluate end to end")
    p.add_argument("train", help="training manifest")
    p.add_argument("dev", help="development manifest (calibration)")
    p.add_argument("test", help="test manifest (evaluation)")
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_pipeline)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    rc = 0
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        try:
            args.func(args)
        except StageError as e:
            print(f"error: {e}", file=sys.stderr)
            rc = 1
        except (LidError, OSError) as e:
            print(f"error: [{args.command}] {e}", file=sys.stderr)
            rc = 1
    seen = set()
    for w in caught:
        msg = str(w.message)
        if msg not in seen:
            seen.add(msg)
            print(f"warning: {msg}", file=sys.stderr)
    return rc


if __name__ == "__main__":
    sys.exit(main())
