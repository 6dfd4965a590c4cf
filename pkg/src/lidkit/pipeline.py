"""Pipeline configuration, end-to-end runner and the synthetic few-shot experiment."""

from __future__ import annotations

import contextlib
import hashlib
import json
import warnings
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from lidkit.augment import AugmentConfig
from lidkit.backend import BackendConfig, BackendWarning, TrainReport, score, train_backend
from lidkit.data import (EmbeddingSet, LanguageList, LidError, TrialLabels, Utterance,
                         read_embeddings, read_manifest, save_model, write_embeddings,
                         write_manifest, write_scores)
from lidkit.fusion import calibrate_system, fuse_scores
from lidkit.metrics import MetricReport, evaluate, expand_trials, format_table
from lidkit.optim import OptimizerConfig
from lidkit.synthetic import SyntheticGenerator, SyntheticSpec


class StageError(LidError):
    """An error raised inside a named pipeline stage."""

    def __init__(self, stage: str, cause):
        self.stage = stage
        self.cause = cause
        super().__init__(f"[{stage}] {cause}")


@contextlib.contextmanager
def stage(name: str):
    """Re-raise library and I/O errors with the stage name attached."""
    try:
        yield
    except StageError:
        raise
    except (LidError, OSError, ValueError, KeyError) as e:
        raise StageError(name, e) from e


def _sub_config(cls, obj, what: str):
    if obj is None:
        return cls()
    if isinstance(obj, cls):
        return obj
    if not isinstance(obj, dict):
        raise LidError(f"{what} config must be an object")
    if hasattr(cls, "from_dict"):
        return cls.from_dict(obj)
    unknown = set(obj) - {f.name for f in fields(cls)}
    if unknown:
        raise LidError(f"unknown {what} config key(s): {sorted(unknown)}")
    return cls(**obj)


@dataclass(frozen=True)
class MetricConfig:
    p_target: float = 0.5
    threshold: float = 0.0

    def __post_init__(self):
        if not 0.0 < self.p_target < 1.0:
            raise LidError(f"p_target must be in (0, 1), got {self.p_target}")


@dataclass(frozen=True)
class PipelineConfig:
    languages: LanguageList | None = None
    backend: BackendConfig = field(default_factory=BackendConfig)
    fusion: OptimizerConfig = field(default_factory=OptimizerConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    metrics: MetricConfig = field(default_factory=MetricConfig)
    seed: int = 0

    @classmethod
    def from_dict(cls, obj: dict) -> PipelineConfig:
        if not isinstance(obj, dict):
            raise LidError("config must be a JSON object")
        unknown = set(obj) - {f.name for f in fields(cls)}
        if unknown:
            raise LidError(f"unknown config key(s): {sorted(unknown)}")
        langs = obj.get("languages")
        return cls(
            languages=LanguageList(langs) if langs is not None else None,
            backend=_sub_config(BackendConfig, obj.get("backend"), "backend"),
            fusion=_sub_config(OptimizerConfig, obj.get("fusion"), "fusion"),
            augment=_sub_config(AugmentConfig, obj.get("augment"), "augment"),
            metrics=_sub_config(MetricConfig, obj.get("metrics"), "metrics"),
            seed=int(obj.get("seed", 0)),
        )

    @classmethod
    def load(cls, path) -> PipelineConfig:
        try:
            with open(path, encoding="utf-8") as f:
                obj = json.load(f)
        except json.JSONDecodeError as e:
            raise LidError(f"{path}: malformed config ({e.msg})") from None
        return cls.from_dict(obj)

    def to_dict(self) -> dict:
        return {
            "languages": list(self.languages) if self.languages is not None else None,
            "backend": asdict(self.backend),
            "fusion": asdict(self.fusion),
            "augment": self.augment.to_dict(),
            "metrics": asdict(self.metrics),
            "seed": self.seed,
        }


def capped_backend_config(cfg: BackendConfig, n_languages: int) -> BackendConfig:
    """Cap the LDA dimension at K-1, warning when the request is larger."""
    limit = n_languages - 1
    if cfg.use_lda and cfg.lda_dim > limit:
        warnings.warn(f"requested LDA dimension {cfg.lda_dim} exceeds K-1 = {limit} "
                      f"for {n_languages} languages; using {limit}", BackendWarning, stacklevel=2)
        return replace(cfg, lda_dim=limit)
    return cfg


def labels_of(emb: EmbeddingSet, languages: LanguageList) -> TrialLabels:
    if emb.labels is None:
        raise LidError("embedding set has no labels")
    return TrialLabels(ids=emb.ids, true_lang=emb.labels, languages=languages)


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n", encoding="utf-8")


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


@dataclass
class PipelineResult:
    report: MetricReport
    dev_report: MetricReport
    stages: list[str]
    files: list[str]
    warnings: list[str]


def run_pipeline_sets(config: PipelineConfig, train: EmbeddingSet, dev: EmbeddingSet,
                      test: EmbeddingSet, out_dir, figures: bool = True) -> PipelineResult:
    """Train the backend on ``train``, calibrate on ``dev``, evaluate on ``test``.

    Writes the models, calibrated test scores, metric reports, a figure and a
    MANIFEST.json listing every produced file with its sha256.
    """
    if config.languages is None:
        raise StageError("config", "no language list in config")
    languages = config.languages
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stages: list[str] = []
    caught: list[str] = []

    with warnings.catch_warnings(record=True) as wlist:
        warnings.simplefilter("always")
        with stage("train-backend"):
            backend_cfg = capped_backend_config(config.backend, len(languages))
            rep = TrainReport()
            model = train_backend(train, languages, backend_cfg, rep)
            stages.extend(rep.stages)
        with stage("score"):
            dev_scores = score(model, dev)
            test_scores = score(model, test)
            dev_labels = labels_of(dev, languages)
            test_labels = labels_of(test, languages)
        with stage("calibrate"):
            calib = calibrate_system(dev_scores, dev_labels, config.fusion)
            stages.append("calibrate")
            test_cal = fuse_scores(calib.model, [test_scores])
            dev_cal = fuse_scores(calib.model, [dev_scores])
        with stage("evaluate"):
            p, thr = config.metrics.p_target, config.metrics.threshold
            report = evaluate(test_cal, test_labels, p, thr)
            dev_report = evaluate(dev_cal, dev_labels, p, thr)
            stages.append("evaluate")
        recorded = list(wlist)
    for w in recorded:
        caught.append(str(w.message))
        warnings.warn(w.message, w.category, stacklevel=2)

    with stage("write"):
        files = []

        def emit(name: str):
            files.append(name)
            return out / name

        save_model(model, emit("backend.json"))
        save_model(calib.model, emit("calibration.json"))
        write_scores(emit("test_scores.tsv"), test_cal)
        _write_json(emit("report.json"), {
            "test": report.to_dict(),
            "dev": dev_report.to_dict(),
            "dev_cllr_uncalibrated": calib.cllr_before,
            "dev_cllr_calibrated": calib.cllr_after,
            "stages": stages,
            "warnings": caught,
            "config": config.to_dict(),
        })
        emit("report.txt").write_text(format_table([("dev", dev_report), ("test", report)]) + "\n",
                                      encoding="utf-8")
        if figures:
            from lidkit.plotting import plot_llr_histogram
            llr, is_tar = expand_trials(test_cal, test_labels, p).pooled
            plot_llr_histogram(llr[is_tar], llr[~is_tar], emit("test_llr_hist.png"),
                               title="test, calibrated", threshold=thr)
        _write_json(out / "MANIFEST.json", {
            "stages": stages,
            "files": [{"path": name, "sha256": _sha256(out / name)} for name in files],
        })
        files.append("MANIFEST.json")
    return PipelineResult(report=report, dev_report=dev_report, stages=stages, files=files, warnings=caught)


def sidecar_embeddings(manifest_path) -> Path:
    """Default embedding file for a manifest: same path with suffix ``.emb``."""
    return Path(manifest_path).with_suffix(".emb")


def load_split(manifest_path, languages: LanguageList, emb_path=None) -> EmbeddingSet:
    utts = read_manifest(manifest_path, languages)
    return read_embeddings(emb_path or sidecar_embeddings(manifest_path), utts)


def run_pipeline(config: PipelineConfig, train_manifest, dev_manifest, test_manifest, out_dir,
                 figures: bool = True) -> PipelineResult:
    if config.languages is None:
        raise StageError("config", "no language list in config")
    sets = []
    for name, path in (("train", train_manifest), ("dev", dev_manifest), ("test", test_manifest)):
        with stage(f"load-{name}"):
            sets.append(load_split(path, config.languages))
    return run_pipeline_sets(config, *sets, out_dir, figures=figures)


# -- synthetic data ------------------------------------------------------------

def synthetic_splits(spec: SyntheticSpec, train_count: int, dev_count: int, test_count: int):
    """Train/dev/test EmbeddingSets from one class geometry, disjoint RNG streams."""
    gen = SyntheticGenerator(spec)
    out = []
    for i, (prefix, n) in enumerate((("train", train_count), ("dev", dev_count), ("test", test_count))):
        rng = np.random.default_rng([spec.seed, 100 + i])
        out.append(gen.sample(n, rng, prefix=f"{prefix}-"))
    return tuple(out)


def write_split(directory, name: str, emb: EmbeddingSet, languages: LanguageList) -> Path:
    """Write ``name.jsonl`` and its sidecar ``name.emb``; returns the manifest path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / f"{name}.jsonl"
    labels = emb.labels if emb.labels is not None else [None] * emb.n
    utts = [Utterance(id=u, audio_path=None, label=None if lab is None else int(lab), duration_s=None)
            for u, lab in zip(emb.ids, labels)]
    write_manifest(path, utts, languages)
    write_embeddings(sidecar_embeddings(path), emb.vectors)
    return path


@dataclass(frozen=True)
class FewShotRow:
    size: int
    eer_percent: float
    c_avg: float
    min_c_avg: float
    eer_per_seed: tuple[float, ...]


def run_fewshot_experiment(spec: SyntheticSpec, sizes: Sequence[int], n_seeds: int = 5,
                           test_count: int = 200, backend: BackendConfig | None = None) -> list[FewShotRow]:
    """EER and Cavg of the backend trained on ``s`` utterances per language.

    For each seed a pool of ``spec.per_class_count`` utterances per language
    and a held-out test set are drawn; size ``s`` trains on the first ``s``
    pool utterances of each language, so larger sets contain smaller ones.
    Scores are evaluated uncalibrated (there is no dev set).
    """
    sizes = [int(s) for s in sizes]
    if not sizes:
        raise LidError("no enrollment sizes given")
    for s in sizes:
        if s < 1:
            raise LidError(f"enrollment size must be >= 1, got {s}")
        if s > spec.per_class_count:
            raise LidError(f"enrollment size {s} exceeds the generated pool of {spec.per_class_count} per language")
    if n_seeds < 1:
        raise LidError("n_seeds must be >= 1")
    languages = spec.languages
    results = np.zeros((len(sizes), n_seeds, 3))
    for j in range(n_seeds):
        seed_spec = replace(spec, seed=spec.seed + j)
        gen = SyntheticGenerator(seed_spec)
        pool = gen.sample(spec.per_class_count, np.random.default_rng([seed_spec.seed, 200]), "pool-")
        test = gen.sample(test_count, np.random.default_rng([seed_spec.seed, 201]), "test-")
        test_labels = labels_of(test, languages)
        within = np.arange(pool.n) % spec.per_class_count   # position within its language block
        for i, s in enumerate(sizes):
            train = pool.subset(np.flatnonzero(within < s))
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", BackendWarning)
                model = train_backend(train, languages, backend)
            rep = evaluate(score(model, test), test_labels)
            results[i, j] = (rep.eer_percent, rep.c_avg, rep.min_c_avg)
    mean = results.mean(axis=1)
    return [FewShotRow(size=s, eer_percent=float(mean[i, 0]), c_avg=float(mean[i, 1]),
                       min_c_avg=float(mean[i, 2]), eer_per_seed=tuple(float(v) for v in results[i, :, 0]))
            for i, s in enumerate(sizes)]


def write_fewshot(rows: Sequence[FewShotRow], out_dir, figures: bool = True) -> list[str]:
    """Write ``fewshot.tsv`` (size, EER, Cavg, minCavg) and the log-log figure."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = ["size\teer_percent\tc_avg\tmin_c_avg"]
    lines += [f"{r.size}\t{r.eer_percent!r}\t{r.c_avg!r}\t{r.min_c_avg!r}" for r in rows]
    (out / "fewshot.tsv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    files = ["fewshot.tsv"]
    if figures:
        from lidkit.plotting import plot_fewshot
        per_seed = np.array([r.eer_per_seed for r in rows]).T
        plot_fewshot([r.size for r in rows], [r.eer_percent for r in rows], out / "fewshot.png", per_seed)
        files.append("fewshot.png")
    return files


def format_fewshot(rows: Sequence[FewShotRow]) -> str:
    lines = [f"{'size':>6}  {'EER':>6}  {'Cavg':>7}  {'minCavg':>7}"]
    lines += [f"{r.size:>6d}  {r.eer_percent:6.2f}  {r.c_avg:7.4f}  {r.min_c_avg:7.4f}" for r in rows]
    return "\n".join(lines)

