"""Accuracies, relative improvements, the modality-ablation matrix and its
report rendering.

The identification matrix has ten cells: two X-ray rows plus four CT rows
crossed with full / two-slice CT. The two remaining tasks use the three-row
X-ray / CT / CT + X-ray structure. Every cell is an independently seeded
train+evaluate run over the same manifest splits; improvements are computed
against the X-ray baseline row of the same task.
"""

from __future__ import annotations

import json
import logging
import zlib
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path
from typing import Callable, Mapping, Optional, Sequence, Union

import numpy as np

from .classifiers import (
    ArchitectureKind,
    ClassifierModel,
    ModalityTag,
    ModelInput,
    build_classifier,
    fuse_inputs,
    predict,
    save_classifier,
)
from .ct_synthesis import CTGenerator, GeneratorMode, prepare_generator_input, synthesize_ct
from .data_model import (
    CohortSplit,
    PatientRecord,
    Task,
    ViewModality,
    filter_cohort,
    load_image,
    load_manifest,
)
from .preprocessing import (
    SliceMode,
    augment_ct_stack,
    ct_slice_stack,
    preprocess_xray_2d,
    preprocess_xray_fusion,
)
from .training import TrainConfig, TrainHistory, target_for_task, train

logger = logging.getLogger(__name__)

IDENTIFICATION_ROWS: tuple[tuple[str, ModalityTag], ...] = (
    ("X-ray (PA)", ModalityTag.XRAY_PA),
    ("X-ray (PA) + (L)", ModalityTag.XRAY_PA_L),
    ("CT (SV)", ModalityTag.CT_SV),
    ("CT (B)", ModalityTag.CT_B),
    ("CT (SV) + X-ray", ModalityTag.CT_SV_XRAY),
    ("CT (B) + X-ray", ModalityTag.CT_B_XRAY),
)
SECONDARY_ROWS: tuple[tuple[str, ModalityTag], ...] = (
    ("X-ray", ModalityTag.XRAY_PA),
    ("CT", ModalityTag.CT_B),
    ("CT + X-ray", ModalityTag.CT_B_XRAY),
)
SLICE_COLUMN_ORDER = (SliceMode.FULL, SliceMode.TWO_SLICE)


class AccuracyMode(str, Enum):
    EXACT = "exact"
    PER_LABEL_MEAN = "per_label_mean"


def accuracy(
    predictions: Sequence, labels: Sequence, mode: AccuracyMode = AccuracyMode.EXACT
) -> float:
    """Fraction correct: per sample (all labels right) or per (sample, label)
    cell."""
    mode = AccuracyMode(mode)
    preds = np.atleast_2d(np.asarray(predictions, dtype=np.int64))
    truth = np.atleast_2d(np.asarray(labels, dtype=np.int64))
    if preds.size == 0:
        raise ValueError("empty input")
    if preds.shape != truth.shape:
        raise ValueError(f"shape mismatch: {preds.shape} vs {truth.shape}")
    if mode is AccuracyMode.EXACT:
        return float(np.all(preds == truth, axis=1).mean())
    return float((preds == truth).mean())


def relative_improvement(candidate: float, baseline: float) -> float:
    """Percent improvement of candidate over baseline, to 2 decimals."""
    if baseline <= 0:
        raise ValueError(f"baseline must be positive, got {baseline}")
    return round(100.0 * (candidate - baseline) / baseline, 2)


@dataclass(frozen=True)
class ExperimentConfig:
    """One cell of the ablation matrix: task x input modality x slice mode."""

    task: Task
    modality_tag: ModalityTag
    slice_mode: Optional[SliceMode]
    train_config: TrainConfig = TrainConfig()

    def __post_init__(self) -> None:
        tag = ModalityTag(self.modality_tag)
        if tag.uses_ct and self.slice_mode is None:
            raise ValueError(f"{tag.value} requires a slice mode")
        if not tag.uses_ct and self.slice_mode is not None:
            raise ValueError(f"slice mode applies only when CT is present ({tag.value})")

    @property
    def generator_mode(self) -> Optional[GeneratorMode]:
        if self.modality_tag in (ModalityTag.CT_SV, ModalityTag.CT_SV_XRAY):
            return GeneratorMode.SV
        if self.modality_tag in (ModalityTag.CT_B, ModalityTag.CT_B_XRAY):
            return GeneratorMode.B
        return None

    @property
    def n_outputs(self) -> int:
        return 3 if self.task is Task.TYPES else 1

    @property
    def architecture_kind(self) -> ArchitectureKind:
        return (
            ArchitectureKind.MULTIVIEW_2D
            if self.modality_tag.is_xray_2d
            else ArchitectureKind.SLICESTACK_3D
        )

    def describe(self) -> dict:
        return {
            "task": self.task.value,
            "modality": self.modality_tag.value,
            "slice_mode": self.slice_mode.value if self.slice_mode else None,
            "learning_rate": self.train_config.learning_rate,
            "batch_size": self.train_config.batch_size,
            "max_epochs": self.train_config.max_epochs,
            "patience": self.train_config.patience,
            "seed": self.train_config.seed,
        }


GeneratorMap = Mapping[GeneratorMode, CTGenerator]


def as_generator_map(generators: Union[CTGenerator, GeneratorMap, None]) -> dict:
    """Normalize generator argument: a mode-agnostic source serves both
    synthesis roles."""
    if generators is None:
        return {}
    if isinstance(generators, Mapping):
        return {GeneratorMode(k): v for k, v in generators.items()}
    if generators.mode is None:
        return {GeneratorMode.SV: generators, GeneratorMode.B: generators}
    return {generators.mode: generators}


class SamplePipeline:
    """Turns PatientRecords into classifier inputs for one experiment cell.

    Deterministic preprocessing (view loading, volume production, CT slice
    stacks, fusion X-rays) is cached per record; train-time augmentation is
    applied on top from the caller's rng.
    """

    def __init__(
        self,
        config: ExperimentConfig,
        image_root: Path | str,
        generators: Union[CTGenerator, GeneratorMap, None] = None,
        view_seed: int = 0,
    ):
        self.config = config
        self.image_root = Path(image_root)
        self.generators = as_generator_map(generators)
        self.view_seed = int(view_seed)
        mode = config.generator_mode
        if mode is not None and mode not in self.generators:
            raise ValueError(
                f"no generator available for mode {mode.value}; have "
                f"{sorted(g.value for g in self.generators)}"
            )
        self._view_cache: dict[tuple[str, ViewModality], tuple] = {}
        self._ct_cache: dict[str, np.ndarray] = {}
        self._fusion_xray_cache: dict[str, np.ndarray] = {}

    def _record_rng(self, record: PatientRecord) -> np.random.Generator:
        key = zlib.crc32(record.patient_id.encode("utf-8"))
        return np.random.default_rng(np.random.SeedSequence([self.view_seed, key]))

    def _views(self, record: PatientRecord, modality: ViewModality):
        from .data_model import select_views

        key = (record.patient_id, modality)
        if key not in self._view_cache:
            self._view_cache[key] = select_views(
                record, modality, rng=self._record_rng(record), image_root=self.image_root
            )
        return self._view_cache[key]

    def _volume(self, record: PatientRecord):
        mode = self.config.generator_mode
        gen = self.generators[mode]
        input_size = getattr(gen, "input_size", None)
        pa = lateral = None
        if input_size is not None:
            if mode is GeneratorMode.B:
                pa_img, lat_img = self._views(record, ViewModality.PA_L)
                lateral = prepare_generator_input(lat_img, input_size)
            else:
                (pa_img,) = self._views(record, ViewModality.PA)
            pa = prepare_generator_input(pa_img, input_size)
        return synthesize_ct(gen, pa, lateral, patient_id=record.patient_id)

    def _ct_stack(self, record: PatientRecord) -> np.ndarray:
        pid = record.patient_id
        if pid not in self._ct_cache:
            self._ct_cache[pid] = ct_slice_stack(self._volume(record), self.config.slice_mode)
        return self._ct_cache[pid]

    def _fusion_xray(self, record: PatientRecord) -> np.ndarray:
        pid = record.patient_id
        if pid not in self._fusion_xray_cache:
            (pa,) = self._views(record, ViewModality.PA)
            self._fusion_xray_cache[pid] = preprocess_xray_fusion(pa)
        return self._fusion_xray_cache[pid]

    @property
    def input_channels(self) -> int:
        tag = self.config.modality_tag
        if tag.is_xray_2d:
            return tag.n_views
        depth = self.generators[self.config.generator_mode].output_dims[0]
        channels = 2 if self.config.slice_mode is SliceMode.TWO_SLICE else depth
        return channels + 1 if tag.fuses_xray else channels

    def __call__(
        self,
        record: PatientRecord,
        train: bool = False,
        rng: Optional[np.random.Generator] = None,
    ) -> tuple[ModelInput, np.ndarray]:
        tag = self.config.modality_tag
        target = target_for_task(record.label, self.config.task)
        if tag.is_xray_2d:
            modality = ViewModality.PA_L if tag is ModalityTag.XRAY_PA_L else ViewModality.PA
            views = tuple(
                preprocess_xray_2d(v, train_mode=train, rng=rng)
                for v in self._views(record, modality)
            )
            return ModelInput(modality_tag=tag, views=views), target
        stack = self._ct_stack(record)
        if train:
            stack = augment_ct_stack(stack, rng)
        if tag.fuses_xray:
            sample = fuse_inputs(stack, self._fusion_xray(record), tag, self.config.slice_mode)
        else:
            sample = ModelInput(modality_tag=tag, planes=stack, slice_mode=self.config.slice_mode)
        return sample, target


def collect_predictions(
    model: ClassifierModel, records: Sequence[PatientRecord], pipeline: SamplePipeline
) -> tuple[np.ndarray, np.ndarray]:
    """Hard predictions and targets over records, eval-mode preprocessing."""
    preds, targets = [], []
    for rec in records:
        sample, target = pipeline(rec, train=False, rng=None)
        _, hard = predict(model, sample)
        preds.append(hard)
        targets.append(target.astype(np.int64))
    return np.stack(preds), np.stack(targets)


@dataclass(frozen=True)
class ResultRow:
    row_label: str
    slice_mode: Optional[SliceMode]
    accuracy: float
    accuracy_exact: Optional[float] = None  # set for multi-label tasks
    improvement: Optional[float] = None

    def to_dict(self) -> dict:
        return {
            "row_label": self.row_label,
            "slice_mode": self.slice_mode.value if self.slice_mode else None,
            "accuracy": self.accuracy,
            "accuracy_exact": self.accuracy_exact,
            "improvement": self.improvement,
        }


@dataclass(frozen=True)
class ResultTable:
    task: Task
    rows: tuple[ResultRow, ...]
    baseline_label: str

    def to_json(self) -> str:
        payload = {
            "task": self.task.value,
            "baseline_label": self.baseline_label,
            "rows": [r.to_dict() for r in self.rows],
        }
        return json.dumps(payload, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "ResultTable":
        payload = json.loads(text)
        rows = tuple(
            ResultRow(
                row_label=r["row_label"],
                slice_mode=SliceMode(r["slice_mode"]) if r["slice_mode"] else None,
                accuracy=float(r["accuracy"]),
                accuracy_exact=None if r.get("accuracy_exact") is None else float(r["accuracy_exact"]),
                improvement=None if r.get("improvement") is None else float(r["improvement"]),
            )
            for r in payload["rows"]
        )
        return cls(Task(payload["task"]), rows, payload["baseline_label"])


def matrix_cells(
    task: Task, ct_slice_mode: SliceMode = SliceMode.TWO_SLICE
) -> list[tuple[str, ModalityTag, Optional[SliceMode]]]:
    """Cell list in report order for a task's table."""
    task = Task(task)
    cells: list[tuple[str, ModalityTag, Optional[SliceMode]]] = []
    if task is Task.IDENTIFICATION:
        for label, tag in IDENTIFICATION_ROWS:
            if tag.is_xray_2d:
                cells.append((label, tag, None))
            else:
                for mode in SLICE_COLUMN_ORDER:
                    cells.append((label, tag, mode))
    else:
        for label, tag in SECONDARY_ROWS:
            cells.append((label, tag, None if tag.is_xray_2d else SliceMode(ct_slice_mode)))
    return cells


def run_experiment(
    config: ExperimentConfig,
    cohort: CohortSplit,
    image_root: Path | str,
    generators: Union[CTGenerator, GeneratorMap, None] = None,
    out_dir: Optional[Path | str] = None,
) -> tuple[ClassifierModel, TrainHistory, dict]:
    """Train one cell and evaluate it on the cohort's test split."""
    pipeline = SamplePipeline(config, image_root, generators, view_seed=config.train_config.seed)
    model = build_classifier(
        config.architecture_kind,
        config.n_outputs,
        pipeline.input_channels,
        seed=config.train_config.seed,
    )
    model, history = train(model, cohort, config.task, config.train_config, pipeline)
    preds, targets = collect_predictions(model, cohort.test, pipeline)
    exact = accuracy(preds, targets, AccuracyMode.EXACT)
    per_label = accuracy(preds, targets, AccuracyMode.PER_LABEL_MEAN)
    metrics = {
        "test_accuracy_exact": exact,
        "test_accuracy_per_label_mean": per_label,
        "best_epoch": history.best_epoch,
        "best_val_loss": history.best.val_loss,
        "best_val_acc": history.best.val_acc,
        "epochs_run": len(history.epochs),
    }
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "config.json").write_text(
            json.dumps(config.describe(), indent=2) + "\n", encoding="utf-8"
        )
        history.to_csv(out_dir / "history.csv")
        save_classifier(model, out_dir / "best.ckpt")
        (out_dir / "metrics.json").write_text(
            json.dumps(metrics, indent=2) + "\n", encoding="utf-8"
        )
    return model, history, metrics


def _cell_dir_name(index: int, tag: ModalityTag, slice_mode: Optional[SliceMode]) -> str:
    slug = tag.value.replace("+", "_plus_")
    if slice_mode is not None:
        slug += f"_{slice_mode.value}"
    return f"cell{index:02d}_{slug}"


def run_experiment_matrix(
    task: Task,
    manifest_path: Path | str,
    generators: Union[CTGenerator, GeneratorMap, None],
    base_config: TrainConfig = TrainConfig(),
    out_dir: Optional[Path | str] = None,
    ct_slice_mode: SliceMode = SliceMode.TWO_SLICE,
) -> ResultTable:
    """Run every cell of a task's table; rows share the manifest's splits."""
    task = Task(task)
    manifest_path = Path(manifest_path)
    records = load_manifest(manifest_path)
    cohort = filter_cohort(records, task)
    image_root = manifest_path.parent

    headline_mode = AccuracyMode.PER_LABEL_MEAN if task is Task.TYPES else AccuracyMode.EXACT
    cells = matrix_cells(task, ct_slice_mode)
    rows: list[ResultRow] = []
    for index, (row_label, tag, slice_mode) in enumerate(cells):
        cell_seed = int(np.random.SeedSequence([base_config.seed, index]).generate_state(1)[0])
        cell_train = replace(
            base_config,
            seed=cell_seed,
            batch_size=1 if tag.is_xray_2d else base_config.batch_size,
        )
        config = ExperimentConfig(
            task=task, modality_tag=tag, slice_mode=slice_mode, train_config=cell_train
        )
        cell_dir = (
            Path(out_dir) / _cell_dir_name(index, tag, slice_mode) if out_dir is not None else None
        )
        logger.info(
            "matrix cell %d/%d: %s%s",
            index + 1,
            len(cells),
            row_label,
            f" [{slice_mode.value}]" if slice_mode else "",
        )
        _, _, metrics = run_experiment(config, cohort, image_root, generators, cell_dir)
        headline = (
            metrics["test_accuracy_per_label_mean"]
            if headline_mode is AccuracyMode.PER_LABEL_MEAN
            else metrics["test_accuracy_exact"]
        )
        rows.append(
            ResultRow(
                row_label=row_label,
                slice_mode=slice_mode,
                accuracy=headline,
                accuracy_exact=metrics["test_accuracy_exact"] if task is Task.TYPES else None,
            )
        )

    baseline_label = IDENTIFICATION_ROWS[0][0] if task is Task.IDENTIFICATION else SECONDARY_ROWS[0][0]
    baseline_acc = next(r.accuracy for r in rows if r.row_label == baseline_label)
    final_rows = []
    for row in rows:
        if row.row_label == baseline_label or baseline_acc <= 0:
            final_rows.append(row)
        else:
            final_rows.append(
                replace(row, improvement=relative_improvement(row.accuracy, baseline_acc))
            )
    table = ResultTable(task=task, rows=tuple(final_rows), baseline_label=baseline_label)
    if out_dir is not None:
        write_report_files(table, out_dir)
    return table


class ReportFormat(str, Enum):
    MARKDOWN = "markdown"
    CSV = "csv"


def render_report(table: ResultTable, fmt: ReportFormat = ReportFormat.MARKDOWN) -> str:
    """Render a result table deterministically; markdown bolds the best cell
    and underlines the second best."""
    fmt = ReportFormat(fmt)
    if not table.rows:
        raise ValueError("cannot render an empty table")
    if fmt is ReportFormat.CSV:
        lines = ["row_label,slice_mode,accuracy,improvement_vs_xray_pct"]
        for row in table.rows:
            lines.append(
                ",".join(
                    [
                        row.row_label,
                        row.slice_mode.value if row.slice_mode else "",
                        f"{row.accuracy:.4f}",
                        "" if row.improvement is None else f"{row.improvement:.2f}",
                    ]
                )
            )
        return "\n".join(lines) + "\n"

    values = sorted({round(r.accuracy, 2) for r in table.rows}, reverse=True)
    best = values[0]
    second = values[1] if len(values) > 1 else None
    tie = sum(1 for r in table.rows if round(r.accuracy, 2) == best) > 1

    def fmt_acc(value: float) -> str:
        shown = f"{value:.2f}"
        if round(value, 2) == best:
            return f"**{shown}**"
        if second is not None and round(value, 2) == second:
            return f"<u>{shown}</u>"
        return shown

    show_exact = any(r.accuracy_exact is not None for r in table.rows)
    header = ["Data", "Slices", "Accuracy"]
    if show_exact:
        header.append("Exact accuracy")
    header.append("Improvement vs X-ray (%)")
    lines = [
        f"# {table.task.value.capitalize()} accuracy",
        "",
        "| " + " | ".join(header) + " |",
        "| " + " | ".join("---" for _ in header) + " |",
    ]
    for row in table.rows:
        cells = [
            row.row_label,
            row.slice_mode.value.replace("_", "-") if row.slice_mode else "-",
            fmt_acc(row.accuracy),
        ]
        if show_exact:
            cells.append("-" if row.accuracy_exact is None else f"{row.accuracy_exact:.2f}")
        cells.append("-" if row.improvement is None else f"{row.improvement:.2f}")
        lines.append("| " + " | ".join(cells) + " |")
    lines.append("")
    lines.append("Bold marks the best cell; underline marks the second best.")
    if tie:
        lines.append("Note: tie for the best accuracy.")
    lines.append(f"Improvements are relative to the {table.baseline_label!r} row.")
    return "\n".join(lines) + "\n"


def write_report_files(table: ResultTable, out_dir: Path | str) -> dict[str, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {
        "markdown": out_dir / "report.md",
        "csv": out_dir / "report.csv",
        "results": out_dir / "results.json",
    }
    paths["markdown"].write_text(render_report(table, ReportFormat.MARKDOWN), encoding="utf-8")
    paths["csv"].write_text(render_report(table, ReportFormat.CSV), encoding="utf-8")
    paths["results"].write_text(table.to_json(), encoding="utf-8")
    return paths
