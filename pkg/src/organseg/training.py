"""Phased training schedule, experiment arms and cross-validation."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .catalog import OrganCatalog, build_catalog, load_catalog
from .losses import LossWeights, hybrid_loss
from .metrics import CaseMetrics, MetricsReport, aggregate_report, evaluate_case
from .network import (
    NetworkConfig,
    SegmentationNet,
    attention_modulate,
    predict_probabilities,
    recalibrate,
    save_checkpoint,
    segmentation_probabilities,
)
from .phantom import CaseVolume, list_cases, read_case
from .pipeline import batch_iterator, case_samples, elastic_transform_2d, make_folds

log = logging.getLogger(__name__)

# arm -> (attention module, partial-annotation recalibration)
ARMS = {
    "vanilla": (False, False),
    "vanilla_hpa": (False, True),
    "attention": (True, False),
    "attention_hpa": (True, True),
}


class ScheduleError(ValueError):
    pass


class TrainingDivergence(RuntimeError):
    pass


@dataclass(frozen=True)
class PhaseConfig:
    start: int
    end: int  # exclusive
    weights: LossWeights
    learning_rate: float
    elastic_augmentation: bool = False

    @classmethod
    def from_dict(cls, d: dict) -> "PhaseConfig":
        return cls(int(d["start"]), int(d["end"]), LossWeights(*d["weights"]),
                   float(d["learning_rate"]), bool(d.get("elastic_augmentation", False)))

    def to_dict(self) -> dict:
        w = self.weights
        return {"start": self.start, "end": self.end, "weights": [w.alpha, w.beta, w.gamma],
                "learning_rate": self.learning_rate,
                "elastic_augmentation": self.elastic_augmentation}


def _phases(lengths, lrs=(1e-3, 1e-3, 5e-4, 1e-4)):
    pattern = [(0, 0, 1), (1, 1, 1), (1, 0, 1), (1, 0, 0)]
    out, start = [], 0
    for i, (n, w, lr) in enumerate(zip(lengths, pattern, lrs)):
        out.append(PhaseConfig(start, start + n, LossWeights(*w), lr, elastic_augmentation=i == 3))
        start += n
    return out


def paper_schedule(finetune_epochs: int = 20) -> list[PhaseConfig]:
    """Classifier pre-training, full hybrid loss, focal-free, fine-tune."""
    return _phases((20, 30, 20, finetune_epochs))


def desk_schedule(lengths=(3, 10, 6, 4)) -> list[PhaseConfig]:
    """Same weight and learning-rate pattern with fewer epochs per phase."""
    return _phases(lengths)


def validate_schedule(schedule) -> None:
    if not schedule:
        raise ScheduleError("empty schedule")
    if schedule[0].start != 0:
        raise ScheduleError("schedule must start at epoch 0")
    for a, b in zip(schedule, schedule[1:]):
        if a.end != b.start:
            raise ScheduleError(f"phases [{a.start},{a.end}) and [{b.start},{b.end}) are not contiguous")
    for p in schedule:
        if p.end <= p.start:
            raise ScheduleError(f"empty phase [{p.start},{p.end})")
        if p.learning_rate <= 0:
            raise ScheduleError("learning rate must be positive")


def schedule_at(schedule, epoch: int) -> PhaseConfig:
    for p in schedule:
        if p.start <= epoch < p.end:
            return p
    raise ScheduleError(f"epoch {epoch} is not covered by the schedule")


def total_epochs(schedule) -> int:
    return schedule[-1].end


@dataclass
class RunConfig:
    arm: str = "attention_hpa"
    data_dir: str = "data"
    catalog: str | dict = "catalog.json"
    network: dict = field(default_factory=dict)
    schedule: str | list = "desk"
    batch_size: int = 16
    folds: int = 7
    seed: int = 0
    stack_size: int = 5
    crop: tuple | None = (48, 48)
    elastic_amplitude: float | None = None  # px; None scales 10 px @ 320
    elastic_smoothness: float | None = None  # px; None scales 4 px @ 320
    dice_smooth: float = 1.0
    dtype: str = "float32"

    def __post_init__(self):
        if self.arm not in ARMS:
            raise ValueError(f"unknown arm {self.arm!r}; choose from {sorted(ARMS)}")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")
        if self.crop is not None:
            self.crop = tuple(int(c) for c in self.crop)

    @property
    def use_attention(self) -> bool:
        return ARMS[self.arm][0]

    @property
    def use_hpa(self) -> bool:
        return ARMS[self.arm][1]

    @property
    def torch_dtype(self):
        return {"float32": torch.float32, "float64": torch.float64}[self.dtype]

    def phases(self) -> list[PhaseConfig]:
        if self.schedule == "paper":
            sched = paper_schedule()
        elif self.schedule == "desk":
            sched = desk_schedule()
        elif isinstance(self.schedule, str):
            raise ScheduleError(f"unknown schedule name {self.schedule!r}")
        else:
            sched = [p if isinstance(p, PhaseConfig) else PhaseConfig.from_dict(p) for p in self.schedule]
        validate_schedule(sched)
        return sched

    def load_catalog(self) -> OrganCatalog:
        if isinstance(self.catalog, dict):
            return build_catalog(self.catalog)
        return load_catalog(self.catalog)

    def network_config(self, catalog: OrganCatalog, in_plane) -> NetworkConfig:
        H, W = self.crop if self.crop is not None else in_plane
        kw = dict(S=self.stack_size, H=H, W=W, C=catalog.num_classes, R=catalog.num_regions)
        kw.update(self.network)
        return NetworkConfig(**kw)

    def elastic_params(self, H: int) -> tuple[float, float]:
        amp = self.elastic_amplitude if self.elastic_amplitude is not None else 10.0 * H / 320
        smooth = self.elastic_smoothness if self.elastic_smoothness is not None else 4.0 * H / 320
        return amp, smooth

    def with_arm(self, arm: str) -> "RunConfig":
        d = asdict(self)
        d["arm"] = arm
        return RunConfig(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        if not isinstance(self.schedule, str):
            d["schedule"] = [p.to_dict() if isinstance(p, PhaseConfig) else p for p in self.schedule]
        if self.crop is not None:
            d["crop"] = list(self.crop)
        return d

    @classmethod
    def from_json(cls, path) -> "RunConfig":
        with open(path) as f:
            return cls(**json.load(f))


def _seed(*parts) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


def effective_weights(run: RunConfig, phase: PhaseConfig) -> LossWeights:
    w = phase.weights
    if not run.use_attention:
        # the plain U-Net baseline has no classification objective
        w = LossWeights(w.alpha, w.beta, 0.0)
    return w


def compute_loss(model: SegmentationNet, run: RunConfig, batch, weights: LossWeights):
    dt = run.torch_dtype
    x = torch.as_tensor(batch.inputs, dtype=dt)
    g = torch.as_tensor(batch.targets, dtype=dt)
    avail = torch.as_tensor(batch.availabilities, dtype=dt)
    out = model(x)
    z5 = out.organ_logits
    if run.use_attention and out.attention is not None:
        z5 = attention_modulate(z5, out.attention, model.config.attention_epsilon)
    p = segmentation_probabilities(z5, out.background_logit)
    if run.use_hpa:
        p = recalibrate(p, avail)
    return hybrid_loss(p, g, avail if run.use_hpa else None, out.region_logits,
                       batch.region_labels, weights, smooth=run.dice_smooth)


@dataclass
class TrainedArtifact:
    model: SegmentationNet
    run: RunConfig
    log: list
    checkpoints: list = field(default_factory=list)


def build_model(run: RunConfig, catalog: OrganCatalog, in_plane) -> SegmentationNet:
    torch.manual_seed(run.seed)
    model = SegmentationNet(run.network_config(catalog, in_plane))
    return model.to(run.torch_dtype)


def train(run: RunConfig, cases: list[CaseVolume], catalog: OrganCatalog | None = None,
          out_dir=None, epoch_callback=None) -> TrainedArtifact:
    """Run the full phased schedule on ``cases``.

    Writes ``log.jsonl`` and one ``ckpt_phase<k>.bin`` per phase when
    ``out_dir`` is given.
    """
    catalog = catalog or run.load_catalog()
    schedule = run.phases()
    if not cases:
        raise ValueError("no training cases")
    samples = [s for c in cases for s in case_samples(c, catalog, run.stack_size, run.crop)]
    H = samples[0].input.values.shape[-2]
    model = build_model(run, catalog, cases[0].intensities.shape[1:])
    optimizer = torch.optim.Adam(model.parameters(), lr=schedule[0].learning_rate,
                                 betas=(0.9, 0.999), eps=1e-8)
    amp, smooth = run.elastic_params(H)

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "log.jsonl").write_text("")
    records, ckpts = [], []

    for epoch in range(total_epochs(schedule)):
        phase = schedule_at(schedule, epoch)
        k = schedule.index(phase)
        weights = effective_weights(run, phase)
        for group in optimizer.param_groups:
            group["lr"] = phase.learning_rate
        sums = {"batch_dice": 0.0, "sb_focal": 0.0, "region_ce": 0.0, "total": 0.0}
        n_batches = 0
        if not weights.all_zero:
            model.train()
            epoch_samples = samples
            if phase.elastic_augmentation:
                epoch_samples = [elastic_transform_2d(s, amp, smooth, _seed(run.seed, epoch, i))
                                 for i, s in enumerate(samples)]
            for b, batch in enumerate(batch_iterator(epoch_samples, run.batch_size,
                                                     _seed(run.seed, epoch))):
                losses = compute_loss(model, run, batch, weights)
                if not torch.isfinite(losses.total):
                    raise TrainingDivergence(f"non-finite loss at epoch {epoch}, batch {b}")
                optimizer.zero_grad(set_to_none=False)
                losses.total.backward()
                if epoch_callback is not None:
                    epoch_callback(model, epoch, b)
                optimizer.step()
                for key, v in losses.as_floats().items():
                    sums[key] += v
                n_batches += 1
        rec = {"epoch": epoch, "phase": k, "lr": phase.learning_rate,
               "weights": [weights.alpha, weights.beta, weights.gamma],
               "batches": n_batches,
               **{key: (v / n_batches if n_batches else 0.0) for key, v in sums.items()}}
        records.append(rec)
        log.info("epoch %d phase %d total %.4f dice %.4f focal %.4f ce %.4f", epoch, k,
                 rec["total"], rec["batch_dice"], rec["sb_focal"], rec["region_ce"])
        if out is not None:
            with open(out / "log.jsonl", "a") as f:
                f.write(json.dumps(rec, sort_keys=True) + "\n")
            if epoch == phase.end - 1:
                path = out / f"ckpt_phase{k}.bin"
                save_checkpoint(model, path, {"arm": run.arm, "epoch": epoch, "phase": k})
                ckpts.append(path)

    model.eval()
    return TrainedArtifact(model, run, records, ckpts)


@torch.no_grad()
def predict_case(model: SegmentationNet, case: CaseVolume, catalog: OrganCatalog, *,
                 attention: bool = True, stack_size: int = 5, crop=None, mask=None,
                 batch_size: int = 16) -> np.ndarray:
    """Per-slice probabilities ``[D, C, H, W]``; ``mask`` optionally recalibrates."""
    model.eval()
    dtype = next(model.parameters()).dtype
    samples = case_samples(case, catalog, stack_size, crop)
    out = []
    for i in range(0, len(samples), batch_size):
        x = torch.as_tensor(np.stack([s.input.values for s in samples[i:i + batch_size]]), dtype=dtype)
        avail = None
        if mask is not None:
            avail = torch.as_tensor(np.broadcast_to(mask, (len(x), catalog.num_organs)), dtype=dtype)
        out.append(predict_probabilities(model, x, attention=attention, availability=avail).numpy())
    return np.concatenate(out)


def evaluate_cases(model, cases, catalog, run: RunConfig) -> list[CaseMetrics]:
    return [
        evaluate_case(predict_case(model, c, catalog, attention=run.use_attention,
                                   stack_size=run.stack_size, crop=run.crop), c, catalog)
        for c in cases
    ]


def load_cases(data_dir) -> list[CaseVolume]:
    paths = list_cases(data_dir)
    if not paths:
        raise FileNotFoundError(f"no cases under {data_dir}")
    return [read_case(p) for p in paths]


def cross_validate(run: RunConfig, cases: list[CaseVolume] | None = None, out_dir=None,
                   catalog: OrganCatalog | None = None):
    """Train and score each fold; returns ``(fold reports, pooled report)``."""
    catalog = catalog or run.load_catalog()
    cases = cases if cases is not None else load_cases(run.data_dir)
    by_id = {c.case_id: c for c in cases}
    if len(by_id) != len(cases):
        raise ValueError("case ids must be unique")
    folds = make_folds([c.case_id for c in cases], run.folds, run.seed,
                       sources=[c.source for c in cases])
    out = Path(out_dir) if out_dir is not None else None
    results, pooled = [], []
    for i, (train_ids, test_ids) in enumerate(folds):
        fold_dir = out / f"fold{i}" if out is not None else None
        art = train(run, [by_id[c] for c in train_ids], catalog, out_dir=fold_dir)
        metrics = evaluate_cases(art.model, [by_id[c] for c in test_ids], catalog, run)
        report = aggregate_report(metrics, catalog)
        pooled += metrics
        results.append((i, report))
        if fold_dir is not None:
            write_report(report, fold_dir)
            (fold_dir / "split.json").write_text(json.dumps({"train": train_ids, "test": test_ids}) + "\n")
    pooled_report = aggregate_report(pooled, catalog)
    if out is not None:
        write_report(pooled_report, out)
    return results, pooled_report


def write_report(report: MetricsReport, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    (d / "report.json").write_text(report.to_json())
    (d / "report.txt").write_text(report.to_text())


def loss_is_consistent(record: dict, tol: float = 1e-9) -> bool:
    a, b, g = record["weights"]
    expect = a * record["batch_dice"] + b * record["sb_focal"] + g * record["region_ce"]
    return math.isclose(record["total"], expect, rel_tol=tol, abs_tol=tol)
