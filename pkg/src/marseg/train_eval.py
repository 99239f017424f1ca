"""Joint loss, deterministic training, mIoU evaluation and the ablation harness."""
from __future__ import annotations

import csv
import io
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .align import align_sequence
from .bev import BevConfig
from .core import ClassTaxonomy, ConfigError, DataError, MarsegError, decompose_labels
from .dataset_io import dataset_hash, list_samples, read_sequence, validate_dataset
from .mars import MarsConfig, MarsModel, Sample, config_hash, prepare_sample
from .tensor_nn import Adam, Tensor, binary_cross_entropy_with_logits, softmax_cross_entropy

ABLATIONS: dict[str, tuple[bool, bool, bool]] = {
    # name: (use_cffe, use_bev, use_mafl)
    "baseline": (False, False, False),
    "+cffe": (True, False, False),
    "+bev": (False, True, False),
    "+cffe+bev": (True, True, False),
    "full": (True, True, True),
}


def thread_limit() -> int:
    """Worker cap from ``MARSEG_THREADS`` (default 1)."""
    raw = os.environ.get("MARSEG_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise ConfigError(f"MARSEG_THREADS must be an integer, got {raw!r}") from None


def parallel_map(fn: Callable, items: Sequence, workers: Optional[int] = None) -> list:
    """Order-preserving map; uses processes only when more than one worker is allowed."""
    workers = thread_limit() if workers is None else workers
    if workers <= 1 or len(items) < 2:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=min(workers, len(items))) as pool:
        return list(pool.map(fn, items))


class DivergenceError(MarsegError, RuntimeError):
    """Training produced a non-finite loss."""


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    lr: float = 1e-3
    seed: int = 0
    w_c: float = 1.0
    w_m: float = 1.0
    use_cffe: bool = True
    use_bev: bool = True
    use_mafl: bool = True
    frames: int = 3
    bev: BevConfig = field(default_factory=BevConfig)

    def __post_init__(self):
        if self.w_c < 0 or self.w_m < 0:
            raise ConfigError("loss weights must be non-negative")
        if self.use_mafl and not self.use_bev:
            raise ConfigError("--no-bev requires --no-mafl: the motion-aware branch lives on the BEV branch")
        if self.epochs < 0:
            raise ConfigError("epochs must be non-negative")
        if not self.lr > 0:
            raise ConfigError("learning rate must be positive")

    def model_config(self, taxonomy: ClassTaxonomy) -> MarsConfig:
        return MarsConfig(
            frames=self.frames,
            use_cffe=self.use_cffe,
            use_bev=self.use_bev,
            use_mafl=self.use_mafl,
            bev=self.bev,
            taxonomy=taxonomy,
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["bev"] = self.bev.to_dict()
        return d


# ---------------------------------------------------------------- loss


def loss_terms(s_c: Tensor, s_m: Tensor, gt: np.ndarray, tax: ClassTaxonomy) -> tuple[Tensor, Tensor]:
    """Cross-entropy on the semantic part, BCE on the moving bit over ground-truth-movable points."""
    semantic, moving = decompose_labels(np.asarray(gt), tax)
    l_c = softmax_cross_entropy(s_c, semantic)
    l_m = binary_cross_entropy_with_logits(s_m, moving.astype(np.float64), mask=tax.movable_mask[semantic])
    return l_c, l_m


def combined_loss(s_c: Tensor, s_m: Tensor, gt: np.ndarray, tax: ClassTaxonomy, w_c: float = 1.0, w_m: float = 1.0) -> Tensor:
    l_c, l_m = loss_terms(s_c, s_m, gt, tax)
    return l_c * w_c + l_m * w_m


# ---------------------------------------------------------------- data


def _load_one(job) -> Sample:
    seq_dir, target, config = job
    frames, poses = read_sequence(seq_dir, config.frames, target)
    return prepare_sample(align_sequence(frames, poses), config)


def load_samples(root: Path, config: MarsConfig) -> list[Sample]:
    _, taxonomy = validate_dataset(root)
    if taxonomy.digest() != config.taxonomy.digest():
        raise DataError("dataset taxonomy differs from the model taxonomy")
    jobs = [(seq, t, config) for seq, t in list_samples(root, config.frames)]
    if not jobs:
        raise DataError(f"dataset {root} holds no {config.frames}-frame samples")
    return parallel_map(_load_one, jobs)


# ---------------------------------------------------------------- training


@dataclass
class TrainResult:
    model: MarsModel
    epoch_losses: list[tuple[float, float, float]]  # mean (L, L_c, L_m) per epoch
    first_losses: list[float]  # per-sample loss at that sample's first step
    last_losses: list[float]  # per-sample loss at that sample's final step
    checkpoint: Optional[Path] = None
    log: Optional[Path] = None


def run_header(seed: int, cfg_hash: str, data_hash: str, extra: Optional[dict] = None) -> list[str]:
    lines = [f"# seed={seed}", f"# config_hash={cfg_hash}", f"# dataset_hash={data_hash}"]
    for k, v in (extra or {}).items():
        lines.append(f"# {k}={v}")
    return lines


def train_samples(samples: Sequence[Sample], cfg: TrainConfig, model_config: MarsConfig) -> TrainResult:
    """Per-sample Adam steps in a seeded shuffled order; deterministic for fixed inputs."""
    model = MarsModel(model_config, seed=cfg.seed)
    opt = Adam(model.params, lr=cfg.lr)
    tax = model_config.taxonomy
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x7EA1]))
    first = [float("nan")] * len(samples)
    last = [float("nan")] * len(samples)
    epochs = []
    for epoch in range(cfg.epochs):
        sums = np.zeros(3)
        for i in rng.permutation(len(samples)):
            s = samples[i]
            if s.labels is None:
                raise DataError("training sample has no labels")
            opt.zero_grad()
            out = model.forward(s)
            l_c, l_m = loss_terms(out.s_c, out.s_m, s.labels, tax)
            loss = l_c * cfg.w_c + l_m * cfg.w_m
            if not np.isfinite(loss.item()):
                raise DivergenceError(f"non-finite loss in epoch {epoch + 1}; try a smaller learning rate")
            loss.backward()
            for _, p in model.params.items():
                if p.grad is None:  # e.g. a loss weight of zero cuts a head off the graph
                    p.grad = np.zeros_like(p.data)
            opt.step()
            if np.isnan(first[i]):
                first[i] = loss.item()
            last[i] = loss.item()
            sums += (loss.item(), l_c.item(), l_m.item())
        epochs.append(tuple(float(v) for v in sums / len(samples)))
    return TrainResult(model, epochs, first, last)


def train(dataset: Path, cfg: TrainConfig, out: Path, log_extra: Optional[dict] = None) -> TrainResult:
    """Train on every labelled window of ``dataset``; writes ``model.ckpt`` (+manifest) and ``train_log.csv``."""
    _, taxonomy = validate_dataset(dataset)
    mcfg = cfg.model_config(taxonomy)
    samples = load_samples(dataset, mcfg)
    result = train_samples(samples, cfg, mcfg)
    out = Path(out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        ckpt = out / "model.ckpt"
        result.model.save(ckpt)
        log = out / "train_log.csv"
        chash = config_hash({"train": cfg.to_dict(), "model": mcfg.to_dict()})
        lines = run_header(cfg.seed, chash, dataset_hash(dataset), log_extra)
        lines.append("epoch,L,L_c,L_m")
        lines += [f"{e},{l!r},{lc!r},{lm!r}" for e, (l, lc, lm) in enumerate(result.epoch_losses, 1)]
        log.write_text("\n".join(lines) + "\n")
    except OSError as exc:
        raise DataError(f"cannot write training outputs to {out}: {exc}") from None
    result.checkpoint, result.log = ckpt, log
    return result


# ---------------------------------------------------------------- evaluation


@dataclass
class EvalReport:
    codes: list[int]
    names: list[str]
    moving: list[bool]
    confusion: np.ndarray  # rows: ground truth, columns: prediction, over ``codes``
    gating_violations: int = 0

    @property
    def tp(self) -> np.ndarray:
        return np.diag(self.confusion).astype(np.int64)

    @property
    def fp(self) -> np.ndarray:
        return self.confusion.sum(axis=0) - self.tp

    @property
    def fn(self) -> np.ndarray:
        return self.confusion.sum(axis=1) - self.tp

    @property
    def present(self) -> np.ndarray:
        """Classes occurring in the ground truth or the predictions."""
        return (self.confusion.sum(axis=0) + self.confusion.sum(axis=1)) > 0

    @property
    def iou(self) -> np.ndarray:
        denom = self.tp + self.fp + self.fn
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(denom > 0, self.tp / np.maximum(denom, 1), np.nan)

    def _mean(self, select: np.ndarray) -> float:
        sel = select & self.present
        return float(self.iou[sel].mean()) if sel.any() else float("nan")

    @property
    def miou(self) -> float:
        return self._mean(np.ones(len(self.codes), dtype=bool))

    @property
    def moving_miou(self) -> float:
        return self._mean(np.array(self.moving))

    @property
    def static_miou(self) -> float:
        return self._mean(~np.array(self.moving))

    @property
    def points(self) -> int:
        return int(self.confusion.sum())

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("# mIoU averages classes present in ground truth or predictions\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["code", "name", "moving", "tp", "fp", "fn", "iou"])
        iou = self.iou
        for j, code in enumerate(self.codes):
            w.writerow([code, self.names[j], int(self.moving[j]), self.tp[j], self.fp[j], self.fn[j], _fmt(iou[j])])
        buf.write(f"# points={self.points}\n")
        buf.write(f"# miou={_fmt(self.miou)}\n")
        buf.write(f"# moving_miou={_fmt(self.moving_miou)}\n")
        buf.write(f"# static_miou={_fmt(self.static_miou)}\n")
        buf.write(f"# gating_violations={self.gating_violations}\n")
        return buf.getvalue()


def _fmt(x: float) -> str:
    return "nan" if np.isnan(x) else f"{x:.6f}"


def confusion_report(gt: np.ndarray, pred: np.ndarray, tax: ClassTaxonomy) -> EvalReport:
    """Confusion matrix over valid composite codes.

    A predicted moving label on a non-movable class has no code; such points are counted as
    gating violations and left out of the matrix.
    """
    codes = tax.valid_codes()
    C = tax.num_classes
    lut = np.full(2 * C, -1, dtype=np.int64)
    lut[codes] = np.arange(len(codes))
    gt, pred = np.asarray(gt, dtype=np.int64), np.asarray(pred, dtype=np.int64)
    if len(gt) != len(pred):
        raise DataError(f"{len(gt)} labels but {len(pred)} predictions")
    if len(gt) and (gt.min() < 0 or gt.max() >= 2 * C or np.any(lut[gt] < 0)):
        raise DataError("ground-truth labels contain codes outside the taxonomy")
    if len(pred) and (pred.min() < 0 or pred.max() >= 2 * C):
        raise DataError("predicted labels contain codes outside the taxonomy")
    gated = lut[pred] < 0  # only moving-static codes remain invalid inside [0, 2C)
    K = len(codes)
    keep = ~gated
    conf = np.bincount(lut[gt[keep]] * K + lut[pred[keep]], minlength=K * K).reshape(K, K)
    moving = [c >= C for c in codes]
    return EvalReport(codes, [tax.code_name(c) for c in codes], moving, conf, int(gated.sum()))


def merge_reports(reports: Sequence[EvalReport]) -> EvalReport:
    first = reports[0]
    conf = sum(r.confusion for r in reports)
    return EvalReport(first.codes, first.names, first.moving, conf, sum(r.gating_violations for r in reports))


def predict_samples(model: MarsModel, samples: Sequence[Sample]) -> list[np.ndarray]:
    return [model.infer(s) for s in samples]


def evaluate_samples(model: MarsModel, samples: Sequence[Sample]) -> EvalReport:
    if not samples:
        raise DataError("nothing to evaluate")
    tax = model.config.taxonomy
    gt, pred = [], []
    for s, p in zip(samples, predict_samples(model, samples)):
        if s.labels is None:
            raise DataError("evaluation sample has no labels")
        gt.append(s.labels)
        pred.append(p)
    return confusion_report(np.concatenate(gt), np.concatenate(pred), tax)


def evaluate(checkpoint: Path, dataset: Path) -> EvalReport:
    _, taxonomy = validate_dataset(dataset)
    model = MarsModel.load(checkpoint, taxonomy)
    return evaluate_samples(model, load_samples(dataset, model.config))


# ---------------------------------------------------------------- ablation


@dataclass
class AblationRow:
    config: str
    seed: int
    miou: float
    moving_miou: float
    static_miou: float
    gating_violations: int
    train_hash: str
    eval_hash: str


def ablation_suite(
    train_set: Path,
    eval_set: Path,
    base: TrainConfig,
    seeds: Sequence[int] = (0, 1, 2),
    configs: Sequence[str] = tuple(ABLATIONS),
    progress: Optional[Callable[[str], None]] = None,
    models: Optional[dict] = None,
) -> list[AblationRow]:
    """Train and evaluate every (configuration, seed) pair on fixed data.

    When ``models`` is a dict it receives each trained model under ``(config, seed)``.
    """
    _, taxonomy = validate_dataset(train_set)
    validate_dataset(eval_set)
    train_hash, eval_hash = dataset_hash(train_set), dataset_hash(eval_set)
    cache: dict[tuple, tuple[list[Sample], list[Sample]]] = {}
    rows = []
    for name in configs:
        cffe, bev, mafl = ABLATIONS[name]
        for seed in seeds:
            cfg = replace(base, seed=seed, use_cffe=cffe, use_bev=bev, use_mafl=mafl)
            mcfg = cfg.model_config(taxonomy)
            # sample preparation depends only on which BEV inputs are needed
            key = (mcfg.use_bev, mcfg.mafl_active)
            if key not in cache:
                cache[key] = (load_samples(train_set, mcfg), load_samples(eval_set, mcfg))
            tr, ev = cache[key]
            result = train_samples(tr, cfg, mcfg)
            if models is not None:
                models[(name, seed)] = result.model
            rep = evaluate_samples(result.model, ev)
            row = AblationRow(name, seed, rep.miou, rep.moving_miou, rep.static_miou, rep.gating_violations, train_hash, eval_hash)
            rows.append(row)
            if progress:
                progress(f"{name} seed={seed} miou={rep.miou:.4f} moving={rep.moving_miou:.4f}")
    return rows


def ablation_table(rows: Sequence[AblationRow]) -> str:
    """Per-seed rows followed by one mean row per configuration."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["config", "seed", "miou", "moving_miou", "static_miou", "gating_violations", "train_hash", "eval_hash"])
    for r in rows:
        w.writerow([r.config, r.seed, _fmt(r.miou), _fmt(r.moving_miou), _fmt(r.static_miou), r.gating_violations, r.train_hash, r.eval_hash])
    for name in dict.fromkeys(r.config for r in rows):
        sel = [r for r in rows if r.config == name]
        w.writerow([
            name, "mean",
            _fmt(float(np.mean([r.miou for r in sel]))),
            _fmt(float(np.mean([r.moving_miou for r in sel]))),
            _fmt(float(np.mean([r.static_miou for r in sel]))),
            sum(r.gating_violations for r in sel),
            sel[0].train_hash, sel[0].eval_hash,
        ])
    return buf.getvalue()


def read_ablation_table(text: str) -> list[dict]:
    return list(csv.DictReader(line for line in text.splitlines() if not line.startswith("#")))


def report_json(report: EvalReport) -> str:
    return json.dumps(
        {"miou": report.miou, "moving_miou": report.moving_miou, "static_miou": report.static_miou,
         "points": report.points, "gating_violations": report.gating_violations},
        sort_keys=True,
    )
