"""Training orchestration: SGD with milestone decay, early stopping on
validation TAR@1%FAR, checkpointing with exact resume, fold runs, the
JAM/JE ablation, and 2D-only evaluation."""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import datafiles, verification
from .autodiff import Tape
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ExperimentConfig, config_hash
from .model import VerificationModel
from .synthetic import POSE_BINS


class TrainingDiverged(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# optimizer


class SGD:
    """Plain SGD with L2 weight decay and optional momentum."""

    def __init__(self, params: dict, weight_decay: float, momentum: float):
        self.params = params
        self.weight_decay = weight_decay
        self.momentum = momentum
        self.velocity = {
            name: np.zeros_like(p.values) for name, p in params.items()
        } if momentum else {}

    def step(self, grads, lr: float) -> None:
        for name in sorted(self.params):
            p = self.params[name]
            if p not in grads:
                continue  # parameter not touched by this graph
            g = grads.array(p) + self.weight_decay * p.values
            if self.momentum:
                v = self.velocity[name]
                v *= self.momentum
                v += g
                g = v
            p.values = p.values - lr * g

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {f"opt.{k}": v for k, v in self.velocity.items()}

    def restore(self, arrays: dict[str, np.ndarray]) -> None:
        for name in self.velocity:
            key = f"opt.{name}"
            if key in arrays:
                self.velocity[name] = np.array(arrays[key])


# ---------------------------------------------------------------------------
# data plumbing


@dataclass
class SampleRow:
    identity: int
    yaw: float
    bin: str
    image_path: Path
    cloud_path: Path
    role: str
    split: str


def load_rows(data_dir: Path) -> list[SampleRow]:
    data_dir = Path(data_dir)
    records = datafiles.read_manifest(data_dir / "manifest.jsonl")
    return [
        SampleRow(
            identity=int(r["id"]),
            yaw=float(r["pose_deg"]),
            bin=r["bin"],
            image_path=data_dir / r["image_path"],
            cloud_path=data_dir / r["cloud_path"],
            role=r["role"],
            split=r["split"],
        )
        for r in records
    ]


def manifest_identity_split(cfg: ExperimentConfig, rows: list[SampleRow]):
    """The dataset's own train/eval split, with a validation holdout."""
    train_pool = sorted({r.identity for r in rows if r.split == "train"})
    eval_ids = {r.identity for r in rows if r.split == "eval"}
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x7A1]))
    perm = [int(i) for i in rng.permutation(train_pool)]
    n_val = max(1, int(round(len(perm) * cfg.validation_fraction)))
    return set(perm[n_val:]), set(perm[:n_val]), eval_ids


def fold_identity_split(cfg: ExperimentConfig, identities: list[int], fold: int):
    """Disjoint eval chunks per fold; within train, a held-out validation set."""
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xF01D]))
    perm = [int(i) for i in rng.permutation(sorted(identities))]
    k = cfg.folds
    if fold < 0 or fold >= k:
        raise ValueError(f"fold {fold} out of range for {k} folds")
    chunks = [perm[i::k] for i in range(k)]
    if any(len(c) < 2 for c in chunks):
        raise ValueError(f"too few identities ({len(perm)}) for {k} disjoint folds")
    eval_ids = set(chunks[fold])
    train_pool = [i for i in perm if i not in eval_ids]
    n_val = max(1, int(round(len(train_pool) * cfg.validation_fraction)))
    val_ids = set(train_pool[:n_val])
    train_ids = set(train_pool[n_val:])
    return train_ids, val_ids, eval_ids


# ---------------------------------------------------------------------------
# embedding + scoring helpers


def _embed_rows(model: VerificationModel, rows: list[SampleRow]) -> np.ndarray:
    out = []
    for r in rows:
        img = datafiles.read_image(r.image_path)
        emb, _ = model.embed_2d(_const(img))
        out.append(emb.values[0])
    return np.array(out)


def _const(arr):
    from .autodiff import Tensor

    return Tensor(arr)


def score_rows(
    model: VerificationModel,
    gallery_rows: list[SampleRow],
    probe_rows: list[SampleRow],
    fusion: str,
) -> verification.ScoreSet:
    g = _embed_rows(model, gallery_rows)
    p = _embed_rows(model, probe_rows)
    return verification.cosine_scores(
        g,
        [r.identity for r in gallery_rows],
        p,
        [r.identity for r in probe_rows],
        [r.bin for r in probe_rows],
        fusion=fusion,
    )


def identity_report(
    model: VerificationModel,
    rows: list[SampleRow],
    ids: set[int],
    cfg: ExperimentConfig,
    fold: int = 0,
    average: str | None = None,
) -> verification.VerificationReport:
    mine = [r for r in rows if r.identity in ids]
    gallery = [r for r in mine if r.role == "gallery"]
    probes = [r for r in mine if r.role == "probe"]
    scores = score_rows(model, gallery, probes, cfg.gallery_fusion)
    return verification.pose_binned_report(
        scores, fold=fold, average=average or cfg.average_mode
    )


# ---------------------------------------------------------------------------
# the training loop


@dataclass
class FoldResult:
    report: verification.VerificationReport
    best_epoch: int
    epochs_run: int
    history: list = field(default_factory=list)


def train_fold(
    cfg: ExperimentConfig,
    data_dir: Path,
    out_dir: Path,
    fold: int = 0,
    resume: Path | None = None,
    log_fn=None,
    splits: tuple | None = None,
) -> FoldResult:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = load_rows(data_dir)
    if splits is None:
        identities = sorted({r.identity for r in rows})
        train_ids, val_ids, eval_ids = fold_identity_split(cfg, identities, fold)
    else:
        train_ids, val_ids, eval_ids = splits

    train_rows = [r for r in rows if r.identity in train_ids]
    class_of = {ident: i for i, ident in enumerate(sorted(train_ids))}
    model = VerificationModel(cfg, num_classes=len(class_of))
    opt = SGD(model.named_parameters(), cfg.optimizer.weight_decay,
              cfg.optimizer.momentum)
    shuffle_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x5F, fold]))

    start_epoch = 1
    best_val = -np.inf
    best_epoch = 0
    improve_epoch = 0
    history: list[dict] = []
    if resume is not None:
        arrays, meta = load_checkpoint(resume)
        if meta["config_hash"] != config_hash(cfg):
            raise ValueError("checkpoint config hash does not match this config")
        model.restore(arrays)
        opt.restore(arrays)
        model.head_2d.mu_z, model.head_2d.sigma_z = meta["head2d_stats"]
        model.head_3d.mu_z, model.head_3d.sigma_z = meta["head3d_stats"]
        shuffle_rng.bit_generator.state = json.loads(meta["rng_state"])
        start_epoch = meta["epoch"] + 1
        best_val = meta["best_val"]
        best_epoch = meta["best_epoch"]
        improve_epoch = meta["improve_epoch"]
        history = meta["history"]

    metrics_log = open(out_dir / "metrics.jsonl", "a")
    step = 0
    epochs_run = start_epoch - 1
    try:
        for epoch in range(start_epoch, cfg.max_epochs + 1):
            lr = cfg.optimizer.lr_at(epoch)
            # warm-start epochs run the plain 2D pipeline; the joint losses
            # switch on afterwards from the 2D-trained weights
            joint = epoch > cfg.pretrain_epochs
            use_jam = cfg.enable_jam and joint
            if cfg.pretrain_epochs and epoch == cfg.pretrain_epochs + 1:
                # the retained checkpoint must come from the final objective:
                # restart model selection and patience at the stage boundary
                best_val = -np.inf
                improve_epoch = epoch - 1
            order = shuffle_rng.permutation(len(train_rows))
            epoch_parts: dict[str, float] = {}
            n_batches = 0
            for lo in range(0, len(order), cfg.batch_size):
                batch = [train_rows[i] for i in order[lo : lo + cfg.batch_size]]
                images = [datafiles.read_image(r.image_path) for r in batch]
                clouds = (
                    [datafiles.read_cloud(r.cloud_path) for r in batch]
                    if use_jam
                    else [None] * len(batch)
                )
                labels = [class_of[r.identity] for r in batch]
                try:
                    with Tape() as tape:
                        loss, parts = model.batch_losses(
                            images, clouds, labels, use_jam=use_jam
                        )
                except FloatingPointError as e:
                    raise TrainingDiverged(
                        f"non-finite forward at epoch {epoch} step {step}: {e}"
                    ) from e
                if not np.isfinite(loss.values):
                    raise TrainingDiverged(
                        f"non-finite loss at epoch {epoch} step {step}: {parts}"
                    )
                grads = tape.backward(loss)
                opt.step(grads, lr)
                step += 1
                n_batches += 1
                for k, v in parts.items():
                    epoch_parts[k] = epoch_parts.get(k, 0.0) + v

            # early stopping tracks the pooled validation TAR@1%FAR: the
            # bin-mean is far too noisy on a small validation identity set
            val_report = identity_report(
                model, rows, val_ids, cfg, fold, average="probe-mean"
            )
            val_tar = val_report.average_tar
            record = {
                "epoch": epoch,
                "lr": lr,
                "val_tar": val_tar,
                **{k: v / n_batches for k, v in epoch_parts.items()},
            }
            history.append(record)
            metrics_log.write(json.dumps(record, sort_keys=True) + "\n")
            metrics_log.flush()
            if log_fn:
                log_fn(record)

            # strict improvement resets patience; a tie only refreshes the
            # best checkpoint (with quantized TAR the later model is the
            # better pick) without extending training
            strictly_better = val_tar > best_val
            improved = val_tar >= best_val
            if strictly_better:
                improve_epoch = epoch
            if improved:
                best_val = val_tar
                best_epoch = epoch
            meta = {
                "config_hash": config_hash(cfg),
                "fold": fold,
                "epoch": epoch,
                "best_val": best_val,
                "best_epoch": best_epoch,
                "improve_epoch": improve_epoch,
                "history": history,
                "head2d_stats": [model.head_2d.mu_z, model.head_2d.sigma_z],
                "head3d_stats": [model.head_3d.mu_z, model.head_3d.sigma_z],
                "rng_state": json.dumps(shuffle_rng.bit_generator.state),
                "classes": sorted(train_ids),
            }
            arrays = {**model.state_arrays(), **opt.state_arrays()}
            save_checkpoint(out_dir / "checkpoint_last.bin", arrays, meta)
            if improved:
                save_checkpoint(out_dir / "checkpoint_best.bin", arrays, meta)

            epochs_run = epoch
            stale = epoch - improve_epoch
            min_epochs = cfg.pretrain_epochs + cfg.early_stopping.min_epochs
            if epoch >= min_epochs and stale >= cfg.early_stopping.patience:
                break
    finally:
        metrics_log.close()

    best_arrays, _ = load_checkpoint(out_dir / "checkpoint_best.bin")
    model.restore(best_arrays)
    report = identity_report(model, rows, eval_ids, cfg, fold)
    verification.write_report(out_dir / "report.json", report)
    return FoldResult(report, best_epoch, epochs_run, history)


def train_single(
    cfg: ExperimentConfig,
    data_dir: Path,
    out_dir: Path,
    resume: Path | None = None,
    log_fn=None,
) -> FoldResult:
    """One training run on the manifest's own train/eval identity split."""
    rows = load_rows(data_dir)
    splits = manifest_identity_split(cfg, rows)
    return train_fold(cfg, data_dir, out_dir, fold=0, resume=resume,
                      log_fn=log_fn, splits=splits)


# ---------------------------------------------------------------------------
# evaluation (2D-only inference)


def evaluate_checkpoint(
    cfg: ExperimentConfig,
    ckpt_path: Path,
    data_dir: Path,
    out_dir: Path | None = None,
    ids: set[int] | None = None,
) -> verification.VerificationReport:
    """Embed gallery and probes through the 2D path only and report.

    Never opens a cloud file; the 3D branch parameters may be absent from
    the checkpoint entirely.
    """
    arrays, meta = load_checkpoint(ckpt_path)
    model = VerificationModel(cfg, num_classes=max(1, len(meta.get("classes", [1]))))
    model.restore(arrays, strict=False)
    rows = [r for r in load_rows(data_dir) if r.split == "eval"]
    if ids is not None:
        rows = [r for r in rows if r.identity in ids]
    gallery = [r for r in rows if r.role == "gallery"]
    probes = [r for r in rows if r.role == "probe"]
    if not gallery or not probes:
        raise ValueError("evaluation split has no gallery or no probe rows")
    scores = score_rows(model, gallery, probes, cfg.gallery_fusion)
    report = verification.pose_binned_report(
        scores, fold=int(meta.get("fold", 0)), average=cfg.average_mode
    )
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        verification.write_report(out_dir / "report.json", report)
        verification.write_curve(out_dir / "curve.csv", verification.roc_curve(scores))
    return report


def export_embeddings(
    cfg: ExperimentConfig, ckpt_path: Path, data_dir: Path, out_dir: Path
) -> tuple[Path, Path]:
    """Write gallery and probe 2D embeddings as delimited text."""
    arrays, meta = load_checkpoint(ckpt_path)
    model = VerificationModel(cfg, num_classes=max(1, len(meta.get("classes", [1]))))
    model.restore(arrays, strict=False)
    rows = [r for r in load_rows(data_dir) if r.split == "eval"]
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for role in ("gallery", "probe"):
        subset = [r for r in rows if r.role == role]
        embs = _embed_rows(model, subset)
        path = out_dir / f"{role}_embeddings.csv"
        verification.write_embeddings(
            path, [r.identity for r in subset], [r.bin for r in subset], embs
        )
        paths.append(path)
    return tuple(paths)


# ---------------------------------------------------------------------------
# folds and ablation


@dataclass
class Aggregate:
    mean: verification.VerificationReport
    std: dict
    folds: list


def aggregate_reports(reports: list[verification.VerificationReport]) -> Aggregate:
    def col(values):
        present = [v for v in values if v is not None]
        if not present:
            return None, None
        return float(np.mean(present)), float(np.std(present))

    tar_mean, tar_std = {}, {}
    for b in POSE_BINS:
        m, s = col([r.tar_by_bin.get(b) for r in reports])
        tar_mean[b] = m
        tar_std[b] = s
    avg_m, avg_s = col([r.average_tar for r in reports])
    auc_m, auc_s = col([r.auc for r in reports])
    eer_m, eer_s = col([r.eer for r in reports])
    mean = verification.VerificationReport(tar_mean, avg_m, auc_m, eer_m, fold=-1)
    std = {"tar_by_bin": tar_std, "average_tar": avg_s, "auc": auc_s, "eer": eer_s}
    return Aggregate(mean, std, [r.as_dict() for r in reports])


def run_folds(
    cfg: ExperimentConfig, data_dir: Path, out_dir: Path, log_fn=None
) -> Aggregate:
    reports = []
    for fold in range(cfg.folds):
        res = train_fold(cfg, data_dir, Path(out_dir) / f"fold{fold}", fold,
                         log_fn=log_fn)
        reports.append(res.report)
    agg = aggregate_reports(reports)
    with open(Path(out_dir) / "aggregate.json", "w") as f:
        json.dump(
            {"mean": agg.mean.as_dict(), "std": agg.std, "folds": agg.folds},
            f, indent=2, sort_keys=True,
        )
    return agg


ABLATION_VARIANTS = {
    "2d-only": {"enable_jam": False, "enable_je": False},
    "jam": {"enable_jam": True, "enable_je": False},
    "jam+je": {"enable_jam": True, "enable_je": True},
}


def ablate(cfg: ExperimentConfig, data_dir: Path, out_dir: Path, log_fn=None) -> dict:
    """Train the 2D-only baseline, attention-only, and attention+entropy
    variants under one config; emit a comparison table and per-fold detail."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    results = {}
    t0 = time.time()
    for name, flags in ABLATION_VARIANTS.items():
        variant_cfg = cfg.variant(**flags)
        agg = run_folds(variant_cfg, data_dir, out_dir / name.replace("+", "_"),
                        log_fn=log_fn)
        results[name] = agg
    table = verification.report_table({k: v.mean for k, v in results.items()})
    (out_dir / "table.txt").write_text(table)
    detail = {
        name: {"mean": agg.mean.as_dict(), "std": agg.std, "folds": agg.folds}
        for name, agg in results.items()
    }
    detail["elapsed_seconds"] = time.time() - t0
    with open(out_dir / "ablation.json", "w") as f:
        json.dump(detail, f, indent=2, sort_keys=True)
    return detail
