"""Training protocol: Adam with warmup+cosine learning rate, linear
consistency-weight ramp, log-interpolated teacher momentum, 3D augmentation,
and the per-batch combination of regression, ranking, and consistency
losses over the N x N prediction matrix.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np
import torch
from scipy import ndimage

from . import losses, ssl
from .datamodel import (
    CaseRecord,
    FetalCase,
    VolumeGrid,
    WeightNormalizer,
    assemble_input,
    load_case,
    read_manifest,
    resize_volume,
)
from .evaluation import compute_metrics
from .network import ArchToggles, PairModel, SSMBlockConfig, build_model


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    batch_size: int = 16
    base_lr: float = 1e-4
    warmup_epochs: int = 5
    alpha: float = 0.001
    beta_end: float = 0.2
    m_start: float = 0.99
    m_end: float = 0.9999
    seed: int = 0
    width_multiplier: float = 1.0
    input_dims: tuple[int, int, int] = (160, 128, 96)
    w_min: float = 0.0
    w_max: float = 5000.0
    # augmentation ranges; collapse them to get exact identity
    flip_prob: float = 0.5
    rotate_deg: float = 15.0
    scale_min: float = 0.9
    scale_max: float = 1.1
    brightness: float = 0.1
    contrast_min: float = 0.9
    contrast_max: float = 1.1

    def __post_init__(self):
        if self.warmup_epochs >= self.epochs:
            raise ValueError(
                f"warmup_epochs ({self.warmup_epochs}) must be < epochs ({self.epochs})"
            )
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 (pairs are needed)")
        object.__setattr__(self, "input_dims", tuple(self.input_dims))

    @classmethod
    def from_json(cls, path: str | Path) -> "TrainConfig":
        data = json.loads(Path(path).read_text())
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise KeyError(f"unknown config key(s): {sorted(unknown)}")
        return cls(**data)

    def to_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=1) + "\n")

    @property
    def normalizer(self) -> WeightNormalizer:
        return WeightNormalizer(self.w_min, self.w_max)


@dataclass(frozen=True)
class Schedule:
    """Pure functions of (step, config); resume-safe by construction."""

    total_steps: int
    warmup_steps: int
    base_lr: float
    beta_end: float
    m_start: float
    m_end: float

    def lr_at(self, step: int) -> float:
        if step < 0:
            raise ValueError("step must be >= 0")
        if self.warmup_steps > 0 and step < self.warmup_steps:
            return self.base_lr * step / self.warmup_steps
        span = max(1, self.total_steps - self.warmup_steps)
        progress = min(1.0, (step - self.warmup_steps) / span)
        return self.base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))

    def beta_at(self, step: int) -> float:
        if step < 0:
            raise ValueError("step must be >= 0")
        return self.beta_end * min(1.0, step / max(1, self.total_steps))

    def m_at(self, step: int) -> float:
        return ssl.momentum_at(step, self.total_steps, self.m_start, self.m_end)


def make_schedule(config: TrainConfig, steps_per_epoch: int) -> Schedule:
    return Schedule(
        total_steps=config.epochs * steps_per_epoch,
        warmup_steps=config.warmup_epochs * steps_per_epoch,
        base_lr=config.base_lr,
        beta_end=config.beta_end,
        m_start=config.m_start,
        m_end=config.m_end,
    )


def _augment_volume(vol: VolumeGrid, rng: np.random.Generator, cfg: TrainConfig) -> VolumeGrid:
    vox = vol.voxels
    spacing = list(vol.spacing)
    if cfg.flip_prob > 0:
        for axis in range(3):
            if rng.random() < cfg.flip_prob:
                vox = np.flip(vox, axis=axis)
    if cfg.rotate_deg > 0:
        axes = [(0, 1), (0, 2), (1, 2)][int(rng.integers(0, 3))]
        angle = float(rng.uniform(-cfg.rotate_deg, cfg.rotate_deg))
        vox = ndimage.rotate(
            vox, angle, axes=axes, reshape=False, order=1,
            mode="constant", cval=0.0, prefilter=False,
        )
    if cfg.scale_max > cfg.scale_min or cfg.scale_min != 1.0:
        f = float(rng.uniform(cfg.scale_min, cfg.scale_max))
        if f != 1.0:
            shape = vox.shape
            vox = ndimage.zoom(vox, f, order=1, mode="constant", cval=0.0, prefilter=False)
            # crop or pad back to the original dims, centered
            out = np.zeros(shape, dtype=np.float32)
            src_slices, dst_slices = [], []
            for s_dim, d_dim in zip(vox.shape, shape):
                if s_dim >= d_dim:
                    off = (s_dim - d_dim) // 2
                    src_slices.append(slice(off, off + d_dim))
                    dst_slices.append(slice(0, d_dim))
                else:
                    off = (d_dim - s_dim) // 2
                    src_slices.append(slice(0, s_dim))
                    dst_slices.append(slice(off, off + s_dim))
            out[tuple(dst_slices)] = vox[tuple(src_slices)]
            vox = out
            spacing = [s / f for s in spacing]
    if cfg.contrast_max > cfg.contrast_min or cfg.contrast_min != 1.0:
        gain = float(rng.uniform(cfg.contrast_min, cfg.contrast_max))
        mean = float(vox.mean())
        vox = mean + gain * (vox - mean)
    if cfg.brightness > 0:
        dyn = float(vox.max() - vox.min())
        vox = vox + float(rng.uniform(-cfg.brightness, cfg.brightness)) * dyn
    return VolumeGrid(np.ascontiguousarray(vox, dtype=np.float32), tuple(spacing))


def augment(case: FetalCase, rng: np.random.Generator, cfg: TrainConfig) -> FetalCase:
    """Randomly perturb both volumes; label and interval are untouched.

    Head and abdomen are augmented independently; any spatial scaling
    updates the volume's spacing by the inverse factor so the spacing
    channels stay physically truthful.
    """
    return FetalCase(
        head=_augment_volume(case.head, rng, cfg),
        abdomen=_augment_volume(case.abdomen, rng, cfg),
        interval_days=case.interval_days,
        weight_g=case.weight_g,
        case_id=case.case_id,
    )


class CaseStore:
    """Manifest-backed case access with an in-memory volume cache."""

    def __init__(self, manifest_path: str | Path):
        self.manifest_path = Path(manifest_path)
        self.root = self.manifest_path.parent
        self.records = read_manifest(self.manifest_path)
        self._cache: dict[str, FetalCase] = {}

    def split(self, name: str) -> list[CaseRecord]:
        return [r for r in self.records if r.split == name]

    def case(self, record: CaseRecord) -> FetalCase:
        hit = self._cache.get(record.case_id)
        if hit is None:
            hit = load_case(record, self.root)
            self._cache[record.case_id] = hit
        return hit


def case_to_tensors(
    case: FetalCase, input_dims: tuple[int, int, int]
) -> tuple[torch.Tensor, torch.Tensor]:
    head = resize_volume(case.head, input_dims)
    abd = resize_volume(case.abdomen, input_dims)
    x_h = torch.from_numpy(assemble_input(head, case.interval_days))
    x_a = torch.from_numpy(assemble_input(abd, case.interval_days))
    return x_h, x_a


def batch_tensors(
    cases: list[FetalCase],
    config: TrainConfig,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    heads, abds, ys = [], [], []
    normalizer = config.normalizer
    for case in cases:
        if case.weight_g is None:
            raise ValueError(f"case {case.case_id} has no weight label")
        x_h, x_a = case_to_tensors(case, config.input_dims)
        heads.append(x_h)
        abds.append(x_a)
        ys.append(normalizer.normalize(case.weight_g))
    return torch.stack(heads), torch.stack(abds), torch.tensor(ys, dtype=torch.float32)


@dataclass
class Trainer:
    """Owns the student, optional teacher, optimizer, and schedule position."""

    model: PairModel
    config: TrainConfig
    schedule: Schedule
    use_sslf: bool = True
    use_rank_loss: bool = True
    teacher: PairModel | None = None
    optimizer: torch.optim.Adam | None = None
    global_step: int = 0

    def __post_init__(self):
        if self.optimizer is None:
            self.optimizer = torch.optim.Adam(
                self.model.parameters(), lr=self.config.base_lr
            )
        if self.use_sslf and self.teacher is None:
            self.teacher = ssl.make_teacher(self.model)

    def train_step(
        self, head_x: torch.Tensor, abd_x: torch.Tensor, y: torch.Tensor
    ) -> dict:
        """One optimizer step on a labeled batch; returns the loss breakdown."""
        if head_x.shape[0] < 2:
            raise ValueError("train_step needs a batch of N >= 2 cases")
        step = self.global_step
        lr = self.schedule.lr_at(step)
        beta = self.schedule.beta_at(step) if self.use_sslf else 0.0
        m = self.schedule.m_at(step)
        alpha = self.config.alpha if self.use_rank_loss else 0.0
        weights = losses.LossWeights(alpha=alpha, beta=beta)

        self.model.train()
        e_h = self.model.encode_head(head_x)
        e_a = self.model.encode_abd(abd_x)
        p_s = self.model.prediction_matrix(e_h, e_a)
        p = p_s.diagonal()
        l_reg = losses.reg_loss(p, y)
        l_rank = losses.rank_loss(p, y)
        if self.use_sslf and beta > 0:
            with torch.no_grad():
                te_h = self.teacher.encode_head(head_x)
                te_a = self.teacher.encode_abd(abd_x)
                p_t = self.teacher.prediction_matrix(te_h, te_a)
            l_semi = losses.semi_loss(p_s, p_t)
        else:
            l_semi = torch.zeros((), dtype=p.dtype)
        total = losses.total_loss(l_reg, l_rank, l_semi, weights)

        for group in self.optimizer.param_groups:
            group["lr"] = lr
        self.optimizer.zero_grad()
        total.backward()
        self.optimizer.step()
        if self.use_sslf:
            ssl.ema_update(self.teacher, self.model, m)
        self.global_step += 1
        return {
            "reg": float(l_reg.detach()),
            "rank": float(l_rank.detach()),
            "semi": float(l_semi.detach()),
            "total": float(total.detach()),
            "lr": lr,
            "beta": beta,
            "m": m,
        }

    @torch.no_grad()
    def predict_cases(
        self, cases: list[FetalCase], use_teacher: bool = False
    ) -> np.ndarray:
        """Deterministic gram-space predictions for a list of cases."""
        model = self.teacher if (use_teacher and self.teacher is not None) else self.model
        model.eval()
        normalizer = self.config.normalizer
        preds = []
        for case in cases:
            x_h, x_a = case_to_tensors(case, self.config.input_dims)
            p = model(x_h, x_a)
            preds.append(normalizer.denormalize(float(p)))
        self.model.train()
        return np.array(preds)


def _epoch_batches(
    n_train: int, batch_size: int, seed: int, epoch: int
) -> list[np.ndarray]:
    rng = np.random.default_rng(np.random.SeedSequence([seed, epoch, 0xB47C]))
    order = rng.permutation(n_train)
    chunks = [order[i : i + batch_size] for i in range(0, n_train, batch_size)]
    return [c for c in chunks if len(c) >= 2]


def steps_per_epoch(n_train: int, batch_size: int) -> int:
    full, rem = divmod(n_train, batch_size)
    return full + (1 if rem >= 2 else 0)


@dataclass(frozen=True)
class FitResult:
    best_checkpoint: Path
    last_checkpoint: Path
    history_path: Path
    best_val_mae_g: float


def save_checkpoint(
    path: str | Path,
    trainer: Trainer,
    toggles: ArchToggles,
    epoch: int,
    best_val_mae_g: float,
) -> None:
    payload = {
        "format_version": 1,
        "width_multiplier": trainer.config.width_multiplier,
        "toggles": asdict(toggles),
        "ssm_config": asdict(trainer.model.ssm_cfg),
        "normalizer": {"w_min": trainer.config.w_min, "w_max": trainer.config.w_max},
        "train_config": asdict(trainer.config),
        "use_sslf": trainer.use_sslf,
        "use_rank_loss": trainer.use_rank_loss,
        "global_step": trainer.global_step,
        "epoch": epoch,
        "best_val_mae_g": best_val_mae_g,
        "student_state": trainer.model.state_dict(),
        "teacher_state": trainer.teacher.state_dict() if trainer.teacher else None,
        "optimizer_state": trainer.optimizer.state_dict(),
    }
    torch.save(payload, Path(path))


def load_checkpoint(path: str | Path) -> dict:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return torch.load(path, map_location="cpu", weights_only=False)


def restore_trainer(payload: dict, steps_per_epoch_count: int) -> tuple[Trainer, ArchToggles, int, float]:
    config = TrainConfig(**payload["train_config"])
    toggles = ArchToggles(**payload["toggles"])
    ssm_cfg = SSMBlockConfig(**payload["ssm_config"])
    model = build_model(config.width_multiplier, toggles, ssm_cfg, seed=config.seed)
    model.load_state_dict(payload["student_state"])
    schedule = make_schedule(config, steps_per_epoch_count)
    trainer = Trainer(
        model=model,
        config=config,
        schedule=schedule,
        use_sslf=payload["use_sslf"],
        use_rank_loss=payload["use_rank_loss"],
    )
    if payload["teacher_state"] is not None:
        trainer.teacher.load_state_dict(payload["teacher_state"])
    trainer.optimizer.load_state_dict(payload["optimizer_state"])
    trainer.global_step = payload["global_step"]
    return trainer, toggles, payload["epoch"], payload["best_val_mae_g"]


def model_from_checkpoint(payload: dict, which: str = "student") -> tuple[PairModel, WeightNormalizer, TrainConfig]:
    config = TrainConfig(**payload["train_config"])
    toggles = ArchToggles(**payload["toggles"])
    ssm_cfg = SSMBlockConfig(**payload["ssm_config"])
    model = build_model(config.width_multiplier, toggles, ssm_cfg, seed=config.seed)
    if which == "teacher":
        if payload["teacher_state"] is None:
            raise ValueError("checkpoint has no teacher parameters")
        model.load_state_dict(payload["teacher_state"])
    elif which == "student":
        model.load_state_dict(payload["student_state"])
    else:
        raise ValueError(f"model must be 'student' or 'teacher', got {which!r}")
    model.eval()
    normalizer = WeightNormalizer(**payload["normalizer"])
    return model, normalizer, config


def fit(
    manifest_path: str | Path,
    config: TrainConfig,
    out_dir: str | Path,
    toggles: ArchToggles = ArchToggles(),
    use_sslf: bool = True,
    use_rank_loss: bool = True,
    resume_from: str | Path | None = None,
    log=None,
) -> FitResult:
    """Train on the manifest's train split, validating each epoch.

    Keeps the best-validation-MAE checkpoint, always writes a resumable
    last checkpoint, and appends one JSON line of history per epoch.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    store = CaseStore(manifest_path)
    train_records = store.split("train")
    val_records = store.split("val")
    if not train_records:
        raise ValueError("manifest has no train split")
    if not val_records:
        raise ValueError("manifest has no val split")

    spe = steps_per_epoch(len(train_records), config.batch_size)
    if spe == 0:
        raise ValueError("train split too small to form a batch of >= 2 cases")

    history_path = out_dir / "history.jsonl"
    best_path = out_dir / "checkpoint_best.pt"
    last_path = out_dir / "checkpoint_last.pt"

    if resume_from is not None:
        payload = load_checkpoint(resume_from)
        trainer, toggles, start_epoch, best_val_mae = restore_trainer(payload, spe)
        config = trainer.config
    else:
        model = build_model(config.width_multiplier, toggles, seed=config.seed)
        trainer = Trainer(
            model=model,
            config=config,
            schedule=make_schedule(config, spe),
            use_sslf=use_sslf,
            use_rank_loss=use_rank_loss,
        )
        start_epoch = 0
        best_val_mae = math.inf
        history_path.write_text("")

    val_cases = [store.case(r) for r in val_records]
    val_true = np.array([r.weight_g for r in val_records])

    for epoch in range(start_epoch, config.epochs):
        sums = {"reg": 0.0, "rank": 0.0, "semi": 0.0, "total": 0.0}
        n_steps = 0
        last = {"lr": 0.0, "beta": 0.0, "m": config.m_start}
        for batch_idx in _epoch_batches(
            len(train_records), config.batch_size, config.seed, epoch
        ):
            cases = []
            for idx in batch_idx:
                raw = store.case(train_records[idx])
                rng = np.random.default_rng(
                    np.random.SeedSequence([config.seed, epoch, int(idx)])
                )
                cases.append(augment(raw, rng, config))
            head_x, abd_x, y = batch_tensors(cases, config)
            out = trainer.train_step(head_x, abd_x, y)
            for key in sums:
                sums[key] += out[key]
            last = out
            n_steps += 1
        preds = trainer.predict_cases(val_cases)
        report = compute_metrics(preds, val_true)
        row = {
            "epoch": epoch,
            "lr": last["lr"],
            "beta": last["beta"],
            "m": last["m"],
            "train_losses": {k: sums[k] / max(1, n_steps) for k in sums},
            "val_mae_g": report.mae_g,
            "val_rmse_g": report.rmse_g,
            "val_mape_pct": report.mape_pct,
        }
        with open(history_path, "a") as fh:
            fh.write(json.dumps(row) + "\n")
        if log is not None:
            log(row)
        if report.mae_g < best_val_mae:
            best_val_mae = report.mae_g
            save_checkpoint(best_path, trainer, toggles, epoch + 1, best_val_mae)
        save_checkpoint(last_path, trainer, toggles, epoch + 1, best_val_mae)
    if not best_path.exists():
        save_checkpoint(best_path, trainer, toggles, config.epochs, best_val_mae)
    return FitResult(
        best_checkpoint=best_path,
        last_checkpoint=last_path,
        history_path=history_path,
        best_val_mae_g=best_val_mae,
    )
