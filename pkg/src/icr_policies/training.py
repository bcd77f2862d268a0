"""Featurisation, multi-task loss, early stopping and the training loops."""

from __future__ import annotations

import csv
import logging
import math
import random
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn
from torch.utils.data import DataLoader, Dataset

from .actions import ACTIONS
from .corpus import GameStateInput
from .encoders import TextEncoder, image_to_tensor, render_scene
from .evaluation import PredictionDump, average_precision
from .model import ConfigError, ModelConfig, PolicyModel

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "icr-ckpt/1"


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 32
    gradient_clip: float = 1.0
    accumulate_gradient: int = 1
    weight_decay: float = 0.0
    lr_scheduler: bool = False
    max_epochs: int = 30
    patience: int = 8
    min_delta: float = 0.001
    pos_weight: float = 2.0
    seed: int = 12345
    context_length: int = 3
    deterministic: bool = False
    render_width: int = 500
    render_height: int = 400
    device: str = "cpu"

    def __post_init__(self) -> None:
        for name in ("learning_rate", "batch_size", "accumulate_gradient", "max_epochs", "patience"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        for name in ("gradient_clip", "weight_decay", "min_delta", "pos_weight", "context_length"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if self.lr_scheduler:
            raise ConfigError("learning-rate schedules are not supported")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name: f for f in fields(cls)}
        out = {}
        for k, v in d.items():
            if k not in known:
                raise ConfigError(f"unknown training option {k!r}")
            out[k] = v
        return cls(**out)


def parse_key_value_config(text: str) -> dict:
    """``key = value`` lines (``#`` comments) with values coerced to the TrainConfig field types."""
    types = {f.name: f.type for f in fields(TrainConfig)}
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        kind = types.get(key)
        if kind is None:
            raise ConfigError(f"line {lineno}: unknown training option {key!r}")
        if kind in ("bool", bool):
            if value.lower() not in ("true", "false", "1", "0"):
                raise ConfigError(f"line {lineno}: {key} expects true/false")
            out[key] = value.lower() in ("true", "1")
        elif kind in ("int", int):
            out[key] = int(value)
        elif kind in ("float", float):
            out[key] = float(value)
        else:
            out[key] = value
    return out


def seed_everything(seed: int, deterministic: bool = False) -> None:
    random.seed(seed)
    np.random.seed(seed)
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(deterministic, warn_only=True)


# --- featurisation -----------------------------------------------------------

class Featurizer:
    """Turns :class:`GameStateInput` records into model-ready tensors.

    Text embeddings come from the frozen encoder and are cached per
    (game, turn, context) since they never change during training.
    """

    def __init__(self, model_cfg: ModelConfig, text_encoder: TextEncoder | None,
                 context_length: int = 3, resolution: tuple[int, int] = (500, 400),
                 asset_dir: str | None = None):
        if model_cfg.use_dialogue and text_encoder is None:
            raise ConfigError("a text encoder is required when the dialogue is an input")
        if model_cfg.use_dialogue and text_encoder.dim != model_cfg.text_dim:
            raise ConfigError(f"text encoder width {text_encoder.dim} != text_dim {model_cfg.text_dim}")
        if model_cfg.use_dialogue and (context_length + 1) * 80 > model_cfg.max_text_len:
            raise ConfigError("context does not fit in max_text_len")
        self.cfg = model_cfg
        self.text_encoder = text_encoder
        self.context_length = context_length
        self.resolution = resolution
        self.asset_dir = asset_dir
        self._text_cache: dict[tuple[str, int], tuple[torch.Tensor, torch.Tensor]] = {}

    def text(self, rec: GameStateInput) -> tuple[torch.Tensor, torch.Tensor]:
        key = (rec.game_id, rec.turn_index)
        hit = self._text_cache.get(key)
        if hit is None:
            window = self.text_encoder.window(rec.dialogue, rec.turn_index, self.context_length)
            hit = self.text_encoder.encode(window)
            self._text_cache[key] = hit
        return hit

    def __call__(self, rec: GameStateInput) -> dict[str, torch.Tensor]:
        cat, pos = rec.gallery_before.to_arrays()
        item = {
            "gallery_cat": torch.from_numpy(cat),
            "gallery_pos": torch.from_numpy(pos),
            "actions": torch.from_numpy(rec.actions.matrix.astype(np.float32)),
            "gold_actions": torch.from_numpy(rec.actions.matrix[:, :4].astype(np.float32)),
            "icr_turn": torch.tensor(float(rec.is_icr)),
            "icr_clipart": torch.tensor(rec.icr_cliparts, dtype=torch.float32),
        }
        if self.cfg.use_dialogue:
            item["text_emb"], item["text_pad"] = self.text(rec)
        if self.cfg.use_scene_before:
            item["scene_before"] = image_to_tensor(render_scene(rec.gallery_before, self.resolution, self.asset_dir))
        if self.cfg.use_scene_after:
            item["scene_after"] = image_to_tensor(render_scene(rec.gallery_after, self.resolution, self.asset_dir))
        return item


class TurnDataset(Dataset):
    def __init__(self, records: Sequence[GameStateInput], featurizer: Featurizer):
        self.records = list(records)
        self.featurizer = featurizer

    def __len__(self) -> int:
        return len(self.records)

    def __getitem__(self, i: int) -> dict[str, torch.Tensor]:
        return self.featurizer(self.records[i])


def collate(items: list[dict[str, torch.Tensor]]) -> dict[str, torch.Tensor]:
    return {k: torch.stack([it[k] for it in items]) for k in items[0]}


def move_batch(batch: dict, device: str | torch.device) -> dict:
    return {k: v.to(device) for k, v in batch.items()}


# --- loss --------------------------------------------------------------------

def task_losses(outputs: dict[str, torch.Tensor], batch: dict[str, torch.Tensor],
                pos_weight: float = 2.0) -> dict[str, torch.Tensor]:
    """Summed, positively weighted BCE-with-logits per task (each action is one task)."""
    pw = torch.tensor(pos_weight)
    losses = {}
    if "action_logits" in outputs:
        logits, target = outputs["action_logits"], batch["actions"]
        if logits.shape != target.shape:
            raise ValueError(f"action logits {tuple(logits.shape)} vs labels {tuple(target.shape)}")
        for k, name in enumerate(ACTIONS):
            losses[name] = nn.functional.binary_cross_entropy_with_logits(
                logits[..., k], target[..., k], reduction="sum", pos_weight=pw.to(logits.device))
    if "icr_logits" in outputs:
        logits = outputs["icr_logits"]
        target = batch["icr_turn"] if logits.dim() == 1 else batch["icr_clipart"]
        if logits.shape != target.shape:
            raise ValueError(f"iCR logits {tuple(logits.shape)} vs labels {tuple(target.shape)}")
        losses["icr"] = nn.functional.binary_cross_entropy_with_logits(
            logits, target, reduction="sum", pos_weight=pw.to(logits.device))
    return losses


def compute_loss(outputs: dict[str, torch.Tensor], batch: dict[str, torch.Tensor],
                 pos_weight: float = 2.0) -> torch.Tensor:
    """Unweighted sum of all task losses."""
    losses = task_losses(outputs, batch, pos_weight)
    if not losses:
        raise ValueError("outputs contain no predictions")
    return torch.stack(list(losses.values())).sum()


# --- early stopping ----------------------------------------------------------

class EarlyStopping:
    """Stop when the monitored metric has not risen by more than ``min_delta``
    for ``patience`` consecutive epochs (maximisation)."""

    def __init__(self, patience: int = 8, min_delta: float = 0.001):
        self.patience = patience
        self.min_delta = min_delta
        self.best = -math.inf
        self.wait = 0
        self.stopped_epoch: int | None = None

    def step(self, value: float, epoch: int | None = None) -> bool:
        if value - self.min_delta > self.best:
            self.best = value
            self.wait = 0
        else:
            self.wait += 1
        if self.wait >= self.patience:
            self.stopped_epoch = epoch
            return True
        return False


def run_early_stopping(trace: Sequence[float], patience: int = 8, min_delta: float = 0.001,
                       max_epochs: int = 30) -> tuple[int, int]:
    """Replay a metric trace: (number of epochs run, selected best epoch)."""
    stopper = EarlyStopping(patience, min_delta)
    best_epoch, best = 0, -math.inf
    n = 0
    for epoch, value in enumerate(trace[:max_epochs]):
        n = epoch + 1
        if value > best:
            best, best_epoch = value, epoch
        if stopper.step(value, epoch):
            break
    return n, best_epoch


# --- checkpoints -------------------------------------------------------------

def save_checkpoint(path: str | Path, model: PolicyModel, train_cfg: TrainConfig | None, epoch: int,
                    metric: float | None, metric_name: str | None = None, extra: dict | None = None) -> None:
    torch.save({
        "format": CHECKPOINT_FORMAT,
        "state_dict": model.state_dict(),
        "model_config": model.cfg.to_dict(),
        "train_config": train_cfg.to_dict() if train_cfg else None,
        "epoch": epoch,
        "monitored_metric": metric,
        "metric_name": metric_name,
        "extra": extra or {},
    }, path)


def load_checkpoint(path: str | Path) -> tuple[PolicyModel, dict]:
    ckpt = torch.load(path, map_location="cpu", weights_only=False)
    if ckpt.get("format") != CHECKPOINT_FORMAT:
        raise TrainingError(f"{path} is not a policy checkpoint")
    cfg = ModelConfig.from_dict(ckpt["model_config"])
    cfg.pretrained_backbone = False  # weights come from the state dict
    model = PolicyModel(cfg)
    model.load_state_dict(ckpt["state_dict"])
    model.eval()
    return model, ckpt


def frozen_checksum(model: nn.Module) -> str:
    """Digest of every frozen parameter (the pretrained backbone)."""
    import hashlib

    h = hashlib.sha256()
    for name, p in sorted(model.named_parameters()):
        if not p.requires_grad:
            h.update(name.encode())
            h.update(p.detach().cpu().numpy().tobytes())
    return h.hexdigest()


# --- loops ---------------------------------------------------------------------

def monitored_metric_name(cfg: ModelConfig) -> str:
    return "icr_ap" if cfg.has_icr_head else "acted_upon_ap"


@torch.no_grad()
def predict_dump(model: PolicyModel, records: Sequence[GameStateInput], featurizer: Featurizer,
                 batch_size: int = 32, device: str = "cpu") -> PredictionDump:
    """Accumulate logits and labels over a split (evaluation mode)."""
    model.eval()
    loader = DataLoader(TurnDataset(records, featurizer), batch_size=batch_size, shuffle=False,
                        collate_fn=collate)
    acc: dict[str, list] = {"action_logits": [], "icr_logits": [], "actions": [],
                            "icr_turn": [], "icr_clipart": []}
    for batch in loader:
        out = model(move_batch(batch, device))
        for k in ("action_logits", "icr_logits"):
            if k in out:
                acc[k].append(out[k].float().cpu().numpy())
        for k in ("actions", "icr_turn", "icr_clipart"):
            acc[k].append(batch[k].numpy())
    cat = {k: (np.concatenate(v) if v else None) for k, v in acc.items()}
    return PredictionDump(
        game_id=np.array([r.game_id for r in records]),
        turn_index=np.array([r.turn_index for r in records], dtype=np.int64),
        task=model.cfg.task,
        action_logits=cat["action_logits"],
        action_labels=cat["actions"].astype(np.int8) if cat["actions"] is not None else None,
        icr_logits=cat["icr_logits"],
        icr_turn_labels=cat["icr_turn"].astype(np.int8) if cat["icr_turn"] is not None else None,
        icr_clipart_labels=cat["icr_clipart"].astype(np.int8) if cat["icr_clipart"] is not None else None,
    )


def monitored_value(dump: PredictionDump, cfg: ModelConfig) -> float:
    if cfg.has_icr_head:
        scores, labels = dump.icr_scores_and_labels()
    else:
        scores = dump.action_logits[..., ACTIONS.index("acted_upon")].ravel()
        labels = dump.action_labels[..., ACTIONS.index("acted_upon")].ravel()
    return average_precision(scores, labels)


def train(model: PolicyModel, train_records: Sequence[GameStateInput], val_records: Sequence[GameStateInput],
          featurizer: Featurizer, cfg: TrainConfig, run_dir: str | Path,
          extra: dict | None = None) -> Path:
    """Adam training with early stopping on the validation AP; returns ``best.ckpt``."""
    if not train_records or not val_records:
        raise TrainingError("training and validation records must be non-empty")
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    seed_everything(cfg.seed, cfg.deterministic)
    device = torch.device(cfg.device)
    model.to(device)

    params = [p for p in model.parameters() if p.requires_grad]
    optim = torch.optim.Adam(params, lr=cfg.learning_rate, weight_decay=cfg.weight_decay)
    gen = torch.Generator().manual_seed(cfg.seed)
    loader = DataLoader(TurnDataset(train_records, featurizer), batch_size=cfg.batch_size, shuffle=True,
                        generator=gen, collate_fn=collate)
    metric_name = monitored_metric_name(model.cfg)
    stopper = EarlyStopping(cfg.patience, cfg.min_delta)
    best_metric = -math.inf
    log_path = run_dir / "metrics.csv"
    with open(log_path, "w", newline="", encoding="utf-8") as fh:
        csv.writer(fh).writerow(["epoch", "train_loss", metric_name, "best"])

    for epoch in range(cfg.max_epochs):
        model.train()
        total, n_batches = 0.0, 0
        optim.zero_grad()
        for step, batch in enumerate(loader, start=1):
            batch = move_batch(batch, device)
            loss = compute_loss(model(batch), batch, cfg.pos_weight)
            if not torch.isfinite(loss):
                raise TrainingError(f"non-finite loss {loss.item()} at epoch {epoch}, batch {step}")
            (loss / cfg.accumulate_gradient).backward()
            if step % cfg.accumulate_gradient == 0 or step == len(loader):
                if cfg.gradient_clip > 0:
                    nn.utils.clip_grad_norm_(params, cfg.gradient_clip)
                optim.step()
                optim.zero_grad()
            total += loss.item()
            n_batches += 1

        dump = predict_dump(model, val_records, featurizer, cfg.batch_size, cfg.device)
        try:
            value = monitored_value(dump, model.cfg)
        except ValueError as exc:
            raise TrainingError(f"validation metric undefined: {exc}") from exc
        improved = value > best_metric
        ckpt_path = run_dir / f"epoch-{epoch}.ckpt"
        save_checkpoint(ckpt_path, model, cfg, epoch, value, metric_name, extra)
        if improved:
            best_metric = value
            save_checkpoint(run_dir / "best.ckpt", model, cfg, epoch, value, metric_name, extra)
        with open(log_path, "a", newline="", encoding="utf-8") as fh:
            csv.writer(fh).writerow([epoch, f"{total / max(n_batches, 1):.6f}", f"{value:.6f}", int(improved)])
        log.info("epoch %d loss %.4f %s %.4f", epoch, total / max(n_batches, 1), metric_name, value)
        if stopper.step(value, epoch):
            log.info("early stopping at epoch %d", epoch)
            break
    return run_dir / "best.ckpt"


def init_from_pretrained(target: PolicyModel, checkpoint: str | Path) -> list[str]:
    """Copy every shared parameter except the iCR heads from an action-taking checkpoint."""
    source, ckpt = load_checkpoint(checkpoint)
    s, t = source.cfg, target.cfg
    if not s.has_action_heads:
        raise ConfigError(f"checkpoint variant {s.variant!r} has no action modules to initialise from")
    for key in ("d_model", "n_heads", "n_layers", "feedforward_dim", "head_hidden_dim", "text_dim",
                "use_dialogue", "use_scene_before", "use_scene_after", "backbone"):
        if getattr(s, key) != getattr(t, key):
            raise ConfigError(f"checkpoint {key}={getattr(s, key)!r} is incompatible with {getattr(t, key)!r}")
    if not t.has_action_heads:
        raise ConfigError("fine-tuning target must predict actions")
    src = {k: v for k, v in source.state_dict().items() if not k.startswith("icr_")}
    missing, _ = target.load_state_dict(src, strict=False)
    return [k for k in missing if not k.startswith("icr_")]


def finetune_what(pretrained_checkpoint: str | Path, model_cfg: ModelConfig,
                  train_records: Sequence[GameStateInput], val_records: Sequence[GameStateInput],
                  featurizer: Featurizer, cfg: TrainConfig, run_dir: str | Path) -> Path:
    """Task-2 training initialised from the best Action-Taker / Action-Detecter."""
    if model_cfg.task != "what":
        raise ConfigError("finetune_what trains clipart-level (task='what') models")
    if any(r.task != "what" or not r.is_icr for r in list(train_records) + list(val_records)):
        raise ConfigError("Task-2 data must contain iCR turns only")
    seed_everything(cfg.seed, cfg.deterministic)
    model = PolicyModel(model_cfg)
    left = init_from_pretrained(model, pretrained_checkpoint)
    if left:
        raise ConfigError(f"parameters not covered by the checkpoint: {left}")
    return train(model, train_records, val_records, featurizer, cfg, run_dir,
                 extra={"init_from": str(pretrained_checkpoint)})
