"""Gallery embedder, Transformer decoder and classifier heads.

One module covers the four model families: the Overhearer (iCR head only),
the Action-Taker (action heads only), the iCR-Action-Taker (both) and the
iCR-Action-Detecter (both, with the scenes before and after the turn).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from typing import Literal

import numpy as np
import torch
from torch import nn

from .actions import ACTIONS, N_ACTIONS
from .encoders import (
    DEFAULT_BACKBONE,
    SceneEncoder,
    sinusoidal_positions,
)
from .game_state import (
    FACE_VOCAB,
    GALLERY_SIZE,
    ID_VOCAB,
    N_POSITIONAL,
    ORIENTATION_VOCAB,
    POSE_VOCAB,
    PRESENCE_VOCAB,
    SIZE_VOCAB,
)

Variant = Literal["overhearer", "action_taker", "icr_action_taker", "icr_action_detecter"]
VARIANTS = ("overhearer", "action_taker", "icr_action_taker", "icr_action_detecter")

# id, orientation, presence, size, face, pose widths (id width is d_model - 100)
FEATURE_WIDTHS = (10, 10, 10, 20, 20)
POSITION_WIDTH = 30
GOLD_ACTION_WIDTH = 4

INPUT_FLAGS = (
    ("use_dialogue", "D"),
    ("use_scene_before", "S_b"),
    ("use_scene_after", "S_a"),
    ("use_gold_actions", "A"),
    ("use_action_logits", "L_A"),
)


class ConfigError(ValueError):
    """An inconsistent model configuration."""


@dataclass
class ModelConfig:
    d_model: int = 256
    n_heads: int = 16
    n_layers: int = 3
    feedforward_dim: int = 2048
    head_hidden_dim: int = 256
    dropout: float = 0.1
    use_dialogue: bool = True
    use_scene_before: bool = False
    use_scene_after: bool = False
    use_gold_actions: bool = False
    use_action_logits: bool = False
    variant: str = "overhearer"
    task: str = "when"
    text_dim: int = 768
    max_text_len: int = 4 * 80
    backbone: str = DEFAULT_BACKBONE
    pretrained_backbone: bool = True
    detach_action_logits: bool = False
    key_padding_mask: bool = True

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}")
        if self.task not in ("when", "what"):
            raise ConfigError(f"unknown task {self.task!r}")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if self.d_model - 100 < 1:
            raise ConfigError("d_model must exceed 100 to leave room for the clipart id embedding")
        if self.use_gold_actions and self.use_action_logits:
            raise ConfigError("gold actions (A) and action logits (L_A) are mutually exclusive")
        if self.variant == "icr_action_detecter" and not (self.use_scene_before and self.use_scene_after):
            raise ConfigError("the iCR-Action-Detecter needs both scenes (S_b and S_a)")
        if self.variant == "overhearer" and self.use_action_logits:
            raise ConfigError("the Overhearer has no action heads to take logits from")
        if self.variant == "action_taker" and (self.use_action_logits or self.use_gold_actions):
            raise ConfigError("the Action-Taker has no iCR head to feed actions into")

    @property
    def has_action_heads(self) -> bool:
        return self.variant != "overhearer"

    @property
    def has_icr_head(self) -> bool:
        return self.variant != "action_taker"

    @property
    def uses_scenes(self) -> bool:
        return self.use_scene_before or self.use_scene_after

    @property
    def action_info_width(self) -> int:
        if self.use_gold_actions:
            return GOLD_ACTION_WIDTH
        if self.use_action_logits:
            return N_ACTIONS
        return 0

    def inputs_label(self) -> str:
        """Input set in the results-table notation, e.g. ``"G, D, S_b"``."""
        return ", ".join(["G"] + [tag for name, tag in INPUT_FLAGS if getattr(self, name)])

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})

    @classmethod
    def from_inputs(cls, variant: str, inputs: str | list[str], task: str = "when", **kw) -> "ModelConfig":
        """Build from a table label such as ``"G, D, S_b, L_A"``."""
        if isinstance(inputs, str):
            inputs = inputs.replace("S_{a,b}", "S_ab").split(",")
        tags = [t.strip() for t in inputs]
        tags = [t for t in tags if t]
        by_tag = {tag: name for name, tag in INPUT_FLAGS}
        if "S_ab" in tags or "S_{a,b}" in tags:
            tags = [t for t in tags if t not in ("S_ab", "S_{a,b}")] + ["S_b", "S_a"]
        unknown = [t for t in tags if t != "G" and t not in by_tag]
        if unknown or "G" not in tags:
            raise ConfigError(f"bad input set {inputs!r}; expected G plus any of {list(by_tag)}")
        flags = {name: False for name, _ in INPUT_FLAGS}
        for t in tags:
            if t != "G":
                flags[by_tag[t]] = True
        return cls(variant=variant, task=task, **flags, **kw)


@dataclass
class PredictionRecord:
    """Outputs for one decision point; fields are ``None`` when the variant lacks the head."""

    action_logits: np.ndarray | None = None
    action_probabilities: np.ndarray | None = None
    icr_turn_logit: float | None = None
    icr_turn_probability: float | None = None
    icr_clipart_logits: np.ndarray | None = None
    icr_clipart_probabilities: np.ndarray | None = None


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-np.asarray(x, dtype=np.float64)))


def to_prediction_records(outputs: dict[str, torch.Tensor]) -> list[PredictionRecord]:
    """Split a batched forward output into per-sample records."""
    n = next(iter(outputs.values())).shape[0]
    recs = []
    for i in range(n):
        rec = PredictionRecord()
        if "action_logits" in outputs:
            a = outputs["action_logits"][i].detach().cpu().numpy()
            rec.action_logits, rec.action_probabilities = a, _sigmoid(a)
        if "icr_logits" in outputs:
            v = outputs["icr_logits"][i].detach().cpu().numpy()
            if v.ndim == 0:
                rec.icr_turn_logit, rec.icr_turn_probability = float(v), float(_sigmoid(v))
            else:
                rec.icr_clipart_logits, rec.icr_clipart_probabilities = v, _sigmoid(v)
        recs.append(rec)
    return recs


def make_head(in_dim: int, hidden: int, dropout: float) -> nn.Sequential:
    """leaky ReLU, dropout, linear, leaky ReLU, linear -> one logit."""
    return nn.Sequential(
        nn.LeakyReLU(),
        nn.Dropout(dropout),
        nn.Linear(in_dim, hidden),
        nn.LeakyReLU(),
        nn.Linear(hidden, 1),
    )


class GalleryEmbedder(nn.Module):
    def __init__(self, d_model: int):
        super().__init__()
        self.id_embed = nn.Embedding(ID_VOCAB, d_model - 100)
        self.orientation_embed = nn.Embedding(ORIENTATION_VOCAB, FEATURE_WIDTHS[0])
        self.presence_embed = nn.Embedding(PRESENCE_VOCAB, FEATURE_WIDTHS[1])
        self.size_embed = nn.Embedding(SIZE_VOCAB, FEATURE_WIDTHS[2])
        self.face_embed = nn.Embedding(FACE_VOCAB, FEATURE_WIDTHS[3])
        self.pose_embed = nn.Embedding(POSE_VOCAB, FEATURE_WIDTHS[4])
        self.position = nn.Linear(N_POSITIONAL, POSITION_WIDTH)
        self.d_model = d_model
        for emb in self.embeddings():
            nn.init.normal_(emb.weight, 0.0, 0.02)

    def embeddings(self) -> list[nn.Embedding]:
        return [self.id_embed, self.orientation_embed, self.presence_embed,
                self.size_embed, self.face_embed, self.pose_embed]

    def forward(self, categorical: torch.Tensor, positional: torch.Tensor) -> torch.Tensor:
        """``(B, 28, 6)`` indices and ``(B, 28, 5)`` positions -> ``(B, 28, d_model)``."""
        parts = [emb(categorical[..., k]) for k, emb in enumerate(self.embeddings())]
        parts.append(self.position(positional))
        out = torch.cat(parts, dim=-1)
        assert out.shape[-1] == self.d_model, "embedding widths must add up to d_model"
        return out


class DecoderLayer(nn.Module):
    """Post-norm decoder layer; cross-attention is skipped when there is no memory."""

    def __init__(self, d_model: int, n_heads: int, feedforward_dim: int, dropout: float):
        super().__init__()
        self.self_attn = nn.MultiheadAttention(d_model, n_heads, dropout=dropout, batch_first=True)
        self.cross_attn = nn.MultiheadAttention(d_model, n_heads, dropout=dropout, batch_first=True)
        self.linear1 = nn.Linear(d_model, feedforward_dim)
        self.linear2 = nn.Linear(feedforward_dim, d_model)
        self.norm1 = nn.LayerNorm(d_model)
        self.norm2 = nn.LayerNorm(d_model)
        self.norm3 = nn.LayerNorm(d_model)
        self.dropout = nn.Dropout(dropout)
        self.dropout1 = nn.Dropout(dropout)
        self.dropout2 = nn.Dropout(dropout)
        self.dropout3 = nn.Dropout(dropout)

    def forward(self, x, memory=None, memory_pad=None):
        x = self.norm1(x + self.dropout1(self.self_attn(x, x, x, need_weights=False)[0]))
        if memory is not None:
            attn = self.cross_attn(x, memory, memory, key_padding_mask=memory_pad, need_weights=False)[0]
            x = self.norm2(x + self.dropout2(attn))
        ff = self.linear2(self.dropout(torch.relu(self.linear1(x))))
        return self.norm3(x + self.dropout3(ff))


class PolicyModel(nn.Module):
    """Overhearer / (iCR-)Action-Taker / iCR-Action-Detecter.

    ``forward`` takes a batch dict with ``gallery_cat`` ``(B, 28, 6)`` and
    ``gallery_pos`` ``(B, 28, 5)``, plus, as the configuration requires,
    ``text_emb`` ``(B, L, text_dim)`` with ``text_pad`` ``(B, L)`` (True at
    padding), ``scene_before``/``scene_after`` ``(B, 3, H, W)`` and
    ``gold_actions`` ``(B, 28, 4)``.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.gallery = GalleryEmbedder(cfg.d_model)
        if cfg.use_dialogue:
            self.text_proj = nn.Linear(cfg.text_dim, cfg.d_model)
            self.register_buffer("text_positions", sinusoidal_positions(cfg.max_text_len, cfg.d_model),
                                 persistent=False)
        if cfg.uses_scenes:
            self.scene = SceneEncoder(cfg.d_model, cfg.backbone, cfg.pretrained_backbone, cfg.dropout)
        self.layers = nn.ModuleList(
            DecoderLayer(cfg.d_model, cfg.n_heads, cfg.feedforward_dim, cfg.dropout)
            for _ in range(cfg.n_layers))
        if cfg.has_action_heads:
            self.action_heads = nn.ModuleDict(
                {name: make_head(cfg.d_model, cfg.head_hidden_dim, cfg.dropout) for name in ACTIONS})
        if cfg.has_icr_head:
            head = make_head(cfg.d_model + cfg.action_info_width, cfg.head_hidden_dim, cfg.dropout)
            if cfg.task == "when":
                self.icr_turn_head = head
            else:
                self.icr_clipart_head = head

    # -- components -----------------------------------------------------------

    def embed_gallery(self, categorical: torch.Tensor, positional: torch.Tensor) -> torch.Tensor:
        return self.gallery(categorical, positional)

    def build_memory(self, batch: dict) -> tuple[torch.Tensor | None, torch.Tensor | None]:
        """Concatenate [text tokens; scene before; scene after] into one sequence."""
        cfg = self.cfg
        parts, pads = [], []
        if cfg.use_dialogue:
            text = batch["text_emb"]
            if text.shape[-1] != cfg.text_dim:
                raise ValueError(f"text embeddings have width {text.shape[-1]}, expected {cfg.text_dim}")
            n = text.shape[1]
            if n > cfg.max_text_len:
                raise ValueError(f"text sequence of {n} tokens exceeds max_text_len={cfg.max_text_len}")
            parts.append(self.text_proj(text) + self.text_positions[:n].unsqueeze(0))
            pads.append(batch["text_pad"].bool())
        for key, flag in (("scene_before", cfg.use_scene_before), ("scene_after", cfg.use_scene_after)):
            if not flag:
                continue
            if batch.get(key) is None:
                raise ValueError(f"configuration requires {key} but the batch lacks it")
            feats = self.scene(batch[key])
            parts.append(feats)
            pads.append(torch.zeros(feats.shape[:2], dtype=torch.bool, device=feats.device))
        if not parts:
            return None, None
        memory = torch.cat(parts, dim=1)
        pad = torch.cat(pads, dim=1) if cfg.key_padding_mask else None
        return memory, pad

    def contextualize(self, gallery_emb: torch.Tensor, memory: torch.Tensor | None,
                      memory_pad: torch.Tensor | None = None) -> torch.Tensor:
        if memory is not None and memory.shape[-1] != self.cfg.d_model:
            raise ValueError(f"memory width {memory.shape[-1]} != d_model {self.cfg.d_model}")
        x = gallery_emb
        for layer in self.layers:
            x = layer(x, memory, memory_pad)
        return x

    def predict_actions(self, contextual: torch.Tensor) -> torch.Tensor:
        """``(B, 28, d_model)`` -> ``(B, 28, 5)`` logits in :data:`ACTIONS` order."""
        if not self.cfg.has_action_heads:
            raise ConfigError(f"variant {self.cfg.variant!r} has no action heads")
        return torch.cat([self.action_heads[name](contextual) for name in ACTIONS], dim=-1)

    def predict_icr(self, contextual: torch.Tensor, action_info: torch.Tensor | None = None) -> torch.Tensor:
        """Turn-level ``(B,)`` or clipart-level ``(B, 28)`` iCR logits."""
        cfg = self.cfg
        if not cfg.has_icr_head:
            raise ConfigError(f"variant {cfg.variant!r} has no iCR head")
        width = cfg.action_info_width
        if (action_info is None) != (width == 0):
            raise ConfigError("action information must be given exactly when the head is configured for it")
        h = contextual
        if action_info is not None:
            if action_info.shape[-1] != width:
                raise ValueError(f"action info has width {action_info.shape[-1]}, expected {width}")
            h = torch.cat([h, action_info.to(h.dtype)], dim=-1)
        if cfg.task == "when":
            return self.icr_turn_head(h.mean(dim=1)).squeeze(-1)
        return self.icr_clipart_head(h).squeeze(-1)

    def forward(self, batch: dict) -> dict[str, torch.Tensor]:
        cfg = self.cfg
        emb = self.embed_gallery(batch["gallery_cat"], batch["gallery_pos"])
        memory, pad = self.build_memory(batch)
        ctx = self.contextualize(emb, memory, pad)
        out = {}
        if cfg.has_action_heads:
            out["action_logits"] = self.predict_actions(ctx)
        if cfg.has_icr_head:
            info = None
            if cfg.use_gold_actions:
                info = batch["gold_actions"]
            elif cfg.use_action_logits:
                info = out["action_logits"]
                if cfg.detach_action_logits:
                    info = info.detach()
            out["icr_logits"] = self.predict_icr(ctx, info)
        return out

    def predict(self, batch: dict) -> list[PredictionRecord]:
        was_training = self.training
        self.eval()
        with torch.no_grad():
            out = self(batch)
        self.train(was_training)
        return to_prediction_records(out)


def count_parameters(model: nn.Module, trainable_only: bool = False) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad or not trainable_only)
