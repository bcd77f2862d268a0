"""Memory sequence construction: dialogue tokens and scene features."""

from __future__ import annotations

import colorsys
import math
import os
import string
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .game_state import (
    CANVAS_HEIGHT,
    CANVAS_WIDTH,
    Gallery,
    compute_bounding_box,
    load_inventory,
    PERSON_IDS,
)

TELLER = "<TELLER>"
DRAWER = "<DRAWER>"
SLOT_LEN = 80
DEFAULT_TEXT_ENCODER = "bert-base-uncased"
DEFAULT_BACKBONE = "resnet50"
TINY_TEXT_ENCODER = "tiny-bert"
ASSETS_ENV = "CODRAW_ASSETS"
BACKGROUND = (255, 255, 255)

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


@dataclass(frozen=True)
class DialogueWindow:
    """Token ids of ``context + 1`` slots of ``SLOT_LEN`` tokens, newest slot last."""

    input_ids: np.ndarray
    attention_mask: np.ndarray
    context: int

    @property
    def n_slots(self) -> int:
        return self.context + 1

    def flat_mask(self) -> np.ndarray:
        return self.attention_mask.reshape(-1)


def slot_text(turns: Sequence, k: int) -> str:
    """Speaker-tagged text of turn ``k``: the previous IF utterance, then the IG's."""
    parts = []
    if k > 0 and turns[k - 1].if_utterance.strip():
        parts.append(f"{DRAWER} {turns[k - 1].if_utterance.strip()}")
    parts.append(f"{TELLER} {turns[k].ig_utterance.strip()}")
    return " ".join(parts)


def assemble_dialogue_text(turns: Sequence, t: int, c: int, tokenizer,
                           slot_len: int = SLOT_LEN) -> DialogueWindow:
    """Tokenise turn ``t`` and its ``c`` predecessors into fixed-width slots.

    Each slot is right-padded; history slots before the first turn are pure
    padding, so the newest instruction always occupies tokens
    ``[c * slot_len, (c + 1) * slot_len)``.
    """
    if c < 0:
        raise ValueError("context length must be non-negative")
    pad_id = tokenizer.pad_token_id
    ids = np.full((c + 1, slot_len), pad_id, dtype=np.int64)
    mask = np.zeros((c + 1, slot_len), dtype=np.int64)
    for slot, k in enumerate(range(t - c, t + 1)):
        if k < 0:
            continue
        enc = tokenizer(slot_text(turns, k), max_length=slot_len, truncation=True,
                        padding="max_length")
        ids[slot] = enc["input_ids"]
        mask[slot] = enc["attention_mask"]
    return DialogueWindow(ids, mask, c)


def _tiny_vocab() -> list[str]:
    chars = list(string.ascii_lowercase + string.digits + string.punctuation)
    return ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"] + chars + ["##" + ch for ch in chars]


class TextEncoder:
    """Frozen pretrained masked-language encoder with speaker special tokens.

    ``identifier`` is a HuggingFace model name or local path, or
    ``"tiny-bert"`` for a small randomly initialised (seeded) BERT with a
    character-level vocabulary that runs without downloads.
    """

    def __init__(self, tokenizer, model: nn.Module, identifier: str, seed: int = 12345):
        name = getattr(tokenizer, "name_or_path", identifier) or identifier
        if identifier != TINY_TEXT_ENCODER and name and Path(name).name != Path(identifier).name:
            raise ValueError(f"tokenizer {name!r} does not belong to encoder {identifier!r}")
        self.identifier = identifier
        self.tokenizer = tokenizer
        tokenizer.add_special_tokens({"additional_special_tokens": [TELLER, DRAWER]})
        emb = model.get_input_embeddings()
        n_old = emb.weight.shape[0]
        if len(tokenizer) > n_old:
            model.resize_token_embeddings(len(tokenizer), mean_resizing=False)
            gen = torch.Generator().manual_seed(seed)
            with torch.no_grad():
                w = model.get_input_embeddings().weight
                std = float(w[:n_old].std())
                w[n_old:] = torch.randn(w.shape[0] - n_old, w.shape[1], generator=gen) * std
        model.eval()
        for p in model.parameters():
            p.requires_grad_(False)
        self.model = model

    @classmethod
    def load(cls, identifier: str = DEFAULT_TEXT_ENCODER, seed: int = 12345) -> "TextEncoder":
        if identifier == TINY_TEXT_ENCODER:
            return cls.tiny(seed)
        from transformers import AutoModel, AutoTokenizer

        try:
            tok = AutoTokenizer.from_pretrained(identifier)
            model = AutoModel.from_pretrained(identifier)
        except OSError as exc:
            raise RuntimeError(
                f"cannot load text encoder {identifier!r}; install it in the HuggingFace cache "
                f"or pass --text-encoder {TINY_TEXT_ENCODER} for an offline run") from exc
        return cls(tok, model, identifier, seed)

    @classmethod
    def tiny(cls, seed: int = 12345, hidden: int = 32) -> "TextEncoder":
        from transformers import BertConfig, BertModel, BertTokenizer

        vocab = _tiny_vocab()
        tok = BertTokenizer(vocab={w: i for i, w in enumerate(vocab)})
        torch.manual_seed(seed)
        cfg = BertConfig(vocab_size=len(vocab), hidden_size=hidden, num_hidden_layers=2,
                         num_attention_heads=2, intermediate_size=2 * hidden,
                         max_position_embeddings=SLOT_LEN + 8)
        return cls(tok, BertModel(cfg), TINY_TEXT_ENCODER, seed)

    @property
    def dim(self) -> int:
        return self.model.config.hidden_size

    def window(self, turns: Sequence, t: int, c: int) -> DialogueWindow:
        return assemble_dialogue_text(turns, t, c, self.tokenizer)

    @torch.no_grad()
    def encode(self, windows: DialogueWindow | Sequence[DialogueWindow]) -> tuple[torch.Tensor, torch.Tensor]:
        """Token embeddings ``(B, n_slots * 80, dim)`` and key-padding mask (True = pad).

        Slots are encoded independently; padded positions are zeroed.
        """
        single = isinstance(windows, DialogueWindow)
        if single:
            windows = [windows]
        ids = torch.from_numpy(np.stack([w.input_ids for w in windows]))
        mask = torch.from_numpy(np.stack([w.attention_mask for w in windows]))
        b, s, n = ids.shape
        flat_ids, flat_mask = ids.view(b * s, n), mask.view(b * s, n)
        out = torch.zeros(b * s, n, self.dim)
        live = flat_mask.any(dim=1)
        if live.any():
            self.model.eval()
            hidden = self.model(input_ids=flat_ids[live], attention_mask=flat_mask[live]).last_hidden_state
            out[live] = hidden.float()
        out = out * flat_mask.unsqueeze(-1)
        out = out.view(b, s * n, self.dim)
        pad = (mask.view(b, s * n) == 0)
        if single:
            return out[0], pad[0]
        return out, pad


# --- rendering ----------------------------------------------------------------

def clipart_colour(clipart_id: int) -> tuple[int, int, int]:
    """Distinct saturated colour per clipart id (never the white background)."""
    h = (clipart_id * 0.61803398875) % 1.0
    r, g, b = colorsys.hsv_to_rgb(h, 0.85, 0.35 + 0.5 * ((clipart_id * 7) % 5) / 4)
    return int(r * 255), int(g * 255), int(b * 255)


def box_pixel_mask(box: tuple[float, float, float, float, float], width: int, height: int) -> np.ndarray:
    """Pixels whose centres fall inside the box (canvas units) at the given resolution."""
    x, y, w, h, _ = box
    sx, sy = CANVAS_WIDTH / width, CANVAS_HEIGHT / height
    cx = (np.arange(width) + 0.5) * sx
    cy = (np.arange(height) + 0.5) * sy
    inx = (cx >= x - w / 2) & (cx < x + w / 2)
    iny = (cy >= y - h / 2) & (cy < y + h / 2)
    return iny[:, None] & inx[None, :]


def _asset_image(asset_dir: Path, clipart, size: tuple[int, int]):
    from PIL import Image, ImageOps

    item = load_inventory()[clipart.clipart_id]
    png = item.png
    if clipart.clipart_id in PERSON_IDS:
        png = png.format(subtype=clipart.face * 7 + clipart.pose)
    img = Image.open(asset_dir / png).convert("RGBA").resize(size)
    if clipart.orientation == 2:
        img = ImageOps.mirror(img)
    return img


def render_scene(gallery: Gallery, resolution: tuple[int, int] = (500, 400),
                 asset_dir: str | Path | None = None) -> np.ndarray:
    """Rasterise a gallery state to a ``(H, W, 3)`` uint8 image.

    Cliparts are drawn far-to-near. With an AbstractScenes art pack (given
    directly or through ``$CODRAW_ASSETS``) the clipart PNGs are composited;
    otherwise each clipart is a solid rectangle of its id colour covering its
    bounding box.
    """
    width, height = resolution
    if asset_dir is None and os.environ.get(ASSETS_ENV):
        asset_dir = os.environ[ASSETS_ENV]
    present = [c for c in gallery.cliparts if c.present]
    # larger size category = further away
    order = sorted(range(len(present)), key=lambda i: (-present[i].size, i))
    if asset_dir is None:
        img = np.empty((height, width, 3), dtype=np.uint8)
        img[:] = BACKGROUND
        for i in order:
            c = present[i]
            img[box_pixel_mask(compute_bounding_box(c), width, height)] = clipart_colour(c.clipart_id)
        return img

    from PIL import Image

    canvas = Image.new("RGBA", (width, height), BACKGROUND + (255,))
    sx, sy = width / CANVAS_WIDTH, height / CANVAS_HEIGHT
    for i in order:
        c = present[i]
        x, y, w, h, _ = compute_bounding_box(c)
        size = (max(1, round(w * sx)), max(1, round(h * sy)))
        sprite = _asset_image(Path(asset_dir), c, size)
        canvas.paste(sprite, (round((x - w / 2) * sx), round((y - h / 2) * sy)), sprite)
    return np.asarray(canvas.convert("RGB"), dtype=np.uint8).copy()


def image_to_tensor(img: np.ndarray) -> torch.Tensor:
    """uint8 (H, W, 3) -> float (3, H, W) normalised with the ImageNet statistics."""
    t = torch.from_numpy(np.ascontiguousarray(img)).permute(2, 0, 1).float() / 255.0
    mean = torch.tensor(IMAGENET_MEAN).view(3, 1, 1)
    std = torch.tensor(IMAGENET_STD).view(3, 1, 1)
    return (t - mean) / std


# --- scene features -----------------------------------------------------------

MIN_RESOLUTION = 32
MAX_GRID = 50


def backbone_grid(height: int, width: int) -> tuple[int, int]:
    """Spatial size of the ResNet C5 feature map (total stride 32)."""
    def out(n: int) -> int:
        n = (n + 2 * 3 - 7) // 2 + 1   # conv1 7x7/2
        n = (n + 2 * 1 - 3) // 2 + 1   # maxpool 3x3/2
        for _ in range(3):             # layer2..layer4 stride-2 3x3 convs
            n = (n + 2 * 1 - 3) // 2 + 1
        return n
    return out(height), out(width)


def build_backbone(name: str = DEFAULT_BACKBONE, pretrained: bool = True) -> tuple[nn.Module, int]:
    """A torchvision ResNet truncated after ``layer4`` and its channel count."""
    import torchvision

    if name not in ("resnet18", "resnet34", "resnet50", "resnet101"):
        raise ValueError(f"unsupported backbone {name!r}")
    weights = "DEFAULT" if pretrained else None
    try:
        net = getattr(torchvision.models, name)(weights=weights)
    except Exception as exc:  # download failures surface as assorted errors
        raise RuntimeError(f"cannot load pretrained {name} weights: {exc}") from exc
    channels = net.fc.in_features
    body = nn.Sequential(net.conv1, net.bn1, net.relu, net.maxpool,
                         net.layer1, net.layer2, net.layer3, net.layer4)
    return body, channels


class LearnedPositionEmbedding(nn.Module):
    """DETR-style learned row/column embeddings, concatenated per grid cell."""

    def __init__(self, d_model: int, max_grid: int = MAX_GRID):
        super().__init__()
        self.row_embed = nn.Embedding(max_grid, d_model // 2)
        self.col_embed = nn.Embedding(max_grid, d_model - d_model // 2)
        nn.init.uniform_(self.row_embed.weight)
        nn.init.uniform_(self.col_embed.weight)

    def forward(self, h: int, w: int) -> torch.Tensor:
        rows = self.row_embed(torch.arange(h, device=self.row_embed.weight.device))
        cols = self.col_embed(torch.arange(w, device=self.col_embed.weight.device))
        pos = torch.cat([cols.unsqueeze(0).expand(h, w, -1), rows.unsqueeze(1).expand(h, w, -1)], dim=-1)
        return pos.flatten(0, 1)


class SceneEncoder(nn.Module):
    """Frozen ResNet -> trainable 1x1 conv to ``d_model`` -> flatten -> + positions -> dropout."""

    def __init__(self, d_model: int, backbone: str = DEFAULT_BACKBONE, pretrained: bool = True,
                 dropout: float = 0.1):
        super().__init__()
        self.backbone, channels = build_backbone(backbone, pretrained)
        for p in self.backbone.parameters():
            p.requires_grad_(False)
        self.backbone.eval()
        self.input_proj = nn.Conv2d(channels, d_model, kernel_size=1)
        self.position = LearnedPositionEmbedding(d_model)
        self.dropout = nn.Dropout(dropout)
        self.d_model = d_model

    def train(self, mode: bool = True) -> "SceneEncoder":
        super().train(mode)
        self.backbone.eval()
        return self

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        """``(B, 3, H, W)`` normalised images -> ``(B, h * w, d_model)``."""
        if images.dim() != 4 or images.shape[1] != 3:
            raise ValueError(f"expected (B, 3, H, W) images, got {tuple(images.shape)}")
        height, width = images.shape[-2:]
        if min(height, width) < MIN_RESOLUTION:
            raise ValueError(f"resolution {width}x{height} is below the backbone minimum {MIN_RESOLUTION}")
        with torch.no_grad():
            feats = self.backbone(images)
        feats = self.input_proj(feats)
        h, w = feats.shape[-2:]
        if max(h, w) > MAX_GRID:
            raise ValueError(f"feature grid {h}x{w} exceeds the position table ({MAX_GRID})")
        seq = feats.flatten(2).transpose(1, 2) + self.position(h, w).unsqueeze(0)
        return self.dropout(seq)


def encode_scene(encoder: SceneEncoder, image: np.ndarray | torch.Tensor) -> torch.Tensor:
    """Features of one rendered scene, ``(h * w, d_model)``."""
    if isinstance(image, np.ndarray):
        image = image_to_tensor(image)
    return encoder(image.unsqueeze(0))[0]


def sinusoidal_positions(length: int, d_model: int) -> torch.Tensor:
    pos = torch.arange(length, dtype=torch.float32).unsqueeze(1)
    div = torch.exp(torch.arange(0, d_model, 2, dtype=torch.float32) * (-math.log(10000.0) / d_model))
    pe = torch.zeros(length, d_model)
    pe[:, 0::2] = torch.sin(pos * div)
    pe[:, 1::2] = torch.cos(pos * div)[:, : d_model // 2]
    return pe
