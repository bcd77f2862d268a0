from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest
import torch

from icr_policies.corpus import build_turn_records, load_dialogues, load_icr_annotation
from icr_policies.encoders import TextEncoder
from icr_policies.game_state import GALLERY_SIZE, N_CLIPARTS, N_FACES, N_POSES, PERSON_IDS, ClipartState, Gallery
from icr_policies.model import ModelConfig

FIXTURES = Path(__file__).parent / "fixtures"
DATASET = FIXTURES / "codraw_fixture.json"
ANNOTATION = FIXTURES / "icr_annotation_fixture.tsv"

# small architecture used wherever full-scale widths are not the point
TINY_MODEL = dict(d_model=128, n_heads=4, n_layers=1, feedforward_dim=64, head_hidden_dim=16,
                  backbone="resnet18", pretrained_backbone=False)


def random_gallery(rng: np.random.Generator, p_present: float = 0.5) -> Gallery:
    ids = rng.choice(N_CLIPARTS, size=GALLERY_SIZE, replace=False)
    slots = []
    for cid in ids.tolist():
        person = dict(pose=int(rng.integers(N_POSES)), face=int(rng.integers(N_FACES))) if cid in PERSON_IDS else {}
        if rng.random() < p_present:
            slots.append(ClipartState(cid, True, size=int(rng.integers(1, 4)), orientation=int(rng.integers(1, 3)),
                                      x=float(rng.integers(0, 500)), y=float(rng.integers(0, 400)), **person))
        else:
            slots.append(ClipartState(cid, False, **person))
    return Gallery(tuple(slots))


@pytest.fixture(scope="session")
def games():
    return load_dialogues(DATASET)


@pytest.fixture(scope="session")
def annotations():
    return load_icr_annotation(ANNOTATION)


@pytest.fixture(scope="session")
def when_records(games, annotations):
    return build_turn_records(games, annotations, "when")


@pytest.fixture(scope="session")
def what_records(games, annotations):
    return build_turn_records(games, annotations, "what")


@pytest.fixture(scope="session")
def tiny_text():
    return TextEncoder.tiny(seed=7)


@pytest.fixture
def tiny_cfg(tiny_text):
    def make(variant="overhearer", inputs="G, D", task="when", **kw):
        return ModelConfig.from_inputs(variant, inputs, task, **{**TINY_MODEL, "text_dim": tiny_text.dim, **kw})
    return make


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)
    np.random.seed(0)
