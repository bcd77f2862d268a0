"""Deterministic synthetic CoDraw-style corpus for tests and offline smoke runs.

The generated games follow the public release's layout (``data[game_id]
["dialog"]`` with ``msg_t``/``msg_d``/``abs_d``) and come with a matching
tab-separated iCR annotation. Vague instructions ("put a hat somewhere")
make the drawer ask a clarification question, so small models have a real
signal to pick up.
"""

from __future__ import annotations

import json
from dataclasses import replace
from pathlib import Path

import numpy as np

from .game_state import (
    CANVAS_HEIGHT,
    CANVAS_WIDTH,
    GALLERY_SIZE,
    N_CLIPARTS,
    N_FACES,
    N_POSES,
    PERSON_IDS,
    ClipartState,
    Gallery,
    load_inventory,
    serialize_scene,
)

SIZE_WORDS = {1: "big", 2: "medium", 3: "small"}
SIDE_WORDS = {1: "facing left", 2: "facing right"}
ANNOTATION_HEADER = ("game_id", "turn_index", "is_icr", "cliparts")


def _region(x: float, y: float) -> str:
    horiz = "left" if x < CANVAS_WIDTH / 3 else "right" if x > 2 * CANVAS_WIDTH / 3 else "middle"
    vert = "top" if y < CANVAS_HEIGHT / 3 else "bottom" if y > 2 * CANVAS_HEIGHT / 3 else "centre"
    return f"{vert} {horiz}"


def _random_gallery(rng: np.random.Generator) -> Gallery:
    ids = rng.choice(N_CLIPARTS, size=GALLERY_SIZE, replace=False)
    slots = []
    for cid in ids.tolist():
        if cid in PERSON_IDS:
            slots.append(ClipartState(cid, False, pose=int(rng.integers(N_POSES)),
                                      face=int(rng.integers(N_FACES))))
        else:
            slots.append(ClipartState(cid, False))
    return Gallery(tuple(slots))


def _placed(rng: np.random.Generator, c: ClipartState) -> ClipartState:
    return replace(c, present=True, size=int(rng.integers(1, 4)), orientation=int(rng.integers(1, 3)),
                   x=float(rng.integers(20, int(CANVAS_WIDTH) - 20)),
                   y=float(rng.integers(20, int(CANVAS_HEIGHT) - 20)))


def _play_turn(rng: np.random.Generator, gallery: Gallery, vague_rate: float):
    """One IG/IF exchange: (new gallery, teller text, drawer text, annotation clipart field or None)."""
    inv = load_inventory()
    slots = list(gallery.cliparts)
    present = [i for i, c in enumerate(slots) if c.present]
    absent = [i for i, c in enumerate(slots) if not c.present]
    kinds = ["add"] * 4 + (["move", "flip", "resize", "delete"] if present else [])
    kind = kinds[int(rng.integers(len(kinds)))] if absent else ["move", "flip", "resize", "delete"][
        int(rng.integers(4))]
    i = int(rng.choice(absent if kind == "add" else present))
    c = slots[i]
    name = inv[c.clipart_id].name.replace("_", " ")
    vague = rng.random() < vague_rate

    if kind == "add":
        new = _placed(rng, c)
        if vague:
            teller = f"there is a {name} somewhere"
        else:
            teller = (f"{SIZE_WORDS[new.size]} {name} {SIDE_WORDS[new.orientation]} "
                      f"in the {_region(new.x, new.y)}")
    elif kind == "move":
        new = replace(c, x=float(rng.integers(20, int(CANVAS_WIDTH) - 20)),
                      y=float(rng.integers(20, int(CANVAS_HEIGHT) - 20)))
        teller = f"move the {name} a bit" if vague else f"move the {name} to the {_region(new.x, new.y)}"
    elif kind == "flip":
        new = replace(c, orientation=3 - c.orientation)
        teller = f"the {name} is wrong" if vague else f"the {name} should be {SIDE_WORDS[new.orientation]}"
    elif kind == "resize":
        new = replace(c, size=1 + (c.size % 3))
        teller = f"the {name} size is off" if vague else f"make the {name} {SIZE_WORDS[new.size]}"
    else:
        new = c.removed()
        teller = f"remove the {name}"
        vague = False
    slots[i] = new

    if vague:
        group = inv[c.clipart_id].group
        if group is not None and rng.random() < 0.3:
            drawer, field = f"which {name} do you mean?", group
        elif rng.random() < 0.1:
            drawer, field = "sorry, what do you mean?", "general"
        else:
            drawer, field = f"where exactly should the {name} go and how big?", inv[c.clipart_id].name
    else:
        drawer, field = rng.choice(["ok", "done", "got it", "next"]).item(), None
    return Gallery(tuple(slots)), teller, drawer, field


def make_fixture_corpus(n_games: dict[str, int] | None = None, n_turns: tuple[int, int] = (3, 7),
                        vague_rate: float = 0.3, seed: int = 0) -> tuple[dict, list[tuple[str, int, int, str]]]:
    """(dataset document, annotation rows) for a small synthetic corpus."""
    n_games = n_games or {"train": 24, "val": 8, "test": 8}
    rng = np.random.default_rng(seed)
    data, rows = {}, []
    for split, count in n_games.items():
        for g in range(count):
            game_id = f"{split}_{g:05d}"
            gallery = _random_gallery(rng)
            dialog = []
            for t in range(int(rng.integers(n_turns[0], n_turns[1] + 1))):
                gallery, teller, drawer, field = _play_turn(rng, gallery, vague_rate)
                turn = {"msg_t": teller, "msg_d": drawer, "abs_d": serialize_scene(gallery)}
                # a few turns lose their scene string, as in the public release
                if t > 0 and rng.random() < 0.03:
                    turn["abs_d"] = ""
                dialog.append(turn)
                rows.append((game_id, t, int(field is not None), field or ""))
            data[game_id] = {"dialog": dialog}
    return {"data": data}, rows


def write_fixture_corpus(out_dir: str | Path, seed: int = 0, **kw) -> tuple[Path, Path]:
    """Write ``codraw_fixture.json`` and ``icr_annotation_fixture.tsv`` into ``out_dir``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    doc, rows = make_fixture_corpus(seed=seed, **kw)
    dataset = out_dir / "codraw_fixture.json"
    dataset.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    annotation = out_dir / "icr_annotation_fixture.tsv"
    lines = ["\t".join(ANNOTATION_HEADER)] + ["\t".join(map(str, r)) for r in rows]
    annotation.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return dataset, annotation
