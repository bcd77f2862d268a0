"""CoDraw dialogues, the iCR annotation and per-turn records.

Knowledge of the CoDraw JSON layout is isolated in :func:`_codraw_adapter`
and knowledge of the annotation columns in :data:`ANNOTATION_COLUMNS`.
"""

from __future__ import annotations

import csv
import gzip
import json
import logging
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Literal, Sequence

import numpy as np

from .actions import ACTIONS, ActionLabels, action_statistics, derive_actions
from .game_state import (
    GALLERY_SIZE,
    Gallery,
    GallerySpec,
    SceneParseError,
    empty_gallery,
    gallery_spec_from_scene,
    load_inventory,
    parse_scene_string,
    serialize_scene,
)

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
RECORD_SCHEMA_VERSION = "icr-records/1"
GENERAL_AMBIGUITY = "general"

Task = Literal["when", "what"]


class CorpusError(ValueError):
    """A dataset or annotation file could not be interpreted."""


@dataclass(frozen=True)
class RawTurn:
    ig_utterance: str
    if_utterance: str
    scene: str | None

    @property
    def scene_missing(self) -> bool:
        return self.scene is None or not self.scene.strip()


@dataclass(frozen=True)
class GameRecord:
    game_id: str
    split: str
    turns: tuple[RawTurn, ...]
    gallery_spec: GallerySpec

    @property
    def missing_scenes(self) -> tuple[int, ...]:
        return tuple(i for i, t in enumerate(self.turns) if t.scene_missing)


@dataclass(frozen=True)
class IcrAnnotation:
    game_id: str
    turn_index: int
    is_icr: bool
    mentioned_cliparts: frozenset[int] = frozenset()
    ambiguity_classes: frozenset[str] = frozenset()
    has_unresolved_reference: bool = False


@dataclass(frozen=True)
class GameStateInput:
    """One decision point: the IF has just read the IG's utterance at ``turn_index``."""

    game_id: str
    split: str
    turn_index: int
    task: str
    dialogue: tuple[RawTurn, ...]
    gallery_before: Gallery
    gallery_after: Gallery
    actions: ActionLabels
    is_icr: bool
    icr_cliparts: tuple[int, ...]
    scene_missing: bool = False

    @property
    def n_icr_cliparts(self) -> int:
        return sum(self.icr_cliparts)


def split_of(game_id: str) -> str:
    prefix = game_id.split("_", 1)[0]
    if prefix not in SPLITS:
        raise CorpusError(f"game id {game_id!r} does not carry a train/val/test prefix")
    return prefix


def _codraw_adapter(doc: dict) -> Iterable[tuple[str, list[tuple[str, str, str | None]]]]:
    """Yield (game_id, [(teller msg, drawer msg, drawer scene)]) from a CoDraw release."""
    data = doc.get("data", doc)
    for game_id in sorted(data):
        entry = data[game_id]
        try:
            dialog = entry["dialog"]
            turns = [(t["msg_t"], t.get("msg_d") or "", t.get("abs_d")) for t in dialog]
        except (KeyError, TypeError) as exc:
            raise CorpusError(f"malformed game entry {game_id!r}: missing {exc}") from None
        yield game_id, turns


def load_dialogues(path: str | Path) -> list[GameRecord]:
    """Read a CoDraw dataset file into one :class:`GameRecord` per game."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise CorpusError(f"cannot read dataset file {path}: {exc}") from exc
    if not text.strip():
        return []
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CorpusError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from exc

    games = []
    for game_id, raw_turns in _codraw_adapter(doc):
        split = split_of(game_id)
        turns = []
        for k, (ig, if_, scene) in enumerate(raw_turns):
            if not isinstance(ig, str):
                raise CorpusError(f"malformed game entry {game_id!r}: turn {k} lacks an IG utterance")
            turns.append(RawTurn(ig, if_ if isinstance(if_, str) else "", scene or None))
        available = [t.scene for t in turns if not t.scene_missing]
        if not available:
            raise CorpusError(f"malformed game entry {game_id!r}: no scene string to read the gallery from")
        try:
            spec = gallery_spec_from_scene(available[0])
            empty_gallery(spec)
        except (SceneParseError, ValueError) as exc:
            raise CorpusError(f"malformed game entry {game_id!r}: {exc}") from None
        games.append(GameRecord(game_id, split, tuple(turns), spec))
    n_missing = sum(len(g.missing_scenes) for g in games)
    if n_missing:
        log.info("%d turns without a scene string", n_missing)
    return games


# logical column -> accepted header names
ANNOTATION_COLUMNS = {
    "game_id": ("game_id", "game_name", "dialogue_id", "game"),
    "turn_index": ("turn_index", "turn", "dialogue_turn", "turn_id"),
    "is_icr": ("is_icr", "is_cr", "is icr", "is cr", "icr"),
    "cliparts": ("cliparts", "mentioned_cliparts", "reference_cliparts", "clipart"),
}
_TRUE = {"1", "true", "yes", "y", "t"}
_FALSE = {"0", "false", "no", "n", "f", ""}


def _resolve_header(header: Sequence[str]) -> dict[str, int]:
    lowered = [h.strip().lower() for h in header]
    cols = {}
    for logical, names in ANNOTATION_COLUMNS.items():
        hit = next((lowered.index(n) for n in names if n in lowered), None)
        if hit is None:
            raise CorpusError(f"annotation header lacks a {logical!r} column (accepted: {names})")
        cols[logical] = hit
    return cols


def is_ambiguity_tag(token: str) -> bool:
    return token == GENERAL_AMBIGUITY or token.endswith("_group")


def _parse_clipart_field(field: str, where: str) -> tuple[frozenset[int], frozenset[str]]:
    inv = load_inventory()
    ids, tags = set(), set()
    for tok in re.split(r"[,;\s]+", field.strip()):
        if not tok:
            continue
        if is_ambiguity_tag(tok):
            tags.add(tok)
        elif tok.isdigit():
            ids.add(int(tok))
        else:
            try:
                ids.add(inv.by_name(tok).idx)
            except KeyError:
                raise CorpusError(f"{where}: unknown clipart {tok!r}") from None
    return frozenset(ids), frozenset(tags)


def load_icr_annotation(path: str | Path) -> list[IcrAnnotation]:
    """Read the tab-separated iCR annotation (one row per IF utterance)."""
    path = Path(path)
    try:
        handle = path.open(encoding="utf-8", newline="")
    except OSError as exc:
        raise CorpusError(f"cannot read annotation file {path}: {exc}") from exc
    with handle:
        reader = csv.reader(handle, delimiter="\t", quoting=csv.QUOTE_NONE)
        header = next(reader, None)
        if header is None:
            raise CorpusError(f"{path}: empty annotation file (header row expected)")
        cols = _resolve_header(header)
        seen = set()
        out = []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            where = f"{path}:{lineno}"
            try:
                game_id = row[cols["game_id"]].strip()
                turn = int(row[cols["turn_index"]])
                flag = row[cols["is_icr"]].strip().lower()
                clip_field = row[cols["cliparts"]] if cols["cliparts"] < len(row) else ""
            except (IndexError, ValueError) as exc:
                raise CorpusError(f"{where}: malformed row ({exc})") from None
            if flag not in _TRUE | _FALSE:
                raise CorpusError(f"{where}: is_icr must be boolean, got {flag!r}")
            key = (game_id, turn)
            if key in seen:
                raise CorpusError(f"{where}: duplicate annotation for {key}")
            seen.add(key)
            is_icr = flag in _TRUE
            ids, tags = _parse_clipart_field(clip_field, where)
            concrete = tags - {GENERAL_AMBIGUITY}
            out.append(IcrAnnotation(
                game_id=game_id,
                turn_index=turn,
                is_icr=is_icr,
                mentioned_cliparts=ids,
                ambiguity_classes=tags,
                has_unresolved_reference=is_icr and not ids and not concrete,
            ))
    return out


def expand_ambiguity_labels(annotation: IcrAnnotation, gallery: Gallery) -> frozenset[int]:
    """Clipart ids that count as iCR targets in this gallery.

    A concrete ambiguity class (``hat_group``, ...) marks every gallery member
    of that class; the general ambiguity class marks nothing.
    """
    groups = load_inventory().groups()
    gallery_ids = set(gallery.ids)
    out = set(annotation.mentioned_cliparts)
    missing = out - gallery_ids
    if missing:
        raise ValueError(
            f"{annotation.game_id} turn {annotation.turn_index}: cliparts {sorted(missing)} not in the gallery")
    for tag in annotation.ambiguity_classes:
        if tag == GENERAL_AMBIGUITY:
            continue
        if tag not in groups:
            raise ValueError(f"unknown ambiguity class {tag!r}")
        out |= groups[tag] & gallery_ids
    return frozenset(out)


def game_galleries(game: GameRecord) -> list[Gallery]:
    """Gallery state after each turn, preceded by the empty initial state.

    Turns without a scene string keep the previous state, so they produce no
    spurious deletions.
    """
    states = [empty_gallery(game.gallery_spec)]
    for k, turn in enumerate(game.turns):
        if turn.scene_missing:
            states.append(states[-1])
            continue
        try:
            states.append(parse_scene_string(turn.scene, game.gallery_spec))
        except SceneParseError as exc:
            raise CorpusError(f"{game.game_id} turn {k}: {exc}") from None
    return states


def build_turn_records(games: Sequence[GameRecord], annotations: Sequence[IcrAnnotation],
                       task: Task) -> list[GameStateInput]:
    """One record per decision point (``when``) or per resolvable iCR turn (``what``)."""
    if task not in ("when", "what"):
        raise ValueError(f"task must be 'when' or 'what', got {task!r}")
    by_game = {g.game_id: g for g in games}
    joined: dict[tuple[str, int], IcrAnnotation] = {}
    for ann in annotations:
        game = by_game.get(ann.game_id)
        if game is None or not 0 <= ann.turn_index < len(game.turns):
            raise CorpusError(f"annotation refers to a nonexistent turn: {ann.game_id} turn {ann.turn_index}")
        joined[(ann.game_id, ann.turn_index)] = ann

    records = []
    for game in games:
        states = game_galleries(game)
        for t, turn in enumerate(game.turns):
            ann = joined.get((game.game_id, t))
            is_icr = bool(ann and ann.is_icr)
            if task == "what" and (not is_icr or ann.has_unresolved_reference):
                continue
            before, after = states[t], states[t + 1]
            flags = [0] * GALLERY_SIZE
            if is_icr:
                for cid in expand_ambiguity_labels(ann, after):
                    flags[after.index_of(cid)] = 1
            records.append(GameStateInput(
                game_id=game.game_id,
                split=game.split,
                turn_index=t,
                task=task,
                dialogue=game.turns,
                gallery_before=before,
                gallery_after=after,
                actions=derive_actions(before, after),
                is_icr=is_icr,
                icr_cliparts=tuple(flags),
                scene_missing=turn.scene_missing,
            ))
    return records


def dataset_statistics(records: Iterable[GameStateInput]) -> dict[str, dict[str, float]]:
    """Percentage of positive labels per split: iCRs (when/what) and actions."""
    records = list(records)
    out: dict[str, dict[str, float]] = {}
    splits = sorted({r.split for r in records}, key=lambda s: SPLITS.index(s) if s in SPLITS else 99)
    actions = action_statistics(records)
    for split in splits:
        when = [r.is_icr for r in records if r.split == split and r.task == "when"]
        what = [f for r in records if r.split == split and r.task == "what" for f in r.icr_cliparts]
        row = {
            "when": round(100 * float(np.mean(when)), 2) if when else 0.0,
            "what": round(100 * float(np.mean(what)), 2) if what else 0.0,
        }
        acts = actions.get(split, {})
        row["any"] = acts.get("acted_upon", 0.0)
        for name in ACTIONS[:4]:
            row[name] = acts.get(name, 0.0)
        out[split] = row
    return out


# --- canonical record file -------------------------------------------------

def write_records(path: str | Path, records: Sequence[GameStateInput]) -> None:
    """Column-oriented, gzip-compressed JSON; byte-identical for identical input."""
    dialogues: dict[str, list[list]] = {}
    for r in records:
        dialogues.setdefault(r.game_id, [[t.ig_utterance, t.if_utterance] for t in r.dialogue])
    columns = {
        "game_id": [r.game_id for r in records],
        "split": [r.split for r in records],
        "turn_index": [r.turn_index for r in records],
        "task": [r.task for r in records],
        "is_icr": [int(r.is_icr) for r in records],
        "icr_cliparts": ["".join(map(str, r.icr_cliparts)) for r in records],
        "actions": [r.actions.matrix.astype(int).tolist() for r in records],
        "scene_before": [serialize_scene(r.gallery_before) for r in records],
        "scene_after": [serialize_scene(r.gallery_after) for r in records],
        "scene_missing": [int(r.scene_missing) for r in records],
    }
    doc = {"schema_version": RECORD_SCHEMA_VERSION, "n_rows": len(records),
           "columns": columns, "dialogues": dialogues}
    payload = json.dumps(doc, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as raw, gzip.GzipFile(filename="", mode="wb", fileobj=raw, mtime=0) as fh:
        fh.write(payload)


def read_records(path: str | Path) -> list[GameStateInput]:
    with gzip.open(path, "rb") as fh:
        doc = json.loads(fh.read().decode("utf-8"))
    if doc.get("schema_version") != RECORD_SCHEMA_VERSION:
        raise CorpusError(f"{path}: unsupported record schema {doc.get('schema_version')!r}")
    # scene strings live in the gallery columns; dialogue turns keep utterances only
    dialogues = {
        gid: tuple(RawTurn(ig, if_, None) for ig, if_ in turns)
        for gid, turns in doc["dialogues"].items()
    }
    c = doc["columns"]
    out = []
    for k in range(doc["n_rows"]):
        before = c["scene_before"][k]
        spec = gallery_spec_from_scene(before)
        out.append(GameStateInput(
            game_id=c["game_id"][k],
            split=c["split"][k],
            turn_index=c["turn_index"][k],
            task=c["task"][k],
            dialogue=dialogues[c["game_id"][k]],
            gallery_before=parse_scene_string(before, spec),
            gallery_after=parse_scene_string(c["scene_after"][k], spec),
            actions=ActionLabels(np.array(c["actions"][k], dtype=np.int8)),
            is_icr=bool(c["is_icr"][k]),
            icr_cliparts=tuple(int(ch) for ch in c["icr_cliparts"][k]),
            scene_missing=bool(c["scene_missing"][k]),
        ))
    return out
