"""Symbolic cliparts, galleries and scenes.

A CoDraw game gives the instruction follower a gallery of 28 cliparts drawn
from a 58-item inventory. Each clipart is described by six categorical slots
(identifier, orientation, presence, size, face, pose) and five positional
numbers (centre x/y, width, height, area). Scene strings follow the
AbstractScenes rendering format::

    <n>,<png>,<subtype>,<idx>,<type>,<x>,<y>,<z>,<flip>,<png>,...

where ``z`` is the depth (0 is the closest and largest) and cliparts that are
not on the canvas carry the off-canvas sentinel coordinate.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass, replace
from functools import lru_cache
from importlib import resources
from typing import Iterable, Sequence

import numpy as np

INVENTORY_SHA256 = "633477f48910f1f8d176937761ea048bd0d3968984dcdecf2411e3e509f80248"

GALLERY_SIZE = 28
N_CLIPARTS = 58
N_POSES = 7
N_FACES = 5
CANVAS_WIDTH = 500.0
CANVAS_HEIGHT = 400.0
OFF_CANVAS = -10000

BOY = 18
GIRL = 19
PERSON_IDS = (BOY, GIRL)

# embedding vocabulary sizes; index 0 is the special / not-applicable category
ID_VOCAB = N_CLIPARTS + 1
ORIENTATION_VOCAB = 3
PRESENCE_VOCAB = 2
SIZE_VOCAB = 4
FACE_VOCAB = N_FACES + 1
POSE_VOCAB = N_POSES + 1

N_CATEGORICAL = 6
N_POSITIONAL = 5


class SceneParseError(ValueError):
    """Raised when a scene string cannot be decoded."""


@dataclass(frozen=True)
class InventoryItem:
    idx: int
    name: str
    type: int
    png: str
    group: str | None
    base_width: float
    base_height: float

    @property
    def is_person(self) -> bool:
        return self.idx in PERSON_IDS


@dataclass(frozen=True)
class Inventory:
    version: str
    items: tuple[InventoryItem, ...]
    depth_scale: tuple[float, ...]

    def __len__(self) -> int:
        return len(self.items)

    def __getitem__(self, idx: int) -> InventoryItem:
        return self.items[idx]

    def by_name(self, name: str) -> InventoryItem:
        for item in self.items:
            if item.name == name:
                return item
        raise KeyError(f"unknown clipart name {name!r}")

    def groups(self) -> dict[str, frozenset[int]]:
        out: dict[str, set[int]] = {}
        for item in self.items:
            if item.group is not None:
                out.setdefault(item.group, set()).add(item.idx)
        return {k: frozenset(v) for k, v in out.items()}


@lru_cache(maxsize=1)
def load_inventory() -> Inventory:
    """Load the checked-in 58-clipart table, verifying its checksum."""
    raw = resources.files("icr_policies").joinpath("data/inventory.json").read_bytes()
    digest = hashlib.sha256(raw).hexdigest()
    if digest != INVENTORY_SHA256:
        raise RuntimeError(f"inventory table checksum mismatch: {digest}")
    doc = json.loads(raw)
    items = tuple(InventoryItem(**row) for row in doc["cliparts"])
    if len(items) != N_CLIPARTS or [i.idx for i in items] != list(range(N_CLIPARTS)):
        raise RuntimeError("inventory table must list 58 cliparts indexed 0..57")
    return Inventory(version=doc["version"], items=items,
                     depth_scale=tuple(doc["depth_scale"]))


@dataclass(frozen=True, slots=True)
class ClipartState:
    """One gallery object at one turn.

    ``size`` is 0 (absent) or 1..3 (depth 0..2); ``orientation`` is 0
    (absent), 1 (facing left, unflipped) or 2 (flipped). ``pose`` (0..6) and
    ``face`` (0..4) are ``None`` for non-person cliparts. ``x``/``y`` are the
    clipart centre in canvas units and are 0 when absent.
    """

    clipart_id: int
    present: bool
    size: int = 0
    orientation: int = 0
    pose: int | None = None
    face: int | None = None
    x: float = 0.0
    y: float = 0.0

    def __post_init__(self) -> None:
        if not self.present and (self.size or self.orientation or self.x or self.y):
            raise ValueError("absent cliparts carry the special category 0")
        if self.present and not (1 <= self.size <= 3 and 1 <= self.orientation <= 2):
            raise ValueError(f"invalid size/orientation for present clipart {self.clipart_id}")
        if (self.clipart_id in PERSON_IDS) != (self.pose is not None and self.face is not None):
            raise ValueError(f"pose/face applicability mismatch for clipart {self.clipart_id}")

    def removed(self) -> "ClipartState":
        """The same clipart taken off the canvas."""
        return replace(self, present=False, size=0, orientation=0, x=0.0, y=0.0)

    def categorical(self) -> tuple[int, int, int, int, int, int]:
        """Embedding indices in the order id, orientation, presence, size, face, pose."""
        return (
            self.clipart_id + 1,
            self.orientation,
            int(self.present),
            self.size,
            0 if self.face is None else self.face + 1,
            0 if self.pose is None else self.pose + 1,
        )

    def positional(self) -> tuple[float, float, float, float, float]:
        """Centre, width, height and area normalised by the canvas size."""
        if not self.present:
            return (0.0, 0.0, 0.0, 0.0, 0.0)
        x, y, w, h, _ = compute_bounding_box(self)
        w_n, h_n = w / CANVAS_WIDTH, h / CANVAS_HEIGHT
        return (x / CANVAS_WIDTH, y / CANVAS_HEIGHT, w_n, h_n, w_n * h_n)


@dataclass(frozen=True, slots=True)
class Gallery:
    cliparts: tuple[ClipartState, ...]

    def __post_init__(self) -> None:
        if len(self.cliparts) != GALLERY_SIZE:
            raise ValueError(f"a gallery holds {GALLERY_SIZE} cliparts, got {len(self.cliparts)}")
        ids = [c.clipart_id for c in self.cliparts]
        if len(set(ids)) != GALLERY_SIZE or not all(0 <= i < N_CLIPARTS for i in ids):
            raise ValueError("gallery ids must be distinct members of the 58-clipart inventory")

    def __len__(self) -> int:
        return GALLERY_SIZE

    def __iter__(self):
        return iter(self.cliparts)

    def __getitem__(self, i: int) -> ClipartState:
        return self.cliparts[i]

    @property
    def ids(self) -> tuple[int, ...]:
        return tuple(c.clipart_id for c in self.cliparts)

    @property
    def spec(self) -> "GallerySpec":
        return tuple((c.clipart_id, c.pose, c.face) for c in self.cliparts)

    def index_of(self, clipart_id: int) -> int:
        return self.ids.index(clipart_id)

    def to_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        """(28, 6) int64 categorical indices and (28, 5) float32 positions."""
        cat = np.array([c.categorical() for c in self.cliparts], dtype=np.int64)
        pos = np.array([c.positional() for c in self.cliparts], dtype=np.float32)
        return cat, pos

    def permuted(self, order: Sequence[int]) -> "Gallery":
        return Gallery(tuple(self.cliparts[i] for i in order))


# (clipart_id, pose, face) per gallery slot, in gallery order
GallerySpec = tuple[tuple[int, int | None, int | None], ...]


def empty_gallery(spec: GallerySpec) -> Gallery:
    return Gallery(tuple(ClipartState(i, False, pose=p, face=f) for i, p, f in spec))


_PERSON_PNG = re.compile(r"^hb([01])_(\d+)s(?:\.png)?$")


def collapse_person_classes(raw_id: int | str, raw_pose: int | None = None,
                            raw_face: int | None = None) -> tuple[int, int | None, int | None]:
    """Map a raw clipart identifier to (clipart_id, pose, face).

    Every boy variant collapses to ``BOY`` and every girl variant to
    ``GIRL``; the variant's pose and facial expression become features,
    decoded from the AbstractScenes subtype (``face * 7 + pose``) when not
    given explicitly. Other cliparts get ``None`` for both.
    """
    inv = load_inventory()
    subtype = None
    if isinstance(raw_id, str):
        m = _PERSON_PNG.match(raw_id)
        if m:
            clipart_id = BOY if m.group(1) == "0" else GIRL
            subtype = int(m.group(2))
        else:
            stem = raw_id[:-4] if raw_id.endswith(".png") else raw_id
            matches = [it for it in inv.items if it.png == f"{stem}.png" or it.name == stem]
            if not matches:
                raise ValueError(f"unknown clipart identifier {raw_id!r}")
            clipart_id = matches[0].idx
    else:
        clipart_id = int(raw_id)
        if not 0 <= clipart_id < N_CLIPARTS:
            raise ValueError(f"unknown clipart identifier {raw_id!r}")

    if clipart_id not in PERSON_IDS:
        return clipart_id, None, None
    if subtype is not None:
        if not 0 <= subtype < N_POSES * N_FACES:
            raise ValueError(f"person subtype out of range: {raw_id!r}")
        raw_pose = subtype % N_POSES if raw_pose is None else raw_pose
        raw_face = subtype // N_POSES if raw_face is None else raw_face
    if raw_pose is None or raw_face is None:
        raise ValueError(f"person clipart {raw_id!r} needs a pose and a face")
    if not (0 <= raw_pose < N_POSES and 0 <= raw_face < N_FACES):
        raise ValueError(f"pose/face out of range for {raw_id!r}")
    return clipart_id, int(raw_pose), int(raw_face)


def compute_bounding_box(clipart: ClipartState) -> tuple[float, float, float, float, float]:
    """(x_center, y_center, width, height, area) in canvas units.

    The inventory's base dimensions are scaled by the depth factor of the
    clipart's size category.
    """
    if not clipart.present:
        raise ValueError(f"clipart {clipart.clipart_id} is not on the canvas")
    inv = load_inventory()
    item = inv[clipart.clipart_id]
    scale = inv.depth_scale[clipart.size - 1]
    w = item.base_width * scale
    h = item.base_height * scale
    return (float(clipart.x), float(clipart.y), w, h, w * h)


def _number(tok: str, offset: int) -> float:
    try:
        return float(tok)
    except ValueError:
        raise SceneParseError(f"expected a number at field {offset}, got {tok!r}") from None


def _decode_entries(raw: str) -> list[tuple[ClipartState, int]]:
    toks = [t.strip() for t in raw.strip().strip(",").split(",")]
    try:
        n = int(toks[0])
    except ValueError:
        raise SceneParseError(f"scene string must start with a clipart count, got {toks[0]!r}") from None
    if len(toks) != 1 + 8 * n:
        raise SceneParseError(f"expected {1 + 8 * n} fields for {n} cliparts, got {len(toks)}")
    out = []
    for k in range(n):
        base = 1 + 8 * k
        png, subtype, idx, _type, x, y, z, flip = toks[base:base + 8]
        try:
            if _PERSON_PNG.match(png):
                cid, pose, face = collapse_person_classes(png)
            else:
                cid, pose, face = collapse_person_classes(int(_number(idx, base + 2)))
                if cid in PERSON_IDS:
                    cid, pose, face = collapse_person_classes(
                        f"hb{cid - BOY}_{int(_number(subtype, base + 1))}s")
        except ValueError as exc:
            raise SceneParseError(f"clipart at field {base}: {exc}") from None
        xv, yv = _number(x, base + 4), _number(y, base + 5)
        zv, fv = int(_number(z, base + 6)), int(_number(flip, base + 7))
        if xv <= OFF_CANVAS / 10 or yv <= OFF_CANVAS / 10:
            state = ClipartState(cid, False, pose=pose, face=face)
        else:
            if zv not in (0, 1, 2) or fv not in (0, 1):
                raise SceneParseError(f"clipart at field {base}: depth/flip out of range")
            state = ClipartState(cid, True, size=zv + 1, orientation=fv + 1,
                                 pose=pose, face=face, x=xv, y=yv)
        out.append((state, base))
    return out


def gallery_spec_from_scene(raw: str) -> GallerySpec:
    """Gallery identity (id, pose, face per slot) listed in a full scene string."""
    return tuple((c.clipart_id, c.pose, c.face) for c, _ in _decode_entries(raw))


def parse_scene_string(raw: str | None, gallery_spec: GallerySpec) -> Gallery:
    """Decode a scene string into a gallery ordered like ``gallery_spec``.

    A missing or empty string gives the empty scene over the given gallery.
    Cliparts of the gallery that the string does not mention are absent.
    """
    if raw is None or not raw.strip():
        return empty_gallery(gallery_spec)
    by_id: dict[int, ClipartState] = {}
    for state, offset in _decode_entries(raw):
        if state.clipart_id in by_id:
            raise SceneParseError(f"clipart {state.clipart_id} listed twice (field {offset})")
        by_id[state.clipart_id] = state
    spec_ids = {cid for cid, _, _ in gallery_spec}
    extra = set(by_id) - spec_ids
    if extra:
        raise SceneParseError(f"scene mentions cliparts outside the gallery: {sorted(extra)}")
    slots = []
    for cid, pose, face in gallery_spec:
        state = by_id.get(cid)
        if state is None:
            state = ClipartState(cid, False, pose=pose, face=face)
        slots.append(state)
    return Gallery(tuple(slots))


def _fmt(v: float) -> str:
    return str(int(v)) if float(v).is_integer() else repr(float(v))


def serialize_scene(gallery: Gallery | Iterable[ClipartState]) -> str:
    """Inverse of :func:`parse_scene_string` (absent cliparts are written off-canvas)."""
    inv = load_inventory()
    cliparts = list(gallery)
    fields = [str(len(cliparts))]
    for c in cliparts:
        item = inv[c.clipart_id]
        subtype = 0
        png = item.png
        if c.clipart_id in PERSON_IDS:
            subtype = c.face * N_POSES + c.pose
            png = png.format(subtype=subtype)
        if c.present:
            x, y, z, flip = _fmt(c.x), _fmt(c.y), str(c.size - 1), str(c.orientation - 1)
        else:
            x, y, z, flip = str(OFF_CANVAS), str(OFF_CANVAS), "0", "0"
        fields += [png, str(subtype), str(c.clipart_id), str(item.type), x, y, z, flip]
    return ",".join(fields)
