"""Synthetic grid scenes with template captions.

A scene holds 2-4 coloured shapes on distinct cells of a 3x3 grid. The
caption lists the objects sorted by (shape rank, row, col) so it is a pure
function of the scene:

* 2 objects: ``a C S REL a C S``
* 3 objects: ``a C S REL a C S and a C S``
* 4 objects: ``a C S REL a C S and a C S REL a C S``

``REL`` compares the cells of the two objects of a clause: ``above`` /
``below`` when the rows differ, ``beside`` otherwise. Caption length
therefore depends only on the object count (7, 11 or 15 words).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

SHAPES = ("circle", "square", "triangle", "star")
COLORS = ("red", "blue", "green", "yellow")
GRID = 3
N_CELLS = GRID * GRID
FEATURE_DIM = len(SHAPES) + len(COLORS) + 1
N_COND_TOKENS = N_CELLS + 1
SPLIT_FRACTIONS = (0.90, 0.05, 0.05)


@dataclass(frozen=True)
class SceneObject:
    shape: str
    color: str
    row: int
    col: int

    @property
    def cell(self) -> int:
        return self.row * GRID + self.col


@dataclass(frozen=True)
class Scene:
    objects: tuple[SceneObject, ...]

    def __post_init__(self):
        if not 2 <= len(self.objects) <= 4:
            raise ValueError(f"scene must hold 2-4 objects, got {len(self.objects)}")
        cells = [o.cell for o in self.objects]
        if len(set(cells)) != len(cells):
            raise ValueError("objects must occupy distinct cells")

    def to_dict(self) -> dict:
        return {"objects": [o.__dict__.copy() for o in self.objects]}

    @classmethod
    def from_dict(cls, d: dict) -> "Scene":
        return cls(tuple(SceneObject(**o) for o in d["objects"]))


@dataclass(frozen=True)
class CaptionedScene:
    scene: Scene
    caption: str
    color_positions: tuple[int, ...]
    split: str = "train"

    def to_json(self) -> str:
        rec = {
            "scene": self.scene.to_dict(),
            "caption": self.caption,
            "color_positions": list(self.color_positions),
            "split": self.split,
        }
        return json.dumps(rec, sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, line: str) -> "CaptionedScene":
        rec = json.loads(line)
        return cls(
            Scene.from_dict(rec["scene"]),
            rec["caption"],
            tuple(rec["color_positions"]),
            rec.get("split", "train"),
        )


def sample_scene(rng: np.random.Generator) -> Scene:
    n = int(rng.integers(2, 5))
    cells = rng.choice(N_CELLS, size=n, replace=False)
    shapes = rng.integers(0, len(SHAPES), size=n)
    colors = rng.integers(0, len(COLORS), size=n)
    objs = tuple(
        SceneObject(SHAPES[s], COLORS[c], int(cell) // GRID, int(cell) % GRID)
        for s, c, cell in zip(shapes, colors, cells)
    )
    return Scene(objs)


def relation(a: SceneObject, b: SceneObject) -> str:
    if a.row < b.row:
        return "above"
    if a.row > b.row:
        return "below"
    return "beside"


def caption_order(scene: Scene) -> list[SceneObject]:
    return sorted(scene.objects, key=lambda o: (SHAPES.index(o.shape), o.row, o.col))


def render_caption(scene: Scene, rng: np.random.Generator | None = None) -> tuple[str, list[int]]:
    """Caption text and the word indices of the colour words.

    ``rng`` is accepted for interface symmetry with the other generators;
    each object count has exactly one template so no draw is made.
    """
    objs = caption_order(scene)
    words: list[str] = []
    color_pos: list[int] = []

    def np_(o: SceneObject) -> None:
        words.append("a")
        color_pos.append(len(words))
        words.extend([o.color, o.shape])

    np_(objs[0])
    words.append(relation(objs[0], objs[1]))
    np_(objs[1])
    if len(objs) >= 3:
        words.append("and")
        np_(objs[2])
    if len(objs) == 4:
        words.append(relation(objs[2], objs[3]))
        np_(objs[3])
    return " ".join(words), color_pos


def parse_caption(caption: str) -> list[tuple[str, str]]:
    """(color, shape) pairs mentioned in a caption, in order."""
    words = caption.split()
    return [(words[i + 1], words[i + 2]) for i, w in enumerate(words[:-2]) if w == "a"]


def scene_features(scene: Scene) -> np.ndarray:
    """(10, 9) condition tokens: 9 grid cells then their mean."""
    grid = np.zeros((N_CELLS, FEATURE_DIM), dtype=np.float64)
    for o in scene.objects:
        grid[o.cell, SHAPES.index(o.shape)] = 1.0
        grid[o.cell, len(SHAPES) + COLORS.index(o.color)] = 1.0
        grid[o.cell, -1] = 1.0
    return np.concatenate([grid, grid.mean(axis=0, keepdims=True)], axis=0)


def split_of(index: int, n: int) -> str:
    n_train = int(round(n * SPLIT_FRACTIONS[0]))
    n_val = int(round(n * SPLIT_FRACTIONS[1]))
    if index < n_train:
        return "train"
    if index < n_train + n_val:
        return "val"
    return "test"


def generate_records(n: int, seed: int) -> Iterator[CaptionedScene]:
    if n < 1:
        raise ValueError(f"dataset size must be >= 1, got {n}")
    for i in range(n):
        rng = np.random.default_rng([seed, i])
        scene = sample_scene(rng)
        caption, pos = render_caption(scene, rng)
        yield CaptionedScene(scene, caption, tuple(pos), split_of(i, n))


def generate_dataset(n: int, seed: int, out_path) -> Path:
    out_path = Path(out_path)
    lines = [rec.to_json() for rec in generate_records(n, seed)]
    out_path.parent.mkdir(parents=True, exist_ok=True)
    out_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return out_path


def load_dataset(path, split: str | None = None) -> list[CaptionedScene]:
    recs = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                rec = CaptionedScene.from_json(line)
                if split is None or rec.split == split:
                    recs.append(rec)
    return recs
