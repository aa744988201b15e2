"""Procedural scenes of colored shapes on a 3x3 grid, with template captions.

A scene holds one or two objects. Two-object scenes list the objects in a
canonical order (by shape, then color) and the caption states where the
first object sits relative to the second, so every image has exactly one
correct caption.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .seeding import stream

SHAPES = ("circle", "square", "triangle")
COLORS = ("red", "green", "blue", "yellow")
RELATIONS = ("above", "below", "left-of", "right-of")
ARTICLE = "a"

IMAGE_SIZE = 32
CELL_BOUNDS = (0, 11, 21, 32)
BACKGROUND = (128, 128, 128)
RGB = {
    "red": (230, 25, 25),
    "green": (25, 180, 25),
    "blue": (25, 25, 230),
    "yellow": (230, 230, 25),
}


@dataclass(frozen=True, order=True)
class SceneObject:
    shape: str
    color: str
    cell: int

    @property
    def kind(self) -> tuple[int, int]:
        return SHAPES.index(self.shape), COLORS.index(self.color)


@dataclass(frozen=True)
class Scene:
    objects: tuple[SceneObject, ...]

    def __post_init__(self):
        objs = tuple(self.objects)
        if not 1 <= len(objs) <= 2:
            raise ValueError(f"a scene holds 1 or 2 objects, got {len(objs)}")
        for o in objs:
            if o.shape not in SHAPES or o.color not in COLORS or not 0 <= o.cell < 9:
                raise ValueError(f"invalid object {o}")
        if len(objs) == 2:
            a, b = objs
            if a.cell == b.cell:
                raise ValueError("objects must occupy distinct cells")
            if a.kind == b.kind:
                raise ValueError("objects must differ in shape or color")
            objs = tuple(sorted(objs, key=lambda o: o.kind))
        object.__setattr__(self, "objects", objs)

    @property
    def relation(self) -> str | None:
        """Position of the first object relative to the second (vertical wins)."""
        if len(self.objects) == 1:
            return None
        a, b = self.objects
        (ra, ca), (rb, cb) = divmod(a.cell, 3), divmod(b.cell, 3)
        if ra != rb:
            return "above" if ra < rb else "below"
        return "left-of" if ca < cb else "right-of"

    @property
    def label(self) -> int:
        """Class used by the baseline head: color of the first object."""
        return COLORS.index(self.objects[0].color)

    def to_dict(self) -> dict:
        return {"objects": [{"shape": o.shape, "color": o.color, "cell": o.cell} for o in self.objects]}

    @classmethod
    def from_dict(cls, d: dict) -> "Scene":
        return cls(tuple(SceneObject(o["shape"], o["color"], int(o["cell"])) for o in d["objects"]))


def caption_of(scene: Scene) -> str:
    words = []
    for k, o in enumerate(scene.objects):
        if k == 1:
            words.append(scene.relation)
        words += [ARTICLE, o.color, o.shape]
    return " ".join(words)


def parse_caption(text: str) -> dict:
    """Inverse of :func:`caption_of` up to object cells."""
    w = text.split()
    if len(w) == 3 and w[0] == ARTICLE:
        return {"objects": [{"color": w[1], "shape": w[2]}], "relation": None}
    if len(w) == 7 and w[0] == ARTICLE and w[4] == ARTICLE:
        return {
            "objects": [{"color": w[1], "shape": w[2]}, {"color": w[5], "shape": w[6]}],
            "relation": w[3],
        }
    raise ValueError(f"not a template caption: {text!r}")


def template_words() -> list[str]:
    return [ARTICLE, *COLORS, *SHAPES, *RELATIONS]


# ------------------------------------------------------------------ rendering

_yy, _xx = np.mgrid[0:IMAGE_SIZE, 0:IMAGE_SIZE] + 0.5


def _cell_box(cell: int) -> tuple[int, int, int, int]:
    r, c = divmod(cell, 3)
    return CELL_BOUNDS[r], CELL_BOUNDS[r + 1], CELL_BOUNDS[c], CELL_BOUNDS[c + 1]


def _shape_mask(shape: str, cell: int) -> np.ndarray:
    y0, y1, x0, x1 = _cell_box(cell)
    cy, cx = (y0 + y1) / 2, (x0 + x1) / 2
    dy, dx = _yy - cy, _xx - cx
    if shape == "circle":
        m = dx * dx + dy * dy <= 4.2**2
    elif shape == "square":
        m = (np.abs(dx) <= 3.6) & (np.abs(dy) <= 3.6)
    else:
        m = (dy >= -4.2) & (dy <= 4.2) & (np.abs(dx) <= (dy + 4.2) / 2)
    inside = (_yy >= y0) & (_yy < y1) & (_xx >= x0) & (_xx < x1)
    return m & inside


def render_bytes(scene: Scene) -> np.ndarray:
    img = np.empty((IMAGE_SIZE, IMAGE_SIZE, 3), dtype=np.uint8)
    img[:] = BACKGROUND
    for o in scene.objects:
        img[_shape_mask(o.shape, o.cell)] = RGB[o.color]
    return img


def bytes_to_image(b: np.ndarray) -> np.ndarray:
    # level centers, so no pixel sits exactly on the box edge
    return (2.0 * b.astype(np.float64) + 1.0) / 256.0 - 1.0


def image_to_bytes(img: np.ndarray) -> np.ndarray:
    return np.clip(np.floor((np.asarray(img) + 1.0) * 128.0), 0, 255).astype(np.uint8)


def render(scene: Scene) -> np.ndarray:
    """Image of shape (32, 32, 3) with values in (-1, 1)."""
    return bytes_to_image(render_bytes(scene))


def write_ppm(path: str | Path, img_bytes: np.ndarray) -> None:
    h, w, _ = img_bytes.shape
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode())
        f.write(np.ascontiguousarray(img_bytes, dtype=np.uint8).tobytes())


def read_ppm(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        end = pos
        while not raw[end : end + 1].isspace():
            end += 1
        tokens.append(raw[pos:end])
        pos = end
    if tokens[0] != b"P6" or int(tokens[3]) != 255:
        raise ValueError(f"{path}: only binary P6 with maxval 255 is supported")
    w, h = int(tokens[1]), int(tokens[2])
    pos += 1
    return np.frombuffer(raw[pos : pos + w * h * 3], dtype=np.uint8).reshape(h, w, 3).copy()


# ----------------------------------------------------------------- datasets


@dataclass
class Example:
    id: str
    split: str
    image: str
    caption: str
    scene: Scene
    label: int

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "split": self.split,
            "image": self.image,
            "caption": self.caption,
            "scene": self.scene.to_dict(),
            "label": self.label,
        }


@dataclass
class DatasetManifest:
    seed: int
    examples: list[Example]

    def split(self, name: str) -> list[Example]:
        return [e for e in self.examples if e.split == name]

    def to_json(self) -> str:
        doc = {"seed": self.seed, "examples": [e.to_dict() for e in self.examples]}
        return json.dumps(doc, indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "DatasetManifest":
        doc = json.loads(text)
        exs = [
            Example(d["id"], d["split"], d["image"], d["caption"], Scene.from_dict(d["scene"]), d["label"])
            for d in doc["examples"]
        ]
        return cls(doc["seed"], exs)


def all_single_scenes() -> list[Scene]:
    return [Scene((SceneObject(s, c, cell),)) for s in SHAPES for c in COLORS for cell in range(9)]


def _random_pair(rng: np.random.Generator) -> Scene:
    cells = rng.choice(9, size=2, replace=False)
    kinds = rng.choice(len(SHAPES) * len(COLORS), size=2, replace=False)
    objs = tuple(
        SceneObject(SHAPES[k // len(COLORS)], COLORS[k % len(COLORS)], int(cell)) for k, cell in zip(kinds, cells)
    )
    return Scene(objs)


def generate(seed: int, n_train: int = 2000, n_val: int = 200, p_single: float = 0.25) -> DatasetManifest:
    """Sample distinct scenes for each split; the splits share no scene."""
    if n_train <= 0 or n_val <= 0:
        raise ValueError("n_train and n_val must be positive")
    rng = stream(seed, "dataset")
    singles = all_single_scenes()
    order = list(rng.permutation(len(singles)))
    seen: set[Scene] = set()
    examples = []
    for split, n in (("train", n_train), ("val", n_val)):
        for i in range(n):
            while True:
                if order and rng.random() < p_single:
                    scene = singles[order.pop()]
                else:
                    scene = _random_pair(rng)
                if scene not in seen:
                    break
            seen.add(scene)
            ex_id = f"{split}_{i:05d}"
            examples.append(Example(ex_id, split, f"images/{ex_id}.ppm", caption_of(scene), scene, scene.label))
    return DatasetManifest(seed, examples)


def write_dataset(manifest: DatasetManifest, out_dir: str | Path) -> Path:
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    for e in manifest.examples:
        write_ppm(out / e.image, render_bytes(e.scene))
    path = out / "manifest.json"
    path.write_text(manifest.to_json())
    return path


def load_dataset(path: str | Path) -> tuple[DatasetManifest, np.ndarray]:
    """Load a manifest (file or directory) and its images as a float array."""
    p = Path(path)
    if p.is_dir():
        p = p / "manifest.json"
    manifest = DatasetManifest.from_json(p.read_text())
    images = np.stack([bytes_to_image(read_ppm(p.parent / e.image)) for e in manifest.examples])
    return manifest, images


def render_manifest(manifest: DatasetManifest) -> np.ndarray:
    return np.stack([render(e.scene) for e in manifest.examples])
