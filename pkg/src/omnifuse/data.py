"""Programmatic image/text datasets with exact ground truth.

``caption``  a coloured shape in one cell of a 2x2 grid, described in words.
``vqa``      the same scenes with a question about colour, shape or position.
``formula``  a short formula string rendered with a 3x5 bitmap font.
``glyph``    a 4x4 glyph in one quadrant of a 32x32 image. Every glyph class
             has the same 2x2 block averages, so a 2x downscale erases the
             class; only a full-resolution view can tell them apart.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError

CAPTION_PROMPTS = (
    "Give a brief description of the image",
    "Describe the image in detail",
    "Provide a short description of the image",
)

COLORS: dict[str, tuple[float, float, float]] = {
    "red": (1.0, 0.0, 0.0),
    "green": (0.0, 1.0, 0.0),
    "blue": (0.0, 0.0, 1.0),
    "yellow": (1.0, 1.0, 0.0),
    "white": (1.0, 1.0, 1.0),
}
SHAPES = ("square", "frame", "cross")
POSITIONS = ("top left", "top right", "bottom left", "bottom right")
VQA_QUESTIONS = {
    "color": "What color is the shape?",
    "shape": "What shape is shown?",
    "position": "Where is the shape?",
}

SCENE_SIZE, CELL = 16, 8

# 3x5 font, one string per row, '#' = lit.
FONT: dict[str, tuple[str, ...]] = {
    "0": ("###", "#.#", "#.#", "#.#", "###"),
    "1": (".#.", "##.", ".#.", ".#.", "###"),
    "2": ("###", "..#", "###", "#..", "###"),
    "3": ("###", "..#", "###", "..#", "###"),
    "4": ("#.#", "#.#", "###", "..#", "..#"),
    "5": ("###", "#..", "###", "..#", "###"),
    "6": ("###", "#..", "###", "#.#", "###"),
    "7": ("###", "..#", ".#.", ".#.", ".#."),
    "8": ("###", "#.#", "###", "#.#", "###"),
    "9": ("###", "#.#", "###", "..#", "###"),
    "x": ("...", "#.#", ".#.", "#.#", "..."),
    "y": ("#.#", "#.#", ".#.", ".#.", ".#."),
    "+": ("...", ".#.", "###", ".#.", "..."),
    "-": ("...", "...", "###", "...", "..."),
    "=": ("...", "###", "...", "###", "..."),
    "^": (".#.", "#.#", "...", "...", "..."),
}
FORMULA_PROMPT = "Write the formula in LaTeX"
FORMULA_SLOTS = 6  # characters per formula image
FORMULA_HEIGHT, FORMULA_WIDTH = 7, 4 * FORMULA_SLOTS + 1

# Each glyph repeats one 2x2 block with exactly two lit pixels four times.
GLYPH_BLOCKS: dict[str, tuple[tuple[int, int], tuple[int, int]]] = {
    "horizontal": ((1, 1), (0, 0)),
    "vertical": ((1, 0), (1, 0)),
    "slash": ((0, 1), (1, 0)),
    "backslash": ((1, 0), (0, 1)),
}
GLYPH_PROMPT = "Which glyph is shown?"
GLYPH_IMAGE, GLYPH_QUADRANT, GLYPH_OFFSET = 32, 16, 6

KINDS = ("caption", "vqa", "formula", "glyph")


@dataclass
class Record:
    id: str
    image: np.ndarray  # [3, H, W] in [0, 1]
    prompt: str
    reference: str
    meta: dict = field(default_factory=dict)


def shape_mask(shape: str) -> np.ndarray:
    """6x6 boolean mask drawn inside an 8x8 cell at offset 1."""
    m = np.zeros((6, 6), dtype=bool)
    if shape == "square":
        m[:] = True
    elif shape == "frame":
        m[[0, -1], :] = True
        m[:, [0, -1]] = True
    elif shape == "cross":
        m[2:4, :] = True
        m[:, 2:4] = True
    else:
        raise ConfigError(f"unknown shape {shape!r}")
    return m


def render_scene(color: str, shape: str, position: str) -> np.ndarray:
    img = np.zeros((3, SCENE_SIZE, SCENE_SIZE))
    row, col = divmod(POSITIONS.index(position), 2)
    top, left = row * CELL + 1, col * CELL + 1
    mask = shape_mask(shape)
    for c, value in enumerate(COLORS[color]):
        img[c, top:top + 6, left:left + 6][mask] = value
    return img


def render_formula(text: str) -> np.ndarray:
    if len(text) > FORMULA_SLOTS:
        raise ConfigError(f"formula {text!r} longer than {FORMULA_SLOTS} characters")
    img = np.zeros((3, FORMULA_HEIGHT, FORMULA_WIDTH))
    for i, ch in enumerate(text):
        rows = FONT[ch]
        for r, line in enumerate(rows):
            for c, px in enumerate(line):
                if px == "#":
                    img[:, 1 + r, 1 + 4 * i + c] = 1.0
    return img


def glyph_pattern(name: str) -> np.ndarray:
    return np.tile(np.array(GLYPH_BLOCKS[name], dtype=float), (2, 2))


def render_glyph(name: str, quadrant: int) -> np.ndarray:
    img = np.zeros((3, GLYPH_IMAGE, GLYPH_IMAGE))
    row, col = divmod(quadrant, 2)
    top = row * GLYPH_QUADRANT + GLYPH_OFFSET
    left = col * GLYPH_QUADRANT + GLYPH_OFFSET
    img[:, top:top + 4, left:left + 4] = glyph_pattern(name)
    return img


def _random_formula(rng: np.random.Generator) -> tuple[str, str]:
    """A rendered string and its LaTeX reference, e.g. ``x^2+1`` -> ``x^{2}+1``."""
    var = "xy"[rng.integers(2)]
    a, b = (int(d) for d in rng.integers(0, 10, size=2))
    form = rng.integers(3)
    if form == 0:
        text = f"{var}^{a}+{b}"
        latex = f"{var}^{{{a}}}+{b}"
    elif form == 1:
        text = f"{a}{var}-{b}"
        latex = text
    else:
        text = f"{var}={a}+{b}"
        latex = text
    return text, latex


def synth_dataset(kind: str, n: int, seed: int = 0) -> list[Record]:
    """``n`` deterministic records of the given kind."""
    if kind not in KINDS:
        raise ConfigError(f"unknown dataset kind {kind!r}; expected one of {KINDS}")
    if n < 1:
        raise ConfigError(f"dataset size must be >= 1, got {n}")
    rng = np.random.default_rng(seed)
    colors = list(COLORS)
    records = []
    for i in range(n):
        rid = f"{kind}-{i:05d}"
        if kind in ("caption", "vqa"):
            color = colors[rng.integers(len(colors))]
            shape = SHAPES[rng.integers(len(SHAPES))]
            position = POSITIONS[rng.integers(len(POSITIONS))]
            meta = {"color": color, "shape": shape, "position": position}
            image = render_scene(color, shape, position)
            if kind == "caption":
                prompt = CAPTION_PROMPTS[rng.integers(len(CAPTION_PROMPTS))]
                ref = f"a {color} {shape} at {position}"
            else:
                asked = list(VQA_QUESTIONS)[rng.integers(len(VQA_QUESTIONS))]
                prompt, ref = VQA_QUESTIONS[asked], meta[asked]
                meta["asked"] = asked
        elif kind == "formula":
            text, ref = _random_formula(rng)
            image, prompt, meta = render_formula(text), FORMULA_PROMPT, {"text": text}
        else:
            name = list(GLYPH_BLOCKS)[rng.integers(len(GLYPH_BLOCKS))]
            quadrant = int(rng.integers(4))
            image, prompt, ref = render_glyph(name, quadrant), GLYPH_PROMPT, name
            meta = {"quadrant": quadrant}
        records.append(Record(rid, image, prompt, ref, meta))
    return records
