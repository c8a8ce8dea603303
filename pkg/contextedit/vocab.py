"""The closed vocabulary scenes, instructions and captions are written in."""
from enum import Enum

from contextedit.errors import TokenizationError

BOUNDARY = "<end>"  # Closes every instruction; the head reads one output token here
CONNECTIVE = "and"  # Introduces every instruction after the first


class ShapeKind(str, Enum):
    RECTANGLE = "rectangle"
    ELLIPSE = "ellipse"


# Label -> (drawn shape, allowed (width, height) sizes). The first size is the add-stamp size.
LABEL_SHAPES: dict[str, tuple[ShapeKind, list[tuple[int, int]]]] = {
    "square": (ShapeKind.RECTANGLE, [(16, 16), (8, 8), (24, 24)]),
    "bar": (ShapeKind.RECTANGLE, [(16, 8), (24, 8)]),
    "pillar": (ShapeKind.RECTANGLE, [(8, 16), (8, 24)]),
    "circle": (ShapeKind.ELLIPSE, [(16, 16), (24, 24)]),
    "oval": (ShapeKind.ELLIPSE, [(24, 16), (16, 8)]),
}
SCENE_LABELS = list(LABEL_SHAPES)
# Labels that never occur in a scene; only non-applicable instructions mention them
PHANTOM_LABELS = ["triangle", "star", "heart", "ring"]

# Colours are 8-bit so images round-trip through PPM files exactly
PALETTE: dict[str, tuple[int, int, int]] = {
    "red": (220, 40, 40),
    "green": (40, 180, 60),
    "blue": (40, 80, 220),
    "yellow": (240, 210, 40),
    "purple": (150, 60, 190),
    "orange": (245, 140, 30),
    "white": (245, 245, 245),
}
COLORS = list(PALETTE)
BACKGROUND = (110, 110, 110)

VERTICAL = ["top", "bottom"]
HORIZONTAL = ["left", "right"]

WORDS = [
    BOUNDARY,
    CONNECTIVE,
    "add",
    "remove",
    "replace",
    "make",
    "a",
    "the",
    "with",
    "at",
    "empty",
    "scene",
    *COLORS,
    *SCENE_LABELS,
    *PHANTOM_LABELS,
    *VERTICAL,
    *HORIZONTAL,
]
WORD_IDS = {word: i for i, word in enumerate(WORDS)}
VOCAB_SIZE = len(WORDS)


def split_words(text: str | list[str]) -> list[str]:
    return text.split() if isinstance(text, str) else list(text)


def tokenize(text: str | list[str]) -> list[int]:
    """Map whitespace-separated words to vocabulary ids."""
    ids = []
    for word in split_words(text):
        if word not in WORD_IDS:
            raise TokenizationError(f"Word '{word}' is not in the vocabulary")
        ids.append(WORD_IDS[word])
    return ids


def compose_prompt(instructions: list[list[str]]) -> list[str]:
    """Join instructions with the connective and close each one with the boundary marker."""
    words: list[str] = []
    for i, instruction in enumerate(instructions):
        instruction = [w for w in instruction if w != BOUNDARY]
        if i > 0 and instruction[:1] != [CONNECTIVE]:
            words.append(CONNECTIVE)
        words.extend(instruction)
        words.append(BOUNDARY)
    return words


def instruction_segments(ids: list[int]) -> list[int]:
    """
    Instruction index of every prompt position.

    A position belongs to the instruction it is part of; the boundary marker
    belongs to the instruction it closes and the connective to the one it opens.
    Trailing words after the last boundary count towards the last instruction.
    """
    segments = []
    current = 0
    for token in ids:
        segments.append(current)
        if token == WORD_IDS[BOUNDARY]:
            current += 1
    n = max(current, 1)
    return [min(s, n - 1) for s in segments]


def boundary_positions(ids: list[int]) -> list[int]:
    return [i for i, token in enumerate(ids) if token == WORD_IDS[BOUNDARY]]
