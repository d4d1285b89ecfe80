"""Few-shot prompt construction and label handling.

A demonstration set is an instruction plus ``k`` labeled example images; a
prompt interleaves it with the query image. Labels form a closed set of
twelve vehicle classes, ordered as in the reporting table.
"""

from __future__ import annotations

import base64
import enum
import json
import random
import re
import string
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

from .imaging import RasterImage


class ClassLabel(enum.Enum):
    AUTO_TRANSPORTER = "Auto Transporter"
    BOBTAIL = "Bobtail"
    PLATFORM_SU = "Platform (SU)"
    TANK_TANK = "Tank Tank"
    CONTAINER = "Container"
    DUMP_TANK_SEMI = "Dump Tank (Semi)"
    ENCLOSED_VAN_SEMI = "Enclosed Van (Semi)"
    ENCLOSED_VAN_SU = "Enclosed Van (SU)"
    LOW_BOY_PLATFORM = "Low Boy Platform"
    PASSENGER_VEHICLE = "Passenger Vehicle"
    PICKUP_UTILITY_SERVICE = "Pickup/Utility/Service"
    PLATFORM_SEMI = "Platform (Semi)"

    def __str__(self):
        return self.value

    @classmethod
    def parse(cls, text: str) -> ClassLabel:
        """Exact canonical spelling (used for ground-truth files)."""
        try:
            return cls(text.strip())
        except ValueError:
            raise ValueError(f"unknown class label {text!r}") from None


CLASS_LABELS = tuple(ClassLabel)
_RANK = {label: i for i, label in enumerate(CLASS_LABELS)}


@dataclass(frozen=True)
class Demonstration:
    image: RasterImage
    label: ClassLabel
    source_id: str = ""


@dataclass(frozen=True)
class DemonstrationSet:
    instruction: str
    demonstrations: tuple = ()

    @property
    def k(self) -> int:
        return len(self.demonstrations)


@dataclass(frozen=True)
class TextPart:
    text: str


@dataclass(frozen=True)
class ImagePart:
    image: RasterImage


@dataclass(frozen=True)
class Prompt:
    parts: tuple

    @property
    def images(self) -> list[RasterImage]:
        return [p.image for p in self.parts if isinstance(p, ImagePart)]

    @property
    def query(self) -> RasterImage:
        last = self.parts[-1]
        if not isinstance(last, ImagePart):
            raise ValueError("prompt does not end with the query image")
        return last.image

    def serialize(self) -> bytes:
        """Canonical JSON bytes (images as base64 PGM)."""
        out = []
        for p in self.parts:
            if isinstance(p, TextPart):
                out.append({"text": p.text})
            else:
                out.append({"image/pgm": base64.b64encode(p.image.to_pgm()).decode("ascii")})
        return json.dumps(out, separators=(",", ":"), sort_keys=True).encode("utf-8")


# --- template assets ---------------------------------------------------------

def _asset(name: str) -> str:
    return resources.files("truckvlm").joinpath("data", name).read_text(encoding="utf-8")


def default_instruction_template() -> str:
    return _asset("instruction_v1.txt")


def default_answer_format() -> str:
    return _asset("answer_format_v1.txt").strip()


def render_instruction(template: str | None = None, labels=CLASS_LABELS, answer_format: str | None = None) -> str:
    """Fill ``$labels`` and ``$answer_format`` placeholders."""
    template = template if template is not None else default_instruction_template()
    answer_format = answer_format if answer_format is not None else default_answer_format()
    listing = "\n".join(f"- {label.value}" for label in labels)
    return string.Template(template).substitute(labels=listing, answer_format=answer_format).strip()


# --- operations --------------------------------------------------------------

def select_demonstrations(pool, k: int, seed: int = 0, instruction: str | None = None) -> DemonstrationSet:
    """Pick ``k`` demonstrations, cycling through classes in canonical order.

    Each class's candidates are shuffled with ``seed``; the first round takes
    one example per class, the next round a second one, and so on, skipping
    classes that have run out.
    """
    pool = list(pool)
    if k < 0:
        raise ValueError("k must be >= 0")
    if k > len(pool):
        raise ValueError(f"requested {k} demonstrations from a pool of {len(pool)}")
    instruction = instruction if instruction is not None else render_instruction()
    rng = random.Random(seed)
    by_class = {label: [] for label in CLASS_LABELS}
    for demo in pool:
        by_class[demo.label].append(demo)
    for label in CLASS_LABELS:
        rng.shuffle(by_class[label])
    picked = []
    depth = 0
    while len(picked) < k:
        for label in CLASS_LABELS:
            if depth < len(by_class[label]) and len(picked) < k:
                picked.append(by_class[label][depth])
        depth += 1
    return DemonstrationSet(instruction, tuple(picked))


def build_prompt(demos: DemonstrationSet, query: RasterImage, labels=CLASS_LABELS,
                 answer_format: str | None = None) -> Prompt:
    if not query.lit.any():
        raise ValueError("query image is empty")
    answer_format = answer_format if answer_format is not None else default_answer_format()
    instruction = demos.instruction
    missing = [lb.value for lb in labels if lb.value not in instruction]
    if missing:
        instruction += "\nClasses:\n" + "\n".join(f"- {lb.value}" for lb in labels)
    parts = [TextPart(instruction)]
    for i, demo in enumerate(demos.demonstrations, 1):
        parts.append(TextPart(f"Example {i}:"))
        parts.append(ImagePart(demo.image))
        parts.append(TextPart(f"Label: {demo.label.value}"))
    parts.append(TextPart(f"{answer_format}\nQuery:"))
    parts.append(ImagePart(query))
    return Prompt(tuple(parts))


def predict(scores) -> ClassLabel:
    """Arg max over a score map; ties go to the earliest canonical label."""
    if not scores:
        raise ValueError("empty score map")
    return min(scores, key=lambda label: (-scores[label], _RANK[label]))


# --- free-text normalization -------------------------------------------------

_STRIP = " \t\r\n.,;:!?\"'`*_"
_PREFIX = re.compile(r"^(?:label|answer|class|prediction)\s*[:\-]\s*", re.IGNORECASE)


def _fold(text: str) -> str:
    return re.sub(r"\s+", " ", text.strip(_STRIP)).casefold()


def load_aliases(path=None) -> dict[str, ClassLabel]:
    """Parse ``alias -> canonical`` lines (``→`` also accepted)."""
    text = Path(path).read_text(encoding="utf-8") if path else _asset("aliases.txt")
    table = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        sep = "→" if "→" in line else "->"
        if sep not in line:
            raise ValueError(f"alias line {lineno}: missing '->'")
        alias, canonical = (s.strip() for s in line.split(sep, 1))
        table[_fold(alias)] = ClassLabel.parse(canonical)
    return table


_DEFAULT_ALIASES = None


def normalize_label(raw: str, aliases=None) -> ClassLabel | None:
    """Map model text onto a canonical label; None when nothing matches."""
    global _DEFAULT_ALIASES
    if aliases is None:
        if _DEFAULT_ALIASES is None:
            _DEFAULT_ALIASES = load_aliases()
        aliases = _DEFAULT_ALIASES
    text = _PREFIX.sub("", raw.strip(_STRIP))
    key = _fold(text)
    for label in CLASS_LABELS:
        if key == label.value.casefold():
            return label
    return aliases.get(key)
