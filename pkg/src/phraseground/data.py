"""Procedural grounding corpus: colored shapes over stuff bands, templated
captions with per-phrase word spans, union masks for plural phrases, and a
versioned JSON annotation container with run-length-encoded masks.
"""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass, field, replace

import numpy as np

FORMAT_VERSION = 1

THING_NAMES = ["circle", "square", "triangle", "diamond", "cross", "ring"]
STUFF_NAMES = ["sky", "water", "field", "road"]
CATEGORY_NAMES = THING_NAMES + STUFF_NAMES
NUM_CATEGORIES = len(CATEGORY_NAMES)

PLURAL_FORMS = {name: name + "s" for name in THING_NAMES}

THING_COLORS = {
    "red": (220, 50, 47),
    "blue": (38, 89, 235),
    "yellow": (240, 200, 30),
    "purple": (150, 60, 200),
    "orange": (245, 130, 30),
    "cyan": (40, 200, 210),
    "pink": (235, 110, 180),
    "white": (240, 240, 240),
}

STUFF_STYLE = {
    # category -> (color word, rgb)
    "sky": ("pale", (160, 196, 232)),
    "water": ("teal", (50, 120, 150)),
    "field": ("green", (80, 160, 70)),
    "road": ("gray", (110, 110, 110)),
}

DISTRACTOR_NOUNS = [
    "mountain", "cloud", "tree", "bird", "boat",
    "kite", "fence", "tower", "star", "moon",
]

NUMBER_WORDS = {2: "two", 3: "three"}
CONNECTORS = ["and", "beside", "above", "near"]

MAX_WORDS = 230


class GenerationError(RuntimeError):
    """The requested scene cannot be placed on the canvas."""


class AnnotationFormatError(ValueError):
    """Annotation container violates the documented schema."""


class AnnotationValidationError(ValueError):
    """Annotation content is schema-valid but semantically inconsistent."""


@dataclass
class SceneSpec:
    seed: int = 0
    num_things: int = 3
    num_stuff: int = 2
    plural_probability: float = 0.3
    distractor_phrase_probability: float = 0.62
    image_size: int = 128

    def validate(self):
        if not (0.0 <= self.plural_probability <= 1.0):
            raise ValueError("plural_probability must be in [0,1]")
        if not (0.0 <= self.distractor_phrase_probability <= 1.0):
            raise ValueError("distractor_phrase_probability must be in [0,1]")
        if self.num_things < 0 or self.num_stuff < 0:
            raise ValueError("shape counts must be >= 0")
        if self.num_stuff > len(STUFF_NAMES):
            raise GenerationError(f"at most {len(STUFF_NAMES)} stuff regions available")
        if self.num_things > len(THING_COLORS):
            raise GenerationError(f"at most {len(THING_COLORS)} distinctly colored things available")
        if self.image_size % 32:
            raise ValueError("image_size must be a multiple of 32")


@dataclass
class PhraseAnnotation:
    word_span: tuple  # [start, end) into the caption
    category_id: int
    is_thing: bool
    is_plural: bool
    grounded: bool
    mask: np.ndarray | None = None  # uint8 {0,1}, [H, W]


@dataclass
class GroundingSample:
    image: np.ndarray  # float32 [H, W, 3] in [0,1]
    caption: list[str]
    phrases: list[PhraseAnnotation] = field(default_factory=list)

    def validate(self):
        H, W, _ = self.image.shape
        M = len(self.caption)
        if M > MAX_WORDS:
            raise AnnotationValidationError(f"caption has {M} words, max {MAX_WORDS}")
        taken = np.zeros(M, dtype=bool)
        for i, ph in enumerate(self.phrases):
            s, e = ph.word_span
            if not (0 <= s < e <= M):
                raise AnnotationValidationError(f"phrases[{i}].word_span {ph.word_span} outside [0,{M})")
            if taken[s:e].any():
                raise AnnotationValidationError(f"phrases[{i}].word_span overlaps another phrase")
            taken[s:e] = True
            if ph.grounded != (ph.mask is not None):
                raise AnnotationValidationError(f"phrases[{i}]: grounded flag inconsistent with mask")
            if not (0 <= ph.category_id < NUM_CATEGORIES):
                raise AnnotationValidationError(f"phrases[{i}].category_id out of range")
            if ph.mask is not None:
                if ph.mask.shape != (H, W):
                    raise AnnotationValidationError(f"phrases[{i}].mask shape {ph.mask.shape} != {(H, W)}")
                if ph.mask.sum() < 4:
                    raise AnnotationValidationError(f"phrases[{i}].mask has fewer than 4 pixels")


# ---------------------------------------------------------------------------
# shape rasterizers


def _shape_mask(shape_name: str, size: int, cy: float, cx: float, r: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    dy = yy - cy
    dx = xx - cx
    if shape_name == "circle":
        return dy * dy + dx * dx <= r * r
    if shape_name == "square":
        return (np.abs(dy) <= r) & (np.abs(dx) <= r)
    if shape_name == "triangle":
        # upright triangle inscribed in the radius-r box
        return (dy >= -r) & (dy <= r) & (np.abs(dx) <= (dy + r) / 2.0)
    if shape_name == "diamond":
        return np.abs(dy) + np.abs(dx) <= r
    if shape_name == "cross":
        arm = max(r / 3.0, 1.5)
        return ((np.abs(dy) <= arm) & (np.abs(dx) <= r)) | ((np.abs(dx) <= arm) & (np.abs(dy) <= r))
    if shape_name == "ring":
        d2 = dy * dy + dx * dx
        return (d2 <= r * r) & (d2 >= (0.55 * r) ** 2)
    raise ValueError(f"unknown shape {shape_name}")


def _bbox_overlaps(b, others, pad=2):
    y0, x0, y1, x1 = b
    for oy0, ox0, oy1, ox1 in others:
        if y0 < oy1 + pad and oy0 < y1 + pad and x0 < ox1 + pad and ox0 < x1 + pad:
            return True
    return False


def generate_sample(spec: SceneSpec) -> GroundingSample:
    """Render one scene. Deterministic in spec.seed; raises GenerationError
    when the requested shape count cannot be placed."""
    spec.validate()
    rng = np.random.default_rng(np.random.PCG64(spec.seed))
    size = spec.image_size
    for _ in range(20):
        sample = _try_generate(spec, rng, size)
        if sample is not None:
            sample.validate()
            return sample
    raise GenerationError(
        f"could not place {spec.num_things} things / {spec.num_stuff} stuff on a {size}px canvas"
    )


def _try_generate(spec: SceneSpec, rng: np.random.Generator, size: int) -> GroundingSample | None:
    ownership = np.full((size, size), -1, dtype=np.int32)  # phrase index per pixel
    palette = np.zeros((size, size, 3), dtype=np.uint8)
    palette[:] = (30, 30, 36)  # neutral backdrop when no stuff band covers a row

    chunks: list[tuple[list[str], PhraseAnnotation]] = []

    # stuff bands, top to bottom in canonical order
    stuff_choice = sorted(rng.choice(len(STUFF_NAMES), size=spec.num_stuff, replace=False).tolist())
    band_edges = np.linspace(0, size, spec.num_stuff + 1).astype(int) if spec.num_stuff else []
    stuff_entries = []
    for bi, cat_idx in enumerate(stuff_choice):
        name = STUFF_NAMES[cat_idx]
        color_word, rgb = STUFF_STYLE[name]
        y0, y1 = band_edges[bi], band_edges[bi + 1]
        ownership[y0:y1, :] = len(chunks)
        palette[y0:y1, :] = rgb
        ann = PhraseAnnotation(
            word_span=(0, 0), category_id=len(THING_NAMES) + cat_idx,
            is_thing=False, is_plural=False, grounded=True,
        )
        chunks.append(([("a"), color_word, name], ann))
        stuff_entries.append(len(chunks) - 1)

    # things: every group gets its own color, plural groups get 2-3 instances
    color_words = list(THING_COLORS)
    color_idx = rng.choice(len(color_words), size=spec.num_things, replace=False)
    shape_idx = rng.integers(0, len(THING_NAMES), size=spec.num_things)
    placed_boxes = []
    for k in range(spec.num_things):
        color_word = color_words[color_idx[k]]
        shape_name = THING_NAMES[shape_idx[k]]
        plural = rng.random() < spec.plural_probability
        count = int(rng.choice([2, 3], p=[0.7, 0.3])) if plural else 1
        group_mask = np.zeros((size, size), dtype=bool)
        ok = True
        for _ in range(count):
            placed = False
            for _attempt in range(200):
                r = rng.uniform(0.09, 0.16) * size
                cy = rng.uniform(r + 2, size - r - 2)
                cx = rng.uniform(r + 2, size - r - 2)
                box = (cy - r, cx - r, cy + r, cx + r)
                if _bbox_overlaps(box, placed_boxes):
                    continue
                m = _shape_mask(shape_name, size, cy, cx, r)
                if m.sum() < 16:
                    continue
                placed_boxes.append(box)
                group_mask |= m
                placed = True
                break
            if not placed:
                ok = False
                break
        if not ok:
            return None
        phrase_idx = len(chunks)
        ownership[group_mask] = phrase_idx
        palette[group_mask] = THING_COLORS[color_word]
        words = ([NUMBER_WORDS[count], color_word, PLURAL_FORMS[shape_name]] if plural
                 else ["a", color_word, shape_name])
        ann = PhraseAnnotation(
            word_span=(0, 0), category_id=THING_NAMES.index(shape_name),
            is_thing=True, is_plural=plural, grounded=True,
        )
        chunks.append((words, ann))

    # distractors: mentioned but never rendered
    for di, noun in enumerate(DISTRACTOR_NOUNS):
        if rng.random() < spec.distractor_phrase_probability:
            ann = PhraseAnnotation(
                word_span=(0, 0), category_id=di % NUM_CATEGORIES,
                is_thing=True, is_plural=False, grounded=False,
            )
            chunks.append((["a", noun], ann))

    # finalize masks from the ownership map (later things punched holes in stuff)
    for idx, (_, ann) in enumerate(chunks):
        if not ann.grounded:
            continue
        mask = (ownership == idx).astype(np.uint8)
        if mask.sum() < 4:
            return None  # a band got fully covered; re-deal the scene
        ann.mask = mask

    # caption assembly: chunks joined by cycling connectors
    caption: list[str] = []
    for ci, (words, ann) in enumerate(chunks):
        if ci > 0:
            caption.append(CONNECTORS[(ci - 1) % len(CONNECTORS)])
        start = len(caption)
        caption.extend(words)
        ann.word_span = (start, len(caption))

    image = palette.astype(np.float32) / np.float32(255.0)
    return GroundingSample(image=image, caption=caption, phrases=[ann for _, ann in chunks])


def generate_corpus(spec: SceneSpec, count: int, base_seed: int | None = None) -> list[GroundingSample]:
    """Deterministic per-sample seed schedule: sample i uses base_seed + i."""
    seed0 = spec.seed if base_seed is None else base_seed
    return [generate_sample(replace(spec, seed=seed0 + i)) for i in range(count)]


def all_grammar_words() -> list[str]:
    """Closed vocabulary of everything the generator can emit."""
    words = {"a"}
    words.update(NUMBER_WORDS.values())
    words.update(CONNECTORS)
    words.update(THING_COLORS)
    words.update(THING_NAMES)
    words.update(PLURAL_FORMS.values())
    for color_word, _ in STUFF_STYLE.values():
        words.add(color_word)
    words.update(STUFF_NAMES)
    words.update(DISTRACTOR_NOUNS)
    return sorted(words)


# ---------------------------------------------------------------------------
# run-length encoding: flat [value, run, value, run, ...] covering H*W exactly


def rle_encode(mask: np.ndarray) -> list[int]:
    flat = np.asarray(mask, dtype=np.uint8).reshape(-1)
    if flat.size == 0:
        return []
    boundaries = np.flatnonzero(np.diff(flat)) + 1
    starts = np.concatenate([[0], boundaries])
    ends = np.concatenate([boundaries, [flat.size]])
    out = []
    for s, e in zip(starts, ends):
        out.extend((int(flat[s]), int(e - s)))
    return out


def rle_decode(rle: list[int], shape: tuple) -> np.ndarray:
    if len(rle) % 2:
        raise AnnotationFormatError("rle length must be even")
    values = np.asarray(rle[0::2], dtype=np.uint8)
    runs = np.asarray(rle[1::2], dtype=np.int64)
    total = int(np.prod(shape))
    if runs.sum() != total:
        raise AnnotationValidationError(f"rle covers {runs.sum()} pixels, expected {total}")
    return np.repeat(values, runs).reshape(shape)


# ---------------------------------------------------------------------------
# annotation container


def category_table() -> list[dict]:
    return [
        {"id": i, "name": name, "is_thing": name in THING_NAMES}
        for i, name in enumerate(CATEGORY_NAMES)
    ]


def save_annotations(samples: list[GroundingSample], path: str):
    records = []
    for sample in samples:
        sample.validate()
        phrases = []
        for ph in sample.phrases:
            phrases.append({
                "span": list(ph.word_span),
                "category_id": ph.category_id,
                "is_thing": ph.is_thing,
                "is_plural": ph.is_plural,
                "grounded": ph.grounded,
                "mask_rle": rle_encode(ph.mask) if ph.mask is not None else None,
            })
        img = np.ascontiguousarray(sample.image, dtype=np.float32)
        records.append({
            "image": {
                "shape": list(img.shape),
                "dtype": "float32",
                "data_b64": base64.b64encode(img.tobytes()).decode("ascii"),
            },
            "caption": sample.caption,
            "phrases": phrases,
        })
    payload = {
        "format_version": FORMAT_VERSION,
        "categories": category_table(),
        "samples": records,
    }
    with open(path, "w") as fh:
        json.dump(payload, fh)


def _require(container, key, kind, path):
    if key not in container:
        raise AnnotationFormatError(f"{path}.{key}: missing field")
    value = container[key]
    if kind is not None and not isinstance(value, kind):
        raise AnnotationFormatError(f"{path}.{key}: expected {kind.__name__}, got {type(value).__name__}")
    return value


def load_annotations(path: str) -> list[GroundingSample]:
    with open(path) as fh:
        payload = json.load(fh)
    if not isinstance(payload, dict):
        raise AnnotationFormatError("$: top level must be an object")
    version = _require(payload, "format_version", int, "$")
    if version != FORMAT_VERSION:
        raise AnnotationFormatError(f"$.format_version: unsupported version {version}")
    _require(payload, "categories", list, "$")
    records = _require(payload, "samples", list, "$")
    samples = []
    for si, rec in enumerate(records):
        rpath = f"$.samples[{si}]"
        img_info = _require(rec, "image", dict, rpath)
        shape = tuple(_require(img_info, "shape", list, rpath + ".image"))
        dtype = _require(img_info, "dtype", str, rpath + ".image")
        if dtype != "float32":
            raise AnnotationFormatError(f"{rpath}.image.dtype: only float32 supported")
        raw = base64.b64decode(_require(img_info, "data_b64", str, rpath + ".image"))
        image = np.frombuffer(raw, dtype=np.float32).reshape(shape).copy()
        caption = _require(rec, "caption", list, rpath)
        phrases = []
        for pi, ph in enumerate(_require(rec, "phrases", list, rpath)):
            ppath = f"{rpath}.phrases[{pi}]"
            span = _require(ph, "span", list, ppath)
            if len(span) != 2:
                raise AnnotationFormatError(f"{ppath}.span: expected [start, end)")
            grounded = _require(ph, "grounded", bool, ppath)
            rle = ph.get("mask_rle")
            mask = rle_decode(rle, shape[:2]) if rle is not None else None
            phrases.append(PhraseAnnotation(
                word_span=(int(span[0]), int(span[1])),
                category_id=int(_require(ph, "category_id", int, ppath)),
                is_thing=bool(_require(ph, "is_thing", bool, ppath)),
                is_plural=bool(_require(ph, "is_plural", bool, ppath)),
                grounded=grounded,
                mask=mask,
            ))
        sample = GroundingSample(image=image, caption=list(caption), phrases=phrases)
        try:
            sample.validate()
        except AnnotationValidationError as exc:
            raise AnnotationValidationError(f"{rpath}: {exc}") from exc
        samples.append(sample)
    return samples
