"""Synthetic scenes and templated referring expressions with certified referents.

A scene is a set of colored, categorized boxes.  Most scenes contain one
*duplicate group*: several regions sharing category, color, and box size, so
nothing about a member alone distinguishes it.  Expressions about a duplicate
group always use "closest to" with a planted anchor region: the referent is
drawn uniformly from the group *first*, and the anchor is then placed nearer
to it than to every other member by a margin.  Since the referent choice is
independent of the members' own features, a model scoring each region in
isolation can do no better than chance on these samples — relations are the
only way in.  Directional or comparative phrasings over a duplicate group are
never emitted, because with a unique referent those make it an extremum of the
group (leftmost, nearest-the-edge, ...), which is decodable from a region's
own geometry.

Every emitted sample is certified by ``resolve_oracle``, a brute-force
evaluator of the expression AST, and every relational sample stays ambiguous
(two or more matches) once its relation clause is stripped.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass
from functools import lru_cache
from typing import Optional, Sequence

import numpy as np

from .scenegraph import BoundingBox, Region, Scene

__all__ = [
    "GenerationError",
    "SceneSpec",
    "ExpressionPolicy",
    "SubjectPredicate",
    "IntraRelation",
    "InterRelation",
    "ExpressionAST",
    "LabeledSample",
    "SceneRecord",
    "PlantedScene",
    "INTRA_RELATIONS",
    "INTER_RELATIONS",
    "TAGS",
    "appearance_vector",
    "render_tokens",
    "resolve_oracle",
    "unique_descriptor",
    "is_identical_duplicate_sample",
    "generate_scene",
    "generate_expression",
    "generate_dataset",
]

logger = logging.getLogger(__name__)

INTRA_RELATIONS = ("leftmost", "rightmost", "largest", "second-from-left",
                   "above-peer", "below-peer")
INTER_RELATIONS = ("left-of", "right-of", "above", "below", "nearest-to")
TAGS = ("attribute-only", "relational")

# Fixed entropy for the name-embedding tables: the appearance of a category or
# color is part of the world's definition, not of any one dataset's seed.
_EMBEDDING_ENTROPY = 0x5EED_FEA7

_MARGIN_FRACTION = 0.05          # of W (x), H (y), max(W, H) (distance)
_AREA_RATIO_MARGIN = 1.5         # decisive gap for "largest"
_BOX_SIZE_RANGE = (40.0, 150.0)
_PLACE_TRIES = 200
_ANCHOR_TRIES = 500
_SCENE_ATTEMPTS = 100


class GenerationError(RuntimeError):
    """Scene or expression generation exhausted its retry budget."""


class _PlacementFailure(Exception):
    pass


# -- world configuration --------------------------------------------------


@dataclass(frozen=True)
class SceneSpec:
    """World parameters; a dataset is a pure function of (spec, policy, count)."""

    width: float = 640.0
    height: float = 480.0
    categories: tuple[str, ...] = ("dog", "cat", "car", "tree", "chair",
                                   "ball", "bird", "lamp")
    colors: tuple[str, ...] = ("red", "blue", "green", "yellow", "black",
                               "white")
    regions_range: tuple[int, int] = (5, 8)
    duplicate_group_sizes: tuple[int, ...] = (2, 3, 4)
    appearance_dim: int = 64
    noise: float = 0.05
    max_iou: float = 0.3
    seed: int = 0

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image size must be positive")
        lo, hi = self.regions_range
        if not 1 <= lo <= hi:
            raise ValueError("regions_range must satisfy 1 <= low <= high")
        if not self.categories or len(set(self.categories)) != len(self.categories):
            raise ValueError("categories must be nonempty and unique")
        if not self.colors or len(set(self.colors)) != len(self.colors):
            raise ValueError("colors must be nonempty and unique")
        if self.appearance_dim % 2 != 0 or self.appearance_dim <= 0:
            raise ValueError("appearance_dim must be positive and even")
        if self.noise < 0:
            raise ValueError("noise must be nonnegative")
        if not 0 <= self.max_iou < 1:
            raise ValueError("max_iou must be in [0, 1)")
        if any(m < 2 for m in self.duplicate_group_sizes):
            raise ValueError("duplicate groups need at least 2 members")
        if len(self.categories) * len(self.colors) - 1 < hi:
            raise ValueError("not enough (category, color) pairs for the "
                             "requested region count")

    def to_dict(self) -> dict:
        return {
            "width": self.width, "height": self.height,
            "categories": list(self.categories), "colors": list(self.colors),
            "regions_range": list(self.regions_range),
            "duplicate_group_sizes": list(self.duplicate_group_sizes),
            "appearance_dim": self.appearance_dim, "noise": self.noise,
            "max_iou": self.max_iou, "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        kwargs = dict(d)
        for key in ("categories", "colors", "regions_range",
                    "duplicate_group_sizes"):
            if key in kwargs:
                kwargs[key] = tuple(kwargs[key])
        return cls(**kwargs)


@dataclass(frozen=True)
class ExpressionPolicy:
    """How expressions are drawn for each scene."""

    relational_fraction: float = 0.6
    planted_fraction: float = 0.5     # among relational draws: duplicate-group share
    expressions_per_scene: int = 2
    max_retries: int = 50

    def __post_init__(self):
        if not 0 <= self.relational_fraction <= 1:
            raise ValueError("relational_fraction must be in [0, 1]")
        if not 0 <= self.planted_fraction <= 1:
            raise ValueError("planted_fraction must be in [0, 1]")
        if self.expressions_per_scene < 1:
            raise ValueError("need at least one expression per scene")

    def to_dict(self) -> dict:
        return {"relational_fraction": self.relational_fraction,
                "planted_fraction": self.planted_fraction,
                "expressions_per_scene": self.expressions_per_scene,
                "max_retries": self.max_retries}

    @classmethod
    def from_dict(cls, d: dict) -> "ExpressionPolicy":
        return cls(**d)


# -- expression AST --------------------------------------------------------


@dataclass(frozen=True)
class SubjectPredicate:
    category: str
    color: Optional[str] = None

    def to_dict(self) -> dict:
        return {"category": self.category, "color": self.color}

    @classmethod
    def from_dict(cls, d: dict) -> "SubjectPredicate":
        return cls(category=d["category"], color=d.get("color"))


@dataclass(frozen=True)
class IntraRelation:
    relation: str

    def __post_init__(self):
        if self.relation not in INTRA_RELATIONS:
            raise ValueError(f"unknown within-category relation {self.relation!r}")

    def to_dict(self) -> dict:
        return {"relation": self.relation}


@dataclass(frozen=True)
class InterRelation:
    relation: str
    anchor: SubjectPredicate

    def __post_init__(self):
        if self.relation not in INTER_RELATIONS:
            raise ValueError(f"unknown cross-category relation {self.relation!r}")

    def to_dict(self) -> dict:
        return {"relation": self.relation, "anchor": self.anchor.to_dict()}


@dataclass(frozen=True)
class ExpressionAST:
    subject: SubjectPredicate
    intra: Optional[IntraRelation] = None
    inter: Optional[InterRelation] = None

    @property
    def relational(self) -> bool:
        return self.intra is not None or self.inter is not None

    def without_relations(self) -> "ExpressionAST":
        return ExpressionAST(self.subject)

    def to_dict(self) -> dict:
        return {"subject": self.subject.to_dict(),
                "intra": self.intra.to_dict() if self.intra else None,
                "inter": self.inter.to_dict() if self.inter else None}

    @classmethod
    def from_dict(cls, d: dict) -> "ExpressionAST":
        intra = d.get("intra")
        inter = d.get("inter")
        return cls(
            subject=SubjectPredicate.from_dict(d["subject"]),
            intra=IntraRelation(intra["relation"]) if intra else None,
            inter=InterRelation(inter["relation"],
                                SubjectPredicate.from_dict(inter["anchor"]))
            if inter else None,
        )


@dataclass(frozen=True)
class LabeledSample:
    tokens: tuple[str, ...]
    ast: Optional[ExpressionAST]  # None for externally authored datasets
    referent_id: int
    tag: str

    def __post_init__(self):
        if self.tag not in TAGS:
            raise ValueError(f"unknown tag {self.tag!r}")


@dataclass
class SceneRecord:
    scene_id: int
    scene: Scene
    samples: list[LabeledSample]


@dataclass
class PlantedScene:
    """A scene plus the duplicate-group bookkeeping expression sampling needs.

    ``referent_id``/``anchor_id`` record the uniform pre-placement choice that
    makes duplicate-group samples information-free for per-region scorers.
    """

    scene: Scene
    duplicate_ids: tuple[int, ...] = ()
    referent_id: Optional[int] = None
    anchor_id: Optional[int] = None


# -- appearance features ----------------------------------------------------


@lru_cache(maxsize=None)
def _name_embedding(name: str, width: int) -> tuple[float, ...]:
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    key = int.from_bytes(digest[:8], "little")
    rng = np.random.default_rng(
        np.random.SeedSequence(entropy=_EMBEDDING_ENTROPY, spawn_key=(key,)))
    return tuple(rng.normal(size=width))


def appearance_vector(category: str, color: str, dim: int, noise: float,
                      rng: np.random.Generator) -> np.ndarray:
    """Category embedding ⊕ color embedding, plus seeded Gaussian noise."""
    half = dim // 2
    base = np.concatenate([
        np.asarray(_name_embedding(f"category:{category}", half)),
        np.asarray(_name_embedding(f"color:{color}", half)),
    ])
    if noise > 0:
        base = base + noise * rng.normal(size=dim)
    return base


# -- the brute-force resolver ------------------------------------------------


def _center(r: Region) -> tuple[float, float]:
    return r.box.center


def _region_by_id(scene: Scene, region_id: int) -> Region:
    return scene.regions[scene.region_index(region_id)]


def _matches_subject(r: Region, subject: SubjectPredicate) -> bool:
    if r.category != subject.category:
        return False
    return subject.color is None or r.attributes.get("color") == subject.color


def _rank_groups(cands: list[Region], key, reverse: bool = False):
    values = sorted({key(r) for r in cands}, reverse=reverse)
    return [[r for r in cands if key(r) == v] for v in values]


def _apply_intra(cands: list[Region], relation: str) -> list[Region]:
    if not cands:
        return []
    if relation == "leftmost":
        return _rank_groups(cands, lambda r: _center(r)[0])[0]
    if relation == "rightmost":
        return _rank_groups(cands, lambda r: _center(r)[0], reverse=True)[0]
    if relation == "largest":
        return _rank_groups(cands, lambda r: r.box.area, reverse=True)[0]
    if relation == "above-peer":
        return _rank_groups(cands, lambda r: _center(r)[1])[0]
    if relation == "below-peer":
        return _rank_groups(cands, lambda r: _center(r)[1], reverse=True)[0]
    if relation == "second-from-left":
        groups = _rank_groups(cands, lambda r: _center(r)[0])
        return groups[1] if len(groups) >= 2 else []
    raise ValueError(f"unknown within-category relation {relation!r}")


def _apply_inter(cands: list[Region], relation: str, anchor: Region,
                 width: float, height: float) -> list[Region]:
    ax, ay = _center(anchor)
    margin_x = _MARGIN_FRACTION * width
    margin_y = _MARGIN_FRACTION * height
    margin_d = _MARGIN_FRACTION * max(width, height)
    cands = [r for r in cands if r is not anchor]
    if not cands:
        return []
    if relation == "left-of":
        return [r for r in cands if _center(r)[0] <= ax - margin_x]
    if relation == "right-of":
        return [r for r in cands if _center(r)[0] >= ax + margin_x]
    if relation == "above":
        return [r for r in cands if _center(r)[1] <= ay - margin_y]
    if relation == "below":
        return [r for r in cands if _center(r)[1] >= ay + margin_y]
    if relation == "nearest-to":
        dists = {r.region_id: float(np.hypot(_center(r)[0] - ax,
                                             _center(r)[1] - ay))
                 for r in cands}
        dmin = min(dists.values())
        return [r for r in cands if dists[r.region_id] <= dmin + margin_d]
    raise ValueError(f"unknown cross-category relation {relation!r}")


def resolve_oracle(scene: Scene, ast: ExpressionAST) -> frozenset[int]:
    """Exhaustively evaluate the AST; the set of satisfying region ids.

    Empty and multi-member results are valid (unresolvable / ambiguous).
    """
    cands = [r for r in scene.regions if _matches_subject(r, ast.subject)]
    if ast.intra is not None:
        cands = _apply_intra(cands, ast.intra.relation)
    if ast.inter is not None:
        anchors = [r for r in scene.regions
                   if _matches_subject(r, ast.inter.anchor)]
        if len(anchors) != 1:
            return frozenset()
        cands = _apply_inter(cands, ast.inter.relation, anchors[0],
                             scene.width, scene.height)
    return frozenset(r.region_id for r in cands)


def unique_descriptor(scene: Scene, region: Region) -> Optional[SubjectPredicate]:
    """Shortest subject predicate picking out exactly this region, if any."""
    same_cat = [r for r in scene.regions if r.category == region.category]
    if len(same_cat) == 1:
        return SubjectPredicate(region.category)
    color = region.attributes.get("color")
    if color is not None:
        same_pair = [r for r in same_cat if r.attributes.get("color") == color]
        if len(same_pair) == 1:
            return SubjectPredicate(region.category, color)
    return None


def is_identical_duplicate_sample(scene: Scene, ast: ExpressionAST) -> bool:
    """True when the sample is relational over indistinguishable candidates."""
    if not ast.relational:
        return False
    cands = [r for r in scene.regions if _matches_subject(r, ast.subject)]
    if len(cands) < 2:
        return False
    pairs = {(r.category, r.attributes.get("color")) for r in cands}
    return len(pairs) == 1


# -- templates ----------------------------------------------------------------


_INTRA_WORDS = {"leftmost": ("leftmost",), "rightmost": ("rightmost",),
                "largest": ("largest",), "above-peer": ("upper",),
                "below-peer": ("lower",)}
_INTER_WORDS = {"left-of": ("left", "of"), "right-of": ("right", "of"),
                "above": ("above",), "below": ("below",),
                "nearest-to": ("closest", "to")}


def _subject_words(subject: SubjectPredicate) -> list[str]:
    words = [] if subject.color is None else [subject.color]
    return words + [subject.category]


def render_tokens(ast: ExpressionAST) -> tuple[str, ...]:
    """Fixed template wording: subject, then intra, then inter clause."""
    if ast.intra is not None and ast.intra.relation == "second-from-left":
        tokens = ["the", "second", *_subject_words(ast.subject),
                  "from", "the", "left"]
    elif ast.intra is not None:
        tokens = ["the", *_INTRA_WORDS[ast.intra.relation],
                  *_subject_words(ast.subject)]
    else:
        tokens = ["the", *_subject_words(ast.subject)]
    if ast.inter is not None:
        tokens += ["that", "is", *_INTER_WORDS[ast.inter.relation],
                   "the", *_subject_words(ast.inter.anchor)]
    return tuple(tokens)


# -- scene generation ----------------------------------------------------------


def _boxes_compatible(box: BoundingBox, placed: list[BoundingBox],
                      max_iou: float) -> bool:
    from .scenegraph import iou
    return all(iou(box, other) <= max_iou for other in placed)


def _place_box(rng: np.random.Generator, w: float, h: float,
               placed: list[BoundingBox], spec: SceneSpec) -> BoundingBox:
    for _ in range(_PLACE_TRIES):
        x = rng.uniform(0.0, spec.width - w)
        y = rng.uniform(0.0, spec.height - h)
        box = BoundingBox(x, y, w, h)
        if _boxes_compatible(box, placed, spec.max_iou):
            return box
    raise _PlacementFailure("box placement")


def _place_anchor(rng: np.random.Generator, w: float, h: float,
                  placed: list[BoundingBox], spec: SceneSpec,
                  referent_box: BoundingBox,
                  other_boxes: list[BoundingBox]) -> BoundingBox:
    margin = _MARGIN_FRACTION * max(spec.width, spec.height)
    rx, ry = referent_box.center
    for _ in range(_ANCHOR_TRIES):
        x = rng.uniform(0.0, spec.width - w)
        y = rng.uniform(0.0, spec.height - h)
        box = BoundingBox(x, y, w, h)
        if not _boxes_compatible(box, placed, spec.max_iou):
            continue
        ax, ay = box.center
        d_ref = np.hypot(rx - ax, ry - ay)
        if all(np.hypot(bx - ax, by - ay) >= d_ref + margin
               for bx, by in (b.center for b in other_boxes)):
            return box
    raise _PlacementFailure("anchor placement")


def _sample_size(rng: np.random.Generator) -> tuple[float, float]:
    lo, hi = _BOX_SIZE_RANGE
    return float(rng.uniform(lo, hi)), float(rng.uniform(lo, hi))


def _plan_scene(spec: SceneSpec, rng: np.random.Generator) -> PlantedScene:
    lo, hi = spec.regions_range
    sizes = [m for m in spec.duplicate_group_sizes if m + 2 <= hi]
    if sizes:
        m = int(sizes[rng.integers(len(sizes))])
        n = int(rng.integers(max(lo, m + 2), hi + 1))
    else:
        m = 0
        n = int(rng.integers(lo, hi + 1))
    n_distractors = n - m

    pairs = [(c, col) for c in spec.categories for col in spec.colors]
    dup_pair = pairs[rng.integers(len(pairs))] if m else None
    others = [p for p in pairs if p != dup_pair]
    order = rng.permutation(len(others))
    distractor_pairs = [others[i] for i in order[:n_distractors]]

    # entry: (category, color, box, role), role in {dup, filler, anchor}
    placed: list[BoundingBox] = []
    entries: list[tuple[str, str, BoundingBox, str]] = []
    planted_slot = None  # index into entries of the planted referent

    if m:
        w, h = _sample_size(rng)  # one shared size: members are truly identical
        for _ in range(m):
            box = _place_box(rng, w, h, placed, spec)
            placed.append(box)
            entries.append((dup_pair[0], dup_pair[1], box, "dup"))
        planted_slot = int(rng.integers(m))  # uniform choice BEFORE the anchor
        for cat, col in distractor_pairs[:-1]:
            w, h = _sample_size(rng)
            box = _place_box(rng, w, h, placed, spec)
            placed.append(box)
            entries.append((cat, col, box, "filler"))
        cat, col = distractor_pairs[-1]
        w, h = _sample_size(rng)
        dup_boxes = [e[2] for e in entries if e[3] == "dup"]
        box = _place_anchor(rng, w, h, placed, spec, dup_boxes[planted_slot],
                            [b for i, b in enumerate(dup_boxes)
                             if i != planted_slot])
        placed.append(box)
        entries.append((cat, col, box, "anchor"))
    else:
        for cat, col in distractor_pairs:
            w, h = _sample_size(rng)
            box = _place_box(rng, w, h, placed, spec)
            placed.append(box)
            entries.append((cat, col, box, "filler"))

    # shuffle region order so the referent's index carries no information
    order = rng.permutation(len(entries))
    regions, dup_ids = [], []
    referent_id = anchor_id = None
    for new_id, slot in enumerate(int(i) for i in order):
        cat, col, box, role = entries[slot]
        appearance = appearance_vector(cat, col, spec.appearance_dim,
                                       spec.noise, rng)
        regions.append(Region(new_id, cat, box, appearance, {"color": col}))
        if role == "dup":
            dup_ids.append(new_id)
            if slot == planted_slot:
                referent_id = new_id
        elif role == "anchor":
            anchor_id = new_id

    scene = Scene(spec.width, spec.height, regions)
    return PlantedScene(scene, tuple(sorted(dup_ids)), referent_id, anchor_id)


def generate_scene(spec: SceneSpec, rng: np.random.Generator) -> PlantedScene:
    """Place boxes under the pairwise-IoU cap; resample on placement failure."""
    for attempt in range(_SCENE_ATTEMPTS):
        try:
            return _plan_scene(spec, rng)
        except _PlacementFailure as exc:
            logger.debug("scene placement retry %d: %s", attempt + 1, exc)
    raise GenerationError(
        f"could not place a scene after {_SCENE_ATTEMPTS} attempts")


# -- expression generation -------------------------------------------------------


def _all_identical(regions: Sequence[Region]) -> bool:
    pairs = {(r.category, r.attributes.get("color")) for r in regions}
    return len(pairs) == 1


def _intra_margins_ok(members: list[Region], relation: str, spec_w: float,
                      spec_h: float) -> bool:
    xs = sorted(_center(r)[0] for r in members)
    ys = sorted(_center(r)[1] for r in members)
    areas = sorted((r.box.area for r in members), reverse=True)
    mx, my = _MARGIN_FRACTION * spec_w, _MARGIN_FRACTION * spec_h
    if relation == "leftmost":
        return xs[1] - xs[0] >= mx
    if relation == "rightmost":
        return xs[-1] - xs[-2] >= mx
    if relation == "largest":
        return areas[0] >= _AREA_RATIO_MARGIN * areas[1]
    if relation == "above-peer":
        return ys[1] - ys[0] >= my
    if relation == "below-peer":
        return ys[-1] - ys[-2] >= my
    if relation == "second-from-left":
        return (len(members) >= 3 and xs[1] - xs[0] >= mx
                and xs[2] - xs[1] >= mx)
    raise ValueError(relation)


def _enumerate_relational(scene: Scene) -> list[tuple[ExpressionAST, int]]:
    """All certified relational ASTs whose candidates are distinguishable.

    Identical-duplicate candidate sets are deliberately excluded — those are
    served only by the planted nearest-to construction.
    """
    options: list[tuple[ExpressionAST, int]] = []
    by_category: dict[str, list[Region]] = {}
    for r in scene.regions:
        by_category.setdefault(r.category, []).append(r)

    describable = [r for r in scene.regions
                   if unique_descriptor(scene, r) is not None]

    for category, members in sorted(by_category.items()):
        if len(members) < 2 or _all_identical(members):
            continue
        subject = SubjectPredicate(category)
        for relation in INTRA_RELATIONS:
            if not _intra_margins_ok(members, relation, scene.width,
                                     scene.height):
                continue
            ast = ExpressionAST(subject, intra=IntraRelation(relation))
            result = resolve_oracle(scene, ast)
            if len(result) == 1:
                options.append((ast, next(iter(result))))
        for anchor in describable:
            remaining = [r for r in members if r is not anchor]
            if len(remaining) >= 2 and _all_identical(remaining):
                continue  # would reduce to an indistinguishable set
            if not remaining:
                continue
            desc = unique_descriptor(scene, anchor)
            for relation in INTER_RELATIONS:
                ast = ExpressionAST(subject,
                                    inter=InterRelation(relation, desc))
                result = resolve_oracle(scene, ast)
                if len(result) == 1:
                    options.append((ast, next(iter(result))))
    return options


def _planted_sample(planted: PlantedScene,
                    verbose_anchor: bool = False) -> LabeledSample:
    scene = planted.scene
    referent = _region_by_id(scene, planted.referent_id)
    anchor = _region_by_id(scene, planted.anchor_id)
    subject = SubjectPredicate(referent.category,
                               referent.attributes.get("color"))
    desc = unique_descriptor(scene, anchor)
    if verbose_anchor and desc.color is None:
        # (category, color) is unique per non-duplicate region, so the longer
        # descriptor is equally valid and gives a second wording of the sample
        desc = SubjectPredicate(anchor.category, anchor.attributes.get("color"))
    ast = ExpressionAST(subject, inter=InterRelation("nearest-to", desc))
    return LabeledSample(render_tokens(ast), ast, planted.referent_id,
                         "relational")


def _attribute_sample(scene: Scene, rng: np.random.Generator) -> LabeledSample:
    targets = [r for r in scene.regions
               if unique_descriptor(scene, r) is not None]
    if not targets:
        raise GenerationError("no uniquely describable region in scene")
    r = targets[rng.integers(len(targets))]
    ast = ExpressionAST(unique_descriptor(scene, r))
    return LabeledSample(render_tokens(ast), ast, r.region_id,
                         "attribute-only")


def generate_expression(planted: PlantedScene, rng: np.random.Generator,
                        policy: ExpressionPolicy,
                        taken: Optional[set[tuple[str, ...]]] = None
                        ) -> LabeledSample:
    """Draw one certified sample; avoids token sequences in ``taken``."""
    scene = planted.scene
    taken = taken or set()
    relational_draw = rng.random() < policy.relational_fraction
    retries = max(1, policy.max_retries)
    sample = None
    for attempt in range(retries):
        sample = None
        # A scene may admit only one relational wording; once relational
        # retries stall on taken wordings, fall back to attribute-only.
        if relational_draw and attempt < max(1, retries // 2):
            if (planted.referent_id is not None
                    and rng.random() < policy.planted_fraction):
                sample = _planted_sample(planted)
                if sample.tokens in taken:
                    sample = _planted_sample(planted, verbose_anchor=True)
            else:
                options = _enumerate_relational(scene)
                if options:
                    ast, referent = options[rng.integers(len(options))]
                    sample = LabeledSample(render_tokens(ast), ast, referent,
                                           "relational")
                elif planted.referent_id is not None:
                    sample = _planted_sample(planted)
        if sample is None:
            sample = _attribute_sample(scene, rng)
        if sample.tokens not in taken:
            return sample
    return sample  # duplicate wording is preferable to failing the scene


def generate_dataset(spec: SceneSpec, policy: ExpressionPolicy,
                     n_scenes: int) -> list[SceneRecord]:
    """Deterministic dataset: scene i uses an independent substream of the seed."""
    records = []
    for i in range(n_scenes):
        rng = np.random.default_rng(
            np.random.SeedSequence(entropy=spec.seed, spawn_key=(i,)))
        record = None
        for attempt in range(_SCENE_ATTEMPTS):
            planted = generate_scene(spec, rng)
            try:
                taken: set[tuple[str, ...]] = set()
                samples = []
                for _ in range(policy.expressions_per_scene):
                    s = generate_expression(planted, rng, policy, taken)
                    taken.add(s.tokens)
                    samples.append(s)
                record = SceneRecord(i, planted.scene, samples)
                break
            except GenerationError as exc:
                logger.debug("scene %d retry %d: %s", i, attempt + 1, exc)
        if record is None:
            raise GenerationError(
                f"scene {i}: expression generation exhausted retries")
        records.append(record)
    return records
