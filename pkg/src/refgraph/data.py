"""Line-delimited JSON dataset files with strict, line-numbered validation.

Each line is one scene:

    {"format_version": 1, "scene_id": 0, "image": [W, H],
     "regions": [{"id": 0, "category": "dog", "box": [x, y, w, h],
                  "attrs": {"color": "red"}, "feature": [...]}, ...],
     "expressions": [{"tokens": ["the", "red", "dog"], "referent_id": 0,
                      "ast": {...}, "tag": "attribute-only"}, ...]}

``feature`` (the appearance vector) may be stored inline or in a sidecar file
keyed by ``"<scene_id>/<region_id>"``; ``ast`` is optional.  Serialization is
byte-deterministic: floats print in shortest exact round-trip form and key
order is fixed, so ``save(load(save(x)))`` reproduces the same bytes.
"""

from __future__ import annotations

import json
from typing import Optional

import numpy as np

from .language import Vocabulary
from .scenegraph import BoundingBox, Region, Scene
from .synthworld import TAGS, ExpressionAST, LabeledSample, SceneRecord

__all__ = [
    "FORMAT_VERSION",
    "DataFormatError",
    "DatasetVersionError",
    "scene_to_dict",
    "scene_from_dict",
    "dumps_dataset",
    "loads_dataset",
    "save_dataset",
    "load_dataset",
    "save_features",
    "load_features",
    "dataset_vocabulary",
]

FORMAT_VERSION = 1


class DataFormatError(ValueError):
    """A dataset file violates the schema; the message names the line."""


class DatasetVersionError(DataFormatError):
    """The file declares a format version this code does not read."""


def _fail(line_no: Optional[int], msg: str) -> None:
    where = f"line {line_no}: " if line_no is not None else ""
    raise DataFormatError(where + msg)


def _expect(cond: bool, line_no: Optional[int], msg: str) -> None:
    if not cond:
        _fail(line_no, msg)


# -- serialization -------------------------------------------------------------


def scene_to_dict(record: SceneRecord, inline_features: bool = True) -> dict:
    scene = record.scene
    regions = []
    for r in scene.regions:
        entry = {
            "id": r.region_id,
            "category": r.category,
            "box": [float(v) for v in r.box.as_list()],
            "attrs": dict(sorted(r.attributes.items())),
        }
        if inline_features:
            entry["feature"] = [float(v) for v in np.asarray(r.appearance)]
        regions.append(entry)
    expressions = []
    for s in record.samples:
        expressions.append({
            "tokens": list(s.tokens),
            "referent_id": s.referent_id,
            "ast": s.ast.to_dict() if s.ast is not None else None,
            "tag": s.tag,
        })
    return {
        "format_version": FORMAT_VERSION,
        "scene_id": record.scene_id,
        "image": [float(scene.width), float(scene.height)],
        "regions": regions,
        "expressions": expressions,
    }


def _parse_region(entry: dict, line_no: int, scene_id: int,
                  features: Optional[dict]) -> Region:
    _expect(isinstance(entry, dict), line_no, "region must be an object")
    for key in ("id", "category", "box"):
        _expect(key in entry, line_no, f"region missing {key!r}")
    rid = entry["id"]
    _expect(isinstance(rid, int) and not isinstance(rid, bool), line_no,
            "region id must be an integer")
    _expect(isinstance(entry["category"], str) and entry["category"], line_no,
            "region category must be a nonempty string")
    box = entry["box"]
    _expect(isinstance(box, list) and len(box) == 4
            and all(isinstance(v, (int, float)) and not isinstance(v, bool)
                    for v in box),
            line_no, f"region {rid}: box must be [x, y, w, h] numbers")
    attrs = entry.get("attrs", {})
    _expect(isinstance(attrs, dict)
            and all(isinstance(k, str) and isinstance(v, str)
                    for k, v in attrs.items()),
            line_no, f"region {rid}: attrs must map strings to strings")
    feature = entry.get("feature")
    if feature is None and features is not None:
        feature = features.get(f"{scene_id}/{rid}")
    _expect(feature is not None, line_no,
            f"region {rid}: no appearance feature inline or in sidecar")
    _expect(isinstance(feature, list) and len(feature) > 0
            and all(isinstance(v, (int, float)) and not isinstance(v, bool)
                    for v in feature),
            line_no, f"region {rid}: feature must be a nonempty number list")
    try:
        bbox = BoundingBox(*(float(v) for v in box))
    except ValueError as exc:
        _fail(line_no, f"region {rid}: {exc}")
    return Region(rid, entry["category"], bbox,
                  np.asarray(feature, dtype=np.float64), dict(attrs))


def _parse_expression(entry: dict, line_no: int,
                      region_ids: set[int]) -> LabeledSample:
    _expect(isinstance(entry, dict), line_no, "expression must be an object")
    for key in ("tokens", "referent_id", "tag"):
        _expect(key in entry, line_no, f"expression missing {key!r}")
    tokens = entry["tokens"]
    _expect(isinstance(tokens, list) and tokens
            and all(isinstance(t, str) and t for t in tokens),
            line_no, "tokens must be a nonempty list of nonempty strings")
    referent = entry["referent_id"]
    _expect(isinstance(referent, int) and not isinstance(referent, bool),
            line_no, "referent_id must be an integer")
    _expect(referent in region_ids, line_no,
            f"referent_id {referent} names no region in this scene")
    tag = entry["tag"]
    _expect(tag in TAGS, line_no,
            f"tag must be one of {TAGS}, got {tag!r}")
    ast = None
    if entry.get("ast") is not None:
        try:
            ast = ExpressionAST.from_dict(entry["ast"])
        except (KeyError, TypeError, ValueError) as exc:
            _fail(line_no, f"bad expression ast: {exc}")
    return LabeledSample(tuple(tokens), ast, referent, tag)


def scene_from_dict(d: dict, line_no: int,
                    features: Optional[dict] = None) -> SceneRecord:
    _expect(isinstance(d, dict), line_no, "scene line must be a JSON object")
    version = d.get("format_version")
    if version != FORMAT_VERSION:
        raise DatasetVersionError(
            f"line {line_no}: dataset format version {version!r} is not "
            f"supported (this reader understands {FORMAT_VERSION})")
    image = d.get("image")
    _expect(isinstance(image, list) and len(image) == 2
            and all(isinstance(v, (int, float)) and not isinstance(v, bool)
                    and v > 0 for v in image),
            line_no, "image must be [width, height] with positive numbers")
    scene_id = d.get("scene_id", line_no - 1)
    _expect(isinstance(scene_id, int) and not isinstance(scene_id, bool),
            line_no, "scene_id must be an integer")
    regions_raw = d.get("regions")
    _expect(isinstance(regions_raw, list) and regions_raw, line_no,
            "regions must be a nonempty list")
    regions = [_parse_region(e, line_no, scene_id, features)
               for e in regions_raw]
    ids = [r.region_id for r in regions]
    dup = {i for i in ids if ids.count(i) > 1}
    _expect(not dup, line_no, f"duplicate region ids {sorted(dup)}")
    dims = {r.appearance.shape[0] for r in regions}
    _expect(len(dims) == 1, line_no,
            f"inconsistent feature dimensions {sorted(dims)}")
    expressions_raw = d.get("expressions", [])
    _expect(isinstance(expressions_raw, list), line_no,
            "expressions must be a list")
    samples = [_parse_expression(e, line_no, set(ids))
               for e in expressions_raw]
    scene = Scene(float(image[0]), float(image[1]), regions)
    return SceneRecord(scene_id, scene, samples)


def dumps_dataset(records: list[SceneRecord],
                  inline_features: bool = True) -> str:
    lines = [json.dumps(scene_to_dict(r, inline_features=inline_features),
                        separators=(",", ":"))
             for r in records]
    return "".join(line + "\n" for line in lines)


def loads_dataset(text: str,
                  features: Optional[dict] = None) -> list[SceneRecord]:
    records = []
    for i, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            d = json.loads(line)
        except json.JSONDecodeError as exc:
            _fail(i, f"invalid JSON: {exc}")
        records.append(scene_from_dict(d, i, features))
    return records


def save_dataset(records: list[SceneRecord], path,
                 inline_features: bool = True) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(dumps_dataset(records, inline_features=inline_features))


def load_dataset(path, features_path=None) -> list[SceneRecord]:
    features = load_features(features_path) if features_path else None
    with open(path, "r", encoding="utf-8") as f:
        return loads_dataset(f.read(), features)


# -- sidecar appearance features -----------------------------------------------


def save_features(records: list[SceneRecord], path) -> None:
    """Write appearance vectors keyed by ``"<scene_id>/<region_id>"``."""
    table = {
        f"{rec.scene_id}/{r.region_id}": [float(v) for v in r.appearance]
        for rec in records for r in rec.scene.regions
    }
    payload = {"format_version": FORMAT_VERSION, "features": table}
    with open(path, "w", encoding="utf-8") as f:
        f.write(json.dumps(payload, separators=(",", ":")) + "\n")


def load_features(path) -> dict:
    with open(path, "r", encoding="utf-8") as f:
        payload = json.load(f)
    if not isinstance(payload, dict) or "features" not in payload:
        raise DataFormatError("feature sidecar must contain a 'features' map")
    version = payload.get("format_version")
    if version != FORMAT_VERSION:
        raise DatasetVersionError(
            f"feature sidecar format version {version!r} is not supported")
    return payload["features"]


# -- derived --------------------------------------------------------------------


def dataset_vocabulary(records: list[SceneRecord]) -> Vocabulary:
    return Vocabulary.from_token_lists(
        [list(s.tokens) for r in records for s in r.samples])
