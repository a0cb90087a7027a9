"""Object-graph construction: node features, k-NN neighborhoods, edge geometry.

Everything here is plain numpy on constants — graphs carry no gradients.  A
graph is directed: each node gets up to ``k`` nearest same-category neighbors
(intra edges) and up to ``k`` nearest different-category neighbors (inter
edges), ranked by Euclidean distance between box centers with ties broken by
the lower region id.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "BoundingBox",
    "Region",
    "Scene",
    "ObjectGraph",
    "spatial_feature",
    "edge_feature",
    "build_graph",
    "iou",
]


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned box: top-left corner plus positive width/height, in pixels."""

    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise ValueError(f"box must have positive size, got w={self.w}, h={self.h}")

    @property
    def x2(self) -> float:
        return self.x + self.w

    @property
    def y2(self) -> float:
        return self.y + self.h

    @property
    def center(self) -> tuple[float, float]:
        return (self.x + self.w / 2.0, self.y + self.h / 2.0)

    @property
    def area(self) -> float:
        return self.w * self.h

    def as_list(self) -> list[float]:
        return [self.x, self.y, self.w, self.h]


@dataclass
class Region:
    """One candidate object: identity, box, appearance vector, named attributes."""

    region_id: int
    category: str
    box: BoundingBox
    appearance: np.ndarray
    attributes: dict[str, str] = field(default_factory=dict)


@dataclass
class Scene:
    """An image-sized canvas with its candidate regions."""

    width: float
    height: float
    regions: list[Region]

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ValueError("scene dimensions must be positive")
        ids = [r.region_id for r in self.regions]
        if len(set(ids)) != len(ids):
            raise ValueError("region ids must be unique within a scene")

    def region_index(self, region_id: int) -> int:
        for i, r in enumerate(self.regions):
            if r.region_id == region_id:
                return i
        raise KeyError(f"no region with id {region_id}")


def spatial_feature(box: BoundingBox, width: float, height: float) -> np.ndarray:
    """Normalized absolute geometry: corners over image size plus area fraction."""
    if width <= 0 or height <= 0:
        raise ValueError("image dimensions must be positive")
    return np.array([
        box.x / width,
        box.y / height,
        box.x2 / width,
        box.y2 / height,
        box.area / (width * height),
    ], dtype=np.float64)


def edge_feature(box_i: BoundingBox, box_j: BoundingBox) -> np.ndarray:
    """Geometry of box j relative to box i's center, in units of box i's size."""
    cx, cy = box_i.center
    return np.array([
        (box_j.x - cx) / box_i.w,
        (box_j.y - cy) / box_i.h,
        (box_j.x2 - cx) / box_i.w,
        (box_j.y2 - cy) / box_i.h,
        box_j.area / box_i.area,
    ], dtype=np.float64)


def iou(box_a: BoundingBox, box_b: BoundingBox) -> float:
    """Intersection area over union area; 0 when the boxes do not overlap."""
    ix = min(box_a.x2, box_b.x2) - max(box_a.x, box_b.x)
    iy = min(box_a.y2, box_b.y2) - max(box_a.y, box_b.y)
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    return inter / (box_a.area + box_b.area - inter)


@dataclass
class ObjectGraph:
    """Directed relation graph over one scene's regions.

    Edge lists are ordered by source node, then by neighbor rank, which is the
    grouping the per-source attention softmax relies on.  ``node_features``
    rows are the raw ``[appearance, spatial]`` concatenation.
    """

    scene: Scene
    k: int
    node_spatial: np.ndarray          # (N, 5)
    node_appearance: np.ndarray       # (N, D_app)
    node_features: np.ndarray         # (N, D_app + 5)
    intra_neighbors: list[list[int]]  # per node, ordered nearest-first
    inter_neighbors: list[list[int]]
    intra_edges: list[tuple[int, int]]
    inter_edges: list[tuple[int, int]]
    intra_edge_features: np.ndarray   # (E_intra, 5)
    inter_edge_features: np.ndarray   # (E_inter, 5)

    @property
    def num_nodes(self) -> int:
        return len(self.scene.regions)

    def edge_source_matrix(self, kind: str) -> np.ndarray:
        """0/1 matrix S of shape (N, E) with S[i, e] = 1 iff edge e leaves node i.

        ``S @ rows`` sums edge rows into their source node (zero row for nodes
        with no edges), and ``S.T @ (S @ v)`` broadcasts per-source totals back
        onto edges — the two pieces needed for per-source softmax/aggregation.
        """
        edges = self.intra_edges if kind == "intra" else self.inter_edges
        s = np.zeros((self.num_nodes, len(edges)), dtype=np.float64)
        for e, (i, _) in enumerate(edges):
            s[i, e] = 1.0
        return s


def build_graph(scene: Scene, k: int = 5) -> ObjectGraph:
    """Assemble the directed intra/inter k-NN graph for one scene."""
    if k < 1:
        raise ValueError("k must be at least 1")
    regions = scene.regions
    n = len(regions)
    if n < 1:
        raise ValueError("a scene needs at least one region")

    spatial = np.stack([spatial_feature(r.box, scene.width, scene.height)
                        for r in regions])
    appearance = np.stack([np.asarray(r.appearance, dtype=np.float64)
                           for r in regions])
    if appearance.ndim != 2:
        raise ValueError("all regions must share one appearance dimensionality")
    node_features = np.concatenate([appearance, spatial], axis=1)

    centers = np.array([r.box.center for r in regions])
    intra_nbrs: list[list[int]] = []
    inter_nbrs: list[list[int]] = []
    for i in range(n):
        ranked = sorted(
            (j for j in range(n) if j != i),
            key=lambda j: (float(np.hypot(*(centers[j] - centers[i]))),
                           regions[j].region_id),
        )
        same = [j for j in ranked if regions[j].category == regions[i].category]
        diff = [j for j in ranked if regions[j].category != regions[i].category]
        intra_nbrs.append(same[:k])
        inter_nbrs.append(diff[:k])

    def edge_list(nbrs: list[list[int]]):
        edges = [(i, j) for i in range(n) for j in nbrs[i]]
        if edges:
            feats = np.stack([edge_feature(regions[i].box, regions[j].box)
                              for i, j in edges])
        else:
            feats = np.zeros((0, 5), dtype=np.float64)
        return edges, feats

    intra_edges, intra_feats = edge_list(intra_nbrs)
    inter_edges, inter_feats = edge_list(inter_nbrs)

    return ObjectGraph(
        scene=scene,
        k=k,
        node_spatial=spatial,
        node_appearance=appearance,
        node_features=node_features,
        intra_neighbors=intra_nbrs,
        inter_neighbors=inter_nbrs,
        intra_edges=intra_edges,
        inter_edges=inter_edges,
        intra_edge_features=intra_feats,
        inter_edge_features=inter_feats,
    )
