"""Domain graphs: road networks, the area hierarchy, and typed area graphs.

The pooling operations here move representations between hierarchy levels;
they run on autodiff tensors so gradients flow through the coarsening.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor, gather_rows, hstack, mul, segment_max, segment_sum, vstack

logger = logging.getLogger(__name__)

ROAD_CLASSES = ("motorway", "primary", "secondary", "residential", "other")
_CLASS_INDEX = {name: i for i, name in enumerate(ROAD_CLASSES)}

NODE_FEATURE_DIM = 3  # rel_lon, rel_lat, degree
EDGE_FEATURE_DIM = 3 + len(ROAD_CLASSES)  # rel_lon, rel_lat, length + one-hot class


class GraphValidationError(ValueError):
    """Raised with every offending record listed, one per line."""


def road_class_index(name: str) -> int:
    return _CLASS_INDEX.get(name, _CLASS_INDEX["other"])


@dataclass
class RoadGraph:
    """One region's road network: intersections plus segments as directed arc pairs."""

    region_id: str
    node_ids: list[str]
    node_xy: np.ndarray  # Nx2 relative coordinates in [0,1]
    node_feats: np.ndarray  # Nx3 raw (rel_lon, rel_lat, degree)
    arc_src: np.ndarray  # 2M, two directed arcs per undirected segment
    arc_dst: np.ndarray
    arc_feats: np.ndarray  # 2Mx8 raw (rel_lon, rel_lat, length_km, class one-hot)
    arc_length_km: np.ndarray
    arc_class: np.ndarray  # small-int category per arc
    n_segments: int

    @property
    def n_nodes(self) -> int:
        return len(self.node_ids)

    @property
    def degrees(self) -> np.ndarray:
        return self.node_feats[:, 2].astype(np.int64)


def build_road_graph(region_id: str, nodes, segments) -> RoadGraph:
    """Validate raw intersection/segment records and realize the arc arrays.

    ``nodes``: iterable of (node_id, rel_lon, rel_lat).
    ``segments``: iterable of (u, v, rel_lon, rel_lat, length_km, road_class).
    """
    nodes = list(nodes)
    segments = list(segments)
    problems = []
    seen = set()
    for node_id, lon, lat in nodes:
        if node_id in seen:
            problems.append(f"duplicate node id {node_id}")
        seen.add(node_id)
        if not (0.0 <= lon <= 1.0 and 0.0 <= lat <= 1.0):
            problems.append(f"node {node_id}: relative coordinates outside [0,1]")
    node_ids = sorted(seen)
    index = {nid: i for i, nid in enumerate(node_ids)}
    for u, v, _lon, _lat, length, _cls in segments:
        if u not in index:
            problems.append(f"segment endpoint references missing node {u}")
        if v not in index:
            problems.append(f"segment endpoint references missing node {v}")
        if u == v:
            problems.append(f"self-loop segment at node {u}")
        if length <= 0:
            problems.append(f"segment {u}-{v}: non-positive length {length}")
    if problems:
        raise GraphValidationError(
            f"region {region_id}: invalid road graph:\n" + "\n".join(problems)
        )

    n = len(node_ids)
    m = len(segments)
    arc_src = np.empty(2 * m, dtype=np.int64)
    arc_dst = np.empty(2 * m, dtype=np.int64)
    arc_feats = np.zeros((2 * m, EDGE_FEATURE_DIM))
    arc_length = np.empty(2 * m)
    arc_class = np.empty(2 * m, dtype=np.int64)
    for k, (u, v, lon, lat, length, cls) in enumerate(segments):
        ui, vi = index[u], index[v]
        ci = road_class_index(cls)
        for slot, (s, d) in enumerate(((ui, vi), (vi, ui))):
            a = 2 * k + slot
            arc_src[a] = s
            arc_dst[a] = d
            arc_feats[a, 0] = lon
            arc_feats[a, 1] = lat
            arc_feats[a, 2] = length
            arc_feats[a, 3 + ci] = 1.0
            arc_length[a] = length
            arc_class[a] = ci

    node_xy = np.zeros((n, 2))
    node_feats = np.zeros((n, NODE_FEATURE_DIM))
    for node_id, lon, lat in nodes:
        i = index[node_id]
        node_xy[i] = (lon, lat)
        node_feats[i, 0] = lon
        node_feats[i, 1] = lat
    degrees = np.bincount(arc_dst, minlength=n) if m else np.zeros(n, dtype=np.int64)
    node_feats[:, 2] = degrees

    return RoadGraph(
        region_id=region_id,
        node_ids=node_ids,
        node_xy=node_xy,
        node_feats=node_feats,
        arc_src=arc_src,
        arc_dst=arc_dst,
        arc_feats=arc_feats,
        arc_length_km=arc_length,
        arc_class=arc_class,
        n_segments=m,
    )


@dataclass
class Hierarchy:
    """Intersection -> community -> region affiliation maps."""

    node_to_community: dict[str, str]
    community_to_region: dict[str, str]

    def __post_init__(self):
        self.regions = tuple(sorted(set(self.community_to_region.values())))
        by_region: dict[str, list[str]] = {r: [] for r in self.regions}
        for community, region in self.community_to_region.items():
            by_region[region].append(community)
        self._communities = {r: sorted(cs) for r, cs in by_region.items()}

    def communities_of(self, region_id: str) -> list[str]:
        return self._communities[region_id]

    def validate(self, node_ids_by_region: dict[str, list[str]]) -> list[str]:
        """Totality and partition checks; returns a list of problems."""
        problems = []
        members = {c: 0 for c in self.community_to_region}
        for region_id, node_ids in node_ids_by_region.items():
            for nid in node_ids:
                community = self.node_to_community.get(nid)
                if community is None:
                    problems.append(f"node {nid} has no community affiliation")
                    continue
                members[community] = members.get(community, 0) + 1
                region = self.community_to_region.get(community)
                if region is None:
                    problems.append(f"community {community} has no region affiliation")
                elif region != region_id:
                    problems.append(
                        f"node {nid} sits in region {region_id} but its community "
                        f"{community} belongs to {region}"
                    )
        for community, count in members.items():
            if count == 0:
                problems.append(f"community {community} has no member intersections")
        return problems


@dataclass
class ODFlow:
    origin: str
    dest: str
    level: str  # "community" | "region"
    flow: float


@dataclass
class HeteroGraph:
    """One hierarchy level's nodes plus the two typed arc sets.

    Spatial arcs are symmetric (both directions present with a shared
    feature); OD arcs are directed and carry the raw flow scalar.
    """

    level: str
    node_ids: list[str]
    node_feats: Tensor
    spatial_src: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    spatial_dst: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    spatial_feats: Tensor | None = None
    od_src: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    od_dst: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    od_feats: Tensor | None = None

    @property
    def n_nodes(self) -> int:
        return len(self.node_ids)


# ---------------------------------------------------------------------------
# pooling between levels


def _reduce(phi: str, rows: Tensor, seg: np.ndarray, n_groups: int) -> Tensor:
    if phi == "sum":
        return segment_sum(rows, seg, n_groups)
    if phi == "mean":
        sums = segment_sum(rows, seg, n_groups)
        counts = np.bincount(seg, minlength=n_groups).astype(np.float64)
        inv = np.divide(1.0, counts, out=np.zeros(n_groups), where=counts > 0)
        return mul(sums, Tensor(inv.reshape(-1, 1)))
    if phi == "max":
        return segment_max(rows, seg, n_groups)
    raise ValueError(f"unknown pooling function {phi!r} (expected mean, sum or max)")


def pool_nodes(phi: str, reps: Tensor, groups, n_groups: int) -> Tensor:
    """Group-wise reduction of node rows; empty groups give zero rows."""
    seg = np.asarray(groups, dtype=np.int64)
    counts = np.bincount(seg, minlength=n_groups)
    if (counts == 0).any():
        empties = np.flatnonzero(counts == 0).tolist()
        logger.warning("pool_nodes: empty groups %s pooled to zero rows", empties)
    return _reduce(phi, reps, seg, n_groups)


def pool_internal_edges(
    phi: str,
    edge_reps: Tensor,
    arc_src,
    arc_dst,
    groups,
    n_groups: int,
) -> Tensor:
    """Reduce arcs whose both endpoints share a group; no internal arcs -> zero row."""
    groups = np.asarray(groups, dtype=np.int64)
    src = np.asarray(arc_src, dtype=np.int64)
    dst = np.asarray(arc_dst, dtype=np.int64)
    internal = np.flatnonzero(groups[src] == groups[dst])
    if internal.size == 0:
        if phi not in ("mean", "sum", "max"):
            raise ValueError(f"unknown pooling function {phi!r} (expected mean, sum or max)")
        return Tensor(np.zeros((n_groups, edge_reps.shape[1])))
    rows = gather_rows(edge_reps, internal)
    return _reduce(phi, rows, groups[src[internal]], n_groups)


def pool_cross_edges(
    phi: str,
    edge_reps: Tensor,
    arc_src,
    arc_dst,
    groups,
    pair: tuple[int, int],
) -> Tensor:
    """Reduce arcs crossing between the two groups (both directions) to one row."""
    groups = np.asarray(groups, dtype=np.int64)
    src = np.asarray(arc_src, dtype=np.int64)
    dst = np.asarray(arc_dst, dtype=np.int64)
    a, b = pair
    gs, gd = groups[src], groups[dst]
    crossing = np.flatnonzero(((gs == a) & (gd == b)) | ((gs == b) & (gd == a)))
    if crossing.size == 0:
        raise ValueError(f"pool_cross_edges: no arc crosses group pair ({a}, {b})")
    rows = gather_rows(edge_reps, crossing)
    return _reduce(phi, rows, np.zeros(crossing.size, dtype=np.int64), 1)


def crossing_pairs(arc_src, arc_dst, groups) -> list[tuple[int, int]]:
    """Sorted distinct group pairs (a < b) joined by at least one arc."""
    groups = np.asarray(groups, dtype=np.int64)
    gs = groups[np.asarray(arc_src, dtype=np.int64)]
    gd = groups[np.asarray(arc_dst, dtype=np.int64)]
    mask = gs != gd
    lo = np.minimum(gs[mask], gd[mask])
    hi = np.maximum(gs[mask], gd[mask])
    pairs = sorted(set(zip(lo.tolist(), hi.tolist())))
    return pairs


# ---------------------------------------------------------------------------
# typed area graph construction


def build_hetero_graph(
    level: str,
    node_ids: list[str],
    node_feats: Tensor,
    *,
    od_flows=(),
    min_flow: float = 0.0,
    groups=None,
    arc_src=None,
    arc_dst=None,
    edge_reps: Tensor | None = None,
    adjacency=(),
    adjacency_feat_dim: int = 1,
    phi: str = "mean",
) -> HeteroGraph:
    """Assemble one level's heterogeneous graph.

    Community level: pass ``groups``/``arc_src``/``arc_dst``/``edge_reps`` from
    the underlying road graph; a spatial link is created per area pair joined
    by at least one crossing segment, with the pooled crossing-arc feature.

    Region level: pass ``adjacency`` records (pairs of area ids); spatial link
    features default to zero vectors of ``adjacency_feat_dim``.

    OD links are directed, one per record with flow above ``min_flow``.
    """
    index = {nid: i for i, nid in enumerate(node_ids)}
    n = len(node_ids)
    if node_feats.shape[0] != n:
        raise ValueError(
            f"node feature rows ({node_feats.shape[0]}) do not match area count ({n})"
        )

    if edge_reps is not None:
        pairs = crossing_pairs(arc_src, arc_dst, groups)
        if pairs:
            pooled = [
                pool_cross_edges(phi, edge_reps, arc_src, arc_dst, groups, p)
                for p in pairs
            ]
            pair_feats = vstack(pooled) if len(pooled) > 1 else pooled[0]
            spatial_src = np.array([x for a, b in pairs for x in (a, b)], dtype=np.int64)
            spatial_dst = np.array([x for a, b in pairs for x in (b, a)], dtype=np.int64)
            spatial_feats = gather_rows(pair_feats, np.repeat(np.arange(len(pairs)), 2))
        else:
            spatial_src = np.zeros(0, dtype=np.int64)
            spatial_dst = np.zeros(0, dtype=np.int64)
            spatial_feats = Tensor(np.zeros((0, edge_reps.shape[1])))
    else:
        seen_pairs = set()
        arcs = []
        for a_id, b_id in adjacency:
            if a_id not in index or b_id not in index:
                missing = a_id if a_id not in index else b_id
                raise ValueError(f"adjacency record references unknown area {missing}")
            a, b = index[a_id], index[b_id]
            key = (min(a, b), max(a, b))
            if a == b or key in seen_pairs:
                continue
            seen_pairs.add(key)
            arcs.append(key)
        arcs.sort()
        spatial_src = np.array([x for a, b in arcs for x in (a, b)], dtype=np.int64)
        spatial_dst = np.array([x for a, b in arcs for x in (b, a)], dtype=np.int64)
        spatial_feats = Tensor(np.zeros((len(arcs) * 2, adjacency_feat_dim)))

    od_src_list, od_dst_list, flows = [], [], []
    seen_od = set()
    for record in od_flows:
        origin, dest, flow = record.origin, record.dest, record.flow
        if origin not in index:
            raise ValueError(f"OD record references unknown area {origin}")
        if dest not in index:
            raise ValueError(f"OD record references unknown area {dest}")
        if origin == dest:
            raise ValueError(f"OD record with identical origin and destination {origin}")
        if (origin, dest) in seen_od:
            raise ValueError(f"duplicate OD record {origin} -> {dest}")
        seen_od.add((origin, dest))
        if flow <= min_flow:
            continue
        od_src_list.append(index[origin])
        od_dst_list.append(index[dest])
        flows.append(flow)

    return HeteroGraph(
        level=level,
        node_ids=list(node_ids),
        node_feats=node_feats,
        spatial_src=spatial_src,
        spatial_dst=spatial_dst,
        spatial_feats=spatial_feats,
        od_src=np.array(od_src_list, dtype=np.int64),
        od_dst=np.array(od_dst_list, dtype=np.int64),
        od_feats=Tensor(np.array(flows).reshape(-1, 1)),
    )


def community_node_features(
    phi: str,
    node_reps: Tensor,
    edge_reps: Tensor,
    arc_src,
    arc_dst,
    groups,
    n_groups: int,
) -> Tensor:
    """Initial community features: pooled member nodes beside pooled internal arcs."""
    pooled_nodes = pool_nodes(phi, node_reps, groups, n_groups)
    pooled_edges = pool_internal_edges(phi, edge_reps, arc_src, arc_dst, groups, n_groups)
    return hstack([pooled_nodes, pooled_edges])
