"""Continuous-time bipartite user-item graph.

Node-wise events create nodes or refresh their attributes; edge-wise events
add timestamped labeled edges (unlabeled or positive, never negative) and
upgrade an unlabeled edge in place when its conversion arrives. Each node
keeps at most ``m`` recent edges; evicting an edge removes it from both
endpoints. Neighbor sampling is breadth-first over edges no newer than the
query time, so a sample can never leak future interactions.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

from .errors import ConfigError, DataError, StructuralError
from .pipeline import Label

USER = "u"
ITEM = "i"

NodeKey = tuple[str, int]
# node attribute payload: (dense features, categorical ids)
Attribute = tuple[tuple[float, ...], tuple[int, ...]]


def user_key(user_id: int) -> NodeKey:
    return (USER, user_id)


def item_key(item_id: int) -> NodeKey:
    return (ITEM, item_id)


@dataclass
class NodeRecord:
    attribute: Attribute
    last_update_time: float


class EdgeRecord:
    """One interaction; shared by both endpoints' adjacency lists."""

    __slots__ = ("user_key", "item_key", "label", "timestamp", "serial")

    def __init__(self, user_key: NodeKey, item_key: NodeKey, label: Label, timestamp: float, serial: int):
        self.user_key = user_key
        self.item_key = item_key
        self.label = label
        self.timestamp = timestamp
        # monotone touch counter; fixes within-timestamp list order across
        # save/load so eviction behaves identically after a round-trip
        self.serial = serial

    def other(self, key: NodeKey) -> NodeKey:
        return self.item_key if key == self.user_key else self.user_key

    def __repr__(self) -> str:
        return f"EdgeRecord({self.user_key}, {self.item_key}, {self.label.name}, t={self.timestamp})"


@dataclass
class SampledNode:
    key: NodeKey
    attribute: Attribute
    degree: int
    hop: int


@dataclass
class SampledEdge:
    user_idx: int  # index into NeighborSample.nodes
    item_idx: int
    label: Label
    timestamp: float


@dataclass
class NeighborSample:
    """A k-hop neighborhood frozen as of a query time."""

    nodes: list[SampledNode]
    edges: list[SampledEdge]
    seed_indices: list[int]
    as_of_time: float

    def index_of(self, key: NodeKey) -> int:
        for i, n in enumerate(self.nodes):
            if n.key == key:
                return i
        raise StructuralError(f"node {key} not in sample")


class GraphState:
    """Mutable graph under a monotone event clock; single writer."""

    def __init__(self, edge_cap_m: int):
        if edge_cap_m < 1:
            raise ConfigError(f"edge cap m must be >= 1, got {edge_cap_m}")
        self.m = edge_cap_m
        self.nodes: dict[NodeKey, NodeRecord] = {}
        self.adj: dict[NodeKey, list[EdgeRecord]] = {}
        self.clock = float("-inf")
        self._serial = 0

    # -- events ------------------------------------------------------------

    def _advance_clock(self, t: float) -> None:
        if t < self.clock:
            raise DataError(f"event time {t} precedes graph clock {self.clock}")
        self.clock = t

    def apply_node_event(self, key: NodeKey, attribute: Attribute, t: float) -> None:
        """Create the node or replace its attribute; last-writer-wins."""
        self._advance_clock(t)
        record = self.nodes.get(key)
        if record is None:
            self.nodes[key] = NodeRecord(attribute, t)
            self.adj[key] = []
        else:
            record.attribute = attribute
            record.last_update_time = t

    def apply_edge_event(self, u_key: NodeKey, i_key: NodeKey, label: Label, t: float) -> None:
        """Insert an unlabeled/positive edge, or upgrade unlabeled -> positive."""
        if label not in (Label.UNLABELED, Label.POSITIVE):
            raise DataError(f"edge label must be unlabeled or positive, got {label}")
        for key in (u_key, i_key):
            if key not in self.nodes:
                raise StructuralError(f"edge endpoint {key} does not exist")
        self._advance_clock(t)

        if label is Label.POSITIVE:
            # upgrade the most recent unlabeled edge of this pair in place
            for edge in reversed(self.adj[u_key]):
                if edge.item_key == i_key and edge.label is Label.UNLABELED:
                    self.adj[u_key].remove(edge)
                    self.adj[i_key].remove(edge)
                    edge.label = Label.POSITIVE
                    edge.timestamp = t
                    self._serial += 1
                    edge.serial = self._serial
                    self.adj[u_key].append(edge)
                    self.adj[i_key].append(edge)
                    return

        self._serial += 1
        edge = EdgeRecord(u_key, i_key, label, t, self._serial)
        self.adj[u_key].append(edge)
        self.adj[i_key].append(edge)
        for key in (u_key, i_key):
            while len(self.adj[key]) > self.m:
                oldest = self.adj[key].pop(0)
                other = oldest.other(key)
                self.adj[other].remove(oldest)

    # -- queries -----------------------------------------------------------

    def has_node(self, key: NodeKey) -> bool:
        return key in self.nodes

    def degree(self, key: NodeKey, t: float) -> int:
        """Retained incident edges no newer than t."""
        if key not in self.nodes:
            raise StructuralError(f"node {key} does not exist")
        return sum(1 for e in self.adj[key] if e.timestamp <= t)

    def khop_sample(self, seeds: Sequence[NodeKey], k: int, t: float) -> NeighborSample:
        """Breadth-first k-hop expansion over edges with timestamp <= t.

        Every retained time-valid edge is traversed (the m-cap is the fanout
        budget). Neighbors of a node are visited newest-first, ties broken by
        node key, so the sample is deterministic. The edge list carries every
        valid edge incident to an expanded node (hop < k); edges between two
        frontier nodes at hop k lie outside the receptive field and are
        dropped.
        """
        if k < 1:
            raise ConfigError(f"k must be >= 1, got {k}")
        for s in seeds:
            if s not in self.nodes:
                raise StructuralError(f"seed {s} does not exist")

        nodes: list[SampledNode] = []
        index: dict[NodeKey, int] = {}
        edges: list[SampledEdge] = []
        seen_edges: set[int] = set()

        def admit(key: NodeKey, hop: int) -> int:
            idx = len(nodes)
            index[key] = idx
            nodes.append(SampledNode(key, self.nodes[key].attribute, self.degree(key, t), hop))
            return idx

        frontier = []
        for s in seeds:
            if s not in index:
                frontier.append(admit(s, 0))
        for hop in range(k):
            next_frontier = []
            for idx in frontier:
                key = nodes[idx].key
                valid = [e for e in self.adj[key] if e.timestamp <= t]
                valid.sort(key=lambda e: (-e.timestamp, e.other(key)))
                for e in valid:
                    nb = e.other(key)
                    if nb not in index:
                        next_frontier.append(admit(nb, hop + 1))
                    if id(e) not in seen_edges:
                        seen_edges.add(id(e))
                        edges.append(
                            SampledEdge(index[e.user_key], index[e.item_key], e.label, e.timestamp)
                        )
            frontier = next_frontier
        return NeighborSample(nodes, edges, [index[s] for s in seeds], t)

    # -- checkpointing -----------------------------------------------------

    def save(self, path) -> None:
        """Line-oriented text dump; round-trips the logical state exactly."""
        lines = ["DGDF-GRAPH v1"]
        lines.append(f"m {self.m}")
        lines.append(f"clock {self.clock!r}")
        lines.append(f"serial {self._serial}")
        lines.append(f"nodes {len(self.nodes)}")
        for key in sorted(self.nodes):
            rec = self.nodes[key]
            dense, cats = rec.attribute
            lines.append(
                "\t".join(
                    [
                        key[0],
                        str(key[1]),
                        repr(rec.last_update_time),
                        ",".join(repr(v) for v in dense),
                        ",".join(str(v) for v in cats),
                    ]
                )
            )
        all_edges = {id(e): e for adj in self.adj.values() for e in adj}
        edge_list = sorted(all_edges.values(), key=lambda e: e.serial)
        lines.append(f"edges {len(edge_list)}")
        for e in edge_list:
            lines.append(
                "\t".join(
                    [
                        str(e.user_key[1]),
                        str(e.item_key[1]),
                        str(int(e.label)),
                        repr(e.timestamp),
                        str(e.serial),
                    ]
                )
            )
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path) -> "GraphState":
        with open(path, encoding="utf-8") as fh:
            lines = fh.read().splitlines()
        if not lines or lines[0] != "DGDF-GRAPH v1":
            raise DataError(f"{path}: not a DGDF-GRAPH v1 checkpoint")
        pos = 1

        def expect(tag: str) -> str:
            nonlocal pos
            name, _, value = lines[pos].partition(" ")
            if name != tag:
                raise DataError(f"{path}:{pos + 1}: expected '{tag}', got {lines[pos]!r}")
            pos += 1
            return value

        g = cls(edge_cap_m=int(expect("m")))
        clock = float(expect("clock"))
        serial = int(expect("serial"))
        n_nodes = int(expect("nodes"))
        for _ in range(n_nodes):
            role, nid, t_str, dense_str, cats_str = lines[pos].split("\t")
            pos += 1
            key = (role, int(nid))
            dense = tuple(float(v) for v in dense_str.split(",")) if dense_str else ()
            cats = tuple(int(v) for v in cats_str.split(",")) if cats_str else ()
            g.nodes[key] = NodeRecord((dense, cats), float(t_str))
            g.adj[key] = []
        n_edges = int(expect("edges"))
        for _ in range(n_edges):
            uid, iid, label_str, t_str, serial_str = lines[pos].split("\t")
            pos += 1
            e = EdgeRecord(
                (USER, int(uid)),
                (ITEM, int(iid)),
                Label(int(label_str)),
                float(t_str),
                int(serial_str),
            )
            g.adj[e.user_key].append(e)
            g.adj[e.item_key].append(e)
        g.clock = clock
        g._serial = serial
        return g

    def logical_state(self):
        """Hashable view of nodes + adjacency used by round-trip tests."""
        nodes = {k: (r.attribute, r.last_update_time) for k, r in self.nodes.items()}
        adj = {
            k: [(e.user_key, e.item_key, e.label, e.timestamp, e.serial) for e in lst]
            for k, lst in self.adj.items()
        }
        return nodes, adj, self.m, self.clock, self._serial
