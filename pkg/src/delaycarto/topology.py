"""Network topology, monitored paths, and the path-link structure matrices.

Topology documents are JSON::

    {
      "nodes": ["a", "b", "c"],
      "links": [{"id": "ab", "from": "a", "to": "b"}, ...],
      "end_nodes": ["a", "c"],
      "paths": [{"id": 0, "origin": "a", "links": ["ab", "bc"]}, ...]
    }

Links are directed. Path ids must be dense ``0..P-1`` in file order (an
explicit ``id`` is optional, but if given must equal the position).
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path as FsPath

import numpy as np

__all__ = [
    "TopologyError",
    "Link",
    "Path",
    "Network",
    "load_network",
    "network_from_dict",
    "routing_matrix",
    "gramian",
    "paths_by_origin",
    "random_network",
    "chain_network",
]


class TopologyError(ValueError):
    """Malformed topology document; the message names the first bad field."""


@dataclass(frozen=True)
class Link:
    id: str
    tail: str
    head: str


@dataclass(frozen=True)
class Path:
    id: int
    origin: str
    links: tuple[str, ...]


@dataclass(frozen=True)
class Network:
    nodes: tuple[str, ...]
    links: tuple[Link, ...]
    paths: tuple[Path, ...]
    end_nodes: tuple[str, ...] = field(default=())

    def __post_init__(self):
        _validate(self)

    @property
    def n_paths(self) -> int:
        return len(self.paths)

    @property
    def n_links(self) -> int:
        return len(self.links)

    @cached_property
    def link_index(self) -> dict[str, int]:
        return {link.id: i for i, link in enumerate(self.links)}

    @cached_property
    def routing(self) -> np.ndarray:
        return routing_matrix(self)

    @cached_property
    def gram(self) -> np.ndarray:
        return gramian(self.routing)

    @cached_property
    def origin_map(self) -> dict[str, tuple[int, ...]]:
        """End-node -> ids of the paths starting there (empty tuples kept)."""
        groups = {v: [] for v in self.end_nodes}
        for p in self.paths:
            groups.setdefault(p.origin, []).append(p.id)
        return {v: tuple(ids) for v, ids in groups.items()}

    def to_dict(self) -> dict:
        return {
            "nodes": list(self.nodes),
            "links": [{"id": l.id, "from": l.tail, "to": l.head} for l in self.links],
            "end_nodes": list(self.end_nodes),
            "paths": [
                {"id": p.id, "origin": p.origin, "links": list(p.links)} for p in self.paths
            ],
        }


def _validate(net: Network):
    nodes = set(net.nodes)
    if len(nodes) != len(net.nodes):
        raise TopologyError("nodes: duplicate node id")
    links = {}
    for i, link in enumerate(net.links):
        for end in ("tail", "head"):
            if getattr(link, end) not in nodes:
                raise TopologyError(
                    f"links[{i}] ({link.id!r}): unknown node {getattr(link, end)!r}"
                )
        if link.id in links:
            raise TopologyError(f"links[{i}]: duplicate link id {link.id!r}")
        links[link.id] = link
    for v in net.end_nodes:
        if v not in nodes:
            raise TopologyError(f"end_nodes: unknown node {v!r}")
    if not net.paths:
        raise TopologyError("paths: at least one path is required")
    for i, p in enumerate(net.paths):
        if p.id != i:
            raise TopologyError(f"paths[{i}]: id {p.id!r} is not dense (expected {i})")
        if not p.links:
            raise TopologyError(f"paths[{i}]: path has no links")
        if p.origin not in nodes:
            raise TopologyError(f"paths[{i}]: unknown origin {p.origin!r}")
        prev = None
        for j, lid in enumerate(p.links):
            if lid not in links:
                raise TopologyError(f"paths[{i}].links[{j}]: unknown link {lid!r}")
            link = links[lid]
            if j == 0 and link.tail != p.origin:
                raise TopologyError(
                    f"paths[{i}].links[0]: link {lid!r} does not start at origin {p.origin!r}"
                )
            if prev is not None and prev.head != link.tail:
                raise TopologyError(
                    f"paths[{i}].links[{j}]: link {lid!r} is not contiguous with {prev.id!r}"
                )
            prev = link


def network_from_dict(doc: dict) -> Network:
    """Build and validate a :class:`Network` from a parsed topology document."""
    if not isinstance(doc, dict):
        raise TopologyError("document: expected a JSON object")
    for key in ("nodes", "links", "paths"):
        if key not in doc:
            raise TopologyError(f"{key}: missing field")
        if not isinstance(doc[key], list):
            raise TopologyError(f"{key}: expected a list")
    nodes = tuple(str(v) for v in doc["nodes"])
    links = []
    for i, item in enumerate(doc["links"]):
        try:
            links.append(Link(str(item["id"]), str(item["from"]), str(item["to"])))
        except (KeyError, TypeError):
            raise TopologyError(f"links[{i}]: expected {{id, from, to}}") from None
    paths = []
    for i, item in enumerate(doc["paths"]):
        try:
            pid = int(item.get("id", i))
            origin = str(item["origin"])
            plinks = tuple(str(lid) for lid in item["links"])
        except (KeyError, TypeError, AttributeError, ValueError):
            raise TopologyError(f"paths[{i}]: expected {{id, origin, links}}") from None
        paths.append(Path(pid, origin, plinks))
    if "end_nodes" in doc:
        end_nodes = tuple(str(v) for v in doc["end_nodes"])
    else:
        end_nodes = tuple(dict.fromkeys(p.origin for p in paths))
    return Network(nodes, tuple(links), tuple(paths), end_nodes)


def load_network(source) -> Network:
    """Load a topology document from a path, a JSON string, or a dict."""
    if isinstance(source, dict):
        return network_from_dict(source)
    if isinstance(source, FsPath) or (isinstance(source, str) and not source.lstrip().startswith("{")):
        text = FsPath(source).read_text()
    else:
        text = source
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise TopologyError(f"document: invalid JSON ({exc})") from None
    return network_from_dict(doc)


def routing_matrix(net: Network) -> np.ndarray:
    """P x |E| 0/1 matrix; entry (p, l) is 1 iff path p traverses link l."""
    index = net.link_index
    r = np.zeros((net.n_paths, net.n_links))
    for p in net.paths:
        for lid in p.links:
            r[p.id, index[lid]] = 1.0
    return r


def gramian(r) -> np.ndarray:
    """Path Gramian ``R R^T``: shared-link counts (diagonal = path lengths)."""
    r = np.asarray(r, dtype=float)
    return r @ r.T


def paths_by_origin(net: Network, node: str) -> frozenset[int]:
    if node not in net.nodes:
        raise TopologyError(f"unknown node {node!r}")
    return frozenset(p.id for p in net.paths if p.origin == node)


# --- synthetic topologies --------------------------------------------------


def chain_network() -> Network:
    """The 3-node chain 1->2->3 with paths {1->2, 1->2->3}."""
    return network_from_dict({
        "nodes": ["1", "2", "3"],
        "links": [{"id": "12", "from": "1", "to": "2"}, {"id": "23", "from": "2", "to": "3"}],
        "end_nodes": ["1", "3"],
        "paths": [{"id": 0, "origin": "1", "links": ["12"]},
                  {"id": 1, "origin": "1", "links": ["12", "23"]}],
    })


def random_network(n_nodes: int, n_end: int, n_paths: int, seed: int = 0,
                   extra_edges: int | None = None) -> Network:
    """Random connected topology with shortest-path routes between end-nodes.

    Builds a random spanning tree over ``n_nodes`` plus ``extra_edges`` chords
    (each physical edge yields two directed links), picks ``n_end`` end-nodes
    and routes ``n_paths`` distinct ordered end-node pairs along hop-count
    shortest paths (ties broken by the lowest node id sequence).
    """
    import networkx as nx

    rng = np.random.default_rng(seed)
    if n_end > n_nodes or n_paths > n_end * (n_end - 1):
        raise ValueError("not enough nodes for the requested paths")
    names = [f"n{i}" for i in range(n_nodes)]
    g = nx.Graph()
    g.add_nodes_from(range(n_nodes))
    order = rng.permutation(n_nodes)
    for k in range(1, n_nodes):
        g.add_edge(int(order[k]), int(order[rng.integers(k)]))
    if extra_edges is None:
        extra_edges = n_nodes // 2
    tries = 0
    while extra_edges > 0 and tries < 100 * n_nodes:
        tries += 1
        a, b = (int(x) for x in rng.choice(n_nodes, 2, replace=False))
        if not g.has_edge(a, b):
            g.add_edge(a, b)
            extra_edges -= 1
    links = []
    for a, b in sorted(g.edges()):
        a, b = min(a, b), max(a, b)
        links.append({"id": f"{names[a]}-{names[b]}", "from": names[a], "to": names[b]})
        links.append({"id": f"{names[b]}-{names[a]}", "from": names[b], "to": names[a]})
    ends = sorted(int(v) for v in rng.choice(n_nodes, n_end, replace=False))
    pairs = [(a, b) for a in ends for b in ends if a != b]
    chosen = sorted(rng.choice(len(pairs), n_paths, replace=False))
    paths = []
    for pid, k in enumerate(chosen):
        a, b = pairs[k]
        route = min(nx.all_shortest_paths(g, a, b))
        paths.append({
            "id": pid,
            "origin": names[a],
            "links": [f"{names[u]}-{names[v]}" for u, v in zip(route, route[1:])],
        })
    return network_from_dict({
        "nodes": names,
        "links": links,
        "end_nodes": [names[v] for v in ends],
        "paths": paths,
    })
