'''
Randomized star contraction. Repeated star rounds collapse a graph until no edges are left;
the surviving supervertices are exactly the connected components of the input.
'''

from dataclasses import dataclass, field

import numpy as np

from misc.errors import InvariantViolation

_MIX_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_MIX_1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX_2 = np.uint64(0x94D049BB133111EB)


class MaskGraph:
    '''
    Undirected simple graph over opaque integer vertex ids. Edges are stored once as
    (u, v) rows with u < v; self-loops are dropped on construction.
    '''

    def __init__(self, vertices, edges=()):
        self.vertices = np.unique(np.asarray(list(vertices) if not isinstance(vertices, np.ndarray) else vertices,
                                             dtype=np.int64))

        edges = np.asarray(list(edges) if not isinstance(edges, np.ndarray) else edges, dtype=np.int64).reshape(-1, 2)
        edges = np.sort(edges, axis=1)
        edges = edges[edges[:, 0] != edges[:, 1]]
        self.edges = np.unique(edges, axis=0) if len(edges) else edges

        if len(self.edges) and not np.isin(self.edges, self.vertices).all():
            raise InvariantViolation("edge references a vertex outside the graph")

    @property
    def num_vertices(self) -> int:
        return len(self.vertices)

    @property
    def num_edges(self) -> int:
        return len(self.edges)

    def edge_set(self) -> set:
        return {(int(u), int(v)) for u, v in self.edges}

    def __repr__(self) -> str:
        return f"MaskGraph(vertices={self.num_vertices}, edges={self.num_edges})"


@dataclass(frozen=True)
class Partition:
    '''
    Total map vertex -> supervertex together with the inverse member sets. A supervertex
    id is always the smallest id among its members.
    '''
    assignment: dict
    members: dict
    rounds: int = field(default=0, compare=False)

    @classmethod
    def from_assignment(cls, assignment: dict, rounds: int = 0) -> 'Partition':
        '''Regroup any vertex -> group map into canonical form (group id = minimum member).'''

        groups = {}
        for vertex, group in assignment.items():
            groups.setdefault(group, []).append(int(vertex))

        canonical, members = {}, {}
        for group_members in groups.values():
            representative = min(group_members)
            members[representative] = frozenset(group_members)
            for vertex in group_members:
                canonical[vertex] = representative

        return cls(canonical, dict(sorted(members.items())), rounds)

    @classmethod
    def identity(cls, vertices) -> 'Partition':
        return cls.from_assignment({int(v): int(v) for v in vertices})

    @property
    def vertices(self) -> set:
        return set(self.assignment)

    def __len__(self) -> int:
        return len(self.members)

    def to_dict(self) -> dict:
        return {'supervertices': {str(sv): sorted(members) for sv, members in self.members.items()}}

    @classmethod
    def from_dict(cls, raw: dict) -> 'Partition':
        assignment = {}
        for sv, members in raw['supervertices'].items():
            for vertex in members:
                assignment[int(vertex)] = int(sv)
        return cls.from_assignment(assignment)


@dataclass(frozen=True)
class LabelAssignment:
    labels: dict
    seed: int
    round_index: int = 0

    def __getitem__(self, vertex: int) -> float:
        return self.labels[vertex]

    def __len__(self) -> int:
        return len(self.labels)

    def values_for(self, vertices: np.ndarray) -> np.ndarray:
        return np.array([self.labels[int(v)] for v in vertices], dtype=np.float64)


def _mix(x: np.ndarray) -> np.ndarray:

    # splitmix64 finalizer, wraps modulo 2**64
    with np.errstate(over='ignore'):
        z = x + _MIX_GAMMA
        z = (z ^ (z >> np.uint64(30))) * _MIX_1
        z = (z ^ (z >> np.uint64(27))) * _MIX_2
        return z ^ (z >> np.uint64(31))


def label_values(vertices: np.ndarray, seed: int, round_index: int = 0) -> np.ndarray:
    '''Counter-based uniform [0, 1) draws keyed on (seed, vertex id, round).'''

    ids = np.asarray(vertices, dtype=np.int64).astype(np.uint64)
    key = _mix(np.array([seed], dtype=np.uint64))
    stream = _mix(key ^ ids)
    bits = _mix(stream ^ np.uint64(round_index))

    return (bits >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))


def assign_labels(vertices, seed: int, round_index: int = 0) -> LabelAssignment:
    '''
    Give every vertex a label in [0, 1). The label depends only on (seed, vertex id, round),
    never on the order vertices are visited.
    '''

    ids = np.asarray(list(vertices) if not isinstance(vertices, np.ndarray) else vertices, dtype=np.int64)
    values = label_values(ids, seed, round_index)

    return LabelAssignment({int(v): float(x) for v, x in zip(ids, values)}, seed, round_index)


def _star_merge(graph: MaskGraph, values: np.ndarray) -> np.ndarray:

    n_vertices = graph.num_vertices
    if graph.num_edges == 0:
        return np.arange(n_vertices)

    # Ties on the label fall back to the vertex id so the order is total
    order = np.lexsort((graph.vertices, values))
    rank = np.empty(n_vertices, dtype=np.int64)
    rank[order] = np.arange(n_vertices)

    u = np.searchsorted(graph.vertices, graph.edges[:, 0])
    v = np.searchsorted(graph.vertices, graph.edges[:, 1])

    best = rank.copy()
    np.minimum.at(best, u, rank[v])
    np.minimum.at(best, v, rank[u])

    # Non-centers point at the minimum of their closed neighborhood; follow the chain to a center
    parent = order[best]
    while True:
        jumped = parent[parent]
        if np.array_equal(jumped, parent):
            return parent
        parent = jumped


def star_round(graph: MaskGraph, labels: LabelAssignment) -> 'tuple[dict, MaskGraph]':
    '''
    One round of star contraction.\n

    Parameters:
        `graph (MaskGraph)` - Graph to contract.\n
        `labels (LabelAssignment)` - A label for every vertex of `graph`.\n

    Return:
        `merge (dict)` - Vertex id to the id of the star center it was merged into. Centers map
        to themselves.\n
        `contracted (MaskGraph)` - Graph over the centers with deduplicated edges.\n
    '''

    missing = [int(v) for v in graph.vertices if int(v) not in labels.labels]
    if missing:
        raise InvariantViolation(f"labels missing for {len(missing)} vertices")

    parent = _star_merge(graph, labels.values_for(graph.vertices))
    target = graph.vertices[parent]
    merge = {int(v): int(t) for v, t in zip(graph.vertices, target)}

    if graph.num_edges:
        u = target[np.searchsorted(graph.vertices, graph.edges[:, 0])]
        v = target[np.searchsorted(graph.vertices, graph.edges[:, 1])]
        edges = np.stack([u, v], axis=1)
    else:
        edges = graph.edges

    return merge, MaskGraph(np.unique(target), edges)


def contract(graph: MaskGraph, seed: int) -> Partition:
    '''
    Contract `graph` with fresh labels every round until it has no edges. The resulting
    member sets are the connected components of `graph`, whatever the seed.
    '''

    representative = {int(v): int(v) for v in graph.vertices}
    current = graph
    rounds = 0

    while current.num_edges:
        before = current.num_vertices
        merge, current = star_round(current, assign_labels(current.vertices, seed, rounds))
        representative = {vertex: merge[center] for vertex, center in representative.items()}
        rounds += 1

        if current.num_vertices >= before:
            raise InvariantViolation("star round made no progress")

    return Partition.from_assignment(representative, rounds)


def compose(p1: Partition, p2: Partition) -> Partition:
    '''Chain two partitions: `p2` groups the supervertices of `p1`.'''

    if set(p2.assignment) != set(p1.members):
        raise InvariantViolation("second partition is not defined over the first one's supervertices")

    return Partition.from_assignment({vertex: p2.assignment[sv] for vertex, sv in p1.assignment.items()},
                                     p1.rounds + p2.rounds)
