"""Star-topology subgraph store.

Each record is a center entity plus its 1-hop neighbors with predicate labels,
ranked by a PageRank-style popularity score. Files are UTF-8 JSON, either a
single list of records or one record per line (detected by the first
non-whitespace character).
"""

import json
import logging
from dataclasses import dataclass

logger = logging.getLogger(__name__)

MAX_NEIGHBORS = 100


class GraphFormatError(ValueError):
    """Raised when a star-graph file violates the documented schema."""


@dataclass(frozen=True)
class EntityRef:
    qid: str
    label: str
    pagerank: float

    def __post_init__(self):
        if not self.qid:
            raise GraphFormatError("entity qid must be non-empty")
        if not self.label:
            raise GraphFormatError(f"entity {self.qid}: label must be non-empty")
        if self.pagerank < 0:
            raise GraphFormatError(f"entity {self.qid}: pagerank must be >= 0")


@dataclass(frozen=True)
class PredicateRef:
    pid: str
    label: str

    def __post_init__(self):
        if not self.pid:
            raise GraphFormatError("predicate pid must be non-empty")
        if not self.label:
            raise GraphFormatError(f"predicate {self.pid}: label must be non-empty")


@dataclass(frozen=True)
class StarGraph:
    center: EntityRef
    neighbors: tuple  # of (PredicateRef, EntityRef)

    def __post_init__(self):
        for pred, ent in self.neighbors:
            if ent.qid == self.center.qid:
                raise GraphFormatError(
                    f"graph {self.center.qid}: neighbor qid equals center qid"
                )
        ranks = [ent.pagerank for _, ent in self.neighbors]
        if any(ranks[i] < ranks[i + 1] for i in range(len(ranks) - 1)):
            raise GraphFormatError(
                f"graph {self.center.qid}: neighbors not sorted by pagerank descending"
            )
        if len(self.neighbors) > MAX_NEIGHBORS:
            raise GraphFormatError(
                f"graph {self.center.qid}: more than {MAX_NEIGHBORS} neighbors"
            )

    @property
    def degree(self):
        return len(self.neighbors)


def _neighbor_sort_key(pair):
    pred, ent = pair
    # pagerank descending, qid ascending on ties
    return (-ent.pagerank, ent.qid)


def make_star_graph(center, neighbors):
    """Build a StarGraph, enforcing sort order and the neighbor cap.

    Inputs with more than MAX_NEIGHBORS neighbors are truncated to the top
    MAX_NEIGHBORS by pagerank (with a warning) rather than rejected, so that
    hand-made fixtures stay usable.
    """
    ordered = sorted(neighbors, key=_neighbor_sort_key)
    if len(ordered) > MAX_NEIGHBORS:
        logger.warning(
            "graph %s: truncating %d neighbors to top %d by pagerank",
            center.qid, len(ordered), MAX_NEIGHBORS,
        )
        ordered = ordered[:MAX_NEIGHBORS]
    return StarGraph(center=center, neighbors=tuple(ordered))


def _parse_record(obj, index):
    try:
        c = obj["center"]
        center = EntityRef(qid=c["qid"], label=c["label"], pagerank=float(c["pagerank"]))
        neighbors = []
        for nb in obj["neighbors"]:
            pred = PredicateRef(pid=nb["predicate"]["pid"], label=nb["predicate"]["label"])
            ent = EntityRef(qid=nb["qid"], label=nb["label"], pagerank=float(nb["pagerank"]))
            neighbors.append((pred, ent))
    except (KeyError, TypeError, ValueError) as exc:
        raise GraphFormatError(f"record {index}: malformed star-graph record: {exc}") from exc
    return make_star_graph(center, neighbors)


def load_star_graphs(path):
    """Load a star-graph file into a dict keyed by center qid.

    Accepts a JSON list or a line-delimited variant. Neighbors are re-sorted
    if the input order violates pagerank descent; duplicate center qids are
    rejected.
    """
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    stripped = text.lstrip()
    if not stripped:
        return {}
    if stripped[0] == "[":
        try:
            records = json.loads(text)
        except json.JSONDecodeError as exc:
            raise GraphFormatError(f"{path}: invalid JSON: {exc}") from exc
    else:
        records = []
        for lineno, line in enumerate(text.splitlines()):
            if not line.strip():
                continue
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise GraphFormatError(f"{path}: line {lineno}: invalid JSON: {exc}") from exc

    graphs = {}
    for i, obj in enumerate(records):
        graph = _parse_record(obj, i)
        if graph.center.qid in graphs:
            raise GraphFormatError(f"record {i}: duplicate center qid {graph.center.qid}")
        graphs[graph.center.qid] = graph
    return graphs


def graph_to_record(graph):
    return {
        "center": {
            "qid": graph.center.qid,
            "label": graph.center.label,
            "pagerank": graph.center.pagerank,
        },
        "neighbors": [
            {
                "qid": ent.qid,
                "label": ent.label,
                "pagerank": ent.pagerank,
                "predicate": {"pid": pred.pid, "label": pred.label},
            }
            for pred, ent in graph.neighbors
        ],
    }


def save_star_graphs(graphs, path):
    """Write graphs as a canonicalized JSON list (sorted by center qid)."""
    records = [graph_to_record(graphs[qid]) for qid in sorted(graphs)]
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(records, fh, ensure_ascii=False, indent=None, separators=(",", ":"))


def top_neighbors(graph, limit):
    """Top `limit` neighbors by pagerank (qid-ascending on ties)."""
    if limit < 1:
        raise ValueError("limit must be >= 1")
    return list(graph.neighbors[:limit])


def degree_bucket(graph):
    """Classify a graph by neighbor count: niche (1-10), moderate (11-90),
    famous (91-100). Degree 0 maps to the distinct "isolated" outcome, which
    bucket reports exclude."""
    m = graph.degree
    if m == 0:
        return "isolated"
    if m <= 10:
        return "niche"
    if m <= 90:
        return "moderate"
    return "famous"
