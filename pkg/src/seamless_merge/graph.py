"""Delaunay point graphs and their sparse graph Laplacians."""
import logging
import os
import tempfile
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Optional

import numpy as np
from scipy import sparse
from scipy.sparse import csgraph
from scipy.spatial import Delaunay, QhullError

from .errors import DegenerateGeometry, DisconnectedGraph, InvalidConfig
from .util import array_digest

EDGE_WEIGHTINGS = ("none", "inverse-distance")


@dataclass(frozen=True)
class EdgeList:
    """Undirected edges as an (E, 2) array of local indices with a < b, sorted."""

    n_vertices: int
    edges: np.ndarray

    def __len__(self) -> int:
        return int(self.edges.shape[0])


@dataclass(frozen=True)
class GraphLaplacian:
    matrix: sparse.csr_matrix
    degree: np.ndarray

    @property
    def n_vertices(self) -> int:
        return int(self.matrix.shape[0])


@dataclass(frozen=True)
class PartitionGraph:
    edges: EdgeList
    laplacian: GraphLaplacian
    key: str


def delaunay_edges(points: np.ndarray, max_edge_length: Optional[float] = None) -> EdgeList:
    """Edge set of a Delaunay triangulation of 2-D points."""
    points = np.asarray(points, dtype=np.float64)
    n = points.shape[0]
    if n < 3:
        raise DegenerateGeometry(f"Delaunay triangulation needs at least 3 points, got {n}")
    try:
        tri = Delaunay(points)
    except (QhullError, ValueError) as e:
        raise DegenerateGeometry(f"Cannot triangulate {n} points (collinear or degenerate): {e}")

    simplices = tri.simplices
    pairs = np.concatenate([simplices[:, [0, 1]], simplices[:, [1, 2]], simplices[:, [0, 2]]])
    pairs.sort(axis=1)
    edges = np.unique(pairs, axis=0)

    if max_edge_length is not None:
        lengths = np.linalg.norm(points[edges[:, 0]] - points[edges[:, 1]], axis=1)
        keep = lengths <= max_edge_length
        logging.debug(f"Edge-length filter dropped {int((~keep).sum())} of {len(edges)} edges")
        edges = edges[keep]

    edge_list = EdgeList(n_vertices=n, edges=np.ascontiguousarray(edges, dtype=np.int64))
    check_connected(edge_list)
    return edge_list


def _adjacency(n: int, edges: np.ndarray, weights: Optional[np.ndarray] = None) -> sparse.csr_matrix:
    w = np.ones(len(edges)) if weights is None else np.asarray(weights, dtype=np.float64)
    rows = np.concatenate([edges[:, 0], edges[:, 1]])
    cols = np.concatenate([edges[:, 1], edges[:, 0]])
    return sparse.csr_matrix((np.concatenate([w, w]), (rows, cols)), shape=(n, n))


def check_connected(edge_list: EdgeList) -> None:
    n = edge_list.n_vertices
    n_comp, labels = csgraph.connected_components(_adjacency(n, edge_list.edges), directed=False)
    if n_comp > 1:
        sizes = sorted(np.bincount(labels).tolist(), reverse=True)
        raise DisconnectedGraph(
            f"Point graph on {n} vertices has {n_comp} components (sizes {sizes[:10]})",
            component_sizes=sizes,
        )


def edge_weights(points: np.ndarray, edge_list: EdgeList, weighting: str = "none") -> Optional[np.ndarray]:
    if weighting == "none":
        return None
    if weighting == "inverse-distance":
        e = edge_list.edges
        return 1.0 / np.linalg.norm(points[e[:, 0]] - points[e[:, 1]], axis=1)
    raise InvalidConfig(f"Unknown edge weighting '{weighting}' (expected one of {EDGE_WEIGHTINGS})")


def build_laplacian(n: int, edges: EdgeList, weights: Optional[np.ndarray] = None) -> GraphLaplacian:
    """Combinatorial graph Laplacian L = Degree - Adjacency as a CSR matrix."""
    e = edges.edges
    if e.size and (e.min() < 0 or e.max() >= n):
        raise DegenerateGeometry(f"Edge list references vertices outside 0..{n - 1}")
    if np.any(e[:, 0] == e[:, 1]):
        raise DegenerateGeometry("Edge list contains self-loops")
    check_connected(EdgeList(n_vertices=n, edges=e))

    adj = _adjacency(n, e, weights)
    degree = np.asarray(adj.sum(axis=1)).ravel()
    lap = (sparse.diags(degree) - adj).tocsr()
    lap.sort_indices()
    counts = np.bincount(e.ravel(), minlength=n)
    return GraphLaplacian(matrix=lap, degree=counts)


def graph_key(points: np.ndarray, max_edge_length: Optional[float], weighting: str) -> str:
    return array_digest(points, extra=f"max_edge_length={max_edge_length};weighting={weighting}")


def build_partition_graph(
    points: np.ndarray,
    max_edge_length: Optional[float] = None,
    weighting: str = "none",
    cache: Optional["LaplacianCache"] = None,
) -> PartitionGraph:
    key = graph_key(points, max_edge_length, weighting)
    if cache is not None:
        hit = cache.get(key)
        if hit is not None:
            return hit
    edge_list = delaunay_edges(points, max_edge_length=max_edge_length)
    laplacian = build_laplacian(len(points), edge_list, edge_weights(points, edge_list, weighting))
    graph = PartitionGraph(edges=edge_list, laplacian=laplacian, key=key)
    logging.debug(f"Built graph: {len(points)} vertices, {len(edge_list)} edges")
    if cache is not None:
        cache.put(graph)
    return graph


class LaplacianCache:
    """Keeps built partition graphs in memory and, optionally, as .npz files in a directory."""

    def __init__(self, directory: Optional[Path] = None):
        self.directory = Path(directory) if directory is not None else None
        self._graphs: Dict[str, PartitionGraph] = {}
        self._lock = threading.Lock()
        self.hits = 0
        self.misses = 0
        if self.directory is not None:
            self.directory.mkdir(parents=True, exist_ok=True)

    def _path(self, key: str) -> Path:
        return self.directory / f"{key}.npz"

    def get(self, key: str) -> Optional[PartitionGraph]:
        with self._lock:
            graph = self._graphs.get(key)
        if graph is None and self.directory is not None and self._path(key).exists():
            graph = self._load(key)
            with self._lock:
                self._graphs[key] = graph
        with self._lock:
            if graph is None:
                self.misses += 1
            else:
                self.hits += 1
        return graph

    def put(self, graph: PartitionGraph) -> None:
        with self._lock:
            self._graphs[graph.key] = graph
        if self.directory is not None:
            self._write(graph)
            logging.debug(f"Cached Laplacian {graph.key[:12]} in {self.directory}")

    def _write(self, graph: PartitionGraph) -> None:
        """Write to a temporary file in the cache directory, then rename it into place."""
        fd, tmp = tempfile.mkstemp(prefix=f".{graph.key[:12]}-", suffix=".npz", dir=self.directory)
        os.close(fd)
        try:
            sparse.save_npz(tmp, graph.laplacian.matrix, compressed=False)
            os.replace(tmp, self._path(graph.key))
        except BaseException:
            Path(tmp).unlink(missing_ok=True)
            raise

    def _load(self, key: str) -> PartitionGraph:
        lap = sparse.load_npz(self._path(key)).tocsr()
        lap.sort_indices()
        upper = sparse.triu(lap, k=1).tocoo()
        edges = np.column_stack([upper.row, upper.col]).astype(np.int64)
        order = np.lexsort((edges[:, 1], edges[:, 0]))
        edges = edges[order]
        n = lap.shape[0]
        degree = np.bincount(edges.ravel(), minlength=n)
        logging.debug(f"Loaded cached Laplacian {key[:12]} ({n} vertices)")
        return PartitionGraph(
            edges=EdgeList(n_vertices=n, edges=edges),
            laplacian=GraphLaplacian(matrix=lap, degree=degree),
            key=key,
        )
