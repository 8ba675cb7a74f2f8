"""Spatially explicit feature extraction for sets of located agents.

The extractor treats each agent as a 2-D point carrying a feature vector.
An encoder repeatedly groups points into overlapping clusters around
farthest-point-sampled centroids and pools each cluster through a shared
network; a decoder propagates the pooled features back to every agent by
inverse-distance interpolation and adds the raw input features as a
residual.  The output therefore mixes neighborhood and whole-frame
information while staying equivariant to the input order and robust to a
changing number of agents.

All topology decisions (sampling starts, nearest-neighbor ties) break ties
on coordinates before indices, so frames with distinct coordinates produce
identical results under any input permutation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Node
from .nn import MlpParams, mlp_forward, mlp_init

COINCIDENT_EPS = 1e-12

MODES = ("full", "global-only", "local-only")


@dataclass
class AgentPoint:
    """One agent: planar coordinates, a feature vector, and an alive flag."""

    coords: np.ndarray
    features: np.ndarray
    alive: bool = True


@dataclass
class Frame:
    """A batch-friendly view of one frame of agents."""

    coords: np.ndarray  # (n, 2)
    features: np.ndarray  # (n, f)
    alive: np.ndarray  # (n,) bool

    @classmethod
    def from_points(cls, points: list[AgentPoint]) -> "Frame":
        coords = np.asarray([p.coords for p in points], dtype=np.float64).reshape(
            len(points), 2
        )
        feats = np.asarray([p.features for p in points], dtype=np.float64)
        if feats.ndim != 2:
            raise ValueError("agent feature vectors must share one length")
        alive = np.asarray([p.alive for p in points], dtype=bool)
        return cls(coords, feats, alive)


def as_frame(frame) -> Frame:
    if isinstance(frame, Frame):
        return frame
    return Frame.from_points(list(frame))


@dataclass
class LevelSet:
    """The point set produced at one encoder level."""

    level: int
    coords: np.ndarray  # (n_l, 2)
    centroid_indices: np.ndarray  # (n_l,) indices into the level below
    clusters: list[np.ndarray]  # member indices into the level below
    features: np.ndarray | None = None  # (n_l, f_l), filled by traced runs


def cluster_counts(n: int) -> tuple[int, int]:
    """Cluster counts for both encoder levels given ``n`` alive agents."""
    if n < 1:
        raise ValueError("cluster_counts requires at least one alive agent")
    n1 = max(1, math.isqrt(n))
    n2 = max(1, math.isqrt(n1))
    return n1, n2


def _lex_order(coords: np.ndarray) -> np.ndarray:
    """Stable order by (x, y); equal coordinates fall back to index order."""
    return np.lexsort((coords[:, 1], coords[:, 0]))


def farthest_point_sampling(coords, m: int) -> np.ndarray:
    """Greedy max-min subset selection of ``m`` point indices.

    The first pick is the lexicographically smallest (x, y) coordinate so the
    whole selection depends only on the point set, not its input order.
    Each later pick maximizes the minimum distance to the points chosen so
    far; exact distance ties fall to the lexicographically smaller
    coordinate, then the smaller index.
    """
    pts = np.asarray(coords, dtype=np.float64).reshape(-1, 2)
    n = len(pts)
    if not 1 <= m <= n:
        raise ValueError(f"farthest_point_sampling: m={m} out of range [1, {n}]")
    selected = np.empty(m, dtype=np.intp)
    selected[0] = _lex_order(pts)[0]
    chosen = np.zeros(n, dtype=bool)
    chosen[selected[0]] = True
    min_d = np.linalg.norm(pts - pts[selected[0]], axis=1)
    for i in range(1, m):
        cand = np.flatnonzero(~chosen)
        best_d = min_d[cand].max()
        tied = cand[min_d[cand] == best_d]
        pick = tied[_lex_order(pts[tied])[0]]
        selected[i] = pick
        chosen[pick] = True
        np.minimum(min_d, np.linalg.norm(pts - pts[pick], axis=1), out=min_d)
    return selected


def knn_group(
    centroid_indices, coords, cluster_size: int
) -> list[np.ndarray]:
    """Assign each centroid the ``cluster_size`` nearest points as members.

    The centroid always belongs to its own cluster; remaining slots fill with
    the nearest other points (squared-distance order, coordinate then index
    tie-breaks).  A point may appear in several clusters.
    """
    if cluster_size < 1:
        raise ValueError("cluster_size must be at least 1")
    pts = np.asarray(coords, dtype=np.float64).reshape(-1, 2)
    centroid_indices = np.asarray(centroid_indices, dtype=np.intp)
    n = len(pts)
    k = min(cluster_size, n)
    clusters = []
    for c in centroid_indices:
        d2 = ((pts - pts[c]) ** 2).sum(axis=1)
        order = np.lexsort((pts[:, 1], pts[:, 0], d2))
        members = [c]
        for j in order:
            if len(members) == k:
                break
            if j != c:
                members.append(j)
        clusters.append(np.asarray(members, dtype=np.intp))
    return clusters


def _cover_all_points(
    clusters: list[np.ndarray], centroid_indices: np.ndarray, coords: np.ndarray
) -> list[np.ndarray]:
    """Force-assign any uncovered point to its nearest centroid's cluster."""
    covered = np.zeros(len(coords), dtype=bool)
    for members in clusters:
        covered[members] = True
    for p in np.flatnonzero(~covered):
        cpts = coords[centroid_indices]
        d2 = ((cpts - coords[p]) ** 2).sum(axis=1)
        order = np.lexsort((cpts[:, 1], cpts[:, 0], d2))
        tgt = order[0]
        clusters[tgt] = np.append(clusters[tgt], p)
    return clusters


def idw_weights(
    query_coords, source_coords, k: int, p: float
) -> tuple[np.ndarray, np.ndarray]:
    """Nearest-source indices and normalized inverse-distance weights.

    Returns (idx, w), both (n_query, k_eff) with ``k_eff = min(k, n_source)``.
    Weights are ``1 / d**p`` normalized to sum 1 per query.  A query closer
    than ``COINCIDENT_EPS`` to its nearest source copies that source exactly
    (one-hot weights).
    """
    q = np.asarray(query_coords, dtype=np.float64).reshape(-1, 2)
    s = np.asarray(source_coords, dtype=np.float64).reshape(-1, 2)
    if len(s) == 0:
        raise ValueError("idw_weights: no source points")
    if k < 1:
        raise ValueError("idw_weights: k must be at least 1")
    k_eff = min(k, len(s))
    idx = np.empty((len(q), k_eff), dtype=np.intp)
    w = np.empty((len(q), k_eff))
    src_idx = np.arange(len(s))
    for i, qc in enumerate(q):
        d2 = ((s - qc) ** 2).sum(axis=1)
        order = np.lexsort((s[:, 1], s[:, 0], d2))[:k_eff]
        idx[i] = src_idx[order]
        d = np.sqrt(d2[order])
        if d[0] < COINCIDENT_EPS:
            w[i] = 0.0
            w[i, 0] = 1.0
        else:
            inv = d ** -p
            w[i] = inv / inv.sum()
    return idx, w


def idw_interpolate(query_coords, source_coords, source_features, k: int, p: float):
    """Interpolate per-query features from the k nearest sources.

    ``source_features`` may be an ndarray or a tape Node; the return type
    matches, and in both cases the arithmetic is the identical weighted sum.
    """
    idx, w = idw_weights(query_coords, source_coords, k, p)
    if isinstance(source_features, Node):
        return ad.weighted_gather_rows(source_features, idx, w)
    f = np.asarray(source_features, dtype=np.float64)
    return np.einsum("qk,qkf->qf", w, f[idx], optimize=False)


def set_abstraction(member_features, beta: MlpParams, phi: MlpParams) -> Node:
    """Pool one cluster: shared net per member, column max, second net."""
    feats = member_features if isinstance(member_features, Node) else ad.constant(
        member_features
    )
    if feats.value.shape[0] < 1:
        raise ValueError("set_abstraction on an empty cluster")
    return mlp_forward(phi, ad.max_reduce_rows(mlp_forward(beta, feats)))


# ---------------------------------------------------------------------------
# extractor parameters


@dataclass
class SeaConfig:
    """Structural knobs of the extractor."""

    mode: str = "full"  # full | global-only | local-only
    cluster_size: int | None = None  # None: max(3, ceil(points / clusters))
    interp_neighbors: int = 3
    distance_power: float = 2.0
    level_widths: tuple[int, int] = (64, 128)
    hidden_width: int = 64

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown extractor mode {self.mode!r}")


@dataclass
class SeaParams:
    """All learnable pieces of the extractor plus its structural config."""

    config: SeaConfig
    in_dim: int
    enc_beta: list[MlpParams]
    enc_phi: list[MlpParams]
    dec: list[MlpParams]  # top-down decoder stages; dec[-1] lands on level 0

    def parameters(self):
        params = []
        for mlp in [*self.enc_beta, *self.enc_phi, *self.dec]:
            params.extend(mlp.parameters())
        return params


def make_sea_params(
    in_dim: int, rng: np.random.Generator, config: SeaConfig | None = None
) -> SeaParams:
    """Build extractor parameters for the configured mode.

    The residual sum requires the final decoder stage to emit ``in_dim``
    features, so that width is fixed; the rest follow the configured level
    widths.
    """
    cfg = config or SeaConfig()
    w1, w2 = cfg.level_widths
    h = cfg.hidden_width
    enc_beta, enc_phi, dec = [], [], []
    enc_beta.append(mlp_init([in_dim, h, w1], rng, "sea.enc0.beta"))
    enc_phi.append(mlp_init([w1, h, w1], rng, "sea.enc0.phi"))
    if cfg.mode == "full":
        enc_beta.append(mlp_init([w1, h, w2], rng, "sea.enc1.beta"))
        enc_phi.append(mlp_init([w2, h, w2], rng, "sea.enc1.phi"))
        dec.append(mlp_init([w2 + w1, h, w1], rng, "sea.dec1"))
    dec.append(mlp_init([w1 + in_dim, h, in_dim], rng, "sea.dec0"))
    return SeaParams(cfg, in_dim, enc_beta, enc_phi, dec)


# ---------------------------------------------------------------------------
# per-frame topology planning (pure numpy, no tape)


@dataclass
class FrameTopology:
    """Every structural decision made for one frame's extraction."""

    n: int
    mode: str
    levels: list[LevelSet]
    # decoder stages, top-down; each entry is (source_indices, weights) with
    # indices local to the source level
    interp: list[tuple[np.ndarray, np.ndarray]] = field(default_factory=list)
    cluster_sizes: list[int] = field(default_factory=list)


def _auto_cluster_size(n_points: int, n_clusters: int) -> int:
    return max(3, math.ceil(n_points / n_clusters))


def plan_topology(coords: np.ndarray, cfg: SeaConfig) -> FrameTopology:
    """Choose centroids, cluster memberships, and interpolation weights."""
    n = len(coords)
    if n < 1:
        raise ValueError("plan_topology: no alive agents")
    k, p = cfg.interp_neighbors, cfg.distance_power

    if cfg.mode == "global-only":
        centroid = farthest_point_sampling(coords, 1)
        level = LevelSet(1, coords[centroid], centroid, [np.arange(n, dtype=np.intp)])
        idx = np.zeros((n, 1), dtype=np.intp)
        w = np.ones((n, 1))
        return FrameTopology(n, cfg.mode, [level], [(idx, w)], [n])

    n1, n2 = cluster_counts(n)
    k1 = cfg.cluster_size or _auto_cluster_size(n, n1)
    cent1 = farthest_point_sampling(coords, n1)
    clusters1 = _cover_all_points(knn_group(cent1, coords, k1), cent1, coords)
    level1 = LevelSet(1, coords[cent1], cent1, clusters1)

    if cfg.mode == "local-only":
        idx0, w0 = idw_weights(coords, level1.coords, k, p)
        return FrameTopology(n, cfg.mode, [level1], [(idx0, w0)], [k1])

    k2 = cfg.cluster_size or _auto_cluster_size(n1, n2)
    cent2 = farthest_point_sampling(level1.coords, n2)
    clusters2 = _cover_all_points(
        knn_group(cent2, level1.coords, k2), cent2, level1.coords
    )
    level2 = LevelSet(2, level1.coords[cent2], cent2, clusters2)
    idx1, w1 = idw_weights(level1.coords, level2.coords, k, p)
    idx0, w0 = idw_weights(coords, level1.coords, k, p)
    return FrameTopology(
        n, cfg.mode, [level1, level2], [(idx1, w1), (idx0, w0)], [k1, k2]
    )


# ---------------------------------------------------------------------------
# stacked execution over one or many frames


def _stack_clusters(
    topos: list[FrameTopology], level: int, offsets: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Concatenate every frame's cluster member lists at one level.

    Returns (gather_idx, segment_bounds) where indices are global rows of the
    stacked below-level feature matrix.
    """
    idx_parts = []
    sizes = []
    for topo, off in zip(topos, offsets):
        for members in topo.levels[level].clusters:
            idx_parts.append(members + off)
            sizes.append(len(members))
    gather_idx = np.concatenate(idx_parts)
    bounds = np.concatenate([[0], np.cumsum(sizes)])
    return gather_idx, bounds


def _stack_interp(
    topos: list[FrameTopology], stage: int, src_offsets: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Concatenate per-frame interpolation plans, padding ragged neighbor
    counts with zero-weight repeats of each row's first source."""
    k_max = max(topo.interp[stage][0].shape[1] for topo in topos)
    idx_parts, w_parts = [], []
    for topo, off in zip(topos, src_offsets):
        idx, w = topo.interp[stage]
        if idx.shape[1] < k_max:
            pad = k_max - idx.shape[1]
            idx = np.concatenate([idx, np.repeat(idx[:, :1], pad, axis=1)], axis=1)
            w = np.concatenate([w, np.zeros((len(w), pad))], axis=1)
        idx_parts.append(idx + off)
        w_parts.append(w)
    return np.concatenate(idx_parts), np.concatenate(w_parts)


def _level_counts(topos: list[FrameTopology], level: int) -> np.ndarray:
    return np.asarray([len(t.levels[level].clusters) for t in topos], dtype=np.intp)


def extract_stacked(
    coords_list: list[np.ndarray], features, params: SeaParams
) -> Node:
    """Run the extractor over several frames whose features are stacked
    row-wise into one matrix (ndarray or Node).

    Frame ``i`` owns the rows ``sum(n_0..n_{i-1}) : sum(n_0..n_i)`` of both
    the input and the output.  Coordinates must already be alive-filtered.
    """
    feats = features if isinstance(features, Node) else ad.constant(features)
    ns = np.asarray([len(c) for c in coords_list], dtype=np.intp)
    if feats.value.shape[0] != int(ns.sum()):
        raise ad.ShapeError(
            f"extract_stacked: {feats.value.shape[0]} feature rows for "
            f"{int(ns.sum())} coordinates"
        )
    if feats.value.shape[1] != params.in_dim:
        raise ad.ShapeError(
            f"extract_stacked: feature width {feats.value.shape[1]} != "
            f"extractor input width {params.in_dim}"
        )
    cfg = params.config
    topos = [plan_topology(np.asarray(c, dtype=np.float64), cfg) for c in coords_list]
    offsets0 = np.concatenate([[0], np.cumsum(ns)[:-1]])

    # encoder level 1 (all frames, all clusters, one pass)
    gidx, bounds = _stack_clusters(topos, 0, offsets0)
    pooled = ad.segment_max_rows(
        mlp_forward(params.enc_beta[0], ad.gather_rows(feats, gidx)), bounds
    )
    f1 = mlp_forward(params.enc_phi[0], pooled)
    counts1 = _level_counts(topos, 0)
    offsets1 = np.concatenate([[0], np.cumsum(counts1)[:-1]])

    if cfg.mode == "full":
        gidx2, bounds2 = _stack_clusters(topos, 1, offsets1)
        pooled2 = ad.segment_max_rows(
            mlp_forward(params.enc_beta[1], ad.gather_rows(f1, gidx2)), bounds2
        )
        f2 = mlp_forward(params.enc_phi[1], pooled2)
        counts2 = _level_counts(topos, 1)
        offsets2 = np.concatenate([[0], np.cumsum(counts2)[:-1]])
        idx_s1, w_s1 = _stack_interp(topos, 0, offsets2)
        up1 = ad.weighted_gather_rows(f2, idx_s1, w_s1)
        d1 = mlp_forward(params.dec[0], ad.concat_cols([up1, f1]))
        top_feats = d1
        stage0 = 1
    else:
        top_feats = f1
        stage0 = 0

    idx_s0, w_s0 = _stack_interp(topos, stage0, offsets1)
    up0 = ad.weighted_gather_rows(top_feats, idx_s0, w_s0)
    decoded = mlp_forward(params.dec[-1], ad.concat_cols([up0, feats]))
    return ad.add(decoded, feats)


def sea_extract(frame, params: SeaParams) -> Node:
    """Extract mixed local/global features for every alive agent in a frame.

    Dead agents are dropped before any grouping and cannot influence the
    result; output row ``i`` corresponds to the i-th alive agent in input
    order.  Returns a tape node so losses can differentiate end to end.
    """
    fr = as_frame(frame)
    alive = np.flatnonzero(fr.alive)
    if len(alive) == 0:
        raise ValueError("sea_extract: no alive agents in frame")
    feats = fr.features
    node = feats if isinstance(feats, Node) else ad.constant(feats[alive])
    return extract_stacked([fr.coords[alive]], node, params)


def sea_apply(frame, params: SeaParams) -> np.ndarray:
    """Convenience wrapper returning the extracted features as an array."""
    return sea_extract(frame, params).value


# ---------------------------------------------------------------------------
# topology inspection


def describe_topology(frame, params: SeaParams) -> str:
    """Render the frame's clustering and interpolation plan as plain text."""
    fr = as_frame(frame)
    alive = np.flatnonzero(fr.alive)
    if len(alive) == 0:
        raise ValueError("describe_topology: no alive agents in frame")
    coords = fr.coords[alive]
    topo = plan_topology(coords, params.config)
    lines = [f"mode={topo.mode} n_alive={topo.n}"]
    for level, ksize in zip(topo.levels, topo.cluster_sizes):
        lines.append(
            f"level {level.level}: clusters={len(level.clusters)} cluster_size={ksize}"
        )
        for ci, members in enumerate(level.clusters):
            cx, cy = level.coords[ci]
            lines.append(
                f"  cluster {ci}: centroid={int(level.centroid_indices[ci])} "
                f"at ({cx:.4f}, {cy:.4f}) members={members.tolist()}"
            )
    names = [
        f"level {lv.level} -> level {lv.level - 1}"
        for lv in reversed(topo.levels)
    ]
    for name, (idx, w) in zip(names, topo.interp):
        lines.append(
            f"interpolation {name} (k={params.config.interp_neighbors}, "
            f"p={params.config.distance_power:g}):"
        )
        for qi in range(len(idx)):
            ws = ", ".join(f"{v:.6f}" for v in w[qi])
            lines.append(f"  target {qi}: sources={idx[qi].tolist()} weights=[{ws}]")
    return "\n".join(lines)
