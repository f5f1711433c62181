"""Connected components of ball configurations: union-find labeling with
cheap local repair after deletions, the stabilized local component count,
single-ball increments, and the explicit upper/lower bounds on it."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .geometry import Box, MarkedBall, dilate, unit_ball_volume
from .model_core import Configuration


class LambdaNotInWindow(ValueError):
    pass


class NestingViolation(ValueError):
    pass


# ---------------------------------------------------------------------------
# Union-find labeling
# ---------------------------------------------------------------------------


class ClusterLabeling:
    """Union-find over configuration slots plus the intersection graph.

    Union-find answers "which component" in near-constant time; the stored
    adjacency lists make deletions cheap: removal re-clusters only the
    deleted ball's component, by graph search, with no geometry queries.
    """

    def __init__(self, cfg: Optional[Configuration] = None, capacity: int = 64):
        self.parent = list(range(capacity))
        self.adj: dict[int, list[int]] = {}
        self.n_components = 0
        if cfg is not None:
            self.rebuild(cfg)

    def _ensure(self, slot: int) -> None:
        while len(self.parent) <= slot:
            self.parent.extend(range(len(self.parent), 2 * len(self.parent)))

    def find(self, i: int) -> int:
        parent = self.parent
        root = i
        while parent[root] != root:
            root = parent[root]
        while parent[i] != root:  # path compression
            parent[i], i = root, parent[i]
        return root

    def union(self, i: int, j: int) -> bool:
        ri, rj = self.find(i), self.find(j)
        if ri == rj:
            return False
        self.parent[rj] = ri
        self.n_components -= 1
        return True

    def rebuild(self, cfg: Configuration) -> None:
        """Recompute labeling and adjacency from scratch."""
        ids = cfg.active_ids()
        if ids:
            self._ensure(max(ids))
        for i in ids:
            self.parent[i] = i
        self.n_components = len(ids)
        self.adj = _adjacency(cfg)
        for i, nbrs in self.adj.items():
            for j in nbrs:
                self.union(i, j)

    def roots(self, cfg: Configuration) -> set[int]:
        return {self.find(i) for i in cfg.active_ids()}

    def members(self, cfg: Configuration, root: int) -> list[int]:
        root = self.find(root)
        return [i for i in cfg.active_ids() if self.find(i) == root]

    def component_sizes(self, cfg: Configuration) -> dict[int, int]:
        sizes: dict[int, int] = {}
        for i in cfg.active_ids():
            r = self.find(i)
            sizes[r] = sizes.get(r, 0) + 1
        return sizes

    # -- incremental updates -------------------------------------------------

    def insertion_increment(self, cfg: Configuration, center, radius) -> tuple[int, list[int]]:
        """Component-count change if B(center, radius) were added, plus the
        slots it would intersect.  Does not mutate."""
        hits = cfg.intersectors(center, radius)
        if not hits:
            return 1, hits
        n_roots = len({self.find(i) for i in hits})
        return 1 - n_roots, hits

    def apply_insertion(self, slot: int, hits: list[int]) -> None:
        """Register `slot` (already added to the configuration) and union it
        with the balls it intersects."""
        self._ensure(slot)
        self.parent[slot] = slot
        self.n_components += 1
        nbrs = [j for j in hits if j != slot]
        self.adj[slot] = nbrs
        for j in nbrs:
            self.adj[j].append(slot)
            self.union(slot, j)

    def removal_split(self, cfg: Configuration, slot: int) -> list[list[int]]:
        """Sub-components of (component of slot) minus the ball itself,
        computed without mutating.  Every sub-component is adjacent to the
        removed ball, so graph search from its neighbors (avoiding it) finds
        them all; their count m gives the re-insertion increment 1 - m."""
        adj = self.adj
        seen = {slot}
        groups: list[list[int]] = []
        for start in adj[slot]:
            if start in seen:
                continue
            group = [start]
            seen.add(start)
            stack = [start]
            while stack:
                v = stack.pop()
                for w in adj[v]:
                    if w not in seen:
                        seen.add(w)
                        group.append(w)
                        stack.append(w)
            groups.append(group)
        return groups

    def apply_removal(self, slot: int, groups: list[list[int]]) -> None:
        """Commit a removal previously analyzed by removal_split.  Call after
        deleting the slot from the configuration."""
        for j in self.adj.pop(slot):
            self.adj[j].remove(slot)
        self.parent[slot] = slot
        for grp in groups:
            head = grp[0]
            for i in grp:
                self.parent[i] = head
        self.n_components += len(groups) - 1


# ---------------------------------------------------------------------------
# Component counting and local counts
# ---------------------------------------------------------------------------


def count_components(cfg: Configuration) -> int:
    """Number of connected components of the ball intersection graph."""
    if cfg.n == 0:
        return 0
    return ClusterLabeling(cfg).n_components


def _adjacency(cfg: Configuration) -> dict[int, list[int]]:
    ids = cfg.active_ids()
    adj: dict[int, list[int]] = {i: [] for i in ids}
    if len(ids) <= 48:  # one vectorized pairwise pass beats per-ball queries
        arr = np.asarray(ids, dtype=np.intp)
        c = cfg.centers[arr]
        r = cfg.radii[arr]
        diff = c[:, None, :] - c[None, :, :]
        d2 = np.einsum("ijx,ijx->ij", diff, diff)
        rsum = r[:, None] + r[None, :]
        hit = d2 <= rsum * rsum
        for a, b in zip(*np.nonzero(np.triu(hit, k=1))):
            i, j = int(arr[a]), int(arr[b])
            adj[i].append(j)
            adj[j].append(i)
        return adj
    for i in ids:
        for j in cfg.intersectors(cfg.centers[i], float(cfg.radii[i])):
            if j > i:
                adj[i].append(j)
                adj[j].append(i)
    return adj


def _count_on_subset(adj: dict[int, list[int]], subset: set[int]) -> int:
    seen: set[int] = set()
    comps = 0
    for start in subset:
        if start in seen:
            continue
        comps += 1
        stack = [start]
        seen.add(start)
        while stack:
            v = stack.pop()
            for w in adj[v]:
                if w in subset and w not in seen:
                    seen.add(w)
                    stack.append(w)
    return comps


@dataclass
class LocalCCResult:
    """Stabilized local component count and the box witnessing stabilization."""

    value: int
    stabilization_box: Box


def local_cc(
    cfg: Configuration,
    box: Box,
    step: Optional[float] = None,
    adjacency: Optional[dict] = None,
) -> LocalCCResult:
    """Local number of connected components attached to `box`.

    Evaluates c(D) = ncc(balls in D) - ncc(balls in D minus box) along a
    growing box sequence until D swallows the whole stored configuration;
    returns the final (limiting) value and the first probe box from which
    c stayed constant.
    """
    if not cfg.window.contains_box(box):
        raise LambdaNotInWindow("probe box must sit inside the window")
    ids = cfg.active_ids()
    if not ids:
        return LocalCCResult(0, box)
    arr = np.asarray(ids, dtype=np.intp)
    centers = cfg.centers[arr]
    radii = cfg.radii[arr]
    if step is None:
        step = max(1.0, float(np.max(radii)))
    adj = _adjacency(cfg) if adjacency is None else adjacency
    target = Box(
        np.minimum(np.min(centers - radii[:, None], axis=0), box.lo),
        np.maximum(np.max(centers + radii[:, None], axis=0), box.hi),
    )
    in_box = box.contains_points(centers)
    values: list[int] = []
    probes: list[Box] = []
    k = 0
    while True:
        probe = dilate(box, k * step)
        in_probe = probe.contains_points(centers)
        whole = {int(arr[t]) for t in np.flatnonzero(in_probe)}
        outer = {int(arr[t]) for t in np.flatnonzero(in_probe & ~in_box)}
        values.append(_count_on_subset(adj, whole) - _count_on_subset(adj, outer))
        probes.append(probe)
        if probe.contains_box(target):
            break
        k += 1
    final = values[-1]
    first = len(values) - 1
    while first > 0 and values[first - 1] == final:
        first -= 1
    return LocalCCResult(final, probes[first])


def cc_increment(
    cfg: Configuration,
    ball: MarkedBall,
    labeling: Optional[ClusterLabeling] = None,
) -> int:
    """Change in component count if `ball` were inserted: one minus the
    number of distinct components it touches.  At most +1 always."""
    if not cfg.window.contains_point(ball.center):
        raise ValueError("ball center outside window")
    if labeling is None:
        labeling = ClusterLabeling(cfg)
    delta, _ = labeling.insertion_increment(cfg, ball.center, ball.radius)
    return delta


def compatibility_offset(cfg: Configuration, inner: Box, outer: Box) -> int:
    """Difference of local component counts for nested boxes; depends only on
    the balls outside the inner box."""
    if not outer.contains_box(inner):
        raise NestingViolation("inner box must sit inside outer box")
    if not cfg.window.contains_box(outer):
        raise NestingViolation("outer box must sit inside the window")
    adj = _adjacency(cfg)
    return (
        local_cc(cfg, outer, adjacency=adj).value
        - local_cc(cfg, inner, adjacency=adj).value
    )


@dataclass
class BoundsReport:
    upper_ok: bool
    lower_ok: bool
    k_const: float
    lower_vacuous: bool
    value: int


def check_bounds(cfg: Configuration, box: Box, r0: float) -> BoundsReport:
    """Audit the two explicit bounds on the local component count.

    Upper: at most the number of centers in the box.  Lower: at least
    K - (centers in the dilated annulus), K = 1 - |box + B(0, r0+2)| / v_d,
    valid when every ball centered in the box has radius <= r0 (else the
    lower check is vacuous and flagged).
    """
    value = local_cc(cfg, box).value
    n_in = cfg.count_in(box)
    upper_ok = value <= n_in
    big = dilate(box, r0 + 2.0)
    d = cfg.window.dimension
    k_const = 1.0 - big.volume / unit_ball_volume(d)
    vacuous = False
    for slot in cfg.active_ids():
        if box.contains_point(cfg.centers[slot]) and cfg.radii[slot] > r0:
            vacuous = True
            break
    if vacuous:
        lower_ok = True
    else:
        annulus = cfg.count_in(big) - n_in
        lower_ok = value >= k_const - annulus
    return BoundsReport(upper_ok, lower_ok, k_const, vacuous, value)


# ---------------------------------------------------------------------------
# Component statistics
# ---------------------------------------------------------------------------


def far_left_slot(cfg: Configuration, members: list[int]) -> int:
    """Ball of a component with minimal first coordinate; ties broken by the
    remaining coordinates, then radius, then slot id."""
    def key(slot):
        return (*[float(v) for v in cfg.centers[slot]], float(cfg.radii[slot]), slot)

    return min(members, key=key)


@dataclass
class ComponentStats:
    sizes: list[int]
    largest_size: int
    largest_volume_fraction: float
    spanning: bool
    leftmost_slots: list[int]


def component_stats(cfg: Configuration, grid_per_axis: int = 48) -> ComponentStats:
    """Sizes, largest-component volume fraction (grid probe), spanning
    indicator, and the far-left ball of each component."""
    if cfg.n == 0:
        return ComponentStats([], 0, 0.0, False, [])
    lab = ClusterLabeling(cfg)
    groups: dict[int, list[int]] = {}
    for i in cfg.active_ids():
        groups.setdefault(lab.find(i), []).append(i)
    comps = sorted(groups.values(), key=len, reverse=True)
    sizes = [len(c) for c in comps]
    leftmost = [far_left_slot(cfg, c) for c in comps]

    largest = comps[0]
    w = cfg.window
    d = w.dimension
    axes = [np.linspace(w.lo[k], w.hi[k], grid_per_axis) for k in range(d)]
    pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, d)
    covered = np.zeros(len(pts), dtype=bool)
    for slot in largest:
        diff = pts - cfg.centers[slot]
        r = cfg.radii[slot]
        covered |= np.einsum("ij,ij->i", diff, diff) <= r * r
    frac = float(np.mean(covered))

    spanning = False
    for comp in comps:
        ids = np.asarray(comp, dtype=np.intp)
        lo_touch = cfg.centers[ids] - cfg.radii[ids][:, None] <= w.lo
        hi_touch = cfg.centers[ids] + cfg.radii[ids][:, None] >= w.hi
        if np.any(np.any(lo_touch, axis=0) & np.any(hi_touch, axis=0)):
            spanning = True
            break
    return ComponentStats(sizes, sizes[0], frac, spanning, leftmost)
