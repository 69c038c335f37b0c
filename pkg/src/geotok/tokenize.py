"""Mesh tokenization: root-node selection, a balanced baseline, and coarsening.

Root-node selection clusters vertices by k-medoids under the anisotropic
edge distance ``D_ij = sqrt(W_ii + W_jj) / -L_ij``. Each Lloyd sweep
assigns every vertex to its nearest root by multi-source shortest paths,
then moves each root to the cluster member with the smallest summed
in-cluster path distance.
"""

import heapq
import json
from collections import deque
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import linalg as sla
from scipy import sparse
from scipy.sparse.csgraph import connected_components, dijkstra

from .errors import ApportionmentError, DomainError, MeshValidationError, NumericError
from .mesh import OperatorSet, cotan_laplacian, edge_graph, normalize_mesh

CLAMP_MODES = ("zero", "exclude")
MAX_MEDOID_CANDIDATES = 512
SWAP_LIMIT = 1024
MULTI_START_LIMIT = 128


@dataclass(frozen=True)
class DistanceGraph:
    """Symmetric nonnegative per-edge distances over (a subset of) mesh edges."""

    edges: np.ndarray
    weights: np.ndarray
    n_vertices: int

    def to_sparse(self):
        # explicit zeros must survive: scipy's csgraph treats stored zeros as edges
        i, j = self.edges[:, 0], self.edges[:, 1]
        n = self.n_vertices
        rows = np.concatenate([i, j])
        cols = np.concatenate([j, i])
        data = np.concatenate([self.weights, self.weights])
        order = np.lexsort((cols, rows))
        rows, cols, data = rows[order], cols[order], data[order]
        indptr = np.searchsorted(rows, np.arange(n + 1))
        return sparse.csr_matrix((data, cols, indptr), shape=(n, n))

    def adjacency(self):
        adj = [[] for _ in range(self.n_vertices)]
        for (i, j), w in zip(self.edges.tolist(), self.weights.tolist()):
            adj[i].append((j, w))
            adj[j].append((i, w))
        return adj

    def components(self):
        _, labels = connected_components(self.to_sparse(), directed=False)
        return labels


@dataclass(frozen=True)
class Partitioning:
    """Root vertices and a vertex-to-patch assignment.

    Patch ``p`` contains ``roots[p]``; roots are sorted by vertex index,
    so a partition with one patch per vertex has the identity assignment.
    """

    roots: np.ndarray
    assignment: np.ndarray
    cost_history: tuple = ()

    def __post_init__(self):
        roots = np.asarray(self.roots, dtype=np.int64)
        assignment = np.asarray(self.assignment, dtype=np.int64)
        p = len(roots)
        if p == 0:
            raise DomainError("a partitioning needs at least one patch")
        if assignment.min() < 0 or assignment.max() >= p:
            raise DomainError(f"assignment values must lie in [0, {p})")
        if roots.min() < 0 or roots.max() >= len(assignment):
            raise DomainError("root index out of range")
        if not np.array_equal(assignment[roots], np.arange(p)):
            raise DomainError("roots[p] must be assigned to patch p")
        if np.bincount(assignment, minlength=p).min() == 0:
            raise DomainError("every patch must be nonempty")
        for name, a in (("roots", roots), ("assignment", assignment)):
            a.setflags(write=False)
            object.__setattr__(self, name, a)

    @property
    def P(self):
        return len(self.roots)

    @property
    def n_vertices(self):
        return len(self.assignment)

    def sizes(self):
        return np.bincount(self.assignment, minlength=self.P)

    def members(self):
        order = np.argsort(self.assignment, kind="stable")
        bounds = np.searchsorted(self.assignment[order], np.arange(self.P + 1))
        return [order[bounds[p]:bounds[p + 1]] for p in range(self.P)]

    def assignment_matrix(self):
        n = self.n_vertices
        return sparse.csr_matrix((np.ones(n), (np.arange(n), self.assignment)), shape=(n, self.P))

    def permuted(self, perm):
        """Carry the partition over to a mesh relabelled by ``perm`` (new k = old perm[k])."""
        perm = np.asarray(perm)
        inv = np.empty_like(perm)
        inv[perm] = np.arange(len(perm))
        return Partitioning(inv[self.roots], self.assignment[perm])

    def patches_connected(self, adjacency):
        """True when every patch induces a connected subgraph of ``adjacency`` (scipy sparse)."""
        adj = adjacency.tocsr()
        same = self.assignment[adj.indices] == np.repeat(self.assignment, np.diff(adj.indptr))
        intra = sparse.csr_matrix((same.astype(float), adj.indices, adj.indptr), shape=adj.shape)
        intra.eliminate_zeros()
        n_comp, _ = connected_components(intra, directed=False)
        return n_comp == self.P

    def to_json(self):
        return {"p": int(self.P), "roots": self.roots.tolist(), "assignment": self.assignment.tolist()}


def save_assignment(path, part):
    Path(path).write_text(json.dumps(part.to_json()), encoding="utf-8")


def load_assignment(path, n_vertices=None):
    """Read an assignment file ``{"p", "roots", "assignment"}``, e.g. exported METIS output."""
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    try:
        p, roots, assignment = int(data["p"]), data["roots"], data["assignment"]
    except (KeyError, TypeError, ValueError) as exc:
        raise DomainError(f"{path}: malformed assignment file ({exc})") from None
    if n_vertices is not None and len(assignment) != n_vertices:
        raise DomainError(f"{path}: assignment has {len(assignment)} entries, mesh has {n_vertices}")
    if len(roots) != p:
        raise DomainError(f"{path}: p={p} but {len(roots)} roots")
    return Partitioning(np.asarray(roots), np.asarray(assignment))


# --------------------------------------------------------------------------
# edge distances


def edge_distances(ops, clamp_mode="exclude"):
    """Per-edge distance ``sqrt(W_ii + W_jj) / -L_ij`` over the off-diagonal support of ``L``.

    Edges with ``-L_ij <= 0`` get distance 0 in ``"zero"`` mode and are
    dropped in ``"exclude"`` mode.
    """
    if clamp_mode not in CLAMP_MODES:
        raise DomainError(f"clamp_mode must be one of {CLAMP_MODES}, got {clamp_mode!r}")
    upper = sparse.triu(ops.L, k=1).tocoo()
    i, j, lij = upper.row.astype(np.int64), upper.col.astype(np.int64), upper.data
    mass = np.asarray(ops.mass)
    neg = -lij
    positive = neg > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        d = np.where(positive, np.sqrt(mass[i] + mass[j]) / np.where(positive, neg, 1.0), 0.0)
    if clamp_mode == "exclude":
        i, j, d = i[positive], j[positive], d[positive]
    order = np.lexsort((j, i))
    edges = np.column_stack([i[order], j[order]])
    return DistanceGraph(edges=edges, weights=d[order], n_vertices=ops.n)


# --------------------------------------------------------------------------
# shortest paths


def nearest_root(adj, roots):
    """Multi-source Dijkstra. Returns ``(dist, label)`` with ties going to the lower root index."""
    n = len(adj)
    dist = np.full(n, np.inf)
    label = np.full(n, -1, dtype=np.int64)
    heap = [(0.0, r, int(v)) for r, v in enumerate(roots)]
    heapq.heapify(heap)
    while heap:
        d, r, v = heapq.heappop(heap)
        if label[v] >= 0:
            continue
        dist[v] = d
        label[v] = r
        for u, w in adj[v]:
            if label[u] < 0:
                nd = d + w
                if nd <= dist[u]:
                    dist[u] = nd
                    heapq.heappush(heap, (nd, r, u))
    return dist, label


def _sssp(graph, source):
    return dijkstra(graph, directed=False, indices=int(source))


def _farthest_point_seeds(graph, start, count, allowed):
    """Greedy farthest-point sampling under path distance; ties go to the lowest index."""
    seeds = [int(start)]
    dist = np.where(allowed, _sssp(graph, start), -np.inf)
    while len(seeds) < count:
        d = np.where(np.isfinite(dist), dist, -np.inf)
        d[seeds] = -np.inf
        nxt = int(np.argmax(d))
        if d[nxt] == -np.inf:
            break
        seeds.append(nxt)
        dist = np.where(allowed, np.minimum(dist, _sssp(graph, nxt)), -np.inf)
    return seeds


def _apportion(sizes, p):
    """Patches per component: at least one each, then largest size-per-patch first."""
    k = len(sizes)
    if p < k:
        raise ApportionmentError(f"{p} patches cannot cover {k} connected components")
    alloc = np.ones(k, dtype=np.int64)
    heap = [(-sizes[c] / 1.0, c) for c in range(k) if sizes[c] > 1]
    heapq.heapify(heap)
    for _ in range(p - k):
        if not heap:
            raise ApportionmentError("more patches requested than vertices")
        _, c = heapq.heappop(heap)
        alloc[c] += 1
        if alloc[c] < sizes[c]:
            heapq.heappush(heap, (-sizes[c] / alloc[c], c))
    return alloc


def _plus_plus_seeds(graph, start, count, rng, allowed):
    """k-medoids++ seeding: each new root is drawn with probability proportional to its distance."""
    seeds = [int(start)]
    dist = _sssp(graph, start)
    while len(seeds) < count:
        w = np.where(allowed & np.isfinite(dist), dist, 0.0)
        w[seeds] = 0.0
        if w.sum() <= 0:
            cand = np.nonzero(allowed)[0]
            cand = cand[~np.isin(cand, seeds)]
            nxt = int(cand[0])
        else:
            nxt = int(rng.choice(len(w), p=w / w.sum()))
        seeds.append(nxt)
        dist = np.minimum(dist, _sssp(graph, nxt))
    return seeds


def _initial_roots(graph, labels, p, start_offset, rng=None):
    """Per-component seeding; farthest-point when ``rng`` is None, else k-medoids++."""
    n_comp = labels.max() + 1
    sizes = np.bincount(labels, minlength=n_comp)
    alloc = _apportion(sizes, p)
    roots = []
    for c in range(n_comp):
        allowed = labels == c
        members = np.nonzero(allowed)[0]
        start = members[start_offset % len(members)]
        if rng is None:
            roots += _farthest_point_seeds(graph, start, int(alloc[c]), allowed)
        else:
            roots += _plus_plus_seeds(graph, start, int(alloc[c]), rng, allowed)
    return roots


def _recenter(graph, assignment, roots, dist):
    """Move each root to the member minimizing the summed in-cluster path distance."""
    p = len(roots)
    order = np.argsort(assignment, kind="stable")
    bounds = np.searchsorted(assignment[order], np.arange(p + 1))
    new_roots = list(roots)
    for c in range(p):
        members = order[bounds[c]:bounds[c + 1]]
        if len(members) <= 1:
            continue
        sub = graph[members][:, members]
        local_root = int(np.searchsorted(members, roots[c]))
        if len(members) <= MAX_MEDOID_CANDIDATES:
            cand = np.arange(len(members))
        else:
            # only the members nearest the current root compete; the root is among them
            cand = np.argsort(dist[members], kind="stable")[:MAX_MEDOID_CANDIDATES]
        d = dijkstra(sub, directed=False, indices=cand)
        total = d.sum(axis=1)
        best = total.min()
        cur = np.nonzero(cand == local_root)[0]
        # stay put on ties so Lloyd reaches a fixpoint
        if len(cur) and total[cur[0]] <= best:
            continue
        new_roots[c] = int(members[cand[int(np.argmin(total))]])
    return new_roots


def _lloyd(graph, adj, roots, max_iters):
    dist, label = nearest_root(adj, roots)
    costs = [float(dist.sum())]
    for _ in range(max_iters):
        new_roots = _recenter(graph, label, roots, dist)
        if new_roots == roots:
            break
        roots = new_roots
        dist, label = nearest_root(adj, roots)
        cost = float(dist.sum())
        if cost > costs[-1] * (1 + 1e-12) + 1e-300:
            raise NumericError(f"Lloyd step increased the assignment cost: {costs[-1]:.17g} -> {cost:.17g}")
        costs.append(cost)
    return roots, label, costs


def _pam_swap(dmat, roots, tol=1e-12):
    """Best-improvement medoid swaps on a dense distance matrix until no swap helps."""
    n = dmat.shape[0]
    p = len(roots)
    roots = list(roots)
    while True:
        dr = dmat[:, roots]
        nearest = np.argmin(dr, axis=1)
        d1 = dr[np.arange(n), nearest]
        d2 = np.partition(dr, 1, axis=1)[:, 1] if p > 1 else np.full(n, np.inf)
        keep = np.minimum(dmat, d1[None, :])
        lose = np.minimum(dmat, d2[None, :])
        onehot = np.zeros((n, p))
        onehot[np.arange(n), nearest] = 1.0
        # totals[v, c]: cost after replacing root c by vertex v
        totals = keep.sum(axis=1)[:, None] + (lose - keep) @ onehot
        totals[roots, :] = np.inf
        v, c = np.unravel_index(np.argmin(totals), totals.shape)
        if not totals[v, c] < d1.sum() * (1 - tol):
            return roots
        roots[c] = int(v)


def _swap_per_component(dmat, labels, roots):
    """PAM swaps inside each connected component, so patch counts per component are kept."""
    out = list(roots)
    for c in np.unique(labels):
        members = np.flatnonzero(labels == c)
        slots = [i for i, r in enumerate(out) if labels[r] == c]
        local = [int(np.searchsorted(members, out[i])) for i in slots]
        local = _pam_swap(dmat[np.ix_(members, members)], local)
        for i, v in zip(slots, local):
            out[i] = int(members[v])
    return out


def _canonical(roots, label, costs=()):
    order = np.argsort(roots, kind="stable")
    relabel = np.empty(len(roots), dtype=np.int64)
    relabel[order] = np.arange(len(roots))
    return Partitioning(np.asarray(roots)[order], relabel[label], tuple(costs))


def root_node_partition(dg, p_count, seed=0, max_iters=10, n_init=None, swap_limit=SWAP_LIMIT):
    """k-medoid clustering of the distance graph into ``p_count`` connected patches.

    Roots are seeded by farthest-point sampling and refined by Lloyd
    sweeps until a fixpoint or ``max_iters``. On graphs with at most
    ``swap_limit`` vertices, PAM-style medoid swaps then escape Lloyd's
    local minima. ``n_init`` seedings are run and the lowest-cost result
    is kept: farthest-point from vertex ``seed`` first, then k-medoids++
    draws from a generator seeded with ``seed``. By default 8 seedings
    are tried on graphs with at most ``MULTI_START_LIMIT`` vertices and one
    elsewhere.
    """
    n = dg.n_vertices
    if not 1 <= p_count <= n:
        raise DomainError(f"patch count must satisfy 1 <= P <= N={n}, got {p_count}")
    adj = dg.adjacency()
    graph = dg.to_sparse()
    labels = dg.components()
    if p_count == n:
        return _canonical(list(range(n)), np.arange(n), (0.0,))
    rng = np.random.default_rng(seed)
    dmat = dijkstra(graph, directed=False) if n <= swap_limit else None
    if n_init is None:
        n_init = 8 if n <= MULTI_START_LIMIT else 1
    best = None
    seen = set()
    for attempt in range(max(1, n_init)):
        if attempt == 0:
            roots = _initial_roots(graph, labels, p_count, int(seed))
        else:
            roots = _initial_roots(graph, labels, p_count, int(rng.integers(0, n)), rng)
        key = tuple(sorted(roots))
        if key in seen:
            continue
        seen.add(key)
        roots, label, costs = _lloyd(graph, adj, roots, max_iters)
        if dmat is not None:
            swapped = _swap_per_component(dmat, labels, roots)
            if swapped != roots:
                roots = swapped
                dist, label = nearest_root(adj, roots)
                costs.append(float(dist.sum()))
        if best is None or costs[-1] < best[2][-1]:
            best = (roots, label, costs)
    return _canonical(*best)


def assignment_cost(dg, roots):
    dist, _ = nearest_root(dg.adjacency(), list(roots))
    return float(dist.sum())


# --------------------------------------------------------------------------
# baseline


def _connected_without(members_set, removed, adj_lists):
    """Whether ``members_set - {removed}`` stays connected."""
    rest = members_set - {removed}
    if not rest:
        return False
    start = next(iter(rest))
    seen = {start}
    queue = deque([start])
    while queue:
        v = queue.popleft()
        for u in adj_lists[v]:
            if u in rest and u not in seen:
                seen.add(u)
                queue.append(u)
    return len(seen) == len(rest)


def baseline_partition(mesh, p_count, seed=0, tolerance=0.2, max_moves=None):
    """Balanced BFS-growth partition, a stand-in for METIS-style baselines.

    Seeds come from farthest-point sampling on the edge-length graph. The
    smallest patch with an open frontier always grows next, and a final
    boundary-exchange pass moves vertices from oversized to undersized
    neighbouring patches while keeping every patch connected.
    """
    n = mesh.n_vertices
    if not 1 <= p_count <= n:
        raise DomainError(f"patch count must satisfy 1 <= P <= N={n}, got {p_count}")
    eg = edge_graph(mesh)
    adj_w = eg.neighbors()
    adj = [sorted(u for u, _ in nbrs) for nbrs in adj_w]
    _, comp = connected_components(eg.to_sparse(), directed=False)
    rng = np.random.default_rng(seed)
    roots = _initial_roots(eg.to_sparse(), comp, p_count, int(rng.integers(0, n)) if seed else 0)
    p = len(roots)

    label = np.full(n, -1, dtype=np.int64)
    size = np.zeros(p, dtype=np.int64)
    frontier = [deque() for _ in range(p)]
    for k, r in enumerate(roots):
        label[r] = k
        size[k] = 1
        frontier[k].extend(adj[r])
    heap = [(1, k) for k in range(p)]
    heapq.heapify(heap)
    while heap:
        s, k = heapq.heappop(heap)
        q = frontier[k]
        while q and label[q[0]] >= 0:
            q.popleft()
        if not q:
            continue
        v = q.popleft()
        label[v] = k
        size[k] += 1
        q.extend(u for u in adj[v] if label[u] < 0)
        heapq.heappush(heap, (size[k], k))

    _balance(label, size, adj, comp, set(roots), tolerance, max_moves or 20 * n)
    return _canonical(roots, label)


def _balance(label, size, adj, comp, fixed, tolerance, max_moves):
    """Move boundary vertices along chains of patches until sizes fall within tolerance.

    An undersized patch pulls one vertex from a neighbour, which pulls one
    from its neighbour, and so on back to a patch with surplus, so only the
    two chain ends change size. Every move keeps the donor connected.
    """
    p = len(size)
    comp_of_patch = np.zeros(p, dtype=np.int64)
    comp_of_patch[label] = comp
    target = np.zeros(p)
    for c in range(comp.max() + 1):
        ks = comp_of_patch == c
        target[ks] = (comp == c).sum() / ks.sum()
    lo = np.ceil((1 - tolerance) * target - 1e-9)
    hi = np.floor((1 + tolerance) * target + 1e-9)
    members = [set() for _ in range(p)]
    for v, k in enumerate(label):
        members[k].add(int(v))

    def donation(src, dst):
        """A vertex of ``src`` adjacent to ``dst`` whose removal keeps ``src`` connected."""
        cands = sorted({u for v in members[dst] for u in adj[v] if label[u] == src})
        for u in cands:
            if u not in fixed and _connected_without(members[src], u, adj):
                return u
        return None

    def neighbours(k):
        return sorted({int(label[u]) for v in members[k] for u in adj[v]} - {k})

    def move(v, src, dst):
        members[src].discard(v)
        members[dst].add(v)
        label[v] = dst
        size[src] -= 1
        size[dst] += 1

    def augment(k, sink):
        """Route one vertex into (sink) or out of (not sink) patch k. Returns success."""
        blocked = set()
        for _ in range(8):
            chain = find_chain(k, sink, blocked)
            if chain is None:
                return False
            # the move touching k goes first; each donor vertex is picked afresh as the chain is applied
            done = []
            for node, prev in chain:
                src, dst = (node, prev) if sink else (prev, node)
                u = donation(src, dst)
                if u is None:
                    for v, s, d in reversed(done):
                        move(v, d, s)
                    blocked.add((node, prev))
                    break
                move(u, src, dst)
                done.append((u, src, dst))
            else:
                return True
        return False

    def find_chain(k, sink, blocked):
        parent = {k: None}
        queue = deque([k])
        while queue:
            a = queue.popleft()
            for b in neighbours(a):
                if b in parent or (b, a) in blocked:
                    continue
                if (donation(b, a) if sink else donation(a, b)) is None:
                    continue
                parent[b] = a
                ok_end = size[b] - 1 >= lo[b] and size[b] > size[k] + 1 if sink else \
                    size[b] + 1 <= hi[b] and size[b] + 1 < size[k]
                if ok_end:
                    chain = []
                    node = b
                    while parent[node] is not None:
                        chain.append((node, parent[node]))
                        node = parent[node]
                    return chain[::-1]
                queue.append(b)
        return None

    moves = 0
    while moves < max_moves:
        under = [int(k) for k in np.argsort(size, kind="stable") if size[k] < lo[k]]
        over = [int(k) for k in np.argsort(-size, kind="stable") if size[k] > hi[k]]
        progressed = any(augment(k, sink=True) for k in under[:1]) or \
            any(augment(k, sink=False) for k in over[:1])
        if not progressed:
            for k in under[1:] + over[1:]:
                if augment(k, sink=size[k] < lo[k]):
                    progressed = True
                    break
        if not progressed:
            break
        moves += 1


# --------------------------------------------------------------------------
# coarsening and transfer


def coarsen_operators(part, ops):
    """Galerkin coarsening ``A^T L A`` and ``A^T W A`` with the 0/1 assignment matrix ``A``."""
    if part.n_vertices != ops.n:
        raise DomainError(f"partition covers {part.n_vertices} vertices, operators have {ops.n}")
    A = part.assignment_matrix()
    Lc = (A.T @ ops.L @ A).tocsr()
    Lc = (0.5 * (Lc + Lc.T)).tocsr()
    mass_c = np.bincount(part.assignment, weights=np.asarray(ops.mass), minlength=part.P)
    return OperatorSet(L=Lc, mass=mass_c)


def prolongate(part, coarse):
    """Piecewise-constant lift of a patch field to vertices."""
    coarse = np.asarray(coarse)
    if coarse.shape[0] != part.P:
        raise DomainError(f"coarse field has {coarse.shape[0]} rows, partition has {part.P} patches")
    return coarse[part.assignment]


def patch_average(part, node_feats):
    """Unweighted mean of node features over each patch."""
    x = np.asarray(node_feats, dtype=np.float64)
    if x.shape[0] != part.n_vertices:
        raise DomainError(f"features have {x.shape[0]} rows, partition has {part.n_vertices} vertices")
    flat = x.reshape(len(x), -1)
    sums = np.zeros((part.P, flat.shape[1]))
    np.add.at(sums, part.assignment, flat)
    out = sums / part.sizes()[:, None]
    return out.reshape((part.P,) + x.shape[1:])


# --------------------------------------------------------------------------
# spectral preservation audit


def _all_eigenpairs(ops, k):
    """The ``k`` smallest generalized eigenpairs, dense (coarse or small operators)."""
    from .spectral import SpectralBasis, eigendecompose

    if k < ops.n and ops.n > 2 * k + 64:
        return eigendecompose(ops, k)
    lam, phi = sla.eigh(ops.L.toarray(), np.diag(np.asarray(ops.mass)))
    return SpectralBasis(np.maximum(lam[:k], 0.0), phi[:, :k], np.asarray(ops.mass, dtype=np.float64))


def spectral_preservation_report(mesh, part, K=8, ts=None, fine_basis=None, return_fields=False):
    """How well a partition's Galerkin-coarsened Laplacian reproduces the fine spectrum.

    Returns a dict with per-eigenfunction aligned errors, principal angles
    between the first ``K`` nonzero fine eigenfunctions and the prolongated
    coarse ones, and the relative HKS reconstruction error. Both HKS use
    ``min(P, N)`` eigenpairs. With ``return_fields`` the result is
    ``(report, fine, coarse)`` where the two ``N x K`` arrays hold the fine
    and the sign-aligned prolongated coarse eigenfunctions.
    """
    from .spectral import compute_hks, log_time_samples

    if K > part.P:
        raise DomainError(f"K={K} exceeds the patch count P={part.P}")
    if part.n_vertices != mesh.n_vertices:
        raise DomainError("partition and mesh disagree on vertex count")
    ts = log_time_samples() if ts is None else np.asarray(ts)
    mesh = normalize_mesh(mesh)
    ops = cotan_laplacian(mesh)
    n_zero, _ = connected_components(abs(ops.L), directed=False)
    k_spec = min(part.P, mesh.n_vertices)
    if K + n_zero > k_spec:
        raise DomainError(f"K={K} plus {n_zero} null modes exceeds the coarse spectrum size {k_spec}")

    fine = fine_basis if fine_basis is not None and fine_basis.k_eig >= k_spec else _all_eigenpairs(ops, k_spec)
    fine = fine.truncated(k_spec)
    coarse_ops = coarsen_operators(part, ops)
    try:
        coarse = _all_eigenpairs(coarse_ops, k_spec)
    except (np.linalg.LinAlgError, sla.LinAlgError) as exc:
        raise NumericError(f"coarse eigensolve failed: {exc}") from None

    w = fine.mass
    sel = slice(n_zero, n_zero + K)
    phi_f = fine.eigenvectors[:, sel]
    phi_c = prolongate(part, coarse.eigenvectors[:, sel])

    def wnorm(a):
        return np.sqrt(np.einsum("i,ij,ij->j", w, a, a))

    ref = wnorm(phi_f)
    aligned = np.minimum(wnorm(phi_c - phi_f), wnorm(phi_c + phi_f)) / ref

    m = phi_f.T @ (w[:, None] * phi_c)
    cosines = np.clip(np.linalg.svd(m, compute_uv=False), 0.0, 1.0)
    angles = np.sort(np.arccos(cosines))

    hks_f = compute_hks(fine, ts)
    hks_c = prolongate(part, compute_hks(coarse, ts))
    hks_err = float(np.linalg.norm(hks_c - hks_f) / np.linalg.norm(hks_f))

    report = {
        "n_vertices": int(mesh.n_vertices),
        "P": int(part.P),
        "K": int(K),
        "n_eigenpairs": int(k_spec),
        "fine_eigenvalues": fine.eigenvalues[sel].tolist(),
        "coarse_eigenvalues": coarse.eigenvalues[sel].tolist(),
        "aligned_errors": aligned.tolist(),
        "principal_angles": angles.tolist(),
        "mean_principal_angle": float(angles.mean()),
        "max_principal_angle": float(angles.max()),
        "hks_relative_error": hks_err,
        "time_samples": [float(t) for t in ts],
    }
    if not return_fields:
        return report
    signs = np.where(np.einsum("i,ij,ij->j", w, phi_f, phi_c) < 0, -1.0, 1.0)
    return report, phi_f, phi_c * signs


def build_partition(mesh, p_count, method="rns", seed=0, ops=None, clamp_mode="exclude", max_iters=10,
                    assignment_path=None):
    """Partition a (normalized) mesh with ``"rns"``, ``"baseline"`` or ``"import"``."""
    if method == "rns":
        ops = ops if ops is not None else cotan_laplacian(mesh)
        return root_node_partition(edge_distances(ops, clamp_mode), p_count, seed=seed, max_iters=max_iters)
    if method == "baseline":
        return baseline_partition(mesh, p_count, seed=seed)
    if method == "import":
        if assignment_path is None:
            raise DomainError("method 'import' needs an assignment file")
        part = load_assignment(assignment_path, mesh.n_vertices)
        if not part.patches_connected(edge_graph(mesh).to_sparse()):
            raise MeshValidationError(f"{assignment_path}: imported patches are not connected")
        return part
    raise DomainError(f"unknown partition method {method!r}")
