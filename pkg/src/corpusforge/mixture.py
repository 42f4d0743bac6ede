"""Anchor-plus-patch mixture building: per-source dedup and decontamination,
seeded k-means over embeddings, proportional cluster budgets, and deterministic
intra-cluster sampling."""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

from .client import EmbedRequest, ModelClient
from .dedup import NGramIndex, decontaminate, exact_dedup
from .records import Record, StageManifest

SAMPLING_MODES = ("difficulty_priority", "random")


class MixtureError(ValueError):
    pass


class InfeasibleBudget(MixtureError):
    """A requested budget exceeds what a pool can supply."""


@dataclass
class Cluster:
    id: int
    centroid: np.ndarray
    member_ids: list = field(default_factory=list)
    budget: int = 0


@dataclass(frozen=True)
class PatchSpec:
    source: str
    budget: int


@dataclass
class MixturePlan:
    """Declarative mixture: one anchor source taken whole, plus budgeted patches."""

    anchor: str
    patches: list[PatchSpec] = field(default_factory=list)
    n_clusters: int = 0  # 0 means ceil(sqrt(N/2)) per source
    sampling: str = "difficulty_priority"
    seed: int = 0
    difficulty_proxy: str = "token_count"
    embedding_dim: int = 0  # needed only when embedding via client

    def validate(self) -> "MixturePlan":
        if not self.anchor:
            raise MixtureError("plan needs an anchor source")
        if self.sampling not in SAMPLING_MODES:
            raise MixtureError(f"sampling must be one of {SAMPLING_MODES}, got {self.sampling!r}")
        if self.difficulty_proxy != "token_count":
            raise MixtureError(f"unsupported difficulty proxy {self.difficulty_proxy!r}")
        for patch in self.patches:
            if patch.budget < 0:
                raise MixtureError(f"patch {patch.source!r} has negative budget")
        return self

    def to_obj(self) -> dict[str, Any]:
        return {
            "anchor": self.anchor,
            "patches": [{"source": p.source, "budget": p.budget} for p in self.patches],
            "n_clusters": self.n_clusters,
            "sampling": self.sampling,
            "seed": self.seed,
            "difficulty_proxy": self.difficulty_proxy,
            "embedding_dim": self.embedding_dim,
        }


def load_plan(path: str | Path) -> MixturePlan:
    """Read a mixture plan from JSON or YAML."""
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    if path.suffix in (".yaml", ".yml"):
        import yaml

        obj = yaml.safe_load(text)
    else:
        obj = json.loads(text)
    anchor = obj.get("anchor")
    if isinstance(anchor, dict):
        if not anchor.get("take_all", True):
            raise MixtureError("the anchor is always taken in full")
        anchor = anchor.get("source")
    patches = [PatchSpec(str(p["source"]), int(p["budget"])) for p in obj.get("patches", [])]
    return MixturePlan(
        anchor=str(anchor or ""),
        patches=patches,
        n_clusters=int(obj.get("n_clusters", 0)),
        sampling=obj.get("sampling", "difficulty_priority"),
        seed=int(obj.get("seed", 0)),
        difficulty_proxy=obj.get("difficulty_proxy", "token_count"),
        embedding_dim=int(obj.get("embedding_dim", 0)),
    ).validate()


def default_n_clusters(pool_size: int) -> int:
    return max(1, math.ceil(math.sqrt(pool_size / 2)))


# --- k-means ---


def kmeans_plus_plus(vectors: np.ndarray, n_clusters: int, rng: np.random.Generator) -> np.ndarray:
    """Standard seeded k-means++ initialization."""
    n = vectors.shape[0]
    centroids = np.empty((n_clusters, vectors.shape[1]), dtype=np.float64)
    first = int(rng.integers(n))
    centroids[0] = vectors[first]
    d2 = ((vectors - centroids[0]) ** 2).sum(axis=1)
    for j in range(1, n_clusters):
        total = d2.sum()
        if total <= 0.0:
            idx = int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=d2 / total))
        centroids[j] = vectors[idx]
        d2 = np.minimum(d2, ((vectors - centroids[j]) ** 2).sum(axis=1))
    return centroids


def assign_points(vectors: np.ndarray, centroids: np.ndarray, chunk: int = 4096) -> np.ndarray:
    """Nearest-centroid assignment; ties go to the lowest cluster id."""
    n = vectors.shape[0]
    out = np.empty(n, dtype=np.int64)
    for lo in range(0, n, chunk):
        hi = min(lo + chunk, n)
        # exact squared distances; argmin picks the first (lowest id) minimum
        diff = vectors[lo:hi, None, :] - centroids[None, :, :]
        out[lo:hi] = (diff**2).sum(axis=2).argmin(axis=1)
    return out


def update_centroids(
    vectors: np.ndarray, assignments: np.ndarray, centroids: np.ndarray
) -> np.ndarray:
    """Means of assigned points; empty clusters keep their previous centroid."""
    new = centroids.copy()
    for j in range(centroids.shape[0]):
        members = vectors[assignments == j]
        if len(members):
            new[j] = members.mean(axis=0)
    return new


def kmeans(
    vectors: Sequence[Sequence[float]] | np.ndarray,
    n_clusters: int,
    seed: int = 0,
    max_iters: int = 100,
    tol: float = 1e-6,
    ids: Sequence | None = None,
    initial_centroids: np.ndarray | None = None,
) -> list[Cluster]:
    """Seeded k-means++ plus Lloyd iterations until centroid movement < tol.

    Deterministic for a fixed (vectors, n_clusters, seed). member_ids carry the
    given ids, or positional indices when ids is None.
    """
    arr = np.asarray(vectors, dtype=np.float64)
    if arr.ndim != 2:
        raise MixtureError("vectors must be a 2-D array of equal-length rows")
    n = arr.shape[0]
    if n_clusters < 1:
        raise MixtureError(f"n_clusters must be >= 1, got {n_clusters}")
    if n_clusters > n:
        raise MixtureError(f"n_clusters {n_clusters} exceeds the {n} available vectors")
    if ids is not None and len(ids) != n:
        raise MixtureError("ids length does not match vectors")
    rng = np.random.default_rng(seed)
    centroids = (
        np.array(initial_centroids, dtype=np.float64, copy=True)
        if initial_centroids is not None
        else kmeans_plus_plus(arr, n_clusters, rng)
    )
    if centroids.shape != (n_clusters, arr.shape[1]):
        raise MixtureError("initial centroids have the wrong shape")
    for _ in range(max_iters):
        assignments = assign_points(arr, centroids)
        new_centroids = update_centroids(arr, assignments, centroids)
        movement = float(np.sqrt(((new_centroids - centroids) ** 2).sum(axis=1)).max())
        centroids = new_centroids
        if movement < tol:
            break
    assignments = assign_points(arr, centroids)
    id_list = list(ids) if ids is not None else list(range(n))
    clusters = [Cluster(id=j, centroid=centroids[j]) for j in range(n_clusters)]
    for idx, j in enumerate(assignments):
        clusters[j].member_ids.append(id_list[idx])
    return clusters


# --- budget allocation ---


def allocate_budget(clusters: list[Cluster], total_budget: int) -> list[Cluster]:
    """Proportional-to-size allocation with largest-remainder rounding.

    No cluster gets more than its size; overfull quotas are capped and the
    shortfall is redistributed proportionally among uncapped clusters.
    Remainder ties break toward the smaller integer floor, then the lower
    cluster id, which biases leftover units toward otherwise-empty clusters.
    Budgets sum to total_budget exactly.
    """
    sizes = {c.id: len(c.member_ids) for c in clusters}
    capacity = sum(sizes.values())
    if total_budget < 0:
        raise MixtureError(f"budget must be >= 0, got {total_budget}")
    if total_budget > capacity:
        raise InfeasibleBudget(
            f"budget {total_budget} exceeds pool capacity {capacity}; "
            f"achievable maximum is {capacity}"
        )
    budgets = {c.id: 0 for c in clusters}
    active = [c.id for c in clusters if sizes[c.id] > 0]
    remaining = total_budget
    # Cap-and-redistribute until every active quota fits its cluster.
    # Quotas are exact rationals so mathematically tied remainders really
    # tie and fall through to the (floor, id) order.
    while True:
        active_size = sum(sizes[i] for i in active)
        if not active or remaining == 0:
            break
        capped = [i for i in active if remaining * sizes[i] >= sizes[i] * active_size]
        if not capped:
            break
        for i in capped:
            budgets[i] = sizes[i]
            remaining -= sizes[i]
            active.remove(i)
    if active and remaining:
        active_size = sum(sizes[i] for i in active)
        quotas = {i: Fraction(remaining * sizes[i], active_size) for i in active}
        floors = {i: quotas[i].numerator // quotas[i].denominator for i in active}
        leftover = remaining - sum(floors.values())
        order = sorted(active, key=lambda i: (-(quotas[i] - floors[i]), floors[i], i))
        for i in order[:leftover]:
            floors[i] += 1
        for i in active:
            budgets[i] = floors[i]
    assert sum(budgets.values()) == total_budget
    for c in clusters:
        c.budget = budgets[c.id]
    return clusters


# --- intra-cluster sampling ---


def token_count(rec: Record) -> int:
    """Whitespace token count of question plus solution, the difficulty proxy."""
    return len(((rec.question or "") + " " + (rec.solution or "")).split())


def sample_difficulty_priority(
    cluster: Cluster, records: dict[Any, Record], budget: int, counts: dict[Any, int] | None = None
) -> list:
    """Take the budget longest members (token count desc, then id asc)."""
    if budget > len(cluster.member_ids):
        raise MixtureError(
            f"cluster {cluster.id}: budget {budget} exceeds {len(cluster.member_ids)} members"
        )

    def proxy(member_id: Any) -> int:
        if counts is not None:
            return counts[member_id]
        return token_count(records[member_id])

    ordered = sorted(cluster.member_ids, key=lambda m: (-proxy(m), m))
    return ordered[:budget]


def sample_random(cluster: Cluster, records: dict[Any, Record], budget: int, seed: int) -> list:
    """Uniform sample without replacement, deterministic per (seed, cluster id)."""
    if budget > len(cluster.member_ids):
        raise MixtureError(
            f"cluster {cluster.id}: budget {budget} exceeds {len(cluster.member_ids)} members"
        )
    members = sorted(cluster.member_ids)
    rng = np.random.default_rng(
        np.random.SeedSequence([seed & 0xFFFFFFFFFFFFFFFF, cluster.id])
    )
    chosen = rng.choice(len(members), size=budget, replace=False)
    return [members[i] for i in sorted(int(x) for x in chosen)]


# --- embeddings ---


def load_embedding_sidecar(path: str | Path) -> dict[str, list[float]]:
    """Read precomputed vectors from JSONL of {"id": ..., "vector": [...]}."""
    vectors: dict[str, list[float]] = {}
    with Path(path).open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            obj = json.loads(line)
            if "id" not in obj or "vector" not in obj:
                raise MixtureError(f"{path}:{lineno}: sidecar lines need 'id' and 'vector'")
            vectors[str(obj["id"])] = [float(x) for x in obj["vector"]]
    return vectors


def _embed_pool(
    pool: list[Record],
    embeddings: dict[str, list[float]] | None,
    client: ModelClient | None,
    dim: int,
) -> np.ndarray:
    rows = []
    for rec in pool:
        if embeddings is not None:
            vec = embeddings.get(rec.id)
            if vec is None:
                raise MixtureError(f"no embedding for record {rec.id!r} in sidecar")
        elif client is not None:
            if dim < 1:
                raise MixtureError("plan.embedding_dim must be set to embed via client")
            vec = client.embed(EmbedRequest("embedder", rec.question, dim))
        else:
            raise MixtureError("need an embedding sidecar or a client to embed with")
        rows.append(vec)
    arr = np.asarray(rows, dtype=np.float64)
    if arr.ndim != 2:
        raise MixtureError("embeddings have inconsistent dimensions")
    return arr


# --- the mixture builder ---


def build_mixture(
    plan: MixturePlan,
    sources: dict[str, list[Record]],
    *,
    embeddings: dict[str, list[float]] | None = None,
    client: ModelClient | None = None,
    index: NGramIndex | None = None,
) -> tuple[list[Record], StageManifest]:
    """Assemble the mixture: anchor whole, then each patch through
    dedup -> decontaminate -> embed -> cluster -> allocate -> sample."""
    plan.validate()
    start = time.perf_counter()
    if plan.anchor not in sources:
        raise MixtureError(f"anchor source {plan.anchor!r} not provided")
    selected: list[Record] = list(sources[plan.anchor])
    per_source: dict[str, int] = {plan.anchor: len(selected)}
    clusters_per_source: dict[str, int] = {}
    input_total = len(selected)
    for patch in plan.patches:
        if patch.source not in sources:
            raise MixtureError(f"patch source {patch.source!r} not provided")
        pool = sources[patch.source]
        input_total += len(pool)
        pool, _ = exact_dedup(pool)
        if index is not None:
            pool, _, _ = decontaminate(pool, index)
        if patch.budget > len(pool):
            raise InfeasibleBudget(
                f"patch {patch.source!r}: budget {patch.budget} infeasible after "
                f"dedup/decontamination; achievable maximum is {len(pool)}"
            )
        if patch.budget == 0:
            per_source[patch.source] = 0
            continue
        vectors = _embed_pool(pool, embeddings, client, plan.embedding_dim)
        n_clusters = min(plan.n_clusters or default_n_clusters(len(pool)), len(pool))
        clusters_per_source[patch.source] = n_clusters
        ids = [rec.id for rec in pool]
        clusters = kmeans(vectors, n_clusters, seed=plan.seed, ids=ids)
        clusters = allocate_budget(clusters, patch.budget)
        recmap = {rec.id: rec for rec in pool}
        chosen: list[str] = []
        for cluster in clusters:
            if plan.sampling == "difficulty_priority":
                chosen.extend(sample_difficulty_priority(cluster, recmap, cluster.budget))
            else:
                chosen.extend(sample_random(cluster, recmap, cluster.budget, plan.seed))
        selected.extend(recmap[rid] for rid in chosen)
        per_source[patch.source] = len(chosen)
    manifest = StageManifest(
        stage="mix",
        params={
            "plan": plan.to_obj(),
            "per_source": per_source,
            "clusters_per_source": clusters_per_source,
        },
        input_count=input_total,
        output_count=len(selected),
        removed_count=input_total - len(selected),
        seed=plan.seed,
        duration_s=time.perf_counter() - start,
    ).validate()
    return selected, manifest
