"""Clustered facet construction from real-image activations.

Pipeline: spatial-mean pooling -> PCA -> t-SNE -> k-means -> per-cluster
nearest members -> distance-softmax weights -> weighted init image and
target activation. All stages are seeded and deterministic.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ValidationError
from .model import LayerRef

FVF_MAGIC = "featvis-facet-v1"

# floor applied to distances before inversion; keeps the zero-distance
# member finite while preserving its dominance
DISTANCE_FLOOR = 1e-5


@dataclass(frozen=True)
class EmbeddingPoint:
    coords: np.ndarray  # (2,)
    image_index: int


@dataclass(frozen=True)
class ClusterAssignment:
    centers: np.ndarray  # (C, 2)
    labels: np.ndarray   # (n,) ints in [0, C)


@dataclass(frozen=True)
class FacetWeights:
    member_indices: np.ndarray  # (N,) indices into the source image list
    weights: np.ndarray         # (N,) sum to 1


@dataclass
class Facet:
    init_image: np.ndarray   # (3, H, W)
    target: np.ndarray       # (C', H', W') activation at `layer`
    weights: FacetWeights
    top_k: np.ndarray        # (k,) channel indices, descending score
    layer: LayerRef
    meta: dict = field(default_factory=dict)

    def save(self, path):
        """One-line JSON header, then init image and target as float32."""
        header = {
            "magic": FVF_MAGIC,
            "layer_name": self.layer.name,
            "layer_depth": self.layer.depth_index,
            "k": len(self.top_k),
            "top_k": [int(i) for i in self.top_k],
            "member_indices": [int(i) for i in self.weights.member_indices],
            "weights": [float(w) for w in self.weights.weights],
            "init_image_shape": list(self.init_image.shape),
            "target_shape": list(self.target.shape),
            "meta": self.meta,
        }
        with open(path, "wb") as fh:
            fh.write(json.dumps(header, sort_keys=True).encode("utf-8"))
            fh.write(b"\n")
            fh.write(self.init_image.astype("<f4").tobytes())
            fh.write(self.target.astype("<f4").tobytes())

    @classmethod
    def load(cls, path) -> "Facet":
        with open(path, "rb") as fh:
            raw = fh.read()
        nl = raw.index(b"\n")
        header = json.loads(raw[:nl].decode("utf-8"))
        if header.get("magic") != FVF_MAGIC:
            raise ValidationError(f"{path}: not a featvis facet file")
        offset = nl + 1
        arrays = []
        for key in ("init_image_shape", "target_shape"):
            shape = tuple(header[key])
            count = int(np.prod(shape))
            arr = np.frombuffer(raw, dtype="<f4", count=count, offset=offset)
            offset += 4 * count
            arrays.append(arr.reshape(shape).astype(np.float64))
        init_image, target = arrays
        weights = FacetWeights(
            member_indices=np.asarray(header["member_indices"], dtype=int),
            weights=np.asarray(header["weights"], dtype=np.float64),
        )
        return cls(
            init_image=init_image,
            target=target,
            weights=weights,
            top_k=np.asarray(header["top_k"], dtype=int),
            layer=LayerRef(header["layer_name"], header["layer_depth"]),
            meta=header.get("meta", {}),
        )


# ---------------------------------------------------------------------------
# pooling / embedding / clustering
# ---------------------------------------------------------------------------

def pool_activation(a: np.ndarray) -> np.ndarray:
    """Spatial mean per channel: (C, H, W) -> (C,)."""
    a = np.asarray(a, dtype=np.float64)
    if not np.all(np.isfinite(a)):
        raise ValidationError("activation contains non-finite entries")
    return a.reshape(a.shape[0], -1).mean(axis=1)


def pca_reduce(vectors, d: int):
    """Project mean-centered rows onto the top-d principal components.

    Components are ordered by descending explained variance and
    sign-fixed so the largest-magnitude loading of each is positive.
    """
    X = np.asarray(vectors, dtype=np.float64)
    n, c = X.shape
    if n < 2:
        raise ConfigError(f"PCA needs at least 2 samples, got {n}")
    if d < 1 or d > min(c, n - 1):
        raise ConfigError(
            f"PCA dimension {d} out of range [1, {min(c, n - 1)}] for {n}x{c} data"
        )
    Xc = X - X.mean(axis=0)
    cov = Xc.T @ Xc / (n - 1)
    eigvals, eigvecs = np.linalg.eigh(cov)
    order = np.argsort(eigvals)[::-1][:d]
    comps = eigvecs[:, order]
    for j in range(d):
        lead = np.argmax(np.abs(comps[:, j]))
        if comps[lead, j] < 0:
            comps[:, j] = -comps[:, j]
    return Xc @ comps


def _perplexity_calibrated_affinities(D2: np.ndarray, perplexity: float) -> np.ndarray:
    """Per-row binary search of the Gaussian precision matching log-perplexity."""
    n = D2.shape[0]
    target = np.log(perplexity)
    P = np.zeros((n, n))
    for i in range(n):
        di = np.delete(D2[i], i)
        beta, beta_lo, beta_hi = 1.0, 0.0, np.inf
        for _ in range(64):
            ex = np.exp(-di * beta + (di * beta).min())
            sum_ex = ex.sum()
            p = ex / sum_ex
            # entropy of the conditional distribution
            h = -np.sum(p * np.log(np.maximum(p, 1e-300)))
            if abs(h - target) < 1e-7:
                break
            if h > target:
                beta_lo = beta
                beta = beta * 2.0 if beta_hi == np.inf else (beta_lo + beta_hi) / 2.0
            else:
                beta_hi = beta
                beta = (beta_lo + beta_hi) / 2.0
        row = np.zeros(n)
        row[np.arange(n) != i] = p
        P[i] = row
    return P


def tsne_embed(vectors, perplexity: float = 5.0, iterations: int = 1000,
               seed: int = 0, learning_rate: float = 100.0,
               early_exaggeration: float = 12.0,
               exaggeration_iters: int = 250):
    """2D t-SNE with Student-t kernel, momentum and early exaggeration."""
    X = np.asarray(vectors, dtype=np.float64)
    n = X.shape[0]
    if perplexity <= 0:
        raise ConfigError("perplexity must be positive")
    if n <= 3 * perplexity:
        raise ConfigError(
            f"t-SNE needs more than 3*perplexity = {3 * perplexity:g} samples, got {n}"
        )
    sq = np.sum(X * X, axis=1)
    D2 = np.maximum(sq[:, None] + sq[None, :] - 2.0 * (X @ X.T), 0.0)
    P = _perplexity_calibrated_affinities(D2, perplexity)
    P = (P + P.T) / (2.0 * n)
    P = np.maximum(P, 1e-12)

    rng = np.random.default_rng(seed)
    Y = rng.normal(scale=1e-4, size=(n, 2))
    dY = np.zeros_like(Y)
    gains = np.ones_like(Y)
    for t in range(iterations):
        ysq = np.sum(Y * Y, axis=1)
        num = 1.0 / (1.0 + np.maximum(ysq[:, None] + ysq[None, :] - 2.0 * (Y @ Y.T), 0.0))
        np.fill_diagonal(num, 0.0)
        Q = np.maximum(num / num.sum(), 1e-12)
        exag = early_exaggeration if t < exaggeration_iters else 1.0
        PQ = (exag * P - Q) * num
        grad = 4.0 * ((np.diag(PQ.sum(axis=1)) - PQ) @ Y)
        momentum = 0.5 if t < exaggeration_iters else 0.8
        gains = np.where(np.sign(grad) != np.sign(dY), gains + 0.2, gains * 0.8)
        gains = np.maximum(gains, 0.01)
        dY = momentum * dY - learning_rate * gains * grad
        Y = Y + dY
        Y = Y - Y.mean(axis=0)
    return [EmbeddingPoint(coords=Y[i].copy(), image_index=i) for i in range(n)]


def _kmeans_pp_init(X: np.ndarray, c: int, rng) -> np.ndarray:
    n = X.shape[0]
    centers = np.empty((c, X.shape[1]))
    centers[0] = X[rng.integers(n)]
    closest = np.sum((X - centers[0]) ** 2, axis=1)
    for j in range(1, c):
        total = closest.sum()
        if total <= 0.0:
            # all remaining points coincide with a chosen center
            pick = rng.integers(n)
        else:
            pick = int(np.searchsorted(np.cumsum(closest), rng.uniform() * total))
            pick = min(pick, n - 1)
        centers[j] = X[pick]
        closest = np.minimum(closest, np.sum((X - centers[j]) ** 2, axis=1))
    return centers


def kmeans_cluster(points, c: int, seed: int = 0, max_iter: int = 300) -> ClusterAssignment:
    """Lloyd's algorithm with k-means++ seeding and empty-cluster repair."""
    X = _as_coords(points)
    n = X.shape[0]
    if c < 1 or n < c:
        raise ConfigError(f"need at least C={c} points to form C clusters, got {n}")
    rng = np.random.default_rng(seed)
    centers = _kmeans_pp_init(X, c, rng)
    labels = np.full(n, -1)
    for _ in range(max_iter):
        d2 = np.sum((X[:, None, :] - centers[None, :, :]) ** 2, axis=2)
        new_labels = np.argmin(d2, axis=1)
        dist_own = d2[np.arange(n), new_labels]
        for empty in range(c):
            if not np.any(new_labels == empty):
                # repair: hand the globally worst-fitting point to the empty cluster
                worst = int(np.argmax(dist_own))
                new_labels[worst] = empty
                dist_own[worst] = -1.0
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
        for j in range(c):
            centers[j] = X[labels == j].mean(axis=0)
    return ClusterAssignment(centers=centers, labels=labels)


def _as_coords(points) -> np.ndarray:
    if len(points) and isinstance(points[0], EmbeddingPoint):
        return np.stack([p.coords for p in points])
    return np.asarray(points, dtype=np.float64)


def nearest_members(points, center, n_members: int) -> np.ndarray:
    """Indices of the min(N, count) points closest to `center`.

    Sorted by ascending Euclidean distance; ties broken by lower index.
    """
    X = _as_coords(points)
    dist = np.linalg.norm(X - np.asarray(center, dtype=np.float64), axis=1)
    order = np.argsort(dist, kind="stable")
    return order[: min(n_members, len(order))]


# ---------------------------------------------------------------------------
# weights and facet assembly
# ---------------------------------------------------------------------------

def weights_from_scores(scores: np.ndarray) -> np.ndarray:
    """Shift-invariant softmax; safe for scores up to 1/DISTANCE_FLOOR."""
    scores = np.asarray(scores, dtype=np.float64)
    ex = np.exp(scores - scores.max())
    return ex / ex.sum()


def facet_weights(distances) -> np.ndarray:
    """Member weights from center distances: softmax of inverse distance.

    The floor DISTANCE_FLOOR stands in for the additive stability constant
    so that a zero distance yields a finite, dominating score.
    """
    d = np.asarray(distances, dtype=np.float64)
    if d.ndim != 1 or d.size == 0:
        raise ValidationError("distances must be a non-empty 1D array")
    if np.any(d < 0) or not np.all(np.isfinite(d)):
        raise ValidationError("distances must be finite and non-negative")
    return weights_from_scores(1.0 / np.maximum(d, DISTANCE_FLOOR))


def top_k_channels(target: np.ndarray, k: int) -> np.ndarray:
    """The k channels with largest spatial-mean activation, descending.

    Ties resolve to the lower channel index.
    """
    means = target.reshape(target.shape[0], -1).mean(axis=1)
    if k < 1 or k > means.size:
        raise ConfigError(f"top-k of {k} invalid for {means.size} channels")
    return np.argsort(-means, kind="stable")[:k]


def build_facet(images, activations, weights, layer: LayerRef, k: int,
                member_indices=None, meta=None) -> Facet:
    """Weight-convex combination of member images and activations."""
    images = [np.asarray(im, dtype=np.float64) for im in images]
    activations = [np.asarray(a, dtype=np.float64) for a in activations]
    w = np.asarray(weights, dtype=np.float64)
    if not (len(images) == len(activations) == w.size):
        raise ValidationError("images, activations and weights must align")
    if any(im.shape != images[0].shape for im in images):
        raise ValidationError("member images differ in shape")
    if any(a.shape != activations[0].shape for a in activations):
        raise ValidationError("member activations differ in shape")
    init_image = sum(im * wi for im, wi in zip(images, w))
    target = sum(a * wi for a, wi in zip(activations, w))
    if member_indices is None:
        member_indices = np.arange(w.size)
    return Facet(
        init_image=init_image,
        target=target,
        weights=FacetWeights(
            member_indices=np.asarray(member_indices, dtype=int),
            weights=w,
        ),
        top_k=top_k_channels(target, k),
        layer=layer,
        meta=meta or {},
    )


def build_facets(model, images, layer_name: str, n_clusters: int,
                 n_neighbors: int = 10, k: int = 8, seed: int = 0,
                 perplexity: float = 5.0, tsne_iterations: int = 1000,
                 pca_dim: int | None = None, single_member: int | None = None):
    """End-to-end facet construction for a list of equally-sized images.

    Returns (facets, embedding_rows) where embedding_rows holds
    (x, y, cluster, image_index) per source image for inspection dumps.
    """
    images = [np.asarray(im, dtype=np.float64) for im in images]
    if any(im.shape != images[0].shape for im in images):
        raise ValidationError("all facet source images must share one resolution")
    layer = model.resolve_layer(layer_name)
    activations = [model.forward_to(im, layer) for im in images]
    pooled = np.stack([pool_activation(a) for a in activations])
    n, c = pooled.shape
    d = pca_dim if pca_dim is not None else min(50, c, n - 1)
    reduced = pca_reduce(pooled, d)
    points = tsne_embed(reduced, perplexity=perplexity,
                        iterations=tsne_iterations, seed=seed)
    coords = np.stack([p.coords for p in points])
    assignment = kmeans_cluster(points, n_clusters, seed=seed)

    facets = []
    for cid in range(n_clusters):
        member_global = np.flatnonzero(assignment.labels == cid)
        local = nearest_members(coords[member_global], assignment.centers[cid], n_neighbors)
        chosen = member_global[local]
        dist = np.linalg.norm(coords[chosen] - assignment.centers[cid], axis=1)
        if single_member is not None:
            if not 0 <= single_member < len(chosen):
                raise ConfigError(
                    f"--single-member {single_member} out of range for cluster {cid} "
                    f"with {len(chosen)} members"
                )
            w = np.zeros(len(chosen))
            w[single_member] = 1.0
        else:
            w = facet_weights(dist)
        facets.append(build_facet(
            [images[i] for i in chosen],
            [activations[i] for i in chosen],
            w,
            layer,
            k,
            member_indices=chosen,
            meta={"cluster": cid, "seed": seed,
                  "center": [float(x) for x in assignment.centers[cid]],
                  "member_distances": [float(x) for x in dist]},
        ))
    rows = [
        (float(coords[i, 0]), float(coords[i, 1]), int(assignment.labels[i]), i)
        for i in range(n)
    ]
    return facets, rows
