import numpy as np


def sq_dists(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    d = (x * x).sum(1)[:, None] + (c * c).sum(1)[None, :] - 2.0 * (x @ c.T)
    np.maximum(d, 0.0, out=d)
    return d


def kmeans_pp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """Greedy k-means++ seeding; may return fewer than ``k`` centers on duplicate data."""
    n = x.shape[0]
    trials = 2 + int(np.log(k))
    centers = [x[rng.integers(n)]]
    closest = sq_dists(x, centers[0][None])[:, 0]
    while len(centers) < k:
        pot = closest.sum()
        if pot <= 0.0:
            break
        cand = np.searchsorted(np.cumsum(closest), rng.random(trials) * pot, side="right")
        cand = np.minimum(cand, n - 1)
        d = np.minimum(closest[None, :], sq_dists(x[cand], x))
        best = int(np.argmin(d.sum(1)))
        centers.append(x[cand[best]])
        closest = d[best]
    return np.array(centers)


def kmeans(x: np.ndarray, k: int, rng: np.random.Generator,
           max_iter: int = 50, tol: float = 1e-6) -> np.ndarray:
    """Lloyd iterations from k-means++ seeds. Returns labels; ties go to the lower center."""
    c = kmeans_pp(x, k, rng)
    labels = np.argmin(sq_dists(x, c), axis=1)
    for _ in range(max_iter):
        new = c.copy()
        for j in range(c.shape[0]):
            members = labels == j
            if members.any():
                new[j] = x[members].mean(axis=0)
        shift = np.sqrt(((new - c) ** 2).sum(1)).max()
        c = new
        labels = np.argmin(sq_dists(x, c), axis=1)
        if shift < tol:
            break
    return labels
