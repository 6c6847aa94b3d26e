"""Toy 2-D study of learned comparators.

Three comparator families are trained on the same pair data and objective
(MSE between a sigmoid score and the 0/1 match label):

* ``mahalanobis``: ``sigmoid(tau - (q - s)^T L^T L (q - s))``
* ``mlp_mahalanobis``: the same quadratic form on a shared MLP embedding of q and s
* ``relation_mlp``: an MLP on the concatenated pair ``[q, s]``

Only the last one can represent relations such as concentric distance bands.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from relnet import ops
from relnet.data.pairs import PairSet, gen_synthetic_relation, relation_truth
from relnet.optim import AdamState, ParamSet, adam_step
from relnet.tensor import Tensor
from relnet.train import lr_schedule

KINDS = ("mahalanobis", "mlp_mahalanobis", "relation_mlp")
MATCH_RGB = (244, 190, 66)
MISMATCH_RGB = (52, 72, 120)
QUERY_RGB = (220, 30, 30)


@dataclass
class Comparator:
    """A trained pair scorer.  ``score`` maps pairs to (0, 1); ``score > threshold`` means match."""

    kind: str
    params: ParamSet
    hidden: tuple = ()
    threshold: float = 0.5
    losses: list = field(default_factory=list)

    def _mlp(self, x: Tensor, prefix: str, n_layers: int, last_linear: bool) -> Tensor:
        for i in range(n_layers):
            x = ops.linear(x, self.params[f"{prefix}.{i}.weight"], self.params[f"{prefix}.{i}.bias"])
            if i < n_layers - 1 or not last_linear:
                x = ops.relu(x)
        return x

    def forward(self, q, s, return_hidden: bool = False):
        q = q if isinstance(q, Tensor) else Tensor(q)
        s = s if isinstance(s, Tensor) else Tensor(s)
        if self.kind == "relation_mlp":
            h = self._mlp(ops.concat((q, s), axis=1), "mlp", len(self.hidden), last_linear=False)
            out = ops.sigmoid(ops.linear(h, self.params["out.weight"], self.params["out.bias"]))
        else:
            h = None
            if self.kind == "mlp_mahalanobis" and self.hidden:
                # hidden ReLU layers followed by a linear projection, shared by q and s
                n = len(self.hidden) + 1
                q = self._mlp(q, "embed", n, last_linear=True)
                s = self._mlp(s, "embed", n, last_linear=True)
            z = ops.linear(q - s, self.params["metric.L"])
            h = z
            d2 = (z * z).sum(axis=1, keepdims=True)
            out = ops.sigmoid(self.params["metric.tau"] - d2)
        out = out.reshape(out.shape[0])
        return (out, h) if return_hidden else out

    def score(self, q, s, chunk: int = 16384) -> np.ndarray:
        q = np.asarray(q, dtype=np.float32)
        s = np.asarray(s, dtype=np.float32)
        return np.concatenate([self.forward(q[i:i + chunk], s[i:i + chunk]).data
                               for i in range(0, len(q), chunk)])

    def hidden_features(self, q, s) -> np.ndarray:
        """Penultimate activations (the last hidden layer, or the metric projection)."""
        return self.forward(np.asarray(q, np.float32), np.asarray(s, np.float32), return_hidden=True)[1].data

    def predict(self, q, s) -> np.ndarray:
        # a score equal to the threshold counts as a mismatch
        return self.score(q, s) > self.threshold

    def accuracy(self, pairs: PairSet) -> float:
        return float(np.mean(self.predict(pairs.q, pairs.s) == pairs.match.astype(bool)))

    @property
    def metric(self) -> np.ndarray:
        """``M = L^T L`` for the metric kinds."""
        L = self.params["metric.L"].data.astype(np.float64)
        return L.T @ L


class OracleComparator:
    """Scores pairs with the ground-truth relation itself (1 for match, 0 otherwise)."""

    threshold = 0.5

    def __init__(self, pattern: str = "rings", ring_width: float = 1.0):
        self.pattern = pattern
        self.ring_width = ring_width

    def score(self, q, s) -> np.ndarray:
        return relation_truth(self.pattern, q, s, self.ring_width).astype(np.float64)


def _uniform_layer(params: ParamSet, rng, name: str, din: int, dout: int, bias: bool = True) -> None:
    bound = 1.0 / np.sqrt(din)
    params.add(f"{name}.weight", rng.uniform(-bound, bound, size=(dout, din)))
    if bias:
        params.add(f"{name}.bias", rng.uniform(-bound, bound, size=dout))


def _build(kind: str, hidden: tuple, embed_dim: int, rng) -> Comparator:
    params = ParamSet()
    if kind == "relation_mlp":
        din = 4
        for i, width in enumerate(hidden):
            _uniform_layer(params, rng, f"mlp.{i}", din, width)
            din = width
        _uniform_layer(params, rng, "out", din, 1)
    elif kind in ("mahalanobis", "mlp_mahalanobis"):
        dim = 2
        if kind == "mlp_mahalanobis" and hidden:
            for i, width in enumerate((*hidden, embed_dim)):
                _uniform_layer(params, rng, f"embed.{i}", dim, width)
                dim = width
        params.add("metric.L", np.eye(dim))
        params.add("metric.tau", np.ones(1))
    else:
        raise ValueError(f"unknown comparator kind {kind!r}; choose from {', '.join(KINDS)}")
    return Comparator(kind, params, tuple(hidden))


def _fit(kind: str, pairs: PairSet, hidden: tuple, steps: int, lr: float, batch_size: int, seed: int,
         embed_dim: int = 2) -> Comparator:
    if len(pairs) == 0:
        raise ValueError("cannot fit a comparator on an empty pair set")
    if steps < 1:
        raise ValueError("steps must be >= 1")
    rng = np.random.default_rng(seed)
    comp = _build(kind, hidden, embed_dim, rng)
    state = AdamState(lr=lr)
    q = pairs.q.astype(np.float32)
    s = pairs.s.astype(np.float32)
    y = pairs.match.astype(np.float32)
    period = max(1, steps // 3)
    batch = min(batch_size, len(pairs))
    for step in range(steps):
        idx = rng.integers(0, len(pairs), size=batch)
        loss = ops.mse_loss(comp.forward(q[idx], s[idx]), y[idx])
        loss.backward()
        adam_step(comp.params, state, lr_schedule(lr, step, period))
        comp.losses.append(loss.item())
    return comp


def fit_mahalanobis(pairs: PairSet, steps: int = 10_000, lr: float = 3e-3, batch_size: int = 512,
                    seed: int = 0) -> Comparator:
    """Learn ``L`` and ``tau`` of ``sigmoid(tau - |L (q - s)|^2)`` by minibatch Adam.

    The rate is halved after each third of the budget.
    """
    return _fit("mahalanobis", pairs, (), steps, lr, batch_size, seed)


def fit_mlp_mahalanobis(pairs: PairSet, hidden: tuple = (16, 16), steps: int = 10_000, lr: float = 3e-3,
                        batch_size: int = 512, seed: int = 0, embed_dim: int = 2) -> Comparator:
    """Metric learning on a shared MLP embedding; ``hidden=()`` is exactly :func:`fit_mahalanobis`."""
    return _fit("mlp_mahalanobis", pairs, tuple(hidden), steps, lr, batch_size, seed, embed_dim)


def fit_relation_mlp(pairs: PairSet, hidden: tuple = (64, 64, 64), steps: int = 10_000, lr: float = 3e-3,
                     batch_size: int = 512, seed: int = 0) -> Comparator:
    return _fit("relation_mlp", pairs, tuple(hidden), steps, lr, batch_size, seed)


# -- decision maps --------------------------------------------------------------


@dataclass
class DecisionMap:
    """Predicted and true match over a grid of sample points for one fixed query.

    Row 0 is the top of the box (largest y), column 0 its left edge.
    """

    grid: int
    box: tuple
    query: tuple
    pred: np.ndarray
    truth: np.ndarray
    accuracy: float

    def image(self) -> np.ndarray:
        rgb = np.where(self.pred[..., None], np.array(MATCH_RGB, np.uint8), np.array(MISMATCH_RGB, np.uint8))
        return mark_point(rgb.astype(np.uint8), self.query, self.box)


def grid_points(grid: int, box: tuple) -> np.ndarray:
    """Pixel-centre coordinates ``[grid * grid, 2]`` in row-major order."""
    lo, hi = box
    step = (hi - lo) / grid
    xs = lo + (np.arange(grid) + 0.5) * step
    ys = hi - (np.arange(grid) + 0.5) * step
    gx, gy = np.meshgrid(xs, ys)
    return np.stack([gx.ravel(), gy.ravel()], axis=1)


def mark_point(rgb: np.ndarray, point, box: tuple, radius: int = 3) -> np.ndarray:
    grid = rgb.shape[0]
    lo, hi = box
    col = int(np.clip((point[0] - lo) / (hi - lo) * grid, 0, grid - 1))
    row = int(np.clip((hi - point[1]) / (hi - lo) * grid, 0, grid - 1))
    out = rgb.copy()
    out[max(0, row - radius):row + radius + 1, col] = QUERY_RGB
    out[row, max(0, col - radius):col + radius + 1] = QUERY_RGB
    return out


def render_decision_map(comp, query=(0.0, 0.0), grid: int = 256, box: tuple = (-2.0, 2.0), path=None,
                        pattern: str = "rings", ring_width: float = 1.0) -> DecisionMap:
    """Evaluate ``comp(query, s)`` on every pixel centre and compare with the true relation."""
    if grid < 2:
        raise ValueError(f"grid must be >= 2, got {grid}")
    pts = grid_points(grid, box)
    qs = np.broadcast_to(np.asarray(query, dtype=np.float64), pts.shape)
    scores = np.asarray(comp.score(qs, pts))
    pred = (scores > comp.threshold).reshape(grid, grid)
    truth = relation_truth(pattern, qs, pts, ring_width).astype(bool).reshape(grid, grid)
    dmap = DecisionMap(grid, tuple(box), tuple(query), pred, truth, float(np.mean(pred == truth)))
    if path is not None:
        write_ppm(path, dmap.image())
    return dmap


def write_ppm(path, rgb: np.ndarray) -> Path:
    """Write an ``[H, W, 3]`` uint8 array as a binary (P6) PPM."""
    rgb = np.ascontiguousarray(rgb, dtype=np.uint8)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValueError(f"expected an [H, W, 3] image, got {rgb.shape}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{rgb.shape[1]} {rgb.shape[0]}\n255\n".encode("ascii"))
        fh.write(rgb.tobytes())
    return path


def read_ppm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(maxsplit=4)
    if parts[0] != b"P6":
        raise ValueError(f"{path} is not a binary PPM")
    w, h = int(parts[1]), int(parts[2])
    return np.frombuffer(parts[4][: w * h * 3], dtype=np.uint8).reshape(h, w, 3)


PALETTE = np.array([
    (31, 119, 180), (255, 127, 14), (44, 160, 44), (214, 39, 40), (148, 103, 189),
    (140, 86, 75), (227, 119, 194), (127, 127, 127), (188, 189, 34), (23, 190, 207),
], dtype=np.uint8)


def render_scatter(points: np.ndarray, labels=None, path=None, size: int = 256, margin: int = 8,
                   radius: int = 1) -> np.ndarray:
    """Rasterise 2-D points on a white canvas, coloured by integer label."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise ValueError(f"expected [n, 2] points, got {pts.shape}")
    labels = np.zeros(len(pts), dtype=int) if labels is None else np.asarray(labels)
    canvas = np.full((size, size, 3), 255, dtype=np.uint8)
    if len(pts):
        lo, hi = pts.min(axis=0), pts.max(axis=0)
        span = np.where(hi > lo, hi - lo, 1.0)
        scaled = (pts - lo) / span * (size - 1 - 2 * margin) + margin
        cols = np.rint(scaled[:, 0]).astype(int)
        rows = np.rint(size - 1 - scaled[:, 1]).astype(int)
        for r, c, lab in zip(rows, cols, labels):
            canvas[max(0, r - radius):r + radius + 1, max(0, c - radius):c + radius + 1] = PALETTE[int(lab) % len(PALETTE)]
    if path is not None:
        write_ppm(path, canvas)
    return canvas


# -- PCA ------------------------------------------------------------------------


def jacobi_eigh(a: np.ndarray, tol: float = 1e-15, max_sweeps: int = 100) -> tuple[np.ndarray, np.ndarray]:
    """Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.

    Returns eigenvalues in descending order and the matching eigenvectors as
    columns.
    """
    a = np.array(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"expected a square matrix, got {a.shape}")
    n = a.shape[0]
    v = np.eye(n)
    scale = max(np.linalg.norm(a), np.finfo(float).tiny)
    for _ in range(max_sweeps):
        off = np.sqrt(np.sum(np.triu(a, 1) ** 2))
        if off <= tol * scale:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                if a[p, q] == 0.0:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * a[p, q])
                t = np.sign(theta) / (abs(theta) + np.sqrt(theta * theta + 1.0)) if theta != 0 else 1.0
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                ap, aq = a[:, p].copy(), a[:, q].copy()
                a[:, p] = c * ap - s * aq
                a[:, q] = s * ap + c * aq
                rp, rq = a[p, :].copy(), a[q, :].copy()
                a[p, :] = c * rp - s * rq
                a[q, :] = s * rp + c * rq
                vp, vq = v[:, p].copy(), v[:, q].copy()
                v[:, p] = c * vp - s * vq
                v[:, q] = s * vp + c * vq
    values = np.diag(a).copy()
    order = np.argsort(-values, kind="stable")
    return values[order], v[:, order]


def fix_signs(vectors: np.ndarray) -> np.ndarray:
    """Flip each column so its largest-magnitude entry (first on ties) is positive."""
    out = vectors.copy()
    for j in range(out.shape[1]):
        i = int(np.argmax(np.abs(out[:, j])))
        if out[i, j] < 0:
            out[:, j] = -out[:, j]
    return out


@dataclass
class PcaBasis:
    mean: np.ndarray
    components: np.ndarray   # [d, k], columns are principal directions
    variances: np.ndarray    # [k]

    def project(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - self.mean) @ self.components

    def reconstruct(self, z: np.ndarray) -> np.ndarray:
        return z @ self.components.T + self.mean


def pca_fit(vectors: np.ndarray, k: int = 2) -> PcaBasis:
    x = np.asarray(vectors, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"expected an [n, d] matrix, got {x.shape}")
    n, d = x.shape
    if d < k:
        raise ValueError(f"cannot take {k} components of {d}-dimensional data")
    if not n >= k >= 1:
        raise ValueError(f"need n >= k >= 1, got n={n}, k={k}")
    mean = x.mean(axis=0)
    xc = x - mean
    cov = xc.T @ xc / max(n - 1, 1)
    values, vecs = jacobi_eigh(cov)
    return PcaBasis(mean, fix_signs(vecs[:, :k]), values[:k])


def pca_project(vectors: np.ndarray, k: int = 2) -> np.ndarray:
    """Project mean-centred rows onto the top-``k`` covariance eigenvectors."""
    return pca_fit(vectors, k).project(vectors)


# -- the study ---------------------------------------------------------------------


@dataclass
class SynthConfig:
    pattern: str = "rings"
    ring_width: float = 1.0
    box: tuple = (-2.0, 2.0)
    n_train: int = 50_000
    n_test: int = 20_000
    steps: int = 10_000
    batch_size: int = 512
    lr: float = 3e-3
    relation_hidden: tuple = (64, 64, 64)
    mlp_hidden: tuple = (16, 16)
    embed_dim: int = 2
    grid: int = 256
    query: tuple = (0.0, 0.0)
    seeds: tuple = (0, 1, 2, 3, 4)
    kinds: tuple = KINDS


def fit_kind(kind: str, pairs: PairSet, cfg: SynthConfig, seed: int) -> Comparator:
    common = dict(steps=cfg.steps, lr=cfg.lr, batch_size=cfg.batch_size, seed=seed)
    if kind == "mahalanobis":
        return fit_mahalanobis(pairs, **common)
    if kind == "mlp_mahalanobis":
        return fit_mlp_mahalanobis(pairs, cfg.mlp_hidden, embed_dim=cfg.embed_dim, **common)
    if kind == "relation_mlp":
        return fit_relation_mlp(pairs, cfg.relation_hidden, **common)
    raise ValueError(f"unknown comparator kind {kind!r}")


def run_study(cfg: SynthConfig, outdir=None, log=print, on_map=None) -> list[dict]:
    """Train every comparator kind for every seed; write maps and a JSON summary.

    Each seed draws its own training and held-out pairs; all kinds of one
    seed share them.  ``on_map(kind, seed, dmap, comparator)`` is called
    after each fit.
    """
    outdir = Path(outdir) if outdir is not None else None
    results = []
    for seed in cfg.seeds:
        rng = np.random.default_rng([0x53594E, seed])
        train = gen_synthetic_relation(cfg.n_train, rng, cfg.pattern, cfg.ring_width, cfg.box)
        test = gen_synthetic_relation(cfg.n_test, rng, cfg.pattern, cfg.ring_width, cfg.box)
        for kind in cfg.kinds:
            start = time.perf_counter()
            comp = fit_kind(kind, train, cfg, seed)
            path = outdir / f"decision_{kind}_seed{seed}.ppm" if outdir is not None else None
            dmap = render_decision_map(comp, cfg.query, cfg.grid, cfg.box, path, cfg.pattern, cfg.ring_width)
            row = {"pattern": cfg.pattern, "comparator": kind, "seed": seed, "accuracy": comp.accuracy(test),
                   "map_accuracy": dmap.accuracy, "train_seconds": round(time.perf_counter() - start, 3)}
            if path is not None:
                row["map"] = path.name
            results.append(row)
            if on_map is not None:
                on_map(kind, seed, dmap, comp)
            if log is not None:
                log(f"seed {seed} {kind:<16} held-out acc {row['accuracy']:.4f} map acc {dmap.accuracy:.4f}")
    if outdir is not None:
        outdir.mkdir(parents=True, exist_ok=True)
        summary = {"config": asdict(cfg), "results": results}
        (outdir / "summary.json").write_text(json.dumps(summary, indent=2))
    return results
