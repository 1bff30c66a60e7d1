"""Metric head training: per-strip projections, BNNeck, batch-hard triplet +
cross-entropy, SGD with momentum. Gradients are derived by hand.
"""

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import container
from .descriptor import identity_projection
from .errors import DataError, ParameterError, SketchGaitError

log = logging.getLogger(__name__)

PARAM_NAMES = ("proj", "gamma", "beta", "classifier")


class TrainingDiverged(SketchGaitError):
    exit_code = 2


@dataclass(frozen=True)
class TrainConfig:
    P: int = 8
    K: int = 4
    margin: float = 0.2
    lr: float = 0.1
    milestones: Optional[tuple] = None
    lr_decay: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    iterations: int = 500
    seed: int = 0
    embed_dim: int = 32
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5

    def __post_init__(self):
        if self.P < 2 or self.K < 2:
            raise ParameterError(f"batch-hard mining needs P >= 2 and K >= 2, got P={self.P}, K={self.K}")
        if self.iterations < 0 or self.lr < 0:
            raise ParameterError("iterations and lr must be non-negative")

    def milestone_iters(self) -> tuple:
        if self.milestones is not None:
            return tuple(int(m) for m in self.milestones)
        return tuple(int(round(f * self.iterations)) for f in (0.4, 0.6, 0.8))

    def lr_at(self, it: int) -> float:
        drops = sum(1 for m in self.milestone_iters() if it >= m)
        return self.lr * self.lr_decay ** drops


@dataclass
class PKBatch:
    refs: list
    labels: list
    resampled: tuple = ()


def pk_sample(groups, P: int, K: int, rng: np.random.Generator) -> PKBatch:
    """Draw P identities and K sequences each.

    ``groups`` maps identity -> list of refs, or is a ``DatasetIndex``.
    Identities with fewer than K refs are drawn with replacement and listed
    in ``resampled``.
    """
    if hasattr(groups, "entries"):
        by_id = {}
        for e in groups.entries:
            by_id.setdefault(e.subject, []).append(e)
        groups = by_id
    ids = sorted(k for k, v in groups.items() if len(v) > 0)
    if len(ids) < P:
        raise ParameterError(f"need {P} identities, only {len(ids)} available")
    refs, labels, short = [], [], []
    for i in rng.choice(len(ids), size=P, replace=False):
        ident = ids[i]
        pool = groups[ident]
        replace = len(pool) < K
        if replace:
            short.append(ident)
        for j in rng.choice(len(pool), size=K, replace=replace):
            refs.append(pool[j])
            labels.append(ident)
    return PKBatch(refs, labels, tuple(short))


def pairwise_euclidean(x: np.ndarray) -> np.ndarray:
    diff = x[:, None, :] - x[None, :, :]
    return np.sqrt((diff * diff).sum(-1))


def batch_hard_triplet(emb, labels, margin: float = 0.2):
    """Mean over anchors of max(0, d(a, hardest pos) - d(a, hardest neg) + margin).

    Hardest positive excludes the anchor itself. Ties go to the lowest index;
    at the hinge kink the anchor contributes no gradient.
    Returns ``(loss, dloss/demb)``.
    """
    x = np.asarray(emb, dtype=np.float64)
    lab = np.asarray(labels)
    b = x.shape[0]
    if np.unique(lab).size < 2:
        raise ParameterError("batch-hard triplet needs at least two identities")
    dist = pairwise_euclidean(x)
    same = lab[:, None] == lab[None, :]
    pos = same & ~np.eye(b, dtype=bool)
    neg = ~same
    valid = pos.any(1) & neg.any(1)
    hp_idx = np.argmax(np.where(pos, dist, -np.inf), axis=1)
    hn_idx = np.argmin(np.where(neg, dist, np.inf), axis=1)
    rows = np.arange(b)
    hinge = dist[rows, hp_idx] - dist[rows, hn_idx] + margin
    per_anchor = np.where(valid, np.maximum(hinge, 0.0), 0.0)
    n = max(int(valid.sum()), 1)
    loss = per_anchor.sum() / n

    grad = np.zeros_like(x)
    for a in np.flatnonzero(valid & (hinge > 0)):
        for other, sign in ((hp_idx[a], 1.0), (hn_idx[a], -1.0)):
            d = dist[a, other]
            if d > 0:
                u = sign * (x[a] - x[other]) / (d * n)
                grad[a] += u
                grad[other] -= u
    return loss, grad


def cross_entropy(logits, label: int):
    """-log softmax(logits)[label] with max-shift; returns ``(loss, dloss/dlogits)``."""
    z = np.asarray(logits, dtype=np.float64)
    if not 0 <= label < z.size:
        raise ParameterError(f"label {label} out of range for {z.size} classes")
    shifted = z - z.max()
    log_norm = np.log(np.exp(shifted).sum())
    p = np.exp(shifted - log_norm)
    grad = p.copy()
    grad[label] -= 1.0
    return float(log_norm - shifted[label]), grad


def softmax_cross_entropy(logits, labels):
    """Batch mean of ``cross_entropy``; returns ``(loss, grad)`` shaped like ``logits``."""
    z = np.asarray(logits, dtype=np.float64)
    lab = np.asarray(labels, dtype=np.int64)
    if lab.min(initial=0) < 0 or lab.max(initial=0) >= z.shape[1]:
        raise ParameterError("label out of range")
    shifted = z - z.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(z.shape[0])
    loss = (log_norm - shifted[rows, lab]).mean()
    grad = np.exp(shifted - log_norm[:, None])
    grad[rows, lab] -= 1.0
    return float(loss), grad / z.shape[0]


def bn_forward(x, gamma, beta, running_mean, running_var, train: bool, eps: float = 1e-5):
    """Batch normalization over the batch axis. Returns ``(out, cache)``."""
    x = np.asarray(x, dtype=np.float64)
    if train:
        if x.shape[0] < 2:
            raise ParameterError("train-mode batch norm needs a batch of at least 2")
        mu, var = x.mean(0), x.var(0)
    else:
        mu, var = running_mean, running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv_std
    return gamma * xhat + beta, (xhat, inv_std, gamma, train)


def bn_backward(dout, cache):
    """Gradients ``(dx, dgamma, dbeta)`` of a batch-norm forward pass."""
    xhat, inv_std, gamma, train = cache
    dgamma = (dout * xhat).sum(0)
    dbeta = dout.sum(0)
    dxhat = dout * gamma
    if not train:
        return dxhat * inv_std, dgamma, dbeta
    b = dout.shape[0]
    dx = inv_std / b * (b * dxhat - dxhat.sum(0) - xhat * (dxhat * xhat).sum(0))
    return dx, dgamma, dbeta


def project(proj, strips) -> np.ndarray:
    """Per-strip linear maps: ``(S, d, C) x (B, S, C) -> (B, S*d)``."""
    strips = np.asarray(strips, dtype=np.float64)
    return np.einsum("sdc,bsc->bsd", proj, strips).reshape(strips.shape[0], -1)


@dataclass
class BranchHead:
    proj: np.ndarray
    gamma: np.ndarray
    beta: np.ndarray
    classifier: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray

    def params(self) -> dict:
        return {name: getattr(self, name) for name in PARAM_NAMES}


@dataclass
class MetricHead:
    branches: dict
    classes: list
    levels: tuple = (1, 2, 4, 8)
    eps: float = 1e-5
    meta: dict = field(default_factory=dict)

    def embed(self, parts: dict) -> np.ndarray:
        """Retrieval embeddings ``(N, D)``: concatenated pre-BN branch outputs."""
        return np.concatenate([project(h.proj, parts[b]) for b, h in self.branches.items()], axis=1)

    def layout(self) -> dict:
        return {b: {"strips": int(h.proj.shape[0]), "dim": int(h.proj.shape[1]),
                    "channels": int(h.proj.shape[2])} for b, h in self.branches.items()}


def init_head(parts: dict, classes, embed_dim: int, rng: np.random.Generator, levels=(1, 2, 4, 8)) -> MetricHead:
    branches = {}
    for b, arr in parts.items():
        _, s, c = arr.shape
        width = s * embed_dim
        branches[b] = BranchHead(
            proj=identity_projection(s, c, embed_dim),
            gamma=np.ones(width),
            beta=np.zeros(width),
            classifier=rng.normal(0.0, 0.01, size=(len(classes), width)),
            running_mean=np.zeros(width),
            running_var=np.ones(width),
        )
    return MetricHead(branches, list(classes), tuple(levels))


def bnneck_forward(e, head: BranchHead, mode: str = "train", eps: float = 1e-5, momentum: float = 0.1):
    """BNNeck: ``f = BN(e)``, ``z = classifier @ f``. Train mode updates running stats."""
    if mode not in ("train", "eval"):
        raise ParameterError(f"mode must be 'train' or 'eval', got {mode!r}")
    train = mode == "train"
    f, cache = bn_forward(e, head.gamma, head.beta, head.running_mean, head.running_var, train, eps)
    if train:
        bnneck_running_update(head, np.asarray(e, dtype=np.float64), momentum)
    return f, f @ head.classifier.T, cache


def branch_loss(params: dict, strips, labels, margin: float, eps: float = 1e-5):
    """Triplet on pre-BN embedding + CE on post-BN logits for one branch.

    Returns ``(l_tri, l_ce, grads, e)`` with ``grads`` keyed like ``params``.
    """
    strips = np.asarray(strips, dtype=np.float64)
    b, s, c = strips.shape
    proj = params["proj"]
    e = project(proj, strips)
    l_tri, de = batch_hard_triplet(e, labels, margin)
    f, cache = bn_forward(e, params["gamma"], params["beta"], None, None, True, eps)
    z = f @ params["classifier"].T
    l_ce, dz = softmax_cross_entropy(z, labels)
    dcls = dz.T @ f
    de_bn, dgamma, dbeta = bn_backward(dz @ params["classifier"], cache)
    de = de + de_bn
    dproj = np.einsum("bsd,bsc->sdc", de.reshape(b, s, -1), strips)
    return l_tri, l_ce, {"proj": dproj, "gamma": dgamma, "beta": dbeta, "classifier": dcls}, e


def sgd_step(params: dict, grads: dict, state: dict, lr: float, momentum: float = 0.9, wd: float = 5e-4):
    """In place: ``v = momentum*v + grad + wd*param``; ``param -= lr*v``."""
    for name, p in params.items():
        v = state.get(name)
        if v is None:
            v = np.zeros_like(p)
        v = momentum * v + grads[name] + wd * p
        state[name] = v
        p -= lr * v


def train(parts: dict, labels, cfg: TrainConfig = TrainConfig(), levels=(1, 2, 4, 8)):
    """Fit a ``MetricHead`` on per-branch strip descriptors.

    ``parts`` maps branch -> ``(N, S, C)`` array, ``labels`` gives the identity
    of each of the N sequences. Returns ``(head, curve)`` where ``curve`` rows
    are ``(iteration, l_tri, l_ce, lr)``.
    """
    labels = [str(v) for v in labels]
    classes = sorted(set(labels))
    class_of = {c: i for i, c in enumerate(classes)}
    rng = np.random.default_rng(cfg.seed)
    parts = {b: np.asarray(a, dtype=np.float64) for b, a in parts.items()}
    for b, a in parts.items():
        if a.ndim != 3 or a.shape[0] != len(labels):
            raise ParameterError(f"branch {b}: {a.shape} descriptors for {len(labels)} labels")
    head = init_head(parts, classes, cfg.embed_dim, rng, levels)
    head.eps = cfg.bn_eps
    groups = {}
    for i, lab in enumerate(labels):
        groups.setdefault(lab, []).append(i)

    states = {b: {} for b in head.branches}
    curve = []
    warned = set()
    for it in range(cfg.iterations):
        batch = pk_sample(groups, cfg.P, cfg.K, rng)
        for ident in set(batch.resampled) - warned:
            log.info("identity %s has fewer than K=%d sequences; sampling with replacement", ident, cfg.K)
            warned.add(ident)
        idx = np.asarray(batch.refs)
        y = np.array([class_of[v] for v in batch.labels])
        lr = cfg.lr_at(it)
        tot_tri = tot_ce = 0.0
        for b, bh in head.branches.items():
            params = bh.params()
            l_tri, l_ce, grads, e = branch_loss(params, parts[b][idx], y, cfg.margin, cfg.bn_eps)
            bnneck_running_update(bh, e, cfg.bn_momentum)
            tot_tri += l_tri
            tot_ce += l_ce
            if not all(np.all(np.isfinite(g)) for g in grads.values()) or not np.isfinite(l_tri + l_ce):
                raise TrainingDiverged(
                    f"non-finite loss at iteration {it} (branch {b}: triplet={l_tri}, ce={l_ce}, lr={lr})")
            sgd_step(params, grads, states[b], lr, cfg.momentum, cfg.weight_decay)
        curve.append((it, tot_tri, tot_ce, lr))
    return head, curve


def bnneck_running_update(bh: BranchHead, e: np.ndarray, momentum: float):
    b = e.shape[0]
    bh.running_mean = (1 - momentum) * bh.running_mean + momentum * e.mean(0)
    bh.running_var = (1 - momentum) * bh.running_var + momentum * e.var(0) * b / (b - 1)


def save_head(directory, head: MetricHead) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for b, bh in head.branches.items():
        for name in (*PARAM_NAMES, "running_mean", "running_var"):
            container.save(d / f"{b}.{name}.gstk", np.asarray(getattr(bh, name), dtype=np.float32))
    layout = {
        "branches": list(head.branches),
        "layout": head.layout(),
        "classes": head.classes,
        "levels": list(head.levels),
        "eps": head.eps,
        "meta": head.meta,
    }
    (d / "head.json").write_text(json.dumps(layout, indent=1, sort_keys=True))


def load_head(directory) -> MetricHead:
    d = Path(directory)
    try:
        info = json.loads((d / "head.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read head layout in {d}: {exc}") from exc
    branches = {}
    for b in info["branches"]:
        arrays = {name: container.load(d / f"{b}.{name}.gstk").astype(np.float64)
                  for name in (*PARAM_NAMES, "running_mean", "running_var")}
        branches[b] = BranchHead(**arrays)
    return MetricHead(branches, info["classes"], tuple(info["levels"]), info["eps"], info.get("meta", {}))


def write_curve(path, curve) -> None:
    lines = ["iteration,l_tri,l_ce,lr"]
    lines += [f"{it},{tri:.9g},{ce:.9g},{lr:.9g}" for it, tri, ce, lr in curve]
    Path(path).write_text("\n".join(lines) + "\n")


def config_dict(cfg: TrainConfig) -> dict:
    out = asdict(cfg)
    out["milestones"] = list(cfg.milestone_iters())
    return out
