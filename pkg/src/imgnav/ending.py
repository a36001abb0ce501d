"""Navigation ending classifier: pair labelling, sampling, training and the stop rule."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import nn
from .errors import DatasetDegeneracyError, InvalidInputError
from .geometry import Pose
from .gridworld import Panorama

POSITIVE_RADIUS_M = 1.0

Trajectory = list[tuple[Panorama, Pose]]


def label_pair(d_ij: float) -> int:
    if not d_ij >= 0.0:  # also rejects NaN
        raise InvalidInputError(f"pair distance must be non-negative, got {d_ij}")
    return int(d_ij <= POSITIVE_RADIUS_M)


@dataclass(frozen=True)
class ObservationPair:
    o_i: Panorama
    o_j: Panorama
    d_ij: float
    label: int

    def to_json(self) -> dict:
        return {"o_i": self.o_i.to_json(), "o_j": self.o_j.to_json(), "d_ij": self.d_ij, "label": self.label}

    @classmethod
    def from_json(cls, d: dict) -> "ObservationPair":
        return cls(Panorama.from_json(d["o_i"]), Panorama.from_json(d["o_j"]), float(d["d_ij"]), int(d["label"]))


def _make_pair(traj: Trajectory, i: int, j: int) -> ObservationPair:
    d = traj[i][1].distance_to(traj[j][1])
    return ObservationPair(traj[i][0], traj[j][0], d, label_pair(d))


def _biased_pairs(trajectories, want: int, need: int, rng, max_tries: int) -> list[ObservationPair]:
    """Draw pairs of class ``want`` by steering the second index.

    Positives come from short index offsets, negatives from long ones.
    """
    found = []
    for _ in range(max_tries):
        if len(found) == need:
            break
        traj = trajectories[int(rng.integers(len(trajectories)))]
        n = len(traj)
        i = int(rng.integers(n))
        if want == 1:
            j = int(np.clip(i + rng.integers(-4, 5), 0, n - 1))
        else:
            j = int(rng.integers(n))
        pair = _make_pair(traj, i, j)
        if pair.label == want:
            found.append(pair)
    return found


def sample_pairs(trajectories: list[Trajectory], n: int, rng: np.random.Generator) -> list[ObservationPair]:
    """Uniform (trajectory, i, j) draws, then topped up so each class holds
    at least ``n // 4`` pairs where possible.

    A shortage of positives is fatal; a shortage of negatives is kept (a
    trajectory that never moves cannot produce any).
    """
    trajectories = [t for t in trajectories if len(t) > 0]
    if n <= 0 or not trajectories:
        raise InvalidInputError("need n > 0 and at least one non-empty trajectory")
    pairs = []
    for _ in range(n):
        traj = trajectories[int(rng.integers(len(trajectories)))]
        pairs.append(_make_pair(traj, int(rng.integers(len(traj))), int(rng.integers(len(traj)))))
    quota = n // 4
    for want in (1, 0):
        have = sum(p.label == want for p in pairs)
        if have >= quota:
            continue
        extra = _biased_pairs(trajectories, want, quota - have, rng, max_tries=200 * (quota - have))
        if want == 1 and len(extra) < quota - have:
            raise DatasetDegeneracyError(f"only {have + len(extra)} positive pairs obtainable, need {quota}")
        # overwrite majority-class pairs from the end
        slots = [k for k in range(n - 1, -1, -1) if pairs[k].label != want][:len(extra)]
        for k, pair in zip(slots, extra):
            pairs[k] = pair
    return pairs


def pairs_to_arrays(pairs: list[ObservationPair]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    cur = np.stack([p.o_i.as_vector() for p in pairs])
    goal = np.stack([p.o_j.as_vector() for p in pairs])
    labels = np.array([p.label for p in pairs], float)
    return cur, goal, labels


def save_pairs(pairs: list[ObservationPair], path) -> None:
    with Path(path).open("w") as fh:
        for p in pairs:
            fh.write(json.dumps(p.to_json()) + "\n")


def load_pairs(path) -> list[ObservationPair]:
    with Path(path).open() as fh:
        return [ObservationPair.from_json(json.loads(line)) for line in fh if line.strip()]


# ----------------------------------------------------------------- network


def init_nepm_params(rng: np.random.Generator, in_dim: int, hidden: int = 64, fusion: int = 64) -> nn.Params:
    p = nn.init_siamese(rng, "enc", in_dim, hidden, fusion)
    p["out.W"] = 0.01 * rng.normal(size=(1, fusion))
    p["out.b"] = np.zeros(1)
    return p


def nepm_logits(params: nn.Params, cur: np.ndarray, goal: np.ndarray):
    fused, c_siam = nn.siamese_forward(params, "enc", cur, goal)
    z, _ = nn.dense(fused, params["out.W"], params["out.b"])
    nn.check_finite(z, where="ending classifier forward")
    return z[:, 0], (c_siam, fused)


def nepm_forward(o_i: Panorama, o_j: Panorama, params: nn.Params) -> float:
    if o_i.n_rays != o_j.n_rays:
        raise InvalidInputError("panoramas differ in length")
    z, _ = nepm_logits(params, o_i.as_vector()[None], o_j.as_vector()[None])
    return float(nn.sigmoid(z)[0])


def bce_loss_and_grad(params: nn.Params, cur, goal, labels) -> tuple[float, nn.Params]:
    """Mean binary cross-entropy on logits, with its parameter gradient."""
    z, (c_siam, fused) = nepm_logits(params, cur, goal)
    # softplus(z) - y*z, written to stay finite for large |z|
    loss = float(np.mean(np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z))) - labels * z))
    dz = (nn.sigmoid(z) - labels) / len(z)
    grads: nn.Params = {}
    d_fused = nn.dense_backward(dz[:, None], fused, params["out.W"], grads, "out")
    nn.siamese_backward(params, "enc", d_fused, c_siam, grads)
    return loss, grads


def should_stop(current: Panorama, goal: Panorama, params: nn.Params, threshold: float = 0.5) -> bool:
    return nepm_forward(current, goal, params) >= threshold


# ---------------------------------------------------------------- training


@dataclass(frozen=True)
class NEPMTrainConfig:
    iters: int = 3000
    lr: float = 1e-3
    eps: float = 1e-5
    batch: int = 128
    holdout: float = 0.2


@dataclass
class NEPMReport:
    accuracy: float
    precision: float
    recall: float
    loss: float
    n_holdout: int
    asymmetry: float
    first_batch_loss: float

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def balanced_split(labels: np.ndarray, holdout: float, rng: np.random.Generator):
    """Index sets (train, held-out); the held-out set has equal class counts."""
    pos = rng.permutation(np.flatnonzero(labels == 1))
    neg = rng.permutation(np.flatnonzero(labels == 0))
    m = int(math.floor(holdout * min(len(pos), len(neg))))
    test = np.concatenate([pos[:m], neg[:m]])
    train = np.concatenate([pos[m:], neg[m:]])
    return train, test


class BalancedBatches:
    """Endless half-positive, half-negative batches, each class cycled in
    reshuffled epochs."""

    def __init__(self, labels: np.ndarray, idx: np.ndarray, batch: int, rng: np.random.Generator):
        self.pos = idx[labels[idx] == 1]
        self.neg = idx[labels[idx] == 0]
        if len(self.pos) == 0 or len(self.neg) == 0:
            raise DatasetDegeneracyError("both classes are needed to build a balanced batch")
        self.half = batch // 2
        self.rng = rng
        self._queues = {1: np.empty(0, int), 0: np.empty(0, int)}

    def _take(self, cls: int) -> np.ndarray:
        pool = self.pos if cls == 1 else self.neg
        q = self._queues[cls]
        while len(q) < self.half:
            q = np.concatenate([q, self.rng.permutation(pool)])
        self._queues[cls] = q[self.half:]
        return q[:self.half]

    def next(self) -> np.ndarray:
        return np.concatenate([self._take(1), self._take(0)])


def _classify_report(params, cur, goal, labels, threshold=0.5) -> tuple[float, float, float, float]:
    z, _ = nepm_logits(params, cur, goal)
    prob = nn.sigmoid(z)
    pred = prob >= threshold
    truth = labels == 1
    tp = float(np.sum(pred & truth))
    acc = float(np.mean(pred == truth))
    precision = tp / max(float(np.sum(pred)), 1.0)
    recall = tp / max(float(np.sum(truth)), 1.0)
    loss = float(np.mean(np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z))) - labels * z))
    return acc, precision, recall, loss


def train_nepm(
    pairs: list[ObservationPair],
    params: nn.Params,
    cfg: NEPMTrainConfig,
    rng: np.random.Generator,
) -> tuple[nn.Params, NEPMReport]:
    """Adam on balanced minibatches; reports metrics on a balanced held-out split."""
    cur, goal, labels = pairs_to_arrays(pairs)
    train_idx, test_idx = balanced_split(labels, cfg.holdout, rng)
    batches = BalancedBatches(labels, train_idx, cfg.batch, rng)
    opt = nn.AdamState(lr=cfg.lr, eps=cfg.eps)
    first_loss = float("nan")
    for it in range(cfg.iters):
        b = batches.next()
        loss, grads = bce_loss_and_grad(params, cur[b], goal[b], labels[b])
        if it == 0:
            first_loss = loss
        params = nn.adam_step(params, grads, opt)
    eval_idx = test_idx if len(test_idx) else train_idx
    acc, prec, rec, loss = _classify_report(params, cur[eval_idx], goal[eval_idx], labels[eval_idx])
    fwd = nn.sigmoid(nepm_logits(params, cur[eval_idx], goal[eval_idx])[0])
    bwd = nn.sigmoid(nepm_logits(params, goal[eval_idx], cur[eval_idx])[0])
    report = NEPMReport(acc, prec, rec, loss, int(len(test_idx)), float(np.mean(np.abs(fwd - bwd))), first_loss)
    return params, report
