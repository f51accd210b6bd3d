"""Adam training of filter-bank weights through the closed-form registration head."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import registration as reg
from .autodiff import Tape, Tensor
from .steerable import save_checkpoint

LOSSES = ("l2", "geo", "6d", "image")


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class Pair:
    """Reference and moving volume with the true transform (moving = T o reference)."""

    fixed: object
    moving: object
    transform: object = None
    fixed_mask: np.ndarray = None
    moving_mask: np.ndarray = None


class Adam:
    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        self.lr, self.betas, self.eps = lr, betas, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        b1, b2 = self.betas
        c1 = 1 - b1 ** self.t
        c2 = 1 - b2 ** self.t
        out = {}
        for k in sorted(params):
            g = grads[k]
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            mhat = self.m[k] / c1
            vhat = self.v[k] / c2
            out[k] = params[k] - self.lr * mhat / (np.sqrt(vhat) + self.eps)
        return out


def pair_loss(net, params, pair, kind):
    """Loss of one pair; ``params`` maps names to Tensors."""
    fa = net.forward(pair.fixed.data, params)
    fb = net.forward(pair.moving.data, params)
    pa, pb = reg.point_set(fa, pair.fixed), reg.point_set(fb, pair.moving)
    sol, _ = reg.register_point_sets(pa, pb)
    t = pair.transform
    if kind == "image":
        return reg.combined_loss(kind, sol.rotation, sol.translation, image_a=pair.fixed, image_b=pair.moving)
    return reg.combined_loss(kind, sol.rotation, sol.translation, t.rotation, t.translation)


def loss_and_grad(net, params, pair, kind):
    leaves = {k: Tensor(v, requires_grad=True, name=k) for k, v in params.items()}
    with Tape() as tape:
        loss = pair_loss(net, leaves, pair, kind)
    grads = tape.backward(loss, wrt=list(leaves.values()))
    return float(loss.data), {k: grads[t] for k, t in leaves.items()}


def evaluate_loss(net, params, pairs, kind):
    if not pairs:
        return None
    vals = []
    for p in pairs:
        try:
            vals.append(float(pair_loss(net, params, p, kind).data))
        except reg.DegenerateConfiguration:
            vals.append(math.inf)
    return float(np.mean(vals))


@dataclass
class TrainResult:
    params: dict
    best_params: dict
    best_epoch: int
    history: list = field(default_factory=list)


def train(net, params, pairs, kind="geo", epochs=300, lr=1e-3, val_pairs=None,
          log_path=None, checkpoint_path=None, dump_path=None, log=None):
    """Batch-size-one Adam over ``pairs`` in fixed order.

    Writes one JSON line per epoch and keeps the parameters with the best
    validation loss (training loss when no validation pairs are given).
    """
    if kind not in LOSSES:
        raise ValueError(f"loss must be one of {LOSSES}")
    if epochs < 0:
        raise ValueError("epochs must be >= 0")
    params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    opt = Adam(params, lr=lr)
    best, best_epoch, best_score = dict(params), 0, math.inf
    history = []
    fh = open(log_path, "w") if log_path else None
    try:
        for epoch in range(1, epochs + 1):
            losses = []
            for i, pair in enumerate(pairs):
                loss, grads = loss_and_grad(net, params, pair, kind)
                bad = [k for k, g in grads.items() if not np.all(np.isfinite(g))]
                if not math.isfinite(loss) or bad:
                    _dump(dump_path, epoch, i, loss, params, grads)
                    raise TrainingDiverged(f"non-finite loss or gradient at epoch {epoch}, pair {i}")
                params = opt.step(params, grads)
                losses.append(loss)
            train_loss = float(np.mean(losses))
            val_loss = evaluate_loss(net, params, val_pairs, kind)
            score = train_loss if val_loss is None else val_loss
            rec = {"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss}
            if score < best_score:
                best_score, best_epoch = score, epoch
                best = {k: v.copy() for k, v in params.items()}
                rec["best"] = True
                if checkpoint_path:
                    save_checkpoint(checkpoint_path, net, best, {"epoch": epoch, "score": score, "loss": kind})
            history.append(rec)
            if fh:
                fh.write(json.dumps(rec) + "\n")
                fh.flush()
            if log:
                log(rec)
    finally:
        if fh:
            fh.close()
    if checkpoint_path and best_epoch == 0:
        save_checkpoint(checkpoint_path, net, best, {"epoch": 0, "score": None, "loss": kind})
    return TrainResult(params, best, best_epoch, history)


def _dump(path, epoch, index, loss, params, grads):
    if not path:
        return
    doc = {
        "epoch": epoch, "pair": index, "loss": loss if math.isfinite(loss) else str(loss),
        "params": {k: {"finite": bool(np.all(np.isfinite(v))), "max_abs": float(np.nanmax(np.abs(v)))}
                   for k, v in params.items()},
        "grads": {k: {"finite": bool(np.all(np.isfinite(g)))} for k, g in grads.items()},
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2)
