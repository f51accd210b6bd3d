"""Equivariant filter bank built from steerable convolutions over mixed-order fields.

Channels of a field map are grouped by order: all order-0 fields first, then
order-1, and so on. Within a group the channel index is
``field * (2l + 1) + m``.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from . import harmonics
from .autodiff import Tensor, ops

NONLINEARITIES = ("field-relu", "scalar-relu", "none")


@dataclass(frozen=True)
class FieldType:
    """Multiplicity of fields per order, e.g. ``FieldType({0: 16, 1: 16, 2: 4})``."""

    multiplicities: tuple

    def __init__(self, mults):
        if isinstance(mults, dict):
            items = mults.items()
        else:
            items = mults
        clean = tuple(sorted((int(l), int(n)) for l, n in items if int(n) > 0))
        for l, _ in clean:
            if not 0 <= l <= 2:
                raise ValueError(f"field order must be 0, 1 or 2, got {l}")
        object.__setattr__(self, "multiplicities", clean)

    @property
    def layout(self):
        return list(self.multiplicities)

    @property
    def dim(self):
        return sum(n * (2 * l + 1) for l, n in self.multiplicities)

    def count(self, l):
        return dict(self.multiplicities).get(l, 0)

    def offsets(self):
        """Start channel of each order block."""
        out, c = {}, 0
        for l, n in self.multiplicities:
            out[l] = c
            c += n * (2 * l + 1)
        return out

    @property
    def is_scalar(self):
        return all(l == 0 for l, _ in self.multiplicities)

    def n_gated(self):
        """Number of fields carrying a norm-nonlinearity bias."""
        return sum(n for l, n in self.multiplicities if l > 0)

    def to_dict(self):
        return {str(l): n for l, n in self.multiplicities}

    def __repr__(self):
        return "FieldType(" + ", ".join(f"{l}:{n}" for l, n in self.multiplicities) + ")"


@dataclass(frozen=True)
class LayerSpec:
    in_type: FieldType
    out_type: FieldType
    kernel: int = 5
    nonlinearity: str = "field-relu"

    def __post_init__(self):
        if self.kernel % 2 == 0 or self.kernel < 1:
            raise ValueError(f"kernel width must be odd, got {self.kernel}")
        if self.nonlinearity not in NONLINEARITIES:
            raise ValueError(f"unknown nonlinearity {self.nonlinearity!r}")
        if self.nonlinearity == "scalar-relu" and not self.out_type.is_scalar:
            raise ValueError("scalar-relu needs a scalar output type")


@dataclass(frozen=True)
class ModelConfig:
    layers: tuple
    channels: int
    seed: int = 0

    def __post_init__(self):
        if not self.layers:
            raise ValueError("model needs at least one layer")
        for a, b in zip(self.layers[:-1], self.layers[1:]):
            if a.out_type != b.in_type:
                raise ValueError(f"layer types do not chain: {a.out_type} -> {b.in_type}")
        last = self.layers[-1].out_type
        if not last.is_scalar or last.dim != self.channels:
            raise ValueError(f"final layer must produce {self.channels} scalar fields, got {last}")

    @classmethod
    def build(cls, hidden=None, n_layers=5, channels=64, kernel=5, seed=0):
        """Stack of ``n_layers`` convolutions, scalar input, ``hidden`` fields in between."""
        hidden = FieldType(hidden if hidden is not None else {0: 16, 1: 16, 2: 4})
        types = [FieldType({0: 1})] + [hidden] * (n_layers - 1) + [FieldType({0: channels})]
        layers = []
        for i in range(n_layers):
            nl = "scalar-relu" if i == n_layers - 1 else "field-relu"
            layers.append(LayerSpec(types[i], types[i + 1], kernel, nl))
        return cls(tuple(layers), channels, seed)

    @classmethod
    def default(cls, seed=0):
        return cls.build(seed=seed)

    def to_dict(self):
        return {
            "channels": self.channels,
            "seed": self.seed,
            "layers": [
                {"in": l.in_type.to_dict(), "out": l.out_type.to_dict(),
                 "kernel": l.kernel, "nonlinearity": l.nonlinearity}
                for l in self.layers
            ],
        }

    @classmethod
    def from_dict(cls, d):
        layers = tuple(
            LayerSpec(FieldType({int(k): v for k, v in l["in"].items()}),
                      FieldType({int(k): v for k, v in l["out"].items()}),
                      int(l["kernel"]), l["nonlinearity"])
            for l in d["layers"]
        )
        return cls(layers, int(d["channels"]), int(d.get("seed", 0)))


class BasisBank:
    """Basis kernels per (l_out, l_in, k), stacked as arrays of shape (n, 2lo+1, 2li+1, k, k, k)."""

    def __init__(self):
        self._cache = {}

    def get(self, l_out, l_in, k):
        key = (l_out, l_in, k)
        if key not in self._cache:
            elems = harmonics.build_kernel_basis(l_in, l_out, k)
            if elems:
                arr = np.stack([e.samples for e in elems])
            else:
                arr = np.zeros((0, 2 * l_out + 1, 2 * l_in + 1, k, k, k))
            arr.setflags(write=False)
            self._cache[key] = arr
        return self._cache[key]

    def perturb(self, l_out, l_in, k, index=0, rel=0.1):
        """Fault injection: scale the largest coefficient of one basis kernel by ``1 + rel``."""
        arr = self.get(l_out, l_in, k).copy()
        flat = arr[index].reshape(-1)
        j = int(np.argmax(np.abs(flat)))
        flat[j] *= 1.0 + rel
        arr[index] = flat.reshape(arr[index].shape)
        arr.setflags(write=False)
        self._cache[(l_out, l_in, k)] = arr

    def support(self, blocks, k):
        """Union of kernel offsets touched by the basis kernels of ``blocks``."""
        mask = np.zeros((k, k, k), dtype=bool)
        for lo, li in blocks:
            arr = self.get(lo, li, k)
            if len(arr):
                mask |= np.any(arr != 0, axis=(0, 1, 2))
        return mask

    def hash(self, l_out, l_in, k):
        return hashlib.sha256(np.ascontiguousarray(self.get(l_out, l_in, k)).tobytes()).hexdigest()


def _blocks(spec):
    for lo, _ in spec.out_type.multiplicities:
        for li, _ in spec.in_type.multiplicities:
            yield lo, li


class SteerableNet:
    """Filter bank F mapping a scalar volume to K non-negative scalar channels."""

    def __init__(self, config, bank=None):
        self.config = config
        self.bank = bank or BasisBank()

    # -- parameters --------------------------------------------------------

    def param_shapes(self):
        shapes = {}
        for i, spec in enumerate(self.config.layers):
            for lo, li in _blocks(spec):
                nb = self.bank.get(lo, li, spec.kernel).shape[0]
                if nb:
                    shapes[f"layer{i}.w{lo}{li}"] = (spec.out_type.count(lo), spec.in_type.count(li), nb)
            if spec.nonlinearity == "field-relu" and spec.out_type.n_gated():
                shapes[f"layer{i}.bias"] = (spec.out_type.n_gated(),)
        return shapes

    def n_params(self):
        return int(sum(np.prod(s) for s in self.param_shapes().values()))

    def init_params(self, seed=None):
        """Gaussian weights, variance 1 / (basis elements feeding each output field); zero biases."""
        rng = np.random.default_rng(self.config.seed if seed is None else seed)
        shapes = self.param_shapes()
        params = {}
        for i, spec in enumerate(self.config.layers):
            fan = {}
            for lo, li in _blocks(spec):
                nb = self.bank.get(lo, li, spec.kernel).shape[0]
                fan[lo] = fan.get(lo, 0) + spec.in_type.count(li) * nb
            for lo, li in _blocks(spec):
                name = f"layer{i}.w{lo}{li}"
                if name in shapes:
                    params[name] = rng.standard_normal(shapes[name]) / np.sqrt(fan[lo])
            if f"layer{i}.bias" in shapes:
                params[f"layer{i}.bias"] = np.zeros(shapes[f"layer{i}.bias"])
        return params

    # -- forward -----------------------------------------------------------

    def layer_kernel(self, i, params):
        """Assemble the full conv kernel of layer ``i`` from basis weights."""
        spec = self.config.layers[i]
        k = spec.kernel
        rows = []
        for lo, mo in spec.out_type.multiplicities:
            cols = []
            for li, mi in spec.in_type.multiplicities:
                name = f"layer{i}.w{lo}{li}"
                shape = (mo * (2 * lo + 1), mi * (2 * li + 1), k, k, k)
                if name not in params:
                    cols.append(Tensor._wrap(np.zeros(shape)))
                    continue
                basis = Tensor._wrap(self.bank.get(lo, li, k))
                blk = ops.einsum("abn,nopxyz->aobpxyz", params[name], basis)
                cols.append(ops.reshape(blk, shape))
            rows.append(cols[0] if len(cols) == 1 else ops.concatenate(cols, axis=1))
        return rows[0] if len(rows) == 1 else ops.concatenate(rows, axis=0)

    def layer(self, i, x, params):
        spec = self.config.layers[i]
        support = self.bank.support(_blocks(spec), spec.kernel)
        y = ops.conv3d(x, self.layer_kernel(i, params), support=support)
        if spec.nonlinearity == "scalar-relu":
            return ops.relu(y)
        if spec.nonlinearity == "field-relu":
            bias = params.get(f"layer{i}.bias", Tensor._wrap(np.zeros(0)))
            return ops.field_nonlinearity(y, spec.out_type.layout, bias)
        return y

    def forward(self, image, params, return_all=False):
        """Run the stack on a (D, H, W) or (1, D, H, W) image.

        ``params`` maps names to arrays or Tensors. With ``return_all`` the
        list of every layer output is returned.
        """
        params = {k: v if isinstance(v, Tensor) else Tensor._wrap(np.asarray(v, dtype=np.float64))
                  for k, v in params.items()}
        x = image if isinstance(image, Tensor) else Tensor._wrap(np.asarray(image, dtype=np.float64))
        if x.ndim == 3:
            x = ops.reshape(x, (1,) + x.shape)
        if x.shape[0] != self.config.layers[0].in_type.dim:
            raise ValueError(f"input has {x.shape[0]} channels, model expects {self.config.layers[0].in_type.dim}")
        outs = []
        for i in range(len(self.config.layers)):
            x = self.layer(i, x, params)
            outs.append(x)
        return outs if return_all else x

    def basis_hashes(self):
        out = {}
        for spec in self.config.layers:
            for lo, li in _blocks(spec):
                out[f"{lo}{li}k{spec.kernel}"] = self.bank.hash(lo, li, spec.kernel)
        return out


def fc_baseline_params(channels=64, side=12, units=1024):
    """Parameter count of one fully connected layer on flattened channel features."""
    return channels * side ** 3 * units + units


# -- checkpoints -----------------------------------------------------------

class CheckpointError(ValueError):
    pass


def save_checkpoint(path, net, params, extra=None):
    doc = {
        "format": "eqtrack-checkpoint/1",
        "config": net.config.to_dict(),
        "seed": net.config.seed,
        "basis_sha256": net.basis_hashes(),
        "params": {k: {"shape": list(np.shape(v)), "data": np.asarray(v, dtype=np.float64).ravel().tolist()}
                   for k, v in sorted(params.items())},
    }
    if extra:
        doc["extra"] = extra
    with open(path, "w") as fh:
        json.dump(doc, fh)
        fh.write("\n")


def load_checkpoint(path, bank=None):
    """Returns (net, params, extra); raises CheckpointError on hash or shape mismatch."""
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("format") != "eqtrack-checkpoint/1":
        raise CheckpointError(f"{path}: not an eqtrack checkpoint")
    net = SteerableNet(ModelConfig.from_dict(doc["config"]), bank)
    hashes = net.basis_hashes()
    if hashes != doc["basis_sha256"]:
        bad = sorted(k for k in hashes if hashes[k] != doc["basis_sha256"].get(k))
        raise CheckpointError(f"{path}: basis hash mismatch for blocks {bad}")
    shapes = net.param_shapes()
    params = {}
    for k, rec in doc["params"].items():
        if k not in shapes or tuple(rec["shape"]) != tuple(shapes[k]):
            raise CheckpointError(f"{path}: parameter {k} does not match the model")
        params[k] = np.array(rec["data"], dtype=np.float64).reshape(rec["shape"])
    missing = set(shapes) - set(params)
    if missing:
        raise CheckpointError(f"{path}: missing parameters {sorted(missing)}")
    return net, params, doc.get("extra", {})
