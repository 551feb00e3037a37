"""Feedforward tanh networks compiled onto scalar graphs.

Parameters live in a single flat float64 vector with a per-layer layout so
that gradients, checkpoints, and the tape's parameter bindings all share one
addressing scheme.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .graph import GraphBuilder


class ModelError(Exception):
    pass


@dataclass(frozen=True)
class MlpConfig:
    """Shape and input scaling of a tanh MLP.

    ``input_norm`` holds (mean, std) per input dimension; inputs are mapped
    to (x - mean) / std before the first layer.
    """

    input_dim: int
    hidden: tuple
    output_dim: int = 1
    input_norm: tuple = None  # ((mean,...), (std,...)) or None for identity

    def __post_init__(self):
        if self.input_dim < 1 or self.output_dim < 1:
            raise ModelError("input and output dimensions must be >= 1")
        if len(self.hidden) == 0:
            raise ModelError("at least one hidden layer is required")
        if any(w < 1 for w in self.hidden):
            raise ModelError("hidden widths must be >= 1")
        if self.input_norm is not None:
            mean, std = self.input_norm
            if len(mean) != self.input_dim or len(std) != self.input_dim:
                raise ModelError("input_norm must match input_dim")
            if any(s <= 0 for s in std):
                raise ModelError("input_norm std entries must be positive")

    @property
    def layer_dims(self):
        return (self.input_dim,) + tuple(self.hidden) + (self.output_dim,)

    def layout(self):
        """Flat layout: for each layer, a weight block then a bias block."""
        records = []
        offset = 0
        dims = self.layer_dims
        for li in range(len(dims) - 1):
            fan_in, fan_out = dims[li], dims[li + 1]
            records.append((f"W{li}", (fan_out, fan_in), offset))
            offset += fan_out * fan_in
            records.append((f"b{li}", (fan_out,), offset))
            offset += fan_out
        return records, offset


@dataclass
class ParamVector:
    """Flat parameter array plus its (name, shape, offset) layout records."""

    values: np.ndarray
    layout: list

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        total = sum(int(np.prod(shape)) for _, shape, _ in self.layout)
        if self.values.shape != (total,):
            raise ModelError(
                f"layout covers {total} entries, values have shape "
                f"{self.values.shape}"
            )

    def __len__(self):
        return len(self.values)

    def block(self, name):
        for n, shape, offset in self.layout:
            if n == name:
                size = int(np.prod(shape))
                return self.values[offset:offset + size].reshape(shape)
        raise KeyError(name)

    def copy(self):
        return ParamVector(self.values.copy(), list(self.layout))


def init_xavier(config: MlpConfig, seed: int) -> ParamVector:
    """Uniform Xavier weights on +-sqrt(6/(fan_in+fan_out)); zero biases."""
    rng = np.random.Generator(np.random.Philox(key=seed))
    records, total = config.layout()
    values = np.zeros(total)
    dims = config.layer_dims
    for li in range(len(dims) - 1):
        fan_in, fan_out = dims[li], dims[li + 1]
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-bound, bound, size=fan_out * fan_in)
        _, _, offset = records[2 * li]
        values[offset:offset + fan_out * fan_in] = w
    return ParamVector(values, records)


def compile(config: MlpConfig):
    """One ScalarGraph per output coordinate, sharing the flat layout."""
    records, total = config.layout()
    offsets = {name: offset for name, _, offset in records}
    dims = config.layer_dims
    graphs = []
    for out_idx in range(config.output_dim):
        g = GraphBuilder(n_inputs=config.input_dim, n_params=total)
        # Normalized inputs.
        acts = []
        for k in range(config.input_dim):
            node = g.input(k)
            if config.input_norm is not None:
                mean = config.input_norm[0][k]
                std = config.input_norm[1][k]
                if mean != 0.0:
                    node = g.sub(node, g.const(mean))
                node = g.mul(node, g.const(1.0 / std))
            acts.append(node)
        for li in range(len(dims) - 1):
            fan_in, fan_out = dims[li], dims[li + 1]
            w_off = offsets[f"W{li}"]
            b_off = offsets[f"b{li}"]
            last = li == len(dims) - 2
            rows = [out_idx] if last else range(fan_out)
            # A contiguous run of activation nodes lets each neuron fuse
            # its whole weighted sum into one dot node; otherwise fall
            # back to a chain of fused multiply-adds.
            fused = (fan_in >= 2
                     and acts == list(range(acts[0], acts[0] + fan_in)))
            pre = []
            for r in rows:
                if fused:
                    s = g.dot(acts[0], fan_in, w_off + r * fan_in)
                    s = g.fmap(s, b_off + r, g.const(1.0))
                else:
                    s = g.param(b_off + r)
                    for c in range(fan_in):
                        s = g.fmap(s, w_off + r * fan_in + c, acts[c])
                pre.append(s)
            # Activations emitted together so the next layer sees a
            # contiguous node run.
            acts = pre if last else [g.tanh(s) for s in pre]
        graphs.append(g.build(acts[0]))
    return graphs


def save_params(theta: ParamVector, path):
    """Flat little-endian float64 array plus a JSON layout sidecar."""
    arr = np.asarray(theta.values, dtype="<f8")
    arr.tofile(str(path))
    sidecar = {
        "dtype": "<f8",
        "length": len(theta),
        "layout": [
            {"name": n, "shape": list(shape), "offset": int(off)}
            for n, shape, off in theta.layout
        ],
    }
    with open(str(path) + ".json", "w") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_params(path) -> ParamVector:
    with open(str(path) + ".json") as fh:
        sidecar = json.load(fh)
    values = np.fromfile(str(path), dtype=sidecar["dtype"])
    if len(values) != sidecar["length"]:
        raise ModelError("checkpoint length does not match sidecar")
    layout = [(rec["name"], tuple(rec["shape"]), rec["offset"])
              for rec in sidecar["layout"]]
    return ParamVector(values.astype(np.float64), layout)


def normalization_for_interval(bounds):
    """Mean/std pairs for inputs uniform on the given per-dim intervals."""
    means = []
    stds = []
    for lo, hi in bounds:
        means.append((lo + hi) / 2.0)
        stds.append((hi - lo) / np.sqrt(12.0))
    return (tuple(means), tuple(stds))
