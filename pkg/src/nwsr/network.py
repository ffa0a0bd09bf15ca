"""Layer stack and the CNNnetSR / NWnetSR architectures.

Every layer keeps spatial size. Backward passes are explicit per layer
and rely on activations cached by the most recent forward call. Layers work
on channel-major ``(C, N, H, W)`` batches; `Network.forward` takes and
returns the usual ``(N, C, H, W)``.

CNNnetSR::

    conv3(c_in->F) -> [conv3 -> relu -> conv3 (+skip)] x blocks -> (+ head)
    -> conv3(F->32) -> conv1(32->1), linear output

NWnetSR replaces the head conv with ``nw_depth`` NW layers (9x9 then 3x3),
passing updated masks between them and dropping the last one. A deeper NW
layer receives ``R * M_up`` as its signal, so each output stays a weighted
average of confident inputs (for a binary mask this is the plain sparse
signal).
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from nwsr import nwlayer
from nwsr.ops import correlate, correlate_grad_w, correlate_grad_x

CHECKPOINT_VERSION = 1
MAGIC = b"NWSRPRM1"
TAIL_FILTERS = 32


class Param:
    __slots__ = ("name", "value", "grad", "kind")

    def __init__(self, name, value, kind):
        self.name = name
        self.value = value
        self.grad = np.zeros_like(value)
        self.kind = kind  # "conv", "nw" (L1-constrained) or "bias"

    def __repr__(self):
        return f"Param({self.name}, {self.value.shape}, {self.kind})"


class Conv:
    def __init__(self, name, c_in, t, k, rng):
        K = 2 * k + 1
        std = math.sqrt(2.0 / (c_in * K * K))
        self.W = Param(f"{name}.W", rng.normal(0.0, std, size=(t, c_in, K, K)), "conv")
        self.b = Param(f"{name}.b", np.zeros(t), "bias")
        self.k = k
        self._shape = None
        self._cols = None

    @property
    def params(self):
        return [self.W, self.b]

    def forward(self, x):
        W = self.W.value.astype(x.dtype, copy=False)
        out, self._cols = correlate(x, W)
        self._shape = x.shape
        return out + self.b.value.astype(x.dtype, copy=False)[:, None, None, None]

    def backward(self, g, input_grad=True):
        self.W.grad += correlate_grad_w(self._cols, g, self.W.value.shape)
        self.b.grad += g.sum(axis=(1, 2, 3))
        if not input_grad:
            return None
        return correlate_grad_x(g, self.W.value.astype(g.dtype, copy=False), self._shape)


class ReLU:
    params: list = []

    def forward(self, x):
        self._on = x > 0
        return np.where(self._on, x, 0.0).astype(x.dtype, copy=False)

    def backward(self, g):
        return np.where(self._on, g, 0.0).astype(g.dtype, copy=False)


class ResBlock:
    def __init__(self, name, filters, rng):
        self.conv1 = Conv(f"{name}.conv1", filters, filters, 1, rng)
        self.relu = ReLU()
        self.conv2 = Conv(f"{name}.conv2", filters, filters, 1, rng)

    @property
    def params(self):
        return self.conv1.params + self.conv2.params

    def forward(self, x):
        return x + self.conv2.forward(self.relu.forward(self.conv1.forward(x)))

    def backward(self, g):
        return g + self.conv1.backward(self.relu.backward(self.conv2.backward(g)))


class NW:
    def __init__(self, name, c_in, t, k, rng, eps=nwlayer.EPS):
        kern = nwlayer.init_nw_kernel(t, c_in, k, rng)
        self.W = Param(f"{name}.W", kern.W, "nw")
        self.b = Param(f"{name}.b", kern.b, "bias")
        self.k = k
        self.eps = eps
        self._cache = None

    @property
    def params(self):
        return [self.W, self.b]

    def forward(self, S, M):
        R, Mup, self._cache = nwlayer.nw_forward(S, M, nwlayer.NWKernel(self.W.value, self.b.value), self.eps)
        return R, Mup

    def backward(self, gR, gM=None, input_grad=True):
        gW, gb, gS, gMin = nwlayer.nw_backward(gR, self._cache, gM, input_grad)
        self.W.grad += gW
        self.b.grad += gb
        return gS, gMin


@dataclass(frozen=True)
class ArchSpec:
    arch: str  # "cnnnet_sr" or "nwnet_sr"
    blocks: int = 16
    filters: int = 64
    nw_depth: int = 3
    in_channels: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.arch not in ("cnnnet_sr", "nwnet_sr"):
            raise ValueError(f"unknown architecture {self.arch!r}")
        if self.blocks < 1 or self.filters < 1 or self.nw_depth < 1:
            raise ValueError("blocks, filters and nw_depth must be >= 1")

    def body(self):
        return {"blocks": self.blocks, "filters": self.filters, "tail": TAIL_FILTERS}


class Network:
    def __init__(self, spec: ArchSpec):
        self.spec = spec
        rng = np.random.default_rng(spec.seed)
        F = spec.filters
        if spec.arch == "cnnnet_sr":
            self.head = [Conv("head", spec.in_channels, F, 1, rng)]
        else:
            self.head = [NW("nw0", 1, F, 4, rng)]
            self.head += [NW(f"nw{i}", F, F, 1, rng) for i in range(1, spec.nw_depth)]
        self.blocks = [ResBlock(f"block{i}", F, rng) for i in range(spec.blocks)]
        self.tail = Conv("tail", F, TAIL_FILTERS, 1, rng)
        self.final = Conv("final", TAIL_FILTERS, 1, 0, rng)

    @property
    def params(self) -> list[Param]:
        out = []
        for layer in self.head + self.blocks + [self.tail, self.final]:
            out += layer.params
        return out

    @property
    def uses_mask(self):
        return self.spec.arch == "nwnet_sr"

    def descriptor(self):
        layers = [type(layer).__name__.lower() for layer in self.head]
        layers += ["resblock"] * len(self.blocks) + ["skip", "conv", "conv1x1"]
        return {**asdict(self.spec), "layers": layers, "body": self.spec.body()}

    def zero_grad(self):
        for p in self.params:
            p.grad[...] = 0.0

    def forward(self, x, mask=None):
        """Batched forward; `x` is ``(N, C, H, W)``. NWnetSR also needs `mask`."""
        if x.ndim != 4:
            raise ValueError(f"expected (N, C, H, W) input, got shape {x.shape}")
        if self.uses_mask and (mask is None or mask.shape != x.shape):
            raise ValueError("NWnetSR needs a mask with the shape of the sparse input")
        x = x.transpose(1, 0, 2, 3)
        if self.uses_mask:
            if x.shape[0] != 1:
                raise ValueError("NWnetSR takes a single-channel sparse input")
            S, M = x, mask.transpose(1, 0, 2, 3)
            self._head_cache = []
            for i, layer in enumerate(self.head):
                R, Mup = layer.forward(S, M)
                if i + 1 < len(self.head):
                    self._head_cache.append((R, Mup))
                    S, M = R * Mup, Mup
            h = R
        else:
            if mask is not None:
                raise ValueError("CNNnetSR takes a dense image only")
            if x.shape[0] != self.spec.in_channels:
                raise ValueError(f"expected {self.spec.in_channels} input channels, got {x.shape[0]}")
            h = self.head[0].forward(x)
        r = h
        for blk in self.blocks:
            r = blk.forward(r)
        y = self.tail.forward(r + h)
        return self.final.forward(y).transpose(1, 0, 2, 3)

    def backward(self, g, input_grad=False):
        """Accumulate parameter gradients for upstream ``(N, 1, H, W)`` gradient `g`.

        Returns the input gradient (``(N, C, H, W)``) when `input_grad` is set.
        """
        g = g.transpose(1, 0, 2, 3)
        g = self.tail.backward(self.final.backward(g))
        gh = g
        for blk in reversed(self.blocks):
            g = blk.backward(g)
        gh = gh + g
        if not self.uses_mask:
            gx = self.head[0].backward(gh, input_grad)
        else:
            gR, gM = gh, None
            for i in range(len(self.head) - 1, -1, -1):
                gS, gMin = self.head[i].backward(gR, gM, input_grad or i > 0)
                if i > 0:
                    R, Mup = self._head_cache[i - 1]
                    gR, gM = gS * Mup, gMin + gS * R
            gx = gS
        return None if gx is None else gx.transpose(1, 0, 2, 3)

    def predict(self, x, mask=None, dtype=np.float64):
        """Single-image inference on a 2-D array."""
        xb = np.asarray(x, dtype=dtype)[None, None]
        mb = None if mask is None else np.asarray(mask, dtype=dtype)[None, None]
        return self.forward(xb, mb)[0, 0].astype(np.float64)

    def get_flat(self):
        return np.concatenate([p.value.ravel() for p in self.params])

    def set_flat(self, flat):
        flat = np.asarray(flat, dtype=np.float64)
        i = 0
        for p in self.params:
            n = p.value.size
            p.value[...] = flat[i : i + n].reshape(p.value.shape)
            i += n
        if i != flat.size:
            raise ValueError(f"parameter blob has {flat.size} values, network needs {i}")

    def n_params(self):
        return sum(p.value.size for p in self.params)


def build_cnnnet_sr(blocks, filters, in_channels=1, seed=0) -> Network:
    return Network(ArchSpec("cnnnet_sr", blocks, filters, 1, in_channels, seed))


def build_nwnet_sr(blocks, filters, nw_depth=3, seed=0) -> Network:
    return Network(ArchSpec("nwnet_sr", blocks, filters, nw_depth, 1, seed))


def param_count(spec: ArchSpec):
    """Closed-form parameter count of an architecture."""
    F = spec.filters
    conv = lambda ci, co, K: ci * co * K * K + co  # noqa: E731
    if spec.arch == "cnnnet_sr":
        head = conv(spec.in_channels, F, 3)
    else:
        head = conv(1, F, 9) + (spec.nw_depth - 1) * conv(F, F, 3)
    return head + spec.blocks * 2 * conv(F, F, 3) + conv(F, TAIL_FILTERS, 3) + conv(TAIL_FILTERS, 1, 1)


# --- checkpoints ----------------------------------------------------------


def save_checkpoint(net: Network, path, extra=None):
    """Write ``<path>.json`` (descriptor, shapes) and ``<path>.bin`` (LE float64)."""
    path = Path(path)
    meta = {
        "version": CHECKPOINT_VERSION,
        "descriptor": net.descriptor(),
        "params": [{"name": p.name, "shape": list(p.value.shape), "kind": p.kind} for p in net.params],
        "dtype": "<f8",
    }
    if extra:
        meta["extra"] = extra
    path.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    with open(path.with_suffix(".bin"), "wb") as fh:
        fh.write(MAGIC)
        fh.write(np.uint32(CHECKPOINT_VERSION).astype("<u4").tobytes())
        fh.write(net.get_flat().astype("<f8").tobytes())


def load_checkpoint(path) -> Network:
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    if meta.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {meta.get('version')}")
    d = meta["descriptor"]
    spec = ArchSpec(d["arch"], d["blocks"], d["filters"], d["nw_depth"], d["in_channels"], d["seed"])
    net = Network(spec)
    raw = path.with_suffix(".bin").read_bytes()
    if raw[:8] != MAGIC:
        raise ValueError(f"{path.with_suffix('.bin')}: bad magic")
    version = int(np.frombuffer(raw[8:12], dtype="<u4")[0])
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported parameter blob version {version}")
    net.set_flat(np.frombuffer(raw[12:], dtype="<f8"))
    for p, m in zip(net.params, meta["params"]):
        if p.name != m["name"] or list(p.value.shape) != m["shape"]:
            raise ValueError(f"checkpoint layout mismatch at {m['name']}")
    return net
