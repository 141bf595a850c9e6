"""Multi-scale residual stacks built from BN -> ReLU -> dense layers.

A network is: dense stem (input_dim -> n_1/k), then scales of residual
blocks (width grows k-fold at each scale entry), then a BN -> ReLU ->
dense classifier head.  Block layout:

  y_L = shortcut(y_{L-1}) + F(F(y_{L-1}))

where F is the composite layer; the shortcut is a width-matching
BN -> ReLU -> dense layer in the first block of a scale and the identity
elsewhere.  Three variants cover the ablation study: the full network,
shortcuts removed (BN only), and BN removed (shortcuts only).

Backward exposes the boundary gradient at every block output so probes
can trace gradient variance block by block.
"""

import json
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .layers import BnParams, DenseParams, dense_backward, dense_forward, layer_backward, layer_forward
from .numerics import SeededRng, as_batch


class Variant(Enum):
    BN_RESIDUAL = 1   # full: BN + residual branches
    BN_ONLY = 2       # residual (shortcut) branches removed
    RESIDUAL_ONLY = 3 # BN sub-layers removed

    @classmethod
    def from_id(cls, v):
        if isinstance(v, cls):
            return v
        return cls(int(v))


@dataclass
class NetSpec:
    scales: list            # [(blocks_per_scale, width), ...] in forward order
    input_dim: int
    num_classes: int
    k: int = 2
    variant: Variant = Variant.BN_RESIDUAL
    bn_epsilon: float = 1e-5
    init_scale: float = 1.0  # multiplier on the xavier bound

    def __post_init__(self):
        self.variant = Variant.from_id(self.variant)
        self.scales = [(int(n), int(w)) for n, w in self.scales]
        if not self.scales:
            raise ValueError("need at least one scale")
        for n, w in self.scales:
            if n < 1:
                raise ValueError("each scale needs at least one block")
        widths = [w for _, w in self.scales]
        for prev, cur in zip(widths, widths[1:]):
            if cur != self.k * prev:
                raise ValueError(f"scale widths must grow k={self.k} fold, got {prev} -> {cur}")
        if widths[0] % self.k != 0:
            raise ValueError(f"first scale width {widths[0]} not divisible by k={self.k}")

    @property
    def num_blocks(self):
        return sum(n for n, _ in self.scales)

    def to_json(self):
        return json.dumps({
            "scales": self.scales, "input_dim": self.input_dim,
            "num_classes": self.num_classes, "k": self.k,
            "variant": self.variant.value, "bn_epsilon": self.bn_epsilon,
            "init_scale": self.init_scale,
        })

    @classmethod
    def from_json(cls, s):
        d = json.loads(s)
        d["scales"] = [tuple(x) for x in d["scales"]]
        return cls(**d)


@dataclass
class Block:
    block_index: int      # 1-based, forward order over the whole net
    scale_index: int      # 1-based
    index_in_scale: int   # 1-based; 1 means first block of its scale
    in_width: int
    width: int
    bn1: BnParams | None
    w1: DenseParams       # first branch layer, in_width -> width
    bn2: BnParams | None
    w2: DenseParams       # second branch layer, width -> width
    sc_bn: BnParams | None
    sc_w: DenseParams | None  # shortcut widening, first block of a scale only

    @property
    def first_of_scale(self):
        return self.index_in_scale == 1


@dataclass
class Model:
    spec: NetSpec
    stem: DenseParams
    blocks: list
    head_bn: BnParams | None
    head_w: DenseParams

    def param_items(self):
        """(name, array) pairs in deterministic forward order."""
        items = [("stem.w", self.stem.weights)]
        for b in self.blocks:
            tag = f"b{b.block_index:02d}"
            if b.sc_bn is not None:
                items += [(f"{tag}.sc.bn.gamma", b.sc_bn.gamma), (f"{tag}.sc.bn.beta", b.sc_bn.beta)]
            if b.sc_w is not None:
                items.append((f"{tag}.sc.w", b.sc_w.weights))
            if b.bn1 is not None:
                items += [(f"{tag}.l1.bn.gamma", b.bn1.gamma), (f"{tag}.l1.bn.beta", b.bn1.beta)]
            items.append((f"{tag}.l1.w", b.w1.weights))
            if b.bn2 is not None:
                items += [(f"{tag}.l2.bn.gamma", b.bn2.gamma), (f"{tag}.l2.bn.beta", b.bn2.beta)]
            items.append((f"{tag}.l2.w", b.w2.weights))
        if self.head_bn is not None:
            items += [("head.bn.gamma", self.head_bn.gamma), ("head.bn.beta", self.head_bn.beta)]
        items.append(("head.w", self.head_w.weights))
        return items

    def bn_layers(self):
        """(name, BnParams) pairs in forward order."""
        out = []
        for b in self.blocks:
            tag = f"b{b.block_index:02d}"
            if b.sc_bn is not None:
                out.append((f"{tag}.sc.bn", b.sc_bn))
            if b.bn1 is not None:
                out.append((f"{tag}.l1.bn", b.bn1))
            if b.bn2 is not None:
                out.append((f"{tag}.l2.bn", b.bn2))
        if self.head_bn is not None:
            out.append(("head.bn", self.head_bn))
        return out


def xavier_uniform(n_out, n_in, rng: SeededRng, scale=1.0):
    bound = scale * np.sqrt(6.0 / (n_in + n_out))
    return rng.uniform(-bound, bound, (n_out, n_in))


def build_network(spec: NetSpec, rng: SeededRng) -> Model:
    """Build with xavier weights, gamma=1, beta=0.

    All variants draw the identical weight stream (the full layout is
    sampled, then pruned), so shared tensors are bit-identical across
    variants built from the same seed.
    """
    has_bn = spec.variant is not Variant.RESIDUAL_ONLY
    keep_shortcut = spec.variant is not Variant.BN_ONLY
    eps = spec.bn_epsilon

    def bn(width):
        return BnParams(np.ones(width), np.zeros(width), eps) if has_bn else None

    stem_out = spec.scales[0][1] // spec.k
    stem = DenseParams(xavier_uniform(stem_out, spec.input_dim, rng, spec.init_scale))

    blocks = []
    in_width = stem_out
    block_index = 0
    for scale_index, (n_blocks, width) in enumerate(spec.scales, start=1):
        for j in range(1, n_blocks + 1):
            block_index += 1
            first = j == 1
            # fixed draw order keeps streams aligned across variants
            sc_weights = xavier_uniform(width, in_width, rng, spec.init_scale) if first else None
            w1 = DenseParams(xavier_uniform(width, in_width, rng, spec.init_scale))
            w2 = DenseParams(xavier_uniform(width, width, rng, spec.init_scale))
            sc_w = DenseParams(sc_weights) if (first and keep_shortcut) else None
            sc_bn = bn(in_width) if (first and keep_shortcut) else None
            blocks.append(Block(block_index, scale_index, j, in_width, width,
                                bn(in_width), w1, bn(width), w2, sc_bn, sc_w))
            in_width = width

    head_bn = bn(in_width)
    head_w = DenseParams(xavier_uniform(spec.num_classes, in_width, rng, spec.init_scale))
    return Model(spec, stem, blocks, head_bn, head_w)


@dataclass
class BlockCache:
    l1: object
    l2: object
    sc: object | None


@dataclass
class NetCache:
    stem_in: np.ndarray
    block_caches: list
    head_cache: object


def block_forward(x, b: Block, variant: Variant):
    t, c1 = layer_forward(x, b.bn1, b.w1)
    yhat, c2 = layer_forward(t, b.bn2, b.w2)
    if variant is Variant.BN_ONLY:
        return yhat, BlockCache(c1, c2, None)
    if b.first_of_scale:
        ysc, csc = layer_forward(x, b.sc_bn, b.sc_w)
        return ysc + yhat, BlockCache(c1, c2, csc)
    return x + yhat, BlockCache(c1, c2, None)


def block_backward(dy, b: Block, cache: BlockCache, variant: Variant):
    """Returns (dx, grads-by-name, (shortcut_grad, branch_grad))."""
    dt, g2 = layer_backward(dy, cache.l2, b.bn2, b.w2)
    dx_branch, g1 = layer_backward(dt, cache.l1, b.bn1, b.w1)
    grads = {}
    tag = f"b{b.block_index:02d}"
    _store_layer_grads(grads, f"{tag}.l1", g1, b.bn1)
    _store_layer_grads(grads, f"{tag}.l2", g2, b.bn2)
    if variant is Variant.BN_ONLY:
        return dx_branch, grads, (None, dx_branch)
    if b.first_of_scale:
        dx_sc, gsc = layer_backward(dy, cache.sc, b.sc_bn, b.sc_w)
        _store_layer_grads(grads, f"{tag}.sc", gsc, b.sc_bn)
    else:
        dx_sc = dy
    return dx_sc + dx_branch, grads, (dx_sc, dx_branch)


def _store_layer_grads(grads, prefix, g, bn):
    grads[f"{prefix}.w"] = g.dw
    if bn is not None:
        grads[f"{prefix}.bn.gamma"] = g.dgamma
        grads[f"{prefix}.bn.beta"] = g.dbeta


def network_forward(model: Model, x):
    x = as_batch(x)
    y, _ = dense_forward(x, model.stem)
    caches = []
    for b in model.blocks:
        y, c = block_forward(y, b, model.spec.variant)
        caches.append(c)
    logits, head_cache = layer_forward(y, model.head_bn, model.head_w)
    return logits, NetCache(x, caches, head_cache)


def network_backward(model: Model, cache: NetCache, dlogits):
    """Backpropagate; returns (grads, boundary_grads, branch_pairs).

    boundary_grads[i] is the full gradient batch at block (i+1)'s output;
    branch_pairs[i] holds the (shortcut, branch) gradient summands at that
    block's input for the additivity check.
    """
    grads = {}
    n = len(model.blocks)
    boundary_grads = [None] * n
    branch_pairs = [None] * n

    dy, g_head = layer_backward(dlogits, cache.head_cache, model.head_bn, model.head_w)
    _store_layer_grads(grads, "head", g_head, model.head_bn)

    for i in range(n - 1, -1, -1):
        boundary_grads[i] = dy
        dy, bg, pair = block_backward(dy, model.blocks[i], cache.block_caches[i], model.spec.variant)
        grads.update(bg)
        branch_pairs[i] = pair

    dx, dw_stem = dense_backward(dy, cache.stem_in, model.stem)
    grads["stem.w"] = dw_stem
    return grads, boundary_grads, branch_pairs


def save_checkpoint(model: Model, path):
    """Binary dump of every parameter tensor plus the net spec; bit-exact."""
    arrays = {name: arr for name, arr in model.param_items()}
    arrays["__spec__"] = np.frombuffer(model.spec.to_json().encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path) -> Model:
    with np.load(path) as data:
        spec = NetSpec.from_json(bytes(data["__spec__"]).decode())
        model = build_network(spec, SeededRng(0))
        for name, arr in model.param_items():
            arr[...] = data[name]
    return model
