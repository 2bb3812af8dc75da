"""Parameter creation, sharding, and serialization.

Master parameters for a (model, strategy) pair are created in one fixed,
documented order so that every execution strategy can be seeded from the
same master set and compared gradient-for-gradient:

1. tokenizer:       tok.w [C, P*P, D], tok.b [C, D]
2. special tokens:  special.channel_id [C, D], special.pos [S, D],
                    special.meta_w [4, D], special.meta_b [D]
3. aggregation:
   - flat model:        agg.flat.{q|wq,wk,wv,wo,bo|rq}
   - hierarchical model: agg.slab0.l{level}.g{group}.<node params>
   - dchag strategy:    agg.slab{r}... for r in 0..tp-1, then agg.final.*
4. transformer:     vit.blk{i}.{ln1.g, ln1.b, wq, bq, wk, bk, wv, bv,
                    wo, bo, ln2.g, ln2.b, w1, b1, w2, b2} for i in 0..L-1
5. decoder:         dec.mask [D], dec.proj.w [D, Dd], dec.proj.b [Dd],
                    dec.pos [S, Dd], dec.blk{i}.* (block layout above,
                    width Dd), dec.head.w [Dd, C*P*P], dec.head.b [C*P*P]

Weights are truncated-normal (std 0.02), biases zero, layernorm gains one.
Cross-attention aggregation nodes carry {q, wq, wk, wv, wo, bo} in the
single_query variant ({rq} instead of {q} in full_cross); linear nodes
carry {mix [g], w [D, D], b [D]}.
"""

from __future__ import annotations

import csv

import numpy as np

from .config import ConfigError, ModelConfig, ParallelConfig, StrategyConfig, TreeSpec, build_tree_spec
from .rng import RngState


def _agg_node_specs(prefix: str, variant: str, embed: int):
    specs = []
    if variant == "single_query":
        specs.append((f"{prefix}.q", (embed,), "normal"))
    specs += [
        (f"{prefix}.wq", (embed, embed), "normal"),
        (f"{prefix}.wk", (embed, embed), "normal"),
        (f"{prefix}.wv", (embed, embed), "normal"),
        (f"{prefix}.wo", (embed, embed), "normal"),
        (f"{prefix}.bo", (embed,), "zeros"),
    ]
    if variant == "full_cross":
        specs.append((f"{prefix}.rq", (embed,), "normal"))
    return specs


def _linear_node_specs(prefix: str, group: int, embed: int):
    return [
        (f"{prefix}.mix", (group,), "normal"),
        (f"{prefix}.w", (embed, embed), "normal"),
        (f"{prefix}.b", (embed,), "zeros"),
    ]


def _tree_specs(prefix: str, tree: TreeSpec, layer_kind: str, variant: str, embed: int):
    specs = []
    for li, level in enumerate(tree.levels):
        for gi, group in enumerate(level):
            node = f"{prefix}.l{li}.g{gi}"
            if layer_kind == "linear":
                specs += _linear_node_specs(node, group, embed)
            else:
                specs += _agg_node_specs(node, variant, embed)
    return specs


def _block_specs(prefix: str, width: int, mlp_ratio: int):
    hidden = mlp_ratio * width
    return [
        (f"{prefix}.ln1.g", (width,), "ones"),
        (f"{prefix}.ln1.b", (width,), "zeros"),
        (f"{prefix}.wq", (width, width), "normal"),
        (f"{prefix}.bq", (width,), "zeros"),
        # no key bias: it cancels in the softmax, leaving a dead parameter
        (f"{prefix}.wk", (width, width), "normal"),
        (f"{prefix}.wv", (width, width), "normal"),
        (f"{prefix}.bv", (width,), "zeros"),
        (f"{prefix}.wo", (width, width), "normal"),
        (f"{prefix}.bo", (width,), "zeros"),
        (f"{prefix}.ln2.g", (width,), "ones"),
        (f"{prefix}.ln2.b", (width,), "zeros"),
        (f"{prefix}.w1", (width, hidden), "normal"),
        (f"{prefix}.b1", (hidden,), "zeros"),
        (f"{prefix}.w2", (hidden, width), "normal"),
        (f"{prefix}.b2", (width,), "zeros"),
    ]


def rank_tree(model: ModelConfig, strategy: StrategyConfig) -> TreeSpec:
    """Aggregation tree applied by each rank to its channel slab."""
    return build_tree_spec(strategy.local_channels(model), strategy.max_group)


def parameter_specs(model: ModelConfig, strategy: StrategyConfig):
    """Ordered (name, shape, init) triples for the master parameter set."""
    c, d, s, p = model.channels, model.embed, model.seq, model.patch
    specs = [
        ("tok.w", (c, p * p, d), "normal"),
        ("tok.b", (c, d), "zeros"),
        ("special.channel_id", (c, d), "normal"),
        ("special.pos", (s, d), "normal"),
        ("special.meta_w", (4, d), "normal"),
        ("special.meta_b", (d,), "zeros"),
    ]
    if strategy.kind == "dchag":
        tree = rank_tree(model, strategy)
        for r in range(strategy.tp_degree):
            specs += _tree_specs(f"agg.slab{r}", tree, strategy.agg_layer_kind,
                                 model.agg_variant, d)
        specs += _agg_node_specs("agg.final", model.agg_variant, d)
    elif model.tree is not None:
        specs += _tree_specs("agg.slab0", model.tree, model.agg_layer_kind,
                             model.agg_variant, d)
    else:
        specs += _agg_node_specs("agg.flat", model.agg_variant, d)
    for i in range(model.depth):
        specs += _block_specs(f"vit.blk{i}", d, model.mlp_ratio)
    dd = model.decoder_dim
    specs += [
        ("dec.mask", (d,), "normal"),
        ("dec.proj.w", (d, dd), "normal"),
        ("dec.proj.b", (dd,), "zeros"),
        ("dec.pos", (s, dd), "normal"),
    ]
    for i in range(model.decoder_depth):
        specs += _block_specs(f"dec.blk{i}", dd, model.mlp_ratio)
    specs += [
        ("dec.head.w", (dd, c * p * p), "normal"),
        ("dec.head.b", (c * p * p,), "zeros"),
    ]
    return specs


def create_master(model: ModelConfig, strategy: StrategyConfig,
                  rng: RngState) -> dict[str, np.ndarray]:
    """Draw all parameters from `rng` in the fixed creation order."""
    master = {}
    for name, shape, init in parameter_specs(model, strategy):
        if init == "zeros":
            master[name] = np.zeros(shape)
        elif init == "ones":
            master[name] = np.ones(shape)
        else:
            master[name] = rng.truncated_normal(shape, std=0.02)
    return master


# -- sharding ---------------------------------------------------------------

_COL_SPLIT = ("wq", "wk", "wv", "w1")  # split output features
_COL_BIAS = ("bq", "bv", "b1")
_ROW_SPLIT = ("wo", "w2")  # split input features; partial sums downstream

_CHANNEL_SLABBED = ("tok.w", "tok.b", "special.channel_id")


def _leaf(name: str) -> str:
    return name.rsplit(".", 1)[-1]


def _block_shard(name: str, arr: np.ndarray, tp: int, idx: int) -> np.ndarray:
    leaf = _leaf(name)
    if leaf in _COL_SPLIT:
        w = arr.shape[1] // tp
        return arr[:, idx * w:(idx + 1) * w]
    if leaf in _COL_BIAS:
        w = arr.shape[0] // tp
        return arr[idx * w:(idx + 1) * w]
    if leaf in _ROW_SPLIT:
        w = arr.shape[0] // tp
        return arr[idx * w:(idx + 1) * w, :]
    return arr  # ln/g, bo, b2: replicated


def shard_for_rank(master: dict, model: ModelConfig, strategy: StrategyConfig,
                   tp_index: int) -> dict[str, np.ndarray]:
    """Per-rank parameter arrays (copies; the rank owns them).

    TP attention shards partition heads: rank r owns heads
    [r*H/tp, (r+1)*H/tp), realized as contiguous column/row slices.
    """
    tp = strategy.tp_degree
    out = {}
    slab = model.channels // tp if strategy.kind in ("dist_token", "dchag") else None
    for name, arr in master.items():
        if slab is not None and name in _CHANNEL_SLABBED:
            out[name] = arr[tp_index * slab:(tp_index + 1) * slab].copy()
            continue
        if name.startswith("agg.slab"):
            # per-rank partial aggregation tree: keep only this rank's slab
            owner = int(name.split(".")[1][4:])
            if owner == tp_index:
                out[name] = arr.copy()
            continue
        if name.startswith("agg.final."):
            if strategy.final_layer_tp_split and _leaf(name) not in ("q", "rq"):
                out[name] = _block_shard(name, arr, tp, tp_index).copy()
            else:
                out[name] = arr.copy()
            continue
        if name.startswith("agg.flat."):
            if strategy.kind in ("tp_only", "dist_token") and _leaf(name) not in ("q", "rq"):
                out[name] = _block_shard(name, arr, tp, tp_index).copy()
            else:
                out[name] = arr.copy()
            continue
        if name.startswith("vit.blk"):
            split = strategy.kind in ("tp_only", "dist_token") or (
                strategy.kind == "dchag" and strategy.vit_tp_split)
            if split:
                out[name] = _block_shard(name, arr, tp, tp_index).copy()
            else:
                out[name] = arr.copy()
            continue
        out[name] = arr.copy()  # tokenizer (tp_only), special, decoder
    return out


def unshard_grads(per_rank: list[dict], master: dict, model: ModelConfig,
                  strategy: StrategyConfig) -> dict[str, np.ndarray]:
    """Reassemble per-rank gradient dicts into master layout.

    Split axes are concatenated in rank order; slabs are stacked; replicated
    entries are taken from rank 0 (they are bit-identical by construction,
    which equivalence tests assert separately).
    """
    tp = strategy.tp_degree
    out = {}
    for name, arr in master.items():
        if name.startswith("agg.slab"):
            owner = int(name.split(".")[1][4:])
            out[name] = per_rank[owner][name]
            continue
        if name in _CHANNEL_SLABBED and strategy.kind in ("dist_token", "dchag"):
            out[name] = np.concatenate([g[name] for g in per_rank], axis=0)
            continue
        grads = [g[name] for g in per_rank]
        if grads[0].shape == arr.shape:
            out[name] = grads[0]
            continue
        leaf = _leaf(name)
        if leaf in _COL_SPLIT:
            out[name] = np.concatenate(grads, axis=1)
        elif leaf in _COL_BIAS or leaf in _ROW_SPLIT:
            out[name] = np.concatenate(grads, axis=0)
        else:
            raise ConfigError(f"cannot unshard gradient for {name}")
        assert out[name].shape == arr.shape, name
    return out


# -- CSV round trip ----------------------------------------------------------


def dump_weights_csv(path, weights: dict) -> None:
    """One row per tensor: name, shape (x-joined), values (repr, bit-exact)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["name", "shape", "values"])
        for name in sorted(weights):
            arr = weights[name]
            shape = "x".join(str(d) for d in arr.shape)
            vals = ";".join(repr(float(v)) for v in arr.ravel())
            w.writerow([name, shape, vals])


def load_weights_csv(path) -> dict[str, np.ndarray]:
    out = {}
    with open(path, newline="") as fh:
        rdr = csv.reader(fh)
        header = next(rdr)
        if header != ["name", "shape", "values"]:
            raise ConfigError(f"unexpected weight CSV header: {header}")
        for name, shape, vals in rdr:
            dims = tuple(int(d) for d in shape.split("x")) if shape else ()
            arr = np.array([float(v) for v in vals.split(";")], dtype=np.float64)
            out[name] = arr.reshape(dims)
    return out
