"""Closed-form memory / FLOP / communication estimator and rank planner.

Activation accounting enumerates the tensors the engine actually
materializes (stored-for-backward, no checkpointing, views free), so the
estimate can be validated against the allocator at desk scale and then
evaluated at configurations far beyond it.  Key structural terms, per rank
and per step, in elements (multiply by precision bytes):

* tokenization: input slab B*Cs*S*pp, patch rows B*Cs*S*pp, and four
  token-sized tensors B*Cs*S*D (embedding matmul plus bias / channel-ID /
  positional adds); distributed tokenization adds the gathered full token
  tensor B*C*S*D.
* flat cross-attention aggregation over Ck token stacks: k/v (and q for
  full_cross) at width D/tp, three logit-sized tensors (raw, scaled,
  softmax) B*S*(H/tp)*Ck^2 for full_cross or B*S*(H/tp)*Ck for
  single_query, context+merge at D/tp, and for full_cross ~3.2 full-width
  B*S*Ck*D tensors (summed output, bias add, reduce stage) that tensor
  parallelism does NOT divide — the quadratic channel term is the
  full_cross logits.
* hierarchical aggregation: the flat-layer formula applied per tree node
  with Ck = group size, plus one level-output concat per level; linear
  nodes cost ~3 stream-sized tensors B*S*D each.
* transformer block at sequence T=S+1: ~8 full-width B*T*D tensors
  (norms, residuals, summed outputs), ~6 split-width B*T*D/tp, three
  attention-logit tensors B*(H/tp)*T^2, three MLP tensors B*T*mD/tp.
* decoder: projection/pos at Dd, decoder blocks via the block formula,
  prediction head 2*B*S*C*pp, and target/diff chain ~5*B*S*C*pp.

Parameter bytes follow the parameter table (transformer ~= 12*L*D^2 at
mlp_ratio 4); grads = params, optimizer = 2x params (moment pair), all at
`precision_bytes`.  FSDP divides transformer params/grads/optimizer by the
fsdp degree; communication uses ring-algorithm byte counts matching the
simulator's ledger formulas.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .config import (ConfigError, HardwareModel, ModelConfig, ParallelConfig,
                     StrategyConfig, TreeSpec, build_tree_spec)

COMPONENTS = ("tokenize", "aggregate", "vit", "decoder")

# Per-component activation fudge factors, fit once against engine
# allocator peaks on the desk-scale calibration grid and frozen.
CALIBRATION = {"tokenize": 1.0, "aggregate": 1.0, "vit": 1.0, "decoder": 1.0}


@dataclass
class ComponentCost:
    params_bytes: int = 0
    activation_bytes: int = 0
    grad_bytes: int = 0
    optimizer_bytes: int = 0
    flops: int = 0

    @property
    def total_bytes(self) -> int:
        return (self.params_bytes + self.activation_bytes + self.grad_bytes
                + self.optimizer_bytes)


@dataclass
class CostReport:
    components: dict
    comm: dict  # (phase, axis) -> payload bytes per rank per step
    bytes_per_gpu_budget: int
    fits: bool

    @property
    def total_bytes(self) -> int:
        return sum(c.total_bytes for c in self.components.values())

    @property
    def total_flops(self) -> int:
        return sum(c.flops for c in self.components.values())

    def component_total(self, name: str) -> int:
        return self.components[name].total_bytes

    def activation(self, name: str) -> int:
        return self.components[name].activation_bytes

    def forward_comm(self) -> int:
        return sum(v for (ph, _), v in self.comm.items() if ph == "forward")

    def share(self, *names) -> float:
        return sum(self.component_total(n) for n in names) / max(self.total_bytes, 1)


# -- parameter counts ----------------------------------------------------------


def _agg_node_params(d: int, variant: str) -> int:
    n = 4 * d * d + d  # wq, wk, wv, wo, bo
    n += d  # learned query (single_query) or reduce query (full_cross)
    return n


def _linear_node_params(d: int, group: int) -> int:
    return group + d * d + d


def _tree_params(tree: TreeSpec, d: int, layer_kind: str, variant: str) -> int:
    total = 0
    for level in tree.levels:
        for group in level:
            if layer_kind == "linear":
                total += _linear_node_params(d, group)
            else:
                total += _agg_node_params(d, variant)
    return total


def _block_params(d: int, m: int) -> int:
    return 4 * d * d + 2 * m * d * d + (3 + m) * d + 4 * d  # proj + biases + norms


# -- activation element counts (mirroring the executed graph) -------------------


def _attention_agg_acts(b, s, ck, d, heads, variant, tp):
    """Tensors one aggregation layer stores: key/value (query too for
    full_cross) at split width, three logit-sized tensors, context (+head
    merge copy when several heads), and the full-width output chain (the
    summed output gains one tensor under tensor parallelism)."""
    dl = d / tp
    hl = heads / tp
    out_chain = 2 + (1 if tp > 1 else 0)
    if variant == "single_query":
        kv = 2 * b * s * ck * dl
        logits = 3 * b * s * hl * ck
        ctx = b * s * dl  # single token: the head merge aliases
        return kv + logits + ctx + out_chain * b * s * d + d
    qkv = 3 * b * s * ck * dl
    logits = 3 * b * s * hl * ck * ck
    ctx = (2 if ck > 1 else 1) * b * s * ck * dl
    full = out_chain * b * s * ck * d
    reduce_stage = 3 * b * s * ck + b * s * d
    return qkv + logits + ctx + full + reduce_stage


def _linear_node_acts(b, s, d):
    return 3 * b * s * d  # mixed stream, matmul out, bias add


def _tree_acts(b, s, d, heads, tree: TreeSpec, layer_kind, variant):
    total = 0.0
    for level in tree.levels:
        for group in level:
            if layer_kind == "linear":
                total += _linear_node_acts(b, s, d)
            else:
                total += _attention_agg_acts(b, s, group, d, heads, variant, 1)
        if len(level) > 1:
            total += b * s * len(level) * d  # level-output concatenation
    return total


def _block_acts(b, t, d, heads, m, tp):
    """One transformer block: full-width tensors (norms, output chains,
    residuals; two more under tensor parallelism), split-width q/k/v and
    context (merge copy only with several local heads), attention logits,
    and the MLP hidden chain."""
    hl = heads / tp
    full = (8 + (2 if tp > 1 else 0)) * b * t * d
    split = (6 + (1 if hl > 1 else 0)) * b * t * d / tp
    logits = 3 * b * hl * t * t
    mlp = 3 * b * t * m * d / tp
    return full + split + logits + mlp


def _attention_agg_flops(b, s, ck, d, heads, variant, tp):
    proj = (2 if variant == "single_query" else 3) * 2 * b * s * ck * d * d / tp
    att = 2 * 2 * b * s * (heads / tp) * (ck * ck if variant == "full_cross" else ck) * (d / heads)
    out = 2 * b * s * (ck if variant == "full_cross" else 1) * d * d / tp
    return proj + att + out


def _block_flops(b, t, d, m, tp):
    qkv_out = 4 * 2 * b * t * d * d / tp
    att = 2 * 2 * b * t * t * d / tp
    mlp = 2 * 2 * b * t * d * m * d / tp
    return qkv_out + att + mlp


# -- the estimator ---------------------------------------------------------------


def estimate(model: ModelConfig, strategy: StrategyConfig,
             pconfig: ParallelConfig | None = None,
             hw: HardwareModel | None = None,
             precision_bytes: int = 8, batch: int = 1) -> CostReport:
    """Per-rank cost report for one training step.

    Channel counts need not divide tp here (slabs round up); the simulator
    is stricter.
    """
    hw = hw or HardwareModel()
    pconfig = pconfig or ParallelConfig(dchag_tp=strategy.tp_degree)
    pb = precision_bytes
    b = batch
    c, d, s = model.channels, model.embed, model.seq
    pp = model.patch_pixels
    heads, m, depth = model.heads, model.mlp_ratio, model.depth
    tp = strategy.tp_degree
    fsdp = pconfig.fsdp
    t = s + 1
    cloc = -(-c // tp) if strategy.kind in ("dist_token", "dchag") else c
    layer_tp = tp if strategy.kind in ("tp_only", "dist_token") or (
        strategy.kind == "dchag" and strategy.vit_tp_split) else 1

    comps = {name: ComponentCost() for name in COMPONENTS}
    comm: dict[tuple, float] = {}

    def add_comm(phase, axis, nbytes):
        comm[(phase, axis)] = comm.get((phase, axis), 0) + nbytes

    # --- tokenize ---------------------------------------------------------
    tok = comps["tokenize"]
    tok.params_bytes = (cloc * (pp * d + d) + cloc * d + s * d + 4 * d + d) * pb
    acts = b * cloc * s * pp * 2 + 4 * b * cloc * s * d  # input+patches, token chain
    if strategy.kind == "dist_token":
        acts += b * c * s * d  # gathered full token tensor
        add_comm("forward", "tp", b * cloc * s * d * pb * (tp - 1))
    tok.activation_bytes = int(CALIBRATION["tokenize"] * acts * pb)
    tok.flops = int(2 * b * cloc * s * pp * d + 3 * b * cloc * s * d)

    # --- aggregate --------------------------------------------------------
    agg = comps["aggregate"]
    if strategy.kind == "dchag":
        tree = build_tree_spec(cloc, strategy.max_group)
        agg.params_bytes = (_tree_params(tree, d, strategy.agg_layer_kind, model.agg_variant)
                            + _agg_node_params(d, model.agg_variant)
                            // (tp if strategy.final_layer_tp_split else 1)) * pb
        acts = _tree_acts(b, s, d, heads, tree, strategy.agg_layer_kind, model.agg_variant)
        acts += b * tp * s * d  # gathered streams
        acts += _attention_agg_acts(b, s, tp, d, heads, model.agg_variant,
                                    tp if strategy.final_layer_tp_split else 1)
        add_comm("forward", "tp", b * s * d * pb * (tp - 1))
        if tp > 1:
            add_comm("optimizer", "tp",
                     2 * pb * (-(-s * d // tp)) * (tp - 1))  # shared pos-embed grad
        flops = sum(
            (_attention_agg_flops(b, s, g, d, heads, model.agg_variant, 1)
             if strategy.agg_layer_kind == "cross_attention"
             else 2 * b * s * d * (g + d))
            for level in tree.levels for g in level)
        flops += _attention_agg_flops(b, s, tp, d, heads, model.agg_variant,
                                      tp if strategy.final_layer_tp_split else 1)
        agg.flops = int(flops)
    elif model.tree is not None:  # serial hierarchical architecture
        agg.params_bytes = _tree_params(model.tree, d, model.agg_layer_kind,
                                        model.agg_variant) * pb
        acts = _tree_acts(b, s, d, heads, model.tree, model.agg_layer_kind,
                          model.agg_variant)
        agg.flops = int(sum(
            (_attention_agg_flops(b, s, g, d, heads, model.agg_variant, 1)
             if model.agg_layer_kind == "cross_attention"
             else 2 * b * s * d * (g + d))
            for level in model.tree.levels for g in level))
    else:
        agg.params_bytes = _agg_node_params(d, model.agg_variant) * pb
        if strategy.kind in ("tp_only", "dist_token"):
            agg.params_bytes = (4 * d * d // tp + 2 * d) * pb
        acts = _attention_agg_acts(b, s, c, d, heads, model.agg_variant, layer_tp)
        agg.flops = int(_attention_agg_flops(b, s, c, d, heads, model.agg_variant, layer_tp))
        if layer_tp > 1:
            width = (c if model.agg_variant == "full_cross" else 1) * b * s * d
            add_comm("forward", "tp", 2 * width * pb * (tp - 1) / tp)
            add_comm("backward", "tp", 2 * b * s * c * d * pb * (tp - 1) / tp)
    agg.activation_bytes = int(CALIBRATION["aggregate"] * acts * pb)

    # --- transformer blocks -------------------------------------------------
    vit = comps["vit"]
    blk_params = _block_params(d, m)
    split_params = (4 * d * d + 2 * m * d * d + (3 + m) * d) / layer_tp + 4 * d
    vit.params_bytes = int(depth * split_params * pb / fsdp) if fsdp > 1 else \
        int(depth * split_params * pb)
    acts = depth * _block_acts(b, t, d, heads, m, layer_tp)
    acts += b * t * d + 3 * b * s * d + b * s + 2 * b * d  # concat, mask, metadata
    vit.activation_bytes = int(CALIBRATION["vit"] * acts * pb)
    vit.flops = int(depth * _block_flops(b, t, d, m, layer_tp))
    if layer_tp > 1:
        per_block = 4 * b * t * d * pb * (tp - 1) / tp  # two sums, RS+AG each
        add_comm("forward", "tp", depth * per_block)
        add_comm("backward", "tp", depth * per_block)
    if fsdp > 1:
        shard = blk_params * pb / fsdp
        add_comm("forward", "fsdp", depth * shard * (fsdp - 1))
        add_comm("backward", "fsdp", depth * shard * (fsdp - 1))
    if pconfig.dp > 1:
        n_param_elems = sum(cc.params_bytes for cc in comps.values()) / pb
        add_comm("backward", "dp", 2 * n_param_elems * pb * (pconfig.dp - 1) / pconfig.dp)

    # --- decoder -------------------------------------------------------------
    dec = comps["decoder"]
    dd = model.decoder_dim
    dec.params_bytes = (d + d * dd + dd + s * dd
                        + model.decoder_depth * _block_params(dd, m)
                        + dd * c * pp + c * pp) * pb
    acts = 3 * b * s * dd + model.decoder_depth * _block_acts(b, s, dd, 1, m, 1)
    acts += 8 * b * s * c * pp  # prediction head + target/masked-diff chain
    dec.activation_bytes = int(CALIBRATION["decoder"] * acts * pb)
    dec.flops = int(2 * b * s * d * dd + model.decoder_depth * _block_flops(b, s, dd, m, 1)
                    + 2 * b * s * dd * c * pp)

    # grads and optimizer state per component
    for cc in comps.values():
        cc.grad_bytes = cc.params_bytes
        cc.optimizer_bytes = 2 * cc.params_bytes

    report = CostReport(components=comps,
                        comm={k: int(v) for k, v in comm.items()},
                        bytes_per_gpu_budget=hw.bytes_per_gpu,
                        fits=False)
    report.fits = report.total_bytes <= hw.bytes_per_gpu
    return report


# -- planner -----------------------------------------------------------------


@dataclass
class PlanResult:
    feasible: bool
    ranks: int = 0
    strategy: StrategyConfig | None = None
    pconfig: ParallelConfig | None = None
    report: CostReport | None = None
    reason: str = ""


def _pow2_up_to(limit: int):
    v = 1
    while v <= limit:
        yield v
        v *= 2


def plan(model: ModelConfig, hw: HardwareModel, family: str = "dchag",
         precision_bytes: int = 2, batch: int = 1, rank_limit: int = 1024,
         fsdp_allowed: bool = False) -> PlanResult:
    """Exhaustive search over the power-of-two grid for the least rank count
    whose per-rank cost fits the budget; ties break on smaller forward
    communication payload."""
    if family not in ("serial", "tp_only", "dchag"):
        raise ConfigError(f"unknown strategy family {family}")
    best: PlanResult | None = None
    tp_limit = min(rank_limit, model.heads)
    for tp in _pow2_up_to(tp_limit if family != "serial" else 1):
        groups = ([g for g in _pow2_up_to(256) if g >= 2]
                  if family == "dchag" else [128])
        for max_group in groups:
            for fsdp in _pow2_up_to(rank_limit // tp if fsdp_allowed else 1):
                ranks = tp * fsdp
                if ranks > rank_limit:
                    continue
                if family == "serial":
                    strat = StrategyConfig(kind="serial", tp_degree=1)
                elif family == "tp_only":
                    strat = StrategyConfig(kind="tp_only", tp_degree=tp)
                else:
                    strat = StrategyConfig(kind="dchag", tp_degree=tp,
                                           max_group=max_group,
                                           agg_layer_kind="linear")
                pcfg = ParallelConfig(dchag_tp=tp, fsdp=fsdp, dp=1)
                rep = estimate(model, strat, pcfg, hw, precision_bytes, batch)
                if not rep.fits:
                    continue
                cand = PlanResult(True, ranks, strat, pcfg, rep)
                if best is None or ranks < best.ranks or (
                        ranks == best.ranks
                        and rep.forward_comm() < best.report.forward_comm()):
                    best = cand
    if best is None:
        return PlanResult(False, reason=f"infeasible within rank limit {rank_limit}")
    return best


# -- sweeps ---------------------------------------------------------------------


SWEEP_COLUMNS = [
    "axis_value", "strategy", "tp_degree", "max_group", "ranks",
    "tokenize_bytes", "aggregate_bytes", "vit_bytes", "decoder_bytes",
    "total_bytes", "tokenize_activation_bytes", "aggregate_activation_bytes",
    "vit_activation_bytes", "decoder_activation_bytes",
    "tokenize_share", "aggregate_share", "flops_total",
    "forward_comm_bytes", "backward_comm_bytes", "fits",
]


def sweep(model: ModelConfig, axis: str, values, strategies,
          hw: HardwareModel | None = None, precision_bytes: int = 2,
          batch: int = 1, pconfigs=None) -> list[dict]:
    """Evaluate `estimate` along one config axis for several strategies;
    one output row per (value, strategy), in SWEEP_COLUMNS order."""
    from dataclasses import replace

    if axis not in ("channels", "embed"):
        raise ConfigError(f"sweep axis must be channels or embed, got {axis}")
    hw = hw or HardwareModel()
    rows = []
    for value in values:
        m = replace(model, **{axis: int(value)})
        for strat in strategies:
            pcfg = ParallelConfig(dchag_tp=strat.tp_degree)
            if pconfigs:
                pcfg = pconfigs.get(strat.kind, pcfg)
            rep = estimate(m, strat, pcfg, hw, precision_bytes, batch)
            rows.append({
                "axis_value": int(value),
                "strategy": strat.kind,
                "tp_degree": strat.tp_degree,
                "max_group": strat.max_group if strat.kind == "dchag" else "",
                "ranks": pcfg.world_size,
                "tokenize_bytes": rep.component_total("tokenize"),
                "aggregate_bytes": rep.component_total("aggregate"),
                "vit_bytes": rep.component_total("vit"),
                "decoder_bytes": rep.component_total("decoder"),
                "total_bytes": rep.total_bytes,
                "tokenize_activation_bytes": rep.activation("tokenize"),
                "aggregate_activation_bytes": rep.activation("aggregate"),
                "vit_activation_bytes": rep.activation("vit"),
                "decoder_activation_bytes": rep.activation("decoder"),
                "tokenize_share": round(rep.share("tokenize"), 6),
                "aggregate_share": round(rep.share("aggregate"), 6),
                "flops_total": rep.total_flops,
                "forward_comm_bytes": rep.forward_comm(),
                "backward_comm_bytes": sum(v for (ph, _), v in rep.comm.items()
                                           if ph == "backward"),
                "fits": int(rep.fits),
            })
    return rows


# -- paper-scale surrogate configurations ---------------------------------------
#
# The 7B/15B/26B transformer shapes are stated directly (embedding 4096/
# 6144/8192, 32 layers, 32 heads); the 1.7B-class surrogate uses D=2048,
# L=24 and is labeled a surrogate.  Image geometry and batch are declared
# evaluation constants, not published values.

SURROGATES = {
    "1.7B": dict(embed=2048, depth=24, heads=16),
    "7B": dict(embed=4096, depth=32, heads=32),
    "15B": dict(embed=6144, depth=32, heads=32),
    "26B": dict(embed=8192, depth=32, heads=32),
}


def surrogate_model(label: str, channels: int, agg_variant: str = "full_cross") -> ModelConfig:
    shape = SURROGATES[label]
    return ModelConfig(channels=channels, image_h=128, image_w=128, patch=16,
                       mlp_ratio=4, agg_variant=agg_variant,
                       mask_ratio=0.5, decoder_depth=2,
                       decoder_dim=512, **shape)
