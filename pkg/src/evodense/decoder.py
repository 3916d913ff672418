"""Executes a genotype against the ancestor network, yielding a NetworkPlan.

Decoding starts from an ancestor network: an embedding/conv stem feeding one
dense block of two conv blocks with a fixed 32-channel interface, followed by
a transition layer and the classifier head. Each SEQ symbol duplicates its
mother cell into a child placed sequentially after it (the child inherits the
mother's outgoing edges); each PAR symbol duplicates the mother into a child
sharing both its incoming and outgoing edges. Traversal is depth-first: the
left subtree operates on the mother, the right on the created child; END
terminates a branch.

Channel discipline: every block consumes and produces ``channels`` (32)
externally. Internally conv block i reads the concatenation of the block
input and all previous conv-block outputs (``channels + i*growth``) and emits
``growth`` channels; the per-block transition conv maps the final
concatenation back to ``channels`` and its 1x2 max-pool halves the temporal
length (ceil), except where halving would drop the length below the k of
k-max pooling, in which case the pool degrades to identity. Parallel branch
outputs merge by element-wise sum after the longer operand is pooled down to
the shorter one's length.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Optional, Union

from .encoding import Genotype, ProgramNode, Symbol, serialize

ANCESTOR_CONV_BLOCKS = 2

NodeKey = Union[int, str]  # block id, or the pseudo-nodes "stem" / "head"

STEM = "stem"
HEAD = "head"


class PlanError(ValueError):
    pass


@dataclass
class PlanConfig:
    """Fixed parts of the phenotype that the genotype does not control."""

    alphabet_size: int = 70  # 69 characters + PAD at index 0
    embed_dim: int = 16
    max_len: int = 256
    channels: int = 32
    growth: int = 32
    kmax_k: int = 8
    fc_dims: tuple[int, int] = (1024, 1024)
    num_classes: int = 4

    def __post_init__(self):
        if self.max_len < self.kmax_k:
            raise PlanError(
                f"max_len {self.max_len} shorter than k-max k {self.kmax_k}"
            )
        for name in ("alphabet_size", "embed_dim", "max_len", "channels",
                     "growth", "kmax_k", "num_classes"):
            if getattr(self, name) < 1:
                raise PlanError(f"{name} must be positive")


@dataclass
class DenseBlockSpec:
    id: int
    num_conv_blocks: int
    drop_prob: float
    in_channels: int
    out_channels: int
    in_length: int = 0
    out_length: int = 0
    pool: bool = True  # transition max-pool active (False once at the length floor)


@dataclass
class StemSpec:
    alphabet_size: int
    embed_dim: int
    max_len: int
    out_channels: int


@dataclass
class HeadSpec:
    kmax_k: int
    fc_dims: tuple[int, int]
    num_classes: int
    in_channels: int
    in_length: int = 0


@dataclass
class PlanEdge:
    src: NodeKey
    dst: NodeKey
    align_pools: int = 0  # extra 1x2 max-pools applied to this operand at the merge


@dataclass
class NetworkPlan:
    blocks: list[DenseBlockSpec]
    edges: list[PlanEdge]
    stem: StemSpec
    head: HeadSpec
    channels: int
    growth: int
    merge_mode: str = "sum"
    genotype: Optional[str] = None

    def block(self, block_id: int) -> DenseBlockSpec:
        return self._by_id[block_id]

    @property
    def _by_id(self) -> dict[int, DenseBlockSpec]:
        return {b.id: b for b in self.blocks}

    def in_edges(self, node: NodeKey) -> list[PlanEdge]:
        return [e for e in self.edges if e.dst == node]

    def out_edges(self, node: NodeKey) -> list[PlanEdge]:
        return [e for e in self.edges if e.src == node]

    def topo_order(self) -> list[int]:
        """Block ids in a deterministic topological order (stem excluded)."""
        order, _ = _toposort(self)
        return [n for n in order if isinstance(n, int)]


def _pooled_length(length: int, floor: int) -> int:
    """One ceil-mode 1x2 max-pool, degrading to identity at the floor."""
    half = (length + 1) // 2
    return half if half >= floor else length


def _align_steps(length: int, target: int, floor: int) -> Optional[int]:
    """Number of floored 1x2 pools taking ``length`` to ``target``; None if unreachable."""
    steps = 0
    while length > target:
        shorter = _pooled_length(length, floor)
        if shorter == length:
            return None
        length = shorter
        steps += 1
    return steps if length == target else None


def decode(g: Genotype, cfg: Optional[PlanConfig] = None) -> NetworkPlan:
    """Execute the genotype depth-first against the ancestor network."""
    cfg = cfg or PlanConfig()

    specs: dict[int, dict] = {
        0: {"num_conv_blocks": ANCESTOR_CONV_BLOCKS, "drop_prob": 0.0}
    }
    succ: dict[NodeKey, list[NodeKey]] = {STEM: [0], 0: [HEAD]}
    pred: dict[NodeKey, list[NodeKey]] = {0: [STEM], HEAD: [0]}
    next_id = 1

    def execute(node: ProgramNode, cell: int) -> None:
        nonlocal next_id
        if node.kind is Symbol.END:
            return
        child = next_id
        next_id += 1
        specs[child] = {
            "num_conv_blocks": node.block_count,
            "drop_prob": node.dropout if node.dropout is not None else 0.0,
        }
        if node.kind is Symbol.SEQ:
            # Child takes over the mother's outgoing edges; mother feeds child.
            succ[child] = succ[cell]
            for target in succ[child]:
                pred[target] = [child if s == cell else s for s in pred[target]]
            succ[cell] = [child]
            pred[child] = [cell]
        else:  # PAR: child shares the mother's inputs and outputs.
            succ[child] = list(succ[cell])
            pred[child] = list(pred[cell])
            for target in succ[cell]:
                pred[target].append(child)
            for source in pred[cell]:
                succ[source].append(child)
        execute(node.left, cell)
        execute(node.right, child)

    execute(g.root, 0)

    blocks = [
        DenseBlockSpec(
            id=i,
            num_conv_blocks=specs[i]["num_conv_blocks"],
            drop_prob=specs[i]["drop_prob"],
            in_channels=cfg.channels,
            out_channels=cfg.channels,
        )
        for i in sorted(specs)
    ]
    edges = [
        PlanEdge(src, dst)
        for src in [STEM] + sorted(specs)
        for dst in succ.get(src, [])
    ]

    plan = NetworkPlan(
        blocks=blocks,
        edges=edges,
        stem=StemSpec(cfg.alphabet_size, cfg.embed_dim, cfg.max_len, cfg.channels),
        head=HeadSpec(cfg.kmax_k, tuple(cfg.fc_dims), cfg.num_classes, cfg.channels),
        channels=cfg.channels,
        growth=cfg.growth,
        genotype=serialize(g),
    )
    _assign_lengths(plan)
    return plan


def _toposort(plan: NetworkPlan):
    """Kahn's algorithm with sorted tie-breaking; returns (order, leftover)."""
    nodes: list[NodeKey] = [STEM] + [b.id for b in plan.blocks] + [HEAD]
    indeg = {n: 0 for n in nodes}
    out: dict[NodeKey, list[NodeKey]] = {n: [] for n in nodes}
    for e in plan.edges:
        if e.src in out and e.dst in indeg:
            out[e.src].append(e.dst)
            indeg[e.dst] += 1
    rank = {n: i for i, n in enumerate(nodes)}
    ready = sorted((n for n in nodes if indeg[n] == 0), key=rank.__getitem__)
    order: list[NodeKey] = []
    while ready:
        n = ready.pop(0)
        order.append(n)
        for m in out[n]:
            indeg[m] -= 1
            if indeg[m] == 0:
                ready.append(m)
        ready.sort(key=rank.__getitem__)
    leftover = [n for n in nodes if n not in set(order)]
    return order, leftover


def _in_edge_map(plan: NetworkPlan) -> dict[NodeKey, list[PlanEdge]]:
    by_dst: dict[NodeKey, list[PlanEdge]] = {}
    for e in plan.edges:
        by_dst.setdefault(e.dst, []).append(e)
    return by_dst


def _assign_lengths(plan: NetworkPlan) -> None:
    """Fill per-block temporal lengths, pool flags and per-edge alignment pools."""
    floor = plan.head.kmax_k
    blocks = {b.id: b for b in plan.blocks}
    in_map = _in_edge_map(plan)
    out_len: dict[NodeKey, int] = {STEM: plan.stem.max_len}
    order, leftover = _toposort(plan)
    if leftover:
        raise PlanError(f"plan graph contains a cycle through {leftover}")
    for node in order:
        if node == STEM:
            continue
        incoming = in_map.get(node, [])
        if not incoming:
            raise PlanError(f"node {node!r} is unreachable from the stem")
        lengths = [out_len[e.src] for e in incoming]
        target = min(lengths)
        for e in incoming:
            steps = _align_steps(out_len[e.src], target, floor)
            if steps is None:
                raise PlanError(
                    f"cannot align operand length {out_len[e.src]} to {target} "
                    f"at node {node!r}"
                )
            e.align_pools = steps
        if node == HEAD:
            if target < plan.head.kmax_k:
                raise PlanError(
                    f"head input length {target} below k-max k {plan.head.kmax_k}"
                )
            plan.head.in_length = target
            continue
        spec = blocks[node]
        spec.in_length = target
        pooled = _pooled_length(target, floor)
        spec.pool = pooled != target
        spec.out_length = pooled
        out_len[node] = pooled


def validate_plan(plan: NetworkPlan) -> list[str]:
    """Structural checks; returns a list of violations (empty means ok)."""
    violations: list[str] = []
    ids = [b.id for b in plan.blocks]
    if len(set(ids)) != len(ids):
        violations.append("duplicate block ids")
    known: set[NodeKey] = {STEM, HEAD, *ids}
    for e in plan.edges:
        if e.src not in known or e.dst not in known:
            violations.append(f"edge {e.src!r}->{e.dst!r} references an unknown node")
        if e.dst == STEM:
            violations.append("stem must be the single source (has an incoming edge)")
        if e.src == HEAD:
            violations.append("head must be the single sink (has an outgoing edge)")
    if violations:
        return violations

    order, leftover = _toposort(plan)
    if leftover:
        violations.append(f"cycle detected through nodes {leftover}")
        return violations

    blocks = {b.id: b for b in plan.blocks}
    in_map = _in_edge_map(plan)
    out_degree: dict[NodeKey, int] = {}
    for e in plan.edges:
        out_degree[e.src] = out_degree.get(e.src, 0) + 1

    for b in plan.blocks:
        if not (1 <= b.num_conv_blocks <= 10):
            violations.append(f"block {b.id}: conv-block count {b.num_conv_blocks} out of range")
        if not (0.0 <= b.drop_prob <= 0.5):
            violations.append(f"block {b.id}: drop probability {b.drop_prob} out of range")
        if not in_map.get(b.id):
            violations.append(f"block {b.id} has no incoming edge")
        if not out_degree.get(b.id):
            violations.append(f"block {b.id} has no outgoing edge")

    # Channel agreement at every fan-in point.
    out_channels: dict[NodeKey, int] = {STEM: plan.stem.out_channels}
    for b in plan.blocks:
        out_channels[b.id] = b.out_channels
    for node in order:
        if node == STEM:
            continue
        operand_channels = {out_channels[e.src] for e in in_map.get(node, [])
                            if e.src in out_channels}
        expected = plan.head.in_channels if node == HEAD else blocks[node].in_channels
        if len(operand_channels) > 1:
            violations.append(f"node {node!r}: merge operands disagree on channels "
                              f"{sorted(operand_channels)}")
        elif operand_channels and operand_channels != {expected}:
            violations.append(f"node {node!r}: expects {expected} input channels, "
                              f"operands provide {operand_channels.pop()}")

    # Temporal lengths: recompute from the stem and require exact alignment.
    floor = plan.head.kmax_k
    out_len: dict[NodeKey, int] = {STEM: plan.stem.max_len}
    for node in order:
        if node == STEM:
            continue
        incoming = in_map.get(node, [])
        if not incoming:
            if node == HEAD:
                violations.append("head is unreachable from the stem")
            continue
        missing = [e for e in incoming if e.src not in out_len]
        if missing:
            continue  # upstream violation already reported
        target = min(out_len[e.src] for e in incoming)
        aligned = True
        for e in incoming:
            if _align_steps(out_len[e.src], target, floor) is None:
                violations.append(
                    f"node {node!r}: operand length {out_len[e.src]} cannot be "
                    f"pooled down to {target}"
                )
                aligned = False
        if not aligned:
            continue
        if node == HEAD:
            if target < plan.head.kmax_k:
                violations.append(
                    f"head input length {target} is below k-max k {plan.head.kmax_k}"
                )
            continue
        out_len[node] = _pooled_length(target, floor)
    return violations


def _conv_params(in_channels: int, out_channels: int, kernel: int = 3) -> int:
    return out_channels * in_channels * kernel + out_channels


def count_parameters(plan: NetworkPlan) -> int:
    """Exact trainable scalar count for the phenotype the plan describes.

    Counts conv weights and biases, batch-norm affine pairs, the embedding
    table (including the frozen PAD row) and the fully connected layers.
    Batch-norm running statistics are buffers, not parameters.
    """
    c, g = plan.channels, plan.growth
    total = plan.stem.alphabet_size * plan.stem.embed_dim
    total += _conv_params(plan.stem.embed_dim, c)
    for b in plan.blocks:
        for i in range(b.num_conv_blocks):
            width = c + i * g
            total += 2 * width  # batch-norm gamma/beta
            total += _conv_params(width, g)
        total += _conv_params(c + b.num_conv_blocks * g, c)  # transition conv
    fan_in = plan.head.in_channels * plan.head.kmax_k
    for width in (*plan.head.fc_dims, plan.head.num_classes):
        total += width * fan_in + width
        fan_in = width
    return total


def plan_to_json(plan: NetworkPlan) -> str:
    doc = {
        "version": 1,
        "merge_mode": plan.merge_mode,
        "channels": plan.channels,
        "growth": plan.growth,
        "genotype": plan.genotype,
        "stem": {
            "alphabet_size": plan.stem.alphabet_size,
            "embed_dim": plan.stem.embed_dim,
            "max_len": plan.stem.max_len,
            "out_channels": plan.stem.out_channels,
        },
        "head": {
            "kmax_k": plan.head.kmax_k,
            "fc_dims": list(plan.head.fc_dims),
            "num_classes": plan.head.num_classes,
            "in_channels": plan.head.in_channels,
            "in_length": plan.head.in_length,
        },
        "blocks": [
            {
                "id": b.id,
                "num_conv_blocks": b.num_conv_blocks,
                "drop_prob": b.drop_prob,
                "in_channels": b.in_channels,
                "out_channels": b.out_channels,
                "in_length": b.in_length,
                "out_length": b.out_length,
                "pool": b.pool,
            }
            for b in plan.blocks
        ],
        "edges": [
            {"src": e.src, "dst": e.dst, "align_pools": e.align_pools}
            for e in plan.edges
        ],
        "parameter_count": count_parameters(plan),
    }
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def plan_to_dot(plan: NetworkPlan) -> str:
    def name(node: NodeKey) -> str:
        return node if isinstance(node, str) else f"b{node}"

    lines = ["digraph network {", "  rankdir=TB;"]
    lines.append('  stem [shape=box, label="stem\\nembed %d -> conv %d"];'
                 % (plan.stem.embed_dim, plan.stem.out_channels))
    for b in plan.blocks:
        drop = f"\\ndrop={b.drop_prob:g}" if b.drop_prob > 0 else ""
        lines.append(
            f'  b{b.id} [shape=box, label="block {b.id}\\n'
            f'{b.num_conv_blocks} conv{drop}\\nL {b.in_length}->{b.out_length}"];'
        )
    lines.append('  head [shape=box, label="head\\nkmax %d + fc"];' % plan.head.kmax_k)
    for e in plan.edges:
        attr = f' [label="pool x{e.align_pools}"]' if e.align_pools else ""
        lines.append(f"  {name(e.src)} -> {name(e.dst)}{attr};")
    lines.append("}")
    return "\n".join(lines) + "\n"
