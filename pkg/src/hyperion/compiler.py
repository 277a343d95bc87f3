"""Pipeline compiler: dependency analysis, stage packing, resource cost.

Two instructions of one basic block may share a stage only when Bernstein's
conditions hold: neither writes what the other reads or writes.  Locations
are the eleven registers plus four coarse memory worlds (stack, packet,
block window, helper side effects).  Blocks are serialized by control
edges, so a stage never mixes instructions from different blocks.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .ebpf import isa
from .ebpf.helpers import STANDARD_SIGNATURES
from .ebpf.isa import ALU, ALU64, JMP, JMP32, LDX, ST, STX, X
from .ebpf.verifier import VerifiedProgram

DEFAULT_LANE_WIDTH = 4
DEFAULT_SLOT_BUDGET = 256

WEIGHT_ALU = 1
WEIGHT_MEMORY = 4
WEIGHT_BRANCH = 2

MEMORY_WORLDS = ("stack", "packet", "window", "helper")
_ALL_MEMORY = frozenset(MEMORY_WORLDS)


@dataclass
class DependencyGraph:
    nodes: list[int]
    edges: dict[tuple[int, int], set[str]] = field(default_factory=dict)
    read_set: dict[int, frozenset[str]] = field(default_factory=dict)
    write_set: dict[int, frozenset[str]] = field(default_factory=dict)
    blocks: list[list[int]] = field(default_factory=list)
    weights: dict[int, int] = field(default_factory=dict)

    def add_edge(self, i: int, j: int, kind: str) -> None:
        if i >= j:
            raise ValueError(f"edge {i}->{j} does not follow program order")
        self.edges.setdefault((i, j), set()).add(kind)

    def predecessors(self) -> dict[int, list[int]]:
        preds: dict[int, list[int]] = {n: [] for n in self.nodes}
        for i, j in self.edges:
            preds[j].append(i)
        return preds

    def longest_path(self) -> int:
        """Number of nodes on the longest dependency chain."""
        depth: dict[int, int] = {}
        preds = self.predecessors()
        for n in sorted(self.nodes):
            depth[n] = 1 + max((depth[p] for p in preds[n]), default=0)
        return max(depth.values(), default=0)


@dataclass(frozen=True)
class PipelinePlan:
    stages: tuple[tuple[int, ...], ...]
    lane_width: int
    weights: dict[int, int] = field(default_factory=dict, compare=False, repr=False)

    @property
    def stage_count(self) -> int:
        return len(self.stages)

    def stage_of(self) -> dict[int, int]:
        return {n: s for s, stage in enumerate(self.stages) for n in stage}


@dataclass(frozen=True)
class ResourceCost:
    stage_count: int
    logic_units: int
    budget: int
    fits: bool


def _reg(n: int) -> str:
    return f"r{n}"


def _access_sets(vp: VerifiedProgram, pc: int) -> tuple[frozenset[str], frozenset[str], int]:
    insn = vp.program.instructions[pc]
    op, cls = insn.opcode, insn.opcode & 0x07
    regions = vp.mem_regions.get(pc, _ALL_MEMORY)
    reads: set[str] = set()
    writes: set[str] = set()
    if op == isa.OP_LDDW:
        writes.add(_reg(insn.dst))
        weight = WEIGHT_ALU
    elif cls in (ALU, ALU64):
        name = isa.ALU_NAMES[op & 0xF0]
        if name != "mov":
            reads.add(_reg(insn.dst))
        if op & X and name not in ("neg", "end"):
            reads.add(_reg(insn.src))
        writes.add(_reg(insn.dst))
        weight = WEIGHT_ALU
    elif op == isa.OP_EXIT:
        reads.add("r0")
        weight = WEIGHT_BRANCH
    elif op == isa.OP_JA:
        weight = WEIGHT_BRANCH
    elif op == isa.OP_CALL:
        sig = STANDARD_SIGNATURES.get(insn.imm)
        nargs = len(sig.params) if sig is not None else 5
        reads.update(_reg(r) for r in range(1, nargs + 1))
        touched = regions | {"helper"}
        reads.update(touched)
        writes.update(touched)
        writes.update(_reg(r) for r in range(0, 6))
        weight = WEIGHT_MEMORY
    elif cls in (JMP, JMP32):
        reads.add(_reg(insn.dst))
        if op & X:
            reads.add(_reg(insn.src))
        weight = WEIGHT_BRANCH
    elif cls == LDX:
        reads.add(_reg(insn.src))
        reads.update(regions)
        writes.add(_reg(insn.dst))
        weight = WEIGHT_MEMORY
    elif cls in (ST, STX):
        reads.add(_reg(insn.dst))
        if cls == STX:
            reads.add(_reg(insn.src))
        writes.update(regions)
        weight = WEIGHT_MEMORY
    else:
        raise ValueError(f"unsupported opcode {op:#04x} at {pc}")
    return frozenset(reads), frozenset(writes), weight


def basic_blocks(program: isa.Program) -> list[list[int]]:
    """Instruction indices (first slot of each instruction) grouped by block."""
    insns = program.instructions
    starts = []
    pc = 0
    while pc < len(insns):
        starts.append(pc)
        pc += 2 if insns[pc].opcode == isa.OP_LDDW else 1
    leaders = {0}
    for pc in starts:
        insn = insns[pc]
        cls = insn.opcode & 0x07
        if cls in (JMP, JMP32) and insn.opcode != isa.OP_CALL:
            width = 1
            if insn.opcode != isa.OP_EXIT:
                leaders.add(pc + 1 + insn.off)
            leaders.add(pc + width)
    blocks: list[list[int]] = []
    for pc in starts:
        if pc in leaders or not blocks:
            blocks.append([])
        blocks[-1].append(pc)
    return blocks


def analyze_dependencies(vp: VerifiedProgram) -> DependencyGraph:
    blocks = basic_blocks(vp.program)
    graph = DependencyGraph(nodes=[pc for block in blocks for pc in block], blocks=blocks)
    for pc in graph.nodes:
        reads, writes, weight = _access_sets(vp, pc)
        graph.read_set[pc] = reads
        graph.write_set[pc] = writes
        graph.weights[pc] = weight
    for block in blocks:
        for a, i in enumerate(block):
            ri, wi = graph.read_set[i], graph.write_set[i]
            for j in block[a + 1:]:
                rj, wj = graph.read_set[j], graph.write_set[j]
                if wi & rj:
                    graph.add_edge(i, j, "RAW")
                if ri & wj:
                    graph.add_edge(i, j, "WAR")
                if wi & wj:
                    graph.add_edge(i, j, "WAW")
    for prev, nxt in zip(blocks, blocks[1:]):
        has_succ = {i for (i, j) in graph.edges if i in prev and j in prev}
        has_pred = {j for (i, j) in graph.edges if i in nxt and j in nxt}
        sinks = [i for i in prev if i not in has_succ]
        sources = [j for j in nxt if j not in has_pred]
        for i in sinks:
            for j in sources:
                graph.add_edge(i, j, "control")
    return graph


def schedule(graph: DependencyGraph, lane_width: int = DEFAULT_LANE_WIDTH) -> PipelinePlan:
    """Greedy list scheduling in program order."""
    if lane_width < 1:
        raise ValueError("lane_width must be positive")
    preds = graph.predecessors()
    stage_of: dict[int, int] = {}
    stages: list[list[int]] = []
    for node in sorted(graph.nodes):
        stage = 1 + max((stage_of[p] for p in preds[node]), default=-1)
        while stage < len(stages) and len(stages[stage]) >= lane_width:
            stage += 1
        while len(stages) <= stage:
            stages.append([])
        stages[stage].append(node)
        stage_of[node] = stage
    return PipelinePlan(tuple(tuple(s) for s in stages), lane_width, dict(graph.weights))


def cost(plan: PipelinePlan, budget: int = DEFAULT_SLOT_BUDGET) -> ResourceCost:
    units = sum(plan.weights.get(n, WEIGHT_ALU) for stage in plan.stages for n in stage)
    return ResourceCost(plan.stage_count, units, budget, units <= budget)


def compile_program(vp: VerifiedProgram, lane_width: int = DEFAULT_LANE_WIDTH) -> PipelinePlan:
    return schedule(analyze_dependencies(vp), lane_width)


def plan_to_text(vp: VerifiedProgram, plan: PipelinePlan, budget: int = DEFAULT_SLOT_BUDGET) -> str:
    from .ebpf.asm import disassemble_one

    insns = vp.program.instructions
    lines = []
    for s, stage in enumerate(plan.stages):
        parts = []
        for pc in stage:
            nxt = insns[pc + 1] if pc + 1 < len(insns) else None
            parts.append(f"{pc}: {disassemble_one(insns[pc], nxt)}")
        lines.append(f"stage {s:4d} | " + " || ".join(parts))
    c = cost(plan, budget)
    lines.append(
        f"# stages={c.stage_count} logic_units={c.logic_units} budget={c.budget} "
        f"fits={'yes' if c.fits else 'no'} lanes={plan.lane_width}"
    )
    return "\n".join(lines) + "\n"


def plan_to_dot(graph: DependencyGraph, plan: PipelinePlan) -> str:
    lines = ["digraph pipeline {", "  rankdir=TB;", "  node [shape=box, fontname=monospace];"]
    for s, stage in enumerate(plan.stages):
        lines.append(f"  subgraph cluster_s{s} {{ label=\"stage {s}\"; " + " ".join(f"n{pc};" for pc in stage) + " }")
    for (i, j), kinds in sorted(graph.edges.items()):
        style = ' style=dashed' if kinds == {"control"} else ""
        lines.append(f"  n{i} -> n{j} [label=\"{','.join(sorted(kinds))}\"{style}];")
    lines.append("}")
    return "\n".join(lines) + "\n"
