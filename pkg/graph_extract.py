"""Decision graphs: mined parent relationships, influence signs and DOT/JSON export."""

import json
import logging
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

import trilstm_model
from biomarker_data import SCHEMA, BiomarkerSchema, Dataset, presentation_orders
from errors import ConfigError, ParseError
from linalg_core import RngStream
from trilstm_model import DECISIONS, YES, TriLstmParams

logger = logging.getLogger(__name__)

EDGE_KINDS = ("CorrectPositive", "CorrectNegative", "Misassigned")
EDGE_COLORS = {"CorrectPositive": "black", "CorrectNegative": "red", "Misassigned": "blue"}
NODE_SHAPES = {"decision": "doublecircle", "root": "diamond", "category": "box", "biomarker": "ellipse"}
ROOT_NODE = "ROOT"
INFLUENCE_EPS = 0.01


@dataclass(frozen=True)
class Edge:
    child: str
    parent: str
    kind: str
    strength: float
    sign: str

    def __post_init__(self):
        if self.kind not in EDGE_KINDS:
            raise ConfigError(f"unknown edge kind {self.kind!r}")
        if self.sign not in ("+", "-"):
            raise ConfigError(f"edge sign must be '+' or '-', got {self.sign!r}")


@dataclass(frozen=True)
class DecisionGraph:
    decision: str
    nodes: tuple   # (name, type) pairs, sorted by name
    edges: tuple   # one Edge per biomarker, sorted by child

    def node_type(self, name: str) -> str:
        return dict(self.nodes)[name]


@dataclass(frozen=True)
class InfluenceEstimate:
    code: str
    sensitivity: float

    @property
    def sign(self) -> str:
        return "+" if self.sensitivity >= 0.0 else "-"


def _node_type(schema: BiomarkerSchema, k: int) -> str:
    if k < len(schema):
        return "biomarker"
    return "root" if k == schema.root_class else "category"


def choose_parents(mean_dists: dict, schema: BiomarkerSchema = SCHEMA) -> dict:
    """Most probable parent class per biomarker, excluding itself.

    A biomarker parent is admissible only when that biomarker itself hangs
    directly off a category or the root; otherwise the best non-biomarker
    class is taken, which caps every graph at depth three below the decision.
    """
    ranked = {}
    for code, dist in mean_dists.items():
        i = schema.index(code)
        # stable argsort: ties go to the lowest class index
        ranked[code] = [int(k) for k in np.argsort(-np.asarray(dist), kind="stable") if k != i]
    tentative = {code: order[0] for code, order in ranked.items()}
    anchored = {code for code, k in tentative.items() if k >= len(schema)}
    parents = {}
    for code, k in tentative.items():
        if k < len(schema) and schema.codes[k] not in anchored:
            k = next(c for c in ranked[code] if c >= len(schema))
        parents[code] = k
    return parents


def build_graph(mean_dists: dict, signs: dict, decision: str, schema: BiomarkerSchema = SCHEMA) -> DecisionGraph:
    """One graph from per-biomarker mean parent distributions and influence signs."""
    if decision not in DECISIONS:
        raise ConfigError(f"decision must be one of {DECISIONS}, got {decision!r}")
    parents = choose_parents(mean_dists, schema)
    nodes = {decision: "decision"}
    edges = []
    for code, k in parents.items():
        nodes[code] = "biomarker"
        parent = schema.class_label(k)
        nodes[parent] = _node_type(schema, k)
        truth = schema.parent_class(schema.index(code))
        sign = signs.get(code, "+")
        if k != truth:
            kind = "Misassigned"
        else:
            kind = "CorrectPositive" if sign == "+" else "CorrectNegative"
        edges.append(Edge(code, parent, kind, float(mean_dists[code][k]), sign))
    if any(t == "category" for t in nodes.values()):
        nodes[ROOT_NODE] = "root"
    return DecisionGraph(decision, tuple(sorted(nodes.items())), tuple(sorted(edges, key=lambda e: e.child)))


def structural_edges(g: DecisionGraph) -> list:
    """Category-to-root and root-to-decision links implied by the nodes present."""
    names = dict(g.nodes)
    links = [(name, ROOT_NODE) for name, kind in g.nodes if kind == "category"]
    if ROOT_NODE in names:
        links.append((ROOT_NODE, g.decision))
    return links


def score_graph(g: DecisionGraph, schema: BiomarkerSchema = SCHEMA) -> float:
    """Fraction of biomarker edges whose parent matches the ground-truth subordination."""
    if not g.edges:
        return 0.0
    hits = sum(1 for e in g.edges if e.parent == schema.class_label(schema.parent_class(schema.index(e.child))))
    return hits / len(g.edges)


# -- influence --------------------------------------------------------------

def influence(scores_fn: Callable, params, values: np.ndarray, permutations: np.ndarray,
              schema: BiomarkerSchema = SCHEMA, eps: float = INFLUENCE_EPS) -> list:
    """Mean central-difference sensitivity of P(Yes) to each biomarker's normalized OD value."""
    estimates = []
    for i, code in enumerate(schema.codes):
        up = values.copy()
        down = values.copy()
        up[:, i, 0] += eps
        down[:, i, 0] -= eps
        delta = scores_fn(params, up, permutations) - scores_fn(params, down, permutations)
        estimates.append(InfluenceEstimate(code, float(np.mean(delta) / (2.0 * eps))))
    return estimates


def extract_graph(p: TriLstmParams, test: Dataset, seed: int = 0, eps: float = INFLUENCE_EPS) -> dict:
    """
    Decision graphs for the records predicted Yes and those predicted No.
    Args:
        p (TriLstmParams): trained model; only read.
        test (Dataset): normalized held-out records.
        seed (int): seed of the presentation orders the records are read in.
        eps (float): central-difference step for the influence signs.
    Returns:
        dict: ``{"Yes": DecisionGraph | None, "No": ...}``; a decision that no
        record received has no graph.
    """
    if not test.normalized:
        raise ConfigError("graph extraction needs a normalized dataset")
    if not test.records:
        raise ConfigError("graph extraction needs at least one record")
    schema = test.schema
    values = test.values()
    perms = presentation_orders(len(test), len(schema), RngStream(seed).child("graph"))
    enc = trilstm_model.encode_batch(values, perms, schema)
    out, _ = trilstm_model.forward(p, enc.stream1, enc.stream2)
    p_yes = out.final_dist[:, YES]
    dists = trilstm_model.parent_distributions(out, enc, len(schema))

    graphs: dict = {}
    for decision, mask in ((DECISIONS[0], p_yes > 0.5), (DECISIONS[1], ~(p_yes > 0.5))):
        if not mask.any():
            logger.warning(f"No test record was predicted {decision}; skipping its graph")
            graphs[decision] = None
            continue
        mean = dists[mask].mean(axis=0)
        estimates = influence(trilstm_model.positive_scores, p, values[mask], perms[mask], schema, eps)
        graphs[decision] = build_graph(
            {code: mean[i] for i, code in enumerate(schema.codes)},
            {e.code: e.sign for e in estimates},
            decision, schema,
        )
        logger.info(f"{decision} graph from {int(mask.sum())} records: "
                    f"{sum(e.kind == 'Misassigned' for e in graphs[decision].edges)} misassigned edges")
    return graphs


# -- export -----------------------------------------------------------------

def export_dot(g: DecisionGraph) -> str:
    lines = [f'digraph "{g.decision}" {{', "  rankdir=BT;"]
    for name, kind in g.nodes:
        lines.append(f'  "{name}" [shape={NODE_SHAPES[kind]}];')
    for e in g.edges:
        lines.append(f'  "{e.child}" -> "{e.parent}" [color={EDGE_COLORS[e.kind]}, label="{e.strength:.2f}"];')
    for child, parent in structural_edges(g):
        lines.append(f'  "{child}" -> "{parent}" [color=gray, style=dashed];')
    lines.append("}")
    return "\n".join(lines) + "\n"


def export_json(g: DecisionGraph) -> str:
    return json.dumps({
        "decision": g.decision,
        "nodes": [{"name": name, "type": kind} for name, kind in g.nodes],
        "edges": [
            {"child": e.child, "parent": e.parent, "kind": e.kind, "strength": e.strength, "sign": e.sign}
            for e in g.edges
        ],
    }, indent=2) + "\n"


def graph_from_json(text: str) -> DecisionGraph:
    try:
        data = json.loads(text)
        return DecisionGraph(
            data["decision"],
            tuple((n["name"], n["type"]) for n in data["nodes"]),
            tuple(Edge(e["child"], e["parent"], e["kind"], float(e["strength"]), e["sign"]) for e in data["edges"]),
        )
    except json.JSONDecodeError as e:
        raise ParseError(f"graph JSON is malformed: {e.msg}", e.lineno, e.colno) from None
    except (KeyError, TypeError) as e:
        raise ParseError(f"graph JSON is missing a field: {e}") from None


def graph_filename(model: str, seed: int, decision: str, suffix: str = "dot") -> str:
    return f"graph_{model}_{seed}_{decision.lower()}.{suffix}"


def summarize(graphs: dict, schema: BiomarkerSchema = SCHEMA) -> Optional[str]:
    parts = []
    for decision, g in graphs.items():
        if g is not None:
            parts.append(f"{decision}: {len(g.edges)} edges, agreement {score_graph(g, schema):.2f}")
    return "; ".join(parts) if parts else None
