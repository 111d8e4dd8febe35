"""Model files (``fedgbm-model-v1``) and the per-party model split.

Party A's file holds the topology, base score, learning rates, A-owned splits
and all leaf weights; B-owned nodes appear only as ``{node_id, owner: "B"}``.
Party B's file holds its splits keyed by ``"tree:node"`` plus the federated
topology, whose hash ties the two halves together.
"""
from __future__ import annotations

import hashlib
import json
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

from fedgbm.core.boosting import Ensemble
from fedgbm.core.tree import Tree, TreeNode
from fedgbm.errors import ModelError

FORMAT = "fedgbm-model-v1"


def topology_of(trees, skip_base: bool = True) -> list:
    return [[t.tree_id, [[nid, owner] for nid, owner in t.topology()]]
            for t in trees if not (skip_base and t.tree_id == 0)]


def topology_hash(topology) -> str:
    blob = json.dumps(topology, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


@dataclass
class BModelPart:
    """B's private half: thresholds of B-owned nodes."""
    splits: dict[tuple[int, int], tuple[int, float]] = field(default_factory=dict)
    topology: list = field(default_factory=list)
    feature_names: list[str] = field(default_factory=list)

    @property
    def topology_hash(self) -> str:
        return topology_hash(self.topology)

    def to_json(self) -> dict:
        return {
            "format": FORMAT,
            "role": "B",
            "topology_hash": self.topology_hash,
            "topology": self.topology,
            "splits": {f"{t}:{n}": {"feature": f, "threshold": thr}
                       for (t, n), (f, thr) in sorted(self.splits.items())},
            "feature_names": self.feature_names,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "BModelPart":
        _check_format(obj, "B")
        splits = {}
        for key, v in obj["splits"].items():
            t, n = key.split(":")
            splits[(int(t), int(n))] = (int(v["feature"]), float(v["threshold"]))
        part = cls(splits, obj["topology"], obj.get("feature_names", []))
        if part.topology_hash != obj["topology_hash"]:
            raise ModelError("model_b topology hash does not match its topology")
        return part


def _check_format(obj, role):
    if obj.get("format") != FORMAT:
        raise ModelError(f"unsupported model format {obj.get('format')!r}")
    if role and obj.get("role") != role:
        raise ModelError(f"expected a role {role} model, got {obj.get('role')!r}")


def _node_json(n: TreeNode, reveal_b: bool) -> dict:
    if n.kind == "leaf":
        return {"node_id": n.node_id, "kind": "leaf", "weight": n.leaf_weight}
    if n.owner == "B" and not reveal_b:
        return {"node_id": n.node_id, "owner": "B"}
    return {"node_id": n.node_id, "kind": "internal", "owner": n.owner,
            "feature": n.feature_index, "threshold": n.threshold}


def _node_from_json(o: dict) -> TreeNode:
    if o.get("kind") == "leaf":
        return TreeNode(o["node_id"], "leaf", leaf_weight=float(o["weight"]))
    if "feature" not in o:
        return TreeNode(o["node_id"], "internal", o["owner"])
    return TreeNode(o["node_id"], "internal", o["owner"], int(o["feature"]), float(o["threshold"]))


def ensemble_to_json(ens: Ensemble, role: str = "A", feature_names=None) -> dict:
    """``role`` "A" hides B thresholds; "joined" keeps every split."""
    reveal = role != "A"
    return {
        "format": FORMAT,
        "role": role,
        "base_score": ens.base_score,
        "learning_rate": ens.learning_rate,
        "alphas": list(ens.alphas),
        "has_base_tree": ens.has_base_tree,
        "iterations_completed": ens.iterations_completed,
        "topology_hash": topology_hash(topology_of(ens.trees)),
        "feature_names": list(feature_names or []),
        "trees": [{"tree_id": t.tree_id,
                   "nodes": [_node_json(t.nodes[i], reveal) for i in sorted(t.nodes)]}
                  for t in ens.trees],
    }


def ensemble_from_json(obj: dict, role: str | None = None) -> Ensemble:
    _check_format(obj, role)
    trees = []
    for to in obj["trees"]:
        tree = Tree(int(to["tree_id"]), {o["node_id"]: _node_from_json(o) for o in to["nodes"]})
        tree.validate()
        trees.append(tree)
    ens = Ensemble(float(obj["base_score"]), float(obj["learning_rate"]), trees,
                   [float(a) for a in obj["alphas"]], bool(obj["has_base_tree"]))
    if topology_hash(topology_of(trees)) != obj["topology_hash"]:
        raise ModelError("model topology hash mismatch")
    return ens


def split_model(ens: Ensemble, b_feature_names=None) -> tuple[Ensemble, BModelPart]:
    """Separate a full ensemble into A's view and B's private part."""
    a_trees = []
    part = BModelPart(topology=topology_of(ens.trees), feature_names=list(b_feature_names or []))
    for t in ens.trees:
        nodes = {}
        for nid, n in t.nodes.items():
            if n.kind == "internal" and n.owner == "B":
                part.splits[(t.tree_id, nid)] = (n.feature_index, n.threshold)
                nodes[nid] = TreeNode(nid, "internal", "B")
            else:
                nodes[nid] = n
        a_trees.append(Tree(t.tree_id, nodes))
    return Ensemble(ens.base_score, ens.learning_rate, a_trees, list(ens.alphas), ens.has_base_tree), part


def merge_model(a_ens: Ensemble, part: BModelPart) -> Ensemble:
    """Rebuild the full ensemble (for oracle comparisons only)."""
    if topology_hash(topology_of(a_ens.trees)) != part.topology_hash:
        raise ModelError("model parts have different topologies")
    trees = []
    for t in a_ens.trees:
        nodes = {}
        for nid, n in t.nodes.items():
            if n.kind == "internal" and n.owner == "B":
                f, thr = part.splits[(t.tree_id, nid)]
                nodes[nid] = TreeNode(nid, "internal", "B", f, thr)
            else:
                nodes[nid] = n
        trees.append(Tree(t.tree_id, nodes))
    return Ensemble(a_ens.base_score, a_ens.learning_rate, trees, list(a_ens.alphas), a_ens.has_base_tree)


def write_json_atomic(path, obj) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    with os.fdopen(fd, "w") as fh:
        json.dump(obj, fh, indent=1, sort_keys=False)
        fh.write("\n")
    os.replace(tmp, path)
    return path


def read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except (OSError, ValueError) as exc:
        raise ModelError(f"cannot read {path}: {exc}") from None
