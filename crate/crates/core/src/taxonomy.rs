//! Class taxonomy: a rooted tree whose non-root nodes are the scored classes.
//!
//! The root is synthetic ([`NodeId::ROOT`]) and never carries a score.
//! Ancestor and descendant sets are reflexive. Classes are kept in a
//! canonical order, ascending by `(introduced_at_task, id)`, so the classes
//! of an earlier task always form a prefix of a later task's classes; the
//! model's parameter slots follow the same order.
//!
//! Text format, one node per line:
//!
//! ```text
//! # comment
//! <name> <parent-name|ROOT> [task=<int>]
//! ```
//!
//! Lines may appear in any order as long as every parent is declared
//! somewhere in the file. Ids are assigned in line order starting at 1.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct NodeId(pub u32);

impl NodeId {
    pub const ROOT: NodeId = NodeId(0);
}

impl std::fmt::Display for NodeId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "#{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassNode {
    pub id: NodeId,
    pub name: String,
    pub parent: NodeId,
    /// Depth below the root; top-level classes have level 1.
    pub level: u32,
    pub is_leaf: bool,
    pub introduced_at_task: u32,
}

impl ClassNode {
    /// A node description for [`TaxonomyTree::insert_subtree`]; level, leaf
    /// flag and task are filled in on insertion.
    pub fn new(id: NodeId, name: impl Into<String>, parent: NodeId) -> Self {
        ClassNode {
            id,
            name: name.into(),
            parent,
            level: 0,
            is_leaf: true,
            introduced_at_task: 1,
        }
    }
}

/// Multi-level binary target for one leaf.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelExpansion {
    pub leaf: NodeId,
    /// `ancestors(leaf)`: the leaf first, then root-ward.
    pub positives: Vec<NodeId>,
    /// Ground-truth node at levels `1..=level(leaf)`, index `level - 1`.
    pub per_level: Vec<NodeId>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaxonomyTree {
    nodes: BTreeMap<NodeId, ClassNode>,
    children: BTreeMap<NodeId, Vec<NodeId>>,
    by_name: HashMap<String, NodeId>,
    order: Vec<NodeId>,
    depth: u32,
}

impl TaxonomyTree {
    /// A tree holding only the synthetic root. It has no leaves, so it is
    /// only useful as the starting point for [`insert_subtree`](Self::insert_subtree).
    pub fn root_only() -> Self {
        TaxonomyTree {
            nodes: BTreeMap::new(),
            children: BTreeMap::new(),
            by_name: HashMap::new(),
            order: Vec::new(),
            depth: 0,
        }
    }

    /// Build and validate a tree. `level` and `is_leaf` are recomputed.
    pub fn from_nodes(nodes: impl IntoIterator<Item = ClassNode>) -> Result<Self> {
        let tree = Self::assemble(nodes.into_iter().collect())?;
        if tree.order.is_empty() {
            return Err(Error::Structural("taxonomy has no classes".into()));
        }
        Ok(tree)
    }

    fn assemble(list: Vec<ClassNode>) -> Result<Self> {
        let mut nodes = BTreeMap::new();
        let mut by_name = HashMap::new();
        for node in list {
            if node.id == NodeId::ROOT {
                return Err(Error::Structural(format!("`{}` uses the reserved root id", node.name)));
            }
            if node.name.is_empty() || node.name.eq_ignore_ascii_case("root") {
                return Err(Error::Structural(format!("invalid node name `{}`", node.name)));
            }
            if by_name.insert(node.name.clone(), node.id).is_some() {
                return Err(Error::Structural(format!("duplicate node name `{}`", node.name)));
            }
            if nodes.insert(node.id, node.clone()).is_some() {
                return Err(Error::Structural(format!("duplicate node id {}", node.id)));
            }
        }
        let mut children: BTreeMap<NodeId, Vec<NodeId>> = BTreeMap::new();
        for node in nodes.values() {
            if node.parent != NodeId::ROOT && !nodes.contains_key(&node.parent) {
                return Err(Error::Structural(format!(
                    "`{}` has unknown parent {}",
                    node.name, node.parent
                )));
            }
            children.entry(node.parent).or_default().push(node.id);
        }

        // Levels by walking from the root; anything unreached sits on a cycle.
        let mut level: HashMap<NodeId, u32> = HashMap::new();
        let mut stack = vec![(NodeId::ROOT, 0u32)];
        while let Some((id, l)) = stack.pop() {
            for &ch in children.get(&id).map(Vec::as_slice).unwrap_or(&[]) {
                level.insert(ch, l + 1);
                stack.push((ch, l + 1));
            }
        }
        if let Some(node) = nodes.values().find(|n| !level.contains_key(&n.id)) {
            let parent = &nodes[&node.parent].name;
            return Err(Error::Structural(format!(
                "cycle through `{}` and `{}`",
                node.name, parent
            )));
        }

        let mut depth = 0;
        for node in nodes.values_mut() {
            node.level = level[&node.id];
            node.is_leaf = !children.contains_key(&node.id);
            depth = depth.max(node.level);
        }
        for node in nodes.values() {
            if node.introduced_at_task == 0 {
                return Err(Error::Structural(format!("`{}` has task 0", node.name)));
            }
            if node.parent != NodeId::ROOT {
                let p = &nodes[&node.parent];
                if p.introduced_at_task > node.introduced_at_task {
                    return Err(Error::Structural(format!(
                        "`{}` (task {}) is introduced before its parent `{}` (task {})",
                        node.name, node.introduced_at_task, p.name, p.introduced_at_task
                    )));
                }
            }
        }
        let mut order: Vec<NodeId> = nodes.keys().copied().collect();
        order.sort_by_key(|id| (nodes[id].introduced_at_task, *id));
        Ok(TaxonomyTree {
            nodes,
            children,
            by_name,
            order,
            depth,
        })
    }

    /// Re-check every structural invariant from scratch.
    pub fn validate(&self) -> Result<()> {
        let rebuilt = Self::from_nodes(self.nodes.values().cloned())?;
        if rebuilt != *self {
            return Err(Error::Structural("cached structure is inconsistent".into()));
        }
        Ok(())
    }

    /// Number of scored classes `|V|`.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of hierarchy levels below the root.
    pub fn depth(&self) -> u32 {
        self.depth
    }

    /// All classes in canonical order.
    pub fn classes(&self) -> &[NodeId] {
        &self.order
    }

    /// Current leaves in canonical order.
    pub fn leaves(&self) -> Vec<NodeId> {
        self.order
            .iter()
            .copied()
            .filter(|id| self.nodes[id].is_leaf)
            .collect()
    }

    pub fn nodes(&self) -> impl Iterator<Item = &ClassNode> {
        self.order.iter().map(move |id| &self.nodes[id])
    }

    pub fn contains(&self, id: NodeId) -> bool {
        self.nodes.contains_key(&id)
    }

    pub fn node(&self, id: NodeId) -> Result<&ClassNode> {
        self.nodes
            .get(&id)
            .ok_or_else(|| Error::Lookup(format!("node {id}")))
    }

    pub fn id_of(&self, name: &str) -> Result<NodeId> {
        self.by_name
            .get(name)
            .copied()
            .ok_or_else(|| Error::Lookup(format!("`{name}`")))
    }

    pub fn name(&self, id: NodeId) -> Result<&str> {
        Ok(&self.node(id)?.name)
    }

    pub fn children(&self, id: NodeId) -> &[NodeId] {
        self.children.get(&id).map(Vec::as_slice).unwrap_or(&[])
    }

    /// `A_v`: `v` followed by its ancestors up to (excluding) the root.
    pub fn ancestors(&self, v: NodeId) -> Result<Vec<NodeId>> {
        let mut out = Vec::with_capacity(self.depth as usize);
        let mut cur = self.node(v)?;
        loop {
            out.push(cur.id);
            if cur.parent == NodeId::ROOT {
                return Ok(out);
            }
            cur = &self.nodes[&cur.parent];
        }
    }

    /// `D_v`: `v` followed by its strict descendants in pre-order.
    pub fn descendants(&self, v: NodeId) -> Result<Vec<NodeId>> {
        self.node(v)?;
        let mut out = Vec::new();
        let mut stack = vec![v];
        while let Some(id) = stack.pop() {
            out.push(id);
            stack.extend(self.children(id).iter().rev());
        }
        Ok(out)
    }

    /// Classes at hierarchy level `level` in canonical order.
    pub fn nodes_at_level(&self, level: u32) -> Vec<NodeId> {
        self.order
            .iter()
            .copied()
            .filter(|id| self.nodes[id].level == level)
            .collect()
    }

    /// Attach `new_nodes` below `parent`, returning the extended tree.
    ///
    /// Each new node's parent must be `parent` or another new node. A former
    /// leaf that receives children keeps its id and becomes internal.
    pub fn insert_subtree(&self, parent: NodeId, new_nodes: Vec<ClassNode>, task: u32) -> Result<Self> {
        if parent != NodeId::ROOT && !self.contains(parent) {
            return Err(Error::Structural(format!("missing parent {parent}")));
        }
        let new_ids: BTreeSet<NodeId> = new_nodes.iter().map(|n| n.id).collect();
        let mut all: Vec<ClassNode> = self.nodes.values().cloned().collect();
        for mut node in new_nodes {
            if self.contains(node.id) {
                return Err(Error::Structural(format!("id {} already in use", node.id)));
            }
            if self.by_name.contains_key(&node.name) {
                return Err(Error::Structural(format!("duplicate node name `{}`", node.name)));
            }
            if node.parent != parent && !new_ids.contains(&node.parent) {
                return Err(Error::Structural(format!(
                    "`{}` must attach below {parent} or another inserted node",
                    node.name
                )));
            }
            node.introduced_at_task = task;
            all.push(node);
        }
        Self::from_nodes(all)
    }

    /// Multi-level target for a current leaf.
    pub fn expand_label(&self, leaf: NodeId) -> Result<LabelExpansion> {
        let node = self.node(leaf)?;
        if !node.is_leaf {
            return Err(Error::InvalidLabel(format!("`{}` is not a leaf", node.name)));
        }
        let positives = self.ancestors(leaf)?;
        let per_level = positives.iter().rev().copied().collect();
        Ok(LabelExpansion {
            leaf,
            positives,
            per_level,
        })
    }

    /// Keep only `keep`; it must be closed under taking parents.
    pub fn restrict(&self, keep: &BTreeSet<NodeId>) -> Result<Self> {
        Self::assemble(
            self.nodes
                .values()
                .filter(|n| keep.contains(&n.id))
                .cloned()
                .collect(),
        )
    }

    /// Same tree with every `introduced_at_task` replaced via `task_of`.
    pub fn with_tasks(&self, task_of: impl Fn(NodeId) -> u32) -> Result<Self> {
        Self::assemble(
            self.nodes
                .values()
                .map(|n| ClassNode {
                    introduced_at_task: task_of(n.id),
                    ..n.clone()
                })
                .collect(),
        )
    }

    /// Depth-1 view: every class that was a leaf in the task it was
    /// introduced, re-parented under the root with its id kept. Internal
    /// nodes that never acted as a leaf are dropped.
    pub fn flattened(&self) -> Result<Self> {
        let kept: Vec<ClassNode> = self
            .nodes()
            .filter(|n| {
                self.children(n.id)
                    .iter()
                    .all(|c| self.nodes[c].introduced_at_task > n.introduced_at_task)
            })
            .map(|n| ClassNode {
                parent: NodeId::ROOT,
                ..n.clone()
            })
            .collect();
        Self::from_nodes(kept)
    }

    /// Canonical text form, parseable by [`parse_taxonomy`].
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for node in self.nodes.values() {
            let parent = if node.parent == NodeId::ROOT {
                "ROOT"
            } else {
                &self.nodes[&node.parent].name
            };
            writeln!(out, "{} {} task={}", node.name, parent, node.introduced_at_task).unwrap();
        }
        out
    }

    /// SHA-256 of [`to_text`](Self::to_text), hex encoded.
    pub fn content_hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_text().as_bytes()))
    }
}

/// Slot-indexed view of a tree for the numeric code: every class is
/// addressed by its position in [`TaxonomyTree::classes`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SlotIndex {
    pub classes: Vec<NodeId>,
    /// Reflexive ancestors, the slot itself first.
    pub ancestors: Vec<Vec<usize>>,
    /// Reflexive descendants, the slot itself first.
    pub descendants: Vec<Vec<usize>>,
    /// `levels[l - 1]` holds the slots at level `l`.
    pub levels: Vec<Vec<usize>>,
    pub level: Vec<u32>,
    /// Leaf slots in canonical order.
    pub leaves: Vec<usize>,
    slot_of: HashMap<NodeId, usize>,
}

impl SlotIndex {
    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn slot(&self, id: NodeId) -> Result<usize> {
        self.slot_of
            .get(&id)
            .copied()
            .ok_or_else(|| Error::Lookup(format!("node {id} has no slot")))
    }

    pub fn is_leaf(&self, slot: usize) -> bool {
        self.descendants[slot].len() == 1
    }
}

impl TaxonomyTree {
    pub fn slot_index(&self) -> SlotIndex {
        let slot_of: HashMap<NodeId, usize> =
            self.order.iter().enumerate().map(|(i, &id)| (id, i)).collect();
        let to_slots = |ids: Vec<NodeId>| ids.into_iter().map(|id| slot_of[&id]).collect::<Vec<_>>();
        let ancestors = self
            .order
            .iter()
            .map(|&id| to_slots(self.ancestors(id).expect("known id")))
            .collect();
        let descendants = self
            .order
            .iter()
            .map(|&id| to_slots(self.descendants(id).expect("known id")))
            .collect();
        let levels = (1..=self.depth).map(|l| to_slots(self.nodes_at_level(l))).collect();
        SlotIndex {
            classes: self.order.clone(),
            ancestors,
            descendants,
            levels,
            level: self.order.iter().map(|id| self.nodes[id].level).collect(),
            leaves: to_slots(self.leaves()),
            slot_of,
        }
    }
}

/// Parse the line-oriented taxonomy format.
pub fn parse_taxonomy(text: &str) -> Result<TaxonomyTree> {
    struct Line<'a> {
        lineno: usize,
        name: &'a str,
        parent: &'a str,
        task: u32,
    }
    let mut lines = Vec::new();
    let mut line_of: HashMap<&str, usize> = HashMap::new();
    for (i, raw) in text.lines().enumerate() {
        let lineno = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let fields: Vec<&str> = content.split_whitespace().collect();
        if fields.len() < 2 || fields.len() > 3 {
            return Err(Error::Parse {
                line: lineno,
                message: format!("expected `<name> <parent> [task=<int>]`, got `{content}`"),
            });
        }
        let task = match fields.get(2) {
            None => 1,
            Some(f) => f
                .strip_prefix("task=")
                .and_then(|t| t.parse::<u32>().ok())
                .filter(|&t| t >= 1)
                .ok_or_else(|| Error::Parse {
                    line: lineno,
                    message: format!("bad task annotation `{f}` on `{}`", fields[0]),
                })?,
        };
        if fields[0].eq_ignore_ascii_case("root") {
            return Err(Error::Parse {
                line: lineno,
                message: "`ROOT` is reserved".into(),
            });
        }
        if let Some(prev) = line_of.insert(fields[0], lineno) {
            return Err(Error::Parse {
                line: lineno,
                message: format!("duplicate node `{}` (first declared on line {prev})", fields[0]),
            });
        }
        lines.push(Line {
            lineno,
            name: fields[0],
            parent: fields[1],
            task,
        });
    }
    if lines.is_empty() {
        return Err(Error::Parse {
            line: 0,
            message: "taxonomy has no nodes".into(),
        });
    }
    let ids: HashMap<&str, NodeId> = lines
        .iter()
        .enumerate()
        .map(|(i, l)| (l.name, NodeId(i as u32 + 1)))
        .collect();
    let mut parent_of: HashMap<&str, &str> = HashMap::new();
    for l in &lines {
        if l.parent != "ROOT" && !ids.contains_key(l.parent) {
            return Err(Error::Parse {
                line: l.lineno,
                message: format!("`{}` has undeclared parent `{}`", l.name, l.parent),
            });
        }
        if l.parent == l.name {
            return Err(Error::Parse {
                line: l.lineno,
                message: format!("cycle: `{}` is its own parent", l.name),
            });
        }
        parent_of.insert(l.name, l.parent);
    }
    for l in &lines {
        let mut seen = BTreeSet::new();
        let mut cur = l.name;
        while cur != "ROOT" {
            if !seen.insert(cur) {
                return Err(Error::Parse {
                    line: line_of[cur],
                    message: format!("cycle between `{}` and `{}`", cur, parent_of[cur]),
                });
            }
            cur = parent_of[cur];
        }
    }
    for l in &lines {
        if l.parent != "ROOT" {
            let pl = &lines[ids[l.parent].0 as usize - 1];
            if pl.task > l.task {
                return Err(Error::Parse {
                    line: l.lineno,
                    message: format!(
                        "bad level: `{}` (task {}) appears before its parent `{}` (task {})",
                        l.name, l.task, pl.name, pl.task
                    ),
                });
            }
        }
    }
    TaxonomyTree::from_nodes(lines.iter().map(|l| ClassNode {
        id: ids[l.name],
        name: l.name.to_string(),
        parent: if l.parent == "ROOT" { NodeId::ROOT } else { ids[l.parent] },
        level: 0,
        is_leaf: true,
        introduced_at_task: l.task,
    }))
}
