//! The node tree each replica keeps: insertion, ancestry queries, leaf
//! creation with blank padding, and a DOT dump for debugging.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;
use std::sync::Arc;

use thiserror::Error;

use crate::crypto::Digest;
use crate::types::{Height, Node, QuorumCert};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TreeError {
    #[error("node {node:?} references unknown parent {parent:?}")]
    OrphanParent { node: Digest, parent: Digest },
    #[error("node {node:?} has height {height} but its parent is at {parent_height}")]
    HeightMismatch {
        node: Digest,
        parent_height: Height,
        height: Height,
    },
    #[error("node {0:?} does not hash to its id")]
    BadId(Digest),
    #[error("a second root {0:?} cannot be inserted")]
    SecondRoot(Digest),
    #[error("target height {target} is not above parent height {parent_height}")]
    HeightNotAbove { parent_height: Height, target: Height },
    #[error("unknown node {0:?}")]
    Unknown(Digest),
    #[error("node {node:?} justifies {justified:?}, which is not its ancestor")]
    JustifyNotAncestor { node: Digest, justified: Digest },
}

/// Looks up nodes the replica never received, e.g. from a shared store.
pub type Fetch<'a> = &'a dyn Fn(&Digest) -> Option<Arc<Node>>;

#[derive(Clone, Debug)]
pub struct Tree {
    nodes: HashMap<Digest, Arc<Node>>,
    genesis: Arc<Node>,
}

impl Default for Tree {
    fn default() -> Self {
        Self::new()
    }
}

impl Tree {
    pub fn new() -> Self {
        let genesis = Arc::new(Node::genesis());
        let mut nodes = HashMap::new();
        nodes.insert(genesis.id, genesis.clone());
        Tree { nodes, genesis }
    }

    pub fn genesis(&self) -> &Arc<Node> {
        &self.genesis
    }

    pub fn genesis_qc(&self) -> QuorumCert {
        QuorumCert::genesis(self.genesis.id)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// All node ids in ascending order.
    pub fn ids(&self) -> Vec<Digest> {
        let mut ids: Vec<Digest> = self.nodes.keys().copied().collect();
        ids.sort();
        ids
    }

    pub fn get(&self, id: &Digest) -> Option<&Arc<Node>> {
        self.nodes.get(id)
    }

    pub fn contains(&self, id: &Digest) -> bool {
        self.nodes.contains_key(id)
    }

    pub fn parent(&self, id: &Digest) -> Option<&Arc<Node>> {
        self.nodes.get(id)?.parent.as_ref().and_then(|p| self.nodes.get(p))
    }

    /// Node certified by `node.justify`. Genesis certifies itself; blank
    /// nodes certify nothing.
    pub fn justify_node(&self, node: &Node) -> Option<&Arc<Node>> {
        if node.is_genesis() {
            return Some(&self.genesis);
        }
        node.justify.as_ref().and_then(|q| self.nodes.get(&q.node))
    }

    /// Inserts a node whose parent is already known. Returns `false` if it
    /// was already present.
    pub fn insert(&mut self, node: Arc<Node>) -> Result<bool, TreeError> {
        if self.nodes.contains_key(&node.id) {
            return Ok(false);
        }
        if !node.id_matches() {
            return Err(TreeError::BadId(node.id));
        }
        let parent_id = node.parent.ok_or(TreeError::SecondRoot(node.id))?;
        let parent = self.nodes.get(&parent_id).ok_or(TreeError::OrphanParent {
            node: node.id,
            parent: parent_id,
        })?;
        if parent.height + 1 != node.height {
            return Err(TreeError::HeightMismatch {
                node: node.id,
                parent_height: parent.height,
                height: node.height,
            });
        }
        if let Some(q) = &node.justify {
            if !self.extends(&parent_id, &q.node) {
                return Err(TreeError::JustifyNotAncestor {
                    node: node.id,
                    justified: q.node,
                });
            }
        }
        self.nodes.insert(node.id, node);
        Ok(true)
    }

    /// Inserts `ancestry` (oldest first) and then `node`. Missing links are
    /// pulled through `fetch`. Returns the ids newly added, oldest first.
    pub fn attach(
        &mut self,
        node: &Arc<Node>,
        ancestry: &[Arc<Node>],
        fetch: Option<Fetch<'_>>,
    ) -> Result<Vec<Digest>, TreeError> {
        let mut added = Vec::new();
        for a in ancestry {
            if let Some(p) = a.parent {
                if self.contains(&p) && self.insert(a.clone())? {
                    added.push(a.id);
                }
            }
        }
        if self.contains(&node.id) {
            return Ok(added);
        }
        // Walk back through the fetch source until a known ancestor.
        let mut missing = Vec::new();
        let mut cursor = node.parent;
        while let Some(p) = cursor {
            if self.contains(&p) {
                break;
            }
            let found = fetch.and_then(|f| f(&p)).ok_or(TreeError::OrphanParent {
                node: node.id,
                parent: p,
            })?;
            cursor = found.parent;
            missing.push(found);
        }
        for m in missing.into_iter().rev() {
            if self.insert(m.clone())? {
                added.push(m.id);
            }
        }
        if self.insert(node.clone())? {
            added.push(node.id);
        }
        Ok(added)
    }

    /// True if `desc` equals `anc` or descends from it.
    pub fn extends(&self, desc: &Digest, anc: &Digest) -> bool {
        let Some(target) = self.nodes.get(anc) else {
            return false;
        };
        let mut cur = self.nodes.get(desc);
        while let Some(n) = cur {
            if n.height < target.height {
                return false;
            }
            if n.id == *anc {
                return true;
            }
            cur = n.parent.as_ref().and_then(|p| self.nodes.get(p));
        }
        false
    }

    pub fn conflicts(&self, a: &Digest, b: &Digest) -> bool {
        !self.extends(a, b) && !self.extends(b, a)
    }

    /// Path from genesis to `id`, inclusive, oldest first.
    pub fn branch(&self, id: &Digest) -> Vec<Arc<Node>> {
        let mut out = Vec::new();
        let mut cur = self.nodes.get(id);
        while let Some(n) = cur {
            out.push(n.clone());
            cur = n.parent.as_ref().and_then(|p| self.nodes.get(p));
        }
        out.reverse();
        out
    }

    /// Up to `depth` nodes ending at `id` (inclusive), oldest first,
    /// excluding genesis.
    pub fn suffix(&self, id: &Digest, depth: usize) -> Vec<Arc<Node>> {
        let mut out = Vec::new();
        let mut cur = self.nodes.get(id);
        while let Some(n) = cur {
            if n.is_genesis() || out.len() == depth {
                break;
            }
            out.push(n.clone());
            cur = n.parent.as_ref().and_then(|p| self.nodes.get(p));
        }
        out.reverse();
        out
    }

    /// Creates a leaf at `height` under `parent`, inserting blank nodes for
    /// every skipped height. Returns the new nodes, the leaf last.
    pub fn create_leaf(
        &mut self,
        parent: &Digest,
        cmd: Vec<u8>,
        justify: Option<QuorumCert>,
        height: Height,
    ) -> Result<Vec<Arc<Node>>, TreeError> {
        let p = self.nodes.get(parent).ok_or(TreeError::Unknown(*parent))?.clone();
        if height <= p.height {
            return Err(TreeError::HeightNotAbove {
                parent_height: p.height,
                target: height,
            });
        }
        let mut out = Vec::new();
        let mut tip = p.id;
        for h in p.height + 1..height {
            let blank = Arc::new(Node::new(tip, Vec::new(), None, h));
            tip = blank.id;
            self.insert(blank.clone())?;
            out.push(blank);
        }
        let leaf = Arc::new(Node::new(tip, cmd, justify, height));
        self.insert(leaf.clone())?;
        out.push(leaf);
        Ok(out)
    }

    /// Graphviz rendering; committed nodes are filled.
    pub fn to_dot(&self, committed: &BTreeSet<Digest>) -> String {
        let mut nodes: Vec<&Arc<Node>> = self.nodes.values().collect();
        nodes.sort_by_key(|n| (n.height, n.id));
        let mut s = String::from("digraph tree {\n  rankdir=BT;\n");
        for n in &nodes {
            let label = if n.is_genesis() {
                "genesis".to_string()
            } else if n.cmd.is_empty() {
                format!("h{} blank", n.height)
            } else {
                format!("h{} {}", n.height, String::from_utf8_lossy(&n.cmd))
            };
            let style = if committed.contains(&n.id) {
                ", style=filled"
            } else {
                ""
            };
            let _ = writeln!(s, "  \"{}\" [label=\"{}\"{}];", n.id.short(), label, style);
        }
        for n in &nodes {
            if let Some(p) = n.parent {
                let _ = writeln!(s, "  \"{}\" -> \"{}\";", n.id.short(), p.short());
            }
            if let Some(q) = &n.justify {
                if !q.is_genesis() {
                    let _ = writeln!(
                        s,
                        "  \"{}\" -> \"{}\" [style=dashed];",
                        n.id.short(),
                        q.node.short()
                    );
                }
            }
        }
        s.push_str("}\n");
        s
    }
}
