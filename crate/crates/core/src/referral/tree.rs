//! The fixed 7-node referral tree.
//!
//! Nodes are numbered 1..7 in in-order traversal. Leaves {1,3,5,7} carry
//! fragment labels, nodes {2,6} relate the two leaf pairs, node 4 is the root.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vocab::{CategoryDicts, NULL_ID, NULL_LABEL};

pub const NODE_COUNT: usize = 7;
pub const LEAF_NODES: [usize; 4] = [1, 3, 5, 7];
pub const RELATION_NODES: [usize; 3] = [2, 4, 6];
pub const ROOT: usize = 4;

/// Bottom-up evaluation order: leaves, then the two layer-2 relations, then the root.
pub const EVAL_ORDER: [usize; NODE_COUNT] = [1, 3, 5, 7, 2, 6, 4];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeKind {
    Fragment,
    Relation,
}

/// Kind of node `index` (1-based).
pub fn kind_of(index: usize) -> NodeKind {
    debug_assert!((1..=NODE_COUNT).contains(&index));
    if index % 2 == 1 {
        NodeKind::Fragment
    } else {
        NodeKind::Relation
    }
}

/// Children of node `index` (1-based); empty for leaves.
pub fn children(index: usize) -> &'static [usize] {
    match index {
        2 => &[1, 3],
        4 => &[2, 6],
        6 => &[5, 7],
        _ => &[],
    }
}

/// A referral tree with string labels, the form stored in manifests.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct LabelTree {
    labels: [String; NODE_COUNT],
}

impl LabelTree {
    pub fn all_null() -> Self {
        Self {
            labels: std::array::from_fn(|_| NULL_LABEL.to_string()),
        }
    }

    /// Labels in node-index order 1..7.
    pub fn from_labels(labels: [String; NODE_COUNT]) -> Self {
        Self { labels }
    }

    pub fn label(&self, index: usize) -> &str {
        &self.labels[index - 1]
    }

    pub fn set(&mut self, index: usize, label: impl Into<String>) {
        self.labels[index - 1] = label.into();
    }

    pub fn labels(&self) -> &[String; NODE_COUNT] {
        &self.labels
    }

    /// In-order labels with `Null` nodes dropped.
    pub fn in_order_content(&self) -> Vec<&str> {
        self.labels
            .iter()
            .map(String::as_str)
            .filter(|l| *l != NULL_LABEL)
            .collect()
    }

    /// Replace labels missing from the dictionaries with `Null` and map to ids.
    pub fn resolve(&self, dicts: &CategoryDicts) -> ReferralTree {
        let ids = std::array::from_fn(|i| {
            let dict = match kind_of(i + 1) {
                NodeKind::Fragment => &dicts.fragments,
                NodeKind::Relation => &dicts.relations,
            };
            dict.id(&self.labels[i]).unwrap_or(NULL_ID)
        });
        ReferralTree { labels: ids }
    }

    pub fn to_entries(&self) -> Vec<TreeNodeEntry> {
        (1..=NODE_COUNT)
            .map(|index| TreeNodeEntry {
                index,
                kind: kind_of(index),
                label: self.label(index).to_string(),
            })
            .collect()
    }

    /// Parse the manifest array form, enforcing topology and kinds.
    pub fn from_entries(entries: &[TreeNodeEntry]) -> Result<Self> {
        if entries.len() != NODE_COUNT {
            return Err(Error::Input(format!(
                "referral tree must have {NODE_COUNT} nodes, found {}",
                entries.len()
            )));
        }
        let mut tree = Self::all_null();
        for (pos, entry) in entries.iter().enumerate() {
            if entry.index != pos + 1 {
                return Err(Error::Input(format!(
                    "tree node at position {} has index {}, expected {}",
                    pos,
                    entry.index,
                    pos + 1
                )));
            }
            if entry.kind != kind_of(entry.index) {
                return Err(Error::Input(format!(
                    "tree node {} must be a {:?} node",
                    entry.index,
                    kind_of(entry.index)
                )));
            }
            if entry.label.is_empty() {
                return Err(Error::Input(format!("tree node {} has an empty label", entry.index)));
            }
            tree.set(entry.index, entry.label.clone());
        }
        Ok(tree)
    }
}

/// One element of the manifest `tree` array.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TreeNodeEntry {
    pub index: usize,
    pub kind: NodeKind,
    pub label: String,
}

/// A referral tree resolved against the category dictionaries.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ReferralTree {
    labels: [usize; NODE_COUNT],
}

impl ReferralTree {
    pub fn from_ids(labels: [usize; NODE_COUNT]) -> Self {
        Self { labels }
    }

    pub fn label(&self, index: usize) -> usize {
        self.labels[index - 1]
    }

    pub fn ids(&self) -> &[usize; NODE_COUNT] {
        &self.labels
    }

    /// Check label ids against dictionary sizes.
    pub fn validate(&self, n_fragments: usize, n_relations: usize) -> Result<()> {
        for index in 1..=NODE_COUNT {
            let bound = match kind_of(index) {
                NodeKind::Fragment => n_fragments,
                NodeKind::Relation => n_relations,
            };
            if self.label(index) >= bound {
                return Err(Error::Input(format!(
                    "node {index} label id {} outside dictionary of size {bound}",
                    self.label(index)
                )));
            }
        }
        Ok(())
    }
}
