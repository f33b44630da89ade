//! Sentence → shared referral tree.

pub mod lexicon;
mod tagger;
mod tree;

pub use tagger::{
    tagger_registry, whiten_sentence, BuiltinTagger, FileTagger, Pos, TaggedToken, Tagger,
    TaggerOptions,
};
pub use tree::{
    children, kind_of, LabelTree, NodeKind, ReferralTree, TreeNodeEntry, EVAL_ORDER, LEAF_NODES,
    NODE_COUNT, RELATION_NODES, ROOT,
};

use crate::vocab::{CategoryDicts, LabelDict};

/// Fill the 7 slots positionally from a whitened sentence.
///
/// Leaves take the first four nouns in order. An adjective directly before a
/// noun yields an `"adj noun"` label when `fragments` contains it. Node 2 takes
/// the first relation word between the first two nouns, node 4 between the
/// second and third, node 6 between the third and fourth. When `fragments` is
/// `None` every label is kept as-is; unfilled slots are `Null`.
pub fn build_label_tree(tagged: &[TaggedToken], fragments: Option<&LabelDict>) -> LabelTree {
    let mut tree = LabelTree::all_null();
    let mut noun_positions = Vec::with_capacity(4);
    for (pos, tok) in tagged.iter().enumerate() {
        if tok.pos != Pos::Noun {
            continue;
        }
        let mut label = tok.lemma.clone();
        if let (Some(dict), Some(prev)) = (fragments, pos.checked_sub(1).map(|p| &tagged[p])) {
            if prev.pos == Pos::Adj {
                let pair = format!("{} {}", prev.lemma, tok.lemma);
                if dict.contains(&pair) {
                    label = pair;
                }
            }
        }
        tree.set(LEAF_NODES[noun_positions.len()], label);
        noun_positions.push(pos);
        if noun_positions.len() == LEAF_NODES.len() {
            break;
        }
    }

    // (relation node, index of left noun, index of right noun)
    for (node, left, right) in [(2, 0, 1), (ROOT, 1, 2), (6, 2, 3)] {
        let (Some(&lo), Some(&hi)) = (noun_positions.get(left), noun_positions.get(right)) else {
            continue;
        };
        if let Some(rel) = tagged[lo + 1..hi].iter().find(|t| t.pos.is_relation()) {
            tree.set(node, rel.lemma.clone());
        }
    }
    tree
}

/// Build the id-level referral tree; labels outside the dictionaries become `Null`.
pub fn build_referral_tree(tagged: &[TaggedToken], dicts: &CategoryDicts) -> ReferralTree {
    build_label_tree(tagged, Some(&dicts.fragments)).resolve(dicts)
}
