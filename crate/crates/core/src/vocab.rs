//! Word vocabulary and fragment/relation category dictionaries.

use std::collections::HashMap;
use std::path::Path;

use serde::ser::SerializeMap;
use serde::{Serialize, Serializer};

use crate::error::{Error, Result};
use crate::referral::{kind_of, LabelTree, NodeKind, NODE_COUNT};

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";

pub const NULL_ID: usize = 0;
pub const NULL_LABEL: &str = "Null";

pub const WORD_VOCAB_FILE: &str = "word_vocab.json";
pub const FRAGMENT_DICT_FILE: &str = "fragment_dict.json";
pub const RELATION_DICT_FILE: &str = "relation_dict.json";

/// Integer-encoded sentence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence(pub Vec<usize>);

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Sort keys by descending count, then lexicographically.
fn frequency_order(counts: HashMap<&str, usize>) -> Vec<String> {
    let mut items: Vec<(&str, usize)> = counts.into_iter().collect();
    items.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    items.into_iter().map(|(k, _)| k.to_string()).collect()
}

/// Bijective string ↔ id map, serialized as `{label: id}` in id order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdMap {
    to_id: HashMap<String, usize>,
    labels: Vec<String>,
}

impl IdMap {
    /// Ids assigned by position.
    pub fn from_ordered(labels: Vec<String>) -> Result<Self> {
        let mut to_id = HashMap::with_capacity(labels.len());
        for (id, l) in labels.iter().enumerate() {
            if to_id.insert(l.clone(), id).is_some() {
                return Err(Error::Input(format!("duplicate dictionary entry `{l}`")));
            }
        }
        Ok(Self { to_id, labels })
    }

    pub fn id(&self, label: &str) -> Option<usize> {
        self.to_id.get(label).copied()
    }

    pub fn label(&self, id: usize) -> Option<&str> {
        self.labels.get(id).map(String::as_str)
    }

    pub fn contains(&self, label: &str) -> bool {
        self.to_id.contains_key(label)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("string map serializes")
    }

    /// Parse `{label: id}`; ids must be exactly 0..n.
    pub fn from_json(text: &str) -> Result<Self> {
        let raw: HashMap<String, usize> = serde_json::from_str(text)?;
        let mut labels = vec![None; raw.len()];
        for (label, id) in raw {
            let slot = labels
                .get_mut(id)
                .ok_or_else(|| Error::Input(format!("id {id} for `{label}` is not dense")))?;
            if slot.is_some() {
                return Err(Error::Input(format!("id {id} assigned twice")));
            }
            *slot = Some(label);
        }
        Self::from_ordered(labels.into_iter().map(|l| l.expect("dense ids")).collect())
    }
}

impl Serialize for IdMap {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        let mut map = serializer.serialize_map(Some(self.labels.len()))?;
        for (id, label) in self.labels.iter().enumerate() {
            map.serialize_entry(label, &id)?;
        }
        map.end()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WordVocab {
    map: IdMap,
}

impl WordVocab {
    pub fn size(&self) -> usize {
        self.map.len()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.map.id(token)
    }

    pub fn map(&self) -> &IdMap {
        &self.map
    }

    pub fn encode(&self, sentence: &[String]) -> Result<TokenSequence> {
        encode_tokens(sentence, self)
    }

    pub fn decode(&self, tokens: &TokenSequence) -> Vec<String> {
        tokens
            .0
            .iter()
            .map(|&id| self.map.label(id).unwrap_or(UNK_TOKEN).to_string())
            .collect()
    }

    pub fn from_map(map: IdMap) -> Result<Self> {
        if map.label(PAD_ID) != Some(PAD_TOKEN) || map.label(UNK_ID) != Some(UNK_TOKEN) {
            return Err(Error::Input(format!(
                "word vocabulary must reserve {PAD_TOKEN}=0 and {UNK_TOKEN}=1"
            )));
        }
        Ok(Self { map })
    }
}

/// Build the word vocabulary from tokenized sentences.
pub fn build_word_vocab<'a, I>(sentences: I, min_count: usize) -> Result<WordVocab>
where
    I: IntoIterator<Item = &'a [String]>,
{
    let mut counts: HashMap<&str, usize> = HashMap::new();
    let mut n_sentences = 0usize;
    for sentence in sentences {
        n_sentences += 1;
        for tok in sentence {
            if tok != PAD_TOKEN && tok != UNK_TOKEN {
                *counts.entry(tok.as_str()).or_default() += 1;
            }
        }
    }
    if n_sentences == 0 {
        return Err(Error::Config("cannot build a vocabulary from an empty dataset".into()));
    }
    counts.retain(|_, c| *c >= min_count.max(1));
    let mut labels = vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string()];
    labels.extend(frequency_order(counts));
    Ok(WordVocab {
        map: IdMap::from_ordered(labels)?,
    })
}

/// Map tokens to ids, unknowns to `UNK_ID`.
pub fn encode_tokens(sentence: &[String], vocab: &WordVocab) -> Result<TokenSequence> {
    if sentence.is_empty() {
        return Err(Error::Input("cannot encode an empty sentence".into()));
    }
    Ok(TokenSequence(
        sentence
            .iter()
            .map(|t| vocab.id(t).unwrap_or(UNK_ID))
            .collect(),
    ))
}

/// Category dictionary with `Null` reserved at id 0.
pub type LabelDict = IdMap;

impl IdMap {
    /// `Null` first, then `labels` in the order given (duplicates and `Null` skipped).
    pub fn from_labels<I: IntoIterator<Item = String>>(labels: I) -> Self {
        let mut ordered = vec![NULL_LABEL.to_string()];
        for l in labels {
            if !ordered.contains(&l) {
                ordered.push(l);
            }
        }
        Self::from_ordered(ordered).expect("deduplicated")
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CategoryDicts {
    pub fragments: LabelDict,
    pub relations: LabelDict,
}

impl CategoryDicts {
    pub fn n_fragments(&self) -> usize {
        self.fragments.len()
    }

    pub fn n_relations(&self) -> usize {
        self.relations.len()
    }

    /// Dictionary for node `index`.
    pub fn for_node(&self, index: usize) -> &LabelDict {
        match kind_of(index) {
            NodeKind::Fragment => &self.fragments,
            NodeKind::Relation => &self.relations,
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        write_text(&dir.join(FRAGMENT_DICT_FILE), &self.fragments.to_json())?;
        write_text(&dir.join(RELATION_DICT_FILE), &self.relations.to_json())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let load = |name: &str| -> Result<LabelDict> {
            let d = IdMap::from_json(&read_text(&dir.join(name))?)?;
            if d.label(NULL_ID) != Some(NULL_LABEL) {
                return Err(Error::Input(format!("{name}: `{NULL_LABEL}` must have id 0")));
            }
            Ok(d)
        };
        Ok(Self {
            fragments: load(FRAGMENT_DICT_FILE)?,
            relations: load(RELATION_DICT_FILE)?,
        })
    }
}

/// Leaf labels form the fragment dictionary, internal labels the relation dictionary.
pub fn build_category_dicts<'a, I>(trees: I) -> CategoryDicts
where
    I: IntoIterator<Item = &'a LabelTree>,
{
    let mut frag: HashMap<&str, usize> = HashMap::new();
    let mut rel: HashMap<&str, usize> = HashMap::new();
    for tree in trees {
        for index in 1..=NODE_COUNT {
            let label = tree.label(index);
            if label == NULL_LABEL {
                continue;
            }
            let counts = match kind_of(index) {
                NodeKind::Fragment => &mut frag,
                NodeKind::Relation => &mut rel,
            };
            *counts.entry(label).or_default() += 1;
        }
    }
    CategoryDicts {
        fragments: LabelDict::from_labels(frequency_order(frag)),
        relations: LabelDict::from_labels(frequency_order(rel)),
    }
}

pub fn save_word_vocab(vocab: &WordVocab, dir: &Path) -> Result<()> {
    write_text(&dir.join(WORD_VOCAB_FILE), &vocab.map.to_json())
}

pub fn load_word_vocab(dir: &Path) -> Result<WordVocab> {
    WordVocab::from_map(IdMap::from_json(&read_text(&dir.join(WORD_VOCAB_FILE))?)?)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}
