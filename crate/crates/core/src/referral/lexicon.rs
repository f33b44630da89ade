//! Word lists shared by the synthetic grammar and the built-in tagger.

use super::Pos;

pub const NOUNS: &[&str] = &[
    "dog", "ball", "man", "woman", "child", "boy", "girl", "cat", "horse", "bike", "car",
    "table", "tree", "street", "beach", "water", "grass", "hat", "shirt", "bench", "frisbee",
    "skateboard", "surfboard", "wave", "field", "road", "building", "window", "door", "chair",
    "plate", "pizza", "cake", "phone", "book", "bag", "umbrella", "kite", "bird", "sheep",
    "cow", "train", "bus", "boat", "truck", "fence", "flower", "rock",
];

/// Relation words with their coarse tags. Coverbs are tagged as verbs.
pub const RELATIONS: &[(&str, Pos)] = &[
    ("play", Pos::Verb),
    ("hold", Pos::Verb),
    ("ride", Pos::Verb),
    ("watch", Pos::Verb),
    ("chase", Pos::Verb),
    ("eat", Pos::Verb),
    ("carry", Pos::Verb),
    ("throw", Pos::Verb),
    ("wear", Pos::Verb),
    ("push", Pos::Verb),
    ("pull", Pos::Verb),
    ("sit", Pos::Verb),
    ("on", Pos::Adp),
    ("in", Pos::Adp),
    ("near", Pos::Adp),
    ("under", Pos::Adp),
    ("behind", Pos::Adp),
    ("beside", Pos::Adp),
    ("with", Pos::Adp),
    ("over", Pos::Adp),
    ("across", Pos::Adp),
    ("along", Pos::Adp),
    ("and", Pos::Conj),
    ("or", Pos::Conj),
];

pub const ADJECTIVES: &[&str] = &[
    "red", "blue", "green", "small", "big", "young", "old", "white", "black", "brown",
    "little", "large",
];

/// Tokens dropped during whitening.
pub const FUNCTION_WORDS: &[&str] = &[
    "a", "an", "the", "this", "that", "these", "those", "some", "two", "three", "is", "are",
    "its", "his", "her", "their", ".", ",", "!", "?", ";", ":",
];

/// Irregular inflections mapped to their lemma.
pub const IRREGULAR: &[(&str, &str)] = &[
    ("men", "man"),
    ("women", "woman"),
    ("children", "child"),
    ("ate", "eat"),
    ("eaten", "eat"),
    ("held", "hold"),
    ("rode", "ride"),
    ("ridden", "ride"),
    ("threw", "throw"),
    ("thrown", "throw"),
    ("sat", "sit"),
    ("wore", "wear"),
    ("worn", "wear"),
    ("carries", "carry"),
    ("carried", "carry"),
];
