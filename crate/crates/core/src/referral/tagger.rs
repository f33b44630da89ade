use std::collections::HashMap;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::lexicon::{ADJECTIVES, FUNCTION_WORDS, IRREGULAR, NOUNS, RELATIONS};
use crate::error::{Error, Result};
use crate::registry::Registry;

/// Coarse part-of-speech classes used by the whitening step.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Pos {
    Noun,
    Verb,
    Adp,
    Conj,
    Adj,
    Other,
}

impl Pos {
    pub fn is_relation(self) -> bool {
        matches!(self, Pos::Verb | Pos::Adp | Pos::Conj)
    }

    fn parse(s: &str) -> Option<Self> {
        Some(match s.to_ascii_uppercase().as_str() {
            "NOUN" => Pos::Noun,
            "VERB" => Pos::Verb,
            "ADP" => Pos::Adp,
            "CONJ" => Pos::Conj,
            "ADJ" => Pos::Adj,
            "OTHER" => Pos::Other,
            _ => return None,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TaggedToken {
    pub surface: String,
    pub lemma: String,
    pub pos: Pos,
}

impl TaggedToken {
    pub fn new(surface: &str, lemma: &str, pos: Pos) -> Self {
        Self {
            surface: surface.to_string(),
            lemma: lemma.to_string(),
            pos,
        }
    }
}

/// Assigns a lemma and coarse tag to each token.
pub trait Tagger: Send + Sync {
    fn name(&self) -> &str;

    fn tag(&self, token: &str) -> TaggedToken;
}

/// Drop function words and punctuation, keeping tagged lemmas in order.
pub fn whiten_sentence(tokens: &[String], tagger: &dyn Tagger) -> Vec<TaggedToken> {
    tokens
        .iter()
        .map(|t| tagger.tag(t))
        .filter(|t| t.pos != Pos::Other)
        .collect()
}

/// Lexicon tagger covering the synthetic grammar plus common inflections.
/// Words it cannot place are tagged `OTHER` and dropped by whitening.
pub struct BuiltinTagger {
    lemmas: HashMap<String, (String, Pos)>,
}

impl Default for BuiltinTagger {
    fn default() -> Self {
        Self::new()
    }
}

impl BuiltinTagger {
    pub fn new() -> Self {
        let mut lemmas = HashMap::new();
        for n in NOUNS {
            lemmas.insert(n.to_string(), (n.to_string(), Pos::Noun));
        }
        for (r, pos) in RELATIONS {
            lemmas.insert(r.to_string(), (r.to_string(), *pos));
        }
        for a in ADJECTIVES {
            lemmas.insert(a.to_string(), (a.to_string(), Pos::Adj));
        }
        for f in FUNCTION_WORDS {
            lemmas.insert(f.to_string(), (f.to_string(), Pos::Other));
        }
        for (form, lemma) in IRREGULAR {
            let pos = lemmas[*lemma].1;
            lemmas.insert(form.to_string(), (lemma.to_string(), pos));
        }
        Self { lemmas }
    }

    fn lookup(&self, word: &str) -> Option<(String, Pos)> {
        if let Some(hit) = self.lemmas.get(word) {
            return Some(hit.clone());
        }
        // regular inflections: -s, -es, -ing, -ed with optional silent e / doubled consonant
        for suffix in ["ing", "ed", "es", "s"] {
            let Some(stem) = word.strip_suffix(suffix) else {
                continue;
            };
            if stem.len() < 2 {
                continue;
            }
            let mut candidates = vec![stem.to_string(), format!("{stem}e")];
            let bytes = stem.as_bytes();
            if bytes.len() >= 2 && bytes[bytes.len() - 1] == bytes[bytes.len() - 2] {
                candidates.push(stem[..stem.len() - 1].to_string());
            }
            for cand in candidates {
                if let Some((lemma, pos)) = self.lemmas.get(&cand) {
                    if *pos != Pos::Other && *pos != Pos::Adj {
                        return Some((lemma.clone(), *pos));
                    }
                }
            }
        }
        None
    }
}

impl Tagger for BuiltinTagger {
    fn name(&self) -> &str {
        "builtin"
    }

    fn tag(&self, token: &str) -> TaggedToken {
        let lower = token.to_lowercase();
        match self.lookup(&lower) {
            Some((lemma, pos)) => TaggedToken::new(token, &lemma, pos),
            None => TaggedToken::new(token, &lower, Pos::Other),
        }
    }
}

/// Tagger backed by a tab-separated lexicon file (`surface<TAB>lemma<TAB>POS`,
/// `#` comments). Entries take precedence; other words fall back to the
/// built-in lexicon. This is the adapter point for externally tagged corpora.
pub struct FileTagger {
    entries: HashMap<String, (String, Pos)>,
    fallback: BuiltinTagger,
}

impl FileTagger {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = HashMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            let bad = || Error::Input(format!("lexicon line {}: expected surface<TAB>lemma<TAB>POS", lineno + 1));
            if cols.len() != 3 || cols[1].is_empty() {
                return Err(bad());
            }
            let pos = Pos::parse(cols[2]).ok_or_else(bad)?;
            entries.insert(cols[0].to_lowercase(), (cols[1].to_string(), pos));
        }
        Ok(Self {
            entries,
            fallback: BuiltinTagger::new(),
        })
    }

    pub fn from_path(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }
}

impl Tagger for FileTagger {
    fn name(&self) -> &str {
        "file"
    }

    fn tag(&self, token: &str) -> TaggedToken {
        match self.entries.get(&token.to_lowercase()) {
            Some((lemma, pos)) => TaggedToken::new(token, lemma, *pos),
            None => self.fallback.tag(token),
        }
    }
}

/// Construction context for taggers.
#[derive(Clone, Debug, Default)]
pub struct TaggerOptions {
    pub lexicon: Option<PathBuf>,
}

pub fn tagger_registry() -> Registry<dyn Tagger, TaggerOptions> {
    let mut reg: Registry<dyn Tagger, TaggerOptions> = Registry::new("tagger");
    reg.register("builtin", "lexicon tagger for the synthetic grammar", |_| {
        Ok(Box::new(BuiltinTagger::new()))
    });
    reg.register("file", "tab-separated lexicon file (--lexicon)", |opts| {
        let path = opts
            .lexicon
            .as_ref()
            .ok_or_else(|| Error::Config("tagger `file` requires a lexicon path".into()))?;
        Ok(Box::new(FileTagger::from_path(path)?))
    });
    reg
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn whitening_drops_determiners_and_lemmatizes() {
        let tagged = whiten_sentence(&toks("a dog plays the ball"), &BuiltinTagger::new());
        assert_eq!(
            tagged,
            vec![
                TaggedToken::new("dog", "dog", Pos::Noun),
                TaggedToken::new("plays", "play", Pos::Verb),
                TaggedToken::new("ball", "ball", Pos::Noun),
            ]
        );
    }

    #[test]
    fn already_whitened_sentence_is_a_fixed_point() {
        let sentence = toks("man ride horse near street with dog");
        let tagged = whiten_sentence(&sentence, &BuiltinTagger::new());
        let lemmas: Vec<_> = tagged.iter().map(|t| t.lemma.clone()).collect();
        assert_eq!(lemmas, sentence);
    }

    #[test]
    fn inflections_and_irregulars() {
        let t = BuiltinTagger::new();
        for (form, lemma) in [
            ("riding", "ride"),
            ("sitting", "sit"),
            ("benches", "bench"),
            ("dogs", "dog"),
            ("men", "man"),
            ("chased", "chase"),
        ] {
            assert_eq!(t.tag(form).lemma, lemma, "{form}");
        }
        assert_eq!(t.tag("red").pos, Pos::Adj);
        assert_eq!(t.tag("zebra").pos, Pos::Other);
    }

    #[test]
    fn all_other_sentence_whitens_to_empty() {
        assert!(whiten_sentence(&toks("the a ."), &BuiltinTagger::new()).is_empty());
    }

    #[test]
    fn file_tagger_overrides_and_falls_back() {
        let t = FileTagger::parse("# lexicon\nzebra\tzebra\tNOUN\nplays\tperform\tVERB\n").unwrap();
        assert_eq!(t.tag("Zebra").pos, Pos::Noun);
        assert_eq!(t.tag("plays").lemma, "perform");
        assert_eq!(t.tag("dog").pos, Pos::Noun);
        assert!(FileTagger::parse("zebra\tNOUN\n").is_err());
    }

    #[test]
    fn registry_requires_lexicon_for_file() {
        let reg = tagger_registry();
        assert_eq!(reg.names(), vec!["builtin", "file"]);
        assert!(reg.create_with("file", &TaggerOptions::default()).is_err());
        assert!(reg.create_with("builtin", &TaggerOptions::default()).is_ok());
    }
}
