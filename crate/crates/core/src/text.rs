//! Tokenization, lexicon tagging and shallow chunking.

use std::collections::HashMap;
use std::fmt;
use std::io::Read;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum PosTag {
    Noun,
    Adj,
    Adv,
    Verb,
    Det,
    Adp,
    Pron,
    Conj,
    Num,
    Other,
}

impl PosTag {
    pub const ALL: [PosTag; 10] = [
        PosTag::Noun,
        PosTag::Adj,
        PosTag::Adv,
        PosTag::Verb,
        PosTag::Det,
        PosTag::Adp,
        PosTag::Pron,
        PosTag::Conj,
        PosTag::Num,
        PosTag::Other,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PosTag::Noun => "NOUN",
            PosTag::Adj => "ADJ",
            PosTag::Adv => "ADV",
            PosTag::Verb => "VERB",
            PosTag::Det => "DET",
            PosTag::Adp => "ADP",
            PosTag::Pron => "PRON",
            PosTag::Conj => "CONJ",
            PosTag::Num => "NUM",
            PosTag::Other => "OTHER",
        }
    }
}

impl fmt::Display for PosTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PosTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PosTag::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown POS tag {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Token {
    pub text: String,
    pub tag: PosTag,
    pub index: usize,
}

/// Half-open token range `start..end`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        Span { start, end }
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start == self.end
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaggedCaption {
    pub tokens: Vec<Token>,
    pub noun_phrases: Vec<Span>,
    pub verb_phrases: Vec<Span>,
}

impl TaggedCaption {
    /// Builds a caption from parallel word/tag lists and runs both chunkers.
    pub fn from_parts<S: Into<String>>(words: impl IntoIterator<Item = S>, tags: &[PosTag]) -> Result<Self> {
        let words: Vec<String> = words.into_iter().map(Into::into).collect();
        if words.len() != tags.len() {
            return Err(Error::DimMismatch {
                expected: words.len(),
                found: tags.len(),
            });
        }
        let tokens = words
            .into_iter()
            .zip(tags)
            .enumerate()
            .map(|(index, (text, &tag))| Token { text, tag, index })
            .collect();
        Ok(Self::chunked(tokens))
    }

    fn chunked(tokens: Vec<Token>) -> Self {
        let tags: Vec<PosTag> = tokens.iter().map(|t| t.tag).collect();
        TaggedCaption {
            noun_phrases: chunk_noun_phrases(&tags),
            verb_phrases: chunk_verb_phrases(&tags),
            tokens,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn words(&self) -> Vec<&str> {
        self.tokens.iter().map(|t| t.text.as_str()).collect()
    }

    pub fn tags(&self) -> Vec<PosTag> {
        self.tokens.iter().map(|t| t.tag).collect()
    }

    pub fn text(&self) -> String {
        detokenize(&self.words())
    }
}

const TERMINAL_PUNCT: &[char] = &['.', ',', '!', '?', ';', ':'];

fn is_punct_token(s: &str) -> bool {
    s.len() == 1 && s.starts_with(TERMINAL_PUNCT)
}

/// Whitespace split with trailing `.,!?;:` detached as separate tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for word in text.split_whitespace() {
        let body = word.trim_end_matches(TERMINAL_PUNCT);
        if !body.is_empty() {
            out.push(body.to_string());
        }
        out.extend(word[body.len()..].chars().map(String::from));
    }
    out
}

/// Joins tokens with single spaces, attaching punctuation to the left.
pub fn detokenize<S: AsRef<str>>(tokens: &[S]) -> String {
    let mut out = String::new();
    for tok in tokens {
        let tok = tok.as_ref();
        if !out.is_empty() && !is_punct_token(tok) {
            out.push(' ');
        }
        out.push_str(tok);
    }
    out
}

/// Word → tag map, matched case-insensitively.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Lexicon {
    entries: HashMap<String, PosTag>,
}

impl Lexicon {
    pub fn from_json(json: &str) -> Result<Self> {
        let raw: HashMap<String, PosTag> = serde_json::from_str(json)?;
        Ok(raw.into_iter().collect())
    }

    pub fn from_reader(mut reader: impl Read) -> Result<Self> {
        let mut s = String::new();
        reader
            .read_to_string(&mut s)
            .map_err(|e| Error::io("<lexicon>", e))?;
        Self::from_json(&s)
    }

    /// Curated lexicon covering the bundled fixtures and common caption words.
    pub fn builtin() -> Self {
        Self::from_json(include_str!("../data/lexicon.json")).expect("bundled lexicon is valid")
    }

    pub fn insert(&mut self, word: &str, tag: PosTag) {
        self.entries.insert(word.to_lowercase(), tag);
    }

    pub fn get(&self, word: &str) -> Option<PosTag> {
        self.entries.get(&word.to_lowercase()).copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

impl FromIterator<(String, PosTag)> for Lexicon {
    fn from_iter<I: IntoIterator<Item = (String, PosTag)>>(iter: I) -> Self {
        Lexicon {
            entries: iter.into_iter().map(|(w, t)| (w.to_lowercase(), t)).collect(),
        }
    }
}

fn is_numeral(s: &str) -> bool {
    !s.is_empty() && s.parse::<f64>().is_ok()
}

pub fn tag_with_lexicon<S: AsRef<str>>(tokens: &[S], lexicon: &Lexicon) -> TaggedCaption {
    let tokens = tokens
        .iter()
        .enumerate()
        .map(|(index, tok)| {
            let text = tok.as_ref();
            let tag = if is_punct_token(text) {
                PosTag::Other
            } else if let Some(tag) = lexicon.get(text) {
                tag
            } else if is_numeral(text) {
                PosTag::Num
            } else {
                PosTag::Other
            };
            Token {
                text: text.to_string(),
                tag,
                index,
            }
        })
        .collect();
    TaggedCaption::chunked(tokens)
}

/// Tokenize and tag in one go.
pub fn analyze(text: &str, lexicon: &Lexicon) -> TaggedCaption {
    tag_with_lexicon(&tokenize(text), lexicon)
}

/// Parses `token<TAB>tag` lines; a blank line closes a caption.
pub fn parse_pretagged(input: &str) -> Result<Vec<TaggedCaption>> {
    let mut captions = Vec::new();
    let mut words = Vec::new();
    let mut tags = Vec::new();
    let mut flush = |words: &mut Vec<String>, tags: &mut Vec<PosTag>| {
        if !words.is_empty() {
            let caption = TaggedCaption::from_parts(words.drain(..), tags)
                .expect("words and tags are pushed in lockstep");
            captions.push(caption);
            tags.clear();
        }
    };
    for (i, raw) in input.lines().enumerate() {
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() {
            flush(&mut words, &mut tags);
            continue;
        }
        let parse_err = |message: String| Error::Parse { line: i + 1, message };
        let mut fields = line.split('\t');
        let (Some(word), Some(tag), None) = (fields.next(), fields.next(), fields.next()) else {
            return Err(parse_err(format!("expected token<TAB>tag, got {line:?}")));
        };
        if word.is_empty() || word.chars().any(char::is_whitespace) {
            return Err(parse_err(format!("invalid token {word:?}")));
        }
        let tag = tag
            .trim()
            .parse::<PosTag>()
            .map_err(|_| parse_err(format!("unknown tag {tag:?}")))?;
        words.push(word.to_string());
        tags.push(tag);
    }
    flush(&mut words, &mut tags);
    Ok(captions)
}

/// Maximal `DET? ADJ* NOUN+` spans, left to right.
pub fn chunk_noun_phrases(tags: &[PosTag]) -> Vec<Span> {
    let mut spans = Vec::new();
    let mut i = 0;
    while i < tags.len() {
        let mut j = i;
        if tags[j] == PosTag::Det {
            j += 1;
        }
        while j < tags.len() && tags[j] == PosTag::Adj {
            j += 1;
        }
        let nouns_start = j;
        while j < tags.len() && tags[j] == PosTag::Noun {
            j += 1;
        }
        if j > nouns_start {
            spans.push(Span::new(i, j));
            i = j;
        } else {
            i += 1;
        }
    }
    spans
}

/// Maximal `VERB+ ADP?` spans, left to right.
pub fn chunk_verb_phrases(tags: &[PosTag]) -> Vec<Span> {
    let mut spans = Vec::new();
    let mut i = 0;
    while i < tags.len() {
        if tags[i] != PosTag::Verb {
            i += 1;
            continue;
        }
        let mut j = i;
        while j < tags.len() && tags[j] == PosTag::Verb {
            j += 1;
        }
        if j < tags.len() && tags[j] == PosTag::Adp {
            j += 1;
        }
        spans.push(Span::new(i, j));
        i = j;
    }
    spans
}
