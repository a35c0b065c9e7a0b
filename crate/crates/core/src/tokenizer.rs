//! Word-level vocabulary, context serialization with field markers and
//! left truncation.

use std::collections::{BTreeMap, HashMap};
use std::ops::Deref;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{Dialogue, PovContext};
use crate::error::{CoreError, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const SEP: usize = 4;
pub const SETTING_NAME: usize = 5;
pub const SETTING_DESC: usize = 6;
pub const PARTNER_NAME: usize = 7;
pub const SELF_NAME: usize = 8;
pub const SELF_PERSONA: usize = 9;

pub const RESERVED: [&str; 10] = [
    "<pad>",
    "<bos>",
    "<eos>",
    "<unk>",
    "<sep>",
    "_setting_name",
    "_setting_desc",
    "_partner_name",
    "_self_name",
    "_self_persona",
];

pub fn is_reserved(id: usize) -> bool {
    id < RESERVED.len()
}

/// A sequence of token ids.
#[derive(Debug, Clone, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenSeq(pub Vec<usize>);

impl Deref for TokenSeq {
    type Target = [usize];

    fn deref(&self) -> &[usize] {
        &self.0
    }
}

impl From<Vec<usize>> for TokenSeq {
    fn from(v: Vec<usize>) -> Self {
        Self(v)
    }
}

impl FromIterator<usize> for TokenSeq {
    fn from_iter<I: IntoIterator<Item = usize>>(iter: I) -> Self {
        Self(iter.into_iter().collect())
    }
}

impl TokenSeq {
    pub fn into_vec(self) -> Vec<usize> {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    reserved: BTreeMap<String, usize>,
    tokens: Vec<String>,
}

impl Vocabulary {
    fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(CoreError::Config(format!("duplicate vocabulary entry `{t}`")));
            }
        }
        Ok(Self { tokens, index })
    }

    /// A vocabulary of only the reserved tokens plus `words`, in order.
    pub fn from_words<S: AsRef<str>>(words: &[S]) -> Result<Self> {
        let tokens = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(words.iter().map(|w| w.as_ref().to_string()))
            .collect();
        Self::from_tokens(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn encode(&self, text: &str) -> TokenSeq {
        text.split_whitespace().map(|w| self.id(w).unwrap_or(UNK)).collect()
    }

    /// Joins non-padding tokens with single spaces.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&i| i != PAD)
            .map(|&i| self.token(i).unwrap_or(RESERVED[UNK]))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Like [`Vocabulary::decode`] but drops BOS/EOS/PAD.
    pub fn decode_text(&self, ids: &[usize]) -> String {
        let words: Vec<usize> = ids.iter().copied().filter(|&i| !matches!(i, PAD | BOS | EOS)).collect();
        self.decode(&words)
    }

    pub fn to_json(&self) -> String {
        let file = VocabFile {
            reserved: RESERVED.iter().enumerate().map(|(i, s)| (s.to_string(), i)).collect(),
            tokens: self.tokens[RESERVED.len()..].to_vec(),
        };
        serde_json::to_string_pretty(&file).expect("vocabulary serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let file: VocabFile = serde_json::from_str(s)?;
        for (i, name) in RESERVED.iter().enumerate() {
            if file.reserved.get(*name) != Some(&i) {
                return Err(CoreError::Config(format!("reserved token `{name}` must have id {i}")));
            }
        }
        Self::from_words(&file.tokens)
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_json().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Every whitespace token of every text field with frequency ≥ `min_count`,
/// ordered by frequency (descending) and then lexicographically.
pub fn build_vocab(corpus: &[Dialogue], min_count: usize) -> Result<Vocabulary> {
    if corpus.is_empty() {
        return Err(CoreError::Input("cannot build a vocabulary from an empty corpus".into()));
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for d in corpus {
        let texts = [&d.setting_name, &d.setting_desc]
            .into_iter()
            .chain(d.characters.iter().flat_map(|c| [&c.name, &c.persona]))
            .chain(d.utterances.iter().map(|u| &u.text));
        for text in texts {
            for w in text.split_whitespace() {
                *counts.entry(w).or_default() += 1;
            }
        }
    }
    let mut words: Vec<(&str, usize)> = counts
        .into_iter()
        .filter(|(w, c)| *c >= min_count && !RESERVED.contains(w))
        .collect();
    words.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    let words: Vec<&str> = words.into_iter().map(|(w, _)| w).collect();
    Vocabulary::from_words(&words)
}

/// Context fields that can be serialized. `A` self persona, `B` self name,
/// `C` partner name, `D` setting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct FieldSet {
    pub persona: bool,
    pub self_name: bool,
    pub partner_name: bool,
    pub setting: bool,
    pub history: bool,
}

impl FieldSet {
    pub const ALL: FieldSet = FieldSet {
        persona: true,
        self_name: true,
        partner_name: true,
        setting: true,
        history: true,
    };
    pub const NONE: FieldSet = FieldSet {
        persona: false,
        self_name: false,
        partner_name: false,
        setting: false,
        history: false,
    };

    /// Parses letters from `ABCD` plus `H` for history, e.g. `"ABCD"` or `"B"`.
    pub fn parse(s: &str) -> Result<Self> {
        let mut f = FieldSet::NONE;
        for c in s.chars() {
            match c.to_ascii_uppercase() {
                'A' => f.persona = true,
                'B' => f.self_name = true,
                'C' => f.partner_name = true,
                'D' => f.setting = true,
                'H' => f.history = true,
                _ => return Err(CoreError::Config(format!("unknown field `{c}` in `{s}`"))),
            }
        }
        Ok(f)
    }

    pub fn is_empty(&self) -> bool {
        *self == FieldSet::NONE
    }

    pub fn profile_only(&self) -> bool {
        !self.history && !self.is_empty()
    }
}

impl TryFrom<String> for FieldSet {
    type Error = CoreError;

    fn try_from(s: String) -> Result<Self> {
        FieldSet::parse(&s)
    }
}

impl From<FieldSet> for String {
    fn from(f: FieldSet) -> String {
        f.to_string()
    }
}

impl std::fmt::Display for FieldSet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for (on, c) in [
            (self.persona, 'A'),
            (self.self_name, 'B'),
            (self.partner_name, 'C'),
            (self.setting, 'D'),
            (self.history, 'H'),
        ] {
            if on {
                write!(f, "{c}")?;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FieldKind {
    SettingName,
    SettingDesc,
    PartnerName,
    SelfName,
    SelfPersona,
    History,
}

/// Token range of one serialized field, marker included.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FieldSpan {
    pub kind: FieldKind,
    pub range: std::ops::Range<usize>,
}

pub fn serialize_context(ctx: &PovContext, vocab: &Vocabulary, include: FieldSet) -> TokenSeq {
    serialize_with_spans(ctx, vocab, include).0
}

/// Serializes in the fixed order setting name, setting description,
/// partner name, self name, self persona, then history with SEP before
/// every utterance.
pub fn serialize_with_spans(ctx: &PovContext, vocab: &Vocabulary, include: FieldSet) -> (TokenSeq, Vec<FieldSpan>) {
    let mut out = Vec::new();
    let mut spans = Vec::new();
    let mut field = |out: &mut Vec<usize>, kind, marker: usize, text: &str| {
        let start = out.len();
        out.push(marker);
        out.extend(vocab.encode(text).iter());
        spans.push(FieldSpan {
            kind,
            range: start..out.len(),
        });
    };
    if include.setting {
        field(&mut out, FieldKind::SettingName, SETTING_NAME, &ctx.setting_name);
        field(&mut out, FieldKind::SettingDesc, SETTING_DESC, &ctx.setting_desc);
    }
    if include.partner_name {
        field(&mut out, FieldKind::PartnerName, PARTNER_NAME, &ctx.partner_name);
    }
    if include.self_name {
        field(&mut out, FieldKind::SelfName, SELF_NAME, &ctx.self_name);
    }
    if include.persona {
        field(&mut out, FieldKind::SelfPersona, SELF_PERSONA, &ctx.self_persona);
    }
    if include.history {
        for (_, text) in &ctx.history {
            field(&mut out, FieldKind::History, SEP, text);
        }
    }
    (TokenSeq(out), spans)
}

/// Keeps the last `max_len` tokens.
pub fn truncate_left(seq: &[usize], max_len: usize) -> TokenSeq {
    let max_len = max_len.max(1);
    TokenSeq(seq[seq.len().saturating_sub(max_len)..].to_vec())
}
