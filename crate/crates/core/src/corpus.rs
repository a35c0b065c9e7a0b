//! Two-party grounded dialogues: the data model, the JSONL reader/writer,
//! the seeded synthetic generator and point-of-view flattening.

use std::collections::HashSet;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CharacterProfile {
    pub name: String,
    pub persona: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Utterance {
    pub speaker: usize,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dialogue {
    pub setting_name: String,
    pub setting_desc: String,
    pub characters: [CharacterProfile; 2],
    pub utterances: Vec<Utterance>,
}

impl Dialogue {
    /// Checks the structural invariants; `Err` carries the index of the first
    /// utterance that breaks alternation, or a message for anything else.
    pub fn validate(&self) -> std::result::Result<(), DialogueFault> {
        for c in &self.characters {
            if c.name.trim().is_empty() || c.persona.trim().is_empty() {
                return Err(DialogueFault::Other("empty character name or persona".into()));
            }
        }
        if self.utterances.len() < 2 {
            return Err(DialogueFault::Other("fewer than 2 utterances".into()));
        }
        for (i, u) in self.utterances.iter().enumerate() {
            if u.speaker > 1 {
                return Err(DialogueFault::Other(format!("speaker {} at utterance {i}", u.speaker)));
            }
            if u.text.trim().is_empty() {
                return Err(DialogueFault::Other(format!("empty text at utterance {i}")));
            }
            if i > 0 && self.utterances[i - 1].speaker == u.speaker {
                return Err(DialogueFault::Alternation(i));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    pub fn speaker_name(&self, utterance: usize) -> &str {
        &self.characters[self.utterances[utterance].speaker].name
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DialogueFault {
    Alternation(usize),
    Other(String),
}

/// How many prior utterances a context keeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Prior {
    Count(usize),
    All,
}

impl std::str::FromStr for Prior {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("all") {
            return Ok(Prior::All);
        }
        s.parse()
            .map(Prior::Count)
            .map_err(|_| CoreError::Config(format!("expected a count or `all`, got `{s}`")))
    }
}

/// One participant's view of a dialogue up to (not including) a turn.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct PovContext {
    pub self_name: String,
    pub self_persona: String,
    pub partner_name: String,
    pub setting_name: String,
    pub setting_desc: String,
    /// `(speaker index, text)` with speaker 0/1 as in the parent dialogue.
    pub history: Vec<(usize, String)>,
    pub pov: usize,
}

/// Builds the view of `pov` just before utterance `upto`, keeping at most
/// `n_prior` of the preceding utterances.
pub fn flatten_context(d: &Dialogue, pov: usize, upto: usize, n_prior: Prior) -> Result<PovContext> {
    if pov > 1 {
        return Err(CoreError::Input(format!("pov must be 0 or 1, got {pov}")));
    }
    if upto > d.utterances.len() {
        return Err(CoreError::Input(format!(
            "turn {upto} beyond dialogue of {} utterances",
            d.utterances.len()
        )));
    }
    let keep = match n_prior {
        Prior::All => upto,
        Prior::Count(n) => n.min(upto),
    };
    let me = &d.characters[pov];
    let partner = &d.characters[1 - pov];
    Ok(PovContext {
        self_name: me.name.clone(),
        self_persona: me.persona.clone(),
        partner_name: partner.name.clone(),
        setting_name: d.setting_name.clone(),
        setting_desc: d.setting_desc.clone(),
        history: d.utterances[upto - keep..upto]
            .iter()
            .map(|u| (u.speaker, u.text.clone()))
            .collect(),
        pov,
    })
}

pub fn parse_dialogues(reader: impl BufRead) -> Result<Vec<Dialogue>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let d: Dialogue = serde_json::from_str(&line).map_err(|e| CoreError::Parse {
            line: lineno,
            message: e.to_string(),
        })?;
        match d.validate() {
            Ok(()) => {}
            Err(DialogueFault::Alternation(u)) => {
                return Err(CoreError::Alternation {
                    line: lineno,
                    dialogue: out.len(),
                    utterance: u,
                })
            }
            Err(DialogueFault::Other(message)) => {
                return Err(CoreError::Parse {
                    line: lineno,
                    message,
                })
            }
        }
        out.push(d);
    }
    Ok(out)
}

pub fn load_dialogues(path: impl AsRef<Path>) -> Result<Vec<Dialogue>> {
    let f = std::fs::File::open(path)?;
    parse_dialogues(std::io::BufReader::new(f))
}

/// Canonical serialization: one compact JSON object per line, `\n`-terminated.
pub fn write_dialogues(mut w: impl Write, dialogues: &[Dialogue]) -> Result<()> {
    for d in dialogues {
        serde_json::to_writer(&mut w, d)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn save_dialogues(path: impl AsRef<Path>, dialogues: &[Dialogue]) -> Result<()> {
    let f = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(f);
    write_dialogues(&mut w, dialogues)?;
    w.flush()?;
    Ok(())
}

/// Parameters of the synthetic corpus. Every role owns a private lexicon
/// that no other role uses, so the speaker of any utterance is decidable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusSpec {
    pub n_roles: usize,
    pub role_lexicon_size: usize,
    pub n_dialogues: usize,
    pub turns_per_dialogue: usize,
    /// Inclusive range of body tokens per utterance (the address prefix is extra).
    pub utterance_len: (usize, usize),
    pub n_settings: usize,
    /// Fraction of openers that start with `greetings <partner>`.
    pub opener_address_rate: f64,
    /// Same, for every later utterance.
    pub address_rate: f64,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            n_roles: 16,
            role_lexicon_size: 4,
            n_dialogues: 200,
            turns_per_dialogue: 8,
            utterance_len: (5, 7),
            n_settings: 6,
            opener_address_rate: 0.5,
            address_rate: 0.25,
            seed: 7,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_roles < 2 {
            return Err(CoreError::Config("n_roles must be at least 2".into()));
        }
        let (lo, hi) = self.utterance_len;
        if self.role_lexicon_size == 0
            || self.n_dialogues == 0
            || self.turns_per_dialogue < 2
            || self.n_settings == 0
            || lo == 0
            || hi < lo
        {
            return Err(CoreError::Config(format!("invalid corpus spec {self:?}")));
        }
        for r in [self.opener_address_rate, self.address_rate] {
            if !(0.0..=1.0).contains(&r) {
                return Err(CoreError::Config(format!("rate {r} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

pub const ADDRESS_WORD: &str = "greetings";

pub const FILLER: &[&str] = &[
    "i", "you", "the", "a", "we", "will", "go", "see", "now", "here", "there", "this", "that",
    "is", "my", "your", "what", "how", "come", "look", "think", "know", "good", "long", "time",
    "no", "yes", "and", "with", "to",
];

const SETTING_WORDS: &[&str] = &[
    "old", "dark", "quiet", "stone", "river", "forest", "hall", "tower", "market", "road",
    "cold", "bright", "wide", "narrow", "gate", "field", "hill", "cave", "bridge", "garden",
];

/// A role of the synthetic world: its name and private lexicon.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Role {
    pub name: String,
    pub lexicon: Vec<String>,
}

/// Roles and settings drawn for a spec, exposed so tests and examples can
/// reason about lexicon membership.
#[derive(Debug, Clone)]
pub struct SyntheticWorld {
    pub roles: Vec<Role>,
    pub settings: Vec<(String, String)>,
}

impl SyntheticWorld {
    pub fn new(spec: &CorpusSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5eed_0001);
        let mut used: HashSet<String> = FILLER.iter().chain(SETTING_WORDS).map(|s| s.to_string()).collect();
        used.insert(ADDRESS_WORD.into());
        let roles = (0..spec.n_roles)
            .map(|_| Role {
                name: fresh_word(&mut rng, &mut used, 3),
                lexicon: (0..spec.role_lexicon_size)
                    .map(|_| fresh_word(&mut rng, &mut used, 2))
                    .collect(),
            })
            .collect();
        let settings = (0..spec.n_settings)
            .map(|_| {
                let name = format!("the {} {}", pick(&mut rng, SETTING_WORDS), pick(&mut rng, SETTING_WORDS));
                let desc = (0..5).map(|_| pick(&mut rng, SETTING_WORDS)).collect::<Vec<_>>().join(" ");
                (name, desc)
            })
            .collect();
        Ok(Self { roles, settings })
    }

    pub fn persona(&self, role: usize) -> String {
        format!("i care about {} .", self.roles[role].lexicon.join(" and "))
    }

    /// Index of the role owning `token`, if it belongs to a private lexicon.
    pub fn lexicon_owner(&self, token: &str) -> Option<usize> {
        self.roles.iter().position(|r| r.lexicon.iter().any(|w| w == token))
    }

    pub fn role_by_name(&self, name: &str) -> Option<usize> {
        self.roles.iter().position(|r| r.name == name)
    }
}

fn pick<'a>(rng: &mut impl Rng, words: &[&'a str]) -> &'a str {
    words[rng.gen_range(0..words.len())]
}

fn fresh_word(rng: &mut impl Rng, used: &mut HashSet<String>, syllables: usize) -> String {
    const C: &[u8] = b"bdfgklmnprstvz";
    const V: &[u8] = b"aeiou";
    loop {
        let mut w = String::new();
        for _ in 0..syllables {
            w.push(C[rng.gen_range(0..C.len())] as char);
            w.push(V[rng.gen_range(0..V.len())] as char);
        }
        if syllables == 2 {
            w.push(C[rng.gen_range(0..C.len())] as char);
        }
        if used.insert(w.clone()) {
            return w;
        }
    }
}

/// Deterministic synthetic corpus: the output is a pure function of `spec`.
pub fn generate_synthetic_corpus(spec: &CorpusSpec) -> Result<Vec<Dialogue>> {
    let world = SyntheticWorld::new(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = Vec::with_capacity(spec.n_dialogues);
    for _ in 0..spec.n_dialogues {
        let pair: Vec<usize> = rand::seq::index::sample(&mut rng, spec.n_roles, 2).into_vec();
        let (setting_name, setting_desc) = world.settings.choose(&mut rng).unwrap().clone();
        let first = rng.gen_range(0..2);
        let utterances = (0..spec.turns_per_dialogue)
            .map(|t| {
                let speaker = (first + t) % 2;
                let rate = if t == 0 { spec.opener_address_rate } else { spec.address_rate };
                let addressee = rng.gen_bool(rate).then(|| world.roles[pair[1 - speaker]].name.as_str());
                Utterance {
                    speaker,
                    text: synth_utterance(&mut rng, spec, &world.roles[pair[speaker]], addressee),
                }
            })
            .collect();
        out.push(Dialogue {
            setting_name,
            setting_desc,
            characters: [0, 1].map(|i| CharacterProfile {
                name: world.roles[pair[i]].name.clone(),
                persona: world.persona(pair[i]),
            }),
            utterances,
        });
    }
    Ok(out)
}

fn synth_utterance(rng: &mut impl Rng, spec: &CorpusSpec, role: &Role, addressee: Option<&str>) -> String {
    let (lo, hi) = spec.utterance_len;
    let len = rng.gen_range(lo..=hi);
    let mut body: Vec<&str> = (0..len).map(|_| pick(rng, FILLER)).collect();
    let own = |rng: &mut dyn rand::RngCore| role.lexicon[rng.gen_range(0..role.lexicon.len())].as_str();
    // Lexicon words sit near the front so left truncation removes them first.
    let first = rng.gen_range(0..len.min(2));
    body[first] = own(rng);
    if len > 2 && rng.gen_bool(0.5) {
        let at = rng.gen_range(2..len);
        body[at] = own(rng);
    }
    let mut words = Vec::with_capacity(len + 2);
    if let Some(name) = addressee {
        words.push(ADDRESS_WORD);
        words.push(name);
    }
    words.extend(body);
    words.join(" ")
}

/// Splits dialogues into (train, held-out) with a seeded shuffle.
pub fn split_corpus(dialogues: &[Dialogue], held_out: f64, seed: u64) -> (Vec<Dialogue>, Vec<Dialogue>) {
    let mut idx: Vec<usize> = (0..dialogues.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_test = ((dialogues.len() as f64) * held_out).round() as usize;
    let n_test = n_test.min(dialogues.len());
    let mut test: Vec<usize> = idx[..n_test].to_vec();
    let mut train: Vec<usize> = idx[n_test..].to_vec();
    test.sort_unstable();
    train.sort_unstable();
    (
        train.into_iter().map(|i| dialogues[i].clone()).collect(),
        test.into_iter().map(|i| dialogues[i].clone()).collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Dialogue {
        Dialogue {
            setting_name: "the hall".into(),
            setting_desc: "a long hall".into(),
            characters: [
                CharacterProfile {
                    name: "guard".into(),
                    persona: "i guard the gate".into(),
                },
                CharacterProfile {
                    name: "thief".into(),
                    persona: "i steal things".into(),
                },
            ],
            utterances: (0..7)
                .map(|i| Utterance {
                    speaker: i % 2,
                    text: format!("line {i}"),
                })
                .collect(),
        }
    }

    #[test]
    fn window_arithmetic() {
        let d = tiny();
        let c = flatten_context(&d, 0, 0, Prior::Count(4)).unwrap();
        assert!(c.history.is_empty());
        assert_eq!(c.self_name, "guard");
        let c = flatten_context(&d, 0, 6, Prior::Count(4)).unwrap();
        let texts: Vec<_> = c.history.iter().map(|h| h.1.as_str()).collect();
        assert_eq!(texts, ["line 2", "line 3", "line 4", "line 5"]);
        let c = flatten_context(&d, 0, 6, Prior::All).unwrap();
        assert_eq!(c.history.len(), 6);
        assert!(flatten_context(&d, 2, 0, Prior::All).is_err());
    }

    #[test]
    fn swapping_pov_swaps_names() {
        let d = tiny();
        let a = flatten_context(&d, 0, 3, Prior::All).unwrap();
        let b = flatten_context(&d, 1, 3, Prior::All).unwrap();
        assert_eq!(a.self_name, b.partner_name);
        assert_eq!(a.partner_name, b.self_name);
        assert_eq!(a.setting_desc, b.setting_desc);
        assert_eq!(a.history, b.history);
    }

    #[test]
    fn too_few_roles_rejected() {
        let spec = CorpusSpec {
            n_roles: 1,
            ..CorpusSpec::default()
        };
        assert!(generate_synthetic_corpus(&spec).is_err());
    }
}
