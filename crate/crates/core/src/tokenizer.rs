//! Hangul jamo tokenizer.
//!
//! Every precomposed syllable (U+AC00..=U+D7A3) is split arithmetically into
//! its initial consonant, medial vowel and optional final consonant, each of
//! which has its own id range. A small auxiliary set (space, `. , ? !`, ASCII
//! letters and digits) passes through as one token per character.
//!
//! Vocabulary layout (ids are stable):
//!
//! | ids       | class     | content                              |
//! |-----------|-----------|--------------------------------------|
//! | 0..=3     | special   | `<pad>`, `<bos>`, `<eos>`, space     |
//! | 4..=7     | punct     | `.` `,` `?` `!`                      |
//! | 8..=33    | latin     | `a`..=`z`                            |
//! | 34..=59   | latin     | `A`..=`Z`                            |
//! | 60..=69   | digit     | `0`..=`9`                            |
//! | 70..=88   | initial   | 19 leading consonants (U+1100..)     |
//! | 89..=109  | medial    | 21 vowels (U+1161..)                 |
//! | 110..=137 | final     | index 0 = no final, then U+11A8..    |

use crate::error::{Error, Result};

const S_BASE: u32 = 0xAC00;
const L_BASE: u32 = 0x1100;
const V_BASE: u32 = 0x1161;
const T_BASE: u32 = 0x11A7;
pub const INITIAL_COUNT: u32 = 19;
pub const MEDIAL_COUNT: u32 = 21;
pub const FINAL_COUNT: u32 = 28;
const N_COUNT: u32 = MEDIAL_COUNT * FINAL_COUNT;
pub const SYLLABLE_COUNT: u32 = INITIAL_COUNT * N_COUNT;

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const SPACE: u32 = 3;
const PUNCT_BASE: u32 = 4;
const PUNCT: [char; 4] = ['.', ',', '?', '!'];
const LOWER_BASE: u32 = 8;
const UPPER_BASE: u32 = 34;
const DIGIT_BASE: u32 = 60;
pub const INITIAL_BASE: u32 = 70;
pub const MEDIAL_BASE: u32 = INITIAL_BASE + INITIAL_COUNT;
pub const FINAL_BASE: u32 = MEDIAL_BASE + MEDIAL_COUNT;
pub const VOCAB_SIZE: usize = (FINAL_BASE + FINAL_COUNT) as usize;

/// Token ids for one piece of text.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct PhonemeSequence {
    pub tokens: Vec<u32>,
}

impl PhonemeSequence {
    pub fn new(tokens: Vec<u32>) -> Result<Self> {
        if let Some(&t) = tokens.iter().find(|&&t| t as usize >= VOCAB_SIZE) {
            return Err(Error::IndexOutOfRange {
                index: t as usize,
                size: VOCAB_SIZE,
            });
        }
        Ok(Self { tokens })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn as_usize(&self) -> Vec<usize> {
        self.tokens.iter().map(|&t| t as usize).collect()
    }
}

/// Positional class of a vocabulary entry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenClass {
    Special,
    Punct,
    Latin,
    Digit,
    Initial,
    Medial,
    Final,
}

impl TokenClass {
    pub fn name(self) -> &'static str {
        match self {
            TokenClass::Special => "special",
            TokenClass::Punct => "punct",
            TokenClass::Latin => "latin",
            TokenClass::Digit => "digit",
            TokenClass::Initial => "initial",
            TokenClass::Medial => "medial",
            TokenClass::Final => "final",
        }
    }
}

/// Class of a token id, or `None` if the id is outside the vocabulary.
pub fn class_of(id: u32) -> Option<TokenClass> {
    Some(match id {
        PAD..=SPACE => TokenClass::Special,
        4..=7 => TokenClass::Punct,
        8..=59 => TokenClass::Latin,
        60..=69 => TokenClass::Digit,
        _ if (INITIAL_BASE..MEDIAL_BASE).contains(&id) => TokenClass::Initial,
        _ if (MEDIAL_BASE..FINAL_BASE).contains(&id) => TokenClass::Medial,
        _ if (FINAL_BASE..VOCAB_SIZE as u32).contains(&id) => TokenClass::Final,
        _ => return None,
    })
}

/// Printable form of a token, used by the vocabulary dump.
pub fn glyph(id: u32) -> String {
    let ch = |cp: u32| char::from_u32(cp).map(String::from).unwrap_or_default();
    match class_of(id) {
        None => String::new(),
        Some(TokenClass::Special) => ["<pad>", "<bos>", "<eos>", "<space>"][id as usize].to_string(),
        Some(TokenClass::Punct) => PUNCT[(id - PUNCT_BASE) as usize].to_string(),
        Some(TokenClass::Latin) if id < UPPER_BASE => ch('a' as u32 + id - LOWER_BASE),
        Some(TokenClass::Latin) => ch('A' as u32 + id - UPPER_BASE),
        Some(TokenClass::Digit) => ch('0' as u32 + id - DIGIT_BASE),
        Some(TokenClass::Initial) => ch(L_BASE + id - INITIAL_BASE),
        Some(TokenClass::Medial) => ch(V_BASE + id - MEDIAL_BASE),
        Some(TokenClass::Final) if id == FINAL_BASE => "<none>".to_string(),
        Some(TokenClass::Final) => ch(T_BASE + id - FINAL_BASE),
    }
}

/// Decomposition indices (initial, medial, final) of a precomposed syllable.
pub fn decompose_syllable(c: char) -> Option<(u32, u32, u32)> {
    let cp = c as u32;
    if !(S_BASE..S_BASE + SYLLABLE_COUNT).contains(&cp) {
        return None;
    }
    let index = cp - S_BASE;
    Some((index / N_COUNT, (index % N_COUNT) / FINAL_COUNT, index % FINAL_COUNT))
}

pub fn compose_syllable(initial: u32, medial: u32, fin: u32) -> Option<char> {
    if initial >= INITIAL_COUNT || medial >= MEDIAL_COUNT || fin >= FINAL_COUNT {
        return None;
    }
    char::from_u32(S_BASE + initial * N_COUNT + medial * FINAL_COUNT + fin)
}

fn auxiliary_id(c: char) -> Option<u32> {
    match c {
        ' ' => Some(SPACE),
        'a'..='z' => Some(LOWER_BASE + (c as u32 - 'a' as u32)),
        'A'..='Z' => Some(UPPER_BASE + (c as u32 - 'A' as u32)),
        '0'..='9' => Some(DIGIT_BASE + (c as u32 - '0' as u32)),
        _ => PUNCT
            .iter()
            .position(|&p| p == c)
            .map(|i| PUNCT_BASE + i as u32),
    }
}

pub fn tokenize(text: &str) -> Result<PhonemeSequence> {
    let mut tokens = Vec::with_capacity(text.len());
    for (position, c) in text.chars().enumerate() {
        if let Some((l, v, t)) = decompose_syllable(c) {
            tokens.push(INITIAL_BASE + l);
            tokens.push(MEDIAL_BASE + v);
            if t != 0 {
                tokens.push(FINAL_BASE + t);
            }
        } else if let Some(id) = auxiliary_id(c) {
            tokens.push(id);
        } else {
            return Err(Error::UnsupportedCharacter {
                position,
                codepoint: c as u32,
            });
        }
    }
    Ok(PhonemeSequence { tokens })
}

pub fn detokenize(seq: &PhonemeSequence) -> Result<String> {
    let toks = &seq.tokens;
    let mut out = String::with_capacity(toks.len());
    let mut i = 0;
    while i < toks.len() {
        let id = toks[i];
        let malformed = Error::MalformedSequence { position: i };
        match class_of(id) {
            Some(TokenClass::Initial) => {
                let medial = match toks.get(i + 1).copied() {
                    Some(m) if class_of(m) == Some(TokenClass::Medial) => m,
                    _ => return Err(Error::MalformedSequence { position: i + 1 }),
                };
                let mut fin = 0;
                let mut used = 2;
                if let Some(&f) = toks.get(i + 2) {
                    if class_of(f) == Some(TokenClass::Final) {
                        if f == FINAL_BASE {
                            return Err(Error::MalformedSequence { position: i + 2 });
                        }
                        fin = f - FINAL_BASE;
                        used = 3;
                    }
                }
                let c = compose_syllable(id - INITIAL_BASE, medial - MEDIAL_BASE, fin)
                    .ok_or(malformed)?;
                out.push(c);
                i += used;
            }
            Some(TokenClass::Special) if id == SPACE => {
                out.push(' ');
                i += 1;
            }
            Some(TokenClass::Punct | TokenClass::Latin | TokenClass::Digit) => {
                out.push_str(&glyph(id));
                i += 1;
            }
            _ => return Err(malformed),
        }
    }
    Ok(out)
}

/// All vocabulary entries as `(id, class, glyph)`.
pub fn vocabulary() -> Vec<(u32, TokenClass, String)> {
    (0..VOCAB_SIZE as u32)
        .map(|id| (id, class_of(id).expect("id within vocabulary"), glyph(id)))
        .collect()
}
