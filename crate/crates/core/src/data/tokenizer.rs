use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    Byte,
    Char,
}

/// Byte or character-level tokenizer. The char vocabulary is the sorted set
/// of characters seen at build time, after a reserved UNK at id 0.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tokenizer {
    scheme: Scheme,
    chars: Vec<char>,
}

pub const UNK: u32 = 0;
const UNK_CHAR: char = '\u{FFFD}';

impl Tokenizer {
    pub fn byte() -> Self {
        Tokenizer {
            scheme: Scheme::Byte,
            chars: Vec::new(),
        }
    }

    pub fn char_from_texts<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let set: BTreeSet<char> = texts.into_iter().flat_map(str::chars).collect();
        Tokenizer {
            scheme: Scheme::Char,
            chars: set.into_iter().collect(),
        }
    }

    pub fn from_alphabet(chars: impl IntoIterator<Item = char>) -> Self {
        let set: BTreeSet<char> = chars.into_iter().collect();
        Tokenizer {
            scheme: Scheme::Char,
            chars: set.into_iter().collect(),
        }
    }

    pub fn scheme(&self) -> Scheme {
        self.scheme
    }

    pub fn alphabet(&self) -> &[char] {
        &self.chars
    }

    pub fn vocab_size(&self) -> usize {
        match self.scheme {
            Scheme::Byte => 256,
            Scheme::Char => self.chars.len() + 1,
        }
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        match self.scheme {
            Scheme::Byte => text.bytes().map(u32::from).collect(),
            Scheme::Char => text
                .chars()
                .map(|c| match self.chars.binary_search(&c) {
                    Ok(i) => i as u32 + 1,
                    Err(_) => UNK,
                })
                .collect(),
        }
    }

    /// Inverse of [`encode`](Self::encode). Invalid UTF-8 (byte scheme) and
    /// UNK (char scheme) decode to U+FFFD.
    pub fn decode(&self, ids: &[u32]) -> String {
        match self.scheme {
            Scheme::Byte => {
                let bytes: Vec<u8> = ids.iter().map(|&i| i.min(255) as u8).collect();
                String::from_utf8_lossy(&bytes).into_owned()
            }
            Scheme::Char => ids
                .iter()
                .map(|&i| match i {
                    UNK => UNK_CHAR,
                    i => self.chars.get(i as usize - 1).copied().unwrap_or(UNK_CHAR),
                })
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn byte_values() {
        let t = Tokenizer::byte();
        assert_eq!(t.encode("ab"), vec![97, 98]);
        assert_eq!(t.vocab_size(), 256);
    }

    #[test]
    fn char_vocab_and_unknowns() {
        let t = Tokenizer::char_from_texts(["aba"]);
        assert_eq!(t.vocab_size(), 3);
        assert_eq!(t.encode("abz"), vec![1, 2, UNK]);
        assert_eq!(t.decode(&t.encode("baab")), "baab");
    }

    proptest! {
        #[test]
        fn byte_roundtrip(s in "\\PC*") {
            let t = Tokenizer::byte();
            prop_assert_eq!(t.decode(&t.encode(&s)), s);
        }

        #[test]
        fn char_roundtrip(s in "[a-z .0-9]{0,40}") {
            let t = Tokenizer::char_from_texts([s.as_str()]);
            prop_assert_eq!(t.decode(&t.encode(&s)), s);
        }
    }
}
