//! Two synthetic text sources: word-level Markov prose (the "general"
//! distribution) and arithmetic facts (the "target"). Prose uses every
//! character of the arithmetic alphabet inside some of its words, so the
//! target brings new structure but no new tokens.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::numerics::SeedStream;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Generator {
    /// Sentences of pseudo-words, joined by spaces, ending in `.`. Most
    /// words are spelled over `a`–`p`, the rest over the arithmetic symbols.
    MarkovText,
    /// `a+b=c;` style facts over single-digit operands.
    Arithmetic,
}

const LETTERS: &[u8] = b"abcdefghijklmnop";
const SYMBOLS: &[u8] = b"0123456789+-*=;";
/// The last `SYMBOLS.len()` words are spelled with arithmetic symbols, one
/// leading with each, so prose covers the target alphabet.
const LEXICON_SIZE: usize = 48;
const SUCCESSORS: [f64; 4] = [0.5, 0.25, 0.15, 0.1];

impl Generator {
    pub fn alphabet(self) -> Vec<char> {
        match self {
            Generator::MarkovText => LETTERS
                .iter()
                .chain(SYMBOLS)
                .map(|&b| b as char)
                .chain([' ', '.'])
                .collect(),
            Generator::Arithmetic => SYMBOLS.iter().map(|&b| b as char).collect(),
        }
    }

    /// `n_docs` documents of exactly `doc_chars` characters each.
    pub fn generate(self, n_docs: usize, doc_chars: usize, seed: u64) -> Vec<String> {
        let seeds = SeedStream::new(seed).child(self.label());
        match self {
            Generator::MarkovText => {
                let grammar = MarkovGrammar::new(&mut seeds.rng("grammar"));
                let mut rng = seeds.rng("docs");
                (0..n_docs).map(|_| grammar.document(&mut rng, doc_chars)).collect()
            }
            Generator::Arithmetic => {
                let mut rng = seeds.rng("docs");
                (0..n_docs).map(|_| arithmetic_document(&mut rng, doc_chars)).collect()
            }
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Generator::MarkovText => "markov_text",
            Generator::Arithmetic => "arithmetic",
        }
    }
}

struct MarkovGrammar {
    words: Vec<String>,
    next: Vec<[usize; 4]>,
}

impl MarkovGrammar {
    fn new(rng: &mut ChaCha8Rng) -> Self {
        let mut words: Vec<String> = Vec::with_capacity(LEXICON_SIZE);
        while words.len() < LEXICON_SIZE - SYMBOLS.len() {
            let len = rng.random_range(2..=6);
            let w: String = (0..len)
                .map(|_| LETTERS[rng.random_range(0..LETTERS.len())] as char)
                .collect();
            if !words.contains(&w) {
                words.push(w);
            }
        }
        let mut leads = SYMBOLS.to_vec();
        leads.shuffle(rng);
        for lead in leads {
            let tail = rng.random_range(0..=2);
            let w = std::iter::once(lead)
                .chain((0..tail).map(|_| SYMBOLS[rng.random_range(0..SYMBOLS.len())]))
                .map(|b| b as char)
                .collect();
            words.push(w);
        }
        let next = (0..LEXICON_SIZE)
            .map(|_| std::array::from_fn(|_| rng.random_range(0..LEXICON_SIZE)))
            .collect();
        MarkovGrammar { words, next }
    }

    fn successor(&self, word: usize, rng: &mut ChaCha8Rng) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (slot, p) in SUCCESSORS.iter().enumerate() {
            acc += p;
            if u < acc {
                return self.next[word][slot];
            }
        }
        self.next[word][SUCCESSORS.len() - 1]
    }

    fn document(&self, rng: &mut ChaCha8Rng, chars: usize) -> String {
        let mut out = String::with_capacity(chars + 16);
        while out.len() < chars {
            let n_words = rng.random_range(4..=9);
            let mut w = rng.random_range(0..LEXICON_SIZE);
            for i in 0..n_words {
                if i > 0 {
                    out.push(' ');
                    w = self.successor(w, rng);
                }
                out.push_str(&self.words[w]);
            }
            out.push_str(". ");
        }
        out.truncate(chars);
        out
    }
}

fn arithmetic_document(rng: &mut ChaCha8Rng, chars: usize) -> String {
    let mut out = String::with_capacity(chars + 16);
    while out.len() < chars {
        let a: i32 = rng.random_range(0..10);
        let b: i32 = rng.random_range(0..10);
        let (op, c) = match rng.random_range(0..3) {
            0 => ('+', a + b),
            1 => ('-', a - b),
            _ => ('*', a * b),
        };
        out.push_str(&format!("{a}{op}{b}={c};"));
    }
    out.truncate(chars);
    out
}
