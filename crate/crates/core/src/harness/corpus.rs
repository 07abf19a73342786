//! Character tokenizer, generated training text and the steering task.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::TokenBatch;

/// Printable ASCII plus newline.
#[derive(Debug, Clone)]
pub struct Tokenizer {
    symbols: Vec<char>,
}

impl Default for Tokenizer {
    fn default() -> Self {
        let mut symbols = vec!['\n'];
        symbols.extend((32u8..=126).map(char::from));
        Tokenizer { symbols }
    }
}

impl Tokenizer {
    pub fn vocab_size(&self) -> usize {
        self.symbols.len()
    }

    pub fn id(&self, c: char) -> Result<usize> {
        match c {
            '\n' => Ok(0),
            ' '..='~' => Ok(c as usize - 31),
            _ => Err(Error::contract(format!("character {c:?} is outside the tokenizer alphabet"))),
        }
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.chars().map(|c| self.id(c)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter().map(|&i| self.symbols.get(i).copied().unwrap_or('?')).collect()
    }
}

pub const SUBJECTS: [&str; 8] = [
    "The movie",
    "The film",
    "The show",
    "The play",
    "The story",
    "The book",
    "The song",
    "The game",
];
pub const VERBS: [&str; 4] = ["was", "felt", "seemed", "is"];
pub const GOOD_WORD: &str = "good";
pub const BAD_WORD: &str = "bad";

const NAMES: [&str; 8] = ["Anna", "Ben", "Clara", "David", "Ella", "Frank", "Grace", "Henry"];
const PLACES: [&str; 6] = ["market", "river", "station", "garden", "library", "harbor"];
const ACTIONS: [&str; 6] = [
    "sat down",
    "looked around",
    "waited for a while",
    "read a letter",
    "called a friend",
    "went home",
];
const TIMES: [&str; 4] = ["In the morning", "Later that day", "At night", "On Sunday"];

/// Parameters of the generated corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusSpec {
    pub n_chars: usize,
    /// Share of lines that are reviews.
    pub review_share: f64,
    /// Probability that a review ends in the positive word.
    pub good_bias: f64,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            n_chars: 400_000,
            review_share: 0.5,
            good_bias: 0.85,
            seed: 17,
        }
    }
}

fn filler_line(rng: &mut impl Rng) -> String {
    let name = NAMES.choose(rng).expect("non-empty");
    let place = PLACES.choose(rng).expect("non-empty");
    let action = ACTIONS.choose(rng).expect("non-empty");
    match rng.gen_range(0..3) {
        0 => format!("{name} walked to the {place} and {action}."),
        1 => format!("{} {name} {action} near the {place}.", TIMES.choose(rng).expect("non-empty")),
        _ => format!("The {place} was quiet, so {name} {action}."),
    }
}

fn review_line(rng: &mut impl Rng, good_bias: f64) -> String {
    let subject = SUBJECTS.choose(rng).expect("non-empty");
    let verb = VERBS.choose(rng).expect("non-empty");
    let word = if rng.gen_bool(good_bias) { GOOD_WORD } else { BAD_WORD };
    format!("{subject} {verb} {word}.")
}

/// Deterministic newline-separated text.
pub fn generate_corpus(spec: &CorpusSpec) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut text = String::with_capacity(spec.n_chars + 64);
    while text.len() < spec.n_chars {
        let line = if rng.gen_bool(spec.review_share) {
            review_line(&mut rng, spec.good_bias)
        } else {
            filler_line(&mut rng)
        };
        text.push_str(&line);
        text.push('\n');
    }
    text.truncate(spec.n_chars);
    text
}

/// Random `[batch, seq + 1]` windows for next-token training.
pub fn sample_windows(tokens: &[usize], batch: usize, seq: usize, rng: &mut impl Rng) -> Result<Vec<Vec<usize>>> {
    if tokens.len() <= seq + 1 {
        return Err(Error::contract(format!(
            "corpus of {} tokens is too short for windows of {}",
            tokens.len(),
            seq + 1
        )));
    }
    Ok((0..batch)
        .map(|_| {
            let start = rng.gen_range(0..tokens.len() - seq - 1);
            tokens[start..start + seq + 1].to_vec()
        })
        .collect())
}

/// Prompt set and the two single-token answers.
#[derive(Debug, Clone)]
pub struct SteeringTask {
    pub prompts: Vec<String>,
    pub good_token: usize,
    pub bad_token: usize,
    tokenizer: Tokenizer,
}

impl SteeringTask {
    /// All subject/verb combinations, each ending just before the answer word.
    pub fn new(tokenizer: &Tokenizer) -> Result<Self> {
        let prompts = SUBJECTS
            .iter()
            .flat_map(|s| VERBS.iter().map(move |v| format!("{s} {v} ")))
            .collect();
        let first = |w: &str| tokenizer.id(w.chars().next().expect("non-empty word"));
        Ok(SteeringTask {
            prompts,
            good_token: first(GOOD_WORD)?,
            bad_token: first(BAD_WORD)?,
            tokenizer: tokenizer.clone(),
        })
    }

    pub fn max_prompt_len(&self) -> usize {
        self.prompts.iter().map(String::len).max().unwrap_or(0)
    }

    /// Right-padded prompt batch and the answer position of each row.
    pub fn batch(&self, prompts: &[String]) -> Result<(TokenBatch, Vec<usize>)> {
        let seq = prompts.iter().map(String::len).max().unwrap_or(0);
        let pad = self.tokenizer.id(' ')?;
        let mut tokens = Vec::with_capacity(prompts.len() * seq);
        let mut last = Vec::with_capacity(prompts.len());
        for p in prompts {
            let ids = self.tokenizer.encode(p)?;
            last.push(ids.len() - 1);
            tokens.extend_from_slice(&ids);
            tokens.extend(std::iter::repeat_n(pad, seq - ids.len()));
        }
        Ok((TokenBatch::new(tokens, prompts.len(), seq)?, last))
    }

    /// Targets that score only the answer position of each row.
    pub fn targets(&self, batch: &TokenBatch, last: &[usize], answer: usize) -> Vec<Option<usize>> {
        let mut t = vec![None; batch.batch * batch.seq];
        for (row, &pos) in last.iter().enumerate() {
            t[row * batch.seq + pos] = Some(answer);
        }
        t
    }
}
