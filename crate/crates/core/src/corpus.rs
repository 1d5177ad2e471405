//! Vocabularies and deterministic synthetic tasks.
//!
//! Every prompt is the task body followed by `<bos>`, which marks where the
//! response begins; every response ends with `<eos>`.

use std::collections::HashMap;
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Result, SdlmError, TokenId};

pub const MASK_ID: TokenId = 0;
pub const BOS_ID: TokenId = 1;
pub const EOS_ID: TokenId = 2;
pub const PAD_ID: TokenId = 3;

const SPECIALS: [&str; 4] = ["<mask>", "<bos>", "<eos>", "<pad>"];

/// Opening of "Alice's Adventures in Wonderland" (1865, public domain),
/// lowercased and restricted to letters, space and `,.'`.
const CHARS_TEXT: &str = "alice was beginning to get very tired of sitting by her sister \
on the bank, and of having nothing to do. once or twice she had peeped into the book \
her sister was reading, but it had no pictures or conversations in it, and what is \
the use of a book, thought alice, without pictures or conversations. so she was \
considering in her own mind, as well as she could, for the hot day made her feel very \
sleepy and stupid, whether the pleasure of making a daisy chain would be worth the \
trouble of getting up and picking the daisies, when suddenly a white rabbit with pink \
eyes ran close by her. there was nothing so very remarkable in that, nor did alice \
think it so very much out of the way to hear the rabbit say to itself, oh dear. oh \
dear. i shall be late. but when the rabbit actually took a watch out of its waistcoat \
pocket, and looked at it, and then hurried on, alice started to her feet, for it \
flashed across her mind that she had never before seen a rabbit with either a \
waistcoat pocket, or a watch to take out of it, and burning with curiosity, she ran \
across the field after it, and fortunately was just in time to see it pop down a \
large rabbit hole under the hedge.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Copy,
    Reverse,
    Add,
    Chars,
}

impl Task {
    pub const ALL: [Task; 4] = [Task::Copy, Task::Reverse, Task::Add, Task::Chars];

    pub fn name(self) -> &'static str {
        match self {
            Task::Copy => "copy",
            Task::Reverse => "reverse",
            Task::Add => "add",
            Task::Chars => "chars",
        }
    }

    fn data_symbols(self) -> Vec<char> {
        match self {
            Task::Copy | Task::Reverse => ('a'..='p').collect(),
            Task::Add => "0123456789+=".chars().collect(),
            Task::Chars => {
                let mut chars: Vec<char> = CHARS_TEXT.chars().collect();
                chars.sort_unstable();
                chars.dedup();
                chars
            }
        }
    }

    /// Encode a free-text prompt body the way generated samples are laid out.
    pub fn format_prompt(self, vocab: &Vocab, body: &str) -> Result<Vec<TokenId>> {
        let mut ids = vocab.encode(body)?;
        ids.push(vocab.bos_id);
        Ok(ids)
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = SdlmError;

    fn from_str(s: &str) -> Result<Self> {
        Task::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| SdlmError::config(format!("unknown task {s:?}")))
    }
}

/// Token table. Special tokens occupy ids 0..4; data symbols are single chars.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    lookup: HashMap<char, TokenId>,
    pub mask_id: TokenId,
    pub bos_id: TokenId,
    pub eos_id: TokenId,
    pub pad_id: TokenId,
}

impl Vocab {
    fn from_symbols(symbols: &[char]) -> Self {
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        let mut lookup = HashMap::with_capacity(symbols.len());
        for &c in symbols {
            lookup.insert(c, tokens.len() as TokenId);
            tokens.push(c.to_string());
        }
        Vocab {
            tokens,
            lookup,
            mask_id: MASK_ID,
            bos_id: BOS_ID,
            eos_id: EOS_ID,
            pad_id: PAD_ID,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn is_special(&self, id: TokenId) -> bool {
        (id as usize) < SPECIALS.len()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn encode(&self, text: &str) -> Result<Vec<TokenId>> {
        text.chars()
            .map(|c| self.lookup.get(&c).copied().ok_or(SdlmError::UnknownSymbol(c)))
            .collect()
    }

    /// Special tokens render as their bracketed names; out-of-range ids as `<?id>`.
    pub fn decode(&self, ids: &[TokenId]) -> String {
        ids.iter()
            .map(|&id| match self.token(id) {
                Some(t) => t.to_string(),
                None => format!("<?{id}>"),
            })
            .collect()
    }
}

/// Fixed vocabulary for a task name.
pub fn build_vocab(task_name: &str) -> Result<Vocab> {
    let task: Task = task_name.parse()?;
    Ok(task.vocab())
}

impl Task {
    pub fn vocab(self) -> Vocab {
        Vocab::from_symbols(&self.data_symbols())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Sample {
    pub prompt: Vec<TokenId>,
    pub response: Vec<TokenId>,
}

/// `count` samples of `task`, reproducible from `seed`.
///
/// `len_range` is the payload length for copy/reverse, the digit count of
/// each operand for add, and both window lengths for chars.
pub fn gen_samples(
    task_name: &str,
    count: usize,
    seed: u64,
    len_range: (usize, usize),
) -> Result<Vec<Sample>> {
    let task: Task = task_name.parse()?;
    gen_task_samples(task, count, seed, len_range)
}

pub fn gen_task_samples(
    task: Task,
    count: usize,
    seed: u64,
    (min, max): (usize, usize),
) -> Result<Vec<Sample>> {
    if count == 0 {
        return Err(SdlmError::config("sample count must be at least 1"));
    }
    if min == 0 || min > max {
        return Err(SdlmError::config(format!("invalid length range ({min}, {max})")));
    }
    if task == Task::Add && max > 18 {
        return Err(SdlmError::config("add operands are limited to 18 digits"));
    }
    let text: Vec<char> = CHARS_TEXT.chars().collect();
    if task == Task::Chars && 2 * max > text.len() {
        return Err(SdlmError::config("chars windows longer than the bundled text"));
    }

    let vocab = task.vocab();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(count);
    for _ in 0..count {
        let (body, answer) = match task {
            Task::Copy | Task::Reverse => {
                let symbols = task.data_symbols();
                let len = rng.random_range(min..=max);
                let payload: String = (0..len)
                    .map(|_| symbols[rng.random_range(0..symbols.len())])
                    .collect();
                let answer = if task == Task::Copy {
                    payload.clone()
                } else {
                    payload.chars().rev().collect()
                };
                (payload, answer)
            }
            Task::Add => {
                let a = random_operand(&mut rng, min, max);
                let b = random_operand(&mut rng, min, max);
                (
                    format!("{}+{}=", little_endian(a), little_endian(b)),
                    little_endian(a + b),
                )
            }
            Task::Chars => {
                let prompt_len = rng.random_range(min..=max);
                let response_len = rng.random_range(min..=max);
                let start = rng.random_range(0..=text.len() - prompt_len - response_len);
                let body: String = text[start..start + prompt_len].iter().collect();
                let answer: String = text[start + prompt_len..start + prompt_len + response_len]
                    .iter()
                    .collect();
                (body, answer)
            }
        };
        let prompt = task.format_prompt(&vocab, &body)?;
        let mut response = vocab.encode(&answer)?;
        response.push(vocab.eos_id);
        samples.push(Sample { prompt, response });
    }
    Ok(samples)
}

fn random_operand(rng: &mut ChaCha8Rng, min_digits: usize, max_digits: usize) -> u64 {
    let digits = rng.random_range(min_digits..=max_digits) as u32;
    if digits == 1 {
        rng.random_range(0..10)
    } else {
        rng.random_range(10u64.pow(digits - 1)..10u64.pow(digits))
    }
}

/// Base-10 digits, least significant first.
pub fn little_endian(n: u64) -> String {
    n.to_string().chars().rev().collect()
}

pub fn write_jsonl<W: Write>(mut out: W, samples: &[Sample]) -> Result<()> {
    for s in samples {
        serde_json::to_writer(&mut out, s)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_jsonl<R: BufRead>(input: R) -> Result<Vec<Sample>> {
    let mut samples = Vec::new();
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        samples.push(serde_json::from_str(&line)?);
    }
    Ok(samples)
}
