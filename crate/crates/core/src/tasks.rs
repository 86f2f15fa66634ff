//! Synthetic corpora: a locally predictable byte stream (holistic) and a
//! key/value haystack with a final lookup query (retrieval).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{FluxError, Result};

/// Bytes plus the special tokens below.
pub const VOCAB_SIZE: usize = 260;
pub const BOS: u32 = 256;
pub const QUERY: u32 = 257;
pub const SEP: u32 = 258;
pub const PAD: u32 = 259;

/// Query keys, answer values, and records: one record token per
/// `(key, value)` binding, `RECORD_BASE + key·N_VALUES + value`.
pub const KEY_BASE: u32 = 0x80;
pub const N_KEYS: u32 = 8;
pub const VALUE_BASE: u32 = 0x90;
pub const N_VALUES: u32 = 8;
pub const RECORD_BASE: u32 = 0xA0;

pub fn record_token(key: u32, value: u32) -> u32 {
    RECORD_BASE + key * N_VALUES + value
}

const ALPHABET: &[u8] = b"abcdefghijklmnopqrstuvwxyz ";
const SUCCESSORS: usize = 3;
const SUCCESSOR_PROBS: [f64; SUCCESSORS] = [0.6, 0.3, 0.1];
const CHAIN_SEED: u64 = 0x5eed_b16a;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TaskCategory {
    Retrieval,
    Holistic,
}

impl TaskCategory {
    pub fn as_str(self) -> &'static str {
        match self {
            TaskCategory::Retrieval => "retrieval",
            TaskCategory::Holistic => "holistic",
        }
    }
}

impl std::str::FromStr for TaskCategory {
    type Err = FluxError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "retrieval" => Ok(TaskCategory::Retrieval),
            "holistic" => Ok(TaskCategory::Holistic),
            _ => Err(FluxError::contract(format!("unknown task category '{s}'"))),
        }
    }
}

/// Where the queried pair sits in a retrieval haystack.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NeedleDepth {
    /// Uniform over positions outside the sink and local windows.
    Distant,
    /// Inside the query's local window; solvable by sparse attention.
    Local,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskSpec {
    pub name: String,
    pub category: TaskCategory,
    /// Target fraction of sparse layers, in `(0, 1]`.
    pub budget: f64,
    pub min_len: usize,
    pub max_len: usize,
    /// Key/value pairs per retrieval haystack.
    pub n_pairs: usize,
    /// Extra in-haystack lookups of distractor pairs.
    pub n_recalls: usize,
    pub needle: NeedleDepth,
}

impl TaskSpec {
    pub fn new(name: &str, category: TaskCategory, budget: f64, min_len: usize, max_len: usize) -> Result<Self> {
        let spec = Self {
            name: name.to_string(),
            category,
            budget,
            min_len,
            max_len,
            n_pairs: 8,
            n_recalls: 12,
            needle: NeedleDepth::Distant,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.budget > 0.0 && self.budget <= 1.0) {
            return Err(FluxError::contract(format!(
                "task '{}': budget {} outside (0, 1]",
                self.name, self.budget
            )));
        }
        if self.min_len < 8 || self.min_len > self.max_len {
            return Err(FluxError::contract(format!(
                "task '{}': bad length range {}..={}",
                self.name, self.min_len, self.max_len
            )));
        }
        if self.category == TaskCategory::Retrieval && (self.n_pairs == 0 || self.n_pairs > N_KEYS as usize) {
            return Err(FluxError::contract(format!(
                "task '{}': n_pairs must be in 1..={N_KEYS}",
                self.name
            )));
        }
        Ok(())
    }

    /// Draw one example; `sink`/`local` define what "outside the window"
    /// means for distant needles.
    pub fn sample(&self, seed: u64, sink: usize, local: usize) -> Result<Example> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let len = rng.gen_range(self.min_len..=self.max_len);
        match self.category {
            TaskCategory::Holistic => Ok(gen_holistic_example(rng.gen(), len)),
            TaskCategory::Retrieval => {
                let params = RetrievalParams {
                    n_pairs: self.n_pairs,
                    n_recalls: self.n_recalls,
                    needle: self.needle,
                    sink,
                    local,
                };
                gen_retrieval_example(rng.gen(), len, &params)
            }
        }
    }
}

/// One training or probe sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub tokens: Vec<u32>,
    /// `(position, next token)` pairs scored by the language loss.
    pub targets: Vec<(usize, u32)>,
    /// For retrieval: the position predicting the answer, and the answer.
    pub answer: Option<(usize, u32)>,
    /// Every lookup target in the sequence, the answer last.
    pub recalls: Vec<(usize, u32)>,
}

impl Example {
    /// Targets restricted to the answer when there is one.
    pub fn answer_targets(&self) -> Vec<(usize, u32)> {
        match self.answer {
            Some(a) => vec![a],
            None => self.targets.clone(),
        }
    }
}

/// First-order Markov chain over lowercase letters and space; every symbol
/// has three successors.
#[derive(Debug, Clone)]
pub struct BigramChain {
    successors: Vec<[usize; SUCCESSORS]>,
}

impl Default for BigramChain {
    fn default() -> Self {
        Self::new()
    }
}

impl BigramChain {
    pub fn new() -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(CHAIN_SEED);
        let n = ALPHABET.len();
        let successors = (0..n)
            .map(|_| {
                let mut row = [0usize; SUCCESSORS];
                for i in 0..SUCCESSORS {
                    row[i] = loop {
                        let c = rng.gen_range(0..n);
                        if !row[..i].contains(&c) {
                            break c;
                        }
                    };
                }
                row
            })
            .collect();
        Self { successors }
    }

    pub fn n_symbols(&self) -> usize {
        ALPHABET.len()
    }

    pub fn token(&self, symbol: usize) -> u32 {
        ALPHABET[symbol] as u32
    }

    pub fn symbol_of(&self, token: u32) -> Option<usize> {
        ALPHABET.iter().position(|&c| c as u32 == token)
    }

    pub fn next(&self, symbol: usize, rng: &mut impl Rng) -> usize {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        for (i, p) in SUCCESSOR_PROBS.iter().enumerate() {
            acc += p;
            if u < acc {
                return self.successors[symbol][i];
            }
        }
        self.successors[symbol][SUCCESSORS - 1]
    }

    /// `n` symbols starting from a uniform draw.
    pub fn stream(&self, n: usize, rng: &mut impl Rng) -> Vec<u32> {
        let mut out = Vec::with_capacity(n);
        if n == 0 {
            return out;
        }
        let mut s = rng.gen_range(0..self.n_symbols());
        out.push(self.token(s));
        for _ in 1..n {
            s = self.next(s, rng);
            out.push(self.token(s));
        }
        out
    }

    /// Conditional entropy of one transition, in nats (the same for every
    /// symbol).
    pub fn transition_entropy(&self) -> f64 {
        -SUCCESSOR_PROBS.iter().map(|p| p * p.ln()).sum::<f64>()
    }

    /// Perplexity of the exact chain on its own transitions.
    pub fn reference_perplexity(&self) -> f64 {
        self.transition_entropy().exp()
    }
}

fn is_filler(t: u32) -> bool {
    ALPHABET.iter().any(|&c| c as u32 == t)
}

/// Targets for every filler transition.
fn filler_targets(tokens: &[u32]) -> Vec<(usize, u32)> {
    tokens
        .windows(2)
        .enumerate()
        .filter(|(_, w)| is_filler(w[0]) && is_filler(w[1]))
        .map(|(i, w)| (i, w[1]))
        .collect()
}

/// `BOS` followed by `len − 1` chain symbols.
pub fn gen_holistic_example(seed: u64, len: usize) -> Example {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chain = BigramChain::new();
    let mut tokens = vec![BOS];
    tokens.extend(chain.stream(len.saturating_sub(1), &mut rng));
    let targets = filler_targets(&tokens);
    Example {
        tokens,
        targets,
        answer: None,
        recalls: Vec::new(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetrievalParams {
    pub n_pairs: usize,
    pub n_recalls: usize,
    pub needle: NeedleDepth,
    pub sink: usize,
    pub local: usize,
}

/// `BOS haystack… QUERY key value`: the haystack is chain filler with
/// `n_pairs` record tokens binding distinct keys to values, and up to
/// `n_recalls` three-token `QUERY key value` lookups of the distractor
/// records. The final query asks for the needle record, whose key is looked
/// up nowhere else. The answer is the final token.
pub fn gen_retrieval_example(seed: u64, len: usize, params: &RetrievalParams) -> Result<Example> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_pairs = params.n_pairs;
    let n_recalls = if n_pairs > 1 { params.n_recalls } else { 0 };
    // The answer is predicted from position len − 2; SSA sees positions
    // [len − 1 − local, len − 2] of the recent past.
    let window_start = (len - 1).saturating_sub(params.local);
    let (lo, hi) = match params.needle {
        NeedleDepth::Distant => (params.sink.max(1), window_start.saturating_sub(1)),
        NeedleDepth::Local => (window_start.max(1), len.saturating_sub(4)),
    };
    if lo > hi || len < n_pairs + 3 * n_recalls + 8 {
        return Err(FluxError::contract(format!(
            "length {len} leaves no room for the needle (sink {}, local {})",
            params.sink, params.local
        )));
    }
    let body_end = len - 3;
    let needle = rng.gen_range(lo..=hi);

    // Occupied `[start, start + width)` spans.
    let mut spans: Vec<(usize, usize)> = vec![(needle, 1)];
    let free = |spans: &[(usize, usize)], p: usize, w: usize| {
        spans.iter().all(|&(q, qw)| p + w <= q || q + qw <= p)
    };
    let mut attempts = 0;
    while spans.len() < n_pairs {
        attempts += 1;
        if attempts > 10_000 {
            return Err(FluxError::contract(format!("cannot place {n_pairs} records in length {len}")));
        }
        let p = rng.gen_range(1..body_end);
        if free(&spans, p, 1) {
            spans.push((p, 1));
        }
    }
    // Lookups go after their record; records too close to the end get none,
    // so fewer than `n_recalls` may fit.
    let eligible: Vec<usize> = (1..n_pairs).filter(|&j| spans[j].0 + 4 <= body_end).collect();
    let mut lookups: Vec<(usize, usize)> = Vec::with_capacity(n_recalls);
    let mut tries = 0;
    while !eligible.is_empty() && lookups.len() < n_recalls && tries < 1_000 {
        tries += 1;
        let j = eligible[rng.gen_range(0..eligible.len())];
        let p = rng.gen_range(spans[j].0 + 1..=body_end - 3);
        if free(&spans, p, 3) {
            spans.push((p, 3));
            lookups.push((p, j));
        }
    }
    let mut keys: Vec<u32> = Vec::with_capacity(n_pairs);
    while keys.len() < n_pairs {
        let k = rng.gen_range(0..N_KEYS);
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    let values: Vec<u32> = (0..n_pairs).map(|_| rng.gen_range(0..N_VALUES)).collect();

    let chain = BigramChain::new();
    let mut tokens = vec![BOS];
    tokens.extend(chain.stream(body_end - 1, &mut rng));
    for (i, &(p, _)) in spans[..n_pairs].iter().enumerate() {
        tokens[p] = record_token(keys[i], values[i]);
    }
    let mut recalls = Vec::with_capacity(n_recalls + 1);
    for &(p, j) in &lookups {
        tokens[p..p + 3].copy_from_slice(&[QUERY, KEY_BASE + keys[j], VALUE_BASE + values[j]]);
        recalls.push((p + 1, VALUE_BASE + values[j]));
    }
    recalls.sort_unstable();
    tokens.extend_from_slice(&[QUERY, KEY_BASE + keys[0], VALUE_BASE + values[0]]);
    debug_assert_eq!(tokens.len(), len);

    let answer = (len - 2, VALUE_BASE + values[0]);
    recalls.push(answer);
    let mut targets = filler_targets(&tokens);
    targets.extend_from_slice(&recalls);
    targets.sort_unstable();
    Ok(Example {
        tokens,
        targets,
        answer: Some(answer),
        recalls,
    })
}
