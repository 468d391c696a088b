//! Synthetic classification benchmark with many-shot and few-shot slices.
//!
//! Each class owns a Zipf-weighted vocabulary of pseudo-words; utterances
//! mix a few class words with words from a shared vocabulary and, now and
//! then, a word borrowed from a neighbouring class. Few-shot classes keep a
//! hidden pool of extra examples that an oracle backend can draw from.

use std::collections::{BTreeMap, BTreeSet};

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Example, Partition};
use crate::seed::rng_for;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchmarkConfig {
    pub many_shot_slices: usize,
    pub many_shot_train: usize,
    pub few_shot_slices: usize,
    pub few_shot_train: usize,
    pub hidden_pool: usize,
    pub dev_per_slice: usize,
    pub test_per_slice: usize,
    pub class_vocab: usize,
    pub shared_vocab: usize,
    /// Inclusive range of class words per utterance.
    pub class_tokens: (usize, usize),
    /// Inclusive range of shared words per utterance.
    pub shared_tokens: (usize, usize),
    /// Chance that an utterance borrows one word from the next class.
    pub borrow_probability: f64,
    pub seed: u64,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        BenchmarkConfig {
            many_shot_slices: 12,
            many_shot_train: 100,
            few_shot_slices: 3,
            few_shot_train: 5,
            hidden_pool: 200,
            dev_per_slice: 10,
            test_per_slice: 40,
            class_vocab: 25,
            shared_vocab: 60,
            class_tokens: (2, 4),
            shared_tokens: (3, 6),
            borrow_probability: 0.2,
            seed: 0,
        }
    }
}

impl BenchmarkConfig {
    /// A few dozen examples, enough to exercise every pipeline stage.
    pub fn toy() -> Self {
        BenchmarkConfig {
            many_shot_slices: 4,
            many_shot_train: 12,
            few_shot_slices: 2,
            few_shot_train: 3,
            hidden_pool: 20,
            dev_per_slice: 2,
            test_per_slice: 4,
            class_vocab: 12,
            shared_vocab: 20,
            ..Self::default()
        }
    }
}

pub struct Benchmark {
    pub dataset: Dataset,
    pub partition: BTreeMap<String, Partition>,
    pub few_shot: BTreeSet<String>,
    /// Extra examples per few-shot slice, never part of `dataset`.
    pub hidden_pools: BTreeMap<String, Vec<Example>>,
}

const ONSETS: [&str; 12] = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t"];
const VOWELS: [&str; 5] = ["a", "e", "i", "o", "u"];

/// A pronounceable pseudo-word, distinct for every `n`.
pub fn pseudo_word(mut n: usize) -> String {
    let base = ONSETS.len() * VOWELS.len();
    let mut word = String::new();
    loop {
        let syl = n % base;
        word.push_str(ONSETS[syl / VOWELS.len()]);
        word.push_str(VOWELS[syl % VOWELS.len()]);
        n /= base;
        if n == 0 {
            break;
        }
        n -= 1;
    }
    word
}

pub fn slice_name(i: usize) -> String {
    format!("topic_{i:02}")
}

struct Vocab {
    class_words: Vec<Vec<String>>,
    shared: Vec<String>,
    zipf: WeightedIndex<f64>,
}

impl Vocab {
    fn new(classes: usize, cfg: &BenchmarkConfig) -> Self {
        let shared: Vec<String> = (0..cfg.shared_vocab).map(pseudo_word).collect();
        let class_words = (0..classes)
            .map(|c| {
                (0..cfg.class_vocab)
                    .map(|j| pseudo_word(cfg.shared_vocab + c * cfg.class_vocab + j))
                    .collect()
            })
            .collect();
        let zipf = WeightedIndex::new((1..=cfg.class_vocab).map(|r| 1.0 / r as f64)).expect("non-empty vocabulary");
        Vocab {
            class_words,
            shared,
            zipf,
        }
    }

    fn utterance(&self, class: usize, cfg: &BenchmarkConfig, rng: &mut impl Rng) -> String {
        let n_class = rng.gen_range(cfg.class_tokens.0..=cfg.class_tokens.1);
        let n_shared = rng.gen_range(cfg.shared_tokens.0..=cfg.shared_tokens.1);
        let mut words: Vec<&str> = Vec::new();
        for _ in 0..n_class {
            words.push(&self.class_words[class][self.zipf.sample(rng)]);
        }
        for _ in 0..n_shared {
            words.push(&self.shared[rng.gen_range(0..self.shared.len())]);
        }
        if rng.gen_bool(cfg.borrow_probability) {
            let neighbour = (class + 1) % self.class_words.len();
            words.push(&self.class_words[neighbour][self.zipf.sample(rng)]);
        }
        // order is irrelevant to the class; shuffle so texts look varied
        rand::seq::SliceRandom::shuffle(words.as_mut_slice(), rng);
        words.join(" ")
    }
}

/// Generate the benchmark. Texts are unique within each slice (train, dev,
/// test and hidden pool together), so a hidden-pool draw is never an exact
/// copy of a train example.
pub fn generate_benchmark(cfg: &BenchmarkConfig) -> Benchmark {
    let classes = cfg.many_shot_slices + cfg.few_shot_slices;
    let vocab = Vocab::new(classes, cfg);
    let mut examples = Vec::new();
    let mut partition = BTreeMap::new();
    let mut few_shot = BTreeSet::new();
    let mut hidden_pools = BTreeMap::new();

    for class in 0..classes {
        let name = slice_name(class);
        let is_few = class >= cfg.many_shot_slices;
        let train = if is_few { cfg.few_shot_train } else { cfg.many_shot_train };
        let pool = if is_few { cfg.hidden_pool } else { 0 };
        let mut rng = rng_for(cfg.seed, &["benchmark", &name]);
        let mut seen = BTreeSet::new();
        let mut draw = |rng: &mut crate::seed::SeededRng| {
            // bounded retries; the space of utterances is vast
            for _ in 0..1000 {
                let text = vocab.utterance(class, cfg, rng);
                if seen.insert(text.clone()) {
                    return text;
                }
            }
            panic!("benchmark vocabulary too small for slice {name}");
        };
        for (part, count) in [
            (Partition::Train, train),
            (Partition::Dev, cfg.dev_per_slice),
            (Partition::Test, cfg.test_per_slice),
        ] {
            for n in 0..count {
                let id = format!("{name}-{}-{n:03}", part.file_name().trim_end_matches(".jsonl"));
                partition.insert(id.clone(), part);
                examples.push(Example::new(id, draw(&mut rng)).with_label("intent", name.clone()));
            }
        }
        if is_few {
            few_shot.insert(name.clone());
            let hidden = (0..pool)
                .map(|n| Example::new(format!("{name}-pool-{n:03}"), draw(&mut rng)).with_label("intent", name.clone()))
                .collect();
            hidden_pools.insert(name.clone(), hidden);
        }
    }

    Benchmark {
        dataset: Dataset::from_examples(examples).expect("benchmark ids are unique"),
        partition,
        few_shot,
        hidden_pools,
    }
}
