//! Deterministic text8-compatible corpus generator.
//!
//! Emits only `a`..`z` and space, so the output loads through the text8
//! path unchanged. The generator layers three scales of structure:
//!
//! - syllable morphology inside words (short-range character regularity),
//! - a Zipf-weighted word vocabulary (mid-range lexical regularity),
//! - slowly switching topics that bias word choice (long-range context),
//!
//! which gives desk-scale models the same kind of local-plus-global
//! signal real character corpora have.

use tensorcore::StreamRng;

const ONSETS: &[&str] = &[
    "b", "c", "d", "f", "g", "h", "j", "k", "l", "m", "n", "p", "r", "s", "t", "v", "w", "z",
    "br", "ch", "cl", "dr", "fl", "gr", "pl", "pr", "sh", "sl", "sp", "st", "th", "tr",
];
const NUCLEI: &[&str] = &["a", "e", "i", "o", "u", "ai", "ea", "ee", "io", "ou"];
const CODAS: &[&str] = &["", "", "n", "r", "s", "t", "l", "m", "d", "nd", "nt", "st", "ng"];

const VOCAB_WORDS: usize = 800;
const TOPICS: usize = 8;
const TOPIC_BOOST: f64 = 6.0;
const TOPIC_SWITCH_PROB: f64 = 0.005;

fn pick<'a>(rng: &mut StreamRng, items: &[&'a str]) -> &'a str {
    items[rng.below(items.len())]
}

fn make_word(rng: &mut StreamRng) -> String {
    let syllables = 1 + rng.below(3);
    let mut w = String::new();
    for s in 0..syllables {
        w.push_str(pick(rng, ONSETS));
        w.push_str(pick(rng, NUCLEI));
        if s + 1 == syllables {
            w.push_str(pick(rng, CODAS));
        }
    }
    w
}

/// Cumulative distribution for O(log n) sampling.
struct Cdf(Vec<f64>);

impl Cdf {
    fn new(weights: &[f64]) -> Cdf {
        let mut acc = 0.0;
        Cdf(weights
            .iter()
            .map(|w| {
                acc += w;
                acc
            })
            .collect())
    }

    fn sample(&self, rng: &mut StreamRng) -> usize {
        let total = *self.0.last().unwrap();
        let u = rng.uniform_f64() * total;
        self.0.partition_point(|&c| c <= u).min(self.0.len() - 1)
    }
}

/// Generate exactly `n_chars` bytes of space-separated synthetic words,
/// reproducible from `seed`.
pub fn synthetic_text8(n_chars: usize, seed: u64) -> Vec<u8> {
    let mut vocab_rng = StreamRng::derived(seed, 0x1);
    let mut vocab: Vec<String> = Vec::with_capacity(VOCAB_WORDS);
    while vocab.len() < VOCAB_WORDS {
        let w = make_word(&mut vocab_rng);
        if !vocab.contains(&w) {
            vocab.push(w);
        }
    }

    // Zipf base weights, then a per-topic boost of every TOPICS-th word.
    let zipf: Vec<f64> = (0..VOCAB_WORDS).map(|r| 1.0 / (r as f64 + 2.0)).collect();
    let topic_cdfs: Vec<Cdf> = (0..TOPICS)
        .map(|k| {
            let weights: Vec<f64> = zipf
                .iter()
                .enumerate()
                .map(|(r, &w)| if r % TOPICS == k { w * TOPIC_BOOST } else { w })
                .collect();
            Cdf::new(&weights)
        })
        .collect();

    let mut rng = StreamRng::derived(seed, 0x2);
    let mut out = Vec::with_capacity(n_chars + 16);
    let mut topic = 0usize;
    while out.len() < n_chars {
        if rng.uniform_f64() < TOPIC_SWITCH_PROB {
            topic = rng.below(TOPICS);
        }
        let word = &vocab[topic_cdfs[topic].sample(&mut rng)];
        out.extend_from_slice(word.as_bytes());
        out.push(b' ');
    }
    out.truncate(n_chars);
    out
}
