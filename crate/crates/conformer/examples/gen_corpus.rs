//! Write a synthetic text8-compatible corpus to stdout.
//!
//! Usage: `cargo run --release -p conformer --example gen_corpus <CHARS> [SEED]`

use std::io::Write;

fn main() {
    let mut args = std::env::args().skip(1);
    let n: usize = args
        .next()
        .and_then(|v| v.parse().ok())
        .expect("usage: gen_corpus <CHARS> [SEED]");
    let seed: u64 = args.next().and_then(|v| v.parse().ok()).unwrap_or(7);
    let corpus = conformer::data::synthetic::synthetic_text8(n, seed);
    std::io::stdout().write_all(&corpus).unwrap();
}
