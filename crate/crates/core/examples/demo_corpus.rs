//! Writes a generated two-day corpus (registry, sources, identities,
//! fixtures and `regal.toml`) into a directory.
//!
//! ```text
//! cargo run -p regal-core --example demo_corpus -- demo 5000
//! ```

use std::path::PathBuf;

use regal_core::fixtures::{write_corpus, CorpusSpec};

fn main() {
    let mut args = std::env::args().skip(1);
    let dir = PathBuf::from(args.next().unwrap_or_else(|| "demo".into()));
    let events = args.next().map_or(5_000, |n| n.parse().expect("event count"));
    let corpus = write_corpus(&dir, &CorpusSpec::new(1, events)).expect("corpus written");
    println!("config:  {}", corpus.config.display());
    println!("window:  {} .. {}", corpus.start, corpus.end);
}
