//! Writes the synthetic inspection and digit corpora used by the experiments.
//!
//! cargo run --release --example synth_corpus -- /tmp/s2c-data

use s2c::synth::{generate_corpus, CorpusSpec};
use std::path::PathBuf;
use std::time::Instant;

fn main() -> s2c::Result<()> {
    let root = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "/tmp/s2c-data".into()));
    for (name, spec) in [("inspection", CorpusSpec::inspection(7)), ("digits", CorpusSpec::digits(1..=60, 7))] {
        let t = Instant::now();
        let n = generate_corpus(&root.join(name), &spec)?;
        println!("{name}: wrote {n} clips in {:.1}s", t.elapsed().as_secs_f64());
    }
    Ok(())
}
