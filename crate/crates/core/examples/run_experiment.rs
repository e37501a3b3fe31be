//! Runs one of the nine experiments on synthetic corpora and writes its report.
//!
//! cargo run --release --example run_experiment -- 4 runs/exp4
//! Env: S2C_DATA (corpus root, default /tmp/s2c-data), S2C_REPEATS (default 3).

use s2c::evalkit::{emit_report, ExperimentConfig, Profile, Runner};
use s2c::synth::{generate_corpus, CorpusSpec};
use std::path::PathBuf;

fn main() -> s2c::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let mut args = std::env::args().skip(1);
    let id: u8 = args.next().and_then(|v| v.parse().ok()).unwrap_or(4);
    let out = PathBuf::from(args.next().unwrap_or_else(|| format!("runs/exp{id}")));
    let data = PathBuf::from(std::env::var("S2C_DATA").unwrap_or_else(|_| "/tmp/s2c-data".into()));
    generate_corpus(&data.join("inspection"), &CorpusSpec::inspection(7))?;
    generate_corpus(&data.join("digits"), &CorpusSpec::digits(1..=60, 7))?;

    let mut cfg = ExperimentConfig::new(Profile::desk());
    cfg.inspection = Some(data.join("inspection"));
    cfg.digits = Some(data.join("digits"));
    cfg.cache_dir = Some(data.join(".features"));
    cfg.repeats = std::env::var("S2C_REPEATS").ok().and_then(|v| v.parse().ok()).unwrap_or(3);
    let t = std::time::Instant::now();
    let bundle = Runner::new(cfg).run(id)?;
    emit_report(&bundle, &out)?;
    for table in &bundle.tables {
        println!("== {}\n{}", table.name, table.to_tsv());
    }
    for (k, v) in &bundle.metrics {
        println!("{k}\t{v:.4}");
    }
    println!("experiment {id} finished in {:.0}s, report in {}", t.elapsed().as_secs_f64(), out.display());
    Ok(())
}
