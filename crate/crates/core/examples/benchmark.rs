//! Runs the synthetic semi-supervised benchmark for a few teacher sets.
//!
//! `cargo run --release -p concord-core --example benchmark -- [seeds] [config.json]`

use std::time::Instant;

use concord_core::experiment::{self, BenchmarkConfig, TeacherSet};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().collect();
    let seeds: u64 = args.get(1).map(|s| s.parse()).transpose()?.unwrap_or(1);
    let cfg: BenchmarkConfig = match args.get(2) {
        Some(path) => serde_json::from_str(&std::fs::read_to_string(path)?)?,
        None => BenchmarkConfig::default(),
    };
    let sets = [
        TeacherSet::Supervised,
        TeacherSet::single(2),
        TeacherSet::Concordance { ranges: vec![1, 2, 3] },
        TeacherSet::Ensemble { range: 2, count: 3 },
    ];
    for seed in 0..seeds {
        let t = Instant::now();
        let split = experiment::prepare(&cfg, seed)?;
        let pts: usize = split.labeled.iter().chain(&split.unlabeled).map(|p| p.truth.len()).sum();
        println!("seed {seed}: prepared {pts} training points in {:.1}s", t.elapsed().as_secs_f64());
        for set in &sets {
            let t = Instant::now();
            let r = experiment::run_with_split(&cfg, &split, set, seed)?;
            let per: Vec<String> = r.per_class.iter().map(|v| format!("{:.3}", v.unwrap_or(f64::NAN))).collect();
            println!(
                "  {:<24} miou {:.4} [{}] cov {:.3} prec {:.3} n {} ({:.1}s)",
                r.teachers,
                r.miou,
                per.join(" "),
                r.pseudo_coverage,
                r.pseudo_precision,
                r.training_points,
                t.elapsed().as_secs_f64()
            );
        }
    }
    Ok(())
}
