//! End-to-end toy run with the desk configuration.
//!
//! `cargo run --release -p idgen-core --example toy_run -- [config.ini] [report-dir]`

use std::path::PathBuf;

use idgen_core::config::RunConfig;
use idgen_core::pipeline::run_toy;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let cfg = match args.first() {
        Some(p) => RunConfig::apply(RunConfig::desk(), &std::fs::read_to_string(p)?)?,
        None => RunConfig::desk(),
    };
    let synthetic = cfg.data.toy_per_class;
    let run = run_toy(&cfg, synthetic, |m| eprintln!("{m}"))?;
    for (stage, secs) in &run.timings {
        eprintln!("{stage}: {secs:.1}s");
    }
    print!("{}", run.report.summary_text());
    if let Some(dir) = args.get(1) {
        run.report.write_bundle(&PathBuf::from(dir))?;
    }
    Ok(())
}
