//! Run every pipeline stage over the bundled fixture, then run again to
//! show that cached stages are skipped.

use mia_audit::pipeline::{Overrides, Pipeline, PipelineConfig};
use mia_audit::synth::{fixture_bundle, write_fixture_bundle};

fn main() -> mia_audit::Result<()> {
    let dir = std::env::temp_dir().join(format!("mia-audit-example-{}", std::process::id()));
    std::fs::create_dir_all(&dir).expect("create temp dir");
    let paths = write_fixture_bundle(&dir, &fixture_bundle(0))?;

    let mut cfg = PipelineConfig::load(&paths.config)?;
    cfg.apply(&Overrides {
        parallelism: Some(2),
        ..Overrides::default()
    });
    let pipeline = Pipeline::new(cfg)?;
    let stages = pipeline.all_stages();

    let first = pipeline.run(&stages)?;
    for s in &first.stages {
        println!("{:<7} provider calls {}", s.stage.name(), s.provider_calls);
    }
    let second = pipeline.run(&stages)?;
    println!(
        "second run: {} of {} stages skipped, {} provider calls",
        second.stages.iter().filter(|s| s.skipped).count(),
        second.stages.len(),
        second.provider_calls
    );
    println!("\n{}", std::fs::read_to_string(pipeline.out("report.md")).expect("report written"));
    std::fs::remove_dir_all(&dir).ok();
    Ok(())
}
