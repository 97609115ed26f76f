//! Regenerates the offline fixture bundle.
//!
//! ```sh
//! cargo run --example gen_fixtures -- crates/core/fixtures
//! ```

use std::path::PathBuf;

use mia_audit::synth::{fixture_bundle, write_fixture_bundle};

fn main() -> mia_audit::Result<()> {
    let dir: PathBuf = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures"));
    std::fs::create_dir_all(&dir).expect("create fixture dir");
    let paths = write_fixture_bundle(&dir, &fixture_bundle(0))?;
    println!("wrote {}", paths.config.display());
    Ok(())
}
