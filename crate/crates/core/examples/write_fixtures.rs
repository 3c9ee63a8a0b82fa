//! Writes the synthetic golden and two-object bundles.
//!
//! Usage: cargo run -p spectrafuse --example write_fixtures -- OUT_DIR

use std::path::PathBuf;

use spectrafuse::synthetic::{golden_bundle, two_object_bundle, GOLDEN_SEED, TWO_OBJECT_SEED};
use spectrafuse::write_bundle;

fn main() -> spectrafuse::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "fixtures".into()));
    write_bundle(&golden_bundle(GOLDEN_SEED), out.join("golden_bundle"))?;
    write_bundle(
        &two_object_bundle(TWO_OBJECT_SEED).bundle,
        out.join("two_object_bundle"),
    )?;
    println!("wrote bundles under {}", out.display());
    Ok(())
}
