//! Drive the configuration runner from code: validate a TOML experiment,
//! run it, and read back the summary and table paths.
//!
//!     cargo run --release --example run_config -- configs/gene_verify_a.toml

use coupling_clt::runner::{execute, parse_spec, validate_text, Overrides};
use std::path::PathBuf;

fn main() -> coupling_clt::Result<()> {
    let path = std::env::args().nth(1).unwrap_or_else(|| {
        concat!(env!("CARGO_MANIFEST_DIR"), "/configs/gene_verify_a.toml").into()
    });
    let text = std::fs::read_to_string(&path)?;
    let overrides = Overrides::default();
    print!("{}", validate_text(&text, &overrides)?.render());

    let spec = parse_spec(&text, &overrides)?;
    let out = std::env::temp_dir().join("coupling-clt-example");
    let outcome = execute(&spec, &out)?;
    println!("{}", outcome.results.summary());
    for f in &outcome.files {
        println!("wrote {}", PathBuf::from(f).display());
    }
    Ok(())
}
