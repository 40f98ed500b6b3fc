//! Writes a synthetic annotated mask set for `edgeflip adapt`.
//!
//! Usage: gen_fewshot [dir] [count] [seed]

use std::path::PathBuf;

use edgeflip::perception::{synthetic_suite, write_dataset, SuiteConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let dir = args.next().map(PathBuf::from).unwrap_or_else(|| PathBuf::from("fewshot"));
    let count = args.next().map(|s| s.parse()).transpose()?.unwrap_or(60);
    let seed = args.next().map(|s| s.parse()).transpose()?.unwrap_or(7);
    let data = synthetic_suite(count, seed, &SuiteConfig::default())?;
    let ann = write_dataset(&dir, &data)?;
    println!("{}", ann.display());
    Ok(())
}
