//! Regenerates the shipped object suite under `scenarios/`.

use std::path::PathBuf;

use edgeflip::scenario::{archetype_suite_file, Archetype};

fn main() -> std::io::Result<()> {
    let dir = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("scenarios"));
    std::fs::create_dir_all(&dir)?;
    for a in Archetype::ALL {
        std::fs::write(dir.join(format!("{}.shape", a.name())), a.shape_file())?;
        std::fs::write(dir.join(format!("{}.scn", a.name())), a.scenario_file())?;
    }
    std::fs::write(dir.join("suite.txt"), archetype_suite_file())?;
    Ok(())
}
