use std::path::{Path, PathBuf};

use edgeflip::pipeline::{run_scenario, RunOptions};
use edgeflip::scenario::{archetype_suite_file, load_scenario, load_suite, Archetype};

fn dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios")
}

fn read(name: &str) -> String {
    std::fs::read_to_string(dir().join(name)).unwrap_or_else(|e| panic!("{name}: {e}"))
}

#[test]
fn shipped_files_match_generator() {
    for a in Archetype::ALL {
        assert_eq!(read(&format!("{}.shape", a.name())), a.shape_file(), "{} shape is stale", a.name());
        assert_eq!(read(&format!("{}.scn", a.name())), a.scenario_file(), "{} scenario is stale", a.name());
    }
    assert_eq!(read("suite.txt"), archetype_suite_file());
}

#[test]
fn loaded_files_equal_in_memory_configs() {
    for a in Archetype::ALL {
        let from_file = load_scenario(&dir().join(format!("{}.scn", a.name()))).unwrap();
        let mem = a.config();
        assert_eq!(from_file.name, mem.name);
        assert_eq!(from_file.face, mem.face);
        assert_eq!(from_file.latency, mem.latency);
        assert_eq!(from_file.shape.grid(), mem.shape.grid());
        assert!((from_file.shape.frame().theta - mem.shape.frame().theta).abs() < 1e-9);
        let a = run_scenario(&from_file, &RunOptions::default()).unwrap();
        let b = run_scenario(&mem, &RunOptions::default()).unwrap();
        assert_eq!(a.report.success, b.report.success);
    }
}

#[test]
fn suite_lists_every_part_with_five_seeds() {
    let suite = load_suite(&dir().join("suite.txt")).unwrap();
    assert_eq!(suite.len(), Archetype::ALL.len());
    assert!(suite.iter().all(|e| e.seeds == vec![1, 2, 3, 4, 5]));
}
