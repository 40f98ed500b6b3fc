//! Writes seed inputs for the parsers under `fuzz/corpus/<target>/`.
//!
//! Usage: fuzz_seeds [fuzz/corpus]

use std::path::{Path, PathBuf};

use edgeflip::geometry::AffordanceClass;
use edgeflip::kinematics::DEFAULT_ARM_CONFIG;
use edgeflip::perception::{
    fit_anchor_head, synthetic_suite, write_annotations, write_regressor, Annotation, SuiteConfig, DEFAULT_LAMBDA,
};
use edgeflip::pipeline::{run_scenario, RunOptions};
use edgeflip::primitives::write_plan;
use edgeflip::runtime::write_trace;
use edgeflip::scenario::{archetype_suite_file, Archetype};
use nalgebra::Point2;

fn put(root: &Path, target: &str, name: &str, text: &str) -> std::io::Result<()> {
    let dir = root.join(target);
    std::fs::create_dir_all(&dir)?;
    std::fs::write(dir.join(name), text)
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let root = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("fuzz/corpus"));
    let opts = RunOptions::default();

    for a in [Archetype::Battery, Archetype::Pcb] {
        let out = run_scenario(&a.config(), &opts)?;
        // keep seeds small: a handful of records of each kind
        let mut tr = out.trace;
        tr.control.truncate(8);
        tr.vision.truncate(3);
        tr.events.truncate(6);
        put(&root, "parse_trace", &format!("{}.trace", a.name()), &write_trace(&tr))?;
    }

    let mut front = Archetype::Phone.config();
    front.face = AffordanceClass::Front;
    for (name, cfg) in [("pivot", Archetype::Calculator.config()), ("pick_place", front)] {
        let plan = edgeflip_plan(&cfg, &opts)?;
        put(&root, "parse_plan", &format!("{name}.plan"), &plan)?;
    }
    let mut direct = Archetype::Pcb.config();
    direct.flip_strategy = edgeflip::scenario::FlipStrategy::Direct;
    put(&root, "parse_plan", "direct.plan", &edgeflip_plan(&direct, &opts)?)?;

    for a in Archetype::ALL {
        put(&root, "parse_shape_file", &format!("{}.shape", a.name()), &a.shape_file())?;
        put(&root, "parse_scenario", &format!("{}.scn", a.name()), &a.scenario_file())?;
    }
    put(&root, "parse_suite", "suite.txt", &archetype_suite_file())?;
    put(&root, "parse_arm_model", "default.arm", DEFAULT_ARM_CONFIG)?;

    let cfg = SuiteConfig { camera: edgeflip::perception::Camera { width: 32, height: 32, mm_per_px: 6.0, ..Default::default() }, ..Default::default() };
    let data = synthetic_suite(6, 3, &cfg)?;
    put(&root, "parse_pbm", "small.pbm", &data[0].obs.mask.to_pbm())?;
    let head = fit_anchor_head(&data, DEFAULT_LAMBDA)?;
    put(&root, "parse_regressor", "head.txt", &write_regressor(&head))?;
    let rows: Vec<Annotation> = data
        .iter()
        .enumerate()
        .map(|(i, s)| Annotation { mask_path: format!("masks/{i:03}.pbm").into(), target: Point2::new(s.target.x, s.target.y), cls: s.cls })
        .collect();
    put(&root, "parse_annotations", "annotations.txt", &write_annotations(&rows))?;
    Ok(())
}

fn edgeflip_plan(cfg: &edgeflip::scenario::ScenarioConfig, opts: &RunOptions) -> Result<String, Box<dyn std::error::Error>> {
    let obj = cfg.object()?;
    let seen = edgeflip::pipeline::perceive(cfg, opts)?;
    let goal = edgeflip::pipeline::scenario_goal(cfg, &obj)?;
    let planned = edgeflip::pipeline::plan_for(cfg, &obj, &seen, &goal, &opts.planner)?;
    let mut plan = planned.plan;
    plan.waypoints.truncate(12);
    Ok(write_plan(&plan))
}
