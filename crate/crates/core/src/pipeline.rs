//! End-to-end episode: perceive, select a primitive, plan, execute, score.

use nalgebra::{Point2, Vector3};
use thiserror::Error;

use crate::dynamics::{flip_profile, peak_wrist_torque_direct, place_pivot, PivotConfig, RigidObject};
use crate::geometry::{
    centroid, pivot_anchor, stability_anchor, AffordanceClass, AffordanceObservation, GeometryError, PlanarShape,
};
use crate::kinematics::{ArmModel, Pose};
use crate::metrics::{aggregate, evaluate, EpisodeReport, MetricsError, TorqueSummary};
use crate::perception::{render_observation, Camera, PerceptionError};
use crate::primitives::{
    plan_direct_flip, plan_pick_place, plan_pivot_flip, select_primitive, tool_down, PivotPlanParams, PlanError,
    PlannerConfig, PrimitiveId, PrimitivePlan,
};
use crate::runtime::{
    flip_goal, resting_pose, run_episode, EpisodeSetup, EpisodeTrace, EventRecord, Mode, RuntimeConfig, RuntimeError,
};
use crate::scenario::{load_scenario, AnchorStrategy, FlipStrategy, ScenarioConfig, ScenarioError, SuiteEntry};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error("perception: {0}")]
    Perception(#[from] PerceptionError),
    #[error("geometry: {0}")]
    Geometry(#[from] GeometryError),
    #[error("planning: {0}")]
    Plan(#[from] PlanError),
    #[error("runtime: {0}")]
    Runtime(#[from] RuntimeError),
    #[error("metrics: {0}")]
    Metrics(#[from] MetricsError),
}

/// Fixed settings shared by every scenario run.
#[derive(Debug, Clone)]
pub struct RunOptions {
    pub planner: PlannerConfig,
    pub runtime: RuntimeConfig,
    /// Square image side, px.
    pub camera_px: usize,
    pub camera_mm_per_px: f64,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self { planner: PlannerConfig::default(), runtime: RuntimeConfig::default(), camera_px: 256, camera_mm_per_px: 1.0 }
    }
}

/// What the perception stage hands to planning, in world millimetres.
#[derive(Debug, Clone)]
pub struct Perceived {
    pub shape: PlanarShape,
    pub observation: AffordanceObservation,
}

/// Renders the part from above and extracts the anchor from the mask. The
/// face label is taken from the scenario.
pub fn perceive(cfg: &ScenarioConfig, opts: &RunOptions) -> Result<Perceived, PipelineError> {
    let c = centroid(&cfg.shape)?.c_geo;
    let camera = Camera::centered_on(c, opts.camera_px, opts.camera_px, opts.camera_mm_per_px);
    let obs = render_observation(&cfg.shape, &camera, 0.0, cfg.seed)?;
    let shape = PlanarShape::from_grid(obs.mask.to_grid(&camera)?)?;
    let mut observation = match cfg.face {
        AffordanceClass::Back => pivot_anchor(&shape)?,
        AffordanceClass::Front => stability_anchor(&shape)?,
    };
    observation.cls = cfg.face;
    observation.timestamp = 0.0;
    Ok(Perceived { shape, observation })
}

/// Goal implied by the true geometry: the part turned over its own support
/// line for Back, left in place for Front, unless the scenario sets one.
pub fn scenario_goal(cfg: &ScenarioConfig, obj: &RigidObject) -> Result<Pose, PipelineError> {
    if let Some(g) = cfg.explicit_goal() {
        return Ok(g);
    }
    Ok(match cfg.face {
        AffordanceClass::Front => resting_pose(obj, cfg.table_z),
        AffordanceClass::Back => {
            let a = pivot_anchor(&obj.shape)?.anchor;
            let (foot, dir) = place_pivot(&obj.shape, a).map_err(PlanError::Dynamics)?;
            flip_goal(obj, foot, dir, cfg.table_z)
        }
    })
}

#[derive(Debug, Clone)]
pub struct PlannedEpisode {
    pub plan: PrimitivePlan,
    pub torque: Option<TorqueSummary>,
}

fn arm_for(cfg: &ScenarioConfig) -> ArmModel {
    let arm = ArmModel::default_ur5();
    match cfg.thresholds.sigma_min {
        Some(s) => arm.with_sigma_min(s),
        None => arm,
    }
}

fn torque_summary(obj: &RigidObject, anchor: &Vector3<f64>, params: &PivotPlanParams) -> Option<TorqueSummary> {
    let local = obj.shape.frame().inverse_apply(Point2::new(anchor.x, anchor.y));
    let pc = PivotConfig {
        pivot_point: params.pivot_point,
        pivot_dir: params.pivot_dir,
        grasp_point: Vector3::new(local.x, local.y, anchor.z - params.pivot_point.z),
        friction_mu: params.friction_mu,
        theta: 0.0,
        torque_margin: crate::dynamics::DEFAULT_TORQUE_MARGIN,
    };
    let p = flip_profile(obj, &pc, 181).ok()?;
    Some(TorqueSummary { pivot_peak_nm: p.peak_arm_torque, direct_peak_nm: peak_wrist_torque_direct(obj, &pc) })
}

/// Chooses and plans the primitive for the perceived part.
pub fn plan_for(
    cfg: &ScenarioConfig,
    obj: &RigidObject,
    seen: &Perceived,
    goal: &Pose,
    planner: &PlannerConfig,
) -> Result<PlannedEpisode, PipelineError> {
    let z = cfg.table_z;
    let top = z + cfg.thickness_mm;
    let a = seen.observation.anchor;
    match select_primitive(&seen.observation) {
        PrimitiveId::StablePickPlace => {
            let grip = match cfg.anchor_strategy {
                AnchorStrategy::Implicit => a,
                AnchorStrategy::GlobalCentroid => centroid(&seen.shape)?.c_geo,
            };
            let anchor = Vector3::new(grip.x, grip.y, top);
            let start = resting_pose(obj, z);
            let rel = start.inverse().compose(&Pose::new(tool_down(), anchor));
            let plan = plan_pick_place(&anchor, &goal.compose(&rel), planner)?;
            Ok(PlannedEpisode { plan, torque: None })
        }
        _ => {
            // perceived geometry with the scenario's mass properties
            let seen_obj = RigidObject::uniform(seen.shape.clone(), obj.mass, obj.thickness).map_err(PlanError::Dynamics)?;
            let params = PivotPlanParams::from_object(&seen_obj, a, z, planner)?;
            let implicit = Vector3::new(a.x, a.y, z);
            let torque = torque_summary(obj, &implicit, &params);
            let plan = match (cfg.flip_strategy, cfg.anchor_strategy) {
                (FlipStrategy::Direct, _) => {
                    // where the gripped point ends up once the part is over
                    let local = obj.shape.frame().inverse_apply(a);
                    let target = goal.transform_point(&Vector3::new(local.x, local.y, 0.0));
                    plan_direct_flip(&Vector3::new(a.x, a.y, top), &target, planner)?
                }
                (FlipStrategy::Pivot, AnchorStrategy::Implicit) => plan_pivot_flip(&implicit, &params, obj, planner)?,
                (FlipStrategy::Pivot, AnchorStrategy::GlobalCentroid) => {
                    let c = centroid(&seen.shape)?.c_geo;
                    plan_pivot_flip(&Vector3::new(c.x, c.y, top), &params, obj, planner)?
                }
            };
            Ok(PlannedEpisode { plan, torque })
        }
    }
}

/// Result of one scenario run.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub trace: EpisodeTrace,
    pub report: EpisodeReport,
    pub primitive: PrimitiveId,
}

/// Runs the full pipeline for one scenario.
pub fn run_scenario(cfg: &ScenarioConfig, opts: &RunOptions) -> Result<RunOutcome, PipelineError> {
    let obj = cfg.object()?;
    let arm = arm_for(cfg);
    let planner = PlannerConfig { arm: arm.clone(), table_z: cfg.table_z, ..opts.planner.clone() };
    let seen = perceive(cfg, opts)?;
    let goal = scenario_goal(cfg, &obj)?;
    let planned = plan_for(cfg, &obj, &seen, &goal, &planner)?;
    let primitive = planned.plan.id;
    let setup = EpisodeSetup::new(arm, planned.plan, &planner.home_q, obj, cfg.table_z, goal, cfg.face)?;
    let mut trace = run_episode(&setup, cfg.mode, &cfg.latency, cfg.seed, &opts.runtime)?;
    let mut extra = vec![
        EventRecord::new(0, "thresholds", &[cfg.thresholds.tol_rot_deg, cfg.thresholds.tol_pos_mm]),
        EventRecord::with_words(0, "primitive", &[primitive.as_str()]),
    ];
    if let Some(t) = planned.torque {
        extra.push(EventRecord::new(0, "torque", &[t.pivot_peak_nm, t.direct_peak_nm]));
    }
    trace.events.splice(0..0, extra);
    let report = evaluate(&trace)?;
    Ok(RunOutcome { trace, report, primitive })
}

/// Table rows of the component ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ablation {
    Full,
    Sync,
    GlobalCentroid,
    Direct,
}

impl Ablation {
    pub const ROWS: [Ablation; 4] = [Ablation::Sync, Ablation::GlobalCentroid, Ablation::Direct, Ablation::Full];

    pub fn as_str(self) -> &'static str {
        match self {
            Ablation::Full => "Full",
            Ablation::Sync => "Sync",
            Ablation::GlobalCentroid => "GlobalCentroid",
            Ablation::Direct => "Direct",
        }
    }

    /// The scenario with this row's component swapped out.
    pub fn apply(self, cfg: &ScenarioConfig) -> ScenarioConfig {
        let mut c = cfg.clone();
        c.mode = Mode::Async;
        c.anchor_strategy = AnchorStrategy::Implicit;
        c.flip_strategy = FlipStrategy::Pivot;
        match self {
            Ablation::Full => {}
            Ablation::Sync => c.mode = Mode::Sync,
            Ablation::GlobalCentroid => c.anchor_strategy = AnchorStrategy::GlobalCentroid,
            Ablation::Direct => c.flip_strategy = FlipStrategy::Direct,
        }
        c
    }
}

/// One cell of the ablation grid; `Err` holds the failure message.
#[derive(Debug, Clone)]
pub struct AblationCell {
    pub scenario: String,
    pub seed: u64,
    pub result: Result<EpisodeReport, String>,
}

#[derive(Debug, Clone)]
pub struct AblationRow {
    pub ablation: Ablation,
    pub cells: Vec<AblationCell>,
}

impl AblationRow {
    /// Success rate over all cells, failed runs counting as failures, %.
    pub fn success_rate(&self) -> f64 {
        let ok = self.cells.iter().filter(|c| matches!(&c.result, Ok(r) if r.success)).count();
        if self.cells.is_empty() {
            0.0
        } else {
            100.0 * ok as f64 / self.cells.len() as f64
        }
    }

    pub fn reports(&self) -> Vec<EpisodeReport> {
        self.cells.iter().filter_map(|c| c.result.as_ref().ok().cloned()).collect()
    }

    pub fn errors(&self) -> usize {
        self.cells.iter().filter(|c| c.result.is_err()).count()
    }
}

/// Runs every ablation row over every suite entry and seed. Rows run on
/// separate threads; results are ordered as the suite lists them.
pub fn run_ablation(suite: &[SuiteEntry], opts: &RunOptions) -> Result<Vec<AblationRow>, PipelineError> {
    if suite.is_empty() {
        return Err(ScenarioError::Invalid { file: "suite".into(), msg: "suite lists no scenarios".into() }.into());
    }
    let mut jobs: Vec<(ScenarioConfig, u64)> = Vec::new();
    for e in suite {
        let base = load_scenario(&e.scenario)?;
        let seeds = if e.seeds.is_empty() { vec![base.seed] } else { e.seeds.clone() };
        jobs.extend(seeds.into_iter().map(|s| (base.clone(), s)));
    }
    let rows = std::thread::scope(|scope| {
        let handles: Vec<_> = Ablation::ROWS
            .iter()
            .map(|&ab| {
                let jobs = &jobs;
                scope.spawn(move || {
                    let cells = jobs
                        .iter()
                        .map(|(base, seed)| {
                            let mut cfg = ab.apply(base);
                            cfg.seed = *seed;
                            AblationCell {
                                scenario: cfg.name.clone(),
                                seed: *seed,
                                result: run_scenario(&cfg, opts).map(|o| o.report).map_err(|e| e.to_string()),
                            }
                        })
                        .collect();
                    AblationRow { ablation: ab, cells }
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("ablation worker panicked")).collect()
    });
    Ok(rows)
}

pub const ABLATION_CSV_HEADER: &str =
    "row,episodes,success_rate_pct,tcp_jitter_mean_mm,tcp_jitter_sd_mm,peak_jerk_mean_m_s3,singularity_rate_mean_pct,collision_rate_pct,failed_runs";

/// The ablation table, one row per grid row.
pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = format!("{ABLATION_CSV_HEADER}\n");
    for r in rows {
        let a = aggregate(&r.reports());
        out.push_str(&format!(
            "{},{},{:.1},{:.6},{:.6},{:.6},{:.6},{:.1},{}\n",
            r.ablation.as_str(),
            r.cells.len(),
            r.success_rate(),
            a.jitter.0,
            a.jitter.1,
            a.jerk.0,
            a.singularity_rate.0,
            a.collision_rate,
            r.errors()
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::runtime::{parse_trace, write_trace};
    use crate::scenario::{Archetype, GoalSpec};

    fn run(cfg: &ScenarioConfig) -> RunOutcome {
        run_scenario(cfg, &RunOptions::default()).unwrap()
    }

    #[test]
    fn battery_pivot_flip_succeeds_with_torque_saving() {
        let o = run(&Archetype::Battery.config());
        assert_eq!(o.primitive, PrimitiveId::PivotFlip);
        let r = &o.report;
        assert!(r.success, "{r:?}");
        assert_eq!(r.singularity_rate, 0.0);
        assert!(r.collisions.is_empty(), "{:?}", r.collisions);
        assert!(r.abort.is_none() && r.slips == 0);
        assert!(r.torque.unwrap().reduction() >= 0.6);
        assert_eq!(o.trace.events_of("attach").count(), 1);
        assert_eq!(o.trace.events_of("release").count(), 1);
    }

    #[test]
    fn report_is_recomputed_from_the_trace_file() {
        let o = run(&Archetype::Phone.config());
        let back = parse_trace(&write_trace(&o.trace)).unwrap();
        assert_eq!(evaluate(&back).unwrap(), o.report);
    }

    #[test]
    fn ablations_fail_for_their_own_reasons() {
        let base = Archetype::Battery.config();
        let direct = run(&Ablation::Direct.apply(&base));
        assert_eq!(direct.primitive, PrimitiveId::DirectFlip);
        assert!(!direct.report.success);
        assert!(direct.report.singularity_rate > 0.0);
        assert!(direct.report.abort.as_deref().unwrap().starts_with("singularity"));

        let sync = run(&Ablation::Sync.apply(&base));
        assert!(!sync.report.success);
        assert!(sync.report.slips > 0);

        let centroid = run(&Ablation::GlobalCentroid.apply(&base));
        assert!(!centroid.report.success);
        assert!(centroid.report.abort.as_deref().unwrap().starts_with("penetration"));

        let light = Ablation::GlobalCentroid.apply(&Archetype::Phone.config());
        assert!(matches!(run_scenario(&light, &RunOptions::default()), Err(PipelineError::Plan(_))));
    }

    #[test]
    fn ablation_rows_override_one_component() {
        let mut base = Archetype::Pcb.config();
        base.mode = Mode::Sync;
        base.flip_strategy = FlipStrategy::Direct;
        let full = Ablation::Full.apply(&base);
        assert_eq!((full.mode, full.anchor_strategy, full.flip_strategy), (Mode::Async, AnchorStrategy::Implicit, FlipStrategy::Pivot));
        assert_eq!(Ablation::Sync.apply(&base).mode, Mode::Sync);
        assert_eq!(Ablation::GlobalCentroid.apply(&base).anchor_strategy, AnchorStrategy::GlobalCentroid);
        assert_eq!(Ablation::Direct.apply(&base).flip_strategy, FlipStrategy::Direct);
    }

    #[test]
    fn front_face_is_picked_and_placed() {
        let mut cfg = Archetype::Calculator.config();
        cfg.face = AffordanceClass::Front;
        let f = cfg.shape.frame();
        cfg.goal = Some(GoalSpec { x_mm: f.x, y_mm: f.y + 40.0, yaw_deg: f.theta.to_degrees(), face: AffordanceClass::Front });
        let o = run(&cfg);
        assert_eq!(o.primitive, PrimitiveId::StablePickPlace);
        assert!(o.report.success, "{:?}", o.report);
        assert!(o.report.torque.is_none());
    }

    #[test]
    fn perception_recovers_the_anchor_within_a_few_cells() {
        for a in Archetype::ALL {
            let cfg = a.config();
            let seen = perceive(&cfg, &RunOptions::default()).unwrap();
            let truth = pivot_anchor(&cfg.shape).unwrap().anchor;
            assert!((seen.observation.anchor - truth).norm() < 3.0, "{}", a.name());
            assert_eq!(seen.observation.cls, AffordanceClass::Back);
        }
    }

    #[test]
    fn ablation_grid_rejects_an_empty_suite() {
        assert!(run_ablation(&[], &RunOptions::default()).is_err());
    }
}
