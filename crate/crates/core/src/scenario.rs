//! Scenario and suite files.
//!
//! A scenario is flat `key = value` text grouped under `[section]` headers:
//!
//! ```text
//! [object]
//! shape_file = battery.shape
//! mass_kg = 1.2
//! com_mm = 35 25 15
//! thickness_mm = 30
//! [initial]
//! face = Back
//! x_mm = -300
//! y_mm = -60
//! yaw_deg = 13
//! [run]
//! mode = Async
//! seed = 1
//! ```
//!
//! Sections `[goal]`, `[latency]`, `[thresholds]` and `[world]` are optional,
//! as are most keys. Paths are relative to the scenario file.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt::Write;
use std::path::{Path, PathBuf};

use nalgebra::{Point2, Rotation3, Vector3};
use thiserror::Error;

use crate::dynamics::RigidObject;
use crate::geometry::{
    centroid, parse_shape_file, pivot_anchor, rect_polygon, write_shape_file, AffordanceClass, PlanarShape, Pose2,
};
use crate::kinematics::Pose;
use crate::runtime::{LatencyConfig, Mode};
use crate::textio::content_lines;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("{file}:{line}: {msg}")]
    At { file: String, line: usize, msg: String },
    #[error("{file}: {msg}")]
    Invalid { file: String, msg: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnchorStrategy {
    /// Grasp at the shape-derived affordance anchor.
    Implicit,
    /// Grasp at the silhouette centroid.
    GlobalCentroid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlipStrategy {
    Pivot,
    /// Lift the part and turn it in the air with the wrist.
    Direct,
}

macro_rules! word_enum {
    ($t:ty { $($v:ident => $s:literal),* }) => {
        impl $t {
            pub fn as_str(self) -> &'static str {
                match self { $(Self::$v => $s),* }
            }
            pub fn parse(s: &str) -> Option<Self> {
                match s { $($s => Some(Self::$v),)* _ => None }
            }
        }
    };
}

word_enum!(AnchorStrategy { Implicit => "Implicit", GlobalCentroid => "GlobalCentroid" });
word_enum!(FlipStrategy { Pivot => "Pivot", Direct => "Direct" });

/// Requested final planar pose.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GoalSpec {
    pub x_mm: f64,
    pub y_mm: f64,
    pub yaw_deg: f64,
    pub face: AffordanceClass,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Thresholds {
    pub tol_rot_deg: f64,
    pub tol_pos_mm: f64,
    /// Overrides the arm's σ_min protective-stop threshold.
    pub sigma_min: Option<f64>,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self { tol_rot_deg: 5.0, tol_pos_mm: 10.0, sigma_min: None }
    }
}

#[derive(Debug, Clone)]
pub struct ScenarioConfig {
    pub name: String,
    pub shape_path: PathBuf,
    /// Silhouette in its file frame, placed at the initial pose.
    pub shape: PlanarShape,
    pub mass_kg: f64,
    /// Centre of mass in the shape frame; `None` means uniform density.
    pub com_mm: Option<Vector3<f64>>,
    pub thickness_mm: f64,
    /// Face currently up.
    pub face: AffordanceClass,
    pub goal: Option<GoalSpec>,
    pub table_z: f64,
    pub latency: LatencyConfig,
    pub mode: Mode,
    pub anchor_strategy: AnchorStrategy,
    pub flip_strategy: FlipStrategy,
    pub seed: u64,
    pub thresholds: Thresholds,
}

impl ScenarioConfig {
    pub fn object(&self) -> Result<RigidObject, ScenarioError> {
        let obj = match self.com_mm {
            Some(c) => RigidObject::new(self.shape.clone(), self.mass_kg, c, self.thickness_mm),
            None => RigidObject::uniform(self.shape.clone(), self.mass_kg, self.thickness_mm),
        };
        obj.map_err(|e| ScenarioError::Invalid { file: self.name.clone(), msg: e.to_string() })
    }

    /// Goal pose from an explicit `[goal]` section: same face keeps the
    /// part upright, the other face turns it over about its x axis.
    pub fn explicit_goal(&self) -> Option<Pose> {
        self.goal.map(|g| {
            let yaw = Rotation3::from_axis_angle(&Vector3::z_axis(), g.yaw_deg.to_radians());
            if g.face == self.face {
                Pose::new(*yaw.matrix(), Vector3::new(g.x_mm, g.y_mm, self.table_z))
            } else {
                let over = Rotation3::from_axis_angle(&Vector3::x_axis(), PI);
                Pose::new(
                    *(yaw * over).matrix(),
                    Vector3::new(g.x_mm, g.y_mm, self.table_z + self.thickness_mm),
                )
            }
        })
    }
}

struct Entry {
    line: usize,
    value: String,
    used: bool,
}

struct Sections {
    file: String,
    map: BTreeMap<(String, String), Entry>,
    seen: Vec<String>,
}

const SECTIONS: [&str; 7] = ["object", "initial", "goal", "latency", "run", "thresholds", "world"];

impl Sections {
    fn parse(text: &str, file: &str) -> Result<Self, ScenarioError> {
        let at = |line, msg: String| ScenarioError::At { file: file.to_string(), line, msg };
        let mut map = BTreeMap::new();
        let mut seen: Vec<String> = Vec::new();
        let mut current: Option<String> = None;
        for (ln, raw) in content_lines(text) {
            if let Some(name) = raw.strip_prefix('[') {
                let name = name
                    .strip_suffix(']')
                    .ok_or_else(|| at(ln, "unterminated section header".into()))?
                    .trim();
                if !SECTIONS.contains(&name) {
                    return Err(at(ln, format!("unknown section [{name}]")));
                }
                if seen.iter().any(|s| s == name) {
                    return Err(at(ln, format!("section [{name}] repeated")));
                }
                seen.push(name.to_string());
                current = Some(name.to_string());
                continue;
            }
            let (k, v) = raw.split_once('=').ok_or_else(|| at(ln, "expected key = value".into()))?;
            let sec = current.clone().ok_or_else(|| at(ln, "key outside any section".into()))?;
            let key = (sec, k.trim().to_string());
            if key.1.is_empty() {
                return Err(at(ln, "empty key".into()));
            }
            if map.contains_key(&key) {
                return Err(at(ln, format!("duplicate key {}", key.1)));
            }
            map.insert(key, Entry { line: ln, value: v.trim().to_string(), used: false });
        }
        Ok(Self { file: file.to_string(), map, seen })
    }

    fn err(&self, line: usize, msg: impl Into<String>) -> ScenarioError {
        ScenarioError::At { file: self.file.clone(), line, msg: msg.into() }
    }

    fn raw(&mut self, sec: &str, key: &str) -> Option<(usize, String)> {
        self.map.get_mut(&(sec.to_string(), key.to_string())).map(|e| {
            e.used = true;
            (e.line, e.value.clone())
        })
    }

    fn get<T>(&mut self, sec: &str, key: &str, conv: impl Fn(&str) -> Option<T>) -> Result<Option<T>, ScenarioError> {
        match self.raw(sec, key) {
            None => Ok(None),
            Some((ln, v)) => conv(&v).map(Some).ok_or_else(|| self.err(ln, format!("invalid value for {key}: {v}"))),
        }
    }

    fn require<T>(&mut self, sec: &str, key: &str, conv: impl Fn(&str) -> Option<T>) -> Result<T, ScenarioError> {
        self.get(sec, key, conv)?.ok_or_else(|| ScenarioError::Invalid {
            file: self.file.clone(),
            msg: format!("missing [{sec}] {key}"),
        })
    }

    fn has(&self, sec: &str) -> bool {
        self.seen.iter().any(|s| s == sec)
    }

    fn line_of(&self, sec: &str, key: &str) -> usize {
        self.map.get(&(sec.to_string(), key.to_string())).map_or(0, |e| e.line)
    }

    fn finish(&self) -> Result<(), ScenarioError> {
        match self.map.iter().find(|(_, e)| !e.used) {
            Some(((s, k), e)) => Err(self.err(e.line, format!("unknown key [{s}] {k}"))),
            None => Ok(()),
        }
    }
}

fn finite(s: &str) -> Option<f64> {
    s.parse::<f64>().ok().filter(|v| v.is_finite())
}

fn vec3(s: &str) -> Option<Vector3<f64>> {
    let v: Vec<f64> = s.split_whitespace().map(finite).collect::<Option<_>>()?;
    (v.len() == 3).then(|| Vector3::new(v[0], v[1], v[2]))
}

/// Parses scenario text. `file` names the source in errors and `base`
/// resolves the shape path.
pub fn parse_scenario(text: &str, file: &str, base: &Path) -> Result<ScenarioConfig, ScenarioError> {
    parse_with(text, file, base, |p| std::fs::read_to_string(p))
}

fn parse_with(
    text: &str,
    file: &str,
    base: &Path,
    read: impl Fn(&Path) -> std::io::Result<String>,
) -> Result<ScenarioConfig, ScenarioError> {
    let mut s = Sections::parse(text, file)?;
    let shape_rel = s.require("object", "shape_file", |v| (!v.is_empty()).then(|| v.to_string()))?;
    let shape_line = s.line_of("object", "shape_file");
    let mass_kg = s.require("object", "mass_kg", |v| finite(v).filter(|m| *m >= 0.0))?;
    let com_mm = s.get("object", "com_mm", vec3)?;
    let thickness_mm = s.require("object", "thickness_mm", |v| finite(v).filter(|t| *t > 0.0))?;

    let face = s.require("initial", "face", AffordanceClass::parse)?;
    let x = s.get("initial", "x_mm", finite)?.unwrap_or(0.0);
    let y = s.get("initial", "y_mm", finite)?.unwrap_or(0.0);
    let yaw = s.get("initial", "yaw_deg", finite)?.unwrap_or(0.0);

    let goal = if s.has("goal") {
        Some(GoalSpec {
            x_mm: s.require("goal", "x_mm", finite)?,
            y_mm: s.require("goal", "y_mm", finite)?,
            yaw_deg: s.get("goal", "yaw_deg", finite)?.unwrap_or(0.0),
            face: s.require("goal", "face", AffordanceClass::parse)?,
        })
    } else {
        None
    };

    let d = LatencyConfig::default();
    let t_inf_ms = s.get("latency", "t_inf_ms", finite)?.unwrap_or(d.t_inf_us as f64 * 1e-3);
    let perception_hz = s.get("latency", "perception_hz", finite)?.unwrap_or(1e6 / d.perception_period_us as f64);
    let control_hz = s.get("latency", "control_hz", finite)?.unwrap_or(1e6 / d.control_period_us as f64);
    let eps_ms = s.get("latency", "eps_sync_ms", finite)?.unwrap_or(d.eps_sync_us as f64 * 1e-3);
    let skew_ms = s.get("latency", "clock_skew_ms", finite)?.unwrap_or(d.clock_skew_us as f64 * 1e-3);
    let latency = LatencyConfig::from_file_units(t_inf_ms, perception_hz, control_hz, eps_ms, skew_ms)
        .map_err(|e| ScenarioError::Invalid { file: file.to_string(), msg: e.to_string() })?;

    let mode = s.get("run", "mode", Mode::parse)?.unwrap_or(Mode::Async);
    let anchor_strategy = s.get("run", "anchor_strategy", AnchorStrategy::parse)?.unwrap_or(AnchorStrategy::Implicit);
    let flip_strategy = s.get("run", "flip_strategy", FlipStrategy::parse)?.unwrap_or(FlipStrategy::Pivot);
    let seed = s.get("run", "seed", |v| v.parse::<u64>().ok())?.unwrap_or(0);
    let name = s.get("run", "name", |v| (!v.is_empty()).then(|| v.to_string()))?.unwrap_or_else(|| {
        Path::new(file).file_stem().map_or_else(|| file.to_string(), |x| x.to_string_lossy().into_owned())
    });

    let dt = Thresholds::default();
    let thresholds = Thresholds {
        tol_rot_deg: s.get("thresholds", "tol_rot_deg", |v| finite(v).filter(|t| *t > 0.0))?.unwrap_or(dt.tol_rot_deg),
        tol_pos_mm: s.get("thresholds", "tol_pos_mm", |v| finite(v).filter(|t| *t > 0.0))?.unwrap_or(dt.tol_pos_mm),
        sigma_min: s.get("thresholds", "sigma_min", |v| finite(v).filter(|t| *t >= 0.0))?,
    };
    let table_z = s.get("world", "table_z_mm", finite)?.unwrap_or(0.0);
    s.finish()?;

    let shape_path = base.join(&shape_rel);
    let shape_text = read(&shape_path)
        .map_err(|e| s.err(shape_line, format!("cannot read {}: {e}", shape_path.display())))?;
    let grid = parse_shape_file(&shape_text)
        .map_err(|e| ScenarioError::Invalid { file: shape_path.display().to_string(), msg: e.to_string() })?;
    let shape = PlanarShape::from_grid(grid)
        .map_err(|e| ScenarioError::Invalid { file: shape_path.display().to_string(), msg: e.to_string() })?
        .with_frame(Pose2::new(x, y, yaw.to_radians()));

    Ok(ScenarioConfig {
        name,
        shape_path,
        shape,
        mass_kg,
        com_mm,
        thickness_mm,
        face,
        goal,
        table_z,
        latency,
        mode,
        anchor_strategy,
        flip_strategy,
        seed,
        thresholds,
    })
}

pub fn load_scenario(path: &Path) -> Result<ScenarioConfig, ScenarioError> {
    let text = std::fs::read_to_string(path)
        .map_err(|source| ScenarioError::Io { path: path.display().to_string(), source })?;
    let base = path.parent().unwrap_or(Path::new("."));
    parse_scenario(&text, &path.display().to_string(), base)
}

/// One suite line: a scenario and the seeds to run it with. No seeds means
/// the scenario's own seed.
#[derive(Debug, Clone, PartialEq)]
pub struct SuiteEntry {
    pub scenario: PathBuf,
    pub seeds: Vec<u64>,
}

/// Parses a suite listing, one `path [seed ...]` per line.
pub fn parse_suite(text: &str, file: &str, base: &Path) -> Result<Vec<SuiteEntry>, ScenarioError> {
    let mut out = Vec::new();
    for (ln, line) in content_lines(text) {
        let mut toks = line.split_whitespace();
        let path = toks.next().unwrap_or_default();
        let seeds = toks
            .map(|t| {
                t.parse::<u64>().map_err(|_| ScenarioError::At {
                    file: file.to_string(),
                    line: ln,
                    msg: format!("invalid seed {t}"),
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        out.push(SuiteEntry { scenario: base.join(path), seeds });
    }
    if out.is_empty() {
        return Err(ScenarioError::Invalid { file: file.to_string(), msg: "suite lists no scenarios".into() });
    }
    Ok(out)
}

pub fn load_suite(path: &Path) -> Result<Vec<SuiteEntry>, ScenarioError> {
    let text = std::fs::read_to_string(path)
        .map_err(|source| ScenarioError::Io { path: path.display().to_string(), source })?;
    parse_suite(&text, &path.display().to_string(), path.parent().unwrap_or(Path::new(".")))
}

/// The in-repo object suite. Dimensions and masses are invented stand-ins
/// for a battery pack, a calculator, a phone and a populated board.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Archetype {
    Battery,
    Calculator,
    Phone,
    Pcb,
}

/// Direction from the arm base towards the object placements.
pub const PLACEMENT_DIR_DEG: f64 = -167.0;
/// Distance from the arm base to each part's flip anchor.
pub const ANCHOR_RADIUS_MM: f64 = 360.0;

fn arc(c: Point2<f64>, r: f64, a0_deg: f64, a1_deg: f64, segs: usize) -> impl Iterator<Item = Point2<f64>> {
    (0..=segs).map(move |i| {
        let a = (a0_deg + (a1_deg - a0_deg) * i as f64 / segs as f64).to_radians();
        Point2::new(c.x + r * a.cos(), c.y + r * a.sin())
    })
}

impl Archetype {
    pub const ALL: [Archetype; 4] = [Archetype::Battery, Archetype::Calculator, Archetype::Phone, Archetype::Pcb];

    pub fn name(self) -> &'static str {
        match self {
            Archetype::Battery => "battery",
            Archetype::Calculator => "calculator",
            Archetype::Phone => "phone",
            Archetype::Pcb => "pcb",
        }
    }

    /// Counter-clockwise outline, mm. Each has a single, sharp farthest point
    /// from its centroid so the flip anchor is stable under rasterization.
    pub fn outline(self) -> Vec<Point2<f64>> {
        match self {
            // terminal post with a chamfered tip
            Archetype::Battery => vec![
                Point2::new(0.0, 0.0),
                Point2::new(140.0, 0.0),
                Point2::new(140.0, 15.0),
                Point2::new(148.0, 15.0),
                Point2::new(156.0, 25.0),
                Point2::new(148.0, 35.0),
                Point2::new(140.0, 35.0),
                Point2::new(140.0, 50.0),
                Point2::new(0.0, 50.0),
            ],
            Archetype::Calculator => vec![
                Point2::new(0.0, 0.0),
                Point2::new(140.0, 0.0),
                Point2::new(170.0, 35.0),
                Point2::new(140.0, 70.0),
                Point2::new(0.0, 70.0),
            ],
            Archetype::Phone => {
                let (w, h, r) = (150.0, 72.0, 12.0);
                let mut p: Vec<_> = arc(Point2::new(w - r, r), r, -90.0, 0.0, 6).collect();
                // pointed lanyard tab
                p.extend([
                    Point2::new(w, h / 2.0 - 6.0),
                    Point2::new(w + 8.0, h / 2.0 - 6.0),
                    Point2::new(w + 14.0, h / 2.0),
                    Point2::new(w + 8.0, h / 2.0 + 6.0),
                    Point2::new(w, h / 2.0 + 6.0),
                ]);
                p.extend(arc(Point2::new(w - r, h - r), r, 0.0, 90.0, 6));
                p.extend(arc(Point2::new(r, h - r), r, 90.0, 180.0, 6));
                p.extend(arc(Point2::new(r, r), r, 180.0, 270.0, 6));
                p
            }
            // board with a corner cut-out and a pointed edge connector
            Archetype::Pcb => vec![
                Point2::new(0.0, 0.0),
                Point2::new(100.0, 0.0),
                Point2::new(100.0, 10.0),
                Point2::new(120.0, 10.0),
                Point2::new(132.0, 20.0),
                Point2::new(120.0, 30.0),
                Point2::new(100.0, 30.0),
                Point2::new(100.0, 40.0),
                Point2::new(20.0, 40.0),
                Point2::new(20.0, 25.0),
                Point2::new(0.0, 25.0),
            ],
        }
    }

    pub fn mass_kg(self) -> f64 {
        match self {
            Archetype::Battery => 1.2,
            Archetype::Calculator => 0.15,
            Archetype::Phone => 0.2,
            Archetype::Pcb => 0.08,
        }
    }

    pub fn thickness_mm(self) -> f64 {
        match self {
            Archetype::Battery => 30.0,
            Archetype::Calculator => 15.0,
            Archetype::Phone => 8.0,
            Archetype::Pcb => 10.0,
        }
    }

    /// Centre of mass in outline coordinates; `None` for uniform density.
    pub fn com_mm(self) -> Option<Vector3<f64>> {
        match self {
            // cells packed towards the flat end
            Archetype::Battery => Some(Vector3::new(30.0, 25.0, 15.0)),
            _ => None,
        }
    }

    /// The default scenario for this part, built without touching disk.
    pub fn config(self) -> ScenarioConfig {
        let shape = self.shape_file();
        parse_with(&self.scenario_file(), self.name(), Path::new(""), |_| Ok(shape.clone()))
            .expect("generated scenario parses")
    }

    /// Rasterized silhouette at 1 mm cells.
    pub fn shape(self) -> PlanarShape {
        PlanarShape::from_polygon(self.outline(), vec![], 1.0).expect("archetype outlines are valid")
    }

    /// Shape file contents.
    pub fn shape_file(self) -> String {
        write_shape_file(self.shape().grid())
    }

    /// Scenario file contents for the part lying Back-up with its flip
    /// anchor [`ANCHOR_RADIUS_MM`] from the base, pointing at the base.
    pub fn scenario_file(self) -> String {
        self.scenario_file_at(ANCHOR_RADIUS_MM)
    }

    /// Like [`Archetype::scenario_file`] with the anchor `radius_mm` out.
    pub fn scenario_file_at(self, radius_mm: f64) -> String {
        // work in the frame a shape file loads into: grid lower-left at 0
        let grid = parse_shape_file(&self.shape_file()).expect("round trip");
        let shape = PlanarShape::from_grid(grid).expect("non-empty");
        let tip = pivot_anchor(&shape).expect("anchor").anchor;
        let c = centroid(&shape).expect("centroid").c_geo;
        let d = tip - c;
        let dir = PLACEMENT_DIR_DEG.to_radians();
        let yaw = (dir + PI) - d.y.atan2(d.x);
        let target = Point2::new(radius_mm * dir.cos(), radius_mm * dir.sin());
        let rotated = Pose2::new(0.0, 0.0, yaw).apply(tip);
        let (x, y) = (target.x - rotated.x, target.y - rotated.y);
        let origin = self.shape().grid().origin();

        let mut s = String::new();
        let _ = writeln!(s, "# {} lying back-up, anchor towards the arm", self.name());
        let _ = writeln!(s, "[object]");
        let _ = writeln!(s, "shape_file = {}.shape", self.name());
        let _ = writeln!(s, "mass_kg = {}", self.mass_kg());
        if let Some(com) = self.com_mm() {
            let _ = writeln!(s, "com_mm = {} {} {}", com.x - origin.x, com.y - origin.y, com.z);
        }
        let _ = writeln!(s, "thickness_mm = {}", self.thickness_mm());
        let _ = writeln!(s, "\n[initial]\nface = Back");
        let _ = writeln!(s, "x_mm = {x:.3}\ny_mm = {y:.3}\nyaw_deg = {:.3}", yaw.to_degrees());
        let _ = writeln!(s, "\n[latency]\nt_inf_ms = 92\nperception_hz = 10\ncontrol_hz = 50\neps_sync_ms = 10\nclock_skew_ms = 0");
        let _ = writeln!(s, "\n[run]\nmode = Async\nanchor_strategy = Implicit\nflip_strategy = Pivot\nseed = 1");
        let _ = writeln!(s, "\n[thresholds]\ntol_rot_deg = 5\ntol_pos_mm = 10");
        s
    }
}

/// Suite file listing every archetype with seeds 1 to 5.
pub fn archetype_suite_file() -> String {
    let mut s = String::from("# scenario seeds...\n");
    for a in Archetype::ALL {
        let _ = writeln!(s, "{}.scn 1 2 3 4 5", a.name());
    }
    s
}

/// Small rectangular scenario used in tests and examples.
pub fn demo_rect_shape() -> PlanarShape {
    PlanarShape::from_polygon(rect_polygon(0.0, 0.0, 120.0, 40.0), vec![], 1.0).expect("valid rect")
}
