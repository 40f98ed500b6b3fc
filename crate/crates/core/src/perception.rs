//! Synthetic vision stream and few-shot anchor regression.
//!
//! Observations are binary top-view masks rendered orthographically from the
//! part's silhouette. A fixed geometric feature map feeds closed-form ridge
//! heads for the anchor pixel and a linear Front/Back classifier.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::{DMatrix, DVector, Point2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::geometry::{
    pivot_anchor, AffordanceClass, AffordanceObservation, AnchorUnit, GeometryError, OccupancyGrid, PlanarShape, Pose2,
};
use crate::textio::{content_lines, parse_f64, parse_num, LineError};

#[derive(Debug, thiserror::Error)]
pub enum PerceptionError {
    #[error("object extends outside the camera frame")]
    ObjectOutOfFrame,
    #[error("mask has no foreground pixels")]
    EmptyMask,
    #[error("features are rank deficient; use a positive ridge penalty")]
    DegenerateFeatures,
    #[error("need {needed} samples, only {available} available")]
    TooFewSamples { needed: usize, available: usize },
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error(transparent)]
    Parse(#[from] LineError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

/// Orthographic top-view camera. Pixel `(c, r)` covers `[c, c+1) × [r, r+1)`
/// in pixel coordinates; rows grow with world `y`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Camera {
    pub width: usize,
    pub height: usize,
    pub mm_per_px: f64,
    /// World position of pixel coordinate `(0, 0)`.
    pub origin: Point2<f64>,
}

impl Default for Camera {
    fn default() -> Self {
        Self { width: 224, height: 224, mm_per_px: 1.0, origin: Point2::origin() }
    }
}

impl Camera {
    /// Camera of the given size and scale whose image centre sees `center`.
    pub fn centered_on(center: Point2<f64>, width: usize, height: usize, mm_per_px: f64) -> Self {
        let half = nalgebra::Vector2::new(width as f64, height as f64) * (mm_per_px / 2.0);
        Self { width, height, mm_per_px, origin: center - half }
    }

    pub fn to_px(&self, p: Point2<f64>) -> Point2<f64> {
        Point2::from((p - self.origin) / self.mm_per_px)
    }

    pub fn to_mm(&self, px: Point2<f64>) -> Point2<f64> {
        self.origin + px.coords * self.mm_per_px
    }
}

/// Row-major binary image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    width: usize,
    height: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(width: usize, height: usize, data: Vec<bool>) -> Result<Self, PerceptionError> {
        if width == 0 || height == 0 || width.checked_mul(height) != Some(data.len()) {
            return Err(PerceptionError::InvalidModel("mask dimensions do not match data".into()));
        }
        Ok(Self { width, height, data })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn get(&self, c: usize, r: usize) -> bool {
        self.data[r * self.width + c]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    /// Foreground pixels with a background 4-neighbour (or on the image edge).
    pub fn boundary_pixels(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for r in 0..self.height {
            for c in 0..self.width {
                if self.get(c, r) && self.neighbours(c, r).iter().any(|n| n.is_none_or(|(x, y)| !self.get(x, y))) {
                    out.push((c, r));
                }
            }
        }
        out
    }

    fn neighbours(&self, c: usize, r: usize) -> [Option<(usize, usize)>; 4] {
        [
            c.checked_sub(1).map(|x| (x, r)),
            (c + 1 < self.width).then_some((c + 1, r)),
            r.checked_sub(1).map(|y| (c, y)),
            (r + 1 < self.height).then_some((c, r + 1)),
        ]
    }

    /// The mask as an occupancy grid in world millimetres.
    pub fn to_grid(&self, camera: &Camera) -> Result<OccupancyGrid, GeometryError> {
        OccupancyGrid::new(self.width, self.height, camera.mm_per_px, camera.origin, self.data.clone())
    }

    /// Plain PBM (`P1`) text.
    pub fn to_pbm(&self) -> String {
        let mut out = format!("P1\n{} {}\n", self.width, self.height);
        for r in 0..self.height {
            let row: Vec<&str> = (0..self.width).map(|c| if self.get(c, r) { "1" } else { "0" }).collect();
            out.push_str(&row.join(" "));
            out.push('\n');
        }
        out
    }

    /// Parses plain PBM (`P1`); `#` comments are allowed between tokens.
    pub fn parse_pbm(text: &str) -> Result<Self, PerceptionError> {
        let mut toks = text.lines().enumerate().flat_map(|(i, l)| {
            let l = l.split('#').next().unwrap_or("");
            l.split_whitespace().map(move |t| (i + 1, t))
        });
        let (ln, magic) = toks.next().ok_or_else(|| LineError::new(1, "empty image"))?;
        if magic != "P1" {
            return Err(LineError::new(ln, "expected plain PBM magic P1").into());
        }
        let mut dim = |what: &str| -> Result<usize, PerceptionError> {
            let (ln, t) = toks.next().ok_or_else(|| LineError::new(ln, format!("missing {what}")))?;
            Ok(parse_num(t, ln, what)?)
        };
        let (w, h) = (dim("width")?, dim("height")?);
        if w == 0 || h == 0 || w.checked_mul(h).is_none_or(|n| n > 1 << 24) {
            return Err(LineError::new(ln, "image dimensions out of range").into());
        }
        let mut data = Vec::with_capacity(w * h);
        let mut last = ln;
        for (ln, t) in toks {
            last = ln;
            for ch in t.chars() {
                match ch {
                    '0' => data.push(false),
                    '1' => data.push(true),
                    _ => return Err(LineError::new(ln, format!("invalid pixel {ch:?}")).into()),
                }
            }
        }
        if data.len() != w * h {
            return Err(LineError::new(last, format!("expected {} pixels, found {}", w * h, data.len())).into());
        }
        Self::new(w, h, data)
    }
}

/// A rendered frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub mask: Mask,
    pub frame_id: u64,
    pub capture_ts: f64,
    pub camera: Camera,
}

/// Renders the part's silhouette (in its current frame) as seen by `camera`.
/// With `flip_prob > 0`, each boundary pixel and each background pixel
/// touching the part is flipped with that probability.
pub fn render_observation(
    shape: &PlanarShape,
    camera: &Camera,
    flip_prob: f64,
    noise_seed: u64,
) -> Result<Observation, PerceptionError> {
    let f = shape.frame();
    let inside_frame = |p: Point2<f64>| {
        let px = camera.to_px(f.apply(p));
        px.x >= 0.0 && px.y >= 0.0 && px.x <= camera.width as f64 && px.y <= camera.height as f64
    };
    if !shape.outer().iter().all(|&p| inside_frame(p)) {
        return Err(PerceptionError::ObjectOutOfFrame);
    }
    let (w, h) = (camera.width, camera.height);
    let mut data = vec![false; w * h];
    for r in 0..h {
        for c in 0..w {
            let p = camera.to_mm(Point2::new(c as f64 + 0.5, r as f64 + 0.5));
            data[r * w + c] = shape.contains(p);
        }
    }
    let mut mask = Mask::new(w, h, data)?;
    if flip_prob > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
        let mut edge = Vec::new();
        for r in 0..h {
            for c in 0..w {
                let v = mask.get(c, r);
                if mask.neighbours(c, r).iter().flatten().any(|&(x, y)| mask.get(x, y) != v) {
                    edge.push(r * w + c);
                }
            }
        }
        for i in edge {
            if rng.random_bool(flip_prob.min(1.0)) {
                mask.data[i] = !mask.data[i];
            }
        }
    }
    if mask.count() == 0 {
        return Err(PerceptionError::EmptyMask);
    }
    Ok(Observation { mask, frame_id: 0, capture_ts: 0.0, camera: *camera })
}

/// Centroid, normalized central moments, invariants, boundary histogram and area.
pub const FEATURE_DIM: usize = 9 + 7 + HIST_BINS + 1;
const HIST_BINS: usize = 16;
/// First feature of the rotation- and translation-invariant block.
const INVARIANT_START: usize = 9;

/// Default ridge penalty on the scaled features.
pub const DEFAULT_LAMBDA: f64 = 1e-3;

/// Layout and reference scales of the feature vector. Features are divided by
/// these fixed scales (after centring) before fitting, so the penalty has the
/// same meaning for every dataset size, including a single sample.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSpec {
    pub scales: Vec<f64>,
}

impl Default for FeatureSpec {
    fn default() -> Self {
        let mut scales = vec![0.02, 0.02, 0.1, 0.01, 0.1, 0.01, 0.01, 0.01, 0.01];
        scales.extend([0.2, 0.02, 1e-3, 1e-4, 1e-7, 1e-4, 1e-8]);
        scales.extend([0.1; HIST_BINS]);
        scales.push(0.01);
        Self { scales }
    }
}

impl FeatureSpec {
    pub fn dim(&self) -> usize {
        self.scales.len()
    }

    pub fn names() -> Vec<String> {
        let mut n: Vec<String> = ["cx", "cy", "eta20", "eta11", "eta02", "eta30", "eta21", "eta12", "eta03"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        n.extend((1..=7).map(|i| format!("hu{i}")));
        n.extend((0..HIST_BINS).map(|i| format!("hist{i}")));
        n.push("area".into());
        n
    }
}

/// Fixed feature vector of a mask (see [`FeatureSpec::names`]).
pub fn extract_features(obs: &Observation) -> Result<DVector<f64>, PerceptionError> {
    let m = &obs.mask;
    let (w, h) = (m.width() as f64, m.height() as f64);
    let pts: Vec<(f64, f64)> = (0..m.height())
        .flat_map(|r| (0..m.width()).map(move |c| (c, r)))
        .filter(|&(c, r)| m.get(c, r))
        .map(|(c, r)| (c as f64 + 0.5, r as f64 + 0.5))
        .collect();
    if pts.is_empty() {
        return Err(PerceptionError::EmptyMask);
    }
    let n = pts.len() as f64;
    let cx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let cy = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let mu = |p: i32, q: i32| pts.iter().map(|&(x, y)| (x - cx).powi(p) * (y - cy).powi(q)).sum::<f64>();
    let eta = |p: i32, q: i32| mu(p, q) / n.powf(1.0 + (p + q) as f64 / 2.0);
    let mut f = Vec::with_capacity(FEATURE_DIM);
    f.extend([cx / w, cy / h]);
    for (p, q) in [(2, 0), (1, 1), (0, 2), (3, 0), (2, 1), (1, 2), (0, 3)] {
        f.push(eta(p, q));
    }
    let (n20, n02, n11) = (eta(2, 0), eta(0, 2), eta(1, 1));
    let (n30, n03, n21, n12) = (eta(3, 0), eta(0, 3), eta(2, 1), eta(1, 2));
    let (a, b) = (n30 + n12, n21 + n03);
    f.extend([
        n20 + n02,
        (n20 - n02).powi(2) + 4.0 * n11 * n11,
        (n30 - 3.0 * n12).powi(2) + (3.0 * n21 - n03).powi(2),
        a * a + b * b,
        (n30 - 3.0 * n12) * a * (a * a - 3.0 * b * b) + (3.0 * n21 - n03) * b * (3.0 * a * a - b * b),
        (n20 - n02) * (a * a - b * b) + 4.0 * n11 * a * b,
        (3.0 * n21 - n03) * a * (a * a - 3.0 * b * b) - (n30 - 3.0 * n12) * b * (3.0 * a * a - b * b),
    ]);

    let dist: Vec<f64> = m
        .boundary_pixels()
        .iter()
        .map(|&(c, r)| (c as f64 + 0.5 - cx).hypot(r as f64 + 0.5 - cy))
        .collect();
    let dmax = dist.iter().copied().fold(0.0, f64::max);
    let mut hist = [0.0; HIST_BINS];
    for d in &dist {
        let b = if dmax > 0.0 { ((d / dmax) * HIST_BINS as f64) as usize } else { 0 };
        hist[b.min(HIST_BINS - 1)] += 1.0 / dist.len() as f64;
    }
    f.extend(hist);
    f.push(n / (w * h));
    Ok(DVector::from_vec(f))
}

/// A labelled few-shot sample: the mask, the anchor pixel and the face class.
#[derive(Debug, Clone, PartialEq)]
pub struct FewShotSample {
    pub obs: Observation,
    pub target: Point2<f64>,
    pub cls: AffordanceClass,
}

pub type FewShotDataset = Vec<FewShotSample>;

/// Linear anchor regressor and face classifier over the fixed features.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorRegressor {
    pub spec: FeatureSpec,
    pub lambda: f64,
    /// Feature centre subtracted before scaling.
    pub center: DVector<f64>,
    pub wx: DVector<f64>,
    pub wy: DVector<f64>,
    pub wc: DVector<f64>,
    /// Intercepts for x, y and the class score.
    pub bias: [f64; 3],
}

/// Closed-form ridge fit of the anchor heads and the Front/Back classifier.
/// Classes are scored +1 for Back, -1 for Front.
pub fn fit_anchor_head(data: &[FewShotSample], reg_lambda: f64) -> Result<AnchorRegressor, PerceptionError> {
    if data.is_empty() {
        return Err(PerceptionError::TooFewSamples { needed: 1, available: 0 });
    }
    if !(reg_lambda.is_finite() && reg_lambda >= 0.0) {
        return Err(PerceptionError::InvalidModel("ridge penalty must be non-negative".into()));
    }
    let spec = FeatureSpec::default();
    let d = spec.dim();
    let n = data.len();
    let feats = data.iter().map(|s| extract_features(&s.obs)).collect::<Result<Vec<_>, _>>()?;
    let center = feats.iter().fold(DVector::zeros(d), |acc, f| acc + f) / n as f64;
    let scale = DVector::from_vec(spec.scales.clone());
    let x = DMatrix::from_fn(n, d, |i, j| (feats[i][j] - center[j]) / scale[j]);
    let col = |g: &dyn Fn(&FewShotSample) -> f64| DVector::from_iterator(n, data.iter().map(g));
    let ys = [
        col(&|s| s.target.x),
        col(&|s| s.target.y),
        col(&|s| if s.cls == AffordanceClass::Back { 1.0 } else { -1.0 }),
    ];
    let bias = [ys[0].mean(), ys[1].mean(), ys[2].mean()];

    // Dual form when there are fewer samples than features.
    let solve = |x: &DMatrix<f64>, y: &DVector<f64>| -> Result<DVector<f64>, PerceptionError> {
        let yc = y.add_scalar(-y.mean());
        let w = if n <= d {
            let k = x * x.transpose() + DMatrix::identity(n, n) * reg_lambda;
            x.transpose() * solve_spd(k, &yc)?
        } else {
            let g = x.transpose() * x + DMatrix::identity(d, d) * reg_lambda;
            solve_spd(g, &(x.transpose() * yc))?
        };
        Ok(w)
    };
    // A single centred sample is all zeros; the fit reduces to the intercepts.
    let zero_ok = |x: &DMatrix<f64>, r: Result<DVector<f64>, PerceptionError>| match r {
        Err(PerceptionError::DegenerateFeatures) if x.iter().all(|v| *v == 0.0) => Ok(DVector::zeros(d)),
        other => other,
    };
    // The face classifier sees only the position-independent block.
    let mut xi = x.clone();
    xi.columns_mut(0, INVARIANT_START).fill(0.0);
    let unscale = |w: DVector<f64>| w.component_div(&scale);
    Ok(AnchorRegressor {
        wx: unscale(zero_ok(&x, solve(&x, &ys[0]))?),
        wy: unscale(zero_ok(&x, solve(&x, &ys[1]))?),
        wc: unscale(zero_ok(&xi, solve(&xi, &ys[2]))?),
        spec,
        lambda: reg_lambda,
        center,
        bias,
    })
}

fn solve_spd(a: DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>, PerceptionError> {
    let x = a.cholesky().map(|c| c.solve(b)).ok_or(PerceptionError::DegenerateFeatures)?;
    if x.iter().all(|v| v.is_finite()) {
        Ok(x)
    } else {
        Err(PerceptionError::DegenerateFeatures)
    }
}

impl AnchorRegressor {
    fn raw(&self, f: &DVector<f64>) -> (Point2<f64>, f64) {
        let fc = f - &self.center;
        (Point2::new(self.wx.dot(&fc) + self.bias[0], self.wy.dot(&fc) + self.bias[1]), self.wc.dot(&fc) + self.bias[2])
    }
}

/// Anchor pixel (clamped to the image) and face class for one observation.
pub fn predict_anchor(obs: &Observation, reg: &AnchorRegressor) -> Result<AffordanceObservation, PerceptionError> {
    let f = extract_features(obs)?;
    if f.len() != reg.wx.len() {
        return Err(PerceptionError::InvalidModel("feature dimension mismatch".into()));
    }
    let (p, score) = reg.raw(&f);
    let anchor = Point2::new(p.x.clamp(0.0, obs.mask.width() as f64), p.y.clamp(0.0, obs.mask.height() as f64));
    let cls = if score >= 0.0 { AffordanceClass::Back } else { AffordanceClass::Front };
    Ok(AffordanceObservation { cls, anchor, unit: AnchorUnit::Pixel, timestamp: obs.capture_ts })
}

/// Mean Euclidean distance between predicted and labelled anchors, px.
pub fn pixel_error(reg: &AnchorRegressor, eval: &[FewShotSample]) -> Result<f64, PerceptionError> {
    if eval.is_empty() {
        return Err(PerceptionError::TooFewSamples { needed: 1, available: 0 });
    }
    let mut sum = 0.0;
    for s in eval {
        sum += (predict_anchor(&s.obs, reg)?.anchor - s.target).norm();
    }
    Ok(sum / eval.len() as f64)
}

/// Fraction of samples whose predicted class matches the label.
pub fn class_accuracy(reg: &AnchorRegressor, eval: &[FewShotSample]) -> Result<f64, PerceptionError> {
    let mut hits = 0;
    for s in eval {
        hits += usize::from(predict_anchor(&s.obs, reg)?.cls == s.cls);
    }
    Ok(hits as f64 / eval.len().max(1) as f64)
}

/// Plain-text regressor: a `features` header naming each dimension, then one
/// line per row `name scale center wx wy wc`, then `bias bx by bc` and
/// `lambda l`.
pub fn write_regressor(reg: &AnchorRegressor) -> String {
    let mut out = String::from("# anchor regressor\n");
    let _ = writeln!(out, "features {}", reg.spec.dim());
    for (i, name) in FeatureSpec::names().iter().enumerate() {
        let _ = writeln!(out, "{name} {} {} {} {} {}", reg.spec.scales[i], reg.center[i], reg.wx[i], reg.wy[i], reg.wc[i]);
    }
    let _ = writeln!(out, "bias {} {} {}", reg.bias[0], reg.bias[1], reg.bias[2]);
    let _ = writeln!(out, "lambda {}", reg.lambda);
    out
}

pub fn parse_regressor(text: &str) -> Result<AnchorRegressor, PerceptionError> {
    let names = FeatureSpec::names();
    let mut lines = content_lines(text);
    let (ln, head) = lines.next().ok_or_else(|| LineError::new(1, "empty regressor file"))?;
    let dim: usize = match head.split_whitespace().collect::<Vec<_>>().as_slice() {
        ["features", n] => parse_num(n, ln, "feature count")?,
        _ => return Err(LineError::new(ln, "expected `features <dim>`").into()),
    };
    if dim != names.len() {
        return Err(LineError::new(ln, format!("feature count {dim} does not match {}", names.len())).into());
    }
    let mut cols = [vec![], vec![], vec![], vec![], vec![]];
    for name in &names {
        let (ln, row) = lines.next().ok_or_else(|| LineError::new(ln, format!("missing feature row {name}")))?;
        let toks: Vec<&str> = row.split_whitespace().collect();
        if toks.len() != 6 || toks[0] != name {
            return Err(LineError::new(ln, format!("expected row `{name} scale center wx wy wc`")).into());
        }
        for (c, t) in cols.iter_mut().zip(&toks[1..]) {
            c.push(parse_f64(t, ln, name)?);
        }
    }
    let mut bias = None;
    let mut lambda = None;
    for (ln, row) in lines {
        let toks: Vec<&str> = row.split_whitespace().collect();
        match toks.as_slice() {
            ["bias", a, b, c] => bias = Some([parse_f64(a, ln, "bias")?, parse_f64(b, ln, "bias")?, parse_f64(c, ln, "bias")?]),
            ["lambda", l] => lambda = Some(parse_f64(l, ln, "lambda")?),
            _ => return Err(LineError::new(ln, format!("unexpected line {row:?}")).into()),
        }
    }
    let end = text.lines().count().max(1);
    let bias = bias.ok_or_else(|| LineError::new(end, "missing bias line"))?;
    let lambda = lambda.ok_or_else(|| LineError::new(end, "missing lambda line"))?;
    if cols[0].iter().any(|s| *s <= 0.0) {
        return Err(PerceptionError::InvalidModel("feature scales must be positive".into()));
    }
    let [scales, center, wx, wy, wc] = cols;
    Ok(AnchorRegressor {
        spec: FeatureSpec { scales },
        lambda,
        center: DVector::from_vec(center),
        wx: DVector::from_vec(wx),
        wy: DVector::from_vec(wy),
        wc: DVector::from_vec(wc),
        bias,
    })
}

/// Outline of the chip-carrier stand-in used by the few-shot suite: a
/// 100 × 40 mm board with a corner notch (so its two faces differ) and a
/// round-ended lead on the +x edge. `back` mirrors it across the local x axis.
pub fn chip_outline(back: bool) -> Vec<Point2<f64>> {
    let mut pts = vec![
        Point2::new(-50.0, -20.0),
        Point2::new(50.0, -20.0),
        Point2::new(50.0, -10.0),
        Point2::new(70.0, -10.0),
    ];
    for i in 1..12 {
        let a = -std::f64::consts::FRAC_PI_2 + std::f64::consts::PI * i as f64 / 12.0;
        pts.push(Point2::new(70.0 + 10.0 * a.cos(), 10.0 * a.sin()));
    }
    pts.extend([
        Point2::new(70.0, 10.0),
        Point2::new(50.0, 10.0),
        Point2::new(50.0, 20.0),
        Point2::new(-30.0, 20.0),
        Point2::new(-30.0, 5.0),
        Point2::new(-50.0, 5.0),
    ]);
    if back {
        pts = pts.iter().rev().map(|p| Point2::new(p.x, -p.y)).collect();
    }
    pts
}

/// Randomization ranges of the synthetic few-shot suite.
#[derive(Debug, Clone, PartialEq)]
pub struct SuiteConfig {
    pub camera: Camera,
    /// Half-width of the uniform placement box around the image centre, mm.
    pub spread_mm: f64,
    /// Largest absolute in-plane rotation, rad.
    pub max_rotation: f64,
    pub scale_range: (f64, f64),
    pub flip_prob: f64,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            camera: Camera::default(),
            spread_mm: 25.0,
            max_rotation: 20f64.to_radians(),
            scale_range: (0.9, 1.1),
            flip_prob: 0.05,
        }
    }
}

/// Generates `count` labelled samples. Targets are the flip anchors of the
/// rendered silhouettes, in pixels.
pub fn synthetic_suite(count: usize, seed: u64, cfg: &SuiteConfig) -> Result<FewShotDataset, PerceptionError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cam = cfg.camera;
    let mid = cam.to_mm(Point2::new(cam.width as f64 / 2.0, cam.height as f64 / 2.0));
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let back = rng.random_bool(0.5);
        let k = rng.random_range(cfg.scale_range.0..=cfg.scale_range.1);
        let theta = rng.random_range(-cfg.max_rotation..=cfg.max_rotation);
        // The outline reaches farther along +x, so the box sits slightly left.
        let x = mid.x - 10.0 + rng.random_range(-cfg.spread_mm..=cfg.spread_mm);
        let y = mid.y + rng.random_range(-cfg.spread_mm..=cfg.spread_mm);
        let noise_seed = rng.random::<u64>();
        let outline: Vec<Point2<f64>> = chip_outline(back).iter().map(|p| Point2::from(p.coords * k)).collect();
        let shape = PlanarShape::from_polygon(outline, vec![], 0.5)?.with_frame(Pose2::new(x, y, theta));
        let mut obs = render_observation(&shape, &cam, cfg.flip_prob, noise_seed)?;
        obs.frame_id = i as u64;
        let anchor = pivot_anchor(&shape)?.anchor;
        let cls = if back { AffordanceClass::Back } else { AffordanceClass::Front };
        out.push(FewShotSample { obs, target: cam.to_px(anchor), cls });
    }
    Ok(out)
}

/// Held-out statistics of the few-shot protocol for one training-set size.
#[derive(Debug, Clone, PartialEq)]
pub struct FewShotStats {
    pub n: usize,
    pub mean_px: f64,
    pub sd_px: f64,
    pub max_fit_s: f64,
    pub accuracy: f64,
}

/// Fits on `n` random samples and scores on the rest, over `splits` draws.
pub fn evaluate_few_shot(
    suite: &[FewShotSample],
    n: usize,
    splits: usize,
    seed: u64,
    reg_lambda: f64,
) -> Result<FewShotStats, PerceptionError> {
    if n == 0 || suite.len() <= n {
        return Err(PerceptionError::TooFewSamples { needed: n + 1, available: suite.len() });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut errs = Vec::with_capacity(splits);
    let mut acc = 0.0;
    let mut max_fit_s: f64 = 0.0;
    let mut idx: Vec<usize> = (0..suite.len()).collect();
    for _ in 0..splits.max(1) {
        idx.shuffle(&mut rng);
        let train: Vec<FewShotSample> = idx[..n].iter().map(|&i| suite[i].clone()).collect();
        let test: Vec<FewShotSample> = idx[n..].iter().map(|&i| suite[i].clone()).collect();
        let start = Instant::now();
        let reg = fit_anchor_head(&train, reg_lambda)?;
        max_fit_s = max_fit_s.max(start.elapsed().as_secs_f64());
        errs.push(pixel_error(&reg, &test)?);
        acc += class_accuracy(&reg, &test)?;
    }
    let k = errs.len() as f64;
    let mean_px = errs.iter().sum::<f64>() / k;
    let sd_px = (errs.iter().map(|e| (e - mean_px).powi(2)).sum::<f64>() / k).sqrt();
    Ok(FewShotStats { n, mean_px, sd_px, max_fit_s, accuracy: acc / k })
}

/// Outcome of fitting on a random subset and scoring on the rest.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptReport {
    pub n: usize,
    pub held_out: usize,
    /// Mean held-out pixel error; `None` when nothing is held out.
    pub pixel_error: Option<f64>,
    pub accuracy: Option<f64>,
    pub fit_s: f64,
}

/// Fits the head on `n` samples drawn with `seed` and scores the rest.
pub fn adapt(data: &[FewShotSample], n: usize, seed: u64, reg_lambda: f64) -> Result<(AnchorRegressor, AdaptReport), PerceptionError> {
    if n == 0 || n > data.len() {
        return Err(PerceptionError::TooFewSamples { needed: n.max(1), available: data.len() });
    }
    let mut idx: Vec<usize> = (0..data.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let train: Vec<FewShotSample> = idx[..n].iter().map(|&i| data[i].clone()).collect();
    let test: Vec<FewShotSample> = idx[n..].iter().map(|&i| data[i].clone()).collect();
    let start = Instant::now();
    let reg = fit_anchor_head(&train, reg_lambda)?;
    let fit_s = start.elapsed().as_secs_f64();
    let (pixel_error, accuracy) = if test.is_empty() {
        (None, None)
    } else {
        (Some(pixel_error(&reg, &test)?), Some(class_accuracy(&reg, &test)?))
    };
    Ok((reg, AdaptReport { n, held_out: test.len(), pixel_error, accuracy, fit_s }))
}

/// One line of an annotation file.
#[derive(Debug, Clone, PartialEq)]
pub struct Annotation {
    pub mask_path: PathBuf,
    pub target: Point2<f64>,
    pub cls: AffordanceClass,
}

/// Parses `mask_path target_x_px target_y_px cls` lines.
pub fn parse_annotations(text: &str) -> Result<Vec<Annotation>, PerceptionError> {
    let mut out = Vec::new();
    for (ln, row) in content_lines(text) {
        let toks: Vec<&str> = row.split_whitespace().collect();
        let [path, x, y, cls] = toks.as_slice() else {
            return Err(LineError::new(ln, "expected `mask_path target_x_px target_y_px cls`").into());
        };
        let cls = AffordanceClass::parse(cls).ok_or_else(|| LineError::new(ln, format!("invalid class {cls:?}")))?;
        out.push(Annotation {
            mask_path: PathBuf::from(path),
            target: Point2::new(parse_f64(x, ln, "target x")?, parse_f64(y, ln, "target y")?),
            cls,
        });
    }
    Ok(out)
}

pub fn write_annotations(rows: &[Annotation]) -> String {
    let mut out = String::from("# mask_path target_x_px target_y_px cls\n");
    for a in rows {
        let _ = writeln!(out, "{} {} {} {}", a.mask_path.display(), a.target.x, a.target.y, a.cls.as_str());
    }
    out
}

fn read(path: &Path) -> Result<String, PerceptionError> {
    std::fs::read_to_string(path).map_err(|source| PerceptionError::Io { path: path.to_path_buf(), source })
}

/// Loads an annotation file and its masks; relative mask paths resolve
/// against the annotation file's directory. Masks use a 1 mm/px camera.
pub fn load_dataset(path: &Path) -> Result<FewShotDataset, PerceptionError> {
    let base = path.parent().unwrap_or(Path::new("."));
    let mut out = Vec::new();
    for (i, a) in parse_annotations(&read(path)?)?.into_iter().enumerate() {
        let mp = if a.mask_path.is_absolute() { a.mask_path.clone() } else { base.join(&a.mask_path) };
        let mask = Mask::parse_pbm(&read(&mp)?).map_err(|e| match e {
            PerceptionError::Parse(l) => PerceptionError::InvalidModel(format!("{}: {l}", mp.display())),
            other => other,
        })?;
        if a.target.x < 0.0 || a.target.y < 0.0 || a.target.x > mask.width() as f64 || a.target.y > mask.height() as f64 {
            return Err(PerceptionError::InvalidModel(format!("{}: target outside the image", mp.display())));
        }
        let camera = Camera { width: mask.width(), height: mask.height(), ..Camera::default() };
        out.push(FewShotSample { obs: Observation { mask, frame_id: i as u64, capture_ts: 0.0, camera }, target: a.target, cls: a.cls });
    }
    Ok(out)
}

/// Writes masks as `mask_NNN.pbm` plus `annotations.txt` into `dir`.
pub fn write_dataset(dir: &Path, data: &[FewShotSample]) -> Result<PathBuf, PerceptionError> {
    let io = |path: &Path, e| PerceptionError::Io { path: path.to_path_buf(), source: e };
    std::fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
    let mut rows = Vec::with_capacity(data.len());
    for (i, s) in data.iter().enumerate() {
        let name = format!("mask_{i:03}.pbm");
        let p = dir.join(&name);
        std::fs::write(&p, s.obs.mask.to_pbm()).map_err(|e| io(&p, e))?;
        rows.push(Annotation { mask_path: PathBuf::from(name), target: s.target, cls: s.cls });
    }
    let ann = dir.join("annotations.txt");
    std::fs::write(&ann, write_annotations(&rows)).map_err(|e| io(&ann, e))?;
    Ok(ann)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::rect_polygon;
    use proptest::prelude::*;

    fn square(cx: f64, cy: f64, side: f64, theta: f64) -> PlanarShape {
        let h = side / 2.0;
        PlanarShape::from_polygon(rect_polygon(-h, -h, h, h), vec![], 0.5)
            .unwrap()
            .with_frame(Pose2::new(cx, cy, theta))
    }

    fn obs_of(shape: &PlanarShape) -> Observation {
        render_observation(shape, &Camera::default(), 0.0, 0).unwrap()
    }

    #[test]
    fn centered_square_renders_filled() {
        let o = obs_of(&square(112.0, 112.0, 40.0, 0.0));
        assert_eq!(o.mask.count(), 1600);
        for r in 0..224 {
            for c in 0..224 {
                assert_eq!(o.mask.get(c, r), (92..132).contains(&c) && (92..132).contains(&r));
            }
        }
    }

    #[test]
    fn half_turn_preserves_area() {
        let s = PlanarShape::from_polygon(chip_outline(false), vec![], 0.5).unwrap();
        let a = obs_of(&s.clone().with_frame(Pose2::new(100.0, 112.0, 0.3))).mask.count() as f64;
        let b = obs_of(&s.with_frame(Pose2::new(100.0, 112.0, 0.3 + std::f64::consts::PI))).mask.count() as f64;
        assert!((a - b).abs() / a <= 0.02);
    }

    #[test]
    fn noise_is_seeded_and_frame_is_checked() {
        let s = square(112.0, 112.0, 50.0, 0.2);
        let cam = Camera::default();
        let a = render_observation(&s, &cam, 0.2, 5).unwrap();
        let b = render_observation(&s, &cam, 0.2, 5).unwrap();
        let c = render_observation(&s, &cam, 0.2, 6).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.mask, c.mask);
        let out = square(215.0, 112.0, 40.0, 0.0);
        assert!(matches!(render_observation(&out, &cam, 0.0, 0), Err(PerceptionError::ObjectOutOfFrame)));
    }

    #[test]
    fn translation_moves_only_the_centroid_features() {
        let s = PlanarShape::from_polygon(chip_outline(true), vec![], 0.5).unwrap();
        let a = extract_features(&obs_of(&s.clone().with_frame(Pose2::new(100.0, 110.0, 0.1)))).unwrap();
        let b = extract_features(&obs_of(&s.with_frame(Pose2::new(117.0, 101.0, 0.1)))).unwrap();
        assert!((b[0] - a[0] - 17.0 / 224.0).abs() < 1e-12);
        assert!((b[1] - a[1] + 9.0 / 224.0).abs() < 1e-12);
        for i in 2..FEATURE_DIM {
            assert!((a[i] - b[i]).abs() < 1e-6, "feature {i}");
        }
    }

    #[test]
    fn scaling_quadruples_area_and_keeps_normalized_moments() {
        let small = extract_features(&obs_of(&square(112.0, 112.0, 30.0, 0.4))).unwrap();
        let big = extract_features(&obs_of(&square(112.0, 112.0, 60.0, 0.4))).unwrap();
        let area = FEATURE_DIM - 1;
        assert!((big[area] / small[area] - 4.0).abs() < 0.05);
        for i in 2..5 {
            assert!((big[i] - small[i]).abs() < 2e-3, "eta {i}");
        }
        assert!((big[9] - small[9]).abs() < 2e-3);
    }

    #[test]
    fn feature_length_is_fixed() {
        let suite = synthetic_suite(6, 1, &SuiteConfig::default()).unwrap();
        for s in &suite {
            assert_eq!(extract_features(&s.obs).unwrap().len(), FeatureSpec::default().dim());
        }
        assert_eq!(FeatureSpec::names().len(), FEATURE_DIM);
    }

    #[test]
    fn single_sample_fit_is_exact_and_constant_targets_give_constant() {
        let mut suite = synthetic_suite(12, 2, &SuiteConfig::default()).unwrap();
        let reg = fit_anchor_head(&suite[..1], DEFAULT_LAMBDA).unwrap();
        assert!(pixel_error(&reg, &suite[..1]).unwrap() < 1e-9);
        assert!(pixel_error(&reg, &suite[1..]).unwrap() > 5.0);

        let p0 = Point2::new(80.0, 90.0);
        for s in &mut suite {
            s.target = p0;
        }
        let reg = fit_anchor_head(&suite[..6], DEFAULT_LAMBDA).unwrap();
        for s in &suite[6..] {
            assert!((predict_anchor(&s.obs, &reg).unwrap().anchor - p0).norm() < 1e-6);
        }
    }

    #[test]
    fn huge_penalty_predicts_the_mean() {
        let suite = synthetic_suite(10, 3, &SuiteConfig::default()).unwrap();
        let reg = fit_anchor_head(&suite[..8], 1e6).unwrap();
        let mean = suite[..8].iter().fold(nalgebra::Vector2::zeros(), |a, s| a + s.target.coords) / 8.0;
        for s in &suite {
            assert!((predict_anchor(&s.obs, &reg).unwrap().anchor.coords - mean).norm() < 0.05);
        }
    }

    #[test]
    fn zero_penalty_on_rank_deficient_features_is_degenerate() {
        // Several histogram bins are empty for every sample of the suite.
        let suite = synthetic_suite(40, 4, &SuiteConfig::default()).unwrap();
        assert!(matches!(fit_anchor_head(&suite, 0.0), Err(PerceptionError::DegenerateFeatures)));
        assert!(fit_anchor_head(&suite, DEFAULT_LAMBDA).is_ok());
    }

    #[test]
    fn memorized_set_has_zero_error_in_any_order() {
        let suite = synthetic_suite(8, 5, &SuiteConfig::default()).unwrap();
        let reg = fit_anchor_head(&suite, 1e-12).unwrap();
        assert!(pixel_error(&reg, &suite).unwrap() < 1e-3);
        let held = synthetic_suite(10, 6, &SuiteConfig::default()).unwrap();
        let mut rev = held.clone();
        rev.reverse();
        let (a, b) = (pixel_error(&reg, &held).unwrap(), pixel_error(&reg, &rev).unwrap());
        assert!((a - b).abs() < 1e-9);
    }

    #[test]
    fn constant_predictor_error_is_mean_distance_to_target_centroid() {
        let suite = synthetic_suite(20, 8, &SuiteConfig::default()).unwrap();
        let mut reg = fit_anchor_head(&suite[..3], DEFAULT_LAMBDA).unwrap();
        let c = suite.iter().fold(nalgebra::Vector2::zeros(), |a, s| a + s.target.coords) / 20.0;
        reg.wx.fill(0.0);
        reg.wy.fill(0.0);
        reg.bias[0] = c.x;
        reg.bias[1] = c.y;
        let oracle = suite.iter().map(|s| (s.target.coords - c).norm()).sum::<f64>() / 20.0;
        assert!((pixel_error(&reg, &suite).unwrap() - oracle).abs() < 1e-9);
    }

    #[test]
    fn five_shot_classifier_and_noise_free_anchors() {
        let suite = synthetic_suite(60, 7, &SuiteConfig::default()).unwrap();
        let reg = fit_anchor_head(&suite[..5], DEFAULT_LAMBDA).unwrap();
        assert!(class_accuracy(&reg, &suite[5..]).unwrap() >= 0.9);

        let clean = SuiteConfig { flip_prob: 0.0, ..SuiteConfig::default() };
        let train_clean = synthetic_suite(60, 7, &clean).unwrap();
        for s in &train_clean[..5] {
            assert!((predict_anchor(&s.obs, &reg).unwrap().anchor - s.target).norm() < 5.0);
        }
    }

    #[test]
    fn refit_is_deterministic() {
        let suite = synthetic_suite(10, 9, &SuiteConfig::default()).unwrap();
        assert_eq!(fit_anchor_head(&suite, DEFAULT_LAMBDA).unwrap(), fit_anchor_head(&suite, DEFAULT_LAMBDA).unwrap());
    }

    #[test]
    fn regressor_and_pbm_round_trip() {
        let suite = synthetic_suite(6, 10, &SuiteConfig::default()).unwrap();
        let reg = fit_anchor_head(&suite, DEFAULT_LAMBDA).unwrap();
        assert_eq!(parse_regressor(&write_regressor(&reg)).unwrap(), reg);
        let m = &suite[0].obs.mask;
        assert_eq!(&Mask::parse_pbm(&m.to_pbm()).unwrap(), m);
    }

    #[test]
    fn parse_errors_name_the_line() {
        let e = parse_annotations("# header\na.pbm 1 2 Back\nb.pbm 1 x Front\n").unwrap_err();
        assert!(e.to_string().starts_with("line 3"), "{e}");
        let e = Mask::parse_pbm("P1\n2 2\n1 0\n0 2\n").unwrap_err();
        assert!(e.to_string().starts_with("line 4"), "{e}");
        assert!(parse_regressor("features 3\n").is_err());
    }

    #[test]
    fn dataset_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let suite = synthetic_suite(4, 11, &SuiteConfig::default()).unwrap();
        let ann = write_dataset(dir.path(), &suite).unwrap();
        let back = load_dataset(&ann).unwrap();
        assert_eq!(back.len(), 4);
        for (a, b) in suite.iter().zip(&back) {
            assert_eq!(a.obs.mask, b.obs.mask);
            assert_eq!(a.target, b.target);
            assert_eq!(a.cls, b.cls);
        }
    }

    #[test]
    fn too_few_samples() {
        let suite = synthetic_suite(4, 12, &SuiteConfig::default()).unwrap();
        assert!(matches!(evaluate_few_shot(&suite, 4, 2, 0, DEFAULT_LAMBDA), Err(PerceptionError::TooFewSamples { .. })));
        assert!(matches!(fit_anchor_head(&[], DEFAULT_LAMBDA), Err(PerceptionError::TooFewSamples { .. })));
    }

    proptest! {
        #[test]
        fn pbm_parser_never_panics(s in "\\PC{0,200}") {
            let _ = Mask::parse_pbm(&s);
        }

        #[test]
        fn features_are_finite(bits in prop::collection::vec(any::<bool>(), 64)) {
            let mask = Mask::new(8, 8, bits).unwrap();
            let obs = Observation { mask, frame_id: 0, capture_ts: 0.0, camera: Camera { width: 8, height: 8, ..Camera::default() } };
            match extract_features(&obs) {
                Ok(f) => prop_assert!(f.iter().all(|v| v.is_finite())),
                Err(e) => prop_assert!(matches!(e, PerceptionError::EmptyMask)),
            }
        }
    }
}
