//! Pose-error metrics, per-object and per-bucket aggregation, CSV/SVG
//! reports and the occlusion, sweep, ablation and baseline analyses.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{annotate_occlusion, controlled_erasure, occlusion_bucket, SampleId, SampleRecord};
use crate::fusionnet::{crop_and_mask, NetError, NetInput, Network, PreparedSample};
use crate::geometry::{angular_error, position_error, PointCloud, Pose};
use crate::simworld::{derive_seed, Intrinsics};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Net(#[from] NetError),
    #[error("bad results csv at line {line}: {detail}")]
    Csv { line: usize, detail: String },
    #[error("{0}")]
    Geometry(#[from] crate::geometry::GeometryError),
}

pub type Result<T> = std::result::Result<T, EvalError>;

pub const BUCKET_LABELS: [&str; 3] = ["<0.80", "[0.80,0.85)", ">=0.85"];

/// Anything that maps a prepared sample to a pose estimate.
pub trait Predictor: Sync {
    fn predict(&self, sample: &PreparedSample, seed: u64) -> Result<Pose>;
}

impl Predictor for Network {
    fn predict(&self, sample: &PreparedSample, seed: u64) -> Result<Pose> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let input = NetInput::sample(sample, &self.config, &mut rng)?;
        Ok(Network::predict(self, &input)?.pose())
    }
}

/// Returns the ground truth, optionally shifted; a self-test for the
/// reporting pipeline.
#[derive(Debug, Clone, Copy, Default)]
pub struct OraclePredictor {
    pub offset: crate::Vec3,
}

impl Predictor for OraclePredictor {
    fn predict(&self, sample: &PreparedSample, _seed: u64) -> Result<Pose> {
        let mut p = sample.gt_pose;
        p.translation += self.offset;
        Ok(p)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleResult {
    pub sample_id: SampleId,
    pub object_id: u16,
    pub occlusion: f64,
    pub pos_err_cm: f64,
    pub ang_err_deg: f64,
    pub config_id: String,
}

/// Evaluation inputs: prepared samples plus the ones without a detection.
#[derive(Debug, Clone, Default)]
pub struct EvalSet {
    pub samples: Vec<PreparedSample>,
    pub no_detection: Vec<SampleId>,
}

impl EvalSet {
    pub fn from_records(records: &[SampleRecord], camera: &Intrinsics) -> Self {
        let mut set = EvalSet::default();
        for r in records {
            match crop_and_mask(r, camera) {
                Ok(s) => set.samples.push(s),
                Err(_) => set.no_detection.push(r.id),
            }
        }
        set
    }

    pub fn len(&self) -> usize {
        self.samples.len() + self.no_detection.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Default)]
pub struct EvalRun {
    pub config_id: String,
    pub results: Vec<SampleResult>,
    pub no_detection: Vec<SampleId>,
}

/// Position error in centimeters and angular error in degrees.
pub fn pose_errors(est: &Pose, gt: &Pose) -> Result<(f64, f64)> {
    let pos = position_error(&est.translation, &gt.translation) * 100.0;
    let ang = angular_error(est.rotation.quaternion(), gt.rotation.quaternion())?.to_degrees();
    Ok((pos, ang))
}

pub fn evaluate<P: Predictor + ?Sized>(predictor: &P, set: &EvalSet, config_id: &str, seed: u64) -> Result<EvalRun> {
    let results = set
        .samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let est = predictor.predict(s, derive_seed(seed, 0xe7a1, i as u64))?;
            let (pos, ang) = pose_errors(&est, &s.gt_pose)?;
            Ok(SampleResult {
                sample_id: s.id,
                object_id: s.object_id,
                occlusion: s.occlusion,
                pos_err_cm: pos,
                ang_err_deg: ang,
                config_id: config_id.to_string(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalRun { config_id: config_id.to_string(), results, no_detection: set.no_detection.clone() })
}

/// Mean with standard error (sample standard deviation over √count).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    /// NaN when fewer than two values exist.
    pub std_err: f64,
    pub count: usize,
}

impl Stat {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self { mean: f64::NAN, std_err: f64::NAN, count: 0 };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std_err = if n > 1 {
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            var.sqrt() / (n as f64).sqrt()
        } else {
            f64::NAN
        };
        Self { mean, std_err, count: n }
    }

    pub fn upper(&self) -> f64 {
        self.mean + self.std_err
    }

    pub fn lower(&self) -> f64 {
        self.mean - self.std_err
    }

    pub fn fmt_pm(&self, digits: usize) -> String {
        format!("{:.*}±{:.*}", digits, self.mean, digits, self.std_err)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorStats {
    pub position_cm: Stat,
    pub angular_deg: Stat,
}

impl ErrorStats {
    pub fn of<'a>(rows: impl IntoIterator<Item = &'a SampleResult>) -> Self {
        let (p, a): (Vec<f64>, Vec<f64>) = rows.into_iter().map(|r| (r.pos_err_cm, r.ang_err_deg)).unzip();
        Self { position_cm: Stat::of(&p), angular_deg: Stat::of(&a) }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub config_id: String,
    pub overall: ErrorStats,
    pub per_object: BTreeMap<u16, ErrorStats>,
    pub buckets: [ErrorStats; 3],
    pub evaluated: usize,
    pub no_detection: usize,
}

impl EvalReport {
    pub fn from_run(run: &EvalRun) -> Self {
        let mut by_object: BTreeMap<u16, Vec<&SampleResult>> = BTreeMap::new();
        for r in &run.results {
            by_object.entry(r.object_id).or_default().push(r);
        }
        Self {
            config_id: run.config_id.clone(),
            overall: ErrorStats::of(&run.results),
            per_object: by_object.into_iter().map(|(k, v)| (k, ErrorStats::of(v))).collect(),
            buckets: occlusion_analysis(&run.results),
            evaluated: run.results.len(),
            no_detection: run.no_detection.len(),
        }
    }

    pub fn total(&self) -> usize {
        self.evaluated + self.no_detection
    }
}

/// Errors restricted to each occlusion bucket; empty buckets have count 0.
pub fn occlusion_analysis(results: &[SampleResult]) -> [ErrorStats; 3] {
    let mut parts: [Vec<&SampleResult>; 3] = Default::default();
    for r in results {
        parts[occlusion_bucket(r.occlusion)].push(r);
    }
    parts.map(ErrorStats::of)
}

/// Index of the heaviest bucket holding at least `min_count` samples.
pub fn heaviest_populated(buckets: &[ErrorStats; 3], min_count: usize) -> Option<usize> {
    (0..3).rev().find(|&b| buckets[b].position_cm.count >= min_count.max(1))
}

#[derive(Serialize, Deserialize)]
struct CsvRow {
    sample_id: String,
    object_id: u16,
    occlusion: f64,
    pos_err_cm: f64,
    ang_err_deg: f64,
    config_id: String,
}

pub fn results_csv(results: &[SampleResult]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in results {
        w.serialize(CsvRow {
            sample_id: r.sample_id.to_string(),
            object_id: r.object_id,
            occlusion: r.occlusion,
            pos_err_cm: r.pos_err_cm,
            ang_err_deg: r.ang_err_deg,
            config_id: r.config_id.clone(),
        })
        .expect("in-memory csv write");
    }
    if results.is_empty() {
        return "sample_id,object_id,occlusion,pos_err_cm,ang_err_deg,config_id\n".into();
    }
    String::from_utf8(w.into_inner().expect("in-memory csv flush")).expect("csv output is utf-8")
}

pub fn parse_results_csv(text: &str) -> Result<Vec<SampleResult>> {
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let mut out = Vec::new();
    for row in reader.deserialize::<CsvRow>() {
        let row = row.map_err(|e| EvalError::Csv { line: e.position().map_or(0, |p| p.line() as usize), detail: e.to_string() })?;
        let sample_id = row.sample_id.parse().map_err(|e| EvalError::Csv { line: 0, detail: format!("{}: {e}", row.sample_id) })?;
        out.push(SampleResult {
            sample_id,
            object_id: row.object_id,
            occlusion: row.occlusion,
            pos_err_cm: row.pos_err_cm,
            ang_err_deg: row.ang_err_deg,
            config_id: row.config_id,
        });
    }
    Ok(out)
}

/// One row of a summary table.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub config_id: String,
    pub group: String,
    pub stats: ErrorStats,
}

fn table_csv(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).expect("in-memory csv write");
    for r in rows {
        w.write_record(&r).expect("in-memory csv write");
    }
    String::from_utf8(w.into_inner().expect("in-memory csv flush")).expect("csv output is utf-8")
}

pub fn summary_csv(analysis: &str, rows: &[SummaryRow]) -> String {
    let header = ["analysis", "config_id", "group", "count", "pos_mean_cm", "pos_se_cm", "ang_mean_deg", "ang_se_deg"];
    table_csv(
        &header,
        rows.iter().map(|r| {
            let (p, a) = (r.stats.position_cm, r.stats.angular_deg);
            vec![
                analysis.to_string(),
                r.config_id.clone(),
                r.group.clone(),
                p.count.to_string(),
                p.mean.to_string(),
                p.std_err.to_string(),
                a.mean.to_string(),
                a.std_err.to_string(),
            ]
        }),
    )
}

pub fn object_rows(report: &EvalReport) -> Vec<SummaryRow> {
    let mut rows: Vec<SummaryRow> = report
        .per_object
        .iter()
        .map(|(id, st)| SummaryRow { config_id: report.config_id.clone(), group: format!("object_{id:02}"), stats: *st })
        .collect();
    rows.push(SummaryRow { config_id: report.config_id.clone(), group: "all".into(), stats: report.overall });
    rows
}

pub fn bucket_rows(report: &EvalReport) -> Vec<SummaryRow> {
    (0..3)
        .map(|b| SummaryRow { config_id: report.config_id.clone(), group: BUCKET_LABELS[b].into(), stats: report.buckets[b] })
        .collect()
}

/// Plain-text table in the layout of an ablation study.
pub fn ablation_table(rows: &[(String, ErrorStats)]) -> String {
    let mut s = String::from("| Configuration | Position error (cm) | Angular error (deg) |\n|---|---|---|\n");
    for (name, st) in rows {
        let _ = writeln!(s, "| {name} | {} | {} |", st.position_cm.fmt_pm(3), st.angular_deg.fmt_pm(3));
    }
    s
}

/// Per-object comparison of two reports; the last column is the relative
/// position-error reduction of `ours` over `baseline`.
pub fn baseline_table(ours: &EvalReport, baseline: &EvalReport) -> Vec<(String, ErrorStats, ErrorStats, f64)> {
    let mut out = Vec::new();
    for (id, st) in &ours.per_object {
        if let Some(b) = baseline.per_object.get(id) {
            let gain = (b.position_cm.mean - st.position_cm.mean) / b.position_cm.mean;
            out.push((format!("object_{id:02}"), *st, *b, gain));
        }
    }
    let gain = (baseline.overall.position_cm.mean - ours.overall.position_cm.mean) / baseline.overall.position_cm.mean;
    out.push(("all".into(), ours.overall, baseline.overall, gain));
    out
}

pub fn baseline_csv(rows: &[(String, ErrorStats, ErrorStats, f64)]) -> String {
    let header = ["group", "ours_pos_cm", "ours_pos_se", "base_pos_cm", "base_pos_se", "ours_ang_deg", "base_ang_deg", "relative_gain"];
    table_csv(
        &header,
        rows.iter().map(|(g, o, b, gain)| {
            let values = [o.position_cm.mean, o.position_cm.std_err, b.position_cm.mean, b.position_cm.std_err, o.angular_deg.mean, b.angular_deg.mean, *gain];
            std::iter::once(g.clone()).chain(values.iter().map(f64::to_string)).collect()
        }),
    )
}

/// Copies of `records` with a seeded controlled erasure and refreshed
/// occlusion annotation. Fractions are drawn uniformly from `range`.
pub fn erased_copies(
    records: &[SampleRecord],
    range: (f64, f64),
    seed: u64,
    models: &BTreeMap<u16, PointCloud>,
    camera: &Intrinsics,
    epsilon: f64,
) -> Vec<SampleRecord> {
    records
        .par_iter()
        .enumerate()
        .map(|(i, r)| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0xe5a5e, i as u64));
            let fraction = rng.gen_range(range.0..=range.1);
            let mut out = controlled_erasure(r, fraction, rng.gen());
            if let Some(model) = models.get(&r.object_id) {
                out.occlusion = annotate_occlusion(&out, model, camera, epsilon);
            }
            out
        })
        .collect()
}

/// A labelled series of error statistics for one plot.
#[derive(Debug, Clone)]
pub struct PlotSeries {
    pub name: String,
    pub values: Vec<Stat>,
}

const PALETTE: [&str; 6] = ["#4c72b0", "#dd8452", "#55a868", "#c44e52", "#8172b3", "#937860"];

/// Grouped bar chart with standard-error whiskers.
pub fn error_bar_svg(title: &str, y_label: &str, groups: &[String], series: &[PlotSeries]) -> String {
    let (w, h) = (80.0 + 60.0 * groups.len().max(1) as f64 * (series.len().max(1) as f64 * 0.5 + 0.5), 360.0);
    let (left, right, top, bottom) = (60.0, 20.0, 40.0, 70.0);
    let plot_h = h - top - bottom;
    let max = series
        .iter()
        .flat_map(|s| s.values.iter().map(|v| if v.std_err.is_finite() { v.upper() } else { v.mean }))
        .filter(|v| v.is_finite())
        .fold(0.0f64, f64::max)
        .max(1e-9)
        * 1.1;
    let y = |v: f64| top + plot_h * (1.0 - v / max);
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w:.0}" height="{h:.0}" font-family="sans-serif" font-size="11">"#);
    let _ = writeln!(s, r#"<text x="{:.1}" y="20" text-anchor="middle" font-size="14">{}</text>"#, w / 2.0, xml_escape(title));
    let _ = writeln!(s, r#"<line x1="{left}" y1="{top}" x2="{left}" y2="{:.1}" stroke="black"/>"#, h - bottom);
    let _ = writeln!(s, r#"<line x1="{left}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="black"/>"#, h - bottom, w - right, h - bottom);
    for k in 0..=4 {
        let v = max * k as f64 / 4.0;
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{v:.2}</text>"#, left - 4.0, y(v) + 4.0);
    }
    let _ = writeln!(
        s,
        r#"<text x="14" y="{:.1}" transform="rotate(-90 14 {:.1})" text-anchor="middle">{}</text>"#,
        top + plot_h / 2.0,
        top + plot_h / 2.0,
        xml_escape(y_label)
    );
    let group_w = (w - left - right) / groups.len().max(1) as f64;
    let bar_w = group_w * 0.8 / series.len().max(1) as f64;
    for (g, label) in groups.iter().enumerate() {
        let gx = left + group_w * g as f64;
        for (k, ser) in series.iter().enumerate() {
            let Some(st) = ser.values.get(g) else { continue };
            if !st.mean.is_finite() {
                continue;
            }
            let x = gx + group_w * 0.1 + bar_w * k as f64;
            let color = PALETTE[k % PALETTE.len()];
            let _ = writeln!(
                s,
                r#"<rect x="{x:.1}" y="{:.1}" width="{:.1}" height="{:.1}" fill="{color}"/>"#,
                y(st.mean),
                bar_w * 0.9,
                (h - bottom - y(st.mean)).max(0.0)
            );
            if st.std_err.is_finite() {
                let cx = x + bar_w * 0.45;
                let _ = writeln!(s, r#"<line x1="{cx:.1}" y1="{:.1}" x2="{cx:.1}" y2="{:.1}" stroke="black"/>"#, y(st.upper()), y(st.lower().max(0.0)));
            }
        }
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#, gx + group_w / 2.0, h - bottom + 16.0, xml_escape(label));
    }
    for (k, ser) in series.iter().enumerate() {
        let lx = left + 10.0 + 120.0 * k as f64;
        let _ = writeln!(s, r#"<rect x="{lx:.1}" y="{:.1}" width="10" height="10" fill="{}"/>"#, h - 30.0, PALETTE[k % PALETTE.len()]);
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}">{}</text>"#, lx + 14.0, h - 21.0, xml_escape(&ser.name));
    }
    s.push_str("</svg>\n");
    s
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
