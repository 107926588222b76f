//! Run reports: JSON document, CSV tables, markdown summary, SVG curve,
//! and the published-table AOP check.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datasets::atomic_write;
use crate::error::{KrError, Result};
use crate::nets::Profile;
use crate::pipeline::{CheckpointCurve, SourceLedger, TuneOutcome};
use crate::privacy::{aop, MiaReport};
use crate::store::StageManifest;
use crate::synthesis::{GenerationParams, Strategy};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TeacherSummary {
    pub val_accuracy: f64,
    pub test_accuracy: f64,
    pub best_epoch: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudentSummary {
    pub params: GenerationParams,
    pub val_cas: f64,
    /// CAS on the real test split.
    pub test_cas: f64,
    pub best_epoch: usize,
    pub ledger: SourceLedger,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StrategyResult {
    pub strategy: Strategy,
    pub seed_index: usize,
    pub seed: u64,
    pub val_cas: f64,
    pub test_cas: f64,
    pub ledger: SourceLedger,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StrategyMedian {
    pub strategy: Strategy,
    pub median_val_cas: f64,
    pub median_test_cas: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StrategyComparison {
    pub checkpoint_epoch: usize,
    pub params: GenerationParams,
    pub results: Vec<StrategyResult>,
    pub medians: Vec<StrategyMedian>,
}

impl StrategyComparison {
    pub fn median(&self, s: Strategy) -> Option<&StrategyMedian> {
        self.medians.iter().find(|m| m.strategy == s)
    }
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub run_id: String,
    pub config_hash: String,
    pub dataset: String,
    pub profile: Profile,
    pub seed: u64,
    pub stages: Vec<StageManifest>,
    pub teacher: Option<TeacherSummary>,
    pub checkpoint_curve: Option<CheckpointCurve>,
    pub tuning: Option<TuneOutcome>,
    pub student: Option<StudentSummary>,
    pub strategies: Option<StrategyComparison>,
    pub mia_teacher: Option<MiaReport>,
    pub mia_student: Option<MiaReport>,
    /// Set when any section is missing.
    pub partial: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Table2Row {
    pub model: String,
    /// Percent.
    pub accuracy: Option<f64>,
    pub auc_mia: Option<f64>,
    pub aop: Option<f64>,
}

impl RunReport {
    /// Everything except run bookkeeping (digests, timings); two
    /// deterministic runs of one config agree on this exactly.
    pub fn metrics(&self) -> serde_json::Value {
        let mut v = serde_json::to_value(self).expect("report serializes");
        if let Some(o) = v.as_object_mut() {
            o.remove("stages");
        }
        v
    }

    pub fn is_complete(&self) -> bool {
        self.teacher.is_some()
            && self.checkpoint_curve.is_some()
            && self.tuning.is_some()
            && self.student.is_some()
            && self.strategies.is_some()
            && self.mia_teacher.is_some()
            && self.mia_student.is_some()
    }

    pub fn table2(&self) -> Vec<Table2Row> {
        let row = |model: &str, acc: Option<f64>, mia: Option<&MiaReport>| Table2Row {
            model: model.to_string(),
            accuracy: acc.map(|a| 100.0 * a),
            auc_mia: mia.map(|m| 100.0 * m.auc),
            aop: mia.map(|m| 100.0 * aop(m.accuracy, m.auc)),
        };
        vec![
            row("teacher", self.teacher.as_ref().map(|t| t.test_accuracy), self.mia_teacher.as_ref()),
            row("student", self.student.as_ref().map(|s| s.test_cas), self.mia_student.as_ref()),
        ]
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn opt2(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.2}")).unwrap_or_default()
}

pub fn cas_curve_csv(curve: &CheckpointCurve) -> String {
    let mut s = String::from("checkpoint_epoch,val_cas\n");
    for p in &curve.points {
        let _ = writeln!(s, "{},{}", p.epoch, opt(p.val_cas));
    }
    s
}

pub fn table2_csv(report: &RunReport) -> String {
    let mut s = String::from("model,accuracy,auc_mia,aop\n");
    for r in report.table2() {
        let _ = writeln!(s, "{},{},{},{}", r.model, opt(r.accuracy), opt(r.auc_mia), opt(r.aop));
    }
    s
}

/// Tuned parameters and ΔCAS in percentage points.
pub fn table1_csv(report: &RunReport) -> String {
    let mut s = String::from("dataset,std_dev,regeneration_rate,cardinality_scale,delta_cas\n");
    if let Some(t) = &report.tuning {
        let p = &t.best_params;
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            report.dataset,
            p.std_dev,
            p.regeneration_rate,
            p.cardinality_scale,
            100.0 * t.delta_cas
        );
    }
    s
}

pub fn parse_table2_csv(text: &str) -> Result<Vec<Table2Row>> {
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| KrError::invalid(format!("table2 csv: {e}")))?;
        let num = |i: usize| -> Result<Option<f64>> {
            let f = rec.get(i).unwrap_or("");
            if f.is_empty() {
                Ok(None)
            } else {
                f.parse().map(Some).map_err(|_| KrError::invalid(format!("table2 csv: bad number `{f}`")))
            }
        };
        out.push(Table2Row {
            model: rec.get(0).unwrap_or("").to_string(),
            accuracy: num(1)?,
            auc_mia: num(2)?,
            aop: num(3)?,
        });
    }
    Ok(out)
}

pub fn parse_cas_curve_csv(text: &str) -> Result<Vec<(usize, Option<f64>)>> {
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    rdr.records()
        .map(|rec| {
            let rec = rec.map_err(|e| KrError::invalid(format!("cas curve csv: {e}")))?;
            let epoch = rec.get(0).unwrap_or("").parse().map_err(|_| KrError::invalid("cas curve csv: bad epoch"))?;
            let v = match rec.get(1).unwrap_or("") {
                "" => None,
                f => Some(f.parse().map_err(|_| KrError::invalid("cas curve csv: bad value"))?),
            };
            Ok((epoch, v))
        })
        .collect()
}

pub fn markdown(report: &RunReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "# Run `{}`\n", report.run_id);
    let _ = writeln!(
        s,
        "dataset `{}`, profile `{}`, seed {}, config `{}`{}\n",
        report.dataset,
        report.profile.as_str(),
        report.seed,
        &report.config_hash[..12.min(report.config_hash.len())],
        if report.partial { " — **partial**" } else { "" }
    );
    if let Some(t) = &report.teacher {
        let _ = writeln!(
            s,
            "## Teacher\n\nvalidation accuracy {:.2}%, test accuracy {:.2}% (epoch {})\n",
            100.0 * t.val_accuracy,
            100.0 * t.test_accuracy,
            t.best_epoch
        );
    }
    if let Some(c) = &report.checkpoint_curve {
        let _ = writeln!(s, "## Checkpoint CAS\n\n| checkpoint epoch | validation CAS |\n|---:|---:|");
        for p in &c.points {
            let mark = if p.epoch == c.best_epoch { " ◀" } else { "" };
            let v = p.val_cas.map(|v| format!("{:.2}", 100.0 * v)).unwrap_or_else(|| "failed".into());
            let _ = writeln!(s, "| {} | {v}{mark} |", p.epoch);
        }
        let _ = writeln!(s);
    }
    if let Some(t) = &report.tuning {
        let p = &t.best_params;
        let pruned = t.trials.iter().filter(|r| r.status == crate::pipeline::TrialStatus::Pruned).count();
        let _ = writeln!(
            s,
            "## Tuning\n\n| σ | r | s | ΔCAS |\n|---:|---:|---:|---:|\n| {:.2} | {} | {} | {:+.2} |\n\n{} trials, {pruned} pruned\n",
            p.std_dev,
            p.regeneration_rate,
            p.cardinality_scale,
            100.0 * t.delta_cas,
            t.trials.len()
        );
    }
    if let Some(c) = &report.strategies {
        let _ = writeln!(
            s,
            "## Strategies (checkpoint {})\n\n| strategy | median val CAS | median test CAS |\n|---|---:|---:|",
            c.checkpoint_epoch
        );
        for m in &c.medians {
            let _ = writeln!(
                s,
                "| {} | {:.2} | {:.2} |",
                m.strategy.as_str(),
                100.0 * m.median_val_cas,
                100.0 * m.median_test_cas
            );
        }
        let _ = writeln!(s);
    }
    let _ = writeln!(s, "## Accuracy and privacy\n\n| Model | Accuracy | AUC_MIA | AOP |\n|---|---:|---:|---:|");
    for r in report.table2() {
        let _ = writeln!(s, "| {} | {} | {} | {} |", r.model, opt2(r.accuracy), opt2(r.auc_mia), opt2(r.aop));
    }
    s
}

/// CAS per checkpoint with the teacher's validation accuracy as a dashed
/// reference line.
pub fn cas_curve_svg(curve: &CheckpointCurve) -> String {
    let (w, h) = (640.0, 400.0);
    let (l, r, t, b) = (60.0, 20.0, 30.0, 50.0);
    let pts: Vec<(f64, f64)> = curve.points.iter().filter_map(|p| p.val_cas.map(|v| (p.epoch as f64, v))).collect();
    let max_e = curve.points.iter().map(|p| p.epoch).max().unwrap_or(1).max(1) as f64;
    let mut lo = pts.iter().map(|p| p.1).fold(curve.teacher_val_accuracy, f64::min);
    let mut hi = pts.iter().map(|p| p.1).fold(curve.teacher_val_accuracy, f64::max);
    if hi - lo < 1e-6 {
        lo -= 0.05;
        hi += 0.05;
    }
    let pad = 0.05 * (hi - lo);
    let (lo, hi) = (lo - pad, hi + pad);
    let x = |e: f64| l + (w - l - r) * e / max_e;
    let y = |v: f64| t + (h - t - b) * (1.0 - (v - lo) / (hi - lo));
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<line x1="{l}" y1="{}" x2="{}" y2="{}" stroke="black"/><line x1="{l}" y1="{t}" x2="{l}" y2="{}" stroke="black"/>"#,
        h - b,
        w - r,
        h - b,
        h - b
    );
    for i in 0..=4 {
        let v = lo + (hi - lo) * i as f64 / 4.0;
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{:.1}" text-anchor="end">{:.1}</text>"#,
            l - 6.0,
            y(v) + 4.0,
            100.0 * v
        );
        let e = max_e * i as f64 / 4.0;
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{}" text-anchor="middle">{:.0}</text>"#,
            x(e),
            h - b + 18.0,
            e
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{}" text-anchor="middle">checkpoint epoch</text><text x="14" y="{:.1}" text-anchor="middle" transform="rotate(-90 14 {:.1})">validation CAS (%)</text>"#,
        l + (w - l - r) / 2.0,
        h - 12.0,
        t + (h - t - b) / 2.0,
        t + (h - t - b) / 2.0
    );
    let ty = y(curve.teacher_val_accuracy);
    let _ = writeln!(
        s,
        r#"<line class="teacher" x1="{l}" y1="{ty:.1}" x2="{}" y2="{ty:.1}" stroke="gray" stroke-dasharray="6 4"/><text x="{}" y="{:.1}" text-anchor="end" fill="gray">teacher</text>"#,
        w - r,
        w - r,
        ty - 4.0
    );
    let poly: Vec<String> = pts.iter().map(|&(e, v)| format!("{:.1},{:.1}", x(e), y(v))).collect();
    let _ = writeln!(s, r#"<polyline class="cas" fill="none" stroke="steelblue" stroke-width="2" points="{}"/>"#, poly.join(" "));
    for &(e, v) in &pts {
        let best = e as usize == curve.best_epoch;
        let _ = writeln!(
            s,
            r#"<circle cx="{:.1}" cy="{:.1}" r="{}" fill="{}"/>"#,
            x(e),
            y(v),
            if best { 5 } else { 3 },
            if best { "crimson" } else { "steelblue" }
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Writes `report.json`, the CSV tables, `report.md` and, when a curve is
/// present, `cas_curve.svg` into `dir`.
pub fn emit_report(report: &RunReport, dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    let mut put = |name: &str, bytes: &[u8]| -> Result<()> {
        let p = dir.join(name);
        atomic_write(&p, bytes)?;
        files.push(p);
        Ok(())
    };
    put("report.json", &serde_json::to_vec_pretty(report)?)?;
    put("table2.csv", table2_csv(report).as_bytes())?;
    put("table1.csv", table1_csv(report).as_bytes())?;
    put("report.md", markdown(report).as_bytes())?;
    if let Some(c) = &report.checkpoint_curve {
        put("cas_curve.csv", cas_curve_csv(c).as_bytes())?;
        put("cas_curve.svg", cas_curve_svg(c).as_bytes())?;
    }
    Ok(files)
}

pub fn read_report(path: &Path) -> Result<RunReport> {
    let bytes = std::fs::read(path).map_err(|e| KrError::io(path, e))?;
    Ok(serde_json::from_slice(&bytes)?)
}

// ----- published-table check --------------------------------------------------

/// Largest accepted |computed − published| AOP gap, in percentage points.
pub const AOP_TOLERANCE_PP: f64 = 0.03;

/// The published (accuracy, AUC, AOP) rows, in percent.
pub const REFERENCE_AOP_CSV: &str = include_str!("../data/reference_aop.csv");

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RowCheck {
    pub label: String,
    pub accuracy: f64,
    pub auc_mia: f64,
    pub published_aop: f64,
    pub computed_aop: f64,
    pub pass: bool,
}

/// Recomputes AOP for every row of a CSV with `accuracy`, `auc_mia` and
/// `aop` columns (percent). Other columns form the row label.
pub fn verify_tables(csv_text: &str) -> Result<Vec<RowCheck>> {
    let mut rdr = csv::Reader::from_reader(csv_text.as_bytes());
    let headers = rdr.headers().map_err(|e| KrError::invalid(format!("table file: {e}")))?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| KrError::invalid(format!("table file lacks a `{name}` column")))
    };
    let (ia, iu, io) = (col("accuracy")?, col("auc_mia")?, col("aop")?);
    let mut out = Vec::new();
    for (n, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| KrError::invalid(format!("table file row {}: {e}", n + 1)))?;
        let num = |i: usize| -> Result<f64> {
            let f = rec.get(i).unwrap_or("").trim();
            f.parse()
                .map_err(|_| KrError::invalid(format!("table file row {}: `{f}` is not a number", n + 1)))
        };
        let (acc, auc_mia, published) = (num(ia)?, num(iu)?, num(io)?);
        let computed = 100.0 * aop(acc / 100.0, auc_mia / 100.0);
        let label = rec
            .iter()
            .enumerate()
            .filter(|(i, _)| ![ia, iu, io].contains(i))
            .map(|(_, f)| f.trim())
            .collect::<Vec<_>>()
            .join("/");
        out.push(RowCheck {
            label,
            accuracy: acc,
            auc_mia,
            published_aop: published,
            computed_aop: computed,
            pass: (computed - published).abs() <= AOP_TOLERANCE_PP,
        });
    }
    if out.is_empty() {
        return Err(KrError::invalid("table file has no rows"));
    }
    Ok(out)
}
