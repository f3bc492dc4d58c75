use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{
    make_oracle, run_many, run_stage_one, run_stage_two, schedule_for, write, ExperimentData, RunConfig, RunError,
    StageScores,
};
use crate::detector::DistillConfig;
use crate::oracle::EmbeddingOracle;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub weight: f64,
    pub is_default: bool,
    pub t1: StageScores,
    pub t2: StageScores,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub points: Vec<SweepPoint>,
}

/// Removes repeated weights (first occurrence wins) and checks the rest.
fn dedup_weights(weights: &[f64]) -> Result<Vec<f64>, RunError> {
    let mut out: Vec<f64> = Vec::new();
    for &w in weights {
        if !w.is_finite() || w < 0.0 {
            return Err(RunError::Sweep(format!("weight {w} must be finite and >= 0")));
        }
        if out.contains(&w) {
            log::warn!("duplicate distillation weight {w} ignored");
        } else {
            out.push(w);
        }
    }
    if out.len() < 2 {
        return Err(RunError::Sweep(format!("need at least 2 distinct weights, got {}", out.len())));
    }
    Ok(out)
}

/// One task 2 run per weight. Task 1 does not read the distillation weight, so
/// a single task 1 run is shared by every point.
pub fn sweep_distill(
    cfg: &RunConfig,
    weights: &[f64],
    parallel: usize,
    data: &ExperimentData,
    oracle: &dyn EmbeddingOracle,
) -> Result<SweepResult, RunError> {
    let weights = dedup_weights(weights)?;
    let (t1, report_t1) = run_stage_one(cfg, data, oracle)?;
    let configs: Vec<RunConfig> = weights
        .iter()
        .map(|&w| {
            let mut c = cfg.clone();
            c.train.distill.weight = w;
            c
        })
        .collect();
    let exec = |c: &RunConfig| run_stage_two(c, data, oracle, &t1).map(|(_, r)| r);
    let reports = run_many(&configs, parallel, &exec)?;
    let default = DistillConfig::default().weight;
    let points = weights
        .iter()
        .zip(reports)
        .map(|(&weight, r2)| SweepPoint {
            weight,
            is_default: weight == default,
            t1: StageScores::of(&report_t1),
            t2: StageScores::of(&r2),
        })
        .collect();
    Ok(SweepResult { points })
}

impl SweepResult {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("weight,default,t1_base,t1_novel,t1_all,t2_base,t2_novel,t2_all\n");
        for p in &self.points {
            let _ = writeln!(
                s,
                "{},{},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4}",
                p.weight, p.is_default, p.t1.base, p.t1.novel, p.t1.all, p.t2.base, p.t2.novel, p.t2.all
            );
        }
        s
    }

    /// Line plot of task 2 base and novel mAP against weight; the default
    /// weight is marked with a dashed rule.
    pub fn to_svg(&self) -> String {
        let (w, h, m) = (480.0, 320.0, 48.0);
        let mut pts = self.points.clone();
        pts.sort_by(|a, b| a.weight.total_cmp(&b.weight));
        let xmax = pts.last().map_or(1.0, |p| p.weight).max(1e-9);
        let x = |v: f64| m + (w - 2.0 * m) * v / xmax;
        let y = |v: f64| h - m - (h - 2.0 * m) * v / 100.0;
        let mut s = String::new();
        let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="11">"#);
        let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
        let _ = writeln!(s, r#"<line x1="{m}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#, h - m, w - m, h - m);
        let _ = writeln!(s, r#"<line x1="{m}" y1="{m}" x2="{m}" y2="{}" stroke="black"/>"#, h - m);
        for t in [0.0, 25.0, 50.0, 75.0, 100.0] {
            let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{t}</text>"#, m - 4.0, y(t) + 4.0);
        }
        for p in &pts {
            let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, x(p.weight), h - m + 14.0, p.weight);
            if p.is_default {
                let _ = writeln!(
                    s,
                    r#"<line x1="{0}" y1="{m}" x2="{0}" y2="{1}" stroke="gray" stroke-dasharray="4 3"/><text x="{0}" y="{2}" text-anchor="middle">default</text>"#,
                    x(p.weight),
                    h - m,
                    m - 6.0
                );
            }
        }
        for (name, color, get) in [
            ("T2 base", "#1f77b4", (|p: &SweepPoint| p.t2.base) as fn(&SweepPoint) -> f64),
            ("T2 novel", "#d62728", |p: &SweepPoint| p.t2.novel),
        ] {
            let path: Vec<String> = pts.iter().map(|p| format!("{:.2},{:.2}", x(p.weight), y(get(p)))).collect();
            let _ = writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#, path.join(" "));
            if let Some(last) = pts.last() {
                let _ = writeln!(s, r#"<text x="{}" y="{}" fill="{color}">{name}</text>"#, x(last.weight) - 40.0, y(get(last)) - 6.0);
            }
        }
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">distillation weight</text>"#, w / 2.0, h - 8.0);
        s.push_str("</svg>\n");
        s
    }
}

/// `sweep-distill`: writes `sweep.csv`, `sweep.json` and `sweep.svg` under `out_dir`.
pub fn cmd_sweep_distill(cfg: &RunConfig, weights: &[f64], parallel: usize) -> Result<SweepResult, RunError> {
    cfg.validate()?;
    let schedule = schedule_for(cfg)?;
    let data = ExperimentData::load(cfg, &schedule)?;
    let oracle = make_oracle(cfg)?;
    let result = sweep_distill(cfg, weights, parallel, &data, oracle.as_ref())?;
    std::fs::create_dir_all(&cfg.out_dir).map_err(super::io_err(&cfg.out_dir))?;
    write(&cfg.out_dir.join("sweep.csv"), &result.to_csv())?;
    write(&cfg.out_dir.join("sweep.json"), &serde_json::to_string_pretty(&result).expect("sweep json"))?;
    write(&cfg.out_dir.join("sweep.svg"), &result.to_svg())?;
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_weights_collapse() {
        assert_eq!(dedup_weights(&[0.0, 0.2, 0.2, 1.0]).unwrap(), vec![0.0, 0.2, 1.0]);
        assert!(dedup_weights(&[0.2, 0.2]).is_err());
        assert!(dedup_weights(&[0.2, f64::NAN]).is_err());
    }
}
