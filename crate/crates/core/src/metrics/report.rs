//! Per-item metric rows, grouped means, and their CSV/JSON files.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;

/// Learned metrics with no desk-scale implementation; listed as unavailable.
pub const UNAVAILABLE: [&str; 6] = ["LPIPS", "DISTS", "FID", "MUSIQ", "MANIQA", "CLIP-T"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub id: String,
    /// Which procedure produced the row (`sweep`, `noise`, `bilinear`, `eval`).
    pub study: String,
    pub f: Option<f64>,
    pub t_s: Option<f64>,
    /// `gt` or `lq` input for the noise study.
    pub variant: Option<String>,
    pub prompt: bool,
    pub psnr: f64,
    pub ssim: f64,
    pub ned: f64,
    pub mse_to_lq: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub study: String,
    pub f: Option<f64>,
    pub t_s: Option<f64>,
    pub variant: Option<String>,
    pub prompt: bool,
    pub count: usize,
    pub psnr: f64,
    pub ssim: f64,
    pub ned: f64,
    pub mse_to_lq: Option<f64>,
}

impl Aggregate {
    fn key(&self) -> (String, Option<u64>, Option<u64>, Option<String>, bool) {
        (
            self.study.clone(),
            self.f.map(f64::to_bits),
            self.t_s.map(f64::to_bits),
            self.variant.clone(),
            self.prompt,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricReport {
    /// Free-form echo of the settings that produced the report.
    pub config: serde_json::Value,
    pub rows: Vec<MetricRow>,
}

#[derive(Serialize)]
struct Summary<'a> {
    config: &'a serde_json::Value,
    aggregates: Vec<Aggregate>,
    unavailable: [&'static str; 6],
}

impl MetricReport {
    pub fn new(config: serde_json::Value) -> Self {
        Self {
            config,
            rows: Vec::new(),
        }
    }

    /// Means per `(study, f, t_s, variant, prompt)` group, in first-seen order.
    pub fn aggregates(&self) -> Vec<Aggregate> {
        let mut out: Vec<(Aggregate, f64)> = Vec::new();
        for r in &self.rows {
            let probe = Aggregate {
                study: r.study.clone(),
                f: r.f,
                t_s: r.t_s,
                variant: r.variant.clone(),
                prompt: r.prompt,
                count: 0,
                psnr: 0.0,
                ssim: 0.0,
                ned: 0.0,
                mse_to_lq: r.mse_to_lq.map(|_| 0.0),
            };
            let pos = match out.iter().position(|(a, _)| a.key() == probe.key()) {
                Some(p) => p,
                None => {
                    out.push((probe, 0.0));
                    out.len() - 1
                }
            };
            let (a, lq) = &mut out[pos];
            a.count += 1;
            a.psnr += r.psnr;
            a.ssim += r.ssim;
            a.ned += r.ned;
            *lq += r.mse_to_lq.unwrap_or(0.0);
        }
        out.into_iter()
            .map(|(mut a, lq)| {
                let n = a.count as f64;
                a.psnr /= n;
                a.ssim /= n;
                a.ned /= n;
                a.mse_to_lq = a.mse_to_lq.map(|_| lq / n);
                a
            })
            .collect()
    }

    /// The aggregate matching a group, if any.
    pub fn find(&self, study: &str, f: Option<f64>, t_s: Option<f64>, variant: Option<&str>, prompt: bool) -> Option<Aggregate> {
        self.aggregates().into_iter().find(|a| {
            a.study == study && a.f == f && a.t_s == t_s && a.variant.as_deref() == variant && a.prompt == prompt
        })
    }

    pub fn extend(&mut self, other: MetricReport) {
        self.rows.extend(other.rows);
    }

    /// Writes `{stem}.csv` (one row per item and setting) and `{stem}.json`
    /// (config echo, group means, unavailable metrics).
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut w = csv::Writer::from_path(dir.join(format!("{stem}.csv")))?;
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush()?;
        let summary = Summary {
            config: &self.config,
            aggregates: self.aggregates(),
            unavailable: UNAVAILABLE,
        };
        std::fs::write(
            dir.join(format!("{stem}.json")),
            serde_json::to_string_pretty(&summary)?,
        )?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(id: &str, f: f64, psnr: f64) -> MetricRow {
        MetricRow {
            id: id.into(),
            study: "sweep".into(),
            f: Some(f),
            t_s: None,
            variant: None,
            prompt: false,
            psnr,
            ssim: 0.5,
            ned: 1.0,
            mse_to_lq: Some(0.01),
        }
    }

    #[test]
    fn groups_and_files() {
        let mut r = MetricReport::new(serde_json::json!({"seed": 1}));
        r.rows = vec![row("a", 1.0, 20.0), row("b", 1.0, 22.0), row("a", 0.0, 10.0)];
        let agg = r.aggregates();
        assert_eq!(agg.len(), 2);
        assert_eq!((agg[0].count, agg[0].psnr), (2, 21.0));
        assert_eq!(r.find("sweep", Some(0.0), None, None, false).unwrap().psnr, 10.0);
        let dir = tempfile::tempdir().unwrap();
        r.write(dir.path(), "rep").unwrap();
        let csv = std::fs::read_to_string(dir.path().join("rep.csv")).unwrap();
        assert!(csv.starts_with("id,study,f,t_s,variant,prompt,psnr,ssim,ned,mse_to_lq"));
        assert_eq!(csv.lines().count(), 4);
        let json = std::fs::read_to_string(dir.path().join("rep.json")).unwrap();
        assert!(json.contains("LPIPS"));
    }
}
