//! Metric reports and prediction dumps.

use std::collections::BTreeMap;
use std::path::Path;

use answerme_core::metrics::{detection_f1, exact_match_accuracy, DetectionScore};
use answerme_core::synth::majority_answer;
use answerme_core::text::tokenize;
use serde::{Deserialize, Serialize};

use crate::config::ProtocolKind;
use crate::error::{AppError, Result};
use crate::formats::write_once;

pub const METRIC_NOTE: &str = "exact match after normalization (lowercase, punctuation stripped, whitespace collapsed); \
detection rows use multiset precision/recall/F1 over predicted words";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Accuracy(f64),
    Detection(DetectionScore),
}

impl Metric {
    /// Accuracy, or F1 for detection rows.
    pub fn headline(&self) -> f64 {
        match self {
            Metric::Accuracy(a) => *a,
            Metric::Detection(d) => d.f1,
        }
    }

    pub fn values(&self) -> Vec<f64> {
        match self {
            Metric::Accuracy(a) => vec![*a],
            Metric::Detection(d) => vec![d.precision, d.recall, d.f1],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scoring {
    ExactMatch,
    Detection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    /// Training configuration label, e.g. `mixture_8`.
    pub config: String,
    pub seed: u64,
    /// Evaluated family.
    pub dataset: String,
    pub metric: Metric,
    pub checkpoint: String,
}

/// Scene-id overlap between one training set and one evaluation set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Audit {
    pub seed: u64,
    pub train: String,
    pub eval: String,
    pub overlap: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub experiment: String,
    /// `None` for a plain checkpoint evaluation.
    pub protocol: Option<ProtocolKind>,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub metric_note: String,
    pub rows: Vec<ReportRow>,
    /// Majority-answer accuracy per evaluated family and seed, keyed
    /// `dataset/seed`.
    pub baselines: BTreeMap<String, f64>,
    /// Exact parameter counts per configuration label.
    pub param_counts: BTreeMap<String, u64>,
    pub audits: Vec<Audit>,
}

impl MetricReport {
    pub fn new(protocol: Option<ProtocolKind>, config_hash: &str, seeds: &[u64]) -> Self {
        Self {
            experiment: protocol.map_or("checkpoint_eval", ProtocolKind::name).to_string(),
            protocol,
            config_hash: config_hash.to_string(),
            seeds: seeds.to_vec(),
            metric_note: METRIC_NOTE.to_string(),
            rows: Vec::new(),
            baselines: BTreeMap::new(),
            param_counts: BTreeMap::new(),
            audits: Vec::new(),
        }
    }

    pub fn value(&self, config: &str, dataset: &str, seed: u64) -> Option<Metric> {
        self.rows
            .iter()
            .find(|r| r.config == config && r.dataset == dataset && r.seed == seed)
            .map(|r| r.metric)
    }

    /// Median of the headline metric over seeds (mean of the two middle
    /// values for an even count).
    pub fn median(&self, config: &str, dataset: &str) -> Option<f64> {
        let v: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.config == config && r.dataset == dataset)
            .map(|r| r.metric.headline())
            .collect();
        median(v)
    }

    pub fn median_baseline(&self, dataset: &str) -> Option<f64> {
        let prefix = format!("{dataset}/");
        median(
            self.baselines
                .iter()
                .filter(|(k, _)| k.starts_with(&prefix))
                .map(|(_, &v)| v)
                .collect(),
        )
    }

    pub fn configs(&self) -> Vec<&str> {
        let mut seen = Vec::new();
        for r in &self.rows {
            if !seen.contains(&r.config.as_str()) {
                seen.push(r.config.as_str());
            }
        }
        seen
    }

    /// Every metric lies in [0, 1].
    pub fn check_bounds(&self) -> Result<()> {
        for r in &self.rows {
            if r.metric.values().iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(AppError::Data(format!("{}/{}: metric out of [0, 1]", r.config, r.dataset)));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    pub fn from_json(path: &Path, text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| AppError::format(path, e.to_string()))
    }
}

pub fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { (v[n / 2 - 1] + v[n / 2]) / 2.0 })
}

/// Predictions of one configuration on one evaluation set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PredictionDump {
    pub config: String,
    pub seed: u64,
    pub dataset: String,
    pub scoring: Scoring,
    pub checkpoint: String,
    /// `(example id, gold, prediction)`.
    pub lines: Vec<(String, String, String)>,
}

impl PredictionDump {
    pub fn file_name(&self) -> String {
        format!("{}__seed{}__{}.tsv", self.config, self.seed, self.dataset)
    }

    pub fn score(&self) -> Result<Metric> {
        let golds: Vec<&str> = self.lines.iter().map(|l| l.1.as_str()).collect();
        let preds: Vec<&str> = self.lines.iter().map(|l| l.2.as_str()).collect();
        Ok(match self.scoring {
            Scoring::ExactMatch => Metric::Accuracy(exact_match_accuracy(&preds, &golds)?),
            Scoring::Detection => {
                let mut sum = [0.0; 3];
                for (p, g) in preds.iter().zip(&golds) {
                    let s = detection_f1(p, &tokenize(g))?;
                    sum[0] += s.precision;
                    sum[1] += s.recall;
                    sum[2] += s.f1;
                }
                let n = preds.len().max(1) as f64;
                Metric::Detection(DetectionScore {
                    precision: sum[0] / n,
                    recall: sum[1] / n,
                    f1: sum[2] / n,
                })
            }
        })
    }

    pub fn majority_baseline(&self) -> Result<f64> {
        let golds: Vec<&str> = self.lines.iter().map(|l| l.1.as_str()).collect();
        Ok(majority_answer(&golds)?.1)
    }

    pub fn row(&self) -> Result<ReportRow> {
        Ok(ReportRow {
            config: self.config.clone(),
            seed: self.seed,
            dataset: self.dataset.clone(),
            metric: self.score()?,
            checkpoint: self.checkpoint.clone(),
        })
    }

    /// Header comment lines carry the metadata; each record is
    /// `id<TAB>gold<TAB>prediction`.
    pub fn to_tsv(&self) -> String {
        let scoring = match self.scoring {
            Scoring::ExactMatch => "exact_match",
            Scoring::Detection => "detection",
        };
        let mut s = format!(
            "# config={}\n# seed={}\n# dataset={}\n# scoring={scoring}\n# checkpoint={}\n",
            self.config, self.seed, self.dataset, self.checkpoint
        );
        for (id, gold, pred) in &self.lines {
            s.push_str(&format!("{id}\t{gold}\t{pred}\n"));
        }
        s
    }

    pub fn from_tsv(path: &Path, text: &str) -> Result<Self> {
        let mut meta = BTreeMap::new();
        let mut lines = Vec::new();
        for line in text.lines() {
            if let Some(kv) = line.strip_prefix("# ") {
                let (k, v) = kv.split_once('=').ok_or_else(|| AppError::format(path, "bad header line"))?;
                meta.insert(k.to_string(), v.to_string());
                continue;
            }
            let mut parts = line.splitn(3, '\t');
            match (parts.next(), parts.next(), parts.next()) {
                (Some(id), Some(gold), Some(pred)) => lines.push((id.into(), gold.into(), pred.into())),
                _ => return Err(AppError::format(path, format!("bad record line `{line}`"))),
            }
        }
        let get = |k: &str| meta.get(k).cloned().ok_or_else(|| AppError::format(path, format!("missing `{k}`")));
        let scoring = match get("scoring")?.as_str() {
            "exact_match" => Scoring::ExactMatch,
            "detection" => Scoring::Detection,
            other => return Err(AppError::format(path, format!("unknown scoring `{other}`"))),
        };
        Ok(Self {
            config: get("config")?,
            seed: get("seed")?.parse().map_err(|_| AppError::format(path, "bad seed"))?,
            dataset: get("dataset")?,
            scoring,
            checkpoint: get("checkpoint")?,
            lines,
        })
    }
}

/// Everything a protocol run produces.
#[derive(Debug, Clone)]
pub struct ProtocolOutput {
    pub report: MetricReport,
    pub dumps: Vec<PredictionDump>,
    pub wall_clock_secs: f64,
}

impl ProtocolOutput {
    /// `report.json`, `timing.json` and `predictions/*.tsv` under `dir`.
    /// Wall-clock time lives outside the report so reruns reproduce the
    /// report bit for bit.
    pub fn write(&self, dir: &Path) -> Result<()> {
        write_once(&dir.join("report.json"), self.report.to_json().as_bytes())?;
        for d in &self.dumps {
            write_once(&dir.join("predictions").join(d.file_name()), d.to_tsv().as_bytes())?;
        }
        let timing = serde_json::json!({ "wall_clock_secs": self.wall_clock_secs });
        write_once(&dir.join("timing.json"), format!("{timing}\n").as_bytes())
    }
}

/// Recomputes every row and baseline of `report` from the dumps in
/// `dir/predictions`.
pub fn rescore(report: &MetricReport, dir: &Path) -> Result<MetricReport> {
    let pdir = dir.join("predictions");
    let mut out = report.clone();
    out.baselines.clear();
    for row in &mut out.rows {
        let name = format!("{}__seed{}__{}.tsv", row.config, row.seed, row.dataset);
        let path = pdir.join(&name);
        let text = std::fs::read_to_string(&path).map_err(|e| AppError::io(&path, e))?;
        let dump = PredictionDump::from_tsv(&path, &text)?;
        row.metric = dump.score()?;
        row.checkpoint = dump.checkpoint.clone();
        out.baselines
            .insert(format!("{}/{}", row.dataset, row.seed), dump.majority_baseline()?);
    }
    Ok(out)
}
