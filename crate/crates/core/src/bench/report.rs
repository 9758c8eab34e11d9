use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{auc, ks, BenchError, Dataset};
use crate::ahe::KeyPair;
use crate::engine::plaintext_predict;
use crate::model::{TreeEnsemble, VerticalPartition};
use crate::protocol::{
    run_chain, run_fed_eini, run_multi_interactive_baseline, Federation, LatencyMode, ProtocolConfig, ProtocolError,
    ProtocolTrace, RunOutcome,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Two-stage inference; chain mode when there are three or more parties.
    #[serde(rename = "fedeini")]
    FedEini,
    /// Two-stage inference forced through the multi-host chain.
    Chain,
    /// Node-by-node multi-interactive baseline.
    Multi,
    /// Centralized traversal of the whole model.
    Plaintext,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [Strategy::FedEini, Strategy::Chain, Strategy::Multi, Strategy::Plaintext];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::FedEini => "fedeini",
            Strategy::Chain => "chain",
            Strategy::Multi => "multi",
            Strategy::Plaintext => "plaintext",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "fedeini" | "fed_eini" | "fed-eini" => Ok(Strategy::FedEini),
            "chain" => Ok(Strategy::Chain),
            "multi" | "baseline" => Ok(Strategy::Multi),
            "plaintext" | "plain" => Ok(Strategy::Plaintext),
            other => Err(format!("unknown strategy `{other}` (fedeini, chain, multi, plaintext)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub trees: usize,
    pub max_depth: usize,
    pub parties: usize,
    pub key_bits: u32,
    pub scale_bits: u32,
}

impl ModelMeta {
    pub fn new(ensemble: &TreeEnsemble, parties: usize, key_bits: u32, scale_bits: u32) -> Self {
        ModelMeta {
            trees: ensemble.tree_count(),
            max_depth: ensemble.depth(),
            parties,
            key_bits,
            scale_bits,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub latency_ms: f64,
    pub mode: String,
}

#[derive(Clone, Debug, Serialize)]
pub struct InferenceReport {
    pub strategy: Strategy,
    pub sample_ids: Vec<u64>,
    pub predictions: Vec<f64>,
    /// None when the labels hold a single class.
    pub auc: Option<f64>,
    pub ks: Option<f64>,
    /// Every frame sent, session setup included.
    pub message_count: usize,
    pub total_bytes: usize,
    pub wall_ms: f64,
    pub latency: LatencyReport,
    pub model: ModelMeta,
    #[serde(skip)]
    pub trace: ProtocolTrace,
}

impl InferenceReport {
    /// Messages exchanged after session setup.
    pub fn protocol_messages(&self) -> usize {
        self.trace.protocol_messages()
    }
}

/// Evaluates the listed strategies on `data` with one shared key. Key
/// generation and party setup happen before any timer starts.
pub fn compare_strategies(
    ensemble: &TreeEnsemble,
    partition: &VerticalPartition,
    data: &Dataset,
    keys: &KeyPair,
    scale_bits: u32,
    strategies: &[Strategy],
    config: &ProtocolConfig,
) -> Result<Vec<InferenceReport>, ProtocolError> {
    if strategies.len() < 2 {
        return Err(ProtocolError::Config("comparison needs at least two strategies".into()));
    }
    let fed = Federation::new(ensemble, partition, data, keys.clone(), scale_bits)?;
    strategies
        .iter()
        .map(|&s| run_strategy(&fed, ensemble, data, s, config))
        .collect()
}

/// Runs one strategy over every row of `data` and scores it against the labels.
pub fn run_strategy(
    fed: &Federation,
    ensemble: &TreeEnsemble,
    data: &Dataset,
    strategy: Strategy,
    config: &ProtocolConfig,
) -> Result<InferenceReport, ProtocolError> {
    let ids = data.sample_ids();
    let outcome = match strategy {
        Strategy::FedEini => run_fed_eini(fed, ids, config)?,
        Strategy::Chain => run_chain(fed, ids, config)?,
        Strategy::Multi => run_multi_interactive_baseline(fed, ids, config)?,
        Strategy::Plaintext => plaintext_outcome(ensemble, data)?,
    };
    let meta = ModelMeta::new(
        ensemble,
        fed.party_count(),
        fed.guest.public_key().key_bits(),
        fed.guest.codec().scale_bits(),
    );
    InferenceReport::from_outcome(strategy, outcome, data, meta, config)
}

fn plaintext_outcome(ensemble: &TreeEnsemble, data: &Dataset) -> Result<RunOutcome, ProtocolError> {
    let start = Instant::now();
    let predictions = (0..data.rows())
        .map(|i| plaintext_predict(ensemble, data.row(i)))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(RunOutcome {
        mode: None,
        sample_ids: data.sample_ids().to_vec(),
        margins: Vec::new(),
        predictions,
        trace: ProtocolTrace::default(),
        elapsed: start.elapsed(),
    })
}

impl InferenceReport {
    /// Scores a finished run against the labels of `data`.
    pub fn from_outcome(
        strategy: Strategy,
        outcome: RunOutcome,
        data: &Dataset,
        model: ModelMeta,
        config: &ProtocolConfig,
    ) -> Result<InferenceReport, ProtocolError> {
        let labels = data.labels();
        let metric = |r: Result<f64, BenchError>| match r {
            Ok(v) => Ok(Some(v)),
            Err(BenchError::SingleClass) => Ok(None),
            Err(e) => Err(e),
        };
        Ok(InferenceReport {
            strategy,
            auc: metric(auc(labels, &outcome.predictions))?,
            ks: metric(ks(labels, &outcome.predictions))?,
            message_count: outcome.trace.message_count(),
            total_bytes: outcome.trace.total_bytes(),
            wall_ms: outcome.elapsed.as_secs_f64() * 1e3,
            latency: LatencyReport {
                latency_ms: config.link.latency.as_secs_f64() * 1e3,
                mode: match config.link.mode {
                    LatencyMode::Simulated => "simulated",
                    LatencyMode::Sleep => "sleep",
                }
                .into(),
            },
            model,
            sample_ids: outcome.sample_ids,
            predictions: outcome.predictions,
            trace: outcome.trace,
        })
    }
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "prediction vectors differ in length");
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Summary table with columns strategy, auc, ks, msgs, bytes, ms.
pub fn reports_csv(reports: &[InferenceReport]) -> String {
    let mut out = String::from("strategy,auc,ks,msgs,bytes,ms\n");
    let cell = |v: Option<f64>, digits: usize| v.map_or(String::new(), |v| format!("{v:.digits$}"));
    for r in reports {
        out.push_str(&format!(
            "{},{},{},{},{},{:.3}\n",
            r.strategy,
            cell(r.auc, 6),
            cell(r.ks, 4),
            r.message_count,
            r.total_bytes,
            r.wall_ms
        ));
    }
    out
}

pub fn reports_json(reports: &[InferenceReport]) -> String {
    serde_json::to_string_pretty(reports).expect("reports serialize")
}

/// One line per message of every report, prefixed with the strategy.
pub fn trace_log(reports: &[InferenceReport]) -> String {
    let mut out = String::new();
    for r in reports {
        for line in r.trace.log_lines() {
            out.push_str(&format!("{} {line}\n", r.strategy));
        }
    }
    out
}

pub fn write_text(path: &Path, text: &str) -> Result<(), BenchError> {
    std::fs::write(path, text).map_err(|e| BenchError::Io(format!("{}: {e}", path.display())))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepPoint {
    pub percent: f64,
    pub rows: usize,
    pub wall_ms: f64,
    pub message_count: usize,
    pub total_bytes: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

/// The subset sizes used for the scaling sweep.
pub const SWEEP_PERCENTS: [f64; 5] = [10.0, 20.0, 40.0, 80.0, 100.0];

/// Times `strategy` on the leading `percent`% of `data` for each entry of
/// `percents`.
pub fn subset_sweep(
    fed: &Federation,
    ensemble: &TreeEnsemble,
    data: &Dataset,
    strategy: Strategy,
    percents: &[f64],
    config: &ProtocolConfig,
) -> Result<Vec<SweepPoint>, ProtocolError> {
    percents
        .iter()
        .map(|&pct| {
            let subset = data.head_percent(pct);
            let r = run_strategy(fed, ensemble, &subset, strategy, config)?;
            Ok(SweepPoint {
                percent: pct,
                rows: subset.rows(),
                wall_ms: r.wall_ms,
                message_count: r.message_count,
                total_bytes: r.total_bytes,
            })
        })
        .collect()
}

/// Ordinary least squares of `ys` on `xs`.
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> Option<LinearFit> {
    let n = xs.len();
    if n < 2 || n != ys.len() {
        return None;
    }
    let mx = xs.iter().sum::<f64>() / n as f64;
    let my = ys.iter().sum::<f64>() / n as f64;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let sse: f64 = xs
        .iter()
        .zip(ys)
        .map(|(x, y)| (y - intercept - slope * x).powi(2))
        .sum();
    let r_squared = if syy == 0.0 { 1.0 } else { 1.0 - sse / syy };
    Some(LinearFit {
        slope,
        intercept,
        r_squared,
    })
}

pub fn sweep_csv(points: &[SweepPoint]) -> String {
    let mut out = String::from("percent,rows,msgs,bytes,ms\n");
    for p in points {
        out.push_str(&format!(
            "{},{},{},{},{:.3}\n",
            p.percent, p.rows, p.message_count, p.total_bytes, p.wall_ms
        ));
    }
    out
}
