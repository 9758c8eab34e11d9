use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::time::Duration;

use fedeini::ahe::{keygen, KeyPair, PrivateKey, PrivateKeyDoc, PublicKeyDoc, BENCHMARK_KEY_BITS, DEFAULT_KEY_BITS, DEFAULT_SCALE_BITS};
use fedeini::bench::{
    compare_strategies, ingest_csv, linear_fit, reports_csv, reports_json, run_strategy, subset_sweep, sweep_csv,
    trace_log, vertical_split, write_party_csv, write_text, Dataset, InferenceReport, ModelMeta, Strategy,
    SyntheticCredit, SWEEP_PERCENTS,
};
use fedeini::model::{load_model_file, save_model_file, TreeEnsemble, VerticalPartition, GUEST};
use fedeini::protocol::{
    guest_share, host_share, run_guest, serve_host, tcp_endpoint, Federation, LatencyMode, LinkConfig, Mode,
    ProtocolConfig, TraceRecorder,
};
use fedeini::trainer::{fit_gbdt, TrainConfig};

use crate::error::CliError;
use crate::options::{Role, RunConfig};

const DEFAULT_ROWS: usize = 5000;
const DEFAULT_FEATURES: usize = 10;

fn label(cfg: &RunConfig) -> &str {
    cfg.label.as_deref().unwrap_or("label")
}

fn load_dataset(cfg: &RunConfig) -> Result<Dataset, CliError> {
    let data = match (&cfg.dataset, cfg.seed) {
        (Some(_), Some(_)) => return Err(CliError::Config("--dataset and --seed are mutually exclusive".into())),
        (None, None) => return Err(CliError::Config("give a --dataset path or a --seed for synthetic data".into())),
        (Some(path), None) => ingest_csv(path, label(cfg))?,
        (None, Some(seed)) => {
            let features = cfg.features.unwrap_or(DEFAULT_FEATURES);
            if !(10..=25).contains(&features) {
                return Err(CliError::Config(format!("--features must be 10 to 25, got {features}")));
            }
            SyntheticCredit::new(seed, features).generate(cfg.rows.unwrap_or(DEFAULT_ROWS))
        }
    };
    match cfg.subset_pct.as_slice() {
        [pct] => subset(&data, *pct),
        _ => Ok(data),
    }
}

fn subset(data: &Dataset, pct: f64) -> Result<Dataset, CliError> {
    if !(pct > 0.0 && pct <= 100.0) {
        return Err(CliError::Config(format!("--subset-pct must be in (0, 100], got {pct}")));
    }
    Ok(data.head_percent(pct))
}

/// Partition from flags, falling back to `fallback` (usually the model's).
fn partition(cfg: &RunConfig, features: usize, fallback: Option<VerticalPartition>) -> Result<VerticalPartition, CliError> {
    if cfg.partition.is_none() && cfg.parties.is_none() {
        if let Some(p) = fallback {
            return Ok(p);
        }
    }
    let parties = cfg.parties.unwrap_or(2);
    if parties == 0 {
        return Err(CliError::Config("--parties must be at least 1".into()));
    }
    let spec = match (&cfg.partition, parties) {
        (Some(spec), _) => spec.clone(),
        (None, 1) => format!("guest_first:{features}"),
        (None, _) => format!("guest_first:{}", features.div_ceil(2)),
    };
    Ok(VerticalPartition::parse(&spec, features, parties)?)
}

fn load_model(cfg: &RunConfig) -> Result<(TreeEnsemble, VerticalPartition), CliError> {
    let path = cfg
        .model
        .as_ref()
        .ok_or_else(|| CliError::Config("--model is required".into()))?;
    Ok(load_model_file(path)?)
}

fn load_keys(cfg: &RunConfig, default_bits: u32) -> Result<KeyPair, CliError> {
    match &cfg.key {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| CliError::Other(format!("{}: {e}", path.display())))?;
            let doc: PrivateKeyDoc =
                serde_json::from_str(&text).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
            Ok(PrivateKey::from_document(&doc)?)
        }
        None => Ok(keygen(cfg.key_bits.unwrap_or(default_bits))?),
    }
}

fn protocol_config(cfg: &RunConfig, default_latency_ms: f64) -> Result<ProtocolConfig, CliError> {
    let latency_ms = cfg.latency_ms.unwrap_or(default_latency_ms);
    if !(latency_ms >= 0.0 && latency_ms.is_finite()) {
        return Err(CliError::Config(format!("--latency-ms must be non-negative, got {latency_ms}")));
    }
    let route = cfg
        .route
        .as_ref()
        .map(|r| {
            r.split(',')
                .map(|p| p.trim().parse().map_err(|_| CliError::Config(format!("bad route entry `{p}`"))))
                .collect::<Result<Vec<usize>, _>>()
        })
        .transpose()?;
    Ok(ProtocolConfig {
        link: LinkConfig {
            latency: Duration::from_secs_f64(latency_ms / 1e3),
            mode: if cfg.sleep { LatencyMode::Sleep } else { LatencyMode::Simulated },
        },
        max_batch: cfg.batch.unwrap_or(1000),
        per_tree: cfg.per_tree,
        capture_frames: false,
        route,
        ..Default::default()
    })
}

fn out_path(cfg: &RunConfig, default: &str) -> PathBuf {
    cfg.out.clone().unwrap_or_else(|| PathBuf::from(default))
}

fn out_dir(cfg: &RunConfig, default: &str) -> Result<PathBuf, CliError> {
    let dir = out_path(cfg, default);
    std::fs::create_dir_all(&dir).map_err(|e| CliError::Other(format!("{}: {e}", dir.display())))?;
    Ok(dir)
}

pub fn train(cfg: &RunConfig) -> Result<(), CliError> {
    let data = load_dataset(cfg)?;
    let defaults = TrainConfig::default();
    let config = TrainConfig {
        trees: cfg.trees.unwrap_or(defaults.trees),
        max_depth: cfg.depth.unwrap_or(defaults.max_depth),
        lambda: cfg.lambda.unwrap_or(defaults.lambda),
        gamma: cfg.gamma.unwrap_or(defaults.gamma),
        shrinkage: cfg.shrinkage.unwrap_or(defaults.shrinkage),
        min_child_samples: cfg.min_child.unwrap_or(defaults.min_child_samples),
    };
    config.validate()?;
    let partition = partition(cfg, data.cols(), None)?;
    let trained = fit_gbdt(&data, &config)?;
    let path = out_path(cfg, "model.json");
    save_model_file(&path, &trained.ensemble, &partition)?;
    let curve = &trained.train_logloss;
    println!(
        "trained K={} depth={} on {} rows; train logloss {:.6} -> {:.6}; wrote {}",
        trained.ensemble.tree_count(),
        trained.ensemble.depth(),
        data.rows(),
        curve[0],
        curve[curve.len() - 1],
        path.display()
    );
    Ok(())
}

pub fn split(cfg: &RunConfig) -> Result<(), CliError> {
    let data = load_dataset(cfg)?;
    let fallback = match &cfg.model {
        Some(_) => Some(load_model(cfg)?.1),
        None => None,
    };
    let partition = partition(cfg, data.cols(), fallback)?;
    let dir = out_dir(cfg, "split")?;
    for table in vertical_split(&data, &partition)? {
        let path = dir.join(format!("party_{}.csv", table.party()));
        write_party_csv(&table, label(cfg), &path)?;
        println!(
            "party {}: {} columns [{}] -> {}",
            table.party(),
            table.feature_ids().len(),
            table.feature_names().join(", "),
            path.display()
        );
    }
    Ok(())
}

pub fn keygen_cmd(cfg: &RunConfig) -> Result<(), CliError> {
    let keys = keygen(cfg.key_bits.unwrap_or(DEFAULT_KEY_BITS))?;
    let path = out_path(cfg, "key.json");
    let public = path.with_extension("pub.json");
    let private_doc = serde_json::to_string_pretty(&keys.private.to_document()).expect("key documents serialize");
    let public_doc = serde_json::to_string_pretty(&PublicKeyDoc::from(keys.public.clone())).expect("key documents serialize");
    write_text(&path, &private_doc)?;
    write_text(&public, &public_doc)?;
    println!(
        "{}-bit key {} -> {} (public part {})",
        keys.public.key_bits(),
        keys.public.key_id(),
        path.display(),
        public.display()
    );
    Ok(())
}

fn parse_strategies(cfg: &RunConfig, default: &str) -> Result<Vec<Strategy>, CliError> {
    cfg.strategy
        .as_deref()
        .unwrap_or(default)
        .split(',')
        .map(|s| s.trim().parse().map_err(CliError::Config))
        .collect()
}

fn write_predictions(path: &Path, report: &InferenceReport) -> Result<(), CliError> {
    let mut text = String::from("sample_id,prediction\n");
    for (id, p) in report.sample_ids.iter().zip(&report.predictions) {
        text.push_str(&format!("{id},{p}\n"));
    }
    Ok(write_text(path, &text)?)
}

fn summary(r: &InferenceReport) -> String {
    let metric = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{v:.6}"));
    format!(
        "{}: auc {} ks {} msgs {} bytes {} ms {:.3}",
        r.strategy,
        metric(r.auc),
        metric(r.ks),
        r.message_count,
        r.total_bytes,
        r.wall_ms
    )
}

fn write_infer_outputs(cfg: &RunConfig, report: &InferenceReport) -> Result<(), CliError> {
    let dir = out_dir(cfg, "infer-out")?;
    write_predictions(&dir.join("predictions.csv"), report)?;
    write_text(&dir.join("report.json"), &reports_json(std::slice::from_ref(report)))?;
    if cfg.trace {
        write_text(&dir.join("trace.log"), &trace_log(std::slice::from_ref(report)))?;
    }
    println!("{}", summary(report));
    println!("wrote {}", dir.display());
    Ok(())
}

pub fn infer(cfg: &RunConfig) -> Result<(), CliError> {
    let (model, doc_partition) = load_model(cfg)?;
    let data = load_dataset(cfg)?;
    let partition = partition(cfg, data.cols(), Some(doc_partition))?;
    let strategy = match parse_strategies(cfg, "fedeini")?.as_slice() {
        [s] => *s,
        _ => return Err(CliError::Config("infer runs exactly one --strategy".into())),
    };
    let config = protocol_config(cfg, 0.0)?;
    let scale = cfg.scale.unwrap_or(DEFAULT_SCALE_BITS);
    match cfg.role {
        None => {
            let keys = load_keys(cfg, DEFAULT_KEY_BITS)?;
            let fed = Federation::new(&model, &partition, &data, keys, scale)?;
            let report = run_strategy(&fed, &model, &data, strategy, &config)?;
            write_infer_outputs(cfg, &report)
        }
        Some(Role::Host) => {
            let party = cfg
                .party
                .ok_or_else(|| CliError::Config("--role host needs --party".into()))?;
            let host = host_share(&model, &partition, &data, party)?;
            let ep = tcp_party(cfg, party, partition.party_count(), config.link.latency)?;
            log::info!("party {party} serving");
            serve_host(&host, ep)?;
            println!("party {party}: guest closed the session");
            Ok(())
        }
        Some(Role::Guest) => {
            if cfg.party.is_some_and(|p| p != GUEST) {
                return Err(CliError::Config("the guest is party 0".into()));
            }
            let parties = partition.party_count();
            let mode = match (strategy, parties) {
                (Strategy::Plaintext, _) => return Err(CliError::Config("plaintext runs in-process only".into())),
                (Strategy::Multi, _) => Mode::Baseline,
                (Strategy::Chain, _) => Mode::Chain,
                (Strategy::FedEini, 2) if config.per_tree => Mode::PerTree,
                (Strategy::FedEini, 2) => Mode::Batched,
                (Strategy::FedEini, _) => Mode::Chain,
            };
            if mode == Mode::Chain && parties < 3 {
                return Err(CliError::Config(format!("chain mode needs at least 3 parties, got {parties}")));
            }
            let keys = load_keys(cfg, DEFAULT_KEY_BITS)?;
            let key_bits = keys.public.key_bits();
            let guest = guest_share(&model, &partition, &data, keys, scale)?;
            let recorder = TraceRecorder::new(false);
            let ep = tcp_party_with(cfg, GUEST, parties, config.link.latency, &recorder)?;
            let mut outcome = run_guest(&guest, ep, mode, data.sample_ids(), &config)?;
            // only the guest's own sends are visible from this process
            outcome.trace = recorder.take();
            let meta = ModelMeta::new(&model, parties, key_bits, scale);
            let report = InferenceReport::from_outcome(strategy, outcome, &data, meta, &config)?;
            write_infer_outputs(cfg, &report)
        }
    }
}

fn tcp_party(cfg: &RunConfig, party: usize, parties: usize, latency: Duration) -> Result<fedeini::protocol::Endpoint, CliError> {
    tcp_party_with(cfg, party, parties, latency, &TraceRecorder::new(false))
}

fn tcp_party_with(
    cfg: &RunConfig,
    party: usize,
    parties: usize,
    latency: Duration,
    recorder: &TraceRecorder,
) -> Result<fedeini::protocol::Endpoint, CliError> {
    if cfg.peers.len() != parties {
        return Err(CliError::Config(format!(
            "--peers lists {} addresses for {parties} parties",
            cfg.peers.len()
        )));
    }
    let listen = cfg.listen.unwrap_or(cfg.peers[party]);
    let listener = TcpListener::bind(listen).map_err(|e| CliError::Other(format!("bind {listen}: {e}")))?;
    Ok(tcp_endpoint(party, listener, cfg.peers.clone(), latency, recorder))
}

pub fn bench(cfg: &RunConfig) -> Result<(), CliError> {
    let (model, doc_partition) = load_model(cfg)?;
    let sweep_points: Vec<f64> = if cfg.sweep {
        SWEEP_PERCENTS.to_vec()
    } else if cfg.subset_pct.len() > 1 {
        cfg.subset_pct.clone()
    } else {
        Vec::new()
    };
    let data = load_dataset(cfg)?;
    let partition = partition(cfg, data.cols(), Some(doc_partition))?;
    let strategies = parse_strategies(cfg, "fedeini,multi,plaintext")?;
    let config = protocol_config(cfg, 10.0)?;
    let scale = cfg.scale.unwrap_or(DEFAULT_SCALE_BITS);
    let keys = load_keys(cfg, BENCHMARK_KEY_BITS)?;
    let dir = out_dir(cfg, "bench-out")?;

    let reports = compare_strategies(&model, &partition, &data, &keys, scale, &strategies, &config)?;
    let table = reports_csv(&reports);
    write_text(&dir.join("summary.csv"), &table)?;
    write_text(&dir.join("report.json"), &reports_json(&reports))?;
    if cfg.trace {
        write_text(&dir.join("trace.log"), &trace_log(&reports))?;
    }
    print!("{table}");

    if !sweep_points.is_empty() {
        for &p in &sweep_points {
            subset(&data, p)?;
        }
        let strategy = strategies
            .iter()
            .copied()
            .find(|s| *s != Strategy::Plaintext)
            .unwrap_or(Strategy::FedEini);
        let fed = Federation::new(&model, &partition, &data, keys, scale)?;
        let points = subset_sweep(&fed, &model, &data, strategy, &sweep_points, &config)?;
        let csv = sweep_csv(&points);
        write_text(&dir.join("sweep.csv"), &csv)?;
        println!("{strategy} sweep:");
        print!("{csv}");
        let xs: Vec<f64> = points.iter().map(|p| p.rows as f64).collect();
        let ys: Vec<f64> = points.iter().map(|p| p.wall_ms).collect();
        if let Some(fit) = linear_fit(&xs, &ys) {
            println!(
                "linear fit: {:.4} ms/row + {:.1} ms, R^2 {:.5}",
                fit.slope, fit.intercept, fit.r_squared
            );
        }
    }
    println!("wrote {}", dir.display());
    Ok(())
}
