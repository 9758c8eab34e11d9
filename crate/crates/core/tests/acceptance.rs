//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.
//!
//! `cargo test -p fedeini --test acceptance` runs all eight; pass criterion
//! numbers to run a subset, e.g. `cargo test -p fedeini --test acceptance -- 2 6`.

use std::collections::{HashMap, HashSet};
use std::time::{Duration, Instant};

use fedeini::ahe::{keygen_with_rng, Encryptor, FixedPointCodec, KeyPair, BENCHMARK_KEY_BITS, DEFAULT_SCALE_BITS};
use fedeini::bench::{
    compare_strategies, linear_fit, max_abs_diff, run_strategy, subset_sweep, Dataset, Strategy, SyntheticCredit,
    SWEEP_PERCENTS,
};
use fedeini::engine::{candidate_set, intersect_candidates};
use fedeini::fixtures::{random_ensemble, random_sample};
use fedeini::model::{partition_model, NodeKind, TreeEnsemble, VerticalPartition, GUEST};
use fedeini::protocol::wire::{decode_frame, Message};
use fedeini::protocol::{
    run_chain, run_fed_eini, run_multi_interactive_baseline, Federation, LatencyMode, LinkConfig, ProtocolConfig,
    RunOutcome, Tag,
};
use fedeini::trainer::{best_split, fit_gbdt, grad_hess_logloss, logloss, split_gain, GradHess, TrainConfig};
use num_bigint::{BigUint, RandBigInt};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEED: u64 = 20_240_601;
const FEATURES: usize = 10;
const ROWS: usize = 5000;

struct Context {
    test: Dataset,
    model: TreeEnsemble,
    train_logloss: Vec<f64>,
    keys: KeyPair,
}

impl Context {
    fn build() -> Context {
        let t = Instant::now();
        let all = SyntheticCredit::new(SEED, FEATURES).generate(2 * ROWS);
        let train = all.slice(0, ROWS);
        let test = all.slice(ROWS, 2 * ROWS);
        let config = TrainConfig {
            trees: 100,
            max_depth: 4,
            shrinkage: 0.1,
            ..Default::default()
        };
        let trained = fit_gbdt(&train, &config).expect("training succeeds");
        let keys = keygen_with_rng(BENCHMARK_KEY_BITS, &mut ChaCha8Rng::seed_from_u64(SEED)).expect("keygen");
        println!(
            "setup: {} train / {} test rows, d={FEATURES}, positive rate {:.3}, K={} depth={}, {}-bit key ({:.1}s)",
            train.rows(),
            test.rows(),
            test.positive_rate(),
            trained.ensemble.tree_count(),
            trained.ensemble.depth(),
            BENCHMARK_KEY_BITS,
            t.elapsed().as_secs_f64()
        );
        Context {
            test,
            model: trained.ensemble,
            train_logloss: trained.train_logloss,
            keys,
        }
    }

    fn federation(&self, data: &Dataset, partition: &VerticalPartition) -> Federation {
        Federation::new(&self.model, partition, data, self.keys.clone(), DEFAULT_SCALE_BITS).expect("federation")
    }
}

type Verdict = Result<String, String>;

fn check(ok: bool, detail: String) -> Verdict {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn latency_10ms() -> ProtocolConfig {
    ProtocolConfig {
        link: LinkConfig {
            latency: Duration::from_millis(10),
            mode: LatencyMode::Simulated,
        },
        ..Default::default()
    }
}

fn losslessness(ctx: &Context) -> Verdict {
    let start = Instant::now();
    let partition = VerticalPartition::guest_first(FEATURES, 5, 2).unwrap();
    let reports = compare_strategies(
        &ctx.model,
        &partition,
        &ctx.test,
        &ctx.keys,
        DEFAULT_SCALE_BITS,
        &[Strategy::FedEini, Strategy::Multi, Strategy::Plaintext],
        &latency_10ms(),
    )
    .map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let (fe, multi, plain) = (&reports[0], &reports[1], &reports[2]);
    let (fe_auc, multi_auc) = (fe.auc.ok_or("single-class test set")?, multi.auc.ok_or("single-class test set")?);
    let (fe_ks, multi_ks) = (fe.ks.ok_or("single-class test set")?, multi.ks.ok_or("single-class test set")?);
    let same_auc = format!("{fe_auc:.6}") == format!("{multi_auc:.6}");
    let same_ks = format!("{fe_ks:.6}") == format!("{multi_ks:.6}");
    let diff = max_abs_diff(&fe.predictions, &plain.predictions);
    let tolerance = ctx.model.tree_count() as f64 / 2f64.powi(DEFAULT_SCALE_BITS as i32);
    check(
        same_auc && same_ks && diff <= tolerance && elapsed < Duration::from_secs(300),
        format!(
            "AUC {:.6}/{:.6} KS {:.6}/{:.6} (fed_eini/baseline), max |fed_eini - plaintext| {diff:.2e} <= {tolerance:.2e}, {:.1}s < 300s",
            fe_auc,
            multi_auc,
            fe_ks,
            multi_ks,
            elapsed.as_secs_f64()
        ),
    )
}

fn unique_intersection() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED ^ 2);
    let d = 8;
    let mut failures = 0;
    let mut per_parties = [0usize; 5];
    for _ in 0..10_000 {
        let depth = rng.gen_range(1..=6);
        let ensemble = random_ensemble(&mut rng, 1, depth, d);
        let parties = rng.gen_range(2..=4);
        per_parties[parties] += 1;
        let partition = VerticalPartition::random(d, parties, &mut rng);
        let x = random_sample(&mut rng, d);
        let subs = partition_model(&ensemble, &partition).expect("partition");
        let sets: Vec<_> = subs
            .iter()
            .map(|s| candidate_set(&s.trees[0], s.party, |f| x.get(f).copied()).expect("candidates"))
            .collect();
        let meet = intersect_candidates(&sets);
        let (leaf, _) = ensemble.trees()[0].predict_leaf(|f| x.get(f).copied()).expect("traversal");
        if meet != [leaf] {
            failures += 1;
        }
    }
    check(
        failures == 0,
        format!(
            "10000 triples ({}/{}/{} with 2/3/4 parties), {failures} failures",
            per_parties[2], per_parties[3], per_parties[4]
        ),
    )
}

/// Host-owned splits on each sample's realized paths, keyed by sample id.
fn host_splits_on_paths(model: &TreeEnsemble, partition: &VerticalPartition, data: &Dataset) -> HashMap<u64, usize> {
    (0..data.rows())
        .map(|i| {
            let x = data.row(i);
            let mut count = 0;
            for tree in model.trees() {
                let mut node = tree.root();
                while let NodeKind::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } = tree.node(node).kind
                {
                    if partition.owner(feature) != Some(GUEST) {
                        count += 1;
                    }
                    node = if x[feature] < threshold { left } else { right };
                }
            }
            (data.sample_ids()[i], count)
        })
        .collect()
}

fn round_counts(ctx: &Context) -> Verdict {
    let data = ctx.test.slice(0, 50);
    let capture = ProtocolConfig {
        capture_frames: true,
        max_batch: 20,
        ..Default::default()
    };
    let mut notes = Vec::new();
    let mut ok = true;

    // Guest owns no columns, so every internal node belongs to a host.
    let partition = VerticalPartition::guest_first(FEATURES, 0, 2).unwrap();
    let fed = ctx.federation(&data, &partition);
    let base = run_multi_interactive_baseline(&fed, data.sample_ids(), &capture).map_err(|e| e.to_string())?;
    let expected = host_splits_on_paths(&ctx.model, &partition, &data);
    let mut observed: HashMap<u64, usize> = HashMap::new();
    for (event, frame) in base.trace.events.iter().zip(&base.trace.frames) {
        if event.tag == Tag::SplitQuery {
            if let Message::SplitQuery(q) = decode_frame(frame.clone()).map_err(|e| e.to_string())?.message {
                *observed.entry(q.sample_id).or_default() += 1;
            }
        }
    }
    let bound = ctx.model.depth() * ctx.model.tree_count();
    let per_sample_ok = expected
        .iter()
        .all(|(id, &n)| observed.get(id).copied().unwrap_or(0) == n && n >= 1 && n <= bound);
    let answers_ok = base.trace.count(Tag::SplitAnswer) == base.trace.count(Tag::SplitQuery);
    ok &= per_sample_ok && answers_ok;
    let (lo, hi) = (expected.values().min().unwrap(), expected.values().max().unwrap());
    notes.push(format!("baseline round trips per sample {lo}..{hi} match path enumeration, <= l*K = {bound}"));

    let fe = run_fed_eini(&fed, data.sample_ids(), &capture).map_err(|e| e.to_string())?;
    let batches = data.rows().div_ceil(capture.max_batch);
    ok &= fe.trace.protocol_messages() == 2 * batches
        && fe.trace.count(Tag::GuestVectors) == batches
        && fe.trace.count(Tag::HostAggregate) == batches;
    notes.push(format!(
        "M=2: {} messages for {batches} batches",
        fe.trace.protocol_messages()
    ));

    for parties in [3, 4] {
        let partition = VerticalPartition::guest_first(FEATURES, 0, parties).unwrap();
        let small = data.slice(0, 20);
        let fed = ctx.federation(&small, &partition);
        let out = run_chain(&fed, small.sample_ids(), &ProtocolConfig::default()).map_err(|e| e.to_string())?;
        ok &= out.trace.protocol_messages() == parties;
        notes.push(format!("chain M={parties}: {} messages", out.trace.protocol_messages()));
    }
    check(ok, notes.join("; "))
}

fn speedup(ctx: &Context) -> Verdict {
    let data = ctx.test.slice(0, 1000);
    let partition = VerticalPartition::guest_first(FEATURES, 5, 2).unwrap();
    let fed = ctx.federation(&data, &partition);
    let config = latency_10ms();
    let fe = run_strategy(&fed, &ctx.model, &data, Strategy::FedEini, &config).map_err(|e| e.to_string())?;
    let multi = run_strategy(&fed, &ctx.model, &data, Strategy::Multi, &config).map_err(|e| e.to_string())?;
    let ratio = fe.wall_ms / multi.wall_ms;
    check(
        ratio <= 0.5,
        format!(
            "fed_eini {:.0} ms ({} msgs) vs baseline {:.0} ms ({} msgs), ratio {ratio:.4} <= 0.5",
            fe.wall_ms, fe.message_count, multi.wall_ms, multi.message_count
        ),
    )
}

fn linear_scaling(ctx: &Context) -> Verdict {
    let partition = VerticalPartition::guest_first(FEATURES, 5, 2).unwrap();
    let fed = ctx.federation(&ctx.test, &partition);
    let points = subset_sweep(&fed, &ctx.model, &ctx.test, Strategy::FedEini, &SWEEP_PERCENTS, &latency_10ms())
        .map_err(|e| e.to_string())?;
    let xs: Vec<f64> = points.iter().map(|p| p.rows as f64).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.wall_ms).collect();
    let fit = linear_fit(&xs, &ys).ok_or("degenerate sweep")?;
    let table: Vec<String> = points.iter().map(|p| format!("{}:{:.0}ms", p.rows, p.wall_ms)).collect();
    check(
        fit.r_squared >= 0.99,
        format!("R^2 {:.5} >= 0.99 over rows {}", fit.r_squared, table.join(" ")),
    )
}

fn crypto_suite(ctx: &Context) -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED ^ 6);
    let pk = &ctx.keys.public;
    let sk = &ctx.keys.private;
    let n = pk.n().clone();
    let enc = Encryptor::with_rng(pk, &mut rng);
    let mut round_trip_failures = 0;
    for _ in 0..1000 {
        let (a, b, k) = (rng.gen_biguint_below(&n), rng.gen_biguint_below(&n), rng.gen_biguint_below(&n));
        let (ca, cb) = (enc.encrypt(&a).unwrap(), pk.encrypt_with_rng(&b, &mut rng).unwrap());
        let sum = sk.decrypt(&pk.add(&ca, &cb).unwrap()).unwrap();
        let prod = sk.decrypt(&pk.scalar_mul(&ca, &k).unwrap()).unwrap();
        if sum != (&a + &b) % &n || prod != (&a * &k) % &n {
            round_trip_failures += 1;
        }
    }

    let m = BigUint::from(42u8);
    let distinct: HashSet<BigUint> = (0..100).map(|_| enc.encrypt(&m).unwrap().value().clone()).collect();

    let c = enc.encrypt(&m).unwrap();
    let r = enc.rerandomize(&c).unwrap();
    let rerandomize_ok = sk.decrypt(&r).unwrap() == m && r.value() != c.value();

    let codec = FixedPointCodec::new(pk, DEFAULT_SCALE_BITS);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let x: f64 = rng.gen_range(-1000.0..1000.0);
        let back = codec.decode(&sk.decrypt(&enc.encrypt(&codec.encode(x).unwrap()).unwrap()).unwrap());
        worst = worst.max((back - x).abs());
    }
    let limit = 2f64.powi(-32);
    check(
        round_trip_failures == 0 && distinct.len() == 100 && rerandomize_ok && worst <= limit,
        format!(
            "{round_trip_failures}/1000 add/scalar-mul failures, {}/100 distinct encryptions, rerandomize ok={rerandomize_ok}, fixed-point error {worst:.2e} <= {limit:.2e}",
            distinct.len()
        ),
    )
}

/// From-scratch enumeration of every feature and midpoint threshold.
fn enumerate_best(rows: &[Vec<f64>], g: &[f64], h: &[f64], lambda: f64, gamma: f64) -> Option<(usize, f64, f64)> {
    let score = |gs: f64, hs: f64| gs * gs / (hs + lambda);
    let (gt, ht) = (g.iter().sum::<f64>(), h.iter().sum::<f64>());
    let mut best: Option<(usize, f64, f64)> = None;
    for f in 0..rows[0].len() {
        let mut vals: Vec<f64> = rows.iter().map(|r| r[f]).collect();
        vals.sort_by(f64::total_cmp);
        vals.dedup();
        for w in vals.windows(2) {
            let t = (w[0] + w[1]) / 2.0;
            let (mut gl, mut hl) = (0.0, 0.0);
            for (i, r) in rows.iter().enumerate() {
                if r[f] < t {
                    gl += g[i];
                    hl += h[i];
                }
            }
            let gain = 0.5 * (score(gl, hl) + score(gt - gl, ht - hl) - score(gt, ht)) - gamma;
            if best.is_none_or(|b| gain > b.2) {
                best = Some((f, t, gain));
            }
        }
    }
    best
}

fn trainer_suite(ctx: &Context) -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED ^ 7);
    let mut split_failures = 0;
    let instances = 2000;
    for _ in 0..instances {
        let n = rng.gen_range(2..=64);
        let d = rng.gen_range(1..=4);
        // dyadic values keep every partial sum exact
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..d).map(|_| rng.gen_range(0..8) as f64 / 4.0).collect())
            .collect();
        let g: Vec<f64> = (0..n).map(|_| rng.gen_range(-8..=8) as f64 / 8.0).collect();
        let h: Vec<f64> = (0..n).map(|_| rng.gen_range(1..=8) as f64 / 8.0).collect();
        let lambda = [0.0, 0.5, 1.0][rng.gen_range(0..3)];
        let gamma = [0.0, 0.25][rng.gen_range(0..2)];
        let names = (0..d).map(|f| format!("x{f}")).collect();
        let data = Dataset::new(names, rows.concat(), vec![0.0; n], None).unwrap();
        let gh = GradHess {
            grad: g.clone(),
            hess: h.clone(),
        };
        let config = TrainConfig {
            lambda,
            gamma,
            min_child_samples: 1,
            ..Default::default()
        };
        let idx: Vec<usize> = (0..n).collect();
        let got = best_split(&data, &idx, &gh, &config);
        let want = enumerate_best(&rows, &g, &h, lambda, gamma);
        let agree = match (&got, want) {
            (None, None) => true,
            (Some(c), Some((f, t, gain))) => {
                let direct = split_gain(&idx, &c.left, &c.right, &gh, lambda, gamma).unwrap();
                c.feature == f && c.threshold == t && c.gain == gain && direct == gain
            }
            _ => false,
        };
        if !agree {
            split_failures += 1;
        }
    }

    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let y = rng.gen_range(0..2) as f64;
        let m: f64 = rng.gen_range(-8.0..8.0);
        let eps = 1e-4;
        let loss = |z: f64| logloss(&[y], &[z]).unwrap();
        let gh = grad_hess_logloss(&[y], &[m]).unwrap();
        let g_fd = (loss(m + eps) - loss(m - eps)) / (2.0 * eps);
        let h_fd = (grad_hess_logloss(&[y], &[m + eps]).unwrap().grad[0]
            - grad_hess_logloss(&[y], &[m - eps]).unwrap().grad[0])
            / (2.0 * eps);
        worst = worst.max((gh.grad[0] - g_fd).abs()).max((gh.hess[0] - h_fd).abs());
    }

    let curve = &ctx.train_logloss;
    let rises = curve.windows(2).filter(|w| w[1] > w[0]).count();
    check(
        split_failures == 0 && worst <= 1e-6 && rises == 0 && curve.len() == 101,
        format!(
            "{split_failures}/{instances} best_split mismatches vs enumeration, max finite-difference error {worst:.2e} <= 1e-6, logloss {:.5} -> {:.5} over {} rounds with {rises} increases",
            curve[0],
            curve[curve.len() - 1],
            curve.len() - 1
        ),
    )
}

fn audit(out: &RunOutcome, samples: usize, secrets: &[Vec<u8>], notes: &mut Vec<String>, label: &str) -> bool {
    let mut ok = true;
    let mut seen: HashSet<Vec<u8>> = HashSet::new();
    let mut repeats = 0;
    let mut to_guest = 0;
    for (event, frame) in out.trace.events.iter().zip(&out.trace.frames) {
        if secrets.iter().any(|s| frame.windows(s.len()).any(|w| w == s.as_slice())) {
            ok = false;
            notes.push(format!("{label}: {} frame contains private-key bytes", event.tag));
        }
        let message = decode_frame(frame.clone()).expect("captured frames decode").message;
        if event.to == GUEST && event.from != GUEST {
            to_guest += 1;
            match &message {
                Message::HostAggregate(a) if a.values.len() == samples => {}
                _ => {
                    ok = false;
                    notes.push(format!("{label}: host sent {} to the guest", event.tag));
                }
            }
        }
        if let Message::GuestVectors(batch) = &message {
            for i in 0..batch.entries.len() {
                if !seen.insert(batch.entries.raw(i).to_vec()) {
                    repeats += 1;
                }
            }
        }
    }
    ok &= repeats == 0 && to_guest == 1;
    notes.push(format!(
        "{label}: {to_guest} host->guest message (aggregate only), {} guest ciphertexts with {repeats} repeats",
        seen.len()
    ));
    ok
}

fn disclosure(ctx: &Context) -> Verdict {
    let data = ctx.test.slice(0, 100);
    let secrets = ctx.keys.private.secret_fingerprints();
    let config = ProtocolConfig {
        capture_frames: true,
        ..Default::default()
    };
    let mut notes = Vec::new();
    let mut ok = true;
    for parties in [2, 3] {
        let partition = VerticalPartition::guest_first(FEATURES, 4, parties).unwrap();
        let fed = ctx.federation(&data, &partition);
        let out = run_fed_eini(&fed, data.sample_ids(), &config).map_err(|e| e.to_string())?;
        ok &= audit(&out, data.rows(), &secrets, &mut notes, &format!("M={parties}"));
    }
    check(ok, notes.join("; "))
}

fn main() {
    let selected: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let wanted = |n: u32| selected.is_empty() || selected.contains(&n);
    let needs_context = (1..=8).filter(|&n| n != 2).any(wanted);
    let ctx = needs_context.then(Context::build);
    let ctx = || ctx.as_ref().expect("context built");

    let criteria: [(u32, &str, &dyn Fn() -> Verdict); 8] = [
        (1, "losslessness", &|| losslessness(ctx())),
        (2, "candidate-set uniqueness", &unique_intersection),
        (3, "round counts", &|| round_counts(ctx())),
        (4, "latency speedup", &|| speedup(ctx())),
        (5, "linear scaling", &|| linear_scaling(ctx())),
        (6, "crypto", &|| crypto_suite(ctx())),
        (7, "trainer", &|| trainer_suite(ctx())),
        (8, "disclosure", &|| disclosure(ctx())),
    ];
    let mut failed = 0;
    for (n, name, run) in criteria {
        if !wanted(n) {
            continue;
        }
        let t = Instant::now();
        let verdict = run();
        let secs = t.elapsed().as_secs_f64();
        match verdict {
            Ok(detail) => println!("PASS {n} {name}: {detail} [{secs:.1}s]"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {n} {name}: {detail} [{secs:.1}s]");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
