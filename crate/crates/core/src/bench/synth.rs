use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::Dataset;

/// Deterministic credit-scoring-like data: features share a latent risk
/// factor, several are skewed or count-valued, and roughly 7% of rows are
/// positive.
#[derive(Clone, Debug)]
pub struct SyntheticCredit {
    seed: u64,
    features: usize,
}

pub const MIN_FEATURES: usize = 10;
pub const MAX_FEATURES: usize = 25;

impl SyntheticCredit {
    /// `features` is clamped to 10..=25.
    pub fn new(seed: u64, features: usize) -> Self {
        SyntheticCredit {
            seed,
            features: features.clamp(MIN_FEATURES, MAX_FEATURES),
        }
    }

    pub fn features(&self) -> usize {
        self.features
    }

    pub fn generate(&self, rows: usize) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let d = self.features;
        // per-column loading on the latent factor and transform kind
        let loadings: Vec<f64> = (0..d).map(|_| rng.gen_range(-0.8..0.8)).collect();
        let kinds: Vec<u8> = (0..d).map(|f| (f % 4) as u8).collect();

        let mut values = Vec::with_capacity(rows * d);
        let mut labels = Vec::with_capacity(rows);
        for _ in 0..rows {
            let z: f64 = normal.sample(&mut rng);
            let mut row = Vec::with_capacity(d);
            for f in 0..d {
                let rho = loadings[f];
                let raw = rho * z + (1.0 - rho * rho).sqrt() * normal.sample(&mut rng);
                row.push(match kinds[f] {
                    0 => raw,
                    1 => (0.5 * raw).exp() * 1000.0,
                    2 => (raw + 1.5).max(0.0).floor(),
                    _ => 1.0 / (1.0 + (-raw).exp()),
                });
            }
            let interaction = if row[0] > 0.5 && row[2] >= 2.0 { 0.8 } else { 0.0 };
            let logit = -3.3 + 1.6 * z + interaction;
            labels.push(if rng.gen::<f64>() < 1.0 / (1.0 + (-logit).exp()) { 1.0 } else { 0.0 });
            values.extend(row);
        }
        let names = (0..d).map(|f| format!("x{f}")).collect();
        Dataset::new(names, values, labels, None).expect("generator output is well formed")
    }
}
