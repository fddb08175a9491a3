//! Learns a Mahalanobis cost from side information.
//!
//! First with pairs that encode "the label only depends on the first
//! coordinate" directly (must-link partners shifted along the second
//! coordinate, cannot-link partners mirrored across the boundary), then with
//! k-NN pairs drawn from the same kind of data.
//!
//! `cargo run --release --example metric_learning -- [runs]`

use dro_cost::data::{Dataset, Task};
use dro_cost::harness::synth_figure1b;
use dro_cost::metric::{build_pair_sets, learn_mahalanobis, pd_floor, FeatureMap, MetricLearnConfig, PairSets};
use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn ratio(m: &DMatrix<f64>) -> f64 {
    m[(0, 0)] / (m[(1, 1)] + 1e-12)
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let runs: u64 = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(5);
    let cfg = MetricLearnConfig::default();
    for seed in 0..runs {
        let base = synth_figure1b(20, 2, 10.0, seed)?;
        let n = base.len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for copy in 0..3 {
            for i in 0..n {
                let (x1, x2) = (base.features[(i, 0)], base.features[(i, 1)]);
                let (row, y) = match copy {
                    0 => ([x1, x2], base.labels[i]),
                    1 => ([x1, x2 + Distribution::<f64>::sample(&StandardNormal, &mut rng)], base.labels[i]),
                    _ => ([-x1, x2], -base.labels[i]),
                };
                rows.push(row);
                labels.push(y);
            }
        }
        let refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
        let data = Dataset::from_rows(&refs, &labels, Task::Classification)?;
        let pairs = PairSets::new((0..n).map(|i| (i, n + i)).collect(), (0..n).map(|i| (i, 2 * n + i)).collect());
        let learned = learn_mahalanobis(&data, &pairs, &FeatureMap::identity(2), &cfg)?;
        let floored = pd_floor(&learned.lambda, cfg.pd_floor_gamma)?;
        println!(
            "seed {seed}: designed pairs Λ11/Λ22 = {:.2e} (after floor {:.2}), {} iterations",
            ratio(learned.lambda.matrix()),
            ratio(floored.matrix()),
            learned.iterations
        );

        let knn = synth_figure1b(100, 2, 10.0, seed)?;
        let pairs = build_pair_sets(&knn, cfg.k)?;
        let learned = learn_mahalanobis(&knn, &pairs, &FeatureMap::identity(2), &cfg)?;
        println!(
            "        k-NN pairs ({} must, {} cannot) Λ11/Λ22 = {:.2}",
            pairs.must_link.len(),
            pairs.cannot_link.len(),
            ratio(learned.lambda.matrix())
        );
    }
    Ok(())
}
