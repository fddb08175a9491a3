//! Stochastic descent on the smoothed dual, compared with the closed form.
//!
//! `cargo run --release --example smoothed_sgd -- [trace.jsonl]`

use dro_cost::closed_form::{solve_adaptive_sqrt_ls, worst_case_loss, AdaptiveLoss, AdaptiveRegProblem};
use dro_cost::data::Dataset;
use dro_cost::linalg::PsdMatrix;
use dro_cost::loss::Loss;
use dro_cost::smoothed::{smoothing_slack, DualObjective, SamplerCenter, SgdConfig, SmoothingConfig};
use dro_cost::transport::CostFunction;
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = DMatrix::from_fn(20, 1, |_, _| -> f64 { StandardNormal.sample(&mut rng) });
    let y = DVector::from_fn(20, |i, _| 1.3 * x[(i, 0)] + 0.5 * Distribution::<f64>::sample(&StandardNormal, &mut rng));
    let data = Dataset::regression(x, y)?;
    let lambda = PsdMatrix::from_diagonal(&[1.2])?;
    let delta = 0.1;

    let problem = AdaptiveRegProblem::new(AdaptiveLoss::SqrtLeastSquares, lambda.clone(), delta)?;
    let exact = solve_adaptive_sqrt_ls(&problem, &data)?;
    let value = worst_case_loss(&exact.beta, &problem, &data)?;

    let dual = DualObjective::new(CostFunction::Mahalanobis { lambda }, Loss::Squared, delta)?;
    let s_cfg = SmoothingConfig { epsilon: 0.01, sampler_sigma: delta.sqrt(), sampler_center: SamplerCenter::DataPoint, samples_l: 10_000 };
    let g_cfg = SgdConfig { batch_size: 10, step_beta: 0.1, step_lambda: 0.1, max_iters: 3000, ..SgdConfig::default() };
    let out = match std::env::args().nth(1) {
        Some(path) => {
            let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
            dual.sgd_solve(&data, &s_cfg, &g_cfg, Some(&mut f))?
        }
        None => dual.sgd_solve(&data, &s_cfg, &g_cfg, None)?,
    };
    println!("closed form: β = {:.4}, worst-case loss {value:.4}", exact.beta[0]);
    println!(
        "smoothed SGD: β = {:.4}, λ = {:.3}, smoothed objective {:.4} after {} iterations",
        out.estimate.beta[0], out.lambda, out.estimate.objective, out.estimate.iterations
    );
    println!("smoothing slack d·ε·log(1/ε) = {:.4}", smoothing_slack(1, s_cfg.epsilon));
    Ok(())
}
