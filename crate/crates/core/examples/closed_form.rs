//! Adaptive-regularization estimators: the worst-case logistic loss and the
//! square-root least squares form, compared with their unregularized fits.

use dro_cost::closed_form::{
    accuracy, rmse, solve_adaptive_logistic, solve_adaptive_sqrt_ls, solve_baseline_logistic, AdaptiveLoss, AdaptiveRegProblem,
    BaselinePenalty,
};
use dro_cost::data::Dataset;
use dro_cost::harness::synth_figure1b;
use dro_cost::linalg::PsdMatrix;
use nalgebra::DVector;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let data = synth_figure1b(60, 3, 3.0, 1)?;
    // Cheap moves along the last two coordinates: coefficients there are
    // penalized more.
    let lambda = PsdMatrix::from_diagonal(&[4.0, 0.25, 0.25])?;
    let erm = solve_baseline_logistic(&data, BaselinePenalty::None)?;
    println!("ERM logistic: β = {:.4}", erm.beta.transpose());
    for delta in [0.01, 0.1, 0.5] {
        let est = solve_adaptive_logistic(&AdaptiveRegProblem::new(AdaptiveLoss::Logistic, lambda.clone(), delta)?, &data)?;
        println!(
            "δ = {delta:<4}: β = {:.4}, worst-case loss {:.4}, train accuracy {:.3}",
            est.beta.transpose(),
            est.objective,
            accuracy(&data.features, &data.labels, &est.beta)
        );
    }

    let y = DVector::from_fn(data.len(), |i, _| 2.0 * data.features[(i, 0)] + 0.3 * data.features[(i, 1)]);
    let reg = Dataset::regression(data.features.clone(), y)?;
    for delta in [0.0, 0.05, 0.5] {
        let est = solve_adaptive_sqrt_ls(&AdaptiveRegProblem::new(AdaptiveLoss::SqrtLeastSquares, lambda.clone(), delta)?, &reg)?;
        println!(
            "sqrt-LS δ = {delta:<4}: β = {:.4}, objective {:.4}, rmse {:.4}",
            est.beta.transpose(),
            est.objective,
            rmse(&reg.features, &reg.labels, &est.beta)
        );
    }
    Ok(())
}
