//! Transport discrepancy between two labeled empirical measures, checked
//! against brute-force enumeration of vertex couplings.

use dro_cost::data::Point;
use dro_cost::linalg::PsdMatrix;
use dro_cost::transport::{ot_brute_force, ot_discrepancy, CostFunction, DiscreteDistribution};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let p = DiscreteDistribution::uniform(vec![
        Point::new(vec![0.0, 0.0], 1.0),
        Point::new(vec![1.0, 0.5], 1.0),
        Point::new(vec![-1.0, 2.0], -1.0),
    ])?;
    let q = DiscreteDistribution::new(
        vec![Point::new(vec![0.5, 0.0], 1.0), Point::new(vec![-1.0, 1.0], -1.0), Point::new(vec![2.0, 2.0], 1.0)],
        vec![0.5, 1.0 / 3.0, 1.0 / 6.0],
    )?;
    for (name, cost) in [
        ("squared euclidean", CostFunction::squared_euclidean()),
        ("mahalanobis diag(4, 0.25)", CostFunction::Mahalanobis { lambda: PsdMatrix::from_diagonal(&[4.0, 0.25])? }),
    ] {
        let plan = ot_discrepancy(&cost, &p, &q)?;
        println!("{name}: value {:.6} (brute force {:.6}), {} pivots", plan.value, ot_brute_force(&cost, &p, &q)?, plan.pivots);
        for row in &plan.plan {
            println!("  {row:.4?}");
        }
    }

    // Moving mass across labels costs +∞.
    let r = DiscreteDistribution::uniform(vec![Point::new(vec![0.0, 0.0], -1.0)])?;
    let plan = ot_discrepancy(&CostFunction::squared_euclidean(), &p, &r)?;
    println!("label mismatch: value {} ({:?})", plan.value, plan.feasibility);
    Ok(())
}
