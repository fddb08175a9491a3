//! Writes the one-informative-coordinate synthetic data as CSV.
//!
//! `cargo run --example synth -- [n] [d] [coef] [seed] > synth.csv`

use dro_cost::harness::{synth_figure1b, write_csv};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let arg = |i: usize, default: &str| args.get(i).cloned().unwrap_or_else(|| default.to_string());
    let mut data = synth_figure1b(arg(0, "200").parse()?, arg(1, "2").parse()?, arg(2, "10").parse()?, arg(3, "0").parse()?)?;
    data.feature_names = (1..=data.dim()).map(|j| format!("x{j}")).collect();
    write_csv(&data, "label", std::io::stdout().lock())?;
    let agree = (0..data.len()).filter(|&i| (data.features[(i, 0)] >= 0.0) == (data.labels[i] > 0.0)).count();
    eprintln!("sign(x1) agrees with the label on {agree}/{} rows", data.len());
    Ok(())
}
