//! Repeated-split comparison of LR and DRO-L on the breast-cancer data.
//!
//! `cargo run --release --example benchmark -- [repeats] [models]`

use std::path::PathBuf;

use dro_cost::harness::{render_report, run_benchmark, DatasetSpec, ExperimentConfig, ModelKind, ReportFormat};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let repeats: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(20);
    let models = args.next().unwrap_or_else(|| "lr,lrl1,dro-l".into());
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("data/wdbc.csv");
    let mut cfg = ExperimentConfig::new(
        DatasetSpec::Csv { path, label_column: "diagnosis".into(), positive_label: "M".into() },
        40,
    );
    cfg.models = models.split(',').map(|m| ModelKind::parse(m).ok_or(format!("unknown model {m}"))).collect::<Result<_, _>>()?;
    cfg.repeats = repeats;
    cfg.test_cap = Some(329);
    cfg.seed = 2024;
    let start = std::time::Instant::now();
    let outcome = run_benchmark(&cfg)?;
    print!("{}", render_report(&outcome.report, ReportFormat::Markdown)?);
    for m in &outcome.report.models {
        println!("{}: chosen delta {:?}", m.name, m.chosen_delta);
    }
    eprintln!("config digest {}, {:.1}s", outcome.report.config_digest, start.elapsed().as_secs_f64());
    Ok(())
}
