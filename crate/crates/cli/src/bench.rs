use std::process::ExitCode;

use anyhow::Context;
use semdiff::bench::{loss_csv, metrics_csv, run_bench, summary_csv, BenchConfig};
use semdiff::io::write_raster;

use crate::{require_file, write_text, BenchArgs, Outcome};

pub fn run(a: &BenchArgs) -> Outcome {
    let mut cfg = match &a.config {
        Some(p) => {
            require_file(p)?;
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str::<BenchConfig>(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => BenchConfig::default(),
    };
    if let Some(seeds) = &a.seed {
        cfg.seeds.clone_from(seeds);
    }
    cfg.validate()?;
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;

    let outcome = run_bench(&cfg)?;
    write_text(&a.out.join("config.json"), &(serde_json::to_string_pretty(&cfg)? + "\n"))?;
    write_text(&a.out.join("metrics.csv"), &metrics_csv(&outcome.rows))?;
    write_text(&a.out.join("loss.csv"), &loss_csv(&outcome.rows))?;
    let summary = summary_csv(&outcome.rows);
    write_text(&a.out.join("summary.csv"), &summary)?;
    for s in &outcome.snapshots {
        let stem = format!("{}_seed{}", s.variant.name(), s.seed);
        write_raster(a.out.join(format!("{stem}_image.ppm")), &s.image)?;
        write_raster(a.out.join(format!("{stem}_pred.ppm")), &s.prediction)?;
        write_raster(a.out.join(format!("{stem}_error.ppm")), &s.errors)?;
    }
    print!("{summary}");
    Ok(ExitCode::SUCCESS)
}
