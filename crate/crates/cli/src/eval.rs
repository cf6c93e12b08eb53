use std::collections::BTreeSet;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::Path;
use std::process::ExitCode;

use anyhow::{bail, Context};
use semdiff::io::load_label_map;
use semdiff::metrics::{boundary_fscore, confusion_matrix, miou, ConfusionMatrix};

use crate::{write_text, EvalArgs, Outcome, EXIT_NO_DATA};

fn label_files(dir: &Path) -> anyhow::Result<BTreeSet<OsString>> {
    anyhow::ensure!(dir.is_dir(), "{} is not a directory", dir.display());
    let mut names = BTreeSet::new();
    for entry in std::fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
        let path = entry?.path();
        let ext = path.extension().and_then(|e| e.to_str()).unwrap_or_default();
        if path.is_file() && matches!(ext, "pgm" | "tns") {
            names.insert(path.file_name().expect("files have names").to_owned());
        }
    }
    Ok(names)
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |v| format!("{v:.6}"))
}

pub fn run(a: &EvalArgs) -> Outcome {
    anyhow::ensure!(a.classes >= 1, "--classes must be positive");
    let pred_names = label_files(&a.pred)?;
    let gt_names = label_files(&a.gt)?;
    if pred_names != gt_names {
        let only_pred: Vec<_> = pred_names.difference(&gt_names).map(|n| n.to_string_lossy()).collect();
        let only_gt: Vec<_> = gt_names.difference(&pred_names).map(|n| n.to_string_lossy()).collect();
        bail!("file names differ: only in --pred {only_pred:?}, only in --gt {only_gt:?}");
    }
    if gt_names.is_empty() {
        eprintln!("no data: no .pgm or .tns label maps in {} and {}", a.pred.display(), a.gt.display());
        return Ok(ExitCode::from(EXIT_NO_DATA));
    }

    let mut csv = String::from("image,miou,f1px,f3px\n");
    let mut total = ConfusionMatrix::zeros(a.classes);
    let (mut f1_sum, mut f3_sum, mut f1_n, mut f3_n) = (0.0, 0.0, 0usize, 0usize);
    for name in &gt_names {
        let load = |dir: &Path| {
            let p = dir.join(name);
            load_label_map(&p).with_context(|| format!("reading {}", p.display()))
        };
        let (pred, gt) = (load(&a.pred)?, load(&a.gt)?);
        let cm = confusion_matrix(&pred, &gt, a.classes, None).with_context(|| name.to_string_lossy().into_owned())?;
        total.merge(&cm)?;
        let f1 = boundary_fscore(&pred, &gt, 1)?;
        let f3 = boundary_fscore(&pred, &gt, 3)?;
        if let Some(v) = f1 {
            f1_sum += v;
            f1_n += 1;
        }
        if let Some(v) = f3 {
            f3_sum += v;
            f3_n += 1;
        }
        let _ = writeln!(csv, "{},{},{},{}", name.to_string_lossy(), cell(miou(&cm)), cell(f1), cell(f3));
    }
    let mean = |s: f64, n: usize| (n > 0).then(|| s / n as f64);
    let _ = writeln!(csv, "ALL,{},{},{}", cell(miou(&total)), cell(mean(f1_sum, f1_n)), cell(mean(f3_sum, f3_n)));
    write_text(&a.out, &csv)?;
    print!("{csv}");
    Ok(ExitCode::SUCCESS)
}
