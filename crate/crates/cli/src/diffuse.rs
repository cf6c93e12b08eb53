use std::fmt::Write as _;
use std::process::ExitCode;

use anyhow::{bail, Context};
use semdiff::diffusion::{diffuse_with, DiffusionSchedule, DiffusivityConfig};
use semdiff::io::{load_feature_map, save_feature_map};
use semdiff::FeatureMap;

use crate::{parse_extents, require_file, DiffuseArgs, Outcome};

pub fn run(a: &DiffuseArgs) -> Outcome {
    require_file(&a.input)?;
    if a.guidance != "constant" {
        require_file(a.guidance.as_ref())?;
    }
    let neighborhood = parse_extents(&a.kernel)?;
    let beta = a.beta.unwrap_or(1.0 / (neighborhood.0 * neighborhood.1) as f64);
    let sched = DiffusionSchedule::new(a.steps, a.alpha, beta, neighborhood)?;
    if sched.stability_warning() {
        bail!(
            "unstable schedule: beta * (h*w - 1) = {} exceeds 1; lower --beta",
            beta * (neighborhood.0 * neighborhood.1 - 1) as f64
        );
    }
    let cfg = DiffusivityConfig::new(a.lambda)?;

    let u = load_feature_map(&a.input).with_context(|| format!("reading {}", a.input.display()))?;
    let v = if a.guidance == "constant" {
        FeatureMap::zeros(1, u.height(), u.width())?
    } else {
        load_feature_map(&a.guidance).with_context(|| format!("reading {}", a.guidance))?
    };

    let mut csv = String::from("step,mean,min,max,range\n");
    let mut row = |t: usize, f: &FeatureMap| {
        let (lo, hi) = (f.tensor().min(), f.tensor().max());
        let _ = writeln!(csv, "{t},{:.12},{:.12},{:.12},{:.12}", f.tensor().mean(), lo, hi, hi - lo);
    };
    row(0, &u);
    let out = diffuse_with(&u, &v, &sched, &cfg, &mut row)?;
    save_feature_map(&a.out, &out).with_context(|| format!("writing {}", a.out.display()))?;
    print!("{csv}");
    Ok(ExitCode::SUCCESS)
}
