use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use semdiff::bench::{texture_fixture, FIXTURE_LAMBDA};
use semdiff::io::{load_feature_map, load_label_map, load_tensors, save_feature_map};
use semdiff::metrics::{band_energy, LabelMap};
use semdiff::ops::{cdc2d, conv2d, sdc2d, SdcKernel};
use semdiff::FeatureMap;

use crate::{parse_extents, require_file, OpdemoArgs, Outcome};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Op {
    Vanilla,
    Cdc,
    Sdc,
}

fn parse_op(tag: &str) -> anyhow::Result<Op> {
    Ok(match tag {
        "vanilla" => Op::Vanilla,
        "cdc" => Op::Cdc,
        "sdc" => Op::Sdc,
        other => bail!("unknown operator {other:?}; expected vanilla, cdc or sdc"),
    })
}

fn load_kernel(spec: &str, channels: usize, dilation: usize, lambda: f64) -> anyhow::Result<SdcKernel> {
    let path = Path::new(spec);
    let kernel = if path.extension().is_some_and(|e| e == "tns") {
        let mut ts = load_tensors(path).with_context(|| format!("reading kernel {spec}"))?;
        anyhow::ensure!(!ts.is_empty(), "kernel file {spec} holds no tensor");
        SdcKernel::new(ts.swap_remove(0), dilation, lambda)?
    } else {
        let (kh, kw) = parse_extents(spec)?;
        SdcKernel::diagonal(channels, kh, kw, 1.0)?.with_dilation(dilation)?.with_lambda(lambda)?
    };
    Ok(kernel)
}

/// Channel mean, stretched linearly onto `[0, 1]`; a flat map becomes all zeros.
fn normalized_mean(f: &FeatureMap) -> anyhow::Result<FeatureMap> {
    let (c, h, w) = f.dims();
    let mean = FeatureMap::from_fn(1, h, w, |_, y, x| (0..c).map(|ci| f.get(ci, y, x)).sum::<f64>() / c as f64)?;
    let (lo, hi) = (mean.tensor().min(), mean.tensor().max());
    let span = hi - lo;
    Ok(mean.map(|v| if span > 0.0 { (v - lo) / span } else { 0.0 }))
}

fn with_ext(prefix: &Path, ext: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

pub fn run(a: &OpdemoArgs) -> Outcome {
    let op = parse_op(&a.op)?;
    if let Some(p) = &a.input {
        require_file(p)?;
    }
    if let Some(g) = a.guidance.as_deref().filter(|g| *g != "constant") {
        require_file(g.as_ref())?;
    }
    if let Some(p) = &a.labels {
        require_file(p)?;
    }

    let (input, fixture_guidance, mut labels): (FeatureMap, Option<FeatureMap>, Option<LabelMap>) =
        match (&a.input, a.scene) {
            (Some(p), _) => (load_feature_map(p).with_context(|| format!("reading {}", p.display()))?, None, None),
            (None, Some(seed)) => {
                let f = texture_fixture(seed)?;
                (f.scene.image, Some(f.guidance), Some(f.scene.labels))
            }
            (None, None) => bail!("pass --input or --scene"),
        };
    if let Some(p) = &a.labels {
        labels = Some(load_label_map(p).with_context(|| format!("reading {}", p.display()))?);
    }
    let guidance = match a.guidance.as_deref() {
        Some("constant") => FeatureMap::zeros(1, input.height(), input.width())?,
        Some(g) => load_feature_map(g).with_context(|| format!("reading {g}"))?,
        None => match fixture_guidance {
            Some(g) => g,
            None => FeatureMap::zeros(1, input.height(), input.width())?,
        },
    };
    let lambda = a.lambda.unwrap_or(FIXTURE_LAMBDA);
    let kernel = load_kernel(&a.kernel, input.channels(), a.dilation, lambda)?;

    let response = match op {
        Op::Vanilla => conv2d(&input, &kernel)?,
        Op::Cdc => cdc2d(&input, &kernel)?,
        Op::Sdc => sdc2d(&input, &guidance, &kernel)?,
    };
    save_feature_map(with_ext(&a.out, "tns"), &response)?;
    save_feature_map(with_ext(&a.out, "pgm"), &normalized_mean(&response)?)?;

    if let Some(labels) = &labels {
        let e = band_energy(&response, labels, 1)?;
        println!("op,region_energy,boundary_energy");
        println!("{},{:.12},{:.12}", a.op, e.region, e.boundary);
    }
    Ok(ExitCode::SUCCESS)
}
