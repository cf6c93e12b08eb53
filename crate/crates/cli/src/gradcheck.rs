use std::fmt::Write as _;
use std::process::ExitCode;

use semdiff::grad::{gradcheck_suite_seeded, GradCheckCase, GRADCHECK_STEP, GRADCHECK_TOLERANCE};

use crate::{write_text, GradcheckArgs, Outcome};

pub fn run(a: &GradcheckArgs) -> Outcome {
    anyhow::ensure!(a.instances > 0, "--instances must be positive");
    let corrupt = a.corrupt_backward;
    let rows = gradcheck_suite_seeded(a.seed, a.instances, GRADCHECK_STEP, |case: &GradCheckCase| {
        let mut g = case.backward()?;
        if corrupt {
            g.grad_input = g.grad_input.map(|v| v * 1.001);
        }
        Ok(g)
    })?;

    let mut csv = String::from("op,block,max_rel_error,pass\n");
    let mut failures = Vec::new();
    for r in &rows {
        let pass = r.max_rel_error <= GRADCHECK_TOLERANCE;
        let line = format!("{},{},{:.3e},{}", r.op.name(), r.block.name(), r.max_rel_error, pass);
        let _ = writeln!(csv, "{line}");
        if !pass {
            failures.push(line);
        }
    }
    write_text(&a.out, &csv)?;
    print!("{csv}");
    if failures.is_empty() {
        return Ok(ExitCode::SUCCESS);
    }
    for f in &failures {
        eprintln!("gradient check failed (tolerance {GRADCHECK_TOLERANCE:e}): {f}");
    }
    Ok(ExitCode::FAILURE)
}
