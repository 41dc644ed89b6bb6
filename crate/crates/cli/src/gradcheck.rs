//! Gradient-check table: every loss component plus the composite, at a
//! seeded frozen batch of logits, against central finite differences.

use std::process::ExitCode;

use ncdlab_core::config::ExperimentConfig;
use ncdlab_core::error::Error;
use ncdlab_core::gradcheck::{loss_gradient_suite, PASS_THRESHOLD};
use ncdlab_core::trainer::stream_seed;

const GRADCHECK_STREAM: u64 = 7;

pub fn cmd_gradcheck(config: &ExperimentConfig) -> Result<ExitCode, Error> {
    let spec = config.multinoulli_spec()?;
    let rows = loss_gradient_suite(
        &spec,
        &config.loss_weights(),
        16,
        stream_seed(config.train.seed, GRADCHECK_STREAM),
    )?;
    println!("component,max_rel_err,pass");
    let mut all_pass = true;
    for (name, err) in &rows {
        let pass = *err < PASS_THRESHOLD;
        all_pass &= pass;
        println!("{name},{err:e},{pass}");
    }
    if all_pass {
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!("error: gradient check failed (threshold {PASS_THRESHOLD:e})");
        Ok(ExitCode::from(3))
    }
}
