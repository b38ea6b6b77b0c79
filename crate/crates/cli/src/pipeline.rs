use std::time::Instant;

use duotts::Result;

use crate::config::RunConfig;
use crate::datagen::{datagen, BalanceReport};
use crate::eval::{eval, EvalOutcome};
use crate::forget::{forget, ForgettingReport};
use crate::run::{RunDir, TrainStep};
use crate::train::{train, StepOutcome};

pub struct PipelineOutcome {
    pub balance: BalanceReport,
    pub steps: Vec<StepOutcome>,
    pub eval: EvalOutcome,
    pub forgetting: ForgettingReport,
    /// Wall seconds per phase, in run order.
    pub timings: Vec<(String, f64)>,
}

/// datagen, every training step, eval and forget, in that order.
pub fn pipeline(cfg: &RunConfig, dir: &RunDir, mut progress: impl FnMut(&str, f64)) -> Result<PipelineOutcome> {
    let mut timings = Vec::new();
    let mut timed = |name: &str, start: Instant, timings: &mut Vec<(String, f64)>| {
        let s = start.elapsed().as_secs_f64();
        progress(name, s);
        timings.push((name.to_string(), s));
    };
    let t = Instant::now();
    let balance = datagen(cfg, dir)?;
    timed("datagen", t, &mut timings);
    let mut steps = Vec::new();
    for step in TrainStep::ALL {
        let t = Instant::now();
        steps.push(train(cfg, dir, step)?);
        timed(step.name(), t, &mut timings);
    }
    let t = Instant::now();
    let eval = eval(cfg, dir)?;
    timed("eval", t, &mut timings);
    let t = Instant::now();
    let forgetting = forget(cfg, dir)?;
    timed("forget", t, &mut timings);
    Ok(PipelineOutcome {
        balance,
        steps,
        eval,
        forgetting,
        timings,
    })
}
