// SPDX-License-Identifier: MIT OR Apache-2.0

//! Trains the 4-layer SSD model on the 512-fact task and prints progress.

use std::time::Instant;

use ssmko::trainer::{generate_task, toy_ssd_spec, train_records, TaskConfig, TrainConfig};
use ssmko::Rng;

fn main() -> ssmko::Result<()> {
    let seed: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let (task, train, eval) = generate_task(&TaskConfig::facts_512(), &mut Rng::new(seed))?;
    let spec = toy_ssd_spec(task.vocab_size, 4, 64);
    let cfg = TrainConfig::facts_512(seed);
    let start = Instant::now();
    let mut log = Vec::new();
    let out = train_records(&spec, &train, &eval, &cfg, &mut log)?;
    for row in log.iter().filter(|r| r.eval_accuracy.is_some()) {
        println!(
            "step {:5}  loss {:.4}  lr {:.2e}  acc {:.4}",
            row.step,
            row.loss,
            row.lr,
            row.eval_accuracy.unwrap_or(0.0)
        );
    }
    println!(
        "accuracy {:.4} after {} steps in {:.1?}",
        out.final_accuracy,
        out.steps_run,
        start.elapsed()
    );
    Ok(())
}
