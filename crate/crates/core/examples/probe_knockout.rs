// SPDX-License-Identifier: MIT OR Apache-2.0

//! Trains the recall model, then prints knockout curves for it and for its
//! untrained initialization.

use ssmko::harness::{filter_correct, Session, SourceCategory};
use ssmko::trainer::{generate_task, toy_ssd_spec, train_records, TaskConfig, TrainConfig};
use ssmko::{ModelWeights, Rng};

fn show(label: &str, s: &Session, window: usize) -> ssmko::Result<()> {
    let r = s.info_flow_sweep(window, &SourceCategory::ALL)?;
    for c in SourceCategory::ALL {
        println!("{label} {:9} {:?}", c.name(), r.curve(c));
    }
    if let Ok([all, dep, ind]) = s.feature_knockout_study(window) {
        println!("{label} scope all {:?}", all.curve(SourceCategory::Subject));
        println!("{label} scope dep {:?}", dep.curve(SourceCategory::Subject));
        println!("{label} scope ind {:?}", ind.curve(SourceCategory::Subject));
    }
    Ok(())
}

fn main() -> ssmko::Result<()> {
    let seed: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let (task, train, eval) = generate_task(&TaskConfig::facts_512(), &mut Rng::new(seed))?;
    let spec = toy_ssd_spec(task.vocab_size, 4, 64);
    let mut cfg = TrainConfig::facts_512(seed);
    let env = |k: &str| std::env::var(k).ok();
    if let Some(v) = env("INIT_SCALE") {
        cfg.init_scale = v.parse().unwrap();
    }
    if let Some(v) = env("STEPS") {
        cfg.steps = v.parse().unwrap();
        cfg.target_accuracy = None;
    }
    let mut log = Vec::new();
    let out = train_records(&spec, &train, &eval, &cfg, &mut log)?;
    println!("accuracy {}", out.final_accuracy);
    let window = 3;
    let kept = filter_correct(&out.weights, &eval)?;
    show("trained", &Session::new(&out.weights, kept, 4)?, window)?;
    let init = ModelWeights::random(&spec, cfg.init_scale, &mut Rng::new(seed).fork(0))?;
    show("untrained", &Session::new(&init, eval.clone(), 4)?, window)?;
    show("untrained-w1", &Session::new(&init, eval, 4)?, 1)?;
    Ok(())
}
