// SPDX-License-Identifier: MIT OR Apache-2.0

//! Acceptance gate: one PASS/FAIL line per criterion, nonzero exit on any
//! failure.

use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use ssmko::attention::{materialize, AttentionTensor};
use ssmko::checks::{self, CheckOutcome};
use ssmko::harness::plot::{scatter_chart, sweep_chart};
use ssmko::harness::{filter_correct, sweeps_to_csv, write_json, PromptRecord, Session, SourceCategory, SweepResult};
use ssmko::knockout::{apply_knockout, classify_features, FeatureScope, KnockoutSpec};
use ssmko::trainer::{generate_task, initial_weights, toy_ssd_spec, train_records, TaskConfig, TrainConfig};
use ssmko::{ModelWeights, Rng};

const SEED: u64 = 0;

struct Verdict {
    passed: bool,
    detail: String,
}

fn from_checks(outcomes: &[CheckOutcome]) -> Verdict {
    Verdict {
        passed: outcomes.iter().all(|o| o.passed),
        detail: outcomes
            .iter()
            .map(|o| {
                format!(
                    "{}: {} cases, worst {:.3e} (tol {:.0e})",
                    o.name, o.cases, o.worst, o.tolerance
                )
            })
            .collect::<Vec<_>>()
            .join("; "),
    }
}

fn min_of(curve: &[Option<f64>]) -> Option<f64> {
    curve.iter().flatten().copied().reduce(f64::min)
}

fn linf(a: &[Option<f64>], b: &[Option<f64>]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| match (x, y) {
            (Some(x), Some(y)) => (x - y).abs(),
            _ => f64::INFINITY,
        })
        .fold(0.0, f64::max)
}

/// Per-layer kernels of a clean forward pass.
fn kernels(model: &ModelWeights, tokens: &[usize]) -> ssmko::Result<Vec<AttentionTensor>> {
    let mut out = Vec::new();
    model.forward_with(tokens, |i, layer, x| {
        out.push(materialize(i, layer, x)?);
        layer.mix(x)
    })?;
    Ok(out)
}

/// Middle-third units must come out of both partial scopes untouched.
fn middle_units_untouched(model: &ModelWeights, records: &[PromptRecord], window: usize) -> ssmko::Result<bool> {
    for r in records.iter().take(16) {
        let clean = kernels(model, &r.token_ids)?;
        let sources: Vec<usize> = SourceCategory::Subject.positions(r).into_iter().collect();
        for first in 0..=model.num_layers() - window {
            for scope in [FeatureScope::ContextDependent, FeatureScope::ContextIndependent] {
                let spec = KnockoutSpec::new(first, window, sources.clone(), [r.last()]).with_scope(scope);
                for layer in spec.layers() {
                    let class = classify_features(&model.layers[layer])?;
                    let edited = apply_knockout(&clean[layer], &spec, Some(&class))?;
                    for &u in &class.middle {
                        let (a, b) = (edited.unit_matrix(u), clean[layer].unit_matrix(u));
                        if a.data().iter().zip(b.data()).any(|(x, y)| x.to_bits() != y.to_bits()) {
                            return Ok(false);
                        }
                    }
                }
            }
        }
    }
    Ok(true)
}

fn emit(dir: &Path, sweeps: &[SweepResult]) -> ssmko::Result<()> {
    for s in sweeps {
        write_json(&dir.join(format!("sweep_w{}_{}.json", s.window_size, s.scope)), s)?;
        let svg = sweep_chart("knockout to last token", s);
        std::fs::write(dir.join(format!("sweep_w{}_{}.svg", s.window_size, s.scope)), svg)?;
    }
    std::fs::write(dir.join("sweeps.csv"), sweeps_to_csv(sweeps))?;
    Ok(())
}

fn run_experiment(model: &ModelWeights, records: &[PromptRecord], dir: &Path) -> ssmko::Result<()> {
    let session = Session::new(model, records.to_vec(), 1)?.with_ids("toy-ssd", "facts-512");
    let mut sweeps = session.window_size_study(&[1, 3], &SourceCategory::ALL)?;
    sweeps.extend(session.feature_knockout_study(3)?);
    emit(dir, &sweeps)?;
    let scatter = session.last_token_scatter(3)?;
    write_json(&dir.join("scatter.json"), &scatter)?;
    let pts: Vec<(f64, f64)> = scatter.iter().map(|p| (p.p_base, p.p_ko)).collect();
    std::fs::write(
        dir.join("scatter.svg"),
        scatter_chart("last token", "p_base", "p_ko", &pts),
    )?;
    let heat = session.knockout_heatmap(0, 1)?;
    write_json(&dir.join("heatmap.json"), &heat)?;
    Ok(())
}

fn dir_bytes(dir: &Path) -> std::io::Result<Vec<(String, Vec<u8>)>> {
    let mut files = Vec::new();
    for e in std::fs::read_dir(dir)? {
        let e = e?;
        files.push((e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path())?));
    }
    files.sort();
    Ok(files)
}

fn main() -> ExitCode {
    let mut results: Vec<(usize, &str, Verdict, f64)> = Vec::new();
    let mut record = |n: usize, name: &'static str, f: &mut dyn FnMut() -> ssmko::Result<Verdict>| {
        let t = Instant::now();
        let v = f().unwrap_or_else(|e| Verdict {
            passed: false,
            detail: format!("error: {e}"),
        });
        let secs = t.elapsed().as_secs_f64();
        println!(
            "criterion {n:2} {name}: {} ({secs:.1}s) {}",
            if v.passed { "PASS" } else { "FAIL" },
            v.detail
        );
        results.push((n, name, v, secs));
    };

    record(1, "dual-path equivalence", &mut || {
        Ok(from_checks(&[checks::dual_path_suite(50, 50, SEED, 1e-10)?]))
    });
    record(2, "decay identity", &mut || {
        Ok(from_checks(&[checks::decay_identity_suite(1000, SEED, 1e-12)?]))
    });
    record(3, "knockout contract", &mut || {
        Ok(from_checks(&[checks::knockout_contract_suite(100, SEED, 1e-10)?]))
    });
    record(4, "full isolation", &mut || {
        Ok(from_checks(&[checks::full_isolation_suite(20, SEED, 1e-10)?]))
    });
    record(5, "gradient check", &mut || {
        Ok(from_checks(&checks::gradient_suite(SEED, 1e-5)?))
    });

    let setup = || -> ssmko::Result<_> {
        let (task, train, eval) = generate_task(&TaskConfig::facts_512(), &mut Rng::new(SEED))?;
        let spec = toy_ssd_spec(task.vocab_size, 4, 64);
        Ok((spec, train, eval, TrainConfig::facts_512(SEED)))
    };
    let (spec, train, eval, cfg) = match setup() {
        Ok(s) => s,
        Err(e) => {
            println!("setup failed: {e}");
            return ExitCode::FAILURE;
        }
    };
    let window = 9.min(spec.num_layers - 1);

    let mut trained: Option<ModelWeights> = None;
    record(6, "toy factual recall", &mut || {
        let t = Instant::now();
        let first = train_records(&spec, &train, &eval, &cfg, &mut Vec::new())?;
        let first_secs = t.elapsed().as_secs_f64();
        let second = train_records(&spec, &train, &eval, &cfg, &mut Vec::new())?;
        let same = first.weights == second.weights;
        let v = Verdict {
            passed: first.final_accuracy >= 0.95 && same,
            detail: format!(
                "accuracy {:.4} after {} of {} steps ({first_secs:.1}s per run), rerun bitwise identical: {same}",
                first.final_accuracy, first.steps_run, cfg.steps
            ),
        };
        trained = Some(first.weights);
        Ok(v)
    });

    let mut scopes: Option<[SweepResult; 3]> = None;
    match &trained {
        Some(model) => {
            let kept = filter_correct(model, &eval).unwrap_or_default();
            let session = Session::new(model, kept.clone(), 1);
            record(7, "subject direction", &mut || {
                let s = session.as_ref().map_err(|e| ssmko::Error::Config(e.to_string()))?;
                let sweep = s.info_flow_sweep(window, &SourceCategory::ALL)?;
                let subj = min_of(&sweep.curve(SourceCategory::Subject));
                let first = min_of(&sweep.curve(SourceCategory::First));
                let passed = matches!((subj, first), (Some(s), Some(f)) if s < -20.0 && s < f);
                Ok(Verdict {
                    passed,
                    detail: format!(
                        "window {window}, {} records; subject min {subj:?}, first min {first:?}, relation min {:?}",
                        kept.len(),
                        min_of(&sweep.curve(SourceCategory::Relation))
                    ),
                })
            });
            record(8, "feature-scope direction", &mut || {
                let s = session.as_ref().map_err(|e| ssmko::Error::Config(e.to_string()))?;
                let [all, dep, ind] = s.feature_knockout_study(window)?;
                let c = SourceCategory::Subject;
                let d_dep = linf(&dep.curve(c), &all.curve(c));
                let d_ind = linf(&ind.curve(c), &all.curve(c));
                let untouched = middle_units_untouched(model, &kept, window)?;
                scopes = Some([all, dep, ind]);
                Ok(Verdict {
                    passed: d_dep < d_ind && untouched,
                    detail: format!(
                        "L-inf dependent {d_dep:.3}, independent {d_ind:.3}; middle third untouched: {untouched}"
                    ),
                })
            });
        }
        None => {
            record(7, "subject direction", &mut || {
                Err(ssmko::Error::Config("no trained model".into()))
            });
            record(8, "feature-scope direction", &mut || {
                Err(ssmko::Error::Config("no trained model".into()))
            });
        }
    }
    if let Some([all, dep, ind]) = &scopes {
        let c = SourceCategory::Subject;
        println!("    subject curves: all {:?}", all.curve(c));
        println!("                    dependent {:?}", dep.curve(c));
        println!("                    independent {:?}", ind.curve(c));
    }

    record(9, "untrained null control", &mut || {
        let init = initial_weights(&spec, &cfg)?;
        let session = Session::new(&init, eval.clone(), 1)?;
        let sizes: Vec<usize> = (1..=spec.num_layers).collect();
        let mut sweeps = session.window_size_study(&sizes, &SourceCategory::ALL)?;
        sweeps.extend(session.feature_knockout_study(window)?);
        let worst = sweeps
            .iter()
            .flat_map(|s| s.points.iter())
            .filter_map(|p| p.mean_change_pct)
            .fold(0.0f64, |m, v| m.max(v.abs()));
        let empty = sweeps
            .iter()
            .flat_map(|s| s.points.iter())
            .filter(|p| p.mean_change_pct.is_none())
            .count();
        Ok(Verdict {
            passed: worst <= 5.0 && empty == 0,
            detail: format!(
                "{} curves, largest |mean change| {worst:.4}%, empty points {empty}",
                sweeps.len() * 4
            ),
        })
    });

    record(10, "reproducibility", &mut || {
        let model = match &trained {
            Some(m) => m.clone(),
            None => initial_weights(&spec, &cfg)?,
        };
        let records = filter_correct(&model, &eval)?;
        let subset: Vec<PromptRecord> = records.into_iter().take(48).collect();
        let (a, b) = (tempfile::tempdir()?, tempfile::tempdir()?);
        run_experiment(&model, &subset, a.path())?;
        run_experiment(&model, &subset, b.path())?;
        let (fa, fb) = (dir_bytes(a.path())?, dir_bytes(b.path())?);
        Ok(Verdict {
            passed: !fa.is_empty() && fa == fb,
            detail: format!("{} files (json, csv, svg) compared byte for byte", fa.len()),
        })
    });

    let failed: Vec<usize> = results.iter().filter(|r| !r.2.passed).map(|r| r.0).collect();
    println!(
        "acceptance: {}/{} criteria passed{}",
        results.len() - failed.len(),
        results.len(),
        if failed.is_empty() {
            String::new()
        } else {
            format!(", failing {failed:?}")
        }
    );
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
