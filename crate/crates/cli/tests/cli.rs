// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ssmko::harness::{read_records, write_records};

fn ssmko(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ssmko"))
        .current_dir(dir)
        .env_remove("SSMKO_OUT")
        .args(args)
        .output()
        .expect("spawn ssmko")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (
                e.file_name().to_string_lossy().into_owned(),
                std::fs::read(e.path()).unwrap(),
            )
        })
        .collect();
    out.sort();
    out
}

/// Small SSD model whose vocabulary also fits the built-in demo prompt.
fn train_small(dir: &Path, out: &str) -> PathBuf {
    let cfg = r#"{
        "task": {"num_subjects": 4, "num_relations": 2, "num_attributes": 10},
        "kind": "ssd", "layers": 3, "embed_dim": 16,
        "train": {"seed": 3, "steps": 120, "batch_size": 8, "lr": {"peak": 0.01, "warmup_steps": 0, "final_fraction": 1.0},
                  "clip_norm": 1.0, "eval_every": 10, "target_accuracy": 1.0, "init_scale": 0.1}
    }"#;
    std::fs::write(dir.join("train.json"), cfg).unwrap();
    let o = ssmko(dir, &["train", "--config", "train.json", "--out", out]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    dir.join(out)
}

#[test]
fn one_fact_trains_and_reruns_identically() {
    let d = tempfile::tempdir().unwrap();
    let a = ssmko(d.path(), &["train", "--task", "one-fact", "--seed", "7", "--out", "a"]);
    assert_eq!(code(&a), 0, "{}", String::from_utf8_lossy(&a.stderr));
    let b = ssmko(d.path(), &["train", "--task", "one-fact", "--seed", "7", "--out", "b"]);
    assert_eq!(code(&b), 0);
    assert_eq!(files(&d.path().join("a")), files(&d.path().join("b")));
    let run: serde_json::Value = serde_json::from_slice(&std::fs::read(d.path().join("a/run.json")).unwrap()).unwrap();
    assert_eq!(run["command"], "train");
    assert_eq!(run["config"]["train"]["seed"], 7);
}

#[test]
fn missing_config_and_bad_usage_exit_one() {
    let d = tempfile::tempdir().unwrap();
    assert_eq!(code(&ssmko(d.path(), &["train", "--config", "absent.json"])), 1);
    assert_eq!(code(&ssmko(d.path(), &["no-such-command"])), 1);
    assert_eq!(
        code(&ssmko(
            d.path(),
            &["knockout-sweep", "--model", "absent.ssmko", "--dataset", "x"]
        )),
        1
    );
    assert!(!d.path().join("ssmko-out").exists());
}

#[test]
fn training_below_target_is_a_gate_miss() {
    let d = tempfile::tempdir().unwrap();
    let o = ssmko(
        d.path(),
        &[
            "train",
            "--task",
            "facts-512",
            "--layers",
            "1",
            "--embed-dim",
            "8",
            "--steps",
            "2",
            "--out",
            "g",
        ],
    );
    assert_eq!(code(&o), 2);
    assert!(d.path().join("g/model.ssmko").exists());
    assert_eq!(
        std::fs::read_to_string(d.path().join("g/metrics.jsonl"))
            .unwrap()
            .lines()
            .count(),
        2
    );
}

#[test]
fn check_prints_a_table() {
    let d = tempfile::tempdir().unwrap();
    let o = ssmko(d.path(), &["check", "--suite", "decay,contract", "--out", "c"]);
    assert_eq!(code(&o), 0);
    let text = stdout(&o);
    assert!(text.contains("decay_identity") && text.contains("knockout_contract"));
    assert_eq!(text.matches("PASS").count(), 2);
}

#[test]
fn sweep_outputs_are_byte_identical_on_rerun() {
    let d = tempfile::tempdir().unwrap();
    let m = train_small(d.path(), "m");
    let (model, data) = (m.join("model.ssmko"), m.join("dataset.jsonl"));
    let (model, data) = (model.to_str().unwrap(), data.to_str().unwrap());
    let run = |out: &str, workers: &str| {
        let o = ssmko(
            d.path(),
            &[
                "knockout-sweep",
                "--model",
                model,
                "--dataset",
                data,
                "--window-sizes",
                "1,2",
                "--workers",
                workers,
                "--out",
                out,
            ],
        );
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        files(&d.path().join(out))
    };
    let first = run("r1", "1");
    assert_eq!(first, run("r2", "1"));
    let names: Vec<&str> = first.iter().map(|(n, _)| n.as_str()).collect();
    assert_eq!(
        names,
        [
            "run.json",
            "sweep_w1.json",
            "sweep_w1.svg",
            "sweep_w2.json",
            "sweep_w2.svg",
            "sweeps.csv"
        ]
    );
    // a worker pool changes scheduling, not results
    let pooled = run("r3", "3");
    let data_files = |v: &[(String, Vec<u8>)]| v.iter().filter(|(n, _)| n != "run.json").cloned().collect::<Vec<_>>();
    assert_eq!(data_files(&first), data_files(&pooled));
}

#[test]
fn experiment_config_file_drives_the_sweep() {
    let d = tempfile::tempdir().unwrap();
    let m = train_small(d.path(), "m");
    let cfg = serde_json::json!({
        "model": m.join("model.ssmko"),
        "dataset": m.join("dataset.jsonl"),
        "window_sizes": [2],
        "categories": ["subject", "first"],
        "output_dir": "from-config",
    });
    std::fs::write(d.path().join("exp.json"), cfg.to_string()).unwrap();
    let o = ssmko(d.path(), &["knockout-sweep", "--config", "exp.json"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(d.path().join("from-config/sweeps.csv")).unwrap();
    assert!(csv
        .lines()
        .skip(1)
        .all(|l| l.starts_with("subject,2,") || l.starts_with("first,2,")));
    let run: serde_json::Value =
        serde_json::from_slice(&std::fs::read(d.path().join("from-config/run.json")).unwrap()).unwrap();
    let roles: Vec<&str> = run["inputs"]
        .as_array()
        .unwrap()
        .iter()
        .map(|i| i["role"].as_str().unwrap())
        .collect();
    assert_eq!(roles, ["config", "model", "dataset"]);
    // flags override the file
    let o = ssmko(
        d.path(),
        &[
            "knockout-sweep",
            "--config",
            "exp.json",
            "--window",
            "1",
            "--out",
            "flagged",
        ],
    );
    assert_eq!(code(&o), 0);
    assert!(d.path().join("flagged/sweep_w1.json").exists());
}

#[test]
fn env_var_sets_the_output_root() {
    let d = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_ssmko"))
        .current_dir(d.path())
        .env("SSMKO_OUT", "via-env")
        .args(["check", "--suite", "decay"])
        .output()
        .unwrap();
    assert_eq!(code(&o), 0);
    assert!(d.path().join("via-env/checks.json").exists());
}

#[test]
fn empty_filtered_dataset_exits_three() {
    let d = tempfile::tempdir().unwrap();
    let m = train_small(d.path(), "m");
    let mut records = read_records(&m.join("dataset.jsonl")).unwrap();
    for r in &mut records {
        // point every record at a token the model never predicts there
        r.answer_token = 0;
    }
    write_records(&d.path().join("wrong.jsonl"), &records).unwrap();
    let model = m.join("model.ssmko");
    let o = ssmko(
        d.path(),
        &[
            "knockout-sweep",
            "--model",
            model.to_str().unwrap(),
            "--dataset",
            "wrong.jsonl",
            "--out",
            "e",
        ],
    );
    assert_eq!(code(&o), 3);
    let o = ssmko(
        d.path(),
        &[
            "filter",
            "--model",
            model.to_str().unwrap(),
            "--dataset",
            "wrong.jsonl",
            "--out",
            "f",
        ],
    );
    assert_eq!(code(&o), 3);
}

#[test]
fn figures_for_heatmap_scatter_and_feature_scopes() {
    let d = tempfile::tempdir().unwrap();
    let m = train_small(d.path(), "m");
    let model = m.join("model.ssmko");
    let model = model.to_str().unwrap();
    let data = m.join("dataset.jsonl");
    let data = data.to_str().unwrap();

    let o = ssmko(
        d.path(),
        &[
            "heatmap",
            "--model",
            model,
            "--prompt-id",
            "sxsw-demo",
            "--window",
            "1",
            "--out",
            "h",
        ],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let svg = std::fs::read_to_string(d.path().join("h/heatmap.svg")).unwrap();
    for label in ["0: where", "2: south", "4: southwest?", "8: in"] {
        assert!(svg.contains(&format!(">{label}<")), "missing row {label}");
    }
    let heat: serde_json::Value =
        serde_json::from_slice(&std::fs::read(d.path().join("h/heatmap.json")).unwrap()).unwrap();
    assert_eq!(heat["values"].as_array().unwrap().len(), 9);
    assert_eq!(heat["values"][0].as_array().unwrap().len(), 3);

    let o = ssmko(
        d.path(),
        &[
            "scatter",
            "--model",
            model,
            "--dataset",
            data,
            "--window",
            "2",
            "--out",
            "s",
        ],
    );
    assert_eq!(code(&o), 0);
    assert!(std::fs::read_to_string(d.path().join("s/scatter.svg"))
        .unwrap()
        .contains(r#"class="reference""#));

    let o = ssmko(
        d.path(),
        &["feature-knockout", "--model", model, "--dataset", data, "--out", "fk"],
    );
    assert_eq!(code(&o), 0);
    let svg = std::fs::read_to_string(d.path().join("fk/feature_knockout.svg")).unwrap();
    for scope in ["all", "context_dependent", "context_independent"] {
        assert!(svg.contains(&format!(">{scope}<")));
    }
}

#[test]
fn import_then_dump_attention() {
    let d = tempfile::tempdir().unwrap();
    std::fs::write(
        d.path().join("cf.jsonl"),
        concat!(
            r#"{"prompt": "Beats Music is owned by", "subject": "Beats Music", "target": "Apple"}"#,
            "\n",
            r#"{"prompt": "The Eiffel Tower is in", "subject": "Eiffel Tower", "target": "Paris"}"#,
            "\n",
            r#"{"prompt": "Nothing here", "subject": "Absent", "target": "x"}"#,
            "\n"
        ),
    )
    .unwrap();
    let o = ssmko(d.path(), &["import-counterfact", "--input", "cf.jsonl", "--out", "imp"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(read_records(&d.path().join("imp/dataset.jsonl")).unwrap().len(), 2);
    let rejected: serde_json::Value =
        serde_json::from_slice(&std::fs::read(d.path().join("imp/rejections.json")).unwrap()).unwrap();
    assert_eq!(rejected.as_array().unwrap().len(), 1);

    std::fs::write(d.path().join("empty.jsonl"), "").unwrap();
    assert_eq!(
        code(&ssmko(
            d.path(),
            &["import-counterfact", "--input", "empty.jsonl", "--out", "e"]
        )),
        3
    );

    let m = train_small(d.path(), "m");
    let model = m.join("model.ssmko");
    let o = ssmko(
        d.path(),
        &["dump-attention", "--model", model.to_str().unwrap(), "--out", "dump"],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for layer in 0..3 {
        let a =
            ssmko::archive::TensorArchive::read(&d.path().join(format!("dump/attention_layer{layer}.ssmko"))).unwrap();
        assert_eq!(a.metadata["layer_index"], layer);
        // 4 heads, 9 demo tokens
        assert_eq!(a.tensors["attention"].shape(), &[4, 9, 9]);
    }
}
