// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use ssmko::archive::{load_model, save_model};
use ssmko::attention::materialize;
use ssmko::checks::{self, CheckOutcome};
use ssmko::harness::plot::{heatmap_chart, scatter_chart, scope_chart, sweep_chart};
use ssmko::harness::{
    build_vocab, demo_triplet, filter_correct_all, load_counterfact, read_records, sweeps_to_csv, to_prompt_records,
    write_records, ExperimentConfig, PromptRecord, RelationConvention, Session, SourceCategory, SweepResult, Vocab,
    DEMO_ID,
};
use ssmko::knockout::SoftmaxKnockoutMode;
use ssmko::trainer::{
    generate_task, toy_attention_spec, toy_ssd_spec, train_records, write_metrics, TaskConfig, TrainConfig,
};
use ssmko::{ModelWeights, Rng};

use crate::output::RunDir;
use crate::{
    CheckArgs, Cli, Command, Convention, DumpArgs, ExperimentArgs, FilterArgs, HeatmapArgs, ImportArgs, ModelKind,
    Outcome, SoftmaxMode, Suite, SweepArgs, TaskPreset, TrainArgs, WindowArgs, WindowStudyArgs,
};

const DEFAULT_OUT: &str = "ssmko-out";
const STUDY_SIZES: [usize; 6] = [1, 3, 5, 9, 12, 15];

struct Ctx {
    out: Option<PathBuf>,
    workers: Option<usize>,
    verbose: bool,
}

impl Ctx {
    fn run_dir(&self, fallback: Option<&Path>) -> Result<RunDir> {
        let root = self
            .out
            .clone()
            .or_else(|| fallback.map(Path::to_path_buf))
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT));
        RunDir::create(root, self.verbose)
    }
}

pub fn run(cli: Cli) -> Result<Outcome> {
    let ctx = Ctx {
        out: cli.out,
        workers: cli.workers,
        verbose: cli.verbose > 0,
    };
    match cli.command {
        Command::Train(a) => train(&ctx, a),
        Command::ImportCounterfact(a) => import(&ctx, a),
        Command::Filter(a) => filter(&ctx, a),
        Command::KnockoutSweep(a) => knockout_sweep(&ctx, a),
        Command::WindowStudy(a) => window_study(&ctx, a),
        Command::FeatureKnockout(a) => feature_knockout(&ctx, a),
        Command::Heatmap(a) => heatmap(&ctx, a),
        Command::Scatter(a) => scatter(&ctx, a),
        Command::Check(a) => check(&ctx, a),
        Command::DumpAttention(a) => dump_attention(&ctx, a),
    }
}

fn default_window(layers: usize) -> usize {
    9.min(layers.saturating_sub(1)).max(1)
}

fn id_of(path: &Path) -> String {
    path.file_stem()
        .map_or_else(|| path.display().to_string(), |s| s.to_string_lossy().into_owned())
}

// ---- train ----

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TrainRun {
    task: TaskConfig,
    kind: ModelKind,
    layers: usize,
    embed_dim: usize,
    train: TrainConfig,
}

impl TrainRun {
    fn preset(task: TaskPreset, seed: u64) -> Self {
        match task {
            TaskPreset::OneFact => Self {
                task: TaskConfig::one_fact(),
                kind: ModelKind::Ssd,
                layers: 2,
                embed_dim: 16,
                train: TrainConfig::one_fact(seed),
            },
            TaskPreset::Facts512 => Self {
                task: TaskConfig::facts_512(),
                kind: ModelKind::Ssd,
                layers: 4,
                embed_dim: 64,
                train: TrainConfig::facts_512(seed),
            },
        }
    }
}

fn train(ctx: &Ctx, a: TrainArgs) -> Result<Outcome> {
    let mut run = match &a.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading train config {}", p.display()))?;
            serde_json::from_str::<TrainRun>(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => TrainRun::preset(a.task.unwrap_or(TaskPreset::OneFact), a.seed.unwrap_or(0)),
    };
    if a.config.is_some() {
        if let Some(t) = a.task {
            run.task = TrainRun::preset(t, 0).task;
        }
    }
    if let Some(s) = a.seed {
        run.train.seed = s;
    }
    if let Some(k) = a.kind {
        run.kind = k;
    }
    if let Some(l) = a.layers {
        run.layers = l;
    }
    if let Some(e) = a.embed_dim {
        run.embed_dim = e;
    }
    if let Some(s) = a.steps {
        run.train.steps = s;
    }
    if let Some(b) = a.batch_size {
        run.train.batch_size = b;
    }
    if let Some(lr) = a.lr {
        run.train.lr.peak = lr;
    }
    run.train.validate()?;

    let mut out = ctx.run_dir(None)?;
    if let Some(p) = &a.config {
        out.input("config", p)?;
    }
    let (task, train, eval) = generate_task(&run.task, &mut Rng::new(run.train.seed))?;
    let spec = match run.kind {
        ModelKind::Ssd => toy_ssd_spec(task.vocab_size, run.layers, run.embed_dim),
        ModelKind::Attention => toy_attention_spec(task.vocab_size, run.layers, run.embed_dim),
    };
    out.note(&format!(
        "training {} facts, {} layers, H={}",
        task.num_facts(),
        run.layers,
        run.embed_dim
    ));
    let mut log = Vec::new();
    let result = train_records(&spec, &train, &eval, &run.train, &mut log);
    write_metrics(&out.path("metrics.jsonl"), &log)?;
    let outcome = result?;
    save_model(&outcome.weights, &out.path("model.ssmko"))?;
    write_records(&out.path("dataset.jsonl"), &eval)?;
    let labels: Vec<String> = (0..task.vocab_size).map(|t| task.token_label(t)).collect();
    out.write_json("tokens.json", &labels)?;
    out.finish("train", &run)?;
    println!(
        "train: accuracy {:.4} after {} steps -> {}",
        outcome.final_accuracy,
        outcome.steps_run,
        out.path("model.ssmko").display()
    );
    if outcome.reached_target {
        Ok(Outcome::Ok)
    } else {
        Ok(Outcome::GateMiss(format!(
            "accuracy {:.4} below target {:?} within {} steps",
            outcome.final_accuracy, run.train.target_accuracy, run.train.steps
        )))
    }
}

// ---- data preparation ----

#[derive(Serialize)]
struct ImportSettings<'a> {
    input: &'a Path,
    vocab: Option<&'a Path>,
    convention: RelationConvention,
    records: usize,
    rejected: usize,
}

fn import(ctx: &Ctx, a: ImportArgs) -> Result<Outcome> {
    let mut out = ctx.run_dir(None)?;
    out.input("input", &a.input)?;
    let imported = load_counterfact(&a.input)?;
    for w in &imported.warnings {
        eprintln!("warning: {w}");
    }
    let vocab = match &a.vocab {
        Some(p) => {
            out.input("vocab", p)?;
            Vocab::read(p)?
        }
        None => build_vocab(&imported),
    };
    let convention = match a.convention {
        Convention::Complement => RelationConvention::Complement,
        Convention::AfterSubject => RelationConvention::AfterSubject,
    };
    let (records, converted_rejects) = to_prompt_records(&imported.records, &vocab, convention);
    let mut rejected = imported.rejected.clone();
    rejected.extend(converted_rejects);
    write_records(&out.path("dataset.jsonl"), &records)?;
    vocab.write(&out.path("vocab.json"))?;
    out.write_json("rejections.json", &rejected)?;
    out.finish(
        "import-counterfact",
        &ImportSettings {
            input: &a.input,
            vocab: a.vocab.as_deref(),
            convention,
            records: records.len(),
            rejected: rejected.len(),
        },
    )?;
    println!(
        "import-counterfact: {} records, {} rejected",
        records.len(),
        rejected.len()
    );
    if records.is_empty() {
        return Ok(Outcome::Empty(format!("no usable records in {}", a.input.display())));
    }
    Ok(Outcome::Ok)
}

#[derive(Serialize)]
struct FilterSettings<'a> {
    models: &'a [PathBuf],
    dataset: &'a Path,
    records_in: usize,
    records_kept: usize,
}

fn filter(ctx: &Ctx, a: FilterArgs) -> Result<Outcome> {
    let mut out = ctx.run_dir(None)?;
    let mut models = Vec::new();
    for p in &a.model {
        out.input("model", p)?;
        models.push(load_model(p).with_context(|| format!("loading {}", p.display()))?);
    }
    out.input("dataset", &a.dataset)?;
    let records = read_records(&a.dataset)?;
    let refs: Vec<&ModelWeights> = models.iter().collect();
    let kept = filter_correct_all(&refs, &records)?;
    write_records(&out.path("filtered.jsonl"), &kept)?;
    out.finish(
        "filter",
        &FilterSettings {
            models: &a.model,
            dataset: &a.dataset,
            records_in: records.len(),
            records_kept: kept.len(),
        },
    )?;
    println!("filter: kept {} of {} records", kept.len(), records.len());
    if kept.is_empty() {
        return Ok(Outcome::Empty("no record is answered correctly by every model".into()));
    }
    Ok(Outcome::Ok)
}

// ---- experiments ----

/// Effective settings of an experiment command, echoed into `run.json`.
#[derive(Debug, Serialize)]
struct Settings {
    model: PathBuf,
    dataset: Option<PathBuf>,
    window_sizes: Vec<usize>,
    categories: Vec<SourceCategory>,
    seed: u64,
    workers: usize,
    softmax_mode: SoftmaxKnockoutMode,
    filter_correct: bool,
    records_in: usize,
    records_used: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    prompt_id: Option<String>,
}

struct Prepared {
    file: Option<ExperimentConfig>,
    model: ModelWeights,
    records: Vec<PromptRecord>,
    out: RunDir,
    settings: Settings,
}

impl Prepared {
    fn session(&self) -> Result<Session<'_>> {
        let dataset_id = self
            .settings
            .dataset
            .as_deref()
            .map_or_else(|| DEMO_ID.to_string(), id_of);
        Ok(Session::new(&self.model, self.records.clone(), self.settings.workers)?
            .with_ids(id_of(&self.settings.model), dataset_id)
            .with_softmax_mode(self.settings.softmax_mode))
    }

    fn layers(&self) -> usize {
        self.model.num_layers()
    }

    fn window(&self, flag: Option<usize>) -> usize {
        flag.or_else(|| self.file.as_ref().and_then(|f| f.window_sizes.first().copied()))
            .unwrap_or_else(|| default_window(self.layers()))
    }

    fn categories(&self, flag: &[SourceCategory]) -> Vec<SourceCategory> {
        if !flag.is_empty() {
            return flag.to_vec();
        }
        match &self.file {
            Some(f) if !f.categories.is_empty() => f.categories.clone(),
            _ => SourceCategory::ALL.to_vec(),
        }
    }

    fn empty(&self) -> Option<Outcome> {
        self.records.is_empty().then(|| {
            Outcome::Empty(format!(
                "{} of {} records left after filtering",
                self.records.len(),
                self.settings.records_in
            ))
        })
    }

    fn finish(&self, command: &str) -> Result<()> {
        self.out.finish(command, &self.settings)
    }
}

fn prepare(ctx: &Ctx, exp: &ExperimentArgs, dataset_required: bool) -> Result<Prepared> {
    let file = match &exp.config {
        Some(p) => {
            Some(ExperimentConfig::read(p).with_context(|| format!("reading experiment config {}", p.display()))?)
        }
        None => None,
    };
    let model_path = exp
        .model
        .clone()
        .or_else(|| file.as_ref().map(|f| f.model.clone()))
        .context("no model given (use --model or --config)")?;
    let dataset = exp.dataset.clone().or_else(|| file.as_ref().map(|f| f.dataset.clone()));
    if dataset_required && dataset.is_none() {
        bail!("no dataset given (use --dataset or --config)");
    }
    let workers = ctx.workers.or_else(|| file.as_ref().map(|f| f.workers)).unwrap_or(1);
    if workers == 0 {
        bail!("--workers must be at least 1");
    }
    let softmax_mode = match exp.softmax_mode {
        Some(SoftmaxMode::PreSoftmax) => SoftmaxKnockoutMode::PreSoftmax,
        Some(SoftmaxMode::PostSoftmax) => SoftmaxKnockoutMode::PostSoftmax,
        None => file.as_ref().map(|f| f.softmax_mode).unwrap_or_default(),
    };
    let mut out = ctx.run_dir(file.as_ref().map(|f| f.output_dir.as_path()))?;
    if let Some(p) = &exp.config {
        out.input("config", p)?;
    }
    out.input("model", &model_path)?;
    let model = load_model(&model_path).with_context(|| format!("loading {}", model_path.display()))?;
    let mut records = Vec::new();
    if let Some(d) = &dataset {
        out.input("dataset", d)?;
        records = read_records(d)?;
    }
    let records_in = records.len();
    let filter = !exp.no_filter;
    if filter && !records.is_empty() {
        records = filter_correct_all(&[&model], &records)?;
        out.note(&format!("{} of {records_in} records answered correctly", records.len()));
    }
    let settings = Settings {
        model: model_path,
        dataset,
        window_sizes: Vec::new(),
        categories: Vec::new(),
        seed: file.as_ref().map_or(0, |f| f.seed),
        workers,
        softmax_mode,
        filter_correct: filter,
        records_in,
        records_used: records.len(),
        prompt_id: None,
    };
    Ok(Prepared {
        file,
        model,
        records,
        out,
        settings,
    })
}

fn write_sweep(out: &RunDir, stem: &str, s: &SweepResult) -> Result<()> {
    out.write_json(&format!("{stem}.json"), s)?;
    let title = format!("knockout to last token, window {}", s.window_size);
    out.write(&format!("{stem}.svg"), sweep_chart(&title, s))
}

fn summarize(sweeps: &[SweepResult]) {
    for s in sweeps {
        for c in s.categories() {
            let curve: Vec<String> = s
                .curve(c)
                .iter()
                .map(|v| v.map_or_else(|| "-".into(), |x| format!("{x:.2}")))
                .collect();
            println!(
                "  w={} {:>19} {:>8}: [{}]",
                s.window_size,
                s.scope,
                c.name(),
                curve.join(", ")
            );
        }
    }
}

fn knockout_sweep(ctx: &Ctx, a: SweepArgs) -> Result<Outcome> {
    let mut p = prepare(ctx, &a.exp, true)?;
    let sizes = if !a.window_sizes.is_empty() {
        a.window_sizes.clone()
    } else if let Some(w) = a.window {
        vec![w]
    } else {
        match &p.file {
            Some(f) if !f.window_sizes.is_empty() => f.window_sizes.clone(),
            _ => vec![default_window(p.layers())],
        }
    };
    p.settings.window_sizes = sizes.clone();
    p.settings.categories = p.categories(&a.categories);
    if let Some(e) = p.empty() {
        p.finish("knockout-sweep")?;
        return Ok(e);
    }
    let sweeps = p.session()?.window_size_study(&sizes, &p.settings.categories)?;
    for s in &sweeps {
        write_sweep(&p.out, &format!("sweep_w{}", s.window_size), s)?;
    }
    p.out.write("sweeps.csv", sweeps_to_csv(&sweeps))?;
    p.finish("knockout-sweep")?;
    println!("knockout-sweep: {} records", p.records.len());
    summarize(&sweeps);
    Ok(Outcome::Ok)
}

fn window_study(ctx: &Ctx, a: WindowStudyArgs) -> Result<Outcome> {
    let mut p = prepare(ctx, &a.exp, true)?;
    let layers = p.layers();
    let sizes = if !a.sizes.is_empty() {
        a.sizes.clone()
    } else {
        let requested = match &p.file {
            Some(f) if !f.window_sizes.is_empty() => f.window_sizes.clone(),
            _ => STUDY_SIZES.to_vec(),
        };
        let (keep, drop): (Vec<usize>, Vec<usize>) = requested.into_iter().partition(|&s| s <= layers);
        if !drop.is_empty() {
            eprintln!("note: skipping window sizes {drop:?} above the model's {layers} layers");
        }
        keep
    };
    if sizes.is_empty() {
        bail!("no window size fits a {layers}-layer model");
    }
    p.settings.window_sizes = sizes.clone();
    p.settings.categories = p.categories(&a.categories);
    if let Some(e) = p.empty() {
        p.finish("window-study")?;
        return Ok(e);
    }
    let sweeps = p.session()?.window_size_study(&sizes, &p.settings.categories)?;
    p.out.write_json("window_study.json", &sweeps)?;
    p.out.write("window_study.csv", sweeps_to_csv(&sweeps))?;
    for s in &sweeps {
        let title = format!("knockout to last token, window {}", s.window_size);
        p.out
            .write(&format!("window_study_w{}.svg", s.window_size), sweep_chart(&title, s))?;
    }
    p.finish("window-study")?;
    println!("window-study: {} records", p.records.len());
    summarize(&sweeps);
    Ok(Outcome::Ok)
}

fn feature_knockout(ctx: &Ctx, a: WindowArgs) -> Result<Outcome> {
    let mut p = prepare(ctx, &a.exp, true)?;
    let window = p.window(a.window);
    p.settings.window_sizes = vec![window];
    p.settings.categories = vec![SourceCategory::Subject];
    if let Some(e) = p.empty() {
        p.finish("feature-knockout")?;
        return Ok(e);
    }
    let sweeps = p.session()?.feature_knockout_study(window)?;
    p.out.write_json("feature_knockout.json", &sweeps)?;
    p.out.write("feature_knockout.csv", sweeps_to_csv(&sweeps))?;
    let title = format!("subject knockout by feature scope, window {window}");
    p.out.write(
        "feature_knockout.svg",
        scope_chart(&title, &sweeps, SourceCategory::Subject),
    )?;
    p.finish("feature-knockout")?;
    println!("feature-knockout: {} records", p.records.len());
    summarize(&sweeps);
    Ok(Outcome::Ok)
}

/// Looks a prompt up in the dataset, falling back to the built-in demo.
fn find_prompt(
    records: &[PromptRecord],
    prompt_id: &str,
    vocab: Option<&Path>,
    model: &ModelWeights,
) -> Result<PromptRecord> {
    if let Some(r) = records.iter().find(|r| r.id == prompt_id) {
        return Ok(r.clone());
    }
    if prompt_id != DEMO_ID {
        bail!("no record with id {prompt_id:?}");
    }
    let t = demo_triplet();
    let vocab = match vocab {
        Some(p) => Vocab::read(p)?,
        None => Vocab::build([t.prompt.as_str(), t.target.as_str()]),
    };
    if vocab.size() > model.spec.vocab_size {
        bail!(
            "vocabulary of {} words does not fit the model's {} tokens",
            vocab.size(),
            model.spec.vocab_size
        );
    }
    let (mut recs, rejected) = to_prompt_records(&[t], &vocab, RelationConvention::Complement);
    match recs.pop() {
        Some(r) => Ok(r),
        None => bail!(
            "demo prompt rejected: {}",
            rejected.first().map_or("", |r| r.reason.as_str())
        ),
    }
}

fn heatmap(ctx: &Ctx, a: HeatmapArgs) -> Result<Outcome> {
    let mut exp = a.exp.clone();
    exp.no_filter = true;
    let mut p = prepare(ctx, &exp, false)?;
    if let Some(v) = &a.vocab {
        p.out.input("vocab", v)?;
    }
    let record = find_prompt(&p.records, &a.prompt_id, a.vocab.as_deref(), &p.model)?;
    let window = p.window(a.window);
    p.records = vec![record];
    p.settings.window_sizes = vec![window];
    p.settings.prompt_id = Some(a.prompt_id.clone());
    p.settings.records_used = 1;
    let heat = p.session()?.knockout_heatmap(0, window)?;
    p.out.write_json("heatmap.json", &heat)?;
    let rows: Vec<String> = heat
        .labels
        .iter()
        .enumerate()
        .map(|(i, l)| format!("{i}: {l}"))
        .collect();
    let cols: Vec<String> = heat.first_layers.iter().map(|f| f.to_string()).collect();
    let title = format!("{} (window {window})", heat.record_id);
    p.out.write(
        "heatmap.svg",
        heatmap_chart(&title, &rows, &cols, &heat.values, "first layer of knockout window"),
    )?;
    p.finish("heatmap")?;
    println!(
        "heatmap: {} tokens x {} windows, p_base {:.4}",
        rows.len(),
        cols.len(),
        heat.p_base
    );
    Ok(Outcome::Ok)
}

fn scatter(ctx: &Ctx, a: WindowArgs) -> Result<Outcome> {
    let mut p = prepare(ctx, &a.exp, true)?;
    let window = a
        .window
        .or_else(|| p.file.as_ref().and_then(|f| f.window_sizes.first().copied()))
        .unwrap_or_else(|| 9.min(p.layers()));
    p.settings.window_sizes = vec![window];
    p.settings.categories = vec![SourceCategory::Last];
    if let Some(e) = p.empty() {
        p.finish("scatter")?;
        return Ok(e);
    }
    let points = p.session()?.last_token_scatter(window)?;
    p.out.write_json("scatter.json", &points)?;
    let xy: Vec<(f64, f64)> = points.iter().map(|q| (q.p_base, q.p_ko)).collect();
    let title = format!("last token cut from itself in the final {window} layers");
    p.out
        .write("scatter.svg", scatter_chart(&title, "p_base", "p_knockout", &xy))?;
    p.finish("scatter")?;
    let up = xy.iter().filter(|(b, k)| k > b).count();
    println!("scatter: {} points, {up} above the diagonal", xy.len());
    Ok(Outcome::Ok)
}

#[derive(Serialize)]
struct CheckSettings {
    seed: u64,
    suites: Vec<String>,
}

fn check(ctx: &Ctx, a: CheckArgs) -> Result<Outcome> {
    let mut suites = a.suite.clone();
    if a.all || suites.is_empty() {
        suites = vec![
            Suite::DualPath,
            Suite::Decay,
            Suite::Contract,
            Suite::Isolation,
            Suite::Gradient,
        ];
    }
    suites.sort();
    suites.dedup();
    let mut outcomes: Vec<CheckOutcome> = Vec::new();
    for s in &suites {
        match s {
            Suite::DualPath => outcomes.push(checks::dual_path_suite(50, 50, a.seed, 1e-10)?),
            Suite::Decay => outcomes.push(checks::decay_identity_suite(1000, a.seed, 1e-12)?),
            Suite::Contract => outcomes.push(checks::knockout_contract_suite(100, a.seed, 1e-10)?),
            Suite::Isolation => outcomes.push(checks::full_isolation_suite(20, a.seed, 1e-10)?),
            Suite::Gradient => outcomes.extend(checks::gradient_suite(a.seed, 1e-5)?),
        }
    }
    println!(
        "{:<26} {:>6} {:>12} {:>10}  result",
        "suite", "cases", "worst", "tolerance"
    );
    for o in &outcomes {
        println!(
            "{:<26} {:>6} {:>12.3e} {:>10.0e}  {}",
            o.name,
            o.cases,
            o.worst,
            o.tolerance,
            if o.passed { "PASS" } else { "FAIL" }
        );
        if !o.passed && !o.detail.is_empty() {
            println!("    {}", o.detail);
        }
    }
    let out = ctx.run_dir(None)?;
    out.write_json("checks.json", &outcomes)?;
    out.finish(
        "check",
        &CheckSettings {
            seed: a.seed,
            suites: outcomes.iter().map(|o| o.name.clone()).collect(),
        },
    )?;
    let failed: Vec<&str> = outcomes.iter().filter(|o| !o.passed).map(|o| o.name.as_str()).collect();
    if failed.is_empty() {
        Ok(Outcome::Ok)
    } else {
        Ok(Outcome::GateMiss(format!("failing suites: {}", failed.join(", "))))
    }
}

fn dump_attention(ctx: &Ctx, a: DumpArgs) -> Result<Outcome> {
    let exp = ExperimentArgs {
        config: None,
        model: Some(a.model.clone()),
        dataset: a.dataset.clone(),
        softmax_mode: None,
        no_filter: true,
    };
    let mut p = prepare(ctx, &exp, false)?;
    if let Some(v) = &a.vocab {
        p.out.input("vocab", v)?;
    }
    let record = find_prompt(&p.records, &a.prompt_id, a.vocab.as_deref(), &p.model)?;
    if let Some(l) = a.layer {
        if l >= p.layers() {
            bail!("layer {l} outside the model's {} layers", p.layers());
        }
    }
    let mut dumps = Vec::new();
    p.model.forward_with(&record.token_ids, |i, layer, x| {
        if a.layer.is_none_or(|l| l == i) {
            dumps.push(materialize(i, layer, x)?);
        }
        layer.mix(x)
    })?;
    for d in &dumps {
        let name = format!("attention_layer{}.ssmko", d.layer_index);
        d.write_dump(&p.out.path(&name))?;
        p.out.note(&format!("wrote {name}"));
    }
    p.out.write_json("prompt.json", &record)?;
    p.settings.prompt_id = Some(a.prompt_id.clone());
    p.settings.records_used = 1;
    p.finish("dump-attention")?;
    println!(
        "dump-attention: {} layers, {} tokens",
        dumps.len(),
        record.token_ids.len()
    );
    Ok(Outcome::Ok)
}
