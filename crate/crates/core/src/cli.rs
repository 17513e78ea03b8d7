//! Command-line front end.
//!
//! Exit codes: 0 on success, 2 when no counterfactual exists, 1 for any
//! configuration, data or model error.

use std::fs;
use std::io::{self, BufWriter};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use crate::bridge::{self, bridge_open, BridgeConfig};
use crate::classifier::{make_builtin, BuiltinSpec, ClassifierHandle, PredictionRule};
use crate::data::{
    load_dataset, load_manifest, quality_filter, save_dataset, Dataset, MANIFEST_FILE,
};
use crate::eval::{eval_comprehensibility, eval_coverage, CoverageOptions};
use crate::par::Execution;
use crate::plot::{render_overlay, OverlayLabels};
use crate::search::{
    apply_substitution, explain, Explanation, ExplanationRecord, SearchConfig, SearchError,
};
use crate::series::Shape;
use crate::store::build_store;
use crate::synthetic::{generate, write_benchmark, SyntheticConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_ERROR: i32 = 1;
pub const EXIT_NO_COUNTERFACTUAL: i32 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "tscf",
    version,
    about = "Counterfactual explanations for time-series classifiers"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Explain one sample towards a target class.
    Explain(ExplainArgs),
    /// Evaluate explanations over a held-out dataset.
    #[command(subcommand)]
    Eval(EvalCommand),
    /// Remove flatlined samples (population std below a threshold).
    Filter(FilterArgs),
    /// Render a stored explanation as an SVG overlay.
    Plot(PlotArgs),
    /// Write a planted-rule benchmark (train/, test/, model.json).
    GenSynthetic(GenArgs),
    /// Serve a built-in model over the line-delimited bridge protocol.
    ServeBuiltin(ServeArgs),
}

#[derive(Debug, Subcommand)]
pub enum EvalCommand {
    /// Explanation sizes: mean, mode and histogram.
    Comprehensibility(EvalArgs),
    /// Transfer of one explanation per misclassification type.
    Coverage(EvalArgs),
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    /// Training dataset directory; distractors come from here.
    #[arg(long)]
    pub dataset: PathBuf,
    /// `builtin:<spec.json>` or `bridge:<command line>`.
    #[arg(long)]
    pub model: String,
    /// `argmax` or `thresholds:<file with a JSON array>`.
    #[arg(long, default_value = "argmax")]
    pub rule: String,
    /// Background class name for a thresholds rule.
    #[arg(long)]
    pub background: Option<String>,
    #[arg(long, default_value_t = 5)]
    pub restarts: usize,
    #[arg(long, default_value_t = 100)]
    pub max_iters: usize,
    #[arg(long, default_value_t = 3)]
    pub k_distractors: usize,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    #[arg(long, default_value_t = 1)]
    pub initial_subset_size: usize,
    /// Window width in timesteps, or `off` for whole variables.
    #[arg(long, default_value = "off")]
    pub windows: String,
    /// Drop training samples whose population std is below this value.
    #[arg(long)]
    pub std_threshold: Option<f64>,
    /// Restrict `--std-threshold` to one class.
    #[arg(long)]
    pub filter_class: Option<String>,
}

#[derive(Debug, Args)]
pub struct ExplainArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Dataset holding the sample, if different from `--dataset`.
    #[arg(long)]
    pub eval_dataset: Option<PathBuf>,
    #[arg(long)]
    pub sample: String,
    #[arg(long)]
    pub target: String,
    /// Explanation JSON path (stdout when absent).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub svg: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Held-out samples to evaluate; must not share ids with `--dataset`.
    #[arg(long)]
    pub eval_dataset: PathBuf,
    /// Target class (comprehensibility only).
    #[arg(long)]
    pub target: Option<String>,
    /// Skip misclassification types with fewer samples (coverage only).
    #[arg(long, default_value_t = 1)]
    pub min_group_size: usize,
    /// Report JSON path (stdout when absent).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also write the plain-text table here.
    #[arg(long)]
    pub table: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FilterArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long, default_value_t = crate::data::DEFAULT_STD_THRESHOLD)]
    pub std_threshold: f64,
    #[arg(long)]
    pub class: Option<String>,
    /// Output directory for the kept dataset and `removed_ids.txt`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PlotArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub eval_dataset: Option<PathBuf>,
    #[arg(long)]
    pub explanation: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 8)]
    pub variables: usize,
    #[arg(long, default_value_t = 32)]
    pub timesteps: usize,
    /// Comma-separated planted variable indices.
    #[arg(long, default_value = "2", value_delimiter = ',')]
    pub planted: Vec<usize>,
    #[arg(long, default_value_t = 200)]
    pub n_train: usize,
    #[arg(long, default_value_t = 100)]
    pub n_test: usize,
    #[arg(long, default_value_t = 0.2)]
    pub mislabel_rate: f64,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// Built-in model spec JSON.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub variables: usize,
    #[arg(long)]
    pub timesteps: usize,
}

/// Parse `args` (including the program name) and run; returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_ERROR } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(err) => {
            eprintln!("error: {}", format!("{err:#}").replace('\n', " "));
            let no_cf = err.chain().any(|c| {
                matches!(
                    c.downcast_ref::<SearchError>(),
                    Some(SearchError::NoCounterfactual { .. })
                )
            });
            if no_cf {
                EXIT_NO_COUNTERFACTUAL
            } else {
                EXIT_ERROR
            }
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Explain(a) => cmd_explain(a),
        Command::Eval(EvalCommand::Comprehensibility(a)) => cmd_comprehensibility(a),
        Command::Eval(EvalCommand::Coverage(a)) => cmd_coverage(a),
        Command::Filter(a) => cmd_filter(a),
        Command::Plot(a) => cmd_plot(a),
        Command::GenSynthetic(a) => cmd_gen(a),
        Command::ServeBuiltin(a) => cmd_serve(a),
    }
}

enum ModelSource {
    Builtin(BuiltinSpec),
    Bridge(BridgeConfig),
}

/// Everything needed to run a search, validated before any model query.
struct Prepared {
    train: Arc<Dataset>,
    source: ModelSource,
    rule: PredictionRule,
    search: SearchConfig,
}

fn require_file(path: &Path) -> Result<()> {
    if !path.exists() {
        bail!("{} does not exist", path.display());
    }
    Ok(())
}

fn prepare(args: &ModelArgs) -> Result<Prepared> {
    require_file(&args.dataset.join(MANIFEST_FILE))?;
    let manifest = load_manifest(&args.dataset.join(MANIFEST_FILE))?;
    let shape = manifest.shape();

    let source = if let Some(path) = args.model.strip_prefix("builtin:") {
        let path = Path::new(path);
        require_file(path)?;
        let text =
            fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let spec = BuiltinSpec::from_json(&text)
            .with_context(|| format!("model spec {}", path.display()))?;
        spec.validate(shape)?;
        ModelSource::Builtin(spec)
    } else if let Some(cmd) = args.model.strip_prefix("bridge:") {
        let cfg = BridgeConfig::from_command_line(cmd);
        if cfg.command.is_empty() {
            bail!("--model bridge: needs a command");
        }
        ModelSource::Bridge(cfg)
    } else {
        bail!(
            "--model must be builtin:<file> or bridge:<command>, got {:?}",
            args.model
        );
    };

    let rule = if args.rule == "argmax" {
        if args.background.is_some() {
            bail!("--background only applies to a thresholds rule");
        }
        PredictionRule::Argmax
    } else if let Some(path) = args.rule.strip_prefix("thresholds:") {
        let path = Path::new(path);
        require_file(path)?;
        let thresholds: Vec<f64> =
            serde_json::from_str(&fs::read_to_string(path)?).with_context(|| {
                format!("thresholds file {} must hold a JSON array", path.display())
            })?;
        let background = args
            .background
            .as_deref()
            .ok_or_else(|| anyhow!("--rule thresholds needs --background <class>"))?;
        let rule = PredictionRule::Thresholded {
            thresholds,
            background: manifest.class_index(background)?,
        };
        rule.validate(manifest.num_classes())?;
        rule
    } else {
        bail!(
            "--rule must be argmax or thresholds:<file>, got {:?}",
            args.rule
        );
    };

    let window_width = match args.windows.as_str() {
        "off" => None,
        w => Some(
            w.parse::<usize>()
                .map_err(|_| anyhow!("--windows must be a width or off, got {w:?}"))?,
        ),
    };
    let search = SearchConfig {
        restarts: args.restarts,
        max_iters_per_restart: args.max_iters,
        k_distractors: args.k_distractors,
        rng_seed: args.seed,
        initial_subset_size: args.initial_subset_size,
        window_width,
    };
    search.validate(shape.timesteps)?;

    let filter_class = args
        .filter_class
        .as_deref()
        .map(|c| manifest.class_index(c))
        .transpose()?;
    if filter_class.is_some() && args.std_threshold.is_none() {
        bail!("--filter-class needs --std-threshold");
    }
    let mut train = load_dataset(&args.dataset)
        .with_context(|| format!("loading {}", args.dataset.display()))?;
    if let Some(th) = args.std_threshold {
        if th.is_nan() || th < 0.0 {
            bail!("--std-threshold must be nonnegative");
        }
        train = quality_filter(&train, filter_class, th).kept;
    }
    Ok(Prepared {
        train: Arc::new(train),
        source,
        rule,
        search,
    })
}

fn open_model(p: &Prepared) -> Result<ClassifierHandle> {
    let shape = p.train.shape();
    let handle = match &p.source {
        ModelSource::Builtin(spec) => make_builtin(spec.clone(), shape)?,
        ModelSource::Bridge(cfg) => bridge_open(cfg, shape, p.train.manifest().num_classes())?,
    };
    if handle.class_count() != p.train.manifest().num_classes() {
        bail!(
            "model has {} classes, dataset has {}",
            handle.class_count(),
            p.train.manifest().num_classes()
        );
    }
    Ok(handle.with_rule(p.rule.clone())?)
}

fn load_eval(path: &Path, train: &Dataset) -> Result<Dataset> {
    let ds = load_dataset(path).with_context(|| format!("loading {}", path.display()))?;
    if ds.manifest() != train.manifest() {
        bail!(
            "{} has a different manifest than the training dataset",
            path.display()
        );
    }
    Ok(ds)
}

fn write_output(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn cmd_explain(a: ExplainArgs) -> Result<()> {
    let p = prepare(&a.model)?;
    let eval = match &a.eval_dataset {
        Some(path) => load_eval(path, &p.train)?,
        None => (*p.train).clone(),
    };
    let manifest = eval.manifest().clone();
    let target = manifest.class_index(&a.target)?;
    eval.sample(&a.sample)?;
    let clf = open_model(&p)?;
    let store = build_store(p.train.clone(), &clf)?;
    let e = explain(&clf, &store, &eval, &a.sample, target, &p.search)?;
    let mut json = e.to_json(&manifest);
    json.push('\n');
    write_output(a.out.as_deref(), &json)?;
    if let Some(svg_path) = &a.svg {
        let original = eval.sample(&a.sample)?;
        let distractor = p.train.sample(&e.distractor_id)?;
        let svg = overlay(&e, &manifest, original, distractor)?;
        fs::write(svg_path, svg).with_context(|| format!("writing {}", svg_path.display()))?;
    }
    Ok(())
}

fn overlay(
    e: &Explanation,
    manifest: &crate::data::Manifest,
    original: &crate::series::MultivariateSeries,
    distractor: &crate::series::MultivariateSeries,
) -> Result<String> {
    let cf = apply_substitution(original, distractor, &e.substitutions)?;
    let labels = OverlayLabels {
        original_pred: manifest.class_name(e.original_label).to_string(),
        target: manifest.class_name(e.target_label).to_string(),
    };
    Ok(render_overlay(original, &cf, &e.substitutions, &labels)?)
}

fn cmd_comprehensibility(a: EvalArgs) -> Result<()> {
    let p = prepare(&a.model)?;
    let eval = load_eval(&a.eval_dataset, &p.train)?;
    let target_name = a
        .target
        .as_deref()
        .ok_or_else(|| anyhow!("eval comprehensibility needs --target <class>"))?;
    let target = eval.manifest().class_index(target_name)?;
    let clf = open_model(&p)?;
    let store = build_store(p.train.clone(), &clf)?;
    // only samples not already predicted as the target are explained
    let ids: Vec<String> = eval.ids().map(str::to_string).collect();
    let batch: Vec<_> = ids
        .iter()
        .map(|id| eval.sample(id).cloned())
        .collect::<Result<_, _>>()?;
    let predicted = clf.predict_labels(&batch)?;
    let eval_ids: Vec<String> = ids
        .into_iter()
        .zip(predicted)
        .filter(|(_, pred)| *pred != target)
        .map(|(id, _)| id)
        .collect();
    let report = eval_comprehensibility(
        &clf,
        &store,
        &eval,
        &eval_ids,
        target,
        &p.search,
        Execution::default(),
    )?;
    let mut json = report.to_json();
    json.push('\n');
    write_output(a.out.as_deref(), &json)?;
    if let Some(t) = &a.table {
        fs::write(t, report.to_table())?;
    } else if a.out.is_some() {
        print!("{}", report.to_table());
    }
    Ok(())
}

fn cmd_coverage(a: EvalArgs) -> Result<()> {
    let p = prepare(&a.model)?;
    let eval = load_eval(&a.eval_dataset, &p.train)?;
    if a.min_group_size == 0 {
        bail!("--min-group-size must be positive");
    }
    let clf = open_model(&p)?;
    let store = build_store(p.train.clone(), &clf)?;
    let eval_ids: Vec<String> = eval.ids().map(str::to_string).collect();
    let opts = CoverageOptions {
        min_group_size: a.min_group_size,
        execution: Execution::default(),
    };
    let report = eval_coverage(&clf, &store, &eval, &eval_ids, &p.search, opts)?;
    let mut json = report.to_json(eval.manifest());
    json.push('\n');
    write_output(a.out.as_deref(), &json)?;
    let table = report.to_table(eval.manifest());
    if let Some(t) = &a.table {
        fs::write(t, table)?;
    } else if a.out.is_some() {
        print!("{table}");
    }
    Ok(())
}

fn cmd_filter(a: FilterArgs) -> Result<()> {
    if a.std_threshold.is_nan() || a.std_threshold < 0.0 {
        bail!("--std-threshold must be nonnegative");
    }
    let ds =
        load_dataset(&a.dataset).with_context(|| format!("loading {}", a.dataset.display()))?;
    let class = a
        .class
        .as_deref()
        .map(|c| ds.manifest().class_index(c))
        .transpose()?;
    let out = quality_filter(&ds, class, a.std_threshold);
    save_dataset(&out.kept, &a.out)?;
    let mut removed = out.removed.join("\n");
    if !removed.is_empty() {
        removed.push('\n');
    }
    fs::write(a.out.join("removed_ids.txt"), removed)?;
    eprintln!(
        "kept {} samples, removed {}",
        out.kept.len(),
        out.removed.len()
    );
    Ok(())
}

fn cmd_plot(a: PlotArgs) -> Result<()> {
    let train =
        load_dataset(&a.dataset).with_context(|| format!("loading {}", a.dataset.display()))?;
    let eval = match &a.eval_dataset {
        Some(path) => load_eval(path, &train)?,
        None => train.clone(),
    };
    let text = fs::read_to_string(&a.explanation)
        .with_context(|| format!("reading {}", a.explanation.display()))?;
    let record: ExplanationRecord = serde_json::from_str(&text).context("parsing explanation")?;
    let e = Explanation::from_record(&record, eval.manifest())?;
    let original = eval.sample(&e.sample_id)?;
    let distractor = train.sample(&e.distractor_id)?;
    let svg = overlay(&e, eval.manifest(), original, distractor)?;
    fs::write(&a.out, svg).with_context(|| format!("writing {}", a.out.display()))?;
    Ok(())
}

fn cmd_gen(a: GenArgs) -> Result<()> {
    let cfg = SyntheticConfig {
        variables: a.variables,
        timesteps: a.timesteps,
        planted: a.planted,
        n_train: a.n_train,
        n_test: a.n_test,
        mislabel_rate: a.mislabel_rate,
        seed: a.seed,
        ..SyntheticConfig::default()
    };
    let bench = generate(&cfg)?;
    write_benchmark(&bench, &a.out)?;
    Ok(())
}

fn cmd_serve(a: ServeArgs) -> Result<()> {
    let text =
        fs::read_to_string(&a.model).with_context(|| format!("reading {}", a.model.display()))?;
    let spec = BuiltinSpec::from_json(&text)?;
    let handle = make_builtin(spec, Shape::new(a.variables, a.timesteps))?;
    let stdin = io::stdin();
    bridge::serve(&handle, stdin.lock(), BufWriter::new(io::stdout().lock()))?;
    Ok(())
}
