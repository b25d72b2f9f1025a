//! The `statfuse` command-line tool.
//!
//! Exit codes: 0 on success, 1 for usage errors (bad flags, a method used
//! without the model it needs), 2 for data and format errors.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use statfuse_core::calibration::{
    grid_search, Calibration, DevSample, RegularizationConfig, Subsample, DEFAULT_BETA_GRID, DEFAULT_DELTA_GRID,
    DEFAULT_MAX_ITERATIONS,
};
use statfuse_core::domain::{ClassSet, FusionModel, LabelMap, ScoreMap, DEFAULT_SMOOTHING};
use statfuse_core::fusion::{run_method, FuseOptions, FusionInputs, FusionMethod, SampleStack};
use statfuse_core::io::{self, Manifest, TENSOR_EXTENSION};
use statfuse_core::metrics::{bench_inference, bench_workload, format_table, EvalAccumulator};
use statfuse_core::synth::{derive_seed, Scenario, Split, StackSpec, PRESETS};
use statfuse_core::Error;

#[derive(Debug, Parser)]
#[command(
    name = "statfuse",
    version,
    about = "Calibrate and fuse independently trained dense classifiers"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic scenario: label maps, expert score maps and manifests
    Simulate(SimulateArgs),
    /// Gather confusion matrices and the class prior from a development manifest
    Calibrate(CalibrateArgs),
    /// Fit per-class Dirichlet parameters into an existing model
    Fit(FitArgs),
    /// Fuse the experts of a manifest and write fused label maps
    Fuse(FuseArgs),
    /// Evaluate fused label maps against ground truth
    Eval(EvalArgs),
    /// Choose (beta, delta) by development-set mean IoU of Dirichlet fusion
    GridSearch(GridSearchArgs),
    /// Time each fusion method on one preloaded image
    Bench(BenchArgs),
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Scenario preset (complementary, degraded, sample_stacks, underconfident)
    #[arg(long)]
    pub preset: String,
    /// Output directory
    #[arg(long)]
    pub out: PathBuf,
    /// Seed for every random draw
    #[arg(long)]
    pub seed: u64,
    /// Images per split (overrides the preset)
    #[arg(long)]
    pub images: Option<usize>,
    /// Image height (overrides the preset)
    #[arg(long)]
    pub height: Option<usize>,
    /// Image width (overrides the preset)
    #[arg(long)]
    pub width: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SubsampleArgs {
    /// Keep this fraction of elements per image for the Dirichlet statistics
    #[arg(long)]
    pub subsample_rate: Option<f64>,
    /// Seed of the subsample (required with --subsample-rate)
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    /// Development manifest
    #[arg(long)]
    pub manifest: PathBuf,
    /// Model file to write
    #[arg(long)]
    pub out: PathBuf,
    /// Comma-separated class names (default class_0, class_1, ...)
    #[arg(long, value_delimiter = ',')]
    pub class_names: Option<Vec<String>>,
    /// Class excluded from calibration and metrics
    #[arg(long)]
    pub ignore_index: Option<usize>,
    /// Pseudo-count added to every confusion cell at fusion time
    #[arg(long, default_value_t = DEFAULT_SMOOTHING)]
    pub smoothing: f64,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    /// Model written by `calibrate`
    #[arg(long)]
    pub model: PathBuf,
    /// Development manifest the model was calibrated on
    #[arg(long)]
    pub manifest: PathBuf,
    /// Output model file (default: overwrite --model)
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Discrimination weight in [0, 1)
    #[arg(long, default_value_t = 0.0)]
    pub beta: f64,
    /// Weight of the squared-norm penalty (>= 0)
    #[arg(long, default_value_t = 0.0)]
    pub delta: f64,
    /// Iteration cap of every fit
    #[arg(long, default_value_t = DEFAULT_MAX_ITERATIONS)]
    pub max_iter: usize,
    #[command(flatten)]
    pub subsample: SubsampleArgs,
}

#[derive(Debug, Args)]
pub struct FuseArgs {
    /// Manifest of the images to fuse
    #[arg(long)]
    pub manifest: PathBuf,
    /// Fusion method: bayes, dirichlet, average or variance
    #[arg(long)]
    pub method: String,
    /// Calibrated model (required by every method except average)
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Directory for the fused label maps
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Directory of fused label maps
    #[arg(long)]
    pub pred: PathBuf,
    /// Directory of ground-truth label maps
    #[arg(long)]
    pub gt: PathBuf,
    /// Report file (class<TAB>metric<TAB>value)
    #[arg(long)]
    pub out: PathBuf,
    /// Take class names and ignore index from this model
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Number of classes (when no model is given)
    #[arg(long)]
    pub classes: Option<usize>,
    /// Comma-separated class names (when no model is given)
    #[arg(long, value_delimiter = ',')]
    pub class_names: Option<Vec<String>>,
    /// Class excluded from the metrics (when no model is given)
    #[arg(long)]
    pub ignore_index: Option<usize>,
    /// Column title in the printed table
    #[arg(long, default_value = "fused")]
    pub name: String,
    /// Do not print the table
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Debug, Args)]
pub struct GridSearchArgs {
    /// Development manifest
    #[arg(long)]
    pub manifest: PathBuf,
    /// Model written by `calibrate`
    #[arg(long)]
    pub model: PathBuf,
    /// Table file (beta<TAB>delta<TAB>mean_iou<TAB>fallbacks, then a `best` line)
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the model fitted at the best pair
    #[arg(long)]
    pub fit_out: Option<PathBuf>,
    /// Comma-separated beta grid
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_BETA_GRID)]
    pub betas: Vec<f64>,
    /// Comma-separated delta grid
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_DELTA_GRID)]
    pub deltas: Vec<f64>,
    /// Iteration cap of every fit
    #[arg(long, default_value_t = DEFAULT_MAX_ITERATIONS)]
    pub max_iter: usize,
    #[command(flatten)]
    pub subsample: SubsampleArgs,
    /// Do not print the chosen pair
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Comma-separated methods (default: all four)
    #[arg(long, value_delimiter = ',')]
    pub methods: Option<Vec<String>>,
    /// Timed repetitions per method
    #[arg(long, default_value_t = 100)]
    pub trials: usize,
    /// Benchmark the first image of this manifest instead of synthetic input
    #[arg(long, requires = "model")]
    pub manifest: Option<PathBuf>,
    /// Model for --manifest
    #[arg(long, requires = "manifest")]
    pub model: Option<PathBuf>,
    /// Seed of the synthetic input
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 384)]
    pub height: usize,
    #[arg(long, default_value_t = 768)]
    pub width: usize,
    #[arg(long, default_value_t = 12)]
    pub classes: usize,
    #[arg(long, default_value_t = 2)]
    pub experts: usize,
    /// Monte-Carlo samples per expert in the synthetic input
    #[arg(long, default_value_t = 4)]
    pub samples: usize,
}

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn usage(message: impl Into<String>) -> Self {
        CliError {
            code: 1,
            message: message.into(),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError {
            code: 2,
            message: e.to_string(),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

/// Parses `argv` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("statfuse: {}", e.message);
            e.code
        }
    }
}

pub fn execute(command: Command) -> CliResult<()> {
    match command {
        Command::Simulate(a) => simulate(a),
        Command::Calibrate(a) => calibrate(a),
        Command::Fit(a) => fit(a),
        Command::Fuse(a) => fuse(a),
        Command::Eval(a) => eval(a),
        Command::GridSearch(a) => grid(a),
        Command::Bench(a) => bench(a),
    }
}

fn create_dir(path: &Path) -> CliResult<()> {
    fs::create_dir_all(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

fn image_name(i: usize) -> String {
    format!("img_{i:04}.{TENSOR_EXTENSION}")
}

fn expert_spec_text(scenario: &Scenario, seed: u64) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "preset {}", scenario.name);
    let _ = writeln!(s, "seed {seed}");
    let _ = writeln!(s, "classes {}", scenario.class_set.len());
    let _ = writeln!(s, "names {}", scenario.class_set.names().join(" "));
    let freqs: Vec<String> = scenario.class_frequencies.iter().map(|f| format!("{f:.16e}")).collect();
    let _ = writeln!(s, "frequencies {}", freqs.join(" "));
    let _ = writeln!(s, "size {} {}", scenario.height, scenario.width);
    let _ = writeln!(s, "region {}", scenario.region_size);
    let _ = writeln!(s, "images {}", scenario.images);
    for (e, spec) in scenario.experts.iter().enumerate() {
        let _ = writeln!(s, "expert {}", spec.id);
        for (c, a) in spec.generative_alphas.iter().enumerate() {
            let v: Vec<String> = a.iter().map(|x| format!("{x:.16e}")).collect();
            let _ = writeln!(s, "alpha {c} {}", v.join(" "));
        }
        if let Some(StackSpec {
            samples,
            concentrations,
        }) = &scenario.stacks
        {
            let _ = writeln!(s, "samples {samples} {:.16e}", concentrations[e]);
        }
    }
    s
}

fn simulate(a: SimulateArgs) -> CliResult<()> {
    let mut scenario = Scenario::preset(&a.preset).map_err(|_| {
        CliError::usage(format!(
            "--preset: unknown preset {:?} (one of {})",
            a.preset,
            PRESETS.join(", ")
        ))
    })?;
    if let Some(n) = a.images {
        if n == 0 {
            return Err(CliError::usage("--images must be positive"));
        }
        scenario.images = n;
    }
    for (flag, v, slot) in [
        ("--height", a.height, &mut scenario.height),
        ("--width", a.width, &mut scenario.width),
    ] {
        if let Some(v) = v {
            if v == 0 {
                return Err(CliError::usage(format!("{flag} must be positive")));
            }
            *slot = v;
        }
    }
    create_dir(&a.out)?;
    write_text(&a.out.join("scenario.txt"), &expert_spec_text(&scenario, a.seed))?;
    for split in [Split::Dev, Split::Test] {
        let root = a.out.join(split.as_str());
        let mut manifest = String::new();
        for spec in &scenario.experts {
            create_dir(&root.join(&spec.id))?;
            let _ = writeln!(manifest, "{}\t{}/{}", spec.id, split.as_str(), spec.id);
        }
        create_dir(&root.join("gt"))?;
        let _ = writeln!(manifest, "gt\t{}/gt", split.as_str());
        let images = (0..scenario.images)
            .into_par_iter()
            .map(|i| scenario.simulate(a.seed, split, i))
            .collect::<Result<Vec<_>, _>>()?;
        for (i, img) in images.iter().enumerate() {
            let name = image_name(i);
            io::write_label_map(&root.join("gt").join(&name), &img.gt)?;
            for (e, spec) in scenario.experts.iter().enumerate() {
                let path = root.join(&spec.id).join(&name);
                match img.stacks.get(e) {
                    Some(stack) => io::write_sample_stack(&path, stack)?,
                    None => io::write_score_map(&path, &img.experts[e])?,
                }
            }
        }
        write_text(&a.out.join(format!("{}.tsv", split.as_str())), &manifest)?;
    }
    Ok(())
}

fn load_manifest(path: &Path) -> CliResult<(Manifest, Vec<String>)> {
    let m = Manifest::load(path)?;
    let names = m.basenames()?;
    if names.is_empty() {
        return Err(Error::Format {
            path: m.gt.clone(),
            message: "no ground-truth tensors".into(),
        }
        .into());
    }
    Ok((m, names))
}

fn load_scores(m: &Manifest, name: &str) -> CliResult<(Vec<ScoreMap>, LabelMap)> {
    let gt = io::read_label_map(&m.gt.join(name))?;
    let scores = m
        .experts
        .iter()
        .map(|(_, dir)| {
            let path = dir.join(name);
            let s = io::read_score_map(&path)?;
            if !gt.same_dims(s.height(), s.width()) {
                return Err(Error::Format {
                    path,
                    message: format!(
                        "scores are {}x{}, ground truth is {}x{}",
                        s.height(),
                        s.width(),
                        gt.height(),
                        gt.width()
                    ),
                });
            }
            Ok(s)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok((scores, gt))
}

fn subsample(a: &SubsampleArgs) -> CliResult<Option<Subsample>> {
    match (a.subsample_rate, a.seed) {
        (None, _) => Ok(None),
        (Some(_), None) => Err(CliError::usage("--subsample-rate requires --seed")),
        (Some(rate), Some(seed)) => {
            let s = Subsample { rate, seed };
            s.validate()
                .map_err(|e| CliError::usage(format!("--subsample-rate: {e}")))?;
            Ok(Some(s))
        }
    }
}

fn accumulate(m: &Manifest, names: &[String], class_set: &ClassSet, sub: Option<Subsample>) -> CliResult<Calibration> {
    let ids: Vec<String> = m.experts.iter().map(|(id, _)| id.clone()).collect();
    let empty = Calibration::new(class_set.clone(), ids)?;
    let shards = names
        .par_iter()
        .enumerate()
        .map(|(i, name)| -> CliResult<Calibration> {
            let (scores, gt) = load_scores(m, name)?;
            let refs: Vec<&ScoreMap> = scores.iter().collect();
            let mut shard = empty.clone();
            let image_sub = sub.map(|s| Subsample {
                rate: s.rate,
                seed: derive_seed(s.seed, &[i as u64]),
            });
            shard.add_image(&refs, &gt, image_sub).map_err(|e| {
                CliError::from(Error::Format {
                    path: m.gt.join(name),
                    message: e.to_string(),
                })
            })?;
            Ok(shard)
        })
        .collect::<CliResult<Vec<_>>>()?;
    let mut total = empty;
    for s in &shards {
        total.merge(s)?;
    }
    Ok(total)
}

fn calibrate(a: CalibrateArgs) -> CliResult<()> {
    if !(a.smoothing >= 0.0 && a.smoothing.is_finite()) {
        return Err(CliError::usage("--smoothing must be finite and >= 0"));
    }
    let (m, names) = load_manifest(&a.manifest)?;
    let k = io::read_score_map(&m.experts[0].1.join(&names[0]))?.classes();
    let class_set = match a.class_names {
        Some(n) if n.len() != k => {
            return Err(CliError::usage(format!(
                "--class-names lists {} names, the data has {k} classes",
                n.len()
            )))
        }
        Some(n) => ClassSet::new(n, a.ignore_index),
        None => ClassSet::numbered(k, a.ignore_index),
    }
    .map_err(|e| CliError::usage(e.to_string()))?;
    let cal = accumulate(&m, &names, &class_set, None)?;
    let model = cal.base_model(a.smoothing)?;
    io::save_model(&a.out, &model)?;
    let absent = cal.absent_classes();
    if !absent.is_empty() {
        eprintln!("statfuse: classes without development elements: {absent:?}");
    }
    Ok(())
}

fn check_experts(model: &FusionModel, m: &Manifest, manifest_path: &Path) -> CliResult<()> {
    for (id, _) in &m.experts {
        if model.expert(id).is_err() {
            return Err(CliError::usage(format!(
                "{}: expert {id:?} is not in the model",
                manifest_path.display()
            )));
        }
    }
    Ok(())
}

fn regularization(beta: f64, delta: f64, max_iter: usize) -> CliResult<RegularizationConfig> {
    let cfg = RegularizationConfig {
        max_iterations: max_iter,
        ..RegularizationConfig::new(beta, delta)
    };
    cfg.validate()
        .map_err(|e| CliError::usage(format!("--beta/--delta/--max-iter: {e}")))?;
    Ok(cfg)
}

fn fit(a: FitArgs) -> CliResult<()> {
    let cfg = regularization(a.beta, a.delta, a.max_iter)?;
    let sub = subsample(&a.subsample)?;
    let mut model = io::load_model(&a.model)?;
    let (m, names) = load_manifest(&a.manifest)?;
    check_experts(&model, &m, &a.manifest)?;
    let cal = accumulate(&m, &names, &model.class_set, sub)?;
    let fits = cal.fit_dirichlet(&cfg)?;
    for (id, f) in cal.expert_ids().iter().zip(&fits) {
        if !f.unconverged.is_empty() {
            eprintln!(
                "statfuse: expert {id}: fixed point hit the iteration cap for classes {:?}",
                f.unconverged
            );
        }
        if !f.fallbacks.is_empty() {
            eprintln!("statfuse: expert {id}: kept the MLE for classes {:?}", f.fallbacks);
        }
    }
    cal.apply_fit(&mut model, fits, &cfg)?;
    io::save_model(a.out.as_ref().unwrap_or(&a.model), &model)?;
    Ok(())
}

fn parse_method(s: &str) -> CliResult<FusionMethod> {
    s.parse().map_err(|e: Error| CliError::usage(format!("--method: {e}")))
}

/// Loads the model a method needs and checks it before any data is read.
fn model_for(method: FusionMethod, path: Option<&Path>) -> CliResult<Option<FusionModel>> {
    if !method.requires_model() {
        return path.map(io::load_model).transpose().map_err(Into::into);
    }
    let path = path.ok_or_else(|| CliError::usage(format!("--method {method} requires --model")))?;
    let model = io::load_model(path)?;
    if method == FusionMethod::Dirichlet {
        if let Some(e) = model.experts.iter().find(|e| e.dirichlet.is_none()) {
            return Err(CliError::usage(format!(
                "{}: expert {:?} has no `dirichlet present` section; run `statfuse fit` first",
                path.display(),
                e.id
            )));
        }
    }
    Ok(Some(model))
}

fn load_inputs(m: &Manifest, name: &str, method: FusionMethod) -> CliResult<FusionInputs> {
    if method == FusionMethod::Variance {
        let stacks = m
            .experts
            .iter()
            .map(|(id, dir)| io::read_sample_stack(&dir.join(name), id))
            .collect::<Result<Vec<SampleStack>, _>>()?;
        return Ok(FusionInputs::from_stacks(stacks));
    }
    let (scores, _) = load_scores(m, name)?;
    Ok(FusionInputs::from_scores(
        m.experts.iter().map(|(id, _)| id.clone()).zip(scores).collect(),
    ))
}

fn fuse(a: FuseArgs) -> CliResult<()> {
    let method = parse_method(&a.method)?;
    let model = model_for(method, a.model.as_deref())?;
    let (m, names) = load_manifest(&a.manifest)?;
    if let Some(model) = &model {
        check_experts(model, &m, &a.manifest)?;
    }
    create_dir(&a.out)?;
    let fused = names
        .par_iter()
        .map(|name| -> CliResult<LabelMap> {
            let inputs = load_inputs(&m, name, method)?;
            Ok(run_method(method, &inputs, model.as_ref(), FuseOptions::default())?.labels)
        })
        .collect::<CliResult<Vec<_>>>()?;
    for (name, labels) in names.iter().zip(&fused) {
        io::write_label_map(&a.out.join(name), labels)?;
    }
    Ok(())
}

fn eval(a: EvalArgs) -> CliResult<()> {
    let class_set = match (&a.model, a.classes) {
        (Some(path), _) => io::load_model(path)?.class_set,
        (None, Some(k)) => match a.class_names.clone() {
            Some(n) if n.len() != k => return Err(CliError::usage("--class-names must list --classes names")),
            Some(n) => ClassSet::new(n, a.ignore_index),
            None => ClassSet::numbered(k, a.ignore_index),
        }
        .map_err(|e| CliError::usage(e.to_string()))?,
        (None, None) => return Err(CliError::usage("eval needs --model or --classes")),
    };
    let names = io::list_tensor_files(&a.gt)?;
    if names.is_empty() {
        return Err(Error::Format {
            path: a.gt.clone(),
            message: "no ground-truth tensors".into(),
        }
        .into());
    }
    let shards = names
        .par_iter()
        .map(|name| -> CliResult<EvalAccumulator> {
            let gt = io::read_label_map(&a.gt.join(name))?;
            let pred_path = a.pred.join(name);
            let pred = io::read_label_map(&pred_path)?;
            let mut acc = EvalAccumulator::new(class_set.clone());
            acc.add(&pred, &gt).map_err(|e| Error::Format {
                path: pred_path,
                message: e.to_string(),
            })?;
            Ok(acc)
        })
        .collect::<CliResult<Vec<_>>>()?;
    let mut acc = EvalAccumulator::new(class_set);
    for s in &shards {
        acc.merge(s)?;
    }
    let report = acc.report();
    write_text(&a.out, &report.to_tsv())?;
    if !a.quiet {
        print!("{}", format_table(&[(a.name.as_str(), &report)])?);
    }
    Ok(())
}

fn grid(a: GridSearchArgs) -> CliResult<()> {
    let template = regularization(0.0, 0.0, a.max_iter)?;
    if a.betas.is_empty() || a.deltas.is_empty() {
        return Err(CliError::usage("--betas and --deltas must be non-empty"));
    }
    for (&beta, &delta) in a
        .betas
        .iter()
        .zip(a.deltas.iter().cycle())
        .chain(a.betas.iter().cycle().zip(&a.deltas))
    {
        regularization(beta, delta, a.max_iter)?;
    }
    let sub = subsample(&a.subsample)?;
    let base = io::load_model(&a.model)?;
    let (m, names) = load_manifest(&a.manifest)?;
    check_experts(&base, &m, &a.manifest)?;
    let cal = accumulate(&m, &names, &base.class_set, sub)?;
    let dev = names
        .par_iter()
        .map(|name| load_scores(&m, name).map(|(experts, gt)| DevSample { experts, gt }))
        .collect::<CliResult<Vec<_>>>()?;
    let result = grid_search(&cal, &base, &dev, &a.betas, &a.deltas, &template)?;
    let mut out = String::from("beta\tdelta\tmean_iou\tfallbacks\n");
    for p in &result.table {
        let fallbacks: Vec<String> = p.fallbacks.iter().map(|(id, c)| format!("{id}:{c}")).collect();
        let fb = if fallbacks.is_empty() {
            "-".to_string()
        } else {
            fallbacks.join(",")
        };
        let _ = writeln!(out, "{}\t{}\t{}\t{fb}", p.beta, p.delta, p.mean_iou);
    }
    let best = &result.best;
    let _ = writeln!(out, "best\t{}\t{}\t{}", best.beta, best.delta, best.mean_iou);
    write_text(&a.out, &out)?;
    if !a.quiet {
        println!(
            "best beta={} delta={} dev mean IoU={:.4}",
            best.beta, best.delta, best.mean_iou
        );
    }
    if let Some(path) = &a.fit_out {
        let cfg = RegularizationConfig {
            beta: best.beta,
            delta: best.delta,
            ..template
        };
        let mut model = base.clone();
        cal.apply_fit(&mut model, cal.fit_dirichlet(&cfg)?, &cfg)?;
        io::save_model(path, &model)?;
    }
    Ok(())
}

fn synthetic_bench_input(a: &BenchArgs) -> CliResult<(FusionInputs, FusionModel)> {
    if a.classes < 2 || a.experts == 0 || a.samples < 2 || a.height == 0 || a.width == 0 {
        return Err(CliError::usage(
            "bench needs --classes >= 2, --experts >= 1, --samples >= 2 and a non-empty image",
        ));
    }
    let scenario = Scenario::throughput(a.classes, a.experts, a.samples, a.height, a.width)?;
    Ok(bench_workload(&scenario, a.seed)?)
}

fn bench(a: BenchArgs) -> CliResult<()> {
    if a.trials < 2 {
        return Err(CliError::usage("--trials must be at least 2"));
    }
    let methods = match &a.methods {
        Some(list) => list.iter().map(|s| parse_method(s)).collect::<CliResult<Vec<_>>>()?,
        None => FusionMethod::ALL.to_vec(),
    };
    let (inputs, model) = match (&a.manifest, &a.model) {
        (Some(manifest), Some(model_path)) => {
            let model = io::load_model(model_path)?;
            let (m, names) = load_manifest(manifest)?;
            check_experts(&model, &m, manifest)?;
            let wants_stacks = methods.contains(&FusionMethod::Variance);
            let method = if wants_stacks {
                FusionMethod::Variance
            } else {
                FusionMethod::Average
            };
            (load_inputs(&m, &names[0], method)?, model)
        }
        _ => synthetic_bench_input(&a)?,
    };
    if methods.contains(&FusionMethod::Dirichlet) && !model.has_dirichlet() {
        return Err(CliError::usage(
            "dirichlet benchmark needs a model with Dirichlet parameters",
        ));
    }
    let (h, w) = inputs
        .scores
        .first()
        .map(|(_, s)| (s.height(), s.width()))
        .unwrap_or((0, 0));
    println!(
        "{}x{} elements, {} classes, {} experts, {} trials, single thread",
        w,
        h,
        model.class_set.len(),
        inputs.scores.len(),
        a.trials
    );
    for method in methods {
        let stats = bench_inference(method, &inputs, Some(&model), a.trials)?;
        println!(
            "{:<10} {:>10.3} ± {:.3} ms",
            method.as_str(),
            stats.mean_ms,
            stats.std_ms
        );
    }
    Ok(())
}
