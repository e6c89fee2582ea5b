//! `seqdream` command line.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::config::HarnessConfig;
use super::grid::{ranking_file, run_grid, GridSpec};
use super::rundir::{ManifestEntry, RunDir, RunStatus};
use crate::classifier::{accuracy, build_resnet, load_weights, save_weights, train, EpochRecord, LayerSelector, ResNetConfig};
use crate::dataset::{load_ucr_tsv, synth_binary, z_normalize, Dataset, Delimiter};
use crate::dreamer::{
    dream_ascent, dream_target, select_seed_input, sequence_dream_in, DreamConfig, DreamContext, DreamResult,
    SeedStrategy, TargetMode, Variant,
};
use crate::error::{Error, Result};
use crate::evaluator::EvalContext;

#[derive(Parser, Debug)]
#[command(name = "seqdream", version, about = "Activation maximization for time-series classifiers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic two-class dataset.
    Synth(SynthArgs),
    /// Train the classifier and write its weights.
    Train(TrainArgs),
    /// Run one dreaming optimization.
    Dream(DreamArgs),
    /// Grid search over the sequence-dreaming hyperparameters.
    Grid(GridArgs),
    /// Score dream results against the training distribution.
    Eval(EvalArgs),
    /// Export the activation distribution and PCA projection table.
    Project(ProjectArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    seed: u64,
    /// Output directory for train.tsv, test.tsv and stats.txt.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 200)]
    n_train: usize,
    #[arg(long, default_value_t = 100)]
    n_test: usize,
    #[arg(long, default_value_t = 128)]
    length: usize,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Configuration file (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run directory; overrides the config and SEQDREAM_OUT_DIR.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Directory holding train.tsv and test.tsv.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    train: Option<PathBuf>,
    #[arg(long)]
    test: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Model preset: compact or standard.
    #[arg(long)]
    preset: Option<String>,
}

#[derive(Args, Debug)]
struct DreamArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    seed: u64,
    /// ascent, target or sd.
    #[arg(long)]
    variant: Option<String>,
    /// center or max.
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    class: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// mean-activation-nearest, random-noise or given-series.
    #[arg(long)]
    seed_strategy: Option<String>,
    /// Starting series for the given-series strategy (numbers separated by
    /// whitespace or commas).
    #[arg(long)]
    seed_series: Option<PathBuf>,
    #[arg(long)]
    weights: Option<PathBuf>,
    /// File stem of the result inside dreams/.
    #[arg(long)]
    name: Option<String>,
}

#[derive(Args, Debug)]
struct GridArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    seed: u64,
    /// Extra seeds; every configuration runs once per seed.
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    class: Option<usize>,
    #[arg(long)]
    parallelism: Option<usize>,
    #[arg(long)]
    weights: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    /// Result files; defaults to every file in dreams/.
    #[arg(long)]
    result: Vec<PathBuf>,
    #[arg(long)]
    layer: Option<String>,
    #[arg(long)]
    weights: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ProjectArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    result: Vec<PathBuf>,
    #[arg(long)]
    layer: Option<String>,
    #[arg(long)]
    weights: Option<PathBuf>,
}

pub const EXIT_USAGE: i32 = 2;
pub const EXIT_CONFIG: i32 = 3;
pub const EXIT_IO: i32 = 4;
pub const EXIT_MISSING_WEIGHTS: i32 = 5;
pub const EXIT_DATA: i32 = 6;
pub const EXIT_NUMERIC: i32 = 7;

/// Exit code and category label for an error.
pub fn classify(e: &Error) -> (i32, &'static str) {
    match e {
        Error::Config(_) | Error::MissingKey(_) | Error::InvalidArgument(_) => (EXIT_CONFIG, "config"),
        Error::Io { .. } => (EXIT_IO, "io"),
        Error::MissingWeights(_) => (EXIT_MISSING_WEIGHTS, "missing-weights"),
        Error::Data(_) | Error::Parse { .. } | Error::Shape(_) | Error::Corrupt(_) | Error::Version { .. } | Error::Serde(_) => {
            (EXIT_DATA, "data")
        }
        Error::NonFinite(_) => (EXIT_NUMERIC, "numeric"),
        Error::Tape(_) => (1, "internal"),
    }
}

/// Runs the command line `argv` (program name first) and returns the exit
/// code. Output goes to stdout, errors to stderr.
pub fn cli_main<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            let (code, kind) = classify(&e);
            eprintln!("error[{kind}]: {e}");
            code
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train_cmd(a),
        Command::Dream(a) => dream_cmd(a),
        Command::Grid(a) => grid_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Project(a) => project_cmd(a),
    }
}

fn parse_flag<T: std::str::FromStr<Err = Error>>(v: &Option<String>, what: &str) -> Result<Option<T>> {
    v.as_deref()
        .map(|s| s.parse::<T>().map_err(|e| Error::Config(format!("--{what}: {e}"))))
        .transpose()
}

fn synth(a: SynthArgs) -> Result<()> {
    let (train, test) = synth_binary(a.n_train, a.n_test, a.length, a.seed)?;
    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    for (name, text) in [
        ("train.tsv", train.to_ucr_string(Delimiter::Tab)),
        ("test.tsv", test.to_ucr_string(Delimiter::Tab)),
        ("stats.txt", train.stats_text()),
    ] {
        let p = a.out.join(name);
        std::fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
    }
    println!("wrote {} train / {} test series of length {} to {}", train.len(), test.len(), a.length, a.out.display());
    Ok(())
}

/// Loaded configuration, run directory and data paths of one command.
struct Setup {
    cfg: HarnessConfig,
    dir: RunDir,
    train_path: PathBuf,
    test_path: Option<PathBuf>,
}

fn setup(common: &Common) -> Result<Setup> {
    let mut cfg = match &common.config {
        Some(p) => HarnessConfig::load(p)?,
        None => HarnessConfig::default(),
    };
    cfg.apply_env(|k| std::env::var(k).ok())?;
    if let Some(out) = &common.out {
        cfg.data.out_dir = out.clone();
    }
    let dir = RunDir::create(&cfg.data.out_dir)?;

    let from_dir = |name: &str| common.data.as_ref().map(|d| d.join(name));
    let mut train_path = common.train.clone().or_else(|| from_dir("train.tsv")).or_else(|| cfg.data.train.clone());
    let mut test_path = common.test.clone().or_else(|| from_dir("test.tsv")).or_else(|| cfg.data.test.clone());
    if train_path.is_none() {
        // fall back to the data the run directory was trained on
        if let Some(entry) = dir.last_done("train")? {
            for input in entry.inputs {
                if let Some(p) = input.strip_prefix("train:") {
                    train_path = Some(PathBuf::from(p));
                } else if let Some(p) = input.strip_prefix("test:") {
                    test_path = test_path.or(Some(PathBuf::from(p)));
                }
            }
        }
    }
    let train_path = train_path.ok_or_else(|| Error::MissingKey("data.train".into()))?;
    Ok(Setup {
        cfg,
        dir,
        train_path,
        test_path,
    })
}

impl Setup {
    fn load(&self, path: &Path, reference: Option<&Dataset>) -> Result<Dataset> {
        let map = reference.map(Dataset::label_map);
        let ds = load_ucr_tsv(path, self.cfg.data.delimiter, map.as_ref())?;
        match self.cfg.data.normalize {
            Some(scope) => Ok(z_normalize(&ds, scope)?.dataset),
            None => Ok(ds),
        }
    }

    fn train_data(&self) -> Result<Dataset> {
        self.load(&self.train_path, None)
    }

    fn weights(&self, flag: &Option<PathBuf>) -> Result<crate::classifier::ModelWeights> {
        load_weights(&flag.clone().unwrap_or_else(|| self.dir.weights_path()))
    }

    fn inputs(&self) -> Vec<String> {
        let mut v = vec![format!("train:{}", self.train_path.display())];
        if let Some(t) = &self.test_path {
            v.push(format!("test:{}", t.display()));
        }
        v
    }

    fn record(&self, command: &str, outputs: &[&Path], config: impl Serialize) -> Result<()> {
        let mut e = ManifestEntry::new(command, RunStatus::Done);
        e.inputs = self.inputs();
        e.outputs = outputs.iter().map(|p| self.dir.relative(p)).collect();
        e.config = Some(serde_json::to_value(config)?);
        self.dir.append(&e)
    }
}

#[derive(Serialize)]
struct TrainReport<'a> {
    model: &'a ResNetConfig,
    epochs: usize,
    history: &'a [EpochRecord],
    train_accuracy: f64,
    test_accuracy: Option<f64>,
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let mut s = setup(&a.common)?;
    s.cfg.train.seed = a.seed;
    if let Some(e) = a.epochs {
        s.cfg.train.epochs = e;
    }
    if let Some(lr) = a.lr {
        s.cfg.train.lr = lr;
    }
    if let Some(b) = a.batch_size {
        s.cfg.train.batch_size = b;
    }
    if let Some(p) = &a.preset {
        s.cfg.model.preset = match p.as_str() {
            "compact" => super::config::Preset::Compact,
            "standard" => super::config::Preset::Standard,
            other => return Err(Error::Config(format!("--preset: unknown preset `{other}`"))),
        };
    }
    s.cfg.train.validate().map_err(|e| Error::Config(e.to_string()))?;
    let train_ds = s.train_data()?;
    let test_ds = s.test_path.as_ref().map(|p| s.load(p, Some(&train_ds))).transpose()?;
    let resnet = s.cfg.model.resnet(train_ds.num_classes(), train_ds.length())?;
    let model = build_resnet(&resnet, s.cfg.model.init_seed.unwrap_or(a.seed))?;
    let (model, history) = train(model, &train_ds, &s.cfg.train)?;
    let weights = s.dir.weights_path();
    save_weights(&model, &weights)?;

    let report = TrainReport {
        model: &resnet,
        epochs: s.cfg.train.epochs,
        history: &history,
        train_accuracy: accuracy(&model, &train_ds)?,
        test_accuracy: test_ds.as_ref().map(|t| accuracy(&model, t)).transpose()?,
    };
    let report_path = s.dir.eval_path("train-report.json");
    let mut json = serde_json::to_string_pretty(&report)?;
    json.push('\n');
    s.dir.write_atomic(&report_path, &json)?;
    s.record(
        "train",
        &[&weights, &report_path],
        serde_json::json!({ "model": &s.cfg.model, "train": &s.cfg.train }),
    )?;
    match report.test_accuracy {
        Some(acc) => println!("trained {} epochs, train accuracy {:.4}, test accuracy {acc:.4}", report.epochs, report.train_accuracy),
        None => println!("trained {} epochs, train accuracy {:.4}", report.epochs, report.train_accuracy),
    }
    Ok(())
}

fn read_series(path: &Path) -> Result<Vec<f64>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.split(|c: char| c.is_whitespace() || c == ',')
        .filter(|t| !t.is_empty())
        .map(|t| {
            t.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::Data(format!("{}: bad value `{t}`", path.display())))
        })
        .collect()
}

fn dream_cmd(a: DreamArgs) -> Result<()> {
    let s = setup(&a.common)?;
    let model = s.weights(&a.weights)?;
    let train_ds = s.train_data()?;
    let mut cfg: DreamConfig = s.cfg.dream.clone();
    cfg.seed = a.seed;
    if let Some(v) = parse_flag::<Variant>(&a.variant, "variant")? {
        cfg.variant = v;
    }
    if let Some(m) = parse_flag::<TargetMode>(&a.mode, "mode")? {
        cfg.mode = m;
    }
    if let Some(st) = parse_flag::<SeedStrategy>(&a.seed_strategy, "seed-strategy")? {
        cfg.seed_strategy = st;
    }
    if let Some(n) = a.steps {
        cfg.steps = n;
    }
    if let Some(lr) = a.lr {
        cfg.lr = lr;
    }
    cfg.validate().map_err(|e| Error::Config(e.to_string()))?;
    let class = a.class.or(s.cfg.class).ok_or_else(|| Error::MissingKey("dream.class".into()))?;
    let given = a.seed_series.as_deref().map(read_series).transpose()?;

    let ctx = DreamContext::new(&model, &train_ds)?;
    let result = match cfg.variant {
        Variant::Sd => sequence_dream_in(&ctx, class, &cfg, given.as_deref())?,
        variant => {
            let mode = if variant == Variant::Ascent { TargetMode::Center } else { cfg.mode };
            let spec = ctx.target(class, mode, cfg.target_multiplier)?;
            let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
            let choice = select_seed_input(&model, &train_ds, &spec, cfg.seed_strategy, given.as_deref(), &mut rng)?;
            let mut r = if variant == Variant::Ascent {
                dream_ascent(&model, &choice.series, class, &cfg, ctx.scale())?
            } else {
                dream_target(&model, &choice.series, &spec, &cfg, ctx.scale())?
            };
            r.seed = choice.provenance;
            r
        }
    };
    let stem = a.name.clone().unwrap_or_else(|| match cfg.variant {
        Variant::Ascent => format!("ascent-c{class}-seed{}", a.seed),
        v => format!("{v}-{}-c{class}-seed{}", cfg.mode, a.seed),
    });
    let path = s.dir.dream_path(&stem);
    s.dir.write_atomic(&path, &result.to_json()?)?;
    s.record("dream", &[&path], &result.config)?;
    println!(
        "{}: class {class}, predicted {} with confidence {:.4}, best loss {:.6} after {} steps",
        s.dir.relative(&path),
        result.predicted_class,
        result.confidence,
        result.best_loss,
        result.steps_used
    );
    Ok(())
}

fn grid_cmd(a: GridArgs) -> Result<()> {
    let s = setup(&a.common)?;
    let model = s.weights(&a.weights)?;
    let train_ds = s.train_data()?;
    let mode = parse_flag::<TargetMode>(&a.mode, "mode")?.unwrap_or(s.cfg.dream.mode);
    let class = a.class.or(s.cfg.class).ok_or_else(|| Error::MissingKey("dream.class".into()))?;
    let mut spec = GridSpec::from_section(&s.cfg.grid, mode, class, a.seed);
    if a.mode.is_some() {
        spec.mode = mode;
    }
    if !a.seeds.is_empty() {
        spec.seeds = vec![a.seed];
        for &s in &a.seeds {
            if !spec.seeds.contains(&s) {
                spec.seeds.push(s);
            }
        }
    }
    let parallelism = a.parallelism.unwrap_or(s.cfg.grid.parallelism);
    if parallelism == 0 {
        return Err(Error::Config("--parallelism must be >= 1".into()));
    }
    let layer = s.cfg.eval.layer()?;
    let outcome = run_grid(&model, &train_ds, &spec, &s.cfg.dream, layer, &s.dir, parallelism)?;
    let ranking = s.dir.eval_path(&ranking_file(spec.mode, spec.class));
    s.record("grid", &[&ranking], &spec)?;
    let total = outcome.ranking.len() + outcome.infeasible.len() + outcome.failed.len();
    println!(
        "{total} runs ({} reused): {} feasible, {} infeasible, {} failed",
        outcome.reused,
        outcome.ranking.len(),
        outcome.infeasible.len(),
        outcome.failed.len()
    );
    match outcome.best() {
        Some(best) => println!("best: {}", best.run_id),
        None => println!("no feasible run: no configuration reached the target class with confidence >= 0.99"),
    }
    Ok(())
}

fn result_files(dir: &RunDir, given: &[PathBuf]) -> Result<Vec<PathBuf>> {
    if !given.is_empty() {
        return Ok(given.to_vec());
    }
    let dreams = dir.root().join("dreams");
    let mut files: Vec<PathBuf> = std::fs::read_dir(&dreams)
        .map_err(|e| Error::io(&dreams, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    files.sort();
    Ok(files)
}

fn load_results(files: &[PathBuf]) -> Result<Vec<(String, DreamResult)>> {
    files
        .iter()
        .map(|p| {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            let stem = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            Ok((stem, DreamResult::from_json_str(&text)?))
        })
        .collect()
}

fn layer_of(s: &Setup, flag: &Option<String>) -> Result<LayerSelector> {
    parse_flag::<LayerSelector>(flag, "layer")?.map_or_else(|| s.cfg.eval.layer(), Ok)
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    let s = setup(&a.common)?;
    let model = s.weights(&a.weights)?;
    let train_ds = s.train_data()?;
    let layer = layer_of(&s, &a.layer)?;
    let results = load_results(&result_files(&s.dir, &a.result)?)?;
    let ctx = EvalContext::new(&model, &train_ds, layer)?;
    let mut outputs = Vec::with_capacity(results.len());
    for (stem, r) in &results {
        let report = ctx.evaluate(r)?;
        let path = s.dir.eval_path(&format!("{stem}.json"));
        s.dir.write_atomic(&path, &report.to_json()?)?;
        println!(
            "{stem}: activation distance {:.4} (band max {:.4}), raw distance {:.4} (band max {:.4}), predicted {} ({:.4})",
            report.activation.distance,
            report.activation.band_max,
            report.raw.distance,
            report.raw.band_max,
            report.predicted_class,
            report.confidence
        );
        outputs.push(path);
    }
    let refs: Vec<&Path> = outputs.iter().map(PathBuf::as_path).collect();
    s.record("eval", &refs, layer.to_string())
}

fn project_cmd(a: ProjectArgs) -> Result<()> {
    let s = setup(&a.common)?;
    let model = s.weights(&a.weights)?;
    let train_ds = s.train_data()?;
    let layer = layer_of(&s, &a.layer)?;
    let results: Vec<DreamResult> = load_results(&result_files(&s.dir, &a.result)?)?.into_iter().map(|(_, r)| r).collect();
    let table = EvalContext::new(&model, &train_ds, layer)?.distribution_table(&results)?;
    let path = s.dir.eval_path(&format!("distribution-{layer}.tsv"));
    s.dir.write_atomic(&path, &table)?;
    s.record("project", &[&path], layer.to_string())?;
    println!("{}: {} rows", s.dir.relative(&path), train_ds.len() + results.len());
    Ok(())
}
