use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use fixinfer::baselines::{ittikoch_saliency, SaliencyConfig};
use fixinfer::convnet::{NetworkSpec, TapSet};
use fixinfer::dataset::{filter_error_fixations, load_manifest, Dataset, Fixation};
use fixinfer::engine::{infer_target, FixationCombine, GuessTask, LayerCombine};
use fixinfer::evaluation::config_echo;
use fixinfer::image::{encode_pgm, read_image, write_heatmap_png};
use fixinfer::runner::{
    ablate, category_table, CommonFixations, default_ablation_grid, evaluate, model_map, write_eval_outputs, Model, Networks, RunConfig, WeightsSource,
};
use fixinfer::synthgen::{write_synthetic_dataset, ArraySpec, SynthDatasetSpec};
use fixinfer::tensor::Map2D;

/// Infers a searcher's target from recorded error fixations.
#[derive(Parser, Debug)]
#[command(name = "fixinfer", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// One trial: inference map heatmap and guess trace JSON.
    Infer(InferArgs),
    /// Sweep models and T over a dataset into report.csv / report.json.
    Eval(EvalArgs),
    /// Layer and fusion grid for the infernet model.
    Ablate(RunArgs),
    /// Top-N category accuracy table.
    Category(CategoryArgs),
    /// Bottom-up saliency heatmap of one image.
    Saliency(SaliencyArgs),
    /// Write a synthetic array dataset.
    Gen(GenArgs),
    /// Convert a map JSON file to PGM or PNG.
    ExportMap(ExportArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum LayerArg {
    Max,
    Mean,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum FixArg {
    Sum,
    Max,
    Mean,
}

#[derive(Args, Debug)]
struct RunArgs {
    /// Weight bundle path, `random:<seed>` or `random-full:<seed>`.
    #[arg(long)]
    weights: Option<String>,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// 1-based layer indices to tap.
    #[arg(long, value_delimiter = ',', default_value = "5,10,17,23,24,30,31")]
    taps: Vec<usize>,
    #[arg(long, value_enum, default_value = "max")]
    layer_combine: LayerArg,
    #[arg(long, value_enum, default_value = "sum")]
    fix_combine: FixArg,
    #[arg(long, default_value_t = 200)]
    elim_side: usize,
    #[arg(long, default_value_t = 20)]
    budget: usize,
    /// Numbers of error fixations to use.
    #[arg(long = "t", value_delimiter = ',', default_value = "1")]
    t_values: Vec<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    threads: usize,
    /// Keep the first fixation of each scanpath.
    #[arg(long)]
    keep_first: bool,
    /// Grow target boxes by this many pixels when dropping on-target fixations.
    #[arg(long, default_value_t = 0)]
    target_margin: i64,
    #[arg(long, default_value_t = 100)]
    chance_reps: usize,
    /// Average per subject before computing standard errors.
    #[arg(long)]
    group_by_subject: bool,
    /// Use only fixations shared across subjects (one sample per trial).
    #[arg(long)]
    common: bool,
    #[arg(long, default_value_t = 28)]
    common_radius: i64,
    #[arg(long, default_value_t = 2)]
    common_min_subjects: usize,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long, value_delimiter = ',', default_value = "infernet")]
    model: Vec<String>,
    /// Also write one PGM per sample and model.
    #[arg(long)]
    save_maps: bool,
}

#[derive(Args, Debug)]
struct CategoryArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long = "n", value_delimiter = ',', default_value = "1,2,3,4,5,10,100,1000")]
    n_values: Vec<usize>,
}

#[derive(Args, Debug)]
struct InferArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long)]
    trial: String,
    /// Subject whose error fixations are used.
    #[arg(long, conflicts_with = "fixations")]
    subject: Option<String>,
    /// Explicit fixations as `x,y;x,y`.
    #[arg(long)]
    fixations: Option<String>,
    #[arg(long, default_value = "infernet")]
    model: String,
}

#[derive(Args, Debug)]
struct SaliencyArgs {
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct GenArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 20)]
    trials: usize,
    #[arg(long, default_value_t = 1)]
    subjects: usize,
    /// Error fixations per scanpath.
    #[arg(long, default_value_t = 1)]
    fixations: usize,
    /// Inverse temperature of similarity-biased fixation sampling.
    #[arg(long, default_value_t = 4.0)]
    beta: f64,
    #[arg(long, default_value_t = 2)]
    jitter: i64,
    #[arg(long, default_value_t = 6)]
    objects: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct ExportArgs {
    /// Map JSON written by `infer`, or a bare map object.
    #[arg(long)]
    map: PathBuf,
    /// Output path; `.png` writes PNG, anything else PGM.
    #[arg(long)]
    out: PathBuf,
}

enum Failure {
    Usage(String),
    Data(String),
}

impl From<fixinfer::Error> for Failure {
    fn from(e: fixinfer::Error) -> Self {
        Failure::Data(e.to_string())
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let res = match cli.cmd {
        Cmd::Infer(a) => infer(a),
        Cmd::Eval(a) => eval(a),
        Cmd::Ablate(a) => run_ablate(a),
        Cmd::Category(a) => category(a),
        Cmd::Saliency(a) => saliency(a),
        Cmd::Gen(a) => gen(a),
        Cmd::ExportMap(a) => export_map(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}\n\nFor more information, try '--help'.");
            ExitCode::from(1)
        }
        Err(Failure::Data(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}

fn run_config(a: &RunArgs, models: Vec<Model>) -> Result<RunConfig, Failure> {
    let weights = a
        .weights
        .as_deref()
        .map(str::parse::<WeightsSource>)
        .transpose()
        .map_err(|e| Failure::Usage(e.to_string()))?;
    let mut cfg = RunConfig {
        weights,
        manifest: a.manifest.clone(),
        models,
        elim_side: a.elim_side,
        budget: a.budget,
        t_values: a.t_values.clone(),
        seed: a.seed,
        threads: a.threads,
        skip_first: !a.keep_first,
        target_margin: a.target_margin,
        chance_reps: a.chance_reps,
        group_by_subject: a.group_by_subject,
        common: a.common.then_some(CommonFixations {
            radius: a.common_radius,
            min_subjects: a.common_min_subjects,
        }),
        ..Default::default()
    };
    let depth = NetworkSpec::vgg16_features().layers().len();
    if let Some(bad) = a.taps.iter().find(|&&t| t > depth) {
        return Err(Failure::Usage(format!("tap index {bad} is past the last feature layer ({depth})")));
    }
    cfg.fusion.taps = TapSet::from_indices(&a.taps).map_err(|e| Failure::Usage(e.to_string()))?;
    cfg.fusion.layer_combine = match a.layer_combine {
        LayerArg::Max => LayerCombine::Max,
        LayerArg::Mean => LayerCombine::Mean,
    };
    cfg.fusion.fixation_combine = match a.fix_combine {
        FixArg::Sum => FixationCombine::Sum,
        FixArg::Max => FixationCombine::Max,
        FixArg::Mean => FixationCombine::Mean,
    };
    cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    Ok(cfg)
}

fn parse_models(names: &[String]) -> Result<Vec<Model>, Failure> {
    let mut out: Vec<Model> = Vec::new();
    for n in names {
        let m = n.parse::<Model>().map_err(|e| Failure::Usage(e.to_string()))?;
        if !out.contains(&m) {
            out.push(m);
        }
    }
    Ok(out)
}

fn load(cfg: &RunConfig) -> Result<(Dataset, Networks), Failure> {
    let ds = load_manifest(&cfg.manifest)?;
    let nets = Networks::load(cfg)?;
    Ok((ds, nets))
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> CmdResult {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Failure::Data(format!("{}: {e}", dir.display())))?;
    }
    std::fs::write(path, bytes).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))
}

fn echo_lines(echo: &[(String, String)]) -> Vec<String> {
    echo.iter().map(|(k, v)| format!("{k}={v}")).collect()
}

fn echo_json(echo: &[(String, String)]) -> Value {
    // pairs rather than an object so the order survives a round trip
    Value::Array(echo.iter().map(|(k, v)| json!([k, v])).collect())
}

fn eval(a: EvalArgs) -> CmdResult {
    let cfg = run_config(&a.run, parse_models(&a.model)?)?;
    let (ds, nets) = load(&cfg)?;
    let outcome = evaluate(&ds, &nets, &cfg, a.save_maps)?;
    write_eval_outputs(&a.run.out, &outcome)?;
    print!("{}", outcome.report.to_csv());
    Ok(())
}

fn run_ablate(a: RunArgs) -> CmdResult {
    let cfg = run_config(&a, vec![Model::Infernet])?;
    let (ds, nets) = load(&cfg)?;
    let text = ablate(&ds, &nets, &cfg, &default_ablation_grid())?;
    write(&a.out.join("ablation.csv"), &text)?;
    print!("{text}");
    Ok(())
}

fn category(a: CategoryArgs) -> CmdResult {
    let cfg = run_config(&a.run, vec![Model::Infernet])?;
    let (ds, nets) = load(&cfg)?;
    let (spec, bundle) = nets.pretrained.as_ref().expect("infernet loads a bundle");
    if !bundle.has_classifier() {
        return Err(Failure::Data("category inference needs a bundle with classifier layers".into()));
    }
    let table = category_table(&ds, &cfg, spec, bundle, &a.n_values)?;
    let text = table.to_csv(&cfg.echo(&nets.checksums()));
    write(&a.run.out.join("category.csv"), &text)?;
    print!("{text}");
    Ok(())
}

fn parse_fixations(s: &str) -> Result<Vec<Fixation>, Failure> {
    s.split(';')
        .filter(|p| !p.trim().is_empty())
        .map(|p| {
            let (x, y) = p
                .split_once(',')
                .ok_or_else(|| Failure::Usage(format!("fixation '{p}' is not x,y")))?;
            let num = |v: &str| v.trim().parse::<i64>().map_err(|_| Failure::Usage(format!("bad coordinate in '{p}'")));
            Ok(Fixation::at(num(x)?, num(y)?))
        })
        .collect()
}

fn infer(a: InferArgs) -> CmdResult {
    let model = a.model.parse::<Model>().map_err(|e| Failure::Usage(e.to_string()))?;
    if model == Model::Chance {
        return Err(Failure::Usage("infer needs a map-producing model".into()));
    }
    let cfg = run_config(&a.run, vec![model])?;
    let t = cfg.t_values[0];
    let (ds, nets) = load(&cfg)?;
    let trial = ds
        .trial(&a.trial)
        .ok_or_else(|| Failure::Data(format!("no trial '{}'", a.trial)))?;
    let (fixations, subject) = match (&a.fixations, &a.subject) {
        (Some(f), _) => (parse_fixations(f)?, "explicit".to_string()),
        (None, sub) => {
            let seq = ds
                .sequences_for(&trial.id)
                .find(|s| sub.as_ref().map_or(true, |want| &s.subject == want))
                .ok_or_else(|| Failure::Data(format!("no fixation sequence for trial '{}'", trial.id)))?;
            let errs = filter_error_fixations(seq, trial, cfg.skip_first, cfg.target_margin);
            if errs.len() < t {
                return Err(Failure::Data(format!("subject {} has {} error fixations, T={t}", seq.subject, errs.len())));
            }
            (errs[..t].to_vec(), seq.subject.clone())
        }
    };
    if fixations.is_empty() {
        return Err(Failure::Usage("no fixations given".into()));
    }
    let search = read_image(&ds.resolve(&trial.search_img))?;
    let map = model_map(model, &nets, &cfg, trial, &search, &fixations)?.expect("non-chance models produce a map");
    let task = GuessTask::for_trial(trial, &fixations, cfg.elim_side, cfg.budget)?;
    let trace = infer_target(&map, &task)?;
    let echo = cfg.echo(&nets.checksums());
    let comments = echo_lines(&echo);
    write(&a.run.out.join("heatmap.pgm"), encode_pgm(&map, &comments))?;
    write_heatmap_png(&map, &a.run.out.join("heatmap.png"), &comments)?;
    let meta = json!({
        "config": echo_json(&echo),
        "trial": trial.id,
        "subject": subject,
        "model": model.name(),
        "fixations": fixations,
    });
    let mut trace_doc = meta.clone();
    trace_doc["trace"] = serde_json::to_value(&trace).map_err(|e| Failure::Data(e.to_string()))?;
    trace_doc["score"] = json!(trace.score());
    let mut map_doc = meta;
    map_doc["map"] = serde_json::to_value(&map).map_err(|e| Failure::Data(e.to_string()))?;
    write(&a.run.out.join("trace.json"), serde_json::to_string_pretty(&trace_doc).unwrap() + "\n")?;
    write(&a.run.out.join("map.json"), serde_json::to_string(&map_doc).unwrap() + "\n")?;
    println!("{}", serde_json::to_string_pretty(&trace_doc["trace"]).unwrap());
    Ok(())
}

fn saliency(a: SaliencyArgs) -> CmdResult {
    let cfg = SaliencyConfig::default();
    let img = read_image(&a.image)?;
    let map = ittikoch_saliency(&img, &cfg)?;
    let echo = vec![
        ("image".to_string(), a.image.display().to_string()),
        ("saliency".to_string(), serde_json::to_string(&cfg).map_err(|e| Failure::Data(e.to_string()))?),
    ];
    let comments = echo_lines(&echo);
    write(&a.out.join("saliency.pgm"), encode_pgm(&map, &comments))?;
    write_heatmap_png(&map, &a.out.join("saliency.png"), &comments)?;
    let doc = json!({ "config": echo_json(&echo), "map": map });
    write(&a.out.join("map.json"), serde_json::to_string(&doc).unwrap() + "\n")?;
    Ok(())
}

fn gen(a: GenArgs) -> CmdResult {
    let spec = SynthDatasetSpec {
        trials: a.trials,
        subjects: a.subjects,
        fixations: a.fixations,
        beta: a.beta,
        jitter: a.jitter,
        array: ArraySpec {
            n_objects: a.objects,
            seed: a.seed,
            ..Default::default()
        },
        seed: a.seed,
    };
    let manifest = write_synthetic_dataset(&a.out, &spec)?;
    println!("{}", manifest.display());
    Ok(())
}

fn export_map(a: ExportArgs) -> CmdResult {
    let text = std::fs::read_to_string(&a.map).map_err(|e| Failure::Data(format!("{}: {e}", a.map.display())))?;
    let doc: Value = serde_json::from_str(&text).map_err(|e| Failure::Data(format!("{}: {e}", a.map.display())))?;
    let (map_val, echo) = match doc.get("map") {
        Some(m) => {
            let echo: Vec<(String, String)> = doc
                .get("config")
                .and_then(Value::as_array)
                .map(|pairs| {
                    pairs
                        .iter()
                        .filter_map(|p| Some((p.get(0)?.as_str()?.to_string(), p.get(1)?.as_str()?.to_string())))
                        .collect()
                })
                .unwrap_or_default();
            (m.clone(), echo)
        }
        None => (doc, Vec::new()),
    };
    let map: Map2D = serde_json::from_value(map_val).map_err(|e| Failure::Data(format!("{}: {e}", a.map.display())))?;
    let map = Map2D::new(map.height(), map.width(), map.values().to_vec())?;
    let comments = echo_lines(&echo);
    if a.out.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
        if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Failure::Data(format!("{}: {e}", dir.display())))?;
        }
        write_heatmap_png(&map, &a.out, &comments)?;
    } else {
        write(&a.out, encode_pgm(&map, &comments))?;
    }
    if !echo.is_empty() {
        eprint!("{}", config_echo(&echo));
    }
    Ok(())
}
