//! Dataset sweeps: every model over every (trial, subject, T) sample, run
//! on a worker pool and merged in a fixed order.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{chance_expected_guesses, chance_trace, ittikoch_saliency, template_match_map, SaliencyConfig};
use crate::convnet::{load_weight_bundle, random_bundle, random_bundle_for, NetworkSpec, TapSet, WeightBundle, DEFAULT_TAP_INDICES};
use crate::dataset::{common_fixations, filter_error_fixations, Dataset, Fixation, FixationSequence, TaskType, Trial};
use crate::engine::{
    accumulate_fixations, crop_patch, fixation_masks, infer_category, infer_target, FixationCombine, FusionConfig, GuessTask, GuessTrace,
    InferNet, LayerCombine, NetClassifier, SearchSpace,
};
use crate::error::{Error, Result};
use crate::evaluation::{
    monte_carlo_chance_samples, summarize, summarize_grouped, topn_table, welch_ttest, EvalReport, PairwiseP, ReportRow, Summary,
    TopNTable,
};
use crate::image::{encode_pgm, mask_regions, read_image, RgbImage};
use crate::mix_seed;
use crate::tensor::Map2D;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Model {
    Infernet,
    Chance,
    Tempmatch,
    Ittikoch,
    Ranweight,
}

impl Model {
    pub const ALL: [Model; 5] = [Model::Infernet, Model::Chance, Model::Tempmatch, Model::Ittikoch, Model::Ranweight];

    pub fn name(self) -> &'static str {
        match self {
            Model::Infernet => "infernet",
            Model::Chance => "chance",
            Model::Tempmatch => "tempmatch",
            Model::Ittikoch => "ittikoch",
            Model::Ranweight => "ranweight",
        }
    }
}

impl fmt::Display for Model {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Model {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Model::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown model '{s}'")))
    }
}

/// Where network weights come from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum WeightsSource {
    File(PathBuf),
    /// Seeded random feature layers only.
    Random(u64),
    /// Seeded random weights including the classifier head.
    RandomFull(u64),
}

impl FromStr for WeightsSource {
    type Err = Error;

    /// `random:<seed>`, `random-full:<seed>` or a bundle path.
    fn from_str(s: &str) -> Result<Self> {
        let seed = |v: &str| v.parse::<u64>().map_err(|_| Error::invalid(format!("bad weight seed in '{s}'")));
        if let Some(v) = s.strip_prefix("random:") {
            return Ok(Self::Random(seed(v)?));
        }
        if let Some(v) = s.strip_prefix("random-full:") {
            return Ok(Self::RandomFull(seed(v)?));
        }
        Ok(Self::File(PathBuf::from(s)))
    }
}

impl fmt::Display for WeightsSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::File(p) => write!(f, "{}", p.display()),
            Self::Random(s) => write!(f, "random:{s}"),
            Self::RandomFull(s) => write!(f, "random-full:{s}"),
        }
    }
}

impl WeightsSource {
    pub fn load(&self) -> Result<WeightBundle> {
        match self {
            Self::File(p) => load_weight_bundle(p),
            Self::Random(s) => Ok(random_bundle_for(&NetworkSpec::vgg16_features(), *s)),
            Self::RandomFull(s) => Ok(random_bundle(*s)),
        }
    }
}

/// Network description matching a bundle's contents.
pub fn spec_for(bundle: &WeightBundle) -> NetworkSpec {
    if bundle.has_classifier() {
        NetworkSpec::vgg16()
    } else {
        NetworkSpec::vgg16_features()
    }
}

/// Everything that determines a run's output. Thread count is kept out
/// of the echo since it never changes results.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub weights: Option<WeightsSource>,
    pub manifest: PathBuf,
    pub models: Vec<Model>,
    pub fusion: FusionConfig,
    pub elim_side: usize,
    pub budget: usize,
    pub t_values: Vec<usize>,
    pub seed: u64,
    pub threads: usize,
    pub skip_first: bool,
    pub target_margin: i64,
    /// Monte Carlo repetitions per sample for natural-image chance.
    pub chance_reps: usize,
    /// Aggregate per subject before computing standard errors.
    pub group_by_subject: bool,
    /// Replace each subject's fixations with those shared across subjects.
    pub common: Option<CommonFixations>,
    pub saliency: SaliencyConfig,
}

/// Parameters of the shared-fixation filter.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CommonFixations {
    pub radius: i64,
    pub min_subjects: usize,
}

impl Default for CommonFixations {
    fn default() -> Self {
        Self {
            radius: 28,
            min_subjects: 2,
        }
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            weights: None,
            manifest: PathBuf::new(),
            models: vec![Model::Infernet],
            fusion: FusionConfig::default(),
            elim_side: 200,
            budget: 20,
            t_values: vec![1],
            seed: 0,
            threads: 1,
            skip_first: true,
            target_margin: 0,
            chance_reps: 100,
            group_by_subject: false,
            common: None,
            saliency: SaliencyConfig::default(),
        }
    }
}

fn join<T: fmt::Display>(v: &[T]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.fusion.validate()?;
        if self.models.is_empty() {
            return Err(Error::Empty("model list"));
        }
        if self.t_values.is_empty() || self.t_values.contains(&0) {
            return Err(Error::invalid("T values must be non-empty and >= 1"));
        }
        if self.budget < 1 || self.elim_side < 1 {
            return Err(Error::invalid("budget and elimination side must be >= 1"));
        }
        if self.threads < 1 {
            return Err(Error::invalid("thread count must be >= 1"));
        }
        if let Some(c) = self.common {
            if c.radius < 0 || c.min_subjects < 2 {
                return Err(Error::invalid("common fixations need radius >= 0 and at least two subjects"));
            }
        }
        if self.chance_reps < 100 {
            return Err(Error::invalid("chance reps must be >= 100"));
        }
        Ok(())
    }

    /// Ordered key/value echo, including the checksum of every bundle used.
    pub fn echo(&self, checksums: &[(&str, u64)]) -> Vec<(String, String)> {
        let f = &self.fusion;
        let mut out = vec![
            ("weights".to_string(), self.weights.as_ref().map(|w| w.to_string()).unwrap_or_else(|| "none".into())),
            ("manifest".into(), self.manifest.display().to_string()),
            ("models".into(), join(&self.models)),
            ("taps".into(), join(&f.taps.indices())),
            ("tap_stages".into(), tap_stages(&f.taps)),
            ("layer_combine".into(), enum_name(&f.layer_combine)),
            ("fix_combine".into(), enum_name(&f.fixation_combine)),
            ("patch_side".into(), f.patch_side.to_string()),
            ("mask_side".into(), f.mask_side.to_string()),
            ("clamp_negative".into(), f.clamp_negative.to_string()),
            ("similarity".into(), enum_name(&f.similarity)),
            ("resample".into(), enum_name(&f.resample)),
            ("elim_side".into(), self.elim_side.to_string()),
            ("budget".into(), self.budget.to_string()),
            ("T".into(), join(&self.t_values)),
            ("skip_first".into(), self.skip_first.to_string()),
            ("target_margin".into(), self.target_margin.to_string()),
            ("chance_reps".into(), self.chance_reps.to_string()),
            ("group_by_subject".into(), self.group_by_subject.to_string()),
            (
                "common".into(),
                self.common
                    .map(|c| format!("radius={} min_subjects={}", c.radius, c.min_subjects))
                    .unwrap_or_else(|| "off".into()),
            ),
            ("seed".into(), self.seed.to_string()),
        ];
        for (name, sum) in checksums {
            out.push((format!("checksum_{name}"), format!("{sum:016x}")));
        }
        out
    }
}

/// `index:stage` for each tap, e.g. `5:pool1`.
pub fn tap_stages(taps: &TapSet) -> String {
    let table = NetworkSpec::vgg16_features().index_table();
    taps.indices()
        .iter()
        .map(|&i| {
            let stage = table.get(i - 1).map(|(_, s)| s.as_str()).unwrap_or("?");
            format!("{i}:{stage}")
        })
        .collect::<Vec<_>>()
        .join(" ")
}

pub(crate) fn enum_name<T: Serialize>(v: &T) -> String {
    serde_json::to_value(v)
        .ok()
        .and_then(|j| j.as_str().map(str::to_string))
        .unwrap_or_default()
}

/// Bundles needed by the configured models.
pub struct Networks {
    pub pretrained: Option<(NetworkSpec, WeightBundle)>,
    pub random: Option<(NetworkSpec, WeightBundle)>,
}

/// Seed of the random-weight model, derived from the run seed.
pub fn ranweight_seed(seed: u64) -> u64 {
    mix_seed(seed, 0x5241_4e57)
}

impl Networks {
    pub fn load(cfg: &RunConfig) -> Result<Self> {
        let pretrained = if cfg.models.contains(&Model::Infernet) {
            let src = cfg
                .weights
                .as_ref()
                .ok_or_else(|| Error::invalid("the infernet model needs --weights"))?;
            let b = src.load()?;
            Some((spec_for(&b), b))
        } else {
            None
        };
        let random = if cfg.models.contains(&Model::Ranweight) {
            let spec = NetworkSpec::vgg16_features();
            let b = random_bundle_for(&spec, ranweight_seed(cfg.seed));
            Some((spec, b))
        } else {
            None
        };
        Ok(Self { pretrained, random })
    }

    pub fn checksums(&self) -> Vec<(&'static str, u64)> {
        let mut v = Vec::new();
        if let Some((_, b)) = &self.pretrained {
            v.push(("infernet", b.checksum()));
        }
        if let Some((_, b)) = &self.random {
            v.push(("ranweight", b.checksum()));
        }
        v
    }
}

/// One unit of work: a subject's first `t` error fixations on a trial.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub trial_index: usize,
    pub subject: String,
    pub t: usize,
    pub fixations: Vec<Fixation>,
}

/// Subject name used for samples built from shared fixations.
pub const COMMON_SUBJECT: &str = "common";

/// All samples with at least `t` error fixations, in manifest order. With
/// `cfg.common` set, each trial yields one sample from the fixations its
/// subjects share; trials with fewer than two subjects are skipped.
pub fn collect_samples(ds: &Dataset, cfg: &RunConfig) -> Result<Vec<Sample>> {
    let mut per_trial: Vec<Vec<(String, Vec<Fixation>)>> = Vec::with_capacity(ds.trials.len());
    for trial in &ds.trials {
        let errs: Vec<FixationSequence> = ds
            .sequences_for(&trial.id)
            .map(|seq| FixationSequence {
                subject: seq.subject.clone(),
                trial: seq.trial.clone(),
                points: filter_error_fixations(seq, trial, cfg.skip_first, cfg.target_margin),
            })
            .collect();
        per_trial.push(match cfg.common {
            None => errs.into_iter().map(|s| (s.subject, s.points)).collect(),
            Some(_) if errs.len() < 2 => Vec::new(),
            Some(c) => vec![(COMMON_SUBJECT.to_string(), common_fixations(&errs, c.radius, c.min_subjects)?)],
        });
    }
    let mut out = Vec::new();
    for &t in &cfg.t_values {
        for (ti, subjects) in per_trial.iter().enumerate() {
            for (subject, fix) in subjects {
                if fix.len() >= t {
                    out.push(Sample {
                        trial_index: ti,
                        subject: subject.clone(),
                        t,
                        fixations: fix[..t].to_vec(),
                    });
                }
            }
        }
    }
    Ok(out)
}

/// Evidence map of one model on one sample; `None` for chance.
pub fn model_map(model: Model, nets: &Networks, cfg: &RunConfig, trial: &Trial, search: &RgbImage, fixations: &[Fixation]) -> Result<Option<Map2D>> {
    let run_net = |pair: &Option<(NetworkSpec, WeightBundle)>| -> Result<Option<Map2D>> {
        let (spec, bundle) = pair.as_ref().ok_or_else(|| Error::invalid(format!("no network loaded for {model}")))?;
        let net = InferNet::new(spec, bundle, cfg.fusion.clone())?;
        Ok(Some(net.inference_map(trial, search, fixations)?.map))
    };
    match model {
        Model::Chance => Ok(None),
        Model::Infernet => run_net(&nets.pretrained),
        Model::Ranweight => run_net(&nets.random),
        Model::Ittikoch => Ok(Some(ittikoch_saliency(search, &cfg.saliency)?)),
        Model::Tempmatch => {
            let masked = mask_regions(search, &fixation_masks(trial, fixations, cfg.fusion.mask_side));
            let maps = fixations
                .iter()
                .map(|&f| template_match_map(&crop_patch(search, f, cfg.fusion.patch_side)?, &masked))
                .collect::<Result<Vec<_>>>()?;
            Ok(Some(accumulate_fixations(&maps, cfg.fusion.fixation_combine)?))
        }
    }
}

/// Closed-form chance for arrays, Monte Carlo otherwise.
pub fn expected_chance(task: &GuessTask, reps: usize, seed: u64) -> Result<f64> {
    match &task.space {
        SearchSpace::Candidates(c) => chance_expected_guesses(c.len()),
        SearchSpace::Pixels { .. } => Ok(summarize(&monte_carlo_chance_samples(std::slice::from_ref(task), reps, seed)?)?.mean),
    }
}

/// Per-sample outcome for every configured model.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleResult {
    pub sample: Sample,
    pub trial_id: String,
    pub expected_chance: f64,
    pub traces: Vec<(Model, GuessTrace)>,
    pub maps: Vec<(Model, Map2D)>,
}

fn sample_seed(cfg: &RunConfig, trial_id: &str, subject: &str, t: usize) -> u64 {
    let key = crate::convnet::Fnv1a::hash(format!("{trial_id}\u{1f}{subject}\u{1f}{t}").as_bytes());
    mix_seed(cfg.seed, key)
}

pub fn run_sample(ds: &Dataset, nets: &Networks, cfg: &RunConfig, sample: &Sample, keep_maps: bool) -> Result<SampleResult> {
    let trial = &ds.trials[sample.trial_index];
    let search = read_image(&ds.resolve(&trial.search_img))?;
    let task = GuessTask::for_trial(trial, &sample.fixations, cfg.elim_side, cfg.budget)?;
    let seed = sample_seed(cfg, &trial.id, &sample.subject, sample.t);
    let mut traces = Vec::new();
    let mut maps = Vec::new();
    for &m in &cfg.models {
        let trace = match model_map(m, nets, cfg, trial, &search, &sample.fixations)? {
            Some(map) => {
                let tr = infer_target(&map, &task)?;
                if keep_maps {
                    maps.push((m, map));
                }
                tr
            }
            None => chance_trace(&task, mix_seed(seed, 1))?,
        };
        traces.push((m, trace));
    }
    Ok(SampleResult {
        sample: sample.clone(),
        trial_id: trial.id.clone(),
        expected_chance: expected_chance(&task, cfg.chance_reps, mix_seed(seed, 2))?,
        traces,
        maps,
    })
}

/// Runs `f` over `items` on a pool of `threads` workers; results keep
/// input order.
pub fn par_map<T: Sync, R: Send>(threads: usize, items: &[T], f: impl Fn(&T) -> Result<R> + Sync + Send) -> Result<Vec<R>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::invalid(format!("worker pool: {e}")))?;
    pool.install(|| items.par_iter().map(&f).collect())
}

/// Aggregated rows plus per-sample detail.
pub struct EvalOutcome {
    pub report: EvalReport,
    pub results: Vec<SampleResult>,
}

pub fn evaluate(ds: &Dataset, nets: &Networks, cfg: &RunConfig, keep_maps: bool) -> Result<EvalOutcome> {
    cfg.validate()?;
    let samples = collect_samples(ds, cfg)?;
    let results = par_map(cfg.threads, &samples, |s| run_sample(ds, nets, cfg, s, keep_maps))?;
    let mut report = EvalReport {
        config: cfg.echo(&nets.checksums()),
        ..Default::default()
    };
    for &t in &cfg.t_values {
        let at_t: Vec<&SampleResult> = results.iter().filter(|r| r.sample.t == t).collect();
        if at_t.is_empty() {
            continue;
        }
        let chance: Vec<(String, f64)> = at_t.iter().map(|r| (r.sample.subject.clone(), r.expected_chance)).collect();
        let a_c = aggregate(&chance, cfg.group_by_subject)?.mean;
        let mut per_model: BTreeMap<Model, Vec<f64>> = BTreeMap::new();
        for &m in &cfg.models {
            let scores: Vec<(String, f64)> = at_t
                .iter()
                .map(|r| {
                    let tr = &r.traces.iter().find(|(mm, _)| *mm == m).expect("every model traced").1;
                    (r.sample.subject.clone(), tr.score() as f64)
                })
                .collect();
            report.rows.push(ReportRow::new(m.name(), t, aggregate(&scores, cfg.group_by_subject)?, a_c)?);
            per_model.insert(m, scores.into_iter().map(|s| s.1).collect());
        }
        for (i, &a) in cfg.models.iter().enumerate() {
            for &b in &cfg.models[i + 1..] {
                let p = welch_ttest(&per_model[&a], &per_model[&b]).map(|r| r.p).unwrap_or(f64::NAN);
                report.pvalues.push(PairwiseP {
                    t,
                    model_a: a.name().into(),
                    model_b: b.name().into(),
                    p,
                });
            }
        }
    }
    Ok(EvalOutcome { report, results })
}

fn aggregate(samples: &[(String, f64)], by_subject: bool) -> Result<Summary> {
    if by_subject {
        summarize_grouped(samples)
    } else {
        summarize(&samples.iter().map(|s| s.1).collect::<Vec<_>>())
    }
}

/// PGM bytes for a map with the run's config echo embedded as comments.
pub fn heatmap_pgm(map: &Map2D, echo: &[(String, String)], label: &str) -> Vec<u8> {
    let mut comments: Vec<String> = echo.iter().map(|(k, v)| format!("{k}={v}")).collect();
    comments.push(format!("map={label}"));
    encode_pgm(map, &comments)
}

/// Writes `report.csv`, `report.json` and, when maps were kept,
/// `maps/<model>_<trial>_<subject>_T<t>.pgm`.
pub fn write_eval_outputs(out: &Path, outcome: &EvalOutcome) -> Result<()> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let csv = out.join("report.csv");
    std::fs::write(&csv, outcome.report.to_csv()).map_err(|e| Error::io(&csv, e))?;
    let json = out.join("report.json");
    std::fs::write(&json, outcome.report.to_json()?).map_err(|e| Error::io(&json, e))?;
    if outcome.results.iter().any(|r| !r.maps.is_empty()) {
        let dir = out.join("maps");
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for r in &outcome.results {
            for (m, map) in &r.maps {
                let label = format!("{}_{}_{}_T{}", m, r.trial_id, r.sample.subject, r.sample.t);
                let p = dir.join(format!("{label}.pgm"));
                std::fs::write(&p, heatmap_pgm(map, &outcome.report.config, &label)).map_err(|e| Error::io(&p, e))?;
            }
        }
    }
    Ok(())
}

/// One ablation cell.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationSetting {
    pub label: String,
    pub taps: TapSet,
    pub layer_combine: LayerCombine,
    pub fixation_combine: FixationCombine,
    pub common: Option<CommonFixations>,
}

/// Single-tap rows for each default tap, all taps under each
/// (layer, fixation) combination, then fixations shared across subjects.
pub fn default_ablation_grid() -> Vec<AblationSetting> {
    let mut grid: Vec<AblationSetting> = DEFAULT_TAP_INDICES
        .iter()
        .enumerate()
        .map(|(i, &idx)| AblationSetting {
            label: format!("T{}", i + 1),
            taps: TapSet::single(idx).expect("valid tap"),
            layer_combine: LayerCombine::Max,
            fixation_combine: FixationCombine::Sum,
            common: None,
        })
        .collect();
    for (lc, fc) in [
        (LayerCombine::Max, FixationCombine::Sum),
        (LayerCombine::Max, FixationCombine::Max),
        (LayerCombine::Mean, FixationCombine::Max),
        (LayerCombine::Mean, FixationCombine::Mean),
    ] {
        grid.push(AblationSetting {
            label: format!("{}+{}", enum_name(&lc), enum_name(&fc)),
            taps: TapSet::default(),
            layer_combine: lc,
            fixation_combine: fc,
            common: None,
        });
    }
    grid.push(AblationSetting {
        label: "common".into(),
        taps: TapSet::default(),
        layer_combine: LayerCombine::Max,
        fixation_combine: FixationCombine::Sum,
        common: Some(CommonFixations::default()),
    });
    grid
}

pub const ABLATION_HEADER: &str = "setting,taps,layer_combine,fix_combine,common,T,n,A_m,stderr,A_c,P_r";

/// Runs the infernet model once per grid cell and returns the CSV text.
pub fn ablate(ds: &Dataset, nets: &Networks, cfg: &RunConfig, grid: &[AblationSetting]) -> Result<String> {
    let mut text = crate::evaluation::config_echo(&cfg.echo(&nets.checksums()));
    text.push_str(ABLATION_HEADER);
    text.push('\n');
    for setting in grid {
        let mut c = cfg.clone();
        c.models = vec![Model::Infernet];
        c.fusion.taps = setting.taps.clone();
        c.fusion.layer_combine = setting.layer_combine;
        c.fusion.fixation_combine = setting.fixation_combine;
        c.common = setting.common;
        if collect_samples(ds, &c)?.is_empty() {
            // e.g. shared fixations on a single-subject dataset
            continue;
        }
        let outcome = evaluate(ds, nets, &c, false)?;
        for r in &outcome.report.rows {
            text.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{}\n",
                setting.label,
                join(&setting.taps.indices()).replace(',', " "),
                enum_name(&setting.layer_combine),
                enum_name(&setting.fixation_combine),
                setting.common.is_some(),
                r.t,
                r.n,
                r.a_m,
                r.stderr,
                r.a_c,
                r.p_r
            ));
        }
    }
    Ok(text)
}

/// Top-N category accuracy over trials that carry a class label.
pub fn category_table(ds: &Dataset, cfg: &RunConfig, spec: &NetworkSpec, bundle: &WeightBundle, n_values: &[usize]) -> Result<TopNTable> {
    cfg.validate()?;
    let n_classes = bundle.labels().len();
    let clf = NetClassifier { net: spec, bundle };
    let samples: Vec<Sample> = collect_samples(ds, cfg)?
        .into_iter()
        .filter(|s| ds.trials[s.trial_index].imagenet_class.is_some())
        .collect();
    if samples.is_empty() {
        return Err(Error::Empty("labelled samples"));
    }
    let ranked = par_map(cfg.threads, &samples, |s| {
        let trial = &ds.trials[s.trial_index];
        let search = read_image(&ds.resolve(&trial.search_img))?;
        let patches = s
            .fixations
            .iter()
            .map(|&f| crop_patch(&search, f, cfg.fusion.patch_side))
            .collect::<Result<Vec<_>>>()?;
        Ok(infer_category(&patches, &clf)?.into_iter().map(|(c, _)| c).collect::<Vec<usize>>())
    })?;
    let mut by_t = Vec::new();
    let mut truths: Option<Vec<usize>> = None;
    for &t in &cfg.t_values {
        let idx: Vec<usize> = (0..samples.len()).filter(|&i| samples[i].t == t).collect();
        if idx.is_empty() {
            continue;
        }
        let tr: Vec<usize> = idx
            .iter()
            .map(|&i| ds.trials[samples[i].trial_index].imagenet_class.unwrap() as usize)
            .collect();
        // rows at different T can cover different trials; score each row
        // against its own truths
        let row = topn_table(&[(t, idx.iter().map(|&i| ranked[i].clone()).collect())], &tr, n_values, n_classes)?;
        by_t.push(row);
        truths.get_or_insert(tr);
    }
    Ok(TopNTable {
        t_values: by_t.iter().map(|r| r.t_values[0]).collect(),
        n_values: n_values.to_vec(),
        cells: by_t.into_iter().map(|r| r.cells.into_iter().next().unwrap()).collect(),
    })
}

/// Task type of every trial, for summaries.
pub fn task_counts(ds: &Dataset) -> (usize, usize) {
    let arrays = ds.trials.iter().filter(|t| t.task == TaskType::Array).count();
    (arrays, ds.trials.len() - arrays)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::load_manifest;
    use crate::synthgen::{write_synthetic_dataset, SynthDatasetSpec};

    fn synth(trials: usize) -> (tempfile::TempDir, Dataset) {
        let dir = tempfile::tempdir().unwrap();
        let spec = SynthDatasetSpec {
            trials,
            subjects: 2,
            fixations: 2,
            ..Default::default()
        };
        let path = write_synthetic_dataset(dir.path(), &spec).unwrap();
        let ds = load_manifest(&path).unwrap();
        (dir, ds)
    }

    #[test]
    fn parse_models_and_weights() {
        assert_eq!("chance".parse::<Model>().unwrap(), Model::Chance);
        assert!("oracle".parse::<Model>().is_err());
        assert_eq!("random:7".parse::<WeightsSource>().unwrap(), WeightsSource::Random(7));
        assert_eq!("random-full:2".parse::<WeightsSource>().unwrap(), WeightsSource::RandomFull(2));
        assert!("random:x".parse::<WeightsSource>().is_err());
        assert_eq!("w.nnwb".parse::<WeightsSource>().unwrap().to_string(), "w.nnwb");
    }

    #[test]
    fn samples_respect_t() {
        let (_d, ds) = synth(3);
        let cfg = RunConfig {
            t_values: vec![1, 2, 3],
            ..Default::default()
        };
        let s = collect_samples(&ds, &cfg).unwrap();
        assert_eq!(s.iter().filter(|s| s.t == 1).count(), 6);
        assert_eq!(s.iter().filter(|s| s.t == 2).count(), 6);
        assert_eq!(s.iter().filter(|s| s.t == 3).count(), 0);
    }

    #[test]
    fn chance_and_saliency_sweep_is_thread_invariant() {
        let (_d, ds) = synth(4);
        let cfg = RunConfig {
            models: vec![Model::Chance, Model::Ittikoch, Model::Tempmatch],
            seed: 5,
            ..Default::default()
        };
        let nets = Networks::load(&cfg).unwrap();
        let one = evaluate(&ds, &nets, &cfg, true).unwrap();
        let three = evaluate(&ds, &nets, &RunConfig { threads: 3, ..cfg.clone() }, true).unwrap();
        assert_eq!(one.report.to_csv(), three.report.to_csv());
        assert_eq!(one.report.rows.len(), 3);
        for r in &one.report.rows {
            assert_eq!(r.a_c, 3.0);
            assert_eq!(r.p_r, (r.a_c - r.a_m) / r.a_c);
        }
        assert!(one.report.to_csv().contains("# seed=5\n"));
    }

    #[test]
    fn common_fixations_give_one_sample_per_trial() {
        let (_d, ds) = synth(3);
        let cfg = RunConfig {
            common: Some(CommonFixations {
                radius: 200,
                min_subjects: 2,
            }),
            ..Default::default()
        };
        let s = collect_samples(&ds, &cfg).unwrap();
        assert_eq!(s.len(), 3);
        assert!(s.iter().all(|s| s.subject == COMMON_SUBJECT && s.fixations.len() == 1));
        let echo = cfg.echo(&[]);
        assert!(echo.contains(&("common".into(), "radius=200 min_subjects=2".into())));
        assert!(echo.contains(&("tap_stages".into(), tap_stages(&TapSet::default()))));
    }

    #[test]
    fn infernet_requires_weights() {
        let cfg = RunConfig::default();
        assert!(Networks::load(&cfg).is_err());
    }

    #[test]
    fn ablation_grid_shape() {
        let g = default_ablation_grid();
        assert_eq!(g.len(), 12);
        assert!(g[11].common.is_some());
        assert_eq!(g[6].taps.indices(), vec![31]);
        assert_eq!(g[9].label, "mean+max");
    }
}
