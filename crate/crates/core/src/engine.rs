//! The inference pipeline: fixation patches are compared against the
//! masked search image layer by layer, the per-layer similarity maps are
//! fused per fixation, the fused maps are accumulated over fixations, and
//! the accumulated map drives an argmax-and-eliminate guess loop.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::convnet::{classify, forward_taps, BundleMeta, FeatureTaps, NetworkSpec, TapSet, WeightBundle};
use crate::dataset::{Candidate, Fixation, TaskType, Trial};
use crate::error::{Error, Result};
use crate::image::{mask_regions, Rect, RgbImage};
use crate::tensor::{minmax_normalize, resample_bilinear_shifted, xcorr, Map2D, Resample, Similarity, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerCombine {
    #[default]
    Max,
    Mean,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FixationCombine {
    #[default]
    Sum,
    Max,
    Mean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub layer_combine: LayerCombine,
    pub fixation_combine: FixationCombine,
    pub taps: TapSet,
    pub patch_side: usize,
    pub clamp_negative: bool,
    pub similarity: Similarity,
    /// How coarse feature maps are brought back to image resolution.
    pub resample: Resample,
    /// Side of the square mask used where no object box covers a fixation.
    pub mask_side: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            layer_combine: LayerCombine::Max,
            fixation_combine: FixationCombine::Sum,
            taps: TapSet::default(),
            patch_side: 28,
            clamp_negative: true,
            similarity: Similarity::Cosine,
            resample: Resample::HalfPixel,
            mask_side: 56,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.taps.is_empty() {
            return Err(Error::Empty("tap set"));
        }
        if self.patch_side < 8 {
            return Err(Error::invalid(format!("patch side {} is below 8", self.patch_side)));
        }
        if self.mask_side == 0 {
            return Err(Error::invalid("mask side must be >= 1"));
        }
        Ok(())
    }
}

/// Accumulated evidence map at search-image resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct InferenceMap {
    pub map: Map2D,
    pub trial_id: String,
    pub fixation_count: usize,
}

/// Crops a `side`×`side` patch centered on the fixation (edges replicated)
/// and applies the bundle's input normalization.
pub fn extract_patch(image: &RgbImage, fixation: Fixation, side: usize, meta: &BundleMeta) -> Result<Tensor> {
    Ok(meta.preprocess(&crop_patch(image, fixation, side)?))
}

/// Raw-pixel version of [`extract_patch`].
pub fn crop_patch(image: &RgbImage, fixation: Fixation, side: usize) -> Result<RgbImage> {
    let inside = fixation.x >= 0
        && fixation.y >= 0
        && (fixation.x as usize) < image.width()
        && (fixation.y as usize) < image.height();
    if !inside {
        return Err(Error::invalid(format!(
            "fixation ({}, {}) outside the {}×{} image",
            fixation.x,
            fixation.y,
            image.width(),
            image.height()
        )));
    }
    Ok(image.crop_clamped(fixation.x, fixation.y, side))
}

/// Regions to black out for a set of error fixations: the box of the
/// candidate under each fixation on array trials, otherwise a
/// `mask_side` square centered on the fixation.
pub fn fixation_masks(trial: &Trial, fixations: &[Fixation], mask_side: usize) -> Vec<Rect> {
    let mut out: Vec<Rect> = Vec::new();
    for f in fixations {
        let r = match (trial.task, trial.candidate_at(f.x, f.y)) {
            (TaskType::Array, Some(c)) => c.rect,
            _ => Rect::centered(f.x, f.y, mask_side as i64),
        };
        if !out.contains(&r) {
            out.push(r);
        }
    }
    out
}

/// One normalized similarity map per tap, at `out_h`×`out_w`, from
/// precomputed patch (`prior`) and search-image (`likelihood`) features.
pub fn layer_maps(prior: &FeatureTaps, likelihood: &FeatureTaps, out_h: usize, out_w: usize, cfg: &FusionConfig) -> Result<Vec<Map2D>> {
    prior
        .iter()
        .map(|(tap, kernel)| {
            let field = likelihood
                .get(&tap.label)
                .ok_or_else(|| Error::invalid(format!("search features lack tap {}", tap.label)))?;
            let mut m = xcorr(kernel, field, cfg.similarity)?;
            if cfg.clamp_negative {
                m = m.map(|v| v.max(0.0));
            }
            // an even kernel's window is centered half a cell before its output index
            let dims = kernel.dims();
            let half = |k: usize| if cfg.resample == Resample::HalfPixel && k % 2 == 0 { 0.5 } else { 0.0 };
            let up = resample_bilinear_shifted(&m, out_h, out_w, cfg.resample, (half(dims[1]), half(dims[2])))?;
            Ok(minmax_normalize(&up))
        })
        .collect()
}

/// Per-tap similarity maps between a preprocessed patch and a preprocessed
/// (already masked) search image.
pub fn similarity_maps(patch: &Tensor, masked_search: &Tensor, net: &NetworkSpec, bundle: &WeightBundle, cfg: &FusionConfig) -> Result<Vec<Map2D>> {
    let (_, h, w) = masked_search.chw()?;
    let prior = forward_taps(net, bundle, patch, &cfg.taps)?;
    let likelihood = forward_taps(net, bundle, masked_search, &cfg.taps)?;
    layer_maps(&prior, &likelihood, h, w, cfg)
}

fn check_same_extent(maps: &[Map2D], what: &'static str) -> Result<()> {
    let first = maps.first().ok_or(Error::Empty(what))?;
    if let Some(bad) = maps.iter().find(|m| !m.same_extent(first)) {
        return Err(Error::Shape {
            op: what,
            left: vec![first.height(), first.width()],
            right: vec![bad.height(), bad.width()],
        });
    }
    Ok(())
}

/// Pointwise max or mean across layer maps.
pub fn fuse_layers(maps: &[Map2D], mode: LayerCombine) -> Result<Map2D> {
    check_same_extent(maps, "fuse_layers")?;
    let (h, w) = (maps[0].height(), maps[0].width());
    let n = maps.len() as f64;
    let values = (0..h * w)
        .map(|i| match mode {
            LayerCombine::Max => maps.iter().map(|m| m.values()[i]).fold(f32::NEG_INFINITY, f32::max),
            LayerCombine::Mean => (maps.iter().map(|m| m.values()[i] as f64).sum::<f64>() / n) as f32,
        })
        .collect();
    Map2D::new(h, w, values)
}

/// Pointwise sum, max or mean across per-fixation maps.
///
/// Each pixel's values are sorted before reduction, so any permutation of
/// `maps` yields bit-identical output.
pub fn accumulate_fixations(maps: &[Map2D], mode: FixationCombine) -> Result<Map2D> {
    check_same_extent(maps, "accumulate_fixations")?;
    let (h, w) = (maps[0].height(), maps[0].width());
    let mut column = Vec::with_capacity(maps.len());
    let values = (0..h * w)
        .map(|i| {
            column.clear();
            column.extend(maps.iter().map(|m| m.values()[i]));
            column.sort_by(f32::total_cmp);
            let sum = || column.iter().map(|&v| v as f64).sum::<f64>();
            match mode {
                FixationCombine::Sum => sum() as f32,
                FixationCombine::Mean => (sum() / column.len() as f64) as f32,
                FixationCombine::Max => *column.last().unwrap(),
            }
        })
        .collect();
    Map2D::new(h, w, values)
}

/// The full pipeline bound to one network and weight bundle.
pub struct InferNet<'a> {
    pub net: &'a NetworkSpec,
    pub bundle: &'a WeightBundle,
    pub cfg: FusionConfig,
}

impl<'a> InferNet<'a> {
    pub fn new(net: &'a NetworkSpec, bundle: &'a WeightBundle, cfg: FusionConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { net, bundle, cfg })
    }

    /// Fused map for each fixation against a search image with every
    /// fixated object masked.
    pub fn per_fixation_maps(&self, trial: &Trial, search: &RgbImage, fixations: &[Fixation]) -> Result<Vec<Map2D>> {
        if fixations.is_empty() {
            return Err(Error::Empty("error fixations"));
        }
        let masked = mask_regions(search, &fixation_masks(trial, fixations, self.cfg.mask_side));
        let meta = self.bundle.meta();
        let likelihood = forward_taps(self.net, self.bundle, &meta.preprocess(&masked), &self.cfg.taps)?;
        fixations
            .iter()
            .map(|&f| {
                let patch = extract_patch(search, f, self.cfg.patch_side, meta)?;
                let prior = forward_taps(self.net, self.bundle, &patch, &self.cfg.taps)?;
                let maps = layer_maps(&prior, &likelihood, search.height(), search.width(), &self.cfg)?;
                fuse_layers(&maps, self.cfg.layer_combine)
            })
            .collect()
    }

    pub fn inference_map(&self, trial: &Trial, search: &RgbImage, fixations: &[Fixation]) -> Result<InferenceMap> {
        let maps = self.per_fixation_maps(trial, search, fixations)?;
        Ok(InferenceMap {
            map: accumulate_fixations(&maps, self.cfg.fixation_combine)?,
            trial_id: trial.id.clone(),
            fixation_count: fixations.len(),
        })
    }
}

/// When a natural-image guess counts as a hit.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SuccessRule {
    /// The guessed pixel lies inside the target box.
    #[default]
    PointInBox,
    /// The elimination window around the guess overlaps the target box
    /// with at least this intersection-over-union.
    Iou(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub enum SearchSpace {
    /// Remaining candidate objects; fixated ones are already removed.
    Candidates(Vec<Candidate>),
    /// Every pixel, with square elimination after each miss.
    Pixels { elim_side: usize, budget: usize },
}

/// Everything the guess loop needs about one trial.
#[derive(Clone, Debug, PartialEq)]
pub struct GuessTask {
    pub width: usize,
    pub height: usize,
    pub target: Rect,
    pub target_id: Option<String>,
    pub space: SearchSpace,
    pub rule: SuccessRule,
}

impl GuessTask {
    /// Array trials search the candidates not under any error fixation;
    /// natural trials search pixels.
    pub fn for_trial(trial: &Trial, fixations: &[Fixation], elim_side: usize, budget: usize) -> Result<Self> {
        let space = match trial.task {
            TaskType::Array => {
                let remaining: Vec<Candidate> = trial
                    .candidates
                    .iter()
                    .filter(|c| c.rect == trial.target_box || !fixations.iter().any(|f| c.rect.contains(f.x, f.y)))
                    .cloned()
                    .collect();
                SearchSpace::Candidates(remaining)
            }
            TaskType::Natural => SearchSpace::Pixels { elim_side, budget },
        };
        Ok(Self {
            width: trial.width,
            height: trial.height,
            target: trial.target_box,
            target_id: trial.target_candidate().map(|c| c.id.clone()),
            space,
            rule: SuccessRule::PointInBox,
        })
    }

    pub fn with_rule(mut self, rule: SuccessRule) -> Self {
        self.rule = rule;
        self
    }

    /// Number of guesses available: remaining candidates or the budget.
    pub fn capacity(&self) -> usize {
        match &self.space {
            SearchSpace::Candidates(c) => c.len(),
            SearchSpace::Pixels { budget, .. } => *budget,
        }
    }

    fn validate(&self) -> Result<()> {
        match &self.space {
            SearchSpace::Candidates(c) => {
                if c.is_empty() {
                    return Err(Error::Empty("remaining candidates"));
                }
                let id = self
                    .target_id
                    .as_deref()
                    .ok_or_else(|| Error::invalid("array task without a target candidate"))?;
                if !c.iter().any(|c| c.id == id) {
                    return Err(Error::invalid("target candidate is not among the remaining candidates"));
                }
            }
            SearchSpace::Pixels { budget, elim_side } => {
                if *budget < 1 {
                    return Err(Error::invalid("guess budget must be >= 1"));
                }
                if *elim_side < 1 {
                    return Err(Error::invalid("elimination side must be >= 1"));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Guess {
    pub x: i64,
    pub y: i64,
    pub candidate: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GuessTrace {
    pub guesses: Vec<Guess>,
    /// 1-based index of the correct guess.
    pub success_index: Option<usize>,
    /// Guess capacity of the task; misses are scored as `budget + 1`.
    pub budget: usize,
}

impl GuessTrace {
    /// Number of guesses charged to this trace.
    pub fn score(&self) -> usize {
        self.success_index.unwrap_or(self.budget + 1)
    }
}

/// Remaining (not yet eliminated) pixels of a natural-image search.
pub struct Alive<'a> {
    pub width: usize,
    pub height: usize,
    pub alive: &'a [bool],
    pub count: usize,
}

/// Chooses the next guess. Map-driven and random choosers share the
/// elimination loop in [`run_guesses`].
pub trait GuessPolicy {
    /// Index into `remaining` of the next candidate.
    fn pick_candidate(&mut self, remaining: &[Candidate]) -> usize;
    /// Next pixel as (row, col); `None` when nothing is left.
    fn pick_pixel(&mut self, alive: &Alive<'_>) -> Option<(usize, usize)>;
}

/// Greedy argmax over a map with raster-order tie breaking.
pub struct MapPolicy<'m>(pub &'m Map2D);

impl GuessPolicy for MapPolicy<'_> {
    fn pick_candidate(&mut self, remaining: &[Candidate]) -> usize {
        let score = |c: &Candidate| box_max(self.0, &c.rect).map(|(v, _, _)| v).unwrap_or(f32::NEG_INFINITY);
        let mut best = 0;
        for (i, c) in remaining.iter().enumerate().skip(1) {
            let (s, b) = (score(c), score(&remaining[best]));
            let earlier = (c.rect.y, c.rect.x) < (remaining[best].rect.y, remaining[best].rect.x);
            if s > b || (s == b && earlier) {
                best = i;
            }
        }
        best
    }

    fn pick_pixel(&mut self, alive: &Alive<'_>) -> Option<(usize, usize)> {
        let mut best: Option<usize> = None;
        for (i, (&ok, &v)) in alive.alive.iter().zip(self.0.values()).enumerate() {
            if ok && best.is_none_or(|b| v > self.0.values()[b]) {
                best = Some(i);
            }
        }
        best.map(|i| (i / alive.width, i % alive.width))
    }
}

/// Uniform choice among what remains.
pub struct RandomPolicy<R>(pub R);

impl<R: Rng> GuessPolicy for RandomPolicy<R> {
    fn pick_candidate(&mut self, remaining: &[Candidate]) -> usize {
        self.0.gen_range(0..remaining.len())
    }

    fn pick_pixel(&mut self, alive: &Alive<'_>) -> Option<(usize, usize)> {
        if alive.count == 0 {
            return None;
        }
        let total = alive.width * alive.height;
        // rejection sampling while most pixels are alive, exact rank otherwise
        if alive.count * 4 >= total {
            loop {
                let i = self.0.gen_range(0..total);
                if alive.alive[i] {
                    return Some((i / alive.width, i % alive.width));
                }
            }
        }
        let k = self.0.gen_range(0..alive.count);
        let i = alive
            .alive
            .iter()
            .enumerate()
            .filter(|(_, &a)| a)
            .nth(k)
            .map(|(i, _)| i)?;
        Some((i / alive.width, i % alive.width))
    }
}

/// Maximum of `map` inside `rect` (clipped), with its raster-first location.
pub(crate) fn box_max(map: &Map2D, rect: &Rect) -> Option<(f32, usize, usize)> {
    let clip = rect.intersect(&Rect::new(0, 0, map.width() as i64, map.height() as i64));
    let mut best: Option<(f32, usize, usize)> = None;
    for y in clip.y..clip.y + clip.h {
        for x in clip.x..clip.x + clip.w {
            let v = map.get(y as usize, x as usize);
            if best.is_none_or(|(b, _, _)| v > b) {
                best = Some((v, y as usize, x as usize));
            }
        }
    }
    best
}

/// The elimination loop shared by every model and by chance.
pub fn run_guesses(task: &GuessTask, policy: &mut impl GuessPolicy, map: Option<&Map2D>) -> Result<GuessTrace> {
    task.validate()?;
    let mut guesses = Vec::new();
    let mut success_index = None;
    match &task.space {
        SearchSpace::Candidates(candidates) => {
            let target_id = task.target_id.as_deref().unwrap_or_default();
            let mut remaining = candidates.clone();
            while !remaining.is_empty() {
                let c = remaining.remove(policy.pick_candidate(&remaining));
                let (x, y) = match map.and_then(|m| box_max(m, &c.rect)) {
                    Some((_, y, x)) => (x as i64, y as i64),
                    None => c.rect.center(),
                };
                let hit = c.id == target_id;
                guesses.push(Guess {
                    x,
                    y,
                    candidate: Some(c.id),
                });
                if hit {
                    success_index = Some(guesses.len());
                    break;
                }
            }
        }
        SearchSpace::Pixels { elim_side, budget } => {
            let (w, h) = (task.width, task.height);
            let mut alive = vec![true; w * h];
            let mut count = w * h;
            while guesses.len() < *budget {
                let view = Alive {
                    width: w,
                    height: h,
                    alive: &alive,
                    count,
                };
                let Some((row, col)) = policy.pick_pixel(&view) else {
                    break;
                };
                let (x, y) = (col as i64, row as i64);
                guesses.push(Guess { x, y, candidate: None });
                let window = Rect::centered(x, y, *elim_side as i64);
                let hit = match task.rule {
                    SuccessRule::PointInBox => task.target.contains(x, y),
                    SuccessRule::Iou(t) => window.iou(&task.target) >= t,
                };
                if hit {
                    success_index = Some(guesses.len());
                    break;
                }
                let clip = window.intersect(&Rect::new(0, 0, w as i64, h as i64));
                for yy in clip.y..clip.y + clip.h {
                    for xx in clip.x..clip.x + clip.w {
                        let i = yy as usize * w + xx as usize;
                        if alive[i] {
                            alive[i] = false;
                            count -= 1;
                        }
                    }
                }
            }
        }
    }
    Ok(GuessTrace {
        guesses,
        success_index,
        budget: task.capacity(),
    })
}

/// Greedy guessing on an inference map: arrays guess the remaining
/// candidate with the highest in-box maximum, natural images the highest
/// surviving pixel, eliminating around each miss.
pub fn infer_target(map: &Map2D, task: &GuessTask) -> Result<GuessTrace> {
    if map.height() != task.height || map.width() != task.width {
        return Err(Error::Shape {
            op: "infer_target",
            left: vec![map.height(), map.width()],
            right: vec![task.height, task.width],
        });
    }
    run_guesses(task, &mut MapPolicy(map), Some(map))
}

/// Anything that maps an RGB patch to class probabilities.
pub trait Classifier {
    fn classify(&self, patch: &RgbImage) -> Result<Vec<f32>>;
}

/// VGG16 classification of a patch resized to the bundle's input side.
pub struct NetClassifier<'a> {
    pub net: &'a NetworkSpec,
    pub bundle: &'a WeightBundle,
}

impl Classifier for NetClassifier<'_> {
    fn classify(&self, patch: &RgbImage) -> Result<Vec<f32>> {
        let side = self.bundle.meta().input_side;
        let resized = patch.resize(side, side)?;
        classify(self.net, self.bundle, &self.bundle.meta().preprocess(&resized))
    }
}

/// Class ids ranked by probability summed over patches (descending; ties
/// go to the lower class id).
pub fn infer_category(patches: &[RgbImage], classifier: &impl Classifier) -> Result<Vec<(usize, f64)>> {
    if patches.is_empty() {
        return Err(Error::Empty("category patches"));
    }
    let mut scores: Vec<f64> = Vec::new();
    for p in patches {
        let probs = classifier.classify(p)?;
        if scores.is_empty() {
            scores = vec![0.0; probs.len()];
        } else if scores.len() != probs.len() {
            return Err(Error::invalid("classifier output length changed between patches"));
        }
        for (s, &v) in scores.iter_mut().zip(&probs) {
            *s += v as f64;
        }
    }
    let mut ranked: Vec<(usize, f64)> = scores.into_iter().enumerate().collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(ranked)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cand(id: &str, x: i64, y: i64) -> Candidate {
        Candidate {
            id: id.into(),
            rect: Rect::new(x, y, 10, 10),
        }
    }

    fn array_task(target: usize) -> GuessTask {
        let cands: Vec<Candidate> = (0..5).map(|i| cand(&format!("c{i}"), 10 + 20 * i as i64, 10 + 5 * i as i64)).collect();
        GuessTask {
            width: 120,
            height: 80,
            target: cands[target].rect,
            target_id: Some(cands[target].id.clone()),
            space: SearchSpace::Candidates(cands),
            rule: SuccessRule::PointInBox,
        }
    }

    fn natural_task(target: Rect, elim: usize, budget: usize) -> GuessTask {
        GuessTask {
            width: 60,
            height: 40,
            target,
            target_id: None,
            space: SearchSpace::Pixels { elim_side: elim, budget },
            rule: SuccessRule::PointInBox,
        }
    }

    fn rand_map(h: usize, w: usize, seed: u64) -> Map2D {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Map2D::from_fn(h, w, |_, _| rand::Rng::gen_range(&mut rng, 0.0..1.0))
    }

    #[test]
    fn fuse_layer_cases() {
        let m = rand_map(4, 5, 1);
        assert_eq!(fuse_layers(&[m.clone()], LayerCombine::Max).unwrap(), m);
        assert_eq!(fuse_layers(&[Map2D::zeros(4, 5), m.clone()], LayerCombine::Max).unwrap(), m);
        assert!(fuse_layers(&[], LayerCombine::Max).is_err());
        assert!(fuse_layers(&[m.clone(), Map2D::zeros(3, 5)], LayerCombine::Mean).is_err());
    }

    #[test]
    fn accumulate_cases() {
        let m = rand_map(4, 5, 2);
        for mode in [FixationCombine::Sum, FixationCombine::Max, FixationCombine::Mean] {
            assert_eq!(accumulate_fixations(&[m.clone()], mode).unwrap(), m);
        }
        let mut a = Map2D::zeros(6, 6);
        a.set(1, 1, 1.0);
        let mut b = Map2D::zeros(6, 6);
        b.set(4, 4, 0.8);
        let s = accumulate_fixations(&[a, b], FixationCombine::Sum).unwrap();
        assert_eq!(s.get(1, 1), 1.0);
        assert_eq!(s.get(4, 4), 0.8);
        assert!(accumulate_fixations(&[], FixationCombine::Sum).is_err());
    }

    #[test]
    fn target_peak_hits_first() {
        let task = array_task(3);
        let mut m = Map2D::zeros(80, 120);
        m.set(27, 75, 1.0); // inside c3 at (70, 25)
        let tr = infer_target(&m, &task).unwrap();
        assert_eq!(tr.success_index, Some(1));
        assert_eq!(tr.guesses[0], Guess { x: 75, y: 27, candidate: Some("c3".into()) });

        let nat = natural_task(Rect::new(30, 10, 10, 10), 8, 5);
        let mut m = Map2D::zeros(40, 60);
        m.set(15, 35, 2.0);
        assert_eq!(infer_target(&m, &nat).unwrap().success_index, Some(1));
    }

    #[test]
    fn constant_map_follows_raster_order() {
        // expected position over the 5 possible targets: (1+2+3+4+5)/5 = 3
        let flat = Map2D::filled(80, 120, 0.5);
        let total: usize = (0..5)
            .map(|t| {
                let tr = infer_target(&flat, &array_task(t)).unwrap();
                let order: Vec<_> = tr.guesses.iter().map(|g| g.candidate.clone().unwrap()).collect();
                assert_eq!(order, (0..=t).map(|i| format!("c{i}")).collect::<Vec<_>>());
                tr.score()
            })
            .sum();
        assert_eq!(total as f64 / 5.0, 3.0);
    }

    #[test]
    fn natural_misses_respect_budget_and_spacing() {
        let target = Rect::new(0, 0, 1, 1);
        let mut m = rand_map(40, 60, 3);
        m.set(0, 0, -1.0);
        let task = natural_task(target, 10, 6);
        let tr = infer_target(&m, &task).unwrap();
        assert_eq!(tr.guesses.len(), 6);
        assert_eq!(tr.success_index, None);
        assert_eq!(tr.score(), 7);
        for (i, a) in tr.guesses.iter().enumerate() {
            for b in &tr.guesses[i + 1..] {
                assert!((a.x - b.x).abs().max((a.y - b.y).abs()) >= 5);
            }
        }
    }

    #[test]
    fn guess_loop_errors() {
        let mut t = array_task(0);
        t.space = SearchSpace::Candidates(vec![]);
        assert!(infer_target(&Map2D::zeros(80, 120), &t).is_err());
        let nat = natural_task(Rect::new(0, 0, 5, 5), 4, 0);
        assert!(infer_target(&Map2D::zeros(40, 60), &nat).is_err());
    }

    #[test]
    fn iou_rule() {
        let target = Rect::new(20, 20, 10, 10);
        let mut m = Map2D::zeros(40, 60);
        m.set(21, 21, 1.0); // inside but window barely overlaps
        let task = natural_task(target, 10, 1).with_rule(SuccessRule::Iou(0.5));
        assert_eq!(infer_target(&m, &task).unwrap().success_index, None);
        let mut m = Map2D::zeros(40, 60);
        m.set(25, 25, 1.0);
        assert_eq!(infer_target(&m, &task).unwrap().success_index, Some(1));
    }

    struct Table(Vec<Vec<f32>>, std::cell::Cell<usize>);

    impl Classifier for Table {
        fn classify(&self, _: &RgbImage) -> Result<Vec<f32>> {
            let i = self.1.get();
            self.1.set(i + 1);
            Ok(self.0[i % self.0.len()].clone())
        }
    }

    fn peaked(n: usize, top: usize, second: usize) -> Vec<f32> {
        let mut v = vec![0.1 / (n - 2) as f32; n];
        v[top] = 0.6;
        v[second] = 0.3;
        v
    }

    #[test]
    fn category_accumulation() {
        let patch = RgbImage::filled(4, 4, [0.5; 3]);
        let a = peaked(20, 3, 7);
        let b = peaked(20, 11, 2);
        let one = infer_category(&[patch.clone()], &Table(vec![a.clone()], Default::default())).unwrap();
        assert_eq!(one[0].0, 3);
        assert_eq!(one[1].0, 7);
        let dup = infer_category(&[patch.clone(), patch.clone()], &Table(vec![a.clone()], Default::default())).unwrap();
        let ids = |r: &[(usize, f64)]| r.iter().map(|x| x.0).collect::<Vec<_>>();
        assert_eq!(ids(&one), ids(&dup));
        let both = infer_category(&[patch.clone(), patch], &Table(vec![a, b], Default::default())).unwrap();
        let top2: Vec<usize> = ids(&both)[..2].to_vec();
        assert!(top2.contains(&3) && top2.contains(&11), "{top2:?}");
        assert!(infer_category(&[], &Table(vec![], Default::default())).is_err());
    }

    proptest! {
        #[test]
        fn max_fusion_dominates(seed in 0u64..1000, n in 1usize..5) {
            let maps: Vec<Map2D> = (0..n).map(|i| rand_map(5, 7, seed * 10 + i as u64)).collect();
            let f = fuse_layers(&maps, LayerCombine::Max).unwrap();
            for m in &maps {
                prop_assert!(f.values().iter().zip(m.values()).all(|(a, b)| a >= b));
            }
        }

        #[test]
        fn accumulation_is_order_free(seed in 0u64..1000, n in 2usize..6, rot in 1usize..5) {
            let maps: Vec<Map2D> = (0..n).map(|i| rand_map(4, 4, seed * 10 + i as u64)).collect();
            let mut shuffled = maps.clone();
            shuffled.rotate_left(rot % n);
            shuffled.swap(0, n - 1);
            for mode in [FixationCombine::Sum, FixationCombine::Max, FixationCombine::Mean] {
                prop_assert_eq!(accumulate_fixations(&maps, mode).unwrap(), accumulate_fixations(&shuffled, mode).unwrap());
            }
        }

        #[test]
        fn traces_never_repeat(seed in 0u64..500) {
            let m = rand_map(40, 60, seed);
            let tr = infer_target(&m, &natural_task(Rect::new(50, 30, 5, 5), 9, 12)).unwrap();
            let mut seen = std::collections::BTreeSet::new();
            prop_assert!(tr.guesses.iter().all(|g| seen.insert((g.x, g.y))));
            let m = rand_map(80, 120, seed);
            let tr = infer_target(&m, &array_task((seed % 5) as usize)).unwrap();
            prop_assert!(tr.success_index.is_some());
            prop_assert!(tr.guesses.len() <= 5);
        }
    }
}
