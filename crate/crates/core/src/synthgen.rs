//! Synthetic object-array trials with similarity-biased fixations, and an
//! independent re-implementation of the guess loop for cross-checking.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{write_manifest, Candidate, Fixation, FixationSequence, TaskType, Trial};
use crate::error::{Error, Result};
use crate::image::{write_png, Rect, RgbImage};
use crate::mix_seed;
use crate::tensor::Map2D;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Glyph {
    Disc,
    Square,
    Triangle,
    Cross,
}

pub const GLYPHS: [Glyph; 4] = [Glyph::Disc, Glyph::Square, Glyph::Triangle, Glyph::Cross];

/// Hues in degrees, spaced so no two are confusable.
pub const HUES: [f32; 6] = [0.0, 60.0, 120.0, 180.0, 240.0, 300.0];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArraySpec {
    pub n_objects: usize,
    pub object_side: usize,
    pub canvas: usize,
    pub target_canvas: usize,
    /// Scale and rotation of the target-image rendering.
    pub target_scale: f32,
    pub target_rotation_deg: f32,
    pub background: [f32; 3],
    pub seed: u64,
}

impl Default for ArraySpec {
    fn default() -> Self {
        Self {
            n_objects: 6,
            object_side: 24,
            canvas: 128,
            target_canvas: 64,
            target_scale: 1.25,
            target_rotation_deg: 30.0,
            background: [0.485, 0.456, 0.406],
            seed: 0,
        }
    }
}

/// Ring offsets from the array center. All eight are at the same distance
/// and land on a 32 px lattice of cell centers.
const RING: [(i64, i64); 8] = [(-16, -48), (16, -48), (48, -16), (48, 16), (16, 48), (-16, 48), (-48, 16), (-48, -16)];

impl ArraySpec {
    fn ring_center(&self) -> i64 {
        (self.canvas as i64 / 2 / 32) * 32
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_objects < 2 || self.n_objects > RING.len() {
            return Err(Error::invalid(format!("n_objects must be in 2..={}", RING.len())));
        }
        if self.object_side < 4 || self.object_side > 30 {
            return Err(Error::invalid("object side must be in 4..=30"));
        }
        let c = self.ring_center();
        let reach = 48 + self.object_side as i64 / 2 + 1;
        if c < reach || self.canvas as i64 - c < reach {
            return Err(Error::TooSmall {
                found: self.canvas,
                min: 128,
            });
        }
        if (self.target_canvas as f32) < self.object_side as f32 * self.target_scale * 1.5 {
            return Err(Error::invalid("target canvas too small for the scaled glyph"));
        }
        Ok(())
    }
}

fn hue_rgb(hue: f32) -> [f32; 3] {
    let (s, v) = (0.85f32, 0.9f32);
    let h = hue / 60.0;
    let c = v * s;
    let x = c * (1.0 - (h % 2.0 - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

fn inside(glyph: Glyph, u: f32, v: f32) -> bool {
    // unit shapes with half-extent 1
    match glyph {
        Glyph::Disc => u * u + v * v <= 1.0,
        Glyph::Square => u.abs() <= 0.85 && v.abs() <= 0.85,
        Glyph::Triangle => v <= 0.8 && v >= -1.0 + 2.0 * u.abs() - 0.2 && v >= -1.0,
        Glyph::Cross => (u.abs() <= 0.33 && v.abs() <= 1.0) || (v.abs() <= 0.33 && u.abs() <= 1.0),
    }
}

/// Draws a glyph centered at (cx, cy) with the given half-extent, scale and
/// rotation, using 4×4 supersampling per pixel.
pub fn draw_glyph(img: &mut RgbImage, glyph: Glyph, rgb: [f32; 3], cx: f32, cy: f32, half: f32, rotation_deg: f32) {
    let (s, c) = (-rotation_deg).to_radians().sin_cos();
    let reach = (half * 1.5).ceil() as i64;
    for y in (cy as i64 - reach).max(0)..=(cy as i64 + reach).min(img.height() as i64 - 1) {
        for x in (cx as i64 - reach).max(0)..=(cx as i64 + reach).min(img.width() as i64 - 1) {
            let mut hits = 0;
            for sy in 0..4 {
                for sx in 0..4 {
                    let px = x as f32 + (sx as f32 + 0.5) / 4.0 - 0.5 - cx;
                    let py = y as f32 + (sy as f32 + 0.5) / 4.0 - 0.5 - cy;
                    let (u, v) = ((px * c - py * s) / half, (px * s + py * c) / half);
                    if inside(glyph, u, v) {
                        hits += 1;
                    }
                }
            }
            if hits > 0 {
                let a = hits as f32 / 16.0;
                let old = img.pixel(y as usize, x as usize);
                let mixed = [0, 1, 2].map(|k| old[k] * (1.0 - a) + rgb[k] * a);
                img.set_pixel(y as usize, x as usize, mixed);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticTrial {
    pub trial: Trial,
    pub search: RgbImage,
    pub target: RgbImage,
    /// (glyph, hue index) per candidate, in candidate order.
    pub objects: Vec<(Glyph, usize)>,
}

/// Renders one array trial. Image paths are relative: `images/<id>_search.png`
/// and `images/<id>_target.png`.
pub fn gen_array_trial(spec: &ArraySpec, id: &str) -> Result<SyntheticTrial> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut slots: Vec<usize> = (0..RING.len()).collect();
    let mut variants: Vec<(Glyph, usize)> = GLYPHS.iter().flat_map(|&g| (0..HUES.len()).map(move |h| (g, h))).collect();
    partial_shuffle(&mut slots, spec.n_objects, &mut rng);
    partial_shuffle(&mut variants, spec.n_objects, &mut rng);
    let mut chosen: Vec<usize> = slots[..spec.n_objects].to_vec();
    chosen.sort_unstable();
    let objects: Vec<(Glyph, usize)> = variants[..spec.n_objects].to_vec();
    let target_idx = rng.gen_range(0..spec.n_objects);

    let c = spec.ring_center();
    let half = spec.object_side as f32 / 2.0;
    let mut search = RgbImage::filled(spec.canvas, spec.canvas, spec.background);
    let mut candidates = Vec::with_capacity(spec.n_objects);
    for (k, (&slot, &(glyph, hue))) in chosen.iter().zip(&objects).enumerate() {
        let (cx, cy) = (c + RING[slot].0, c + RING[slot].1);
        draw_glyph(&mut search, glyph, hue_rgb(HUES[hue]), cx as f32, cy as f32, half, 0.0);
        candidates.push(Candidate {
            id: format!("o{k}"),
            rect: Rect::centered(cx, cy, spec.object_side as i64),
        });
    }
    let (tg, th) = objects[target_idx];
    let mut target = RgbImage::filled(spec.target_canvas, spec.target_canvas, spec.background);
    let tc = spec.target_canvas as f32 / 2.0;
    draw_glyph(&mut target, tg, hue_rgb(HUES[th]), tc, tc, half * spec.target_scale, spec.target_rotation_deg);

    let trial = Trial {
        id: id.to_string(),
        task: TaskType::Array,
        target_img: PathBuf::from(format!("images/{id}_target.png")),
        search_img: PathBuf::from(format!("images/{id}_search.png")),
        target_box: candidates[target_idx].rect,
        candidates,
        imagenet_class: None,
        width: spec.canvas,
        height: spec.canvas,
    };
    trial.check().map_err(Error::invalid)?;
    Ok(SyntheticTrial {
        trial,
        search,
        target,
        objects,
    })
}

fn partial_shuffle<T>(v: &mut [T], k: usize, rng: &mut impl Rng) {
    for i in 0..k.min(v.len()) {
        let j = rng.gen_range(i..v.len());
        v.swap(i, j);
    }
}

/// Pearson correlation of two equally sized images over all channels.
pub fn pixel_ncc(a: &RgbImage, b: &RgbImage) -> Result<f64> {
    if a.width() != b.width() || a.height() != b.height() {
        return Err(Error::Shape {
            op: "pixel_ncc",
            left: vec![a.height(), a.width()],
            right: vec![b.height(), b.width()],
        });
    }
    let n = a.data().len() as f64;
    let ma = a.data().iter().map(|&v| v as f64).sum::<f64>() / n;
    let mb = b.data().iter().map(|&v| v as f64).sum::<f64>() / n;
    let (mut d, mut ea, mut eb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let (x, y) = (x as f64 - ma, y as f64 - mb);
        d += x * y;
        ea += x * x;
        eb += y * y;
    }
    Ok(if ea == 0.0 || eb == 0.0 { 0.0 } else { d / (ea * eb).sqrt() })
}

/// Pixel NCC between each non-target candidate and the target image, the
/// latter cropped to the scaled glyph extent and resized to the candidate box.
pub fn candidate_similarity(st: &SyntheticTrial, spec: &ArraySpec) -> Result<Vec<(String, f64)>> {
    let side = spec.object_side;
    let extent = (side as f32 * spec.target_scale).round() as usize;
    let tc = spec.target_canvas as i64 / 2;
    let template = st.target.crop_clamped(tc, tc, extent).resize(side, side)?;
    st.trial
        .candidates
        .iter()
        .filter(|c| c.rect != st.trial.target_box)
        .map(|c| {
            let (cx, cy) = c.rect.center();
            Ok((c.id.clone(), pixel_ncc(&st.search.crop_clamped(cx, cy, side), &template)?))
        })
        .collect()
}

/// `count` distinct non-target candidates drawn with probability
/// proportional to exp(beta · sim), each fixated at its center plus up to
/// `jitter` px of uniform offset.
pub fn sample_fixations(trial: &Trial, beta: f64, sim: &[(String, f64)], count: usize, jitter: i64, seed: u64) -> Result<Vec<Fixation>> {
    let pool: Vec<(&Candidate, f64)> = trial
        .candidates
        .iter()
        .filter(|c| c.rect != trial.target_box)
        .map(|c| {
            sim.iter()
                .find(|(id, _)| *id == c.id)
                .map(|(_, s)| (c, *s))
                .ok_or_else(|| Error::invalid(format!("no similarity score for candidate {}", c.id)))
        })
        .collect::<Result<_>>()?;
    if count > pool.len() {
        return Err(Error::invalid(format!("{count} fixations requested but only {} distractors", pool.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut remaining = pool;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let top = remaining.iter().map(|p| beta * p.1).fold(f64::NEG_INFINITY, f64::max);
        let weights: Vec<f64> = remaining.iter().map(|p| (beta * p.1 - top).exp()).collect();
        let total: f64 = weights.iter().sum();
        let mut u = rng.gen_range(0.0..total);
        let mut pick = remaining.len() - 1;
        for (i, w) in weights.iter().enumerate() {
            if u < *w {
                pick = i;
                break;
            }
            u -= w;
        }
        let (c, _) = remaining.remove(pick);
        let (cx, cy) = c.rect.center();
        let (dx, dy) = if jitter > 0 {
            (rng.gen_range(-jitter..=jitter), rng.gen_range(-jitter..=jitter))
        } else {
            (0, 0)
        };
        out.push(Fixation::at(cx + dx, cy + dy));
    }
    Ok(out)
}

/// Brute-force guess count: the argmax-and-eliminate loop written as plain
/// full scans. Returns the 1-based index of the correct guess.
pub fn oracle_guess_count(map: &Map2D, trial: &Trial, fixations: &[Fixation], elim_side: usize, budget: usize) -> Result<Option<usize>> {
    let (h, w) = (map.height(), map.width());
    if (h, w) != (trial.height, trial.width) {
        return Err(Error::invalid("map extent differs from trial"));
    }
    match trial.task {
        TaskType::Array => {
            let mut left: Vec<&Candidate> = trial
                .candidates
                .iter()
                .filter(|c| c.rect == trial.target_box || fixations.iter().all(|f| !c.rect.contains(f.x, f.y)))
                .collect();
            if left.is_empty() {
                return Err(Error::Empty("remaining candidates"));
            }
            let mut n = 0;
            while !left.is_empty() {
                n += 1;
                let mut best: Option<(usize, f32)> = None;
                for (i, c) in left.iter().enumerate() {
                    let mut score = f32::NEG_INFINITY;
                    for y in 0..h {
                        for x in 0..w {
                            if c.rect.contains(x as i64, y as i64) && map.get(y, x) > score {
                                score = map.get(y, x);
                            }
                        }
                    }
                    best = match best {
                        None => Some((i, score)),
                        Some((j, s)) => {
                            let better = score > s || (score == s && (c.rect.y, c.rect.x) < (left[j].rect.y, left[j].rect.x));
                            Some(if better { (i, score) } else { (j, s) })
                        }
                    };
                }
                let (i, _) = best.unwrap();
                if left[i].rect == trial.target_box {
                    return Ok(Some(n));
                }
                left.remove(i);
            }
            Ok(None)
        }
        TaskType::Natural => {
            if budget < 1 {
                return Err(Error::invalid("budget must be >= 1"));
            }
            let mut gone = vec![vec![false; w]; h];
            let half = elim_side as i64 / 2;
            for n in 1..=budget {
                let mut best: Option<(usize, usize)> = None;
                for (y, row) in gone.iter().enumerate() {
                    for (x, &g) in row.iter().enumerate() {
                        if !g && best.is_none_or(|(by, bx)| map.get(y, x) > map.get(by, bx)) {
                            best = Some((y, x));
                        }
                    }
                }
                let Some((y, x)) = best else {
                    return Ok(None);
                };
                if trial.target_box.contains(x as i64, y as i64) {
                    return Ok(Some(n));
                }
                for (yy, row) in gone.iter_mut().enumerate() {
                    for (xx, g) in row.iter_mut().enumerate() {
                        let (dy, dx) = (yy as i64 - y as i64, xx as i64 - x as i64);
                        if dy >= -half && dy < elim_side as i64 - half && dx >= -half && dx < elim_side as i64 - half {
                            *g = true;
                        }
                    }
                }
            }
            Ok(None)
        }
    }
}

/// Knobs for a complete synthetic dataset on disk.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthDatasetSpec {
    pub trials: usize,
    pub subjects: usize,
    /// Error fixations per scanpath.
    pub fixations: usize,
    pub beta: f64,
    pub jitter: i64,
    pub array: ArraySpec,
    pub seed: u64,
}

impl Default for SynthDatasetSpec {
    fn default() -> Self {
        Self {
            trials: 20,
            subjects: 1,
            fixations: 1,
            beta: 4.0,
            jitter: 2,
            array: ArraySpec::default(),
            seed: 0,
        }
    }
}

/// One trial plus its scanpaths. Each scanpath opens on the canvas center,
/// visits the sampled distractors and ends on the target.
pub fn gen_synthetic(spec: &SynthDatasetSpec, index: usize) -> Result<(SyntheticTrial, Vec<FixationSequence>)> {
    let trial_seed = mix_seed(spec.seed, index as u64);
    let array = ArraySpec {
        seed: trial_seed,
        ..spec.array.clone()
    };
    let st = gen_array_trial(&array, &format!("t{index:04}"))?;
    let sim = candidate_similarity(&st, &array)?;
    let center = (array.canvas / 2) as i64;
    let (tx, ty) = st.trial.target_box.center();
    let seqs = (0..spec.subjects)
        .map(|s| {
            let errors = sample_fixations(&st.trial, spec.beta, &sim, spec.fixations, spec.jitter, mix_seed(trial_seed, s as u64 + 1))?;
            let mut points = vec![Fixation::at(center, center)];
            points.extend(errors);
            points.push(Fixation::at(tx, ty));
            Ok(FixationSequence {
                subject: format!("s{s:02}"),
                trial: st.trial.id.clone(),
                points,
            })
        })
        .collect::<Result<_>>()?;
    Ok((st, seqs))
}

/// Writes images and `manifest.jsonl` under `dir`; returns the manifest path.
pub fn write_synthetic_dataset(dir: &Path, spec: &SynthDatasetSpec) -> Result<PathBuf> {
    let images = dir.join("images");
    std::fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let mut trials = Vec::with_capacity(spec.trials);
    let mut all = Vec::new();
    for i in 0..spec.trials {
        let (st, seqs) = gen_synthetic(spec, i)?;
        write_png(&st.search, &dir.join(&st.trial.search_img))?;
        write_png(&st.target, &dir.join(&st.trial.target_img))?;
        trials.push(st.trial);
        all.extend(seqs);
    }
    let path = dir.join("manifest.jsonl");
    write_manifest(&path, &trials, &all)?;
    Ok(path)
}
