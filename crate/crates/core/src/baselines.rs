//! Null models: uniform chance, pixel template matching and bottom-up
//! saliency. All of them feed the same guess loop as the main model.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::engine::{run_guesses, GuessTask, GuessTrace, RandomPolicy};
use crate::error::{Error, Result};
use crate::image::RgbImage;
use crate::tensor::{minmax_normalize, resample_bilinear, xcorr_cosine, Map2D, Resample, Tensor};

/// Expected guesses for uniform search without replacement over `n`.
pub fn chance_expected_guesses(n: usize) -> Result<f64> {
    if n < 1 {
        return Err(Error::invalid("chance expectation needs at least one candidate"));
    }
    Ok((n as f64 + 1.0) / 2.0)
}

/// Uniform random guessing under the same elimination loop as the models.
pub fn chance_trace(task: &GuessTask, seed: u64) -> Result<GuessTrace> {
    run_guesses(task, &mut RandomPolicy(ChaCha8Rng::seed_from_u64(seed)), None)
}

/// Pixel-space cosine template match of `patch` against `search`.
///
/// Both are shifted by the search image's per-channel mean first, so flat
/// regions carry no signal; negatives are clamped and the map is
/// minmax-normalized.
pub fn template_match_map(patch: &RgbImage, search: &RgbImage) -> Result<Map2D> {
    if patch.width() > search.width() || patch.height() > search.height() {
        return Err(Error::Shape {
            op: "template_match_map",
            left: vec![patch.height(), patch.width()],
            right: vec![search.height(), search.width()],
        });
    }
    let means: Vec<f32> = (0..3)
        .map(|c| {
            let p = search.plane(c);
            (p.iter().map(|&v| v as f64).sum::<f64>() / p.len() as f64) as f32
        })
        .collect();
    let centered = |img: &RgbImage| -> Result<Tensor> {
        let n = img.width() * img.height();
        let data = img.data().iter().enumerate().map(|(i, &v)| v - means[i / n]).collect();
        Tensor::new(vec![3, img.height(), img.width()], data)
    };
    let raw = xcorr_cosine(&centered(patch)?, &centered(search)?)?;
    Ok(minmax_normalize(&raw.map(|v| v.max(0.0))))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaliencyConfig {
    /// Requested pyramid depth; reduced automatically for small images.
    pub pyramid_levels: usize,
    pub center_scales: Vec<usize>,
    pub deltas: Vec<usize>,
    pub orientations_deg: Vec<f64>,
    /// Local-maxima window side; `None` uses max(width / 10, 3).
    pub maxima_window: Option<usize>,
    /// Number of N(·) applications per map.
    pub normalization_passes: usize,
}

impl Default for SaliencyConfig {
    fn default() -> Self {
        Self {
            pyramid_levels: 9,
            center_scales: vec![2, 3, 4],
            deltas: vec![3, 4],
            orientations_deg: vec![0.0, 45.0, 90.0, 135.0],
            maxima_window: None,
            normalization_passes: 1,
        }
    }
}

impl SaliencyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.center_scales.is_empty() || self.deltas.is_empty() || self.orientations_deg.is_empty() {
            return Err(Error::invalid("saliency scales, deltas and orientations must be non-empty"));
        }
        let deepest = self.center_scales.iter().max().unwrap() + self.deltas.iter().max().unwrap();
        if deepest >= self.pyramid_levels {
            return Err(Error::invalid(format!(
                "center + delta reaches level {deepest} but the pyramid has {} levels",
                self.pyramid_levels
            )));
        }
        if self.normalization_passes == 0 {
            return Err(Error::invalid("normalization passes must be >= 1"));
        }
        Ok(())
    }
}

fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    (if m < n as isize { m } else { period - m }) as usize
}

/// Separable convolution with reflected borders.
fn convolve_separable(map: &Map2D, row_k: &[f64], col_k: &[f64]) -> Map2D {
    let (h, w) = (map.height(), map.width());
    let (rr, cr) = ((row_k.len() / 2) as isize, (col_k.len() / 2) as isize);
    let mut tmp = vec![0.0f64; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = row_k
                .iter()
                .enumerate()
                .map(|(k, kv)| kv * map.get(y, reflect(x as isize + k as isize - rr, w)) as f64)
                .sum();
        }
    }
    Map2D::from_fn(h, w, |y, x| {
        col_k
            .iter()
            .enumerate()
            .map(|(k, kv)| kv * tmp[reflect(y as isize + k as isize - cr, h) * w + x])
            .sum::<f64>() as f32
    })
}

fn convolve_2d(map: &Map2D, kernel: &[f64], side: usize) -> Map2D {
    let (h, w) = (map.height(), map.width());
    let r = (side / 2) as isize;
    Map2D::from_fn(h, w, |y, x| {
        let mut acc = 0.0f64;
        for ky in 0..side {
            let sy = reflect(y as isize + ky as isize - r, h);
            for kx in 0..side {
                let sx = reflect(x as isize + kx as isize - r, w);
                acc += kernel[ky * side + kx] * map.get(sy, sx) as f64;
            }
        }
        acc as f32
    })
}

const BINOMIAL: [f64; 5] = [1.0 / 16.0, 4.0 / 16.0, 6.0 / 16.0, 4.0 / 16.0, 1.0 / 16.0];

/// Dyadic Gaussian pyramid; level 0 is the input. Stops early once either
/// side would drop below one pixel.
pub fn gaussian_pyramid(map: &Map2D, levels: usize) -> Vec<Map2D> {
    let mut out = vec![map.clone()];
    while out.len() < levels {
        let prev = out.last().unwrap();
        if prev.height() < 2 || prev.width() < 2 {
            break;
        }
        let blurred = convolve_separable(prev, &BINOMIAL, &BINOMIAL);
        let (h, w) = (prev.height().div_ceil(2), prev.width().div_ceil(2));
        out.push(Map2D::from_fn(h, w, |y, x| blurred.get(2 * y, 2 * x)));
    }
    out
}

/// Even/odd Gabor pair (wavelength 7 px, aspect 1, one-octave bandwidth);
/// the even kernel is shifted to zero mean.
fn gabor_pair(theta_deg: f64) -> (Vec<f64>, Vec<f64>, usize) {
    let lambda = 7.0f64;
    let b = 1.0f64;
    let sigma = lambda / std::f64::consts::PI * (2f64.ln() / 2.0).sqrt() * (2f64.powf(b) + 1.0) / (2f64.powf(b) - 1.0);
    let r = (2.0 * sigma).ceil() as isize;
    let side = (2 * r + 1) as usize;
    let (s, c) = theta_deg.to_radians().sin_cos();
    let mut even = Vec::with_capacity(side * side);
    let mut odd = Vec::with_capacity(side * side);
    for y in -r..=r {
        for x in -r..=r {
            let (xf, yf) = (x as f64, y as f64);
            let xr = xf * c + yf * s;
            let env = (-(xf * xf + yf * yf) / (2.0 * sigma * sigma)).exp();
            let phase = 2.0 * std::f64::consts::PI * xr / lambda;
            even.push(env * phase.cos());
            odd.push(env * phase.sin());
        }
    }
    let mean = even.iter().sum::<f64>() / even.len() as f64;
    even.iter_mut().for_each(|v| *v -= mean);
    (even, odd, side)
}

fn gabor_energy(map: &Map2D, theta_deg: f64) -> Map2D {
    let (even, odd, side) = gabor_pair(theta_deg);
    let e = convolve_2d(map, &even, side);
    let o = convolve_2d(map, &odd, side);
    Map2D::from_fn(map.height(), map.width(), |y, x| {
        let (a, b) = (e.get(y, x) as f64, o.get(y, x) as f64);
        (a * a + b * b).sqrt() as f32
    })
}

fn abs_diff(a: &Map2D, b: &Map2D) -> Map2D {
    Map2D::from_fn(a.height(), a.width(), |y, x| (a.get(y, x) - b.get(y, x)).abs())
}

fn resize(map: &Map2D, h: usize, w: usize) -> Result<Map2D> {
    if map.height() == h && map.width() == w {
        return Ok(map.clone());
    }
    resample_bilinear(map, h, w, Resample::HalfPixel)
}

/// Range normalization N(·): rescale to [0, 1], then weight by
/// (1 - m)² where m is the mean of the local maxima other than the global one.
pub fn normalize_map(map: &Map2D, window: Option<usize>) -> Map2D {
    let m = minmax_normalize(map);
    let (h, w) = (m.height(), m.width());
    let side = window.unwrap_or((w / 10).max(3)).max(1);
    let r = (side / 2) as isize;
    let (gy, gx) = m.argmax();
    let mut maxima = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let v = m.get(y, x);
            if v < 0.1 || (y, x) == (gy, gx) {
                continue;
            }
            let mut is_max = true;
            'scan: for dy in -r..=r {
                for dx in -r..=r {
                    let (yy, xx) = (y as isize + dy, x as isize + dx);
                    if (dy, dx) == (0, 0) || yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
                        continue;
                    }
                    let u = m.get(yy as usize, xx as usize);
                    // plateaus keep only their first pixel in raster order
                    let earlier = (dy, dx) < (0, 0);
                    if u > v || (u == v && earlier) {
                        is_max = false;
                        break 'scan;
                    }
                }
            }
            if is_max {
                maxima.push(v as f64);
            }
        }
    }
    let mbar = if maxima.is_empty() {
        0.0
    } else {
        maxima.iter().sum::<f64>() / maxima.len() as f64
    };
    let weight = ((1.0 - mbar) * (1.0 - mbar)) as f32;
    m.map(|v| v * weight)
}

/// Bottom-up saliency from intensity, color-opponency and orientation
/// center-surround contrast.
pub fn ittikoch_saliency(image: &RgbImage, cfg: &SaliencyConfig) -> Result<Map2D> {
    cfg.validate()?;
    let (h, w) = (image.height(), image.width());
    let r = Map2D::new(h, w, image.plane(0).to_vec())?;
    let g = Map2D::new(h, w, image.plane(1).to_vec())?;
    let b = Map2D::new(h, w, image.plane(2).to_vec())?;
    let intensity = Map2D::from_fn(h, w, |y, x| (r.get(y, x) + g.get(y, x) + b.get(y, x)) / 3.0);
    let i_max = intensity.max();
    // rectified opponent channels R-G, G-R, B-Y, Y-B
    let mut opp = vec![Map2D::zeros(h, w); 4];
    for y in 0..h {
        for x in 0..w {
            let i = intensity.get(y, x);
            if i <= 0.1 * i_max || i <= 0.0 {
                continue;
            }
            let (rn, gn, bn) = (r.get(y, x) / i, g.get(y, x) / i, b.get(y, x) / i);
            let big_r = (rn - (gn + bn) / 2.0).max(0.0);
            let big_g = (gn - (rn + bn) / 2.0).max(0.0);
            let big_b = (bn - (rn + gn) / 2.0).max(0.0);
            let big_y = ((rn + gn) / 2.0 - (rn - gn).abs() / 2.0 - bn).max(0.0);
            for (m, v) in opp.iter_mut().zip([big_r - big_g, big_g - big_r, big_b - big_y, big_y - big_b]) {
                m.set(y, x, v.max(0.0));
            }
        }
    }

    let levels = cfg.pyramid_levels;
    let ip = gaussian_pyramid(&intensity, levels);
    let deepest = ip.len() - 1;
    let pairs: Vec<(usize, usize)> = cfg
        .center_scales
        .iter()
        .flat_map(|&c| cfg.deltas.iter().map(move |&d| (c, c + d)))
        .filter(|&(_, s)| s <= deepest)
        .collect();
    if pairs.is_empty() {
        return Err(Error::TooSmall {
            found: h.min(w),
            min: 1 << (cfg.center_scales.iter().min().unwrap() + cfg.deltas.iter().min().unwrap()),
        });
    }
    let opp: Vec<Vec<Map2D>> = opp.iter().map(|m| gaussian_pyramid(m, levels)).collect();
    // conspicuity maps live at the finest center scale in use
    let base = pairs.iter().map(|p| p.0).min().unwrap();
    let (bh, bw) = (ip[base].height(), ip[base].width());
    let window = cfg.maxima_window;
    let norm = |m: &Map2D| {
        let mut out = m.clone();
        for _ in 0..cfg.normalization_passes {
            out = normalize_map(&out, window);
        }
        out
    };
    let accumulate = |acc: &mut Map2D, m: &Map2D| -> Result<()> {
        let m = resize(&norm(m), bh, bw)?;
        acc.values_mut().iter_mut().zip(m.values()).for_each(|(a, v)| *a += v);
        Ok(())
    };
    let center_surround = |p: &[Map2D], c: usize, s: usize| -> Result<Map2D> {
        Ok(abs_diff(&p[c], &resize(&p[s], p[c].height(), p[c].width())?))
    };

    let mut cons_i = Map2D::zeros(bh, bw);
    let mut cons_c = Map2D::zeros(bh, bw);
    let mut cons_o = Map2D::zeros(bh, bw);
    for &(c, s) in &pairs {
        accumulate(&mut cons_i, &center_surround(&ip, c, s)?)?;
        for p in &opp {
            accumulate(&mut cons_c, &center_surround(p, c, s)?)?;
        }
    }
    let needed: Vec<usize> = {
        let mut v: Vec<usize> = pairs.iter().flat_map(|&(c, s)| [c, s]).collect();
        v.sort_unstable();
        v.dedup();
        v
    };
    for &theta in &cfg.orientations_deg {
        let op: Vec<Map2D> = (0..=deepest)
            .map(|l| {
                if needed.contains(&l) {
                    gabor_energy(&ip[l], theta)
                } else {
                    Map2D::zeros(1, 1)
                }
            })
            .collect();
        let mut cons = Map2D::zeros(bh, bw);
        for &(c, s) in &pairs {
            accumulate(&mut cons, &center_surround(&op, c, s)?)?;
        }
        accumulate(&mut cons_o, &cons)?;
    }

    let parts = [norm(&cons_i), norm(&cons_c), norm(&cons_o)];
    let mean = Map2D::from_fn(bh, bw, |y, x| parts.iter().map(|p| p.get(y, x)).sum::<f32>() / 3.0);
    Ok(minmax_normalize(&resize(&mean, h, w)?))
}
