//! VGG16-style network: layer spec, NNWB weight bundles, forward pass with
//! layer taps, classification head and seeded random weights.

mod bundle;
mod spec;

pub use bundle::{load_weight_bundle, BundleMeta, Fnv1a, NamedTensor, WeightBundle, MAGIC, VERSION};
pub use spec::{Layer, LayerKind, NetworkSpec, Tap, TapSet, DEFAULT_TAP_INDICES};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{conv2d, maxpool2d, relu_in_place, softmax, Tensor};

/// Activations captured at the requested taps, in tap order.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureTaps {
    entries: Vec<(Tap, Tensor)>,
}

impl FeatureTaps {
    pub fn get(&self, label: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(t, _)| t.label == label).map(|(_, v)| v)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Tap, &Tensor)> {
        self.entries.iter().map(|(t, v)| (t, v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

fn param<'a>(bundle: &'a WeightBundle, layer: &str, suffix: &str) -> Result<&'a Tensor> {
    bundle.get(&format!("{layer}.{suffix}")).ok_or_else(|| Error::Layer {
        layer: layer.to_string(),
        reason: format!("missing {suffix} tensor"),
    })
}

fn apply_spatial(spec: &NetworkSpec, bundle: &WeightBundle, kind: &LayerKind, x: Tensor) -> Result<Tensor> {
    Ok(match kind {
        LayerKind::Conv { name, pad, .. } => {
            let w = param(bundle, name, "weight")?;
            let b = param(bundle, name, "bias")?;
            conv2d(&x, w, b.data(), 1, *pad)?
        }
        LayerKind::Relu => {
            let mut x = x;
            relu_in_place(&mut x);
            x
        }
        LayerKind::MaxPool { k, stride } => maxpool2d(&x, *k, *stride, spec.ceil_mode())?,
        _ => unreachable!("non-spatial layer in feature stack"),
    })
}

/// Runs the feature layers once, capturing each tap's output. The
/// classifier head is never evaluated.
pub fn forward_taps(spec: &NetworkSpec, bundle: &WeightBundle, image: &Tensor, taps: &TapSet) -> Result<FeatureTaps> {
    let (c, h, w) = image.chw()?;
    if c != 3 {
        return Err(Error::Shape {
            op: "forward_taps",
            left: image.dims().to_vec(),
            right: vec![3, h, w],
        });
    }
    let deepest = taps.deepest();
    if deepest > spec.feature_len() {
        return Err(Error::invalid(format!(
            "tap index {deepest} is beyond the {} feature layers",
            spec.feature_len()
        )));
    }
    if spec.spatial_extents(h, w, deepest).is_none() {
        return Err(Error::TooSmall {
            found: h.min(w),
            min: spec.min_input_side(deepest),
        });
    }
    let mut captured: Vec<Option<Tensor>> = vec![None; taps.len()];
    let mut x = image.clone();
    for (i, layer) in spec.layers().iter().take(deepest).enumerate() {
        x = apply_spatial(spec, bundle, &layer.kind, x)?;
        for (slot, tap) in captured.iter_mut().zip(taps.taps()) {
            if tap.index == i + 1 {
                *slot = Some(x.clone());
            }
        }
    }
    Ok(FeatureTaps {
        entries: taps
            .taps()
            .iter()
            .cloned()
            .zip(captured.into_iter().map(|t| t.expect("every tap index was visited")))
            .collect(),
    })
}

/// Full forward pass through the classifier head; returns class probabilities.
pub fn classify(spec: &NetworkSpec, bundle: &WeightBundle, image: &Tensor) -> Result<Vec<f32>> {
    let side = bundle.meta().input_side;
    if image.dims() != [3, side, side] {
        return Err(Error::Shape {
            op: "classify",
            left: image.dims().to_vec(),
            right: vec![3, side, side],
        });
    }
    if !spec.has_classifier() {
        return Err(Error::invalid("network spec has no classifier head"));
    }
    let mut x = image.clone();
    for layer in spec.layers() {
        x = match &layer.kind {
            LayerKind::Flatten => {
                let n = x.len();
                x.reshape(vec![n])?
            }
            LayerKind::Linear { name, in_dim, out_dim } => {
                let w = param(bundle, name, "weight")?;
                let b = param(bundle, name, "bias")?;
                if x.len() != *in_dim {
                    return Err(Error::Shape {
                        op: "linear",
                        left: x.dims().to_vec(),
                        right: w.dims().to_vec(),
                    });
                }
                linear(w, b.data(), x.data(), *out_dim, *in_dim)?
            }
            LayerKind::Softmax => Tensor::new(vec![x.len()], softmax(x.data())?)?,
            LayerKind::Relu => {
                let mut x = x;
                relu_in_place(&mut x);
                x
            }
            kind => apply_spatial(spec, bundle, kind, x)?,
        };
    }
    Ok(x.into_data())
}

fn linear(w: &Tensor, bias: &[f32], x: &[f32], out_dim: usize, in_dim: usize) -> Result<Tensor> {
    let mut y = bias.to_vec();
    // SAFETY: w is out_dim×in_dim, x is in_dim×1 and y is out_dim×1.
    unsafe {
        matrixmultiply::sgemm(
            out_dim,
            in_dim,
            1,
            1.0,
            w.data().as_ptr(),
            in_dim as isize,
            1,
            x.as_ptr(),
            1,
            1,
            1.0,
            y.as_mut_ptr(),
            1,
            1,
        );
    }
    Tensor::new(vec![out_dim], y)
}

/// Random VGG16 weights with the full classifier head.
pub fn random_bundle(seed: u64) -> WeightBundle {
    random_bundle_for(&NetworkSpec::vgg16(), seed)
}

/// Random weights for every layer of `spec`.
///
/// Kernels are uniform in [-a, a] with a = sqrt(6 / fan_in); biases are 0.
/// Each tensor draws from its own stream keyed by (seed, tensor name), so a
/// layer's weights do not depend on which other layers the spec contains.
pub fn random_bundle_for(spec: &NetworkSpec, seed: u64) -> WeightBundle {
    let tensors: Vec<NamedTensor> = spec
        .parameter_shapes()
        .into_par_iter()
        .flat_map_iter(|(layer, wdims, blen)| {
            let fan_in: usize = wdims[1..].iter().product();
            let bound = (6.0 / fan_in as f64).sqrt() as f32;
            let name = format!("{layer}.weight");
            let stream = seed ^ Fnv1a::hash(name.as_bytes()).rotate_left(17);
            let mut rng = ChaCha8Rng::seed_from_u64(stream);
            let n: usize = wdims.iter().product();
            let data: Vec<f32> = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
            [
                NamedTensor {
                    name,
                    tensor: Tensor::new(wdims, data).expect("spec shapes are valid"),
                },
                NamedTensor {
                    name: format!("{layer}.bias"),
                    tensor: Tensor::zeros(&[blen]),
                },
            ]
        })
        .collect();
    let labels = bundle::default_labels(&tensors);
    WeightBundle::from_parts(
        tensors,
        BundleMeta::imagenet(format!("random uniform fan-in init, seed {seed}")),
        labels,
    )
    .expect("in-memory encoding cannot fail")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::RgbImage;
    use std::sync::OnceLock;

    fn features_bundle() -> &'static WeightBundle {
        static B: OnceLock<WeightBundle> = OnceLock::new();
        B.get_or_init(|| random_bundle_for(&NetworkSpec::vgg16_features(), 7))
    }

    fn noise_image(side: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..3 * side * side).map(|_| rng.gen_range(-2.0..2.0)).collect();
        Tensor::new(vec![3, side, side], data).unwrap()
    }

    #[test]
    fn patch_reaches_every_default_tap() {
        let spec = NetworkSpec::vgg16_features();
        let taps = forward_taps(&spec, features_bundle(), &noise_image(28, 1), &TapSet::default()).unwrap();
        let shapes: Vec<Vec<usize>> = taps.iter().map(|(_, t)| t.dims().to_vec()).collect();
        assert_eq!(
            shapes,
            vec![
                vec![64, 14, 14],
                vec![128, 7, 7],
                vec![256, 4, 4],
                vec![512, 4, 4],
                vec![512, 2, 2],
                vec![512, 2, 2],
                vec![512, 1, 1],
            ]
        );
        assert!(taps.iter().all(|(_, t)| t.is_finite()));
    }

    #[test]
    fn imagenet_size_deepest_tap() {
        let spec = NetworkSpec::vgg16_features();
        let taps = TapSet::single(31).unwrap();
        let out = forward_taps(&spec, features_bundle(), &noise_image(224, 2), &taps).unwrap();
        assert_eq!(out.get("T1").unwrap().dims(), &[512, 7, 7]);
    }

    #[test]
    fn forward_is_deterministic() {
        let spec = NetworkSpec::vgg16_features();
        let img = noise_image(40, 3);
        let a = forward_taps(&spec, features_bundle(), &img, &TapSet::default()).unwrap();
        let b = forward_taps(&spec, features_bundle(), &img, &TapSet::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn floor_mode_rejects_small_inputs() {
        let spec = NetworkSpec::vgg16_features().with_ceil_mode(false);
        let err = forward_taps(&spec, features_bundle(), &noise_image(28, 4), &TapSet::default()).unwrap_err();
        assert!(matches!(err, Error::TooSmall { found: 28, min: 32 }), "{err}");
    }

    #[test]
    fn random_bundle_seeding() {
        let spec = NetworkSpec::vgg16_features();
        let a = random_bundle_for(&spec, 7);
        assert_eq!(a.checksum(), features_bundle().checksum());
        let b = random_bundle_for(&spec, 8);
        assert_ne!(a.checksum(), b.checksum());
        a.validate(&spec).unwrap();
        let w = a.get("conv1_1.weight").unwrap();
        let bound = (6.0f32 / 27.0).sqrt();
        assert!(w.data().iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn random_activations_stay_finite() {
        let spec = NetworkSpec::vgg16_features();
        let img = BundleMeta::imagenet("").preprocess(&RgbImage::filled(64, 64, [0.9, 0.1, 0.3]));
        let taps = forward_taps(&spec, features_bundle(), &img, &TapSet::default()).unwrap();
        for (_, t) in taps.iter() {
            assert!(t.is_finite());
            assert!(t.data().iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn missing_bias_names_layer() {
        let b = features_bundle();
        let tensors: Vec<NamedTensor> = b
            .tensors()
            .iter()
            .filter(|t| t.name != "conv3_2.bias")
            .cloned()
            .collect();
        let broken = WeightBundle::from_parts(tensors, b.meta().clone(), vec![]).unwrap();
        let err = broken.validate(&NetworkSpec::vgg16_features()).unwrap_err();
        assert!(err.to_string().contains("conv3_2"), "{err}");

        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("broken.nnwb");
        broken.write(&p).unwrap();
        let err = load_weight_bundle(&p).unwrap_err();
        assert!(err.to_string().contains("conv3_2"), "{err}");
    }

    #[test]
    fn features_bundle_round_trips_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.nnwb");
        features_bundle().write(&p).unwrap();
        let back = load_weight_bundle(&p).unwrap();
        assert_eq!(&back, features_bundle());
        assert_eq!(back.get("conv1_1.weight").unwrap().dims(), &[64, 3, 3, 3]);
    }

    #[test]
    fn classify_rejects_wrong_extent() {
        let spec = NetworkSpec::vgg16();
        let err = classify(&spec, features_bundle(), &noise_image(28, 5)).unwrap_err();
        assert!(matches!(err, Error::Shape { op: "classify", .. }));
    }
}
