use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::pool_extent;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Conv {
        name: String,
        in_ch: usize,
        out_ch: usize,
        k: usize,
        pad: usize,
    },
    Relu,
    MaxPool {
        k: usize,
        stride: usize,
    },
    Flatten,
    Linear {
        name: String,
        in_dim: usize,
        out_dim: usize,
    },
    Softmax,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Layer {
    pub kind: LayerKind,
    /// Stage name, e.g. `conv3_2`, `relu3_2`, `pool3`, `fc6`.
    pub stage: String,
}

/// Sequential network description. Layers are addressed by 1-based index.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NetworkSpec {
    layers: Vec<Layer>,
    ceil_mode: bool,
}

const VGG16_BLOCKS: [&[usize]; 5] = [&[64, 64], &[128, 128], &[256, 256, 256], &[512; 3], &[512; 3]];

impl NetworkSpec {
    /// VGG16 with its classifier head: feature indices 1..=31, then
    /// flatten, fc6, relu, fc7, relu, fc8, softmax.
    pub fn vgg16() -> Self {
        let mut spec = Self::vgg16_features();
        let mut push = |kind: LayerKind, stage: &str| {
            spec.layers.push(Layer {
                kind,
                stage: stage.to_string(),
            })
        };
        push(LayerKind::Flatten, "flatten");
        for (name, in_dim, out_dim) in [("fc6", 512 * 7 * 7, 4096), ("fc7", 4096, 4096), ("fc8", 4096, 1000)] {
            push(
                LayerKind::Linear {
                    name: name.into(),
                    in_dim,
                    out_dim,
                },
                name,
            );
            if name != "fc8" {
                push(LayerKind::Relu, &name.replace("fc", "relu"));
            }
        }
        push(LayerKind::Softmax, "softmax");
        spec
    }

    /// The 31 convolutional-stage layers of VGG16 only.
    pub fn vgg16_features() -> Self {
        let mut layers = Vec::new();
        let mut in_ch = 3;
        for (b, widths) in VGG16_BLOCKS.iter().enumerate() {
            for (i, &out_ch) in widths.iter().enumerate() {
                let name = format!("conv{}_{}", b + 1, i + 1);
                layers.push(Layer {
                    kind: LayerKind::Conv {
                        name: name.clone(),
                        in_ch,
                        out_ch,
                        k: 3,
                        pad: 1,
                    },
                    stage: name,
                });
                layers.push(Layer {
                    kind: LayerKind::Relu,
                    stage: format!("relu{}_{}", b + 1, i + 1),
                });
                in_ch = out_ch;
            }
            layers.push(Layer {
                kind: LayerKind::MaxPool { k: 2, stride: 2 },
                stage: format!("pool{}", b + 1),
            });
        }
        Self {
            layers,
            ceil_mode: true,
        }
    }

    pub fn with_ceil_mode(mut self, ceil_mode: bool) -> Self {
        self.ceil_mode = ceil_mode;
        self
    }

    pub fn ceil_mode(&self) -> bool {
        self.ceil_mode
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// Layer at a 1-based index.
    pub fn layer(&self, index: usize) -> Option<&Layer> {
        index.checked_sub(1).and_then(|i| self.layers.get(i))
    }

    /// Number of leading layers that operate on spatial feature maps.
    pub fn feature_len(&self) -> usize {
        self.layers
            .iter()
            .position(|l| matches!(l.kind, LayerKind::Flatten | LayerKind::Linear { .. } | LayerKind::Softmax))
            .unwrap_or(self.layers.len())
    }

    pub fn has_classifier(&self) -> bool {
        self.feature_len() < self.layers.len()
    }

    /// Weight-bearing layers as (name, weight dims, bias len).
    pub fn parameter_shapes(&self) -> Vec<(String, Vec<usize>, usize)> {
        self.layers
            .iter()
            .filter_map(|l| match &l.kind {
                LayerKind::Conv {
                    name,
                    in_ch,
                    out_ch,
                    k,
                    ..
                } => Some((name.clone(), vec![*out_ch, *in_ch, *k, *k], *out_ch)),
                LayerKind::Linear {
                    name,
                    in_dim,
                    out_dim,
                } => Some((name.clone(), vec![*out_dim, *in_dim], *out_dim)),
                _ => None,
            })
            .collect()
    }

    /// Spatial extent (h, w) after each of the first `upto` layers.
    pub fn spatial_extents(&self, h: usize, w: usize, upto: usize) -> Option<Vec<(usize, usize)>> {
        let mut cur = (h, w);
        let mut out = Vec::with_capacity(upto);
        for layer in self.layers.iter().take(upto) {
            if let LayerKind::MaxPool { k, stride } = layer.kind {
                cur = (
                    pool_extent(cur.0, k, stride, self.ceil_mode)?,
                    pool_extent(cur.1, k, stride, self.ceil_mode)?,
                );
            }
            out.push(cur);
        }
        Some(out)
    }

    /// Smallest square input side that reaches layer `upto` with a
    /// non-empty feature map.
    pub fn min_input_side(&self, upto: usize) -> usize {
        (1..=4096)
            .find(|&s| self.spatial_extents(s, s, upto).is_some())
            .unwrap_or(usize::MAX)
    }

    /// `(index, stage name)` for every layer, for audit output.
    pub fn index_table(&self) -> Vec<(usize, String)> {
        self.layers
            .iter()
            .enumerate()
            .map(|(i, l)| (i + 1, l.stage.clone()))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tap {
    pub label: String,
    /// 1-based layer index; the tap captures that layer's output.
    pub index: usize,
}

/// Ordered, non-empty set of layer taps.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TapSet(Vec<Tap>);

/// Default tap indices, labelled T1..T7.
pub const DEFAULT_TAP_INDICES: [usize; 7] = [5, 10, 17, 23, 24, 30, 31];

impl Default for TapSet {
    fn default() -> Self {
        Self::from_indices(&DEFAULT_TAP_INDICES).expect("default taps are valid")
    }
}

impl TapSet {
    /// Labels taps T1..Tn in the given order.
    pub fn from_indices(indices: &[usize]) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::Empty("tap set"));
        }
        if indices.contains(&0) {
            return Err(Error::invalid("tap indices are 1-based"));
        }
        let mut seen = std::collections::BTreeSet::new();
        if !indices.iter().all(|i| seen.insert(*i)) {
            return Err(Error::invalid(format!("duplicate tap index in {indices:?}")));
        }
        Ok(Self(
            indices
                .iter()
                .enumerate()
                .map(|(i, &index)| Tap {
                    label: format!("T{}", i + 1),
                    index,
                })
                .collect(),
        ))
    }

    pub fn single(index: usize) -> Result<Self> {
        Self::from_indices(&[index])
    }

    pub fn taps(&self) -> &[Tap] {
        &self.0
    }

    pub fn indices(&self) -> Vec<usize> {
        self.0.iter().map(|t| t.index).collect()
    }

    pub fn deepest(&self) -> usize {
        self.0.iter().map(|t| t.index).max().unwrap_or(0)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vgg16_index_layout() {
        let spec = NetworkSpec::vgg16();
        assert_eq!(spec.feature_len(), 31);
        let stage = |i: usize| spec.layer(i).unwrap().stage.clone();
        assert_eq!(stage(1), "conv1_1");
        assert_eq!(stage(5), "pool1");
        assert_eq!(stage(10), "pool2");
        assert_eq!(stage(17), "pool3");
        assert_eq!(stage(23), "relu4_3");
        assert_eq!(stage(24), "pool4");
        assert_eq!(stage(30), "relu5_3");
        assert_eq!(stage(31), "pool5");
        assert_eq!(stage(33), "fc6");
        assert_eq!(spec.layers().len(), 38);
        let convs = spec
            .layers()
            .iter()
            .filter(|l| matches!(l.kind, LayerKind::Conv { .. }))
            .count();
        assert_eq!(convs, 13);
        assert_eq!(spec.parameter_shapes()[0].1, vec![64, 3, 3, 3]);
    }

    #[test]
    fn patch_extents_at_default_taps() {
        let spec = NetworkSpec::vgg16_features();
        let ext = spec.spatial_extents(28, 28, 31).unwrap();
        let at: Vec<usize> = DEFAULT_TAP_INDICES.iter().map(|&i| ext[i - 1].0).collect();
        assert_eq!(at, vec![14, 7, 4, 4, 2, 2, 1]);
        assert_eq!(spec.min_input_side(31), 1);
        let floor = NetworkSpec::vgg16_features().with_ceil_mode(false);
        assert_eq!(floor.min_input_side(31), 32);
        assert!(floor.spatial_extents(28, 28, 31).is_none());
    }

    #[test]
    fn tap_set_validation() {
        assert!(TapSet::from_indices(&[]).is_err());
        assert!(TapSet::from_indices(&[0]).is_err());
        assert!(TapSet::from_indices(&[5, 5]).is_err());
        let t = TapSet::default();
        assert_eq!(t.len(), 7);
        assert_eq!(t.taps()[6].label, "T7");
        assert_eq!(t.deepest(), 31);
    }
}
