//! Per-time-step feature matrix: raw inputs, multi-scale 1D convolution
//! features of the load sequence, and row-aligned 2D convolution features of
//! its angular field image, concatenated along the channel axis.

use spt_autograd::{Graph, Rng, Var};

use crate::error::{Result, SptError};
use crate::gaf::{gaf_transform, GafImage, GafMode};
use crate::material::{CurvePair, NormStats};
use crate::params::{Bound, ParamId, ParamStore};

pub const KERNEL_SIZES: [usize; 3] = [3, 5, 7];
pub const BRANCH_CHANNELS: usize = 8;
pub const RAW_CHANNELS: usize = 2;
pub const F1D_CHANNELS: usize = KERNEL_SIZES.len() * BRANCH_CHANNELS;
pub const F2D_CHANNELS: usize = 8;
const GAF_KERNEL: usize = 3;
const THICKNESS_SCALE: f64 = 4.0;

/// Constant model inputs of one sample, derived once from its curves.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedSample {
    pub id: usize,
    /// Load scaled by the training min/max.
    pub load: Vec<f64>,
    /// `t / 4`, fed as a constant channel.
    pub thickness: f64,
    /// Row-major angular field of the raw load, when enabled.
    pub gaf: Option<Vec<f64>>,
    /// Stress scaled by the training min/max.
    pub target: Vec<f64>,
}

impl PreparedSample {
    pub fn new(pair: &CurvePair, norm: &NormStats, with_gaf: bool) -> Result<Self> {
        let gaf = if with_gaf {
            Some(gaf_transform(&pair.load, GafMode::Lenient)?.values().to_vec())
        } else {
            None
        };
        Ok(Self {
            id: pair.id,
            load: pair.load.iter().map(|&v| norm.normalize_load(v)).collect(),
            thickness: pair.spec.t / THICKNESS_SCALE,
            gaf,
            target: pair.stress.iter().map(|&v| norm.normalize_stress(v)).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.load.len()
    }

    pub fn is_empty(&self) -> bool {
        self.load.is_empty()
    }
}

#[derive(Debug, Clone)]
struct Branch {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone)]
pub struct FeatureExtractor {
    branches: Vec<Branch>,
    gaf_layers: Option<[Branch; 2]>,
}

impl FeatureExtractor {
    /// Registers conv parameters; the 2D stack only when `gaf_enabled`.
    pub fn new(store: &mut ParamStore, rng: &mut Rng, gaf_enabled: bool) -> Result<Self> {
        let mut branches = Vec::new();
        for k in KERNEL_SIZES {
            branches.push(Branch {
                w: store.add_uniform(format!("conv1d_k{k}.weight"), &[k, 1, BRANCH_CHANNELS], k, rng)?,
                b: store.add_zeros(format!("conv1d_k{k}.bias"), &[BRANCH_CHANNELS])?,
            });
        }
        let gaf_layers = if gaf_enabled {
            let k = GAF_KERNEL;
            Some([
                Branch {
                    w: store.add_uniform("conv2d_1.weight", &[k, k, 1, F2D_CHANNELS], k * k, rng)?,
                    b: store.add_zeros("conv2d_1.bias", &[F2D_CHANNELS])?,
                },
                Branch {
                    w: store.add_uniform(
                        "conv2d_2.weight",
                        &[k, k, F2D_CHANNELS, F2D_CHANNELS],
                        k * k * F2D_CHANNELS,
                        rng,
                    )?,
                    b: store.add_zeros("conv2d_2.bias", &[F2D_CHANNELS])?,
                },
            ])
        } else {
            None
        };
        Ok(Self { branches, gaf_layers })
    }

    pub fn gaf_enabled(&self) -> bool {
        self.gaf_layers.is_some()
    }

    /// 34 with the image branch, 26 without.
    pub fn channels(&self) -> usize {
        RAW_CHANNELS + F1D_CHANNELS + if self.gaf_enabled() { F2D_CHANNELS } else { 0 }
    }

    /// `load: [N, L, 1]` to `[N, L, 24]`: kernels 3, 5, 7 side by side.
    pub fn extract_1d(&self, g: &mut Graph, p: &Bound, load: Var) -> Result<Var> {
        let mut outs = Vec::with_capacity(self.branches.len());
        for br in &self.branches {
            let y = g.conv1d(load, p.get(br.w))?;
            let y = g.add_bias(y, p.get(br.b))?;
            outs.push(g.tanh(y));
        }
        Ok(g.concat(&outs, 2)?)
    }

    /// `image: [N, L, L, 1]` to `[N, L, 8]`: two tanh conv layers, then the
    /// mean over columns so row `i` stays attached to time step `i`.
    pub fn extract_2d(&self, g: &mut Graph, p: &Bound, image: Var) -> Result<Var> {
        let layers = self
            .gaf_layers
            .as_ref()
            .ok_or_else(|| SptError::InvalidArgument("image features are disabled".into()))?;
        let shape = g.shape(image).to_vec();
        if shape.len() != 4 || shape[1] != shape[2] {
            return Err(SptError::InvalidArgument(format!(
                "expected a batch of square images, got shape {shape:?}"
            )));
        }
        let mut x = image;
        for layer in layers {
            let y = g.conv2d(x, p.get(layer.w))?;
            let y = g.add_bias(y, p.get(layer.b))?;
            x = g.tanh(y);
        }
        Ok(g.mean_axis(x, 2)?)
    }

    /// `[N, L, C]` with channels `[load, thickness, F1D.., F2D..]`.
    pub fn feature_matrix(&self, g: &mut Graph, p: &Bound, raw: Var, load: Var, image: Option<Var>) -> Result<Var> {
        let f1d = self.extract_1d(g, p, load)?;
        let mut parts = vec![raw, f1d];
        if self.gaf_enabled() {
            let image = image.ok_or_else(|| SptError::InvalidArgument("missing angular field image".into()))?;
            parts.push(self.extract_2d(g, p, image)?);
        }
        Ok(g.concat(&parts, 2)?)
    }
}

/// Constant graph inputs for a group of samples.
pub(crate) struct InputVars {
    pub raw: Var,
    pub load: Var,
    pub image: Option<Var>,
}

pub(crate) fn input_vars(g: &mut Graph, samples: &[&PreparedSample], with_gaf: bool) -> Result<InputVars> {
    let n = samples.len();
    let len = samples[0].len();
    if let Some(bad) = samples.iter().find(|s| s.len() != len) {
        return Err(SptError::LengthMismatch {
            expected: len,
            actual: bad.len(),
        });
    }
    let mut raw = Vec::with_capacity(n * len * RAW_CHANNELS);
    let mut load = Vec::with_capacity(n * len);
    for s in samples {
        for &v in &s.load {
            raw.extend([v, s.thickness]);
            load.push(v);
        }
    }
    let image = if with_gaf {
        let mut px = Vec::with_capacity(n * len * len);
        for s in samples {
            let img = s
                .gaf
                .as_ref()
                .ok_or_else(|| SptError::InvalidArgument(format!("sample {} has no angular field", s.id)))?;
            if img.len() != len * len {
                return Err(SptError::LengthMismatch {
                    expected: len * len,
                    actual: img.len(),
                });
            }
            px.extend_from_slice(img);
        }
        Some(g.constant(&[n, len, len, 1], px)?)
    } else {
        None
    };
    Ok(InputVars {
        raw: g.constant(&[n, len, RAW_CHANNELS], raw)?,
        load: g.constant(&[n, len, 1], load)?,
        image,
    })
}

/// Evaluated feature matrix of one sample, `len x channels` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub len: usize,
    pub channels: usize,
    pub m: Vec<f64>,
}

impl FeatureMatrix {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.m[i * self.channels..(i + 1) * self.channels]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.len).map(|i| self.m[i * self.channels + c]).collect()
    }
}

/// Runs the extractor on one curve with the given parameters.
pub fn build_feature_matrix(
    extractor: &FeatureExtractor,
    params: &ParamStore,
    pair: &CurvePair,
    image: &GafImage,
    norm: &NormStats,
) -> Result<FeatureMatrix> {
    if image.size() != pair.load.len() {
        return Err(SptError::LengthMismatch {
            expected: pair.load.len(),
            actual: image.size(),
        });
    }
    let mut sample = PreparedSample::new(pair, norm, false)?;
    sample.gaf = extractor.gaf_enabled().then(|| image.values().to_vec());
    let mut g = Graph::new();
    let p = params.bind(&mut g, false);
    let inputs = input_vars(&mut g, &[&sample], extractor.gaf_enabled())?;
    let m = extractor.feature_matrix(&mut g, &p, inputs.raw, inputs.load, inputs.image)?;
    Ok(FeatureMatrix {
        len: sample.len(),
        channels: extractor.channels(),
        m: g.value(m).to_vec(),
    })
}
