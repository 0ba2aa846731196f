//! Mock backbone with known ground-truth factors.
//!
//! A frame is described by a factor vector `f = [attrs | identity_emb | nuisance]`
//! of length N. Layer `i` of the backbone emits the style code
//! `leaky(Aᵢ f + bᵢ)` with a well-conditioned mixing matrix `Aᵢ` and a leaky
//! nonlinearity of slope 0.5 on negatives. Every layer is exactly invertible,
//! so the factors of any stack can be recovered for evaluation.

mod io;

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{StyleCode, StyleStack};
use crate::numerics::DenseMatrix;
use crate::prior::{label_to_mean, AttributeKind, LabelStats};

pub use io::{
    parse_dataset, parse_ground_truth, read_dataset, read_ground_truth, write_dataset,
    write_ground_truth, DatasetHeader, GroundTruthFile, DATASET_FORMAT, GROUND_TRUTH_FORMAT,
};

/// Slope of the backbone nonlinearity on negative inputs.
pub const BACKBONE_SLOPE: f64 = 0.5;
const SINGULAR_MIN: f64 = 0.1;
const SINGULAR_MAX: f64 = 10.0;
const BIAS_STD: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub num_identities: usize,
    pub frames_per_identity: usize,
    /// M
    pub attributes: usize,
    /// N
    pub latent_dim: usize,
    /// k
    pub layers: usize,
    /// D_id
    pub identity_dim: usize,
    /// Standard deviation of Gaussian label noise (clipped at 3σ).
    pub label_noise: f64,
    /// One entry per attribute.
    pub attribute_kinds: Vec<AttributeKind>,
    /// Seed of the backbone; datasets that share it share the generator.
    pub backbone_seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            num_identities: 100,
            frames_per_identity: 20,
            attributes: 4,
            latent_dim: 32,
            layers: 4,
            identity_dim: 16,
            label_noise: 0.0,
            attribute_kinds: vec![AttributeKind::Binary; 4],
            backbone_seed: 0,
        }
    }
}

impl SyntheticConfig {
    /// Full-size generator shape: 512-dim codes, 18 layers, 8 attributes.
    pub fn full_scale() -> Self {
        Self {
            attributes: 8,
            latent_dim: 512,
            layers: 18,
            identity_dim: 256,
            attribute_kinds: vec![AttributeKind::Binary; 8],
            ..Self::default()
        }
    }

    pub fn layout(&self) -> FactorLayout {
        FactorLayout {
            attributes: self.attributes,
            identity_dim: self.identity_dim,
            dim: self.latent_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.layers == 0 || self.latent_dim == 0 {
            return bad("latent_dim and layers must be positive".into());
        }
        if self.attributes == 0 || self.attributes + self.identity_dim > self.latent_dim {
            return bad(format!(
                "need 0 < attributes ({}) and attributes + identity_dim ({}) <= latent_dim ({})",
                self.attributes, self.identity_dim, self.latent_dim
            ));
        }
        if self.attributes >= self.latent_dim {
            return bad("attributes must be smaller than latent_dim".into());
        }
        if self.attribute_kinds.len() != self.attributes {
            return bad(format!(
                "{} attribute kinds for {} attributes",
                self.attribute_kinds.len(),
                self.attributes
            ));
        }
        if self.num_identities == 0 || self.frames_per_identity == 0 {
            return bad("need at least one identity and one frame".into());
        }
        if !(self.label_noise >= 0.0 && self.label_noise.is_finite()) {
            return bad("label_noise must be >= 0".into());
        }
        Ok(())
    }
}

/// Where each block of the factor vector lives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FactorLayout {
    pub attributes: usize,
    pub identity_dim: usize,
    pub dim: usize,
}

impl FactorLayout {
    pub fn nuisance_dim(&self) -> usize {
        self.dim - self.attributes - self.identity_dim
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthFactors {
    pub attrs: Vec<f64>,
    pub identity_emb: Vec<f64>,
    pub nuisance: Vec<f64>,
}

impl GroundTruthFactors {
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v =
            Vec::with_capacity(self.attrs.len() + self.identity_emb.len() + self.nuisance.len());
        v.extend_from_slice(&self.attrs);
        v.extend_from_slice(&self.identity_emb);
        v.extend_from_slice(&self.nuisance);
        v
    }

    pub fn from_slice(f: &[f64], layout: &FactorLayout) -> Result<Self> {
        if f.len() != layout.dim {
            return Err(Error::dim("factor vector", layout.dim, f.len()));
        }
        let a = layout.attributes;
        let d = a + layout.identity_dim;
        Ok(Self {
            attrs: f[..a].to_vec(),
            identity_emb: f[a..d].to_vec(),
            nuisance: f[d..].to_vec(),
        })
    }
}

/// Fixed invertible generator from factors to per-layer style codes.
#[derive(Debug, Clone, PartialEq)]
pub struct MockBackbone {
    layout: FactorLayout,
    mixing: Vec<DenseMatrix>,
    inverse: Vec<DenseMatrix>,
    bias: Vec<Vec<f64>>,
    slope: f64,
    seed: u64,
}

fn leaky(x: f64, slope: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        slope * x
    }
}

fn leaky_inverse(y: f64, slope: f64) -> f64 {
    if y > 0.0 {
        y
    } else {
        y / slope
    }
}

/// Random Gaussian matrix with singular values clipped to `[0.1, 10]`.
/// Returns the matrix and its exact inverse from the same decomposition.
fn conditioned_matrix<R: Rng + ?Sized>(n: usize, rng: &mut R) -> (DenseMatrix, DenseMatrix) {
    let scale = 1.0 / (n as f64).sqrt();
    let g = nalgebra::DMatrix::from_fn(n, n, |_, _| {
        let z: f64 = StandardNormal.sample(&mut *rng);
        scale * z
    });
    let svd = g.svd(true, true);
    let u = svd.u.expect("requested U");
    let v_t = svd.v_t.expect("requested Vᵀ");
    let sv = svd
        .singular_values
        .map(|s| s.clamp(SINGULAR_MIN, SINGULAR_MAX));
    let a = &u * nalgebra::DMatrix::from_diagonal(&sv) * &v_t;
    let inv =
        v_t.transpose() * nalgebra::DMatrix::from_diagonal(&sv.map(|s| 1.0 / s)) * u.transpose();
    let to_dense = |m: &nalgebra::DMatrix<f64>| DenseMatrix::from_fn(n, n, |r, c| m[(r, c)]);
    (to_dense(&a), to_dense(&inv))
}

/// Builds the backbone for `cfg`'s dimensions, deterministically from `seed`.
pub fn make_backbone(cfg: &SyntheticConfig, seed: u64) -> Result<MockBackbone> {
    if cfg.latent_dim == 0 || cfg.layers == 0 {
        return Err(Error::InvalidConfig("backbone needs N, k >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = cfg.latent_dim;
    let mut mixing = Vec::with_capacity(cfg.layers);
    let mut inverse = Vec::with_capacity(cfg.layers);
    let mut bias = Vec::with_capacity(cfg.layers);
    for _ in 0..cfg.layers {
        let (a, inv) = conditioned_matrix(n, &mut rng);
        mixing.push(a);
        inverse.push(inv);
        bias.push(
            (0..n)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    BIAS_STD * z
                })
                .collect(),
        );
    }
    Ok(MockBackbone {
        layout: cfg.layout(),
        mixing,
        inverse,
        bias,
        slope: BACKBONE_SLOPE,
        seed,
    })
}

/// Result of inverting every layer of a stack.
#[derive(Debug, Clone, PartialEq)]
pub struct Inversion {
    /// Recovered factor vector per layer.
    pub per_layer: Vec<Vec<f64>>,
    /// Mean over layers, split into blocks.
    pub factors: GroundTruthFactors,
    /// Largest absolute difference between any layer's recovery and the mean.
    pub disagreement: f64,
}

impl MockBackbone {
    /// `A = I`, `b = 0` at every layer; codes equal `leaky(f)`.
    pub fn identity(layout: FactorLayout, layers: usize) -> Self {
        let n = layout.dim;
        Self {
            layout,
            mixing: vec![DenseMatrix::identity(n); layers],
            inverse: vec![DenseMatrix::identity(n); layers],
            bias: vec![vec![0.0; n]; layers],
            slope: BACKBONE_SLOPE,
            seed: 0,
        }
    }

    pub fn layout(&self) -> &FactorLayout {
        &self.layout
    }

    pub fn layers(&self) -> usize {
        self.mixing.len()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn mixing(&self, layer: usize) -> &DenseMatrix {
        &self.mixing[layer]
    }

    /// Per-layer codes `leaky(Aᵢ f + bᵢ)`.
    pub fn generate(&self, factors: &[f64]) -> Result<Vec<StyleCode>> {
        if factors.len() != self.layout.dim {
            return Err(Error::dim("factor vector", self.layout.dim, factors.len()));
        }
        self.mixing
            .iter()
            .zip(&self.bias)
            .enumerate()
            .map(|(i, (a, b))| {
                let mut w = a.mul_vec(factors)?;
                for (v, bi) in w.iter_mut().zip(b) {
                    *v = leaky(*v + bi, self.slope);
                }
                Ok(StyleCode { w, layer_index: i })
            })
            .collect()
    }

    /// Inverts each layer independently; total on any finite stack of the right shape.
    pub fn invert(&self, stack: &StyleStack) -> Result<Inversion> {
        if stack.codes.len() != self.layers() {
            return Err(Error::dim(
                "codes per stack",
                self.layers(),
                stack.codes.len(),
            ));
        }
        let n = self.layout.dim;
        let mut per_layer = Vec::with_capacity(self.layers());
        for (i, code) in stack.codes.iter().enumerate() {
            if code.w.len() != n {
                return Err(Error::dim("style code", n, code.w.len()));
            }
            let pre: Vec<f64> = code
                .w
                .iter()
                .zip(&self.bias[i])
                .map(|(y, b)| leaky_inverse(*y, self.slope) - b)
                .collect();
            per_layer.push(self.inverse[i].mul_vec(&pre)?);
        }
        let mut mean = vec![0.0; n];
        for f in &per_layer {
            for (m, v) in mean.iter_mut().zip(f) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= per_layer.len() as f64);
        let disagreement = per_layer
            .iter()
            .flat_map(|f| f.iter().zip(&mean).map(|(a, b)| (a - b).abs()))
            .fold(0.0, f64::max);
        Ok(Inversion {
            factors: GroundTruthFactors::from_slice(&mean, &self.layout)?,
            per_layer,
            disagreement,
        })
    }
}

/// Codes of one frame from its factors.
pub fn backbone_generate(b: &MockBackbone, factors: &GroundTruthFactors) -> Result<Vec<StyleCode>> {
    b.generate(&factors.to_vec())
}

/// Factors recovered from a stack, with the cross-layer consistency check.
pub fn backbone_invert(b: &MockBackbone, stack: &StyleStack) -> Result<Inversion> {
    b.invert(stack)
}

/// Stacks as read from a dataset file: everything training is allowed to see.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub stacks: Vec<StyleStack>,
}

impl Dataset {
    pub fn config(&self) -> &SyntheticConfig {
        &self.header.config
    }

    /// Stack indices per identity, in ascending identity order.
    pub fn identity_groups(&self) -> BTreeMap<u64, Vec<usize>> {
        let mut groups: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
        for (i, st) in self.stacks.iter().enumerate() {
            groups.entry(st.identity_id).or_default().push(i);
        }
        groups
    }

    /// SHA-256 of the serialized header line.
    pub fn fingerprint(&self) -> String {
        self.header.fingerprint()
    }
}

/// A generated dataset together with its oracle-only ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub dataset: Dataset,
    /// Parallel to `dataset.stacks`.
    pub factors: Vec<GroundTruthFactors>,
}

/// Draws identities and frames, renders them through the backbone seeded by
/// `cfg.backbone_seed`, and attaches (optionally noisy) labels.
pub fn generate_dataset(cfg: &SyntheticConfig, seed: u64) -> Result<SyntheticDataset> {
    cfg.validate()?;
    let backbone = make_backbone(cfg, cfg.backbone_seed)?;
    generate_with_backbone(cfg, &backbone, seed)
}

/// [`generate_dataset`] with continuous labels standardized by `label_stats`
/// (typically a training set's header) instead of this sample's own statistics.
pub fn generate_dataset_with_stats(
    cfg: &SyntheticConfig,
    seed: u64,
    label_stats: &[Option<LabelStats>],
) -> Result<SyntheticDataset> {
    cfg.validate()?;
    let consistent = label_stats.len() == cfg.attributes
        && label_stats
            .iter()
            .zip(&cfg.attribute_kinds)
            .all(|(s, k)| s.is_some() == (*k == AttributeKind::Continuous));
    if !consistent {
        return Err(Error::InvalidConfig(
            "label statistics do not match the attribute kinds".into(),
        ));
    }
    let backbone = make_backbone(cfg, cfg.backbone_seed)?;
    generate_inner(cfg, &backbone, seed, Some(label_stats))
}

/// [`generate_dataset`] with an explicit backbone.
pub fn generate_with_backbone(
    cfg: &SyntheticConfig,
    backbone: &MockBackbone,
    seed: u64,
) -> Result<SyntheticDataset> {
    generate_inner(cfg, backbone, seed, None)
}

fn generate_inner(
    cfg: &SyntheticConfig,
    backbone: &MockBackbone,
    seed: u64,
    fixed_stats: Option<&[Option<LabelStats>]>,
) -> Result<SyntheticDataset> {
    cfg.validate()?;
    if backbone.layout() != &cfg.layout() || backbone.layers() != cfg.layers {
        return Err(Error::InvalidConfig(
            "backbone does not match the dataset config".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layout = cfg.layout();
    let normal = move |rng: &mut ChaCha8Rng| -> f64 { StandardNormal.sample(rng) };

    let mut factors = Vec::with_capacity(cfg.num_identities * cfg.frames_per_identity);
    let mut ids = Vec::with_capacity(factors.capacity());
    for id in 0..cfg.num_identities {
        let identity_emb: Vec<f64> = (0..layout.identity_dim).map(|_| normal(&mut rng)).collect();
        for frame in 0..cfg.frames_per_identity {
            let attrs = cfg
                .attribute_kinds
                .iter()
                .map(|kind| match kind {
                    AttributeKind::Binary => {
                        if rng.random_bool(0.5) {
                            1.0
                        } else {
                            -1.0
                        }
                    }
                    AttributeKind::Continuous => normal(&mut rng),
                })
                .collect();
            let nuisance = (0..layout.nuisance_dim())
                .map(|_| normal(&mut rng))
                .collect();
            factors.push(GroundTruthFactors {
                attrs,
                identity_emb: identity_emb.clone(),
                nuisance,
            });
            ids.push((id as u64, frame as u64));
        }
    }

    let label_stats: Vec<Option<LabelStats>> = match fixed_stats {
        Some(stats) => stats.to_vec(),
        None => cfg
            .attribute_kinds
            .iter()
            .enumerate()
            .map(|(j, kind)| match kind {
                AttributeKind::Binary => None,
                AttributeKind::Continuous => {
                    let values: Vec<f64> = factors.iter().map(|f| f.attrs[j]).collect();
                    Some(LabelStats::from_values(&values))
                }
            })
            .collect(),
    };

    let mut stacks = Vec::with_capacity(factors.len());
    for (f, &(identity_id, frame_id)) in factors.iter().zip(&ids) {
        let mut labels = Vec::with_capacity(cfg.attributes);
        for (j, kind) in cfg.attribute_kinds.iter().enumerate() {
            let mut y = label_to_mean(f.attrs[j], *kind, label_stats[j].as_ref())?;
            if cfg.label_noise > 0.0 {
                let bound = 3.0 * cfg.label_noise;
                y += (cfg.label_noise * normal(&mut rng)).clamp(-bound, bound);
            }
            labels.push(y);
        }
        stacks.push(StyleStack {
            codes: backbone_generate(backbone, f)?,
            labels,
            identity_id,
            frame_id,
        });
    }

    Ok(SyntheticDataset {
        dataset: Dataset {
            header: DatasetHeader::new(cfg.clone(), seed, label_stats),
            stacks,
        },
        factors,
    })
}
