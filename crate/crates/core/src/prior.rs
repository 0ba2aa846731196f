//! Factorized conditional prior over the latent space.
//!
//! Attribute coordinate `cᵢ` is `N(yᵢ, σ²)` where `yᵢ` is the (mapped) label;
//! the non-attribute block `s` is standard normal.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorConfig {
    /// Number of labeled attributes (M).
    pub attributes: usize,
    /// Total latent dimension (N).
    pub latent_dim: usize,
    /// Standard deviation of each attribute Gaussian.
    pub sigma: f64,
}

impl PriorConfig {
    pub fn new(attributes: usize, latent_dim: usize, sigma: f64) -> Result<Self> {
        let cfg = Self {
            attributes,
            latent_dim,
            sigma,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.attributes == 0 || self.attributes >= self.latent_dim {
            return Err(Error::InvalidConfig(format!(
                "need 0 < attributes ({}) < latent_dim ({})",
                self.attributes, self.latent_dim
            )));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "sigma must be positive, got {}",
                self.sigma
            )));
        }
        Ok(())
    }

    pub fn non_attribute_dim(&self) -> usize {
        self.latent_dim - self.attributes
    }
}

/// Attribute vector `c` and non-attribute vector `s` of one latent point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentPair {
    pub c: Vec<f64>,
    pub s: Vec<f64>,
}

impl LatentPair {
    /// Splits a full latent vector at `attributes`.
    pub fn split(z: &[f64], attributes: usize) -> Self {
        Self {
            c: z[..attributes].to_vec(),
            s: z[attributes..].to_vec(),
        }
    }

    pub fn concat(&self) -> Vec<f64> {
        let mut z = Vec::with_capacity(self.c.len() + self.s.len());
        z.extend_from_slice(&self.c);
        z.extend_from_slice(&self.s);
        z
    }

    pub fn check(&self, cfg: &PriorConfig) -> Result<()> {
        if self.c.len() != cfg.attributes {
            return Err(Error::dim("attribute vector", cfg.attributes, self.c.len()));
        }
        if self.s.len() != cfg.non_attribute_dim() {
            return Err(Error::dim(
                "non-attribute vector",
                cfg.non_attribute_dim(),
                self.s.len(),
            ));
        }
        Ok(())
    }
}

/// `Σᵢ log N(cᵢ; yᵢ, σ²) + log N(s; 0, I)`.
pub fn log_prior(pair: &LatentPair, y: &[f64], cfg: &PriorConfig) -> Result<f64> {
    pair.check(cfg)?;
    if y.len() != cfg.attributes {
        return Err(Error::dim("label vector", cfg.attributes, y.len()));
    }
    let mut z = Vec::with_capacity(cfg.latent_dim);
    z.extend_from_slice(&pair.c);
    z.extend_from_slice(&pair.s);
    Ok(log_prior_flat(&z, y, cfg))
}

/// [`log_prior`] on a concatenated latent vector; the caller guarantees lengths.
pub(crate) fn log_prior_flat(z: &[f64], y: &[f64], cfg: &PriorConfig) -> f64 {
    let m = cfg.attributes;
    let var = cfg.sigma * cfg.sigma;
    let attr: f64 = z[..m]
        .iter()
        .zip(y)
        .map(|(c, mu)| (c - mu) * (c - mu))
        .sum::<f64>()
        / var;
    let rest: f64 = z[m..].iter().map(|s| s * s).sum();
    let n = cfg.latent_dim as f64;
    -0.5 * (attr + rest) - 0.5 * n * LN_2PI - m as f64 * cfg.sigma.ln()
}

/// Draws `c ~ N(y, σ² I)` and `s ~ N(0, I)`.
pub fn sample_latent<R: Rng + ?Sized>(
    y: &[f64],
    cfg: &PriorConfig,
    rng: &mut R,
) -> Result<LatentPair> {
    cfg.validate()?;
    if y.len() != cfg.attributes {
        return Err(Error::dim("label vector", cfg.attributes, y.len()));
    }
    let mut normal = || -> f64 { StandardNormal.sample(&mut *rng) };
    let c = y.iter().map(|mu| mu + cfg.sigma * normal()).collect();
    let s = (0..cfg.non_attribute_dim()).map(|_| normal()).collect();
    Ok(LatentPair { c, s })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttributeKind {
    Binary,
    Continuous,
}

/// Training-set statistics used to standardize a continuous attribute.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabelStats {
    pub mean: f64,
    pub std: f64,
}

impl LabelStats {
    /// Population mean and standard deviation.
    pub fn from_values(values: &[f64]) -> Self {
        let n = values.len().max(1) as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Self {
            mean,
            std: var.sqrt(),
        }
    }
}

/// Maps a raw label to the mean of its attribute Gaussian.
///
/// Binary labels become `+1` when positive and `-1` otherwise (so both
/// `{0, 1}` and `{-1, +1}` encodings work). Continuous labels are
/// standardized with `stats`.
pub fn label_to_mean(raw: f64, kind: AttributeKind, stats: Option<&LabelStats>) -> Result<f64> {
    if !raw.is_finite() {
        return Err(Error::InvalidInput(format!("label {raw} is not finite")));
    }
    match kind {
        AttributeKind::Binary => Ok(if raw > 0.0 { 1.0 } else { -1.0 }),
        AttributeKind::Continuous => {
            let stats = stats.ok_or_else(|| {
                Error::InvalidInput("continuous label needs dataset statistics".into())
            })?;
            if stats.std.is_nan() || stats.std <= 0.0 {
                return Err(Error::Degenerate(
                    "continuous attribute has zero standard deviation".into(),
                ));
            }
            Ok((raw - stats.mean) / stats.std)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg(sigma: f64) -> PriorConfig {
        PriorConfig::new(1, 2, sigma).unwrap()
    }

    #[test]
    fn density_at_mean_of_two_unit_gaussians() {
        let pair = LatentPair {
            c: vec![0.3],
            s: vec![0.0],
        };
        let lp = log_prior(&pair, &[0.3], &cfg(1.0)).unwrap();
        assert!((lp - (-(2.0 * std::f64::consts::PI).ln())).abs() < 1e-12);
        assert!((lp + 1.837877).abs() < 1e-6);
    }

    #[test]
    fn one_unit_off_the_mean() {
        let pair = LatentPair {
            c: vec![1.3],
            s: vec![0.0],
        };
        let lp = log_prior(&pair, &[0.3], &cfg(1.0)).unwrap();
        assert!((lp + 2.337877).abs() < 1e-6);
    }

    #[test]
    fn narrower_attribute_gaussian() {
        let pair = LatentPair {
            c: vec![-1.0],
            s: vec![0.0],
        };
        let lp = log_prior(&pair, &[-1.0], &cfg(0.5)).unwrap();
        let tau = 2.0 * std::f64::consts::PI;
        let expect = -0.5 * (tau * 0.25).ln() - 0.5 * tau.ln();
        assert!((lp - expect).abs() < 1e-12);
        assert!((lp + 1.144729).abs() < 1e-6);
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let pair = LatentPair {
            c: vec![0.0, 0.0],
            s: vec![0.0],
        };
        assert!(log_prior(&pair, &[0.0], &cfg(1.0)).is_err());
        let ok = LatentPair {
            c: vec![0.0],
            s: vec![0.0],
        };
        assert!(log_prior(&ok, &[0.0, 1.0], &cfg(1.0)).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(PriorConfig::new(0, 3, 1.0).is_err());
        assert!(PriorConfig::new(3, 3, 1.0).is_err());
        assert!(PriorConfig::new(1, 3, 0.0).is_err());
        assert!(PriorConfig::new(1, 3, f64::NAN).is_err());
    }

    #[test]
    fn maximized_at_the_label() {
        let c = PriorConfig::new(2, 4, 0.5).unwrap();
        let y = [0.7, -1.0];
        let s = vec![0.2, -0.4];
        for j in 0..2 {
            let mut best = (f64::NEG_INFINITY, 0.0);
            for step in -200..=200 {
                let mut cv = y.to_vec();
                cv[j] += step as f64 * 0.01;
                let lp = log_prior(
                    &LatentPair {
                        c: cv.clone(),
                        s: s.clone(),
                    },
                    &y,
                    &c,
                )
                .unwrap();
                if lp > best.0 {
                    best = (lp, cv[j]);
                }
            }
            assert!((best.1 - y[j]).abs() < 1e-9);
        }
    }

    #[test]
    fn translation_invariance() {
        let c = PriorConfig::new(2, 3, 0.8).unwrap();
        let pair = LatentPair {
            c: vec![0.1, 0.9],
            s: vec![0.3],
        };
        let y = [0.5, -0.2];
        let shift = [3.0, -1.5];
        let moved = LatentPair {
            c: vec![0.1 + shift[0], 0.9 + shift[1]],
            s: vec![0.3],
        };
        let y2 = [y[0] + shift[0], y[1] + shift[1]];
        let a = log_prior(&pair, &y, &c).unwrap();
        let b = log_prior(&moved, &y2, &c).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn density_integrates_to_one() {
        for sigma in [0.5, 1.0] {
            let c = cfg(sigma);
            let h = 0.02;
            let n = (16.0 / h) as i64;
            let mut total = 0.0;
            for i in 0..=n {
                for j in 0..=n {
                    let x = -8.0 + i as f64 * h;
                    let z = -8.0 + j as f64 * h;
                    let wx = if i == 0 || i == n { 0.5 } else { 1.0 };
                    let wz = if j == 0 || j == n { 0.5 } else { 1.0 };
                    let lp = log_prior(
                        &LatentPair {
                            c: vec![x],
                            s: vec![z],
                        },
                        &[0.25],
                        &c,
                    )
                    .unwrap();
                    total += wx * wz * lp.exp();
                }
            }
            total *= h * h;
            assert!((total - 1.0).abs() < 1e-4, "sigma {sigma}: {total}");
        }
    }

    #[test]
    fn degenerate_sigma_samples_the_label() {
        let c = PriorConfig::new(2, 4, 1e-12).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = sample_latent(&[1.0, -1.0], &c, &mut rng).unwrap();
        assert!((p.c[0] - 1.0).abs() < 1e-6 && (p.c[1] + 1.0).abs() < 1e-6);
    }

    #[test]
    fn sample_moments() {
        let c = PriorConfig::new(2, 5, 0.5).unwrap();
        let y = [1.0, -1.0];
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 10_000;
        let mut csum = [0.0; 2];
        let mut s_vals = Vec::new();
        for _ in 0..n {
            let p = sample_latent(&y, &c, &mut rng).unwrap();
            csum[0] += p.c[0];
            csum[1] += p.c[1];
            s_vals.extend(p.s);
        }
        let bound = 4.0 * 0.5 / (n as f64).sqrt();
        for j in 0..2 {
            assert!((csum[j] / n as f64 - y[j]).abs() < bound);
        }
        let st = LabelStats::from_values(&s_vals);
        assert!(st.mean.abs() < 0.05);
        assert!((st.std * st.std - 1.0).abs() < 0.05);
    }

    #[test]
    fn sampling_is_seeded() {
        let c = PriorConfig::new(1, 3, 0.5).unwrap();
        let a = sample_latent(&[1.0], &c, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b = sample_latent(&[1.0], &c, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn label_mapping() {
        assert_eq!(
            label_to_mean(1.0, AttributeKind::Binary, None).unwrap(),
            1.0
        );
        assert_eq!(
            label_to_mean(0.0, AttributeKind::Binary, None).unwrap(),
            -1.0
        );
        assert_eq!(
            label_to_mean(-1.0, AttributeKind::Binary, None).unwrap(),
            -1.0
        );
        let st = LabelStats {
            mean: 3.0,
            std: 2.0,
        };
        assert_eq!(
            label_to_mean(3.0, AttributeKind::Continuous, Some(&st)).unwrap(),
            0.0
        );
        assert_eq!(
            label_to_mean(7.0, AttributeKind::Continuous, Some(&st)).unwrap(),
            2.0
        );
        let zero = LabelStats {
            mean: 3.0,
            std: 0.0,
        };
        assert!(label_to_mean(3.0, AttributeKind::Continuous, Some(&zero)).is_err());
        assert!(label_to_mean(3.0, AttributeKind::Continuous, None).is_err());
    }
}
