//! Invariant checks shipped in the binary (`flowplug selftest`).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::Result;
use crate::evaluation::spearman_rho;
use crate::flow::{FlowConfig, FlowModel, StyleStack};
use crate::losses::{contrastive_loss, total_loss, total_loss_with_grad, LossConfig};
use crate::numerics::check::{central_difference, jacobian, log_abs_det, max_relative_error};
use crate::numerics::DenseMatrix;
use crate::prior::PriorConfig;
use crate::synthetic::{make_backbone, SyntheticConfig};
use crate::training::{checkpoint_to_json, parse_checkpoint, train, TrainConfig};

/// Outcome of one check.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

type Check = fn() -> Result<(bool, String)>;

const CHECKS: [(&str, Check); 7] = [
    ("flow round trip", flow_round_trip),
    ("flow log-determinant", flow_logdet),
    ("loss gradient", loss_gradient),
    ("contrastive identity", contrastive_identity),
    ("spearman oracle", spearman_oracle),
    ("backbone inversion", backbone_inversion),
    ("checkpoint round trip", checkpoint_round_trip),
];

/// Runs every check; errors count as failures.
pub fn run_selftest() -> Vec<CheckResult> {
    CHECKS
        .iter()
        .map(|(name, check)| match check() {
            Ok((passed, detail)) => CheckResult {
                name,
                passed,
                detail,
            },
            Err(e) => CheckResult {
                name,
                passed: false,
                detail: e.to_string(),
            },
        })
        .collect()
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z
        })
        .collect()
}

fn small_flow(seed: u64, m: usize, n: usize, k: usize) -> Result<FlowModel> {
    let prior = PriorConfig::new(m, n, 0.5)?;
    let cfg = FlowConfig {
        couplings: 4,
        hidden_width: 12,
        hidden_layers: 2,
        scale_clamp: 2.0,
    };
    FlowModel::random(prior, k, &cfg, 0.3, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn flow_round_trip() -> Result<(bool, String)> {
    let (n, k) = (8, 3);
    let model = small_flow(1, 2, n, k)?;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let rows = 300;
    let x = DenseMatrix::new(rows, n, normal_vec(&mut rng, rows * n))?;
    let conds: Vec<usize> = (0..rows).map(|r| r % k).collect();
    let (z, _) = model.forward_batch(&x, &conds)?;
    let (back, _) = model.inverse_batch(&z, &conds)?;
    let err = x
        .data()
        .iter()
        .zip(back.data())
        .map(|(a, b)| (a - b).abs() / a.abs().max(1.0))
        .fold(0.0, f64::max);
    Ok((err <= 1e-9, format!("max relative error {err:.2e}")))
}

fn flow_logdet() -> Result<(bool, String)> {
    let n = 6;
    let model = small_flow(3, 2, n, 2)?;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst: f64 = 0.0;
    for c in 0..2 {
        let x = normal_vec(&mut rng, n);
        let xm = DenseMatrix::new(1, n, x.clone())?;
        let (_, logdet) = model.forward_batch(&xm, &[c])?;
        let jac = jacobian(
            |v| {
                let vm = DenseMatrix::new(1, n, v.to_vec()).expect("row");
                model
                    .forward_batch(&vm, &[c])
                    .expect("forward")
                    .0
                    .into_data()
            },
            &x,
            1e-5,
        );
        worst = worst.max((log_abs_det(&jac) - logdet[0]).abs());
    }
    Ok((worst <= 1e-4, format!("max |Δ logdet| {worst:.2e}")))
}

fn random_stack(
    rng: &mut ChaCha8Rng,
    k: usize,
    n: usize,
    m: usize,
    id: u64,
    frame: u64,
) -> StyleStack {
    let layers = (0..k).map(|_| normal_vec(rng, n)).collect();
    let labels = (0..m)
        .map(|_| if rng.random_bool(0.5) { 1.0 } else { -1.0 })
        .collect();
    StyleStack::from_layers(layers, labels, id, frame)
}

fn loss_gradient() -> Result<(bool, String)> {
    let (m, n, k) = (2, 6, 2);
    let prior = PriorConfig::new(m, n, 0.5)?;
    let flow = FlowConfig {
        couplings: 2,
        hidden_width: 8,
        hidden_layers: 2,
        scale_clamp: 2.0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut model = FlowModel::random(prior, k, &flow, 0.3, &mut rng)?;
    let stacks: Vec<StyleStack> = (0..5)
        .map(|i| random_stack(&mut rng, k, n, m, i / 3, i))
        .collect();
    let groups = vec![
        vec![&stacks[0], &stacks[1], &stacks[2]],
        vec![&stacks[3], &stacks[4]],
    ];
    let cfg = LossConfig::new(prior);
    let analytic = total_loss_with_grad(&model, &groups, &cfg)?.1.flatten();
    let params = model.params();
    let mut failure = None;
    let numeric = central_difference(
        |p| {
            if let Err(e) = model.set_params(p) {
                failure = Some(e);
                return f64::NAN;
            }
            total_loss(&model, &groups, &cfg).map_or(f64::NAN, |l| l.total)
        },
        &params,
        1e-5,
    );
    if let Some(e) = failure {
        return Err(e);
    }
    let err = max_relative_error(&analytic, &numeric, 1e-6);
    Ok((
        err <= 1e-4,
        format!(
            "max relative error {err:.2e} over {} parameters",
            params.len()
        ),
    ))
}

fn contrastive_identity() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst: f64 = 0.0;
    for _ in 0..500 {
        let n = rng.random_range(1..=10);
        let d = rng.random_range(1..=16);
        let group: Vec<Vec<f64>> = (0..n).map(|_| normal_vec(&mut rng, d)).collect();
        let mut pairwise = 0.0;
        for a in &group {
            for b in &group {
                pairwise += a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
            }
        }
        let fast = contrastive_loss(&group, false)?;
        worst = worst.max((fast - pairwise).abs() / pairwise.abs().max(1.0));
    }
    Ok((worst <= 1e-9, format!("max relative gap {worst:.2e}")))
}

fn spearman_oracle() -> Result<(bool, String)> {
    let mut worst: f64 = 0.0;
    for n in 2..=6usize {
        let base: Vec<f64> = (0..n).map(|i| i as f64).collect();
        let mut perm: Vec<usize> = (0..n).collect();
        loop {
            let other: Vec<f64> = perm.iter().map(|&i| i as f64).collect();
            let d2: f64 = base
                .iter()
                .zip(&other)
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            let nf = n as f64;
            let expected = 1.0 - 6.0 * d2 / (nf * (nf * nf - 1.0));
            worst = worst.max((spearman_rho(&base, &other)? - expected).abs());
            if !next_permutation(&mut perm) {
                break;
            }
        }
    }
    Ok((worst <= 1e-12, format!("max gap {worst:.2e}")))
}

fn next_permutation(p: &mut [usize]) -> bool {
    let Some(i) = (1..p.len()).rev().find(|&i| p[i - 1] < p[i]) else {
        return false;
    };
    let j = (i..p.len())
        .rev()
        .find(|&j| p[j] > p[i - 1])
        .expect("successor exists");
    p.swap(i - 1, j);
    p[i..].reverse();
    true
}

fn backbone_inversion() -> Result<(bool, String)> {
    let cfg = SyntheticConfig::default();
    let backbone = make_backbone(&cfg, 7)?;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let f = normal_vec(&mut rng, cfg.latent_dim);
        let stack = StyleStack {
            codes: backbone.generate(&f)?,
            labels: vec![],
            identity_id: 0,
            frame_id: 0,
        };
        let got = backbone.invert(&stack)?.factors.to_vec();
        worst = worst.max(
            got.iter()
                .zip(&f)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max),
        );
    }
    Ok((worst <= 1e-6, format!("max error {worst:.2e}")))
}

fn checkpoint_round_trip() -> Result<(bool, String)> {
    let cfg = SyntheticConfig {
        num_identities: 4,
        frames_per_identity: 3,
        attributes: 2,
        latent_dim: 6,
        layers: 2,
        identity_dim: 2,
        attribute_kinds: vec![crate::prior::AttributeKind::Binary; 2],
        ..SyntheticConfig::default()
    };
    let ds = crate::synthetic::generate_dataset(&cfg, 9)?.dataset;
    let tcfg = TrainConfig {
        epochs: 2,
        eval_every: 0,
        flow: FlowConfig {
            couplings: 2,
            hidden_width: 6,
            hidden_layers: 1,
            scale_clamp: 2.0,
        },
        ..TrainConfig::default()
    };
    let ckpt = train(&ds, &tcfg)?.checkpoint;
    let back = parse_checkpoint(&checkpoint_to_json(&ckpt))?;
    let same = back.model.params().iter().map(|v| v.to_bits()).eq(ckpt
        .model
        .params()
        .iter()
        .map(|v| v.to_bits()));
    Ok((
        same && back == ckpt,
        format!("{} parameters", ckpt.model.param_count()),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_check_passes() {
        for r in run_selftest() {
            assert!(r.passed, "{}: {}", r.name, r.detail);
        }
    }

    #[test]
    fn permutations_are_enumerated() {
        let mut p = vec![0, 1, 2, 3];
        let mut count = 1;
        while next_permutation(&mut p) {
            count += 1;
        }
        assert_eq!(count, 24);
        assert_eq!(p, vec![3, 2, 1, 0]);
    }
}
