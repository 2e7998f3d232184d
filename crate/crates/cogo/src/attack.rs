//! Iterative attack loops: the spectral-enhancement + gradient-suppression
//! attack (COGO) and the momentum baseline (MIM).
//!
//! Both run the same core loop. Each iteration draws S spectrally transformed
//! copies of the current adversarial candidate, averages the input gradients
//! of the surrogate loss across them, feeds the average through an l1
//! normalized momentum accumulator, takes a sign step and projects back into
//! the l-inf ball and the image box. Suppression hooks, when enabled, are
//! installed at the configured sites before every backward pass.
//!
//! Disabling every COGO ingredient (no suppression, gamma 0, noise 0, rho 0,
//! S = 1) takes the exact MIM code path, bit for bit.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{CogoError, Result};
use crate::freq::{ce_transform, CeConfig};
use crate::graph::Graph;
use crate::rng::CogoRng;
use crate::suppress::{make_is_hook, SuppressionConfig};
use crate::tensor::Tensor;
use crate::vit::{ForwardOpts, Model, SiteKind};

fn default_is_sites() -> Vec<SiteKind> {
    vec![SiteKind::Qkv]
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackConfig {
    /// l-inf budget in [0, 1] pixel units.
    pub epsilon: f32,
    /// Iteration count T.
    pub iterations: usize,
    /// Step-size constant; the per-iteration step is lambda * epsilon / T.
    pub lambda_step: f32,
    /// Momentum decay mu.
    pub momentum_mu: f32,
    /// Spectral samples averaged per iteration.
    pub spectral_samples: usize,
    pub ce: CeConfig,
    pub is: Option<SuppressionConfig>,
    /// Hook sites for suppression (qkv by default; others exist for the
    /// site-ablation sweep).
    #[serde(default = "default_is_sites")]
    pub is_sites: Vec<SiteKind>,
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            epsilon: 8.0 / 255.0,
            iterations: 10,
            lambda_step: 1.5,
            momentum_mu: 1.0,
            spectral_samples: 5,
            ce: CeConfig::default(),
            is: Some(SuppressionConfig::default()),
            is_sites: default_is_sites(),
            seed: 0,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0) {
            return Err(CogoError::InvalidConfig(format!(
                "epsilon must be nonnegative, got {}",
                self.epsilon
            )));
        }
        if self.iterations == 0 {
            return Err(CogoError::InvalidConfig("iterations must be >= 1".into()));
        }
        if self.spectral_samples == 0 {
            return Err(CogoError::InvalidConfig(
                "spectral_samples must be >= 1".into(),
            ));
        }
        self.ce.validate()?;
        if let Some(is) = &self.is {
            is.validate()?;
        }
        Ok(())
    }

    /// The MIM baseline expressed as a degenerate configuration.
    pub fn mim(epsilon: f32, iterations: usize, lambda_step: f32, seed: u64) -> Self {
        Self {
            epsilon,
            iterations,
            lambda_step,
            momentum_mu: 1.0,
            spectral_samples: 1,
            ce: CeConfig::disabled(),
            is: None,
            is_sites: default_is_sites(),
            seed,
        }
    }
}

/// Current perturbation and momentum accumulator.
#[derive(Debug, Clone)]
pub struct PerturbationState {
    pub delta: Tensor,
    pub momentum: Tensor,
}

#[derive(Debug, Clone)]
pub struct AttackResult {
    pub x_adv: Tensor,
    /// Mean surrogate loss per iteration (averaged over spectral samples).
    pub losses: Vec<f32>,
    pub pred_clean: usize,
    pub pred_adv: usize,
    pub iterations_used: usize,
}

/// Clamp delta into the l-inf ball, then shift so x_clean + delta stays in
/// [0, 1]. Idempotent, and bit-neutral on already-feasible deltas (the
/// naive `clamp(x + d) - x` round-trip is not).
pub fn project(delta: &Tensor, epsilon: f32, x_clean: &Tensor) -> Result<Tensor> {
    delta.zip(x_clean, "project", |d, x| {
        let d = d.clamp(-epsilon, epsilon);
        let sum = x + d;
        if sum < 0.0 {
            -x
        } else if sum > 1.0 {
            1.0 - x
        } else {
            d
        }
    })
}

/// Run the attack with full COGO machinery enabled per `cfg`.
///
/// `stream_id` separates rng streams across images; the harness passes the
/// image index.
pub fn cogo_attack(
    model: &Model,
    x_clean: &Tensor,
    label: usize,
    cfg: &AttackConfig,
    stream_id: u64,
) -> Result<AttackResult> {
    run_attack(model, x_clean, label, cfg, stream_id)
}

/// The MIM baseline: identical loop with S = 1, no spectral transform and no
/// suppression hooks; `cfg.ce` and `cfg.is` are ignored.
pub fn mim_attack(
    model: &Model,
    x_clean: &Tensor,
    label: usize,
    cfg: &AttackConfig,
    stream_id: u64,
) -> Result<AttackResult> {
    let mim_cfg = AttackConfig {
        ce: CeConfig::disabled(),
        is: None,
        spectral_samples: 1,
        ..cfg.clone()
    };
    run_attack(model, x_clean, label, &mim_cfg, stream_id)
}

fn run_attack(
    model: &Model,
    x_clean: &Tensor,
    label: usize,
    cfg: &AttackConfig,
    stream_id: u64,
) -> Result<AttackResult> {
    cfg.validate()?;
    let shape = x_clean.shape().to_vec();
    if shape.len() != 3 {
        return Err(CogoError::InvalidShape {
            op: "attack",
            shape,
            reason: "expected a single (C, H, W) image".into(),
        });
    }
    let batch_shape = [1, shape[0], shape[1], shape[2]];

    let rng = CogoRng::new(cfg.seed, stream_id);
    let mut ce_rng = rng.substream(1);
    let ce_active = !cfg.ce.is_disabled();
    let hook = match &cfg.is {
        Some(is_cfg) => Some(make_is_hook(is_cfg, model.layout(), rng.substream(2))?),
        None => None,
    };

    let pred_clean = model.predict_batch(std::slice::from_ref(x_clean))?[0];

    let mut state = PerturbationState {
        delta: Tensor::zeros(&shape),
        momentum: Tensor::zeros(&shape),
    };
    let step = cfg.lambda_step * cfg.epsilon / cfg.iterations as f32;
    let mut losses = Vec::with_capacity(cfg.iterations);

    for iteration in 0..cfg.iterations {
        let mut grad_sum = vec![0.0f64; x_clean.numel()];
        let mut loss_sum = 0.0f64;
        for _ in 0..cfg.spectral_samples {
            let x_t = if ce_active {
                ce_transform(x_clean, &state.delta, &cfg.ce, &mut ce_rng)?
            } else {
                x_clean.add(&state.delta)?
            };
            let mut g = Graph::new();
            let pass = model.forward(
                &mut g,
                &x_t.reshape(&batch_shape)?,
                ForwardOpts::input_grad(),
            )?;
            if let Some(hook) = &hook {
                for &kind in &cfg.is_sites {
                    for site in model.hook_sites(kind) {
                        let node = g
                            .node_by_tag(&site.tag())
                            .ok_or_else(|| CogoError::MissingSite(site.tag()))?;
                        g.register_hook(node, hook.clone())?;
                    }
                }
            }
            let loss = g.cross_entropy(pass.logits, &[label])?;
            loss_sum += g.value(loss).item() as f64;
            g.backward(loss)?;
            let grad = g
                .grad(pass.input)
                .ok_or_else(|| CogoError::NonFiniteGradient { iteration })?;
            if !grad.is_finite() {
                return Err(CogoError::NonFiniteGradient { iteration });
            }
            for (acc, &gv) in grad_sum.iter_mut().zip(grad.data()) {
                *acc += gv as f64;
            }
        }
        let samples = cfg.spectral_samples as f64;
        let grad_mean: Vec<f32> = grad_sum.iter().map(|&v| (v / samples) as f32).collect();
        losses.push((loss_sum / samples) as f32);

        let l1: f64 = grad_mean.iter().map(|v| v.abs() as f64).sum();
        let momentum = state.momentum.data_mut();
        if l1 > 0.0 {
            let inv = (1.0 / l1) as f32;
            for (m, &gv) in momentum.iter_mut().zip(&grad_mean) {
                *m = cfg.momentum_mu * *m + gv * inv;
            }
        } else {
            for m in momentum.iter_mut() {
                *m *= cfg.momentum_mu;
            }
        }

        let momentum = state.momentum.clone();
        for (d, &m) in state.delta.data_mut().iter_mut().zip(momentum.data()) {
            *d += step * sign(m);
        }
        state.delta = project(&state.delta, cfg.epsilon, x_clean)?;
    }

    let x_adv = x_clean.add(&state.delta)?;
    let pred_adv = model.predict_batch(std::slice::from_ref(&x_adv))?[0];
    Ok(AttackResult {
        x_adv,
        losses,
        pred_clean,
        pred_adv,
        iterations_used: cfg.iterations,
    })
}

fn sign(v: f32) -> f32 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackMethod {
    Cogo,
    Mim,
}

impl AttackMethod {
    pub fn as_str(&self) -> &'static str {
        match self {
            AttackMethod::Cogo => "cogo",
            AttackMethod::Mim => "mim",
        }
    }
}

impl std::fmt::Display for AttackMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Attack every image of a dataset in parallel; per-image rng streams are
/// keyed by image index, so results do not depend on worker scheduling.
pub fn attack_dataset(
    model: &Model,
    data: &Dataset,
    cfg: &AttackConfig,
    method: AttackMethod,
) -> Result<Vec<AttackResult>> {
    data.images
        .par_iter()
        .zip(&data.labels)
        .enumerate()
        .map(|(index, (image, &label))| match method {
            AttackMethod::Cogo => cogo_attack(model, image, label, cfg, index as u64),
            AttackMethod::Mim => mim_attack(model, image, label, cfg, index as u64),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::render_split;
    use crate::vit::{build, ModelSpec, Variant};

    fn small_model() -> Model {
        let spec = ModelSpec::tiny(Variant::DeitTiny);
        build(&spec, &mut CogoRng::new(21, 0)).unwrap()
    }

    fn sample_image(seed: u64) -> Tensor {
        let ds = render_split(seed, crate::data::Split::Eval, 1);
        ds.images[0].clone()
    }

    #[test]
    fn project_feasible_delta_is_unchanged() {
        let x = sample_image(1);
        let mut delta = Tensor::zeros(x.shape());
        let mut rng = CogoRng::new(2, 0);
        let eps = 8.0 / 255.0;
        rng.fill_uniform(delta.data_mut(), -eps * 0.4, eps * 0.4);
        // keep x + delta inside the box
        let feasible = delta.zip(&x, "clamp", |d, x| d.min(1.0 - x).max(-x)).unwrap();
        let projected = project(&feasible, eps, &x).unwrap();
        assert_eq!(projected.data(), feasible.data());
    }

    #[test]
    fn project_saturates_at_epsilon() {
        let x = Tensor::filled(&[3, 4, 4], 0.5);
        let delta = Tensor::filled(&[3, 4, 4], 1.0);
        let eps = 8.0 / 255.0;
        let projected = project(&delta, eps, &x).unwrap();
        for &v in projected.data() {
            assert_eq!(v, eps);
        }
    }

    #[test]
    fn project_is_idempotent() {
        let x = sample_image(3);
        let mut delta = Tensor::zeros(x.shape());
        CogoRng::new(4, 0).fill_uniform(delta.data_mut(), -1.0, 1.0);
        let eps = 8.0 / 255.0;
        let once = project(&delta, eps, &x).unwrap();
        let twice = project(&once, eps, &x).unwrap();
        assert_eq!(once.data(), twice.data());
    }

    #[test]
    fn zero_epsilon_returns_clean_image_bit_exactly() {
        let model = small_model();
        let x = sample_image(5);
        let cfg = AttackConfig {
            epsilon: 0.0,
            iterations: 3,
            spectral_samples: 2,
            ..Default::default()
        };
        let result = cogo_attack(&model, &x, 0, &cfg, 0).unwrap();
        assert_eq!(result.x_adv.data(), x.data());
        let result = mim_attack(&model, &x, 0, &cfg, 0).unwrap();
        assert_eq!(result.x_adv.data(), x.data());
    }

    #[test]
    fn budget_holds_for_default_config() {
        let model = small_model();
        let x = sample_image(6);
        let cfg = AttackConfig {
            iterations: 4,
            spectral_samples: 2,
            seed: 9,
            ..Default::default()
        };
        let result = cogo_attack(&model, &x, 3, &cfg, 7).unwrap();
        let linf = result
            .x_adv
            .zip(&x, "diff", |a, b| (a - b).abs())
            .unwrap()
            .linf_norm();
        assert!(linf <= cfg.epsilon + 1e-6, "budget violated: {linf}");
        for &v in result.x_adv.data() {
            assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn degenerate_cogo_is_bit_identical_to_mim() {
        let model = small_model();
        let x = sample_image(8);
        let degenerate = AttackConfig {
            epsilon: 8.0 / 255.0,
            iterations: 5,
            lambda_step: 1.5,
            momentum_mu: 1.0,
            spectral_samples: 1,
            ce: CeConfig::disabled(),
            is: None,
            is_sites: vec![SiteKind::Qkv],
            seed: 3,
        };
        let a = cogo_attack(&model, &x, 2, &degenerate, 11).unwrap();
        let b = mim_attack(&model, &x, 2, &degenerate, 11).unwrap();
        assert_eq!(a.x_adv.data(), b.x_adv.data());
        assert_eq!(a.losses, b.losses);
    }

    #[test]
    fn fixed_seed_is_bit_reproducible() {
        let model = small_model();
        let x = sample_image(9);
        let cfg = AttackConfig {
            iterations: 3,
            spectral_samples: 2,
            seed: 42,
            ..Default::default()
        };
        let a = cogo_attack(&model, &x, 1, &cfg, 5).unwrap();
        let b = cogo_attack(&model, &x, 1, &cfg, 5).unwrap();
        assert_eq!(a.x_adv.data(), b.x_adv.data());
        // a different stream gives a different perturbation
        let c = cogo_attack(&model, &x, 1, &cfg, 6).unwrap();
        assert_ne!(a.x_adv.data(), c.x_adv.data());
    }

    #[test]
    fn single_step_without_momentum_is_fgsm() {
        // mu = 0, T = 1: delta = clip(lambda * eps * sign(grad))
        let model = small_model();
        let x = sample_image(10);
        let cfg = AttackConfig {
            epsilon: 8.0 / 255.0,
            iterations: 1,
            lambda_step: 1.0,
            momentum_mu: 0.0,
            spectral_samples: 1,
            ce: CeConfig::disabled(),
            is: None,
            is_sites: vec![SiteKind::Qkv],
            seed: 0,
        };
        let result = mim_attack(&model, &x, 4, &cfg, 0).unwrap();

        // direct FGSM: one forward/backward on the clean image
        let mut g = Graph::new();
        let pass = model
            .forward(
                &mut g,
                &x.reshape(&[1, 3, 32, 32]).unwrap(),
                ForwardOpts::input_grad(),
            )
            .unwrap();
        let loss = g.cross_entropy(pass.logits, &[4]).unwrap();
        g.backward(loss).unwrap();
        let grad = g.grad(pass.input).unwrap();
        let eps = cfg.epsilon;
        let want = x
            .zip(&grad.reshape(&[3, 32, 32]).unwrap(), "fgsm", |xv, gv| {
                (xv + eps * sign(gv)).clamp(0.0, 1.0)
            })
            .unwrap();
        assert_eq!(result.x_adv.data(), want.data());
    }

    #[test]
    fn attack_dataset_is_order_independent_per_image(){
        let model = small_model();
        let data = render_split(12, crate::data::Split::Eval, 1).take(4);
        let cfg = AttackConfig {
            iterations: 2,
            spectral_samples: 2,
            seed: 1,
            ..Default::default()
        };
        let batch = attack_dataset(&model, &data, &cfg, AttackMethod::Cogo).unwrap();
        let solo = cogo_attack(&model, &data.images[2], data.labels[2], &cfg, 2).unwrap();
        assert_eq!(batch[2].x_adv.data(), solo.x_adv.data());
    }
}
