//! Quantitative evaluation: attack success rates, surrogate-to-target
//! transfer matrices, per-block gradient-dispersion profiles and input
//! gradient sensitivity maps.

use serde::{Deserialize, Serialize};

use crate::attack::{attack_dataset, AttackConfig, AttackMethod};
use crate::data::Dataset;
use crate::error::{CogoError, Result};
use crate::freq::ce_transform;
use crate::graph::Graph;
use crate::rng::CogoRng;
use crate::suppress::make_is_hook;
use crate::tensor::Tensor;
use crate::vit::{ForwardOpts, HookSite, Model, SiteKind};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// One surrogate's transfer row set.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TransferReport {
    pub schema_version: u32,
    pub surrogate: String,
    pub attack: AttackMethod,
    pub seed: u64,
    pub config: AttackConfig,
    pub rows: Vec<TransferRow>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TransferRow {
    pub target: String,
    pub asr_percent: f32,
    /// Secondary rate restricted to images the target classifies correctly
    /// when clean.
    pub asr_clean_correct_percent: f32,
    pub n_images: usize,
}

/// Percentage of attacked inputs the model misclassifies. Images the model
/// already gets wrong still count; the clean-correct-restricted rate is
/// reported separately.
pub fn attack_success_rate(predictions: &[usize], labels: &[usize]) -> Result<f32> {
    if predictions.is_empty() {
        return Err(CogoError::EmptyInput("attack_success_rate"));
    }
    if predictions.len() != labels.len() {
        return Err(CogoError::ShapeMismatch {
            op: "attack_success_rate",
            lhs: vec![predictions.len()],
            rhs: vec![labels.len()],
        });
    }
    let wrong = predictions
        .iter()
        .zip(labels)
        .filter(|(p, l)| p != l)
        .count();
    Ok(100.0 * wrong as f32 / predictions.len() as f32)
}

/// Entropy (nats) of |g| / sum|g| over the flattened gradient. Zero tensor
/// maps to 0. Invariant under positive rescaling; at most ln(numel).
pub fn gradient_dispersion(grad: &Tensor) -> f32 {
    let total: f64 = grad.data().iter().map(|v| v.abs() as f64).sum();
    if total == 0.0 {
        return 0.0;
    }
    let mut entropy = 0.0f64;
    for &v in grad.data() {
        let p = v.abs() as f64 / total;
        if p > 0.0 {
            entropy -= p * p.ln();
        }
    }
    entropy as f32
}

/// Per-block mean dispersion of qkv gradients, with plain backward passes
/// (`plain`) and with the full spectral + suppression machinery active
/// (`cogo`).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DispersionProfile {
    pub plain: Vec<f32>,
    pub cogo: Vec<f32>,
}

impl DispersionProfile {
    pub fn blocks(&self) -> usize {
        self.plain.len()
    }

    /// Number of blocks where the active arm exceeds the plain arm.
    pub fn increased_blocks(&self) -> usize {
        self.plain
            .iter()
            .zip(&self.cogo)
            .filter(|(p, c)| c > p)
            .count()
    }
}

/// Measure qkv-gradient dispersion per block over a batch of images.
///
/// The plain arm backpropagates the loss at the raw image with no hooks. The
/// cogo arm draws `cfg.spectral_samples` spectral transforms per image with
/// suppression hooks installed (when configured) and averages. Both arms
/// evaluate at the clean image (zero perturbation).
pub fn dispersion_profile(
    model: &Model,
    data: &Dataset,
    cfg: &AttackConfig,
) -> Result<DispersionProfile> {
    if data.is_empty() {
        return Err(CogoError::EmptyInput("dispersion_profile"));
    }
    cfg.validate()?;
    let depth = model.spec().depth;
    let mut plain_sum = vec![0.0f64; depth];
    let mut cogo_sum = vec![0.0f64; depth];
    let zero = Tensor::zeros(data.images[0].shape());

    for (index, (image, &label)) in data.images.iter().zip(&data.labels).enumerate() {
        let batch = image.reshape(&[1, 3, model.spec().image_size, model.spec().image_size])?;

        // plain arm: raw input, no hooks
        let mut g = Graph::new();
        let pass = model.forward(&mut g, &batch, ForwardOpts::input_grad())?;
        let loss = g.cross_entropy(pass.logits, &[label])?;
        g.backward(loss)?;
        for block in 0..depth {
            let site = HookSite {
                block_index: block,
                kind: SiteKind::Qkv,
            };
            let node = g
                .node_by_tag(&site.tag())
                .ok_or_else(|| CogoError::MissingSite(site.tag()))?;
            let grad = g
                .grad(node)
                .ok_or_else(|| CogoError::MissingSite(site.tag()))?;
            plain_sum[block] += gradient_dispersion(grad) as f64;
        }

        // cogo arm: spectral transforms + suppression hooks
        let rng = CogoRng::new(cfg.seed, index as u64);
        let mut ce_rng = rng.substream(1);
        let hook = match &cfg.is {
            Some(is_cfg) => Some(make_is_hook(is_cfg, model.layout(), rng.substream(2))?),
            None => None,
        };
        let samples = cfg.spectral_samples;
        let mut per_block = vec![0.0f64; depth];
        for _ in 0..samples {
            let x_t = if cfg.ce.is_disabled() {
                image.clone()
            } else {
                ce_transform(image, &zero, &cfg.ce, &mut ce_rng)?
            };
            let mut g = Graph::new();
            let pass = model.forward(
                &mut g,
                &x_t.reshape(&[1, 3, model.spec().image_size, model.spec().image_size])?,
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
            g.backward(loss)?;
            for block in 0..depth {
                let site = HookSite {
                    block_index: block,
                    kind: SiteKind::Qkv,
                };
                let node = g
                    .node_by_tag(&site.tag())
                    .ok_or_else(|| CogoError::MissingSite(site.tag()))?;
                let grad = g
                    .grad(node)
                    .ok_or_else(|| CogoError::MissingSite(site.tag()))?;
                per_block[block] += gradient_dispersion(grad) as f64;
            }
        }
        for block in 0..depth {
            cogo_sum[block] += per_block[block] / samples as f64;
        }
    }

    let n = data.len() as f64;
    Ok(DispersionProfile {
        plain: plain_sum.iter().map(|&v| (v / n) as f32).collect(),
        cogo: cogo_sum.iter().map(|&v| (v / n) as f32).collect(),
    })
}

/// Generated adversarial batch plus per-target evaluations for one
/// (surrogate, seed) pair.
pub struct TransferRun {
    pub report: TransferReport,
    pub x_adv: Vec<Tensor>,
}

/// Attack `data` on the surrogate once, then evaluate every target on the
/// same adversarial batch (the surrogate itself may appear among targets,
/// which yields the white-box rate).
pub fn transfer_run(
    surrogate: (&str, &Model),
    targets: &[(String, &Model)],
    data: &Dataset,
    cfg: &AttackConfig,
    method: AttackMethod,
) -> Result<TransferRun> {
    let (surrogate_name, surrogate_model) = surrogate;
    let results = attack_dataset(surrogate_model, data, cfg, method)?;
    let x_adv: Vec<Tensor> = results.into_iter().map(|r| r.x_adv).collect();
    let mut rows = Vec::with_capacity(targets.len());
    for (target_name, target_model) in targets {
        let adv_preds = target_model.predict_batch(&x_adv)?;
        let clean_preds = target_model.predict_batch(&data.images)?;
        let asr = attack_success_rate(&adv_preds, &data.labels)?;
        let mut correct_total = 0usize;
        let mut correct_fooled = 0usize;
        for ((clean, adv), &label) in clean_preds.iter().zip(&adv_preds).zip(&data.labels) {
            if *clean == label {
                correct_total += 1;
                if *adv != label {
                    correct_fooled += 1;
                }
            }
        }
        let asr_clean_correct = if correct_total == 0 {
            0.0
        } else {
            100.0 * correct_fooled as f32 / correct_total as f32
        };
        rows.push(TransferRow {
            target: target_name.clone(),
            asr_percent: asr,
            asr_clean_correct_percent: asr_clean_correct,
            n_images: data.len(),
        });
    }
    Ok(TransferRun {
        report: TransferReport {
            schema_version: REPORT_SCHEMA_VERSION,
            surrogate: surrogate_name.to_string(),
            attack: method,
            seed: cfg.seed,
            config: cfg.clone(),
            rows,
        },
        x_adv,
    })
}

/// Full matrix: one report per surrogate per seed.
pub fn transfer_matrix(
    surrogates: &[(String, &Model)],
    targets: &[(String, &Model)],
    data: &Dataset,
    base_cfg: &AttackConfig,
    method: AttackMethod,
    seeds: &[u64],
) -> Result<Vec<TransferReport>> {
    let mut reports = Vec::new();
    for &seed in seeds {
        let cfg = AttackConfig {
            seed,
            ..base_cfg.clone()
        };
        for (name, model) in surrogates {
            let run = transfer_run((name, model), targets, data, &cfg, method)?;
            reports.push(run.report);
        }
    }
    Ok(reports)
}

/// Channel-summed |d loss / d pixel|, min-max normalized to [0, 1]; a
/// constant-gradient input maps to all zeros.
pub fn sensitivity_map(model: &Model, image: &Tensor, label: usize) -> Result<Tensor> {
    let size = model.spec().image_size;
    let mut g = Graph::new();
    let pass = model.forward(
        &mut g,
        &image.reshape(&[1, 3, size, size])?,
        ForwardOpts::input_grad(),
    )?;
    let loss = g.cross_entropy(pass.logits, &[label])?;
    g.backward(loss)?;
    let grad = g
        .grad(pass.input)
        .ok_or_else(|| CogoError::MissingSite("input gradient".into()))?;
    let data = grad.data();
    let mut map = vec![0.0f32; size * size];
    for c in 0..3 {
        for (m, &v) in map.iter_mut().zip(&data[c * size * size..(c + 1) * size * size]) {
            *m += v.abs();
        }
    }
    let lo = map.iter().cloned().fold(f32::INFINITY, f32::min);
    let hi = map.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let span = hi - lo;
    if span > 0.0 {
        for v in &mut map {
            *v = (*v - lo) / span;
        }
    } else {
        map.fill(0.0);
    }
    Tensor::new(vec![size, size], map)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::render_split;
    use crate::vit::{build, ModelSpec, Variant};

    #[test]
    fn asr_basics() {
        assert_eq!(attack_success_rate(&[1, 2, 3], &[0, 0, 0]).unwrap(), 100.0);
        assert_eq!(attack_success_rate(&[1, 2, 3], &[1, 2, 3]).unwrap(), 0.0);
        assert_eq!(attack_success_rate(&[1, 2, 3, 0], &[1, 0, 0, 1]).unwrap(), 75.0);
        assert!(attack_success_rate(&[], &[]).is_err());
        assert!(attack_success_rate(&[1], &[1, 2]).is_err());
    }

    #[test]
    fn dispersion_closed_forms() {
        let uniform = Tensor::filled(&[16], 0.25);
        let want = (16.0f32).ln();
        assert!((gradient_dispersion(&uniform) - want).abs() < 1e-6);

        let mut one_hot = Tensor::zeros(&[8]);
        one_hot.data_mut()[3] = -2.5;
        assert_eq!(gradient_dispersion(&one_hot), 0.0);

        let t = Tensor::new(vec![3], vec![0.5, 0.25, 0.25]).unwrap();
        let want = 1.5 * (2.0f32).ln();
        assert!(
            (gradient_dispersion(&t) - want).abs() < 1e-6,
            "got {}",
            gradient_dispersion(&t)
        );

        assert_eq!(gradient_dispersion(&Tensor::zeros(&[5])), 0.0);
    }

    #[test]
    fn dispersion_scale_invariant_and_bounded() {
        let mut t = Tensor::zeros(&[64]);
        CogoRng::new(1, 0).fill_uniform(t.data_mut(), -1.0, 1.0);
        let a = gradient_dispersion(&t);
        let b = gradient_dispersion(&t.scale(17.0));
        assert!((a - b).abs() < 1e-5);
        assert!(a >= 0.0 && a <= (64.0f32).ln() + 1e-6);
    }

    #[test]
    fn control_profile_identical_when_cogo_degenerate() {
        let spec = ModelSpec::tiny(Variant::VitTiny);
        let model = build(&spec, &mut CogoRng::new(2, 0)).unwrap();
        let data = render_split(5, crate::data::Split::Eval, 1).take(3);
        let cfg = AttackConfig {
            ce: crate::freq::CeConfig::disabled(),
            is: None,
            spectral_samples: 1,
            ..Default::default()
        };
        let profile = dispersion_profile(&model, &data, &cfg).unwrap();
        assert_eq!(profile.blocks(), spec.depth);
        assert_eq!(profile.plain, profile.cogo);
    }

    #[test]
    fn sensitivity_map_shape_range_and_cross_model_difference() {
        let data = render_split(6, crate::data::Split::Eval, 1);
        let image = &data.images[0];
        let label = data.labels[0];
        let m1 = build(&ModelSpec::tiny(Variant::VitTiny), &mut CogoRng::new(3, 0)).unwrap();
        let m2 = build(&ModelSpec::tiny(Variant::HybridTiny), &mut CogoRng::new(4, 0)).unwrap();
        let s1 = sensitivity_map(&m1, image, label).unwrap();
        let s2 = sensitivity_map(&m2, image, label).unwrap();
        assert_eq!(s1.shape(), &[32, 32]);
        for &v in s1.data() {
            assert!((0.0..=1.0).contains(&v));
        }
        assert_ne!(s1.data(), s2.data());
    }

    #[test]
    fn transfer_run_diagonal_equals_white_box_and_eps0_equals_clean_error() {
        let spec = ModelSpec::tiny(Variant::VitTiny);
        let model = build(&spec, &mut CogoRng::new(7, 0)).unwrap();
        let data = render_split(8, crate::data::Split::Eval, 1).take(5);
        let cfg = AttackConfig {
            epsilon: 0.0,
            iterations: 1,
            spectral_samples: 1,
            ce: crate::freq::CeConfig::disabled(),
            is: None,
            ..Default::default()
        };
        let targets = vec![("self".to_string(), &model)];
        let run = transfer_run(("self", &model), &targets, &data, &cfg, AttackMethod::Mim).unwrap();
        // epsilon 0: ASR equals the clean error rate
        let clean_preds = model.predict_batch(&data.images).unwrap();
        let clean_err = attack_success_rate(&clean_preds, &data.labels).unwrap();
        assert_eq!(run.report.rows[0].asr_percent, clean_err);
        assert_eq!(run.report.rows[0].asr_clean_correct_percent, 0.0);
    }
}
