//! Individuality suppression: redundancy-based gradient channel
//! down-weighting plus additional-token gradient scaling, packaged as a
//! gradient hook.
//!
//! Channel pairs are scored with mutual information and Pearson correlation;
//! pairs over threshold mark their channels as redundant, and each flag
//! subtracts `alpha` from that channel's weight, floored at `weight_floor`.
//! Models with an additional (non-class, non-patch) token get that token's
//! gradient row rescaled by a factor in (0, 1).

use std::cell::RefCell;
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::error::{CogoError, Result};
use crate::graph::HookFn;
use crate::rng::CogoRng;
use crate::tensor::Tensor;
use crate::vit::TokenLayout;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum ThresholdMode {
    /// tau_mi = beta_mi * mean(MI), tau_corr = beta_corr * mean(|corr|) over
    /// the sampled pairs of the tensor at hand.
    Adaptive,
    Fixed { tau_mi: f32, tau_corr: f32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum TokenScaleMode {
    /// c = sigmoid(||g_additional|| / ||g_primary||).
    AdaptiveSigmoid,
    Fixed { c: f32 },
}

/// Reference fixed thresholds exposed alongside the adaptive mode.
pub const FIXED_TAU_MI: f32 = 0.5;
pub const FIXED_TAU_CORR: f32 = 0.7;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SuppressionConfig {
    /// Weight reduction per redundancy flag.
    pub alpha: f32,
    pub beta_mi: f32,
    pub beta_corr: f32,
    /// Channel pairs sampled per gradient tensor.
    pub n_pairs: usize,
    /// Lower bound for channel weights.
    pub weight_floor: f32,
    /// Histogram bins for the mutual-information estimate.
    pub mi_bins: usize,
    pub threshold_mode: ThresholdMode,
    pub token_scale_mode: TokenScaleMode,
}

impl Default for SuppressionConfig {
    fn default() -> Self {
        Self {
            alpha: 0.3,
            beta_mi: 1.0,
            beta_corr: 1.0,
            n_pairs: 5,
            weight_floor: 0.1,
            mi_bins: 16,
            threshold_mode: ThresholdMode::Adaptive,
            token_scale_mode: TokenScaleMode::AdaptiveSigmoid,
        }
    }
}

impl SuppressionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) {
            return Err(CogoError::InvalidConfig(format!(
                "alpha must be positive, got {}",
                self.alpha
            )));
        }
        if self.n_pairs == 0 {
            return Err(CogoError::InvalidConfig("n_pairs must be >= 1".into()));
        }
        if !(self.weight_floor > 0.0 && self.weight_floor <= 1.0) {
            return Err(CogoError::InvalidConfig(format!(
                "weight_floor must be in (0, 1], got {}",
                self.weight_floor
            )));
        }
        if self.mi_bins < 2 {
            return Err(CogoError::InvalidConfig("mi_bins must be >= 2".into()));
        }
        Ok(())
    }
}

/// Redundancy indicators for one sampled channel pair.
#[derive(Debug, Clone, Copy)]
pub struct PairIndicator {
    pub i: usize,
    pub j: usize,
    pub mi: f32,
    pub corr: f32,
    pub t_mi: bool,
    pub t_corr: bool,
}

/// Per-channel multipliers, each in [weight_floor, 1].
#[derive(Debug, Clone)]
pub struct ChannelWeights {
    weights: Vec<f32>,
}

impl ChannelWeights {
    pub fn weights(&self) -> &[f32] {
        &self.weights
    }
}

/// Sample Pearson correlation. Zero variance on either side yields 0 rather
/// than an undefined value, so dead channels are never flagged.
pub fn pearson(a: &[f32], b: &[f32]) -> Result<f32> {
    if a.len() != b.len() {
        return Err(CogoError::ShapeMismatch {
            op: "pearson",
            lhs: vec![a.len()],
            rhs: vec![b.len()],
        });
    }
    if a.len() < 2 {
        return Err(CogoError::EmptyInput("pearson (need length >= 2)"));
    }
    let n = a.len() as f64;
    let mean_a = a.iter().map(|&v| v as f64).sum::<f64>() / n;
    let mean_b = b.iter().map(|&v| v as f64).sum::<f64>() / n;
    let mut cov = 0.0f64;
    let mut var_a = 0.0f64;
    let mut var_b = 0.0f64;
    for (&x, &y) in a.iter().zip(b) {
        let dx = x as f64 - mean_a;
        let dy = y as f64 - mean_b;
        cov += dx * dy;
        var_a += dx * dx;
        var_b += dy * dy;
    }
    if var_a == 0.0 || var_b == 0.0 {
        return Ok(0.0);
    }
    Ok((cov / (var_a.sqrt() * var_b.sqrt())) as f32)
}

fn bin_of(v: f32, lo: f64, hi: f64, bins: usize) -> usize {
    if hi <= lo {
        return 0;
    }
    let t = ((v as f64 - lo) / (hi - lo) * bins as f64) as usize;
    t.min(bins - 1)
}

/// Plug-in mutual information (nats) from a bins x bins equal-width joint
/// histogram, each axis binned over that vector's own [min, max] range.
/// A zero-variance vector yields 0.
pub fn mutual_info(a: &[f32], b: &[f32], bins: usize) -> Result<f32> {
    if a.len() != b.len() {
        return Err(CogoError::ShapeMismatch {
            op: "mutual_info",
            lhs: vec![a.len()],
            rhs: vec![b.len()],
        });
    }
    if a.len() < 2 {
        return Err(CogoError::EmptyInput("mutual_info (need length >= 2)"));
    }
    if bins < 2 {
        return Err(CogoError::InvalidConfig("mutual_info needs bins >= 2".into()));
    }
    let range = |xs: &[f32]| {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for &v in xs {
            lo = lo.min(v as f64);
            hi = hi.max(v as f64);
        }
        (lo, hi)
    };
    let (alo, ahi) = range(a);
    let (blo, bhi) = range(b);
    if ahi <= alo || bhi <= blo {
        return Ok(0.0);
    }
    let mut joint = vec![0u32; bins * bins];
    for (&x, &y) in a.iter().zip(b) {
        joint[bin_of(x, alo, ahi, bins) * bins + bin_of(y, blo, bhi, bins)] += 1;
    }
    let mut pa = vec![0u32; bins];
    let mut pb = vec![0u32; bins];
    for i in 0..bins {
        for j in 0..bins {
            pa[i] += joint[i * bins + j];
            pb[j] += joint[i * bins + j];
        }
    }
    let n = a.len() as f64;
    // log-difference form: the diagonal case MI(x, x) reproduces the marginal
    // entropy bit-for-bit
    let mut mi = 0.0f64;
    for i in 0..bins {
        for j in 0..bins {
            let c = joint[i * bins + j];
            if c == 0 {
                continue;
            }
            let pij = c as f64 / n;
            let pi = pa[i] as f64 / n;
            let pj = pb[j] as f64 / n;
            mi += pij * (pij.ln() - pi.ln() - pj.ln());
        }
    }
    Ok(mi as f32)
}

/// Entropy (nats) of the equal-width marginal histogram used by
/// [`mutual_info`]; MI(x, x) equals this exactly.
pub fn marginal_histogram_entropy(xs: &[f32], bins: usize) -> f32 {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in xs {
        lo = lo.min(v as f64);
        hi = hi.max(v as f64);
    }
    if hi <= lo {
        return 0.0;
    }
    let mut counts = vec![0u32; bins];
    for &v in xs {
        counts[bin_of(v, lo, hi, bins)] += 1;
    }
    let n = xs.len() as f64;
    // -(p * ln p) is bitwise equal to p * (ln p - ln p - ln p), the term the
    // MI sum produces on its diagonal, so MI(x, x) == H(x) exactly
    let mut h = 0.0f64;
    for &c in &counts {
        if c == 0 {
            continue;
        }
        let p = c as f64 / n;
        h -= p * p.ln();
    }
    h as f32
}

/// tau_mi = beta_mi * mean(mi), tau_corr = beta_corr * mean(|corr|).
pub fn adaptive_thresholds(
    indicators: &[(f32, f32)],
    beta_mi: f32,
    beta_corr: f32,
) -> Result<(f32, f32)> {
    if indicators.is_empty() {
        return Err(CogoError::EmptyInput("adaptive_thresholds"));
    }
    let n = indicators.len() as f32;
    let mean_mi = indicators.iter().map(|(mi, _)| mi).sum::<f32>() / n;
    let mean_corr = indicators.iter().map(|(_, c)| c.abs()).sum::<f32>() / n;
    Ok((beta_mi * mean_mi, beta_corr * mean_corr))
}

/// Uniformly sample `n_pairs` distinct unordered channel pairs by rejection;
/// if fewer pairs exist, every pair is used (in lexicographic order) and the
/// rng is left untouched.
pub fn sample_pairs(channels: usize, n_pairs: usize, rng: &mut CogoRng) -> Vec<(usize, usize)> {
    let total = channels * (channels - 1) / 2;
    if n_pairs >= total {
        let mut all = Vec::with_capacity(total);
        for i in 0..channels {
            for j in i + 1..channels {
                all.push((i, j));
            }
        }
        return all;
    }
    let mut chosen: Vec<(usize, usize)> = Vec::with_capacity(n_pairs);
    while chosen.len() < n_pairs {
        let a = rng.below(channels);
        let b = rng.below(channels);
        if a == b {
            continue;
        }
        let pair = (a.min(b), a.max(b));
        if !chosen.contains(&pair) {
            chosen.push(pair);
        }
    }
    chosen
}

/// Flatten one channel (last-axis index) of a gradient tensor over all other
/// axes.
fn channel_vector(grad: &Tensor, channel: usize) -> Vec<f32> {
    let c = *grad.shape().last().expect("rank >= 1");
    grad.data()[channel..].iter().step_by(c).copied().collect()
}

/// Outcome of one suppression evaluation, including the sampled pairs and the
/// thresholds actually used.
#[derive(Debug, Clone)]
pub struct SuppressionDetail {
    pub pairs: Vec<PairIndicator>,
    pub tau_mi: f32,
    pub tau_corr: f32,
    pub weights: ChannelWeights,
}

/// Compute per-channel suppression weights for a gradient tensor whose last
/// axis is the channel axis; channel vectors flatten every other axis.
pub fn suppression_weights(
    grad: &Tensor,
    cfg: &SuppressionConfig,
    rng: &mut CogoRng,
) -> Result<ChannelWeights> {
    Ok(suppression_detail(grad, cfg, rng)?.weights)
}

pub fn suppression_detail(
    grad: &Tensor,
    cfg: &SuppressionConfig,
    rng: &mut CogoRng,
) -> Result<SuppressionDetail> {
    cfg.validate()?;
    let channels = *grad.shape().last().unwrap_or(&0);
    if channels < 2 {
        return Err(CogoError::InvalidShape {
            op: "suppression_weights",
            shape: grad.shape().to_vec(),
            reason: "need at least 2 channels on the last axis".into(),
        });
    }
    let picked = sample_pairs(channels, cfg.n_pairs, rng);
    let mut scored: Vec<(usize, usize, f32, f32)> = Vec::with_capacity(picked.len());
    for &(i, j) in &picked {
        let gi = channel_vector(grad, i);
        let gj = channel_vector(grad, j);
        let mi = mutual_info(&gi, &gj, cfg.mi_bins)?;
        let corr = pearson(&gi, &gj)?;
        scored.push((i, j, mi, corr));
    }
    let (tau_mi, tau_corr) = match cfg.threshold_mode {
        ThresholdMode::Fixed { tau_mi, tau_corr } => (tau_mi, tau_corr),
        ThresholdMode::Adaptive => {
            let stats: Vec<(f32, f32)> = scored.iter().map(|&(_, _, mi, c)| (mi, c)).collect();
            adaptive_thresholds(&stats, cfg.beta_mi, cfg.beta_corr)?
        }
    };
    let pairs: Vec<PairIndicator> = scored
        .into_iter()
        .map(|(i, j, mi, corr)| PairIndicator {
            i,
            j,
            mi,
            corr,
            t_mi: mi > tau_mi,
            t_corr: corr.abs() > tau_corr,
        })
        .collect();
    let mut weights = vec![1.0f32; channels];
    for p in &pairs {
        let flags = p.t_mi as u32 + p.t_corr as u32;
        if flags == 0 {
            continue;
        }
        for ch in [p.i, p.j] {
            weights[ch] -= cfg.alpha * flags as f32;
        }
    }
    for w in &mut weights {
        *w = w.max(cfg.weight_floor);
    }
    Ok(SuppressionDetail {
        pairs,
        tau_mi,
        tau_corr,
        weights: ChannelWeights { weights },
    })
}

/// Sigmoid-scaled factor for additional-token gradients.
pub fn additional_token_scale(
    g_additional: &[f32],
    g_primary: &[f32],
    mode: TokenScaleMode,
) -> f32 {
    match mode {
        TokenScaleMode::Fixed { c } => c,
        TokenScaleMode::AdaptiveSigmoid => {
            let norm = |xs: &[f32]| xs.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
            let np = norm(g_primary);
            let ratio = if np == 0.0 {
                log::warn!("additional_token_scale: zero primary-gradient norm, falling back to sigmoid(0)");
                0.0
            } else {
                norm(g_additional) / np
            };
            (1.0 / (1.0 + (-ratio).exp())) as f32
        }
    }
}

/// Build the suppression hook for a gradient site.
///
/// The incoming gradient must have the token axis second-to-last and the
/// channel axis last, e.g. (B, T, 3*embed_dim) at a qkv site. Channels are
/// down-weighted first; if the layout names an additional token, that token's
/// rows of the already-suppressed gradient are then rescaled.
pub fn make_is_hook(cfg: &SuppressionConfig, layout: &TokenLayout, rng: CogoRng) -> Result<HookFn> {
    cfg.validate()?;
    let cfg = cfg.clone();
    let layout = layout.clone();
    let rng = Rc::new(RefCell::new(rng));
    Ok(Rc::new(move |grad: &Tensor| {
        let shape = grad.shape();
        if shape.len() < 2 {
            return Err(CogoError::InvalidShape {
                op: "is_hook",
                shape: shape.to_vec(),
                reason: "need rank >= 2 (tokens, channels)".into(),
            });
        }
        let channels = shape[shape.len() - 1];
        let tokens = shape[shape.len() - 2];
        let weights = {
            let mut rng = rng.borrow_mut();
            suppression_weights(grad, &cfg, &mut rng)?
        };
        let mut out = grad.clone();
        for row in out.data_mut().chunks_mut(channels) {
            for (v, w) in row.iter_mut().zip(weights.weights()) {
                *v *= *w;
            }
        }
        if let Some(add_idx) = layout.additional_token_index {
            if add_idx >= tokens {
                return Err(CogoError::InvalidShape {
                    op: "is_hook",
                    shape: shape.to_vec(),
                    reason: format!(
                        "additional token index {add_idx} out of range for {tokens} tokens"
                    ),
                });
            }
            let row_len = channels;
            let lanes = out.numel() / (tokens * row_len);
            let data = out.data_mut();
            let mut g_additional = Vec::with_capacity(lanes * row_len);
            let mut g_primary = Vec::with_capacity((tokens - 1) * lanes * row_len);
            for lane in 0..lanes {
                for t in 0..tokens {
                    let base = (lane * tokens + t) * row_len;
                    if t == add_idx {
                        g_additional.extend_from_slice(&data[base..base + row_len]);
                    } else {
                        g_primary.extend_from_slice(&data[base..base + row_len]);
                    }
                }
            }
            let c = additional_token_scale(&g_additional, &g_primary, cfg.token_scale_mode);
            for lane in 0..lanes {
                let base = (lane * tokens + add_idx) * row_len;
                for v in &mut data[base..base + row_len] {
                    *v *= c;
                }
            }
        }
        Ok(out)
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vit::TokenLayout;

    fn random_vec(n: usize, seed: u64) -> Vec<f32> {
        let mut rng = CogoRng::new(seed, 0);
        let mut v = vec![0.0f32; n];
        rng.fill_uniform(&mut v, -2.0, 2.0);
        v
    }

    #[test]
    fn pearson_of_self_and_negation() {
        let g = random_vec(64, 1);
        let neg: Vec<f32> = g.iter().map(|v| -v).collect();
        assert!((pearson(&g, &g).unwrap() - 1.0).abs() < 1e-6);
        assert!((pearson(&g, &neg).unwrap() + 1.0).abs() < 1e-6);
    }

    #[test]
    fn pearson_matches_two_pass_oracle() {
        let a = random_vec(64, 2);
        let b = random_vec(64, 3);
        let n = a.len() as f64;
        let ma = a.iter().map(|&v| v as f64).sum::<f64>() / n;
        let mb = b.iter().map(|&v| v as f64).sum::<f64>() / n;
        let cov: f64 = a
            .iter()
            .zip(&b)
            .map(|(&x, &y)| (x as f64 - ma) * (y as f64 - mb))
            .sum::<f64>()
            / n;
        let sa = (a.iter().map(|&x| (x as f64 - ma).powi(2)).sum::<f64>() / n).sqrt();
        let sb = (b.iter().map(|&y| (y as f64 - mb).powi(2)).sum::<f64>() / n).sqrt();
        let want = (cov / (sa * sb)) as f32;
        let got = pearson(&a, &b).unwrap();
        assert!((got - want).abs() < 1e-6, "got {got}, want {want}");
    }

    #[test]
    fn pearson_zero_variance_is_zero() {
        let a = vec![3.0f32; 16];
        let b = random_vec(16, 4);
        assert_eq!(pearson(&a, &b).unwrap(), 0.0);
    }

    #[test]
    fn pearson_length_mismatch() {
        assert!(pearson(&[1.0, 2.0], &[1.0]).is_err());
    }

    #[test]
    fn mi_of_self_is_marginal_entropy_exactly() {
        let g = random_vec(128, 5);
        let mi = mutual_info(&g, &g, 16).unwrap();
        let h = marginal_histogram_entropy(&g, 16);
        assert_eq!(mi, h);
    }

    #[test]
    fn mi_with_constant_vector_is_zero() {
        let mut a = vec![0.0f32; 16];
        a[3] = 1.0;
        let b = vec![0.5f32; 16];
        assert_eq!(mutual_info(&a, &b, 8).unwrap(), 0.0);
    }

    #[test]
    fn mi_matches_brute_force_histogram_oracle() {
        let a = random_vec(200, 6);
        let b: Vec<f32> = a
            .iter()
            .zip(random_vec(200, 7))
            .map(|(&x, y)| 0.7 * x + 0.3 * y)
            .collect();
        let bins = 16usize;
        let got = mutual_info(&a, &b, bins).unwrap();

        // brute force: recount bins and evaluate the ratio form per cell
        let lo_hi = |xs: &[f32]| {
            (
                xs.iter().cloned().fold(f32::INFINITY, f32::min) as f64,
                xs.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64,
            )
        };
        let (alo, ahi) = lo_hi(&a);
        let (blo, bhi) = lo_hi(&b);
        let idx = |v: f32, lo: f64, hi: f64| -> usize {
            (((v as f64 - lo) / (hi - lo) * bins as f64) as usize).min(bins - 1)
        };
        let mut want = 0.0f64;
        for bi in 0..bins {
            for bj in 0..bins {
                let mut joint = 0usize;
                let mut ma = 0usize;
                let mut mb = 0usize;
                for (&x, &y) in a.iter().zip(&b) {
                    let (ia, ib) = (idx(x, alo, ahi), idx(y, blo, bhi));
                    if ia == bi && ib == bj {
                        joint += 1;
                    }
                    if ia == bi {
                        ma += 1;
                    }
                    if ib == bj {
                        mb += 1;
                    }
                }
                if joint == 0 {
                    continue;
                }
                let n = a.len() as f64;
                let pij = joint as f64 / n;
                want += pij * (pij / ((ma as f64 / n) * (mb as f64 / n))).ln();
            }
        }
        assert!(
            (got as f64 - want).abs() < 1e-6,
            "got {got}, brute force {want}"
        );
    }

    #[test]
    fn adaptive_threshold_means() {
        let (tmi, tcorr) = adaptive_thresholds(&[(0.2, 0.5), (0.4, -0.5)], 1.0, 1.0).unwrap();
        assert!((tmi - 0.3).abs() < 1e-7);
        assert!((tcorr - 0.5).abs() < 1e-7);
        assert!(adaptive_thresholds(&[], 1.0, 1.0).is_err());
    }

    #[test]
    fn scale_invariance_of_indicators() {
        let a = random_vec(96, 8);
        let b = random_vec(96, 9);
        let a2: Vec<f32> = a.iter().map(|v| v * 7.5).collect();
        let b2: Vec<f32> = b.iter().map(|v| v * 7.5).collect();
        assert!((pearson(&a, &b).unwrap() - pearson(&a2, &b2).unwrap()).abs() < 1e-6);
        assert_eq!(
            mutual_info(&a, &b, 16).unwrap(),
            mutual_info(&a2, &b2, 16).unwrap()
        );
    }

    #[test]
    fn no_flags_means_all_ones() {
        let mut grad = Tensor::zeros(&[1, 8, 6]);
        let mut rng = CogoRng::new(1, 0);
        rng.fill_uniform(grad.data_mut(), -1.0, 1.0);
        let cfg = SuppressionConfig {
            threshold_mode: ThresholdMode::Fixed {
                tau_mi: f32::INFINITY,
                tau_corr: f32::INFINITY,
            },
            ..Default::default()
        };
        let w = suppression_weights(&grad, &cfg, &mut CogoRng::new(2, 0)).unwrap();
        assert!(w.weights().iter().all(|&w| w == 1.0));
    }

    #[test]
    fn double_flagged_twice_hits_the_floor() {
        // alpha = 0.3, a channel flagged by both metrics in two of its pairs:
        // w = max(0.1, 1 - 0.3 * 4) = 0.1
        let alpha = 0.3f32;
        let s = alpha * 4.0;
        assert_eq!((1.0 - s).max(0.1), 0.1);

        // construct it: 3 identical nonconstant channels, all pairs sampled,
        // fixed thresholds that both metrics exceed
        let base = random_vec(64, 10);
        let mut data = Vec::new();
        for row in 0..64 {
            for _ch in 0..3 {
                data.push(base[row]);
            }
        }
        let grad = Tensor::new(vec![64, 3], data).unwrap();
        let cfg = SuppressionConfig {
            alpha,
            n_pairs: 3,
            threshold_mode: ThresholdMode::Fixed {
                tau_mi: FIXED_TAU_MI,
                tau_corr: FIXED_TAU_CORR,
            },
            ..Default::default()
        };
        let detail = suppression_detail(&grad, &cfg, &mut CogoRng::new(3, 0)).unwrap();
        // every pair identical: corr 1 > 0.7, MI = marginal entropy > 0.5
        for p in &detail.pairs {
            assert!(p.t_mi && p.t_corr, "pair {:?} not double-flagged", p);
            assert!((p.corr - 1.0).abs() < 1e-6);
            assert_eq!(p.mi, marginal_histogram_entropy(&base, cfg.mi_bins));
        }
        // each channel appears in 2 of the 3 pairs, double-flagged each time
        for &w in detail.weights.weights() {
            assert_eq!(w, 0.1);
        }
    }

    #[test]
    fn untouched_channels_keep_weight_one() {
        let mut grad = Tensor::zeros(&[32, 12]);
        let mut rng = CogoRng::new(4, 0);
        rng.fill_uniform(grad.data_mut(), -1.0, 1.0);
        let cfg = SuppressionConfig {
            n_pairs: 2,
            threshold_mode: ThresholdMode::Fixed {
                tau_mi: -1.0,
                tau_corr: -1.0,
            },
            ..Default::default()
        };
        let mut pair_rng = CogoRng::new(5, 0);
        let detail = suppression_detail(&grad, &cfg, &mut pair_rng).unwrap();
        let mut touched = vec![false; 12];
        for p in &detail.pairs {
            touched[p.i] = true;
            touched[p.j] = true;
        }
        for (ch, &w) in detail.weights.weights().iter().enumerate() {
            if touched[ch] {
                assert!(w < 1.0, "touched channel {ch} not suppressed");
            } else {
                assert_eq!(w, 1.0, "untouched channel {ch} modified");
            }
        }
    }

    #[test]
    fn raising_alpha_never_raises_weights() {
        let mut grad = Tensor::zeros(&[64, 8]);
        let mut rng = CogoRng::new(6, 0);
        rng.fill_uniform(grad.data_mut(), -1.0, 1.0);
        let base = SuppressionConfig {
            threshold_mode: ThresholdMode::Fixed {
                tau_mi: 0.05,
                tau_corr: 0.05,
            },
            ..Default::default()
        };
        let low = suppression_weights(&grad, &base, &mut CogoRng::new(7, 3)).unwrap();
        let high_cfg = SuppressionConfig {
            alpha: 0.6,
            ..base
        };
        let high = suppression_weights(&grad, &high_cfg, &mut CogoRng::new(7, 3)).unwrap();
        for (l, h) in low.weights().iter().zip(high.weights()) {
            assert!(h <= l);
        }
    }

    #[test]
    fn sigmoid_scale_values() {
        let a = vec![1.0f32, 0.0];
        let b = vec![0.0f32, 1.0];
        // equal norms -> sigmoid(1)
        let c = additional_token_scale(&a, &b, TokenScaleMode::AdaptiveSigmoid);
        assert!((c - 0.731_058_6).abs() < 1e-6, "sigma(1) = {c}");
        // zero additional gradient -> sigmoid(0) = 0.5
        let c = additional_token_scale(&[0.0, 0.0], &b, TokenScaleMode::AdaptiveSigmoid);
        assert_eq!(c, 0.5);
        // zero primary falls back to 0.5 instead of erroring
        let c = additional_token_scale(&a, &[0.0, 0.0], TokenScaleMode::AdaptiveSigmoid);
        assert_eq!(c, 0.5);
        // fixed mode passes through
        let c = additional_token_scale(&a, &b, TokenScaleMode::Fixed { c: 0.1 });
        assert_eq!(c, 0.1);
    }

    #[test]
    fn hook_is_identity_with_infinite_thresholds_and_no_extra_token() {
        let cfg = SuppressionConfig {
            threshold_mode: ThresholdMode::Fixed {
                tau_mi: f32::INFINITY,
                tau_corr: f32::INFINITY,
            },
            ..Default::default()
        };
        let layout = TokenLayout {
            num_patch_tokens: 4,
            class_token_index: 0,
            additional_token_index: None,
        };
        let hook = make_is_hook(&cfg, &layout, CogoRng::new(8, 0)).unwrap();
        let mut grad = Tensor::zeros(&[1, 5, 6]);
        let mut rng = CogoRng::new(9, 0);
        rng.fill_uniform(grad.data_mut(), -1.0, 1.0);
        let out = hook(&grad).unwrap();
        assert_eq!(out.data(), grad.data());
    }

    #[test]
    fn hook_preserves_shape_and_respects_floor() {
        let cfg = SuppressionConfig::default();
        let layout = TokenLayout {
            num_patch_tokens: 4,
            class_token_index: 0,
            additional_token_index: Some(1),
        };
        let hook = make_is_hook(&cfg, &layout, CogoRng::new(10, 0)).unwrap();
        let mut grad = Tensor::zeros(&[2, 6, 12]);
        let mut rng = CogoRng::new(11, 0);
        rng.fill_uniform(grad.data_mut(), -1.0, 1.0);
        let out = hook(&grad).unwrap();
        assert_eq!(out.shape(), grad.shape());
        // every output element shrinks by at most floor * smallest token scale
        for (o, g) in out.data().iter().zip(grad.data()) {
            assert!(o.abs() <= g.abs() + 1e-6);
            assert!(o.abs() >= g.abs() * 0.1 * 0.1 - 1e-6);
        }
    }

    #[test]
    fn hook_token_index_out_of_range_is_an_error() {
        let cfg = SuppressionConfig::default();
        let layout = TokenLayout {
            num_patch_tokens: 4,
            class_token_index: 0,
            additional_token_index: Some(9),
        };
        let hook = make_is_hook(&cfg, &layout, CogoRng::new(12, 0)).unwrap();
        let grad = Tensor::zeros(&[1, 5, 4]);
        assert!(hook(&grad).is_err());
    }

    #[test]
    fn hook_matches_hand_traced_algorithm() {
        // 4 channels, 6 tokens, additional token at index 1, fixed thresholds
        let channels = 4usize;
        let tokens = 6usize;
        let mut grad = Tensor::zeros(&[1, tokens, channels]);
        let mut rng = CogoRng::new(13, 0);
        rng.fill_uniform(grad.data_mut(), -1.0, 1.0);
        let cfg = SuppressionConfig {
            alpha: 0.3,
            n_pairs: 3,
            threshold_mode: ThresholdMode::Fixed {
                tau_mi: 0.4,
                tau_corr: 0.2,
            },
            token_scale_mode: TokenScaleMode::AdaptiveSigmoid,
            ..Default::default()
        };
        let layout = TokenLayout {
            num_patch_tokens: 4,
            class_token_index: 0,
            additional_token_index: Some(1),
        };
        let hook = make_is_hook(&cfg, &layout, CogoRng::new(14, 2)).unwrap();
        let got = hook(&grad).unwrap();

        // straight-line trace with a same-seeded rng
        let mut trace_rng = CogoRng::new(14, 2);
        let pairs = sample_pairs(channels, cfg.n_pairs, &mut trace_rng);
        let col = |ch: usize| -> Vec<f32> {
            grad.data()[ch..].iter().step_by(channels).copied().collect()
        };
        let mut w = vec![1.0f32; channels];
        for &(i, j) in &pairs {
            let mi = mutual_info(&col(i), &col(j), cfg.mi_bins).unwrap();
            let pc = pearson(&col(i), &col(j)).unwrap();
            let flags = (mi > 0.4) as u32 + (pc.abs() > 0.2) as u32;
            w[i] -= cfg.alpha * flags as f32;
            w[j] -= cfg.alpha * flags as f32;
        }
        for wi in &mut w {
            *wi = wi.max(0.1);
        }
        let mut want: Vec<f32> = grad
            .data()
            .iter()
            .enumerate()
            .map(|(idx, &v)| v * w[idx % channels])
            .collect();
        let norm = |xs: &[f32]| xs.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
        let add_row: Vec<f32> = want[channels..2 * channels].to_vec();
        let mut primary = want[..channels].to_vec();
        primary.extend_from_slice(&want[2 * channels..]);
        let ratio = norm(&add_row) / norm(&primary);
        let c = (1.0 / (1.0 + (-ratio).exp())) as f32;
        for v in &mut want[channels..2 * channels] {
            *v *= c;
        }
        assert_eq!(got.data(), want.as_slice());
    }
}
