//! Classification objectives for re-identification training on real and generated
//! images with possibly wrong assigned labels.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Floor applied to probabilities before powers and logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GceConfig {
    pub q: f64,
}

impl GceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.q > 0.0 && self.q <= 1.0) {
            return Err(Error::Config(format!("gce q must lie in (0, 1], got {}", self.q)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LsrConfig {
    pub alpha: f64,
    pub num_classes: usize,
}

impl LsrConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 {
            return Err(Error::Config("label smoothing needs at least one class".into()));
        }
        if !(0.0..1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("lsr alpha must lie in [0, 1), got {}", self.alpha)));
        }
        Ok(())
    }
}

/// `(1 - p_y^q) / q`.
pub fn gce_loss(probs: &[f64], y: usize, q: f64) -> Result<f64> {
    GceConfig { q }.validate()?;
    let p = *probs
        .get(y)
        .ok_or_else(|| Error::Contract(format!("label {y} outside {} classes", probs.len())))?;
    Ok((1.0 - p.max(PROB_FLOOR).powf(q)) / q)
}

/// Smoothed target: `alpha / K` everywhere plus `1 - alpha` on the labeled class.
pub fn lsr_smooth(y: usize, cfg: &LsrConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    let k = cfg.num_classes;
    if y >= k {
        return Err(Error::Contract(format!("label {y} outside {k} classes")));
    }
    let off = cfg.alpha / k as f64;
    let mut out = vec![off; k];
    out[y] = (1.0 - cfg.alpha) + off;
    Ok(out)
}

/// `-sum_j target_j ln p_j`.
pub fn soft_cross_entropy(probs: &[f64], target: &[f64]) -> f64 {
    probs
        .iter()
        .zip(target)
        .filter(|(_, &t)| t > 0.0)
        .map(|(&p, &t)| -t * p.max(PROB_FLOOR).ln())
        .sum()
}

pub fn cross_entropy(probs: &[f64], y: usize) -> f64 {
    -probs[y].max(PROB_FLOOR).ln()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|&z| (z - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossMode {
    #[serde(rename = "ce_only")]
    CeOnly,
    #[serde(rename = "gce")]
    Gce,
    #[serde(rename = "lsr")]
    Lsr,
    #[serde(rename = "gce+lsr")]
    GceLsr,
}

impl LossMode {
    pub const ALL: [LossMode; 4] = [LossMode::CeOnly, LossMode::Gce, LossMode::Lsr, LossMode::GceLsr];

    pub fn as_str(self) -> &'static str {
        match self {
            LossMode::CeOnly => "ce_only",
            LossMode::Gce => "gce",
            LossMode::Lsr => "lsr",
            LossMode::GceLsr => "gce+lsr",
        }
    }

    pub fn uses_gce(self) -> bool {
        matches!(self, LossMode::Gce | LossMode::GceLsr)
    }

    pub fn uses_lsr(self) -> bool {
        matches!(self, LossMode::Lsr | LossMode::GceLsr)
    }
}

impl fmt::Display for LossMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LossMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LossMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown loss mode `{s}` (ce_only, gce, lsr, gce+lsr)")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Real,
    Generated,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub mode: LossMode,
    pub q: f64,
    pub alpha: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            mode: LossMode::Lsr,
            q: 0.7,
            alpha: 0.1,
        }
    }
}

impl LossConfig {
    pub fn with_mode(self, mode: LossMode) -> Self {
        Self { mode, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        GceConfig { q: self.q }.validate()?;
        LsrConfig {
            alpha: self.alpha,
            num_classes: 1,
        }
        .validate()
    }
}

/// Loss of one item given its class probabilities.
pub fn item_loss(probs: &[f64], y: usize, prov: Provenance, cfg: &LossConfig) -> Result<f64> {
    if y >= probs.len() {
        return Err(Error::Contract(format!("label {y} outside {} classes", probs.len())));
    }
    if prov == Provenance::Real || cfg.mode == LossMode::CeOnly {
        return Ok(cross_entropy(probs, y));
    }
    let mut total = 0.0;
    if cfg.mode.uses_gce() {
        total += gce_loss(probs, y, cfg.q)?;
    }
    if cfg.mode.uses_lsr() {
        let target = lsr_smooth(
            y,
            &LsrConfig {
                alpha: cfg.alpha,
                num_classes: probs.len(),
            },
        )?;
        total += soft_cross_entropy(probs, &target);
    }
    Ok(total)
}

/// Mean of [`item_loss`] over rows of probabilities.
pub fn mixed_loss(probs: &[Vec<f64>], labels: &[usize], prov: &[Provenance], cfg: &LossConfig) -> Result<f64> {
    if probs.len() != labels.len() || probs.len() != prov.len() {
        return Err(Error::Contract("every item needs a label and a provenance flag".into()));
    }
    if probs.is_empty() {
        return Err(Error::Empty("loss over an empty batch".into()));
    }
    cfg.validate()?;
    let mut total = 0.0;
    for ((p, &y), &f) in probs.iter().zip(labels).zip(prov) {
        total += item_loss(p, y, f, cfg)?;
    }
    Ok(total / probs.len() as f64)
}

/// Batch loss and its gradient with respect to the logits.
#[derive(Debug, Clone, PartialEq)]
pub struct Objective {
    pub loss: f64,
    pub grad: Tensor<f32>,
}

/// [`mixed_loss`] on softmax(logits) (`[N, K]`) with the analytic logit gradient.
pub fn mixed_objective(logits: &Tensor<f32>, labels: &[usize], prov: &[Provenance], cfg: &LossConfig) -> Result<Objective> {
    if logits.shape().len() != 2 {
        return Err(Error::Shape(format!("logits must be [N, K], got {:?}", logits.shape())));
    }
    let (n, k) = (logits.dim(0), logits.dim(1));
    let probs: Vec<Vec<f64>> = (0..n)
        .map(|i| softmax(&logits.item(i).iter().map(|&v| v as f64).collect::<Vec<_>>()))
        .collect();
    let loss = mixed_loss(&probs, labels, prov, cfg)?;
    let mut grad = vec![0.0f32; n * k];
    for i in 0..n {
        let (p, y) = (&probs[i], labels[i]);
        let row = &mut grad[i * k..(i + 1) * k];
        let mut add_soft_ce = |target: &[f64]| {
            for j in 0..k {
                row[j] += ((p[j] - target[j]) / n as f64) as f32;
            }
        };
        let mut one_hot = vec![0.0; k];
        one_hot[y] = 1.0;
        if prov[i] == Provenance::Real || cfg.mode == LossMode::CeOnly {
            add_soft_ce(&one_hot);
            continue;
        }
        if cfg.mode.uses_lsr() {
            let target = lsr_smooth(y, &LsrConfig { alpha: cfg.alpha, num_classes: k })?;
            add_soft_ce(&target);
        }
        if cfg.mode.uses_gce() {
            // d/dz_j (1 - p_y^q) / q = -p_y^q (delta_yj - p_j)
            let pq = p[y].max(PROB_FLOOR).powf(cfg.q);
            for j in 0..k {
                let delta = if j == y { 1.0 } else { 0.0 };
                row[j] += (-pq * (delta - p[j]) / n as f64) as f32;
            }
        }
    }
    Ok(Objective {
        loss,
        grad: Tensor::from_vec(&[n, k], grad)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use Provenance::{Generated, Real};

    #[test]
    fn gce_hand_values() {
        assert_eq!(gce_loss(&[0.0, 1.0], 1, 0.3).unwrap(), 0.0);
        assert!((gce_loss(&[0.3, 0.7], 0, 1.0).unwrap() - 0.7).abs() < 1e-15);
        assert!((gce_loss(&[0.5, 0.5], 0, 1e-4).unwrap() - 0.5f64.ln().abs()).abs() < 1e-3);
    }

    #[test]
    fn gce_rejects_bad_q_and_survives_zero_probability() {
        assert!(gce_loss(&[1.0], 0, 0.0).is_err());
        assert!(gce_loss(&[1.0], 0, 1.5).is_err());
        let v = gce_loss(&[0.0, 1.0], 0, 1e-4).unwrap();
        assert!(v.is_finite());
    }

    #[test]
    fn lsr_hand_values() {
        let v = lsr_smooth(0, &LsrConfig { alpha: 0.1, num_classes: 4 }).unwrap();
        let want = [0.925, 0.025, 0.025, 0.025];
        for (a, b) in v.iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
        assert_eq!(lsr_smooth(2, &LsrConfig { alpha: 0.0, num_classes: 3 }).unwrap(), vec![0.0, 0.0, 1.0]);
        assert!(matches!(lsr_smooth(0, &LsrConfig { alpha: 0.1, num_classes: 0 }), Err(Error::Config(_))));
    }

    proptest! {
        #[test]
        fn lsr_is_a_distribution(k in 1usize..50, alpha in 0.0f64..0.999, y_frac in 0.0f64..1.0) {
            let y = ((y_frac * k as f64) as usize).min(k - 1);
            let v = lsr_smooth(y, &LsrConfig { alpha, num_classes: k }).unwrap();
            prop_assert!(v.iter().all(|&x| x >= 0.0));
            prop_assert!((v.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn gce_decreases_in_label_probability(q in 0.01f64..1.0, a in 0.01f64..0.99, b in 0.01f64..0.99) {
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            prop_assume!(hi - lo > 1e-6);
            prop_assert!(gce_loss(&[lo, 1.0 - lo], 0, q).unwrap() > gce_loss(&[hi, 1.0 - hi], 0, q).unwrap());
        }
    }

    #[test]
    fn gce_approaches_cross_entropy_on_a_grid() {
        for i in 0..=90 {
            let p = 0.05 + 0.01 * i as f64;
            let diff = (gce_loss(&[p, 1.0 - p], 0, 1e-4).unwrap() + p.ln()).abs();
            assert!(diff <= 1e-3, "p = {p}: {diff}");
        }
    }

    #[test]
    fn real_items_always_use_cross_entropy() {
        let probs = vec![vec![0.7, 0.2, 0.1], vec![0.1, 0.6, 0.3]];
        let labels = [0, 2];
        let plain = (-(0.7f64.ln()) - 0.3f64.ln()) / 2.0;
        for mode in LossMode::ALL {
            let cfg = LossConfig::default().with_mode(mode);
            let v = mixed_loss(&probs, &labels, &[Real, Real], &cfg).unwrap();
            assert!((v - plain).abs() < 1e-12, "{mode}");
        }
    }

    #[test]
    fn generated_gce_at_unit_q_is_mean_absolute_error() {
        let probs = vec![vec![0.7, 0.3], vec![0.4, 0.6]];
        let cfg = LossConfig { mode: LossMode::Gce, q: 1.0, alpha: 0.1 };
        let v = mixed_loss(&probs, &[0, 0], &[Generated, Generated], &cfg).unwrap();
        assert!((v - (0.3 + 0.6) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn mixed_batch_matches_hand_sum() {
        let probs = vec![vec![0.5, 0.5], vec![0.8, 0.2], vec![0.25, 0.75], vec![0.9, 0.1]];
        let labels = [0, 0, 1, 0];
        let prov = [Real, Real, Generated, Generated];
        let cfg = LossConfig { mode: LossMode::GceLsr, q: 0.5, alpha: 0.2 };
        // smoothed targets for K = 2, alpha = 0.2: 0.9 on the label, 0.1 elsewhere
        let gen = |p: f64, other: f64| (1.0 - p.sqrt()) / 0.5 - 0.9 * p.ln() - 0.1 * other.ln();
        let want = (-(0.5f64.ln()) - 0.8f64.ln() + gen(0.75, 0.25) + gen(0.9, 0.1)) / 4.0;
        let v = mixed_loss(&probs, &labels, &prov, &cfg).unwrap();
        assert!((v - want).abs() < 1e-12);
    }

    #[test]
    fn missing_flags_are_a_contract_violation() {
        let probs = vec![vec![0.5, 0.5]; 2];
        let r = mixed_loss(&probs, &[0, 1], &[Real], &LossConfig::default());
        assert!(matches!(r, Err(Error::Contract(_))));
    }

    #[test]
    fn logit_gradients_match_finite_differences() {
        let logits = Tensor::from_vec(&[3, 4], vec![0.3, -1.2, 0.8, 0.1, 1.5, 0.2, -0.4, 0.0, -0.7, 0.9, 0.4, -0.2]).unwrap();
        let labels = [2, 0, 1];
        let prov = [Real, Generated, Generated];
        for mode in LossMode::ALL {
            let cfg = LossConfig { mode, q: 0.7, alpha: 0.1 };
            let obj = mixed_objective(&logits, &labels, &prov, &cfg).unwrap();
            let f = |z: &[f64]| {
                let probs: Vec<Vec<f64>> = z.chunks(4).map(softmax).collect();
                mixed_loss(&probs, &labels, &prov, &cfg).unwrap()
            };
            let base: Vec<f64> = logits.data().iter().map(|&v| v as f64).collect();
            for i in 0..base.len() {
                let h = 1e-6;
                let (mut up, mut dn) = (base.clone(), base.clone());
                up[i] += h;
                dn[i] -= h;
                let fd = (f(&up) - f(&dn)) / (2.0 * h);
                let an = obj.grad.data()[i] as f64;
                assert!((fd - an).abs() < 1e-5, "{mode} [{i}]: {fd} vs {an}");
            }
        }
    }

    #[test]
    fn modes_parse_from_names() {
        for m in LossMode::ALL {
            assert_eq!(m.as_str().parse::<LossMode>().unwrap(), m);
        }
        assert!("mae".parse::<LossMode>().is_err());
    }
}
