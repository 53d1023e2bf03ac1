//! Condition images: high-pass residuals, gradient-magnitude edges and the low-pass
//! reference arm used for modality-gap comparisons.
//!
//! All filters operate on luminance (channel mean) except [`low_pass_reference`], which
//! blurs each channel. Convolutions use reflect padding (`x[-1] = x[1]`).

use serde::{Deserialize, Serialize};

use crate::batch::{luminance, ImageBatch, ModalityIndicator};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterKind {
    HighpassGaussian,
    EdgeGradient,
    LowpassGaussian,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FilterConfig {
    pub kind: FilterKind,
    /// Gaussian standard deviation in pixels.
    pub sigma: f64,
    /// Rescale high-pass output to unit max-abs.
    pub normalize: bool,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            kind: FilterKind::HighpassGaussian,
            sigma: 2.0,
            normalize: true,
        }
    }
}

impl FilterConfig {
    pub const REFERENCE_HEIGHT: usize = 32;

    pub fn highpass(sigma: f64) -> Self {
        Self {
            kind: FilterKind::HighpassGaussian,
            sigma,
            normalize: false,
        }
    }

    pub fn lowpass(sigma: f64) -> Self {
        Self {
            kind: FilterKind::LowpassGaussian,
            sigma,
            normalize: false,
        }
    }

    pub fn edge() -> Self {
        Self {
            kind: FilterKind::EdgeGradient,
            sigma: 1.0,
            normalize: true,
        }
    }

    /// Default high-pass filter with sigma scaled from 2 px at 32 rows.
    pub fn for_height(height: usize) -> Self {
        Self {
            sigma: 2.0 * height as f64 / Self::REFERENCE_HEIGHT as f64,
            ..Self::default()
        }
    }

    pub fn with_kind(self, kind: FilterKind) -> Self {
        Self { kind, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma.is_finite() && self.sigma > 0.0) {
            return Err(Error::Config(format!("filter sigma must be positive, got {}", self.sigma)));
        }
        Ok(())
    }

    fn expect_kind(&self, kind: FilterKind) -> Result<()> {
        self.validate()?;
        if self.kind != kind {
            return Err(Error::Config(format!(
                "filter kind {:?} where {kind:?} is required",
                self.kind
            )));
        }
        Ok(())
    }
}

/// Single-channel condition images `[batch, 1, height, width]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionBatch {
    pub data: Tensor<f32>,
    pub source_modality: Vec<ModalityIndicator>,
}

impl ConditionBatch {
    pub fn len(&self) -> usize {
        self.data.dim(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            data: self.data.select(indices),
            source_modality: indices.iter().map(|&i| self.source_modality[i]).collect(),
        }
    }
}

fn gaussian_kernel(sigma: f64) -> Vec<f32> {
    let radius = (3.0 * sigma).ceil().max(1.0) as isize;
    let weights: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = weights.iter().sum();
    weights.iter().map(|w| (w / total) as f32).collect()
}

/// Mirror an out-of-range index back into `[0, n)` without repeating the edge sample.
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut m = i.rem_euclid(period);
    if m >= n as isize {
        m = period - m;
    }
    m as usize
}

fn blur_plane(src: &[f32], h: usize, w: usize, kernel: &[f32], dst: &mut [f32]) {
    let r = (kernel.len() / 2) as isize;
    let mut tmp = vec![0.0f32; h * w];
    for y in 0..h {
        let row = &src[y * w..(y + 1) * w];
        for x in 0..w {
            tmp[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, &kv)| kv * row[reflect(x as isize + k as isize - r, w)])
                .sum();
        }
    }
    for y in 0..h {
        for x in 0..w {
            dst[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, &kv)| kv * tmp[reflect(y as isize + k as isize - r, h) * w + x])
                .sum();
        }
    }
}

/// Separable Gaussian blur of every channel plane.
pub fn gaussian_blur(data: &Tensor<f32>, sigma: f64) -> Tensor<f32> {
    let s = data.shape();
    let (h, w) = (s[2], s[3]);
    let kernel = gaussian_kernel(sigma);
    let mut out = Tensor::zeros(s);
    for (src, dst) in data.data().chunks(h * w).zip(out.data_mut().chunks_mut(h * w)) {
        blur_plane(src, h, w, &kernel, dst);
    }
    out
}

/// `L(x) - blur(L(x))`, optionally rescaled to unit max-abs, clipped to `[-1, 1]`.
pub fn high_pass_condition(x: &ImageBatch, cfg: &FilterConfig) -> Result<ConditionBatch> {
    cfg.expect_kind(FilterKind::HighpassGaussian)?;
    Ok(ConditionBatch {
        data: high_pass_tensor(&x.data, cfg.sigma, cfg.normalize),
        source_modality: x.modality.clone(),
    })
}

/// High-pass residual of a raw `[N, C, H, W]` tensor (luminance first).
pub fn high_pass_tensor(data: &Tensor<f32>, sigma: f64, normalize: bool) -> Tensor<f32> {
    let lum = luminance(data);
    let low = gaussian_blur(&lum, sigma);
    let mut out = lum.zip_map(&low, |a, b| a - b).expect("same shape");
    let plane = out.item_len();
    for item in out.data_mut().chunks_mut(plane) {
        if normalize {
            let m = item.iter().fold(0.0f32, |m, v| m.max(v.abs()));
            if m > 0.0 {
                item.iter_mut().for_each(|v| *v /= m);
            }
        }
        item.iter_mut().for_each(|v| *v = v.clamp(-1.0, 1.0));
    }
    out
}

/// Gradient magnitude of luminance from central differences, scaled to `[0, 1]` per
/// image and shifted to `[-1, 1]`.
pub fn edge_condition(x: &ImageBatch, cfg: &FilterConfig) -> Result<ConditionBatch> {
    cfg.expect_kind(FilterKind::EdgeGradient)?;
    let lum = luminance(&x.data);
    let s = lum.shape().to_vec();
    let (h, w) = (s[2], s[3]);
    let mut out = Tensor::zeros(&s);
    for (src, dst) in lum.data().chunks(h * w).zip(out.data_mut().chunks_mut(h * w)) {
        for y in 0..h {
            for xx in 0..w {
                let at = |yy: isize, xq: isize| src[reflect(yy, h) * w + reflect(xq, w)];
                let (yi, xi) = (y as isize, xx as isize);
                let gx = 0.5 * (at(yi, xi + 1) - at(yi, xi - 1));
                let gy = 0.5 * (at(yi + 1, xi) - at(yi - 1, xi));
                dst[y * w + xx] = (gx * gx + gy * gy).sqrt();
            }
        }
        let m = dst.iter().fold(0.0f32, |m, &v| m.max(v));
        for v in dst.iter_mut() {
            let unit = if m > 0.0 { *v / m } else { 0.0 };
            *v = 2.0 * unit - 1.0;
        }
    }
    Ok(ConditionBatch {
        data: out,
        source_modality: x.modality.clone(),
    })
}

/// Per-channel Gaussian blur, keeping color and intensity statistics.
pub fn low_pass_reference(x: &ImageBatch, cfg: &FilterConfig) -> Result<ImageBatch> {
    cfg.expect_kind(FilterKind::LowpassGaussian)?;
    Ok(ImageBatch {
        data: gaussian_blur(&x.data, cfg.sigma),
        modality: x.modality.clone(),
    })
}

/// Dispatches to the condition operator selected by `cfg.kind`.
pub fn condition(x: &ImageBatch, cfg: &FilterConfig) -> Result<ConditionBatch> {
    match cfg.kind {
        FilterKind::HighpassGaussian => high_pass_condition(x, cfg),
        FilterKind::EdgeGradient => edge_condition(x, cfg),
        FilterKind::LowpassGaussian => Err(Error::Config(
            "the low-pass filter is a comparison arm, not a condition".into(),
        )),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::batch::ModalityIndicator::Visible;

    fn batch(h: usize, w: usize, f: impl Fn(usize, usize) -> f32) -> ImageBatch {
        let mut data = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                data.push(f(y, x));
            }
        }
        ImageBatch::new(Tensor::from_vec(&[1, 1, h, w], data).unwrap(), vec![Visible]).unwrap()
    }

    #[test]
    fn reflect_indexing() {
        assert_eq!(reflect(-1, 5), 1);
        assert_eq!(reflect(-2, 5), 2);
        assert_eq!(reflect(5, 5), 3);
        assert_eq!(reflect(6, 5), 2);
        assert_eq!(reflect(3, 5), 3);
        assert_eq!(reflect(-9, 3), 1);
    }

    #[test]
    fn constant_image_gives_zero_high_pass_and_flat_edges() {
        let x = batch(8, 12, |_, _| 0.37);
        let hp = high_pass_condition(&x, &FilterConfig::default()).unwrap();
        assert!(hp.data.data().iter().all(|v| v.abs() < 1e-6));
        let e = edge_condition(&x, &FilterConfig::edge()).unwrap();
        assert!(e.data.data().iter().all(|&v| v == -1.0));
        let lp = low_pass_reference(&x, &FilterConfig::lowpass(2.0)).unwrap();
        assert!(lp.data.data().iter().all(|v| (v - 0.37).abs() < 1e-6));
    }

    #[test]
    fn non_positive_sigma_is_rejected() {
        let x = batch(4, 4, |_, _| 0.0);
        assert!(high_pass_condition(&x, &FilterConfig::highpass(0.0)).is_err());
        assert!(high_pass_condition(&x, &FilterConfig::highpass(-1.0)).is_err());
        assert!(high_pass_condition(&x, &FilterConfig::lowpass(1.0)).is_err());
    }

    /// Direct 1-D convolution of a step profile with reflect padding.
    fn step_profile_high_pass(w: usize, k: usize, sigma: f64) -> Vec<f64> {
        let r = (3.0 * sigma).ceil() as isize;
        let wts: Vec<f64> = (-r..=r).map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp()).collect();
        let z: f64 = wts.iter().sum();
        let profile = |i: isize| -> f64 {
            let j = reflect(i, w);
            if j >= k { 1.0 } else { -1.0 }
        };
        (0..w as isize)
            .map(|x| {
                let blur: f64 = (-r..=r).zip(&wts).map(|(d, wt)| wt / z * profile(x + d)).sum();
                profile(x) - blur
            })
            .collect()
    }

    #[test]
    fn step_edge_response_is_local_and_antisymmetric() {
        let (h, w, k, sigma) = (6, 40, 20, 2.0);
        let x = batch(h, w, |_, c| if c >= k { 1.0 } else { -1.0 });
        let hp = high_pass_condition(&x, &FilterConfig::highpass(sigma)).unwrap();
        let oracle = step_profile_high_pass(w, k, sigma);
        for y in 0..h {
            for (c, &want) in oracle.iter().enumerate() {
                let v = hp.data.data()[y * w + c] as f64;
                assert!((v - want).abs() < 1e-5, "col {c}: {v} vs {want}");
                let dist = (c as f64 + 0.5 - k as f64).abs();
                if dist > 3.0 * sigma {
                    assert!(v.abs() < 1e-6);
                }
            }
            for d in 0..10 {
                let left = hp.data.data()[y * w + k - 1 - d];
                let right = hp.data.data()[y * w + k + d];
                assert!((left + right).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn unit_step_edge_peaks_on_edge_columns() {
        let (h, w, k) = (5, 10, 4);
        let x = batch(h, w, |_, c| if c >= k { 1.0 } else { 0.0 });
        let e = edge_condition(&x, &FilterConfig::edge()).unwrap();
        // central differences: |L[c+1] - L[c-1]| / 2 = 0.5 at c = k-1 and c = k, else 0
        for y in 0..h {
            for c in 0..w {
                let v = e.data.data()[y * w + c];
                let want = if c == k - 1 || c == k { 1.0 } else { -1.0 };
                assert_eq!(v, want, "row {y} col {c}");
            }
        }
    }

    #[test]
    fn edge_map_rotates_with_input() {
        let (h, w) = (7, 9);
        let f = |y: usize, x: usize| ((y * 7 + x * 3) % 5) as f32 * 0.2 + if x > 4 { 0.3 } else { 0.0 };
        let x = batch(h, w, f);
        // rotate 90 degrees clockwise: out[y'][x'] = in[h-1-x'][y'], shape (w, h)
        let rot = batch(w, h, |yy, xx| f(h - 1 - xx, yy));
        let e = edge_condition(&x, &FilterConfig::edge()).unwrap();
        let er = edge_condition(&rot, &FilterConfig::edge()).unwrap();
        for yy in 0..w {
            for xx in 0..h {
                let a = er.data.data()[yy * h + xx];
                let b = e.data.data()[(h - 1 - xx) * w + yy];
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn low_pass_shrinks_white_noise_variance() {
        use rand::SeedableRng;
        use rand_distr::{Distribution, Normal};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let n = Normal::new(0.0f32, 0.3).unwrap();
        let data: Vec<f32> = (0..3 * 32 * 64).map(|_| n.sample(&mut rng)).collect();
        let x = ImageBatch::new(Tensor::from_vec(&[1, 3, 32, 64], data).unwrap(), vec![Visible]).unwrap();
        let lp = low_pass_reference(&x, &FilterConfig::lowpass(2.0)).unwrap();
        let var = |t: &Tensor<f32>| {
            let m = t.mean();
            t.data().iter().map(|v| (v - m) * (v - m)).sum::<f32>() / t.numel() as f32
        };
        assert!(var(&lp.data) < var(&x.data));
    }

    #[test]
    fn normalized_high_pass_has_unit_max_abs() {
        let x = batch(16, 16, |y, c| if (y / 4 + c / 4) % 2 == 0 { 0.5 } else { -0.1 });
        let hp = high_pass_condition(&x, &FilterConfig::default()).unwrap();
        assert!((hp.data.max_abs() - 1.0).abs() < 1e-6);
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(64))]

        #[test]
        fn high_and_low_pass_decompose_luminance(
            vals in proptest::collection::vec(-0.5f32..0.5, 12 * 20),
            sigma in 0.5f64..3.0,
        ) {
            let x = batch(12, 20, |y, c| vals[y * 20 + c]);
            let hp = high_pass_condition(&x, &FilterConfig::highpass(sigma)).unwrap();
            let lp = low_pass_reference(&x, &FilterConfig::lowpass(sigma)).unwrap();
            for ((a, b), v) in hp.data.data().iter().zip(lp.data.data()).zip(x.data.data()) {
                proptest::prop_assert!((a + b - v).abs() < 1e-5, "{} + {} vs {}", a, b, v);
            }
        }

        #[test]
        fn high_pass_is_shift_equivariant_away_from_borders(
            vals in proptest::collection::vec(-1.0f32..1.0, 20 * 32),
            sigma in 0.5f64..2.0,
            dy in 0usize..3,
            dx in 1usize..4,
        ) {
            let (h, w) = (20, 32);
            let f = |y: usize, c: usize| vals[y * w + c];
            let x = batch(h, w, f);
            let shifted = batch(h, w, |y, c| f((y + h - dy) % h, (c + w - dx) % w));
            let cfg = FilterConfig::highpass(sigma);
            let a = high_pass_condition(&x, &cfg).unwrap();
            let b = high_pass_condition(&shifted, &cfg).unwrap();
            let r = (3.0 * sigma).ceil() as usize;
            for y in (dy + r)..(h - r) {
                for c in (dx + r)..(w - r) {
                    let va = a.data.data()[(y - dy) * w + c - dx];
                    let vb = b.data.data()[y * w + c];
                    proptest::prop_assert!((va - vb).abs() < 1e-5, "({}, {})", y, c);
                }
            }
        }
    }
}
