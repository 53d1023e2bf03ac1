//! Image batches and modality tags.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Modality tag fed to the denoiser.
///
/// `Null` selects the unconditional guidance branch and never labels data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModalityIndicator {
    Visible,
    Infrared,
    Null,
}

impl ModalityIndicator {
    /// Row of the indicator embedding table (`visible = 0`, `infrared = 1`, null = 2).
    pub fn index(self) -> usize {
        match self {
            ModalityIndicator::Visible => 0,
            ModalityIndicator::Infrared => 1,
            ModalityIndicator::Null => 2,
        }
    }

    pub fn is_data_modality(self) -> bool {
        self != ModalityIndicator::Null
    }

    /// The other data modality; `Null` maps to itself.
    pub fn flipped(self) -> Self {
        match self {
            ModalityIndicator::Visible => ModalityIndicator::Infrared,
            ModalityIndicator::Infrared => ModalityIndicator::Visible,
            ModalityIndicator::Null => ModalityIndicator::Null,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ModalityIndicator::Visible => "visible",
            ModalityIndicator::Infrared => "infrared",
            ModalityIndicator::Null => "null",
        }
    }
}

impl fmt::Display for ModalityIndicator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModalityIndicator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "visible" | "vis" | "rgb" => Ok(ModalityIndicator::Visible),
            "infrared" | "ir" => Ok(ModalityIndicator::Infrared),
            "null" | "none" => Ok(ModalityIndicator::Null),
            other => Err(Error::Config(format!("unknown modality `{other}`"))),
        }
    }
}

/// `[batch, channels, height, width]` images in `[-1, 1]` with one modality tag per item.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBatch {
    pub data: Tensor<f32>,
    pub modality: Vec<ModalityIndicator>,
}

impl ImageBatch {
    pub fn new(data: Tensor<f32>, modality: Vec<ModalityIndicator>) -> Result<Self> {
        let shape = data.shape();
        if shape.len() != 4 {
            return Err(Error::Shape(format!("image batch must be 4-D, got {shape:?}")));
        }
        if !matches!(shape[1], 1 | 3) {
            return Err(Error::Shape(format!("image channels must be 1 or 3, got {}", shape[1])));
        }
        if modality.len() != shape[0] {
            return Err(Error::Shape(format!(
                "{} modality tags for {} images",
                modality.len(),
                shape[0]
            )));
        }
        if !data.all_finite() {
            return Err(Error::Contract("image batch contains non-finite values".into()));
        }
        Ok(Self { data, modality })
    }

    pub fn len(&self) -> usize {
        self.data.dim(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn channels(&self) -> usize {
        self.data.dim(1)
    }

    pub fn height(&self) -> usize {
        self.data.dim(2)
    }

    pub fn width(&self) -> usize {
        self.data.dim(3)
    }

    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            data: self.data.select(indices),
            modality: indices.iter().map(|&i| self.modality[i]).collect(),
        }
    }

    pub fn concat(parts: &[&ImageBatch]) -> Result<Self> {
        let tensors: Vec<&Tensor<f32>> = parts.iter().map(|b| &b.data).collect();
        let data = Tensor::stack(&tensors)?;
        let modality = parts.iter().flat_map(|b| b.modality.iter().copied()).collect();
        Ok(Self { data, modality })
    }

    /// Channel-mean luminance as a `[batch, 1, height, width]` tensor.
    pub fn luminance(&self) -> Tensor<f32> {
        luminance(&self.data)
    }
}

/// Channel mean for 3-channel input, identity for 1-channel input.
pub fn luminance(data: &Tensor<f32>) -> Tensor<f32> {
    let s = data.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    if c == 1 {
        return data.clone();
    }
    let plane = h * w;
    let inv = 1.0 / c as f32;
    let mut out = Tensor::zeros(&[n, 1, h, w]);
    for i in 0..n {
        let src = data.item(i);
        let dst = out.item_mut(i);
        for (p, d) in dst.iter_mut().enumerate() {
            *d = (0..c).map(|ch| src[ch * plane + p]).sum::<f32>() * inv;
        }
    }
    out
}
