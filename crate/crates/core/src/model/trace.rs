use std::collections::BTreeSet;

use ndarray::{s, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::perturb::BlurSpec;

/// Optional modification of the attention computation during a forward pass.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Intervention {
    #[default]
    None,
    /// Replace the I2T block of each listed layer by its Gaussian blur.
    BlurI2t {
        layers: BTreeSet<usize>,
        #[serde(flatten)]
        blur: BlurSpec,
    },
}

impl Intervention {
    pub fn blur(layers: impl IntoIterator<Item = usize>, blur: BlurSpec) -> Self {
        Intervention::BlurI2t {
            layers: layers.into_iter().collect(),
            blur,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Intervention::None => Ok(()),
            Intervention::BlurI2t { blur, .. } => blur.validate(),
        }
    }

    /// Blur to apply at `layer`, if any.
    pub fn at(&self, layer: usize) -> Option<&BlurSpec> {
        match self {
            Intervention::BlurI2t { layers, blur } if layers.contains(&layer) => Some(blur),
            _ => None,
        }
    }
}

/// Captured attention of one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerRecord {
    /// Post-softmax (and post-intervention) joint attention per head, `(hw+l) × (hw+l)`.
    pub heads: Vec<Array2<f64>>,
    /// Pre-softmax image-to-text scores per head (`hw × l`).
    pub i2t_logits: Option<Vec<Array2<f64>>>,
    /// Value projections of all `hw + l` tokens (`(hw+l) × d`).
    pub values: Option<Array2<f64>>,
}

/// Attention captured across all layers of one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionTrace {
    pub grid_h: usize,
    pub grid_w: usize,
    pub text_len: usize,
    pub layers: Vec<LayerRecord>,
    /// `true` at `<pad>` positions of the prompt.
    pub pad_mask: Vec<bool>,
}

impl AttentionTrace {
    pub fn hw(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn num_heads(&self) -> usize {
        self.layers.first().map_or(0, |l| l.heads.len())
    }

    pub fn check_layer(&self, layer: usize) -> Result<&LayerRecord> {
        self.layers
            .get(layer)
            .ok_or_else(|| Error::Input(format!("layer {layer} out of range ({} layers)", self.layers.len())))
    }

    fn head(&self, layer: usize, head: usize) -> &Array2<f64> {
        &self.layers[layer].heads[head]
    }

    pub fn i2i(&self, layer: usize, head: usize) -> ArrayView2<'_, f64> {
        let hw = self.hw();
        self.head(layer, head).slice(s![..hw, ..hw])
    }

    pub fn i2t(&self, layer: usize, head: usize) -> ArrayView2<'_, f64> {
        let hw = self.hw();
        self.head(layer, head).slice(s![..hw, hw..])
    }

    pub fn t2i(&self, layer: usize, head: usize) -> ArrayView2<'_, f64> {
        let hw = self.hw();
        self.head(layer, head).slice(s![hw.., ..hw])
    }

    pub fn t2t(&self, layer: usize, head: usize) -> ArrayView2<'_, f64> {
        let hw = self.hw();
        self.head(layer, head).slice(s![hw.., hw..])
    }
}
