//! Weight-shared convolutional feature extractor.
//!
//! Four 3x3 conv blocks; blocks 1-3 downsample by two and block 4 uses
//! dilation 2, so the output grid is the input at stride 8. Support and query
//! images run through the same parameter leaves of one graph.

use ndarray::{Array2, Array3, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{self, Params};

pub const STRIDE: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Support,
    Query,
}

/// Encoder output for one image: `[C, H/8, W/8]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub values: Array3<f64>,
    pub stride: usize,
    pub source: Source,
}

impl FeatureMap {
    pub fn channels(&self) -> usize {
        self.values.dim().0
    }

    pub fn grid(&self) -> (usize, usize) {
        let (_, h, w) = self.values.dim();
        (h, w)
    }

    /// Features flattened to `[C, H*W]`.
    pub fn flat(&self) -> Array2<f64> {
        let (c, h, w) = self.values.dim();
        self.values
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((c, h * w))
            .expect("contiguous")
    }
}

/// Output grid size for an input side of `n`.
pub fn feature_side(n: usize) -> usize {
    n.div_ceil(STRIDE)
}

struct Block {
    cin: usize,
    cout: usize,
    stride: usize,
    dilation: usize,
    relu: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Encoder {
    pub width: usize,
}

impl Encoder {
    pub fn new(width: usize) -> Result<Self> {
        if width < 2 {
            return Err(Error::Parameter(format!("encoder width {width} too small")));
        }
        Ok(Encoder { width })
    }

    fn blocks(&self) -> [Block; 4] {
        let c = self.width;
        let c1 = (c / 2).max(1);
        [
            Block { cin: 1, cout: c1, stride: 2, dilation: 1, relu: true },
            Block { cin: c1, cout: c, stride: 2, dilation: 1, relu: true },
            Block { cin: c, cout: c, stride: 2, dilation: 1, relu: true },
            Block { cin: c, cout: c, stride: 1, dilation: 2, relu: false },
        ]
    }

    /// He-initialised weights, zero biases.
    pub fn init(&self, rng: &mut impl Rng) -> Params {
        let mut p = Params::new();
        for (i, b) in self.blocks().iter().enumerate() {
            let fan_in = (b.cin * 9) as f64;
            let gain = if b.relu { 2.0 } else { 1.0 };
            p.insert(
                format!("encoder.conv{}.weight", i + 1),
                params::normal(rng, &[b.cout, b.cin, 3, 3], (gain / fan_in).sqrt()),
            );
            p.insert(format!("encoder.conv{}.bias", i + 1), params::zeros(&[b.cout, 1, 1]));
        }
        p
    }

    /// Record the forward pass of `image` on `g`; returns `[C, h, w]`.
    pub fn forward(&self, g: &mut Graph, params: &Params, image: &Array2<f64>) -> Result<Var> {
        if image.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input("image contains non-finite values".into()));
        }
        let x = image.clone().insert_axis(Axis(0)).into_dyn();
        let mut h = g.constant(x);
        for (i, b) in self.blocks().iter().enumerate() {
            let w = g.param(params, &format!("encoder.conv{}.weight", i + 1))?;
            let bias = g.param(params, &format!("encoder.conv{}.bias", i + 1))?;
            let y = g.conv2d(h, w, b.stride, b.dilation, b.dilation)?;
            h = g.add(y, bias)?;
            if b.relu {
                h = g.relu(h);
            }
        }
        Ok(h)
    }

    /// Inference-mode feature extraction.
    pub fn extract_features(
        &self,
        params: &Params,
        image: &Array2<f64>,
        source: Source,
    ) -> Result<FeatureMap> {
        let mut g = Graph::new();
        let v = self.forward(&mut g, params, image)?;
        let values = g
            .value(v)
            .clone()
            .into_dimensionality::<ndarray::Ix3>()
            .map_err(|e| Error::Input(e.to_string()))?;
        if values.iter().any(|x| !x.is_finite()) {
            return Err(Error::numeric("encoder"));
        }
        Ok(FeatureMap {
            values,
            stride: STRIDE,
            source,
        })
    }

    /// Zero the last block's weights and bias (used by tests and adapters).
    pub fn zero_final_layer(params: &mut Params) {
        for name in ["encoder.conv4.weight", "encoder.conv4.bias"] {
            if let Some(t) = params.get_mut(name) {
                t.fill(0.0);
            }
        }
    }
}

/// Flatten a `[C, h, w]` feature node to `[C, h*w]`.
pub fn flatten(g: &mut Graph, feats: Var) -> Result<Var> {
    let s = g.shape(feats).to_vec();
    if s.len() != 3 {
        return Err(Error::Input(format!("feature map of shape {s:?}")));
    }
    g.reshape(feats, &[s[0], s[1] * s[2]])
}
