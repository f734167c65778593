//! Stand-in convolutional backbone with an FPN top, plus coordinate
//! injection.
//!
//! Four stride-2 blocks (3×3 conv → layer norm over channels → relu), tapped
//! after strides 4, 8, and 16. A 1×1 lateral projects each tap to the shared
//! channel width and the top-down pathway adds nearest-neighbor-upsampled
//! coarser levels, as in a standard FPN.

use fewshape_numerics::rng::Rng;
use fewshape_numerics::{Graph, Tensor, Var};

use crate::error::{Error, Result};
use crate::nn::{Bound, Conv, LayerNorm, ParamStore};

/// The pyramid downsampling factors, finest first.
pub const PYRAMID_DIVISORS: [usize; 3] = [4, 8, 16];

struct Block {
    conv: Conv,
    norm: LayerNorm,
}

pub struct Backbone {
    blocks: Vec<Block>,
    laterals: [Conv; 3],
    coord_convs: [Conv; 3],
    pub channels: usize,
}

impl Backbone {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, channels: usize) -> Self {
        let c = channels;
        let widths = [(c / 4).max(4), (c / 2).max(4), c, c];
        let mut blocks = Vec::with_capacity(4);
        let mut cin = 3;
        for (i, &cout) in widths.iter().enumerate() {
            let conv = Conv::new(store, rng, &format!("backbone/block{i}/conv"), 3, 3, cin, cout, 2, 1);
            let norm = LayerNorm::new(store, &format!("backbone/block{i}/norm"), cout);
            blocks.push(Block { conv, norm });
            cin = cout;
        }
        let laterals = [
            Conv::new(store, rng, "backbone/lateral0", 1, 1, widths[1], c, 1, 0),
            Conv::new(store, rng, "backbone/lateral1", 1, 1, widths[2], c, 1, 0),
            Conv::new(store, rng, "backbone/lateral2", 1, 1, widths[3], c, 1, 0),
        ];
        let coord_convs = [
            Conv::new(store, rng, "backbone/coord0", 1, 1, c + 2, c, 1, 0),
            Conv::new(store, rng, "backbone/coord1", 1, 1, c + 2, c, 1, 0),
            Conv::new(store, rng, "backbone/coord2", 1, 1, c + 2, c, 1, 0),
        ];
        Self {
            blocks,
            laterals,
            coord_convs,
            channels: c,
        }
    }

    /// Produces the 3-level pyramid (1/4, 1/8, 1/16; finest first).
    pub fn forward(&self, g: &Graph, bp: &Bound, image: Var) -> Result<[Var; 3]> {
        let shape = g.shape(image);
        if shape.len() != 3 || shape[2] != 3 || shape[0] % 32 != 0 || shape[1] % 32 != 0 {
            return Err(Error::BadImageShape(shape));
        }
        let mut x = image;
        let mut taps = Vec::with_capacity(3);
        for (i, block) in self.blocks.iter().enumerate() {
            x = block.conv.apply(g, bp, x)?;
            x = block.norm.apply(g, bp, x)?;
            x = g.relu(x);
            if i >= 1 {
                taps.push(x);
            }
        }
        let l0 = self.laterals[0].apply(g, bp, taps[0])?;
        let l1 = self.laterals[1].apply(g, bp, taps[1])?;
        let l2 = self.laterals[2].apply(g, bp, taps[2])?;
        let p2 = l2;
        let p1 = g.add(l1, g.upsample_nearest2(p2)?)?;
        let p0 = g.add(l0, g.upsample_nearest2(p1)?)?;
        Ok([p0, p1, p2])
    }

    /// Concatenates normalized coordinate channels and projects back to the
    /// pyramid width with a per-level 1×1 convolution.
    pub fn inject_coords(&self, g: &Graph, bp: &Bound, level: usize, f: Var) -> Result<Var> {
        let shape = g.shape(f);
        let coords = g.constant(coord_channels(shape[0], shape[1]));
        let stacked = g.concat(&[f, coords], 2)?;
        self.coord_convs[level].apply(g, bp, stacked)
    }
}

/// Two planes of coordinates spanning `[−1, 1]` linearly along each axis
/// (x plane first). A single-cell axis maps to 0.
pub fn coord_channels(h: usize, w: usize) -> Tensor {
    let axis = |idx: usize, len: usize| -> f64 {
        if len <= 1 {
            0.0
        } else {
            2.0 * idx as f64 / (len - 1) as f64 - 1.0
        }
    };
    Tensor::from_fn(&[h, w, 2], |flat| {
        let ch = flat % 2;
        let x = (flat / 2) % w;
        let y = flat / (2 * w);
        if ch == 0 {
            axis(x, w)
        } else {
            axis(y, h)
        }
    })
}
