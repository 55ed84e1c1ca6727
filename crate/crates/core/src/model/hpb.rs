use rand::Rng;

use super::layers::{conv, init_conv};
use super::params::{Bound, ParamStore};
use crate::error::TensorError;
use crate::tensor::{Scalar, Var};

/// A convolutional stage applied to head tokens laid out as channel maps
/// `[B,C,rows,cols]`. Output has the input's shape.
pub trait GridFeatureExtractor {
    fn init<T: Scalar>(&self, store: &mut ParamStore<T>, prefix: &str, channels: usize, rng: &mut impl Rng);

    fn forward<'t, T: Scalar>(&self, p: &Bound<'t, T>, prefix: &str, x: Var<'t, T>) -> Result<Var<'t, T>, TensorError>;
}

/// Simplified high preserving block.
///
/// ```text
/// f  = in_conv(x)                      3x3, C -> W
/// hf = f - up(avgpool2(f))             high-frequency residual
/// r  = gelu(reduce(f))                 3x3 stride 2
/// r  = r + gelu(body_j(r))             j = 0..blocks
/// y  = x + out_conv(up(r) + hf)        1x1, W -> C, zero-initialized
/// ```
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Hpb {
    pub width: usize,
    pub blocks: usize,
}

impl GridFeatureExtractor for Hpb {
    fn init<T: Scalar>(&self, store: &mut ParamStore<T>, prefix: &str, channels: usize, rng: &mut impl Rng) {
        let w = self.width;
        init_conv(store, &format!("{prefix}.in_conv"), channels, w, 3, false, rng);
        init_conv(store, &format!("{prefix}.reduce"), w, w, 3, false, rng);
        for j in 0..self.blocks {
            init_conv(store, &format!("{prefix}.body{j}"), w, w, 3, false, rng);
        }
        init_conv(store, &format!("{prefix}.out_conv"), w, channels, 1, true, rng);
    }

    fn forward<'t, T: Scalar>(&self, p: &Bound<'t, T>, prefix: &str, x: Var<'t, T>) -> Result<Var<'t, T>, TensorError> {
        let run = || -> Result<Var<'t, T>, TensorError> {
            let s = x.shape();
            let (rows, cols) = (s[2], s[3]);
            let f = conv(p, &format!("{prefix}.in_conv"), x, 1, 1)?;
            let blurred = f.downsample_area(2)?.interpolate_nearest(rows, cols)?;
            let hf = f.sub(blurred)?;
            let mut r = conv(p, &format!("{prefix}.reduce"), f, 2, 1)?.gelu()?;
            for j in 0..self.blocks {
                r = r.add(conv(p, &format!("{prefix}.body{j}"), r, 1, 1)?.gelu()?)?;
            }
            let merged = r.interpolate_nearest(rows, cols)?.add(hf)?;
            x.add(conv(p, &format!("{prefix}.out_conv"), merged, 1, 0)?)
        };
        run().map_err(|e| e.within(prefix))
    }
}
