//! Small tensor building blocks shared by the backbone, neck and head.

use candle_core::{Tensor, D};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::params::ParamStore;

/// Registers `{name}.weight` (out, in, k, k) and a zero `{name}.bias`.
/// `gain` scales the fan-in uniform bound: 6 suits SiLU layers, 3 linear
/// outputs.
pub fn init_conv(
    ps: &mut ParamStore,
    name: &str,
    c_in: usize,
    c_out: usize,
    k: usize,
    gain: f64,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let bound = (gain / (c_in * k * k) as f64).sqrt();
    ps.uniform(&format!("{name}.weight"), &[c_out, c_in, k, k], bound, rng)?;
    ps.constant(&format!("{name}.bias"), &[c_out], 0.0)
}

/// Same-padded convolution plus bias.
pub fn conv(ps: &ParamStore, name: &str, x: &Tensor, stride: usize) -> Result<Tensor> {
    let w = ps.get(&format!("{name}.weight"))?;
    let b = ps.get(&format!("{name}.bias"))?;
    crate::conv::conv2d(x, w, b, stride)
}

pub fn conv_silu(ps: &ParamStore, name: &str, x: &Tensor, stride: usize) -> Result<Tensor> {
    Ok(conv(ps, name, x, stride)?.silu()?)
}

/// log(1 + e^x) without overflow.
pub fn softplus(x: &Tensor) -> Result<Tensor> {
    Ok((x.relu()? + (x.abs()?.neg()?.exp()? + 1.0)?.log()?)?)
}

/// Elementwise binary cross-entropy on logits.
pub fn bce_with_logits(logits: &Tensor, targets: &Tensor) -> Result<Tensor> {
    Ok(((logits.relu()? - (logits * targets)?)? + (logits.abs()?.neg()?.exp()? + 1.0)?.log()?)?)
}

/// Computed as (1 + tanh(x/2)) / 2 so that neither pass overflows.
pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok((((x * 0.5)?.tanh()? + 1.0)? * 0.5)?)
}

pub use crate::conv::upsample2;

pub fn sum_all_scalar(x: &Tensor) -> Result<Tensor> {
    Ok(x.flatten_all()?.sum(D::Minus1)?)
}

pub fn inverse_softplus(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

pub fn softplus_f64(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

