//! Directional state-space attention. Each of the four scan directions
//! runs a diagonal linear recurrence per channel,
//! `h_t = exp(δa) h_{t-1} + δ b x_t`, `y_t = c · h_t`,
//! with `a = -softplus(â)` and `δ = softplus(δ̂)` so every decay lies
//! strictly inside (0, 1). The recurrence is unrolled into a Toeplitz
//! kernel and applied as a batched matmul along rows or columns.

use candle_core::{DType, Device, Tensor};
use rand_chacha::ChaCha8Rng;

use crate::error::{ModelError, Result};
use crate::layers::{init_conv, inverse_softplus, sigmoid, softplus, softplus_f64};
use crate::params::ParamStore;

pub const DIRECTIONS: [&str; 4] = ["left_right", "right_left", "top_bottom", "bottom_top"];

/// Keeps `a` and `δ` away from zero so the decay stays below one in f64.
const A_FLOOR: f64 = 1e-4;
const DELTA_FLOOR: f64 = 1e-4;
const DELTA_INIT: f64 = 0.5;

pub fn init_ssm(ps: &mut ParamStore, prefix: &str, channels: usize, state_dim: usize, rng: &mut ChaCha8Rng) -> Result<()> {
    // Decays at init spread from about 0.85 down to 0.25 across the states.
    let (lo, hi) = (0.85f64.ln().abs(), 0.25f64.ln().abs());
    let a_hat: Vec<f64> = (0..channels)
        .flat_map(|_| {
            (0..state_dim).map(move |n| {
                let frac = if state_dim == 1 { 0.0 } else { n as f64 / (state_dim - 1) as f64 };
                inverse_softplus((lo + frac * (hi - lo)) / DELTA_INIT - A_FLOOR)
            })
        })
        .collect();
    let bound = (1.0 / state_dim as f64).sqrt();
    for dir in DIRECTIONS {
        let p = format!("{prefix}.{dir}");
        ps.insert(&format!("{p}.a_hat"), &[channels, state_dim], a_hat.clone())?;
        ps.uniform(&format!("{p}.b"), &[channels, state_dim], bound, rng)?;
        ps.uniform(&format!("{p}.c"), &[channels, state_dim], bound, rng)?;
        ps.constant(&format!("{p}.delta_hat"), &[channels], inverse_softplus(DELTA_INIT - DELTA_FLOOR))?;
    }
    init_conv(ps, &format!("{prefix}.gate"), channels, channels, 1, 3.0, rng)
}

/// Parameter tensors of one scan direction.
#[derive(Debug, Clone)]
pub struct ScanParams {
    pub a_hat: Tensor,
    pub b: Tensor,
    pub c: Tensor,
    pub delta_hat: Tensor,
}

impl ScanParams {
    pub fn from_store(ps: &ParamStore, prefix: &str) -> Result<Self> {
        Ok(Self {
            a_hat: ps.get(&format!("{prefix}.a_hat"))?.clone(),
            b: ps.get(&format!("{prefix}.b"))?.clone(),
            c: ps.get(&format!("{prefix}.c"))?.clone(),
            delta_hat: ps.get(&format!("{prefix}.delta_hat"))?.clone(),
        })
    }

    /// Kernel `K[c, t, k] = Σ_n c δ b exp(δ a (t - k))` for `t ≥ k`, zero
    /// above the diagonal. Shape (C, L, L).
    pub fn kernel(&self, len: usize) -> Result<Tensor> {
        let (ch, n) = self.a_hat.dims2()?;
        let dtype = self.a_hat.dtype();
        let device = self.a_hat.device();
        let a = (softplus(&self.a_hat)? + A_FLOOR)?.neg()?;
        let delta = (softplus(&self.delta_hat)? + DELTA_FLOOR)?.reshape((ch, 1))?;
        let rate = a.broadcast_mul(&delta)?.reshape((ch, n, 1, 1))?;
        let coef = (&self.c * &self.b)?.broadcast_mul(&delta)?.reshape((ch, n, 1, 1))?;
        let (lag, mask) = lag_and_mask(len, dtype, device)?;
        let decay = rate.broadcast_mul(&lag)?.exp()?;
        let k = decay.broadcast_mul(&coef)?.sum(1)?;
        Ok(k.broadcast_mul(&mask)?)
    }
}

/// `max(t - k, 0)` and the lower-triangular mask, both (1, 1, L, L) for
/// the lag and (1, L, L) for the mask.
fn lag_and_mask(len: usize, dtype: DType, device: &Device) -> Result<(Tensor, Tensor)> {
    let mut lag = vec![0f64; len * len];
    let mut mask = vec![0f64; len * len];
    for t in 0..len {
        for k in 0..=t {
            lag[t * len + k] = (t - k) as f64;
            mask[t * len + k] = 1.0;
        }
    }
    Ok((
        Tensor::from_vec(lag, (1, 1, len, len), device)?.to_dtype(dtype)?,
        Tensor::from_vec(mask, (1, len, len), device)?.to_dtype(dtype)?,
    ))
}

#[derive(Debug, Clone)]
pub struct SsmParams {
    pub scans: [ScanParams; 4],
    pub gate_weight: Tensor,
    pub gate_bias: Tensor,
}

impl SsmParams {
    pub fn from_store(ps: &ParamStore, prefix: &str) -> Result<Self> {
        let scan = |i: usize| ScanParams::from_store(ps, &format!("{prefix}.{}", DIRECTIONS[i]));
        Ok(Self {
            scans: [scan(0)?, scan(1)?, scan(2)?, scan(3)?],
            gate_weight: ps.get(&format!("{prefix}.gate.weight"))?.clone(),
            gate_bias: ps.get(&format!("{prefix}.gate.bias"))?.clone(),
        })
    }
}

/// Applies `y = x @ Kᵀ` (forward scan) or `y = x @ K` (reverse scan) to
/// sequences laid out as (C, M, L).
fn scan(seq: &Tensor, kernel: &Tensor, reverse: bool) -> Result<Tensor> {
    let k = if reverse { kernel.clone() } else { kernel.transpose(1, 2)?.contiguous()? };
    Ok(seq.matmul(&k)?)
}

/// Four-direction scan, gated and added residually. `x` is NCHW.
pub fn ssm_attention(x: &Tensor, p: &SsmParams) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    if p.scans[0].a_hat.dim(0)? != c {
        return Err(ModelError::Shape(format!("ssm block has {} channels, input {c}", p.scans[0].a_hat.dim(0)?)));
    }
    let rows = x.permute((1, 0, 2, 3))?.contiguous()?.reshape((c, b * h, w))?;
    let horiz = (scan(&rows, &p.scans[0].kernel(w)?, false)? + scan(&rows, &p.scans[1].kernel(w)?, true)?)?
        .reshape((c, b, h, w))?
        .permute((1, 0, 2, 3))?;
    let cols = x.permute((1, 0, 3, 2))?.contiguous()?.reshape((c, b * w, h))?;
    let vert = (scan(&cols, &p.scans[2].kernel(h)?, false)? + scan(&cols, &p.scans[3].kernel(h)?, true)?)?
        .reshape((c, b, w, h))?
        .permute((1, 0, 3, 2))?;
    let mixed = (horiz + vert)?;
    let gate_in = crate::conv::conv2d(x, &p.gate_weight, &p.gate_bias, 1)?;
    Ok((x + (sigmoid(&gate_in)? * mixed)?)?)
}

/// Every discretised decay `exp(δ a)` of the block, in f64.
pub fn decays(ps: &ParamStore, prefix: &str) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for dir in DIRECTIONS {
        let a_hat = ps.values(&format!("{prefix}.{dir}.a_hat"))?;
        let delta_hat = ps.values(&format!("{prefix}.{dir}.delta_hat"))?;
        let n = a_hat.len() / delta_hat.len();
        for (i, ah) in a_hat.iter().enumerate() {
            let a = -(softplus_f64(*ah) + A_FLOOR);
            let delta = softplus_f64(delta_hat[i / n]) + DELTA_FLOOR;
            out.push((delta * a).exp());
        }
    }
    Ok(out)
}

/// Direct recurrence along one direction; reference for the kernel form.
#[cfg(test)]
pub(crate) fn reference_scan(x: &[f64], a: &[f64], b: &[f64], c: &[f64], delta: f64, reverse: bool) -> Vec<f64> {
    let len = x.len();
    let mut h = vec![0.0; a.len()];
    let mut y = vec![0.0; len];
    let order: Vec<usize> = if reverse { (0..len).rev().collect() } else { (0..len).collect() };
    for t in order {
        let mut acc = 0.0;
        for n in 0..a.len() {
            h[n] = (delta * a[n]).exp() * h[n] + delta * b[n] * x[t];
            acc += c[n] * h[n];
        }
        y[t] = acc;
    }
    y
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn store(channels: usize, seed: u64) -> ParamStore {
        let mut ps = ParamStore::new(DType::F64, Device::Cpu);
        init_ssm(&mut ps, "s", channels, 3, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        ps
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let ps = store(2, 0);
        let x = Tensor::zeros((1, 2, 4, 5), DType::F64, &Device::Cpu).unwrap();
        let y = ssm_attention(&x, &SsmParams::from_store(&ps, "s").unwrap()).unwrap();
        assert_eq!(y.dims(), x.dims());
        assert!(y.flatten_all().unwrap().to_vec1::<f64>().unwrap().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn initial_decays_in_unit_interval() {
        let d = decays(&store(3, 1), "s").unwrap();
        assert!(d.iter().all(|v| *v > 0.2 && *v < 0.9), "{d:?}");
    }

    #[test]
    fn kernel_matches_direct_recurrence() {
        let ps = store(1, 2);
        let p = SsmParams::from_store(&ps, "s").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let xs: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        for (dir, reverse) in [(0, false), (1, true)] {
            let sp = &p.scans[dir];
            let prefix = format!("s.{}", DIRECTIONS[dir]);
            let a: Vec<f64> =
                ps.values(&format!("{prefix}.a_hat")).unwrap().iter().map(|v| -(softplus_f64(*v) + A_FLOOR)).collect();
            let delta = softplus_f64(ps.values(&format!("{prefix}.delta_hat")).unwrap()[0]) + DELTA_FLOOR;
            let b = ps.values(&format!("{prefix}.b")).unwrap();
            let c = ps.values(&format!("{prefix}.c")).unwrap();
            let want = reference_scan(&xs, &a, &b, &c, delta, reverse);
            let seq = Tensor::from_vec(xs.clone(), (1, 1, 6), &Device::Cpu).unwrap();
            let got = scan(&seq, &sp.kernel(6).unwrap(), reverse).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
            for (g, w) in got.iter().zip(&want) {
                assert!((g - w).abs() < 1e-12, "{got:?} vs {want:?}");
            }
        }
    }
}
