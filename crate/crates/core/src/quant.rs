//! Learned per-channel fixed-point quantization.
//!
//! Each channel (a weight row, or a whole bias vector) has a scale `s` and
//! a clipping threshold `theta_max`. Values inside the threshold are
//! rounded to multiples of `s`; values outside clip to `±theta_max`. The
//! bitwidth is implied by the two: `b = log2(ceil(theta_max/s) + 1) + 1`.

use std::f64::consts::LN_2;

use ndarray::{Array2, ArrayView2};
use thiserror::Error;

use crate::siren::Network;

pub const MIN_BITWIDTH: u8 = 2;
pub const MAX_BITWIDTH: u8 = 16;
/// Bitwidth a freshly initialized quantizer represents.
pub const INIT_BITWIDTH: u8 = 8;
/// Lower bound on `theta_max`, used for all-zero channels.
pub const THETA_FLOOR: f64 = 1e-8;
/// Largest `theta_max / s` ratio whose integer bitwidth is at most 16.
pub const MAX_RATIO: f64 = ((1u32 << (MAX_BITWIDTH - 1)) - 1) as f64;

// Ratios within this relative distance above an integer are treated as
// that integer, so `theta_max = 127 s` reliably means 8 bits.
const CEIL_SNAP: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum QuantError {
    #[error("scale and threshold must be positive and finite (s = {s}, theta_max = {theta_max})")]
    NonPositive { s: f64, theta_max: f64 },
    #[error("{rows} rows for a quantizer with {channels} channels")]
    RowMismatch { rows: usize, channels: usize },
    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch((usize, usize), (usize, usize)),
    #[error("tensor has no quantizer attached")]
    MissingQuantizer,
    #[error("cannot initialize a quantizer from an empty row")]
    EmptyRow,
    #[error("invalid quantized tensor: {0}")]
    InvalidTensor(String),
}

/// Integer bitwidth used for storage and the smooth surrogate used for gradients.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Bitwidth {
    pub integer: u8,
    pub smooth: f64,
}

fn snapped_ceil(r: f64) -> f64 {
    (r * (1.0 - CEIL_SNAP)).ceil()
}

pub fn bitwidth(s: f64, theta_max: f64) -> Result<Bitwidth, QuantError> {
    if !(s > 0.0 && theta_max > 0.0 && s.is_finite() && theta_max.is_finite()) {
        return Err(QuantError::NonPositive { s, theta_max });
    }
    let r = theta_max / s;
    let exact = (snapped_ceil(r) + 1.0).log2() + 1.0;
    let integer = (exact - CEIL_SNAP).ceil().clamp(f64::from(MIN_BITWIDTH), f64::from(MAX_BITWIDTH)) as u8;
    Ok(Bitwidth {
        integer,
        smooth: (r + 1.0).log2() + 1.0,
    })
}

/// `(d b~/d s, d b~/d theta_max)` of the smooth bitwidth surrogate.
pub fn smooth_bitwidth_grad(s: f64, theta_max: f64) -> (f64, f64) {
    let denom = (theta_max + s) * LN_2;
    (-theta_max / (s * denom), 1.0 / denom)
}

/// Range of a two's-complement integer with `bits` bits.
pub fn int_range(bits: u8) -> (i64, i64) {
    let half = 1i64 << (bits - 1);
    (-half, half - 1)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChannelQuantizer {
    s: Vec<f64>,
    theta_max: Vec<f64>,
}

impl ChannelQuantizer {
    pub fn new(s: Vec<f64>, theta_max: Vec<f64>) -> Result<Self, QuantError> {
        if s.len() != theta_max.len() {
            return Err(QuantError::RowMismatch {
                rows: theta_max.len(),
                channels: s.len(),
            });
        }
        for (&si, &ti) in s.iter().zip(&theta_max) {
            bitwidth(si, ti)?;
        }
        Ok(ChannelQuantizer { s, theta_max })
    }

    pub fn channels(&self) -> usize {
        self.s.len()
    }

    pub fn s(&self) -> &[f64] {
        &self.s
    }

    pub fn theta_max(&self) -> &[f64] {
        &self.theta_max
    }

    /// Sets channel `i`, projecting onto `theta_max >= s`,
    /// `theta_max >= THETA_FLOOR` and `theta_max / s <= MAX_RATIO` so the
    /// bitwidth stays in `[2, 16]`.
    pub fn set_channel(&mut self, i: usize, s: f64, theta_max: f64) {
        let theta = theta_max.max(THETA_FLOOR);
        let s = s.clamp(theta / MAX_RATIO, theta);
        self.s[i] = s;
        self.theta_max[i] = theta;
    }

    pub fn bitwidth(&self, i: usize) -> Bitwidth {
        bitwidth(self.s[i], self.theta_max[i]).expect("invariant: positive parameters")
    }

    pub fn int_bitwidths(&self) -> Vec<u8> {
        (0..self.channels()).map(|i| self.bitwidth(i).integer).collect()
    }

    pub fn smooth_bitwidths(&self) -> Vec<f64> {
        (0..self.channels()).map(|i| self.bitwidth(i).smooth).collect()
    }

    fn check_rows(&self, values: &ArrayView2<f64>) -> Result<(), QuantError> {
        if values.nrows() != self.channels() {
            return Err(QuantError::RowMismatch {
                rows: values.nrows(),
                channels: self.channels(),
            });
        }
        Ok(())
    }
}

/// Per channel: `theta_max = max|row|` (at least `THETA_FLOOR`) and
/// `s = theta_max / 127`, i.e. an 8-bit starting point.
pub fn init_quantizer(rows: ArrayView2<f64>) -> Result<ChannelQuantizer, QuantError> {
    if rows.nrows() == 0 || rows.ncols() == 0 {
        return Err(QuantError::EmptyRow);
    }
    let levels = f64::from((1u32 << (INIT_BITWIDTH - 1)) - 1);
    let (s, theta_max) = rows
        .rows()
        .into_iter()
        .map(|row| {
            let t = row.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(THETA_FLOOR);
            (t / levels, t)
        })
        .unzip();
    Ok(ChannelQuantizer { s, theta_max })
}

fn quantize_value(v: f64, s: f64, theta_max: f64) -> f64 {
    if v.abs() > theta_max {
        theta_max.copysign(v)
    } else {
        (s * (v / s).round()).clamp(-theta_max, theta_max)
    }
}

/// Applies the per-channel quantizer row by row. Rounding is half away
/// from zero. When `theta_max` is not a multiple of `s`, a value just
/// inside the threshold may round past it; the result is clamped back to
/// `±theta_max` so the map stays monotone.
pub fn quantize(values: ArrayView2<f64>, q: &ChannelQuantizer) -> Result<Array2<f64>, QuantError> {
    q.check_rows(&values)?;
    let mut out = values.to_owned();
    for (i, mut row) in out.rows_mut().into_iter().enumerate() {
        let (s, t) = (q.s[i], q.theta_max[i]);
        row.mapv_inplace(|v| quantize_value(v, s, t));
    }
    Ok(out)
}

/// Gradients of a loss through [`quantize`].
#[derive(Clone, Debug, PartialEq)]
pub struct QuantGrads {
    pub values: Array2<f64>,
    pub s: Vec<f64>,
    pub theta_max: Vec<f64>,
}

/// Backward pass of [`quantize`].
///
/// Values use the straight-through estimator: inside the clipping range
/// the gradient passes unchanged, outside it is zero. The quantizer
/// parameters get the exact derivative of the forward map on its smooth
/// pieces: `upstream * round(v/s)` for `s` where the output is `s * n`,
/// and `upstream * sign(v)` for `theta_max` where the output is clipped.
pub fn quantize_backward(
    values: ArrayView2<f64>,
    q: &ChannelQuantizer,
    upstream: ArrayView2<f64>,
) -> Result<QuantGrads, QuantError> {
    q.check_rows(&values)?;
    if values.dim() != upstream.dim() {
        return Err(QuantError::ShapeMismatch(values.dim(), upstream.dim()));
    }
    let mut grad_values = Array2::zeros(values.raw_dim());
    let mut grad_s = vec![0.0; q.channels()];
    let mut grad_t = vec![0.0; q.channels()];
    for (i, (vrow, urow)) in values.rows().into_iter().zip(upstream.rows()).enumerate() {
        let (s, t) = (q.s[i], q.theta_max[i]);
        let mut grow = grad_values.row_mut(i);
        for ((v, u), g) in vrow.iter().zip(urow.iter()).zip(grow.iter_mut()) {
            if v.abs() > t {
                grad_t[i] += u * v.signum();
                continue;
            }
            *g = *u;
            let n = (v / s).round();
            if (s * n).abs() > t {
                grad_t[i] += u * v.signum();
            } else {
                grad_s[i] += u * n;
            }
        }
    }
    Ok(QuantGrads {
        values: grad_values,
        s: grad_s,
        theta_max: grad_t,
    })
}

/// Rate of a quantized network.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RateBits {
    /// Sum over parameters of their channel's smooth bitwidth (loss form).
    pub smooth: f64,
    /// Sum over channels of integer bitwidth times row length (payload form).
    pub payload: u64,
    pub params: usize,
}

impl RateBits {
    pub fn mean_smooth(&self) -> f64 {
        self.smooth / self.params as f64
    }

    pub fn mean_payload(&self) -> f64 {
        self.payload as f64 / self.params as f64
    }
}

pub fn rate_bits(net: &Network) -> Result<RateBits, QuantError> {
    let qs = net.quantizers().ok_or(QuantError::MissingQuantizer)?;
    let mut rate = RateBits {
        smooth: 0.0,
        payload: 0,
        params: net.num_params(),
    };
    for (layer, q) in net.layers().iter().zip(qs) {
        for (quantizer, row_len) in [(&q.weight, layer.weight.ncols()), (&q.bias, layer.bias.len())] {
            for i in 0..quantizer.channels() {
                let b = quantizer.bitwidth(i);
                rate.smooth += b.smooth * row_len as f64;
                rate.payload += u64::from(b.integer) * row_len as u64;
            }
        }
    }
    Ok(rate)
}

/// Integers, 32-bit scales and bitwidths of one stored tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedTensor {
    row_len: usize,
    ints: Vec<i32>,
    scales: Vec<f32>,
    bitwidths: Vec<u8>,
}

impl QuantizedTensor {
    pub fn new(
        row_len: usize,
        ints: Vec<i32>,
        scales: Vec<f32>,
        bitwidths: Vec<u8>,
    ) -> Result<Self, QuantError> {
        let t = QuantizedTensor {
            row_len,
            ints,
            scales,
            bitwidths,
        };
        t.validate()?;
        Ok(t)
    }

    /// Quantizes `values` for storage. The scale is rounded to `f32` first
    /// and the integers are computed against that stored scale.
    pub fn from_values(values: ArrayView2<f64>, q: &ChannelQuantizer) -> Result<Self, QuantError> {
        q.check_rows(&values)?;
        let mut ints = Vec::with_capacity(values.len());
        let mut scales = Vec::with_capacity(q.channels());
        let mut bitwidths = Vec::with_capacity(q.channels());
        for (i, row) in values.rows().into_iter().enumerate() {
            let b = q.bitwidth(i).integer;
            let scale = q.s[i] as f32;
            let s = f64::from(scale);
            let t = q.theta_max[i];
            let (lo, hi) = int_range(b);
            ints.extend(row.iter().map(|v| {
                let n = (v.clamp(-t, t) / s).round() as i64;
                n.clamp(lo, hi) as i32
            }));
            scales.push(scale);
            bitwidths.push(b);
        }
        QuantizedTensor::new(values.ncols(), ints, scales, bitwidths)
    }

    pub fn validate(&self) -> Result<(), QuantError> {
        let bad = |m: String| Err(QuantError::InvalidTensor(m));
        let rows = self.scales.len();
        if self.bitwidths.len() != rows {
            return bad(format!("{} bitwidths for {rows} rows", self.bitwidths.len()));
        }
        if rows == 0 || self.row_len == 0 {
            return bad("empty tensor".into());
        }
        if self.ints.len() != rows * self.row_len {
            return bad(format!("{} ints for {rows}x{}", self.ints.len(), self.row_len));
        }
        for (i, (&b, &s)) in self.bitwidths.iter().zip(&self.scales).enumerate() {
            if !(1..=MAX_BITWIDTH).contains(&b) {
                return bad(format!("row {i}: bitwidth {b} outside [1, {MAX_BITWIDTH}]"));
            }
            if !s.is_finite() {
                return bad(format!("row {i}: non-finite scale"));
            }
            let (lo, hi) = int_range(b);
            if let Some(v) = self.row(i).iter().find(|v| !(lo..=hi).contains(&i64::from(**v))) {
                return bad(format!("row {i}: {v} does not fit in {b} bits"));
            }
        }
        Ok(())
    }

    pub fn rows(&self) -> usize {
        self.scales.len()
    }

    pub fn row_len(&self) -> usize {
        self.row_len
    }

    pub fn row(&self, i: usize) -> &[i32] {
        &self.ints[i * self.row_len..(i + 1) * self.row_len]
    }

    pub fn ints(&self) -> &[i32] {
        &self.ints
    }

    pub fn scales(&self) -> &[f32] {
        &self.scales
    }

    pub fn bitwidths(&self) -> &[u8] {
        &self.bitwidths
    }

    /// Bits the integers occupy, without any framing.
    pub fn payload_bits(&self) -> u64 {
        self.bitwidths
            .iter()
            .map(|&b| u64::from(b) * self.row_len as u64)
            .sum()
    }

    /// `s_i * int` for every entry, using the stored 32-bit scale.
    pub fn dequantize(&self) -> Array2<f64> {
        Array2::from_shape_fn((self.rows(), self.row_len), |(i, j)| {
            f64::from(self.scales[i]) * f64::from(self.ints[i * self.row_len + j])
        })
    }
}
