//! Asymmetric fake quantization with group structure and a learnable
//! per-group magnitude.
//!
//! A weight matrix `[C_out, C_in]` is carved into groups of `g` consecutive
//! input-channel columns within each output row (per-channel quantization is
//! the `g = C_in` special case). Each group carries three scalars: a scale
//! `s > 0`, an offset `b`, and a magnitude `m` initialized to one. The
//! quantizer maps a weight `w` to the integer grid
//! `q = clip(round((w - b) / s), -2^(n-1), 2^(n-1) - 1)` and reconstructs
//! `m * (s * q + b)`.
//!
//! Gradients follow the straight-through convention for a learned scale and
//! offset: with `u = (w - b) / s` and "inside" meaning `qn <= u <= qp`,
//!
//! ```text
//! dWq/dw = m         inside   | 0     outside
//! dWq/ds = m*(q - u) inside   | m*q   outside
//! dWq/db = 0         inside   | m     outside
//! dWq/dm = s*q + b   everywhere
//! ```
//!
//! Per-group parameters sum these contributions over their group's elements.
//! Note the rules are not the (almost-everywhere zero) true derivative of
//! the rounding staircase; finite differences cannot validate them. They are
//! the exact derivatives of the round-bypass surrogate (`Rounding::Bypass`),
//! which exists precisely so gradient checks can exercise the full chain.

use crate::error::{Error, Result};
use crate::graph::CustomOp;
use crate::tensor::Tensor;

/// Scale floor for a degenerate group (`min == max`). With `b = min` the
/// whole group quantizes to `q = 0` and reconstructs exactly.
pub const DEGENERATE_SCALE: f64 = 1e-8;

/// Quantization granularity along the input-channel axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Granularity {
    /// One group per output row.
    PerChannel,
    /// Groups of `g` consecutive input channels within each output row.
    Group(usize),
}

/// Bit width plus granularity of one quantizer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct QuantSpec {
    pub bits: u8,
    pub granularity: Granularity,
}

impl QuantSpec {
    pub fn new(bits: u8, granularity: Granularity) -> Result<Self> {
        if !(2..=8).contains(&bits) {
            return Err(Error::Config(format!("quantizer bits must be in [2, 8], got {bits}")));
        }
        if let Granularity::Group(0) = granularity {
            return Err(Error::Config("group size must be positive".into()));
        }
        Ok(QuantSpec { bits, granularity })
    }

    pub fn per_channel(bits: u8) -> Result<Self> {
        QuantSpec::new(bits, Granularity::PerChannel)
    }

    pub fn grouped(bits: u8, group_size: usize) -> Result<Self> {
        QuantSpec::new(bits, Granularity::Group(group_size))
    }

    /// Integer grid endpoints `(-2^(n-1), 2^(n-1) - 1)`.
    pub fn grid_bounds(&self) -> (i32, i32) {
        grid_bounds(self.bits)
    }
}

pub fn grid_bounds(bits: u8) -> (i32, i32) {
    let half = 1i32 << (bits - 1);
    (-half, half - 1)
}

/// Mapping between a `[rows, cols]` weight matrix and its group grid.
/// Groups are contiguous column runs; the last group of a row may be
/// ragged when the group size does not divide `cols`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GroupView {
    pub rows: usize,
    pub cols: usize,
    pub group_size: usize,
    pub groups_per_row: usize,
}

impl GroupView {
    pub fn new(rows: usize, cols: usize, granularity: Granularity) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::shape("group_view", format!("empty weight {rows}x{cols}")));
        }
        let group_size = match granularity {
            Granularity::PerChannel => cols,
            Granularity::Group(g) => {
                if g == 0 {
                    return Err(Error::Config("group size must be positive".into()));
                }
                g.min(cols)
            }
        };
        Ok(GroupView {
            rows,
            cols,
            group_size,
            groups_per_row: cols.div_ceil(group_size),
        })
    }

    pub fn for_weight(w: &Tensor, spec: &QuantSpec) -> Result<Self> {
        let (rows, cols) = w.dims2()?;
        GroupView::new(rows, cols, spec.granularity)
    }

    pub fn group_count(&self) -> usize {
        self.rows * self.groups_per_row
    }

    #[inline]
    pub fn group_of(&self, row: usize, col: usize) -> usize {
        row * self.groups_per_row + col / self.group_size
    }
}

/// Per-group quantizer parameters, all shaped `[rows, groups_per_row]`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantParams {
    pub s: Tensor,
    pub b: Tensor,
    pub m: Tensor,
    /// Set once the warm-up phase ends; `s`/`b` are then `s0`/`b0`.
    pub frozen_sb: bool,
}

impl QuantParams {
    /// Initialize from a weight's per-group min/max, with `m` all ones.
    pub fn init_from_weight(w: &Tensor, spec: &QuantSpec) -> Result<Self> {
        let (mins, maxs) = minmax_per_group(w, spec)?;
        let (s, b) = init_scale_bias(&mins, &maxs, spec.bits)?;
        let m = Tensor::filled(s.shape().to_vec(), 1.0);
        Ok(QuantParams { s, b, m, frozen_sb: false })
    }

    pub fn group_count(&self) -> usize {
        self.s.numel()
    }

    /// Round `s`, `b`, `m` through IEEE binary32, the pack-file storage
    /// width. Packed-vs-in-memory equivalence checks require this snap.
    pub fn snap_to_binary32(&mut self) {
        for t in [&mut self.s, &mut self.b, &mut self.m] {
            for v in t.data_mut() {
                *v = *v as f32 as f64;
            }
        }
    }
}

/// Per-group elementwise min and max of a weight matrix.
pub fn minmax_per_group(w: &Tensor, spec: &QuantSpec) -> Result<(Tensor, Tensor)> {
    if !w.is_finite() {
        return Err(Error::NonFinite { op: "minmax_per_group" });
    }
    let view = GroupView::for_weight(w, spec)?;
    let wd = w.data();
    let mut mins = vec![f64::INFINITY; view.group_count()];
    let mut maxs = vec![f64::NEG_INFINITY; view.group_count()];
    for r in 0..view.rows {
        for c in 0..view.cols {
            let g = view.group_of(r, c);
            let v = wd[r * view.cols + c];
            if v < mins[g] {
                mins[g] = v;
            }
            if v > maxs[g] {
                maxs[g] = v;
            }
        }
    }
    let shape = vec![view.rows, view.groups_per_row];
    Ok((Tensor::new(shape.clone(), mins)?, Tensor::new(shape, maxs)?))
}

/// Scale/offset placing the integer grid endpoints on `(min, max)`:
/// `s = (max - min) / (2^n - 1)`,
/// `b = (2^(n-1) * max + (2^(n-1) - 1) * min) / (2^n - 1)`.
pub fn init_scale_bias_value(min: f64, max: f64, bits: u8) -> (f64, f64) {
    if max == min {
        return (DEGENERATE_SCALE, min);
    }
    let levels = ((1u32 << bits) - 1) as f64;
    let half = (1u32 << (bits - 1)) as f64;
    let s = (max - min) / levels;
    let b = (half * max + (half - 1.0) * min) / levels;
    (s, b)
}

/// Elementwise [`init_scale_bias_value`] over per-group min/max tensors.
pub fn init_scale_bias(mins: &Tensor, maxs: &Tensor, bits: u8) -> Result<(Tensor, Tensor)> {
    if mins.shape() != maxs.shape() {
        return Err(Error::shape(
            "init_scale_bias",
            format!("{:?} vs {:?}", mins.shape(), maxs.shape()),
        ));
    }
    let mut s = vec![0.0; mins.numel()];
    let mut b = vec![0.0; mins.numel()];
    for i in 0..mins.numel() {
        let (si, bi) = init_scale_bias_value(mins.data()[i], maxs.data()[i], bits);
        s[i] = si;
        b[i] = bi;
    }
    Ok((
        Tensor::new(mins.shape().to_vec(), s)?,
        Tensor::new(mins.shape().to_vec(), b)?,
    ))
}

#[inline]
fn quantize_value(w: f64, s: f64, b: f64, qn: f64, qp: f64) -> i32 {
    ((w - b) / s).round_ties_even().clamp(qn, qp) as i32
}

/// `m * (s * q + b)` with `q` already on the real line. Every dequantizing
/// path in the crate (fake quantize, pack loader, packed forward) funnels
/// through this one expression so outputs stay bit-identical.
#[inline]
pub fn reconstruct(q: f64, s: f64, b: f64, m: f64) -> f64 {
    m * (s * q + b)
}

/// Dequantize one grid integer.
#[inline]
pub fn dequant_value(q: i32, s: f64, b: f64, m: f64) -> f64 {
    reconstruct(q as f64, s, b, m)
}

fn check_params_shape(op: &'static str, view: &GroupView, params: &QuantParams) -> Result<()> {
    for t in [&params.s, &params.b, &params.m] {
        if t.numel() != view.group_count() {
            return Err(Error::shape(
                op,
                format!("{} group params for {} groups", t.numel(), view.group_count()),
            ));
        }
    }
    Ok(())
}

fn check_scale_positive(op: &'static str, s: &Tensor) -> Result<()> {
    if s.data().iter().any(|&v| v <= 0.0) {
        return Err(Error::Invalid(format!("{op}: scale must be positive everywhere")));
    }
    Ok(())
}

/// Quantize a weight matrix to its integer grid.
pub fn quantize_ints(w: &Tensor, s: &Tensor, b: &Tensor, spec: &QuantSpec) -> Result<Vec<i32>> {
    let view = GroupView::for_weight(w, spec)?;
    if s.numel() != view.group_count() || b.numel() != view.group_count() {
        return Err(Error::shape(
            "quantize_ints",
            format!("params sized {} for {} groups", s.numel(), view.group_count()),
        ));
    }
    check_scale_positive("quantize_ints", s)?;
    let (qn, qp) = spec.grid_bounds();
    let (qn_f, qp_f) = (qn as f64, qp as f64);
    let wd = w.data();
    let mut grid = vec![0i32; wd.len()];
    for r in 0..view.rows {
        for c in 0..view.cols {
            let g = view.group_of(r, c);
            grid[r * view.cols + c] =
                quantize_value(wd[r * view.cols + c], s.data()[g], b.data()[g], qn_f, qp_f);
        }
    }
    Ok(grid)
}

/// Reconstruct a weight tensor from its integer grid and group metadata.
pub fn dequantize(grid: &[i32], params: &QuantParams, view: &GroupView) -> Result<Tensor> {
    if grid.len() != view.rows * view.cols {
        return Err(Error::shape(
            "dequantize",
            format!("{} grid values for {}x{}", grid.len(), view.rows, view.cols),
        ));
    }
    check_params_shape("dequantize", view, params)?;
    let mut data = vec![0.0; grid.len()];
    for r in 0..view.rows {
        for c in 0..view.cols {
            let g = view.group_of(r, c);
            let idx = r * view.cols + c;
            data[idx] = dequant_value(grid[idx], params.s.data()[g], params.b.data()[g], params.m.data()[g]);
        }
    }
    Tensor::new(vec![view.rows, view.cols], data)
}

/// Quantize-then-dequantize a weight matrix in one pass.
pub fn fake_quantize(w: &Tensor, params: &QuantParams, spec: &QuantSpec) -> Result<Tensor> {
    let view = GroupView::for_weight(w, spec)?;
    check_params_shape("fake_quantize", &view, params)?;
    check_scale_positive("fake_quantize", &params.s)?;
    if !w.is_finite() {
        return Err(Error::NonFinite { op: "fake_quantize" });
    }
    let (qn, qp) = spec.grid_bounds();
    let (qn_f, qp_f) = (qn as f64, qp as f64);
    let wd = w.data();
    let mut data = vec![0.0; wd.len()];
    for r in 0..view.rows {
        for c in 0..view.cols {
            let g = view.group_of(r, c);
            let idx = r * view.cols + c;
            let q = quantize_value(wd[idx], params.s.data()[g], params.b.data()[g], qn_f, qp_f);
            data[idx] = dequant_value(q, params.s.data()[g], params.b.data()[g], params.m.data()[g]);
        }
    }
    Tensor::new(vec![view.rows, view.cols], data)
}

/// Straight-through gradients of the fake quantizer.
///
/// Returns `(d_w, d_s, d_b, d_m)`; the group tensors accumulate over their
/// group's elements. `upstream` is the gradient flowing into the output.
pub fn ste_gradients(
    w: &Tensor,
    params: &QuantParams,
    spec: &QuantSpec,
    upstream: &[f64],
    rounding: Rounding,
) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>)> {
    let view = GroupView::for_weight(w, spec)?;
    check_params_shape("ste_gradients", &view, params)?;
    if upstream.len() != w.numel() {
        return Err(Error::shape(
            "ste_gradients",
            format!("upstream has {} elements for {} weights", upstream.len(), w.numel()),
        ));
    }
    let (qn, qp) = spec.grid_bounds();
    let (qn_f, qp_f) = (qn as f64, qp as f64);
    let wd = w.data();
    let mut d_w = vec![0.0; wd.len()];
    let mut d_s = vec![0.0; view.group_count()];
    let mut d_b = vec![0.0; view.group_count()];
    let mut d_m = vec![0.0; view.group_count()];
    for r in 0..view.rows {
        for c in 0..view.cols {
            let g = view.group_of(r, c);
            let idx = r * view.cols + c;
            let (s, b, m) = (params.s.data()[g], params.b.data()[g], params.m.data()[g]);
            let u = (wd[idx] - b) / s;
            // "inside" is judged on the pre-round value, closed interval
            let inside = u >= qn_f && u <= qp_f;
            let q = match rounding {
                Rounding::HalfEven => u.round_ties_even().clamp(qn_f, qp_f),
                Rounding::Bypass => u.clamp(qn_f, qp_f),
            };
            let go = upstream[idx];
            if inside {
                d_w[idx] = go * m;
                d_s[g] += go * m * (q - u);
            } else {
                d_s[g] += go * m * q;
                d_b[g] += go * m;
            }
            d_m[g] += go * reconstruct(q, s, b, 1.0);
        }
    }
    Ok((d_w, d_s, d_b, d_m))
}

/// Forward rounding behaviour of the graph quantizer op.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Rounding {
    /// Round half to even onto the integer grid (the real quantizer).
    HalfEven,
    /// Skip rounding: `q = clip(u, qn, qp)` stays on the real line, so the
    /// straight-through rules above are the exact derivatives of the
    /// forward. Gradient-checking surrogate only; never used in training.
    Bypass,
}

/// Graph op computing `m * (s * round_clip((W - b)/s) + b)` with the
/// straight-through backward above. Inputs: `[w, s, b, m]`.
#[derive(Debug)]
pub struct WeightFakeQuant {
    pub spec: QuantSpec,
    pub rounding: Rounding,
}

impl CustomOp for WeightFakeQuant {
    fn name(&self) -> &'static str {
        "fake_quantize"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let [w, s, b, m] = take_inputs(inputs)?;
        let params = QuantParams {
            s: s.clone(),
            b: b.clone(),
            m: m.clone(),
            frozen_sb: false,
        };
        match self.rounding {
            Rounding::HalfEven => fake_quantize(w, &params, &self.spec),
            Rounding::Bypass => {
                let view = GroupView::for_weight(w, &self.spec)?;
                check_params_shape("fake_quantize", &view, &params)?;
                check_scale_positive("fake_quantize", &params.s)?;
                let (qn, qp) = self.spec.grid_bounds();
                let (qn_f, qp_f) = (qn as f64, qp as f64);
                let wd = w.data();
                let mut data = vec![0.0; wd.len()];
                for r in 0..view.rows {
                    for c in 0..view.cols {
                        let g = view.group_of(r, c);
                        let idx = r * view.cols + c;
                        let (sv, bv, mv) = (s.data()[g], b.data()[g], m.data()[g]);
                        let u = ((wd[idx] - bv) / sv).clamp(qn_f, qp_f);
                        data[idx] = reconstruct(u, sv, bv, mv);
                    }
                }
                Tensor::new(vec![view.rows, view.cols], data)
            }
        }
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad_out: &[f64],
    ) -> Result<Vec<Option<Vec<f64>>>> {
        let [w, s, b, m] = take_inputs(inputs)?;
        let params = QuantParams {
            s: s.clone(),
            b: b.clone(),
            m: m.clone(),
            frozen_sb: false,
        };
        let (d_w, d_s, d_b, d_m) = ste_gradients(w, &params, &self.spec, grad_out, self.rounding)?;
        Ok(vec![Some(d_w), Some(d_s), Some(d_b), Some(d_m)])
    }
}

fn take_inputs<'a>(inputs: &[&'a Tensor]) -> Result<[&'a Tensor; 4]> {
    match inputs {
        [w, s, b, m] => Ok([w, s, b, m]),
        other => Err(Error::Invalid(format!(
            "fake_quantize expects inputs [w, s, b, m], got {}",
            other.len()
        ))),
    }
}

/// Dynamic per-tensor activation fake quantization.
///
/// Scale and offset are recomputed from the tensor's min/max on every call;
/// there are no learned parameters and no magnitude. The gradient passes
/// straight through inside the clip range and is zero outside.
pub fn fake_quantize_activation(x: &Tensor, bits: u8) -> Result<Tensor> {
    if !x.is_finite() {
        return Err(Error::NonFinite { op: "fake_quantize_activation" });
    }
    let (min, max) = tensor_minmax(x);
    if min == max {
        // zero-range tensors map to themselves exactly
        return Ok(x.clone());
    }
    let (s, b) = init_scale_bias_value(min, max, bits);
    let (qn, qp) = grid_bounds(bits);
    let (qn_f, qp_f) = (qn as f64, qp as f64);
    let data = x
        .data()
        .iter()
        .map(|&v| dequant_value(quantize_value(v, s, b, qn_f, qp_f), s, b, 1.0))
        .collect();
    Tensor::new(x.shape().to_vec(), data)
}

fn tensor_minmax(x: &Tensor) -> (f64, f64) {
    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    for &v in x.data() {
        if v < min {
            min = v;
        }
        if v > max {
            max = v;
        }
    }
    (min, max)
}

/// Graph op wrapping [`fake_quantize_activation`]. Input: `[x]`.
#[derive(Debug)]
pub struct ActivationFakeQuant {
    pub bits: u8,
}

impl CustomOp for ActivationFakeQuant {
    fn name(&self) -> &'static str {
        "fake_quantize_activation"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        match inputs {
            [x] => fake_quantize_activation(x, self.bits),
            other => Err(Error::Invalid(format!(
                "fake_quantize_activation expects one input, got {}",
                other.len()
            ))),
        }
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad_out: &[f64],
    ) -> Result<Vec<Option<Vec<f64>>>> {
        let x = inputs[0];
        let (min, max) = tensor_minmax(x);
        if min == max {
            return Ok(vec![Some(grad_out.to_vec())]);
        }
        let (s, b) = init_scale_bias_value(min, max, self.bits);
        let (qn, qp) = grid_bounds(self.bits);
        let (qn_f, qp_f) = (qn as f64, qp as f64);
        let d: Vec<f64> = x
            .data()
            .iter()
            .zip(grad_out)
            .map(|(&v, &g)| {
                let u = (v - b) / s;
                if u >= qn_f && u <= qp_f {
                    g
                } else {
                    0.0
                }
            })
            .collect();
        Ok(vec![Some(d)])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(rows: usize, cols: usize, data: Vec<f64>) -> Tensor {
        Tensor::matrix(rows, cols, data).unwrap()
    }

    /// Independent scalar scan used as the min/max oracle.
    fn minmax_oracle(w: &Tensor, group_size: usize) -> (Vec<f64>, Vec<f64>) {
        let (rows, cols) = w.dims2().unwrap();
        let gpr = cols.div_ceil(group_size);
        let mut mins = vec![f64::INFINITY; rows * gpr];
        let mut maxs = vec![f64::NEG_INFINITY; rows * gpr];
        for r in 0..rows {
            for c in 0..cols {
                let g = r * gpr + c / group_size;
                let v = w.data()[r * cols + c];
                mins[g] = mins[g].min(v);
                maxs[g] = maxs[g].max(v);
            }
        }
        (mins, maxs)
    }

    #[test]
    fn minmax_constant_matrix() {
        let w = t2(2, 4, vec![3.5; 8]);
        let spec = QuantSpec::grouped(4, 2).unwrap();
        let (mins, maxs) = minmax_per_group(&w, &spec).unwrap();
        assert_eq!(mins.numel(), 4);
        assert!(mins.data().iter().all(|&v| v == 3.5));
        assert!(maxs.data().iter().all(|&v| v == 3.5));
    }

    #[test]
    fn minmax_matches_scalar_scan() {
        let data: Vec<f64> = (0..8).map(|i| ((i * 37) % 11) as f64 - 5.0).collect();
        let w = t2(2, 4, data);
        let spec = QuantSpec::grouped(4, 2).unwrap();
        let (mins, maxs) = minmax_per_group(&w, &spec).unwrap();
        let (om, ox) = minmax_oracle(&w, 2);
        assert_eq!(mins.data(), om.as_slice());
        assert_eq!(maxs.data(), ox.as_slice());
    }

    #[test]
    fn minmax_per_channel_equals_row_scan() {
        let data: Vec<f64> = (0..15).map(|i| ((i * 7) % 13) as f64 * 0.5 - 3.0).collect();
        let w = t2(3, 5, data);
        let spec = QuantSpec::per_channel(4).unwrap();
        let (mins, maxs) = minmax_per_group(&w, &spec).unwrap();
        assert_eq!(mins.shape(), &[3, 1]);
        let (om, ox) = minmax_oracle(&w, 5);
        assert_eq!(mins.data(), om.as_slice());
        assert_eq!(maxs.data(), ox.as_slice());
    }

    #[test]
    fn init_scale_bias_reference_case() {
        // (min, max, n) = (-1, 1, 4) => s = 2/15, b = 1/15
        let (s, b) = init_scale_bias_value(-1.0, 1.0, 4);
        assert!((s - 2.0 / 15.0).abs() < 1e-15);
        assert!((b - 1.0 / 15.0).abs() < 1e-15);
    }

    #[test]
    fn init_scale_bias_degenerate_group() {
        let (s, b) = init_scale_bias_value(0.0, 0.0, 4);
        assert_eq!(s, DEGENERATE_SCALE);
        assert_eq!(b, 0.0);
    }

    #[test]
    fn init_scale_bias_endpoint_identity() {
        let mut state = 0xabcdef_u64;
        let mut next = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 33) as f64 / (1u64 << 31) as f64) * 4.0 - 2.0
        };
        for bits in 2..=8u8 {
            for _ in 0..50 {
                let a = next();
                let b0 = next();
                let (min, max) = if a <= b0 { (a, b0) } else { (b0, a) };
                if max - min < 1e-9 {
                    continue;
                }
                let (s, b) = init_scale_bias_value(min, max, bits);
                let (qn, qp) = grid_bounds(bits);
                assert!((s * qn as f64 + b - min).abs() <= 1e-6 * (1.0 + min.abs()));
                assert!((s * qp as f64 + b - max).abs() <= 1e-6 * (1.0 + max.abs()));
            }
        }
    }

    #[test]
    fn quantize_exact_grid_point_and_clamp() {
        // W = 0.5, s = 0.25, b = 0, n = 4 => q = 2
        assert_eq!(quantize_value(0.5, 0.25, 0.0, -8.0, 7.0), 2);
        // W = 10 clips to the top of the grid
        assert_eq!(quantize_value(10.0, 0.25, 0.0, -8.0, 7.0), 7);
    }

    #[test]
    fn quantize_rejects_nonpositive_scale() {
        let w = t2(1, 2, vec![0.1, 0.2]);
        let spec = QuantSpec::per_channel(4).unwrap();
        let s = Tensor::new(vec![1, 1], vec![0.0]).unwrap();
        let b = Tensor::new(vec![1, 1], vec![0.0]).unwrap();
        assert!(quantize_ints(&w, &s, &b, &spec).is_err());
    }

    #[test]
    fn dequantize_examples() {
        assert_eq!(dequant_value(2, 0.25, 0.0, 1.0), 0.5);
        // m = 2, q = -8, s = 2/15, b = 1/15 => 2 * (-16/15 + 1/15) = -2
        let v = dequant_value(-8, 2.0 / 15.0, 1.0 / 15.0, 2.0);
        assert!((v - (-2.0)).abs() < 1e-15);
    }

    #[test]
    fn grid_round_trip_is_identity() {
        let mut state = 0x5eed_u64;
        let mut next = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 33) as f64 / (1u64 << 31) as f64
        };
        for bits in 2..=8u8 {
            let (qn, qp) = grid_bounds(bits);
            for _ in 0..20 {
                let s = 1e-4 + next() * 2.0;
                let b = (next() - 0.5) * 6.0;
                for q in qn..=qp {
                    let x = dequant_value(q, s, b, 1.0);
                    let back = quantize_value(x, s, b, qn as f64, qp as f64);
                    assert_eq!(back, q, "bits={bits} s={s} b={b} q={q}");
                }
            }
        }
    }

    #[test]
    fn fake_quantize_fixed_point_on_grid() {
        // weights already on grid points, m = 1 => output bitwise equal
        let spec = QuantSpec::grouped(4, 4).unwrap();
        let (s, b) = (0.22, -0.31);
        let data: Vec<f64> = [-8, -3, 0, 7].iter().map(|&q| dequant_value(q, s, b, 1.0)).collect();
        let w = t2(1, 4, data.clone());
        let params = QuantParams {
            s: Tensor::new(vec![1, 1], vec![s]).unwrap(),
            b: Tensor::new(vec![1, 1], vec![b]).unwrap(),
            m: Tensor::new(vec![1, 1], vec![1.0]).unwrap(),
            frozen_sb: false,
        };
        let out = fake_quantize(&w, &params, &spec).unwrap();
        assert_eq!(out.data(), data.as_slice());
    }

    #[test]
    fn fake_quantize_constant_group_reconstructs_scaled_min() {
        let spec = QuantSpec::per_channel(4).unwrap();
        let w = t2(1, 3, vec![-0.7; 3]);
        let mut params = QuantParams::init_from_weight(&w, &spec).unwrap();
        params.m.data_mut()[0] = 2.5;
        let out = fake_quantize(&w, &params, &spec).unwrap();
        for &v in out.data() {
            assert_eq!(v, 2.5 * -0.7);
        }
    }

    #[test]
    fn ste_gradient_contract_endpoints() {
        let spec = QuantSpec::per_channel(4).unwrap();
        // group params: s = 0.1, b = 0, m = 3 => representable range [-0.8, 0.7]
        let params = QuantParams {
            s: Tensor::new(vec![1, 1], vec![0.1]).unwrap(),
            b: Tensor::new(vec![1, 1], vec![0.0]).unwrap(),
            m: Tensor::new(vec![1, 1], vec![3.0]).unwrap(),
            frozen_sb: false,
        };
        let w = t2(1, 2, vec![0.33, 55.0]);
        let upstream = vec![1.0, 1.0];
        let (d_w, _, d_b, _) = ste_gradients(&w, &params, &spec, &upstream, Rounding::HalfEven).unwrap();
        assert_eq!(d_w[0], 3.0); // inside: m
        assert_eq!(d_w[1], 0.0); // far outside: 0
        assert_eq!(d_b[0], 3.0); // outside elements contribute m to the offset
    }

    #[test]
    fn magnitude_gradient_matches_finite_differences() {
        // forward is exactly linear in m, so central FD is exact
        let spec = QuantSpec::grouped(3, 2).unwrap();
        let w = t2(2, 4, vec![0.11, -0.52, 0.93, 0.24, -0.85, 0.46, -0.07, 0.68]);
        let mut params = QuantParams::init_from_weight(&w, &spec).unwrap();
        for (i, v) in params.m.data_mut().iter_mut().enumerate() {
            *v = 1.0 + 0.1 * i as f64;
        }
        let upstream = vec![1.0; 8];
        let (_, _, _, d_m) = ste_gradients(&w, &params, &spec, &upstream, Rounding::HalfEven).unwrap();
        let h = 1e-3;
        for g in 0..params.m.numel() {
            let mut plus = params.clone();
            plus.m.data_mut()[g] += h;
            let mut minus = params.clone();
            minus.m.data_mut()[g] -= h;
            let f_plus: f64 = fake_quantize(&w, &plus, &spec).unwrap().data().iter().sum();
            let f_minus: f64 = fake_quantize(&w, &minus, &spec).unwrap().data().iter().sum();
            let fd = (f_plus - f_minus) / (2.0 * h);
            let rel = (d_m[g] - fd).abs() / fd.abs().max(1e-12);
            assert!(rel <= 1e-5, "group {g}: ste {} vs fd {}", d_m[g], fd);
        }
    }

    #[test]
    fn activation_quant_constant_is_identity() {
        let x = t2(2, 2, vec![0.77; 4]);
        let y = fake_quantize_activation(&x, 8).unwrap();
        assert_eq!(x.data(), y.data());
    }

    #[test]
    fn activation_quant_error_bound() {
        // X spanning [-1, 1] at n = 8: |x - x_q| <= s/2 = (2/255)/2
        let n = 101;
        let data: Vec<f64> = (0..n).map(|i| -1.0 + 2.0 * i as f64 / (n - 1) as f64).collect();
        let x = Tensor::vector(data.clone());
        let y = fake_quantize_activation(&x, 8).unwrap();
        let bound = (2.0 / 255.0) / 2.0 + 1e-12;
        for (a, b) in data.iter().zip(y.data()) {
            assert!((a - b).abs() <= bound, "{a} vs {b}");
        }
    }

    #[test]
    fn activation_quant_idempotent() {
        let data: Vec<f64> = (0..64).map(|i| ((i * 61) % 97) as f64 / 19.0 - 2.0).collect();
        let x = Tensor::vector(data);
        let once = fake_quantize_activation(&x, 8).unwrap();
        let twice = fake_quantize_activation(&once, 8).unwrap();
        // fixed point up to the last-bit wobble of recomputed (s, b)
        for (a, b) in once.data().iter().zip(twice.data()) {
            assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn per_channel_equals_full_width_group() {
        let data: Vec<f64> = (0..24).map(|i| ((i * 31) % 17) as f64 * 0.21 - 1.5).collect();
        let w = t2(4, 6, data);
        let pc = QuantSpec::per_channel(4).unwrap();
        let gr = QuantSpec::grouped(4, 6).unwrap();
        let p1 = QuantParams::init_from_weight(&w, &pc).unwrap();
        let p2 = QuantParams::init_from_weight(&w, &gr).unwrap();
        assert_eq!(
            fake_quantize(&w, &p1, &pc).unwrap().data(),
            fake_quantize(&w, &p2, &gr).unwrap().data()
        );
    }
}
