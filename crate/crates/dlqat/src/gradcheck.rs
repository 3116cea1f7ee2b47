//! Gradient verification suites.
//!
//! Three kinds of checks live here:
//!
//! 1. Central finite differences (`h = 1e-3`) against autodiff for every
//!    smooth primitive, at ~100 random coordinates per op.
//! 2. The magnitude gradient against finite differences on the exact
//!    quantized forward (which is linear in `m`, so FD is nearly exact).
//! 3. The straight-through `W`/`s`/`b` rules against an independent scalar
//!    implementation, exactly. FD cannot validate these: the true
//!    derivative of the rounding staircase is zero almost everywhere, by
//!    design. The full-model chain is instead FD-checked in round-bypass
//!    surrogate mode, where the straight-through rules are the exact
//!    derivatives of the forward, after certifying that no affected group
//!    changes clip status across the FD interval (the boundary filter).

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::adapter::AblationSetting;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::model::{build_model, BoundWeight, TinyLmConfig};
use crate::quant::{
    grid_bounds, init_scale_bias_value, GroupView, QuantParams, QuantSpec, Rounding,
    WeightFakeQuant,
};
use crate::tensor::Tensor;

pub const FD_STEP: f64 = 1e-3;
pub const SMOOTH_TOL: f64 = 1e-4;
pub const MAGNITUDE_TOL: f64 = 1e-5;

#[derive(Debug, Clone, serde::Serialize)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub points: usize,
    pub pass: bool,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct GradcheckReport {
    pub sections: Vec<CheckResult>,
}

impl GradcheckReport {
    pub fn all_pass(&self) -> bool {
        self.sections.iter().all(|s| s.pass)
    }
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// One differentiable op under test: input shapes, per-input samplers, and
/// a builder producing the op output from input vars.
struct OpCheck {
    name: &'static str,
    shapes: Vec<Vec<usize>>,
    sample: Box<dyn Fn(&mut ChaCha8Rng, usize) -> f64>,
    build: Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>,
}

fn uniform(lo: f64, hi: f64) -> Box<dyn Fn(&mut ChaCha8Rng, usize) -> f64> {
    Box::new(move |rng, _| rng.gen_range(lo..hi))
}

fn run_op_check(check: &OpCheck, rng: &mut ChaCha8Rng, tol: f64) -> Result<CheckResult> {
    let total_coords: usize = check.shapes.iter().map(|s| s.iter().product::<usize>()).sum();
    let repeats = 100usize.div_ceil(total_coords).max(2);
    let mut max_err = 0.0f64;
    let mut points = 0usize;

    for _ in 0..repeats {
        let inputs: Vec<Tensor> = check
            .shapes
            .iter()
            .enumerate()
            .map(|(i, shape)| {
                let n = shape.iter().product();
                Tensor::new(shape.clone(), (0..n).map(|_| (check.sample)(rng, i)).collect()).unwrap()
            })
            .collect();
        // fixed projection makes the (possibly tensor-valued) output scalar
        let eval = |inputs: &[Tensor], proj: &Tensor| -> Result<(f64, Option<Vec<Vec<f64>>>, bool)> {
            let mut g = Graph::new();
            let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
            let out = (check.build)(&mut g, &vars)?;
            let loss = if g.value(out).is_scalar() {
                out
            } else {
                let p = g.constant(proj.clone());
                let prod = g.mul(out, p)?;
                g.sum(prod)?
            };
            let value = g.value(loss).item()?;
            g.backward(loss)?;
            let grads: Vec<Vec<f64>> = vars
                .iter()
                .zip(inputs)
                .map(|(&v, t)| g.grad(v).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; t.numel()]))
                .collect();
            Ok((value, Some(grads), true))
        };

        // probe output shape for the projection
        let mut probe = Graph::new();
        let probe_vars: Vec<Var> = inputs.iter().map(|t| probe.leaf(t.clone(), false)).collect();
        let probe_out = (check.build)(&mut probe, &probe_vars)?;
        let out_shape = probe.value(probe_out).shape().to_vec();
        let proj = Tensor::new(
            out_shape.clone(),
            (0..out_shape.iter().product::<usize>())
                .map(|_| rng.gen_range(-1.0..1.0))
                .collect(),
        )?;

        let (_, grads, _) = eval(&inputs, &proj)?;
        let grads = grads.expect("gradients requested");

        for (ti, t) in inputs.iter().enumerate() {
            for ci in 0..t.numel() {
                let mut plus = inputs.clone();
                plus[ti].data_mut()[ci] += FD_STEP;
                let mut minus = inputs.clone();
                minus[ti].data_mut()[ci] -= FD_STEP;
                let (fp, _, _) = {
                    let mut g = Graph::new();
                    let vars: Vec<Var> = plus.iter().map(|t| g.leaf(t.clone(), false)).collect();
                    let out = (check.build)(&mut g, &vars)?;
                    let loss = if g.value(out).is_scalar() {
                        out
                    } else {
                        let p = g.constant(proj.clone());
                        let prod = g.mul(out, p)?;
                        g.sum(prod)?
                    };
                    (g.value(loss).item()?, None::<()>, true)
                };
                let (fm, _, _) = {
                    let mut g = Graph::new();
                    let vars: Vec<Var> = minus.iter().map(|t| g.leaf(t.clone(), false)).collect();
                    let out = (check.build)(&mut g, &vars)?;
                    let loss = if g.value(out).is_scalar() {
                        out
                    } else {
                        let p = g.constant(proj.clone());
                        let prod = g.mul(out, p)?;
                        g.sum(prod)?
                    };
                    (g.value(loss).item()?, None::<()>, true)
                };
                let fd = (fp - fm) / (2.0 * FD_STEP);
                let ad = grads[ti][ci];
                max_err = max_err.max(rel_err(ad, fd));
                points += 1;
            }
        }
    }
    Ok(CheckResult {
        name: check.name.to_string(),
        max_rel_err: max_err,
        tolerance: tol,
        points,
        pass: max_err <= tol,
    })
}

fn smooth_op_checks() -> Vec<OpCheck> {
    vec![
        OpCheck {
            name: "add",
            shapes: vec![vec![3, 4], vec![3, 4]],
            sample: uniform(-2.0, 2.0),
            build: Box::new(|g, v| g.add(v[0], v[1])),
        },
        OpCheck {
            name: "sub",
            shapes: vec![vec![3, 4], vec![3, 4]],
            sample: uniform(-2.0, 2.0),
            build: Box::new(|g, v| g.sub(v[0], v[1])),
        },
        OpCheck {
            name: "mul",
            shapes: vec![vec![3, 4], vec![3, 4]],
            sample: uniform(-2.0, 2.0),
            build: Box::new(|g, v| g.mul(v[0], v[1])),
        },
        OpCheck {
            name: "div",
            shapes: vec![vec![3, 4], vec![3, 4]],
            // denominators kept away from zero
            sample: Box::new(|rng, i| {
                if i == 0 {
                    rng.gen_range(-2.0..2.0)
                } else {
                    rng.gen_range(0.6..2.0)
                }
            }),
            build: Box::new(|g, v| g.div(v[0], v[1])),
        },
        OpCheck {
            name: "scalar_ops",
            shapes: vec![vec![3, 4]],
            sample: uniform(-2.0, 2.0),
            build: Box::new(|g, v| {
                let a = g.mul_scalar(v[0], -1.3)?;
                g.add_scalar(a, 0.4)
            }),
        },
        OpCheck {
            name: "mul_col_vec",
            shapes: vec![vec![4, 6], vec![4]],
            sample: uniform(-1.5, 1.5),
            build: Box::new(|g, v| g.mul_col_vec(v[0], v[1])),
        },
        OpCheck {
            name: "mul_row_vec",
            shapes: vec![vec![4, 6], vec![6]],
            sample: uniform(-1.5, 1.5),
            build: Box::new(|g, v| g.mul_row_vec(v[0], v[1])),
        },
        OpCheck {
            name: "add_col_vec",
            shapes: vec![vec![4, 6], vec![4]],
            sample: uniform(-1.5, 1.5),
            build: Box::new(|g, v| g.add_col_vec(v[0], v[1])),
        },
        OpCheck {
            name: "clip",
            // FD is valid away from the clip kinks; keep a margin wider
            // than the step
            shapes: vec![vec![4, 5]],
            sample: Box::new(|rng, _| loop {
                let x: f64 = rng.gen_range(-1.8..1.8);
                if (x.abs() - 1.0).abs() > 0.05 {
                    return x;
                }
            }),
            build: Box::new(|g, v| g.clip(v[0], -1.0, 1.0)),
        },
        OpCheck {
            name: "matmul",
            shapes: vec![vec![3, 4], vec![4, 5]],
            sample: uniform(-1.0, 1.0),
            build: Box::new(|g, v| g.matmul(v[0], v[1])),
        },
        OpCheck {
            name: "transpose",
            shapes: vec![vec![3, 4]],
            sample: uniform(-1.0, 1.0),
            build: Box::new(|g, v| g.transpose(v[0])),
        },
        OpCheck {
            name: "slice_concat_rows",
            shapes: vec![vec![5, 3], vec![2, 3]],
            sample: uniform(-1.0, 1.0),
            build: Box::new(|g, v| {
                let top = g.slice_rows(v[0], 1, 4)?;
                g.concat_rows(&[top, v[1]])
            }),
        },
        OpCheck {
            // the raw mask output contains the -1e30 sentinel which
            // swamps finite differences; check it through softmax, where
            // masked entries become exact zeros
            name: "causal_mask_softmax",
            shapes: vec![vec![4, 4]],
            sample: uniform(-1.0, 1.0),
            build: Box::new(|g, v| {
                let m = g.causal_mask(v[0])?;
                g.softmax(m, 0)
            }),
        },
        OpCheck {
            name: "softmax_axis0",
            shapes: vec![vec![4, 5]],
            sample: uniform(-2.0, 2.0),
            build: Box::new(|g, v| g.softmax(v[0], 0)),
        },
        OpCheck {
            name: "softmax_axis1",
            shapes: vec![vec![4, 5]],
            sample: uniform(-2.0, 2.0),
            build: Box::new(|g, v| g.softmax(v[0], 1)),
        },
        OpCheck {
            name: "silu",
            shapes: vec![vec![3, 4]],
            sample: uniform(-3.0, 3.0),
            build: Box::new(|g, v| g.silu(v[0])),
        },
        OpCheck {
            name: "rmsnorm",
            shapes: vec![vec![4, 3], vec![4]],
            sample: uniform(-2.0, 2.0),
            build: Box::new(|g, v| g.rmsnorm(v[0], v[1])),
        },
        OpCheck {
            name: "rope",
            shapes: vec![vec![4, 6]],
            sample: uniform(-1.5, 1.5),
            build: Box::new(|g, v| g.rope(v[0], 2)),
        },
        OpCheck {
            name: "embedding_lookup",
            shapes: vec![vec![5, 3]],
            sample: uniform(-1.0, 1.0),
            build: Box::new(|g, v| g.embedding_lookup(v[0], &[0, 2, 4, 2])),
        },
        OpCheck {
            name: "cross_entropy",
            shapes: vec![vec![6, 4]],
            sample: uniform(-2.0, 2.0),
            build: Box::new(|g, v| g.cross_entropy(v[0], &[1, 0, 5, 3])),
        },
        OpCheck {
            name: "sum_mean",
            shapes: vec![vec![3, 4]],
            sample: uniform(-2.0, 2.0),
            build: Box::new(|g, v| {
                let s = g.mul(v[0], v[0])?;
                g.mean(s)
            }),
        },
        OpCheck {
            name: "composite_mlp",
            shapes: vec![vec![5, 4], vec![3, 5], vec![4, 2]],
            sample: uniform(-1.0, 1.0),
            build: Box::new(|g, v| {
                let h = g.matmul(v[0], v[2])?;
                let h = g.silu(h)?;
                let logits = g.matmul(v[1], h)?;
                g.cross_entropy(logits, &[2, 0])
            }),
        },
    ]
}

/// FD check of the magnitude gradient on the exact quantized forward.
fn magnitude_fd_check(rng: &mut ChaCha8Rng) -> Result<CheckResult> {
    let spec = QuantSpec::grouped(4, 3)?;
    let mut max_err = 0.0f64;
    let mut points = 0usize;
    for _ in 0..8 {
        let w = Tensor::new(vec![4, 6], (0..24).map(|_| rng.gen_range(-1.0..1.0)).collect())?;
        let mut params = QuantParams::init_from_weight(&w, &spec)?;
        for v in params.m.data_mut() {
            *v = rng.gen_range(0.5..1.5);
        }
        let proj = Tensor::new(vec![4, 6], (0..24).map(|_| rng.gen_range(-1.0..1.0)).collect())?;

        let eval = |params: &QuantParams, want_grad: bool| -> Result<(f64, Option<Vec<f64>>)> {
            let mut g = Graph::new();
            let wv = g.constant(w.clone());
            let sv = g.constant(params.s.clone());
            let bv = g.constant(params.b.clone());
            let mv = g.leaf(params.m.clone(), want_grad);
            let out = g.apply_custom(
                Box::new(WeightFakeQuant { spec, rounding: Rounding::HalfEven }),
                &[wv, sv, bv, mv],
            )?;
            let p = g.constant(proj.clone());
            let prod = g.mul(out, p)?;
            let loss = g.sum(prod)?;
            let value = g.value(loss).item()?;
            if want_grad {
                g.backward(loss)?;
                Ok((value, g.grad(mv).map(|s| s.to_vec())))
            } else {
                Ok((value, None))
            }
        };

        let (_, grad) = eval(&params, true)?;
        let grad = grad.expect("m requires grad");
        for gi in 0..params.m.numel() {
            let mut plus = params.clone();
            plus.m.data_mut()[gi] += FD_STEP;
            let mut minus = params.clone();
            minus.m.data_mut()[gi] -= FD_STEP;
            let fd = (eval(&plus, false)?.0 - eval(&minus, false)?.0) / (2.0 * FD_STEP);
            max_err = max_err.max(rel_err(grad[gi], fd));
            points += 1;
        }
    }
    Ok(CheckResult {
        name: "magnitude_fd".into(),
        max_rel_err: max_err,
        tolerance: MAGNITUDE_TOL,
        points,
        pass: max_err <= MAGNITUDE_TOL,
    })
}

/// The straight-through rules vs an independent scalar implementation,
/// exactly (bit for bit).
fn ste_closed_form_check(rng: &mut ChaCha8Rng) -> Result<CheckResult> {
    let mut max_abs = 0.0f64;
    let mut points = 0usize;
    for trial in 0..12 {
        let spec = if trial % 2 == 0 {
            QuantSpec::grouped(2 + (trial as u8 % 7), 3)?
        } else {
            QuantSpec::per_channel(2 + (trial as u8 % 7))?
        };
        let (rows, cols) = (3, 7);
        let w = Tensor::new(
            vec![rows, cols],
            (0..rows * cols).map(|_| rng.gen_range(-2.0..2.0)).collect(),
        )?;
        let (mins, maxs) = crate::quant::minmax_per_group(&w, &spec)?;
        let (mut s, b) = crate::quant::init_scale_bias(&mins, &maxs, spec.bits)?;
        // shrink some scales so a few elements clip
        for (i, v) in s.data_mut().iter_mut().enumerate() {
            if i % 2 == 0 {
                *v *= 0.6;
            }
        }
        let mut params = QuantParams { s, b, m: Tensor::filled(mins.shape().to_vec(), 1.0), frozen_sb: false };
        for v in params.m.data_mut() {
            *v = rng.gen_range(0.5..2.0);
        }
        let upstream: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();

        // graph-side gradients
        let mut g = Graph::new();
        let wv = g.leaf(w.clone(), true);
        let sv = g.leaf(params.s.clone(), true);
        let bv = g.leaf(params.b.clone(), true);
        let mv = g.leaf(params.m.clone(), true);
        let out = g.apply_custom(
            Box::new(WeightFakeQuant { spec, rounding: Rounding::HalfEven }),
            &[wv, sv, bv, mv],
        )?;
        let proj = g.constant(Tensor::new(vec![rows, cols], upstream.clone())?);
        let prod = g.mul(out, proj)?;
        let loss = g.sum(prod)?;
        g.backward(loss)?;

        // independent scalar rules, written out longhand
        let view = GroupView::for_weight(&w, &spec)?;
        let (qn, qp) = spec.grid_bounds();
        let mut o_w = vec![0.0; rows * cols];
        let mut o_s = vec![0.0; view.group_count()];
        let mut o_b = vec![0.0; view.group_count()];
        let mut o_m = vec![0.0; view.group_count()];
        for r in 0..rows {
            for c in 0..cols {
                let gi = view.group_of(r, c);
                let (sv, bv, mv) = (params.s.data()[gi], params.b.data()[gi], params.m.data()[gi]);
                let idx = r * cols + c;
                let u = (w.data()[idx] - bv) / sv;
                let q = u.round_ties_even().clamp(qn as f64, qp as f64);
                let go = upstream[idx];
                if u >= qn as f64 && u <= qp as f64 {
                    o_w[idx] = go * mv;
                    o_s[gi] += go * mv * (q - u);
                } else {
                    o_s[gi] += go * mv * q;
                    o_b[gi] += go * mv;
                }
                o_m[gi] += go * (mv * (sv * q + bv)) / mv; // d/dm of m*(s*q+b)
            }
        }

        let cmp = |got: Option<&[f64]>, want: &[f64]| -> f64 {
            got.expect("grad present")
                .iter()
                .zip(want)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max)
        };
        max_abs = max_abs.max(cmp(g.grad(wv), &o_w));
        max_abs = max_abs.max(cmp(g.grad(sv), &o_s));
        max_abs = max_abs.max(cmp(g.grad(bv), &o_b));
        max_abs = max_abs.max(cmp(g.grad(mv), &o_m));
        points += rows * cols + 3 * view.group_count();
    }
    Ok(CheckResult {
        name: "ste_closed_form".into(),
        max_rel_err: max_abs,
        tolerance: 0.0,
        points,
        pass: max_abs == 0.0,
    })
}

/// Activation quantizer pass-through gradient vs the independent rule.
fn activation_ste_check(rng: &mut ChaCha8Rng) -> Result<CheckResult> {
    let mut max_abs = 0.0f64;
    let mut points = 0usize;
    for _ in 0..10 {
        let x = Tensor::new(vec![4, 5], (0..20).map(|_| rng.gen_range(-2.0..2.0)).collect())?;
        let upstream: Vec<f64> = (0..20).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut g = Graph::new();
        let xv = g.leaf(x.clone(), true);
        let out = g.apply_custom(Box::new(crate::quant::ActivationFakeQuant { bits: 8 }), &[xv])?;
        let proj = g.constant(Tensor::new(vec![4, 5], upstream.clone())?);
        let prod = g.mul(out, proj)?;
        let loss = g.sum(prod)?;
        g.backward(loss)?;

        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for &v in x.data() {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        let (s, b) = init_scale_bias_value(lo, hi, 8);
        let (qn, qp) = grid_bounds(8);
        let want: Vec<f64> = x
            .data()
            .iter()
            .zip(&upstream)
            .map(|(&v, &go)| {
                let u = (v - b) / s;
                if u >= qn as f64 && u <= qp as f64 {
                    go
                } else {
                    0.0
                }
            })
            .collect();
        for (a, b) in g.grad(xv).expect("grad present").iter().zip(&want) {
            max_abs = max_abs.max((a - b).abs());
            points += 1;
        }
    }
    Ok(CheckResult {
        name: "activation_ste_contract".into(),
        max_rel_err: max_abs,
        tolerance: 0.0,
        points,
        pass: max_abs == 0.0,
    })
}

/// FD check of the model loss gradient wrt a LoRA `A` matrix through an
/// 8-bit quantizer, in round-bypass surrogate mode with a boundary filter.
fn model_lora_fd_check(rng: &mut ChaCha8Rng) -> Result<CheckResult> {
    let spec = QuantSpec::per_channel(8)?;
    let config = TinyLmConfig {
        vocab_size: 64,
        d_model: 16,
        n_layers: 1,
        n_heads: 2,
        ffn_hidden: 24,
        context_length: 6,
        quant: Some(spec),
        activation_bits: None,
    };
    let mut model = build_model(&config, AblationSetting::S5, 2, 2.0, 17)?;
    // give B some mass so the A gradient path is non-vacuous
    for block in &mut model.blocks {
        for proj in 0..7 {
            for v in block.linear_mut(proj).adapter.b.data_mut() {
                *v = rng.gen_range(-0.05..0.05);
            }
        }
    }
    model.freeze_scale_offset();

    let batch: Vec<Vec<u8>> = (0..2)
        .map(|s| (0..7u8).map(|i| (i * 19 + s * 7 + 3) % 64).collect())
        .collect();

    let eval = |model: &mut crate::model::TinyLm, want_grad: bool| -> Result<(f64, Option<Vec<f64>>)> {
        let mut g = Graph::new();
        let out = model.forward_batch(&mut g, &batch, crate::adapter::Phase::Main, true, Rounding::Bypass)?;
        let value = g.value(out.loss).item()?;
        if !want_grad {
            return Ok((value, None));
        }
        g.backward(out.loss)?;
        let BoundWeight::Live(bound) = out.blocks[0][0] else {
            return Err(Error::Invalid("expected a live layer".into()));
        };
        Ok((value, g.grad(bound.lora_a).map(|s| s.to_vec())))
    };

    let (_, grads) = eval(&mut model, true)?;
    let grads = grads.expect("A requires grad");

    // boundary filter: a coordinate qualifies if every weight element it
    // perturbs keeps its clip in/out status across the whole FD interval
    let layer = model.blocks[0].linear(0).clone();
    let eff = layer.effective_weight()?;
    let q = layer.quant.as_ref().expect("quantized layer");
    let view = GroupView::for_weight(&eff, &spec)?;
    let (qn, qp) = spec.grid_bounds();
    let (rank, c_in) = layer.adapter.a.dims2()?;
    let (c_out, _) = layer.adapter.b.dims2()?;
    let certified = |i: usize, j: usize| -> bool {
        for p in 0..c_out {
            let du = (layer.adapter.alpha * layer.adapter.b.data()[p * rank + i]).abs() * 2.0 * FD_STEP;
            let gi = view.group_of(p, j);
            let s = q.params.s.data()[gi];
            let b = q.params.b.data()[gi];
            let u = (eff.data()[p * view.cols + j] - b) / s;
            let du = du / s;
            let margin = 4.0 * du + 1e-9;
            // must not cross qn or qp
            if (u - qn as f64).abs() < margin || (u - qp as f64).abs() < margin {
                return false;
            }
        }
        true
    };

    let mut max_err = 0.0f64;
    let mut points = 0usize;
    let mut attempts = 0usize;
    while points < 10 && attempts < 400 {
        attempts += 1;
        let i = rng.gen_range(0..rank);
        let j = rng.gen_range(0..c_in);
        if !certified(i, j) {
            continue;
        }
        let idx = i * c_in + j;
        let original = model.blocks[0].linear(0).adapter.a.data()[idx];
        model.blocks[0].linear_mut(0).adapter.a.data_mut()[idx] = original + FD_STEP;
        let (fp, _) = eval(&mut model, false)?;
        model.blocks[0].linear_mut(0).adapter.a.data_mut()[idx] = original - FD_STEP;
        let (fm, _) = eval(&mut model, false)?;
        model.blocks[0].linear_mut(0).adapter.a.data_mut()[idx] = original;
        let fd = (fp - fm) / (2.0 * FD_STEP);
        max_err = max_err.max(rel_err(grads[idx], fd));
        points += 1;
    }
    if points < 10 {
        return Err(Error::Invalid(format!(
            "boundary filter certified only {points} coordinates"
        )));
    }
    Ok(CheckResult {
        name: "model_lora_fd_surrogate".into(),
        max_rel_err: max_err,
        tolerance: SMOOTH_TOL,
        points,
        pass: max_err <= SMOOTH_TOL,
    })
}

/// Run every gradient check and collect per-section results.
pub fn run_full_suite(seed: u64) -> Result<GradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sections = Vec::new();
    for check in smooth_op_checks() {
        sections.push(run_op_check(&check, &mut rng, SMOOTH_TOL)?);
    }
    sections.push(magnitude_fd_check(&mut rng)?);
    sections.push(ste_closed_form_check(&mut rng)?);
    sections.push(activation_ste_check(&mut rng)?);
    sections.push(model_lora_fd_check(&mut rng)?);
    Ok(GradcheckReport { sections })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_suite_passes() {
        let report = run_full_suite(2024).unwrap();
        for section in &report.sections {
            assert!(
                section.pass,
                "{}: max rel err {} over tolerance {} ({} points)",
                section.name, section.max_rel_err, section.tolerance, section.points
            );
        }
    }
}
