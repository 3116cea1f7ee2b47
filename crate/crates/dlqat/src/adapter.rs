//! The quantized low-rank-adapted linear layer and the six ablation
//! settings controlling what trains.
//!
//! A layer owns a frozen base weight `W0`, a LoRA adapter `(A, B, alpha)`,
//! and per-group quantizer parameters. Its forward is
//! `Y = m * quant(W0 + alpha*B*A) * X (+ bias)`; the effective weight is
//! recomputed from the current `A`, `B` on every forward, never cached
//! across optimizer steps.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::quant::{
    init_scale_bias, minmax_per_group, QuantParams, QuantSpec, Rounding, WeightFakeQuant,
};
use crate::tensor::{matmul_nn, Tensor};

/// Training phase of the two-phase schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Phase {
    /// Initial iterations optimizing only the quantization space (s, b).
    Warmup,
    /// Everything after the warm-up freeze.
    Main,
}

impl Phase {
    pub fn label(self) -> &'static str {
        match self {
            Phase::Warmup => "warmup",
            Phase::Main => "main",
        }
    }
}

/// How the clipping bounds (through `s`, `b`) evolve during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClipMode {
    /// `s`, `b` recomputed from the effective weight's min/max every forward.
    MinMax,
    /// `s`, `b` trained during warm-up, then frozen as `s0`, `b0`.
    LearnThenFix,
    /// `s`, `b` trained throughout.
    Learn,
}

/// The six ablation settings. Setting 5 (magnitude + learn-then-fix
/// bounds) is the full method.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum AblationSetting {
    S1,
    S2,
    S3,
    S4,
    S5,
    S6,
}

pub const ALL_SETTINGS: [AblationSetting; 6] = [
    AblationSetting::S1,
    AblationSetting::S2,
    AblationSetting::S3,
    AblationSetting::S4,
    AblationSetting::S5,
    AblationSetting::S6,
];

impl AblationSetting {
    pub fn from_index(index: u8) -> Result<Self> {
        ALL_SETTINGS
            .get(index.wrapping_sub(1) as usize)
            .copied()
            .ok_or_else(|| Error::Config(format!("ablation setting must be 1..=6, got {index}")))
    }

    pub fn index(self) -> u8 {
        self as u8 + 1
    }

    pub fn magnitude_enabled(self) -> bool {
        matches!(self, AblationSetting::S4 | AblationSetting::S5 | AblationSetting::S6)
    }

    pub fn clip_mode(self) -> ClipMode {
        match self {
            AblationSetting::S1 | AblationSetting::S4 => ClipMode::MinMax,
            AblationSetting::S2 | AblationSetting::S5 => ClipMode::LearnThenFix,
            AblationSetting::S3 | AblationSetting::S6 => ClipMode::Learn,
        }
    }

    /// Whether the schedule has a dedicated warm-up phase for `s`, `b`.
    pub fn has_warmup(self) -> bool {
        self.clip_mode() == ClipMode::LearnThenFix
    }

    pub fn magnitude_label(self) -> &'static str {
        if self.magnitude_enabled() {
            "Learn"
        } else {
            "N/A"
        }
    }

    pub fn bounds_label(self) -> &'static str {
        match self.clip_mode() {
            ClipMode::MinMax => "MinMax",
            ClipMode::LearnThenFix => "Learn then fix",
            ClipMode::Learn => "Learn",
        }
    }
}

/// The trainable parameter kinds of one quantized linear layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, serde::Serialize)]
pub enum ParamKind {
    Magnitude,
    Scale,
    Offset,
    LoraA,
    LoraB,
}

impl ParamKind {
    pub fn label(self) -> &'static str {
        match self {
            ParamKind::Magnitude => "m",
            ParamKind::Scale => "s",
            ParamKind::Offset => "b",
            ParamKind::LoraA => "A",
            ParamKind::LoraB => "B",
        }
    }
}

/// Which parameter kinds receive updates in a phase.
///
/// During warm-up, settings whose bounds are learned (modes other than
/// MinMax) train only `{s, b}`. MinMax settings have no warm-up, so any
/// phase answers with their main set. `W0` is never included.
pub fn trainable_set(setting: AblationSetting, phase: Phase) -> &'static [ParamKind] {
    use ParamKind::*;
    const SB: &[ParamKind] = &[Scale, Offset];
    const AB: &[ParamKind] = &[LoraA, LoraB];
    const SBAB: &[ParamKind] = &[Scale, Offset, LoraA, LoraB];
    const MAB: &[ParamKind] = &[Magnitude, LoraA, LoraB];
    const MSBAB: &[ParamKind] = &[Magnitude, Scale, Offset, LoraA, LoraB];
    if phase == Phase::Warmup && setting.clip_mode() != ClipMode::MinMax {
        return SB;
    }
    match setting {
        AblationSetting::S1 | AblationSetting::S2 => AB,
        AblationSetting::S3 => SBAB,
        AblationSetting::S4 | AblationSetting::S5 => MAB,
        AblationSetting::S6 => MSBAB,
    }
}

/// Low-rank update `alpha * B * A` to a frozen weight.
#[derive(Debug, Clone)]
pub struct LoraAdapter {
    /// `[rank, c_in]`, Gaussian at init.
    pub a: Tensor,
    /// `[c_out, rank]`, zero at init so the update starts at zero.
    pub b: Tensor,
    pub alpha: f64,
    pub rank: usize,
}

impl LoraAdapter {
    pub fn init<R: Rng>(c_out: usize, c_in: usize, rank: usize, alpha: f64, rng: &mut R) -> Result<Self> {
        if rank == 0 || rank > c_in.min(c_out) / 2 {
            return Err(Error::Config(format!(
                "rank {rank} out of range for a {c_out}x{c_in} layer (need 1 <= r <= min/2)"
            )));
        }
        // std 1/sqrt(r) keeps |alpha*B*A| scale-stable across ranks
        let normal = Normal::new(0.0, 1.0 / (rank as f64).sqrt()).expect("valid std");
        let a: Vec<f64> = (0..rank * c_in).map(|_| normal.sample(rng)).collect();
        Ok(LoraAdapter {
            a: Tensor::new(vec![rank, c_in], a)?,
            b: Tensor::zeros(vec![c_out, rank]),
            alpha,
            rank,
        })
    }

    /// `alpha * B * A`, shaped like the base weight.
    pub fn delta(&self) -> Result<Tensor> {
        let (c_out, r) = self.b.dims2()?;
        let (_, c_in) = self.a.dims2()?;
        let mut d = matmul_nn(self.b.data(), self.a.data(), c_out, r, c_in);
        for v in &mut d {
            *v *= self.alpha;
        }
        Tensor::new(vec![c_out, c_in], d)
    }
}

/// Quantizer state of a [`DlqatLinear`]; absent when the layer runs in
/// plain float (quantization disabled in the model config).
#[derive(Debug, Clone)]
pub struct LayerQuant {
    pub spec: QuantSpec,
    pub params: QuantParams,
}

/// Linear layer with a frozen base weight, LoRA adapter, and group-wise
/// fake quantizer.
#[derive(Debug, Clone)]
pub struct DlqatLinear {
    pub name: String,
    /// Frozen base weight `[c_out, c_in]`; never receives gradient.
    pub w0: Tensor,
    pub adapter: LoraAdapter,
    pub quant: Option<LayerQuant>,
    pub setting: AblationSetting,
    pub bias: Option<Tensor>,
}

/// Graph handles produced by [`DlqatLinear::bind`]: the quantized weight
/// node plus the parameter leaves gradients are read from.
#[derive(Debug, Clone, Copy)]
pub struct BoundLinear {
    pub weight: Var,
    pub bias: Var,
    pub has_bias: bool,
    pub lora_a: Var,
    pub lora_b: Var,
    pub scale: Option<Var>,
    pub offset: Option<Var>,
    pub magnitude: Option<Var>,
}

impl BoundLinear {
    pub fn var_for(&self, kind: ParamKind) -> Option<Var> {
        match kind {
            ParamKind::Magnitude => self.magnitude,
            ParamKind::Scale => self.scale,
            ParamKind::Offset => self.offset,
            ParamKind::LoraA => Some(self.lora_a),
            ParamKind::LoraB => Some(self.lora_b),
        }
    }
}

impl DlqatLinear {
    pub fn new<R: Rng>(
        name: impl Into<String>,
        w0: Tensor,
        rank: usize,
        alpha: f64,
        spec: Option<QuantSpec>,
        setting: AblationSetting,
        rng: &mut R,
    ) -> Result<Self> {
        let (c_out, c_in) = w0.dims2()?;
        let adapter = LoraAdapter::init(c_out, c_in, rank, alpha, rng)?;
        let quant = match spec {
            Some(spec) => Some(LayerQuant {
                params: QuantParams::init_from_weight(&w0, &spec)?,
                spec,
            }),
            None => None,
        };
        Ok(DlqatLinear {
            name: name.into(),
            w0,
            adapter,
            quant,
            setting,
            bias: None,
        })
    }

    pub fn dims(&self) -> (usize, usize) {
        self.w0.dims2().expect("weights are 2-D by construction")
    }

    /// `W0 + alpha * B * A` as a plain tensor (no graph).
    pub fn effective_weight(&self) -> Result<Tensor> {
        let delta = self.adapter.delta()?;
        if delta.shape() != self.w0.shape() {
            return Err(Error::shape(
                "effective_weight",
                format!("{:?} vs {:?}", delta.shape(), self.w0.shape()),
            ));
        }
        let data = self
            .w0
            .data()
            .iter()
            .zip(delta.data())
            .map(|(w, d)| w + d)
            .collect();
        Tensor::new(self.w0.shape().to_vec(), data)
    }

    pub fn param(&self, kind: ParamKind) -> Option<&Tensor> {
        match kind {
            ParamKind::LoraA => Some(&self.adapter.a),
            ParamKind::LoraB => Some(&self.adapter.b),
            ParamKind::Magnitude => self.quant.as_ref().map(|q| &q.params.m),
            ParamKind::Scale => self.quant.as_ref().map(|q| &q.params.s),
            ParamKind::Offset => self.quant.as_ref().map(|q| &q.params.b),
        }
    }

    pub fn param_mut(&mut self, kind: ParamKind) -> Option<&mut Tensor> {
        match kind {
            ParamKind::LoraA => Some(&mut self.adapter.a),
            ParamKind::LoraB => Some(&mut self.adapter.b),
            ParamKind::Magnitude => self.quant.as_mut().map(|q| &mut q.params.m),
            ParamKind::Scale => self.quant.as_mut().map(|q| &mut q.params.s),
            ParamKind::Offset => self.quant.as_mut().map(|q| &mut q.params.b),
        }
    }

    /// Build this layer's weight subgraph for one step and return the
    /// parameter leaves. `for_training` gates which leaves require grad
    /// (per [`trainable_set`]) and whether MinMax-derived `s`, `b` are
    /// written back into the layer.
    pub fn bind(
        &mut self,
        g: &mut Graph,
        phase: Phase,
        for_training: bool,
        rounding: Rounding,
    ) -> Result<BoundLinear> {
        let tset = trainable_set(self.setting, phase);
        let wants = |kind: ParamKind| for_training && tset.contains(&kind);

        let w0 = g.constant(self.w0.clone());
        let lora_a = g.leaf(self.adapter.a.clone(), wants(ParamKind::LoraA));
        let lora_b = g.leaf(self.adapter.b.clone(), wants(ParamKind::LoraB));
        let ba = g.matmul(lora_b, lora_a)?;
        let delta = g.mul_scalar(ba, self.adapter.alpha)?;
        let w_eff = g.add(w0, delta)?;

        let bias_tensor = self.bias.clone().unwrap_or_else(|| Tensor::zeros(vec![0]));
        let has_bias = self.bias.is_some();
        let bias = g.constant(bias_tensor);

        let Some(quant) = self.quant.as_mut() else {
            return Ok(BoundLinear {
                weight: w_eff,
                bias,
                has_bias,
                lora_a,
                lora_b,
                scale: None,
                offset: None,
                magnitude: None,
            });
        };

        let (scale, offset) = match self.setting.clip_mode() {
            ClipMode::MinMax => {
                if for_training && phase == Phase::Warmup {
                    return Err(Error::Invalid(format!(
                        "setting {} has no warm-up phase",
                        self.setting.index()
                    )));
                }
                // derived from the current effective weight, excluded from
                // the optimizer
                let (mins, maxs) = minmax_per_group(g.value(w_eff), &quant.spec)?;
                let (s, b) = init_scale_bias(&mins, &maxs, quant.spec.bits)?;
                if for_training {
                    quant.params.s = s.clone();
                    quant.params.b = b.clone();
                }
                (g.constant(s), g.constant(b))
            }
            ClipMode::LearnThenFix => {
                if for_training {
                    match phase {
                        Phase::Warmup if quant.params.frozen_sb => {
                            return Err(Error::Invalid(
                                "warm-up forward after s,b were frozen".into(),
                            ));
                        }
                        Phase::Main if !quant.params.frozen_sb => {
                            return Err(Error::Invalid(
                                "main-phase forward before s,b were frozen".into(),
                            ));
                        }
                        _ => {}
                    }
                }
                (
                    g.leaf(quant.params.s.clone(), wants(ParamKind::Scale)),
                    g.leaf(quant.params.b.clone(), wants(ParamKind::Offset)),
                )
            }
            ClipMode::Learn => (
                g.leaf(quant.params.s.clone(), wants(ParamKind::Scale)),
                g.leaf(quant.params.b.clone(), wants(ParamKind::Offset)),
            ),
        };

        let magnitude = g.leaf(quant.params.m.clone(), wants(ParamKind::Magnitude));
        let weight = g.apply_custom(
            Box::new(WeightFakeQuant {
                spec: quant.spec,
                rounding,
            }),
            &[w_eff, scale, offset, magnitude],
        )?;

        Ok(BoundLinear {
            weight,
            bias,
            has_bias,
            lora_a,
            lora_b,
            scale: Some(scale),
            offset: Some(offset),
            magnitude: Some(magnitude),
        })
    }

    /// `Y = Wq * X (+ bias)` using an already bound weight.
    pub fn apply(&self, g: &mut Graph, bound: &BoundLinear, x: Var) -> Result<Var> {
        let y = g.matmul(bound.weight, x)?;
        if bound.has_bias {
            g.add_col_vec(y, bound.bias)
        } else {
            Ok(y)
        }
    }

    /// One-shot forward `X[c_in, T] -> Y[c_out, T]`.
    pub fn forward(&mut self, g: &mut Graph, x: Var, phase: Phase, for_training: bool) -> Result<Var> {
        let bound = self.bind(g, phase, for_training, Rounding::HalfEven)?;
        self.apply(g, &bound, x)
    }
}
