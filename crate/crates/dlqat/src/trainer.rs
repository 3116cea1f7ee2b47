//! Two-phase training schedule and the six-setting ablation harness.
//!
//! Settings with learned-then-fixed clipping bounds first run
//! `warmup_sb_iters` iterations updating only `{s, b}`, freeze them as
//! `s0`, `b0`, discard the warm-up optimizer state, and then train the
//! main-phase set until `total_iters`. All other settings run a single
//! main phase from iteration 0. Batch order, initialization, and therefore
//! entire runs are pure functions of `(seed, config, data)`.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::adapter::{trainable_set, AblationSetting, ParamKind, Phase, ALL_SETTINGS};
use crate::data::Corpus;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::{build_model, perplexity, BoundWeight, TinyLm, TinyLmConfig};
use crate::optim::{AdamW, AdamWConfig};
use crate::quant::{QuantSpec, Rounding};
use crate::report::{
    AblationReport, AblationRow, AblationRun, DirectionalCheck, IterRecord, RunOutcome,
    TrainingReport,
};
use crate::tensor::fnv1a;

#[derive(Debug, Clone, serde::Serialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub total_iters: usize,
    pub warmup_sb_iters: usize,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub seed: u64,
    pub setting: AblationSetting,
    pub quant: Option<QuantSpec>,
    pub activation_bits: Option<u8>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 16,
            learning_rate: 2e-4,
            total_iters: 2000,
            warmup_sb_iters: 1000,
            lora_rank: 16,
            lora_alpha: 2.0,
            seed: 0,
            setting: AblationSetting::S5,
            quant: None,
            activation_bits: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(Error::Config(format!(
                "learning_rate must be finite and non-negative, got {}",
                self.learning_rate
            )));
        }
        if self.total_iters == 0 {
            return Err(Error::Config("total_iters must be at least 1".into()));
        }
        if self.setting.has_warmup() && self.warmup_sb_iters >= self.total_iters {
            return Err(Error::Config(format!(
                "warmup_sb_iters ({}) must be smaller than total_iters ({}) for learn-then-fix settings",
                self.warmup_sb_iters, self.total_iters
            )));
        }
        if self.lora_rank == 0 {
            return Err(Error::Config("lora_rank must be positive".into()));
        }
        Ok(())
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.learning_rate,
            ..AdamWConfig::default()
        }
    }
}

type ParamKey = (usize, ParamKind);

/// Joint fingerprint of every quantized layer's (s, b).
pub fn sb_fingerprint(model: &TinyLm) -> u64 {
    let mut bytes = Vec::new();
    for block in &model.blocks {
        for proj in 0..7 {
            if let Some(q) = &block.linear(proj).quant {
                bytes.extend(q.params.s.data().iter().flat_map(|v| v.to_le_bytes()));
                bytes.extend(q.params.b.data().iter().flat_map(|v| v.to_le_bytes()));
            }
        }
    }
    fnv1a(bytes)
}

fn eval_loss(model: &mut TinyLm, corpus: &Corpus) -> Result<(f64, f64)> {
    let ppl = perplexity(model, corpus.eval(), model.config.context_length)?;
    Ok((ppl.ln(), ppl))
}

/// Run the configured schedule on a model, returning the per-iteration
/// trace and final evaluation. A non-finite forward stops training and is
/// reported as [`RunOutcome::Diverged`].
pub fn run_training(model: &mut TinyLm, corpus: &Corpus, config: &TrainConfig) -> Result<TrainingReport> {
    run_training_observed(model, corpus, config, &mut |_, _, _| {})
}

/// [`run_training`] with a hook called after each optimizer step, for
/// byte-level change accounting in tests and diagnostics.
pub fn run_training_observed(
    model: &mut TinyLm,
    corpus: &Corpus,
    config: &TrainConfig,
    observer: &mut dyn FnMut(usize, Phase, &TinyLm),
) -> Result<TrainingReport> {
    config.validate()?;
    if model.setting != config.setting {
        return Err(Error::Config(format!(
            "model was built for setting {}, config asks for {}",
            model.setting.index(),
            config.setting.index()
        )));
    }
    let started = Instant::now();
    let context = model.config.context_length;
    let mut batch_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x9e37_79b9_7f4a_7c15);

    let (initial_eval_loss, initial_ppl) = eval_loss(model, corpus)?;

    let warmup_iters = if config.setting.has_warmup() {
        config.warmup_sb_iters
    } else {
        0
    };
    // settings without a warm-up phase must start frozen-consistent
    if !config.setting.has_warmup() {
        // nothing to freeze; LearnThenFix freezing happens at the boundary
    } else if warmup_iters == 0 {
        model.freeze_scale_offset();
    }

    let mut optimizer: AdamW<ParamKey> = AdamW::new(config.adamw());
    let mut records: Vec<IterRecord> = Vec::with_capacity(config.total_iters);
    let mut outcome = RunOutcome::Completed;
    let mut frozen_fp = if config.setting.has_warmup() && warmup_iters == 0 {
        Some(sb_fingerprint(model))
    } else {
        None
    };

    for iter in 0..config.total_iters {
        let phase = if iter < warmup_iters { Phase::Warmup } else { Phase::Main };
        // phase boundary: freeze s/b and start the main phase with fresh moments
        if config.setting.has_warmup() && iter == warmup_iters && warmup_iters > 0 {
            model.freeze_scale_offset();
            frozen_fp = Some(sb_fingerprint(model));
            optimizer = AdamW::new(config.adamw());
        }

        let batch = corpus.sample_batch(&mut batch_rng, config.batch_size, context)?;
        let mut graph = Graph::new();
        let forward = model.forward_batch(&mut graph, &batch, phase, true, Rounding::HalfEven);
        let out = match forward {
            Ok(out) => out,
            Err(Error::NonFinite { .. }) => {
                outcome = RunOutcome::Diverged { iter };
                break;
            }
            Err(e) => return Err(e),
        };
        let loss = graph.value(out.loss).item()?;
        if !loss.is_finite() {
            outcome = RunOutcome::Diverged { iter };
            break;
        }
        graph.backward(out.loss)?;

        let kinds = trainable_set(config.setting, phase);
        let mut sq_norms: BTreeMap<&'static str, f64> = BTreeMap::new();
        optimizer.begin_step();
        for (flat, bound) in out.blocks.iter().flatten().enumerate() {
            let BoundWeight::Live(bound) = bound else {
                continue;
            };
            let (block_idx, proj_idx) = (flat / 7, flat % 7);
            for &kind in kinds {
                let var = bound.var_for(kind).ok_or_else(|| {
                    Error::Invalid(format!("parameter kind {} is not bound", kind.label()))
                })?;
                let grad = graph
                    .grad(var)
                    .ok_or_else(|| {
                        Error::Invalid(format!(
                            "missing gradient for trainable parameter {} of layer {}",
                            kind.label(),
                            flat
                        ))
                    })?
                    .to_vec();
                *sq_norms.entry(kind.label()).or_insert(0.0) +=
                    grad.iter().map(|g| g * g).sum::<f64>();
                let param = model.blocks[block_idx]
                    .linear_mut(proj_idx)
                    .param_mut(kind)
                    .ok_or_else(|| {
                        Error::Invalid(format!("layer has no parameter of kind {}", kind.label()))
                    })?;
                optimizer.update((flat, kind), param.data_mut(), &grad)?;
            }
        }
        records.push(IterRecord {
            iter,
            phase: phase.label(),
            loss,
            grad_norms: sq_norms.into_iter().map(|(k, v)| (k, v.sqrt())).collect(),
        });
        observer(iter, phase, model);
    }

    let (final_eval_loss, final_ppl) = match outcome {
        RunOutcome::Completed => {
            let (l, p) = eval_loss(model, corpus)?;
            (Some(l), Some(p))
        }
        RunOutcome::Diverged { .. } => (None, None),
    };

    let warmup_run = records.iter().filter(|r| r.phase == "warmup").count();
    let main_run = records.len() - warmup_run;
    Ok(TrainingReport {
        config: serde_json::json!({
            "train": config,
            "model": model.config,
        }),
        outcome,
        warmup_iters_run: warmup_run,
        main_iters_run: main_run,
        initial_eval_loss,
        initial_perplexity: initial_ppl,
        final_eval_loss,
        final_perplexity: final_ppl,
        frozen_sb_fingerprint: frozen_fp,
        elapsed_ms: started.elapsed().as_millis() as u64,
        records,
    })
}

/// Deterministic per-run seed derived from the base seed and run labels.
pub fn derive_seed(base: u64, bits: u8, setting: AblationSetting, seed_index: usize) -> u64 {
    let mut x = base
        ^ (u64::from(bits) << 32)
        ^ (u64::from(setting.index()) << 40)
        ^ ((seed_index as u64) << 48);
    // splitmix64 finalizer
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Train all six settings at each requested bit width over `n_seeds`
/// seeds and aggregate final eval loss/perplexity per setting.
pub fn run_ablation(
    model_config: &TinyLmConfig,
    corpus: &Corpus,
    base: &TrainConfig,
    bits: &[u8],
    n_seeds: usize,
) -> Result<AblationReport> {
    if bits.is_empty() || n_seeds == 0 {
        return Err(Error::Config("ablation needs at least one bit width and one seed".into()));
    }
    let base_granularity = base
        .quant
        .map(|q| q.granularity)
        .or(model_config.quant.map(|q| q.granularity))
        .unwrap_or(crate::quant::Granularity::PerChannel);

    let mut runs = Vec::new();
    let mut rows = Vec::new();
    let mut directional = Vec::new();
    for &bit in bits {
        let spec = QuantSpec::new(bit, base_granularity)?;
        let mut per_setting_means: BTreeMap<u8, f64> = BTreeMap::new();
        for setting in ALL_SETTINGS {
            let mut losses = Vec::with_capacity(n_seeds);
            let mut ppls = Vec::with_capacity(n_seeds);
            let mut frozen_ok: Option<bool> = None;
            for seed_index in 0..n_seeds {
                let seed = derive_seed(base.seed, bit, setting, seed_index);
                let run_config = TrainConfig {
                    setting,
                    seed,
                    quant: Some(spec),
                    ..base.clone()
                };
                let model_cfg = TinyLmConfig {
                    quant: Some(spec),
                    activation_bits: base.activation_bits,
                    ..model_config.clone()
                };
                let mut model = build_model(
                    &model_cfg,
                    setting,
                    run_config.lora_rank,
                    run_config.lora_alpha,
                    seed,
                )?;
                let report = run_training(&mut model, corpus, &run_config)?;
                if let RunOutcome::Diverged { iter } = report.outcome {
                    return Err(Error::Invalid(format!(
                        "ablation run (bits {bit}, setting {}, seed {seed_index}) diverged at iteration {iter}",
                        setting.index()
                    )));
                }
                let sb_constant = report
                    .frozen_sb_fingerprint
                    .map(|fp| fp == sb_fingerprint(&model));
                frozen_ok = match (frozen_ok, sb_constant) {
                    (None, v) => v,
                    (Some(acc), Some(v)) => Some(acc && v),
                    (acc, None) => acc,
                };
                let loss = report.final_eval_loss.expect("completed run has eval");
                let ppl = report.final_perplexity.expect("completed run has eval");
                runs.push(AblationRun {
                    bits: bit,
                    setting: setting.index(),
                    seed_index,
                    seed,
                    final_eval_loss: loss,
                    final_perplexity: ppl,
                    sb_frozen_constant: sb_constant,
                });
                losses.push(loss);
                ppls.push(ppl);
            }
            let (mean_loss, std_loss) = mean_std(&losses);
            let (mean_ppl, std_ppl) = mean_std(&ppls);
            per_setting_means.insert(setting.index(), mean_loss);
            let learnable = trainable_learnable_label(setting);
            rows.push(AblationRow {
                bits: bit,
                setting: setting.index(),
                magnitude: setting.magnitude_label(),
                clipping_bounds: setting.bounds_label(),
                learnable_params: learnable,
                mean_eval_loss: mean_loss,
                std_eval_loss: std_loss,
                mean_perplexity: mean_ppl,
                std_perplexity: std_ppl,
                n_seeds,
            });
            let _ = frozen_ok;
        }
        let s5 = per_setting_means[&5];
        let s1 = per_setting_means[&1];
        let s2 = per_setting_means[&2];
        directional.push(DirectionalCheck {
            bits: bit,
            s5_mean: s5,
            s1_mean: s1,
            s2_mean: s2,
            s5_le_s1: s5 <= s1,
            s5_le_s2: s5 <= s2,
        });
    }
    Ok(AblationReport {
        config: serde_json::json!({
            "train": base,
            "model": model_config,
        }),
        bits: bits.to_vec(),
        n_seeds,
        runs,
        rows,
        directional,
    })
}

/// Table-style label like "s,b then m,A,B".
fn trainable_learnable_label(setting: AblationSetting) -> String {
    let main: Vec<&str> = trainable_set(setting, Phase::Main)
        .iter()
        .map(|k| k.label())
        .collect();
    if setting.has_warmup() {
        let warm: Vec<&str> = trainable_set(setting, Phase::Warmup)
            .iter()
            .map(|k| k.label())
            .collect();
        format!("{} then {}", warm.join(","), main.join(","))
    } else {
        main.join(",")
    }
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_corpus;
    use crate::model::ParamRole;
    use crate::quant::Granularity;

    fn toy_model_config(quant: Option<QuantSpec>) -> TinyLmConfig {
        TinyLmConfig {
            vocab_size: 256,
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            ffn_hidden: 24,
            context_length: 8,
            quant,
            activation_bits: None,
        }
    }

    fn toy_train_config(setting: AblationSetting, quant: Option<QuantSpec>) -> TrainConfig {
        TrainConfig {
            batch_size: 2,
            learning_rate: 2e-4,
            total_iters: 6,
            warmup_sb_iters: 3,
            lora_rank: 2,
            lora_alpha: 2.0,
            seed: 11,
            setting,
            quant,
            activation_bits: None,
        }
    }

    fn toy_corpus() -> Corpus {
        Corpus::from_bytes(synth_corpus(5, 3000), 0.9).unwrap()
    }

    #[test]
    fn phase_schedule_updates_exactly_the_trainable_set() {
        let spec = QuantSpec::grouped(4, 8).unwrap();
        let corpus = toy_corpus();
        let model_cfg = toy_model_config(Some(spec));
        let cfg = toy_train_config(AblationSetting::S5, Some(spec));
        let mut model = build_model(&model_cfg, AblationSetting::S5, 2, 2.0, cfg.seed).unwrap();

        let mut snapshots = vec![model.fingerprints()];
        run_training_observed(&mut model, &corpus, &cfg, &mut |_, _, m| {
            snapshots.push(m.fingerprints());
        })
        .unwrap();
        assert_eq!(snapshots.len(), cfg.total_iters + 1);

        for iter in 0..cfg.total_iters {
            let phase = if iter < cfg.warmup_sb_iters { Phase::Warmup } else { Phase::Main };
            let expected = trainable_set(cfg.setting, phase);
            let steps_into_phase = if phase == Phase::Warmup { iter } else { iter - cfg.warmup_sb_iters };
            for ((name, role, before), (_, _, after)) in
                snapshots[iter].iter().zip(&snapshots[iter + 1])
            {
                let changed = before != after;
                match role {
                    ParamRole::Trainable(kind) if expected.contains(kind) => {
                        // A's gradient is exactly zero on the first main
                        // step (B starts at zero), so only require change
                        // once the phase is warmed up
                        if steps_into_phase >= 1 {
                            assert!(changed, "iter {iter}: {name} should be training");
                        }
                    }
                    _ => assert!(!changed, "iter {iter}: {name} must be bitwise constant"),
                }
            }
        }
    }

    #[test]
    fn full_run_is_bitwise_deterministic() {
        let spec = QuantSpec::per_channel(4).unwrap();
        let corpus = toy_corpus();
        let model_cfg = toy_model_config(Some(spec));
        let cfg = toy_train_config(AblationSetting::S5, Some(spec));

        let mut m1 = build_model(&model_cfg, cfg.setting, 2, 2.0, cfg.seed).unwrap();
        let r1 = run_training(&mut m1, &corpus, &cfg).unwrap();
        let mut m2 = build_model(&model_cfg, cfg.setting, 2, 2.0, cfg.seed).unwrap();
        let r2 = run_training(&mut m2, &corpus, &cfg).unwrap();

        let t1: Vec<u64> = r1.records.iter().map(|r| r.loss.to_bits()).collect();
        let t2: Vec<u64> = r2.records.iter().map(|r| r.loss.to_bits()).collect();
        assert_eq!(t1, t2);
        assert_eq!(m1.fingerprints(), m2.fingerprints());
        assert_eq!(
            r1.final_perplexity.unwrap().to_bits(),
            r2.final_perplexity.unwrap().to_bits()
        );
    }

    #[test]
    fn zero_learning_rate_touches_nothing() {
        let spec = QuantSpec::per_channel(4).unwrap();
        // corpus with exactly one window so every batch is identical and the
        // loss trace is constant by construction
        let ctx = 8;
        let bytes: Vec<u8> = (0..(ctx + 1) as u8).map(|i| i * 3 + 1).collect();
        let mut raw = bytes.clone();
        raw.extend_from_slice(&bytes); // eval side gets a copy
        let corpus = Corpus::from_bytes(raw, 0.5).unwrap();

        let model_cfg = toy_model_config(Some(spec));
        let cfg = TrainConfig {
            learning_rate: 0.0,
            total_iters: 4,
            warmup_sb_iters: 2,
            ..toy_train_config(AblationSetting::S5, Some(spec))
        };
        let mut model = build_model(&model_cfg, cfg.setting, 2, 2.0, cfg.seed).unwrap();
        let before = model.fingerprints();
        let report = run_training(&mut model, &corpus, &cfg).unwrap();
        assert_eq!(before, model.fingerprints());
        let first = report.records[0].loss.to_bits();
        assert!(report.records.iter().all(|r| r.loss.to_bits() == first));
    }

    #[test]
    fn gradient_flow_in_main_phase() {
        let spec = QuantSpec::per_channel(4).unwrap();
        let corpus = toy_corpus();
        let model_cfg = toy_model_config(Some(spec));
        let cfg = TrainConfig {
            total_iters: 5,
            warmup_sb_iters: 2,
            learning_rate: 1e-3,
            ..toy_train_config(AblationSetting::S5, Some(spec))
        };
        let mut model = build_model(&model_cfg, cfg.setting, 2, 2.0, cfg.seed).unwrap();
        let report = run_training(&mut model, &corpus, &cfg).unwrap();
        let last = report.records.last().unwrap();
        assert_eq!(last.phase, "main");
        for kind in ["m", "A", "B"] {
            assert!(
                last.grad_norms[kind] > 0.0,
                "{kind} should receive gradient in the main phase"
            );
        }
        assert!(!last.grad_norms.contains_key("s"));
        assert!(!last.grad_norms.contains_key("b"));
    }

    #[test]
    fn warmup_boundary_counts_match_config() {
        let spec = QuantSpec::per_channel(3).unwrap();
        let corpus = toy_corpus();
        let model_cfg = toy_model_config(Some(spec));
        let cfg = toy_train_config(AblationSetting::S5, Some(spec));
        let mut model = build_model(&model_cfg, cfg.setting, 2, 2.0, cfg.seed).unwrap();
        let report = run_training(&mut model, &corpus, &cfg).unwrap();
        assert_eq!(report.warmup_iters_run, 3);
        assert_eq!(report.main_iters_run, 3);
        assert!(report.frozen_sb_fingerprint.is_some());
        // frozen s/b never move during main phase
        assert_eq!(report.frozen_sb_fingerprint.unwrap(), sb_fingerprint(&model));
    }

    #[test]
    fn learn_setting_has_no_warmup_phase() {
        let spec = QuantSpec::per_channel(4).unwrap();
        let corpus = toy_corpus();
        let model_cfg = toy_model_config(Some(spec));
        let cfg = toy_train_config(AblationSetting::S6, Some(spec));
        let mut model = build_model(&model_cfg, AblationSetting::S6, 2, 2.0, cfg.seed).unwrap();
        let report = run_training(&mut model, &corpus, &cfg).unwrap();
        assert_eq!(report.warmup_iters_run, 0);
        assert_eq!(report.main_iters_run, cfg.total_iters);
    }

    #[test]
    fn divergence_reports_iteration() {
        // S1 trains only the adapters; a preposterous learning rate pushes
        // both A and B to ~1e160 after one step, so the next step's B*A
        // product overflows to infinity and the forward reports non-finite
        let spec = QuantSpec::per_channel(4).unwrap();
        let corpus = toy_corpus();
        let model_cfg = toy_model_config(Some(spec));
        let cfg = TrainConfig {
            learning_rate: 1e160,
            total_iters: 30,
            warmup_sb_iters: 0,
            ..toy_train_config(AblationSetting::S1, Some(spec))
        };
        let mut model = build_model(&model_cfg, cfg.setting, 2, 2.0, cfg.seed).unwrap();
        let report = run_training(&mut model, &corpus, &cfg).unwrap();
        match report.outcome {
            RunOutcome::Diverged { iter } => assert!(iter > 0 && iter < 30, "diverged at {iter}"),
            RunOutcome::Completed => panic!("expected divergence under an absurd learning rate"),
        }
        assert!(report.final_perplexity.is_none());
    }

    #[test]
    fn ablation_report_structure() {
        let corpus = toy_corpus();
        let model_cfg = toy_model_config(None);
        let base = TrainConfig {
            total_iters: 3,
            warmup_sb_iters: 1,
            ..toy_train_config(AblationSetting::S5, None)
        };
        let report = run_ablation(&model_cfg, &corpus, &base, &[3, 4], 2).unwrap();
        assert_eq!(report.rows.len(), 12); // 6 settings x 2 bit widths
        assert_eq!(report.runs.len(), 24);
        assert_eq!(report.directional.len(), 2);
        for row in &report.rows {
            assert_eq!(row.n_seeds, 2);
            assert!(row.mean_perplexity.is_finite());
        }
        // settings with a warm-up record the frozen fingerprint check
        for run in report.runs.iter().filter(|r| r.setting == 2 || r.setting == 5) {
            assert_eq!(run.sb_frozen_constant, Some(true));
        }
        // learnable-params labels mirror the schedule table
        let s5_row = report.rows.iter().find(|r| r.setting == 5).unwrap();
        assert_eq!(s5_row.learnable_params, "s,b then m,A,B");
        let s1_row = report.rows.iter().find(|r| r.setting == 1).unwrap();
        assert_eq!(s1_row.learnable_params, "A,B");
    }
}
