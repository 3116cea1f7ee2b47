//! Analytic trainable-parameter accounting over named architecture shapes.
//!
//! No weights are allocated: a [`CatalogEntry`] is pure shape metadata, and
//! [`audit_params`] counts quantizer groups and adapter parameters from the
//! per-layer projection shapes alone.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::quant::{Granularity, GroupView};

/// Shape metadata for one named architecture.
#[derive(Debug, Clone, Serialize)]
pub struct CatalogEntry {
    pub name: &'static str,
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub ffn_hidden: usize,
    pub vocab_size: usize,
}

/// The seven per-layer projections that are quantized and adapted.
pub const PROJECTION_KINDS: [&str; 7] = ["q", "k", "v", "o", "gate", "up", "down"];

impl CatalogEntry {
    /// `(name, c_out, c_in)` for every linear in one transformer block.
    pub fn block_linear_shapes(&self) -> [(&'static str, usize, usize); 7] {
        let d = self.d_model;
        let f = self.ffn_hidden;
        [
            ("q", d, d),
            ("k", d, d),
            ("v", d, d),
            ("o", d, d),
            ("gate", f, d),
            ("up", f, d),
            ("down", d, f),
        ]
    }

    /// Total parameter count: embeddings, output head, all block linears,
    /// and the RMS-norm gains.
    pub fn total_params(&self) -> u64 {
        let d = self.d_model as u64;
        let per_block: u64 = self
            .block_linear_shapes()
            .iter()
            .map(|(_, c_out, c_in)| (*c_out as u64) * (*c_in as u64))
            .sum::<u64>()
            + 2 * d; // attention + ffn norm gains
        let embeddings = 2 * self.vocab_size as u64 * d; // token table + head
        self.n_layers as u64 * per_block + embeddings + d // final norm
    }
}

/// Built-in shape catalog.
pub fn catalog() -> Vec<CatalogEntry> {
    vec![
        CatalogEntry {
            name: "llama-7b",
            n_layers: 32,
            d_model: 4096,
            n_heads: 32,
            ffn_hidden: 11008,
            vocab_size: 32000,
        },
        CatalogEntry {
            name: "llama-13b",
            n_layers: 40,
            d_model: 5120,
            n_heads: 40,
            ffn_hidden: 13824,
            vocab_size: 32000,
        },
    ]
}

pub fn lookup(name: &str) -> Result<CatalogEntry> {
    catalog()
        .into_iter()
        .find(|e| e.name.eq_ignore_ascii_case(name))
        .ok_or_else(|| {
            let known: Vec<&str> = catalog().iter().map(|e| e.name).collect();
            Error::Config(format!("unknown architecture {name:?}; known: {known:?}"))
        })
}

/// Analytic parameter counts for one (architecture, quantizer, rank) choice.
#[derive(Debug, Clone, Serialize)]
pub struct ParamAudit {
    pub arch: String,
    pub granularity: Granularity,
    pub rank: usize,
    /// Quantization groups across all quantized linears.
    pub groups: u64,
    /// Scale + offset parameters (2 per group).
    pub count_sb: u64,
    /// Magnitude parameters (1 per group).
    pub count_m: u64,
    /// Adapter parameters, `rank * (c_in + c_out)` per linear.
    pub count_ab: u64,
    pub total_params: u64,
    /// `(count_m + count_ab) / total_params` — the fraction that stays
    /// trainable after the warm-up freeze.
    pub fraction_of_total: f64,
}

impl ParamAudit {
    pub fn count_m_ab(&self) -> u64 {
        self.count_m + self.count_ab
    }
}

/// Count `s`/`b`, `m`, and `A`/`B` parameters for every projection of the
/// named architecture under the given granularity and adapter rank.
pub fn audit_params(entry: &CatalogEntry, granularity: Granularity, rank: usize) -> Result<ParamAudit> {
    if rank == 0 {
        return Err(Error::Config("rank must be positive".into()));
    }
    let mut groups: u64 = 0;
    let mut count_ab: u64 = 0;
    for (_, c_out, c_in) in entry.block_linear_shapes() {
        let view = GroupView::new(c_out, c_in, granularity)?;
        groups += view.group_count() as u64;
        count_ab += (rank * (c_in + c_out)) as u64;
    }
    groups *= entry.n_layers as u64;
    count_ab *= entry.n_layers as u64;
    let total = entry.total_params();
    let count_m = groups;
    Ok(ParamAudit {
        arch: entry.name.to_string(),
        granularity,
        rank,
        groups,
        count_sb: 2 * groups,
        count_m,
        count_ab,
        total_params: total,
        fraction_of_total: (count_m + count_ab) as f64 / total as f64,
    })
}
