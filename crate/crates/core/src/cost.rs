//! Closed-form GPU memory and communication cost of a distributed
//! classification layer.
//!
//! With `d`-dimensional embeddings, `C` classes split over `k` GPUs and `N`
//! samples per GPU:
//!
//! ```text
//! Mem_w      = d · ⌈C/k⌉ · param_bytes
//! Mem_logits = N·k · ⌈C/k⌉ · logit_bytes
//! Mem_FC     = optimizer_mult · Mem_w + logit_mult · Mem_logits
//! ```
//!
//! SGD with momentum keeps three copies of each parameter (12 bytes), and the
//! margin losses keep two copies of each logit (8 bytes). All byte counts are
//! exact integers.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const GIB: f64 = (1u64 << 30) as f64;
pub const GB: f64 = 1e9;
/// Bytes per softmax-reduction scalar (FP32).
pub const REDUCTION_SCALAR_BYTES: u64 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FcMemSpec {
    pub dim: u64,
    pub classes: u64,
    pub gpus: u64,
    pub batch_per_gpu: u64,
    #[serde(default = "default_four")]
    pub param_bytes: u64,
    #[serde(default = "default_four")]
    pub logit_bytes: u64,
    #[serde(default = "default_optimizer_mult")]
    pub optimizer_mult: u64,
    #[serde(default = "default_logit_mult")]
    pub logit_mult: u64,
}

fn default_four() -> u64 {
    4
}

fn default_optimizer_mult() -> u64 {
    3
}

fn default_logit_mult() -> u64 {
    2
}

impl FcMemSpec {
    pub fn new(dim: u64, classes: u64, gpus: u64, batch_per_gpu: u64) -> Self {
        Self {
            dim,
            classes,
            gpus,
            batch_per_gpu,
            param_bytes: 4,
            logit_bytes: 4,
            optimizer_mult: 3,
            logit_mult: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("dim", self.dim),
            ("classes", self.classes),
            ("gpus", self.gpus),
            ("param_bytes", self.param_bytes),
            ("logit_bytes", self.logit_bytes),
            ("optimizer_mult", self.optimizer_mult),
            ("logit_mult", self.logit_mult),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidCostSpec(format!("{name} must be positive")));
        }
        if self.gpus > self.classes {
            return Err(Error::InvalidCostSpec(format!(
                "{} GPUs exceed {} classes",
                self.gpus, self.classes
            )));
        }
        Ok(())
    }

    /// Classes held by the largest shard.
    pub fn classes_per_gpu(&self) -> u64 {
        self.classes.div_ceil(self.gpus)
    }

    pub fn global_batch(&self) -> u64 {
        self.batch_per_gpu.saturating_mul(self.gpus)
    }
}

fn mul(terms: &[u64]) -> Result<u64> {
    terms
        .iter()
        .try_fold(1u64, |acc, &t| acc.checked_mul(t))
        .ok_or(Error::Overflow)
}

/// Bytes of classifier weights on one GPU.
pub fn mem_w(spec: &FcMemSpec) -> Result<u64> {
    spec.validate()?;
    mul(&[spec.dim, spec.classes_per_gpu(), spec.param_bytes])
}

/// Bytes of logits on one GPU: the full gathered batch against its shard.
pub fn mem_logits(spec: &FcMemSpec) -> Result<u64> {
    spec.validate()?;
    mul(&[
        spec.batch_per_gpu,
        spec.gpus,
        spec.classes_per_gpu(),
        spec.logit_bytes,
    ])
}

pub fn mem_fc(spec: &FcMemSpec) -> Result<u64> {
    let w = mul(&[spec.optimizer_mult, mem_w(spec)?])?;
    let l = mul(&[spec.logit_mult, mem_logits(spec)?])?;
    w.checked_add(l).ok_or(Error::Overflow)
}

/// Bytes exchanged by one softmax reduction over the global batch.
pub fn comm_overhead(global_batch: u64) -> u64 {
    global_batch.saturating_mul(REDUCTION_SCALAR_BYTES)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Text,
    Machine,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostBreakdown {
    /// `optimizer_mult · Mem_w`
    pub weights_bytes: u64,
    /// `logit_mult · Mem_logits`
    pub logits_bytes: u64,
}

/// Backbone-side figures under FP16 backbone / FP32 classifier training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixedPrecisionVariant {
    pub backbone_param_bytes: u64,
    pub classifier_param_bytes: u64,
    /// Classifier memory is unchanged: it stays in FP32.
    pub mem_fc_bytes: u64,
    /// Embeddings gathered from every GPU each step, at backbone precision.
    pub feature_allgather_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostReport {
    pub spec: FcMemSpec,
    pub mem_w_bytes: u64,
    pub mem_logits_bytes: u64,
    pub mem_fc_bytes: u64,
    /// One reduction of `N·k` FP32 scalars.
    pub comm_bytes_per_iter: u64,
    /// Reduction rounds per iteration with the max-subtraction round included.
    pub comm_rounds_per_iter: u64,
    pub breakdown: CostBreakdown,
    pub feature_allgather_bytes: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mixed: Option<MixedPrecisionVariant>,
}

impl CostReport {
    pub fn build(spec: &FcMemSpec, mixed: bool) -> Result<Self> {
        let mem_w_bytes = mem_w(spec)?;
        let mem_logits_bytes = mem_logits(spec)?;
        let mem_fc_bytes = mem_fc(spec)?;
        let global = spec.global_batch();
        let feature_allgather_bytes = mul(&[global, spec.dim, spec.param_bytes])?;
        let mixed = if mixed {
            Some(MixedPrecisionVariant {
                backbone_param_bytes: 2,
                classifier_param_bytes: spec.param_bytes,
                mem_fc_bytes,
                feature_allgather_bytes: mul(&[global, spec.dim, 2])?,
            })
        } else {
            None
        };
        Ok(Self {
            spec: *spec,
            mem_w_bytes,
            mem_logits_bytes,
            mem_fc_bytes,
            comm_bytes_per_iter: comm_overhead(global),
            comm_rounds_per_iter: 2,
            breakdown: CostBreakdown {
                weights_bytes: spec.optimizer_mult * mem_w_bytes,
                logits_bytes: spec.logit_mult * mem_logits_bytes,
            },
            feature_allgather_bytes,
            mixed,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn render(&self, format: ReportFormat) -> String {
        match format {
            ReportFormat::Machine => self.to_json(),
            ReportFormat::Text => self.to_text(),
        }
    }

    pub fn to_text(&self) -> String {
        let s = &self.spec;
        let mut out = String::new();
        let _ = writeln!(
            out,
            "classification layer: d={} C={} k={} GPU(s), N={} per GPU ({} classes per GPU)",
            s.dim,
            s.classes,
            s.gpus,
            s.batch_per_gpu,
            s.classes_per_gpu()
        );
        let line = |out: &mut String, label: &str, bytes: u64| {
            let _ = writeln!(out, "  {label:<28}{bytes:>16} bytes  {}", human(bytes));
        };
        line(&mut out, "Mem_w", self.mem_w_bytes);
        line(&mut out, "Mem_logits", self.mem_logits_bytes);
        line(
            &mut out,
            &format!("weights ({} x Mem_w)", s.optimizer_mult),
            self.breakdown.weights_bytes,
        );
        line(
            &mut out,
            &format!("logits ({} x Mem_logits)", s.logit_mult),
            self.breakdown.logits_bytes,
        );
        line(&mut out, "Mem_FC per GPU", self.mem_fc_bytes);
        let _ = writeln!(
            out,
            "communication: {} bytes per softmax reduction (global batch {} x {} B); {} rounds per iteration with max subtraction",
            self.comm_bytes_per_iter,
            s.global_batch(),
            REDUCTION_SCALAR_BYTES,
            self.comm_rounds_per_iter
        );
        line(&mut out, "feature allgather", self.feature_allgather_bytes);
        if let Some(m) = &self.mixed {
            let _ = writeln!(
                out,
                "mixed precision: backbone {} B/param, classifier {} B/param",
                m.backbone_param_bytes, m.classifier_param_bytes
            );
            line(&mut out, "Mem_FC per GPU (FP32)", m.mem_fc_bytes);
            line(&mut out, "feature allgather (FP16)", m.feature_allgather_bytes);
        }
        out
    }
}

/// `"12.40 GiB / 13.31 GB"` style rendering.
pub fn human(bytes: u64) -> String {
    format!("{:.2} GiB / {:.2} GB", bytes as f64 / GIB, bytes as f64 / GB)
}

pub fn cost_report(spec: &FcMemSpec, format: ReportFormat, mixed: bool) -> Result<String> {
    Ok(CostReport::build(spec, mixed)?.render(format))
}
