//! The three prompt mechanisms: a directly trained standard soft prompt
//! (SPT), the cross-prompt encoder (XPE) that maps a trainable pseudo prompt
//! through a shared row-wise encoder, and the DUAL hybrid that concatenates
//! both under a fixed token budget (standard rows first, encoded rows after).

mod cache;

pub use cache::{export_cached_prompt, load_cached_prompt, CachedPrompt, CacheMetadata};

use std::cell::Cell;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::{Param, Tape, Tensor, ValueId};

pub const INIT_STD: f32 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptMethod {
    Spt,
    Xpe,
    Dual,
}

impl std::fmt::Display for PromptMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Spt => write!(f, "spt"),
            Self::Xpe => write!(f, "xpe"),
            Self::Dual => write!(f, "dual"),
        }
    }
}

impl std::str::FromStr for PromptMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "spt" => Ok(Self::Spt),
            "xpe" => Ok(Self::Xpe),
            "dual" => Ok(Self::Dual),
            other => Err(Error::Config(format!("unknown prompt method '{other}'"))),
        }
    }
}

/// Fixed-length budget split between the standard and encoded segments.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DualBudget {
    pub total: usize,
    pub xpe_fraction: f64,
    pub n_std: usize,
    pub n_xpe: usize,
}

/// Allocate `round-half-up(total * fraction)` rows to the encoded segment
/// and the rest to the standard one.
pub fn split_budget(total: usize, xpe_fraction: f64) -> Result<(usize, usize)> {
    if total == 0 {
        return Err(Error::Config("prompt budget must be positive".into()));
    }
    if !(0.0..=1.0).contains(&xpe_fraction) {
        return Err(Error::Config(format!("xpe_fraction {xpe_fraction} outside [0, 1]")));
    }
    let n_xpe = (total as f64 * xpe_fraction + 0.5).floor() as usize;
    Ok((total - n_xpe, n_xpe))
}

impl DualBudget {
    pub fn new(total: usize, xpe_fraction: f64) -> Result<Self> {
        let (n_std, n_xpe) = split_budget(total, xpe_fraction)?;
        Ok(Self { total, xpe_fraction, n_std, n_xpe })
    }

    pub fn for_method(method: PromptMethod, total: usize, xpe_fraction: f64) -> Result<Self> {
        match method {
            PromptMethod::Spt => Self::new(total, 0.0),
            PromptMethod::Xpe => Self::new(total, 1.0),
            PromptMethod::Dual => Self::new(total, xpe_fraction),
        }
    }
}

/// Trainable soft prompt embeddings fed to the backbone directly.
#[derive(Debug)]
pub struct StandardSoftPrompt {
    pub rows: Param,
}

impl StandardSoftPrompt {
    pub fn init(n: usize, d: usize, rng: &mut SeededRng) -> Self {
        Self { rows: Param::new(Tensor::randn("prompt.std", vec![n, d], INIT_STD, rng).trainable()) }
    }
}

/// Trainable input matrix of the encoder; never reaches the backbone itself.
#[derive(Debug)]
pub struct PseudoPrompt {
    pub rows: Param,
}

impl PseudoPrompt {
    pub fn init(n: usize, d: usize, rng: &mut SeededRng) -> Self {
        Self {
            rows: Param::new(Tensor::randn("prompt.pseudo", vec![n, d], INIT_STD, rng).trainable()),
        }
    }
}

/// Residual bottleneck MLP d -> r -> d applied independently to each row.
/// The output affine map starts at zero, so encoding begins as the identity.
pub struct PromptEncoder {
    pub w1: Param,
    pub b1: Param,
    pub w2: Param,
    pub b2: Param,
    d: usize,
    bottleneck: usize,
    invocations: Cell<u64>,
}

impl PromptEncoder {
    pub fn init(d: usize, bottleneck: usize, rng: &mut SeededRng) -> Self {
        Self {
            w1: Param::new(Tensor::randn("encoder.w1", vec![d, bottleneck], INIT_STD, rng).trainable()),
            b1: Param::new(Tensor::zeros("encoder.b1", vec![bottleneck]).trainable()),
            w2: Param::new(Tensor::zeros("encoder.w2", vec![bottleneck, d]).trainable()),
            b2: Param::new(Tensor::zeros("encoder.b2", vec![d]).trainable()),
            d,
            bottleneck,
            invocations: Cell::new(0),
        }
    }

    pub fn width(&self) -> usize {
        self.d
    }

    pub fn bottleneck(&self) -> usize {
        self.bottleneck
    }

    /// Number of forward applications so far. The evaluation path must keep
    /// this constant: inference reads the cached matrix, not the encoder.
    pub fn invocations(&self) -> u64 {
        self.invocations.get()
    }

    pub fn params(&self) -> Vec<Param> {
        vec![self.w1.clone(), self.b1.clone(), self.w2.clone(), self.b2.clone()]
    }

    /// Record `rows + (gelu(rows . w1 + b1) . w2 + b2)` on the tape. Rows are
    /// independent: each output row is a function of its input row alone.
    pub fn encode_on_tape(&self, tape: &mut Tape, rows: ValueId) -> Result<ValueId> {
        let shape = tape.shape(rows).to_vec();
        if shape.last() != Some(&self.d) {
            return Err(Error::Dimension { op: "encode", lhs: shape, rhs: vec![self.d] });
        }
        self.invocations.set(self.invocations.get() + 1);
        let w1 = tape.leaf(&self.w1);
        let b1 = tape.leaf(&self.b1);
        let w2 = tape.leaf(&self.w2);
        let b2 = tape.leaf(&self.b2);
        let h = tape.matmul(rows, w1)?;
        let h = tape.add_bias(h, b1)?;
        let h = tape.gelu(h);
        let h = tape.matmul(h, w2)?;
        let h = tape.add_bias(h, b2)?;
        tape.add(rows, h)
    }

    /// Encode a single d-vector outside any training graph.
    pub fn encode_row(&self, row: &[f32]) -> Result<Vec<f32>> {
        if row.len() != self.d {
            return Err(Error::Dimension { op: "encode_row", lhs: vec![row.len()], rhs: vec![self.d] });
        }
        let mut tape = Tape::new();
        let input = tape.constant(row.to_vec(), vec![1, self.d]);
        let out = self.encode_on_tape(&mut tape, input)?;
        Ok(tape.values(out).to_vec())
    }

    /// Encode every row of a pseudo prompt; row i of the output depends only
    /// on row i of the input.
    pub fn encode_prompt(&self, pseudo: &PseudoPrompt) -> Result<Tensor> {
        let (values, shape) = {
            let t = pseudo.rows.borrow();
            (t.values.clone(), t.shape.clone())
        };
        let mut tape = Tape::new();
        let input = tape.constant(values, shape.clone());
        let out = self.encode_on_tape(&mut tape, input)?;
        Tensor::new("prompt.encoded", shape, tape.values(out).to_vec())
    }
}

/// The full trainable prompt state for one run.
pub struct PromptComponents {
    pub method: PromptMethod,
    pub budget: DualBudget,
    pub std: Option<StandardSoftPrompt>,
    pub pseudo: Option<PseudoPrompt>,
    pub encoder: Option<PromptEncoder>,
    d: usize,
}

impl PromptComponents {
    pub fn init(
        method: PromptMethod,
        total: usize,
        xpe_fraction: f64,
        d: usize,
        bottleneck: usize,
        rng: &SeededRng,
    ) -> Result<Self> {
        let budget = DualBudget::for_method(method, total, xpe_fraction)?;
        let std = (budget.n_std > 0)
            .then(|| StandardSoftPrompt::init(budget.n_std, d, &mut rng.derive("std-prompt")));
        let pseudo = (budget.n_xpe > 0)
            .then(|| PseudoPrompt::init(budget.n_xpe, d, &mut rng.derive("pseudo-prompt")));
        let encoder = (budget.n_xpe > 0)
            .then(|| PromptEncoder::init(d, bottleneck, &mut rng.derive("encoder")));
        Ok(Self { method, budget, std, pseudo, encoder, d })
    }

    pub fn width(&self) -> usize {
        self.d
    }

    /// "spt", "xpe", or "dual-<xpe percent>".
    pub fn method_label(&self) -> String {
        match self.method {
            PromptMethod::Spt => "spt".to_string(),
            PromptMethod::Xpe => "xpe".to_string(),
            PromptMethod::Dual => {
                format!("dual-{}", (self.budget.xpe_fraction * 100.0).round() as u32)
            }
        }
    }

    /// Record the assembled L x d prompt: standard rows first, encoded rows
    /// after, total length always the full budget.
    pub fn assemble_on_tape(&self, tape: &mut Tape) -> Result<ValueId> {
        self.check_consistent()?;
        let std_id = self.std.as_ref().map(|s| tape.leaf(&s.rows));
        let enc_id = match (&self.pseudo, &self.encoder) {
            (Some(pseudo), Some(encoder)) => {
                let rows = tape.leaf(&pseudo.rows);
                Some(encoder.encode_on_tape(tape, rows)?)
            }
            _ => None,
        };
        match (std_id, enc_id) {
            (Some(s), Some(e)) => tape.concat_rows(s, e),
            (Some(s), None) => Ok(s),
            (None, Some(e)) => Ok(e),
            (None, None) => Err(Error::Config("prompt has no components".into())),
        }
    }

    /// Evaluate the assembled prompt once, outside any training graph.
    pub fn assemble_static(&self) -> Result<Tensor> {
        let mut tape = Tape::new();
        let id = self.assemble_on_tape(&mut tape)?;
        Tensor::new("prompt.assembled", tape.shape(id).to_vec(), tape.values(id).to_vec())
    }

    fn check_consistent(&self) -> Result<()> {
        let std_rows = self.std.as_ref().map(|s| s.rows.shape()[0]).unwrap_or(0);
        let xpe_rows = self.pseudo.as_ref().map(|p| p.rows.shape()[0]).unwrap_or(0);
        if std_rows != self.budget.n_std || xpe_rows != self.budget.n_xpe {
            return Err(Error::Config(format!(
                "component lengths ({std_rows} std, {xpe_rows} encoded) do not match the \
                 budget ({}, {})",
                self.budget.n_std, self.budget.n_xpe
            )));
        }
        if self.budget.n_xpe > 0 && self.encoder.is_none() {
            return Err(Error::Config("encoded segment requested but no encoder present".into()));
        }
        Ok(())
    }

    /// Parameters trained at the soft-prompt learning rate.
    pub fn prompt_group_params(&self) -> Vec<Param> {
        self.std.iter().map(|s| s.rows.clone()).collect()
    }

    /// Parameters trained at the encoder learning rate (pseudo prompt and
    /// encoder weights; the classification head joins this group).
    pub fn encoder_group_params(&self) -> Vec<Param> {
        let mut params: Vec<Param> = self.pseudo.iter().map(|p| p.rows.clone()).collect();
        if let Some(encoder) = &self.encoder {
            params.extend(encoder.params());
        }
        params
    }

    pub fn all_params(&self) -> Vec<Param> {
        let mut params = self.prompt_group_params();
        params.extend(self.encoder_group_params());
        params
    }

    pub fn encoder_invocations(&self) -> u64 {
        self.encoder.as_ref().map(|e| e.invocations()).unwrap_or(0)
    }
}
