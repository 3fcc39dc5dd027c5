//! Transformer encoder backbone (frozen after surrogate pretraining), the
//! always-trainable classification head, and trainable-parameter accounting.

mod forward;
mod pretrain;

pub use forward::{
    embed, forward, forward_batch, inject_prompt, PaddedBatch, ATTENTION_MASK_BIAS, LN_EPS,
};
pub use pretrain::{pretrain_and_freeze, PretrainOutcome};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{self, TensorEntry};
use crate::prompts::PromptComponents;
use crate::rng::SeededRng;
use crate::tensor::{Param, Tensor};

/// Token id 0 is the classification position, token id 1 the padding filler.
pub const CLS_TOKEN: usize = 0;
pub const PAD_TOKEN: usize = 1;

pub const WEIGHT_INIT_STD: f32 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ffn: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
    pub n_classes: usize,
    /// Full-model parameter count of a reference backbone; when set it
    /// becomes the denominator of the trainable fraction.
    #[serde(default)]
    pub total_params_override: Option<u64>,
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let extents = [
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_ffn", self.d_ffn),
            ("vocab_size", self.vocab_size),
            ("max_positions", self.max_positions),
            ("n_classes", self.n_classes),
        ];
        for (name, value) in extents {
            if value == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.vocab_size <= PAD_TOKEN {
            return Err(Error::Config("vocab_size must cover the CLS and PAD tokens".into()));
        }
        Ok(())
    }
}

pub struct EncoderLayer {
    pub wq: Param,
    pub bq: Param,
    pub wk: Param,
    pub bk: Param,
    pub wv: Param,
    pub bv: Param,
    pub wo: Param,
    pub bo: Param,
    pub ln1_gain: Param,
    pub ln1_bias: Param,
    pub ffn_w1: Param,
    pub ffn_b1: Param,
    pub ffn_w2: Param,
    pub ffn_b2: Param,
    pub ln2_gain: Param,
    pub ln2_bias: Param,
}

impl EncoderLayer {
    fn init(idx: usize, d: usize, d_ffn: usize, rng: &mut SeededRng) -> Self {
        let name = |suffix: &str| format!("layer.{idx}.{suffix}");
        let weight = |suffix: &str, shape: Vec<usize>, rng: &mut SeededRng| {
            Param::new(Tensor::randn(name(suffix), shape, WEIGHT_INIT_STD, rng).trainable())
        };
        let zeros = |suffix: &str, shape: Vec<usize>| {
            Param::new(Tensor::zeros(name(suffix), shape).trainable())
        };
        let ones = |suffix: &str, shape: Vec<usize>| {
            Param::new(Tensor::filled(name(suffix), shape, 1.0).trainable())
        };
        Self {
            wq: weight("wq", vec![d, d], rng),
            bq: zeros("bq", vec![d]),
            wk: weight("wk", vec![d, d], rng),
            bk: zeros("bk", vec![d]),
            wv: weight("wv", vec![d, d], rng),
            bv: zeros("bv", vec![d]),
            wo: weight("wo", vec![d, d], rng),
            bo: zeros("bo", vec![d]),
            ln1_gain: ones("ln1.gain", vec![d]),
            ln1_bias: zeros("ln1.bias", vec![d]),
            ffn_w1: weight("ffn.w1", vec![d, d_ffn], rng),
            ffn_b1: zeros("ffn.b1", vec![d_ffn]),
            ffn_w2: weight("ffn.w2", vec![d_ffn, d], rng),
            ffn_b2: zeros("ffn.b2", vec![d]),
            ln2_gain: ones("ln2.gain", vec![d]),
            ln2_bias: zeros("ln2.bias", vec![d]),
        }
    }

    fn params(&self) -> Vec<Param> {
        vec![
            self.wq.clone(),
            self.bq.clone(),
            self.wk.clone(),
            self.bk.clone(),
            self.wv.clone(),
            self.bv.clone(),
            self.wo.clone(),
            self.bo.clone(),
            self.ln1_gain.clone(),
            self.ln1_bias.clone(),
            self.ffn_w1.clone(),
            self.ffn_b1.clone(),
            self.ffn_w2.clone(),
            self.ffn_b2.clone(),
            self.ln2_gain.clone(),
            self.ln2_bias.clone(),
        ]
    }
}

pub struct EncoderStack {
    pub config: BackboneConfig,
    pub token_table: Param,
    pub pos_table: Param,
    pub layers: Vec<EncoderLayer>,
    pub final_gain: Param,
    pub final_bias: Param,
    frozen: bool,
}

impl EncoderStack {
    pub fn init(config: &BackboneConfig, rng: &SeededRng) -> Result<Self> {
        config.validate()?;
        let mut rng = rng.derive("backbone-init");
        let d = config.d_model;
        let token_table = Param::new(
            Tensor::randn("token_table", vec![config.vocab_size, d], WEIGHT_INIT_STD, &mut rng)
                .trainable(),
        );
        let pos_table = Param::new(
            Tensor::randn("pos_table", vec![config.max_positions, d], WEIGHT_INIT_STD, &mut rng)
                .trainable(),
        );
        let layers = (0..config.n_layers)
            .map(|i| EncoderLayer::init(i, d, config.d_ffn, &mut rng))
            .collect();
        Ok(Self {
            config: config.clone(),
            token_table,
            pos_table,
            layers,
            final_gain: Param::new(Tensor::filled("final_norm.gain", vec![d], 1.0).trainable()),
            final_bias: Param::new(Tensor::zeros("final_norm.bias", vec![d]).trainable()),
            frozen: false,
        })
    }

    /// All stack tensors, in a fixed order.
    pub fn params(&self) -> Vec<Param> {
        let mut params = vec![self.token_table.clone(), self.pos_table.clone()];
        for layer in &self.layers {
            params.extend(layer.params());
        }
        params.push(self.final_gain.clone());
        params.push(self.final_bias.clone());
        params
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn assert_frozen(&self) -> Result<()> {
        if !self.frozen || self.params().iter().any(|p| p.is_trainable()) {
            return Err(Error::Contract(
                "backbone must be frozen before prompt training".into(),
            ));
        }
        Ok(())
    }

    /// Mark every stack tensor non-trainable and return the content checksum.
    pub fn freeze(&mut self) -> u64 {
        for p in self.params() {
            p.set_trainable(false);
            p.zero_grad();
        }
        self.frozen = true;
        self.checksum()
    }

    /// CRC-64 over tensor names and little-endian values, in parameter order.
    pub fn checksum(&self) -> u64 {
        let mut bytes = Vec::new();
        for p in self.params() {
            let t = p.borrow();
            bytes.extend_from_slice(t.name.as_bytes());
            bytes.extend_from_slice(&io::encode_f32(&t.values));
        }
        io::crc64(&bytes)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let entries: Vec<TensorEntry> = self
            .params()
            .iter()
            .map(|p| {
                let t = p.borrow();
                TensorEntry { name: t.name.clone(), shape: t.shape.clone(), values: t.values.clone() }
            })
            .collect();
        io::save_container(path, &entries)
    }

    /// Load a snapshot written by `save` after freezing. The loaded stack is
    /// frozen: snapshots exist to pin the backbone across runs.
    pub fn load_frozen(path: &std::path::Path, config: &BackboneConfig) -> Result<Self> {
        let entries = io::load_container(path)?;
        let mut stack = Self::init(config, &SeededRng::new(0))?;
        let params = stack.params();
        if entries.len() != params.len() {
            return Err(Error::Compatibility(format!(
                "snapshot holds {} tensors, config expects {}",
                entries.len(),
                params.len()
            )));
        }
        for (entry, param) in entries.iter().zip(&params) {
            let mut t = param.borrow_mut();
            if entry.name != t.name || entry.shape != t.shape {
                return Err(Error::Compatibility(format!(
                    "snapshot tensor {} {:?} does not match expected {} {:?}",
                    entry.name, entry.shape, t.name, t.shape
                )));
            }
            t.values = entry.values.clone();
        }
        stack.freeze();
        Ok(stack)
    }
}

/// d -> d (tanh) -> K readout over the CLS state; always trainable.
pub struct ClassificationHead {
    pub proj_w: Param,
    pub proj_b: Param,
    pub out_w: Param,
    pub out_b: Param,
}

impl ClassificationHead {
    pub fn init(d: usize, n_classes: usize, rng: &SeededRng) -> Self {
        let mut rng = rng.derive("head-init");
        Self {
            proj_w: Param::new(
                Tensor::randn("head.proj_w", vec![d, d], WEIGHT_INIT_STD, &mut rng).trainable(),
            ),
            proj_b: Param::new(Tensor::zeros("head.proj_b", vec![d]).trainable()),
            out_w: Param::new(
                Tensor::randn("head.out_w", vec![d, n_classes], WEIGHT_INIT_STD, &mut rng)
                    .trainable(),
            ),
            out_b: Param::new(Tensor::zeros("head.out_b", vec![n_classes]).trainable()),
        }
    }

    pub fn params(&self) -> Vec<Param> {
        vec![self.proj_w.clone(), self.proj_b.clone(), self.out_w.clone(), self.out_b.clone()]
    }

    pub fn n_classes(&self) -> usize {
        self.out_w.shape()[1]
    }

    pub fn snapshot(&self) -> Vec<(String, Vec<f32>)> {
        self.params()
            .iter()
            .map(|p| {
                let t = p.borrow();
                (t.name.clone(), t.values.clone())
            })
            .collect()
    }

    pub fn restore(&self, snapshot: &[(String, Vec<f32>)]) {
        for ((_, values), param) in snapshot.iter().zip(self.params()) {
            param.borrow_mut().values = values.clone();
        }
    }
}

/// Exact integer parameter counts, split trainable vs frozen.
#[derive(Debug, Clone, Serialize)]
pub struct ParameterAccounting {
    pub total: u64,
    pub trainable: u64,
    pub frozen: u64,
    pub trainable_fraction: f64,
    /// Per-component trainable counts: (component, count).
    pub breakdown: Vec<(String, u64)>,
}

/// Enumerate every tensor of the stack, head, and prompt components.
pub fn count_parameters(
    stack: &EncoderStack,
    head: &ClassificationHead,
    prompts: &PromptComponents,
) -> Result<ParameterAccounting> {
    let count = |params: &[Param]| -> u64 { params.iter().map(|p| p.numel() as u64).sum() };
    let stack_count = count(&stack.params());
    let head_count = count(&head.params());
    let prompt_count = count(&prompts.prompt_group_params());
    let encoder_count = count(&prompts.encoder_group_params());

    let trainable: u64 = stack
        .params()
        .iter()
        .chain(head.params().iter())
        .chain(prompts.all_params().iter())
        .filter(|p| p.is_trainable())
        .map(|p| p.numel() as u64)
        .sum();
    let breakdown = vec![
        ("stack".to_string(), stack_count),
        ("head".to_string(), head_count),
        ("prompt".to_string(), prompt_count),
        ("encoder".to_string(), encoder_count),
    ];
    finish_accounting(
        stack.config.total_params_override,
        stack_count + head_count + prompt_count + encoder_count,
        trainable,
        breakdown,
    )
}

/// Shape arithmetic for the trainable side; lets `params` report reference
/// shapes (e.g. a 550M-parameter backbone) without instantiating them.
pub fn accounting_from_shapes(
    d: usize,
    n_classes: usize,
    n_std: usize,
    n_xpe: usize,
    bottleneck: usize,
    total_params_override: Option<u64>,
) -> Result<ParameterAccounting> {
    let head = (d * d + d + d * n_classes + n_classes) as u64;
    let std_prompt = (n_std * d) as u64;
    let pseudo = (n_xpe * d) as u64;
    let encoder =
        if n_xpe > 0 { (d * bottleneck + bottleneck + bottleneck * d + d) as u64 } else { 0 };
    let trainable = head + std_prompt + pseudo + encoder;
    let breakdown = vec![
        ("head".to_string(), head),
        ("std_prompt".to_string(), std_prompt),
        ("pseudo_prompt".to_string(), pseudo),
        ("encoder".to_string(), encoder),
    ];
    finish_accounting(total_params_override, trainable, trainable, breakdown)
}

fn finish_accounting(
    total_override: Option<u64>,
    actual_total: u64,
    trainable: u64,
    breakdown: Vec<(String, u64)>,
) -> Result<ParameterAccounting> {
    let total = match total_override {
        Some(n) if n < trainable => {
            return Err(Error::Config(format!(
                "total_params_override {n} is smaller than the trainable count {trainable}"
            )));
        }
        Some(n) => n,
        None => actual_total,
    };
    Ok(ParameterAccounting {
        total,
        trainable,
        frozen: total - trainable,
        trainable_fraction: trainable as f64 / total as f64,
        breakdown,
    })
}
