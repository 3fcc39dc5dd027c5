//! Embedding, prompt injection, and the pre-norm encoder forward pass.
//!
//! Sequence layout is `[CLS] ++ prompt ++ text`; pooling reads the CLS
//! position, so the pooled state's index does not move with the prompt
//! budget. Position embeddings cover the combined sequence. Masked key
//! positions receive a -1e9 additive bias before the attention softmax,
//! which underflows to an exactly zero weight in 32-bit arithmetic.

use crate::backbone::{ClassificationHead, EncoderStack, CLS_TOKEN, PAD_TOKEN};
use crate::error::{Error, Result};
use crate::tensor::{Tape, ValueId};

pub const LN_EPS: f32 = 1e-5;
pub const ATTENTION_MASK_BIAS: f32 = -1e9;

/// A batch padded to a common length, with an attention mask over real
/// tokens.
#[derive(Debug, Clone)]
pub struct PaddedBatch {
    pub token_ids: Vec<usize>,
    pub mask: Vec<bool>,
    pub batch: usize,
    pub len: usize,
    pub labels: Vec<usize>,
}

impl PaddedBatch {
    pub fn new(rows: &[(&[usize], usize)]) -> Self {
        let batch = rows.len();
        let len = rows.iter().map(|(tokens, _)| tokens.len()).max().unwrap_or(0);
        let mut token_ids = Vec::with_capacity(batch * len);
        let mut mask = Vec::with_capacity(batch * len);
        let mut labels = Vec::with_capacity(batch);
        for (tokens, label) in rows {
            token_ids.extend_from_slice(tokens);
            token_ids.extend(std::iter::repeat(PAD_TOKEN).take(len - tokens.len()));
            mask.extend(std::iter::repeat(true).take(tokens.len()));
            mask.extend(std::iter::repeat(false).take(len - tokens.len()));
            labels.push(*label);
        }
        Self { token_ids, mask, batch, len, labels }
    }
}

/// Token-table lookup for a padded batch; position embeddings are added
/// after prompt injection, over the combined sequence.
pub fn embed(
    tape: &mut Tape,
    stack: &EncoderStack,
    token_ids: &[usize],
    batch: usize,
    len: usize,
) -> Result<ValueId> {
    if token_ids.len() != batch * len {
        return Err(Error::Dimension {
            op: "embed",
            lhs: vec![batch, len],
            rhs: vec![token_ids.len()],
        });
    }
    if let Some(&bad) = token_ids.iter().find(|&&id| id >= stack.config.vocab_size) {
        return Err(Error::Index { what: "token id", index: bad, bound: stack.config.vocab_size });
    }
    let table = tape.leaf(&stack.token_table);
    let d = stack.config.d_model;
    tape.gather_rows(table, token_ids, vec![batch, len, d])
}

/// Build `[CLS] ++ prompt ++ tokens` per batch element, extend the mask with
/// ones over the CLS and prompt positions, and add position embeddings over
/// the combined sequence.
pub fn inject_prompt(
    tape: &mut Tape,
    stack: &EncoderStack,
    prompt: Option<ValueId>,
    token_embeds: ValueId,
    mask: &[bool],
) -> Result<(ValueId, Vec<bool>)> {
    let d = stack.config.d_model;
    let tok_shape = tape.shape(token_embeds).to_vec();
    let (batch, text_len) = (tok_shape[0], tok_shape[1]);
    let prompt_len = match prompt {
        Some(p) => {
            let psh = tape.shape(p).to_vec();
            if psh.len() != 2 || psh[1] != d {
                return Err(Error::Dimension { op: "inject_prompt", lhs: psh, rhs: vec![d] });
            }
            psh[0]
        }
        None => 0,
    };
    let seq_len = 1 + prompt_len + text_len;
    if seq_len > stack.config.max_positions {
        return Err(Error::Capacity { needed: seq_len, max: stack.config.max_positions });
    }

    let table = tape.leaf(&stack.token_table);
    let cls = tape.gather_rows(table, &[CLS_TOKEN], vec![1, d])?;
    let seq = tape.assemble_sequence(cls, prompt, token_embeds)?;

    let pos_ids: Vec<usize> = (0..batch).flat_map(|_| 0..seq_len).collect();
    let pos_table = tape.leaf(&stack.pos_table);
    let positions = tape.gather_rows(pos_table, &pos_ids, vec![batch, seq_len, d])?;
    let seq = tape.add(seq, positions)?;

    let mut full_mask = Vec::with_capacity(batch * seq_len);
    for row in mask.chunks_exact(text_len.max(1)).take(if text_len == 0 { 0 } else { batch }) {
        full_mask.extend(std::iter::repeat(true).take(1 + prompt_len));
        full_mask.extend_from_slice(row);
    }
    if text_len == 0 {
        for _ in 0..batch {
            full_mask.extend(std::iter::repeat(true).take(1 + prompt_len));
        }
    }
    Ok((seq, full_mask))
}

/// Pre-norm multi-head encoder over an injected sequence, CLS pooling, and
/// the classification head. Returns logits [batch, n_classes].
pub fn forward(
    tape: &mut Tape,
    stack: &EncoderStack,
    head: &ClassificationHead,
    seq: ValueId,
    mask: &[bool],
) -> Result<ValueId> {
    let cfg = &stack.config;
    let shape = tape.shape(seq).to_vec();
    if shape.len() != 3 || shape[2] != cfg.d_model {
        return Err(Error::Dimension { op: "forward", lhs: shape, rhs: vec![cfg.d_model] });
    }
    let (batch, seq_len, d) = (shape[0], shape[1], shape[2]);
    if mask.len() != batch * seq_len {
        return Err(Error::Dimension {
            op: "forward",
            lhs: vec![batch, seq_len],
            rhs: vec![mask.len()],
        });
    }
    let heads = cfg.n_heads;
    let head_dim = d / heads;

    // Additive key bias, one [seq, seq] block per (batch, head) group.
    let mut mask_bias = Vec::with_capacity(batch * heads * seq_len * seq_len);
    for b in 0..batch {
        let row: Vec<f32> = mask[b * seq_len..(b + 1) * seq_len]
            .iter()
            .map(|&keep| if keep { 0.0 } else { ATTENTION_MASK_BIAS })
            .collect();
        for _ in 0..heads * seq_len {
            mask_bias.extend_from_slice(&row);
        }
    }
    let mask_bias = tape.constant(mask_bias, vec![batch * heads, seq_len, seq_len]);
    let scale = 1.0 / (head_dim as f32).sqrt();

    let mut x = seq;
    for layer in &stack.layers {
        let ln1_g = tape.leaf(&layer.ln1_gain);
        let ln1_b = tape.leaf(&layer.ln1_bias);
        let normed = tape.layer_norm(x, ln1_g, ln1_b, LN_EPS)?;

        let (wq, bq) = (tape.leaf(&layer.wq), tape.leaf(&layer.bq));
        let (wk, bk) = (tape.leaf(&layer.wk), tape.leaf(&layer.bk));
        let (wv, bv) = (tape.leaf(&layer.wv), tape.leaf(&layer.bv));
        let q = tape.matmul(normed, wq)?;
        let q = tape.add_bias(q, bq)?;
        let k = tape.matmul(normed, wk)?;
        let k = tape.add_bias(k, bk)?;
        let v = tape.matmul(normed, wv)?;
        let v = tape.add_bias(v, bv)?;

        let qh = tape.split_heads(q, heads)?;
        let kh = tape.split_heads(k, heads)?;
        let vh = tape.split_heads(v, heads)?;

        let scores = tape.bmm_nt(qh, kh)?;
        let scores = tape.scale(scores, scale);
        let scores = tape.add(scores, mask_bias)?;
        let attn = tape.softmax_rows(scores);
        let ctx = tape.bmm_nn(attn, vh)?;
        let merged = tape.merge_heads(ctx, heads)?;

        let (wo, bo) = (tape.leaf(&layer.wo), tape.leaf(&layer.bo));
        let out = tape.matmul(merged, wo)?;
        let out = tape.add_bias(out, bo)?;
        x = tape.add(x, out)?;

        let ln2_g = tape.leaf(&layer.ln2_gain);
        let ln2_b = tape.leaf(&layer.ln2_bias);
        let normed = tape.layer_norm(x, ln2_g, ln2_b, LN_EPS)?;
        let (w1, b1) = (tape.leaf(&layer.ffn_w1), tape.leaf(&layer.ffn_b1));
        let (w2, b2) = (tape.leaf(&layer.ffn_w2), tape.leaf(&layer.ffn_b2));
        let h = tape.matmul(normed, w1)?;
        let h = tape.add_bias(h, b1)?;
        let h = tape.gelu(h);
        let h = tape.matmul(h, w2)?;
        let h = tape.add_bias(h, b2)?;
        x = tape.add(x, h)?;
    }

    let fin_g = tape.leaf(&stack.final_gain);
    let fin_b = tape.leaf(&stack.final_bias);
    let x = tape.layer_norm(x, fin_g, fin_b, LN_EPS)?;

    // CLS pooling: row 0 of every batch element.
    let cls_rows: Vec<usize> = (0..batch).map(|b| b * seq_len).collect();
    let pooled = tape.gather_rows(x, &cls_rows, vec![batch, d])?;

    let (pw, pb) = (tape.leaf(&head.proj_w), tape.leaf(&head.proj_b));
    let (ow, ob) = (tape.leaf(&head.out_w), tape.leaf(&head.out_b));
    let h = tape.matmul(pooled, pw)?;
    let h = tape.add_bias(h, pb)?;
    let h = tape.tanh(h);
    let logits = tape.matmul(h, ow)?;
    tape.add_bias(logits, ob)
}

/// Full pipeline for a padded batch: embed, inject, encode. Returns logits.
pub fn forward_batch(
    tape: &mut Tape,
    stack: &EncoderStack,
    head: &ClassificationHead,
    prompt: Option<ValueId>,
    batch: &PaddedBatch,
) -> Result<ValueId> {
    let embeds = embed(tape, stack, &batch.token_ids, batch.batch, batch.len)?;
    let (seq, mask) = inject_prompt(tape, stack, prompt, embeds, &batch.mask)?;
    forward(tape, stack, head, seq, &mask)
}
