//! The attention seq2seq models: a baseline single-encoder architecture and
//! the two-channel variant that reads a syllable-structure token stream next
//! to the content text.
//!
//! Both share one parameter layout. The content channel is a bidirectional
//! LSTM over character embeddings; the structure channel (when present) is a
//! second bidirectional LSTM over S/B/M/E token embeddings whose length
//! equals the target syllable count. Attention memory is the two state
//! sequences joined along the time axis. Each decoder step consumes the
//! previous token's embedding, the aligned encoder state `h_i` and the
//! attention context `c_i`; logits project from `[s_i; c_i]`. The decoder's
//! first layer starts from the content encoder's final backward state.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{BOS_ID, EOS_ID};
use crate::layers::{
    attention_scores_projected, bilstm_encode, dense, lstm_stack_step, project_memory,
    AdditiveAttentionParams, AttentionBinding, BiLstmBinding, BiLstmParams, Dropout,
    EncoderStates, EncoderStatesRef, LstmStackBinding, LstmStackParams, LstmState, LstmStateRef,
};
use crate::melody::{StructureTokenSeq, STRUCT_VOCAB_SIZE};
use crate::tensor::{Tape, Tensor, TensorId};
use crate::{Error, Result};

// ── Hyperparameters and parameters ───────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelHyper {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden: usize,
    pub layers: usize,
    pub multi_channel: bool,
}

/// Structure-token embedding plus its own bidirectional encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct StructureChannel {
    /// `[6 × embed]`: S, B, M, E, PAD, EOS rows.
    pub embedding: Tensor,
    pub encoder: BiLstmParams,
}

/// Shared model type; `structure` decides whether this is the baseline or
/// the multi-channel architecture.
#[derive(Debug, Clone, PartialEq)]
pub struct Seq2Seq {
    pub hyper: ModelHyper,
    /// `[V × embed]`
    pub char_embedding: Tensor,
    pub content_encoder: BiLstmParams,
    pub structure: Option<StructureChannel>,
    /// Query width `hidden`, memory width `2·hidden`, attention dim `hidden`.
    pub attention: AdditiveAttentionParams,
    /// Layer-0 input: `[embed(y); h_i; c_i]` = `embed + 4·hidden`.
    pub decoder: LstmStackParams,
    /// `[V × 3·hidden]` over `[s_i; c_i]`.
    pub out_w: Tensor,
    /// `[V]`
    pub out_b: Tensor,
}

impl Seq2Seq {
    pub fn new(hyper: &ModelHyper, seed: u64) -> Seq2Seq {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let h = hyper.hidden;
        let e = hyper.embed_dim;
        let v = hyper.vocab_size;
        let char_embedding = crate::layers::uniform_init(vec![v, e], &mut rng);
        let content_encoder = BiLstmParams::init(e, h, hyper.layers, &mut rng);
        let structure = hyper.multi_channel.then(|| StructureChannel {
            embedding: crate::layers::uniform_init(vec![STRUCT_VOCAB_SIZE, e], &mut rng),
            encoder: BiLstmParams::init(e, h, hyper.layers, &mut rng),
        });
        let attention = AdditiveAttentionParams::init(h, 2 * h, h, &mut rng);
        let decoder = LstmStackParams::init(e + 4 * h, h, hyper.layers, &mut rng);
        let out_w = crate::layers::uniform_init(vec![v, 3 * h], &mut rng);
        let out_b = Tensor::zeros(vec![v]);
        Seq2Seq {
            hyper: hyper.clone(),
            char_embedding,
            content_encoder,
            structure,
            attention,
            decoder,
            out_w,
            out_b,
        }
    }

    pub fn baseline(hyper: &ModelHyper, seed: u64) -> Seq2Seq {
        let hyper = ModelHyper {
            multi_channel: false,
            ..hyper.clone()
        };
        Seq2Seq::new(&hyper, seed)
    }

    pub fn multi_channel(hyper: &ModelHyper, seed: u64) -> Seq2Seq {
        let hyper = ModelHyper {
            multi_channel: true,
            ..hyper.clone()
        };
        Seq2Seq::new(&hyper, seed)
    }

    pub fn is_multi_channel(&self) -> bool {
        self.structure.is_some()
    }

    /// Walk every parameter in a fixed order with a stable dotted name.
    pub fn visit_params(&self, mut f: impl FnMut(&str, &Tensor)) {
        let visit_stack = |f: &mut dyn FnMut(&str, &Tensor), prefix: &str, s: &LstmStackParams| {
            for (i, cell) in s.cells.iter().enumerate() {
                f(&format!("{prefix}.{i}.w"), &cell.w);
                f(&format!("{prefix}.{i}.b"), &cell.b);
            }
        };
        f("char_embedding", &self.char_embedding);
        visit_stack(&mut f, "content_encoder.fwd", &self.content_encoder.fwd);
        visit_stack(&mut f, "content_encoder.bwd", &self.content_encoder.bwd);
        if let Some(sc) = &self.structure {
            f("structure.embedding", &sc.embedding);
            visit_stack(&mut f, "structure.encoder.fwd", &sc.encoder.fwd);
            visit_stack(&mut f, "structure.encoder.bwd", &sc.encoder.bwd);
        }
        f("attention.w_query", &self.attention.w_query);
        f("attention.w_memory", &self.attention.w_memory);
        f("attention.v", &self.attention.v);
        visit_stack(&mut f, "decoder", &self.decoder);
        f("out_w", &self.out_w);
        f("out_b", &self.out_b);
    }

    /// Mutable walk in exactly the [`Seq2Seq::visit_params`] order.
    pub fn for_each_param_mut(&mut self, mut f: impl FnMut(&mut Tensor)) {
        let visit_stack = |f: &mut dyn FnMut(&mut Tensor), s: &mut LstmStackParams| {
            for cell in &mut s.cells {
                f(&mut cell.w);
                f(&mut cell.b);
            }
        };
        f(&mut self.char_embedding);
        visit_stack(&mut f, &mut self.content_encoder.fwd);
        visit_stack(&mut f, &mut self.content_encoder.bwd);
        if let Some(sc) = &mut self.structure {
            f(&mut sc.embedding);
            visit_stack(&mut f, &mut sc.encoder.fwd);
            visit_stack(&mut f, &mut sc.encoder.bwd);
        }
        f(&mut self.attention.w_query);
        f(&mut self.attention.w_memory);
        f(&mut self.attention.v);
        visit_stack(&mut f, &mut self.decoder);
        f(&mut self.out_w);
        f(&mut self.out_b);
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params(|_, t| n += t.numel());
        n
    }

    /// Bind all parameters onto a tape as gradient-collecting leaves, in
    /// [`Seq2Seq::visit_params`] order.
    pub fn bind(&self, tape: &mut Tape) -> ModelBinding {
        let mut flat = Vec::new();
        let mut leaf = |tape: &mut Tape, flat: &mut Vec<TensorId>, t: &Tensor| {
            let id = tape.leaf(t.clone().with_grad());
            flat.push(id);
            id
        };
        let bind_stack = |tape: &mut Tape, flat: &mut Vec<TensorId>, s: &LstmStackParams| {
            LstmStackBinding {
                cells: s
                    .cells
                    .iter()
                    .map(|c| {
                        let w = {
                            let id = tape.leaf(c.w.clone().with_grad());
                            flat.push(id);
                            id
                        };
                        let b = {
                            let id = tape.leaf(c.b.clone().with_grad());
                            flat.push(id);
                            id
                        };
                        crate::layers::LstmCellBinding { w, b, d_h: c.d_h }
                    })
                    .collect(),
            }
        };
        let char_embedding = leaf(tape, &mut flat, &self.char_embedding);
        let content = BiLstmBinding {
            fwd: bind_stack(tape, &mut flat, &self.content_encoder.fwd),
            bwd: bind_stack(tape, &mut flat, &self.content_encoder.bwd),
        };
        let structure = self.structure.as_ref().map(|sc| {
            let emb = leaf(tape, &mut flat, &sc.embedding);
            let enc = BiLstmBinding {
                fwd: bind_stack(tape, &mut flat, &sc.encoder.fwd),
                bwd: bind_stack(tape, &mut flat, &sc.encoder.bwd),
            };
            (emb, enc)
        });
        let attention = AttentionBinding {
            w_query: leaf(tape, &mut flat, &self.attention.w_query),
            w_memory: leaf(tape, &mut flat, &self.attention.w_memory),
            v: leaf(tape, &mut flat, &self.attention.v),
        };
        let decoder = bind_stack(tape, &mut flat, &self.decoder);
        let out_w = leaf(tape, &mut flat, &self.out_w);
        let out_b = leaf(tape, &mut flat, &self.out_b);
        ModelBinding {
            char_embedding,
            content,
            structure,
            attention,
            decoder,
            out_w,
            out_b,
            flat,
        }
    }
}

/// Tape ids of all bound parameters; `flat` mirrors the visit order.
pub struct ModelBinding {
    pub char_embedding: TensorId,
    pub content: BiLstmBinding,
    pub structure: Option<(TensorId, BiLstmBinding)>,
    pub attention: AttentionBinding,
    pub decoder: LstmStackBinding,
    pub out_w: TensorId,
    pub out_b: TensorId,
    pub flat: Vec<TensorId>,
}

impl ModelBinding {
    /// Gradients per parameter in visit order (zeros where untouched).
    pub fn gradients(&self, tape: &Tape) -> Vec<Vec<f64>> {
        self.flat
            .iter()
            .map(|&id| {
                tape.grad(id)
                    .map(|g| g.to_vec())
                    .unwrap_or_else(|| vec![0.0; tape.value(id).numel()])
            })
            .collect()
    }

    pub(crate) fn step_binding(&self) -> StepBinding {
        StepBinding {
            char_embedding: self.char_embedding,
            attention: self.attention,
            decoder: self.decoder.clone(),
            out_w: self.out_w,
            out_b: self.out_b,
        }
    }
}

// ── Decoder step machinery ───────────────────────────────────────────

/// The parameters one decoder step needs; decoding rebuilds this on a fresh
/// tape per step, training reuses the full binding.
#[derive(Clone)]
pub(crate) struct StepBinding {
    pub char_embedding: TensorId,
    pub attention: AttentionBinding,
    pub decoder: LstmStackBinding,
    pub out_w: TensorId,
    pub out_b: TensorId,
}

/// One decoder step: attention from `s_{i−1}`, then the stacked cell over
/// `[embed(y_{i−1}); h_i; c_i]`, then logits from `[s_i; c_i]`.
pub(crate) fn step_core(
    tape: &mut Tape,
    step: &StepBinding,
    memory: &[TensorId],
    memory_proj: &[TensorId],
    prev_token: u32,
    aligned: TensorId,
    prev_states: &[LstmStateRef],
    dropout: Option<&mut Dropout>,
) -> Result<(Vec<LstmStateRef>, TensorId)> {
    let query = prev_states.last().expect("non-empty decoder stack").h;
    let alpha = attention_scores_projected(tape, &step.attention, query, memory_proj)?;
    let context = tape.weighted_sum(alpha, memory)?;

    let emb_row = tape.embedding_lookup(step.char_embedding, &[prev_token as usize])?;
    let emb_len = tape.value(emb_row).numel();
    let emb = tape.reshape(emb_row, vec![emb_len])?;

    let x = tape.concat(&[emb, aligned, context], 0)?;
    let states = lstm_stack_step(tape, &step.decoder, x, prev_states, dropout)?;
    let top = states.last().expect("non-empty decoder stack").h;
    let proj_in = tape.concat(&[top, context], 0)?;
    let logits = dense(tape, step.out_w, step.out_b, proj_in)?;
    Ok((states, logits))
}

/// Everything [`Seq2Seq::decoder_step`] consumes, as plain values.
#[derive(Debug, Clone)]
pub struct DecoderStepInput {
    pub prev_token_id: u32,
    /// Aligned encoder state `h_i`, width `2·hidden`.
    pub aligned_state: Tensor,
    /// Context vector `c_i`, width `2·hidden`.
    pub context: Tensor,
    /// One state per decoder layer.
    pub prev_state: Vec<LstmState>,
}

impl Seq2Seq {
    /// Single decoder step with a caller-supplied context vector (the
    /// in-loop path recomputes attention from `s_{i−1}` instead).
    pub fn decoder_step(&self, input: &DecoderStepInput) -> Result<(Vec<LstmState>, Tensor)> {
        let h2 = 2 * self.hyper.hidden;
        if input.aligned_state.numel() != h2 || input.context.numel() != h2 {
            return Err(Error::DimMismatch {
                op: "decoder_step",
                lhs: input.aligned_state.shape().to_vec(),
                rhs: vec![h2],
            });
        }
        if input.prev_state.len() != self.hyper.layers {
            return Err(Error::contract(format!(
                "decoder_step expects {} layer states, got {}",
                self.hyper.layers,
                input.prev_state.len()
            )));
        }
        let mut tape = Tape::new();
        let step = self.bind_step_constants(&mut tape);
        let prev: Vec<LstmStateRef> = input
            .prev_state
            .iter()
            .map(|s| LstmStateRef::load(&mut tape, s))
            .collect();
        let aligned = tape.constant(input.aligned_state.clone());
        let context = tape.constant(input.context.clone());

        let emb_row = tape.embedding_lookup(step.char_embedding, &[input.prev_token_id as usize])?;
        let emb = tape.reshape(emb_row, vec![self.hyper.embed_dim])?;
        let x = tape.concat(&[emb, aligned, context], 0)?;
        let states = lstm_stack_step(&mut tape, &step.decoder, x, &prev, None)?;
        let top = states.last().expect("non-empty decoder stack").h;
        let proj_in = tape.concat(&[top, context], 0)?;
        let logits = dense(&mut tape, step.out_w, step.out_b, proj_in)?;

        let state_values = states.iter().map(|s| s.extract(&tape)).collect();
        Ok((state_values, tape.value(logits).clone()))
    }

    /// Bind only the step-relevant parameters as constants (no gradient).
    pub(crate) fn bind_step_constants(&self, tape: &mut Tape) -> StepBinding {
        StepBinding {
            char_embedding: tape.constant(self.char_embedding.clone()),
            attention: AttentionBinding {
                w_query: tape.constant(self.attention.w_query.clone()),
                w_memory: tape.constant(self.attention.w_memory.clone()),
                v: tape.constant(self.attention.v.clone()),
            },
            decoder: LstmStackBinding {
                cells: self
                    .decoder
                    .cells
                    .iter()
                    .map(|c| crate::layers::LstmCellBinding {
                        w: tape.constant(c.w.clone()),
                        b: tape.constant(c.b.clone()),
                        d_h: c.d_h,
                    })
                    .collect(),
            },
            out_w: tape.constant(self.out_w.clone()),
            out_b: tape.constant(self.out_b.clone()),
        }
    }
}

// ── Encoding ─────────────────────────────────────────────────────────

pub(crate) fn embed_tokens(
    tape: &mut Tape,
    table: TensorId,
    ids: &[usize],
) -> Result<Vec<TensorId>> {
    let width = tape.shape(table)[1];
    let mut out = Vec::with_capacity(ids.len());
    for &id in ids {
        let row = tape.embedding_lookup(table, &[id])?;
        out.push(tape.reshape(row, vec![width])?);
    }
    Ok(out)
}

pub(crate) fn encode_content_on_tape(
    tape: &mut Tape,
    binding: &ModelBinding,
    content_ids: &[u32],
    dropout: Option<&mut Dropout>,
) -> Result<EncoderStatesRef> {
    let ids: Vec<usize> = content_ids.iter().map(|&i| i as usize).collect();
    let inputs = embed_tokens(tape, binding.char_embedding, &ids)?;
    bilstm_encode(tape, &binding.content, &inputs, dropout)
}

pub(crate) fn encode_structure_on_tape(
    tape: &mut Tape,
    binding: &ModelBinding,
    structure: &StructureTokenSeq,
    dropout: Option<&mut Dropout>,
) -> Result<EncoderStatesRef> {
    let (emb, enc) = binding
        .structure
        .as_ref()
        .ok_or_else(|| Error::contract("this model has no structure channel"))?;
    let ids: Vec<usize> = structure
        .tokens()
        .iter()
        .map(|t| t.embedding_index())
        .collect();
    let inputs = embed_tokens(tape, *emb, &ids)?;
    bilstm_encode(tape, enc, &inputs, dropout)
}

impl Seq2Seq {
    /// Bidirectional states over the embedded content tokens.
    pub fn encode_content(&self, content_ids: &[u32]) -> Result<EncoderStates> {
        let mut tape = Tape::new();
        let binding = self.bind(&mut tape);
        let enc = encode_content_on_tape(&mut tape, &binding, content_ids, None)?;
        Ok(enc.extract(&tape))
    }

    /// Bidirectional states over the structure tokens, one per target
    /// syllable position.
    pub fn encode_structure(&self, structure: &StructureTokenSeq) -> Result<EncoderStates> {
        let mut tape = Tape::new();
        let binding = self.bind(&mut tape);
        let enc = encode_structure_on_tape(&mut tape, &binding, structure, None)?;
        Ok(enc.extract(&tape))
    }

    /// Attention memory: structure states followed by content states along
    /// the time axis for the multi-channel model, content states alone for
    /// the baseline.
    pub fn attention_memory(
        &self,
        structure_states: Option<&EncoderStates>,
        content_states: &EncoderStates,
    ) -> Result<Vec<Tensor>> {
        if content_states.states.is_empty() {
            return Err(Error::contract("attention memory needs content states"));
        }
        let width = 2 * self.hyper.hidden;
        let mut memory = Vec::new();
        if let Some(ss) = structure_states {
            for s in &ss.states {
                if s.numel() != width {
                    return Err(Error::DimMismatch {
                        op: "attention_memory",
                        lhs: s.shape().to_vec(),
                        rhs: vec![width],
                    });
                }
                memory.push(s.clone());
            }
        }
        for s in &content_states.states {
            if s.numel() != width {
                return Err(Error::DimMismatch {
                    op: "attention_memory",
                    lhs: s.shape().to_vec(),
                    rhs: vec![width],
                });
            }
            memory.push(s.clone());
        }
        Ok(memory)
    }
}

// ── Teacher-forced forward ───────────────────────────────────────────

/// Per-call knobs of the training forward pass.
pub struct ForwardCtx<'a> {
    /// Chance that a step feeds the model's own previous argmax instead of
    /// the ground-truth token.
    pub sampling_prob: f64,
    pub sampling_rng: Option<&'a mut ChaCha12Rng>,
    pub dropout: Option<&'a mut Dropout>,
}

impl ForwardCtx<'_> {
    /// Pure teacher forcing, no dropout: fully deterministic.
    pub fn plain() -> ForwardCtx<'static> {
        ForwardCtx {
            sampling_prob: 0.0,
            sampling_rng: None,
            dropout: None,
        }
    }
}

/// Outcome of one teacher-forced pass, alive as long as its tape.
pub struct ForwardPass {
    pub loss: TensorId,
    pub step_logits: Vec<TensorId>,
    pub binding: ModelBinding,
}

pub(crate) fn argmax(data: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in data.iter().enumerate() {
        if v > data[best] {
            best = i;
        }
    }
    best
}

impl Seq2Seq {
    fn init_decoder_states(
        &self,
        tape: &mut Tape,
        final_backward: &LstmStateRef,
    ) -> Vec<LstmStateRef> {
        let mut states = Vec::with_capacity(self.hyper.layers);
        states.push(*final_backward);
        for _ in 1..self.hyper.layers {
            states.push(LstmStateRef::zeros(tape, self.hyper.hidden));
        }
        states
    }

    /// Run the decoder over `target_ids` plus an end marker, scoring each
    /// step against the ground truth. With `sampling_prob` > 0 a step's
    /// previous token is, with that probability, the model's own argmax
    /// prediction instead of the ground truth.
    pub fn forward_teacher_forced(
        &self,
        tape: &mut Tape,
        structure: Option<&StructureTokenSeq>,
        content_ids: &[u32],
        target_ids: &[u32],
        ctx: &mut ForwardCtx<'_>,
    ) -> Result<ForwardPass> {
        if !(0.0..=1.0).contains(&ctx.sampling_prob) {
            return Err(Error::contract(format!(
                "sampling_prob must lie in [0, 1], got {}",
                ctx.sampling_prob
            )));
        }
        if ctx.sampling_prob > 0.0 && ctx.sampling_rng.is_none() {
            return Err(Error::contract(
                "scheduled sampling needs a random stream",
            ));
        }
        if target_ids.is_empty() {
            return Err(Error::contract("cannot train on an empty target"));
        }
        if let Some(s) = structure {
            if self.structure.is_none() {
                return Err(Error::contract(
                    "structure tokens passed to a model without a structure channel",
                ));
            }
            if s.len() != target_ids.len() {
                return Err(Error::contract(format!(
                    "structure length {} != target length {}",
                    s.len(),
                    target_ids.len()
                )));
            }
        }

        let binding = self.bind(tape);
        let content_enc =
            encode_content_on_tape(tape, &binding, content_ids, ctx.dropout.as_deref_mut())?;
        let structure_enc = match structure {
            Some(s) => Some(encode_structure_on_tape(
                tape,
                &binding,
                s,
                ctx.dropout.as_deref_mut(),
            )?),
            None => None,
        };

        let mut memory: Vec<TensorId> = Vec::new();
        if let Some(se) = &structure_enc {
            memory.extend_from_slice(&se.states);
        }
        memory.extend_from_slice(&content_enc.states);
        let memory_proj = project_memory(tape, &binding.attention, &memory)?;

        let aligned_for = |i: usize| -> TensorId {
            match &structure_enc {
                Some(se) => se.states[i.min(se.states.len() - 1)],
                None => content_enc.states[i.min(content_enc.states.len() - 1)],
            }
        };

        let step = binding.step_binding();
        let mut states = self.init_decoder_states(tape, &content_enc.final_backward);
        let n_steps = target_ids.len() + 1;
        let mut step_logits = Vec::with_capacity(n_steps);
        let mut prev_token = BOS_ID;
        for i in 0..n_steps {
            if i > 0 {
                prev_token = target_ids[i - 1];
                if ctx.sampling_prob > 0.0 {
                    let rng = ctx.sampling_rng.as_deref_mut().expect("checked above");
                    if rng.random::<f64>() < ctx.sampling_prob {
                        let prev_logits = tape.data(step_logits[i - 1]);
                        prev_token = argmax(prev_logits) as u32;
                    }
                }
            }
            let aligned = aligned_for(i);
            let (next_states, logits) = step_core(
                tape,
                &step,
                &memory,
                &memory_proj,
                prev_token,
                aligned,
                &states,
                ctx.dropout.as_deref_mut(),
            )?;
            states = next_states;
            step_logits.push(logits);
        }

        let v = self.hyper.vocab_size;
        let mut rows = Vec::with_capacity(n_steps);
        for &l in &step_logits {
            rows.push(tape.reshape(l, vec![1, v])?);
        }
        let logits_mat = tape.concat(&rows, 0)?;
        let mut targets: Vec<usize> = target_ids.iter().map(|&t| t as usize).collect();
        targets.push(EOS_ID as usize);
        let mask = vec![true; n_steps];
        let loss = tape.cross_entropy(logits_mat, &targets, &mask)?;
        Ok(ForwardPass {
            loss,
            step_logits,
            binding,
        })
    }

    /// Finite-difference check of the whole teacher-forced loss against the
    /// tape's gradients. `O(param_count · forward)` — keep the model tiny.
    pub fn loss_grad_check(
        &mut self,
        structure: Option<&StructureTokenSeq>,
        content_ids: &[u32],
        target_ids: &[u32],
        eps: f64,
        tol: f64,
    ) -> Result<crate::tensor::GradCheckReport> {
        let loss_at = |model: &Seq2Seq| -> Result<f64> {
            let mut tape = Tape::new();
            let pass = model.forward_teacher_forced(
                &mut tape,
                structure,
                content_ids,
                target_ids,
                &mut ForwardCtx::plain(),
            )?;
            Ok(tape.data(pass.loss)[0])
        };

        let mut tape = Tape::new();
        let pass = self.forward_teacher_forced(
            &mut tape,
            structure,
            content_ids,
            target_ids,
            &mut ForwardCtx::plain(),
        )?;
        tape.backward(pass.loss)?;
        let analytic = pass.binding.gradients(&tape);
        drop(tape);

        let mut max_rel = 0.0f64;
        let mut param_idx = 0;
        let n_params = {
            let mut n = 0;
            self.visit_params(|_, _| n += 1);
            n
        };
        for p in 0..n_params {
            let numel = {
                let mut sizes = Vec::new();
                self.visit_params(|_, t| sizes.push(t.numel()));
                sizes[p]
            };
            for j in 0..numel {
                let mut orig = 0.0;
                let mut k = 0;
                self.for_each_param_mut(|t| {
                    if k == p {
                        orig = t.data()[j];
                        t.data_mut()[j] = orig + eps;
                    }
                    k += 1;
                });
                let plus = loss_at(self)?;
                k = 0;
                self.for_each_param_mut(|t| {
                    if k == p {
                        t.data_mut()[j] = orig - eps;
                    }
                    k += 1;
                });
                let minus = loss_at(self)?;
                k = 0;
                self.for_each_param_mut(|t| {
                    if k == p {
                        t.data_mut()[j] = orig;
                    }
                    k += 1;
                });
                let numeric = (plus - minus) / (2.0 * eps);
                let a = analytic[param_idx][j];
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0);
                max_rel = max_rel.max(rel);
            }
            param_idx += 1;
        }
        Ok(crate::tensor::GradCheckReport {
            max_rel_error: max_rel,
            pass: max_rel < tol,
        })
    }
}

// ── Snapshots ────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Parameter values plus hyperparameters; enough to rebuild the model
/// bit-exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSnapshot {
    pub hyper: ModelHyper,
    pub params: Vec<NamedTensor>,
}

impl Seq2Seq {
    pub fn snapshot(&self) -> ModelSnapshot {
        let mut params = Vec::new();
        self.visit_params(|name, t| {
            params.push(NamedTensor {
                name: name.into(),
                shape: t.shape().to_vec(),
                data: t.data().to_vec(),
            })
        });
        ModelSnapshot {
            hyper: self.hyper.clone(),
            params,
        }
    }

    pub fn from_snapshot(snapshot: &ModelSnapshot) -> Result<Seq2Seq> {
        let mut model = Seq2Seq::new(&snapshot.hyper, 0);
        let mut expected = Vec::new();
        model.visit_params(|name, t| expected.push((String::from(name), t.shape().to_vec())));
        if expected.len() != snapshot.params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter tensors, found {}",
                expected.len(),
                snapshot.params.len()
            )));
        }
        for (named, (name, shape)) in snapshot.params.iter().zip(&expected) {
            if &named.name != name {
                return Err(Error::Checkpoint(format!(
                    "parameter order mismatch: expected `{name}`, found `{}`",
                    named.name
                )));
            }
            if &named.shape != shape {
                return Err(Error::Checkpoint(format!(
                    "parameter `{name}` has shape {:?}, expected {shape:?}",
                    named.shape
                )));
            }
            let expected_len: usize = shape.iter().product();
            if named.data.len() != expected_len {
                return Err(Error::Checkpoint(format!(
                    "parameter `{name}` has {} values, expected {expected_len}",
                    named.data.len()
                )));
            }
        }
        let mut idx = 0;
        model.for_each_param_mut(|t| {
            t.data_mut().copy_from_slice(&snapshot.params[idx].data);
            idx += 1;
        });
        Ok(model)
    }
}
