//! Recurrent building blocks: LSTM cells and stacks, bidirectional
//! encoders, additive attention and the dense projection.
//!
//! Parameter structs own plain [`Tensor`] values; a forward pass first
//! *binds* them onto a [`Tape`] (leaf copies that collect gradient) and then
//! runs the math through the binding. Bindings are plain id structs, so
//! tests can also assemble them from hand-made leaves.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_chacha::ChaCha12Rng;

use crate::tensor::{Tape, Tensor, TensorId};
use crate::{Error, Result};

/// Weight range for uniform initialization.
pub const INIT_RANGE: f64 = 0.08;

pub(crate) fn uniform_init(shape: Vec<usize>, rng: &mut ChaCha12Rng) -> Tensor {
    let numel: usize = shape.iter().product();
    let data: Vec<f64> = (0..numel)
        .map(|_| rng.random_range(-INIT_RANGE..INIT_RANGE))
        .collect();
    Tensor::new(shape, data).expect("shape/data agree by construction")
}

// ── LSTM cell ────────────────────────────────────────────────────────

/// One LSTM cell: a fused gate matrix over `[x; h]` plus bias.
///
/// Gate order inside the `4·d_h` axis is input, forget, cell-candidate,
/// output. The forget-gate bias slice starts at 1.0.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmCellParams {
    /// `[(d_in + d_h) × 4·d_h]`
    pub w: Tensor,
    /// `[4·d_h]`
    pub b: Tensor,
    pub d_in: usize,
    pub d_h: usize,
}

impl LstmCellParams {
    pub fn init(d_in: usize, d_h: usize, rng: &mut ChaCha12Rng) -> Self {
        let w = uniform_init(vec![d_in + d_h, 4 * d_h], rng);
        let mut b = Tensor::zeros(vec![4 * d_h]);
        for v in &mut b.data_mut()[d_h..2 * d_h] {
            *v = 1.0;
        }
        LstmCellParams { w, b, d_in, d_h }
    }

    pub fn bind(&self, tape: &mut Tape) -> LstmCellBinding {
        LstmCellBinding {
            w: tape.leaf(self.w.clone().with_grad()),
            b: tape.leaf(self.b.clone().with_grad()),
            d_h: self.d_h,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LstmCellBinding {
    pub w: TensorId,
    pub b: TensorId,
    pub d_h: usize,
}

/// Hidden and cell vectors, as values (off-tape).
#[derive(Debug, Clone, PartialEq)]
pub struct LstmState {
    pub h: Tensor,
    pub c: Tensor,
}

impl LstmState {
    pub fn zeros(d_h: usize) -> Self {
        LstmState {
            h: Tensor::zeros(vec![d_h]),
            c: Tensor::zeros(vec![d_h]),
        }
    }
}

/// Hidden and cell vectors recorded on a tape.
#[derive(Debug, Clone, Copy)]
pub struct LstmStateRef {
    pub h: TensorId,
    pub c: TensorId,
}

impl LstmStateRef {
    pub fn zeros(tape: &mut Tape, d_h: usize) -> Self {
        LstmStateRef {
            h: tape.constant(Tensor::zeros(vec![d_h])),
            c: tape.constant(Tensor::zeros(vec![d_h])),
        }
    }

    pub fn load(tape: &mut Tape, state: &LstmState) -> Self {
        LstmStateRef {
            h: tape.constant(state.h.clone()),
            c: tape.constant(state.c.clone()),
        }
    }

    pub fn extract(&self, tape: &Tape) -> LstmState {
        LstmState {
            h: tape.value(self.h).clone(),
            c: tape.value(self.c).clone(),
        }
    }
}

/// One step: `c' = σ(f)·c + σ(i)·tanh(g)`, `h' = σ(o)·tanh(c')`, with gates
/// from `[x; h_prev]·W + b`.
pub fn lstm_cell_step(
    tape: &mut Tape,
    cell: &LstmCellBinding,
    x: TensorId,
    prev: &LstmStateRef,
) -> Result<LstmStateRef> {
    let d_h = cell.d_h;
    let z = tape.concat(&[x, prev.h], 0)?;
    let zw = tape.matmul(z, cell.w)?;
    let pre = tape.add(zw, cell.b)?;

    let i_pre = tape.slice(pre, 0, d_h)?;
    let f_pre = tape.slice(pre, d_h, d_h)?;
    let g_pre = tape.slice(pre, 2 * d_h, d_h)?;
    let o_pre = tape.slice(pre, 3 * d_h, d_h)?;

    let i = tape.sigmoid(i_pre);
    let f = tape.sigmoid(f_pre);
    let g = tape.tanh(g_pre);
    let o = tape.sigmoid(o_pre);

    let fc = tape.mul(f, prev.c)?;
    let ig = tape.mul(i, g)?;
    let c = tape.add(fc, ig)?;
    let c_act = tape.tanh(c);
    let h = tape.mul(o, c_act)?;
    Ok(LstmStateRef { h, c })
}

// ── Stacked cells ────────────────────────────────────────────────────

/// Layered LSTM: layer `ℓ`'s hidden state feeds layer `ℓ+1`.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmStackParams {
    pub cells: Vec<LstmCellParams>,
}

impl LstmStackParams {
    /// `d_in` feeds layer 0; upper layers read `d_h`.
    pub fn init(d_in: usize, d_h: usize, layers: usize, rng: &mut ChaCha12Rng) -> Self {
        let cells = (0..layers)
            .map(|l| LstmCellParams::init(if l == 0 { d_in } else { d_h }, d_h, rng))
            .collect();
        LstmStackParams { cells }
    }

    pub fn bind(&self, tape: &mut Tape) -> LstmStackBinding {
        LstmStackBinding {
            cells: self.cells.iter().map(|c| c.bind(tape)).collect(),
        }
    }

    pub fn d_h(&self) -> usize {
        self.cells[0].d_h
    }
}

#[derive(Debug, Clone)]
pub struct LstmStackBinding {
    pub cells: Vec<LstmCellBinding>,
}

impl LstmStackBinding {
    pub fn zero_states(&self, tape: &mut Tape) -> Vec<LstmStateRef> {
        self.cells
            .iter()
            .map(|c| LstmStateRef::zeros(tape, c.d_h))
            .collect()
    }
}

/// Advance every layer by one step. Dropout, when given, is applied to the
/// inputs of layers above the first — the non-recurrent connections between
/// stacked cells — never to the `h→h` path.
pub fn lstm_stack_step(
    tape: &mut Tape,
    stack: &LstmStackBinding,
    x: TensorId,
    prev: &[LstmStateRef],
    mut dropout: Option<&mut Dropout>,
) -> Result<Vec<LstmStateRef>> {
    if prev.len() != stack.cells.len() {
        return Err(Error::contract("stack state count != layer count"));
    }
    let mut states = Vec::with_capacity(stack.cells.len());
    let mut input = x;
    for (layer, (cell, prev_state)) in stack.cells.iter().zip(prev.iter()).enumerate() {
        if layer > 0 {
            if let Some(d) = dropout.as_deref_mut() {
                input = d.apply(tape, input)?;
            }
        }
        let next = lstm_cell_step(tape, cell, input, prev_state)?;
        input = next.h;
        states.push(next);
    }
    Ok(states)
}

// ── Bidirectional encoder ────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct BiLstmParams {
    pub fwd: LstmStackParams,
    pub bwd: LstmStackParams,
}

impl BiLstmParams {
    pub fn init(d_in: usize, d_h: usize, layers: usize, rng: &mut ChaCha12Rng) -> Self {
        BiLstmParams {
            fwd: LstmStackParams::init(d_in, d_h, layers, rng),
            bwd: LstmStackParams::init(d_in, d_h, layers, rng),
        }
    }

    pub fn bind(&self, tape: &mut Tape) -> BiLstmBinding {
        BiLstmBinding {
            fwd: self.fwd.bind(tape),
            bwd: self.bwd.bind(tape),
        }
    }
}

#[derive(Debug, Clone)]
pub struct BiLstmBinding {
    pub fwd: LstmStackBinding,
    pub bwd: LstmStackBinding,
}

/// Per-position concatenated states of a bidirectional pass, on-tape.
#[derive(Debug, Clone)]
pub struct EncoderStatesRef {
    /// `states[i] = [h_f(i); h_b(i)]`, each `[2·d_h]`, source order.
    pub states: Vec<TensorId>,
    /// Top-layer state of the backward RNN after it consumed the whole
    /// sequence (i.e. after reading position 0).
    pub final_backward: LstmStateRef,
    /// Top-layer state of the forward RNN after the last position.
    pub final_forward: LstmStateRef,
}

/// Same states extracted to values.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderStates {
    pub states: Vec<Tensor>,
    pub final_backward: LstmState,
    pub final_forward: LstmState,
}

impl EncoderStatesRef {
    pub fn extract(&self, tape: &Tape) -> EncoderStates {
        EncoderStates {
            states: self.states.iter().map(|&s| tape.value(s).clone()).collect(),
            final_backward: self.final_backward.extract(tape),
            final_forward: self.final_forward.extract(tape),
        }
    }
}

/// Run the forward stack in source order and the backward stack in reverse,
/// re-aligning backward states to their original positions.
pub fn bilstm_encode(
    tape: &mut Tape,
    bi: &BiLstmBinding,
    inputs: &[TensorId],
    mut dropout: Option<&mut Dropout>,
) -> Result<EncoderStatesRef> {
    if inputs.is_empty() {
        return Err(Error::contract("bilstm_encode on an empty sequence"));
    }
    let mut fwd_states = bi.fwd.zero_states(tape);
    let mut fwd_tops = Vec::with_capacity(inputs.len());
    for &x in inputs {
        fwd_states = lstm_stack_step(tape, &bi.fwd, x, &fwd_states, dropout.as_deref_mut())?;
        fwd_tops.push(fwd_states.last().expect("non-empty stack").h);
    }
    let final_forward = *fwd_states.last().expect("non-empty stack");

    let mut bwd_states = bi.bwd.zero_states(tape);
    let mut bwd_tops = vec![None; inputs.len()];
    for (pos, &x) in inputs.iter().enumerate().rev() {
        bwd_states = lstm_stack_step(tape, &bi.bwd, x, &bwd_states, dropout.as_deref_mut())?;
        bwd_tops[pos] = Some(bwd_states.last().expect("non-empty stack").h);
    }
    let final_backward = *bwd_states.last().expect("non-empty stack");

    let mut states = Vec::with_capacity(inputs.len());
    for (f, b) in fwd_tops.into_iter().zip(bwd_tops.into_iter()) {
        let b = b.expect("every position visited");
        states.push(tape.concat(&[f, b], 0)?);
    }
    Ok(EncoderStatesRef {
        states,
        final_backward,
        final_forward,
    })
}

// ── Additive attention ───────────────────────────────────────────────

/// Additive (feed-forward) scoring: `e_j = vᵀ·tanh(s·W_query + h_j·W_memory)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdditiveAttentionParams {
    /// `[d_h × d_a]`
    pub w_query: Tensor,
    /// `[d_mem × d_a]`
    pub w_memory: Tensor,
    /// `[d_a]`
    pub v: Tensor,
}

impl AdditiveAttentionParams {
    pub fn init(d_h: usize, d_mem: usize, d_a: usize, rng: &mut ChaCha12Rng) -> Self {
        AdditiveAttentionParams {
            w_query: uniform_init(vec![d_h, d_a], rng),
            w_memory: uniform_init(vec![d_mem, d_a], rng),
            v: uniform_init(vec![d_a], rng),
        }
    }

    pub fn bind(&self, tape: &mut Tape) -> AttentionBinding {
        AttentionBinding {
            w_query: tape.leaf(self.w_query.clone().with_grad()),
            w_memory: tape.leaf(self.w_memory.clone().with_grad()),
            v: tape.leaf(self.v.clone().with_grad()),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AttentionBinding {
    pub w_query: TensorId,
    pub w_memory: TensorId,
    pub v: TensorId,
}

/// Project memory states once; the projection is query-independent and is
/// reused by every decoding step.
pub fn project_memory(
    tape: &mut Tape,
    attn: &AttentionBinding,
    memory: &[TensorId],
) -> Result<Vec<TensorId>> {
    memory
        .iter()
        .map(|&h| tape.matmul(h, attn.w_memory))
        .collect()
}

/// Softmax-normalized weights over pre-projected memory.
pub fn attention_scores_projected(
    tape: &mut Tape,
    attn: &AttentionBinding,
    query: TensorId,
    projected: &[TensorId],
) -> Result<TensorId> {
    if projected.is_empty() {
        return Err(Error::contract("attention over empty memory"));
    }
    let q = tape.matmul(query, attn.w_query)?;
    let mut scores = Vec::with_capacity(projected.len());
    for &m in projected {
        let sum = tape.add(q, m)?;
        let act = tape.tanh(sum);
        scores.push(tape.dot(act, attn.v)?);
    }
    let e = tape.concat(&scores, 0)?;
    tape.softmax(e)
}

/// Attention weights `α` over raw memory states; non-negative, sum 1.
pub fn attention_scores(
    tape: &mut Tape,
    attn: &AttentionBinding,
    query: TensorId,
    memory: &[TensorId],
) -> Result<TensorId> {
    let projected = project_memory(tape, attn, memory)?;
    attention_scores_projected(tape, attn, query, &projected)
}

/// Context vector `c = Σ_j α_j·h_j`.
pub fn attention_context(
    tape: &mut Tape,
    alpha: TensorId,
    memory: &[TensorId],
) -> Result<TensorId> {
    tape.weighted_sum(alpha, memory)
}

/// `W·x + b` with `W [out × in]`, `x [in]`.
pub fn dense(tape: &mut Tape, w: TensorId, b: TensorId, x: TensorId) -> Result<TensorId> {
    let wx = tape.matmul(w, x)?;
    tape.add(wx, b)
}

// ── Dropout ──────────────────────────────────────────────────────────

/// Inverted dropout: at train time each element is zeroed with probability
/// `rate` and survivors are scaled by `1/(1−rate)`; inference applies
/// nothing at all.
#[derive(Debug, Clone)]
pub struct Dropout {
    rate: f64,
    rng: ChaCha12Rng,
}

impl Dropout {
    pub fn new(rate: f64, rng: ChaCha12Rng) -> Result<Self> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::contract(alloc::format!(
                "dropout rate must be in [0, 1), got {rate}"
            )));
        }
        Ok(Dropout { rate, rng })
    }

    pub fn mask_values(rate: f64, len: usize, rng: &mut ChaCha12Rng) -> Vec<f64> {
        let keep_scale = 1.0 / (1.0 - rate);
        (0..len)
            .map(|_| {
                if rng.random::<f64>() < rate {
                    0.0
                } else {
                    keep_scale
                }
            })
            .collect()
    }

    pub fn apply(&mut self, tape: &mut Tape, x: TensorId) -> Result<TensorId> {
        if self.rate == 0.0 {
            return Ok(x);
        }
        let shape = tape.shape(x).to_vec();
        let len = tape.value(x).numel();
        let mask = Tensor::new(shape, Self::mask_values(self.rate, len, &mut self.rng))
            .expect("mask shaped like input");
        let m = tape.constant(mask);
        tape.mul(x, m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha12Rng {
        ChaCha12Rng::seed_from_u64(seed)
    }

    fn assert_close(got: &[f64], want: &[f64], tol: f64) {
        assert_eq!(got.len(), want.len());
        for (g, w) in got.iter().zip(want.iter()) {
            assert!((g - w).abs() < tol, "got {got:?}, want {want:?}");
        }
    }

    #[test]
    fn zero_params_zero_state_stays_zero() {
        let d_h = 3;
        let params = LstmCellParams {
            w: Tensor::zeros(vec![2 + d_h, 4 * d_h]),
            b: Tensor::zeros(vec![4 * d_h]),
            d_in: 2,
            d_h,
        };
        let mut tape = Tape::new();
        let cell = params.bind(&mut tape);
        let x = tape.constant(Tensor::vector(vec![5.0, -3.0]));
        let prev = LstmStateRef::zeros(&mut tape, d_h);
        let next = lstm_cell_step(&mut tape, &cell, x, &prev).unwrap();
        assert_close(tape.data(next.c), &[0.0; 3], 1e-15);
        assert_close(tape.data(next.h), &[0.0; 3], 1e-15);
    }

    #[test]
    fn zero_params_halve_previous_cell() {
        // all gates sit at σ(0) = 0.5 and the candidate at tanh(0) = 0
        let d_h = 2;
        let params = LstmCellParams {
            w: Tensor::zeros(vec![1 + d_h, 4 * d_h]),
            b: Tensor::zeros(vec![4 * d_h]),
            d_in: 1,
            d_h,
        };
        let c0 = [0.8, -1.2];
        let mut tape = Tape::new();
        let cell = params.bind(&mut tape);
        let x = tape.constant(Tensor::vector(vec![0.0]));
        let prev = LstmStateRef {
            h: tape.constant(Tensor::zeros(vec![d_h])),
            c: tape.constant(Tensor::vector(c0.to_vec())),
        };
        let next = lstm_cell_step(&mut tape, &cell, x, &prev).unwrap();
        let want_c: Vec<f64> = c0.iter().map(|v| 0.5 * v).collect();
        let want_h: Vec<f64> = want_c.iter().map(|v| 0.5 * libm::tanh(*v)).collect();
        assert_close(tape.data(next.c), &want_c, 1e-15);
        assert_close(tape.data(next.h), &want_h, 1e-15);
    }

    #[test]
    fn lstm_cell_gradients_match_finite_differences() {
        let mut r = rng(11);
        let d_in = 5;
        let d_h = 8;
        let params = LstmCellParams::init(d_in, d_h, &mut r);
        let x = uniform_init(vec![d_in], &mut r);
        let h0 = uniform_init(vec![d_h], &mut r);
        let c0 = uniform_init(vec![d_h], &mut r);
        let report = grad_check(
            |tape, ids| {
                let cell = LstmCellBinding {
                    w: ids[0],
                    b: ids[1],
                    d_h,
                };
                let prev = LstmStateRef {
                    h: ids[3],
                    c: ids[4],
                };
                let next = lstm_cell_step(tape, &cell, ids[2], &prev)?;
                let hsum = tape.sum(next.h);
                let csum = tape.sum(next.c);
                tape.add(hsum, csum)
            },
            &[params.w, params.b, x, h0, c0],
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.pass, "max rel error {}", report.max_rel_error);
    }

    #[test]
    fn forget_gate_bias_starts_at_one() {
        let mut r = rng(3);
        let p = LstmCellParams::init(4, 6, &mut r);
        assert!(p.b.data()[6..12].iter().all(|&v| v == 1.0));
        assert!(p.b.data()[..6].iter().all(|&v| v == 0.0));
        assert!(p.w.data().iter().all(|&v| v.abs() < INIT_RANGE));
    }

    fn encode_values(bi: &BiLstmParams, inputs: &[Tensor]) -> (Vec<Vec<f64>>, Vec<f64>) {
        let mut tape = Tape::new();
        let binding = bi.bind(&mut tape);
        let ids: Vec<TensorId> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let enc = bilstm_encode(&mut tape, &binding, &ids, None).unwrap();
        let states = enc.states.iter().map(|&s| tape.data(s).to_vec()).collect();
        (states, tape.data(enc.final_backward.h).to_vec())
    }

    #[test]
    fn single_step_final_backward_matches_state_half() {
        let mut r = rng(21);
        let bi = BiLstmParams::init(3, 4, 1, &mut r);
        let x = uniform_init(vec![3], &mut r);
        let (states, final_b) = encode_values(&bi, core::slice::from_ref(&x));
        assert_eq!(states.len(), 1);
        assert_eq!(&states[0][4..], final_b.as_slice());
    }

    #[test]
    fn reversed_input_with_swapped_stacks_mirrors_states() {
        let mut r = rng(22);
        let d_h = 4;
        let fwd = LstmStackParams::init(3, d_h, 1, &mut r);
        let bwd = LstmStackParams::init(3, d_h, 1, &mut r);
        let inputs: Vec<Tensor> = (0..5).map(|_| uniform_init(vec![3], &mut r)).collect();
        let mut reversed = inputs.clone();
        reversed.reverse();

        let a = BiLstmParams {
            fwd: fwd.clone(),
            bwd: bwd.clone(),
        };
        let b = BiLstmParams { fwd: bwd, bwd: fwd };
        let (sa, _) = encode_values(&a, &inputs);
        let (sb, _) = encode_values(&b, &reversed);

        let t_len = inputs.len();
        for t in 0..t_len {
            let mirrored = &sb[t_len - 1 - t];
            let swapped: Vec<f64> = mirrored[d_h..]
                .iter()
                .chain(mirrored[..d_h].iter())
                .cloned()
                .collect();
            assert_close(&sa[t], &swapped, 1e-12);
        }
    }

    #[test]
    fn bilstm_gradients_match_finite_differences() {
        let mut r = rng(23);
        let d_in = 3;
        let d_h = 8;
        let bi = BiLstmParams::init(d_in, d_h, 1, &mut r);
        let inputs: Vec<Tensor> = (0..5).map(|_| uniform_init(vec![d_in], &mut r)).collect();

        let mut all = vec![
            bi.fwd.cells[0].w.clone(),
            bi.fwd.cells[0].b.clone(),
            bi.bwd.cells[0].w.clone(),
            bi.bwd.cells[0].b.clone(),
        ];
        all.extend(inputs.iter().cloned());

        let report = grad_check(
            |tape, ids| {
                let binding = BiLstmBinding {
                    fwd: LstmStackBinding {
                        cells: vec![LstmCellBinding {
                            w: ids[0],
                            b: ids[1],
                            d_h,
                        }],
                    },
                    bwd: LstmStackBinding {
                        cells: vec![LstmCellBinding {
                            w: ids[2],
                            b: ids[3],
                            d_h,
                        }],
                    },
                };
                let enc = bilstm_encode(tape, &binding, &ids[4..], None)?;
                let mut total = tape.sum(enc.states[0]);
                for &s in &enc.states[1..] {
                    let part = tape.sum(s);
                    total = tape.add(total, part)?;
                }
                let tanh_total = tape.tanh(total);
                Ok(tape.sum(tanh_total))
            },
            &all,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.pass, "max rel error {}", report.max_rel_error);
    }

    #[test]
    fn bilstm_output_length_equals_input_length() {
        let mut r = rng(24);
        let bi = BiLstmParams::init(2, 3, 2, &mut r);
        for len in 1..=6 {
            let inputs: Vec<Tensor> = (0..len).map(|_| uniform_init(vec![2], &mut r)).collect();
            let (states, _) = encode_values(&bi, &inputs);
            assert_eq!(states.len(), len);
            assert!(states.iter().all(|s| s.len() == 6));
        }
    }

    #[test]
    fn bilstm_rejects_empty_input() {
        let mut r = rng(25);
        let bi = BiLstmParams::init(2, 3, 1, &mut r);
        let mut tape = Tape::new();
        let binding = bi.bind(&mut tape);
        assert!(matches!(
            bilstm_encode(&mut tape, &binding, &[], None),
            Err(Error::Contract(_))
        ));
    }

    fn attention_fixture(d_h: usize, d_mem: usize, seed: u64) -> AdditiveAttentionParams {
        AdditiveAttentionParams::init(d_h, d_mem, d_h, &mut rng(seed))
    }

    #[test]
    fn single_memory_state_gets_full_weight() {
        let params = attention_fixture(3, 4, 31);
        let mut tape = Tape::new();
        let attn = params.bind(&mut tape);
        let q = tape.constant(Tensor::vector(vec![0.1, -0.2, 0.3]));
        let m = tape.constant(Tensor::vector(vec![0.5, 0.1, -0.3, 0.2]));
        let alpha = attention_scores(&mut tape, &attn, q, &[m]).unwrap();
        assert_close(tape.data(alpha), &[1.0], 1e-15);
    }

    #[test]
    fn identical_memory_states_split_evenly() {
        let params = attention_fixture(3, 4, 32);
        let mut tape = Tape::new();
        let attn = params.bind(&mut tape);
        let q = tape.constant(Tensor::vector(vec![0.7, 0.0, -0.1]));
        let m = tape.constant(Tensor::vector(vec![0.5, 0.1, -0.3, 0.2]));
        let alpha = attention_scores(&mut tape, &attn, q, &[m, m]).unwrap();
        assert_close(tape.data(alpha), &[0.5, 0.5], 1e-15);
    }

    #[test]
    fn zero_v_gives_uniform_weights() {
        let mut params = attention_fixture(2, 3, 33);
        params.v = Tensor::zeros(vec![2]);
        let mut tape = Tape::new();
        let attn = params.bind(&mut tape);
        let q = tape.constant(Tensor::vector(vec![0.3, -0.9]));
        let mut r = rng(34);
        let memory: Vec<TensorId> = (0..5)
            .map(|_| {
                let t = uniform_init(vec![3], &mut r);
                tape.constant(t)
            })
            .collect();
        let alpha = attention_scores(&mut tape, &attn, q, &memory).unwrap();
        assert_close(tape.data(alpha), &[0.2; 5], 1e-15);
    }

    #[test]
    fn attention_rejects_empty_memory() {
        let params = attention_fixture(2, 3, 35);
        let mut tape = Tape::new();
        let attn = params.bind(&mut tape);
        let q = tape.constant(Tensor::vector(vec![0.3, -0.9]));
        assert!(matches!(
            attention_scores(&mut tape, &attn, q, &[]),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn one_hot_context_selects_the_state() {
        let mut tape = Tape::new();
        let alpha = tape.constant(Tensor::vector(vec![0.0, 1.0, 0.0]));
        let mut r = rng(36);
        let memory: Vec<Tensor> = (0..3).map(|_| uniform_init(vec![4], &mut r)).collect();
        let ids: Vec<TensorId> = memory.iter().map(|t| tape.constant(t.clone())).collect();
        let c = attention_context(&mut tape, alpha, &ids).unwrap();
        assert_eq!(tape.data(c), memory[1].data());
    }

    #[test]
    fn uniform_weights_over_identical_states_reproduce_the_state() {
        let mut tape = Tape::new();
        let alpha = tape.constant(Tensor::vector(vec![0.25; 4]));
        let h = Tensor::vector(vec![0.4, -0.8, 1.2]);
        let ids: Vec<TensorId> = (0..4).map(|_| tape.constant(h.clone())).collect();
        let c = attention_context(&mut tape, alpha, &ids).unwrap();
        assert_close(tape.data(c), h.data(), 1e-12);
    }

    #[test]
    fn attention_gradients_match_finite_differences() {
        let mut r = rng(37);
        let d_h = 4;
        let d_mem = 6;
        let params = AdditiveAttentionParams::init(d_h, d_mem, d_h, &mut r);
        let q = uniform_init(vec![d_h], &mut r);
        let mem: Vec<Tensor> = (0..3).map(|_| uniform_init(vec![d_mem], &mut r)).collect();
        let mut inputs = vec![params.w_query, params.w_memory, params.v, q];
        inputs.extend(mem.iter().cloned());
        let report = grad_check(
            |tape, ids| {
                let attn = AttentionBinding {
                    w_query: ids[0],
                    w_memory: ids[1],
                    v: ids[2],
                };
                let alpha = attention_scores(tape, &attn, ids[3], &ids[4..])?;
                let ctx = attention_context(tape, alpha, &ids[4..])?;
                let sq = tape.mul(ctx, ctx)?;
                Ok(tape.sum(sq))
            },
            &inputs,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.pass, "max rel error {}", report.max_rel_error);
    }

    #[test]
    fn dense_identity_and_bias() {
        let mut tape = Tape::new();
        let eye = tape.constant(Tensor::matrix(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap());
        let zero_b = tape.constant(Tensor::zeros(vec![2]));
        let x = tape.constant(Tensor::vector(vec![0.7, -0.4]));
        let y = dense(&mut tape, eye, zero_b, x).unwrap();
        assert_close(tape.data(y), &[0.7, -0.4], 1e-15);

        let zero_w = tape.constant(Tensor::zeros(vec![2, 2]));
        let b = tape.constant(Tensor::vector(vec![1.5, -2.5]));
        let y = dense(&mut tape, zero_w, b, x).unwrap();
        assert_close(tape.data(y), &[1.5, -2.5], 1e-15);
    }

    #[test]
    fn dense_gradients_match_finite_differences() {
        let mut r = rng(38);
        let w = uniform_init(vec![3, 5], &mut r);
        let b = uniform_init(vec![3], &mut r);
        let x = uniform_init(vec![5], &mut r);
        let report = grad_check(
            |tape, ids| {
                let y = dense(tape, ids[0], ids[1], ids[2])?;
                let t = tape.tanh(y);
                Ok(tape.sum(t))
            },
            &[w, b, x],
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.pass, "max rel error {}", report.max_rel_error);
    }

    #[test]
    fn stacked_step_gradcheck_two_layers() {
        let mut r = rng(39);
        let d_in = 3;
        let d_h = 8;
        let stack = LstmStackParams::init(d_in, d_h, 2, &mut r);
        let x = uniform_init(vec![d_in], &mut r);
        let inputs = vec![
            stack.cells[0].w.clone(),
            stack.cells[0].b.clone(),
            stack.cells[1].w.clone(),
            stack.cells[1].b.clone(),
            x,
        ];
        let report = grad_check(
            |tape, ids| {
                let binding = LstmStackBinding {
                    cells: vec![
                        LstmCellBinding {
                            w: ids[0],
                            b: ids[1],
                            d_h,
                        },
                        LstmCellBinding {
                            w: ids[2],
                            b: ids[3],
                            d_h,
                        },
                    ],
                };
                let prev = binding.zero_states(tape);
                let next = lstm_stack_step(tape, &binding, ids[4], &prev, None)?;
                Ok(tape.sum(next[1].h))
            },
            &inputs,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.pass, "max rel error {}", report.max_rel_error);
    }
}
