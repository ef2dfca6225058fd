//! Memory storage module: two window encoders, a learnable memory array with
//! nearest-neighbor quantization and straight-through gradients, a decoder,
//! the joint reconstruction + quantization loss, and the tokenizer that turns
//! trajectories into index sequences.

mod quantize;
pub mod train;

pub use quantize::quantize;
pub use train::{train_vq, TrainError, VqTrainConfig, VqTrainRecord};

use crate::data::{Point, Trajectory};
use crate::lm::TokenSequence;
use crate::num::{Bound, NumError, ParamHandle, ParamSet, Rng, Scalar, Tape, Tensor, Var};

/// Bytes occupied by the memory entries at 32-bit precision.
pub fn storage_bytes(k: usize, n_k: usize) -> usize {
    k * n_k * 4
}

#[derive(Debug, Clone, PartialEq)]
pub struct VqConfig {
    /// Memory entries (the array scale theta).
    pub k: usize,
    /// Entry dimension.
    pub n_k: usize,
    /// Frames per window; must divide both t_obs and t_pred.
    pub window: usize,
    /// Commitment loss weight.
    pub beta: f64,
    /// Encoder/decoder MLP hidden width.
    pub hidden: usize,
    /// Heads in the single cross-window attention layer.
    pub attn_heads: usize,
    pub t_obs: usize,
    pub t_pred: usize,
}

impl Default for VqConfig {
    fn default() -> Self {
        VqConfig {
            k: 64,
            n_k: 16,
            window: 2,
            beta: 0.25,
            hidden: 64,
            attn_heads: 4,
            t_obs: 8,
            t_pred: 12,
        }
    }
}

impl VqConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.k < 2 {
            return Err(format!("memory must have at least 2 entries, got {}", self.k));
        }
        if self.attn_heads == 0 || self.n_k % self.attn_heads != 0 {
            return Err(format!(
                "attention heads {} must divide n_k {}",
                self.attn_heads, self.n_k
            ));
        }
        if self.window == 0 || self.t_obs % self.window != 0 || self.t_pred % self.window != 0 {
            return Err(format!(
                "window {} must divide t_obs {} and t_pred {}",
                self.window, self.t_obs, self.t_pred
            ));
        }
        Ok(())
    }

    /// Observed tokens per trajectory (o).
    pub fn tokens_obs(&self) -> usize {
        self.t_obs / self.window
    }

    /// Future tokens per trajectory (p).
    pub fn tokens_pred(&self) -> usize {
        self.t_pred / self.window
    }

    /// Total tokens per trajectory (m).
    pub fn tokens_total(&self) -> usize {
        self.tokens_obs() + self.tokens_pred()
    }

    pub fn storage_bytes(&self) -> usize {
        storage_bytes(self.k, self.n_k)
    }
}

/// Which trajectory segment to encode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Segment {
    Past,
    Future,
    Both,
}

/// Inspection snapshot of the memory array.
#[derive(Debug, Clone)]
pub struct MemoryArray<T> {
    pub entries: Tensor<T>,
    /// Per-entry assignment counters since the last reset.
    pub usage_counts: Vec<u64>,
}

impl<T: Scalar> MemoryArray<T> {
    pub fn k(&self) -> usize {
        self.entries.shape()[0]
    }

    pub fn n_k(&self) -> usize {
        self.entries.shape()[1]
    }

    pub fn storage_bytes(&self) -> usize {
        storage_bytes(self.k(), self.n_k())
    }
}

#[derive(Debug, Clone, Copy)]
struct VqHead {
    wq: ParamHandle,
    wk: ParamHandle,
    wv: ParamHandle,
    wo: ParamHandle,
}

#[derive(Debug, Clone)]
struct EncoderHandles {
    w1: ParamHandle,
    b1: ParamHandle,
    w2: ParamHandle,
    b2: ParamHandle,
    heads: Vec<VqHead>,
}

#[derive(Debug, Clone)]
struct DecoderHandles {
    /// Learned per-window positions added to the quantized features; without
    /// them attention is permutation-equivariant and windows sharing an
    /// entry could never decode to different coordinates.
    pos: ParamHandle,
    heads: Vec<VqHead>,
    w1: ParamHandle,
    b1: ParamHandle,
    w2: ParamHandle,
    b2: ParamHandle,
}

/// Encoders, decoder, and memory array over one parameter set.
#[derive(Debug, Clone)]
pub struct VqModel<T> {
    pub config: VqConfig,
    pub params: ParamSet<T>,
    enc_past: EncoderHandles,
    enc_future: EncoderHandles,
    dec: DecoderHandles,
    memory: ParamHandle,
    /// Per-entry assignment counters since the last reset (training updates
    /// these; reports read them).
    pub usage_counts: Vec<u64>,
}

fn add_heads<T: Scalar>(
    params: &mut ParamSet<T>,
    prefix: &str,
    n_k: usize,
    heads: usize,
    rng: &mut Rng,
) -> Vec<VqHead> {
    let dk = n_k / heads;
    (0..heads)
        .map(|h| VqHead {
            wq: params.add_xavier(format!("{prefix}.head{h}.wq"), n_k, dk, rng),
            wk: params.add_xavier(format!("{prefix}.head{h}.wk"), n_k, dk, rng),
            wv: params.add_xavier(format!("{prefix}.head{h}.wv"), n_k, dk, rng),
            wo: params.add_xavier(format!("{prefix}.head{h}.wo"), dk, n_k, rng),
        })
        .collect()
}

fn add_encoder<T: Scalar>(
    params: &mut ParamSet<T>,
    prefix: &str,
    in_dim: usize,
    config: &VqConfig,
    rng: &mut Rng,
) -> EncoderHandles {
    EncoderHandles {
        w1: params.add_xavier(format!("{prefix}.w1"), in_dim, config.hidden, rng),
        b1: params.add_zeros(format!("{prefix}.b1"), vec![1, config.hidden]),
        w2: params.add_xavier(format!("{prefix}.w2"), config.hidden, config.n_k, rng),
        b2: params.add_zeros(format!("{prefix}.b2"), vec![1, config.n_k]),
        heads: add_heads(params, prefix, config.n_k, config.attn_heads, rng),
    }
}

impl<T: Scalar> VqModel<T> {
    /// Fresh model with seeded initialization. Memory entries start uniform
    /// in [-0.1, 0.1].
    pub fn new(config: VqConfig, rng: &mut Rng) -> Self {
        config.validate().expect("invalid vq config");
        let mut params = ParamSet::new();
        let coords = config.window * 2;
        let enc_past = add_encoder(&mut params, "enc_past", coords, &config, rng);
        let enc_future = add_encoder(&mut params, "enc_future", coords, &config, rng);
        let dec = DecoderHandles {
            pos: params.add_uniform(
                "dec.pos",
                vec![config.tokens_total(), config.n_k],
                0.05,
                rng,
            ),
            heads: add_heads(&mut params, "dec", config.n_k, config.attn_heads, rng),
            w1: params.add_xavier("dec.w1", config.n_k, config.hidden, rng),
            b1: params.add_zeros("dec.b1", vec![1, config.hidden]),
            w2: params.add_xavier("dec.w2", config.hidden, coords, rng),
            b2: params.add_zeros("dec.b2", vec![1, coords]),
        };
        let memory = params.add_uniform("memory.entries", vec![config.k, config.n_k], 0.1, rng);
        VqModel {
            usage_counts: vec![0; config.k],
            config,
            params,
            enc_past,
            enc_future,
            dec,
            memory,
        }
    }

    /// Rebuilds a model around parameters loaded from a checkpoint. Parameter
    /// names must match the construction layout.
    pub fn from_params(config: VqConfig, params: ParamSet<T>) -> Result<Self, String> {
        let mut fresh = VqModel::new(config, &mut Rng::new(0));
        for (name, tensor) in fresh.params.iter_mut() {
            let src = params
                .by_name(name)
                .ok_or_else(|| format!("checkpoint is missing parameter {name}"))?;
            let loaded = params.tensor(src);
            if loaded.shape() != tensor.shape() {
                return Err(format!(
                    "parameter {name} has shape {:?}, expected {:?}",
                    loaded.shape(),
                    tensor.shape()
                ));
            }
            tensor.data_mut().copy_from_slice(loaded.data());
        }
        Ok(fresh)
    }

    pub fn memory_handle(&self) -> ParamHandle {
        self.memory
    }

    pub fn memory(&self) -> MemoryArray<T> {
        MemoryArray {
            entries: self.params.tensor(self.memory).clone(),
            usage_counts: self.usage_counts.clone(),
        }
    }

    pub fn memory_entries(&self) -> &[T] {
        self.params.tensor(self.memory).data()
    }

    pub fn storage_bytes(&self) -> usize {
        self.config.storage_bytes()
    }

    /// Splits a normalized segment into `[rows x window*2]` coordinates.
    fn segment_matrix(&self, points: &[Point]) -> (usize, Vec<T>) {
        let w = self.config.window;
        debug_assert_eq!(points.len() % w, 0);
        let rows = points.len() / w;
        let mut data = Vec::with_capacity(points.len() * 2);
        for p in points {
            data.push(T::from_f64(p.x));
            data.push(T::from_f64(p.y));
        }
        (rows, data)
    }

    fn encoder_forward(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        enc: &EncoderHandles,
        windows: Var,
    ) -> Result<Var, NumError> {
        let h1 = tape.matmul(windows, bound.var(enc.w1))?;
        let h1 = tape.add_bias(h1, bound.var(enc.b1))?;
        let h1 = tape.relu(h1);
        let tokens = tape.matmul(h1, bound.var(enc.w2))?;
        let tokens = tape.add_bias(tokens, bound.var(enc.b2))?;
        self.attention(tape, bound, tokens, &enc.heads)
    }

    /// One multi-head full self-attention layer with residual connection.
    fn attention(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        x: Var,
        heads: &[VqHead],
    ) -> Result<Var, NumError> {
        let rows = tape.shape(x)[0];
        let dk = self.config.n_k / self.config.attn_heads;
        let scale = T::from_f64(1.0 / (dk as f64).sqrt());
        let mask = vec![true; rows * rows];
        let mut acc: Option<Var> = None;
        for head in heads {
            let q = tape.matmul(x, bound.var(head.wq))?;
            let k = tape.matmul(x, bound.var(head.wk))?;
            let v = tape.matmul(x, bound.var(head.wv))?;
            let scores = tape.matmul_nt(q, k)?;
            let scores = tape.scale(scores, scale);
            let probs = tape.masked_softmax(scores, &mask)?;
            let ctx = tape.matmul(probs, v)?;
            let proj = tape.matmul(ctx, bound.var(head.wo))?;
            acc = Some(match acc {
                None => proj,
                Some(a) => tape.add(a, proj)?,
            });
        }
        tape.add(x, acc.expect("at least one head"))
    }

    /// Encodes the selected segment of a normalized trajectory into
    /// continuous features, one row per window.
    pub fn encode_on_tape(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        traj: &Trajectory,
        segment: Segment,
    ) -> Result<Var, NumError> {
        match segment {
            Segment::Past => {
                let (rows, data) = self.segment_matrix(traj.observed());
                let x = tape.constant(vec![rows, self.config.window * 2], data);
                self.encoder_forward(tape, bound, &self.enc_past, x)
            }
            Segment::Future => {
                let (rows, data) = self.segment_matrix(traj.future());
                let x = tape.constant(vec![rows, self.config.window * 2], data);
                self.encoder_forward(tape, bound, &self.enc_future, x)
            }
            Segment::Both => {
                let past = self.encode_on_tape(tape, bound, traj, Segment::Past)?;
                let future = self.encode_on_tape(tape, bound, traj, Segment::Future)?;
                tape.concat_rows(past, future)
            }
        }
    }

    /// Continuous encoding values without gradient tracking.
    pub fn encode(&self, traj: &Trajectory, segment: Segment) -> Tensor<T> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let out = self
            .encode_on_tape(&mut tape, &bound, traj, segment)
            .expect("encode on validated config");
        Tensor::new(tape.shape(out).to_vec(), tape.data(out).to_vec())
    }

    /// Constant `[T x T]` matrix turning per-frame displacement estimates
    /// into coordinates anchored at the last observed frame: future frames
    /// accumulate forward, observed frames accumulate backward, and the
    /// anchor row is zero (its normalized coordinate is exactly zero).
    fn integration_matrix(&self) -> Vec<T> {
        let t = self.config.t_obs + self.config.t_pred;
        let anchor = self.config.t_obs - 1;
        let mut m = vec![T::zero(); t * t];
        for row in 0..t {
            use std::cmp::Ordering;
            match row.cmp(&anchor) {
                Ordering::Greater => {
                    for s in anchor + 1..=row {
                        m[row * t + s] = T::one();
                    }
                }
                Ordering::Less => {
                    for s in row + 1..=anchor {
                        m[row * t + s] = -T::one();
                    }
                }
                Ordering::Equal => {}
            }
        }
        m
    }

    /// Decodes quantized features to `[T x 2]` coordinates. The per-window
    /// MLP emits per-frame displacements; coordinates come from integrating
    /// them away from the normalization anchor, which keeps the regression
    /// targets at per-step scale regardless of how far a frame lies from the
    /// anchor.
    pub fn decode_on_tape(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        features: Var,
    ) -> Result<Var, NumError> {
        let rows = tape.shape(features)[0];
        let positions: Vec<usize> = (0..rows).collect();
        let pos = tape.embedding_lookup(bound.var(self.dec.pos), &positions)?;
        let placed = tape.add(features, pos)?;
        let mixed = self.attention(tape, bound, placed, &self.dec.heads)?;
        let h = tape.matmul(mixed, bound.var(self.dec.w1))?;
        let h = tape.add_bias(h, bound.var(self.dec.b1))?;
        let h = tape.relu(h);
        let out = tape.matmul(h, bound.var(self.dec.w2))?;
        let deltas = tape.add_bias(out, bound.var(self.dec.b2))?;
        let t = rows * self.config.window;
        let deltas = tape.reshape(deltas, vec![t, 2])?;
        let integrate = tape.constant(vec![t, t], self.integration_matrix());
        tape.matmul(integrate, deltas)
    }

    /// Decodes a full quantized sequence (m = tokens_total rows) into
    /// normalized trajectory points.
    pub fn decode(&self, features: &Tensor<T>) -> Vec<Point> {
        assert_eq!(
            features.shape(),
            &[self.config.tokens_total(), self.config.n_k],
            "decode expects one feature row per window"
        );
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let f = tape.constant(features.shape().to_vec(), features.data().to_vec());
        let out = self.decode_on_tape(&mut tape, &bound, f).expect("decode on validated config");
        coords_to_points(tape.data(out))
    }

    /// Decodes the windows selected by `indices` straight from the memory
    /// array.
    pub fn decode_indices(&self, indices: &[usize]) -> Vec<Point> {
        let n_k = self.config.n_k;
        let entries = self.memory_entries();
        let mut data = Vec::with_capacity(indices.len() * n_k);
        for &i in indices {
            data.extend_from_slice(&entries[i * n_k..(i + 1) * n_k]);
        }
        let features = Tensor::new(vec![indices.len(), n_k], data);
        self.decode(&features)
    }

    /// Full quantization pipeline on the tape with the assignments taken as
    /// given (kept fixed so the recorded graph is smooth; gradient checks
    /// probe through this entry point).
    pub fn losses_with_assignments(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        traj: &Trajectory,
        indices: &[usize],
    ) -> Result<VqForward, NumError> {
        let v_a = self.encode_on_tape(tape, bound, traj, Segment::Both)?;
        let v_q = tape.embedding_lookup(bound.var(self.memory), indices)?;

        let st = tape.straight_through(v_a, v_q)?;
        let decoded = self.decode_on_tape(tape, bound, st)?;

        let (_, target_data) = self.segment_matrix(&traj.points);
        let target = tape.constant(vec![traj.points.len(), 2], target_data);
        let reconstruction = tape.mse(target, decoded)?;

        let v_a_stopped = tape.detach(v_a);
        let codebook = tape.mse(v_a_stopped, v_q)?;

        let v_q_stopped = tape.detach(v_q);
        let commitment_raw = tape.mse(v_q_stopped, v_a)?;
        let commitment = tape.scale(commitment_raw, T::from_f64(self.config.beta));

        let partial = tape.add(reconstruction, codebook)?;
        let total = tape.add(partial, commitment)?;

        Ok(VqForward {
            v_a,
            v_q,
            indices: indices.to_vec(),
            reconstruction,
            codebook,
            commitment,
            total,
        })
    }

    /// Encode, quantize, and assemble the three loss terms on the tape.
    pub fn losses_on_tape(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        traj: &Trajectory,
    ) -> Result<VqForward, NumError> {
        let probe = self.encode_on_tape(tape, bound, traj, Segment::Both)?;
        let (indices, _) = quantize(self.memory_entries(), self.config.n_k, tape.data(probe));
        // Rebuilds from the assignments to reuse one code path; the encoder
        // runs twice but stays cheap at these sizes.
        self.losses_with_assignments(tape, bound, traj, &indices)
    }

    /// Loss terms and quantization of one normalized trajectory, as values.
    pub fn vq_losses(&self, traj: &Trajectory) -> VqOutput<T> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let fwd = self.losses_on_tape(&mut tape, &bound, traj).expect("vq forward");
        VqOutput {
            v_a: Tensor::new(tape.shape(fwd.v_a).to_vec(), tape.data(fwd.v_a).to_vec()),
            v_q: Tensor::new(tape.shape(fwd.v_q).to_vec(), tape.data(fwd.v_q).to_vec()),
            indices: fwd.indices.clone(),
            reconstruction: tape.scalar(fwd.reconstruction),
            codebook: tape.scalar(fwd.codebook),
            commitment: tape.scalar(fwd.commitment),
            total: tape.scalar(fwd.total),
        }
    }

    /// Index sequence of a normalized trajectory: o observed tokens from the
    /// past encoder followed by p future tokens from the future encoder.
    pub fn tokenize(&self, traj: &Trajectory) -> TokenSequence {
        let past = self.encode(traj, Segment::Past);
        let future = self.encode(traj, Segment::Future);
        let (mut tokens, _) = quantize(self.memory_entries(), self.config.n_k, past.data());
        let (future_tokens, _) = quantize(self.memory_entries(), self.config.n_k, future.data());
        tokens.extend(future_tokens);
        TokenSequence::new(tokens, self.config.tokens_obs(), self.config.tokens_pred())
    }

    /// Observed-prefix tokens only (the prediction-time entry point).
    pub fn tokenize_observed(&self, traj: &Trajectory) -> Vec<usize> {
        let past = self.encode(traj, Segment::Past);
        let (tokens, _) = quantize(self.memory_entries(), self.config.n_k, past.data());
        tokens
    }

    /// Reconstructs a normalized trajectory through encode -> quantize ->
    /// decode.
    pub fn reconstruct(&self, traj: &Trajectory) -> Vec<Point> {
        let seq = self.tokenize(traj);
        self.decode_indices(&seq.tokens)
    }
}

pub(crate) fn coords_to_points<T: Scalar>(coords: &[T]) -> Vec<Point> {
    debug_assert_eq!(coords.len() % 2, 0);
    coords.chunks_exact(2).map(|c| Point::new(c[0].to_f64(), c[1].to_f64())).collect()
}

/// Tape handles for the VQ forward pass (training path).
pub struct VqForward {
    pub v_a: Var,
    pub v_q: Var,
    pub indices: Vec<usize>,
    pub reconstruction: Var,
    pub codebook: Var,
    pub commitment: Var,
    pub total: Var,
}

/// Value-level result of [`VqModel::vq_losses`]: continuous and quantized
/// encodings, assignments, and the three loss terms (commitment already
/// carries the beta weight).
#[derive(Debug, Clone)]
pub struct VqOutput<T> {
    pub v_a: Tensor<T>,
    pub v_q: Tensor<T>,
    pub indices: Vec<usize>,
    pub reconstruction: T,
    pub codebook: T,
    pub commitment: T,
    pub total: T,
}

/// Codebook usage over a dataset pass.
#[derive(Debug, Clone)]
pub struct UtilizationReport {
    pub k: usize,
    pub used: usize,
    pub histogram: Vec<u64>,
    pub total_assignments: u64,
}

impl UtilizationReport {
    /// Fraction of entries assigned at least once.
    pub fn utilization(&self) -> f64 {
        self.used as f64 / self.k as f64
    }

    /// exp(entropy) of the empirical code distribution.
    pub fn perplexity(&self) -> f64 {
        if self.total_assignments == 0 {
            return 0.0;
        }
        let total = self.total_assignments as f64;
        let mut entropy = 0.0;
        for &c in &self.histogram {
            if c > 0 {
                let p = c as f64 / total;
                entropy -= p * p.ln();
            }
        }
        entropy.exp()
    }
}

/// Tokenizes every trajectory (already normalized) and tallies entry usage.
pub fn codebook_report<'a, T: Scalar>(
    model: &VqModel<T>,
    trajectories: impl Iterator<Item = &'a Trajectory>,
) -> UtilizationReport {
    let mut histogram = vec![0u64; model.config.k];
    let mut total = 0u64;
    for traj in trajectories {
        let seq = model.tokenize(traj);
        for t in seq.tokens {
            histogram[t] += 1;
            total += 1;
        }
    }
    let used = histogram.iter().filter(|&&c| c > 0).count();
    UtilizationReport { k: model.config.k, used, histogram, total_assignments: total }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{normalize, synth_generate, NormalizationMode, SynthConfig};

    fn test_model() -> VqModel<f32> {
        let mut rng = Rng::new(42);
        VqModel::new(VqConfig::default(), &mut rng)
    }

    fn sample_traj(seed: u64) -> Trajectory {
        let mut rng = Rng::new(seed);
        let config = SynthConfig { n: 1, train_frac: 1.0, val_frac: 0.0, ..Default::default() };
        let corpus = synth_generate(&mut rng, &config);
        let (norm, _) = normalize(&corpus.train.trajectories[0], NormalizationMode::Translation);
        norm
    }

    #[test]
    fn encode_counts_windows() {
        let model = test_model();
        let traj = sample_traj(1);
        assert_eq!(model.encode(&traj, Segment::Past).shape(), &[4, 16]);
        assert_eq!(model.encode(&traj, Segment::Future).shape(), &[6, 16]);
        assert_eq!(model.encode(&traj, Segment::Both).shape(), &[10, 16]);
    }

    #[test]
    fn encode_is_deterministic() {
        let model = test_model();
        let traj = sample_traj(2);
        let a = model.encode(&traj, Segment::Both);
        let b = model.encode(&traj, Segment::Both);
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn decode_counts_points() {
        let model = test_model();
        let features = Tensor::new(vec![10, 16], vec![0.05f32; 160]);
        let points = model.decode(&features);
        assert_eq!(points.len(), 20);
    }

    #[test]
    fn tokenize_counts_and_round_trip() {
        let model = test_model();
        let traj = sample_traj(3);
        let seq = model.tokenize(&traj);
        assert_eq!(seq.o, 4);
        assert_eq!(seq.p, 6);
        assert_eq!(seq.tokens.len(), 10);
        assert!(seq.tokens.iter().all(|&t| t < model.config.k));

        // Lookup of the indices reproduces v_q rows exactly.
        let out = model.vq_losses(&traj);
        let n_k = model.config.n_k;
        for (row, &idx) in out.indices.iter().enumerate() {
            let from_memory = &model.memory_entries()[idx * n_k..(idx + 1) * n_k];
            let v_q_row = &out.v_q.data()[row * n_k..(row + 1) * n_k];
            assert_eq!(from_memory, v_q_row, "v_q row {row} is not a bit-exact entry copy");
        }
        assert_eq!(out.indices, seq.tokens);

        // Tokenizing twice gives identical sequences.
        assert_eq!(model.tokenize(&traj).tokens, seq.tokens);
    }

    #[test]
    fn reconstruction_loss_matches_decoded_mse() {
        let model = test_model();
        let traj = sample_traj(4);
        let out = model.vq_losses(&traj);
        let decoded = model.decode(&out.v_q);
        let mse: f64 = decoded
            .iter()
            .zip(&traj.points)
            .map(|(a, b)| (a.x - b.x).powi(2) + (a.y - b.y).powi(2))
            .sum::<f64>()
            / (decoded.len() * 2) as f64;
        assert!((out.reconstruction as f64 - mse).abs() < 1e-6);
    }

    #[test]
    fn quantizing_an_entry_is_exact() {
        // An input exactly equal to an entry has zero quantization error, so
        // the codebook and commitment terms vanish on it.
        let model = test_model();
        let n_k = model.config.n_k;
        let entries = model.memory_entries();
        let (idx, q) = quantize(entries, n_k, &entries[..n_k]);
        assert_eq!(idx, vec![0]);
        assert_eq!(q, &entries[..n_k]);
    }

    #[test]
    fn doubling_beta_doubles_commitment_only() {
        let mut rng = Rng::new(42);
        let model_a = VqModel::<f32>::new(VqConfig::default(), &mut rng);
        let mut rng = Rng::new(42);
        let model_b = VqModel::<f32>::new(VqConfig { beta: 0.5, ..VqConfig::default() }, &mut rng);
        let traj = sample_traj(5);
        let a = model_a.vq_losses(&traj);
        let b = model_b.vq_losses(&traj);
        assert_eq!(a.reconstruction, b.reconstruction);
        assert_eq!(a.codebook, b.codebook);
        assert!((b.commitment - 2.0 * a.commitment).abs() < 1e-9);
    }

    #[test]
    fn storage_accounting_is_linear() {
        assert_eq!(storage_bytes(256, 16), 16_384);
        assert_eq!(storage_bytes(512, 16), 32_768);
        for theta in [16, 32, 64, 128, 256] {
            assert_eq!(storage_bytes(theta, 16), theta * 64);
        }
    }

    #[test]
    fn identical_inputs_use_the_same_entries() {
        let model = test_model();
        let traj = sample_traj(6);
        let trajs = vec![traj.clone(), traj.clone(), traj];
        let report = codebook_report(&model, trajs.iter());
        let single = codebook_report(&model, trajs[..1].iter());
        assert_eq!(report.used, single.used);
        assert!(report.used <= 10);
        assert!(report.utilization() >= 1.0 / model.config.k as f64);
        assert!(report.utilization() <= 1.0);
    }

    #[test]
    fn reconstruction_invariant_under_codebook_permutation() {
        // Reversing entry order and remapping indices leaves the decoded
        // output (hence the reconstruction loss) unchanged.
        let model = test_model();
        let traj = sample_traj(7);
        let out = model.vq_losses(&traj);

        let mut permuted = model.clone();
        let k = model.config.k;
        let n_k = model.config.n_k;
        {
            let handle = permuted.memory_handle();
            let entries = permuted.params.tensor_mut(handle).data_mut();
            let original = entries.to_vec();
            for e in 0..k {
                entries[e * n_k..(e + 1) * n_k]
                    .copy_from_slice(&original[(k - 1 - e) * n_k..(k - e) * n_k]);
            }
        }
        let remapped: Vec<usize> = out.indices.iter().map(|&i| k - 1 - i).collect();
        let a = model.decode_indices(&out.indices);
        let b = permuted.decode_indices(&remapped);
        for (pa, pb) in a.iter().zip(&b) {
            assert_eq!(pa.x, pb.x);
            assert_eq!(pa.y, pb.y);
        }
    }
}
