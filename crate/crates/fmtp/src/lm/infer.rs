//! Tape-free inference: teacher-forced forward, incremental decoding with a
//! per-layer key/value cache, ancestral sampling, and sequence likelihoods.
//!
//! The arithmetic mirrors the tape path operation for operation (same kernel
//! loop orders, same masked-softmax reduction order), so incremental and
//! teacher-forced results agree to float roundoff.

use crate::num::tape::{mm_nn, mm_nt};
use crate::num::{Rng, Scalar, LAYERNORM_EPS};

use super::{AttentionMask, LmModel, MaskKind, TokenSequence};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleConfig {
    pub k_samples: usize,
    pub temperature: f64,
    pub seed: u64,
}

impl Default for SampleConfig {
    fn default() -> Self {
        SampleConfig { k_samples: 20, temperature: 1.0, seed: 0 }
    }
}

impl SampleConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.k_samples == 0 {
            return Err("k_samples must be at least 1".into());
        }
        if !(self.temperature > 0.0) {
            return Err("temperature must be positive".into());
        }
        Ok(())
    }
}

fn layernorm_rows<T: Scalar>(x: &mut [T], dim: usize, gain: &[T], bias: &[T]) {
    let eps = T::from_f64(LAYERNORM_EPS);
    let inv_n = T::one() / T::from_f64(dim as f64);
    for row in x.chunks_exact_mut(dim) {
        let mut mean = T::zero();
        for &v in row.iter() {
            mean = mean + v;
        }
        mean = mean * inv_n;
        let mut var = T::zero();
        for &v in row.iter() {
            let d = v - mean;
            var = var + d * d;
        }
        var = var * inv_n;
        let inv_std = T::one() / (var + eps).sqrt();
        for (j, v) in row.iter_mut().enumerate() {
            *v = gain[j] * (*v - mean) * inv_std + bias[j];
        }
    }
}

fn masked_softmax_rows<T: Scalar>(scores: &mut [T], rows: usize, cols: usize, mask: &AttentionMask) {
    for r in 0..rows {
        let row = &mut scores[r * cols..(r + 1) * cols];
        let mut max = T::neg_infinity();
        for j in 0..cols {
            if mask.allows(r, j) && row[j] > max {
                max = row[j];
            }
        }
        let mut denom = T::zero();
        for j in 0..cols {
            if mask.allows(r, j) {
                let e = (row[j] - max).exp();
                row[j] = e;
                denom = denom + e;
            } else {
                row[j] = T::zero();
            }
        }
        for j in 0..cols {
            row[j] = row[j] / denom;
        }
    }
}

impl<T: Scalar> LmModel<T> {
    fn embed(&self, tokens: &[usize], first_position: usize) -> Vec<T> {
        let d = self.config.d_model;
        let tok = self.params.tensor(self.tok_emb).data();
        let pos = self.params.tensor(self.pos_emb).data();
        let mut x = Vec::with_capacity(tokens.len() * d);
        for (i, &t) in tokens.iter().enumerate() {
            let p = first_position + i;
            debug_assert!(t < self.config.vocab && p < self.config.max_len);
            for j in 0..d {
                x.push(tok[t * d + j] + pos[p * d + j]);
            }
        }
        x
    }

    /// Teacher-forced logits `[len x vocab]` without gradient tracking.
    pub fn forward_logits_pure(&self, tokens: &[usize], mask: &AttentionMask) -> Vec<T> {
        assert_eq!(tokens.len(), mask.size);
        let d = self.config.d_model;
        let dk = self.config.head_dim();
        let len = tokens.len();
        let scale = T::from_f64(1.0 / (dk as f64).sqrt());
        let mut x = self.embed(tokens, 0);

        for block in &self.blocks {
            let mut attn = vec![T::zero(); len * d];
            for head in &block.heads {
                let wq = self.params.tensor(head.wq).data();
                let wk = self.params.tensor(head.wk).data();
                let wv = self.params.tensor(head.wv).data();
                let wo = self.params.tensor(head.wo).data();
                let mut q = vec![T::zero(); len * dk];
                let mut k = vec![T::zero(); len * dk];
                let mut v = vec![T::zero(); len * dk];
                mm_nn(len, dk, d, &x, wq, &mut q);
                mm_nn(len, dk, d, &x, wk, &mut k);
                mm_nn(len, dk, d, &x, wv, &mut v);
                let mut scores = vec![T::zero(); len * len];
                mm_nt(len, len, dk, &q, &k, &mut scores);
                for s in scores.iter_mut() {
                    *s = *s * scale;
                }
                masked_softmax_rows(&mut scores, len, len, mask);
                let mut ctx = vec![T::zero(); len * dk];
                mm_nn(len, dk, len, &scores, &v, &mut ctx);
                mm_nn(len, d, dk, &ctx, wo, &mut attn);
            }
            for (xi, ai) in x.iter_mut().zip(&attn) {
                *xi = *xi + *ai;
            }
            layernorm_rows(
                &mut x,
                d,
                self.params.tensor(block.ln1_gain).data(),
                self.params.tensor(block.ln1_bias).data(),
            );

            let ff = self.feed_forward(&x, len, block);
            for (xi, fi) in x.iter_mut().zip(&ff) {
                *xi = *xi + *fi;
            }
            layernorm_rows(
                &mut x,
                d,
                self.params.tensor(block.ln2_gain).data(),
                self.params.tensor(block.ln2_bias).data(),
            );
        }

        let vocab = self.config.vocab;
        let mut logits = vec![T::zero(); len * vocab];
        mm_nn(len, vocab, d, &x, self.params.tensor(self.out_proj).data(), &mut logits);
        logits
    }

    fn feed_forward(&self, x: &[T], rows: usize, block: &super::BlockHandles) -> Vec<T> {
        let d = self.config.d_model;
        let ffw = self.config.ff;
        let w1 = self.params.tensor(block.ff_w1).data();
        let b1 = self.params.tensor(block.ff_b1).data();
        let w2 = self.params.tensor(block.ff_w2).data();
        let b2 = self.params.tensor(block.ff_b2).data();
        let mut h = vec![T::zero(); rows * ffw];
        mm_nn(rows, ffw, d, x, w1, &mut h);
        for r in 0..rows {
            for j in 0..ffw {
                let v = h[r * ffw + j] + b1[j];
                h[r * ffw + j] = if v > T::zero() { v } else { T::zero() };
            }
        }
        let mut y = vec![T::zero(); rows * d];
        mm_nn(rows, d, ffw, &h, w2, &mut y);
        for r in 0..rows {
            for j in 0..d {
                y[r * d + j] = y[r * d + j] + b2[j];
            }
        }
        y
    }
}

#[derive(Debug, Clone)]
struct HeadKv<T> {
    k: Vec<T>,
    v: Vec<T>,
}

/// Incremental decoder holding per-layer, per-head key/value rows for every
/// position seen so far. Cloning forks the decoding state, so one prefill
/// can serve many samples.
#[derive(Clone)]
pub struct Decoder<'m, T: Scalar> {
    model: &'m LmModel<T>,
    kind: MaskKind,
    len: usize,
    cache: Vec<Vec<HeadKv<T>>>,
}

impl<'m, T: Scalar> Decoder<'m, T> {
    pub fn new(model: &'m LmModel<T>, kind: MaskKind) -> Self {
        let cache = model
            .blocks
            .iter()
            .map(|b| b.heads.iter().map(|_| HeadKv { k: Vec::new(), v: Vec::new() }).collect())
            .collect();
        Decoder { model, kind, len: 0, cache }
    }

    pub fn position(&self) -> usize {
        self.len
    }

    /// Runs the observed prefix jointly (prefix queries may need keys at
    /// later prefix positions under the semi-causal mask), fills the cache,
    /// and returns the last position's logits.
    pub fn prefill(&mut self, tokens: &[usize]) -> Vec<T> {
        assert!(self.len == 0, "prefill on a fresh decoder");
        assert!(!tokens.is_empty());
        let model = self.model;
        let d = model.config.d_model;
        let dk = model.config.head_dim();
        let len = tokens.len();
        let scale = T::from_f64(1.0 / (dk as f64).sqrt());
        let mask = AttentionMask::for_prefix(self.kind, len, len).expect("prefix mask");
        let mut x = model.embed(tokens, 0);

        for (l, block) in model.blocks.iter().enumerate() {
            let mut attn = vec![T::zero(); len * d];
            for (h, head) in block.heads.iter().enumerate() {
                let wq = model.params.tensor(head.wq).data();
                let wk = model.params.tensor(head.wk).data();
                let wv = model.params.tensor(head.wv).data();
                let wo = model.params.tensor(head.wo).data();
                let mut q = vec![T::zero(); len * dk];
                let mut k = vec![T::zero(); len * dk];
                let mut v = vec![T::zero(); len * dk];
                mm_nn(len, dk, d, &x, wq, &mut q);
                mm_nn(len, dk, d, &x, wk, &mut k);
                mm_nn(len, dk, d, &x, wv, &mut v);
                let mut scores = vec![T::zero(); len * len];
                mm_nt(len, len, dk, &q, &k, &mut scores);
                for s in scores.iter_mut() {
                    *s = *s * scale;
                }
                masked_softmax_rows(&mut scores, len, len, &mask);
                let mut ctx = vec![T::zero(); len * dk];
                mm_nn(len, dk, len, &scores, &v, &mut ctx);
                mm_nn(len, d, dk, &ctx, wo, &mut attn);
                self.cache[l][h].k = k;
                self.cache[l][h].v = v;
            }
            for (xi, ai) in x.iter_mut().zip(&attn) {
                *xi = *xi + *ai;
            }
            layernorm_rows(
                &mut x,
                d,
                model.params.tensor(block.ln1_gain).data(),
                model.params.tensor(block.ln1_bias).data(),
            );
            let ff = model.feed_forward(&x, len, block);
            for (xi, fi) in x.iter_mut().zip(&ff) {
                *xi = *xi + *fi;
            }
            layernorm_rows(
                &mut x,
                d,
                model.params.tensor(block.ln2_gain).data(),
                model.params.tensor(block.ln2_bias).data(),
            );
        }
        self.len = len;

        let vocab = model.config.vocab;
        let mut logits = vec![T::zero(); vocab];
        let last = &x[(len - 1) * d..len * d];
        mm_nn(1, vocab, d, last, model.params.tensor(model.out_proj).data(), &mut logits);
        logits
    }

    /// Appends one token and returns the logits at its position. The newest
    /// query sees every cached key under both mask kinds, so only this
    /// position's row is computed.
    pub fn step(&mut self, token: usize) -> Vec<T> {
        assert!(self.len > 0, "step requires a prefilled decoder");
        let model = self.model;
        let d = model.config.d_model;
        let dk = model.config.head_dim();
        let scale = T::from_f64(1.0 / (dk as f64).sqrt());
        let keys = self.len + 1;
        let mut x = model.embed(&[token], self.len);

        for (l, block) in model.blocks.iter().enumerate() {
            let mut attn = vec![T::zero(); d];
            for (h, head) in block.heads.iter().enumerate() {
                let wq = model.params.tensor(head.wq).data();
                let wk = model.params.tensor(head.wk).data();
                let wv = model.params.tensor(head.wv).data();
                let wo = model.params.tensor(head.wo).data();
                let mut q = vec![T::zero(); dk];
                let mut k = vec![T::zero(); dk];
                let mut v = vec![T::zero(); dk];
                mm_nn(1, dk, d, &x, wq, &mut q);
                mm_nn(1, dk, d, &x, wk, &mut k);
                mm_nn(1, dk, d, &x, wv, &mut v);
                let kv = &mut self.cache[l][h];
                kv.k.extend_from_slice(&k);
                kv.v.extend_from_slice(&v);

                let mut scores = vec![T::zero(); keys];
                mm_nt(1, keys, dk, &q, &kv.k, &mut scores);
                let mut max = T::neg_infinity();
                for s in scores.iter_mut() {
                    *s = *s * scale;
                    if *s > max {
                        max = *s;
                    }
                }
                let mut denom = T::zero();
                for s in scores.iter_mut() {
                    let e = (*s - max).exp();
                    *s = e;
                    denom = denom + e;
                }
                for s in scores.iter_mut() {
                    *s = *s / denom;
                }
                let mut ctx = vec![T::zero(); dk];
                mm_nn(1, dk, keys, &scores, &kv.v, &mut ctx);
                mm_nn(1, d, dk, &ctx, wo, &mut attn);
            }
            for (xi, ai) in x.iter_mut().zip(&attn) {
                *xi = *xi + *ai;
            }
            layernorm_rows(
                &mut x,
                d,
                model.params.tensor(block.ln1_gain).data(),
                model.params.tensor(block.ln1_bias).data(),
            );
            let ff = model.feed_forward(&x, 1, block);
            for (xi, fi) in x.iter_mut().zip(&ff) {
                *xi = *xi + *fi;
            }
            layernorm_rows(
                &mut x,
                d,
                model.params.tensor(block.ln2_gain).data(),
                model.params.tensor(block.ln2_bias).data(),
            );
        }
        self.len = keys;

        let vocab = model.config.vocab;
        let mut logits = vec![T::zero(); vocab];
        mm_nn(1, vocab, d, &x, model.params.tensor(model.out_proj).data(), &mut logits);
        logits
    }
}

fn categorical<T: Scalar>(logits: &[T], temperature: f64, rng: &mut Rng) -> usize {
    let z: Vec<f64> = logits.iter().map(|&l| l.to_f64() / temperature).collect();
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|&v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    let mut r = rng.uniform() * total;
    for (i, &e) in exps.iter().enumerate() {
        r -= e;
        if r < 0.0 {
            return i;
        }
    }
    exps.len() - 1
}

/// Draws `cfg.k_samples` independent ancestral completions of `steps` future
/// tokens. Each sample gets its own PRNG stream derived from the seed, so
/// samples are reproducible regardless of evaluation order.
pub fn sample_future<T: Scalar>(
    model: &LmModel<T>,
    observed: &[usize],
    steps: usize,
    cfg: &SampleConfig,
    kind: MaskKind,
) -> Vec<Vec<usize>> {
    cfg.validate().expect("invalid sample config");
    let mut base = Decoder::new(model, kind);
    let prefill_logits = base.prefill(observed);
    (0..cfg.k_samples)
        .map(|s| {
            let mut rng = Rng::derive(cfg.seed, s as u64);
            let mut decoder = base.clone();
            let mut logits = prefill_logits.clone();
            let mut tokens = Vec::with_capacity(steps);
            for _ in 0..steps {
                let t = categorical(&logits, cfg.temperature, &mut rng);
                tokens.push(t);
                if tokens.len() < steps {
                    logits = decoder.step(t);
                }
            }
            tokens
        })
        .collect()
}

fn log_softmax_at<T: Scalar>(row: &[T], target: usize) -> f64 {
    let max = row.iter().cloned().fold(T::neg_infinity(), T::max).to_f64();
    let mut denom = 0.0f64;
    for &v in row {
        denom += (v.to_f64() - max).exp();
    }
    row[target].to_f64() - max - denom.ln()
}

/// Sum of the log-conditionals of the future tokens under teacher forcing
/// (always <= 0).
pub fn sequence_log_prob<T: Scalar>(model: &LmModel<T>, seq: &TokenSequence, kind: MaskKind) -> f64 {
    assert!(seq.p >= 1, "future suffix must be non-empty");
    let len = seq.len() - 1;
    let mask = AttentionMask::for_prefix(kind, seq.o, len).expect("mask");
    let logits = model.forward_logits_pure(&seq.tokens[..len], &mask);
    let vocab = model.config.vocab;
    let mut total = 0.0f64;
    for i in 0..len {
        if i + 1 < seq.o {
            continue;
        }
        let row = &logits[i * vocab..(i + 1) * vocab];
        total += log_softmax_at(row, seq.tokens[i + 1]);
    }
    total
}

/// Mean future-position NLL on the pure path; equals `-sequence_log_prob / p`.
pub fn lm_loss_pure<T: Scalar>(model: &LmModel<T>, seq: &TokenSequence, kind: MaskKind) -> f64 {
    -sequence_log_prob(model, seq, kind) / seq.p as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::LmConfig;
    use crate::num::Tape;

    fn small_model(seed: u64) -> LmModel<f32> {
        let mut rng = Rng::new(seed);
        LmModel::new(
            LmConfig { vocab: 12, d_model: 16, heads: 2, layers: 2, ff: 24, max_len: 10 },
            &mut rng,
        )
    }

    fn seq() -> TokenSequence {
        TokenSequence::new(vec![3, 1, 4, 1, 5, 9, 2, 6, 5, 3], 4, 6)
    }

    #[test]
    fn pure_forward_matches_tape_forward() {
        let model = small_model(3);
        let s = seq();
        let len = s.len() - 1;
        let mask = AttentionMask::for_prefix(MaskKind::SemiCausal, s.o, len).unwrap();
        let pure = model.forward_logits_pure(&s.tokens[..len], &mask);

        let mut tape = Tape::new();
        let bound = model.params.bind(&mut tape);
        let taped = model.forward_logits(&mut tape, &bound, &s.tokens[..len], &mask).unwrap();
        for (a, b) in pure.iter().zip(tape.data(taped)) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn incremental_matches_teacher_forced() {
        for kind in [MaskKind::SemiCausal, MaskKind::Causal] {
            let model = small_model(11);
            let s = seq();
            let len = s.len() - 1;
            let mask = AttentionMask::for_prefix(kind, s.o, len).unwrap();
            let reference = model.forward_logits_pure(&s.tokens[..len], &mask);
            let vocab = model.config.vocab;

            let mut decoder = Decoder::new(&model, kind);
            let mut step_logits = vec![decoder.prefill(&s.tokens[..s.o])];
            for &t in &s.tokens[s.o..len] {
                step_logits.push(decoder.step(t));
            }
            // Stepwise logits correspond to teacher-forced rows o-1 .. len-1.
            for (offset, logits) in step_logits.iter().enumerate() {
                let row = s.o - 1 + offset;
                for (a, b) in logits.iter().zip(&reference[row * vocab..(row + 1) * vocab]) {
                    assert!((a - b).abs() < 1e-5, "row {row}: {a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn near_zero_temperature_is_greedy() {
        let model = small_model(5);
        let obs = [1usize, 2, 3, 4];
        let cfg = SampleConfig { k_samples: 8, temperature: 1e-6, seed: 9 };
        let samples = sample_future(&model, &obs, 6, &cfg, MaskKind::SemiCausal);

        // Greedy reference by argmax at every step.
        let mut decoder = Decoder::new(&model, MaskKind::SemiCausal);
        let mut logits = decoder.prefill(&obs);
        let mut greedy = Vec::new();
        for _ in 0..6 {
            let t = logits
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            greedy.push(t);
            if greedy.len() < 6 {
                logits = decoder.step(t);
            }
        }
        for s in samples {
            assert_eq!(s, greedy);
        }
    }

    #[test]
    fn fixed_seed_gives_identical_sample_sets() {
        let model = small_model(8);
        let obs = [0usize, 5, 2, 7];
        let cfg = SampleConfig { k_samples: 5, temperature: 1.0, seed: 123 };
        let a = sample_future(&model, &obs, 6, &cfg, MaskKind::SemiCausal);
        let b = sample_future(&model, &obs, 6, &cfg, MaskKind::SemiCausal);
        assert_eq!(a, b);
    }

    #[test]
    fn log_prob_is_nonpositive_and_matches_loss() {
        let model = small_model(2);
        let s = seq();
        let lp = sequence_log_prob(&model, &s, MaskKind::SemiCausal);
        assert!(lp <= 0.0);
        let loss = lm_loss_pure(&model, &s, MaskKind::SemiCausal);
        assert!((lp + loss * s.p as f64).abs() < 1e-9);
        // Tape path agrees.
        let tape_loss = model.lm_loss(&s, MaskKind::SemiCausal) as f64;
        assert!((loss - tape_loss).abs() < 1e-5, "{loss} vs {tape_loss}");
    }

    #[test]
    fn two_token_vocabulary_matches_direct_enumeration() {
        // Fixed-logit model: zero all parameters except the output projection
        // bias... there is no bias, so pin the token embedding and projection
        // so logits depend only on position. With all transformer weights
        // zeroed, layernorm outputs are bias vectors (zero), so logits are 0
        // and every conditional is exactly 1/2.
        let mut rng = Rng::new(1);
        let mut model = LmModel::<f32>::new(
            LmConfig { vocab: 2, d_model: 8, heads: 2, layers: 1, ff: 8, max_len: 6 },
            &mut rng,
        );
        for (_, t) in model.params.iter_mut() {
            t.data_mut().fill(0.0);
        }
        let s = TokenSequence::new(vec![0, 1, 0, 1, 1, 0], 3, 3);
        let lp = sequence_log_prob(&model, &s, MaskKind::SemiCausal);
        let direct = (0.5f64).ln() * 3.0;
        assert!((lp - direct).abs() < 1e-9, "{lp} vs {direct}");
    }
}
