use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::transformer::{self, StackCache, TransformerParams};
use super::{
    CompressionConfig, CompressorDecoder, LogitMatrix, MemoryTensor, ModelConfig, ModelError, Role,
};
use crate::tensor::{matmul_a_bt, matmul_at_b_acc, Matrix, Scalar};
use crate::vocab::{TokenId, TokenSequence, Vocabulary, BOS};

/// Default standard deviation for weight initialization.
pub const INIT_STD: f64 = 0.02;

/// Every trainable tensor of the compressor/decoder pair.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterSet<T> {
    pub compressor: TransformerParams<T>,
    /// Learned embeddings of the `M` memory slots (M × d_compressor).
    pub memory_slots: Matrix<T>,
    /// d_compressor × d_decoder; absent when the projector is disabled.
    pub projector: Option<Matrix<T>>,
    pub decoder: TransformerParams<T>,
}

impl<T: Scalar> ParameterSet<T> {
    pub fn zeros_like(&self) -> Self {
        Self {
            compressor: self.compressor.zeros_like(),
            memory_slots: Matrix::zeros(self.memory_slots.rows(), self.memory_slots.cols()),
            projector: self
                .projector
                .as_ref()
                .map(|p| Matrix::zeros(p.rows(), p.cols())),
            decoder: self.decoder.zeros_like(),
        }
    }

    /// Named tensors in a fixed order: compressor, memory slots, projector, decoder.
    pub fn named_tensors(&self) -> Vec<(String, &Matrix<T>)> {
        let mut out = self.compressor.named_tensors("compressor");
        out.push(("memory_slots".to_string(), &self.memory_slots));
        if let Some(p) = &self.projector {
            out.push(("projector".to_string(), p));
        }
        out.extend(self.decoder.named_tensors("decoder"));
        out
    }

    /// Mutable tensors in the order of [`Self::named_tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix<T>> {
        let mut out = self.compressor.tensors_mut();
        out.push(&mut self.memory_slots);
        if let Some(p) = &mut self.projector {
            out.push(p);
        }
        out.extend(self.decoder.tensors_mut());
        out
    }

    /// Number of leading tensors (in [`Self::named_tensors`] order) that belong to the
    /// compressor side, i.e. everything except the decoder.
    pub fn compressor_tensor_count(&self) -> usize {
        self.compressor.named_tensors("c").len() + 1 + usize::from(self.projector.is_some())
    }

    pub fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.named_tensors()) {
            a.add_assign(b.1);
        }
    }

    pub fn scale(&mut self, s: T) {
        for t in self.tensors_mut() {
            t.scale(s);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.named_tensors().iter().all(|(_, t)| t.is_finite())
    }

    pub fn num_scalars(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParameterSet<U> {
        let cast_stack = |p: &TransformerParams<T>| TransformerParams {
            tok_emb: p.tok_emb.cast(),
            pos_emb: p.pos_emb.cast(),
            blocks: p
                .blocks
                .iter()
                .map(|b| transformer::BlockParams {
                    ln1_gain: b.ln1_gain.cast(),
                    ln1_bias: b.ln1_bias.cast(),
                    wq: b.wq.cast(),
                    wk: b.wk.cast(),
                    wv: b.wv.cast(),
                    wo: b.wo.cast(),
                    bo: b.bo.cast(),
                    ln2_gain: b.ln2_gain.cast(),
                    ln2_bias: b.ln2_bias.cast(),
                    w1: b.w1.cast(),
                    b1: b.b1.cast(),
                    w2: b.w2.cast(),
                    b2: b.b2.cast(),
                })
                .collect(),
            lnf_gain: p.lnf_gain.cast(),
            lnf_bias: p.lnf_bias.cast(),
            head: p.head.as_ref().map(Matrix::cast),
        };
        ParameterSet {
            compressor: cast_stack(&self.compressor),
            memory_slots: self.memory_slots.cast(),
            projector: self.projector.as_ref().map(Matrix::cast),
            decoder: cast_stack(&self.decoder),
        }
    }
}

/// The trainable compressor/decoder transformer pair.
#[derive(Clone, Debug)]
pub struct CompressionModel<T> {
    pub compressor_cfg: ModelConfig,
    pub decoder_cfg: ModelConfig,
    pub compression: CompressionConfig,
    pub vocab: Vocabulary,
    pub params: ParameterSet<T>,
}

/// Activations of one compress + decode pass, kept for back-propagation.
pub struct ForwardCache<T> {
    source_len: usize,
    compressor_stack: StackCache<T>,
    memory_hidden: Matrix<T>,
    decoder_input: Vec<TokenId>,
    decoder_stack: StackCache<T>,
    token_hidden: Matrix<T>,
}

impl<T: Scalar> CompressionModel<T> {
    pub fn new(
        vocab: Vocabulary,
        compressor_cfg: ModelConfig,
        decoder_cfg: ModelConfig,
        compression: CompressionConfig,
        seed: u64,
    ) -> Result<Self, ModelError> {
        Self::with_init_std(
            vocab,
            compressor_cfg,
            decoder_cfg,
            compression,
            seed,
            INIT_STD,
        )
    }

    pub fn with_init_std(
        vocab: Vocabulary,
        compressor_cfg: ModelConfig,
        decoder_cfg: ModelConfig,
        compression: CompressionConfig,
        seed: u64,
        std: f64,
    ) -> Result<Self, ModelError> {
        Self::validate_configs(&vocab, &compressor_cfg, &decoder_cfg, &compression)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = &compressor_cfg;
        let d = &decoder_cfg;
        let compressor = TransformerParams::init(
            c.vocab_size,
            c.max_positions,
            c.d_model,
            c.d_ff,
            c.n_layers,
            false,
            std,
            &mut rng,
        );
        let memory_slots =
            Matrix::random_normal(compression.memory_slots, c.d_model, std, &mut rng);
        let projector = compression.projector.then(|| {
            if c.d_model == d.d_model {
                Matrix::identity(c.d_model)
            } else {
                Matrix::random_normal(
                    c.d_model,
                    d.d_model,
                    1.0 / (c.d_model as f64).sqrt(),
                    &mut rng,
                )
            }
        });
        let decoder = TransformerParams::init(
            d.vocab_size,
            d.max_positions,
            d.d_model,
            d.d_ff,
            d.n_layers,
            true,
            std,
            &mut rng,
        );
        Ok(Self {
            compressor_cfg,
            decoder_cfg,
            compression,
            vocab,
            params: ParameterSet {
                compressor,
                memory_slots,
                projector,
                decoder,
            },
        })
    }

    /// Reassembles a model from stored parts, checking every tensor shape.
    pub fn from_parts(
        vocab: Vocabulary,
        compressor_cfg: ModelConfig,
        decoder_cfg: ModelConfig,
        compression: CompressionConfig,
        params: ParameterSet<T>,
    ) -> Result<Self, ModelError> {
        let template = Self::new(vocab, compressor_cfg, decoder_cfg, compression, 0)?;
        for ((name, want), (_, got)) in template
            .params
            .named_tensors()
            .iter()
            .zip(params.named_tensors())
        {
            if want.shape() != got.shape() {
                return Err(ModelError::InvalidConfig(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    got.shape(),
                    want.shape()
                )));
            }
        }
        if template.params.named_tensors().len() != params.named_tensors().len() {
            return Err(ModelError::InvalidConfig("tensor count mismatch".into()));
        }
        Ok(Self { params, ..template })
    }

    fn validate_configs(
        vocab: &Vocabulary,
        c: &ModelConfig,
        d: &ModelConfig,
        comp: &CompressionConfig,
    ) -> Result<(), ModelError> {
        c.validate()?;
        d.validate()?;
        comp.validate()?;
        if c.role != Role::Compressor || d.role != Role::Decoder {
            return Err(ModelError::InvalidConfig(
                "compressor/decoder roles swapped".into(),
            ));
        }
        if c.vocab_size != vocab.len() || d.vocab_size != vocab.len() {
            return Err(ModelError::InvalidConfig(format!(
                "vocab sizes {}/{} do not match vocabulary of {}",
                c.vocab_size,
                d.vocab_size,
                vocab.len()
            )));
        }
        if !comp.projector && c.d_model != d.d_model {
            return Err(ModelError::InvalidConfig(
                "compressor and decoder widths differ; a projector is required".into(),
            ));
        }
        if comp.source_length + comp.memory_slots > c.max_positions {
            return Err(ModelError::InvalidConfig(format!(
                "compressor max_positions {} cannot hold L + M = {}",
                c.max_positions,
                comp.source_length + comp.memory_slots
            )));
        }
        Ok(())
    }

    pub fn memory_slots(&self) -> usize {
        self.compression.memory_slots
    }

    fn check_source(&self, x: &[TokenId]) -> Result<(), ModelError> {
        let m = self.memory_slots();
        self.vocab.check(x)?;
        if x.len() + m > self.compressor_cfg.max_positions {
            return Err(ModelError::SequenceTooLong {
                len: x.len() + m,
                max: self.compressor_cfg.max_positions,
            });
        }
        if x.len() < 2 * m {
            return Err(ModelError::SourceTooShort {
                len: x.len(),
                slots: m,
                needed: 2 * m,
            });
        }
        Ok(())
    }

    fn check_decoder_input(&self, z: &Matrix<T>, input: &[TokenId]) -> Result<(), ModelError> {
        self.vocab.check(input)?;
        let expected = (self.memory_slots(), self.decoder_cfg.d_model);
        if z.shape() != expected {
            return Err(ModelError::ShapeMismatch {
                expected,
                got: z.shape(),
            });
        }
        let len = z.rows() + input.len();
        if len > self.decoder_cfg.max_positions {
            return Err(ModelError::SequenceTooLong {
                len,
                max: self.decoder_cfg.max_positions,
            });
        }
        Ok(())
    }

    fn compress_forward(&self, x: &[TokenId]) -> (Matrix<T>, Matrix<T>, StackCache<T>) {
        let p = &self.params.compressor;
        let (l, m, d) = (x.len(), self.memory_slots(), self.compressor_cfg.d_model);
        let mut input = Matrix::zeros(l + m, d);
        for (i, &tok) in x.iter().enumerate() {
            let row = input.row_mut(i);
            for ((v, &e), &pe) in row
                .iter_mut()
                .zip(p.tok_emb.row(tok as usize))
                .zip(p.pos_emb.row(i))
            {
                *v = e + pe;
            }
        }
        for j in 0..m {
            let row = input.row_mut(l + j);
            for ((v, &e), &pe) in row
                .iter_mut()
                .zip(self.params.memory_slots.row(j))
                .zip(p.pos_emb.row(l + j))
            {
                *v = e + pe;
            }
        }
        let (hidden, cache) = transformer::forward(input, p, self.compressor_cfg.n_heads);
        let memory_hidden = hidden.slice_rows(l, l + m);
        let z = match &self.params.projector {
            Some(proj) => memory_hidden.matmul(proj),
            None => memory_hidden.clone(),
        };
        (z, memory_hidden, cache)
    }

    fn decoder_forward(
        &self,
        z: &Matrix<T>,
        input: &[TokenId],
    ) -> (Matrix<T>, Matrix<T>, StackCache<T>) {
        let p = &self.params.decoder;
        let (m, d) = z.shape();
        let mut x = Matrix::zeros(m + input.len(), d);
        for j in 0..m {
            let row = x.row_mut(j);
            for ((v, &e), &pe) in row.iter_mut().zip(z.row(j)).zip(p.pos_emb.row(j)) {
                *v = e + pe;
            }
        }
        for (t, &tok) in input.iter().enumerate() {
            let row = x.row_mut(m + t);
            for ((v, &e), &pe) in row
                .iter_mut()
                .zip(p.tok_emb.row(tok as usize))
                .zip(p.pos_emb.row(m + t))
            {
                *v = e + pe;
            }
        }
        let (hidden, cache) = transformer::forward(x, p, self.decoder_cfg.n_heads);
        let token_hidden = hidden.slice_rows(m, m + input.len());
        let logits = token_hidden.matmul(p.head.as_ref().expect("decoder has an output head"));
        (logits, token_hidden, cache)
    }

    fn check_sample(&self, x: &[TokenId], k: usize) -> Result<(), ModelError> {
        if k == 0 || k > x.len() {
            return Err(ModelError::InvalidConfig(format!(
                "split {k} outside 1..={}",
                x.len()
            )));
        }
        self.check_source(&x[..k])?;
        self.vocab.check(x)?;
        let len = self.memory_slots() + x.len();
        if len > self.decoder_cfg.max_positions {
            return Err(ModelError::SequenceTooLong {
                len,
                max: self.decoder_cfg.max_positions,
            });
        }
        Ok(())
    }

    /// Forward pass for one sample: returns `(L_re, L_nt)` in nats together with the
    /// logits (one row per token of `x`) and the cache for [`Self::backward`].
    pub fn forward_sample(
        &self,
        x: &[TokenId],
        k: usize,
    ) -> Result<((f64, f64), Matrix<T>, ForwardCache<T>), ModelError> {
        self.check_sample(x, k)?;
        let (z, memory_hidden, compressor_stack) = self.compress_forward(&x[..k]);
        let mut decoder_input = Vec::with_capacity(x.len());
        decoder_input.push(BOS);
        decoder_input.extend_from_slice(&x[..x.len() - 1]);
        let (mut logits, token_hidden, decoder_stack) = self.decoder_forward(&z, &decoder_input);

        // logits become softmax probabilities in place; the loss is read off first.
        let (mut re, mut nt) = (0.0, 0.0);
        let v = logits.cols();
        for (t, &target) in x.iter().enumerate() {
            let row = logits.row_mut(t);
            let max = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
            let target_logit = row[target as usize];
            let mut sum = T::zero();
            for val in row.iter_mut() {
                *val = (*val - max).exp();
                sum += *val;
            }
            let inv = T::one() / sum;
            row.iter_mut().for_each(|p| *p *= inv);
            debug_assert!((target as usize) < v);
            let nll = (max.as_f64() + sum.as_f64().ln()) - target_logit.as_f64();
            if t < k {
                re += nll;
            } else {
                nt += nll;
            }
        }
        let cache = ForwardCache {
            source_len: k,
            compressor_stack,
            memory_hidden,
            decoder_input,
            decoder_stack,
            token_hidden,
        };
        Ok(((re, nt), logits, cache))
    }

    /// Loss terms only (no gradient). Uses log-softmax directly for accuracy.
    pub fn sample_loss(&self, x: &[TokenId], k: usize) -> Result<(f64, f64), ModelError> {
        self.check_sample(x, k)?;
        let (z, _, _) = self.compress_forward(&x[..k]);
        let mut decoder_input = Vec::with_capacity(x.len());
        decoder_input.push(BOS);
        decoder_input.extend_from_slice(&x[..x.len() - 1]);
        let (logits, _, _) = self.decoder_forward(&z, &decoder_input);
        let (mut re, mut nt) = (0.0, 0.0);
        for (t, &target) in x.iter().enumerate() {
            let row: Vec<f64> = logits.row(t).iter().map(|v| v.as_f64()).collect();
            let nll = -crate::tensor::log_softmax(&row)[target as usize];
            if t < k {
                re += nll;
            } else {
                nt += nll;
            }
        }
        Ok((re, nt))
    }

    /// Gradient of `L_re + L_nt` for one sample, accumulated into `grads`.
    pub fn backward(
        &self,
        x: &[TokenId],
        probs: Matrix<T>,
        cache: &ForwardCache<T>,
        grads: &mut ParameterSet<T>,
    ) {
        let mut dlogits = probs;
        for (t, &target) in x.iter().enumerate() {
            dlogits[(t, target as usize)] -= T::one();
        }
        let dp = &self.params.decoder;
        let dg = &mut grads.decoder;
        let head = dp.head.as_ref().expect("decoder head");
        matmul_at_b_acc(
            &cache.token_hidden,
            &dlogits,
            dg.head.as_mut().expect("decoder head grad"),
        );
        let d_tok_hidden = matmul_a_bt(&dlogits, head);

        let m = self.memory_slots();
        let d_dec = self.decoder_cfg.d_model;
        let n_in = cache.decoder_input.len();
        let mut d_hidden = Matrix::zeros(m + n_in, d_dec);
        d_hidden.as_mut_slice()[m * d_dec..].copy_from_slice(d_tok_hidden.as_slice());
        let dx = transformer::backward(&d_hidden, dp, &cache.decoder_stack, dg);
        for i in 0..m + n_in {
            let src = dx.row(i);
            for (g, &v) in dg.pos_emb.row_mut(i).iter_mut().zip(src) {
                *g += v;
            }
        }
        for (t, &tok) in cache.decoder_input.iter().enumerate() {
            let src = dx.row(m + t);
            for (g, &v) in dg.tok_emb.row_mut(tok as usize).iter_mut().zip(src) {
                *g += v;
            }
        }
        let dz = dx.slice_rows(0, m);

        let d_mem_hidden = match (&self.params.projector, &mut grads.projector) {
            (Some(proj), Some(gproj)) => {
                matmul_at_b_acc(&cache.memory_hidden, &dz, gproj);
                matmul_a_bt(&dz, proj)
            }
            _ => dz,
        };

        let cp = &self.params.compressor;
        let cg = &mut grads.compressor;
        let l = cache.source_len;
        let d_c = self.compressor_cfg.d_model;
        let mut d_chidden = Matrix::zeros(l + m, d_c);
        d_chidden.as_mut_slice()[l * d_c..].copy_from_slice(d_mem_hidden.as_slice());
        let dxc = transformer::backward(&d_chidden, cp, &cache.compressor_stack, cg);
        for i in 0..l + m {
            for (g, &v) in cg.pos_emb.row_mut(i).iter_mut().zip(dxc.row(i)) {
                *g += v;
            }
        }
        for (i, &tok) in x[..l].iter().enumerate() {
            for (g, &v) in cg.tok_emb.row_mut(tok as usize).iter_mut().zip(dxc.row(i)) {
                *g += v;
            }
        }
        for j in 0..m {
            for (g, &v) in grads.memory_slots.row_mut(j).iter_mut().zip(dxc.row(l + j)) {
                *g += v;
            }
        }
    }

    /// `((L_re, L_nt), ∇(L_re + L_nt))` for one sample.
    pub fn loss_and_grad(
        &self,
        x: &[TokenId],
        k: usize,
    ) -> Result<((f64, f64), ParameterSet<T>), ModelError> {
        let (loss, probs, cache) = self.forward_sample(x, k)?;
        let mut grads = self.params.zeros_like();
        self.backward(x, probs, &cache, &mut grads);
        Ok((loss, grads))
    }

    pub fn cast<U: Scalar>(&self) -> CompressionModel<U> {
        CompressionModel {
            compressor_cfg: self.compressor_cfg.clone(),
            decoder_cfg: self.decoder_cfg.clone(),
            compression: self.compression.clone(),
            vocab: self.vocab.clone(),
            params: self.params.cast(),
        }
    }
}

impl<T: Scalar> CompressorDecoder for CompressionModel<T> {
    fn vocabulary(&self) -> &Vocabulary {
        &self.vocab
    }

    fn compress(&self, x: &TokenSequence) -> Result<MemoryTensor, ModelError> {
        self.check_source(x.ids())?;
        let (z, _, _) = self.compress_forward(x.ids());
        MemoryTensor::new(z.cast(), x.len())
    }

    fn next_token_logits(
        &self,
        z: &MemoryTensor,
        input: &[TokenId],
    ) -> Result<LogitMatrix, ModelError> {
        let zt: Matrix<T> = z.values().cast();
        self.check_decoder_input(&zt, input)?;
        let (logits, _, _) = self.decoder_forward(&zt, input);
        Ok(logits.cast())
    }

    fn max_input_len(&self, slots: usize) -> usize {
        self.decoder_cfg.max_positions.saturating_sub(slots)
    }
}
