//! Pre-norm causal transformer stack with hand-written backward pass.
//!
//! Each block computes
//!   h = x + Wo · attn(LN₁(x)) + bo
//!   y = h + W₂ · gelu(W₁ · LN₂(h) + b₁) + b₂
//! and the stack ends in a final LayerNorm. Embedding lookup and the output head live
//! with the compressor/decoder wrappers, which know how their inputs are laid out.

use rand::Rng;

use crate::tensor::{matmul_a_bt, matmul_at_b_acc, Matrix, Scalar};

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams<T> {
    pub ln1_gain: Matrix<T>,
    pub ln1_bias: Matrix<T>,
    pub wq: Matrix<T>,
    pub wk: Matrix<T>,
    pub wv: Matrix<T>,
    pub wo: Matrix<T>,
    pub bo: Matrix<T>,
    pub ln2_gain: Matrix<T>,
    pub ln2_bias: Matrix<T>,
    pub w1: Matrix<T>,
    pub b1: Matrix<T>,
    pub w2: Matrix<T>,
    pub b2: Matrix<T>,
}

impl<T: Scalar> BlockParams<T> {
    fn init<R: Rng>(d: usize, d_ff: usize, n_layers: usize, std: f64, rng: &mut R) -> Self {
        let resid_std = std / (2.0 * n_layers as f64).sqrt();
        Self {
            ln1_gain: Matrix::filled(1, d, T::one()),
            ln1_bias: Matrix::zeros(1, d),
            wq: Matrix::random_normal(d, d, std, rng),
            wk: Matrix::random_normal(d, d, std, rng),
            wv: Matrix::random_normal(d, d, std, rng),
            wo: Matrix::random_normal(d, d, resid_std, rng),
            bo: Matrix::zeros(1, d),
            ln2_gain: Matrix::filled(1, d, T::one()),
            ln2_bias: Matrix::zeros(1, d),
            w1: Matrix::random_normal(d, d_ff, std, rng),
            b1: Matrix::zeros(1, d_ff),
            w2: Matrix::random_normal(d_ff, d, resid_std, rng),
            b2: Matrix::zeros(1, d),
        }
    }

    fn zeros_like(&self) -> Self {
        let z = |m: &Matrix<T>| Matrix::zeros(m.rows(), m.cols());
        Self {
            ln1_gain: z(&self.ln1_gain),
            ln1_bias: z(&self.ln1_bias),
            wq: z(&self.wq),
            wk: z(&self.wk),
            wv: z(&self.wv),
            wo: z(&self.wo),
            bo: z(&self.bo),
            ln2_gain: z(&self.ln2_gain),
            ln2_bias: z(&self.ln2_bias),
            w1: z(&self.w1),
            b1: z(&self.b1),
            w2: z(&self.w2),
            b2: z(&self.b2),
        }
    }

    const NAMES: [&'static str; 13] = [
        "ln1.gain", "ln1.bias", "wq", "wk", "wv", "wo", "bo", "ln2.gain", "ln2.bias", "w1", "b1",
        "w2", "b2",
    ];

    fn tensors(&self) -> [&Matrix<T>; 13] {
        [
            &self.ln1_gain,
            &self.ln1_bias,
            &self.wq,
            &self.wk,
            &self.wv,
            &self.wo,
            &self.bo,
            &self.ln2_gain,
            &self.ln2_bias,
            &self.w1,
            &self.b1,
            &self.w2,
            &self.b2,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Matrix<T>; 13] {
        [
            &mut self.ln1_gain,
            &mut self.ln1_bias,
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wo,
            &mut self.bo,
            &mut self.ln2_gain,
            &mut self.ln2_bias,
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
        ]
    }
}

/// Embeddings, blocks, final norm and (decoder only) the output head.
#[derive(Clone, Debug, PartialEq)]
pub struct TransformerParams<T> {
    pub tok_emb: Matrix<T>,
    pub pos_emb: Matrix<T>,
    pub blocks: Vec<BlockParams<T>>,
    pub lnf_gain: Matrix<T>,
    pub lnf_bias: Matrix<T>,
    pub head: Option<Matrix<T>>,
}

impl<T: Scalar> TransformerParams<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn init<R: Rng>(
        vocab: usize,
        max_positions: usize,
        d: usize,
        d_ff: usize,
        n_layers: usize,
        with_head: bool,
        std: f64,
        rng: &mut R,
    ) -> Self {
        let tok_emb = Matrix::random_normal(vocab, d, std, rng);
        let pos_emb = Matrix::random_normal(max_positions, d, std, rng);
        let blocks = (0..n_layers)
            .map(|_| BlockParams::init(d, d_ff, n_layers, std, rng))
            .collect();
        let head = with_head.then(|| Matrix::random_normal(d, vocab, std, rng));
        Self {
            tok_emb,
            pos_emb,
            blocks,
            lnf_gain: Matrix::filled(1, d, T::one()),
            lnf_bias: Matrix::zeros(1, d),
            head,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            tok_emb: Matrix::zeros(self.tok_emb.rows(), self.tok_emb.cols()),
            pos_emb: Matrix::zeros(self.pos_emb.rows(), self.pos_emb.cols()),
            blocks: self.blocks.iter().map(BlockParams::zeros_like).collect(),
            lnf_gain: Matrix::zeros(1, self.lnf_gain.cols()),
            lnf_bias: Matrix::zeros(1, self.lnf_bias.cols()),
            head: self
                .head
                .as_ref()
                .map(|h| Matrix::zeros(h.rows(), h.cols())),
        }
    }

    pub fn named_tensors(&self, prefix: &str) -> Vec<(String, &Matrix<T>)> {
        let mut out = vec![
            (format!("{prefix}.tok_emb"), &self.tok_emb),
            (format!("{prefix}.pos_emb"), &self.pos_emb),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            for (name, t) in BlockParams::<T>::NAMES.iter().zip(b.tensors()) {
                out.push((format!("{prefix}.blocks.{i}.{name}"), t));
            }
        }
        out.push((format!("{prefix}.lnf.gain"), &self.lnf_gain));
        out.push((format!("{prefix}.lnf.bias"), &self.lnf_bias));
        if let Some(h) = &self.head {
            out.push((format!("{prefix}.head"), h));
        }
        out
    }

    /// Same order as [`Self::named_tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix<T>> {
        let mut out = vec![&mut self.tok_emb, &mut self.pos_emb];
        for b in &mut self.blocks {
            out.extend(b.tensors_mut());
        }
        out.push(&mut self.lnf_gain);
        out.push(&mut self.lnf_bias);
        if let Some(h) = &mut self.head {
            out.push(h);
        }
        out
    }

    pub fn d_model(&self) -> usize {
        self.tok_emb.cols()
    }

    pub fn max_positions(&self) -> usize {
        self.pos_emb.rows()
    }
}

struct LnCache<T> {
    xhat: Matrix<T>,
    rstd: Vec<T>,
}

fn layer_norm<T: Scalar>(
    x: &Matrix<T>,
    gain: &Matrix<T>,
    bias: &Matrix<T>,
) -> (Matrix<T>, LnCache<T>) {
    let (rows, d) = x.shape();
    let inv_d = T::of(1.0 / d as f64);
    let eps = T::of(LN_EPS);
    let mut xhat = Matrix::zeros(rows, d);
    let mut y = Matrix::zeros(rows, d);
    let mut rstd = Vec::with_capacity(rows);
    let (g, b) = (gain.as_slice(), bias.as_slice());
    for r in 0..rows {
        let row = x.row(r);
        let mean = row.iter().fold(T::zero(), |a, &v| a + v) * inv_d;
        let var = row
            .iter()
            .fold(T::zero(), |a, &v| a + (v - mean) * (v - mean))
            * inv_d;
        let rs = T::one() / (var + eps).sqrt();
        rstd.push(rs);
        let xh = xhat.row_mut(r);
        for c in 0..d {
            xh[c] = (row[c] - mean) * rs;
        }
        let xh = xhat.row(r).to_vec();
        let yr = y.row_mut(r);
        for c in 0..d {
            yr[c] = xh[c] * g[c] + b[c];
        }
    }
    (y, LnCache { xhat, rstd })
}

fn layer_norm_backward<T: Scalar>(
    dy: &Matrix<T>,
    cache: &LnCache<T>,
    gain: &Matrix<T>,
    dgain: &mut Matrix<T>,
    dbias: &mut Matrix<T>,
) -> Matrix<T> {
    let (rows, d) = dy.shape();
    let inv_d = T::of(1.0 / d as f64);
    let g = gain.as_slice();
    let mut dx = Matrix::zeros(rows, d);
    let mut dxhat = vec![T::zero(); d];
    for r in 0..rows {
        let dyr = dy.row(r);
        let xh = cache.xhat.row(r);
        {
            let dg = dgain.as_mut_slice();
            for c in 0..d {
                dg[c] += dyr[c] * xh[c];
            }
        }
        {
            let db = dbias.as_mut_slice();
            for c in 0..d {
                db[c] += dyr[c];
            }
        }
        let mut mean_dxhat = T::zero();
        let mut mean_dxhat_xhat = T::zero();
        for c in 0..d {
            dxhat[c] = dyr[c] * g[c];
            mean_dxhat += dxhat[c];
            mean_dxhat_xhat += dxhat[c] * xh[c];
        }
        mean_dxhat *= inv_d;
        mean_dxhat_xhat *= inv_d;
        let rs = cache.rstd[r];
        let dxr = dx.row_mut(r);
        for c in 0..d {
            dxr[c] = rs * (dxhat[c] - mean_dxhat - xh[c] * mean_dxhat_xhat);
        }
    }
    dx
}

fn add_bias<T: Scalar>(m: &mut Matrix<T>, bias: &Matrix<T>) {
    let b = bias.as_slice();
    for r in 0..m.rows() {
        for (v, &bv) in m.row_mut(r).iter_mut().zip(b) {
            *v += bv;
        }
    }
}

fn bias_grad<T: Scalar>(dy: &Matrix<T>, dbias: &mut Matrix<T>) {
    let db = dbias.as_mut_slice();
    for r in 0..dy.rows() {
        for (g, &v) in db.iter_mut().zip(dy.row(r)) {
            *g += v;
        }
    }
}

const GELU_A: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_B: f64 = 0.044_715;

fn gelu<T: Scalar>(u: T) -> T {
    let a = T::of(GELU_A);
    let b = T::of(GELU_B);
    let half = T::of(0.5);
    half * u * (T::one() + (a * (u + b * u * u * u)).tanh())
}

fn gelu_grad<T: Scalar>(u: T) -> T {
    let a = T::of(GELU_A);
    let b = T::of(GELU_B);
    let half = T::of(0.5);
    let t = (a * (u + b * u * u * u)).tanh();
    half * (T::one() + t) + half * u * (T::one() - t * t) * a * (T::one() + T::of(3.0) * b * u * u)
}

/// Causal multi-head attention; returns the concatenated head outputs and the
/// per-head probability matrices.
fn attention<T: Scalar>(
    q: &Matrix<T>,
    k: &Matrix<T>,
    v: &Matrix<T>,
    n_heads: usize,
) -> (Matrix<T>, Vec<Matrix<T>>) {
    let (s, d) = q.shape();
    let dh = d / n_heads;
    let scale = T::of(1.0 / (dh as f64).sqrt());
    let mut out = Matrix::zeros(s, d);
    let mut probs = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let off = h * dh;
        let mut p = Matrix::zeros(s, s);
        T::gemm(
            s,
            dh,
            s,
            scale,
            &q.as_slice()[off..],
            d as isize,
            1,
            &k.as_slice()[off..],
            1,
            d as isize,
            T::zero(),
            p.as_mut_slice(),
            s as isize,
            1,
        );
        for i in 0..s {
            let row = p.row_mut(i);
            crate::tensor::softmax_in_place(&mut row[..=i]);
            row[i + 1..].iter_mut().for_each(|x| *x = T::zero());
        }
        T::gemm(
            s,
            s,
            dh,
            T::one(),
            p.as_slice(),
            s as isize,
            1,
            &v.as_slice()[off..],
            d as isize,
            1,
            T::zero(),
            &mut out.as_mut_slice()[off..],
            d as isize,
            1,
        );
        probs.push(p);
    }
    (out, probs)
}

#[allow(clippy::type_complexity)]
fn attention_backward<T: Scalar>(
    d_out: &Matrix<T>,
    q: &Matrix<T>,
    k: &Matrix<T>,
    v: &Matrix<T>,
    probs: &[Matrix<T>],
) -> (Matrix<T>, Matrix<T>, Matrix<T>) {
    let (s, d) = q.shape();
    let n_heads = probs.len();
    let dh = d / n_heads;
    let scale = T::of(1.0 / (dh as f64).sqrt());
    let mut dq = Matrix::zeros(s, d);
    let mut dk = Matrix::zeros(s, d);
    let mut dv = Matrix::zeros(s, d);
    let mut dp = Matrix::zeros(s, s);
    for (h, p) in probs.iter().enumerate() {
        let off = h * dh;
        T::gemm(
            s,
            dh,
            s,
            T::one(),
            &d_out.as_slice()[off..],
            d as isize,
            1,
            &v.as_slice()[off..],
            1,
            d as isize,
            T::zero(),
            dp.as_mut_slice(),
            s as isize,
            1,
        );
        T::gemm(
            s,
            s,
            dh,
            T::one(),
            p.as_slice(),
            1,
            s as isize,
            &d_out.as_slice()[off..],
            d as isize,
            1,
            T::zero(),
            &mut dv.as_mut_slice()[off..],
            d as isize,
            1,
        );
        // softmax backward, in place: dS = P ∘ (dP − rowsum(P ∘ dP))
        for i in 0..s {
            let pr = p.row(i);
            let dpr = dp.row_mut(i);
            let dot = (0..=i).fold(T::zero(), |a, j| a + pr[j] * dpr[j]);
            for j in 0..=i {
                dpr[j] = pr[j] * (dpr[j] - dot);
            }
            dpr[i + 1..].iter_mut().for_each(|x| *x = T::zero());
        }
        T::gemm(
            s,
            s,
            dh,
            scale,
            dp.as_slice(),
            s as isize,
            1,
            &k.as_slice()[off..],
            d as isize,
            1,
            T::zero(),
            &mut dq.as_mut_slice()[off..],
            d as isize,
            1,
        );
        T::gemm(
            s,
            s,
            dh,
            scale,
            dp.as_slice(),
            1,
            s as isize,
            &q.as_slice()[off..],
            d as isize,
            1,
            T::zero(),
            &mut dk.as_mut_slice()[off..],
            d as isize,
            1,
        );
    }
    (dq, dk, dv)
}

struct BlockCache<T> {
    ln1: LnCache<T>,
    h1: Matrix<T>,
    q: Matrix<T>,
    k: Matrix<T>,
    v: Matrix<T>,
    probs: Vec<Matrix<T>>,
    attn: Matrix<T>,
    ln2: LnCache<T>,
    h2: Matrix<T>,
    pre_act: Matrix<T>,
    act: Matrix<T>,
}

/// Activations kept by [`forward`] for [`backward`].
pub struct StackCache<T> {
    blocks: Vec<BlockCache<T>>,
    lnf: LnCache<T>,
}

fn block_forward<T: Scalar>(
    x: &Matrix<T>,
    p: &BlockParams<T>,
    n_heads: usize,
) -> (Matrix<T>, BlockCache<T>) {
    let (h1, ln1) = layer_norm(x, &p.ln1_gain, &p.ln1_bias);
    let q = h1.matmul(&p.wq);
    let k = h1.matmul(&p.wk);
    let v = h1.matmul(&p.wv);
    let (attn, probs) = attention(&q, &k, &v, n_heads);
    let mut proj = attn.matmul(&p.wo);
    add_bias(&mut proj, &p.bo);
    let mut mid = x.clone();
    mid.add_assign(&proj);

    let (h2, ln2) = layer_norm(&mid, &p.ln2_gain, &p.ln2_bias);
    let mut pre_act = h2.matmul(&p.w1);
    add_bias(&mut pre_act, &p.b1);
    let mut act = pre_act.clone();
    act.as_mut_slice().iter_mut().for_each(|u| *u = gelu(*u));
    let mut ff = act.matmul(&p.w2);
    add_bias(&mut ff, &p.b2);
    mid.add_assign(&ff);
    (
        mid,
        BlockCache {
            ln1,
            h1,
            q,
            k,
            v,
            probs,
            attn,
            ln2,
            h2,
            pre_act,
            act,
        },
    )
}

fn block_backward<T: Scalar>(
    dy: &Matrix<T>,
    p: &BlockParams<T>,
    c: &BlockCache<T>,
    g: &mut BlockParams<T>,
) -> Matrix<T> {
    // feed-forward branch
    bias_grad(dy, &mut g.b2);
    matmul_at_b_acc(&c.act, dy, &mut g.w2);
    let mut d_pre = matmul_a_bt(dy, &p.w2);
    for (dv, &u) in d_pre.as_mut_slice().iter_mut().zip(c.pre_act.as_slice()) {
        *dv *= gelu_grad(u);
    }
    bias_grad(&d_pre, &mut g.b1);
    matmul_at_b_acc(&c.h2, &d_pre, &mut g.w1);
    let dh2 = matmul_a_bt(&d_pre, &p.w1);
    let mut dmid = layer_norm_backward(&dh2, &c.ln2, &p.ln2_gain, &mut g.ln2_gain, &mut g.ln2_bias);
    dmid.add_assign(dy);

    // attention branch
    bias_grad(&dmid, &mut g.bo);
    matmul_at_b_acc(&c.attn, &dmid, &mut g.wo);
    let d_attn = matmul_a_bt(&dmid, &p.wo);
    let (dq, dk, dv) = attention_backward(&d_attn, &c.q, &c.k, &c.v, &c.probs);
    matmul_at_b_acc(&c.h1, &dq, &mut g.wq);
    matmul_at_b_acc(&c.h1, &dk, &mut g.wk);
    matmul_at_b_acc(&c.h1, &dv, &mut g.wv);
    let mut dh1 = matmul_a_bt(&dq, &p.wq);
    dh1.add_assign(&matmul_a_bt(&dk, &p.wk));
    dh1.add_assign(&matmul_a_bt(&dv, &p.wv));
    let mut dx = layer_norm_backward(&dh1, &c.ln1, &p.ln1_gain, &mut g.ln1_gain, &mut g.ln1_bias);
    dx.add_assign(&dmid);
    dx
}

/// Runs the blocks and the final norm over already-embedded inputs.
pub fn forward<T: Scalar>(
    x: Matrix<T>,
    p: &TransformerParams<T>,
    n_heads: usize,
) -> (Matrix<T>, StackCache<T>) {
    let mut h = x;
    let mut blocks = Vec::with_capacity(p.blocks.len());
    for bp in &p.blocks {
        let (next, cache) = block_forward(&h, bp, n_heads);
        blocks.push(cache);
        h = next;
    }
    let (out, lnf) = layer_norm(&h, &p.lnf_gain, &p.lnf_bias);
    (out, StackCache { blocks, lnf })
}

/// Back-propagates `d_out` (gradient w.r.t. the final-norm output), accumulating
/// block and final-norm gradients into `g`; returns the gradient w.r.t. the inputs.
pub fn backward<T: Scalar>(
    d_out: &Matrix<T>,
    p: &TransformerParams<T>,
    cache: &StackCache<T>,
    g: &mut TransformerParams<T>,
) -> Matrix<T> {
    let mut dh = layer_norm_backward(
        d_out,
        &cache.lnf,
        &p.lnf_gain,
        &mut g.lnf_gain,
        &mut g.lnf_bias,
    );
    for ((bp, bc), bg) in p
        .blocks
        .iter()
        .zip(&cache.blocks)
        .zip(g.blocks.iter_mut())
        .rev()
    {
        dh = block_backward(&dh, bp, bc, bg);
    }
    dh
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn gelu_derivative_matches_finite_difference() {
        for &u in &[-3.0f64, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu(u + h) - gelu(u - h)) / (2.0 * h);
            assert!((fd - gelu_grad(u)).abs() < 1e-8, "u={u}");
        }
    }

    #[test]
    fn attention_rows_are_causal_distributions() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let q = Matrix::<f64>::random_normal(6, 8, 1.0, &mut rng);
        let k = Matrix::<f64>::random_normal(6, 8, 1.0, &mut rng);
        let v = Matrix::<f64>::random_normal(6, 8, 1.0, &mut rng);
        let (_, probs) = attention(&q, &k, &v, 2);
        for p in &probs {
            for i in 0..6 {
                let s: f64 = p.row(i).iter().sum();
                assert!((s - 1.0).abs() < 1e-12);
                assert!(p.row(i)[i + 1..].iter().all(|&x| x == 0.0));
            }
        }
    }

    #[test]
    fn stack_input_gradient_matches_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let params = TransformerParams::<f64>::init(5, 8, 8, 12, 2, false, 0.4, &mut rng);
        let x = Matrix::<f64>::random_normal(4, 8, 1.0, &mut rng);
        let w = Matrix::<f64>::random_normal(4, 8, 1.0, &mut rng);
        let objective = |x: &Matrix<f64>| -> f64 {
            let (y, _) = forward(x.clone(), &params, 2);
            y.as_slice()
                .iter()
                .zip(w.as_slice())
                .map(|(a, b)| a * b)
                .sum()
        };
        let (_, cache) = forward(x.clone(), &params, 2);
        let mut g = params.zeros_like();
        let dx = backward(&w, &params, &cache, &mut g);
        for idx in 0..x.len() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp.as_mut_slice()[idx] += 1e-5;
            xm.as_mut_slice()[idx] -= 1e-5;
            let fd = (objective(&xp) - objective(&xm)) / 2e-5;
            let an = dx.as_slice()[idx];
            assert!(
                (fd - an).abs() <= 1e-6 * (1.0 + an.abs()),
                "idx {idx}: fd={fd} an={an}"
            );
        }
    }
}
