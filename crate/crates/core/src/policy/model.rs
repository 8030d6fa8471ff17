//! Pre-LN single-head transformer with a hand-written reverse pass.
//!
//! Every per-row computation (embedding, layer norm, attention over a key
//! prefix, MLP, output head) is a standalone function so that the full
//! forward pass and the incremental decoder produce bit-identical numbers.

use super::params::{BlockLayout, ParamLayout, PolicyConfig, PolicyParams};
use super::sequence::{visible_keys, Input, Sequence};
use super::PolicyError;

pub(crate) const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// `out = W x` for row-major `W` of shape `out.len() x x.len()`.
#[inline]
pub(crate) fn matvec(w: &[f64], x: &[f64], out: &mut [f64]) {
    let n = x.len();
    for (o, row) in out.iter_mut().zip(w.chunks_exact(n)) {
        let mut s = 0.0;
        for (a, b) in row.iter().zip(x) {
            s += a * b;
        }
        *o = s;
    }
}

/// `dx += W^T dy`.
#[inline]
fn matvec_t_acc(w: &[f64], dy: &[f64], dx: &mut [f64]) {
    let n = dx.len();
    for (row, &g) in w.chunks_exact(n).zip(dy) {
        if g != 0.0 {
            for (d, a) in dx.iter_mut().zip(row) {
                *d += a * g;
            }
        }
    }
}

/// `dW += dy x^T`.
#[inline]
fn outer_acc(dw: &mut [f64], dy: &[f64], x: &[f64]) {
    let n = x.len();
    for (row, &g) in dw.chunks_exact_mut(n).zip(dy) {
        if g != 0.0 {
            for (d, a) in row.iter_mut().zip(x) {
                *d += g * a;
            }
        }
    }
}

#[inline]
fn add_to(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Layer norm of one row; writes the normalised row to `xhat` and the affine
/// output to `out`, returning the reciprocal standard deviation.
#[inline]
pub(crate) fn layer_norm(
    x: &[f64],
    g: &[f64],
    b: &[f64],
    xhat: &mut [f64],
    out: &mut [f64],
) -> f64 {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let rstd = 1.0 / (var + LN_EPS).sqrt();
    for i in 0..x.len() {
        xhat[i] = (x[i] - mean) * rstd;
        out[i] = g[i] * xhat[i] + b[i];
    }
    rstd
}

fn layer_norm_backward(
    dy: &[f64],
    xhat: &[f64],
    rstd: f64,
    g: &[f64],
    dg: &mut [f64],
    db: &mut [f64],
    dx: &mut [f64],
) {
    let n = dy.len();
    let mut dxhat = vec![0.0; n];
    for i in 0..n {
        dxhat[i] = dy[i] * g[i];
        dg[i] += dy[i] * xhat[i];
        db[i] += dy[i];
    }
    let m1 = dxhat.iter().sum::<f64>() / n as f64;
    let m2 = dxhat.iter().zip(xhat).map(|(a, b)| a * b).sum::<f64>() / n as f64;
    for i in 0..n {
        dx[i] += rstd * (dxhat[i] - m1 - xhat[i] * m2);
    }
}

#[inline]
pub(crate) fn gelu(u: f64) -> f64 {
    0.5 * u * (1.0 + (GELU_C * (u + GELU_A * u * u * u)).tanh())
}

#[inline]
fn gelu_grad(u: f64) -> f64 {
    let t = (GELU_C * (u + GELU_A * u * u * u)).tanh();
    0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * u * u)
}

/// Softmax attention of one query over keys/values `[0, n)`, keys in index order.
#[inline]
pub(crate) fn attend(
    q: &[f64],
    keys: &[f64],
    values: &[f64],
    n: usize,
    scale: f64,
    probs: &mut [f64],
    ctx: &mut [f64],
) {
    let d = q.len();
    let mut max = f64::NEG_INFINITY;
    for k in 0..n {
        let kr = &keys[k * d..(k + 1) * d];
        let mut s = 0.0;
        for (a, b) in q.iter().zip(kr) {
            s += a * b;
        }
        s *= scale;
        probs[k] = s;
        if s > max {
            max = s;
        }
    }
    let mut z = 0.0;
    for p in probs[..n].iter_mut() {
        *p = (*p - max).exp();
        z += *p;
    }
    for p in probs[..n].iter_mut() {
        *p /= z;
    }
    ctx.fill(0.0);
    for k in 0..n {
        let p = probs[k];
        for (c, v) in ctx.iter_mut().zip(&values[k * d..(k + 1) * d]) {
            *c += p * v;
        }
    }
}

/// Log-softmax of one logit row.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for &l in logits {
        z += (l - max).exp();
    }
    let lz = max + z.ln();
    logits.iter().map(|&l| l - lz).collect()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    log_softmax(logits).into_iter().map(f64::exp).collect()
}

/// Read-only view of parameters with resolved offsets.
pub struct Model<'a> {
    pub cfg: &'a PolicyConfig,
    pub lay: ParamLayout,
    pub w: &'a [f64],
}

struct LayerCache {
    x_in: Vec<f64>,
    xhat1: Vec<f64>,
    rstd1: Vec<f64>,
    a1: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    probs: Vec<f64>,
    prob_off: Vec<usize>,
    ctx: Vec<f64>,
    h: Vec<f64>,
    xhat2: Vec<f64>,
    rstd2: Vec<f64>,
    a2: Vec<f64>,
    u: Vec<f64>,
    g: Vec<f64>,
}

/// Activations recorded by [`Model::forward`] for the reverse pass.
pub struct ForwardCache {
    layers: Vec<LayerCache>,
    xhat_f: Vec<f64>,
    rstd_f: Vec<f64>,
    af: Vec<f64>,
    /// Logits of every target row, in target order.
    pub logits: Vec<Vec<f64>>,
}

impl<'a> Model<'a> {
    pub fn new(params: &'a PolicyParams) -> Self {
        Model {
            cfg: &params.config,
            lay: params.layout(),
            w: &params.values,
        }
    }

    fn p(&self, r: &std::ops::Range<usize>) -> &'a [f64] {
        &self.w[r.clone()]
    }

    fn row(&self, r: &std::ops::Range<usize>, i: usize) -> &'a [f64] {
        let d = self.cfg.d_model;
        &self.w[r.start + i * d..r.start + (i + 1) * d]
    }

    pub(crate) fn scale(&self) -> f64 {
        1.0 / (self.cfg.d_model as f64).sqrt()
    }

    /// Input vector of one position.
    pub(crate) fn embed(&self, input: &Input, evidence: &[Vec<f64>], out: &mut [f64]) {
        let d = self.cfg.d_model;
        let l = &self.lay;
        out.fill(0.0);
        match *input {
            Input::Proprio { x, y, closed } => {
                let pw = self.p(&l.prop_w);
                let pd = self.cfg.proprio_dim();
                let g = self.cfg.grid_size;
                for (i, o) in out.iter_mut().enumerate() {
                    let row = &pw[i * pd..(i + 1) * pd];
                    *o = row[x] + row[g + y] + if closed { row[2 * g] } else { 0.0 };
                }
            }
            Input::Patch { rgb, rx, ry } => {
                matvec(self.p(&l.obs_w), &rgb, out);
                add_to(out, self.p(&l.obs_b));
                add_to(out, self.row(&l.rel_x, rx));
                add_to(out, self.row(&l.rel_y, ry));
            }
            Input::Instr { token, index } => {
                out.copy_from_slice(self.row(&l.tok_emb, token as usize));
                add_to(out, self.row(&l.instr_pos, index));
            }
            Input::Token { token, pos } => {
                out.copy_from_slice(self.row(&l.tok_emb, token as usize));
                add_to(out, self.row(&l.trace_pos, pos));
            }
            Input::Evidence {
                token,
                pos,
                feature,
            } => {
                match feature {
                    Some(f) => {
                        matvec(self.p(&l.ev_w), &evidence[f], out);
                        add_to(out, self.p(&l.ev_b));
                    }
                    None => out.copy_from_slice(self.p(&l.tool_err)),
                }
                add_to(out, self.row(&l.tok_emb, token as usize));
                add_to(out, self.row(&l.trace_pos, pos));
            }
            Input::Slot { slot, pos } => {
                out.copy_from_slice(self.row(&l.slot_emb, slot));
                add_to(out, self.row(&l.trace_pos, pos));
            }
        }
        debug_assert_eq!(out.len(), d);
    }

    /// Query/key/value projections of one row entering block `b`.
    pub(crate) fn qkv(
        &self,
        b: &BlockLayout,
        x: &[f64],
        xhat: &mut [f64],
        a: &mut [f64],
        q: &mut [f64],
        k: &mut [f64],
        v: &mut [f64],
    ) -> f64 {
        let rstd = layer_norm(x, self.p(&b.ln1_g), self.p(&b.ln1_b), xhat, a);
        matvec(self.p(&b.wq), a, q);
        matvec(self.p(&b.wk), a, k);
        matvec(self.p(&b.wv), a, v);
        rstd
    }

    /// Residual attention output followed by the MLP for one row.
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn post_attention(
        &self,
        b: &BlockLayout,
        x: &[f64],
        ctx: &[f64],
        h: &mut [f64],
        xhat2: &mut [f64],
        a2: &mut [f64],
        u: &mut [f64],
        g: &mut [f64],
        out: &mut [f64],
    ) -> f64 {
        matvec(self.p(&b.wo), ctx, h);
        for (hi, xi) in h.iter_mut().zip(x) {
            *hi += xi;
        }
        let rstd = layer_norm(h, self.p(&b.ln2_g), self.p(&b.ln2_b), xhat2, a2);
        matvec(self.p(&b.w1), a2, u);
        let b1 = self.p(&b.b1);
        for ((gi, ui), bi) in g.iter_mut().zip(u.iter_mut()).zip(b1) {
            *ui += bi;
            *gi = gelu(*ui);
        }
        matvec(self.p(&b.w2), g, out);
        let b2 = self.p(&b.b2);
        for ((o, hi), bi) in out.iter_mut().zip(h.iter()).zip(b2) {
            *o += hi + bi;
        }
        rstd
    }

    /// Output logits of one final hidden row.
    pub(crate) fn head(&self, x: &[f64], xhat: &mut [f64], af: &mut [f64]) -> (Vec<f64>, f64) {
        let l = &self.lay;
        let rstd = layer_norm(x, self.p(&l.lnf_g), self.p(&l.lnf_b), xhat, af);
        let mut logits = vec![0.0; self.cfg.vocab_size];
        matvec(self.p(&l.w_out), af, &mut logits);
        add_to(&mut logits, self.p(&l.b_out));
        (logits, rstd)
    }

    /// Full forward pass; logits are produced for the sequence's target rows.
    pub fn forward(&self, seq: &Sequence) -> ForwardCache {
        let rows: Vec<usize> = seq.targets.iter().map(|t| t.row).collect();
        self.forward_rows(seq, &rows)
    }

    pub fn forward_rows(&self, seq: &Sequence, rows: &[usize]) -> ForwardCache {
        let d = self.cfg.d_model;
        let hd = self.cfg.mlp_hidden;
        let n = seq.len();
        let scale = self.scale();
        let mut x = vec![0.0; n * d];
        for (i, inp) in seq.inputs.iter().enumerate() {
            self.embed(inp, &seq.evidence, &mut x[i * d..(i + 1) * d]);
        }
        let mut prob_off = Vec::with_capacity(n + 1);
        prob_off.push(0);
        for q in 0..n {
            prob_off.push(prob_off[q] + seq.visible(q));
        }
        let mut layers = Vec::with_capacity(self.cfg.n_layers);
        for b in &self.lay.blocks {
            let mut c = LayerCache {
                x_in: x.clone(),
                xhat1: vec![0.0; n * d],
                rstd1: vec![0.0; n],
                a1: vec![0.0; n * d],
                q: vec![0.0; n * d],
                k: vec![0.0; n * d],
                v: vec![0.0; n * d],
                probs: vec![0.0; prob_off[n]],
                prob_off: prob_off.clone(),
                ctx: vec![0.0; n * d],
                h: vec![0.0; n * d],
                xhat2: vec![0.0; n * d],
                rstd2: vec![0.0; n],
                a2: vec![0.0; n * d],
                u: vec![0.0; n * hd],
                g: vec![0.0; n * hd],
            };
            for i in 0..n {
                let r = i * d..(i + 1) * d;
                c.rstd1[i] = self.qkv(
                    b,
                    &x[r.clone()],
                    &mut c.xhat1[r.clone()],
                    &mut c.a1[r.clone()],
                    &mut c.q[r.clone()],
                    &mut c.k[r.clone()],
                    &mut c.v[r],
                );
            }
            for i in 0..n {
                let r = i * d..(i + 1) * d;
                let nk = seq.visible(i);
                attend(
                    &c.q[r.clone()],
                    &c.k,
                    &c.v,
                    nk,
                    scale,
                    &mut c.probs[prob_off[i]..prob_off[i + 1]],
                    &mut c.ctx[r],
                );
            }
            for i in 0..n {
                let r = i * d..(i + 1) * d;
                let rh = i * hd..(i + 1) * hd;
                c.rstd2[i] = self.post_attention(
                    b,
                    &c.x_in[r.clone()],
                    &c.ctx[r.clone()],
                    &mut c.h[r.clone()],
                    &mut c.xhat2[r.clone()],
                    &mut c.a2[r.clone()],
                    &mut c.u[rh.clone()],
                    &mut c.g[rh],
                    &mut x[r],
                );
            }
            layers.push(c);
        }
        let mut xhat_f = vec![0.0; n * d];
        let mut af = vec![0.0; n * d];
        let mut rstd_f = vec![0.0; n];
        let mut logits = Vec::with_capacity(rows.len());
        for &row in rows {
            let r = row * d..(row + 1) * d;
            let (lg, rs) = self.head(&x[r.clone()], &mut xhat_f[r.clone()], &mut af[r]);
            rstd_f[row] = rs;
            logits.push(lg);
        }
        ForwardCache {
            layers,
            xhat_f,
            rstd_f,
            af,
            logits,
        }
    }

    /// Reverse pass: accumulates into `grad` the gradient of a loss whose
    /// derivative w.r.t. the logits of `rows[i]` is `dlogits[i]`.
    pub fn backward(
        &self,
        seq: &Sequence,
        cache: &ForwardCache,
        rows: &[usize],
        dlogits: &[Vec<f64>],
        grad: &mut [f64],
    ) {
        let d = self.cfg.d_model;
        let hd = self.cfg.mlp_hidden;
        let n = seq.len();
        let scale = self.scale();
        let l = &self.lay;
        debug_assert_eq!(grad.len(), self.w.len());

        let mut dx = vec![0.0; n * d];
        {
            let mut daf = vec![0.0; d];
            let mut dlnf_g = vec![0.0; d];
            let mut dlnf_b = vec![0.0; d];
            for (&row, dl) in rows.iter().zip(dlogits) {
                let r = row * d..(row + 1) * d;
                outer_acc(&mut grad[l.w_out.clone()], dl, &cache.af[r.clone()]);
                add_to(&mut grad[l.b_out.clone()], dl);
                daf.fill(0.0);
                matvec_t_acc(self.p(&l.w_out), dl, &mut daf);
                layer_norm_backward(
                    &daf,
                    &cache.xhat_f[r.clone()],
                    cache.rstd_f[row],
                    self.p(&l.lnf_g),
                    &mut dlnf_g,
                    &mut dlnf_b,
                    &mut dx[r],
                );
            }
            add_to(&mut grad[l.lnf_g.clone()], &dlnf_g);
            add_to(&mut grad[l.lnf_b.clone()], &dlnf_b);
        }

        for (b, c) in l.blocks.iter().zip(&cache.layers).rev() {
            // MLP and second layer norm.
            let mut dh = dx.clone();
            let mut da2 = vec![0.0; d];
            let mut du = vec![0.0; hd];
            let mut dg2 = vec![0.0; d];
            let mut db2n = vec![0.0; d];
            for i in 0..n {
                let r = i * d..(i + 1) * d;
                let rh = i * hd..(i + 1) * hd;
                let dout = &dx[r.clone()];
                outer_acc(&mut grad[b.w2.clone()], dout, &c.g[rh.clone()]);
                add_to(&mut grad[b.b2.clone()], dout);
                du.fill(0.0);
                matvec_t_acc(self.p(&b.w2), dout, &mut du);
                for (dui, ui) in du.iter_mut().zip(&c.u[rh.clone()]) {
                    *dui *= gelu_grad(*ui);
                }
                outer_acc(&mut grad[b.w1.clone()], &du, &c.a2[r.clone()]);
                add_to(&mut grad[b.b1.clone()], &du);
                da2.fill(0.0);
                matvec_t_acc(self.p(&b.w1), &du, &mut da2);
                layer_norm_backward(
                    &da2,
                    &c.xhat2[r.clone()],
                    c.rstd2[i],
                    self.p(&b.ln2_g),
                    &mut dg2,
                    &mut db2n,
                    &mut dh[r],
                );
            }
            add_to(&mut grad[b.ln2_g.clone()], &dg2);
            add_to(&mut grad[b.ln2_b.clone()], &db2n);

            // Attention.
            let mut dxin = dh.clone();
            let mut dctx = vec![0.0; n * d];
            for i in 0..n {
                let r = i * d..(i + 1) * d;
                outer_acc(&mut grad[b.wo.clone()], &dh[r.clone()], &c.ctx[r.clone()]);
                matvec_t_acc(self.p(&b.wo), &dh[r.clone()], &mut dctx[r]);
            }
            let mut dq = vec![0.0; n * d];
            let mut dk = vec![0.0; n * d];
            let mut dv = vec![0.0; n * d];
            let mut dp = Vec::new();
            for i in 0..n {
                let nk = visible_keys(i, seq.prefix_len, seq.block.as_ref());
                let probs = &c.probs[c.prob_off[i]..c.prob_off[i + 1]];
                let dci = &dctx[i * d..(i + 1) * d];
                dp.clear();
                let mut dot = 0.0;
                for k in 0..nk {
                    let vk = &c.v[k * d..(k + 1) * d];
                    let s: f64 = dci.iter().zip(vk).map(|(a, b)| a * b).sum();
                    dp.push(s);
                    dot += probs[k] * s;
                    let p = probs[k];
                    for (dvj, dcj) in dv[k * d..(k + 1) * d].iter_mut().zip(dci) {
                        *dvj += p * dcj;
                    }
                }
                let qi = &c.q[i * d..(i + 1) * d];
                for k in 0..nk {
                    let ds = probs[k] * (dp[k] - dot) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let kk = &c.k[k * d..(k + 1) * d];
                    for (dqj, kj) in dq[i * d..(i + 1) * d].iter_mut().zip(kk) {
                        *dqj += ds * kj;
                    }
                    for (dkj, qj) in dk[k * d..(k + 1) * d].iter_mut().zip(qi) {
                        *dkj += ds * qj;
                    }
                }
            }
            let mut da1 = vec![0.0; d];
            let mut dg1 = vec![0.0; d];
            let mut db1n = vec![0.0; d];
            for i in 0..n {
                let r = i * d..(i + 1) * d;
                let a1 = &c.a1[r.clone()];
                outer_acc(&mut grad[b.wq.clone()], &dq[r.clone()], a1);
                outer_acc(&mut grad[b.wk.clone()], &dk[r.clone()], a1);
                outer_acc(&mut grad[b.wv.clone()], &dv[r.clone()], a1);
                da1.fill(0.0);
                matvec_t_acc(self.p(&b.wq), &dq[r.clone()], &mut da1);
                matvec_t_acc(self.p(&b.wk), &dk[r.clone()], &mut da1);
                matvec_t_acc(self.p(&b.wv), &dv[r.clone()], &mut da1);
                layer_norm_backward(
                    &da1,
                    &c.xhat1[r.clone()],
                    c.rstd1[i],
                    self.p(&b.ln1_g),
                    &mut dg1,
                    &mut db1n,
                    &mut dxin[r],
                );
            }
            add_to(&mut grad[b.ln1_g.clone()], &dg1);
            add_to(&mut grad[b.ln1_b.clone()], &db1n);
            dx = dxin;
        }

        // Embeddings.
        for (i, inp) in seq.inputs.iter().enumerate() {
            let dxi = &dx[i * d..(i + 1) * d];
            let row_acc = |grad: &mut [f64], r: &std::ops::Range<usize>, idx: usize| {
                add_to(&mut grad[r.start + idx * d..r.start + (idx + 1) * d], dxi);
            };
            match *inp {
                Input::Proprio { x, y, closed } => {
                    let pd = self.cfg.proprio_dim();
                    let g = self.cfg.grid_size;
                    let pw = &mut grad[l.prop_w.clone()];
                    for (j, &v) in dxi.iter().enumerate() {
                        pw[j * pd + x] += v;
                        pw[j * pd + g + y] += v;
                        if closed {
                            pw[j * pd + 2 * g] += v;
                        }
                    }
                }
                Input::Patch { rgb, rx, ry } => {
                    outer_acc(&mut grad[l.obs_w.clone()], dxi, &rgb);
                    add_to(&mut grad[l.obs_b.clone()], dxi);
                    row_acc(grad, &l.rel_x, rx);
                    row_acc(grad, &l.rel_y, ry);
                }
                Input::Instr { token, index } => {
                    row_acc(grad, &l.tok_emb, token as usize);
                    row_acc(grad, &l.instr_pos, index);
                }
                Input::Token { token, pos } => {
                    row_acc(grad, &l.tok_emb, token as usize);
                    row_acc(grad, &l.trace_pos, pos);
                }
                Input::Evidence {
                    token,
                    pos,
                    feature,
                } => {
                    match feature {
                        Some(f) => {
                            outer_acc(&mut grad[l.ev_w.clone()], dxi, &seq.evidence[f]);
                            add_to(&mut grad[l.ev_b.clone()], dxi);
                        }
                        None => add_to(&mut grad[l.tool_err.clone()], dxi),
                    }
                    row_acc(grad, &l.tok_emb, token as usize);
                    row_acc(grad, &l.trace_pos, pos);
                }
                Input::Slot { slot, pos } => {
                    row_acc(grad, &l.slot_emb, slot);
                    row_acc(grad, &l.trace_pos, pos);
                }
            }
        }
    }

    /// Logits of every position (`L x V`).
    pub fn forward_logits(&self, seq: &Sequence) -> Vec<Vec<f64>> {
        let rows: Vec<usize> = (0..seq.len()).collect();
        self.forward_rows(seq, &rows).logits
    }
}

/// Per-target log-probabilities of a sequence and their sum.
pub fn sequence_logprob(
    params: &PolicyParams,
    seq: &Sequence,
) -> Result<(f64, Vec<f64>), PolicyError> {
    let model = Model::new(params);
    let cache = model.forward(seq);
    let per: Vec<f64> = seq
        .targets
        .iter()
        .zip(&cache.logits)
        .map(|(t, lg)| log_softmax(lg)[t.token as usize])
        .collect();
    let total = per.iter().sum::<f64>();
    if !total.is_finite() {
        return Err(PolicyError::NumericalFault(
            "non-finite log-probability".into(),
        ));
    }
    Ok((total, per))
}
