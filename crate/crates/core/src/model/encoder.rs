//! Forward and backward passes over a packed batch.
//!
//! Sequences are concatenated row-wise into one `N x hidden` matrix so every
//! dense layer is a single matrix product; attention runs per sequence and
//! head on the rows of that sequence.

use ndarray::{linalg::general_mat_mul, s, Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, Axis, Zip};

use super::{sigmoid, EncoderModel, ModelError, Result, Slot};
use crate::rng::SeededRng;
use crate::tokenizer::EncodedSequence;

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

/// One sequence: token ids and a key mask (`false` = padding, never attended to).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SeqInput {
    pub ids: Vec<u32>,
    pub mask: Vec<bool>,
}

impl SeqInput {
    pub fn new(ids: Vec<u32>) -> Self {
        let mask = vec![true; ids.len()];
        Self { ids, mask }
    }

    pub fn from_encoded(e: &EncodedSequence) -> Self {
        Self {
            ids: e.ids.clone(),
            mask: e.attention_mask.iter().map(|&m| m == 1).collect(),
        }
    }

    /// Drop trailing padding. Outputs at the remaining positions are unchanged
    /// because padded keys receive zero attention.
    pub fn trimmed(mut self) -> Self {
        let keep = self.mask.iter().rposition(|&m| m).map_or(0, |i| i + 1);
        self.ids.truncate(keep);
        self.mask.truncate(keep);
        self
    }
}

/// Hidden states per sequence (`len x hidden`) and the stacked `[CLS]` rows.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub hidden: Vec<Array2<f64>>,
    pub cls: Array2<f64>,
}

impl ForwardOutput {
    pub(crate) fn from_cache(packed: &Packed, cache: &Cache) -> Self {
        let hidden: Vec<Array2<f64>> = packed
            .spans
            .iter()
            .map(|&(a, b)| cache.output.slice(s![a..b, ..]).to_owned())
            .collect();
        let d = cache.output.ncols();
        let mut cls = Array2::zeros((packed.spans.len(), d));
        for (i, &(a, _)) in packed.spans.iter().enumerate() {
            cls.row_mut(i).assign(&cache.output.row(a));
        }
        Self { hidden, cls }
    }
}

pub(crate) struct Packed {
    pub ids: Vec<u32>,
    pub pos: Vec<usize>,
    pub key_mask: Vec<bool>,
    pub spans: Vec<(usize, usize)>,
}

struct LnCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

pub(crate) struct LayerCache {
    input: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    /// Attention probabilities, indexed `seq * heads + head`.
    pub probs: Vec<Array2<f64>>,
    ctx: Array2<f64>,
    drop_attn: Option<Array2<f64>>,
    ln1: LnCache,
    h1: Array2<f64>,
    f1: Array2<f64>,
    act: Array2<f64>,
    drop_ffn: Option<Array2<f64>>,
    ln2: LnCache,
}

pub(crate) struct Cache {
    emb_ln: LnCache,
    drop_emb: Option<Array2<f64>>,
    pub layers: Vec<LayerCache>,
    pub output: Array2<f64>,
}

/// Loss terms. MLM targets are `(sequence, position, token)`; labels are
/// `(sequence, 0/1)`. Each term is summed and divided by its `norm`.
pub(crate) struct Objective<'a> {
    pub mlm_targets: &'a [(usize, usize, u32)],
    pub labels: &'a [(usize, f64)],
    pub mlm_norm: f64,
    pub cls_norm: f64,
}

#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct LossParts {
    pub mlm_sum: f64,
    pub cls_sum: f64,
}

fn layer_norm(x: &Array2<f64>, g: ArrayView1<f64>, b: ArrayView1<f64>) -> (Array2<f64>, LnCache) {
    let n = x.nrows();
    let d = x.ncols() as f64;
    let mut xhat = Array2::zeros(x.raw_dim());
    let mut inv_std = Array1::zeros(n);
    for (i, row) in x.outer_iter().enumerate() {
        let mean = row.sum() / d;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        inv_std[i] = inv;
        Zip::from(xhat.row_mut(i)).and(&row).for_each(|h, &v| *h = (v - mean) * inv);
    }
    let y = &xhat * &g + b;
    (y, LnCache { xhat, inv_std })
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

fn dropout_mask(rows: usize, cols: usize, p: f64, rng: &mut SeededRng) -> Array2<f64> {
    let keep = 1.0 / (1.0 - p);
    Array2::from_shape_fn((rows, cols), |_| if rng.unit_f64() < p { 0.0 } else { keep })
}

fn linear(x: &ArrayView2<f64>, w: ArrayView2<f64>, b: ArrayView1<f64>) -> Array2<f64> {
    let mut y = x.dot(&w);
    y += &b;
    y
}

fn raw(a: &Array2<f64>) -> &[f64] {
    a.as_slice().expect("standard layout")
}

/// Softmax attention of one head over rows `start..start + len` of row-major
/// `width`-wide q/k/v, head columns `off..off + dh`. Writes the context into
/// `ctx` and returns the `len x len` probabilities; masked keys get exactly 0.
#[allow(clippy::too_many_arguments)]
fn attend(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    ctx: &mut [f64],
    start: usize,
    len: usize,
    width: usize,
    off: usize,
    dh: usize,
    scale: f64,
    mask: &[bool],
) -> Array2<f64> {
    let at = |r: usize| (start + r) * width + off;
    let mut probs = Array2::zeros((len, len));
    let pd = probs.as_slice_mut().expect("standard layout");
    for i in 0..len {
        let qi = &q[at(i)..at(i) + dh];
        let row = &mut pd[i * len..(i + 1) * len];
        let mut max = f64::NEG_INFINITY;
        for j in 0..len {
            if mask[j] {
                let kj = &k[at(j)..at(j) + dh];
                let s = scale * qi.iter().zip(kj).map(|(x, y)| x * y).sum::<f64>();
                row[j] = s;
                max = max.max(s);
            }
        }
        let mut sum = 0.0;
        for j in 0..len {
            row[j] = if mask[j] { (row[j] - max).exp() } else { 0.0 };
            sum += row[j];
        }
        let out = &mut ctx[at(i)..at(i) + dh];
        for j in 0..len {
            row[j] /= sum;
            let pij = row[j];
            if pij != 0.0 {
                for (o, &vv) in out.iter_mut().zip(&v[at(j)..at(j) + dh]) {
                    *o += pij * vv;
                }
            }
        }
    }
    probs
}

struct AttnBlock {
    start: usize,
    len: usize,
    width: usize,
    off: usize,
    dh: usize,
}

/// Backward of [`attend`]: accumulates dq, dk, dv for one head block.
#[allow(clippy::too_many_arguments)]
fn attend_back(
    blk: &AttnBlock,
    probs: &Array2<f64>,
    q: &[f64],
    k: &[f64],
    v: &[f64],
    dctx: &[f64],
    dq: &mut [f64],
    dk: &mut [f64],
    dv: &mut [f64],
    scale: f64,
) {
    let (len, dh) = (blk.len, blk.dh);
    let at = |r: usize| (blk.start + r) * blk.width + blk.off;
    let pd = probs.as_slice().expect("standard layout");
    let mut dp = vec![0.0; len];
    for i in 0..len {
        let pr = &pd[i * len..(i + 1) * len];
        let dci = &dctx[at(i)..at(i) + dh];
        let mut inner = 0.0;
        for j in 0..len {
            if pr[j] != 0.0 {
                dp[j] = dci.iter().zip(&v[at(j)..at(j) + dh]).map(|(x, y)| x * y).sum::<f64>();
                inner += pr[j] * dp[j];
                for (o, &g) in dv[at(j)..at(j) + dh].iter_mut().zip(dci) {
                    *o += pr[j] * g;
                }
            }
        }
        for j in 0..len {
            if pr[j] == 0.0 {
                continue;
            }
            let ds = pr[j] * (dp[j] - inner) * scale;
            for t in 0..dh {
                dq[at(i) + t] += ds * k[at(j) + t];
                dk[at(j) + t] += ds * q[at(i) + t];
            }
        }
    }
}

/// Gradient buffer viewed through the parameter layout.
pub(crate) struct Grads<'a>(pub &'a mut [f64]);

impl Grads<'_> {
    fn mat(&mut self, s: Slot) -> ArrayViewMut2<'_, f64> {
        ArrayViewMut2::from_shape((s.rows, s.cols), &mut self.0[s.range()]).expect("slot shape")
    }

    fn row(&mut self, s: Slot) -> ArrayViewMut1<'_, f64> {
        ArrayViewMut1::from(&mut self.0[s.range()])
    }

    /// Backward through layer norm; accumulates gain/bias gradients, returns dx.
    fn layer_norm_back(&mut self, dy: &Array2<f64>, cache: &LnCache, g: ArrayView1<f64>, gs: Slot, bs: Slot) -> Array2<f64> {
        {
            let mut dg = self.row(gs);
            dg += &(dy * &cache.xhat).sum_axis(Axis(0));
        }
        {
            let mut db = self.row(bs);
            db += &dy.sum_axis(Axis(0));
        }
        let dxhat = dy * &g;
        let d = dy.ncols() as f64;
        let mut dx = Array2::zeros(dy.raw_dim());
        for i in 0..dy.nrows() {
            let dh = dxhat.row(i);
            let xh = cache.xhat.row(i);
            let sum = dh.sum();
            let dot = dh.dot(&xh);
            let inv = cache.inv_std[i];
            Zip::from(dx.row_mut(i))
                .and(&dh)
                .and(&xh)
                .for_each(|o, &a, &h| *o = inv / d * (d * a - sum - h * dot));
        }
        dx
    }

    /// dW += xᵀ dy, db += Σ dy; returns dy Wᵀ.
    fn linear_back(&mut self, x: &ArrayView2<f64>, dy: &Array2<f64>, w: ArrayView2<f64>, ws: Slot, bs: Slot) -> Array2<f64> {
        general_mat_mul(1.0, &x.t(), dy, 1.0, &mut self.mat(ws));
        let mut db = self.row(bs);
        db += &dy.sum_axis(Axis(0));
        dy.dot(&w.t())
    }
}

impl EncoderModel {
    pub(crate) fn pack(&self, inputs: &[SeqInput]) -> Result<Packed> {
        let mut packed = Packed {
            ids: Vec::new(),
            pos: Vec::new(),
            key_mask: Vec::new(),
            spans: Vec::with_capacity(inputs.len()),
        };
        for seq in inputs {
            if seq.ids.len() != seq.mask.len() {
                return Err(ModelError::Shape(format!(
                    "{} ids but {} mask entries",
                    seq.ids.len(),
                    seq.mask.len()
                )));
            }
            if seq.ids.is_empty() {
                return Err(ModelError::Shape("empty sequence".into()));
            }
            if !seq.mask[0] {
                return Err(ModelError::Shape("position 0 must be attended".into()));
            }
            if seq.ids.len() > self.config.max_len {
                return Err(ModelError::SequenceTooLong {
                    len: seq.ids.len(),
                    max: self.config.max_len,
                });
            }
            if let Some(&id) = seq.ids.iter().find(|&&id| id as usize >= self.config.vocab_size) {
                return Err(ModelError::TokenOutOfRange {
                    id,
                    vocab: self.config.vocab_size,
                });
            }
            let start = packed.ids.len();
            packed.ids.extend_from_slice(&seq.ids);
            packed.pos.extend(0..seq.ids.len());
            packed.key_mask.extend_from_slice(&seq.mask);
            packed.spans.push((start, packed.ids.len()));
        }
        Ok(packed)
    }

    /// Forward pass. With `dropout` set, dropout masks are drawn from it.
    pub(crate) fn encode(&self, p: &Packed, mut dropout: Option<&mut SeededRng>) -> Cache {
        let lay = self.layout();
        let cfg = self.config();
        let n = p.ids.len();
        let d = cfg.hidden;
        let rate = cfg.dropout;
        let mut drop = |rows: usize, cols: usize| -> Option<Array2<f64>> {
            match dropout.as_deref_mut() {
                Some(rng) if rate > 0.0 => Some(dropout_mask(rows, cols, rate, rng)),
                _ => None,
            }
        };

        let tok = self.mat(lay.tok_emb);
        let posm = self.mat(lay.pos_emb);
        let mut emb = Array2::zeros((n, d));
        for (i, mut row) in emb.outer_iter_mut().enumerate() {
            row.assign(&tok.row(p.ids[i] as usize));
            row += &posm.row(p.pos[i]);
        }
        let (mut h, emb_ln) = layer_norm(&emb, self.row(lay.emb_ln_g), self.row(lay.emb_ln_b));
        let drop_emb = drop(n, d);
        if let Some(m) = &drop_emb {
            h *= m;
        }

        let heads = cfg.heads;
        let dh = cfg.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let mut layers = Vec::with_capacity(lay.layers.len());
        for ls in &lay.layers {
            let x = h;
            let xv = x.view();
            let q = linear(&xv, self.mat(ls.wq), self.row(ls.bq));
            let k = linear(&xv, self.mat(ls.wk), self.row(ls.bk));
            let v = linear(&xv, self.mat(ls.wv), self.row(ls.bv));
            let mut ctx = Array2::zeros((n, d));
            let mut probs = Vec::with_capacity(p.spans.len() * heads);
            {
                let (qd, kd, vd) = (raw(&q), raw(&k), raw(&v));
                let cd = ctx.as_slice_mut().expect("standard layout");
                for &(a, b) in &p.spans {
                    let mask = &p.key_mask[a..b];
                    for hd in 0..heads {
                        let probs_h = attend(qd, kd, vd, cd, a, b - a, d, hd * dh, dh, scale, mask);
                        probs.push(probs_h);
                    }
                }
            }
            let mut attn = linear(&ctx.view(), self.mat(ls.wo), self.row(ls.bo));
            let drop_attn = drop(n, d);
            if let Some(m) = &drop_attn {
                attn *= m;
            }
            let r1 = &x + &attn;
            let (h1, ln1) = layer_norm(&r1, self.row(ls.ln1_g), self.row(ls.ln1_b));
            let f1 = linear(&h1.view(), self.mat(ls.w1), self.row(ls.b1));
            let act = f1.mapv(gelu);
            let mut f2 = linear(&act.view(), self.mat(ls.w2), self.row(ls.b2));
            let drop_ffn = drop(n, d);
            if let Some(m) = &drop_ffn {
                f2 *= m;
            }
            let r2 = &h1 + &f2;
            let (out, ln2) = layer_norm(&r2, self.row(ls.ln2_g), self.row(ls.ln2_b));
            layers.push(LayerCache {
                input: x,
                q,
                k,
                v,
                probs,
                ctx,
                drop_attn,
                ln1,
                h1,
                f1,
                act,
                drop_ffn,
                ln2,
            });
            h = out;
        }
        Cache {
            emb_ln,
            drop_emb,
            layers,
            output: h,
        }
    }

    pub(crate) fn cls_logits(&self, p: &Packed, cache: &Cache) -> Array1<f64> {
        let w = self.mat(self.layout().cls_w);
        let b = self.params()[self.layout().cls_b.off];
        p.spans
            .iter()
            .map(|&(a, _)| cache.output.row(a).dot(&w.column(0)) + b)
            .collect()
    }

    /// Loss terms for `obj` without gradients.
    pub(crate) fn loss(&self, inputs: &[SeqInput], obj: &Objective) -> Result<LossParts> {
        let p = self.pack(inputs)?;
        let cache = self.encode(&p, None);
        Ok(self.head_losses(&p, &cache, obj, None))
    }

    /// Head losses; with `grads`, also accumulates head gradients and returns
    /// the gradient flowing into the encoder output.
    fn head_losses(&self, p: &Packed, cache: &Cache, obj: &Objective, grads: Option<(&mut Grads, &mut Array2<f64>)>) -> LossParts {
        let lay = self.layout();
        let mut parts = LossParts::default();
        let mut grads = grads;

        if !obj.mlm_targets.is_empty() {
            let m = obj.mlm_targets.len();
            let d = self.config().hidden;
            let mut hsel = Array2::zeros((m, d));
            for (r, &(seq, pos, _)) in obj.mlm_targets.iter().enumerate() {
                hsel.row_mut(r).assign(&cache.output.row(p.spans[seq].0 + pos));
            }
            let logits = linear(&hsel.view(), self.mat(lay.mlm_w), self.row(lay.mlm_b));
            let mut dlogits = Array2::zeros(logits.raw_dim());
            for (r, &(_, _, target)) in obj.mlm_targets.iter().enumerate() {
                let row = logits.row(r);
                let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                let sum: f64 = row.iter().map(|&z| (z - max).exp()).sum();
                let lse = max + sum.ln();
                parts.mlm_sum += lse - row[target as usize];
                if grads.is_some() {
                    Zip::from(dlogits.row_mut(r))
                        .and(&row)
                        .for_each(|g, &z| *g = (z - lse).exp() / obj.mlm_norm);
                    dlogits[[r, target as usize]] -= 1.0 / obj.mlm_norm;
                }
            }
            if let Some((g, dout)) = grads.as_mut() {
                let dh = g.linear_back(&hsel.view(), &dlogits, self.mat(lay.mlm_w), lay.mlm_w, lay.mlm_b);
                for (r, &(seq, pos, _)) in obj.mlm_targets.iter().enumerate() {
                    let mut row = dout.row_mut(p.spans[seq].0 + pos);
                    row += &dh.row(r);
                }
            }
        }

        if !obj.labels.is_empty() {
            let logits = self.cls_logits(p, cache);
            let w = self.mat(lay.cls_w).column(0).to_owned();
            for &(seq, y) in obj.labels {
                let z = logits[seq];
                // log(1 + e^z) - y z, computed stably
                parts.cls_sum += z.max(0.0) - y * z + (-z.abs()).exp().ln_1p();
                if let Some((g, dout)) = grads.as_mut() {
                    let dz = (sigmoid(z) - y) / obj.cls_norm;
                    let row_idx = p.spans[seq].0;
                    {
                        let mut gw = g.mat(lay.cls_w);
                        let mut col = gw.column_mut(0);
                        col.scaled_add(dz, &cache.output.row(row_idx));
                    }
                    g.0[lay.cls_b.off] += dz;
                    let mut row = dout.row_mut(row_idx);
                    row.scaled_add(dz, &w);
                }
            }
        }
        parts
    }

    /// Loss and gradient (accumulated into `grad`) for one packed batch.
    pub(crate) fn loss_and_grad(
        &self,
        inputs: &[SeqInput],
        obj: &Objective,
        dropout: Option<&mut SeededRng>,
        grad: &mut [f64],
    ) -> Result<LossParts> {
        let p = self.pack(inputs)?;
        let cache = self.encode(&p, dropout);
        let mut g = Grads(grad);
        let mut dh = Array2::zeros(cache.output.raw_dim());
        let parts = self.head_losses(&p, &cache, obj, Some((&mut g, &mut dh)));
        if !(parts.mlm_sum.is_finite() && parts.cls_sum.is_finite()) {
            return Err(ModelError::NonFinite("loss".into()));
        }
        self.backward(&p, &cache, dh, &mut g);
        Ok(parts)
    }

    fn backward(&self, p: &Packed, cache: &Cache, mut dh: Array2<f64>, g: &mut Grads) {
        let lay = self.layout();
        let cfg = self.config();
        let heads = cfg.heads;
        let dh_dim = cfg.head_dim();
        let scale = 1.0 / (dh_dim as f64).sqrt();

        for (ls, lc) in lay.layers.iter().zip(&cache.layers).rev() {
            let dr2 = g.layer_norm_back(&dh, &lc.ln2, self.row(ls.ln2_g), ls.ln2_g, ls.ln2_b);
            let mut df2 = dr2.clone();
            if let Some(m) = &lc.drop_ffn {
                df2 *= m;
            }
            let dact = g.linear_back(&lc.act.view(), &df2, self.mat(ls.w2), ls.w2, ls.b2);
            let mut df1 = dact;
            Zip::from(&mut df1).and(&lc.f1).for_each(|d, &x| *d *= gelu_grad(x));
            let mut dh1 = dr2;
            dh1 += &g.linear_back(&lc.h1.view(), &df1, self.mat(ls.w1), ls.w1, ls.b1);
            let dr1 = g.layer_norm_back(&dh1, &lc.ln1, self.row(ls.ln1_g), ls.ln1_g, ls.ln1_b);
            let mut da = dr1.clone();
            if let Some(m) = &lc.drop_attn {
                da *= m;
            }
            let dctx = g.linear_back(&lc.ctx.view(), &da, self.mat(ls.wo), ls.wo, ls.bo);

            let mut dq = Array2::zeros(lc.q.raw_dim());
            let mut dk = Array2::zeros(lc.k.raw_dim());
            let mut dv = Array2::zeros(lc.v.raw_dim());
            {
                let (qd, kd, vd, dcd) = (raw(&lc.q), raw(&lc.k), raw(&lc.v), raw(&dctx));
                let dqd = dq.as_slice_mut().expect("standard layout");
                let dkd = dk.as_slice_mut().expect("standard layout");
                let dvd = dv.as_slice_mut().expect("standard layout");
                for (si, &(a, b)) in p.spans.iter().enumerate() {
                    for hd in 0..heads {
                        let probs = &lc.probs[si * heads + hd];
                        let blk = AttnBlock { start: a, len: b - a, width: cfg.hidden, off: hd * dh_dim, dh: dh_dim };
                        attend_back(&blk, probs, qd, kd, vd, dcd, dqd, dkd, dvd, scale);
                    }
                }
            }
            let xv = lc.input.view();
            let mut dx = dr1;
            dx += &g.linear_back(&xv, &dq, self.mat(ls.wq), ls.wq, ls.bq);
            dx += &g.linear_back(&xv, &dk, self.mat(ls.wk), ls.wk, ls.bk);
            dx += &g.linear_back(&xv, &dv, self.mat(ls.wv), ls.wv, ls.bv);
            dh = dx;
        }

        if let Some(m) = &cache.drop_emb {
            dh *= m;
        }
        let demb = g.layer_norm_back(&dh, &cache.emb_ln, self.row(lay.emb_ln_g), lay.emb_ln_g, lay.emb_ln_b);
        let d = cfg.hidden;
        for (i, row) in demb.outer_iter().enumerate() {
            let t = lay.tok_emb.off + p.ids[i] as usize * d;
            let ps = lay.pos_emb.off + p.pos[i] * d;
            for (j, &v) in row.iter().enumerate() {
                g.0[t + j] += v;
                g.0[ps + j] += v;
            }
        }
    }
}
