// SPDX-License-Identifier: MIT OR Apache-2.0

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt::Debug;
use core::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive};
use rand_distr::{Distribution, Normal};

use super::{LayerOffsets, ModelConfig, ParamLayout, PruneMask};
use crate::error::{bail, Result};
use crate::rng;
use crate::trace::AttentionTensor;

/// Scalar type the model computes in. `f32` for training, `f64` for gradient checks.
pub trait Real:
    Float
    + FromPrimitive
    + Default
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Debug
    + Send
    + Sync
    + 'static
{
}
impl<T> Real for T where
    T: Float
        + FromPrimitive
        + Default
        + AddAssign
        + SubAssign
        + MulAssign
        + DivAssign
        + Debug
        + Send
        + Sync
        + 'static
{
}

#[inline]
fn c<F: Real>(x: f64) -> F {
    F::from_f64(x).unwrap()
}

const LN_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;

/// Output of one recorded forward pass.
#[derive(Debug, Clone)]
pub struct ForwardRecord<F = f32> {
    /// Next-token logits at the last position.
    pub logits: Vec<F>,
    pub attention: AttentionTensor,
    /// Residual stream after the embedding and after each block, `T x d` row-major.
    pub hidden: Option<Vec<Vec<f32>>>,
}

/// A decoder-only transformer with a flat parameter buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<F = f32> {
    cfg: ModelConfig,
    layout: ParamLayout,
    params: Vec<F>,
}

#[derive(Debug, Clone, Default)]
struct LayerCache<F> {
    x_in: Vec<F>,
    ln1: Vec<F>,
    ln1_mean: Vec<F>,
    ln1_rstd: Vec<F>,
    qkv: Vec<F>,
    att: Vec<F>,
    att_cat: Vec<F>,
    x_mid: Vec<F>,
    ln2: Vec<F>,
    ln2_mean: Vec<F>,
    ln2_rstd: Vec<F>,
    fc: Vec<F>,
    fc_act: Vec<F>,
    fc_tanh: Vec<F>,
}

/// Reusable activation and gradient scratch space for one sequence at a time.
#[derive(Debug, Clone, Default)]
pub struct Workspace<F> {
    seq_len: usize,
    layers: Vec<LayerCache<F>>,
    x: Vec<F>,
    tmp: Vec<F>,
    hf: Vec<F>,
    hf_mean: F,
    hf_rstd: F,
    logits: Vec<F>,
    // backward scratch
    dx: Vec<F>,
    dln: Vec<F>,
    dfc: Vec<F>,
    datt: Vec<F>,
    dqkv: Vec<F>,
    dp: Vec<F>,
    dhf: Vec<F>,
    dlogits: Vec<F>,
}

impl<F: Real> Workspace<F> {
    pub fn new() -> Self {
        Self {
            hf_mean: F::zero(),
            hf_rstd: F::zero(),
            ..Default::default()
        }
    }

    fn prepare(&mut self, cfg: &ModelConfig, t: usize) {
        let (d, f, h, v) = (cfg.d_model, cfg.d_ff(), cfg.n_heads, cfg.vocab_size);
        self.seq_len = t;
        let z = F::zero();
        let fit = |buf: &mut Vec<F>, n: usize| {
            buf.clear();
            buf.resize(n, z);
        };
        self.layers.resize_with(cfg.n_layers, Default::default);
        for lc in &mut self.layers {
            fit(&mut lc.x_in, t * d);
            fit(&mut lc.ln1, t * d);
            fit(&mut lc.ln1_mean, t);
            fit(&mut lc.ln1_rstd, t);
            fit(&mut lc.qkv, t * 3 * d);
            fit(&mut lc.att, h * t * t);
            fit(&mut lc.att_cat, t * d);
            fit(&mut lc.x_mid, t * d);
            fit(&mut lc.ln2, t * d);
            fit(&mut lc.ln2_mean, t);
            fit(&mut lc.ln2_rstd, t);
            fit(&mut lc.fc, t * f);
            fit(&mut lc.fc_act, t * f);
            fit(&mut lc.fc_tanh, t * f);
        }
        fit(&mut self.x, t * d);
        fit(&mut self.tmp, t * d);
        fit(&mut self.hf, d);
        fit(&mut self.logits, v);
        fit(&mut self.dx, t * d);
        fit(&mut self.dln, t * d);
        fit(&mut self.dfc, t * f);
        fit(&mut self.datt, t * d);
        fit(&mut self.dqkv, t * 3 * d);
        fit(&mut self.dp, t);
        fit(&mut self.dhf, d);
    }

    /// Logits of the most recent forward pass.
    pub fn logits(&self) -> &[F] {
        &self.logits
    }
}

impl<F: Real> Model<F> {
    /// Fresh parameters: N(0, 0.02) for embeddings and weight matrices, zero
    /// biases, unit layer-norm gains. A pure function of `cfg.seed`.
    pub fn init_random(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let layout = ParamLayout::new(&cfg);
        let mut params = vec![F::zero(); layout.total];
        let mut rng = rng::stream(cfg.seed, &[0x1417]);
        let normal = Normal::new(0.0f64, INIT_STD).unwrap();
        for t in &layout.tensors {
            for p in &mut params[t.range()] {
                *p = if t.random_init {
                    c(normal.sample(&mut rng) as f32 as f64)
                } else {
                    c(t.fill as f64)
                };
            }
        }
        Ok(Self {
            cfg,
            layout,
            params,
        })
    }

    pub fn from_params(cfg: ModelConfig, params: Vec<F>) -> Result<Self> {
        cfg.validate()?;
        let layout = ParamLayout::new(&cfg);
        if params.len() != layout.total {
            bail!(
                Data,
                "expected {} parameters, got {}",
                layout.total,
                params.len()
            );
        }
        Ok(Self {
            cfg,
            layout,
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }
    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }
    pub fn params(&self) -> &[F] {
        &self.params
    }
    pub fn params_mut(&mut self) -> &mut [F] {
        &mut self.params
    }

    pub fn cast<G: Real>(&self) -> Model<G> {
        Model {
            cfg: self.cfg.clone(),
            layout: self.layout.clone(),
            params: self
                .params
                .iter()
                .map(|p| G::from_f64(p.to_f64().unwrap()).unwrap())
                .collect(),
        }
    }

    /// Shrink the positional table to `max_seq_len` rows.
    ///
    /// Inputs no longer than the new bound produce identical outputs.
    pub fn with_max_seq_len(self, max_seq_len: usize) -> Result<Self> {
        if max_seq_len == 0 || max_seq_len > self.cfg.max_seq_len {
            bail!(
                Config,
                "max_seq_len override {max_seq_len} outside 1..={}",
                self.cfg.max_seq_len
            );
        }
        let mut cfg = self.cfg.clone();
        cfg.max_seq_len = max_seq_len;
        let layout = ParamLayout::new(&cfg);
        let old: BTreeMap<&str, &[F]> = self
            .layout
            .tensors
            .iter()
            .map(|t| (t.name.as_str(), &self.params[t.range()]))
            .collect();
        let mut params = vec![F::zero(); layout.total];
        for t in &layout.tensors {
            params[t.range()].copy_from_slice(&old[t.name.as_str()][..t.len()]);
        }
        Ok(Self {
            cfg,
            layout,
            params,
        })
    }

    fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        if tokens.is_empty() {
            bail!(Input, "empty token sequence");
        }
        if tokens.len() > self.cfg.max_seq_len {
            bail!(
                Input,
                "sequence of {} tokens exceeds max_seq_len {}",
                tokens.len(),
                self.cfg.max_seq_len
            );
        }
        if let Some(&t) = tokens.iter().find(|&&t| t as usize >= self.cfg.vocab_size) {
            bail!(
                Input,
                "token {t} outside vocabulary of {}",
                self.cfg.vocab_size
            );
        }
        Ok(())
    }

    /// Forward pass recording attention for every layer and head.
    pub fn forward(&self, tokens: &[u32], mask: &PruneMask) -> Result<ForwardRecord<F>> {
        let mut ws = Workspace::new();
        self.run_inner(tokens, mask, &mut ws, true)?;
        Ok(self.record(&ws, false))
    }

    /// As [`Model::forward`], also keeping the residual stream of every layer.
    pub fn forward_with_hidden(
        &self,
        tokens: &[u32],
        mask: &PruneMask,
    ) -> Result<ForwardRecord<F>> {
        let mut ws = Workspace::new();
        self.run_inner(tokens, mask, &mut ws, true)?;
        Ok(self.record(&ws, true))
    }

    /// Forward pass into a reusable workspace; logits are left in `ws`.
    pub fn run(&self, tokens: &[u32], mask: &PruneMask, ws: &mut Workspace<F>) -> Result<()> {
        self.run_inner(tokens, mask, ws, false)
    }

    fn run_inner(
        &self,
        tokens: &[u32],
        mask: &PruneMask,
        ws: &mut Workspace<F>,
        all_rows: bool,
    ) -> Result<()> {
        self.check_tokens(tokens)?;
        mask.validate(&self.cfg)?;
        self.forward_ws(tokens, mask, ws, all_rows);
        Ok(())
    }

    /// Index of the largest logit at the last position (lowest index on ties).
    pub fn predict(&self, tokens: &[u32], mask: &PruneMask, ws: &mut Workspace<F>) -> Result<u32> {
        self.run(tokens, mask, ws)?;
        Ok(argmax(&ws.logits) as u32)
    }

    fn record(&self, ws: &Workspace<F>, hidden: bool) -> ForwardRecord<F> {
        let (l, h, t, d) = (
            self.cfg.n_layers,
            self.cfg.n_heads,
            ws.seq_len,
            self.cfg.d_model,
        );
        let mut values = Vec::with_capacity(l * h * t * t);
        for lc in &ws.layers {
            values.extend(lc.att.iter().map(|v| v.to_f32().unwrap()));
        }
        let attention = AttentionTensor::from_raw(l, h, t, values).expect("attention dims");
        let hidden = hidden.then(|| {
            let to32 = |v: &[F]| v.iter().map(|x| x.to_f32().unwrap()).collect::<Vec<f32>>();
            let mut out: Vec<Vec<f32>> = ws.layers.iter().map(|lc| to32(&lc.x_in)).collect();
            out.push(to32(&ws.x[..t * d]));
            out
        });
        ForwardRecord {
            logits: ws.logits.clone(),
            attention,
            hidden,
        }
    }

    fn forward_ws(&self, tokens: &[u32], mask: &PruneMask, ws: &mut Workspace<F>, all_rows: bool) {
        let cfg = &self.cfg;
        let (d, f, nh, dh) = (cfg.d_model, cfg.d_ff(), cfg.n_heads, cfg.head_dim());
        let t = tokens.len();
        let p = &self.params;
        let lay = &self.layout;
        ws.prepare(cfg, t);
        let scale = F::one() / c::<F>(dh as f64).sqrt();

        for (pos, &tok) in tokens.iter().enumerate() {
            let e = &p[lay.wte + tok as usize * d..][..d];
            let q = &p[lay.wpe + pos * d..][..d];
            for ((x, &a), &b) in ws.x[pos * d..(pos + 1) * d].iter_mut().zip(e).zip(q) {
                *x = a + b;
            }
        }

        for (l, off) in lay.layers.iter().enumerate() {
            let lc = &mut ws.layers[l];
            lc.x_in.copy_from_slice(&ws.x);
            layer_norm(
                &lc.x_in,
                &p[off.ln1_g..][..d],
                &p[off.ln1_b..][..d],
                &mut lc.ln1,
                &mut lc.ln1_mean,
                &mut lc.ln1_rstd,
                d,
            );
            matmul(
                &mut lc.qkv,
                &lc.ln1,
                &p[off.w_qkv..][..d * 3 * d],
                Some(&p[off.b_qkv..][..3 * d]),
                d,
                3 * d,
            );

            for h in 0..nh {
                for i in 0..t {
                    let qi = &lc.qkv[i * 3 * d + h * dh..][..dh];
                    let row = &mut lc.att[(h * t + i) * t..][..t];
                    let mut max = F::neg_infinity();
                    for j in 0..=i {
                        let kj = &lc.qkv[j * 3 * d + d + h * dh..][..dh];
                        let s = dot(qi, kj) * scale;
                        row[j] = s;
                        if s > max {
                            max = s;
                        }
                    }
                    let mut sum = F::zero();
                    for v in &mut row[..=i] {
                        *v = (*v - max).exp();
                        sum += *v;
                    }
                    let inv = F::one() / sum;
                    for v in &mut row[..=i] {
                        *v *= inv;
                    }
                    for v in &mut row[i + 1..] {
                        *v = F::zero();
                    }
                    let out = &mut lc.att_cat[i * d + h * dh..][..dh];
                    out.fill(F::zero());
                    if mask.head_enabled(l, h) {
                        for j in 0..=i {
                            let pij = row[j];
                            let vj = &lc.qkv[j * 3 * d + 2 * d + h * dh..][..dh];
                            axpy(out, pij, vj);
                        }
                    }
                }
            }

            lc.x_mid.copy_from_slice(&lc.x_in);
            // the top block only feeds the last position's logits
            let r0 = if all_rows || l + 1 < lay.layers.len() {
                0
            } else {
                t - 1
            };
            let rows = r0 * d..t * d;
            if mask.layer_enabled(l) {
                matmul(
                    &mut ws.tmp[rows.clone()],
                    &lc.att_cat[rows.clone()],
                    &p[off.w_o..][..d * d],
                    Some(&p[off.b_o..][..d]),
                    d,
                    d,
                );
                for (x, &y) in lc.x_mid[rows.clone()].iter_mut().zip(&ws.tmp[rows.clone()]) {
                    *x += y;
                }
            }

            layer_norm(
                &lc.x_mid[rows.clone()],
                &p[off.ln2_g..][..d],
                &p[off.ln2_b..][..d],
                &mut lc.ln2[rows.clone()],
                &mut lc.ln2_mean[r0..],
                &mut lc.ln2_rstd[r0..],
                d,
            );
            let frows = r0 * f..t * f;
            matmul(
                &mut lc.fc[frows.clone()],
                &lc.ln2[rows.clone()],
                &p[off.w_fc..][..d * f],
                Some(&p[off.b_fc..][..f]),
                d,
                f,
            );
            for ((a, th), &z) in lc.fc_act[frows.clone()]
                .iter_mut()
                .zip(lc.fc_tanh[frows.clone()].iter_mut())
                .zip(&lc.fc[frows.clone()])
            {
                (*a, *th) = gelu(z);
            }
            matmul(
                &mut ws.tmp[rows.clone()],
                &lc.fc_act[frows],
                &p[off.w_proj..][..f * d],
                Some(&p[off.b_proj..][..d]),
                f,
                d,
            );
            for ((x, &m), &y) in ws.x[rows.clone()]
                .iter_mut()
                .zip(&lc.x_mid[rows.clone()])
                .zip(&ws.tmp[rows])
            {
                *x = m + y;
            }
        }

        let last = &ws.x[(t - 1) * d..t * d];
        let mut mean = [F::zero()];
        let mut rstd = [F::zero()];
        layer_norm(
            last,
            &p[lay.lnf_g..][..d],
            &p[lay.lnf_b..][..d],
            &mut ws.hf,
            &mut mean,
            &mut rstd,
            d,
        );
        ws.hf_mean = mean[0];
        ws.hf_rstd = rstd[0];
        matmul(
            &mut ws.logits,
            &ws.hf,
            &p[lay.w_out..][..d * cfg.vocab_size],
            None,
            d,
            cfg.vocab_size,
        );
    }

    /// Cross-entropy of `target` at the last position; gradients are added to `grad`.
    pub fn loss_and_grad(
        &self,
        tokens: &[u32],
        target: u32,
        mask: &PruneMask,
        ws: &mut Workspace<F>,
        grad: &mut [F],
    ) -> Result<F> {
        if target as usize >= self.cfg.vocab_size {
            bail!(Input, "target {target} outside vocabulary");
        }
        if grad.len() != self.layout.total {
            bail!(
                Input,
                "gradient buffer has {} slots, expected {}",
                grad.len(),
                self.layout.total
            );
        }
        self.run(tokens, mask, ws)?;
        Ok(self.backward(tokens, target, mask, ws, grad))
    }

    /// Cross-entropy of `target` after a forward pass, without gradients.
    pub fn loss(&self, tokens: &[u32], target: u32, mask: &PruneMask) -> Result<F> {
        let mut ws = Workspace::new();
        self.run(tokens, mask, &mut ws)?;
        let (lse, _) = log_softmax_parts(&ws.logits);
        Ok(lse - ws.logits[target as usize])
    }

    fn backward(
        &self,
        tokens: &[u32],
        target: u32,
        mask: &PruneMask,
        ws: &mut Workspace<F>,
        g: &mut [F],
    ) -> F {
        let cfg = &self.cfg;
        let (d, f, nh, dh, v) = (
            cfg.d_model,
            cfg.d_ff(),
            cfg.n_heads,
            cfg.head_dim(),
            cfg.vocab_size,
        );
        let t = tokens.len();
        let p = &self.params;
        let lay = &self.layout;
        let scale = F::one() / c::<F>(dh as f64).sqrt();

        let (lse, _) = log_softmax_parts(&ws.logits);
        let loss = lse - ws.logits[target as usize];
        ws.dlogits.clear();
        ws.dlogits.extend_from_slice(&ws.logits);
        for (k, z) in ws.dlogits.iter_mut().enumerate() {
            *z = (*z - lse).exp();
            if k == target as usize {
                *z -= F::one();
            }
        }

        // unembedding and final norm (last row only)
        ws.dhf.fill(F::zero());
        matmul_backward(
            Some(&mut ws.dhf),
            &mut g[lay.w_out..][..d * v],
            None,
            &ws.dlogits,
            &ws.hf,
            &p[lay.w_out..][..d * v],
            d,
            v,
        );
        ws.dx.fill(F::zero());
        {
            let last = t - 1;
            let xrow = &ws.x[last * d..(last + 1) * d];
            let (gg, gb) = split_two(g, lay.lnf_g, lay.lnf_b, d);
            layer_norm_backward_row(
                &mut ws.dx[last * d..(last + 1) * d],
                gg,
                gb,
                &ws.dhf,
                xrow,
                &p[lay.lnf_g..][..d],
                ws.hf_mean,
                ws.hf_rstd,
            );
        }

        for (l, off) in lay.layers.iter().enumerate().rev() {
            let lc = &ws.layers[l];
            // MLP: x_out = x_mid + proj(gelu(fc(ln2(x_mid))))
            ws.dfc.fill(F::zero());
            {
                let (gw, gb) = split_two(g, off.w_proj, off.b_proj, f * d);
                matmul_backward(
                    Some(&mut ws.dfc),
                    gw,
                    Some(&mut gb[..d]),
                    &ws.dx,
                    &lc.fc_act,
                    &p[off.w_proj..][..f * d],
                    f,
                    d,
                );
            }
            for ((dz, &z), &th) in ws.dfc.iter_mut().zip(&lc.fc).zip(&lc.fc_tanh) {
                *dz *= gelu_grad(z, th);
            }
            ws.dln.fill(F::zero());
            {
                let (gw, gb) = split_two(g, off.w_fc, off.b_fc, d * f);
                matmul_backward(
                    Some(&mut ws.dln),
                    gw,
                    Some(&mut gb[..f]),
                    &ws.dfc,
                    &lc.ln2,
                    &p[off.w_fc..][..d * f],
                    d,
                    f,
                );
            }
            {
                let (gg, gb) = split_two(g, off.ln2_g, off.ln2_b, d);
                layer_norm_backward(
                    &mut ws.dx,
                    gg,
                    gb,
                    &ws.dln,
                    &lc.x_mid,
                    &p[off.ln2_g..][..d],
                    &lc.ln2_mean,
                    &lc.ln2_rstd,
                    d,
                );
            }

            if !mask.layer_enabled(l) {
                continue;
            }
            // attention: x_mid = x_in + o(attn(ln1(x_in)))
            ws.datt.fill(F::zero());
            {
                let (gw, gb) = split_two(g, off.w_o, off.b_o, d * d);
                matmul_backward(
                    Some(&mut ws.datt),
                    gw,
                    Some(&mut gb[..d]),
                    &ws.dx,
                    &lc.att_cat,
                    &p[off.w_o..][..d * d],
                    d,
                    d,
                );
            }
            ws.dqkv.fill(F::zero());
            let mut any = false;
            for h in 0..nh {
                if !mask.head_enabled(l, h) {
                    continue;
                }
                any = true;
                for i in 0..t {
                    let dout = &ws.datt[i * d + h * dh..][..dh];
                    if dout.iter().all(|x| x.is_zero()) {
                        continue;
                    }
                    let row = &lc.att[(h * t + i) * t..][..t];
                    let mut acc = F::zero();
                    for j in 0..=i {
                        let vj = &lc.qkv[j * 3 * d + 2 * d + h * dh..][..dh];
                        let dpj = dot(dout, vj);
                        ws.dp[j] = dpj;
                        acc += row[j] * dpj;
                        axpy(
                            &mut ws.dqkv[j * 3 * d + 2 * d + h * dh..][..dh],
                            row[j],
                            dout,
                        );
                    }
                    for j in 0..=i {
                        let ds = row[j] * (ws.dp[j] - acc) * scale;
                        if ds.is_zero() {
                            continue;
                        }
                        let (qi_off, kj_off) = (i * 3 * d + h * dh, j * 3 * d + d + h * dh);
                        for e in 0..dh {
                            let qe = lc.qkv[qi_off + e];
                            let ke = lc.qkv[kj_off + e];
                            ws.dqkv[qi_off + e] += ds * ke;
                            ws.dqkv[kj_off + e] += ds * qe;
                        }
                    }
                }
            }
            if any {
                ws.dln.fill(F::zero());
                {
                    let (gw, gb) = split_two(g, off.w_qkv, off.b_qkv, d * 3 * d);
                    matmul_backward(
                        Some(&mut ws.dln),
                        gw,
                        Some(&mut gb[..3 * d]),
                        &ws.dqkv,
                        &lc.ln1,
                        &p[off.w_qkv..][..d * 3 * d],
                        d,
                        3 * d,
                    );
                }
                let (gg, gb) = split_two(g, off.ln1_g, off.ln1_b, d);
                layer_norm_backward(
                    &mut ws.dx,
                    gg,
                    gb,
                    &ws.dln,
                    &lc.x_in,
                    &p[off.ln1_g..][..d],
                    &lc.ln1_mean,
                    &lc.ln1_rstd,
                    d,
                );
            }
        }

        for (pos, &tok) in tokens.iter().enumerate() {
            let dxr = &ws.dx[pos * d..(pos + 1) * d];
            axpy(&mut g[lay.wte + tok as usize * d..][..d], F::one(), dxr);
            axpy(&mut g[lay.wpe + pos * d..][..d], F::one(), dxr);
        }
        loss
    }

    /// Offsets of block `layer`.
    pub fn layer_offsets(&self, layer: usize) -> LayerOffsets {
        self.layout.layers[layer]
    }
}

/// Split `g` into the disjoint slices starting at `a` (length `len_a`) and at `b` (to end).
fn split_two<F>(g: &mut [F], a: usize, b: usize, len_a: usize) -> (&mut [F], &mut [F]) {
    debug_assert!(a + len_a <= b);
    let (lo, hi) = g.split_at_mut(b);
    (&mut lo[a..a + len_a], hi)
}

pub(crate) fn argmax<F: PartialOrd + Copy>(xs: &[F]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

fn log_softmax_parts<F: Real>(logits: &[F]) -> (F, F) {
    let max = logits.iter().copied().fold(F::neg_infinity(), F::max);
    let sum = logits
        .iter()
        .fold(F::zero(), |acc, &z| acc + (z - max).exp());
    (max + sum.ln(), max)
}

#[inline]
fn dot<F: Real>(a: &[F], b: &[F]) -> F {
    // eight independent partial sums so the loop vectorizes
    let mut acc = [F::zero(); 8];
    let (ac, ar) = a.split_at(a.len() / 8 * 8);
    let (bc, br) = b.split_at(ac.len());
    for (x, y) in ac.chunks_exact(8).zip(bc.chunks_exact(8)) {
        for k in 0..8 {
            acc[k] += x[k] * y[k];
        }
    }
    let mut s = ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
    for (&x, &y) in ar.iter().zip(br) {
        s += x * y;
    }
    s
}

/// Four dot products against the same left operand.
#[inline]
fn dot4<F: Real>(a: &[F], b: [&[F]; 4]) -> [F; 4] {
    let n = a.len();
    let mut acc = [[F::zero(); 8]; 4];
    let full = n / 8 * 8;
    for j0 in (0..full).step_by(8) {
        let x = &a[j0..j0 + 8];
        for (accq, bq) in acc.iter_mut().zip(&b) {
            let y = &bq[j0..j0 + 8];
            for k in 0..8 {
                accq[k] += x[k] * y[k];
            }
        }
    }
    let mut out = [F::zero(); 4];
    for q in 0..4 {
        let a8 = &acc[q];
        let mut s = ((a8[0] + a8[1]) + (a8[2] + a8[3])) + ((a8[4] + a8[5]) + (a8[6] + a8[7]));
        for j in full..n {
            s += a[j] * b[q][j];
        }
        out[q] = s;
    }
    out
}

#[inline]
fn axpy<F: Real>(y: &mut [F], a: F, x: &[F]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

const BLOCK: usize = 16;

/// `out[r] = x[r] · w (+ b)` for every row; `w` is `n_in x n_out` row-major.
fn matmul<F: Real>(out: &mut [F], x: &[F], w: &[F], b: Option<&[F]>, n_in: usize, n_out: usize) {
    for (orow, xrow) in out.chunks_exact_mut(n_out).zip(x.chunks_exact(n_in)) {
        let mut j0 = 0;
        while j0 + BLOCK <= n_out {
            let mut acc = [F::zero(); BLOCK];
            if let Some(b) = b {
                acc.copy_from_slice(&b[j0..j0 + BLOCK]);
            }
            for (i, &xi) in xrow.iter().enumerate() {
                let wb = &w[i * n_out + j0..i * n_out + j0 + BLOCK];
                for k in 0..BLOCK {
                    acc[k] += xi * wb[k];
                }
            }
            orow[j0..j0 + BLOCK].copy_from_slice(&acc);
            j0 += BLOCK;
        }
        for j in j0..n_out {
            let mut acc = b.map_or(F::zero(), |b| b[j]);
            for (i, &xi) in xrow.iter().enumerate() {
                acc += xi * w[i * n_out + j];
            }
            orow[j] = acc;
        }
    }
}

/// Accumulating backward of [`matmul`]. Rows of `dy` that are entirely zero are skipped.
#[allow(clippy::too_many_arguments)]
fn matmul_backward<F: Real>(
    dx: Option<&mut [F]>,
    dw: &mut [F],
    db: Option<&mut [F]>,
    dy: &[F],
    x: &[F],
    w: &[F],
    n_in: usize,
    n_out: usize,
) {
    let live: Vec<usize> = dy
        .chunks_exact(n_out)
        .enumerate()
        .filter(|(_, r)| r.iter().any(|v| !v.is_zero()))
        .map(|(r, _)| r)
        .collect();
    if live.is_empty() {
        return;
    }
    if let Some(db) = db {
        for &r in &live {
            axpy(db, F::one(), &dy[r * n_out..(r + 1) * n_out]);
        }
    }
    if let Some(dx) = dx {
        for &r in &live {
            let dyrow = &dy[r * n_out..(r + 1) * n_out];
            let dxrow = &mut dx[r * n_in..(r + 1) * n_in];
            let mut quads = w.chunks_exact(4 * n_out);
            for (q, ws4) in quads.by_ref().enumerate() {
                let (w0, rest) = ws4.split_at(n_out);
                let (w1, rest) = rest.split_at(n_out);
                let (w2, w3) = rest.split_at(n_out);
                let s = dot4(dyrow, [w0, w1, w2, w3]);
                for k in 0..4 {
                    dxrow[4 * q + k] += s[k];
                }
            }
            let done = n_in / 4 * 4;
            for (i, wrow) in quads.remainder().chunks_exact(n_out).enumerate() {
                dxrow[done + i] += dot(dyrow, wrow);
            }
        }
    }
    for (i, dwrow) in dw.chunks_exact_mut(n_out).enumerate() {
        let mut j0 = 0;
        while j0 + BLOCK <= n_out {
            let mut acc = [F::zero(); BLOCK];
            acc.copy_from_slice(&dwrow[j0..j0 + BLOCK]);
            for &r in &live {
                let xi = x[r * n_in + i];
                let db = &dy[r * n_out + j0..r * n_out + j0 + BLOCK];
                for k in 0..BLOCK {
                    acc[k] += xi * db[k];
                }
            }
            dwrow[j0..j0 + BLOCK].copy_from_slice(&acc);
            j0 += BLOCK;
        }
        for j in j0..n_out {
            let mut acc = dwrow[j];
            for &r in &live {
                acc += x[r * n_in + i] * dy[r * n_out + j];
            }
            dwrow[j] = acc;
        }
    }
}

fn layer_norm<F: Real>(
    x: &[F],
    g: &[F],
    b: &[F],
    out: &mut [F],
    mean: &mut [F],
    rstd: &mut [F],
    d: usize,
) {
    let inv_d = F::one() / c::<F>(d as f64);
    for (r, (xrow, orow)) in x.chunks_exact(d).zip(out.chunks_exact_mut(d)).enumerate() {
        let m = xrow.iter().fold(F::zero(), |a, &v| a + v) * inv_d;
        let var = xrow.iter().fold(F::zero(), |a, &v| a + (v - m) * (v - m)) * inv_d;
        let s = F::one() / (var + c(LN_EPS)).sqrt();
        for k in 0..d {
            orow[k] = (xrow[k] - m) * s * g[k] + b[k];
        }
        mean[r] = m;
        rstd[r] = s;
    }
}

#[allow(clippy::too_many_arguments)]
fn layer_norm_backward<F: Real>(
    dx: &mut [F],
    dg: &mut [F],
    db: &mut [F],
    dy: &[F],
    x: &[F],
    g: &[F],
    mean: &[F],
    rstd: &[F],
    d: usize,
) {
    for r in 0..mean.len() {
        let dyrow = &dy[r * d..(r + 1) * d];
        if dyrow.iter().all(|v| v.is_zero()) {
            continue;
        }
        layer_norm_backward_row(
            &mut dx[r * d..(r + 1) * d],
            dg,
            db,
            dyrow,
            &x[r * d..(r + 1) * d],
            g,
            mean[r],
            rstd[r],
        );
    }
}

#[allow(clippy::too_many_arguments)]
fn layer_norm_backward_row<F: Real>(
    dx: &mut [F],
    dg: &mut [F],
    db: &mut [F],
    dy: &[F],
    x: &[F],
    g: &[F],
    mean: F,
    rstd: F,
) {
    let d = x.len();
    let inv_d = F::one() / c::<F>(d as f64);
    let mut m1 = F::zero();
    let mut m2 = F::zero();
    for k in 0..d {
        let xhat = (x[k] - mean) * rstd;
        let dxhat = dy[k] * g[k];
        dg[k] += dy[k] * xhat;
        db[k] += dy[k];
        m1 += dxhat;
        m2 += dxhat * xhat;
    }
    m1 *= inv_d;
    m2 *= inv_d;
    for k in 0..d {
        let xhat = (x[k] - mean) * rstd;
        dx[k] += rstd * (dy[k] * g[k] - m1 - xhat * m2);
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

#[inline]
fn gelu<F: Real>(x: F) -> (F, F) {
    let u = c::<F>(GELU_C) * (x + c::<F>(0.044715) * x * x * x);
    let th = u.tanh();
    (c::<F>(0.5) * x * (F::one() + th), th)
}

#[inline]
fn gelu_grad<F: Real>(x: F, th: F) -> F {
    let du = c::<F>(GELU_C) * (F::one() + c::<F>(3.0 * 0.044715) * x * x);
    c::<F>(0.5) * (F::one() + th) + c::<F>(0.5) * x * (F::one() - th * th) * du
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(seed: u64) -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            n_heads: 2,
            d_model: 8,
            vocab_size: 11,
            max_seq_len: 7,
            seed,
        }
    }

    #[test]
    fn init_is_deterministic() {
        let a = Model::<f32>::init_random(tiny(3)).unwrap();
        let b = Model::<f32>::init_random(tiny(3)).unwrap();
        let c = Model::<f32>::init_random(tiny(4)).unwrap();
        assert_eq!(a.params(), b.params());
        assert_ne!(a.params(), c.params());
        let lay = a.layout();
        assert!(a.params()[lay.layers[0].ln1_g..][..8]
            .iter()
            .all(|&g| g == 1.0));
        assert!(a.params()[lay.layers[0].b_qkv..][..24]
            .iter()
            .all(|&b| b == 0.0));
    }

    #[test]
    fn attention_rows_are_causal_distributions() {
        let m = Model::<f32>::init_random(tiny(1)).unwrap();
        let rec = m.forward(&[1, 5, 2, 9, 3], &PruneMask::none()).unwrap();
        let a = &rec.attention;
        for l in 0..2 {
            for h in 0..2 {
                for i in 0..5 {
                    let row = a.row(l, h, i);
                    let s: f32 = row.iter().sum();
                    assert!((s - 1.0).abs() < 1e-5);
                    assert!(row[i + 1..].iter().all(|&v| v == 0.0));
                }
            }
        }
    }

    #[test]
    fn single_token_attention_is_one() {
        let m = Model::<f32>::init_random(tiny(1)).unwrap();
        let rec = m.forward(&[4], &PruneMask::none()).unwrap();
        assert!(rec.attention.values().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn empty_mask_equals_no_mask() {
        let m = Model::<f32>::init_random(tiny(2)).unwrap();
        let a = m.forward(&[1, 2, 3], &PruneMask::none()).unwrap();
        let b = m.forward(&[1, 2, 3], &PruneMask::heads([])).unwrap();
        assert_eq!(a.logits, b.logits);
    }

    #[test]
    fn overlength_and_bad_tokens_rejected() {
        let m = Model::<f32>::init_random(tiny(2)).unwrap();
        assert!(matches!(
            m.forward(&[0; 8], &PruneMask::none()),
            Err(crate::Error::Input(_))
        ));
        assert!(matches!(
            m.forward(&[11], &PruneMask::none()),
            Err(crate::Error::Input(_))
        ));
        assert!(matches!(
            m.forward(&[], &PruneMask::none()),
            Err(crate::Error::Input(_))
        ));
    }

    #[test]
    fn masking_changes_logits() {
        let m = Model::<f32>::init_random(tiny(2)).unwrap();
        let a = m.forward(&[1, 2, 3], &PruneMask::none()).unwrap();
        let b = m.forward(&[1, 2, 3], &PruneMask::layers([0, 1])).unwrap();
        let c = m.forward(&[1, 2, 3], &PruneMask::heads([(0, 0)])).unwrap();
        assert_ne!(a.logits, b.logits);
        assert_ne!(a.logits, c.logits);
        // the first layer's attention does not depend on any mask
        for i in 0..3 {
            assert_eq!(a.attention.row(0, 1, i), b.attention.row(0, 1, i));
        }
    }

    #[test]
    fn shrinking_positions_keeps_logits() {
        let m = Model::<f32>::init_random(tiny(5)).unwrap();
        let small = m.clone().with_max_seq_len(4).unwrap();
        let x = [3, 1, 4, 1];
        assert_eq!(
            m.forward(&x, &PruneMask::none()).unwrap().logits,
            small.forward(&x, &PruneMask::none()).unwrap().logits
        );
        assert!(small.forward(&[1; 5], &PruneMask::none()).is_err());
        assert!(m.with_max_seq_len(8).is_err());
    }

    #[test]
    fn hidden_states_have_one_entry_per_block_plus_embedding() {
        let m = Model::<f32>::init_random(tiny(5)).unwrap();
        let rec = m
            .forward_with_hidden(&[1, 2, 3], &PruneMask::none())
            .unwrap();
        let hidden = rec.hidden.unwrap();
        assert_eq!(hidden.len(), 3);
        assert!(hidden.iter().all(|h| h.len() == 3 * 8));
    }

    #[test]
    fn loss_matches_gradient_pass() {
        let m = Model::<f64>::init_random(tiny(6)).unwrap();
        let mut ws = Workspace::new();
        let mut g = vec![0.0; m.layout().total];
        let l1 = m
            .loss_and_grad(&[1, 2, 3], 4, &PruneMask::none(), &mut ws, &mut g)
            .unwrap();
        let l2 = m.loss(&[1, 2, 3], 4, &PruneMask::none()).unwrap();
        assert!((l1 - l2).abs() < 1e-12);
        assert!(g.iter().any(|&x| x != 0.0));
    }

    #[test]
    fn logits_only_pass_matches_full_pass() {
        let m = Model::<f64>::init_random(tiny(8)).unwrap();
        let toks = [3, 1, 4, 1, 5, 9];
        let full = m.forward(&toks, &PruneMask::none()).unwrap();
        let mut ws = Workspace::new();
        m.run(&toks, &PruneMask::none(), &mut ws).unwrap();
        assert_eq!(full.logits, ws.logits());
    }
}
