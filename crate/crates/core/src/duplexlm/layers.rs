//! Parameter storage and the transformer building blocks, each with an
//! explicit forward cache and a hand-written backward pass.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::tokenizer::TensorRole;

const LN_EPS: f64 = 1e-5;

/// Optimizer parameter group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Group {
    Temporal,
    Depth,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub role: TensorRole,
    pub group: Group,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Param {
    /// Weight decay applies to matrices only, not gains or biases.
    pub fn decays(&self) -> bool {
        self.shape.len() == 2
    }
}

pub(crate) enum Init {
    Normal(f64),
    Zeros,
    Ones,
}

/// Flat named tensors; model code holds indices into it. Gradients use a
/// second store of identical layout.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    pub params: Vec<Param>,
}

impl ParamStore {
    pub(crate) fn add(
        &mut self,
        name: String,
        role: TensorRole,
        group: Group,
        shape: Vec<usize>,
        init: Init,
        rng: &mut impl Rng,
    ) -> usize {
        let n = shape.iter().product();
        let data = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Normal(std) => {
                let dist = Normal::new(0.0, std).expect("positive std");
                (0..n).map(|_| dist.sample(rng)).collect()
            }
        };
        self.params.push(Param { name, role, group, shape, data });
        self.params.len() - 1
    }

    pub fn zeros_like(&self) -> Self {
        let params = self
            .params
            .iter()
            .map(|p| Param { data: vec![0.0; p.data.len()], ..p.clone() })
            .collect();
        Self { params }
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn n_values(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn fill(&mut self, v: f64) {
        for p in &mut self.params {
            p.data.fill(v);
        }
    }

    pub(crate) fn mat(&self, i: usize) -> ArrayView2<'_, f64> {
        let p = &self.params[i];
        ArrayView2::from_shape((p.shape[0], p.shape[1]), &p.data).expect("2-d param")
    }

    pub(crate) fn vec(&self, i: usize) -> ArrayView1<'_, f64> {
        ArrayView1::from(&self.params[i].data)
    }

    pub(crate) fn mat_mut(&mut self, i: usize) -> ArrayViewMut2<'_, f64> {
        let p = &mut self.params[i];
        ArrayViewMut2::from_shape((p.shape[0], p.shape[1]), &mut p.data).expect("2-d param")
    }

    pub(crate) fn vec_mut(&mut self, i: usize) -> ArrayViewMut1<'_, f64> {
        ArrayViewMut1::from(&mut self.params[i].data)
    }

    pub(crate) fn row_mut(&mut self, i: usize, r: usize) -> ArrayViewMut1<'_, f64> {
        let width = self.params[i].shape[1];
        ArrayViewMut1::from(&mut self.params[i].data[r * width..(r + 1) * width])
    }

    pub(crate) fn row(&self, i: usize, r: usize) -> ArrayView1<'_, f64> {
        let width = self.params[i].shape[1];
        ArrayView1::from(&self.params[i].data[r * width..(r + 1) * width])
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct LinearIx {
    pub w: usize,
    pub b: usize,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct NormIx {
    pub g: usize,
    pub b: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct BlockIx {
    ln1: NormIx,
    wq: usize,
    wk: usize,
    wv: usize,
    wo: usize,
    ln2: NormIx,
    fc1: LinearIx,
    fc2: LinearIx,
}

#[derive(Debug, Clone)]
pub(crate) struct StackIx {
    blocks: Vec<BlockIx>,
    ln_f: NormIx,
    heads: usize,
}

pub(crate) struct Builder<'a, R: Rng> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut R,
    pub group: Group,
    pub std: f64,
}

impl<R: Rng> Builder<'_, R> {
    pub fn tensor(&mut self, name: String, role: TensorRole, shape: Vec<usize>, init: Init) -> usize {
        self.store.add(name, role, self.group, shape, init, self.rng)
    }

    pub fn weight(&mut self, name: String, shape: Vec<usize>) -> usize {
        let std = self.std;
        self.tensor(name, TensorRole::Other, shape, Init::Normal(std))
    }

    pub fn linear(&mut self, name: &str, d_in: usize, d_out: usize) -> LinearIx {
        LinearIx {
            w: self.weight(format!("{name}.weight"), vec![d_out, d_in]),
            b: self.tensor(format!("{name}.bias"), TensorRole::Other, vec![d_out], Init::Zeros),
        }
    }

    pub fn norm(&mut self, name: &str, d: usize) -> NormIx {
        NormIx {
            g: self.tensor(format!("{name}.weight"), TensorRole::Other, vec![d], Init::Ones),
            b: self.tensor(format!("{name}.bias"), TensorRole::Other, vec![d], Init::Zeros),
        }
    }

    pub fn stack(&mut self, name: &str, d: usize, layers: usize, heads: usize) -> StackIx {
        let blocks = (0..layers)
            .map(|l| {
                let p = format!("{name}.layers.{l}");
                BlockIx {
                    ln1: self.norm(&format!("{p}.ln1"), d),
                    wq: self.weight(format!("{p}.attn.wq"), vec![d, d]),
                    wk: self.weight(format!("{p}.attn.wk"), vec![d, d]),
                    wv: self.weight(format!("{p}.attn.wv"), vec![d, d]),
                    wo: self.weight(format!("{p}.attn.wo"), vec![d, d]),
                    ln2: self.norm(&format!("{p}.ln2"), d),
                    fc1: self.linear(&format!("{p}.mlp.fc1"), d, 4 * d),
                    fc2: self.linear(&format!("{p}.mlp.fc2"), 4 * d, d),
                }
            })
            .collect();
        StackIx { blocks, ln_f: self.norm(&format!("{name}.ln_f"), d), heads }
    }
}

pub(crate) fn linear_fwd(p: &ParamStore, ix: LinearIx, x: ArrayView2<f64>) -> Array2<f64> {
    x.dot(&p.mat(ix.w).t()) + &p.vec(ix.b)
}

pub(crate) fn linear_bwd(p: &ParamStore, g: &mut ParamStore, ix: LinearIx, x: ArrayView2<f64>, dy: ArrayView2<f64>) -> Array2<f64> {
    g.mat_mut(ix.w).scaled_add(1.0, &dy.t().dot(&x));
    g.vec_mut(ix.b).scaled_add(1.0, &dy.sum_axis(Axis(0)));
    dy.dot(&p.mat(ix.w))
}

pub(crate) struct NormCache {
    xhat: Array2<f64>,
    rstd: Array1<f64>,
}

pub(crate) fn norm_fwd(p: &ParamStore, ix: NormIx, x: ArrayView2<f64>) -> (Array2<f64>, NormCache) {
    let d = x.ncols() as f64;
    let mean = x.sum_axis(Axis(1)) / d;
    let centered = &x - &mean.view().insert_axis(Axis(1));
    let var = centered.mapv(|v| v * v).sum_axis(Axis(1)) / d;
    let rstd = var.mapv(|v| 1.0 / (v + LN_EPS).sqrt());
    let xhat = centered * &rstd.view().insert_axis(Axis(1));
    let y = &xhat * &p.vec(ix.g) + &p.vec(ix.b);
    (y, NormCache { xhat, rstd })
}

pub(crate) fn norm_bwd(p: &ParamStore, g: &mut ParamStore, ix: NormIx, c: &NormCache, dy: ArrayView2<f64>) -> Array2<f64> {
    g.vec_mut(ix.g).scaled_add(1.0, &(&dy * &c.xhat).sum_axis(Axis(0)));
    g.vec_mut(ix.b).scaled_add(1.0, &dy.sum_axis(Axis(0)));
    let dxhat = &dy * &p.vec(ix.g);
    let d = dy.ncols() as f64;
    let mean_dxhat = dxhat.sum_axis(Axis(1)) / d;
    let mean_dxhat_xhat = (&dxhat * &c.xhat).sum_axis(Axis(1)) / d;
    let inner = dxhat - &mean_dxhat.insert_axis(Axis(1)) - &c.xhat * &mean_dxhat_xhat.insert_axis(Axis(1));
    inner * &c.rstd.view().insert_axis(Axis(1))
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Row-wise softmax over the causal prefix; entries above the diagonal stay zero.
fn causal_softmax(scores: &Array2<f64>) -> Array2<f64> {
    let n = scores.nrows();
    let mut p = Array2::zeros((n, n));
    for i in 0..n {
        let row = scores.slice(s![i, ..=i]);
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let mut sum = 0.0;
        for j in 0..=i {
            let e = (row[j] - max).exp();
            p[[i, j]] = e;
            sum += e;
        }
        p.slice_mut(s![i, ..=i]).mapv_inplace(|v| v / sum);
    }
    p
}

pub(crate) struct BlockCache {
    ln1: NormCache,
    a: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    probs: Vec<Array2<f64>>,
    o: Array2<f64>,
    ln2: NormCache,
    m: Array2<f64>,
    u: Array2<f64>,
    act: Array2<f64>,
}

fn block_fwd(p: &ParamStore, ix: &BlockIx, heads: usize, x: ArrayView2<f64>) -> (Array2<f64>, BlockCache) {
    let (a, ln1) = norm_fwd(p, ix.ln1, x);
    let q = a.dot(&p.mat(ix.wq).t());
    let k = a.dot(&p.mat(ix.wk).t());
    let v = a.dot(&p.mat(ix.wv).t());
    let d = x.ncols();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut o = Array2::zeros(x.raw_dim());
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let scores = q.slice(cols).dot(&k.slice(cols).t()) * scale;
        let pr = causal_softmax(&scores);
        o.slice_mut(cols).assign(&pr.dot(&v.slice(cols)));
        probs.push(pr);
    }
    let h1 = &x + &o.dot(&p.mat(ix.wo).t());
    let (m, ln2) = norm_fwd(p, ix.ln2, h1.view());
    let u = linear_fwd(p, ix.fc1, m.view());
    let act = u.mapv(gelu);
    let y = &h1 + &linear_fwd(p, ix.fc2, act.view());
    (y, BlockCache { ln1, a, q, k, v, probs, o, ln2, m, u, act })
}

fn block_bwd(p: &ParamStore, g: &mut ParamStore, ix: &BlockIx, heads: usize, c: &BlockCache, dy: ArrayView2<f64>) -> Array2<f64> {
    // MLP branch
    let dact = linear_bwd(p, g, ix.fc2, c.act.view(), dy);
    let du = dact * &c.u.mapv(gelu_grad);
    let dm = linear_bwd(p, g, ix.fc1, c.m.view(), du.view());
    let dh1 = &dy + &norm_bwd(p, g, ix.ln2, &c.ln2, dm.view());

    // attention branch
    g.mat_mut(ix.wo).scaled_add(1.0, &dh1.t().dot(&c.o));
    let do_ = dh1.dot(&p.mat(ix.wo));
    let d = dy.ncols();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = Array2::zeros(c.q.raw_dim());
    let mut dk = Array2::zeros(c.k.raw_dim());
    let mut dv = Array2::zeros(c.v.raw_dim());
    for h in 0..heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let pr = &c.probs[h];
        let doh = do_.slice(cols);
        dv.slice_mut(cols).assign(&pr.t().dot(&doh));
        let dp = doh.dot(&c.v.slice(cols).t());
        let row_dot = (&dp * pr).sum_axis(Axis(1));
        let ds = (dp - &row_dot.insert_axis(Axis(1))) * pr * scale;
        dq.slice_mut(cols).assign(&ds.dot(&c.k.slice(cols)));
        dk.slice_mut(cols).assign(&ds.t().dot(&c.q.slice(cols)));
    }
    g.mat_mut(ix.wq).scaled_add(1.0, &dq.t().dot(&c.a));
    g.mat_mut(ix.wk).scaled_add(1.0, &dk.t().dot(&c.a));
    g.mat_mut(ix.wv).scaled_add(1.0, &dv.t().dot(&c.a));
    let da = dq.dot(&p.mat(ix.wq)) + dk.dot(&p.mat(ix.wk)) + dv.dot(&p.mat(ix.wv));
    dh1 + norm_bwd(p, g, ix.ln1, &c.ln1, da.view())
}

pub(crate) struct StackCache {
    blocks: Vec<BlockCache>,
    ln_f: NormCache,
}

/// Pre-LN causal transformer over the rows of `x`, with a final LayerNorm.
pub(crate) fn stack_fwd(p: &ParamStore, ix: &StackIx, x: Array2<f64>) -> (Array2<f64>, StackCache) {
    let mut h = x;
    let mut blocks = Vec::with_capacity(ix.blocks.len());
    for b in &ix.blocks {
        let (y, c) = block_fwd(p, b, ix.heads, h.view());
        blocks.push(c);
        h = y;
    }
    let (out, ln_f) = norm_fwd(p, ix.ln_f, h.view());
    (out, StackCache { blocks, ln_f })
}

pub(crate) fn stack_bwd(p: &ParamStore, g: &mut ParamStore, ix: &StackIx, c: &StackCache, dout: ArrayView2<f64>) -> Array2<f64> {
    let mut dh = norm_bwd(p, g, ix.ln_f, &c.ln_f, dout);
    for (b, bc) in ix.blocks.iter().zip(&c.blocks).rev() {
        dh = block_bwd(p, g, b, ix.heads, bc, dh.view());
    }
    dh
}
