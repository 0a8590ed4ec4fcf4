//! Parameterized building blocks: linear, conv, layer norm, attention,
//! transformer encoder/decoder stacks.
//!
//! A layer owns its parameter names and shapes; values live in a
//! [`ParamStore`] and are pulled through a [`Ctx`] at forward time.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::params::{fan_in_init, Ctx, ParamStore};
use crate::nn::{Scalar, Tensor, Var};

#[derive(Clone, Debug)]
pub struct Linear {
    pub name: String,
    pub din: usize,
    pub dout: usize,
}

impl Linear {
    pub fn new(name: impl Into<String>, din: usize, dout: usize) -> Self {
        Linear {
            name: name.into(),
            din,
            dout,
        }
    }

    pub fn register<S: Scalar>(&self, store: &mut ParamStore<S>, rng: &mut ChaCha8Rng) {
        store.insert(
            &format!("{}.w", self.name),
            fan_in_init(rng, &[self.din, self.dout], self.din),
        );
        store.insert(&format!("{}.b", self.name), Tensor::zeros(&[self.dout]));
    }

    /// `[n,din] -> [n,dout]`
    pub fn forward<S: Scalar>(&self, ctx: &Ctx<S>, x: &Var<S>) -> Var<S> {
        let w = ctx.param(&format!("{}.w", self.name));
        let b = ctx.param(&format!("{}.b", self.name));
        x.matmul(&w).add_row_bias(&b)
    }
}

#[derive(Clone, Debug)]
pub struct Conv2dLayer {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2dLayer {
    pub fn new(
        name: impl Into<String>,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        Conv2dLayer {
            name: name.into(),
            cin,
            cout,
            k,
            stride,
            pad,
        }
    }

    pub fn register<S: Scalar>(&self, store: &mut ParamStore<S>, rng: &mut ChaCha8Rng) {
        let fan_in = self.cin * self.k * self.k;
        store.insert(
            &format!("{}.w", self.name),
            fan_in_init(rng, &[self.cout, self.cin, self.k, self.k], fan_in),
        );
        store.insert(&format!("{}.b", self.name), Tensor::zeros(&[self.cout]));
    }

    /// Register with kernel and bias at exactly zero (delta-head init).
    pub fn register_zero<S: Scalar>(&self, store: &mut ParamStore<S>) {
        store.insert(
            &format!("{}.w", self.name),
            Tensor::zeros(&[self.cout, self.cin, self.k, self.k]),
        );
        store.insert(&format!("{}.b", self.name), Tensor::zeros(&[self.cout]));
    }

    pub fn forward<S: Scalar>(&self, ctx: &Ctx<S>, x: &Var<S>) -> Var<S> {
        let w = ctx.param(&format!("{}.w", self.name));
        let b = ctx.param(&format!("{}.b", self.name));
        x.conv2d(&w, self.stride, self.pad).add_chan_bias(&b)
    }
}

#[derive(Clone, Debug)]
pub struct Conv3dLayer {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: [usize; 3],
    pub pad: [usize; 3],
}

impl Conv3dLayer {
    pub fn new(
        name: impl Into<String>,
        cin: usize,
        cout: usize,
        k: usize,
        stride: [usize; 3],
        pad: [usize; 3],
    ) -> Self {
        Conv3dLayer {
            name: name.into(),
            cin,
            cout,
            k,
            stride,
            pad,
        }
    }

    pub fn register<S: Scalar>(&self, store: &mut ParamStore<S>, rng: &mut ChaCha8Rng) {
        let fan_in = self.cin * self.k * self.k * self.k;
        store.insert(
            &format!("{}.w", self.name),
            fan_in_init(
                rng,
                &[self.cout, self.cin, self.k, self.k, self.k],
                fan_in,
            ),
        );
        store.insert(&format!("{}.b", self.name), Tensor::zeros(&[self.cout]));
    }

    pub fn forward<S: Scalar>(&self, ctx: &Ctx<S>, x: &Var<S>) -> Var<S> {
        let w = ctx.param(&format!("{}.w", self.name));
        let b = ctx.param(&format!("{}.b", self.name));
        x.conv3d(&w, self.stride, self.pad).add_chan_bias(&b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNormLayer {
    pub name: String,
    pub d: usize,
}

impl LayerNormLayer {
    pub fn new(name: impl Into<String>, d: usize) -> Self {
        LayerNormLayer {
            name: name.into(),
            d,
        }
    }

    pub fn register<S: Scalar>(&self, store: &mut ParamStore<S>) {
        store.insert(&format!("{}.g", self.name), Tensor::ones(&[self.d]));
        store.insert(&format!("{}.b", self.name), Tensor::zeros(&[self.d]));
    }

    pub fn forward<S: Scalar>(&self, ctx: &Ctx<S>, x: &Var<S>) -> Var<S> {
        let g = ctx.param(&format!("{}.g", self.name));
        let b = ctx.param(&format!("{}.b", self.name));
        x.layer_norm(&g, &b)
    }
}

/// Scaled dot-product attention over pre-projected inputs: the keys/values
/// are split into `heads`, each head attends independently, and the
/// concatenated result goes through the output projection `w_out`.
pub fn multi_head_attention<S: Scalar>(
    q: &Var<S>,
    k: &Var<S>,
    v: &Var<S>,
    heads: usize,
    w_out: &Var<S>,
) -> Result<Var<S>> {
    let d = q.shape()[1];
    if d % heads != 0 {
        return Err(Error::shape(format!(
            "model dim {d} not divisible by {heads} heads"
        )));
    }
    if k.shape()[1] != d || v.shape()[1] != d || k.shape()[0] != v.shape()[0] {
        return Err(Error::shape(format!(
            "attention shapes q{:?} k{:?} v{:?}",
            q.shape(),
            k.shape(),
            v.shape()
        )));
    }
    let dh = d / heads;
    let scale = S::from_f64(1.0 / (dh as f64).sqrt());
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (lo, hi) = (h * dh, (h + 1) * dh);
        let qh = q.slice_cols(lo, hi);
        let kh = k.slice_cols(lo, hi);
        let vh = v.slice_cols(lo, hi);
        let scores = qh.matmul(&kh.transpose2()).scale(scale);
        let probs = scores.softmax_rows();
        outs.push(probs.matmul(&vh));
    }
    let cat = Var::concat(&outs, 1);
    Ok(cat.matmul(w_out))
}

/// Full attention block with learned q/k/v/out projections.
#[derive(Clone, Debug)]
pub struct Mha {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    name: String,
    pub d: usize,
    pub heads: usize,
}

impl Mha {
    pub fn new(name: impl Into<String>, d: usize, heads: usize) -> Self {
        let name = name.into();
        Mha {
            wq: Linear::new(format!("{name}.q"), d, d),
            wk: Linear::new(format!("{name}.k"), d, d),
            wv: Linear::new(format!("{name}.v"), d, d),
            name,
            d,
            heads,
        }
    }

    pub fn register<S: Scalar>(&self, store: &mut ParamStore<S>, rng: &mut ChaCha8Rng) {
        self.wq.register(store, rng);
        self.wk.register(store, rng);
        self.wv.register(store, rng);
        store.insert(
            &format!("{}.o", self.name),
            fan_in_init(rng, &[self.d, self.d], self.d),
        );
    }

    pub fn forward<S: Scalar>(&self, ctx: &Ctx<S>, q_in: &Var<S>, kv_in: &Var<S>) -> Var<S> {
        let q = self.wq.forward(ctx, q_in);
        let k = self.wk.forward(ctx, kv_in);
        let v = self.wv.forward(ctx, kv_in);
        let wo = ctx.param(&format!("{}.o", self.name));
        multi_head_attention(&q, &k, &v, self.heads, &wo).expect("validated at construction")
    }
}

/// Pre-norm transformer encoder layer: self-attention + feed-forward.
#[derive(Clone, Debug)]
pub struct EncoderLayer {
    ln1: LayerNormLayer,
    attn: Mha,
    ln2: LayerNormLayer,
    ff1: Linear,
    ff2: Linear,
}

impl EncoderLayer {
    pub fn new(name: &str, d: usize, heads: usize) -> Self {
        EncoderLayer {
            ln1: LayerNormLayer::new(format!("{name}.ln1"), d),
            attn: Mha::new(format!("{name}.attn"), d, heads),
            ln2: LayerNormLayer::new(format!("{name}.ln2"), d),
            ff1: Linear::new(format!("{name}.ff1"), d, 4 * d),
            ff2: Linear::new(format!("{name}.ff2"), 4 * d, d),
        }
    }

    pub fn register<S: Scalar>(&self, store: &mut ParamStore<S>, rng: &mut ChaCha8Rng) {
        self.ln1.register(store);
        self.attn.register(store, rng);
        self.ln2.register(store);
        self.ff1.register(store, rng);
        self.ff2.register(store, rng);
    }

    pub fn forward<S: Scalar>(&self, ctx: &Ctx<S>, x: &Var<S>) -> Var<S> {
        let h = self.ln1.forward(ctx, x);
        let x = x.add(&self.attn.forward(ctx, &h, &h));
        let h = self.ln2.forward(ctx, &x);
        let h = self.ff2.forward(ctx, &self.ff1.forward(ctx, &h).gelu());
        x.add(&h)
    }
}

/// Pre-norm transformer decoder layer: self-attention over the queries,
/// cross-attention into the memory, then feed-forward.
#[derive(Clone, Debug)]
pub struct DecoderLayer {
    ln1: LayerNormLayer,
    self_attn: Mha,
    ln2: LayerNormLayer,
    cross_attn: Mha,
    ln3: LayerNormLayer,
    ff1: Linear,
    ff2: Linear,
}

impl DecoderLayer {
    pub fn new(name: &str, d: usize, heads: usize) -> Self {
        DecoderLayer {
            ln1: LayerNormLayer::new(format!("{name}.ln1"), d),
            self_attn: Mha::new(format!("{name}.sa"), d, heads),
            ln2: LayerNormLayer::new(format!("{name}.ln2"), d),
            cross_attn: Mha::new(format!("{name}.ca"), d, heads),
            ln3: LayerNormLayer::new(format!("{name}.ln3"), d),
            ff1: Linear::new(format!("{name}.ff1"), d, 4 * d),
            ff2: Linear::new(format!("{name}.ff2"), 4 * d, d),
        }
    }

    pub fn register<S: Scalar>(&self, store: &mut ParamStore<S>, rng: &mut ChaCha8Rng) {
        self.ln1.register(store);
        self.self_attn.register(store, rng);
        self.ln2.register(store);
        self.cross_attn.register(store, rng);
        self.ln3.register(store);
        self.ff1.register(store, rng);
        self.ff2.register(store, rng);
    }

    pub fn forward<S: Scalar>(&self, ctx: &Ctx<S>, q: &Var<S>, memory: &Var<S>) -> Var<S> {
        let h = self.ln1.forward(ctx, q);
        let q = q.add(&self.self_attn.forward(ctx, &h, &h));
        let h = self.ln2.forward(ctx, &q);
        let q = q.add(&self.cross_attn.forward(ctx, &h, memory));
        let h = self.ln3.forward(ctx, &q);
        let h = self.ff2.forward(ctx, &self.ff1.forward(ctx, &h).gelu());
        q.add(&h)
    }
}

#[derive(Clone, Debug)]
pub struct TransformerEncoder {
    layers: Vec<EncoderLayer>,
    ln: LayerNormLayer,
}

impl TransformerEncoder {
    pub fn new(name: &str, d: usize, depth: usize, heads: usize) -> Self {
        TransformerEncoder {
            layers: (0..depth)
                .map(|i| EncoderLayer::new(&format!("{name}.l{i}"), d, heads))
                .collect(),
            ln: LayerNormLayer::new(format!("{name}.ln"), d),
        }
    }

    pub fn register<S: Scalar>(&self, store: &mut ParamStore<S>, rng: &mut ChaCha8Rng) {
        for l in &self.layers {
            l.register(store, rng);
        }
        self.ln.register(store);
    }

    pub fn forward<S: Scalar>(&self, ctx: &Ctx<S>, x: &Var<S>) -> Var<S> {
        let mut x = x.clone();
        for l in &self.layers {
            x = l.forward(ctx, &x);
        }
        self.ln.forward(ctx, &x)
    }
}

#[derive(Clone, Debug)]
pub struct TransformerDecoder {
    layers: Vec<DecoderLayer>,
    ln: LayerNormLayer,
}

impl TransformerDecoder {
    pub fn new(name: &str, d: usize, depth: usize, heads: usize) -> Self {
        TransformerDecoder {
            layers: (0..depth)
                .map(|i| DecoderLayer::new(&format!("{name}.l{i}"), d, heads))
                .collect(),
            ln: LayerNormLayer::new(format!("{name}.ln"), d),
        }
    }

    pub fn register<S: Scalar>(&self, store: &mut ParamStore<S>, rng: &mut ChaCha8Rng) {
        for l in &self.layers {
            l.register(store, rng);
        }
        self.ln.register(store);
    }

    pub fn forward<S: Scalar>(&self, ctx: &Ctx<S>, q: &Var<S>, memory: &Var<S>) -> Var<S> {
        let mut q = q.clone();
        for l in &self.layers {
            q = l.forward(ctx, &q, memory);
        }
        self.ln.forward(ctx, &q)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn identity<S: Scalar>(d: usize) -> Var<S> {
        let mut m = vec![S::ZERO; d * d];
        for i in 0..d {
            m[i * d + i] = S::ONE;
        }
        Var::constant(Tensor::raw(&[d, d], m))
    }

    #[test]
    fn attention_single_key_returns_value() {
        // softmax over one logit is 1 regardless of q
        let q = Var::constant(Tensor::new(&[3, 4], vec![0.3f64; 12]).unwrap());
        let k = Var::constant(Tensor::new(&[1, 4], vec![5.0f64, -2.0, 0.1, 9.0]).unwrap());
        let v = Var::constant(Tensor::new(&[1, 4], vec![1.0f64, 2.0, 3.0, 4.0]).unwrap());
        let out = multi_head_attention(&q, &k, &v, 2, &identity(4)).unwrap();
        for row in out.value().data().chunks_exact(4) {
            assert_eq!(row, &[1.0, 2.0, 3.0, 4.0]);
        }
    }

    #[test]
    fn attention_identical_keys_average_values() {
        let q = Var::constant(Tensor::new(&[1, 2], vec![0.7f64, -0.3]).unwrap());
        let k = Var::constant(Tensor::new(&[2, 2], vec![1.0f64, 2.0, 1.0, 2.0]).unwrap());
        let v = Var::constant(Tensor::new(&[2, 2], vec![0.0f64, 10.0, 4.0, 2.0]).unwrap());
        let out = multi_head_attention(&q, &k, &v, 1, &identity(2)).unwrap();
        assert!((out.value().data()[0] - 2.0).abs() < 1e-12);
        assert!((out.value().data()[1] - 6.0).abs() < 1e-12);
    }

    #[test]
    fn attention_matches_brute_force_oracle() {
        // brute-force softmax attention, computed without the op graph
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let rand_t = |rng: &mut ChaCha8Rng, n: usize| -> Vec<f64> {
            (0..n).map(|_| rand::Rng::gen_range(rng, -1.0..1.0)).collect()
        };
        let (n, d, heads) = (3, 4, 2);
        let qv = rand_t(&mut rng, n * d);
        let kv = rand_t(&mut rng, n * d);
        let vv = rand_t(&mut rng, n * d);
        let q = Var::constant(Tensor::new(&[n, d], qv.clone()).unwrap());
        let k = Var::constant(Tensor::new(&[n, d], kv.clone()).unwrap());
        let v = Var::constant(Tensor::new(&[n, d], vv.clone()).unwrap());
        let got = multi_head_attention(&q, &k, &v, heads, &identity(d)).unwrap();

        let dh = d / heads;
        let mut want = vec![0.0f64; n * d];
        for h in 0..heads {
            for i in 0..n {
                let mut logits = vec![0.0f64; n];
                for j in 0..n {
                    let mut dot = 0.0;
                    for c in 0..dh {
                        dot += qv[i * d + h * dh + c] * kv[j * d + h * dh + c];
                    }
                    logits[j] = dot / (dh as f64).sqrt();
                }
                let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
                let z: f64 = exps.iter().sum();
                for c in 0..dh {
                    let mut acc = 0.0;
                    for j in 0..n {
                        acc += exps[j] / z * vv[j * d + h * dh + c];
                    }
                    want[i * d + h * dh + c] = acc;
                }
            }
        }
        for (g, w) in got.value().data().iter().zip(&want) {
            assert!((g - w).abs() < 1e-9, "attention mismatch {g} vs {w}");
        }
    }

    #[test]
    fn attention_rejects_bad_heads() {
        let q = Var::constant(Tensor::<f64>::zeros(&[2, 6]));
        assert!(multi_head_attention(&q, &q, &q, 4, &identity(6)).is_err());
    }

    #[test]
    fn encoder_layer_runs() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f64>::new();
        let layer = EncoderLayer::new("enc", 8, 2);
        layer.register(&mut store, &mut rng);
        let ctx = Ctx::new(&store);
        let x = Var::constant(Tensor::from_fn(&[5, 8], |i| (i as f64 * 0.13).sin()));
        let y = layer.forward(&ctx, &x);
        assert_eq!(y.shape(), &[5, 8]);
        assert!(y.value().all_finite());
    }
}
