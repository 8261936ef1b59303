//! Post-layer-norm transformer encoder with learned token, position and
//! segment embeddings, plus its hand-written backward pass.
//!
//! One sequence is processed at a time, so the only attention mask needed is
//! the key mask over `[PAD]` tokens.

use ndarray::{s, Array1, Array2, Axis};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::nn::{self, LayerNormCache};
use crate::params::{view, view_mut, Parameters, TensorView, TensorViewMut};
use crate::tokenizer::{EncodedQuery, PAD_ID};

pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EncoderConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub vocab_size: usize,
    pub n_segments: usize,
    pub dropout_prob: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_ff: 128,
            max_len: 64,
            vocab_size: 4,
            n_segments: 2,
            dropout_prob: 0.3,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("max_len", self.max_len),
            ("vocab_size", self.vocab_size),
            ("n_segments", self.n_segments),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_prob) {
            return Err(Error::Config(format!(
                "dropout_prob {} outside [0, 1)",
                self.dropout_prob
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub wq: Array2<f64>,
    pub bq: Array1<f64>,
    pub wk: Array2<f64>,
    pub bk: Array1<f64>,
    pub wv: Array2<f64>,
    pub bv: Array1<f64>,
    pub wo: Array2<f64>,
    pub bo: Array1<f64>,
    pub ln1_gain: Array1<f64>,
    pub ln1_bias: Array1<f64>,
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    pub ln2_gain: Array1<f64>,
    pub ln2_bias: Array1<f64>,
}

impl LayerParams {
    fn zeros(d: usize, d_ff: usize) -> Self {
        LayerParams {
            wq: Array2::zeros((d, d)),
            bq: Array1::zeros(d),
            wk: Array2::zeros((d, d)),
            bk: Array1::zeros(d),
            wv: Array2::zeros((d, d)),
            bv: Array1::zeros(d),
            wo: Array2::zeros((d, d)),
            bo: Array1::zeros(d),
            ln1_gain: Array1::zeros(d),
            ln1_bias: Array1::zeros(d),
            w1: Array2::zeros((d, d_ff)),
            b1: Array1::zeros(d_ff),
            w2: Array2::zeros((d_ff, d)),
            b2: Array1::zeros(d),
            ln2_gain: Array1::zeros(d),
            ln2_bias: Array1::zeros(d),
        }
    }
}

/// Query- or key-encoder weights.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub config: EncoderConfig,
    pub token_emb: Array2<f64>,
    pub position_emb: Array2<f64>,
    pub segment_emb: Array2<f64>,
    pub emb_ln_gain: Array1<f64>,
    pub emb_ln_bias: Array1<f64>,
    pub layers: Vec<LayerParams>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderOutput {
    /// Final hidden state of every input position.
    pub all_hidden: Array2<f64>,
    /// Rows of `all_hidden` at the utterance word positions.
    pub word_hidden: Array2<f64>,
    /// Row 0 (`[CLS]`).
    pub cls: Array1<f64>,
}

impl EncoderOutput {
    fn from_hidden(all_hidden: Array2<f64>, input: &EncodedQuery) -> Self {
        let word_hidden = all_hidden.select(Axis(0), &input.utterance_positions);
        let cls = all_hidden.row(0).to_owned();
        EncoderOutput {
            all_hidden,
            word_hidden,
            cls,
        }
    }
}

struct LayerCache {
    input: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    probs: Vec<Array2<f64>>,
    probs_mask: Option<Vec<Array2<f64>>>,
    context: Array2<f64>,
    attn_mask: Option<Array2<f64>>,
    ln1: LayerNormCache,
    x1: Array2<f64>,
    pre_act: Array2<f64>,
    act: Array2<f64>,
    ffn_mask: Option<Array2<f64>>,
    ln2: LayerNormCache,
}

/// Activations saved by a forward pass for the matching backward pass.
pub struct ForwardCache {
    token_ids: Vec<usize>,
    segment_ids: Vec<usize>,
    emb_ln: LayerNormCache,
    emb_mask: Option<Array2<f64>>,
    layers: Vec<LayerCache>,
}

impl EncoderParams {
    /// Weights ~ N(0, 0.02²), layer-norm gains 1, biases 0.
    pub fn init(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let mut sample = |rows: usize, cols: usize| {
            Array2::from_shape_simple_fn((rows, cols), || normal.sample(&mut rng))
        };
        let d = config.d_model;
        let token_emb = sample(config.vocab_size, d);
        let position_emb = sample(config.max_len, d);
        let segment_emb = sample(config.n_segments, d);
        let mut layers = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            let mut layer = LayerParams::zeros(d, config.d_ff);
            layer.wq = sample(d, d);
            layer.wk = sample(d, d);
            layer.wv = sample(d, d);
            layer.wo = sample(d, d);
            layer.w1 = sample(d, config.d_ff);
            layer.w2 = sample(config.d_ff, d);
            layer.ln1_gain.fill(1.0);
            layer.ln2_gain.fill(1.0);
            layers.push(layer);
        }
        Ok(EncoderParams {
            config,
            token_emb,
            position_emb,
            segment_emb,
            emb_ln_gain: Array1::ones(d),
            emb_ln_bias: Array1::zeros(d),
            layers,
        })
    }

    /// All-zero parameters of the right shapes, used as a gradient buffer.
    pub fn zeros(config: EncoderConfig) -> Self {
        let d = config.d_model;
        EncoderParams {
            config,
            token_emb: Array2::zeros((config.vocab_size, d)),
            position_emb: Array2::zeros((config.max_len, d)),
            segment_emb: Array2::zeros((config.n_segments, d)),
            emb_ln_gain: Array1::zeros(d),
            emb_ln_bias: Array1::zeros(d),
            layers: (0..config.n_layers)
                .map(|_| LayerParams::zeros(d, config.d_ff))
                .collect(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.config)
    }

    /// Deep copy; the two sets share no storage.
    pub fn clone_params(&self) -> Self {
        self.clone()
    }

    fn check_input(&self, input: &EncodedQuery) -> Result<()> {
        let c = &self.config;
        if input.token_ids.is_empty() {
            return Err(Error::Data("empty encoder input".into()));
        }
        if input.len() > c.max_len {
            return Err(Error::Data(format!(
                "input length {} exceeds max_len {}",
                input.len(),
                c.max_len
            )));
        }
        if input.segment_ids.len() != input.len() {
            return Err(Error::Shape("token/segment id length mismatch".into()));
        }
        if let Some(&id) = input.token_ids.iter().find(|&&id| id >= c.vocab_size) {
            return Err(Error::Data(format!("token id {id} outside vocab of {}", c.vocab_size)));
        }
        if let Some(&s) = input.segment_ids.iter().find(|&&s| s >= c.n_segments) {
            return Err(Error::Data(format!("segment id {s} outside {} segments", c.n_segments)));
        }
        if input.utterance_positions.iter().any(|&p| p >= input.len()) {
            return Err(Error::Data("utterance position outside input".into()));
        }
        Ok(())
    }

    /// Encodes one input. Dropout is applied only when `train_mode` is set,
    /// drawing masks from `rng`.
    pub fn forward(
        &self,
        input: &EncodedQuery,
        train_mode: bool,
        rng: &mut dyn RngCore,
    ) -> Result<EncoderOutput> {
        let rng = if train_mode { Some(rng) } else { None };
        Ok(self.forward_cached(input, rng)?.0)
    }

    pub fn forward_eval(&self, input: &EncodedQuery) -> Result<EncoderOutput> {
        Ok(self.forward_cached(input, None)?.0)
    }

    /// Forward pass keeping the activations needed by [`Self::backward`].
    /// `dropout_rng = None` disables dropout.
    pub fn forward_cached(
        &self,
        input: &EncodedQuery,
        mut dropout_rng: Option<&mut dyn RngCore>,
    ) -> Result<(EncoderOutput, ForwardCache)> {
        self.check_input(input)?;
        let c = &self.config;
        let p = c.dropout_prob;
        let len = input.len();
        let d = c.d_model;
        let mut mask = |rows: usize, cols: usize| -> Option<Array2<f64>> {
            match dropout_rng.as_deref_mut() {
                Some(rng) if p > 0.0 => Some(nn::dropout_mask(rows, cols, p, rng)),
                _ => None,
            }
        };

        let mut emb = Array2::zeros((len, d));
        for (i, mut row) in emb.axis_iter_mut(Axis(0)).enumerate() {
            row += &self.token_emb.row(input.token_ids[i]);
            row += &self.position_emb.row(i);
            row += &self.segment_emb.row(input.segment_ids[i]);
        }
        let (mut x, emb_ln) = nn::layer_norm(&emb, &self.emb_ln_gain, &self.emb_ln_bias);
        let emb_mask = mask(len, d);
        if let Some(m) = &emb_mask {
            x *= m;
        }

        let key_padding: Vec<bool> = input.token_ids.iter().map(|&t| t == PAD_ID).collect();
        let dh = c.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let mut caches = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let q = nn::linear(&x, &layer.wq, &layer.bq);
            let k = nn::linear(&x, &layer.wk, &layer.bk);
            let v = nn::linear(&x, &layer.wv, &layer.bv);
            let mut context = Array2::zeros((len, d));
            let mut probs = Vec::with_capacity(c.n_heads);
            let mut probs_masks = Vec::new();
            for h in 0..c.n_heads {
                let cols = s![.., h * dh..(h + 1) * dh];
                let mut scores = q.slice(cols).dot(&k.slice(cols).t()) * scale;
                for (j, &padded) in key_padding.iter().enumerate() {
                    if padded {
                        scores.column_mut(j).fill(f64::NEG_INFINITY);
                    }
                }
                nn::softmax_rows(&mut scores);
                let pm = mask(len, len);
                let head_ctx = match &pm {
                    Some(m) => (&scores * m).dot(&v.slice(cols)),
                    None => scores.dot(&v.slice(cols)),
                };
                context.slice_mut(cols).assign(&head_ctx);
                probs.push(scores);
                if let Some(m) = pm {
                    probs_masks.push(m);
                }
            }
            let mut attn = nn::linear(&context, &layer.wo, &layer.bo);
            let attn_mask = mask(len, d);
            if let Some(m) = &attn_mask {
                attn *= m;
            }
            attn += &x;
            let (x1, ln1) = nn::layer_norm(&attn, &layer.ln1_gain, &layer.ln1_bias);

            let pre_act = nn::linear(&x1, &layer.w1, &layer.b1);
            let act = pre_act.mapv(nn::gelu);
            let mut ffn = nn::linear(&act, &layer.w2, &layer.b2);
            let ffn_mask = mask(len, d);
            if let Some(m) = &ffn_mask {
                ffn *= m;
            }
            ffn += &x1;
            let (x2, ln2) = nn::layer_norm(&ffn, &layer.ln2_gain, &layer.ln2_bias);

            caches.push(LayerCache {
                input: x,
                q,
                k,
                v,
                probs,
                probs_mask: (!probs_masks.is_empty()).then_some(probs_masks),
                context,
                attn_mask,
                ln1,
                x1,
                pre_act,
                act,
                ffn_mask,
                ln2,
            });
            x = x2;
        }
        let output = EncoderOutput::from_hidden(x, input);
        let cache = ForwardCache {
            token_ids: input.token_ids.clone(),
            segment_ids: input.segment_ids.clone(),
            emb_ln,
            emb_mask,
            layers: caches,
        };
        Ok((output, cache))
    }

    /// Backpropagates `d_hidden` (gradient w.r.t. `all_hidden`) and adds
    /// the parameter gradients into `grads`.
    pub fn backward(&self, cache: &ForwardCache, d_hidden: &Array2<f64>, grads: &mut EncoderParams) {
        let c = &self.config;
        let dh = c.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let mut dx = d_hidden.clone();

        for ((layer, lc), g) in self
            .layers
            .iter()
            .zip(&cache.layers)
            .zip(grads.layers.iter_mut())
            .rev()
        {
            // feed-forward sublayer
            let d_res2 = nn::layer_norm_backward(&dx, &lc.ln2, &layer.ln2_gain, &mut g.ln2_gain, &mut g.ln2_bias);
            let mut d_ffn = d_res2.clone();
            if let Some(m) = &lc.ffn_mask {
                d_ffn *= m;
            }
            let mut d_act = nn::linear_backward(lc.act.view(), &layer.w2, &d_ffn, &mut g.w2, &mut g.b2);
            ndarray::Zip::from(&mut d_act)
                .and(&lc.pre_act)
                .for_each(|da, &z| *da *= nn::gelu_grad(z));
            let mut d_x1 = nn::linear_backward(lc.x1.view(), &layer.w1, &d_act, &mut g.w1, &mut g.b1);
            d_x1 += &d_res2;

            // attention sublayer
            let d_res1 = nn::layer_norm_backward(&d_x1, &lc.ln1, &layer.ln1_gain, &mut g.ln1_gain, &mut g.ln1_bias);
            let mut d_attn = d_res1.clone();
            if let Some(m) = &lc.attn_mask {
                d_attn *= m;
            }
            let d_context = nn::linear_backward(lc.context.view(), &layer.wo, &d_attn, &mut g.wo, &mut g.bo);
            let len = d_context.nrows();
            let mut dq = Array2::zeros((len, c.d_model));
            let mut dk = Array2::zeros((len, c.d_model));
            let mut dv = Array2::zeros((len, c.d_model));
            for h in 0..c.n_heads {
                let cols = s![.., h * dh..(h + 1) * dh];
                let probs = &lc.probs[h];
                let d_ctx_h = d_context.slice(cols);
                let v_h = lc.v.slice(cols);
                let (dropped, pm) = match &lc.probs_mask {
                    Some(masks) => (probs * &masks[h], Some(&masks[h])),
                    None => (probs.clone(), None),
                };
                dv.slice_mut(cols).assign(&dropped.t().dot(&d_ctx_h));
                let mut d_probs = d_ctx_h.dot(&v_h.t());
                if let Some(m) = pm {
                    d_probs *= m;
                }
                let d_scores = nn::softmax_rows_backward(probs, &d_probs) * scale;
                dq.slice_mut(cols).assign(&d_scores.dot(&lc.k.slice(cols)));
                dk.slice_mut(cols).assign(&d_scores.t().dot(&lc.q.slice(cols)));
            }
            let mut d_in = d_res1;
            d_in += &nn::linear_backward(lc.input.view(), &layer.wq, &dq, &mut g.wq, &mut g.bq);
            d_in += &nn::linear_backward(lc.input.view(), &layer.wk, &dk, &mut g.wk, &mut g.bk);
            d_in += &nn::linear_backward(lc.input.view(), &layer.wv, &dv, &mut g.wv, &mut g.bv);
            dx = d_in;
        }

        if let Some(m) = &cache.emb_mask {
            dx *= m;
        }
        let d_emb = nn::layer_norm_backward(
            &dx,
            &cache.emb_ln,
            &self.emb_ln_gain,
            &mut grads.emb_ln_gain,
            &mut grads.emb_ln_bias,
        );
        for (i, row) in d_emb.axis_iter(Axis(0)).enumerate() {
            let mut t = grads.token_emb.row_mut(cache.token_ids[i]);
            t += &row;
            let mut p = grads.position_emb.row_mut(i);
            p += &row;
            let mut sg = grads.segment_emb.row_mut(cache.segment_ids[i]);
            sg += &row;
        }
    }

    /// Elementwise `self ← m·self + (1−m)·other` over every tensor.
    pub fn momentum_update_from(&mut self, other: &EncoderParams, momentum: f64) -> Result<()> {
        if self.config != other.config {
            return Err(Error::Shape("momentum update between different encoder configs".into()));
        }
        let src = other.tensors();
        let dst = self.tensors_mut();
        crate::params::check_same_layout(&dst, &src)?;
        for (d, s) in dst.into_iter().zip(src) {
            for (k, &q) in d.data.iter_mut().zip(s.data) {
                *k = momentum * *k + (1.0 - momentum) * q;
            }
        }
        Ok(())
    }
}

impl Parameters for EncoderParams {
    fn tensors(&self) -> Vec<TensorView<'_>> {
        let mut out = vec![
            view!("token_emb", self.token_emb, false),
            view!("position_emb", self.position_emb, false),
            view!("segment_emb", self.segment_emb, false),
            view!("emb_ln.gain", self.emb_ln_gain, true),
            view!("emb_ln.bias", self.emb_ln_bias, true),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            let n = |s: &str| format!("layer{i}.{s}");
            out.extend([
                view!(n("wq"), l.wq, false),
                view!(n("bq"), l.bq, true),
                view!(n("wk"), l.wk, false),
                view!(n("bk"), l.bk, true),
                view!(n("wv"), l.wv, false),
                view!(n("bv"), l.bv, true),
                view!(n("wo"), l.wo, false),
                view!(n("bo"), l.bo, true),
                view!(n("ln1.gain"), l.ln1_gain, true),
                view!(n("ln1.bias"), l.ln1_bias, true),
                view!(n("w1"), l.w1, false),
                view!(n("b1"), l.b1, true),
                view!(n("w2"), l.w2, false),
                view!(n("b2"), l.b2, true),
                view!(n("ln2.gain"), l.ln2_gain, true),
                view!(n("ln2.bias"), l.ln2_bias, true),
            ]);
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<TensorViewMut<'_>> {
        let mut out = vec![
            view_mut!("token_emb", self.token_emb, false),
            view_mut!("position_emb", self.position_emb, false),
            view_mut!("segment_emb", self.segment_emb, false),
            view_mut!("emb_ln.gain", self.emb_ln_gain, true),
            view_mut!("emb_ln.bias", self.emb_ln_bias, true),
        ];
        for (i, l) in self.layers.iter_mut().enumerate() {
            let n = |s: &str| format!("layer{i}.{s}");
            out.extend([
                view_mut!(n("wq"), l.wq, false),
                view_mut!(n("bq"), l.bq, true),
                view_mut!(n("wk"), l.wk, false),
                view_mut!(n("bk"), l.bk, true),
                view_mut!(n("wv"), l.wv, false),
                view_mut!(n("bv"), l.bv, true),
                view_mut!(n("wo"), l.wo, false),
                view_mut!(n("bo"), l.bo, true),
                view_mut!(n("ln1.gain"), l.ln1_gain, true),
                view_mut!(n("ln1.bias"), l.ln1_bias, true),
                view_mut!(n("w1"), l.w1, false),
                view_mut!(n("b1"), l.b1, true),
                view_mut!(n("w2"), l.w2, false),
                view_mut!(n("b2"), l.b2, true),
                view_mut!(n("ln2.gain"), l.ln2_gain, true),
                view_mut!(n("ln2.bias"), l.ln2_bias, true),
            ]);
        }
        out
    }
}
