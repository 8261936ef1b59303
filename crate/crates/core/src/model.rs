//! The query-side model (encoder + CRF head), its per-anchor loss and the
//! inference wrapper used by evaluation.

use ndarray::Array2;
use rand::RngCore;

use crate::contrast::{info_nce_with_grad, Representation};
use crate::corpus::Label;
use crate::crf::CrfParams;
use crate::encoder::{EncoderConfig, EncoderParams};
use crate::error::Result;
use crate::eval::SlotTagger;
use crate::params::{Parameters, TensorView, TensorViewMut};
use crate::tokenizer::{encode_query, EncodedQuery, Vocab};

/// Trainable parameters: query encoder θ_q plus the CRF head.
#[derive(Debug, Clone, PartialEq)]
pub struct TaggerParams {
    pub encoder: EncoderParams,
    pub crf: CrfParams,
}

impl TaggerParams {
    pub fn init(config: EncoderConfig, encoder_seed: u64, crf_seed: u64) -> Result<Self> {
        Ok(TaggerParams {
            encoder: EncoderParams::init(config, encoder_seed)?,
            crf: CrfParams::init(config.d_model, crf_seed),
        })
    }

    pub fn zeros(config: EncoderConfig) -> Self {
        TaggerParams {
            encoder: EncoderParams::zeros(config),
            crf: CrfParams::zeros(config.d_model),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.encoder.config)
    }

    pub fn predict_encoded(&self, input: &EncodedQuery) -> Result<Vec<Label>> {
        let out = self.encoder.forward_eval(input)?;
        let e = self.crf.emissions(&out.word_hidden)?;
        self.crf.viterbi(&e)
    }
}

impl Parameters for TaggerParams {
    fn tensors(&self) -> Vec<TensorView<'_>> {
        let mut out = self.encoder.tensors();
        for t in &mut out {
            t.name.insert_str(0, "encoder.");
        }
        out.extend(self.crf.tensors().into_iter().map(|mut t| {
            t.name.insert_str(0, "crf.");
            t
        }));
        out
    }

    fn tensors_mut(&mut self) -> Vec<TensorViewMut<'_>> {
        let mut out = self.encoder.tensors_mut();
        for t in &mut out {
            t.name.insert_str(0, "encoder.");
        }
        out.extend(self.crf.tensors_mut().into_iter().map(|mut t| {
            t.name.insert_str(0, "crf.");
            t
        }));
        out
    }
}

/// Viterbi tagging with a fixed vocabulary.
pub struct NeuralTagger<'a> {
    pub params: &'a TaggerParams,
    pub vocab: &'a Vocab,
}

impl SlotTagger for NeuralTagger<'_> {
    fn predict(&self, slot_type: &str, words: &[String]) -> Result<Vec<Label>> {
        let input = encode_query(self.vocab, slot_type, words, self.params.encoder.config.max_len)?;
        self.params.predict_encoded(&input)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossTerms {
    pub bio: f64,
    /// `None` when the anchor has no contrastive keys.
    pub cl: Option<f64>,
}

/// Where to accumulate gradients, and the weight of each loss term.
pub struct GradSink<'a> {
    pub grads: &'a mut TaggerParams,
    pub bio_scale: f64,
    pub cl_scale: f64,
}

/// CRF NLL of `labels` and, given key representations (positive first),
/// InfoNCE of the anchor's normalized `[CLS]` state. With a sink, adds
/// `bio_scale·∇bio + cl_scale·∇cl` into it.
pub fn anchor_loss(
    params: &TaggerParams,
    anchor: &EncodedQuery,
    labels: &[Label],
    keys: Option<(&[Representation], usize)>,
    tau: f64,
    dropout: Option<&mut dyn RngCore>,
    sink: Option<GradSink<'_>>,
) -> Result<LossTerms> {
    let (out, cache) = params.encoder.forward_cached(anchor, dropout)?;
    let emissions = params.crf.emissions(&out.word_hidden)?;
    let (bio, crf_grad) = params.crf.nll_with_grad(&emissions, labels)?;

    let mut cl = None;
    let mut d_cls = None;
    if let Some((keys, pos)) = keys {
        let q = Representation::normalize(out.cls.view())?;
        let (loss, dq) = info_nce_with_grad(&q, keys, pos, tau)?;
        cl = Some(loss);
        d_cls = Some(q.backward(out.cls.view(), &dq));
    }

    if let Some(sink) = sink {
        let mut d_hidden = Array2::zeros(out.all_hidden.raw_dim());
        if sink.bio_scale != 0.0 {
            let d_emissions = &crf_grad.emissions * sink.bio_scale;
            let d_words = params
                .crf
                .emissions_backward(&out.word_hidden, &d_emissions, &mut sink.grads.crf);
            params.crf.add_score_grads(&crf_grad, sink.bio_scale, &mut sink.grads.crf);
            for (row, &pos) in d_words.rows().into_iter().zip(&anchor.utterance_positions) {
                let mut target = d_hidden.row_mut(pos);
                target += &row;
            }
        }
        if let Some(d_cls) = d_cls {
            if sink.cl_scale != 0.0 {
                let mut target = d_hidden.row_mut(0);
                target.scaled_add(sink.cl_scale, &d_cls);
            }
        }
        params.encoder.backward(&cache, &d_hidden, &mut sink.grads.encoder);
    }
    Ok(LossTerms { bio, cl })
}
