//! Encoder, CTC head and attention decoder assembled from a [`ModelConfig`].

use crate::autograd::Var;
use crate::config::ModelConfig;
use crate::ctc::{check_labels, greedy_decode};
use crate::decoder::{att_loss, Decoder};
use crate::encoder::{Encoder, EncoderOutput, ForwardOptions};
use crate::error::Result;
use crate::loss::{joint_loss_var, LossBreakdown};
use crate::nn::{Builder, Linear, ParamStore, Pass};
use crate::rng::RandomSource;

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub encoder: Encoder,
    pub ctc_head: Linear,
    pub decoder: Decoder,
}

impl Model {
    pub fn new(b: &mut Builder, cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let encoder = Encoder::new(b, &cfg.name, &cfg.encoder);
        let ctc_head = {
            let mut s = b.scope("ctc");
            Linear::new(&mut s, "out", cfg.encoder.d, cfg.vocab, true)
        };
        let decoder = Decoder::new(b, &cfg.decoder, cfg.decoder_classes());
        Ok(Self {
            cfg: cfg.clone(),
            encoder,
            ctc_head,
            decoder,
        })
    }

    /// Build and initialize from `seed`.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<(Self, ParamStore)> {
        let mut store = ParamStore::new();
        let mut rng = RandomSource::new(seed);
        let model = Self::new(&mut Builder::new(&mut store, Some(&mut rng)), cfg)?;
        Ok((model, store))
    }

    /// Register shapes only; nothing is allocated.
    pub fn shape_only(cfg: &ModelConfig) -> Result<(Self, ParamStore)> {
        let mut store = ParamStore::new();
        let model = Self::new(&mut Builder::new(&mut store, None), cfg)?;
        Ok((model, store))
    }

    pub fn encode(
        &self,
        p: &mut Pass,
        feats: &Var,
        opts: &ForwardOptions,
    ) -> Result<EncoderOutput> {
        self.encoder.forward_opts(p, feats, opts)
    }

    /// Per-frame CTC log-probabilities `[M × V]`.
    pub fn ctc_log_probs(&self, p: &Pass, h: &Var) -> Result<Var> {
        self.ctc_head.forward(p, h)?.log_softmax(1)
    }

    pub fn loss(
        &self,
        p: &mut Pass,
        feats: &Var,
        labels: &[usize],
    ) -> Result<(Var, LossBreakdown)> {
        self.loss_with(p, feats, labels, &ForwardOptions::default())
    }

    pub fn loss_with(
        &self,
        p: &mut Pass,
        feats: &Var,
        labels: &[usize],
        opts: &ForwardOptions,
    ) -> Result<(Var, LossBreakdown)> {
        check_labels(labels, self.cfg.vocab)?;
        let enc = self.encode(p, feats, opts)?;
        let h = if enc.valid < enc.h.shape()[0] {
            enc.h.narrow(0, 0, enc.valid)?
        } else {
            enc.h.clone()
        };
        let l_ctc = self.ctc_log_probs(p, &h)?.ctc_loss(labels)?;
        let l_att = att_loss(
            &self.decoder,
            p,
            &h,
            enc.valid,
            labels,
            self.cfg.sos_eos(),
            self.cfg.decoder.label_smoothing,
        )?;
        joint_loss_var(&l_ctc, &l_att, self.cfg.ctc_weight)
    }

    /// Greedy CTC transcription.
    pub fn recognize(&self, p: &mut Pass, feats: &Var) -> Result<Vec<usize>> {
        let enc = self.encode(p, feats, &ForwardOptions::default())?;
        let h = enc.h.narrow(0, 0, enc.valid)?;
        Ok(greedy_decode(self.ctc_log_probs(p, &h)?.value()))
    }
}
