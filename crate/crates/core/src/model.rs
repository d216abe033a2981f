//! The full tracker: shared encoder, fusion layers, and prediction heads.

use std::sync::Arc;

use crate::autodiff::Tape;
use crate::config::ModelConfig;
use crate::error::Result;
use crate::heads::{heads_forward, HeadParams, ScoreMap};
use crate::hmoe::{GateResult, HmoeFuse};
use crate::params::ParamStore;
use crate::rng;
use crate::tokens::{EncoderInput, SegmentLayout, TokenSequence, VideoEncoder};

pub struct TrackerModel {
    config: ModelConfig,
    encoder: VideoEncoder,
    fuse: Vec<HmoeFuse>,
    heads: HeadParams,
}

/// Everything a forward pass produces on the tape.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub map: ScoreMap,
    /// One routing decision per fusion layer.
    pub gates: Vec<GateResult>,
    pub fused: TokenSequence,
}

impl TrackerModel {
    /// Builds the model and registers its parameters, initialized from `seed`.
    pub fn new(config: &ModelConfig, seed: u64) -> Result<(Self, ParamStore)> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut init = rng::stream(seed, "init");
        let encoder = VideoEncoder::new(config, &mut store, &mut init)?;
        let fuse = (0..config.fuse_layers)
            .map(|i| HmoeFuse::new(config, &format!("fuse{i}"), &mut store, &mut init))
            .collect::<Result<Vec<_>>>()?;
        let heads = HeadParams::new(config, &mut store, &mut init)?;
        Ok((
            TrackerModel {
                config: config.clone(),
                encoder,
                fuse,
                heads,
            },
            store,
        ))
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &Arc<SegmentLayout> {
        self.encoder.layout()
    }

    pub fn fuse_layers(&self) -> &[HmoeFuse] {
        &self.fuse
    }

    pub fn encode(&self, tape: &mut Tape, store: &ParamStore, input: &EncoderInput) -> Result<TokenSequence> {
        self.encoder.encode(tape, store, input)
    }

    /// Fusion layers and heads on already-encoded (and possibly masked) tokens.
    pub fn fuse_and_predict(&self, tape: &mut Tape, store: &ParamStore, seq: &TokenSequence) -> Result<ForwardOutput> {
        let mut seq = seq.clone();
        let mut gates = Vec::with_capacity(self.fuse.len());
        for layer in &self.fuse {
            let (out, gate) = layer.forward(tape, store, &seq)?;
            seq = out;
            gates.push(gate);
        }
        let map = heads_forward(tape, store, &self.heads, &seq)?;
        Ok(ForwardOutput { map, gates, fused: seq })
    }

    /// Unmasked forward pass.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, input: &EncoderInput) -> Result<ForwardOutput> {
        let seq = self.encode(tape, store, input)?;
        self.fuse_and_predict(tape, store, &seq)
    }
}
