use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::io::{read_tensors, write_tensors};
use crate::model::{FeatureExtractor, GridPrediction, ModelConfig};
use crate::nn::{sinusoidal_pe_1d, sinusoidal_pe_2d, AttentionBlock, Linear, Mlp};
use crate::params::{ParamGroup, ParamStore};
use crate::tensor::Tensor;

/// Satellite-aligned fusion tokens `[N²×D]` for sequence step `step`.
#[derive(Clone, Copy, Debug)]
pub struct FusionFeature {
    pub tokens: Var,
    pub step: usize,
}

/// Memory carried from one step to the next.
#[derive(Clone, Copy, Debug)]
pub struct HiddenState {
    pub tokens: Var,
    pub step: usize,
}

/// Graph nodes produced by the prediction heads.
#[derive(Clone, Copy, Debug)]
pub struct HeadOutput {
    /// `[N²]` cell logits.
    pub logits: Var,
    /// `[2]` offsets in `(0, 1)`.
    pub offsets: Var,
}

impl HeadOutput {
    pub fn prediction(&self, g: &Graph) -> GridPrediction {
        let o = g.value(self.offsets).data();
        GridPrediction {
            logits: g.value(self.logits).data().to_vec(),
            offsets: (o[0], o[1]),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct StepOutput {
    pub heads: HeadOutput,
    pub fusion: FusionFeature,
    /// The tensor fed to the heads, stored for the next step.
    pub hidden: HiddenState,
    /// Attention node of the temporal block, when it ran.
    pub temporal_weights: Option<Var>,
}

/// Whether steps after the first go through the temporal block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Recurrence {
    Temporal,
    /// Every step predicts from its own fusion feature, as the single-frame model does.
    Independent,
}

#[derive(Clone, Debug)]
struct FusionRound {
    sab_ground: AttentionBlock,
    sab_sat: AttentionBlock,
    cab: AttentionBlock,
}

/// The sequential cross-view localizer and its parameters.
#[derive(Clone, Debug)]
pub struct Localizer {
    pub config: ModelConfig,
    pub params: ParamStore,
    ground_extractor: FeatureExtractor,
    sat_extractor: FeatureExtractor,
    ground_proj: Linear,
    sat_proj: Linear,
    rounds: Vec<FusionRound>,
    final_cab: AttentionBlock,
    temporal: AttentionBlock,
    cls_head: Mlp,
    reg_head: Mlp,
    pe_sat: Tensor,
}

impl Localizer {
    /// Builds a model with freshly initialized weights. The same seed always
    /// gives the same weights.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let (d, h, f) = (config.dim, config.heads, config.ffn_hidden);
        let rng = &mut rng;
        let s = &mut store;

        let ground_extractor = FeatureExtractor::new(s, rng, "ground_extractor", &config)?;
        let sat_extractor = FeatureExtractor::new(s, rng, "sat_extractor", &config)?;
        let ground_proj = Linear::new(s, rng, "ground_proj", config.channels, d, ParamGroup::Other)?;
        let sat_proj = Linear::new(s, rng, "sat_proj", config.channels, d, ParamGroup::Other)?;
        let rounds = (0..config.fusion_rounds)
            .map(|i| {
                Ok(FusionRound {
                    sab_ground: AttentionBlock::new_self(s, rng, &format!("fusion.{i}.sab_ground"), d, h, f)?,
                    sab_sat: AttentionBlock::new_self(s, rng, &format!("fusion.{i}.sab_sat"), d, h, f)?,
                    cab: AttentionBlock::new_cross(s, rng, &format!("fusion.{i}.cab"), d, h, f)?,
                })
            })
            .collect::<Result<_>>()?;
        let final_cab = AttentionBlock::new_cross(s, rng, "fusion.final_cab", d, h, f)?;
        let temporal = AttentionBlock::new_cross(s, rng, "temporal", d, h, f)?;
        let cls_head = Mlp::new(s, rng, "cls_head", &[d, d, d / 2, 1])?;
        let reg_head = Mlp::new(s, rng, "reg_head", &[d, d, d / 2, 2])?;
        let pe_sat = sinusoidal_pe_2d(config.grid, d)?;
        Ok(Localizer {
            config,
            params: store,
            ground_extractor,
            sat_extractor,
            ground_proj,
            sat_proj,
            rounds,
            final_cab,
            temporal,
            cls_head,
            reg_head,
            pe_sat,
        })
    }

    pub fn sat_encoding(&self) -> &Tensor {
        &self.pe_sat
    }

    /// Satellite tokens `[N²×D]` after extraction and the 1×1 projection.
    pub fn encode_satellite(&self, g: &mut Graph, sat: &Tensor) -> Result<Var> {
        let feats = self.sat_extractor.extract(g, sat)?;
        let n = self.config.grid;
        if feats.height != n || feats.width != n {
            return Err(Error::shape(format!(
                "satellite features are {}×{}, expected {n}×{n}",
                feats.height, feats.width
            )));
        }
        self.sat_proj.forward(g, feats.tokens)
    }

    /// Ground tokens `[(H_g·W_g)×D]`.
    pub fn encode_ground(&self, g: &mut Graph, ground: &Tensor) -> Result<Var> {
        if self.config.extractor == crate::model::ExtractorKind::Conv {
            let [h, w] = self.config.ground_px;
            if ground.shape()[..2] != [h, w] {
                return Err(Error::shape(format!(
                    "ground image is {:?}, config expects {h}×{w}",
                    &ground.shape()[..ground.ndim().min(2)]
                )));
            }
        }
        let feats = self.ground_extractor.extract(g, ground)?;
        self.ground_proj.forward(g, feats.tokens)
    }

    pub fn extract_and_project(&self, g: &mut Graph, ground: &Tensor, sat: &Tensor) -> Result<(Var, Var)> {
        let gt = self.encode_ground(g, ground)?;
        let st = self.encode_satellite(g, sat)?;
        Ok((gt, st))
    }

    fn encodings(&self, g: &mut Graph, ground_len: usize) -> Result<(Option<Var>, Option<Var>)> {
        if !self.config.fusion_pe {
            return Ok((None, None));
        }
        let pe_g = g.input(sinusoidal_pe_1d(ground_len, self.config.dim)?);
        let pe_s = g.input(self.pe_sat.clone());
        Ok((Some(pe_g), Some(pe_s)))
    }

    /// Fusion network: `M` rounds of SAB(ground), SAB(satellite), CAB(satellite ← ground),
    /// then a final CAB.
    pub fn fuse(&self, g: &mut Graph, ground: Var, sat: Var, step: usize) -> Result<FusionFeature> {
        let ground_len = g.shape(ground)[0];
        let (pe_g, pe_s) = self.encodings(g, ground_len)?;
        let (mut gr, mut st) = (ground, sat);
        for round in &self.rounds {
            gr = round.sab_ground.forward_self(g, gr, pe_g)?;
            st = round.sab_sat.forward_self(g, st, pe_s)?;
            st = round.cab.forward_cross(g, st, gr, pe_s, pe_g)?;
        }
        let tokens = self.final_cab.forward_cross(g, st, gr, pe_s, pe_g)?;
        Ok(FusionFeature { tokens, step })
    }

    /// Temporal attention: queries from the current fusion feature, keys and
    /// values from the previous hidden state, grid encodings on both.
    pub fn tam(&self, g: &mut Graph, fusion: FusionFeature, hidden: HiddenState) -> Result<(Var, Var)> {
        if hidden.step + 1 != fusion.step {
            return Err(Error::Sequencing(format!(
                "hidden state from step {} cannot feed step {}",
                hidden.step, fusion.step
            )));
        }
        if g.shape(fusion.tokens) != g.shape(hidden.tokens) {
            return Err(Error::shape(format!(
                "fusion {:?} and hidden {:?} differ",
                g.shape(fusion.tokens),
                g.shape(hidden.tokens)
            )));
        }
        let pe = g.input(self.pe_sat.clone());
        let att = self
            .temporal
            .forward_cross_traced(g, fusion.tokens, hidden.tokens, Some(pe), Some(pe))?;
        Ok((att.output, att.weights))
    }

    pub fn predict_heads(&self, g: &mut Graph, feat: Var) -> Result<HeadOutput> {
        let cells = self.config.num_cells();
        let scores = self.cls_head.forward(g, feat)?;
        let logits = g.reshape(scores, &[cells])?;
        let pooled = g.mean_axis(feat, 0)?;
        let pooled = g.reshape(pooled, &[1, self.config.dim])?;
        let raw = self.reg_head.forward(g, pooled)?;
        let squashed = g.sigmoid(raw);
        let offsets = g.reshape(squashed, &[2])?;
        Ok(HeadOutput { logits, offsets })
    }

    /// One sequence step. `sat` are the encoded satellite tokens, shared by
    /// every step of a sequence. The first step is the one without `prev`.
    pub fn step(
        &self,
        g: &mut Graph,
        sat: Var,
        ground: &Tensor,
        prev: Option<HiddenState>,
        recurrence: Recurrence,
    ) -> Result<StepOutput> {
        let ground_tokens = self.encode_ground(g, ground)?;
        self.step_tokens(g, sat, ground_tokens, prev, recurrence)
    }

    pub fn step_tokens(
        &self,
        g: &mut Graph,
        sat: Var,
        ground: Var,
        prev: Option<HiddenState>,
        recurrence: Recurrence,
    ) -> Result<StepOutput> {
        let t = prev.map_or(0, |h| h.step + 1);
        let fusion = self.fuse(g, ground, sat, t)?;
        let (feat, temporal_weights) = match (prev, recurrence) {
            (Some(h), Recurrence::Temporal) => {
                let (out, w) = self.tam(g, fusion, h)?;
                (out, Some(w))
            }
            _ => (fusion.tokens, None),
        };
        let heads = self.predict_heads(g, feat)?;
        Ok(StepOutput {
            heads,
            fusion,
            hidden: HiddenState { tokens: feat, step: t },
            temporal_weights,
        })
    }

    /// Runs a whole sequence on one graph, hidden state threaded through.
    pub fn run_sequence(
        &self,
        g: &mut Graph,
        sat: &Tensor,
        frames: &[Tensor],
        recurrence: Recurrence,
    ) -> Result<Vec<StepOutput>> {
        if frames.is_empty() {
            return Err(Error::Empty("frame list".into()));
        }
        let sat_tokens = self.encode_satellite(g, sat)?;
        let mut prev = None;
        let mut outputs = Vec::with_capacity(frames.len());
        for frame in frames {
            let out = self.step(g, sat_tokens, frame, prev, recurrence)?;
            prev = Some(out.hidden);
            outputs.push(out);
        }
        Ok(outputs)
    }

    /// Inference over a sequence: one prediction per frame.
    pub fn predict_sequence(&self, sat: &Tensor, frames: &[Tensor], recurrence: Recurrence) -> Result<Vec<GridPrediction>> {
        let mut g = Graph::with_params(&self.params);
        let outs = self.run_sequence(&mut g, sat, frames, recurrence)?;
        Ok(outs.iter().map(|o| o.heads.prediction(&g)).collect())
    }

    /// Zeroes the temporal block's value path and FFN output, which makes it
    /// pass the fusion feature through unchanged.
    pub fn zero_temporal_branches(&mut self) {
        self.temporal.zero_residual_branches(&mut self.params);
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let named: Vec<(&str, &Tensor)> = self.params.iter().map(|(_, p)| (p.name.as_str(), &p.value)).collect();
        write_tensors(path, &named)
    }

    /// Loads weights saved by [`Localizer::save`]. Every parameter must be
    /// present with a matching shape.
    pub fn load(&mut self, path: &Path) -> Result<()> {
        let tensors = read_tensors(path)?;
        if tensors.len() != self.params.len() {
            let missing: Vec<_> = self
                .params
                .iter()
                .map(|(_, p)| p.name.as_str())
                .filter(|n| !tensors.iter().any(|(m, _)| m == n))
                .collect();
            if let Some(name) = missing.first() {
                return Err(Error::Checkpoint(format!("checkpoint lacks parameter `{name}`")));
            }
        }
        for (name, value) in tensors {
            self.params.assign(&name, value)?;
        }
        Ok(())
    }
}
