//! Latent world model with categorical stochastic state. Two decoder layouts
//! share the same encoder and dynamics: per-object decoding with a learned
//! segmentation competition, or a single monolithic image decoder whose depth
//! is chosen so total parameter counts match.

pub mod eval;
pub mod loss;

use crate::config::{ModelConfig, SceneConfig, PROPRIO_DIM};
use crate::error::{Error, Result};
use crate::tensor::{softmax_rows_data, Act, ConvDecoder, ConvEncoder, GruCell, Linear, Mlp, Tensor};
use loss::{balanced_kl, gaussian_nll, mask_cross_entropy, masked_recon_nll};
use ndarray::{Array2, ArrayD, Ix2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Which image decoder the model carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecoderKind {
    /// Per-object decoder with mask competition.
    Object,
    /// Single full-image decoder, capacity-matched to the object path.
    Monolithic,
}

/// How the stochastic latent is realized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleMode {
    /// One-hot draws with a straight-through gradient.
    Sample,
    /// Class probabilities instead of samples; deterministic, used by
    /// gradient checks and evaluation.
    Expected,
}

/// Recurrent latent: deterministic path `h` (B, deter) and stochastic path
/// `z` (B, F*C), either one-hot per factor or expected probabilities.
#[derive(Clone)]
pub struct LatentState {
    pub h: Tensor,
    pub z: Tensor,
    /// Logits that produced `z` (zeros for the initial state).
    pub logits: Tensor,
}

impl LatentState {
    /// Full state feature: h and z concatenated.
    pub fn feature(&self) -> Tensor {
        Tensor::concat_cols(&[&self.h, &self.z])
    }

    pub fn batch_size(&self) -> usize {
        self.h.shape()[0]
    }

    /// Copy with the graph cut; used to seed imagination from replay states.
    pub fn detached(&self) -> LatentState {
        LatentState {
            h: self.h.detach(),
            z: self.z.detach(),
            logits: self.logits.detach(),
        }
    }
}

/// One training batch: `seq_len` ordered steps of `batch_size` parallel
/// sequence windows. All arrays are time-major: element `t` holds the step-t
/// slice for every window.
pub struct SequenceBatch {
    pub seq_len: usize,
    pub batch_size: usize,
    /// Per step: (B, C, H, W) images in [0, 1].
    pub images: Vec<ArrayD<f64>>,
    /// Per step: B*H*W ground-truth slot labels, row-major by batch then pixel.
    pub labels: Vec<Vec<usize>>,
    /// Per step: (B, P) proprioception.
    pub proprios: Vec<ArrayD<f64>>,
    /// Per step: (B, A) action that led into this observation.
    pub actions: Vec<ArrayD<f64>>,
    /// Per step: (B, 1) reward received with this observation.
    pub rewards: Vec<ArrayD<f64>>,
}

/// Scalar loss components. `wm_total` covers the representation objective
/// (dynamics + proprio + object terms); the reward head is trained jointly
/// but tracked separately.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    /// KL term after free-bits clipping.
    pub dyn_kl: f64,
    /// KL term before free-bits clipping.
    pub dyn_kl_raw: f64,
    pub proprio: f64,
    pub obj_mask: f64,
    pub obj_recon: f64,
    pub reward: f64,
}

impl LossBreakdown {
    pub fn wm_total(&self) -> f64 {
        self.dyn_kl + self.proprio + self.obj_mask + self.obj_recon
    }

    pub fn objective_total(&self) -> f64 {
        self.wm_total() + self.reward
    }
}

/// Result of a training forward pass: the breakdown, the scalar objective
/// tensor to backprop, and the in-graph posterior trajectory.
pub struct WorldModelOutput {
    pub loss: LossBreakdown,
    pub objective: Tensor,
    pub posteriors: Vec<LatentState>,
}

/// Analytic parameter-count comparison between the two decoder layouts.
#[derive(Debug, Clone, Copy)]
pub struct CapacityReport {
    pub object_total: usize,
    pub monolithic_total: usize,
    pub monolithic_depth: usize,
    /// |mono - object| / object over total world-model parameters.
    pub relative_gap: f64,
}

fn linear_count(i: usize, o: usize) -> usize {
    i * o + o
}

fn mlp_count(in_dim: usize, hidden: &[usize], out_dim: usize) -> usize {
    let mut total = 0;
    let mut prev = in_dim;
    for &h in hidden {
        total += linear_count(prev, h);
        prev = h;
    }
    total + linear_count(prev, out_dim)
}

fn gru_count(in_dim: usize, hidden: usize) -> usize {
    in_dim * 3 * hidden + hidden * 3 * hidden + 3 * hidden
}

fn conv_encoder_count(in_ch: usize, img: usize, depth: usize, out_dim: usize) -> usize {
    let mut total = 0;
    let mut c = in_ch;
    let mut d = depth;
    let mut size = img;
    while size > 4 {
        total += d * c * 16 + d;
        c = d;
        d *= 2;
        size /= 2;
    }
    total + linear_count(c * 16, out_dim)
}

fn conv_decoder_count(in_dim: usize, out_ch: usize, img: usize, depth: usize) -> usize {
    let n_up = (img / 4).trailing_zeros() as usize;
    let c0 = depth << (n_up - 1);
    let mut total = linear_count(in_dim, c0 * 16);
    let mut c = c0;
    for i in 0..n_up {
        let next = if i + 1 == n_up { out_ch } else { c / 2 };
        total += c * next * 16 + next;
        c = next;
    }
    total
}

fn shared_param_count(cfg: &ModelConfig, scene: &SceneConfig, action_dim: usize) -> usize {
    let state = cfg.state_dim();
    let z_dim = cfg.factors * cfg.classes;
    let embed = cfg.image_feature + cfg.proprio_feature;
    conv_encoder_count(scene.channels(), scene.image_size, cfg.encoder_depth, cfg.image_feature)
        + mlp_count(PROPRIO_DIM, &cfg.mlp_hidden, cfg.proprio_feature)
        + linear_count(z_dim + action_dim, cfg.deter)
        + gru_count(cfg.deter, cfg.deter)
        + mlp_count(cfg.deter, &cfg.mlp_hidden, z_dim)
        + mlp_count(cfg.deter + embed, &cfg.mlp_hidden, z_dim)
        + mlp_count(state, &cfg.mlp_hidden, PROPRIO_DIM)
        + mlp_count(state, &cfg.mlp_hidden, 1)
}

fn object_path_count(cfg: &ModelConfig, scene: &SceneConfig) -> usize {
    let slots = scene.num_slots();
    mlp_count(cfg.state_dim() + slots, &cfg.extractor_hidden, cfg.object_latent)
        + conv_decoder_count(
            cfg.object_latent,
            scene.channels() + 1,
            scene.image_size,
            cfg.object_decoder_depth,
        )
}

/// Pick the monolithic decoder depth whose total world-model parameter count
/// is closest to the object-decoder layout's.
pub fn capacity_report(cfg: &ModelConfig, scene: &SceneConfig, action_dim: usize) -> CapacityReport {
    let shared = shared_param_count(cfg, scene, action_dim);
    let object_total = shared + object_path_count(cfg, scene);
    let mono = |d: usize| shared + conv_decoder_count(cfg.state_dim(), scene.channels(), scene.image_size, d);
    let mut best = (1usize, mono(1));
    for d in 2.. {
        let total = mono(d);
        if total.abs_diff(object_total) < best.1.abs_diff(object_total) {
            best = (d, total);
        }
        if total >= object_total {
            break;
        }
    }
    CapacityReport {
        object_total,
        monolithic_total: best.1,
        monolithic_depth: best.0,
        relative_gap: best.1.abs_diff(object_total) as f64 / object_total as f64,
    }
}

pub struct WorldModel {
    cfg: ModelConfig,
    channels: usize,
    image_size: usize,
    action_dim: usize,
    num_slots: usize,
    kind: DecoderKind,
    image_encoder: ConvEncoder,
    proprio_encoder: Mlp,
    za: Linear,
    gru: GruCell,
    prior_head: Mlp,
    posterior_head: Mlp,
    proprio_decoder: Mlp,
    reward_head: Mlp,
    extractor: Option<Mlp>,
    object_decoder: Option<ConvDecoder>,
    monolithic_decoder: Option<ConvDecoder>,
}

impl WorldModel {
    pub fn new(
        rng: &mut ChaCha8Rng,
        cfg: &ModelConfig,
        scene: &SceneConfig,
        action_dim: usize,
        kind: DecoderKind,
    ) -> Result<WorldModel> {
        if cfg.factors == 0 || cfg.classes < 2 {
            return Err(Error::config("latent needs factors >= 1 and classes >= 2"));
        }
        if !scene.image_size.is_power_of_two() || scene.image_size < 8 {
            return Err(Error::config("image size must be a power of two >= 8"));
        }
        let z_dim = cfg.factors * cfg.classes;
        let state = cfg.state_dim();
        let embed = cfg.image_feature + cfg.proprio_feature;
        let slots = scene.num_slots();

        let image_encoder = ConvEncoder::new(
            rng,
            scene.channels(),
            scene.image_size,
            cfg.encoder_depth,
            cfg.image_feature,
        );
        let proprio_encoder = Mlp::new(rng, PROPRIO_DIM, &cfg.mlp_hidden, cfg.proprio_feature, Act::Elu);
        let za = Linear::new(rng, z_dim + action_dim, cfg.deter);
        let gru = GruCell::new(rng, cfg.deter, cfg.deter);
        let prior_head = Mlp::new(rng, cfg.deter, &cfg.mlp_hidden, z_dim, Act::Elu);
        let posterior_head = Mlp::new(rng, cfg.deter + embed, &cfg.mlp_hidden, z_dim, Act::Elu);
        let proprio_decoder = Mlp::new(rng, state, &cfg.mlp_hidden, PROPRIO_DIM, Act::Elu);
        let reward_head = Mlp::new(rng, state, &cfg.mlp_hidden, 1, Act::Elu);

        let (extractor, object_decoder, monolithic_decoder) = match kind {
            DecoderKind::Object => {
                let extractor = Mlp::new(
                    rng,
                    state + slots,
                    &cfg.extractor_hidden,
                    cfg.object_latent,
                    Act::Elu,
                );
                let decoder = ConvDecoder::new(
                    rng,
                    cfg.object_latent,
                    scene.channels() + 1,
                    scene.image_size,
                    cfg.object_decoder_depth,
                );
                (Some(extractor), Some(decoder), None)
            }
            DecoderKind::Monolithic => {
                let depth = if cfg.capacity_match_tolerance > 0.0 {
                    capacity_report(cfg, scene, action_dim).monolithic_depth
                } else {
                    cfg.monolithic_decoder_depth
                };
                let decoder =
                    ConvDecoder::new(rng, state, scene.channels(), scene.image_size, depth);
                (None, None, Some(decoder))
            }
        };

        Ok(WorldModel {
            cfg: cfg.clone(),
            channels: scene.channels(),
            image_size: scene.image_size,
            action_dim,
            num_slots: slots,
            kind,
            image_encoder,
            proprio_encoder,
            za,
            gru,
            prior_head,
            posterior_head,
            proprio_decoder,
            reward_head,
            extractor,
            object_decoder,
            monolithic_decoder,
        })
    }

    pub fn decoder_kind(&self) -> DecoderKind {
        self.kind
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn state_dim(&self) -> usize {
        self.cfg.state_dim()
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    pub fn num_slots(&self) -> usize {
        self.num_slots
    }

    pub fn image_size(&self) -> usize {
        self.image_size
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// All-zero starting state (the conventional pre-episode latent).
    pub fn initial_state(&self, batch: usize) -> LatentState {
        let z_dim = self.cfg.factors * self.cfg.classes;
        LatentState {
            h: Tensor::zeros(&[batch, self.cfg.deter]),
            z: Tensor::zeros(&[batch, z_dim]),
            logits: Tensor::zeros(&[batch, z_dim]),
        }
    }

    /// Image + proprio embedding: (B, C, H, W) and (B, P) to (B, E).
    pub fn encode(&self, image: &Tensor, proprio: &Tensor) -> Result<Tensor> {
        let ishape = image.shape().to_vec();
        if ishape.len() != 4 || ishape[1] != self.channels || ishape[2] != self.image_size {
            return Err(Error::contract(format!(
                "encode: image shape {ishape:?} does not match the configured scene"
            )));
        }
        if proprio.shape() != [ishape[0], PROPRIO_DIM] {
            return Err(Error::contract("encode: proprio shape mismatch"));
        }
        let img_feat = self.image_encoder.forward(image);
        let prop_feat = self.proprio_encoder.forward(proprio);
        Ok(Tensor::concat_cols(&[&img_feat, &prop_feat]))
    }

    /// Deterministic recurrence shared by posterior and prior.
    fn deter_step(&self, prev: &LatentState, action: &Tensor) -> Tensor {
        let x = self.za.forward(&Tensor::concat_cols(&[&prev.z, action])).elu();
        self.gru.forward(&x, &prev.h)
    }

    fn sample_z(&self, logits: &Tensor, rng: &mut ChaCha8Rng, mode: SampleMode) -> Result<Tensor> {
        if logits.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::numerical("wm", "latent logits are non-finite"));
        }
        let b = logits.shape()[0];
        let (f, c) = (self.cfg.factors, self.cfg.classes);
        let rows = logits.reshape(&[b * f, c]);
        let probs = rows.softmax_rows();
        let z = match mode {
            SampleMode::Expected => probs,
            SampleMode::Sample => {
                let p = probs.data();
                let p2 = p.view().into_dimensionality::<Ix2>().unwrap();
                let mut hard = Array2::<f64>::zeros((b * f, c));
                for r in 0..b * f {
                    let u: f64 = rng.gen();
                    let mut acc = 0.0;
                    let mut pick = c - 1;
                    for j in 0..c {
                        acc += p2[[r, j]];
                        if u < acc {
                            pick = j;
                            break;
                        }
                    }
                    hard[[r, pick]] = 1.0;
                }
                drop(p);
                probs.straight_through(hard.into_dyn())
            }
        };
        Ok(z.reshape(&[b, f * c]))
    }

    /// Filtered transition: returns the posterior state for the next step and
    /// the prior logits over the same step for the dynamics loss.
    pub fn posterior_step(
        &self,
        prev: &LatentState,
        action: &Tensor,
        embed: &Tensor,
        rng: &mut ChaCha8Rng,
        mode: SampleMode,
    ) -> Result<(LatentState, Tensor)> {
        let h = self.deter_step(prev, action);
        let prior_logits = self.prior_head.forward(&h);
        let post_logits = self
            .posterior_head
            .forward(&Tensor::concat_cols(&[&h, embed]));
        let z = self.sample_z(&post_logits, rng, mode)?;
        Ok((
            LatentState {
                h,
                z,
                logits: post_logits,
            },
            prior_logits,
        ))
    }

    /// Open-loop transition used by imagination: no observation.
    pub fn prior_step(
        &self,
        prev: &LatentState,
        action: &Tensor,
        rng: &mut ChaCha8Rng,
        mode: SampleMode,
    ) -> Result<LatentState> {
        let h = self.deter_step(prev, action);
        let logits = self.prior_head.forward(&h);
        let z = self.sample_z(&logits, rng, mode)?;
        Ok(LatentState { h, z, logits })
    }

    /// Object latent for conditioning vector `c` (one-hot over slots).
    pub fn extract_object_latent(&self, feat: &Tensor, c: &[f64]) -> Result<Tensor> {
        if c.len() != self.num_slots {
            return Err(Error::contract(format!(
                "object conditioning must have {} entries, got {}",
                self.num_slots,
                c.len()
            )));
        }
        let ones = c.iter().filter(|&&v| v == 1.0).count();
        if ones != 1 || c.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::contract("object conditioning must be one-hot"));
        }
        let extractor = self
            .extractor
            .as_ref()
            .ok_or_else(|| Error::contract("this model has no object decoder path"))?;
        let b = feat.shape()[0];
        let mut cond = Array2::<f64>::zeros((b, self.num_slots));
        for r in 0..b {
            for (j, &v) in c.iter().enumerate() {
                cond[[r, j]] = v;
            }
        }
        let x = Tensor::concat_cols(&[feat, &Tensor::constant(cond.into_dyn())]);
        Ok(extractor.forward(&x))
    }

    /// Object latent by slot index (0 = background).
    pub fn object_latent(&self, feat: &Tensor, slot: usize) -> Result<Tensor> {
        if slot >= self.num_slots {
            return Err(Error::contract(format!("slot {slot} out of range")));
        }
        let mut c = vec![0.0; self.num_slots];
        c[slot] = 1.0;
        self.extract_object_latent(feat, &c)
    }

    /// Slot decode: reconstruction (B, C, H, W) and weight logits (B, H*W).
    pub fn decode_object(&self, s_obj: &Tensor) -> Result<(Tensor, Tensor)> {
        let decoder = self
            .object_decoder
            .as_ref()
            .ok_or_else(|| Error::contract("this model has no object decoder path"))?;
        let out = decoder.forward(s_obj);
        let b = out.shape()[0];
        let (c, hw) = (self.channels, self.image_size * self.image_size);
        let flat = out.reshape(&[b, (c + 1) * hw]);
        let recon = flat.slice_cols(0, c * hw).reshape(&[b, c, self.image_size, self.image_size]);
        let weight = flat.slice_cols(c * hw, (c + 1) * hw);
        Ok((recon, weight))
    }

    /// Monolithic decode: full image (B, C, H, W).
    pub fn decode_monolithic(&self, feat: &Tensor) -> Result<Tensor> {
        let decoder = self
            .monolithic_decoder
            .as_ref()
            .ok_or_else(|| Error::contract("this model has no monolithic decoder"))?;
        Ok(decoder.forward(feat))
    }

    pub fn decode_proprio(&self, feat: &Tensor) -> Tensor {
        self.proprio_decoder.forward(feat)
    }

    pub fn predict_reward(&self, feat: &Tensor) -> Tensor {
        self.reward_head.forward(feat)
    }

    /// Per-pixel softmax over slot weight maps: (B, H*W) logits per slot to
    /// (B*H*W, S) probabilities.
    pub fn compose_mask(weights: &[Tensor]) -> Result<Tensor> {
        Ok(Self::stack_weight_logits(weights)?.softmax_rows())
    }

    fn stack_weight_logits(weights: &[Tensor]) -> Result<Tensor> {
        if weights.is_empty() {
            return Err(Error::contract("compose_mask needs at least one slot"));
        }
        let shape = weights[0].shape().to_vec();
        let rows = shape.iter().product::<usize>();
        let mut cols = Vec::with_capacity(weights.len());
        for w in weights {
            if w.shape() != shape {
                return Err(Error::contract("compose_mask: slot shapes differ"));
            }
            cols.push(w.reshape(&[rows, 1]));
        }
        let refs: Vec<&Tensor> = cols.iter().collect();
        Ok(Tensor::concat_cols(&refs))
    }

    /// Joint loss over a sequence batch. Gradients flow into every parameter;
    /// the returned posteriors stay connected to the graph.
    pub fn world_model_loss(
        &self,
        batch: &SequenceBatch,
        rng: &mut ChaCha8Rng,
        mode: SampleMode,
    ) -> Result<WorldModelOutput> {
        let (l, b) = (batch.seq_len, batch.batch_size);
        if l == 0 || b == 0 {
            return Err(Error::contract("empty sequence batch"));
        }
        let hw = self.image_size * self.image_size;

        let mut state = self.initial_state(b);
        let mut posteriors = Vec::with_capacity(l);
        let mut kl_terms: Option<Tensor> = None;
        let mut proprio_terms: Option<Tensor> = None;
        let mut reward_terms: Option<Tensor> = None;
        let mut mask_terms: Option<Tensor> = None;
        let mut recon_terms: Option<Tensor> = None;

        let add_to = |slot: &mut Option<Tensor>, term: Tensor| {
            *slot = Some(match slot.take() {
                None => term,
                Some(acc) => acc.add(&term),
            });
        };

        for t in 0..l {
            let image = Tensor::constant(batch.images[t].clone());
            let proprio = Tensor::constant(batch.proprios[t].clone());
            let action = Tensor::constant(batch.actions[t].clone());
            let embed = self.encode(&image, &proprio)?;
            let (post, prior_logits) = self.posterior_step(&state, &action, &embed, rng, mode)?;

            // Dynamics: balanced KL summed over factors, mean over batch.
            let post_rows = post.logits.reshape(&[b * self.cfg.factors, self.cfg.classes]);
            let prior_rows = prior_logits.reshape(&[b * self.cfg.factors, self.cfg.classes]);
            let kl = balanced_kl(&post_rows, &prior_rows, self.cfg.kl_balance)
                .mean_all()
                .mul_scalar(self.cfg.factors as f64);
            add_to(&mut kl_terms, kl);

            let feat = post.feature();
            add_to(
                &mut proprio_terms,
                gaussian_nll(&self.decode_proprio(&feat), &batch.proprios[t]),
            );
            add_to(
                &mut reward_terms,
                gaussian_nll(&self.predict_reward(&feat), &batch.rewards[t]),
            );

            match self.kind {
                DecoderKind::Object => {
                    let mut weights = Vec::with_capacity(self.num_slots);
                    let mut recons = Vec::with_capacity(self.num_slots);
                    for slot in 0..self.num_slots {
                        let s_obj = self.object_latent(&feat, slot)?;
                        let (recon, weight) = self.decode_object(&s_obj)?;
                        weights.push(weight);
                        recons.push(recon);
                    }
                    let logits = Self::stack_weight_logits(&weights)?;
                    add_to(&mut mask_terms, mask_cross_entropy(&logits, &batch.labels[t])?);

                    for (slot, recon) in recons.iter().enumerate() {
                        let mut mask = Array2::<f64>::zeros((b, hw));
                        for bi in 0..b {
                            for p in 0..hw {
                                if batch.labels[t][bi * hw + p] == slot {
                                    mask[[bi, p]] = 1.0;
                                }
                            }
                        }
                        if let Some(nll) = masked_recon_nll(recon, &batch.images[t], &mask)? {
                            add_to(&mut recon_terms, nll);
                        }
                    }
                }
                DecoderKind::Monolithic => {
                    let recon = self.decode_monolithic(&feat)?;
                    let full = Array2::<f64>::ones((b, hw));
                    let nll = masked_recon_nll(&recon, &batch.images[t], &full)?
                        .expect("full mask is never empty");
                    add_to(&mut recon_terms, nll);
                }
            }

            posteriors.push(post.clone());
            state = post;
        }

        let over_l = 1.0 / l as f64;
        let kl_raw = kl_terms.expect("seq_len > 0").mul_scalar(over_l);
        let kl_clipped = kl_raw.clamp_min_scalar(self.cfg.free_bits);
        let proprio = proprio_terms.unwrap().mul_scalar(over_l);
        let reward = reward_terms.unwrap().mul_scalar(over_l);
        let obj_recon = recon_terms.unwrap().mul_scalar(over_l);
        let obj_mask = match mask_terms {
            Some(t) => t.mul_scalar(over_l),
            None => Tensor::scalar(0.0),
        };

        let breakdown = LossBreakdown {
            dyn_kl: kl_clipped.value(),
            dyn_kl_raw: kl_raw.value(),
            proprio: proprio.value(),
            obj_mask: obj_mask.value(),
            obj_recon: obj_recon.value(),
            reward: reward.value(),
        };
        for (name, v) in [
            ("dynamics KL", breakdown.dyn_kl),
            ("proprio NLL", breakdown.proprio),
            ("mask CE", breakdown.obj_mask),
            ("reconstruction NLL", breakdown.obj_recon),
            ("reward NLL", breakdown.reward),
        ] {
            if !v.is_finite() {
                return Err(Error::numerical("wm", format!("{name} is non-finite")));
            }
        }

        let objective = kl_clipped
            .add(&proprio)
            .add(&obj_mask)
            .add(&obj_recon)
            .add(&reward);
        Ok(WorldModelOutput {
            loss: breakdown,
            objective,
            posteriors,
        })
    }

    /// Full-image prediction for evaluation (no gradients): the object path
    /// composes slot reconstructions with soft mask weights; the monolithic
    /// path decodes directly. Returns (B, C, H, W) data.
    pub fn predict_image(&self, feat: &Tensor) -> Result<ArrayD<f64>> {
        let b = feat.shape()[0];
        let (c, hw) = (self.channels, self.image_size * self.image_size);
        match self.kind {
            DecoderKind::Monolithic => Ok(self.decode_monolithic(feat)?.data().clone()),
            DecoderKind::Object => {
                let mut recons = Vec::new();
                let mut weights = Vec::new();
                for slot in 0..self.num_slots {
                    let s_obj = self.object_latent(feat, slot)?;
                    let (recon, weight) = self.decode_object(&s_obj)?;
                    recons.push(recon.data().clone());
                    weights.push(weight.data().clone());
                }
                // (B*H*W, S) softmax over slots
                let mut logits = Array2::<f64>::zeros((b * hw, self.num_slots));
                for (s, w) in weights.iter().enumerate() {
                    let flat = w.view().into_shape_with_order(b * hw).unwrap();
                    for r in 0..b * hw {
                        logits[[r, s]] = flat[r];
                    }
                }
                let probs = softmax_rows_data(&logits.into_dyn());
                let mut out = ArrayD::<f64>::zeros(vec![b, c, self.image_size, self.image_size]);
                for (s, recon) in recons.iter().enumerate() {
                    let r4 = recon.view().into_shape_with_order((b, c, hw)).unwrap();
                    for bi in 0..b {
                        for ci in 0..c {
                            for p in 0..hw {
                                let m = probs[[bi * hw + p, s]];
                                out[[bi, ci, p / self.image_size, p % self.image_size]] +=
                                    m * r4[[bi, ci, p]];
                            }
                        }
                    }
                }
                Ok(out)
            }
        }
    }

    /// Hard per-pixel slot assignment from the current model at `feat`.
    pub fn predict_segmentation(&self, feat: &Tensor) -> Result<Array2<usize>> {
        let b = feat.shape()[0];
        let hw = self.image_size * self.image_size;
        let mut weights = Vec::new();
        for slot in 0..self.num_slots {
            let s_obj = self.object_latent(feat, slot)?;
            let (_, weight) = self.decode_object(&s_obj)?;
            weights.push(weight.data().clone());
        }
        let mut out = Array2::<usize>::zeros((b, hw));
        for bi in 0..b {
            for p in 0..hw {
                let mut best = (f64::NEG_INFINITY, 0usize);
                for (s, w) in weights.iter().enumerate() {
                    let flat = w.view().into_shape_with_order(b * hw).unwrap();
                    let v = flat[bi * hw + p];
                    if v > best.0 {
                        best = (v, s);
                    }
                }
                out[[bi, p]] = best.1;
            }
        }
        Ok(out)
    }

    /// Stable-named parameter registry for the optimizer and checkpoints.
    pub fn params(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.image_encoder.params("wm.enc_img", &mut out);
        self.proprio_encoder.params("wm.enc_prop", &mut out);
        self.za.params("wm.za", &mut out);
        self.gru.params("wm.gru", &mut out);
        self.prior_head.params("wm.prior", &mut out);
        self.posterior_head.params("wm.post", &mut out);
        self.proprio_decoder.params("wm.dec_prop", &mut out);
        self.reward_head.params("wm.reward", &mut out);
        if let Some(e) = &self.extractor {
            e.params("wm.extractor", &mut out);
        }
        if let Some(d) = &self.object_decoder {
            d.params("wm.dec_obj", &mut out);
        }
        if let Some(d) = &self.monolithic_decoder {
            d.params("wm.dec_mono", &mut out);
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|(_, t)| t.len()).sum()
    }
}
