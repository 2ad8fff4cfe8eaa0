//! User-item matching, popularity representation and the two explanation
//! scoring heads.
//!
//! The real-world head sees matching and popularity; the counterfactual head
//! sees popularity only, which realizes "matching held constant" structurally.
//! Debiased selection subtracts a multiple of the latter from the former.

mod buckets;
mod train;

pub use buckets::BucketLayout;
pub use train::{label, random_model_grad_check, LabeledSample, LossParts, TrainConfig, TrainReport, TrainingPool};

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::{bce_with_logit, 
    concat, hadamard, read_records, sigmoid, write_records, Activation, Dense, Mlp, MlpSpec,
    Tape, TensorError,
};

/// Reference popularity for `do(p*)`: the midpoint of the normalized scale.
pub const REFERENCE_POPULARITY: f64 = 0.5;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("unknown user `{0}`")]
    UnknownUser(String),
    #[error("unknown item `{0}`")]
    UnknownItem(String),
    #[error("unknown explanation ordinal {0}")]
    UnknownExplanation(usize),
    #[error("popularity score {0} outside [0, 1]")]
    PopularityOutOfRange(f64),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("candidate explanation set too small to draw negatives: {0}")]
    CandidateSetTooSmall(String),
    #[error("empty training set")]
    EmptyTrainingSet,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_gmf: usize,
    pub d_mlp: usize,
    pub d_pop: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub buckets: usize,
    /// Embedding tables are initialized uniformly in `(-init_scale, init_scale)`.
    pub init_scale: f32,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_gmf: 32,
            d_mlp: 32,
            d_pop: 16,
            hidden: vec![64, 32],
            activation: Activation::Relu,
            buckets: 10,
            init_scale: 0.05,
        }
    }
}

impl ModelConfig {
    fn validate(&self) -> Result<(), ModelError> {
        if self.d_gmf == 0 || self.d_mlp == 0 || self.d_pop == 0 {
            return Err(ModelError::InvalidConfig("dimensions must be positive".into()));
        }
        BucketLayout::new(self.buckets)?;
        Ok(())
    }

    fn spec(&self, input: usize, output: usize) -> Result<MlpSpec, ModelError> {
        let mut widths = vec![input];
        widths.extend_from_slice(&self.hidden);
        widths.push(output);
        Ok(MlpSpec::new(widths, self.activation)?)
    }
}

/// Every learned tensor. Gradients use the same type.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub user_gmf: Dense,
    pub item_gmf: Dense,
    pub user_mlp: Dense,
    pub item_mlp: Dense,
    pub buckets: Dense,
    pub expl_gmf: Dense,
    pub expl_mlp: Dense,
    /// `[a^M_u ; b^M_i] -> m^M`
    pub match_tower: Mlp,
    /// `[m^G ; v^n] -> s^G`
    pub real_gmf: Mlp,
    /// `[m^M ; v^n] -> s^M`
    pub real_mlp: Mlp,
    /// `[s^M ; c^M_e] -> d_mlp`
    pub fusion: Mlp,
    /// `1 x (d_gmf + d_mlp)`, no bias.
    pub fusion_weight: Dense,
    /// `v^n -> logit`
    pub conter: Mlp,
}

impl Params {
    pub fn zeros_like(&self) -> Self {
        Self {
            user_gmf: self.user_gmf.zeros_like(),
            item_gmf: self.item_gmf.zeros_like(),
            user_mlp: self.user_mlp.zeros_like(),
            item_mlp: self.item_mlp.zeros_like(),
            buckets: self.buckets.zeros_like(),
            expl_gmf: self.expl_gmf.zeros_like(),
            expl_mlp: self.expl_mlp.zeros_like(),
            match_tower: self.match_tower.zeros_like(),
            real_gmf: self.real_gmf.zeros_like(),
            real_mlp: self.real_mlp.zeros_like(),
            fusion: self.fusion.zeros_like(),
            fusion_weight: self.fusion_weight.zeros_like(),
            conter: self.conter.zeros_like(),
        }
    }

    /// Parameters in checkpoint order.
    pub fn named(&self) -> Vec<(String, &Dense)> {
        let mut out = vec![
            ("user_gmf".to_string(), &self.user_gmf),
            ("item_gmf".to_string(), &self.item_gmf),
            ("user_mlp".to_string(), &self.user_mlp),
            ("item_mlp".to_string(), &self.item_mlp),
            ("buckets".to_string(), &self.buckets),
            ("expl_gmf".to_string(), &self.expl_gmf),
            ("expl_mlp".to_string(), &self.expl_mlp),
        ];
        out.extend(self.match_tower.named_params("match_tower"));
        out.extend(self.real_gmf.named_params("real_gmf"));
        out.extend(self.real_mlp.named_params("real_mlp"));
        out.extend(self.fusion.named_params("fusion"));
        out.push(("fusion_weight".to_string(), &self.fusion_weight));
        out.extend(self.conter.named_params("conter"));
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Dense)> {
        let mut out = vec![
            ("user_gmf".to_string(), &mut self.user_gmf),
            ("item_gmf".to_string(), &mut self.item_gmf),
            ("user_mlp".to_string(), &mut self.user_mlp),
            ("item_mlp".to_string(), &mut self.item_mlp),
            ("buckets".to_string(), &mut self.buckets),
            ("expl_gmf".to_string(), &mut self.expl_gmf),
            ("expl_mlp".to_string(), &mut self.expl_mlp),
        ];
        out.extend(self.match_tower.named_params_mut("match_tower"));
        out.extend(self.real_gmf.named_params_mut("real_gmf"));
        out.extend(self.real_mlp.named_params_mut("real_mlp"));
        out.extend(self.fusion.named_params_mut("fusion"));
        out.push(("fusion_weight".to_string(), &mut self.fusion_weight));
        out.extend(self.conter.named_params_mut("conter"));
        out
    }

    /// All parameters concatenated in checkpoint order.
    pub fn flatten(&self) -> Vec<f32> {
        self.named()
            .into_iter()
            .flat_map(|(_, t)| t.as_slice().to_vec())
            .collect()
    }

    pub fn unflatten(&mut self, flat: &[f32]) -> Result<(), ModelError> {
        let mut pos = 0;
        for (name, t) in self.named_mut() {
            let n = t.as_slice().len();
            let chunk = flat.get(pos..pos + n).ok_or_else(|| {
                ModelError::InvalidConfig(format!("flat parameter vector too short at `{name}`"))
            })?;
            t.as_mut_slice().copy_from_slice(chunk);
            pos += n;
        }
        if pos != flat.len() {
            return Err(ModelError::InvalidConfig("flat parameter vector too long".into()));
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.named().iter().all(|(_, t)| t.is_finite())
    }
}

/// Id vocabularies mapping external ids to table rows.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Vocabulary {
    pub users: Vec<String>,
    pub items: Vec<String>,
    pub explanations: usize,
}

#[derive(Debug, Clone)]
pub struct CausalXModel {
    config: ModelConfig,
    layout: BucketLayout,
    vocab: Vocabulary,
    user_rows: BTreeMap<String, usize>,
    item_rows: BTreeMap<String, usize>,
    pub params: Params,
}

/// Sidecar describing a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelManifest {
    pub dims: ModelConfig,
    #[serde(rename = "K")]
    pub k: usize,
    pub alpha: f32,
    pub beta: f32,
    pub seed: u64,
    pub vocabularies: Vocabulary,
}

/// Intermediate values of the matching-dependent part of the real head for
/// one `(user, item, popularity)`; independent of the explanation.
#[derive(Debug, Clone)]
pub struct ItemContext {
    pub user: usize,
    pub item: usize,
    pub weights: Vec<f32>,
    pub pop_vec: Vec<f32>,
    pub m_gmf: Vec<f32>,
    tower: Tape,
    gmf_head: Tape,
    mlp_head: Tape,
}

impl ItemContext {
    pub fn s_gmf(&self) -> &[f32] {
        self.gmf_head.output()
    }

    pub fn s_mlp(&self) -> &[f32] {
        self.mlp_head.output()
    }

    pub fn m_mlp(&self) -> &[f32] {
        self.tower.output()
    }
}

struct RealForward {
    ctx: ItemContext,
    expl: usize,
    fusion: Tape,
    z: Vec<f32>,
    logit: f32,
}

struct ConterForward {
    weights: Vec<f32>,
    tape: Tape,
    logit: f32,
    prob: f32,
}

/// Effects on explanation relevance, all from the two heads with the
/// reference `f(do(m*), do(p*)) = conter(0.5)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EffectDecomposition {
    pub total: f32,
    pub popularity_direct: f32,
    pub matching: f32,
}

impl CausalXModel {
    pub fn new(
        config: ModelConfig,
        users: Vec<String>,
        items: Vec<String>,
        num_explanations: usize,
        seed: u64,
    ) -> Result<Self, ModelError> {
        config.validate()?;
        if num_explanations == 0 {
            return Err(ModelError::InvalidConfig("no candidate explanations".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = config.init_scale;
        let (dg, dm, dp) = (config.d_gmf, config.d_mlp, config.d_pop);
        let params = Params {
            user_gmf: Dense::uniform(users.len(), dg, s, &mut rng),
            item_gmf: Dense::uniform(items.len(), dg, s, &mut rng),
            user_mlp: Dense::uniform(users.len(), dm, s, &mut rng),
            item_mlp: Dense::uniform(items.len(), dm, s, &mut rng),
            buckets: Dense::uniform(config.buckets, dp, s, &mut rng),
            expl_gmf: Dense::uniform(num_explanations, dg, s, &mut rng),
            expl_mlp: Dense::uniform(num_explanations, dm, s, &mut rng),
            match_tower: Mlp::init(config.spec(2 * dm, dm)?, &mut rng),
            real_gmf: Mlp::init(config.spec(dg + dp, dg)?, &mut rng),
            real_mlp: Mlp::init(config.spec(dm + dp, dm)?, &mut rng),
            fusion: Mlp::init(config.spec(2 * dm, dm)?, &mut rng),
            fusion_weight: Dense::he(1, dg + dm, &mut rng),
            conter: Mlp::init(config.spec(dp, 1)?, &mut rng),
        };
        let vocab = Vocabulary {
            users,
            items,
            explanations: num_explanations,
        };
        Self::assemble(config, vocab, params)
    }

    fn assemble(config: ModelConfig, vocab: Vocabulary, params: Params) -> Result<Self, ModelError> {
        let layout = BucketLayout::new(config.buckets)?;
        let index = |ids: &[String], kind: &str| -> Result<BTreeMap<String, usize>, ModelError> {
            let map: BTreeMap<String, usize> =
                ids.iter().enumerate().map(|(i, u)| (u.clone(), i)).collect();
            if map.len() != ids.len() {
                return Err(ModelError::InvalidConfig(format!("duplicate {kind} ids")));
            }
            Ok(map)
        };
        Ok(Self {
            user_rows: index(&vocab.users, "user")?,
            item_rows: index(&vocab.items, "item")?,
            config,
            layout,
            vocab,
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> BucketLayout {
        self.layout
    }

    pub fn vocabulary(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn num_explanations(&self) -> usize {
        self.vocab.explanations
    }

    pub fn user_row(&self, user: &str) -> Result<usize, ModelError> {
        self.user_rows
            .get(user)
            .copied()
            .ok_or_else(|| ModelError::UnknownUser(user.to_string()))
    }

    pub fn item_row(&self, item: &str) -> Result<usize, ModelError> {
        self.item_rows
            .get(item)
            .copied()
            .ok_or_else(|| ModelError::UnknownItem(item.to_string()))
    }

    fn check_expl(&self, e: usize) -> Result<(), ModelError> {
        if e < self.vocab.explanations {
            Ok(())
        } else {
            Err(ModelError::UnknownExplanation(e))
        }
    }

    /// `(m^G, m^M)` for a user-item pair.
    pub fn match_embed(&self, user: &str, item: &str) -> Result<(Vec<f32>, Vec<f32>), ModelError> {
        let (u, i) = (self.user_row(user)?, self.item_row(item)?);
        let p = &self.params;
        let m_gmf = hadamard(p.user_gmf.row(u), p.item_gmf.row(i));
        let m_mlp = p
            .match_tower
            .predict(&concat(p.user_mlp.row(u), p.item_mlp.row(i)))?;
        Ok((m_gmf, m_mlp))
    }

    /// Renormalized bucket weights for a popularity score.
    pub fn bucket_weights(&self, n: f64) -> Result<Vec<f32>, ModelError> {
        Ok(self.layout.weights(n)?.into_iter().map(|w| w as f32).collect())
    }

    fn mix_buckets(&self, weights: &[f32]) -> Vec<f32> {
        let mut v = vec![0.0f32; self.config.d_pop];
        for (k, &w) in weights.iter().enumerate() {
            if w != 0.0 {
                for (acc, &b) in v.iter_mut().zip(self.params.buckets.row(k)) {
                    *acc += w * b;
                }
            }
        }
        v
    }

    /// `v^n = sum_k w_k(n) v^b_k`
    pub fn popularity_vector(&self, n: f64) -> Result<Vec<f32>, ModelError> {
        Ok(self.mix_buckets(&self.bucket_weights(n)?))
    }

    /// Matching-dependent part of the real head, shared by all explanations.
    pub fn item_context_rows(&self, u: usize, i: usize, n: f64) -> Result<ItemContext, ModelError> {
        if u >= self.vocab.users.len() {
            return Err(ModelError::UnknownUser(format!("row {u}")));
        }
        if i >= self.vocab.items.len() {
            return Err(ModelError::UnknownItem(format!("row {i}")));
        }
        let p = &self.params;
        let weights = self.bucket_weights(n)?;
        let pop_vec = self.mix_buckets(&weights);
        let m_gmf = hadamard(p.user_gmf.row(u), p.item_gmf.row(i));
        let tower = p.match_tower.forward(&concat(p.user_mlp.row(u), p.item_mlp.row(i)))?;
        let gmf_head = p.real_gmf.forward(&concat(&m_gmf, &pop_vec))?;
        let mlp_head = p.real_mlp.forward(&concat(tower.output(), &pop_vec))?;
        Ok(ItemContext {
            user: u,
            item: i,
            weights,
            pop_vec,
            m_gmf,
            tower,
            gmf_head,
            mlp_head,
        })
    }

    pub fn item_context(&self, user: &str, item: &str, n: f64) -> Result<ItemContext, ModelError> {
        self.item_context_rows(self.user_row(user)?, self.item_row(item)?, n)
    }

    fn real_forward_from(&self, ctx: ItemContext, e: usize) -> Result<RealForward, ModelError> {
        self.check_expl(e)?;
        let p = &self.params;
        let fusion = p.fusion.forward(&concat(ctx.s_mlp(), p.expl_mlp.row(e)))?;
        let mut z = hadamard(ctx.s_gmf(), p.expl_gmf.row(e));
        z.extend_from_slice(fusion.output());
        let logit = crate::tensor::dot(p.fusion_weight.as_slice(), &z);
        Ok(RealForward {
            ctx,
            expl: e,
            fusion,
            z,
            logit,
        })
    }

    /// `ŝ_real` from a prepared item context.
    pub fn real_score_in(&self, ctx: &ItemContext, e: usize) -> Result<f32, ModelError> {
        self.check_expl(e)?;
        let p = &self.params;
        let f = p.fusion.predict(&concat(ctx.s_mlp(), p.expl_mlp.row(e)))?;
        let g = hadamard(ctx.s_gmf(), p.expl_gmf.row(e));
        let w = p.fusion_weight.as_slice();
        let (wg, wm) = w.split_at(g.len());
        Ok(sigmoid(crate::tensor::dot(wg, &g) + crate::tensor::dot(wm, &f)))
    }

    /// Real-world head `f_e(M, P)`, a probability.
    pub fn real_score(&self, user: &str, item: &str, n: f64, e: usize) -> Result<f32, ModelError> {
        self.check_expl(e)?;
        let ctx = self.item_context(user, item, n)?;
        self.real_score_in(&ctx, e)
    }

    fn conter_forward(&self, n: f64) -> Result<ConterForward, ModelError> {
        let weights = self.bucket_weights(n)?;
        let tape = self.params.conter.forward(&self.mix_buckets(&weights))?;
        let logit = tape.output()[0];
        Ok(ConterForward {
            weights,
            tape,
            logit,
            prob: sigmoid(logit),
        })
    }

    /// Counterfactual head `f_e(do(m*), P)`; depends on popularity only.
    pub fn conter_score(&self, n: f64) -> Result<f32, ModelError> {
        Ok(self.conter_forward(n)?.prob)
    }

    /// `ŝ_real - β ŝ_conter`; a ranking score that may be negative.
    pub fn debias_score(
        &self,
        user: &str,
        item: &str,
        n: f64,
        e: usize,
        beta: f32,
    ) -> Result<f32, ModelError> {
        let real = self.real_score(user, item, n, e)?;
        if beta == 0.0 {
            return Ok(real);
        }
        Ok(debias(real, self.conter_score(n)?, beta))
    }

    pub fn effect_decomposition(
        &self,
        user: &str,
        item: &str,
        n: f64,
        e: usize,
    ) -> Result<EffectDecomposition, ModelError> {
        let real = self.real_score(user, item, n, e)?;
        let conter = self.conter_score(n)?;
        let reference = self.conter_score(REFERENCE_POPULARITY)?;
        Ok(EffectDecomposition {
            total: real - reference,
            popularity_direct: conter - reference,
            matching: real - conter,
        })
    }

    /// Loss and gradients of `L_real + α L_conter` over a labeled batch, plus
    /// a fingerprint of every relu activation pattern touched.
    pub fn batch_gradients(
        &self,
        batch: &[LabeledSample],
        alpha: f32,
    ) -> Result<(LossParts, Params, u64), ModelError> {
        let mut grads = self.params.zeros_like();
        let mut pattern = 0xcbf2_9ce4_8422_2325u64;
        let mut mix = |t: &Tape| {
            for b in t.activation_pattern() {
                pattern = (pattern ^ u64::from(b)).wrapping_mul(0x100_0000_01b3);
            }
        };
        let scale = 1.0 / batch.len().max(1) as f32;
        let mut loss = LossParts::default();
        for s in batch {
            let ctx = self.item_context_rows(s.user, s.item, s.popularity)?;
            let fwd = self.real_forward_from(ctx, s.expl)?;
            let (l_real, g_real) = bce_with_logit(fwd.logit, s.label);
            loss.real += l_real * f64::from(scale);
            mix(&fwd.ctx.tower);
            mix(&fwd.ctx.gmf_head);
            mix(&fwd.ctx.mlp_head);
            mix(&fwd.fusion);
            self.backward_real(&fwd, g_real * scale, &mut grads)?;

            let cf = self.conter_forward(s.popularity)?;
            let (l_conter, g_conter) = bce_with_logit(cf.logit, s.label);
            loss.conter += l_conter * f64::from(scale);
            mix(&cf.tape);
            if alpha != 0.0 {
                self.backward_conter(&cf, alpha * g_conter * scale, &mut grads)?;
            }
        }
        loss.total = loss.real + f64::from(alpha) * loss.conter;
        Ok((loss, grads, pattern))
    }

    fn add_bucket_grad(&self, weights: &[f32], d_vec: &[f32], grads: &mut Params) {
        for (k, &w) in weights.iter().enumerate() {
            if w != 0.0 {
                for (g, &d) in grads.buckets.row_mut(k).iter_mut().zip(d_vec) {
                    *g += w * d;
                }
            }
        }
    }

    fn backward_real(&self, f: &RealForward, d_logit: f32, grads: &mut Params) -> Result<(), ModelError> {
        let p = &self.params;
        let (dg, dm) = (self.config.d_gmf, self.config.d_mlp);
        let ctx = &f.ctx;
        let w = p.fusion_weight.as_slice();
        for (g, &z) in grads.fusion_weight.as_mut_slice().iter_mut().zip(&f.z) {
            *g += d_logit * z;
        }
        let dz: Vec<f32> = w.iter().map(|&wi| wi * d_logit).collect();
        let (dz_g, dz_m) = dz.split_at(dg);

        // z_g = s^G ⊙ c^G_e
        let c_g = p.expl_gmf.row(f.expl);
        let d_sg: Vec<f32> = dz_g.iter().zip(c_g).map(|(a, b)| a * b).collect();
        for ((g, &d), &s) in grads.expl_gmf.row_mut(f.expl).iter_mut().zip(dz_g).zip(ctx.s_gmf()) {
            *g += d * s;
        }

        // z_m = fusion([s^M ; c^M_e])
        let d_fin = p.fusion.backward(&f.fusion, dz_m, &mut grads.fusion)?;
        let (d_sm, d_cm) = d_fin.split_at(dm);
        for (g, &d) in grads.expl_mlp.row_mut(f.expl).iter_mut().zip(d_cm) {
            *g += d;
        }

        let d_gin = p.real_gmf.backward(&ctx.gmf_head, &d_sg, &mut grads.real_gmf)?;
        let d_min = p.real_mlp.backward(&ctx.mlp_head, d_sm, &mut grads.real_mlp)?;
        let (d_mg, d_v1) = d_gin.split_at(dg);
        let (d_mm, d_v2) = d_min.split_at(dm);
        let d_vec: Vec<f32> = d_v1.iter().zip(d_v2).map(|(a, b)| a + b).collect();
        self.add_bucket_grad(&ctx.weights, &d_vec, grads);

        // m^G = a^G_u ⊙ b^G_i
        let (u, i) = (ctx.user, ctx.item);
        let a_u = p.user_gmf.row(u);
        let b_i = p.item_gmf.row(i);
        for ((g, &d), &b) in grads.user_gmf.row_mut(u).iter_mut().zip(d_mg).zip(b_i) {
            *g += d * b;
        }
        for ((g, &d), &a) in grads.item_gmf.row_mut(i).iter_mut().zip(d_mg).zip(a_u) {
            *g += d * a;
        }

        let d_tin = p.match_tower.backward(&ctx.tower, d_mm, &mut grads.match_tower)?;
        let (d_au, d_bi) = d_tin.split_at(dm);
        for (g, &d) in grads.user_mlp.row_mut(u).iter_mut().zip(d_au) {
            *g += d;
        }
        for (g, &d) in grads.item_mlp.row_mut(i).iter_mut().zip(d_bi) {
            *g += d;
        }
        Ok(())
    }

    fn backward_conter(&self, f: &ConterForward, d_logit: f32, grads: &mut Params) -> Result<(), ModelError> {
        let d_vec = self.params.conter.backward(&f.tape, &[d_logit], &mut grads.conter)?;
        self.add_bucket_grad(&f.weights, &d_vec, grads);
        Ok(())
    }

    /// Writes `model.cxm`-style records to `ckpt` and the JSON manifest to
    /// `manifest`.
    pub fn save(
        &self,
        ckpt: &Path,
        manifest: &Path,
        alpha: f32,
        beta: f32,
        seed: u64,
    ) -> Result<(), ModelError> {
        let mut buf = Vec::new();
        let named = self.params.named();
        write_records(&mut buf, named.iter().map(|(n, t)| (n.as_str(), *t)))?;
        fs::write(ckpt, buf)?;
        let m = ModelManifest {
            dims: self.config.clone(),
            k: self.config.buckets,
            alpha,
            beta,
            seed,
            vocabularies: self.vocab.clone(),
        };
        fs::write(manifest, serde_json::to_string_pretty(&m)? + "\n")?;
        Ok(())
    }

    pub fn load(ckpt: &Path, manifest: &Path) -> Result<(Self, ModelManifest), ModelError> {
        let m: ModelManifest = serde_json::from_str(&fs::read_to_string(manifest)?)?;
        let records = read_records(fs::File::open(ckpt)?)?;
        let mut model = Self::new(
            m.dims.clone(),
            m.vocabularies.users.clone(),
            m.vocabularies.items.clone(),
            m.vocabularies.explanations,
            0,
        )?;
        let mut by_name: BTreeMap<String, Dense> = records.into_iter().collect();
        for (name, t) in model.params.named_mut() {
            let src = by_name
                .remove(&name)
                .ok_or_else(|| ModelError::Checkpoint(format!("missing record `{name}`")))?;
            if src.shape() != t.shape() {
                return Err(ModelError::Checkpoint(format!(
                    "record `{name}` has shape {:?}, expected {:?}",
                    src.shape(),
                    t.shape()
                )));
            }
            *t = src;
        }
        if let Some(extra) = by_name.keys().next() {
            return Err(ModelError::Checkpoint(format!("unexpected record `{extra}`")));
        }
        Ok((model, m))
    }
}

/// `ŝ_debias = ŝ_real - β ŝ_conter`
pub fn debias(real: f32, conter: f32, beta: f32) -> f32 {
    real - beta * conter
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(seed: u64) -> CausalXModel {
        let cfg = ModelConfig {
            d_gmf: 2,
            d_mlp: 3,
            d_pop: 2,
            hidden: vec![4],
            buckets: 5,
            ..ModelConfig::default()
        };
        CausalXModel::new(
            cfg,
            vec!["u0".into(), "u1".into()],
            vec!["i0".into(), "i1".into(), "i2".into()],
            3,
            seed,
        )
        .unwrap()
    }

    #[test]
    fn gmf_matching_is_elementwise_product() {
        let mut m = tiny(1);
        m.params.user_gmf.row_mut(0).copy_from_slice(&[1.0, 1.0]);
        m.params.item_gmf.row_mut(1).copy_from_slice(&[0.3, -2.0]);
        assert_eq!(m.match_embed("u0", "i1").unwrap().0, vec![0.3, -2.0]);

        m.params.user_gmf.row_mut(1).copy_from_slice(&[0.0, 0.0]);
        for it in ["i0", "i1", "i2"] {
            assert_eq!(m.match_embed("u1", it).unwrap().0, vec![0.0, 0.0]);
        }

        m.params.user_gmf.row_mut(0).copy_from_slice(&[0.5, 2.0]);
        m.params.item_gmf.row_mut(2).copy_from_slice(&[4.0, 0.25]);
        assert_eq!(m.match_embed("u0", "i2").unwrap().0, vec![2.0, 0.5]);
    }

    #[test]
    fn unknown_ids_are_errors() {
        let m = tiny(1);
        assert!(matches!(m.match_embed("nobody", "i0"), Err(ModelError::UnknownUser(_))));
        assert!(matches!(m.match_embed("u0", "nothing"), Err(ModelError::UnknownItem(_))));
        assert!(matches!(m.real_score("u0", "i0", 0.5, 7), Err(ModelError::UnknownExplanation(7))));
    }

    #[test]
    fn popularity_vector_cases() {
        let mut m = tiny(2);
        let v = m.popularity_vector(0.75).unwrap();
        assert_eq!(v, m.params.buckets.row(3));

        let b: Vec<f32> = (0..10).map(|x| x as f32).collect();
        m.params.buckets.as_mut_slice().copy_from_slice(&b);
        // K = 5, n = 0.30 -> 0.8 v_2 + 0.2 v_3 (1-based)
        let v = m.popularity_vector(0.30).unwrap();
        let expect = [0.8 * 2.0 + 0.2 * 4.0, 0.8 * 3.0 + 0.2 * 5.0];
        assert!((v[0] - expect[0]).abs() < 1e-6 && (v[1] - expect[1]).abs() < 1e-6);

        for r in 0..5 {
            m.params.buckets.row_mut(r).copy_from_slice(&[1.5, -0.5]);
        }
        for n in [0.0, 0.13, 0.5, 0.91, 1.0] {
            let v = m.popularity_vector(n).unwrap();
            assert!((v[0] - 1.5).abs() < 1e-6 && (v[1] + 0.5).abs() < 1e-6);
        }
    }

    #[test]
    fn real_score_in_open_unit_interval_and_half_at_zero_weight() {
        let mut m = tiny(3);
        for (u, i, n, e) in [("u0", "i0", 0.0, 0), ("u1", "i2", 1.0, 2), ("u0", "i1", 0.4, 1)] {
            let s = m.real_score(u, i, n, e).unwrap();
            assert!(s > 0.0 && s < 1.0);
        }
        m.params.fusion_weight.fill(0.0);
        assert_eq!(m.real_score("u1", "i1", 0.3, 1).unwrap(), 0.5);
    }

    /// One-dimensional model with every weight hand-set.
    #[test]
    fn real_score_matches_hand_computation() {
        let cfg = ModelConfig {
            d_gmf: 1,
            d_mlp: 1,
            d_pop: 1,
            hidden: vec![1],
            buckets: 2,
            ..ModelConfig::default()
        };
        let mut m = CausalXModel::new(cfg, vec!["u".into()], vec!["i".into()], 1, 0).unwrap();
        let p = &mut m.params;
        p.user_gmf.set(0, 0, 2.0);
        p.item_gmf.set(0, 0, 0.5);
        p.user_mlp.set(0, 0, 1.0);
        p.item_mlp.set(0, 0, -1.0);
        p.buckets.as_mut_slice().copy_from_slice(&[0.0, 2.0]);
        p.expl_gmf.set(0, 0, 3.0);
        p.expl_mlp.set(0, 0, 0.5);
        let set = |mlp: &mut Mlp, w0: &[f32], b0: &[f32], w1: &[f32], b1: &[f32]| {
            let l = mlp.layers_mut();
            l[0].weight.as_mut_slice().copy_from_slice(w0);
            l[0].bias.as_mut_slice().copy_from_slice(b0);
            l[1].weight.as_mut_slice().copy_from_slice(w1);
            l[1].bias.as_mut_slice().copy_from_slice(b1);
        };
        // tower: relu(1*a - 1*b + 0.5) * 2 -> relu(1 + 1 + 0.5) * 2 = 5
        set(&mut p.match_tower, &[1.0, -1.0], &[0.5], &[2.0], &[0.0]);
        // real_gmf: relu(m_g + v) -> identity out
        set(&mut p.real_gmf, &[1.0, 1.0], &[0.0], &[1.0], &[0.0]);
        // real_mlp: relu(0.1 m_m - v) * 1 + 1
        set(&mut p.real_mlp, &[0.1, -1.0], &[0.0], &[1.0], &[1.0]);
        // fusion: relu(s_m + c_m) * 0.5
        set(&mut p.fusion, &[1.0, 1.0], &[0.0], &[0.5], &[0.0]);
        p.fusion_weight.as_mut_slice().copy_from_slice(&[0.2, -0.4]);

        // n = 0.25: weights (0.75, 0.25) -> v = 0.5
        // m_g = 1, m_m = 5
        // s_g = relu(1 + 0.5) = 1.5; s_m = relu(0.5 - 0.5) + 1 = 1
        // z = [1.5 * 3, relu(1 + 0.5) * 0.5] = [4.5, 0.75]
        // logit = 0.2 * 4.5 - 0.4 * 0.75 = 0.6
        let s = m.real_score("u", "i", 0.25, 0).unwrap();
        let expect = 1.0 / (1.0 + (-0.6f32).exp());
        assert!((s - expect).abs() < 1e-6, "{s} vs {expect}");
    }

    #[test]
    fn conter_score_ignores_context_and_is_half_when_zeroed() {
        let mut m = tiny(4);
        let a = m.conter_score(0.37).unwrap();
        let b = m.conter_score(0.37).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
        for l in m.params.conter.layers_mut() {
            l.weight.fill(0.0);
            l.bias.fill(0.0);
        }
        for n in [0.0, 0.2, 0.9] {
            assert_eq!(m.conter_score(n).unwrap(), 0.5);
        }
    }

    #[test]
    fn conter_score_is_continuous_in_popularity() {
        let m = tiny(5);
        let steps = 10_000;
        let mut prev = m.conter_score(0.0).unwrap();
        let mut max_jump = 0.0f32;
        for s in 1..=steps {
            let cur = m.conter_score(s as f64 / steps as f64).unwrap();
            max_jump = max_jump.max((cur - prev).abs());
            prev = cur;
        }
        assert!(max_jump < 1e-3, "max jump {max_jump}");
    }

    #[test]
    fn debias_identities() {
        let m = tiny(6);
        let real = m.real_score("u1", "i0", 0.6, 2).unwrap();
        let d0 = m.debias_score("u1", "i0", 0.6, 2, 0.0).unwrap();
        assert_eq!(real.to_bits(), d0.to_bits());
        assert!((debias(0.9, 0.6, 0.5) - 0.6).abs() < 1e-7);
        let d1 = m.debias_score("u1", "i0", 0.6, 2, 1.0).unwrap();
        let eff = m.effect_decomposition("u1", "i0", 0.6, 2).unwrap();
        assert_eq!(d1, eff.matching);
        assert!((eff.total - (eff.matching + eff.popularity_direct)).abs() < 1e-6);
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = tiny(7);
        let (c, j) = (dir.path().join("m.cxm"), dir.path().join("m.json"));
        m.save(&c, &j, 0.5, 0.3, 7).unwrap();
        let (back, manifest) = CausalXModel::load(&c, &j).unwrap();
        assert_eq!(back.params.flatten(), m.params.flatten());
        assert_eq!(manifest.k, 5);
        assert_eq!(manifest.vocabularies, *m.vocabulary());
        let bytes = fs::read(&c).unwrap();
        back.save(&c, &j, 0.5, 0.3, 7).unwrap();
        assert_eq!(fs::read(&c).unwrap(), bytes);
    }
}
