//! The two-step training pipeline.
//!
//! Step 1 learns subnet masks: each step forwards the supernet plus one
//! uniformly sampled subnet, scales the subnet loss per sequence with the
//! focal rule, and (for the orthogonal-softmax learner) adds the annealed
//! orthogonality pressure. At the 60% boundary masks are rounded to binary
//! and the mask-learner state freezes. Step 2 jointly trains the supernet
//! and the rounded subnets under the sandwich rule with layer dropout and
//! width-adapted FFN dropout.

mod checkpoint;
mod optim;
mod schedules;

pub use checkpoint::{
    load_checkpoint, read_checkpoint_meta, save_checkpoint, CheckpointMeta, MaskMeta,
    CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use optim::{Adam, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use schedules::{beta_ramp, focal_from_loss, focal_lambda, lr_schedule};

use crate::autodiff::{ParamId, ParamStore, Scalar, Tape, Var};
use crate::baselines;
use crate::costs::{
    flops_cost, mask_cost, param_cost, resolve_budget, verify, Budget, BudgetSpec, CostVector,
    Criterion,
};
use crate::encoder::{
    build, mask_gates, DropoutCtx, Encoder, EncoderConfig, ForwardOpts, Gate, GroupRegistry,
    Kind, LayerDropCtx,
};
use crate::error::{Error, Result};
use crate::orthomask;
use crate::rng::{streams, CounterRng};
use crate::tasks::{ctc_loss, generate_with_threads, greedy_decode, label_error_rate, Corpus, SynthConfig};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LambdaMode {
    Adaptive,
    Constant(f64),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum BetaMode {
    Ramp,
    Constant(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerDropScope {
    Supernet,
    SupernetAndMedium,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LargestRule {
    Supernet,
    LargestSubnet,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LearnerKind {
    None,
    Orthosoftmax,
    TopkSte,
    L0,
    Aux,
}

impl LearnerKind {
    pub fn name(self) -> &'static str {
        match self {
            LearnerKind::None => "none",
            LearnerKind::Orthosoftmax => "orthosoftmax",
            LearnerKind::TopkSte => "topk_ste",
            LearnerKind::L0 => "l0",
            LearnerKind::Aux => "aux",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "orthosoftmax" => Ok(Self::Orthosoftmax),
            "topk_ste" => Ok(Self::TopkSte),
            "l0" => Ok(Self::L0),
            "aux" => Ok(Self::Aux),
            other => Err(Error::Config(format!("unknown mask_learner kind '{other}'"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub total_steps: u64,
    pub step1_fraction: f64,
    pub batch_size: usize,
    pub peak_lr: f64,
    /// Learning-rate multiplier for mask-learner parameters.
    pub score_lr_mult: f64,
    /// Decoupled weight decay on encoder parameters (mask learners get 0).
    pub weight_decay: f64,
    pub lambda: LambdaMode,
    pub beta: BetaMode,
    pub beta_focal: f64,
    pub layer_drop_p: f64,
    pub layer_drop_scope: LayerDropScope,
    pub largest: LargestRule,
    pub seed: u64,
    /// Reference post-frontend frames for the FLOPs cost model.
    pub l_ref: usize,
    /// Magnitude of the tie-breaking noise added to the zero-initialized
    /// score matrix.
    pub score_noise: f64,
    /// Peak multiplier of the L0 budget penalty.
    pub l0_lambda: f64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.total_steps == 0 {
            return Err(Error::Config("total_steps must be positive".into()));
        }
        if !(self.step1_fraction > 0.0 && self.step1_fraction < 1.0) {
            return Err(Error::Config(format!(
                "step1_fraction {} outside (0,1)",
                self.step1_fraction
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.peak_lr <= 0.0 {
            return Err(Error::Config("peak_lr must be positive".into()));
        }
        if let LambdaMode::Constant(v) = self.lambda {
            if v <= 0.0 {
                return Err(Error::Config(format!("constant lambda {v} must be positive")));
            }
        }
        if !(0.0..1.0).contains(&self.layer_drop_p) {
            return Err(Error::Config(format!(
                "layer_drop_p {} outside [0,1)",
                self.layer_drop_p
            )));
        }
        if self.l_ref == 0 {
            return Err(Error::Config("l_ref must be positive".into()));
        }
        Ok(())
    }

    pub fn step1_steps(&self) -> u64 {
        (((self.total_steps as f64) * self.step1_fraction).round() as u64).min(self.total_steps)
    }
}

/// One metrics.csv row.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub step: u64,
    pub phase: u8,
    pub temperature: f64,
    pub beta: f64,
    pub lambda_mean: f64,
    pub m_sampled: i64,
    pub k_m: usize,
    pub expected_cost_m: f64,
    pub loss_super: f64,
    pub loss_sub: f64,
    pub loss_orthog: f64,
    pub lr: f64,
}

impl MetricsRow {
    pub fn csv_header() -> &'static str {
        "step,phase,T,beta,lambda_mean,m_sampled,k_m,expected_cost_m,loss_super,loss_sub,loss_orthog,lr"
    }

    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            self.step,
            self.phase,
            self.temperature,
            self.beta,
            self.lambda_mean,
            self.m_sampled,
            self.k_m,
            self.expected_cost_m,
            self.loss_super,
            self.loss_sub,
            self.loss_orthog,
            self.lr
        )
    }
}

/// Which output head evaluation decodes with.
#[derive(Clone, Copy, Debug)]
pub enum EvalHead {
    Main,
    Aux(usize),
}

#[derive(Clone, Debug)]
enum Learner {
    None,
    Ortho { s: ParamId },
    Topk { scores: ParamId },
    L0 { log_alpha: Vec<ParamId> },
    Aux { splits: Vec<usize> },
}

impl Learner {
    fn kind(&self) -> LearnerKind {
        match self {
            Learner::None => LearnerKind::None,
            Learner::Ortho { .. } => LearnerKind::Orthosoftmax,
            Learner::Topk { .. } => LearnerKind::TopkSte,
            Learner::L0 { .. } => LearnerKind::L0,
            Learner::Aux { .. } => LearnerKind::Aux,
        }
    }

    fn param_ids(&self) -> Vec<ParamId> {
        match self {
            Learner::None | Learner::Aux { .. } => Vec::new(),
            Learner::Ortho { s } => vec![*s],
            Learner::Topk { scores } => vec![*scores],
            Learner::L0 { log_alpha } => log_alpha.clone(),
        }
    }
}

/// Everything needed to assemble a run.
#[derive(Clone, Debug)]
pub struct TrainSetup {
    pub encoder_config: EncoderConfig,
    pub task: SynthConfig,
    pub train: TrainConfig,
    pub criterion: Criterion,
    pub subnets: Vec<BudgetSpec>,
    pub learner: LearnerKind,
    pub config_hash: String,
    pub config_toml: String,
}

pub struct Trainer<S: Scalar> {
    pub cfg: TrainConfig,
    pub encoder: Encoder,
    pub registry: GroupRegistry,
    pub store: ParamStore<S>,
    pub cost: Option<CostVector>,
    pub budgets: Vec<Budget>,
    pub opt: Adam<S>,
    pub step: u64,
    pub masks_meta: Option<Vec<MaskMeta>>,
    pub train_corpus: Corpus,
    pub dev_corpus: Corpus,
    pub config_hash: String,
    pub config_toml: String,
    learner: Learner,
    masks_bin: Option<Vec<Vec<u8>>>,
    theta_ids: Vec<ParamId>,
    learner_ids: Vec<ParamId>,
    droppable: Vec<bool>,
    ffn_rates: Vec<Vec<f64>>,
}

impl<S: Scalar> Trainer<S> {
    pub fn new(setup: &TrainSetup) -> Result<Self> {
        let (encoder, store, registry) = build::<S>(&setup.encoder_config, setup.train.seed)?;
        Self::from_parts(encoder, store, registry, setup, 1)
    }

    pub fn new_with_threads(setup: &TrainSetup, threads: usize) -> Result<Self> {
        let (encoder, store, registry) = build::<S>(&setup.encoder_config, setup.train.seed)?;
        Self::from_parts(encoder, store, registry, setup, threads)
    }

    /// Assemble a trainer around a pre-built encoder (used for training
    /// structurally pruned controls). The encoder's parameters must already
    /// be registered in `store`.
    pub fn from_parts(
        encoder: Encoder,
        mut store: ParamStore<S>,
        registry: GroupRegistry,
        setup: &TrainSetup,
        threads: usize,
    ) -> Result<Self> {
        setup.train.validate()?;
        setup.task.validate()?;
        if setup.task.vocab != setup.encoder_config.vocab_size {
            return Err(Error::Config(format!(
                "task vocab {} != encoder vocab {}",
                setup.task.vocab, setup.encoder_config.vocab_size
            )));
        }
        if setup.task.d_in != setup.encoder_config.input_dim {
            return Err(Error::Config(format!(
                "task d_in {} != encoder input_dim {}",
                setup.task.d_in, setup.encoder_config.input_dim
            )));
        }
        let theta_ids: Vec<ParamId> = store.iter().map(|(id, _, _)| id).collect();

        let want_subnets = setup.learner != LearnerKind::None;
        if want_subnets && setup.subnets.is_empty() {
            return Err(Error::Config(format!(
                "mask_learner '{}' requires at least one [[subnets]] entry",
                setup.learner.name()
            )));
        }
        if !want_subnets && !setup.subnets.is_empty() {
            return Err(Error::Config(
                "mask_learner 'none' cannot take [[subnets]] entries".into(),
            ));
        }

        let (cost, budgets) = if setup.subnets.is_empty() {
            (None, Vec::new())
        } else {
            let cost = match setup.criterion {
                Criterion::Sparsity => param_cost(&registry, &store)?,
                Criterion::Flops => flops_cost(&registry, &setup.encoder_config, setup.train.l_ref)?,
            };
            let mut budgets = setup
                .subnets
                .iter()
                .map(|&spec| resolve_budget(setup.criterion, spec, &cost))
                .collect::<Result<Vec<_>>>()?;
            budgets.sort_by(|a, b| a.tau.partial_cmp(&b.tau).unwrap_or(std::cmp::Ordering::Equal));
            (Some(cost), budgets)
        };

        let n = registry.len();
        let learner = match setup.learner {
            LearnerKind::None => Learner::None,
            LearnerKind::Orthosoftmax => {
                // zero-initialized scores with tiny tie-breaking noise;
                // exact zeros are a row-permutation-symmetric saddle under
                // deterministic arithmetic
                let mut rng = CounterRng::new(setup.train.seed, &[streams::SCORE_INIT]);
                let noise = crate::autodiff::Tensor::randn(n, n, setup.train.score_noise, &mut rng);
                let s = store.register("orthomask/S", noise)?;
                Learner::Ortho { s }
            }
            LearnerKind::TopkSte => {
                let mut rng = CounterRng::new(setup.train.seed, &[streams::SCORE_INIT]);
                let noise = crate::autodiff::Tensor::randn(1, n, setup.train.score_noise, &mut rng);
                let scores = store.register("topk/scores", noise)?;
                Learner::Topk { scores }
            }
            LearnerKind::L0 => {
                let mut ids = Vec::new();
                for m in 0..budgets.len() {
                    let mut rng =
                        CounterRng::new(setup.train.seed, &[streams::SCORE_INIT, m as u64]);
                    let noise =
                        crate::autodiff::Tensor::randn(1, n, setup.train.score_noise, &mut rng);
                    ids.push(store.register(&format!("l0/{m}/log_alpha"), noise)?);
                }
                Learner::L0 { log_alpha: ids }
            }
            LearnerKind::Aux => {
                let cost = cost.as_ref().expect("aux requires budgets");
                let splits = budgets
                    .iter()
                    .map(|b| baselines::aux_split_for_budget(&registry, cost, b.tau))
                    .collect::<Result<Vec<_>>>()?;
                Learner::Aux { splits }
            }
        };
        let learner_ids = learner.param_ids();

        let (train_corpus, dev_corpus) = generate_with_threads(&setup.task, threads)?;
        let opt = Adam::new(&store);

        Ok(Self {
            cfg: setup.train.clone(),
            encoder,
            registry,
            store,
            cost,
            budgets,
            opt,
            step: 0,
            masks_meta: None,
            train_corpus,
            dev_corpus,
            config_hash: setup.config_hash.clone(),
            config_toml: setup.config_toml.clone(),
            learner,
            masks_bin: None,
            theta_ids,
            learner_ids,
            droppable: Vec::new(),
            ffn_rates: Vec::new(),
        })
    }

    pub fn learner_kind(&self) -> LearnerKind {
        self.learner.kind()
    }

    pub fn masks(&self) -> Option<&[Vec<u8>]> {
        self.masks_bin.as_deref()
    }

    /// Run every remaining step. Returns one metrics row per executed step.
    pub fn train(&mut self) -> Result<Vec<MetricsRow>> {
        self.run_to(self.cfg.total_steps)
    }

    /// Run from the current step up to `limit` (exclusive of steps >= limit,
    /// capped at total_steps).
    pub fn run_to(&mut self, limit: u64) -> Result<Vec<MetricsRow>> {
        let s1 = self.cfg.step1_steps();
        let end = limit.min(self.cfg.total_steps);
        let mut rows = Vec::new();
        while self.step < end {
            if self.step == s1 {
                self.transition()?;
            }
            let row = if self.step < s1 {
                self.step1_step()?
            } else {
                self.step2_step()?
            };
            rows.push(row);
            self.step += 1;
        }
        if self.step >= s1 && self.masks_meta.is_none() {
            self.transition()?;
        }
        Ok(rows)
    }

    fn pick_batch(&self, t: u64) -> Vec<usize> {
        let mut rng = CounterRng::new(self.cfg.seed, &[streams::BATCH, t]);
        (0..self.cfg.batch_size)
            .map(|_| rng.below(self.train_corpus.len()))
            .collect()
    }

    fn lambda_for(&self, seq_loss: f64) -> f64 {
        match self.cfg.lambda {
            LambdaMode::Adaptive => focal_from_loss(seq_loss, self.cfg.beta_focal),
            LambdaMode::Constant(c) => c,
        }
    }

    /// Per-sequence CTC losses of one model over a batch.
    #[allow(clippy::too_many_arguments)]
    fn seq_losses(
        &self,
        tape: &mut Tape<S>,
        batch: &[usize],
        gates: Option<&[Gate<S>]>,
        model_tag: u64,
        ffn_rates: Option<&[f64]>,
        layer_drop: Option<&[bool]>,
        aux_split: Option<usize>,
    ) -> Result<Vec<Var>> {
        let t = self.step;
        let mut out = Vec::with_capacity(batch.len());
        for &i in batch {
            let sample = &self.train_corpus.samples[i];
            let feats = sample.features_tensor::<S>();
            let ld = layer_drop.map(|d| LayerDropCtx {
                p: self.cfg.layer_drop_p,
                droppable: d,
            });
            let ctx = DropoutCtx {
                seed: self.cfg.seed,
                step: t,
                model_tag,
                base_rate: self.encoder.config.dropout_base,
                ffn_rates,
                layer_drop: ld,
            };
            let opts = ForwardOpts {
                gates,
                dropout: Some(ctx),
            };
            let lp = match aux_split {
                None => self.encoder.forward(tape, &self.store, &feats, &opts)?,
                Some(split) => {
                    self.encoder
                        .aux_head_forward(tape, &self.store, &feats, split, &opts)?
                }
            };
            out.push(ctc_loss(tape, lp, &sample.labels)?);
        }
        Ok(out)
    }

    fn mean_of(&self, tape: &mut Tape<S>, vars: &[Var]) -> Result<Var> {
        let mut acc = vars[0];
        for &v in &vars[1..] {
            acc = tape.add(acc, v)?;
        }
        Ok(tape.scale(acc, 1.0 / vars.len() as f64))
    }

    /// Focal-scaled batch mean; returns (loss var, mean lambda, mean raw loss).
    fn focal_mean(&self, tape: &mut Tape<S>, vars: &[Var]) -> Result<(Var, f64, f64)> {
        let mut scaled = Vec::with_capacity(vars.len());
        let mut lam_sum = 0.0;
        let mut raw_sum = 0.0;
        for &v in vars {
            let raw = Scalar::to_f64(tape.value(v).item());
            let lam = self.lambda_for(raw);
            lam_sum += lam;
            raw_sum += raw;
            scaled.push(tape.scale(v, lam));
        }
        let mean = self.mean_of(tape, &scaled)?;
        let _ = raw_sum;
        Ok((mean, lam_sum / vars.len() as f64, raw_sum / vars.len() as f64))
    }

    fn step1_step(&mut self) -> Result<MetricsRow> {
        let t = self.step;
        let s1 = self.cfg.step1_steps();
        let temp = orthomask::temperature(t);
        let beta = match self.cfg.beta {
            BetaMode::Ramp => beta_ramp(t, s1),
            BetaMode::Constant(v) => v,
        };
        let batch = self.pick_batch(t);
        let m_count = self.budgets.len();
        let m = if m_count == 0 {
            None
        } else {
            let mut rng = CounterRng::new(self.cfg.seed, &[streams::SUBNET_PICK, t]);
            Some(rng.below(m_count))
        };

        let mut tape: Tape<S> = Tape::new();
        self.store.zero_grads();

        let sup_losses = self.seq_losses(&mut tape, &batch, None, 0, None, None, None)?;
        let l_sup = self.mean_of(&mut tape, &sup_losses)?;

        let mut loss = l_sup;
        let mut lambda_mean = 0.0;
        let mut k_m = 0usize;
        let mut expected_cost = 0.0;
        let mut loss_sub = 0.0;
        let mut loss_orthog = 0.0;

        if let Some(m) = m {
            let tau = self.budgets[m].tau;
            let cost = self.cost.as_ref().expect("budgets imply cost");
            let n = self.registry.len();
            match &self.learner {
                Learner::None => unreachable!("budgets imply a learner"),
                Learner::Ortho { s } => {
                    let s_var = tape.param(&self.store, *s);
                    let w = tape.softmax_rows(s_var, temp)?;
                    let w_f64 = tape.value(w).to_f64();
                    let (k, prefix) = orthomask::select_k(&w_f64, &cost.per_group, tau);
                    k_m = k;
                    expected_cost = prefix;
                    let z = if k > 0 {
                        let ones =
                            tape.constant(crate::autodiff::Tensor::full(1, k, S::one()));
                        let topk = tape.slice_rows(w, 0, k)?;
                        let z0 = tape.matmul(ones, topk)?;
                        tape.clamp01(z0)
                    } else {
                        tape.constant(crate::autodiff::Tensor::zeros(1, n))
                    };
                    let gates = self.gates_from_row(&mut tape, z, n)?;
                    let subs = self.seq_losses(
                        &mut tape,
                        &batch,
                        Some(&gates),
                        1 + m as u64,
                        None,
                        None,
                        None,
                    )?;
                    let (l_sub, lam, raw) = self.focal_mean(&mut tape, &subs)?;
                    lambda_mean = lam;
                    loss_sub = raw;
                    loss = tape.add(loss, l_sub)?;
                    let ortho = orthomask::ortho_loss_tape(&mut tape, w, k)?;
                    loss_orthog = Scalar::to_f64(tape.value(ortho).item());
                    let ortho_term = tape.scale(ortho, beta);
                    loss = tape.add(loss, ortho_term)?;
                }
                Learner::Topk { scores } => {
                    let sc_var = tape.param(&self.store, *scores);
                    let sc: Vec<f64> =
                        tape.value(sc_var).data().iter().map(|&v| Scalar::to_f64(v)).collect();
                    let mask = baselines::ste_mask(&sc, cost, tau);
                    k_m = mask.iter().filter(|&&z| z == 1).count();
                    expected_cost = mask_cost(&mask, cost);
                    let z = baselines::ste_gates_tape(&mut tape, sc_var, &mask)?;
                    let gates = self.gates_from_row(&mut tape, z, n)?;
                    let subs = self.seq_losses(
                        &mut tape,
                        &batch,
                        Some(&gates),
                        1 + m as u64,
                        None,
                        None,
                        None,
                    )?;
                    let (l_sub, lam, raw) = self.focal_mean(&mut tape, &subs)?;
                    lambda_mean = lam;
                    loss_sub = raw;
                    loss = tape.add(loss, l_sub)?;
                }
                Learner::L0 { log_alpha } => {
                    let la_var = tape.param(&self.store, log_alpha[m]);
                    let la: Vec<f64> =
                        tape.value(la_var).data().iter().map(|&v| Scalar::to_f64(v)).collect();
                    let mut rng =
                        CounterRng::new(self.cfg.seed, &[streams::HARD_CONCRETE, t, m as u64]);
                    let us: Vec<f64> = (0..n).map(|_| rng.open01()).collect();
                    let z = baselines::hc_gates_tape(&mut tape, la_var, &us)?;
                    let gates = self.gates_from_row(&mut tape, z, n)?;
                    let subs = self.seq_losses(
                        &mut tape,
                        &batch,
                        Some(&gates),
                        1 + m as u64,
                        None,
                        None,
                        None,
                    )?;
                    let (l_sub, lam, raw) = self.focal_mean(&mut tape, &subs)?;
                    lambda_mean = lam;
                    loss_sub = raw;
                    loss = tape.add(loss, l_sub)?;
                    // budget penalty, ramped over Step 1
                    let ramp = (t + 1) as f64 / s1.max(1) as f64;
                    let pen =
                        baselines::l0_penalty_tape(&mut tape, la_var, cost, tau, self.cfg.l0_lambda * ramp)?;
                    loss_orthog = Scalar::to_f64(tape.value(pen).item());
                    loss = tape.add(loss, pen)?;
                    k_m = la.iter().filter(|&&a| baselines::hc_binarize(a)).count();
                    expected_cost = baselines::l0_expected_cost(&la, cost);
                }
                Learner::Aux { splits } => {
                    let split = splits[m];
                    let mask = baselines::aux_bottom_mask(&self.registry, split)?;
                    k_m = mask.iter().filter(|&&z| z == 1).count();
                    expected_cost = mask_cost(&mask, cost);
                    let subs = self.seq_losses(
                        &mut tape,
                        &batch,
                        None,
                        1 + m as u64,
                        None,
                        None,
                        Some(split),
                    )?;
                    let (l_sub, lam, raw) = self.focal_mean(&mut tape, &subs)?;
                    lambda_mean = lam;
                    loss_sub = raw;
                    loss = tape.add(loss, l_sub)?;
                }
            }
        }

        let total = Scalar::to_f64(tape.value(loss).item());
        let loss_super = Scalar::to_f64(tape.value(l_sup).item());
        if !total.is_finite() {
            return Err(Error::Divergence {
                step: t,
                diagnostic: format!(
                    "total {total}, super {loss_super}, sub {loss_sub}, reg {loss_orthog}"
                ),
            });
        }
        tape.backward(loss, &mut self.store)?;

        let lr = lr_schedule(t, self.cfg.total_steps, self.cfg.peak_lr);
        self.opt.begin_step();
        self.opt
            .update(&mut self.store, &self.theta_ids.clone(), lr, self.cfg.weight_decay);
        if !self.learner_ids.is_empty() {
            self.opt.update(
                &mut self.store,
                &self.learner_ids.clone(),
                lr * self.cfg.score_lr_mult,
                0.0,
            );
        }

        Ok(MetricsRow {
            step: t,
            phase: 1,
            temperature: temp,
            beta,
            lambda_mean,
            m_sampled: m.map_or(-1, |v| v as i64),
            k_m,
            expected_cost_m: expected_cost,
            loss_super,
            loss_sub,
            loss_orthog,
            lr,
        })
    }

    /// Round masks, freeze the mask learner, and precompute Step-2 schedules.
    /// Idempotent: a second call is a no-op.
    pub fn transition(&mut self) -> Result<()> {
        if self.masks_meta.is_some() {
            return Ok(());
        }
        let s1 = self.cfg.step1_steps();
        let masks: Vec<Vec<u8>> = match &self.learner {
            Learner::None => Vec::new(),
            Learner::Ortho { s } => {
                let cost = self.cost.as_ref().expect("budgets imply cost");
                let scores = self.store.value(*s).to_f64();
                let w = orthomask::weights(&scores, orthomask::temperature(s1))?;
                orthomask::round_masks(&w, &self.budgets, cost)?
            }
            Learner::Topk { scores } => {
                let cost = self.cost.as_ref().expect("budgets imply cost");
                let sc: Vec<f64> = self
                    .store
                    .value(*scores)
                    .data()
                    .iter()
                    .map(|&v| Scalar::to_f64(v))
                    .collect();
                self.budgets
                    .iter()
                    .map(|b| baselines::ste_mask(&sc, cost, b.tau))
                    .collect()
            }
            Learner::L0 { log_alpha } => {
                let cost = self.cost.as_ref().expect("budgets imply cost");
                let mut out = Vec::new();
                for (m, id) in log_alpha.iter().enumerate() {
                    let la: Vec<f64> = self
                        .store
                        .value(*id)
                        .data()
                        .iter()
                        .map(|&v| Scalar::to_f64(v))
                        .collect();
                    let mask = baselines::l0_final_mask(&la, cost, self.budgets[m].tau)
                        .map_err(|e| match e {
                            Error::BudgetInfeasible { msg, .. } => {
                                Error::BudgetInfeasible { subnet: m, msg }
                            }
                            other => other,
                        })?;
                    out.push(mask);
                }
                out
            }
            Learner::Aux { splits } => splits
                .iter()
                .map(|&split| baselines::aux_bottom_mask(&self.registry, split))
                .collect::<Result<Vec<_>>>()?,
        };

        let mut metas = Vec::with_capacity(masks.len());
        for (m, mask) in masks.iter().enumerate() {
            let cost = self.cost.as_ref().expect("budgets imply cost");
            let budget = &self.budgets[m];
            if !verify(mask, cost, budget.tau) {
                return Err(Error::BudgetInfeasible {
                    subnet: m,
                    msg: format!("rounded mask cost {} >= tau {}", mask_cost(mask, cost), budget.tau),
                });
            }
            let aux_split = match &self.learner {
                Learner::Aux { splits } => Some(splits[m]),
                _ => None,
            };
            metas.push(MaskMeta {
                tau: budget.tau,
                criterion: budget.criterion,
                k: mask.iter().filter(|&&z| z == 1).count(),
                group_ids: mask
                    .iter()
                    .enumerate()
                    .filter(|(_, &z)| z == 1)
                    .map(|(i, _)| i)
                    .collect(),
                verify_cost: mask_cost(mask, cost),
                aux_split,
            });
        }
        self.install_masks(masks, metas);
        Ok(())
    }

    fn install_masks(&mut self, masks: Vec<Vec<u8>>, metas: Vec<MaskMeta>) {
        self.droppable = self.compute_droppable(masks.first());
        self.ffn_rates = masks.iter().map(|m| self.compute_ffn_rates(m)).collect();
        self.masks_bin = Some(masks);
        self.masks_meta = Some(metas);
    }

    /// Modules whose groups are all absent from the smallest subnet's mask.
    fn compute_droppable(&self, smallest: Option<&Vec<u8>>) -> Vec<bool> {
        let blocks = self.encoder.config.num_blocks;
        let mut out = vec![false; 4 * blocks];
        let Some(mask) = smallest else {
            return out;
        };
        for b in 0..blocks {
            for kind in Kind::ALL {
                let gids = self.registry.module_group_ids(b, kind);
                out[b * 4 + kind.index()] =
                    !gids.is_empty() && gids.iter().all(|&g| mask[g] == 0);
            }
        }
        out
    }

    /// Width-adapted FFN dropout rates: base · retained/total hidden chunks.
    fn compute_ffn_rates(&self, mask: &[u8]) -> Vec<f64> {
        let blocks = self.encoder.config.num_blocks;
        let base = self.encoder.config.dropout_base;
        let mut out = vec![base; 2 * blocks];
        for b in 0..blocks {
            for (slot, kind) in [(0usize, Kind::Ffn1), (1, Kind::Ffn2)] {
                let gids = self.registry.module_group_ids(b, kind);
                if gids.is_empty() {
                    continue;
                }
                let kept = gids.iter().filter(|&&g| mask[g] == 1).count();
                out[b * 2 + slot] = base * kept as f64 / gids.len() as f64;
            }
        }
        out
    }

    fn step2_step(&mut self) -> Result<MetricsRow> {
        let t = self.step;
        let s1 = self.cfg.step1_steps();
        let temp = orthomask::temperature(s1);
        let batch = self.pick_batch(t);
        let masks = self
            .masks_bin
            .as_ref()
            .ok_or_else(|| Error::State("step2 before transition".into()))?
            .clone();
        let m_count = masks.len();

        // sandwich: the supernet always forwards; subnets contribute the
        // smallest plus one more (sampled medium, or the largest subnet under
        // that rule)
        let forwarded: Vec<usize> = if m_count == 0 {
            Vec::new()
        } else if m_count == 1 {
            vec![0]
        } else {
            match self.cfg.largest {
                LargestRule::Supernet => {
                    let mut rng = CounterRng::new(self.cfg.seed, &[streams::SUBNET_PICK, t]);
                    vec![0, 1 + rng.below(m_count - 1)]
                }
                LargestRule::LargestSubnet => vec![0, m_count - 1],
            }
        };

        let mut tape: Tape<S> = Tape::new();
        self.store.zero_grads();

        let layer_drop = if self.cfg.layer_drop_p > 0.0 && !self.droppable.is_empty() {
            Some(self.droppable.clone())
        } else {
            None
        };
        let sup_losses =
            self.seq_losses(&mut tape, &batch, None, 0, None, layer_drop.as_deref(), None)?;
        let l_sup = self.mean_of(&mut tape, &sup_losses)?;

        let mut loss = l_sup;
        let mut lam_sum = 0.0;
        let mut lam_count = 0usize;
        let mut loss_sub_sampled = 0.0;
        let mut m_sampled: i64 = -1;

        for (slot, &m) in forwarded.iter().enumerate() {
            let gates = mask_gates::<S>(&masks[m]);
            let rates = self.ffn_rates[m].clone();
            let medium_drop = if self.cfg.layer_drop_scope == LayerDropScope::SupernetAndMedium
                && m != 0
            {
                layer_drop.clone()
            } else {
                None
            };
            let aux_split = match &self.learner {
                Learner::Aux { splits } => Some(splits[m]),
                _ => None,
            };
            let subs = self.seq_losses(
                &mut tape,
                &batch,
                if aux_split.is_some() { None } else { Some(&gates) },
                1 + m as u64,
                Some(&rates),
                medium_drop.as_deref(),
                aux_split,
            )?;
            let (l_sub, lam, raw) = self.focal_mean(&mut tape, &subs)?;
            lam_sum += lam * subs.len() as f64;
            lam_count += subs.len();
            loss = tape.add(loss, l_sub)?;
            let is_reported = (m_count == 1 && slot == 0) || (m_count >= 2 && slot == 1);
            if is_reported {
                loss_sub_sampled = raw;
                m_sampled = m as i64;
            }
        }

        let total = Scalar::to_f64(tape.value(loss).item());
        let loss_super = Scalar::to_f64(tape.value(l_sup).item());
        if !total.is_finite() {
            return Err(Error::Divergence {
                step: t,
                diagnostic: format!("total {total}, super {loss_super}"),
            });
        }
        tape.backward(loss, &mut self.store)?;

        let lr = lr_schedule(t, self.cfg.total_steps, self.cfg.peak_lr);
        self.opt.begin_step();
        self.opt
            .update(&mut self.store, &self.theta_ids.clone(), lr, self.cfg.weight_decay);

        let (k_m, ecost) = if m_sampled >= 0 {
            let m = m_sampled as usize;
            let cost = self.cost.as_ref().expect("budgets imply cost");
            let k = masks[m].iter().filter(|&&z| z == 1).count();
            (k, mask_cost(&masks[m], cost))
        } else {
            (0, 0.0)
        };

        Ok(MetricsRow {
            step: t,
            phase: 2,
            temperature: temp,
            beta: 1.0,
            lambda_mean: if lam_count > 0 {
                lam_sum / lam_count as f64
            } else {
                0.0
            },
            m_sampled,
            k_m,
            expected_cost_m: ecost,
            loss_super,
            loss_sub: loss_sub_sampled,
            loss_orthog: 0.0,
            lr,
        })
    }

    fn gates_from_row(&self, tape: &mut Tape<S>, z: Var, n: usize) -> Result<Vec<Gate<S>>> {
        let mut gates = Vec::with_capacity(n);
        for j in 0..n {
            let g = tape.gather_cols(z, &[j])?;
            gates.push(Gate::Var(g));
        }
        Ok(gates)
    }

    /// Label error rate of a model over a corpus, decoding greedily on the
    /// structurally pruned encoder when a mask is given.
    pub fn evaluate(&self, mask: Option<&[u8]>, head: EvalHead, corpus: &Corpus) -> Result<f64> {
        evaluate(&self.encoder, &self.store, &self.registry, mask, head, corpus)
    }

    /// Evaluate rounded subnet `m` on the dev set.
    pub fn evaluate_subnet(&self, m: usize) -> Result<f64> {
        let masks = self
            .masks_bin
            .as_ref()
            .ok_or_else(|| Error::State("subnet evaluation before transition".into()))?;
        if m >= masks.len() {
            return Err(Error::State(format!(
                "subnet {m} out of range ({} available)",
                masks.len()
            )));
        }
        let head = match &self.learner {
            Learner::Aux { splits } => EvalHead::Aux(splits[m]),
            _ => EvalHead::Main,
        };
        self.evaluate(Some(&masks[m]), head, &self.dev_corpus.clone())
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let meta = CheckpointMeta {
            dtype: S::DTYPE.name().to_string(),
            config_hash: self.config_hash.clone(),
            config_toml: self.config_toml.clone(),
            step: self.step,
            opt_t: self.opt.t,
            learner: self.learner.kind().name().to_string(),
            masks: self.masks_meta.clone(),
        };
        save_checkpoint(path, &meta, &self.store, &self.opt)
    }

    /// Restore parameters, optimizer state, step counter, and masks from a
    /// checkpoint produced by a run with the same configuration.
    pub fn load_resume(&mut self, path: &std::path::Path) -> Result<()> {
        let (meta, tensors) = load_checkpoint::<S>(path)?;
        if meta.config_hash != self.config_hash {
            return Err(Error::State(format!(
                "checkpoint config hash {} does not match run {}",
                meta.config_hash, self.config_hash
            )));
        }
        if meta.learner != self.learner.kind().name() {
            return Err(Error::State(format!(
                "checkpoint learner {} does not match run {}",
                meta.learner,
                self.learner.kind().name()
            )));
        }
        let ids: Vec<(ParamId, String)> = self
            .store
            .iter()
            .map(|(id, name, _)| (id, name.to_string()))
            .collect();
        for (id, name) in ids {
            let t = tensors
                .get(&name)
                .ok_or_else(|| Error::Format(format!("checkpoint missing tensor {name}")))?;
            if t.shape() != self.store.value(id).shape() {
                return Err(Error::Format(format!("checkpoint tensor {name} shape mismatch")));
            }
            *self.store.value_mut(id) = t.clone();
            let m = tensors
                .get(&format!("opt/m/{name}"))
                .ok_or_else(|| Error::Format(format!("checkpoint missing opt/m/{name}")))?;
            let v = tensors
                .get(&format!("opt/v/{name}"))
                .ok_or_else(|| Error::Format(format!("checkpoint missing opt/v/{name}")))?;
            self.opt.m[id.0] = m.clone();
            self.opt.v[id.0] = v.clone();
        }
        self.opt.t = meta.opt_t;
        self.step = meta.step;
        if let Some(metas) = meta.masks {
            let n = self.registry.len();
            let masks: Vec<Vec<u8>> = metas
                .iter()
                .map(|mm| {
                    let mut mask = vec![0u8; n];
                    for &g in &mm.group_ids {
                        mask[g] = 1;
                    }
                    mask
                })
                .collect();
            self.install_masks(masks, metas);
        }
        Ok(())
    }

    /// masks.json payload.
    pub fn masks_json(&self) -> Result<String> {
        let metas = self
            .masks_meta
            .as_ref()
            .ok_or_else(|| Error::State("masks requested before transition".into()))?;
        let doc = serde_json::json!({
            "config_hash": self.config_hash,
            "learner": self.learner.kind().name(),
            "subnets": metas,
        });
        serde_json::to_string_pretty(&doc).map_err(|e| Error::Format(e.to_string()))
    }
}

/// Greedy-decode LER of (optionally masked-and-pruned) encoder over a corpus.
pub fn evaluate<S: Scalar>(
    encoder: &Encoder,
    store: &ParamStore<S>,
    registry: &GroupRegistry,
    mask: Option<&[u8]>,
    head: EvalHead,
    corpus: &Corpus,
) -> Result<f64> {
    let pruned;
    let pstore;
    let (enc, st): (&Encoder, &ParamStore<S>) = match mask {
        Some(m) => {
            let (e, s) = encoder.structural_prune(store, registry, m)?;
            pruned = e;
            pstore = s;
            (&pruned, &pstore)
        }
        None => (encoder, store),
    };
    let mut hyps = Vec::with_capacity(corpus.len());
    let mut refs = Vec::with_capacity(corpus.len());
    for sample in &corpus.samples {
        let feats = sample.features_tensor::<S>();
        let mut tape: Tape<S> = Tape::new();
        let lp = match head {
            EvalHead::Main => enc.forward(&mut tape, st, &feats, &ForwardOpts::eval())?,
            EvalHead::Aux(split) => {
                enc.aux_head_forward(&mut tape, st, &feats, split, &ForwardOpts::eval())?
            }
        };
        hyps.push(greedy_decode(tape.value(lp)));
        refs.push(sample.labels.clone());
    }
    Ok(label_error_rate(&hyps, &refs))
}
